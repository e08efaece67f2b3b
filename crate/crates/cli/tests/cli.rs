use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use riemannformer::data::{synthetic_images, write_cifar, CifarData, CifarKind, ImageSet};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_riemannformer"))
        .args(args)
        .env_remove("RIEMANNFORMER_DATA")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_matrix(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

/// Two epochs of the marker task with locality focusing, small enough for a test.
fn train_synthetic(out: &Path, seed: &str) -> Output {
    run(&[
        "train",
        "--dataset",
        "synthetic",
        "--lf",
        "--epochs",
        "2",
        "--subset",
        "128",
        "--no-wall-time",
        "--seed",
        seed,
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn verify_filter_passes_and_empty_filter_is_a_usage_error() {
    let o = run(&["verify", "--filter", "reflection", "--trials", "20"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("PASS  reflection_algebra"));
    assert!(!out.contains("rotation_group"));

    let o = run(&["verify", "--filter", "no_such_property"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("available:"));
}

#[test]
fn injected_fault_fails_and_replays() {
    let o = run(&["verify", "--inject-fault", "scale-sign", "--trials", "20"]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.contains("FAIL  compatibility_residual"), "{out}");

    let line = out
        .lines()
        .find(|l| l.contains("verify --filter compatibility_residual --replay"))
        .unwrap();
    let sub_seed = line.rsplit(' ').next().unwrap();
    let o = run(&[
        "verify",
        "--inject-fault",
        "scale-sign",
        "--filter",
        "compatibility_residual",
        "--replay",
        sub_seed,
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&[
        "verify",
        "--filter",
        "compatibility_residual",
        "--replay",
        sub_seed,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}

#[test]
fn gradcheck_exit_status_follows_tolerance() {
    let o = run(&["gradcheck", "--mechanism", "riemann-general", "--lf"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("a_factor"));

    let o = run(&["gradcheck", "--tolerance", "1e-14"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("analytic"));

    let o = run(&["gradcheck", "--mechanism", "alibi"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn training_is_reproducible_and_heatmaps_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = train_synthetic(&a, "3");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("best test accuracy"));
    assert_eq!(train_synthetic(&b, "3").status.code(), Some(0));
    for f in ["metrics.tsv", "best.ckpt", "last.ckpt"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }

    let ckpt = a.join("best.ckpt");
    let export = |what: &str, format: &str, head: &str| {
        let out = dir.path().join(format!("{what}-{head}.{format}"));
        let o = run(&[
            "export-heatmap",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--what",
            what,
            "--format",
            format,
            "--head",
            head,
            "--layer",
            "1",
            "--image-index",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        out
    };
    let omega = read_matrix(&export("omega", "csv", "1"));
    let scores = read_matrix(&export("scores", "csv", "1"));
    let product = read_matrix(&export("product", "csv", "1"));
    assert_eq!(omega.len(), 16);
    for i in 0..16 {
        assert!((omega[i][i] - 1.0).abs() < 1e-12);
        assert!((scores[i].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for j in 0..16 {
            assert!((omega[i][j] - omega[j][i]).abs() < 1e-12);
            assert_eq!(product[i][j], scores[i][j] * omega[i][j]);
        }
    }

    let pgm = fs::read(export("omega", "pgm", "0")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    let pixels = &pgm[b"P5\n16 16\n255\n".len()..];
    assert_eq!(pixels.len(), 256);
    assert!((0..16).all(|i| pixels[i * 17] == 255));
    assert_eq!(pixels.iter().min(), Some(&0));

    let o = run(&[
        "export-heatmap",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--what",
        "scores",
        "--head",
        "2",
        "--out",
        "x.csv",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn heatmap_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let out = dir.path().join("m.csv");
    let o = run(&[
        "export-heatmap",
        "--checkpoint",
        missing.to_str().unwrap(),
        "--what",
        "scores",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.ckpt"));

    let run_dir = dir.path().join("run");
    let o = run(&[
        "train",
        "--dataset",
        "synthetic",
        "--epochs",
        "1",
        "--subset",
        "64",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ckpt = run_dir.join("last.ckpt");
    let o = run(&[
        "export-heatmap",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--what",
        "omega",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("without locality focusing"));
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# tiny run\nepochs = 1\nlearning_rate = 0.1\n").unwrap();
    let o = run(&[
        "train",
        "--dataset",
        "synthetic",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        "unused",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(
        err.contains("line 3") && err.contains("learning_rate"),
        "{err}"
    );

    let o = run(&["train", "--dataset", "imagenet", "--out", "unused"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["train", "--out", "unused"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("RIEMANNFORMER_DATA"));
}

#[test]
fn trains_on_cifar_archives() {
    let dir = tempfile::tempdir().unwrap();
    let data = CifarData {
        train: ImageSet {
            kind: CifarKind::Cifar10,
            images: synthetic_images(CifarKind::Cifar10, 48, 1),
        },
        test: ImageSet {
            kind: CifarKind::Cifar10,
            images: synthetic_images(CifarKind::Cifar10, 16, 2),
        },
    };
    write_cifar(dir.path(), CifarKind::Cifar10, &data).unwrap();
    let cfg = dir.path().join("small.cfg");
    fs::write(
        &cfg,
        "d_model = 16\nlayers = 1\nheads = 2\npatch_size = 8\nbatch = 16\nwarmup_epochs = 0\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    let o = run(&[
        "train",
        "--data",
        dir.path().to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--mechanism",
        "riemann-mixed",
        "--epochs",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("on 48 training / 16 test items"));
    assert_eq!(
        fs::read_to_string(out.join("metrics.tsv"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let heat = dir.path().join("s.csv");
    let o = run(&[
        "export-heatmap",
        "--checkpoint",
        out.join("last.ckpt").to_str().unwrap(),
        "--data",
        dir.path().to_str().unwrap(),
        "--what",
        "scores",
        "--image-index",
        "15",
        "--out",
        heat.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(read_matrix(&heat).len(), 16);
}

#[test]
fn bench_reports_every_mechanism() {
    let o = run(&[
        "bench",
        "--seq-len",
        "8",
        "--dim",
        "8",
        "--iters",
        "3",
        "--warmup",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    for name in ["nopos", "rope", "riemann-dense", "riemann-general"] {
        assert!(
            out.lines().any(|l| l.starts_with(name)),
            "{name} missing:\n{out}"
        );
    }
    assert!(out.contains("1.00x"));
}
