use std::collections::BTreeMap;

use riemannformer::attention::{LfConfig, MetricMode, SigmaMode};
use riemannformer::data::{
    load_cifar10, synthetic_images, write_cifar, CifarData, CifarKind, Dataset, ImageSet,
};
use riemannformer::presets::{overfit_model, position_data, position_model, position_training};
use riemannformer::training::{evaluate, train, LrSchedule, TrainConfig, TrainOutput};
use riemannformer::{
    Checkpoint, Graph, InputSpec, Mechanism, ParamGroup, TransformKind, ViTConfig, Vit,
};

fn images(count: usize, seed: u64) -> Dataset {
    Dataset::Images(ImageSet {
        kind: CifarKind::Cifar10,
        images: synthetic_images(CifarKind::Cifar10, count, seed),
    })
}

/// The overfit model on 8x8 patches, which keeps sixteen tokens per image.
fn small_image_model(mechanism: Mechanism, lf: Option<LfConfig>) -> ViTConfig {
    ViTConfig {
        input: InputSpec::Image {
            size: 32,
            patch: 8,
            channels: 3,
        },
        lf,
        ..overfit_model(mechanism, 10)
    }
}

#[test]
fn geometry_and_lf_parameters_receive_gradient() {
    let lf = LfConfig {
        sigma_mode: SigmaMode::PerPosition,
        metric: MetricMode::Learned,
        ..LfConfig::default()
    };
    for mechanism in [
        Mechanism::Riemann(TransformKind::BlockRotation),
        Mechanism::Riemann(TransformKind::General2D),
        Mechanism::Riemann(TransformKind::DenseSkewExp),
    ] {
        let cfg = small_image_model(mechanism, Some(lf));
        let (vit, mut store) = Vit::new(cfg, 1).unwrap();
        let data = images(8, 1);
        let x = data
            .batch(&(0..8).collect::<Vec<_>>(), cfg.input, None)
            .unwrap();
        let labels: Vec<usize> = (0..8).map(|i| data.label(i)).collect();
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let logits = vit.forward(&mut g, &store, xv, None).unwrap();
        let loss = g.cross_entropy(logits, &labels).unwrap();
        let grads = g.backward(loss).unwrap();
        g.accumulate_param_grads(&grads, &mut store);

        let mut norms: BTreeMap<ParamGroup, f64> = BTreeMap::new();
        for (_, p) in store.iter() {
            *norms.entry(p.group).or_default() += p.grad.data().iter().map(|v| v * v).sum::<f64>();
        }
        let expected: &[ParamGroup] = match mechanism {
            Mechanism::Riemann(TransformKind::DenseSkewExp) => {
                &[ParamGroup::Skew, ParamGroup::ScaleW]
            }
            _ => &[ParamGroup::Theta, ParamGroup::ScaleW],
        };
        for group in expected
            .iter()
            .chain(&[ParamGroup::Sigma, ParamGroup::AFactor])
        {
            let n = norms.get(group).copied().unwrap_or(0.0);
            assert!(n > 0.0, "{mechanism}: no gradient reaches {group}");
        }
    }
}

#[test]
fn loss_falls_for_every_mechanism() {
    let train_set = images(128, 2);
    let test_set = images(32, 3);
    for mechanism in Mechanism::ALL {
        let model = small_image_model(mechanism, Some(LfConfig::default()));
        let (vit, mut store) = Vit::new(model, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            batch: 32,
            schedule: LrSchedule::Constant,
            ..position_training(2)
        };
        let report = train(
            &vit,
            &mut store,
            &cfg,
            &train_set,
            &test_set,
            &TrainOutput::default(),
            |_| {},
        )
        .unwrap();
        let mut later: Vec<f64> = report.history[1..].iter().map(|m| m.train_loss).collect();
        later.sort_by(f64::total_cmp);
        let median = later[later.len() / 2];
        assert!(
            median < report.history[0].train_loss,
            "{mechanism}: median {median} vs first epoch {}",
            report.history[0].train_loss
        );
    }
}

#[test]
fn checkpoints_reproduce_the_recorded_model() {
    let dir = tempfile::tempdir().unwrap();
    let (train_set, test_set) = position_data(5).unwrap();
    let model = position_model(
        Mechanism::Riemann(TransformKind::BlockReflection),
        Some(LfConfig::default()),
    );
    let (vit, mut store) = Vit::new(model, 5).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        subset: Some(512),
        ..position_training(5)
    };
    let report = train(
        &vit,
        &mut store,
        &cfg,
        &train_set,
        &test_set,
        &TrainOutput::to(dir.path()),
        |_| {},
    )
    .unwrap();

    let best = Checkpoint::load(&dir.path().join(TrainOutput::BEST)).unwrap();
    assert_eq!(best.config, model);
    let (vit_b, store_b) = best.model().unwrap();
    let acc = evaluate(&vit_b, &store_b, &test_set, 256).unwrap();
    assert_eq!(acc, report.best_test_acc);

    let last = Checkpoint::load(&dir.path().join(TrainOutput::LAST)).unwrap();
    assert_eq!(last.step as usize, report.steps);
    let (vit_l, store_l) = last.model().unwrap();
    let acc = evaluate(&vit_l, &store_l, &test_set, 256).unwrap();
    assert_eq!(acc, report.history.last().unwrap().test_acc);

    let metrics = std::fs::read_to_string(dir.path().join(TrainOutput::METRICS)).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    for (i, line) in metrics.lines().enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), 5);
        assert_eq!(cols[0], i.to_string());
    }
}

#[test]
fn written_archives_load_back_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let data = CifarData {
        train: ImageSet {
            kind: CifarKind::Cifar10,
            images: synthetic_images(CifarKind::Cifar10, 25, 1),
        },
        test: ImageSet {
            kind: CifarKind::Cifar10,
            images: synthetic_images(CifarKind::Cifar10, 7, 2),
        },
    };
    write_cifar(dir.path(), CifarKind::Cifar10, &data).unwrap();
    let back = load_cifar10(dir.path()).unwrap();
    assert_eq!(back.train.images.len(), 25);
    assert_eq!(back.test.images.len(), 7);
    for (a, b) in back.train.images.iter().zip(&data.train.images) {
        assert_eq!(
            a.to_record(CifarKind::Cifar10),
            b.to_record(CifarKind::Cifar10)
        );
    }
}
