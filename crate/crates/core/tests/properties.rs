use std::f64::consts::PI;

use nalgebra::DMatrix;
use proptest::prelude::*;
use riemannformer::attention::{
    attention_weights, attenuation_matrix, lf_attention, softmax_rows, softplus, Attenuation,
};
use riemannformer::geometry::{
    compatibility_residual, reflection_block, rotation_block, skew_exp, General2DBlock, Scale,
    ScaleMode, ScaleSchedule, SkewGenerator,
};
use riemannformer::positional::{apply_tangent_alignment, rope, score_matrix};
use riemannformer::{Layout, TangentTransform, Tensor};

fn frob(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

fn scale_strategy() -> impl Strategy<Value = Scale> {
    prop_oneof![
        (-1.0..3.0f64).prop_map(|w| Scale::new(w, ScaleMode::bounded())),
        (-0.3..0.3f64).prop_map(|w| Scale::new(w, ScaleMode::Free)),
        (-1.0..3.0f64, 2u32..6).prop_map(|(w, b)| Scale::new(w, ScaleMode::bounded())
            .with_schedule(ScaleSchedule::Log { base: b as f64 })),
    ]
}

fn angles(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-PI..PI, n)
}

/// A transform of any kind on four channels.
fn transform() -> impl Strategy<Value = TangentTransform> {
    prop_oneof![
        (angles(2), scale_strategy())
            .prop_map(|(angles, scale)| TangentTransform::BlockRotation { angles, scale }),
        (angles(2), scale_strategy())
            .prop_map(|(angles, scale)| TangentTransform::BlockReflection { angles, scale }),
        (angles(1), angles(1), scale_strategy()).prop_map(|(a, b, scale)| {
            TangentTransform::Mixed4x4 {
                angles: a.into_iter().zip(b).collect(),
                scale,
            }
        }),
        (prop::collection::vec(-0.5..0.5f64, 6), scale_strategy()).prop_map(|(upper, scale)| {
            TangentTransform::DenseSkewExp {
                generator: SkewGenerator::new(4, upper).unwrap(),
                scale,
            }
        }),
        (prop::collection::vec((-1.0..3.0f64, -1.0..3.0f64, -PI..PI), 2)).prop_map(|b| {
            TangentTransform::General2D {
                blocks: b
                    .into_iter()
                    .map(|(w1, w2, theta)| General2DBlock { w1, w2, theta })
                    .collect(),
                mode: ScaleMode::bounded(),
                schedule: ScaleSchedule::Linear,
            }
        }),
    ]
}

fn rows(l: usize, d: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0..1.0f64, l * d)
        .prop_map(move |v| Tensor::new(vec![l, d], v).unwrap())
}

fn max_abs(t: &Tensor) -> f64 {
    t.data().iter().fold(0.0, |a, v| a.max(v.abs()))
}

fn aligned_scores(t: &TangentTransform, q: &Tensor, k: &Tensor, start: usize) -> Tensor {
    let pos: Vec<usize> = (start..start + q.shape()[0]).collect();
    score_matrix(
        &apply_tangent_alignment(q, &pos, t).unwrap(),
        &apply_tangent_alignment(k, &pos, t).unwrap(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn relative_transform_matches_product(t in transform(), m in 0usize..=64, n in 0usize..=64) {
        let product = t.matrix(m) * t.inverse_matrix(n);
        let err = frob(&(t.relative(m, n) - &product)) / frob(&product).max(1.0);
        prop_assert!(err <= 1e-10, "{err:e}");
    }

    #[test]
    fn paired_metric_is_compatible(t in transform(), m in 0usize..=64, n in 0usize..=64) {
        let metric = t.paired_metric();
        let size = |k: usize| frob(&t.matrix(k)).powi(2) * frob(&metric.matrix(k)) / (t.dim() as f64).powf(1.5);
        let r = compatibility_residual(&metric, &t, m, n).unwrap() / size(m).max(size(n)).max(1.0);
        prop_assert!(r <= 1e-10, "{r:e}");
    }

    #[test]
    fn transport_preserves_metric_norm(t in transform(), m in 0usize..=64, n in 0usize..=64,
                                       v in prop::collection::vec(-1.0..1.0f64, 4)) {
        let metric = t.paired_metric();
        let pv = t.parallel_transport(n, m, &v).unwrap();
        let (a, b) = (metric.inner(n, &v, &v).unwrap(), metric.inner(m, &pv, &pv).unwrap());
        let sq = |x: &[f64]| x.iter().map(|c| c * c).sum::<f64>();
        let size = (frob(&metric.matrix(n)) * sq(&v)).max(frob(&metric.matrix(m)) * sq(&pv)).max(1.0);
        prop_assert!((a - b).abs() / size <= 1e-10);
    }

    #[test]
    fn blockwise_application_matches_dense(t in transform(), x in rows(6, 4),
                                           pos in prop::collection::vec(0usize..=64, 6)) {
        let fast = apply_tangent_alignment(&x, &pos, &t).unwrap();
        for (i, &p) in pos.iter().enumerate() {
            let dense = t.inverse_matrix(p) * DMatrix::from_row_slice(4, 1, &x.data()[4 * i..4 * i + 4]);
            for r in 0..4 {
                let err = (fast.get(&[i, r]) - dense[r]).abs() / dense[r].abs().max(1.0);
                prop_assert!(err <= 1e-10);
            }
        }
    }

    #[test]
    fn reflection_algebra(t in -PI..PI, t1 in -PI..PI, t2 in -PI..PI) {
        let r = reflection_block(t);
        prop_assert!((r.determinant() + 1.0).abs() <= 1e-12);
        prop_assert!((r * r - nalgebra::Matrix2::identity()).norm() <= 1e-12);
        let pair = reflection_block(t1 / 2.0) * reflection_block(t2 / 2.0);
        prop_assert!((pair - rotation_block(t1 - t2)).norm() <= 1e-12);
        prop_assert!(((reflection_block(t2) * rotation_block(t1)).determinant() + 1.0).abs() <= 1e-12);
    }

    #[test]
    fn skew_exp_matches_block_rotations(th in prop::collection::vec(-10.0..10.0f64, 1..6)) {
        let d = 2 * th.len();
        let mut x = DMatrix::zeros(d, d);
        let mut expect = DMatrix::zeros(d, d);
        for (j, &a) in th.iter().enumerate() {
            x[(2 * j + 1, 2 * j)] = a;
            x[(2 * j, 2 * j + 1)] = -a;
            expect.view_mut((2 * j, 2 * j), (2, 2)).copy_from(&rotation_block(a));
        }
        prop_assert!(frob(&(skew_exp(&x).unwrap() - expect)) <= 1e-12 * d as f64);
    }

    #[test]
    fn skew_exp_agrees_with_nalgebra(upper in prop::collection::vec(-2.0..2.0f64, 15)) {
        let x = SkewGenerator::new(6, upper).unwrap().matrix();
        let ours = skew_exp(&x).unwrap();
        prop_assert!(frob(&(&ours - x.exp())) <= 1e-10);
        prop_assert!(frob(&(ours.transpose() * &ours - DMatrix::identity(6, 6))) <= 1e-10);
    }

    #[test]
    fn log_schedule_is_exact_at_powers(base in 2u32..=10, k in 0i32..=12) {
        let m = (base as u64).pow(k as u32);
        prop_assume!(m <= 1 << 40);
        prop_assert_eq!(ScaleSchedule::Log { base: base as f64 }.exponent(m as usize), k as f64);
    }

    #[test]
    fn unit_scale_rotation_is_rope(th in angles(4), q in rows(12, 8), k in rows(12, 8)) {
        let pos: Vec<usize> = (0..12).collect();
        let t = TangentTransform::BlockRotation { angles: th.iter().map(|a| -a).collect(), scale: Scale::unit() };
        let ours = aligned_scores(&t, &q, &k, 0);
        let reference = score_matrix(&rope(&q, &pos, &th).unwrap(), &rope(&k, &pos, &th).unwrap()).unwrap();
        prop_assert!(ours.max_abs_diff(&reference) <= 1e-12 * max_abs(&reference).max(1.0));
    }

    #[test]
    fn unit_scale_scores_are_relative(th in angles(3), q in rows(10, 6), k in rows(10, 6), c in 1usize..40) {
        let t = TangentTransform::BlockRotation { angles: th, scale: Scale::unit() };
        let (a, b) = (aligned_scores(&t, &q, &k, 0), aligned_scores(&t, &q, &k, c));
        prop_assert!(a.max_abs_diff(&b) <= 1e-12 * max_abs(&a).max(1.0));
    }

    #[test]
    fn shift_multiplies_logits_by_scale_power(th in angles(3), w in -1.0..3.0f64, q in rows(8, 6),
                                              k in rows(8, 6), c in 1usize..20) {
        let scale = Scale::new(w, ScaleMode::bounded());
        let factor = (c as f64 * scale.ln_value()).exp();
        let t = TangentTransform::BlockRotation { angles: th, scale };
        let (a, b) = (aligned_scores(&t, &q, &k, 0), aligned_scores(&t, &q, &k, c));
        let expect = a.map(|v| v * factor);
        prop_assert!(b.max_abs_diff(&expect) <= 1e-10 * max_abs(&expect));
    }

    #[test]
    fn reflection_scores_are_doubled_rotation(th in angles(3), q in rows(10, 6), k in rows(10, 6)) {
        let refl = TangentTransform::BlockReflection { angles: th.clone(), scale: Scale::unit() };
        let rot = TangentTransform::BlockRotation { angles: th.iter().map(|a| 2.0 * a).collect(), scale: Scale::unit() };
        let (a, b) = (aligned_scores(&refl, &q, &k, 0), aligned_scores(&rot, &q, &k, 0));
        prop_assert!(a.max_abs_diff(&b) <= 1e-10);
    }

    #[test]
    fn softmax_rows_normalize_and_ignore_shifts(x in rows(4, 7), c in -50.0..50.0f64) {
        let s = softmax_rows(&x);
        for r in s.data().chunks(7) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        prop_assert!(softmax_rows(&x.map(|v| v + c)).max_abs_diff(&s) <= 1e-12);
    }

    #[test]
    fn shared_width_omega_is_symmetric(sigma in -2.0..3.0f64, f in prop::collection::vec(-1.5..1.5f64, 3)) {
        let layout = Layout::Grid { rows: 3, cols: 4 };
        let om = attenuation_matrix(layout, &Attenuation { sigma_raw: vec![sigma], factor: Some(f) }).unwrap();
        for m in 0..12 {
            prop_assert_eq!(om.get(&[m, m]), 1.0);
            for n in 0..12 {
                prop_assert_eq!(om.get(&[m, n]), om.get(&[n, m]));
                prop_assert!(om.get(&[m, n]) >= 0.0 && om.get(&[m, n]) <= 1.0);
            }
        }
    }

    #[test]
    fn unnormalized_lf_rows_are_bounded_by_values(q in rows(9, 4), k in rows(9, 4), v in rows(9, 3),
                                                  sigma in prop::collection::vec(-2.0..3.0f64, 9)) {
        let s = attention_weights(&q, &k).unwrap();
        let om = attenuation_matrix(Layout::Sequence { len: 9 }, &Attenuation { sigma_raw: sigma, factor: None }).unwrap();
        let out = lf_attention(&s, &om, &v, false).unwrap();
        let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let bound = v.data().chunks(3).map(norm).fold(0.0, f64::max);
        for r in out.data().chunks(3) {
            prop_assert!(norm(r) <= bound + 1e-12);
        }
    }

    /// Output as a sum over keys of a range kernel (the attention weight)
    /// times a spatial kernel, both evaluated from scratch.
    #[test]
    fn lf_is_a_bilateral_filter(q in rows(6, 4), k in rows(6, 4), v in rows(6, 2),
                                sigma_raw in -1.0..2.0f64, l00 in 0.3..2.0f64) {
        let s = attention_weights(&q, &k).unwrap();
        let att = Attenuation { sigma_raw: vec![sigma_raw], factor: Some(vec![l00]) };
        let om = attenuation_matrix(Layout::Sequence { len: 6 }, &att).unwrap();
        let out = lf_attention(&s, &om, &v, false).unwrap();
        let sigma = softplus(sigma_raw);
        let a = l00 * l00 + 1e-6;
        for m in 0..6 {
            let logits: Vec<f64> = (0..6)
                .map(|n| (0..4).map(|c| q.get(&[m, c]) * k.get(&[n, c])).sum::<f64>() / 2.0)
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..2 {
                let mut acc = 0.0;
                for (n, l) in logits.iter().enumerate() {
                    let d = m as f64 - n as f64;
                    acc += l.exp() / z * (-a * d * d / (2.0 * sigma * sigma)).exp() * v.get(&[n, c]);
                }
                prop_assert!((out.get(&[m, c]) - acc).abs() <= 1e-12);
            }
        }
    }
}
