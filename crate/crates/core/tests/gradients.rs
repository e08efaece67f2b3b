//! Tape gradients of every operation against central differences.

use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};
use riemannformer::attention::{
    AttentionConfig, LfConfig, MetricMode, MultiHeadAttention, SigmaMode,
};
use riemannformer::gradcheck::{grad_check, GradCheckConfig};
use riemannformer::positional::PositionConfig;
use riemannformer::rng::Rng;
use riemannformer::{
    Graph, Layout, Mechanism, ParamGroup, ParamStore, Result, Tensor, TransformKind, Var,
};

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Inputs drawn uniformly from `range`, one per `(shape, range)`. The loss is
/// a fixed random weighting of the op output, so every output entry matters.
fn max_error(seed: u64, inputs: &[(&[usize], (f64, f64))], build: &Build) -> f64 {
    let mut rng = Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, (shape, (lo, hi)))| {
            let n = shape.iter().product();
            let t = Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| rng.random_range(*lo..*hi)).collect(),
            )
            .unwrap();
            store.add(format!("x{i}"), ParamGroup::Weight, t).unwrap()
        })
        .collect();
    let weight_seed: u64 = rng.random();
    let report = grad_check(
        &mut store,
        |g, s| {
            let vars = ids
                .iter()
                .map(|&id| g.param(s, id))
                .collect::<Result<Vec<_>>>()?;
            let out = build(g, &vars)?;
            let mut wr = Rng::seed_from_u64(weight_seed);
            let shape = g.shape(out).to_vec();
            let n = shape.iter().product();
            let w = g.constant(Tensor::new(
                shape,
                (0..n).map(|_| wr.random_range(-1.0..1.0)).collect(),
            )?)?;
            let y = g.mul(out, w)?;
            g.sum(y)
        },
        GradCheckConfig::default(),
    )
    .unwrap();
    report.max_rel_error
}

const SYM: (f64, f64) = (-1.0, 1.0);
const POS: (f64, f64) = (0.5, 1.5);

macro_rules! op_test {
    ($name:ident, [$($shape:expr => $range:expr),+], |$g:ident, $v:ident| $body:expr) => {
        proptest! {
            #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]
            #[test]
            fn $name(seed in any::<u64>()) {
                let build = |$g: &mut Graph, $v: &[Var]| -> Result<Var> { $body };
                let err = max_error(seed, &[$((&$shape[..], $range)),+], &build);
                prop_assert!(err <= 1e-4, "relative error {err:e}");
            }
        }
    };
}

op_test!(add_broadcast, [[3, 4] => SYM, [4] => SYM], |g, v| g.add(v[0], v[1]));
op_test!(sub, [[2, 3] => SYM, [2, 3] => SYM], |g, v| g.sub(v[0], v[1]));
op_test!(mul_broadcast, [[2, 3, 4] => SYM, [3, 1] => SYM], |g, v| g.mul(v[0], v[1]));
op_test!(div, [[5] => SYM, [5] => POS], |g, v| g.div(v[0], v[1]));
op_test!(neg, [[4] => SYM], |g, v| g.neg(v[0]));
op_test!(scale, [[4] => SYM], |g, v| g.scale(v[0], -2.5));
op_test!(shift, [[4] => SYM], |g, v| g.shift(v[0], 0.75));
op_test!(exp, [[6] => SYM], |g, v| g.exp(v[0]));
op_test!(ln, [[6] => POS], |g, v| g.ln(v[0]));
op_test!(powf, [[6] => POS], |g, v| g.powf(v[0], -1.7));
op_test!(sqrt, [[6] => POS], |g, v| g.sqrt(v[0]));
op_test!(sin, [[6] => SYM], |g, v| g.sin(v[0]));
op_test!(cos, [[6] => SYM], |g, v| g.cos(v[0]));
op_test!(softplus, [[6] => SYM], |g, v| g.softplus(v[0]));
op_test!(gelu, [[6] => SYM], |g, v| g.gelu(v[0]));
op_test!(softmax, [[3, 5] => SYM], |g, v| g.softmax(v[0]));
op_test!(layer_norm, [[3, 6] => SYM, [6] => SYM, [6] => SYM], |g, v| g.layer_norm(v[0], v[1], v[2]));
op_test!(mean, [[2, 5] => SYM], |g, v| g.mean(v[0]));
op_test!(sum_axis, [[2, 3, 4] => SYM], |g, v| g.sum_axis(v[0], 1, false));
op_test!(mean_axis_keepdim, [[2, 3, 4] => SYM], |g, v| g.mean_axis(v[0], 2, true));
op_test!(matmul_batched, [[2, 3, 4] => SYM, [2, 4, 5] => SYM], |g, v| g.matmul(v[0], v[1]));
op_test!(matmul_broadcast, [[2, 3, 4] => SYM, [4, 5] => SYM], |g, v| g.matmul(v[0], v[1]));
op_test!(linear, [[2, 3, 4] => SYM, [4, 5] => SYM, [5] => SYM], |g, v| g.linear(v[0], v[1], v[2]));
op_test!(expm, [[2, 4, 4] => SYM], |g, v| g.expm(v[0]));
op_test!(reshape, [[2, 6] => SYM], |g, v| g.reshape(v[0], &[3, 4]));
op_test!(permute, [[2, 3, 4] => SYM], |g, v| g.permute(v[0], &[2, 0, 1]));
op_test!(transpose_last, [[2, 3, 4] => SYM], |g, v| g.transpose_last(v[0]));
op_test!(narrow, [[2, 6] => SYM], |g, v| g.narrow(v[0], 1, 2, 3));
op_test!(concat, [[2, 3] => SYM, [2, 1] => SYM], |g, v| g.concat(&[v[0], v[1]], 1));
op_test!(index_select_repeats, [[5, 2] => SYM], |g, v| g.index_select(v[0], 0, &[4, 0, 4, 2]));
op_test!(skew_from_upper, [[2, 6] => SYM], |g, v| g.skew_from_upper(v[0], 4));
op_test!(skew_expm_chain, [[6] => SYM], |g, v| {
    let x = g.skew_from_upper(v[0], 4)?;
    g.expm(x)
});
op_test!(pair_transform, [[2, 3, 4] => SYM, [3, 2] => SYM, [3, 2] => SYM, [3, 2] => SYM, [3, 2] => SYM], |g, v| {
    g.pair_transform(v[0], [v[1], v[2], v[3], v[4]])
});
op_test!(apply_matrices, [[2, 3, 4] => SYM, [3, 4, 4] => SYM], |g, v| g.apply_matrices(v[0], v[1]));
op_test!(custom_cube, [[5] => SYM], |g, v| {
    g.custom_unary(v[0], |x| x.map(|a| a * a * a), |grad, x, _| {
        let d: Vec<f64> = grad.data().iter().zip(x.data()).map(|(g, a)| 3.0 * a * a * g).collect();
        Tensor::new(x.shape().to_vec(), d).unwrap()
    })
});

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn cross_entropy(seed in any::<u64>(), a in 0usize..4, b in 0usize..4) {
        let build = move |g: &mut Graph, v: &[Var]| g.cross_entropy(v[0], &[a, b]);
        prop_assert!(max_error(seed, &[(&[2, 4], SYM)], &build) <= 1e-4);
    }

    /// Scores, mask, softmax and aggregation of one attention head.
    #[test]
    fn composed_attention_graph(seed in any::<u64>()) {
        let build = |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let q = g.matmul(v[0], v[1])?;
            let k = g.matmul(v[0], v[2])?;
            let kt = g.transpose_last(k)?;
            let s = g.matmul(q, kt)?;
            let s = g.scale(s, 0.5)?;
            let p = g.softmax(s)?;
            let sigma = g.softplus(v[3])?;
            let sq = g.mul(sigma, sigma)?;
            let omega = g.div(v[4], sq)?;
            let omega = g.neg(omega)?;
            let omega = g.exp(omega)?;
            let w = g.mul(p, omega)?;
            let o = g.matmul(w, v[0])?;
            g.gelu(o)
        };
        let shapes: [(&[usize], (f64, f64)); 5] =
            [(&[5, 4], SYM), (&[4, 4], SYM), (&[4, 4], SYM), (&[1], SYM), (&[5, 5], POS)];
        prop_assert!(max_error(seed, &shapes, &build) <= 1e-4);
    }
}

#[test]
fn replayed_tape_gives_identical_gradients() {
    let mut store = ParamStore::new();
    let mut rng = Rng::seed_from_u64(3);
    let w = store
        .add(
            "w",
            ParamGroup::Weight,
            Tensor::new(
                vec![4, 4],
                (0..16).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
        )
        .unwrap();
    let grads = |store: &ParamStore| {
        let mut g = Graph::new();
        let x = g.param(store, w).unwrap();
        let y = g.expm(x).unwrap();
        let y = g.softmax(y).unwrap();
        let y = g.sin(y).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap().get(x).unwrap().clone()
    };
    let (a, b) = (grads(&store), grads(&store));
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(p, q)| p.to_bits() == q.to_bits()));
}

/// One attention layer with tangent alignment and per-position locality
/// focusing on a 3x3 grid, checked end to end.
#[test]
fn attention_layer_with_lf_on_a_grid() {
    let lf = LfConfig {
        sigma_mode: SigmaMode::PerPosition,
        metric: MetricMode::Learned,
        ..LfConfig::default()
    };
    for kind in [
        TransformKind::BlockRotation,
        TransformKind::BlockReflection,
        TransformKind::General2D,
    ] {
        let cfg = AttentionConfig {
            d_model: 8,
            heads: 2,
            position: PositionConfig::new(Mechanism::Riemann(kind)),
            lf: Some(lf),
        };
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(11);
        let layer = MultiHeadAttention::register(
            &mut store,
            &mut rng,
            "attn",
            cfg,
            Layout::Grid { rows: 3, cols: 3 },
        )
        .unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = &mut store.get_mut(id).value;
            let jittered = t
                .data()
                .iter()
                .map(|v| v + rng.random_range(-0.3..0.3))
                .collect();
            *t = Tensor::new(t.shape().to_vec(), jittered).unwrap();
        }
        let x = Tensor::new(
            vec![1, 9, 8],
            (0..72).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let w = Tensor::new(
            vec![1, 9, 8],
            (0..72).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let report = grad_check(
            &mut store,
            |g, s| {
                let xv = g.constant(x.clone())?;
                let out = layer.forward(g, s, xv, None)?;
                let wv = g.constant(w.clone())?;
                let y = g.mul(out, wv)?;
                g.sum(y)
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{kind:?}: {:e}", report.max_rel_error);
    }
}

#[test]
fn wrong_backward_rule_is_caught() {
    let mut store = ParamStore::new();
    let x = store
        .add(
            "x",
            ParamGroup::Weight,
            Tensor::from_vec(vec![0.3, -0.7, 1.1]),
        )
        .unwrap();
    let report = grad_check(
        &mut store,
        |g, s| {
            let v = g.param(s, x)?;
            // d/dx x^3 with the factor 3 dropped
            let y = g.custom_unary(
                v,
                |t| t.map(|a| a * a * a),
                |grad, t, _| {
                    let d = grad
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(g, a)| a * a * g)
                        .collect();
                    Tensor::new(t.shape().to_vec(), d).unwrap()
                },
            )?;
            g.sum(y)
        },
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(!report.passed());
    assert_eq!(report.worst[0].param, "x");
}
