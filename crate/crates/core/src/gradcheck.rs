//! Central finite-difference verification of tape gradients.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::attention::{LfConfig, MetricMode, SigmaMode};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::geometry::TransformKind;
use crate::model::{InputSpec, ViTConfig, Vit};
use crate::params::{ParamGroup, ParamStore};
use crate::positional::{Mechanism, PositionConfig};
use crate::rng::rng_from;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Largest acceptable relative error.
    pub tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EntryError {
    pub param: String,
    pub group: ParamGroup,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Worst entries, largest error first.
    pub worst: Vec<EntryError>,
    /// Worst relative error per parameter, in store order.
    pub per_param: Vec<(String, ParamGroup, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }

    pub fn per_group(&self) -> BTreeMap<ParamGroup, f64> {
        let mut out = BTreeMap::new();
        for (_, group, err) in &self.per_param {
            let e = out.entry(*group).or_insert(0.0f64);
            *e = e.max(*err);
        }
        out
    }
}

/// `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences for every entry of every parameter in `store`.
///
/// Parameter values are restored before returning; gradient buffers hold
/// the analytic gradient afterwards.
pub fn grad_check<F>(store: &mut ParamStore, f: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    const KEEP_WORST: usize = 10;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        g.value(loss).item()
    };

    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    g.accumulate_param_grads(&grads, store);

    let mut entries = Vec::new();
    let mut per_param = Vec::new();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let (name, group, n) = {
            let p = store.get(id);
            (p.name.clone(), p.group, p.value.numel())
        };
        let mut worst = 0.0f64;
        for i in 0..n {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + cfg.eps;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig - cfg.eps;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * cfg.eps);
            let analytic = store.get(id).grad.data()[i];
            let rel_error = relative_error(analytic, numeric);
            worst = worst.max(rel_error);
            entries.push(EntryError {
                param: name.clone(),
                group,
                index: i,
                analytic,
                numeric,
                rel_error,
            });
        }
        per_param.push((name, group, worst));
    }
    let checked = entries.len();
    entries.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    entries.truncate(KEEP_WORST);
    Ok(GradCheckReport {
        tol: cfg.tol,
        checked,
        max_rel_error: entries.first().map_or(0.0, |e| e.rel_error),
        worst: entries,
        per_param,
    })
}

/// One layer, two heads, 8x8 images cut into 4x4 patches. The mixed kind
/// needs four channels per head and axis, so it gets `d_model` 16. LF uses
/// the learned metric and per-position widths so every LF parameter is
/// exercised.
pub fn micro_config(mechanism: Mechanism, lf: bool) -> ViTConfig {
    let d_model = if mechanism == Mechanism::Riemann(TransformKind::Mixed4x4) {
        16
    } else {
        8
    };
    ViTConfig {
        input: InputSpec::Image {
            size: 8,
            patch: 4,
            channels: 3,
        },
        d_model,
        heads: 2,
        layers: 1,
        mlp_ratio: 2,
        classes: 4,
        position: PositionConfig::new(mechanism),
        lf: lf.then(|| LfConfig {
            sigma_mode: SigmaMode::PerPosition,
            metric: MetricMode::Learned,
            ..LfConfig::default()
        }),
    }
}

/// Cross-entropy of the micro model on two random images. Every parameter is
/// jittered by up to `±0.3` first so that gradients are not dominated by the
/// small initial weights.
pub fn micro_model_check(
    mechanism: Mechanism,
    lf: bool,
    seed: u64,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    const BATCH: usize = 2;
    let model_cfg = micro_config(mechanism, lf);
    let (vit, mut store) = Vit::new(model_cfg, seed)?;
    let mut rng = rng_from(seed, "gradcheck");
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let (l, f) = (model_cfg.seq_len(), model_cfg.token_features());
    let tokens = Tensor::new(
        vec![BATCH, l, f],
        (0..BATCH * l * f)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )?;
    let labels: Vec<usize> = (0..BATCH)
        .map(|_| rng.random_range(0..model_cfg.classes))
        .collect();
    grad_check(
        &mut store,
        |g, store| {
            let x = g.constant(tokens.clone())?;
            let logits = vit.forward(g, store, x, None)?;
            g.cross_entropy(logits, &labels)
        },
        cfg,
    )
}
