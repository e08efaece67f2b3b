//! AdamW, learning-rate schedules, and the train/evaluate loops.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Vit;
use crate::params::ParamStore;
use crate::rng::{derive_indexed, rng_indexed};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Decay applies only to groups whose
/// [`ParamGroup::decays`](crate::params::ParamGroup::decays) is true.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = |s: &ParamStore| {
            s.iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect()
        };
        AdamW {
            cfg,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr` using the gradients held in `store`.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: p.name.clone(),
            });
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            let decay = if p.group.decays() {
                1.0 - lr * c.weight_decay
            } else {
                1.0
            };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = p.grad.data()[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Linear warmup over `warmup_epochs`, then cosine decay to zero.
    Cosine {
        warmup_epochs: usize,
    },
}

impl LrSchedule {
    /// Learning rate for 0-based optimizer step `step`.
    pub fn lr_at(self, base: f64, step: usize, steps_per_epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { warmup_epochs } => {
                let total = (steps_per_epoch * epochs).max(1);
                let warm = (steps_per_epoch * warmup_epochs).min(total - 1);
                if step < warm {
                    base * (step + 1) as f64 / warm as f64
                } else {
                    let t = (step - warm) as f64 / (total - warm) as f64;
                    0.5 * base * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
    /// Train on the first `subset` items only.
    pub subset: Option<usize>,
    pub augment: bool,
    /// When false the wall-time column is written as 0 so metrics files are
    /// byte-comparable across runs.
    pub record_wall_time: bool,
    /// Stop after the first epoch whose running train accuracy reaches this.
    pub stop_at_train_acc: Option<f64>,
    pub max_steps: Option<usize>,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch: 128,
            seed: 0,
            optimizer: AdamWConfig::default(),
            schedule: LrSchedule::Cosine { warmup_epochs: 5 },
            subset: None,
            augment: true,
            record_wall_time: true,
            stop_at_train_acc: None,
            max_steps: None,
            eval_batch: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub wall_seconds: f64,
    /// Optimizer steps taken so far.
    pub steps: usize,
}

impl EpochMetrics {
    /// One tab-separated metrics line, newline included.
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{:.10}\t{:.6}\t{:.6}\t{:.3}\n",
            self.epoch, self.train_loss, self.train_acc, self.test_acc, self.wall_seconds
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_test_acc: f64,
    /// Parameters at the best test accuracy.
    pub best_params: ParamStore,
    pub steps: usize,
}

/// Where [`train`] writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

impl TrainOutput {
    pub const METRICS: &'static str = "metrics.tsv";
    pub const BEST: &'static str = "best.ckpt";
    pub const LAST: &'static str = "last.ckpt";

    pub fn to(dir: impl Into<PathBuf>) -> Self {
        TrainOutput {
            dir: Some(dir.into()),
        }
    }
}

fn check_classes(vit: &Vit, data: &Dataset) -> Result<()> {
    let model = vit.config().classes;
    if model != data.classes() {
        return Err(Error::ClassMismatch {
            model,
            data: data.classes(),
        });
    }
    Ok(())
}

/// Top-1 predictions for every item, in order.
pub fn predict(vit: &Vit, store: &ParamStore, data: &Dataset, batch: usize) -> Result<Vec<usize>> {
    check_classes(vit, data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch.max(1)) {
        let x = data.batch(chunk, vit.config().input, None)?;
        out.extend(vit.logits(store, &x)?.argmax_rows());
    }
    Ok(out)
}

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate(vit: &Vit, store: &ParamStore, data: &Dataset, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(vit, store, data, batch)?;
    let hits = pred
        .iter()
        .enumerate()
        .filter(|&(i, &p)| p == data.label(i))
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Trains in place. Batch order, augmentation and initialization all derive
/// from `cfg.seed`, so two runs with equal inputs produce equal results.
pub fn train(
    vit: &Vit,
    store: &mut ParamStore,
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    output: &TrainOutput,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    check_classes(vit, train_set)?;
    check_classes(vit, test_set)?;
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let train_set = match cfg.subset {
        Some(n) => train_set.subset(n)?,
        None => train_set.clone(),
    };
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(dir) = &output.dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(cfg.batch);
    let mut opt = AdamW::new(cfg.optimizer, store);
    let mut metrics = String::new();
    let mut history = Vec::new();
    let mut best = (0, f64::NEG_INFINITY, store.clone());
    let mut step = 0usize;
    let start = Instant::now();
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_indexed(cfg.seed, "shuffle", epoch as u64));
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let aug_seed = |i: usize| derive_indexed(cfg.seed, "augment", (epoch * n + i) as u64);
            let aug: Option<&dyn Fn(usize) -> u64> =
                if cfg.augment { Some(&aug_seed) } else { None };
            let x = train_set.batch(chunk, vit.config().input, aug)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.label(i)).collect();
            let diverged = |_| Error::Diverged { epoch, step };
            let mut g = Graph::new();
            let xv = g.constant(x)?;
            let logits = vit.forward(&mut g, store, xv, None).map_err(diverged)?;
            let loss = g.cross_entropy(logits, &labels).map_err(diverged)?;
            let lv = g.value(loss).item()?;
            hits += g
                .value(logits)
                .argmax_rows()
                .iter()
                .zip(&labels)
                .filter(|(p, y)| p == y)
                .count();
            loss_sum += lv * chunk.len() as f64;
            seen += chunk.len();
            let grads = g.backward(loss)?;
            store.zero_grad();
            g.accumulate_param_grads(&grads, store);
            let lr = cfg
                .schedule
                .lr_at(cfg.optimizer.lr, step, steps_per_epoch, cfg.epochs);
            opt.step(store, lr)?;
            step += 1;
        }
        if seen == 0 {
            break 'epochs;
        }
        let test_acc = evaluate(vit, store, test_set, cfg.eval_batch)?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: hits as f64 / seen as f64,
            test_acc,
            wall_seconds: if cfg.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
            steps: step,
        };
        metrics.push_str(&m.tsv_line());
        if test_acc > best.1 {
            best = (epoch, test_acc, store.clone());
            if let Some(dir) = &output.dir {
                checkpoint_for(vit, store, &m).save(&dir.join(TrainOutput::BEST))?;
            }
        }
        if let Some(dir) = &output.dir {
            write_file(&dir.join(TrainOutput::METRICS), metrics.as_bytes())?;
            checkpoint_for(vit, store, &m).save(&dir.join(TrainOutput::LAST))?;
        }
        on_epoch(&m);
        let stop = cfg.stop_at_train_acc.is_some_and(|t| m.train_acc >= t);
        history.push(m);
        if stop {
            break;
        }
    }
    Ok(TrainReport {
        history,
        best_epoch: best.0,
        best_test_acc: best.1,
        best_params: best.2,
        steps: step,
    })
}

fn checkpoint_for(vit: &Vit, store: &ParamStore, m: &EpochMetrics) -> Checkpoint {
    let mut metrics = Vec::new();
    let mut fmt = |k: &str, v: String| metrics.push((k.to_string(), v));
    fmt("epoch", m.epoch.to_string());
    fmt("train_loss", format!("{:?}", m.train_loss));
    fmt("train_acc", format!("{:?}", m.train_acc));
    fmt("test_acc", format!("{:?}", m.test_acc));
    Checkpoint {
        config: *vit.config(),
        params: store.clone(),
        step: m.steps as u64,
        metrics,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Renders a metrics history exactly as [`train`] writes it.
pub fn metrics_tsv(history: &[EpochMetrics]) -> String {
    history.iter().fold(String::new(), |mut s, m| {
        let _ = write!(s, "{}", m.tsv_line());
        s
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    fn scalar_store(group: ParamGroup, value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("p", group, Tensor::from_vec(vec![value])).unwrap();
        s.get_mut(id).grad = Tensor::from_vec(vec![grad]);
        s
    }

    #[test]
    fn zero_grad_zero_decay_is_a_no_op() {
        let mut s = scalar_store(ParamGroup::Weight, 0.7, 0.0);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &s,
        );
        opt.step(&mut s, 1e-3).unwrap();
        assert_eq!(s.value(s.find("p").unwrap()).data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(ParamGroup::Bias, 0.0, 1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.step(&mut s, 1e-3).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        let expect = -1e-3 / (1.0 + 1e-8);
        assert!((s.value(s.find("p").unwrap()).data()[0] - expect).abs() < 1e-18);
    }

    #[test]
    fn decay_only_shrinks_weights_and_spares_other_groups() {
        for group in ParamGroup::ALL {
            let mut s = scalar_store(group, 2.0, 0.0);
            let mut opt = AdamW::new(AdamWConfig::default(), &s);
            for _ in 0..3 {
                opt.step(&mut s, 0.1).unwrap();
            }
            let v = s.value(s.find("p").unwrap()).data()[0];
            let expect = if group == ParamGroup::Weight {
                2.0 * (1.0f64 - 0.1 * 0.01).powi(3)
            } else {
                2.0
            };
            assert!((v - expect).abs() < 1e-15, "{group}: {v}");
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = scalar_store(ParamGroup::Theta, 1.0, f64::NAN);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        match opt.step(&mut s, 1e-3) {
            Err(Error::NonFiniteGradient { param }) => assert_eq!(param, "p"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.value(s.find("p").unwrap()).data()[0], 1.0);
    }

    #[test]
    fn cosine_schedule_shape() {
        let s = LrSchedule::Cosine { warmup_epochs: 5 };
        let lr = |step| s.lr_at(1.0, step, 10, 100);
        assert!((lr(0) - 0.02).abs() < 1e-15);
        assert!((lr(49) - 1.0).abs() < 1e-15);
        assert!((lr(50) - 1.0).abs() < 1e-15);
        assert!(lr(525) < 0.51 && lr(525) > 0.49);
        assert!(lr(999) < 1e-4);
        assert_eq!(LrSchedule::Constant.lr_at(0.3, 77, 10, 100), 0.3);
        // warmup longer than the run still yields finite rates
        let short = LrSchedule::Cosine { warmup_epochs: 5 };
        assert!(short.lr_at(1.0, 0, 1, 2).is_finite());
    }
}
