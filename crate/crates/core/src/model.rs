//! A small pre-norm Vision Transformer with mean pooling. The same stack
//! also runs on 1-D token sequences, which the synthetic tasks use.

use std::collections::BTreeMap;

use crate::attention::{
    apply_linear, linear_params, AttentionConfig, AttentionTrace, LfConfig, MetricMode,
    MultiHeadAttention, SigmaMode,
};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::TransformKind;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::positional::{sinusoidal_encoding, Layout, Mechanism, PositionConfig};
use crate::rng::rng_from;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputSpec {
    /// Square RGB-style images cut into square patches.
    Image {
        size: usize,
        patch: usize,
        channels: usize,
    },
    /// Sequences of `len` feature vectors of width `vocab` (one-hot tokens).
    Tokens { len: usize, vocab: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViTConfig {
    pub input: InputSpec,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    pub position: PositionConfig,
    pub lf: Option<LfConfig>,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            input: InputSpec::Image {
                size: 32,
                patch: 4,
                channels: 3,
            },
            d_model: 128,
            heads: 4,
            layers: 6,
            mlp_ratio: 4,
            classes: 10,
            position: PositionConfig::new(Mechanism::Riemann(TransformKind::BlockRotation)),
            lf: None,
        }
    }
}

impl ViTConfig {
    pub fn layout(&self) -> Layout {
        match self.input {
            InputSpec::Image { size, patch, .. } => Layout::Grid {
                rows: size / patch,
                cols: size / patch,
            },
            InputSpec::Tokens { len, .. } => Layout::Sequence { len },
        }
    }

    pub fn seq_len(&self) -> usize {
        self.layout().len()
    }

    /// Width of one input token before embedding.
    pub fn token_features(&self) -> usize {
        match self.input {
            InputSpec::Image {
                patch, channels, ..
            } => channels * patch * patch,
            InputSpec::Tokens { vocab, .. } => vocab,
        }
    }

    fn head_dim_per_axis(&self, axes: usize) -> usize {
        self.d_model / self.heads / axes
    }

    pub fn hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            heads: self.heads,
            position: self.position,
            lf: self.lf,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.input {
            InputSpec::Image {
                size,
                patch,
                channels,
            } => {
                if patch == 0 || size == 0 || size % patch != 0 || channels == 0 {
                    return Err(Error::Config(format!(
                        "image size {size} is not divisible by patch size {patch}"
                    )));
                }
            }
            InputSpec::Tokens { len, vocab } => {
                if len == 0 || vocab == 0 {
                    return Err(Error::Config(
                        "token inputs need positive length and vocabulary".into(),
                    ));
                }
            }
        }
        if self.layers == 0 || self.classes == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(
                "layers, classes and mlp ratio must be positive".into(),
            ));
        }
        if self.position.mechanism == Mechanism::Sinusoidal && !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "sinusoidal encoding needs an even d_model, got {}",
                self.d_model
            )));
        }
        self.attention().validate(self.layout())
    }
}

/// Cuts `image [C, S, S]` into row-major patches, each flattened channel
/// first, then row, then column: `[L, C p p]`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(
            "patchify",
            format!("expected [C, H, W], got {:?}", image.shape()),
        ));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(
            "patchify",
            format!("{h}x{w} image is not divisible by patch {patch}"),
        ));
    }
    let (gr, gc) = (h / patch, w / patch);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for r in 0..gr {
        for col in 0..gc {
            for ch in 0..c {
                for py in 0..patch {
                    let y = r * patch + py;
                    let start = (ch * h + y) * w + col * patch;
                    out.extend_from_slice(&src[start..start + patch]);
                }
            }
        }
    }
    Tensor::new(vec![gr * gc, c * patch * patch], out)
}

type Linear = (ParamId, ParamId);

#[derive(Clone, Debug)]
struct Block {
    ln1: Linear,
    attn: MultiHeadAttention,
    ln2: Linear,
    fc1: Linear,
    fc2: Linear,
}

/// Architecture and parameter handles; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Vit {
    cfg: ViTConfig,
    embed: Linear,
    blocks: Vec<Block>,
    norm: Linear,
    head: Linear,
    sinusoidal: Option<Tensor>,
}

fn norm_params(store: &mut ParamStore, name: &str, d: usize) -> Result<Linear> {
    let g = store.add(format!("{name}.gain"), ParamGroup::Norm, Tensor::ones(&[d]))?;
    let b = store.add(
        format!("{name}.bias"),
        ParamGroup::Norm,
        Tensor::zeros(&[d]),
    )?;
    Ok((g, b))
}

fn apply_norm(g: &mut Graph, store: &ParamStore, x: Var, (gain, bias): Linear) -> Result<Var> {
    let gv = g.param(store, gain)?;
    let bv = g.param(store, bias)?;
    g.layer_norm(x, gv, bv)
}

impl Vit {
    /// Builds the architecture with freshly initialized parameters.
    pub fn new(cfg: ViTConfig, seed: u64) -> Result<(Vit, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_from(seed, "init");
        let d = cfg.d_model;
        let layout = cfg.layout();
        let embed = linear_params(&mut store, &mut rng, "embed", cfg.token_features(), d)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = format!("blocks.{i}");
            blocks.push(Block {
                ln1: norm_params(&mut store, &format!("{p}.ln1"), d)?,
                attn: MultiHeadAttention::register(
                    &mut store,
                    &mut rng,
                    &format!("{p}.attn"),
                    cfg.attention(),
                    layout,
                )?,
                ln2: norm_params(&mut store, &format!("{p}.ln2"), d)?,
                fc1: linear_params(
                    &mut store,
                    &mut rng,
                    &format!("{p}.mlp.fc1"),
                    d,
                    cfg.hidden(),
                )?,
                fc2: linear_params(
                    &mut store,
                    &mut rng,
                    &format!("{p}.mlp.fc2"),
                    cfg.hidden(),
                    d,
                )?,
            });
        }
        let norm = norm_params(&mut store, "norm", d)?;
        let head = linear_params(&mut store, &mut rng, "head", d, cfg.classes)?;
        let sinusoidal = match cfg.position.mechanism {
            Mechanism::Sinusoidal => Some(sinusoidal_encoding(layout.len(), d)?),
            _ => None,
        };
        let vit = Vit {
            cfg,
            embed,
            blocks,
            norm,
            head,
            sinusoidal,
        };
        Ok((vit, store))
    }

    pub fn config(&self) -> &ViTConfig {
        &self.cfg
    }

    pub fn attention(&self, layer: usize) -> Option<&MultiHeadAttention> {
        self.blocks.get(layer).map(|b| &b.attn)
    }

    /// Patch (or token) embeddings `[B, L, d_model]`, including any
    /// additive position table.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<Var> {
        let shape = g.shape(tokens).to_vec();
        let want = [self.cfg.seq_len(), self.cfg.token_features()];
        if shape.len() != 3 || shape[1..] != want {
            return Err(Error::shape(
                "embed",
                format!("expected [B, {}, {}], got {shape:?}", want[0], want[1]),
            ));
        }
        let x = apply_linear(g, store, tokens, self.embed)?;
        match &self.sinusoidal {
            Some(table) => {
                let t = g.constant(table.clone())?;
                g.add(x, t)
            }
            None => Ok(x),
        }
    }

    /// `tokens [B, L, F] -> logits [B, classes]`. With `trace`, each layer's
    /// attention weights and attenuation are recorded in order.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        mut trace: Option<&mut Vec<AttentionTrace>>,
    ) -> Result<Var> {
        let mut x = self.embed(g, store, tokens)?;
        for b in &self.blocks {
            let h = apply_norm(g, store, x, b.ln1)?;
            let h = b.attn.forward(g, store, h, trace.as_deref_mut())?;
            x = g.add(x, h)?;
            let h = apply_norm(g, store, x, b.ln2)?;
            let h = apply_linear(g, store, h, b.fc1)?;
            let h = g.gelu(h)?;
            let h = apply_linear(g, store, h, b.fc2)?;
            x = g.add(x, h)?;
        }
        let x = apply_norm(g, store, x, self.norm)?;
        let pooled = g.mean_axis(x, 1, false)?;
        apply_linear(g, store, pooled, self.head)
    }

    /// Convenience: logits for a batch as a plain tensor.
    pub fn logits(&self, store: &ParamStore, tokens: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let t = g.constant(tokens.clone())?;
        let y = self.forward(&mut g, store, t, None)?;
        Ok(g.value(y).clone())
    }
}

/// Learnable scalar counts, total and per group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub per_group: BTreeMap<ParamGroup, usize>,
}

impl ParamCount {
    pub fn of_store(store: &ParamStore) -> Self {
        let mut per_group = BTreeMap::new();
        for (_, p) in store.iter() {
            *per_group.entry(p.group).or_insert(0) += p.value.numel();
        }
        ParamCount {
            total: store.num_scalars(),
            per_group,
        }
    }

    pub fn group(&self, g: ParamGroup) -> usize {
        self.per_group.get(&g).copied().unwrap_or(0)
    }
}

/// Closed-form parameter count for `cfg`.
pub fn param_count(cfg: &ViTConfig) -> Result<ParamCount> {
    cfg.validate()?;
    let d = cfg.d_model;
    let h = cfg.heads;
    let hid = cfg.hidden();
    let layout = cfg.layout();
    let l = layout.len();
    let mut groups: BTreeMap<ParamGroup, usize> = BTreeMap::new();
    let mut add = |g: ParamGroup, n: usize| {
        if n > 0 {
            *groups.entry(g).or_insert(0) += n;
        }
    };
    add(
        ParamGroup::Weight,
        cfg.token_features() * d + cfg.layers * (4 * d * d + 2 * d * hid) + d * cfg.classes,
    );
    add(
        ParamGroup::Bias,
        d + cfg.layers * (4 * d + hid + d) + cfg.classes,
    );
    add(ParamGroup::Norm, 2 * d * (2 * cfg.layers + 1));
    let axes = layout.axis_positions().len();
    let dim = cfg.head_dim_per_axis(axes);
    let nb = dim / 2;
    let theta = if cfg.position.learn_theta { h * nb } else { 0 };
    let per_layer_axis: Vec<(ParamGroup, usize)> = match cfg.position.mechanism {
        Mechanism::NoPos | Mechanism::Sinusoidal | Mechanism::Rope => vec![],
        Mechanism::Riemann(TransformKind::General2D) => {
            vec![(ParamGroup::Theta, theta), (ParamGroup::ScaleW, 2 * h * nb)]
        }
        Mechanism::Riemann(TransformKind::DenseSkewExp) => {
            vec![
                (ParamGroup::Skew, h * dim * (dim - 1) / 2),
                (ParamGroup::ScaleW, h),
            ]
        }
        Mechanism::Riemann(_) => vec![(ParamGroup::Theta, theta), (ParamGroup::ScaleW, h)],
    };
    for (g, n) in per_layer_axis {
        add(g, n * axes * cfg.layers);
    }
    if let Some(lf) = cfg.lf {
        let sigma = match lf.sigma_mode {
            SigmaMode::Shared => h,
            SigmaMode::PerPosition => h * l,
        };
        add(ParamGroup::Sigma, sigma * cfg.layers);
        if lf.metric == MetricMode::Learned {
            let k = match layout {
                Layout::Sequence { .. } => 1,
                Layout::Grid { .. } => 3,
            };
            add(ParamGroup::AFactor, h * k * cfg.layers);
        }
    }
    Ok(ParamCount {
        total: groups.values().sum(),
        per_group: groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::trunc_normal;

    fn micro(mech: Mechanism, lf: bool) -> ViTConfig {
        ViTConfig {
            input: InputSpec::Image {
                size: 8,
                patch: 4,
                channels: 3,
            },
            d_model: if mech == Mechanism::Riemann(TransformKind::Mixed4x4) {
                16
            } else {
                8
            },
            heads: 2,
            layers: 1,
            mlp_ratio: 2,
            classes: 3,
            position: PositionConfig::new(mech),
            lf: lf.then(LfConfig::default),
        }
    }

    #[test]
    fn default_grid_has_64_tokens() {
        let cfg = ViTConfig::default();
        assert_eq!(cfg.seq_len(), 64);
        assert_eq!(cfg.token_features(), 48);
        let img = Tensor::zeros(&[3, 32, 32]);
        assert_eq!(patchify(&img, 4).unwrap().shape(), &[64, 48]);
        assert!(patchify(&Tensor::zeros(&[3, 30, 30]), 4).is_err());
        let bad = ViTConfig {
            input: InputSpec::Image {
                size: 30,
                patch: 4,
                channels: 3,
            },
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn patch_zero_matches_manual_slice() {
        let img = Tensor::from_fn(&[3, 8, 8], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
        let p = patchify(&img, 4).unwrap();
        let mut manual = vec![];
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    manual.push(img.get(&[c, y, x]));
                }
            }
        }
        assert_eq!(&p.data()[..48], manual.as_slice());
        // token 1 starts at column 4
        assert_eq!(p.get(&[1, 0]), img.get(&[0, 0, 4]));
        assert_eq!(p.get(&[2, 0]), img.get(&[0, 4, 0]));

        let cfg = micro(Mechanism::NoPos, false);
        let (vit, store) = Vit::new(cfg, 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(p.reshape(&[1, 4, 48]).unwrap()).unwrap();
        let e = vit.embed(&mut g, &store, x).unwrap();
        let w = store.value(store.find("embed.weight").unwrap());
        let expect: Vec<f64> = (0..8)
            .map(|j| (0..48).map(|i| manual[i] * w.get(&[i, j])).sum())
            .collect();
        for (j, want) in expect.iter().enumerate() {
            assert!((g.value(e).get(&[0, 0, j]) - want).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_image_zero_embedding() {
        let (vit, store) = Vit::new(micro(Mechanism::NoPos, false), 2).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 48])).unwrap();
        let e = vit.embed(&mut g, &store, x).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
    }

    fn permuted(tokens: &Tensor, perm: &[usize]) -> Tensor {
        let f = tokens.shape()[2];
        let mut data = vec![];
        for &p in perm {
            data.extend_from_slice(&tokens.data()[p * f..(p + 1) * f]);
        }
        Tensor::new(tokens.shape().to_vec(), data).unwrap()
    }

    #[test]
    fn permutation_sensitivity_by_mechanism() {
        let tokens = trunc_normal(&mut rng_from(5, "x"), &[1, 4, 48], 1.0);
        let perm = [2, 0, 3, 1];
        for mech in Mechanism::ALL {
            let cfg = micro(mech, false);
            let (vit, mut store) = Vit::new(cfg, 3).unwrap();
            // larger weights so position effects are visible at this scale
            for p in store.iter_mut() {
                if p.group == ParamGroup::Weight {
                    p.value = p.value.map(|v| v * 25.0);
                }
                if p.group == ParamGroup::ScaleW {
                    p.value = p.value.map(|_| -1.0);
                }
            }
            let a = vit.logits(&store, &tokens).unwrap();
            let b = vit.logits(&store, &permuted(&tokens, &perm)).unwrap();
            let diff = a.max_abs_diff(&b);
            if mech == Mechanism::NoPos {
                assert!(diff < 1e-10, "{mech}: {diff}");
            } else {
                assert!(diff > 1e-3, "{mech}: {diff}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = micro(Mechanism::Riemann(TransformKind::BlockRotation), true);
        let tokens = trunc_normal(&mut rng_from(5, "x"), &[2, 4, 48], 1.0);
        let (v1, s1) = Vit::new(cfg, 9).unwrap();
        let (v2, s2) = Vit::new(cfg, 9).unwrap();
        let a = v1.logits(&s1, &tokens).unwrap();
        let b = v2.logits(&s2, &tokens).unwrap();
        assert_eq!(a.shape(), &[2, 3]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn param_count_matches_enumeration() {
        let mut cfgs = vec![ViTConfig::default()];
        for mech in Mechanism::ALL {
            for lf in [None, Some(LfConfig::default())] {
                let mut c = micro(mech, false);
                c.lf = lf;
                cfgs.push(c);
                let mut s = c;
                s.input = InputSpec::Tokens { len: 5, vocab: 3 };
                s.lf = lf.map(|l| LfConfig {
                    sigma_mode: SigmaMode::PerPosition,
                    metric: MetricMode::Learned,
                    ..l
                });
                cfgs.push(s);
            }
        }
        for cfg in cfgs {
            let (_, store) = Vit::new(cfg, 0).unwrap();
            assert_eq!(
                param_count(&cfg).unwrap(),
                ParamCount::of_store(&store),
                "{cfg:?}"
            );
        }
    }

    #[test]
    fn param_count_examples() {
        let mut cfg = ViTConfig::default();
        let base = param_count(&cfg).unwrap();
        // d_k = 32, two axes of 16 channels: 8 angles per axis per head
        assert_eq!(base.group(ParamGroup::Theta), 4 * 2 * 8 * 6);
        cfg.lf = Some(LfConfig::default());
        let with_lf = param_count(&cfg).unwrap();
        assert_eq!(with_lf.total - base.total, 4 * 6);
        cfg.input = InputSpec::Tokens { len: 16, vocab: 4 };
        assert_eq!(
            param_count(&cfg).unwrap().group(ParamGroup::Theta),
            4 * 16 * 6
        );
    }
}
