//! Model and training setups shared by the command line, the benches and
//! the acceptance checks.

use crate::attention::{AttentionConfig, LfConfig, MultiHeadAttention};
use crate::autodiff::Graph;
use crate::data::{synthetic_position_task, Dataset, PROBE_VOCAB};
use crate::error::Result;
use crate::model::{InputSpec, ViTConfig};
use crate::params::ParamStore;
use crate::positional::{Layout, Mechanism, PositionConfig};
use crate::rng::{derive_seed, rng_from, trunc_normal};
use crate::tensor::Tensor;
use crate::training::{AdamWConfig, LrSchedule, TrainConfig};

/// Sequence length of the marker-position task.
pub const POSITION_LEN: usize = 16;
pub const POSITION_TRAIN: usize = 2048;
pub const POSITION_TEST: usize = 512;

/// Two small layers over one-hot tokens; the label is the marker position,
/// so a model without positional information is stuck at chance.
pub fn position_model(mechanism: Mechanism, lf: Option<LfConfig>) -> ViTConfig {
    ViTConfig {
        input: InputSpec::Tokens {
            len: POSITION_LEN,
            vocab: PROBE_VOCAB,
        },
        d_model: 32,
        heads: 2,
        layers: 2,
        mlp_ratio: 2,
        classes: POSITION_LEN,
        position: PositionConfig::new(mechanism),
        lf,
    }
}

pub fn position_training(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 30,
        batch: 64,
        seed,
        optimizer: AdamWConfig {
            lr: 3e-3,
            ..AdamWConfig::default()
        },
        schedule: LrSchedule::Cosine { warmup_epochs: 1 },
        augment: false,
        ..TrainConfig::default()
    }
}

/// Train and test splits drawn from independent streams of `seed`.
pub fn position_data(seed: u64) -> Result<(Dataset, Dataset)> {
    let train = synthetic_position_task(
        POSITION_LEN,
        POSITION_TRAIN,
        derive_seed(seed, "position-train"),
    )?;
    let test = synthetic_position_task(
        POSITION_LEN,
        POSITION_TEST,
        derive_seed(seed, "position-test"),
    )?;
    Ok((Dataset::Tokens(train), Dataset::Tokens(test)))
}

/// The default image model cut down to two layers of width 32.
pub fn overfit_model(mechanism: Mechanism, classes: usize) -> ViTConfig {
    ViTConfig {
        d_model: 32,
        layers: 2,
        classes,
        position: PositionConfig::new(mechanism),
        ..ViTConfig::default()
    }
}

pub const OVERFIT_IMAGES: usize = 64;
pub const OVERFIT_STEPS: usize = 300;

/// One full batch per epoch with the rate decayed to zero by the last step,
/// so the final parameters, not a lucky intermediate batch, are judged.
pub fn overfit_training(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: OVERFIT_STEPS,
        batch: OVERFIT_IMAGES,
        seed,
        optimizer: AdamWConfig {
            lr: 3e-3,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        schedule: LrSchedule::Cosine { warmup_epochs: 0 },
        subset: Some(OVERFIT_IMAGES),
        augment: false,
        max_steps: Some(OVERFIT_STEPS),
        ..TrainConfig::default()
    }
}

pub const TREND_SUBSET: usize = 5000;
pub const TREND_EPOCHS: usize = 20;

/// The default image model, used for short CIFAR comparisons.
pub fn trend_model(mechanism: Mechanism, lf: Option<LfConfig>, classes: usize) -> ViTConfig {
    ViTConfig {
        classes,
        position: PositionConfig::new(mechanism),
        lf,
        ..ViTConfig::default()
    }
}

pub fn trend_training(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: TREND_EPOCHS,
        batch: 128,
        seed,
        schedule: LrSchedule::Cosine { warmup_epochs: 2 },
        subset: Some(TREND_SUBSET),
        ..TrainConfig::default()
    }
}

/// One attention layer over a random `[1, seq_len, dim]` sequence, the
/// shape-for-shape comparison the benchmarks time.
pub struct AttentionWorkload {
    pub layer: MultiHeadAttention,
    pub store: ParamStore,
    pub input: Tensor,
}

impl AttentionWorkload {
    pub fn new(
        mechanism: Mechanism,
        seq_len: usize,
        dim: usize,
        heads: usize,
        seed: u64,
    ) -> Result<Self> {
        let cfg = AttentionConfig {
            d_model: dim,
            heads,
            position: PositionConfig::new(mechanism),
            lf: None,
        };
        let mut store = ParamStore::new();
        let mut rng = rng_from(seed, "bench");
        let layer = MultiHeadAttention::register(
            &mut store,
            &mut rng,
            "attn",
            cfg,
            Layout::Sequence { len: seq_len },
        )?;
        let input = trunc_normal(&mut rng, &[1, seq_len, dim], 1.0);
        Ok(AttentionWorkload {
            layer,
            store,
            input,
        })
    }

    /// Builds the forward tape and returns its node count.
    pub fn forward(&self) -> Result<usize> {
        let mut g = Graph::new();
        let x = g.constant(self.input.clone())?;
        self.layer.forward(&mut g, &self.store, x, None)?;
        Ok(g.len())
    }
}
