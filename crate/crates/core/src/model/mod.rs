//! The segmentation model: configuration, parameters and forward pass.

mod config;
mod forward;
mod layout;
mod params;

pub use config::{
    EmbedNorm, ModelConfig, PatchMode, StageConfig, INPUT_MULTIPLE, IN_CHANNELS, NUM_STAGES, PRESET_NAMES,
};
pub use forward::{multi_head_attention, BnUpdate, FeaturePyramid, Session};
pub use layout::{
    AffineIds, AttentionIds, BatchNormIds, BlockIds, DecoderIds, EmbedNormIds, FfnIds, LayerNormIds, Layout,
    PatchEmbedIds, ReduceIds, StageIds,
};
pub use params::{ParamId, ParameterStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::ops::{self, NormMode};
use crate::tensor::{Scalar, Tensor};

/// Parameters, batch-norm buffers and the config they were built from.
#[derive(Debug, Clone)]
pub struct IncepFormer<T: Scalar> {
    config: ModelConfig,
    params: ParameterStore<T>,
    buffers: ParameterStore<T>,
    layout: Layout,
}

impl<T: Scalar> IncepFormer<T> {
    /// Validates `config` and initializes weights from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterStore::new();
        let mut buffers = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = layout::build(&config, &mut params, &mut buffers, &mut rng)?;
        Ok(IncepFormer {
            config,
            params,
            buffers,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.params
    }

    /// Batch-norm running statistics. Not learnable, not counted as parameters.
    pub fn buffers(&self) -> &ParameterStore<T> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.buffers
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Binds every parameter as a tape leaf. With `trainable` false no
    /// backward closures are recorded.
    pub fn session<'m, 't>(&'m self, tape: &'t Tape<T>, mode: NormMode, trainable: bool) -> Session<'m, 't, T> {
        Session::new(self, tape, mode, trainable)
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        let momentum = T::from_f64(self.config.bn_momentum);
        for u in updates {
            let mut mean = self.buffers.get(u.running_mean).clone();
            let mut var = self.buffers.get(u.running_var).clone();
            ops::update_running_stats(
                &mut mean,
                &mut var,
                &u.stats.mean,
                &u.stats.var,
                u.stats.count,
                momentum,
            );
            *self.buffers.get_mut(u.running_mean) = mean;
            *self.buffers.get_mut(u.running_var) = var;
        }
    }

    /// Eval-mode logits `[N, classes, H/4, W/4]` for images `[N, 3, H, W]`.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let session = self.session(&tape, NormMode::Eval, false);
        let logits = session.segment(tape.constant(images.clone()))?;
        Ok(logits.value())
    }

    /// Per-pixel class ids at full input resolution, `N·H·W` values in
    /// row-major order. Logits are upsampled bilinearly before the argmax.
    pub fn predict_labels(&self, images: &Tensor<T>) -> Result<Vec<u8>> {
        let [_, _, h, w] = images.dims::<4>("predict_labels")?;
        let logits = ops::bilinear_upsample(&self.predict(images)?, h, w, false)?;
        argmax_channels(&logits)
    }

    /// Same weights and buffers in another element type.
    pub fn cast<U: Scalar>(&self) -> IncepFormer<U> {
        IncepFormer {
            config: self.config.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
            layout: self.layout.clone(),
        }
    }
}

/// Class id of the largest logit at each pixel of `[N, K, H, W]`; ties go to
/// the lowest class.
pub fn argmax_channels<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let [n, k, h, w] = logits.dims::<4>("argmax_channels")?;
    if k > 256 {
        return Err(Error::dim_axis(
            "argmax_channels",
            1,
            format!("{k} classes do not fit in u8"),
        ));
    }
    let hw = h * w;
    let x = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for ni in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if x[(ni * k + c) * hw + p] > x[(ni * k + best) * hw + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}
