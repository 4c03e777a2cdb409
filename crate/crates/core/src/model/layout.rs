//! Parameter registration. Walks a config in a fixed order, inserting every
//! learnable tensor (and batch-norm running statistic) under its path name,
//! and keeps the resulting ids for the forward pass.

use rand::Rng;

use super::config::{EmbedNorm, ModelConfig, IN_CHANNELS};
use super::params::{ParamId, ParameterStore};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of projection weights at initialization.
const LINEAR_INIT_STD: f64 = 0.02;

/// Small enough that initial logits are near zero and the loss starts near `ln K`.
const CLASSIFIER_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct AffineIds {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

/// Batch norm affine parameters plus the ids of its running statistics in
/// the buffer store.
#[derive(Debug, Clone)]
pub struct BatchNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub enum EmbedNormIds {
    Batch(BatchNormIds),
    Layer(LayerNormIds),
}

#[derive(Debug, Clone)]
pub struct PatchEmbedIds {
    pub proj: AffineIds,
    pub norm: EmbedNormIds,
}

/// The three depthwise branches that shrink keys/values.
#[derive(Debug, Clone)]
pub struct ReduceIds {
    /// `1×R` depthwise kernel, stride `(1, R)`.
    pub strip_w: AffineIds,
    /// `R×1` depthwise kernel, stride `(R, 1)`.
    pub strip_h: AffineIds,
    /// `3×3` depthwise kernel, stride `R`.
    pub strided: AffineIds,
    /// `3×3` depthwise kernel after `R×R` average pooling.
    pub pooled: AffineIds,
}

#[derive(Debug, Clone)]
pub struct AttentionIds {
    pub norm: BatchNormIds,
    pub wq: AffineIds,
    pub wk: AffineIds,
    pub wv: AffineIds,
    pub wo: AffineIds,
    /// `None` when the stage bypasses reduction.
    pub reduce: Option<ReduceIds>,
    /// Layer norm over the concatenated key/value tokens.
    pub kv_norm: LayerNormIds,
}

#[derive(Debug, Clone)]
pub struct FfnIds {
    pub norm: BatchNormIds,
    pub expand: AffineIds,
    pub dw: AffineIds,
    pub project: AffineIds,
}

#[derive(Debug, Clone)]
pub struct BlockIds {
    pub attn: AttentionIds,
    pub ffn: FfnIds,
}

#[derive(Debug, Clone)]
pub struct StageIds {
    pub embed: PatchEmbedIds,
    pub blocks: Vec<BlockIds>,
}

#[derive(Debug, Clone)]
pub struct DecoderIds {
    pub fuse: AffineIds,
    pub classifier: AffineIds,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub stages: Vec<StageIds>,
    pub decoder: DecoderIds,
}

struct Builder<'a, T: Scalar, R: Rng> {
    params: &'a mut ParameterStore<T>,
    buffers: &'a mut ParameterStore<T>,
    rng: &'a mut R,
    bias: bool,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn bias(&mut self, name: &str, c: usize) -> Result<Option<ParamId>> {
        if self.bias {
            Ok(Some(
                self.params.insert(format!("{name}/bias"), Tensor::zeros(vec![c]))?,
            ))
        } else {
            Ok(None)
        }
    }

    /// Weight `[cout, cin/groups, kh, kw]`, normal with std `sqrt(2 / fan_out)`.
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        (kh, kw): (usize, usize),
        groups: usize,
    ) -> Result<AffineIds> {
        let fan_out = kh * kw * cout / groups;
        self.conv_with_std(name, cin, cout, (kh, kw), groups, (2.0 / fan_out as f64).sqrt())
    }

    fn conv_with_std(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        (kh, kw): (usize, usize),
        groups: usize,
        std: f64,
    ) -> Result<AffineIds> {
        let w = Tensor::randn(vec![cout, cin / groups, kh, kw], std, self.rng);
        let weight = self.params.insert(format!("{name}/weight"), w)?;
        Ok(AffineIds {
            weight,
            bias: self.bias(name, cout)?,
        })
    }

    fn depthwise(&mut self, name: &str, c: usize, kernel: (usize, usize)) -> Result<AffineIds> {
        self.conv(name, c, c, kernel, c)
    }

    /// Weight `[cin, cout]`.
    fn linear(&mut self, name: &str, cin: usize, cout: usize) -> Result<AffineIds> {
        let w = Tensor::randn(vec![cin, cout], LINEAR_INIT_STD, self.rng);
        let weight = self.params.insert(format!("{name}/weight"), w)?;
        Ok(AffineIds {
            weight,
            bias: self.bias(name, cout)?,
        })
    }

    fn batch_norm(&mut self, name: &str, c: usize) -> Result<BatchNormIds> {
        Ok(BatchNormIds {
            gamma: self.params.insert(format!("{name}/gamma"), Tensor::ones(vec![c]))?,
            beta: self.params.insert(format!("{name}/beta"), Tensor::zeros(vec![c]))?,
            running_mean: self
                .buffers
                .insert(format!("{name}/running_mean"), Tensor::zeros(vec![c]))?,
            running_var: self
                .buffers
                .insert(format!("{name}/running_var"), Tensor::ones(vec![c]))?,
        })
    }

    fn layer_norm(&mut self, name: &str, c: usize) -> Result<LayerNormIds> {
        Ok(LayerNormIds {
            gamma: self.params.insert(format!("{name}/gamma"), Tensor::ones(vec![c]))?,
            beta: self.params.insert(format!("{name}/beta"), Tensor::zeros(vec![c]))?,
        })
    }
}

/// Registers every tensor of `cfg` and returns their ids.
pub(crate) fn build<T: Scalar>(
    cfg: &ModelConfig,
    params: &mut ParameterStore<T>,
    buffers: &mut ParameterStore<T>,
    rng: &mut impl Rng,
) -> Result<Layout> {
    let mut b = Builder {
        params,
        buffers,
        rng,
        bias: cfg.bias,
    };
    let mut stages = Vec::with_capacity(cfg.stages.len());
    let mut cin = IN_CHANNELS;
    for (si, stage) in cfg.stages.iter().enumerate() {
        let prefix = format!("stage{}", si + 1);
        let c = stage.channels;
        let (k, _, _) = cfg.patch_mode.geometry(si);
        let proj = b.conv(&format!("{prefix}/embed/proj"), cin, c, (k, k), 1)?;
        let norm = match cfg.embed_norm {
            EmbedNorm::Batch => EmbedNormIds::Batch(b.batch_norm(&format!("{prefix}/embed/norm"), c)?),
            EmbedNorm::Layer => EmbedNormIds::Layer(b.layer_norm(&format!("{prefix}/embed/norm"), c)?),
        };
        let mut blocks = Vec::with_capacity(stage.depth);
        for bi in 0..stage.depth {
            let p = format!("{prefix}/block{bi}");
            let r = stage.reduction;
            let attn = AttentionIds {
                norm: b.batch_norm(&format!("{p}/attn/norm"), c)?,
                wq: b.linear(&format!("{p}/attn/wq"), c, c)?,
                reduce: if cfg.bypasses_reduction(si) {
                    None
                } else {
                    Some(ReduceIds {
                        strip_w: b.depthwise(&format!("{p}/attn/reduce/strip_w"), c, (1, r))?,
                        strip_h: b.depthwise(&format!("{p}/attn/reduce/strip_h"), c, (r, 1))?,
                        strided: b.depthwise(&format!("{p}/attn/reduce/strided"), c, (3, 3))?,
                        pooled: b.depthwise(&format!("{p}/attn/reduce/pooled"), c, (3, 3))?,
                    })
                },
                kv_norm: b.layer_norm(&format!("{p}/attn/reduce/norm"), c)?,
                wk: b.linear(&format!("{p}/attn/wk"), c, c)?,
                wv: b.linear(&format!("{p}/attn/wv"), c, c)?,
                wo: b.linear(&format!("{p}/attn/wo"), c, c)?,
            };
            let hidden = c * stage.ffn_ratio;
            let ffn = FfnIds {
                norm: b.batch_norm(&format!("{p}/ffn/norm"), c)?,
                expand: b.conv(&format!("{p}/ffn/expand"), c, hidden, (1, 1), 1)?,
                dw: b.depthwise(&format!("{p}/ffn/dw"), hidden, (3, 3))?,
                project: b.conv(&format!("{p}/ffn/project"), hidden, c, (1, 1), 1)?,
            };
            blocks.push(BlockIds { attn, ffn });
        }
        stages.push(StageIds {
            embed: PatchEmbedIds { proj, norm },
            blocks,
        });
        cin = c;
    }
    let decoder = DecoderIds {
        fuse: b.conv("decoder/fuse", cfg.concat_channels(), cfg.decoder_channels, (1, 1), 1)?,
        classifier: b.conv_with_std(
            "decoder/classifier",
            cfg.decoder_channels,
            cfg.num_classes,
            (1, 1),
            1,
            CLASSIFIER_INIT_STD,
        )?,
    };
    Ok(Layout { stages, decoder })
}
