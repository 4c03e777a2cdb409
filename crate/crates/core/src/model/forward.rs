//! The encoder/decoder forward pass, recorded on a tape.

use std::cell::RefCell;

use super::config::EmbedNorm;
use super::layout::{AffineIds, AttentionIds, BatchNormIds, EmbedNormIds, FfnIds, LayerNormIds, ReduceIds};
use super::params::ParamId;
use super::IncepFormer;
use crate::autograd::{BatchStats, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{Conv2dOptions, NormMode};
use crate::tensor::{Scalar, Tensor};

/// Batch statistics observed by one train-mode batch norm, to be folded
/// into the running estimates once the step is done.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats<T>,
}

/// Encoder outputs at 1/4, 1/8, 1/16 and 1/32 of the input resolution.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid<'t, T: Scalar> {
    pub levels: [Var<'t, T>; 4],
}

/// Scaled dot-product attention over `heads` heads.
///
/// `q` is `[N, L, C]`, `k` and `v` are `[N, L', C]`; the result is `[N, L, C]`
/// with the heads concatenated along channels.
pub fn multi_head_attention<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    heads: usize,
) -> Result<Var<'t, T>> {
    let qs = q.shape();
    let ks = k.shape();
    let [n, l, c] = [qs[0], qs[1], qs[2]];
    let lk = ks[1];
    if heads == 0 || c % heads != 0 {
        return Err(Error::config(
            "heads",
            format!("{c} channels are not divisible by {heads} heads"),
        ));
    }
    let d = c / heads;
    let split = |x: Var<'t, T>, len: usize, perm: &[usize], shape: [usize; 3]| {
        x.reshape(vec![n, len, heads, d])?
            .permute(perm)?
            .reshape(shape.to_vec())
    };
    let qh = split(q.scale(1.0 / (d as f64).sqrt())?, l, &[0, 2, 1, 3], [n * heads, l, d])?;
    let kt = split(k, lk, &[0, 2, 3, 1], [n * heads, d, lk])?;
    let vh = split(v, lk, &[0, 2, 1, 3], [n * heads, lk, d])?;
    let weights = qh.matmul(kt)?.softmax(2)?;
    weights
        .matmul(vh)?
        .reshape(vec![n, heads, l, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(vec![n, l, c])
}

/// One forward pass of an [`IncepFormer`] on a tape.
pub struct Session<'m, 't, T: Scalar> {
    model: &'m IncepFormer<T>,
    params: Vec<Var<'t, T>>,
    mode: NormMode,
    updates: RefCell<Vec<BnUpdate<T>>>,
}

impl<'m, 't, T: Scalar> Session<'m, 't, T> {
    pub(crate) fn new(model: &'m IncepFormer<T>, tape: &'t Tape<T>, mode: NormMode, trainable: bool) -> Self {
        let params = model
            .params()
            .tensors()
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect();
        Session {
            model,
            params,
            mode,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        self.params[id.index()]
    }

    /// Leaf variables in parameter-store order.
    pub fn param_vars(&self) -> &[Var<'t, T>] {
        &self.params
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    /// Gradient of every parameter, in parameter-store order.
    pub fn gradients(&self, grads: &Gradients<T>) -> Result<Vec<Tensor<T>>> {
        let store = self.model.params();
        self.params
            .iter()
            .zip(store.ids())
            .map(|(&v, id)| {
                grads
                    .get(v)
                    .cloned()
                    .ok_or_else(|| Error::Contract(format!("no gradient for `{}`", store.name(id))))
            })
            .collect()
    }

    /// Batch-norm statistics gathered so far (empty in eval mode).
    pub fn into_updates(self) -> Vec<BnUpdate<T>> {
        self.updates.into_inner()
    }

    fn eps(&self) -> T {
        T::from_f64(self.model.config().norm_eps)
    }

    fn conv(&self, x: Var<'t, T>, ids: &AffineIds, opts: Conv2dOptions) -> Result<Var<'t, T>> {
        x.conv2d(self.param(ids.weight), ids.bias.map(|b| self.param(b)), opts)
    }

    fn depthwise(&self, x: Var<'t, T>, ids: &AffineIds, stride: (usize, usize), pad: usize) -> Result<Var<'t, T>> {
        let c = x.shape()[1];
        let opts = Conv2dOptions::default()
            .stride(stride.0, stride.1)
            .padding(pad, pad)
            .groups(c);
        self.conv(x, ids, opts)
    }

    fn linear(&self, x: Var<'t, T>, ids: &AffineIds) -> Result<Var<'t, T>> {
        x.linear(self.param(ids.weight), ids.bias.map(|b| self.param(b)))
    }

    fn batch_norm(&self, x: Var<'t, T>, ids: &BatchNormIds) -> Result<Var<'t, T>> {
        let buffers = self.model.buffers();
        let (y, stats) = x.batch_norm2d(
            self.param(ids.gamma),
            self.param(ids.beta),
            buffers.get(ids.running_mean),
            buffers.get(ids.running_var),
            self.mode,
            self.eps(),
        )?;
        if let Some(stats) = stats {
            self.updates.borrow_mut().push(BnUpdate {
                running_mean: ids.running_mean,
                running_var: ids.running_var,
                stats,
            });
        }
        Ok(y)
    }

    fn layer_norm(&self, x: Var<'t, T>, ids: &LayerNormIds) -> Result<Var<'t, T>> {
        x.layer_norm(self.param(ids.gamma), self.param(ids.beta), self.eps())
    }

    /// Batch norm of a token sequence through its image layout.
    fn batch_norm_seq(&self, x: Var<'t, T>, ids: &BatchNormIds, h: usize, w: usize) -> Result<Var<'t, T>> {
        self.batch_norm(x.seq2img(h, w)?, ids)?.img2seq()
    }

    /// Strided projection into stage `stage` (0-based) followed by its norm.
    /// Takes and returns image layout.
    pub fn patch_embed(&self, x: Var<'t, T>, stage: usize) -> Result<Var<'t, T>> {
        let cfg = self.model.config();
        let ids = &self.model.layout().stages[stage].embed;
        let (_, s, p) = cfg.patch_mode.geometry(stage);
        let shape = x.shape();
        for axis in [2, 3] {
            if !shape[axis].is_multiple_of(s) {
                return Err(Error::dim_axis(
                    "patch_embed",
                    axis,
                    format!("extent {} is not a multiple of the stride {s}", shape[axis]),
                ));
            }
        }
        let y = self.conv(x, &ids.proj, Conv2dOptions::default().stride(s, s).padding(p, p))?;
        match (&ids.norm, cfg.embed_norm) {
            (EmbedNormIds::Batch(bn), EmbedNorm::Batch) => self.batch_norm(y, bn),
            (EmbedNormIds::Layer(ln), EmbedNorm::Layer) => {
                let [h, w] = [y.shape()[2], y.shape()[3]];
                self.layer_norm(y.img2seq()?, ln)?.seq2img(h, w)
            }
            _ => unreachable!("layout built from the same config"),
        }
    }

    /// Three-branch key/value reduction of an image `[N,C,H,W]` into layer
    /// normalized tokens `[N, L', C]`.
    pub fn incep_reduce(&self, x: Var<'t, T>, ids: &ReduceIds, kv_norm: &LayerNormIds, r: usize) -> Result<Var<'t, T>> {
        if r == 0 {
            return Err(Error::config("reduction", "must be at least 1"));
        }
        let shape = x.shape();
        if shape[2] < r || shape[3] < r {
            return Err(Error::dim(
                "incep_reduce",
                format!("{}×{} map is smaller than the reduction {r}", shape[2], shape[3]),
            ));
        }
        let strips = self.depthwise(x, &ids.strip_w, (1, r), 0)?;
        let strips = self.depthwise(strips, &ids.strip_h, (r, 1), 0)?;
        let strided = self.depthwise(x, &ids.strided, (r, r), 1)?;
        let pooled = self.depthwise(x.avg_pool2d(r, r)?, &ids.pooled, (1, 1), 1)?;
        let tokens = Var::concat(&[strips.img2seq()?, strided.img2seq()?, pooled.img2seq()?], 1)?;
        self.layer_norm(tokens, kv_norm)
    }

    /// Attention whose keys and values come from the reduced map. `x` is an
    /// already normalized `[N, H·W, C]` sequence.
    pub fn incep_mhsa(
        &self,
        x: Var<'t, T>,
        ids: &AttentionIds,
        heads: usize,
        h: usize,
        w: usize,
        r: usize,
    ) -> Result<Var<'t, T>> {
        let l = x.shape()[1];
        if l != h * w {
            return Err(Error::dim_axis(
                "incep_mhsa",
                1,
                format!("{l} tokens for a {h}×{w} map"),
            ));
        }
        let q = self.linear(x, &ids.wq)?;
        let kv = match &ids.reduce {
            Some(reduce) => self.incep_reduce(x.seq2img(h, w)?, reduce, &ids.kv_norm, r)?,
            None => self.layer_norm(x, &ids.kv_norm)?,
        };
        let k = self.linear(kv, &ids.wk)?;
        let v = self.linear(kv, &ids.wv)?;
        let attended = multi_head_attention(q, k, v, heads)?;
        self.linear(attended, &ids.wo)
    }

    /// Norm, pointwise expansion, 3×3 depthwise, GELU, pointwise projection,
    /// plus the residual. `x` is `[N, H·W, C]`.
    pub fn effn(&self, x: Var<'t, T>, ids: &FfnIds, h: usize, w: usize) -> Result<Var<'t, T>> {
        let l = x.shape()[1];
        if l != h * w {
            return Err(Error::dim_axis("effn", 1, format!("{l} tokens for a {h}×{w} map")));
        }
        let img = self.batch_norm(x.seq2img(h, w)?, &ids.norm)?;
        let y = self.conv(img, &ids.expand, Conv2dOptions::default())?;
        let y = self.depthwise(y, &ids.dw, (1, 1), 1)?.gelu()?;
        let y = self.conv(y, &ids.project, Conv2dOptions::default())?;
        x.add(y.img2seq()?)
    }

    /// One transformer block on `[N, H·W, C]`.
    pub fn iptb_block(&self, x: Var<'t, T>, stage: usize, block: usize, h: usize, w: usize) -> Result<Var<'t, T>> {
        let sc = &self.model.config().stages[stage];
        let ids = &self.model.layout().stages[stage].blocks[block];
        let normed = self.batch_norm_seq(x, &ids.attn.norm, h, w)?;
        let x = x.add(self.incep_mhsa(normed, &ids.attn, sc.heads, h, w, sc.reduction)?)?;
        self.effn(x, &ids.ffn, h, w)
    }

    pub fn encoder(&self, image: Var<'t, T>) -> Result<FeaturePyramid<'t, T>> {
        let mut x = image;
        let mut levels = Vec::with_capacity(4);
        for (si, stage) in self.model.config().stages.iter().enumerate() {
            let img = self.patch_embed(x, si)?;
            let [h, w] = [img.shape()[2], img.shape()[3]];
            let mut seq = img.img2seq()?;
            for bi in 0..stage.depth {
                seq = self.iptb_block(seq, si, bi, h, w)?;
            }
            x = seq.seq2img(h, w)?;
            levels.push(x);
        }
        Ok(FeaturePyramid {
            levels: levels.try_into().expect("four stages"),
        })
    }

    /// Upsamples every level to the first level's size, concatenates, fuses
    /// and classifies. Returns `[N, classes, H/4, W/4]` logits.
    pub fn decoder(&self, pyramid: &FeaturePyramid<'t, T>) -> Result<Var<'t, T>> {
        let cfg = self.model.config();
        let ids = &self.model.layout().decoder;
        let first = pyramid.levels[0].shape();
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut upsampled = Vec::with_capacity(4);
        for (i, level) in pyramid.levels.iter().enumerate() {
            let s = level.shape();
            if s[0] != n || s[1] != cfg.stages[i].channels || s[2] * (1 << i) != h || s[3] * (1 << i) != w {
                return Err(Error::dim(
                    "decoder",
                    format!(
                        "pyramid level {} has shape {s:?}, inconsistent with level 1 {first:?}",
                        i + 1
                    ),
                ));
            }
            upsampled.push(level.bilinear_upsample(h, w, false)?);
        }
        let fused = Var::concat(&upsampled, 1)?;
        let fused = self.conv(fused, &ids.fuse, Conv2dOptions::default())?;
        self.conv(fused, &ids.classifier, Conv2dOptions::default())
    }

    pub fn segment(&self, image: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = image.shape();
        if shape.len() != 4 {
            return Err(Error::dim("segment", format!("expected [N,3,H,W], got {shape:?}")));
        }
        for axis in [2, 3] {
            if !shape[axis].is_multiple_of(super::config::INPUT_MULTIPLE) {
                return Err(Error::dim_axis(
                    "segment",
                    axis,
                    format!(
                        "extent {} is not a multiple of {}",
                        shape[axis],
                        super::config::INPUT_MULTIPLE
                    ),
                ));
            }
        }
        let pyramid = self.encoder(image)?;
        self.decoder(&pyramid)
    }
}
