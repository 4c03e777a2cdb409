use serde::{Deserialize, Serialize};

use super::report::{CostClass, CostMeta, CostReport, CostRow, FlopConvention};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, INPUT_MULTIPLE, IN_CHANNELS};

fn conv_out(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

/// Collects rows; with no input size every FLOP entry is zero and rows
/// without parameters are dropped.
struct Rows {
    rows: Vec<CostRow>,
    sized: bool,
    convention: FlopConvention,
    bias: bool,
}

impl Rows {
    fn push(&mut self, layer: String, class: CostClass, params: usize, ops: usize) {
        if !self.sized && params == 0 {
            return;
        }
        let flops = if self.sized {
            self.convention.score(class, ops as u64)
        } else {
            0
        };
        self.rows.push(CostRow {
            layer,
            class,
            params: params as u64,
            flops,
        });
    }

    fn bias(&self, c: usize) -> usize {
        if self.bias {
            c
        } else {
            0
        }
    }

    /// Convolution producing an `out`-pixel map.
    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, layer: String, cin: usize, cout: usize, kh: usize, kw: usize, groups: usize, out: usize) {
        let weights = kh * kw * (cin / groups) * cout;
        self.push(layer, CostClass::Linear, weights + self.bias(cout), weights * out);
    }

    /// Projection `[tokens, cin] → [tokens, cout]`.
    fn linear(&mut self, layer: String, cin: usize, cout: usize, tokens: usize) {
        self.push(
            layer,
            CostClass::Linear,
            cin * cout + self.bias(cout),
            tokens * cin * cout,
        );
    }

    fn norm(&mut self, layer: String, c: usize, positions: usize) {
        self.push(layer, CostClass::Elementwise, 2 * c, c * positions);
    }
}

fn build_rows(cfg: &ModelConfig, input: Option<(usize, usize)>, convention: FlopConvention) -> Vec<CostRow> {
    // Any valid size works for a parameter-only walk; spatial extents only scale FLOPs.
    let (in_h, in_w) = input.unwrap_or((INPUT_MULTIPLE, INPUT_MULTIPLE));
    let mut r = Rows {
        rows: Vec::new(),
        sized: input.is_some(),
        convention,
        bias: cfg.bias,
    };
    let (mut h, mut w) = (in_h, in_w);
    let mut cin = IN_CHANNELS;
    let mut first_level = (0, 0);
    for (si, stage) in cfg.stages.iter().enumerate() {
        let prefix = format!("stage{}", si + 1);
        let c = stage.channels;
        let (k, s, p) = cfg.patch_mode.geometry(si);
        h = conv_out(h, k, s, p);
        w = conv_out(w, k, s, p);
        if si == 0 {
            first_level = (h, w);
        }
        let l = h * w;
        r.conv(format!("{prefix}/embed/proj"), cin, c, k, k, 1, l);
        r.norm(format!("{prefix}/embed/norm"), c, l);
        let red = stage.reduction;
        for bi in 0..stage.depth {
            let b = format!("{prefix}/block{bi}");
            r.norm(format!("{b}/attn/norm"), c, l);
            r.linear(format!("{b}/attn/wq"), c, c, l);
            let kv_tokens = if cfg.bypasses_reduction(si) {
                l
            } else {
                let (h1, w1) = (conv_out(h, red, red, 0), conv_out(w, red, red, 0));
                r.conv(format!("{b}/attn/reduce/strip_w"), c, c, 1, red, c, h * w1);
                r.conv(format!("{b}/attn/reduce/strip_h"), c, c, red, 1, c, h1 * w1);
                let (h2, w2) = (conv_out(h, 3, red, 1), conv_out(w, 3, red, 1));
                r.conv(format!("{b}/attn/reduce/strided"), c, c, 3, 3, c, h2 * w2);
                r.push(format!("{b}/attn/reduce/pool"), CostClass::Elementwise, 0, c * l);
                r.conv(format!("{b}/attn/reduce/pooled"), c, c, 3, 3, c, h1 * w1);
                h1 * w1 + h2 * w2 + h1 * w1
            };
            r.norm(format!("{b}/attn/reduce/norm"), c, kv_tokens);
            r.linear(format!("{b}/attn/wk"), c, c, kv_tokens);
            r.linear(format!("{b}/attn/wv"), c, c, kv_tokens);
            r.push(format!("{b}/attn/scores"), CostClass::TokenPair, 0, l * kv_tokens * c);
            r.push(
                format!("{b}/attn/softmax"),
                CostClass::Elementwise,
                0,
                stage.heads * l * kv_tokens,
            );
            r.push(format!("{b}/attn/mix"), CostClass::TokenPair, 0, l * kv_tokens * c);
            r.linear(format!("{b}/attn/wo"), c, c, l);
            let hidden = c * stage.ffn_ratio;
            r.norm(format!("{b}/ffn/norm"), c, l);
            r.conv(format!("{b}/ffn/expand"), c, hidden, 1, 1, 1, l);
            r.conv(format!("{b}/ffn/dw"), hidden, hidden, 3, 3, hidden, l);
            r.push(format!("{b}/ffn/act"), CostClass::Elementwise, 0, hidden * l);
            r.conv(format!("{b}/ffn/project"), hidden, c, 1, 1, 1, l);
        }
        cin = c;
    }
    let out = first_level.0 * first_level.1;
    r.conv(
        "decoder/fuse".into(),
        cfg.concat_channels(),
        cfg.decoder_channels,
        1,
        1,
        1,
        out,
    );
    r.conv(
        "decoder/classifier".into(),
        cfg.decoder_channels,
        cfg.num_classes,
        1,
        1,
        1,
        out,
    );
    r.rows
}

/// Closed-form parameter count per layer.
pub fn count_params(cfg: &ModelConfig) -> CostReport {
    CostReport::new(
        CostMeta {
            config: cfg.name.clone(),
            input: None,
            convention: "parameters only".into(),
        },
        build_rows(cfg, None, FlopConvention::full()),
    )
}

/// Per-layer FLOPs at an `h×w` input under the default convention.
pub fn estimate_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<CostReport> {
    estimate_flops_with(cfg, h, w, FlopConvention::default())
}

pub fn estimate_flops_with(cfg: &ModelConfig, h: usize, w: usize, convention: FlopConvention) -> Result<CostReport> {
    cfg.validate()?;
    cfg.check_input(h, w)?;
    if convention.mac_factor == 0 {
        return Err(Error::config("convention.mac_factor", "must be positive"));
    }
    Ok(CostReport::new(
        CostMeta {
            config: cfg.name.clone(),
            input: Some([h, w]),
            convention: convention.describe(),
        },
        build_rows(cfg, Some((h, w)), convention),
    ))
}

/// Change between two consecutive decoder widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderDelta {
    pub from: usize,
    pub to: usize,
    pub params: i64,
    pub flops: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderComparison {
    pub channels: Vec<usize>,
    pub reports: Vec<CostReport>,
    pub deltas: Vec<DecoderDelta>,
}

/// One report per decoder width, plus the deltas between consecutive widths.
/// With `input` absent the reports carry parameters only.
pub fn compare_decoder_channels(
    cfg: &ModelConfig,
    channels: &[usize],
    input: Option<(usize, usize)>,
    convention: FlopConvention,
) -> Result<DecoderComparison> {
    let mut reports = Vec::with_capacity(channels.len());
    for (i, &c) in channels.iter().enumerate() {
        if c == 0 {
            return Err(Error::config(format!("channels[{i}]"), "must be positive"));
        }
        let mut variant = cfg.clone();
        variant.decoder_channels = c;
        variant.name = format!("{}@C={c}", cfg.name);
        reports.push(match input {
            Some((h, w)) => estimate_flops_with(&variant, h, w, convention)?,
            None => count_params(&variant),
        });
    }
    let deltas = channels
        .windows(2)
        .zip(reports.windows(2))
        .map(|(c, r)| DecoderDelta {
            from: c[0],
            to: c[1],
            params: r[1].totals.params as i64 - r[0].totals.params as i64,
            flops: r[1].totals.flops as i64 - r[0].totals.flops as i64,
        })
        .collect();
    Ok(DecoderComparison {
        channels: channels.to_vec(),
        reports,
        deltas,
    })
}
