use std::collections::BTreeMap;

use incepformer::analysis::{
    compare_decoder_channels, count_params, emit_report, estimate_flops, estimate_flops_with, CostClass, CostReport,
    FlopConvention, ReportFormat,
};
use incepformer::model::{IncepFormer, ModelConfig};
use incepformer::ops::NormMode;
use incepformer::{Tape, Tensor};

/// Parameter entries per layer path (name minus its last component).
fn enumerate_by_layer(cfg: &ModelConfig) -> BTreeMap<String, u64> {
    let model = IncepFormer::<f32>::new(cfg.clone(), 0).unwrap();
    let mut out = BTreeMap::new();
    for (name, t) in model.params().iter() {
        let layer = &name[..name.rfind('/').unwrap()];
        *out.entry(layer.to_string()).or_default() += t.numel() as u64;
    }
    out
}

fn closed_form_by_layer(cfg: &ModelConfig) -> BTreeMap<String, u64> {
    count_params(cfg)
        .rows
        .into_iter()
        .map(|r| (r.layer, r.params))
        .collect()
}

#[test]
fn closed_form_matches_enumeration() {
    let mut variants = vec![
        ModelConfig::micro(),
        ModelConfig::ipt_t(),
        ModelConfig::ipt_s(),
        ModelConfig::ipt_b(),
    ];
    let mut knobs = ModelConfig::micro();
    knobs.bias = false;
    knobs.bypass_unit_reduction = true;
    knobs.embed_norm = incepformer::model::EmbedNorm::Layer;
    knobs.patch_mode = incepformer::model::PatchMode::Overlap;
    variants.push(knobs);
    for cfg in variants {
        assert_eq!(closed_form_by_layer(&cfg), enumerate_by_layer(&cfg), "{}", cfg.name);
    }
}

#[test]
fn tape_macs_match_estimate() {
    let cfg = ModelConfig::micro();
    let model = IncepFormer::<f64>::new(cfg.clone(), 0).unwrap();
    let tape = Tape::new();
    let session = model.session(&tape, NormMode::Eval, false);
    session
        .segment(tape.constant(Tensor::zeros(vec![1, 3, 64, 96])))
        .unwrap();
    let recorded: u64 = tape.costs().iter().map(|c| c.macs).sum();

    let report = estimate_flops(&cfg, 64, 96).unwrap();
    let estimated = report.flops_of(CostClass::Linear) + report.flops_of(CostClass::TokenPair);
    assert_eq!(recorded, estimated);
}

#[test]
fn attention_terms_per_block() {
    // L·C² + 2·L'·C² + 2·L·L'·C + L·C² for one block
    let cfg = ModelConfig::ipt_t();
    let report = estimate_flops(&cfg, 64, 64).unwrap();
    let (l, c) = (16 * 16u64, 64u64);
    let lk = 3 * 2 * 2;
    let attn: u64 = report
        .rows
        .iter()
        .filter(|r| r.layer.starts_with("stage1/block0/attn/") && r.class != CostClass::Elementwise)
        .filter(|r| {
            ["wq", "wk", "wv", "wo", "scores", "mix"]
                .iter()
                .any(|s| r.layer.ends_with(s))
        })
        .map(|r| r.flops)
        .sum();
    assert_eq!(attn, l * c * c + 2 * lk * c * c + 2 * l * lk * c + l * c * c);
}

#[test]
fn flops_quadruple_when_side_doubles() {
    let cfg = ModelConfig::ipt_t();
    let conv = FlopConvention::module_hooks();
    let small = estimate_flops_with(&cfg, 64, 64, conv).unwrap();
    let large = estimate_flops_with(&cfg, 128, 128, conv).unwrap();
    assert_eq!(large.totals.flops, 4 * small.totals.flops);
    assert_eq!(large.totals.params, small.totals.params);

    let small = estimate_flops(&cfg, 64, 64).unwrap();
    let large = estimate_flops(&cfg, 128, 128).unwrap();
    assert_eq!(large.flops_of(CostClass::Linear), 4 * small.flops_of(CostClass::Linear));
    assert_eq!(
        large.flops_of(CostClass::TokenPair),
        16 * small.flops_of(CostClass::TokenPair)
    );
}

#[test]
fn variant_ordering() {
    let reports: Vec<CostReport> = [ModelConfig::ipt_t(), ModelConfig::ipt_s(), ModelConfig::ipt_b()]
        .iter()
        .map(|c| estimate_flops(c, 512, 512).unwrap())
        .collect();
    for pair in reports.windows(2) {
        assert!(pair[0].totals.params < pair[1].totals.params);
        assert!(pair[0].totals.flops < pair[1].totals.flops);
    }
}

#[test]
fn decoder_is_under_a_million() {
    for cfg in [ModelConfig::ipt_t(), ModelConfig::ipt_s(), ModelConfig::ipt_b()] {
        let (params, _) = count_params(&cfg).subtotal("decoder");
        assert!(params < 1_000_000, "{}: {params}", cfg.name);
    }
}

#[test]
fn decoder_channel_deltas() {
    let cfg = ModelConfig::ipt_s();
    let cmp = compare_decoder_channels(&cfg, &[256, 512, 768, 1024, 2048], None, FlopConvention::full()).unwrap();
    let d512 = &cmp.deltas[1];
    assert_eq!((d512.from, d512.to), (512, 768));
    assert_eq!(d512.params, 1025 * 256 + 256 * 150);
    for d in &cmp.deltas {
        let step = (d.to - d.from) as i64;
        assert_eq!(d.params, step * (1025 + 150));
    }
    let gap = cmp.reports[4].totals.params - cmp.reports[0].totals.params;
    assert_eq!(gap, 1792 * 1175);
    assert!(compare_decoder_channels(&cfg, &[0], None, FlopConvention::full()).is_err());
}

#[test]
fn json_round_trips_through_a_generic_parser() {
    let report = estimate_flops(&ModelConfig::micro(), 64, 64).unwrap();
    let bytes = emit_report(&report, ReportFormat::Json).unwrap();
    let value: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    let back: CostReport = serde_json::from_value(value).unwrap();
    assert_eq!(back, report);
}

#[test]
fn csv_totals_match_report() {
    let report = estimate_flops(&ModelConfig::ipt_t(), 512, 512).unwrap();
    let bytes = emit_report(&report, ReportFormat::Csv).unwrap();
    let mut rd = csv::Reader::from_reader(bytes.as_slice());
    assert_eq!(rd.headers().unwrap(), vec!["layer", "params", "flops"]);
    let records: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), report.rows.len() + 1);
    let last = records.last().unwrap();
    assert_eq!(&last[0], "total");
    assert_eq!(
        last[1].parse::<u64>().unwrap(),
        count_params(&ModelConfig::ipt_t()).totals.params
    );
    assert_eq!(last[2].parse::<u64>().unwrap(), report.totals.flops);
}
