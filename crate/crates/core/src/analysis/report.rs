use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What kind of work a row's FLOPs measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostClass {
    /// Convolutions and projections.
    Linear,
    /// Query-key scores and the weighted sum of values; quadratic in resolution.
    TokenPair,
    /// Norms, activations, softmax and pooling at one op per element.
    Elementwise,
}

impl CostClass {
    pub fn as_str(self) -> &'static str {
        match self {
            CostClass::Linear => "linear",
            CostClass::TokenPair => "token_pair",
            CostClass::Elementwise => "elementwise",
        }
    }
}

/// Which row classes count toward FLOPs and how a multiply-accumulate is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopConvention {
    /// 1 counts a multiply-accumulate once, 2 counts multiply and add separately.
    pub mac_factor: u64,
    pub include_token_pair: bool,
    pub include_elementwise: bool,
}

impl Default for FlopConvention {
    fn default() -> Self {
        Self::full()
    }
}

impl FlopConvention {
    /// Every row class, one FLOP per MAC.
    pub fn full() -> Self {
        FlopConvention {
            mac_factor: 1,
            include_token_pair: true,
            include_elementwise: true,
        }
    }

    /// Convolution and projection layers only, as counted by profilers that
    /// hook parameterized modules. This is the convention the published
    /// reference numbers are calibrated against.
    pub fn module_hooks() -> Self {
        FlopConvention {
            mac_factor: 1,
            include_token_pair: false,
            include_elementwise: false,
        }
    }

    pub fn with_mac_factor(mut self, factor: u64) -> Self {
        self.mac_factor = factor;
        self
    }

    pub fn includes(&self, class: CostClass) -> bool {
        match class {
            CostClass::Linear => true,
            CostClass::TokenPair => self.include_token_pair,
            CostClass::Elementwise => self.include_elementwise,
        }
    }

    /// FLOPs credited for a row of `class` doing `ops` basic operations.
    pub fn score(&self, class: CostClass, ops: u64) -> u64 {
        match class {
            _ if !self.includes(class) => 0,
            CostClass::Elementwise => ops,
            _ => ops * self.mac_factor,
        }
    }

    pub fn describe(&self) -> String {
        let mut parts = vec![format!("{} flop per multiply-accumulate", self.mac_factor)];
        parts.push(format!(
            "token-pair matmuls {}",
            if self.include_token_pair {
                "included"
            } else {
                "excluded"
            }
        ));
        parts.push(format!(
            "elementwise ops {}",
            if self.include_elementwise {
                "included"
            } else {
                "excluded"
            }
        ));
        parts.join("; ")
    }
}

impl FromStr for FlopConvention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::full()),
            "module-hooks" => Ok(Self::module_hooks()),
            other => Err(Error::config("convention", format!("unknown convention `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    /// Slash path matching the parameter names of the layer.
    pub layer: String,
    pub class: CostClass,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMeta {
    pub config: String,
    /// `[h, w]`, absent for parameter-only reports.
    pub input: Option<[usize; 2]>,
    pub convention: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostTotals {
    pub params: u64,
    pub flops: u64,
    /// `params / 1e6` rounded to one decimal.
    pub params_millions: f64,
    /// `flops / 1e9` rounded to one decimal.
    pub gflops: f64,
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub meta: CostMeta,
    pub rows: Vec<CostRow>,
    pub totals: CostTotals,
}

impl CostReport {
    pub fn new(meta: CostMeta, rows: Vec<CostRow>) -> Self {
        let params = rows.iter().map(|r| r.params).sum();
        let flops = rows.iter().map(|r| r.flops).sum();
        CostReport {
            meta,
            rows,
            totals: CostTotals {
                params,
                flops,
                params_millions: round1(params as f64 / 1e6),
                gflops: round1(flops as f64 / 1e9),
            },
        }
    }

    pub fn flops_of(&self, class: CostClass) -> u64 {
        self.rows.iter().filter(|r| r.class == class).map(|r| r.flops).sum()
    }

    /// Parameters and FLOPs of all rows whose path starts with `prefix/`.
    pub fn subtotal(&self, prefix: &str) -> (u64, u64) {
        let rows = self.rows.iter().filter(|r| r.layer.split('/').next() == Some(prefix));
        rows.fold((0, 0), |(p, f), r| (p + r.params, f + r.flops))
    }

    /// Subtotals per top-level path component, in first-appearance order.
    pub fn groups(&self) -> Vec<(String, u64, u64)> {
        let mut out: Vec<(String, u64, u64)> = Vec::new();
        for r in &self.rows {
            let head = r.layer.split('/').next().unwrap_or_default();
            match out.iter_mut().find(|g| g.0 == head) {
                Some(g) => {
                    g.1 += r.params;
                    g.2 += r.flops;
                }
                None => out.push((head.to_string(), r.params, r.flops)),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Table,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "table" => Ok(ReportFormat::Table),
            other => Err(Error::config("format", format!("unknown report format `{other}`"))),
        }
    }
}

/// Renders a report. CSV has the header `layer,params,flops` and ends with a
/// `total` row.
pub fn emit_report(report: &CostReport, format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(report).map_err(|e| Error::Contract(e.to_string()))?;
            out.push(b'\n');
            Ok(out)
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let to_err = |e: csv::Error| Error::Contract(e.to_string());
            w.write_record(["layer", "params", "flops"]).map_err(to_err)?;
            for r in &report.rows {
                w.write_record([r.layer.as_str(), &r.params.to_string(), &r.flops.to_string()])
                    .map_err(to_err)?;
            }
            w.write_record([
                "total",
                &report.totals.params.to_string(),
                &report.totals.flops.to_string(),
            ])
            .map_err(to_err)?;
            w.into_inner().map_err(|e| Error::Contract(e.to_string()))
        }
        ReportFormat::Table => Ok(render_table(report).into_bytes()),
    }
}

fn render_table(report: &CostReport) -> String {
    let width = report.rows.iter().map(|r| r.layer.len()).chain([5]).max().unwrap_or(5);
    let mut s = String::new();
    let input = report.meta.input.map_or("-".to_string(), |[h, w]| format!("{w}x{h}"));
    let _ = writeln!(
        s,
        "config: {}  input: {}  convention: {}",
        report.meta.config, input, report.meta.convention
    );
    let _ = writeln!(
        s,
        "{:<width$}  {:<11}  {:>12}  {:>16}",
        "layer", "class", "params", "flops"
    );
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:<11}  {:>12}  {:>16}",
            r.layer,
            r.class.as_str(),
            r.params,
            r.flops
        );
    }
    let _ = writeln!(s, "{}", "-".repeat(width + 45));
    for (group, p, f) in report.groups() {
        let _ = writeln!(s, "{:<width$}  {:<11}  {:>12}  {:>16}", group, "", p, f);
    }
    let t = &report.totals;
    let _ = writeln!(
        s,
        "{:<width$}  {:<11}  {:>12}  {:>16}\n{:<width$}  {:<11}  {:>11.1}M  {:>15.1}G",
        "total", "", t.params, t.flops, "", "", t.params_millions, t.gflops
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CostReport {
        CostReport::new(
            CostMeta {
                config: "x".into(),
                input: Some([64, 64]),
                convention: FlopConvention::full().describe(),
            },
            vec![
                CostRow {
                    layer: "stage1/embed/proj".into(),
                    class: CostClass::Linear,
                    params: 10,
                    flops: 100,
                },
                CostRow {
                    layer: "decoder/fuse".into(),
                    class: CostClass::Linear,
                    params: 5,
                    flops: 7,
                },
            ],
        )
    }

    #[test]
    fn totals_are_row_sums() {
        let r = sample();
        assert_eq!((r.totals.params, r.totals.flops), (15, 107));
        assert_eq!(r.subtotal("stage1"), (10, 100));
        assert_eq!(r.groups().len(), 2);
    }

    #[test]
    fn empty_report() {
        let r = CostReport::new(
            CostMeta {
                config: "empty".into(),
                input: None,
                convention: String::new(),
            },
            Vec::new(),
        );
        assert_eq!((r.totals.params, r.totals.flops), (0, 0));
        let csv = String::from_utf8(emit_report(&r, ReportFormat::Csv).unwrap()).unwrap();
        assert_eq!(csv, "layer,params,flops\ntotal,0,0\n");
    }

    #[test]
    fn csv_layout() {
        let csv = String::from_utf8(emit_report(&sample(), ReportFormat::Csv).unwrap()).unwrap();
        assert_eq!(
            csv,
            "layer,params,flops\nstage1/embed/proj,10,100\ndecoder/fuse,5,7\ntotal,15,107\n"
        );
    }

    #[test]
    fn emission_is_deterministic() {
        for f in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Table] {
            assert_eq!(emit_report(&sample(), f).unwrap(), emit_report(&sample(), f).unwrap());
        }
    }

    #[test]
    fn unknown_format() {
        assert!("xml".parse::<ReportFormat>().is_err());
    }

    #[test]
    fn convention_scoring() {
        let c = FlopConvention::module_hooks().with_mac_factor(2);
        assert_eq!(c.score(CostClass::Linear, 5), 10);
        assert_eq!(c.score(CostClass::TokenPair, 5), 0);
        assert_eq!(FlopConvention::full().score(CostClass::Elementwise, 5), 5);
    }
}
