use incepformer::analysis::{
    compare_decoder_channels, count_params, emit_report, estimate_flops_with, DecoderComparison, FlopConvention,
    ReportFormat,
};

use crate::args::{AnalyzeArgs, ConventionArg, Format};
use crate::error::{CliError, CliResult};
use crate::setup::{emit, model_config};

pub fn run(args: &AnalyzeArgs) -> CliResult {
    let cfg = model_config(&args.model)?;
    let convention = match args.convention {
        ConventionArg::Full => FlopConvention::full(),
        ConventionArg::ModuleHooks => FlopConvention::module_hooks(),
    };
    let input = args.input.map(|e| (e.height, e.width));
    let bytes = if args.decoder_channels.is_empty() {
        let report = match input {
            Some((h, w)) => estimate_flops_with(&cfg, h, w, convention)?,
            None => count_params(&cfg),
        };
        let format = match args.format {
            Format::Table => ReportFormat::Table,
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        };
        emit_report(&report, format)?
    } else {
        let cmp = compare_decoder_channels(&cfg, &args.decoder_channels, input, convention)?;
        render_comparison(&cmp, args.format)?
    };
    emit(&bytes, args.out.as_deref())
}

fn render_comparison(cmp: &DecoderComparison, format: Format) -> CliResult<Vec<u8>> {
    let decoder = |i: usize| cmp.reports[i].subtotal("decoder");
    match format {
        Format::Json => {
            let mut out = serde_json::to_vec_pretty(cmp).map_err(|e| CliError::Config(e.to_string()))?;
            out.push(b'\n');
            Ok(out)
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let fail = |e: csv::Error| CliError::Config(e.to_string());
            w.write_record(["decoder_channels", "params", "flops", "decoder_params", "decoder_flops"])
                .map_err(fail)?;
            for (i, (c, r)) in cmp.channels.iter().zip(&cmp.reports).enumerate() {
                let (dp, df) = decoder(i);
                let fields = [
                    c.to_string(),
                    r.totals.params.to_string(),
                    r.totals.flops.to_string(),
                    dp.to_string(),
                    df.to_string(),
                ];
                w.write_record(&fields).map_err(fail)?;
            }
            w.into_inner().map_err(|e| CliError::Config(e.to_string()))
        }
        Format::Table => {
            let mut s = format!("{:>8}  {:>10}  {:>10}  {:>12}\n", "C", "params", "Δparams", "GFLOPs");
            for (i, (c, r)) in cmp.channels.iter().zip(&cmp.reports).enumerate() {
                let delta = i.checked_sub(1).map_or("-".to_string(), |j| {
                    format!("{:+.3}M", cmp.deltas[j].params as f64 / 1e6)
                });
                let gflops = r
                    .meta
                    .input
                    .map_or("-".to_string(), |_| format!("{:.2}", r.totals.flops as f64 / 1e9));
                s += &format!(
                    "{c:>8}  {:>9.2}M  {delta:>10}  {gflops:>12}\n",
                    r.totals.params as f64 / 1e6
                );
            }
            Ok(s.into_bytes())
        }
    }
}
