use incepformer::gradcheck::{check_model, op_suite, NamedCheck, DEFAULT_REL_FLOOR};
use incepformer::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::args::{Dtype, Format, GradcheckArgs};
use crate::error::{CliError, CliResult};
use crate::setup::{build_model, emit};

struct Row {
    scope: &'static str,
    check: NamedCheck,
}

pub fn run(args: &GradcheckArgs) -> CliResult {
    if args.dtype != Dtype::F64 {
        return Err(CliError::Config("gradient checks need --dtype f64".into()));
    }
    if !(args.step > 0.0 && args.tol > 0.0) {
        return Err(CliError::Config("--step and --tol must be positive".into()));
    }
    let mut rows: Vec<Row> = op_suite(args.seed, args.step, DEFAULT_REL_FLOOR)?
        .into_iter()
        .map(|check| Row { scope: "op", check })
        .collect();
    if !args.ops_only {
        let model = build_model::<f64>(&args.model, args.seed, None)?;
        let (h, w) = (args.input.height, args.input.width);
        model.config().check_input(h, w)?;
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let images = Tensor::<f64>::rand_uniform(vec![args.batch, 3, h, w], 0.0, 1.0, &mut rng);
        let classes = model.config().num_classes as u8;
        let labels: Vec<u8> = (0..args.batch * h * w).map(|_| rng.random_range(0..classes)).collect();
        let checks = check_model(&model, &images, &labels, 255, args.step, DEFAULT_REL_FLOOR)?;
        rows.extend(checks.into_iter().map(|check| Row { scope: "param", check }));
    }
    let failed = rows.iter().filter(|r| !r.check.comparison.passes(args.tol)).count();
    emit(&render(&rows, args.tol, args.format)?, None)?;
    if failed > 0 {
        return Err(CliError::GradcheckFailed {
            failed,
            total: rows.len(),
        });
    }
    Ok(())
}

fn status(r: &Row, tol: f64) -> &'static str {
    if r.check.comparison.passes(tol) {
        "pass"
    } else {
        "FAIL"
    }
}

fn render(rows: &[Row], tol: f64, format: Format) -> CliResult<Vec<u8>> {
    match format {
        Format::Table => {
            let width = rows.iter().map(|r| r.check.name.len()).max().unwrap_or(4).max(4);
            let mut s = format!(
                "{:<5}  {:<width$}  {:>7}  {:>10}  {:>10}  status\n",
                "scope", "name", "numel", "max_abs", "max_rel"
            );
            for r in rows {
                let c = &r.check.comparison;
                s += &format!(
                    "{:<5}  {:<width$}  {:>7}  {:>10.3e}  {:>10.3e}  {}\n",
                    r.scope,
                    r.check.name,
                    c.numel,
                    c.max_abs_error,
                    c.max_rel_error,
                    status(r, tol)
                );
            }
            let worst = rows
                .iter()
                .map(|r| r.check.comparison.max_rel_error)
                .fold(0.0, f64::max);
            let passed = rows.iter().filter(|r| r.check.comparison.passes(tol)).count();
            s += &format!(
                "{passed}/{} checks within {tol:e}; worst relative error {worst:.3e}\n",
                rows.len()
            );
            Ok(s.into_bytes())
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let fail = |e: csv::Error| CliError::Config(e.to_string());
            w.write_record(["scope", "name", "numel", "max_abs_error", "max_rel_error", "pass"])
                .map_err(fail)?;
            for r in rows {
                let c = &r.check.comparison;
                let fields = [
                    r.scope.to_string(),
                    r.check.name.clone(),
                    c.numel.to_string(),
                    c.max_abs_error.to_string(),
                    c.max_rel_error.to_string(),
                    c.passes(tol).to_string(),
                ];
                w.write_record(&fields).map_err(fail)?;
            }
            w.into_inner().map_err(|e| CliError::Config(e.to_string()))
        }
        Format::Json => {
            let items: Vec<_> = rows
                .iter()
                .map(|r| {
                    let c = &r.check.comparison;
                    serde_json::json!({
                        "scope": r.scope,
                        "name": r.check.name,
                        "numel": c.numel,
                        "max_abs_error": c.max_abs_error,
                        "max_rel_error": c.max_rel_error,
                        "pass": c.passes(tol),
                    })
                })
                .collect();
            let doc = serde_json::json!({ "tolerance": tol, "checks": items });
            let mut out = serde_json::to_vec_pretty(&doc).map_err(|e| CliError::Config(e.to_string()))?;
            out.push(b'\n');
            Ok(out)
        }
    }
}
