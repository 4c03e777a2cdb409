use std::io::Write;

use incepformer::train::{eval_miou, Checkpoint, MiouReport, TrainConfig, Trainer};
use incepformer::Scalar;

use crate::args::{Dtype, EvalArgs, Format, TrainArgs};
use crate::error::{CliError, CliResult};
use crate::setup::{build_model, dataset, emit, model_config};

/// Config file first, then flag overrides.
fn train_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.max_iters = args.iters.unwrap_or(cfg.max_iters);
    cfg.batch_size = args.batch.unwrap_or(cfg.batch_size);
    cfg.base_lr = args.lr.unwrap_or(cfg.base_lr);
    cfg.crop = match args.crop {
        Some(c) => (c.height, c.width),
        None if args.config.is_some() => cfg.crop,
        None => (args.data.input.height, args.data.input.width),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn run_train(args: &TrainArgs) -> CliResult {
    match args.dtype {
        Dtype::F32 => train_typed::<f32>(args),
        Dtype::F64 => train_typed::<f64>(args),
    }
}

fn train_typed<T: Scalar>(args: &TrainArgs) -> CliResult {
    let cfg = train_config(args)?;
    let num_classes = model_config(&args.model)?.num_classes;
    let data = dataset(&args.data, num_classes, cfg.seed)?;
    let model = build_model::<T>(&args.model, cfg.seed, None)?;
    let mut trainer = match &args.checkpoint {
        Some(path) => Trainer::resume(model, cfg, &Checkpoint::load(path)?)?,
        None => Trainer::new(model, cfg)?,
    };
    let mut out = std::io::stdout().lock();
    let log_err = |e: std::io::Error| CliError::io("<stdout>", e);
    writeln!(out, "iter,lr,loss").map_err(log_err)?;
    let mut write_err = None;
    let result = trainer.run(&data, |log| {
        if write_err.is_none() {
            write_err = writeln!(out, "{},{:e},{}", log.iteration, log.lr, log.loss).err();
        }
    });
    if let Some(e) = write_err {
        return Err(log_err(e));
    }
    result?;
    trainer.checkpoint().save(&args.out)?;
    eprintln!(
        "checkpoint written to {} (iteration {})",
        args.out.display(),
        trainer.iteration()
    );
    Ok(())
}

pub fn run_eval(args: &EvalArgs) -> CliResult {
    let report = match args.dtype {
        Dtype::F32 => eval_typed::<f32>(args)?,
        Dtype::F64 => eval_typed::<f64>(args)?,
    };
    emit(&render(&report, args.format)?, None)
}

fn eval_typed<T: Scalar>(args: &EvalArgs) -> CliResult<MiouReport> {
    let model = build_model::<T>(&args.model, args.seed, args.checkpoint.as_deref())?;
    let data = dataset(&args.data, model.config().num_classes, args.seed)?;
    Ok(eval_miou(&model, &data, incepformer::train::IGNORE_INDEX)?)
}

fn render(report: &MiouReport, format: Format) -> CliResult<Vec<u8>> {
    let present = || {
        report
            .per_class
            .iter()
            .enumerate()
            .filter_map(|(c, iou)| iou.map(|v| (c, v)))
    };
    match format {
        Format::Table => {
            let mut s = format!(
                "mIoU {:.4} over {} classes\nclass  iou\n",
                report.miou,
                present().count()
            );
            for (c, iou) in present() {
                s += &format!("{c:>5}  {iou:.4}\n");
            }
            Ok(s.into_bytes())
        }
        Format::Csv => {
            let mut s = "class,iou\n".to_string();
            for (c, iou) in present() {
                s += &format!("{c},{iou}\n");
            }
            s += &format!("mean,{}\n", report.miou);
            Ok(s.into_bytes())
        }
        Format::Json => {
            let doc = serde_json::json!({
                "miou": report.miou,
                "per_class": report.per_class,
                "scored_pixels": report.confusion.total(),
            });
            let mut out = serde_json::to_vec_pretty(&doc).map_err(|e| CliError::Config(e.to_string()))?;
            out.push(b'\n');
            Ok(out)
        }
    }
}
