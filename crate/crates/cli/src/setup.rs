//! Model construction and output helpers shared by the subcommands.

use std::io::Write;
use std::path::Path;

use incepformer::model::{IncepFormer, ModelConfig, PatchMode};
use incepformer::train::{make_synth_dataset, Checkpoint, SegSample};
use incepformer::Scalar;

use crate::args::{DataArgs, ModelArgs, PatchModeArg};
use crate::error::{CliError, CliResult};

pub fn model_config(args: &ModelArgs) -> CliResult<ModelConfig> {
    let mut cfg = ModelConfig::resolve(&args.model)?;
    if let Some(mode) = args.patch_mode {
        cfg.patch_mode = match mode {
            PatchModeArg::Nonoverlap => PatchMode::Nonoverlap,
            PatchModeArg::Overlap => PatchMode::Overlap,
        };
    }
    Ok(cfg)
}

/// Fresh model from `seed`, with weights from `checkpoint` when given.
pub fn build_model<T: Scalar>(args: &ModelArgs, seed: u64, checkpoint: Option<&Path>) -> CliResult<IncepFormer<T>> {
    let mut model = IncepFormer::new(model_config(args)?, seed)?;
    if let Some(path) = checkpoint {
        Checkpoint::load(path)?.restore_weights(&mut model)?;
    }
    Ok(model)
}

pub fn dataset(args: &DataArgs, num_classes: usize, seed: u64) -> CliResult<Vec<SegSample>> {
    if args.samples == 0 {
        return Err(CliError::Config("--samples must be positive".into()));
    }
    let seed = args.data_seed.unwrap_or(seed);
    Ok(make_synth_dataset(
        args.samples,
        args.input.height,
        args.input.width,
        num_classes,
        seed,
    )?)
}

/// Writes to `out`, or to stdout when absent.
pub fn emit(bytes: &[u8], out: Option<&Path>) -> CliResult {
    match out {
        Some(path) => std::fs::write(path, bytes).map_err(|e| CliError::io(path, e)),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| CliError::io("<stdout>", e)),
    }
}
