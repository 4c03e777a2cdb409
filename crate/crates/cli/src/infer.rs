use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use incepformer::train::Scene;
use incepformer::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::args::{Dtype, InferArgs};
use crate::error::{CliError, CliResult};
use crate::setup::build_model;

/// Color of class `c`: the bits of `c` are spread over the high bits of the
/// three channels, three at a time, so class 0 is black and neighbouring
/// classes differ strongly.
pub fn palette(class: u8) -> [u8; 3] {
    let mut rgb = [0u8; 3];
    let mut c = class;
    for shift in (0..8).rev() {
        for (ch, v) in rgb.iter_mut().enumerate() {
            *v |= ((c >> ch) & 1) << shift;
        }
        c >>= 3;
    }
    rgb
}

/// Image as `[1, 3, H, W]` in `[0, 1]`.
fn read_image<T: Scalar>(path: &Path) -> CliResult<Tensor<T>> {
    let img = image::open(path).map_err(|e| CliError::io(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(vec![1, 3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        T::from_f64(raw[3 * p + c] as f64 / 255.0)
    }))
}

fn synthetic_image<T: Scalar>(h: usize, w: usize, classes: usize, seed: u64) -> Tensor<T> {
    let sample = Scene::random(h, w, classes, &mut ChaCha8Rng::seed_from_u64(seed)).render();
    Tensor::from_fn(vec![1, 3, h, w], |i| T::from_f64(sample.image.data()[i] as f64))
}

fn write_pnm(path: &Path, bytes: &[u8], w: usize, h: usize, color: bool) -> CliResult {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let (subtype, layout) = if color {
        (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    } else {
        (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    };
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(subtype)
        .write_image(bytes, w as u32, h as u32, layout)
        .map_err(|e| CliError::io(path, e))
}

pub fn run(args: &InferArgs) -> CliResult {
    match args.dtype {
        Dtype::F32 => run_typed::<f32>(args),
        Dtype::F64 => run_typed::<f64>(args),
    }
}

fn run_typed<T: Scalar>(args: &InferArgs) -> CliResult {
    let model = build_model::<T>(&args.model, args.seed, args.checkpoint.as_deref())?;
    let image = match &args.image {
        Some(path) => read_image::<T>(path)?,
        None => synthetic_image(
            args.input.height,
            args.input.width,
            model.config().num_classes,
            args.seed,
        ),
    };
    let (h, w) = (image.shape()[2], image.shape()[3]);
    model.config().check_input(h, w)?;
    let mask = model.predict_labels(&image)?;
    write_pnm(&args.out, &mask, w, h, false)?;
    if let Some(path) = &args.color {
        let rgb: Vec<u8> = mask.iter().flat_map(|&c| palette(c)).collect();
        write_pnm(path, &rgb, w, h, true)?;
    }
    eprintln!("{w}x{h} mask written to {}", args.out.display());
    Ok(())
}
