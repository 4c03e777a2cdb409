//! Shared fixtures for the benchmarks.

use incepformer::model::{IncepFormer, ModelConfig};
use incepformer::train::{make_synth_dataset, SegSample, TrainConfig};
use incepformer::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Standard normal tensor, reproducible per `seed`.
pub fn randn<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Uniform `[0, 1)` image batch `[n, 3, h, w]`.
pub fn images<T: Scalar>(n: usize, h: usize, w: usize, seed: u64) -> Tensor<T> {
    Tensor::rand_uniform(vec![n, 3, h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn model<T: Scalar>(cfg: ModelConfig) -> IncepFormer<T> {
    IncepFormer::new(cfg, 0).expect("preset configs are valid")
}

/// Synthetic scenes and a short training schedule cropped to their size.
pub fn training_setup(samples: usize, side: usize) -> (Vec<SegSample>, TrainConfig) {
    let data = make_synth_dataset(samples, side, side, 2, 0).expect("valid scene parameters");
    let cfg = TrainConfig {
        base_lr: 1e-3,
        max_iters: u64::MAX,
        crop: (side, side),
        ..TrainConfig::default()
    };
    (data, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_reproducible() {
        assert_eq!(randn::<f32>(&[4], 3), randn::<f32>(&[4], 3));
        assert_eq!(images::<f32>(1, 32, 32, 0).shape(), &[1, 3, 32, 32]);
        let (data, cfg) = training_setup(2, 32);
        assert_eq!((data.len(), cfg.crop), (2, (32, 32)));
        assert!(cfg.validate().is_ok());
    }
}
