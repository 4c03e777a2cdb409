use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::augment;
use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::data::SampleSource;
use super::metrics::{ConfusionMatrix, MiouReport};
use super::optim::{adamw_step, poly_lr, OptimState};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{IncepFormer, ModelConfig};
use crate::ops::NormMode;
use crate::tensor::{Scalar, Tensor};

/// Keeps augmentation draws independent of weight initialization, which
/// uses the unsalted seed.
const AUGMENT_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Augmentation generator for one iteration. Each iteration has its own
/// stream, so a resumed run draws exactly what an uninterrupted one would.
pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ AUGMENT_SALT);
    rng.set_stream(iteration);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Stacks `samples` into `[N, 3, H, W]` images and concatenated labels.
pub fn collate<T: Scalar>(samples: &[super::SegSample]) -> Result<(Tensor<T>, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut image = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut label = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::dim(
                "collate",
                format!("{}×{} sample in a {h}×{w} batch", s.height(), s.width()),
            ));
        }
        image.extend(s.image.data().iter().map(|&v| T::from_f64(v as f64)));
        label.extend_from_slice(&s.label);
    }
    Ok((Tensor::from_parts(vec![samples.len(), 3, h, w], image), label))
}

/// Single-threaded AdamW training with poly decay.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    model: IncepFormer<T>,
    optim: OptimState<T>,
    cfg: TrainConfig,
    iteration: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: IncepFormer<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let optim = OptimState::new(model.params());
        Ok(Trainer {
            model,
            optim,
            cfg,
            iteration: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(mut model: IncepFormer<T>, cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let optim = ckpt.restore(&mut model)?;
        Ok(Trainer {
            model,
            optim,
            cfg,
            iteration: ckpt.iteration,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, Some(&self.optim), self.iteration)
    }

    pub fn model(&self) -> &IncepFormer<T> {
        &self.model
    }

    pub fn into_model(self) -> IncepFormer<T> {
        self.model
    }

    pub fn optim(&self) -> &OptimState<T> {
        &self.optim
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Index of the next step.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn finished(&self) -> bool {
        self.iteration >= self.cfg.max_iters
    }

    /// Augmented batch for `iteration`: samples `(iteration·B + j) mod n`.
    pub fn batch<D: SampleSource + ?Sized>(&self, data: &D, iteration: u64) -> Result<(Tensor<T>, Vec<u8>)> {
        if data.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let b = self.cfg.batch_size as u64;
        let mut rng = iteration_rng(self.cfg.seed, iteration);
        let samples = (0..b)
            .map(|j| {
                let index = ((iteration * b + j) % data.len() as u64) as usize;
                augment(&data.sample(index)?, &self.cfg, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        collate(&samples)
    }

    /// Forward, backward, AdamW update and running-statistics update.
    pub fn step<D: SampleSource + ?Sized>(&mut self, data: &D) -> Result<StepLog> {
        let iteration = self.iteration;
        let diverged = |e: Error| match e {
            Error::NonFinite { op } => Error::Diverged {
                iteration,
                detail: format!("non-finite value in {op}"),
            },
            other => other,
        };
        let (images, labels) = self.batch(data, iteration)?;
        let lr = poly_lr(iteration, &self.cfg);
        let (ch, cw) = self.cfg.crop;

        let tape = Tape::new();
        let session = self.model.session(&tape, NormMode::Train, true);
        let (loss, grads) = (|| {
            let logits = session.segment(tape.constant(images))?;
            let loss = logits
                .bilinear_upsample(ch, cw, false)?
                .cross_entropy(&labels, self.cfg.ignore_index)?;
            let grads = tape.backward(loss)?;
            Ok((loss.value().item()?.as_f64(), grads))
        })()
        .map_err(diverged)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration,
                detail: format!("loss is {loss}"),
            });
        }
        let grads: Vec<Option<Tensor<T>>> = session.param_vars().iter().map(|&v| grads.get(v).cloned()).collect();
        if let Some(i) = grads.iter().position(|g| g.as_ref().is_some_and(|g| !g.is_finite())) {
            let id = self.model.params().ids().nth(i).expect("aligned with params");
            return Err(Error::Diverged {
                iteration,
                detail: format!("non-finite gradient for `{}`", self.model.params().name(id)),
            });
        }
        let updates = session.into_updates();

        adamw_step(self.model.params_mut(), &grads, &mut self.optim, lr, &self.cfg)?;
        self.model.apply_bn_updates(&updates);
        self.iteration += 1;
        Ok(StepLog { iteration, lr, loss })
    }

    /// Steps until `max_iters`, returning the losses of the steps taken here.
    pub fn run<D: SampleSource + ?Sized>(&mut self, data: &D, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<f64>> {
        let mut losses = Vec::new();
        while !self.finished() {
            let log = self.step(data)?;
            on_step(&log);
            losses.push(log.loss);
        }
        Ok(losses)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    /// Loss at every iteration, in order.
    pub losses: Vec<f64>,
    pub model: IncepFormer<T>,
}

/// Initializes a model from `train_cfg.seed` and trains it for `max_iters` steps.
pub fn train<T: Scalar, D: SampleSource + ?Sized>(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &D,
) -> Result<TrainOutcome<T>> {
    let model = IncepFormer::new(model_cfg.clone(), train_cfg.seed)?;
    let mut trainer = Trainer::new(model, train_cfg.clone())?;
    let losses = trainer.run(data, |_| {})?;
    Ok(TrainOutcome {
        losses,
        model: trainer.into_model(),
    })
}

/// Single-scale mIoU with eval-mode normalization; logits are upsampled to
/// full resolution before the argmax.
pub fn eval_miou<T: Scalar, D: SampleSource + ?Sized>(
    model: &IncepFormer<T>,
    data: &D,
    ignore_index: u8,
) -> Result<MiouReport> {
    if data.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let mut cm = ConfusionMatrix::new(model.config().num_classes);
    for i in 0..data.len() {
        let sample = data.sample(i)?;
        let (image, label) = collate::<T>(std::slice::from_ref(&sample))?;
        let pred = model.predict_labels(&image)?;
        cm.update(&label, &pred, ignore_index)?;
    }
    cm.report()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::data::make_synth_dataset;

    fn small() -> (IncepFormer<f32>, TrainConfig, Vec<crate::train::SegSample>) {
        let model = IncepFormer::new(ModelConfig::micro(), 3).unwrap();
        let cfg = TrainConfig {
            base_lr: 1e-3,
            max_iters: 3,
            crop: (32, 32),
            ..TrainConfig::default()
        };
        (model, cfg, make_synth_dataset(3, 32, 32, 2, 5).unwrap())
    }

    #[test]
    fn batches_wrap_around() {
        let (model, mut cfg, data) = small();
        cfg.scale_range = (1.0, 1.0);
        cfg.flip_prob = 0.0;
        let t = Trainer::new(model, cfg).unwrap();
        let (_, labels) = t.batch(&data, 1).unwrap();
        let expect: Vec<u8> = data[2].label.iter().chain(&data[0].label).copied().collect();
        assert_eq!(labels, expect);
    }

    #[test]
    fn step_advances_and_logs() {
        let (model, cfg, data) = small();
        let mut t = Trainer::new(model, cfg).unwrap();
        let log = t.step(&data).unwrap();
        assert_eq!((log.iteration, log.lr), (0, 1e-3));
        assert!(log.loss.is_finite());
        assert_eq!((t.iteration(), t.optim().step), (1, 1));
    }

    #[test]
    fn empty_sets_are_rejected() {
        let (model, cfg, _) = small();
        let empty: Vec<crate::train::SegSample> = Vec::new();
        assert!(eval_miou(&model, &empty, 255).is_err());
        let mut t = Trainer::new(model, cfg).unwrap();
        assert!(matches!(t.step(&empty), Err(Error::Contract(_))));
    }

    #[test]
    fn exploding_lr_reports_iteration() {
        let (model, mut cfg, data) = small();
        cfg.base_lr = 1e30;
        cfg.max_iters = 50;
        let mut t = Trainer::new(model, cfg).unwrap();
        let err = t.run(&data, |_| {}).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }
}
