//! Mini-batch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::segmentation_loss;
use super::optim::Adam;
use super::Model;
use crate::error::{Error, Result};
use crate::preprocess::{augment_stack, Plane};
use crate::tensor::{Float, Tape, Tensor};

/// One preprocessed training slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, H, W]` stacked neighbour slices.
    pub image: Tensor,
    /// `H * W` class indices.
    pub label: Vec<u8>,
}

impl Sample {
    pub fn new(image: Tensor, label: Vec<u8>) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[1] * s[2] != label.len() {
            return Err(Error::Invalid(format!(
                "sample image {s:?} does not match {} labels",
                label.len()
            )));
        }
        Ok(Self { image, label })
    }

    fn dims(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[0], s[1], s[2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    pub class_weights: Vec<Float>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 20,
            batch_size: 4,
            seed: 0,
            augment: true,
            class_weights: vec![1.0; 4],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,step,loss,lr";

    pub fn csv_row(&self) -> String {
        format!("{},{},{:.9e},{:e}", self.epoch, self.step, self.loss, self.lr)
    }
}

fn augment_sample(s: &Sample, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let [c, h, w] = s.dims();
    let planes: Vec<Plane<f32>> = (0..c)
        .map(|k| Plane {
            rows: h,
            cols: w,
            data: s.image.data()[k * h * w..(k + 1) * h * w]
                .iter()
                .map(|v| *v as f32)
                .collect(),
        })
        .collect();
    let lbl = Plane {
        rows: h,
        cols: w,
        data: s.label.clone(),
    };
    let (planes, lbl, _) = augment_stack(&planes, &lbl, rng)?;
    let (h2, w2) = (lbl.rows, lbl.cols);
    let data = planes
        .iter()
        .flat_map(|p| p.data.iter().map(|v| *v as Float))
        .collect();
    Sample::new(Tensor::new(vec![c, h2, w2], data)?, lbl.data)
}

fn batch(samples: &[Sample]) -> Result<(Tensor, Vec<u8>)> {
    let dims = samples[0].dims();
    let mut data = Vec::with_capacity(samples.len() * samples[0].image.len());
    let mut labels = Vec::with_capacity(samples.len() * samples[0].label.len());
    for s in samples {
        if s.dims() != dims {
            return Err(Error::Invalid(format!(
                "mixed sample sizes {:?} and {:?}; crop all samples to one size",
                dims,
                s.dims()
            )));
        }
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.label);
    }
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(&dims);
    Ok((Tensor::new(shape, data)?, labels))
}

/// One forward/backward/update; returns the batch loss.
pub(crate) fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    x: Tensor,
    labels: &[u8],
    class_weights: &[Float],
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let xv = tape.constant(x);
    let logits = model.forward(&mut tape, &p, xv)?;
    let loss = segmentation_loss(&mut tape, logits, labels, class_weights)?;
    let value = tape.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    tape.backward(loss)?;
    let grads: Vec<Option<&[Float]>> = p.iter().map(|v| tape.grad_data(*v)).collect();
    if grads.iter().flatten().any(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite { op: "gradient" });
    }
    adam.step(&mut model.params, &grads);
    Ok(value)
}

/// Trains in place. Every random draw (shuffling, augmentation) comes from
/// one stream seeded by `cfg.seed`. `on_epoch` runs after each epoch.
pub fn train(
    model: &mut Model,
    samples: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Model) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if samples.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config {
            field: "batch_size",
            detail: "must be >= 1".into(),
        });
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::Config {
            field: "lr",
            detail: format!("must be finite and >= 0, got {}", cfg.lr),
        });
    }
    batch(samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr, &model.params);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let picked: Vec<Sample> = if cfg.augment {
                chunk
                    .iter()
                    .map(|&i| augment_sample(&samples[i], &mut rng))
                    .collect::<Result<_>>()?
            } else {
                chunk.iter().map(|&i| samples[i].clone()).collect()
            };
            let (x, labels) = batch(&picked)?;
            let loss = train_step(model, &mut adam, x, &labels, &cfg.class_weights).map_err(
                |e| match e {
                    Error::NonFinite { .. } => Error::Diverged { epoch, batch: b + 1 },
                    other => other,
                },
            )?;
            total += loss;
            batches += 1;
        }
        let log = EpochLog {
            epoch,
            step: adam.steps(),
            loss: total / batches as f64,
            lr: cfg.lr,
        };
        log::info!("epoch {epoch}: loss {:.5}", log.loss);
        on_epoch(&log, model)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Mean over foreground classes `1..num_classes` of the hard Dice between
/// `pred` and `target`. A class absent from both counts as 1.
pub fn hard_dice(pred: &[u8], target: &[u8], num_classes: usize) -> f64 {
    let mut total = 0.0;
    for k in 1..num_classes as u8 {
        let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
        for (a, b) in pred.iter().zip(target) {
            let (pa, gb) = (*a == k, *b == k);
            inter += (pa && gb) as usize;
            p += pa as usize;
            g += gb as usize;
        }
        total += if p + g == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (p + g) as f64
        };
    }
    total / (num_classes - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hard_dice_perfect_and_disjoint() {
        let t = [0u8, 1, 2, 3, 1];
        assert_eq!(hard_dice(&t, &t, 4), 1.0);
        let p = [0u8, 2, 3, 1, 2];
        assert_eq!(hard_dice(&p, &t, 4), 0.0);
    }

    #[test]
    fn csv_row_has_four_fields() {
        let r = EpochLog {
            epoch: 1,
            step: 3,
            loss: 0.5,
            lr: 1e-3,
        }
        .csv_row();
        assert_eq!(r.split(',').count(), 4);
    }
}
