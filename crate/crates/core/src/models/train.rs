//! Training loop: accumulated k-step rollout MSE minimised with adaptive
//! per-parameter moment estimates. Deterministic for a fixed seed; batch
//! evaluation is single-threaded so loss curves are bit-reproducible.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Model;
use crate::tensor::{Result, Tape, Tensor, TensorError};

/// One training window: l stacked input frames and at least k target
/// frames.
#[derive(Debug, Clone)]
pub struct Sample {
    /// [l*C, H, W]
    pub window: Tensor,
    /// each [C, H, W], time-ordered
    pub targets: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    /// Rollout steps whose errors accumulate into the loss.
    pub k_accum: usize,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, k_accum: 3, epochs: 10, batch: 8, seed: 0 }
    }
}

/// Adaptive first/second-moment optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Tensor> =
            model.param_tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }

    fn update(&mut self, model: &mut Model, grads: &[Tensor], lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - Self::BETA1.powf(t);
        let bc2 = 1.0 - Self::BETA2.powf(t);
        for ((param, g), (m, v)) in model
            .param_tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = Self::BETA1 * m.data()[i] + (1.0 - Self::BETA1) * gi;
                let vi = Self::BETA2 * v.data()[i] + (1.0 - Self::BETA2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                param.data_mut()[i] -= lr * mhat / (vhat.sqrt() + Self::EPS);
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Owns a model plus optimizer state; training can resume bit-identically
/// from a saved (model, optimizer, epoch) triple because the shuffle stream
/// is keyed by the absolute epoch index.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub opt: Adam,
    pub epochs_done: usize,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let opt = Adam::new(&model);
        Self { model, opt, epochs_done: 0 }
    }

    /// Accumulated k-step autoregressive MSE for one batch, built on a
    /// fresh tape. Returns (loss node, tape, param node ids).
    fn batch_loss(
        &self,
        batch: &[&Sample],
        k: usize,
        trainable: bool,
    ) -> Result<(Tape, Vec<super::LayerParams>, crate::tensor::NodeId)> {
        let mut tape = Tape::new();
        let params = self.model.insert_params(&mut tape, trainable);
        let (c, lc) = (self.model.spec.channels, self.model.spec.window_channels());

        let stack = |tensors: Vec<&Tensor>| -> Result<Tensor> {
            let sh = tensors[0].shape().to_vec();
            let mut shape = vec![tensors.len()];
            shape.extend_from_slice(&sh);
            let mut data = Vec::with_capacity(tensors.len() * tensors[0].numel());
            for t in tensors {
                data.extend_from_slice(t.data());
            }
            Tensor::new(shape, data)
        };

        let mut win = tape.constant(stack(batch.iter().map(|s| &s.window).collect())?);
        let mut loss: Option<crate::tensor::NodeId> = None;
        for step in 0..k {
            let pred = self.model.forward_on_tape(&mut tape, win, &params)?;
            let target = tape.constant(stack(batch.iter().map(|s| &s.targets[step]).collect())?);
            let diff = tape.sub(pred, target)?;
            let sq = tape.square(diff)?;
            let ms = tape.mean_all(sq)?;
            loss = Some(match loss {
                None => ms,
                Some(prev) => tape.add(prev, ms)?,
            });
            if step + 1 < k {
                let rest = tape.slice_channels(win, c, lc - c)?;
                win = tape.concat_channels(&[rest, pred])?;
            }
        }
        let total = tape.scale_by(loss.expect("k >= 1"), 1.0 / k as f64)?;
        Ok((tape, params, total))
    }

    fn mean_loss(&self, samples: &[Sample], k: usize, batch: usize) -> Result<f64> {
        if samples.is_empty() {
            return Ok(f64::NAN);
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in samples.chunks(batch.max(1)) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let (tape, _, loss) = self.batch_loss(&refs, k, false)?;
            total += tape.value(loss).item() * refs.len() as f64;
            count += refs.len();
        }
        Ok(total / count as f64)
    }

    /// Runs `cfg.epochs` epochs, returning per-epoch train/val losses.
    /// Aborts with an error if the loss stops being finite.
    pub fn train(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        cfg: &TrainConfig,
    ) -> Result<Vec<EpochStats>> {
        if train.is_empty() {
            return Err(TensorError::Invalid("empty training set".into()));
        }
        let k = cfg.k_accum.max(1);
        for s in train.iter().chain(val) {
            if s.targets.len() < k {
                return Err(TensorError::Invalid(format!(
                    "sample has {} targets, k_accum needs {}",
                    s.targets.len(),
                    k
                )));
            }
        }
        let mut stats = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            let epoch = self.epochs_done;
            // shuffle keyed by absolute epoch so resumes replay the stream
            let mut order: Vec<usize> = (0..train.len()).collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            order.shuffle(&mut rng);

            let mut epoch_loss = 0.0;
            for chunk in order.chunks(cfg.batch.max(1)) {
                let refs: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
                let (mut tape, params, loss) = self.batch_loss(&refs, k, true)?;
                let loss_val = tape.value(loss).item();
                if !loss_val.is_finite() {
                    return Err(TensorError::NonFinite("training loss"));
                }
                epoch_loss += loss_val * refs.len() as f64;
                tape.backward(loss)?;
                let mut grads: Vec<Tensor> = Vec::with_capacity(self.opt.m.len());
                for (lp, layer) in params.iter().zip(&self.model.layers) {
                    grads.push(
                        tape.grad(lp.kernel)
                            .cloned()
                            .unwrap_or_else(|| Tensor::zeros(layer.kernel.shape())),
                    );
                    if let (Some(bid), Some(b)) = (lp.bias, &layer.bias) {
                        grads.push(
                            tape.grad(bid).cloned().unwrap_or_else(|| Tensor::zeros(b.shape())),
                        );
                    }
                }
                self.opt.update(&mut self.model, &grads, cfg.lr);
            }
            self.epochs_done += 1;
            let train_loss = epoch_loss / train.len() as f64;
            let val_loss = self.mean_loss(val, k, cfg.batch)?;
            stats.push(EpochStats { epoch, train_loss, val_loss });
        }
        Ok(stats)
    }

    /// Mean k-step loss without updating parameters.
    pub fn evaluate(&self, samples: &[Sample], k: usize, batch: usize) -> Result<f64> {
        self.mean_loss(samples, k, batch)
    }
}
