use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, CosineSchedule, Tape, Tensor};
use crate::data::MotionSequence;
use crate::error::{Error, Result};
use crate::rvq::model::{TokenizerConfig, TokenizerModel};
use crate::scalar::Scalar;

/// Optimisation settings of tokenizer training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerTraining {
    pub steps: usize,
    pub batch_size: usize,
    /// Frames per training window.
    pub crop: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TokenizerTraining {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            crop: 64,
            lr: 2e-3,
            min_lr: 1e-4,
            warmup: 50,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// One logged optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerRecord {
    pub step: usize,
    pub loss: f64,
    pub reconstruction: f64,
    pub commitment: f64,
    pub lr: f64,
    pub dead_codes_reset: usize,
}

/// Exponential-moving-average codebook statistics.
struct EmaState<S> {
    counts: Vec<Vec<f64>>,
    sums: Vec<Vec<S>>,
}

fn sample_batch(data: &[MotionSequence], cfg: &TokenizerTraining, rng: &mut ChaCha8Rng) -> Result<Vec<MotionSequence>> {
    (0..cfg.batch_size)
        .map(|_| {
            let seq = &data[rng.random_range(0..data.len())];
            if seq.len() <= cfg.crop {
                Ok(seq.clone())
            } else {
                seq.random_crop(cfg.crop, rng)
            }
        })
        .collect()
}

/// Residual rows `r^l` of every latent in `latents`, per level.
fn residual_rows<S: Scalar>(model: &TokenizerModel<S>, latents: &[Tensor<S>]) -> Result<Vec<Vec<(usize, Vec<S>)>>> {
    let mut rows = vec![Vec::new(); model.rvq.levels()];
    for z in latents {
        for t in 0..z.rows() {
            let q = model.rvq.quantize_vector(z.row(t))?;
            for (l, level_rows) in rows.iter_mut().enumerate() {
                level_rows.push((q.codes[l], q.residuals[l].clone()));
            }
        }
    }
    Ok(rows)
}

/// Seeds each level from residual rows of the first batch, level by level.
fn init_codebooks<S: Scalar>(model: &mut TokenizerModel<S>, latents: &[Tensor<S>], rng: &mut ChaCha8Rng) -> Result<()> {
    for l in 0..model.rvq.levels() {
        let rows = residual_rows(model, latents)?;
        let level = &rows[l];
        let cb = &mut model.rvq.codebooks_mut()[l];
        let d = cb.dim();
        for k in 0..cb.size() {
            let (_, r) = &level[rng.random_range(0..level.len())];
            cb.embeddings.data_mut()[k * d..(k + 1) * d].copy_from_slice(r);
        }
    }
    Ok(())
}

impl<S: Scalar> EmaState<S> {
    fn new(model: &TokenizerModel<S>) -> Self {
        let cbs = model.rvq.codebooks();
        Self {
            counts: cbs.iter().map(|c| vec![1.0; c.size()]).collect(),
            sums: cbs.iter().map(|c| c.embeddings.data().to_vec()).collect(),
        }
    }

    /// Moves each code toward the mean of the residuals assigned to it and
    /// re-seeds codes whose usage average drops below the threshold.
    fn update(
        &mut self,
        model: &mut TokenizerModel<S>,
        latents: &[Tensor<S>],
        cfg: &TokenizerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<usize> {
        let rows = residual_rows(model, latents)?;
        let (decay, keep) = (cfg.ema_decay, 1.0 - cfg.ema_decay);
        let mut resets = 0;
        for (l, level) in rows.iter().enumerate() {
            let cb = &mut model.rvq.codebooks_mut()[l];
            let (k, d) = (cb.size(), cb.dim());
            let mut n = vec![0.0; k];
            let mut s = vec![S::zero(); k * d];
            for (code, r) in level {
                n[*code] += 1.0;
                for (acc, &x) in s[code * d..(code + 1) * d].iter_mut().zip(r) {
                    *acc += x;
                }
            }
            let counts = &mut self.counts[l];
            let sums = &mut self.sums[l];
            for code in 0..k {
                counts[code] = decay * counts[code] + keep * n[code];
                for j in 0..d {
                    let i = code * d + j;
                    sums[i] = S::lit(decay) * sums[i] + S::lit(keep) * s[i];
                }
                if counts[code] < cfg.dead_code_threshold {
                    let (_, r) = &level[rng.random_range(0..level.len())];
                    sums[code * d..(code + 1) * d].copy_from_slice(r);
                    counts[code] = 1.0;
                    resets += 1;
                }
                let c = S::lit(counts[code]);
                for j in 0..d {
                    cb.embeddings.data_mut()[code * d + j] = sums[code * d + j] / c;
                }
            }
            cb.usage.clone_from(counts);
        }
        Ok(resets)
    }
}

/// Trains encoder and decoder by gradient descent on the tokenizer objective
/// with EMA codebooks; returns the frozen model and per-step records.
pub fn train_tokenizer<S: Scalar>(
    data: &[MotionSequence],
    config: &TokenizerConfig,
    training: &TokenizerTraining,
) -> Result<(TokenizerModel<S>, Vec<TokenizerRecord>)> {
    if data.is_empty() {
        return Err(Error::Config("tokenizer training needs at least one sequence".into()));
    }
    if training.batch_size == 0 || training.crop == 0 {
        return Err(Error::Config("batch size and crop must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(training.seed);
    let mut model = TokenizerModel::<S>::new(config.clone(), &mut rng)?;
    let first = sample_batch(data, training, &mut rng)?;
    let latents = first.iter().map(|s| model.encode(s)).collect::<Result<Vec<_>>>()?;
    init_codebooks(&mut model, &latents, &mut rng)?;
    let mut ema = EmaState::new(&model);
    let mut opt = AdamW::new(training.weight_decay);
    let schedule = CosineSchedule {
        base_lr: training.lr,
        min_lr: training.min_lr,
        warmup: training.warmup,
        total: training.steps,
    };
    let mut log = Vec::with_capacity(training.steps);
    for step in 0..training.steps {
        let batch = sample_batch(data, training, &mut rng)?;
        let diverged = |e: Error| match e {
            Error::NonFinite { op } => Error::Training {
                step,
                detail: format!("non-finite value in {op}"),
            },
            other => other,
        };
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, true)?;
        let cbs = model.bind_codebooks(&mut tape, false)?;
        let mut totals = Vec::with_capacity(batch.len());
        let (mut recon, mut commit) = (0.0, 0.0);
        let mut latents = Vec::with_capacity(batch.len());
        for seq in &batch {
            let terms = model.loss_on_tape(&mut tape, &bound, &cbs, seq).map_err(diverged)?;
            recon += tape.value(terms.reconstruction).data()[0].as_f64();
            commit += tape.value(terms.commitment).data()[0].as_f64();
            totals.push(terms.total);
            latents.push(terms.latents);
        }
        let mut loss = totals[0];
        for &t in &totals[1..] {
            loss = tape.add(loss, t).map_err(diverged)?;
        }
        let loss = tape.scale(loss, S::lit(1.0 / batch.len() as f64)).map_err(diverged)?;
        let value = tape.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                detail: "non-finite loss".into(),
            });
        }
        let grads = tape.backward(loss).map_err(diverged)?;
        let lr = schedule.lr(step);
        opt.step(model.params_mut(), &bound, &grads, lr);
        if model.params().entries().iter().any(|e| !e.tensor.all_finite()) {
            return Err(Error::Training {
                step,
                detail: "parameters became non-finite".into(),
            });
        }
        let resets = ema.update(&mut model, &latents, config, &mut rng)?;
        let n = batch.len() as f64;
        let rec = TokenizerRecord {
            step,
            loss: value,
            reconstruction: recon / n,
            commitment: commit / n,
            lr,
            dead_codes_reset: resets,
        };
        if step % 100 == 0 {
            debug!("tokenizer step {step}: loss {:.5} recon {:.5}", rec.loss, rec.reconstruction);
        }
        log.push(rec);
    }
    model.freeze();
    info!(
        "tokenizer trained: {} steps, L={}, K={}",
        training.steps, config.levels, config.codebook_size
    );
    Ok((model, log))
}

/// Mean squared error of the quantized round trip over `data`.
pub fn reconstruction_mse<S: Scalar>(model: &TokenizerModel<S>, data: &[MotionSequence]) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for seq in data {
        let rec = model.reconstruct(seq)?;
        for (a, b) in rec.values().iter().zip(seq.values()) {
            sum += (a - b).powi(2);
        }
        count += seq.values().len();
    }
    if count == 0 {
        return Err(Error::Range("no frames to evaluate".into()));
    }
    Ok(sum / count as f64)
}
