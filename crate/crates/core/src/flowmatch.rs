//! Velocity-matching objective and the supervised training loop.
//!
//! Targets interpolate linearly between data and noise; the model learns
//! the constant velocity that transports one to the other, with timesteps
//! drawn from a logit-normal. The training loop resizes references under
//! the progressive pixel-budget curriculum, packs them behind the noisy
//! target, and minimizes the mean squared velocity error over the target
//! slice. Single-worker runs with a fixed seed replay bit-identically.

use crate::backbone::{self, BackboneError, Instruction, ModelParams};
use crate::optim::{cosine_lr, AdamW};
use crate::packing::{allocate_budget, assemble, patchify, BudgetSchedule, PackingError, TokenGrid};
use crate::rasters::{encode, resize_bilinear, Latent, RasterError, RasterImage};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("latent shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("config: {0}")]
    BadConfig(&'static str),
    #[error("training aborted at step {step}: non-finite loss; last good checkpoint: {last_good:?}")]
    Aborted {
        step: u64,
        last_good: Option<PathBuf>,
    },
    #[error(transparent)]
    Packing(#[from] PackingError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] backbone::checkpoint::CheckpointError),
}

/// One supervised example: K references, an instruction, and the edited or
/// composed ground-truth target.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub references: Vec<RasterImage>,
    pub instruction: Instruction,
    pub target: RasterImage,
}

/// Supervised-stage configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub budget: BudgetSchedule,
    /// Logit-normal timestep location.
    pub logit_loc: f64,
    /// Logit-normal timestep scale.
    pub logit_scale: f64,
    pub patch_pixels: usize,
    /// Checkpoint interval in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl SftConfig {
    pub fn desk_default() -> Self {
        Self {
            steps: 2_000,
            batch_size: 16,
            peak_lr: 3e-4,
            warmup_steps: 100,
            seed: 0,
            budget: BudgetSchedule::desk_default(),
            logit_loc: 0.0,
            logit_scale: 1.0,
            patch_pixels: 4,
            checkpoint_every: 0,
            grad_clip: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if self.steps == 0 || self.batch_size == 0 || self.patch_pixels == 0 {
            return Err(FlowError::BadConfig("steps, batch_size, patch_pixels must be positive"));
        }
        if self.peak_lr <= 0.0 {
            return Err(FlowError::BadConfig("peak_lr must be positive"));
        }
        if self.logit_scale < 0.0 {
            return Err(FlowError::BadConfig("logit_scale must be non-negative"));
        }
        Ok(())
    }
}

/// Logit-normal draw: `sigmoid(location + scale * n)`, strictly in (0, 1).
pub fn sample_timestep(rng: &mut impl Rng, location: f64, scale: f64) -> f64 {
    let n: f64 = rng.sample(StandardNormal);
    let z = location + scale * n;
    1.0 / (1.0 + (-z).exp())
}

/// `x_t = t*x0 + (1-t)*x1`, elementwise.
pub fn interpolate(x0: &Latent, x1: &Latent, t: f64) -> Result<Latent, FlowError> {
    if x0.values.dim() != x1.values.dim() {
        return Err(FlowError::ShapeMismatch(x0.values.dim(), x1.values.dim()));
    }
    Ok(Latent {
        values: &x0.values * t + &x1.values * (1.0 - t),
    })
}

/// The constant transport velocity `x0 - x1`; independent of t.
pub fn velocity_target(x0: &Latent, x1: &Latent) -> Result<Latent, FlowError> {
    if x0.values.dim() != x1.values.dim() {
        return Err(FlowError::ShapeMismatch(x0.values.dim(), x1.values.dim()));
    }
    Ok(Latent {
        values: &x0.values - &x1.values,
    })
}

/// Mean squared error between predicted velocity tokens and the target
/// velocity `x0 - x1` (token layout, row-major cells).
pub fn sft_loss(predicted: &Array2<f64>, x0: &Latent, x1: &Latent) -> Result<f64, FlowError> {
    if predicted.iter().any(|v| !v.is_finite()) {
        return Err(FlowError::NonFinite("predicted velocity"));
    }
    let v = velocity_target(x0, x1)?;
    let (tokens, _) = patchify(&v);
    if tokens.dim() != predicted.dim() {
        return Err(FlowError::ShapeMismatch(
            (predicted.nrows(), predicted.ncols(), 1),
            (tokens.nrows(), tokens.ncols(), 1),
        ));
    }
    Ok((&tokens - predicted).mapv(|d| d * d).mean().unwrap_or(0.0))
}

/// Standard-normal noise latent shaped like the target grid.
pub fn noise_latent(rng: &mut impl Rng, rows: usize, cols: usize, channels: usize) -> Latent {
    let mut latent = Latent::zeros(rows, cols, channels);
    for v in latent.values.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    latent
}

/// Resize references under an optional pixel budget and encode them into
/// token grids. Without a budget, images must already align to the patch.
pub fn encode_references(
    references: &[RasterImage],
    budget: Option<u64>,
    patch_pixels: usize,
) -> Result<Vec<TokenGrid>, FlowError> {
    let resized: Vec<RasterImage> = match budget {
        Some(budget) => {
            let sizes: Vec<(usize, usize)> = references
                .iter()
                .map(|r| (r.height(), r.width()))
                .collect();
            let dims = allocate_budget(&sizes, budget, patch_pixels)?;
            references
                .iter()
                .zip(dims)
                .map(|(r, (h, w))| resize_bilinear(r, h, w))
                .collect()
        }
        None => references.to_vec(),
    };
    resized
        .iter()
        .map(|r| Ok(patchify(&encode(r, patch_pixels)?)))
        .collect()
}

/// Per-step training record (`wall_ms` is excluded from reproducibility
/// comparisons).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftMetric {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub budget: u64,
    pub wall_ms: u64,
}

/// Everything a finished (or aborted) run leaves behind.
pub struct SftOutcome {
    pub params: ModelParams,
    pub metrics: Vec<SftMetric>,
    pub checkpoints: Vec<PathBuf>,
}

/// Scale all gradients down so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut crate::autodiff::GradMap, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let total: f64 = grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = total.sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for grad in grads.values_mut() {
            *grad *= factor;
        }
    }
}

fn write_metric_line<T: Serialize>(
    writer: &mut Option<std::io::BufWriter<std::fs::File>>,
    metric: &T,
) -> Result<(), FlowError> {
    if let Some(w) = writer {
        serde_json::to_writer(&mut *w, metric).map_err(std::io::Error::other)?;
        writeln!(w)?;
        w.flush()?;
    }
    Ok(())
}

/// Supervised training: per step, sample a batch, fetch the stage budget,
/// resize and encode references, draw per-sample timesteps and noise, pack
/// the noisy target first, and descend the velocity MSE over the target
/// slice with a warmup+cosine learning rate.
pub fn train_sft(
    config: &SftConfig,
    dataset: &[TrainingSample],
    params: ModelParams,
    out_dir: Option<&Path>,
) -> Result<SftOutcome, FlowError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(FlowError::EmptyDataset);
    }
    let mut params = params;
    let mut optimizer = AdamW::sft_default();
    let mut metrics = Vec::with_capacity(config.steps as usize);
    let mut checkpoints = Vec::new();
    let mut metrics_writer = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(
                dir.join("sft_metrics.jsonl"),
            )?))
        }
        None => None,
    };

    for step in 0..config.steps {
        let started = std::time::Instant::now();
        let budget = config.budget.budget_at(step);
        let lr = cosine_lr(step, config.steps, config.peak_lr, config.warmup_steps);

        let mut batch_rng = crate::seeding::derive_rng(config.seed, "sft.batch", step, 0);
        let batch: Vec<usize> = (0..config.batch_size)
            .map(|_| batch_rng.random_range(0..dataset.len()))
            .collect();

        let per_sample: Vec<Result<(f64, crate::autodiff::GradMap), FlowError>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &index)| {
                let sample = &dataset[index];
                let mut rng =
                    crate::seeding::derive_rng(config.seed, "sft.sample", step, slot as u64);
                let t = sample_timestep(&mut rng, config.logit_loc, config.logit_scale);
                let x0 = encode(&sample.target, config.patch_pixels)?;
                let x1 = noise_latent(&mut rng, x0.rows(), x0.cols(), x0.channels());
                let x_t = interpolate(&x0, &x1, t)?;
                let v_tokens = patchify(&velocity_target(&x0, &x1)?).0;
                let refs =
                    encode_references(&sample.references, Some(budget), config.patch_pixels)?;
                let packed = assemble(&patchify(&x_t), &refs)?;
                let (loss, grads) = backbone::grad(&params, |tape, binder| {
                    let out = backbone::build_forward(tape, binder, &packed, t, &sample.instruction)?;
                    let target = tape.constant(v_tokens.clone());
                    Ok(tape.mse(out, target))
                })?;
                Ok((loss, grads))
            })
            .collect();

        let mut step_loss = 0.0;
        let mut summed: Option<crate::autodiff::GradMap> = None;
        let mut failure: Option<FlowError> = None;
        for result in per_sample {
            match result {
                Ok((loss, grads)) => {
                    step_loss += loss;
                    match &mut summed {
                        None => summed = Some(grads),
                        Some(acc) => {
                            for (name, grad) in grads {
                                *acc.get_mut(&name).expect("same parameter set") += &grad;
                            }
                        }
                    }
                }
                Err(err) => {
                    failure = Some(err);
                    break;
                }
            }
        }

        let abort = |err: FlowError, step: u64, params: &ModelParams| -> FlowError {
            if !matches!(err, FlowError::Backbone(BackboneError::NonFiniteLoss { .. })) {
                return err;
            }
            let last_good = out_dir.map(|dir| {
                let path = dir.join("abort_last_good.ckpt");
                let _ = backbone::checkpoint::save(params, step, &path);
                path
            });
            FlowError::Aborted { step, last_good }
        };
        if let Some(err) = failure {
            return Err(abort(err, step, &params));
        }

        step_loss /= config.batch_size as f64;
        if !step_loss.is_finite() {
            return Err(abort(
                FlowError::Backbone(BackboneError::NonFiniteLoss { first_bad: None }),
                step,
                &params,
            ));
        }
        let mut grads = summed.expect("non-empty batch");
        for grad in grads.values_mut() {
            *grad /= config.batch_size as f64;
        }
        clip_global_norm(&mut grads, config.grad_clip);
        optimizer.step_model(&mut params, &grads, lr);

        let metric = SftMetric {
            step,
            loss: step_loss,
            lr,
            budget,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        write_metric_line(&mut metrics_writer, &metric)?;
        metrics.push(metric);

        if let Some(dir) = out_dir {
            let last = step + 1 == config.steps;
            let interval_hit =
                config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0;
            if interval_hit || last {
                let path = if last {
                    dir.join("final.ckpt")
                } else {
                    dir.join(format!("ckpt_step{:06}.ckpt", step + 1))
                };
                backbone::checkpoint::save(&params, step + 1, &path)?;
                checkpoints.push(path);
            }
        }
    }

    Ok(SftOutcome {
        params,
        metrics,
        checkpoints,
    })
}
