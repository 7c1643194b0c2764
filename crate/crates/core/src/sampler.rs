//! Generation-time integrators.
//!
//! Deterministic Euler integrates the learned velocity field; stochastic
//! Euler–Maruyama adds the score-correction drift and sigma-scaled noise,
//! recording per-step Gaussian transition log-densities for the RL stage.
//! Time runs forward from t=0 (noise) to t=1 (data) on a uniform grid with
//! the velocity evaluated at each step's left endpoint.
//!
//! The noise schedule is `sigma_t = a*sqrt(t(1-t))`: it keeps the drift
//! correction `sigma_t^2/(2t)` bounded, makes both endpoints
//! deterministic, and is a stated default rather than anything the
//! training objective implies.

use crate::backbone::{self, BackboneError, Instruction, ModelParams};
use crate::flowmatch::{encode_references, FlowError};
use crate::packing::{assemble, patchify, unpatchify, PackedSequence, PackingError, TokenGrid};
use crate::rasters::{decode, Latent, RasterError, RasterImage};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Clamp floor for the `1/t` factors, shared by sampling, log-densities,
/// and the closed-form KL so the policy and its density never disagree.
pub const EPS_T: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("transition density undefined for sigma = 0 (deterministic step)")]
    ZeroSigma,
    #[error("sampler needs at least one step")]
    NoSteps,
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Packing(#[from] PackingError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Deterministic,
    Stochastic,
}

/// Noise amplitude at time t: `a * sqrt(t(1-t))`; zero at both endpoints.
pub fn sigma_at(t: f64, a: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&t));
    a * (t * (1.0 - t)).max(0.0).sqrt()
}

/// SDE drift: `v + sigma^2/(2 max(t, eps)) * (x + (1-t) v)`, elementwise.
pub fn drift(x: &Latent, v: &Latent, t: f64, sigma: f64) -> Result<Latent, SamplerError> {
    if x.values.dim() != v.values.dim() {
        return Err(SamplerError::NonFinite("drift shape mismatch"));
    }
    let correction = sigma * sigma / (2.0 * t.max(EPS_T));
    let values = &v.values + &((&x.values + &(&v.values * (1.0 - t))) * correction);
    if values.iter().any(|val| !val.is_finite()) {
        return Err(SamplerError::NonFinite("drift"));
    }
    Ok(Latent { values })
}

/// One Euler–Maruyama update: `x + drift*dt + sigma*sqrt(dt)*noise`.
pub fn sde_step(
    x: &Latent,
    v: &Latent,
    t: f64,
    dt: f64,
    sigma: f64,
    noise: &Latent,
) -> Result<Latent, SamplerError> {
    assert!(dt > 0.0, "dt must be positive");
    let d = drift(x, v, t, sigma)?;
    let values = &x.values + &(&d.values * dt) + &(&noise.values * (sigma * dt.sqrt()));
    if values.iter().any(|val| !val.is_finite()) {
        return Err(SamplerError::NonFinite("sde_step"));
    }
    Ok(Latent { values })
}

/// Log-density of `x_next` under the Gaussian transition kernel of
/// [`sde_step`]: mean `x + drift*dt`, per-coordinate std `sigma*sqrt(dt)`.
pub fn transition_logpdf(
    x_next: &Latent,
    x: &Latent,
    v: &Latent,
    t: f64,
    dt: f64,
    sigma: f64,
) -> Result<f64, SamplerError> {
    let std = sigma * dt.sqrt();
    if std <= 0.0 {
        return Err(SamplerError::ZeroSigma);
    }
    let mean = &x.values + &(drift(x, v, t, sigma)?.values * dt);
    let var = std * std;
    let log_norm = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
    let mut total = 0.0;
    for (next, mu) in x_next.values.iter().zip(mean.iter()) {
        let d = next - mu;
        total += log_norm - d * d / (2.0 * var);
    }
    if !total.is_finite() {
        return Err(SamplerError::NonFinite("transition_logpdf"));
    }
    Ok(total)
}

/// Log-density recorded for one stochastic step of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLogPdf {
    pub step: usize,
    pub logpdf: f64,
}

/// One integration run: states bracket each step, velocities and noises
/// align with the step grid, and log-densities exist exactly for the steps
/// with sigma > 0.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Latent>,
    pub velocities: Vec<Latent>,
    pub noises: Vec<Latent>,
    pub step_logpdfs: Vec<StepLogPdf>,
    pub mode: SampleMode,
}

/// Everything `sample` needs besides the prompt itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleConfig {
    /// Number of integration steps T.
    pub steps: usize,
    pub mode: SampleMode,
    /// Noise level `a`; ignored in deterministic mode.
    pub noise_level: f64,
    pub target_height: usize,
    pub target_width: usize,
    pub patch_pixels: usize,
    /// When set, references are rescaled under this pixel budget exactly as
    /// in training.
    pub reference_budget: Option<u64>,
}

impl SampleConfig {
    pub fn desk_default() -> Self {
        Self {
            steps: 25,
            mode: SampleMode::Deterministic,
            noise_level: 1.5,
            target_height: 32,
            target_width: 32,
            patch_pixels: 4,
            reference_budget: Some(1024),
        }
    }
}

/// A generation request: reference images plus the instruction.
pub struct SamplePrompt<'a> {
    pub references: &'a [RasterImage],
    pub instruction: &'a Instruction,
}

fn standard_normal_latent(
    rng: &mut impl Rng,
    rows: usize,
    cols: usize,
    channels: usize,
) -> Latent {
    let mut latent = Latent::zeros(rows, cols, channels);
    for v in latent.values.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    latent
}

fn velocity_from_forward(
    params: &ModelParams,
    packed: &PackedSequence,
    t: f64,
    instruction: &Instruction,
    rows: usize,
    cols: usize,
) -> Result<Latent, SamplerError> {
    let tokens = backbone::forward(params, packed, t, instruction)?;
    let positions: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .collect();
    Ok(unpatchify(&tokens, &positions, rows, cols)?)
}

/// Integrate one trajectory from noise to image. The initial state is a
/// standard-normal draw from `rng`; stochastic mode draws step noise only
/// where `sigma_t > 0`, so `noise_level = 0` collapses bit-exactly onto the
/// deterministic path.
pub fn sample(
    params: &ModelParams,
    prompt: &SamplePrompt,
    config: &SampleConfig,
    rng: &mut impl Rng,
) -> Result<(RasterImage, Trajectory), SamplerError> {
    if config.steps == 0 {
        return Err(SamplerError::NoSteps);
    }
    let patch = config.patch_pixels;
    let rows = config.target_height / patch;
    let cols = config.target_width / patch;
    let channels = 3 * patch * patch;
    let ref_grids: Vec<TokenGrid> =
        encode_references(prompt.references, config.reference_budget, patch)?;

    let t_count = config.steps;
    let dt = 1.0 / t_count as f64;
    let mut x = standard_normal_latent(rng, rows, cols, channels);
    let mut trajectory = Trajectory {
        times: Vec::with_capacity(t_count),
        states: Vec::with_capacity(t_count + 1),
        velocities: Vec::with_capacity(t_count),
        noises: Vec::with_capacity(t_count),
        step_logpdfs: Vec::new(),
        mode: config.mode,
    };
    trajectory.states.push(x.clone());

    for step in 0..t_count {
        let t = step as f64 / t_count as f64;
        let packed = assemble(&patchify(&x), &ref_grids)?;
        let v = velocity_from_forward(params, &packed, t, prompt.instruction, rows, cols)?;
        let sigma = match config.mode {
            SampleMode::Deterministic => 0.0,
            SampleMode::Stochastic => sigma_at(t, config.noise_level),
        };
        let next = if sigma > 0.0 {
            let noise = standard_normal_latent(rng, rows, cols, channels);
            let next = sde_step(&x, &v, t, dt, sigma, &noise)?;
            let logpdf = transition_logpdf(&next, &x, &v, t, dt, sigma)?;
            trajectory.step_logpdfs.push(StepLogPdf { step, logpdf });
            trajectory.noises.push(noise);
            next
        } else {
            trajectory.noises.push(Latent::zeros(rows, cols, channels));
            Latent {
                values: &x.values + &(&v.values * dt),
            }
        };
        trajectory.times.push(t);
        trajectory.velocities.push(v);
        trajectory.states.push(next.clone());
        x = next;
    }

    let image = decode(&x, patch)?;
    Ok((image, trajectory))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_params, instruction, BackboneConfig};
    use crate::seeding::derive_rng;
    use crate::taskgen::gen_composition_sample;

    fn scalar_latent(v: f64) -> Latent {
        let mut latent = Latent::zeros(1, 1, 1);
        latent.values[(0, 0, 0)] = v;
        latent
    }

    #[test]
    fn sigma_schedule_endpoints_and_midpoint() {
        assert_eq!(sigma_at(0.0, 1.5), 0.0);
        assert_eq!(sigma_at(1.0, 1.5), 0.0);
        assert!((sigma_at(0.5, 1.5) - 0.75).abs() < 1e-15);
        for i in 0..=10 {
            assert_eq!(sigma_at(i as f64 / 10.0, 0.0), 0.0);
        }
    }

    #[test]
    fn drift_degenerates_to_velocity_without_noise() {
        let x = scalar_latent(0.3);
        let v = scalar_latent(-1.2);
        let d = drift(&x, &v, 0.4, 0.0).unwrap();
        assert_eq!(d.values[(0, 0, 0)], -1.2);
    }

    /// Hand evaluation: x=0, v=1, t=0.5, sigma=1:
    /// v + (1/(2*0.5)) * (x + 0.5*v) = 1 + 1*0.5 = 1.5.
    #[test]
    fn drift_hand_value() {
        let d = drift(&scalar_latent(0.0), &scalar_latent(1.0), 0.5, 1.0).unwrap();
        assert!((d.values[(0, 0, 0)] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn drift_is_finite_at_t_zero_via_clamp() {
        let d = drift(&scalar_latent(1.0), &scalar_latent(1.0), 0.0, 0.5).unwrap();
        assert!(d.values[(0, 0, 0)].is_finite());
        // The clamp uses EPS_T: coefficient sigma^2/(2*EPS_T).
        let expected = 1.0 + 0.25 / (2.0 * EPS_T) * (1.0 + 1.0);
        assert!((d.values[(0, 0, 0)] - expected).abs() < 1e-9);
    }

    /// Worked Euler–Maruyama values at x=0, v=1, t=0.5, sigma=1, dt=0.04:
    /// deterministic part 0.06; with unit noise 0.06 + 0.2 = 0.26.
    #[test]
    fn sde_step_hand_values() {
        let x = scalar_latent(0.0);
        let v = scalar_latent(1.0);
        let no_noise = sde_step(&x, &v, 0.5, 0.04, 1.0, &scalar_latent(0.0)).unwrap();
        assert!((no_noise.values[(0, 0, 0)] - 0.06).abs() < 1e-12);
        let with_noise = sde_step(&x, &v, 0.5, 0.04, 1.0, &scalar_latent(1.0)).unwrap();
        assert!((with_noise.values[(0, 0, 0)] - 0.26).abs() < 1e-12);
    }

    #[test]
    fn sde_step_without_sigma_is_euler() {
        let x = scalar_latent(0.5);
        let v = scalar_latent(2.0);
        let next = sde_step(&x, &v, 0.3, 0.1, 0.0, &scalar_latent(123.0)).unwrap();
        assert!((next.values[(0, 0, 0)] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn logpdf_at_the_mean_matches_normal_mode() {
        // d=1 with sigma^2*dt = 1: logpdf at the mean is -0.5*ln(2*pi).
        let x = scalar_latent(0.0);
        let v = scalar_latent(0.0);
        let sigma = 2.0;
        let dt = 0.25;
        let mean = sde_step(&x, &v, 0.5, dt, sigma, &scalar_latent(0.0)).unwrap();
        let at_mode = transition_logpdf(&mean, &x, &v, 0.5, dt, sigma).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((at_mode - expected).abs() < 1e-12);

        // One standard deviation away: mode value minus 1/2.
        let mut off = mean.clone();
        off.values[(0, 0, 0)] += sigma * dt.sqrt();
        let shifted = transition_logpdf(&off, &x, &v, 0.5, dt, sigma).unwrap();
        assert!((shifted - (expected - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn logpdf_rejects_zero_sigma() {
        let x = scalar_latent(0.0);
        assert!(matches!(
            transition_logpdf(&x, &x, &x, 0.5, 0.1, 0.0),
            Err(SamplerError::ZeroSigma)
        ));
    }

    /// Quadrature oracle: the 1-D density integrates to 1.
    #[test]
    fn logpdf_integrates_to_one() {
        let x = scalar_latent(0.2);
        let v = scalar_latent(-0.7);
        let (t, dt, sigma) = (0.4_f64, 0.05_f64, 1.3_f64);
        let std = sigma * dt.sqrt();
        let mean = sde_step(&x, &v, t, dt, sigma, &scalar_latent(0.0)).unwrap();
        let center = mean.values[(0, 0, 0)];
        let mut integral = 0.0;
        let n = 4000;
        let span = 8.0 * std;
        let h = 2.0 * span / n as f64;
        for i in 0..=n {
            let value = center - span + i as f64 * h;
            let p = transition_logpdf(&scalar_latent(value), &x, &v, t, dt, sigma)
                .unwrap()
                .exp();
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            integral += w * p * h;
        }
        assert!((integral - 1.0).abs() < 1e-3, "integral {integral}");
    }

    /// Kernel consistency: a state produced with recorded noise n scores
    /// exactly the analytic normal log-density of n.
    #[test]
    fn recorded_noise_scores_its_own_density() {
        let mut rng = derive_rng(31, "sampler.kernel", 0, 0);
        for _ in 0..50 {
            let dims = (2, 2, 3);
            let mut mk = |_unused: ()| {
                let mut l = Latent::zeros(dims.0, dims.1, dims.2);
                for v in l.values.iter_mut() {
                    *v = rng.random::<f64>() * 2.0 - 1.0;
                }
                l
            };
            let x = mk(());
            let v = mk(());
            let noise = mk(());
            let t = 0.1 + 0.8 * rng.random::<f64>();
            let dt = 0.04;
            let sigma = 0.5 + rng.random::<f64>();
            let next = sde_step(&x, &v, t, dt, sigma, &noise).unwrap();
            let logpdf = transition_logpdf(&next, &x, &v, t, dt, sigma).unwrap();
            let d = noise.values.len() as f64;
            let var = sigma * sigma * dt;
            let expected = -0.5 * d * (2.0 * std::f64::consts::PI * var).ln()
                - noise.values.iter().map(|n| n * n).sum::<f64>() / 2.0;
            assert!((logpdf - expected).abs() < 1e-10, "{logpdf} vs {expected}");
        }
    }

    fn test_model() -> ModelParams {
        let cfg = BackboneConfig {
            layers: 2,
            width: 16,
            heads: 2,
            vocab: instruction::VOCAB_SIZE,
            token_channels: 48,
            max_refs: 4,
            rope_base: 100.0,
        };
        let mut params = init_params(&cfg, 123).unwrap();
        let mut rng = derive_rng(123, "sampler.model", 0, 0);
        for v in params.array_mut("head.w").iter_mut() {
            *v = (rng.random::<f64>() - 0.5) * 0.05;
        }
        params
    }

    #[test]
    fn zero_noise_level_collapses_onto_the_ode_path() {
        let params = test_model();
        let g = gen_composition_sample(&mut derive_rng(7, "sampler.prompt", 0, 0), (2, 2));
        let prompt = SamplePrompt {
            references: &g.sample.references,
            instruction: &g.sample.instruction,
        };
        let mut config = SampleConfig::desk_default();
        config.steps = 8;
        config.mode = SampleMode::Deterministic;
        let (det_img, det_traj) =
            sample(&params, &prompt, &config, &mut derive_rng(9, "s", 0, 0)).unwrap();
        config.mode = SampleMode::Stochastic;
        config.noise_level = 0.0;
        let (sde_img, sde_traj) =
            sample(&params, &prompt, &config, &mut derive_rng(9, "s", 0, 0)).unwrap();
        assert_eq!(det_img, sde_img);
        for (a, b) in det_traj.states.iter().zip(&sde_traj.states) {
            assert_eq!(a.values, b.values);
        }
        assert!(sde_traj.step_logpdfs.is_empty());
    }

    #[test]
    fn stochastic_bookkeeping_matches_sigma_support() {
        let params = test_model();
        let g = gen_composition_sample(&mut derive_rng(8, "sampler.prompt2", 0, 0), (1, 3));
        let prompt = SamplePrompt {
            references: &g.sample.references,
            instruction: &g.sample.instruction,
        };
        let mut config = SampleConfig::desk_default();
        config.steps = 25;
        config.mode = SampleMode::Stochastic;
        let (_, traj) = sample(&params, &prompt, &config, &mut derive_rng(10, "s", 0, 0)).unwrap();
        // t_0 = 0 has sigma 0; steps 1..T-1 are stochastic.
        assert_eq!(traj.step_logpdfs.len(), 24);
        assert_eq!(traj.states.len(), 26);
        assert_eq!(traj.velocities.len(), 25);
        assert_eq!(traj.times.len(), 25);
        assert!((traj.times[1] - 0.04).abs() < 1e-15);
        assert!(traj.step_logpdfs.iter().all(|l| l.logpdf.is_finite()));
        // Step indices with recorded densities are exactly those with
        // sigma > 0 on the grid.
        for l in &traj.step_logpdfs {
            let t = traj.times[l.step];
            assert!(sigma_at(t, config.noise_level) > 0.0);
        }
    }

    #[test]
    fn fixed_seed_reproduces_the_trajectory() {
        let params = test_model();
        let g = gen_composition_sample(&mut derive_rng(12, "sampler.prompt3", 0, 0), (2, 2));
        let prompt = SamplePrompt {
            references: &g.sample.references,
            instruction: &g.sample.instruction,
        };
        let mut config = SampleConfig::desk_default();
        config.steps = 6;
        config.mode = SampleMode::Stochastic;
        let (img_a, traj_a) =
            sample(&params, &prompt, &config, &mut derive_rng(77, "s", 0, 0)).unwrap();
        let (img_b, traj_b) =
            sample(&params, &prompt, &config, &mut derive_rng(77, "s", 0, 0)).unwrap();
        assert_eq!(img_a, img_b);
        for (a, b) in traj_a.states.iter().zip(&traj_b.states) {
            assert_eq!(a.values, b.values);
        }
        for (a, b) in traj_a.step_logpdfs.iter().zip(&traj_b.step_logpdfs) {
            assert_eq!(a.logpdf.to_bits(), b.logpdf.to_bits());
        }
    }

    #[test]
    fn default_step_count_is_twenty_five() {
        assert_eq!(SampleConfig::desk_default().steps, 25);
    }

    #[test]
    fn variable_k_prompts_run_without_structural_change() {
        let params = test_model();
        let mut config = SampleConfig::desk_default();
        config.steps = 3;
        for k in 1..=4 {
            let g = gen_composition_sample(
                &mut derive_rng(20 + k as u64, "sampler.kscale", 0, 0),
                (k, k),
            );
            let prompt = SamplePrompt {
                references: &g.sample.references,
                instruction: &g.sample.instruction,
            };
            let (img, _) =
                sample(&params, &prompt, &config, &mut derive_rng(1, "s", k as u64, 0)).unwrap();
            assert_eq!(img.height(), 32);
            assert_eq!(img.width(), 32);
        }
    }
}
