//! Closed-form rectified flow over a context-conditioned 2-D Gaussian mixture.
//!
//! Data are `x0 ~ Σ_k w_k N(μ_k, σ² I)` with the `K` centres evenly spaced on
//! a circle of radius `R`, and the noising path is `x_t = (1 - t) x0 + t ε`.
//! Every quantity the sampler needs (responsibilities, posterior mean, score)
//! is available exactly, so diversity and fidelity effects of an intervention
//! can be measured without a learned model.
//!
//! Conditioning is a per-sample vector of `K` logits. At every step it is
//! rebuilt from the prompt logits plus a feedback term: `feedback_gain` times
//! the responsibilities of the sample's current latent under the weights it
//! was denoised with on the previous step (what the sample is currently
//! turning into). The logits are then sharpened by `guidance_gamma` through a
//! softmax into mixture weights.
//! Large `guidance_gamma` with a one-hot prompt collapses every sample onto one
//! mode. The four sampling methods differ only in what they perturb:
//!
//! - `none`: nothing;
//! - `contextual`: the batch of context logits, through [`repulse`];
//! - `latent`: the batch of latents `z_t`, through [`repulse`];
//! - `cads`: the prompt logits, with annealed Gaussian noise.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{rbf_gram, ContextBatch};
use crate::repulsion::{repulse, should_apply, Interval, RepulsionConfig, Stream};
use crate::rng::SplitMix64;
use crate::vendi::{average_pair_vendi_from_kernel, entropy_and_score};

pub type Point = [f64; 2];

/// Logit height of the dominant entry in the collapse-scenario prompts.
pub const PROMPT_SCALE: f64 = 10.0;
/// Feedback gain of [`MixtureWorld::default`].
pub const DEFAULT_FEEDBACK_GAIN: f64 = 12.0;

const NOISE_STREAM: u64 = 1;
const CADS_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureWorld {
    pub n_modes: usize,
    pub radius: f64,
    pub mode_sigma: f64,
    pub guidance_gamma: f64,
    pub n_steps: usize,
    /// How strongly the latent's current mode affinity is written back into
    /// the context logits at each step.
    pub feedback_gain: f64,
    centers: Vec<Point>,
}

impl MixtureWorld {
    pub fn new(
        n_modes: usize,
        radius: f64,
        mode_sigma: f64,
        guidance_gamma: f64,
        n_steps: usize,
    ) -> Result<Self> {
        if n_modes == 0 || n_steps == 0 {
            return Err(Error::InvalidConfig("n_modes and n_steps must be >= 1".into()));
        }
        if !(radius > 0.0 && mode_sigma > 0.0 && guidance_gamma >= 0.0) {
            return Err(Error::InvalidConfig(
                "radius and sigma must be positive, gamma non-negative".into(),
            ));
        }
        let centers: Vec<Point> = (0..n_modes)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / n_modes as f64;
                [radius * a.cos(), radius * a.sin()]
            })
            .collect();
        if n_modes > 1 {
            let min_gap = 2.0 * radius * (std::f64::consts::PI / n_modes as f64).sin();
            if mode_sigma >= min_gap / 6.0 {
                return Err(Error::InvalidConfig(format!(
                    "sigma {mode_sigma} must be below a sixth of the centre spacing {min_gap}"
                )));
            }
        }
        Ok(Self {
            n_modes,
            radius,
            mode_sigma,
            guidance_gamma,
            n_steps,
            feedback_gain: 0.0,
            centers,
        })
    }

    /// Default contextual repulsion: normalized, `η = 64`, `M = 10`, over the
    /// first quarter of the trajectory.
    pub fn default_repulsion() -> RepulsionConfig {
        RepulsionConfig::normalized(64.0, 10).with_interval(Interval {
            start: 0.0,
            end: 0.25,
        })
    }

    pub fn with_feedback(mut self, gain: f64) -> Self {
        self.feedback_gain = gain;
        self
    }

    pub fn centers(&self) -> &[Point] {
        &self.centers
    }

    /// Index of the nearest centre and the distance to it.
    pub fn nearest_center(&self, x: Point) -> (usize, f64) {
        self.centers
            .iter()
            .enumerate()
            .map(|(k, c)| (k, dist(x, *c)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one mode")
    }

    /// Step times `1, 1 - 1/T, ..., 0`.
    pub fn times(&self) -> Vec<f64> {
        let t = self.n_steps as f64;
        (0..=self.n_steps).map(|j| 1.0 - j as f64 / t).collect()
    }

    /// One-hot prompt logits `scale · e_mode`.
    pub fn one_hot_prompt(&self, mode: usize, scale: f64) -> Vec<f64> {
        let mut p = vec![0.0; self.n_modes];
        p[mode % self.n_modes] = scale;
        p
    }
}

impl Default for MixtureWorld {
    /// The collapse scenario: 8 modes on a radius-4 circle, `σ = 0.25`,
    /// `γ = 1`, 64 steps.
    fn default() -> Self {
        MixtureWorld::new(8, 4.0, 0.25, 1.0, 64)
            .expect("valid default world")
            .with_feedback(DEFAULT_FEEDBACK_GAIN)
    }
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// `softmax(gamma · c)`.
pub fn conditional_weights(c: &[f64], gamma: f64) -> Vec<f64> {
    let scaled: Vec<f64> = c.iter().map(|x| gamma * x).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    /// `E[x0 | z_t]`.
    pub mean: Point,
    pub responsibilities: Vec<f64>,
}

/// Marginal variance `s_t² = (1-t)² σ² + t²` of each component at time `t`.
pub fn marginal_variance(t: f64, sigma: f64) -> f64 {
    (1.0 - t).powi(2) * sigma * sigma + t * t
}

fn log_responsibilities(world: &MixtureWorld, z: Point, t: f64, weights: &[f64]) -> Vec<f64> {
    let s2 = marginal_variance(t, world.mode_sigma);
    let logits: Vec<f64> = world
        .centers
        .iter()
        .zip(weights)
        .map(|(mu, w)| {
            let d2 = (z[0] - (1.0 - t) * mu[0]).powi(2) + (z[1] - (1.0 - t) * mu[1]).powi(2);
            w.ln() - d2 / (2.0 * s2)
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.into_iter().map(|l| l - lse).collect()
}

/// Component responsibilities and posterior mean of `x0` given `z_t = z`.
pub fn posterior_denoiser(
    world: &MixtureWorld,
    z: Point,
    t: f64,
    weights: &[f64],
) -> Result<Posterior> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidConfig(format!("t must lie in (0, 1], got {t}")));
    }
    if weights.len() != world.n_modes {
        return Err(Error::DimensionMismatch {
            expected: world.n_modes,
            got: weights.len(),
        });
    }
    let s2 = marginal_variance(t, world.mode_sigma);
    let shrink = (1.0 - t) * world.mode_sigma * world.mode_sigma / s2;
    let responsibilities: Vec<f64> = log_responsibilities(world, z, t, weights)
        .into_iter()
        .map(f64::exp)
        .collect();
    let mut mean = [0.0; 2];
    for (r, mu) in responsibilities.iter().zip(&world.centers) {
        for d in 0..2 {
            mean[d] += r * (mu[d] + shrink * (z[d] - (1.0 - t) * mu[d]));
        }
    }
    Ok(Posterior {
        mean,
        responsibilities,
    })
}

/// `∇_z log p_t(z)` of the weighted mixture.
pub fn mixture_score(world: &MixtureWorld, z: Point, t: f64, weights: &[f64]) -> Result<Point> {
    let post = posterior_denoiser(world, z, t, weights)?;
    let s2 = marginal_variance(t, world.mode_sigma);
    let mut score = [0.0; 2];
    for (r, mu) in post.responsibilities.iter().zip(&world.centers) {
        for d in 0..2 {
            score[d] -= r * (z[d] - (1.0 - t) * mu[d]) / s2;
        }
    }
    Ok(score)
}

/// Parameters of the annealed-noise conditioning baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct CadsParams {
    /// Noise scale `s`.
    pub scale: f64,
    /// Steps (as a trajectory fraction) that receive noise when the
    /// time schedule is off; the noise decays linearly to zero across it.
    pub interval: Interval,
    /// Use the `γ(t)` schedule with thresholds `tau1 < tau2` (the default)
    /// instead of the interval ramp.
    pub use_schedule: bool,
    pub tau1: f64,
    pub tau2: f64,
    /// Blend between rescaled (`psi = 1`) and raw noisy logits.
    pub psi: f64,
}

impl CadsParams {
    pub fn new(scale: f64, interval: Interval) -> Self {
        Self {
            scale,
            interval,
            use_schedule: true,
            tau1: 0.3,
            tau2: 0.8,
            psi: 1.0,
        }
    }

    /// `γ(t)`: 1 below `tau1`, 0 above `tau2`, linear in between.
    pub fn schedule(&self, t: f64) -> f64 {
        if t <= self.tau1 {
            1.0
        } else if t >= self.tau2 {
            0.0
        } else {
            (self.tau2 - t) / (self.tau2 - self.tau1)
        }
    }

    fn perturb(&self, prompt: &[f64], step: usize, total: usize, t: f64, rng: &mut SplitMix64) -> Vec<f64> {
        let noise = rng.normals(prompt.len());
        if !self.use_schedule {
            let frac = step as f64 / total as f64;
            if !self.interval.contains(frac) {
                return prompt.to_vec();
            }
            let ramp = 1.0 - (frac - self.interval.start) / (self.interval.end - self.interval.start);
            return prompt
                .iter()
                .zip(&noise)
                .map(|(p, n)| p + self.scale * ramp * n)
                .collect();
        }
        let gamma = self.schedule(t);
        if gamma >= 1.0 {
            return prompt.to_vec();
        }
        let noisy: Vec<f64> = prompt
            .iter()
            .zip(&noise)
            .map(|(p, n)| gamma.sqrt() * p + self.scale * (1.0 - gamma).sqrt() * n)
            .collect();
        let (m_in, s_in) = mean_std(prompt);
        let (m_out, s_out) = mean_std(&noisy);
        if self.psi == 0.0 || s_out == 0.0 {
            return noisy;
        }
        noisy
            .iter()
            .map(|y| {
                let rescaled = (y - m_out) / s_out * s_in + m_in;
                self.psi * rescaled + (1.0 - self.psi) * y
            })
            .collect()
    }
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    None,
    Contextual(RepulsionConfig),
    Latent(RepulsionConfig),
    Cads(CadsParams),
}

impl Method {
    pub fn kind(&self) -> MethodKind {
        match self {
            Method::None => MethodKind::None,
            Method::Contextual(_) => MethodKind::Contextual,
            Method::Latent(_) => MethodKind::Latent,
            Method::Cads(_) => MethodKind::Cads,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    None,
    Contextual,
    Latent,
    Cads,
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "contextual" => Ok(Self::Contextual),
            "latent" => Ok(Self::Latent),
            "cads" => Ok(Self::Cads),
            other => Err(Error::InvalidConfig(format!("unknown method `{other}`"))),
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MethodKind::None => "none",
            MethodKind::Contextual => "contextual",
            MethodKind::Latent => "latent",
            MethodKind::Cads => "cads",
        })
    }
}

/// One sample's path through the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrajectory {
    /// `t_0 = 1 > t_1 > ... > t_T = 0`.
    pub times: Vec<f64>,
    /// Latent at each time; `latents[T]` is the final sample.
    pub latents: Vec<Point>,
    /// Context logits consumed at each of the `T` steps.
    pub contexts: Vec<Vec<f64>>,
}

impl SampleTrajectory {
    pub fn final_sample(&self) -> Point {
        *self.latents.last().expect("trajectory has T + 1 latents")
    }
}

/// Per-step override used by [`crate::steering`] to splice recorded
/// representations into a run. Both hooks act on the whole batch after the
/// sampler's own intervention for that step.
pub trait StepHook {
    fn latents(&mut self, _step: usize, _z: &mut [Point]) {}
    fn contexts(&mut self, _step: usize, _c: &mut [Vec<f64>]) {}
}

struct NoHook;
impl StepHook for NoHook {}

/// Responsibilities of `z` at time `t` under `weights`.
pub fn mode_affinity(world: &MixtureWorld, z: Point, t: f64, weights: &[f64]) -> Vec<f64> {
    log_responsibilities(world, z, t, weights)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// Initial latents `z_1 ~ N(0, I)` for a batch, one pair of draws per sample.
pub fn initial_noise(seed: u64, batch: usize) -> Vec<Point> {
    let mut rng = SplitMix64::derived(seed, NOISE_STREAM);
    (0..batch).map(|_| [rng.next_normal(), rng.next_normal()]).collect()
}

pub fn sample_batch(
    world: &MixtureWorld,
    prompts: &[Vec<f64>],
    method: &Method,
    seed: u64,
) -> Result<Vec<SampleTrajectory>> {
    sample_batch_with_hook(world, prompts, method, seed, &mut NoHook)
}

/// Euler integration of `dz/dt = (z - E[x0|z]) / t` from `t = 1` to `t = 0`.
pub fn sample_batch_with_hook(
    world: &MixtureWorld,
    prompts: &[Vec<f64>],
    method: &Method,
    seed: u64,
    hook: &mut dyn StepHook,
) -> Result<Vec<SampleTrajectory>> {
    let b = prompts.len();
    if b == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    if let Some(p) = prompts.iter().find(|p| p.len() != world.n_modes) {
        return Err(Error::DimensionMismatch {
            expected: world.n_modes,
            got: p.len(),
        });
    }
    let steps = world.n_steps;
    let times = world.times();
    let dt = 1.0 / steps as f64;
    let mut z = initial_noise(seed, b);
    let mut cads_rng = SplitMix64::derived(seed, CADS_STREAM);
    let mut latents: Vec<Vec<Point>> = z.iter().map(|zi| vec![*zi]).collect();
    let mut contexts: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(steps); b];
    let mut prev_weights: Vec<Vec<f64>> = prompts
        .iter()
        .map(|p| conditional_weights(p, world.guidance_gamma))
        .collect();

    for step in 0..steps {
        let t = times[step];

        if let Method::Latent(cfg) = method {
            if should_apply(step, steps, 0, 1, Stream::Text, cfg) {
                let flat: Vec<f64> = z.iter().flat_map(|p| p.iter().copied()).collect();
                let moved = repulse(&ContextBatch::new(b, 2, flat)?, cfg)?;
                for (zi, row) in z.iter_mut().zip(moved.rows()) {
                    *zi = [row[0], row[1]];
                }
            }
        }
        hook.latents(step, &mut z);

        let mut ctx: Vec<Vec<f64>> = Vec::with_capacity(b);
        for ((zi, prompt), weights) in z.iter().zip(prompts).zip(&prev_weights) {
            let base = match method {
                Method::Cads(params) => params.perturb(prompt, step, steps, t, &mut cads_rng),
                _ => prompt.clone(),
            };
            let affinity = mode_affinity(world, *zi, t, weights);
            ctx.push(
                base.iter()
                    .zip(&affinity)
                    .map(|(p, a)| p + world.feedback_gain * a)
                    .collect(),
            );
        }
        if let Method::Contextual(cfg) = method {
            if should_apply(step, steps, 0, 1, Stream::Text, cfg) {
                let flat: Vec<f64> = ctx.iter().flatten().copied().collect();
                let moved = repulse(&ContextBatch::new(b, world.n_modes, flat)?, cfg)?;
                ctx = moved.to_rows();
            }
        }
        hook.contexts(step, &mut ctx);

        for i in 0..b {
            let weights = conditional_weights(&ctx[i], world.guidance_gamma);
            let post = posterior_denoiser(world, z[i], t, &weights)?;
            prev_weights[i] = weights;
            let zi = &mut z[i];
            for d in 0..2 {
                zi[d] -= dt * (zi[d] - post.mean[d]) / t;
            }
            if !(zi[0].is_finite() && zi[1].is_finite()) {
                return Err(Error::NonFinite("latent trajectory"));
            }
            latents[i].push(*zi);
            contexts[i].push(std::mem::take(&mut ctx[i]));
        }
    }

    Ok(latents
        .into_iter()
        .zip(contexts)
        .map(|(latents, contexts)| SampleTrajectory {
            times: times.clone(),
            latents,
            contexts,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub vendi_rbf: f64,
    pub mode_coverage: usize,
    pub off_manifold_rate: f64,
    pub mean_nearest_mode_distance: f64,
    pub avg_pair_vendi: f64,
}

/// Diversity and fidelity of the final samples.
///
/// A sample is on-manifold when its nearest centre lies within `3σ`; the
/// RBF kernel uses bandwidth `R / 2`.
pub fn evaluate(trajectories: &[SampleTrajectory], world: &MixtureWorld) -> Result<RunMetrics> {
    let finals: Vec<Point> = trajectories.iter().map(SampleTrajectory::final_sample).collect();
    evaluate_points(&finals, world)
}

pub fn evaluate_points(points: &[Point], world: &MixtureWorld) -> Result<RunMetrics> {
    if points.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let b = points.len();
    let flat: Vec<f64> = points.iter().flat_map(|p| p.iter().copied()).collect();
    let kernel = rbf_gram(&flat, 2, world.radius / 2.0)?;
    let vendi_rbf = entropy_and_score(&kernel)?.score;
    let avg_pair_vendi = if b >= 2 {
        average_pair_vendi_from_kernel(&kernel)?
    } else {
        1.0
    };
    let threshold = 3.0 * world.mode_sigma;
    let mut hit = vec![false; world.n_modes];
    let mut off = 0usize;
    let mut total_dist = 0.0;
    for p in points {
        let (k, d) = world.nearest_center(*p);
        total_dist += d;
        if d <= threshold {
            hit[k] = true;
        } else {
            off += 1;
        }
    }
    Ok(RunMetrics {
        vendi_rbf,
        mode_coverage: hit.iter().filter(|h| **h).count(),
        off_manifold_rate: off as f64 / b as f64,
        mean_nearest_mode_distance: total_dist / b as f64,
        avg_pair_vendi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn world(gamma: f64) -> MixtureWorld {
        MixtureWorld::new(8, 4.0, 0.25, gamma, 64).unwrap()
    }

    #[test]
    fn weights_cases() {
        let w = conditional_weights(&[1.0, -3.0, 0.5, 2.0], 0.0);
        assert!(w.iter().all(|x| (x - 0.25).abs() < 1e-15));

        let mut c = vec![0.0; 8];
        c[3] = 10.0;
        let w = conditional_weights(&c, 1.0);
        assert!(w[3] >= 0.999);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let shifted: Vec<f64> = c.iter().map(|x| x + 123.0).collect();
        let w2 = conditional_weights(&shifted, 1.0);
        for (a, b) in w.iter().zip(&w2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn world_invariants() {
        assert!(MixtureWorld::new(8, 4.0, 0.6, 1.0, 64).is_err());
        assert!(MixtureWorld::new(0, 4.0, 0.1, 1.0, 64).is_err());
        assert!(MixtureWorld::new(1, 4.0, 5.0, 1.0, 64).is_ok());
    }

    #[test]
    fn denoiser_concentrates_near_zero_time() {
        let w = world(0.0);
        let weights = vec![1.0 / 8.0; 8];
        let z = w.centers()[2];
        // With z on a centre the gap is t·|μ|(1 + O(t)): linear in t.
        let post = posterior_denoiser(&w, z, 1e-4, &weights).unwrap();
        assert!(dist(post.mean, z) <= 1.01e-4 * 4.0);
        assert!(post.responsibilities[2] > 1.0 - 1e-12);
        let post = posterior_denoiser(&w, z, 1e-7, &weights).unwrap();
        assert!(dist(post.mean, z) < 1e-6);
    }

    #[test]
    fn single_mode_matches_gaussian_posterior() {
        let w = MixtureWorld::new(1, 2.0, 0.5, 1.0, 10).unwrap();
        let (z, t) = ([0.7, -1.1], 0.4);
        let post = posterior_denoiser(&w, z, t, &[1.0]).unwrap();
        assert_eq!(post.responsibilities, vec![1.0]);
        // x0 ~ N(μ, σ²), z = (1-t) x0 + t ε: E[x0|z] = μ + (1-t)σ²/s² (z - (1-t)μ).
        let (mu, s2, var) = ([2.0, 0.0], (0.6f64 * 0.5).powi(2) + 0.16, 0.25);
        for d in 0..2 {
            let expected = mu[d] + 0.6 * var / s2 * (z[d] - 0.6 * mu[d]);
            assert!((post.mean[d] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn far_points_do_not_underflow() {
        let w = world(1.0);
        let weights = conditional_weights(&w.one_hot_prompt(0, 10.0), 1.0);
        let post = posterior_denoiser(&w, [1e3, -1e3], 0.01, &weights).unwrap();
        assert!(post.mean.iter().all(|x| x.is_finite()));
        assert!((post.responsibilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(posterior_denoiser(&w, [0.0, 0.0], 0.0, &weights).is_err());
    }

    #[test]
    fn trajectories_have_expected_shape() {
        let w = world(1.0);
        let prompts = vec![w.one_hot_prompt(0, 10.0); 3];
        let runs = sample_batch(&w, &prompts, &Method::None, 5).unwrap();
        assert_eq!(runs.len(), 3);
        for r in &runs {
            assert_eq!(r.latents.len(), 65);
            assert_eq!(r.times.len(), 65);
            assert_eq!(r.contexts.len(), 64);
            assert_eq!(r.times[0], 1.0);
            assert_eq!(r.times[64], 0.0);
        }
        let again = sample_batch(&w, &prompts, &Method::None, 5).unwrap();
        assert_eq!(runs, again);
    }

    #[test]
    fn evaluate_cases() {
        let w = world(1.0);
        let c = w.centers().to_vec();
        let m = evaluate_points(&[c[1]; 5], &w).unwrap();
        assert_eq!(m.mode_coverage, 1);
        assert_eq!(m.off_manifold_rate, 0.0);
        assert!((m.vendi_rbf - 1.0).abs() < 1e-12);

        let m = evaluate_points(&c, &w).unwrap();
        assert_eq!(m.mode_coverage, 8);
        assert_eq!(m.off_manifold_rate, 0.0);

        let mut pts = vec![c[0]; 3];
        pts.push([0.0, 0.0]);
        let m = evaluate_points(&pts, &w).unwrap();
        assert_eq!(m.off_manifold_rate, 0.25);
        assert!(evaluate_points(&[], &w).is_err());
    }

    #[test]
    fn cads_schedule_shape() {
        let p = CadsParams::new(0.5, Interval::FULL);
        assert_eq!(p.schedule(0.1), 1.0);
        assert_eq!(p.schedule(0.9), 0.0);
        assert!((p.schedule(0.55) - 0.5).abs() < 1e-12);
    }

    /// `log p_t(z)` written out directly as a weighted sum of isotropic
    /// Gaussians `N((1-t)μ_k, s_t² I)`.
    fn log_density(w: &MixtureWorld, z: Point, t: f64, weights: &[f64]) -> f64 {
        let s2 = (1.0 - t).powi(2) * w.mode_sigma.powi(2) + t * t;
        let terms: Vec<f64> = w
            .centers()
            .iter()
            .zip(weights)
            .map(|(mu, wk)| {
                let dx = z[0] - (1.0 - t) * mu[0];
                let dy = z[1] - (1.0 - t) * mu[1];
                wk.ln() - (dx * dx + dy * dy) / (2.0 * s2) - (2.0 * std::f64::consts::PI * s2).ln()
            })
            .collect();
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + terms.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    }

    #[test]
    fn score_matches_density_differences() {
        let w = world(1.0);
        let mut rng = SplitMix64::new(2024);
        let weights = conditional_weights(&rng.normals(8), 1.0);
        for _ in 0..100 {
            let t = 0.05 + 0.95 * rng.next_f64();
            let z = [5.0 * (rng.next_f64() - 0.5) * 2.0, 5.0 * (rng.next_f64() - 0.5) * 2.0];
            let score = mixture_score(&w, z, t, &weights).unwrap();
            let h = 1e-5;
            let mut fd = [0.0; 2];
            for d in 0..2 {
                let (mut zp, mut zm) = (z, z);
                zp[d] += h;
                zm[d] -= h;
                fd[d] = (log_density(&w, zp, t, &weights) - log_density(&w, zm, t, &weights)) / (2.0 * h);
            }
            let err = (score[0] - fd[0]).hypot(score[1] - fd[1]);
            let scale = fd[0].hypot(fd[1]).max(1.0);
            assert!(err / scale <= 1e-6, "t={t} z={z:?} err={err}");
        }
    }

    #[test]
    fn gradient_component_along_ones_is_inert() {
        let w = world(1.0);
        let mut rng = SplitMix64::new(8);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut c = w.one_hot_prompt(0, PROMPT_SCALE);
                c.iter_mut().for_each(|x| *x += rng.next_normal());
                c
            })
            .collect();
        let batch = ContextBatch::from_rows(&rows).unwrap();
        let grad = crate::vendi::entropy_gradient(&batch).unwrap();
        for (i, c) in rows.iter().enumerate() {
            let along = grad.row(i).iter().sum::<f64>() / c.len() as f64;
            let moved: Vec<f64> = c.iter().map(|x| x + 50.0 * along).collect();
            let before = conditional_weights(c, 1.0);
            let after = conditional_weights(&moved, 1.0);
            for (a, b) in before.iter().zip(&after) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn defaults_describe_collapse_scenario() {
        let w = MixtureWorld::default();
        assert_eq!((w.n_modes, w.n_steps), (8, 64));
        assert_eq!(w.feedback_gain, DEFAULT_FEEDBACK_GAIN);
        let cfg = MixtureWorld::default_repulsion();
        assert!(cfg.gradient_normalization);
        assert!(cfg.validate().is_ok());
    }
}
