//! Steering by linear combination of internal representations.
//!
//! A target run is generated first and its per-step representations are
//! recorded. The source run is then replayed from its own initial noise while
//! the chosen representation is replaced, at every step inside the apply
//! interval, by `blend(source, target, alpha)`. `alpha` outside `[0, 1]`
//! extrapolates.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gmmflow::{sample_batch, sample_batch_with_hook, Method, MixtureWorld, Point, SampleTrajectory, StepHook};
use crate::repulsion::Interval;
use crate::toydit::{ForwardOutput, PromptEncoding, TokenState, ToyDiT};

/// Which representation is overwritten.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    /// Context logits in `gmmflow`, text tokens in `toydit`.
    Contextual,
    /// Latents `z_t` in `gmmflow`, image tokens in `toydit`.
    Latent,
}

impl FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contextual" => Ok(Space::Contextual),
            "latent" => Ok(Space::Latent),
            other => Err(Error::InvalidConfig(format!("unknown steering space `{other}`"))),
        }
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Space::Contextual => "contextual",
            Space::Latent => "latent",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteeringSpec {
    pub alpha: f64,
    pub space: Space,
    /// Fraction of steps (or blocks) that receive the blend.
    pub apply_interval: Interval,
}

impl SteeringSpec {
    /// Full-trajectory steering.
    pub fn new(alpha: f64, space: Space) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::NonFinite("steering alpha"));
        }
        Ok(Self {
            alpha,
            space,
            apply_interval: Interval::FULL,
        })
    }

    pub fn with_interval(mut self, interval: Interval) -> Self {
        self.apply_interval = interval;
        self
    }

    fn active(&self, step: usize, total: usize) -> bool {
        total > 0 && self.apply_interval.contains(step as f64 / total as f64)
    }
}

fn mix(a: f64, b: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * a + alpha * b
}

/// `source + alpha · (target - source)`, evaluated so that `alpha = 0` and
/// `alpha = 1` return the endpoints exactly.
pub fn blend(source: &[f64], target: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if source.len() != target.len() {
        return Err(Error::LengthMismatch {
            left: source.len(),
            right: target.len(),
        });
    }
    if alpha == 0.0 {
        return Ok(source.to_vec());
    }
    if alpha == 1.0 {
        return Ok(target.to_vec());
    }
    Ok(source.iter().zip(target).map(|(a, b)| mix(*a, *b, alpha)).collect())
}

fn blend_in_place(source: &mut [f64], target: &[f64], alpha: f64) {
    if alpha == 0.0 {
        return;
    }
    if alpha == 1.0 {
        source.copy_from_slice(target);
        return;
    }
    for (a, b) in source.iter_mut().zip(target) {
        *a = mix(*a, *b, alpha);
    }
}

/// A steered flow run together with the target run it was steered toward.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeredFlow {
    pub target: Vec<SampleTrajectory>,
    pub steered: Vec<SampleTrajectory>,
}

impl SteeredFlow {
    /// Per sample: distance from the steered final sample to the centre of
    /// the mode the target sample landed in.
    pub fn target_mode_distances(&self, world: &MixtureWorld) -> Vec<f64> {
        self.target
            .iter()
            .zip(&self.steered)
            .map(|(t, s)| {
                let (k, _) = world.nearest_center(t.final_sample());
                let c = world.centers()[k];
                let p = s.final_sample();
                (p[0] - c[0]).hypot(p[1] - c[1])
            })
            .collect()
    }
}

struct FlowSplice<'a> {
    target: &'a [SampleTrajectory],
    spec: SteeringSpec,
    steps: usize,
}

impl StepHook for FlowSplice<'_> {
    fn latents(&mut self, step: usize, z: &mut [Point]) {
        if self.spec.space != Space::Latent || !self.spec.active(step, self.steps) {
            return;
        }
        for (zi, traj) in z.iter_mut().zip(self.target) {
            blend_in_place(zi, &traj.latents[step], self.spec.alpha);
        }
    }

    fn contexts(&mut self, step: usize, c: &mut [Vec<f64>]) {
        if self.spec.space != Space::Contextual || !self.spec.active(step, self.steps) {
            return;
        }
        for (ci, traj) in c.iter_mut().zip(self.target) {
            blend_in_place(ci, &traj.contexts[step], self.spec.alpha);
        }
    }
}

/// Steer the batch generated from `source_seed` toward the batch generated
/// from `target_seed` under the same world, prompts and method.
pub fn steer_flow(
    world: &MixtureWorld,
    prompts: &[Vec<f64>],
    method: &Method,
    source_seed: u64,
    target_seed: u64,
    spec: &SteeringSpec,
) -> Result<SteeredFlow> {
    let target = sample_batch(world, prompts, method, target_seed)?;
    let mut splice = FlowSplice {
        target: &target,
        spec: *spec,
        steps: world.n_steps,
    };
    let steered = sample_batch_with_hook(world, prompts, method, source_seed, &mut splice)?;
    Ok(SteeredFlow { target, steered })
}

/// A steered toy-transformer pass with its target pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeredForward {
    pub target: ForwardOutput,
    pub steered: ForwardOutput,
}

/// Steer one sample through the toy transformer: blocks play the role of
/// steps. The target pass runs on `target_prompt` with image noise from
/// `target_seed`; the source pass keeps its own prompt and noise.
pub fn steer_toydit(
    model: &ToyDiT,
    source_prompt: &PromptEncoding,
    source_seed: u64,
    target_prompt: &PromptEncoding,
    target_seed: u64,
    spec: &SteeringSpec,
) -> Result<SteeredForward> {
    let target_state = TokenState::new(model.config(), target_prompt, target_seed)?;
    let target = model.forward_with(std::slice::from_ref(&target_state), &mut |_, _| Ok(()))?;
    let source_state = TokenState::new(model.config(), source_prompt, source_seed)?;
    let blocks = model.config().total_blocks();
    let steered = model.forward_with(std::slice::from_ref(&source_state), &mut |block, states| {
        if !spec.active(block, blocks) {
            return Ok(());
        }
        let recorded = &target.snapshots[block][0];
        let state = &mut states[0];
        match spec.space {
            Space::Contextual => blend_in_place(&mut state.text, &recorded.text, spec.alpha),
            Space::Latent => blend_in_place(&mut state.image, &recorded.image, spec.alpha),
        }
        Ok(())
    })?;
    Ok(SteeredForward { target, steered })
}
