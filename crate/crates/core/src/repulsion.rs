//! On-the-fly repulsion of a batch of context vectors.
//!
//! Each call runs `M` inner iterations of
//! `c_i <- c_i + (η / M) ∇_{c_i} H({c_j})`, recomputing the entropy gradient at
//! the current state every iteration. [`should_apply`] decides where in the
//! sampling trajectory and in the block stack the update fires.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::ContextBatch;
use crate::vendi::{entropy_gradient, BatchGradient};

const OVERFLOW_LIMIT: f64 = 1e30;

/// Half-open fraction `[start, end)` of a sampling trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub const FULL: Interval = Interval {
        start: 0.0,
        end: 1.0,
    };

    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&start) || !(end > start && end <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "interval [{start}, {end}) must satisfy 0 <= start < end <= 1"
            )));
        }
        Ok(Self { start, end })
    }

    /// The first `steps` of `total` steps.
    pub fn first_steps(steps: usize, total: usize) -> Result<Self> {
        Self::new(0.0, steps as f64 / total as f64)
    }

    pub fn contains(&self, fraction: f64) -> bool {
        fraction >= self.start && fraction < self.end
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})", self.start, self.end)
    }
}

/// Which transformer blocks receive the update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockSelector {
    All,
    FirstThird,
    MiddleThird,
    LastThird,
    Explicit(Vec<usize>),
}

impl BlockSelector {
    /// Thirds use floor boundaries `⌊n/3⌋` and `⌊2n/3⌋`, lower-inclusive.
    pub fn contains(&self, block_index: usize, total_blocks: usize) -> bool {
        let one = total_blocks / 3;
        let two = 2 * total_blocks / 3;
        match self {
            BlockSelector::All => block_index < total_blocks,
            BlockSelector::FirstThird => block_index < one,
            BlockSelector::MiddleThird => (one..two).contains(&block_index),
            BlockSelector::LastThird => (two..total_blocks).contains(&block_index),
            BlockSelector::Explicit(list) => list.contains(&block_index),
        }
    }
}

impl FromStr for BlockSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(Self::All),
            "first_third" => Ok(Self::FirstThird),
            "middle_third" => Ok(Self::MiddleThird),
            "last_third" => Ok(Self::LastThird),
            other => other
                .split(',')
                .map(|t| t.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Self::Explicit)
                .map_err(|_| Error::InvalidConfig(format!("unknown block selector `{other}`"))),
        }
    }
}

impl fmt::Display for BlockSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockSelector::All => f.write_str("all"),
            BlockSelector::FirstThird => f.write_str("first_third"),
            BlockSelector::MiddleThird => f.write_str("middle_third"),
            BlockSelector::LastThird => f.write_str("last_third"),
            BlockSelector::Explicit(list) => {
                let parts: Vec<String> = list.iter().map(usize::to_string).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

/// Token stream exposed at a hook point.
///
/// Dual-stream blocks expose `Text` and `Image`; single-stream blocks expose
/// only `AllTokens`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Text,
    Image,
    AllTokens,
}

impl FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "text" => Ok(Self::Text),
            "image" => Ok(Self::Image),
            "all_tokens" | "all" => Ok(Self::AllTokens),
            other => Err(Error::InvalidConfig(format!("unknown stream `{other}`"))),
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stream::Text => "text",
            Stream::Image => "image",
            Stream::AllTokens => "all_tokens",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepulsionConfig {
    /// Overall repulsion scale η.
    pub eta: f64,
    /// Inner iterations `M` per application.
    pub inner_steps: usize,
    pub timestep_interval: Interval,
    pub block_selector: BlockSelector,
    pub target_stream: Stream,
    /// Also repulse the joint sequence of single-stream blocks, in addition
    /// to `target_stream` in the dual-stream blocks.
    pub include_single_stream: bool,
    /// Divide each inner-step gradient by the largest per-sample gradient
    /// norm, so that `η / M` is the step length of the fastest sample.
    pub gradient_normalization: bool,
}

impl Default for RepulsionConfig {
    fn default() -> Self {
        Self {
            eta: 0.0,
            inner_steps: 1,
            timestep_interval: Interval::FULL,
            block_selector: BlockSelector::All,
            target_stream: Stream::Text,
            include_single_stream: false,
            gradient_normalization: false,
        }
    }
}

impl RepulsionConfig {
    /// Raw update with the given scale and inner iteration count.
    pub fn raw(eta: f64, inner_steps: usize) -> Self {
        Self {
            eta,
            inner_steps,
            ..Self::default()
        }
    }

    /// Normalised update: every inner step moves the fastest sample by
    /// `eta / inner_steps`.
    pub fn normalized(eta: f64, inner_steps: usize) -> Self {
        Self {
            gradient_normalization: true,
            ..Self::raw(eta, inner_steps)
        }
    }

    pub fn with_interval(mut self, interval: Interval) -> Self {
        self.timestep_interval = interval;
        self
    }

    pub fn with_blocks(mut self, selector: BlockSelector) -> Self {
        self.block_selector = selector;
        self
    }

    pub fn with_stream(mut self, stream: Stream) -> Self {
        self.target_stream = stream;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "eta must be finite and non-negative, got {}",
                self.eta
            )));
        }
        if self.inner_steps == 0 {
            return Err(Error::InvalidConfig("inner_steps must be >= 1".into()));
        }
        Interval::new(self.timestep_interval.start, self.timestep_interval.end)?;
        Ok(())
    }

    fn stream_matches(&self, stream: Stream) -> bool {
        stream == self.target_stream
            || (self.include_single_stream && stream == Stream::AllTokens)
    }
}

/// Entropy is scale-free in each row, so `|g_i| |c_i|` is dimensionless. Below
/// this level the gradient carries no direction worth normalising.
const ROUND_OFF_GRADIENT: f64 = 1e-10;

fn is_round_off(grad: &BatchGradient, batch: &ContextBatch) -> bool {
    grad.row_norms()
        .iter()
        .zip(batch.norms())
        .all(|(g, c)| g * c <= ROUND_OFF_GRADIENT)
}

/// Run the inner repulsion loop on a batch.
///
/// Batches of one sample and `eta == 0` are returned unchanged.
pub fn repulse(batch: &ContextBatch, cfg: &RepulsionConfig) -> Result<ContextBatch> {
    cfg.validate()?;
    if batch.batch_size() < 2 || cfg.eta == 0.0 {
        return Ok(batch.clone());
    }
    let step = cfg.eta / cfg.inner_steps as f64;
    let (b, nd) = (batch.batch_size(), batch.vector_dim());
    let mut current = batch.clone();
    for _ in 0..cfg.inner_steps {
        let grad = entropy_gradient(&current)?;
        let factor = if cfg.gradient_normalization {
            let max_norm = grad.max_row_norm();
            if is_round_off(&grad, &current) {
                continue;
            }
            step / max_norm
        } else {
            step
        };
        let mut data = current.into_vec();
        for (x, g) in data.iter_mut().zip(grad.as_slice()) {
            *x += factor * g;
            if !(x.abs() <= OVERFLOW_LIMIT) {
                return Err(Error::NumericOverflow(*x));
            }
        }
        current = ContextBatch::new(b, nd, data)?;
    }
    Ok(current)
}

/// Whether the hook at (`step_index`, `block_index`, `stream`) fires.
pub fn should_apply(
    step_index: usize,
    total_steps: usize,
    block_index: usize,
    total_blocks: usize,
    stream: Stream,
    cfg: &RepulsionConfig,
) -> bool {
    if total_steps == 0 || step_index >= total_steps {
        return false;
    }
    let fraction = step_index as f64 / total_steps as f64;
    cfg.timestep_interval.contains(fraction)
        && cfg.block_selector.contains(block_index, total_blocks)
        && cfg.stream_matches(stream)
}

/// Production settings reported for the three reference models.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub eta_range: (f64, f64),
    pub inner_steps: usize,
    pub sampling_steps: usize,
    /// Number of leading sampling steps with repulsion enabled (τ).
    pub active_steps: usize,
    pub guidance_scale: f64,
    pub include_single_stream: bool,
}

pub const PRESETS: [Preset; 3] = [
    Preset {
        name: "flux-dev",
        eta_range: (2.5e8, 5e10),
        inner_steps: 50,
        sampling_steps: 20,
        active_steps: 1,
        guidance_scale: 3.5,
        include_single_stream: true,
    },
    Preset {
        name: "sd35-large",
        eta_range: (2.5e7, 5e8),
        inner_steps: 100,
        sampling_steps: 28,
        active_steps: 4,
        guidance_scale: 3.5,
        include_single_stream: false,
    },
    Preset {
        name: "sd35-turbo",
        eta_range: (5e6, 1e8),
        inner_steps: 100,
        sampling_steps: 4,
        active_steps: 1,
        guidance_scale: 0.0,
        include_single_stream: false,
    },
];

impl Preset {
    pub fn by_name(name: &str) -> Result<&'static Preset> {
        PRESETS
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown preset `{name}`")))
    }

    /// Raw (unnormalised) text-stream config at the low end of the η range.
    pub fn config(&self) -> RepulsionConfig {
        RepulsionConfig {
            eta: self.eta_range.0,
            inner_steps: self.inner_steps,
            timestep_interval: Interval::first_steps(self.active_steps, self.sampling_steps)
                .expect("preset intervals are valid"),
            block_selector: BlockSelector::All,
            target_stream: Stream::Text,
            include_single_stream: self.include_single_stream,
            gradient_normalization: false,
        }
    }
}
