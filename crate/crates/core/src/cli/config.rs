//! Flat `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment, keys are dotted
//! (`world.gamma`, `repulsion.eta`, ...). Unknown keys and repeated keys are
//! rejected. Lists use `;` between items; an interval is written `start,end`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gmmflow::{CadsParams, MethodKind, MixtureWorld, DEFAULT_FEEDBACK_GAIN, PROMPT_SCALE};
use crate::repulsion::{BlockSelector, Interval, Preset, RepulsionConfig, Stream};
use crate::toydit::ToyDiTConfig;

pub const KNOWN_KEYS: &[&str] = &[
    "seeds",
    "seed_base",
    "method",
    "world.n_modes",
    "world.radius",
    "world.sigma",
    "world.gamma",
    "world.steps",
    "world.feedback_gain",
    "world.batch",
    "world.prompt",
    "world.prompt_mode",
    "world.prompt_scale",
    "repulsion.preset",
    "repulsion.eta",
    "repulsion.inner_steps",
    "repulsion.normalize",
    "repulsion.interval",
    "repulsion.blocks",
    "repulsion.stream",
    "repulsion.include_single_stream",
    "latent.eta",
    "latent.inner_steps",
    "cads.scale",
    "cads.interval",
    "cads.schedule",
    "cads.tau1",
    "cads.tau2",
    "cads.psi",
    "toy.text_tokens",
    "toy.image_tokens",
    "toy.dim",
    "toy.dual_blocks",
    "toy.single_blocks",
    "toy.heads",
    "toy.weight_seed",
    "toy.positional",
    "toy.batch",
    "toy.prompt_id",
    "toy.eta",
    "toy.inner_steps",
    "sweep.batch_sizes",
    "sweep.intervals",
    "sweep.blocks",
    "steer.interval",
    "output.metrics",
    "output.csv",
    "output.dir",
];

/// Raw key/value pairs of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl FromStr for RawConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::InvalidConfig(format!("line {}: unknown key `{key}`", n + 1)));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::InvalidConfig(format!("line {}: duplicate key `{key}`", n + 1)));
            }
        }
        Ok(Self { entries })
    }
}

impl RawConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        text.parse()
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::InvalidConfig(format!("bad value `{v}` for `{key}`"))),
        }
    }

    fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn get_with<T>(&self, key: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Option<T>> {
        self.entries
            .get(key)
            .map(|v| parse(v).map_err(|e| Error::InvalidConfig(format!("`{key}`: {e}"))))
            .transpose()
    }
}

pub fn parse_interval(s: &str) -> Result<Interval> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| Error::InvalidConfig(format!("interval `{s}` must be `start,end`")))?;
    let num = |x: &str| {
        x.trim()
            .parse::<f64>()
            .map_err(|_| Error::InvalidConfig(format!("bad interval bound `{x}`")))
    };
    Interval::new(num(a)?, num(b)?)
}

fn parse_list<T>(s: &str, item: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    s.split(';').map(str::trim).filter(|x| !x.is_empty()).map(item).collect()
}

fn parse_bool(s: &str) -> Result<bool> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::InvalidConfig(format!("expected a boolean, got `{other}`"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PromptKind {
    /// `scale · e_mode` for every sample.
    OneHot { mode: usize, scale: f64 },
    /// All-zero logits: no mode preferred.
    Uniform,
}

/// Sweep settings for `ablate`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub batch_sizes: Vec<usize>,
    pub intervals: Vec<Interval>,
    pub blocks: Vec<BlockSelector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub world: MixtureWorld,
    pub batch: usize,
    pub prompt: PromptKind,
    pub seeds: Vec<u64>,
    pub method: MethodKind,
    /// Contextual repulsion in the flow.
    pub repulsion: RepulsionConfig,
    /// Latent repulsion in the flow; shares interval and normalization with
    /// `repulsion`.
    pub latent: RepulsionConfig,
    pub cads: CadsParams,
    pub toy: ToyDiTConfig,
    pub toy_batch: usize,
    pub toy_prompt_id: u64,
    /// Repulsion inside the toy transformer.
    pub toy_repulsion: RepulsionConfig,
    pub sweep: SweepConfig,
    pub steer_interval: Interval,
    pub output_metrics: Option<PathBuf>,
    pub output_csv: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        RawConfig::default()
            .try_into()
            .expect("built-in defaults are valid")
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        RawConfig::load(path)?.try_into()
    }

    /// Prompt logits for each sample of a flow batch of size `b`.
    pub fn prompts(&self, b: usize) -> Vec<Vec<f64>> {
        let p = match self.prompt {
            PromptKind::OneHot { mode, scale } => self.world.one_hot_prompt(mode, scale),
            PromptKind::Uniform => vec![0.0; self.world.n_modes],
        };
        vec![p; b]
    }
}

fn apply_repulsion_keys(raw: &RawConfig, base: RepulsionConfig, eta_key: &str, steps_key: &str) -> Result<RepulsionConfig> {
    let mut cfg = base;
    if let Some(eta) = raw.get(eta_key)? {
        cfg.eta = eta;
    }
    if let Some(m) = raw.get(steps_key)? {
        cfg.inner_steps = m;
    }
    if let Some(n) = raw.get_with("repulsion.normalize", parse_bool)? {
        cfg.gradient_normalization = n;
    }
    if let Some(i) = raw.get_with("repulsion.interval", parse_interval)? {
        cfg.timestep_interval = i;
    }
    cfg.validate()?;
    Ok(cfg)
}

impl TryFrom<RawConfig> for ExperimentConfig {
    type Error = Error;

    fn try_from(raw: RawConfig) -> Result<Self> {
        let world = MixtureWorld::new(
            raw.get_or("world.n_modes", 8)?,
            raw.get_or("world.radius", 4.0)?,
            raw.get_or("world.sigma", 0.25)?,
            raw.get_or("world.gamma", 1.0)?,
            raw.get_or("world.steps", 64)?,
        )?
        .with_feedback(raw.get_or("world.feedback_gain", DEFAULT_FEEDBACK_GAIN)?);
        let batch: usize = raw.get_or("world.batch", 8)?;
        let prompt = match raw.entries.get("world.prompt").map(String::as_str).unwrap_or("one_hot") {
            "one_hot" => PromptKind::OneHot {
                mode: raw.get_or("world.prompt_mode", 0)?,
                scale: raw.get_or("world.prompt_scale", PROMPT_SCALE)?,
            },
            "uniform" => PromptKind::Uniform,
            other => return Err(Error::InvalidConfig(format!("unknown world.prompt `{other}`"))),
        };
        let n_seeds: u64 = raw.get_or("seeds", 20)?;
        let seed_base: u64 = raw.get_or("seed_base", 0)?;
        let method = raw.get_or("method", MethodKind::Contextual)?;

        let mut base = MixtureWorld::default_repulsion();
        let mut preset_blocks = false;
        if let Some(name) = raw.entries.get("repulsion.preset") {
            base = Preset::by_name(name)?.config();
            preset_blocks = true;
        }
        if let Some(blocks) = raw.get("repulsion.blocks")? {
            base.block_selector = blocks;
        }
        if let Some(stream) = raw.get::<Stream>("repulsion.stream")? {
            base.target_stream = stream;
        }
        if let Some(single) = raw.get_with("repulsion.include_single_stream", parse_bool)? {
            base.include_single_stream = single;
        }
        let repulsion = apply_repulsion_keys(&raw, base.clone(), "repulsion.eta", "repulsion.inner_steps")?;
        let mut latent_base = RepulsionConfig::normalized(8.0, 10);
        latent_base.timestep_interval = repulsion.timestep_interval;
        latent_base.gradient_normalization = repulsion.gradient_normalization;
        let latent = apply_repulsion_keys(&raw, latent_base, "latent.eta", "latent.inner_steps")?;

        let mut cads = CadsParams::new(
            raw.get_or("cads.scale", 4.0)?,
            raw.get_with("cads.interval", parse_interval)?
                .unwrap_or(repulsion.timestep_interval),
        );
        cads.use_schedule = raw.get_with("cads.schedule", parse_bool)?.unwrap_or(true);
        cads.tau1 = raw.get_or("cads.tau1", cads.tau1)?;
        cads.tau2 = raw.get_or("cads.tau2", cads.tau2)?;
        cads.psi = raw.get_or("cads.psi", cads.psi)?;
        if !(cads.scale >= 0.0 && cads.tau1 < cads.tau2) {
            return Err(Error::InvalidConfig("cads needs scale >= 0 and tau1 < tau2".into()));
        }

        let d = ToyDiTConfig::default();
        let toy = ToyDiTConfig {
            n_text_tokens: raw.get_or("toy.text_tokens", d.n_text_tokens)?,
            n_image_tokens: raw.get_or("toy.image_tokens", d.n_image_tokens)?,
            token_dim: raw.get_or("toy.dim", d.token_dim)?,
            n_dual_blocks: raw.get_or("toy.dual_blocks", d.n_dual_blocks)?,
            n_single_blocks: raw.get_or("toy.single_blocks", d.n_single_blocks)?,
            attention_heads: raw.get_or("toy.heads", d.attention_heads)?,
            weight_seed: raw.get_or("toy.weight_seed", d.weight_seed)?,
            positional_encoding: raw.get_with("toy.positional", parse_bool)?.unwrap_or(false),
            rms_eps: d.rms_eps,
        };
        toy.validate()?;
        let mut toy_repulsion = RepulsionConfig::normalized(
            raw.get_or("toy.eta", 0.1)?,
            raw.get_or("toy.inner_steps", 5)?,
        );
        toy_repulsion.block_selector = if preset_blocks || raw.entries.contains_key("repulsion.blocks") {
            base.block_selector.clone()
        } else {
            BlockSelector::All
        };
        toy_repulsion.target_stream = base.target_stream;
        toy_repulsion.include_single_stream = base.include_single_stream;
        toy_repulsion.validate()?;

        let sweep = SweepConfig {
            batch_sizes: raw
                .get_with("sweep.batch_sizes", |s| {
                    parse_list(s, |x| {
                        x.parse::<usize>()
                            .map_err(|_| Error::InvalidConfig(format!("bad batch size `{x}`")))
                    })
                })?
                .unwrap_or_else(|| vec![4, 8, 16]),
            intervals: raw
                .get_with("sweep.intervals", |s| parse_list(s, parse_interval))?
                .unwrap_or_else(|| {
                    [(0.0, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0), (0.0, 1.0)]
                        .iter()
                        .map(|&(a, b)| Interval { start: a, end: b })
                        .collect()
                }),
            blocks: raw
                .get_with("sweep.blocks", |s| parse_list(s, BlockSelector::from_str))?
                .unwrap_or_else(|| {
                    vec![
                        BlockSelector::FirstThird,
                        BlockSelector::MiddleThird,
                        BlockSelector::LastThird,
                        BlockSelector::All,
                    ]
                }),
        };
        if sweep.batch_sizes.contains(&0) || batch == 0 {
            return Err(Error::InvalidConfig("batch sizes must be >= 1".into()));
        }

        Ok(Self {
            world,
            batch,
            prompt,
            seeds: (seed_base..seed_base + n_seeds).collect(),
            method,
            repulsion,
            latent,
            cads,
            toy,
            toy_batch: raw.get_or("toy.batch", 4)?,
            toy_prompt_id: raw.get_or("toy.prompt_id", 0)?,
            toy_repulsion,
            sweep,
            steer_interval: raw
                .get_with("steer.interval", parse_interval)?
                .unwrap_or(Interval::FULL),
            output_metrics: raw.get("output.metrics")?,
            output_csv: raw.get("output.csv")?,
            output_dir: raw.get("output.dir")?,
        })
    }
}
