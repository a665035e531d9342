//! A small multimodal attention transformer with fixed random weights.
//!
//! Dual-stream blocks keep separate query/key/value/output projections for
//! text and image tokens but attend jointly over the concatenated sequence,
//! so text tokens absorb image content and vice versa. Optional trailing
//! single-stream blocks share one projection set across all tokens. Each
//! block is `x ← rms_norm(x + attention(x))`; there is no feed-forward
//! sublayer and no bias.
//!
//! Between blocks, a hook can rewrite the token states of the whole batch.
//! [`ToyDiT::forward_with_hooks`] uses that slot to run batch repulsion on
//! the configured stream.
//!
//! Weights are drawn from [`SplitMix64::new`]`(weight_seed)` in block order;
//! a dual block draws text `Q, K, V, O` then image `Q, K, V, O`, a single
//! block draws one `Q, K, V, O`. Every matrix is `D × D`, row-major, with
//! entries `N(0, 1) / √D`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::linalg::ContextBatch;
use crate::repulsion::{repulse, should_apply, RepulsionConfig, Stream};
use crate::rng::SplitMix64;

const PROMPT_STREAM: u64 = 0x7465_7874;
const IMAGE_STREAM: u64 = 0x696d_6167;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDiTConfig {
    pub n_text_tokens: usize,
    pub n_image_tokens: usize,
    pub token_dim: usize,
    pub n_dual_blocks: usize,
    pub n_single_blocks: usize,
    pub attention_heads: usize,
    pub weight_seed: u64,
    /// Add a sinusoidal position channel to the initial tokens.
    pub positional_encoding: bool,
    pub rms_eps: f64,
}

impl Default for ToyDiTConfig {
    fn default() -> Self {
        Self {
            n_text_tokens: 8,
            n_image_tokens: 16,
            token_dim: 16,
            n_dual_blocks: 4,
            n_single_blocks: 2,
            attention_heads: 2,
            weight_seed: 0,
            positional_encoding: false,
            rms_eps: 1e-6,
        }
    }
}

impl ToyDiTConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_text_tokens,
            self.n_image_tokens,
            self.token_dim,
            self.n_dual_blocks,
            self.attention_heads,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidConfig(
                "token counts, token_dim, n_dual_blocks and attention_heads must be >= 1".into(),
            ));
        }
        if self.token_dim % self.attention_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "token_dim {} is not divisible by {} heads",
                self.token_dim, self.attention_heads
            )));
        }
        if !(self.rms_eps >= 0.0 && self.rms_eps.is_finite()) {
            return Err(Error::InvalidConfig("rms_eps must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn total_blocks(&self) -> usize {
        self.n_dual_blocks + self.n_single_blocks
    }

    pub fn total_tokens(&self) -> usize {
        self.n_text_tokens + self.n_image_tokens
    }
}

/// Initial text tokens for a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEncoding {
    pub prompt_id: u64,
    /// `N × D`, row-major.
    pub tokens: Vec<f64>,
}

impl PromptEncoding {
    /// Standard-normal tokens determined by `(prompt_id, seed)`.
    pub fn new(cfg: &ToyDiTConfig, prompt_id: u64, seed: u64) -> Self {
        let mut rng = SplitMix64::derived(SplitMix64::derived(seed, PROMPT_STREAM).next_u64(), prompt_id);
        Self {
            prompt_id,
            tokens: rng.normals(cfg.n_text_tokens * cfg.token_dim),
        }
    }
}

/// Text and image tokens of one sample at a block boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenState {
    /// `N × D`, row-major.
    pub text: Vec<f64>,
    /// `n_image × D`, row-major.
    pub image: Vec<f64>,
    /// Number of blocks already applied.
    pub block_index: usize,
}

impl TokenState {
    /// Prompt tokens plus standard-normal image tokens drawn from `image_seed`.
    pub fn new(cfg: &ToyDiTConfig, prompt: &PromptEncoding, image_seed: u64) -> Result<Self> {
        let mut rng = SplitMix64::derived(image_seed, IMAGE_STREAM);
        Self::from_parts(cfg, prompt.tokens.clone(), rng.normals(cfg.n_image_tokens * cfg.token_dim))
    }

    pub fn from_parts(cfg: &ToyDiTConfig, text: Vec<f64>, image: Vec<f64>) -> Result<Self> {
        let d = cfg.token_dim;
        if text.len() != cfg.n_text_tokens * d {
            return Err(Error::DimensionMismatch {
                expected: cfg.n_text_tokens * d,
                got: text.len(),
            });
        }
        if image.len() != cfg.n_image_tokens * d {
            return Err(Error::DimensionMismatch {
                expected: cfg.n_image_tokens * d,
                got: image.len(),
            });
        }
        if text.iter().chain(&image).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("token state"));
        }
        Ok(Self {
            text,
            image,
            block_index: 0,
        })
    }

    /// Tokens of `stream`; `AllTokens` is text followed by image.
    pub fn stream(&self, stream: Stream) -> Vec<f64> {
        match stream {
            Stream::Text => self.text.clone(),
            Stream::Image => self.image.clone(),
            Stream::AllTokens => [self.text.as_slice(), self.image.as_slice()].concat(),
        }
    }

    fn set_stream(&mut self, stream: Stream, values: &[f64]) {
        match stream {
            Stream::Text => self.text.copy_from_slice(values),
            Stream::Image => self.image.copy_from_slice(values),
            Stream::AllTokens => {
                let (t, i) = values.split_at(self.text.len());
                self.text.copy_from_slice(t);
                self.image.copy_from_slice(i);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Projections {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    o: Vec<f64>,
}

impl Projections {
    fn draw(rng: &mut SplitMix64, d: usize) -> Self {
        let scale = 1.0 / (d as f64).sqrt();
        let mut m = || -> Vec<f64> { rng.normals(d * d).into_iter().map(|x| x * scale).collect() };
        Self {
            q: m(),
            k: m(),
            v: m(),
            o: m(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Block {
    Dual { text: Projections, image: Projections },
    Single(Projections),
}

/// Block outputs for a batch: `snapshots[l][i]` is sample `i` after block `l`
/// (and after any hook at that boundary).
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub final_states: Vec<TokenState>,
    pub snapshots: Vec<Vec<TokenState>>,
}

/// Where in a sampling trajectory the forward pass happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepContext {
    pub step_index: usize,
    pub total_steps: usize,
}

impl StepContext {
    /// A single-step trajectory: every timestep interval that contains 0 fires.
    pub const SINGLE: StepContext = StepContext {
        step_index: 0,
        total_steps: 1,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDiT {
    cfg: ToyDiTConfig,
    blocks: Vec<Block>,
}

/// `y = x W` for each row of `x` (`rows × d`) with `W` `d × d`.
fn project(x: &[f64], w: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, yr) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        for (a, wrow) in xr.iter().zip(w.chunks_exact(d)) {
            for (y, wv) in yr.iter_mut().zip(wrow) {
                *y += a * wv;
            }
        }
    }
    out
}

fn rms_norm(row: &mut [f64], eps: f64) {
    let ms = row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64;
    let denom = (ms + eps).sqrt();
    if denom > 0.0 {
        row.iter_mut().for_each(|x| *x /= denom);
    }
}

fn sinusoid(position: usize, dim: usize, d: usize) -> f64 {
    let freq = 1.0 / 10_000f64.powf((2 * (dim / 2)) as f64 / d as f64);
    let angle = position as f64 * freq;
    if dim % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

impl ToyDiT {
    pub fn new(cfg: ToyDiTConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.token_dim;
        let mut rng = SplitMix64::new(cfg.weight_seed);
        let mut blocks = Vec::with_capacity(cfg.total_blocks());
        for _ in 0..cfg.n_dual_blocks {
            let text = Projections::draw(&mut rng, d);
            let image = Projections::draw(&mut rng, d);
            blocks.push(Block::Dual { text, image });
        }
        for _ in 0..cfg.n_single_blocks {
            blocks.push(Block::Single(Projections::draw(&mut rng, d)));
        }
        Ok(Self { cfg, blocks })
    }

    pub fn config(&self) -> &ToyDiTConfig {
        &self.cfg
    }

    /// All projection matrices in draw order, flattened.
    pub fn weights(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut push = |p: &Projections| {
            for m in [&p.q, &p.k, &p.v, &p.o] {
                out.extend_from_slice(m);
            }
        };
        for block in &self.blocks {
            match block {
                Block::Dual { text, image } => {
                    push(text);
                    push(image);
                }
                Block::Single(p) => push(p),
            }
        }
        out
    }

    pub fn is_dual(&self, block: usize) -> bool {
        matches!(self.blocks.get(block), Some(Block::Dual { .. }))
    }

    fn check_state(&self, state: &TokenState) -> Result<()> {
        let d = self.cfg.token_dim;
        for (len, expected) in [
            (state.text.len(), self.cfg.n_text_tokens * d),
            (state.image.len(), self.cfg.n_image_tokens * d),
        ] {
            if len != expected {
                return Err(Error::DimensionMismatch { expected, got: len });
            }
        }
        Ok(())
    }

    /// One joint-attention block on one sample.
    pub fn block_forward(&self, state: &TokenState, block: usize) -> Result<TokenState> {
        self.check_state(state)?;
        let layer = self.blocks.get(block).ok_or_else(|| {
            Error::InvalidConfig(format!("block {block} out of range ({} blocks)", self.blocks.len()))
        })?;
        let d = self.cfg.token_dim;
        let (pt, pi) = match layer {
            Block::Dual { text, image } => (text, image),
            Block::Single(p) => (p, p),
        };
        let qkv = |x: &[f64], p: &Projections| (project(x, &p.q, d), project(x, &p.k, d), project(x, &p.v, d));
        let (qt, kt, vt) = qkv(&state.text, pt);
        let (qi, ki, vi) = qkv(&state.image, pi);
        let q = [qt, qi].concat();
        let k = [kt, ki].concat();
        let v = [vt, vi].concat();

        let n = self.cfg.total_tokens();
        let heads = self.cfg.attention_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attended = vec![0.0; n * d];
        let mut scores = vec![0.0; n];
        for h in 0..heads {
            let off = h * dh;
            for a in 0..n {
                let qa = &q[a * d + off..a * d + off + dh];
                for (b, s) in scores.iter_mut().enumerate() {
                    let kb = &k[b * d + off..b * d + off + dh];
                    *s = qa.iter().zip(kb).map(|(x, y)| x * y).sum::<f64>() * scale;
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let out = &mut attended[a * d + off..a * d + off + dh];
                for (b, s) in scores.iter().enumerate() {
                    let w = s / total;
                    for (o, vb) in out.iter_mut().zip(&v[b * d + off..b * d + off + dh]) {
                        *o += w * vb;
                    }
                }
            }
        }

        let split = self.cfg.n_text_tokens * d;
        let mut text: Vec<f64> = project(&attended[..split], &pt.o, d);
        let mut image: Vec<f64> = project(&attended[split..], &pi.o, d);
        for (y, x) in text.iter_mut().zip(&state.text) {
            *y += x;
        }
        for (y, x) in image.iter_mut().zip(&state.image) {
            *y += x;
        }
        for row in text.chunks_exact_mut(d).chain(image.chunks_exact_mut(d)) {
            rms_norm(row, self.cfg.rms_eps);
        }
        if text.iter().chain(&image).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("block output"));
        }
        Ok(TokenState {
            text,
            image,
            block_index: state.block_index + 1,
        })
    }

    fn with_positions(&self, state: &TokenState) -> TokenState {
        let mut s = state.clone();
        if !self.cfg.positional_encoding {
            return s;
        }
        let d = self.cfg.token_dim;
        let n_text = self.cfg.n_text_tokens;
        for (t, row) in s.text.chunks_exact_mut(d).enumerate() {
            row.iter_mut().enumerate().for_each(|(j, x)| *x += sinusoid(t, j, d));
        }
        for (t, row) in s.image.chunks_exact_mut(d).enumerate() {
            row.iter_mut().enumerate().for_each(|(j, x)| *x += sinusoid(n_text + t, j, d));
        }
        s
    }

    /// Run all blocks on a batch, calling `hook(block, states)` after every
    /// block. Snapshots are taken after the hook.
    pub fn forward_with(
        &self,
        inputs: &[TokenState],
        hook: &mut dyn FnMut(usize, &mut [TokenState]) -> Result<()>,
    ) -> Result<ForwardOutput> {
        let mut states: Vec<TokenState> = inputs.iter().map(|s| self.with_positions(s)).collect();
        let mut snapshots = Vec::with_capacity(self.blocks.len());
        for block in 0..self.blocks.len() {
            states = states
                .iter()
                .map(|s| self.block_forward(s, block))
                .collect::<Result<_>>()?;
            hook(block, &mut states)?;
            snapshots.push(states.clone());
        }
        Ok(ForwardOutput {
            final_states: states,
            snapshots,
        })
    }

    /// Forward pass with batch repulsion between blocks wherever
    /// [`should_apply`] fires. Dual-stream blocks expose the text and image
    /// streams (or both jointly for `AllTokens`); single-stream blocks expose
    /// all tokens.
    pub fn forward_with_hooks(
        &self,
        inputs: &[TokenState],
        repulsion: Option<&RepulsionConfig>,
        step: StepContext,
    ) -> Result<ForwardOutput> {
        let total = self.blocks.len();
        let mut hook = |block: usize, states: &mut [TokenState]| -> Result<()> {
            let Some(cfg) = repulsion else {
                return Ok(());
            };
            let fires = |s: Stream| should_apply(step.step_index, step.total_steps, block, total, s, cfg);
            let streams: Vec<Stream> = if self.is_dual(block) && cfg.target_stream != Stream::AllTokens {
                vec![Stream::Text, Stream::Image]
            } else {
                vec![Stream::AllTokens]
            };
            for s in streams {
                if fires(s) {
                    repulse_stream(states, s, cfg)?;
                }
            }
            Ok(())
        };
        self.forward_with(inputs, &mut hook)
    }
}

/// Flatten one stream per sample (token-major), repulse, and write back.
pub fn repulse_stream(states: &mut [TokenState], stream: Stream, cfg: &RepulsionConfig) -> Result<()> {
    if states.is_empty() {
        return Ok(());
    }
    let rows: Vec<Vec<f64>> = states.iter().map(|s| s.stream(stream)).collect();
    let moved = repulse(&ContextBatch::from_rows(&rows)?, cfg)?;
    for (state, row) in states.iter_mut().zip(moved.rows()) {
        state.set_stream(stream, row);
    }
    Ok(())
}

/// Write snapshots as CSV rows `sample,block,stream,token,dim,value`.
pub fn write_snapshots_csv<W: Write>(output: &ForwardOutput, d: usize, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["sample", "block", "stream", "token", "dim", "value"]).map_err(io)?;
    for (block, batch) in output.snapshots.iter().enumerate() {
        for (sample, state) in batch.iter().enumerate() {
            for (name, values) in [("text", &state.text), ("image", &state.image)] {
                for (idx, v) in values.iter().enumerate() {
                    w.write_record(&[
                        sample.to_string(),
                        block.to_string(),
                        name.to_string(),
                        (idx / d).to_string(),
                        (idx % d).to_string(),
                        format!("{v:e}"),
                    ])
                    .map_err(io)?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(seed: u64) -> ToyDiT {
        ToyDiT::new(ToyDiTConfig {
            weight_seed: seed,
            ..ToyDiTConfig::default()
        })
        .unwrap()
    }

    fn state(m: &ToyDiT, prompt: u64, image: u64) -> TokenState {
        let p = PromptEncoding::new(m.config(), prompt, 0);
        TokenState::new(m.config(), &p, image).unwrap()
    }

    #[test]
    fn weights_are_seeded() {
        assert_eq!(model(1).weights(), model(1).weights());
        let (a, b) = (model(1).weights(), model(2).weights());
        let max_diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(max_diff > 0.1);
    }

    #[test]
    fn weight_variance_is_one_over_d() {
        let w = model(3).weights();
        let sample = &w[..10_000];
        let mean = sample.iter().sum::<f64>() / 1e4;
        let var = sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (1e4 - 1.0);
        assert!((var * 16.0 - 1.0).abs() < 0.2, "variance {var}");
    }

    #[test]
    fn zero_tokens_stay_zero() {
        let m = model(4);
        let cfg = m.config();
        let zero = TokenState::from_parts(cfg, vec![0.0; 8 * 16], vec![0.0; 16 * 16]).unwrap();
        for block in 0..cfg.total_blocks() {
            let out = m.block_forward(&zero, block).unwrap();
            assert_eq!(out.text, zero.text);
            assert_eq!(out.image, zero.image);
        }
    }

    fn permute_rows(x: &[f64], perm: &[usize], d: usize) -> Vec<f64> {
        perm.iter().flat_map(|&p| x[p * d..(p + 1) * d].iter().copied()).collect()
    }

    #[test]
    fn joint_permutation_equivariance() {
        let m = model(5);
        let s = state(&m, 1, 2);
        let text_perm: Vec<usize> = (0..8).rev().collect();
        let image_perm: Vec<usize> = (0..16).map(|i| (i * 5 + 3) % 16).collect();
        let permuted = TokenState {
            text: permute_rows(&s.text, &text_perm, 16),
            image: permute_rows(&s.image, &image_perm, 16),
            block_index: 0,
        };
        for block in [0, 4] {
            let a = m.block_forward(&s, block).unwrap();
            let b = m.block_forward(&permuted, block).unwrap();
            let at = permute_rows(&a.text, &text_perm, 16);
            let ai = permute_rows(&a.image, &image_perm, 16);
            for (x, y) in at.iter().zip(&b.text).chain(ai.iter().zip(&b.image)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn text_sees_image_content() {
        let m = model(6);
        let s = state(&m, 1, 2);
        let mut bumped = s.clone();
        bumped.image[3 * 16 + 5] += 0.5;
        let a = m.block_forward(&s, 0).unwrap();
        let b = m.block_forward(&bumped, 0).unwrap();
        let change: f64 = a.text.iter().zip(&b.text).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(change > 0.0);
    }

    #[test]
    fn wrong_shapes_rejected() {
        let m = model(7);
        let bad = TokenState {
            text: vec![0.0; 3],
            image: vec![0.0; 16 * 16],
            block_index: 0,
        };
        assert!(matches!(m.block_forward(&bad, 0), Err(Error::DimensionMismatch { .. })));
        let cfg = ToyDiTConfig {
            attention_heads: 3,
            ..ToyDiTConfig::default()
        };
        assert!(ToyDiT::new(cfg).is_err());
    }

    #[test]
    fn positions_break_permutation_symmetry() {
        let cfg = ToyDiTConfig {
            positional_encoding: true,
            ..ToyDiTConfig::default()
        };
        let m = ToyDiT::new(cfg).unwrap();
        let p = PromptEncoding {
            prompt_id: 0,
            tokens: vec![0.0; 8 * 16],
        };
        let s = TokenState::from_parts(m.config(), p.tokens, vec![0.0; 16 * 16]).unwrap();
        let out = m.forward_with(&[s], &mut |_, _| Ok(())).unwrap();
        let text = &out.final_states[0].text;
        assert_ne!(&text[..16], &text[16..32]);
    }
}
