use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::{AxisArg, CliError, Command, KernelArg};
use crate::error::Error;
use crate::gmmflow::{evaluate, sample_batch, Method, MethodKind, RunMetrics};
use crate::linalg::ContextBatch;
use crate::repulsion::{repulse, RepulsionConfig};
use crate::rng::SplitMix64;
use crate::steering::{steer_flow, SteeringSpec};
use crate::toydit::{write_snapshots_csv, PromptEncoding, StepContext, TokenState, ToyDiT};
use crate::vendi::{batch_diversity, entropy_and_score, entropy_gradient, KernelKind};

type CmdResult<T = ()> = std::result::Result<T, CliError>;

/// Numeric failure threshold of `grad-check`.
pub const GRAD_CHECK_LIMIT: f64 = 1e-4;

pub fn dispatch(command: Command, out: &mut dyn Write) -> CmdResult {
    match command {
        Command::Vendi {
            input,
            kernel,
            bandwidth,
        } => vendi(&input, kernel, bandwidth, out),
        Command::GradCheck {
            batch,
            dim,
            seeds,
            fd_step,
        } => grad_check(batch, dim, seeds, fd_step, out),
        Command::Repulse {
            input,
            eta,
            steps,
            normalize,
            out: path,
        } => repulse_file(&input, eta, steps, normalize, path.as_deref(), out),
        Command::ToyRun { config, out_dir } => {
            let cfg = load_config(config.as_deref())?;
            let dir = out_dir.or_else(|| cfg.output_dir.clone());
            toy_run(&cfg, dir.as_deref(), out)
        }
        Command::Simulate {
            config,
            method,
            seeds,
            jobs,
            out: path,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(m) = method {
                cfg.method = m.into();
            }
            if let Some(n) = seeds {
                let base = cfg.seeds.first().copied().unwrap_or(0);
                cfg.seeds = (base..base + n).collect();
            }
            let path = path.or_else(|| cfg.output_metrics.clone());
            simulate(&cfg, jobs, path.as_deref(), out)
        }
        Command::Ablate {
            axis,
            config,
            jobs,
            out: path,
        } => {
            let cfg = load_config(config.as_deref())?;
            let path = path.or_else(|| cfg.output_csv.clone());
            ablate(&cfg, axis, jobs, path.as_deref(), out)
        }
        Command::Steer {
            alpha,
            source_seed,
            target_seed,
            space,
            config,
            out: path,
        } => {
            let cfg = load_config(config.as_deref())?;
            let path = path.or_else(|| cfg.output_csv.clone());
            let spec = SteeringSpec::new(alpha, space.into())?.with_interval(cfg.steer_interval);
            steer(&cfg, source_seed, target_seed, &spec, path.as_deref(), out)
        }
    }
}

fn load_config(path: Option<&Path>) -> CmdResult<ExperimentConfig> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    })
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(Error::Io(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> CmdResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

/// Either the file at `path` or `fallback`.
fn with_sink(path: Option<&Path>, fallback: &mut dyn Write, f: impl FnOnce(&mut dyn Write) -> CmdResult) -> CmdResult {
    match path {
        Some(p) => {
            let mut w = create(p)?;
            f(&mut w)?;
            w.flush().map_err(|e| io_err(p, e))
        }
        None => f(fallback),
    }
}

fn emit(out: &mut dyn Write, value: &impl Serialize) -> CmdResult {
    let line = serde_json::to_string(value).map_err(|e| CliError::Input(Error::Io(e.to_string())))?;
    writeln!(out, "{line}").map_err(|e| CliError::Input(Error::Io(e.to_string())))
}

fn pool(jobs: usize) -> CmdResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} jobs: {e}")))
}

/// `f(0), ..., f(n - 1)` on up to `jobs` threads, returned in index order.
fn ordered<T: Send>(jobs: usize, n: usize, f: impl Fn(usize) -> CmdResult<T> + Sync + Send) -> CmdResult<Vec<T>> {
    pool(jobs)?.install(|| (0..n).into_par_iter().map(f).collect())
}

/// Read a CSV with a `dim0,dim1,...` header into a batch.
pub fn read_batch(path: &Path) -> CmdResult<ContextBatch> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let header = reader.headers().map_err(|e| io_err(path, e))?.clone();
    for (i, name) in header.iter().enumerate() {
        if name != format!("dim{i}") {
            return Err(io_err(path, format!("header column {i} is `{name}`, expected `dim{i}`")));
        }
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| io_err(path, e))?;
        let row = record
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| io_err(path, format!("bad number `{v}`"))))
            .collect::<CmdResult<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(io_err(path, "no data rows"));
    }
    Ok(ContextBatch::from_rows(&rows)?)
}

pub fn write_batch(batch: &ContextBatch, out: &mut dyn Write) -> CmdResult {
    let mut w = csv::Writer::from_writer(out);
    let fail = |e: csv::Error| CliError::Input(Error::Io(e.to_string()));
    let header: Vec<String> = (0..batch.vector_dim()).map(|i| format!("dim{i}")).collect();
    w.write_record(&header).map_err(fail)?;
    for row in batch.rows() {
        w.write_record(row.iter().map(|v| format!("{v:e}"))).map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::Input(Error::Io(e.to_string())))
}

fn vendi(input: &Path, kernel: KernelArg, bandwidth: Option<f64>, out: &mut dyn Write) -> CmdResult {
    let batch = read_batch(input)?;
    let kind = match kernel {
        KernelArg::Cosine => KernelKind::Cosine,
        KernelArg::Rbf => KernelKind::Rbf {
            bandwidth: bandwidth.ok_or_else(|| CliError::Usage("--kernel rbf needs --bandwidth".into()))?,
        },
    };
    let value = entropy_and_score(&kind.gram(&batch)?)?;
    emit(out, &serde_json::json!({ "entropy": value.entropy, "score": value.score }))
}

/// Normwise relative error `max|analytic - fd| / max|fd|` of the entropy
/// gradient of one batch under central differences.
pub fn gradient_error(batch: &ContextBatch, fd_step: f64) -> crate::error::Result<f64> {
    let analytic = entropy_gradient(batch)?;
    let (b, nd) = (batch.batch_size(), batch.vector_dim());
    let base = batch.as_slice().to_vec();
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for idx in 0..base.len() {
        let mut x = base.clone();
        x[idx] = base[idx] + fd_step;
        let hp = batch_diversity(&ContextBatch::new(b, nd, x.clone())?)?.entropy;
        x[idx] = base[idx] - fd_step;
        let hm = batch_diversity(&ContextBatch::new(b, nd, x)?)?.entropy;
        let fd = (hp - hm) / (2.0 * fd_step);
        worst = worst.max((analytic.as_slice()[idx] - fd).abs());
        scale = scale.max(fd.abs());
    }
    Ok(worst / scale.max(f64::MIN_POSITIVE))
}

fn grad_check(batch: usize, dim: usize, seeds: u64, fd_step: f64, out: &mut dyn Write) -> CmdResult {
    if batch < 2 || dim == 0 || seeds == 0 || !(fd_step > 0.0) {
        return Err(CliError::Usage("grad-check needs --batch >= 2, --dim >= 1, --seeds >= 1, --fd-step > 0".into()));
    }
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let data = SplitMix64::new(seed).normals(batch * dim);
        worst = worst.max(gradient_error(&ContextBatch::new(batch, dim, data)?, fd_step)?);
    }
    let passed = worst <= GRAD_CHECK_LIMIT;
    emit(
        out,
        &serde_json::json!({
            "batch": batch, "dim": dim, "seeds": seeds, "fd_step": fd_step,
            "max_rel_error": worst, "passed": passed,
        }),
    )?;
    if passed {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "max relative error {worst:e} exceeds {GRAD_CHECK_LIMIT:e}"
        )))
    }
}

fn repulse_file(input: &Path, eta: f64, steps: usize, normalize: bool, path: Option<&Path>, out: &mut dyn Write) -> CmdResult {
    let batch = read_batch(input)?;
    let cfg = if normalize {
        RepulsionConfig::normalized(eta, steps)
    } else {
        RepulsionConfig::raw(eta, steps)
    };
    let moved = repulse(&batch, &cfg)?;
    with_sink(path, out, |w| write_batch(&moved, w))
}

/// Method of `kind` with the parameters in `cfg`.
pub fn method_for(cfg: &ExperimentConfig, kind: MethodKind) -> Method {
    match kind {
        MethodKind::None => Method::None,
        MethodKind::Contextual => Method::Contextual(cfg.repulsion.clone()),
        MethodKind::Latent => Method::Latent(cfg.latent.clone()),
        MethodKind::Cads => Method::Cads(cfg.cads.clone()),
    }
}

/// One flow run: batch of `batch` samples from `seed`.
pub fn flow_run(cfg: &ExperimentConfig, method: &Method, batch: usize, seed: u64) -> crate::error::Result<RunMetrics> {
    let runs = sample_batch(&cfg.world, &cfg.prompts(batch), method, seed)?;
    evaluate(&runs, &cfg.world)
}

#[derive(Debug, Serialize)]
struct RunRecord {
    run: usize,
    seed: u64,
    method: MethodKind,
    batch: usize,
    #[serde(flatten)]
    metrics: RunMetrics,
}

fn simulate(cfg: &ExperimentConfig, jobs: usize, path: Option<&Path>, out: &mut dyn Write) -> CmdResult {
    let method = method_for(cfg, cfg.method);
    let records = ordered(jobs, cfg.seeds.len(), |run| {
        let seed = cfg.seeds[run];
        Ok(RunRecord {
            run,
            seed,
            method: cfg.method,
            batch: cfg.batch,
            metrics: flow_run(cfg, &method, cfg.batch, seed)?,
        })
    })?;
    with_sink(path, out, |w| records.iter().try_for_each(|r| emit(w, r)))
}

/// Seed-averaged flow metrics for one sweep setting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowSweepRow {
    pub axis: String,
    pub setting: String,
    pub runs: usize,
    pub vendi_rbf: f64,
    pub mode_coverage: f64,
    pub off_manifold_rate: f64,
    pub mean_nearest_mode_distance: f64,
    pub avg_pair_vendi: f64,
}

fn average(axis: &str, setting: String, metrics: &[RunMetrics]) -> FlowSweepRow {
    let n = metrics.len() as f64;
    let mean = |f: &dyn Fn(&RunMetrics) -> f64| metrics.iter().map(f).sum::<f64>() / n;
    FlowSweepRow {
        axis: axis.to_string(),
        setting,
        runs: metrics.len(),
        vendi_rbf: mean(&|m| m.vendi_rbf),
        mode_coverage: mean(&|m| m.mode_coverage as f64),
        off_manifold_rate: mean(&|m| m.off_manifold_rate),
        mean_nearest_mode_distance: mean(&|m| m.mean_nearest_mode_distance),
        avg_pair_vendi: mean(&|m| m.avg_pair_vendi),
    }
}

/// Seed-averaged toy-transformer diversity for one block group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockSweepRow {
    pub axis: String,
    pub setting: String,
    pub runs: usize,
    /// Final text-token Vendi with repulsion on the block group.
    pub text_vendi: f64,
    /// Final image-token Vendi with repulsion on the block group.
    pub image_vendi: f64,
    /// Final text-token Vendi without repulsion.
    pub text_vendi_baseline: f64,
}

fn stream_vendi(states: &[TokenState], text: bool) -> crate::error::Result<f64> {
    let rows: Vec<Vec<f64>> = states
        .iter()
        .map(|s| if text { s.text.clone() } else { s.image.clone() })
        .collect();
    Ok(batch_diversity(&ContextBatch::from_rows(&rows)?)?.score)
}

/// Toy batch for one seed: shared prompt, per-sample image noise.
pub fn toy_inputs(cfg: &ExperimentConfig, seed: u64) -> crate::error::Result<Vec<TokenState>> {
    let prompt = PromptEncoding::new(&cfg.toy, cfg.toy_prompt_id, seed);
    (0..cfg.toy_batch)
        .map(|i| TokenState::new(&cfg.toy, &prompt, SplitMix64::derived(seed, i as u64).next_u64()))
        .collect()
}

/// Flow sweep over timestep intervals (`Timestep`) or batch sizes (`Batch`),
/// or toy-transformer sweep over block groups (`Blocks`).
pub fn sweep_flow(cfg: &ExperimentConfig, axis: AxisArg, jobs: usize) -> CmdResult<Vec<FlowSweepRow>> {
    let settings: Vec<(String, Method, usize)> = match axis {
        AxisArg::Timestep => cfg
            .sweep
            .intervals
            .iter()
            .map(|&iv| {
                let mut base = method_for(cfg, cfg.method);
                match &mut base {
                    Method::Contextual(r) | Method::Latent(r) => r.timestep_interval = iv,
                    Method::Cads(c) => c.interval = iv,
                    Method::None => {}
                }
                (iv.to_string(), base, cfg.batch)
            })
            .collect(),
        AxisArg::Batch => cfg
            .sweep
            .batch_sizes
            .iter()
            .map(|&b| (b.to_string(), method_for(cfg, cfg.method), b))
            .collect(),
        AxisArg::Blocks => return Err(CliError::Usage("block sweeps run on the toy transformer".into())),
    };
    let n_seeds = cfg.seeds.len();
    let metrics = ordered(jobs, settings.len() * n_seeds, |run| {
        let (_, method, b) = &settings[run / n_seeds];
        Ok(flow_run(cfg, method, *b, cfg.seeds[run % n_seeds])?)
    })?;
    let name = match axis {
        AxisArg::Timestep => "timestep",
        _ => "batch",
    };
    Ok(settings
        .into_iter()
        .zip(metrics.chunks(n_seeds))
        .map(|((label, _, _), chunk)| average(name, label, chunk))
        .collect())
}

pub fn sweep_blocks(cfg: &ExperimentConfig, jobs: usize) -> CmdResult<Vec<BlockSweepRow>> {
    let model = ToyDiT::new(cfg.toy.clone())?;
    let n_seeds = cfg.seeds.len();
    let per_run = ordered(jobs, cfg.sweep.blocks.len() * n_seeds, |run| {
        let selector = &cfg.sweep.blocks[run / n_seeds];
        let inputs = toy_inputs(cfg, cfg.seeds[run % n_seeds])?;
        let rep = cfg.toy_repulsion.clone().with_blocks(selector.clone());
        let on = model.forward_with_hooks(&inputs, Some(&rep), StepContext::SINGLE)?;
        let off = model.forward_with_hooks(&inputs, None, StepContext::SINGLE)?;
        Ok([
            stream_vendi(&on.final_states, true)?,
            stream_vendi(&on.final_states, false)?,
            stream_vendi(&off.final_states, true)?,
        ])
    })?;
    Ok(cfg
        .sweep
        .blocks
        .iter()
        .zip(per_run.chunks(n_seeds))
        .map(|(sel, chunk)| {
            let n = chunk.len() as f64;
            let mean = |k: usize| chunk.iter().map(|r| r[k]).sum::<f64>() / n;
            BlockSweepRow {
                axis: "blocks".into(),
                setting: sel.to_string(),
                runs: chunk.len(),
                text_vendi: mean(0),
                image_vendi: mean(1),
                text_vendi_baseline: mean(2),
            }
        })
        .collect())
}

fn write_rows<T: Serialize>(rows: &[T], out: &mut dyn Write) -> CmdResult {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| CliError::Input(Error::Io(e.to_string())))?;
    }
    w.flush().map_err(|e| CliError::Input(Error::Io(e.to_string())))
}

fn ablate(cfg: &ExperimentConfig, axis: AxisArg, jobs: usize, path: Option<&Path>, out: &mut dyn Write) -> CmdResult {
    if cfg.seeds.is_empty() {
        return Err(CliError::Usage("ablate needs at least one seed".into()));
    }
    match axis {
        AxisArg::Blocks => {
            let rows = sweep_blocks(cfg, jobs)?;
            with_sink(path, out, |w| write_rows(&rows, w))
        }
        _ => {
            let rows = sweep_flow(cfg, axis, jobs)?;
            with_sink(path, out, |w| write_rows(&rows, w))
        }
    }
}

#[derive(Debug, Serialize)]
struct BlockReport {
    block: usize,
    kind: &'static str,
    text_vendi_off: f64,
    text_vendi_on: f64,
    image_vendi_off: f64,
    image_vendi_on: f64,
}

fn toy_run(cfg: &ExperimentConfig, dir: Option<&Path>, out: &mut dyn Write) -> CmdResult {
    let model = ToyDiT::new(cfg.toy.clone())?;
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    let inputs = toy_inputs(cfg, seed)?;
    let off = model.forward_with_hooks(&inputs, None, StepContext::SINGLE)?;
    let on = model.forward_with_hooks(&inputs, Some(&cfg.toy_repulsion), StepContext::SINGLE)?;
    let mut report = Vec::new();
    for block in 0..off.snapshots.len() {
        report.push(BlockReport {
            block,
            kind: if model.is_dual(block) { "dual" } else { "single" },
            text_vendi_off: stream_vendi(&off.snapshots[block], true)?,
            text_vendi_on: stream_vendi(&on.snapshots[block], true)?,
            image_vendi_off: stream_vendi(&off.snapshots[block], false)?,
            image_vendi_on: stream_vendi(&on.snapshots[block], false)?,
        });
    }
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for (name, run) in [("snapshots_off.csv", &off), ("snapshots_on.csv", &on)] {
            let p: PathBuf = dir.join(name);
            let mut w = create(&p)?;
            write_snapshots_csv(run, cfg.toy.token_dim, &mut w)?;
        }
        let p = dir.join("report.jsonl");
        let mut w = create(&p)?;
        report.iter().try_for_each(|r| emit(&mut w, r))?;
        w.flush().map_err(|e| io_err(&p, e))?;
    }
    report.iter().try_for_each(|r| emit(out, r))
}

#[derive(Debug, Serialize)]
struct TrajectoryRow {
    run: &'static str,
    sample: usize,
    step: usize,
    t: f64,
    x: f64,
    y: f64,
}

fn steer(
    cfg: &ExperimentConfig,
    source_seed: u64,
    target_seed: u64,
    spec: &SteeringSpec,
    path: Option<&Path>,
    out: &mut dyn Write,
) -> CmdResult {
    let method = method_for(cfg, cfg.method);
    let result = steer_flow(&cfg.world, &cfg.prompts(cfg.batch), &method, source_seed, target_seed, spec)?;
    let mut rows = Vec::new();
    for (name, runs) in [("steered", &result.steered), ("target", &result.target)] {
        for (sample, traj) in runs.iter().enumerate() {
            for (step, (t, z)) in traj.times.iter().zip(&traj.latents).enumerate() {
                rows.push(TrajectoryRow {
                    run: name,
                    sample,
                    step,
                    t: *t,
                    x: z[0],
                    y: z[1],
                });
            }
        }
    }
    match path {
        Some(p) => {
            let mut w = create(p)?;
            write_rows(&rows, &mut w)?;
            let d = result.target_mode_distances(&cfg.world);
            emit(
                out,
                &serde_json::json!({
                    "alpha": spec.alpha,
                    "space": spec.space.to_string(),
                    "mean_target_mode_distance": d.iter().sum::<f64>() / d.len() as f64,
                }),
            )
        }
        None => write_rows(&rows, out),
    }
}
