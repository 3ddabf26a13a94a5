//! Command implementations and the run-config document.
//!
//! Every command writes `run_meta.json` (config, seeds, checkpoint
//! fingerprints, tuned rates, artifact version — never wall-clock data) into
//! its output directory; reruns with an identical `run_meta.json` produce
//! byte-identical CSV artifacts. Timing goes to `timing.log`, which is
//! excluded from that contract.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::baselines::{HessianDiagMode, SolverKind, StepRule};
use crate::eval::{
    self, run_benchmark, BenchmarkOptions, BenchmarkResult, CosineMode, SuiteProblem,
};
use crate::lsr1::{Lsr1Config, RunOptions, Trajectory};
use crate::metatrain::{self, MetaConfig, MetaRecord, TrainOutcome};
use crate::model::{container_summary, LsrOneModel, ModelConfig};
use crate::objectives::{quadratic_diagonal, quadratic_random, BenchmarkObjective, ObjectiveKind};
use crate::rng::Rng;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown preset '{0}'; available: {1}")]
    UnknownPreset(String, String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Meta(#[from] crate::metatrain::MetaError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Objective(#[from] crate::objectives::ObjectiveError),
    #[error(transparent)]
    Baseline(#[from] crate::baselines::BaselineError),
    #[error(transparent)]
    Optimizer(#[from] crate::lsr1::Lsr1Error),
}

// --- Run configuration ---

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct MetatrainSection {
    pub unroll_steps: usize,
    pub batch_size: usize,
    pub meta_iterations: usize,
    pub meta_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adamw_eps: f64,
    pub lambda_sec: f64,
    pub val_size: usize,
    pub val_every: usize,
    /// Save the trainer state every this many iterations (0 = only at end).
    pub checkpoint_every: usize,
}

impl Default for MetatrainSection {
    fn default() -> Self {
        Self {
            unroll_steps: 16,
            batch_size: 128,
            meta_iterations: 10_000,
            meta_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            adamw_eps: 1e-8,
            lambda_sec: 100.0,
            val_size: 32,
            val_every: 100,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct ObjectivesSection {
    pub family: ObjectiveKind,
    pub dim: usize,
    /// Condition-number bound on training draws; absent = unconstrained.
    pub max_cond_train: Option<f64>,
    pub max_cond_val: Option<f64>,
    pub x0_lo: f64,
    pub x0_hi: f64,
}

impl Default for ObjectivesSection {
    fn default() -> Self {
        Self {
            family: ObjectiveKind::Quadratic,
            dim: 2,
            max_cond_train: None,
            max_cond_val: Some(1000.0),
            x0_lo: -2.0,
            x0_hi: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct SeedsSection {
    pub train: u64,
    pub validation: u64,
    pub model: u64,
}

impl Default for SeedsSection {
    fn default() -> Self {
        Self { train: 1, validation: 1000, model: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct EvalSection {
    pub test_dims: Vec<usize>,
    pub quad_conds: Vec<f64>,
    pub suite_seed: u64,
    /// Buffer capacity at test time (may differ from training).
    pub test_buffer_capacity: usize,
    /// Inner steps per solver; absent = 4x the training unroll length.
    pub step_budget: Option<usize>,
    pub tau_max: f64,
    pub tau_samples: usize,
    pub cosine: bool,
    pub cosine_mode: CosineMode,
    pub solvers: Vec<String>,
    pub lsr1_checkpoint: Option<String>,
    pub lsr1_noproj_checkpoint: Option<String>,
    /// Write one CSV per (problem, solver) trajectory.
    pub save_trajectories: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            test_dims: vec![10, 20],
            quad_conds: vec![1.0, 100.0, 1000.0, 10000.0],
            suite_seed: 555,
            test_buffer_capacity: 8,
            step_budget: None,
            tau_max: 20.0,
            tau_samples: 200,
            cosine: false,
            cosine_mode: CosineMode::Displacement,
            solvers: vec!["lsr1".into(), "lsr1-noproj".into(), "lbfgs".into(), "adam".into()],
            lsr1_checkpoint: None,
            lsr1_noproj_checkpoint: None,
            save_trajectories: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct BaselinesSection {
    pub lbfgs_memory: usize,
    /// Fixed rates; absent = tuned on a held-out seed and recorded.
    pub lbfgs_lr: Option<f64>,
    pub adam_lr: Option<f64>,
    pub sr1_lr: Option<f64>,
    pub adahessian_lr: Option<f64>,
    pub adahessian_mode: HessianDiagMode,
}

impl Default for BaselinesSection {
    fn default() -> Self {
        Self {
            lbfgs_memory: 10,
            lbfgs_lr: None,
            adam_lr: None,
            sr1_lr: None,
            adahessian_lr: None,
            adahessian_mode: HessianDiagMode::Analytic,
        }
    }
}

/// The declarative run configuration. Defaults reproduce the quadratic
/// recipe, so `train` with no overrides runs that experiment. Unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct RunConfig {
    pub output_dir: Option<String>,
    pub model: ModelConfig,
    pub lsr1: Lsr1Config,
    pub metatrain: MetatrainSection,
    pub objectives: ObjectivesSection,
    pub eval: EvalSection,
    pub baselines: BaselinesSection,
    pub seeds: SeedsSection,
}

impl RunConfig {
    pub fn to_meta_config(&self) -> MetaConfig {
        MetaConfig {
            unroll_steps: self.metatrain.unroll_steps,
            batch_size: self.metatrain.batch_size,
            meta_iterations: self.metatrain.meta_iterations,
            meta_lr: self.metatrain.meta_lr,
            beta1: self.metatrain.beta1,
            beta2: self.metatrain.beta2,
            weight_decay: self.metatrain.weight_decay,
            adamw_eps: self.metatrain.adamw_eps,
            lambda_sec: self.metatrain.lambda_sec,
            detach_secant: self.lsr1.detach_secant,
            objective: self.objectives.family,
            dim: self.objectives.dim,
            max_cond_train: self.objectives.max_cond_train,
            max_cond_val: self.objectives.max_cond_val,
            x0_lo: self.objectives.x0_lo,
            x0_hi: self.objectives.x0_hi,
            buffer_capacity: self.lsr1.buffer_capacity,
            include_identity: self.lsr1.include_identity,
            train_seed: self.seeds.train,
            val_seed: self.seeds.validation,
            val_size: self.metatrain.val_size,
            val_every: self.metatrain.val_every,
            model_seed: self.seeds.model,
            model: self.model.clone(),
        }
    }

    pub fn step_budget(&self) -> usize {
        self.eval.step_budget.unwrap_or(4 * self.metatrain.unroll_steps)
    }
}

// --- Presets ---

pub const PRESETS: &[(&str, &str)] = &[
    ("quadratic-paper", include_str!("../presets/quadratic-paper.toml")),
    ("quadratic-desk", include_str!("../presets/quadratic-desk.toml")),
    ("profiles-quadratics", include_str!("../presets/profiles-quadratics.toml")),
    ("profiles-rosenbrock", include_str!("../presets/profiles-rosenbrock.toml")),
    ("profiles-rastrigin", include_str!("../presets/profiles-rastrigin.toml")),
    ("profiles-desk", include_str!("../presets/profiles-desk.toml")),
];

pub fn preset_names() -> String {
    PRESETS.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
}

pub fn load_preset(name: &str) -> Result<RunConfig, CliError> {
    let (_, text) = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| CliError::UnknownPreset(name.to_string(), preset_names()))?;
    parse_config(text)
}

pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

/// Resolve a config from preset/path plus dotted-key overrides
/// (`section.key=value`). Overrides are merged into the TOML document first,
/// so typos are still rejected by the schema.
pub fn resolve_config(
    preset: Option<&str>,
    config_path: Option<&Path>,
    overrides: &[String],
) -> Result<RunConfig, CliError> {
    let base_text = match (preset, config_path) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config("pass either --preset or --config, not both".into()))
        }
        (Some(name), None) => {
            PRESETS
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| CliError::UnknownPreset(name.to_string(), preset_names()))?
                .1
                .to_string()
        }
        (None, Some(path)) => std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?,
        (None, None) => String::new(),
    };

    let mut doc: toml::Value = toml::from_str(&base_text)
        .map_err(|e| CliError::Config(format!("invalid TOML: {e}")))?;
    for ov in overrides {
        apply_override(&mut doc, ov)?;
    }
    let text = toml::to_string(&doc).map_err(|e| CliError::Config(e.to_string()))?;
    parse_config(&text)
}

fn apply_override(doc: &mut toml::Value, spec: &str) -> Result<(), CliError> {
    let (path, raw_value) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{spec}' must look like key=value")))?;
    let parsed: toml::Value = toml::from_str(&format!("v = {raw_value}"))
        .or_else(|_| toml::from_str(&format!("v = \"{raw_value}\"")))
        .map_err(|e| CliError::Config(format!("cannot parse override value '{raw_value}': {e}")))?;
    let value = parsed.get("v").cloned().expect("just parsed");

    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut node = doc;
    for key in &keys[..keys.len() - 1] {
        if !node.is_table() {
            return Err(CliError::Config(format!("override path '{path}' crosses a non-table")));
        }
        let table = node.as_table_mut().unwrap();
        node = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| CliError::Config(format!("override path '{path}' crosses a non-table")))?;
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

// --- run_meta.json ---

/// FNV-1a over file bytes; hex string. Stable fingerprints for run metadata.
pub fn file_fingerprint(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)?;
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    Ok(format!("{h:016x}"))
}

#[derive(serde::Serialize)]
struct RunMeta<'a> {
    artifact_version: &'static str,
    command: &'a str,
    config: &'a RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint_fingerprints: Option<Vec<(String, String)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tuned_rates: Option<&'a [(String, String, f64)]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    extra: Option<&'a serde_json::Value>,
}

fn write_run_meta(
    dir: &Path,
    command: &str,
    config: &RunConfig,
    fingerprints: Option<Vec<(String, String)>>,
    tuned: Option<&[(String, String, f64)]>,
    extra: Option<&serde_json::Value>,
) -> Result<(), CliError> {
    let meta = RunMeta {
        artifact_version: env!("CARGO_PKG_VERSION"),
        command,
        config,
        checkpoint_fingerprints: fingerprints,
        tuned_rates: tuned,
        extra,
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| CliError::Config(format!("cannot serialize run meta: {e}")))?;
    std::fs::write(dir.join("run_meta.json"), json + "\n")?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Output directory: explicit `--out`, else a timestamped directory under
/// the output root (`LSR1_OUT_ROOT`, then the config's `output-dir`, then
/// `./runs`).
pub fn resolve_out_dir(out: Option<&Path>, config: &RunConfig, command: &str) -> PathBuf {
    if let Some(p) = out {
        return p.to_path_buf();
    }
    let root = std::env::var("LSR1_OUT_ROOT")
        .ok()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| "runs".to_string());
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    PathBuf::from(root).join(format!("{command}-{stamp}"))
}

// --- CSV helpers ---

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content)?;
    Ok(())
}

/// The meta-training log CSV. Wall time deliberately stays out of the CSV
/// (it lives in `timing.log`); everything else is deterministic.
pub fn metarecord_csv(records: &[MetaRecord]) -> String {
    let mut out = String::from(
        "iteration,train_meta_loss,train_mean_final_f,train_mean_secant_residual,val_meta_loss,val_mean_final_f,val_mean_secant_residual\n",
    );
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iteration,
            fmt_f64(r.train_meta_loss),
            fmt_f64(r.train_mean_final_f),
            fmt_f64(r.train_mean_secant_residual),
            fmt_opt(r.val_meta_loss),
            fmt_opt(r.val_mean_final_f),
            fmt_opt(r.val_mean_secant_residual),
        );
    }
    out
}

/// Trajectory CSV: `k, f, grad_norm, dir_norm, alpha_min, alpha_max,
/// secant_residual[, cosine_to_newton][, x0..x{N-1}]`. Row `k = 0` carries
/// the initial point.
pub fn trajectory_csv(traj: &Trajectory, cosine: Option<&[f64]>, with_points: bool) -> String {
    let n = traj.initial_point.len();
    let mut header =
        String::from("k,f,grad_norm,dir_norm,alpha_min,alpha_max,secant_residual");
    if cosine.is_some() {
        header.push_str(",cosine_to_newton");
    }
    if with_points {
        for i in 0..n {
            let _ = write!(header, ",x{i}");
        }
    }
    let mut out = header + "\n";

    let mut row = |k: usize,
                   f: f64,
                   g: Option<f64>,
                   d: Option<f64>,
                   amin: Option<f64>,
                   amax: Option<f64>,
                   res: Option<f64>,
                   cos: Option<f64>,
                   point: Option<&[f64]>| {
        let mut line = format!(
            "{k},{},{},{},{},{},{}",
            fmt_f64(f),
            fmt_opt(g),
            fmt_opt(d),
            fmt_opt(amin),
            fmt_opt(amax),
            fmt_opt(res)
        );
        if cosine.is_some() {
            line.push(',');
            line.push_str(&fmt_opt(cos));
        }
        if with_points {
            if let Some(p) = point {
                for v in p {
                    line.push(',');
                    line.push_str(&fmt_f64(*v));
                }
            } else {
                for _ in 0..n {
                    line.push(',');
                }
            }
        }
        out.push_str(&line);
        out.push('\n');
    };

    row(
        0,
        traj.initial_value,
        None,
        None,
        None,
        None,
        None,
        None,
        Some(&traj.initial_point),
    );
    for k in 0..traj.values.len() {
        let point: Option<&[f64]> = if k + 1 == traj.values.len() {
            Some(&traj.final_point)
        } else if !traj.pre_points.is_empty() && k + 1 < traj.pre_points.len() {
            Some(&traj.pre_points[k + 1])
        } else {
            None
        };
        row(
            k + 1,
            traj.values[k],
            Some(traj.grad_norms[k]),
            Some(traj.dir_norms[k]),
            Some(traj.alpha_min[k]),
            Some(traj.alpha_max[k]),
            Some(traj.residuals[k]),
            cosine.and_then(|c| c.get(k).copied()),
            point,
        );
    }
    out
}

/// `profiles.csv`: tau grid rows, one rho column per solver.
pub fn profiles_csv(result: &BenchmarkResult, tau_max: f64, samples: usize) -> String {
    let mut out = String::from("tau");
    for s in &result.solvers {
        let _ = write!(out, ",rho_{s}");
    }
    out.push('\n');
    let samples = samples.max(2);
    for i in 0..samples {
        let tau = 1.0 + (tau_max - 1.0) * i as f64 / (samples - 1) as f64;
        let _ = write!(out, "{}", fmt_f64(tau));
        for s in 0..result.solvers.len() {
            let _ = write!(out, ",{}", fmt_f64(result.table.rho(s, tau)));
        }
        out.push('\n');
    }
    out
}

/// `measures.csv`: problem x solver measure matrix.
pub fn measures_csv(result: &BenchmarkResult) -> String {
    let mut out = String::from("problem");
    for s in &result.solvers {
        let _ = write!(out, ",m_{s}");
    }
    out.push('\n');
    for (p, name) in result.problems.iter().enumerate() {
        let _ = write!(out, "{name}");
        for s in 0..result.solvers.len() {
            let _ = write!(out, ",{}", fmt_f64(result.table.measures[p][s]));
        }
        out.push('\n');
    }
    out
}

/// `ratios.csv`: problem x solver performance ratios.
pub fn ratios_csv(result: &BenchmarkResult) -> String {
    let mut out = String::from("problem");
    for s in &result.solvers {
        let _ = write!(out, ",r_{s}");
    }
    out.push('\n');
    for (p, name) in result.problems.iter().enumerate() {
        let _ = write!(out, "{name}");
        for s in 0..result.solvers.len() {
            let _ = write!(out, ",{}", fmt_f64(result.table.ratios[p][s]));
        }
        out.push('\n');
    }
    out
}

/// `cosine_trace.csv`: per-step set-mean cosine per solver.
pub fn cosine_csv(result: &BenchmarkResult) -> String {
    let steps = result
        .cosine_traces
        .iter()
        .flatten()
        .map(|t| t.mean_cosine.len())
        .max()
        .unwrap_or(0);
    let mut out = String::from("step");
    for s in &result.solvers {
        let _ = write!(out, ",cos_{s},valid_{s}");
    }
    out.push('\n');
    for k in 0..steps {
        let _ = write!(out, "{}", k + 1);
        for t in &result.cosine_traces {
            match t {
                Some(t) if k < t.mean_cosine.len() => {
                    let _ = write!(out, ",{},{}", fmt_f64(t.mean_cosine[k]), t.valid[k]);
                }
                _ => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

// --- Commands ---

pub struct TrainArtifacts {
    pub out_dir: PathBuf,
    pub outcome: TrainOutcome,
}

/// `train`: run meta-training, write checkpoints, the log CSV, and metadata.
pub fn cmd_train(
    config: &RunConfig,
    out: Option<&Path>,
    mut progress: Option<&mut dyn FnMut(&MetaRecord)>,
) -> Result<TrainArtifacts, CliError> {
    let out_dir = resolve_out_dir(out, config, "train");
    ensure_dir(&out_dir)?;
    let meta_cfg = config.to_meta_config();

    let started = std::time::Instant::now();
    let checkpoint_every = config.metatrain.checkpoint_every;
    let state_path = out_dir.join("trainer_state.ckpt");
    let mut last_saved = 0usize;

    let outcome = {
        let mut sink = |r: &MetaRecord| {
            if let Some(p) = progress.as_mut() {
                p(r);
            }
        };
        // Periodic state saving happens after training for simplicity unless
        // a cadence is requested; cadence > 0 re-runs train in segments.
        if checkpoint_every == 0 {
            metatrain::train(&meta_cfg, &mut sink)?
        } else {
            let mut state = metatrain::TrainerState {
                model: LsrOneModel::init(meta_cfg.model.clone(), meta_cfg.model_seed),
                adamw: metatrain::AdamWState::new(&LsrOneModel::init(
                    meta_cfg.model.clone(),
                    meta_cfg.model_seed,
                )),
                iteration: 0,
            };
            let mut records = Vec::new();
            let mut best: Option<(f64, usize, LsrOneModel)> = None;
            loop {
                let target =
                    (state.iteration + checkpoint_every).min(meta_cfg.meta_iterations);
                let seg_cfg = MetaConfig { meta_iterations: target, ..meta_cfg.clone() };
                let out = metatrain::train_from(&seg_cfg, state, &mut sink)?;
                records.extend(out.records);
                if best.as_ref().map_or(true, |(b, _, _)| out.best_val_meta_loss < *b) {
                    best = Some((out.best_val_meta_loss, out.best_iteration, out.best_model));
                }
                state = out.final_state;
                metatrain::save_trainer_state(&state_path, &state)?;
                last_saved = state.iteration;
                if state.iteration >= meta_cfg.meta_iterations {
                    let (bv, bi, bm) = best.unwrap();
                    break TrainOutcome {
                        final_state: state,
                        best_model: bm,
                        best_val_meta_loss: bv,
                        best_iteration: bi,
                        records,
                    };
                }
            }
        }
    };

    if last_saved != outcome.final_state.iteration {
        metatrain::save_trainer_state(&state_path, &outcome.final_state)?;
    }
    outcome.final_state.model.save_checkpoint(&out_dir.join("final.ckpt"))?;
    outcome.best_model.save_checkpoint(&out_dir.join("best.ckpt"))?;
    write_file(&out_dir.join("metatrain_log.csv"), &metarecord_csv(&outcome.records))?;
    write_file(
        &out_dir.join("timing.log"),
        &format!("total_wall_time_s {}\n", started.elapsed().as_secs_f64()),
    )?;
    let extra = serde_json::json!({
        "best_iteration": outcome.best_iteration,
        "best_val_meta_loss": outcome.best_val_meta_loss,
    });
    write_run_meta(&out_dir, "train", config, None, None, Some(&extra))?;
    Ok(TrainArtifacts { out_dir, outcome })
}

/// Objective spec strings: `rosenbrock:n=2`, `rastrigin:n=10`,
/// `quad-diag:n=10,cond=100`, `quad-random:n=2,seed=7[,max-cond=1000]`.
pub fn parse_objective_spec(spec: &str) -> Result<BenchmarkObjective, CliError> {
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    let mut n: Option<usize> = None;
    let mut cond: Option<f64> = None;
    let mut seed: Option<u64> = None;
    let mut max_cond: Option<f64> = None;
    for part in rest.split(',').filter(|p| !p.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("bad objective field '{part}'")))?;
        match key {
            "n" => n = Some(value.parse().map_err(|e| CliError::Config(format!("bad n: {e}")))?),
            "cond" => {
                cond = Some(value.parse().map_err(|e| CliError::Config(format!("bad cond: {e}")))?)
            }
            "seed" => {
                seed = Some(value.parse().map_err(|e| CliError::Config(format!("bad seed: {e}")))?)
            }
            "max-cond" => {
                max_cond =
                    Some(value.parse().map_err(|e| CliError::Config(format!("bad max-cond: {e}")))?)
            }
            other => return Err(CliError::Config(format!("unknown objective field '{other}'"))),
        }
    }
    let n = n.ok_or_else(|| CliError::Config("objective spec needs n=<dim>".into()))?;
    match kind {
        "rosenbrock" => Ok(BenchmarkObjective::rosenbrock(n)?),
        "rastrigin" => Ok(BenchmarkObjective::rastrigin(n)?),
        "quad-diag" => {
            let cond = cond.ok_or_else(|| CliError::Config("quad-diag needs cond=<c>".into()))?;
            Ok(BenchmarkObjective::Quadratic(quadratic_diagonal(n, cond)?))
        }
        "quad-random" => {
            let seed = seed.ok_or_else(|| CliError::Config("quad-random needs seed=<s>".into()))?;
            let mut rng = Rng::seed_from_u64(seed);
            Ok(BenchmarkObjective::Quadratic(quadratic_random(n, &mut rng, max_cond)?))
        }
        other => Err(CliError::Config(format!(
            "unknown objective kind '{other}' (rosenbrock, rastrigin, quad-diag, quad-random)"
        ))),
    }
}

pub struct TraceArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub solver: &'a str,
    pub objective_spec: &'a str,
    pub x0_seed: u64,
    pub steps: usize,
    pub buffer_capacity: usize,
    pub include_identity: bool,
    pub lr: Option<f64>,
    pub lbfgs_memory: usize,
}

/// `trace`: one solver on one objective; writes `trajectory.csv` with the
/// per-step cosine-to-Newton column.
pub fn cmd_trace(
    args: &TraceArgs,
    config: &RunConfig,
    out: Option<&Path>,
) -> Result<PathBuf, CliError> {
    let out_dir = resolve_out_dir(out, config, "trace");
    ensure_dir(&out_dir)?;
    let objective = parse_objective_spec(args.objective_spec)?;
    let n = objective.dim();
    let mut rng = Rng::seed_from_u64(args.x0_seed);
    let x0 = rng.uniform_vec(n, config.objectives.x0_lo, config.objectives.x0_hi);

    let kind = SolverKind::from_name(args.solver)?;
    let mut fingerprints = Vec::new();
    let traj = match kind {
        SolverKind::Lsr1 | SolverKind::Lsr1Noproj => {
            let path = args.checkpoint.ok_or_else(|| {
                CliError::Config(format!("solver '{}' needs --checkpoint", args.solver))
            })?;
            fingerprints.push((path.display().to_string(), file_fingerprint(path)?));
            let model = LsrOneModel::load_checkpoint(path)?;
            crate::lsr1::run(
                &model,
                &objective,
                &x0,
                &RunOptions {
                    steps: args.steps,
                    buffer_capacity: args.buffer_capacity,
                    include_identity: args.include_identity,
                    record_vectors: true,
                },
            )?
        }
        SolverKind::Lbfgs => {
            let rule = match args.lr {
                Some(lr) => StepRule::Fixed(lr),
                None => match &objective {
                    BenchmarkObjective::Quadratic(_) => StepRule::ExactQuadratic,
                    _ => StepRule::Fixed(0.01),
                },
            };
            crate::baselines::run_lbfgs(&objective, &x0, args.steps, args.lbfgs_memory, rule, true)?
        }
        SolverKind::Adam => {
            crate::baselines::run_adam(&objective, &x0, args.steps, args.lr.unwrap_or(0.1), true)
        }
        SolverKind::Sr1 => {
            let rule = match args.lr {
                Some(lr) => StepRule::Fixed(lr),
                None => match &objective {
                    BenchmarkObjective::Quadratic(_) => StepRule::ExactQuadratic,
                    _ => StepRule::Fixed(0.01),
                },
            };
            crate::baselines::run_sr1(&objective, &x0, args.steps, rule, true)?
        }
        SolverKind::Adahessian => crate::baselines::run_adahessian(
            &objective,
            &x0,
            args.steps,
            args.lr.unwrap_or(0.1),
            config.baselines.adahessian_mode,
            true,
        ),
    };

    let trace = eval::cosine_to_newton(&traj, &objective, config.eval.cosine_mode);
    let cosines: Vec<f64> = trace
        .mean_cosine
        .iter()
        .zip(&trace.valid)
        .map(|(c, v)| if *v > 0 { *c } else { f64::NAN })
        .collect();
    write_file(
        &out_dir.join("trajectory.csv"),
        &trajectory_csv(&traj, Some(&cosines), true),
    )?;
    let extra = serde_json::json!({
        "solver": args.solver,
        "objective": args.objective_spec,
        "x0_seed": args.x0_seed,
        "steps": args.steps,
        "buffer_capacity": args.buffer_capacity,
        "skipped_singular": trace.skipped_singular,
    });
    write_run_meta(
        &out_dir,
        "trace",
        config,
        (!fingerprints.is_empty()).then_some(fingerprints),
        None,
        Some(&extra),
    )?;
    Ok(out_dir)
}

/// Build the solver specs named in the config (checkpoints required for the
/// learned entries).
pub fn build_solver_specs(config: &RunConfig) -> Result<Vec<eval::SolverSpec>, CliError> {
    let mut specs = Vec::new();
    for name in &config.eval.solvers {
        let kind = SolverKind::from_name(name)?;
        let spec = match kind {
            SolverKind::Lsr1 | SolverKind::Lsr1Noproj => {
                let path = if kind == SolverKind::Lsr1 {
                    config.eval.lsr1_checkpoint.as_ref()
                } else {
                    config.eval.lsr1_noproj_checkpoint.as_ref()
                }
                .ok_or_else(|| {
                    CliError::Config(format!("solver '{name}' needs a checkpoint path in [eval]"))
                })?;
                let model = LsrOneModel::load_checkpoint(Path::new(path))?;
                eval::SolverSpec::Learned {
                    kind,
                    model,
                    buffer_capacity: config.eval.test_buffer_capacity,
                    include_identity: config.lsr1.include_identity,
                }
            }
            SolverKind::Lbfgs => eval::SolverSpec::Lbfgs {
                memory: config.baselines.lbfgs_memory,
                rule: config.baselines.lbfgs_lr.map(StepRule::Fixed),
            },
            SolverKind::Adam => eval::SolverSpec::Adam { lr: config.baselines.adam_lr },
            SolverKind::Sr1 => {
                eval::SolverSpec::Sr1 { rule: config.baselines.sr1_lr.map(StepRule::Fixed) }
            }
            SolverKind::Adahessian => eval::SolverSpec::AdaHessian {
                lr: config.baselines.adahessian_lr,
                mode: config.baselines.adahessian_mode,
            },
        };
        specs.push(spec);
    }
    Ok(specs)
}

pub struct ProfileArtifacts {
    pub out_dir: PathBuf,
    pub result: BenchmarkResult,
}

/// `profile`: build the suite, run every solver, write profile artifacts.
pub fn cmd_profile(config: &RunConfig, out: Option<&Path>) -> Result<ProfileArtifacts, CliError> {
    let out_dir = resolve_out_dir(out, config, "profile");
    ensure_dir(&out_dir)?;
    let started = std::time::Instant::now();

    let suite: Vec<SuiteProblem> = eval::build_suite(
        &config.eval.test_dims,
        &config.eval.quad_conds,
        config.eval.suite_seed,
        (config.objectives.x0_lo, config.objectives.x0_hi),
    )?;
    let specs = build_solver_specs(config)?;
    let opts = BenchmarkOptions {
        step_budget: config.step_budget(),
        cosine: config.eval.cosine,
        cosine_mode: config.eval.cosine_mode,
        ..BenchmarkOptions::default()
    };
    let result = run_benchmark(&suite, &specs, &opts)?;

    write_file(
        &out_dir.join("profiles.csv"),
        &profiles_csv(&result, config.eval.tau_max, config.eval.tau_samples),
    )?;
    write_file(&out_dir.join("measures.csv"), &measures_csv(&result))?;
    write_file(&out_dir.join("ratios.csv"), &ratios_csv(&result))?;
    if config.eval.cosine {
        write_file(&out_dir.join("cosine_trace.csv"), &cosine_csv(&result))?;
    }
    if config.eval.save_trajectories {
        let tdir = out_dir.join("trajectories");
        ensure_dir(&tdir)?;
        for (p, prow) in result.trajectories.iter().enumerate() {
            for (s, traj) in prow.iter().enumerate() {
                if let Some(t) = traj {
                    let name =
                        format!("{}__{}.csv", result.problems[p], result.solvers[s]);
                    write_file(&tdir.join(name), &trajectory_csv(t, None, false))?;
                }
            }
        }
    }
    write_file(
        &out_dir.join("timing.log"),
        &format!("total_wall_time_s {}\n", started.elapsed().as_secs_f64()),
    )?;

    let mut fingerprints = Vec::new();
    for path in [&config.eval.lsr1_checkpoint, &config.eval.lsr1_noproj_checkpoint]
        .into_iter()
        .flatten()
    {
        fingerprints.push((path.clone(), file_fingerprint(Path::new(path))?));
    }
    write_run_meta(
        &out_dir,
        "profile",
        config,
        (!fingerprints.is_empty()).then_some(fingerprints),
        Some(&result.tuned_rates),
        None,
    )?;
    Ok(ProfileArtifacts { out_dir, result })
}

/// `inspect`: human-readable checkpoint summary.
pub fn cmd_inspect(checkpoint: &Path) -> Result<String, CliError> {
    let (meta, manifest) = container_summary(checkpoint)?;
    let total: usize = manifest.iter().map(|(_, r, c)| r * c).sum();
    let fingerprint = file_fingerprint(checkpoint)?;
    let mut out = String::new();
    let _ = writeln!(out, "format version: 1");
    let _ = writeln!(out, "config fingerprint: {fingerprint}");
    let _ = writeln!(out, "metadata: {meta}");
    let _ = writeln!(out, "layers ({}):", manifest.len());
    for (name, rows, cols) in &manifest {
        let _ = writeln!(out, "  {name}  {rows}x{cols}");
    }
    let _ = writeln!(out, "parameter count: {total}");
    Ok(out)
}
