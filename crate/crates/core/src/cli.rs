//! Experiment orchestration: train/attack/measure pipelines, the full sweep
//! with cached, atomically committed outputs, correlation summaries, and
//! per-figure plot-data emission.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::attacks::{self, atomic_write, AdvSet, AttackConfig, AttackKind, NormKind};
use crate::data::{glyphset_generate, Dataset};
use crate::metrics;
use crate::model::{self, ArchId, ParamSet};
use crate::stats;
use crate::training::{self, Mechanism, TrainConfig};

/// Command failures carry the process exit code: 1 validation, 2 runtime,
/// 3 failed `report --check`.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
    CheckFailed(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
            CliError::CheckFailed(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::CheckFailed(_) => 3,
        }
    }
}

fn rt<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// Evaluation samples drawn from the test split for attacks.
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    #[serde(default = "default_arch")]
    pub surrogate_arch: String,
    #[serde(default = "default_targets")]
    pub target_archs: Vec<String>,
    #[serde(default = "default_target_seed_base")]
    pub target_seed_base: u64,
    #[serde(default = "default_seeds")]
    pub surrogate_seeds: Vec<u64>,
    pub cells: Vec<CellSpec>,
    #[serde(default)]
    pub train: TrainOverrides,
    #[serde(default)]
    pub attack: AttackSpec,
    #[serde(default)]
    pub metrics: MetricsSpec,
}

fn default_n_train() -> usize {
    600
}
fn default_n_test() -> usize {
    300
}
fn default_n_eval() -> usize {
    100
}
fn default_arch() -> String {
    "mlp_s".into()
}
fn default_targets() -> Vec<String> {
    vec!["mlp_s".into(), "mlp_l".into()]
}
fn default_target_seed_base() -> u64 {
    1000
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// One sweep cell family: a mechanism plus the grid of its magnitude
/// parameter (eps for AT, lambda for IR/JR/ER, rho for SAM, tau for the
/// augmentations; ignored for ST).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub mechanism: String,
    #[serde(default)]
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub peak_lr: Option<f64>,
    pub momentum: Option<f64>,
    pub warmup_epochs: Option<usize>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default = "default_norm")]
    pub norm: String,
    #[serde(default = "default_eps_grid")]
    pub eps: Vec<f64>,
    #[serde(default = "default_attack_steps")]
    pub steps: usize,
    #[serde(default = "default_true")]
    pub random_start: bool,
    #[serde(default)]
    pub targeted: bool,
}

fn default_kind() -> String {
    "pgd".into()
}
fn default_norm() -> String {
    "linf".into()
}
fn default_eps_grid() -> Vec<f64> {
    vec![4.0 / 255.0, 8.0 / 255.0, 16.0 / 255.0]
}
fn default_attack_steps() -> usize {
    40
}
fn default_true() -> bool {
    true
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            kind: default_kind(),
            norm: default_norm(),
            eps: default_eps_grid(),
            steps: default_attack_steps(),
            random_start: true,
            targeted: false,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSpec {
    #[serde(default = "default_metric_samples")]
    pub n_samples: usize,
    #[serde(default = "default_power_iters")]
    pub power_iters: usize,
    #[serde(default = "default_power_tol")]
    pub power_tol: f64,
}

fn default_metric_samples() -> usize {
    40
}
fn default_power_iters() -> usize {
    30
}
fn default_power_tol() -> f64 {
    1e-4
}

impl Default for MetricsSpec {
    fn default() -> Self {
        MetricsSpec {
            n_samples: default_metric_samples(),
            power_iters: default_power_iters(),
            power_tol: default_power_tol(),
        }
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    let cfg: ExperimentConfig = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Validation(format!("config schema: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        ArchId::from_name(&self.surrogate_arch)
            .ok_or_else(|| CliError::Validation(format!("unknown arch {}", self.surrogate_arch)))?;
        for t in &self.target_archs {
            ArchId::from_name(t)
                .ok_or_else(|| CliError::Validation(format!("unknown target arch {t}")))?;
        }
        if self.cells.is_empty() {
            return Err(CliError::Validation("no sweep cells configured".into()));
        }
        for c in &self.cells {
            let m = Mechanism::from_name(&c.mechanism)
                .ok_or_else(|| CliError::Validation(format!("unknown mechanism {}", c.mechanism)))?;
            if m != Mechanism::St && c.params.is_empty() {
                return Err(CliError::Validation(format!(
                    "mechanism {} needs a parameter grid",
                    c.mechanism
                )));
            }
        }
        AttackKind::from_name(&self.attack.kind)
            .ok_or_else(|| CliError::Validation(format!("unknown attack {}", self.attack.kind)))?;
        NormKind::from_name(&self.attack.norm)
            .ok_or_else(|| CliError::Validation(format!("unknown norm {}", self.attack.norm)))?;
        if self.n_eval == 0 || self.n_eval > self.n_test {
            return Err(CliError::Validation(format!(
                "n_eval {} outside 1..={}",
                self.n_eval, self.n_test
            )));
        }
        if self.metrics.n_samples > self.n_test {
            return Err(CliError::Validation(
                "metrics.n_samples exceeds the test split".into(),
            ));
        }
        Ok(())
    }

    fn datasets(&self) -> Result<(Dataset, Dataset), CliError> {
        glyphset_generate(self.seed, self.n_train, self.n_test).map_err(rt)
    }

    fn train_config(&self, mechanism: Mechanism, param: f64, seed: u64) -> TrainConfig {
        let arch = ArchId::from_name(&self.surrogate_arch).expect("validated");
        let mut cfg = TrainConfig::new(arch, mechanism, seed);
        if let Some(v) = self.train.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.train.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.train.peak_lr {
            cfg.peak_lr = v;
        }
        if let Some(v) = self.train.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = self.train.warmup_epochs {
            cfg.warmup_epochs = v;
        }
        apply_param(&mut cfg, mechanism, param);
        cfg
    }
}

/// Routes a cell's magnitude parameter to the mechanism's knob.
pub fn apply_param(cfg: &mut TrainConfig, mechanism: Mechanism, param: f64) {
    match mechanism {
        Mechanism::St => {}
        Mechanism::At => cfg.eps_adv = param,
        Mechanism::Mu | Mechanism::Cm | Mechanism::Co | Mechanism::Ls => cfg.tau = param as u32,
        Mechanism::Ir => cfg.lambda_ir = param,
        Mechanism::Jr => cfg.lambda_jr = param,
        Mechanism::Er => cfg.lambda_er = param,
        Mechanism::Sam => cfg.rho = param,
        Mechanism::SamIr => cfg.lambda_ir = param,
        Mechanism::SamJr => cfg.lambda_jr = param,
    }
}

// ---------------------------------------------------------------------------
// Cached artifacts

fn config_hash<T: serde::Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("serializable config");
    let mut h = Sha256::new();
    h.update(&json);
    let digest = h.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Trains (or loads from cache) one model checkpoint. The checkpoint and its
/// per-epoch JSON log live under `out/models` keyed by the config hash; a
/// cached entry with a different echoed config is a hash-collision error.
fn train_cached(
    out: &Path,
    label: &str,
    cfg: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<(ParamSet, PathBuf), CliError> {
    let dir = out.join("models");
    std::fs::create_dir_all(&dir).map_err(rt)?;
    let hash = config_hash(cfg);
    let stem = format!("{label}_{hash}");
    let ckpt = dir.join(format!("{stem}.ckpt"));
    let echo = dir.join(format!("{stem}.json"));
    if ckpt.exists() {
        let stored = std::fs::read_to_string(&echo).map_err(rt)?;
        let expect = serde_json::to_string_pretty(cfg).map_err(rt)?;
        if stored != expect {
            return Err(CliError::Runtime(format!(
                "config hash collision at {}",
                ckpt.display()
            )));
        }
        return Ok((model::load_expect(&ckpt, cfg.arch).map_err(rt)?, ckpt));
    }
    let (params, logs) = training::train(cfg, train_set, test_set).map_err(rt)?;
    let tmp = ckpt.with_extension("ckpt.tmp");
    model::save(&params, &tmp).map_err(rt)?;
    std::fs::rename(&tmp, &ckpt).map_err(rt)?;
    let mut log_lines = String::new();
    for l in &logs {
        log_lines.push_str(&serde_json::to_string(l).map_err(rt)?);
        log_lines.push('\n');
    }
    atomic_write(&dir.join(format!("{stem}.log.jsonl")), log_lines.as_bytes()).map_err(rt)?;
    atomic_write(
        &echo,
        serde_json::to_string_pretty(cfg).map_err(rt)?.as_bytes(),
    )
    .map_err(rt)?;
    Ok((params, ckpt))
}

fn attack_cached(
    out: &Path,
    label: &str,
    cfg: &AttackConfig,
    surrogate: &ParamSet,
    x: &crate::tensor::Tensor,
    labels: &[usize],
) -> Result<AdvSet, CliError> {
    let hash = config_hash(cfg);
    let dir = out.join("advsets").join(format!("{label}_{hash}"));
    if dir.join("meta.json").exists() {
        return AdvSet::load(&dir).map_err(rt);
    }
    let set = attacks::attack(&[surrogate], x, labels, cfg).map_err(rt)?;
    set.save(&dir).map_err(rt)?;
    Ok(set)
}

// ---------------------------------------------------------------------------
// Measurement

pub const CSV_HEADER: &str = "mechanism,tau,param_value,seed,surrogate_arch,target_arch,norm,eps,asr_u,asr_t,fool_prob,nat_risk_s,nat_risk_t,smooth_mean,smooth_max,sim_mean,sim_min,c_f,c_g,bound";

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub mechanism: String,
    pub tau: u32,
    pub param_value: f64,
    pub seed: u64,
    pub surrogate_arch: String,
    pub target_arch: String,
    pub norm: NormKind,
    pub eps: f64,
    pub asr_u: f64,
    pub asr_t: f64,
    pub fool_prob: f64,
    pub nat_risk_s: f64,
    pub nat_risk_t: f64,
    pub smooth_mean: f64,
    pub smooth_max: f64,
    pub sim_mean: f64,
    pub sim_min: f64,
    pub c_f: f64,
    pub c_g: f64,
    pub bound: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.mechanism,
            self.tau,
            self.param_value,
            self.seed,
            self.surrogate_arch,
            self.target_arch,
            self.norm.name(),
            self.eps,
            self.asr_u,
            self.asr_t,
            self.fool_prob,
            self.nat_risk_s,
            self.nat_risk_t,
            self.smooth_mean,
            self.smooth_max,
            self.sim_mean,
            self.sim_min,
            self.c_f,
            self.c_g,
            self.bound
        )
    }

    pub fn parse(line: &str) -> Result<MetricsRow, CliError> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 20 {
            return Err(CliError::Validation(format!(
                "CSV row has {} fields, expected 20",
                f.len()
            )));
        }
        let num = |s: &str| -> Result<f64, CliError> {
            s.parse()
                .map_err(|_| CliError::Validation(format!("bad number {s:?}")))
        };
        Ok(MetricsRow {
            mechanism: f[0].into(),
            tau: f[1]
                .parse()
                .map_err(|_| CliError::Validation(format!("bad tau {:?}", f[1])))?,
            param_value: num(f[2])?,
            seed: f[3]
                .parse()
                .map_err(|_| CliError::Validation(format!("bad seed {:?}", f[3])))?,
            surrogate_arch: f[4].into(),
            target_arch: f[5].into(),
            norm: NormKind::from_name(f[6])
                .ok_or_else(|| CliError::Validation(format!("bad norm {:?}", f[6])))?,
            eps: num(f[7])?,
            asr_u: num(f[8])?,
            asr_t: num(f[9])?,
            fool_prob: num(f[10])?,
            nat_risk_s: num(f[11])?,
            nat_risk_t: num(f[12])?,
            smooth_mean: num(f[13])?,
            smooth_max: num(f[14])?,
            sim_mean: num(f[15])?,
            sim_min: num(f[16])?,
            c_f: num(f[17])?,
            c_g: num(f[18])?,
            bound: num(f[19])?,
        })
    }
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        _ => return Err(CliError::Validation("missing or wrong CSV header".into())),
    }
    lines.map(MetricsRow::parse).collect()
}

/// All measurements for one (surrogate, target, advset) triple.
#[allow(clippy::too_many_arguments)]
pub fn measure(
    surrogate: &ParamSet,
    target: &ParamSet,
    set: &AdvSet,
    test_set: &Dataset,
    spec: &MetricsSpec,
    seed: u64,
) -> Result<MetricsRow, CliError> {
    let report = metrics::asr(surrogate, target, set).map_err(rt)?;
    let sm_f = metrics::model_smoothness(
        surrogate,
        test_set,
        spec.n_samples,
        spec.power_iters,
        spec.power_tol,
        seed,
    )
    .map_err(rt)?;
    let sm_g = metrics::model_smoothness(
        target,
        test_set,
        spec.n_samples,
        spec.power_iters,
        spec.power_tol,
        seed,
    )
    .map_err(rt)?;
    let sim = metrics::similarity_estimate(surrogate, target, test_set, spec.n_samples, seed)
        .map_err(rt)?;
    // the bound's eps is the L2 magnitude actually used; an L-inf attack's
    // effective radius is the largest realized per-sample L2 norm
    let eps_l2 = match set.norm {
        NormKind::L2 => set.eps,
        NormKind::Linf => set.max_l2_radius(),
    };
    let (c_f, c_g, bound) = if eps_l2 > 0.0 {
        match metrics::bound_terms(surrogate, target, set, sm_f.max, sm_g.max, eps_l2) {
            Ok((c_f, c_g)) => {
                let alpha = 1.0 - report.fool_prob;
                let bound = metrics::transfer_lower_bound(
                    alpha,
                    report.gamma_f,
                    report.gamma_g,
                    c_f,
                    c_g,
                    sim.min,
                    eps_l2,
                )
                .unwrap_or(f64::NAN);
                (c_f, c_g, bound)
            }
            Err(_) => (f64::NAN, f64::NAN, f64::NAN),
        }
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    Ok(MetricsRow {
        mechanism: String::new(),
        tau: 0,
        param_value: 0.0,
        seed,
        surrogate_arch: surrogate.arch.name().into(),
        target_arch: target.arch.name().into(),
        norm: set.norm,
        eps: set.eps,
        asr_u: report.asr_untargeted,
        asr_t: report.asr_targeted.unwrap_or(f64::NAN),
        fool_prob: report.fool_prob,
        nat_risk_s: report.gamma_f,
        nat_risk_t: report.gamma_g,
        smooth_mean: sm_f.mean,
        smooth_max: sm_f.max,
        sim_mean: sim.mean,
        sim_min: sim.min,
        c_f,
        c_g,
        bound,
    })
}

// ---------------------------------------------------------------------------
// Subcommand implementations (also the library surface used by tests)

fn mechanism_cells(cfg: &ExperimentConfig) -> Vec<(Mechanism, f64)> {
    let mut out = Vec::new();
    for cell in &cfg.cells {
        let m = Mechanism::from_name(&cell.mechanism).expect("validated");
        if m == Mechanism::St {
            out.push((m, 0.0));
        } else {
            for &p in &cell.params {
                out.push((m, p));
            }
        }
    }
    out
}

fn target_models(
    cfg: &ExperimentConfig,
    out: &Path,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<Vec<ParamSet>, CliError> {
    cfg.target_archs
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let arch = ArchId::from_name(name).expect("validated");
            let mut tc = TrainConfig::new(arch, Mechanism::St, cfg.target_seed_base + i as u64);
            if let Some(v) = cfg.train.epochs {
                tc.epochs = v;
            }
            if let Some(v) = cfg.train.batch_size {
                tc.batch_size = v;
            }
            if let Some(v) = cfg.train.peak_lr {
                tc.peak_lr = v;
            }
            if let Some(v) = cfg.train.warmup_epochs {
                tc.warmup_epochs = v;
            }
            Ok(train_cached(out, &format!("target_{name}"), &tc, train_set, test_set)?.0)
        })
        .collect()
}

/// `train`: materializes every checkpoint the sweep would use.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<usize, CliError> {
    let (train_set, test_set) = cfg.datasets()?;
    let mut count = target_models(cfg, out, &train_set, &test_set)?.len();
    for (mech, param) in mechanism_cells(cfg) {
        for &seed in &cfg.surrogate_seeds {
            let tc = cfg.train_config(mech, param, seed);
            train_cached(
                out,
                &format!("{}_{param}_{seed}", mech.name()),
                &tc,
                &train_set,
                &test_set,
            )?;
            count += 1;
        }
    }
    Ok(count)
}

/// `attack`: crafts one advset directory from an existing checkpoint.
pub fn cmd_attack(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    eps: f64,
    out_dir: &Path,
) -> Result<AdvSet, CliError> {
    let surrogate = model::load(checkpoint)
        .map_err(|e| CliError::Validation(format!("{}: {e}", checkpoint.display())))?;
    let (_, test_set) = cfg.datasets()?;
    let idx: Vec<usize> = (0..cfg.n_eval).collect();
    let (x, labels) = test_set.batch(&idx);
    let acfg = attack_config(cfg, eps);
    let set = attacks::attack(&[&surrogate], &x, &labels, &acfg).map_err(rt)?;
    set.save(out_dir).map_err(rt)?;
    Ok(set)
}

fn attack_config(cfg: &ExperimentConfig, eps: f64) -> AttackConfig {
    let mut acfg = AttackConfig::new(
        AttackKind::from_name(&cfg.attack.kind).expect("validated"),
        NormKind::from_name(&cfg.attack.norm).expect("validated"),
        eps,
        cfg.seed,
    );
    acfg.steps = cfg.attack.steps;
    acfg.random_start = cfg.attack.random_start;
    acfg.targeted = cfg.attack.targeted;
    acfg
}

/// `measure`: one CSV row (plus header) for explicit checkpoint/advset paths.
pub fn cmd_measure(
    cfg: &ExperimentConfig,
    surrogate: &Path,
    target: &Path,
    advset: &Path,
) -> Result<String, CliError> {
    let s = model::load(surrogate)
        .map_err(|e| CliError::Validation(format!("{}: {e}", surrogate.display())))?;
    let t = model::load(target)
        .map_err(|e| CliError::Validation(format!("{}: {e}", target.display())))?;
    let set = AdvSet::load(advset)
        .map_err(|e| CliError::Validation(format!("{}: {e}", advset.display())))?;
    let (_, test_set) = cfg.datasets()?;
    let row = measure(&s, &t, &set, &test_set, &cfg.metrics, cfg.seed)?;
    Ok(format!("{CSV_HEADER}\n{}\n", row.to_csv()))
}

/// `sweep`: the full grid — train all cells, attack at every eps, measure
/// against every target, and write `metrics.csv`. Cached outputs are skipped,
/// so re-running an up-to-date sweep does no training.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<PathBuf, CliError> {
    let (train_set, test_set) = cfg.datasets()?;
    let targets = target_models(cfg, out, &train_set, &test_set)?;
    let idx: Vec<usize> = (0..cfg.n_eval).collect();
    let (eval_x, eval_y) = test_set.batch(&idx);

    let cells: Vec<(Mechanism, f64, u64)> = mechanism_cells(cfg)
        .into_iter()
        .flat_map(|(m, p)| cfg.surrogate_seeds.iter().map(move |&s| (m, p, s)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(rt)?;
    let rows: Result<Vec<Vec<MetricsRow>>, CliError> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(mech, param, seed)| {
                let tc = cfg.train_config(mech, param, seed);
                let label = format!("{}_{param}_{seed}", mech.name());
                let (surrogate, _) = train_cached(out, &label, &tc, &train_set, &test_set)?;
                let mut rows = Vec::new();
                for &eps in &cfg.attack.eps {
                    let acfg = attack_config(cfg, eps);
                    let set =
                        attack_cached(out, &format!("{label}_{eps}"), &acfg, &surrogate, &eval_x, &eval_y)?;
                    for target in &targets {
                        let mut row =
                            measure(&surrogate, target, &set, &test_set, &cfg.metrics, seed)?;
                        row.mechanism = mech.name().into();
                        row.tau = tc.tau;
                        row.param_value = param;
                        row.seed = seed;
                        rows.push(row);
                    }
                }
                Ok(rows)
            })
            .collect()
    });
    let mut rows: Vec<MetricsRow> = rows?.into_iter().flatten().collect();
    rows.sort_by(|a, b| a.to_csv().cmp(&b.to_csv()));
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for r in &rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    let csv = out.join("metrics.csv");
    atomic_write(&csv, text.as_bytes()).map_err(rt)?;
    Ok(csv)
}

// ---------------------------------------------------------------------------
// Correlation study

#[derive(Debug, serde::Serialize)]
pub struct CorrelationGroup {
    pub target_arch: String,
    pub norm: String,
    pub eps: f64,
    pub n_rows: usize,
    /// Pearson r of each factor against untargeted ASR. The smoothness
    /// factor is correlated as -sigma_F (column MS-) so that "higher is
    /// better" holds uniformly.
    pub r_acc: Option<f64>,
    pub r_fp: Option<f64>,
    pub r_ms_neg: Option<f64>,
    pub r_gs: Option<f64>,
    pub p_gs: Option<f64>,
    /// R^2 of {MS-, GS}.
    pub r2_ms_gs: Option<f64>,
    /// R^2 of {Acc, FP, MS-, GS}.
    pub r2_all: Option<f64>,
}

pub fn correlate(rows: &[MetricsRow]) -> Vec<CorrelationGroup> {
    let mut groups: BTreeMap<(String, String, String), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.target_arch.clone(), r.norm.name().into(), format!("{}", r.eps)))
            .or_default()
            .push(r);
    }
    let mut out = Vec::new();
    for ((target, norm, _), rows) in groups {
        let n = rows.len();
        let acc: Vec<f64> = rows.iter().map(|r| 1.0 - r.nat_risk_s).collect();
        let fp: Vec<f64> = rows.iter().map(|r| r.fool_prob).collect();
        let ms: Vec<f64> = rows.iter().map(|r| -r.smooth_mean).collect();
        let gs: Vec<f64> = rows.iter().map(|r| r.sim_mean).collect();
        let asr: Vec<f64> = rows.iter().map(|r| r.asr_u).collect();
        let x2: Vec<f64> = rows.iter().flat_map(|r| [-r.smooth_mean, r.sim_mean]).collect();
        let x4: Vec<f64> = rows
            .iter()
            .flat_map(|r| [1.0 - r.nat_risk_s, r.fool_prob, -r.smooth_mean, r.sim_mean])
            .collect();
        out.push(CorrelationGroup {
            target_arch: target,
            norm,
            eps: rows[0].eps,
            n_rows: n,
            r_acc: stats::pearson(&acc, &asr).ok(),
            r_fp: stats::pearson(&fp, &asr).ok(),
            r_ms_neg: stats::pearson(&ms, &asr).ok(),
            r_gs: stats::pearson(&gs, &asr).ok(),
            p_gs: stats::permutation_p_value(&gs, &asr, 2000, 0).ok(),
            r2_ms_gs: stats::ols_r2(&x2, &asr, 2).ok(),
            r2_all: stats::ols_r2(&x4, &asr, 4).ok(),
        });
    }
    out
}

pub fn cmd_correlate(csv: &Path, out_json: &Path) -> Result<Vec<CorrelationGroup>, CliError> {
    let rows = read_csv(csv)?;
    let groups = correlate(&rows);
    let json = serde_json::to_string_pretty(&groups).map_err(rt)?;
    atomic_write(out_json, json.as_bytes()).map_err(rt)?;
    Ok(groups)
}

// ---------------------------------------------------------------------------
// Report (plot-data emission + acceptance-style checks)

fn mean_series<K: Ord + Clone, F: Fn(&MetricsRow) -> K, V: Fn(&MetricsRow) -> f64>(
    rows: &[MetricsRow],
    filter: impl Fn(&MetricsRow) -> bool,
    key: F,
    val: V,
) -> Vec<(K, f64)> {
    let mut acc: BTreeMap<K, (f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| filter(r)) {
        let v = val(r);
        if v.is_nan() {
            continue;
        }
        let e = acc.entry(key(r)).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (s, c))| (k, s / c as f64))
        .collect()
}

fn fmt_key(parts: &[String]) -> String {
    parts.join(",")
}

fn write_series(path: &Path, header: &str, series: &[(String, f64)]) -> Result<(), CliError> {
    let mut text = String::from(header);
    text.push('\n');
    for (k, v) in series {
        text.push_str(&format!("{k},{v}\n"));
    }
    atomic_write(path, text.as_bytes()).map_err(rt)
}

/// `report`: per-figure plot-data CSVs derived from the metrics table.
pub fn cmd_report(csv: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let rows = read_csv(csv)?;
    std::fs::create_dir_all(out).map_err(rt)?;
    let mut written = Vec::new();
    let aug = ["mu", "cm", "co", "ls"];
    let reg = ["ir", "jr", "er", "sam", "sam_ir", "sam_jr"];
    let figures: Vec<(&str, &str, Vec<(String, f64)>)> = vec![
        (
            "fig2_asr_vs_at_eps.csv",
            "at_eps,eval_eps,asr_u",
            mean_series(
                &rows,
                |r| r.mechanism == "at" || r.mechanism == "st",
                |r| fmt_key(&[format!("{}", r.param_value), format!("{}", r.eps)]),
                |r| r.asr_u,
            ),
        ),
        (
            "fig3_smoothness_vs_at_eps.csv",
            "at_eps,smooth_mean",
            mean_series(
                &rows,
                |r| r.mechanism == "at" || r.mechanism == "st",
                |r| format!("{}", r.param_value),
                |r| r.smooth_mean,
            ),
        ),
        (
            "fig4_similarity_vs_at_eps.csv",
            "at_eps,sim_mean",
            mean_series(
                &rows,
                |r| r.mechanism == "at" || r.mechanism == "st",
                |r| format!("{}", r.param_value),
                |r| r.sim_mean,
            ),
        ),
        (
            "figs5_8_augmentation_curves.csv",
            "mechanism,tau,sim_mean,smooth_mean",
            {
                let sim = mean_series(
                    &rows,
                    |r| aug.contains(&r.mechanism.as_str()),
                    |r| fmt_key(&[r.mechanism.clone(), format!("{}", r.tau)]),
                    |r| r.sim_mean,
                );
                let smooth = mean_series(
                    &rows,
                    |r| aug.contains(&r.mechanism.as_str()),
                    |r| fmt_key(&[r.mechanism.clone(), format!("{}", r.tau)]),
                    |r| r.smooth_mean,
                );
                sim.into_iter()
                    .zip(smooth)
                    .map(|((k, s), (_, m))| (format!("{k},{s}"), m))
                    .collect()
            },
        ),
        (
            "figs9_10_regularization_smoothness.csv",
            "mechanism,param_value,smooth_mean",
            mean_series(
                &rows,
                |r| reg.contains(&r.mechanism.as_str()),
                |r| fmt_key(&[r.mechanism.clone(), format!("{}", r.param_value)]),
                |r| r.smooth_mean,
            ),
        ),
        (
            "fig11_similarity_matrix.csv",
            "surrogate_arch,target_arch,sim_mean",
            mean_series(
                &rows,
                |_| true,
                |r| fmt_key(&[r.surrogate_arch.clone(), r.target_arch.clone()]),
                |r| r.sim_mean,
            ),
        ),
    ];
    for (name, header, series) in figures {
        let path = out.join(name);
        write_series(&path, header, &series)?;
        written.push(path);
    }
    Ok(written)
}

/// `report --check`: Theorem-1 soundness on every row where the bound is
/// defined, plus nested-R^2 monotonicity across correlation groups.
pub fn cmd_report_check(csv: &Path, n_eval: usize) -> Result<(), CliError> {
    let rows = read_csv(csv)?;
    let slack = 2.0 / (n_eval as f64).sqrt();
    for r in &rows {
        if r.bound.is_nan() {
            continue;
        }
        if r.bound > r.asr_u + slack {
            return Err(CliError::CheckFailed(format!(
                "bound {} exceeds ASR {} + slack {} ({} -> {} eps {})",
                r.bound, r.asr_u, slack, r.mechanism, r.target_arch, r.eps
            )));
        }
    }
    for g in correlate(&rows) {
        if let (Some(r2a), Some(r2b)) = (g.r2_ms_gs, g.r2_all) {
            if r2b < r2a - 1e-9 {
                return Err(CliError::CheckFailed(format!(
                    "nested R^2 violated for target {} eps {}: {} < {}",
                    g.target_arch, g.eps, r2b, r2a
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Argument parsing & dispatch

#[derive(Parser)]
#[command(name = "translab", about = "Adversarial transferability laboratory")]
struct Cli {
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the config's dataset/experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweep cells.
    #[arg(long, global = true, default_value_t = 4)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train every checkpoint in the configured grid.
    Train,
    /// Craft one adversarial set from a checkpoint.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        eps: f64,
    },
    /// Emit the metrics CSV row for one (surrogate, target, advset) triple.
    Measure {
        #[arg(long)]
        surrogate: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        advset: PathBuf,
    },
    /// Full grid: train, attack, measure; writes metrics.csv.
    Sweep,
    /// Pearson/OLS summary JSON from a metrics CSV.
    Correlate {
        #[arg(long)]
        csv: PathBuf,
    },
    /// Per-figure plot-data CSVs; --check validates soundness invariants.
    Report {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        check: bool,
    },
}

fn require_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Validation("--config is required".into()))?;
    let mut cfg = load_config(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Parses argv and executes; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version via this path with success codes
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<String, CliError> {
    match &cli.cmd {
        Cmd::Train => {
            let cfg = require_config(cli)?;
            let n = cmd_train(&cfg, &cli.out)?;
            Ok(format!("{n} checkpoints ready under {}", cli.out.display()))
        }
        Cmd::Attack { checkpoint, eps } => {
            let cfg = require_config(cli)?;
            let dir = cli.out.join("advset");
            let set = cmd_attack(&cfg, checkpoint, *eps, &dir)?;
            Ok(format!(
                "advset with {} samples written to {}",
                set.len(),
                dir.display()
            ))
        }
        Cmd::Measure {
            surrogate,
            target,
            advset,
        } => {
            let cfg = require_config(cli)?;
            cmd_measure(&cfg, surrogate, target, advset)
        }
        Cmd::Sweep => {
            let cfg = require_config(cli)?;
            let csv = cmd_sweep(&cfg, &cli.out, cli.jobs)?;
            Ok(format!("sweep complete: {}", csv.display()))
        }
        Cmd::Correlate { csv } => {
            let out = cli.out.join("correlations.json");
            std::fs::create_dir_all(&cli.out).map_err(rt)?;
            let groups = cmd_correlate(csv, &out)?;
            Ok(format!(
                "{} correlation groups written to {}",
                groups.len(),
                out.display()
            ))
        }
        Cmd::Report { csv, check } => {
            if *check {
                let n_eval = cli
                    .config
                    .as_ref()
                    .map(|p| load_config(p).map(|c| c.n_eval))
                    .transpose()?
                    .unwrap_or(default_n_eval());
                cmd_report_check(csv, n_eval)?;
                Ok("all report checks passed".into())
            } else {
                let files = cmd_report(csv, &cli.out)?;
                Ok(format!("{} figure data files written", files.len()))
            }
        }
    }
}
