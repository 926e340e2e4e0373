//! End-to-end stages: data generation, pretraining, skip analysis, injector
//! fine-tuning, evaluation and reporting. Every stage directory holds the
//! effective config (`config.toml`) and a `provenance.json` naming the stage
//! hash it was produced under; downstream stages refuse mismatched inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, Checkpoint, CheckpointError, CheckpointHeader};
use crate::config::{ConfigError, RunConfig};
use crate::dataset::{self, DatasetError};
use crate::env::{self, EnvError, EvalReport, HeightDist, ProbeSpec};
use crate::injector::{self, InjectorError};
use crate::policy::{DiffusionPolicy, InjectorRef};
use crate::seeding;
use crate::surgeon::{self, EvalSpec, InjectionPlan, PolicyScorer, SurgeonError};
use crate::train::{self, TrainError, TrainOutput};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing prerequisite {path}: run `{verb}` first")]
    Missing { path: PathBuf, verb: &'static str },
    #[error("{artifact} was produced by config {found}, current config hashes to {expected}")]
    ConfigHash { artifact: PathBuf, expected: String, found: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Training(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(CheckpointError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Surgeon(#[from] SurgeonError),
    #[error(transparent)]
    Injector(#[from] InjectorError),
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(PathBuf),
}

impl From<CheckpointError> for PipelineError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::ConfigHash { expected, found } => {
                PipelineError::ConfigHash { artifact: PathBuf::from("checkpoint"), expected, found }
            }
            other => PipelineError::Checkpoint(other),
        }
    }
}

impl PipelineError {
    /// Stable machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            PipelineError::Config(_) | PipelineError::Injector(_) => "config",
            PipelineError::Io { .. } => "io",
            PipelineError::Missing { .. } => "missing-prerequisite",
            PipelineError::ConfigHash { .. } => "config-hash",
            PipelineError::Dataset(_) => "dataset",
            PipelineError::Training(_) => "training",
            PipelineError::Checkpoint(_) => "checkpoint",
            PipelineError::Env(_) => "env",
            PipelineError::Surgeon(_) => "surgeon",
            PipelineError::Exists(_) => "exists",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(io_err(path))
}

fn read(path: &Path, verb: &'static str) -> Result<String, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::Missing { path: path.to_path_buf(), verb });
    }
    fs::read_to_string(path).map_err(io_err(path))
}

/// Artifact locations under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn stage_a(&self) -> PathBuf {
        self.data().join("stage_a")
    }
    pub fn stage_b(&self) -> PathBuf {
        self.data().join("stage_b")
    }
    pub fn expert(&self) -> PathBuf {
        self.root.join("expert")
    }
    pub fn expert_ck(&self) -> PathBuf {
        self.expert().join("expert.ck")
    }
    pub fn skip(&self) -> PathBuf {
        self.root.join("skip")
    }
    pub fn plan(&self) -> PathBuf {
        self.skip().join("injection_plan.toml")
    }
    pub fn injector(&self) -> PathBuf {
        self.root.join("injector")
    }
    pub fn arm_ck(&self, arm: &str, best: bool) -> PathBuf {
        let stem = arm.replace('-', "_");
        self.injector().join(if best { format!("{stem}.best.ck") } else { format!("{stem}.ck") })
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn experiment(&self) -> PathBuf {
        self.eval().join("experiment.json")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub stage_hash: String,
    pub config_hash: String,
    /// SHA-256 of the input artifacts this stage consumed.
    pub inputs: BTreeMap<String, String>,
}

const PROVENANCE: &str = "provenance.json";

/// Creates `dir`, refusing to clobber existing output unless `force`.
fn prepare(dir: &Path, force: bool) -> Result<(), PipelineError> {
    if dir.exists() {
        if !force {
            return Err(PipelineError::Exists(dir.to_path_buf()));
        }
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn finish(dir: &Path, cfg: &RunConfig, stage: &str, stage_hash: String, inputs: BTreeMap<String, String>) -> Result<(), PipelineError> {
    write(&dir.join("config.toml"), cfg.to_toml())?;
    let p = Provenance { stage: stage.into(), stage_hash, config_hash: cfg.config_hash(), inputs };
    write(&dir.join(PROVENANCE), serde_json::to_string_pretty(&p).expect("provenance serialises"))
}

/// Checks that `dir` was produced by `verb` under `expected`.
fn require(dir: &Path, verb: &'static str, expected: &str) -> Result<Provenance, PipelineError> {
    let path = dir.join(PROVENANCE);
    let p: Provenance = serde_json::from_str(&read(&path, verb)?)
        .map_err(|e| PipelineError::Io { path: path.clone(), source: std::io::Error::other(e) })?;
    if p.stage_hash != expected {
        return Err(PipelineError::ConfigHash { artifact: dir.to_path_buf(), expected: expected.into(), found: p.stage_hash });
    }
    Ok(p)
}

fn hash_file(path: &Path) -> Result<String, PipelineError> {
    checkpoint::file_hash(path).map_err(Into::into)
}

fn loss_csv(columns: &[(&str, &[f32])]) -> String {
    let mut s = String::from("step");
    for (name, _) in columns {
        s += ",";
        s += name;
    }
    s += "\n";
    let n = columns.iter().map(|(_, l)| l.len()).max().unwrap_or(0);
    for i in 0..n {
        let _ = write!(s, "{}", i + 1);
        for (_, l) in columns {
            match l.get(i) {
                Some(v) => {
                    let _ = write!(s, ",{v}");
                }
                None => s += ",",
            }
        }
        s += "\n";
    }
    s
}

pub type Log<'a> = &'a mut dyn FnMut(&str);

fn progress<'l>(log: &'l mut dyn FnMut(&str), label: &str, total: usize) -> impl FnMut(usize, f32) + 'l {
    let every = (total / 20).max(1);
    let mut acc = 0.0f64;
    let mut n = 0usize;
    let label = label.to_string();
    move |step, loss| {
        acc += loss as f64;
        n += 1;
        if (step + 1) % every == 0 || step + 1 == total {
            log(&format!("{label}: step {}/{total} loss {:.4}", step + 1, acc / n as f64));
            acc = 0.0;
            n = 0;
        }
    }
}

#[derive(Debug)]
pub struct DataSummary {
    pub stage_a: dataset::Manifest,
    pub stage_b: dataset::Manifest,
}

/// Stage-A demos (fixed height, no decoys) and stage-B demos (mixed heights, decoys).
pub fn gen_data(cfg: &RunConfig, force: bool, log: Log) -> Result<DataSummary, PipelineError> {
    let layout = Layout::new(&cfg.out_dir);
    let dir = layout.data();
    prepare(&dir, force)?;
    let hash = cfg.data_hash();
    let probe_a = ProbeSpec { table_height: cfg.data.stage_a_height.clone(), ..Default::default() };
    let a = dataset::generate_demos(cfg.data.stage_a_per_task, &probe_a, 0.0, seeding::derive_str(cfg.seed, "stage-a-data"), &cfg.env)?;
    let stage_a = dataset::write_dataset(&a, &layout.stage_a(), &hash)?;
    drop(a);
    log(&format!("stage A: {} episodes, {} steps", stage_a.episodes, stage_a.total_steps));
    let probe_b = ProbeSpec { table_height: cfg.data.stage_b_height.clone(), ..Default::default() };
    let b = dataset::generate_demos(
        cfg.data.stage_b_per_task,
        &probe_b,
        cfg.data.stage_b_decoy_fraction,
        seeding::derive_str(cfg.seed, "stage-b-data"),
        &cfg.env,
    )?;
    let stage_b = dataset::write_dataset(&b, &layout.stage_b(), &hash)?;
    log(&format!("stage B: {} episodes ({} decoys), {} steps", stage_b.episodes, stage_b.decoys, stage_b.total_steps));
    let mut inputs = BTreeMap::new();
    inputs.insert("stage_a/manifest.json".into(), hash_file(&layout.stage_a().join("manifest.json"))?);
    inputs.insert("stage_b/manifest.json".into(), hash_file(&layout.stage_b().join("manifest.json"))?);
    finish(&dir, cfg, "gen-data", hash, inputs)?;
    Ok(DataSummary { stage_a, stage_b })
}

fn read_stage(dir: &Path, provenance: &str) -> Result<dataset::Dataset, PipelineError> {
    let ds = dataset::read_dataset(dir)?;
    if ds.manifest.provenance != provenance {
        return Err(PipelineError::ConfigHash { artifact: dir.to_path_buf(), expected: provenance.into(), found: ds.manifest.provenance });
    }
    Ok(ds)
}

/// Pretrains the expert on the stage-A set.
pub fn train_expert(cfg: &RunConfig, force: bool, log: Log) -> Result<TrainOutput, PipelineError> {
    let layout = Layout::new(&cfg.out_dir);
    require(&layout.data(), "gen-data", &cfg.data_hash())?;
    let dir = layout.expert();
    prepare(&dir, force)?;
    let ds = read_stage(&layout.stage_a(), &cfg.data_hash())?;
    let stats = ds.manifest.norm_stats.clone();
    let hyper = &cfg.expert.train;
    let out = {
        let mut cb = progress(log, "expert", hyper.steps);
        train::train_stage_a(&ds.episodes, &stats, &cfg.expert.model, hyper, cfg.seed, &mut cb)?
    };
    let hash = cfg.expert_hash();
    let header = CheckpointHeader {
        arm: "expert".into(),
        expert_config: cfg.expert.model.clone(),
        injector_config: None,
        norm_stats: stats,
        rng: out.rng,
        config_hash: hash.clone(),
        stage_a_hash: None,
        injected_ids: Vec::new(),
        freeze_policy: None,
        steps: out.losses.len(),
        tensors: Vec::new(),
    };
    let ck = Checkpoint { header, expert: out.expert.clone(), injector: None };
    let ck_hash = ck.save(&layout.expert_ck())?;
    write(&dir.join("loss.csv"), loss_csv(&[("expert", &out.losses)]))?;
    let mut inputs = BTreeMap::new();
    inputs.insert("stage_a/manifest.json".into(), hash_file(&layout.stage_a().join("manifest.json"))?);
    inputs.insert("expert.ck".into(), ck_hash);
    finish(&dir, cfg, "train-expert", hash, inputs)?;
    Ok(out)
}

fn train_probe(cfg: &RunConfig) -> ProbeSpec {
    ProbeSpec { table_height: HeightDist::Fixed(cfg.eval.train_height), ..Default::default() }
}

/// Single-block and consecutive skip sweeps on the pretrained expert, then
/// injection-site selection.
pub fn skip_analysis(
    cfg: &RunConfig,
    force: bool,
    log: Log,
) -> Result<(surgeon::BlockImportanceReport, Result<InjectionPlan, SurgeonError>), PipelineError> {
    let layout = Layout::new(&cfg.out_dir);
    require(&layout.expert(), "train-expert", &cfg.expert_hash())?;
    let dir = layout.skip();
    prepare(&dir, force)?;
    let ck = Checkpoint::load(&layout.expert_ck(), Some(&cfg.expert_hash()))?;
    let spec = EvalSpec { probe: train_probe(cfg), episodes: cfg.surgeon.episodes, seeds: cfg.surgeon.seeds.clone() };
    let mut scorer = LoggingScorer {
        inner: PolicyScorer {
            expert: &ck.expert,
            cfg: &ck.header.expert_config,
            stats: &ck.header.norm_stats,
            env: &cfg.env,
            spec: &spec,
            exec_horizon: cfg.eval.exec_horizon,
        },
        log,
    };
    let mut report = surgeon::sweep_single(&mut scorer, Some(spec.clone()))?;
    let plan = surgeon::select_injection_blocks(&report, cfg.surgeon.epsilon, cfg.surgeon.max_count);
    if let Ok(p) = &plan {
        let start = p.block_ids[0];
        let width = cfg.surgeon.window_max.min(report.n_blocks - start);
        if width > 0 {
            surgeon::sweep_consecutive(&mut scorer, &mut report, start, width, cfg.surgeon.failure_floor)?;
        }
    }
    // The plan's provenance names the final report, consecutive windows included.
    let plan = plan.map(|p| InjectionPlan { provenance: report.hash(), ..p });
    write(&dir.join("report.json"), report.to_json())?;
    write(&dir.join("single.csv"), report.single_csv())?;
    write(&dir.join("consecutive.csv"), report.consecutive_csv())?;
    let mut summary = report.summary();
    match &plan {
        Ok(p) => {
            let _ = writeln!(summary, "injection blocks {:?} (epsilon {})", p.block_ids, p.epsilon);
            write(&layout.plan(), p.to_toml())?;
        }
        Err(e) => {
            let _ = writeln!(summary, "no injection plan: {e}");
        }
    }
    write(&dir.join("summary.txt"), &summary)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("expert.ck".into(), hash_file(&layout.expert_ck())?);
    finish(&dir, cfg, "skip-analysis", cfg.skip_hash(), inputs)?;
    Ok((report, plan))
}

struct LoggingScorer<'m, 'l> {
    inner: PolicyScorer<'m>,
    log: &'l mut dyn FnMut(&str),
}

impl surgeon::SkipScorer for LoggingScorer<'_, '_> {
    fn n_blocks(&self) -> usize {
        self.inner.n_blocks()
    }

    fn score(&mut self, skip: &[usize]) -> Result<f64, SurgeonError> {
        let s = self.inner.score(skip)?;
        (self.log)(&format!("skip {skip:?}: success {s:.3}"));
        Ok(s)
    }
}

#[derive(Debug)]
pub struct InjectorRun {
    pub block_ids: Vec<usize>,
    pub pc_injected: TrainOutput,
    pub ablation_2d: TrainOutput,
}

/// Fine-tunes both arms from the pretrained expert on the stage-B set: the
/// injected arm on the planned blocks and the 2D-only ablation with the same
/// freeze policy, batches and noise.
pub fn train_injector(cfg: &RunConfig, force: bool, log: Log) -> Result<InjectorRun, PipelineError> {
    let layout = Layout::new(&cfg.out_dir);
    require(&layout.data(), "gen-data", &cfg.data_hash())?;
    require(&layout.expert(), "train-expert", &cfg.expert_hash())?;
    let (ids, plan_hash) = if cfg.injector.block_ids.is_empty() {
        require(&layout.skip(), "skip-analysis", &cfg.skip_hash())?;
        let plan = InjectionPlan::from_toml(&read(&layout.plan(), "skip-analysis")?)?;
        (plan.block_ids, Some(hash_file(&layout.plan())?))
    } else {
        (cfg.injector.block_ids.clone(), None)
    };
    injector::check_block_ids(&ids, cfg.expert.model.n_blocks)?;
    let dir = layout.injector();
    prepare(&dir, force)?;
    let stage_a_hash = hash_file(&layout.expert_ck())?;
    let ck = Checkpoint::load(&layout.expert_ck(), Some(&cfg.expert_hash()))?;
    let ds = read_stage(&layout.stage_b(), &cfg.data_hash())?;
    let stats = &ck.header.norm_stats;
    let ecfg = &ck.header.expert_config;
    let policy = cfg.freeze_policy();
    let hyper = &cfg.injector.train;
    let hash = cfg.injector_hash();
    log(&format!("injecting into blocks {ids:?}"));
    let pc = {
        let mut cb = progress(log, "pc-injected", hyper.steps);
        train::train_stage_b(&ck.expert, ecfg, &policy, &cfg.injector.model, &ids, &ds.episodes, stats, hyper, cfg.seed, &mut cb)?
    };
    let ab = {
        let mut cb = progress(log, "ablation-2d", hyper.steps);
        train::train_ablation_2d(&ck.expert, ecfg, &policy, &ds.episodes, stats, hyper, cfg.seed, &mut cb)?
    };
    let header = |arm: &str, injected: bool, out: &TrainOutput, steps: usize| CheckpointHeader {
        arm: arm.into(),
        expert_config: ecfg.clone(),
        injector_config: injected.then(|| cfg.injector.model.clone()),
        norm_stats: stats.clone(),
        rng: out.rng,
        config_hash: hash.clone(),
        stage_a_hash: Some(stage_a_hash.clone()),
        injected_ids: if injected { ids.clone() } else { Vec::new() },
        freeze_policy: Some(policy.names()),
        steps,
        tensors: Vec::new(),
    };
    let mut inputs = BTreeMap::new();
    inputs.insert("expert.ck".into(), stage_a_hash.clone());
    inputs.insert("stage_b/manifest.json".into(), hash_file(&layout.stage_b().join("manifest.json"))?);
    if let Some(h) = plan_hash {
        inputs.insert("injection_plan.toml".into(), h);
    }
    for (arm, out, injected) in [("pc-injected", &pc, true), ("ablation-2d", &ab, false)] {
        let ck =
            Checkpoint { header: header(arm, injected, out, out.losses.len()), expert: out.expert.clone(), injector: out.injector.clone() };
        let h = ck.save(&layout.arm_ck(arm, false))?;
        inputs.insert(format!("{arm}.ck"), h);
        if let Some(best) = &out.best {
            let ck =
                Checkpoint { header: header(arm, injected, out, best.step), expert: best.expert.clone(), injector: best.injector.clone() };
            ck.save(&layout.arm_ck(arm, true))?;
        }
    }
    write(&dir.join("loss.csv"), loss_csv(&[("pc_injected", &pc.losses), ("ablation_2d", &ab.losses)]))?;
    finish(&dir, cfg, "train-injector", hash, inputs)?;
    Ok(InjectorRun { block_ids: ids, pc_injected: pc, ablation_2d: ab })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub probe: ProbeSpec,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub checkpoint: String,
    pub injected_ids: Vec<usize>,
    pub probes: BTreeMap<String, ProbeResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// Evaluation-stage hash of the producing config.
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub episodes: usize,
    pub exec_horizon: usize,
    /// Present only when best-loss checkpoints were evaluated.
    pub watermark: Option<String>,
    pub arms: BTreeMap<String, ArmResult>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn result(&self, arm: &str, probe: &str) -> Option<&EvalReport> {
        self.arms.get(arm)?.probes.get(probe).map(|p| &p.report)
    }

    /// Per-seed mean success, or refusal on decoy probes.
    pub fn headline(&self, arm: &str, probe: &str) -> Option<(f64, f64)> {
        let r = self.result(arm, probe)?;
        Some(if r.decoy { r.seed_refusal_mean_std() } else { r.seed_success_mean_std() })
    }

    /// `arm,probe,seed,...` with every per-seed row.
    pub fn seed_table(&self) -> String {
        let mut s = String::from("arm,probe,seed,episodes,successes,success_rate,refusals,refusal_rate\n");
        for (arm, a) in &self.arms {
            for (probe, p) in &a.probes {
                for r in &p.report.per_seed {
                    let t = &r.tally;
                    let _ = writeln!(
                        s,
                        "{arm},{probe},{},{},{},{:.6},{},{:.6}",
                        r.seed,
                        t.episodes,
                        t.successes,
                        t.success_rate(),
                        t.refusals,
                        t.refusal_rate()
                    );
                }
            }
        }
        s
    }

    pub fn summary(&self, arms: &[String], probes: &[String]) -> String {
        let mut s = String::from("# Experiment summary\n\n");
        if let Some(w) = &self.watermark {
            let _ = writeln!(s, "**{w}**\n");
        }
        let _ = writeln!(
            s,
            "config `{}`, seeds {:?}, {} episodes per seed, exec horizon {}\n",
            self.config_hash, self.seeds, self.episodes, self.exec_horizon
        );
        s += &summary_table(Some(self), arms, probes);
        s
    }
}

fn summary_table(report: Option<&ExperimentReport>, arms: &[String], probes: &[String]) -> String {
    let mut s = String::from("| arm |");
    for p in probes {
        let _ = write!(s, " {p} |");
    }
    s += "\n|---|";
    s += &"---|".repeat(probes.len());
    s += "\n";
    for arm in arms {
        let _ = write!(s, "| {arm} |");
        for p in probes {
            match report.and_then(|r| r.result(arm, p)) {
                Some(r) => {
                    let (m, sd) = if r.decoy { r.seed_refusal_mean_std() } else { r.seed_success_mean_std() };
                    let what = if r.decoy { "refusal" } else { "success" };
                    let _ = write!(s, " {what} {:.1}% ± {:.1} |", 100.0 * m, 100.0 * sd);
                }
                None => s += " absent |",
            }
        }
        s += "\n";
    }
    s
}

pub fn probe_names(cfg: &RunConfig) -> Vec<String> {
    cfg.eval.probes().into_iter().map(|(n, _)| n).collect()
}

/// Evaluates every requested arm on the multitask, height and decoy probes
/// with shared episode seeds.
pub fn eval(cfg: &RunConfig, force: bool, log: Log) -> Result<ExperimentReport, PipelineError> {
    let layout = Layout::new(&cfg.out_dir);
    let best = cfg.eval.best_checkpoint;
    let mut paths = Vec::new();
    for arm in &cfg.eval.arms {
        let (path, expected) = if arm == "stage-a" {
            require(&layout.expert(), "train-expert", &cfg.expert_hash())?;
            (layout.expert_ck(), cfg.expert_hash())
        } else {
            require(&layout.injector(), "train-injector", &cfg.injector_hash())?;
            (layout.arm_ck(arm, best), cfg.injector_hash())
        };
        if !path.exists() {
            return Err(PipelineError::Missing { path, verb: "train-injector" });
        }
        paths.push((arm.clone(), path, expected));
    }
    let dir = layout.eval();
    prepare(&dir, force)?;
    let mut arms = BTreeMap::new();
    let mut inputs = BTreeMap::new();
    for (arm, path, expected) in paths {
        let ck = Checkpoint::load(&path, Some(&expected))?;
        let ck_hash = hash_file(&path)?;
        inputs.insert(format!("{arm}.ck"), ck_hash.clone());
        let inj = match (&ck.injector, &ck.header.injector_config) {
            (Some(p), Some(c)) => Some(InjectorRef { params: p, cfg: c, ids: &ck.header.injected_ids }),
            _ => None,
        };
        let mut policy =
            DiffusionPolicy::new(&ck.expert, &ck.header.expert_config, &ck.header.norm_stats, inj, Vec::new(), cfg.eval.exec_horizon)
                .map_err(|e| PipelineError::Checkpoint(CheckpointError::Format(format!("{arm}: {e}"))))?;
        let mut probes = BTreeMap::new();
        for (name, probe) in cfg.eval.probes() {
            let report = env::evaluate_policy(&mut policy, &probe, cfg.eval.episodes, &cfg.eval.seeds, &cfg.env)?;
            log(&format!("{arm} / {name}: success {:.3} refusal {:.3}", report.success_rate, report.refusal_rate));
            write(&dir.join(format!("{}_{name}.csv", arm.replace('-', "_"))), report.to_csv())?;
            probes.insert(name, ProbeResult { probe, report });
        }
        arms.insert(arm, ArmResult { checkpoint: ck_hash, injected_ids: ck.header.injected_ids.clone(), probes });
    }
    let report = ExperimentReport {
        config_hash: cfg.eval_hash(),
        seeds: cfg.eval.seeds.clone(),
        episodes: cfg.eval.episodes,
        exec_horizon: cfg.eval.exec_horizon,
        watermark: best.then(|| "best-loss checkpoints evaluated, not the last checkpoint".to_string()),
        arms,
    };
    write(&layout.experiment(), report.to_json())?;
    write(&dir.join("seeds.csv"), report.seed_table())?;
    write(&dir.join("summary.md"), report.summary(&cfg.eval.arms, &probe_names(cfg)))?;
    finish(&dir, cfg, "eval", cfg.eval_hash(), inputs)?;
    Ok(report)
}

/// Markdown summary plus one CSV per figure: skip sweeps, probe bars and loss
/// curves. Missing inputs are reported as absent.
pub fn report(cfg: &RunConfig, force: bool) -> Result<String, PipelineError> {
    let layout = Layout::new(&cfg.out_dir);
    let dir = layout.report();
    prepare(&dir, force)?;
    let mut s = String::from("# Run report\n\n");
    let _ = writeln!(s, "config `{}`, seed {}\n", cfg.config_hash(), cfg.seed);

    s += "## Skip analysis\n\n";
    match fs::read_to_string(layout.skip().join("report.json")).ok().and_then(|t| surgeon::BlockImportanceReport::from_json(&t).ok()) {
        Some(r) => {
            write(&dir.join("fig_skip_single.csv"), r.single_csv())?;
            write(&dir.join("fig_skip_consecutive.csv"), r.consecutive_csv())?;
            s += "```\n";
            s += &r.summary();
            s += "```\n";
            if let Ok(t) = fs::read_to_string(layout.plan()) {
                if let Ok(p) = InjectionPlan::from_toml(&t) {
                    let _ = writeln!(s, "\ninjection blocks: {:?}", p.block_ids);
                }
            }
        }
        None => s += "absent\n",
    }

    s += "\n## Evaluation\n\n";
    let experiment = fs::read_to_string(layout.experiment()).ok().and_then(|t| ExperimentReport::from_json(&t).ok());
    let mut arms = cfg.eval.arms.clone();
    if let Some(e) = &experiment {
        if let Some(w) = &e.watermark {
            let _ = writeln!(s, "**{w}**\n");
        }
        arms.extend(e.arms.keys().filter(|a| !cfg.eval.arms.contains(a)).cloned());
        let mut bars = String::from("arm,probe,metric,mean,std\n");
        for (arm, a) in &e.arms {
            for (probe, p) in &a.probes {
                let r = &p.report;
                let (m, sd) = r.seed_success_mean_std();
                let _ = writeln!(bars, "{arm},{probe},success,{m:.6},{sd:.6}");
                let (m, sd) = r.seed_refusal_mean_std();
                let _ = writeln!(bars, "{arm},{probe},refusal,{m:.6},{sd:.6}");
            }
        }
        write(&dir.join("fig_probe_bars.csv"), bars)?;
    } else {
        s += "no experiment report found\n\n";
    }
    s += &summary_table(experiment.as_ref(), &arms, &probe_names(cfg));

    s += "\n## Training\n\n";
    let mut curves = Vec::new();
    for (name, path) in [("expert", layout.expert().join("loss.csv")), ("injector", layout.injector().join("loss.csv"))] {
        match fs::read_to_string(&path) {
            Ok(t) => {
                let rows = t.lines().count().saturating_sub(1);
                let _ = writeln!(s, "- {name}: {rows} steps");
                curves.push((name, t));
            }
            Err(_) => {
                let _ = writeln!(s, "- {name}: absent");
            }
        }
    }
    for (name, t) in curves {
        write(&dir.join(format!("fig_loss_{name}.csv")), t)?;
    }
    write(&dir.join("summary.md"), &s)?;
    Ok(s)
}

/// All stages in order.
pub fn run_all(cfg: &RunConfig, force: bool, log: Log) -> Result<ExperimentReport, PipelineError> {
    gen_data(cfg, force, log)?;
    train_expert(cfg, force, log)?;
    if cfg.injector.block_ids.is_empty() {
        let (_, plan) = skip_analysis(cfg, force, log)?;
        plan?;
    }
    train_injector(cfg, force, log)?;
    let r = eval(cfg, force, log)?;
    report(cfg, force)?;
    Ok(r)
}
