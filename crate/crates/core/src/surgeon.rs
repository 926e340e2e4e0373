//! Skip-block importance analysis and injection-site selection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::NormStats;
use crate::env::{self, EnvConfig, EnvError, ProbeSpec};
use crate::expert::ExpertConfig;
use crate::params::ParamStore;
use crate::policy::DiffusionPolicy;

#[derive(Debug, Error, PartialEq)]
pub enum SurgeonError {
    #[error("no block suffix has every degradation within epsilon {0}")]
    NoSafeBlocks(f64),
    #[error("max_count must be positive")]
    ZeroCount,
    #[error("window start {start} + width {width} exceeds {n_blocks} blocks")]
    Window { start: usize, width: usize, n_blocks: usize },
    #[error("need at least two blocks")]
    TooFewBlocks,
    #[error("report is incomplete: {0}")]
    Incomplete(String),
    #[error("bad report: {0}")]
    Parse(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Probe, episode count and seeds used for every skip evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub probe: ProbeSpec,
    pub episodes: usize,
    pub seeds: Vec<u64>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { probe: ProbeSpec::default(), episodes: 100, seeds: vec![0] }
    }
}

/// Scores the expert with a set of blocks bypassed.
pub trait SkipScorer {
    fn n_blocks(&self) -> usize;
    fn score(&mut self, skip: &[usize]) -> Result<f64, SurgeonError>;
}

/// Success rate of the sampled policy on an [`EvalSpec`].
pub struct PolicyScorer<'m> {
    pub expert: &'m ParamStore<f32>,
    pub cfg: &'m ExpertConfig,
    pub stats: &'m NormStats,
    pub env: &'m EnvConfig,
    pub spec: &'m EvalSpec,
    pub exec_horizon: usize,
}

pub fn evaluate_with_skips(scorer: &PolicyScorer, skip: &[usize]) -> Result<f64, SurgeonError> {
    if let Some(&bad) = skip.iter().find(|&&i| i >= scorer.cfg.n_blocks) {
        return Err(SurgeonError::Window { start: bad, width: 1, n_blocks: scorer.cfg.n_blocks });
    }
    let mut policy = DiffusionPolicy::new(scorer.expert, scorer.cfg, scorer.stats, None, skip.to_vec(), scorer.exec_horizon)
        .expect("skip ids checked above");
    let rep = env::evaluate_policy(&mut policy, &scorer.spec.probe, scorer.spec.episodes, &scorer.spec.seeds, scorer.env)?;
    Ok(rep.success_rate)
}

impl SkipScorer for PolicyScorer<'_> {
    fn n_blocks(&self) -> usize {
        self.cfg.n_blocks
    }

    fn score(&mut self, skip: &[usize]) -> Result<f64, SurgeonError> {
        evaluate_with_skips(self, skip)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub start: usize,
    pub width: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockImportanceReport {
    pub n_blocks: usize,
    pub baseline_score: f64,
    pub single_skip: BTreeMap<usize, f64>,
    pub consecutive: Vec<WindowScore>,
    pub eval: Option<EvalSpec>,
    pub evaluations: usize,
}

impl BlockImportanceReport {
    pub fn degradation(&self, block: usize) -> Option<f64> {
        self.single_skip.get(&block).map(|s| self.baseline_score - s)
    }

    pub fn degradations(&self) -> Result<Vec<f64>, SurgeonError> {
        (0..self.n_blocks).map(|i| self.degradation(i).ok_or_else(|| SurgeonError::Incomplete(format!("block {i} missing")))).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(s: &str) -> Result<Self, SurgeonError> {
        serde_json::from_str(s).map_err(|e| SurgeonError::Parse(e.to_string()))
    }

    /// SHA-256 of the JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    /// `block_id,score,degradation` with a leading `baseline` row.
    pub fn single_csv(&self) -> String {
        let mut s = String::from("block_id,score,degradation\n");
        s += &format!("baseline,{},0\n", self.baseline_score);
        for (b, sc) in &self.single_skip {
            s += &format!("{b},{sc},{}\n", self.baseline_score - sc);
        }
        s
    }

    pub fn consecutive_csv(&self) -> String {
        let mut s = String::from("start,width,score,degradation\n");
        for w in &self.consecutive {
            s += &format!("{},{},{},{}\n", w.start, w.width, w.score, self.baseline_score - w.score);
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!("baseline success {:.3} over {} evaluations\n", self.baseline_score, self.evaluations);
        for (b, sc) in &self.single_skip {
            s += &format!("skip block {b:>2}: {sc:.3} (degradation {:+.3})\n", self.baseline_score - sc);
        }
        for w in &self.consecutive {
            s += &format!("skip blocks {}..{}: {:.3}\n", w.start, w.start + w.width - 1, w.score);
        }
        s
    }
}

/// Baseline plus one evaluation per block with only that block skipped.
pub fn sweep_single(scorer: &mut dyn SkipScorer, eval: Option<EvalSpec>) -> Result<BlockImportanceReport, SurgeonError> {
    let n = scorer.n_blocks();
    if n < 2 {
        return Err(SurgeonError::TooFewBlocks);
    }
    let baseline_score = scorer.score(&[])?;
    let mut single_skip = BTreeMap::new();
    for b in 0..n {
        single_skip.insert(b, scorer.score(&[b])?);
    }
    Ok(BlockImportanceReport { n_blocks: n, baseline_score, single_skip, consecutive: Vec::new(), eval, evaluations: n + 1 })
}

/// Skips windows `start..start+w` for `w = 1..=max_width`, appending to
/// `report`. Stops after the first window scoring below `floor`.
pub fn sweep_consecutive(
    scorer: &mut dyn SkipScorer,
    report: &mut BlockImportanceReport,
    start: usize,
    max_width: usize,
    floor: f64,
) -> Result<(), SurgeonError> {
    let n = scorer.n_blocks();
    if start + max_width > n {
        return Err(SurgeonError::Window { start, width: max_width, n_blocks: n });
    }
    for width in 1..=max_width {
        let skip: Vec<usize> = (start..start + width).collect();
        let score = scorer.score(&skip)?;
        report.consecutive.push(WindowScore { start, width, score });
        report.evaluations += 1;
        if score < floor {
            break;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionPlan {
    pub block_ids: Vec<usize>,
    pub epsilon: f64,
    pub provenance: String,
}

impl InjectionPlan {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serialises")
    }

    pub fn from_toml(s: &str) -> Result<Self, SurgeonError> {
        toml::from_str(s).map_err(|e| SurgeonError::Parse(e.to_string()))
    }
}

/// Earliest `b*` such that every block from `b*` on degrades by at most
/// `epsilon` when skipped alone; returns up to `max_count` ids from `b*`.
pub fn select_injection_blocks(report: &BlockImportanceReport, epsilon: f64, max_count: usize) -> Result<InjectionPlan, SurgeonError> {
    if max_count == 0 {
        return Err(SurgeonError::ZeroCount);
    }
    let deg = report.degradations()?;
    let safe_tail = deg.iter().rev().take_while(|&&d| d <= epsilon).count();
    if safe_tail == 0 {
        return Err(SurgeonError::NoSafeBlocks(epsilon));
    }
    let start = deg.len() - safe_tail;
    Ok(InjectionPlan { block_ids: (start..start + safe_tail.min(max_count)).collect(), epsilon, provenance: report.hash() })
}
