//! Demonstration storage, normalisation statistics and chunked sampling.
//!
//! On disk a dataset is a directory holding `manifest.json` plus one binary
//! record per episode. A record is a sequence of named arrays:
//!
//! ```text
//! magic "CCEP" | u32 version | u32 array count
//! per array: u16 name length | name | u8 dtype | u8 ndim | u32 dims... | u64 byte length | payload
//! ```
//!
//! All integers little-endian. dtype 1 = f32, 2 = u8 boolean, 3 = i32.
//! The manifest stores the SHA-256 of every record.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{self, EnvConfig, EnvError, ProbeSpec, ACTION_DIM, IMAGE_LEN, NUM_TASKS, STATE_DIM};
use crate::seeding;

pub const FORMAT_VERSION: u32 = 1;
const RECORD_MAGIC: &[u8; 4] = b"CCEP";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("record {0} is truncated")]
    Truncated(String),
    #[error("checksum mismatch in record {0}")]
    Checksum(String),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("dataset has no episodes")]
    Empty,
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error("chunk length must be positive")]
    ZeroChunk,
    #[error(transparent)]
    Env(#[from] EnvError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// One demonstration. Row `t` of every array is the observation at step `t`
/// and the expert action taken there.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub images: Vec<f32>,
    pub pointclouds: Vec<f32>,
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    pub task_id: u8,
    pub decoy: bool,
    pub table_height: f32,
    pub num_points: usize,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.actions.len() / ACTION_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn image(&self, t: usize) -> &[f32] {
        &self.images[t * IMAGE_LEN..(t + 1) * IMAGE_LEN]
    }

    pub fn cloud(&self, t: usize) -> &[f32] {
        let n = self.num_points * 3;
        &self.pointclouds[t * n..(t + 1) * n]
    }

    pub fn state(&self, t: usize) -> &[f32] {
        &self.states[t * STATE_DIM..(t + 1) * STATE_DIM]
    }

    pub fn action(&self, t: usize) -> &[f32] {
        &self.actions[t * ACTION_DIM..(t + 1) * ACTION_DIM]
    }
}

/// Rolls out the scripted expert for one episode.
pub fn rollout_expert(seed: u64, probe: &ProbeSpec, cfg: &EnvConfig) -> Result<EpisodeRecord, EnvError> {
    let (mut state, mut image, mut cloud) = env::reset(seed, probe, cfg)?;
    let mut rec = EpisodeRecord {
        images: Vec::new(),
        pointclouds: Vec::new(),
        states: Vec::new(),
        actions: Vec::new(),
        task_id: state.task_id,
        decoy: state.decoy,
        table_height: state.table_height as f32,
        num_points: cfg.num_points,
    };
    while !state.done {
        let a = env::scripted_expert(&state, cfg);
        rec.images.extend_from_slice(&image.pixels);
        rec.pointclouds.extend(cloud.flat());
        rec.states.extend(state.proprio());
        rec.actions.extend(a.to_f32());
        let out = env::step(&state, &a, cfg)?;
        state = out.state;
        image = out.image;
        cloud = out.cloud;
    }
    Ok(rec)
}

/// `per_task` demonstrations of each task drawn from `probe` (its task and
/// decoy fields are overridden). Each episode is a decoy with probability
/// `decoy_fraction`.
pub fn generate_demos(
    per_task: usize,
    probe: &ProbeSpec,
    decoy_fraction: f64,
    seed: u64,
    cfg: &EnvConfig,
) -> Result<Vec<EpisodeRecord>, EnvError> {
    let mut decoy_rng = seeding::rng(seeding::derive_str(seed, "decoys"));
    let mut out = Vec::with_capacity(per_task * NUM_TASKS);
    for task in 0..NUM_TASKS {
        for i in 0..per_task {
            let mut p = probe.clone();
            p.task_id = Some(task as u8);
            p.decoy = decoy_rng.random::<f64>() < decoy_fraction;
            let es = seeding::derive(seeding::derive_str(seed, "demo"), (task * per_task + i) as u64);
            out.push(rollout_expert(es, &p, cfg)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub file: String,
    pub steps: usize,
    pub task_id: u8,
    pub decoy: bool,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub episodes: usize,
    pub total_steps: usize,
    pub per_task: BTreeMap<u8, usize>,
    pub decoys: usize,
    pub num_points: usize,
    pub records: Vec<RecordEntry>,
    pub norm_stats: NormStats,
    /// Hash of the configuration that produced this dataset.
    pub provenance: String,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub episodes: Vec<EpisodeRecord>,
}

enum Array<'a> {
    F32(&'a [f32]),
    Bool(bool),
    I32(i32),
}

fn encode_record(rec: &EpisodeRecord) -> Vec<u8> {
    let t = rec.len() as u32;
    let arrays: [(&str, Vec<u32>, Array); 7] = [
        ("images", vec![t, 3, 32, 32], Array::F32(&rec.images)),
        ("pointclouds", vec![t, rec.num_points as u32, 3], Array::F32(&rec.pointclouds)),
        ("states", vec![t, STATE_DIM as u32], Array::F32(&rec.states)),
        ("actions", vec![t, ACTION_DIM as u32], Array::F32(&rec.actions)),
        ("task_id", vec![], Array::I32(rec.task_id as i32)),
        ("decoy", vec![], Array::Bool(rec.decoy)),
        ("table_height", vec![], Array::F32(std::slice::from_ref(&rec.table_height))),
    ];
    let mut out = Vec::with_capacity(rec.images.len() * 4 + rec.pointclouds.len() * 4 + 256);
    out.extend_from_slice(RECORD_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, dims, arr) in arrays {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let payload: Vec<u8> = match arr {
            Array::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Array::Bool(b) => vec![b as u8],
            Array::I32(i) => i.to_le_bytes().to_vec(),
        };
        let dtype = match arr {
            Array::F32(_) => 1u8,
            Array::Bool(_) => 2,
            Array::I32(_) => 3,
        };
        out.push(dtype);
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        if self.pos + n > self.buf.len() {
            return Err(DatasetError::Truncated(self.name.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DatasetError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DatasetError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_record(buf: &[u8], name: &str) -> Result<EpisodeRecord, DatasetError> {
    let mut r = Reader { buf, pos: 0, name };
    if r.take(4)? != RECORD_MAGIC {
        return Err(DatasetError::Format(format!("{name}: bad magic")));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(DatasetError::Version { found: version, expected: FORMAT_VERSION });
    }
    let n = r.u32()?;
    let mut f32s: BTreeMap<String, (Vec<u32>, Vec<f32>)> = BTreeMap::new();
    let mut task_id = None;
    let mut decoy = None;
    for _ in 0..n {
        let len = r.u16()? as usize;
        let field = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| DatasetError::Format(format!("{name}: non-utf8 name")))?;
        let dtype = r.u8()?;
        let ndim = r.u8()? as usize;
        let dims: Vec<u32> = (0..ndim).map(|_| r.u32()).collect::<Result<_, _>>()?;
        let bytes = r.u64()? as usize;
        let payload = r.take(bytes)?;
        let elems: usize = dims.iter().map(|&d| d as usize).product();
        match (field.as_str(), dtype) {
            ("task_id", 3) => task_id = Some(i32::from_le_bytes(payload.try_into().map_err(|_| DatasetError::Format("task_id".into()))?)),
            ("decoy", 2) => decoy = Some(payload.first().copied().ok_or_else(|| DatasetError::Format("decoy".into()))? != 0),
            (_, 1) => {
                if bytes != elems * 4 {
                    return Err(DatasetError::Format(format!("{name}: {field} declares {elems} elements but holds {bytes} bytes")));
                }
                let v = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                f32s.insert(field, (dims, v));
            }
            _ => return Err(DatasetError::Format(format!("{name}: unexpected field {field} with dtype {dtype}"))),
        }
    }
    let mut get = |k: &str| f32s.remove(k).ok_or_else(|| DatasetError::Format(format!("{name}: missing {k}")));
    let (img_dims, images) = get("images")?;
    let (pc_dims, pointclouds) = get("pointclouds")?;
    let (st_dims, states) = get("states")?;
    let (ac_dims, actions) = get("actions")?;
    let (_, th) = get("table_height")?;
    let t = ac_dims.first().copied().unwrap_or(0);
    if [img_dims[0], pc_dims[0], st_dims[0]].iter().any(|&d| d != t) {
        return Err(DatasetError::Format(format!("{name}: leading dimensions disagree")));
    }
    Ok(EpisodeRecord {
        images,
        pointclouds,
        states,
        actions,
        task_id: task_id.ok_or_else(|| DatasetError::Format(format!("{name}: missing task_id")))? as u8,
        decoy: decoy.ok_or_else(|| DatasetError::Format(format!("{name}: missing decoy")))?,
        table_height: th[0],
        num_points: pc_dims.get(1).copied().unwrap_or(0) as usize,
    })
}

pub fn write_dataset(episodes: &[EpisodeRecord], dir: &Path, provenance: &str) -> Result<Manifest, DatasetError> {
    if episodes.is_empty() {
        return Err(DatasetError::Empty);
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut records = Vec::with_capacity(episodes.len());
    let mut per_task = BTreeMap::new();
    for (i, ep) in episodes.iter().enumerate() {
        let file = format!("episode_{i:05}.bin");
        let bytes = encode_record(ep);
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(io_err(&path))?;
        *per_task.entry(ep.task_id).or_insert(0) += 1;
        records.push(RecordEntry {
            file,
            steps: ep.len(),
            task_id: ep.task_id,
            decoy: ep.decoy,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        episodes: episodes.len(),
        total_steps: episodes.iter().map(EpisodeRecord::len).sum(),
        per_task,
        decoys: episodes.iter().filter(|e| e.decoy).count(),
        num_points: episodes[0].num_points,
        records,
        norm_stats: compute_norm_stats(episodes)?,
        provenance: provenance.to_string(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, DatasetError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| DatasetError::Format(format!("manifest: {e}")))?;
    let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(DatasetError::Version { found, expected: FORMAT_VERSION });
    }
    serde_json::from_value(value).map_err(|e| DatasetError::Format(format!("manifest: {e}")))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let manifest = read_manifest(dir)?;
    let mut episodes = Vec::with_capacity(manifest.records.len());
    for entry in &manifest.records {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let rec = decode_record(&bytes, &entry.file)?;
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            return Err(DatasetError::Checksum(entry.file.clone()));
        }
        episodes.push(rec);
    }
    Ok(Dataset { manifest, episodes })
}

/// Action min/max scaling to `[-1, 1]` and state z-scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub action_min: [f32; ACTION_DIM],
    pub action_max: [f32; ACTION_DIM],
    pub state_mean: [f32; STATE_DIM],
    pub state_std: [f32; STATE_DIM],
}

/// Running per-dimension statistics; mergeable across episodes.
#[derive(Clone, Debug)]
pub struct StatsAccumulator {
    count: usize,
    action_min: [f64; ACTION_DIM],
    action_max: [f64; ACTION_DIM],
    state_sum: [f64; STATE_DIM],
    state_sq: [f64; STATE_DIM],
}

impl Default for StatsAccumulator {
    fn default() -> Self {
        Self {
            count: 0,
            action_min: [f64::INFINITY; ACTION_DIM],
            action_max: [f64::NEG_INFINITY; ACTION_DIM],
            state_sum: [0.0; STATE_DIM],
            state_sq: [0.0; STATE_DIM],
        }
    }
}

impl StatsAccumulator {
    pub fn push_episode(&mut self, ep: &EpisodeRecord) {
        for t in 0..ep.len() {
            for (j, &a) in ep.action(t).iter().enumerate() {
                self.action_min[j] = self.action_min[j].min(a as f64);
                self.action_max[j] = self.action_max[j].max(a as f64);
            }
            for (j, &s) in ep.state(t).iter().enumerate() {
                self.state_sum[j] += s as f64;
                self.state_sq[j] += (s as f64) * (s as f64);
            }
            self.count += 1;
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.count += other.count;
        for j in 0..ACTION_DIM {
            self.action_min[j] = self.action_min[j].min(other.action_min[j]);
            self.action_max[j] = self.action_max[j].max(other.action_max[j]);
        }
        for j in 0..STATE_DIM {
            self.state_sum[j] += other.state_sum[j];
            self.state_sq[j] += other.state_sq[j];
        }
    }

    /// Constant action dimensions are widened by `1e-3` each side; state std
    /// is floored at `1e-3`.
    pub fn finish(&self) -> Result<NormStats, DatasetError> {
        if self.count == 0 {
            return Err(DatasetError::Empty);
        }
        let mut s = NormStats {
            action_min: [0.0; ACTION_DIM],
            action_max: [0.0; ACTION_DIM],
            state_mean: [0.0; STATE_DIM],
            state_std: [1.0; STATE_DIM],
        };
        for j in 0..ACTION_DIM {
            let (mut lo, mut hi) = (self.action_min[j], self.action_max[j]);
            if hi - lo < 1e-9 {
                lo -= 1e-3;
                hi += 1e-3;
            }
            s.action_min[j] = lo as f32;
            s.action_max[j] = hi as f32;
        }
        let n = self.count as f64;
        for j in 0..STATE_DIM {
            let mean = self.state_sum[j] / n;
            let var = (self.state_sq[j] / n - mean * mean).max(0.0);
            s.state_mean[j] = mean as f32;
            s.state_std[j] = var.sqrt().max(1e-3) as f32;
        }
        Ok(s)
    }
}

pub fn compute_norm_stats(episodes: &[EpisodeRecord]) -> Result<NormStats, DatasetError> {
    let mut acc = StatsAccumulator::default();
    for ep in episodes {
        acc.push_episode(ep);
    }
    acc.finish()
}

impl NormStats {
    pub fn normalize_action(&self, a: &[f32]) -> [f32; ACTION_DIM] {
        let mut out = [0.0; ACTION_DIM];
        for j in 0..ACTION_DIM {
            let (lo, hi) = (self.action_min[j] as f64, self.action_max[j] as f64);
            out[j] = (2.0 * (a[j] as f64 - lo) / (hi - lo) - 1.0) as f32;
        }
        out
    }

    pub fn denormalize_action(&self, a: &[f32]) -> [f32; ACTION_DIM] {
        let mut out = [0.0; ACTION_DIM];
        for j in 0..ACTION_DIM {
            let (lo, hi) = (self.action_min[j] as f64, self.action_max[j] as f64);
            out[j] = ((a[j] as f64 + 1.0) * 0.5 * (hi - lo) + lo) as f32;
        }
        out
    }

    pub fn normalize_state(&self, s: &[f32]) -> [f32; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        for j in 0..STATE_DIM {
            out[j] = (s[j] - self.state_mean[j]) / self.state_std[j];
        }
        out
    }
}

/// Collated training batch. Actions are normalised; states are z-scored.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub chunk: usize,
    pub images: Vec<f32>,
    pub clouds: Vec<f32>,
    pub states: Vec<f32>,
    pub tasks: Vec<usize>,
    pub actions: Vec<f32>,
    pub pad_mask: Vec<bool>,
    /// `(episode, t)` of every sample.
    pub origins: Vec<(usize, usize)>,
}

/// Draws `(episode, t)` uniformly over all steps and collates `chunk` actions
/// from `t`. Steps past the episode end repeat its final action with a false
/// pad mask.
pub fn sample_batch(
    episodes: &[EpisodeRecord],
    stats: &NormStats,
    batch_size: usize,
    chunk: usize,
    with_clouds: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Batch, DatasetError> {
    if batch_size == 0 {
        return Err(DatasetError::ZeroBatch);
    }
    if chunk == 0 {
        return Err(DatasetError::ZeroChunk);
    }
    let mut offsets = Vec::with_capacity(episodes.len() + 1);
    offsets.push(0usize);
    for e in episodes {
        offsets.push(offsets.last().unwrap() + e.len());
    }
    let total = *offsets.last().unwrap();
    if total == 0 {
        return Err(DatasetError::Empty);
    }
    let origins: Vec<(usize, usize)> = (0..batch_size)
        .map(|_| {
            let k = rng.random_range(0..total);
            let e = offsets.partition_point(|&o| o <= k) - 1;
            (e, k - offsets[e])
        })
        .collect();
    Ok(collate(episodes, stats, &origins, chunk, with_clouds))
}

pub fn collate(episodes: &[EpisodeRecord], stats: &NormStats, origins: &[(usize, usize)], chunk: usize, with_clouds: bool) -> Batch {
    let b = origins.len();
    let mut batch = Batch {
        size: b,
        chunk,
        images: Vec::with_capacity(b * IMAGE_LEN),
        clouds: Vec::new(),
        states: Vec::with_capacity(b * STATE_DIM),
        tasks: Vec::with_capacity(b),
        actions: Vec::with_capacity(b * chunk * ACTION_DIM),
        pad_mask: Vec::with_capacity(b * chunk),
        origins: origins.to_vec(),
    };
    for &(e, t) in origins {
        let ep = &episodes[e];
        batch.images.extend_from_slice(ep.image(t));
        if with_clouds {
            batch.clouds.extend_from_slice(ep.cloud(t));
        }
        batch.states.extend(stats.normalize_state(ep.state(t)));
        batch.tasks.push(ep.task_id as usize);
        let last = ep.len() - 1;
        for k in 0..chunk {
            let s = t + k;
            batch.actions.extend(stats.normalize_action(ep.action(s.min(last))));
            batch.pad_mask.push(s <= last);
        }
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::HeightDist;

    fn demos(per_task: usize) -> Vec<EpisodeRecord> {
        let mut p = ProbeSpec::default();
        p.table_height = HeightDist::Fixed(0.003);
        generate_demos(per_task, &p, 0.0, 11, &EnvConfig { num_points: 64, ..Default::default() }).unwrap()
    }

    #[test]
    fn write_read_round_trip_is_bitwise() {
        let eps = demos(2)[..5].to_vec();
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&eps, dir.path(), "test").unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        assert_eq!(ds.episodes, eps);
    }

    #[test]
    fn corruption_and_truncation_are_distinct_errors() {
        let eps = demos(1);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&eps, dir.path(), "test").unwrap();
        let f = dir.path().join("episode_00000.bin");
        let mut bytes = fs::read(&f).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&f, &bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DatasetError::Checksum(_))));
        bytes.truncate(mid);
        fs::write(&f, &bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DatasetError::Truncated(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&demos(1), dir.path(), "test").unwrap();
        let p = dir.path().join("manifest.json");
        let text = fs::read_to_string(&p).unwrap().replace("\"format_version\": 1", "\"format_version\": 7");
        fs::write(&p, text).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DatasetError::Version { found: 7, .. })));
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(write_dataset(&[], dir.path(), "x"), Err(DatasetError::Empty)));
        assert!(matches!(compute_norm_stats(&[]), Err(DatasetError::Empty)));
    }

    #[test]
    fn manifest_counts_tasks() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&demos(3), dir.path(), "x").unwrap();
        assert_eq!(m.per_task, BTreeMap::from([(0, 3), (1, 3), (2, 3), (3, 3)]));
    }

    #[test]
    fn stats_bound_actions_and_widen_constant_dims() {
        let eps = demos(2);
        let s = compute_norm_stats(&eps).unwrap();
        for j in 0..3 {
            assert!(s.action_min[j] >= -0.05 && s.action_max[j] <= 0.05);
        }
        let mut flat = eps[0].clone();
        for t in 0..flat.len() {
            flat.actions[t * 4 + 3] = 1.0;
        }
        let s = compute_norm_stats(std::slice::from_ref(&flat)).unwrap();
        assert!(s.action_max[3] > s.action_min[3]);
        let n = s.normalize_action(flat.action(0));
        assert!(n.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn final_step_pads_the_rest_of_the_chunk() {
        let eps = demos(1);
        let s = compute_norm_stats(&eps).unwrap();
        let last = eps[0].len() - 1;
        let b = collate(&eps, &s, &[(0, last)], 8, false);
        assert_eq!(b.pad_mask, [true, false, false, false, false, false, false, false]);
        let first = &b.actions[..4];
        for k in 1..8 {
            assert_eq!(&b.actions[k * 4..k * 4 + 4], first);
        }
    }

    #[test]
    fn batches_are_deterministic_and_in_range() {
        let eps = demos(2);
        let s = compute_norm_stats(&eps).unwrap();
        let a = sample_batch(&eps, &s, 16, 8, true, &mut seeding::rng(3)).unwrap();
        let b = sample_batch(&eps, &s, 16, 8, true, &mut seeding::rng(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.actions.iter().all(|v| (-1.0 - 1e-6..=1.0 + 1e-6).contains(v)));
        assert!(matches!(sample_batch(&eps, &s, 0, 8, false, &mut seeding::rng(3)), Err(DatasetError::ZeroBatch)));
        let long = sample_batch(&eps, &s, 2, 500, false, &mut seeding::rng(3)).unwrap();
        assert_eq!(long.pad_mask.len(), 1000);
    }
}
