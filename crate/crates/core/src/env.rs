//! Synthetic tabletop benchmark with a scripted expert.
//!
//! The top-down image is a pure function of the gripper and object `x, y`
//! (plus a task marker), so it cannot see table height or tell a real object
//! from a photo of one. The point cloud carries both.
//!
//! Tasks (all start with a grasp of the single object):
//!
//! | id | name               | success                                                     |
//! |----|--------------------|-------------------------------------------------------------|
//! | 0  | place-in-left-bin  | grip opens while the object is held over the left bin       |
//! | 1  | place-in-right-bin | grip opens while the object is held over the right bin      |
//! | 2  | push-to-line       | held object crosses `y >= LINE_Y` while kept near the table |
//! | 3  | touch-and-lift     | held object raised `LIFT_HEIGHT` above its resting height   |
//!
//! Decoy episodes render a phantom object but contain none; the expert
//! retreats and never closes the gripper.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding;

pub const IMAGE_SIZE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_LEN: usize = IMAGE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE;
pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 4;
pub const NUM_TASKS: usize = 4;
pub const MAX_TABLE_HEIGHT: f64 = 0.2;

/// Object half extents: footprint and height.
pub const OBJECT_HALF_WIDTH: f64 = 0.025;
pub const OBJECT_HALF_HEIGHT: f64 = 0.02;

pub const GRIPPER_START: [f64; 3] = [0.5, 0.1, 0.3];
pub const RETREAT_POSE: [f64; 3] = [0.5, 0.1, 0.45];
pub const LEFT_BIN: [f64; 2] = [0.15, 0.8];
pub const RIGHT_BIN: [f64; 2] = [0.85, 0.8];
pub const BIN_HALF: f64 = 0.08;
pub const LINE_Y: f64 = 0.8;
/// Maximum height above resting height allowed while pushing.
pub const PUSH_CLEARANCE: f64 = 0.02;
pub const LIFT_HEIGHT: f64 = 0.15;

const APPROACH_CLEARANCE: f64 = 0.08;
const CARRY_CLEARANCE: f64 = 0.15;
const REACHED: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("table height {0} outside [0, {MAX_TABLE_HEIGHT}]")]
    TableHeight(f64),
    #[error("episode already finished; reset before stepping")]
    EpisodeDone,
    #[error("task id {0} out of range")]
    TaskId(u8),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub horizon: usize,
    pub grasp_tolerance: f64,
    pub max_step: f64,
    pub num_points: usize,
    pub cloud_noise: f64,
    pub object_point_fraction: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { horizon: 60, grasp_tolerance: 0.03, max_step: 0.05, num_points: 512, cloud_noise: 0.002, object_point_fraction: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeightDist {
    Fixed(f64),
    Choice(Vec<f64>),
    Uniform([f64; 2]),
    /// Picks a component uniformly, then samples it.
    Mix(Vec<HeightDist>),
}

impl HeightDist {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            HeightDist::Fixed(h) => *h,
            HeightDist::Choice(hs) => hs[rng.random_range(0..hs.len())],
            HeightDist::Uniform([lo, hi]) => {
                if hi > lo {
                    rng.random_range(*lo..*hi)
                } else {
                    *lo
                }
            }
            HeightDist::Mix(parts) => {
                let i = rng.random_range(0..parts.len());
                parts[i].sample(rng)
            }
        }
    }

    fn validate(&self) -> Result<(), EnvError> {
        let ok = |h: f64| (0.0..=MAX_TABLE_HEIGHT).contains(&h);
        let bad = match self {
            HeightDist::Fixed(h) => (!ok(*h)).then_some(*h),
            HeightDist::Choice(hs) => hs.iter().copied().find(|h| !ok(*h)).or(hs.is_empty().then_some(f64::NAN)),
            HeightDist::Uniform([lo, hi]) => [*lo, *hi].into_iter().find(|h| !ok(*h)),
            HeightDist::Mix(parts) if parts.is_empty() => Some(f64::NAN),
            HeightDist::Mix(parts) => return parts.iter().try_for_each(|p| p.validate()),
        };
        bad.map_or(Ok(()), |h| Err(EnvError::TableHeight(h)))
    }
}

/// Episode distribution for `reset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSpec {
    /// `None` draws the task uniformly.
    pub task_id: Option<u8>,
    pub decoy: bool,
    pub table_height: HeightDist,
    pub object_x: [f64; 2],
    pub object_y: [f64; 2],
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self { task_id: None, decoy: false, table_height: HeightDist::Fixed(0.003), object_x: [0.3, 0.7], object_y: [0.25, 0.55] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub gripper_pos: [f64; 3],
    pub grip: f64,
    pub object_pos: Option<[f64; 3]>,
    pub object_held: bool,
    pub table_height: f64,
    pub task_id: u8,
    pub decoy: bool,
    pub step_count: usize,
    /// Where a decoy's photo is drawn. `None` for real episodes.
    pub phantom_xy: Option<[f64; 2]>,
    pub success: bool,
    pub done: bool,
    /// Keys the per-step point-cloud noise.
    pub episode_seed: u64,
}

impl EnvState {
    /// `x, y` of whatever the camera shows as the object.
    pub fn rendered_object_xy(&self) -> Option<[f64; 2]> {
        self.object_pos.map(|p| [p[0], p[1]]).or(self.phantom_xy)
    }

    /// Proprioceptive state fed to policies: gripper position and grip.
    pub fn proprio(&self) -> [f32; STATE_DIM] {
        let g = self.gripper_pos;
        [g[0] as f32, g[1] as f32, g[2] as f32, self.grip as f32]
    }

    pub fn resting_z(&self) -> f64 {
        self.table_height + OBJECT_HALF_HEIGHT
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageObs {
    /// `3 x 32 x 32`, channel-major: gripper, object, task marker.
    pub pixels: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn flat(&self) -> Vec<f32> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn from_flat(data: &[f32]) -> Self {
        Self { points: data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Action {
    /// `(dx, dy, dz, dgrip)`.
    pub delta: [f64; ACTION_DIM],
}

impl Action {
    pub const ZERO: Action = Action { delta: [0.0; ACTION_DIM] };

    pub fn clipped(&self, max_step: f64) -> Action {
        let d = self.delta;
        let c = |v: f64, m: f64| if v.is_nan() { 0.0 } else { v.clamp(-m, m) };
        Action { delta: [c(d[0], max_step), c(d[1], max_step), c(d[2], max_step), c(d[3], 1.0)] }
    }

    pub fn to_f32(&self) -> [f32; ACTION_DIM] {
        self.delta.map(|v| v as f32)
    }

    pub fn from_f32(v: &[f32]) -> Action {
        Action { delta: [v[0] as f64, v[1] as f64, v[2] as f64, v[3] as f64] }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepInfo {
    pub grasped: bool,
    pub released: bool,
    pub success: bool,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub state: EnvState,
    pub image: ImageObs,
    pub cloud: PointCloud,
    pub done: bool,
    pub info: StepInfo,
}

fn cloud_seed(state: &EnvState) -> u64 {
    seeding::derive(state.episode_seed, state.step_count as u64)
}

/// Starts an episode. Object `x, y` and table height come from independent
/// streams so probes that differ only in height or decoy flag share positions.
pub fn reset(seed: u64, probe: &ProbeSpec, cfg: &EnvConfig) -> Result<(EnvState, ImageObs, PointCloud), EnvError> {
    probe.table_height.validate()?;
    let mut task_rng = seeding::rng(seeding::derive_str(seed, "task"));
    let mut xy_rng = seeding::rng(seeding::derive_str(seed, "object-xy"));
    let mut h_rng = seeding::rng(seeding::derive_str(seed, "table-height"));
    let task_id = match probe.task_id {
        Some(t) if t as usize >= NUM_TASKS => return Err(EnvError::TaskId(t)),
        Some(t) => t,
        None => task_rng.random_range(0..NUM_TASKS as u8),
    };
    let table_height = probe.table_height.sample(&mut h_rng);
    let uni = |rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]| if hi > lo { rng.random_range(lo..hi) } else { lo };
    let x = uni(&mut xy_rng, probe.object_x);
    let y = uni(&mut xy_rng, probe.object_y);
    let state = EnvState {
        gripper_pos: GRIPPER_START,
        grip: 0.0,
        object_pos: (!probe.decoy).then_some([x, y, table_height + OBJECT_HALF_HEIGHT]),
        object_held: false,
        table_height,
        task_id,
        decoy: probe.decoy,
        step_count: 0,
        phantom_xy: probe.decoy.then_some([x, y]),
        success: false,
        done: false,
        episode_seed: seeding::derive_str(seed, "episode"),
    };
    let image = render_image(&state);
    let cloud = sample_pointcloud(&state, cfg.num_points, cloud_seed(&state), cfg);
    Ok((state, image, cloud))
}

fn chebyshev(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max)
}

fn in_bin(xy: [f64; 2], bin: [f64; 2]) -> bool {
    (xy[0] - bin[0]).abs() <= BIN_HALF && (xy[1] - bin[1]).abs() <= BIN_HALF
}

/// Advances one control step.
///
/// Grip updates first: crossing 0.5 upward within `grasp_tolerance` (max-axis)
/// of the object grasps it, crossing downward while holding releases it onto
/// the table. Then the gripper moves by the clipped delta, clamped to the unit
/// cube, carrying a held object with it.
pub fn step(state: &EnvState, action: &Action, cfg: &EnvConfig) -> Result<StepOutcome, EnvError> {
    if state.done {
        return Err(EnvError::EpisodeDone);
    }
    let a = action.clipped(cfg.max_step).delta;
    let mut s = state.clone();
    let mut info = StepInfo::default();

    let new_grip = (s.grip + a[3]).clamp(0.0, 1.0);
    if !s.object_held && s.grip <= 0.5 && new_grip > 0.5 {
        if let Some(obj) = s.object_pos {
            if chebyshev(s.gripper_pos, obj) < cfg.grasp_tolerance {
                s.object_held = true;
                info.grasped = true;
            }
        }
    } else if s.object_held && new_grip <= 0.5 {
        s.object_held = false;
        info.released = true;
        let obj = s.object_pos.as_mut().expect("held object exists");
        obj[2] = s.table_height + OBJECT_HALF_HEIGHT;
        if s.task_id < 2 {
            let bin = if s.task_id == 0 { LEFT_BIN } else { RIGHT_BIN };
            if in_bin([obj[0], obj[1]], bin) {
                info.success = true;
            }
        }
    }
    s.grip = new_grip;

    for i in 0..3 {
        s.gripper_pos[i] = (s.gripper_pos[i] + a[i]).clamp(0.0, 1.0);
    }
    if s.object_held {
        s.object_pos = Some(s.gripper_pos);
        let obj = s.gripper_pos;
        match s.task_id {
            2 => info.success |= obj[1] >= LINE_Y && obj[2] <= s.resting_z() + PUSH_CLEARANCE,
            3 => info.success |= obj[2] >= s.resting_z() + LIFT_HEIGHT,
            _ => {}
        }
    }
    s.step_count += 1;
    s.success = info.success;
    s.done = info.success || s.step_count >= cfg.horizon;
    let image = render_image(&s);
    let cloud = sample_pointcloud(&s, cfg.num_points, cloud_seed(&s), cfg);
    Ok(StepOutcome { done: s.done, state: s, image, cloud, info })
}

fn splat(channel: &mut [f32], x: f64, y: f64, sigma: f64) {
    let n = IMAGE_SIZE as f64;
    let (cx, cy) = (x * n - 0.5, y * n - 0.5);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for r in 0..IMAGE_SIZE {
        let dy = r as f64 - cy;
        for c in 0..IMAGE_SIZE {
            let dx = c as f64 - cx;
            let v = (-(dx * dx + dy * dy) * inv).exp() as f32;
            let p = &mut channel[r * IMAGE_SIZE + c];
            *p = p.max(v);
        }
    }
}

fn fill_rect(channel: &mut [f32], center: [f64; 2], half: [f64; 2], value: f32) {
    let n = IMAGE_SIZE as f64;
    for r in 0..IMAGE_SIZE {
        let y = (r as f64 + 0.5) / n;
        for c in 0..IMAGE_SIZE {
            let x = (c as f64 + 0.5) / n;
            if (x - center[0]).abs() <= half[0] && (y - center[1]).abs() <= half[1] {
                channel[r * IMAGE_SIZE + c] = value;
            }
        }
    }
}

/// Top-down orthographic render. Reads only gripper `x, y`, the rendered object
/// `x, y` and the task id.
pub fn render_image(state: &EnvState) -> ImageObs {
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut pixels = vec![0.0f32; IMAGE_LEN];
    let (grip_ch, rest) = pixels.split_at_mut(plane);
    let (obj_ch, task_ch) = rest.split_at_mut(plane);
    splat(grip_ch, state.gripper_pos[0], state.gripper_pos[1], 1.0);
    if let Some([x, y]) = state.rendered_object_xy() {
        splat(obj_ch, x, y, 1.2);
    }
    match state.task_id {
        0 => fill_rect(task_ch, LEFT_BIN, [BIN_HALF, BIN_HALF], 0.5),
        1 => fill_rect(task_ch, RIGHT_BIN, [BIN_HALF, BIN_HALF], 0.5),
        2 => fill_rect(task_ch, [0.5, LINE_Y], [0.5, 0.5 / IMAGE_SIZE as f64], 0.5),
        _ => fill_rect(task_ch, [0.5, 0.92], [0.04, 0.04], 0.5),
    }
    ImageObs { pixels }
}

/// Surface samples of the table plane and (when one exists) the object box,
/// with isotropic Gaussian noise. The object's share is `object_point_fraction`.
pub fn sample_pointcloud(state: &EnvState, n: usize, seed: u64, cfg: &EnvConfig) -> PointCloud {
    assert!(n >= 64, "point clouds need at least 64 points");
    let mut rng = seeding::rng(seed);
    let noise = Normal::new(0.0, cfg.cloud_noise).expect("valid noise");
    let n_obj = if state.object_pos.is_some() { (n as f64 * cfg.object_point_fraction).round() as usize } else { 0 };
    let mut points = Vec::with_capacity(n);
    for _ in 0..n - n_obj {
        points.push([rng.random::<f64>(), rng.random::<f64>(), state.table_height]);
    }
    if let Some(c) = state.object_pos {
        let (a, h) = (OBJECT_HALF_WIDTH, OBJECT_HALF_HEIGHT);
        let top = (2.0 * a) * (2.0 * a);
        let side = (2.0 * a) * (2.0 * h);
        let total = top + 4.0 * side;
        for _ in 0..n_obj {
            let u: f64 = rng.random::<f64>() * total;
            let s: f64 = rng.random_range(-1.0..1.0);
            let t: f64 = rng.random_range(-1.0..1.0);
            let p = if u < top {
                [c[0] + s * a, c[1] + t * a, c[2] + h]
            } else {
                let face = ((u - top) / side).floor().min(3.0) as usize;
                let z = c[2] + t * h;
                match face {
                    0 => [c[0] - a, c[1] + s * a, z],
                    1 => [c[0] + a, c[1] + s * a, z],
                    2 => [c[0] + s * a, c[1] - a, z],
                    _ => [c[0] + s * a, c[1] + a, z],
                }
            };
            points.push(p);
        }
    }
    let points = points
        .into_iter()
        .map(|p| {
            let mut q = [0f32; 3];
            for i in 0..3 {
                q[i] = (p[i] + noise.sample(&mut rng)) as f32;
            }
            q
        })
        .collect();
    PointCloud { points }
}

fn toward(from: [f64; 3], to: [f64; 3], grip: f64, max_step: f64) -> Action {
    let mut d = [0.0; 4];
    for i in 0..3 {
        d[i] = (to[i] - from[i]).clamp(-max_step, max_step);
    }
    d[3] = grip;
    Action { delta: d }
}

fn reached(a: f64, b: f64) -> bool {
    (a - b).abs() <= REACHED
}

/// Waypoint controller using the true state (including all heights).
pub fn scripted_expert(state: &EnvState, cfg: &EnvConfig) -> Action {
    let m = cfg.max_step;
    let g = state.gripper_pos;
    let obj = match state.object_pos {
        Some(o) if !state.decoy => o,
        _ => return toward(g, RETREAT_POSE, -1.0, m),
    };
    if !state.object_held {
        if state.grip > 0.5 {
            // closed on nothing: reopen before trying again
            return Action { delta: [0.0, 0.0, 0.0, -1.0] };
        }
        if !(reached(g[0], obj[0]) && reached(g[1], obj[1])) {
            return toward(g, [obj[0], obj[1], obj[2] + APPROACH_CLEARANCE], -1.0, m);
        }
        if !reached(g[2], obj[2]) {
            return toward(g, obj, -1.0, m);
        }
        return Action { delta: [0.0, 0.0, 0.0, 1.0] };
    }
    let rest = state.resting_z();
    match state.task_id {
        0 | 1 => {
            let bin = if state.task_id == 0 { LEFT_BIN } else { RIGHT_BIN };
            let carry = rest + CARRY_CLEARANCE;
            let at_bin = reached(g[0], bin[0]) && reached(g[1], bin[1]);
            if at_bin {
                Action { delta: [0.0, 0.0, 0.0, -1.0] }
            } else if g[2] < carry - REACHED {
                toward(g, [g[0], g[1], carry], 1.0, m)
            } else {
                toward(g, [bin[0], bin[1], carry], 1.0, m)
            }
        }
        2 => toward(g, [g[0], LINE_Y + 0.05, rest], 1.0, m),
        _ => toward(g, [g[0], g[1], rest + LIFT_HEIGHT + 0.05], 1.0, m),
    }
}

/// One query to a policy. `state` is privileged and only read by oracle
/// policies such as the scripted expert.
pub struct PolicyQuery<'a> {
    pub image: &'a ImageObs,
    pub proprio: [f32; STATE_DIM],
    pub task_id: u8,
    pub cloud: Option<&'a PointCloud>,
    pub state: &'a EnvState,
    pub rng: &'a mut ChaCha8Rng,
}

/// Maps observations to action chunks. Chunks are executed open loop for their
/// full length before the policy is queried again.
pub trait Policy {
    /// Whether the policy consumes point clouds (otherwise `cloud` is `None`).
    fn uses_cloud(&self) -> bool;
    fn act(&mut self, queries: &mut [PolicyQuery<'_>]) -> Vec<Vec<Action>>;
}

/// The scripted expert, re-queried every step.
pub struct ExpertPolicy {
    pub cfg: EnvConfig,
}

impl Policy for ExpertPolicy {
    fn uses_cloud(&self) -> bool {
        false
    }

    fn act(&mut self, queries: &mut [PolicyQuery<'_>]) -> Vec<Vec<Action>> {
        queries.iter().map(|q| vec![scripted_expert(q.state, &self.cfg)]).collect()
    }
}

/// Uniform random actions within the clip bounds.
pub struct RandomPolicy {
    pub chunk: usize,
    pub max_step: f64,
}

impl Policy for RandomPolicy {
    fn uses_cloud(&self) -> bool {
        false
    }

    fn act(&mut self, queries: &mut [PolicyQuery<'_>]) -> Vec<Vec<Action>> {
        let m = self.max_step;
        queries
            .iter_mut()
            .map(|q| {
                (0..self.chunk)
                    .map(|_| Action {
                        delta: [
                            q.rng.random_range(-m..m),
                            q.rng.random_range(-m..m),
                            q.rng.random_range(-m..m),
                            q.rng.random_range(-1.0..1.0),
                        ],
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub episodes: usize,
    pub successes: usize,
    pub refusals: usize,
}

impl Tally {
    pub fn success_rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.successes as f64 / self.episodes as f64
        }
    }

    pub fn refusal_rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.refusals as f64 / self.episodes as f64
        }
    }

    fn add(&mut self, success: bool, refused: bool) {
        self.episodes += 1;
        self.successes += success as usize;
        self.refusals += refused as usize;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    #[serde(flatten)]
    pub tally: Tally,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub success_rate: f64,
    /// Fraction of episodes in which grip never exceeded 0.5. Meaningful for
    /// decoy probes.
    pub refusal_rate: f64,
    pub episodes: usize,
    pub seed_list: Vec<u64>,
    pub per_seed: Vec<SeedResult>,
    pub per_task: Vec<Tally>,
    pub decoy: bool,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

impl EvalReport {
    pub fn seed_success_mean_std(&self) -> (f64, f64) {
        mean_std(&self.per_seed.iter().map(|s| s.tally.success_rate()).collect::<Vec<_>>())
    }

    pub fn seed_refusal_mean_std(&self) -> (f64, f64) {
        mean_std(&self.per_seed.iter().map(|s| s.tally.refusal_rate()).collect::<Vec<_>>())
    }

    /// One row per seed plus a `mean` summary row (with per-seed std columns).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,episodes,successes,success_rate,refusals,refusal_rate,success_std,refusal_std\n");
        for r in &self.per_seed {
            let t = &r.tally;
            s += &format!("{},{},{},{:.6},{},{:.6},,\n", r.seed, t.episodes, t.successes, t.success_rate(), t.refusals, t.refusal_rate());
        }
        let (sm, ss) = self.seed_success_mean_std();
        let (rm, rs) = self.seed_refusal_mean_std();
        let succ: usize = self.per_seed.iter().map(|r| r.tally.successes).sum();
        let refu: usize = self.per_seed.iter().map(|r| r.tally.refusals).sum();
        s += &format!("mean,{},{},{:.6},{},{:.6},{:.6},{:.6}\n", self.episodes, succ, sm, refu, rm, ss, rs);
        s
    }
}

/// Episode seed for `(seed, episode)`; shared by every arm evaluated on a probe.
pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    seeding::derive(seeding::derive_str(seed, "eval-episode"), episode as u64)
}

struct Running {
    state: EnvState,
    image: ImageObs,
    cloud: PointCloud,
    rng: ChaCha8Rng,
    refused: bool,
    task: u8,
}

/// Runs `episodes` episodes per seed. When the probe leaves the task open,
/// episode `e` uses task `e % 4`. All episodes of a seed advance in lockstep so
/// that policy queries are batched.
pub fn evaluate_policy(
    policy: &mut dyn Policy,
    probe: &ProbeSpec,
    episodes: usize,
    seeds: &[u64],
    cfg: &EnvConfig,
) -> Result<EvalReport, EnvError> {
    let mut per_seed = Vec::new();
    let mut per_task = vec![Tally::default(); NUM_TASKS];
    let mut total = Tally::default();
    for &seed in seeds {
        let mut tally = Tally::default();
        let mut running = Vec::with_capacity(episodes);
        for e in 0..episodes {
            let mut p = probe.clone();
            p.task_id = Some(probe.task_id.unwrap_or((e % NUM_TASKS) as u8));
            let es = episode_seed(seed, e);
            let (state, image, cloud) = reset(es, &p, cfg)?;
            let task = state.task_id;
            running.push(Running { state, image, cloud, rng: seeding::rng(seeding::derive_str(es, "policy")), refused: true, task });
        }
        let mut plans: Vec<std::collections::VecDeque<Action>> = vec![Default::default(); episodes];
        loop {
            let need: Vec<usize> = (0..episodes).filter(|&i| !running[i].state.done && plans[i].is_empty()).collect();
            if !need.is_empty() {
                let uses_cloud = policy.uses_cloud();
                let mut queries: Vec<PolicyQuery> = Vec::with_capacity(need.len());
                let mut slots: Vec<Option<&mut Running>> = running.iter_mut().map(Some).collect();
                for &i in &need {
                    let r = slots[i].take().expect("each episode queried once");
                    queries.push(PolicyQuery {
                        image: &r.image,
                        proprio: r.state.proprio(),
                        task_id: r.state.task_id,
                        cloud: uses_cloud.then_some(&r.cloud),
                        state: &r.state,
                        rng: &mut r.rng,
                    });
                }
                let chunks = policy.act(&mut queries);
                drop(queries);
                for (&i, chunk) in need.iter().zip(chunks) {
                    assert!(!chunk.is_empty(), "policy returned an empty chunk");
                    plans[i].extend(chunk);
                }
            }
            let mut any = false;
            for i in 0..episodes {
                let r = &mut running[i];
                if r.state.done {
                    continue;
                }
                let a = plans[i].pop_front().expect("plan filled above");
                let out = step(&r.state, &a, cfg)?;
                if out.state.grip > 0.5 {
                    r.refused = false;
                }
                r.state = out.state;
                r.image = out.image;
                r.cloud = out.cloud;
                if r.state.done {
                    plans[i].clear();
                } else {
                    any = true;
                }
            }
            if !any {
                break;
            }
        }
        for r in &running {
            tally.add(r.state.success, r.refused);
            per_task[r.task as usize].add(r.state.success, r.refused);
            total.add(r.state.success, r.refused);
        }
        per_seed.push(SeedResult { seed, tally });
    }
    Ok(EvalReport {
        success_rate: total.success_rate(),
        refusal_rate: total.refusal_rate(),
        episodes: total.episodes,
        seed_list: seeds.to_vec(),
        per_seed,
        per_task,
        decoy: probe.decoy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EnvConfig {
        EnvConfig::default()
    }

    #[test]
    fn reset_is_deterministic() {
        let p = ProbeSpec::default();
        let a = reset(0, &p, &cfg()).unwrap();
        let b = reset(0, &p, &cfg()).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn reset_rejects_bad_heights() {
        let mut p = ProbeSpec::default();
        p.table_height = HeightDist::Fixed(0.25);
        assert_eq!(reset(0, &p, &cfg()).unwrap_err(), EnvError::TableHeight(0.25));
        p.table_height = HeightDist::Uniform([-0.1, 0.1]);
        assert!(reset(0, &p, &cfg()).is_err());
        p.table_height = HeightDist::Mix(vec![HeightDist::Fixed(0.003), HeightDist::Fixed(0.3)]);
        assert_eq!(reset(0, &p, &cfg()).unwrap_err(), EnvError::TableHeight(0.3));
        p.table_height = HeightDist::Mix(vec![]);
        assert!(reset(0, &p, &cfg()).is_err());
    }

    #[test]
    fn mixed_heights_draw_from_every_component() {
        let mut p = ProbeSpec::default();
        p.table_height = HeightDist::Mix(vec![HeightDist::Fixed(0.003), HeightDist::Uniform([0.1, 0.2])]);
        let hs: Vec<f64> = (0..400).map(|s| reset(s, &p, &cfg()).unwrap().0.table_height).collect();
        let fixed = hs.iter().filter(|&&h| h == 0.003).count();
        assert!(hs.iter().all(|&h| h == 0.003 || (0.1..0.2).contains(&h)));
        // Binomial(400, 1/2), 4 sigma.
        assert!((fixed as f64 - 200.0).abs() <= 40.0, "{fixed}");
    }

    #[test]
    fn non_decoy_object_rests_on_table() {
        let mut p = ProbeSpec::default();
        p.table_height = HeightDist::Fixed(0.052);
        let (s, _, _) = reset(5, &p, &cfg()).unwrap();
        let o = s.object_pos.unwrap();
        assert_eq!(o[2], 0.052 + OBJECT_HALF_HEIGHT);
        assert!((0.3..0.7).contains(&o[0]) && (0.25..0.55).contains(&o[1]));
    }

    #[test]
    fn train_and_eval_heights_render_identically() {
        let mut lo = ProbeSpec::default();
        lo.table_height = HeightDist::Fixed(0.003);
        let mut hi = lo.clone();
        hi.table_height = HeightDist::Fixed(0.052);
        for seed in 0..10 {
            let a = reset(seed, &lo, &cfg()).unwrap();
            let b = reset(seed, &hi, &cfg()).unwrap();
            assert_eq!(a.0.object_pos.unwrap()[..2], b.0.object_pos.unwrap()[..2]);
            assert_eq!(a.1, b.1);
            assert_ne!(a.2, b.2);
        }
    }

    #[test]
    fn decoy_cloud_has_nothing_above_the_table() {
        let mut p = ProbeSpec::default();
        p.decoy = true;
        let c = cfg();
        let (s, _, cloud) = reset(3, &p, &c).unwrap();
        assert!(s.object_pos.is_none());
        let eps = 5.0 * c.cloud_noise;
        assert!(cloud.points.iter().all(|q| (q[2] as f64) <= s.table_height + eps));
    }

    #[test]
    fn zero_action_only_advances_step_count() {
        let (s, _, _) = reset(1, &ProbeSpec::default(), &cfg()).unwrap();
        let out = step(&s, &Action::ZERO, &cfg()).unwrap();
        let mut expect = s.clone();
        expect.step_count += 1;
        assert_eq!(out.state, expect);
    }

    #[test]
    fn closing_at_the_object_grasps_it() {
        let (mut s, _, _) = reset(2, &ProbeSpec::default(), &cfg()).unwrap();
        s.gripper_pos = s.object_pos.unwrap();
        let out = step(&s, &Action { delta: [0.0, 0.0, 0.0, 1.0] }, &cfg()).unwrap();
        assert!(out.state.object_held && out.info.grasped);
    }

    #[test]
    fn closing_on_a_phantom_grasps_nothing() {
        let mut p = ProbeSpec::default();
        p.decoy = true;
        let (mut s, _, _) = reset(2, &p, &cfg()).unwrap();
        let [x, y] = s.phantom_xy.unwrap();
        s.gripper_pos = [x, y, s.table_height + OBJECT_HALF_HEIGHT];
        let out = step(&s, &Action { delta: [0.0, 0.0, 0.0, 1.0] }, &cfg()).unwrap();
        assert!(!out.state.object_held);
    }

    #[test]
    fn stepping_a_finished_episode_is_an_error() {
        let (mut s, _, _) = reset(2, &ProbeSpec::default(), &cfg()).unwrap();
        s.done = true;
        assert_eq!(step(&s, &Action::ZERO, &cfg()).unwrap_err(), EnvError::EpisodeDone);
    }

    #[test]
    fn shifting_the_object_one_cell_translates_its_blob() {
        let (mut s, _, _) = reset(0, &ProbeSpec::default(), &cfg()).unwrap();
        s.object_pos = Some([12.0 / 32.0, 16.0 / 32.0, 0.023]);
        let a = render_image(&s);
        s.object_pos = Some([13.0 / 32.0, 16.0 / 32.0, 0.023]);
        let b = render_image(&s);
        let plane = IMAGE_SIZE * IMAGE_SIZE;
        assert_eq!(a.pixels[..plane], b.pixels[..plane]);
        assert_eq!(a.pixels[2 * plane..], b.pixels[2 * plane..]);
        for r in 0..IMAGE_SIZE {
            for c in 1..IMAGE_SIZE {
                assert_eq!(b.pixels[plane + r * IMAGE_SIZE + c], a.pixels[plane + r * IMAGE_SIZE + c - 1]);
            }
        }
    }

    #[test]
    fn cloud_statistics() {
        let c = cfg();
        let mut p = ProbeSpec::default();
        p.table_height = HeightDist::Fixed(0.052);
        let (s, _, _) = reset(9, &p, &c).unwrap();
        let cloud = sample_pointcloud(&s, 512, 77, &c);
        assert_eq!(cloud.len(), 512);
        let n_table = 512 - (512.0 * c.object_point_fraction).round() as usize;
        let mean = cloud.points[..n_table].iter().map(|q| q[2] as f64).sum::<f64>() / n_table as f64;
        assert!((mean - 0.052).abs() < 0.001, "{mean}");
        assert_eq!(sample_pointcloud(&s, 512, 77, &c), cloud);
    }

    #[test]
    fn expert_heads_for_the_hover_point_with_an_open_gripper() {
        let (s, _, _) = reset(4, &ProbeSpec::default(), &cfg()).unwrap();
        let a = scripted_expert(&s, &cfg());
        let o = s.object_pos.unwrap();
        for i in 0..2 {
            assert_eq!(a.delta[i].signum(), (o[i] - s.gripper_pos[i]).signum());
        }
        assert!(a.delta[3] <= 0.0);
    }

    #[test]
    fn csv_has_seed_rows_and_summary() {
        let mut pol = RandomPolicy { chunk: 8, max_step: 0.05 };
        let rep = evaluate_policy(&mut pol, &ProbeSpec::default(), 4, &[0, 1, 2], &cfg()).unwrap();
        let csv = rep.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().last().unwrap().starts_with("mean,12,"));
    }
}
