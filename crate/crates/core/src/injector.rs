//! Point-cloud conditioning for a frozen expert: a hierarchical set encoder,
//! a bottlenecked fusion of expert tokens with the cloud embedding, and one
//! zero-initialised adapter per injected block whose output is added to that
//! block's token stream.
//!
//! Parameter names:
//!
//! ```text
//! pc.l{j} pc.proj                              point-cloud encoder
//! inj.chan inj.down inj.fuse inj.up            shared fusion path
//! inj.adapter.{block}.l1 inj.adapter.{block}.l2
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expert::{ExpertConfig, InjectionSource, StepInjector};
use crate::graph::{Activation, Graph, StoreId, Var};
use crate::params::{self, FreezeMask, ParamStore};
use crate::seeding;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcEncoderConfig {
    pub widths: Vec<usize>,
    pub pool: usize,
    pub d_pc: usize,
}

impl Default for PcEncoderConfig {
    fn default() -> Self {
        Self { widths: vec![64, 128, 256], pool: 4, d_pc: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectorConfig {
    pub encoder: PcEncoderConfig,
    pub bottleneck: usize,
    pub num_points: usize,
}

impl Default for InjectorConfig {
    fn default() -> Self {
        Self { encoder: PcEncoderConfig::default(), bottleneck: 32, num_points: 512 }
    }
}

impl InjectorConfig {
    pub fn validate(&self) -> Result<(), InjectorError> {
        let e = &self.encoder;
        if e.widths.is_empty() || e.widths.contains(&0) || e.d_pc == 0 || self.bottleneck == 0 || e.pool == 0 {
            return Err(InjectorError::InvalidConfig("widths, pool, d_pc and bottleneck must be positive".into()));
        }
        let total = e.pool.pow(e.widths.len() as u32 - 1);
        if self.num_points == 0 || !self.num_points.is_multiple_of(total) {
            return Err(InjectorError::InvalidConfig(format!(
                "{} points are not divisible by the cumulative pooling factor {total}",
                self.num_points
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum InjectorError {
    #[error("invalid injector config: {0}")]
    InvalidConfig(String),
    #[error("injected block {0} is out of range")]
    BlockId(usize),
    #[error("injected block {0} listed twice")]
    DuplicateId(usize),
    #[error("no blocks to inject into")]
    NoBlocks,
    #[error("expected {expected} points per cloud, found {found}")]
    PointCount { expected: usize, found: usize },
    #[error("unknown freeze group {0:?}")]
    UnknownGroup(String),
}

/// Validates injected ids against the expert depth.
pub fn check_block_ids(ids: &[usize], n_blocks: usize) -> Result<(), InjectorError> {
    if ids.is_empty() {
        return Err(InjectorError::NoBlocks);
    }
    for (j, &i) in ids.iter().enumerate() {
        if i >= n_blocks {
            return Err(InjectorError::BlockId(i));
        }
        if ids[..j].contains(&i) {
            return Err(InjectorError::DuplicateId(i));
        }
    }
    Ok(())
}

pub fn init_injector<T: Real>(
    expert: &ExpertConfig,
    cfg: &InjectorConfig,
    ids: &[usize],
    seed: u64,
) -> Result<ParamStore<T>, InjectorError> {
    cfg.validate()?;
    check_block_ids(ids, expert.n_blocks)?;
    let mut rng = seeding::rng(seeding::derive_str(seed, "injector-init"));
    let r = &mut rng;
    let d = expert.d_model;
    let e = &cfg.encoder;
    let mut s = ParamStore::new();
    let mut fan_in = 3;
    for (j, &w) in e.widths.iter().enumerate() {
        params::add_linear(&mut s, r, &format!("pc.l{j}"), fan_in, w);
        fan_in = w;
    }
    params::add_linear(&mut s, r, "pc.proj", e.widths.iter().sum(), e.d_pc);
    params::add_linear(&mut s, r, "inj.chan", e.d_pc, d);
    params::add_linear(&mut s, r, "inj.down", d, cfg.bottleneck);
    params::add_linear(&mut s, r, "inj.fuse", cfg.bottleneck + d, cfg.bottleneck);
    params::add_linear(&mut s, r, "inj.up", cfg.bottleneck, d);
    for &i in ids {
        params::add_linear(&mut s, r, &format!("inj.adapter.{i}.l1"), d, d);
        params::add_linear_zero(&mut s, &format!("inj.adapter.{i}.l2"), d, d);
    }
    Ok(s)
}

/// Sorts points by `(z, y, x)` so that grouping no longer depends on input order.
pub fn canonical_order(cloud: &[f32]) -> Vec<f32> {
    let mut pts: Vec<[f32; 3]> = cloud.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
    pts.sort_by(|a, b| a[2].total_cmp(&b[2]).then(a[1].total_cmp(&b[1])).then(a[0].total_cmp(&b[0])));
    pts.into_iter().flatten().collect()
}

/// Fixed affine map bringing workspace coordinates to roughly unit range; the
/// table-height axis spans only `[0, 0.25]` so it is stretched the most.
const COORD_SCALE: [f32; 3] = [2.0, 2.0, 8.0];
const COORD_SHIFT: [f32; 3] = [-1.0, -1.0, -1.0];

/// Embeds `clouds` (`batch` clouds of `num_points` points, flattened) into
/// `[B, d_pc]`. Each level applies a shared pointwise transform, records a
/// global max, then max-pools groups of `pool` consecutive points.
pub fn encode_pointcloud<'a, T: Real>(
    g: &mut Graph<'a, T>,
    s: StoreId,
    cfg: &InjectorConfig,
    clouds: &[f32],
    batch: usize,
) -> Result<Var, InjectorError> {
    let n = cfg.num_points;
    if batch == 0 || clouds.len() != batch * n * 3 {
        return Err(InjectorError::PointCount { expected: n, found: if batch == 0 { 0 } else { clouds.len() / (3 * batch) } });
    }
    let mut data = Vec::with_capacity(clouds.len());
    for c in clouds.chunks_exact(n * 3) {
        for p in canonical_order(c).chunks_exact(3) {
            for j in 0..3 {
                data.push(T::lit((p[j] * COORD_SCALE[j] + COORD_SHIFT[j]) as f64));
            }
        }
    }
    let mut x = g.input(Tensor::new(&[batch * n, 3], data));
    let mut points = n;
    let levels = cfg.encoder.widths.len();
    let mut globals = Vec::with_capacity(levels);
    for j in 0..levels {
        x = g.dense(s, &format!("pc.l{j}"), x);
        x = g.act(x, Activation::Relu);
        globals.push(g.group_max(x, points));
        if j + 1 < levels {
            x = g.group_max(x, cfg.encoder.pool);
            points /= cfg.encoder.pool;
        }
    }
    let z = g.concat(&globals);
    Ok(g.dense(s, "pc.proj", z))
}

/// Injection driven by a projected cloud embedding `pc_proj` (`[B, d_model]`).
pub struct GraphInjection {
    store: StoreId,
    ids: Vec<usize>,
    pc_proj: Var,
    chunk: usize,
}

impl GraphInjection {
    /// Channel-projects `pc_emb` and prepares the per-block signal path.
    pub fn new<'a, T: Real>(g: &mut Graph<'a, T>, store: StoreId, ids: &[usize], pc_emb: Var, chunk: usize) -> Self {
        let pc_proj = g.dense(store, "inj.chan", pc_emb);
        Self { store, ids: ids.to_vec(), pc_proj, chunk }
    }

    fn from_projection(store: StoreId, ids: &[usize], pc_proj: Var, chunk: usize) -> Self {
        Self { store, ids: ids.to_vec(), pc_proj, chunk }
    }
}

impl<'a, T: Real> InjectionSource<'a, T> for GraphInjection {
    fn block_ids(&self) -> &[usize] {
        &self.ids
    }

    fn signals(&mut self, g: &mut Graph<'a, T>, tokens: Var) -> Vec<Var> {
        let s = self.store;
        let down = g.dense(s, "inj.down", tokens);
        let pc = g.repeat_rows(self.pc_proj, self.chunk);
        let f = g.concat(&[down, pc]);
        let f = g.dense(s, "inj.fuse", f);
        let f = g.act(f, Activation::Gelu);
        let ctx = g.dense(s, "inj.up", f);
        self.ids
            .iter()
            .map(|&i| {
                let h = g.dense(s, &format!("inj.adapter.{i}.l1"), ctx);
                let h = g.act(h, Activation::Gelu);
                g.dense(s, &format!("inj.adapter.{i}.l2"), h)
            })
            .collect()
    }
}

/// Sampling-time injector: the projected cloud embedding is computed once and
/// the signals are rebuilt at every denoising step.
pub struct InjectorContext<'p, T> {
    pub store: &'p ParamStore<T>,
    pub ids: Vec<usize>,
    pub pc_proj: Tensor<T>,
    pub chunk: usize,
}

impl<'p, T: Real> InjectorContext<'p, T> {
    pub fn new(
        store: &'p ParamStore<T>,
        cfg: &InjectorConfig,
        ids: &[usize],
        chunk: usize,
        clouds: &[f32],
        batch: usize,
    ) -> Result<Self, InjectorError> {
        let pc_proj = {
            let mut g = Graph::new(false);
            let s = g.bind(store, None);
            let emb = encode_pointcloud(&mut g, s, cfg, clouds, batch)?;
            let p = g.dense(s, "inj.chan", emb);
            g.value(p).clone()
        };
        Ok(Self { store, ids: ids.to_vec(), pc_proj, chunk })
    }
}

impl<'p, T: Real> StepInjector<T> for InjectorContext<'p, T> {
    fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> Box<dyn InjectionSource<'a, T> + 'a> {
        let s = g.bind(self.store, None);
        let pc = g.input(self.pc_proj.clone());
        Box::new(GraphInjection::from_projection(s, &self.ids, pc, self.chunk))
    }
}

/// Named groups of expert tensors that a freeze policy may leave trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeGroup {
    ObsEncoder,
    OutputHead,
    LastBlockFf,
}

impl FreezeGroup {
    pub fn parse(name: &str) -> Result<Self, InjectorError> {
        match name {
            "obs_encoder" => Ok(Self::ObsEncoder),
            "output_head" => Ok(Self::OutputHead),
            "last_block_ff" => Ok(Self::LastBlockFf),
            other => Err(InjectorError::UnknownGroup(other.to_string())),
        }
    }

    fn prefix(self, n_blocks: usize) -> String {
        match self {
            Self::ObsEncoder => "obs.".into(),
            Self::OutputHead => "head.".into(),
            Self::LastBlockFf => format!("blocks.{}.ff.", n_blocks - 1),
        }
    }
}

/// Groups left trainable; everything else in the expert is frozen.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub unfrozen: Vec<FreezeGroup>,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self { unfrozen: vec![FreezeGroup::OutputHead, FreezeGroup::LastBlockFf, FreezeGroup::ObsEncoder] }
    }
}

impl FreezePolicy {
    pub fn freeze_all() -> Self {
        Self { unfrozen: Vec::new() }
    }

    /// Parses group names; `"default"` and `"freeze-all"` name the presets.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self, InjectorError> {
        match names {
            [one] if one.as_ref() == "default" => Ok(Self::default()),
            [one] if one.as_ref() == "freeze-all" => Ok(Self::freeze_all()),
            _ => Ok(Self { unfrozen: names.iter().map(|n| FreezeGroup::parse(n.as_ref())).collect::<Result<_, _>>()? }),
        }
    }

    pub fn names(&self) -> Vec<String> {
        if self.unfrozen.is_empty() {
            return vec!["freeze-all".into()];
        }
        self.unfrozen.iter().map(|g| serde_json::to_value(g).expect("group serialises").as_str().expect("string").to_string()).collect()
    }
}

pub fn apply_freeze_policy<T: Real>(expert: &ParamStore<T>, cfg: &ExpertConfig, policy: &FreezePolicy) -> FreezeMask {
    let prefixes: Vec<String> = policy.unfrozen.iter().map(|g| g.prefix(cfg.n_blocks)).collect();
    FreezeMask::from_frozen((0..expert.len()).map(|id| !prefixes.iter().any(|p| expert.name(id).starts_with(p.as_str()))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{self, EnvConfig, ProbeSpec};
    use crate::expert::{self, ObsBatch};
    use crate::params::{Adam, AdamConfig, Gradients};
    use rand::seq::SliceRandom;

    fn small() -> (ExpertConfig, InjectorConfig) {
        let e = ExpertConfig { n_blocks: 4, d_model: 16, n_heads: 2, chunk: 4, conv_channels: [4, 4], ..Default::default() };
        let i = InjectorConfig { encoder: PcEncoderConfig { widths: vec![8, 8, 8], pool: 4, d_pc: 8 }, bottleneck: 4, num_points: 64 };
        (e, i)
    }

    fn cloud(seed: u64, decoy: bool, n: usize) -> Vec<f32> {
        let cfg = EnvConfig { num_points: n, ..Default::default() };
        let (_, _, c) = env::reset(seed, &ProbeSpec { decoy, ..Default::default() }, &cfg).unwrap();
        c.flat()
    }

    fn embed<T: Real>(store: &ParamStore<T>, cfg: &InjectorConfig, clouds: &[f32], b: usize) -> Vec<f64> {
        let mut g = Graph::new(false);
        let s = g.bind(store, None);
        let v = encode_pointcloud(&mut g, s, cfg, clouds, b).unwrap();
        g.value(v).data.iter().map(|x| x.to_f64().unwrap()).collect()
    }

    #[test]
    fn encoder_is_permutation_invariant() {
        let (e, i) = small();
        let store = init_injector::<f32>(&e, &i, &[1], 0).unwrap();
        let c = cloud(3, false, 64);
        let base = embed(&store, &i, &c, 1);
        let mut rng = seeding::rng(1);
        for _ in 0..20 {
            let mut pts: Vec<&[f32]> = c.chunks_exact(3).collect();
            pts.shuffle(&mut rng);
            let shuffled: Vec<f32> = pts.concat();
            assert_eq!(embed(&store, &i, &shuffled, 1), base);
        }
    }

    #[test]
    fn identical_points_give_the_single_point_transform() {
        let (e, i) = small();
        let store = init_injector::<f64>(&e, &i, &[1], 0).unwrap();
        let pts: Vec<f32> = [0.3f32, 0.6, 0.1].repeat(64);
        let mut g = Graph::new(false);
        let s = g.bind(&store, None);
        let many = encode_pointcloud(&mut g, s, &i, &pts, 1).unwrap();
        // A single point repeated: every max is over identical rows, so each
        // level's global feature equals that level's transform of the point.
        let x0 = g.input(Tensor::new(&[1, 3], vec![0.3f32 as f64 * 2.0 - 1.0, 0.6f32 as f64 * 2.0 - 1.0, 0.1f32 as f64 * 8.0 - 1.0]));
        let mut x = x0;
        let mut levels = Vec::new();
        for j in 0..3 {
            x = g.dense(s, &format!("pc.l{j}"), x);
            x = g.act(x, Activation::Relu);
            levels.push(x);
        }
        let z = g.concat(&levels);
        let single = g.dense(s, "pc.proj", z);
        let d = g.value(many).max_abs_diff(g.value(single));
        assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn wrong_point_count_is_an_error() {
        let (e, i) = small();
        let store = init_injector::<f32>(&e, &i, &[1], 0).unwrap();
        let mut g = Graph::new(false);
        let s = g.bind(&store, None);
        assert_eq!(
            encode_pointcloud(&mut g, s, &i, &vec![0.0; 60 * 3], 1).unwrap_err(),
            InjectorError::PointCount { expected: 64, found: 60 }
        );
    }

    #[test]
    fn init_validates_ids_and_zeroes_adapters() {
        let (e, i) = small();
        assert_eq!(init_injector::<f32>(&e, &i, &[4], 0).unwrap_err(), InjectorError::BlockId(4));
        assert_eq!(init_injector::<f32>(&e, &i, &[1, 1], 0).unwrap_err(), InjectorError::DuplicateId(1));
        assert_eq!(init_injector::<f32>(&e, &i, &[], 0).unwrap_err(), InjectorError::NoBlocks);
        let s = init_injector::<f32>(&e, &i, &[2, 3], 0).unwrap();
        for b in [2, 3] {
            assert!(s.get(&format!("inj.adapter.{b}.l2.w")).unwrap().data.iter().all(|&v| v == 0.0));
        }
        assert!(s.bitwise_eq(&init_injector::<f32>(&e, &i, &[2, 3], 0).unwrap()));
        let bad = InjectorConfig { num_points: 60, ..i };
        assert!(matches!(bad.validate(), Err(InjectorError::InvalidConfig(_))));
    }

    #[test]
    fn injected_forward_matches_vanilla_at_init() {
        let (e, i) = small();
        let expert = expert::init_expert::<f32>(&e, 0).unwrap();
        let inj = init_injector::<f32>(&e, &i, &[1, 2, 3], 0).unwrap();
        let env_cfg = EnvConfig { num_points: 64, ..Default::default() };
        let (st, img, c) = env::reset(1, &ProbeSpec::default(), &env_cfg).unwrap();
        let state = st.proprio();
        let tasks = [st.task_id as usize];
        let obs = ObsBatch { images: &img.pixels, states: &state, tasks: &tasks };
        let x = params::init_normal::<f32>(&mut seeding::rng(2), &[4, 4], 1.0);
        let run = |with: bool| {
            let mut g = Graph::new(false);
            let se = g.bind(&expert, None);
            let si = g.bind(&inj, None);
            let cond = expert::encode_observation(&mut g, se, &e, &obs).unwrap();
            let xv = g.input(x.clone());
            let mut src = if with {
                let pc = encode_pointcloud(&mut g, si, &i, &c.flat(), 1).unwrap();
                Some(GraphInjection::new(&mut g, si, &[1, 2, 3], pc, e.chunk))
            } else {
                None
            };
            let src_ref = src.as_mut().map(|s| s as &mut dyn InjectionSource<'_, f32>);
            let out = expert::forward_denoise(&mut g, se, &e, xv, &[7], cond, &[], src_ref).unwrap();
            g.value(out).clone()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn zero_tokens_still_carry_the_cloud() {
        let (e, i) = small();
        let mut inj = init_injector::<f64>(&e, &i, &[2], 0).unwrap();
        let w = inj.get_mut("inj.adapter.2.l2.w").unwrap();
        *w = params::init_normal(&mut seeding::rng(5), &w.shape.clone(), 0.3);
        let signal = |c: &[f32]| {
            let mut g = Graph::new(false);
            let s = g.bind(&inj, None);
            let pc = encode_pointcloud(&mut g, s, &i, c, 1).unwrap();
            let mut src = GraphInjection::new(&mut g, s, &[2], pc, e.chunk);
            let tokens = g.input(Tensor::zeros(&[e.chunk, e.d_model]));
            let out = src.signals(&mut g, tokens);
            g.value(out[0]).clone()
        };
        let real = signal(&cloud(4, false, 64));
        let decoy = signal(&cloud(4, true, 64));
        assert!(real.data.iter().any(|&v| v != 0.0));
        assert!(real.max_abs_diff(&decoy) > 0.0);
    }

    #[test]
    fn freeze_policies() {
        let e = ExpertConfig::default();
        let store = expert::init_expert::<f32>(&e, 0).unwrap();
        let mask = apply_freeze_policy(&store, &e, &FreezePolicy::default());
        for id in 0..store.len() {
            let n = store.name(id);
            let trainable = n.starts_with("obs.") || n.starts_with("head.") || n.starts_with("blocks.11.ff.");
            assert_eq!(mask.is_frozen(id), !trainable, "{n}");
            if n.contains(".qkv") || n.contains(".out.") && n.starts_with("blocks") {
                assert!(mask.is_frozen(id));
            }
        }
        assert_eq!(FreezePolicy::from_names(&["obs_encoder", "head"]).unwrap_err(), InjectorError::UnknownGroup("head".into()));
        assert_eq!(FreezePolicy::from_names(&["default"]).unwrap(), FreezePolicy::default());
        assert_eq!(FreezePolicy::from_names(&FreezePolicy::default().names()).unwrap(), FreezePolicy::default());

        let all = apply_freeze_policy(&store, &e, &FreezePolicy::from_names(&["freeze-all"]).unwrap());
        assert_eq!(all.count_frozen(), store.len());
        let mut after = store.clone();
        let mut grads = Gradients::empty(store.len());
        for id in 0..store.len() {
            grads.grads[id] = Some(Tensor::new(&store.by_id(id).shape, vec![1.0; store.by_id(id).numel()]));
        }
        Adam::new(AdamConfig::default(), store.len()).step(&mut after, &grads, &all);
        assert!(after.bitwise_eq(&store));
    }
}
