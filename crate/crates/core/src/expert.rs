//! The action expert: a diffusion transformer over action chunks conditioned on
//! an observation embedding through adaLN-Zero modulation.
//!
//! Parameter names (the freeze policy keys on these prefixes):
//!
//! ```text
//! obs.conv1 obs.conv2 obs.proj1 obs.proj2 obs.task_emb   observation encoder
//! act_in pos temb.l1 temb.l2                             token and timestep embedding
//! blocks.{i}.ada blocks.{i}.qkv blocks.{i}.out           per block
//! blocks.{i}.ff.l1 blocks.{i}.ff.l2
//! head.ada head.out                                      output head
//! ```

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::NormStats;
use crate::diffusion::{self, Schedule};
use crate::env::{ACTION_DIM, IMAGE_CHANNELS, IMAGE_LEN, IMAGE_SIZE, NUM_TASKS, STATE_DIM};
use crate::graph::{Activation, ConvGeom, Graph, StoreId, Var};
use crate::params::{self, ParamStore};
use crate::seeding;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub chunk: usize,
    pub action_dim: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ff_ratio: usize,
    pub conv_channels: [usize; 2],
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            n_blocks: 12,
            d_model: 128,
            n_heads: 4,
            chunk: 8,
            action_dim: ACTION_DIM,
            diffusion_steps: 50,
            beta_start: 1e-4,
            beta_end: 2e-2,
            ff_ratio: 2,
            conv_channels: [16, 32],
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<(), ExpertError> {
        let bad = |m: &str| Err(ExpertError::InvalidConfig(m.to_string()));
        if self.n_blocks == 0 || self.d_model == 0 || self.n_heads == 0 || self.chunk == 0 || self.ff_ratio == 0 {
            return bad("dimensions must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if !self.d_model.is_multiple_of(2) {
            return bad("d_model must be even for the timestep embedding");
        }
        if self.action_dim != ACTION_DIM {
            return bad("action_dim must be 4");
        }
        if self.diffusion_steps < 2 {
            return bad("diffusion_steps must be at least 2");
        }
        if !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return bad("betas must satisfy 0 < start <= end < 1");
        }
        if self.conv_channels.contains(&0) {
            return bad("conv channels must be positive");
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    fn conv_geoms(&self) -> (ConvGeom, ConvGeom) {
        let [c1, c2] = self.conv_channels;
        let g1 = ConvGeom { in_c: IMAGE_CHANNELS, in_h: IMAGE_SIZE, in_w: IMAGE_SIZE, out_c: c1, kernel: 3, stride: 2, pad: 1 };
        let g2 = ConvGeom { in_c: c1, in_h: g1.out_h(), in_w: g1.out_w(), out_c: c2, kernel: 3, stride: 1, pad: 1 };
        (g1, g2)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ExpertError {
    #[error("invalid expert config: {0}")]
    InvalidConfig(String),
    #[error("skip index {0} out of range")]
    SkipIndex(usize),
    #[error("injection index {0} out of range or repeated")]
    InjectionIndex(usize),
    #[error("injection signal for block {block} has shape {found:?}, expected {expected:?}")]
    SignalShape { block: usize, found: Vec<usize>, expected: Vec<usize> },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("every element of the batch is padding")]
    AllMasked,
}

/// Builds the default-initialised expert. Modulation layers start at zero so
/// each block is the identity map.
pub fn init_expert<T: Real>(cfg: &ExpertConfig, seed: u64) -> Result<ParamStore<T>, ExpertError> {
    cfg.validate()?;
    let mut rng = seeding::rng(seeding::derive_str(seed, "expert-init"));
    let r = &mut rng;
    let d = cfg.d_model;
    let mut s = ParamStore::new();
    let (g1, g2) = cfg.conv_geoms();
    s.insert("obs.conv1.w", params::init_uniform(r, &[g1.out_c, g1.in_c * 9], g1.in_c * 9));
    s.insert("obs.conv1.b", params::init_uniform(r, &[g1.out_c], g1.in_c * 9));
    s.insert("obs.conv2.w", params::init_uniform(r, &[g2.out_c, g2.in_c * 9], g2.in_c * 9));
    s.insert("obs.conv2.b", params::init_uniform(r, &[g2.out_c], g2.in_c * 9));
    params::add_linear(&mut s, r, "obs.proj1", 2 * g2.out_c + STATE_DIM, d);
    params::add_linear(&mut s, r, "obs.proj2", d, d);
    s.insert("obs.task_emb", params::init_normal(r, &[NUM_TASKS, d], 1.0));
    params::add_linear(&mut s, r, "act_in", ACTION_DIM, d);
    s.insert("pos", params::init_normal(r, &[cfg.chunk, d], 0.02));
    params::add_linear(&mut s, r, "temb.l1", d, d);
    params::add_linear(&mut s, r, "temb.l2", d, d);
    for i in 0..cfg.n_blocks {
        params::add_linear_zero(&mut s, &format!("blocks.{i}.ada"), d, 6 * d);
        params::add_linear(&mut s, r, &format!("blocks.{i}.qkv"), d, 3 * d);
        params::add_linear(&mut s, r, &format!("blocks.{i}.out"), d, d);
        params::add_linear(&mut s, r, &format!("blocks.{i}.ff.l1"), d, cfg.ff_ratio * d);
        params::add_linear(&mut s, r, &format!("blocks.{i}.ff.l2"), cfg.ff_ratio * d, d);
    }
    params::add_linear_zero(&mut s, "head.ada", d, 2 * d);
    params::add_linear(&mut s, r, "head.out", d, ACTION_DIM);
    Ok(s)
}

/// Observation inputs for a batch. `states` are already normalised.
#[derive(Clone, Copy, Debug)]
pub struct ObsBatch<'b> {
    pub images: &'b [f32],
    pub states: &'b [f32],
    pub tasks: &'b [usize],
}

impl ObsBatch<'_> {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    fn check(&self) -> Result<(), ExpertError> {
        let b = self.len();
        if self.images.len() != b * IMAGE_LEN {
            return Err(ExpertError::Shape(format!("images hold {} values for batch {b}", self.images.len())));
        }
        if self.states.len() != b * STATE_DIM {
            return Err(ExpertError::Shape(format!("states hold {} values for batch {b}", self.states.len())));
        }
        if let Some(&t) = self.tasks.iter().find(|&&t| t >= NUM_TASKS) {
            return Err(ExpertError::Shape(format!("task id {t} out of range")));
        }
        Ok(())
    }
}

/// Conv keypoints of the image, joined with the state, projected, plus the
/// task embedding. Output `[B, d_model]`.
pub fn encode_observation<'a, T: Real>(g: &mut Graph<'a, T>, s: StoreId, cfg: &ExpertConfig, obs: &ObsBatch) -> Result<Var, ExpertError> {
    obs.check()?;
    let b = obs.len();
    let (g1, g2) = cfg.conv_geoms();
    let img = g.input(Tensor::from_f32(&[b, IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], obs.images));
    let (w, bias) = (g.param(s, "obs.conv1.w"), g.param(s, "obs.conv1.b"));
    let h = g.conv2d(img, w, bias, g1);
    let h = g.act(h, Activation::Relu);
    let (w, bias) = (g.param(s, "obs.conv2.w"), g.param(s, "obs.conv2.b"));
    let h = g.conv2d(h, w, bias, g2);
    let keypoints = g.spatial_softmax(h);
    let state = g.input(Tensor::from_f32(&[b, STATE_DIM], obs.states));
    let z = g.concat(&[keypoints, state]);
    let z = g.dense(s, "obs.proj1", z);
    let z = g.act(z, Activation::Silu);
    let z = g.dense(s, "obs.proj2", z);
    let table = g.param(s, "obs.task_emb");
    let task = g.embedding(table, obs.tasks);
    Ok(g.add(z, task))
}

/// Sinusoidal features of integer timesteps, `[B, d]`.
pub fn timestep_features<T: Real>(t: &[usize], d: usize) -> Tensor<T> {
    let half = d / 2;
    let mut out = Vec::with_capacity(t.len() * d);
    for &ti in t {
        for i in 0..half {
            let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out.push(T::lit((ti as f64 * f).sin()));
        }
        for i in 0..half {
            let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out.push(T::lit((ti as f64 * f).cos()));
        }
    }
    Tensor::new(&[t.len(), d], out)
}

/// Supplies additive signals for a set of blocks. `signals` is called once per
/// forward pass with the token stream at the input of the earliest injected
/// block and returns one `[B * K, d_model]` signal per id in `block_ids` order.
pub trait InjectionSource<'a, T: Real> {
    fn block_ids(&self) -> &[usize];
    fn signals(&mut self, g: &mut Graph<'a, T>, tokens: Var) -> Vec<Var>;
}

/// Precomputed signals, fed in as graph inputs.
pub struct FixedSignals<T> {
    pub ids: Vec<usize>,
    pub tensors: Vec<Tensor<T>>,
}

impl<'a, T: Real> InjectionSource<'a, T> for FixedSignals<T> {
    fn block_ids(&self) -> &[usize] {
        &self.ids
    }

    fn signals(&mut self, g: &mut Graph<'a, T>, _tokens: Var) -> Vec<Var> {
        self.tensors.iter().map(|t| g.input(t.clone())).collect()
    }
}

/// Noise prediction for `x_t` (`[B * K, 4]`) at timesteps `t` (one per sample).
/// Blocks in `skip` pass their input through unchanged. Injected signals are
/// added right after their block's residual merge.
#[allow(clippy::too_many_arguments)]
pub fn forward_denoise<'a, T: Real>(
    g: &mut Graph<'a, T>,
    s: StoreId,
    cfg: &ExpertConfig,
    x_t: Var,
    t: &[usize],
    cond: Var,
    skip: &[usize],
    injection: Option<&mut dyn InjectionSource<'a, T>>,
) -> Result<Var, ExpertError> {
    let (b, k, d) = (t.len(), cfg.chunk, cfg.d_model);
    if g.value(x_t).data.len() != b * k * ACTION_DIM {
        return Err(ExpertError::Shape(format!("x_t holds {} values, expected {}", g.value(x_t).data.len(), b * k * ACTION_DIM)));
    }
    if g.value(cond).shape != [b, d] {
        return Err(ExpertError::Shape(format!("cond has shape {:?}, expected [{b}, {d}]", g.value(cond).shape)));
    }
    if let Some(&bad) = t.iter().find(|&&ti| ti == 0 || ti > cfg.diffusion_steps) {
        return Err(ExpertError::Shape(format!("timestep {bad} outside [1, {}]", cfg.diffusion_steps)));
    }
    let mut skipped = vec![false; cfg.n_blocks];
    for &i in skip {
        *skipped.get_mut(i).ok_or(ExpertError::SkipIndex(i))? = true;
    }
    let mut slot: Vec<Option<usize>> = vec![None; cfg.n_blocks];
    let mut injection = injection;
    let first = match injection.as_deref() {
        Some(src) => {
            for (j, &i) in src.block_ids().iter().enumerate() {
                match slot.get_mut(i) {
                    Some(e @ None) => *e = Some(j),
                    _ => return Err(ExpertError::InjectionIndex(i)),
                }
            }
            src.block_ids().iter().copied().min()
        }
        None => None,
    };

    let mut x = g.dense(s, "act_in", x_t);
    let pos = g.param(s, "pos");
    x = g.tile_add(x, pos);
    let tf = g.input(timestep_features(t, d));
    let te = g.dense(s, "temb.l1", tf);
    let te = g.act(te, Activation::Silu);
    let te = g.dense(s, "temb.l2", te);
    let c = g.add(cond, te);
    let c = g.act(c, Activation::Silu);

    let mut signals: Vec<Var> = Vec::new();
    for i in 0..cfg.n_blocks {
        if Some(i) == first {
            let src = injection.as_deref_mut().expect("first implies a source");
            signals = src.signals(g, x);
            let expected = vec![b * k, d];
            for (j, &sv) in signals.iter().enumerate() {
                if g.value(sv).shape != expected {
                    return Err(ExpertError::SignalShape { block: src.block_ids()[j], found: g.value(sv).shape.clone(), expected });
                }
            }
        }
        if !skipped[i] {
            x = block(g, s, cfg, i, x, c);
        }
        if let Some(j) = slot[i] {
            x = g.add(x, signals[j]);
        }
    }

    let ada = g.dense(s, "head.ada", c);
    let shift = g.slice_cols(ada, 0, d);
    let scale = g.slice_cols(ada, d, d);
    let h = g.layer_norm(x, None, None);
    let h = g.modulate(h, shift, scale, k);
    Ok(g.dense(s, "head.out", h))
}

fn block<'a, T: Real>(g: &mut Graph<'a, T>, s: StoreId, cfg: &ExpertConfig, i: usize, x: Var, c: Var) -> Var {
    let (k, d) = (cfg.chunk, cfg.d_model);
    let ada = g.dense(s, &format!("blocks.{i}.ada"), c);
    let part = |g: &mut Graph<'a, T>, j: usize| g.slice_cols(ada, j * d, d);
    let (shift1, scale1, gate1) = (part(g, 0), part(g, 1), part(g, 2));
    let (shift2, scale2, gate2) = (part(g, 3), part(g, 4), part(g, 5));

    let h = g.layer_norm(x, None, None);
    let h = g.modulate(h, shift1, scale1, k);
    let qkv = g.dense(s, &format!("blocks.{i}.qkv"), h);
    let h = g.attention(qkv, k, cfg.n_heads);
    let h = g.dense(s, &format!("blocks.{i}.out"), h);
    let x = g.gated_add(x, h, gate1, k);

    let h = g.layer_norm(x, None, None);
    let h = g.modulate(h, shift2, scale2, k);
    let h = g.dense(s, &format!("blocks.{i}.ff.l1"), h);
    let h = g.act(h, Activation::Gelu);
    let h = g.dense(s, &format!("blocks.{i}.ff.l2"), h);
    g.gated_add(x, h, gate2, k)
}

/// Noised training inputs for one batch of normalised action chunks.
#[derive(Clone, Debug)]
pub struct NoisedChunks {
    pub x_t: Vec<f32>,
    pub eps: Vec<f32>,
    pub t: Vec<usize>,
}

pub fn noise_chunks(schedule: &Schedule, x0: &[f32], batch: usize, rng: &mut ChaCha8Rng) -> NoisedChunks {
    use rand::Rng;
    let per = x0.len() / batch;
    let t: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let eps = diffusion::standard_normal(rng, x0.len());
    let mut x_t = vec![0.0; x0.len()];
    for i in 0..batch {
        let r = i * per..(i + 1) * per;
        schedule.noise_into(&x0[r.clone()], &eps[r.clone()], t[i], &mut x_t[r]);
    }
    NoisedChunks { x_t, eps, t }
}

/// Masked mean squared error between predicted and true noise. `pad_mask` has
/// one entry per chunk row.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss<'a, T: Real>(
    g: &mut Graph<'a, T>,
    s: StoreId,
    cfg: &ExpertConfig,
    obs: &ObsBatch,
    noised: &NoisedChunks,
    pad_mask: &[bool],
    injection: Option<&mut dyn InjectionSource<'a, T>>,
) -> Result<Var, ExpertError> {
    if !pad_mask.iter().any(|&m| m) {
        return Err(ExpertError::AllMasked);
    }
    let b = obs.len();
    if noised.t.len() != b || pad_mask.len() != b * cfg.chunk {
        return Err(ExpertError::Shape("batch, timestep and mask sizes disagree".into()));
    }
    let cond = encode_observation(g, s, cfg, obs)?;
    let x_t = g.input(Tensor::from_f32(&[b * cfg.chunk, ACTION_DIM], &noised.x_t));
    let pred = forward_denoise(g, s, cfg, x_t, &noised.t, cond, &[], injection)?;
    let target: Vec<T> = noised.eps.iter().map(|&e| T::lit(e as f64)).collect();
    Ok(g.masked_mse(pred, &target, pad_mask))
}

/// Builds a per-step injection source for sampling. Called once per denoising
/// step on a fresh graph.
pub trait StepInjector<T: Real> {
    fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> Box<dyn InjectionSource<'a, T> + 'a>;
}

/// Ancestral DDPM sampling from `x_T ~ N(0, I)`. Row `i` draws all of its noise
/// from `rngs[i]`, so results do not depend on how queries are batched.
/// Returns denormalised chunks, `chunk` actions each.
pub fn sample_actions<T: Real>(
    params: &ParamStore<T>,
    cfg: &ExpertConfig,
    stats: &NormStats,
    cond: &Tensor<T>,
    rngs: &mut [&mut ChaCha8Rng],
    skip: &[usize],
    injector: Option<&dyn StepInjector<T>>,
) -> Result<Vec<Vec<[f32; ACTION_DIM]>>, ExpertError> {
    let b = rngs.len();
    let per = cfg.chunk * ACTION_DIM;
    let schedule = cfg.schedule();
    let mut x: Vec<Vec<f32>> = rngs.iter_mut().map(|r| diffusion::standard_normal(r, per)).collect();
    for t in (1..=cfg.diffusion_steps).rev() {
        let eps = {
            let mut g = Graph::new(false);
            let s = g.bind(params, None);
            let cv = g.input(cond.clone());
            let flat: Vec<f32> = x.concat();
            let xv = g.input(Tensor::from_f32(&[b * cfg.chunk, ACTION_DIM], &flat));
            let mut src = injector.map(|inj| inj.bind(&mut g));
            let src_ref: Option<&mut dyn InjectionSource<'_, T>> = match src.as_mut() {
                Some(b) => Some(&mut **b),
                None => None,
            };
            let out = forward_denoise(&mut g, s, cfg, xv, &vec![t; b], cv, skip, src_ref)?;
            g.value(out).to_f32()
        };
        for i in 0..b {
            x[i] = schedule.reverse_step(&x[i], &eps[i * per..(i + 1) * per], t, rngs[i]);
        }
    }
    Ok(x.iter().map(|row| row.chunks_exact(ACTION_DIM).map(|a| stats.denormalize_action(a)).collect()).collect())
}
