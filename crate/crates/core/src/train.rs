//! Training loops for the expert alone (pretraining and the 2D-only fine-tune)
//! and for the expert with a point-cloud injector.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, DatasetError, EpisodeRecord, NormStats};
use crate::expert::{self, ExpertConfig, ExpertError, InjectionSource, ObsBatch};
use crate::graph::Graph;
use crate::injector::{self, FreezePolicy, GraphInjection, InjectorConfig, InjectorError};
use crate::params::{self, Adam, AdamConfig, FreezeMask, ParamStore};
use crate::seeding::{self, RngState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub lr_schedule: LrSchedule,
    /// Linear ramp from zero over this many steps.
    pub warmup_steps: usize,
    /// Also keep the parameters with the lowest windowed mean loss.
    pub keep_best: bool,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 32,
            lr: 1e-4,
            grad_clip: 1.0,
            lr_schedule: LrSchedule::Constant,
            warmup_steps: 0,
            keep_best: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` to zero over the steps after warmup.
    Cosine,
}

impl TrainHyper {
    /// Learning rate for zero-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
                let t = (step - self.warmup_steps) as f64 / span;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

pub const BEST_WINDOW: usize = 200;

#[derive(Clone, Debug)]
pub struct BestSnapshot {
    pub step: usize,
    pub mean_loss: f64,
    pub expert: ParamStore<f32>,
    pub injector: Option<ParamStore<f32>>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became {loss} at step {step}")]
    Divergence { step: usize, loss: f32 },
    #[error("mean loss over the last {window} steps ({last:.5}) is not below the first {window} ({first:.5})")]
    NoProgress { window: usize, first: f64, last: f64 },
    #[error("frozen tensor {0} changed during training")]
    FreezeViolation(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Injector(#[from] InjectorError),
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub expert: ParamStore<f32>,
    pub injector: Option<ParamStore<f32>>,
    pub losses: Vec<f32>,
    pub rng: RngState,
    pub best: Option<BestSnapshot>,
}

impl TrainOutput {
    /// Means of the first and last `window` losses.
    pub fn loss_trend(&self, window: usize) -> (f64, f64) {
        let n = self.losses.len();
        let w = window.min(n / 2).max(1);
        let mean = |s: &[f32]| s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64;
        (mean(&self.losses[..w]), mean(&self.losses[n - w..]))
    }
}

pub struct InjectorSetup<'c> {
    pub cfg: &'c InjectorConfig,
    pub ids: &'c [usize],
    pub params: ParamStore<f32>,
}

/// Trains the expert (under `mask`) and, when given, the injector on the
/// masked diffusion loss with Adam and joint global-norm clipping.
#[allow(clippy::too_many_arguments)]
pub fn train(
    mut expert: ParamStore<f32>,
    cfg: &ExpertConfig,
    mask: &FreezeMask,
    mut injector: Option<InjectorSetup>,
    episodes: &[EpisodeRecord],
    stats: &NormStats,
    hyper: &TrainHyper,
    seed: u64,
    on_step: &mut dyn FnMut(usize, f32),
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    let adam_cfg = AdamConfig { lr: hyper.lr, ..Default::default() };
    let mut opt_e = Adam::new(adam_cfg, expert.len());
    let mut opt_i = injector.as_ref().map(|s| Adam::new(adam_cfg, s.params.len()));
    let schedule = cfg.schedule();
    let mut rng = seeding::rng(seeding::derive_str(seed, "train"));
    let mut losses = Vec::with_capacity(hyper.steps);
    let mut best = None;
    let trainable = mask.trainable();
    for step in 0..hyper.steps {
        let lr = hyper.lr_at(step);
        opt_e.set_lr(lr);
        if let Some(o) = opt_i.as_mut() {
            o.set_lr(lr);
        }
        let batch = dataset::sample_batch(episodes, stats, hyper.batch_size, cfg.chunk, injector.is_some(), &mut rng)?;
        let noised = expert::noise_chunks(&schedule, &batch.actions, batch.size, &mut rng);
        let obs = ObsBatch { images: &batch.images, states: &batch.states, tasks: &batch.tasks };
        let (loss, mut grads) = {
            let mut g = Graph::new(true);
            let se = g.bind(&expert, Some(trainable.clone()));
            let mut src = match injector.as_ref() {
                Some(setup) => {
                    let si = g.bind(&setup.params, None);
                    let pc = injector::encode_pointcloud(&mut g, si, setup.cfg, &batch.clouds, batch.size)?;
                    Some(GraphInjection::new(&mut g, si, setup.ids, pc, cfg.chunk))
                }
                None => None,
            };
            let src_ref = src.as_mut().map(|s| s as &mut dyn InjectionSource<'_, f32>);
            let l = expert::diffusion_loss(&mut g, se, cfg, &obs, &noised, &batch.pad_mask, src_ref)?;
            let value = g.value(l).data[0];
            if !value.is_finite() {
                return Err(TrainError::Divergence { step, loss: value });
            }
            (value, g.backward(l))
        };
        {
            let mut sets: Vec<&mut params::Gradients<f32>> = grads.iter_mut().collect();
            params::clip_global_norm(&mut sets, hyper.grad_clip);
        }
        opt_e.step(&mut expert, &grads[0], mask);
        if let (Some(setup), Some(opt)) = (injector.as_mut(), opt_i.as_mut()) {
            let all = FreezeMask::all_trainable(setup.params.len());
            opt.step(&mut setup.params, &grads[1], &all);
        }
        losses.push(loss);
        on_step(step, loss);
        if hyper.keep_best && (step + 1) % BEST_WINDOW == 0 {
            let mean = losses[step + 1 - BEST_WINDOW..].iter().map(|&v| v as f64).sum::<f64>() / BEST_WINDOW as f64;
            if best.as_ref().is_none_or(|b: &BestSnapshot| mean < b.mean_loss) {
                best = Some(BestSnapshot {
                    step: step + 1,
                    mean_loss: mean,
                    expert: expert.clone(),
                    injector: injector.as_ref().map(|s| s.params.clone()),
                });
            }
        }
    }
    Ok(TrainOutput { expert, injector: injector.map(|s| s.params), losses, rng: RngState::capture(&rng), best })
}

/// Pretraining from scratch on 2D demonstrations. Fails unless the loss over
/// the final 500 steps is below that of the first 500.
pub fn train_stage_a(
    episodes: &[EpisodeRecord],
    stats: &NormStats,
    cfg: &ExpertConfig,
    hyper: &TrainHyper,
    seed: u64,
    on_step: &mut dyn FnMut(usize, f32),
) -> Result<TrainOutput, TrainError> {
    let init = expert::init_expert::<f32>(cfg, seeding::derive_str(seed, "stage-a"))?;
    let mask = FreezeMask::all_trainable(init.len());
    let out = train(init, cfg, &mask, None, episodes, stats, hyper, seed, on_step)?;
    let window = 500;
    if out.losses.len() >= 2 * window {
        let (first, last) = out.loss_trend(window);
        if last >= first {
            return Err(TrainError::NoProgress { window, first, last });
        }
    }
    Ok(out)
}

fn check_frozen(before: &ParamStore<f32>, after: &ParamStore<f32>, mask: &FreezeMask) -> Result<(), TrainError> {
    for id in 0..before.len() {
        if mask.is_frozen(id) && before.by_id(id).data.iter().zip(&after.by_id(id).data).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(TrainError::FreezeViolation(before.name(id).to_string()));
        }
    }
    Ok(())
}

/// Fine-tunes a pretrained expert with a fresh injector on `ids`. Expert
/// tensors outside `policy` stay bitwise fixed.
#[allow(clippy::too_many_arguments)]
pub fn train_stage_b(
    stage_a: &ParamStore<f32>,
    cfg: &ExpertConfig,
    policy: &FreezePolicy,
    inj_cfg: &InjectorConfig,
    ids: &[usize],
    episodes: &[EpisodeRecord],
    stats: &NormStats,
    hyper: &TrainHyper,
    seed: u64,
    on_step: &mut dyn FnMut(usize, f32),
) -> Result<TrainOutput, TrainError> {
    let mask = injector::apply_freeze_policy(stage_a, cfg, policy);
    let params = injector::init_injector::<f32>(cfg, inj_cfg, ids, seeding::derive_str(seed, "stage-b"))?;
    let setup = InjectorSetup { cfg: inj_cfg, ids, params };
    let out = train(stage_a.clone(), cfg, &mask, Some(setup), episodes, stats, hyper, seed, on_step)?;
    check_frozen(stage_a, &out.expert, &mask)?;
    Ok(out)
}

/// The 2D-only arm: the same fine-tune without an injector.
#[allow(clippy::too_many_arguments)]
pub fn train_ablation_2d(
    stage_a: &ParamStore<f32>,
    cfg: &ExpertConfig,
    policy: &FreezePolicy,
    episodes: &[EpisodeRecord],
    stats: &NormStats,
    hyper: &TrainHyper,
    seed: u64,
    on_step: &mut dyn FnMut(usize, f32),
) -> Result<TrainOutput, TrainError> {
    let mask = injector::apply_freeze_policy(stage_a, cfg, policy);
    let out = train(stage_a.clone(), cfg, &mask, None, episodes, stats, hyper, seed, on_step)?;
    check_frozen(stage_a, &out.expert, &mask)?;
    Ok(out)
}
