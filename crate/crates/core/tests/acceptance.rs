//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any fails. Criteria 2, 6, 7 and 8 run the full default pipeline twice
//! (about two hours on one core); set `CLOUDCOND_ACCEPT_QUICK=1` to report
//! them as skipped instead.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::seq::SliceRandom;
use rand::Rng;

use cloudcond::checkpoint::Checkpoint;
use cloudcond::config::RunConfig;
use cloudcond::env::{self, EnvConfig, ExpertPolicy, HeightDist, ProbeSpec};
use cloudcond::expert::{self, ExpertConfig, InjectionSource, NoisedChunks, ObsBatch};
use cloudcond::graph::Graph;
use cloudcond::injector::{self, FreezePolicy, GraphInjection, InjectorConfig, PcEncoderConfig};
use cloudcond::params::{self, ParamStore};
use cloudcond::pipeline::{self, ExperimentReport, Layout};
use cloudcond::seeding;
use cloudcond::surgeon::{self, BlockImportanceReport};
use cloudcond::tensor::Tensor;

const PERMUTATION_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-4;
const FD_REL_TOL: f64 = 1e-3;
/// Coordinates with smaller analytic gradients carry no usable relative error.
const FD_MIN_GRAD: f64 = 1e-6;
const FD_COORDS: usize = 24;

const EXPERT_SUCCESS_FLOOR: f64 = 0.99;
const HEIGHT_MARGIN: f64 = 0.30;
const DECOY_MARGIN: f64 = 0.40;
const MULTITASK_FLOOR: f64 = 0.60;
const CRUCIAL_DEGRADATION: f64 = 0.30;
const SAFE_DEGRADATION: f64 = 0.05;
// Regression floor for the pretrained expert alone, per task on the train-height probe.
const STAGE_A_TASK_FLOOR: f64 = 0.70;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_obs(b: usize, rng: &mut impl Rng) -> (Vec<f32>, Vec<f32>, Vec<usize>) {
    let images = (0..b * env::IMAGE_LEN).map(|_| rng.random::<f32>()).collect();
    let states = (0..b * env::STATE_DIM).map(|_| rng.random_range(-2.0..2.0)).collect();
    let tasks = (0..b).map(|_| rng.random_range(0..env::NUM_TASKS)).collect();
    (images, states, tasks)
}

fn random_clouds(b: usize, n: usize, rng: &mut impl Rng) -> Vec<f32> {
    (0..b * n).flat_map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..0.25)]).collect()
}

fn perturb<T: cloudcond::tensor::Real>(store: &mut ParamStore<T>, seed: u64, std: f64) {
    let mut rng = seeding::rng(seed);
    for id in 0..store.len() {
        let shape = store.by_id(id).shape.clone();
        *store.by_id_mut(id) = params::init_normal(&mut rng, &shape, std);
    }
}

fn identity_at_init() -> Outcome {
    let cfg = ExpertConfig::default();
    let icfg = InjectorConfig::default();
    let ids = [7, 8, 9, 10, 11];
    let mut expert = expert::init_expert::<f32>(&cfg, 1).unwrap();
    perturb(&mut expert, 2, 0.05);
    let inj = injector::init_injector::<f32>(&cfg, &icfg, &ids, 3).unwrap();
    let mut rng = seeding::rng(4);
    let mut differing = 0;
    for _ in 0..100 {
        let (images, states, tasks) = random_obs(1, &mut rng);
        let clouds = random_clouds(1, icfg.num_points, &mut rng);
        let x: Vec<f32> = diffusion_normal(&mut rng, cfg.chunk * 4);
        let t = [rng.random_range(1..=cfg.diffusion_steps)];
        let run = |with: bool| {
            let mut g = Graph::new(false);
            let s = g.bind(&expert, None);
            let obs = ObsBatch { images: &images, states: &states, tasks: &tasks };
            let cond = expert::encode_observation(&mut g, s, &cfg, &obs).unwrap();
            let xv = g.input(Tensor::from_f32(&[cfg.chunk, 4], &x));
            let out = if with {
                let si = g.bind(&inj, None);
                let pc = injector::encode_pointcloud(&mut g, si, &icfg, &clouds, 1).unwrap();
                let mut src = GraphInjection::new(&mut g, si, &ids, pc, cfg.chunk);
                expert::forward_denoise(&mut g, s, &cfg, xv, &t, cond, &[], Some(&mut src as &mut dyn InjectionSource<'_, f32>)).unwrap()
            } else {
                expert::forward_denoise(&mut g, s, &cfg, xv, &t, cond, &[], None).unwrap()
            };
            g.value(out).data.iter().map(|v| v.to_bits()).collect::<Vec<u32>>()
        };
        if run(true) != run(false) {
            differing += 1;
        }
    }
    check(differing == 0, format!("{differing}/100 inputs differ bitwise"))
}

fn diffusion_normal(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal)).collect()
}

fn permutation_invariance() -> Outcome {
    let icfg = InjectorConfig::default();
    let cfg = ExpertConfig::default();
    let inj = injector::init_injector::<f32>(&cfg, &icfg, &[11], 5).unwrap();
    let encode = |cloud: &[f32]| {
        let mut g = Graph::new(false);
        let s = g.bind(&inj, None);
        let v = injector::encode_pointcloud(&mut g, s, &icfg, cloud, 1).unwrap();
        g.value(v).data.clone()
    };
    let mut rng = seeding::rng(6);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let cloud = random_clouds(1, icfg.num_points, &mut rng);
        let base = encode(&cloud);
        let mut pts: Vec<[f32; 3]> = cloud.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
        for _ in 0..100 {
            pts.shuffle(&mut rng);
            let flat: Vec<f32> = pts.iter().flatten().copied().collect();
            let out = encode(&flat);
            for (a, b) in base.iter().zip(&out) {
                worst = worst.max((a - b).abs() as f64);
            }
        }
    }
    check(worst <= PERMUTATION_TOL, format!("max abs deviation {worst:.3e} over 1000 permutations"))
}

struct FdCase<'a> {
    cfg: &'a ExpertConfig,
    icfg: &'a InjectorConfig,
    ids: &'a [usize],
    images: Vec<f32>,
    states: Vec<f32>,
    tasks: Vec<usize>,
    clouds: Vec<f32>,
    noised: NoisedChunks,
    mask: Vec<bool>,
}

impl FdCase<'_> {
    fn loss(&self, e: &ParamStore<f64>, i: Option<&ParamStore<f64>>, grad: bool) -> (f64, Vec<params::Gradients<f64>>) {
        let mut g = Graph::new(grad);
        let s = g.bind(e, None);
        let obs = ObsBatch { images: &self.images, states: &self.states, tasks: &self.tasks };
        let l = match i {
            Some(store) => {
                let si = g.bind(store, None);
                let pc = injector::encode_pointcloud(&mut g, si, self.icfg, &self.clouds, self.tasks.len()).unwrap();
                let mut src = GraphInjection::new(&mut g, si, self.ids, pc, self.cfg.chunk);
                expert::diffusion_loss(
                    &mut g,
                    s,
                    self.cfg,
                    &obs,
                    &self.noised,
                    &self.mask,
                    Some(&mut src as &mut dyn InjectionSource<'_, f64>),
                )
                .unwrap()
            }
            None => expert::diffusion_loss(&mut g, s, self.cfg, &obs, &self.noised, &self.mask, None).unwrap(),
        };
        let v = g.value(l).data[0];
        (v, if grad { g.backward(l) } else { Vec::new() })
    }
}

/// Central differences on `FD_COORDS` differentiable coordinates of `which` (0 expert, 1 injector).
struct FdResult {
    checked: usize,
    kinks: usize,
    worst: f64,
}

fn fd_compare(case: &FdCase, e: &ParamStore<f64>, i: Option<&ParamStore<f64>>, which: usize, seed: u64) -> FdResult {
    let (_, grads) = case.loss(e, i, true);
    let target = if which == 0 { e } else { i.unwrap() };
    let mut candidates = Vec::new();
    for id in 0..target.len() {
        if let Some(gt) = grads[which].get(id) {
            for (k, &v) in gt.data.iter().enumerate() {
                if v.abs() >= FD_MIN_GRAD {
                    candidates.push((id, k, v));
                }
            }
        }
    }
    candidates.shuffle(&mut seeding::rng(seed));
    // Round-robin over tensors so every parameter group is represented.
    candidates.sort_by_key(|&(id, _, _)| id);
    let mut by_tensor: std::collections::BTreeMap<usize, Vec<(usize, f64)>> = Default::default();
    for (id, k, v) in candidates {
        by_tensor.entry(id).or_default().push((k, v));
    }
    let mut order = Vec::new();
    let mut round = 0;
    while by_tensor.values().any(|v| v.len() > round) {
        for (&id, v) in &by_tensor {
            if let Some(&(k, a)) = v.get(round) {
                order.push((id, k, a));
            }
        }
        round += 1;
    }
    let mut fd = FdResult { checked: 0, kinks: 0, worst: 0.0 };
    for (id, k, a) in order {
        if fd.checked == FD_COORDS {
            break;
        }
        let eval = |delta: f64| {
            let mut e2 = e.clone();
            let mut i2 = i.cloned();
            let store = if which == 0 { &mut e2 } else { i2.as_mut().unwrap() };
            store.by_id_mut(id).data[k] += delta;
            case.loss(&e2, i2.as_ref(), false).0
        };
        let n = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        // A smooth loss gives matching central differences at h and h/10 (error
        // O(h^2)); a ReLU or max kink inside [-h, h] biases only the wider one.
        let h = FD_STEP / 10.0;
        let n_small = (eval(h) - eval(-h)) / (2.0 * h);
        if (n - n_small).abs() > FD_REL_TOL * n.abs().max(n_small.abs()) {
            fd.kinks += 1;
            continue;
        }
        fd.worst = fd.worst.max((a - n).abs() / a.abs().max(n.abs()));
        fd.checked += 1;
    }
    fd
}

fn gradient_oracle() -> Outcome {
    let cfg = ExpertConfig { n_blocks: 1, d_model: 8, n_heads: 2, chunk: 4, conv_channels: [2, 3], ..Default::default() };
    let icfg = InjectorConfig { encoder: PcEncoderConfig { widths: vec![4, 6, 8], pool: 2, d_pc: 5 }, bottleneck: 3, num_points: 16 };
    let ids = [0];
    let b = 2;
    let mut rng = seeding::rng(7);
    let (images, states, tasks) = random_obs(b, &mut rng);
    let clouds = random_clouds(b, icfg.num_points, &mut rng);
    let x0: Vec<f32> = (0..b * cfg.chunk * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let noised = expert::noise_chunks(&cfg.schedule(), &x0, b, &mut rng);
    let mut mask = vec![true; b * cfg.chunk];
    mask[b * cfg.chunk - 1] = false;
    let case = FdCase { cfg: &cfg, icfg: &icfg, ids: &ids, images, states, tasks, clouds, noised, mask };
    let mut e = expert::init_expert::<f64>(&cfg, 8).unwrap();
    perturb(&mut e, 9, 0.3);
    let mut inj = injector::init_injector::<f64>(&cfg, &icfg, &ids, 10).unwrap();
    perturb(&mut inj, 11, 0.3);
    let l = fd_compare(&case, &e, None, 0, 12);
    let p = fd_compare(&case, &e, Some(&inj), 1, 13);
    check(
        l.checked >= 20 && p.checked >= 20 && l.worst <= FD_REL_TOL && p.worst <= FD_REL_TOL,
        format!(
            "diffusion loss {} coords max rel err {:.2e} (kinks skipped: {}); injector path {} coords max rel err {:.2e} (kinks skipped: {})",
            l.checked, l.worst, l.kinks, p.checked, p.worst, p.kinks
        ),
    )
}

fn environment_oracle() -> Outcome {
    let cfg = EnvConfig::default();
    let mut policy = ExpertPolicy { cfg: cfg.clone() };
    let real = env::evaluate_policy(&mut policy, &ProbeSpec::default(), 300, &[0], &cfg).map_err(|e| e.to_string())?;
    let decoy =
        env::evaluate_policy(&mut policy, &ProbeSpec { decoy: true, ..Default::default() }, 100, &[0], &cfg).map_err(|e| e.to_string())?;
    let mut mismatches = 0;
    let lo = ProbeSpec { table_height: HeightDist::Fixed(0.003), ..Default::default() };
    let hi = ProbeSpec { table_height: HeightDist::Fixed(0.052), ..Default::default() };
    let fake = ProbeSpec { decoy: true, ..lo.clone() };
    for seed in 0..200 {
        let a = env::reset(seed, &lo, &cfg).map_err(|e| e.to_string())?.1;
        let h = env::reset(seed, &hi, &cfg).map_err(|e| e.to_string())?.1;
        let d = env::reset(seed, &fake, &cfg).map_err(|e| e.to_string())?.1;
        mismatches += (a != h) as usize + (a != d) as usize;
    }
    check(
        real.success_rate >= EXPERT_SUCCESS_FLOOR && decoy.refusal_rate == 1.0 && mismatches == 0,
        format!(
            "expert success {:.3} over 300, decoy refusal {:.3} over 100, {mismatches} image mismatches over 400 pairs",
            real.success_rate, decoy.refusal_rate
        ),
    )
}

fn selection_rule_brute_force() -> Result<(), String> {
    fn brute(d: &[f64], eps: f64, max_count: usize) -> Option<Vec<usize>> {
        (0..d.len()).find(|&b| d[b..].iter().all(|&x| x <= eps)).map(|b| (b..b + max_count.min(d.len() - b)).collect())
    }
    let mut runner = TestRunner::new_with_rng(
        PtConfig { cases: 1000, failure_persistence: None, ..PtConfig::default() },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    let strat = (prop::collection::vec(0.0f64..1.0, 2..40), 0.0f64..1.0, 1usize..8, 0.0f64..0.3);
    runner
        .run(&strat, |(scores, baseline, max_count, eps)| {
            let r = BlockImportanceReport {
                n_blocks: scores.len(),
                baseline_score: baseline,
                single_skip: scores.iter().copied().enumerate().collect(),
                consecutive: Vec::new(),
                eval: None,
                evaluations: scores.len() + 1,
            };
            let d: Vec<f64> = scores.iter().map(|s| baseline - s).collect();
            let got = surgeon::select_injection_blocks(&r, eps, max_count).ok().map(|p| p.block_ids);
            prop_assert_eq!(got, brute(&d, eps, max_count));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn skip_structure(out: &Path) -> Outcome {
    selection_rule_brute_force()?;
    let text = std::fs::read_to_string(Layout::new(out).skip().join("report.json")).map_err(|e| e.to_string())?;
    let r = BlockImportanceReport::from_json(&text).map_err(|e| e.to_string())?;
    let d = r.degradations().map_err(|e| e.to_string())?;
    let crucial = d.iter().filter(|&&x| x > CRUCIAL_DEGRADATION).count();
    let safe = d.iter().filter(|&&x| x < SAFE_DEGRADATION).count();
    let plan = surgeon::select_injection_blocks(&r, 0.05, 5);
    let detail = format!(
        "baseline {:.2}, degradations [{}], {crucial} crucial, {safe} safe, plan {:?}; brute-force agreement on 1000 reports",
        r.baseline_score,
        d.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" "),
        plan.as_ref().map(|p| p.block_ids.clone()).map_err(|e| e.to_string())
    );
    check(crucial >= 1 && safe >= 3 && plan.is_ok(), detail)
}

fn stage_a_floor(out: &Path, cfg: &RunConfig) -> Outcome {
    let ck = Checkpoint::load(&Layout::new(out).expert_ck(), Some(&cfg.expert_hash())).map_err(|e| e.to_string())?;
    let mut policy = cloudcond::policy::DiffusionPolicy::new(
        &ck.expert,
        &ck.header.expert_config,
        &ck.header.norm_stats,
        None,
        Vec::new(),
        cfg.eval.exec_horizon,
    )
    .map_err(|e| e.to_string())?;
    let probe = ProbeSpec { table_height: HeightDist::Fixed(cfg.eval.train_height), ..Default::default() };
    let r = env::evaluate_policy(&mut policy, &probe, cfg.eval.episodes, &[0], &cfg.env).map_err(|e| e.to_string())?;
    let rates: Vec<f64> = r.per_task.iter().map(|t| t.success_rate()).collect();
    check(rates.iter().all(|&x| x >= STAGE_A_TASK_FLOOR), format!("per-task success {rates:.2?}"))
}

fn freeze_invariance(out: &Path, cfg: &RunConfig) -> Outcome {
    let layout = Layout::new(out);
    let a = Checkpoint::load(&layout.expert_ck(), None).map_err(|e| e.to_string())?;
    let mask = injector::apply_freeze_policy(&a.expert, &cfg.expert.model, &FreezePolicy::from_names(&cfg.injector.freeze_policy).unwrap());
    let mut changed = Vec::new();
    for arm in ["pc-injected", "ablation-2d"] {
        let b = Checkpoint::load(&layout.arm_ck(arm, false), None).map_err(|e| e.to_string())?;
        for id in 0..a.expert.len() {
            let same = a.expert.by_id(id).data.iter().zip(&b.expert.by_id(id).data).all(|(x, y)| x.to_bits() == y.to_bits());
            if mask.is_frozen(id) && !same {
                changed.push(format!("{arm}:{}", a.expert.name(id)));
            }
        }
    }
    check(changed.is_empty(), format!("{} frozen tensors per arm, {} changed {changed:?}", mask.count_frozen(), changed.len()))
}

fn ab_separation(r: &ExperimentReport) -> Outcome {
    let get = |arm: &str, probe: &str| r.headline(arm, probe).map(|(m, _)| m).ok_or(format!("{arm}/{probe} missing"));
    let pc_h = get("pc-injected", "height")?;
    let ab_h = get("ablation-2d", "height")?;
    let pc_d = get("pc-injected", "decoy")?;
    let ab_d = get("ablation-2d", "decoy")?;
    let pc_m = get("pc-injected", "multitask")?;
    check(
        pc_h - ab_h >= HEIGHT_MARGIN && pc_d - ab_d >= DECOY_MARGIN && pc_m >= MULTITASK_FLOOR,
        format!(
            "height {:.1}% vs {:.1}%, decoy refusal {:.1}% vs {:.1}%, multitask {:.1}%",
            100.0 * pc_h,
            100.0 * ab_h,
            100.0 * pc_d,
            100.0 * ab_d,
            100.0 * pc_m
        ),
    )
}

fn run_pipeline(out: &Path) -> Result<(RunConfig, ExperimentReport), String> {
    let cfg = RunConfig { out_dir: out.to_path_buf(), ..RunConfig::default() };
    let started = Instant::now();
    let mut log = |m: &str| eprintln!("  [{:>6.0}s] {m}", started.elapsed().as_secs_f64());
    let r = pipeline::run_all(&cfg, true, &mut log).map_err(|e| format!("error[{}]: {e}", e.category()))?;
    Ok((cfg, r))
}

fn main() -> ExitCode {
    let quick = std::env::var("CLOUDCOND_ACCEPT_QUICK").is_ok_and(|v| v == "1");
    let mut failed = 0;
    let mut line = |label: String, started: Instant, o: Option<Outcome>| {
        let secs = started.elapsed().as_secs_f64();
        match o {
            Some(Ok(d)) => println!("{label}: PASS [{secs:.1}s] {d}"),
            Some(Err(d)) => {
                failed += 1;
                println!("{label}: FAIL [{secs:.1}s] {d}")
            }
            None => println!("{label}: SKIPPED (quick mode)"),
        }
    };
    let crit = |n: usize, name: &str| format!("criterion {n} ({name})");
    let t = Instant::now();
    line(crit(1, "identity at init"), t, Some(identity_at_init()));
    let t = Instant::now();
    line(crit(3, "permutation invariance"), t, Some(permutation_invariance()));
    let t = Instant::now();
    line(crit(4, "gradient oracle"), t, Some(gradient_oracle()));
    let t = Instant::now();
    line(crit(5, "environment oracle"), t, Some(environment_oracle()));

    if quick {
        for (n, name) in [(2, "freeze invariance"), (6, "A/B separation"), (7, "skip-sweep structure"), (8, "determinism")] {
            line(crit(n, name), Instant::now(), None);
        }
    } else {
        let root = tempfile::tempdir().expect("temp dir");
        let first = root.path().join("run1");
        let t = Instant::now();
        match run_pipeline(&first) {
            Ok((cfg, r)) => {
                let elapsed = t.elapsed().as_secs_f64();
                println!("full pipeline: {elapsed:.0}s");
                line(crit(2, "freeze invariance"), t, Some(freeze_invariance(&first, &cfg)));
                line(crit(6, "A/B separation"), t, Some(ab_separation(&r)));
                line(crit(7, "skip-sweep structure"), t, Some(skip_structure(&first)));
                let t = Instant::now();
                line("regression floor (stage-A expert per task)".into(), t, Some(stage_a_floor(&first, &cfg)));
                let second = root.path().join("run2");
                let t = Instant::now();
                let o = run_pipeline(&second).and_then(|_| {
                    let a = std::fs::read(Layout::new(&first).experiment()).map_err(|e| e.to_string())?;
                    let b = std::fs::read(Layout::new(&second).experiment()).map_err(|e| e.to_string())?;
                    check(a == b, format!("experiment reports {} ({} bytes)", if a == b { "identical" } else { "differ" }, a.len()))
                });
                line(crit(8, "determinism"), t, Some(o));
            }
            Err(e) => {
                for (n, name) in [(2, "freeze invariance"), (6, "A/B separation"), (7, "skip-sweep structure"), (8, "determinism")] {
                    line(crit(n, name), t, Some(Err(format!("pipeline failed: {e}"))));
                }
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
