//! Adapts a trained expert (optionally with an injector) to the environment's
//! batched [`Policy`] interface.

use crate::dataset::NormStats;
use crate::env::{Action, Policy, PolicyQuery, IMAGE_LEN, STATE_DIM};
use crate::expert::{self, ExpertConfig, ExpertError, ObsBatch};
use crate::graph::Graph;
use crate::injector::{InjectorConfig, InjectorContext};
use crate::params::ParamStore;

#[derive(Clone, Copy)]
pub struct InjectorRef<'m> {
    pub params: &'m ParamStore<f32>,
    pub cfg: &'m InjectorConfig,
    pub ids: &'m [usize],
}

pub struct DiffusionPolicy<'m> {
    pub expert: &'m ParamStore<f32>,
    pub cfg: &'m ExpertConfig,
    pub stats: &'m NormStats,
    pub injector: Option<InjectorRef<'m>>,
    pub skip: Vec<usize>,
    /// Actions executed from each sampled chunk before re-planning.
    pub exec_horizon: usize,
}

impl<'m> DiffusionPolicy<'m> {
    /// Checks skip and injection ids against the expert depth.
    pub fn new(
        expert: &'m ParamStore<f32>,
        cfg: &'m ExpertConfig,
        stats: &'m NormStats,
        injector: Option<InjectorRef<'m>>,
        skip: Vec<usize>,
        exec_horizon: usize,
    ) -> Result<Self, ExpertError> {
        if let Some(&i) = skip.iter().find(|&&i| i >= cfg.n_blocks) {
            return Err(ExpertError::SkipIndex(i));
        }
        if let Some(inj) = injector {
            for (k, &i) in inj.ids.iter().enumerate() {
                if i >= cfg.n_blocks || inj.ids[..k].contains(&i) {
                    return Err(ExpertError::InjectionIndex(i));
                }
            }
        }
        Ok(Self { expert, cfg, stats, injector, skip, exec_horizon })
    }

    /// Samples one full chunk per query.
    pub fn sample(&self, queries: &mut [PolicyQuery<'_>]) -> Vec<Vec<[f32; 4]>> {
        let b = queries.len();
        let mut images = Vec::with_capacity(b * IMAGE_LEN);
        let mut states = Vec::with_capacity(b * STATE_DIM);
        let mut tasks = Vec::with_capacity(b);
        for q in queries.iter() {
            images.extend_from_slice(&q.image.pixels);
            states.extend(self.stats.normalize_state(&q.proprio));
            tasks.push(q.task_id as usize);
        }
        let cond = {
            let mut g = Graph::new(false);
            let s = g.bind(self.expert, None);
            let obs = ObsBatch { images: &images, states: &states, tasks: &tasks };
            let v = expert::encode_observation(&mut g, s, self.cfg, &obs).expect("policy inputs are well formed");
            g.value(v).clone()
        };
        let ctx = self.injector.map(|inj| {
            let clouds: Vec<f32> = queries.iter().flat_map(|q| q.cloud.expect("injected policy receives clouds").flat()).collect();
            InjectorContext::new(inj.params, inj.cfg, inj.ids, self.cfg.chunk, &clouds, b).expect("cloud shape matches config")
        });
        let mut rngs: Vec<_> = queries.iter_mut().map(|q| &mut *q.rng).collect();
        expert::sample_actions(self.expert, self.cfg, self.stats, &cond, &mut rngs, &self.skip, ctx.as_ref().map(|c| c as _))
            .expect("validated skip set")
    }
}

impl Policy for DiffusionPolicy<'_> {
    fn uses_cloud(&self) -> bool {
        self.injector.is_some()
    }

    fn act(&mut self, queries: &mut [PolicyQuery<'_>]) -> Vec<Vec<Action>> {
        let h = self.exec_horizon.clamp(1, self.cfg.chunk);
        self.sample(queries).into_iter().map(|c| c[..h].iter().map(|a| Action::from_f32(a)).collect()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvConfig, ProbeSpec};
    use crate::{dataset, injector};

    #[test]
    fn out_of_range_or_repeated_ids_are_rejected() {
        let cfg = ExpertConfig { n_blocks: 3, d_model: 16, n_heads: 2, chunk: 4, conv_channels: [4, 4], ..Default::default() };
        let expert = expert::init_expert::<f32>(&cfg, 0).unwrap();
        let eps = dataset::generate_demos(1, &ProbeSpec::default(), 0.0, 0, &EnvConfig::default()).unwrap();
        let stats = dataset::compute_norm_stats(&eps).unwrap();
        let icfg = InjectorConfig::default();
        let inj = injector::init_injector::<f32>(&cfg, &icfg, &[1, 2], 0).unwrap();

        assert!(DiffusionPolicy::new(&expert, &cfg, &stats, None, vec![0, 2], 4).is_ok());
        assert_eq!(DiffusionPolicy::new(&expert, &cfg, &stats, None, vec![3], 4).err(), Some(ExpertError::SkipIndex(3)));
        let ok = InjectorRef { params: &inj, cfg: &icfg, ids: &[1, 2] };
        assert!(DiffusionPolicy::new(&expert, &cfg, &stats, Some(ok), vec![], 4).is_ok());
        for ids in [&[1, 1][..], &[2, 5][..]] {
            let bad = InjectorRef { ids, ..ok };
            assert_eq!(DiffusionPolicy::new(&expert, &cfg, &stats, Some(bad), vec![], 4).err(), Some(ExpertError::InjectionIndex(ids[1])));
        }
    }
}
