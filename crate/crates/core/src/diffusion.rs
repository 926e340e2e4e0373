//! DDPM noise schedule, forward noising and the ancestral reverse step.
//!
//! Timesteps are 1-indexed: `t = 1` is the least noisy level and `t = T` the
//! most. Reverse steps predict `x0` from the noise estimate, clip it to
//! `[-1, 1]`, and draw from the Gaussian posterior `q(x_{t-1} | x_t, x0)`.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl Schedule {
    /// Linear betas from `beta_start` at `t = 1` to `beta_end` at `t = steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(steps >= 2, "need at least two diffusion steps");
        let betas: Vec<f64> = (0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64).collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Self { betas, alphas, alpha_bars }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`, written into `out`.
    pub fn noise_into(&self, x0: &[f32], eps: &[f32], t: usize, out: &mut [f32]) {
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        for ((o, x), e) in out.iter_mut().zip(x0).zip(eps) {
            *o = a * x + b * e;
        }
    }

    /// One reverse step for a single sample: returns `x_{t-1}` (or the clipped
    /// `x0` estimate when `t = 1`). Draws noise from `rng` only when `t > 1`.
    pub fn reverse_step(&self, x_t: &[f32], eps_pred: &[f32], t: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let ab = self.alpha_bar(t);
        let ab_prev = if t > 1 { self.alpha_bar(t - 1) } else { 1.0 };
        let beta = self.betas[t - 1];
        let alpha = self.alphas[t - 1];
        let x0: Vec<f64> =
            x_t.iter().zip(eps_pred).map(|(&x, &e)| ((x as f64 - (1.0 - ab).sqrt() * e as f64) / ab.sqrt()).clamp(-1.0, 1.0)).collect();
        if t == 1 {
            return x0.into_iter().map(|v| v as f32).collect();
        }
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
        x0.iter()
            .zip(x_t)
            .map(|(&x0, &x)| {
                let z: f64 = StandardNormal.sample(rng);
                (c0 * x0 + ct * x as f64 + sigma * z) as f32
            })
            .collect()
    }
}

pub fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect()
}
