//! Closed-form 2-D conditional dataset: one Gaussian per condition.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{PairedDataset, Provenance};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::models::Condition;
use crate::numcore::Tensor;
use crate::rng::derive_rng;

/// Per-condition mean and covariance. The default puts 8 well-separated
/// modes on a radius-4 circle with covariance 0.05 I.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Toy2DSpec {
    pub means: Vec<[f64; 2]>,
    pub covs: Vec<[[f64; 2]; 2]>,
}

impl Default for Toy2DSpec {
    fn default() -> Self {
        Self::circle(8, 4.0, 0.05)
    }
}

impl Toy2DSpec {
    pub fn circle(k: usize, radius: f64, sigma2: f64) -> Self {
        let means = (0..k)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                [radius * a.cos(), radius * a.sin()]
            })
            .collect();
        let covs = (0..k).map(|_| [[sigma2, 0.0], [0.0, sigma2]]).collect();
        Self { means, covs }
    }

    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.is_empty() || self.means.len() != self.covs.len() {
            return Err(Error::invalid("toy2d spec: means/covs length"));
        }
        for c in &self.covs {
            let sym = (c[0][1] - c[1][0]).abs();
            let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
            if sym > 1e-9 || det <= 0.0 || c[0][0] <= 0.0 {
                return Err(Error::invalid(format!("covariance {c:?} is not SPD")));
            }
        }
        for i in 0..self.means.len() {
            for j in i + 1..self.means.len() {
                if self.means[i] == self.means[j] {
                    return Err(Error::invalid("toy2d means must be pairwise distinct"));
                }
            }
        }
        Ok(())
    }

    /// Draw from N(mean_k, cov_k) via the 2x2 Cholesky factor.
    pub fn draw(&self, k: usize, rng: &mut impl Rng) -> [f64; 2] {
        let m = self.means[k];
        let c = self.covs[k];
        let l11 = c[0][0].sqrt();
        let l21 = c[1][0] / l11;
        let l22 = (c[1][1] - l21 * l21).sqrt();
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        [m[0] + l11 * z0, m[1] + l21 * z0 + l22 * z1]
    }

    /// Closed-form marginal of x_t given condition k:
    /// N(sqrt(abar) mu, abar Sigma + (1 - abar) I).
    pub fn noised_marginal(
        &self,
        k: usize,
        t: usize,
        sched: &NoiseSchedule,
    ) -> ([f64; 2], [[f64; 2]; 2]) {
        let ab = sched.alpha_bar(t);
        let m = self.means[k];
        let c = self.covs[k];
        let mean = [ab.sqrt() * m[0], ab.sqrt() * m[1]];
        let mut cov = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                cov[i][j] = ab * c[i][j] + if i == j { 1.0 - ab } else { 0.0 };
            }
        }
        (mean, cov)
    }
}

/// Sample `per_condition` points per condition, deterministically per seed.
pub fn gen_toy2d(spec: &Toy2DSpec, per_condition: usize, seed: u64) -> Result<PairedDataset> {
    spec.validate()?;
    let mut examples = Vec::with_capacity(spec.k() * per_condition);
    for k in 0..spec.k() {
        let mut rng = derive_rng(seed, "toy2d", &[k as u64]);
        for _ in 0..per_condition {
            let p = spec.draw(k, &mut rng);
            examples.push((
                Tensor::new(&[2], vec![p[0] as f32, p[1] as f32])?,
                Condition::labeled(k as u32),
            ));
        }
    }
    Ok(PairedDataset {
        examples,
        provenance: Provenance::Real,
    })
}
