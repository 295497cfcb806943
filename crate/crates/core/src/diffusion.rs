//! Noise schedules, the forward noising process, DDPM/DDIM reverse
//! samplers, and classifier-free guidance.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Condition, DenoiserModel};
use crate::numcore::{Scalar, Tensor};
use crate::rng::derive_rng;

/// Discrete forward-process tables over `T` training steps: linear betas
/// and their cumulative signal-retention products.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta interpolation from `beta_start` to `beta_end` over
    /// `steps` training steps; alpha-bar by cumulative product.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!("schedule needs >= 2 steps, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let mut betas = Vec::with_capacity(steps);
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for i in 0..steps {
            let beta = beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64;
            prod *= 1.0 - beta;
            betas.push(beta);
            alpha_bars.push(prod);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Default training granularity: T = 1000, beta in [1e-4, 0.02].
    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule")
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::invalid(format!(
                "timestep {t} out of schedule length {}",
                self.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

/// Reverse-process configuration. DDIM with eta 0 is deterministic given
/// the seed; the DDPM kind is the ancestral sampler (eta forced to 1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    /// Classifier-free guidance scale w.
    pub guidance: f64,
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            steps: 25,
            guidance: 7.5,
            eta: 0.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > sched.len() {
            return Err(Error::invalid(format!(
                "inference steps {} out of schedule length {}",
                self.steps,
                sched.len()
            )));
        }
        if self.guidance < 0.0 || !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid("guidance must be >= 0 and eta in [0,1]"));
        }
        Ok(())
    }

    fn effective_eta(&self) -> f64 {
        match self.kind {
            SamplerKind::Ddpm => 1.0,
            SamplerKind::Ddim => self.eta,
        }
    }
}

/// Evenly spaced inference step grid (ascending), always containing T-1.
pub fn inference_grid(total: usize, steps: usize) -> Vec<usize> {
    (0..steps).map(|j| (j + 1) * total / steps - 1).collect()
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
pub fn forward_diffuse<T: Scalar>(
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::shape(format!(
            "forward_diffuse: x0 {:?} vs eps {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let ab = sched.alpha_bar(t);
    x0.scaled_sum(T::from_f64(ab.sqrt()), eps, T::from_f64((1.0 - ab).sqrt()))
}

/// Guided noise prediction: eps(x,t,null) + w (eps(x,t,c) - eps(x,t,null)).
/// w = 1 is exactly the conditional prediction, w = 0 the unconditional.
pub fn cfg_predict<T: Scalar>(
    model: &DenoiserModel<T>,
    x: &Tensor<T>,
    t: usize,
    cond: Condition,
    guidance: f64,
) -> Result<Tensor<T>> {
    if guidance == 1.0 {
        return Ok(model.forward(x, t, cond)?.0);
    }
    let (un, _) = model.forward(x, t, Condition::Null)?;
    if guidance == 0.0 {
        return Ok(un);
    }
    let (co, _) = model.forward(x, t, cond)?;
    let w = T::from_f64(guidance);
    // un + w (co - un)
    co.scaled_sum(w, &un, T::one() - w)
}

/// Run the reverse process from pure noise (or from a provided start point
/// on the inference grid) down to an x0 estimate.
pub fn sample<T: Scalar>(
    model: &DenoiserModel<T>,
    cond: Condition,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    seed: u64,
    start: Option<(Tensor<T>, usize)>,
) -> Result<Tensor<T>> {
    cfg.validate(sched)?;
    let grid = inference_grid(sched.len(), cfg.steps);
    let mut rng = derive_rng(seed, "sample.trajectory", &[]);
    let (mut x, start_pos) = match start {
        Some((x, t)) => {
            let pos = grid
                .iter()
                .position(|&g| g == t)
                .ok_or_else(|| Error::invalid(format!("start t={t} not on the inference grid")))?;
            if x.shape() != model.spec.input.as_slice() {
                return Err(Error::shape(format!(
                    "start tensor {:?} vs model input {:?}",
                    x.shape(),
                    model.spec.input
                )));
            }
            (x, pos)
        }
        None => (
            Tensor::<T>::randn(&model.spec.input, &mut rng),
            grid.len() - 1,
        ),
    };

    let eta = cfg.effective_eta();
    for gi in (0..=start_pos).rev() {
        let t = grid[gi];
        let ab = sched.alpha_bar(t);
        let ab_prev = if gi > 0 { sched.alpha_bar(grid[gi - 1]) } else { 1.0 };
        let eps_hat = cfg_predict(model, &x, t, cond, cfg.guidance)?;

        // x0_hat = (x - sqrt(1-ab) eps) / sqrt(ab)
        let x0_hat = x.scaled_sum(
            T::from_f64(1.0 / ab.sqrt()),
            &eps_hat,
            T::from_f64(-(1.0 - ab).sqrt() / ab.sqrt()),
        )?;
        let sigma = eta
            * ((1.0 - ab_prev) / (1.0 - ab)).sqrt()
            * (1.0 - ab / ab_prev).sqrt();
        let dir_coeff = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let mut next = x0_hat.scaled_sum(
            T::from_f64(ab_prev.sqrt()),
            &eps_hat,
            T::from_f64(dir_coeff),
        )?;
        if sigma > 0.0 && gi > 0 {
            let z = Tensor::<T>::randn(next.shape(), &mut rng);
            next = next.scaled_sum(T::one(), &z, T::from_f64(sigma))?;
        }
        x = next;
    }
    Ok(x)
}

/// Sample one trajectory per condition, in parallel, with per-trajectory
/// streams derived from (seed, index); results are independent of thread
/// count.
pub fn sample_batch<T: Scalar>(
    model: &DenoiserModel<T>,
    conds: &[Condition],
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<Tensor<T>>> {
    conds
        .par_iter()
        .enumerate()
        .map(|(i, &c)| {
            sample(
                model,
                c,
                cfg,
                sched,
                crate::rng::derive_seed(seed, "sample.batch", &[i as u64]),
                None,
            )
        })
        .collect()
}

/// Draw a standard-normal tensor shaped like `like`.
pub fn randn_like<T: Scalar>(like: &Tensor<T>, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::randn(like.shape(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_matches_direct_product() {
        let s = NoiseSchedule::default_linear();
        // Independent recomputation of the cumulative product in f64.
        let mut prod = 1.0f64;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bar(999) - prod).abs() < 1e-12);
        assert!((s.alpha_bar(999) - 4.0e-5).abs() < 1e-5);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(0) > 0.0 && s.alpha_bar(0) < 1.0);
    }

    #[test]
    fn two_step_schedule() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25]);
    }

    #[test]
    fn bad_beta_order_is_rejected() {
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(1, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
    }

    #[test]
    fn forward_diffuse_direct_substitution() {
        // abar_1 = 0.25 for beta = (0.5, 0.5); x0=(2,0), eps=(1,1).
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        let x0 = Tensor::new(&[2], vec![2.0f64, 0.0]).unwrap();
        let eps = Tensor::new(&[2], vec![1.0f64, 1.0]).unwrap();
        let xt = forward_diffuse(&x0, 1, &eps, &s).unwrap();
        let r = 0.75f64.sqrt();
        assert!((xt.data()[0] - (1.0 + r)).abs() < 1e-12);
        assert!((xt.data()[1] - r).abs() < 1e-12);
    }

    #[test]
    fn forward_diffuse_near_identity_at_tiny_beta() {
        let s = NoiseSchedule::linear(2, 1e-12, 1e-12).unwrap();
        let x0 = Tensor::new(&[2], vec![2.0f64, -3.0]).unwrap();
        let eps = Tensor::new(&[2], vec![1.0f64, 1.0]).unwrap();
        let xt = forward_diffuse(&x0, 0, &eps, &s).unwrap();
        assert!((xt.data()[0] - 2.0).abs() < 1e-5);
        assert!((xt.data()[1] + 3.0).abs() < 1e-5);
    }

    #[test]
    fn forward_diffuse_shape_mismatch() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        let x0 = Tensor::<f32>::zeros(&[2]);
        let eps = Tensor::<f32>::zeros(&[3]);
        assert!(forward_diffuse(&x0, 0, &eps, &s).is_err());
    }

    #[test]
    fn grid_is_even_and_ends_at_top() {
        let g = inference_grid(1000, 25);
        assert_eq!(g.len(), 25);
        assert_eq!(g[0], 39);
        assert_eq!(*g.last().unwrap(), 999);
        assert!(g.windows(2).all(|w| w[1] - w[0] == 40));
        assert_eq!(inference_grid(10, 10), (0..10).collect::<Vec<_>>());
    }
}
