//! Gaussian statistics, the 2-Wasserstein^2 (Fréchet) distance, symmetric
//! KL, and the closed-form noised-distribution overlap curve.

use serde::{Deserialize, Serialize};

use crate::data::Toy2DSpec;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};

/// Mean and (symmetrized) covariance fitted to samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major d x d matrix.
    pub cov: Vec<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn from_parts(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        if cov.len() != mean.len() * mean.len() {
            return Err(Error::shape(format!(
                "covariance {} entries for dim {}",
                cov.len(),
                mean.len()
            )));
        }
        Ok(Self { mean, cov })
    }

    /// Unbiased sample estimate; covariance is symmetrized on the way out.
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::invalid("need at least 2 samples to fit a Gaussian"));
        }
        let d = samples[0].len();
        if samples.iter().any(|s| s.len() != d) {
            return Err(Error::shape("inconsistent sample dimensions"));
        }
        let n = samples.len() as f64;
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, &v) in mean.iter_mut().zip(s) {
                *m += v / n;
            }
        }
        let mut cov = vec![0.0; d * d];
        for s in samples {
            for i in 0..d {
                let di = s[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (s[j] - mean[j]) / (n - 1.0);
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                cov[i * d + j] = cov[j * d + i];
            }
        }
        Ok(Self { mean, cov })
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, row-major eigenvector matrix V with rows as vectors),
/// satisfying A = V^T diag(vals) V.
fn jacobi_eigh(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..d {
            for j in i + 1..d {
                off += m[i * d + j] * m[i * d + j];
            }
        }
        if off.sqrt() < 1e-14 * norm {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..d {
                    let mip = m[i * d + p];
                    let miq = m[i * d + q];
                    m[i * d + p] = c * mip - s * miq;
                    m[i * d + q] = s * mip + c * miq;
                }
                for j in 0..d {
                    let mpj = m[p * d + j];
                    let mqj = m[q * d + j];
                    m[p * d + j] = c * mpj - s * mqj;
                    m[q * d + j] = s * mpj + c * mqj;
                }
                for j in 0..d {
                    let vpj = v[p * d + j];
                    let vqj = v[q * d + j];
                    v[p * d + j] = c * vpj - s * vqj;
                    v[q * d + j] = s * vpj + c * vqj;
                }
            }
        }
    }
    let vals = (0..d).map(|i| m[i * d + i]).collect();
    (vals, v)
}

/// Symmetric PSD matrix square root via eigendecomposition; negative
/// eigenvalues are clamped at 0.
fn sqrtm_psd(a: &[f64], d: usize) -> Vec<f64> {
    let (vals, v) = jacobi_eigh(a, d);
    let roots: Vec<f64> = vals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    // V^T diag(roots) V
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for r in 0..d {
                acc += v[r * d + i] * roots[r] * v[r * d + j];
            }
            out[i * d + j] = acc;
        }
    }
    out
}

fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for r in 0..d {
            let av = a[i * d + r];
            for j in 0..d {
                out[i * d + j] += av * b[r * d + j];
            }
        }
    }
    out
}

/// Fréchet distance (squared 2-Wasserstein between Gaussians):
/// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}).
pub fn frechet(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::shape(format!(
            "frechet: dim {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    // Tr((Sa Sb)^{1/2}) computed via the symmetric form
    // sqrt(Sa) Sb sqrt(Sa), which shares its eigenvalues.
    let ra = sqrtm_psd(&a.cov, d);
    let inner = matmul(&matmul(&ra, &b.cov, d), &ra, d);
    // Symmetrize against rounding before the final eigen pass.
    let mut sym = inner.clone();
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (inner[i * d + j] + inner[j * d + i]);
        }
    }
    let (vals, _) = jacobi_eigh(&sym, d);
    let tr_sqrt: f64 = vals.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let tr_a: f64 = (0..d).map(|i| a.cov[i * d + i]).sum();
    let tr_b: f64 = (0..d).map(|i| b.cov[i * d + i]).sum();
    Ok(mean_term + tr_a + tr_b - 2.0 * tr_sqrt)
}

/// Symmetric KL divergence KL(a||b) + KL(b||a) between Gaussians.
pub fn sym_kl(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    Ok(kl(a, b)? + kl(b, a)?)
}

fn kl(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::shape("sym_kl: dimension mismatch"));
    }
    let (vals_b, v_b) = jacobi_eigh(&b.cov, d);
    let (vals_a, _) = jacobi_eigh(&a.cov, d);
    let floor = 1e-12;
    // Sb^-1 = V^T diag(1/l) V
    let mut b_inv = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for r in 0..d {
                acc += v_b[r * d + i] / vals_b[r].max(floor) * v_b[r * d + j];
            }
            b_inv[i * d + j] = acc;
        }
    }
    let mut trace = 0.0;
    for i in 0..d {
        for r in 0..d {
            trace += b_inv[i * d + r] * a.cov[r * d + i];
        }
    }
    let mut quad = 0.0;
    for i in 0..d {
        for j in 0..d {
            quad += (b.mean[i] - a.mean[i]) * b_inv[i * d + j] * (b.mean[j] - a.mean[j]);
        }
    }
    let logdet_b: f64 = vals_b.iter().map(|&l| l.max(floor).ln()).sum();
    let logdet_a: f64 = vals_a.iter().map(|&l| l.max(floor).ln()).sum();
    Ok(0.5 * (trace + quad - d as f64 + logdet_b - logdet_a))
}

/// Fréchet distance between two sample sets in the classifier's
/// penultimate-feature space. Each side needs at least 2x the feature
/// dimension samples.
pub fn feature_frechet(
    feats_a: &[Vec<f64>],
    feats_b: &[Vec<f64>],
) -> Result<f64> {
    if feats_a.is_empty() || feats_b.is_empty() {
        return Err(Error::invalid("feature_frechet: empty sample set"));
    }
    let d = feats_a[0].len();
    if feats_a.len() < 2 * d || feats_b.len() < 2 * d {
        return Err(Error::invalid(format!(
            "feature_frechet needs >= {} samples per side (feature dim {d}), got {} and {}",
            2 * d,
            feats_a.len(),
            feats_b.len()
        )));
    }
    frechet(&GaussianStats::fit(feats_a)?, &GaussianStats::fit(feats_b)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub t: usize,
    pub alpha_bar: f64,
    pub sym_kl: f64,
    pub w2_sq: f64,
}

/// Closed-form divergence between the noised marginals of two conditions
/// at every timestep: N(sqrt(ab) mu_c, ab Sigma_c + (1-ab) I).
pub fn overlap_curve(
    spec: &Toy2DSpec,
    c1: usize,
    c2: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<OverlapRow>> {
    spec.validate()?;
    if c1 == c2 || c1 >= spec.k() || c2 >= spec.k() {
        return Err(Error::invalid(format!(
            "overlap needs two distinct conditions below {}, got ({c1}, {c2})",
            spec.k()
        )));
    }
    (0..sched.len())
        .map(|t| {
            let (m1, s1) = spec.noised_marginal(c1, t, sched);
            let (m2, s2) = spec.noised_marginal(c2, t, sched);
            let a = GaussianStats::from_parts(m1.to_vec(), s1.concat())?;
            let b = GaussianStats::from_parts(m2.to_vec(), s2.concat())?;
            Ok(OverlapRow {
                t,
                alpha_bar: sched.alpha_bar(t),
                sym_kl: sym_kl(&a, &b)?,
                w2_sq: frechet(&a, &b)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss(mean: &[f64], cov: &[f64]) -> GaussianStats {
        GaussianStats::from_parts(mean.to_vec(), cov.to_vec()).unwrap()
    }

    #[test]
    fn frechet_unit_values() {
        let id2 = [1.0, 0.0, 0.0, 1.0];
        let a = gauss(&[0.0, 0.0], &id2);
        assert!(frechet(&a, &a).unwrap().abs() < 1e-9);

        let b = gauss(&[3.0, 4.0], &id2);
        assert!((frechet(&a, &b).unwrap() - 25.0).abs() < 1e-9);

        let c = gauss(&[0.0, 0.0], &[4.0, 0.0, 0.0, 4.0]);
        assert!((frechet(&a, &c).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative() {
        let a = gauss(&[1.0, -2.0], &[0.5, 0.1, 0.1, 0.8]);
        let b = gauss(&[0.3, 0.9], &[1.5, -0.2, -0.2, 0.4]);
        let ab = frechet(&a, &b).unwrap();
        let ba = frechet(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        assert!(ab > 0.0);
    }

    #[test]
    fn jacobi_reconstructs_symmetric_matrices() {
        use crate::rng::derive_rng;
        use rand::Rng;
        let mut rng = derive_rng(5, "eig", &[]);
        for d in [2usize, 3, 8, 16] {
            // random SPD: A = B B^T + I
            let b: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut a = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    for r in 0..d {
                        a[i * d + j] += b[i * d + r] * b[j * d + r];
                    }
                }
                a[i * d + i] += 1.0;
            }
            let (vals, v) = jacobi_eigh(&a, d);
            // reconstruct V^T diag(vals) V
            let mut rec = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    for r in 0..d {
                        rec[i * d + j] += v[r * d + i] * vals[r] * v[r * d + j];
                    }
                }
            }
            for (x, y) in a.iter().zip(&rec) {
                assert!((x - y).abs() < 1e-9, "d={d}: {x} vs {y}");
            }
            assert!(vals.iter().all(|&l| l > 0.0));
        }
    }

    #[test]
    fn sym_kl_zero_iff_equal() {
        let a = gauss(&[1.0, 2.0], &[0.3, 0.05, 0.05, 0.6]);
        assert!(sym_kl(&a, &a).unwrap().abs() < 1e-9);
        let b = gauss(&[1.5, 2.0], &[0.3, 0.05, 0.05, 0.6]);
        assert!(sym_kl(&a, &b).unwrap() > 0.0);
    }

    #[test]
    fn overlap_curve_monotone_and_vanishing() {
        let spec = Toy2DSpec::default();
        let sched = NoiseSchedule::default_linear();
        let rows = overlap_curve(&spec, 0, 4, &sched).unwrap();
        assert_eq!(rows.len(), 1000);
        // Monotone non-increasing for isotropic equal covariances.
        for w in rows.windows(2) {
            assert!(
                w[1].sym_kl <= w[0].sym_kl + 1e-9,
                "KL rose at t={}",
                w[1].t
            );
        }
        // Terminal divergence under 1% of the t=0 value.
        assert!(rows[999].sym_kl < 0.01 * rows[0].sym_kl);
        // Both marginals approach N(0, I): W2^2 also collapses.
        assert!(rows[999].w2_sq < 0.01 * rows[0].w2_sq);
    }

    #[test]
    fn overlap_equal_conditions_rejected() {
        let spec = Toy2DSpec::default();
        let sched = NoiseSchedule::default_linear();
        assert!(overlap_curve(&spec, 2, 2, &sched).is_err());
    }

    #[test]
    fn fit_recovers_moments() {
        use crate::rng::derive_rng;
        use rand_distr::Distribution;
        let mut rng = derive_rng(6, "fit", &[]);
        let normal = rand_distr::Normal::new(0.0f64, 1.0).unwrap();
        let samples: Vec<Vec<f64>> = (0..20000)
            .map(|_| {
                let z0 = normal.sample(&mut rng);
                let z1 = normal.sample(&mut rng);
                vec![2.0 + z0, -1.0 + 0.5 * z0 + 0.5 * z1]
            })
            .collect();
        let g = GaussianStats::fit(&samples).unwrap();
        assert!((g.mean[0] - 2.0).abs() < 0.05);
        assert!((g.mean[1] + 1.0).abs() < 0.05);
        assert!((g.cov[0] - 1.0).abs() < 0.05);
        assert!((g.cov[1] - 0.5).abs() < 0.05);
        assert!((g.cov[3] - 0.5).abs() < 0.05);
        assert_eq!(g.cov[1], g.cov[2]);
    }
}
