//! The two diagnostic experiments plus condition-fidelity measurement.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::classifier::Classifier;
use crate::data::PairedDataset;
use crate::diffusion::{forward_diffuse, inference_grid, sample, sample_batch, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::models::{Condition, DenoiserModel};
use crate::numcore::Tensor;
use crate::rng::{derive_rng, derive_seed};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondFidelity {
    pub condition: Condition,
    pub n: usize,
    pub matched: usize,
}

impl CondFidelity {
    pub fn accuracy(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.matched as f64 / self.n as f64
        }
    }
}

/// Sample `n_per` images per condition and report the fraction the
/// classifier assigns to the conditioning class. `n_per == 0` is a valid
/// empty report.
pub fn condition_fidelity(
    model: &DenoiserModel<f32>,
    conditions: &[Condition],
    n_per: usize,
    classifier: &Classifier,
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<CondFidelity>> {
    Ok(condition_fidelity_with_samples(
        model, conditions, n_per, classifier, sampler, sched, seed,
    )?
    .0)
}

/// Like [`condition_fidelity`], also returning the generated images per
/// condition (for sample sheets and feature-space statistics).
#[allow(clippy::type_complexity)]
pub fn condition_fidelity_with_samples(
    model: &DenoiserModel<f32>,
    conditions: &[Condition],
    n_per: usize,
    classifier: &Classifier,
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<(Vec<CondFidelity>, Vec<Vec<Tensor<f32>>>)> {
    if n_per == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let mut rows = Vec::with_capacity(conditions.len());
    let mut samples = Vec::with_capacity(conditions.len());
    for (ci, &cond) in conditions.iter().enumerate() {
        let class = cond
            .class()
            .ok_or_else(|| Error::invalid("cannot score fidelity of the null condition"))?;
        if class as usize >= classifier.classes {
            return Err(Error::invalid(format!(
                "condition class {class} beyond classifier classes {}",
                classifier.classes
            )));
        }
        let conds = vec![cond; n_per];
        let images = sample_batch(
            model,
            &conds,
            sampler,
            sched,
            derive_seed(seed, "fidelity", &[ci as u64]),
        )?;
        let matched: usize = images
            .par_iter()
            .map(|img| Ok(usize::from(classifier.predict(img)? == class)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum();
        rows.push(CondFidelity {
            condition: cond,
            n: n_per,
            matched,
        });
        samples.push(images);
    }
    Ok((rows, samples))
}

/// One swap trial: a source image with its label, and the (different)
/// condition the reverse process is driven with.
#[derive(Clone, Debug)]
pub struct SwapPair {
    pub x0: Tensor<f32>,
    pub source: Condition,
    pub target: Condition,
}

/// Draw swap pairs from a dataset: uniformly chosen examples, targets drawn
/// uniformly over conditions of a different class.
pub fn make_swap_pairs(
    dataset: &PairedDataset,
    pool: &[Condition],
    n: usize,
    seed: u64,
) -> Result<Vec<SwapPair>> {
    use rand::Rng;
    if dataset.is_empty() || pool.is_empty() {
        return Err(Error::invalid("swap pairs need a dataset and a pool"));
    }
    let mut rng = derive_rng(seed, "swap.pairs", &[]);
    (0..n)
        .map(|_| {
            let (x0, source) = loop {
                let ix = rng.random_range(0..dataset.len());
                let (x, c) = &dataset.examples[ix];
                // need at least one pool condition with a different class
                if pool.iter().any(|p| p.class() != c.class()) {
                    break (x.clone(), *c);
                }
            };
            let target = loop {
                let ix = rng.random_range(0..pool.len());
                if pool[ix].class() != source.class() {
                    break pool[ix];
                }
            };
            Ok(SwapPair { x0, source, target })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapRow {
    pub t: usize,
    pub n: usize,
    pub frac_source: f64,
    pub frac_target: f64,
    pub frac_other: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SwapTable {
    pub rows: Vec<SwapRow>,
}

/// The condition-swap phase experiment: noise each source image to x_t,
/// regenerate from t under the swapped condition, and classify the result
/// as source class / target class / other, per grid timestep.
pub fn swap_experiment(
    model: &DenoiserModel<f32>,
    t_grid: &[usize],
    pairs: &[SwapPair],
    classifier: &Classifier,
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<SwapTable> {
    sampler.validate(sched)?;
    if pairs.is_empty() {
        return Err(Error::invalid("swap experiment needs pairs"));
    }
    let grid = inference_grid(sched.len(), sampler.steps);
    for &t in t_grid {
        if !grid.contains(&t) {
            return Err(Error::invalid(format!(
                "swap timestep {t} is not on the sampler grid"
            )));
        }
    }
    for p in pairs {
        if p.source.class() == p.target.class() {
            return Err(Error::invalid(
                "swap pair source and target must have different classes",
            ));
        }
    }
    let mut rows = Vec::with_capacity(t_grid.len());
    for (ti, &t) in t_grid.iter().enumerate() {
        let outcomes: Vec<(bool, bool)> = pairs
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let mut rng = derive_rng(seed, "swap.noise", &[ti as u64, i as u64]);
                let eps = Tensor::<f32>::randn(p.x0.shape(), &mut rng);
                let x_t = forward_diffuse(&p.x0, t, &eps, sched)?;
                let y = sample(
                    model,
                    p.target,
                    sampler,
                    sched,
                    derive_seed(seed, "swap.traj", &[ti as u64, i as u64]),
                    Some((x_t, t)),
                )?;
                let pred = classifier.predict(&y)?;
                Ok((
                    Some(pred) == p.source.class(),
                    Some(pred) == p.target.class(),
                ))
            })
            .collect::<Result<_>>()?;
        let n = outcomes.len();
        let src = outcomes.iter().filter(|(s, _)| *s).count();
        let tgt = outcomes.iter().filter(|(_, t)| *t).count();
        rows.push(SwapRow {
            t,
            n,
            frac_source: src as f64 / n as f64,
            frac_target: tgt as f64 / n as f64,
            frac_other: (n - src - tgt) as f64 / n as f64,
        });
    }
    Ok(SwapTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_toy2d, Toy2DSpec};
    use crate::eval::classifier::{train_fidelity_classifier, ClassifierConfig};
    use crate::models::{CondVocab, DenoiserSpec};

    fn toy_classifier() -> (Classifier, PairedDataset) {
        let spec = Toy2DSpec::circle(4, 4.0, 0.05);
        let data = gen_toy2d(&spec, 40, 3).unwrap();
        let cfg = ClassifierConfig {
            iters: 400,
            noise_std: 0.05,
            ..ClassifierConfig::default()
        };
        (train_fidelity_classifier(&data, &cfg, 7).unwrap(), data)
    }

    #[test]
    fn untrained_model_fidelity_is_chance_level() {
        let (clf, _) = toy_classifier();
        let vocab = CondVocab::labeled(4);
        let spec = DenoiserSpec {
            cond_dim: 8,
            time_dim: 8,
            ..DenoiserSpec::mlp(2, 16, 2, vocab)
        };
        let model = DenoiserModel::<f32>::build(spec, 5).unwrap();
        let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let sampler = SamplerConfig {
            steps: 10,
            guidance: 1.0,
            ..SamplerConfig::default()
        };
        let conds = vocab.all_conditions();
        let n = 64;
        let report =
            condition_fidelity(&model, &conds, n, &clf, &sampler, &sched, 11).unwrap();
        let overall: f64 = report.iter().map(|r| r.matched as f64).sum::<f64>()
            / report.iter().map(|r| r.n as f64).sum::<f64>();
        // Chance is 1/4; allow 3 binomial sigma over the pooled count.
        let pooled_n = (n * conds.len()) as f64;
        let sigma = (0.25 * 0.75 / pooled_n).sqrt();
        assert!(
            (overall - 0.25).abs() < 3.0 * sigma + 0.05,
            "chance-level check: {overall}"
        );
    }

    #[test]
    fn zero_samples_is_an_empty_report() {
        let (clf, _) = toy_classifier();
        let vocab = CondVocab::labeled(4);
        let spec = DenoiserSpec {
            cond_dim: 8,
            time_dim: 8,
            ..DenoiserSpec::mlp(2, 16, 2, vocab)
        };
        let model = DenoiserModel::<f32>::build(spec, 5).unwrap();
        let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let report = condition_fidelity(
            &model,
            &vocab.all_conditions(),
            0,
            &clf,
            &SamplerConfig::default(),
            &sched,
            11,
        )
        .unwrap();
        assert!(report.is_empty());
    }

    #[test]
    fn swap_rows_partition_and_grid_is_validated() {
        let (clf, data) = toy_classifier();
        let vocab = CondVocab::labeled(4);
        let spec = DenoiserSpec {
            cond_dim: 8,
            time_dim: 8,
            ..DenoiserSpec::mlp(2, 16, 2, vocab)
        };
        let model = DenoiserModel::<f32>::build(spec, 5).unwrap();
        let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let sampler = SamplerConfig {
            steps: 10,
            guidance: 1.0,
            ..SamplerConfig::default()
        };
        let grid = inference_grid(100, 10);
        let pairs = make_swap_pairs(&data, &vocab.all_conditions(), 16, 3).unwrap();
        let table = swap_experiment(
            &model,
            &[grid[0], grid[9]],
            &pairs,
            &clf,
            &sampler,
            &sched,
            13,
        )
        .unwrap();
        for row in &table.rows {
            let sum = row.frac_source + row.frac_target + row.frac_other;
            assert!((sum - 1.0).abs() < 1e-12);
            assert_eq!(row.n, 16);
        }

        // Off-grid timestep is an argument error.
        let err = swap_experiment(&model, &[grid[0] + 1], &pairs, &clf, &sampler, &sched, 13);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }
}
