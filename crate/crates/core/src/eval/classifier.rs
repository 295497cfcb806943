//! The fidelity classifier: a small conv/perceptron trained on clean
//! dataset images, used as the condition-alignment judge and as the
//! feature extractor for feature-space Fréchet distances.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PairedDataset;
use crate::error::{Error, Result};
use crate::models::ModelKind;
use crate::numcore::kernels::norm_groups;
use crate::numcore::{AdamWConfig, AdamWState, BoundParams, NodeId, ParamGrads, ParamSet, Tape, Tensor};
use crate::rng::{derive_rng, derive_seed};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub width: usize,
    pub penult: usize,
    pub iters: usize,
    pub batch: usize,
    pub opt: AdamWConfig,
    /// Pixel-noise augmentation during training; keeps the judge robust to
    /// soft generated strokes.
    pub noise_std: f64,
    pub heldout_frac: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            width: 16,
            penult: 32,
            iters: 2000,
            batch: 32,
            opt: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            noise_std: 0.15,
            heldout_frac: 0.1,
        }
    }
}

/// Trained judge: predicts the class of a clean (or generated) image and
/// exposes its penultimate activations.
#[derive(Clone, Debug)]
pub struct Classifier {
    kind: ModelKind,
    input: Vec<usize>,
    width: usize,
    penult: usize,
    pub classes: usize,
    pub params: ParamSet<f32>,
    pub heldout_accuracy: f64,
}

impl Classifier {
    fn forward_on(
        &self,
        tape: &mut Tape<f32>,
        bound: &BoundParams,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let (logits, penult) = match self.kind {
            ModelKind::ConvNet => {
                let h = tape.conv2d(x, bound.node("conv1.w")?, Some(bound.node("conv1.b")?))?;
                let h = tape.group_norm(
                    h,
                    bound.node("norm1.gamma")?,
                    bound.node("norm1.beta")?,
                    norm_groups(self.width),
                )?;
                let h = tape.silu(h);
                let h = tape.conv2d(h, bound.node("conv2.w")?, Some(bound.node("conv2.b")?))?;
                let h = tape.silu(h);
                let flat_len = tape.value(h).len();
                let flat = tape.reshape(h, &[flat_len])?;
                let p = tape.dense(flat, bound.node("fc1.w")?, Some(bound.node("fc1.b")?))?;
                let p = tape.silu(p);
                let l = tape.dense(p, bound.node("fc2.w")?, Some(bound.node("fc2.b")?))?;
                (l, p)
            }
            ModelKind::Mlp => {
                let h = tape.dense(x, bound.node("fc0.w")?, Some(bound.node("fc0.b")?))?;
                let h = tape.silu(h);
                let p = tape.dense(h, bound.node("fc1.w")?, Some(bound.node("fc1.b")?))?;
                let p = tape.silu(p);
                let l = tape.dense(p, bound.node("fc2.w")?, Some(bound.node("fc2.b")?))?;
                (l, p)
            }
        };
        Ok((logits, penult))
    }

    fn eval(&self, x: &Tensor<f32>) -> Result<(Vec<f32>, Vec<f64>)> {
        if x.shape() != self.input.as_slice() {
            return Err(Error::shape(format!(
                "classifier input {:?}, expected {:?}",
                x.shape(),
                self.input
            )));
        }
        let mut tape = Tape::new();
        let bound = tape.bind_params(&self.params, false);
        let xid = tape.input(x.clone());
        let (logits, penult) = self.forward_on(&mut tape, &bound, xid)?;
        Ok((
            tape.value(logits).data().to_vec(),
            tape.value(penult).data().iter().map(|&v| v as f64).collect(),
        ))
    }

    /// Most likely class.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<u32> {
        let (logits, _) = self.eval(x)?;
        Ok(argmax(&logits))
    }

    /// Penultimate-layer features (the feature-Fréchet embedding).
    pub fn penultimate(&self, x: &Tensor<f32>) -> Result<Vec<f64>> {
        Ok(self.eval(x)?.1)
    }

    pub fn penult_dim(&self) -> usize {
        self.penult
    }

    /// Fraction of examples classified into their condition's class.
    pub fn accuracy(&self, examples: &[(Tensor<f32>, u32)]) -> Result<f64> {
        if examples.is_empty() {
            return Ok(0.0);
        }
        let hits: usize = examples
            .par_iter()
            .map(|(x, class)| Ok(usize::from(self.predict(x)? == *class)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum();
        Ok(hits as f64 / examples.len() as f64)
    }
}

fn argmax(v: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

fn classifier_params(
    kind: ModelKind,
    input: &[usize],
    width: usize,
    penult: usize,
    classes: usize,
    seed: u64,
) -> Result<ParamSet<f32>> {
    let mut p = ParamSet::new();
    let rng_for = |name: &str| derive_rng(seed, "classifier.init", &[name_hash(name)]);
    let he = |shape: &[usize], fan_in: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut t = Tensor::<f32>::randn(shape, rng);
        let s = (2.0 / fan_in as f64).sqrt() as f32;
        for v in t.data_mut() {
            *v *= s;
        }
        t
    };
    match kind {
        ModelKind::ConvNet => {
            let c = input[0];
            let flat = width * input[1] * input[2];
            p.add("conv1.w", he(&[width, c, 3, 3], c * 9, &mut rng_for("conv1.w")))?;
            p.add("conv1.b", Tensor::zeros(&[width]))?;
            p.add("norm1.gamma", Tensor::full(&[width], 1.0))?;
            p.add("norm1.beta", Tensor::zeros(&[width]))?;
            p.add(
                "conv2.w",
                he(&[width, width, 3, 3], width * 9, &mut rng_for("conv2.w")),
            )?;
            p.add("conv2.b", Tensor::zeros(&[width]))?;
            p.add("fc1.w", he(&[penult, flat], flat, &mut rng_for("fc1.w")))?;
            p.add("fc1.b", Tensor::zeros(&[penult]))?;
            p.add(
                "fc2.w",
                he(&[classes, penult], penult, &mut rng_for("fc2.w")),
            )?;
            p.add("fc2.b", Tensor::zeros(&[classes]))?;
        }
        ModelKind::Mlp => {
            let d = input[0];
            p.add("fc0.w", he(&[width, d], d, &mut rng_for("fc0.w")))?;
            p.add("fc0.b", Tensor::zeros(&[width]))?;
            p.add("fc1.w", he(&[penult, width], width, &mut rng_for("fc1.w")))?;
            p.add("fc1.b", Tensor::zeros(&[penult]))?;
            p.add(
                "fc2.w",
                he(&[classes, penult], penult, &mut rng_for("fc2.w")),
            )?;
            p.add("fc2.b", Tensor::zeros(&[classes]))?;
        }
    }
    Ok(p)
}

fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Train the judge on clean images with one-hot MSE and pixel-noise
/// augmentation; reports held-out accuracy. Deterministic per seed.
pub fn train_fidelity_classifier(
    dataset: &PairedDataset,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<Classifier> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("classifier training set".into()));
    }
    let labeled: Vec<(Tensor<f32>, u32)> = dataset
        .examples
        .iter()
        .map(|(x, c)| {
            c.class()
                .map(|cl| (x.clone(), cl))
                .ok_or_else(|| Error::invalid("null condition in classifier data"))
        })
        .collect::<Result<_>>()?;
    let classes = labeled.iter().map(|(_, c)| c + 1).max().unwrap() as usize;
    let distinct = {
        let mut seen: Vec<u32> = labeled.iter().map(|(_, c)| *c).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    };
    if distinct < 2 {
        return Err(Error::invalid(
            "classifier needs at least two classes in the dataset",
        ));
    }
    let input = labeled[0].0.shape().to_vec();
    let kind = if input.len() == 3 {
        ModelKind::ConvNet
    } else {
        ModelKind::Mlp
    };

    // Deterministic held-out split.
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    order.shuffle(&mut derive_rng(seed, "classifier.split", &[]));
    let held = ((labeled.len() as f64 * cfg.heldout_frac) as usize).min(labeled.len() - 1);
    let heldout: Vec<(Tensor<f32>, u32)> =
        order[..held].iter().map(|&i| labeled[i].clone()).collect();
    let train: Vec<(Tensor<f32>, u32)> =
        order[held..].iter().map(|&i| labeled[i].clone()).collect();

    let mut clf = Classifier {
        kind,
        input: input.clone(),
        width: cfg.width,
        penult: cfg.penult,
        classes,
        params: classifier_params(
            kind,
            &input,
            cfg.width,
            cfg.penult,
            classes,
            derive_seed(seed, "classifier", &[]),
        )?,
        heldout_accuracy: 0.0,
    };
    let mut opt = AdamWState::new(cfg.opt, &clf.params)?;

    for iter in 0..cfg.iters {
        let mut brng = derive_rng(seed, "classifier.batch", &[iter as u64]);
        let batch: Vec<usize> = (0..cfg.batch)
            .map(|_| brng.random_range(0..train.len()))
            .collect();
        let per: Vec<(f64, ParamGrads<f32>)> = batch
            .par_iter()
            .enumerate()
            .map(|(i, &ix)| {
                let (x, class) = &train[ix];
                let mut rng = derive_rng(seed, "classifier.noise", &[iter as u64, i as u64]);
                let noisy = if cfg.noise_std > 0.0 {
                    let noise = Tensor::<f32>::randn(x.shape(), &mut rng);
                    x.scaled_sum(1.0, &noise, cfg.noise_std as f32)?
                } else {
                    x.clone()
                };
                let mut onehot = vec![0.0f32; classes];
                onehot[*class as usize] = 1.0;
                let target = Tensor::new(&[classes], onehot)?;

                let mut tape = Tape::new();
                let bound = tape.bind_params(&clf.params, true);
                let xid = tape.input(noisy);
                let (logits, _) = clf.forward_on(&mut tape, &bound, xid)?;
                let tid = tape.input(target);
                let diff = tape.sub(logits, tid)?;
                let loss = tape.mean_sq(diff);
                let (lv, grads) = tape.backward(loss)?;
                Ok((lv as f64, tape.param_grads(&grads, &bound)))
            })
            .collect::<Result<_>>()?;
        let inv = 1.0 / batch.len() as f32;
        let mut grads = ParamGrads::default();
        for (_, g) in &per {
            grads.accumulate_scaled(g, inv)?;
        }
        opt.step(&mut clf.params, &grads)?;
    }
    clf.heldout_accuracy = if heldout.is_empty() {
        f64::NAN
    } else {
        clf.accuracy(&heldout)?
    };
    Ok(clf)
}
