//! The method core: the p(t) schedule family, the random-conditioning
//! sampling rule, null-condition dropout, loss assembly (output matching
//! plus feature matching through projection heads), teacher training, and
//! the student distillation loop.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{pull_tensor, push_tensor, read_container, write_container};
use crate::data::{GenerationCache, PairedDataset};
use crate::diffusion::{forward_diffuse, NoiseSchedule};
use crate::error::{Error, Result};
use crate::models::{
    init_student_from_teacher, tap_pairing, Condition, DenoiserModel, DenoiserSpec,
    ProjectionHeads,
};
use crate::numcore::{
    AdamWConfig, AdamWState, BoundParams, NodeId, ParamGrads, Scalar, Tape, Tensor,
};
use crate::rng::{derive_rng, derive_seed};

/// Timestep-dependent probability of swapping the paired condition for a
/// random pool draw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RandomConditioningPolicy {
    /// p(t) = exp(-lambda (1 - t/T)): rare swaps at low t, certain at t = T.
    Exponential { lambda: f64 },
    /// Exponential mirrored around T/2.
    MirroredExponential { lambda: f64 },
    /// p(t) = t/T.
    Linear,
    /// p(t) = 1 / (1 + exp(-slope (t/T - center))).
    Sigmoid { slope: f64, center: f64 },
    Constant { p: f64 },
    Off,
}

impl RandomConditioningPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RandomConditioningPolicy::Exponential { lambda }
            | RandomConditioningPolicy::MirroredExponential { lambda } => {
                if lambda <= 0.0 {
                    return Err(Error::invalid(format!("policy lambda {lambda} must be > 0")));
                }
            }
            RandomConditioningPolicy::Sigmoid { slope, center } => {
                if slope <= 0.0 || !(0.0..1.0).contains(&center) {
                    return Err(Error::invalid(format!(
                        "sigmoid policy wants slope > 0 and center in (0,1), got ({slope}, {center})"
                    )));
                }
            }
            RandomConditioningPolicy::Constant { p } => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::invalid(format!("constant policy p {p} not in [0,1]")));
                }
            }
            RandomConditioningPolicy::Linear | RandomConditioningPolicy::Off => {}
        }
        Ok(())
    }

    /// Swap probability at step `t` of `total`. Total function on
    /// 0 <= t <= total; always lands in [0, 1].
    pub fn p_of_t(&self, t: usize, total: usize) -> f64 {
        let frac = t as f64 / total as f64;
        match *self {
            RandomConditioningPolicy::Exponential { lambda } => (-lambda * (1.0 - frac)).exp(),
            RandomConditioningPolicy::MirroredExponential { lambda } => {
                if frac > 0.5 {
                    (-lambda * (1.0 - frac)).exp()
                } else {
                    (-lambda * frac).exp()
                }
            }
            RandomConditioningPolicy::Linear => frac,
            RandomConditioningPolicy::Sigmoid { slope, center } => {
                1.0 / (1.0 + (-slope * (frac - center)).exp())
            }
            RandomConditioningPolicy::Constant { p } => p,
            RandomConditioningPolicy::Off => 0.0,
        }
    }
}

/// The condition set C explored during distillation (M conditions,
/// typically far more than the paired dataset covers).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionPool {
    pub conditions: Vec<Condition>,
}

impl ConditionPool {
    pub fn new(conditions: Vec<Condition>) -> Self {
        Self { conditions }
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }
}

/// The two-case rule: keep the paired condition with probability 1 - p(t),
/// otherwise draw uniformly from the pool. Teacher and student both see
/// the returned condition.
pub fn sample_condition(
    policy: &RandomConditioningPolicy,
    t: usize,
    total: usize,
    paired: Condition,
    pool: &ConditionPool,
    rng: &mut impl Rng,
) -> Result<Condition> {
    if pool.is_empty() {
        return Err(Error::invalid("condition pool is empty"));
    }
    let p = policy.p_of_t(t, total);
    if p > 0.0 && rng.random::<f64>() < p {
        let ix = rng.random_range(0..pool.len());
        Ok(pool.conditions[ix])
    } else {
        Ok(paired)
    }
}

/// Distillation hyperparameters. Output and feature losses carry equal
/// weight 1 by default; null-condition dropout runs at 10%.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub w_out: f64,
    pub w_feat: f64,
    pub null_prob: f64,
    pub batch: usize,
    pub iters: usize,
    pub opt: AdamWConfig,
    pub policy: RandomConditioningPolicy,
    pub seed: u64,
    pub use_feature_loss: bool,
    pub snapshot_every: usize,
    /// Linear learning-rate decay target over `iters` (None = constant).
    #[serde(default)]
    pub lr_final: Option<f64>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            w_out: 1.0,
            w_feat: 1.0,
            null_prob: 0.1,
            batch: 128,
            iters: 10_000,
            opt: AdamWConfig::default(),
            policy: RandomConditioningPolicy::Exponential { lambda: 5.0 },
            seed: 0,
            use_feature_loss: true,
            snapshot_every: 100,
            lr_final: None,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_out < 0.0 || self.w_feat < 0.0 {
            return Err(Error::invalid("loss weights must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.null_prob) {
            return Err(Error::invalid(format!(
                "null probability {} not in [0,1)",
                self.null_prob
            )));
        }
        if self.batch == 0 || self.snapshot_every == 0 {
            return Err(Error::invalid("batch and snapshot_every must be positive"));
        }
        self.policy.validate()?;
        self.opt.validate()
    }
}

/// Linearly interpolated learning rate for iteration `iter` of `total`.
fn lr_at(base: f64, lr_final: Option<f64>, iter: usize, total: usize) -> f64 {
    match lr_final {
        None => base,
        Some(end) => {
            if total <= 1 {
                base
            } else {
                let frac = (iter as f64 / (total - 1) as f64).min(1.0);
                base + (end - base) * frac
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub out: f64,
    pub feat: f64,
}

/// A fully materialized training example: noised input, its timestep, and
/// the condition fed to both models.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreparedExample {
    #[serde(skip, default = "empty_tensor")]
    pub x_t: Tensor<f32>,
    pub t: usize,
    pub cond: Condition,
}

fn empty_tensor() -> Tensor<f32> {
    Tensor::zeros(&[1])
}

/// Build the per-example distillation loss on a tape:
/// w_out ||eps_T - eps_S||^2 + w_feat sum_l ||f_T^l - proj(f_S^l)||^2.
/// Generic over the scalar so the verification suite can run it in f64.
#[allow(clippy::too_many_arguments)]
pub fn build_distill_loss<T: Scalar>(
    tape: &mut Tape<T>,
    student: &DenoiserModel<T>,
    student_bound: &BoundParams,
    heads: &ProjectionHeads<T>,
    heads_bound: &BoundParams,
    pair_idx: &[(usize, usize)],
    example: (&Tensor<T>, usize, Condition),
    eps_teacher: &Tensor<T>,
    feats_teacher: &[Tensor<T>],
    w_out: f64,
    w_feat: f64,
    use_feature_loss: bool,
) -> Result<(NodeId, NodeId, Option<NodeId>)> {
    let (x_t, t, cond) = example;
    let x_in = tape.input(x_t.clone());
    let (eps_s, taps_s) = student.forward_on(tape, student_bound, x_in, t, cond)?;
    let eps_t = tape.input(eps_teacher.clone());
    let diff = tape.sub(eps_s, eps_t)?;
    let l_out = tape.sq_sum(diff);

    let mut l_feat = None;
    if use_feature_loss && !pair_idx.is_empty() {
        for (head, &(s_idx, t_idx)) in pair_idx.iter().enumerate() {
            let proj = heads.project_on(tape, heads_bound, head, taps_s[s_idx])?;
            let ft = tape.input(feats_teacher[t_idx].clone());
            let d = tape.sub(proj, ft)?;
            let term = tape.sq_sum(d);
            l_feat = Some(match l_feat {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
    }
    let total = match l_feat {
        Some(lf) => {
            let a = tape.scale(l_out, w_out);
            let b = tape.scale(lf, w_feat);
            tape.add(a, b)?
        }
        None => tape.scale(l_out, w_out),
    };
    Ok((total, l_out, l_feat))
}

/// Resolve tap pairings into indices within each model's tap output list.
pub fn resolve_pairs(
    teacher: &DenoiserSpec,
    student: &DenoiserSpec,
    heads: &ProjectionHeads<f32>,
) -> Result<Vec<(usize, usize)>> {
    heads
        .pairs
        .iter()
        .map(|p| {
            let s = student
                .taps
                .iter()
                .position(|&b| b == p.student_tap)
                .ok_or_else(|| {
                    Error::invalid(format!("student tap {} not exposed", p.student_tap))
                })?;
            let t = teacher
                .taps
                .iter()
                .position(|&b| b == p.teacher_tap)
                .ok_or_else(|| {
                    Error::invalid(format!("teacher tap {} not exposed", p.teacher_tap))
                })?;
            Ok((s, t))
        })
        .collect()
}

/// One distillation trainer: frozen teacher, mutable student and heads,
/// one AdamW state over each. Batch assembly parallelizes across examples
/// with per-example streams, so thread count never changes results.
pub struct DistillTrainer<'a> {
    teacher: &'a DenoiserModel<f32>,
    pub student: DenoiserModel<f32>,
    pub heads: ProjectionHeads<f32>,
    pub pool: ConditionPool,
    pub cfg: DistillConfig,
    sched: NoiseSchedule,
    opt_student: AdamWState<f32>,
    opt_heads: AdamWState<f32>,
    pair_idx: Vec<(usize, usize)>,
    pub iteration: usize,
    window: Vec<LossBreakdown>,
    pub history: TrainHistory,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub loss: LossBreakdown,
}

impl<'a> DistillTrainer<'a> {
    pub fn new(
        teacher: &'a DenoiserModel<f32>,
        student: DenoiserModel<f32>,
        heads: ProjectionHeads<f32>,
        pool: ConditionPool,
        cfg: DistillConfig,
        sched: NoiseSchedule,
    ) -> Result<Self> {
        cfg.validate()?;
        if pool.is_empty() {
            return Err(Error::invalid("distillation needs a non-empty condition pool"));
        }
        let pair_idx = resolve_pairs(&teacher.spec, &student.spec, &heads)?;
        let opt_student = AdamWState::new(cfg.opt, &student.params)?;
        let opt_heads = AdamWState::new(cfg.opt, &heads.params)?;
        Ok(Self {
            teacher,
            student,
            heads,
            pool,
            cfg,
            sched,
            opt_student,
            opt_heads,
            pair_idx,
            iteration: 0,
            window: Vec::new(),
            history: TrainHistory::default(),
        })
    }

    /// Draw (t, eps, c-hat) per example and form x_t. Random conditioning
    /// first, then independent null-condition dropout.
    pub fn prepare(&self, batch: &[(Tensor<f32>, Condition)]) -> Result<Vec<PreparedExample>> {
        let total = self.sched.len();
        batch
            .iter()
            .enumerate()
            .map(|(i, (x0, c))| {
                let mut rng = derive_rng(
                    self.cfg.seed,
                    "distill.example",
                    &[self.iteration as u64, i as u64],
                );
                let t = rng.random_range(0..total);
                let eps = Tensor::<f32>::randn(x0.shape(), &mut rng);
                let x_t = forward_diffuse(x0, t, &eps, &self.sched)?;
                let mut cond =
                    sample_condition(&self.cfg.policy, t, total, *c, &self.pool, &mut rng)?;
                if self.cfg.null_prob > 0.0 && rng.random::<f64>() < self.cfg.null_prob {
                    cond = Condition::Null;
                }
                Ok(PreparedExample { x_t, t, cond })
            })
            .collect()
    }

    /// One update on prepared examples: teacher forward (frozen), student
    /// forward/backward, gradients averaged in example order, one AdamW
    /// step on student and heads.
    pub fn step_prepared(&mut self, examples: &[PreparedExample]) -> Result<LossBreakdown> {
        if examples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let per: Vec<(LossBreakdown, ParamGrads<f32>, ParamGrads<f32>)> = examples
            .par_iter()
            .map(|ex| {
                let (eps_t, feats_t) = self.teacher.forward(&ex.x_t, ex.t, ex.cond)?;
                let mut tape = Tape::new();
                let sb = tape.bind_params(&self.student.params, true);
                let hb = tape.bind_params(&self.heads.params, true);
                let (total, l_out, l_feat) = build_distill_loss(
                    &mut tape,
                    &self.student,
                    &sb,
                    &self.heads,
                    &hb,
                    &self.pair_idx,
                    (&ex.x_t, ex.t, ex.cond),
                    &eps_t,
                    &feats_t,
                    self.cfg.w_out,
                    self.cfg.w_feat,
                    self.cfg.use_feature_loss,
                )?;
                let (total_v, grads) = tape.backward(total).map_err(|e| match e {
                    Error::Numeric { context, message } => Error::Numeric {
                        context: format!("distill iteration {}: {context}", self.iteration),
                        message,
                    },
                    other => other,
                })?;
                let breakdown = LossBreakdown {
                    total: total_v as f64,
                    out: tape.scalar(l_out)? as f64,
                    feat: l_feat.map(|n| tape.scalar(n)).transpose()?.unwrap_or(0.0) as f64,
                };
                Ok((
                    breakdown,
                    tape.param_grads(&grads, &sb),
                    tape.param_grads(&grads, &hb),
                ))
            })
            .collect::<Result<_>>()?;

        let inv = 1.0 / examples.len() as f64;
        let mut sgrads = ParamGrads::default();
        let mut hgrads = ParamGrads::default();
        let mut loss = LossBreakdown::default();
        for (b, sg, hg) in &per {
            loss.total += b.total * inv;
            loss.out += b.out * inv;
            loss.feat += b.feat * inv;
            sgrads.accumulate_scaled(sg, inv as f32)?;
            hgrads.accumulate_scaled(hg, inv as f32)?;
        }
        let lr = lr_at(self.cfg.opt.lr, self.cfg.lr_final, self.iteration, self.cfg.iters);
        self.opt_student.config.lr = lr;
        self.opt_heads.config.lr = lr;
        self.opt_student.step(&mut self.student.params, &sgrads)?;
        if !self.heads.params.is_empty() {
            self.opt_heads.step(&mut self.heads.params, &hgrads)?;
        }
        self.iteration += 1;
        self.window.push(loss);
        if self.iteration % self.cfg.snapshot_every == 0 {
            let n = self.window.len() as f64;
            let sum = self
                .window
                .drain(..)
                .fold(LossBreakdown::default(), |a, b| LossBreakdown {
                    total: a.total + b.total,
                    out: a.out + b.out,
                    feat: a.feat + b.feat,
                });
            self.history.rows.push(HistoryRow {
                iteration: self.iteration,
                loss: LossBreakdown {
                    total: sum.total / n,
                    out: sum.out / n,
                    feat: sum.feat / n,
                },
            });
        }
        Ok(loss)
    }

    /// Draw per-example (t, eps, c-hat) and run one update.
    pub fn step(&mut self, batch: &[(Tensor<f32>, Condition)]) -> Result<LossBreakdown> {
        let prepared = self.prepare(batch)?;
        self.step_prepared(&prepared)
    }

    /// Serialize everything needed for a bit-exact resume. RNG streams are
    /// keyed by iteration, so the iteration counter is the stream position.
    pub fn save_state(&self, path: &std::path::Path) -> Result<()> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        {
            let mut push = |name: String, t: &Tensor<f32>| {
                let offset = push_tensor(&mut payload, t);
                tensors.push(serde_json::json!({
                    "name": name, "shape": t.shape(), "offset": offset,
                }));
            };
            for (name, e) in self.student.params.iter() {
                push(format!("student.{name}"), &e.tensor);
            }
            for (name, e) in self.heads.params.iter() {
                push(format!("heads.{name}"), &e.tensor);
            }
            for (name, (m, v)) in &self.opt_student.moments {
                push(format!("opt_s.m.{name}"), m);
                push(format!("opt_s.v.{name}"), v);
            }
            for (name, (m, v)) in &self.opt_heads.moments {
                push(format!("opt_h.m.{name}"), m);
                push(format!("opt_h.v.{name}"), v);
            }
        }
        let header = serde_json::json!({
            "version": 1,
            "iteration": self.iteration,
            "opt_step_student": self.opt_student.step,
            "opt_step_heads": self.opt_heads.step,
            "history": self.history,
            "window": self.window,
            "tensors": tensors,
        });
        write_container(path, b"RCTS1", &header, &payload)
    }

    /// Restore a trainer saved by [`Self::save_state`]; continuing the run
    /// reproduces the uninterrupted one bit-exactly.
    pub fn restore(
        teacher: &'a DenoiserModel<f32>,
        student_spec: DenoiserSpec,
        heads_template: ProjectionHeads<f32>,
        pool: ConditionPool,
        cfg: DistillConfig,
        sched: NoiseSchedule,
        path: &std::path::Path,
    ) -> Result<Self> {
        let (header, payload) = read_container(path, b"RCTS1")?;
        if header["version"].as_u64() != Some(1) {
            return Err(Error::Format(format!(
                "train state version {} unsupported",
                header["version"]
            )));
        }
        let mut table = std::collections::HashMap::new();
        for t in header["tensors"].as_array().into_iter().flatten() {
            let name = t["name"].as_str().unwrap_or_default().to_string();
            let shape: Vec<usize> = serde_json::from_value(t["shape"].clone())
                .map_err(|e| Error::Format(format!("train state shape: {e}")))?;
            let offset = t["offset"].as_u64().unwrap_or(0);
            table.insert(name, pull_tensor(&payload, offset, &shape)?);
        }
        let fetch = |name: &str| -> Result<Tensor<f32>> {
            table
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("train state missing tensor {name:?}")))
        };

        let student_model = DenoiserModel::build(student_spec, 0)?;
        let mut student_params = student_model.params.clone();
        for name in student_params
            .names()
            .map(str::to_string)
            .collect::<Vec<_>>()
        {
            student_params.set(&name, fetch(&format!("student.{name}"))?)?;
        }
        let student = DenoiserModel::from_params(student_model.spec, student_params)?;

        let mut heads = heads_template;
        for name in heads.params.names().map(str::to_string).collect::<Vec<_>>() {
            heads.params.set(&name, fetch(&format!("heads.{name}"))?)?;
        }

        let mut trainer = Self::new(teacher, student, heads, pool, cfg, sched)?;
        trainer.iteration = header["iteration"].as_u64().unwrap_or(0) as usize;
        trainer.opt_student.step = header["opt_step_student"].as_u64().unwrap_or(0);
        trainer.opt_heads.step = header["opt_step_heads"].as_u64().unwrap_or(0);
        trainer.history = serde_json::from_value(header["history"].clone()).unwrap_or_default();
        trainer.window = serde_json::from_value(header["window"].clone()).unwrap_or_default();
        for (name, (m, v)) in trainer.opt_student.moments.iter_mut() {
            *m = fetch(&format!("opt_s.m.{name}"))?;
            *v = fetch(&format!("opt_s.v.{name}"))?;
        }
        for (name, (m, v)) in trainer.opt_heads.moments.iter_mut() {
            *m = fetch(&format!("opt_h.m.{name}"))?;
            *v = fetch(&format!("opt_h.v.{name}"))?;
        }
        Ok(trainer)
    }
}

/// How the student's parameters start: copied from the teacher's retained
/// blocks or a fresh random init.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    Teacher,
    Random,
}

/// The images the distillation loop noises: real pairs or cached teacher
/// generations (the image-free regime).
pub enum DistillSource<'a> {
    Paired(&'a PairedDataset),
    Cache(&'a GenerationCache),
}

/// Full distillation: build the student and heads, loop `iters` batches,
/// and return the student (projection heads are discarded) plus history.
pub fn run_distillation(
    teacher: &DenoiserModel<f32>,
    student_spec: DenoiserSpec,
    init: StudentInit,
    source: DistillSource<'_>,
    pool: ConditionPool,
    cfg: DistillConfig,
    sched: &NoiseSchedule,
) -> Result<(DenoiserModel<f32>, TrainHistory)> {
    let dataset = match source {
        DistillSource::Paired(d) => d.clone(),
        DistillSource::Cache(c) => c.as_dataset(),
    };
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("distillation source".into()));
    }
    for (x, _) in &dataset.examples {
        if x.shape() != teacher.spec.input.as_slice() {
            return Err(Error::shape(format!(
                "source example {:?} vs model input {:?}",
                x.shape(),
                teacher.spec.input
            )));
        }
    }
    let student = match init {
        StudentInit::Teacher => init_student_from_teacher(teacher, student_spec)?,
        StudentInit::Random => {
            DenoiserModel::build(student_spec, derive_seed(cfg.seed, "student.init", &[]))?
        }
    };
    let pairs = tap_pairing(&teacher.spec, &student.spec)?;
    let heads = ProjectionHeads::new(
        &teacher.spec,
        &student.spec,
        pairs,
        derive_seed(cfg.seed, "heads.init", &[]),
    )?;
    let mut trainer =
        DistillTrainer::new(teacher, student, heads, pool, cfg.clone(), sched.clone())?;
    for iter in 0..cfg.iters {
        let batch = draw_batch(&dataset, cfg.batch, cfg.seed, "distill.batch", iter);
        trainer.step(&batch)?;
    }
    let DistillTrainer {
        student, history, ..
    } = trainer;
    Ok((student, history))
}

pub fn draw_batch(
    dataset: &PairedDataset,
    batch: usize,
    seed: u64,
    purpose: &str,
    iter: usize,
) -> Vec<(Tensor<f32>, Condition)> {
    let mut rng = derive_rng(seed, purpose, &[iter as u64]);
    (0..batch)
        .map(|_| {
            let ix = rng.random_range(0..dataset.len());
            dataset.examples[ix].clone()
        })
        .collect()
}

/// Teacher training hyperparameters (plain denoising objective with
/// null-condition dropout so CFG works at sampling time).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherTrainConfig {
    pub iters: usize,
    pub batch: usize,
    pub opt: AdamWConfig,
    pub null_prob: f64,
    pub seed: u64,
    pub snapshot_every: usize,
    /// Linear learning-rate decay target over `iters` (None = constant).
    #[serde(default)]
    pub lr_final: Option<f64>,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self {
            iters: 30_000,
            batch: 128,
            opt: AdamWConfig::default(),
            null_prob: 0.1,
            seed: 0,
            snapshot_every: 100,
            lr_final: None,
        }
    }
}

/// Train a denoiser from scratch on (x, c) pairs with the standard
/// noise-prediction objective. Deterministic per seed; zero iterations
/// returns the freshly initialized model.
pub fn train_teacher(
    dataset: &PairedDataset,
    spec: DenoiserSpec,
    cfg: &TeacherTrainConfig,
    sched: &NoiseSchedule,
) -> Result<(DenoiserModel<f32>, TrainHistory)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("teacher training set".into()));
    }
    if !(0.0..1.0).contains(&cfg.null_prob) {
        return Err(Error::invalid("teacher null probability must be in [0,1)"));
    }
    let mut model = DenoiserModel::<f32>::build(spec, derive_seed(cfg.seed, "teacher.init", &[]))?;
    let mut opt = AdamWState::new(cfg.opt, &model.params)?;
    let mut history = TrainHistory::default();
    let mut window: Vec<f64> = Vec::new();
    let mut last_finite = 0.0f64;
    let total = sched.len();

    for iter in 0..cfg.iters {
        let batch = draw_batch(dataset, cfg.batch, cfg.seed, "teacher.batch", iter);
        let per: Vec<(f64, ParamGrads<f32>)> = batch
            .par_iter()
            .enumerate()
            .map(|(i, (x0, c))| {
                let mut rng = derive_rng(cfg.seed, "teacher.example", &[iter as u64, i as u64]);
                let t = rng.random_range(0..total);
                let eps = Tensor::<f32>::randn(x0.shape(), &mut rng);
                let x_t = forward_diffuse(x0, t, &eps, sched)?;
                let cond = if cfg.null_prob > 0.0 && rng.random::<f64>() < cfg.null_prob {
                    Condition::Null
                } else {
                    *c
                };
                let mut tape = Tape::new();
                let bound = tape.bind_params(&model.params, true);
                let x_in = tape.input(x_t);
                let (eps_hat, _) = model.forward_on(&mut tape, &bound, x_in, t, cond)?;
                let eps_in = tape.input(eps);
                let diff = tape.sub(eps_hat, eps_in)?;
                let loss = tape.sq_sum(diff);
                let (lv, grads) = tape.backward(loss).map_err(|e| match e {
                    Error::Numeric { context, message } => Error::Numeric {
                        context: format!(
                            "teacher iteration {iter} (last finite avg loss {last_finite:.4}): {context}"
                        ),
                        message,
                    },
                    other => other,
                })?;
                Ok((lv as f64, tape.param_grads(&grads, &bound)))
            })
            .collect::<Result<_>>()?;
        let inv = 1.0 / batch.len() as f64;
        let mut grads = ParamGrads::default();
        let mut loss = 0.0;
        for (lv, g) in &per {
            loss += lv * inv;
            grads.accumulate_scaled(g, inv as f32)?;
        }
        opt.config.lr = lr_at(cfg.opt.lr, cfg.lr_final, iter, cfg.iters);
        opt.step(&mut model.params, &grads)?;
        last_finite = loss;
        window.push(loss);
        if (iter + 1) % cfg.snapshot_every == 0 {
            let avg = window.drain(..).sum::<f64>() / cfg.snapshot_every as f64;
            history.rows.push(HistoryRow {
                iteration: iter + 1,
                loss: LossBreakdown {
                    total: avg,
                    out: avg,
                    feat: 0.0,
                },
            });
        }
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::CondVocab;

    #[test]
    fn p_of_t_closed_forms() {
        let t = 1000;
        let exp = RandomConditioningPolicy::Exponential { lambda: 5.0 };
        assert!((exp.p_of_t(1000, t) - 1.0).abs() < 1e-12);
        assert!((exp.p_of_t(0, t) - (-5.0f64).exp()).abs() < 1e-9);
        assert!((exp.p_of_t(0, t) - 0.006738).abs() < 1e-6);

        let sig = RandomConditioningPolicy::Sigmoid {
            slope: 20.0,
            center: 0.7,
        };
        assert!((sig.p_of_t(700, t) - 0.5).abs() < 1e-12);

        let lin = RandomConditioningPolicy::Linear;
        assert!((lin.p_of_t(500, t) - 0.5).abs() < 1e-12);

        let mir = RandomConditioningPolicy::MirroredExponential { lambda: 5.0 };
        let above = mir.p_of_t(501, t);
        let below = mir.p_of_t(499, t);
        let mid = (-2.5f64).exp();
        assert!((above - mid).abs() / mid < 0.02);
        assert!((below - mid).abs() / mid < 0.02);
    }

    #[test]
    fn policy_validation() {
        assert!(RandomConditioningPolicy::Exponential { lambda: 0.0 }
            .validate()
            .is_err());
        assert!(RandomConditioningPolicy::Constant { p: 1.5 }
            .validate()
            .is_err());
        assert!(RandomConditioningPolicy::Sigmoid {
            slope: 20.0,
            center: 1.2
        }
        .validate()
        .is_err());
    }

    proptest::proptest! {
        // p(t) lands in [0,1] for every variant and any valid parameters.
        #[test]
        fn p_of_t_is_a_probability(
            lambda in 0.01f64..50.0,
            slope in 0.01f64..100.0,
            center in 0.01f64..0.99,
            p in 0.0f64..1.0,
            t in 0usize..=1000,
        ) {
            let total = 1000;
            for policy in [
                RandomConditioningPolicy::Exponential { lambda },
                RandomConditioningPolicy::MirroredExponential { lambda },
                RandomConditioningPolicy::Linear,
                RandomConditioningPolicy::Sigmoid { slope, center },
                RandomConditioningPolicy::Constant { p },
                RandomConditioningPolicy::Off,
            ] {
                let v = policy.p_of_t(t, total);
                proptest::prop_assert!((0.0..=1.0).contains(&v), "{policy:?} at {t}: {v}");
            }
        }
    }

    #[test]
    fn sample_condition_off_is_identity() {
        let pool = ConditionPool::new(vec![Condition::labeled(5)]);
        let paired = Condition::labeled(1);
        let mut rng = derive_rng(1, "t", &[]);
        for t in [0, 500, 999] {
            let c = sample_condition(
                &RandomConditioningPolicy::Off,
                t,
                1000,
                paired,
                &pool,
                &mut rng,
            )
            .unwrap();
            assert_eq!(c, paired);
        }
    }

    #[test]
    fn sample_condition_constant_one_always_draws_pool() {
        // Pool disjoint from the paired condition.
        let pool = ConditionPool::new(vec![Condition::labeled(7), Condition::labeled(8)]);
        let paired = Condition::labeled(1);
        let mut rng = derive_rng(2, "t", &[]);
        for _ in 0..200 {
            let c = sample_condition(
                &RandomConditioningPolicy::Constant { p: 1.0 },
                3,
                1000,
                paired,
                &pool,
                &mut rng,
            )
            .unwrap();
            assert_ne!(c, paired);
        }
    }

    #[test]
    fn sample_condition_constant_half_matches_binomial() {
        let pool = ConditionPool::new(vec![Condition::labeled(9)]);
        let paired = Condition::labeled(1);
        let mut rng = derive_rng(3, "t", &[]);
        let n = 100_000;
        let mut swaps = 0usize;
        for _ in 0..n {
            let c = sample_condition(
                &RandomConditioningPolicy::Constant { p: 0.5 },
                3,
                1000,
                paired,
                &pool,
                &mut rng,
            )
            .unwrap();
            if c != paired {
                swaps += 1;
            }
        }
        let sigma = (0.25f64 * n as f64).sqrt();
        assert!((swaps as f64 - 0.5 * n as f64).abs() < 3.0 * sigma);
    }

    #[test]
    fn empty_pool_is_an_error() {
        let pool = ConditionPool::new(vec![]);
        let mut rng = derive_rng(4, "t", &[]);
        assert!(sample_condition(
            &RandomConditioningPolicy::Linear,
            10,
            100,
            Condition::labeled(0),
            &pool,
            &mut rng
        )
        .is_err());
    }

    fn tiny_setup() -> (
        DenoiserModel<f32>,
        PairedDataset,
        ConditionPool,
        NoiseSchedule,
    ) {
        let vocab = CondVocab::labeled(3);
        let spec = DenoiserSpec {
            cond_dim: 8,
            time_dim: 8,
            ..DenoiserSpec::mlp(2, 16, 2, vocab)
        };
        let mut teacher = DenoiserModel::<f32>::build(spec, 11).unwrap();
        // Fresh models end in a zero-initialized output layer; give the
        // teacher a nonzero one so its predictions are distinguishable.
        teacher
            .params
            .set(
                "fc_out.w",
                Tensor::randn(&[2, 16], &mut derive_rng(12, "t", &[])),
            )
            .unwrap();
        let spec2d = crate::data::Toy2DSpec::circle(3, 2.0, 0.05);
        let dataset = crate::data::gen_toy2d(&spec2d, 8, 5).unwrap();
        let pool = ConditionPool::new(vocab.all_conditions());
        let sched = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        (teacher, dataset, pool, sched)
    }

    #[test]
    fn teacher_copy_student_has_zero_loss_and_zero_update() {
        let (teacher, dataset, pool, sched) = tiny_setup();
        let student = init_student_from_teacher(&teacher, teacher.spec.clone()).unwrap();
        let pairs = tap_pairing(&teacher.spec, &student.spec).unwrap();
        let heads = ProjectionHeads::new(&teacher.spec, &student.spec, pairs, 0).unwrap();
        let cfg = DistillConfig {
            batch: 4,
            opt: AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            ..DistillConfig::default()
        };
        let before = student.params.clone();
        let mut trainer = DistillTrainer::new(&teacher, student, heads, pool, cfg, sched).unwrap();
        let batch: Vec<_> = dataset.examples[..4].to_vec();
        let loss = trainer.step(&batch).unwrap();
        assert_eq!(loss.total, 0.0);
        assert_eq!(loss.out, 0.0);
        assert_eq!(loss.feat, 0.0);
        assert!(trainer.student.params.bit_eq(&before));
    }

    #[test]
    fn zero_feature_weight_total_equals_out() {
        let (teacher, dataset, pool, sched) = tiny_setup();
        let student = DenoiserModel::<f32>::build(teacher.spec.clone(), 99).unwrap();
        let pairs = tap_pairing(&teacher.spec, &student.spec).unwrap();
        let heads = ProjectionHeads::new(&teacher.spec, &student.spec, pairs, 0).unwrap();
        let cfg = DistillConfig {
            batch: 4,
            w_feat: 0.0,
            use_feature_loss: false,
            ..DistillConfig::default()
        };
        let mut trainer = DistillTrainer::new(&teacher, student, heads, pool, cfg, sched).unwrap();
        let batch: Vec<_> = dataset.examples[..4].to_vec();
        let loss = trainer.step(&batch).unwrap();
        assert!(loss.total > 0.0);
        assert_eq!(loss.total, loss.out);
        assert_eq!(loss.feat, 0.0);
    }

    #[test]
    fn frozen_batch_loss_decreases_over_fifty_steps() {
        let (teacher, dataset, pool, sched) = tiny_setup();
        let student = DenoiserModel::<f32>::build(teacher.spec.clone(), 99).unwrap();
        let pairs = tap_pairing(&teacher.spec, &student.spec).unwrap();
        let heads = ProjectionHeads::new(&teacher.spec, &student.spec, pairs, 0).unwrap();
        let cfg = DistillConfig {
            batch: 4,
            opt: AdamWConfig {
                lr: 1e-3,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            ..DistillConfig::default()
        };
        let mut trainer =
            DistillTrainer::new(&teacher, student, heads, pool, cfg, sched.clone()).unwrap();
        // Freeze the full example tuple (x_t, t, c-hat): overfitting oracle.
        let batch: Vec<_> = dataset.examples[..4].to_vec();
        let prepared = trainer.prepare(&batch).unwrap();
        let mut prev = f64::INFINITY;
        for step in 0..50 {
            let loss = trainer.step_prepared(&prepared).unwrap();
            assert!(
                loss.total < prev,
                "loss rose at step {step}: {prev} -> {}",
                loss.total
            );
            prev = loss.total;
        }
    }

    #[test]
    fn run_distillation_is_deterministic_and_discards_heads() {
        let (teacher, dataset, pool, sched) = tiny_setup();
        let mut sspec = teacher.spec.clone();
        sspec.depth = 1;
        sspec.taps = vec![0];
        let cfg = DistillConfig {
            batch: 4,
            iters: 5,
            snapshot_every: 5,
            ..DistillConfig::default()
        };
        let (a, ha) = run_distillation(
            &teacher,
            sspec.clone(),
            StudentInit::Teacher,
            DistillSource::Paired(&dataset),
            pool.clone(),
            cfg.clone(),
            &sched,
        )
        .unwrap();
        let (b, hb) = run_distillation(
            &teacher,
            sspec,
            StudentInit::Teacher,
            DistillSource::Paired(&dataset),
            pool,
            cfg,
            &sched,
        )
        .unwrap();
        assert!(a.params.bit_eq(&b.params));
        assert_eq!(ha.rows, hb.rows);
        assert!(!a.params.contains("head0.w"));
    }

    #[test]
    fn zero_iteration_teacher_is_the_initialized_model() {
        let (_, dataset, _, sched) = tiny_setup();
        let spec = DenoiserSpec {
            cond_dim: 8,
            time_dim: 8,
            ..DenoiserSpec::mlp(2, 16, 2, CondVocab::labeled(3))
        };
        let cfg = TeacherTrainConfig {
            iters: 0,
            batch: 4,
            seed: 3,
            ..TeacherTrainConfig::default()
        };
        let (model, history) = train_teacher(&dataset, spec.clone(), &cfg, &sched).unwrap();
        let fresh = DenoiserModel::<f32>::build(spec, derive_seed(3, "teacher.init", &[])).unwrap();
        assert!(model.params.bit_eq(&fresh.params));
        assert!(history.rows.is_empty());
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let (teacher, dataset, pool, sched) = tiny_setup();
        let cfg = DistillConfig {
            batch: 4,
            iters: 0,
            snapshot_every: 2,
            ..DistillConfig::default()
        };
        let make_student = || DenoiserModel::<f32>::build(teacher.spec.clone(), 99).unwrap();
        let make_heads = |seed| {
            let pairs = tap_pairing(&teacher.spec, &teacher.spec).unwrap();
            ProjectionHeads::new(&teacher.spec, &teacher.spec, pairs, seed).unwrap()
        };

        // Uninterrupted: 8 steps.
        let mut full = DistillTrainer::new(
            &teacher,
            make_student(),
            make_heads(1),
            pool.clone(),
            cfg.clone(),
            sched.clone(),
        )
        .unwrap();
        for iter in 0..8 {
            let batch = draw_batch(&dataset, 4, cfg.seed, "distill.batch", iter);
            full.step(&batch).unwrap();
        }

        // Interrupted at 4, serialized, resumed for 4 more.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.rcts");
        let mut half = DistillTrainer::new(
            &teacher,
            make_student(),
            make_heads(1),
            pool.clone(),
            cfg.clone(),
            sched.clone(),
        )
        .unwrap();
        for iter in 0..4 {
            let batch = draw_batch(&dataset, 4, cfg.seed, "distill.batch", iter);
            half.step(&batch).unwrap();
        }
        half.save_state(&path).unwrap();
        let mut resumed = DistillTrainer::restore(
            &teacher,
            teacher.spec.clone(),
            make_heads(1),
            pool,
            cfg.clone(),
            sched,
            &path,
        )
        .unwrap();
        for iter in 4..8 {
            let batch = draw_batch(&dataset, 4, cfg.seed, "distill.batch", iter);
            resumed.step(&batch).unwrap();
        }
        assert!(resumed.student.params.bit_eq(&full.student.params));
        assert!(resumed.heads.params.bit_eq(&full.heads.params));
        assert_eq!(resumed.history.rows, full.history.rows);
    }
}
