//! Conditional denoiser architectures, condition embeddings (including the
//! reserved null token), per-block feature taps, teacher-to-student
//! initialization, and the temporary projection heads used by the feature
//! loss.
//!
//! Two architectures share one parameter/graph vocabulary:
//! * `ConvNet` — a residual conv net for images: conv-in, `depth` residual
//!   blocks (each GN → SiLU → conv → +embedding bias → GN → SiLU → conv),
//!   GN/SiLU/conv-out head. Timestep and condition embeddings are projected
//!   to a per-channel bias inside every block.
//! * `Mlp` — a residual perceptron for 2-D points with the embeddings
//!   concatenated onto the input.
//!
//! Features are tapped after selected residual blocks; taps are what the
//! feature-matching loss consumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::kernels::norm_groups;
use crate::numcore::{BoundParams, NodeId, ParamSet, Scalar, Tape, Tensor};
use crate::rng::derive_rng;

/// Conditioning input: a plain class label, a (class, style) pair, or the
/// reserved null token used by classifier-free guidance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Condition {
    Labeled { class: u32 },
    Composite { class: u32, style: u32 },
    Null,
}

impl Condition {
    pub fn labeled(class: u32) -> Self {
        Condition::Labeled { class }
    }

    pub fn composite(class: u32, style: u32) -> Self {
        Condition::Composite { class, style }
    }

    /// Class id, if any.
    pub fn class(&self) -> Option<u32> {
        match self {
            Condition::Labeled { class } | Condition::Composite { class, .. } => Some(*class),
            Condition::Null => None,
        }
    }
}

/// Embedding-row layout for a condition space of `classes` x `styles`
/// (styles = 1 for plain labeled data). The null token owns the last row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CondVocab {
    pub classes: u32,
    pub styles: u32,
}

impl CondVocab {
    pub fn labeled(classes: u32) -> Self {
        Self { classes, styles: 1 }
    }

    pub fn composite(classes: u32, styles: u32) -> Self {
        Self { classes, styles }
    }

    pub fn rows(&self) -> usize {
        (self.classes * self.styles) as usize + 1
    }

    pub fn null_row(&self) -> usize {
        (self.classes * self.styles) as usize
    }

    pub fn index(&self, cond: Condition) -> Result<usize> {
        match cond {
            Condition::Null => Ok(self.null_row()),
            Condition::Labeled { class } => {
                if self.styles != 1 {
                    return Err(Error::invalid(format!(
                        "labeled condition on a composite vocabulary ({} styles)",
                        self.styles
                    )));
                }
                if class >= self.classes {
                    return Err(Error::invalid(format!(
                        "class {class} out of {} classes",
                        self.classes
                    )));
                }
                Ok(class as usize)
            }
            Condition::Composite { class, style } => {
                if class >= self.classes || style >= self.styles {
                    return Err(Error::invalid(format!(
                        "condition ({class},{style}) out of {}x{}",
                        self.classes, self.styles
                    )));
                }
                Ok((class * self.styles + style) as usize)
            }
        }
    }

    /// Every non-null condition, class-major.
    pub fn all_conditions(&self) -> Vec<Condition> {
        let mut out = Vec::with_capacity((self.classes * self.styles) as usize);
        for class in 0..self.classes {
            for style in 0..self.styles {
                if self.styles == 1 {
                    out.push(Condition::labeled(class));
                } else {
                    out.push(Condition::composite(class, style));
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    ConvNet,
}

/// Architecture description; parameter shapes are derivable from the spec
/// alone, which is what makes checkpoints reloadable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserSpec {
    pub kind: ModelKind,
    /// `[dim]` for Mlp, `[channels, height, width]` for ConvNet.
    pub input: Vec<usize>,
    /// Base channel width (conv) or hidden width (mlp).
    pub width: usize,
    /// Residual block count.
    pub depth: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    /// Block indices whose outputs are exposed as features.
    pub taps: Vec<usize>,
    pub vocab: CondVocab,
}

impl DenoiserSpec {
    /// Conv spec with taps after every block.
    pub fn conv(input: [usize; 3], width: usize, depth: usize, vocab: CondVocab) -> Self {
        Self {
            kind: ModelKind::ConvNet,
            input: input.to_vec(),
            width,
            depth,
            cond_dim: 32,
            time_dim: 32,
            taps: (0..depth).collect(),
            vocab,
        }
    }

    /// Mlp spec with taps after every block.
    pub fn mlp(input_dim: usize, width: usize, depth: usize, vocab: CondVocab) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input: vec![input_dim],
            width,
            depth,
            cond_dim: 16,
            time_dim: 16,
            taps: (0..depth).collect(),
            vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 {
            return Err(Error::invalid("denoiser width/depth must be positive"));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 || self.cond_dim == 0 {
            return Err(Error::invalid("embedding dims must be positive (time even)"));
        }
        match self.kind {
            ModelKind::Mlp => {
                if self.input.len() != 1 {
                    return Err(Error::invalid(format!("mlp input {:?}", self.input)));
                }
            }
            ModelKind::ConvNet => {
                if self.input.len() != 3 {
                    return Err(Error::invalid(format!("conv input {:?}", self.input)));
                }
            }
        }
        if !self.taps.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("taps must be strictly increasing"));
        }
        if self.taps.iter().any(|&t| t >= self.depth) {
            return Err(Error::invalid("tap index beyond depth"));
        }
        if self.vocab.classes == 0 || self.vocab.styles == 0 {
            return Err(Error::invalid("vocabulary must be non-empty"));
        }
        Ok(())
    }

    fn emb_dim(&self) -> usize {
        self.time_dim + self.cond_dim
    }

    fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let mut out = Vec::new();
        let w = self.width;
        let ed = self.emb_dim();
        out.push((
            "cond_embed".into(),
            vec![self.vocab.rows(), self.cond_dim],
            Init::Normal { std: 1.0 },
        ));
        out.push((
            "time_mlp.w1".into(),
            vec![self.time_dim, self.time_dim],
            Init::He {
                fan_in: self.time_dim,
            },
        ));
        out.push(("time_mlp.b1".into(), vec![self.time_dim], Init::Zeros));
        out.push((
            "time_mlp.w2".into(),
            vec![self.time_dim, self.time_dim],
            Init::He {
                fan_in: self.time_dim,
            },
        ));
        out.push(("time_mlp.b2".into(), vec![self.time_dim], Init::Zeros));
        match self.kind {
            ModelKind::ConvNet => {
                let ic = self.input[0];
                out.push((
                    "conv_in.w".into(),
                    vec![w, ic, 3, 3],
                    Init::He { fan_in: ic * 9 },
                ));
                out.push(("conv_in.b".into(), vec![w], Init::Zeros));
                for i in 0..self.depth {
                    let p = |s: &str| format!("block{i}.{s}");
                    out.push((p("norm1.gamma"), vec![w], Init::Ones));
                    out.push((p("norm1.beta"), vec![w], Init::Zeros));
                    out.push((p("conv1.w"), vec![w, w, 3, 3], Init::He { fan_in: w * 9 }));
                    out.push((p("conv1.b"), vec![w], Init::Zeros));
                    out.push((p("emb.w"), vec![w, ed], Init::He { fan_in: ed }));
                    out.push((p("emb.b"), vec![w], Init::Zeros));
                    out.push((p("norm2.gamma"), vec![w], Init::Ones));
                    out.push((p("norm2.beta"), vec![w], Init::Zeros));
                    out.push((p("conv2.w"), vec![w, w, 3, 3], Init::He { fan_in: w * 9 }));
                    out.push((p("conv2.b"), vec![w], Init::Zeros));
                }
                out.push(("norm_out.gamma".into(), vec![w], Init::Ones));
                out.push(("norm_out.beta".into(), vec![w], Init::Zeros));
                out.push(("conv_out.w".into(), vec![ic, w, 3, 3], Init::Zeros));
                out.push(("conv_out.b".into(), vec![ic], Init::Zeros));
            }
            ModelKind::Mlp => {
                let d = self.input[0];
                out.push((
                    "fc_in.w".into(),
                    vec![w, d + ed],
                    Init::He { fan_in: d + ed },
                ));
                out.push(("fc_in.b".into(), vec![w], Init::Zeros));
                for i in 0..self.depth {
                    let p = |s: &str| format!("block{i}.{s}");
                    out.push((p("fc1.w"), vec![w, w], Init::He { fan_in: w }));
                    out.push((p("fc1.b"), vec![w], Init::Zeros));
                    out.push((p("fc2.w"), vec![w, w], Init::He { fan_in: w }));
                    out.push((p("fc2.b"), vec![w], Init::Zeros));
                }
                out.push(("fc_out.w".into(), vec![d, w], Init::Zeros));
                out.push(("fc_out.b".into(), vec![d], Init::Zeros));
            }
        }
        out
    }
}

enum Init {
    Zeros,
    Ones,
    He { fan_in: usize },
    Normal { std: f64 },
}

fn init_tensor<T: Scalar>(seed: u64, name: &str, shape: &[usize], init: &Init) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, T::one()),
        Init::He { fan_in } => random_tensor(seed, name, shape, (2.0 / *fan_in as f64).sqrt()),
        Init::Normal { std } => random_tensor(seed, name, shape, *std),
    }
}

// Init streams are keyed by parameter name, not insertion order.
fn random_tensor<T: Scalar>(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor<T> {
    let mut rng = derive_rng(seed, "model.init", &[hash_name(name)]);
    let mut t = Tensor::<T>::randn(shape, &mut rng);
    let s = T::from_f64(std);
    for v in t.data_mut() {
        *v = *v * s;
    }
    t
}

fn hash_name(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Sinusoidal timestep features (raw step index, standard log-spaced
/// frequencies).
pub fn time_features<T: Scalar>(t: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        data.push(T::from_f64((t as f64 * freq).sin()));
    }
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        data.push(T::from_f64((t as f64 * freq).cos()));
    }
    Tensor::new(&[dim], data).expect("time features")
}

/// A conditional noise-prediction network: spec plus parameters.
#[derive(Clone, Debug)]
pub struct DenoiserModel<T> {
    pub spec: DenoiserSpec,
    pub params: ParamSet<T>,
}

impl<T: Scalar> DenoiserModel<T> {
    /// Deterministic initialization from a seed; same spec + seed gives
    /// bit-identical parameters.
    pub fn build(spec: DenoiserSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new();
        for (name, shape, init) in spec.param_specs() {
            params.add(&name, init_tensor::<T>(seed, &name, &shape, &init))?;
        }
        Ok(Self { spec, params })
    }

    /// Rebuild a model around an existing parameter set (checkpoint load).
    pub fn from_params(spec: DenoiserSpec, params: ParamSet<T>) -> Result<Self> {
        spec.validate()?;
        for (name, shape, _) in spec.param_specs() {
            let t = params.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "parameter {name:?}: got {:?}, spec wants {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { spec, params })
    }

    /// Build the forward graph on an existing tape. Returns the noise
    /// prediction node and tapped feature nodes.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: NodeId,
        t: usize,
        cond: Condition,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        if tape.value(x).shape() != self.spec.input.as_slice() {
            return Err(Error::shape(format!(
                "denoiser input {:?}, spec wants {:?}",
                tape.value(x).shape(),
                self.spec.input
            )));
        }
        let row = self.spec.vocab.index(cond)?;
        let tf = tape.input(time_features::<T>(t, self.spec.time_dim));
        let h1 = tape.dense(tf, bound.node("time_mlp.w1")?, Some(bound.node("time_mlp.b1")?))?;
        let h1 = tape.silu(h1);
        let temb = tape.dense(h1, bound.node("time_mlp.w2")?, Some(bound.node("time_mlp.b2")?))?;
        let cemb = tape.embed(bound.node("cond_embed")?, row)?;
        let emb = tape.concat(&[temb, cemb])?;
        let semb = tape.silu(emb);

        let mut taps = Vec::with_capacity(self.spec.taps.len());
        let eps = match self.spec.kind {
            ModelKind::ConvNet => {
                let groups = norm_groups(self.spec.width);
                let mut h =
                    tape.conv2d(x, bound.node("conv_in.w")?, Some(bound.node("conv_in.b")?))?;
                for i in 0..self.spec.depth {
                    let p = |s: &str| format!("block{i}.{s}");
                    let a = tape.group_norm(
                        h,
                        bound.node(&p("norm1.gamma"))?,
                        bound.node(&p("norm1.beta"))?,
                        groups,
                    )?;
                    let a = tape.silu(a);
                    let a =
                        tape.conv2d(a, bound.node(&p("conv1.w"))?, Some(bound.node(&p("conv1.b"))?))?;
                    let a = tape.group_norm(
                        a,
                        bound.node(&p("norm2.gamma"))?,
                        bound.node(&p("norm2.beta"))?,
                        groups,
                    )?;
                    // Conditioning enters after the norm; a bias added before
                    // it would be cancelled when groups hold few channels.
                    let eb =
                        tape.dense(semb, bound.node(&p("emb.w"))?, Some(bound.node(&p("emb.b"))?))?;
                    let a = tape.channel_bias(a, eb)?;
                    let a = tape.silu(a);
                    let a =
                        tape.conv2d(a, bound.node(&p("conv2.w"))?, Some(bound.node(&p("conv2.b"))?))?;
                    h = tape.add(h, a)?;
                    if self.spec.taps.contains(&i) {
                        taps.push(h);
                    }
                }
                let o = tape.group_norm(
                    h,
                    bound.node("norm_out.gamma")?,
                    bound.node("norm_out.beta")?,
                    groups,
                )?;
                let o = tape.silu(o);
                tape.conv2d(o, bound.node("conv_out.w")?, Some(bound.node("conv_out.b")?))?
            }
            ModelKind::Mlp => {
                let inp = tape.concat(&[x, semb])?;
                let mut h = tape.dense(inp, bound.node("fc_in.w")?, Some(bound.node("fc_in.b")?))?;
                h = tape.silu(h);
                for i in 0..self.spec.depth {
                    let p = |s: &str| format!("block{i}.{s}");
                    let a =
                        tape.dense(h, bound.node(&p("fc1.w"))?, Some(bound.node(&p("fc1.b"))?))?;
                    let a = tape.silu(a);
                    let a =
                        tape.dense(a, bound.node(&p("fc2.w"))?, Some(bound.node(&p("fc2.b"))?))?;
                    h = tape.add(h, a)?;
                    if self.spec.taps.contains(&i) {
                        taps.push(h);
                    }
                }
                tape.dense(h, bound.node("fc_out.w")?, Some(bound.node("fc_out.b")?))?
            }
        };
        Ok((eps, taps))
    }

    /// Gradient-free evaluation: predicted noise plus tapped features.
    /// A pure function of (params, x, t, cond).
    pub fn forward(
        &self,
        x: &Tensor<T>,
        t: usize,
        cond: Condition,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let bound = tape.bind_params(&self.params, false);
        let xid = tape.input(x.clone());
        let (eps, taps) = self.forward_on(&mut tape, &bound, xid, t, cond)?;
        Ok((
            tape.value(eps).clone(),
            taps.into_iter().map(|id| tape.value(id).clone()).collect(),
        ))
    }

    pub fn cast<U: Scalar>(&self) -> DenoiserModel<U> {
        DenoiserModel {
            spec: self.spec.clone(),
            params: self.params.cast::<U>(),
        }
    }
}

/// Teacher block indices retained by a depth-pruned student: evenly spaced,
/// always keeping the first (and for depth >= 2 the last) block.
pub fn retained_blocks(teacher_depth: usize, student_depth: usize) -> Vec<usize> {
    if student_depth == 1 {
        return vec![0];
    }
    (0..student_depth)
        .map(|j| ((j * (teacher_depth - 1)) as f64 / (student_depth - 1) as f64).round() as usize)
        .collect()
}

/// Initialize a depth-pruned student from a teacher: retained blocks are
/// copied bitwise, everything else (embeddings, in/out layers) is shared
/// bitwise. Width or embedding changes are incompatible — channel-compressed
/// students must use random init.
pub fn init_student_from_teacher<T: Scalar>(
    teacher: &DenoiserModel<T>,
    student_spec: DenoiserSpec,
) -> Result<DenoiserModel<T>> {
    student_spec.validate()?;
    let t = &teacher.spec;
    if student_spec.kind != t.kind || student_spec.input != t.input || student_spec.vocab != t.vocab
    {
        return Err(Error::IncompatibleArchitecture(
            "student must share the teacher's kind, input shape, and vocabulary".into(),
        ));
    }
    if student_spec.width != t.width
        || student_spec.cond_dim != t.cond_dim
        || student_spec.time_dim != t.time_dim
    {
        return Err(Error::IncompatibleArchitecture(format!(
            "teacher init requires matching widths (teacher {}, student {}); \
             channel-compressed students use random init",
            t.width, student_spec.width
        )));
    }
    if student_spec.depth > t.depth {
        return Err(Error::IncompatibleArchitecture(format!(
            "student depth {} exceeds teacher depth {}",
            student_spec.depth, t.depth
        )));
    }
    let retained = retained_blocks(t.depth, student_spec.depth);
    let mut params = ParamSet::new();
    for (name, _, _) in student_spec.param_specs() {
        let teacher_name = match block_index(&name) {
            Some((j, suffix)) => format!("block{}.{}", retained[j], suffix),
            None => name.clone(),
        };
        params.add(&name, teacher.params.get(&teacher_name)?.clone())?;
    }
    DenoiserModel::from_params(student_spec, params)
}

fn block_index(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("block")?;
    let dot = rest.find('.')?;
    let idx = rest[..dot].parse().ok()?;
    Some((idx, &rest[dot + 1..]))
}

/// One feature-loss pairing: student tap block -> teacher tap block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapPair {
    pub student_tap: usize,
    pub teacher_tap: usize,
}

/// Pair each student tap with a teacher tap. Equal-length tap lists pair
/// positionally; shorter student lists spread evenly across the teacher's.
pub fn tap_pairing(teacher: &DenoiserSpec, student: &DenoiserSpec) -> Result<Vec<TapPair>> {
    if teacher.kind != student.kind {
        return Err(Error::IncompatibleArchitecture(
            "tap pairing across different architectures".into(),
        ));
    }
    if student.taps.is_empty() || teacher.taps.is_empty() {
        return Err(Error::invalid("tap pairing requires taps on both models"));
    }
    let ns = student.taps.len();
    let nt = teacher.taps.len();
    let pairs = (0..ns)
        .map(|i| {
            let ti = if ns == 1 {
                nt - 1
            } else {
                ((i * (nt - 1)) as f64 / (ns - 1) as f64).round() as usize
            };
            TapPair {
                student_tap: student.taps[i],
                teacher_tap: teacher.taps[ti.min(nt - 1)],
            }
        })
        .collect();
    Ok(pairs)
}

/// Temporary linear maps from student feature widths to teacher feature
/// widths, one per tap pair; discarded after distillation.
#[derive(Clone, Debug)]
pub struct ProjectionHeads<T> {
    pub params: ParamSet<T>,
    pub pairs: Vec<TapPair>,
    kind: ModelKind,
}

impl<T: Scalar> ProjectionHeads<T> {
    /// Identity-initialized heads when widths match, He-initialized
    /// otherwise.
    pub fn new(
        teacher: &DenoiserSpec,
        student: &DenoiserSpec,
        pairs: Vec<TapPair>,
        seed: u64,
    ) -> Result<Self> {
        let mut params = ParamSet::new();
        let (tw, sw) = (teacher.width, student.width);
        for (i, _) in pairs.iter().enumerate() {
            let name = format!("head{i}.w");
            let tensor = if tw == sw {
                let mut t = match teacher.kind {
                    ModelKind::ConvNet => Tensor::zeros(&[tw, sw, 1, 1]),
                    ModelKind::Mlp => Tensor::zeros(&[tw, sw]),
                };
                let d = t.data_mut();
                for r in 0..tw {
                    d[r * sw + r] = T::one();
                }
                t
            } else {
                let shape: Vec<usize> = match teacher.kind {
                    ModelKind::ConvNet => vec![tw, sw, 1, 1],
                    ModelKind::Mlp => vec![tw, sw],
                };
                init_tensor::<T>(seed, &name, &shape, &Init::He { fan_in: sw })
            };
            params.add(&name, tensor)?;
        }
        Ok(Self {
            params,
            pairs,
            kind: teacher.kind,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Project one tapped student feature on a tape.
    pub fn project_on(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        head: usize,
        feat: NodeId,
    ) -> Result<NodeId> {
        let w = bound.node(&format!("head{head}.w"))?;
        match self.kind {
            ModelKind::ConvNet => tape.conv2d(feat, w, None),
            ModelKind::Mlp => tape.dense(feat, w, None),
        }
    }

    /// Map student features to teacher widths; feature count must equal the
    /// head count.
    pub fn project(&self, feats: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        if feats.len() != self.pairs.len() {
            return Err(Error::invalid(format!(
                "{} features for {} heads",
                feats.len(),
                self.pairs.len()
            )));
        }
        let mut tape = Tape::new();
        let bound = tape.bind_params(&self.params, false);
        let mut out = Vec::with_capacity(feats.len());
        for (i, f) in feats.iter().enumerate() {
            let fid = tape.input(f.clone());
            let p = self.project_on(&mut tape, &bound, i, fid)?;
            out.push(tape.value(p).clone());
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> ProjectionHeads<U> {
        ProjectionHeads {
            params: self.params.cast::<U>(),
            pairs: self.pairs.clone(),
            kind: self.kind,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_conv_spec() -> DenoiserSpec {
        DenoiserSpec {
            cond_dim: 8,
            time_dim: 8,
            ..DenoiserSpec::conv([1, 8, 8], 12, 4, CondVocab::composite(3, 2))
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = DenoiserModel::<f32>::build(small_conv_spec(), 9).unwrap();
        let b = DenoiserModel::<f32>::build(small_conv_spec(), 9).unwrap();
        assert!(a.params.bit_eq(&b.params));
        let c = DenoiserModel::<f32>::build(small_conv_spec(), 10).unwrap();
        assert!(!a.params.bit_eq(&c.params));
    }

    #[test]
    fn forward_shape_and_tap_count() {
        let model = DenoiserModel::<f32>::build(small_conv_spec(), 1).unwrap();
        let x = Tensor::<f32>::randn(&[1, 8, 8], &mut crate::rng::derive_rng(2, "x", &[]));
        let (eps, taps) = model.forward(&x, 5, Condition::composite(1, 1)).unwrap();
        assert_eq!(eps.shape(), x.shape());
        assert_eq!(taps.len(), model.spec.taps.len());
        for tap in &taps {
            assert_eq!(tap.shape(), &[12, 8, 8]);
        }
    }

    #[test]
    fn forward_is_pure() {
        let model = DenoiserModel::<f32>::build(small_conv_spec(), 1).unwrap();
        let x = Tensor::<f32>::randn(&[1, 8, 8], &mut crate::rng::derive_rng(2, "x", &[]));
        let (a, _) = model.forward(&x, 3, Condition::Null).unwrap();
        let (b, _) = model.forward(&x, 3, Condition::Null).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn null_condition_has_its_own_row() {
        let mut model = DenoiserModel::<f32>::build(small_conv_spec(), 1).unwrap();
        // The output conv is zero-initialized; give it weight so the noise
        // prediction actually depends on the embeddings.
        model
            .params
            .set(
                "conv_out.w",
                Tensor::randn(&[1, 12, 3, 3], &mut crate::rng::derive_rng(3, "w", &[])),
            )
            .unwrap();
        let x = Tensor::<f32>::randn(&[1, 8, 8], &mut crate::rng::derive_rng(3, "x", &[]));
        let (base, _) = model.forward(&x, 7, Condition::Null).unwrap();

        // Perturb every labeled embedding row; the null output must not move.
        let mut perturbed = model.clone();
        let vocab = perturbed.spec.vocab;
        let mut table = perturbed.params.get("cond_embed").unwrap().clone();
        {
            let width = table.shape()[1];
            let d = table.data_mut();
            for row in 0..vocab.null_row() {
                for v in &mut d[row * width..(row + 1) * width] {
                    *v += 3.0;
                }
            }
        }
        perturbed.params.set("cond_embed", table).unwrap();
        let (after, _) = perturbed.forward(&x, 7, Condition::Null).unwrap();
        assert!(base.bit_eq(&after));
        let (labeled_before, _) = model.forward(&x, 7, Condition::composite(0, 0)).unwrap();
        let (labeled_after, _) = perturbed.forward(&x, 7, Condition::composite(0, 0)).unwrap();
        assert!(!labeled_before.bit_eq(&labeled_after));
    }

    #[test]
    fn identity_pruning_copies_everything() {
        let teacher = DenoiserModel::<f32>::build(small_conv_spec(), 4).unwrap();
        let student = init_student_from_teacher(&teacher, small_conv_spec()).unwrap();
        assert!(student.params.bit_eq(&teacher.params));
    }

    #[test]
    fn half_depth_student_copies_retained_blocks() {
        let teacher = DenoiserModel::<f32>::build(small_conv_spec(), 4).unwrap();
        let mut sspec = small_conv_spec();
        sspec.depth = 2;
        sspec.taps = vec![0, 1];
        let student = init_student_from_teacher(&teacher, sspec).unwrap();
        let retained = retained_blocks(4, 2);
        assert_eq!(retained, vec![0, 3]);
        for (j, &tj) in retained.iter().enumerate() {
            let s = student.params.get(&format!("block{j}.conv1.w")).unwrap();
            let t = teacher.params.get(&format!("block{tj}.conv1.w")).unwrap();
            assert!(s.bit_eq(t));
        }
        // Retained-block features match at the first tap: block 0 is shared
        // and sits directly after the shared conv_in.
        let x = Tensor::<f32>::randn(&[1, 8, 8], &mut crate::rng::derive_rng(5, "x", &[]));
        let (_, t_taps) = teacher.forward(&x, 2, Condition::composite(2, 0)).unwrap();
        let (_, s_taps) = student.forward(&x, 2, Condition::composite(2, 0)).unwrap();
        assert!(s_taps[0].bit_eq(&t_taps[0]));
    }

    #[test]
    fn narrower_student_is_incompatible() {
        let teacher = DenoiserModel::<f32>::build(small_conv_spec(), 4).unwrap();
        let mut sspec = small_conv_spec();
        sspec.width = 8;
        let err = init_student_from_teacher(&teacher, sspec).unwrap_err();
        assert!(matches!(err, Error::IncompatibleArchitecture(_)));
    }

    #[test]
    fn projection_identity_and_zero() {
        let spec = small_conv_spec();
        let pairs = tap_pairing(&spec, &spec).unwrap();
        let heads = ProjectionHeads::<f32>::new(&spec, &spec, pairs, 1).unwrap();
        let feats: Vec<Tensor<f32>> = (0..heads.len())
            .map(|i| Tensor::randn(&[12, 8, 8], &mut crate::rng::derive_rng(6, "f", &[i as u64])))
            .collect();
        let projected = heads.project(&feats).unwrap();
        for (f, p) in feats.iter().zip(&projected) {
            assert!(f.bit_eq(p));
        }

        let mut zero_heads = heads.clone();
        for i in 0..zero_heads.len() {
            let name = format!("head{i}.w");
            let z = Tensor::zeros(zero_heads.params.get(&name).unwrap().shape());
            zero_heads.params.set(&name, z).unwrap();
        }
        for p in zero_heads.project(&feats).unwrap() {
            assert!(p.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn projection_count_mismatch_is_an_error() {
        let spec = small_conv_spec();
        let pairs = tap_pairing(&spec, &spec).unwrap();
        let heads = ProjectionHeads::<f32>::new(&spec, &spec, pairs, 1).unwrap();
        assert!(heads.project(&[]).is_err());
    }

    #[test]
    fn tap_pairing_spreads_evenly() {
        let t = small_conv_spec();
        let mut s = small_conv_spec();
        s.depth = 2;
        s.taps = vec![0, 1];
        let pairs = tap_pairing(&t, &s).unwrap();
        assert_eq!(
            pairs,
            vec![
                TapPair {
                    student_tap: 0,
                    teacher_tap: 0
                },
                TapPair {
                    student_tap: 1,
                    teacher_tap: 3
                },
            ]
        );
    }

    #[test]
    fn labeled_condition_on_composite_vocab_is_rejected() {
        let vocab = CondVocab::composite(3, 2);
        assert!(vocab.index(Condition::labeled(1)).is_err());
        assert_eq!(vocab.index(Condition::Null).unwrap(), 6);
        assert_eq!(vocab.index(Condition::composite(2, 1)).unwrap(), 5);
    }
}
