//! Run manifests: the JSON descriptions every command executes from.
//! Manifests round-trip losslessly, validate with exact field paths, and
//! carry optional SHA-256 digests for every referenced artifact.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use rclab_core::data::{GlyphConfig, Toy2DSpec};
use rclab_core::distill::RandomConditioningPolicy;
use rclab_core::models::{CondVocab, Condition, DenoiserSpec, ModelKind};

use crate::checkpoint::ScheduleParams;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "command", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RunManifest {
    TrainTeacher(TrainTeacherManifest),
    GenCache(GenCacheManifest),
    Distill(DistillManifest),
    Eval(EvalManifest),
    SwapExp(SwapExpManifest),
    Overlap(OverlapManifest),
    Report(ReportManifest),
}

impl RunManifest {
    pub fn command_name(&self) -> &'static str {
        match self {
            RunManifest::TrainTeacher(_) => "train-teacher",
            RunManifest::GenCache(_) => "gen-cache",
            RunManifest::Distill(_) => "distill",
            RunManifest::Eval(_) => "eval",
            RunManifest::SwapExp(_) => "swap-exp",
            RunManifest::Overlap(_) => "overlap",
            RunManifest::Report(_) => "report",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            RunManifest::TrainTeacher(m) => m.seed,
            RunManifest::GenCache(m) => m.seed,
            RunManifest::Distill(m) => m.seed,
            RunManifest::Eval(m) => m.seed,
            RunManifest::SwapExp(m) => m.seed,
            RunManifest::Overlap(m) => m.seed,
            RunManifest::Report(m) => m.seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            RunManifest::TrainTeacher(m) => m.seed = seed,
            RunManifest::GenCache(m) => m.seed = seed,
            RunManifest::Distill(m) => m.seed = seed,
            RunManifest::Eval(m) => m.seed = seed,
            RunManifest::SwapExp(m) => m.seed = seed,
            RunManifest::Overlap(m) => m.seed = seed,
            RunManifest::Report(m) => m.seed = seed,
        }
    }

    pub fn out_dir(&self) -> &Path {
        match self {
            RunManifest::TrainTeacher(m) => &m.out_dir,
            RunManifest::GenCache(m) => &m.out_dir,
            RunManifest::Distill(m) => &m.out_dir,
            RunManifest::Eval(m) => &m.out_dir,
            RunManifest::SwapExp(m) => &m.out_dir,
            RunManifest::Overlap(m) => &m.out_dir,
            RunManifest::Report(m) => &m.out_dir,
        }
    }

    pub fn set_out_dir(&mut self, dir: PathBuf) {
        match self {
            RunManifest::TrainTeacher(m) => m.out_dir = dir,
            RunManifest::GenCache(m) => m.out_dir = dir,
            RunManifest::Distill(m) => m.out_dir = dir,
            RunManifest::Eval(m) => m.out_dir = dir,
            RunManifest::SwapExp(m) => m.out_dir = dir,
            RunManifest::Overlap(m) => m.out_dir = dir,
            RunManifest::Report(m) => m.out_dir = dir,
        }
    }

    /// Parse and validate; errors carry the offending field path. The
    /// command tag is peeled off first because internally tagged enums
    /// lose path information during deserialization.
    pub fn from_json(json: &str) -> Result<Self> {
        let mut value: serde_json::Value =
            serde_json::from_str(json).context("manifest is not valid JSON")?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| anyhow::anyhow!("manifest must be a JSON object"))?;
        let command = obj
            .remove("command")
            .and_then(|v| v.as_str().map(str::to_string))
            .ok_or_else(|| anyhow::anyhow!("manifest field `command`: missing or not a string"))?;
        let rest = serde_json::Value::Object(obj.clone());
        fn parse<T: serde::de::DeserializeOwned>(v: serde_json::Value) -> Result<T> {
            serde_path_to_error::deserialize(v)
                .map_err(|e| anyhow::anyhow!("manifest field `{}`: {}", e.path(), e.inner()))
        }
        let manifest = match command.as_str() {
            "train-teacher" => RunManifest::TrainTeacher(parse(rest)?),
            "gen-cache" => RunManifest::GenCache(parse(rest)?),
            "distill" => RunManifest::Distill(parse(rest)?),
            "eval" => RunManifest::Eval(parse(rest)?),
            "swap-exp" => RunManifest::SwapExp(parse(rest)?),
            "overlap" => RunManifest::Overlap(parse(rest)?),
            "report" => RunManifest::Report(parse(rest)?),
            other => bail!("manifest field `command`: unknown command {other:?}"),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("read manifest {path:?}"))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn validate(&self) -> Result<()> {
        match self {
            RunManifest::TrainTeacher(m) => m.validate(),
            RunManifest::GenCache(m) => m.validate(),
            RunManifest::Distill(m) => m.validate(),
            RunManifest::Eval(m) => m.validate(),
            RunManifest::SwapExp(m) => m.validate(),
            RunManifest::Overlap(m) => m.validate(),
            RunManifest::Report(m) => m.validate(),
        }
    }
}

/// A referenced artifact: path plus an optional expected digest. The
/// resolved manifest records the actual digest.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ArtifactRef {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

impl ArtifactRef {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            sha256: None,
        }
    }

    /// Read the file, verify the expected digest if one is pinned, and
    /// return (bytes, actual digest).
    pub fn read_verified(&self) -> Result<(Vec<u8>, String)> {
        let bytes = std::fs::read(&self.path)
            .with_context(|| format!("read artifact {:?}", self.path))?;
        let digest = rclab_core::digest::sha256_hex(&bytes);
        if let Some(expected) = &self.sha256 {
            if *expected != digest {
                bail!(
                    "digest mismatch for artifact {:?}: manifest pins {expected}, file has {digest}",
                    self.path
                );
            }
        }
        Ok((bytes, digest))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Toy2dParams {
    pub k: usize,
    pub radius: f64,
    pub sigma2: f64,
    pub per_condition: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GlyphParams {
    pub classes: u32,
    pub styles: u32,
    pub image_size: usize,
    pub per_cell: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct IdxParams {
    pub images: ArtifactRef,
    pub labels: ArtifactRef,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Toy2d(Toy2dParams),
    Glyphs(GlyphParams),
    Idx(IdxParams),
}

// Hand-rolled so errors keep exact field paths: serde's internally tagged
// enums buffer their content and lose them.
impl<'de> serde::Deserialize<'de> for DatasetSpec {
    fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        use serde::de::Error as DeError;
        let mut value = serde_json::Value::deserialize(deserializer)?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| D::Error::custom("dataset must be an object"))?;
        let kind = obj
            .remove("kind")
            .and_then(|v| v.as_str().map(str::to_string))
            .ok_or_else(|| D::Error::custom("missing field `kind`"))?;
        let rest = serde_json::Value::Object(obj.clone());
        fn sub<T: serde::de::DeserializeOwned, E: DeError>(
            v: serde_json::Value,
        ) -> std::result::Result<T, E> {
            serde_path_to_error::deserialize(v)
                .map_err(|e| E::custom(format!("{}: {}", e.path(), e.inner())))
        }
        match kind.as_str() {
            "toy2d" => Ok(DatasetSpec::Toy2d(sub(rest)?)),
            "glyphs" => Ok(DatasetSpec::Glyphs(sub(rest)?)),
            "idx" => Ok(DatasetSpec::Idx(sub(rest)?)),
            other => Err(D::Error::custom(format!("unknown dataset kind {other:?}"))),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::Toy2d(p) => {
                if p.k < 2 || p.radius <= 0.0 || p.sigma2 <= 0.0 || p.per_condition == 0 {
                    bail!("toy2d dataset needs k >= 2, radius/sigma2 > 0, per_condition > 0");
                }
            }
            DatasetSpec::Glyphs(p) => {
                GlyphConfig {
                    classes: p.classes,
                    styles: p.styles,
                    image_size: p.image_size,
                }
                .validate()?;
                if p.per_cell == 0 {
                    bail!("glyph dataset needs per_cell > 0");
                }
            }
            DatasetSpec::Idx(_) => {}
        }
        Ok(())
    }

    pub fn toy2d_spec(&self) -> Option<Toy2DSpec> {
        match self {
            DatasetSpec::Toy2d(p) => Some(Toy2DSpec::circle(p.k, p.radius, p.sigma2)),
            _ => None,
        }
    }

    /// Dataset-generation seed slot (None for file-backed datasets).
    pub fn seed_mut(&mut self) -> Option<&mut Option<u64>> {
        match self {
            DatasetSpec::Toy2d(p) => Some(&mut p.seed),
            DatasetSpec::Glyphs(p) => Some(&mut p.seed),
            DatasetSpec::Idx(_) => None,
        }
    }
}

/// Model size knobs; kind, input shape, and vocabulary come from the
/// dataset (teacher) or the teacher checkpoint (students).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub width: usize,
    pub depth: usize,
    #[serde(default = "default_emb_dim")]
    pub cond_dim: usize,
    #[serde(default = "default_emb_dim")]
    pub time_dim: usize,
    /// Tap points; None = after every block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taps: Option<Vec<usize>>,
}

fn default_emb_dim() -> usize {
    32
}

impl ModelParams {
    pub fn to_spec(&self, kind: ModelKind, input: Vec<usize>, vocab: CondVocab) -> DenoiserSpec {
        DenoiserSpec {
            kind,
            input,
            width: self.width,
            depth: self.depth,
            cond_dim: self.cond_dim,
            time_dim: self.time_dim,
            taps: self
                .taps
                .clone()
                .unwrap_or_else(|| (0..self.depth).collect()),
            vocab,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_final: Option<f64>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_null_prob")]
    pub null_prob: f64,
    #[serde(default = "default_snapshot")]
    pub snapshot_every: usize,
}

fn default_weight_decay() -> f64 {
    0.01
}
fn default_null_prob() -> f64 {
    0.1
}
fn default_snapshot() -> usize {
    100
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            bail!("train.batch must be positive");
        }
        if !(self.lr > 0.0) {
            bail!("train.lr must be positive");
        }
        if !(0.0..1.0).contains(&self.null_prob) {
            bail!("train.null_prob must be in [0, 1)");
        }
        Ok(())
    }

    pub fn adamw(&self) -> rclab_core::numcore::AdamWConfig {
        rclab_core::numcore::AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..rclab_core::numcore::AdamWConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SamplerParams {
    pub kind: rclab_core::diffusion::SamplerKind,
    pub steps: usize,
    pub guidance: f64,
    #[serde(default)]
    pub eta: f64,
}

impl Default for SamplerParams {
    fn default() -> Self {
        Self {
            kind: rclab_core::diffusion::SamplerKind::Ddim,
            steps: 25,
            guidance: 7.5,
            eta: 0.0,
        }
    }
}

impl SamplerParams {
    pub fn to_config(self) -> rclab_core::diffusion::SamplerConfig {
        rclab_core::diffusion::SamplerConfig {
            kind: self.kind,
            steps: self.steps,
            guidance: self.guidance,
            eta: self.eta,
        }
    }
}

/// Condition subset selector for caches and pools.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConditionSelect {
    All,
    ExcludeClasses { classes: Vec<u32> },
    /// Every `stride`-th condition in class-major order.
    Stride { stride: usize },
    List { conditions: Vec<Condition> },
}

impl ConditionSelect {
    pub fn select(&self, vocab: &CondVocab) -> Result<Vec<Condition>> {
        let all = vocab.all_conditions();
        let out: Vec<Condition> = match self {
            ConditionSelect::All => all,
            ConditionSelect::ExcludeClasses { classes } => all
                .into_iter()
                .filter(|c| c.class().map(|cl| !classes.contains(&cl)).unwrap_or(false))
                .collect(),
            ConditionSelect::Stride { stride } => {
                if *stride == 0 {
                    bail!("condition stride must be positive");
                }
                all.into_iter().step_by(*stride).collect()
            }
            ConditionSelect::List { conditions } => {
                for c in conditions {
                    vocab.index(*c).context("condition outside vocabulary")?;
                }
                conditions.clone()
            }
        };
        if out.is_empty() {
            bail!("condition selection is empty");
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainTeacherManifest {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub schedule: ScheduleParams,
    pub model: ModelParams,
    pub train: TrainParams,
}

impl TrainTeacherManifest {
    fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.schedule.steps < 2 {
            bail!("schedule.steps must be >= 2");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GenCacheManifest {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub teacher: ArtifactRef,
    pub conditions: ConditionSelect,
    pub seeds_per_condition: usize,
    #[serde(default)]
    pub sampler: SamplerParams,
}

impl GenCacheManifest {
    fn validate(&self) -> Result<()> {
        if self.seeds_per_condition == 0 {
            bail!("seeds_per_condition must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistillSourceSpec {
    Cache {
        cache: ArtifactRef,
        /// Fraction of entries to re-generate against the teacher on load.
        #[serde(default)]
        spot_check: f64,
    },
    Dataset {
        dataset: DatasetSpec,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StudentSpecParams {
    /// Depth-pruned B-style student (teacher widths retained).
    DepthPruned { depth: usize },
    /// Channel-compressed C-style student (random init only).
    Channel { width: usize, depth: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DistillManifest {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub teacher: ArtifactRef,
    pub source: DistillSourceSpec,
    pub pool: ConditionSelect,
    pub student: StudentSpecParams,
    pub init: rclab_core::distill::StudentInit,
    pub policy: RandomConditioningPolicy,
    pub train: TrainParams,
    #[serde(default = "default_w")]
    pub w_out: f64,
    #[serde(default = "default_w")]
    pub w_feat: f64,
    #[serde(default = "default_true")]
    pub use_feature_loss: bool,
}

fn default_w() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

impl DistillManifest {
    fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.policy
            .validate()
            .context("policy")?;
        if let DistillSourceSpec::Dataset { dataset } = &self.source {
            dataset.validate()?;
        }
        if self.w_out < 0.0 || self.w_feat < 0.0 {
            bail!("loss weights must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ClassifierParams {
    #[serde(default = "default_clf_width")]
    pub width: usize,
    #[serde(default = "default_clf_penult")]
    pub penult: usize,
    pub iters: usize,
    #[serde(default = "default_clf_batch")]
    pub batch: usize,
    #[serde(default = "default_clf_lr")]
    pub lr: f64,
    #[serde(default = "default_clf_noise")]
    pub noise_std: f64,
}

fn default_clf_width() -> usize {
    16
}
fn default_clf_penult() -> usize {
    32
}
fn default_clf_batch() -> usize {
    32
}
fn default_clf_lr() -> f64 {
    1e-3
}
fn default_clf_noise() -> f64 {
    0.15
}

impl ClassifierParams {
    pub fn to_config(&self) -> rclab_core::eval::ClassifierConfig {
        rclab_core::eval::ClassifierConfig {
            width: self.width,
            penult: self.penult,
            iters: self.iters,
            batch: self.batch,
            opt: rclab_core::numcore::AdamWConfig {
                lr: self.lr,
                ..rclab_core::numcore::AdamWConfig::default()
            },
            noise_std: self.noise_std,
            ..rclab_core::eval::ClassifierConfig::default()
        }
    }
}

impl Default for ClassifierParams {
    fn default() -> Self {
        Self {
            width: default_clf_width(),
            penult: default_clf_penult(),
            iters: 2000,
            batch: default_clf_batch(),
            lr: default_clf_lr(),
            noise_std: default_clf_noise(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalManifest {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ArtifactRef,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub classifier: ClassifierParams,
    /// Classes treated as the unseen split.
    #[serde(default)]
    pub unseen_classes: Vec<u32>,
    pub n_per_condition: usize,
    #[serde(default)]
    pub sampler: SamplerParams,
    /// Samples per condition tiled into the emitted sheet.
    #[serde(default = "default_sheet_per_condition")]
    pub sheet_per_condition: usize,
    /// Clean examples per split used for the feature-space Fréchet score.
    #[serde(default = "default_frechet_reference")]
    pub frechet_reference: usize,
}

fn default_sheet_per_condition() -> usize {
    2
}
fn default_frechet_reference() -> usize {
    512
}

impl EvalManifest {
    fn validate(&self) -> Result<()> {
        self.dataset.validate()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SwapExpManifest {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ArtifactRef,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub classifier: ClassifierParams,
    pub pairs_per_cell: usize,
    #[serde(default)]
    pub sampler: SamplerParams,
    /// Timesteps to probe; None = the full sampler grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<usize>>,
}

impl SwapExpManifest {
    fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.pairs_per_cell == 0 {
            bail!("pairs_per_cell must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OverlapManifest {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub toy2d: DatasetSpec,
    #[serde(default)]
    pub schedule: ScheduleParams,
    pub pair: [usize; 2],
}

impl OverlapManifest {
    fn validate(&self) -> Result<()> {
        if self.toy2d.toy2d_spec().is_none() {
            bail!("overlap requires a toy2d dataset");
        }
        if self.pair[0] == self.pair[1] {
            bail!("overlap pair must name two distinct conditions");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ReportRunRef {
    pub label: String,
    pub report: ArtifactRef,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ReportManifest {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub runs: Vec<ReportRunRef>,
}

impl ReportManifest {
    fn validate(&self) -> Result<()> {
        if self.runs.is_empty() {
            bail!("report needs at least one run");
        }
        Ok(())
    }
}
