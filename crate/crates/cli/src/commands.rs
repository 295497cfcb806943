//! Command implementations. Every command is a pure function of
//! (manifest, seed, input artifacts): deterministic artifacts land under
//! the output directory next to a resolved copy of the manifest; volatile
//! diagnostics (wall clock, thread count) go to run_info.json, which is
//! excluded from the determinism contract.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use rclab_core::data::{
    gen_toy2d, load_idx, render_glyphs, GenerationCache, GlyphConfig, PairedDataset, Toy2DSpec,
};
use rclab_core::diffusion::inference_grid;
use rclab_core::digest::sha256_hex;
use rclab_core::distill::{
    run_distillation, train_teacher, ConditionPool, DistillConfig, DistillSource,
    TeacherTrainConfig,
};
use rclab_core::eval::{
    condition_fidelity_with_samples, feature_frechet, make_swap_pairs, swap_experiment,
    train_fidelity_classifier, Classifier, EvalReport, FrechetEntry,
};
use rclab_core::models::{CondVocab, Condition, DenoiserSpec, ModelKind};
use rclab_core::numcore::Tensor;
use rclab_core::rng::derive_seed;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use crate::manifest::{
    ArtifactRef, DatasetSpec, DistillManifest, DistillSourceSpec, EvalManifest, GenCacheManifest,
    OverlapManifest, ReportManifest, RunManifest, StudentSpecParams, SwapExpManifest,
    TrainTeacherManifest,
};
use crate::sheet::emit_sample_sheet;

/// Cap worker parallelism at RCLAB_THREADS (default: hardware count).
/// Safe to call repeatedly.
pub fn init_threads() {
    let threads = std::env::var("RCLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let _ = builder.build_global();
}

#[derive(Debug)]
pub struct RunOutputs {
    pub out_dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
}

pub fn run(manifest: RunManifest) -> Result<RunOutputs> {
    init_threads();
    let started = Instant::now();
    let out_dir = manifest.out_dir().to_path_buf();
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("create output directory {out_dir:?}"))?;

    let (resolved, mut artifacts) = match &manifest {
        RunManifest::TrainTeacher(m) => cmd_train_teacher(m)?,
        RunManifest::GenCache(m) => cmd_gen_cache(m)?,
        RunManifest::Distill(m) => cmd_distill(m)?,
        RunManifest::Eval(m) => cmd_eval(m)?,
        RunManifest::SwapExp(m) => cmd_swap(m)?,
        RunManifest::Overlap(m) => cmd_overlap(m)?,
        RunManifest::Report(m) => cmd_report(m)?,
    };

    let resolved_path = out_dir.join("resolved_manifest.json");
    std::fs::write(&resolved_path, resolved.to_json()?)?;
    artifacts.push(resolved_path);

    let info = serde_json::json!({
        "command": manifest.command_name(),
        "wall_clock_seconds": started.elapsed().as_secs_f64(),
        "threads": rayon::current_num_threads(),
    });
    std::fs::write(
        out_dir.join("run_info.json"),
        serde_json::to_string_pretty(&info)?,
    )?;
    Ok(RunOutputs { out_dir, artifacts })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("write {path:?}"))?;
    Ok(())
}

/// Digest of the resolved manifest: the identity every artifact records.
/// The output directory is placement, not configuration, so it is
/// normalized out before hashing.
fn manifest_digest(m: &RunManifest) -> Result<String> {
    let mut normalized = m.clone();
    normalized.set_out_dir(PathBuf::new());
    Ok(sha256_hex(normalized.to_json()?.as_bytes()))
}

/// Materialize a dataset plus the model-facing facts it implies.
fn build_dataset(
    spec: &DatasetSpec,
    manifest_seed: u64,
) -> Result<(PairedDataset, CondVocab, ModelKind, Vec<usize>)> {
    match spec {
        DatasetSpec::Toy2d(p) => {
            let t = Toy2DSpec::circle(p.k, p.radius, p.sigma2);
            let data = gen_toy2d(
                &t,
                p.per_condition,
                p.seed
                    .unwrap_or_else(|| derive_seed(manifest_seed, "dataset", &[])),
            )?;
            Ok((
                data,
                CondVocab::labeled(p.k as u32),
                ModelKind::Mlp,
                vec![2],
            ))
        }
        DatasetSpec::Glyphs(p) => {
            let cfg = GlyphConfig {
                classes: p.classes,
                styles: p.styles,
                image_size: p.image_size,
            };
            let data = render_glyphs(
                &cfg,
                p.per_cell,
                p.seed
                    .unwrap_or_else(|| derive_seed(manifest_seed, "dataset", &[])),
            )?;
            Ok((
                data,
                CondVocab::composite(p.classes, p.styles),
                ModelKind::ConvNet,
                cfg.input_shape().to_vec(),
            ))
        }
        DatasetSpec::Idx(p) => {
            p.images.read_verified()?;
            p.labels.read_verified()?;
            let data = load_idx(&p.images.path, &p.labels.path)?;
            let vocab = data.infer_vocab()?;
            let input = data.examples[0].0.shape().to_vec();
            Ok((data, vocab, ModelKind::ConvNet, input))
        }
    }
}

/// Fill in the actual digest of a referenced artifact.
fn resolve_ref(r: &mut ArtifactRef) -> Result<()> {
    let (_, digest) = r.read_verified()?;
    r.sha256 = Some(digest);
    Ok(())
}

fn load_teacher(r: &ArtifactRef) -> Result<(Checkpoint, String)> {
    let (_, digest) = r.read_verified()?;
    let ckpt = load_checkpoint(&r.path)?;
    Ok((ckpt, digest))
}

fn cmd_train_teacher(m: &TrainTeacherManifest) -> Result<(RunManifest, Vec<PathBuf>)> {
    let mut resolved = m.clone();
    if let DatasetSpec::Idx(p) = &mut resolved.dataset {
        resolve_ref(&mut p.images)?;
        resolve_ref(&mut p.labels)?;
    }
    if let Some(seed) = resolved.dataset.seed_mut() {
        seed.get_or_insert_with(|| derive_seed(m.seed, "dataset", &[]));
    }
    let resolved = RunManifest::TrainTeacher(resolved);
    let digest = manifest_digest(&resolved)?;

    let (dataset, vocab, kind, input) = build_dataset(&m.dataset, m.seed)?;
    let spec = m.model.to_spec(kind, input, vocab);
    let sched = m.schedule.build()?;
    let cfg = TeacherTrainConfig {
        iters: m.train.iters,
        batch: m.train.batch,
        opt: m.train.adamw(),
        null_prob: m.train.null_prob,
        seed: derive_seed(m.seed, "teacher", &[]),
        snapshot_every: m.train.snapshot_every,
        lr_final: m.train.lr_final,
    };
    let (model, history) = train_teacher(&dataset, spec, &cfg, &sched)
        .context("train-teacher: training phase")?;

    let ckpt_path = m.out_dir.join("teacher.rckd");
    save_checkpoint(
        &model,
        &m.schedule,
        &CheckpointMeta {
            role: "teacher".into(),
            iterations: m.train.iters,
            manifest_sha256: digest,
            teacher_sha256: None,
        },
        &ckpt_path,
    )?;
    let hist_path = m.out_dir.join("history.json");
    write_json(&hist_path, &history)?;
    Ok((resolved, vec![ckpt_path, hist_path]))
}

fn cmd_gen_cache(m: &GenCacheManifest) -> Result<(RunManifest, Vec<PathBuf>)> {
    let (ckpt, teacher_digest) = load_teacher(&m.teacher)?;
    let mut resolved = m.clone();
    resolved.teacher.sha256 = Some(teacher_digest.clone());
    let resolved = RunManifest::GenCache(resolved);

    let sched = ckpt.schedule.build()?;
    let conditions = m.conditions.select(&ckpt.model.spec.vocab)?;
    let mut pairs = Vec::with_capacity(conditions.len() * m.seeds_per_condition);
    for (ci, &c) in conditions.iter().enumerate() {
        for si in 0..m.seeds_per_condition {
            pairs.push((c, derive_seed(m.seed, "cache", &[ci as u64, si as u64])));
        }
    }
    let sampler = m.sampler.to_config();
    let cache = GenerationCache::generate(&ckpt.model, &teacher_digest, &pairs, &sampler, &sched)
        .context("gen-cache: sampling phase")?;
    let cache_path = m.out_dir.join("cache.rcc");
    cache.write(&cache_path)?;
    Ok((resolved, vec![cache_path]))
}

fn student_spec(teacher: &DenoiserSpec, params: &StudentSpecParams) -> DenoiserSpec {
    match params {
        StudentSpecParams::DepthPruned { depth } => DenoiserSpec {
            depth: *depth,
            taps: (0..*depth).collect(),
            ..teacher.clone()
        },
        StudentSpecParams::Channel { width, depth } => DenoiserSpec {
            width: *width,
            depth: *depth,
            taps: (0..*depth).collect(),
            ..teacher.clone()
        },
    }
}

fn cmd_distill(m: &DistillManifest) -> Result<(RunManifest, Vec<PathBuf>)> {
    let (ckpt, teacher_digest) = load_teacher(&m.teacher)?;
    let sched = ckpt.schedule.build()?;

    let mut resolved = m.clone();
    resolved.teacher.sha256 = Some(teacher_digest.clone());

    let cache_storage;
    let dataset_storage;
    let source = match &m.source {
        DistillSourceSpec::Cache { cache, spot_check } => {
            let (_, cache_digest) = cache.read_verified()?;
            cache_storage = GenerationCache::read(&cache.path)?;
            if cache_storage.teacher_digest != teacher_digest {
                bail!(
                    "cache {:?} was generated by teacher {} but distillation uses teacher {}",
                    cache.path,
                    cache_storage.teacher_digest,
                    teacher_digest
                );
            }
            if *spot_check > 0.0 {
                cache_storage
                    .spot_check(&ckpt.model, &sched, *spot_check)
                    .context("distill: cache spot check")?;
            }
            if let DistillSourceSpec::Cache { cache, .. } = &mut resolved.source {
                cache.sha256 = Some(cache_digest);
            }
            DistillSource::Cache(&cache_storage)
        }
        DistillSourceSpec::Dataset { dataset } => {
            if let DistillSourceSpec::Dataset { dataset } = &mut resolved.source {
                if let Some(seed) = dataset.seed_mut() {
                    seed.get_or_insert_with(|| derive_seed(m.seed, "dataset", &[]));
                }
                if let DatasetSpec::Idx(p) = dataset {
                    resolve_ref(&mut p.images)?;
                    resolve_ref(&mut p.labels)?;
                }
            }
            let (data, vocab, _, _) = build_dataset(dataset, m.seed)?;
            if vocab != ckpt.model.spec.vocab {
                bail!(
                    "source dataset vocabulary {vocab:?} differs from the teacher's {:?}",
                    ckpt.model.spec.vocab
                );
            }
            dataset_storage = data;
            DistillSource::Paired(&dataset_storage)
        }
    };
    let resolved = RunManifest::Distill(resolved);
    let digest = manifest_digest(&resolved)?;

    let sspec = student_spec(&ckpt.model.spec, &m.student);
    let pool = ConditionPool::new(m.pool.select(&ckpt.model.spec.vocab)?);
    let cfg = DistillConfig {
        w_out: m.w_out,
        w_feat: m.w_feat,
        null_prob: m.train.null_prob,
        batch: m.train.batch,
        iters: m.train.iters,
        opt: m.train.adamw(),
        policy: m.policy,
        seed: derive_seed(m.seed, "distill", &[]),
        use_feature_loss: m.use_feature_loss,
        snapshot_every: m.train.snapshot_every,
        lr_final: m.train.lr_final,
    };
    let (student, history) =
        run_distillation(&ckpt.model, sspec, m.init, source, pool, cfg, &sched)
            .context("distill: training phase")?;

    let ckpt_path = m.out_dir.join("student.rckd");
    save_checkpoint(
        &student,
        &ckpt.schedule,
        &CheckpointMeta {
            role: "student".into(),
            iterations: m.train.iters,
            manifest_sha256: digest,
            teacher_sha256: Some(teacher_digest),
        },
        &ckpt_path,
    )?;
    let hist_path = m.out_dir.join("history.json");
    write_json(&hist_path, &history)?;
    Ok((resolved, vec![ckpt_path, hist_path]))
}

/// Deterministic fit of clean-data features for one split.
fn clean_features(
    classifier: &Classifier,
    dataset: &PairedDataset,
    split: &[Condition],
    cap: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut feats = Vec::new();
    for (x, c) in &dataset.examples {
        if split.contains(c) {
            feats.push(classifier.penultimate(x)?);
            if feats.len() >= cap {
                break;
            }
        }
    }
    Ok(feats)
}

fn cmd_eval(m: &EvalManifest) -> Result<(RunManifest, Vec<PathBuf>)> {
    let (ckpt, model_digest) = load_teacher(&m.model)?;
    let sched = ckpt.schedule.build()?;

    let mut resolved = m.clone();
    resolved.model.sha256 = Some(model_digest);
    if let Some(seed) = resolved.dataset.seed_mut() {
        seed.get_or_insert_with(|| derive_seed(m.seed, "dataset", &[]));
    }
    if let DatasetSpec::Idx(p) = &mut resolved.dataset {
        resolve_ref(&mut p.images)?;
        resolve_ref(&mut p.labels)?;
    }
    let resolved = RunManifest::Eval(resolved);
    let digest = manifest_digest(&resolved)?;

    let (dataset, vocab, _, input) = build_dataset(&m.dataset, m.seed)?;
    if vocab != ckpt.model.spec.vocab || input != ckpt.model.spec.input {
        bail!(
            "eval dataset (vocab {vocab:?}, input {input:?}) does not match the model \
             (vocab {:?}, input {:?})",
            ckpt.model.spec.vocab,
            ckpt.model.spec.input
        );
    }
    let classifier = train_fidelity_classifier(
        &dataset,
        &m.classifier.to_config(),
        derive_seed(m.seed, "classifier", &[]),
    )
    .context("eval: classifier phase")?;

    let conditions = vocab.all_conditions();
    let sampler = m.sampler.to_config();
    let (per_condition, samples) = condition_fidelity_with_samples(
        &ckpt.model,
        &conditions,
        m.n_per_condition,
        &classifier,
        &sampler,
        &sched,
        derive_seed(m.seed, "fidelity", &[]),
    )
    .context("eval: sampling phase")?;

    let unseen: Vec<Condition> = conditions
        .iter()
        .copied()
        .filter(|c| c.class().map(|cl| m.unseen_classes.contains(&cl)).unwrap_or(false))
        .collect();
    let seen: Vec<Condition> = conditions
        .iter()
        .copied()
        .filter(|c| !unseen.contains(c))
        .collect();

    // Feature-space Fréchet per split: generated vs clean, when both sides
    // clear the sample floor.
    let mut frechet_entries = Vec::new();
    for (label, split) in [("seen", &seen), ("unseen", &unseen), ("all", &conditions)] {
        if split.is_empty() {
            continue;
        }
        let mut gen_feats = Vec::new();
        for (ci, cond) in conditions.iter().enumerate() {
            if split.contains(cond) {
                for img in &samples[ci] {
                    gen_feats.push(classifier.penultimate(img)?);
                }
            }
        }
        let clean = clean_features(&classifier, &dataset, split, m.frechet_reference)?;
        let floor = 2 * classifier.penult_dim();
        if gen_feats.len() >= floor && clean.len() >= floor {
            frechet_entries.push(FrechetEntry {
                label: label.to_string(),
                value: feature_frechet(&gen_feats, &clean)?,
                n_a: gen_feats.len(),
                n_b: clean.len(),
            });
        }
    }

    let report = EvalReport::build(per_condition, seen, unseen, frechet_entries, digest)?;
    let report_path = m.out_dir.join("report.json");
    write_json(&report_path, &report)?;
    let csv_path = m.out_dir.join("report.csv");
    std::fs::write(&csv_path, report.to_csv())?;

    let mut artifacts = vec![report_path, csv_path];
    if m.sheet_per_condition > 0 && !samples.is_empty() {
        let per = m.sheet_per_condition.min(m.n_per_condition);
        let tiles: Vec<Tensor<f32>> = samples
            .iter()
            .flat_map(|imgs| imgs.iter().take(per).cloned())
            .collect();
        if !tiles.is_empty() && tiles[0].shape().len() == 3 {
            let cols = (vocab.styles as usize) * per;
            let rows = vocab.classes as usize;
            let sheet_path = m.out_dir.join("samples.pgm");
            emit_sample_sheet(&tiles, cols, rows, &sheet_path)?;
            artifacts.push(sheet_path);
        }
    }
    Ok((resolved, artifacts))
}

fn cmd_swap(m: &SwapExpManifest) -> Result<(RunManifest, Vec<PathBuf>)> {
    let (ckpt, model_digest) = load_teacher(&m.model)?;
    let sched = ckpt.schedule.build()?;

    let mut resolved = m.clone();
    resolved.model.sha256 = Some(model_digest);
    if let Some(seed) = resolved.dataset.seed_mut() {
        seed.get_or_insert_with(|| derive_seed(m.seed, "dataset", &[]));
    }
    let sampler = m.sampler.to_config();
    let full_grid = inference_grid(ckpt.schedule.steps, sampler.steps);
    if let Some(grid) = &mut resolved.grid {
        grid.sort_unstable();
    } else {
        resolved.grid = Some(full_grid.clone());
    }
    let grid = resolved.grid.clone().unwrap();
    let resolved = RunManifest::SwapExp(resolved);

    let (dataset, vocab, _, _) = build_dataset(&m.dataset, m.seed)?;
    if vocab != ckpt.model.spec.vocab {
        bail!("swap dataset vocabulary does not match the model");
    }
    let classifier = train_fidelity_classifier(
        &dataset,
        &m.classifier.to_config(),
        derive_seed(m.seed, "classifier", &[]),
    )?;
    let pairs = make_swap_pairs(
        &dataset,
        &vocab.all_conditions(),
        m.pairs_per_cell,
        derive_seed(m.seed, "swap.pairs", &[]),
    )?;
    let table = swap_experiment(
        &ckpt.model,
        &grid,
        &pairs,
        &classifier,
        &sampler,
        &sched,
        derive_seed(m.seed, "swap", &[]),
    )
    .context("swap-exp: sampling phase")?;

    let json_path = m.out_dir.join("swap.json");
    write_json(&json_path, &table)?;
    let mut csv = String::from("t,n,frac_source,frac_target,frac_other\n");
    for r in &table.rows {
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            r.t, r.n, r.frac_source, r.frac_target, r.frac_other
        ));
    }
    let csv_path = m.out_dir.join("swap.csv");
    std::fs::write(&csv_path, csv)?;
    Ok((resolved, vec![json_path, csv_path]))
}

fn cmd_overlap(m: &OverlapManifest) -> Result<(RunManifest, Vec<PathBuf>)> {
    let resolved = RunManifest::Overlap(m.clone());
    let spec = m
        .toy2d
        .toy2d_spec()
        .ok_or_else(|| anyhow::anyhow!("overlap requires a toy2d dataset"))?;
    let sched = m.schedule.build()?;
    let rows = rclab_core::eval::overlap_curve(&spec, m.pair[0], m.pair[1], &sched)
        .context("overlap: analytic phase")?;
    let json_path = m.out_dir.join("overlap.json");
    write_json(&json_path, &rows)?;
    let mut csv = String::from("t,alpha_bar,sym_kl,w2_sq\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{:.12},{:.12},{:.12}\n",
            r.t, r.alpha_bar, r.sym_kl, r.w2_sq
        ));
    }
    let csv_path = m.out_dir.join("overlap.csv");
    std::fs::write(&csv_path, csv)?;
    Ok((resolved, vec![json_path, csv_path]))
}

#[derive(Serialize)]
struct CombinedRow {
    label: String,
    fidelity_seen: f64,
    fidelity_unseen: f64,
    fidelity_overall: f64,
    frechet: Vec<FrechetEntry>,
}

fn cmd_report(m: &ReportManifest) -> Result<(RunManifest, Vec<PathBuf>)> {
    let mut resolved = m.clone();
    let mut rows = Vec::new();
    for runref in &mut resolved.runs {
        let (bytes, digest) = runref.report.read_verified()?;
        runref.report.sha256 = Some(digest);
        let report: EvalReport = serde_json::from_slice(&bytes)
            .with_context(|| format!("parse eval report {:?}", runref.report.path))?;
        rows.push(CombinedRow {
            label: runref.label.clone(),
            fidelity_seen: report.fidelity_seen,
            fidelity_unseen: report.fidelity_unseen,
            fidelity_overall: report.fidelity_overall,
            frechet: report.frechet.clone(),
        });
    }
    let resolved = RunManifest::Report(resolved);

    let json_path = m.out_dir.join("combined.json");
    write_json(&json_path, &rows)?;
    let mut csv = String::from("label,seen,unseen,seen_plus_unseen\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            r.label, r.fidelity_seen, r.fidelity_unseen, r.fidelity_overall
        ));
    }
    let csv_path = m.out_dir.join("combined.csv");
    std::fs::write(&csv_path, &csv)?;

    // Table-shaped stdout summary: one run per row, seen/unseen/overall.
    println!("{:<24} {:>8} {:>8} {:>14}", "run", "seen", "unseen", "seen+unseen");
    for r in &rows {
        println!(
            "{:<24} {:>8.4} {:>8.4} {:>14.4}",
            r.label, r.fidelity_seen, r.fidelity_unseen, r.fidelity_overall
        );
    }
    Ok((resolved, vec![json_path, csv_path]))
}
