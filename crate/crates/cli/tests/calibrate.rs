//! Manual calibration probes for experiment sizing (ignored by default).
//! Run with: cargo test -p rclab-cli --test calibrate -- --ignored --nocapture

use std::time::Instant;

use rclab_core::data::{exclude_conditions, render_glyphs, GenerationCache, GlyphConfig};
use rclab_core::diffusion::{NoiseSchedule, SamplerConfig};
use rclab_core::distill::{
    run_distillation, train_teacher, ConditionPool, DistillConfig, DistillSource,
    RandomConditioningPolicy, StudentInit, TeacherTrainConfig,
};
use rclab_core::eval::{condition_fidelity, train_fidelity_classifier, ClassifierConfig};
use rclab_core::models::{CondVocab, DenoiserSpec};
use rclab_core::numcore::AdamWConfig;

#[test]
#[ignore]
fn calibrate_glyph_pipeline() {
    rclab_cli::init_threads();
    let cfg = GlyphConfig {
        classes: 10,
        styles: 8,
        image_size: 16,
    };
    let vocab = CondVocab::composite(10, 8);
    let sched = NoiseSchedule::default_linear();
    let data = render_glyphs(&cfg, 24, 1).unwrap();
    println!("dataset: {} examples", data.len());

    let t0 = Instant::now();
    let clf = train_fidelity_classifier(
        &data,
        &ClassifierConfig {
            iters: 1500,
            ..ClassifierConfig::default()
        },
        7,
    )
    .unwrap();
    println!(
        "classifier: heldout {:.3} in {:.0}s",
        clf.heldout_accuracy,
        t0.elapsed().as_secs_f64()
    );

    let iters: usize = std::env::var("CAL_TEACHER_ITERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1500);
    let width: usize = std::env::var("CAL_TEACHER_WIDTH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(32);
    let depth: usize = std::env::var("CAL_TEACHER_DEPTH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(4);
    let spec = DenoiserSpec::conv(cfg.input_shape(), width, depth, vocab);
    let tcfg = TeacherTrainConfig {
        iters,
        batch: 32,
        opt: AdamWConfig {
            lr: 2e-3,
            weight_decay: 0.01,
            ..AdamWConfig::default()
        },
        null_prob: 0.1,
        seed: 3,
        snapshot_every: 250,
        lr_final: Some(1e-4),
    };
    let t1 = Instant::now();
    let (teacher, hist) = train_teacher(&data, spec, &tcfg, &sched).unwrap();
    println!(
        "teacher w{width} d{depth}: {iters} iters in {:.0}s ({:.3}s/step), loss {:?} -> {:?}",
        t1.elapsed().as_secs_f64(),
        t1.elapsed().as_secs_f64() / iters as f64,
        hist.rows.first().map(|r| r.loss.total),
        hist.rows.last().map(|r| r.loss.total)
    );

    let sampler = SamplerConfig::default();
    let t2 = Instant::now();
    let n_per = 8;
    let fid = condition_fidelity(&teacher, &vocab.all_conditions(), n_per, &clf, &sampler, &sched, 99)
        .unwrap();
    let per_class: Vec<f64> = (0..10)
        .map(|c| {
            let rows: Vec<_> = fid
                .iter()
                .filter(|r| r.condition.class() == Some(c))
                .collect();
            rows.iter().map(|r| r.matched).sum::<usize>() as f64
                / rows.iter().map(|r| r.n).sum::<usize>() as f64
        })
        .collect();
    let overall: f64 =
        fid.iter().map(|r| r.matched).sum::<usize>() as f64 / fid.iter().map(|r| r.n).sum::<usize>() as f64;
    let worst = fid
        .iter()
        .map(|r| r.accuracy())
        .fold(f64::INFINITY, f64::min);
    println!(
        "teacher fidelity: overall {overall:.3}, worst condition {worst:.3}, per-class {:?} ({:.0}s for {} samples)",
        per_class.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
        t2.elapsed().as_secs_f64(),
        fid.iter().map(|r| r.n).sum::<usize>()
    );

    if std::env::var("CAL_DISTILL").is_err() {
        return;
    }

    // --- transfer probe: cache excludes class 3, pool covers everything ---
    let teacher_digest = "cal".to_string();
    let (kept, _) = exclude_conditions(&data, |c| c.class() == Some(3)).unwrap();
    let kept_conditions = kept.distinct_conditions();
    let seeds_per = 5;
    let mut pairs = Vec::new();
    for (ci, &c) in kept_conditions.iter().enumerate() {
        for si in 0..seeds_per {
            pairs.push((c, rclab_core::rng::derive_seed(1, "calcache", &[ci as u64, si])));
        }
    }
    let t3 = Instant::now();
    let cache =
        GenerationCache::generate(&teacher, &teacher_digest, &pairs, &sampler, &sched).unwrap();
    println!(
        "cache: {} entries in {:.0}s",
        cache.entries.len(),
        t3.elapsed().as_secs_f64()
    );

    let distill_iters: usize = std::env::var("CAL_DISTILL_ITERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1200);
    let mut sspec = teacher.spec.clone();
    sspec.depth = depth / 2;
    sspec.taps = (0..sspec.depth).collect();
    let pool = ConditionPool::new(vocab.all_conditions());
    for (name, policy) in [
        ("off", RandomConditioningPolicy::Off),
        ("exp5", RandomConditioningPolicy::Exponential { lambda: 5.0 }),
    ] {
        let dcfg = DistillConfig {
            batch: 32,
            iters: distill_iters,
            opt: AdamWConfig {
                lr: 1e-3,
                weight_decay: 0.01,
                ..AdamWConfig::default()
            },
            policy,
            seed: 5,
            snapshot_every: 250,
            lr_final: Some(1e-4),
            ..DistillConfig::default()
        };
        let t4 = Instant::now();
        let (student, _) = run_distillation(
            &teacher,
            sspec.clone(),
            StudentInit::Teacher,
            DistillSource::Cache(&cache),
            pool.clone(),
            dcfg,
            &sched,
        )
        .unwrap();
        let fid =
            condition_fidelity(&student, &vocab.all_conditions(), 8, &clf, &sampler, &sched, 77)
                .unwrap();
        let class3: Vec<_> = fid
            .iter()
            .filter(|r| r.condition.class() == Some(3))
            .collect();
        let c3 = class3.iter().map(|r| r.matched).sum::<usize>() as f64
            / class3.iter().map(|r| r.n).sum::<usize>() as f64;
        let seen: Vec<_> = fid
            .iter()
            .filter(|r| r.condition.class() != Some(3))
            .collect();
        let s = seen.iter().map(|r| r.matched).sum::<usize>() as f64
            / seen.iter().map(|r| r.n).sum::<usize>() as f64;
        println!(
            "student {name}: seen {s:.3}, class-3 (unseen) {c3:.3} in {:.0}s",
            t4.elapsed().as_secs_f64()
        );
    }
}
