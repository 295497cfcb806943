//! Central finite-difference verification of the reverse-mode engine.
//!
//! The numerical oracle below recomputes every gradient element as
//! (f(θ+h) − f(θ−h)) / 2h in f64 and never touches the backward pass.

use rclab_core::numcore::{forward_and_grad, BoundParams, NodeId, ParamSet, Tape, Tensor};
use rclab_core::rng::derive_rng;

type Build = dyn Fn(&mut Tape<f64>, &BoundParams, &[NodeId]) -> rclab_core::Result<NodeId>;

const FD_STEP: f64 = 1e-5;
const MAX_REL_ERR: f64 = 1e-6;

fn loss_of(params: &ParamSet<f64>, inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let bound = tape.bind_params(params, false);
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = build(&mut tape, &bound, &ids).expect("graph build");
    tape.scalar(loss).expect("scalar loss")
}

/// Compare reverse-mode gradients against central differences for every
/// trainable parameter element. Returns the number of elements probed.
fn check_grads(params: &ParamSet<f64>, inputs: &[Tensor<f64>], build: &Build) -> usize {
    let (_, grads) = forward_and_grad(params, inputs, |t, b, i| build(t, b, i)).expect("autodiff");
    let mut probes = 0;
    let mut worst = 0.0f64;
    for (name, entry) in params.iter() {
        if !entry.trainable {
            continue;
        }
        let ad = grads.get(name).expect("gradient present");
        for i in 0..entry.tensor.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            let mut tp = entry.tensor.clone();
            tp.data_mut()[i] += FD_STEP;
            plus.set(name, tp).unwrap();
            let mut tm = entry.tensor.clone();
            tm.data_mut()[i] -= FD_STEP;
            minus.set(name, tm).unwrap();
            let fd = (loss_of(&plus, inputs, build) - loss_of(&minus, inputs, build))
                / (2.0 * FD_STEP);
            let a = ad.data()[i];
            // Near-zero gradients sit below the central-difference noise
            // floor (~1e-8 for O(100) losses); measure those absolutely.
            if (a - fd).abs() < 1e-7 {
                probes += 1;
                continue;
            }
            let rel = (a - fd).abs() / a.abs().max(fd.abs());
            if rel > worst {
                worst = rel;
            }
            assert!(rel < MAX_REL_ERR, "{name}[{i}]: ad={a} fd={fd} rel={rel}");
            probes += 1;
        }
    }
    assert!(worst < MAX_REL_ERR);
    probes
}

#[test]
fn square_of_scalar() {
    // f(x) = x^2 at x = 3: loss 9, grad 6.
    let mut params = ParamSet::new();
    params.add("x", Tensor::new(&[1], vec![3.0f64]).unwrap()).unwrap();
    let (loss, grads) = forward_and_grad(&params, &[], |tape, bound, _| {
        let x = bound.node("x")?;
        Ok(tape.sq_sum(x))
    })
    .unwrap();
    assert_eq!(loss, 9.0);
    assert_eq!(grads.get("x").unwrap().data(), &[6.0]);
}

#[test]
fn sum_has_all_ones_gradient() {
    let mut params = ParamSet::new();
    let x = Tensor::<f64>::randn(&[7], &mut derive_rng(2, "sum", &[]));
    params.add("x", x).unwrap();
    let (_, grads) = forward_and_grad(&params, &[], |tape, bound, _| {
        let x = bound.node("x")?;
        Ok(tape.sum(x))
    })
    .unwrap();
    assert_eq!(grads.get("x").unwrap().data(), &[1.0; 7]);
}

#[test]
fn two_layer_perceptron_matches_finite_differences() {
    let mut rng = derive_rng(3, "mlp", &[]);
    let mut params = ParamSet::new();
    params.add("w1", Tensor::<f64>::randn(&[6, 4], &mut rng)).unwrap();
    params.add("b1", Tensor::<f64>::randn(&[6], &mut rng)).unwrap();
    params.add("w2", Tensor::<f64>::randn(&[1, 6], &mut rng)).unwrap();
    params.add("b2", Tensor::<f64>::randn(&[1], &mut rng)).unwrap();
    let x = Tensor::<f64>::randn(&[4], &mut rng);
    let build = |tape: &mut Tape<f64>, bound: &BoundParams, inputs: &[NodeId]| {
        let h = tape.dense(inputs[0], bound.node("w1")?, Some(bound.node("b1")?))?;
        let h = tape.silu(h);
        let y = tape.dense(h, bound.node("w2")?, Some(bound.node("b2")?))?;
        Ok(tape.sq_sum(y))
    };
    let probes = check_grads(&params, &[x], &build);
    assert!(probes >= 35);
}

#[test]
fn every_layer_type_matches_finite_differences() {
    let mut rng = derive_rng(4, "layers", &[]);
    let mut params = ParamSet::new();
    params.add("conv_w", Tensor::<f64>::randn(&[3, 2, 3, 3], &mut rng)).unwrap();
    params.add("conv_b", Tensor::<f64>::randn(&[3], &mut rng)).unwrap();
    params.add("proj_w", Tensor::<f64>::randn(&[2, 3, 1, 1], &mut rng)).unwrap();
    params.add("gamma", Tensor::<f64>::randn(&[3], &mut rng)).unwrap();
    params.add("beta", Tensor::<f64>::randn(&[3], &mut rng)).unwrap();
    params.add("table", Tensor::<f64>::randn(&[5, 4], &mut rng)).unwrap();
    params.add("dense_w", Tensor::<f64>::randn(&[3, 52], &mut rng)).unwrap();
    params.add("dense_b", Tensor::<f64>::randn(&[3], &mut rng)).unwrap();
    params.add("bias_c", Tensor::<f64>::randn(&[3], &mut rng)).unwrap();
    let x = Tensor::<f64>::randn(&[2, 4, 4], &mut rng);
    let target = Tensor::<f64>::randn(&[2, 4, 4], &mut rng);

    // One graph exercising conv2d (3x3 and 1x1), group_norm, silu, relu,
    // channel_bias, embed, concat, dense, reshape, add, sub, scale, sum,
    // and sq_sum, so gradients flow through every op kind.
    let build = move |tape: &mut Tape<f64>, bound: &BoundParams, inputs: &[NodeId]| {
        let h = tape.conv2d(inputs[0], bound.node("conv_w")?, Some(bound.node("conv_b")?))?;
        let h = tape.group_norm(h, bound.node("gamma")?, bound.node("beta")?, 3)?;
        let h = tape.silu(h);
        let h = tape.channel_bias(h, bound.node("bias_c")?)?;
        let emb = tape.embed(bound.node("table")?, 2)?;
        let flat = tape.reshape(h, &[48])?;
        let relu_branch = tape.relu(flat);
        let cat = tape.concat(&[relu_branch, emb])?;
        let d = tape.dense(cat, bound.node("dense_w")?, Some(bound.node("dense_b")?))?;
        let proj = tape.conv2d(h, bound.node("proj_w")?, None)?;
        let diff = tape.sub(proj, inputs[1])?;
        let l1 = tape.sq_sum(diff);
        let l2 = tape.sq_sum(d);
        let l3 = tape.sum(emb);
        let a = tape.add(l1, l2)?;
        let b = tape.scale(l3, 0.5);
        let total = tape.add(a, b)?;
        Ok(tape.scale(total, 0.25))
    };
    let probes = check_grads(&params, &[x, target], &build);
    assert!(probes >= 100, "only {probes} probes");
}

#[test]
fn forward_is_deterministic() {
    let mut rng = derive_rng(5, "det", &[]);
    let mut params = ParamSet::new();
    params.add("w", Tensor::<f64>::randn(&[4, 4, 3, 3], &mut rng)).unwrap();
    let x = Tensor::<f64>::randn(&[4, 6, 6], &mut rng);
    let build = |tape: &mut Tape<f64>, bound: &BoundParams, inputs: &[NodeId]| {
        let h = tape.conv2d(inputs[0], bound.node("w")?, None)?;
        let h = tape.silu(h);
        Ok(tape.sq_sum(h))
    };
    let a = loss_of(&params, std::slice::from_ref(&x), &build);
    let b = loss_of(&params, std::slice::from_ref(&x), &build);
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn non_finite_loss_names_a_node() {
    let mut params = ParamSet::new();
    params.add("x", Tensor::new(&[1], vec![1e308f64]).unwrap()).unwrap();
    let err = forward_and_grad(&params, &[], |tape, bound, _| {
        let x = bound.node("x")?;
        let sq = tape.sq_sum(x); // overflows to inf
        Ok(sq)
    })
    .unwrap_err();
    match err {
        rclab_core::Error::Numeric { context, .. } => {
            assert!(context.contains("sq_sum"), "context: {context}");
        }
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn graph_shape_mismatch_is_a_construction_error() {
    let mut params = ParamSet::new();
    params.add("w", Tensor::<f64>::zeros(&[3, 5])).unwrap();
    let x = Tensor::<f64>::zeros(&[4]);
    let err = forward_and_grad(&params, &[x], |tape, bound, inputs| {
        let y = tape.dense(inputs[0], bound.node("w")?, None)?;
        Ok(tape.sq_sum(y))
    })
    .unwrap_err();
    assert!(matches!(err, rclab_core::Error::ShapeMismatch(_)));
}

mod distill_loss {
    use super::*;
    use rclab_core::distill::build_distill_loss;
    use rclab_core::models::{
        tap_pairing, CondVocab, Condition, DenoiserModel, DenoiserSpec, ProjectionHeads,
    };

    /// Total distillation loss (output matching + feature matching through
    /// projection heads) against central finite differences, f64, on a
    /// miniature conv teacher/student.
    #[test]
    fn distill_loss_gradients_match_finite_differences() {
        let vocab = CondVocab::composite(2, 2);
        let tspec = DenoiserSpec {
            cond_dim: 6,
            time_dim: 6,
            ..DenoiserSpec::conv([1, 6, 6], 8, 2, vocab)
        };
        let mut sspec = tspec.clone();
        sspec.depth = 1;
        sspec.taps = vec![0];
        let teacher = DenoiserModel::<f64>::build(tspec.clone(), 21).unwrap();
        let student = DenoiserModel::<f64>::build(sspec.clone(), 22).unwrap();
        let pairs = tap_pairing(&tspec, &sspec).unwrap();
        let heads32 = ProjectionHeads::<f32>::new(&tspec, &sspec, pairs.clone(), 23).unwrap();
        // Make head weights non-identity so their gradients are generic.
        let mut heads = heads32.cast::<f64>();
        let mut hw = heads.params.get("head0.w").unwrap().clone();
        for (i, v) in hw.data_mut().iter_mut().enumerate() {
            *v += 0.01 * (i as f64 % 7.0) - 0.02;
        }
        heads.params.set("head0.w", hw).unwrap();

        let mut rng = derive_rng(24, "x", &[]);
        let x0 = Tensor::<f64>::randn(&[1, 6, 6], &mut rng);
        let t = 3usize;
        let cond = Condition::composite(1, 0);
        let (eps_t, feats_t) = teacher.forward(&x0, t, cond).unwrap();

        let pair_idx = vec![(0usize, 0usize)];
        // Student and heads parameters merged into one set for probing.
        let mut merged = ParamSet::<f64>::new();
        for (name, e) in student.params.iter() {
            merged.add(format!("s.{name}"), e.tensor.clone()).unwrap();
        }
        for (name, e) in heads.params.iter() {
            merged.add(format!("h.{name}"), e.tensor.clone()).unwrap();
        }

        let build = move |tape: &mut Tape<f64>, bound: &BoundParams, _inputs: &[NodeId]| {
            // Rebind the merged probe values onto fresh model/head param sets.
            let mut s = student.clone();
            let mut h = heads.clone();
            for name in s.params.names().map(str::to_string).collect::<Vec<_>>() {
                let probed = tape.value(bound.node(&format!("s.{name}"))?).clone();
                s.params.set(&name, probed).unwrap();
            }
            for name in h.params.names().map(str::to_string).collect::<Vec<_>>() {
                let probed = tape.value(bound.node(&format!("h.{name}"))?).clone();
                h.params.set(&name, probed).unwrap();
            }
            // Rebuild bindings so gradients flow to the merged leaves: bind
            // by name resolution through the merged set instead.
            let sb = remap_bound(bound, "s.");
            let hb = remap_bound(bound, "h.");
            let (total, _, _) = build_distill_loss(
                tape,
                &s,
                &sb,
                &h,
                &hb,
                &pair_idx,
                (&x0, t, cond),
                &eps_t,
                &feats_t,
                1.0,
                1.0,
                true,
            )?;
            Ok(total)
        };
        let probes = check_grads(&merged, &[], &build);
        assert!(probes >= 100, "only {probes} probes");
    }

    // Expose a prefixed view of merged bindings under the original names.
    fn remap_bound(bound: &BoundParams, prefix: &str) -> BoundParams {
        bound.filtered(prefix)
    }
}
