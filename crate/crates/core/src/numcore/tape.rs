//! Tape-based reverse-mode differentiation over tensors.
//!
//! A [`Tape`] records the forward computation as a flat list of nodes;
//! [`Tape::backward`] replays it in reverse to produce exact gradients of a
//! scalar loss. The op set is deliberately small: dense, 2-D convolution
//! (stride 1, zero padding), SiLU/ReLU, group normalization, embedding
//! lookup, elementwise add/sub/scale, channel bias, concat/reshape, and
//! sum / sum-of-squares reductions.

use indexmap::IndexMap;

use super::kernels;
use super::kernels::GroupNormAux;
use super::params::{ParamGrads, ParamSet};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Dense {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Silu {
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
    },
    Embed {
        table: NodeId,
        row: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        k: f64,
    },
    ChannelBias {
        x: NodeId,
        b: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    Reshape {
        x: NodeId,
    },
    Sum {
        x: NodeId,
    },
    SqSum {
        x: NodeId,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Dense { .. } => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::Silu { .. } => "silu",
            Op::Relu { .. } => "relu",
            Op::GroupNorm { .. } => "group_norm",
            Op::Embed { .. } => "embed",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Scale { .. } => "scale",
            Op::ChannelBias { .. } => "channel_bias",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::SqSum { .. } => "sq_sum",
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
    gn_aux: Option<GroupNormAux<T>>,
}

/// Parameter leaves bound onto a tape, addressable by name.
pub struct BoundParams {
    ids: IndexMap<String, (NodeId, bool)>,
}

impl BoundParams {
    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .map(|(id, _)| *id)
            .ok_or_else(|| Error::invalid(format!("parameter {name:?} not bound on tape")))
    }

    /// View of the entries under `prefix`, addressable by the remainder of
    /// their names. Lets several parameter sets share one binding.
    pub fn filtered(&self, prefix: &str) -> BoundParams {
        BoundParams {
            ids: self
                .ids
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|rest| (rest.to_string(), *v)))
                .collect(),
        }
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct TapeGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> TapeGrads<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            gn_aux: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> Result<T> {
        self.nodes[id.0].value.item()
    }

    /// A constant input with no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that participates in differentiation.
    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Bind every parameter of a set as a leaf; trainable parameters get
    /// gradients when `with_grad` is set.
    pub fn bind_params(&mut self, set: &ParamSet<T>, with_grad: bool) -> BoundParams {
        let mut ids = IndexMap::new();
        for (name, entry) in set.iter() {
            let grad = with_grad && entry.trainable;
            let id = self.push(entry.tensor.clone(), Op::Leaf, grad);
            ids.insert(name.to_string(), (id, grad));
        }
        BoundParams { ids }
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] {
            return Err(Error::shape(format!("dense: w {ws:?} x {xs:?}")));
        }
        let (n_out, n_in) = (ws[0], ws[1]);
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs != [n_out] {
                return Err(Error::shape(format!("dense: bias {bs:?} wants [{n_out}]")));
            }
        }
        let mut y = Tensor::zeros(&[n_out]);
        kernels::dense_fwd(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            n_out,
            n_in,
            y.data_mut(),
        );
        let grad = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(y, Op::Dense { x, w, b }, grad))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::shape(format!("conv2d: w {ws:?} x {xs:?}")));
        }
        let (ic, h, wd) = (xs[0], xs[1], xs[2]);
        let (oc, k) = (ws[0], ws[2]);
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs != [oc] {
                return Err(Error::shape(format!("conv2d: bias {bs:?} wants [{oc}]")));
            }
        }
        let mut y = Tensor::zeros(&[oc, h, wd]);
        kernels::conv2d_fwd(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            ic,
            h,
            wd,
            oc,
            k,
            y.data_mut(),
        );
        let grad = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(y, Op::Conv2d { x, w, b }, grad))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let mut y = Tensor::zeros(self.value(x).shape());
        kernels::silu_fwd(self.value(x).data(), y.data_mut());
        let grad = self.needs(x);
        self.push(y, Op::Silu { x }, grad)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut y = Tensor::zeros(self.value(x).shape());
        kernels::relu_fwd(self.value(x).data(), y.data_mut());
        let grad = self.needs(x);
        self.push(y, Op::Relu { x }, grad)
    }

    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.is_empty() {
            return Err(Error::shape("group_norm: scalar input"));
        }
        let channels = xs[0];
        let spatial: usize = xs[1..].iter().product();
        if groups == 0 || channels % groups != 0 {
            return Err(Error::shape(format!(
                "group_norm: {channels} channels not divisible into {groups} groups"
            )));
        }
        if self.value(gamma).shape() != [channels] || self.value(beta).shape() != [channels] {
            return Err(Error::shape("group_norm: affine shape"));
        }
        let mut y = Tensor::zeros(&xs);
        let aux = kernels::group_norm_fwd(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            channels,
            spatial,
            groups,
            T::from_f64(1e-5),
            y.data_mut(),
        );
        let grad = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            y,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
            },
            grad,
        );
        self.nodes[id.0].gn_aux = Some(aux);
        Ok(id)
    }

    pub fn embed(&mut self, table: NodeId, row: usize) -> Result<NodeId> {
        let ts = self.value(table).shape();
        if ts.len() != 2 {
            return Err(Error::shape(format!("embed: table {ts:?}")));
        }
        if row >= ts[0] {
            return Err(Error::invalid(format!(
                "embed: row {row} out of {} rows",
                ts[0]
            )));
        }
        let width = ts[1];
        let data = self.value(table).data()[row * width..(row + 1) * width].to_vec();
        let y = Tensor::new(&[width], data)?;
        let grad = self.needs(table);
        Ok(self.push(y, Op::Embed { table, row }, grad))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).scaled_sum(T::one(), self.value(b), T::one())?;
        let grad = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Add { a, b }, grad))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.value(a).scaled_sum(T::one(), self.value(b), -T::one())?;
        let grad = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Sub { a, b }, grad))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let kt = T::from_f64(k);
        let y = self.value(x).map(|v| v * kt);
        let grad = self.needs(x);
        self.push(y, Op::Scale { x, k }, grad)
    }

    /// y[c, ...] = x[c, ...] + b[c]
    pub fn channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(b).shape();
        if xs.is_empty() || bs != [xs[0]] {
            return Err(Error::shape(format!("channel_bias: x {xs:?} b {bs:?}")));
        }
        let spatial: usize = xs[1..].iter().product();
        let mut y = self.value(x).clone();
        {
            let bias = self.value(b).data().to_vec();
            let out = y.data_mut();
            for (c, &bv) in bias.iter().enumerate() {
                for v in &mut out[c * spatial..(c + 1) * spatial] {
                    *v = *v + bv;
                }
            }
        }
        let grad = self.needs(x) || self.needs(b);
        Ok(self.push(y, Op::ChannelBias { x, b }, grad))
    }

    /// Concatenate 1-D vectors.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat: no parts"));
        }
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 1 {
                return Err(Error::shape(format!("concat: part shape {:?}", v.shape())));
            }
            data.extend_from_slice(v.data());
        }
        let y = Tensor::new(&[data.len()], data)?;
        let grad = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
            },
            grad,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let y = self.value(x).reshaped(shape)?;
        let grad = self.needs(x);
        Ok(self.push(y, Op::Reshape { x }, grad))
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        let grad = self.needs(x);
        self.push(Tensor::scalar_value(acc), Op::Sum { x }, grad)
    }

    /// Scalar sum of squared elements (the squared L2 norm).
    pub fn sq_sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc = acc + v * v;
        }
        let grad = self.needs(x);
        self.push(Tensor::scalar_value(acc), Op::SqSum { x }, grad)
    }

    /// Mean of squared elements.
    pub fn mean_sq(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len();
        let s = self.sq_sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse sweep from a scalar loss node. Returns the loss value and
    /// per-node gradients. A non-finite loss is a numeric error naming the
    /// first offending node.
    pub fn backward(&self, loss: NodeId) -> Result<(T, TapeGrads<T>)> {
        let loss_val = self.scalar(loss)?;
        if !loss_val.is_finite() {
            let culprit = self
                .nodes
                .iter()
                .enumerate()
                .find(|(_, n)| !n.value.all_finite())
                .map(|(i, n)| format!("node {} ({})", i, n.op.name()))
                .unwrap_or_else(|| "loss".to_string());
            return Err(Error::numeric(culprit, format!("non-finite loss {loss_val}")));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar_value(T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok((loss_val, TapeGrads { grads }))
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, update: impl FnOnce(&mut [T])) {
        if !self.needs(id) {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(id).shape()));
        }
        update(slot.as_mut().unwrap().data_mut());
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (xs, ws) = (self.value(*x).shape(), self.value(*w).shape());
                let (n_out, n_in) = (ws[0], ws[1]);
                let _ = xs;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.needs(*x) {
                    self.accum(grads, *x, |dx| {
                        kernels::dense_bwd(xv, wv, g.data(), n_out, n_in, Some(dx), None, None)
                    });
                }
                if self.needs(*w) {
                    self.accum(grads, *w, |dw| {
                        kernels::dense_bwd(xv, wv, g.data(), n_out, n_in, None, Some(dw), None)
                    });
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        self.accum(grads, *b, |db| {
                            kernels::dense_bwd(xv, wv, g.data(), n_out, n_in, None, None, Some(db))
                        });
                    }
                }
            }
            Op::Conv2d { x, w, b } => {
                let (xs, ws) = (self.value(*x).shape(), self.value(*w).shape());
                let (ic, h, wd) = (xs[0], xs[1], xs[2]);
                let (oc, k) = (ws[0], ws[2]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.needs(*x) {
                    self.accum(grads, *x, |dx| {
                        kernels::conv2d_bwd(
                            xv,
                            wv,
                            g.data(),
                            ic,
                            h,
                            wd,
                            oc,
                            k,
                            Some(dx),
                            None,
                            None,
                        )
                    });
                }
                if self.needs(*w) {
                    self.accum(grads, *w, |dw| {
                        kernels::conv2d_bwd(
                            xv,
                            wv,
                            g.data(),
                            ic,
                            h,
                            wd,
                            oc,
                            k,
                            None,
                            Some(dw),
                            None,
                        )
                    });
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        self.accum(grads, *b, |db| {
                            kernels::conv2d_bwd(
                                xv,
                                wv,
                                g.data(),
                                ic,
                                h,
                                wd,
                                oc,
                                k,
                                None,
                                None,
                                Some(db),
                            )
                        });
                    }
                }
            }
            Op::Silu { x } => {
                let xv = self.value(*x).data();
                self.accum(grads, *x, |dx| kernels::silu_bwd(xv, g.data(), dx));
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                self.accum(grads, *x, |dx| kernels::relu_bwd(xv, g.data(), dx));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
            } => {
                let xs = self.value(*x).shape();
                let channels = xs[0];
                let spatial: usize = xs[1..].iter().product();
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let aux = node.gn_aux.as_ref().expect("group norm aux");
                if self.needs(*x) {
                    self.accum(grads, *x, |dx| {
                        kernels::group_norm_bwd(
                            xv,
                            gv,
                            aux,
                            g.data(),
                            channels,
                            spatial,
                            *groups,
                            Some(dx),
                            None,
                            None,
                        )
                    });
                }
                if self.needs(*gamma) {
                    self.accum(grads, *gamma, |dg| {
                        kernels::group_norm_bwd(
                            xv,
                            gv,
                            aux,
                            g.data(),
                            channels,
                            spatial,
                            *groups,
                            None,
                            Some(dg),
                            None,
                        )
                    });
                }
                if self.needs(*beta) {
                    self.accum(grads, *beta, |db| {
                        kernels::group_norm_bwd(
                            xv,
                            gv,
                            aux,
                            g.data(),
                            channels,
                            spatial,
                            *groups,
                            None,
                            None,
                            Some(db),
                        )
                    });
                }
            }
            Op::Embed { table, row } => {
                let width = self.value(*table).shape()[1];
                let row = *row;
                self.accum(grads, *table, |dt| {
                    for (d, &gv) in dt[row * width..(row + 1) * width]
                        .iter_mut()
                        .zip(g.data())
                    {
                        *d = *d + gv;
                    }
                });
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g.data()) {
                        *d = *d + gv;
                    }
                });
                self.accum(grads, *b, |db| {
                    for (d, &gv) in db.iter_mut().zip(g.data()) {
                        *d = *d + gv;
                    }
                });
            }
            Op::Sub { a, b } => {
                self.accum(grads, *a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g.data()) {
                        *d = *d + gv;
                    }
                });
                self.accum(grads, *b, |db| {
                    for (d, &gv) in db.iter_mut().zip(g.data()) {
                        *d = *d - gv;
                    }
                });
            }
            Op::Scale { x, k } => {
                let kt = T::from_f64(*k);
                self.accum(grads, *x, |dx| {
                    for (d, &gv) in dx.iter_mut().zip(g.data()) {
                        *d = *d + kt * gv;
                    }
                });
            }
            Op::ChannelBias { x, b } => {
                let xs = self.value(*x).shape();
                let spatial: usize = xs[1..].iter().product();
                let channels = xs[0];
                self.accum(grads, *x, |dx| {
                    for (d, &gv) in dx.iter_mut().zip(g.data()) {
                        *d = *d + gv;
                    }
                });
                self.accum(grads, *b, |db| {
                    for c in 0..channels {
                        let mut acc = T::zero();
                        for &gv in &g.data()[c * spatial..(c + 1) * spatial] {
                            acc = acc + gv;
                        }
                        db[c] = db[c] + acc;
                    }
                });
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let seg = &g.data()[off..off + len];
                    self.accum(grads, p, |dp| {
                        for (d, &gv) in dp.iter_mut().zip(seg) {
                            *d = *d + gv;
                        }
                    });
                    off += len;
                }
            }
            Op::Reshape { x } => {
                self.accum(grads, *x, |dx| {
                    for (d, &gv) in dx.iter_mut().zip(g.data()) {
                        *d = *d + gv;
                    }
                });
            }
            Op::Sum { x } => {
                let gv = g.data()[0];
                self.accum(grads, *x, |dx| {
                    for d in dx.iter_mut() {
                        *d = *d + gv;
                    }
                });
            }
            Op::SqSum { x } => {
                let gv = g.data()[0];
                let two = T::from_f64(2.0);
                let xv = self.value(*x).data();
                self.accum(grads, *x, |dx| {
                    for (d, &v) in dx.iter_mut().zip(xv) {
                        *d = *d + two * v * gv;
                    }
                });
            }
        }
    }

    /// Collect gradients for every trainable parameter of a binding;
    /// parameters that never entered the graph get zero gradients.
    pub fn param_grads(&self, grads: &TapeGrads<T>, bound: &BoundParams) -> ParamGrads<T> {
        let mut out = ParamGrads::default();
        for (name, (id, trainable)) in &bound.ids {
            if !trainable {
                continue;
            }
            let g = grads
                .get(*id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.value(*id).shape()));
            out.by_name.insert(name.clone(), g);
        }
        out
    }
}

/// Evaluate a scalar-valued graph over a parameter set and inputs, and
/// return the loss together with exact reverse-mode gradients for every
/// trainable parameter.
pub fn forward_and_grad<T: Scalar, F>(
    params: &ParamSet<T>,
    inputs: &[Tensor<T>],
    build: F,
) -> Result<(T, ParamGrads<T>)>
where
    F: FnOnce(&mut Tape<T>, &BoundParams, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let bound = tape.bind_params(params, true);
    let input_ids: Vec<NodeId> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = build(&mut tape, &bound, &input_ids)?;
    let (loss_val, grads) = tape.backward(loss)?;
    Ok((loss_val, tape.param_grads(&grads, &bound)))
}
