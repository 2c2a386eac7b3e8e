//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value and whatever
//! context its backward rule needs. Nodes are appended in evaluation order,
//! so the tape is already topologically sorted and [`Tape::backward`] walks
//! it once, last node first.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, Padding};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running per-channel moments of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

pub enum BnMode<'a> {
    /// Normalize with batch statistics and fold them into the running
    /// moments as `decay · running + (1 − decay) · batch`.
    Train { state: &'a mut BnState, decay: f64 },
    Eval(&'a BnState),
}

/// Deliberate corruption of a backward rule, used to confirm that the
/// gradient checker notices broken derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fault {
    ScaleConvKernelGrad(f64),
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, k: Var, b: Var, geom: ConvGeom },
    TConv2d { x: Var, k: Var, b: Var, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    PRelu { x: Var, alpha: Var },
    BatchNorm { x: Var, scale: Var, shift: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Dropout { x: Var, mask: Vec<f64> },
    Concat { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mse { pred: Var, target: Var },
    WeightedSum { x: Var, weights: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Gradients of one scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn add_into(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, v)| *a += v),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Tape { nodes: Vec::new(), fault: Some(fault) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of tape node {}", self.nodes.len())));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record a constant input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Record the current value of a parameter; its gradient is routed back
    /// by [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node { value: store.value(id).clone(), op: Op::Param(id) });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, padding: Padding) -> Result<Var> {
        let geom = kernels::conv_geom_for(self.value(x), self.value(k), stride, padding)?;
        let out = kernels::conv2d_forward(self.value(x), self.value(k), self.value(b), &geom)?;
        self.push(out, Op::Conv2d { x, k, b, geom })
    }

    /// Transposed convolution: the adjoint of a same-padded `conv2d` at the
    /// same stride. The kernel is laid out `(in_ch, out_ch, kh, kw)`.
    pub fn tconv2d(&mut self, x: Var, k: Var, b: Var, stride: usize) -> Result<Var> {
        let geom = kernels::tconv_geom_for(self.value(x), self.value(k), stride)?;
        let out = kernels::tconv2d_forward(self.value(x), self.value(k), self.value(b), &geom)?;
        self.push(out, Op::TConv2d { x, k, b, geom })
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2x2_forward(self.value(x))?;
        self.push(out, Op::MaxPool { x, argmax })
    }

    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let out = kernels::prelu_forward(self.value(x), self.value(alpha))?;
        self.push(out, Op::PRelu { x, alpha })
    }

    pub fn batch_norm(&mut self, x: Var, scale: Var, shift: Var, mode: BnMode<'_>) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        for (name, v) in [("scale", scale), ("shift", shift)] {
            if self.value(v).shape() != [c] {
                return Err(Error::Shape(format!(
                    "batch-norm {name} shape {:?}, expected [{c}]",
                    self.value(v).shape()
                )));
            }
        }
        let (mean, var, train) = match mode {
            BnMode::Train { state, decay } => {
                if state.channels() != c {
                    return Err(Error::Shape(format!("batch-norm state has {} channels, input {c}", state.channels())));
                }
                let (mean, var) = kernels::channel_moments(xv)?;
                for ch in 0..c {
                    state.mean[ch] = decay * state.mean[ch] + (1.0 - decay) * mean[ch];
                    state.var[ch] = decay * state.var[ch] + (1.0 - decay) * var[ch];
                }
                (mean, var, true)
            }
            BnMode::Eval(state) => {
                if state.channels() != c {
                    return Err(Error::Shape(format!("batch-norm state has {} channels, input {c}", state.channels())));
                }
                (state.mean.clone(), state.var.clone(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let hw = h * w;
        let mut xhat = vec![0.0; n * c * hw];
        let mut out = vec![0.0; n * c * hw];
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        for (i, (src, (xh, o))) in xv
            .data()
            .chunks(hw)
            .zip(xhat.chunks_mut(hw).zip(out.chunks_mut(hw)))
            .enumerate()
        {
            let ch = i % c;
            for ((&v, xh), o) in src.iter().zip(xh.iter_mut()).zip(o.iter_mut()) {
                *xh = (v - mean[ch]) * inv_std[ch];
                *o = *xh * sc[ch] + sh[ch];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(out, Op::BatchNorm { x, scale, shift, xhat, inv_std, train })
    }

    /// Inverted dropout: survivors are scaled by `1 / keep_prob`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, keep_prob: f64, rng: &mut R) -> Result<Var> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::InvalidArgument(format!("keep probability {keep_prob} outside (0, 1]")));
        }
        if keep_prob == 1.0 {
            return Ok(x);
        }
        let scale = 1.0 / keep_prob;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < keep_prob { scale } else { 0.0 })
            .collect();
        let out = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        )?;
        self.push(out, Op::Dropout { x, mask })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat needs matching batch and spatial extents: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let hw = ha * wa;
        let mut data = Vec::with_capacity(na * (ca + cb) * hw);
        for n in 0..na {
            data.extend_from_slice(&self.value(a).data()[n * ca * hw..(n + 1) * ca * hw]);
            data.extend_from_slice(&self.value(b).data()[n * cb * hw..(n + 1) * cb * hw]);
        }
        let out = Tensor::new(vec![na, ca + cb, ha, wa], data)?;
        self.push(out, Op::Concat { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub { a, b })
    }

    /// Mean over all elements of the squared difference.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let p = self.value(pred);
        let t = self.value(target);
        p.expect_same_shape(t)?;
        let n = p.len() as f64;
        let loss = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        self.push(Tensor::scalar(loss), Op::Mse { pred, target })
    }

    /// `Σ x · weights`, a scalar probe used by gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let s = self.value(x).dot(&weights)?;
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights })
    }

    /// Hash of every discrete branch taken during the forward pass: the sign
    /// pattern at each PReLU input and the winner of each pooling window.
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::PRelu { x, .. } => {
                    for &v in self.nodes[x.0].value.data() {
                        (v.partial_cmp(&0.0)).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(dy);
                    continue;
                }
                Op::Conv2d { x, k, b, geom } => {
                    let (dx, mut dk, db) =
                        kernels::conv2d_backward(self.value(*x), self.value(*k), &dy, geom)?;
                    if let Some(Fault::ScaleConvKernelGrad(s)) = self.fault {
                        dk.data_mut().iter_mut().for_each(|v| *v *= s);
                    }
                    add_into(&mut grads[x.0], dx);
                    add_into(&mut grads[k.0], dk);
                    add_into(&mut grads[b.0], db);
                }
                Op::TConv2d { x, k, b, geom } => {
                    let (dx, dk, db) =
                        kernels::tconv2d_backward(self.value(*x), self.value(*k), &dy, geom)?;
                    add_into(&mut grads[x.0], dx);
                    add_into(&mut grads[k.0], dk);
                    add_into(&mut grads[b.0], db);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for (&src, &g) in argmax.iter().zip(dy.data()) {
                        dx.data_mut()[src] += g;
                    }
                    add_into(&mut grads[x.0], dx);
                }
                Op::PRelu { x, alpha } => {
                    let xv = self.value(*x);
                    let (_, c, h, w) = xv.dims4()?;
                    let hw = h * w;
                    let av = self.value(*alpha).data();
                    let mut dx = dy.clone();
                    let mut da = vec![0.0; c];
                    for (p, (xs, gs)) in xv.data().chunks(hw).zip(dx.data_mut().chunks_mut(hw)).enumerate() {
                        let ch = p % c;
                        for (&xi, g) in xs.iter().zip(gs.iter_mut()) {
                            if xi < 0.0 {
                                da[ch] += *g * xi;
                                *g *= av[ch];
                            }
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                    add_into(&mut grads[alpha.0], Tensor::new(vec![c], da)?);
                }
                Op::BatchNorm { x, scale, shift, xhat, inv_std, train } => {
                    let (n, c, h, w) = self.value(*x).dims4()?;
                    let hw = h * w;
                    let count = (n * hw) as f64;
                    let sc = self.value(*scale).data();
                    let mut dscale = vec![0.0; c];
                    let mut dshift = vec![0.0; c];
                    for (p, (g, xh)) in dy.data().chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                        let ch = p % c;
                        for (&gi, &xi) in g.iter().zip(xh) {
                            dshift[ch] += gi;
                            dscale[ch] += gi * xi;
                        }
                    }
                    let mut dx = vec![0.0; n * c * hw];
                    for (p, ((g, xh), d)) in dy.data().chunks(hw).zip(xhat.chunks(hw)).zip(dx.chunks_mut(hw)).enumerate() {
                        let ch = p % c;
                        let k = sc[ch] * inv_std[ch];
                        for ((&gi, &xi), di) in g.iter().zip(xh).zip(d.iter_mut()) {
                            *di = if *train {
                                k * (gi - dshift[ch] / count - xi * dscale[ch] / count)
                            } else {
                                k * gi
                            };
                        }
                    }
                    add_into(&mut grads[x.0], Tensor::new(vec![n, c, h, w], dx)?);
                    add_into(&mut grads[scale.0], Tensor::new(vec![c], dscale)?);
                    add_into(&mut grads[shift.0], Tensor::new(vec![c], dshift)?);
                }
                Op::Dropout { x, mask } => {
                    let dx = Tensor::new(dy.shape().to_vec(), dy.data().iter().zip(mask).map(|(g, m)| g * m).collect())?;
                    add_into(&mut grads[x.0], dx);
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).shape()[1];
                    let cb = self.value(*b).shape()[1];
                    add_into(&mut grads[a.0], dy.slice_channels(0, ca)?);
                    add_into(&mut grads[b.0], dy.slice_channels(ca, cb)?);
                }
                Op::Add { a, b } => {
                    add_into(&mut grads[a.0], dy.clone());
                    add_into(&mut grads[b.0], dy);
                }
                Op::Sub { a, b } => {
                    add_into(&mut grads[b.0], dy.map(|v| -v));
                    add_into(&mut grads[a.0], dy);
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred);
                    let t = self.value(*target);
                    let s = 2.0 * dy.data()[0] / p.len() as f64;
                    let dp = p.zip_map(t, |a, b| s * (a - b))?;
                    add_into(&mut grads[target.0], dp.map(|v| -v));
                    add_into(&mut grads[pred.0], dp);
                }
                Op::WeightedSum { x, weights } => {
                    let s = dy.data()[0];
                    add_into(&mut grads[x.0], weights.map(|w| w * s));
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Add the gradient of every recorded parameter node into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.grads[i].as_ref()) {
                store.accumulate_grad(*id, g)?;
            }
        }
        Ok(())
    }
}
