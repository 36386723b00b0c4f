//! Execution backends for network code.
//!
//! Blocks and networks are written once against the [`Graph`] trait. Two
//! backends implement it:
//!
//! * [`Tape`] computes values and records a reverse-mode autodiff tape.
//! * [`ShapeTracer`] only propagates shapes and records per-layer parameter
//!   and multiply-add counts, so complexity reports for 256×256 networks
//!   never touch tensor data.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{HgError, Result};
use crate::kernels::{self, BnTrainCtx};
use crate::params::{BnLayer, ConvLayer, ParamId, ParamStore, StatUpdate};
use crate::tensor::{Real, Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm uses batch statistics and emits running-stat updates.
    Train,
    /// Batch-norm uses running statistics.
    Eval,
}

pub trait Graph<T: Real> {
    type Var: Copy + fmt::Debug;

    fn shape(&self, v: Self::Var) -> Shape4;
    fn mode(&self) -> Mode;

    fn conv(&mut self, store: &ParamStore<T>, layer: &ConvLayer, x: Self::Var) -> Result<Self::Var>;
    fn batchnorm(&mut self, store: &ParamStore<T>, layer: &BnLayer, x: Self::Var) -> Result<Self::Var>;
    fn relu(&mut self, x: Self::Var) -> Self::Var;
    fn sigmoid(&mut self, x: Self::Var) -> Self::Var;
    fn add(&mut self, a: Self::Var, b: Self::Var) -> Result<Self::Var>;
    fn concat(&mut self, xs: &[Self::Var]) -> Result<Self::Var>;
    fn maxpool2x2(&mut self, x: Self::Var) -> Result<Self::Var>;
    fn upsample2x(&mut self, x: Self::Var) -> Self::Var;
    fn global_avg_pool(&mut self, x: Self::Var) -> Self::Var;
    /// Multiplies `x` (n×c×h×w) by a per-sample, per-channel `gate` (n×c×1×1).
    fn mul_broadcast(&mut self, x: Self::Var, gate: Self::Var) -> Result<Self::Var>;
    /// `out[:, o] = x[:, perm[o]]`.
    fn gather_channels(&mut self, x: Self::Var, perm: &[usize]) -> Result<Self::Var>;
    fn permute_axes(&mut self, x: Self::Var, axes: [usize; 4]) -> Result<Self::Var>;
    fn reshape(&mut self, x: Self::Var, shape: Shape4) -> Result<Self::Var>;

    fn bn_relu(&mut self, store: &ParamStore<T>, bn: &BnLayer, x: Self::Var) -> Result<Self::Var> {
        let y = self.batchnorm(store, bn, x)?;
        Ok(self.relu(y))
    }

    /// Interleaves channel groups; see [`kernels::shuffle_permutation`].
    fn channel_shuffle(&mut self, x: Self::Var, groups: usize) -> Result<Self::Var> {
        let perm = kernels::shuffle_permutation(self.shape(x).c, groups)?;
        self.gather_channels(x, &perm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

type BackwardFn<T> = Box<dyn Fn(&[&Tensor4<T>], &Tensor4<T>, &[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    value: Tensor4<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Reverse-mode autodiff tape.
///
/// Nodes are appended in execution order, so every node's parents precede
/// it. [`Tape::backward`] walks the nodes in exact reverse order and
/// accumulates gradients additively into shared parents.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    param_vars: BTreeMap<ParamId, Var>,
    stat_updates: Vec<StatUpdate<T>>,
    kinks: u64,
    grads: Option<Vec<Option<Vec<T>>>>,
}

#[inline]
fn mix(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x0100_0000_01b3).rotate_left(5)
}

fn same_shape(a: Shape4, b: Shape4, op: &str) -> Result<()> {
    if a != b {
        return Err(HgError::config(format!("{op}: shape mismatch {a} vs {b}")));
    }
    Ok(())
}

fn concat_shape(shapes: &[Shape4]) -> Result<Shape4> {
    let first = *shapes
        .first()
        .ok_or_else(|| HgError::config("concat of an empty list"))?;
    let mut c = 0;
    for s in shapes {
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(HgError::config(format!(
                "concat: batch/spatial mismatch {s} vs {first}"
            )));
        }
        c += s.c;
    }
    Ok(Shape4::new(first.n, c, first.h, first.w))
}

fn gate_check(x: Shape4, g: Shape4) -> Result<()> {
    if g != Shape4::new(x.n, x.c, 1, 1) {
        return Err(HgError::config(format!(
            "gate shape {g} does not broadcast over {x}"
        )));
    }
    Ok(())
}

fn check_perm(c: usize, perm: &[usize]) -> Result<()> {
    if perm.iter().any(|p| *p >= c) {
        return Err(HgError::config(format!(
            "channel permutation index out of range for {c} channels"
        )));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            param_vars: BTreeMap::new(),
            stat_updates: Vec::new(),
            kinks: 0xcbf2_9ce4_8422_2325,
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4<T>, parents: Vec<usize>, backward: Option<BackwardFn<T>>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[*p].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: if requires_grad { backward } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor4<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a data tensor. Gradients are tracked when `requires_grad` is set.
    pub fn input(&mut self, t: Tensor4<T>, requires_grad: bool) -> Var {
        self.leaf(t, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor4<T>) -> Var {
        self.leaf(t, false)
    }

    /// Leaf for a stored parameter; repeated requests share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let t = store.tensor(id).clone();
        let rg = t.requires_grad;
        let v = self.leaf(t, rg);
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    /// Copy of `x` with no gradient connection.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.nodes[x.0].value.clone();
        self.constant(t)
    }

    /// Hash of every discrete branch decision taken so far (ReLU masks and
    /// max-pool winners). Two forward passes with equal signatures took the
    /// same piecewise-linear branch.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    pub fn stat_updates(&self) -> &[StatUpdate<T>] {
        &self.stat_updates
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Mean of squared differences, a 1×1×1×1 scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        same_shape(sa, sb, "mse")?;
        let n = T::of(sa.numel() as f64);
        let mut acc = T::zero();
        for (x, y) in self.value(a).data().iter().zip(self.value(b).data()) {
            let d = *x - *y;
            acc += d * d;
        }
        let out = Tensor4::scalar(acc / n);
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |p, _o, g, need| {
                let k = T::of(2.0) * g[0] / n;
                let diff: Vec<T> = p[0].data().iter().zip(p[1].data()).map(|(x, y)| k * (*x - *y)).collect();
                let gb = need[1].then(|| diff.iter().map(|d| -*d).collect());
                vec![need[0].then_some(diff), gb]
            })),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let total = self.value(x).data().iter().fold(T::zero(), |a, b| a + *b);
        self.push(
            Tensor4::scalar(total),
            vec![x.0],
            Some(Box::new(move |_p, _o, g, _need| vec![Some(vec![g[0]; s.numel()])])),
        )
    }

    /// Σ x ⊙ w with a constant weight tensor.
    pub fn dot_const(&mut self, x: Var, weights: &Tensor4<T>) -> Result<Var> {
        same_shape(self.shape(x), weights.shape(), "dot")?;
        let total: T = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |acc, (a, b)| acc + *a * *b);
        let w = weights.data().to_vec();
        Ok(self.push(
            Tensor4::scalar(total),
            vec![x.0],
            Some(Box::new(move |_p, _o, g, _need| {
                vec![Some(w.iter().map(|v| *v * g[0]).collect())]
            })),
        ))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = Tensor4::from_vec(
            self.shape(x),
            self.value(x).data().iter().map(|v| *v * c).collect(),
        )
        .expect("same size");
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |_p, _o, g, _need| {
                vec![Some(g.iter().map(|v| *v * c).collect())]
            })),
        )
    }

    /// Runs reverse accumulation from a scalar `loss`. A tape can be
    /// differentiated once; call [`Tape::reset_grads`] to allow another pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(HgError::usage(
                "backward already ran on this tape; reset gradients first",
            ));
        }
        let ls = self.shape(loss);
        if ls != Shape4::scalar() {
            return Err(HgError::usage(format!(
                "backward needs a scalar loss, got shape {ls}"
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(bw) = node.backward.as_ref() {
                let parents: Vec<&Tensor4<T>> =
                    node.parents.iter().map(|p| &self.nodes[*p].value).collect();
                let need: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|p| self.nodes[*p].requires_grad)
                    .collect();
                let pg = bw(&parents, &node.value, &g, &need);
                for (k, pgrad) in pg.into_iter().enumerate() {
                    let Some(pgrad) = pgrad else { continue };
                    if !need[k] {
                        continue;
                    }
                    let pid = node.parents[k];
                    match grads[pid].as_mut() {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&pgrad) {
                                *a += *b;
                            }
                        }
                        None => grads[pid] = Some(pgrad),
                    }
                }
            }
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.as_ref()?.get(v.0)?.as_deref()
    }

    /// Gradient for every parameter leaf on the tape. Parameters that never
    /// reached the loss get zeros.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<T>)> {
        self.param_vars
            .iter()
            .map(|(id, v)| {
                let g = self
                    .grad(*v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); self.value(*v).numel()]);
                (*id, g)
            })
            .collect()
    }

    /// Writes parameter gradients into the store's tensors, adding to any
    /// gradient already present. Trainable parameters absent from the tape
    /// receive zeros.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        let grads: BTreeMap<ParamId, Vec<T>> = self.param_grads().into_iter().collect();
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        for id in ids {
            let t = store.tensor_mut(id);
            let n = t.numel();
            let mut g = t.take_grad().unwrap_or_else(|| vec![T::zero(); n]);
            if let Some(add) = grads.get(&id) {
                for (a, b) in g.iter_mut().zip(add) {
                    *a += *b;
                }
            }
            t.set_grad(g).expect("gradient length matches parameter");
        }
    }
}

impl<T: Real> Graph<T> for Tape<T> {
    type Var = Var;

    fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].value.shape()
    }

    fn mode(&self) -> Mode {
        self.mode
    }

    fn conv(&mut self, store: &ParamStore<T>, layer: &ConvLayer, x: Var) -> Result<Var> {
        let w = self.param(store, layer.weight);
        let b = layer.bias.map(|b| self.param(store, b));
        let spec = layer.spec;
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b).data()),
            &spec,
        )
        .map_err(|e| HgError::config(format!("{}: {e}", layer.name)))?;
        let mut parents = vec![x.0, w.0];
        if let Some(b) = b {
            parents.push(b.0);
        }
        Ok(self.push(
            out,
            parents,
            Some(Box::new(move |p, _o, g, need| {
                let grads = kernels::conv2d_backward(
                    p[0],
                    p[1],
                    g,
                    &spec,
                    [need[0], need[1], need.get(2).copied().unwrap_or(false)],
                );
                let mut v = vec![grads.input, grads.weight];
                if p.len() > 2 {
                    v.push(grads.bias);
                }
                v
            })),
        ))
    }

    fn batchnorm(&mut self, store: &ParamStore<T>, layer: &BnLayer, x: Var) -> Result<Var> {
        let gamma = self.param(store, layer.gamma);
        let beta = self.param(store, layer.beta);
        let s = self.shape(x);
        if s.c != layer.channels {
            return Err(HgError::config(format!(
                "{}: expects {} channels, input has {}",
                layer.name, layer.channels, s.c
            )));
        }
        match self.mode {
            Mode::Train => {
                let (out, ctx) = kernels::batchnorm_train_forward(
                    self.value(x),
                    self.value(gamma).data(),
                    self.value(beta).data(),
                )?;
                let m = s.n * s.plane();
                let unbias = if m > 1 {
                    T::of(m as f64 / (m as f64 - 1.0))
                } else {
                    T::one()
                };
                self.stat_updates.push(StatUpdate {
                    running_mean: layer.running_mean,
                    running_var: layer.running_var,
                    batch_mean: ctx.mean.clone(),
                    batch_var: ctx.var.iter().map(|v| *v * unbias).collect(),
                });
                let ctx: BnTrainCtx<T> = ctx;
                Ok(self.push(
                    out,
                    vec![x.0, gamma.0, beta.0],
                    Some(Box::new(move |p, _o, g, need| {
                        let (gi, gg, gb) =
                            kernels::batchnorm_train_backward(s, &ctx, p[1].data(), g);
                        vec![
                            need[0].then_some(gi),
                            need[1].then_some(gg),
                            need[2].then_some(gb),
                        ]
                    })),
                ))
            }
            Mode::Eval => {
                let rm = store.tensor(layer.running_mean).data().to_vec();
                let rv = store.tensor(layer.running_var).data().to_vec();
                let out = kernels::batchnorm_eval_forward(
                    self.value(x),
                    self.value(gamma).data(),
                    self.value(beta).data(),
                    &rm,
                    &rv,
                )?;
                let eps = T::of(kernels::BN_EPS);
                let inv: Vec<T> = rv.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
                Ok(self.push(
                    out,
                    vec![x.0, gamma.0, beta.0],
                    Some(Box::new(move |p, _o, g, need| {
                        let xs = p[0].data();
                        let gam = p[1].data();
                        let pl = s.plane();
                        let mut gi = vec![T::zero(); xs.len()];
                        let mut gg = vec![T::zero(); s.c];
                        let mut gb = vec![T::zero(); s.c];
                        for n in 0..s.n {
                            for c in 0..s.c {
                                let base = (n * s.c + c) * pl;
                                for i in base..base + pl {
                                    gi[i] = g[i] * gam[c] * inv[c];
                                    gg[c] += g[i] * (xs[i] - rm[c]) * inv[c];
                                    gb[c] += g[i];
                                }
                            }
                        }
                        vec![
                            need[0].then_some(gi),
                            need[1].then_some(gg),
                            need[2].then_some(gb),
                        ]
                    })),
                ))
            }
        }
    }

    fn relu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut h = self.kinks;
        let mut word = 0u64;
        let data: Vec<T> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let on = *v > T::zero();
                word = (word << 1) | on as u64;
                if i % 64 == 63 {
                    h = mix(h, word);
                    word = 0;
                }
                if on {
                    *v
                } else {
                    T::zero()
                }
            })
            .collect();
        let out = Tensor4::from_vec(xv.shape(), data).expect("same size");
        self.kinks = mix(h, word);
        self.push(
            out,
            vec![x.0],
            Some(Box::new(|p, _o, g, _need| {
                vec![Some(
                    p[0].data()
                        .iter()
                        .zip(g)
                        .map(|(x, g)| if *x > T::zero() { *g } else { T::zero() })
                        .collect(),
                )]
            })),
        )
    }

    fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|v| T::one() / (T::one() + (-*v).exp()))
            .collect();
        let out = Tensor4::from_vec(xv.shape(), data).expect("same size");
        self.push(
            out,
            vec![x.0],
            Some(Box::new(|_p, o, g, _need| {
                vec![Some(
                    o.data()
                        .iter()
                        .zip(g)
                        .map(|(y, g)| *g * *y * (T::one() - *y))
                        .collect(),
                )]
            })),
        )
    }

    fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let out = Tensor4::from_vec(self.shape(a), data)?;
        Ok(self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(|_p, _o, g, need| {
                vec![need[0].then(|| g.to_vec()), need[1].then(|| g.to_vec())]
            })),
        ))
    }

    fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let shapes: Vec<Shape4> = xs.iter().map(|v| self.shape(*v)).collect();
        let os = concat_shape(&shapes)?;
        let p = os.plane();
        let mut data = Vec::with_capacity(os.numel());
        for n in 0..os.n {
            for (v, s) in xs.iter().zip(&shapes) {
                let len = s.c * p;
                data.extend_from_slice(&self.value(*v).data()[n * len..(n + 1) * len]);
            }
        }
        let out = Tensor4::from_vec(os, data)?;
        let chans: Vec<usize> = shapes.iter().map(|s| s.c).collect();
        Ok(self.push(
            out,
            xs.iter().map(|v| v.0).collect(),
            Some(Box::new(move |_p, _o, g, need| {
                let mut grads: Vec<Option<Vec<T>>> = chans
                    .iter()
                    .zip(need)
                    .map(|(c, nd)| nd.then(|| Vec::with_capacity(os.n * c * p)))
                    .collect();
                for n in 0..os.n {
                    let mut off = (n * os.c) * p;
                    for (k, c) in chans.iter().enumerate() {
                        if let Some(gk) = grads[k].as_mut() {
                            gk.extend_from_slice(&g[off..off + c * p]);
                        }
                        off += c * p;
                    }
                }
                grads
            })),
        ))
    }

    fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let (out, arg) = kernels::maxpool2x2_forward(self.value(x))?;
        let mut h = self.kinks;
        for chunk in arg.chunks(32) {
            let word = chunk.iter().fold(0u64, |acc, a| (acc << 2) | *a as u64);
            h = mix(h, word);
        }
        self.kinks = h;
        Ok(self.push(
            out,
            vec![x.0],
            Some(Box::new(move |_p, _o, g, _need| {
                vec![Some(kernels::maxpool2x2_backward(s, &arg, g))]
            })),
        ))
    }

    fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let out = kernels::upsample2x_forward(self.value(x));
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |_p, _o, g, _need| {
                vec![Some(kernels::upsample2x_backward(s, g))]
            })),
        )
    }

    fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let p = s.plane();
        let inv = T::one() / T::of(p as f64);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(p)
            .map(|c| c.iter().fold(T::zero(), |a, b| a + *b) * inv)
            .collect();
        let out = Tensor4::from_vec(Shape4::new(s.n, s.c, 1, 1), data).expect("n*c values");
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |_p, _o, g, _need| {
                let mut gi = Vec::with_capacity(s.numel());
                for v in g {
                    gi.extend(std::iter::repeat_n(*v * inv, p));
                }
                vec![Some(gi)]
            })),
        )
    }

    fn mul_broadcast(&mut self, x: Var, gate: Var) -> Result<Var> {
        let s = self.shape(x);
        gate_check(s, self.shape(gate))?;
        let p = s.plane();
        let gv = self.value(gate).data();
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(p)
            .zip(gv)
            .flat_map(|(c, k)| c.iter().map(move |v| *v * *k))
            .collect();
        let out = Tensor4::from_vec(s, data)?;
        Ok(self.push(
            out,
            vec![x.0, gate.0],
            Some(Box::new(move |pv, _o, g, need| {
                let xs = pv[0].data();
                let gs = pv[1].data();
                let gx = need[0].then(|| {
                    g.chunks(p)
                        .zip(gs)
                        .flat_map(|(c, k)| c.iter().map(move |v| *v * *k))
                        .collect()
                });
                let gg = need[1].then(|| {
                    g.chunks(p)
                        .zip(xs.chunks(p))
                        .map(|(gc, xc)| gc.iter().zip(xc).fold(T::zero(), |acc, (a, b)| acc + *a * *b))
                        .collect()
                });
                vec![gx, gg]
            })),
        ))
    }

    fn gather_channels(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        check_perm(s.c, perm)?;
        let out = kernels::gather_channels(self.value(x), perm);
        let perm = perm.to_vec();
        Ok(self.push(
            out,
            vec![x.0],
            Some(Box::new(move |_p, _o, g, _need| {
                vec![Some(kernels::scatter_channels(s, &perm, g))]
            })),
        ))
    }

    fn permute_axes(&mut self, x: Var, axes: [usize; 4]) -> Result<Var> {
        let out = kernels::permute_axes(self.value(x), axes)?;
        let inv = kernels::inverse_axes(axes);
        let os = out.shape();
        Ok(self.push(
            out,
            vec![x.0],
            Some(Box::new(move |_p, _o, g, _need| {
                let gt = Tensor4::from_vec(os, g.to_vec()).expect("grad matches output");
                vec![Some(
                    kernels::permute_axes(&gt, inv)
                        .expect("inverse of a valid permutation")
                        .into_data(),
                )]
            })),
        ))
    }

    fn reshape(&mut self, x: Var, shape: Shape4) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(
            out,
            vec![x.0],
            Some(Box::new(|_p, _o, g, _need| vec![Some(g.to_vec())])),
        ))
    }
}

/// Cost of one parameterized layer for a single image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub madds: u64,
    pub output: Shape4,
}

/// Shape-only backend that records per-layer parameter and MAdd counts.
///
/// MAdds count one multiply-accumulate per kernel tap of a convolution,
/// per output element, for the traced batch; trace with `n = 1` to get
/// per-image costs. Normalization, activations, pooling,
/// upsampling and elementwise adds cost nothing.
#[derive(Debug, Default)]
pub struct ShapeTracer {
    shapes: Vec<Shape4>,
    rows: Vec<LayerCost>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapeVar(usize);

impl ShapeTracer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, shape: Shape4) -> Result<ShapeVar> {
        shape.validate()?;
        Ok(self.push(shape))
    }

    fn push(&mut self, s: Shape4) -> ShapeVar {
        self.shapes.push(s);
        ShapeVar(self.shapes.len() - 1)
    }

    pub fn rows(&self) -> &[LayerCost] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<LayerCost> {
        self.rows
    }
}

impl<T: Real> Graph<T> for ShapeTracer {
    type Var = ShapeVar;

    fn shape(&self, v: ShapeVar) -> Shape4 {
        self.shapes[v.0]
    }

    fn mode(&self) -> Mode {
        Mode::Eval
    }

    fn conv(&mut self, store: &ParamStore<T>, layer: &ConvLayer, x: ShapeVar) -> Result<ShapeVar> {
        let is = self.shapes[x.0];
        let os = layer
            .spec
            .output_shape(is)
            .map_err(|e| HgError::config(format!("{}: {e}", layer.name)))?;
        let params = layer
            .param_ids()
            .iter()
            .map(|id| store.tensor(*id).numel() as u64)
            .sum();
        // Folded batches (DiCE slices) carry spatial positions in `n`.
        let madds = layer.spec.madds(is)? * is.n as u64;
        self.rows.push(LayerCost {
            name: layer.name.clone(),
            params,
            madds,
            output: os,
        });
        Ok(self.push(os))
    }

    fn batchnorm(&mut self, store: &ParamStore<T>, layer: &BnLayer, x: ShapeVar) -> Result<ShapeVar> {
        let s = self.shapes[x.0];
        if s.c != layer.channels {
            return Err(HgError::config(format!(
                "{}: expects {} channels, input has {}",
                layer.name, layer.channels, s.c
            )));
        }
        let params = layer
            .param_ids()
            .iter()
            .map(|id| store.tensor(*id).numel() as u64)
            .sum();
        self.rows.push(LayerCost {
            name: layer.name.clone(),
            params,
            madds: 0,
            output: s,
        });
        Ok(self.push(s))
    }

    fn relu(&mut self, x: ShapeVar) -> ShapeVar {
        x
    }

    fn sigmoid(&mut self, x: ShapeVar) -> ShapeVar {
        x
    }

    fn add(&mut self, a: ShapeVar, b: ShapeVar) -> Result<ShapeVar> {
        same_shape(self.shapes[a.0], self.shapes[b.0], "add")?;
        Ok(a)
    }

    fn concat(&mut self, xs: &[ShapeVar]) -> Result<ShapeVar> {
        let shapes: Vec<Shape4> = xs.iter().map(|v| self.shapes[v.0]).collect();
        let s = concat_shape(&shapes)?;
        Ok(self.push(s))
    }

    fn maxpool2x2(&mut self, x: ShapeVar) -> Result<ShapeVar> {
        let s = self.shapes[x.0];
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(HgError::config(format!(
                "max-pool needs even spatial dims, got {}x{}",
                s.h, s.w
            )));
        }
        Ok(self.push(Shape4::new(s.n, s.c, s.h / 2, s.w / 2)))
    }

    fn upsample2x(&mut self, x: ShapeVar) -> ShapeVar {
        let s = self.shapes[x.0];
        self.push(Shape4::new(s.n, s.c, s.h * 2, s.w * 2))
    }

    fn global_avg_pool(&mut self, x: ShapeVar) -> ShapeVar {
        let s = self.shapes[x.0];
        self.push(Shape4::new(s.n, s.c, 1, 1))
    }

    fn mul_broadcast(&mut self, x: ShapeVar, gate: ShapeVar) -> Result<ShapeVar> {
        gate_check(self.shapes[x.0], self.shapes[gate.0])?;
        Ok(x)
    }

    fn gather_channels(&mut self, x: ShapeVar, perm: &[usize]) -> Result<ShapeVar> {
        let s = self.shapes[x.0];
        check_perm(s.c, perm)?;
        Ok(self.push(Shape4::new(s.n, perm.len(), s.h, s.w)))
    }

    fn permute_axes(&mut self, x: ShapeVar, axes: [usize; 4]) -> Result<ShapeVar> {
        let d = self.shapes[x.0].dims();
        let mut seen = [false; 4];
        for &a in &axes {
            if a > 3 || seen[a] {
                return Err(HgError::config(format!("invalid axis permutation {axes:?}")));
            }
            seen[a] = true;
        }
        Ok(self.push(Shape4::from_dims([d[axes[0]], d[axes[1]], d[axes[2]], d[axes[3]]])))
    }

    fn reshape(&mut self, x: ShapeVar, shape: Shape4) -> Result<ShapeVar> {
        let s = self.shapes[x.0];
        if s.numel() != shape.numel() {
            return Err(HgError::config(format!("cannot reshape {s} into {shape}")));
        }
        Ok(self.push(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: Shape4, seed: u64) -> Tensor4<f64> {
        let mut s = seed;
        Tensor4::from_fn(shape, |_, _, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f64>::new(Mode::Train);
        let x = tape.input(tensor(Shape4::new(2, 3, 4, 5), 1), true);
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|g| *g == 1.0));
    }

    #[test]
    fn mse_at_target_has_zero_grad() {
        let mut tape = Tape::<f64>::new(Mode::Train);
        let x = tape.input(tensor(Shape4::new(1, 2, 3, 3), 2), true);
        let c = tape.detach(x);
        let l = tape.mse(x, c).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::<f64>::new(Mode::Train);
        let x = tape.input(tensor(Shape4::new(1, 1, 2, 2), 3), true);
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(HgError::Usage(_))));
        tape.reset_grads();
        tape.backward(l).unwrap();
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new(Mode::Train);
        let x = tape.input(tensor(Shape4::new(1, 1, 2, 2), 3), true);
        assert!(matches!(tape.backward(x), Err(HgError::Usage(_))));
    }

    #[test]
    fn shared_parent_accumulates() {
        let mut tape = Tape::<f64>::new(Mode::Train);
        let x = tape.input(tensor(Shape4::new(1, 1, 2, 2), 4), true);
        let y = tape.add(x, x).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|g| *g == 2.0));
    }

    #[test]
    fn relu_and_concat_semantics() {
        let mut tape = Tape::<f64>::new(Mode::Eval);
        let x = tape.input(
            Tensor4::from_vec(Shape4::new(1, 2, 1, 1), vec![-1.0, 2.0]).unwrap(),
            false,
        );
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);

        let a = tape.input(Tensor4::full(Shape4::new(1, 2, 2, 2), 1.0), false);
        let b = tape.input(Tensor4::full(Shape4::new(1, 3, 2, 2), 2.0), false);
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), Shape4::new(1, 5, 2, 2));
        let v = tape.value(c);
        assert_eq!(v.at(0, 1, 1, 1), 1.0);
        assert_eq!(v.at(0, 2, 0, 0), 2.0);

        let bad = tape.input(Tensor4::full(Shape4::new(1, 3, 2, 3), 2.0), false);
        assert!(tape.concat(&[a, bad]).is_err());
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn global_avg_pool_of_constant() {
        let mut tape = Tape::<f64>::new(Mode::Eval);
        let x = tape.input(Tensor4::full(Shape4::new(2, 3, 4, 4), 2.5), false);
        let g = tape.global_avg_pool(x);
        assert_eq!(tape.shape(g), Shape4::new(2, 3, 1, 1));
        assert!(tape.value(g).data().iter().all(|v| *v == 2.5));
    }

    #[test]
    fn shuffle_twice_restores() {
        let mut tape = Tape::<f64>::new(Mode::Eval);
        let x = tape.input(tensor(Shape4::new(2, 12, 2, 3), 9), false);
        for g in [1, 2, 3, 4, 6, 12] {
            let y = tape.channel_shuffle(x, g).unwrap();
            let z = tape.channel_shuffle(y, 12 / g).unwrap();
            assert_eq!(tape.value(z), tape.value(x));
        }
        assert!(tape.channel_shuffle(x, 5).is_err());
    }

    #[test]
    fn detached_parameter_gets_zero_grad() {
        use crate::params::{seeded_rng, Init};
        use crate::tensor::ConvSpec;
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(0);
        let used = Init::new(&mut store, &mut rng)
            .conv("used", ConvSpec::pointwise(2, 2))
            .unwrap();
        let _unused = Init::new(&mut store, &mut rng)
            .conv("unused", ConvSpec::pointwise(2, 2))
            .unwrap();
        let mut tape = Tape::<f64>::new(Mode::Train);
        let x = tape.input(tensor(Shape4::new(1, 2, 2, 2), 5), false);
        let y = tape.conv(&store, &used, x).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        tape.accumulate_into(&mut store);
        let g = store
            .tensor(store.id("unused/weight").unwrap())
            .grad()
            .unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        let g = store.tensor(used.bias.unwrap()).grad().unwrap();
        assert_eq!(g, &[4.0, 4.0]);
    }
}
