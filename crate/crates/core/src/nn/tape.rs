//! Recording tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and whatever the
//! backward pass needs. Nodes are appended in evaluation order, so walking
//! the tape backwards is a valid reverse topological traversal.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::conv::{self, ConvGeom};
use super::gemm::gemm;
use super::tensor::{BatchStats, BufferId, ParamId, ParamStore, RunningStats, Tensor};
use super::NnError;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a value recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    Relu {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Conv3d {
        x: usize,
        k: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: usize,
    },
    Concat {
        a: usize,
        b: usize,
    },
    L1 {
        pred: usize,
        target: usize,
    },
    Mse {
        pred: usize,
        target: usize,
    },
    Sum {
        x: usize,
    },
    Dot {
        x: usize,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: impl Into<String>) -> NnError {
    NnError::ShapeMismatch(msg.into())
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn idx(&self, v: Var) -> Result<usize, NnError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(NnError::NoTape);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = match op {
            Op::Param(_) => true,
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input; with `requires_grad` its gradient is kept
    /// after [`Tape::backward`].
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    /// Records a parameter; shares the store's buffer without copying.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value_arc(id),
            op: Op::Param(id),
            requires_grad: true,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v).expect("var from another tape")].value
    }

    /// Gradient of the last backward pass for a leaf or parameter node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let i = self.idx(v).ok()?;
        self.grads.get(i)?.as_deref()
    }

    /// `x[B, I] · W[I, O] + b[O]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (xs, ws, bs) = (
            self.nodes[xi].value.shape(),
            self.nodes[wi].value.shape(),
            self.nodes[bi].value.shape(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(shape_err(format!("dense: x {xs:?}, W {ws:?}, b {bs:?}")));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[1]);
        let mut y = vec![0.0; batch * out];
        gemm(
            batch,
            inp,
            out,
            self.nodes[xi].value.data(),
            false,
            self.nodes[wi].value.data(),
            false,
            &mut y,
            0.0,
        );
        let bias = self.nodes[bi].value.data();
        for row in y.chunks_mut(out) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        let t = Tensor::new(vec![batch, out], y)?;
        Ok(self.push(
            t,
            Op::Dense {
                x: xi,
                w: wi,
                b: bi,
            },
            &[xi, wi, bi],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NnError> {
        let xi = self.idx(x)?;
        let v = &self.nodes[xi].value;
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| a.max(0.0)).collect(),
        )?;
        Ok(self.push(t, Op::Relu { x: xi }, &[xi]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if va.shape() != vb.shape() {
            return Err(shape_err(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let t = Tensor::new(
            va.shape().to_vec(),
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| x + y)
                .collect(),
        )?;
        Ok(self.push(t, Op::Add { a: ai, b: bi }, &[ai, bi]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if va.shape() != vb.shape() {
            return Err(shape_err(format!(
                "mul: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let t = Tensor::new(
            va.shape().to_vec(),
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| x * y)
                .collect(),
        )?;
        Ok(self.push(t, Op::Mul { a: ai, b: bi }, &[ai, bi]))
    }

    /// Cross-correlation with zero padding. `k` is `[F, C, kd, kh, kw]`, the
    /// optional bias `[F]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, NnError> {
        let (xi, ki) = (self.idx(x)?, self.idx(k)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let ks = self.nodes[ki].value.shape().to_vec();
        let xs = self.nodes[xi].value.shape().to_vec();
        if ks.len() != 5 || xs.len() != 5 || ks[1] != xs[1] {
            return Err(shape_err(format!("conv3d: x {xs:?}, kernel {ks:?}")));
        }
        if let Some(bi) = bi {
            if self.nodes[bi].value.shape() != [ks[0]] {
                return Err(shape_err(format!(
                    "conv3d: bias {:?} for {} filters",
                    self.nodes[bi].value.shape(),
                    ks[0]
                )));
            }
        }
        let geom = ConvGeom::new(&xs, ks[0], [ks[2], ks[3], ks[4]], stride, pad)?;
        let y = conv::conv3d_forward(
            &geom,
            self.nodes[xi].value.data(),
            self.nodes[ki].value.data(),
            bi.map(|i| self.nodes[i].value.data()),
        );
        let t = Tensor::new(geom.out_shape(), y)?;
        let mut inputs = vec![xi, ki];
        inputs.extend(bi);
        Ok(self.push(
            t,
            Op::Conv3d {
                x: xi,
                k: ki,
                b: bi,
                geom,
            },
            &inputs,
        ))
    }

    /// Per-channel batch normalisation over every axis but 1. Train mode
    /// uses batch statistics and updates the running buffer; eval mode uses
    /// the running buffer only.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        store: &mut ParamStore,
        running: BufferId,
    ) -> Result<Var, NnError> {
        let (y, batch) = self.batchnorm_with(x, gamma, beta, mode, store.buffer(running))?;
        if let Some(b) = batch {
            store.buffer_mut(running).update(&b);
        }
        Ok(y)
    }

    /// As [`Tape::batchnorm`] but leaves `running` untouched; in train mode
    /// the batch statistics are returned for the caller to apply with
    /// [`RunningStats::update`].
    pub fn batchnorm_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        running: &RunningStats,
    ) -> Result<(Var, Option<BatchStats>), NnError> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let xs = self.nodes[xi].value.shape().to_vec();
        if xs.len() < 2 {
            return Err(shape_err(format!("batchnorm: input {xs:?}")));
        }
        let (batch, ch) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        if self.nodes[gi].value.shape() != [ch] || self.nodes[bi].value.shape() != [ch] {
            return Err(shape_err(format!("batchnorm: gamma/beta must be [{ch}]")));
        }
        if running.mean.len() != ch {
            return Err(shape_err(format!(
                "batchnorm: running stats hold {} channels, input has {ch}",
                running.mean.len()
            )));
        }
        let count = batch * spatial;
        if mode == Mode::Train && count < 2 {
            return Err(NnError::DegenerateBatch);
        }
        let xd = self.nodes[xi].value.data();
        let (g, bt) = (self.nodes[gi].value.data(), self.nodes[bi].value.data());
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; ch];
        let mut stats = BatchStats {
            mean: vec![0.0; ch],
            unbiased_var: vec![0.0; ch],
        };
        for c in 0..ch {
            let plane = |n: usize| n * ch * spatial + c * spatial;
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut s = 0.0;
                    for n in 0..batch {
                        s += xd[plane(n)..][..spatial].iter().sum::<f64>();
                    }
                    let mean = s / count as f64;
                    let mut ss = 0.0;
                    for n in 0..batch {
                        ss += xd[plane(n)..][..spatial]
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum::<f64>();
                    }
                    stats.mean[c] = mean;
                    stats.unbiased_var[c] = ss / (count - 1) as f64;
                    (mean, ss / count as f64)
                }
                Mode::Eval => (running.mean[c], running.var[c]),
            };
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[c] = is;
            for n in 0..batch {
                let o = plane(n);
                for j in o..o + spatial {
                    let h = (xd[j] - mean) * is;
                    xhat[j] = h;
                    y[j] = g[c] * h + bt[c];
                }
            }
        }
        let t = Tensor::new(xs, y)?;
        let op = Op::BatchNorm {
            x: xi,
            gamma: gi,
            beta: bi,
            xhat,
            inv_std,
            train: mode == Mode::Train,
        };
        let v = self.push(t, op, &[xi, gi, bi]);
        Ok((v, (mode == Mode::Train).then_some(stats)))
    }

    pub fn max_pool3d(
        &mut self,
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var, NnError> {
        let xi = self.idx(x)?;
        let xs = self.nodes[xi].value.shape().to_vec();
        if kernel <= pad {
            return Err(shape_err(
                "max_pool3d: padding must be smaller than the window",
            ));
        }
        let geom = ConvGeom::new(
            &xs,
            xs.get(1).copied().unwrap_or(0),
            [kernel; 3],
            stride,
            pad,
        )?;
        let (y, argmax) = conv::max_pool3d_forward(&geom, self.nodes[xi].value.data());
        let t = Tensor::new(geom.out_shape(), y)?;
        Ok(self.push(t, Op::MaxPool { x: xi, argmax }, &[xi]))
    }

    /// `[B, C, ...]` → `[B, C]` mean over the trailing axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NnError> {
        let xi = self.idx(x)?;
        let xs = self.nodes[xi].value.shape().to_vec();
        if xs.len() < 3 {
            return Err(shape_err(format!("global_avg_pool: input {xs:?}")));
        }
        let spatial: usize = xs[2..].iter().product();
        let y = self.nodes[xi]
            .value
            .data()
            .chunks(spatial)
            .map(|c| c.iter().sum::<f64>() / spatial as f64)
            .collect();
        let t = Tensor::new(vec![xs[0], xs[1]], y)?;
        Ok(self.push(t, Op::GlobalAvgPool { x: xi }, &[xi]))
    }

    /// Column-wise concatenation of `[B, m]` and `[B, n]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(shape_err(format!("concat: {sa:?} and {sb:?}")));
        }
        let (rows, m, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.nodes[ai].value.data(), self.nodes[bi].value.data());
        let mut y = Vec::with_capacity(rows * (m + n));
        for r in 0..rows {
            y.extend_from_slice(&da[r * m..][..m]);
            y.extend_from_slice(&db[r * n..][..n]);
        }
        let t = Tensor::new(vec![rows, m + n], y)?;
        Ok(self.push(t, Op::Concat { a: ai, b: bi }, &[ai, bi]))
    }

    fn pair_check(&self, p: usize, t: usize, name: &str) -> Result<(), NnError> {
        let (sp, st) = (self.nodes[p].value.shape(), self.nodes[t].value.shape());
        if sp != st {
            return Err(shape_err(format!(
                "{name}: prediction {sp:?} vs target {st:?}"
            )));
        }
        Ok(())
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var, NnError> {
        let (pi, ti) = (self.idx(pred)?, self.idx(target)?);
        self.pair_check(pi, ti, "l1_loss")?;
        let (p, t) = (self.nodes[pi].value.data(), self.nodes[ti].value.data());
        let loss = p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::L1 {
                pred: pi,
                target: ti,
            },
            &[pi, ti],
        ))
    }

    /// Mean squared error.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var, NnError> {
        let (pi, ti) = (self.idx(pred)?, self.idx(target)?);
        self.pair_check(pi, ti, "mse_loss")?;
        let (p, t) = (self.nodes[pi].value.data(), self.nodes[ti].value.data());
        let loss = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred: pi,
                target: ti,
            },
            &[pi, ti],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NnError> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { x: xi }, &[xi]))
    }

    /// `Σ wᵢ xᵢ` against a constant weight vector.
    pub fn dot_const(&mut self, x: Var, weights: Vec<f64>) -> Result<Var, NnError> {
        let xi = self.idx(x)?;
        if weights.len() != self.nodes[xi].value.numel() {
            return Err(shape_err(
                "dot_const: weight length differs from input size",
            ));
        }
        let s = self.nodes[xi]
            .value
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { x: xi, weights }, &[xi]))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of leaves and
    /// parameters are kept on the tape (see [`Tape::grad`] and
    /// [`Tape::accumulate_param_grads`]); each call starts from scratch.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.numel() != 1 {
            return Err(NnError::NotScalar(self.nodes[li].value.shape().to_vec()));
        }
        if !self.nodes[li].requires_grad {
            return Err(NnError::NoTape);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds the parameter gradients of the last backward pass into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.accumulate_grad(*id, g);
            }
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |j: usize| self.nodes[j].requires_grad;
        let val = |j: usize| self.nodes[j].value.data();
        let add_to = |grads: &mut [Option<Vec<f64>>], j: usize, d: Vec<f64>| match &mut grads[j] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&d) {
                    *a += b;
                }
            }
            slot => *slot = Some(d),
        };

        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Dense { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let ws = self.nodes[w].value.shape();
                let (inp, out) = (ws[0], ws[1]);
                let batch = g.len() / out;
                if wants(x) {
                    let mut dx = vec![0.0; batch * inp];
                    gemm(batch, out, inp, g, false, val(w), true, &mut dx, 0.0);
                    add_to(grads, x, dx);
                }
                if wants(w) {
                    let mut dw = vec![0.0; inp * out];
                    gemm(inp, batch, out, val(x), true, g, false, &mut dw, 0.0);
                    add_to(grads, w, dw);
                }
                if wants(b) {
                    let mut db = vec![0.0; out];
                    for row in g.chunks(out) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    add_to(grads, b, db);
                }
            }
            Op::Relu { x } => {
                if wants(*x) {
                    let d = val(*x)
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    add_to(grads, *x, d);
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    add_to(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    add_to(grads, *b, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    add_to(
                        grads,
                        *a,
                        g.iter().zip(val(*b)).map(|(x, y)| x * y).collect(),
                    );
                }
                if wants(*b) {
                    add_to(
                        grads,
                        *b,
                        g.iter().zip(val(*a)).map(|(x, y)| x * y).collect(),
                    );
                }
            }
            Op::Conv3d { x, k, b, geom } => {
                let want_db = b.is_some_and(wants);
                let cg =
                    conv::conv3d_backward(geom, val(*x), val(*k), g, wants(*x), wants(*k), want_db);
                if let Some(dx) = cg.dx {
                    add_to(grads, *x, dx);
                }
                if let Some(dk) = cg.dweight {
                    add_to(grads, *k, dk);
                }
                if let (Some(b), Some(db)) = (b, cg.dbias) {
                    add_to(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let xs = self.nodes[*x].value.shape();
                let (batch, ch) = (xs[0], xs[1]);
                let spatial: usize = xs[2..].iter().product();
                let count = (batch * spatial) as f64;
                let gam = val(*gamma);
                let mut dgamma = vec![0.0; ch];
                let mut dbeta = vec![0.0; ch];
                for c in 0..ch {
                    for n in 0..batch {
                        let o = n * ch * spatial + c * spatial;
                        for j in o..o + spatial {
                            dgamma[c] += g[j] * xhat[j];
                            dbeta[c] += g[j];
                        }
                    }
                }
                if wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for c in 0..ch {
                        let scale = gam[c] * inv_std[c];
                        for n in 0..batch {
                            let o = n * ch * spatial + c * spatial;
                            for j in o..o + spatial {
                                dx[j] = if *train {
                                    scale * (g[j] - dbeta[c] / count - xhat[j] * dgamma[c] / count)
                                } else {
                                    scale * g[j]
                                };
                            }
                        }
                    }
                    add_to(grads, *x, dx);
                }
                if wants(*gamma) {
                    add_to(grads, *gamma, dgamma);
                }
                if wants(*beta) {
                    add_to(grads, *beta, dbeta);
                }
            }
            Op::MaxPool { x, argmax } => {
                if wants(*x) {
                    let mut dx = vec![0.0; self.nodes[*x].value.numel()];
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src] += gv;
                    }
                    add_to(grads, *x, dx);
                }
            }
            Op::GlobalAvgPool { x } => {
                if wants(*x) {
                    let n = self.nodes[*x].value.numel();
                    let spatial = n / g.len();
                    let mut dx = vec![0.0; n];
                    for (chunk, &gv) in dx.chunks_mut(spatial).zip(g) {
                        chunk.fill(gv / spatial as f64);
                    }
                    add_to(grads, *x, dx);
                }
            }
            Op::Concat { a, b } => {
                let m = self.nodes[*a].value.shape()[1];
                let n = self.nodes[*b].value.shape()[1];
                if wants(*a) {
                    let d = g.chunks(m + n).flat_map(|r| r[..m].to_vec()).collect();
                    add_to(grads, *a, d);
                }
                if wants(*b) {
                    let d = g.chunks(m + n).flat_map(|r| r[m..].to_vec()).collect();
                    add_to(grads, *b, d);
                }
            }
            Op::L1 { pred, target } => {
                let (p, t) = (val(*pred), val(*target));
                let scale = g[0] / p.len() as f64;
                let dp: Vec<f64> = p
                    .iter()
                    .zip(t)
                    .map(|(a, b)| match a.partial_cmp(b) {
                        Some(std::cmp::Ordering::Greater) => scale,
                        Some(std::cmp::Ordering::Less) => -scale,
                        _ => 0.0,
                    })
                    .collect();
                if wants(*target) {
                    add_to(grads, *target, dp.iter().map(|v| -v).collect());
                }
                if wants(*pred) {
                    add_to(grads, *pred, dp);
                }
            }
            Op::Mse { pred, target } => {
                let (p, t) = (val(*pred), val(*target));
                let scale = 2.0 * g[0] / p.len() as f64;
                let dp: Vec<f64> = p.iter().zip(t).map(|(a, b)| scale * (a - b)).collect();
                if wants(*target) {
                    add_to(grads, *target, dp.iter().map(|v| -v).collect());
                }
                if wants(*pred) {
                    add_to(grads, *pred, dp);
                }
            }
            Op::Sum { x } => {
                if wants(*x) {
                    add_to(grads, *x, vec![g[0]; self.nodes[*x].value.numel()]);
                }
            }
            Op::Dot { x, weights } => {
                if wants(*x) {
                    add_to(grads, *x, weights.iter().map(|w| w * g[0]).collect());
                }
            }
        }
    }
}

/// Runs the reverse sweep and adds parameter gradients into `store`.
pub fn backward(tape: &mut Tape, loss: Var, store: &mut ParamStore) -> Result<(), NnError> {
    tape.backward(loss)?;
    tape.accumulate_param_grads(store);
    Ok(())
}
