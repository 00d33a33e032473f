use std::cell::RefCell;

use super::params::ParamStore;
use super::{gemm_strided, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Bcast {
    Same,
    /// rhs is a `[cols]` vector broadcast over the rows of lhs.
    Row,
    /// rhs holds a single value.
    Scalar,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Param {
        store: u64,
        index: usize,
    },
    MatMul(usize, usize),
    Add(usize, usize, Bcast),
    Sub(usize, usize),
    Mul(usize, usize, Bcast),
    Scale(usize, f64),
    AddScalar(usize),
    Transpose(usize),
    Reshape(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        src: usize,
        axis: usize,
        start: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    GatherRows {
        src: usize,
        index: Vec<Option<usize>>,
    },
    Softmax(usize),
    CausalMask(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(usize),
    Exp(usize),
    Clamp {
        src: usize,
        lo: f64,
        hi: f64,
    },
    Minimum(usize, usize),
    Sum(usize),
    Mean(usize),
    RowNorms(usize),
    NormalizeRows {
        src: usize,
        norms: Vec<f64>,
    },
    SegmentMean {
        src: usize,
        segments: Vec<(usize, usize)>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    LogProbGather {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

/// Records every operation of one forward pass so `backward` can replay it
/// in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        debug_assert!(
            matches!(op, Op::Leaf | Op::Param { .. }) || value.iter().all(|v| v.is_finite()),
            "non-finite value from {op:?}"
        );
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t.shape, t.values, Op::Leaf, false)
    }

    /// A leaf whose gradient is accumulated by `backward`.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push(t.shape, t.values, Op::Leaf, true)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push(vec![], vec![v], Op::Leaf, false)
    }

    /// Loads a named parameter; frozen parameters enter as constants.
    pub fn param<'t>(&'t self, store: &ParamStore, name: &str) -> Result<Var<'t>> {
        let index = store.index_of(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let p = store.get_index(index);
        Ok(self.push(
            p.shape.clone(),
            p.value.clone(),
            Op::Param { store: store.id(), index },
            p.trainable,
        ))
    }

    pub(crate) fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    /// Reverse pass from a scalar loss. Leaf gradients accumulate across calls.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(nodes[loss.id].shape.clone()));
        }
        let n = loss.id + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            match nodes[id].op {
                Op::Leaf | Op::Param { .. } => {
                    let node = &mut nodes[id];
                    match &mut node.grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => node.grad = Some(g),
                    }
                }
                _ => backprop(&nodes, id, &g, &mut grads),
            }
        }
        Ok(())
    }

    pub(crate) fn grad_of(&self, id: usize) -> Option<Vec<f64>> {
        self.nodes.borrow()[id].grad.clone()
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let len = nodes[id].value.len();
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf | Op::Param { .. } => unreachable!(),
        Op::MatMul(a, b) => {
            let (m, k) = dims2(&nodes[*a].shape);
            let n = nodes[*b].shape[1];
            let bv = &nodes[*b].value;
            let av = &nodes[*a].value;
            // dA = G * B^T
            add_into(grads, nodes, *a, |da| {
                gemm_strided(m, n, k, g, (n as isize, 1), bv, (1, n as isize), da, 1.0)
            });
            // dB = A^T * G
            add_into(grads, nodes, *b, |db| {
                gemm_strided(k, m, n, av, (1, k as isize), g, (n as isize, 1), db, 1.0)
            });
        }
        Op::Add(a, b, bc) | Op::Mul(a, b, bc) => {
            let is_mul = matches!(node.op, Op::Mul(..));
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let cols = bv.len().max(1);
            add_into(grads, nodes, *a, |da| {
                for (i, d) in da.iter_mut().enumerate() {
                    let s = if is_mul {
                        match bc {
                            Bcast::Same => bv[i],
                            Bcast::Row => bv[i % cols],
                            Bcast::Scalar => bv[0],
                        }
                    } else {
                        1.0
                    };
                    *d += g[i] * s;
                }
            });
            add_into(grads, nodes, *b, |db| {
                for (i, gi) in g.iter().enumerate() {
                    let s = if is_mul { av[i] } else { 1.0 };
                    let j = match bc {
                        Bcast::Same => i,
                        Bcast::Row => i % cols,
                        Bcast::Scalar => 0,
                    };
                    db[j] += gi * s;
                }
            });
        }
        Op::Sub(a, b) => {
            add_into(grads, nodes, *a, |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x));
            add_into(grads, nodes, *b, |db| db.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
        }
        Op::Scale(a, c) => {
            add_into(grads, nodes, *a, |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += c * x));
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            add_into(grads, nodes, *a, |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x));
        }
        Op::Transpose(a) => {
            let (r, c) = dims2(&nodes[*a].shape);
            add_into(grads, nodes, *a, |da| {
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Concat { parts, axis } => {
            let (_, out_cols) = dims2(&node.shape);
            let mut offset = 0;
            for &p in parts {
                let (pr, pc) = dims2(&nodes[p].shape);
                let len = pr * pc;
                if *axis == 0 {
                    add_into(grads, nodes, p, |dp| {
                        dp.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, x)| *d += x)
                    });
                    offset += len;
                } else {
                    add_into(grads, nodes, p, |dp| {
                        for r in 0..pr {
                            for c in 0..pc {
                                dp[r * pc + c] += g[r * out_cols + offset + c];
                            }
                        }
                    });
                    offset += pc;
                }
            }
        }
        Op::Slice { src, axis, start } => {
            let src_shape = &nodes[*src].shape;
            let src_cols = if src_shape.len() == 1 { 1 } else { dims2(src_shape).1 };
            let (or, oc) = dims2(&node.shape);
            add_into(grads, nodes, *src, |ds| {
                if *axis == 0 {
                    let base = start * src_cols;
                    ds[base..base + g.len()].iter_mut().zip(g).for_each(|(d, x)| *d += x);
                } else {
                    for r in 0..or {
                        for c in 0..oc {
                            ds[r * src_cols + start + c] += g[r * oc + c];
                        }
                    }
                }
            });
        }
        Op::Embedding { table, ids } => {
            let d = nodes[*table].shape[1];
            add_into(grads, nodes, *table, |dt| {
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += g[r * d + c];
                    }
                }
            });
        }
        Op::GatherRows { src, index } => {
            let (_, c) = dims2(&nodes[*src].shape);
            add_into(grads, nodes, *src, |ds| {
                for (r, ix) in index.iter().enumerate() {
                    if let Some(s) = ix {
                        for k in 0..c {
                            ds[s * c + k] += g[r * c + k];
                        }
                    }
                }
            });
        }
        Op::Softmax(a) => {
            let (r, c) = dims2(&node.shape);
            let y = &node.value;
            add_into(grads, nodes, *a, |da| {
                for i in 0..r {
                    let row = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = row.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        da[i * c + j] += row[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::CausalMask(a) => {
            let (r, c) = dims2(&node.shape);
            add_into(grads, nodes, *a, |da| {
                for i in 0..r {
                    for j in 0..c.min(i + 1) {
                        da[i * c + j] += g[i * c + j];
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let (r, c) = dims2(&node.shape);
            let gv = &nodes[*gamma].value;
            add_into(grads, nodes, *gamma, |dg| {
                for i in 0..r * c {
                    dg[i % c] += g[i] * xhat[i];
                }
            });
            add_into(grads, nodes, *beta, |db| {
                for i in 0..r * c {
                    db[i % c] += g[i];
                }
            });
            add_into(grads, nodes, *x, |dx| {
                let cf = c as f64;
                for i in 0..r {
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for j in 0..c {
                        let dy = g[i * c + j] * gv[j];
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat[i * c + j];
                    }
                    for j in 0..c {
                        let dy = g[i * c + j] * gv[j];
                        dx[i * c + j] += rstd[i] * (dy - sum_dy / cf - xhat[i * c + j] * sum_dy_xhat / cf);
                    }
                }
            });
        }
        Op::Gelu(a) => {
            let xv = &nodes[*a].value;
            add_into(grads, nodes, *a, |da| {
                for (i, d) in da.iter_mut().enumerate() {
                    *d += g[i] * super::ops::gelu_grad(xv[i]);
                }
            });
        }
        Op::Exp(a) => {
            let y = &node.value;
            add_into(grads, nodes, *a, |da| {
                for (i, d) in da.iter_mut().enumerate() {
                    *d += g[i] * y[i];
                }
            });
        }
        Op::Clamp { src, lo, hi } => {
            let xv = &nodes[*src].value;
            add_into(grads, nodes, *src, |da| {
                for (i, d) in da.iter_mut().enumerate() {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        *d += g[i];
                    }
                }
            });
        }
        Op::Minimum(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            add_into(grads, nodes, *a, |da| {
                for (i, d) in da.iter_mut().enumerate() {
                    if av[i] <= bv[i] {
                        *d += g[i];
                    }
                }
            });
            add_into(grads, nodes, *b, |db| {
                for (i, d) in db.iter_mut().enumerate() {
                    if av[i] > bv[i] {
                        *d += g[i];
                    }
                }
            });
        }
        Op::Sum(a) => {
            add_into(grads, nodes, *a, |da| da.iter_mut().for_each(|d| *d += g[0]));
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.len() as f64;
            add_into(grads, nodes, *a, |da| da.iter_mut().for_each(|d| *d += g[0] / n));
        }
        Op::RowNorms(a) => {
            let (r, c) = dims2(&nodes[*a].shape);
            let xv = &nodes[*a].value;
            let norms = &node.value;
            add_into(grads, nodes, *a, |da| {
                for i in 0..r {
                    if norms[i] == 0.0 {
                        continue;
                    }
                    for j in 0..c {
                        da[i * c + j] += g[i] * xv[i * c + j] / norms[i];
                    }
                }
            });
        }
        Op::NormalizeRows { src, norms } => {
            let (r, c) = dims2(&node.shape);
            let y = &node.value;
            add_into(grads, nodes, *src, |da| {
                for i in 0..r {
                    if norms[i] == 0.0 {
                        continue;
                    }
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        da[i * c + j] += (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
            });
        }
        Op::SegmentMean { src, segments } => {
            let (_, c) = dims2(&nodes[*src].shape);
            add_into(grads, nodes, *src, |da| {
                for (s, &(start, len)) in segments.iter().enumerate() {
                    let inv = 1.0 / len as f64;
                    for r in start..start + len {
                        for j in 0..c {
                            da[r * c + j] += g[s * c + j] * inv;
                        }
                    }
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            probs,
            count,
        } => {
            let v = nodes[*logits].shape[1];
            let scale = g[0] / *count as f64;
            add_into(grads, nodes, *logits, |dl| {
                for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..v {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dl[i * v + j] += scale * (probs[i * v + j] - onehot);
                    }
                }
            });
        }
        Op::LogProbGather { logits, targets, probs } => {
            let v = nodes[*logits].shape[1];
            add_into(grads, nodes, *logits, |dl| {
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..v {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dl[i * v + j] += g[i] * (onehot - probs[i * v + j]);
                    }
                }
            });
        }
    }
}
