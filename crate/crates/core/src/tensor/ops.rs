use super::tape::{Bcast, Op, Var};
use super::{gemm, Result, Tensor, TensorError};

const MASKED: f64 = -1e30;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Max-subtracted softmax of one row, in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn mismatch(kernel: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        kernel,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor {
            shape: n.shape.clone(),
            values: n.value.clone(),
        }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf after `backward`.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.grad_of(self.id)
    }

    fn rg(&self) -> bool {
        self.requires_grad()
    }

    fn unary(&self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var<'t> {
        let rg = self.rg();
        self.tape.push(shape, value, op, rg)
    }

    fn with_values<R>(&self, f: impl FnOnce(&[usize], &[f64]) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        f(&n.shape, &n.value)
    }

    /// Stop-gradient: same value, no gradient path back.
    pub fn detach(&self) -> Var<'t> {
        let (shape, value) = self.with_values(|s, v| (s.to_vec(), v.to_vec()));
        self.tape.push(shape, value, Op::Leaf, false)
    }

    pub fn matmul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let ls = self.shape();
        let rs = rhs.shape();
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(mismatch("matmul", &ls, &rs));
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.tape.nodes.borrow();
            gemm(m, k, n, &nodes[self.id].value, &nodes[rhs.id].value, &mut out);
        }
        let rg = self.rg() || rhs.rg();
        Ok(self.tape.push(vec![m, n], out, Op::MatMul(self.id, rhs.id), rg))
    }

    fn broadcast_kind(&self, rhs: &Var<'t>, kernel: &'static str) -> Result<Bcast> {
        let ls = self.shape();
        let rs = rhs.shape();
        let rn: usize = rs.iter().product();
        if ls == rs {
            Ok(Bcast::Same)
        } else if rn == 1 {
            Ok(Bcast::Scalar)
        } else if rs.len() == 1 && ls.last() == Some(&rs[0]) {
            Ok(Bcast::Row)
        } else {
            Err(mismatch(kernel, &ls, &rs))
        }
    }

    fn binary(&self, rhs: Var<'t>, kernel: &'static str, mul: bool) -> Result<Var<'t>> {
        let bc = self.broadcast_kind(&rhs, kernel)?;
        let (shape, out) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[rhs.id].value;
            let cols = b.len();
            let out: Vec<f64> = a
                .value
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = match bc {
                        Bcast::Same => b[i],
                        Bcast::Row => b[i % cols],
                        Bcast::Scalar => b[0],
                    };
                    if mul {
                        x * y
                    } else {
                        x + y
                    }
                })
                .collect();
            (a.shape.clone(), out)
        };
        let op = if mul {
            Op::Mul(self.id, rhs.id, bc)
        } else {
            Op::Add(self.id, rhs.id, bc)
        };
        let rg = self.rg() || rhs.rg();
        Ok(self.tape.push(shape, out, op, rg))
    }

    /// Elementwise sum; `rhs` may also be a row vector or a scalar.
    pub fn add(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", false)
    }

    /// Elementwise product; `rhs` may also be a row vector or a scalar.
    pub fn mul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", true)
    }

    pub fn sub(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let ls = self.shape();
        let rs = rhs.shape();
        if ls != rs {
            return Err(mismatch("sub", &ls, &rs));
        }
        let out = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[rhs.id].value;
            a.iter().zip(b).map(|(x, y)| x - y).collect()
        };
        let rg = self.rg() || rhs.rg();
        Ok(self.tape.push(ls, out, Op::Sub(self.id, rhs.id), rg))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let (s, v) = self.with_values(|s, v| (s.to_vec(), v.iter().map(|x| x * c).collect()));
        self.unary(s, v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let (s, v) = self.with_values(|s, v| (s.to_vec(), v.iter().map(|x| x + c).collect()));
        self.unary(s, v, Op::AddScalar(self.id))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(mismatch("transpose", &s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.with_values(|_, v| {
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = v[i * c + j];
                }
            }
            out
        });
        Ok(self.unary(vec![c, r], v, Op::Transpose(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if s.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(mismatch("reshape", &s, shape));
        }
        let v = self.with_values(|_, v| v.to_vec());
        Ok(self.unary(shape.to_vec(), v, Op::Reshape(self.id)))
    }

    /// Concatenates 2-D tensors along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            kernel: "concat",
            msg: "no inputs".into(),
        })?;
        let tape = first.tape;
        let nodes = tape.nodes.borrow();
        let s0 = nodes[first.id].shape.clone();
        let (r0, c0) = rows_cols(&s0);
        let mut rows = 0;
        let mut cols = 0;
        for p in parts {
            let s = &nodes[p.id].shape;
            let (r, c) = rows_cols(s);
            if axis == 0 {
                if c != c0 {
                    return Err(mismatch("concat", &s0, s));
                }
                rows += r;
            } else {
                if r != r0 {
                    return Err(mismatch("concat", &s0, s));
                }
                cols += c;
            }
        }
        let (shape, value) = if axis == 0 {
            let mut v = Vec::with_capacity(rows * c0);
            for p in parts {
                v.extend_from_slice(&nodes[p.id].value);
            }
            let shape = if s0.len() == 1 { vec![rows * c0] } else { vec![rows, c0] };
            (shape, v)
        } else {
            let mut v = vec![0.0; r0 * cols];
            let mut off = 0;
            for p in parts {
                let (_, c) = rows_cols(&nodes[p.id].shape);
                let pv = &nodes[p.id].value;
                for r in 0..r0 {
                    v[r * cols + off..r * cols + off + c].copy_from_slice(&pv[r * c..(r + 1) * c]);
                }
                off += c;
            }
            (vec![r0, cols], v)
        };
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        let op = Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            axis,
        };
        Ok(tape.push(shape, value, op, rg))
    }

    /// Rows `[start, start+len)` (`axis = 0`) or columns (`axis = 1`) of a 2-D tensor.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let s = self.shape();
        let (r, c) = if s.len() == 1 { (s[0], 1) } else { rows_cols(&s) };
        let limit = if axis == 0 { r } else { c };
        if start + len > limit || axis > 1 {
            return Err(TensorError::Invalid {
                kernel: "slice",
                msg: format!("range {start}..{} out of bounds for axis {axis} of {s:?}", start + len),
            });
        }
        let (shape, v) = self.with_values(|_, v| {
            if axis == 0 {
                let shape = if s.len() == 1 { vec![len] } else { vec![len, c] };
                (shape, v[start * c..(start + len) * c].to_vec())
            } else {
                let mut out = Vec::with_capacity(r * len);
                for i in 0..r {
                    out.extend_from_slice(&v[i * c + start..i * c + start + len]);
                }
                (vec![r, len], out)
            }
        });
        Ok(self.unary(shape, v, Op::Slice { src: self.id, axis, start }))
    }

    /// Row lookup into a `[V, d]` table.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(mismatch("embedding", &s, &[ids.len()]));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Invalid {
                kernel: "embedding",
                msg: format!("id {bad} out of range for table of {v} rows"),
            });
        }
        let out = self.with_values(|_, t| {
            let mut out = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                out.extend_from_slice(&t[i * d..(i + 1) * d]);
            }
            out
        });
        Ok(self.unary(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Builds a new `[index.len(), cols]` tensor from source rows; `None` yields zeros.
    pub fn gather_rows(&self, index: &[Option<usize>]) -> Result<Var<'t>> {
        let s = self.shape();
        let (r, c) = rows_cols(&s);
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= r) {
            return Err(TensorError::Invalid {
                kernel: "gather_rows",
                msg: format!("row {bad} out of range for {s:?}"),
            });
        }
        let out = self.with_values(|_, v| {
            let mut out = vec![0.0; index.len() * c];
            for (o, ix) in index.iter().enumerate() {
                if let Some(i) = ix {
                    out[o * c..(o + 1) * c].copy_from_slice(&v[i * c..(i + 1) * c]);
                }
            }
            out
        });
        Ok(self.unary(
            vec![index.len(), c],
            out,
            Op::GatherRows {
                src: self.id,
                index: index.to_vec(),
            },
        ))
    }

    /// Row-wise, max-subtracted softmax over the last axis.
    pub fn softmax(&self) -> Var<'t> {
        let (s, v) = self.with_values(|s, v| {
            let (_, c) = rows_cols(s);
            let mut out = v.to_vec();
            for row in out.chunks_mut(c) {
                softmax_in_place(row);
            }
            (s.to_vec(), out)
        });
        self.unary(s, v, Op::Softmax(self.id))
    }

    /// Replaces entries above the diagonal of a square score matrix with a large negative.
    pub fn causal_mask(&self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(mismatch("causal_mask", &s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.with_values(|_, v| {
            let mut out = v.to_vec();
            for i in 0..r {
                for j in (i + 1)..c {
                    out[i * c + j] = MASKED;
                }
            }
            out
        });
        Ok(self.unary(s, v, Op::CausalMask(self.id)))
    }

    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let s = self.shape();
        let (r, c) = rows_cols(&s);
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(mismatch("layer_norm", &s, &gamma.shape()));
        }
        let (out, xhat, rstd) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let g = &nodes[gamma.id].value;
            let b = &nodes[beta.id].value;
            let mut out = vec![0.0; r * c];
            let mut xhat = vec![0.0; r * c];
            let mut rstd = vec![0.0; r];
            for i in 0..r {
                let row = &x[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[i] = rs;
                for j in 0..c {
                    let h = (row[j] - mean) * rs;
                    xhat[i * c + j] = h;
                    out[i * c + j] = h * g[j] + b[j];
                }
            }
            (out, xhat, rstd)
        };
        let rg = self.rg() || gamma.rg() || beta.rg();
        Ok(self.tape.push(
            s,
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t> {
        let (s, v) = self.with_values(|s, v| (s.to_vec(), v.iter().map(|&x| gelu(x)).collect()));
        self.unary(s, v, Op::Gelu(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        let (s, v) = self.with_values(|s, v| (s.to_vec(), v.iter().map(|x| x.exp()).collect()));
        self.unary(s, v, Op::Exp(self.id))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        let (s, v) = self.with_values(|s, v| (s.to_vec(), v.iter().map(|x| x.clamp(lo, hi)).collect()));
        self.unary(s, v, Op::Clamp { src: self.id, lo, hi })
    }

    pub fn minimum(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let ls = self.shape();
        let rs = rhs.shape();
        if ls != rs {
            return Err(mismatch("minimum", &ls, &rs));
        }
        let out = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[rhs.id].value;
            a.iter().zip(b).map(|(x, y)| x.min(*y)).collect()
        };
        let rg = self.rg() || rhs.rg();
        Ok(self.tape.push(ls, out, Op::Minimum(self.id, rhs.id), rg))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = self.with_values(|_, v| v.iter().sum::<f64>());
        self.unary(vec![], vec![v], Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.with_values(|_, v| v.iter().sum::<f64>() / v.len().max(1) as f64);
        self.unary(vec![], vec![v], Op::Mean(self.id))
    }

    /// Euclidean norm of each row: `[n, c] -> [n]`.
    pub fn row_norms(&self) -> Var<'t> {
        let (n, v) = self.with_values(|s, v| {
            let (r, c) = rows_cols(s);
            (r, v.chunks(c).map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt()).collect())
        });
        self.unary(vec![n], v, Op::RowNorms(self.id))
    }

    /// Scales each row to unit Euclidean norm (zero rows stay zero).
    pub fn normalize_rows(&self) -> Var<'t> {
        let (s, v, norms) = self.with_values(|s, v| {
            let (_, c) = rows_cols(s);
            let mut out = v.to_vec();
            let mut norms = Vec::new();
            for row in out.chunks_mut(c) {
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    row.iter_mut().for_each(|x| *x /= n);
                }
                norms.push(n);
            }
            (s.to_vec(), out, norms)
        });
        self.unary(s, v, Op::NormalizeRows { src: self.id, norms })
    }

    /// Mean of each `(start, len)` block of rows: `[n, c] -> [segments, c]`.
    pub fn segment_mean(&self, segments: &[(usize, usize)]) -> Result<Var<'t>> {
        let s = self.shape();
        let (r, c) = rows_cols(&s);
        if segments.iter().any(|&(st, len)| len == 0 || st + len > r) {
            return Err(TensorError::Invalid {
                kernel: "segment_mean",
                msg: format!("segment out of range for {s:?}"),
            });
        }
        let out = self.with_values(|_, v| {
            let mut out = vec![0.0; segments.len() * c];
            for (k, &(st, len)) in segments.iter().enumerate() {
                for row in st..st + len {
                    for j in 0..c {
                        out[k * c + j] += v[row * c + j];
                    }
                }
                for j in 0..c {
                    out[k * c + j] /= len as f64;
                }
            }
            out
        });
        Ok(self.unary(
            vec![segments.len(), c],
            out,
            Op::SegmentMean {
                src: self.id,
                segments: segments.to_vec(),
            },
        ))
    }

    /// Mean cross-entropy of `[n, V]` logits against target ids over positions where `mask` is set.
    pub fn cross_entropy(&self, targets: &[usize], mask: &[bool]) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != targets.len() || targets.len() != mask.len() {
            return Err(mismatch("cross_entropy", &s, &[targets.len(), mask.len()]));
        }
        let v = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::Invalid {
                kernel: "cross_entropy",
                msg: format!("target {bad} out of range for {v} classes"),
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::Invalid {
                kernel: "cross_entropy",
                msg: "every position is masked out".into(),
            });
        }
        let (probs, loss) = self.with_values(|_, logits| {
            let mut probs = logits.to_vec();
            let mut loss = 0.0;
            for (i, row) in probs.chunks_mut(v).enumerate() {
                softmax_in_place(row);
                if mask[i] {
                    let lr = &logits[i * v..(i + 1) * v];
                    loss -= log_softmax_at(lr, targets[i]);
                }
            }
            (probs, loss / count as f64)
        });
        Ok(self.unary(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// `log softmax(logits_i)[targets_i]` per row: `[n, V] -> [n]`.
    pub fn log_prob_gather(&self, targets: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(mismatch("log_prob_gather", &s, &[targets.len()]));
        }
        let v = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::Invalid {
                kernel: "log_prob_gather",
                msg: format!("target {bad} out of range for {v} classes"),
            });
        }
        let (probs, out) = self.with_values(|_, logits| {
            let mut probs = logits.to_vec();
            let mut out = Vec::with_capacity(targets.len());
            for (i, row) in probs.chunks_mut(v).enumerate() {
                softmax_in_place(row);
                out.push(log_softmax_at(&logits[i * v..(i + 1) * v], targets[i]));
            }
            (probs, out)
        });
        Ok(self.unary(
            vec![targets.len()],
            out,
            Op::LogProbGather {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }
}

/// `log softmax(row)[t]` computed via log-sum-exp.
pub(crate) fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    row[t] - lse
}

#[cfg(test)]
mod tests {
    use super::super::{Tape, Tensor};

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn slice_of_vector_and_its_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[5], &[1.0, 2.0, 3.0, 4.0, 5.0]));
        let y = x.slice(0, 1, 3).unwrap();
        assert_eq!(y.value().values, vec![2.0, 3.0, 4.0]);
        tape.backward(y.sum()).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_rows_are_normalized() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -50.0, 0.0, 50.0, 1e3]));
        let y = x.softmax().value();
        for row in y.values.chunks(4) {
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_v() {
        let tape = Tape::new();
        let v = 7;
        let x = tape.constant(Tensor::zeros(&[3, v]));
        let loss = x.cross_entropy(&[0, 3, 6], &[true, false, true]).unwrap();
        assert!((loss.item() - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn identity_matmul_is_exact() {
        let tape = Tape::new();
        let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a_vals = [0.1, -2.5, 3.25, 7.0, 1e-9, -0.333, 5.5, 6.0, -7.125];
        let a = tape.constant(t(&[3, 3], &a_vals));
        assert_eq!(eye.matmul(a).unwrap().value().values, a_vals.to_vec());
    }

    #[test]
    fn shape_mismatch_names_kernel_and_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[4], &[1.0, -2.0, 0.5, 3.0]));
        let loss = x.mul(x).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let loss = x.mul(x).unwrap().sum();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn detached_branch_has_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let d = x.detach();
        // f = sum(x * sg(x)): df/dx = sg(x) only
        let loss = x.mul(d).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 2.0, 3.0]);
        // f = sum(sg(x)^2): no gradient at all
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let d = x.detach();
        let loss = d.mul(d).unwrap().sum();
        tape.backward(loss).unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_probs_minus_onehot() {
        let tape = Tape::new();
        let logits = [0.3, -1.2, 2.0, 0.5];
        let x = tape.leaf(t(&[1, 4], &logits));
        let loss = x.cross_entropy(&[2], &[true]).unwrap();
        tape.backward(loss).unwrap();
        let probs = x.softmax().value().values;
        let g = x.grad().unwrap();
        for j in 0..4 {
            let onehot = if j == 2 { 1.0 } else { 0.0 };
            assert!((g[j] - (probs[j] - onehot)).abs() < 1e-15);
        }
    }
}
