//! Reverse-mode autodiff on a Wengert tape.
//!
//! Operations are recorded at tensor granularity: each node owns its forward
//! value (computed eagerly when the op is recorded) and `backward` replays the
//! tape in reverse, accumulating gradients into a parallel array. Everything
//! is f64. Shape violations are programmer errors and panic; fallible
//! validation belongs at module boundaries, before graph construction.

use crate::numerics::ops;
use crate::numerics::tensor::Tensor;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    /// [m,k] x [k,n] -> [m,n]
    Matmul {
        a: usize,
        b: usize,
    },
    /// [n,k] x [m,k]^T -> [n,m]
    MatmulBt {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    /// [n,d] + [d] broadcast over rows
    AddRow {
        a: usize,
        b: usize,
    },
    /// [n,d] scaled per row by [n]
    MulCol {
        a: usize,
        s: usize,
    },
    /// [n,d] divided per row by [n]
    DivCol {
        a: usize,
        s: usize,
    },
    /// mul * a + add, elementwise with constants (add not needed in backward)
    Affine {
        a: usize,
        mul: f64,
    },
    Tanh {
        a: usize,
    },
    Sigmoid {
        a: usize,
    },
    Abs {
        a: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    SumSquares {
        a: usize,
    },
    Dot {
        a: usize,
        b: usize,
    },
    RowDot {
        a: usize,
        b: usize,
    },
    RowNorm {
        a: usize,
    },
    RowCosine {
        a: usize,
        b: usize,
        eps: f64,
    },
    ProtoLogits {
        h: usize,
        p: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
    /// Row-wise softmax with a shared column (key) mask; masked outputs are 0.
    SoftmaxRowsMasked {
        scores: usize,
        mask: Vec<bool>,
    },
    LayerNormRows {
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    GatherRows {
        m: usize,
        idx: Vec<usize>,
    },
    StackRows {
        parts: Vec<usize>,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    /// Rows of `src` written over a constant base at `idx` (unique indices).
    ScatterRows {
        src: usize,
        idx: Vec<usize>,
    },
    /// Row groups averaged: out[j] = mean of x rows in groups[j].
    GroupMeanRows {
        x: usize,
        groups: Vec<Vec<usize>>,
    },
    Reshape {
        a: usize,
    },
}

pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Scalar value of a `[1]` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        assert!(self.values[v.0].is_scalar(), "node is not scalar");
        self.values[v.0].at(0)
    }

    /// Gradient accumulated for `v` by the last `backward` call; zeros if the
    /// node did not influence the loss.
    pub fn grad(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.values[v.0].shape()),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.ops.push(op);
        self.values.push(value);
        self.grads.push(None);
        Var(self.ops.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    // ---- elementwise and scalar ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(ta.shape(), tb.shape(), "add: shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(Op::Add { a: a.0, b: b.0 }, value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(ta.shape(), tb.shape(), "sub: shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(Op::Sub { a: a.0, b: b.0 }, value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(ta.shape(), tb.shape(), "mul: shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(Op::Mul { a: a.0, b: b.0 }, value)
    }

    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let ta = &self.values[a.0];
        let data = ta.data().iter().map(|x| mul * x + add).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(Op::Affine { a: a.0, mul }, value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = &self.values[a.0];
        let data = ta.data().iter().map(|x| x.tanh()).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(Op::Tanh { a: a.0 }, value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = &self.values[a.0];
        let data = ta.data().iter().map(|&x| stable_sigmoid(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(Op::Sigmoid { a: a.0 }, value)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let ta = &self.values[a.0];
        let data = ta.data().iter().map(|x| x.abs()).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(Op::Abs { a: a.0 }, value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.values[a.0].data().iter().sum();
        self.push(Op::Sum { a: a.0 }, Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.values[a.0];
        assert!(t.numel() > 0, "mean: empty tensor");
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::Mean { a: a.0 }, Tensor::scalar(s))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s: f64 = self.values[a.0].data().iter().map(|x| x * x).sum();
        self.push(Op::SumSquares { a: a.0 }, Tensor::scalar(s))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(ta.numel(), tb.numel(), "dot: length mismatch");
        let s = ta.dot(tb);
        self.push(Op::Dot { a: a.0, b: b.0 }, Tensor::scalar(s))
    }

    // ---- matrix ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert!(ta.is_matrix() && tb.is_matrix(), "matmul: need matrices");
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = ta.row(i);
            for (kk, &av) in ar.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let br = tb.row(kk);
                let or = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    or[j] += av * br[j];
                }
            }
        }
        let value = Tensor::matrix(m, n, out).unwrap();
        self.push(Op::Matmul { a: a.0, b: b.0 }, value)
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert!(ta.is_matrix() && tb.is_matrix(), "matmul_bt: need matrices");
        let (n, k) = (ta.rows(), ta.cols());
        let (m, k2) = (tb.rows(), tb.cols());
        assert_eq!(k, k2, "matmul_bt: inner dims {k} vs {k2}");
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ar = ta.row(i);
            for j in 0..m {
                let br = tb.row(j);
                out[i * m + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            }
        }
        let value = Tensor::matrix(n, m, out).unwrap();
        self.push(Op::MatmulBt { a: a.0, b: b.0 }, value)
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert!(ta.is_matrix() && tb.is_vector(), "add_row: [n,d] + [d]");
        assert_eq!(ta.cols(), tb.numel(), "add_row: width mismatch");
        let (n, d) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                data.push(ta.at2(i, j) + tb.at(j));
            }
        }
        let value = Tensor::matrix(n, d, data).unwrap();
        self.push(Op::AddRow { a: a.0, b: b.0 }, value)
    }

    pub fn mul_col(&mut self, a: Var, s: Var) -> Var {
        let (ta, ts) = (&self.values[a.0], &self.values[s.0]);
        assert!(ta.is_matrix(), "mul_col: [n,d] expected");
        assert_eq!(ta.rows(), ts.numel(), "mul_col: scale length mismatch");
        let (n, d) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let sv = ts.at(i);
            for j in 0..d {
                data.push(ta.at2(i, j) * sv);
            }
        }
        let value = Tensor::matrix(n, d, data).unwrap();
        self.push(Op::MulCol { a: a.0, s: s.0 }, value)
    }

    pub fn div_col(&mut self, a: Var, s: Var) -> Var {
        let (ta, ts) = (&self.values[a.0], &self.values[s.0]);
        assert!(ta.is_matrix(), "div_col: [n,d] expected");
        assert_eq!(ta.rows(), ts.numel(), "div_col: divisor length mismatch");
        assert!(ts.data().iter().all(|&x| x != 0.0), "div_col: zero divisor");
        let (n, d) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let sv = ts.at(i);
            for j in 0..d {
                data.push(ta.at2(i, j) / sv);
            }
        }
        let value = Tensor::matrix(n, d, data).unwrap();
        self.push(Op::DivCol { a: a.0, s: s.0 }, value)
    }

    // ---- row reductions ----

    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(ta.shape(), tb.shape(), "row_dot: shape mismatch");
        assert!(ta.is_matrix(), "row_dot: [n,d] expected");
        let out: Vec<f64> = (0..ta.rows())
            .map(|i| ta.row(i).iter().zip(tb.row(i)).map(|(x, y)| x * y).sum())
            .collect();
        self.push(Op::RowDot { a: a.0, b: b.0 }, Tensor::vector(out))
    }

    pub fn row_norm(&mut self, a: Var) -> Var {
        let ta = &self.values[a.0];
        assert!(ta.is_matrix(), "row_norm: [n,d] expected");
        let out: Vec<f64> = (0..ta.rows())
            .map(|i| ta.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        self.push(Op::RowNorm { a: a.0 }, Tensor::vector(out))
    }

    pub fn row_cosine(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(ta.shape(), tb.shape(), "row_cosine: shape mismatch");
        assert!(ta.is_matrix(), "row_cosine: [n,d] expected");
        assert!(eps > 0.0, "row_cosine: eps must be > 0");
        let out: Vec<f64> = (0..ta.rows())
            .map(|i| ops::cosine_sim(ta.row(i), tb.row(i), eps).unwrap())
            .collect();
        self.push(
            Op::RowCosine {
                a: a.0,
                b: b.0,
                eps,
            },
            Tensor::vector(out),
        )
    }

    // ---- classification heads ----

    pub fn proto_logits(&mut self, h: Var, p: Var) -> Var {
        let value = ops::proto_logits(&self.values[h.0], &self.values[p.0])
            .expect("proto_logits: invalid shapes");
        assert!(
            self.values[h.0].is_matrix(),
            "proto_logits: batch [n,d] expected"
        );
        self.push(Op::ProtoLogits { h: h.0, p: p.0 }, value)
    }

    /// Mean cross-entropy of rows of `logits` against integer labels,
    /// computed via a fused log-softmax for stability.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let tl = &self.values[logits.0];
        assert!(tl.is_matrix(), "cross_entropy: [n,c] logits expected");
        let (n, c) = (tl.rows(), tl.cols());
        assert_eq!(n, labels.len(), "cross_entropy: label count mismatch");
        assert!(n > 0, "cross_entropy: empty batch");
        assert!(
            labels.iter().all(|&y| y < c),
            "cross_entropy: label out of range"
        );
        let mut total = 0.0;
        for i in 0..n {
            let row = tl.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[labels[i]];
        }
        let value = Tensor::scalar(total / n as f64);
        self.push(
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
            },
            value,
        )
    }

    pub fn softmax_rows_masked(&mut self, scores: Var, mask: &[bool]) -> Var {
        let ts = &self.values[scores.0];
        assert!(ts.is_matrix(), "softmax_rows_masked: [n,m] expected");
        assert_eq!(ts.cols(), mask.len(), "softmax_rows_masked: mask length");
        assert!(mask.iter().any(|&m| m), "softmax_rows_masked: all masked");
        let (n, m) = (ts.rows(), ts.cols());
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            data.extend(ops::softmax_masked(ts.row(i), mask).unwrap());
        }
        let value = Tensor::matrix(n, m, data).unwrap();
        self.push(
            Op::SoftmaxRowsMasked {
                scores: scores.0,
                mask: mask.to_vec(),
            },
            value,
        )
    }

    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (tx, tg, tb) = (
            &self.values[x.0],
            &self.values[gain.0],
            &self.values[bias.0],
        );
        assert!(
            tx.is_matrix() && tx.cols() >= 2,
            "layer_norm_rows: [n,d>=2]"
        );
        assert_eq!(tg.numel(), tx.cols(), "layer_norm_rows: gain length");
        assert_eq!(tb.numel(), tx.cols(), "layer_norm_rows: bias length");
        let (n, d) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            data.extend(ops::layer_norm(tx.row(i), tg.data(), tb.data(), eps).unwrap());
        }
        let value = Tensor::matrix(n, d, data).unwrap();
        self.push(
            Op::LayerNormRows {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
            value,
        )
    }

    // ---- reindexing ----

    pub fn gather_rows(&mut self, m: Var, idx: &[usize]) -> Var {
        let tm = &self.values[m.0];
        assert!(tm.is_matrix(), "gather_rows: [r,d] expected");
        assert!(
            idx.iter().all(|&i| i < tm.rows()),
            "gather_rows: index range"
        );
        let d = tm.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(tm.row(i));
        }
        let value = Tensor::matrix(idx.len(), d, data).unwrap();
        self.push(
            Op::GatherRows {
                m: m.0,
                idx: idx.to_vec(),
            },
            value,
        )
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack_rows: no parts");
        let d = self.values[parts[0].0].numel();
        let mut data = Vec::with_capacity(parts.len() * d);
        for v in parts {
            let t = &self.values[v.0];
            assert!(t.is_vector() && t.numel() == d, "stack_rows: row shape");
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(parts.len(), d, data).unwrap();
        self.push(
            Op::StackRows {
                parts: parts.iter().map(|v| v.0).collect(),
            },
            value,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let n = self.values[parts[0].0].rows();
        let total: usize = parts
            .iter()
            .map(|v| {
                let t = &self.values[v.0];
                assert!(t.is_matrix() && t.rows() == n, "concat_cols: row count");
                t.cols()
            })
            .sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for v in parts {
                data.extend_from_slice(self.values[v.0].row(i));
            }
        }
        let value = Tensor::matrix(n, total, data).unwrap();
        self.push(
            Op::ConcatCols {
                parts: parts.iter().map(|v| v.0).collect(),
            },
            value,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = &self.values[x.0];
        assert!(tx.is_matrix(), "slice_cols: [n,d] expected");
        assert!(start + len <= tx.cols(), "slice_cols: range");
        let n = tx.rows();
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let value = Tensor::matrix(n, len, data).unwrap();
        self.push(Op::SliceCols { x: x.0, start, len }, value)
    }

    /// Writes rows of `src` over a constant `base` at positions `idx`
    /// (unique). Only the written rows carry gradient.
    pub fn scatter_rows(&mut self, src: Var, idx: &[usize], base: Tensor) -> Var {
        let ts = &self.values[src.0];
        assert!(ts.is_matrix() && base.is_matrix(), "scatter_rows: matrices");
        assert_eq!(ts.cols(), base.cols(), "scatter_rows: width mismatch");
        assert_eq!(ts.rows(), idx.len(), "scatter_rows: index count");
        let mut seen = vec![false; base.rows()];
        for &i in idx {
            assert!(i < base.rows(), "scatter_rows: index range");
            assert!(!seen[i], "scatter_rows: duplicate index");
            seen[i] = true;
        }
        let mut out = base;
        for (r, &i) in idx.iter().enumerate() {
            let row = self.values[src.0].row(r).to_vec();
            out.row_mut(i).copy_from_slice(&row);
        }
        self.push(
            Op::ScatterRows {
                src: src.0,
                idx: idx.to_vec(),
            },
            out,
        )
    }

    /// out[j] = mean over rows of `x` listed in groups[j] (each nonempty).
    pub fn group_mean_rows(&mut self, x: Var, groups: &[Vec<usize>]) -> Var {
        let tx = &self.values[x.0];
        assert!(tx.is_matrix(), "group_mean_rows: [n,d] expected");
        assert!(!groups.is_empty(), "group_mean_rows: no groups");
        let d = tx.cols();
        let mut data = Vec::with_capacity(groups.len() * d);
        for g in groups {
            assert!(!g.is_empty(), "group_mean_rows: empty group");
            let mut acc = vec![0.0; d];
            for &i in g {
                assert!(i < tx.rows(), "group_mean_rows: index range");
                for (a, v) in acc.iter_mut().zip(tx.row(i)) {
                    *a += v;
                }
            }
            let inv = 1.0 / g.len() as f64;
            data.extend(acc.into_iter().map(|v| v * inv));
        }
        let value = Tensor::matrix(groups.len(), d, data).unwrap();
        self.push(
            Op::GroupMeanRows {
                x: x.0,
                groups: groups.to_vec(),
            },
            value,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let value = self.values[a.0]
            .reshaped(shape)
            .expect("reshape: element count mismatch");
        self.push(Op::Reshape { a: a.0 }, value)
    }

    // ---- backward ----

    /// Reverse sweep seeding d(loss)/d(loss) = 1. `loss` must be scalar.
    /// Gradients from any previous sweep are discarded.
    pub fn backward(&mut self, loss: Var) {
        assert!(
            self.values[loss.0].is_scalar(),
            "backward: loss must be scalar"
        );
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let g = match &self.grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let values = &self.values;
            let acc = |grads: &mut Vec<Option<Tensor>>, id: usize, delta: Tensor| {
                debug_assert_eq!(values[id].shape(), delta.shape());
                match &mut grads[id] {
                    Some(t) => t.add_scaled(&delta, 1.0),
                    slot @ None => *slot = Some(delta),
                }
            };

            match &self.ops[i] {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (ta, tb) = (&values[*a], &values[*b]);
                    let (m, k) = (ta.rows(), ta.cols());
                    let n = tb.cols();
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    for i2 in 0..m {
                        for kk in 0..k {
                            let br = tb.row(kk);
                            da[i2 * k + kk] = g.row(i2).iter().zip(br).map(|(x, y)| x * y).sum();
                        }
                    }
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    for i2 in 0..m {
                        let ar = ta.row(i2);
                        let gr = g.row(i2);
                        for (kk, &av) in ar.iter().enumerate() {
                            if av == 0.0 {
                                continue;
                            }
                            let dr = &mut db[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                dr[j] += av * gr[j];
                            }
                        }
                    }
                    acc(&mut self.grads, *a, Tensor::matrix(m, k, da).unwrap());
                    acc(&mut self.grads, *b, Tensor::matrix(k, n, db).unwrap());
                }
                Op::MatmulBt { a, b } => {
                    let (ta, tb) = (&values[*a], &values[*b]);
                    let (n, k) = (ta.rows(), ta.cols());
                    let m = tb.rows();
                    // out = A B^T: dA = G B, dB = G^T A
                    let mut da = vec![0.0; n * k];
                    for i2 in 0..n {
                        let gr = g.row(i2);
                        for (j, &gv) in gr.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let br = tb.row(j);
                            let dr = &mut da[i2 * k..(i2 + 1) * k];
                            for kk in 0..k {
                                dr[kk] += gv * br[kk];
                            }
                        }
                    }
                    let mut db = vec![0.0; m * k];
                    for i2 in 0..n {
                        let gr = g.row(i2);
                        let ar = ta.row(i2);
                        for (j, &gv) in gr.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let dr = &mut db[j * k..(j + 1) * k];
                            for kk in 0..k {
                                dr[kk] += gv * ar[kk];
                            }
                        }
                    }
                    acc(&mut self.grads, *a, Tensor::matrix(n, k, da).unwrap());
                    acc(&mut self.grads, *b, Tensor::matrix(m, k, db).unwrap());
                }
                Op::Add { a, b } => {
                    acc(&mut self.grads, *a, g.clone());
                    acc(&mut self.grads, *b, g.clone());
                }
                Op::Sub { a, b } => {
                    acc(&mut self.grads, *a, g.clone());
                    let mut neg = g.clone();
                    neg.data_mut().iter_mut().for_each(|x| *x = -*x);
                    acc(&mut self.grads, *b, neg);
                }
                Op::Mul { a, b } => {
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(values[*b].data())
                        .map(|(x, y)| x * y)
                        .collect();
                    let db: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(values[*a].data())
                        .map(|(x, y)| x * y)
                        .collect();
                    acc(
                        &mut self.grads,
                        *a,
                        Tensor::new(g.shape().to_vec(), da).unwrap(),
                    );
                    acc(
                        &mut self.grads,
                        *b,
                        Tensor::new(g.shape().to_vec(), db).unwrap(),
                    );
                }
                Op::AddRow { a, b } => {
                    acc(&mut self.grads, *a, g.clone());
                    let d = values[*b].numel();
                    let mut db = vec![0.0; d];
                    for i2 in 0..g.rows() {
                        for (j, v) in g.row(i2).iter().enumerate() {
                            db[j] += v;
                        }
                    }
                    acc(&mut self.grads, *b, Tensor::vector(db));
                }
                Op::MulCol { a, s } => {
                    let (ta, ts) = (&values[*a], &values[*s]);
                    let (n, d) = (ta.rows(), ta.cols());
                    let mut da = vec![0.0; n * d];
                    let mut ds = vec![0.0; n];
                    for i2 in 0..n {
                        let sv = ts.at(i2);
                        for j in 0..d {
                            let gv = g.at2(i2, j);
                            da[i2 * d + j] = gv * sv;
                            ds[i2] += gv * ta.at2(i2, j);
                        }
                    }
                    acc(&mut self.grads, *a, Tensor::matrix(n, d, da).unwrap());
                    acc(
                        &mut self.grads,
                        *s,
                        reshape_like(Tensor::vector(ds), values[*s].shape()),
                    );
                }
                Op::DivCol { a, s } => {
                    let (ta, ts) = (&values[*a], &values[*s]);
                    let (n, d) = (ta.rows(), ta.cols());
                    let mut da = vec![0.0; n * d];
                    let mut ds = vec![0.0; n];
                    for i2 in 0..n {
                        let sv = ts.at(i2);
                        for j in 0..d {
                            let gv = g.at2(i2, j);
                            da[i2 * d + j] = gv / sv;
                            ds[i2] -= gv * ta.at2(i2, j) / (sv * sv);
                        }
                    }
                    acc(&mut self.grads, *a, Tensor::matrix(n, d, da).unwrap());
                    acc(
                        &mut self.grads,
                        *s,
                        reshape_like(Tensor::vector(ds), values[*s].shape()),
                    );
                }
                Op::Affine { a, mul } => {
                    let da: Vec<f64> = g.data().iter().map(|x| mul * x).collect();
                    acc(
                        &mut self.grads,
                        *a,
                        Tensor::new(g.shape().to_vec(), da).unwrap(),
                    );
                }
                Op::Tanh { a } => {
                    let out = &values[i];
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(gv, y)| gv * (1.0 - y * y))
                        .collect();
                    acc(
                        &mut self.grads,
                        *a,
                        Tensor::new(g.shape().to_vec(), da).unwrap(),
                    );
                }
                Op::Sigmoid { a } => {
                    let out = &values[i];
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(gv, y)| gv * y * (1.0 - y))
                        .collect();
                    acc(
                        &mut self.grads,
                        *a,
                        Tensor::new(g.shape().to_vec(), da).unwrap(),
                    );
                }
                Op::Abs { a } => {
                    let ta = &values[*a];
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(gv, x)| {
                            // Subgradient 0 at the kink.
                            gv * if *x > 0.0 {
                                1.0
                            } else if *x < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    acc(
                        &mut self.grads,
                        *a,
                        Tensor::new(g.shape().to_vec(), da).unwrap(),
                    );
                }
                Op::Sum { a } => {
                    let gv = g.at(0);
                    acc(&mut self.grads, *a, Tensor::full(values[*a].shape(), gv));
                }
                Op::Mean { a } => {
                    let gv = g.at(0) / values[*a].numel() as f64;
                    acc(&mut self.grads, *a, Tensor::full(values[*a].shape(), gv));
                }
                Op::SumSquares { a } => {
                    let gv = g.at(0);
                    let da: Vec<f64> = values[*a].data().iter().map(|x| 2.0 * gv * x).collect();
                    acc(
                        &mut self.grads,
                        *a,
                        Tensor::new(values[*a].shape().to_vec(), da).unwrap(),
                    );
                }
                Op::Dot { a, b } => {
                    let gv = g.at(0);
                    let da: Vec<f64> = values[*b].data().iter().map(|x| gv * x).collect();
                    let db: Vec<f64> = values[*a].data().iter().map(|x| gv * x).collect();
                    acc(
                        &mut self.grads,
                        *a,
                        Tensor::new(values[*a].shape().to_vec(), da).unwrap(),
                    );
                    acc(
                        &mut self.grads,
                        *b,
                        Tensor::new(values[*b].shape().to_vec(), db).unwrap(),
                    );
                }
                Op::RowDot { a, b } => {
                    let (ta, tb) = (&values[*a], &values[*b]);
                    let (n, d) = (ta.rows(), ta.cols());
                    let mut da = vec![0.0; n * d];
                    let mut db = vec![0.0; n * d];
                    for i2 in 0..n {
                        let gv = g.at(i2);
                        for j in 0..d {
                            da[i2 * d + j] = gv * tb.at2(i2, j);
                            db[i2 * d + j] = gv * ta.at2(i2, j);
                        }
                    }
                    acc(&mut self.grads, *a, Tensor::matrix(n, d, da).unwrap());
                    acc(&mut self.grads, *b, Tensor::matrix(n, d, db).unwrap());
                }
                Op::RowNorm { a } => {
                    let ta = &values[*a];
                    let out = &values[i];
                    let (n, d) = (ta.rows(), ta.cols());
                    let mut da = vec![0.0; n * d];
                    for i2 in 0..n {
                        let r = out.at(i2);
                        if r > 0.0 {
                            let gv = g.at(i2) / r;
                            for j in 0..d {
                                da[i2 * d + j] = gv * ta.at2(i2, j);
                            }
                        }
                        // r == 0: subgradient 0.
                    }
                    acc(&mut self.grads, *a, Tensor::matrix(n, d, da).unwrap());
                }
                Op::RowCosine { a, b, eps } => {
                    let (ta, tb) = (&values[*a], &values[*b]);
                    let out = &values[i];
                    let (n, d) = (ta.rows(), ta.cols());
                    let mut da = vec![0.0; n * d];
                    let mut db = vec![0.0; n * d];
                    for i2 in 0..n {
                        let ar = ta.row(i2);
                        let br = tb.row(i2);
                        let na2: f64 = ar.iter().map(|x| x * x).sum();
                        let nb2: f64 = br.iter().map(|x| x * x).sum();
                        let den = (na2.sqrt() * nb2.sqrt()).max(*eps);
                        let gv = g.at(i2);
                        let c = out.at(i2);
                        if na2.sqrt() * nb2.sqrt() > *eps {
                            for j in 0..d {
                                da[i2 * d + j] = gv * (br[j] / den - c * ar[j] / na2);
                                db[i2 * d + j] = gv * (ar[j] / den - c * br[j] / nb2);
                            }
                        } else {
                            // Clamped branch: cos = dot / eps is linear.
                            for j in 0..d {
                                da[i2 * d + j] = gv * br[j] / den;
                                db[i2 * d + j] = gv * ar[j] / den;
                            }
                        }
                    }
                    acc(&mut self.grads, *a, Tensor::matrix(n, d, da).unwrap());
                    acc(&mut self.grads, *b, Tensor::matrix(n, d, db).unwrap());
                }
                Op::ProtoLogits { h, p } => {
                    let (th, tp) = (&values[*h], &values[*p]);
                    let (n, d) = (th.rows(), th.cols());
                    let c = tp.rows();
                    let mut dh = vec![0.0; n * d];
                    let mut dp = vec![0.0; c * d];
                    for i2 in 0..n {
                        let hr = th.row(i2);
                        for j in 0..c {
                            let gv = g.at2(i2, j);
                            if gv == 0.0 {
                                continue;
                            }
                            let pr = tp.row(j);
                            for k in 0..d {
                                let diff = 2.0 * gv * (pr[k] - hr[k]);
                                dh[i2 * d + k] += diff;
                                dp[j * d + k] -= diff;
                            }
                        }
                    }
                    acc(&mut self.grads, *h, Tensor::matrix(n, d, dh).unwrap());
                    acc(&mut self.grads, *p, Tensor::matrix(c, d, dp).unwrap());
                }
                Op::CrossEntropy { logits, labels } => {
                    let tl = &values[*logits];
                    let (n, c) = (tl.rows(), tl.cols());
                    let gv = g.at(0) / n as f64;
                    let mut dl = vec![0.0; n * c];
                    for i2 in 0..n {
                        let p = ops::softmax_scaled(tl.row(i2), 1.0).unwrap();
                        for j in 0..c {
                            let ind = if labels[i2] == j { 1.0 } else { 0.0 };
                            dl[i2 * c + j] = gv * (p[j] - ind);
                        }
                    }
                    acc(&mut self.grads, *logits, Tensor::matrix(n, c, dl).unwrap());
                }
                Op::SoftmaxRowsMasked { scores, mask } => {
                    let out = &values[i];
                    let (n, m) = (out.rows(), out.cols());
                    let mut ds = vec![0.0; n * m];
                    for i2 in 0..n {
                        let pr = out.row(i2);
                        let gr = g.row(i2);
                        let inner: f64 = (0..m).filter(|&j| mask[j]).map(|j| gr[j] * pr[j]).sum();
                        for j in 0..m {
                            if mask[j] {
                                ds[i2 * m + j] = pr[j] * (gr[j] - inner);
                            }
                        }
                    }
                    acc(&mut self.grads, *scores, Tensor::matrix(n, m, ds).unwrap());
                }
                Op::LayerNormRows { x, gain, bias, eps } => {
                    let (tx, tg) = (&values[*x], &values[*gain]);
                    let (n, d) = (tx.rows(), tx.cols());
                    let mut dx = vec![0.0; n * d];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for i2 in 0..n {
                        let row = tx.row(i2);
                        let gr = g.row(i2);
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> = (0..d).map(|j| gr[j] * tg.at(j)).collect();
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dgain[j] += gr[j] * xhat[j];
                            dbias[j] += gr[j];
                            dx[i2 * d + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                    acc(&mut self.grads, *x, Tensor::matrix(n, d, dx).unwrap());
                    acc(
                        &mut self.grads,
                        *gain,
                        reshape_like(Tensor::vector(dgain), values[*gain].shape()),
                    );
                    acc(
                        &mut self.grads,
                        *bias,
                        reshape_like(Tensor::vector(dbias), values[*bias].shape()),
                    );
                }
                Op::GatherRows { m, idx } => {
                    let tm = &values[*m];
                    let (r, d) = (tm.rows(), tm.cols());
                    let mut dm = vec![0.0; r * d];
                    for (row, &src) in idx.iter().enumerate() {
                        let gr = g.row(row);
                        let dr = &mut dm[src * d..(src + 1) * d];
                        for j in 0..d {
                            dr[j] += gr[j];
                        }
                    }
                    acc(&mut self.grads, *m, Tensor::matrix(r, d, dm).unwrap());
                }
                Op::StackRows { parts } => {
                    let parts = parts.clone();
                    for (row, id) in parts.iter().enumerate() {
                        let delta =
                            reshape_like(Tensor::vector(g.row(row).to_vec()), values[*id].shape());
                        acc(&mut self.grads, *id, delta);
                    }
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let n = g.rows();
                    let mut start = 0;
                    for id in &parts {
                        let w = values[*id].cols();
                        let mut data = Vec::with_capacity(n * w);
                        for i2 in 0..n {
                            data.extend_from_slice(&g.row(i2)[start..start + w]);
                        }
                        acc(&mut self.grads, *id, Tensor::matrix(n, w, data).unwrap());
                        start += w;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let tx = &values[*x];
                    let (n, d) = (tx.rows(), tx.cols());
                    let mut dx = vec![0.0; n * d];
                    for i2 in 0..n {
                        let gr = g.row(i2);
                        for j in 0..*len {
                            dx[i2 * d + start + j] += gr[j];
                        }
                    }
                    acc(&mut self.grads, *x, Tensor::matrix(n, d, dx).unwrap());
                }
                Op::ScatterRows { src, idx } => {
                    let d = values[*src].cols();
                    let mut ds = Vec::with_capacity(idx.len() * d);
                    for &i2 in idx {
                        ds.extend_from_slice(g.row(i2));
                    }
                    acc(
                        &mut self.grads,
                        *src,
                        Tensor::matrix(idx.len(), d, ds).unwrap(),
                    );
                }
                Op::GroupMeanRows { x, groups } => {
                    let tx = &values[*x];
                    let (n, d) = (tx.rows(), tx.cols());
                    let mut dx = vec![0.0; n * d];
                    for (j, group) in groups.iter().enumerate() {
                        let inv = 1.0 / group.len() as f64;
                        let gr = g.row(j);
                        for &row in group {
                            let dr = &mut dx[row * d..(row + 1) * d];
                            for k in 0..d {
                                dr[k] += gr[k] * inv;
                            }
                        }
                    }
                    acc(&mut self.grads, *x, Tensor::matrix(n, d, dx).unwrap());
                }
                Op::Reshape { a } => {
                    let delta = reshape_like(g.clone(), values[*a].shape());
                    acc(&mut self.grads, *a, delta);
                }
            }
        }
    }
}

fn reshape_like(t: Tensor, shape: &[usize]) -> Tensor {
    t.reshaped(shape.to_vec()).unwrap()
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn forward_values_matmul_chain() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.leaf(Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        let c = t.matmul(a, b);
        assert_eq!(t.value(c).data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn backward_through_mul_and_sum() {
        // f = sum(a * b): df/da = b, df/db = a.
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let b = t.leaf(Tensor::vector(vec![4.0, 5.0, 6.0]));
        let p = t.mul(a, b);
        let s = t.sum(p);
        t.backward(s);
        assert_eq!(t.grad(a).data(), &[4.0, 5.0, 6.0]);
        assert_eq!(t.grad(b).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // f = sum(a) + dot(a, a): df/da = 1 + 2a.
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, -2.0]));
        let s = t.sum(a);
        let d = t.dot(a, a);
        let f = t.add(s, d);
        t.backward(f);
        assert_eq!(t.grad(a).data(), &[3.0, -3.0]);
    }

    #[test]
    fn cross_entropy_matches_manual_computation() {
        let mut t = Tape::new();
        let logits = t.leaf(Tensor::matrix(2, 3, vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap());
        let ce = t.cross_entropy(logits, &[0, 2]);
        let row0 = {
            let z: f64 = [1.0_f64, 0.0, -1.0].iter().map(|x| x.exp()).sum();
            z.ln() - 1.0
        };
        let row1 = 3.0_f64.ln(); // uniform logits over 3 classes
        assert_abs_diff_eq!(t.scalar_value(ce), (row0 + row1) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut t = Tape::new();
        let logits = t.leaf(Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap());
        let ce = t.cross_entropy(logits, &[1]);
        t.backward(ce);
        let p = ops::softmax_scaled(&[0.3, -0.7], 1.0).unwrap();
        let g = t.grad(logits);
        assert_abs_diff_eq!(g.at(0), p[0], epsilon = 1e-12);
        assert_abs_diff_eq!(g.at(1), p[1] - 1.0, epsilon = 1e-12);
    }

    #[test]
    fn masked_softmax_rows_zero_out_masked_columns() {
        let mut t = Tape::new();
        let s = t.leaf(Tensor::matrix(2, 3, vec![1.0, 9.0, 2.0, 0.0, 9.0, 0.0]).unwrap());
        let p = t.softmax_rows_masked(s, &[true, false, true]);
        let v = t.value(p);
        assert_eq!(v.at2(0, 1), 0.0);
        assert_eq!(v.at2(1, 1), 0.0);
        assert_abs_diff_eq!(v.row(0).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn layer_norm_rows_matches_vector_op() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap());
        let gain = t.leaf(Tensor::vector(vec![1.5, 1.0, 0.5]));
        let bias = t.leaf(Tensor::vector(vec![0.1, -0.1, 0.0]));
        let y = t.layer_norm_rows(x, gain, bias, 1e-5);
        for i in 0..2 {
            let expect = ops::layer_norm(
                t.value(x).row(i),
                t.value(gain).data(),
                t.value(bias).data(),
                1e-5,
            )
            .unwrap();
            for (a, b) in t.value(y).row(i).iter().zip(&expect) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn gather_scatter_roundtrip_gradient() {
        // Gather rows 1 and 1 (duplicate) then sum: row 1 receives grad 2.
        let mut t = Tape::new();
        let m = t.leaf(Tensor::matrix(3, 2, vec![0.0; 6]).unwrap());
        let gth = t.gather_rows(m, &[1, 1]);
        let s = t.sum(gth);
        t.backward(s);
        assert_eq!(t.grad(m).data(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn scatter_rows_overwrites_and_routes_gradient() {
        let mut t = Tape::new();
        let src = t.leaf(Tensor::matrix(1, 2, vec![5.0, 6.0]).unwrap());
        let base = Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let out = t.scatter_rows(src, &[1], base);
        assert_eq!(t.value(out).data(), &[1.0, 1.0, 5.0, 6.0]);
        let s = t.sum(out);
        t.backward(s);
        assert_eq!(t.grad(src).data(), &[1.0, 1.0]);
    }

    #[test]
    fn proto_logits_forward_agrees_with_pure_op() {
        let mut t = Tape::new();
        let h = t.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.5, -0.5]).unwrap());
        let p = t.leaf(Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 1.0]).unwrap());
        let l = t.proto_logits(h, p);
        let direct = ops::proto_logits(t.value(h), t.value(p)).unwrap();
        assert_eq!(t.value(l).data(), direct.data());
    }

    #[test]
    fn group_mean_rows_averages() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let m = t.group_mean_rows(x, &[vec![0, 2], vec![1]]);
        assert_eq!(t.value(m).data(), &[3.0, 4.0, 3.0, 4.0]);
    }
}
