//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! Every primitive evaluates eagerly, validates shapes, and appends a node
//! to the tape. [`Tape::backward`] replays the nodes in reverse insertion
//! order, which is a reverse topological order because a node can only
//! reference nodes recorded before it.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::error::{Result, SgrError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// A value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    PairSum(usize, usize),
    Reshape(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { src: usize, start: usize },
    SelectRows { src: usize, indices: Vec<usize> },
    ScatterRows { src: usize, indices: Vec<usize> },
    Sigmoid(usize),
    Tanh(usize),
    LeakyRelu(usize, f64),
    Elu(usize),
    Gelu(usize),
    SoftmaxRows(usize),
    LayerNorm {
        src: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(usize),
    BceWithLogits { logits: usize, targets: Vec<f64> },
    CrossEntropyRows {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive operations.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, Var>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A constant input; receives a gradient but is not a parameter.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf)
    }

    /// Records `store[id]` on the tape. Repeated calls return the same variable.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.borrow().get(&id) {
            return *v;
        }
        let v = self.push_unchecked(store.get(id).clone(), Op::Param(id));
        self.params.borrow_mut().insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> Result<Ref<'_, Tensor>> {
        self.check(v)?;
        Ok(Ref::map(self.nodes.borrow(), |n| &n[v.idx].value))
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        Ok(self.value(v)?.shape().to_vec())
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let t = self.value(v)?;
        t.item().ok_or_else(|| SgrError::NonScalarLoss(t.shape().to_vec()))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.borrow().len() {
            return Err(SgrError::ForeignVar);
        }
        Ok(())
    }

    fn push_unchecked(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(SgrError::NonFinite { op: name });
        }
        Ok(self.push_unchecked(value, op))
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v)?;
        if !t.is_matrix() {
            return Err(SgrError::Shape {
                op,
                shapes: vec![t.shape().to_vec()],
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    fn shape_err(&self, op: &'static str, vars: &[Var]) -> SgrError {
        SgrError::Shape {
            op,
            shapes: vars
                .iter()
                .map(|v| self.shape(*v).unwrap_or_default())
                .collect(),
        }
    }

    // ----- linear algebra -------------------------------------------------

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(self.shape_err("matmul", &[a, b]));
        }
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.nodes.borrow();
            matmul_acc(nodes[a.idx].value.data(), nodes[b.idx].value.data(), &mut out, m, k, n);
        }
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a.idx, b.idx))
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(self.shape_err("matmul_nt", &[a, b]));
        }
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.nodes.borrow();
            matmul_nt_acc(nodes[a.idx].value.data(), nodes[b.idx].value.data(), &mut out, m, k, n);
        }
        self.push("matmul_nt", Tensor::new(vec![m, n], out)?, Op::MatMulNt(a.idx, b.idx))
    }

    fn zip_same(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = {
            self.check(a)?;
            self.check(b)?;
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.idx].value, &nodes[b.idx].value);
            if ta.shape() != tb.shape() {
                drop(nodes);
                return Err(self.shape_err(name, &[a, b]));
            }
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        };
        self.push(name, value, op)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a.idx, b.idx))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a.idx, b.idx))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a.idx, b.idx))
    }

    /// Adds a `[1,n]` row to every row of `a[m,n]`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "add_row")?;
        let (r, n2) = self.matrix_dims(row, "add_row")?;
        if r != 1 || n != n2 {
            return Err(self.shape_err("add_row", &[a, row]));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tr) = (nodes[a.idx].value.data(), nodes[row.idx].value.data());
            let data = (0..m * n).map(|i| ta[i] + tr[i % n]).collect();
            Tensor::new(vec![m, n], data)?
        };
        self.push("add_row", value, Op::AddRow(a.idx, row.idx))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Result<Var> {
        let value = {
            let t = self.value(a)?;
            let data = t.data().iter().map(|x| x * factor).collect();
            Tensor::new(t.shape().to_vec(), data)?
        };
        self.push("scale", value, Op::Scale(a.idx, factor))
    }

    /// Row `i*n + j` of the result is `a[i] + b[j]` for `a[m,h]`, `b[n,h]`.
    pub fn pair_sum(&self, a: Var, b: Var) -> Result<Var> {
        let (m, h) = self.matrix_dims(a, "pair_sum")?;
        let (n, h2) = self.matrix_dims(b, "pair_sum")?;
        if h != h2 {
            return Err(self.shape_err("pair_sum", &[a, b]));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (nodes[a.idx].value.data(), nodes[b.idx].value.data());
            let mut data = Vec::with_capacity(m * n * h);
            for i in 0..m {
                for j in 0..n {
                    data.extend(
                        ta[i * h..(i + 1) * h]
                            .iter()
                            .zip(&tb[j * h..(j + 1) * h])
                            .map(|(x, y)| x + y),
                    );
                }
            }
            Tensor::new(vec![m * n, h], data)?
        };
        self.push("pair_sum", value, Op::PairSum(a.idx, b.idx))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a)?.clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(a.idx))
    }

    // ----- structural -------------------------------------------------------

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(SgrError::Shape {
                op: "concat_cols",
                shapes: vec![],
            });
        }
        let mut dims = Vec::with_capacity(parts.len());
        for p in parts {
            dims.push(self.matrix_dims(*p, "concat_cols")?);
        }
        let m = dims[0].0;
        if dims.iter().any(|d| d.0 != m) {
            return Err(self.shape_err("concat_cols", parts));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let value = {
            let nodes = self.nodes.borrow();
            let mut data = Vec::with_capacity(m * total);
            for i in 0..m {
                for (p, (_, c)) in parts.iter().zip(&dims) {
                    data.extend_from_slice(&nodes[p.idx].value.data()[i * c..(i + 1) * c]);
                }
            }
            Tensor::new(vec![m, total], data)?
        };
        self.push(
            "concat_cols",
            value,
            Op::ConcatCols(parts.iter().map(|p| p.idx).collect()),
        )
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(SgrError::Shape {
                op: "concat_rows",
                shapes: vec![],
            });
        }
        let mut dims = Vec::with_capacity(parts.len());
        for p in parts {
            dims.push(self.matrix_dims(*p, "concat_rows")?);
        }
        let n = dims[0].1;
        if dims.iter().any(|d| d.1 != n) {
            return Err(self.shape_err("concat_rows", parts));
        }
        let rows: usize = dims.iter().map(|d| d.0).sum();
        let value = {
            let nodes = self.nodes.borrow();
            let mut data = Vec::with_capacity(rows * n);
            for p in parts {
                data.extend_from_slice(nodes[p.idx].value.data());
            }
            Tensor::new(vec![rows, n], data)?
        };
        self.push(
            "concat_rows",
            value,
            Op::ConcatRows(parts.iter().map(|p| p.idx).collect()),
        )
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "slice_cols")?;
        if start + len > n || len == 0 {
            return Err(self.shape_err("slice_cols", &[a]));
        }
        let value = {
            let t = self.value(a)?;
            let data = (0..m)
                .flat_map(|i| t.data()[i * n + start..i * n + start + len].iter().copied())
                .collect();
            Tensor::new(vec![m, len], data)?
        };
        self.push("slice_cols", value, Op::SliceCols { src: a.idx, start })
    }

    /// Gathers rows by index (duplicates allowed); doubles as embedding lookup.
    pub fn select_rows(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "select_rows")?;
        if indices.iter().any(|&i| i >= m) {
            return Err(SgrError::Shape {
                op: "select_rows",
                shapes: vec![vec![m, n], indices.to_vec()],
            });
        }
        let value = {
            let t = self.value(a)?;
            let data = indices.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
            Tensor::new(vec![indices.len(), n], data)?
        };
        self.push(
            "select_rows",
            value,
            Op::SelectRows {
                src: a.idx,
                indices: indices.to_vec(),
            },
        )
    }

    /// Places row `k` of `a` at row `indices[k]` of a `[rows, n]` zero matrix.
    pub fn scatter_rows(&self, a: Var, indices: &[usize], rows: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "scatter_rows")?;
        let mut seen = vec![false; rows];
        let valid = m == indices.len()
            && indices.iter().all(|&i| i < rows && !std::mem::replace(&mut seen[i], true));
        if !valid {
            return Err(SgrError::Shape {
                op: "scatter_rows",
                shapes: vec![vec![m, n], indices.to_vec(), vec![rows]],
            });
        }
        let value = {
            let t = self.value(a)?;
            let mut data = vec![0.0; rows * n];
            for (k, &i) in indices.iter().enumerate() {
                data[i * n..(i + 1) * n].copy_from_slice(t.row(k));
            }
            Tensor::new(vec![rows, n], data)?
        };
        self.push(
            "scatter_rows",
            value,
            Op::ScatterRows {
                src: a.idx,
                indices: indices.to_vec(),
            },
        )
    }

    // ----- elementwise nonlinearities ----------------------------------------

    fn map(&self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = {
            let t = self.value(a)?;
            let data = t.data().iter().map(|x| f(*x)).collect();
            Tensor::new(t.shape().to_vec(), data)?
        };
        self.push(name, value, op)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a.idx))
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a.idx))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Result<Var> {
        self.map(
            "leaky_relu",
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a.idx, slope),
        )
    }

    /// ELU with `alpha = 1`.
    pub fn elu(&self, a: Var) -> Result<Var> {
        self.map("elu", a, elu, Op::Elu(a.idx))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.map("gelu", a, gelu, Op::Gelu(a.idx))
    }

    /// Row-wise softmax of `a + mask`. Entries whose mask is `-inf` are exactly
    /// zero; a row masked out entirely yields a zero row.
    pub fn softmax_rows(&self, a: Var, mask: Option<&Tensor>) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "softmax_rows")?;
        if let Some(mask) = mask {
            if mask.shape() != [m, n] {
                return Err(SgrError::Shape {
                    op: "softmax_rows",
                    shapes: vec![vec![m, n], mask.shape().to_vec()],
                });
            }
        }
        let value = {
            let t = self.value(a)?;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let logits: Vec<f64> = (0..n)
                    .map(|j| {
                        let x = t.data()[i * n + j];
                        match mask {
                            Some(mk) => x + mk.data()[i * n + j],
                            None => x,
                        }
                    })
                    .collect();
                softmax_into(&logits, &mut out[i * n..(i + 1) * n]);
            }
            Tensor::new(vec![m, n], out)?
        };
        self.push("softmax_rows", value, Op::SoftmaxRows(a.idx))
    }

    /// Normalises each row of `a[m,n]`, then applies `gamma[1,n]`, `beta[1,n]`.
    pub fn layer_norm(&self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "layer_norm")?;
        for p in [gamma, beta] {
            if self.matrix_dims(p, "layer_norm")? != (1, n) {
                return Err(self.shape_err("layer_norm", &[a, gamma, beta]));
            }
        }
        let (value, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let x = nodes[a.idx].value.data();
            let g = nodes[gamma.idx].value.data();
            let b = nodes[beta.idx].value.data();
            let mut xhat = vec![0.0; m * n];
            let mut inv_std = vec![0.0; m];
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &x[i * n..(i + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[i] = inv;
                for j in 0..n {
                    let h = (row[j] - mean) * inv;
                    xhat[i * n + j] = h;
                    out[i * n + j] = g[j] * h + b[j];
                }
            }
            (Tensor::new(vec![m, n], out)?, xhat, inv_std)
        };
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                src: a.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                xhat,
                inv_std,
            },
        )
    }

    // ----- reductions and losses ---------------------------------------------

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.value(a)?.data().iter().sum::<f64>();
        self.push("sum", Tensor::scalar(s), Op::Sum(a.idx))
    }

    /// Summed binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&self, logits: Var, targets: &[f64]) -> Result<Var> {
        let loss = {
            let t = self.value(logits)?;
            if t.len() != targets.len() {
                return Err(SgrError::Shape {
                    op: "bce_with_logits",
                    shapes: vec![t.shape().to_vec(), vec![targets.len()]],
                });
            }
            t.data()
                .iter()
                .zip(targets)
                .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
                .sum::<f64>()
        };
        self.push(
            "bce_with_logits",
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits: logits.idx,
                targets: targets.to_vec(),
            },
        )
    }

    /// Summed categorical cross-entropy of row-softmaxed `logits`; rows whose
    /// target is `None` contribute nothing.
    pub fn cross_entropy_rows(&self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, n) = self.matrix_dims(logits, "cross_entropy_rows")?;
        if targets.len() != m || targets.iter().flatten().any(|&t| t >= n) {
            return Err(SgrError::Shape {
                op: "cross_entropy_rows",
                shapes: vec![vec![m, n], vec![targets.len()]],
            });
        }
        let (loss, probs) = {
            let t = self.value(logits)?;
            let mut probs = vec![0.0; m * n];
            let mut loss = 0.0;
            for i in 0..m {
                let row = t.row(i);
                softmax_into(row, &mut probs[i * n..(i + 1) * n]);
                if let Some(target) = targets[i] {
                    loss += log_sum_exp(row) - row[target];
                }
            }
            (loss, probs)
        };
        self.push(
            "cross_entropy_rows",
            Tensor::scalar(loss),
            Op::CrossEntropyRows {
                logits: logits.idx,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    // ----- backward ------------------------------------------------------------

    /// Propagates the gradient of the scalar `loss` to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[loss.idx].value.len() != 1 {
            return Err(SgrError::NonScalarLoss(nodes[loss.idx].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(Tensor::filled(nodes[loss.idx].value.shape(), 1.0));

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let gd = g.data();
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                    let n = nodes[*b].value.shape()[1];
                    let ga = grad_slot(&mut grads, &nodes, *a);
                    // dA = G · Bᵀ
                    matmul_nt_acc(gd, nodes[*b].value.data(), ga.data_mut(), m, n, k);
                    let gb = grad_slot(&mut grads, &nodes, *b);
                    // dB = Aᵀ · G
                    matmul_tn_acc(nodes[*a].value.data(), gd, gb.data_mut(), m, k, n);
                }
                Op::MatMulNt(a, b) => {
                    let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                    let n = nodes[*b].value.shape()[0];
                    // C = A Bᵀ: dA = G B, dB = Gᵀ A
                    let ga = grad_slot(&mut grads, &nodes, *a);
                    matmul_acc(gd, nodes[*b].value.data(), ga.data_mut(), m, n, k);
                    let gb = grad_slot(&mut grads, &nodes, *b);
                    matmul_tn_acc(gd, nodes[*a].value.data(), gb.data_mut(), m, n, k);
                }
                Op::Add(a, b) => {
                    grad_slot(&mut grads, &nodes, *a).add_assign(&g);
                    grad_slot(&mut grads, &nodes, *b).add_assign(&g);
                }
                Op::Sub(a, b) => {
                    grad_slot(&mut grads, &nodes, *a).add_assign(&g);
                    let gb = grad_slot(&mut grads, &nodes, *b);
                    for (o, v) in gb.data_mut().iter_mut().zip(gd) {
                        *o -= v;
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                    let ga = grad_slot(&mut grads, &nodes, *a);
                    for ((o, gv), bv) in ga.data_mut().iter_mut().zip(gd).zip(vb) {
                        *o += gv * bv;
                    }
                    let gb = grad_slot(&mut grads, &nodes, *b);
                    for ((o, gv), av) in gb.data_mut().iter_mut().zip(gd).zip(va) {
                        *o += gv * av;
                    }
                }
                Op::AddRow(a, row) => {
                    grad_slot(&mut grads, &nodes, *a).add_assign(&g);
                    let n = g.cols();
                    let gr = grad_slot(&mut grads, &nodes, *row);
                    for (idx, v) in gd.iter().enumerate() {
                        gr.data_mut()[idx % n] += v;
                    }
                }
                Op::Scale(a, factor) => {
                    let ga = grad_slot(&mut grads, &nodes, *a);
                    for (o, v) in ga.data_mut().iter_mut().zip(gd) {
                        *o += factor * v;
                    }
                }
                Op::PairSum(a, b) => {
                    let (m, h) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                    let n = nodes[*b].value.shape()[0];
                    let ga = grad_slot(&mut grads, &nodes, *a);
                    for i in 0..m {
                        for j in 0..n {
                            let src = &gd[(i * n + j) * h..(i * n + j + 1) * h];
                            for (o, v) in ga.data_mut()[i * h..(i + 1) * h].iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    }
                    let gb = grad_slot(&mut grads, &nodes, *b);
                    for i in 0..m {
                        for j in 0..n {
                            let src = &gd[(i * n + j) * h..(i * n + j + 1) * h];
                            for (o, v) in gb.data_mut()[j * h..(j + 1) * h].iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    let ga = grad_slot(&mut grads, &nodes, *a);
                    for (o, v) in ga.data_mut().iter_mut().zip(gd) {
                        *o += v;
                    }
                }
                Op::ConcatCols(parts) => {
                    let m = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let c = nodes[*p].value.shape()[1];
                        let gp = grad_slot(&mut grads, &nodes, *p);
                        for r in 0..m {
                            let src = &gd[r * total + offset..r * total + offset + c];
                            for (o, v) in gp.data_mut()[r * c..(r + 1) * c].iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[*p].value.len();
                        let gp = grad_slot(&mut grads, &nodes, *p);
                        for (o, v) in gp.data_mut().iter_mut().zip(&gd[offset..offset + len]) {
                            *o += v;
                        }
                        offset += len;
                    }
                }
                Op::SliceCols { src, start } => {
                    let n = nodes[*src].value.shape()[1];
                    let len = g.cols();
                    let gs = grad_slot(&mut grads, &nodes, *src);
                    for r in 0..g.rows() {
                        for c in 0..len {
                            gs.data_mut()[r * n + start + c] += gd[r * len + c];
                        }
                    }
                }
                Op::SelectRows { src, indices } => {
                    let n = g.cols();
                    let gs = grad_slot(&mut grads, &nodes, *src);
                    for (k, &row) in indices.iter().enumerate() {
                        for c in 0..n {
                            gs.data_mut()[row * n + c] += gd[k * n + c];
                        }
                    }
                }
                Op::ScatterRows { src, indices } => {
                    let n = g.cols();
                    let gs = grad_slot(&mut grads, &nodes, *src);
                    for (k, &row) in indices.iter().enumerate() {
                        for c in 0..n {
                            gs.data_mut()[k * n + c] += gd[row * n + c];
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let ga = grad_slot(&mut grads, &nodes, *a);
                    for ((o, gv), yv) in ga.data_mut().iter_mut().zip(gd).zip(y) {
                        *o += gv * yv * (1.0 - yv);
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let ga = grad_slot(&mut grads, &nodes, *a);
                    for ((o, gv), yv) in ga.data_mut().iter_mut().zip(gd).zip(y) {
                        *o += gv * (1.0 - yv * yv);
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let x = nodes[*a].value.data();
                    let ga = grad_slot(&mut grads, &nodes, *a);
                    for ((o, gv), xv) in ga.data_mut().iter_mut().zip(gd).zip(x) {
                        *o += if *xv > 0.0 { *gv } else { gv * slope };
                    }
                }
                Op::Elu(a) => {
                    let x = nodes[*a].value.data();
                    let y = node.value.data();
                    let ga = grad_slot(&mut grads, &nodes, *a);
                    for (((o, gv), xv), yv) in ga.data_mut().iter_mut().zip(gd).zip(x).zip(y) {
                        *o += if *xv > 0.0 { *gv } else { gv * (yv + 1.0) };
                    }
                }
                Op::Gelu(a) => {
                    let x = nodes[*a].value.data();
                    let ga = grad_slot(&mut grads, &nodes, *a);
                    for ((o, gv), xv) in ga.data_mut().iter_mut().zip(gd).zip(x) {
                        *o += gv * gelu_grad(*xv);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.data();
                    let (m, n) = (g.rows(), g.cols());
                    let ga = grad_slot(&mut grads, &nodes, *a);
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &gd[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            ga.data_mut()[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    src,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (m, n) = (g.rows(), g.cols());
                    let gamma_v = nodes[*gamma].value.data().to_vec();
                    {
                        let gg = grad_slot(&mut grads, &nodes, *gamma);
                        for i in 0..m {
                            for j in 0..n {
                                gg.data_mut()[j] += gd[i * n + j] * xhat[i * n + j];
                            }
                        }
                    }
                    {
                        let gb = grad_slot(&mut grads, &nodes, *beta);
                        for i in 0..m {
                            for j in 0..n {
                                gb.data_mut()[j] += gd[i * n + j];
                            }
                        }
                    }
                    let gs = grad_slot(&mut grads, &nodes, *src);
                    let nf = n as f64;
                    for i in 0..m {
                        let dxhat: Vec<f64> = (0..n).map(|j| gd[i * n + j] * gamma_v[j]).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = (0..n).map(|j| dxhat[j] * xhat[i * n + j]).sum();
                        for j in 0..n {
                            gs.data_mut()[i * n + j] += inv_std[i] / nf
                                * (nf * dxhat[j] - sum_d - xhat[i * n + j] * sum_dx);
                        }
                    }
                }
                Op::Sum(a) => {
                    let s = gd[0];
                    let ga = grad_slot(&mut grads, &nodes, *a);
                    for o in ga.data_mut() {
                        *o += s;
                    }
                }
                Op::BceWithLogits { logits, targets } => {
                    let s = gd[0];
                    let z = nodes[*logits].value.data();
                    let gl = grad_slot(&mut grads, &nodes, *logits);
                    for ((o, zv), yv) in gl.data_mut().iter_mut().zip(z).zip(targets) {
                        *o += s * (sigmoid(*zv) - yv);
                    }
                }
                Op::CrossEntropyRows {
                    logits,
                    targets,
                    probs,
                } => {
                    let s = gd[0];
                    let n = nodes[*logits].value.shape()[1];
                    let gl = grad_slot(&mut grads, &nodes, *logits);
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        for j in 0..n {
                            let onehot = if j == *t { 1.0 } else { 0.0 };
                            gl.data_mut()[i * n + j] += s * (probs[i * n + j] - onehot);
                        }
                    }
                }
            }
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            params,
        })
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Tensor>], nodes: &[Node], idx: usize) -> &'a mut Tensor {
    grads[idx].get_or_insert_with(|| Tensor::zeros(nodes[idx].value.shape()))
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient for a leaf variable; `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// Gradients of every parameter recorded on the tape. Parameters that the
    /// loss does not reach get an explicit zero tensor.
    pub fn param_grads(&self, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        for &(id, idx) in &self.params {
            match &self.grads[idx] {
                Some(g) => out.accumulate(id, g),
                None => out.accumulate(id, &Tensor::zeros(store.get(id).shape())),
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax of `logits` into `out`; `-inf` entries get exactly 0 and an
/// all-`-inf` input gives all zeros.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = if l == f64::NEG_INFINITY { 0.0 } else { (l - max).exp() };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}
