//! Wengert-list reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value and whatever
//! it needs for the backward pass. Nodes only ever reference earlier nodes,
//! so a reverse sweep over the list is a valid topological order.

use std::sync::Arc;

use super::{log_sum_exp, softmax_row, ResamplePlan, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    GatherRows {
        table: Var,
        index: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Resample {
        x: Var,
        plan: Arc<ResamplePlan>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDiv {
        student: Var,
        teacher_probs: Vec<f64>,
        student_probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for one backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` means the root does not depend on `v` (gradient identically zero).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(contract(format!(
            "{what}: expected a matrix, got shape {s:?}"
        ))),
    }
}

/// `c = a * b + beta * c` for strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    // SAFETY: the assertions above keep every strided access inside the
    // slices, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(contract(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| f(*x)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if self.value(bias).numel() != c {
            return Err(contract(format!(
                "add_row: bias has {} values for {c} columns",
                self.value(bias).numel()
            )));
        }
        let vb = self.value(bias).data();
        let va = self.value(a);
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(vb) {
                *x += b;
            }
        }
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, bias]);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = shape2(self.value(a), "matmul lhs")?;
        let (k2, n) = shape2(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(contract(format!(
                "matmul: inner extents {k} and {k2} differ"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = shape2(self.value(a), "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, Op::Exp(a), f64::exp);
        if !self.value(v).all_finite() {
            return Err(Error::NonFinite("exp overflow".into()));
        }
        Ok(v)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::NonFinite("log of a non-positive value".into()));
        }
        Ok(self.map(a, Op::Log(a), f64::ln))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), gelu)
    }

    /// Normalises each row over the trailing axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(contract(
                "layer_norm: affine parameters must match row width",
            ));
        }
        let vx = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), out);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = super::softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Row softmax restricted to entries where `mask` is true; masked entries
    /// are exactly zero in the output and receive exactly zero gradient.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let va = self.value(a);
        if mask.len() != va.numel() {
            return Err(contract("masked_softmax: mask size differs from input"));
        }
        let c = va.cols();
        let mut out = vec![0.0; va.numel()];
        let mut kept = Vec::with_capacity(c);
        for r in 0..va.rows() {
            let row = va.row(r);
            let m = &mask[r * c..(r + 1) * c];
            kept.clear();
            kept.extend(row.iter().zip(m).filter(|(_, &keep)| keep).map(|(v, _)| *v));
            if kept.is_empty() {
                return Err(contract(format!("masked_softmax: row {r} fully masked")));
            }
            let lse = log_sum_exp(&kept);
            for j in 0..c {
                if m[j] {
                    out[r * c + j] = (row[j] - lse).exp();
                }
            }
        }
        let out = Tensor::from_parts(va.shape().to_vec(), out);
        let rg = self.rg(&[a]);
        // Masked entries are zero in the output, so the ordinary softmax
        // backward already yields zero gradient for them.
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Selects rows of a `[R x C]` table.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (r, c) = shape2(vt, "gather_rows")?;
        if index.is_empty() {
            return Err(contract("gather_rows: empty index"));
        }
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(Error::Index { index: i, bound: r });
            }
            out.extend_from_slice(vt.row(i));
        }
        let out = Tensor::from_parts(vec![index.len(), c], out);
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = shape2(self.value(x), "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(contract(format!(
                "slice_cols: [{start}, {}) outside {c}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![r, len], out),
            Op::SliceCols { x, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| contract("concat_cols: no inputs"))?;
        let (r, _) = shape2(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = shape2(self.value(p), "concat_cols")?;
            if pr != r {
                return Err(contract("concat_cols: row counts differ"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![r, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| contract("concat_rows: no inputs"))?;
        let (_, c) = shape2(self.value(first), "concat_rows")?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = shape2(self.value(p), "concat_rows")?;
            if pc != c {
                return Err(contract("concat_rows: column counts differ"));
            }
            rows += pr;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], out),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Spatial resampling of a `[cells x channels]` grid.
    pub fn resample(&mut self, x: Var, plan: &Arc<ResamplePlan>) -> Result<Var> {
        let (cells, ch) = shape2(self.value(x), "resample")?;
        if cells != plan.from().area() {
            return Err(contract(format!(
                "resample: input has {cells} cells, plan expects {}",
                plan.from().area()
            )));
        }
        let out = plan.apply(self.value(x).data(), ch);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![plan.to().area(), ch], out),
            Op::Resample {
                x,
                plan: Arc::clone(plan),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean squared difference of two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (n, v) = shape2(vl, "softmax_cross_entropy")?;
        if targets.len() != n {
            return Err(contract(format!(
                "softmax_cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                index: bad,
                bound: v,
            });
        }
        if !vl.all_finite() {
            return Err(Error::NonFinite("cross-entropy logits".into()));
        }
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = vl.row(i);
            total += log_sum_exp(row) - row[t];
            softmax_row(row, &mut probs[i * v..(i + 1) * v]);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean over rows of `KL(softmax(teacher) || softmax(student))`.
    /// The teacher side is detached: it never receives gradient.
    pub fn kl_divergence(&mut self, teacher: Var, student: Var) -> Result<Var> {
        self.same_shape(teacher, student, "kl_divergence")?;
        let vt = self.value(teacher);
        let vs = self.value(student);
        let (n, v) = shape2(vs, "kl_divergence")?;
        if !vt.all_finite() || !vs.all_finite() {
            return Err(Error::NonFinite("kl-divergence logits".into()));
        }
        let mut teacher_probs = vec![0.0; n * v];
        let mut student_probs = vec![0.0; n * v];
        let mut total = 0.0;
        for i in 0..n {
            let (tr, sr) = (vt.row(i), vs.row(i));
            let (lt, ls) = (log_sum_exp(tr), log_sum_exp(sr));
            let mut row_kl = 0.0;
            for j in 0..v {
                let log_p = tr[j] - lt;
                let log_q = sr[j] - ls;
                let p = log_p.exp();
                teacher_probs[i * v + j] = p;
                student_probs[i * v + j] = log_q.exp();
                if p > 0.0 {
                    row_kl += p * (log_p - log_q);
                }
            }
            // round-off can leave near-identical rows slightly negative
            total += row_kl.max(0.0);
        }
        let rg = self.rg(&[student]);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::KlDiv {
                student,
                teacher_probs,
                student_probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `root`. Consumes the tape.
    pub fn backward(self, root: Var) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(contract(format!(
                "backward: root has shape {:?}, expected a scalar",
                self.value(root).shape()
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        fn acc<'a>(
            grads: &'a mut [Option<Vec<f64>>],
            nodes: &[Node],
            v: Var,
        ) -> Option<&'a mut [f64]> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let n = nodes[v.0].value.numel();
            Some(
                grads[v.0]
                    .get_or_insert_with(|| vec![0.0; n])
                    .as_mut_slice(),
            )
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if let Some(ga) = acc(&mut grads, &nodes, v) {
                            ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *b) {
                        gb.iter_mut().zip(&g).for_each(|(x, y)| *x -= y);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for ((x, y), w) in ga.iter_mut().zip(&g).zip(vb) {
                            *x += y * w;
                        }
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *b) {
                        for ((x, y), w) in gb.iter_mut().zip(&g).zip(va) {
                            *x += y * w;
                        }
                    }
                }
                Op::AddRow(a, bias) => {
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *bias) {
                        let c = gb.len();
                        for row in g.chunks(c) {
                            gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                Op::Scale(a, s) => {
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += s * y);
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = shape2(&nodes[a.0].value, "matmul")?;
                    let n = nodes[b.0].value.cols();
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        // dA = G B^T
                        gemm(m, n, k, &g, (n, 1), vb, (1, n), ga, 1.0);
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *b) {
                        // dB = A^T G
                        gemm(k, m, n, va, (1, k), &g, (n, 1), gb, 1.0);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = shape2(&nodes[a.0].value, "transpose")?;
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for x in 0..r {
                            for y in 0..c {
                                ga[x * c + y] += g[y * r + x];
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                }
                Op::Exp(a) => {
                    let out = node.value.data();
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for ((x, y), o) in ga.iter_mut().zip(&g).zip(out) {
                            *x += y * o;
                        }
                    }
                }
                Op::Log(a) => {
                    let inp = nodes[a.0].value.data();
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for ((x, y), v) in ga.iter_mut().zip(&g).zip(inp) {
                            *x += y / v;
                        }
                    }
                }
                Op::Relu(a) => {
                    let inp = nodes[a.0].value.data();
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for ((x, y), v) in ga.iter_mut().zip(&g).zip(inp) {
                            if *v > 0.0 {
                                *x += y;
                            }
                        }
                    }
                }
                Op::Gelu(a) => {
                    let inp = nodes[a.0].value.data();
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for ((x, y), v) in ga.iter_mut().zip(&g).zip(inp) {
                            *x += y * gelu_grad(*v);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let d = nodes[gamma.0].value.numel();
                    let gm = nodes[gamma.0].value.data();
                    if let Some(gg) = acc(&mut grads, &nodes, *gamma) {
                        for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] += row_g[j] * row_h[j];
                            }
                        }
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *beta) {
                        for row_g in g.chunks(d) {
                            gb.iter_mut().zip(row_g).for_each(|(a, b)| *a += b);
                        }
                    }
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        let mut dh = vec![0.0; d];
                        for (r, (row_g, row_h)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                            let mut mean_dh = 0.0;
                            let mut mean_dh_h = 0.0;
                            for j in 0..d {
                                dh[j] = row_g[j] * gm[j];
                                mean_dh += dh[j];
                                mean_dh_h += dh[j] * row_h[j];
                            }
                            mean_dh /= d as f64;
                            mean_dh_h /= d as f64;
                            let rs = rstd[r];
                            for j in 0..d {
                                gx[r * d + j] += rs * (dh[j] - mean_dh - row_h[j] * mean_dh_h);
                            }
                        }
                    }
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let c = node.value.cols();
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for ((gr, yr), dst) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                            for j in 0..c {
                                dst[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::GatherRows { table, index } => {
                    let c = nodes[table.0].value.cols();
                    if let Some(gt) = acc(&mut grads, &nodes, *table) {
                        for (k, &row) in index.iter().enumerate() {
                            let src = &g[k * c..(k + 1) * c];
                            gt[row * c..(row + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    let c = nodes[x.0].value.cols();
                    let len = node.value.cols();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for (r, src) in g.chunks(len).enumerate() {
                            gx[r * c + start..r * c + start + len]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p.0].value.cols();
                        if let Some(gp) = acc(&mut grads, &nodes, p) {
                            for (r, row) in g.chunks(total).enumerate() {
                                gp[r * w..(r + 1) * w]
                                    .iter_mut()
                                    .zip(&row[offset..offset + w])
                                    .for_each(|(a, b)| *a += b);
                            }
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = nodes[p.0].value.numel();
                        if let Some(gp) = acc(&mut grads, &nodes, p) {
                            gp.iter_mut()
                                .zip(&g[offset..offset + n])
                                .for_each(|(a, b)| *a += b);
                        }
                        offset += n;
                    }
                }
                Op::Resample { x, plan } => {
                    let ch = node.value.cols();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        plan.apply_adjoint(&g, ch, gx);
                    }
                }
                Op::Sum(a) => {
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        ga.iter_mut().for_each(|x| *x += g[0]);
                    }
                }
                Op::Mean(a) => {
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        let s = g[0] / ga.len() as f64;
                        ga.iter_mut().for_each(|x| *x += s);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let v = nodes[logits.0].value.cols();
                    let scale = g[0] / targets.len() as f64;
                    if let Some(gl) = acc(&mut grads, &nodes, *logits) {
                        for (i, &t) in targets.iter().enumerate() {
                            for j in 0..v {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                gl[i * v + j] += scale * (probs[i * v + j] - onehot);
                            }
                        }
                    }
                }
                Op::KlDiv {
                    student,
                    teacher_probs,
                    student_probs,
                } => {
                    let n = nodes[student.0].value.rows();
                    let scale = g[0] / n as f64;
                    if let Some(gs) = acc(&mut grads, &nodes, *student) {
                        for ((x, q), p) in gs.iter_mut().zip(student_probs).zip(teacher_probs) {
                            *x += scale * (q - p);
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }

        let mut out = Vec::with_capacity(nodes.len());
        for (node, g) in nodes.into_iter().zip(grads) {
            out.push(match g {
                Some(g) => {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite("gradient".into()));
                    }
                    Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                }
                None => None,
            });
        }
        Ok(Gradients { grads: out })
    }
}
