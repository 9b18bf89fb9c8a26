use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const COSINE_EPS: f64 = 1e-8;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, F),
    AddBias(Var, Var),
    Gelu(Var),
    Relu(Var),
    Ln(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
        bias: Var,
    },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MeanRows(Var),
    NarrowCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Stack(Vec<Var>),
    Index(Var, usize),
    Mse(Var, Var),
    Cosine(Var, Var),
}

#[derive(Debug, Clone)]
struct Node<F> {
    value: Vec<F>,
    shape: Vec<usize>,
    op: Op<F>,
    /// Leaf whose gradient is accumulated and reported.
    requires_grad: bool,
    /// Some ancestor (or the node itself) requires a gradient.
    needs_grad: bool,
    grad: Option<Vec<F>>,
}

/// Linear record of the forward computation. Backward replays it in reverse
/// creation order, which is a reverse topological order because every node's
/// inputs are created before it.
#[derive(Debug, Clone, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

/// (rows, cols) view of a tensor: the last axis is the column axis.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / cols.max(1);
    (rows, cols)
}

fn softmax_row<F: Real>(x: &[F], out: &mut [F]) {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

pub fn gelu_scalar<F: Real>(x: F) -> F {
    let k = F::from_f64_lossy(GELU_K);
    let c = F::from_f64_lossy(GELU_C);
    let half = F::from_f64_lossy(0.5);
    half * x * (F::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let k = F::from_f64_lossy(GELU_K);
    let c = F::from_f64_lossy(GELU_C);
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + three * c * x * x)
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, site: &str, value: Vec<F>, shape: Vec<usize>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                site: site.to_string(),
            });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad: false,
            needs_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, tensor: &Tensor<F>, requires_grad: bool) -> Result<Var> {
        if !tensor.is_finite() {
            return Err(Error::NonFinite {
                site: "leaf".into(),
            });
        }
        self.nodes.push(Node {
            value: tensor.data().to_vec(),
            shape: tensor.shape().to_vec(),
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a tensor, honoring its `requires_grad` flag.
    pub fn insert(&mut self, tensor: &Tensor<F>) -> Result<Var> {
        self.leaf(tensor, tensor.requires_grad)
    }

    pub fn constant(&mut self, tensor: &Tensor<F>) -> Result<Var> {
        self.leaf(tensor, false)
    }

    pub fn param(&mut self, tensor: &Tensor<F>) -> Result<Var> {
        self.leaf(tensor, true)
    }

    /// Same value, no gradient path back to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let copy = Node {
            value: node.value.clone(),
            shape: node.shape.clone(),
            op: Op::Leaf,
            requires_grad: false,
            needs_grad: false,
            grad: None,
        };
        self.nodes.push(copy);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, x: Var) -> &[F] {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        &self.nodes[x.0].shape
    }

    pub fn scalar(&self, x: Var) -> F {
        self.nodes[x.0].value[0]
    }

    pub fn grad(&self, x: Var) -> Option<&[F]> {
        self.nodes[x.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Value and gradient of `x` as a standalone tensor.
    pub fn to_tensor(&self, x: Var) -> Tensor<F> {
        let node = &self.nodes[x.0];
        let mut t = Tensor::new(node.shape.clone(), node.value.clone()).expect("tape shapes are valid");
        t.requires_grad = node.requires_grad;
        t.grad = node.grad.clone();
        t
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        self.push("matmul", out, vec![m, n], Op::MatMul(a, b), &[a, b])
    }

    fn zip_with(&mut self, a: Var, b: Var, site: &str, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var> {
        self.same_shape(a, b, site)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(site, out, shape, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", out, shape, Op::Scale(x, s), &[x])
    }

    /// `x[..., c] + b[c]`, the only broadcast supported.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.value(b).len() != cols {
            return Err(Error::dim(format!(
                "add_bias: bias of {} for {cols} columns",
                self.value(b).len()
            )));
        }
        let bias = self.value(b);
        let out = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bias).map(|(&v, &c)| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("add_bias", out, shape, Op::AddBias(x, b), &[x, b])
    }

    /// `x·w + b` for a 2-D `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Elementwise GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push("gelu", out, shape, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.max(F::zero())).collect();
        let shape = self.shape(x).to_vec();
        self.push("relu", out, shape, Op::Relu(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        self.push("ln", out, shape, Op::Ln(x), &[x])
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        let mut out = vec![F::zero(); self.value(x).len()];
        for (row, o) in self.value(x).chunks(cols).zip(out.chunks_mut(cols)) {
            softmax_row(row, o);
        }
        let shape = self.shape(x).to_vec();
        self.push("softmax", out, shape, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        let mut out = vec![F::zero(); self.value(x).len()];
        for (row, o) in self.value(x).chunks(cols).zip(out.chunks_mut(cols)) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            for (o, &v) in o.iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push("log_softmax", out, shape, Op::LogSoftmax(x), &[x])
    }

    /// Per-row normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::dim(format!("layer_norm: affine params must have {cols} entries")));
        }
        let eps = F::from_f64_lossy(LAYER_NORM_EPS);
        let n = F::from_usize(cols).unwrap();
        let mut xhat = vec![F::zero(); rows * cols];
        let mut rstd = vec![F::zero(); rows];
        for ((row, xh), r) in self.value(x).chunks(cols).zip(xhat.chunks_mut(cols)).zip(rstd.iter_mut()) {
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            *r = F::one() / (var + eps).sqrt();
            for (h, &v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * *r;
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let out = xhat
            .chunks(cols)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((&h, &g), &b)| h * g + b))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            out,
            shape,
            Op::LayerNorm {
                x,
                gain,
                xhat,
                rstd,
                bias,
            },
            &[x, gain, bias],
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim(format!("transpose needs a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        self.push("transpose", out, vec![c, r], Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        self.push("reshape", out, shape.to_vec(), Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push("sum", vec![s], vec![1], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = F::from_usize(self.value(x).len()).unwrap();
        let s = self.value(x).iter().copied().sum::<F>() / n;
        self.push("mean", vec![s], vec![1], Op::Mean(x), &[x])
    }

    /// Column sums, shape `[1, cols]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        let mut out = vec![F::zero(); cols];
        for row in self.value(x).chunks(cols) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        self.push("sum_rows", out, vec![1, cols], Op::SumRows(x), &[x])
    }

    /// Column means (token mean-pooling), shape `[1, cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        let inv = F::one() / F::from_usize(rows).unwrap();
        let mut out = vec![F::zero(); cols];
        for row in self.value(x).chunks(cols) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        for o in &mut out {
            *o = *o * inv;
        }
        self.push("mean_rows", out, vec![1, cols], Op::MeanRows(x), &[x])
    }

    /// Columns `start..start+len` of a matrix.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(Error::dim(format!("narrow_cols {start}+{len} of {s:?}")));
        }
        let cols = s[1];
        let rows = s[0];
        let out = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        self.push("narrow_cols", out, vec![rows, len], Op::NarrowCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.shape(p)[0],
            None => return Err(Error::dim("concat_cols of nothing")),
        };
        if parts.iter().any(|&p| self.shape(p).len() != 2 || self.shape(p)[0] != rows) {
            return Err(Error::dim("concat_cols: row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        self.push("concat_cols", out, vec![rows, total], Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => rows_cols(self.shape(p)).1,
            None => return Err(Error::dim("concat_rows of nothing")),
        };
        if parts.iter().any(|&p| self.shape(p).len() != 2 || self.shape(p)[1] != cols) {
            return Err(Error::dim("concat_rows: column counts differ"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rows = out.len() / cols;
        self.push("concat_rows", out, vec![rows, cols], Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Gathers scalars into a vector of shape `[n]`.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        if scalars.is_empty() || scalars.iter().any(|&s| self.value(s).len() != 1) {
            return Err(Error::dim("stack expects one or more scalars"));
        }
        let out = scalars.iter().map(|&s| self.value(s)[0]).collect();
        self.push("stack", out, vec![scalars.len()], Op::Stack(scalars.to_vec()), scalars)
    }

    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let v = *self
            .value(x)
            .get(i)
            .ok_or_else(|| Error::dim(format!("index {i} out of {}", self.value(x).len())))?;
        self.push("index", vec![v], vec![1], Op::Index(x, i), &[x])
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse_loss")?;
        let n = F::from_usize(self.value(a).len()).unwrap();
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<F>()
            / n;
        self.push("mse_loss", vec![s], vec![1], Op::Mse(a, b), &[a, b])
    }

    /// Mean over rows of `1 - cos(a_t, b_t)`.
    pub fn cosine_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine_loss")?;
        let (rows, cols) = rows_cols(self.shape(a));
        let eps = F::from_f64_lossy(COSINE_EPS);
        let mut total = F::zero();
        for (ra, rb) in self.value(a).chunks(cols).zip(self.value(b).chunks(cols)) {
            let (dot, na, nb) = dot_norms(ra, rb);
            total = total + (F::one() - dot / (na.max(eps) * nb.max(eps)));
        }
        let loss = total / F::from_usize(rows).unwrap();
        self.push("cosine_loss", vec![loss], vec![1], Op::Cosine(a, b), &[a, b])
    }

    /// Accumulates d(loss)/d(leaf) into every `requires_grad` leaf reachable
    /// from `loss`. Gradients add up across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut adj: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if self.nodes[i].requires_grad {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a = *a + v),
                    None => node.grad = Some(g.clone()),
                }
            }
            self.propagate(i, &g, &mut adj);
        }
        for n in &self.nodes {
            if let Some(g) = &n.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        site: "backward".into(),
                    });
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], adj: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let acc = |adj: &mut [Option<Vec<F>>], v: Var, f: &mut dyn FnMut(&mut [F])| {
            if nodes[v.0].needs_grad {
                let len = nodes[v.0].value.len();
                f(adj[v.0].get_or_insert_with(|| vec![F::zero(); len]));
            }
        };
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(adj, *a, &mut |ga| F::gemm(m, n, k, g, false, bv, true, ga, true));
                acc(adj, *b, &mut |gb| F::gemm(k, m, n, av, true, g, false, gb, true));
            }
            Op::Add(a, b) => {
                acc(adj, *a, &mut |ga| add_into(ga, g));
                acc(adj, *b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(adj, *a, &mut |ga| add_into(ga, g));
                acc(adj, *b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, &v)| *o = *o - v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(adj, *a, &mut |ga| {
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o = *o + gv * y;
                    }
                });
                acc(adj, *b, &mut |gb| {
                    for ((o, &gv), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o = *o + gv * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(adj, *a, &mut |ga| {
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o = *o + gv / y;
                    }
                });
                acc(adj, *b, &mut |gb| {
                    for (((o, &gv), &x), &y) in gb.iter_mut().zip(g).zip(av).zip(bv) {
                        *o = *o - gv * x / (y * y);
                    }
                });
            }
            Op::Scale(x, s) => {
                acc(adj, *x, &mut |gx| {
                    for (o, &gv) in gx.iter_mut().zip(g) {
                        *o = *o + gv * *s;
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(adj, *x, &mut |gx| add_into(gx, g));
                let cols = nodes[b.0].value.len();
                acc(adj, *b, &mut |gb| {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                acc(adj, *x, &mut |gx| {
                    for ((o, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *o = *o + gv * gelu_grad(v);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = &nodes[x.0].value;
                acc(adj, *x, &mut |gx| {
                    for ((o, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > F::zero() {
                            *o = *o + gv;
                        }
                    }
                });
            }
            Op::Ln(x) => {
                let xv = &nodes[x.0].value;
                acc(adj, *x, &mut |gx| {
                    for ((o, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *o = *o + gv / v;
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (_, cols) = rows_cols(&node.shape);
                acc(adj, *x, &mut |gx| {
                    for ((gr, yr), or) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((o, &gv), &yv) in or.iter_mut().zip(gr).zip(yr) {
                            *o = *o + yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let (_, cols) = rows_cols(&node.shape);
                acc(adj, *x, &mut |gx| {
                    for ((gr, yr), or) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let gsum: F = gr.iter().copied().sum();
                        for ((o, &gv), &lp) in or.iter_mut().zip(gr).zip(yr) {
                            *o = *o + gv - lp.exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                xhat,
                rstd,
                bias,
            } => {
                let cols = nodes[gain.0].value.len();
                let gv = &nodes[gain.0].value;
                let n = F::from_usize(cols).unwrap();
                acc(adj, *gain, &mut |gg| {
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((o, &a), &h) in gg.iter_mut().zip(gr).zip(hr) {
                            *o = *o + a * h;
                        }
                    }
                });
                acc(adj, *bias, &mut |gb| {
                    for gr in g.chunks(cols) {
                        add_into(gb, gr);
                    }
                });
                acc(adj, *x, &mut |gx| {
                    let mut dxhat = vec![F::zero(); cols];
                    for (((gr, hr), or), &r) in g
                        .chunks(cols)
                        .zip(xhat.chunks(cols))
                        .zip(gx.chunks_mut(cols))
                        .zip(rstd)
                    {
                        for ((d, &a), &w) in dxhat.iter_mut().zip(gr).zip(gv) {
                            *d = a * w;
                        }
                        let mean_d = dxhat.iter().copied().sum::<F>() / n;
                        let mean_dh = dxhat.iter().zip(hr).map(|(&d, &h)| d * h).sum::<F>() / n;
                        for ((o, &d), &h) in or.iter_mut().zip(&dxhat).zip(hr) {
                            *o = *o + r * (d - mean_d - h * mean_dh);
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                acc(adj, *x, &mut |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j] + g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(adj, *x, &mut |gx| add_into(gx, g)),
            Op::Sum(x) => acc(adj, *x, &mut |gx| gx.iter_mut().for_each(|o| *o = *o + g[0])),
            Op::Mean(x) => {
                let inv = g[0] / F::from_usize(nodes[x.0].value.len()).unwrap();
                acc(adj, *x, &mut |gx| gx.iter_mut().for_each(|o| *o = *o + inv));
            }
            Op::SumRows(x) | Op::MeanRows(x) => {
                let (rows, cols) = rows_cols(&nodes[x.0].shape);
                let s = if matches!(node.op, Op::MeanRows(_)) {
                    F::one() / F::from_usize(rows).unwrap()
                } else {
                    F::one()
                };
                acc(adj, *x, &mut |gx| {
                    for row in gx.chunks_mut(cols) {
                        for (o, &gv) in row.iter_mut().zip(g) {
                            *o = *o + gv * s;
                        }
                    }
                });
            }
            Op::NarrowCols { x, start } => {
                let cols = nodes[x.0].shape[1];
                let len = node.shape[1];
                acc(adj, *x, &mut |gx| {
                    for (or, gr) in gx.chunks_mut(cols).zip(g.chunks(len)) {
                        add_into(&mut or[*start..*start + len], gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p.0].shape[1];
                    acc(adj, p, &mut |gp| {
                        for (or, gr) in gp.chunks_mut(c).zip(g.chunks(total)) {
                            add_into(or, &gr[offset..offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    acc(adj, p, &mut |gp| add_into(gp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Stack(scalars) => {
                for (k, &s) in scalars.iter().enumerate() {
                    acc(adj, s, &mut |gs| gs[0] = gs[0] + g[k]);
                }
            }
            Op::Index(x, k) => acc(adj, *x, &mut |gx| gx[*k] = gx[*k] + g[0]),
            Op::Mse(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let s = F::from_f64_lossy(2.0) * g[0] / F::from_usize(av.len()).unwrap();
                acc(adj, *a, &mut |ga| {
                    for ((o, &x), &y) in ga.iter_mut().zip(av).zip(bv) {
                        *o = *o + s * (x - y);
                    }
                });
                acc(adj, *b, &mut |gb| {
                    for ((o, &x), &y) in gb.iter_mut().zip(av).zip(bv) {
                        *o = *o - s * (x - y);
                    }
                });
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (rows, cols) = rows_cols(&nodes[a.0].shape);
                let eps = F::from_f64_lossy(COSINE_EPS);
                let s = -g[0] / F::from_usize(rows).unwrap();
                // cos = dot / (|x|' |y|') with |.|' = max(|.|, eps);
                // d cos / dx = y / D - cos * x / |x|^2 while |x| > eps.
                let grad_wrt = |x: &[F], y: &[F], out: &mut [F]| {
                    for ((xr, yr), or) in x.chunks(cols).zip(y.chunks(cols)).zip(out.chunks_mut(cols)) {
                        let (dot, nx, ny) = dot_norms(xr, yr);
                        let d = nx.max(eps) * ny.max(eps);
                        let cos = dot / d;
                        let radial = if nx > eps { cos / (nx * nx) } else { F::zero() };
                        for ((o, &xv), &yv) in or.iter_mut().zip(xr).zip(yr) {
                            *o = *o + s * (yv / d - radial * xv);
                        }
                    }
                };
                acc(adj, *a, &mut |ga| grad_wrt(av, bv, ga));
                acc(adj, *b, &mut |gb| grad_wrt(bv, av, gb));
            }
        }
    }
}

fn dot_norms<F: Real>(a: &[F], b: &[F]) -> (F, F, F) {
    let mut dot = F::zero();
    let mut na = F::zero();
    let mut nb = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    (dot, na.sqrt(), nb.sqrt())
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o = *o + v;
    }
}
