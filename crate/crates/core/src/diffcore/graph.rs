use rand::Rng as _;
use rand_distr::StandardNormal;

use super::tensor::{matmul, matmul_nt, matmul_tn};
use super::{DiffError, Tensor};
use crate::seed;

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Sigmoid(NodeId),
    LeakyRelu(NodeId, f64),
    Softplus(NodeId),
    Log(NodeId),
    Square(NodeId),
    Abs(NodeId),
    Clamp(NodeId, f64, f64),
    Mean(NodeId),
    Sum(NodeId),
    MeanCols(NodeId),
    SumCols(NodeId),
    TileCols(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols(NodeId, usize),
    Dropout(NodeId, Vec<f64>),
    Reparam {
        mu: NodeId,
        sigma: NodeId,
        eps: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-use reverse-mode tape. Nodes are appended in evaluation order, so
/// the node list is already topologically sorted.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<NodeId, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: name });
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            other => inputs(other).iter().any(|id| self.nodes[id.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Constant input; no gradient is accumulated for it.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId, DiffError> {
        self.push(Op::Leaf, value, "input")
    }

    /// Trainable leaf; `backward` populates its adjoint.
    pub fn param(&mut self, value: Tensor) -> Result<NodeId, DiffError> {
        let id = self.push(Op::Leaf, value, "param")?;
        self.nodes[id.0].needs_grad = true;
        Ok(id)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Adjoint of `id` after [`Graph::backward`]; `None` if the node does not
    /// influence the loss through a trainable path.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), DiffError> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa != sb {
            return Err(DiffError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (n, k) = self.val(a).dims2("matmul")?;
        let (k2, m) = self.val(b).dims2("matmul")?;
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: vec![n, k],
                right: vec![k2, m],
            });
        }
        let out = matmul(self.val(a).data(), self.val(b).data(), n, k, m);
        self.push(Op::MatMul(a, b), Tensor::matrix(n, m, out)?, "matmul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.same_shape("add", a, b)?;
        let v = self.val(a).zip(self.val(b), |x, y| x + y);
        self.push(Op::Add(a, b), v, "add")
    }

    /// Adds a `[1, m]` row to every row of an `[n, m]` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, DiffError> {
        let (n, m) = self.val(a).dims2("add_row")?;
        let (r, m2) = self.val(row).dims2("add_row")?;
        if r != 1 || m != m2 {
            return Err(DiffError::ShapeMismatch {
                op: "add_row",
                left: vec![n, m],
                right: vec![r, m2],
            });
        }
        let bias = self.val(row).data();
        let mut out = self.val(a).data().to_vec();
        for chunk in out.chunks_mut(m) {
            for (o, b) in chunk.iter_mut().zip(bias) {
                *o += b;
            }
        }
        self.push(Op::AddRow(a, row), Tensor::matrix(n, m, out)?, "add_row")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.same_shape("sub", a, b)?;
        let v = self.val(a).zip(self.val(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.same_shape("mul", a, b)?;
        let v = self.val(a).zip(self.val(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v, "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, DiffError> {
        let v = self.val(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v, "scale")
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> Result<NodeId, DiffError> {
        let v = self.val(a).map(|x| x + c);
        self.push(Op::Offset(a), v, "offset")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let v = self.val(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v, "sigmoid")
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId, DiffError> {
        let v = self.val(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(a, slope), v, "leaky_relu")
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let v = self.val(a).map(softplus);
        self.push(Op::Softplus(a), v, "softplus")
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let v = self.val(a).map(f64::ln);
        self.push(Op::Log(a), v, "log")
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let v = self.val(a).map(|x| x * x);
        self.push(Op::Square(a), v, "square")
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let v = self.val(a).map(f64::abs);
        self.push(Op::Abs(a), v, "abs")
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, DiffError> {
        let v = self.val(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), v, "clamp")
    }

    /// Mean of all entries, as a `[1, 1]` tensor.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let t = self.val(a);
        let v = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(v), "mean")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let v = self.val(a).data().iter().sum::<f64>();
        self.push(Op::Sum(a), Tensor::scalar(v), "sum")
    }

    /// Row-wise mean: `[n, m] -> [n, 1]`.
    pub fn mean_cols(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let (n, m) = self.val(a).dims2("mean_cols")?;
        let out = self
            .val(a)
            .data()
            .chunks(m)
            .map(|r| r.iter().sum::<f64>() / m as f64)
            .collect();
        self.push(Op::MeanCols(a), Tensor::matrix(n, 1, out)?, "mean_cols")
    }

    /// Row-wise sum: `[n, m] -> [n, 1]`.
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let (n, m) = self.val(a).dims2("sum_cols")?;
        let out = self
            .val(a)
            .data()
            .chunks(m)
            .map(|r| r.iter().sum::<f64>())
            .collect();
        self.push(Op::SumCols(a), Tensor::matrix(n, 1, out)?, "sum_cols")
    }

    /// Repeats an `[n, 1]` column `m` times: `[n, 1] -> [n, m]`.
    pub fn tile_cols(&mut self, a: NodeId, m: usize) -> Result<NodeId, DiffError> {
        let (n, c) = self.val(a).dims2("tile_cols")?;
        if c != 1 || m == 0 {
            return Err(DiffError::ShapeMismatch {
                op: "tile_cols",
                left: vec![n, c],
                right: vec![n, m],
            });
        }
        let out = self
            .val(a)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, m))
            .collect();
        self.push(Op::TileCols(a), Tensor::matrix(n, m, out)?, "tile_cols")
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (n, ca) = self.val(a).dims2("concat_cols")?;
        let (n2, cb) = self.val(b).dims2("concat_cols")?;
        if n != n2 {
            return Err(DiffError::ShapeMismatch {
                op: "concat_cols",
                left: vec![n, ca],
                right: vec![n2, cb],
            });
        }
        let mut out = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            out.extend_from_slice(self.val(a).row(r));
            out.extend_from_slice(self.val(b).row(r));
        }
        self.push(
            Op::ConcatCols(a, b),
            Tensor::matrix(n, ca + cb, out)?,
            "concat_cols",
        )
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, DiffError> {
        let (n, c) = self.val(a).dims2("slice_cols")?;
        if start >= end || end > c {
            return Err(DiffError::ShapeMismatch {
                op: "slice_cols",
                left: vec![n, c],
                right: vec![start, end],
            });
        }
        let mut out = Vec::with_capacity(n * (end - start));
        for r in 0..n {
            out.extend_from_slice(&self.val(a).row(r)[start..end]);
        }
        self.push(
            Op::SliceCols(a, start),
            Tensor::matrix(n, end - start, out)?,
            "slice_cols",
        )
    }

    /// Inverted dropout: surviving entries are scaled by `1/(1-rate)`. The mask
    /// is a pure function of `seed` and the input shape.
    pub fn dropout(&mut self, a: NodeId, rate: f64, seed: u64) -> Result<NodeId, DiffError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(DiffError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let mut rng = seed::rng(seed);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.val(a).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mut v = self.val(a).clone();
        for (x, m) in v.data_mut().iter_mut().zip(&mask) {
            *x *= m;
        }
        self.push(Op::Dropout(a, mask), v, "dropout")
    }

    /// `mu + eps * sigma` with `eps ~ N(0, 1)` drawn from `seed`, one draw per
    /// entry. `sigma` must be non-negative.
    pub fn gaussian_reparam(
        &mut self,
        mu: NodeId,
        sigma: NodeId,
        seed: u64,
    ) -> Result<NodeId, DiffError> {
        self.same_shape("gaussian_reparam", mu, sigma)?;
        if self.val(sigma).data().iter().any(|&s| s < 0.0) {
            return Err(DiffError::InvalidArgument(
                "gaussian_reparam: sigma must be >= 0".into(),
            ));
        }
        let mut rng = seed::rng(seed);
        let eps: Vec<f64> = (0..self.val(mu).len())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let mut v = self.val(mu).clone();
        for ((x, s), e) in v.data_mut().iter_mut().zip(self.val(sigma).data()).zip(&eps) {
            *x += e * s;
        }
        self.push(Op::Reparam { mu, sigma, eps }, v, "gaussian_reparam")
    }

    /// The standard-normal draws used by a reparameterization node.
    pub fn reparam_noise(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].op {
            Op::Reparam { eps, .. } => Some(eps),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar loss. Every node is visited once, in
    /// reverse creation order.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), DiffError> {
        let lv = self.val(loss);
        if !lv.is_scalar() {
            return Err(DiffError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(lv.map(|_| 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                grads[i] = Some(g);
                continue;
            }
            let node = &self.nodes[i];
            let mut send = |id: NodeId, delta: Tensor| {
                if !self.nodes[id.0].needs_grad {
                    return;
                }
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (n, k) = (av.rows(), av.cols());
                    let m = bv.cols();
                    if self.nodes[a.0].needs_grad {
                        let da = matmul_nt(g.data(), bv.data(), n, k, m);
                        send(*a, Tensor::matrix(n, k, da)?);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = matmul_tn(av.data(), g.data(), n, k, m);
                        send(*b, Tensor::matrix(k, m, db)?);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.clone());
                }
                Op::AddRow(a, row) => {
                    let m = g.cols();
                    let mut db = vec![0.0; m];
                    for chunk in g.data().chunks(m) {
                        for (d, x) in db.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    send(*row, Tensor::matrix(1, m, db)?);
                    send(*a, g.clone());
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|x| -x));
                    send(*a, g.clone());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    send(*a, g.zip(bv, |x, y| x * y));
                    send(*b, g.zip(av, |x, y| x * y));
                }
                Op::Scale(a, c) => send(*a, g.map(|x| x * c)),
                Op::Offset(a) => send(*a, g.clone()),
                Op::Sigmoid(a) => {
                    let out = &node.value;
                    send(*a, g.zip(out, |x, s| x * s * (1.0 - s)));
                }
                Op::LeakyRelu(a, slope) => {
                    let input = &self.nodes[a.0].value;
                    send(*a, g.zip(input, |x, z| if z > 0.0 { x } else { x * slope }));
                }
                Op::Softplus(a) => {
                    let input = &self.nodes[a.0].value;
                    send(*a, g.zip(input, |x, z| x * sigmoid(z)));
                }
                Op::Log(a) => {
                    let input = &self.nodes[a.0].value;
                    send(*a, g.zip(input, |x, z| x / z));
                }
                Op::Square(a) => {
                    let input = &self.nodes[a.0].value;
                    send(*a, g.zip(input, |x, z| 2.0 * x * z));
                }
                Op::Abs(a) => {
                    let input = &self.nodes[a.0].value;
                    send(
                        *a,
                        g.zip(input, |x, z| {
                            if z > 0.0 {
                                x
                            } else if z < 0.0 {
                                -x
                            } else {
                                0.0
                            }
                        }),
                    );
                }
                Op::Clamp(a, lo, hi) => {
                    let input = &self.nodes[a.0].value;
                    let (lo, hi) = (*lo, *hi);
                    send(
                        *a,
                        g.zip(input, |x, z| if z >= lo && z <= hi { x } else { 0.0 }),
                    );
                }
                Op::Mean(a) => {
                    let input = &self.nodes[a.0].value;
                    let d = g.item() / input.len() as f64;
                    send(*a, input.map(|_| d));
                }
                Op::Sum(a) => {
                    let input = &self.nodes[a.0].value;
                    let d = g.item();
                    send(*a, input.map(|_| d));
                }
                Op::MeanCols(a) | Op::SumCols(a) => {
                    let input = &self.nodes[a.0].value;
                    let m = input.cols();
                    let scale = if matches!(node.op, Op::MeanCols(_)) {
                        1.0 / m as f64
                    } else {
                        1.0
                    };
                    let out: Vec<f64> = g
                        .data()
                        .iter()
                        .flat_map(|&x| std::iter::repeat_n(x * scale, m))
                        .collect();
                    send(*a, Tensor::matrix(input.rows(), m, out)?);
                }
                Op::TileCols(a) => {
                    let m = g.cols();
                    let out: Vec<f64> = g.data().chunks(m).map(|r| r.iter().sum()).collect();
                    send(*a, Tensor::matrix(g.rows(), 1, out)?);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[a.0].value.cols();
                    let cb = self.nodes[b.0].value.cols();
                    let n = g.rows();
                    let mut da = Vec::with_capacity(n * ca);
                    let mut db = Vec::with_capacity(n * cb);
                    for r in 0..n {
                        let row = g.row(r);
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    send(*a, Tensor::matrix(n, ca, da)?);
                    send(*b, Tensor::matrix(n, cb, db)?);
                }
                Op::SliceCols(a, start) => {
                    let input = &self.nodes[a.0].value;
                    let (n, c) = (input.rows(), input.cols());
                    let w = g.cols();
                    let mut out = vec![0.0; n * c];
                    for r in 0..n {
                        out[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                    }
                    send(*a, Tensor::matrix(n, c, out)?);
                }
                Op::Dropout(a, mask) => {
                    let mut d = g.clone();
                    for (x, m) in d.data_mut().iter_mut().zip(mask) {
                        *x *= m;
                    }
                    send(*a, d);
                }
                Op::Reparam { mu, sigma, eps } => {
                    let mut ds = g.clone();
                    for (x, e) in ds.data_mut().iter_mut().zip(eps) {
                        *x *= e;
                    }
                    send(*sigma, ds);
                    send(*mu, g.clone());
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

fn inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::AddRow(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::ConcatCols(a, b) => vec![*a, *b],
        Op::Reparam { mu, sigma, .. } => vec![*mu, *sigma],
        Op::Scale(a, _)
        | Op::Offset(a)
        | Op::Sigmoid(a)
        | Op::LeakyRelu(a, _)
        | Op::Softplus(a)
        | Op::Log(a)
        | Op::Square(a)
        | Op::Abs(a)
        | Op::Clamp(a, _, _)
        | Op::Mean(a)
        | Op::Sum(a)
        | Op::MeanCols(a)
        | Op::SumCols(a)
        | Op::TileCols(a)
        | Op::SliceCols(a, _)
        | Op::Dropout(a, _) => vec![*a],
    }
}
