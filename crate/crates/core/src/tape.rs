//! Matrix-valued reverse-mode differentiation.
//!
//! Operations are recorded on a [`Tape`] in the order they are issued, which
//! is a topological order by construction. [`Tape::gradient`] walks the
//! records backwards once and accumulates adjoints in that fixed order, so
//! gradients are deterministic. The ReLU subgradient at zero is zero.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{matmul, matmul_transa, matmul_transb, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Param,
    Constant,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    HConcat(Var, Var),
    GroupSum(Var, usize),
    GroupRepeat(Var, usize),
    Sum(Var),
    MeanSquare(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every parameter leaf, indexed by the parameter's [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<Var>,
}

impl Gradients {
    /// The gradient for `v`; `None` if `v` is not a parameter.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameters in registration order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }
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

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Param, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// Adds the `1×c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let b = self.value(bias);
        if b.rows() != 1 {
            return Err(shape_err("Tape::add_row", format!("bias has {} rows", b.rows())));
        }
        let value = self.value(a).add_row(b.row(0))?;
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(value, Op::AddRow(a, bias), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(
                "Tape::mul",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Matrix::new(va.rows(), va.cols(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.needs(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn hconcat(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hstack(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::HConcat(a, b), ng))
    }

    /// Sums each run of `group` consecutive rows into one row.
    pub fn group_sum(&mut self, a: Var, group: usize) -> Result<Var> {
        let value = group_sum(self.value(a), group)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::GroupSum(a, group), ng))
    }

    /// Repeats every row `group` times, the adjoint of [`Tape::group_sum`].
    pub fn group_repeat(&mut self, a: Var, group: usize) -> Result<Var> {
        let value = group_repeat(self.value(a), group)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::GroupRepeat(a, group), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().fold(0.0, |acc, v| acc + v);
        let ng = self.needs(a);
        self.push(Matrix::filled(1, 1, total), Op::Sum(a), ng)
    }

    /// Mean of squared entries, a `1×1` node.
    pub fn mean_square(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let total = v.data().iter().fold(0.0, |acc, x| acc + x * x);
        let mean = total / v.data().len() as f64;
        let ng = self.needs(a);
        self.push(Matrix::filled(1, 1, mean), Op::MeanSquare(a), ng)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn gradient(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "gradient requires a 1x1 loss, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            match node.op {
                Op::Param | Op::Constant => {
                    adj[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.needs(a) {
                        let da = matmul_transb(&g, self.value(b))?;
                        accumulate(&mut adj, a, da)?;
                    }
                    if self.needs(b) {
                        let db = matmul_transa(self.value(a), &g)?;
                        accumulate(&mut adj, b, db)?;
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.needs(bias) {
                        let db = Matrix::new(1, g.cols(), g.column_sums())?;
                        accumulate(&mut adj, bias, db)?;
                    }
                    if self.needs(a) {
                        accumulate(&mut adj, a, g)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(b) {
                        accumulate(&mut adj, b, g.clone())?;
                    }
                    if self.needs(a) {
                        accumulate(&mut adj, a, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(b) {
                        accumulate(&mut adj, b, g.scale(-1.0))?;
                    }
                    if self.needs(a) {
                        accumulate(&mut adj, a, g)?;
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(a), self.value(b));
                    if self.needs(a) {
                        accumulate(&mut adj, a, hadamard(&g, vb))?;
                    }
                    if self.needs(b) {
                        accumulate(&mut adj, b, hadamard(&g, va))?;
                    }
                }
                Op::Scale(a, s) => accumulate(&mut adj, a, g.scale(s))?,
                Op::Relu(a) => {
                    let x = self.value(a);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, a, Matrix::new(g.rows(), g.cols(), data)?)?;
                }
                Op::HConcat(a, b) => {
                    let ca = self.value(a).cols();
                    if self.needs(a) {
                        accumulate(&mut adj, a, g.columns(0, ca)?)?;
                    }
                    if self.needs(b) {
                        accumulate(&mut adj, b, g.columns(ca, g.cols())?)?;
                    }
                }
                Op::GroupSum(a, group) => accumulate(&mut adj, a, group_repeat(&g, group)?)?,
                Op::GroupRepeat(a, group) => accumulate(&mut adj, a, group_sum(&g, group)?)?,
                Op::Sum(a) => {
                    let (r, c) = self.value(a).shape();
                    accumulate(&mut adj, a, Matrix::filled(r, c, g.get(0, 0)))?;
                }
                Op::MeanSquare(a) => {
                    let x = self.value(a);
                    let k = 2.0 * g.get(0, 0) / x.data().len() as f64;
                    accumulate(&mut adj, a, x.scale(k))?;
                }
            }
        }

        let params: Vec<Var> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Param))
            .map(|(i, _)| Var(i))
            .collect();
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        for &p in &params {
            let (r, c) = self.value(p).shape();
            grads[p.0] = Some(adj[p.0].take().unwrap_or_else(|| Matrix::zeros(r, c)));
        }
        Ok(Gradients { grads, params })
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut adj[v.0] {
        Some(existing) => {
            if existing.shape() != g.shape() {
                return Err(shape_err("accumulate", "adjoint shape drift"));
            }
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * b.get(i, j))
}

pub(crate) fn group_sum(m: &Matrix, group: usize) -> Result<Matrix> {
    if group == 0 || !m.rows().is_multiple_of(group) {
        return Err(shape_err(
            "group_sum",
            format!("{} rows in groups of {group}", m.rows()),
        ));
    }
    let cols = m.cols();
    let mut out = Matrix::zeros(m.rows() / group, cols);
    for (i, row) in m.row_iter().enumerate() {
        for (o, v) in out.row_mut(i / group).iter_mut().zip(row) {
            *o += v;
        }
    }
    Ok(out)
}

pub(crate) fn group_repeat(m: &Matrix, group: usize) -> Result<Matrix> {
    if group == 0 {
        return Err(shape_err("group_repeat", "group of zero rows"));
    }
    let mut data = Vec::with_capacity(m.rows() * group * m.cols());
    for row in m.row_iter() {
        for _ in 0..group {
            data.extend_from_slice(row);
        }
    }
    Matrix::new(m.rows() * group, m.cols(), data)
}
