//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Every recorded node stores its forward value; nodes are appended in
//! evaluation order, so the tape is always topologically sorted and the
//! backward sweep is a single reverse pass.

use crate::error::{invalid, shape_err, Result};
use crate::linalg::{matmul_into, matmul_t_into, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    /// Adds a `1 x n` row to every row of `a`.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sum(Var),
    /// Row-wise `β βᵀ` for rows holding a row-major `D x rank` block; output rows hold `D x D`.
    RowGram { input: Var, rank: usize },
    /// Diagonal of [`Op::RowGram`] only: `B x (D·rank)` to `B x D`.
    RowGramDiag { input: Var, rank: usize },
    /// Row-wise diagonal embedding: `B x D` to `B x D²`.
    RowDiag(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.adjoints[v.0] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.as_slice()[0]
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(Op::MatMulT(a, b), value))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(shape_err(format!("1x{}", av.cols()), format!("{:?}", bv.shape())));
        }
        let mut value = av.clone();
        let b = bv.as_slice();
        for r in 0..value.rows() {
            for (x, &bb) in value.row_mut(r).iter_mut().zip(b) {
                *x += bb;
            }
        }
        Ok(self.push(Op::AddRow(a, bias), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(Op::Scale(a, c), value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    /// `Σ a⊙a`
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        Ok(self.sum(sq))
    }

    pub fn row_gram(&mut self, input: Var, rank: usize) -> Result<Var> {
        let x = self.value(input);
        let d = gram_dim(x.cols(), rank)?;
        let mut value = Matrix::zeros(x.rows(), d * d);
        for b in 0..x.rows() {
            let row = x.row(b);
            let out = value.row_mut(b);
            for i in 0..d {
                let bi = &row[i * rank..(i + 1) * rank];
                for j in i..d {
                    let bj = &row[j * rank..(j + 1) * rank];
                    let v: f64 = bi.iter().zip(bj).map(|(p, q)| p * q).sum();
                    out[i * d + j] = v;
                    out[j * d + i] = v;
                }
            }
        }
        Ok(self.push(Op::RowGram { input, rank }, value))
    }

    pub fn row_gram_diag(&mut self, input: Var, rank: usize) -> Result<Var> {
        let x = self.value(input);
        let d = gram_dim(x.cols(), rank)?;
        let mut value = Matrix::zeros(x.rows(), d);
        for b in 0..x.rows() {
            let row = x.row(b);
            for i in 0..d {
                value[(b, i)] = row[i * rank..(i + 1) * rank].iter().map(|p| p * p).sum();
            }
        }
        Ok(self.push(Op::RowGramDiag { input, rank }, value))
    }

    pub fn row_diag(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = x.cols();
        let mut value = Matrix::zeros(x.rows(), d * d);
        for b in 0..x.rows() {
            for i in 0..d {
                value[(b, i * d + i)] = x[(b, i)];
            }
        }
        self.push(Op::RowDiag(a), value)
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(invalid(format!(
                "backward needs a scalar loss node, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf => {
                    // Leaves keep their adjoint for the caller.
                    adj[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    matmul_t_into(&g, bv, &mut da);
                    accumulate(&mut adj, a, da);
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    matmul_into(&av.transpose(), &g, &mut db);
                    accumulate(&mut adj, b, db);
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    matmul_into(&g, bv, &mut da);
                    accumulate(&mut adj, a, da);
                    // db = gᵀ a
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    for i in 0..g.rows() {
                        let arow = av.row(i);
                        for (j, &gij) in g.row(i).iter().enumerate() {
                            if gij == 0.0 {
                                continue;
                            }
                            for (d, &x) in db.row_mut(j).iter_mut().zip(arow) {
                                *d += gij * x;
                            }
                        }
                    }
                    accumulate(&mut adj, b, db);
                }
                Op::AddRow(a, bias) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in g.row_iter() {
                        for (d, &x) in db.as_mut_slice().iter_mut().zip(r) {
                            *d += x;
                        }
                    }
                    accumulate(&mut adj, bias, db);
                    accumulate(&mut adj, a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, b, g.clone());
                    accumulate(&mut adj, a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, b, g.scale(-1.0));
                    accumulate(&mut adj, a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(b), |x, y| x * y)?;
                    let db = g.zip_map(self.value(a), |x, y| x * y)?;
                    accumulate(&mut adj, a, da);
                    accumulate(&mut adj, b, db);
                }
                Op::Scale(a, c) => accumulate(&mut adj, a, g.scale(c)),
                Op::Tanh(a) => {
                    let da = g.zip_map(&node.value, |x, y| x * (1.0 - y * y))?;
                    accumulate(&mut adj, a, da);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(a).shape();
                    accumulate(&mut adj, a, Matrix::filled(r, c, g.as_slice()[0]));
                }
                Op::RowGram { input, rank } => {
                    let x = self.value(input);
                    let d = x.cols() / rank;
                    let mut dx = Matrix::zeros(x.rows(), x.cols());
                    for b in 0..x.rows() {
                        let row = x.row(b);
                        let grow = g.row(b);
                        let drow = dx.row_mut(b);
                        for i in 0..d {
                            for j in 0..d {
                                let w = grow[i * d + j] + grow[j * d + i];
                                if w == 0.0 {
                                    continue;
                                }
                                for k in 0..rank {
                                    drow[i * rank + k] += w * row[j * rank + k];
                                }
                            }
                        }
                    }
                    accumulate(&mut adj, input, dx);
                }
                Op::RowGramDiag { input, rank } => {
                    let x = self.value(input);
                    let mut dx = Matrix::zeros(x.rows(), x.cols());
                    for b in 0..x.rows() {
                        for c in 0..x.cols() {
                            dx[(b, c)] = 2.0 * g[(b, c / rank)] * x[(b, c)];
                        }
                    }
                    accumulate(&mut adj, input, dx);
                }
                Op::RowDiag(a) => {
                    let x = self.value(a);
                    let d = x.cols();
                    let mut dx = Matrix::zeros(x.rows(), d);
                    for b in 0..x.rows() {
                        for i in 0..d {
                            dx[(b, i)] = g[(b, i * d + i)];
                        }
                    }
                    accumulate(&mut adj, a, dx);
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        adj.resize(self.nodes.len(), None);
        Ok(Gradients {
            adjoints: adj,
            shapes,
        })
    }
}

fn gram_dim(cols: usize, rank: usize) -> Result<usize> {
    if rank == 0 || cols % rank != 0 {
        return Err(shape_err(format!("columns divisible by rank {rank}"), cols));
    }
    Ok(cols / rank)
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (a, b) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
