//! Reverse-mode differentiation over a define-by-run tape.
//!
//! The tape records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates adjoints. A tape and its variables
//! are confined to a single thread; parallelism lives above this layer
//! (across grid-search cells). Tapes are rebuilt on every forward pass.
//!
//! Supported shapes are rank-1 vectors `[n]` and row-major rank-2 matrices
//! `[r, c]`. Broadcasting is limited to scalar-with-tensor and row-over-rows,
//! which is all the architecture needs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::ArrayView2;
use rand::RngCore;
use std::cell::Cell;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

/// A named trainable tensor living outside any tape.
///
/// Parameters persist across epochs; each forward pass re-registers them as
/// tape leaves via [`Tape::param`].
#[derive(Clone, Debug)]
pub struct ParamTensor<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> ParamTensor<S> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<S>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "parameter shape/data mismatch");
        ParamTensor {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn scalar(name: impl Into<String>, v: S) -> Self {
        ParamTensor::new(name, vec![1], vec![v])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Tanh,
    Sigmoid,
    Exp,
    Abs,
    Relu,
    Neg,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<S> {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
        n: usize,
        d: usize,
        m: usize,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    /// `a` is a tensor, `s` a one-element tensor; `scalar_left` marks `s ∘ a`.
    ScalarBroadcast {
        kind: BinaryKind,
        a: Var,
        s: Var,
        scalar_left: bool,
    },
    /// `a` is `[r, c]`, `row` is `[c]`, applied to every row of `a`.
    RowBroadcast {
        kind: BinaryKind,
        a: Var,
        row: Var,
    },
    AddConst {
        a: Var,
    },
    MulConst {
        a: Var,
        c: S,
    },
    /// Row `index` of a rank-2 tensor.
    Row {
        a: Var,
        index: usize,
        cols: usize,
    },
    SumAll {
        a: Var,
    },
    MeanAll {
        a: Var,
    },
    /// Sum over columns: `[r, c] -> [r]`.
    SumRows {
        a: Var,
        cols: usize,
    },
    SoftmaxRows {
        a: Var,
        rows: usize,
        cols: usize,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
        rows: usize,
    },
    /// Exact forward values with a precomputed elementwise proxy derivative.
    CustomGrad {
        a: Var,
        local: Vec<S>,
    },
    Dropout {
        a: Var,
        mask: Vec<S>,
    },
    SigmoidCe {
        logits: Var,
        targets: Vec<S>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        rows: usize,
        cols: usize,
    },
}

struct Node<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    op: Op<S>,
}

/// The recording tape. See the module docs for the usage contract.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    div_by_zero: Cell<bool>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            div_by_zero: Cell::new(false),
        }
    }

    /// True if any division executed on this tape had an exactly-zero divisor.
    pub fn division_by_zero(&self) -> bool {
        self.div_by_zero.get()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool, op: Op<S>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<S>) -> Var {
        self.push(shape, data, false, Op::Leaf)
    }

    pub fn scalar_const(&mut self, v: S) -> Var {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    /// Registers a trainable leaf. Gradients are read back with [`Tape::grad`].
    pub fn param(&mut self, p: &ParamTensor<S>) -> Var {
        self.push(p.shape.clone(), p.data.clone(), true, Op::Leaf)
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Var {
        self.push(shape, data, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    /// Accumulated gradient of `v`, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    fn mat_dims(&self, v: Var, context: &'static str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape[..] {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::dimension(context, s, &[0, 0])),
        }
    }

    // ---- forward ops ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.mat_dims(a, "matmul lhs")?;
        let (d2, m) = self.mat_dims(b, "matmul rhs")?;
        if d != d2 {
            return Err(Error::dimension(
                "matmul",
                &self.nodes[a.0].shape,
                &self.nodes[b.0].shape,
            ));
        }
        let av = ArrayView2::from_shape((n, d), self.value(a)).unwrap();
        let bv = ArrayView2::from_shape((d, m), self.value(b)).unwrap();
        let data = av.dot(&bv).into_raw_vec_and_offset().0;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(vec![n, m], data, rg, Op::Matmul { a, b, n, d, m }))
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let data: Vec<S> = self.value(a).iter().map(|&x| unary_fw(kind, x)).collect();
        let rg = self.needs(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::Unary { kind, a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    /// Subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a)
    }

    /// Subgradient 0 at 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }

    /// Subgradient 0 at 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sqrt, a)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let rg = self.needs(a) || self.needs(b);
        if sa == sb || self.numel(a) == self.numel(b) {
            if kind == BinaryKind::Div && self.value(b).iter().any(|&x| x == S::zero()) {
                self.div_by_zero.set(true);
            }
            let data: Vec<S> = self
                .value(a)
                .iter()
                .zip(self.value(b))
                .map(|(&x, &y)| binary_fw(kind, x, y))
                .collect();
            return Ok(self.push(sa, data, rg, Op::Binary { kind, a, b }));
        }
        // scalar-with-tensor broadcasting
        let (tensor, scalar, scalar_left) = if self.numel(b) == 1 {
            (a, b, false)
        } else if self.numel(a) == 1 {
            (b, a, true)
        } else {
            return Err(Error::dimension("elementwise", &sa, &sb));
        };
        let sv = self.value(scalar)[0];
        if kind == BinaryKind::Div {
            let zero_div = if scalar_left {
                self.value(tensor).iter().any(|&x| x == S::zero())
            } else {
                sv == S::zero()
            };
            if zero_div {
                self.div_by_zero.set(true);
            }
        }
        let data: Vec<S> = self
            .value(tensor)
            .iter()
            .map(|&x| {
                if scalar_left {
                    binary_fw(kind, sv, x)
                } else {
                    binary_fw(kind, x, sv)
                }
            })
            .collect();
        let shape = self.nodes[tensor.0].shape.clone();
        Ok(self.push(
            shape,
            data,
            rg,
            Op::ScalarBroadcast {
                kind,
                a: tensor,
                s: scalar,
                scalar_left,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Division by exact zero propagates IEEE Inf/NaN and raises the
    /// [`Tape::division_by_zero`] diagnostics flag instead of failing.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn add_const(&mut self, a: Var, c: S) -> Var {
        let data: Vec<S> = self.value(a).iter().map(|&x| x + c).collect();
        let rg = self.needs(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::AddConst { a })
    }

    pub fn mul_const(&mut self, a: Var, c: S) -> Var {
        let data: Vec<S> = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.needs(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::MulConst { a, c })
    }

    fn row_broadcast(&mut self, kind: BinaryKind, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.mat_dims(a, "row broadcast")?;
        if self.numel(row) != c {
            return Err(Error::dimension(
                "row broadcast",
                &self.nodes[a.0].shape,
                &self.nodes[row.0].shape,
            ));
        }
        let mut data = Vec::with_capacity(r * c);
        {
            let av = self.value(a);
            let rv = self.value(row);
            for i in 0..r {
                for j in 0..c {
                    data.push(binary_fw(kind, av[i * c + j], rv[j]));
                }
            }
        }
        let rg = self.needs(a) || self.needs(row);
        Ok(self.push(vec![r, c], data, rg, Op::RowBroadcast { kind, a, row }))
    }

    /// `a[i, j] + row[j]` for every row `i`.
    pub fn row_add(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(BinaryKind::Add, a, row)
    }

    pub fn row_sub(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(BinaryKind::Sub, a, row)
    }

    pub fn row_mul(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(BinaryKind::Mul, a, row)
    }

    /// Extracts row `index` of a rank-2 tensor as a `[c]` vector.
    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        let (r, c) = self.mat_dims(a, "row")?;
        if index >= r {
            return Err(Error::contract(format!("row {index} out of {r}")));
        }
        let data = self.value(a)[index * c..(index + 1) * c].to_vec();
        let rg = self.needs(a);
        self.push(vec![c], data, rg, Op::Row { a, index, cols: c });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().fold(S::zero(), |acc, &x| acc + x);
        let rg = self.needs(a);
        self.push(vec![1], vec![s], rg, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = S::of(self.numel(a) as f64);
        let s = self.value(a).iter().fold(S::zero(), |acc, &x| acc + x) / n;
        let rg = self.needs(a);
        self.push(vec![1], vec![s], rg, Op::MeanAll { a })
    }

    /// Per-row sum over columns: `[r, c] -> [r]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat_dims(a, "sum_rows")?;
        let av = self.value(a);
        let data: Vec<S> = (0..r)
            .map(|i| av[i * c..(i + 1) * c].iter().fold(S::zero(), |s, &x| s + x))
            .collect();
        let rg = self.needs(a);
        Ok(self.push(vec![r], data, rg, Op::SumRows { a, cols: c }))
    }

    /// Row-wise softmax with max-subtraction. A rank-1 input is one row.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (rows, cols) = match self.nodes[a.0].shape[..] {
            [r, c] => (r, c),
            [n] => (1, n),
            _ => unreachable!("tape tensors are rank 1 or 2"),
        };
        let av = self.value(a);
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let row = &av[i * cols..(i + 1) * cols];
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let exps: Vec<S> = row.iter().map(|&x| (x - max).exp()).collect();
            let sum = exps.iter().fold(S::zero(), |s, &x| s + x);
            data.extend(exps.into_iter().map(|e| e / sum));
        }
        let rg = self.needs(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::SoftmaxRows { a, rows, cols })
    }

    /// Concatenates column blocks; rank-1 parts count as single columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = match self.nodes[parts[0].0].shape[..] {
            [r, _] => r,
            [r] => r,
            _ => unreachable!(),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = match self.nodes[p.0].shape[..] {
                [r, c] => (r, c),
                [r] => (r, 1),
                _ => unreachable!(),
            };
            if r != rows {
                return Err(Error::dimension(
                    "concat_cols",
                    &self.nodes[parts[0].0].shape,
                    &self.nodes[p.0].shape,
                ));
            }
            widths.push((p, c));
        }
        let total: usize = widths.iter().map(|&(_, c)| c).sum();
        let mut data = vec![S::zero(); rows * total];
        let mut offset = 0;
        for &(p, c) in &widths {
            let pv = self.value(p);
            for i in 0..rows {
                data[i * total + offset..i * total + offset + c]
                    .copy_from_slice(&pv[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        let rg = widths.iter().any(|&(p, _)| self.needs(p));
        Ok(self.push(
            vec![rows, total],
            data,
            rg,
            Op::ConcatCols {
                parts: widths,
                rows,
            },
        ))
    }

    /// Straight-through building block: the output equals `forward(x)` exactly
    /// (bitwise), while backward applies the derivative of the smooth proxy
    /// evaluated at `x`.
    pub fn custom_grad(
        &mut self,
        a: Var,
        forward: impl Fn(S) -> S,
        proxy_deriv: impl Fn(S) -> S,
    ) -> Var {
        let data: Vec<S> = self.value(a).iter().map(|&x| forward(x)).collect();
        let local: Vec<S> = self.value(a).iter().map(|&x| proxy_deriv(x)).collect();
        let rg = self.needs(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::CustomGrad { a, local })
    }

    /// Inverted dropout; `mask` entries are `0` or `1/(1-p)`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut impl RngCore) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout rate must be in [0,1)");
        let scale = S::of(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..self.numel(a))
            .map(|_| {
                let u = rand::Rng::gen::<f64>(rng);
                if u < p {
                    S::zero()
                } else {
                    scale
                }
            })
            .collect();
        let data: Vec<S> = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let rg = self.needs(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::Dropout { a, mask })
    }

    /// Mean sigmoid cross-entropy over `[r]` (or `[r,1]`) logits with 0/1 targets.
    pub fn sigmoid_ce(&mut self, logits: Var, targets: &[S]) -> Result<Var> {
        if self.numel(logits) != targets.len() {
            return Err(Error::dimension(
                "sigmoid_ce",
                &self.nodes[logits.0].shape,
                &[targets.len()],
            ));
        }
        let r = targets.len();
        let mut total = S::zero();
        for (&z, &y) in self.value(logits).iter().zip(targets) {
            // max(z,0) - z*y + ln(1+e^{-|z|}) is the overflow-safe form
            let pos = z.max(S::zero());
            total = total + pos - z * y + (S::one() + (-z.abs()).exp()).ln();
        }
        let mean = total / S::of(r as f64);
        let rg = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![mean],
            rg,
            Op::SigmoidCe {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy over `[r, c]` logits with class-index labels.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.mat_dims(logits, "softmax_ce")?;
        if labels.len() != r {
            return Err(Error::dimension("softmax_ce", &[r, c], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data {
                row: labels.iter().position(|&l| l >= c).unwrap(),
                col: 0,
                msg: format!("label {bad} out of range for {c} classes"),
            });
        }
        let lv = self.value(logits);
        let mut total = S::zero();
        for i in 0..r {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let lse = max
                + row
                    .iter()
                    .map(|&z| (z - max).exp())
                    .fold(S::zero(), |s, x| s + x)
                    .ln();
            total = total + lse - row[labels[i]];
        }
        let mean = total / S::of(r as f64);
        let rg = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![mean],
            rg,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                rows: r,
                cols: c,
            },
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a scalar loss. Repeated calls without a fresh tape
    /// accumulate into the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let n = self.nodes.len();
        // fresh adjoints for this call; merged into the accumulator at the end
        let mut adj: Vec<Option<Vec<S>>> = vec![None; n];
        adj[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let g = match adj[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut adj);
            }
            adj[idx] = Some(g);
        }
        for idx in 0..n {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Some(g) = &adj[idx] {
                match &mut self.grads[idx] {
                    Some(acc) => {
                        for (a, &x) in acc.iter_mut().zip(g) {
                            *a += x;
                        }
                    }
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[S], adj: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        let acc = |adj: &mut [Option<Vec<S>>], v: Var, contrib: &dyn Fn(&mut Vec<S>)| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![S::zero(); self.numel(v)]);
            contrib(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b, n, d, m } => {
                let gv = ArrayView2::from_shape((*n, *m), g).unwrap();
                acc(adj, *a, &|ga| {
                    let bv = ArrayView2::from_shape((*d, *m), self.value(*b)).unwrap();
                    let da = gv.dot(&bv.t());
                    for (x, y) in ga.iter_mut().zip(da.iter()) {
                        *x += *y;
                    }
                });
                acc(adj, *b, &|gb| {
                    let av = ArrayView2::from_shape((*n, *d), self.value(*a)).unwrap();
                    let db = av.t().dot(&gv);
                    for (x, y) in gb.iter_mut().zip(db.iter()) {
                        *x += *y;
                    }
                });
            }
            Op::Unary { kind, a } => {
                let xv = self.value(*a);
                let yv = &node.data;
                acc(adj, *a, &|ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * unary_bw(*kind, xv[i], yv[i]);
                    }
                });
            }
            Op::Binary { kind, a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                match kind {
                    BinaryKind::Add => {
                        acc(adj, *a, &|ga| add_assign(ga, g));
                        acc(adj, *b, &|gb| add_assign(gb, g));
                    }
                    BinaryKind::Sub => {
                        acc(adj, *a, &|ga| add_assign(ga, g));
                        acc(adj, *b, &|gb| {
                            for (x, &y) in gb.iter_mut().zip(g) {
                                *x -= y;
                            }
                        });
                    }
                    BinaryKind::Mul => {
                        acc(adj, *a, &|ga| {
                            for i in 0..ga.len() {
                                ga[i] += g[i] * bv[i];
                            }
                        });
                        acc(adj, *b, &|gb| {
                            for i in 0..gb.len() {
                                gb[i] += g[i] * av[i];
                            }
                        });
                    }
                    BinaryKind::Div => {
                        acc(adj, *a, &|ga| {
                            for i in 0..ga.len() {
                                ga[i] += g[i] / bv[i];
                            }
                        });
                        acc(adj, *b, &|gb| {
                            for i in 0..gb.len() {
                                gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                            }
                        });
                    }
                }
            }
            Op::ScalarBroadcast {
                kind,
                a,
                s,
                scalar_left,
            } => {
                let av = self.value(*a);
                let sv = self.value(*s)[0];
                match (kind, scalar_left) {
                    (BinaryKind::Add, _) => {
                        acc(adj, *a, &|ga| add_assign(ga, g));
                        acc(adj, *s, &|gs| gs[0] += sum(g));
                    }
                    (BinaryKind::Sub, false) => {
                        // a - s
                        acc(adj, *a, &|ga| add_assign(ga, g));
                        acc(adj, *s, &|gs| gs[0] -= sum(g));
                    }
                    (BinaryKind::Sub, true) => {
                        // s - a
                        acc(adj, *a, &|ga| {
                            for (x, &y) in ga.iter_mut().zip(g) {
                                *x -= y;
                            }
                        });
                        acc(adj, *s, &|gs| gs[0] += sum(g));
                    }
                    (BinaryKind::Mul, _) => {
                        acc(adj, *a, &|ga| {
                            for i in 0..ga.len() {
                                ga[i] += g[i] * sv;
                            }
                        });
                        acc(adj, *s, &|gs| {
                            let mut t = S::zero();
                            for i in 0..av.len() {
                                t += g[i] * av[i];
                            }
                            gs[0] += t;
                        });
                    }
                    (BinaryKind::Div, false) => {
                        // a / s
                        acc(adj, *a, &|ga| {
                            for i in 0..ga.len() {
                                ga[i] += g[i] / sv;
                            }
                        });
                        acc(adj, *s, &|gs| {
                            let mut t = S::zero();
                            for i in 0..av.len() {
                                t += g[i] * av[i];
                            }
                            gs[0] -= t / (sv * sv);
                        });
                    }
                    (BinaryKind::Div, true) => {
                        // s / a
                        acc(adj, *a, &|ga| {
                            for i in 0..ga.len() {
                                ga[i] -= g[i] * sv / (av[i] * av[i]);
                            }
                        });
                        acc(adj, *s, &|gs| {
                            let mut t = S::zero();
                            for i in 0..av.len() {
                                t += g[i] / av[i];
                            }
                            gs[0] += t;
                        });
                    }
                }
            }
            Op::RowBroadcast { kind, a, row } => {
                let c = self.numel(*row);
                let av = self.value(*a);
                let rv = self.value(*row);
                match kind {
                    BinaryKind::Add | BinaryKind::Sub => {
                        acc(adj, *a, &|ga| add_assign(ga, g));
                        let sign = if *kind == BinaryKind::Add {
                            S::one()
                        } else {
                            -S::one()
                        };
                        acc(adj, *row, &|gr| {
                            for (i, &x) in g.iter().enumerate() {
                                gr[i % c] += sign * x;
                            }
                        });
                    }
                    BinaryKind::Mul => {
                        acc(adj, *a, &|ga| {
                            for i in 0..ga.len() {
                                ga[i] += g[i] * rv[i % c];
                            }
                        });
                        acc(adj, *row, &|gr| {
                            for (i, &x) in g.iter().enumerate() {
                                gr[i % c] += x * av[i];
                            }
                        });
                    }
                    BinaryKind::Div => {
                        acc(adj, *a, &|ga| {
                            for i in 0..ga.len() {
                                ga[i] += g[i] / rv[i % c];
                            }
                        });
                        acc(adj, *row, &|gr| {
                            for (i, &x) in g.iter().enumerate() {
                                let r = rv[i % c];
                                gr[i % c] -= x * av[i] / (r * r);
                            }
                        });
                    }
                }
            }
            Op::AddConst { a } => acc(adj, *a, &|ga| add_assign(ga, g)),
            Op::MulConst { a, c } => acc(adj, *a, &|ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * *c;
                }
            }),
            Op::Row { a, index, cols } => acc(adj, *a, &|ga| {
                for j in 0..*cols {
                    ga[index * cols + j] += g[j];
                }
            }),
            Op::SumAll { a } => acc(adj, *a, &|ga| {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::MeanAll { a } => {
                let inv = S::one() / S::of(self.numel(*a) as f64);
                acc(adj, *a, &|ga| {
                    for x in ga.iter_mut() {
                        *x += g[0] * inv;
                    }
                });
            }
            Op::SumRows { a, cols } => acc(adj, *a, &|ga| {
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += g[i / cols];
                }
            }),
            Op::SoftmaxRows { a, rows, cols } => {
                let yv = &node.data;
                acc(adj, *a, &|ga| {
                    for i in 0..*rows {
                        let y = &yv[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let mut dot = S::zero();
                        for j in 0..*cols {
                            dot += gr[j] * y[j];
                        }
                        for j in 0..*cols {
                            ga[i * cols + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|&(_, c)| c).sum();
                let mut offset = 0;
                for &(p, c) in parts {
                    let off = offset;
                    acc(adj, p, &|gp| {
                        for i in 0..*rows {
                            for j in 0..c {
                                gp[i * c + j] += g[i * total + off + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::CustomGrad { a, local } => acc(adj, *a, &|ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * local[i];
                }
            }),
            Op::Dropout { a, mask } => acc(adj, *a, &|ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * mask[i];
                }
            }),
            Op::SigmoidCe { logits, targets } => {
                let zv = self.value(*logits);
                let inv = S::one() / S::of(targets.len() as f64);
                acc(adj, *logits, &|gl| {
                    for i in 0..gl.len() {
                        let p = S::one() / (S::one() + (-zv[i]).exp());
                        gl[i] += g[0] * (p - targets[i]) * inv;
                    }
                });
            }
            Op::SoftmaxCe {
                logits,
                labels,
                rows,
                cols,
            } => {
                let zv = self.value(*logits);
                let inv = S::one() / S::of(*rows as f64);
                acc(adj, *logits, &|gl| {
                    for i in 0..*rows {
                        let row = &zv[i * cols..(i + 1) * cols];
                        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
                        let exps: Vec<S> = row.iter().map(|&z| (z - max).exp()).collect();
                        let s = exps.iter().fold(S::zero(), |t, &x| t + x);
                        for j in 0..*cols {
                            let mut p = exps[j] / s;
                            if j == labels[i] {
                                p -= S::one();
                            }
                            gl[i * cols + j] += g[0] * p * inv;
                        }
                    }
                });
            }
        }
    }
}

fn sum<S: Scalar>(xs: &[S]) -> S {
    xs.iter().fold(S::zero(), |s, &x| s + x)
}

fn add_assign<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn unary_fw<S: Scalar>(kind: UnaryKind, x: S) -> S {
    match kind {
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Sigmoid => S::one() / (S::one() + (-x).exp()),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Abs => x.abs(),
        UnaryKind::Relu => x.max(S::zero()),
        UnaryKind::Neg => -x,
        UnaryKind::Sqrt => x.sqrt(),
    }
}

fn unary_bw<S: Scalar>(kind: UnaryKind, x: S, y: S) -> S {
    match kind {
        UnaryKind::Tanh => S::one() - y * y,
        UnaryKind::Sigmoid => y * (S::one() - y),
        UnaryKind::Exp => y,
        // subgradient 0 at the kink
        UnaryKind::Abs => {
            if x > S::zero() {
                S::one()
            } else if x < S::zero() {
                -S::one()
            } else {
                S::zero()
            }
        }
        UnaryKind::Relu => {
            if x > S::zero() {
                S::one()
            } else {
                S::zero()
            }
        }
        UnaryKind::Neg => -S::one(),
        UnaryKind::Sqrt => {
            if x > S::zero() {
                S::of(0.5) / y
            } else {
                S::zero()
            }
        }
    }
}

fn binary_fw<S: Scalar>(kind: BinaryKind, x: S, y: S) -> S {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    /// Central finite differences, h = 1e-5 unless stated otherwise.
    pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
        let mut g = Vec::with_capacity(at.len());
        let mut xs = at.to_vec();
        for i in 0..at.len() {
            let orig = xs[i];
            xs[i] = orig + h;
            let up = f(&xs);
            xs[i] = orig - h;
            let down = f(&xs);
            xs[i] = orig;
            g.push((up - down) / (2.0 * h));
        }
        g
    }

    pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
        got.iter()
            .zip(want)
            .map(|(&a, &b)| (a - b).abs() / b.abs().max(1.0))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::{max_rel_err, numeric_grad};
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn matmul_identity_and_selector() {
        let mut t = tape();
        let eye = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let c = t.matmul(eye, a).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0, 4.0]);

        let sel = t.constant(vec![1, 2], vec![1.0, 0.0]);
        let col = t.constant(vec![2, 1], vec![0.0, 5.0]);
        let out = t.matmul(sel, col).unwrap();
        assert_eq!(t.value(out), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = tape();
        let a = t.constant(vec![2, 3], vec![0.0; 6]);
        let b = t.constant(vec![2, 2], vec![0.0; 4]);
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a0: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b0: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let f = |av: &[f64]| {
            let mut t = Tape::<f64>::new();
            let a = t.constant(vec![3, 3], av.to_vec());
            let b = t.constant(vec![3, 3], b0.clone());
            let c = t.matmul(a, b).unwrap();
            let s = t.sum_all(c);
            t.value(s)[0]
        };
        let fd = numeric_grad(f, &a0, 1e-5);

        let mut t = tape();
        let a = t.leaf(vec![3, 3], a0.clone(), true);
        let b = t.constant(vec![3, 3], b0.clone());
        let c = t.matmul(a, b).unwrap();
        let loss = t.sum_all(c);
        t.backward(loss).unwrap();
        assert!(max_rel_err(t.grad(a).unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn elementwise_values() {
        let mut t = tape();
        let x = t.constant(vec![1], vec![1.5]);
        let y = t.tanh(x);
        assert!((t.value(y)[0] - 1.5f64.tanh()).abs() < 1e-15);
        assert!((t.value(y)[0] - 0.9051).abs() < 1e-4);

        let z = t.constant(vec![1], vec![0.0]);
        let s = t.sigmoid(z);
        assert_eq!(t.value(s)[0], 0.5);
    }

    #[test]
    fn tanh_gradient_matches_finite_differences() {
        let mut t = tape();
        let x = t.leaf(vec![1], vec![0.3], true);
        let y = t.tanh(x);
        t.backward(y).unwrap();
        let got = t.grad(x).unwrap()[0];
        let expect = 1.0 - 0.3f64.tanh().powi(2);
        assert!((got - expect).abs() < 1e-12);
        let fd = numeric_grad(|v| v[0].tanh(), &[0.3], 1e-6);
        assert!((got - fd[0]).abs() < 1e-8);
    }

    #[test]
    fn div_by_zero_sets_flag_not_panic() {
        let mut t = tape();
        let a = t.constant(vec![2], vec![1.0, 2.0]);
        let b = t.constant(vec![2], vec![0.0, 1.0]);
        let c = t.div(a, b).unwrap();
        assert!(t.value(c)[0].is_infinite());
        assert!(t.division_by_zero());
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut t = tape();
        let x = t.constant(vec![3], vec![0.0, 0.0, 0.0]);
        let y = t.softmax(x);
        for &v in t.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = t.constant(vec![2], vec![1000.0, 0.0]);
        let s = t.softmax(big);
        assert!((t.value(s)[0] - 1.0).abs() < 1e-12);
        assert!(t.value(s)[1].abs() < 1e-12);
        let total: f64 = t.value(s).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_jacobian_matches_finite_differences() {
        let at = [0.2, -0.4, 1.1];
        for out_idx in 0..3 {
            let f = |v: &[f64]| {
                let mut t = Tape::<f64>::new();
                let x = t.constant(vec![3], v.to_vec());
                let y = t.softmax(x);
                t.value(y)[out_idx]
            };
            let fd = numeric_grad(f, &at, 1e-5);

            let mut t = tape();
            let x = t.leaf(vec![3], at.to_vec(), true);
            let y = t.softmax(x);
            // pick one output via a constant one-hot weight
            let mut w = vec![0.0; 3];
            w[out_idx] = 1.0;
            let wv = t.constant(vec![3], w);
            let picked = t.mul(y, wv).unwrap();
            let loss = t.sum_all(picked);
            t.backward(loss).unwrap();
            assert!(max_rel_err(t.grad(x).unwrap(), &fd) < 1e-6);
        }
    }

    #[test]
    fn custom_grad_sign_tanh() {
        let mut t = tape();
        let x = t.leaf(vec![1], vec![0.7], true);
        let y = t.custom_grad(x, sign, |v| 1.0 - v.tanh().powi(2));
        assert_eq!(t.value(y)[0], 1.0);
        t.backward(y).unwrap();
        let expect = 1.0 - 0.7f64.tanh().powi(2);
        assert!((t.grad(x).unwrap()[0] - expect).abs() < 1e-15);

        let mut t = tape();
        let x = t.constant(vec![1], vec![-3.0]);
        let y = t.custom_grad(x, sign, |v| 1.0 - v.tanh().powi(2));
        assert_eq!(t.value(y)[0], -1.0);
    }

    fn sign(x: f64) -> f64 {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    }

    #[test]
    fn custom_grad_composite_chain_rule() {
        // loss = sum(tanh(custom_grad(sign, tanh, x) * x)); hand chain rule:
        // d/dx_i = (1 - tanh^2(sign(x_i) * x_i)) * (sign(x_i) + x_i * (1 - tanh^2(x_i)))
        let xs = [0.4, -1.2, 2.0, -0.1, 0.9];
        let mut t = tape();
        let x = t.leaf(vec![5], xs.to_vec(), true);
        let s = t.custom_grad(x, sign, |v| 1.0 - v.tanh().powi(2));
        let prod = t.mul(s, x).unwrap();
        let act = t.tanh(prod);
        let loss = t.sum_all(act);
        t.backward(loss).unwrap();
        let got = t.grad(x).unwrap();
        for (i, &xi) in xs.iter().enumerate() {
            let expect = (1.0 - (sign(xi) * xi).tanh().powi(2))
                * (sign(xi) + xi * (1.0 - xi.tanh().powi(2)));
            assert!((got[i] - expect).abs() < 1e-12, "i={i}");
        }
    }

    #[test]
    fn backward_sum_gives_ones_and_zero_product_gives_zero() {
        let mut t = tape();
        let w = t.leaf(vec![2, 3], vec![1.0; 6], true);
        let loss = t.sum_all(w);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[1.0; 6]);

        let mut t = tape();
        let x = t.leaf(vec![4], vec![2.0; 4], true);
        let zero = t.mul_const(x, 0.0);
        let loss = t.sum_all(zero);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut t = tape();
        let x = t.leaf(vec![2], vec![1.0, 2.0], true);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = tape();
        let x = t.leaf(vec![1], vec![3.0], true);
        let loss = t.mul_const(x, 2.0);
        t.backward(loss).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap()[0], 4.0);
    }

    #[test]
    fn sigmoid_ce_gradient_matches_finite_differences() {
        let logits = [0.3, -1.0, 2.0, 0.0];
        let targets = [1.0, 0.0, 1.0, 1.0];
        let f = |v: &[f64]| {
            let mut t = Tape::<f64>::new();
            let z = t.constant(vec![4], v.to_vec());
            let l = t.sigmoid_ce(z, &targets).unwrap();
            t.value(l)[0]
        };
        let fd = numeric_grad(f, &logits, 1e-6);
        let mut t = tape();
        let z = t.leaf(vec![4], logits.to_vec(), true);
        let loss = t.sigmoid_ce(z, &targets).unwrap();
        t.backward(loss).unwrap();
        assert!(max_rel_err(t.grad(z).unwrap(), &fd) < 1e-7);
    }

    #[test]
    fn softmax_ce_gradient_matches_finite_differences() {
        let logits = [0.3, -1.0, 2.0, 0.5, 0.1, -0.7];
        let labels = [2usize, 0];
        let f = |v: &[f64]| {
            let mut t = Tape::<f64>::new();
            let z = t.constant(vec![2, 3], v.to_vec());
            let l = t.softmax_ce(z, &labels).unwrap();
            t.value(l)[0]
        };
        let fd = numeric_grad(f, &logits, 1e-6);
        let mut t = tape();
        let z = t.leaf(vec![2, 3], logits.to_vec(), true);
        let loss = t.softmax_ce(z, &labels).unwrap();
        t.backward(loss).unwrap();
        assert!(max_rel_err(t.grad(z).unwrap(), &fd) < 1e-7);
    }

    #[test]
    fn generic_over_f32() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(vec![2], vec![0.5, -0.5], true);
        let y = t.tanh(x);
        let loss = t.sum_all(y);
        t.backward(loss).unwrap();
        assert!(t.grad(x).is_some());
    }

    #[test]
    fn dropout_deterministic_per_seed() {
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Tape::<f64>::new();
            let x = t.constant(vec![100], vec![1.0; 100]);
            let y = t.dropout(x, 0.5, &mut rng);
            t.value(y).to_vec()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn random_op_gradient_check_property() {
        // every differentiable op composed at random agrees with finite differences
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let xs: Vec<f64> = (0..6).map(|_| rng.gen_range(0.2..1.5)).collect();
            let f = |v: &[f64]| {
                let mut t = Tape::<f64>::new();
                let x = t.constant(vec![2, 3], v.to_vec());
                let a = t.tanh(x);
                let b = t.sigmoid(a);
                let r = t.constant(vec![3], vec![0.3, -0.8, 1.2]);
                let c = t.row_mul(b, r).unwrap();
                let d = t.exp(c);
                let e = t.sum_rows(d).unwrap();
                let sq = t.sqrt(e);
                let m = t.mean_all(sq);
                t.value(m)[0]
            };
            let fd = numeric_grad(f, &xs, 1e-5);
            let mut t = tape();
            let x = t.leaf(vec![2, 3], xs.clone(), true);
            let a = t.tanh(x);
            let b = t.sigmoid(a);
            let r = t.constant(vec![3], vec![0.3, -0.8, 1.2]);
            let c = t.row_mul(b, r).unwrap();
            let d = t.exp(c);
            let e = t.sum_rows(d).unwrap();
            let sq = t.sqrt(e);
            let loss = t.mean_all(sq);
            t.backward(loss).unwrap();
            assert!(max_rel_err(t.grad(x).unwrap(), &fd) < 1e-5);
        }
    }
}
