//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! enough information to push gradients back to its inputs. Nodes are only
//! ever appended, so the node order is already a topological order and the
//! backward pass is a single reverse sweep.
//!
//! Leaves either borrow their value (model parameters during inference, so
//! no copies are made per sample) or own it (per-sample features).

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `x (n x c) + b (1 x c)` broadcast over rows.
    AddRow(Var, Var),
    /// `x (n x c) - b (1 x c)` broadcast over rows.
    SubRow(Var, Var),
    /// `a * x + b` elementwise with constants.
    Affine(Var, f64),
    /// `s * x` with `s` a `1 x 1` node.
    ScaleBy(Var, Var),
    /// Elementwise product with a constant matrix (dropout masks, jitter-free scaling).
    MulConst(Var, Matrix),
    /// Elementwise sum with a constant matrix.
    AddConst(Var),
    Tanh(Var),
    Sigmoid(Var),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    RowNormalize(Var, Vec<f64>),
    SoftmaxRows(Var),
    LinComb(Vec<(Var, f64)>),
    ContrastiveCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
    TripletHinge {
        scores: Var,
        terms: Vec<HingeTerm>,
    },
}

#[derive(Debug, Clone)]
struct HingeTerm {
    row: usize,
    pos: usize,
    neg: usize,
    weight: f64,
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar root with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when the node does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// The gradient, or zeros of the given shape when the node is unreachable.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

fn shape_err<T>(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<T> {
    Err(Error::Shape(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1)))
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf borrowing its value.
    pub fn param(&mut self, value: &'a Matrix) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A leaf with no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A borrowed leaf with no gradient.
    pub fn constant_ref(&mut self, value: &'a Matrix) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return shape_err("matmul", sa, sb);
        }
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err("add", sa, sb);
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err("sub", sa, sb);
        }
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x -= y;
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    fn broadcast_row(&mut self, x: Var, b: Var, sign: f64) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.0 != 1 || sb.1 != sx.1 {
            return shape_err("row broadcast", sx, sb);
        }
        let mut value = self.value(x).clone();
        let brow = self.value(b).row(0).to_vec();
        for r in 0..sx.0 {
            for (v, bv) in value.row_mut(r).iter_mut().zip(&brow) {
                *v += sign * bv;
            }
        }
        let rg = self.rg(&[x, b]);
        let op = if sign > 0.0 { Op::AddRow(x, b) } else { Op::SubRow(x, b) };
        Ok(self.push(value, op, rg))
    }

    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.broadcast_row(x, b, 1.0)
    }

    pub fn sub_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.broadcast_row(x, b, -1.0)
    }

    /// `a * x + b`.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let value = self.value(x).map(|v| a * v + b);
        let rg = self.rg(&[x]);
        self.push(value, Op::Affine(x, a), rg)
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Var {
        self.affine(x, a, 0.0)
    }

    /// Multiplies `x` by the `1 x 1` node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return shape_err("scale_by scalar", self.shape(s), (1, 1));
        }
        let k = self.scalar(s);
        let value = self.value(x).scale(k);
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::ScaleBy(x, s), rg))
    }

    pub fn mul_const(&mut self, x: Var, c: Matrix) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return shape_err("mul_const", self.shape(x), c.shape());
        }
        let mut value = self.value(x).clone();
        for (v, k) in value.data_mut().iter_mut().zip(c.data()) {
            *v *= k;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MulConst(x, c), rg))
    }

    pub fn add_const(&mut self, x: Var, c: &Matrix) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return shape_err("add_const", self.shape(x), c.shape());
        }
        let mut value = self.value(x).clone();
        value.add_assign(c);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::AddConst(x), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let rg = self.rg(&[x]);
        self.push(value, Op::Transpose(x), rg)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start > end || end > c {
            return Err(Error::Shape(format!("column slice {start}..{end} of width {c}")));
        }
        let src = self.value(x);
        let mut value = Matrix::zeros(r, end - start);
        for i in 0..r {
            value.row_mut(i).copy_from_slice(&src.row(i)[start..end]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceCols(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return shape_err("concat_cols", (rows, width), s);
            }
            width += s.1;
        }
        let mut value = Matrix::zeros(rows, width);
        let mut off = 0;
        for &p in parts {
            let src = self.value(p);
            let w = src.cols();
            for i in 0..rows {
                value.row_mut(i)[off..off + w].copy_from_slice(src.row(i));
            }
            off += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.shape(p).1,
            None => return Err(Error::Shape("stack_rows of nothing".into())),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.1 != cols {
                return shape_err("stack_rows", (rows, cols), s);
            }
            data.extend_from_slice(self.value(p).data());
            rows += s.0;
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::StackRows(parts.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!("row index {bad} out of {r}")));
        }
        let src = self.value(x);
        let mut value = Matrix::zeros(idx.len(), c);
        for (o, &i) in idx.iter().enumerate() {
            value.row_mut(o).copy_from_slice(src.row(i));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// Column-wise mean over rows, `n x c -> 1 x c`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r == 0 {
            return Err(Error::Shape("mean over zero rows".into()));
        }
        let src = self.value(x);
        let mut value = Matrix::zeros(1, c);
        for i in 0..r {
            for (o, v) in value.row_mut(0).iter_mut().zip(src.row(i)) {
                *o += v;
            }
        }
        let value = value.scale(1.0 / r as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MeanRows(x), rg))
    }

    /// L2-normalizes every row. Zero rows stay zero and pass no gradient.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let (r, _) = src.shape();
        let mut value = src.clone();
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let n = crate::tensor::l2_norm(src.row(i));
            norms.push(n);
            if n > 0.0 {
                for v in value.row_mut(i) {
                    *v /= n;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::RowNormalize(x, norms), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut value = src.clone();
        for i in 0..src.rows() {
            softmax_in_place(value.row_mut(i));
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::SoftmaxRows(x), rg)
    }

    /// `sum_k w_k * x_k` over equally shaped nodes.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let shape = match terms.first() {
            Some(&(v, _)) => self.shape(v),
            None => return Err(Error::Shape("empty linear combination".into())),
        };
        let mut value = Matrix::zeros(shape.0, shape.1);
        for &(v, w) in terms {
            if self.shape(v) != shape {
                return shape_err("lin_comb", shape, self.shape(v));
            }
            for (o, x) in value.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += w * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(value, Op::LinComb(terms.to_vec()), rg))
    }

    /// Mean over rows `i` of `logsumexp_{j != i} L[i, j] - L[i, targets[i]]`.
    ///
    /// The diagonal is excluded from every denominator; the target entry is
    /// included. Computed with max subtraction.
    pub fn contrastive_ce(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.shape(logits);
        if n != c || targets.len() != n {
            return Err(Error::Shape(format!(
                "contrastive_ce expects square logits with one target per row, got {n}x{c} and {} targets",
                targets.len()
            )));
        }
        if n < 2 {
            return Err(Error::InvalidInput("contrastive_ce needs at least two rows".into()));
        }
        if let Some((i, _)) = targets.iter().enumerate().find(|&(i, &t)| t == i || t >= n) {
            return Err(Error::InvalidInput(format!("row {i} has an invalid target")));
        }
        let src = self.value(logits);
        let mut probs = Matrix::zeros(n, n);
        let mut total = 0.0;
        for i in 0..n {
            let row = src.row(i);
            let max = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if j != i {
                    let e = (v - max).exp();
                    probs.set(i, j, e);
                    z += e;
                }
            }
            for j in 0..n {
                if j != i {
                    probs.set(i, j, probs.get(i, j) / z);
                }
            }
            total += max + z.ln() - row[targets[i]];
        }
        let value = Matrix::filled(1, 1, total / n as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(value, Op::ContrastiveCe { logits, targets: targets.to_vec(), probs }, rg))
    }

    /// Margin ranking hinge over a score matrix.
    ///
    /// For every row `i` with positive column `pos[i]` and negative columns
    /// `negs[i]`, accumulates `mean_j max(S[i, neg_j] - S[i, pos] + margin, 0)`,
    /// then averages over rows.
    pub fn triplet_hinge(&mut self, scores: Var, pos: &[usize], negs: &[Vec<usize>], margin: f64) -> Result<Var> {
        let (n, c) = self.shape(scores);
        if pos.len() != n || negs.len() != n || n == 0 {
            return Err(Error::Shape(format!("triplet_hinge: {n} rows, {} positives, {} negative lists", pos.len(), negs.len())));
        }
        let src = self.value(scores);
        let mut terms = Vec::new();
        let mut total = 0.0;
        for i in 0..n {
            if negs[i].is_empty() {
                return Err(Error::InvalidInput(format!("row {i} has no negatives")));
            }
            if pos[i] >= c || negs[i].iter().any(|&j| j >= c) {
                return Err(Error::Shape(format!("row {i} references a column outside 0..{c}")));
            }
            let w = 1.0 / (n as f64 * negs[i].len() as f64);
            for &j in &negs[i] {
                let h = src.get(i, j) - src.get(i, pos[i]) + margin;
                if h > 0.0 {
                    total += w * h;
                    terms.push(HingeTerm { row: i, pos: pos[i], neg: j, weight: w });
                }
            }
        }
        let value = Matrix::filled(1, 1, total);
        let rg = self.rg(&[scores]);
        Ok(self.push(value, Op::TripletHinge { scores, terms }, rg))
    }

    /// Back-propagates from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(Error::Shape("backward root must be a scalar".into()));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.push_back(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn push_back(&self, idx: usize, gout: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let out = &*node.value;
        let mut acc = |v: Var, g: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    acc(*a, gout.matmul_t(bv));
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, av.t_matmul(gout));
                }
            }
            Op::Add(a, b) => {
                acc(*a, gout.clone());
                acc(*b, gout.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gout.clone());
                acc(*b, gout.scale(-1.0));
            }
            Op::AddRow(x, b) | Op::SubRow(x, b) => {
                acc(*x, gout.clone());
                let sign = if matches!(node.op, Op::AddRow(..)) { 1.0 } else { -1.0 };
                let mut gb = Matrix::zeros(1, gout.cols());
                for r in 0..gout.rows() {
                    for (o, v) in gb.row_mut(0).iter_mut().zip(gout.row(r)) {
                        *o += sign * v;
                    }
                }
                acc(*b, gb);
            }
            Op::Affine(x, a) => acc(*x, gout.scale(*a)),
            Op::ScaleBy(x, s) => {
                let k = self.scalar(*s);
                acc(*x, gout.scale(k));
                let xv = self.value(*x);
                let gs: f64 = gout.data().iter().zip(xv.data()).map(|(g, v)| g * v).sum();
                acc(*s, Matrix::filled(1, 1, gs));
            }
            Op::MulConst(x, c) => {
                let mut g = gout.clone();
                for (v, k) in g.data_mut().iter_mut().zip(c.data()) {
                    *v *= k;
                }
                acc(*x, g);
            }
            Op::AddConst(x) => acc(*x, gout.clone()),
            Op::Tanh(x) => {
                let mut g = gout.clone();
                for (v, y) in g.data_mut().iter_mut().zip(out.data()) {
                    *v *= 1.0 - y * y;
                }
                acc(*x, g);
            }
            Op::Sigmoid(x) => {
                let mut g = gout.clone();
                for (v, y) in g.data_mut().iter_mut().zip(out.data()) {
                    *v *= y * (1.0 - y);
                }
                acc(*x, g);
            }
            Op::Transpose(x) => acc(*x, gout.transpose()),
            Op::SliceCols(x, start) => {
                let (r, c) = self.shape(*x);
                let mut g = Matrix::zeros(r, c);
                let w = gout.cols();
                for i in 0..r {
                    g.row_mut(i)[*start..*start + w].copy_from_slice(gout.row(i));
                }
                acc(*x, g);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, w) = self.shape(p);
                    let mut g = Matrix::zeros(r, w);
                    for i in 0..r {
                        g.row_mut(i).copy_from_slice(&gout.row(i)[off..off + w]);
                    }
                    off += w;
                    acc(p, g);
                }
            }
            Op::StackRows(parts) => {
                let mut row = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let g = Matrix::from_vec(r, c, gout.data()[row * c..(row + r) * c].to_vec()).expect("stacked gradient slice");
                    row += r;
                    acc(p, g);
                }
            }
            Op::GatherRows(x, idx_list) => {
                let (r, c) = self.shape(*x);
                let mut g = Matrix::zeros(r, c);
                for (o, &i) in idx_list.iter().enumerate() {
                    for (d, v) in g.row_mut(i).iter_mut().zip(gout.row(o)) {
                        *d += v;
                    }
                }
                acc(*x, g);
            }
            Op::MeanRows(x) => {
                let (r, c) = self.shape(*x);
                let mut g = Matrix::zeros(r, c);
                let inv = 1.0 / r as f64;
                for i in 0..r {
                    for (d, v) in g.row_mut(i).iter_mut().zip(gout.row(0)) {
                        *d = v * inv;
                    }
                }
                acc(*x, g);
            }
            Op::RowNormalize(x, norms) => {
                // d(x/|x|) = (g - y (y.g)) / |x|
                let (r, c) = self.shape(*x);
                let mut g = Matrix::zeros(r, c);
                for i in 0..r {
                    let n = norms[i];
                    if n == 0.0 {
                        continue;
                    }
                    let y = out.row(i);
                    let go = gout.row(i);
                    let yg = crate::tensor::dot(y, go);
                    for ((d, gv), yv) in g.row_mut(i).iter_mut().zip(go).zip(y) {
                        *d = (gv - yv * yg) / n;
                    }
                }
                acc(*x, g);
            }
            Op::SoftmaxRows(x) => {
                let (r, c) = self.shape(*x);
                let mut g = Matrix::zeros(r, c);
                for i in 0..r {
                    let y = out.row(i);
                    let go = gout.row(i);
                    let yg = crate::tensor::dot(y, go);
                    for ((d, gv), yv) in g.row_mut(i).iter_mut().zip(go).zip(y) {
                        *d = yv * (gv - yg);
                    }
                }
                acc(*x, g);
            }
            Op::LinComb(terms) => {
                for &(v, w) in terms {
                    acc(v, gout.scale(w));
                }
            }
            Op::ContrastiveCe { logits, targets, probs } => {
                let n = targets.len();
                let k = gout.get(0, 0) / n as f64;
                let mut g = probs.scale(k);
                for (i, &t) in targets.iter().enumerate() {
                    g.set(i, t, g.get(i, t) - k);
                }
                acc(*logits, g);
            }
            Op::TripletHinge { scores, terms } => {
                let (r, c) = self.shape(*scores);
                let k = gout.get(0, 0);
                let mut g = Matrix::zeros(r, c);
                for t in terms {
                    g.set(t.row, t.neg, g.get(t.row, t.neg) + k * t.weight);
                    g.set(t.row, t.pos, g.get(t.row, t.pos) - k * t.weight);
                }
                acc(*scores, g);
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
