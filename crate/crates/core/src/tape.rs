//! Eager reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix. Images and feature grids use a
//! pixel-major layout: an `H×W×C` grid is stored as a `(H·W) × C` matrix with
//! row index `y·W + x`.
//!
//! Gradients are themselves tape nodes, so most ops can be differentiated
//! twice (needed for the R1 penalty). Ops registered through [`Function`] are
//! first-order only: their vector-Jacobian products enter the tape as
//! constants.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A first-order differentiable operation implemented outside the tape.
pub trait Function: Send + Sync {
    fn name(&self) -> &'static str;
    /// Returns one gradient per input, `None` where the input is not
    /// differentiable.
    fn backward(&self, inputs: &[&Mat], output: &Mat, grad: &Mat) -> Vec<Option<Mat>>;
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    SumRows(Var),
    SumCols(Var),
    Sum(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    BroadcastScalar(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    Tanh(Var),
    Exp(Var),
    Pow(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    PadCols(Var, usize),
    PadRows(Var, usize),
    GatherRows(Var, Arc<[usize]>),
    ScatterRows(Var, Arc<[usize]>),
    Reshape(Var),
    Im2Col { a: Var, h: usize, w: usize },
    Col2Im { a: Var, h: usize, w: usize },
    AvgPool { a: Var, h: usize, w: usize },
    AvgPoolAdjoint { a: Var, h: usize, w: usize },
    Custom(Vec<Var>, Box<dyn Function>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } => vec![*a, *b],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b) | MulCol(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _)
            | AddScalar(a)
            | SumRows(a)
            | SumCols(a)
            | Sum(a)
            | BroadcastRows(a)
            | BroadcastCols(a)
            | BroadcastScalar(a)
            | LeakyRelu(a, _)
            | Sigmoid(a)
            | Softplus(a)
            | Tanh(a)
            | Exp(a)
            | Pow(a, _)
            | SliceCols(a, _)
            | SliceRows(a, _)
            | PadCols(a, _)
            | PadRows(a, _)
            | GatherRows(a, _)
            | ScatterRows(a, _)
            | Reshape(a)
            | Im2Col { a, .. }
            | Col2Im { a, .. }
            | AvgPool { a, .. }
            | AvgPoolAdjoint { a, .. } => vec![*a],
            ConcatCols(v) | ConcatRows(v) | Custom(v, _) => v.clone(),
        }
    }
}

struct Node {
    value: Mat,
    op: Op,
}

/// Append-only computation graph with eagerly evaluated values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mm(a: &Mat, b: &Mat, ta: bool, tb: bool) -> Mat {
    match (ta, tb) {
        (false, false) => a.dot(b),
        (false, true) => a.dot(&b.t()),
        (true, false) => a.t().dot(b),
        (true, true) => a.t().dot(&b.t()),
    }
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
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

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Zero-padded 3×3 patch extraction: `(h·w)×c` to `(h·w)×9c`, column
/// `(ky·3 + kx)·c + ch`.
pub fn im2col3(x: &Mat, h: usize, w: usize) -> Mat {
    let c = x.ncols();
    let mut out = Mat::zeros((h * w, 9 * c));
    for y in 0..h {
        for xx in 0..w {
            let row = y * w + xx;
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = sy as usize * w + sx as usize;
                    let off = (ky * 3 + kx) * c;
                    out.slice_mut(s![row, off..off + c])
                        .assign(&x.row(src));
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col3`].
pub fn col2im3(cols: &Mat, h: usize, w: usize) -> Mat {
    let c = cols.ncols() / 9;
    let mut out = Mat::zeros((h * w, c));
    for y in 0..h {
        for xx in 0..w {
            let row = y * w + xx;
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = sy as usize * w + sx as usize;
                    let off = (ky * 3 + kx) * c;
                    let mut target = out.row_mut(dst);
                    target += &cols.slice(s![row, off..off + c]);
                }
            }
        }
    }
    out
}

/// 2×2 box downsampling of an `(h·w)×c` grid.
pub fn avg_pool2(x: &Mat, h: usize, w: usize) -> Mat {
    let (oh, ow) = (h / 2, w / 2);
    let c = x.ncols();
    let mut out = Mat::zeros((oh * ow, c));
    for y in 0..oh {
        for xx in 0..ow {
            let mut dst = out.row_mut(y * ow + xx);
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                dst += &x.row((2 * y + dy) * w + 2 * xx + dx);
            }
            dst *= 0.25;
        }
    }
    out
}

/// Adjoint of [`avg_pool2`]; `h, w` are the full-resolution dimensions.
pub fn avg_pool2_adjoint(g: &Mat, h: usize, w: usize) -> Mat {
    let ow = w / 2;
    let mut out = Mat::zeros((h * w, g.ncols()));
    for y in 0..h {
        for xx in 0..w {
            let src = g.row((y / 2) * ow + xx / 2);
            out.row_mut(y * w + xx).assign(&(&src * 0.25));
        }
    }
    out
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, x: f64) -> Var {
        self.leaf(Mat::from_elem((1, 1), x))
    }

    pub fn row_leaf(&mut self, values: &[f64]) -> Var {
        self.leaf(Mat::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape"))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let v = mm(self.value(a), self.value(b), ta, tb);
        self.push(v, Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    /// `a + r` with `r` a `1×m` row broadcast over rows.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let v = self.value(a) + self.value(r);
        self.push(v, Op::AddRow(a, r))
    }

    /// `a ⊙ r` with `r` a `1×m` row broadcast over rows.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let v = self.value(a) * self.value(r);
        self.push(v, Op::MulRow(a, r))
    }

    /// `a ⊙ c` with `c` an `n×1` column broadcast over columns.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let v = self.value(a) * self.value(c);
        self.push(v, Op::MulCol(a, c))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(a))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let m = self.value(a).ncols();
        let v = self
            .value(a)
            .broadcast((n, m))
            .expect("broadcast row")
            .to_owned();
        self.push(v, Op::BroadcastRows(a))
    }

    pub fn broadcast_cols(&mut self, a: Var, m: usize) -> Var {
        let n = self.value(a).nrows();
        let v = self
            .value(a)
            .broadcast((n, m))
            .expect("broadcast col")
            .to_owned();
        self.push(v, Op::BroadcastCols(a))
    }

    pub fn broadcast_scalar(&mut self, a: Var, n: usize, m: usize) -> Var {
        let v = Mat::from_elem((n, m), self.scalar(a));
        self.push(v, Op::BroadcastScalar(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).mapv(|x| leaky_relu(x, slope));
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        let v = if p == 2.0 {
            self.value(a).mapv(|x| x * x)
        } else {
            self.value(a).mapv(|x| x.powf(p))
        };
        self.push(v, Op::Pow(a, p))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.pow(a, 2.0)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shapes");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shapes");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + width]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Var {
        let (n, m) = self.shape(a);
        let mut v = Mat::zeros((n, total));
        v.slice_mut(s![.., start..start + m]).assign(self.value(a));
        self.push(v, Op::PadCols(a, start))
    }

    fn pad_rows(&mut self, a: Var, start: usize, total: usize) -> Var {
        let (n, m) = self.shape(a);
        let mut v = Mat::zeros((total, m));
        v.slice_mut(s![start..start + n, ..]).assign(self.value(a));
        self.push(v, Op::PadRows(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), idx);
        self.push(v, Op::GatherRows(a, Arc::from(idx)))
    }

    /// Scatter-add rows of `a` into an `n`-row zero matrix.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], n: usize) -> Var {
        let src = self.value(a);
        let mut v = Mat::zeros((n, src.ncols()));
        for (i, &dst) in idx.iter().enumerate() {
            let mut row = v.row_mut(dst);
            row += &src.row(i);
        }
        self.push(v, Op::ScatterRows(a, Arc::from(idx)))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let v = Mat::from_shape_vec((rows, cols), flat).expect("reshape size");
        self.push(v, Op::Reshape(a))
    }

    pub fn im2col3(&mut self, a: Var, h: usize, w: usize) -> Var {
        let v = im2col3(self.value(a), h, w);
        self.push(v, Op::Im2Col { a, h, w })
    }

    fn col2im3(&mut self, a: Var, h: usize, w: usize) -> Var {
        let v = col2im3(self.value(a), h, w);
        self.push(v, Op::Col2Im { a, h, w })
    }

    pub fn avg_pool2(&mut self, a: Var, h: usize, w: usize) -> Var {
        let v = avg_pool2(self.value(a), h, w);
        self.push(v, Op::AvgPool { a, h, w })
    }

    fn avg_pool2_adjoint(&mut self, a: Var, h: usize, w: usize) -> Var {
        let v = avg_pool2_adjoint(self.value(a), h, w);
        self.push(v, Op::AvgPoolAdjoint { a, h, w })
    }

    /// Registers an externally computed value with a first-order backward.
    pub fn custom(&mut self, inputs: &[Var], value: Mat, f: Box<dyn Function>) -> Var {
        self.push(value, Op::Custom(inputs.to_vec(), f))
    }

    /// Linear combination `(1 − t)·a + t·b`.
    pub fn lerp(&mut self, a: Var, b: Var, t: f64) -> Var {
        let sa = self.scale(a, 1.0 - t);
        let sb = self.scale(b, t);
        self.add(sa, sb)
    }

    fn accumulate(&mut self, grads: &mut [Option<Var>], at: Var, g: Var) {
        let slot = &mut grads[at.0];
        *slot = Some(match *slot {
            None => g,
            Some(prev) => self.add(prev, g),
        });
    }

    /// Gradients of the `1×1` node `output` with respect to each of `wrt`.
    ///
    /// The gradient nodes live on this tape and may be differentiated again
    /// unless the path passes through a [`Function`].
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Vec<Option<Var>> {
        assert_eq!(self.shape(output), (1, 1), "grad requires a scalar output");
        let end = output.0 + 1;
        let mut requires = vec![false; end];
        for w in wrt {
            if w.0 < end {
                requires[w.0] = true;
            }
        }
        for i in 0..end {
            if !requires[i] && self.nodes[i].op.inputs().iter().any(|v| requires[v.0]) {
                requires[i] = true;
            }
        }
        let mut grads: Vec<Option<Var>> = vec![None; end];
        if !requires[output.0] {
            return vec![None; wrt.len()];
        }
        let seed = self.leaf(Mat::ones((1, 1)));
        grads[output.0] = Some(seed);
        for i in (0..end).rev() {
            let Some(g) = grads[i] else { continue };
            if !requires[i] {
                continue;
            }
            let contributions = self.vjp(Var(i), g, &requires);
            for (input, gi) in contributions {
                self.accumulate(&mut grads, input, gi);
            }
        }
        wrt.iter()
            .map(|w| if w.0 < end { grads[w.0] } else { None })
            .collect()
    }

    fn vjp(&mut self, node: Var, g: Var, requires: &[bool]) -> Vec<(Var, Var)> {
        let need = |v: &Var| requires[v.0];
        let mut out = Vec::new();
        // Ops are matched by reference through a temporary take so that new
        // nodes can be pushed while handling them.
        let op = std::mem::replace(&mut self.nodes[node.0].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b) = (*a, *b);
                if need(&a) {
                    let ga = match (ta, tb) {
                        (false, false) => self.matmul_t(g, b, false, true),
                        (false, true) => self.matmul_t(g, b, false, false),
                        (true, false) => self.matmul_t(b, g, false, true),
                        (true, true) => self.matmul_t(b, g, true, true),
                    };
                    out.push((a, ga));
                }
                if need(&b) {
                    let gb = match (ta, tb) {
                        (false, false) => self.matmul_t(a, g, true, false),
                        (false, true) => self.matmul_t(g, a, true, false),
                        (true, false) => self.matmul_t(a, g, false, false),
                        (true, true) => self.matmul_t(g, a, true, true),
                    };
                    out.push((b, gb));
                }
            }
            Op::Add(a, b) => {
                if need(a) {
                    out.push((*a, g));
                }
                if need(b) {
                    out.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    out.push((*a, g));
                }
                if need(b) {
                    let n = self.neg(g);
                    out.push((*b, n));
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if need(&a) {
                    let ga = self.mul(g, b);
                    out.push((a, ga));
                }
                if need(&b) {
                    let gb = self.mul(g, a);
                    out.push((b, gb));
                }
            }
            Op::Scale(a, c) => {
                let ga = self.scale(g, *c);
                out.push((*a, ga));
            }
            Op::AddScalar(a) => out.push((*a, g)),
            Op::AddRow(a, r) => {
                if need(a) {
                    out.push((*a, g));
                }
                if need(r) {
                    let gr = self.sum_rows(g);
                    out.push((*r, gr));
                }
            }
            Op::MulRow(a, r) => {
                let (a, r) = (*a, *r);
                if need(&a) {
                    let ga = self.mul_row(g, r);
                    out.push((a, ga));
                }
                if need(&r) {
                    let p = self.mul(g, a);
                    let gr = self.sum_rows(p);
                    out.push((r, gr));
                }
            }
            Op::MulCol(a, c) => {
                let (a, c) = (*a, *c);
                if need(&a) {
                    let ga = self.mul_col(g, c);
                    out.push((a, ga));
                }
                if need(&c) {
                    let p = self.mul(g, a);
                    let gc = self.sum_cols(p);
                    out.push((c, gc));
                }
            }
            Op::SumRows(a) => {
                let n = self.shape(*a).0;
                let ga = self.broadcast_rows(g, n);
                out.push((*a, ga));
            }
            Op::SumCols(a) => {
                let m = self.shape(*a).1;
                let ga = self.broadcast_cols(g, m);
                out.push((*a, ga));
            }
            Op::Sum(a) => {
                let (n, m) = self.shape(*a);
                let ga = self.broadcast_scalar(g, n, m);
                out.push((*a, ga));
            }
            Op::BroadcastRows(a) => {
                let ga = self.sum_rows(g);
                out.push((*a, ga));
            }
            Op::BroadcastCols(a) => {
                let ga = self.sum_cols(g);
                out.push((*a, ga));
            }
            Op::BroadcastScalar(a) => {
                let ga = self.sum(g);
                out.push((*a, ga));
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let mask = self
                    .value(*a)
                    .mapv(|x| if x >= 0.0 { 1.0 } else { slope });
                let m = self.leaf(mask);
                let ga = self.mul(g, m);
                out.push((*a, ga));
            }
            Op::Sigmoid(a) => {
                let neg = self.neg(node);
                let one_minus = self.add_scalar(neg, 1.0);
                let d = self.mul(node, one_minus);
                let ga = self.mul(g, d);
                out.push((*a, ga));
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(*a);
                let ga = self.mul(g, s);
                out.push((*a, ga));
            }
            Op::Tanh(a) => {
                let sq = self.square(node);
                let neg = self.neg(sq);
                let d = self.add_scalar(neg, 1.0);
                let ga = self.mul(g, d);
                out.push((*a, ga));
            }
            Op::Exp(a) => {
                let ga = self.mul(g, node);
                out.push((*a, ga));
            }
            Op::Pow(a, p) => {
                let p = *p;
                let d = if p == 2.0 {
                    self.scale(*a, 2.0)
                } else {
                    let q = self.pow(*a, p - 1.0);
                    self.scale(q, p)
                };
                let ga = self.mul(g, d);
                out.push((*a, ga));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if need(p) {
                        let gp = self.slice_cols(g, off, w);
                        out.push((*p, gp));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.shape(*p).0;
                    if need(p) {
                        let gp = self.slice_rows(g, off, n);
                        out.push((*p, gp));
                    }
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let total = self.shape(*a).1;
                let ga = self.pad_cols(g, *start, total);
                out.push((*a, ga));
            }
            Op::SliceRows(a, start) => {
                let total = self.shape(*a).0;
                let ga = self.pad_rows(g, *start, total);
                out.push((*a, ga));
            }
            Op::PadCols(a, start) => {
                let w = self.shape(*a).1;
                let ga = self.slice_cols(g, *start, w);
                out.push((*a, ga));
            }
            Op::PadRows(a, start) => {
                let n = self.shape(*a).0;
                let ga = self.slice_rows(g, *start, n);
                out.push((*a, ga));
            }
            Op::GatherRows(a, idx) => {
                let n = self.shape(*a).0;
                let ga = self.scatter_rows(g, idx, n);
                out.push((*a, ga));
            }
            Op::ScatterRows(a, idx) => {
                let ga = self.gather_rows(g, idx);
                out.push((*a, ga));
            }
            Op::Reshape(a) => {
                let (n, m) = self.shape(*a);
                let ga = self.reshape(g, n, m);
                out.push((*a, ga));
            }
            Op::Im2Col { a, h, w } => {
                let ga = self.col2im3(g, *h, *w);
                out.push((*a, ga));
            }
            Op::Col2Im { a, h, w } => {
                let ga = self.im2col3(g, *h, *w);
                out.push((*a, ga));
            }
            Op::AvgPool { a, h, w } => {
                let ga = self.avg_pool2_adjoint(g, *h, *w);
                out.push((*a, ga));
            }
            Op::AvgPoolAdjoint { a, h, w } => {
                let ga = self.avg_pool2(g, *h, *w);
                out.push((*a, ga));
            }
            Op::Custom(inputs, f) => {
                let grads = {
                    let ins: Vec<&Mat> = inputs.iter().map(|v| self.value(*v)).collect();
                    f.backward(&ins, self.value(node), self.value(g))
                };
                for (input, gi) in inputs.iter().zip(grads) {
                    if let Some(gi) = gi {
                        if need(input) {
                            let gv = self.leaf(gi);
                            out.push((*input, gv));
                        }
                    }
                }
            }
        }
        self.nodes[node.0].op = op;
        out
    }
}

/// Elementwise `a ⊙ b` into a fresh matrix, used by custom backward passes.
pub fn hadamard(a: &Mat, b: &Mat) -> Mat {
    let mut out = a.clone();
    Zip::from(&mut out).and(b).for_each(|x, &y| *x *= y);
    out
}
