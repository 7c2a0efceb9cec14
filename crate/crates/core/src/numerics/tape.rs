//! Reverse-mode automatic differentiation over 2-D arrays.
//!
//! Every value on the tape is an `Array2` (rows are batch items, columns are
//! features). Operations are recorded as they are evaluated; [`Tape::backward`]
//! walks the record in reverse and accumulates adjoints.
//!
//! ```
//! use ndarray::array;
//! use talkflow_core::numerics::Tape;
//!
//! let g = Tape::<f64>::new();
//! let x = g.leaf(array![[3.0]]);
//! let y = g.mul(x, x);
//! let grads = g.backward(y);
//! assert_eq!(grads.wrt(x)[[0, 0]], 6.0);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use super::linalg;
use crate::scalar::Scalar;

/// Sentinel for gather positions that read as zero (padding).
pub const PAD: usize = usize::MAX;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Log1p(Var),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Clamp(Var, T, T),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Gather(Var, Rc<Vec<usize>>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    BlockMatMulNT(Var, Var, usize),
    BlockMatMul(Var, Var, usize),
    SegmentMean(Var, usize),
    RepeatRows(Var, usize),
    Inverse(Var),
    GridSample {
        img: Var,
        disp: Var,
        height: usize,
        width: usize,
    },
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
}

/// Records a computation for reverse-mode differentiation.
///
/// A tape is single-use: build a fresh one per forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Array2<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, zeros when `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Array2<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.0]),
        }
    }
}

fn reduce_to<T: Scalar>(g: Array2<T>, shape: (usize, usize)) -> Array2<T> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    debug_assert_eq!(g.dim(), shape);
    g
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn broadcast<T: Scalar>(a: &Array2<T>, shape: (usize, usize)) -> ndarray::ArrayView2<'_, T> {
    a.broadcast(shape)
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {shape:?}", a.dim()))
}

fn binary<T: Scalar>(a: &Array2<T>, b: &Array2<T>, f: impl Fn(T, T) -> T) -> Array2<T> {
    let shape = broadcast_shape(a.dim(), b.dim());
    let mut out = Array2::zeros(shape);
    Zip::from(&mut out)
        .and(&broadcast(a, shape))
        .and(&broadcast(b, shape))
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

fn softmax_rows<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s: T = row.iter().cloned().sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    fn map1(&self, a: Var, f: impl Fn(&Array2<T>) -> Array2<T>) -> Array2<T> {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value)
    }

    fn map2(&self, a: Var, b: Var, f: impl Fn(&Array2<T>, &Array2<T>) -> Array2<T>) -> Array2<T> {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    /// Records an input value; gradients are reported for it.
    pub fn leaf(&self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Alias for [`leaf`](Self::leaf) used where the value is not differentiated.
    pub fn constant(&self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_const(&self, v: T) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    /// Copy of `a`'s value with no gradient path back to `a` (stop-gradient).
    pub fn detach(&self, a: Var) -> Var {
        let v = self.value(a);
        self.push(v, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Array2<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Array2<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.dim()
    }

    /// The single element of a 1×1 value.
    pub fn scalar(&self, v: Var) -> T {
        let nodes = self.nodes.borrow();
        let x = &nodes[v.0].value;
        assert_eq!(x.dim(), (1, 1), "scalar() on non-scalar value");
        x[[0, 0]]
    }

    // ---- elementwise binary (with row/column broadcasting) ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.map2(a, b, |x, y| binary(x, y, |p, q| p + q));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.map2(a, b, |x, y| binary(x, y, |p, q| p - q));
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.map2(a, b, |x, y| binary(x, y, |p, q| p * q));
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let v = self.map2(a, b, |x, y| binary(x, y, |p, q| p / q));
        self.push(v, Op::Div(a, b))
    }

    // ---- elementwise unary ----

    pub fn neg(&self, a: Var) -> Var {
        let v = self.map1(a, |x| x.mapv(|p| -p));
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&self, a: Var, k: T) -> Var {
        let v = self.map1(a, |x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&self, a: Var, k: T) -> Var {
        let v = self.map1(a, |x| x + k);
        self.push(v, Op::AddScalar(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let v = self.map1(a, |x| x.mapv(T::exp));
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        let v = self.map1(a, |x| x.mapv(T::ln));
        self.push(v, Op::Ln(a))
    }

    pub fn log1p(&self, a: Var) -> Var {
        let v = self.map1(a, |x| x.mapv(T::ln_1p));
        self.push(v, Op::Log1p(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let v = self.map1(a, |x| x.mapv(T::tanh));
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.map1(a, |x| x.mapv(sigmoid));
        self.push(v, Op::Sigmoid(a))
    }

    /// x·sigmoid(x)
    pub fn silu(&self, a: Var) -> Var {
        let v = self.map1(a, |x| x.mapv(|p| p * sigmoid(p)));
        self.push(v, Op::Silu(a))
    }

    pub fn square(&self, a: Var) -> Var {
        let v = self.map1(a, |x| x.mapv(|p| p * p));
        self.push(v, Op::Square(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let v = self.map1(a, |x| x.mapv(T::sqrt));
        self.push(v, Op::Sqrt(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        let v = self.map1(a, |x| x.mapv(T::abs));
        self.push(v, Op::Abs(a))
    }

    /// Clamp into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&self, a: Var, lo: T, hi: T) -> Var {
        let v = self.map1(a, |x| x.mapv(|p| p.max(lo).min(hi)));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    // ---- reductions ----

    pub fn sum_all(&self, a: Var) -> Var {
        let v = self.map1(a, |x| Array2::from_elem((1, 1), x.sum()));
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.with_value(a, |x| x.len());
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Sums down each column, giving a `(1, cols)` row.
    pub fn sum_rows(&self, a: Var) -> Var {
        let v = self.map1(a, |x| x.sum_axis(Axis(0)).insert_axis(Axis(0)));
        self.push(v, Op::SumRows(a))
    }

    /// Sums across each row, giving a `(rows, 1)` column.
    pub fn sum_cols(&self, a: Var) -> Var {
        let v = self.map1(a, |x| x.sum_axis(Axis(1)).insert_axis(Axis(1)));
        self.push(v, Op::SumCols(a))
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = self.map2(a, b, |x, y| x.dot(y));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let v = self.map2(a, b, |x, y| x.dot(&y.t()));
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let v = self.map1(a, |x| x.t().as_standard_layout().into_owned());
        self.push(v, Op::Transpose(a))
    }

    /// Inverse of a square matrix.
    pub fn inverse(&self, a: Var) -> Var {
        let v = self.map1(a, |x| {
            linalg::inverse(x).expect("inverse of a singular matrix on the tape")
        });
        self.push(v, Op::Inverse(a))
    }

    // ---- indexing and layout ----

    /// Output element `i` (row-major over `shape`) reads flat element
    /// `index[i]` of `a`, or zero when the index is [`PAD`].
    pub fn gather(&self, a: Var, index: Rc<Vec<usize>>, shape: (usize, usize)) -> Var {
        assert_eq!(index.len(), shape.0 * shape.1, "gather index length");
        let v = self.map1(a, |x| {
            let src = x.as_standard_layout();
            let flat = src.as_slice().unwrap();
            let data: Vec<T> = index
                .iter()
                .map(|&i| if i == PAD { T::zero() } else { flat[i] })
                .collect();
            Array2::from_shape_vec(shape, data).unwrap()
        });
        self.push(v, Op::Gather(a, index))
    }

    /// Selects rows of `a` by index (embedding lookup).
    pub fn gather_rows(&self, a: Var, rows: &[usize]) -> Var {
        let cols = self.shape(a).1;
        let index: Vec<usize> = rows
            .iter()
            .flat_map(|&r| (0..cols).map(move |c| r * cols + c))
            .collect();
        self.gather(a, Rc::new(index), (rows.len(), cols))
    }

    /// Selects columns of `a` in the given order.
    pub fn gather_cols(&self, a: Var, cols: &[usize]) -> Var {
        let (rows, ncols) = self.shape(a);
        let index: Vec<usize> = (0..rows)
            .flat_map(|r| cols.iter().map(move |&c| r * ncols + c))
            .collect();
        self.gather(a, Rc::new(index), (rows, cols.len()))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let v = self.map1(a, |x| x.slice(s![.., start..start + len]).to_owned());
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let v = self.map1(a, |x| x.slice(s![start..start + len, ..]).to_owned());
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch")
        };
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let v = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_rows column mismatch")
        };
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    // ---- normalization and attention helpers ----

    pub fn softmax_rows(&self, a: Var) -> Var {
        let v = self.map1(a, softmax_rows);
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let v = self.map1(a, |x| {
            let mut out = x.clone();
            for mut row in out.rows_mut() {
                let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
                row.mapv_inplace(|v| v - lse);
            }
            out
        });
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Per-block `a_b · b_bᵀ` where both inputs stack `blocks` equal row blocks.
    pub fn block_matmul_nt(&self, a: Var, b: Var, blocks: usize) -> Var {
        let v = self.map2(a, b, |x, y| {
            let la = x.nrows() / blocks;
            let lb = y.nrows() / blocks;
            let mut out = Array2::zeros((x.nrows(), lb));
            for k in 0..blocks {
                let xa = x.slice(s![k * la..(k + 1) * la, ..]);
                let yb = y.slice(s![k * lb..(k + 1) * lb, ..]);
                out.slice_mut(s![k * la..(k + 1) * la, ..])
                    .assign(&xa.dot(&yb.t()));
            }
            out
        });
        self.push(v, Op::BlockMatMulNT(a, b, blocks))
    }

    /// Per-block `p_b · v_b`.
    pub fn block_matmul(&self, p: Var, v: Var, blocks: usize) -> Var {
        let out = self.map2(p, v, |x, y| {
            let la = x.nrows() / blocks;
            let lb = y.nrows() / blocks;
            let mut out = Array2::zeros((x.nrows(), y.ncols()));
            for k in 0..blocks {
                let xa = x.slice(s![k * la..(k + 1) * la, ..]);
                let yb = y.slice(s![k * lb..(k + 1) * lb, ..]);
                out.slice_mut(s![k * la..(k + 1) * la, ..])
                    .assign(&xa.dot(&yb));
            }
            out
        });
        self.push(out, Op::BlockMatMul(p, v, blocks))
    }

    /// Mean over consecutive groups of `seg` rows: `(B·seg, c) → (B, c)`.
    pub fn segment_mean(&self, a: Var, seg: usize) -> Var {
        let v = self.map1(a, |x| {
            let b = x.nrows() / seg;
            let mut out = Array2::zeros((b, x.ncols()));
            for k in 0..b {
                let m = x
                    .slice(s![k * seg..(k + 1) * seg, ..])
                    .mean_axis(Axis(0))
                    .unwrap();
                out.row_mut(k).assign(&m);
            }
            out
        });
        self.push(v, Op::SegmentMean(a, seg))
    }

    /// Repeats each row `times` times consecutively: `(B, c) → (B·times, c)`.
    pub fn repeat_rows(&self, a: Var, times: usize) -> Var {
        let v = self.map1(a, |x| {
            let mut out = Array2::zeros((x.nrows() * times, x.ncols()));
            for (k, row) in x.rows().into_iter().enumerate() {
                for r in 0..times {
                    out.row_mut(k * times + r).assign(&row);
                }
            }
            out
        });
        self.push(v, Op::RepeatRows(a, times))
    }

    /// Bilinear resampling of `img` (rows ordered `(batch, y, x)`, one column
    /// per channel) at each pixel's own position plus `disp` (columns `dx, dy`
    /// in pixels). Coordinates are clamped to the image border.
    pub fn grid_sample(&self, img: Var, disp: Var, height: usize, width: usize) -> Var {
        let v = self.map2(img, disp, |im, d| {
            let hw = height * width;
            assert_eq!(im.nrows() % hw, 0, "grid_sample image rows");
            assert_eq!(d.dim(), (im.nrows(), 2), "grid_sample displacement shape");
            let mut out = Array2::zeros(im.dim());
            for row in 0..im.nrows() {
                let b = row / hw;
                let p = row % hw;
                let (y, x) = (p / width, p % width);
                let tap = BilinearTap::new(
                    T::c(x as f64) + d[[row, 0]],
                    T::c(y as f64) + d[[row, 1]],
                    height,
                    width,
                );
                for c in 0..im.ncols() {
                    out[[row, c]] = tap.sample(|yy, xx| im[[b * hw + yy * width + xx, c]]);
                }
            }
            out
        });
        self.push(
            v,
            Op::GridSample {
                img,
                disp,
                height,
                width,
            },
        )
    }

    /// Value of `hard`, gradient passed unchanged to `soft` (straight-through estimator).
    pub fn straight_through(&self, hard: Array2<T>, soft: Var) -> Var {
        assert_eq!(hard.dim(), self.shape(soft), "straight_through shapes");
        self.push(hard, Op::StraightThrough(soft))
    }

    // ---- backward ----

    /// Adjoints of every recorded value with respect to the 1×1 output `out`.
    pub fn backward(&self, out: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        assert_eq!(nodes[out.0].value.dim(), (1, 1), "backward from non-scalar");
        let shapes: Vec<_> = nodes.iter().map(|n| n.value.dim()).collect();
        let mut grads: Vec<Option<Array2<T>>> = vec![None; n];
        grads[out.0] = Some(Array2::ones((1, 1)));

        fn acc<T: Scalar>(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.zip_mut_with(&g, |a, &b| *a = *a + b),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            let node = &nodes[i];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut grads, *a, reduce_to(g.clone(), shapes[a.0]));
                    acc(&mut grads, *b, reduce_to(g.clone(), shapes[b.0]));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, reduce_to(g.clone(), shapes[a.0]));
                    acc(&mut grads, *b, reduce_to(g.mapv(|x| -x), shapes[b.0]));
                }
                Op::Mul(a, b) => {
                    let ga = binary(&g, val(*b), |x, y| x * y);
                    let gb = binary(&g, val(*a), |x, y| x * y);
                    acc(&mut grads, *a, reduce_to(ga, shapes[a.0]));
                    acc(&mut grads, *b, reduce_to(gb, shapes[b.0]));
                }
                Op::Div(a, b) => {
                    let ga = binary(&g, val(*b), |x, y| x / y);
                    let q = binary(&g, &node.value, |x, y| x * y);
                    let gb = binary(&q, val(*b), |x, y| -x / y);
                    acc(&mut grads, *a, reduce_to(ga, shapes[a.0]));
                    acc(&mut grads, *b, reduce_to(gb, shapes[b.0]));
                }
                Op::Neg(a) => acc(&mut grads, *a, g.mapv(|x| -x)),
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::AddScalar(a) => acc(&mut grads, *a, g.clone()),
                Op::Exp(a) => acc(&mut grads, *a, g * &node.value),
                Op::Ln(a) => acc(&mut grads, *a, g / val(*a)),
                Op::Log1p(a) => acc(&mut grads, *a, g / &val(*a).mapv(|x| x + T::one())),
                Op::Tanh(a) => {
                    let d = node.value.mapv(|y| T::one() - y * y);
                    acc(&mut grads, *a, g * &d)
                }
                Op::Sigmoid(a) => {
                    let d = node.value.mapv(|y| y * (T::one() - y));
                    acc(&mut grads, *a, g * &d)
                }
                Op::Silu(a) => {
                    let d = val(*a).mapv(|x| {
                        let s = sigmoid(x);
                        s * (T::one() + x * (T::one() - s))
                    });
                    acc(&mut grads, *a, g * &d)
                }
                Op::Square(a) => acc(&mut grads, *a, g * &val(*a).mapv(|x| x + x)),
                Op::Sqrt(a) => {
                    let d = node.value.mapv(|y| T::c(0.5) / y);
                    acc(&mut grads, *a, g * &d)
                }
                Op::Abs(a) => acc(&mut grads, *a, g * &val(*a).mapv(T::signum)),
                Op::Clamp(a, lo, hi) => {
                    let d = val(*a).mapv(|x| {
                        if x < *lo || x > *hi {
                            T::zero()
                        } else {
                            T::one()
                        }
                    });
                    acc(&mut grads, *a, g * &d)
                }
                Op::SumAll(a) => {
                    let s = g[[0, 0]];
                    acc(&mut grads, *a, Array2::from_elem(shapes[a.0], s))
                }
                Op::SumRows(a) => {
                    let full = g.broadcast(shapes[a.0]).unwrap().to_owned();
                    acc(&mut grads, *a, full)
                }
                Op::SumCols(a) => {
                    let full = g.broadcast(shapes[a.0]).unwrap().to_owned();
                    acc(&mut grads, *a, full)
                }
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&val(*b).t()));
                    acc(&mut grads, *b, val(*a).t().dot(&g));
                }
                Op::MatMulNT(a, b) => {
                    acc(&mut grads, *a, g.dot(val(*b)));
                    acc(&mut grads, *b, g.t().dot(val(*a)));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().as_standard_layout().into_owned()),
                Op::Inverse(a) => {
                    // d(A⁻¹) = -A⁻¹ dA A⁻¹  ⇒  Ā = -A⁻ᵀ Ȳ A⁻ᵀ
                    let inv_t = node.value.t();
                    let ga = inv_t.dot(&g).dot(&inv_t).mapv(|x| -x);
                    acc(&mut grads, *a, ga)
                }
                Op::Gather(a, index) => {
                    let mut ga = Array2::zeros(shapes[a.0]);
                    {
                        let flat = ga.as_slice_mut().unwrap();
                        let gs = g.as_standard_layout();
                        for (&src, &gv) in index.iter().zip(gs.iter()) {
                            if src != PAD {
                                flat[src] = flat[src] + gv;
                            }
                        }
                    }
                    acc(&mut grads, *a, ga)
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(shapes[a.0]);
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga)
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(shapes[a.0]);
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga)
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = shapes[p.0].1;
                        acc(&mut grads, *p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = shapes[p.0].0;
                        acc(&mut grads, *p, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    Zip::from(ga.rows_mut())
                        .and(y.rows())
                        .for_each(|mut gr, yr| {
                            let dot: T = gr.iter().zip(yr.iter()).map(|(&p, &q)| p * q).sum();
                            Zip::from(&mut gr).and(&yr).for_each(|gv, &yv| {
                                *gv = yv * (*gv - dot);
                            });
                        });
                    acc(&mut grads, *a, ga)
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    Zip::from(ga.rows_mut())
                        .and(y.rows())
                        .for_each(|mut gr, yr| {
                            let total: T = gr.iter().cloned().sum();
                            Zip::from(&mut gr).and(&yr).for_each(|gv, &yv| {
                                *gv = *gv - yv.exp() * total;
                            });
                        });
                    acc(&mut grads, *a, ga)
                }
                Op::BlockMatMulNT(a, b, blocks) => {
                    let (xa, yb) = (val(*a), val(*b));
                    let la = xa.nrows() / blocks;
                    let lb = yb.nrows() / blocks;
                    let mut ga = Array2::zeros(xa.dim());
                    let mut gb = Array2::zeros(yb.dim());
                    for k in 0..*blocks {
                        let gk = g.slice(s![k * la..(k + 1) * la, ..]);
                        let ak = xa.slice(s![k * la..(k + 1) * la, ..]);
                        let bk = yb.slice(s![k * lb..(k + 1) * lb, ..]);
                        ga.slice_mut(s![k * la..(k + 1) * la, ..])
                            .assign(&gk.dot(&bk));
                        gb.slice_mut(s![k * lb..(k + 1) * lb, ..])
                            .assign(&gk.t().dot(&ak));
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::BlockMatMul(p, v, blocks) => {
                    let (xp, yv) = (val(*p), val(*v));
                    let la = xp.nrows() / blocks;
                    let lb = yv.nrows() / blocks;
                    let mut gp = Array2::zeros(xp.dim());
                    let mut gv = Array2::zeros(yv.dim());
                    for k in 0..*blocks {
                        let gk = g.slice(s![k * la..(k + 1) * la, ..]);
                        let pk = xp.slice(s![k * la..(k + 1) * la, ..]);
                        let vk = yv.slice(s![k * lb..(k + 1) * lb, ..]);
                        gp.slice_mut(s![k * la..(k + 1) * la, ..])
                            .assign(&gk.dot(&vk.t()));
                        gv.slice_mut(s![k * lb..(k + 1) * lb, ..])
                            .assign(&pk.t().dot(&gk));
                    }
                    acc(&mut grads, *p, gp);
                    acc(&mut grads, *v, gv);
                }
                Op::SegmentMean(a, seg) => {
                    let inv = T::one() / T::c(*seg as f64);
                    let mut ga = Array2::zeros(shapes[a.0]);
                    for (k, row) in g.rows().into_iter().enumerate() {
                        for r in 0..*seg {
                            ga.row_mut(k * seg + r).assign(&(&row * inv));
                        }
                    }
                    acc(&mut grads, *a, ga)
                }
                Op::RepeatRows(a, times) => {
                    let mut ga = Array2::zeros(shapes[a.0]);
                    for k in 0..ga.nrows() {
                        let sum = g
                            .slice(s![k * times..(k + 1) * times, ..])
                            .sum_axis(Axis(0));
                        ga.row_mut(k).assign(&sum);
                    }
                    acc(&mut grads, *a, ga)
                }
                Op::GridSample {
                    img,
                    disp,
                    height,
                    width,
                } => {
                    let (im, d) = (val(*img), val(*disp));
                    let hw = height * width;
                    let mut gi = Array2::zeros(im.dim());
                    let mut gd = Array2::zeros(d.dim());
                    for row in 0..im.nrows() {
                        let b = row / hw;
                        let p = row % hw;
                        let (y, x) = (p / width, p % width);
                        let tap = BilinearTap::new(
                            T::c(x as f64) + d[[row, 0]],
                            T::c(y as f64) + d[[row, 1]],
                            *height,
                            *width,
                        );
                        let base = b * hw;
                        for c in 0..im.ncols() {
                            let go = g[[row, c]];
                            let at = |yy: usize, xx: usize| im[[base + yy * width + xx, c]];
                            for (yy, xx, w) in tap.weights() {
                                let r = base + yy * width + xx;
                                gi[[r, c]] = gi[[r, c]] + go * w;
                            }
                            let (dx, dy) = tap.coord_grads(at);
                            gd[[row, 0]] = gd[[row, 0]] + go * dx;
                            gd[[row, 1]] = gd[[row, 1]] + go * dy;
                        }
                    }
                    acc(&mut grads, *img, gi);
                    acc(&mut grads, *disp, gd);
                }
                Op::StraightThrough(soft) => acc(&mut grads, *soft, g.clone()),
            }
        }
        Grads { grads, shapes }
    }
}

/// Bilinear interpolation footprint at a clamped sampling position.
#[derive(Debug, Clone, Copy)]
struct BilinearTap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
    // Whether the coordinate was inside the clamp range (gradient passes).
    live_x: bool,
    live_y: bool,
}

impl<T: Scalar> BilinearTap<T> {
    fn new(sx: T, sy: T, height: usize, width: usize) -> Self {
        let maxx = T::c((width - 1) as f64);
        let maxy = T::c((height - 1) as f64);
        let live_x = sx > T::zero() && sx < maxx;
        let live_y = sy > T::zero() && sy < maxy;
        let cx = sx.max(T::zero()).min(maxx);
        let cy = sy.max(T::zero()).min(maxy);
        let x0 = cx.floor().to_usize().unwrap().min(width - 1);
        let y0 = cy.floor().to_usize().unwrap().min(height - 1);
        Self {
            x0,
            x1: (x0 + 1).min(width - 1),
            y0,
            y1: (y0 + 1).min(height - 1),
            fx: cx - T::c(x0 as f64),
            fy: cy - T::c(y0 as f64),
            live_x,
            live_y,
        }
    }

    fn weights(&self) -> [(usize, usize, T); 4] {
        let one = T::one();
        [
            (self.y0, self.x0, (one - self.fx) * (one - self.fy)),
            (self.y0, self.x1, self.fx * (one - self.fy)),
            (self.y1, self.x0, (one - self.fx) * self.fy),
            (self.y1, self.x1, self.fx * self.fy),
        ]
    }

    fn sample(&self, at: impl Fn(usize, usize) -> T) -> T {
        self.weights().iter().map(|&(y, x, w)| w * at(y, x)).sum()
    }

    fn coord_grads(&self, at: impl Fn(usize, usize) -> T) -> (T, T) {
        let one = T::one();
        let (a, b, c, d) = (
            at(self.y0, self.x0),
            at(self.y0, self.x1),
            at(self.y1, self.x0),
            at(self.y1, self.x1),
        );
        let dx = if self.live_x {
            (one - self.fy) * (b - a) + self.fy * (d - c)
        } else {
            T::zero()
        };
        let dy = if self.live_y {
            (one - self.fx) * (c - a) + self.fx * (d - b)
        } else {
            T::zero()
        };
        (dx, dy)
    }
}
