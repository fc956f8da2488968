use std::fmt;
use std::str::FromStr;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Relu,
    /// Negative slope 0.01.
    LeakyRelu,
    Relu6,
    Identity,
    Tanh,
    Sigmoid,
    Sqrt,
}

impl UnaryOp {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            UnaryOp::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            UnaryOp::LeakyRelu => {
                if x > T::zero() {
                    x
                } else {
                    x * T::from_f64(LEAKY_SLOPE)
                }
            }
            UnaryOp::Relu6 => x.max(T::zero()).min(T::from_f64(6.0)),
            UnaryOp::Identity => x,
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Sigmoid => {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            }
            UnaryOp::Sqrt => x.sqrt(),
        }
    }

    /// Derivative at input `x` given the forward output `y`.
    ///
    /// Kinks take the left-hand slope, so ReLU has derivative 0 at 0.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            UnaryOp::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            UnaryOp::LeakyRelu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::from_f64(LEAKY_SLOPE)
                }
            }
            UnaryOp::Relu6 => {
                if x > T::zero() && x < T::from_f64(6.0) {
                    T::one()
                } else {
                    T::zero()
                }
            }
            UnaryOp::Identity => T::one(),
            UnaryOp::Tanh => T::one() - y * y,
            UnaryOp::Sigmoid => y * (T::one() - y),
            UnaryOp::Sqrt => T::one() / (y + y),
        }
    }

    /// Points where the function is not differentiable.
    pub fn has_kink_at<T: Scalar>(self, x: T) -> bool {
        match self {
            UnaryOp::Relu | UnaryOp::LeakyRelu => x == T::zero(),
            UnaryOp::Relu6 => x == T::zero() || x == T::from_f64(6.0),
            _ => false,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Relu => "relu",
            UnaryOp::LeakyRelu => "leaky_relu",
            UnaryOp::Relu6 => "relu6",
            UnaryOp::Identity => "identity",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Sqrt => "sqrt",
        }
    }
}

impl fmt::Display for UnaryOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UnaryOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "relu" => UnaryOp::Relu,
            "leaky_relu" | "leakyrelu" => UnaryOp::LeakyRelu,
            "relu6" => UnaryOp::Relu6,
            "identity" | "linear" => UnaryOp::Identity,
            "tanh" => UnaryOp::Tanh,
            "sigmoid" => UnaryOp::Sigmoid,
            "sqrt" => UnaryOp::Sqrt,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown elementwise function `{other}`"
                )))
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    #[inline]
    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

pub fn unary<T: Scalar>(op: UnaryOp, a: &Tensor<T>) -> Result<Tensor<T>> {
    if op == UnaryOp::Sqrt {
        if let Some(pos) = a.data().iter().position(|&v| v < T::zero()) {
            return Err(Error::Numeric(format!("sqrt of negative value at index {pos}")));
        }
    }
    Ok(a.map(|v| op.apply(v)))
}

/// How the elements of `b` line up with the elements of `a`.
enum Broadcast {
    Same,
    Scalar,
    /// `b` is a trailing block of `a` (repeated with period `len`).
    Suffix(usize),
    /// Per-axis strides into `b`, zero on broadcast axes.
    Strided(Vec<usize>),
}

fn broadcast_plan(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    let err = || Error::Broadcast {
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a == b {
        return Ok(Broadcast::Same);
    }
    if b.len() > a.len() {
        return Err(err());
    }
    let nb: usize = b.iter().product();
    if nb == 1 {
        return Ok(Broadcast::Scalar);
    }
    let offset = a.len() - b.len();
    if a[offset..] == *b {
        return Ok(Broadcast::Suffix(nb));
    }
    let mut strides = vec![0; a.len()];
    let mut stride = 1;
    for i in (0..b.len()).rev() {
        let (da, db) = (a[offset + i], b[i]);
        if db == da {
            strides[offset + i] = stride;
        } else if db != 1 {
            return Err(err());
        }
        stride *= db;
    }
    Ok(Broadcast::Strided(strides))
}

fn strided_index(mut flat: usize, shape: &[usize], strides: &[usize]) -> usize {
    let mut idx = 0;
    for (&d, &s) in shape.iter().zip(strides).rev() {
        idx += (flat % d) * s;
        flat /= d;
    }
    idx
}

/// Maps each flat index of a tensor of shape `a` to the broadcast index
/// into `b`.
pub(crate) fn broadcast_indices(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n: usize = a.iter().product();
    Ok(match broadcast_plan(a, b)? {
        Broadcast::Same => (0..n).collect(),
        Broadcast::Scalar => vec![0; n],
        Broadcast::Suffix(len) => (0..n).map(|i| i % len).collect(),
        Broadcast::Strided(s) => (0..n).map(|i| strided_index(i, a, &s)).collect(),
    })
}

/// Applies `op` elementwise; `b` may broadcast over `a` by trailing-axis
/// rules and the result always has `a`'s shape.
pub fn binary<T: Scalar>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if op == BinaryOp::Div {
        if let Some(pos) = b.data().iter().position(|&v| v == T::zero()) {
            return Err(Error::Numeric(format!("division by zero at index {pos}")));
        }
    }
    let (ad, bd) = (a.data(), b.data());
    let out: Vec<T> = match broadcast_plan(a.shape(), b.shape())? {
        Broadcast::Same => ad.iter().zip(bd).map(|(&x, &y)| op.apply(x, y)).collect(),
        Broadcast::Scalar => ad.iter().map(|&x| op.apply(x, bd[0])).collect(),
        Broadcast::Suffix(len) => ad.iter().enumerate().map(|(i, &x)| op.apply(x, bd[i % len])).collect(),
        Broadcast::Strided(s) => ad
            .iter()
            .enumerate()
            .map(|(i, &x)| op.apply(x, bd[strided_index(i, a.shape(), &s)]))
            .collect(),
    };
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

/// Unified entry point: unary ops ignore `b`, binary ops require it.
pub fn elementwise<T: Scalar>(op: impl Into<ElementwiseOp>, a: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    match (op.into(), b) {
        (ElementwiseOp::Unary(u), _) => unary(u, a),
        (ElementwiseOp::Binary(bin), Some(b)) => binary(bin, a, b),
        (ElementwiseOp::Binary(bin), None) => Err(Error::InvalidArgument(format!("{bin:?} needs a second operand"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Unary(UnaryOp),
    Binary(BinaryOp),
}

impl From<UnaryOp> for ElementwiseOp {
    fn from(u: UnaryOp) -> Self {
        ElementwiseOp::Unary(u)
    }
}

impl From<BinaryOp> for ElementwiseOp {
    fn from(b: BinaryOp) -> Self {
        ElementwiseOp::Binary(b)
    }
}

/// Sums `grad` (shaped like the broadcast target) back onto `shape`.
pub fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if grad.shape() == shape {
        return Ok(grad.clone());
    }
    let idx = broadcast_indices(grad.shape(), shape)?;
    let mut acc = vec![0.0f64; shape.iter().product()];
    for (&g, &j) in grad.data().iter().zip(&idx) {
        acc[j] += g.as_f64();
    }
    Ok(Tensor::from_parts(
        shape.to_vec(),
        acc.into_iter().map(T::from_f64).collect(),
    ))
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
///
/// Every output element accumulates its `k` products in ascending order.
pub fn gemm_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_acc(m, k, n, a.data(), b.data(), &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn transpose_raw<T: Scalar>(rows: usize, cols: usize, src: &[T], dst: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims2()?;
    let mut out = vec![T::zero(); m * n];
    transpose_raw(m, n, a.data(), &mut out);
    Ok(Tensor::from_parts(vec![n, m], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn relu_clips_negatives() {
        let out = unary(UnaryOp::Relu, &t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let out = unary(UnaryOp::Sigmoid, &t(&[1], &[0.0])).unwrap();
        assert_eq!(out.data(), &[0.5]);
    }

    #[test]
    fn tanh_half_matches_series() {
        // Oracle: tanh(x) = sum_n 2^(2n)(2^(2n)-1) B_2n x^(2n-1) / (2n)!,
        // evaluated here through the rapidly converging continued fraction
        // x / (1 + x^2 / (3 + x^2 / (5 + ...))).
        let x = 0.5f64;
        let mut frac = 0.0;
        for k in (1..40).rev() {
            frac = x * x / ((2 * k + 1) as f64 + frac);
        }
        let oracle = x / (1.0 + frac);
        let out = unary(UnaryOp::Tanh, &t(&[1], &[x])).unwrap();
        assert!((out.data()[0] - oracle).abs() < 1e-15);
        assert!((out.data()[0] - 0.462117).abs() < 5e-7);
    }

    #[test]
    fn sqrt_rejects_negative() {
        assert!(matches!(
            unary(UnaryOp::Sqrt, &t(&[2], &[4.0, -1.0])),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn division_by_exact_zero_is_an_error() {
        let err = binary(BinaryOp::Div, &t(&[2], &[1.0, 2.0]), &t(&[2], &[1.0, 0.0]));
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    #[test]
    fn trailing_axis_broadcast() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3], &[10.0, 20.0, 30.0]);
        let out = binary(BinaryOp::Add, &a, &b).unwrap();
        assert_eq!(out.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);

        let col = t(&[2, 1], &[1.0, -1.0]);
        let out = binary(BinaryOp::Mul, &a, &col).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, -4.0, -5.0, -6.0]);

        assert!(matches!(
            binary(BinaryOp::Add, &a, &t(&[2], &[1.0, 1.0])),
            Err(Error::Broadcast { .. })
        ));
    }

    #[test]
    fn one_vector_broadcast_equals_scalar_application() {
        let a = t(&[2, 2], &[1.0, -2.0, 3.5, 4.0]);
        let one = t(&[1], &[3.0]);
        let out = binary(BinaryOp::Mul, &a, &one).unwrap();
        assert_eq!(out, a.scale(3.0));
    }

    #[test]
    fn elementwise_dispatch() {
        let a = t(&[2], &[1.0, 4.0]);
        assert_eq!(elementwise(UnaryOp::Sqrt, &a, None).unwrap().data(), &[1.0, 2.0]);
        assert!(elementwise(BinaryOp::Add, &a, None).is_err());
        assert_eq!(elementwise(BinaryOp::Sub, &a, Some(&a)).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn reduce_inverts_broadcast_by_summing() {
        let g = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(reduce_to_shape(&g, &[3]).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(reduce_to_shape(&g, &[2, 1]).unwrap().data(), &[6.0, 15.0]);
        assert_eq!(reduce_to_shape(&g, &[1]).unwrap().data(), &[21.0]);
    }

    #[test]
    fn matmul_examples() {
        let i2 = Tensor::<f64>::identity(2);
        let v = t(&[2, 1], &[2.0, -3.0]);
        assert_eq!(matmul(&i2, &v).unwrap(), v);

        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let ones = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(matmul(&a, &ones).unwrap().data(), &[3.0, 7.0]);

        let z = Tensor::<f64>::zeros(&[2, 3]);
        let any = t(&[3, 1], &[5.0, -7.0, 1e3]);
        assert_eq!(matmul(&z, &any).unwrap().data(), &[0.0, 0.0]);

        assert!(matches!(matmul(&a, &any), Err(Error::Shape(_))));
    }

    #[test]
    fn transpose_swaps_axes() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let at = transpose(&a).unwrap();
        assert_eq!(at.shape(), &[3, 2]);
        assert_eq!(at.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn parse_unary_names() {
        for op in [
            UnaryOp::Relu,
            UnaryOp::LeakyRelu,
            UnaryOp::Relu6,
            UnaryOp::Identity,
            UnaryOp::Tanh,
            UnaryOp::Sigmoid,
            UnaryOp::Sqrt,
        ] {
            assert_eq!(op.name().parse::<UnaryOp>().unwrap(), op);
        }
        assert!("swish".parse::<UnaryOp>().is_err());
    }
}
