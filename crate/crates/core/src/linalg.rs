//! Dense row-major matrices and vectors plus the activation kernels the
//! recurrent cells are built from.
//!
//! Every public operation validates shapes (there is no broadcasting) and
//! rejects non-finite results. The `*_acc` kernels at the bottom are the
//! unchecked hot-path variants used inside the forward and backward passes;
//! callers there validate once at the boundary instead of per step.

use std::fmt;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type. `f64` everywhere by default; `f32` is only
/// used by the training loop when asked for.
pub trait Real: Float + Default + fmt::Debug + fmt::Display + Sum + Send + Sync + 'static {
    const BITS: u32;

    fn from_f64_lossy(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f64 {
    const BITS: u32 = 64;

    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    const BITS: u32 = 32;

    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

fn ensure_finite<T: Real>(op: &str, data: &[T]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

#[derive(Clone, PartialEq)]
pub struct Vector<T = f64> {
    data: Vec<T>,
}

impl<T: Real> Vector<T> {
    pub fn new(data: Vec<T>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("Vector::new"));
        }
        ensure_finite("Vector::new", &data)?;
        Ok(Self { data })
    }

    /// Panics if `len == 0`.
    pub fn zeros(len: usize) -> Self {
        Self::filled(len, T::zero())
    }

    pub fn filled(len: usize, value: T) -> Self {
        assert!(len > 0, "vectors must have positive length");
        Self {
            data: vec![value; len],
        }
    }

    pub(crate) fn from_vec_unchecked(data: Vec<T>) -> Self {
        debug_assert!(!data.is_empty());
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &x) in self.data.iter().enumerate() {
            if x > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Vector<U> {
        Vector {
            data: self.data.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect(),
        }
    }
}

impl<T: Real> std::ops::Index<usize> for Vector<T> {
    type Output = T;

    fn index(&self, i: usize) -> &T {
        &self.data[i]
    }
}

impl<T: fmt::Debug> fmt::Debug for Vector<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.data.iter()).finish()
    }
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Empty("Matrix::from_vec"));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{rows}x{cols}"),
                format!("{} elements", data.len()),
            ));
        }
        ensure_finite("Matrix::from_vec", &data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", "ragged rows", format!("{cols} columns")));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// Panics if either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrices must have positive dimensions");
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies column `c` out. This is how a one-hot input is multiplied in.
    pub fn column(&self, c: usize) -> Result<Vector<T>> {
        if c >= self.cols {
            return Err(Error::IndexOutOfRange {
                index: c,
                size: self.cols,
            });
        }
        Ok(Vector::from_vec_unchecked(
            (0..self.rows).map(|r| self.data[r * self.cols + c]).collect(),
        ))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect(),
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<&[T]> = self.data.chunks(self.cols.max(1)).collect();
        f.debug_struct("Matrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("data", &rows)
            .finish()
    }
}

/// `m · v`.
pub fn matvec<T: Real>(m: &Matrix<T>, v: &Vector<T>) -> Result<Vector<T>> {
    if m.cols != v.len() {
        return Err(Error::shape(
            "matvec",
            format!("matrix {}x{}", m.rows, m.cols),
            format!("vector of length {}", v.len()),
        ));
    }
    let mut out = vec![T::zero(); m.rows];
    matvec_acc(&mut out, m, v.as_slice());
    ensure_finite("matvec", &out)?;
    Ok(Vector::from_vec_unchecked(out))
}

/// `mᵀ · v`, without materializing the transpose.
pub fn matvec_transposed<T: Real>(m: &Matrix<T>, v: &Vector<T>) -> Result<Vector<T>> {
    if m.rows != v.len() {
        return Err(Error::shape(
            "matvec_transposed",
            format!("matrix {}x{}", m.rows, m.cols),
            format!("vector of length {}", v.len()),
        ));
    }
    let mut out = vec![T::zero(); m.cols];
    matvec_t_acc(&mut out, m, v.as_slice());
    ensure_finite("matvec_transposed", &out)?;
    Ok(Vector::from_vec_unchecked(out))
}

/// Numerically stable softmax (the maximum is subtracted before
/// exponentiation).
pub fn softmax<T: Real>(v: &Vector<T>) -> Result<Vector<T>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    ensure_finite("softmax input", v.as_slice())?;
    let mut out = vec![T::zero(); v.len()];
    softmax_into(&mut out, v.as_slice());
    Ok(Vector::from_vec_unchecked(out))
}

pub fn tanh_vec<T: Real>(v: &Vector<T>) -> Result<Vector<T>> {
    ensure_finite("tanh_vec input", v.as_slice())?;
    Ok(Vector::from_vec_unchecked(v.iter().map(|x| x.tanh()).collect()))
}

pub fn sigmoid_vec<T: Real>(v: &Vector<T>) -> Result<Vector<T>> {
    ensure_finite("sigmoid_vec input", v.as_slice())?;
    Ok(Vector::from_vec_unchecked(v.iter().map(|&x| sigmoid(x)).collect()))
}

/// Elementwise product `a ∘ b`.
pub fn hadamard<T: Real>(a: &Vector<T>, b: &Vector<T>) -> Result<Vector<T>> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "hadamard",
            format!("length {}", a.len()),
            format!("length {}", b.len()),
        ));
    }
    let out: Vec<T> = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect();
    ensure_finite("hadamard", &out)?;
    Ok(Vector::from_vec_unchecked(out))
}

pub fn add<T: Real>(a: &Vector<T>, b: &Vector<T>) -> Result<Vector<T>> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "add",
            format!("length {}", a.len()),
            format!("length {}", b.len()),
        ));
    }
    let out: Vec<T> = a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect();
    ensure_finite("add", &out)?;
    Ok(Vector::from_vec_unchecked(out))
}

/// Logistic function, evaluated so that neither tail overflows.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

// ---- unchecked kernels -------------------------------------------------

/// `out += m · v`
#[inline]
pub(crate) fn matvec_acc<T: Real>(out: &mut [T], m: &Matrix<T>, v: &[T]) {
    debug_assert_eq!(out.len(), m.rows);
    debug_assert_eq!(v.len(), m.cols);
    for (o, row) in out.iter_mut().zip(m.data.chunks_exact(m.cols)) {
        let mut acc = T::zero();
        for (&w, &x) in row.iter().zip(v) {
            acc = acc + w * x;
        }
        *o = *o + acc;
    }
}

/// `out += mᵀ · v`
#[inline]
pub(crate) fn matvec_t_acc<T: Real>(out: &mut [T], m: &Matrix<T>, v: &[T]) {
    debug_assert_eq!(out.len(), m.cols);
    debug_assert_eq!(v.len(), m.rows);
    for (row, &s) in m.data.chunks_exact(m.cols).zip(v) {
        if s == T::zero() {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(row) {
            *o = *o + w * s;
        }
    }
}

/// `m += a · bᵀ`
#[inline]
pub(crate) fn outer_acc<T: Real>(m: &mut Matrix<T>, a: &[T], b: &[T]) {
    debug_assert_eq!(a.len(), m.rows);
    debug_assert_eq!(b.len(), m.cols);
    let cols = m.cols;
    for (row, &s) in m.data.chunks_exact_mut(cols).zip(a) {
        if s == T::zero() {
            continue;
        }
        for (w, &x) in row.iter_mut().zip(b) {
            *w = *w + s * x;
        }
    }
}

/// `m[:, c] += v`
#[inline]
pub(crate) fn column_acc<T: Real>(m: &mut Matrix<T>, c: usize, v: &[T]) {
    debug_assert_eq!(v.len(), m.rows);
    let cols = m.cols;
    for (r, &x) in v.iter().enumerate() {
        m.data[r * cols + c] = m.data[r * cols + c] + x;
    }
}

/// `out += m[:, c]`
#[inline]
pub(crate) fn add_column<T: Real>(out: &mut [T], m: &Matrix<T>, c: usize) {
    debug_assert_eq!(out.len(), m.rows);
    for (r, o) in out.iter_mut().enumerate() {
        *o = *o + m.data[r * m.cols + c];
    }
}

#[inline]
pub(crate) fn axpy<T: Real>(out: &mut [T], alpha: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = *o + alpha * v;
    }
}

pub(crate) fn softmax_into<T: Real>(out: &mut [T], logits: &[T]) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = (x - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(data: &[f64]) -> Vector {
        Vector::new(data.to_vec()).unwrap()
    }

    fn naive_matvec(m: &Matrix, x: &Vector) -> Vec<f64> {
        let mut out = vec![0.0; m.rows()];
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                out[i] += m.get(i, j) * x[j];
            }
        }
        out
    }

    #[test]
    fn matvec_examples() {
        let x = v(&[1.0, 2.0, 3.0]);
        assert_eq!(matvec(&Matrix::identity(3), &x).unwrap().as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(matvec(&Matrix::zeros(2, 3), &x).unwrap().as_slice(), &[0.0, 0.0]);
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let ones = v(&[1.0, 1.0]);
        assert_eq!(matvec(&m, &ones).unwrap().as_slice(), naive_matvec(&m, &ones).as_slice());
        assert_eq!(matvec(&m, &ones).unwrap().as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matvec_shape_error_names_both_shapes() {
        let err = matvec(&Matrix::<f64>::zeros(2, 3), &v(&[1.0, 2.0])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("length 2"), "{msg}");
    }

    #[test]
    fn matvec_matches_scalar_loop_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let rows = rng.random_range(1..=64);
            let cols = rng.random_range(1..=64);
            let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m = Matrix::from_vec(rows, cols, data).unwrap();
            let x = Vector::new((0..cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let fast = matvec(&m, &x).unwrap();
            for (a, b) in fast.iter().zip(naive_matvec(&m, &x)) {
                assert!((a - b).abs() <= 1e-14 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn transposed_matvec_agrees_with_explicit_transpose() {
        let m = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        let t = Matrix::from_rows(&[&[1.0, 4.0], &[2.0, 5.0], &[3.0, 6.0]]).unwrap();
        let x = v(&[0.5, -1.0]);
        assert_eq!(matvec_transposed(&m, &x).unwrap(), matvec(&t, &x).unwrap());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&v(&[0.0, 0.0])).unwrap().as_slice(), &[0.5, 0.5]);
        for c in [-700.0, 0.0, 3.5, 999.0] {
            for p in softmax(&v(&[c, c, c, c])).unwrap().iter() {
                assert!((p - 0.25).abs() < 1e-15);
            }
        }
        // exp(k) / (e + e^2 + e^3), evaluated at 40 digits
        let expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
        let got = softmax(&v(&[1.0, 2.0, 3.0])).unwrap();
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() < 1e-15, "{g} vs {e}");
        }
    }

    #[test]
    fn softmax_survives_large_magnitudes() {
        let p = softmax(&v(&[1000.0, -1000.0, 999.0])).unwrap();
        assert!(p.is_finite());
        assert_eq!(p.argmax(), 0);
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_empty_and_non_finite() {
        let empty = Vector::<f64> { data: vec![] };
        assert!(matches!(softmax(&empty), Err(Error::Empty(_))));
        let bad = Vector::from_vec_unchecked(vec![1.0, f64::NAN]);
        assert!(matches!(softmax(&bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_sums_to_one_on_many_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let n = rng.random_range(1..=20);
            let x = Vector::new((0..n).map(|_| rng.random_range(-100.0..100.0)).collect()).unwrap();
            let p = softmax(&x).unwrap();
            assert!((p.sum() - 1.0).abs() <= 1e-12);
            assert!(p.iter().all(|&q| q > 0.0 && q <= 1.0));
            assert_eq!(p.argmax(), x.argmax());
        }
    }

    #[test]
    fn activation_examples() {
        assert_eq!(tanh_vec(&v(&[0.0])).unwrap()[0], 0.0);
        let t = tanh_vec(&v(&[0.7, -0.7])).unwrap();
        assert_eq!(t[0], -t[1]);
        assert!((tanh_vec(&v(&[1.0])).unwrap()[0] - 0.7615941559557649).abs() < 1e-15);

        assert_eq!(sigmoid_vec(&v(&[0.0])).unwrap()[0], 0.5);
        let s = sigmoid_vec(&v(&[40.0, -40.0])).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1] > 0.0);
        assert!((sigmoid_vec(&v(&[1.0])).unwrap()[0] - 0.7310585786300049).abs() < 1e-15);
        assert!(tanh_vec(&Vector::from_vec_unchecked(vec![f64::INFINITY])).is_err());
    }

    #[test]
    fn hadamard_examples() {
        let x = v(&[1.5, -2.0, 3.0]);
        assert_eq!(hadamard(&v(&[1.0, 1.0, 1.0]), &x).unwrap(), x);
        assert_eq!(hadamard(&v(&[0.0, 0.0, 0.0]), &x).unwrap().as_slice(), &[0.0, -0.0, 0.0]);
        assert_eq!(hadamard(&v(&[2.0, 3.0]), &v(&[4.0, 5.0])).unwrap().as_slice(), &[8.0, 15.0]);
        assert!(hadamard(&v(&[1.0]), &x).is_err());
    }

    fn central_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(
            xs in prop::collection::vec(-100.0f64..100.0, 1..16),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&v(&xs)).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let q = softmax(&v(&shifted)).unwrap();
            for (a, b) in p.iter().zip(q.iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn activations_stay_in_open_ranges(x in -15.0f64..15.0) {
            let t = tanh_vec(&v(&[x])).unwrap()[0];
            let s = sigmoid_vec(&v(&[x])).unwrap()[0];
            prop_assert!(t > -1.0 && t < 1.0);
            prop_assert!(s > 0.0 && s < 1.0);
            prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn activation_derivative_identities(x in -5.0f64..5.0) {
            let t = x.tanh();
            prop_assert!((central_diff(f64::tanh, x) - (1.0 - t * t)).abs() <= 1e-10);
            let s = sigmoid(x);
            prop_assert!((central_diff(sigmoid, x) - s * (1.0 - s)).abs() <= 1e-10);
        }
    }
}
