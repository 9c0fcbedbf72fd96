//! Dense float64 vectors and matrices, a small GEMM wrapper, and a splittable
//! seeded generator. Everything else in the crate is built on these.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A non-empty vector of `f64`.
///
/// Used both for hidden states and for their cotangents. Batched states are
/// stored row-major, one row of `dim` entries per batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct Vec64 {
    data: Vec<f64>,
}

pub type StateVec = Vec64;
pub type Cotangent = Vec64;

impl Vec64 {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::shape("Vec64::new", "len > 0", 0));
        }
        Ok(Self { data })
    }

    /// Panics when `len == 0`.
    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "Vec64 must be non-empty");
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn filled(len: usize, value: f64) -> Self {
        assert!(len > 0, "Vec64 must be non-empty");
        Self {
            data: vec![value; len],
        }
    }

    pub(crate) fn from_raw(data: Vec<f64>) -> Self {
        debug_assert!(!data.is_empty());
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    fn check_len(&self, other: &Vec64, op: &'static str) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::shape(op, self.len(), other.len()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Vec64) -> Result<Vec64> {
        self.check_len(other, "add")?;
        Ok(Vec64::from_raw(
            self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn sub(&self, other: &Vec64) -> Result<Vec64> {
        self.check_len(other, "sub")?;
        Ok(Vec64::from_raw(
            self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn add_assign(&mut self, other: &Vec64) -> Result<()> {
        self.check_len(other, "add_assign")?;
        add_into(&mut self.data, &other.data);
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Vec64 {
        Vec64::from_raw(self.data.iter().map(|a| a * factor).collect())
    }

    pub fn dot(&self, other: &Vec64) -> Result<f64> {
        self.check_len(other, "dot")?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<usize> for Vec64 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("Mat64::new", "rows, cols > 0", format!("{rows}x{cols}")));
        }
        if rows * cols != data.len() {
            return Err(Error::shape("Mat64::new", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "Mat64 dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Mat64::from_rows", "equal row lengths", "ragged"));
        }
        Mat64::new(rows.len(), cols, rows.concat())
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Contiguous block of rows `start..start + count`, borrowed as a view.
    pub(crate) fn row_block(&self, start: usize, count: usize) -> MatRef<'_> {
        MatRef::row_major(
            &self.data[start * self.cols..(start + count) * self.cols],
            count,
            self.cols,
        )
    }

    pub(crate) fn view(&self) -> MatRef<'_> {
        MatRef::row_major(&self.data, self.rows, self.cols)
    }

    pub fn matmul(&self, other: &Mat64) -> Result<Mat64> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("lhs cols {}", self.cols),
                format!("rhs rows {}", other.rows),
            ));
        }
        let mut out = Mat64::zeros(self.rows, other.cols);
        gemm(1.0, self.view(), other.view(), 0.0, &mut out.data);
        Ok(out)
    }
}

/// `result_j = Σ_i v_i M_ij`.
pub fn vec_mat(v: &Vec64, m: &Mat64) -> Result<Vec64> {
    if v.len() != m.rows() {
        return Err(Error::shape("vec_mat", format!("len {}", m.rows()), v.len()));
    }
    let mut out = vec![0.0; m.cols()];
    for (i, &vi) in v.iter().enumerate() {
        if vi != 0.0 {
            axpy(vi, m.row(i), &mut out);
        }
    }
    Ok(Vec64::from_raw(out))
}

pub fn hadamard(a: &Vec64, b: &Vec64) -> Result<Vec64> {
    if a.len() != b.len() {
        return Err(Error::shape("hadamard", a.len(), b.len()));
    }
    Ok(Vec64::from_raw(
        a.iter().zip(b.iter()).map(|(x, y)| x * y).collect(),
    ))
}

/// `tanh` over a slice, four lanes at a time (within a few ulp of `f64::tanh`).
pub fn tanh_in_place(v: &mut [f64]) {
    let mut chunks = v.chunks_exact_mut(4);
    for c in &mut chunks {
        let x = wide::f64x4::new([c[0], c[1], c[2], c[3]]).tanh();
        c.copy_from_slice(&x.to_array());
    }
    chunks.into_remainder().iter_mut().for_each(|x| *x = x.tanh());
}

/// Relative L2 distance `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both are zero.
pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "rel_l2 length mismatch");
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

// ---- slice kernels -------------------------------------------------------

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Borrowed strided matrix view for [`gemm`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> MatRef<'a> {
    pub(crate) fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub(crate) fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize
    }
}

/// `c ← alpha·a·b + beta·c` with `c` row-major and densely packed.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimension");
    assert_eq!(c.len(), m * n, "gemm output size");
    assert!(a.max_offset() < a.data.len().max(1) && b.max_offset() < b.data.len().max(1));
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Adds the column sums of a row-major `rows x cols` buffer into `out`.
pub(crate) fn col_sums_into(data: &[f64], cols: usize, out: &mut [f64]) {
    for row in data.chunks_exact(cols) {
        add_into(out, row);
    }
}

// ---- randomness ----------------------------------------------------------

/// Seeded, splittable generator.
///
/// `split(i)` derives a child stream from `(seed, stream, i)` alone, so
/// children are independent of how many values the parent has drawn.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn split(&self, index: u64) -> Rng {
        let stream = splitmix64(self.stream ^ splitmix64(index.wrapping_add(1)));
        Self::with_stream(self.seed, stream)
    }

    /// `n` draws from `N(0, scale²)`.
    pub fn normal(&mut self, n: usize, scale: f64) -> Vec64 {
        assert!(scale >= 0.0, "scale must be non-negative");
        let data = (0..n)
            .map(|_| {
                let z: f64 = self.inner.sample(StandardNormal);
                z * scale
            })
            .collect();
        Vec64::from_raw(data)
    }

    pub fn normal_mat(&mut self, rows: usize, cols: usize, scale: f64) -> Mat64 {
        let v = self.normal(rows * cols, scale);
        Mat64::new(rows, cols, v.into_inner()).expect("positive dims")
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }
}
