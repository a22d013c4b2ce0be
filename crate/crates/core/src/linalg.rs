//! Dense row-major `f64` numerics.
//!
//! RMS norms, power-iteration spectral norms, cyclic Jacobi eigendecomposition,
//! exact and Newton–Schulz orthogonalization, fractional inverse powers of PSD
//! matrices and a seeded Gaussian sampler.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal, StandardUniform};
use thiserror::Error;

/// Dense vectors are plain `Vec<f64>`; borrowed as `&[f64]` everywhere.
pub type Vector = Vec<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix must have at least one row and one column")]
    Empty,
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("zero matrix has no polar factor")]
    ZeroMatrix,
    #[error("matrix has a non-finite entry")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, validating shape and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::Empty);
        }
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be non-empty");
        Matrix { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(LinalgError::DimensionMismatch("ragged rows".into()));
        }
        Matrix::new(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be non-empty");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Column vector (n×1) holding `v`.
    pub fn column(v: &[f64]) -> Self {
        assert!(!v.is_empty(), "matrix must be non-empty");
        Matrix { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    /// Outer product `a bᵀ`.
    pub fn outer(a: &[f64], b: &[f64]) -> Self {
        Matrix::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        self.product(false, other, false)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        self.product(false, other, true)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        self.product(true, other, false)
    }

    fn product(&self, ta: bool, other: &Matrix, tb: bool) -> Result<Matrix> {
        let (m, k) = if ta { (self.cols, self.rows) } else { (self.rows, self.cols) };
        let (k2, n) = if tb { (other.cols, other.rows) } else { (other.rows, other.cols) };
        if k != k2 {
            return Err(LinalgError::DimensionMismatch(format!(
                "cannot multiply {m}x{k} by {k2}x{n}"
            )));
        }
        let mut out = Matrix::zeros(m, n);
        gemm(1.0, self, ta, other, tb, 0.0, &mut out);
        Ok(out)
    }

    /// `A x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{}x{} matrix times vector of dim {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `Aᵀ y`.
    pub fn t_matvec(&self, y: &[f64]) -> Result<Vector> {
        if y.len() != self.rows {
            return Err(LinalgError::DimensionMismatch(format!(
                "transpose of {}x{} matrix times vector of dim {}",
                self.rows,
                self.cols,
                y.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                axpy(yi, self.row(i), &mut out);
            }
        }
        Ok(out)
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.add_scaled(1.0, other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.add_scaled(-1.0, other)?;
        Ok(out)
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other)?;
        axpy(alpha, &other.data, &mut self.data);
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        self.map(|x| alpha * x)
    }

    pub fn scale_in_place(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// Frobenius inner product `⟨A, B⟩ = tr(AᵀB)`.
    pub fn inner(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// `c = alpha · op(a) · op(b) + beta · c`, where `op` optionally transposes.
///
/// Shapes are the caller's responsibility; they are asserted.
pub fn gemm(alpha: f64, a: &Matrix, ta: bool, b: &Matrix, tb: bool, beta: f64, c: &mut Matrix) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides describe exactly the row-major buffers asserted above,
    // and `c` does not alias `a` or `b` (it is borrowed mutably).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha · x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn add_vec(a: &[f64], b: &[f64]) -> Vector {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub_vec(a: &[f64], b: &[f64]) -> Vector {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// RMS norm `‖v‖₂ / √dim`.
pub fn rms_vec(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    norm2(v) / (v.len() as f64).sqrt()
}

/// Result of a power-iteration spectral norm estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Iteration budget for power iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormPrecision {
    pub max_iters: usize,
    pub tol: f64,
}

impl NormPrecision {
    /// Tight enough for oracle comparisons on small matrices.
    pub const EXACT: NormPrecision = NormPrecision { max_iters: 20_000, tol: 1e-13 };
    /// Adequate for log-log slope measurements on large matrices.
    pub const MEASURE: NormPrecision = NormPrecision { max_iters: 400, tol: 1e-7 };
}

impl Default for NormPrecision {
    fn default() -> Self {
        NormPrecision::EXACT
    }
}

/// Largest singular value by power iteration on `AᵀA`.
///
/// Starts from the normalized all-ones vector; if that start is (nearly)
/// annihilated by `A`, a deterministic perturbed start is used instead.
pub fn spectral_norm(a: &Matrix, max_iters: usize, tol: f64) -> SpectralEstimate {
    let scale = a.max_abs();
    if scale == 0.0 {
        return SpectralEstimate { value: 0.0, converged: true, iterations: 0 };
    }
    let n = a.cols;
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let frob = a.frobenius_norm();
    let mut w = a.matvec(&v).expect("shape");
    if norm2(&w) <= 1e-8 * frob {
        v = (0..n).map(|i| 1.0 + ((i as f64 + 1.0) * 0.618_033_988_749_894_9).fract()).collect();
        let nv = norm2(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        w = a.matvec(&v).expect("shape");
    }
    let mut sigma = norm2(&w);
    for it in 1..=max_iters.max(1) {
        let mut u = a.t_matvec(&w).expect("shape");
        let nu = norm2(&u);
        if nu == 0.0 {
            return SpectralEstimate { value: sigma, converged: true, iterations: it };
        }
        u.iter_mut().for_each(|x| *x /= nu);
        v = u;
        w = a.matvec(&v).expect("shape");
        let next = norm2(&w);
        if (next - sigma).abs() <= tol * next {
            return SpectralEstimate { value: next.max(sigma), converged: true, iterations: it };
        }
        sigma = next.max(sigma);
    }
    SpectralEstimate { value: sigma, converged: false, iterations: max_iters.max(1) }
}

/// RMS operator norm `√(cols/rows)·‖A‖₂` at [`NormPrecision::EXACT`].
pub fn rms_op_norm(a: &Matrix) -> f64 {
    rms_op_norm_with(a, NormPrecision::EXACT)
}

pub fn rms_op_norm_with(a: &Matrix, precision: NormPrecision) -> f64 {
    let s = spectral_norm(a, precision.max_iters, precision.tol).value;
    (a.cols as f64 / a.rows as f64).sqrt() * s
}

/// Seeded, counter-based random stream (ChaCha20).
#[derive(Debug, Clone)]
pub struct RandomSource {
    seed: u64,
    rng: ChaCha20Rng,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        RandomSource { seed, rng: ChaCha20Rng::seed_from_u64(seed) }
    }

    /// Independent stream keyed by a master seed and a textual cell key.
    pub fn derived(master: u64, key: &str) -> Self {
        RandomSource::new(derive_seed(master, key))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        StandardUniform.sample(&mut self.rng)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn normal_vec(&mut self, n: usize, sigma: f64) -> Vector {
        (0..n).map(|_| sigma * self.normal()).collect()
    }
}

/// FNV-1a over the key, mixed with the master seed through SplitMix64.
pub fn derive_seed(master: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = master ^ h.rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// i.i.d. `N(0, sigma²)` entries.
pub fn gaussian_matrix(rows: usize, cols: usize, sigma: f64, rng: &mut RandomSource) -> Matrix {
    assert!(sigma >= 0.0, "sigma must be nonnegative");
    Matrix::from_fn(rows, cols, |_, _| sigma * rng.normal())
}

/// Eigendecomposition `S = Q diag(values) Qᵀ`, values descending, eigenvectors
/// stored as the columns of `vectors`.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Vector,
    pub vectors: Matrix,
}

fn check_symmetric(s: &Matrix) -> Result<()> {
    if s.rows != s.cols {
        return Err(LinalgError::NotSquare { rows: s.rows, cols: s.cols });
    }
    if !s.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let tol = 1e-12 * s.max_abs().max(1.0);
    let mut worst: f64 = 0.0;
    for i in 0..s.rows {
        for j in (i + 1)..s.cols {
            worst = worst.max((s[(i, j)] - s[(j, i)]).abs());
        }
    }
    if worst > tol {
        return Err(LinalgError::NotSymmetric(worst));
    }
    Ok(())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn sym_eig(s: &Matrix) -> Result<SymEig> {
    check_symmetric(s)?;
    let n = s.rows;
    let mut a = Matrix::from_fn(n, n, |i, j| 0.5 * (s[(i, j)] + s[(j, i)]));
    let mut q = Matrix::identity(n);
    let total = a.frobenius_norm();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= 1e-16 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for r in (p + 1)..n {
                let apq = a[(p, r)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(r, r)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                rotate_cols(&mut a, p, r, c, sn);
                rotate_rows(&mut a, p, r, c, sn);
                a[(p, r)] = 0.0;
                a[(r, p)] = 0.0;
                rotate_cols(&mut q, p, r, c, sn);
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| q[(i, order[j])]);
    Ok(SymEig { values, vectors })
}

fn rotate_cols(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols;
    for k in 0..m.rows {
        let row = &mut m.data[k * cols..(k + 1) * cols];
        let (x, y) = (row[p], row[q]);
        row[p] = c * x - s * y;
        row[q] = s * x + c * y;
    }
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols;
    for k in 0..cols {
        let (x, y) = (m.data[p * cols + k], m.data[q * cols + k]);
        m.data[p * cols + k] = c * x - s * y;
        m.data[q * cols + k] = s * x + c * y;
    }
}

/// Orthonormal basis (as rows) of the row space of `a`, by modified
/// Gram–Schmidt with one reorthogonalization pass. Rows whose residual falls
/// below `rel_tol` times the largest row norm are treated as dependent.
/// Returns `None` for a zero matrix.
pub fn row_space_basis(a: &Matrix, rel_tol: f64) -> Option<Matrix> {
    let scale = (0..a.rows).map(|i| norm2(a.row(i))).fold(0.0, f64::max);
    if scale == 0.0 {
        return None;
    }
    let cutoff = rel_tol * scale;
    let mut basis: Vec<f64> = Vec::new();
    let mut rank = 0;
    let n = a.cols;
    for i in 0..a.rows {
        let mut r = a.row(i).to_vec();
        for _pass in 0..2 {
            for b in 0..rank {
                let q = &basis[b * n..(b + 1) * n];
                let c = dot(q, &r);
                axpy(-c, q, &mut r);
            }
        }
        let nr = norm2(&r);
        if nr > cutoff {
            basis.extend(r.iter().map(|x| x / nr));
            rank += 1;
            if rank == n {
                break;
            }
        }
    }
    (rank > 0).then_some(Matrix { rows: rank, cols: n, data: basis })
}

const RANK_TOL: f64 = 1e-12;

/// Polar factor `U Vᵀ` of the compact SVD of `g`.
///
/// The row space of `g` is first reduced to an orthonormal basis `P` (r×n),
/// so that `g = C P` with `C = g Pᵀ`; the polar factor is then
/// `C (CᵀC)^{-1/2} P`, where the r×r inverse square root comes from
/// [`sym_eig`]. Directions with singular value below `1e-12·σ_max` are dropped.
pub fn orthogonalize(g: &Matrix) -> Result<Matrix> {
    if !g.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    // The polar factor is scale-invariant; normalizing avoids overflow in
    // the Gram matrices of very large gradients.
    let scale = g.max_abs();
    if scale == 0.0 {
        return Err(LinalgError::ZeroMatrix);
    }
    let g = &g.scaled(1.0 / scale);
    let p = row_space_basis(g, RANK_TOL).ok_or(LinalgError::ZeroMatrix)?;
    let c = g.matmul_nt(&p)?;
    let s = c.matmul_tn(&c)?;
    let eig = sym_eig(&symmetrized(&s))?;
    let lmax = eig.values[0];
    let floor = RANK_TOL * RANK_TOL * lmax;
    let k = weighted_projector(&eig, |l| if l > floor && l > 0.0 { Some(l.powf(-0.5)) } else { None });
    c.matmul(&k)?.matmul(&p)
}

/// Orthogonalize, mapping the zero matrix to zero instead of an error.
pub fn orthogonalize_or_zero(g: &Matrix) -> Matrix {
    match orthogonalize(g) {
        Ok(m) => m,
        Err(_) => Matrix::zeros(g.rows, g.cols),
    }
}

fn symmetrized(s: &Matrix) -> Matrix {
    Matrix::from_fn(s.rows, s.cols, |i, j| 0.5 * (s[(i, j)] + s[(j, i)]))
}

/// `Σ_i f(λ_i) q_i q_iᵀ` over eigenpairs where `f` returns `Some`.
fn weighted_projector(eig: &SymEig, f: impl Fn(f64) -> Option<f64>) -> Matrix {
    let n = eig.vectors.rows;
    let mut out = Matrix::zeros(n, n);
    for (j, &l) in eig.values.iter().enumerate() {
        if let Some(w) = f(l) {
            let q = eig.vectors.col(j);
            for a in 0..n {
                let wa = w * q[a];
                axpy(wa, &q, out.row_mut(a));
            }
        }
    }
    out
}

const NS_FAST: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);
const NS_POLISH: (f64, f64, f64) = (1.875, -1.25, 0.375);

/// Newton–Schulz approximation of the polar factor.
///
/// The input is pre-normalized by its spectral norm. The first half of the
/// iterations (rounded up) use the aggressive quintic of Muon implementations
/// to inflate small singular values; the rest use the convergent quintic
/// `(15x − 10x³ + 3x⁵)/8`, which has 1 as a fixed point.
pub fn newton_schulz_orthogonalize(g: &Matrix, iters: usize) -> Result<Matrix> {
    if !g.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    if g.max_abs() == 0.0 {
        return Err(LinalgError::ZeroMatrix);
    }
    let wide = g.rows <= g.cols;
    let mut x = if wide { g.clone() } else { g.transpose() };
    let sigma = spectral_norm(&x, 2000, 1e-10).value;
    x.scale_in_place(1.0 / (sigma * (1.0 + 1e-9)));
    let fast = iters - iters / 2;
    for it in 0..iters {
        let (a, b, c) = if it < fast { NS_FAST } else { NS_POLISH };
        let gram = x.matmul_nt(&x)?;
        let mut poly = gram.matmul(&gram)?;
        poly.scale_in_place(c);
        poly.add_scaled(b, &gram)?;
        let mut next = poly.matmul(&x)?;
        next.add_scaled(a, &x)?;
        x = next;
    }
    Ok(if wide { x } else { x.transpose() })
}

/// Eigenpairs of a symmetric PSD matrix restricted to its numerical range:
/// only eigenvalues above `1e-12·λ_max` are returned, with the matching
/// eigenvectors as columns (n×r). Returns `None` for the zero matrix.
pub fn range_eig(s: &Matrix) -> Result<Option<SymEig>> {
    check_symmetric(s)?;
    let p = match row_space_basis(s, RANK_TOL) {
        Some(p) => p,
        None => return Ok(None),
    };
    let c = symmetrized(&p.matmul(s)?.matmul_nt(&p)?);
    let eig = sym_eig(&c)?;
    let lmax = eig.values[0];
    if lmax <= 0.0 {
        return Ok(None);
    }
    let keep: Vec<usize> = (0..eig.values.len()).filter(|&j| eig.values[j] > RANK_TOL * lmax).collect();
    let w = Matrix::from_fn(eig.vectors.rows, keep.len(), |i, j| eig.vectors[(i, keep[j])]);
    let vectors = p.matmul_tn(&w)?;
    Ok(Some(SymEig { values: keep.iter().map(|&j| eig.values[j]).collect(), vectors }))
}

/// `S^{-p}` for symmetric PSD `S`, with the pseudo-inverse convention on
/// eigenvalues at or below `1e-12·λ_max`.
pub fn inv_frac_power(s: &Matrix, p: f64) -> Result<Matrix> {
    let n = s.rows;
    match range_eig(s)? {
        None => Ok(Matrix::zeros(n, n)),
        Some(eig) => {
            let mut out = Matrix::zeros(n, n);
            for (j, &l) in eig.values.iter().enumerate() {
                let q = eig.vectors.col(j);
                let w = l.powf(-p);
                for a in 0..n {
                    axpy(w * q[a], &q, out.row_mut(a));
                }
            }
            Ok(out)
        }
    }
}
