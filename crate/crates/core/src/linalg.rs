//! Dense linear-algebra helpers and deterministic random streams.
//!
//! Everything numerically heavy in the crate funnels through [`SpdFactor`],
//! which wraps a Cholesky factor together with the jitter that was needed to
//! obtain it.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

pub type C64 = Complex<f64>;

/// Relative jitter ladder used for Gaussian-process covariances.
pub const GP_JITTER_LADDER: [f64; 3] = [1e-8, 1e-6, 1e-4];

/// Ladder that first tries the matrix as given.
pub const DEFAULT_JITTER_LADDER: [f64; 4] = [0.0, 1e-8, 1e-6, 1e-4];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error(
        "matrix not positive definite after jitter {max_jitter:.3e} (min eigenvalue estimate {min_eigenvalue:.3e})"
    )]
    NotPositiveDefinite { min_eigenvalue: f64, max_jitter: f64 },
}

/// Cholesky factor `L` of `M + jitter·I`.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    factor: DMatrix<f64>,
    jitter_used: f64,
    log_det: f64,
}

/// Mean of the diagonal, falling back to one for non-positive scales.
pub fn jitter_scale(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows().max(1);
    let s = m.diagonal().sum() / n as f64;
    if s > 0.0 && s.is_finite() {
        s
    } else {
        1.0
    }
}

/// Factorizes a symmetric matrix, walking the ladder of relative jitters
/// (multiples of the mean diagonal) until the Cholesky succeeds.
pub fn spd_factorize(m: &DMatrix<f64>, ladder: &[f64]) -> Result<SpdFactor, LinalgError> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    let scale = jitter_scale(m);
    let mut last = 0.0;
    for &rel in ladder {
        let jitter = rel * scale;
        last = jitter;
        if let Some(f) = factorize_with(m, jitter) {
            return Ok(f);
        }
    }
    Err(LinalgError::NotPositiveDefinite {
        min_eigenvalue: sym_min_eigenvalue(m),
        max_jitter: last,
    })
}

/// Attempts a single Cholesky of `m + jitter·I`.
pub fn factorize_with(m: &DMatrix<f64>, jitter: f64) -> Option<SpdFactor> {
    let mut a = m.clone();
    if jitter != 0.0 {
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
    }
    let chol = nalgebra::Cholesky::new(a)?;
    let factor = chol.unpack();
    let log_det = 2.0 * factor.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    if !log_det.is_finite() {
        return None;
    }
    Some(SpdFactor {
        factor,
        jitter_used: jitter,
        log_det,
    })
}

impl SpdFactor {
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    /// `L⁻¹ b` in place.
    pub fn forward_in_place(&self, b: &mut [f64]) {
        forward_solve(&self.factor, b);
    }

    /// `L⁻ᵀ b` in place.
    pub fn backward_in_place(&self, b: &mut [f64]) {
        backward_solve(&self.factor, b);
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        forward_solve(&self.factor, x.as_mut_slice());
        backward_solve(&self.factor, x.as_mut_slice());
        x
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        let n = self.dim();
        for col in x.as_mut_slice().chunks_mut(n) {
            forward_solve(&self.factor, col);
            backward_solve(&self.factor, col);
        }
        x
    }

    /// `L⁻¹ B`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        let n = self.dim();
        for col in x.as_mut_slice().chunks_mut(n) {
            forward_solve(&self.factor, col);
        }
        x
    }

    /// Explicit inverse `(L Lᵀ)⁻¹ = L⁻ᵀ L⁻¹`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let li = lower_inverse(&self.factor);
        li.tr_mul(&li)
    }

    /// Trace of the inverse, `‖L⁻¹‖_F²`.
    pub fn inverse_trace(&self) -> f64 {
        lower_inverse(&self.factor).norm_squared()
    }
}

fn forward_solve(l: &DMatrix<f64>, x: &mut [f64]) {
    let n = l.nrows();
    let data = l.as_slice();
    for j in 0..n {
        let col = &data[j * n..(j + 1) * n];
        let xj = x[j] / col[j];
        x[j] = xj;
        if xj != 0.0 {
            for i in j + 1..n {
                x[i] -= col[i] * xj;
            }
        }
    }
}

fn backward_solve(l: &DMatrix<f64>, x: &mut [f64]) {
    let n = l.nrows();
    let data = l.as_slice();
    for j in (0..n).rev() {
        let col = &data[j * n..(j + 1) * n];
        let mut s = x[j];
        for i in j + 1..n {
            s -= col[i] * x[i];
        }
        x[j] = s / col[j];
    }
}

/// Inverse of a lower-triangular matrix.
pub fn lower_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut out = DMatrix::<f64>::zeros(n, n);
    let data = l.as_slice();
    let res = out.as_mut_slice();
    for j in 0..n {
        let x = &mut res[j * n..(j + 1) * n];
        x[j] = 1.0;
        for k in j..n {
            let col = &data[k * n..(k + 1) * n];
            let xk = x[k] / col[k];
            x[k] = xk;
            if xk != 0.0 {
                for i in k + 1..n {
                    x[i] -= col[i] * xk;
                }
            }
        }
    }
    out
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn sym_min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

pub fn hadamard(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.component_mul(b)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seedable ChaCha stream with deterministic, consumption-independent splits.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream determined by `(seed, label)` alone.
    pub fn split(&self, label: u64) -> RngStream {
        let child = splitmix64(self.seed ^ splitmix64(label ^ 0xD1B5_4A32_D192_ED03));
        RngStream::new(child)
    }

    pub fn split_path(&self, labels: &[u64]) -> RngStream {
        labels.iter().fold(self.clone(), |s, &l| s.split(l))
    }

    pub fn uniform(&mut self) -> f64 {
        rand::Rng::gen::<f64>(&mut self.rng)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Circularly-symmetric complex normal with `E|x|² = 1`.
    pub fn complex_normal(&mut self) -> C64 {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        C64::new(self.normal() * s, self.normal() * s)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

pub fn gaussian_draws(stream: &mut RngStream, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| stream.normal())
}

pub fn complex_gaussian_draws(stream: &mut RngStream, n: usize) -> DVector<C64> {
    DVector::from_fn(n, |_, _| stream.complex_normal())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::{prop_assert, proptest};

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut s = RngStream::new(seed);
        let a = DMatrix::from_fn(n, n, |_, _| s.normal());
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn identity_factor() {
        let f = spd_factorize(&DMatrix::identity(4, 4), &DEFAULT_JITTER_LADDER).unwrap();
        assert_eq!(f.factor(), &DMatrix::<f64>::identity(4, 4));
        assert_eq!(f.log_det(), 0.0);
        assert_eq!(f.jitter_used(), 0.0);
    }

    #[test]
    fn diagonal_log_det() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]);
        let f = spd_factorize(&m, &DEFAULT_JITTER_LADDER).unwrap();
        assert_relative_eq!(f.log_det(), 36f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn singular_needs_jitter() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = spd_factorize(&m, &DEFAULT_JITTER_LADDER).unwrap();
        assert!(f.jitter_used() > 0.0);
        assert!(factorize_with(&m, 0.0).is_none());
    }

    #[test]
    fn exhausted_ladder_reports_eigenvalue() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        match spd_factorize(&m, &GP_JITTER_LADDER) {
            Err(LinalgError::NotPositiveDefinite { min_eigenvalue, .. }) => {
                assert_relative_eq!(min_eigenvalue, -1.0, epsilon = 1e-12)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn factor_reproduces_input() {
        let m = random_spd(12, 3);
        let f = spd_factorize(&m, &DEFAULT_JITTER_LADDER).unwrap();
        let l = f.factor();
        let err = (l * l.transpose() - &m).norm() / m.norm();
        assert!(err < 1e-10);
    }

    #[test]
    fn inverse_matches_lu() {
        let m = random_spd(30, 9);
        let f = spd_factorize(&m, &DEFAULT_JITTER_LADDER).unwrap();
        let inv = f.inverse();
        let reference = m.clone().try_inverse().unwrap();
        assert!((inv - &reference).norm() / reference.norm() < 1e-10);
        assert_relative_eq!(f.inverse_trace(), reference.trace(), max_relative = 1e-10);
    }

    #[test]
    fn lower_solve_matches_dense() {
        let m = random_spd(9, 4);
        let f = spd_factorize(&m, &DEFAULT_JITTER_LADDER).unwrap();
        let b = DMatrix::from_fn(9, 3, |i, j| (i * 3 + j) as f64 - 4.0);
        let x = f.solve_lower(&b);
        assert!((f.factor() * x - &b).norm() < 1e-10);
    }

    #[test]
    fn kron_and_hadamard_shapes() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = DMatrix::identity(3, 3);
        let k = kron(&a, &b);
        assert_eq!(k.shape(), (6, 6));
        assert_eq!(k[(3, 0)], 3.0);
        assert_eq!(hadamard(&a, &a)[(1, 1)], 16.0);
    }

    #[test]
    fn empty_draws() {
        let mut s = RngStream::new(1);
        assert_eq!(complex_gaussian_draws(&mut s, 0).len(), 0);
    }

    #[test]
    fn complex_draw_power() {
        let mut s = RngStream::new(7).split(11);
        let n = 1_000_000;
        let mut p = 0.0;
        let mut re2 = 0.0;
        for _ in 0..n {
            let x = s.complex_normal();
            p += x.norm_sqr();
            re2 += x.re * x.re;
        }
        assert!((p / n as f64 - 1.0).abs() < 0.005);
        assert!((re2 / n as f64 - 0.5).abs() < 0.005);
    }

    #[test]
    fn split_is_deterministic_and_distinct() {
        let root = RngStream::new(42);
        let mut consumed = root.clone();
        consumed.normal();
        let mut a = root.split(5);
        let mut b = consumed.split(5);
        let mut c = root.split(6);
        let xa: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
        assert_eq!(root.split_path(&[1, 2]).seed(), root.split(1).split(2).seed());
    }

    #[test]
    fn split_streams_uncorrelated() {
        let root = RngStream::new(99);
        let mut a = root.split(1);
        let mut b = root.split(2);
        let n = 200_000;
        let mut c = 0.0;
        for _ in 0..n {
            c += a.normal() * b.normal();
        }
        // correlation estimator has standard error 1/sqrt(n)
        assert!((c / n as f64).abs() < 4.0 / (n as f64).sqrt());
    }

    proptest! {
        #[test]
        fn log_det_matches_eigenvalues(n in 1usize..20, seed in 0u64..10_000) {
            let m = random_spd(n, seed);
            let f = spd_factorize(&m, &DEFAULT_JITTER_LADDER).unwrap();
            let eig: f64 = sym_eigenvalues(&m).iter().map(|e| e.ln()).sum();
            prop_assert!((f.log_det() - eig).abs() <= 1e-9 * eig.abs().max(1.0));
        }

        #[test]
        fn solve_round_trip(n in 1usize..25, seed in 0u64..10_000) {
            let m = random_spd(n, seed);
            let f = spd_factorize(&m, &DEFAULT_JITTER_LADDER).unwrap();
            let mut s = RngStream::new(seed + 1);
            let b = gaussian_draws(&mut s, n);
            let x = f.solve_vec(&b);
            prop_assert!((&m * x - &b).norm() / b.norm() < 1e-8);
        }
    }
}
