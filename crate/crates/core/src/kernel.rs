//! Geometry-based spectral-mixture covariance on antenna-index lattices.
//!
//! The base kernel is separable, `k((i,j),(i',j')) = A·k_r(Δr)·k_t(Δt)`, with
//! each side a spectral mixture over 2-D lattice lags. Real and imaginary
//! parts are coupled through the ICM matrix `B = L·Lᵀ`.
//!
//! Vectors of length `2P` are stored block-wise, `[Re(·); Im(·)]`, so the
//! lifted covariance is `B ⊗ K_base` in that layout.

use crate::lattice::{coords_unchecked, IndexPair, LatticeCoord, UraGeometry};
use nalgebra::{DMatrix, Matrix2};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

const TWO_PI: f64 = 2.0 * PI;
const FOUR_PI_SQ: f64 = 4.0 * PI * PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmComponent {
    pub w: f64,
    pub mu_y: f64,
    pub mu_z: f64,
    pub v_y: f64,
    pub v_z: f64,
}

impl SmComponent {
    pub fn new(w: f64, mu_y: f64, mu_z: f64, v_y: f64, v_z: f64) -> Self {
        Self { w, mu_y, mu_z, v_y, v_z }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcmParams {
    pub l00: f64,
    pub l10: f64,
    pub l11: f64,
}

impl IcmParams {
    pub fn identity() -> Self {
        Self { l00: 1.0, l10: 0.0, l11: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    #[serde(rename = "A")]
    pub amplitude: f64,
    pub sigma_r_sq: f64,
    pub icm: IcmParams,
    pub rx: Vec<SmComponent>,
    pub tx: Vec<SmComponent>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("hyperparameter record: {0}")]
    Format(String),
}

impl HyperParams {
    pub fn q_r(&self) -> usize {
        self.rx.len()
    }

    pub fn q_t(&self) -> usize {
        self.tx.len()
    }

    /// Prior variance of each real task at any point, before `B`.
    pub fn base_variance(&self) -> f64 {
        self.amplitude * weight_sum(&self.rx) * weight_sum(&self.tx)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("hyperparameters serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self, KernelError> {
        toml::from_str(text).map_err(|e| KernelError::Format(e.to_string()))
    }
}

pub fn weight_sum(components: &[SmComponent]) -> f64 {
    components.iter().map(|c| c.w).sum()
}

/// Closed interval `[lo, hi]`.
pub type Interval = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SideBounds {
    pub weight: Interval,
    pub mu: Interval,
    pub variance: Interval,
}

impl Default for SideBounds {
    fn default() -> Self {
        Self {
            weight: [1e-4, 10.0],
            mu: [-0.5, 0.5],
            variance: [6e-4, 0.1],
        }
    }
}

/// Box constraints on native hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperBounds {
    pub amplitude: Interval,
    pub rx: SideBounds,
    pub tx: SideBounds,
    pub l_diag: Interval,
    pub l_cross: Interval,
    pub noise: Interval,
}

impl Default for HyperBounds {
    fn default() -> Self {
        Self {
            amplitude: [1e-3, 30.0],
            rx: SideBounds::default(),
            tx: SideBounds::default(),
            l_diag: [1e-6, 10.0],
            l_cross: [-10.0, 10.0],
            noise: [1e-6, 1e3],
        }
    }
}

impl HyperBounds {
    pub fn validate(&self) -> Result<(), String> {
        let check = |name: &str, iv: Interval, positive: bool| {
            if !(iv[0] <= iv[1]) || !iv[0].is_finite() || !iv[1].is_finite() {
                return Err(format!("{name}: lower bound above upper bound"));
            }
            if positive && iv[0] <= 0.0 {
                return Err(format!("{name}: lower bound must be positive"));
            }
            Ok(())
        };
        check("amplitude", self.amplitude, true)?;
        for (s, b) in [("rx", &self.rx), ("tx", &self.tx)] {
            check(&format!("{s}.weight"), b.weight, true)?;
            check(&format!("{s}.variance"), b.variance, true)?;
            check(&format!("{s}.mu"), b.mu, false)?;
            if b.mu[0] < -0.5 || b.mu[1] > 0.5 {
                return Err(format!("{s}.mu must lie within [-0.5, 0.5]"));
            }
        }
        check("l_diag", self.l_diag, true)?;
        check("l_cross", self.l_cross, false)?;
        check("noise", self.noise, true)
    }

    pub fn contains(&self, hp: &HyperParams) -> bool {
        let inside = |x: f64, iv: Interval| x >= iv[0] && x <= iv[1];
        let side_ok = |cs: &[SmComponent], b: &SideBounds| {
            cs.iter().all(|c| {
                inside(c.w, b.weight)
                    && inside(c.mu_y, b.mu)
                    && inside(c.mu_z, b.mu)
                    && inside(c.v_y, b.variance)
                    && inside(c.v_z, b.variance)
            })
        };
        inside(hp.amplitude, self.amplitude)
            && side_ok(&hp.rx, &self.rx)
            && side_ok(&hp.tx, &self.tx)
            && inside(hp.icm.l00, self.l_diag)
            && inside(hp.icm.l11, self.l_diag)
            && inside(hp.icm.l10, self.l_cross)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArrayPair {
    pub rx: UraGeometry,
    pub tx: UraGeometry,
}

impl ArrayPair {
    pub fn new(rx: UraGeometry, tx: UraGeometry) -> Self {
        Self { rx, tx }
    }

    pub fn n_r(&self) -> usize {
        self.rx.total()
    }

    pub fn n_t(&self) -> usize {
        self.tx.total()
    }
}

/// `Σ_q w_q · exp(−(2π)²[v_y Δy² + v_z Δz²]) · cos(2π[μ_y Δy + μ_z Δz])`.
pub fn side_eval(components: &[SmComponent], delta: LatticeCoord) -> f64 {
    let (dy, dz) = (delta.y as f64, delta.z as f64);
    components
        .iter()
        .map(|c| {
            let env = (-FOUR_PI_SQ * (c.v_y * dy * dy + c.v_z * dz * dz)).exp();
            c.w * env * (TWO_PI * (c.mu_y * dy + c.mu_z * dz)).cos()
        })
        .sum()
}

pub fn base_eval(hp: &HyperParams, p: IndexPair, q: IndexPair, arrays: &ArrayPair) -> f64 {
    let dr = coords_unchecked(p.rx, arrays.rx) - coords_unchecked(q.rx, arrays.rx);
    let dt = coords_unchecked(p.tx, arrays.tx) - coords_unchecked(q.tx, arrays.tx);
    hp.amplitude * side_eval(&hp.rx, dr) * side_eval(&hp.tx, dt)
}

/// `B = L Lᵀ` with `L = [[ℓ00, 0], [ℓ10, ℓ11]]`.
pub fn icm_b(icm: &IcmParams) -> Matrix2<f64> {
    let (a, b, c) = (icm.l00, icm.l10, icm.l11);
    Matrix2::new(a * a, a * b, a * b, b * b + c * c)
}

/// `∂B/∂θ` for `θ00 = log ℓ00`, `θ10 = ℓ10`, `θ11 = log ℓ11`.
pub fn icm_b_derivatives(icm: &IcmParams) -> [Matrix2<f64>; 3] {
    let (a, b, c) = (icm.l00, icm.l10, icm.l11);
    [
        Matrix2::new(2.0 * a * a, a * b, a * b, 0.0),
        Matrix2::new(0.0, a, a, 2.0 * b),
        Matrix2::new(0.0, 0.0, 0.0, 2.0 * c * c),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Rx,
    Tx,
}

/// Per-component parameter, differentiated in its raw coordinate
/// (`log w`, `atanh 2μ`, `log v`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SmParam {
    Weight,
    MuY,
    MuZ,
    VarY,
    VarZ,
}

pub const SM_PARAMS: [SmParam; 5] = [
    SmParam::Weight,
    SmParam::MuY,
    SmParam::MuZ,
    SmParam::VarY,
    SmParam::VarZ,
];

/// Hyperparameter identifiers in raw-vector order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    Amplitude,
    Component { side: Side, q: usize, param: SmParam },
    L00,
    L10,
    L11,
    Noise,
}

impl ParamId {
    pub fn name(&self) -> String {
        match self {
            ParamId::Amplitude => "log_A".into(),
            ParamId::Component { side, q, param } => {
                let s = match side {
                    Side::Rx => "r",
                    Side::Tx => "t",
                };
                let p = match param {
                    SmParam::Weight => "log_w",
                    SmParam::MuY => "raw_mu_y",
                    SmParam::MuZ => "raw_mu_z",
                    SmParam::VarY => "log_v_y",
                    SmParam::VarZ => "log_v_z",
                };
                format!("{p}^{s}_{}", q + 1)
            }
            ParamId::L00 => "theta00".into(),
            ParamId::L10 => "theta10".into(),
            ParamId::L11 => "theta11".into(),
            ParamId::Noise => "log_sigma_r_sq".into(),
        }
    }
}

pub fn param_layout(q_r: usize, q_t: usize) -> Vec<ParamId> {
    let mut ids = vec![ParamId::Amplitude];
    for (side, n) in [(Side::Rx, q_r), (Side::Tx, q_t)] {
        for q in 0..n {
            for param in SM_PARAMS {
                ids.push(ParamId::Component { side, q, param });
            }
        }
    }
    ids.extend([ParamId::L00, ParamId::L10, ParamId::L11, ParamId::Noise]);
    ids
}

/// Side kernel tabulated over every lag of one array, optionally with the
/// raw-coordinate derivatives of each component parameter.
#[derive(Debug, Clone)]
pub struct SideTable {
    pub geom: UraGeometry,
    pub values: Vec<f64>,
    /// `derivs[5q + k][slot]` for parameter `SM_PARAMS[k]` of component `q`.
    pub derivs: Vec<Vec<f64>>,
}

impl SideTable {
    pub fn new(components: &[SmComponent], geom: UraGeometry, with_derivs: bool) -> Self {
        let n = geom.lag_count();
        let mut values = vec![0.0; n];
        let mut derivs = if with_derivs {
            vec![vec![0.0; n]; 5 * components.len()]
        } else {
            Vec::new()
        };
        for slot in 0..n {
            let d = geom.lag_at(slot);
            let (dy, dz) = (d.y as f64, d.z as f64);
            for (q, c) in components.iter().enumerate() {
                let env = (-FOUR_PI_SQ * (c.v_y * dy * dy + c.v_z * dz * dz)).exp();
                let phase = TWO_PI * (c.mu_y * dy + c.mu_z * dz);
                let bq = c.w * env * phase.cos();
                values[slot] += bq;
                if with_derivs {
                    let s = c.w * env * phase.sin();
                    let jy = 0.5 * (1.0 - 4.0 * c.mu_y * c.mu_y);
                    let jz = 0.5 * (1.0 - 4.0 * c.mu_z * c.mu_z);
                    derivs[5 * q][slot] = bq;
                    derivs[5 * q + 1][slot] = -s * TWO_PI * dy * jy;
                    derivs[5 * q + 2][slot] = -s * TWO_PI * dz * jz;
                    derivs[5 * q + 3][slot] = bq * (-FOUR_PI_SQ * c.v_y * dy * dy);
                    derivs[5 * q + 4][slot] = bq * (-FOUR_PI_SQ * c.v_z * dz * dz);
                }
            }
        }
        Self { geom, values, derivs }
    }
}

/// Lag slots of every pair of a grid against a second grid.
#[derive(Debug, Clone)]
pub struct PairLags {
    pub rows: usize,
    pub cols: usize,
    /// Column-major `rows×cols` slot tables.
    pub rx: Vec<u32>,
    pub tx: Vec<u32>,
}

impl PairLags {
    pub fn new(x: &[IndexPair], x2: &[IndexPair], arrays: &ArrayPair) -> Self {
        let (rows, cols) = (x.len(), x2.len());
        let mut rx = Vec::with_capacity(rows * cols);
        let mut tx = Vec::with_capacity(rows * cols);
        let cr: Vec<_> = x.iter().map(|p| coords_unchecked(p.rx, arrays.rx)).collect();
        let ct: Vec<_> = x.iter().map(|p| coords_unchecked(p.tx, arrays.tx)).collect();
        for q in x2 {
            let qr = coords_unchecked(q.rx, arrays.rx);
            let qt = coords_unchecked(q.tx, arrays.tx);
            for a in 0..rows {
                rx.push(arrays.rx.lag_slot(cr[a] - qr) as u32);
                tx.push(arrays.tx.lag_slot(ct[a] - qt) as u32);
            }
        }
        Self { rows, cols, rx, tx }
    }
}

pub(crate) fn gram_from_tables(amplitude: f64, lags: &PairLags, tr: &SideTable, tt: &SideTable, symmetric: bool) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(lags.rows, lags.cols);
    {
        let out = k.as_mut_slice();
        for (idx, o) in out.iter_mut().enumerate() {
            let (a, b) = (idx % lags.rows, idx / lags.rows);
            if symmetric && a < b {
                continue;
            }
            *o = amplitude * tr.values[lags.rx[idx] as usize] * tt.values[lags.tx[idx] as usize];
        }
    }
    if symmetric {
        k.fill_upper_triangle_with_lower_triangle();
    }
    k
}

/// `A·(K_r ∘ K_t)` between two grids; exactly symmetric when `x2` is `x`.
pub fn assemble_gram(hp: &HyperParams, x: &[IndexPair], x2: &[IndexPair], arrays: &ArrayPair) -> DMatrix<f64> {
    let tr = SideTable::new(&hp.rx, arrays.rx, false);
    let tt = SideTable::new(&hp.tx, arrays.tx, false);
    let lags = PairLags::new(x, x2, arrays);
    gram_from_tables(hp.amplitude, &lags, &tr, &tt, x == x2)
}

/// Lifted covariance `K = B ⊗ K_base` and `C_θ = K + σ_r² I`.
pub fn lift_icm(base: &DMatrix<f64>, b: &Matrix2<f64>, sigma_r_sq: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let lifted = lift_cross(base, b);
    let mut c = lifted.clone();
    for i in 0..c.nrows() {
        c[(i, i)] += sigma_r_sq;
    }
    (lifted, c)
}

/// `B ⊗ M` for a (possibly rectangular) base block.
pub fn lift_cross(base: &DMatrix<f64>, b: &Matrix2<f64>) -> DMatrix<f64> {
    let (r, c) = base.shape();
    let mut out = DMatrix::zeros(2 * r, 2 * c);
    for bi in 0..2 {
        for bj in 0..2 {
            out.view_mut((bi * r, bj * c), (r, c)).copy_from(&(base * b[(bi, bj)]));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct GramBundle {
    pub base: DMatrix<f64>,
    pub lifted: DMatrix<f64>,
    pub c_theta: DMatrix<f64>,
    pub derivatives: Vec<(ParamId, DMatrix<f64>)>,
}

/// Base Gram, lifted covariance and every `∂C_θ/∂θ` in raw-vector order.
pub fn gram_bundle(hp: &HyperParams, x: &[IndexPair], arrays: &ArrayPair) -> GramBundle {
    let base = assemble_gram(hp, x, x, arrays);
    let b = icm_b(&hp.icm);
    let (lifted, c_theta) = lift_icm(&base, &b, hp.sigma_r_sq);
    let derivatives = gram_derivatives(hp, x, arrays);
    GramBundle {
        base,
        lifted,
        c_theta,
        derivatives,
    }
}

/// Derivatives of `C_θ` with respect to each raw coordinate.
pub fn gram_derivatives(hp: &HyperParams, x: &[IndexPair], arrays: &ArrayPair) -> Vec<(ParamId, DMatrix<f64>)> {
    let tr = SideTable::new(&hp.rx, arrays.rx, true);
    let tt = SideTable::new(&hp.tx, arrays.tx, true);
    let lags = PairLags::new(x, x, arrays);
    let base = gram_from_tables(hp.amplitude, &lags, &tr, &tt, true);
    let b = icm_b(&hp.icm);
    let db = icm_b_derivatives(&hp.icm);
    let p = x.len();

    let mut out = Vec::new();
    for id in param_layout(hp.q_r(), hp.q_t()) {
        let m = match id {
            ParamId::Amplitude => lift_cross(&base, &b),
            ParamId::Component { side, q, param } => {
                let k = 5 * q + SM_PARAMS.iter().position(|s| *s == param).unwrap();
                let mut d = DMatrix::zeros(p, p);
                for (idx, o) in d.as_mut_slice().iter_mut().enumerate() {
                    let (sr, st) = (lags.rx[idx] as usize, lags.tx[idx] as usize);
                    *o = hp.amplitude
                        * match side {
                            Side::Rx => tr.derivs[k][sr] * tt.values[st],
                            Side::Tx => tr.values[sr] * tt.derivs[k][st],
                        };
                }
                lift_cross(&d, &b)
            }
            ParamId::L00 => lift_cross(&base, &db[0]),
            ParamId::L10 => lift_cross(&base, &db[1]),
            ParamId::L11 => lift_cross(&base, &db[2]),
            ParamId::Noise => DMatrix::identity(2 * p, 2 * p) * hp.sigma_r_sq,
        };
        out.push((id, m));
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::lattice::{equispaced_subset, training_grid, ActiveSet};
    use crate::linalg::{sym_eigenvalues, sym_min_eigenvalue, RngStream};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    pub(crate) fn random_hp(q_r: usize, q_t: usize, rng: &mut RngStream) -> HyperParams {
        let b = HyperBounds::default();
        let log_u = |rng: &mut RngStream, iv: Interval| rng.uniform_in(iv[0].ln(), iv[1].ln()).exp();
        let comp = |rng: &mut RngStream| SmComponent {
            w: log_u(rng, [0.05, 2.0]),
            mu_y: rng.uniform_in(-0.5, 0.5),
            mu_z: rng.uniform_in(-0.5, 0.5),
            v_y: log_u(rng, b.rx.variance),
            v_z: log_u(rng, b.rx.variance),
        };
        HyperParams {
            amplitude: log_u(rng, [0.1, 10.0]),
            sigma_r_sq: log_u(rng, [0.05, 2.0]),
            icm: IcmParams {
                l00: log_u(rng, [0.2, 3.0]),
                l10: rng.uniform_in(-1.0, 1.0),
                l11: log_u(rng, [0.2, 3.0]),
            },
            rx: (0..q_r).map(|_| comp(rng)).collect(),
            tx: (0..q_t).map(|_| comp(rng)).collect(),
        }
    }

    fn arrays44() -> ArrayPair {
        ArrayPair::new(UraGeometry::square(4), UraGeometry::square(4))
    }

    #[test]
    fn side_eval_examples() {
        let c = vec![
            SmComponent::new(0.7, 0.1, -0.2, 0.01, 0.02),
            SmComponent::new(1.3, -0.4, 0.3, 0.05, 0.001),
        ];
        assert_relative_eq!(side_eval(&c, LatticeCoord::new(0, 0)), 2.0, epsilon = 1e-15);
        let d = LatticeCoord::new(2, -1);
        assert_eq!(side_eval(&c, d), side_eval(&c, LatticeCoord::new(-2, 1)));
        let v = 6e-4;
        let one = [SmComponent::new(1.0, 0.25, 0.0, v, v)];
        let expected = -(-FOUR_PI_SQ * v * 4.0).exp();
        assert_relative_eq!(side_eval(&one, LatticeCoord::new(2, 0)), expected, epsilon = 1e-12);
    }

    #[test]
    fn icm_examples() {
        assert_eq!(icm_b(&IcmParams::identity()), Matrix2::identity());
        assert_eq!(
            icm_b(&IcmParams { l00: 2.0, l10: 0.0, l11: 1.0 }),
            Matrix2::new(4.0, 0.0, 0.0, 1.0)
        );
        assert_eq!(
            icm_b(&IcmParams { l00: 1.0, l10: 1.0, l11: 1.0 }),
            Matrix2::new(1.0, 1.0, 1.0, 2.0)
        );
    }

    #[test]
    fn base_eval_zero_lag() {
        let mut rng = RngStream::new(1);
        let hp = random_hp(3, 2, &mut rng);
        let p = IndexPair::new(5, 7);
        assert_relative_eq!(
            base_eval(&hp, p, p, &arrays44()),
            hp.amplitude * weight_sum(&hp.rx) * weight_sum(&hp.tx),
            epsilon = 1e-12
        );
    }

    #[test]
    fn one_point_gram() {
        let mut rng = RngStream::new(2);
        let hp = random_hp(2, 2, &mut rng);
        let x = [IndexPair::new(3, 3)];
        let k = assemble_gram(&hp, &x, &x, &arrays44());
        assert_relative_eq!(k[(0, 0)], hp.base_variance(), epsilon = 1e-12);
    }

    #[test]
    fn hadamard_equals_kronecker_on_cartesian_grid() {
        let arrays = ArrayPair::new(UraGeometry::new(3, 1).unwrap(), UraGeometry::new(2, 1).unwrap());
        let mut rng = RngStream::new(3);
        let hp = random_hp(2, 2, &mut rng);
        let omega = ActiveSet::full(2);
        let x = training_grid(3, &omega);
        let k = assemble_gram(&hp, &x, &x, &arrays);
        let kr = DMatrix::from_fn(3, 3, |i, j| {
            side_eval(&hp.rx, coords_unchecked(i + 1, arrays.rx) - coords_unchecked(j + 1, arrays.rx))
        });
        let kt = DMatrix::from_fn(2, 2, |i, j| {
            side_eval(&hp.tx, coords_unchecked(i + 1, arrays.tx) - coords_unchecked(j + 1, arrays.tx))
        });
        let kron = kt.kronecker(&kr) * hp.amplitude;
        assert!((k - kron).norm() < 1e-12);
    }

    #[test]
    fn gram_matches_pointwise_and_is_symmetric() {
        let mut rng = RngStream::new(4);
        let hp = random_hp(3, 3, &mut rng);
        let arrays = arrays44();
        let x = training_grid(16, &equispaced_subset(16, 4).unwrap());
        let k = assemble_gram(&hp, &x, &x, &arrays);
        assert_eq!(k, k.transpose());
        for a in 0..x.len() {
            for b in 0..x.len() {
                assert_relative_eq!(k[(a, b)], base_eval(&hp, x[a], x[b], &arrays), max_relative = 1e-12, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn lift_example_eigenvalues() {
        let base = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let (_, c) = lift_icm(&base, &Matrix2::identity(), 0.5);
        let mut e: Vec<f64> = sym_eigenvalues(&c).iter().cloned().collect();
        e.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (got, want) in e.iter().zip([1.5, 1.5, 3.5, 3.5]) {
            assert_relative_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn identity_b_decouples() {
        let base = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let (k, _) = lift_icm(&base, &Matrix2::identity(), 0.0);
        assert_eq!(k.view((0, 0), (2, 2)), base.view((0, 0), (2, 2)));
        assert_eq!(k.view((2, 2), (2, 2)), base.view((0, 0), (2, 2)));
        assert!(k.view((0, 2), (2, 2)).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn block_layout_is_permuted_interleaved_kronecker() {
        let mut rng = RngStream::new(5);
        let base = DMatrix::from_fn(3, 3, |_, _| rng.normal());
        let base = &base * base.transpose();
        let b = icm_b(&IcmParams { l00: 1.2, l10: -0.4, l11: 0.7 });
        let bd = DMatrix::from_fn(2, 2, |i, j| b[(i, j)]);
        let interleaved = base.kronecker(&bd);
        let block = lift_cross(&base, &b);
        // interleaved index 2a+t maps to block index t·P + a
        for i in 0..6 {
            for j in 0..6 {
                let (bi, bj) = ((i % 2) * 3 + i / 2, (j % 2) * 3 + j / 2);
                assert_relative_eq!(interleaved[(i, j)], block[(bi, bj)], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn marginal_variance_identity() {
        let mut rng = RngStream::new(6);
        let hp = random_hp(3, 3, &mut rng);
        let x = training_grid(16, &equispaced_subset(16, 2).unwrap());
        let (k, _) = lift_icm(&assemble_gram(&hp, &x, &x, &arrays44()), &icm_b(&hp.icm), 0.0);
        let b = icm_b(&hp.icm);
        let p = x.len();
        for a in 0..p {
            assert_relative_eq!(k[(a, a)], hp.base_variance() * b[(0, 0)], max_relative = 1e-12);
            assert_relative_eq!(k[(p + a, p + a)], hp.base_variance() * b[(1, 1)], max_relative = 1e-12);
        }
    }

    #[test]
    fn log_amplitude_derivative_is_gram() {
        let mut rng = RngStream::new(7);
        let hp = random_hp(1, 2, &mut rng);
        let x = training_grid(16, &equispaced_subset(16, 2).unwrap());
        let bundle = gram_bundle(&hp, &x, &arrays44());
        assert_eq!(bundle.derivatives[0].0, ParamId::Amplitude);
        assert!((&bundle.derivatives[0].1 - &bundle.lifted).norm() < 1e-12);
        // a single rx component: d/dlog w equals the Gram
        let (id, dw) = &bundle.derivatives[1];
        assert_eq!(*id, ParamId::Component { side: Side::Rx, q: 0, param: SmParam::Weight });
        assert!((dw - &bundle.lifted).norm() < 1e-12 * bundle.lifted.norm());
        let (id, dn) = bundle.derivatives.last().unwrap();
        assert_eq!(*id, ParamId::Noise);
        assert_relative_eq!(dn[(3, 3)], hp.sigma_r_sq);
    }

    #[test]
    fn param_layout_length() {
        assert_eq!(param_layout(3, 3).len(), 1 + 15 + 15 + 4);
        assert_eq!(param_layout(3, 3)[31], ParamId::L00);
    }

    #[test]
    fn serialization_round_trip() {
        let mut rng = RngStream::new(8);
        let hp = random_hp(3, 3, &mut rng);
        let text = hp.to_toml();
        assert!(text.contains("A = "));
        assert_eq!(HyperParams::from_toml(&text).unwrap(), hp);
        assert!(HyperParams::from_toml("A = 1.0").is_err());
    }

    #[test]
    fn default_bounds_are_valid() {
        HyperBounds::default().validate().unwrap();
        let bad = HyperBounds {
            amplitude: [2.0, 1.0],
            ..HyperBounds::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn gram_is_psd(seed in 0u64..5000, n_t in 1usize..5) {
            let mut rng = RngStream::new(seed);
            let hp = random_hp(3, 3, &mut rng);
            let x = training_grid(16, &equispaced_subset(16, n_t).unwrap());
            let k = assemble_gram(&hp, &x, &x, &arrays44());
            let tol = 1e-8 * k.trace();
            prop_assert!(sym_min_eigenvalue(&k) >= -tol);
            let (lifted, _) = lift_icm(&k, &icm_b(&hp.icm), 0.0);
            prop_assert!(sym_min_eigenvalue(&lifted) >= -1e-8 * lifted.trace());
        }

        #[test]
        fn stationarity_under_shift(seed in 0u64..5000, sy in -3i64..4, sz in -3i64..4, ty in -3i64..4, tz in -3i64..4) {
            let arrays = arrays44();
            let mut rng = RngStream::new(seed);
            let hp = random_hp(2, 2, &mut rng);
            let pick = |rng: &mut RngStream| 1 + (rng.uniform() * 16.0) as usize % 16;
            let (p, q) = (IndexPair::new(pick(&mut rng), pick(&mut rng)), IndexPair::new(pick(&mut rng), pick(&mut rng)));
            let shift = |i: usize, g: UraGeometry, dy: i64, dz: i64| {
                let c = coords_unchecked(i, g);
                crate::lattice::index_of(LatticeCoord::new(c.y + dy, c.z + dz), g)
            };
            let moved = (
                shift(p.rx, arrays.rx, sy, sz), shift(q.rx, arrays.rx, sy, sz),
                shift(p.tx, arrays.tx, ty, tz), shift(q.tx, arrays.tx, ty, tz),
            );
            if let (Some(a), Some(b), Some(c), Some(d)) = moved {
                let v0 = base_eval(&hp, p, q, &arrays);
                let v1 = base_eval(&hp, IndexPair::new(a, c), IndexPair::new(b, d), &arrays);
                prop_assert!((v0 - v1).abs() <= 1e-12 * v0.abs().max(1.0));
            }
        }

        #[test]
        fn derivatives_match_finite_differences(seed in 0u64..2000) {
            let mut rng = RngStream::new(seed);
            let hp = random_hp(2, 2, &mut rng);
            let arrays = ArrayPair::new(UraGeometry::new(3, 2).unwrap(), UraGeometry::new(2, 2).unwrap());
            let x = training_grid(6, &ActiveSet::new(vec![1, 4], 4).unwrap());
            let bundle = gram_bundle(&hp, &x, &arrays);
            for (k, (id, d)) in bundle.derivatives.iter().enumerate() {
                let c_at = |delta: f64| {
                    let h = perturb_raw(&hp, k, delta);
                    let base = assemble_gram(&h, &x, &x, &arrays);
                    lift_icm(&base, &icm_b(&h.icm), h.sigma_r_sq).1
                };
                let step = 1e-6;
                let fd = (c_at(step) - c_at(-step)) / (2.0 * step);
                // central differences at this step are roundoff-limited near 1e-10·‖C‖
                let scale = d.norm().max(bundle.c_theta.norm() * 1e-4);
                prop_assert!((d - &fd).norm() / scale < 1e-5, "{} err {}", id.name(), (d - &fd).norm() / scale);
            }
        }
    }

    /// Moves raw coordinate `k` of `hp` by `delta` (no clamping).
    pub(crate) fn perturb_raw(hp: &HyperParams, k: usize, delta: f64) -> HyperParams {
        let mut h = hp.clone();
        let ids = param_layout(hp.q_r(), hp.q_t());
        match ids[k] {
            ParamId::Amplitude => h.amplitude *= delta.exp(),
            ParamId::Component { side, q, param } => {
                let c = match side {
                    Side::Rx => &mut h.rx[q],
                    Side::Tx => &mut h.tx[q],
                };
                let mu = |m: f64| 0.5 * ((2.0 * m).atanh() + delta).tanh();
                match param {
                    SmParam::Weight => c.w *= delta.exp(),
                    SmParam::MuY => c.mu_y = mu(c.mu_y),
                    SmParam::MuZ => c.mu_z = mu(c.mu_z),
                    SmParam::VarY => c.v_y *= delta.exp(),
                    SmParam::VarZ => c.v_z *= delta.exp(),
                }
            }
            ParamId::L00 => h.icm.l00 *= delta.exp(),
            ParamId::L10 => h.icm.l10 += delta,
            ParamId::L11 => h.icm.l11 *= delta.exp(),
            ParamId::Noise => h.sigma_r_sq *= delta.exp(),
        }
        h
    }
}
