//! Reference estimators: least squares, isotropic-prior MMSE, and sparse
//! recovery (OMP, AMP) over a Kronecker angular dictionary.

use crate::channel::ChannelMatrix;
use crate::lattice::{coords_unchecked, ActiveSet, UraGeometry};
use crate::linalg::{spd_factorize, LinalgError, C64, GP_JITTER_LADDER};
use crate::pilot::ObservationSet;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BaselineError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("regularized system is singular (min eigenvalue {min_eigenvalue:.3e})")]
    Singular { min_eigenvalue: f64 },
}

impl From<LinalgError> for BaselineError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::NotPositiveDefinite { min_eigenvalue, .. } => BaselineError::Singular { min_eigenvalue },
            LinalgError::NotSquare { rows, cols } => BaselineError::Shape(format!("{rows}x{cols} system")),
        }
    }
}

/// `Ĥ = Z·Fᵀ`: observed columns in place, the rest zero.
pub fn ls_estimate(z: &DMatrix<C64>, omega: &ActiveSet, n_t: usize) -> Result<ChannelMatrix, BaselineError> {
    if z.ncols() != omega.len() || omega.n_total() != n_t {
        return Err(BaselineError::Shape(format!("Z has {} columns for |Ω| = {}", z.ncols(), omega.len())));
    }
    let mut h = DMatrix::zeros(z.nrows(), n_t);
    for (l, &a) in omega.indices().iter().enumerate() {
        h.set_column(a - 1, &z.column(l));
    }
    Ok(ChannelMatrix::new(h))
}

/// `sin(πx)/(πx)` with `sinc(0) = 1`.
pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Isotropic sinc prior over physical entry positions.
#[derive(Debug, Clone, PartialEq)]
pub struct IsoPrior {
    pub sigma_h_sq: f64,
    pub lambda_c: f64,
    /// One point per entry of `vec(H)`.
    pub positions: Vec<[f64; 3]>,
}

impl IsoPrior {
    /// Receive and transmit URAs in parallel planes `plane_gap_wavelengths·λ`
    /// apart with element pitch `spacing_over_lambda·λ`; each entry sits at
    /// the midpoint of its antenna pair.
    pub fn from_arrays(
        rx: UraGeometry,
        tx: UraGeometry,
        lambda_c: f64,
        spacing_over_lambda: f64,
        plane_gap_wavelengths: f64,
        sigma_h_sq: f64,
    ) -> Self {
        let d = spacing_over_lambda * lambda_c;
        let place = |g: UraGeometry, idx: usize, x: f64| {
            let c = coords_unchecked(idx, g);
            [x, c.y as f64 * d, c.z as f64 * d]
        };
        let gap = plane_gap_wavelengths * lambda_c;
        let mut positions = Vec::with_capacity(rx.total() * tx.total());
        for j in 1..=tx.total() {
            let pt = place(tx, j, gap);
            for i in 1..=rx.total() {
                let pr = place(rx, i, 0.0);
                positions.push([(pr[0] + pt[0]) / 2.0, (pr[1] + pt[1]) / 2.0, (pr[2] + pt[2]) / 2.0]);
            }
        }
        Self {
            sigma_h_sq,
            lambda_c,
            positions,
        }
    }

    pub fn covariance(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (self.positions[a], self.positions[b]);
        let dist = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
        self.sigma_h_sq * sinc(2.0 * dist / self.lambda_c)
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.positions.len();
        DMatrix::from_fn(n, n, |a, b| self.covariance(a, b))
    }
}

/// `ĥ = R_{:,𝒪}(R_{𝒪𝒪} + σ_obs² I)⁻¹ z` with the observed rows `𝒪`.
pub fn mmse_isotropic(obs: &ObservationSet, prior: &IsoPrior, n_r: usize, n_t: usize) -> Result<ChannelMatrix, BaselineError> {
    let n = n_r * n_t;
    if prior.positions.len() != n {
        return Err(BaselineError::Shape(format!("{} prior positions for {} entries", prior.positions.len(), n)));
    }
    let rows: Vec<usize> = obs.grid.iter().map(|p| p.vec_index(n_r)).collect();
    let p = rows.len();
    let mut roo = DMatrix::from_fn(p, p, |a, b| prior.covariance(rows[a], rows[b]));
    for i in 0..p {
        roo[(i, i)] += obs.sigma_obs_sq;
    }
    let f = spd_factorize(&roo, &GP_JITTER_LADDER)?;
    let re = f.solve_vec(&DVector::from_iterator(p, obs.z.iter().map(|v| v.re)));
    let im = f.solve_vec(&DVector::from_iterator(p, obs.z.iter().map(|v| v.im)));
    let mut h = DMatrix::zeros(n_r, n_t);
    for alpha in 0..n {
        let (mut sr, mut si) = (0.0, 0.0);
        for (k, &r) in rows.iter().enumerate() {
            let c = prior.covariance(alpha, r);
            sr += c * re[k];
            si += c * im[k];
        }
        h[(alpha % n_r, alpha / n_r)] = C64::new(sr, si);
    }
    Ok(ChannelMatrix::new(h))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparseRecoveryConfig {
    pub omp_sparsity: usize,
    pub amp_threshold: f64,
    pub amp_iters: usize,
    /// Angular oversampling per lattice axis.
    pub oversampling: usize,
}

impl Default for SparseRecoveryConfig {
    fn default() -> Self {
        Self {
            omp_sparsity: 7,
            amp_threshold: 1.2,
            amp_iters: 50,
            oversampling: 1,
        }
    }
}

impl SparseRecoveryConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.omp_sparsity == 0 {
            return Err(BaselineError::Config("OMP sparsity must be at least 1".into()));
        }
        if !(self.amp_threshold > 0.0) || self.amp_iters == 0 {
            return Err(BaselineError::Config("AMP needs a positive threshold and at least one iteration".into()));
        }
        if self.oversampling == 0 {
            return Err(BaselineError::Config("oversampling must be at least 1".into()));
        }
        Ok(())
    }
}

/// 2-D DFT atoms of one array, unit norm, one per column.
pub fn dft_atoms(geom: UraGeometry, oversampling: usize) -> DMatrix<C64> {
    let (ky, kz) = (oversampling * geom.n_y, oversampling * geom.n_z);
    let norm = (geom.total() as f64).sqrt();
    DMatrix::from_fn(geom.total(), ky * kz, |e, atom| {
        let c = coords_unchecked(e + 1, geom);
        let (a, b) = (atom % ky, atom / ky);
        let phase = 2.0 * PI * (c.y as f64 * a as f64 / ky as f64 + c.z as f64 * b as f64 / kz as f64);
        C64::from_polar(1.0 / norm, phase)
    })
}

/// Kronecker angular dictionary: atom `(p, q)` is `vec(f_r,p · f_t,qᵀ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularDictionary {
    pub rx: DMatrix<C64>,
    pub tx: DMatrix<C64>,
}

impl AngularDictionary {
    pub fn new(rx: UraGeometry, tx: UraGeometry, oversampling: usize) -> Self {
        Self {
            rx: dft_atoms(rx, oversampling),
            tx: dft_atoms(tx, oversampling),
        }
    }

    /// Transmit atoms restricted to the active rows.
    fn tx_rows(&self, omega: &ActiveSet) -> DMatrix<C64> {
        DMatrix::from_fn(omega.len(), self.tx.ncols(), |l, q| self.tx[(omega.indices()[l] - 1, q)])
    }

    /// `N_r×N_t` matrix of a coefficient grid `X` (rx atoms × tx atoms).
    pub fn synthesize(&self, x: &DMatrix<C64>) -> DMatrix<C64> {
        &self.rx * x * self.tx.transpose()
    }
}

fn check_obs(obs: &ObservationSet, n_r: usize, omega: &ActiveSet) -> Result<DMatrix<C64>, BaselineError> {
    if obs.len() != n_r * omega.len() {
        return Err(BaselineError::Shape(format!("{} observations for {}x{}", obs.len(), n_r, omega.len())));
    }
    Ok(obs.to_matrix(n_r))
}

/// Greedy OMP on the observed columns followed by a minimum-norm refit.
/// Returns the estimate and the residual norm after each selection.
pub fn omp_estimate(
    obs: &ObservationSet,
    omega: &ActiveSet,
    dict: &AngularDictionary,
    cfg: &SparseRecoveryConfig,
) -> Result<(ChannelMatrix, Vec<f64>), BaselineError> {
    cfg.validate()?;
    let n_r = dict.rx.nrows();
    let z = check_obs(obs, n_r, omega)?;
    let ft = dict.tx_rows(omega);
    let n_tx_atoms = dict.tx.ncols();
    let p = z.len();
    let zv = DVector::from_column_slice(z.as_slice());
    let column = |atom: usize| -> DVector<C64> {
        let (a, b) = (atom % dict.rx.ncols(), atom / dict.rx.ncols());
        DVector::from_fn(p, |k, _| dict.rx[(k % n_r, a)] * ft[(k / n_r, b)])
    };

    let mut support: Vec<usize> = Vec::new();
    let mut coef = DVector::<C64>::zeros(0);
    let mut residual = zv.clone();
    let mut norms = Vec::new();
    for _ in 0..cfg.omp_sparsity {
        let r = DMatrix::from_column_slice(n_r, omega.len(), residual.as_slice());
        let corr = dict.rx.adjoint() * r * ft.conjugate();
        let mut best = None;
        let mut best_mag = -1.0;
        for (idx, v) in corr.iter().enumerate() {
            if v.norm_sqr() > best_mag && !support.contains(&idx) {
                best_mag = v.norm_sqr();
                best = Some(idx);
            }
        }
        let Some(atom) = best else { break };
        support.push(atom);
        let a = DMatrix::from_columns(&support.iter().map(|&s| column(s)).collect::<Vec<_>>());
        coef = a
            .clone()
            .pseudo_inverse(1e-10)
            .map_err(|e| BaselineError::Config(e.to_string()))?
            * &zv;
        residual = &zv - &a * &coef;
        norms.push(residual.norm());
    }
    let mut x = DMatrix::<C64>::zeros(dict.rx.ncols(), n_tx_atoms);
    for (k, &s) in support.iter().enumerate() {
        x[(s % dict.rx.ncols(), s / dict.rx.ncols())] += coef[k];
    }
    Ok((ChannelMatrix::new(dict.synthesize(&x)), norms))
}

/// `u·max(0, 1 − θ/|u|)`.
pub fn soft_threshold(u: C64, theta: f64) -> C64 {
    let m = u.norm();
    if m <= theta {
        C64::new(0.0, 0.0)
    } else {
        u * ((m - theta) / m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmpOutcome {
    pub estimate: ChannelMatrix,
    pub iterations: usize,
    pub diverged: bool,
    /// Number of nonzero angular coefficients in the returned iterate.
    pub support_size: usize,
}

/// Complex AMP with soft thresholding at `τ·σ̂`, where `σ̂` is the Rayleigh
/// median estimate `median|r|/√ln 2` of the residual noise level.
pub fn amp_estimate(
    obs: &ObservationSet,
    omega: &ActiveSet,
    dict: &AngularDictionary,
    cfg: &SparseRecoveryConfig,
) -> Result<AmpOutcome, BaselineError> {
    cfg.validate()?;
    let n_r = dict.rx.nrows();
    let z = check_obs(obs, n_r, omega)?;
    let ft = dict.tx_rows(omega);
    let forward = |x: &DMatrix<C64>| &dict.rx * x * ft.transpose();
    let adjoint = |r: &DMatrix<C64>| dict.rx.adjoint() * r * ft.conjugate();
    let p = z.len() as f64;
    // unit-norm column scaling for oversampled or partial operators
    let col_norm_sq = (omega.len() as f64 / dict.tx.nrows() as f64).max(f64::MIN_POSITIVE);

    let mut x = DMatrix::<C64>::zeros(dict.rx.ncols(), dict.tx.ncols());
    let mut r = z.clone();
    let r0 = r.norm();
    let mut best = (r0, x.clone());
    let mut iterations = 0;
    let mut diverged = false;
    if r0 == 0.0 {
        return Ok(AmpOutcome {
            estimate: ChannelMatrix::new(dict.synthesize(&x)),
            iterations: 0,
            diverged: false,
            support_size: 0,
        });
    }
    for _ in 0..cfg.amp_iters {
        iterations += 1;
        let mut mags: Vec<f64> = r.iter().map(|v| v.norm()).collect();
        mags.sort_by(f64::total_cmp);
        let median = mags[mags.len() / 2];
        let sigma = median / 2f64.ln().sqrt();
        let theta = cfg.amp_threshold * sigma;
        let pseudo = &x + adjoint(&r) / C64::new(col_norm_sq, 0.0);
        let mut div = 0.0;
        let x_new = pseudo.map(|u| {
            let m = u.norm();
            if m > theta {
                div += 1.0 - theta / (2.0 * m);
            }
            soft_threshold(u, theta)
        });
        let onsager = div / p;
        let r_new = &z - forward(&x_new) + &r * C64::new(onsager, 0.0);
        let change = (&r_new - &r).norm() / r.norm().max(f64::MIN_POSITIVE);
        x = x_new;
        r = r_new;
        let rn = (&z - forward(&x)).norm();
        if rn < best.0 {
            best = (rn, x.clone());
        }
        if r.norm() > 1e3 * r0 || !r.norm().is_finite() {
            diverged = true;
            log::warn!("AMP diverged after {iterations} iterations");
            break;
        }
        if change < 1e-6 {
            break;
        }
    }
    let chosen = if diverged { best.1 } else { x };
    Ok(AmpOutcome {
        support_size: chosen.iter().filter(|v| v.norm() > 0.0).count(),
        estimate: ChannelMatrix::new(dict.synthesize(&chosen)),
        iterations,
        diverged,
    })
}
