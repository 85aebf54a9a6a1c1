//! Pilot transmission, matched filtering and the observation model.

use crate::channel::ChannelMatrix;
use crate::lattice::{training_grid, ActiveSet, IndexPair};
use crate::linalg::{RngStream, C64};
use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PilotError {
    #[error("pilot length T = {t} shorter than n_t = {n_t}")]
    InfeasibleLength { n_t: usize, t: usize },
    #[error("pilot rows are not orthonormal (deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("dimension mismatch: {0}")]
    Shape(String),
}

const ORTHONORMAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct PilotMatrix {
    symbols: DMatrix<C64>,
}

impl PilotMatrix {
    pub fn new(symbols: DMatrix<C64>) -> Result<Self, PilotError> {
        let dev = orthonormality_defect(&symbols);
        if symbols.nrows() > symbols.ncols() || dev > ORTHONORMAL_TOL {
            return Err(PilotError::NotOrthonormal(dev));
        }
        Ok(Self { symbols })
    }

    pub fn symbols(&self) -> &DMatrix<C64> {
        &self.symbols
    }

    pub fn n_t(&self) -> usize {
        self.symbols.nrows()
    }

    pub fn length(&self) -> usize {
        self.symbols.ncols()
    }
}

/// `‖S Sᴴ − I‖_F`.
pub fn orthonormality_defect(s: &DMatrix<C64>) -> f64 {
    let g = s * s.adjoint();
    (g - DMatrix::<C64>::identity(s.nrows(), s.nrows())).norm()
}

/// First `n_t` rows of the unitary `T×T` DFT matrix.
pub fn design_pilots(n_t: usize, t: usize) -> Result<PilotMatrix, PilotError> {
    if n_t == 0 || t < n_t {
        return Err(PilotError::InfeasibleLength { n_t, t });
    }
    let scale = 1.0 / (t as f64).sqrt();
    let s = DMatrix::from_fn(n_t, t, |k, m| {
        C64::from_polar(scale, -2.0 * PI * ((k * m) % t) as f64 / t as f64)
    });
    PilotMatrix::new(s)
}

/// `Y = √P_A · H(:,Ω) · S + N` with `N` circular Gaussian of variance `σ_n²`.
pub fn transmit_and_receive(
    h: &ChannelMatrix,
    omega: &ActiveSet,
    s: &PilotMatrix,
    p_a: f64,
    sigma_n_sq: f64,
    rng: &mut RngStream,
) -> Result<DMatrix<C64>, PilotError> {
    if !(p_a >= 0.0) || !(sigma_n_sq >= 0.0) {
        return Err(PilotError::Invalid("power and noise variance must be non-negative".into()));
    }
    if omega.len() != s.n_t() || omega.n_total() != h.n_t() {
        return Err(PilotError::Shape(format!(
            "active set of {} for {} pilot rows and {} transmit antennas",
            omega.len(),
            s.n_t(),
            h.n_t()
        )));
    }
    let cols = selected_columns(h, omega);
    let mut y = cols * s.symbols() * C64::new(p_a.sqrt(), 0.0);
    let sd = sigma_n_sq.sqrt();
    if sd > 0.0 {
        for x in y.iter_mut() {
            *x += rng.complex_normal() * sd;
        }
    }
    Ok(y)
}

pub fn selected_columns(h: &ChannelMatrix, omega: &ActiveSet) -> DMatrix<C64> {
    let idx: Vec<usize> = omega.indices().iter().map(|a| a - 1).collect();
    h.entries().select_columns(idx.iter())
}

/// `Z = Y Sᴴ / √P_A`.
pub fn matched_filter(y: &DMatrix<C64>, s: &PilotMatrix, p_a: f64) -> Result<DMatrix<C64>, PilotError> {
    let dev = orthonormality_defect(s.symbols());
    if dev > ORTHONORMAL_TOL {
        return Err(PilotError::NotOrthonormal(dev));
    }
    if !(p_a > 0.0) {
        return Err(PilotError::Invalid("pilot power must be positive".into()));
    }
    if y.ncols() != s.length() {
        return Err(PilotError::Shape(format!(
            "received {} symbols, pilots have {}",
            y.ncols(),
            s.length()
        )));
    }
    Ok(y * s.symbols().adjoint() / C64::new(p_a.sqrt(), 0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevels {
    pub sigma_n_sq: f64,
    pub sigma_obs_sq: f64,
}

/// `σ_n² = n_t·P_A/snr`, `σ_obs² = σ_n²/P_A`.
pub fn snr_to_noise(snr_linear: f64, n_t: usize, p_a: f64) -> Result<NoiseLevels, PilotError> {
    if !(snr_linear > 0.0) || !snr_linear.is_finite() {
        return Err(PilotError::Invalid(format!("snr must be positive, got {snr_linear}")));
    }
    if !(p_a > 0.0) {
        return Err(PilotError::Invalid("pilot power must be positive".into()));
    }
    let sigma_n_sq = n_t as f64 * p_a / snr_linear;
    Ok(NoiseLevels {
        sigma_n_sq,
        sigma_obs_sq: observation_variance(sigma_n_sq, p_a),
    })
}

/// Post-filter noise variance per complex entry.
pub fn observation_variance(sigma_n_sq: f64, p_a: f64) -> f64 {
    sigma_n_sq / p_a
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub grid: Vec<IndexPair>,
    pub z: DVector<C64>,
    pub z_icm: DVector<f64>,
    pub sigma_obs_sq: f64,
    pub sigma_r_sq: f64,
}

impl ObservationSet {
    /// Builds the set from a grid and complex observations.
    pub fn from_parts(grid: Vec<IndexPair>, z: DVector<C64>, sigma_obs_sq: f64) -> Result<Self, PilotError> {
        if grid.len() != z.len() {
            return Err(PilotError::Shape(format!("{} grid points, {} observations", grid.len(), z.len())));
        }
        let p = z.len();
        let z_icm = DVector::from_fn(2 * p, |k, _| if k < p { z[k].re } else { z[k - p].im });
        Ok(Self {
            grid,
            z,
            z_icm,
            sigma_obs_sq,
            sigma_r_sq: sigma_obs_sq / 2.0,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Reshapes `z` back into the `N_r×n_t` matrix it was stacked from.
    pub fn to_matrix(&self, n_r: usize) -> DMatrix<C64> {
        DMatrix::from_column_slice(n_r, self.z.len() / n_r, self.z.as_slice())
    }
}

/// `z = vec(Z)` with the receive index fastest, aligned with the training grid.
pub fn build_observations(
    z: &DMatrix<C64>,
    omega: &ActiveSet,
    n_r: usize,
    sigma_obs_sq: f64,
) -> Result<ObservationSet, PilotError> {
    if z.nrows() != n_r || z.ncols() != omega.len() {
        return Err(PilotError::Shape(format!(
            "Z is {}x{}, expected {}x{}",
            z.nrows(),
            z.ncols(),
            n_r,
            omega.len()
        )));
    }
    let grid = training_grid(n_r, omega);
    let vec = DVector::from_column_slice(z.as_slice());
    for (k, p) in grid.iter().enumerate() {
        let col = k / n_r;
        if p.rx != k % n_r + 1 || p.tx != omega.indices()[col] {
            return Err(PilotError::Shape("grid ordering mismatch".into()));
        }
    }
    ObservationSet::from_parts(grid, vec, sigma_obs_sq)
}

/// Full training chain for one coherence block: pilots, channel use,
/// matched filter and stacking. `T = n_t`.
pub fn observe(
    h: &ChannelMatrix,
    omega: &ActiveSet,
    p_a: f64,
    snr_linear: f64,
    rng: &mut RngStream,
) -> Result<(DMatrix<C64>, ObservationSet), PilotError> {
    let noise = snr_to_noise(snr_linear, omega.len(), p_a)?;
    let s = design_pilots(omega.len(), omega.len())?;
    let y = transmit_and_receive(h, omega, &s, p_a, noise.sigma_n_sq, rng)?;
    let z = matched_filter(&y, &s, p_a)?;
    let obs = build_observations(&z, omega, h.n_r(), noise.sigma_obs_sq)?;
    Ok((z, obs))
}
