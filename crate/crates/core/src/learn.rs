//! Kernel hyperparameter learning by maximizing the ICM log marginal
//! likelihood over a reparameterized box.
//!
//! Raw coordinates are unconstrained: `A = exp θ_A`, `w = exp θ_w`,
//! `v = exp θ_v`, `μ = ½ tanh θ_μ`, `ℓ00 = exp θ00`, `ℓ10 = θ10`,
//! `ℓ11 = exp θ11` and, when learned, `σ_r² = exp θ_noise`.
//!
//! The log marginal likelihood carries the constant `−P·log 2π` even though
//! `z_ICM` has `2P` entries; the constant never moves the maximizer.

use crate::kernel::{
    assemble_gram, gram_derivatives, gram_from_tables, icm_b, icm_b_derivatives, lift_icm, param_layout, ArrayPair,
    HyperBounds, HyperParams, IcmParams, Interval, PairLags, ParamId, SideBounds, SideTable, SmComponent,
};
use crate::lattice::IndexPair;
use crate::linalg::{factorize_with, spd_factorize, LinalgError, RngStream, SpdFactor, C64, DEFAULT_JITTER_LADDER};
use crate::optim::{minimize, projected_gradient_norm, LbfgsOptions};
use crate::pilot::ObservationSet;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Raw `θ_μ` is kept within `±RAW_MU_CAP` so `μ` stays off the `±½` poles.
pub const RAW_MU_CAP: f64 = 4.0;

/// Absolute floor on the denominator of the gradient-check relative error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LearnError {
    #[error("ill-conditioned covariance: min eigenvalue {min_eigenvalue:.3e} after jitter {max_jitter:.3e}")]
    IllConditioned { min_eigenvalue: f64, max_jitter: f64 },
    #[error("all {restarts} restarts failed to factorize")]
    Unlearnable { restarts: usize },
    #[error("invalid learning configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl From<LinalgError> for LearnError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::NotPositiveDefinite {
                min_eigenvalue,
                max_jitter,
            } => LearnError::IllConditioned {
                min_eigenvalue,
                max_jitter,
            },
            LinalgError::NotSquare { rows, cols } => LearnError::Shape(format!("{rows}x{cols} covariance")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseMode {
    Fixed(f64),
    Learned,
}

/// The raw coordinate system and its box.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpace {
    pub q_r: usize,
    pub q_t: usize,
    pub bounds: HyperBounds,
    pub noise: NoiseMode,
}

fn clamp_iv(x: f64, iv: Interval) -> f64 {
    x.clamp(iv[0], iv[1])
}

fn log_iv(iv: Interval) -> Interval {
    [iv[0].ln(), iv[1].ln()]
}

fn mu_raw_box(iv: Interval) -> Interval {
    [
        (2.0 * iv[0]).atanh().max(-RAW_MU_CAP),
        (2.0 * iv[1]).atanh().min(RAW_MU_CAP),
    ]
}

impl ParamSpace {
    pub fn new(q_r: usize, q_t: usize, bounds: HyperBounds, noise: NoiseMode) -> Self {
        Self { q_r, q_t, bounds, noise }
    }

    pub fn dim(&self) -> usize {
        1 + 5 * self.q_r + 5 * self.q_t + 4
    }

    pub fn layout(&self) -> Vec<ParamId> {
        param_layout(self.q_r, self.q_t)
    }

    /// Raw to native without clamping.
    pub fn native(&self, raw: &[f64]) -> HyperParams {
        assert_eq!(raw.len(), self.dim(), "raw vector length");
        let mut k = 1;
        let mut side = |n: usize| -> Vec<SmComponent> {
            (0..n)
                .map(|_| {
                    let c = SmComponent::new(
                        raw[k].exp(),
                        0.5 * raw[k + 1].tanh(),
                        0.5 * raw[k + 2].tanh(),
                        raw[k + 3].exp(),
                        raw[k + 4].exp(),
                    );
                    k += 5;
                    c
                })
                .collect()
        };
        let rx = side(self.q_r);
        let tx = side(self.q_t);
        let base = 1 + 5 * (self.q_r + self.q_t);
        HyperParams {
            amplitude: raw[0].exp(),
            sigma_r_sq: match self.noise {
                NoiseMode::Fixed(s) => s,
                NoiseMode::Learned => raw[base + 3].exp(),
            },
            icm: IcmParams {
                l00: raw[base].exp(),
                l10: raw[base + 1],
                l11: raw[base + 2].exp(),
            },
            rx,
            tx,
        }
    }

    /// Clamps native values into the box.
    pub fn clamp(&self, hp: &HyperParams) -> HyperParams {
        let b = &self.bounds;
        let side = |cs: &[SmComponent], sb: &SideBounds| -> Vec<SmComponent> {
            cs.iter()
                .map(|c| {
                    SmComponent::new(
                        clamp_iv(c.w, sb.weight),
                        clamp_iv(c.mu_y, sb.mu),
                        clamp_iv(c.mu_z, sb.mu),
                        clamp_iv(c.v_y, sb.variance),
                        clamp_iv(c.v_z, sb.variance),
                    )
                })
                .collect()
        };
        HyperParams {
            amplitude: clamp_iv(hp.amplitude, b.amplitude),
            sigma_r_sq: match self.noise {
                NoiseMode::Fixed(s) => s,
                NoiseMode::Learned => clamp_iv(hp.sigma_r_sq, b.noise),
            },
            icm: IcmParams {
                l00: clamp_iv(hp.icm.l00, b.l_diag),
                l10: clamp_iv(hp.icm.l10, b.l_cross),
                l11: clamp_iv(hp.icm.l11, b.l_diag),
            },
            rx: side(&hp.rx, &b.rx),
            tx: side(&hp.tx, &b.tx),
        }
    }

    pub fn forward(&self, raw: &[f64]) -> HyperParams {
        self.clamp(&self.native(raw))
    }

    pub fn inverse(&self, hp: &HyperParams) -> Vec<f64> {
        let mu = |m: f64| (2.0 * m).atanh().clamp(-RAW_MU_CAP, RAW_MU_CAP);
        let mut raw = vec![hp.amplitude.ln()];
        for c in hp.rx.iter().chain(hp.tx.iter()) {
            raw.extend([c.w.ln(), mu(c.mu_y), mu(c.mu_z), c.v_y.ln(), c.v_z.ln()]);
        }
        let noise = match self.noise {
            NoiseMode::Fixed(s) => s,
            NoiseMode::Learned => hp.sigma_r_sq,
        };
        raw.extend([hp.icm.l00.ln(), hp.icm.l10, hp.icm.l11.ln(), noise.ln()]);
        raw
    }

    /// Image of the native box in raw coordinates.
    pub fn raw_box(&self) -> (Vec<f64>, Vec<f64>) {
        let b = &self.bounds;
        let mut ivs = vec![log_iv(b.amplitude)];
        for (n, sb) in [(self.q_r, &b.rx), (self.q_t, &b.tx)] {
            for _ in 0..n {
                ivs.extend([
                    log_iv(sb.weight),
                    mu_raw_box(sb.mu),
                    mu_raw_box(sb.mu),
                    log_iv(sb.variance),
                    log_iv(sb.variance),
                ]);
            }
        }
        ivs.extend([log_iv(b.l_diag), b.l_cross, log_iv(b.l_diag)]);
        ivs.push(match self.noise {
            NoiseMode::Fixed(s) => [s.ln(), s.ln()],
            NoiseMode::Learned => log_iv(b.noise),
        });
        ivs.into_iter().map(|iv| (iv[0], iv[1])).unzip()
    }

    /// Zeroes gradient coordinates that cannot move: those clamped by the
    /// forward map and the noise coordinate when it is fixed.
    pub fn mask_gradient(&self, raw: &[f64], grad: &mut [f64]) {
        let (lo, hi) = self.raw_box();
        for i in 0..raw.len() {
            if raw[i] < lo[i] || raw[i] > hi[i] || lo[i] == hi[i] {
                grad[i] = 0.0;
            }
        }
    }
}

fn stacked_halves(z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let p = z.len() / 2;
    (z.rows(0, p).into_owned(), z.rows(p, p).into_owned())
}

fn check_obs(obs: &ObservationSet) -> Result<(), LearnError> {
    if obs.is_empty() || obs.z_icm.len() != 2 * obs.len() {
        return Err(LearnError::Shape("observation set must be nonempty with z_ICM of length 2P".into()));
    }
    Ok(())
}

fn dense_factor(hp: &HyperParams, obs: &ObservationSet, arrays: &ArrayPair) -> Result<SpdFactor, LearnError> {
    let base = assemble_gram(hp, &obs.grid, &obs.grid, arrays);
    let (_, c) = lift_icm(&base, &icm_b(&hp.icm), hp.sigma_r_sq);
    Ok(spd_factorize(&c, &DEFAULT_JITTER_LADDER)?)
}

/// `−½ zᵀC⁻¹z − ½ log det C − P log 2π` by dense Cholesky.
pub fn log_marginal_likelihood(hp: &HyperParams, obs: &ObservationSet, arrays: &ArrayPair) -> Result<f64, LearnError> {
    check_obs(obs)?;
    let f = dense_factor(hp, obs, arrays)?;
    let alpha = f.solve_vec(&obs.z_icm);
    Ok(-0.5 * obs.z_icm.dot(&alpha) - 0.5 * f.log_det() - obs.len() as f64 * (2.0 * PI).ln())
}

/// `½ tr[(ααᵀ − C⁻¹) ∂C/∂θ]` for every raw coordinate, by dense algebra.
pub fn lml_gradient(hp: &HyperParams, obs: &ObservationSet, arrays: &ArrayPair) -> Result<DVector<f64>, LearnError> {
    check_obs(obs)?;
    let f = dense_factor(hp, obs, arrays)?;
    let alpha = f.solve_vec(&obs.z_icm);
    let cinv = f.inverse();
    let derivs = gram_derivatives(hp, &obs.grid, arrays);
    Ok(DVector::from_iterator(
        derivs.len(),
        derivs.iter().map(|(_, d)| 0.5 * (alpha.dot(&(d * &alpha)) - cinv.dot(d))),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub lml: f64,
    pub grad: Option<DVector<f64>>,
    /// Absolute diagonal jitter added to `C_θ`.
    pub jitter: f64,
    /// Ladder rung that succeeded.
    pub rung: usize,
}

/// Repeated LML/gradient evaluation on a fixed training grid.
///
/// With `B = U diag(λ) Uᵀ` the covariance block-diagonalizes as
/// `(U ⊗ I)·diag(λ_k K + s I)·(U ⊗ I)ᵀ`, so only two `P×P` systems are
/// factorized, and gradients of base-kernel parameters are reduced to sums
/// over lattice lags.
#[derive(Debug, Clone)]
pub struct LikelihoodSurface<'a> {
    obs: &'a ObservationSet,
    arrays: ArrayPair,
    lags: PairLags,
    product: Option<ProductLayout>,
    ladder: Vec<f64>,
}

/// A grid `R × T` listed receive-fastest, with the side lag tables.
#[derive(Debug, Clone)]
struct ProductLayout {
    n_rows: usize,
    n_cols: usize,
    rx_slots: Vec<u32>,
    tx_slots: Vec<u32>,
}

impl ProductLayout {
    fn detect(grid: &[IndexPair], arrays: &ArrayPair) -> Option<Self> {
        let first = grid.first()?;
        let n_rows = grid.iter().take_while(|p| p.tx == first.tx).count();
        if !grid.len().is_multiple_of(n_rows) {
            return None;
        }
        let n_cols = grid.len() / n_rows;
        let rx: Vec<usize> = grid[..n_rows].iter().map(|p| p.rx).collect();
        let tx: Vec<usize> = (0..n_cols).map(|c| grid[c * n_rows].tx).collect();
        let distinct = |v: &[usize]| {
            let mut s = v.to_vec();
            s.sort_unstable();
            s.windows(2).all(|w| w[0] != w[1])
        };
        if !distinct(&rx) || !distinct(&tx) {
            return None;
        }
        if grid.iter().enumerate().any(|(k, p)| p.rx != rx[k % n_rows] || p.tx != tx[k / n_rows]) {
            return None;
        }
        let rows: Vec<IndexPair> = rx.iter().map(|&r| IndexPair::new(r, first.tx)).collect();
        let cols: Vec<IndexPair> = tx.iter().map(|&t| IndexPair::new(first.rx, t)).collect();
        Some(Self {
            n_rows,
            n_cols,
            rx_slots: PairLags::new(&rows, &rows, arrays).rx,
            tx_slots: PairLags::new(&cols, &cols, arrays).tx,
        })
    }
}

fn side_matrix(n: usize, slots: &[u32], table: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| table[slots[i + n * j] as usize])
}

/// `Σ_slot table[slot]·(Σ of m over pairs in slot)`.
fn slot_contract(m: &DMatrix<f64>, slots: &[u32], table: &[f64]) -> f64 {
    m.iter().zip(slots).map(|(v, &s)| v * table[s as usize]).sum()
}

impl<'a> LikelihoodSurface<'a> {
    pub fn new(obs: &'a ObservationSet, arrays: &ArrayPair) -> Result<Self, LearnError> {
        check_obs(obs)?;
        Ok(Self {
            obs,
            arrays: *arrays,
            lags: PairLags::new(&obs.grid, &obs.grid, arrays),
            product: ProductLayout::detect(&obs.grid, arrays),
            ladder: DEFAULT_JITTER_LADDER.to_vec(),
        })
    }

    /// Whether evaluations use the Kronecker factorization of a product grid.
    pub fn is_product_grid(&self) -> bool {
        self.product.is_some()
    }

    pub fn evaluate(&self, hp: &HyperParams, with_grad: bool) -> Result<Evaluation, LearnError> {
        match &self.product {
            Some(layout) => self.evaluate_product(layout, hp, with_grad),
            None => self.evaluate_dense(hp, with_grad),
        }
    }

    /// Exact evaluation on `R × T` grids through `K = A·(K_t ⊗ K_r)`: the
    /// eigenbases of `K_r`, `K_t` and `B` diagonalize every system.
    fn evaluate_product(&self, layout: &ProductLayout, hp: &HyperParams, with_grad: bool) -> Result<Evaluation, LearnError> {
        let (nr, nt) = (layout.n_rows, layout.n_cols);
        let p = nr * nt;
        let tr = SideTable::new(&hp.rx, self.arrays.rx, with_grad);
        let tt = SideTable::new(&hp.tx, self.arrays.tx, with_grad);
        let kr = side_matrix(nr, &layout.rx_slots, &tr.values);
        let kt = side_matrix(nt, &layout.tx_slots, &tt.values);
        let er_eig = kr.clone().symmetric_eigen();
        let et_eig = kt.clone().symmetric_eigen();
        let (ur, er) = (&er_eig.eigenvectors, &er_eig.eigenvalues);
        let (ut, et) = (&et_eig.eigenvectors, &et_eig.eigenvalues);
        let b = icm_b(&hp.icm);
        let eig = b.symmetric_eigen();
        let lam = [eig.eigenvalues[0].max(0.0), eig.eigenvalues[1].max(0.0)];
        let u = eig.eigenvectors;
        let amp = hp.amplitude;

        let sigma = hp.sigma_r_sq;
        let mean_diag = amp * kr.trace() / nr as f64 * kt.trace() / nt as f64;
        let mut scale = 0.5 * (b[(0, 0)] + b[(1, 1)]) * mean_diag + sigma;
        if !(scale > 0.0 && scale.is_finite()) {
            scale = 1.0;
        }
        // spectra d_k[a, b] = λ_k·A·er[a]·et[b] + s
        let spectrum = |l: f64, s: f64| DMatrix::from_fn(nr, nt, |a, c| l * amp * er[a] * et[c] + s);
        let mut found = None;
        let mut last = 0.0;
        for (rung, &rel) in self.ladder.iter().enumerate() {
            let s = sigma + rel * scale;
            last = rel * scale;
            let d: Vec<DMatrix<f64>> = lam.iter().map(|&l| spectrum(l, s)).collect();
            let tiny = f64::EPSILON * scale * p as f64;
            if d.iter().all(|m| m.iter().all(|&v| v > tiny && v.is_finite())) {
                found = Some((rung, rel * scale, d));
                break;
            }
        }
        let Some((rung, jitter, d)) = found else {
            let min = lam
                .iter()
                .flat_map(|&l| spectrum(l, sigma + last).iter().copied().collect::<Vec<_>>())
                .fold(f64::INFINITY, f64::min);
            return Err(LearnError::IllConditioned {
                min_eigenvalue: min,
                max_jitter: last,
            });
        };

        let (z_re, z_im) = stacked_halves(&self.obs.z_icm);
        let z_re = DMatrix::from_column_slice(nr, nt, z_re.as_slice());
        let z_im = DMatrix::from_column_slice(nr, nt, z_im.as_slice());
        let mut quad = 0.0;
        let mut log_det = 0.0;
        let mut alpha_rot = Vec::with_capacity(2);
        for j in 0..2 {
            let zt = &z_re * u[(0, j)] + &z_im * u[(1, j)];
            let zh = ur.transpose() * zt * ut;
            let ah = zh.component_div(&d[j]);
            quad += zh.dot(&ah);
            log_det += d[j].iter().map(|v| v.ln()).sum::<f64>();
            alpha_rot.push(ur * ah * ut.transpose());
        }
        let lml = -0.5 * quad - 0.5 * log_det - p as f64 * (2.0 * PI).ln();
        if !lml.is_finite() {
            return Err(LearnError::IllConditioned {
                min_eigenvalue: f64::NAN,
                max_jitter: jitter,
            });
        }
        if !with_grad {
            return Ok(Evaluation {
                lml,
                grad: None,
                jitter,
                rung,
            });
        }

        let a_re = &alpha_rot[0] * u[(0, 0)] + &alpha_rot[1] * u[(0, 1)];
        let a_im = &alpha_rot[0] * u[(1, 0)] + &alpha_rot[1] * u[(1, 1)];
        let (b00, b01, b11) = (b[(0, 0)], b[(0, 1)], b[(1, 1)]);
        let pairs = [(b00, &a_re, &a_re), (b11, &a_im, &a_im), (b01, &a_re, &a_im), (b01, &a_im, &a_re)];

        // inverse spectra weighted by λ_k, and the per-axis traces of G_k
        let g: Vec<DMatrix<f64>> = d.iter().map(|m| m.map(|v| 1.0 / v)).collect();
        let lg = &g[0] * lam[0] + &g[1] * lam[1];
        let wr = DVector::from_fn(nr, |a, _| amp * (0..nt).map(|c| lg[(a, c)] * et[c]).sum::<f64>());
        let wt = DVector::from_fn(nt, |c, _| amp * (0..nr).map(|a| lg[(a, c)] * er[a]).sum::<f64>());

        let mut m_r = -(ur * DMatrix::from_diagonal(&wr) * ur.transpose());
        let mut m_t = -(ut * DMatrix::from_diagonal(&wt) * ut.transpose());
        for (coef, x, y) in pairs {
            if coef == 0.0 {
                continue;
            }
            m_r += (x * &kt * y.transpose()) * (amp * coef);
            m_t += (y.transpose() * &kr * x) * (amp * coef);
        }

        let dim = 1 + 5 * (hp.q_r() + hp.q_t()) + 4;
        let mut grad = DVector::zeros(dim);
        grad[0] = 0.5 * m_r.dot(&kr);
        let mut pos = 1;
        for d in tr.derivs.iter().take(5 * hp.q_r()) {
            grad[pos] = 0.5 * slot_contract(&m_r, &layout.rx_slots, d);
            pos += 1;
        }
        for d in tt.derivs.iter().take(5 * hp.q_t()) {
            grad[pos] = 0.5 * slot_contract(&m_t, &layout.tx_slots, d);
            pos += 1;
        }

        let quad_k = |x: &DMatrix<f64>, y: &DMatrix<f64>| amp * x.dot(&(&kr * y * &kt));
        let gk: Vec<f64> = g
            .iter()
            .map(|gm| amp * (0..nr).flat_map(|a| (0..nt).map(move |c| (a, c))).map(|(a, c)| gm[(a, c)] * er[a] * et[c]).sum::<f64>())
            .collect();
        let trace_part = |a: usize, c: usize| (0..2).map(|j| u[(a, j)] * u[(c, j)] * gk[j]).sum::<f64>();
        let t00 = quad_k(&a_re, &a_re) - trace_part(0, 0);
        let t01 = quad_k(&a_re, &a_im) - trace_part(0, 1);
        let t11 = quad_k(&a_im, &a_im) - trace_part(1, 1);
        for (slot, db) in icm_b_derivatives(&hp.icm).iter().enumerate() {
            grad[pos + slot] = 0.5 * (db[(0, 0)] * t00 + 2.0 * db[(0, 1)] * t01 + db[(1, 1)] * t11);
        }
        let tr_g: f64 = g.iter().map(|m| m.sum()).sum();
        grad[pos + 3] = 0.5 * sigma * (a_re.norm_squared() + a_im.norm_squared() - tr_g);

        Ok(Evaluation {
            lml,
            grad: Some(grad),
            jitter,
            rung,
        })
    }

    /// Evaluation through the dense `P×P` kernel; valid on any grid.
    pub fn evaluate_dense(&self, hp: &HyperParams, with_grad: bool) -> Result<Evaluation, LearnError> {
        let p = self.obs.len();
        let tr = SideTable::new(&hp.rx, self.arrays.rx, with_grad);
        let tt = SideTable::new(&hp.tx, self.arrays.tx, with_grad);
        let k = gram_from_tables(hp.amplitude, &self.lags, &tr, &tt, true);
        let b = icm_b(&hp.icm);
        let eig = b.symmetric_eigen();
        let lam = [eig.eigenvalues[0].max(0.0), eig.eigenvalues[1].max(0.0)];
        let u = eig.eigenvectors;

        let sigma = hp.sigma_r_sq;
        let mut scale = 0.5 * (b[(0, 0)] + b[(1, 1)]) * k.trace() / p as f64 + sigma;
        if !(scale > 0.0 && scale.is_finite()) {
            scale = 1.0;
        }
        let mut found = None;
        let mut last = 0.0;
        for (rung, &rel) in self.ladder.iter().enumerate() {
            let s = sigma + rel * scale;
            last = rel * scale;
            let facs: Option<Vec<SpdFactor>> = lam
                .iter()
                .map(|&l| {
                    let mut m = &k * l;
                    for i in 0..p {
                        m[(i, i)] += s;
                    }
                    factorize_with(&m, 0.0)
                })
                .collect();
            if let Some(f) = facs {
                found = Some((rung, rel * scale, f));
                break;
            }
        }
        let Some((rung, jitter, facs)) = found else {
            let (_, c) = lift_icm(&k, &b, sigma);
            return Err(LearnError::IllConditioned {
                min_eigenvalue: crate::linalg::sym_min_eigenvalue(&c),
                max_jitter: last,
            });
        };

        let (z_re, z_im) = stacked_halves(&self.obs.z_icm);
        let zt: Vec<DVector<f64>> = (0..2).map(|j| &z_re * u[(0, j)] + &z_im * u[(1, j)]).collect();
        let at: Vec<DVector<f64>> = (0..2).map(|j| facs[j].solve_vec(&zt[j])).collect();
        let quad = zt[0].dot(&at[0]) + zt[1].dot(&at[1]);
        let log_det = facs[0].log_det() + facs[1].log_det();
        let lml = -0.5 * quad - 0.5 * log_det - p as f64 * (2.0 * PI).ln();
        if !lml.is_finite() {
            return Err(LearnError::IllConditioned {
                min_eigenvalue: f64::NAN,
                max_jitter: jitter,
            });
        }
        if !with_grad {
            return Ok(Evaluation {
                lml,
                grad: None,
                jitter,
                rung,
            });
        }

        let a_re = &at[0] * u[(0, 0)] + &at[1] * u[(0, 1)];
        let a_im = &at[0] * u[(1, 0)] + &at[1] * u[(1, 1)];
        let g: Vec<DMatrix<f64>> = facs.iter().map(|f| f.inverse()).collect();
        let (b00, b01, b11) = (b[(0, 0)], b[(0, 1)], b[(1, 1)]);

        let n_r_slots = self.arrays.rx.lag_count();
        let n_t_slots = self.arrays.tx.lag_count();
        let mut s_r = vec![0.0; n_r_slots];
        let mut s_t = vec![0.0; n_t_slots];
        let (mut mk, mut g0k, mut g1k) = (0.0, 0.0, 0.0);
        {
            let (ks, g0, g1) = (k.as_slice(), g[0].as_slice(), g[1].as_slice());
            let amp = hp.amplitude;
            for j in 0..p {
                let (rj, ij) = (a_re[j], a_im[j]);
                for i in 0..p {
                    let idx = i + p * j;
                    let m = b00 * a_re[i] * rj + b11 * a_im[i] * ij + b01 * (a_re[i] * ij + a_im[i] * rj)
                        - lam[0] * g0[idx]
                        - lam[1] * g1[idx];
                    let (sr, st) = (self.lags.rx[idx] as usize, self.lags.tx[idx] as usize);
                    s_r[sr] += m * amp * tt.values[st];
                    s_t[st] += m * amp * tr.values[sr];
                    mk += m * ks[idx];
                    g0k += g0[idx] * ks[idx];
                    g1k += g1[idx] * ks[idx];
                }
            }
        }

        let dim = 1 + 5 * (hp.q_r() + hp.q_t()) + 4;
        let mut grad = DVector::zeros(dim);
        grad[0] = 0.5 * mk;
        let mut pos = 1;
        for (table, sums, q) in [(&tr, &s_r, hp.q_r()), (&tt, &s_t, hp.q_t())] {
            for d in table.derivs.iter().take(5 * q) {
                grad[pos] = 0.5 * d.iter().zip(sums.iter()).map(|(x, y)| x * y).sum::<f64>();
                pos += 1;
            }
        }
        let ka_re = &k * &a_re;
        let ka_im = &k * &a_im;
        let gk = [g0k, g1k];
        let trace_part = |a: usize, c: usize| (0..2).map(|j| u[(a, j)] * u[(c, j)] * gk[j]).sum::<f64>();
        let t00 = a_re.dot(&ka_re) - trace_part(0, 0);
        let t01 = a_re.dot(&ka_im) - trace_part(0, 1);
        let t11 = a_im.dot(&ka_im) - trace_part(1, 1);
        for (slot, db) in icm_b_derivatives(&hp.icm).iter().enumerate() {
            grad[pos + slot] = 0.5 * (db[(0, 0)] * t00 + 2.0 * db[(0, 1)] * t01 + db[(1, 1)] * t11);
        }
        let tr_g = g[0].trace() + g[1].trace();
        grad[pos + 3] = 0.5 * sigma * (a_re.norm_squared() + a_im.norm_squared() - tr_g);

        Ok(Evaluation {
            lml,
            grad: Some(grad),
            jitter,
            rung,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnConfig {
    pub restarts: usize,
    pub max_iters: usize,
    pub f_tol: f64,
    pub g_tol: f64,
    pub memory: usize,
    pub q_r: usize,
    pub q_t: usize,
    pub learn_noise: bool,
    /// Spectral variance of every component at the variance-matched start.
    pub init_variance: f64,
    pub init_frequencies: FrequencyInit,
    pub bounds: HyperBounds,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            restarts: 4,
            max_iters: 200,
            f_tol: 1e-6,
            g_tol: 1e-5,
            memory: 10,
            q_r: 3,
            q_t: 3,
            learn_noise: false,
            init_variance: 0.01,
            init_frequencies: FrequencyInit::default(),
            bounds: HyperBounds::default(),
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        if self.restarts == 0 {
            return Err(LearnError::Config("restarts must be at least 1".into()));
        }
        if self.q_r == 0 || self.q_t == 0 {
            return Err(LearnError::Config("each side needs at least one mixture component".into()));
        }
        if !(self.f_tol >= 0.0 && self.g_tol >= 0.0) {
            return Err(LearnError::Config("tolerances must be non-negative".into()));
        }
        self.bounds.validate().map_err(LearnError::Config)
    }

    pub fn space(&self, obs: &ObservationSet) -> ParamSpace {
        let noise = if self.learn_noise {
            NoiseMode::Learned
        } else {
            NoiseMode::Fixed(obs.sigma_r_sq)
        };
        ParamSpace::new(self.q_r, self.q_t, self.bounds.clone(), noise)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterEvent {
    pub restart: usize,
    pub evaluation: usize,
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerReport {
    pub best_theta: HyperParams,
    pub best_lml: f64,
    pub best_restart: usize,
    pub restarts_run: usize,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    /// Final LML per restart; `None` when the start point failed.
    pub restart_lml: Vec<Option<f64>>,
    /// Projected-gradient ∞-norm at the returned point.
    pub gradient_norm_final: f64,
    pub escalations: Vec<JitterEvent>,
    /// Accepted-iterate LML sequence per restart.
    #[serde(skip)]
    pub traces: Vec<Vec<f64>>,
}

fn sample_variance(z: &DVector<f64>) -> f64 {
    let n = z.len() as f64;
    let mean = z.sum() / n;
    z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)
}

fn noise_start(space: &ParamSpace, obs: &ObservationSet) -> f64 {
    match space.noise {
        NoiseMode::Fixed(s) => s,
        NoiseMode::Learned => clamp_iv(obs.sigma_r_sq, space.bounds.noise),
    }
}

fn matched_amplitude(obs: &ObservationSet, rx: &[SmComponent], tx: &[SmComponent], icm: &IcmParams) -> f64 {
    let b = icm_b(icm);
    let scale = crate::kernel::weight_sum(rx) * crate::kernel::weight_sum(tx) * b.trace() / 2.0;
    sample_variance(&obs.z_icm) / scale
}

/// Where the variance-matched start places its spectral means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyInit {
    /// Evenly spread over `[0, ½)` along `y`.
    #[default]
    Grid,
    /// Strongest peaks of the per-array periodograms of the observations.
    Periodogram,
}

/// Oversampling of the periodogram frequency grid per lattice axis.
const PERIODOGRAM_OVERSAMPLING: usize = 4;

/// Up to `q` strongest local maxima `(μ_y, μ_z, power)` of one side's
/// periodogram, summed incoherently over the other side's antennas. Peaks
/// that mirror an already chosen one are skipped, since the cosine kernel
/// cannot tell `μ` from `−μ`.
pub fn periodogram_peaks(obs: &ObservationSet, arrays: &ArrayPair, receive: bool, q: usize) -> Vec<(f64, f64, f64)> {
    let geom = if receive { arrays.rx } else { arrays.tx };
    let (ny, nz) = (PERIODOGRAM_OVERSAMPLING * geom.n_y, PERIODOGRAM_OVERSAMPLING * geom.n_z);
    let mut groups: std::collections::BTreeMap<usize, Vec<(crate::lattice::LatticeCoord, C64)>> = Default::default();
    for (p, &z) in obs.grid.iter().zip(obs.z.iter()) {
        let (own, other) = if receive { (p.rx, p.tx) } else { (p.tx, p.rx) };
        groups.entry(other).or_default().push((crate::lattice::coords_unchecked(own, geom), z));
    }
    let freq = |k: usize, n: usize| {
        let f = k as f64 / n as f64;
        if f >= 0.5 {
            f - 1.0
        } else {
            f
        }
    };
    let mut power = vec![0.0; ny * nz];
    for a in 0..ny {
        for b in 0..nz {
            let (fy, fz) = (freq(a, ny), freq(b, nz));
            power[a + ny * b] = groups
                .values()
                .map(|g| {
                    g.iter()
                        .map(|(c, z)| z * C64::from_polar(1.0, -2.0 * PI * (fy * c.y as f64 + fz * c.z as f64)))
                        .sum::<C64>()
                        .norm_sqr()
                })
                .sum();
        }
    }
    let at = |a: isize, b: isize| power[a.rem_euclid(ny as isize) as usize + ny * b.rem_euclid(nz as isize) as usize];
    let mut peaks: Vec<(usize, usize, f64)> = Vec::new();
    for a in 0..ny as isize {
        for b in 0..nz as isize {
            let v = at(a, b);
            let is_max = (-1..=1).all(|da| (-1..=1).all(|db| (da == 0 && db == 0) || at(a + da, b + db) < v || (at(a + da, b + db) == v && (a + da, b + db) > (a, b))));
            if is_max && v > 0.0 {
                peaks.push((a as usize, b as usize, v));
            }
        }
    }
    peaks.sort_by(|x, y| y.2.total_cmp(&x.2).then((x.0, x.1).cmp(&(y.0, y.1))));
    let mut chosen: Vec<(usize, usize, f64)> = Vec::new();
    for (a, b, v) in peaks {
        let mirror = ((ny - a) % ny, (nz - b) % nz);
        let near = |c: &(usize, usize, f64)| {
            let d = |x: usize, y: usize, n: usize| (x + n - y) % n <= 1 || (y + n - x) % n <= 1;
            d(c.0, mirror.0, ny) && d(c.1, mirror.1, nz)
        };
        if chosen.iter().any(near) {
            continue;
        }
        chosen.push((a, b, v));
        if chosen.len() == q {
            break;
        }
    }
    chosen.into_iter().map(|(a, b, v)| (freq(a, ny), freq(b, nz), v)).collect()
}

/// `A·Σw_r·Σw_t·tr(B)/2` matched to the sample variance of `z_ICM` and
/// `B = I`. Spectral means follow `freq`; periodogram starts weight each
/// component by its peak power.
pub fn variance_matched_init(
    space: &ParamSpace,
    obs: &ObservationSet,
    arrays: &ArrayPair,
    init_variance: f64,
    freq: FrequencyInit,
) -> HyperParams {
    let grid = |q: usize| -> Vec<SmComponent> {
        (0..q)
            .map(|i| SmComponent::new(1.0 / q as f64, (i as f64 + 0.5) / (2.0 * q as f64), 0.0, init_variance, init_variance))
            .collect()
    };
    let side = |q: usize, receive: bool| -> Vec<SmComponent> {
        let mut comps = grid(q);
        if freq == FrequencyInit::Periodogram {
            let peaks = periodogram_peaks(obs, arrays, receive, q);
            let total: f64 = peaks.iter().map(|p| p.2).sum();
            for (c, &(my, mz, pw)) in comps.iter_mut().zip(&peaks) {
                *c = SmComponent::new(pw / total, my, mz, init_variance, init_variance);
            }
        }
        comps
    };
    let (rx, tx) = (side(space.q_r, true), side(space.q_t, false));
    let icm = IcmParams::identity();
    let hp = HyperParams {
        amplitude: matched_amplitude(obs, &rx, &tx, &icm),
        sigma_r_sq: noise_start(space, obs),
        icm,
        rx,
        tx,
    };
    space.clamp(&hp)
}

/// A random start inside a central part of the box, with `A` variance-matched.
pub fn random_init(space: &ParamSpace, obs: &ObservationSet, rng: &mut RngStream) -> HyperParams {
    let log_uniform = |iv: Interval, rng: &mut RngStream| rng.uniform_in(iv[0].ln(), iv[1].ln()).exp();
    let side = |q: usize, sb: &SideBounds, rng: &mut RngStream| -> Vec<SmComponent> {
        (0..q)
            .map(|_| {
                let w = log_uniform([sb.weight[0].max(0.1), sb.weight[1].min(1.0).max(sb.weight[0].max(0.1))], rng);
                let mu_y = rng.uniform_in(sb.mu[0], sb.mu[1]);
                let mu_z = rng.uniform_in(sb.mu[0], sb.mu[1]);
                let v_y = log_uniform(sb.variance, rng);
                let v_z = log_uniform(sb.variance, rng);
                SmComponent::new(w, mu_y, mu_z, v_y, v_z)
            })
            .collect()
    };
    let rx = side(space.q_r, &space.bounds.rx, rng);
    let tx = side(space.q_t, &space.bounds.tx, rng);
    let icm = IcmParams {
        l00: rng.uniform_in(0.3f64.ln(), 3.0f64.ln()).exp(),
        l10: rng.uniform_in(-0.5, 0.5),
        l11: rng.uniform_in(0.3f64.ln(), 3.0f64.ln()).exp(),
    };
    let hp = HyperParams {
        amplitude: matched_amplitude(obs, &rx, &tx, &icm),
        sigma_r_sq: noise_start(space, obs),
        icm,
        rx,
        tx,
    };
    space.clamp(&hp)
}

struct RestartOutcome {
    x: Vec<f64>,
    hp: HyperParams,
    lml: f64,
    iterations: usize,
    converged: bool,
    pg_norm: f64,
    trace: Vec<f64>,
}

/// Multi-start projected L-BFGS ascent of the log marginal likelihood.
/// Restart 0 starts from [`variance_matched_init`]; the others from
/// [`random_init`] with streams split off `seed`.
pub fn optimize(obs: &ObservationSet, arrays: &ArrayPair, cfg: &LearnConfig, seed: u64) -> Result<OptimizerReport, LearnError> {
    cfg.validate()?;
    let space = cfg.space(obs);
    let root = RngStream::new(seed);
    let starts: Vec<HyperParams> = (0..cfg.restarts)
        .map(|restart| {
            if restart == 0 {
                variance_matched_init(&space, obs, arrays, cfg.init_variance, cfg.init_frequencies)
            } else {
                random_init(&space, obs, &mut root.split(restart as u64))
            }
        })
        .collect();
    optimize_from(obs, arrays, cfg, &starts)
}

/// Runs one ascent per start point (clamped into the box) and keeps the best.
pub fn optimize_from(
    obs: &ObservationSet,
    arrays: &ArrayPair,
    cfg: &LearnConfig,
    starts: &[HyperParams],
) -> Result<OptimizerReport, LearnError> {
    cfg.validate()?;
    if starts.is_empty() {
        return Err(LearnError::Config("at least one start point is required".into()));
    }
    if starts.iter().any(|h| h.rx.len() != cfg.q_r || h.tx.len() != cfg.q_t) {
        return Err(LearnError::Shape("start point mixture sizes differ from the configuration".into()));
    }
    let surface = LikelihoodSurface::new(obs, arrays)?;
    let space = cfg.space(obs);
    let (lo, hi) = space.raw_box();
    let opts = LbfgsOptions {
        memory: cfg.memory,
        max_iters: cfg.max_iters,
        f_tol: cfg.f_tol,
        g_tol: cfg.g_tol,
        ..Default::default()
    };
    let mut escalations = Vec::new();
    let mut outcomes: Vec<Option<RestartOutcome>> = Vec::with_capacity(starts.len());

    for (restart, start) in starts.iter().enumerate() {
        let init = space.clamp(start);
        let x0 = space.inverse(&init);
        let mut evaluations = 0usize;
        let objective = |x: &[f64]| -> Option<(f64, Vec<f64>)> {
            evaluations += 1;
            let hp = space.forward(x);
            let ev = surface.evaluate(&hp, true).ok()?;
            if ev.rung > 0 {
                escalations.push(JitterEvent {
                    restart,
                    evaluation: evaluations,
                    jitter: ev.jitter,
                });
            }
            let mut g: Vec<f64> = ev.grad.unwrap().iter().map(|v| -v).collect();
            space.mask_gradient(x, &mut g);
            Some((-ev.lml, g))
        };
        let outcome = minimize(objective, &x0, &lo, &hi, &opts).map(|r| {
            let mut x0p = x0.clone();
            for i in 0..x0p.len() {
                x0p[i] = x0p[i].clamp(lo[i], hi[i]);
            }
            let hp = if r.x == x0p { init.clone() } else { space.forward(&r.x) };
            RestartOutcome {
                hp,
                lml: -r.f,
                iterations: r.iterations,
                converged: r.converged,
                pg_norm: projected_gradient_norm(&r.x, &r.grad, &lo, &hi),
                trace: r.trace.iter().map(|f| -f).collect(),
                x: r.x,
            }
        });
        outcomes.push(outcome);
    }

    let mut best: Option<usize> = None;
    for (i, o) in outcomes.iter().enumerate() {
        let Some(o) = o else { continue };
        best = match best {
            None => Some(i),
            Some(j) => {
                let b = outcomes[j].as_ref().unwrap();
                let tol = 1e-9 * (1.0 + b.lml.abs());
                let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
                if o.lml > b.lml + tol || ((o.lml - b.lml).abs() <= tol && norm(&o.x) < norm(&b.x)) {
                    Some(i)
                } else {
                    Some(j)
                }
            }
        };
    }
    let Some(bi) = best else {
        return Err(LearnError::Unlearnable { restarts: starts.len() });
    };
    let b = outcomes[bi].as_ref().unwrap();
    Ok(OptimizerReport {
        best_theta: b.hp.clone(),
        best_lml: b.lml,
        best_restart: bi,
        restarts_run: starts.len(),
        iterations: outcomes.iter().map(|o| o.as_ref().map_or(0, |o| o.iterations)).collect(),
        converged: outcomes.iter().map(|o| o.as_ref().is_some_and(|o| o.converged)).collect(),
        restart_lml: outcomes.iter().map(|o| o.as_ref().map(|o| o.lml)).collect(),
        gradient_norm_final: b.pg_norm,
        escalations,
        traces: outcomes.iter().map(|o| o.as_ref().map_or_else(Vec::new, |o| o.trace.clone())).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
}

/// Compares `analytic` against a fourth-order central difference of the
/// dense log marginal likelihood along every raw coordinate.
///
/// The relative error is `|a − n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn gradient_check<F>(
    space: &ParamSpace,
    raw: &[f64],
    obs: &ObservationSet,
    arrays: &ArrayPair,
    step: f64,
    analytic: F,
) -> Result<GradCheckReport, LearnError>
where
    F: Fn(&HyperParams) -> Result<DVector<f64>, LearnError>,
{
    let hp = space.native(raw);
    let mut a = analytic(&hp)?;
    if a.len() != space.dim() {
        return Err(LearnError::Shape(format!("gradient of length {} for {} coordinates", a.len(), space.dim())));
    }
    space.mask_gradient(raw, a.as_mut_slice());
    let lml_at = |k: usize, d: f64| -> Result<f64, LearnError> {
        let mut r = raw.to_vec();
        r[k] += d;
        log_marginal_likelihood(&space.native(&r), obs, arrays)
    };
    let mut entries = Vec::with_capacity(a.len());
    for (k, id) in space.layout().iter().enumerate() {
        let numeric =
            (-lml_at(k, 2.0 * step)? + 8.0 * lml_at(k, step)? - 8.0 * lml_at(k, -step)? + lml_at(k, -2.0 * step)?) / (12.0 * step);
        let analytic = a[k];
        let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        entries.push(GradCheckEntry {
            name: id.name(),
            analytic,
            numeric,
            rel_err,
        });
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { entries, max_rel_err })
}

/// Uniform draw well inside the default box, as used by gradient checks.
pub fn random_interior_hp(q_r: usize, q_t: usize, bounds: &HyperBounds, rng: &mut RngStream) -> HyperParams {
    let inner = |iv: Interval, rng: &mut RngStream, log: bool| {
        if log {
            let (a, b) = (iv[0].ln(), iv[1].ln());
            rng.uniform_in(a + 0.1 * (b - a), b - 0.1 * (b - a)).exp()
        } else {
            rng.uniform_in(iv[0] + 0.1 * (iv[1] - iv[0]), iv[1] - 0.1 * (iv[1] - iv[0]))
        }
    };
    let side = |q: usize, sb: &SideBounds, rng: &mut RngStream| -> Vec<SmComponent> {
        (0..q)
            .map(|_| {
                SmComponent::new(
                    inner([sb.weight[0].max(0.05), sb.weight[1].min(2.0)], rng, true),
                    inner(sb.mu, rng, false),
                    inner(sb.mu, rng, false),
                    inner(sb.variance, rng, true),
                    inner(sb.variance, rng, true),
                )
            })
            .collect()
    };
    HyperParams {
        amplitude: inner([bounds.amplitude[0].max(0.1), bounds.amplitude[1].min(10.0)], rng, true),
        sigma_r_sq: inner([bounds.noise[0].max(0.05), bounds.noise[1].min(2.0)], rng, true),
        icm: IcmParams {
            l00: inner([bounds.l_diag[0].max(0.2), bounds.l_diag[1].min(3.0)], rng, true),
            l10: inner([bounds.l_cross[0].max(-1.0), bounds.l_cross[1].min(1.0)], rng, false),
            l11: inner([bounds.l_diag[0].max(0.2), bounds.l_diag[1].min(3.0)], rng, true),
        },
        rx: side(q_r, &bounds.rx, rng),
        tx: side(q_t, &bounds.tx, rng),
    }
}
