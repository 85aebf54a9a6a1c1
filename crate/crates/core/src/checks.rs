//! Property suites shared by the command-line checks and the acceptance run:
//! gradient finite differences, kernel PSD/stationarity, and hyperparameter
//! recovery on data drawn from the model itself.

use crate::kernel::{assemble_gram, base_eval, icm_b, lift_icm, ArrayPair, HyperBounds, HyperParams, Interval, SmComponent};
use crate::lattice::{coords_unchecked, equispaced_subset, index_of, training_grid, IndexPair, LatticeCoord, UraGeometry};
use crate::learn::{
    gradient_check, log_marginal_likelihood, optimize, random_interior_hp, LearnConfig, LearnError, LikelihoodSurface, NoiseMode,
    ParamSpace,
};
use crate::linalg::{spd_factorize, sym_min_eigenvalue, RngStream, C64, DEFAULT_JITTER_LADDER};
use crate::pilot::ObservationSet;
use nalgebra::DVector;
use serde::Serialize;

/// Draws `z_ICM ~ N(0, C_θ)` on `grid`.
pub fn sample_observations(
    hp: &HyperParams,
    grid: Vec<IndexPair>,
    arrays: &ArrayPair,
    rng: &mut RngStream,
) -> Result<ObservationSet, LearnError> {
    let base = assemble_gram(hp, &grid, &grid, arrays);
    let (_, c) = lift_icm(&base, &icm_b(&hp.icm), hp.sigma_r_sq);
    let l = spd_factorize(&c, &DEFAULT_JITTER_LADDER)?;
    let z_icm = l.factor() * DVector::from_fn(c.nrows(), |_, _| rng.normal());
    let p = grid.len();
    let z = DVector::from_fn(p, |k, _| C64::new(z_icm[k], z_icm[p + k]));
    ObservationSet::from_parts(grid, z, 2.0 * hp.sigma_r_sq).map_err(|e| LearnError::Shape(e.to_string()))
}

fn arrays44() -> ArrayPair {
    ArrayPair::new(UraGeometry::square(4), UraGeometry::square(4))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckSummary {
    pub points: usize,
    pub coordinates: usize,
    pub worst_rel_err: f64,
    pub worst_point: Option<usize>,
    pub worst_coordinate: Option<String>,
    pub violations: usize,
    pub tolerance: f64,
}

impl GradCheckSummary {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Analytic gradients of the learning surface against fourth-order central
/// differences of the dense LML on a 16-receive × 4-transmit grid, with the
/// noise level learned so every coordinate is exercised.
pub fn run_gradcheck(points: usize, seed: u64, step: f64, tolerance: f64) -> Result<GradCheckSummary, LearnError> {
    gradcheck_with(points, seed, step, tolerance, |_, _| {})
}

fn gradcheck_with(
    points: usize,
    seed: u64,
    step: f64,
    tolerance: f64,
    tamper: impl Fn(&ParamSpace, &mut DVector<f64>),
) -> Result<GradCheckSummary, LearnError> {
    let arrays = arrays44();
    let grid = training_grid(16, &equispaced_subset(16, 4).expect("valid budget"));
    let bounds = HyperBounds::default();
    let space = ParamSpace::new(3, 3, bounds.clone(), NoiseMode::Learned);
    let root = RngStream::new(seed);
    let mut out = GradCheckSummary {
        points,
        coordinates: space.dim(),
        worst_rel_err: 0.0,
        worst_point: None,
        worst_coordinate: None,
        violations: 0,
        tolerance,
    };
    for i in 0..points {
        let mut rng = root.split(i as u64);
        let truth = random_interior_hp(3, 3, &bounds, &mut rng);
        let obs = sample_observations(&truth, grid.clone(), &arrays, &mut rng)?;
        let at = random_interior_hp(3, 3, &bounds, &mut rng);
        let surface = LikelihoodSurface::new(&obs, &arrays)?;
        let raw = space.inverse(&at);
        let report = gradient_check(&space, &raw, &obs, &arrays, step, |hp| {
            let mut g = surface.evaluate(hp, true)?.grad.expect("gradient requested");
            tamper(&space, &mut g);
            Ok(g)
        })?;
        for e in &report.entries {
            if e.rel_err >= tolerance || !e.rel_err.is_finite() {
                out.violations += 1;
            }
            if e.rel_err > out.worst_rel_err || !e.rel_err.is_finite() {
                out.worst_rel_err = e.rel_err;
                out.worst_point = Some(i);
                out.worst_coordinate = Some(e.name.clone());
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PsdCheckSummary {
    pub draws: usize,
    /// Most negative `min eig / trace` seen over base and lifted Grams.
    pub worst_eig_ratio: f64,
    pub worst_shift_err: f64,
    pub shift_pairs: usize,
    pub violations: usize,
}

impl PsdCheckSummary {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Anywhere in the box: positive parameters log-uniform, the rest uniform.
pub fn random_box_hp(q_r: usize, q_t: usize, bounds: &HyperBounds, rng: &mut RngStream) -> HyperParams {
    let log_u = |iv: Interval, rng: &mut RngStream| rng.uniform_in(iv[0].ln(), iv[1].ln()).exp();
    let side = |q: usize, sb: &crate::kernel::SideBounds, rng: &mut RngStream| -> Vec<SmComponent> {
        (0..q)
            .map(|_| {
                SmComponent::new(
                    log_u(sb.weight, rng),
                    rng.uniform_in(sb.mu[0], sb.mu[1]),
                    rng.uniform_in(sb.mu[0], sb.mu[1]),
                    log_u(sb.variance, rng),
                    log_u(sb.variance, rng),
                )
            })
            .collect()
    };
    HyperParams {
        amplitude: log_u(bounds.amplitude, rng),
        sigma_r_sq: log_u(bounds.noise, rng),
        icm: crate::kernel::IcmParams {
            l00: log_u(bounds.l_diag, rng),
            l10: rng.uniform_in(bounds.l_cross[0], bounds.l_cross[1]),
            l11: log_u(bounds.l_diag, rng),
        },
        rx: side(q_r, &bounds.rx, rng),
        tx: side(q_t, &bounds.tx, rng),
    }
}

/// Kernel PSD on random grids of up to `max_points` entries and invariance
/// of the base kernel under common lattice shifts.
pub fn run_psd_check(draws: usize, max_points: usize, seed: u64) -> PsdCheckSummary {
    let arrays = arrays44();
    let bounds = HyperBounds::default();
    let root = RngStream::new(seed);
    let mut out = PsdCheckSummary {
        draws,
        worst_eig_ratio: 0.0,
        worst_shift_err: 0.0,
        shift_pairs: 0,
        violations: 0,
    };
    let pick = |rng: &mut RngStream, n: usize| 1 + ((rng.uniform() * n as f64) as usize).min(n - 1);
    for i in 0..draws {
        let mut rng = root.split(i as u64);
        let hp = random_box_hp(3, 3, &bounds, &mut rng);
        let p = pick(&mut rng, max_points.max(1));
        let mut grid: Vec<IndexPair> = Vec::with_capacity(p);
        while grid.len() < p.min(256) {
            let e = IndexPair::new(pick(&mut rng, 16), pick(&mut rng, 16));
            if !grid.contains(&e) {
                grid.push(e);
            }
        }
        let k = assemble_gram(&hp, &grid, &grid, &arrays);
        let (lifted, _) = lift_icm(&k, &icm_b(&hp.icm), 0.0);
        for m in [&k, &lifted] {
            let tr = m.trace();
            let ratio = sym_min_eigenvalue(m) / tr;
            out.worst_eig_ratio = out.worst_eig_ratio.min(ratio);
            if ratio < -1e-8 || !ratio.is_finite() {
                out.violations += 1;
            }
        }

        let (a, b) = (grid[0], *grid.last().unwrap());
        let shift = |i: usize, g: UraGeometry, d: LatticeCoord| {
            let c = coords_unchecked(i, g);
            index_of(LatticeCoord::new(c.y + d.y, c.z + d.z), g)
        };
        let rand_lag = |rng: &mut RngStream| LatticeCoord::new(pick(rng, 7) as i64 - 4, pick(rng, 7) as i64 - 4);
        let shifted = (0..32).find_map(|_| {
            let (dr, dt) = (rand_lag(&mut rng), rand_lag(&mut rng));
            Some((
                IndexPair::new(shift(a.rx, arrays.rx, dr)?, shift(a.tx, arrays.tx, dt)?),
                IndexPair::new(shift(b.rx, arrays.rx, dr)?, shift(b.tx, arrays.tx, dt)?),
            ))
        });
        if let Some((a2, b2)) = shifted {
            let v0 = base_eval(&hp, a, b, &arrays);
            let v1 = base_eval(&hp, a2, b2, &arrays);
            let err = (v0 - v1).abs() / v0.abs().max(1.0);
            out.shift_pairs += 1;
            out.worst_shift_err = out.worst_shift_err.max(err);
            if err > 1e-12 {
                out.violations += 1;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoverySummary {
    pub seeds: usize,
    /// Seeds where the learned LML reached `LML(θ★) − slack`.
    pub successes: usize,
    /// `best LML − LML(θ★)` per seed; `None` when learning failed.
    pub margins: Vec<Option<f64>>,
}

/// Draws data from a known interior θ★ on a 16-receive × `n_t`-transmit
/// grid (noise fixed at θ★'s level) and learns θ with `cfg`.
pub fn run_recovery(seeds: usize, seed: u64, n_t: usize, slack: f64, cfg: &LearnConfig) -> Result<RecoverySummary, LearnError> {
    let arrays = arrays44();
    let grid = training_grid(16, &equispaced_subset(16, n_t).map_err(|e| LearnError::Config(e.to_string()))?);
    let root = RngStream::new(seed);
    let mut margins = Vec::with_capacity(seeds);
    for s in 0..seeds {
        let mut rng = root.split(s as u64);
        let truth = random_interior_hp(cfg.q_r, cfg.q_t, &cfg.bounds, &mut rng);
        let obs = sample_observations(&truth, grid.clone(), &arrays, &mut rng)?;
        let reference = log_marginal_likelihood(&truth, &obs, &arrays)?;
        margins.push(optimize(&obs, &arrays, cfg, rng.split(0).seed()).ok().map(|r| r.best_lml - reference));
    }
    Ok(RecoverySummary {
        seeds,
        successes: margins.iter().filter(|m| m.is_some_and(|v| v >= -slack)).count(),
        margins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradcheck_passes_on_a_few_points() {
        let s = run_gradcheck(3, 11, 1e-3, 1e-5).unwrap();
        assert!(s.passed(), "{s:?}");
        assert_eq!(s.coordinates, 35);
    }

    #[test]
    fn gradcheck_catches_a_flipped_mu_derivative() {
        let s = gradcheck_with(2, 11, 1e-3, 1e-5, |space, g| {
            let k = space.layout().iter().position(|id| id.name().contains("mu_y")).unwrap();
            g[k] = -g[k];
        })
        .unwrap();
        assert!(!s.passed());
        assert!(s.worst_coordinate.unwrap().contains("mu_y"));
    }

    #[test]
    fn zero_samples_pass_vacuously() {
        assert!(run_gradcheck(0, 1, 1e-3, 1e-5).unwrap().passed());
        let p = run_psd_check(0, 64, 1);
        assert!(p.passed() && p.shift_pairs == 0);
    }

    #[test]
    fn psd_check_passes() {
        let s = run_psd_check(30, 64, 5);
        assert!(s.passed(), "{s:?}");
        assert!(s.shift_pairs > 0);
    }

    #[test]
    fn box_draws_stay_in_the_box() {
        let b = HyperBounds::default();
        let mut rng = RngStream::new(3);
        for _ in 0..200 {
            assert!(b.contains(&random_box_hp(3, 3, &b, &mut rng)));
        }
    }

    #[test]
    fn recovery_reaches_the_generator() {
        let s = run_recovery(3, 9, 4, 1e-3, &LearnConfig::default()).unwrap();
        assert_eq!(s.margins.len(), 3);
        assert!(s.successes >= 2, "{s:?}");
    }
}
