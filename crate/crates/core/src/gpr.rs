//! Exact GP posterior on the real-augmented (ICM) observation model.

use crate::channel::ChannelMatrix;
use crate::kernel::{assemble_gram, icm_b, lift_cross, lift_icm, ArrayPair, HyperParams};
use crate::lattice::IndexPair;
use crate::linalg::{spd_factorize, LinalgError, SpdFactor, C64, GP_JITTER_LADDER};
use crate::pilot::ObservationSet;
use nalgebra::{DMatrix, DVector, Matrix2};
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GprError {
    #[error("ill-conditioned covariance: min eigenvalue {min_eigenvalue:.3e} after jitter {max_jitter:.3e}")]
    IllConditioned { min_eigenvalue: f64, max_jitter: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("credible level must lie in (0, 1), got {0}")]
    InvalidLevel(f64),
}

impl From<LinalgError> for GprError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::NotPositiveDefinite {
                min_eigenvalue,
                max_jitter,
            } => GprError::IllConditioned {
                min_eigenvalue,
                max_jitter,
            },
            LinalgError::NotSquare { rows, cols } => GprError::Shape(format!("{rows}x{cols} covariance")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: DVector<f64>,
    pub cov_diag: DVector<f64>,
    pub cov_full: Option<DMatrix<f64>>,
}

/// Factorized training covariance, reusable across prediction grids.
#[derive(Debug, Clone)]
pub struct GpModel {
    hp: HyperParams,
    arrays: ArrayPair,
    train: Vec<IndexPair>,
    b: Matrix2<f64>,
    factor: SpdFactor,
    alpha: DVector<f64>,
}

impl GpModel {
    pub fn fit(hp: &HyperParams, obs: &ObservationSet, arrays: &ArrayPair) -> Result<Self, GprError> {
        if obs.z_icm.len() != 2 * obs.grid.len() {
            return Err(GprError::Shape("z_icm must have length 2P".into()));
        }
        let base = assemble_gram(hp, &obs.grid, &obs.grid, arrays);
        let b = icm_b(&hp.icm);
        let (_, c) = lift_icm(&base, &b, hp.sigma_r_sq);
        let factor = spd_factorize(&c, &GP_JITTER_LADDER)?;
        if factor.jitter_used() > GP_JITTER_LADDER[0] * crate::linalg::jitter_scale(&c) {
            log::warn!("covariance needed jitter {:.3e}", factor.jitter_used());
        }
        let alpha = factor.solve_vec(&obs.z_icm);
        Ok(Self {
            hp: hp.clone(),
            arrays: *arrays,
            train: obs.grid.clone(),
            b,
            factor,
            alpha,
        })
    }

    pub fn jitter(&self) -> f64 {
        self.factor.jitter_used()
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Posterior mean `K⋆𝒳 C⁻¹ z` on `x_star`, block layout.
    pub fn mean(&self, x_star: &[IndexPair]) -> DVector<f64> {
        let p = self.train.len();
        let kb = assemble_gram(&self.hp, x_star, &self.train, &self.arrays);
        let a_re = self.alpha.rows(0, p);
        let a_im = self.alpha.rows(p, p);
        let u = a_re * self.b[(0, 0)] + a_im * self.b[(0, 1)];
        let v = a_re * self.b[(1, 0)] + a_im * self.b[(1, 1)];
        let mut out = DVector::zeros(2 * x_star.len());
        out.rows_mut(0, x_star.len()).copy_from(&(&kb * u));
        out.rows_mut(x_star.len(), x_star.len()).copy_from(&(&kb * v));
        out
    }

    pub fn posterior(&self, x_star: &[IndexPair], want_full_cov: bool) -> Posterior {
        let ps = x_star.len();
        let cross = lift_cross(&assemble_gram(&self.hp, x_star, &self.train, &self.arrays), &self.b);
        let mean = &cross * &self.alpha;
        let v = self.factor.solve_lower(&cross.transpose());
        let explained = DVector::from_fn(2 * ps, |k, _| v.column(k).norm_squared());
        let prior_var = self.hp.base_variance();
        let prior_diag = DVector::from_fn(2 * ps, |k, _| prior_var * self.b[(k / ps.max(1), k / ps.max(1))]);
        let cov_diag = prior_diag - explained;
        let cov_full = want_full_cov.then(|| {
            let prior = lift_cross(&assemble_gram(&self.hp, x_star, x_star, &self.arrays), &self.b);
            let mut s = prior - v.tr_mul(&v);
            s = (&s + s.transpose()) * 0.5;
            s
        });
        let cov_diag = match &cov_full {
            Some(s) => s.diagonal(),
            None => cov_diag,
        };
        Posterior {
            mean,
            cov_diag,
            cov_full,
        }
    }
}

pub fn posterior(
    hp: &HyperParams,
    obs: &ObservationSet,
    x_star: &[IndexPair],
    arrays: &ArrayPair,
    want_full_cov: bool,
) -> Result<Posterior, GprError> {
    Ok(GpModel::fit(hp, obs, arrays)?.posterior(x_star, want_full_cov))
}

/// Places a block-layout mean `[Re; Im]` into an `N_r×N_t` matrix.
pub fn reconstruct(mean: &DVector<f64>, grid: &[IndexPair], n_r: usize, n_t: usize) -> Result<ChannelMatrix, GprError> {
    reconstruct_parts(&[(mean, grid)], n_r, n_t)
}

/// Merges several (mean, grid) parts; together they must cover every entry
/// exactly once.
pub fn reconstruct_parts(parts: &[(&DVector<f64>, &[IndexPair])], n_r: usize, n_t: usize) -> Result<ChannelMatrix, GprError> {
    let mut h = DMatrix::<C64>::zeros(n_r, n_t);
    let mut seen = vec![false; n_r * n_t];
    for (mean, grid) in parts {
        let p = grid.len();
        if mean.len() != 2 * p {
            return Err(GprError::Shape(format!("mean of length {} for {} points", mean.len(), p)));
        }
        for (k, pair) in grid.iter().enumerate() {
            if pair.rx == 0 || pair.rx > n_r || pair.tx == 0 || pair.tx > n_t {
                return Err(GprError::Shape(format!("pair {pair:?} outside {n_r}x{n_t}")));
            }
            let slot = pair.vec_index(n_r);
            if seen[slot] {
                return Err(GprError::Shape(format!("entry {pair:?} covered twice")));
            }
            seen[slot] = true;
            h[(pair.rx - 1, pair.tx - 1)] = C64::new(mean[k], mean[p + k]);
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(GprError::Shape("prediction grid does not cover every entry".into()));
    }
    Ok(ChannelMatrix::new(h))
}

/// Two-sided standard-normal quantile for a central credible level.
pub fn gaussian_quantile(level: f64) -> Result<f64, GprError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(GprError::InvalidLevel(level));
    }
    Ok(Normal::standard().inverse_cdf(0.5 + level / 2.0))
}

/// `mean ± z·√var` per real task entry.
pub fn credible_interval(post: &Posterior, level: f64) -> Result<Vec<(f64, f64)>, GprError> {
    let z = gaussian_quantile(level)?;
    Ok(post
        .mean
        .iter()
        .zip(post.cov_diag.iter())
        .map(|(m, v)| {
            let h = z * v.max(0.0).sqrt();
            (m - h, m + h)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{base_eval, tests::random_hp};
    use crate::lattice::{equispaced_subset, prediction_grid, training_grid, ActiveSet, PredictionMode, UraGeometry};
    use crate::linalg::{jitter_scale, sym_min_eigenvalue, RngStream};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn small_arrays() -> ArrayPair {
        ArrayPair::new(UraGeometry::new(2, 2).unwrap(), UraGeometry::new(2, 2).unwrap())
    }

    fn obs_from(grid: Vec<IndexPair>, z_icm: DVector<f64>, sigma_r_sq: f64) -> ObservationSet {
        let p = grid.len();
        let z = DVector::from_fn(p, |k, _| C64::new(z_icm[k], z_icm[p + k]));
        ObservationSet::from_parts(grid, z, 2.0 * sigma_r_sq).unwrap()
    }

    /// Joint prior over `[f(x); f(x⋆)]` built entry-by-entry, in the layout
    /// `[Re(x), Im(x), Re(x⋆), Im(x⋆)]`.
    pub(crate) fn conditioning_oracle(
        hp: &HyperParams,
        x: &[IndexPair],
        xs: &[IndexPair],
        arrays: &ArrayPair,
        z_icm: &DVector<f64>,
        noise: f64,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let b = icm_b(&hp.icm);
        let pts: Vec<(IndexPair, usize)> = [x, xs]
            .iter()
            .flat_map(|g| (0..2).flat_map(move |t| g.iter().map(move |p| (*p, t))))
            .collect();
        let n = pts.len();
        let joint = DMatrix::from_fn(n, n, |i, j| b[(pts[i].1, pts[j].1)] * base_eval(hp, pts[i].0, pts[j].0, arrays));
        let m = 2 * x.len();
        let mut kxx = joint.view((0, 0), (m, m)).into_owned();
        for i in 0..m {
            kxx[(i, i)] += noise;
        }
        let ksx = joint.view((m, 0), (n - m, m)).into_owned();
        let kss = joint.view((m, m), (n - m, n - m)).into_owned();
        let inv = kxx.try_inverse().unwrap();
        let mean = &ksx * &inv * z_icm;
        let cov = kss - &ksx * inv * ksx.transpose();
        (mean, cov)
    }

    #[test]
    fn toy_instance_matches_conditioning() {
        let arrays = small_arrays();
        let mut rng = RngStream::new(11);
        let hp = random_hp(2, 1, &mut rng);
        let x = vec![IndexPair::new(1, 1), IndexPair::new(3, 2)];
        let xs = vec![IndexPair::new(4, 4)];
        let z = DVector::from_vec(vec![0.3, -1.2, 0.8, 0.1]);
        let obs = obs_from(x.clone(), z.clone(), hp.sigma_r_sq);
        let model = GpModel::fit(&hp, &obs, &arrays).unwrap();
        let post = model.posterior(&xs, true);
        let (m, c) = conditioning_oracle(&hp, &x, &xs, &arrays, &z, hp.sigma_r_sq + model.jitter());
        assert!((&post.mean - m).norm() <= 1e-10 * post.mean.norm().max(1e-3));
        assert!((post.cov_full.unwrap() - c).norm() <= 1e-10);
    }

    #[test]
    fn noiseless_interpolates() {
        let arrays = small_arrays();
        let mut rng = RngStream::new(3);
        let mut hp = random_hp(1, 1, &mut rng);
        hp.rx[0].v_y = 0.1;
        hp.rx[0].v_z = 0.1;
        hp.tx[0].v_y = 0.1;
        hp.tx[0].v_z = 0.1;
        hp.sigma_r_sq = 1e-12;
        let x = training_grid(4, &ActiveSet::new(vec![1, 4], 4).unwrap());
        let z = DVector::from_fn(16, |_, _| rng.normal());
        let obs = obs_from(x.clone(), z.clone(), hp.sigma_r_sq);
        let post = posterior(&hp, &obs, &x, &arrays, false).unwrap();
        assert!((&post.mean - &z).norm() / z.norm() < 1e-6);
    }

    #[test]
    fn zero_data_gives_prior() {
        let arrays = small_arrays();
        let mut rng = RngStream::new(5);
        let hp = random_hp(2, 2, &mut rng);
        let x = training_grid(4, &ActiveSet::new(vec![2], 4).unwrap());
        let obs = obs_from(x, DVector::zeros(8), hp.sigma_r_sq);
        let xs = vec![IndexPair::new(1, 3), IndexPair::new(2, 4)];
        let model = GpModel::fit(&hp, &obs, &arrays).unwrap();
        let post = model.posterior(&xs, true);
        assert!(post.mean.iter().all(|m| *m == 0.0));
        let prior = lift_cross(&assemble_gram(&hp, &xs, &xs, &arrays), &icm_b(&hp.icm));
        assert!(post.cov_full.as_ref().unwrap().diagonal().iter().zip(prior.diagonal().iter()).all(|(a, b)| *a <= b + 1e-8));
    }

    #[test]
    fn mean_helper_agrees_with_posterior() {
        let arrays = ArrayPair::new(UraGeometry::square(4), UraGeometry::square(4));
        let mut rng = RngStream::new(8);
        let hp = random_hp(3, 3, &mut rng);
        let omega = equispaced_subset(16, 4).unwrap();
        let x = training_grid(16, &omega);
        let z = DVector::from_fn(2 * x.len(), |_, _| rng.normal());
        let obs = obs_from(x, z, hp.sigma_r_sq);
        let model = GpModel::fit(&hp, &obs, &arrays).unwrap();
        let xs = prediction_grid(16, 16, PredictionMode::Full, &omega);
        let a = model.mean(&xs);
        let b = model.posterior(&xs, false).mean;
        assert!((a - &b).norm() <= 1e-10 * b.norm());
    }

    #[test]
    fn diag_matches_full() {
        let arrays = small_arrays();
        let mut rng = RngStream::new(21);
        let hp = random_hp(2, 2, &mut rng);
        let x = training_grid(4, &ActiveSet::new(vec![1, 3], 4).unwrap());
        let z = DVector::from_fn(16, |_, _| rng.normal());
        let model = GpModel::fit(&hp, &obs_from(x, z, hp.sigma_r_sq), &arrays).unwrap();
        let xs = prediction_grid(4, 4, PredictionMode::Full, &ActiveSet::full(4));
        let d = model.posterior(&xs, false).cov_diag;
        let f = model.posterior(&xs, true);
        assert!((d - &f.cov_diag).norm() < 1e-10);
        let full = f.cov_full.unwrap();
        assert!(sym_min_eigenvalue(&full) >= -1e-8 * full.trace().max(1.0));
        assert!(f.cov_diag.iter().all(|v| *v >= -1e-8));
    }

    #[test]
    fn reconstruct_examples() {
        let h = reconstruct(&DVector::from_vec(vec![3.0, 4.0]), &[IndexPair::new(1, 1)], 1, 1).unwrap();
        assert_eq!(h.entries()[(0, 0)], C64::new(3.0, 4.0));

        let mut rng = RngStream::new(2);
        let truth = DMatrix::from_fn(3, 4, |_, _| rng.complex_normal());
        let grid = prediction_grid(3, 4, PredictionMode::Full, &ActiveSet::full(4));
        let p = grid.len();
        let stacked = DVector::from_fn(2 * p, |k, _| {
            let pair = grid[k % p];
            let v = truth[(pair.rx - 1, pair.tx - 1)];
            if k < p {
                v.re
            } else {
                v.im
            }
        });
        assert_eq!(reconstruct(&stacked, &grid, 3, 4).unwrap().entries(), &truth);

        let omega = ActiveSet::new(vec![2, 3], 4).unwrap();
        let train = training_grid(3, &omega);
        let missing = prediction_grid(3, 4, PredictionMode::MissingOnly, &omega);
        let (a, b) = (DVector::zeros(2 * train.len()), DVector::zeros(2 * missing.len()));
        assert!(reconstruct_parts(&[(&a, &train), (&b, &missing)], 3, 4).is_ok());
        assert!(reconstruct_parts(&[(&a, &train)], 3, 4).is_err());
        assert!(reconstruct_parts(&[(&a, &train), (&a, &train)], 3, 4).is_err());
    }

    #[test]
    fn interval_examples() {
        let post = Posterior {
            mean: DVector::from_vec(vec![1.0, -2.0]),
            cov_diag: DVector::from_vec(vec![0.0, 4.0]),
            cov_full: None,
        };
        let iv = credible_interval(&post, 0.95).unwrap();
        assert_eq!(iv[0], (1.0, 1.0));
        assert_relative_eq!(iv[1].1 - (-2.0), 1.959964 * 2.0, epsilon = 1e-5);
        assert!(credible_interval(&post, 1.0).is_err());
    }

    #[test]
    fn interval_coverage_is_calibrated() {
        let arrays = small_arrays();
        let mut rng = RngStream::new(77);
        let hp = random_hp(2, 2, &mut rng);
        let x = training_grid(4, &ActiveSet::new(vec![1, 4], 4).unwrap());
        let xs = prediction_grid(4, 4, PredictionMode::MissingOnly, &ActiveSet::new(vec![1, 4], 4).unwrap());
        let all: Vec<IndexPair> = x.iter().chain(xs.iter()).cloned().collect();
        let b = icm_b(&hp.icm);
        let joint = lift_cross(&assemble_gram(&hp, &all, &all, &arrays), &b);
        let chol = spd_factorize(&joint, &GP_JITTER_LADDER).unwrap();
        let (p, ps) = (x.len(), xs.len());
        let (mut hits, mut total) = (0usize, 0usize);
        for _ in 0..500 {
            let f = chol.factor() * DVector::from_fn(2 * (p + ps), |_, _| rng.normal());
            let n = p + ps;
            let mut z = DVector::zeros(2 * p);
            for k in 0..p {
                z[k] = f[k] + hp.sigma_r_sq.sqrt() * rng.normal();
                z[p + k] = f[n + k] + hp.sigma_r_sq.sqrt() * rng.normal();
            }
            let post = posterior(&hp, &obs_from(x.clone(), z, hp.sigma_r_sq), &xs, &arrays, false).unwrap();
            let iv = credible_interval(&post, 0.95).unwrap();
            for k in 0..ps {
                for (t, truth) in [(k, f[p + k]), (ps + k, f[n + p + k])] {
                    total += 1;
                    if iv[t].0 <= truth && truth <= iv[t].1 {
                        hits += 1;
                    }
                }
            }
        }
        let rate = hits as f64 / total as f64;
        assert!((rate - 0.95).abs() < 0.03, "coverage {rate}");
    }

    proptest! {
        #[test]
        fn variance_never_exceeds_prior(seed in 0u64..3000) {
            let arrays = small_arrays();
            let mut rng = RngStream::new(seed);
            let hp = random_hp(2, 2, &mut rng);
            let x = training_grid(4, &ActiveSet::new(vec![2, 3], 4).unwrap());
            let z = DVector::from_fn(16, |_, _| rng.normal());
            let xs = prediction_grid(4, 4, PredictionMode::Full, &ActiveSet::full(4));
            let post = posterior(&hp, &obs_from(x, z, hp.sigma_r_sq), &xs, &arrays, false).unwrap();
            let b = icm_b(&hp.icm);
            for k in 0..xs.len() {
                prop_assert!(post.cov_diag[k] <= hp.base_variance() * b[(0, 0)] + 1e-8);
                prop_assert!(post.cov_diag[xs.len() + k] <= hp.base_variance() * b[(1, 1)] + 1e-8);
            }
        }

        #[test]
        fn extra_observation_never_increases_variance(seed in 0u64..3000, extra in 5usize..17) {
            let arrays = small_arrays();
            let mut rng = RngStream::new(seed);
            let hp = random_hp(2, 2, &mut rng);
            let mut x = vec![IndexPair::new(1, 1), IndexPair::new(2, 2), IndexPair::new(3, 3), IndexPair::new(4, 4)];
            let xs = prediction_grid(4, 4, PredictionMode::Full, &ActiveSet::full(4));
            let z = DVector::from_fn(10, |_, _| rng.normal());
            let small = obs_from(x.clone(), DVector::from_fn(8, |k, _| z[if k < 4 { k } else { k + 1 }]), hp.sigma_r_sq);
            let pair = IndexPair::new(1 + (extra - 1) % 4, 1 + (extra - 1) / 4 % 4);
            prop_assume!(!x.contains(&pair));
            x.push(pair);
            let big = obs_from(x, z, hp.sigma_r_sq);
            let a = posterior(&hp, &small, &xs, &arrays, false).unwrap();
            let b = posterior(&hp, &big, &xs, &arrays, false).unwrap();
            for k in 0..a.cov_diag.len() {
                prop_assert!(b.cov_diag[k] <= a.cov_diag[k] + 1e-9 * jitter_scale(&DMatrix::from_element(1, 1, hp.base_variance())));
            }
        }
    }
}
