//! Saleh–Valenzuela clustered multipath channels on URA pairs.

use crate::lattice::{coords_unchecked, UraGeometry};
use crate::linalg::{RngStream, C64};
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ChannelError {
    #[error("invalid channel parameter: {0}")]
    InvalidParams(String),
    #[error("channel draw degenerate after {0} attempts")]
    Degenerate(usize),
    #[error("malformed matrix dump: {0}")]
    Parse(String),
}

/// Channel-generation parameters. Defaults follow the 28 GHz setup used
/// throughout the crate.
///
/// Path-loss exponents scale every ray by `d^-n` at a fixed reference
/// distance of one metre, so they cancel under the unit-power normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvParams {
    pub n_paths: f64,
    pub k_factor_db: f64,
    pub cluster_arrival_mean_ns: f64,
    pub ray_arrival_mean_ns: f64,
    pub cluster_decay_ns: f64,
    pub ray_decay_ns: f64,
    pub angular_spread_az_deg: f64,
    pub angular_spread_el_deg: f64,
    pub carrier_hz: f64,
    pub spacing_over_lambda: f64,
    pub reflection_loss_db_range: [f64; 2],
    pub path_loss_exponents: [f64; 2],
    /// Range of per-cluster mean azimuths.
    pub azimuth_range_deg: [f64; 2],
    /// Range of per-cluster mean elevations.
    pub elevation_range_deg: [f64; 2],
}

impl Default for SvParams {
    fn default() -> Self {
        Self {
            n_paths: 6.0,
            k_factor_db: 17.0,
            cluster_arrival_mean_ns: 25.0,
            ray_arrival_mean_ns: 2.0,
            cluster_decay_ns: 20.0,
            ray_decay_ns: 5.0,
            angular_spread_az_deg: 10.0,
            angular_spread_el_deg: 7.0,
            carrier_hz: 28e9,
            spacing_over_lambda: 0.5,
            reflection_loss_db_range: [-10.0, -3.0],
            path_loss_exponents: [2.0, 3.0],
            azimuth_range_deg: [-90.0, 90.0],
            elevation_range_deg: [-45.0, 45.0],
        }
    }
}

impl SvParams {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let bad = |m: &str| Err(ChannelError::InvalidParams(m.to_string()));
        let times = [
            self.cluster_arrival_mean_ns,
            self.ray_arrival_mean_ns,
            self.cluster_decay_ns,
            self.ray_decay_ns,
        ];
        if times.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return bad("time constants must be positive");
        }
        if !(self.angular_spread_az_deg >= 0.0 && self.angular_spread_el_deg >= 0.0) {
            return bad("angular spreads must be non-negative");
        }
        let [lo, hi] = self.reflection_loss_db_range;
        if !(lo <= hi && hi <= 0.0) {
            return bad("reflection loss range must satisfy low <= high <= 0");
        }
        if !(self.n_paths > 0.0 && self.n_paths.is_finite()) {
            return bad("n_paths must be positive");
        }
        if !(self.carrier_hz > 0.0 && self.spacing_over_lambda > 0.0) {
            return bad("carrier and spacing must be positive");
        }
        if self.azimuth_range_deg[0] > self.azimuth_range_deg[1]
            || self.elevation_range_deg[0] > self.elevation_range_deg[1]
        {
            return bad("angle ranges must be ordered");
        }
        if !self.k_factor_db.is_finite() {
            return bad("k_factor_db must be finite");
        }
        Ok(())
    }

    pub fn wavelength_m(&self) -> f64 {
        299_792_458.0 / self.carrier_hz
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction {
    pub azimuth: f64,
    pub elevation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathComponent {
    pub gain: C64,
    pub aod: Direction,
    pub aoa: Direction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    entries: DMatrix<C64>,
}

impl ChannelMatrix {
    pub fn new(entries: DMatrix<C64>) -> Self {
        Self { entries }
    }

    pub fn zeros(n_r: usize, n_t: usize) -> Self {
        Self::new(DMatrix::zeros(n_r, n_t))
    }

    pub fn entries(&self) -> &DMatrix<C64> {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut DMatrix<C64> {
        &mut self.entries
    }

    pub fn into_inner(self) -> DMatrix<C64> {
        self.entries
    }

    pub fn n_r(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_t(&self) -> usize {
        self.entries.ncols()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.entries.iter().map(|x| x.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|x| x.re.is_finite() && x.im.is_finite())
    }

    /// Text dump: a `rows cols` header line, then one `re,im` line per entry
    /// in row-major order.
    pub fn to_dump(&self) -> String {
        let mut s = format!("{} {}\n", self.n_r(), self.n_t());
        for i in 0..self.n_r() {
            for j in 0..self.n_t() {
                let x = self.entries[(i, j)];
                let _ = writeln!(s, "{:?},{:?}", x.re, x.im);
            }
        }
        s
    }

    pub fn from_dump(text: &str) -> Result<Self, ChannelError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| ChannelError::Parse("empty input".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| ChannelError::Parse(format!("header: {e}")))?;
        if dims.len() != 2 {
            return Err(ChannelError::Parse("header must be `rows cols`".into()));
        }
        let (r, c) = (dims[0], dims[1]);
        let mut m = DMatrix::zeros(r, c);
        for k in 0..r * c {
            let line = lines
                .next()
                .ok_or_else(|| ChannelError::Parse(format!("missing entry {k}")))?;
            let (re, im) = line
                .split_once(',')
                .ok_or_else(|| ChannelError::Parse(format!("entry {k}: expected re,im")))?;
            let re: f64 = re.trim().parse().map_err(|e| ChannelError::Parse(format!("{e}")))?;
            let im: f64 = im.trim().parse().map_err(|e| ChannelError::Parse(format!("{e}")))?;
            m[(k / c, k % c)] = C64::new(re, im);
        }
        if lines.next().is_some() {
            return Err(ChannelError::Parse("trailing entries".into()));
        }
        Ok(Self::new(m))
    }
}

/// URA response: element at lattice point `(y, z)` has phase
/// `2π·(d/λ)·(y·sin(az)·cos(el) + z·sin(el))`.
pub fn steering_vector(
    geom: UraGeometry,
    azimuth: f64,
    elevation: f64,
    spacing_over_lambda: f64,
) -> DVector<C64> {
    let uy = azimuth.sin() * elevation.cos();
    let uz = elevation.sin();
    DVector::from_fn(geom.total(), |k, _| {
        let c = coords_unchecked(k + 1, geom);
        let phase = 2.0 * PI * spacing_over_lambda * (c.y as f64 * uy + c.z as f64 * uz);
        C64::from_polar(1.0, phase)
    })
}

/// `Σ α · a_r(aoa) · a_t(aod)^H`.
pub fn assemble(
    paths: &[PathComponent],
    rx: UraGeometry,
    tx: UraGeometry,
    spacing_over_lambda: f64,
) -> ChannelMatrix {
    let mut h = DMatrix::<C64>::zeros(rx.total(), tx.total());
    for p in paths {
        let ar = steering_vector(rx, p.aoa.azimuth, p.aoa.elevation, spacing_over_lambda);
        let at = steering_vector(tx, p.aod.azimuth, p.aod.elevation, spacing_over_lambda);
        for j in 0..tx.total() {
            let c = p.gain * at[j].conj();
            for i in 0..rx.total() {
                h[(i, j)] += ar[i] * c;
            }
        }
    }
    ChannelMatrix::new(h)
}

/// Scales `h` so that `‖H‖_F² = N_r·N_t`; returns the applied factor.
pub fn normalize(h: &mut ChannelMatrix) -> Option<f64> {
    let e = h.frobenius_sq();
    if !(e > 0.0 && e.is_finite()) {
        return None;
    }
    let scale = ((h.n_r() * h.n_t()) as f64 / e).sqrt();
    h.entries_mut().iter_mut().for_each(|x| *x *= scale);
    Some(scale)
}

fn wrap_azimuth(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

fn clamp_elevation(e: f64) -> f64 {
    e.clamp(-PI / 2.0, PI / 2.0)
}

fn draw_direction(p: &SvParams, rng: &mut RngStream) -> Direction {
    let [a0, a1] = p.azimuth_range_deg;
    let [e0, e1] = p.elevation_range_deg;
    Direction {
        azimuth: rng.uniform_in(a0, a1).to_radians(),
        elevation: rng.uniform_in(e0, e1).to_radians(),
    }
}

fn perturb(mean: Direction, p: &SvParams, rng: &mut RngStream) -> Direction {
    Direction {
        azimuth: wrap_azimuth(mean.azimuth + p.angular_spread_az_deg.to_radians() * rng.normal()),
        elevation: clamp_elevation(
            mean.elevation + p.angular_spread_el_deg.to_radians() * rng.normal(),
        ),
    }
}

fn poisson_at_least_one(mean: f64, rng: &mut RngStream) -> usize {
    let d = Poisson::new(mean).expect("positive Poisson mean");
    (d.sample(rng) as usize).max(1)
}

/// Draws the multipath components of one realization (before normalization).
/// The first component is the line-of-sight ray.
pub fn draw_paths(params: &SvParams, rng: &mut RngStream) -> Result<Vec<PathComponent>, ChannelError> {
    params.validate()?;
    let n_clusters = poisson_at_least_one((params.n_paths / 3.0).max(1.0), rng);
    let rays_mean = (params.n_paths / n_clusters as f64).max(2.0);
    let cluster_gap = Exp::new(1.0 / params.cluster_arrival_mean_ns).unwrap();
    let ray_gap = Exp::new(1.0 / params.ray_arrival_mean_ns).unwrap();
    let [l0, l1] = params.reflection_loss_db_range;
    let nlos_gain = REFERENCE_DISTANCE_M.powf(-params.path_loss_exponents[1]);

    let mut nlos: Vec<(f64, Direction, Direction)> = Vec::new();
    let mut t_cluster = 0.0;
    for c in 0..n_clusters {
        if c > 0 {
            t_cluster += cluster_gap.sample(rng);
        }
        let aoa_mean = draw_direction(params, rng);
        let aod_mean = draw_direction(params, rng);
        let n_rays = poisson_at_least_one(rays_mean, rng);
        let mut tau = 0.0;
        for r in 0..n_rays {
            if r > 0 {
                tau += ray_gap.sample(rng);
            }
            let loss_db = rng.uniform_in(l0, l1);
            let power = (-t_cluster / params.cluster_decay_ns).exp()
                * (-tau / params.ray_decay_ns).exp()
                * 10f64.powf(loss_db / 10.0)
                * nlos_gain;
            let aoa = perturb(aoa_mean, params, rng);
            let aod = perturb(aod_mean, params, rng);
            nlos.push((power, aoa, aod));
        }
    }
    let nlos_power: f64 = nlos.iter().map(|r| r.0).sum();
    let los_power = 10f64.powf(params.k_factor_db / 10.0) * nlos_power;

    let mut paths = Vec::with_capacity(nlos.len() + 1);
    let los_phase = rng.uniform_in(-PI, PI);
    paths.push(PathComponent {
        gain: C64::from_polar(los_power.sqrt(), los_phase),
        aoa: draw_direction(params, rng),
        aod: draw_direction(params, rng),
    });
    for (power, aoa, aod) in nlos {
        paths.push(PathComponent {
            gain: rng.complex_normal() * power.sqrt(),
            aoa,
            aod,
        });
    }
    Ok(paths)
}

const MAX_DRAWS: usize = 8;
const REFERENCE_DISTANCE_M: f64 = 1.0;

/// One normalized SV realization together with its (rescaled) paths.
pub fn generate_sv_paths(
    params: &SvParams,
    rx: UraGeometry,
    tx: UraGeometry,
    rng: &mut RngStream,
) -> Result<(ChannelMatrix, Vec<PathComponent>), ChannelError> {
    for _ in 0..MAX_DRAWS {
        let mut paths = draw_paths(params, rng)?;
        let mut h = assemble(&paths, rx, tx, params.spacing_over_lambda);
        if let Some(scale) = normalize(&mut h) {
            if h.is_finite() {
                paths.iter_mut().for_each(|p| p.gain *= scale);
                return Ok((h, paths));
            }
        }
    }
    Err(ChannelError::Degenerate(MAX_DRAWS))
}

pub fn generate_sv(
    params: &SvParams,
    rx: UraGeometry,
    tx: UraGeometry,
    seed: u64,
) -> Result<ChannelMatrix, ChannelError> {
    let mut rng = RngStream::new(seed);
    generate_sv_paths(params, rx, tx, &mut rng).map(|(h, _)| h)
}
