//! Metrics and the Monte-Carlo sweep over SNR × pilot budget × trials.

use crate::baselines::{amp_estimate, ls_estimate, mmse_isotropic, omp_estimate, AngularDictionary, IsoPrior, SparseRecoveryConfig};
use crate::channel::{generate_sv, ChannelMatrix, SvParams};
use crate::gpr::{reconstruct, GpModel};
use crate::kernel::{ArrayPair, HyperParams};
use crate::lattice::{equispaced_subset, prediction_grid, PredictionMode, UraGeometry};
use crate::learn::{optimize, variance_matched_init, LearnConfig};
use crate::linalg::{RngStream, C64};
use crate::pilot::{db_to_linear, observe, ObservationSet};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("true channel has zero energy")]
    ZeroChannel,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Setup(String),
    #[error("output error: {0}")]
    Io(String),
}

/// `‖Ĥ − H‖_F² / ‖H‖_F²`.
pub fn nmse(h_hat: &DMatrix<C64>, h: &DMatrix<C64>) -> Result<f64, EvalError> {
    if h_hat.shape() != h.shape() {
        return Err(EvalError::Shape(format!("{:?} vs {:?}", h_hat.shape(), h.shape())));
    }
    let e = h.norm_squared();
    if e == 0.0 {
        return Err(EvalError::ZeroChannel);
    }
    Ok((h_hat - h).norm_squared() / e)
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// `W = (ĤĤᴴ + (N_t/ρ) I)⁻¹ Ĥ`.
pub fn lmmse_detector(h_hat: &DMatrix<C64>, rho: f64) -> DMatrix<C64> {
    let n_t = h_hat.ncols() as f64;
    let mut g = h_hat * h_hat.adjoint();
    for i in 0..g.nrows() {
        g[(i, i)] += C64::new(n_t / rho, 0.0);
    }
    match g.clone().cholesky() {
        Some(c) => c.solve(h_hat),
        None => g.lu().solve(h_hat).unwrap_or_else(|| DMatrix::zeros(h_hat.nrows(), h_hat.ncols())),
    }
}

/// Sum-rate of the LMMSE detector built from `Ĥ` on the true channel,
/// with pilot overhead `(1 − n_t/T_c)`.
pub fn spectral_efficiency(h_hat: &DMatrix<C64>, h: &DMatrix<C64>, rho: f64, n_t: usize, t_c: usize) -> f64 {
    let prelog = (1.0 - n_t as f64 / t_c as f64).max(0.0);
    if prelog == 0.0 {
        return 0.0;
    }
    let w = lmmse_detector(h_hat, rho);
    let noise = h.ncols() as f64 / rho;
    let gains = w.adjoint() * h;
    let mut total = 0.0;
    for k in 0..h.ncols() {
        let signal = gains[(k, k)].norm_sqr();
        let interference: f64 = (0..h.ncols()).filter(|&j| j != k).map(|j| gains[(k, j)].norm_sqr()).sum();
        let denom = interference + noise * w.column(k).norm_squared();
        let sinr = if denom > 0.0 { signal / denom } else { 0.0 };
        total += (1.0 + sinr).log2();
    }
    prelog * total
}

/// Training energy relative to sounding every transmit antenna.
pub fn energy_ratio(n_t: usize, n_total: usize) -> f64 {
    n_t as f64 / n_total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Genie,
    Gpr,
    Ls,
    Mmse,
    Omp,
    Amp,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [Self::Genie, Self::Gpr, Self::Ls, Self::Mmse, Self::Omp, Self::Amp];

    pub fn name(self) -> &'static str {
        match self {
            Self::Genie => "genie",
            Self::Gpr => "gpr",
            Self::Ls => "ls",
            Self::Mmse => "mmse",
            Self::Omp => "omp",
            Self::Amp => "amp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s.trim().to_ascii_lowercase())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmsePriorConfig {
    pub sigma_h_sq: f64,
    /// Distance between the array planes in wavelengths.
    pub plane_gap_wavelengths: f64,
}

impl Default for MmsePriorConfig {
    fn default() -> Self {
        Self {
            sigma_h_sq: 1.0,
            plane_gap_wavelengths: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub rx: UraGeometry,
    pub tx: UraGeometry,
    pub snr_db_list: Vec<f64>,
    pub nt_list: Vec<usize>,
    pub trials: usize,
    pub coherence_block: usize,
    pub p_active: f64,
    pub estimators: Vec<EstimatorKind>,
    pub master_seed: u64,
    pub sv: SvParams,
    pub learn: LearnConfig,
    pub sparse: SparseRecoveryConfig,
    pub mmse: MmsePriorConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            rx: UraGeometry::square(4),
            tx: UraGeometry::square(4),
            snr_db_list: vec![0.0],
            nt_list: vec![16, 8, 4, 2],
            trials: 100,
            coherence_block: 100,
            p_active: 1.0,
            estimators: EstimatorKind::ALL.to_vec(),
            master_seed: 2025,
            sv: SvParams::default(),
            learn: LearnConfig::default(),
            sparse: SparseRecoveryConfig::default(),
            mmse: MmsePriorConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::Config(m));
        self.rx.validate().map_err(|e| EvalError::Config(e.to_string()))?;
        self.tx.validate().map_err(|e| EvalError::Config(e.to_string()))?;
        let n_total = self.tx.total();
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.snr_db_list.is_empty() || self.snr_db_list.iter().any(|s| !s.is_finite()) {
            return bad("snr_db_list must hold finite values".into());
        }
        if self.nt_list.is_empty() || self.nt_list.iter().any(|&n| n == 0 || n > n_total) {
            return bad(format!("every pilot budget must lie in 1..={n_total}"));
        }
        if self.coherence_block <= *self.nt_list.iter().max().unwrap() {
            return bad("coherence block must exceed every pilot budget".into());
        }
        if !(self.p_active > 0.0 && self.p_active.is_finite()) {
            return bad("p_active must be positive".into());
        }
        if self.estimators.is_empty() {
            return bad("no estimators selected".into());
        }
        if !(self.mmse.sigma_h_sq > 0.0 && self.mmse.plane_gap_wavelengths >= 0.0) {
            return bad("MMSE prior needs σ_h² > 0 and a non-negative plane gap".into());
        }
        self.sv.validate().map_err(|e| EvalError::Config(e.to_string()))?;
        self.learn.validate().map_err(|e| EvalError::Config(e.to_string()))?;
        self.sparse.validate().map_err(|e| EvalError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn runs(&self, kind: EstimatorKind) -> bool {
        self.estimators.contains(&kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub estimator: String,
    pub snr_db: f64,
    pub n_t: usize,
    pub trial: usize,
    pub nmse: f64,
    pub nmse_db: f64,
    pub se_bps_hz: f64,
    pub rel_se: f64,
    pub energy_ratio: f64,
    pub lml: Option<f64>,
    /// `;`-separated markers such as `fallback`, `not_converged`, `jitter`.
    pub flags: String,
    /// Wall time; kept out of the results CSV so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_ms: f64,
    /// Learned θ for GPR rows.
    #[serde(skip)]
    pub theta: Option<HyperParams>,
}

/// Stream labels for per-trial seeds.
const CHANNEL_STREAM: u64 = 1;
const PILOT_STREAM: u64 = 2;
const LEARN_STREAM: u64 = 3;

struct Shared {
    arrays: ArrayPair,
    prior: Option<IsoPrior>,
    dict: Option<AngularDictionary>,
    root: RngStream,
}

impl Shared {
    fn new(cfg: &ExperimentConfig) -> Self {
        Shared {
            arrays: ArrayPair::new(cfg.rx, cfg.tx),
            prior: cfg.runs(EstimatorKind::Mmse).then(|| {
                IsoPrior::from_arrays(
                    cfg.rx,
                    cfg.tx,
                    cfg.sv.wavelength_m(),
                    cfg.sv.spacing_over_lambda,
                    cfg.mmse.plane_gap_wavelengths,
                    cfg.mmse.sigma_h_sq,
                )
            }),
            dict: (cfg.runs(EstimatorKind::Omp) || cfg.runs(EstimatorKind::Amp))
                .then(|| AngularDictionary::new(cfg.rx, cfg.tx, cfg.sparse.oversampling)),
            root: RngStream::new(cfg.master_seed),
        }
    }
}

/// Runs the full sweep. Rows are ordered by (SNR index, trial, budget,
/// estimator) regardless of the parallel schedule.
pub fn run_monte_carlo(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>, EvalError> {
    cfg.validate()?;
    let shared = Shared::new(cfg);
    let items: Vec<(usize, usize)> = (0..cfg.snr_db_list.len()).flat_map(|m| (0..cfg.trials).map(move |r| (m, r))).collect();
    let per_trial: Vec<Result<Vec<ResultRow>, EvalError>> = items
        .par_iter()
        .map(|&(m, r)| run_trial(cfg, &shared, m, r, &cfg.nt_list).map(|t| t.rows.into_iter().map(|(row, _)| row).collect()))
        .collect();
    let mut rows = Vec::new();
    for t in per_trial {
        rows.extend(t?);
    }
    Ok(rows)
}

/// One trial with its estimates kept: the channel, and each row paired with
/// the matrix it scored.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub channel: ChannelMatrix,
    pub rows: Vec<(ResultRow, ChannelMatrix)>,
}

/// Replays trial `trial` of SNR point `snr_index` at the budgets in
/// `nt_list`, with exactly the streams a sweep would use.
pub fn run_single(cfg: &ExperimentConfig, snr_index: usize, trial: usize, nt_list: &[usize]) -> Result<TrialOutcome, EvalError> {
    cfg.validate()?;
    if snr_index >= cfg.snr_db_list.len() {
        return Err(EvalError::Config(format!("SNR index {snr_index} out of range")));
    }
    let n_total = cfg.tx.total();
    if nt_list.iter().any(|&n| n == 0 || n > n_total) {
        return Err(EvalError::Config(format!("every pilot budget must lie in 1..={n_total}")));
    }
    run_trial(cfg, &Shared::new(cfg), snr_index, trial, nt_list)
}

fn run_trial(cfg: &ExperimentConfig, sh: &Shared, m: usize, r: usize, nt_list: &[usize]) -> Result<TrialOutcome, EvalError> {
    let snr_db = cfg.snr_db_list[m];
    let rho = db_to_linear(snr_db);
    let (n_r, n_total) = (cfg.rx.total(), cfg.tx.total());
    // channels and noise depend on the trial only, so SNR points share them
    let channel_seed = sh.root.split_path(&[CHANNEL_STREAM, r as u64]).seed();
    let h = generate_sv(&cfg.sv, cfg.rx, cfg.tx, channel_seed).map_err(|e| EvalError::Setup(e.to_string()))?;
    let genie_se = spectral_efficiency(h.entries(), h.entries(), rho, 0, cfg.coherence_block);
    let mut rows = Vec::new();
    let row = |kind: EstimatorKind, n_t: usize, est: &DMatrix<C64>, overhead: usize| -> Result<ResultRow, EvalError> {
        let e = nmse(est, h.entries())?;
        let se = spectral_efficiency(est, h.entries(), rho, overhead, cfg.coherence_block);
        Ok(ResultRow {
            estimator: kind.name().to_string(),
            snr_db,
            n_t,
            trial: r,
            nmse: e,
            nmse_db: to_db(e),
            se_bps_hz: se,
            rel_se: if genie_se > 0.0 { se / genie_se } else { 0.0 },
            energy_ratio: energy_ratio(n_t, n_total),
            lml: None,
            flags: String::new(),
            wall_ms: 0.0,
            theta: None,
        })
    };

    if cfg.runs(EstimatorKind::Genie) {
        let mut g = row(EstimatorKind::Genie, 0, h.entries(), 0)?;
        g.se_bps_hz = genie_se;
        g.rel_se = 1.0;
        rows.push((g, h.clone()));
    }

    for &n_t in nt_list {
        let omega = equispaced_subset(n_total, n_t).map_err(|e| EvalError::Setup(e.to_string()))?;
        let mut rng = sh.root.split_path(&[PILOT_STREAM, r as u64, n_t as u64]);
        let (z, obs) = observe(&h, &omega, cfg.p_active, rho, &mut rng).map_err(|e| EvalError::Setup(e.to_string()))?;

        if cfg.runs(EstimatorKind::Gpr) {
            let t0 = Instant::now();
            let seed = sh.root.split_path(&[LEARN_STREAM, r as u64, n_t as u64]).seed();
            let (est, theta, lml, flags) = gpr_estimate(cfg, &sh.arrays, &obs, &omega, seed, n_r, n_total);
            let mut out = row(EstimatorKind::Gpr, n_t, est.entries(), n_t)?;
            out.lml = lml;
            out.theta = Some(theta);
            out.flags = flags.join(";");
            out.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
            rows.push((out, est));
        }

        if n_t != n_total {
            continue;
        }
        for kind in [EstimatorKind::Ls, EstimatorKind::Mmse, EstimatorKind::Omp, EstimatorKind::Amp] {
            if !cfg.runs(kind) {
                continue;
            }
            let t0 = Instant::now();
            let mut flags = Vec::new();
            let est = match kind {
                EstimatorKind::Ls => ls_estimate(&z, &omega, n_total),
                EstimatorKind::Mmse => mmse_isotropic(&obs, sh.prior.as_ref().unwrap(), n_r, n_total),
                EstimatorKind::Omp => omp_estimate(&obs, &omega, sh.dict.as_ref().unwrap(), &cfg.sparse).map(|(e, _)| e),
                _ => amp_estimate(&obs, &omega, sh.dict.as_ref().unwrap(), &cfg.sparse).map(|o| {
                    if o.diverged {
                        flags.push("diverged");
                    }
                    o.estimate
                }),
            };
            let est = est.unwrap_or_else(|e| {
                log::warn!("{} failed at snr {snr_db} dB, trial {r}: {e}", kind.name());
                flags.push("failed");
                ChannelMatrix::zeros(n_r, n_total)
            });
            let mut out = row(kind, n_t, est.entries(), n_t)?;
            out.flags = flags.join(";");
            out.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
            rows.push((out, est));
        }
    }
    Ok(TrialOutcome { channel: h, rows })
}

/// Learns θ, predicts every entry and reassembles `Ĥ`. Learning failures
/// fall back to the variance-matched start.
fn gpr_estimate(
    cfg: &ExperimentConfig,
    arrays: &ArrayPair,
    obs: &ObservationSet,
    omega: &crate::lattice::ActiveSet,
    seed: u64,
    n_r: usize,
    n_total: usize,
) -> (ChannelMatrix, HyperParams, Option<f64>, Vec<&'static str>) {
    let mut flags = Vec::new();
    let (theta, lml) = match optimize(obs, arrays, &cfg.learn, seed) {
        Ok(rep) => {
            if !rep.converged.iter().any(|&c| c) {
                flags.push("not_converged");
            }
            if !rep.escalations.is_empty() {
                flags.push("jitter");
            }
            (rep.best_theta, Some(rep.best_lml))
        }
        Err(e) => {
            log::warn!("hyperparameter learning failed ({e}); using the initial θ");
            flags.push("fallback");
            let space = cfg.learn.space(obs);
            (variance_matched_init(&space, obs, arrays, cfg.learn.init_variance, cfg.learn.init_frequencies), None)
        }
    };
    let grid = prediction_grid(n_r, n_total, PredictionMode::Full, omega);
    let est = GpModel::fit(&theta, obs, arrays)
        .ok()
        .and_then(|model| reconstruct(&model.mean(&grid), &grid, n_r, n_total).ok());
    let est = est.unwrap_or_else(|| {
        flags.push("gp_failed");
        ChannelMatrix::zeros(n_r, n_total)
    });
    (est, theta, lml, flags)
}

/// Per (estimator, SNR, budget) averages; NMSE is averaged linearly before
/// the dB conversion and rel-SE is the ratio of mean SE to mean genie SE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub estimator: String,
    pub snr_db: f64,
    pub n_t: usize,
    pub trials: usize,
    pub mean_nmse: f64,
    pub mean_nmse_db: Option<f64>,
    pub mean_se_bps_hz: f64,
    pub rel_se: Option<f64>,
    pub energy_ratio: f64,
    pub flagged: usize,
}

pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, u64, usize)> = Vec::new();
    let mut acc: std::collections::HashMap<(String, u64, usize), Vec<&ResultRow>> = Default::default();
    for r in rows {
        let key = (r.estimator.clone(), r.snr_db.to_bits(), r.n_t);
        if !acc.contains_key(&key) {
            order.push(key.clone());
        }
        acc.entry(key).or_default().push(r);
    }
    // genie SE per (SNR, trial): from genie rows, else recovered as se / rel_se
    let mut genie_trial: std::collections::BTreeMap<(u64, usize), f64> = Default::default();
    for r in rows.iter().filter(|r| r.estimator == EstimatorKind::Genie.name()) {
        genie_trial.insert((r.snr_db.to_bits(), r.trial), r.se_bps_hz);
    }
    for r in rows.iter().filter(|r| r.rel_se > 0.0) {
        genie_trial.entry((r.snr_db.to_bits(), r.trial)).or_insert(r.se_bps_hz / r.rel_se);
    }
    let mut genie_sum: std::collections::HashMap<u64, (f64, usize)> = Default::default();
    for ((snr, _), se) in genie_trial {
        let e = genie_sum.entry(snr).or_default();
        e.0 += se;
        e.1 += 1;
    }
    order
        .into_iter()
        .map(|key| {
            let group = &acc[&key];
            let n = group.len() as f64;
            let mean_nmse = group.iter().map(|r| r.nmse).sum::<f64>() / n;
            let mean_se = group.iter().map(|r| r.se_bps_hz).sum::<f64>() / n;
            let genie = genie_sum.get(&key.1).map(|&(s, c)| s / c as f64);
            let db = to_db(mean_nmse);
            SummaryRow {
                estimator: key.0.clone(),
                snr_db: f64::from_bits(key.1),
                n_t: key.2,
                trials: group.len(),
                mean_nmse,
                mean_nmse_db: db.is_finite().then_some(db),
                mean_se_bps_hz: mean_se,
                rel_se: genie.filter(|g| *g > 0.0).map(|g| mean_se / g),
                energy_ratio: group[0].energy_ratio,
                flagged: group.iter().filter(|r| !r.flags.is_empty()).count(),
            }
        })
        .collect()
}

pub fn write_rows_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| EvalError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| EvalError::Io(e.to_string()))
}

#[derive(Serialize)]
struct TimingRow<'a> {
    estimator: &'a str,
    snr_db: f64,
    n_t: usize,
    trial: usize,
    wall_ms: f64,
}

pub fn write_timings_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(TimingRow {
            estimator: &r.estimator,
            snr_db: r.snr_db,
            n_t: r.n_t,
            trial: r.trial,
            wall_ms: r.wall_ms,
        })
        .map_err(|e| EvalError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| EvalError::Io(e.to_string()))
}

pub fn read_rows_csv<R: std::io::Read>(input: R) -> Result<Vec<ResultRow>, EvalError> {
    let mut rd = csv::Reader::from_reader(input);
    rd.deserialize().map(|r| r.map_err(|e| EvalError::Io(e.to_string()))).collect()
}
