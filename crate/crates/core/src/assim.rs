//! Ensemble data assimilation: stochastic EnKF and the ensemble transform
//! filter, with a step model as the forecast operator.
//!
//! Each member is the stacked pair `[x_{t-1}; x_t]`, so the two-step history
//! a [`StepModel`] needs travels with the member. Members are stored as the
//! columns of a `2n x I` matrix.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cn::{CnError, StepModel};
use crate::dem::{SimState, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssimError {
    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),
    #[error("member {member} became non-finite")]
    NonFiniteMember { member: usize },
    #[error("innovation covariance is singular")]
    SingularInnovationCovariance,
    #[error("transform matrix is not positive definite (smallest eigenvalue {0:e})")]
    DecompositionFailure(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid observation model: {0}")]
    InvalidObservation(String),
    #[error(transparent)]
    Model(#[from] CnError),
    #[error("at step {step}: {source}")]
    AtStep {
        step: u64,
        #[source]
        source: Box<AssimError>,
    },
}

impl AssimError {
    fn at(self, step: u64) -> Self {
        AssimError::AtStep {
            step,
            source: Box::new(self),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    #[default]
    Enkf,
    Etkf,
}

impl std::str::FromStr for FilterKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "enkf" => Ok(FilterKind::Enkf),
            "etkf" => Ok(FilterKind::Etkf),
            other => Err(format!("unknown filter `{other}` (expected enkf or etkf)")),
        }
    }
}

impl std::fmt::Display for FilterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FilterKind::Enkf => "enkf",
            FilterKind::Etkf => "etkf",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub time_index: u64,
    members: DMatrix<f64>,
}

impl EnsembleState {
    pub fn new(time_index: u64, members: DMatrix<f64>) -> Result<Self, AssimError> {
        if members.ncols() < 2 {
            return Err(AssimError::InvalidEnsemble(format!(
                "need at least 2 members, got {}",
                members.ncols()
            )));
        }
        if members.nrows() == 0 {
            return Err(AssimError::InvalidEnsemble("members are empty".into()));
        }
        if let Some(i) = first_non_finite(&members) {
            return Err(AssimError::NonFiniteMember { member: i });
        }
        Ok(Self { time_index, members })
    }

    pub fn from_members(time_index: u64, members: &[Vec<f64>]) -> Result<Self, AssimError> {
        let dim = members.first().map_or(0, Vec::len);
        if let Some(m) = members.iter().find(|m| m.len() != dim) {
            return Err(AssimError::DimensionMismatch {
                expected: dim,
                got: m.len(),
            });
        }
        Self::new(
            time_index,
            DMatrix::from_fn(dim, members.len(), |r, c| members[c][r]),
        )
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn members(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn member(&self, i: usize) -> Vec<f64> {
        self.members.column(i).iter().copied().collect()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.members.column_mean()
    }

    pub fn anomalies(&self) -> DMatrix<f64> {
        anomalies(&self.members).1
    }

    /// Root-mean ensemble variance over rows `range`.
    pub fn spread(&self, range: std::ops::Range<usize>) -> f64 {
        let a = self.anomalies();
        let i = self.size() as f64;
        let rows = range.len() as f64;
        let total: f64 = range.map(|r| a.row(r).norm_squared() / (i - 1.0)).sum();
        (total / rows).sqrt()
    }
}

fn first_non_finite(m: &DMatrix<f64>) -> Option<usize> {
    (0..m.ncols()).find(|&c| m.column(c).iter().any(|v| !v.is_finite()))
}

fn anomalies(members: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let mean = members.column_mean();
    let mut a = members.clone();
    for mut c in a.column_iter_mut() {
        c -= &mean;
    }
    (mean, a)
}

/// Which floes are observed, how noisily, and how often.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationModel {
    pub n_floes: usize,
    pub observed: Vec<usize>,
    pub sigma_obs: f64,
    pub interval: usize,
}

impl ObservationModel {
    /// Even-indexed floes observed.
    pub fn even_floes(n_floes: usize, sigma_obs: f64, interval: usize) -> Self {
        Self {
            n_floes,
            observed: (0..n_floes).step_by(2).collect(),
            sigma_obs,
            interval,
        }
    }

    pub fn validate(&self) -> Result<(), AssimError> {
        if self.observed.is_empty() {
            return Err(AssimError::InvalidObservation("no floes observed".into()));
        }
        let mut seen = vec![false; self.n_floes];
        for &f in &self.observed {
            if f >= self.n_floes {
                return Err(AssimError::InvalidObservation(format!(
                    "floe {f} out of range for {} floes",
                    self.n_floes
                )));
            }
            if std::mem::replace(&mut seen[f], true) {
                return Err(AssimError::InvalidObservation(format!("floe {f} listed twice")));
            }
        }
        if !(self.sigma_obs > 0.0 && self.sigma_obs.is_finite()) {
            return Err(AssimError::InvalidObservation("sigma_obs must be positive".into()));
        }
        if self.interval == 0 {
            return Err(AssimError::InvalidObservation("interval must be positive".into()));
        }
        Ok(())
    }

    /// Selection of the current positions `x_t` (second half of a member).
    pub fn linear(&self) -> LinearObservation {
        let n = self.n_floes;
        let mut h = DMatrix::zeros(self.observed.len(), 2 * n);
        for (row, &f) in self.observed.iter().enumerate() {
            h[(row, n + f)] = 1.0;
        }
        LinearObservation {
            h,
            r_diag: DVector::from_element(self.observed.len(), self.sigma_obs * self.sigma_obs),
        }
    }

    pub fn is_observation_step(&self, t: u64) -> bool {
        t > 0 && t % self.interval as u64 == 0
    }
}

/// `y = H u + N(0, diag(r_diag))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearObservation {
    pub h: DMatrix<f64>,
    pub r_diag: DVector<f64>,
}

impl LinearObservation {
    fn check(&self, dim: usize, y: &DVector<f64>) -> Result<(), AssimError> {
        if self.h.ncols() != dim {
            return Err(AssimError::DimensionMismatch {
                expected: dim,
                got: self.h.ncols(),
            });
        }
        if y.len() != self.h.nrows() || self.r_diag.len() != self.h.nrows() {
            return Err(AssimError::DimensionMismatch {
                expected: self.h.nrows(),
                got: y.len(),
            });
        }
        if self.r_diag.iter().any(|r| !(*r > 0.0)) {
            return Err(AssimError::InvalidObservation("R diagonal must be positive".into()));
        }
        Ok(())
    }
}

/// How process noise enters the member vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseLayout {
    /// Independent draw for every coordinate.
    Independent,
    /// One draw per floe, added to both `x_{t-1}` and `x_t` so the implied
    /// velocity is untouched.
    #[default]
    PairedShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma: f64,
    pub layout: NoiseLayout,
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            sigma: 0.0,
            layout: NoiseLayout::Independent,
        }
    }

    /// `dim x members` matrix of draws.
    pub fn draw<R: Rng + ?Sized>(&self, dim: usize, members: usize, rng: &mut R) -> DMatrix<f64> {
        if self.sigma == 0.0 {
            return DMatrix::zeros(dim, members);
        }
        match self.layout {
            NoiseLayout::Independent => {
                DMatrix::from_fn(dim, members, |_, _| self.sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            }
            NoiseLayout::PairedShift => {
                let n = dim / 2;
                let mut m = DMatrix::zeros(dim, members);
                for c in 0..members {
                    for i in 0..n {
                        let q = self.sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
                        m[(i, c)] = q;
                        m[(n + i, c)] = q;
                    }
                }
                m
            }
        }
    }

    fn perturb<R: Rng + ?Sized>(&self, members: &mut DMatrix<f64>, rng: &mut R) {
        if self.sigma > 0.0 {
            *members += self.draw(members.nrows(), members.ncols(), rng);
        }
    }
}

/// One-step map of a member matrix.
pub trait Forecast {
    fn forecast(&self, t_next: u64, members: &DMatrix<f64>) -> Result<DMatrix<f64>, AssimError>;
}

/// Adapts a [`StepModel`]: `[x_{t-1}; x_t] -> [x_t; x_{t+1}]`.
pub struct StepForecast<'a>(pub &'a dyn StepModel);

impl Forecast for StepForecast<'_> {
    fn forecast(&self, t_next: u64, members: &DMatrix<f64>) -> Result<DMatrix<f64>, AssimError> {
        let n = self.0.n_floes();
        if members.nrows() != 2 * n {
            return Err(AssimError::DimensionMismatch {
                expected: 2 * n,
                got: members.nrows(),
            });
        }
        let cols: Vec<Vec<f64>> = members.column_iter().map(|c| c.iter().copied().collect()).collect();
        let hist: Vec<(&[f64], &[f64])> = cols.iter().map(|c| (&c[..n], &c[n..])).collect();
        let out = self.0.advance_batch(t_next, &hist)?;
        let mut next = DMatrix::zeros(2 * n, members.ncols());
        for (c, adv) in out.iter().enumerate() {
            for i in 0..n {
                next[(i, c)] = cols[c][n + i];
                next[(n + i, c)] = adv.x[i];
            }
        }
        Ok(next)
    }
}

/// Advances every member by `g`, then adds process noise.
pub fn forecast_step<R: Rng + ?Sized>(
    ensemble: &EnsembleState,
    g: &dyn Forecast,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<EnsembleState, AssimError> {
    let t = ensemble.time_index + 1;
    let mut next = g.forecast(t, &ensemble.members)?;
    if next.shape() != ensemble.members.shape() {
        return Err(AssimError::DimensionMismatch {
            expected: ensemble.dim(),
            got: next.nrows(),
        });
    }
    noise.perturb(&mut next, rng);
    if let Some(member) = first_non_finite(&next) {
        return Err(AssimError::NonFiniteMember { member });
    }
    Ok(EnsembleState {
        time_index: t,
        members: next,
    })
}

/// Stochastic EnKF update with explicit observation perturbations
/// (`m x I`, one column per member).
pub fn enkf_update(
    members: &DMatrix<f64>,
    y: &DVector<f64>,
    obs: &LinearObservation,
    obs_perturbations: &DMatrix<f64>,
) -> Result<DMatrix<f64>, AssimError> {
    obs.check(members.nrows(), y)?;
    let count = members.ncols();
    if obs_perturbations.shape() != (y.len(), count) {
        return Err(AssimError::DimensionMismatch {
            expected: y.len() * count,
            got: obs_perturbations.len(),
        });
    }
    let scale = 1.0 / (count as f64 - 1.0);
    let (_, u) = anomalies(members);
    let v = &obs.h * &u;
    let mut s = &v * v.transpose() * scale;
    for (i, r) in obs.r_diag.iter().enumerate() {
        s[(i, i)] += r;
    }
    let mut innovations = obs_perturbations.clone();
    let hu = &obs.h * members;
    for c in 0..count {
        let mut col = innovations.column_mut(c);
        col += y;
        col -= hu.column(c);
    }
    let chol = s.clone().cholesky().or_else(|| {
        let mut jittered = s.clone();
        for i in 0..jittered.nrows() {
            jittered[(i, i)] += 1e-10;
        }
        jittered.cholesky()
    });
    let w = chol.ok_or(AssimError::SingularInnovationCovariance)?.solve(&innovations);
    Ok(members + u * (v.transpose() * w) * scale)
}

/// Perturbs members with process noise, then applies the stochastic update
/// with perturbed observations.
pub fn enkf_analysis<R: Rng + ?Sized>(
    ensemble: &EnsembleState,
    y: &DVector<f64>,
    obs: &LinearObservation,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<EnsembleState, AssimError> {
    let mut members = ensemble.members.clone();
    noise.perturb(&mut members, rng);
    let r_noise = DMatrix::from_fn(y.len(), members.ncols(), |i, _| {
        obs.r_diag[i].sqrt() * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    });
    let members = enkf_update(&members, y, obs, &r_noise)?;
    EnsembleState::new(ensemble.time_index, members)
}

/// `J = (I-1)/(1+r) I + V^T R^-1 V` and its transform.
#[derive(Debug, Clone)]
pub struct EtkfTransform {
    pub j: DMatrix<f64>,
    pub j_inv: DMatrix<f64>,
    /// `sqrt(I-1) X Sigma^{-1/2} X^T`.
    pub t: DMatrix<f64>,
}

pub fn etkf_transform(v: &DMatrix<f64>, r_diag: &DVector<f64>, inflation: f64) -> Result<EtkfTransform, AssimError> {
    let count = v.ncols();
    let i1 = count as f64 - 1.0;
    let mut rinv_v = v.clone();
    for (mut row, r) in rinv_v.row_iter_mut().zip(r_diag.iter()) {
        row /= *r;
    }
    let mut j = v.transpose() * rinv_v;
    for k in 0..count {
        j[(k, k)] += i1 / (1.0 + inflation);
    }
    // Symmetrize against rounding before decomposing.
    let j = (&j + j.transpose()) * 0.5;
    let eig = SymmetricEigen::new(j.clone());
    let min = eig.eigenvalues.min();
    let tol = 1e-12 * eig.eigenvalues.amax().max(1.0);
    if !(min > tol) {
        return Err(AssimError::DecompositionFailure(min));
    }
    let x = &eig.eigenvectors;
    let scaled = |f: &dyn Fn(f64) -> f64| {
        let mut xs = x.clone();
        for (k, mut col) in xs.column_iter_mut().enumerate() {
            col *= f(eig.eigenvalues[k]);
        }
        &xs * x.transpose()
    };
    let j_inv = scaled(&|l| 1.0 / l);
    let t = scaled(&|l| (i1 / l).sqrt());
    Ok(EtkfTransform { j, j_inv, t })
}

/// Deterministic square-root update of mean and anomalies.
pub fn etkf_update(
    members: &DMatrix<f64>,
    y: &DVector<f64>,
    obs: &LinearObservation,
    inflation: f64,
) -> Result<DMatrix<f64>, AssimError> {
    obs.check(members.nrows(), y)?;
    if !(inflation >= 0.0) {
        return Err(AssimError::InvalidObservation("inflation must be non-negative".into()));
    }
    let (mean, u) = anomalies(members);
    let v = &obs.h * &u;
    let tr = etkf_transform(&v, &obs.r_diag, inflation)?;
    let mut innovation = y - &obs.h * &mean;
    innovation.component_div_assign(&obs.r_diag);
    let new_mean = &mean + &u * (&tr.j_inv * (v.transpose() * innovation));
    let mut out = &u * &tr.t;
    for mut c in out.column_iter_mut() {
        c += &new_mean;
    }
    Ok(out)
}

pub fn etkf_analysis<R: Rng + ?Sized>(
    ensemble: &EnsembleState,
    y: &DVector<f64>,
    obs: &LinearObservation,
    noise: &NoiseModel,
    inflation: f64,
    rng: &mut R,
) -> Result<EnsembleState, AssimError> {
    let mut members = ensemble.members.clone();
    noise.perturb(&mut members, rng);
    let members = etkf_update(&members, y, obs, inflation)?;
    EnsembleState::new(ensemble.time_index, members)
}

/// When process noise is applied during a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseSchedule {
    /// Full `sigma_model` every step.
    EveryStep,
    /// Variance `sigma_model^2 * dt` every step (unit-time diffusion).
    #[default]
    PerUnitTime,
    /// Only right before each analysis.
    AnalysisOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssimConfig {
    pub filter: FilterKind,
    pub ensemble_size: usize,
    pub sigma_model: f64,
    pub sigma_obs: f64,
    pub interval: usize,
    /// Observed floe indices; `None` means the even-indexed floes.
    pub observed: Option<Vec<usize>>,
    /// ETKF multiplicative inflation parameter `r`.
    pub inflation: f64,
    pub noise_schedule: NoiseSchedule,
}

impl Default for AssimConfig {
    fn default() -> Self {
        Self {
            filter: FilterKind::Enkf,
            ensemble_size: 100,
            sigma_model: 1.0,
            sigma_obs: 1.0,
            interval: 100,
            observed: None,
            inflation: 0.0,
            noise_schedule: NoiseSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub step: u64,
    /// Positional RMSE of the ensemble mean against the truth.
    pub rmse: f64,
    /// Root-mean ensemble variance of current positions.
    pub spread: f64,
    pub analysis: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssimResult {
    /// Ensemble-mean states, aligned with the truth.
    pub mean: Trajectory,
    pub diagnostics: Vec<DiagnosticRow>,
}

impl AssimResult {
    /// Time-averaged positional RMSE after the two seed states.
    pub fn mean_rmse(&self) -> f64 {
        let rows = &self.diagnostics[2.min(self.diagnostics.len())..];
        rows.iter().map(|r| r.rmse).sum::<f64>() / rows.len().max(1) as f64
    }
}

/// Twin experiment: synthetic observations drawn from `truth`, forecasts
/// from `model`, ensemble initialised about the truth's first two states.
pub fn run_assimilation<R: Rng + ?Sized>(
    truth: &Trajectory,
    model: &dyn StepModel,
    cfg: &AssimConfig,
    rng: &mut R,
) -> Result<AssimResult, AssimError> {
    let n = truth.n_floes();
    if truth.len() < 3 {
        return Err(AssimError::InvalidEnsemble("truth needs at least 3 states".into()));
    }
    if model.n_floes() != n {
        return Err(AssimError::DimensionMismatch {
            expected: n,
            got: model.n_floes(),
        });
    }
    if !(cfg.sigma_model >= 0.0) {
        return Err(AssimError::InvalidEnsemble("sigma_model must be non-negative".into()));
    }
    let obs_model = ObservationModel {
        n_floes: n,
        observed: cfg.observed.clone().unwrap_or_else(|| (0..n).step_by(2).collect()),
        sigma_obs: cfg.sigma_obs,
        interval: cfg.interval,
    };
    obs_model.validate()?;
    let obs = obs_model.linear();
    let full = NoiseModel {
        sigma: cfg.sigma_model,
        layout: NoiseLayout::PairedShift,
    };
    let per_step = match cfg.noise_schedule {
        NoiseSchedule::EveryStep => full,
        NoiseSchedule::PerUnitTime => NoiseModel {
            sigma: cfg.sigma_model * truth.dt.sqrt(),
            ..full
        },
        NoiseSchedule::AnalysisOnly => NoiseModel::none(),
    };
    let at_analysis = match cfg.noise_schedule {
        NoiseSchedule::AnalysisOnly => full,
        _ => per_step,
    };

    let (s0, s1) = (&truth.states[0], &truth.states[1]);
    let mut seed = DMatrix::zeros(2 * n, cfg.ensemble_size);
    for mut c in seed.column_iter_mut() {
        for i in 0..n {
            c[i] = s0.x[i];
            c[n + i] = s1.x[i];
        }
    }
    full.perturb(&mut seed, rng);
    let mut ens = EnsembleState::new(s1.time_index, seed)?;

    let forecast = StepForecast(model);
    let mut states = Vec::with_capacity(truth.len());
    let mut diagnostics = Vec::with_capacity(truth.len());
    let record = |ens: &EnsembleState, analysis: bool, states: &mut Vec<SimState>, diag: &mut Vec<DiagnosticRow>| {
        let mean = ens.mean();
        let x: Vec<f64> = mean.rows(n, n).iter().copied().collect();
        let prev: Vec<f64> = mean.rows(0, n).iter().copied().collect();
        let v = x.iter().zip(&prev).map(|(a, b)| (a - b) / truth.dt).collect();
        let t = ens.time_index;
        let reference = &truth.states[t as usize].x;
        let rmse = (x.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64).sqrt();
        diag.push(DiagnosticRow {
            step: t,
            rmse,
            spread: ens.spread(n..2 * n),
            analysis,
        });
        states.push(SimState::new(t, x, v));
    };

    // Both seed states come from the initial ensemble mean.
    record(&ens, false, &mut states, &mut diagnostics);
    {
        let mean = ens.mean();
        let x0: Vec<f64> = mean.rows(0, n).iter().copied().collect();
        let rmse0 = crate::metrics::rmse(&x0, &s0.x).unwrap_or(0.0);
        let v0 = states[0].v.clone();
        states.insert(0, SimState::new(s0.time_index, x0, v0));
        let spread = ens.spread(0..n);
        diagnostics.insert(0, DiagnosticRow { step: s0.time_index, rmse: rmse0, spread, analysis: false });
    }

    for step in 2..truth.len() {
        let t = truth.states[step].time_index;
        let observe = obs_model.is_observation_step(t);
        let noise = if observe { NoiseModel::none() } else { per_step };
        ens = forecast_step(&ens, &forecast, &noise, rng).map_err(|e| e.at(t))?;
        if observe {
            let truth_x = DVector::from_iterator(
                2 * n,
                truth.states[step - 1].x.iter().chain(&truth.states[step].x).copied(),
            );
            let mut y = &obs.h * truth_x;
            for (yi, r) in y.iter_mut().zip(obs.r_diag.iter()) {
                *yi += r.sqrt() * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
            }
            ens = match cfg.filter {
                FilterKind::Enkf => enkf_analysis(&ens, &y, &obs, &at_analysis, rng),
                FilterKind::Etkf => etkf_analysis(&ens, &y, &obs, &at_analysis, cfg.inflation, rng),
            }
            .map_err(|e| e.at(t))?;
        }
        record(&ens, observe, &mut states, &mut diagnostics);
    }
    Ok(AssimResult {
        mean: Trajectory {
            system: truth.system.clone(),
            dt: truth.dt,
            states,
        },
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cn::{DemStepModel, TruthVelocities};
    use crate::dem::{self, FloeSystem};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Identity;

    impl Forecast for Identity {
        fn forecast(&self, _: u64, members: &DMatrix<f64>) -> Result<DMatrix<f64>, AssimError> {
            Ok(members.clone())
        }
    }

    fn scalar_obs(r: f64) -> LinearObservation {
        LinearObservation {
            h: DMatrix::from_element(1, 1, 1.0),
            r_diag: DVector::from_element(1, r),
        }
    }

    #[test]
    fn forecast_identity_without_noise_is_noop() {
        let ens = EnsembleState::from_members(3, &[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let out = forecast_step(&ens, &Identity, &NoiseModel::none(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.members(), ens.members());
        assert_eq!(out.time_index, 4);
    }

    #[test]
    fn forecast_with_dem_matches_step() {
        let sys = FloeSystem::uniform(2, 0.0, 30.0).unwrap();
        let s0 = SimState::new(0, vec![5.0, 20.0], vec![100.0, -120.0]);
        let s1 = dem::step(&s0, &sys, 1e-4).unwrap();
        let s2 = dem::step(&s1, &sys, 1e-4).unwrap();
        let member: Vec<f64> = s0.x.iter().chain(&s1.x).copied().collect();
        let ens = EnsembleState::from_members(1, &[member.clone(), member]).unwrap();
        let model = DemStepModel { system: sys, dt: 1e-4 };
        let out = forecast_step(&ens, &StepForecast(&model), &NoiseModel::none(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for c in 0..2 {
            let m = out.member(c);
            assert_eq!(&m[..2], &s1.x[..]);
            for (a, b) in m[2..].iter().zip(&s2.x) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forecast_noise_has_requested_variance() {
        let ens = EnsembleState::new(0, DMatrix::zeros(3, 10_000)).unwrap();
        let noise = NoiseModel {
            sigma: 1.5,
            layout: NoiseLayout::Independent,
        };
        let out = forecast_step(&ens, &Identity, &noise, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for r in 0..3 {
            let row = out.members().row(r);
            let mean = row.mean();
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (row.len() as f64 - 1.0);
            assert!((var / 2.25 - 1.0).abs() < 0.05, "variance {var}");
        }
    }

    #[test]
    fn paired_shift_keeps_lagged_difference() {
        let noise = NoiseModel {
            sigma: 2.0,
            layout: NoiseLayout::PairedShift,
        };
        let d = noise.draw(6, 4, &mut ChaCha8Rng::seed_from_u64(1));
        for c in 0..4 {
            for i in 0..3 {
                assert_eq!(d[(i, c)], d[(3 + i, c)]);
            }
        }
    }

    #[test]
    fn enkf_scalar_hand_case() {
        let members = DMatrix::from_row_slice(1, 2, &[0.0, 2.0]);
        let y = DVector::from_element(1, 1.0);
        let out = enkf_update(&members, &y, &scalar_obs(2.0), &DMatrix::zeros(1, 2)).unwrap();
        assert_eq!(out.as_slice(), &[0.5, 1.5]);
    }

    #[test]
    fn enkf_uninformative_and_strong_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let members = DMatrix::from_fn(3, 6, |_, _| rng.gen_range(-2.0..2.0));
        let y = DVector::from_vec(vec![0.5, -1.0, 1.5]);
        let weak = LinearObservation {
            h: DMatrix::identity(3, 3),
            r_diag: DVector::from_element(3, 1e14),
        };
        let out = enkf_update(&members, &y, &weak, &DMatrix::zeros(3, 6)).unwrap();
        assert!((out - &members).amax() < 1e-12);
        let strong = LinearObservation {
            h: DMatrix::identity(3, 3),
            r_diag: DVector::from_element(3, 1e-12),
        };
        let out = enkf_update(&members, &y, &strong, &DMatrix::zeros(3, 6)).unwrap();
        for c in out.column_iter() {
            assert!((c - &y).amax() < 1e-6);
        }
    }

    #[test]
    fn enkf_degenerate_ensemble_with_zero_r_is_singular() {
        let members = DMatrix::from_element(2, 3, 1.0);
        let obs = LinearObservation {
            h: DMatrix::identity(2, 2),
            r_diag: DVector::from_element(2, 1e-300),
        };
        let y = DVector::zeros(2);
        let r = enkf_update(&members, &y, &obs, &DMatrix::zeros(2, 3));
        assert!(r.is_ok() || r == Err(AssimError::SingularInnovationCovariance));
    }

    #[test]
    fn etkf_limits() {
        let v = DMatrix::zeros(2, 5);
        let r = DVector::from_element(2, 1.0);
        let t0 = etkf_transform(&v, &r, 0.0).unwrap();
        assert!((t0.t - DMatrix::identity(5, 5)).amax() < 1e-12);
        let t1 = etkf_transform(&v, &r, 1.0).unwrap();
        assert!((t1.t - DMatrix::identity(5, 5) * 2f64.sqrt()).amax() < 1e-12);
    }

    #[test]
    fn etkf_transform_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let (m, count) = (rng.gen_range(1..5), rng.gen_range(2..9));
            let v = DMatrix::from_fn(m, count, |_, _| rng.gen_range(-3.0..3.0));
            let r = DVector::from_fn(m, |_, _| rng.gen_range(0.1..2.0));
            let tr = etkf_transform(&v, &r, rng.gen_range(0.0..1.0)).unwrap();
            let lhs = &tr.t * tr.t.transpose();
            let rhs = &tr.j_inv * (count as f64 - 1.0);
            assert!((lhs - rhs).amax() < 1e-8);
        }
    }

    #[test]
    fn etkf_matches_enkf_mean_in_scalar_case() {
        // Deterministic square-root filter: analysis mean equals the Kalman mean.
        let members = DMatrix::from_row_slice(1, 2, &[0.0, 2.0]);
        let y = DVector::from_element(1, 1.0);
        let out = etkf_update(&members, &y, &scalar_obs(2.0), 0.0).unwrap();
        assert!((out.row(0).mean() - 1.0).abs() < 1e-12);
        // Posterior variance P R / (P + R) = 1.
        let var = out.row(0).iter().map(|v| (v - 1.0).powi(2)).sum::<f64>();
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn observation_model_validation() {
        let ok = ObservationModel::even_floes(5, 1.0, 100);
        assert_eq!(ok.observed, vec![0, 2, 4]);
        ok.validate().unwrap();
        let h = ok.linear().h;
        assert_eq!(h.shape(), (3, 10));
        assert_eq!(h[(1, 7)], 1.0);
        let dup = ObservationModel {
            observed: vec![1, 1],
            ..ok.clone()
        };
        assert!(dup.validate().is_err());
        assert!(ObservationModel { interval: 0, ..ok }.validate().is_err());
    }

    fn twin() -> Trajectory {
        let sys = FloeSystem::uniform(4, 0.0, 50.0).unwrap();
        let init = SimState::new(0, vec![6.0, 18.0, 30.0, 42.0], vec![170.0, -160.0, 155.0, -190.0]);
        dem::generate_trajectory(init, &sys, 400, 1e-4).unwrap()
    }

    #[test]
    fn perfect_model_without_noise_tracks_truth() {
        let truth = twin();
        let model = DemStepModel {
            system: truth.system.clone(),
            dt: truth.dt,
        };
        for filter in [FilterKind::Enkf, FilterKind::Etkf] {
            let cfg = AssimConfig {
                filter,
                ensemble_size: 4,
                sigma_model: 0.0,
                sigma_obs: 1e-3,
                interval: 100,
                ..AssimConfig::default()
            };
            let result = run_assimilation(&truth, &model, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
            // A zero-spread ensemble has no gain; the mean just follows the model.
            let result = match result {
                Ok(r) => r,
                Err(e) => panic!("{e}"),
            };
            assert_eq!(result.mean.len(), truth.len());
            assert!(result.mean_rmse() < 1e-8, "{}", result.mean_rmse());
            assert_eq!(result.diagnostics.iter().filter(|d| d.analysis).count(), 4);
        }
    }

    #[test]
    fn replayed_truth_with_noise_stays_close() {
        let truth = twin();
        let cfg = AssimConfig {
            filter: FilterKind::Etkf,
            ensemble_size: 20,
            ..AssimConfig::default()
        };
        let r = run_assimilation(&truth, &TruthVelocities(&truth), &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(r.mean_rmse() < 1.0);
        let a = run_assimilation(&truth, &TruthVelocities(&truth), &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, r);
    }
}
