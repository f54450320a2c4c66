//! Skill scores: MSE, RMSE, pattern correlation, and the evaluation
//! pipelines built on them.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cn::{rollout, CnError, StepModel};
use crate::dem::{self, DemError, FloeSystem, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("series has zero variance{}", .floe.map(|f| format!(" (floe {f})")).unwrap_or_default())]
    DegenerateSeries { floe: Option<usize> },
    #[error("trajectories are misaligned: {0}")]
    Misaligned(String),
    #[error("horizons must be positive and strictly increasing")]
    BadHorizons,
    #[error(transparent)]
    Model(#[from] CnError),
    #[error(transparent)]
    Dem(#[from] DemError),
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    check_pair(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    mse(a, b).map(f64::sqrt)
}

/// Pearson correlation. Zero variance in either input is an error.
pub fn pcc(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    check_pair(a, b)?;
    if a.len() < 2 {
        return Err(MetricsError::DegenerateSeries { floe: None });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    // Relative threshold: a constant series carries only rounding noise.
    let tiny = |s: f64, m: f64| s <= (1e-13 * m.abs().max(1.0)).powi(2) * n;
    if tiny(saa, ma) || tiny(sbb, mb) {
        return Err(MetricsError::DegenerateSeries { floe: None });
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn check_aligned(pred: &Trajectory, truth: &Trajectory) -> Result<(), MetricsError> {
    if pred.n_floes() != truth.n_floes() {
        return Err(MetricsError::Misaligned(format!(
            "{} vs {} floes",
            pred.n_floes(),
            truth.n_floes()
        )));
    }
    if pred.len() != truth.len() {
        return Err(MetricsError::Misaligned(format!("{} vs {} states", pred.len(), truth.len())));
    }
    if (pred.dt - truth.dt).abs() > 1e-12 * truth.dt.abs() {
        return Err(MetricsError::Misaligned(format!("dt {} vs {}", pred.dt, truth.dt)));
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Each floe's position series correlated against the truth.
pub fn per_floe_pcc(pred: &Trajectory, truth: &Trajectory) -> Result<Vec<f64>, MetricsError> {
    check_aligned(pred, truth)?;
    (0..truth.n_floes())
        .map(|i| {
            pcc(&pred.position_series(i), &truth.position_series(i)).map_err(|e| match e {
                MetricsError::DegenerateSeries { .. } => MetricsError::DegenerateSeries { floe: Some(i) },
                other => other,
            })
        })
        .collect()
}

/// Per-step positional RMSE over floes, averaged uniformly over time.
///
/// `skip` leading states (the seeds of a rollout) are excluded.
pub fn simulation_rmse(pred: &Trajectory, truth: &Trajectory, skip: usize) -> Result<f64, MetricsError> {
    check_aligned(pred, truth)?;
    let steps = &pred.states[skip.min(pred.len())..];
    if steps.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut sum = 0.0;
    for (p, t) in steps.iter().zip(&truth.states[skip..]) {
        sum += rmse(&p.x, &t.x)?;
    }
    Ok(sum / steps.len() as f64)
}

/// Per-step positional RMSE series.
pub fn rmse_series(pred: &Trajectory, truth: &Trajectory) -> Result<Vec<f64>, MetricsError> {
    check_aligned(pred, truth)?;
    pred.states.iter().zip(&truth.states).map(|(p, t)| rmse(&p.x, &t.x)).collect()
}

/// Teacher-forced one-step errors pooled over every floe and every j >= 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneStepErrors {
    pub position_rmse: f64,
    pub velocity_rmse: f64,
}

pub fn one_step_errors(model: &dyn StepModel, truth: &Trajectory) -> Result<OneStepErrors, MetricsError> {
    one_step_errors_multi(model, std::slice::from_ref(truth))
}

/// [`one_step_errors`] pooled across several trajectories.
pub fn one_step_errors_multi(model: &dyn StepModel, truths: &[Trajectory]) -> Result<OneStepErrors, MetricsError> {
    let (mut sx, mut sv, mut n) = (0.0, 0.0, 0usize);
    for truth in truths {
        if truth.len() < 3 {
            continue;
        }
        // Replay models key off the time index, so they go one step at a time.
        let chunk = if model.time_dependent() { 1 } else { 256 };
        let mut j = 2;
        while j < truth.len() {
            let end = (j + chunk).min(truth.len());
            let hist: Vec<(&[f64], &[f64])> = (j..end)
                .map(|k| (truth.states[k - 2].x.as_slice(), truth.states[k - 1].x.as_slice()))
                .collect();
            let out = model.advance_batch(truth.states[j].time_index, &hist)?;
            for (k, adv) in (j..end).zip(out) {
                accumulate(&adv, &truth.states[k], &mut sx, &mut sv, &mut n);
            }
            j = end;
        }
    }
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(OneStepErrors {
        position_rmse: (sx / n as f64).sqrt(),
        velocity_rmse: (sv / n as f64).sqrt(),
    })
}

fn accumulate(adv: &crate::cn::Advance, s: &dem::SimState, sx: &mut f64, sv: &mut f64, n: &mut usize) {
    for i in 0..s.x.len() {
        *sx += (adv.x[i] - s.x[i]).powi(2);
        *sv += (adv.v[i] - s.v[i]).powi(2);
    }
    *n += s.x.len();
}

/// Velocity RMSE of copying the previous velocity forward.
pub fn persistence_velocity_rmse(truths: &[Trajectory]) -> Result<f64, MetricsError> {
    let (mut s, mut n) = (0.0, 0usize);
    for t in truths {
        for j in 2..t.len() {
            for (a, b) in t.states[j].v.iter().zip(&t.states[j - 1].v) {
                s += (a - b) * (a - b);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    Ok((s / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillReport {
    pub one_step_position_rmse: f64,
    pub one_step_velocity_rmse: f64,
    pub simulation_rmse: f64,
    pub pcc_per_floe: Vec<f64>,
    pub mean_pcc: f64,
    /// Steps evaluated in the free run.
    pub horizon: usize,
}

impl fmt::Display for SkillReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "one_step_position_rmse={:.9e}", self.one_step_position_rmse)?;
        writeln!(f, "one_step_velocity_rmse={:.9e}", self.one_step_velocity_rmse)?;
        writeln!(f, "simulation_rmse={:.9e}", self.simulation_rmse)?;
        writeln!(f, "mean_pcc={:.9}", self.mean_pcc)?;
        for (i, p) in self.pcc_per_floe.iter().enumerate() {
            writeln!(f, "pcc_floe_{i}={p:.9}")?;
        }
        writeln!(f, "horizon={}", self.horizon)
    }
}

/// Full report: one-step metrics against `truth`, free-run metrics of `pred`.
///
/// `pred` is expected to be a rollout seeded from the first two states of
/// `truth`; those seeds are excluded from the simulation RMSE.
pub fn evaluate(pred: &Trajectory, truth: &Trajectory, model: &dyn StepModel) -> Result<SkillReport, MetricsError> {
    check_aligned(pred, truth)?;
    let one = one_step_errors(model, truth)?;
    let pcc_per_floe = per_floe_pcc(pred, truth)?;
    let mean_pcc = pcc_per_floe.iter().sum::<f64>() / pcc_per_floe.len() as f64;
    Ok(SkillReport {
        one_step_position_rmse: one.position_rmse,
        one_step_velocity_rmse: one.velocity_rmse,
        simulation_rmse: simulation_rmse(pred, truth, 2.min(pred.len() - 1))?,
        pcc_per_floe,
        mean_pcc,
        horizon: pred.len() - 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon: usize,
    pub pcc: f64,
    pub simulation_rmse: f64,
}

/// Metrics of one free run truncated at each horizon (steps after t = 0).
pub fn horizon_sweep_on(
    model: &dyn StepModel,
    truth: &Trajectory,
    horizons: &[usize],
) -> Result<Vec<HorizonRow>, MetricsError> {
    if horizons.is_empty() || horizons[0] < 2 || horizons.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MetricsError::BadHorizons);
    }
    let max = *horizons.last().unwrap();
    if truth.len() < max + 1 {
        return Err(MetricsError::Misaligned(format!(
            "truth has {} states, horizon {max} needs {}",
            truth.len(),
            max + 1
        )));
    }
    let run = rollout(model, &truth.system, &truth.states[0], &truth.states[1], max - 1)?;
    horizons
        .iter()
        .map(|&h| {
            let (p, t) = (run.truncated(h + 1), truth.truncated(h + 1));
            let pccs = per_floe_pcc(&p, &t)?;
            Ok(HorizonRow {
                horizon: h,
                pcc: pccs.iter().sum::<f64>() / pccs.len() as f64,
                simulation_rmse: simulation_rmse(&p, &t, 2)?,
            })
        })
        .collect()
}

/// [`horizon_sweep_on`] against a fresh reference run from random initial
/// conditions.
pub fn horizon_sweep<R: Rng + ?Sized>(
    model: &dyn StepModel,
    system: &FloeSystem,
    horizons: &[usize],
    rng: &mut R,
) -> Result<Vec<HorizonRow>, MetricsError> {
    let max = horizons.last().copied().ok_or(MetricsError::BadHorizons)?;
    let init = dem::sample_initial_conditions(system, dem::DEFAULT_SPEED_RANGE, rng)?;
    let truth = dem::generate_trajectory(init, system, max, model.dt())?;
    horizon_sweep_on(model, &truth, horizons)
}
