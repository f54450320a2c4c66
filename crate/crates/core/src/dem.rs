//! Reference discrete-element simulator for disk floes on a line.
//!
//! Floes are indexed left to right and only touch their immediate neighbours
//! (or the stationary wall at either end). Contacts are Hookean penalty
//! springs; time integration is semi-implicit Euler: the velocity is advanced
//! with the force at the previous step, then the position with the new
//! velocity.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default Young's modulus of the floe material.
pub const DEFAULT_YOUNGS_MODULUS: f64 = 2.0e7;
/// Default time step.
pub const DEFAULT_DT: f64 = 1.0e-4;
/// Default areal density used to derive floe mass.
pub const DEFAULT_DENSITY: f64 = 1.0;
/// Largest transient overlap tolerated past a wall before a state is flagged.
pub const OVERLAP_TOLERANCE: f64 = 0.5;
/// Initial speed range for sampled floes.
pub const DEFAULT_SPEED_RANGE: (f64, f64) = (150.0, 200.0);

const MAX_PLACEMENT_ATTEMPTS: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DemError {
    #[error("invalid floe system: {0}")]
    InvalidSystem(String),
    #[error("ordering violated at step {step}: floe {left} at {x_left} is not left of floe {right} at {x_right}")]
    OrderingViolation {
        step: u64,
        left: usize,
        right: usize,
        x_left: f64,
        x_right: f64,
    },
    #[error("could not place floe {floe} without overlap after {attempts} attempts")]
    PackingFailure { floe: usize, attempts: usize },
    #[error("time step must be positive, got {0}")]
    InvalidTimeStep(f64),
    #[error("state has {got} floes, system has {expected}")]
    SizeMismatch { expected: usize, got: usize },
}

/// Static physical description of the floes and their container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloeSystem {
    radius: Vec<f64>,
    thickness: Vec<f64>,
    mass: Vec<f64>,
    density: f64,
    youngs_modulus: f64,
    domain_left: f64,
    domain_right: f64,
}

impl FloeSystem {
    /// Builds a system, deriving each mass as `density * pi * r^2 * h`.
    pub fn new(
        radius: Vec<f64>,
        thickness: Vec<f64>,
        density: f64,
        youngs_modulus: f64,
        domain_left: f64,
        domain_right: f64,
    ) -> Result<Self, DemError> {
        let invalid = |msg: String| Err(DemError::InvalidSystem(msg));
        if radius.is_empty() {
            return invalid("at least one floe is required".into());
        }
        if radius.len() != thickness.len() {
            return invalid(format!(
                "{} radii but {} thicknesses",
                radius.len(),
                thickness.len()
            ));
        }
        if let Some(r) = radius.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return invalid(format!("radius must be positive, got {r}"));
        }
        if let Some(h) = thickness.iter().find(|h| !(h.is_finite() && **h > 0.0)) {
            return invalid(format!("thickness must be positive, got {h}"));
        }
        if !(density.is_finite() && density > 0.0) {
            return invalid(format!("density must be positive, got {density}"));
        }
        if !(youngs_modulus.is_finite() && youngs_modulus > 0.0) {
            return invalid(format!("Young's modulus must be positive, got {youngs_modulus}"));
        }
        if !(domain_left.is_finite() && domain_right.is_finite() && domain_left < domain_right) {
            return invalid(format!("empty domain [{domain_left}, {domain_right}]"));
        }
        let packed: f64 = radius.iter().map(|r| 2.0 * r).sum();
        if packed >= domain_right - domain_left {
            return invalid(format!(
                "floes need {packed} of length but the domain is only {}",
                domain_right - domain_left
            ));
        }
        let mass = radius
            .iter()
            .zip(&thickness)
            .map(|(r, h)| density * std::f64::consts::PI * r * r * h)
            .collect();
        Ok(Self {
            radius,
            thickness,
            mass,
            density,
            youngs_modulus,
            domain_left,
            domain_right,
        })
    }

    /// `n` unit floes (radius = thickness = 1) with the default material.
    pub fn uniform(n: usize, domain_left: f64, domain_right: f64) -> Result<Self, DemError> {
        Self::new(
            vec![1.0; n],
            vec![1.0; n],
            DEFAULT_DENSITY,
            DEFAULT_YOUNGS_MODULUS,
            domain_left,
            domain_right,
        )
    }

    pub fn n_floes(&self) -> usize {
        self.radius.len()
    }

    pub fn radius(&self) -> &[f64] {
        &self.radius
    }

    pub fn thickness(&self) -> &[f64] {
        &self.thickness
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn density(&self) -> f64 {
        self.density
    }

    pub fn youngs_modulus(&self) -> f64 {
        self.youngs_modulus
    }

    pub fn domain_left(&self) -> f64 {
        self.domain_left
    }

    pub fn domain_right(&self) -> f64 {
        self.domain_right
    }

    pub fn domain_width(&self) -> f64 {
        self.domain_right - self.domain_left
    }
}

/// Positions and velocities of every floe at one time index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub time_index: u64,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl SimState {
    pub fn new(time_index: u64, x: Vec<f64>, v: Vec<f64>) -> Self {
        debug_assert_eq!(x.len(), v.len());
        Self { time_index, x, v }
    }

    pub fn n_floes(&self) -> usize {
        self.x.len()
    }

    /// First adjacent pair `(i, i + 1)` with `x[i] >= x[i + 1]`, if any.
    pub fn first_ordering_violation(&self) -> Option<usize> {
        self.x.windows(2).position(|w| !(w[0] < w[1]))
    }

    /// True when every position lies within the walls widened by [`OVERLAP_TOLERANCE`].
    pub fn within_domain(&self, system: &FloeSystem) -> bool {
        let lo = system.domain_left - OVERLAP_TOLERANCE;
        let hi = system.domain_right + OVERLAP_TOLERANCE;
        self.x.iter().all(|&x| x >= lo && x <= hi)
    }

    fn check_ordering(&self) -> Result<(), DemError> {
        match self.first_ordering_violation() {
            None => Ok(()),
            Some(i) => Err(DemError::OrderingViolation {
                step: self.time_index,
                left: i,
                right: i + 1,
                x_left: self.x[i],
                x_right: self.x[i + 1],
            }),
        }
    }
}

/// A DEM (or surrogate) run: the system, its time step, and every state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub system: FloeSystem,
    pub dt: f64,
    pub states: Vec<SimState>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn n_floes(&self) -> usize {
        self.system.n_floes()
    }

    /// Positions of floe `i` over time.
    pub fn position_series(&self, floe: usize) -> Vec<f64> {
        self.states.iter().map(|s| s.x[floe]).collect()
    }

    /// Number of states whose adjacent-floe ordering is broken.
    pub fn ordering_violations(&self) -> usize {
        self.states
            .iter()
            .filter(|s| s.first_ordering_violation().is_some())
            .count()
    }

    /// Keeps the first `len` states.
    pub fn truncated(&self, len: usize) -> Trajectory {
        Trajectory {
            system: self.system.clone(),
            dt: self.dt,
            states: self.states[..len.min(self.states.len())].to_vec(),
        }
    }
}

/// Signed surface gap between two disks; negative when they overlap.
pub fn overlap(x_i: f64, r_i: f64, x_j: f64, r_j: f64) -> f64 {
    (x_i - x_j).abs() - (r_i + r_j)
}

/// Hookean contact force exerted on floe `i` by floe `j`.
///
/// The stiffness is the harmonic-mean radius times the thinner floe's
/// thickness times `E`; the force always pushes `i` away from `j`.
pub fn contact_force_on_i(
    x_i: f64,
    r_i: f64,
    h_i: f64,
    x_j: f64,
    r_j: f64,
    h_j: f64,
    youngs_modulus: f64,
) -> f64 {
    let gap = overlap(x_i, r_i, x_j, r_j);
    if gap >= 0.0 {
        return 0.0;
    }
    let harmonic = 2.0 * r_i * r_j / (r_i + r_j);
    let magnitude = harmonic * h_i.min(h_j) * youngs_modulus * -gap;
    if x_i >= x_j {
        magnitude
    } else {
        -magnitude
    }
}

/// Contact force on floe `i` from a stationary wall.
///
/// The wall is the infinite-radius limit of a floe, so the harmonic-mean
/// radius becomes `2 r_i` and the thickness is the floe's own.
pub fn boundary_force(x_i: f64, r_i: f64, h_i: f64, wall_position: f64, youngs_modulus: f64) -> f64 {
    let gap = (x_i - wall_position).abs() - r_i;
    if gap >= 0.0 {
        return 0.0;
    }
    let magnitude = 2.0 * r_i * h_i * youngs_modulus * -gap;
    if x_i >= wall_position {
        magnitude
    } else {
        -magnitude
    }
}

/// Net contact force on each floe from its left and right neighbour.
pub fn net_forces(x: &[f64], system: &FloeSystem) -> Vec<f64> {
    let n = x.len();
    let (r, h, e) = (&system.radius, &system.thickness, system.youngs_modulus);
    let mut forces = vec![0.0; n];
    if n == 0 {
        return forces;
    }
    forces[0] += boundary_force(x[0], r[0], h[0], system.domain_left, e);
    forces[n - 1] += boundary_force(x[n - 1], r[n - 1], h[n - 1], system.domain_right, e);
    for i in 0..n - 1 {
        let j = i + 1;
        let f = contact_force_on_i(x[i], r[i], h[i], x[j], r[j], h[j], e);
        forces[i] += f;
        forces[j] -= f;
    }
    forces
}

/// Advances one semi-implicit Euler step.
pub fn step(state: &SimState, system: &FloeSystem, dt: f64) -> Result<SimState, DemError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DemError::InvalidTimeStep(dt));
    }
    if state.n_floes() != system.n_floes() {
        return Err(DemError::SizeMismatch {
            expected: system.n_floes(),
            got: state.n_floes(),
        });
    }
    let forces = net_forces(&state.x, system);
    let v: Vec<f64> = state
        .v
        .iter()
        .zip(&forces)
        .zip(&system.mass)
        .map(|((v, f), m)| v + f / m * dt)
        .collect();
    let x = state.x.iter().zip(&v).map(|(x, v)| x + v * dt).collect();
    let next = SimState::new(state.time_index + 1, x, v);
    next.check_ordering()?;
    Ok(next)
}

/// Next-step velocity implied by two consecutive positions.
///
/// Recovers `v_{t-1}` by finite difference and applies the contact force at
/// `x_{t-1}`; this is exactly the velocity the integrator would produce.
pub fn next_velocity_from_positions(
    x_prev2: &[f64],
    x_prev: &[f64],
    system: &FloeSystem,
    dt: f64,
) -> Vec<f64> {
    let forces = net_forces(x_prev, system);
    x_prev2
        .iter()
        .zip(x_prev)
        .zip(&forces)
        .zip(&system.mass)
        .map(|(((a, b), f), m)| (b - a) / dt + f / m * dt)
        .collect()
}

/// Random non-overlapping, sorted placement with speeds drawn from
/// `speed_range` and a random direction.
///
/// Floes are placed one at a time by rejection against those already placed.
pub fn sample_initial_conditions<R: Rng + ?Sized>(
    system: &FloeSystem,
    speed_range: (f64, f64),
    rng: &mut R,
) -> Result<SimState, DemError> {
    let n = system.n_floes();
    // Placed (position, radius) pairs.
    let mut placed: Vec<(f64, f64)> = Vec::with_capacity(n);
    for floe in 0..n {
        let r = system.radius[floe];
        let lo = system.domain_left + r;
        let hi = system.domain_right - r;
        let mut attempts = 0;
        loop {
            if attempts == MAX_PLACEMENT_ATTEMPTS {
                return Err(DemError::PackingFailure { floe, attempts });
            }
            attempts += 1;
            let x = rng.gen_range(lo..=hi);
            if placed.iter().all(|&(xo, ro)| overlap(x, r, xo, ro) >= 0.0) {
                placed.push((x, r));
                break;
            }
        }
    }
    placed.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut x: Vec<f64> = placed.iter().map(|p| p.0).collect();
    // Exact duplicates are possible in principle with zero-size gaps; nudge apart.
    for i in 1..n {
        if x[i] <= x[i - 1] {
            x[i] = f64::from_bits(x[i - 1].to_bits() + 1);
        }
    }
    let (vmin, vmax) = speed_range;
    let v = (0..n)
        .map(|_| {
            let speed = if vmax > vmin { rng.gen_range(vmin..=vmax) } else { vmin };
            if rng.gen_bool(0.5) {
                speed
            } else {
                -speed
            }
        })
        .collect();
    Ok(SimState::new(0, x, v))
}

/// Runs `n_steps` steps from `init`, returning `n_steps + 1` states.
pub fn generate_trajectory(
    init: SimState,
    system: &FloeSystem,
    n_steps: usize,
    dt: f64,
) -> Result<Trajectory, DemError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DemError::InvalidTimeStep(dt));
    }
    init.check_ordering()?;
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(init);
    for _ in 0..n_steps {
        let next = step(states.last().expect("nonempty"), system, dt)?;
        states.push(next);
    }
    Ok(Trajectory {
        system: system.clone(),
        dt,
        states,
    })
}

/// Counts steps at which a new floe-floe or floe-wall contact begins.
pub fn count_collisions(traj: &Trajectory) -> usize {
    let sys = &traj.system;
    let contacts = |x: &[f64]| -> Vec<bool> {
        let n = x.len();
        let r = sys.radius();
        let mut c = Vec::with_capacity(n + 1);
        c.push(x[0] - sys.domain_left() < r[0]);
        for i in 0..n - 1 {
            c.push(overlap(x[i], r[i], x[i + 1], r[i + 1]) < 0.0);
        }
        c.push(sys.domain_right() - x[n - 1] < r[n - 1]);
        c
    };
    let mut count = 0;
    let mut prev = contacts(&traj.states[0].x);
    for s in &traj.states[1..] {
        let cur = contacts(&s.x);
        count += cur.iter().zip(&prev).filter(|(c, p)| **c && !**p).count();
        prev = cur;
    }
    count
}
