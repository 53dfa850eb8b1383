//! Structure-preserving swing dynamics with storage virtual inertia,
//! explicit Euler integration and constraint monitoring.

use thiserror::Error;

use crate::grid::{BusRole, GridModel};

pub type PolicyError = Box<dyn std::error::Error + Send + Sync>;

/// Angles for every bus, frequency deviations for inertia-bearing buses,
/// energy change for storage buses.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub t: f64,
    pub angles: Vec<f64>,
    pub omega: Vec<f64>,
    pub energy: Vec<f64>,
}

impl SystemState {
    /// Steady state: equilibrium angles, zero frequency deviation, initial energies.
    pub fn at_equilibrium(grid: &GridModel) -> Result<Self, crate::grid::GridError> {
        let eq = grid.solve_equilibrium()?;
        Ok(SystemState {
            t: 0.0,
            angles: eq.angles,
            omega: vec![0.0; grid.inertia_buses().len()],
            energy: (0..grid.storage_buses().len())
                .map(|s| grid.storage_params(s).initial_energy)
                .collect(),
        })
    }

    pub fn max_abs_omega(&self) -> f64 {
        self.omega.iter().fold(0.0, |m, w| m.max(w.abs()))
    }
}

/// Per-storage reference power and virtual inertia for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlInput {
    pub power: Vec<f64>,
    pub inertia: Vec<f64>,
}

impl ControlInput {
    pub fn reference(grid: &GridModel) -> Self {
        let n = grid.storage_buses().len();
        ControlInput {
            power: (0..n).map(|s| grid.storage_params(s).reference_power).collect(),
            inertia: (0..n).map(|s| grid.storage_params(s).reference_inertia).collect(),
        }
    }

    /// Checks the power and inertia boxes. Returns the first offending storage.
    pub fn check_bounds(&self, grid: &GridModel) -> Result<(), String> {
        let n = grid.storage_buses().len();
        if self.power.len() != n || self.inertia.len() != n {
            return Err(format!("control has wrong dimension (expected {n} storages)"));
        }
        for s in 0..n {
            let p = grid.storage_params(s);
            let bus = grid.storage_buses()[s];
            if !(self.power[s] >= p.power_min && self.power[s] <= p.power_max) {
                return Err(format!(
                    "storage at bus {bus}: power {} outside [{}, {}]",
                    self.power[s], p.power_min, p.power_max
                ));
            }
            if !(self.inertia[s] >= p.inertia_min && self.inertia[s] <= p.inertia_max) {
                return Err(format!(
                    "storage at bus {bus}: inertia {} outside [{}, {}]",
                    self.inertia[s], p.inertia_min, p.inertia_max
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateDerivative {
    pub angles: Vec<f64>,
    pub omega: Vec<f64>,
    pub energy: Vec<f64>,
}

/// Right-hand side at time `t`, with the disturbance schedule applied at `t`.
pub fn swing_rhs(grid: &GridModel, state: &SystemState, u: &ControlInput, t: f64) -> StateDerivative {
    swing_rhs_with(grid, state, u, &grid.injections_at_time(t))
}

/// Right-hand side for explicit nominal injections `p0` (one per bus).
pub fn swing_rhs_with(
    grid: &GridModel,
    state: &SystemState,
    u: &ControlInput,
    p0: &[f64],
) -> StateDerivative {
    let n = grid.n_buses();
    let mut d_angles = vec![0.0; n];
    let mut d_omega = vec![0.0; grid.inertia_buses().len()];
    for (i, bus) in grid.buses().iter().enumerate() {
        let flow = grid.network_injection(&state.angles, i);
        match &bus.role {
            BusRole::Generator { inertia, damping } => {
                let w = grid.inertia_index(i).unwrap();
                d_angles[i] = state.omega[w];
                d_omega[w] = (p0[i] - damping * state.omega[w] - flow) / inertia;
            }
            BusRole::Load { damping } => {
                d_angles[i] = (p0[i] - flow) / damping;
            }
            BusRole::Storage(params) => {
                let w = grid.inertia_index(i).unwrap();
                let s = grid.storage_index(i).unwrap();
                d_angles[i] = state.omega[w];
                d_omega[w] =
                    (p0[i] + u.power[s] - params.damping * state.omega[w] - flow) / u.inertia[s];
            }
        }
    }
    StateDerivative { angles: d_angles, omega: d_omega, energy: u.power.clone() }
}

/// One forward Euler step of length `ts` with injections `p0` held over the step.
pub fn euler_step_with(
    grid: &GridModel,
    state: &SystemState,
    u: &ControlInput,
    ts: f64,
    p0: &[f64],
) -> SystemState {
    let d = swing_rhs_with(grid, state, u, p0);
    let axpy = |x: &[f64], dx: &[f64]| x.iter().zip(dx).map(|(a, b)| a + ts * b).collect();
    SystemState {
        t: state.t + ts,
        angles: axpy(&state.angles, &d.angles),
        omega: axpy(&state.omega, &d.omega),
        energy: axpy(&state.energy, &d.energy),
    }
}

/// One forward Euler step using the injections in force at `state.t`.
pub fn euler_step(grid: &GridModel, state: &SystemState, u: &ControlInput, ts: f64) -> SystemState {
    euler_step_with(grid, state, u, ts, &grid.injections_at_time(state.t))
}

/// A source of control inputs, called once per simulation step in order.
pub trait ControlPolicy {
    fn control(
        &mut self,
        grid: &GridModel,
        state: &SystemState,
        step: usize,
        injections: &[f64],
    ) -> Result<ControlInput, PolicyError>;
}

/// Holds one input for the whole run.
#[derive(Debug, Clone)]
pub struct ConstantPolicy(pub ControlInput);

impl ControlPolicy for ConstantPolicy {
    fn control(
        &mut self,
        _: &GridModel,
        _: &SystemState,
        _: usize,
        _: &[f64],
    ) -> Result<ControlInput, PolicyError> {
        Ok(self.0.clone())
    }
}

/// Piecewise-constant schedule: each entry takes effect at its start time.
#[derive(Debug, Clone)]
pub struct ScheduledPolicy {
    pub schedule: Vec<(f64, ControlInput)>,
}

impl ControlPolicy for ScheduledPolicy {
    fn control(
        &mut self,
        _: &GridModel,
        state: &SystemState,
        _: usize,
        _: &[f64],
    ) -> Result<ControlInput, PolicyError> {
        self.schedule
            .iter()
            .rev()
            .find(|(t, _)| *t <= state.t + 1e-9)
            .or(self.schedule.first())
            .map(|(_, u)| u.clone())
            .ok_or_else(|| "empty control schedule".into())
    }
}

impl<F> ControlPolicy for F
where
    F: FnMut(&GridModel, &SystemState, usize, &[f64]) -> Result<ControlInput, PolicyError>,
{
    fn control(
        &mut self,
        grid: &GridModel,
        state: &SystemState,
        step: usize,
        injections: &[f64],
    ) -> Result<ControlInput, PolicyError> {
        self(grid, state, step, injections)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub state: SystemState,
    /// Input applied from this row's time to the next. The last row repeats
    /// the previous input (or the reference input for a zero-length run).
    pub control: ControlInput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub ts: f64,
    pub scenario: String,
    pub rows: Vec<TrajectoryRow>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rows.len()
    }
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
    pub fn last_state(&self) -> &SystemState {
        &self.rows.last().expect("trajectory has an initial row").state
    }

    /// Σ_k Σ_i weight·|ω_i(k)|·T_s over all rows after the initial one.
    pub fn frequency_integral(&self) -> f64 {
        self.rows
            .iter()
            .skip(1)
            .map(|r| r.state.omega.iter().map(|w| w.abs()).sum::<f64>() * self.ts)
            .fold(0.0, |acc, v| acc + v)
    }

    /// First time storage `s` reaches `target` energy within `tol`, if ever.
    pub fn energy_reach_time(&self, s: usize, target: f64, tol: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| (r.state.energy[s] - target).abs() <= tol)
            .map(|r| r.state.t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    /// Limit storage power so the energy never leaves its window.
    pub clamp_storage_power_at_energy_limit: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { clamp_storage_power_at_energy_limit: true }
    }
}

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("time step must be positive and total time non-negative (ts = {ts}, total = {total})")]
    BadTiming { ts: f64, total: f64 },
    #[error("controller failed at step {step} (t = {t:.4} s): {source}")]
    Controller {
        step: usize,
        t: f64,
        source: PolicyError,
        partial: Box<Trajectory>,
    },
    #[error("invalid control at step {step} (t = {t:.4} s): {message}")]
    InvalidControl {
        step: usize,
        t: f64,
        message: String,
        partial: Box<Trajectory>,
    },
}

impl SimulationError {
    pub fn partial(&self) -> Option<&Trajectory> {
        match self {
            SimulationError::Controller { partial, .. }
            | SimulationError::InvalidControl { partial, .. } => Some(partial),
            SimulationError::BadTiming { .. } => None,
        }
    }
}

pub fn step_count(t_total: f64, ts: f64) -> usize {
    (t_total / ts + 1e-9).floor() as usize
}

/// Clamps storage power so the next energy value stays inside its window.
pub fn clamp_power_to_energy(grid: &GridModel, energy: &[f64], u: &mut ControlInput, ts: f64) {
    for (s, p) in u.power.iter_mut().enumerate() {
        let params = grid.storage_params(s);
        let lo = (params.energy_min - energy[s]) / ts;
        let hi = (params.energy_max - energy[s]) / ts;
        if *p < lo {
            *p = lo;
        } else if *p > hi {
            *p = hi;
        }
    }
}

/// Runs the closed loop for ⌊T_total/T_s⌋ steps from `initial`.
pub fn simulate(
    grid: &GridModel,
    initial: &SystemState,
    controller: &mut dyn ControlPolicy,
    t_total: f64,
    ts: f64,
    options: SimOptions,
) -> Result<Trajectory, SimulationError> {
    if !(ts > 0.0) || !(t_total >= 0.0) {
        return Err(SimulationError::BadTiming { ts, total: t_total });
    }
    let steps = step_count(t_total, ts);
    let mut traj = Trajectory { ts, scenario: String::new(), rows: Vec::with_capacity(steps + 1) };
    let mut state = initial.clone();
    let mut last_control = ControlInput::reference(grid);

    for k in 0..steps {
        let p0 = grid.injections_at_step(k, ts);
        let mut u = match controller.control(grid, &state, k, &p0) {
            Ok(u) => u,
            Err(source) => {
                traj.rows.push(TrajectoryRow { state: state.clone(), control: last_control });
                return Err(SimulationError::Controller {
                    step: k,
                    t: state.t,
                    source,
                    partial: Box::new(traj),
                });
            }
        };
        if let Err(message) = u.check_bounds(grid) {
            traj.rows.push(TrajectoryRow { state: state.clone(), control: last_control });
            return Err(SimulationError::InvalidControl { step: k, t: state.t, message, partial: Box::new(traj) });
        }
        if options.clamp_storage_power_at_energy_limit {
            clamp_power_to_energy(grid, &state.energy, &mut u, ts);
        }
        let mut next = euler_step_with(grid, &state, &u, ts, &p0);
        // keep the time grid exact
        next.t = (k + 1) as f64 * ts;
        traj.rows.push(TrajectoryRow { state, control: u.clone() });
        state = next;
        last_control = u;
    }
    traj.rows.push(TrajectoryRow { state, control: last_control });
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LimitKind {
    /// On the bound (within tolerance).
    AtLimit,
    /// Strictly outside the bound.
    Violated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyViolation {
    pub step: usize,
    pub t: f64,
    pub bus: usize,
    pub magnitude: f64,
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaturationFlag {
    pub step: usize,
    pub t: f64,
    pub bus: usize,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub kind: LimitKind,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConstraintReport {
    pub frequency: Vec<FrequencyViolation>,
    pub energy: Vec<SaturationFlag>,
    pub power: Vec<SaturationFlag>,
}

impl ConstraintReport {
    /// True when no constraint is violated (limits may still be touched).
    pub fn is_empty(&self) -> bool {
        self.frequency.is_empty()
            && self.energy.iter().all(|f| f.kind == LimitKind::AtLimit)
            && self.power.iter().all(|f| f.kind == LimitKind::AtLimit)
    }

    /// First time storage bus `bus` sits on (or beyond) an energy bound.
    pub fn energy_saturation_start(&self, bus: usize) -> Option<f64> {
        self.energy.iter().find(|f| f.bus == bus).map(|f| f.t)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "frequency violations: {}\nenergy flags: {}\npower flags: {}\n",
            self.frequency.len(),
            self.energy.len(),
            self.power.len()
        ));
        for v in &self.frequency {
            out.push_str(&format!(
                "freq step={} t={:.4} bus={} |omega|={:.6e} limit={}\n",
                v.step, v.t, v.bus, v.magnitude, v.limit
            ));
        }
        for (name, flags) in [("energy", &self.energy), ("power", &self.power)] {
            for f in flags {
                out.push_str(&format!(
                    "{name} step={} t={:.4} bus={} value={:.9} window=[{}, {}] {:?}\n",
                    f.step, f.t, f.bus, f.value, f.lower, f.upper, f.kind
                ));
            }
        }
        out
    }
}

/// Tolerance for "on the bound" energy and power flags.
pub const LIMIT_TOL: f64 = 1e-6;

/// Lists every step and bus where a frequency limit, energy window or power box is hit.
/// `frequency_limits` holds (bus, ω_max) pairs for the constrained buses.
pub fn monitor_constraints(
    grid: &GridModel,
    traj: &Trajectory,
    frequency_limits: &[(usize, f64)],
) -> ConstraintReport {
    let mut report = ConstraintReport::default();
    let classify = |v: f64, lo: f64, hi: f64| {
        if v < lo - LIMIT_TOL || v > hi + LIMIT_TOL {
            Some(LimitKind::Violated)
        } else if v <= lo + LIMIT_TOL || v >= hi - LIMIT_TOL {
            Some(LimitKind::AtLimit)
        } else {
            None
        }
    };
    for (k, row) in traj.rows.iter().enumerate() {
        for &(bus, limit) in frequency_limits {
            if let Some(w) = grid.inertia_index(bus) {
                let magnitude = row.state.omega[w].abs();
                if magnitude > limit {
                    report.frequency.push(FrequencyViolation { step: k, t: row.state.t, bus, magnitude, limit });
                }
            }
        }
        for (s, &bus) in grid.storage_buses().iter().enumerate() {
            let p = grid.storage_params(s);
            let e = row.state.energy[s];
            if let Some(kind) = classify(e, p.energy_min, p.energy_max) {
                report.energy.push(SaturationFlag {
                    step: k,
                    t: row.state.t,
                    bus,
                    value: e,
                    lower: p.energy_min,
                    upper: p.energy_max,
                    kind,
                });
            }
            let pw = row.control.power[s];
            if pw < p.power_min - LIMIT_TOL || pw > p.power_max + LIMIT_TOL {
                report.power.push(SaturationFlag {
                    step: k,
                    t: row.state.t,
                    bus,
                    value: pw,
                    lower: p.power_min,
                    upper: p.power_max,
                    kind: LimitKind::Violated,
                });
            }
        }
    }
    report
}
