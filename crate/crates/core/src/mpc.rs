//! Receding-horizon control of storage power and virtual inertia.
//!
//! Each control step runs a short sequential linearization loop: roll the
//! nominal plan forward with explicit Euler, linearize the step map around the
//! rollout, solve the convex horizon program inside a trust region, and repeat.
//! Only the first input of the final plan is applied.
//!
//! The horizon program is assembled for a [`Scope`]: a set of owned buses plus
//! copies of the foreign angles their lines reach. The centralized controller
//! owns every bus; the distributed controller builds one program per area.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::{
    euler_step_with, simulate, ControlInput, ControlPolicy, PolicyError, SimOptions, SimulationError,
    SystemState, Trajectory,
};
use crate::grid::{BusRole, GridModel};
use crate::qp::{ConvexProgram, QpError, QpSettings, QpSolver, SolveReport, SolveStatus, WarmStart};

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("invalid controller configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("horizon program reported {0:?}")]
    Solver(SolveStatus),
    #[error("nominal rollout left the finite range at step {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Fixed,
    Free,
}

/// Which storage decision variables the controller may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Regime {
    pub inertia: Mode,
    pub power: Mode,
}

impl Regime {
    pub const CONST_CONST: Regime = Regime { inertia: Mode::Fixed, power: Mode::Fixed };
    pub const CONST_VAR: Regime = Regime { inertia: Mode::Fixed, power: Mode::Free };
    pub const VAR_CONST: Regime = Regime { inertia: Mode::Free, power: Mode::Fixed };
    pub const VAR_VAR: Regime = Regime { inertia: Mode::Free, power: Mode::Free };
    pub const ALL: [Regime; 4] = [Self::CONST_CONST, Self::CONST_VAR, Self::VAR_CONST, Self::VAR_VAR];

    /// Two letters, inertia first: `c` constant, `v` variable.
    pub fn code(&self) -> &'static str {
        match (self.inertia, self.power) {
            (Mode::Fixed, Mode::Fixed) => "cc",
            (Mode::Fixed, Mode::Free) => "cv",
            (Mode::Free, Mode::Fixed) => "vc",
            (Mode::Free, Mode::Free) => "vv",
        }
    }

    pub fn from_code(code: &str) -> Option<Regime> {
        Self::ALL.into_iter().find(|r| r.code() == code)
    }

    pub fn describe(&self) -> &'static str {
        match self.code() {
            "cc" => "constant inertia, constant power",
            "cv" => "constant inertia, variable power",
            "vc" => "variable inertia, constant power",
            _ => "variable inertia, variable power",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqpSettings {
    pub max_outer: usize,
    pub trust_power: f64,
    pub trust_inertia: f64,
    /// Stop once no control moves by more than this between outer iterations.
    pub tolerance: f64,
    /// Weight of the proximal term ½·r·‖u − ū‖² on free controls.
    pub regularization: f64,
}

impl Default for SqpSettings {
    fn default() -> Self {
        SqpSettings { max_outer: 3, trust_power: 0.5, trust_inertia: 2.0, tolerance: 1e-6, regularization: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub horizon: f64,
    pub ts: f64,
    /// One coefficient per storage.
    pub power_cost: Vec<f64>,
    pub inertia_cost: Vec<f64>,
    /// One coefficient per inertia-bearing bus.
    pub frequency_cost: Vec<f64>,
    pub power_base: f64,
    pub inertia_base: f64,
    /// `(bus, ω_max)`; buses without an entry are unconstrained.
    pub omega_limits: Vec<(usize, f64)>,
    pub limit_penalty: f64,
    /// One regime per storage.
    pub regimes: Vec<Regime>,
    pub absolute_effort: bool,
    pub sqp: SqpSettings,
    pub qp: QpSettings,
}

impl MpcConfig {
    /// Defaults: zero effort cost, unit frequency weight, bases from the
    /// largest storage bounds, every storage fully free.
    pub fn new(grid: &GridModel, horizon: f64, ts: f64) -> Self {
        let n_s = grid.storage_buses().len();
        let params = (0..n_s).map(|s| grid.storage_params(s));
        let power_base = params.clone().fold(0.0f64, |m, p| m.max(p.power_min.abs()).max(p.power_max.abs()));
        let inertia_base = params.fold(0.0f64, |m, p| m.max(p.inertia_max));
        MpcConfig {
            horizon,
            ts,
            power_cost: vec![0.0; n_s],
            inertia_cost: vec![0.0; n_s],
            frequency_cost: vec![1.0; grid.inertia_buses().len()],
            power_base: if power_base > 0.0 { power_base } else { 1.0 },
            inertia_base: if inertia_base > 0.0 { inertia_base } else { 1.0 },
            omega_limits: Vec::new(),
            limit_penalty: 1e3,
            regimes: vec![Regime::VAR_VAR; n_s],
            absolute_effort: false,
            sqp: SqpSettings::default(),
            qp: QpSettings { tol: 1e-7, ..QpSettings::default() },
        }
    }

    pub fn with_regime(mut self, regime: Regime) -> Self {
        self.regimes.iter_mut().for_each(|r| *r = regime);
        self
    }

    /// Number of control stages, `round(T_h / T_s)`.
    pub fn steps(&self) -> usize {
        (self.horizon / self.ts).round() as usize
    }

    pub fn validate(&self, grid: &GridModel) -> Result<(), MpcError> {
        let fail = |m: String| Err(MpcError::Config(m));
        let n_s = grid.storage_buses().len();
        if !(self.ts > 0.0) || !(self.horizon > 0.0) || self.steps() < 1 {
            return fail(format!("horizon {} and step {} give no control stage", self.horizon, self.ts));
        }
        if self.power_cost.len() != n_s || self.inertia_cost.len() != n_s || self.regimes.len() != n_s {
            return fail(format!("expected {n_s} per-storage cost and regime entries"));
        }
        if self.frequency_cost.len() != grid.inertia_buses().len() {
            return fail(format!("expected {} frequency weights", grid.inertia_buses().len()));
        }
        let costs = self.power_cost.iter().chain(&self.inertia_cost).chain(&self.frequency_cost);
        if costs.clone().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return fail("cost coefficients must be finite and nonnegative".into());
        }
        if !(self.power_base > 0.0) || !(self.inertia_base > 0.0) {
            return fail("base values must be positive".into());
        }
        if !(self.limit_penalty >= 0.0) {
            return fail("limit penalty must be nonnegative".into());
        }
        let sqp = &self.sqp;
        if sqp.max_outer < 1 || !(sqp.trust_power > 0.0) || !(sqp.trust_inertia > 0.0) {
            return fail("SQP needs at least one iteration and positive trust radii".into());
        }
        if !(sqp.regularization >= 0.0) || !(sqp.tolerance >= 0.0) {
            return fail("SQP regularization and tolerance must be nonnegative".into());
        }
        for &(bus, limit) in &self.omega_limits {
            if grid.inertia_index(bus).is_none() {
                return fail(format!("frequency limit on bus {bus}, which has no frequency state"));
            }
            if !(limit > 0.0) {
                return fail(format!("frequency limit on bus {bus} must be positive"));
            }
        }
        for s in 0..n_s {
            let p = grid.storage_params(s);
            let bus = grid.storage_buses()[s];
            if !(p.power_min <= 0.0 && p.power_max >= 0.0) {
                return fail(format!("storage at bus {bus}: power box must contain zero"));
            }
            if self.regimes[s].power == Mode::Fixed
                && !(p.reference_power >= p.power_min && p.reference_power <= p.power_max)
            {
                return fail(format!("storage at bus {bus}: pinned power outside its box"));
            }
            if self.regimes[s].inertia == Mode::Fixed
                && !(p.reference_inertia >= p.inertia_min && p.reference_inertia <= p.inertia_max)
            {
                return fail(format!("storage at bus {bus}: pinned inertia outside its range"));
            }
        }
        Ok(())
    }
}

/// Packs `[angles, omega]`.
pub fn pack_state(state: &SystemState) -> DVector<f64> {
    DVector::from_iterator(
        state.angles.len() + state.omega.len(),
        state.angles.iter().chain(&state.omega).copied(),
    )
}

/// Packs `[power, inertia]`.
pub fn pack_control(u: &ControlInput) -> DVector<f64> {
    DVector::from_iterator(u.power.len() + u.inertia.len(), u.power.iter().chain(&u.inertia).copied())
}

fn unpack_control(v: &DVector<f64>) -> ControlInput {
    let n_s = v.len() / 2;
    ControlInput { power: v.rows(0, n_s).iter().copied().collect(), inertia: v.rows(n_s, n_s).iter().copied().collect() }
}

/// Euler step map on packed state and control, energy excluded.
pub fn step_map(grid: &GridModel, x: &DVector<f64>, u: &DVector<f64>, p0: &[f64], ts: f64) -> DVector<f64> {
    let n = grid.n_buses();
    let state = SystemState {
        t: 0.0,
        angles: x.rows(0, n).iter().copied().collect(),
        omega: x.rows(n, x.len() - n).iter().copied().collect(),
        energy: vec![0.0; u.len() / 2],
    };
    pack_state(&euler_step_with(grid, &state, &unpack_control(u), ts, p0))
}

/// Analytic Jacobians of [`step_map`] with respect to state and control.
pub fn step_jacobians(
    grid: &GridModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    p0: &[f64],
    ts: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = grid.n_buses();
    let n_w = grid.inertia_buses().len();
    let n_s = grid.storage_buses().len();
    let mut a = DMatrix::identity(n + n_w, n + n_w);
    let mut b = DMatrix::zeros(n + n_w, 2 * n_s);
    for (i, bus) in grid.buses().iter().enumerate() {
        // flow and its partials in the angles
        let mut flow = 0.0;
        let mut partials = Vec::with_capacity(grid.neighbors(i).len());
        let mut diag = 0.0;
        for &(j, bij) in grid.neighbors(i) {
            let d = x[i] - x[j];
            flow += bij * d.sin();
            let g = bij * d.cos();
            diag += g;
            partials.push((j, g));
        }
        match &bus.role {
            BusRole::Load { damping } => {
                a[(i, i)] -= ts * diag / damping;
                for &(j, g) in &partials {
                    a[(i, j)] += ts * g / damping;
                }
            }
            role => {
                let w = grid.inertia_index(i).unwrap();
                let r = n + w;
                a[(i, r)] = ts;
                let (m, damping) = match role {
                    BusRole::Generator { inertia, damping } => (*inertia, *damping),
                    BusRole::Storage(params) => (u[n_s + grid.storage_index(i).unwrap()], params.damping),
                    BusRole::Load { .. } => unreachable!(),
                };
                a[(r, r)] -= ts * damping / m;
                a[(r, i)] -= ts * diag / m;
                for &(j, g) in &partials {
                    a[(r, j)] += ts * g / m;
                }
                if let Some(s) = grid.storage_index(i) {
                    let f = p0[i] + u[s] - damping * x[r] - flow;
                    b[(r, s)] = ts / m;
                    b[(r, n_s + s)] = -ts * f / (m * m);
                }
            }
        }
    }
    (a, b)
}

/// `x(k+1) ≈ a·x(k) + b·u(k) + c` around one nominal point.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvStep {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
}

/// Linear time-varying model along a nominal rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvModel {
    pub steps: Vec<LtvStep>,
    pub nominal_states: Vec<SystemState>,
    pub nominal_controls: Vec<ControlInput>,
    pub injections: Vec<f64>,
    pub ts: f64,
}

impl LtvModel {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Applies the linear model for step `k`.
    pub fn predict(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let s = &self.steps[k];
        &s.a * x + &s.b * u + &s.c
    }
}

/// Linearizes the Euler step map at every nominal point. `nominal_states` holds
/// at least `nominal_controls.len()` states; injections are held over the horizon.
pub fn linearize_dynamics(
    grid: &GridModel,
    nominal_states: &[SystemState],
    nominal_controls: &[ControlInput],
    injections: &[f64],
    ts: f64,
) -> LtvModel {
    assert!(nominal_states.len() >= nominal_controls.len());
    let steps = nominal_controls
        .iter()
        .zip(nominal_states)
        .map(|(u, s)| {
            let (x, u) = (pack_state(s), pack_control(u));
            let (a, b) = step_jacobians(grid, &x, &u, injections, ts);
            let c = step_map(grid, &x, &u, injections, ts) - &a * &x - &b * &u;
            LtvStep { a, b, c }
        })
        .collect();
    LtvModel {
        steps,
        nominal_states: nominal_states.to_vec(),
        nominal_controls: nominal_controls.to_vec(),
        injections: injections.to_vec(),
        ts,
    }
}

/// Buses whose dynamics a horizon program models, plus the foreign buses
/// whose angles enter through lines leaving the owned set.
#[derive(Debug, Clone, PartialEq)]
pub struct Scope {
    owned: Vec<bool>,
    foreign: Vec<usize>,
}

impl Scope {
    pub fn all(grid: &GridModel) -> Self {
        Scope { owned: vec![true; grid.n_buses()], foreign: Vec::new() }
    }

    pub fn area(grid: &GridModel, buses: &[usize]) -> Self {
        let mut owned = vec![false; grid.n_buses()];
        for &b in buses {
            owned[b] = true;
        }
        let mut foreign: Vec<usize> = buses
            .iter()
            .flat_map(|&i| grid.neighbors(i).iter().map(|&(j, _)| j))
            .filter(|&j| !owned[j])
            .collect();
        foreign.sort_unstable();
        foreign.dedup();
        Scope { owned, foreign }
    }

    pub fn owns(&self, bus: usize) -> bool {
        self.owned[bus]
    }

    pub fn owned_buses(&self) -> Vec<usize> {
        (0..self.owned.len()).filter(|&i| self.owned[i]).collect()
    }

    pub fn foreign_buses(&self) -> &[usize] {
        &self.foreign
    }

    pub fn is_everything(&self) -> bool {
        self.owned.iter().all(|&o| o)
    }
}

/// Column layout of a horizon program.
#[derive(Debug, Clone, PartialEq)]
pub struct VarMap {
    horizon: usize,
    storages: Vec<usize>,
    buses: Vec<usize>,
    inertia: Vec<usize>,
    foreign: Vec<usize>,
    limited: Vec<(usize, f64)>,
    absolute: bool,
    angle_slot: Vec<Option<usize>>,
    omega_slot: Vec<Option<usize>>,
    storage_slot: Vec<Option<usize>>,
    limit_slot: Vec<Option<usize>>,
    state_base: usize,
    slack_base: usize,
    limit_base: usize,
    abs_base: usize,
    n_vars: usize,
}

impl VarMap {
    fn new(grid: &GridModel, scope: &Scope, horizon: usize, limits: &[(usize, f64)], absolute: bool) -> Self {
        let buses = scope.owned_buses();
        let storages: Vec<usize> = buses.iter().filter_map(|&b| grid.storage_index(b)).collect();
        let inertia: Vec<usize> = buses.iter().filter_map(|&b| grid.inertia_index(b)).collect();
        let foreign = scope.foreign.clone();
        let mut angle_slot = vec![None; grid.n_buses()];
        for (k, &b) in buses.iter().chain(&foreign).enumerate() {
            angle_slot[b] = Some(if k < buses.len() { k } else { k + inertia.len() });
        }
        let mut omega_slot = vec![None; grid.inertia_buses().len()];
        for (k, &w) in inertia.iter().enumerate() {
            omega_slot[w] = Some(buses.len() + k);
        }
        let mut storage_slot = vec![None; grid.storage_buses().len()];
        for (k, &s) in storages.iter().enumerate() {
            storage_slot[s] = Some(k);
        }
        let limited: Vec<(usize, f64)> = limits.iter().copied().filter(|&(b, _)| scope.owns(b)).collect();
        let mut limit_slot = vec![None; grid.inertia_buses().len()];
        for (k, &(b, _)) in limited.iter().enumerate() {
            limit_slot[grid.inertia_index(b).unwrap()] = Some(k);
        }
        let n_s = storages.len();
        let state_base = horizon * 2 * n_s;
        let per_step = buses.len() + inertia.len() + foreign.len();
        let slack_base = state_base + horizon * per_step;
        let limit_base = slack_base + horizon * inertia.len();
        let abs_base = limit_base + horizon * limited.len();
        let n_vars = abs_base + if absolute { horizon * 2 * n_s } else { 0 };
        VarMap {
            horizon,
            storages,
            buses,
            inertia,
            foreign,
            limited,
            absolute,
            angle_slot,
            omega_slot,
            storage_slot,
            limit_slot,
            state_base,
            slack_base,
            limit_base,
            abs_base,
            n_vars,
        }
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Global storage indices owned by this program.
    pub fn storages(&self) -> &[usize] {
        &self.storages
    }

    pub fn owned_buses(&self) -> &[usize] {
        &self.buses
    }

    pub fn foreign_buses(&self) -> &[usize] {
        &self.foreign
    }

    fn per_step(&self) -> usize {
        self.buses.len() + self.inertia.len() + self.foreign.len()
    }

    /// Power of storage `s` applied over step `k`, `k < K`.
    pub fn power(&self, k: usize, s: usize) -> Option<usize> {
        self.storage_slot[s].map(|j| k * 2 * self.storages.len() + j)
    }

    pub fn inertia(&self, k: usize, s: usize) -> Option<usize> {
        self.storage_slot[s].map(|j| k * 2 * self.storages.len() + self.storages.len() + j)
    }

    /// Angle of `bus` at step `k`, `1 <= k <= K`, for owned and foreign buses.
    pub fn angle(&self, k: usize, bus: usize) -> Option<usize> {
        debug_assert!(k >= 1 && k <= self.horizon);
        self.angle_slot[bus].map(|j| self.state_base + (k - 1) * self.per_step() + j)
    }

    /// Frequency deviation of inertia bus `w` (inertia index) at step `k`.
    pub fn omega(&self, k: usize, w: usize) -> Option<usize> {
        self.omega_slot[w].map(|j| self.state_base + (k - 1) * self.per_step() + j)
    }

    /// Epigraph slack for `|ω_w(k)|`.
    pub fn slack(&self, k: usize, w: usize) -> Option<usize> {
        let pos = self.inertia.iter().position(|&v| v == w)?;
        Some(self.slack_base + (k - 1) * self.inertia.len() + pos)
    }

    fn limit_violation(&self, k: usize, w: usize) -> Option<usize> {
        self.limit_slot[w].map(|j| self.limit_base + (k - 1) * self.limited.len() + j)
    }

    fn abs_power(&self, k: usize, s: usize) -> Option<usize> {
        if !self.absolute {
            return None;
        }
        self.storage_slot[s].map(|j| self.abs_base + k * 2 * self.storages.len() + j)
    }

    fn abs_inertia(&self, k: usize, s: usize) -> Option<usize> {
        self.abs_power(k, s).map(|c| c + self.storages.len())
    }

    /// `(block, entry, stage)` per column.
    fn column_keys(&self) -> Vec<ItemKey> {
        let n_c = 2 * self.storages.len();
        let per_step = self.per_step();
        (0..self.n_vars)
            .map(|c| {
                let (block, off, width, first) = if c < self.state_base {
                    (0, c, n_c, 0)
                } else if c < self.slack_base {
                    (1, c - self.state_base, per_step, 1)
                } else if c < self.limit_base {
                    (2, c - self.slack_base, self.inertia.len(), 1)
                } else if c < self.abs_base {
                    (3, c - self.limit_base, self.limited.len(), 1)
                } else {
                    (4, c - self.abs_base, n_c, 0)
                };
                (block, off % width, off / width + first)
            })
            .collect()
    }

    /// Column of packed state entry `r` at step `k >= 1`.
    fn state_column(&self, grid: &GridModel, k: usize, r: usize) -> Option<usize> {
        let n = grid.n_buses();
        if r < n {
            self.angle(k, r)
        } else {
            self.omega(k, r - n)
        }
    }
}

/// Identifies a column or row across horizons: `(kind, entry, stage)`.
pub type ItemKey = (u16, usize, usize);

/// Stage-tagged layout of a horizon program, used to carry a solver iterate
/// from one control step to the next.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProgramKeys {
    pub cols: Vec<ItemKey>,
    pub eq: Vec<ItemKey>,
    pub ineq: Vec<ItemKey>,
    /// Columns with a finite bound, in solver order.
    pub boxed: Vec<usize>,
}

impl ProgramKeys {
    fn stacked_rows(&self) -> impl Iterator<Item = (u8, ItemKey)> + '_ {
        self.eq
            .iter()
            .map(|&k| (0, k))
            .chain(self.ineq.iter().map(|&k| (1, k)))
            .chain(self.boxed.iter().map(|&j| (2, self.cols[j])))
    }

    /// Moves `iterate`, laid out as `self`, one stage forward into layout
    /// `target`; the last stage is repeated. `None` if an entry has no source.
    pub fn shift_iterate(&self, iterate: &WarmStart, target: &ProgramKeys) -> Option<WarmStart> {
        use std::collections::HashMap;
        let pick = |map: &HashMap<_, usize>, seg: Option<u8>, (kind, e, k): ItemKey| {
            let key = |k| (seg, (kind, e, k));
            map.get(&key(k + 1)).or_else(|| map.get(&key(k))).copied()
        };
        let cols: HashMap<_, usize> = self.cols.iter().enumerate().map(|(i, &k)| ((None, k), i)).collect();
        let rows: HashMap<_, usize> = self.stacked_rows().enumerate().map(|(i, (g, k))| ((Some(g), k), i)).collect();
        if iterate.x.len() != self.cols.len() || iterate.y.len() != rows.len() {
            return None;
        }
        let x = target
            .cols
            .iter()
            .map(|&k| pick(&cols, None, k).map(|i| iterate.x[i]))
            .collect::<Option<Vec<_>>>()?;
        let (mut z, mut y) = (Vec::new(), Vec::new());
        for (g, k) in target.stacked_rows() {
            let i = pick(&rows, Some(g), k)?;
            z.push(iterate.z[i]);
            y.push(iterate.y[i]);
        }
        Some(WarmStart { x: DVector::from_vec(x), z: DVector::from_vec(z), y: DVector::from_vec(y) })
    }
}

/// One horizon's convex program with its layout and cost split.
#[derive(Debug, Clone)]
pub struct HorizonProgram {
    pub program: ConvexProgram,
    pub map: VarMap,
    /// Linear effort part of the objective.
    pub effort_cost: DVector<f64>,
    /// Linear frequency-performance part.
    pub performance_cost: DVector<f64>,
    /// Number of dynamics equality rows (they come first).
    pub dynamics_rows: usize,
    /// Per owned storage: the pinned power sequence had to be clamped at an energy limit.
    pub saturated: Vec<bool>,
    pub initial: SystemState,
    pub keys: ProgramKeys,
}

impl HorizonProgram {
    pub fn objective_summary(&self, x: &DVector<f64>) -> ObjectiveSummary {
        let effort = self.effort_cost.dot(x);
        let performance = self.performance_cost.dot(x);
        ObjectiveSummary { effort, performance, total: effort + performance }
    }

    /// Controls of the owned storages; other storages keep `fallback`.
    pub fn controls(&self, x: &DVector<f64>, fallback: &[ControlInput]) -> Vec<ControlInput> {
        (0..self.map.horizon)
            .map(|k| {
                let mut u = fallback[k].clone();
                for &s in &self.map.storages {
                    u.power[s] = x[self.map.power(k, s).unwrap()];
                    u.inertia[s] = x[self.map.inertia(k, s).unwrap()];
                }
                u
            })
            .collect()
    }

    /// Predicted states `k = 0..=K`; entries outside the scope come from `nominal`.
    pub fn states(&self, grid: &GridModel, x: &DVector<f64>, nominal: &[SystemState], ts: f64) -> Vec<SystemState> {
        let mut out = vec![self.initial.clone()];
        for k in 1..=self.map.horizon {
            let mut s = nominal[k].clone();
            s.t = self.initial.t + k as f64 * ts;
            for b in self.map.buses.iter().chain(&self.map.foreign) {
                s.angles[*b] = x[self.map.angle(k, *b).unwrap()];
            }
            for &w in &self.map.inertia {
                s.omega[w] = x[self.map.omega(k, w).unwrap()];
            }
            for &st in &self.map.storages {
                s.energy[st] = out[k - 1].energy[st] + ts * x[self.map.power(k - 1, st).unwrap()];
            }
            out.push(s);
        }
        let _ = grid;
        out
    }
}

/// Effort, performance and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveSummary {
    pub effort: f64,
    pub performance: f64,
    pub total: f64,
}

/// Power sequence of a pinned storage: its reference, clamped step by step so
/// the energy stays inside its window. Returns the sequence and whether any
/// clamping happened.
pub fn pinned_power(grid: &GridModel, s: usize, energy: f64, horizon: usize, ts: f64) -> (Vec<f64>, bool) {
    let p = grid.storage_params(s);
    let mut e = energy;
    let mut clamped = false;
    let seq = (0..horizon)
        .map(|_| {
            let lo = (p.energy_min - e) / ts;
            let hi = (p.energy_max - e) / ts;
            let v = p.reference_power.max(lo).min(hi).max(p.power_min).min(p.power_max);
            clamped |= v != p.reference_power;
            e += ts * v;
            v
        })
        .collect();
    (seq, clamped)
}

/// Projects a plan onto the boxes, the pins and the energy window, in place.
pub(crate) fn sanitize_plan(grid: &GridModel, state: &SystemState, cfg: &MpcConfig, plan: &mut [ControlInput]) {
    let ts = cfg.ts;
    for s in 0..grid.storage_buses().len() {
        let p = grid.storage_params(s);
        let pinned = (cfg.regimes[s].power == Mode::Fixed)
            .then(|| pinned_power(grid, s, state.energy[s], plan.len(), ts).0);
        let mut e = state.energy[s];
        for (k, u) in plan.iter_mut().enumerate() {
            u.inertia[s] = match cfg.regimes[s].inertia {
                Mode::Fixed => p.reference_inertia,
                Mode::Free => u.inertia[s].clamp(p.inertia_min, p.inertia_max),
            };
            u.power[s] = match &pinned {
                Some(seq) => seq[k],
                None => {
                    // keep the window reachable; zero is inside the box
                    let lo = ((p.energy_min - e) / ts).min(0.0);
                    let hi = ((p.energy_max - e) / ts).max(0.0);
                    u.power[s].clamp(p.power_min, p.power_max).clamp(lo, hi)
                }
            };
            e += ts * u.power[s];
        }
    }
}

/// Euler rollout of `plan` from `state` with injections held. Inside an area
/// scope only owned buses evolve; foreign angles follow `foreign` (one row per
/// step `1..=K`, ordered like [`Scope::foreign_buses`]) and the rest stay frozen.
pub fn rollout(
    grid: &GridModel,
    state: &SystemState,
    plan: &[ControlInput],
    injections: &[f64],
    ts: f64,
    scope: &Scope,
    foreign: Option<&[Vec<f64>]>,
) -> Vec<SystemState> {
    let mut out = Vec::with_capacity(plan.len() + 1);
    out.push(state.clone());
    for (k, u) in plan.iter().enumerate() {
        let prev = &out[k];
        let mut next = euler_step_with(grid, prev, u, ts, injections);
        next.t = state.t + (k + 1) as f64 * ts;
        if !scope.is_everything() {
            for i in 0..grid.n_buses() {
                if scope.owns(i) {
                    continue;
                }
                next.angles[i] = prev.angles[i];
                if let Some(w) = grid.inertia_index(i) {
                    next.omega[w] = prev.omega[w];
                }
                if let Some(s) = grid.storage_index(i) {
                    next.energy[s] = prev.energy[s];
                }
            }
            if let Some(f) = foreign {
                for (j, &b) in scope.foreign.iter().enumerate() {
                    next.angles[b] = f[k][j];
                }
            }
        }
        out.push(next);
    }
    out
}

/// Builds the horizon program for `scope` around the nominal in `ltv`.
pub fn assemble_horizon_program(
    grid: &GridModel,
    state: &SystemState,
    ltv: &LtvModel,
    cfg: &MpcConfig,
    scope: &Scope,
) -> Result<HorizonProgram, MpcError> {
    let kh = ltv.horizon();
    let ts = cfg.ts;
    let n = grid.n_buses();
    let map = VarMap::new(grid, scope, kh, &cfg.omega_limits, cfg.absolute_effort);
    let nv = map.n_vars();
    let mut prog = ConvexProgram::new(nv);
    let mut effort = DVector::zeros(nv);
    let mut performance = DVector::zeros(nv);
    let mut penalty = DVector::zeros(nv);
    let mut eq_rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    let mut in_rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    let mut eq_keys: Vec<ItemKey> = Vec::new();
    let mut in_keys: Vec<ItemKey> = Vec::new();
    let x0 = pack_state(state);

    // dynamics: one row per owned state entry per step
    let rows: Vec<usize> = map
        .buses
        .iter()
        .copied()
        .chain(map.inertia.iter().map(|w| n + w))
        .collect();
    for k in 0..kh {
        let step = &ltv.steps[k];
        for (ri, &r) in rows.iter().enumerate() {
            let mut coeffs = vec![(map.state_column(grid, k + 1, r).unwrap(), 1.0)];
            let mut rhs = step.c[r];
            for c in 0..x0.len() {
                let a = step.a[(r, c)];
                if a == 0.0 {
                    continue;
                }
                if k == 0 {
                    rhs += a * x0[c];
                } else {
                    let col = map.state_column(grid, k, c).ok_or_else(|| {
                        MpcError::Config(format!("state {c} couples into the scope but is not modeled"))
                    })?;
                    coeffs.push((col, -a));
                }
            }
            let n_s = grid.storage_buses().len();
            for c in 0..2 * n_s {
                let b = step.b[(r, c)];
                if b == 0.0 {
                    continue;
                }
                let col = if c < n_s { map.power(k, c) } else { map.inertia(k, c - n_s) };
                let col = col.ok_or_else(|| MpcError::Config(format!("control {c} acts outside the scope")))?;
                coeffs.push((col, -b));
            }
            eq_rows.push((coeffs, rhs));
            eq_keys.push((10, ri, k));
        }
    }
    let dynamics_rows = eq_rows.len();

    // storage controls: pins, boxes, trust region, energy window, effort
    let mut saturated = Vec::with_capacity(map.storages.len());
    for &s in &map.storages {
        let p = grid.storage_params(s);
        let regime = cfg.regimes[s];
        let (pins, clamped) = pinned_power(grid, s, state.energy[s], kh, ts);
        let at_limit = state.energy[s] <= p.energy_min + 1e-9 || state.energy[s] >= p.energy_max - 1e-9;
        saturated.push(if regime.power == Mode::Fixed { clamped } else { at_limit });
        for k in 0..kh {
            let (cp, cm) = (map.power(k, s).unwrap(), map.inertia(k, s).unwrap());
            let nom = &ltv.nominal_controls[k];
            prog.lower[cp] = p.power_min;
            prog.upper[cp] = p.power_max;
            prog.lower[cm] = p.inertia_min;
            prog.upper[cm] = p.inertia_max;
            match regime.power {
                Mode::Fixed => {
                    eq_rows.push((vec![(cp, 1.0)], pins[k]));
                    eq_keys.push((11, s, k));
                }
                Mode::Free => {
                    prog.lower[cp] = prog.lower[cp].max(nom.power[s] - cfg.sqp.trust_power);
                    prog.upper[cp] = prog.upper[cp].min(nom.power[s] + cfg.sqp.trust_power);
                    prog.quad[(cp, cp)] += cfg.sqp.regularization;
                    prog.lin[cp] -= cfg.sqp.regularization * nom.power[s];
                }
            }
            match regime.inertia {
                Mode::Fixed => {
                    eq_rows.push((vec![(cm, 1.0)], p.reference_inertia));
                    eq_keys.push((12, s, k));
                }
                Mode::Free => {
                    prog.lower[cm] = prog.lower[cm].max(nom.inertia[s] - cfg.sqp.trust_inertia);
                    prog.upper[cm] = prog.upper[cm].min(nom.inertia[s] + cfg.sqp.trust_inertia);
                    prog.quad[(cm, cm)] += cfg.sqp.regularization;
                    prog.lin[cm] -= cfg.sqp.regularization * nom.inertia[s];
                }
            }
            let wp = cfg.power_cost[s] * ts / cfg.power_base;
            let wm = cfg.inertia_cost[s] * ts / cfg.inertia_base;
            match (map.abs_power(k, s), map.abs_inertia(k, s)) {
                (Some(ap), Some(am)) => {
                    let p_range = match regime.power {
                        Mode::Fixed => (pins[k], pins[k]),
                        Mode::Free => (prog.lower[cp], prog.upper[cp]),
                    };
                    let m_range = match regime.inertia {
                        Mode::Fixed => (p.reference_inertia, p.reference_inertia),
                        Mode::Free => (prog.lower[cm], prog.upper[cm]),
                    };
                    for (kind, c, a, r, range) in [(20, cp, ap, 0.0, p_range), (22, cm, am, p.reference_inertia, m_range)] {
                        // a side of |x - r| that the box rules out would only add a dependent row
                        let below = range.0 >= r;
                        let above = range.1 <= r && !below;
                        if !above {
                            in_rows.push((vec![(c, 1.0), (a, -1.0)], r));
                            in_keys.push((kind, s, k));
                        }
                        if !below {
                            in_rows.push((vec![(c, -1.0), (a, -1.0)], -r));
                            in_keys.push((kind + 1, s, k));
                        }
                    }
                    effort[ap] = wp;
                    effort[am] = wm;
                }
                _ => {
                    effort[cp] = wp;
                    effort[cm] = wm;
                }
            }
        }
        if regime.power == Mode::Free {
            let e0 = state.energy[s];
            let lo = p.energy_min.min(e0) - e0;
            let hi = p.energy_max.max(e0) - e0;
            for k in 1..=kh {
                let sum: Vec<(usize, f64)> = (0..k).map(|j| (map.power(j, s).unwrap(), ts)).collect();
                in_rows.push((sum.clone(), hi));
                in_rows.push((sum.into_iter().map(|(c, v)| (c, -v)).collect(), -lo));
                in_keys.extend([(24, s, k), (25, s, k)]);
            }
        }
    }

    // frequency epigraph and soft limits
    for k in 1..=kh {
        for &w in &map.inertia {
            let (om, sl) = (map.omega(k, w).unwrap(), map.slack(k, w).unwrap());
            in_rows.push((vec![(om, 1.0), (sl, -1.0)], 0.0));
            in_rows.push((vec![(om, -1.0), (sl, -1.0)], 0.0));
            in_keys.extend([(26, w, k), (27, w, k)]);
            performance[sl] = cfg.frequency_cost[w] * ts;
            if let Some(v) = map.limit_violation(k, w) {
                let bus = grid.inertia_buses()[w];
                let limit = cfg.omega_limits.iter().find(|l| l.0 == bus).unwrap().1;
                in_rows.push((vec![(sl, 1.0), (v, -1.0)], limit));
                in_keys.push((28, w, k));
                prog.lower[v] = 0.0;
                penalty[v] = cfg.limit_penalty * ts;
            }
        }
    }

    let fill = |rows: &[(Vec<(usize, f64)>, f64)]| {
        let mut m = DMatrix::zeros(rows.len(), nv);
        let mut rhs = DVector::zeros(rows.len());
        for (i, (coeffs, b)) in rows.iter().enumerate() {
            for &(c, v) in coeffs {
                m[(i, c)] += v;
            }
            rhs[i] = *b;
        }
        (m, rhs)
    };
    (prog.eq_mat, prog.eq_rhs) = fill(&eq_rows);
    (prog.ineq_mat, prog.ineq_rhs) = fill(&in_rows);
    prog.lin += &effort + &performance + &penalty;
    let keys = ProgramKeys {
        cols: map.column_keys(),
        eq: eq_keys,
        ineq: in_keys,
        boxed: (0..nv).filter(|&j| prog.lower[j].is_finite() || prog.upper[j].is_finite()).collect(),
    };
    Ok(HorizonProgram {
        program: prog,
        map,
        effort_cost: effort,
        performance_cost: performance,
        dynamics_rows,
        saturated,
        initial: state.clone(),
        keys,
    })
}

#[derive(Debug, Clone)]
pub struct MpcStepResult {
    /// First input of the final plan, inside every box.
    pub applied: ControlInput,
    pub plan: Vec<ControlInput>,
    /// Predicted states `k = 0..=K` from the last convex program.
    pub predicted: Vec<SystemState>,
    pub objective: ObjectiveSummary,
    pub sqp_iterations: usize,
    pub qp: SolveReport,
    /// Per storage: the energy window forced a pinned power off its reference,
    /// or a free storage starts on an energy limit.
    pub saturated: Vec<bool>,
    /// Final solver iterate and the layout it belongs to.
    pub iterate: Option<WarmStart>,
    pub layout: ProgramKeys,
}

impl MpcStepResult {
    /// Warm-start data for the following control step.
    pub fn next_warm(&self) -> MpcWarm {
        MpcWarm { plan: Some(shift_plan(&self.plan)), qp: self.iterate.clone(), layout: Some(self.layout.clone()) }
    }
}

/// Warm-start data carried between control steps.
#[derive(Debug, Clone, Default)]
pub struct MpcWarm {
    pub plan: Option<Vec<ControlInput>>,
    /// Final solver iterate of the previous step, in layout `layout`. It is
    /// shifted one stage before use; without a layout it is used as is.
    pub qp: Option<WarmStart>,
    pub layout: Option<ProgramKeys>,
}

/// Drops the first stage and repeats the last one.
pub fn shift_plan(plan: &[ControlInput]) -> Vec<ControlInput> {
    let mut out: Vec<ControlInput> = plan.iter().skip(1).cloned().collect();
    if let Some(last) = plan.last() {
        out.push(last.clone());
    }
    out
}

pub(crate) fn project_to_boxes(grid: &GridModel, u: &ControlInput) -> ControlInput {
    let mut u = u.clone();
    for s in 0..u.power.len() {
        let p = grid.storage_params(s);
        u.power[s] = u.power[s].clamp(p.power_min, p.power_max);
        u.inertia[s] = u.inertia[s].clamp(p.inertia_min, p.inertia_max);
    }
    u
}

/// One control step: SQP over the horizon with injections `injections` held.
pub fn solve_horizon(
    grid: &GridModel,
    state: &SystemState,
    injections: &[f64],
    cfg: &MpcConfig,
    warm: &MpcWarm,
) -> Result<MpcStepResult, MpcError> {
    let kh = cfg.steps();
    let scope = Scope::all(grid);
    let mut plan = match &warm.plan {
        Some(p) if p.len() == kh => p.clone(),
        _ => vec![ControlInput::reference(grid); kh],
    };
    sanitize_plan(grid, state, cfg, &mut plan);
    let mut qp_warm = warm.qp.clone();
    let mut layout = warm.layout.clone();
    let mut last = None;
    for it in 1..=cfg.sqp.max_outer {
        let nominal = rollout(grid, state, &plan, injections, cfg.ts, &scope, None);
        if let Some(k) = nominal.iter().position(|s| !pack_state(s).iter().all(|v| v.is_finite())) {
            return Err(MpcError::NonFinite(k));
        }
        let ltv = linearize_dynamics(grid, &nominal, &plan, injections, cfg.ts);
        let hp = assemble_horizon_program(grid, state, &ltv, cfg, &scope)?;
        if let (Some(from), Some(w)) = (layout.take(), qp_warm.as_ref()) {
            qp_warm = from.shift_iterate(w, &hp.keys);
        }
        let mut solver = QpSolver::new(&hp.program, cfg.qp.clone())?;
        let rep = solver.solve(qp_warm.as_ref());
        if rep.status.is_infeasible() {
            return Err(MpcError::Solver(rep.status));
        }
        if rep.status != SolveStatus::Optimal {
            log::warn!("t={:.4}: horizon program stopped at {:?} (kkt {:.2e})", state.t, rep.status, rep.residual.max());
        }
        qp_warm = solver.last_iterate().cloned();
        let mut next = hp.controls(&rep.x, &plan);
        sanitize_plan(grid, state, cfg, &mut next);
        let change = next
            .iter()
            .zip(&plan)
            .flat_map(|(a, b)| pack_control(a).iter().zip(pack_control(b).iter()).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max);
        let predicted = hp.states(grid, &rep.x, &nominal, cfg.ts);
        let objective = hp.objective_summary(&rep.x);
        plan = next;
        last = Some((hp.saturated, predicted, objective, rep, it, hp.keys));
        if change <= cfg.sqp.tolerance {
            break;
        }
    }
    let (saturated, predicted, objective, qp, sqp_iterations, keys) = last.expect("at least one outer iteration");
    Ok(MpcStepResult {
        applied: project_to_boxes(grid, &plan[0]),
        plan,
        predicted,
        objective,
        sqp_iterations,
        qp,
        saturated,
        iterate: qp_warm,
        layout: keys,
    })
}

/// Convenience entry: injections in force at `state.t`, no warm start.
pub fn mpc_solve_horizon(grid: &GridModel, state: &SystemState, cfg: &MpcConfig) -> Result<MpcStepResult, MpcError> {
    cfg.validate(grid)?;
    solve_horizon(grid, state, &grid.injections_at_time(state.t), cfg, &MpcWarm::default())
}

/// Outcome of one closed-loop step.
#[derive(Debug, Clone)]
pub enum StepOutcome {
    Solved(Box<MpcStepResult>),
    /// The horizon solve failed; the shifted previous plan (or the reference) was applied.
    Fallback { error: String, applied: ControlInput },
}

impl StepOutcome {
    pub fn applied(&self) -> &ControlInput {
        match self {
            StepOutcome::Solved(r) => &r.applied,
            StepOutcome::Fallback { applied, .. } => applied,
        }
    }

    pub fn result(&self) -> Option<&MpcStepResult> {
        match self {
            StepOutcome::Solved(r) => Some(r),
            StepOutcome::Fallback { .. } => None,
        }
    }
}

/// Centralized controller as a simulation callback.
pub struct MpcController {
    pub cfg: MpcConfig,
    pub log: Vec<StepOutcome>,
    warm: MpcWarm,
}

impl MpcController {
    pub fn new(cfg: MpcConfig) -> Self {
        MpcController { cfg, log: Vec::new(), warm: MpcWarm::default() }
    }
}

impl ControlPolicy for MpcController {
    fn control(
        &mut self,
        grid: &GridModel,
        state: &SystemState,
        _step: usize,
        injections: &[f64],
    ) -> Result<ControlInput, PolicyError> {
        match solve_horizon(grid, state, injections, &self.cfg, &self.warm) {
            Ok(r) => {
                let applied = r.applied.clone();
                self.warm = r.next_warm();
                self.log.push(StepOutcome::Solved(Box::new(r)));
                Ok(applied)
            }
            Err(MpcError::Config(m)) => Err(MpcError::Config(m).into()),
            Err(e) => {
                let plan = self.warm.plan.take().unwrap_or_else(|| vec![ControlInput::reference(grid)]);
                let applied = project_to_boxes(grid, &plan[0]);
                log::warn!("t={:.4}: {e}; applying fallback input", state.t);
                self.warm = MpcWarm { plan: Some(shift_plan(&plan)), ..Default::default() };
                self.log.push(StepOutcome::Fallback { error: e.to_string(), applied: applied.clone() });
                Ok(applied)
            }
        }
    }
}

/// Closed-loop run with the centralized controller.
pub fn receding_horizon_run(
    grid: &GridModel,
    initial: &SystemState,
    cfg: &MpcConfig,
    t_total: f64,
    options: SimOptions,
) -> Result<(Trajectory, Vec<StepOutcome>), SimulationError> {
    cfg.validate(grid).map_err(|e| SimulationError::Controller {
        step: 0,
        t: initial.t,
        source: e.into(),
        partial: Box::new(Trajectory { ts: cfg.ts, scenario: String::new(), rows: Vec::new() }),
    })?;
    let mut ctl = MpcController::new(cfg.clone());
    let traj = simulate(grid, initial, &mut ctl, t_total, cfg.ts, options)?;
    Ok((traj, ctl.log))
}

/// Effort and performance terms evaluated on a closed-loop trajectory: effort
/// over the applied inputs, performance over the states after the first.
pub fn closed_loop_objective(grid: &GridModel, cfg: &MpcConfig, traj: &Trajectory) -> ObjectiveSummary {
    let ts = traj.ts;
    let rows = &traj.rows;
    let mut effort = 0.0;
    for row in rows.iter().take(rows.len().saturating_sub(1)) {
        for s in 0..row.control.power.len() {
            let (p, m) = (row.control.power[s], row.control.inertia[s]);
            let (p, m) = if cfg.absolute_effort {
                (p.abs(), (m - grid.storage_params(s).reference_inertia).abs())
            } else {
                (p, m)
            };
            effort += (cfg.power_cost[s] * p / cfg.power_base + cfg.inertia_cost[s] * m / cfg.inertia_base) * ts;
        }
    }
    let performance: f64 = rows
        .iter()
        .skip(1)
        .map(|r| r.state.omega.iter().zip(&cfg.frequency_cost).map(|(w, c)| c * w.abs()).sum::<f64>() * ts)
        .sum();
    ObjectiveSummary { effort, performance, total: effort + performance }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::tests::two_bus;
    use crate::grid::{BusId, DisturbanceEvent};
    use approx::assert_relative_eq;

    fn cfg(grid: &GridModel) -> MpcConfig {
        MpcConfig::new(grid, 0.1, 0.01)
    }

    #[test]
    fn regime_codes_round_trip() {
        for r in Regime::ALL {
            assert_eq!(Regime::from_code(r.code()), Some(r));
        }
        assert_eq!(Regime::from_code("xx"), None);
        assert_eq!(Regime::CONST_VAR.power, Mode::Free);
    }

    #[test]
    fn horizon_has_ten_stages() {
        let g = two_bus(vec![]);
        let c = cfg(&g);
        assert_eq!(c.steps(), 10);
        let state = SystemState::at_equilibrium(&g).unwrap();
        let plan = vec![ControlInput::reference(&g); 10];
        let p0 = g.injections_at_time(0.0);
        let nom = rollout(&g, &state, &plan, &p0, 0.01, &Scope::all(&g), None);
        let ltv = linearize_dynamics(&g, &nom, &plan, &p0, 0.01);
        let hp = assemble_horizon_program(&g, &state, &ltv, &c, &Scope::all(&g)).unwrap();
        assert_eq!(ltv.horizon(), 10);
        // one row per state per step: 2 angles + 2 frequencies
        assert_eq!(hp.dynamics_rows, 4 * 10);
    }

    #[test]
    fn linear_model_exact_at_expansion_point() {
        let g = two_bus(vec![]);
        let x = DVector::from_vec(vec![0.03, -0.02, 0.1, -0.05]);
        let u = DVector::from_vec(vec![-2.5, 6.0]);
        let p0 = g.steady_injections();
        let state = SystemState { t: 0.0, angles: vec![0.03, -0.02], omega: vec![0.1, -0.05], energy: vec![0.0] };
        let ltv = linearize_dynamics(&g, &[state], &[unpack_control(&u)], &p0, 0.01);
        let err = (ltv.predict(0, &x, &u) - step_map(&g, &x, &u, &p0, 0.01)).amax();
        assert!(err < 1e-14, "{err}");
    }

    #[test]
    fn inertia_sensitivity_vanishes_without_net_force() {
        let g = two_bus(vec![]);
        let eq = SystemState::at_equilibrium(&g).unwrap();
        let (x, u) = (pack_state(&eq), pack_control(&ControlInput::reference(&g)));
        let (_, b) = step_jacobians(&g, &x, &u, &g.injections_at_time(0.0), 0.01);
        assert_eq!(b[(3, 1)], 0.0);
    }

    #[test]
    fn effort_term_is_signed() {
        let g = two_bus(vec![]);
        let mut c = MpcConfig::new(&g, 0.01, 0.01).with_regime(Regime::CONST_VAR);
        c.power_cost = vec![1.0];
        c.power_base = 1.0;
        let state = SystemState::at_equilibrium(&g).unwrap();
        let plan = vec![ControlInput::reference(&g)];
        let p0 = g.injections_at_time(0.0);
        let nom = rollout(&g, &state, &plan, &p0, 0.01, &Scope::all(&g), None);
        let ltv = linearize_dynamics(&g, &nom, &plan, &p0, 0.01);
        let hp = assemble_horizon_program(&g, &state, &ltv, &c, &Scope::all(&g)).unwrap();
        let mut x = DVector::zeros(hp.map.n_vars());
        x[hp.map.power(0, 0).unwrap()] = -3.0;
        assert_relative_eq!(hp.objective_summary(&x).effort, -0.03, epsilon = 1e-15);
    }

    #[test]
    fn equilibrium_without_disturbance_applies_reference() {
        let g = two_bus(vec![]);
        let state = SystemState::at_equilibrium(&g).unwrap();
        let r = mpc_solve_horizon(&g, &state, &cfg(&g)).unwrap();
        let reference = ControlInput::reference(&g);
        for s in 0..1 {
            assert!((r.applied.power[s] - reference.power[s]).abs() < 1e-9);
            assert!((r.applied.inertia[s] - reference.inertia[s]).abs() < 1e-9);
        }
        assert!(r.predicted.iter().all(|s| s.max_abs_omega() < 1e-9));
        assert!(r.objective.total.abs() < 1e-9);
    }

    #[test]
    fn pinned_sequence_clamps_at_energy_floor() {
        let g = two_bus(vec![]);
        let (seq, clamped) = pinned_power(&g, 0, -44.98, 3, 0.01);
        assert!(clamped);
        assert_relative_eq!(seq[0], -2.0, epsilon = 1e-9);
        assert_relative_eq!(seq[1], 0.0, epsilon = 1e-9);
        let (seq, clamped) = pinned_power(&g, 0, 0.0, 3, 0.01);
        assert!(!clamped && seq.iter().all(|&p| p == -3.0));
    }

    #[test]
    fn config_rejects_bad_values() {
        let g = two_bus(vec![]);
        let mut c = cfg(&g);
        c.power_cost = vec![-1.0];
        assert!(matches!(c.validate(&g), Err(MpcError::Config(_))));
        let mut c = cfg(&g);
        c.sqp.trust_power = 0.0;
        assert!(c.validate(&g).is_err());
        let mut c = cfg(&g);
        c.omega_limits = vec![(5, 1.0)];
        assert!(c.validate(&g).is_err());
    }

    #[test]
    fn free_power_cancels_a_local_step() {
        // A load step at the storage bus is cancelled exactly by shifting P.
        let g = two_bus(vec![DisturbanceEvent { bus: BusId(1), time: 0.0, delta_p: 0.2 }]);
        let state = SystemState::at_equilibrium(&g).unwrap();
        let c = cfg(&g).with_regime(Regime::CONST_VAR);
        let r = mpc_solve_horizon(&g, &state, &c).unwrap();
        assert!((r.applied.power[0] - (-3.2)).abs() < 1e-6, "{:?}", r.applied);
        assert_eq!(r.applied.inertia[0], 8.0);
        assert!(r.predicted.iter().all(|s| s.max_abs_omega() < 1e-6));
    }
}
