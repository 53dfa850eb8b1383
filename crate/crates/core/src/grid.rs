//! Static network description: buses, lines, disturbances and the lossless
//! steady-state power flow used to initialise simulations.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Tolerance on the sum of nominal injections for a valid steady state.
pub const BALANCE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("network is not connected: bus {0} is unreachable from bus 0")]
    Disconnected(usize),
    #[error("injections are not balanced (residual {0:.3e} p.u.)")]
    Imbalance(f64),
    #[error("steady state not found after {iterations} Newton iterations (residual {residual:.3e})")]
    InfeasibleSteadyState { iterations: usize, residual: f64 },
}

fn param(msg: impl Into<String>) -> GridError {
    GridError::Parameter(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BusId(pub usize);

impl std::fmt::Display for BusId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Storage interface parameters. Power is positive when discharging into the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StorageParams {
    pub inertia_min: f64,
    pub inertia_max: f64,
    pub damping: f64,
    pub power_min: f64,
    pub power_max: f64,
    pub energy_min: f64,
    pub energy_max: f64,
    pub initial_energy: f64,
    /// Power set-point in the pre-disturbance operating point.
    pub reference_power: f64,
    /// Virtual inertia used when the inertia is not a decision variable.
    pub reference_inertia: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BusRole {
    /// Inertia-bearing bus (synchronous machine or motor load).
    Generator { inertia: f64, damping: f64 },
    /// First-order bus without inertia.
    Load { damping: f64 },
    Storage(StorageParams),
}

impl BusRole {
    pub fn kind(&self) -> &'static str {
        match self {
            BusRole::Generator { .. } => "generator",
            BusRole::Load { .. } => "load",
            BusRole::Storage(_) => "storage",
        }
    }

    pub fn has_inertia(&self) -> bool {
        !matches!(self, BusRole::Load { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: BusId,
    pub role: BusRole,
    /// Nominal injection P^0 (mechanical input minus demand), p.u.
    pub injection: f64,
}

/// Physical description a line susceptance was derived from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineGeometry {
    pub reactance_per_km: f64,
    pub length_km: f64,
    pub transformer_reactance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub from: BusId,
    pub to: BusId,
    pub susceptance: f64,
    pub geometry: Option<LineGeometry>,
}

impl Line {
    pub fn new(from: usize, to: usize, susceptance: f64) -> Self {
        Line { from: BusId(from), to: BusId(to), susceptance, geometry: None }
    }

    pub fn from_geometry(from: usize, to: usize, geometry: LineGeometry) -> Result<Self, GridError> {
        let susceptance = line_susceptance(
            geometry.reactance_per_km,
            geometry.length_km,
            geometry.transformer_reactance,
        )?;
        Ok(Line { from: BusId(from), to: BusId(to), susceptance, geometry: Some(geometry) })
    }
}

/// Step change of the nominal injection at `bus`, effective from `time` onward.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceEvent {
    pub bus: BusId,
    pub time: f64,
    pub delta_p: f64,
}

impl DisturbanceEvent {
    /// Index of the first simulation step that sees this event (rounded down).
    pub fn step_index(&self, ts: f64) -> usize {
        (self.time / ts + 1e-9).floor() as usize
    }
}

/// Susceptance of a lossless line; resistance is discarded.
pub fn line_susceptance(
    reactance_per_km: f64,
    length_km: f64,
    transformer_reactance: f64,
) -> Result<f64, GridError> {
    let total = reactance_per_km * length_km + transformer_reactance;
    if !(total > 0.0) || !total.is_finite() {
        return Err(param(format!("total line reactance must be positive, got {total}")));
    }
    Ok(1.0 / total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceReport {
    pub generation: f64,
    pub load: f64,
    pub residual: f64,
    pub balanced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSolution {
    pub angles: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Validated, immutable network model.
#[derive(Debug, Clone, PartialEq)]
pub struct GridModel {
    buses: Vec<Bus>,
    lines: Vec<Line>,
    reference_bus: BusId,
    disturbances: Vec<DisturbanceEvent>,
    adjacency: Vec<Vec<(usize, f64)>>,
    inertia_index: Vec<Option<usize>>,
    storage_index: Vec<Option<usize>>,
    inertia_buses: Vec<usize>,
    storage_buses: Vec<usize>,
}

impl GridModel {
    /// Builds and validates a model. `reference_bus` defaults to the first generator bus.
    pub fn new(
        buses: Vec<Bus>,
        lines: Vec<Line>,
        reference_bus: Option<BusId>,
        disturbances: Vec<DisturbanceEvent>,
    ) -> Result<Self, GridError> {
        let n = buses.len();
        for (k, bus) in buses.iter().enumerate() {
            if bus.id.0 != k {
                return Err(param(format!(
                    "bus ids must be dense and ordered: position {k} holds bus {}",
                    bus.id
                )));
            }
            if !bus.injection.is_finite() {
                return Err(param(format!("bus {k}: injection must be finite")));
            }
            validate_role(k, &bus.role)?;
        }

        let mut adjacency = vec![Vec::new(); n];
        let mut seen = std::collections::HashSet::new();
        for line in &lines {
            let (i, j) = (line.from.0, line.to.0);
            if i >= n || j >= n {
                return Err(param(format!("line {i}-{j} references an unknown bus")));
            }
            if i == j {
                return Err(param(format!("line {i}-{j} is a self loop")));
            }
            if !(line.susceptance > 0.0) || !line.susceptance.is_finite() {
                return Err(param(format!("line {i}-{j}: susceptance must be positive")));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(param(format!("parallel line {i}-{j}: aggregate it first")));
            }
            adjacency[i].push((j, line.susceptance));
            adjacency[j].push((i, line.susceptance));
        }

        if n > 0 {
            let mut visited = vec![false; n];
            let mut queue = VecDeque::from([0usize]);
            visited[0] = true;
            while let Some(i) = queue.pop_front() {
                for &(j, _) in &adjacency[i] {
                    if !visited[j] {
                        visited[j] = true;
                        queue.push_back(j);
                    }
                }
            }
            if let Some(k) = visited.iter().position(|v| !v) {
                return Err(GridError::Disconnected(k));
            }
        }

        let reference_bus = match reference_bus {
            Some(r) => r,
            None => buses
                .iter()
                .find(|b| matches!(b.role, BusRole::Generator { .. }))
                .map(|b| b.id)
                .unwrap_or(BusId(0)),
        };
        if n > 0 && reference_bus.0 >= n {
            return Err(param(format!("reference bus {reference_bus} does not exist")));
        }

        for ev in &disturbances {
            if ev.bus.0 >= n {
                return Err(param(format!("disturbance at unknown bus {}", ev.bus)));
            }
            if !(ev.time >= 0.0) || !ev.delta_p.is_finite() {
                return Err(param(format!(
                    "disturbance at bus {}: time must be >= 0 and delta finite",
                    ev.bus
                )));
            }
        }

        let mut inertia_index = vec![None; n];
        let mut storage_index = vec![None; n];
        let mut inertia_buses = Vec::new();
        let mut storage_buses = Vec::new();
        for bus in &buses {
            if bus.role.has_inertia() {
                inertia_index[bus.id.0] = Some(inertia_buses.len());
                inertia_buses.push(bus.id.0);
            }
            if matches!(bus.role, BusRole::Storage(_)) {
                storage_index[bus.id.0] = Some(storage_buses.len());
                storage_buses.push(bus.id.0);
            }
        }

        Ok(GridModel {
            buses,
            lines,
            reference_bus,
            disturbances,
            adjacency,
            inertia_index,
            storage_index,
            inertia_buses,
            storage_buses,
        })
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }
    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }
    pub fn bus(&self, i: usize) -> &Bus {
        &self.buses[i]
    }
    pub fn lines(&self) -> &[Line] {
        &self.lines
    }
    pub fn reference_bus(&self) -> BusId {
        self.reference_bus
    }
    pub fn disturbances(&self) -> &[DisturbanceEvent] {
        &self.disturbances
    }
    /// Neighbours of bus `i` with the connecting susceptance.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }
    /// Buses carrying a frequency state (generators and storage), in bus order.
    pub fn inertia_buses(&self) -> &[usize] {
        &self.inertia_buses
    }
    pub fn storage_buses(&self) -> &[usize] {
        &self.storage_buses
    }
    pub fn inertia_index(&self, bus: usize) -> Option<usize> {
        self.inertia_index.get(bus).copied().flatten()
    }
    pub fn storage_index(&self, bus: usize) -> Option<usize> {
        self.storage_index.get(bus).copied().flatten()
    }
    pub fn storage_params(&self, storage: usize) -> &StorageParams {
        match &self.buses[self.storage_buses[storage]].role {
            BusRole::Storage(p) => p,
            _ => unreachable!("storage index maps to a storage bus"),
        }
    }

    /// Returns a copy with a different disturbance schedule.
    pub fn with_disturbances(&self, disturbances: Vec<DisturbanceEvent>) -> Result<Self, GridError> {
        GridModel::new(
            self.buses.clone(),
            self.lines.clone(),
            Some(self.reference_bus),
            disturbances,
        )
    }

    /// Electrical outflow Σ_j b_ij sin(δ_i − δ_j) at bus `i`.
    pub fn network_injection(&self, angles: &[f64], i: usize) -> f64 {
        self.adjacency[i]
            .iter()
            .map(|&(j, b)| b * (angles[i] - angles[j]).sin())
            .sum()
    }

    pub fn network_injections(&self, angles: &[f64]) -> Vec<f64> {
        (0..self.n_buses()).map(|i| self.network_injection(angles, i)).collect()
    }

    /// Nominal injections P^0 at step `k` of a simulation with step `ts`,
    /// including every disturbance whose (rounded-down) step index is ≤ k.
    pub fn injections_at_step(&self, k: usize, ts: f64) -> Vec<f64> {
        let mut p: Vec<f64> = self.buses.iter().map(|b| b.injection).collect();
        for ev in &self.disturbances {
            if ev.step_index(ts) <= k {
                p[ev.bus.0] += ev.delta_p;
            }
        }
        p
    }

    /// Nominal injections at continuous time `t`.
    pub fn injections_at_time(&self, t: f64) -> Vec<f64> {
        let mut p: Vec<f64> = self.buses.iter().map(|b| b.injection).collect();
        for ev in &self.disturbances {
            if ev.time <= t {
                p[ev.bus.0] += ev.delta_p;
            }
        }
        p
    }

    /// Steady-state injections: P^0 plus storage reference power, before disturbances.
    pub fn steady_injections(&self) -> Vec<f64> {
        self.buses
            .iter()
            .map(|b| match &b.role {
                BusRole::Storage(s) => b.injection + s.reference_power,
                _ => b.injection,
            })
            .collect()
    }

    pub fn check_power_balance(&self) -> BalanceReport {
        let p = self.steady_injections();
        let generation: f64 = p.iter().filter(|&&x| x > 0.0).sum();
        let load: f64 = -p.iter().filter(|&&x| x < 0.0).sum::<f64>();
        let residual = generation - load;
        BalanceReport { generation, load, residual, balanced: residual.abs() <= BALANCE_TOL }
    }

    /// Lossless power flow with the reference angle pinned to zero.
    pub fn solve_equilibrium(&self) -> Result<EquilibriumSolution, GridError> {
        self.solve_equilibrium_from(&vec![0.0; self.n_buses()])
    }

    /// Damped Newton iteration on the lossless power-flow equations.
    pub fn solve_equilibrium_from(&self, initial: &[f64]) -> Result<EquilibriumSolution, GridError> {
        const MAX_ITER: usize = 50;
        const TOL: f64 = 1e-12;

        let n = self.n_buses();
        if initial.len() != n {
            return Err(param("initial angle vector has the wrong length"));
        }
        let report = self.check_power_balance();
        if !report.balanced {
            return Err(GridError::Imbalance(report.residual));
        }
        if n == 0 {
            return Ok(EquilibriumSolution { angles: Vec::new(), iterations: 0, residual: 0.0 });
        }
        let target = self.steady_injections();
        let r = self.reference_bus.0;
        let free: Vec<usize> = (0..n).filter(|&i| i != r).collect();

        let mut angles = initial.to_vec();
        let shift = angles[r];
        angles.iter_mut().for_each(|a| *a -= shift);

        let mismatch = |angles: &[f64]| -> DVector<f64> {
            DVector::from_iterator(
                free.len(),
                free.iter().map(|&i| self.network_injection(angles, i) - target[i]),
            )
        };

        let mut f = mismatch(&angles);
        let mut residual = f.amax();
        let mut iterations = 0;
        while residual >= TOL {
            if iterations == MAX_ITER {
                return Err(GridError::InfeasibleSteadyState { iterations, residual });
            }
            iterations += 1;

            let mut jac = DMatrix::zeros(free.len(), free.len());
            let pos: Vec<Option<usize>> = {
                let mut p = vec![None; n];
                free.iter().enumerate().for_each(|(k, &i)| p[i] = Some(k));
                p
            };
            for (row, &i) in free.iter().enumerate() {
                for &(j, b) in &self.adjacency[i] {
                    let c = b * (angles[i] - angles[j]).cos();
                    jac[(row, row)] += c;
                    if let Some(col) = pos[j] {
                        jac[(row, col)] -= c;
                    }
                }
            }
            let step = jac
                .lu()
                .solve(&f)
                .ok_or(GridError::InfeasibleSteadyState { iterations, residual })?;

            let mut alpha = 1.0;
            loop {
                let mut trial = angles.clone();
                for (k, &i) in free.iter().enumerate() {
                    trial[i] -= alpha * step[k];
                }
                let f_trial = mismatch(&trial);
                if f_trial.norm() < f.norm() || alpha < 1e-6 {
                    angles = trial;
                    f = f_trial;
                    break;
                }
                alpha *= 0.5;
            }
            residual = f.amax();
        }
        Ok(EquilibriumSolution { angles, iterations, residual })
    }
}

fn validate_role(k: usize, role: &BusRole) -> Result<(), GridError> {
    let positive = |name: &str, v: f64| {
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(param(format!("bus {k}: {name} must be positive, got {v}")))
        }
    };
    match role {
        BusRole::Generator { inertia, damping } => {
            positive("inertia", *inertia)?;
            positive("damping", *damping)
        }
        BusRole::Load { damping } => positive("damping", *damping),
        BusRole::Storage(s) => {
            positive("inertia_min", s.inertia_min)?;
            positive("damping", s.damping)?;
            let ordered = |lo_name: &str, lo: f64, hi_name: &str, hi: f64| {
                if lo <= hi && lo.is_finite() && hi.is_finite() {
                    Ok(())
                } else {
                    Err(param(format!("bus {k}: {lo_name} ({lo}) must not exceed {hi_name} ({hi})")))
                }
            };
            ordered("inertia_min", s.inertia_min, "inertia_max", s.inertia_max)?;
            ordered("inertia_min", s.inertia_min, "reference_inertia", s.reference_inertia)?;
            ordered("reference_inertia", s.reference_inertia, "inertia_max", s.inertia_max)?;
            ordered("power_min", s.power_min, "power_max", s.power_max)?;
            ordered("power_min", s.power_min, "reference_power", s.reference_power)?;
            ordered("reference_power", s.reference_power, "power_max", s.power_max)?;
            ordered("energy_min", s.energy_min, "initial_energy", s.initial_energy)?;
            ordered("initial_energy", s.initial_energy, "energy_max", s.energy_max)
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn storage(reference_power: f64, reference_inertia: f64) -> StorageParams {
        StorageParams {
            inertia_min: 1.0,
            inertia_max: 15.0,
            damping: 1.0,
            power_min: -5.0,
            power_max: 5.0,
            energy_min: -45.0,
            energy_max: 10.0,
            initial_energy: 0.0,
            reference_power,
            reference_inertia,
        }
    }

    /// Generator at bus 0 feeding a charging storage at bus 1 over b = 50.
    pub(crate) fn two_bus(disturbances: Vec<DisturbanceEvent>) -> GridModel {
        GridModel::new(
            vec![
                Bus { id: BusId(0), role: BusRole::Generator { inertia: 3.0, damping: 1.0 }, injection: 3.0 },
                Bus { id: BusId(1), role: BusRole::Storage(storage(-3.0, 8.0)), injection: 0.0 },
            ],
            vec![Line::new(0, 1, 50.0)],
            Some(BusId(1)),
            disturbances,
        )
        .unwrap()
    }

    #[test]
    fn susceptance_from_geometry() {
        assert_relative_eq!(line_susceptance(0.001, 10.0, 0.0).unwrap(), 100.0, epsilon = 1e-12);
        assert_relative_eq!(line_susceptance(0.001, 0.0, 0.15).unwrap(), 1.0 / 0.15, epsilon = 1e-12);
        assert_relative_eq!(
            line_susceptance(0.001, 25.0, 0.15).unwrap(),
            5.714285714285714,
            epsilon = 1e-12
        );
        assert!(line_susceptance(0.001, 0.0, 0.0).is_err());
        assert!(line_susceptance(-0.001, 10.0, 0.0).is_err());
    }

    #[test]
    fn injection_two_bus() {
        let g = two_bus(vec![]);
        assert_eq!(g.network_injection(&[0.0, 0.0], 0), 0.0);
        assert_relative_eq!(g.network_injection(&[0.06, 0.0], 0), 50.0 * 0.06f64.sin(), epsilon = 1e-15);
        assert_relative_eq!(g.network_injection(&[0.06, 0.0], 0), 2.998201, epsilon = 1e-6);
        let total: f64 = g.network_injections(&[0.06, 0.0]).iter().sum();
        assert!(total.abs() < 1e-15);
    }

    #[test]
    fn equilibrium_two_bus_closed_form() {
        let g = two_bus(vec![]);
        let sol = g.solve_equilibrium().unwrap();
        assert_eq!(sol.angles[1], 0.0);
        assert_relative_eq!(sol.angles[0], 0.06f64.asin(), epsilon = 1e-12);
        let again = g.solve_equilibrium_from(&sol.angles).unwrap();
        assert!(again.iterations <= 1);
    }

    #[test]
    fn equilibrium_zero_injection() {
        let mut s = storage(0.0, 8.0);
        s.reference_power = 0.0;
        let g = GridModel::new(
            vec![
                Bus { id: BusId(0), role: BusRole::Generator { inertia: 3.0, damping: 1.0 }, injection: 0.0 },
                Bus { id: BusId(1), role: BusRole::Load { damping: 1.0 }, injection: 0.0 },
                Bus { id: BusId(2), role: BusRole::Storage(s), injection: 0.0 },
            ],
            vec![Line::new(0, 1, 10.0), Line::new(1, 2, 20.0), Line::new(0, 2, 5.0)],
            None,
            vec![],
        )
        .unwrap();
        assert_eq!(g.reference_bus(), BusId(0));
        assert!(g.solve_equilibrium().unwrap().angles.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn imbalance_is_rejected() {
        let g = GridModel::new(
            vec![
                Bus { id: BusId(0), role: BusRole::Generator { inertia: 3.0, damping: 1.0 }, injection: 3.1 },
                Bus { id: BusId(1), role: BusRole::Storage(storage(-3.0, 8.0)), injection: 0.0 },
            ],
            vec![Line::new(0, 1, 50.0)],
            None,
            vec![],
        )
        .unwrap();
        assert!(!g.check_power_balance().balanced);
        assert!(matches!(g.solve_equilibrium(), Err(GridError::Imbalance(_))));
    }

    #[test]
    fn overloaded_line_has_no_steady_state() {
        let g = GridModel::new(
            vec![
                Bus { id: BusId(0), role: BusRole::Generator { inertia: 3.0, damping: 1.0 }, injection: 60.0 },
                Bus { id: BusId(1), role: BusRole::Load { damping: 1.0 }, injection: -60.0 },
            ],
            vec![Line::new(0, 1, 50.0)],
            None,
            vec![],
        )
        .unwrap();
        assert!(matches!(
            g.solve_equilibrium(),
            Err(GridError::InfeasibleSteadyState { .. })
        ));
    }

    #[test]
    fn balance_report() {
        let g = two_bus(vec![]);
        let r = g.check_power_balance();
        assert_eq!((r.generation, r.load, r.residual), (3.0, 3.0, 0.0));
        let empty = GridModel::new(vec![], vec![], None, vec![]).unwrap();
        let r = empty.check_power_balance();
        assert_eq!((r.generation, r.load, r.residual), (0.0, 0.0, 0.0));
    }

    #[test]
    fn validation_failures() {
        let gen = |id| Bus { id: BusId(id), role: BusRole::Generator { inertia: 3.0, damping: 1.0 }, injection: 0.0 };
        // negative damping
        let bad = Bus { id: BusId(1), role: BusRole::Generator { inertia: 3.0, damping: -1.0 }, injection: 0.0 };
        assert!(GridModel::new(vec![gen(0), bad], vec![Line::new(0, 1, 1.0)], None, vec![]).is_err());
        // disconnected
        assert!(matches!(
            GridModel::new(vec![gen(0), gen(1)], vec![], None, vec![]),
            Err(GridError::Disconnected(1))
        ));
        // parallel lines
        assert!(GridModel::new(
            vec![gen(0), gen(1)],
            vec![Line::new(0, 1, 1.0), Line::new(1, 0, 2.0)],
            None,
            vec![]
        )
        .is_err());
        // inverted storage bounds
        let mut s = storage(-3.0, 8.0);
        s.inertia_min = 20.0;
        let sb = Bus { id: BusId(1), role: BusRole::Storage(s), injection: 0.0 };
        assert!(GridModel::new(vec![gen(0), sb], vec![Line::new(0, 1, 1.0)], None, vec![]).is_err());
        // initial energy outside window
        let mut s = storage(-3.0, 8.0);
        s.initial_energy = 11.0;
        let sb = Bus { id: BusId(1), role: BusRole::Storage(s), injection: 0.0 };
        assert!(GridModel::new(vec![gen(0), sb], vec![Line::new(0, 1, 1.0)], None, vec![]).is_err());
    }

    #[test]
    fn disturbance_step_rounds_down() {
        let ev = DisturbanceEvent { bus: BusId(0), time: 0.015, delta_p: 0.2 };
        assert_eq!(ev.step_index(0.01), 1);
        let ev = DisturbanceEvent { bus: BusId(0), time: 0.03, delta_p: 0.2 };
        assert_eq!(ev.step_index(0.01), 3);
        let g = two_bus(vec![ev]);
        assert_eq!(g.injections_at_step(2, 0.01)[0], 3.0);
        assert_eq!(g.injections_at_step(3, 0.01)[0], 3.2);
    }
}
