//! Distributed MPC by proximal consensus ADMM on duplicated boundary angles.
//!
//! Every area models its own buses and keeps copies of the foreign angles its
//! tie lines reach. For each tie line `(i ∈ a, j ∈ a′)` and step `k` two
//! equalities tie a copy to its owner: `δ_j^(a)(k) = δ_j^(a′)(k)` and
//! `δ_i^(a′)(k) = δ_i^(a)(k)`. One round solves every area against the
//! previous consensus, then averages each copy with its owner and moves the
//! multiplier by `ρ·(copy − owner)`.
//!
//! The x-update of a copy minimizes `λ·c + ρ·(c − z)² + τ/2·(c − c_prev)²`,
//! an owner `−λ·o + ρ·(o − z)² + τ/2·(o − o_prev)²`, with `z` the previous
//! average. This is consensus ADMM with penalty `2ρ` plus a proximal term.

use nalgebra::DVector;
use thiserror::Error;

use crate::dynamics::{
    simulate, ControlInput, ControlPolicy, PolicyError, SimOptions, SimulationError, SystemState, Trajectory,
};
use crate::grid::GridModel;
use crate::mpc::{
    assemble_horizon_program, linearize_dynamics, pack_control, pack_state, rollout, shift_plan, HorizonProgram,
    MpcConfig, MpcError, MpcStepResult, ObjectiveSummary, ProgramKeys, Scope, StepOutcome,
};
use crate::qp::{QpSolver, SolveReport, WarmStart};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("bus {0} is assigned to more than one area")]
    Overlap(usize),
    #[error("bus {0} is not assigned to any area")]
    Missing(usize),
    #[error("bus {0} does not exist")]
    UnknownBus(usize),
    #[error("area {0} owns no bus")]
    EmptyArea(usize),
}

/// A line whose ends lie in different areas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TieLine {
    pub line: usize,
    pub from: usize,
    pub to: usize,
    pub from_area: usize,
    pub to_area: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaPartition {
    areas: Vec<Vec<usize>>,
    area_of: Vec<usize>,
    ties: Vec<TieLine>,
    boundary: Vec<Vec<usize>>,
}

impl AreaPartition {
    pub fn n_areas(&self) -> usize {
        self.areas.len()
    }

    pub fn buses(&self, area: usize) -> &[usize] {
        &self.areas[area]
    }

    pub fn area_of(&self, bus: usize) -> usize {
        self.area_of[bus]
    }

    pub fn tie_lines(&self) -> &[TieLine] {
        &self.ties
    }

    /// Foreign buses referenced by lines leaving `area`, sorted.
    pub fn boundary(&self, area: usize) -> &[usize] {
        &self.boundary[area]
    }

    /// Tie lines touching `area`.
    pub fn ties_of(&self, area: usize) -> impl Iterator<Item = &TieLine> {
        self.ties.iter().filter(move |t| t.from_area == area || t.to_area == area)
    }

    pub fn single(grid: &GridModel) -> Self {
        partition_grid(grid, &vec![0; grid.n_buses()]).expect("one area covers every bus")
    }
}

/// Partition from a bus → area map; areas are numbered `0..A`.
pub fn partition_grid(grid: &GridModel, assignment: &[usize]) -> Result<AreaPartition, PartitionError> {
    let n = grid.n_buses();
    if assignment.len() < n {
        return Err(PartitionError::Missing(assignment.len()));
    }
    if assignment.len() > n {
        return Err(PartitionError::UnknownBus(n));
    }
    let n_areas = assignment.iter().max().map_or(0, |m| m + 1);
    let mut areas = vec![Vec::new(); n_areas];
    for (bus, &a) in assignment.iter().enumerate() {
        areas[a].push(bus);
    }
    if let Some(a) = areas.iter().position(|b| b.is_empty()) {
        return Err(PartitionError::EmptyArea(a));
    }
    let ties: Vec<TieLine> = grid
        .lines()
        .iter()
        .enumerate()
        .filter(|(_, l)| assignment[l.from.0] != assignment[l.to.0])
        .map(|(k, l)| {
            let (from, to) = (l.from.0, l.to.0);
            TieLine { line: k, from, to, from_area: assignment[from], to_area: assignment[to] }
        })
        .collect();
    let boundary = areas
        .iter()
        .map(|buses| Scope::area(grid, buses).foreign_buses().to_vec())
        .collect();
    Ok(AreaPartition { areas, area_of: assignment.to_vec(), ties, boundary })
}

/// Partition from explicit bus lists, rejecting overlaps and gaps by bus.
pub fn partition_from_areas(grid: &GridModel, areas: &[Vec<usize>]) -> Result<AreaPartition, PartitionError> {
    let n = grid.n_buses();
    let mut assignment = vec![usize::MAX; n];
    for (a, buses) in areas.iter().enumerate() {
        if buses.is_empty() {
            return Err(PartitionError::EmptyArea(a));
        }
        for &b in buses {
            if b >= n {
                return Err(PartitionError::UnknownBus(b));
            }
            if assignment[b] != usize::MAX {
                return Err(PartitionError::Overlap(b));
            }
            assignment[b] = a;
        }
    }
    if let Some(b) = assignment.iter().position(|&a| a == usize::MAX) {
        return Err(PartitionError::Missing(b));
    }
    partition_grid(grid, &assignment)
}

/// `δ_bus` held by `owner` must equal its copy held by `copy`, at step `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CouplingEquality {
    pub bus: usize,
    pub owner: usize,
    pub copy: usize,
    pub k: usize,
}

/// Two equalities per tie line and step, steps `1..=K`.
pub fn build_coupling(partition: &AreaPartition, horizon: usize) -> Vec<CouplingEquality> {
    let mut out = Vec::with_capacity(2 * partition.ties.len() * horizon);
    for k in 1..=horizon {
        for t in &partition.ties {
            out.push(CouplingEquality { bus: t.to, owner: t.to_area, copy: t.from_area, k });
            out.push(CouplingEquality { bus: t.from, owner: t.from_area, copy: t.to_area, k });
        }
    }
    out
}

/// Index pair `(area, slot)` of one end of a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotRef {
    pub area: usize,
    pub slot: usize,
}

/// A coupling equality in slot coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Link {
    pub copy: SlotRef,
    pub owner: SlotRef,
}

/// A block of the consensus problem: minimizes its local objective plus
/// `Σ_slots ½·w_slot·x² + lin_slot·x` over its coupled slots and returns them.
/// The weights are fixed at construction (see [`slot_weights`]).
pub trait ConsensusArea {
    fn n_slots(&self) -> usize;
    fn solve(&mut self, lin: &[f64]) -> Result<Vec<f64>, MpcError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmSettings {
    pub rho: f64,
    pub tau: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        AdmmSettings { rho: 1.0, tau: 0.1, tol: 1e-4, max_iter: 500 }
    }
}

impl AdmmSettings {
    pub fn validate(&self) -> Result<(), MpcError> {
        if !(self.rho > 0.0) || !(self.tau > 0.0) || !(self.tol > 0.0) || self.max_iter < 1 {
            return Err(MpcError::Config("ADMM needs ρ > 0, τ > 0, tol > 0 and max_iter >= 1".into()));
        }
        Ok(())
    }
}

/// Quadratic weight each area must add on each of its slots.
pub fn slot_weights(links: &[Link], slots: &[usize], settings: &AdmmSettings) -> Vec<Vec<f64>> {
    let mut w: Vec<Vec<f64>> = slots.iter().map(|&n| vec![settings.tau; n]).collect();
    for l in links {
        w[l.copy.area][l.copy.slot] += 2.0 * settings.rho;
        w[l.owner.area][l.owner.slot] += 2.0 * settings.rho;
    }
    w
}

/// Multipliers, averages and last slot values shared across rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusState {
    pub rho: f64,
    pub tau: f64,
    /// One multiplier per link.
    pub lambda: Vec<f64>,
    /// Average of copy and owner per link.
    pub z: Vec<f64>,
    /// Last slot values per area (proximal centers).
    pub values: Vec<Vec<f64>>,
}

impl ConsensusState {
    /// Starts from slot values `values`, zero multipliers unless given.
    pub fn new(links: &[Link], values: Vec<Vec<f64>>, lambda: Option<Vec<f64>>, settings: &AdmmSettings) -> Self {
        let z = links.iter().map(|l| 0.5 * (values[l.copy.area][l.copy.slot] + values[l.owner.area][l.owner.slot])).collect();
        ConsensusState {
            rho: settings.rho,
            tau: settings.tau,
            lambda: lambda.unwrap_or_else(|| vec![0.0; links.len()]),
            z,
            values,
        }
    }

    /// Largest `|copy − owner|` over the links.
    pub fn mismatch(&self, links: &[Link]) -> f64 {
        links
            .iter()
            .map(|l| (self.values[l.copy.area][l.copy.slot] - self.values[l.owner.area][l.owner.slot]).abs())
            .fold(0.0, f64::max)
    }

    /// Linear x-update terms for every slot of `area`.
    fn linear_terms(&self, links: &[Link], area: usize) -> Vec<f64> {
        let mut lin: Vec<f64> = self.values[area].iter().map(|v| -self.tau * v).collect();
        for (e, l) in links.iter().enumerate() {
            if l.copy.area == area {
                lin[l.copy.slot] += self.lambda[e] - 2.0 * self.rho * self.z[e];
            }
            if l.owner.area == area {
                lin[l.owner.slot] += -self.lambda[e] - 2.0 * self.rho * self.z[e];
            }
        }
        lin
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundResiduals {
    /// Largest copy/owner mismatch after the round.
    pub primal: f64,
    /// `2ρ·max|z⁺ − z|`.
    pub dual: f64,
}

/// Messages one round exchanges: boundary values per link end and multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeRecord {
    pub copies: Vec<f64>,
    pub owners: Vec<f64>,
    pub lambda: Vec<f64>,
}

/// One synchronous round in area order `order`: every area solves against the
/// state from the previous round, then the barrier updates `z` and `λ` link
/// by link, so the result does not depend on `order`.
pub fn pdc_admm_step_ordered<A: ConsensusArea + ?Sized>(
    areas: &mut [&mut A],
    links: &[Link],
    state: &mut ConsensusState,
    order: &[usize],
) -> Result<(RoundResiduals, ExchangeRecord), MpcError> {
    let mut fresh: Vec<Option<Vec<f64>>> = vec![None; areas.len()];
    for &a in order {
        let lin = state.linear_terms(links, a);
        fresh[a] = Some(areas[a].solve(&lin)?);
    }
    for (a, v) in fresh.into_iter().enumerate() {
        state.values[a] = v.expect("every area solved in the round");
    }
    let mut record = ExchangeRecord { copies: Vec::new(), owners: Vec::new(), lambda: Vec::new() };
    let mut dual = 0.0f64;
    for (e, l) in links.iter().enumerate() {
        let c = state.values[l.copy.area][l.copy.slot];
        let o = state.values[l.owner.area][l.owner.slot];
        let z = 0.5 * (c + o);
        dual = dual.max(2.0 * state.rho * (z - state.z[e]).abs());
        state.z[e] = z;
        state.lambda[e] += state.rho * (c - o);
        record.copies.push(c);
        record.owners.push(o);
        record.lambda.push(state.lambda[e]);
    }
    Ok((RoundResiduals { primal: state.mismatch(links), dual }, record))
}

pub fn pdc_admm_step<A: ConsensusArea + ?Sized>(
    areas: &mut [&mut A],
    links: &[Link],
    state: &mut ConsensusState,
) -> Result<RoundResiduals, MpcError> {
    let order: Vec<usize> = (0..areas.len()).collect();
    pdc_admm_step_ordered(areas, links, state, &order).map(|r| r.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdmmStatus {
    Converged,
    MaxIterations,
}

/// One ADMM solve: rounds until both residuals fall below `tol`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmReport {
    pub iterations: usize,
    pub primal_history: Vec<f64>,
    pub dual_history: Vec<f64>,
    /// Per area, effort plus performance of the final local solution.
    pub area_objectives: Vec<f64>,
    pub status: AdmmStatus,
}

/// Runs rounds until both residuals are below `tol` or `max_iter` is hit.
pub fn run_consensus<A: ConsensusArea + ?Sized>(
    areas: &mut [&mut A],
    links: &[Link],
    state: &mut ConsensusState,
    settings: &AdmmSettings,
) -> Result<(usize, Vec<f64>, Vec<f64>, AdmmStatus), MpcError> {
    let mut primal = Vec::new();
    let mut dual = Vec::new();
    for it in 1..=settings.max_iter {
        let r = pdc_admm_step(areas, links, state)?;
        primal.push(r.primal);
        dual.push(r.dual);
        if r.primal < settings.tol && r.dual < settings.tol {
            return Ok((it, primal, dual, AdmmStatus::Converged));
        }
    }
    Ok((settings.max_iter, primal, dual, AdmmStatus::MaxIterations))
}

/// One area's horizon program with its coupled angle columns.
pub struct AreaSubproblem {
    pub area: usize,
    pub scope: Scope,
    pub program: HorizonProgram,
    solver: QpSolver,
    base_lin: DVector<f64>,
    columns: Vec<usize>,
    pending: Option<WarmStart>,
    report: Option<SolveReport>,
}

impl AreaSubproblem {
    /// `columns[slot]` is the program column of each coupled slot and
    /// `weights[slot]` the quadratic weight added on it.
    pub fn new(
        area: usize,
        scope: Scope,
        mut program: HorizonProgram,
        columns: Vec<usize>,
        weights: &[f64],
        cfg: &MpcConfig,
        warm: Option<WarmStart>,
    ) -> Result<Self, MpcError> {
        for (&c, &w) in columns.iter().zip(weights) {
            program.program.quad[(c, c)] += w;
        }
        let base_lin = program.program.lin.clone();
        let solver = QpSolver::new(&program.program, cfg.qp.clone())?;
        Ok(AreaSubproblem { area, scope, program, solver, base_lin, columns, pending: warm, report: None })
    }

    pub fn solution(&self) -> Option<&DVector<f64>> {
        self.report.as_ref().map(|r| &r.x)
    }

    /// Report of the most recent local solve.
    pub fn report(&self) -> Option<&SolveReport> {
        self.report.as_ref()
    }

    pub fn last_iterate(&self) -> Option<&WarmStart> {
        self.solver.last_iterate()
    }

    fn solve_with(&mut self, lin: &[f64]) -> Result<Vec<f64>, MpcError> {
        let mut q = self.base_lin.clone();
        for (&c, &l) in self.columns.iter().zip(lin) {
            q[c] += l;
        }
        self.solver.set_linear_cost(&q);
        let warm = self.pending.take();
        let rep = self.solver.solve(warm.as_ref());
        if rep.status.is_infeasible() {
            return Err(MpcError::Solver(rep.status));
        }
        let out = self.columns.iter().map(|&c| rep.x[c]).collect();
        self.report = Some(rep);
        Ok(out)
    }
}

impl ConsensusArea for AreaSubproblem {
    fn n_slots(&self) -> usize {
        self.columns.len()
    }

    fn solve(&mut self, lin: &[f64]) -> Result<Vec<f64>, MpcError> {
        self.solve_with(lin)
    }
}

/// Solves one area program against fixed consensus data: base cost plus the
/// coupled linear terms `lin` (one per slot).
pub fn area_subproblem_solve(sub: &mut AreaSubproblem, lin: &[f64]) -> Result<Vec<f64>, MpcError> {
    sub.solve(lin)
}

/// Slot layout: per area the coupled `(bus, k)` pairs, and the links between them.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayout {
    pub equalities: Vec<CouplingEquality>,
    pub slots: Vec<Vec<(usize, usize)>>,
    pub links: Vec<Link>,
}

impl CouplingLayout {
    pub fn new(partition: &AreaPartition, horizon: usize) -> Self {
        let equalities = build_coupling(partition, horizon);
        let mut slots: Vec<Vec<(usize, usize)>> = vec![Vec::new(); partition.n_areas()];
        let slot_of = |area: usize, key: (usize, usize), slots: &mut Vec<Vec<(usize, usize)>>| {
            match slots[area].iter().position(|&s| s == key) {
                Some(i) => i,
                None => {
                    slots[area].push(key);
                    slots[area].len() - 1
                }
            }
        };
        let links = equalities
            .iter()
            .map(|e| Link {
                copy: SlotRef { area: e.copy, slot: slot_of(e.copy, (e.bus, e.k), &mut slots) },
                owner: SlotRef { area: e.owner, slot: slot_of(e.owner, (e.bus, e.k), &mut slots) },
            })
            .collect();
        CouplingLayout { equalities, slots, links }
    }

    pub fn slot_counts(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.len()).collect()
    }
}

/// Per control step: one ADMM report per SQP iteration.
#[derive(Debug, Clone)]
pub struct DmpcStepReport {
    pub t: f64,
    pub admm: Vec<AdmmReport>,
    pub converged: bool,
}

impl DmpcStepReport {
    pub fn total_iterations(&self) -> usize {
        self.admm.iter().map(|r| r.iterations).sum()
    }

    pub fn max_iterations(&self) -> usize {
        self.admm.iter().map(|r| r.iterations).max().unwrap_or(0)
    }

    pub fn final_residual(&self) -> f64 {
        self.admm.last().and_then(|r| r.primal_history.last().copied()).unwrap_or(0.0)
    }
}

/// State carried between control steps.
#[derive(Debug, Clone, Default)]
struct DmpcWarm {
    plan: Option<Vec<ControlInput>>,
    /// Shifted link averages and multipliers.
    z: Option<Vec<f64>>,
    lambda: Option<Vec<f64>>,
    /// Final solver iterate per area with its layout, unshifted.
    qp: Vec<Option<(WarmStart, ProgramKeys)>>,
}

/// Distributed controller as a simulation callback.
pub struct DistributedController {
    pub cfg: MpcConfig,
    pub admm: AdmmSettings,
    pub partition: AreaPartition,
    pub log: Vec<StepOutcome>,
    pub reports: Vec<DmpcStepReport>,
    layout: CouplingLayout,
    scopes: Vec<Scope>,
    warm: DmpcWarm,
}

impl DistributedController {
    pub fn new(grid: &GridModel, cfg: MpcConfig, partition: AreaPartition, admm: AdmmSettings) -> Self {
        let layout = CouplingLayout::new(&partition, cfg.steps());
        let scopes = (0..partition.n_areas()).map(|a| Scope::area(grid, partition.buses(a))).collect();
        DistributedController {
            cfg,
            admm,
            partition,
            log: Vec::new(),
            reports: Vec::new(),
            layout,
            scopes,
            warm: DmpcWarm::default(),
        }
    }

    pub fn layout(&self) -> &CouplingLayout {
        &self.layout
    }

    /// Foreign angle trajectories of `area` taken from link averages `z`,
    /// measured angles where no average exists yet.
    fn foreign_trajectories(&self, area: usize, state: &SystemState, z: Option<&[f64]>) -> Vec<Vec<f64>> {
        let kh = self.cfg.steps();
        let foreign = self.scopes[area].foreign_buses();
        (1..=kh)
            .map(|k| {
                foreign
                    .iter()
                    .map(|&b| {
                        z.and_then(|z| {
                            self.layout
                                .equalities
                                .iter()
                                .position(|e| e.copy == area && e.bus == b && e.k == k)
                                .map(|e| z[e])
                        })
                        .unwrap_or(state.angles[b])
                    })
                    .collect()
            })
            .collect()
    }

    /// One control step.
    pub fn solve_step(
        &mut self,
        grid: &GridModel,
        state: &SystemState,
        injections: &[f64],
    ) -> Result<(MpcStepResult, DmpcStepReport), MpcError> {
        let cfg = self.cfg.clone();
        let kh = cfg.steps();
        let n_areas = self.partition.n_areas();
        let mut plan = match &self.warm.plan {
            Some(p) if p.len() == kh => p.clone(),
            _ => vec![ControlInput::reference(grid); kh],
        };
        crate::mpc::sanitize_plan(grid, state, &cfg, &mut plan);
        let weights = slot_weights(&self.layout.links, &self.layout.slot_counts(), &self.admm);
        let mut z = self.warm.z.clone();
        let mut lambda = self.warm.lambda.clone();
        let mut qp_warm: Vec<Option<WarmStart>> = vec![None; n_areas];
        let mut carried = std::mem::take(&mut self.warm.qp);
        carried.resize(n_areas, None);
        let mut keys: Vec<ProgramKeys> = vec![ProgramKeys::default(); n_areas];
        let mut report = DmpcStepReport { t: state.t, admm: Vec::new(), converged: true };
        let mut last = None;

        for it in 1..=cfg.sqp.max_outer {
            let mut subs = Vec::with_capacity(n_areas);
            let mut nominals = Vec::with_capacity(n_areas);
            for a in 0..n_areas {
                let scope = self.scopes[a].clone();
                let foreign = self.foreign_trajectories(a, state, z.as_deref());
                let nominal = rollout(grid, state, &plan, injections, cfg.ts, &scope, Some(&foreign));
                if let Some(k) = nominal.iter().position(|s| !pack_state(s).iter().all(|v| v.is_finite())) {
                    return Err(MpcError::NonFinite(k));
                }
                let ltv = linearize_dynamics(grid, &nominal, &plan, injections, cfg.ts);
                let hp = assemble_horizon_program(grid, state, &ltv, &cfg, &scope)?;
                if let Some((w, from)) = carried[a].take() {
                    qp_warm[a] = from.shift_iterate(&w, &hp.keys);
                }
                keys[a] = hp.keys.clone();
                let columns: Vec<usize> =
                    self.layout.slots[a].iter().map(|&(bus, k)| hp.map.angle(k, bus).expect("coupled angle is modeled")).collect();
                let sub = AreaSubproblem::new(a, scope, hp, columns, &weights[a], &cfg, qp_warm[a].take())?;
                nominals.push(nominal);
                subs.push(sub);
            }

            // proximal centers: consensus values, or nominal angles at the start
            let values: Vec<Vec<f64>> = (0..n_areas)
                .map(|a| {
                    self.layout.slots[a]
                        .iter()
                        .map(|&(bus, k)| match &z {
                            Some(zz) => {
                                let e = self
                                    .layout
                                    .equalities
                                    .iter()
                                    .position(|e| e.bus == bus && e.k == k && (e.copy == a || e.owner == a))
                                    .unwrap();
                                zz[e]
                            }
                            None => nominals[a][k].angles[bus],
                        })
                        .collect()
                })
                .collect();
            let mut consensus = ConsensusState::new(&self.layout.links, values, lambda.clone(), &self.admm);
            let mut refs: Vec<&mut AreaSubproblem> = subs.iter_mut().collect();
            let (iterations, primal, dual, status) =
                run_consensus(&mut refs, &self.layout.links, &mut consensus, &self.admm)?;
            if status != AdmmStatus::Converged {
                report.converged = false;
                log::warn!("t={:.4}: consensus not reached after {iterations} rounds (residual {:.2e})", state.t, primal.last().copied().unwrap_or(0.0));
            }
            let area_objectives = subs
                .iter()
                .map(|s| s.solution().map_or(0.0, |x| s.program.objective_summary(x).total))
                .collect();
            report.admm.push(AdmmReport { iterations, primal_history: primal, dual_history: dual, area_objectives, status });

            // stitch the plan and the predicted states
            let mut next = plan.clone();
            let mut predicted = nominals[0].clone();
            let mut summary = ObjectiveSummary::default();
            let mut saturated = vec![false; grid.storage_buses().len()];
            for (a, sub) in subs.iter().enumerate() {
                let x = sub.solution().expect("solved at least once");
                let controls = sub.program.controls(x, &plan);
                for &s in sub.program.map.storages() {
                    for k in 0..kh {
                        next[k].power[s] = controls[k].power[s];
                        next[k].inertia[s] = controls[k].inertia[s];
                    }
                }
                let states = sub.program.states(grid, x, &nominals[a], cfg.ts);
                for k in 0..=kh {
                    for &b in sub.program.map.owned_buses() {
                        predicted[k].angles[b] = states[k].angles[b];
                        if let Some(w) = grid.inertia_index(b) {
                            predicted[k].omega[w] = states[k].omega[w];
                        }
                        if let Some(s) = grid.storage_index(b) {
                            predicted[k].energy[s] = states[k].energy[s];
                        }
                    }
                }
                let o = sub.program.objective_summary(x);
                summary.effort += o.effort;
                summary.performance += o.performance;
                summary.total += o.total;
                for (j, &s) in sub.program.map.storages().iter().enumerate() {
                    saturated[s] = sub.program.saturated[j];
                }
                qp_warm[a] = sub.last_iterate().cloned();
            }
            crate::mpc::sanitize_plan(grid, state, &cfg, &mut next);
            let change = next
                .iter()
                .zip(&plan)
                .map(|(u, v)| (pack_control(u) - pack_control(v)).amax())
                .fold(0.0, f64::max);
            plan = next;
            z = Some(consensus.z.clone());
            lambda = Some(consensus.lambda.clone());
            let qp = subs[0].report().cloned().expect("solved at least once");
            last = Some((predicted, summary, saturated, it, qp));
            if change <= cfg.sqp.tolerance {
                break;
            }
        }

        let (predicted, objective, saturated, sqp_iterations, qp) = last.expect("one outer iteration");
        self.warm = DmpcWarm {
            plan: Some(shift_plan(&plan)),
            z: z.map(|z| self.shift_links(&z)),
            lambda: lambda.map(|l| self.shift_links(&l)),
            qp: qp_warm.into_iter().zip(keys.iter().cloned()).map(|(w, k)| w.map(|w| (w, k))).collect(),
        };
        let applied = crate::mpc::project_to_boxes(grid, &plan[0]);
        let step = MpcStepResult {
            applied,
            plan,
            predicted,
            objective,
            sqp_iterations,
            qp,
            saturated,
            iterate: None,
            layout: ProgramKeys::default(),
        };
        Ok((step, report))
    }

    /// Shifts per-link data one step forward in time, repeating the last step.
    fn shift_links(&self, v: &[f64]) -> Vec<f64> {
        let eqs = &self.layout.equalities;
        let kh = self.cfg.steps();
        eqs.iter()
            .map(|e| {
                let k = (e.k + 1).min(kh);
                let j = eqs.iter().position(|f| f.bus == e.bus && f.owner == e.owner && f.copy == e.copy && f.k == k).unwrap();
                v[j]
            })
            .collect()
    }
}

impl ControlPolicy for DistributedController {
    fn control(
        &mut self,
        grid: &GridModel,
        state: &SystemState,
        _step: usize,
        injections: &[f64],
    ) -> Result<ControlInput, PolicyError> {
        match self.solve_step(grid, state, injections) {
            Ok((r, report)) => {
                let applied = r.applied.clone();
                self.reports.push(report);
                self.log.push(StepOutcome::Solved(Box::new(r)));
                Ok(applied)
            }
            Err(MpcError::Config(m)) => Err(MpcError::Config(m).into()),
            Err(e) => {
                let plan = self.warm.plan.take().unwrap_or_else(|| vec![ControlInput::reference(grid)]);
                let applied = crate::mpc::project_to_boxes(grid, &plan[0]);
                log::warn!("t={:.4}: {e}; applying fallback input", state.t);
                self.warm = DmpcWarm { plan: Some(shift_plan(&plan)), ..Default::default() };
                self.reports.push(DmpcStepReport { t: state.t, admm: Vec::new(), converged: false });
                self.log.push(StepOutcome::Fallback { error: e.to_string(), applied: applied.clone() });
                Ok(applied)
            }
        }
    }
}

/// Closed-loop run with one subproblem per area.
pub fn distributed_mpc_run(
    grid: &GridModel,
    initial: &SystemState,
    partition: &AreaPartition,
    cfg: &MpcConfig,
    admm: &AdmmSettings,
    t_total: f64,
    options: SimOptions,
) -> Result<(Trajectory, Vec<StepOutcome>, Vec<DmpcStepReport>), SimulationError> {
    let invalid = |e: MpcError| SimulationError::Controller {
        step: 0,
        t: initial.t,
        source: e.into(),
        partial: Box::new(Trajectory { ts: cfg.ts, scenario: String::new(), rows: Vec::new() }),
    };
    cfg.validate(grid).map_err(invalid)?;
    admm.validate().map_err(invalid)?;
    let mut ctl = DistributedController::new(grid, cfg.clone(), partition.clone(), admm.clone());
    let traj = simulate(grid, initial, &mut ctl, t_total, cfg.ts, options)?;
    Ok((traj, ctl.log, ctl.reports))
}
