//! Scenario files: a versioned TOML schema describing the network, the
//! disturbance schedule, simulation timing and controller settings.
//!
//! Every key is checked: unknown keys, missing fields and type mismatches are
//! reported with the field path and line. Physical validation (signs, bound
//! ordering, power balance, area overlap) runs after parsing.
//!
//! Powers may be given in p.u. (`injection`, `delta_p`) or in MW
//! (`injection_mw`, `delta_mw`) together with `grid.base_mva`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dmpc::{partition_from_areas, AdmmSettings, AreaPartition, PartitionError};
use crate::dynamics::SimOptions;
use crate::grid::{Bus, BusId, BusRole, DisturbanceEvent, GridError, GridModel, Line, LineGeometry, StorageParams};
use crate::mpc::{MpcConfig, MpcError, Regime};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    /// Syntax or schema violation, addressed by field path and line.
    #[error("{location}: {message}")]
    Schema { location: String, message: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("invalid network: {0}")]
    Grid(#[from] GridError),
    #[error("invalid area assignment: {0}")]
    Partition(#[from] PartitionError),
    #[error("invalid controller settings: {0}")]
    Mpc(#[from] MpcError),
}

impl ScenarioError {
    pub fn is_io(&self) -> bool {
        matches!(self, ScenarioError::Io { .. })
    }
}

// ---------------------------------------------------------------------------
// file schema

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub grid: GridSection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub disturbances: Vec<DisturbanceSpec>,
    pub sim: SimSection,
    #[serde(default)]
    pub mpc: MpcSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distributed: Option<DistributedSection>,
    #[serde(default)]
    pub flags: FlagsSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_mva: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_bus: Option<usize>,
    pub buses: Vec<BusSpec>,
    #[serde(default)]
    pub lines: Vec<LineSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "role", rename_all = "lowercase", deny_unknown_fields)]
pub enum BusSpec {
    Generator {
        id: usize,
        inertia: f64,
        damping: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        injection: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        injection_mw: Option<f64>,
    },
    Load {
        id: usize,
        damping: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        injection: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        injection_mw: Option<f64>,
    },
    Storage {
        id: usize,
        inertia_min: f64,
        inertia_max: f64,
        damping: f64,
        power_min: f64,
        power_max: f64,
        energy_min: f64,
        energy_max: f64,
        #[serde(default)]
        initial_energy: f64,
        reference_power: f64,
        reference_inertia: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        injection: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        injection_mw: Option<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LineSpec {
    pub from: usize,
    pub to: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub susceptance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reactance_per_km: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_km: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transformer_reactance: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSpec {
    pub bus: usize,
    pub time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_mw: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub ts: f64,
    pub t_total: f64,
}

/// One value for every item, or one value per item.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum PerItem<T> {
    All(T),
    Each(Vec<T>),
}

impl<T: Clone> PerItem<T> {
    fn expand(&self, n: usize, what: &str) -> Result<Vec<T>, ScenarioError> {
        match self {
            PerItem::All(v) => Ok(vec![v.clone(); n]),
            PerItem::Each(v) if v.len() == n => Ok(v.clone()),
            PerItem::Each(v) => Err(ScenarioError::Invalid(format!("{what}: expected {n} entries, found {}", v.len()))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct MpcSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    /// `cc`, `cv`, `vc` or `vv` (inertia letter first), per storage or for all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<PerItem<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_cost: Option<PerItem<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inertia_cost: Option<PerItem<f64>>,
    /// Per inertia-bearing bus, in bus order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency_cost: Option<PerItem<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_base: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inertia_base: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub omega_limits: Vec<OmegaLimit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit_penalty: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sqp: Option<SqpSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qp: Option<QpSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OmegaLimit {
    pub bus: usize,
    pub limit: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct SqpSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_outer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trust_power: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trust_inertia: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regularization: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct QpSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DistributedSection {
    pub areas: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FlagsSection {
    #[serde(default = "yes")]
    pub clamp_storage_power_at_energy_limit: bool,
    #[serde(default)]
    pub absolute_effort: bool,
}

fn yes() -> bool {
    true
}

impl Default for FlagsSection {
    fn default() -> Self {
        FlagsSection { clamp_storage_power_at_energy_limit: true, absolute_effort: false }
    }
}

// ---------------------------------------------------------------------------
// validated scenario

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub grid: GridModel,
    pub ts: f64,
    pub t_total: f64,
    pub mpc: MpcConfig,
    pub partition: Option<AreaPartition>,
    pub admm: AdmmSettings,
    pub options: SimOptions,
}

/// Reads and validates a scenario file.
pub fn parse_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
    let fallback = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut sc = parse_scenario_str(&text)?;
    if sc.name.is_empty() {
        sc.name = fallback;
    }
    Ok(sc)
}

pub fn parse_scenario_str(text: &str) -> Result<Scenario, ScenarioError> {
    Scenario::from_file(&read_schema(text)?)
}

/// Parses the schema only, without physical validation.
pub fn read_schema(text: &str) -> Result<ScenarioFile, ScenarioError> {
    let de = toml::Deserializer::new(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let line = inner.span().map(|s| text[..s.start.min(text.len())].lines().count().max(1));
        let location = match (line, path.as_str()) {
            (Some(l), ".") => format!("line {l}"),
            (Some(l), p) => format!("line {l}, field `{p}`"),
            (None, p) => format!("field `{p}`"),
        };
        ScenarioError::Schema { location, message: inner.message().to_string() }
    })
}

fn pu(what: &str, pu: Option<f64>, mw: Option<f64>, base: Option<f64>) -> Result<f64, ScenarioError> {
    match (pu, mw) {
        (Some(_), Some(_)) => Err(ScenarioError::Invalid(format!("{what}: give either p.u. or MW, not both"))),
        (Some(v), None) => Ok(v),
        (None, Some(v)) => match base {
            Some(b) if b > 0.0 => Ok(v / b),
            _ => Err(ScenarioError::Invalid(format!("{what}: MW value needs a positive grid.base_mva"))),
        },
        (None, None) => Ok(0.0),
    }
}

impl Scenario {
    pub fn from_file(f: &ScenarioFile) -> Result<Self, ScenarioError> {
        if f.schema_version != SCHEMA_VERSION {
            return Err(ScenarioError::Schema {
                location: "field `schema_version`".into(),
                message: format!("unsupported version {} (expected {SCHEMA_VERSION})", f.schema_version),
            });
        }
        let base = f.grid.base_mva;
        let mut buses = Vec::with_capacity(f.grid.buses.len());
        for spec in &f.grid.buses {
            let (id, role, inj, mw) = match spec {
                BusSpec::Generator { id, inertia, damping, injection, injection_mw } => {
                    (*id, BusRole::Generator { inertia: *inertia, damping: *damping }, *injection, *injection_mw)
                }
                BusSpec::Load { id, damping, injection, injection_mw } => {
                    (*id, BusRole::Load { damping: *damping }, *injection, *injection_mw)
                }
                BusSpec::Storage {
                    id,
                    inertia_min,
                    inertia_max,
                    damping,
                    power_min,
                    power_max,
                    energy_min,
                    energy_max,
                    initial_energy,
                    reference_power,
                    reference_inertia,
                    injection,
                    injection_mw,
                } => (
                    *id,
                    BusRole::Storage(StorageParams {
                        inertia_min: *inertia_min,
                        inertia_max: *inertia_max,
                        damping: *damping,
                        power_min: *power_min,
                        power_max: *power_max,
                        energy_min: *energy_min,
                        energy_max: *energy_max,
                        initial_energy: *initial_energy,
                        reference_power: *reference_power,
                        reference_inertia: *reference_inertia,
                    }),
                    *injection,
                    *injection_mw,
                ),
            };
            let injection = pu(&format!("bus {id} injection"), inj, mw, base)?;
            buses.push(Bus { id: BusId(id), role, injection });
        }
        buses.sort_by_key(|b| b.id);
        for w in buses.windows(2) {
            if w[0].id == w[1].id {
                return Err(ScenarioError::Invalid(format!("bus {} is defined twice", w[0].id)));
            }
        }

        let mut lines = Vec::with_capacity(f.grid.lines.len());
        for l in &f.grid.lines {
            let line = match (l.susceptance, l.reactance_per_km, l.length_km) {
                (Some(b), None, None) if l.transformer_reactance.is_none() => Line::new(l.from, l.to, b),
                (None, Some(x), Some(len)) => Line::from_geometry(
                    l.from,
                    l.to,
                    LineGeometry {
                        reactance_per_km: x,
                        length_km: len,
                        transformer_reactance: l.transformer_reactance.unwrap_or(0.0),
                    },
                )?,
                (None, None, None) if l.transformer_reactance.is_some() => Line::from_geometry(
                    l.from,
                    l.to,
                    LineGeometry { reactance_per_km: 0.0, length_km: 0.0, transformer_reactance: l.transformer_reactance.unwrap() },
                )?,
                _ => {
                    return Err(ScenarioError::Invalid(format!(
                        "line {}-{}: give either `susceptance` or `reactance_per_km` with `length_km`",
                        l.from, l.to
                    )))
                }
            };
            lines.push(line);
        }

        let mut disturbances = Vec::with_capacity(f.disturbances.len());
        for d in &f.disturbances {
            let delta_p = pu(&format!("disturbance at bus {}", d.bus), d.delta_p, d.delta_mw, base)?;
            disturbances.push(DisturbanceEvent { bus: BusId(d.bus), time: d.time, delta_p });
        }

        let grid = GridModel::new(buses, lines, f.grid.reference_bus.map(BusId), disturbances)?;
        let balance = grid.check_power_balance();
        if !balance.balanced {
            return Err(GridError::Imbalance(balance.residual).into());
        }

        let (ts, t_total) = (f.sim.ts, f.sim.t_total);
        if !(ts > 0.0) || !(t_total >= 0.0) || !ts.is_finite() || !t_total.is_finite() {
            return Err(ScenarioError::Invalid(format!("sim: need ts > 0 and t_total >= 0 (got {ts}, {t_total})")));
        }

        let m = &f.mpc;
        let n_s = grid.storage_buses().len();
        let n_w = grid.inertia_buses().len();
        let mut mpc = MpcConfig::new(&grid, m.horizon.unwrap_or(10.0 * ts), ts);
        if let Some(r) = &m.regime {
            mpc.regimes = r
                .expand(n_s, "mpc.regime")?
                .iter()
                .map(|c| {
                    Regime::from_code(c).ok_or_else(|| {
                        ScenarioError::Invalid(format!("mpc.regime: unknown regime `{c}` (use cc, cv, vc or vv)"))
                    })
                })
                .collect::<Result<_, _>>()?;
        }
        if let Some(c) = &m.power_cost {
            mpc.power_cost = c.expand(n_s, "mpc.power_cost")?;
        }
        if let Some(c) = &m.inertia_cost {
            mpc.inertia_cost = c.expand(n_s, "mpc.inertia_cost")?;
        }
        if let Some(c) = &m.frequency_cost {
            mpc.frequency_cost = c.expand(n_w, "mpc.frequency_cost")?;
        }
        if let Some(b) = m.power_base {
            mpc.power_base = b;
        }
        if let Some(b) = m.inertia_base {
            mpc.inertia_base = b;
        }
        mpc.omega_limits = m.omega_limits.iter().map(|l| (l.bus, l.limit)).collect();
        if let Some(p) = m.limit_penalty {
            mpc.limit_penalty = p;
        }
        if let Some(s) = &m.sqp {
            let d = &mut mpc.sqp;
            d.max_outer = s.max_outer.unwrap_or(d.max_outer);
            d.trust_power = s.trust_power.unwrap_or(d.trust_power);
            d.trust_inertia = s.trust_inertia.unwrap_or(d.trust_inertia);
            d.tolerance = s.tolerance.unwrap_or(d.tolerance);
            d.regularization = s.regularization.unwrap_or(d.regularization);
        }
        if let Some(q) = &m.qp {
            mpc.qp.tol = q.tol.unwrap_or(mpc.qp.tol);
            mpc.qp.max_iter = q.max_iter.unwrap_or(mpc.qp.max_iter);
        }
        mpc.absolute_effort = f.flags.absolute_effort;
        mpc.validate(&grid)?;

        let mut admm = AdmmSettings::default();
        let partition = match &f.distributed {
            Some(d) => {
                admm.rho = d.rho.unwrap_or(admm.rho);
                admm.tau = d.tau.unwrap_or(admm.tau);
                admm.tol = d.tol.unwrap_or(admm.tol);
                admm.max_iter = d.max_iter.unwrap_or(admm.max_iter);
                admm.validate()?;
                Some(partition_from_areas(&grid, &d.areas)?)
            }
            None => None,
        };

        Ok(Scenario {
            name: f.name.clone().unwrap_or_default(),
            grid,
            ts,
            t_total,
            mpc,
            partition,
            admm,
            options: SimOptions { clamp_storage_power_at_energy_limit: f.flags.clamp_storage_power_at_energy_limit },
        })
    }

    /// Schema form of the validated scenario, with every power in p.u.
    pub fn to_file(&self) -> ScenarioFile {
        let g = &self.grid;
        let buses = g
            .buses()
            .iter()
            .map(|b| {
                let (id, injection) = (b.id.0, Some(b.injection));
                match &b.role {
                    BusRole::Generator { inertia, damping } => {
                        BusSpec::Generator { id, inertia: *inertia, damping: *damping, injection, injection_mw: None }
                    }
                    BusRole::Load { damping } => BusSpec::Load { id, damping: *damping, injection, injection_mw: None },
                    BusRole::Storage(p) => BusSpec::Storage {
                        id,
                        inertia_min: p.inertia_min,
                        inertia_max: p.inertia_max,
                        damping: p.damping,
                        power_min: p.power_min,
                        power_max: p.power_max,
                        energy_min: p.energy_min,
                        energy_max: p.energy_max,
                        initial_energy: p.initial_energy,
                        reference_power: p.reference_power,
                        reference_inertia: p.reference_inertia,
                        injection,
                        injection_mw: None,
                    },
                }
            })
            .collect();
        let lines = g
            .lines()
            .iter()
            .map(|l| match l.geometry {
                Some(geo) => LineSpec {
                    from: l.from.0,
                    to: l.to.0,
                    susceptance: None,
                    reactance_per_km: Some(geo.reactance_per_km),
                    length_km: Some(geo.length_km),
                    transformer_reactance: Some(geo.transformer_reactance),
                },
                None => LineSpec {
                    from: l.from.0,
                    to: l.to.0,
                    susceptance: Some(l.susceptance),
                    reactance_per_km: None,
                    length_km: None,
                    transformer_reactance: None,
                },
            })
            .collect();
        let m = &self.mpc;
        ScenarioFile {
            schema_version: SCHEMA_VERSION,
            name: (!self.name.is_empty()).then(|| self.name.clone()),
            grid: GridSection { base_mva: None, reference_bus: Some(g.reference_bus().0), buses, lines },
            disturbances: g
                .disturbances()
                .iter()
                .map(|d| DisturbanceSpec { bus: d.bus.0, time: d.time, delta_p: Some(d.delta_p), delta_mw: None })
                .collect(),
            sim: SimSection { ts: self.ts, t_total: self.t_total },
            mpc: MpcSection {
                horizon: Some(m.horizon),
                regime: Some(PerItem::Each(m.regimes.iter().map(|r| r.code().to_string()).collect())),
                power_cost: Some(PerItem::Each(m.power_cost.clone())),
                inertia_cost: Some(PerItem::Each(m.inertia_cost.clone())),
                frequency_cost: Some(PerItem::Each(m.frequency_cost.clone())),
                power_base: Some(m.power_base),
                inertia_base: Some(m.inertia_base),
                omega_limits: m.omega_limits.iter().map(|&(bus, limit)| OmegaLimit { bus, limit }).collect(),
                limit_penalty: Some(m.limit_penalty),
                sqp: Some(SqpSection {
                    max_outer: Some(m.sqp.max_outer),
                    trust_power: Some(m.sqp.trust_power),
                    trust_inertia: Some(m.sqp.trust_inertia),
                    tolerance: Some(m.sqp.tolerance),
                    regularization: Some(m.sqp.regularization),
                }),
                qp: Some(QpSection { tol: Some(m.qp.tol), max_iter: Some(m.qp.max_iter) }),
            },
            distributed: self.partition.as_ref().map(|p| DistributedSection {
                areas: (0..p.n_areas()).map(|a| p.buses(a).to_vec()).collect(),
                rho: Some(self.admm.rho),
                tau: Some(self.admm.tau),
                tol: Some(self.admm.tol),
                max_iter: Some(self.admm.max_iter),
            }),
            flags: FlagsSection {
                clamp_storage_power_at_energy_limit: self.options.clamp_storage_power_at_energy_limit,
                absolute_effort: m.absolute_effort,
            },
        }
    }

    /// TOML text that parses back to this scenario.
    pub fn write(&self) -> String {
        toml::to_string(&self.to_file()).expect("scenario schema serializes")
    }
}
