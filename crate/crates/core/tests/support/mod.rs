//! Test-only oracles, independent of the library's solver paths.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use inertia_mpc::qp::ConvexProgram;

/// Solution certified by exhaustive active-set enumeration.
pub struct OracleSolution {
    pub x: DVector<f64>,
    pub eq: DVector<f64>,
    pub ineq: DVector<f64>,
    pub objective: f64,
}

/// Enumerates every subset of the inequality rows, solves the equality KKT
/// system for it and keeps the feasible, dual-feasible candidate with the
/// lowest objective. Only meaningful for tiny strictly convex programs
/// without variable bounds.
pub fn active_set_oracle(prog: &ConvexProgram) -> Option<OracleSolution> {
    let n = prog.lin.len();
    let m_eq = prog.eq_mat.nrows();
    let m_in = prog.ineq_mat.nrows();
    assert!(m_in <= 16);
    let mut best: Option<OracleSolution> = None;
    for mask in 0u32..(1 << m_in) {
        let active: Vec<usize> = (0..m_in).filter(|i| mask & (1 << i) != 0).collect();
        let k = n + m_eq + active.len();
        let mut kkt = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&prog.quad);
        for j in 0..n {
            rhs[j] = -prog.lin[j];
        }
        for r in 0..m_eq {
            for j in 0..n {
                kkt[(n + r, j)] = prog.eq_mat[(r, j)];
                kkt[(j, n + r)] = prog.eq_mat[(r, j)];
            }
            rhs[n + r] = prog.eq_rhs[r];
        }
        for (r, &i) in active.iter().enumerate() {
            let row = n + m_eq + r;
            for j in 0..n {
                kkt[(row, j)] = prog.ineq_mat[(i, j)];
                kkt[(j, row)] = prog.ineq_mat[(i, j)];
            }
            rhs[row] = prog.ineq_rhs[i];
        }
        let lu = kkt.lu();
        if lu.determinant().abs() < 1e-12 {
            continue;
        }
        let Some(sol) = lu.solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        let ax = &prog.ineq_mat * &x;
        if (0..m_in).any(|i| ax[i] > prog.ineq_rhs[i] + 1e-9) {
            continue;
        }
        let mut ineq = DVector::zeros(m_in);
        let mut dual_ok = true;
        for (r, &i) in active.iter().enumerate() {
            let mu = sol[n + m_eq + r];
            if mu < -1e-10 {
                dual_ok = false;
            }
            ineq[i] = mu;
        }
        if !dual_ok {
            continue;
        }
        let objective = 0.5 * x.dot(&(&prog.quad * &x)) + prog.lin.dot(&x);
        if best.as_ref().map_or(true, |b| objective < b.objective - 1e-12) {
            best = Some(OracleSolution {
                eq: sol.rows(n, m_eq).into_owned(),
                x,
                ineq,
                objective,
            });
        }
    }
    best
}

/// Random strictly convex QP with n, m_eq + m_in <= 8, feasible by construction.
pub fn random_qp(seed: u64) -> ConvexProgram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=8);
    let m_eq = rng.gen_range(0..=(n - 1).min(2));
    let m_in = rng.gen_range(1..=(8 - m_eq));
    let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let quad = b.transpose() * &b + DMatrix::identity(n, n) * 0.5;
    let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let eq_mat = DMatrix::from_fn(m_eq, n, |_, _| rng.gen_range(-1.0..1.0));
    let ineq_mat = DMatrix::from_fn(m_in, n, |_, _| rng.gen_range(-1.0..1.0));
    let eq_rhs = &eq_mat * &x0;
    let slack = DVector::from_fn(m_in, |_, _| {
        if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..1.0) }
    });
    let ineq_rhs = &ineq_mat * &x0 + slack;
    let lin = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
    let mut p = ConvexProgram::new(n);
    p.quad = quad;
    p.lin = lin;
    p.eq_mat = eq_mat;
    p.eq_rhs = eq_rhs;
    p.ineq_mat = ineq_mat;
    p.ineq_rhs = ineq_rhs;
    p
}

use inertia_mpc::grid::{Bus, BusId, BusRole, DisturbanceEvent, GridModel, Line, StorageParams};

/// Generator (M=3, D=1, P=3) feeding a storage bus (M_e in [1, 15]) over b = 50,
/// with a +0.2 p.u. step at the generator when `disturbed`.
pub fn two_bus(disturbed: bool) -> GridModel {
    let storage = StorageParams {
        inertia_min: 1.0,
        inertia_max: 15.0,
        damping: 1.0,
        power_min: -5.0,
        power_max: 5.0,
        energy_min: -45.0,
        energy_max: 10.0,
        initial_energy: 0.0,
        reference_power: -3.0,
        reference_inertia: 8.0,
    };
    let disturbances = if disturbed {
        vec![DisturbanceEvent { bus: BusId(0), time: 0.0, delta_p: 0.2 }]
    } else {
        vec![]
    };
    GridModel::new(
        vec![
            Bus { id: BusId(0), role: BusRole::Generator { inertia: 3.0, damping: 1.0 }, injection: 3.0 },
            Bus { id: BusId(1), role: BusRole::Storage(storage), injection: 0.0 },
        ],
        vec![Line::new(0, 1, 50.0)],
        Some(BusId(0)),
        disturbances,
    )
    .unwrap()
}

/// Generator, first-order load and storage in a line: 0 - 1 - 2, plus a 0 - 2 chord.
pub fn three_bus() -> GridModel {
    let storage = StorageParams {
        inertia_min: 2.0,
        inertia_max: 12.0,
        damping: 0.5,
        power_min: -4.0,
        power_max: 4.0,
        energy_min: -20.0,
        energy_max: 20.0,
        initial_energy: 0.0,
        reference_power: 1.0,
        reference_inertia: 6.0,
    };
    GridModel::new(
        vec![
            Bus { id: BusId(0), role: BusRole::Generator { inertia: 4.0, damping: 1.5 }, injection: 1.5 },
            Bus { id: BusId(1), role: BusRole::Load { damping: 0.3 }, injection: -2.5 },
            Bus { id: BusId(2), role: BusRole::Storage(storage), injection: 0.0 },
        ],
        vec![Line::new(0, 1, 20.0), Line::new(1, 2, 15.0), Line::new(0, 2, 8.0)],
        Some(BusId(0)),
        vec![],
    )
    .unwrap()
}
