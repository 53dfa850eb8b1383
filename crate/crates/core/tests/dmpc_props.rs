mod support;

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use inertia_mpc::dmpc::*;
use inertia_mpc::dynamics::{SimOptions, SystemState};
use inertia_mpc::mpc::{closed_loop_objective, receding_horizon_run, MpcConfig, MpcError, Regime};
use inertia_mpc::scenario::parse_scenario;

fn shipped(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

/// Minimizes ½·a·(x − p)² plus the consensus terms in closed form.
struct Scalar {
    a: f64,
    p: f64,
    w: f64,
}

impl ConsensusArea for Scalar {
    fn n_slots(&self) -> usize {
        1
    }
    fn solve(&mut self, lin: &[f64]) -> Result<Vec<f64>, MpcError> {
        Ok(vec![(self.a * self.p - lin[0]) / (self.a + self.w)])
    }
}

/// Ignores the consensus terms and returns fixed slot values.
struct Fixed(Vec<f64>);

impl ConsensusArea for Fixed {
    fn n_slots(&self) -> usize {
        self.0.len()
    }
    fn solve(&mut self, _lin: &[f64]) -> Result<Vec<f64>, MpcError> {
        Ok(self.0.clone())
    }
}

fn one_link() -> Vec<Link> {
    vec![Link { copy: SlotRef { area: 0, slot: 0 }, owner: SlotRef { area: 1, slot: 0 } }]
}

#[test]
fn twelve_bus_partition_and_coupling_counts() {
    let sc = parse_scenario(&shipped("twelve_bus.scn")).unwrap();
    let part = sc.partition.as_ref().unwrap();
    assert_eq!(part.n_areas(), 3);
    assert_eq!(part.tie_lines().len(), 3);
    assert_eq!(build_coupling(part, 6).len(), 36);
    for t in part.tie_lines() {
        assert_ne!(t.from_area, t.to_area);
        assert_eq!(part.area_of(t.from), t.from_area);
        assert!(part.boundary(t.from_area).contains(&t.to));
    }
    let single = AreaPartition::single(&sc.grid);
    assert!(single.tie_lines().is_empty());
    assert!(build_coupling(&single, 6).is_empty());
}

#[test]
fn two_bus_split_has_one_tie_and_two_equalities_per_step() {
    let g = support::two_bus(true);
    let part = partition_from_areas(&g, &[vec![0], vec![1]]).unwrap();
    assert_eq!(part.tie_lines().len(), 1);
    let eqs = build_coupling(&part, 10);
    assert_eq!(eqs.len(), 20);
    assert!(eqs.iter().all(|e| e.owner != e.copy && (1..=10).contains(&e.k)));
}

#[test]
fn overlapping_or_missing_buses_are_rejected_by_name() {
    let sc = parse_scenario(&shipped("twelve_bus.scn")).unwrap();
    let err = partition_from_areas(&sc.grid, &[vec![0, 1, 2, 3], vec![3, 4, 5, 6, 7], vec![8, 9, 10, 11]]).unwrap_err();
    assert_eq!(err, PartitionError::Overlap(3));
    assert!(err.to_string().contains("bus 3"));
    let err = partition_from_areas(&sc.grid, &[vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![8, 9, 10]]).unwrap_err();
    assert_eq!(err, PartitionError::Missing(11));
}

#[test]
fn scalar_toy_reaches_the_closed_form_saddle_point_geometrically() {
    let (a, p, b, q) = (2.0, 1.0, 3.0, -1.0);
    let settings = AdmmSettings { rho: 1.0, tau: 0.1, tol: 1e-12, max_iter: 2000 };
    let links = one_link();
    let w = slot_weights(&links, &[1, 1], &settings);
    let (mut s0, mut s1) = (Scalar { a, p, w: w[0][0] }, Scalar { a: b, p: q, w: w[1][0] });
    let mut state = ConsensusState::new(&links, vec![vec![0.0], vec![0.0]], None, &settings);

    // minimizer of ½a(x−p)² + ½b(x−q)² and the multiplier of x_copy = x_owner
    let x_star = (a * p + b * q) / (a + b);
    let lambda_star = -a * (x_star - p);

    // the round as an affine map on (v0, v1, z, λ), written from the update rules
    let (rho, tau, w) = (settings.rho, settings.tau, w[0][0]);
    let (d0, d1) = (a + w, b + w);
    let t = DMatrix::from_row_slice(4, 4, &[
        tau / d0, 0.0, 2.0 * rho / d0, -1.0 / d0,
        0.0, tau / d1, 2.0 * rho / d1, 1.0 / d1,
        tau / (2.0 * d0), tau / (2.0 * d1), rho / d0 + rho / d1, 0.5 * (1.0 / d1 - 1.0 / d0),
        rho * tau / d0, -rho * tau / d1, 2.0 * rho * rho * (1.0 / d0 - 1.0 / d1), 1.0 - rho / d0 - rho / d1,
    ]);
    let radius = t.complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max);
    assert!(radius < 1.0, "{radius}");

    let star = DVector::from_vec(vec![x_star, x_star, x_star, lambda_star]);
    let mut errors = Vec::new();
    for _ in 0..120 {
        let mut areas: Vec<&mut dyn ConsensusArea> = vec![&mut s0, &mut s1];
        pdc_admm_step(&mut areas, &links, &mut state).unwrap();
        let s = DVector::from_vec(vec![state.values[0][0], state.values[1][0], state.z[0], state.lambda[0]]);
        errors.push((s - &star).amax());
    }
    assert!((state.values[0][0] - x_star).abs() < 1e-9);
    assert!((state.values[1][0] - x_star).abs() < 1e-9);
    assert!((state.lambda[0] - lambda_star).abs() < 1e-9);
    // early window, before the error reaches round-off
    let observed = (errors[40] / errors[10]).powf(1.0 / 30.0);
    assert!((observed - radius).abs() < 0.05 * radius, "observed rate {observed}, spectral radius {radius}");
}

#[test]
fn dual_update_follows_the_mismatch() {
    let settings = AdmmSettings { rho: 1.0, ..AdmmSettings::default() };
    let links = one_link();
    let mut state = ConsensusState::new(&links, vec![vec![0.0], vec![0.0]], None, &settings);
    let (mut c, mut o) = (Fixed(vec![0.6]), Fixed(vec![0.5]));
    let mut areas: Vec<&mut dyn ConsensusArea> = vec![&mut c, &mut o];
    let r = pdc_admm_step(&mut areas, &links, &mut state).unwrap();
    assert!((state.lambda[0] - 0.1).abs() < 1e-15);
    assert!((r.primal - 0.1).abs() < 1e-15);
    assert!((state.z[0] - 0.55).abs() < 1e-15);

    let (mut c, mut o) = (Fixed(vec![0.5]), Fixed(vec![0.5]));
    let mut areas: Vec<&mut dyn ConsensusArea> = vec![&mut c, &mut o];
    let before = state.lambda.clone();
    let r = pdc_admm_step(&mut areas, &links, &mut state).unwrap();
    assert_eq!(state.lambda, before);
    assert_eq!(r.primal, 0.0);
}

#[test]
fn exchange_record_carries_both_link_ends_and_the_new_multipliers() {
    let settings = AdmmSettings::default();
    let links = vec![
        Link { copy: SlotRef { area: 0, slot: 0 }, owner: SlotRef { area: 1, slot: 1 } },
        Link { copy: SlotRef { area: 1, slot: 0 }, owner: SlotRef { area: 0, slot: 1 } },
    ];
    let mut state = ConsensusState::new(&links, vec![vec![0.0; 2], vec![0.0; 2]], None, &settings);
    let (mut a, mut b) = (Fixed(vec![1.0, 2.0]), Fixed(vec![3.0, 4.0]));
    let mut areas: Vec<&mut dyn ConsensusArea> = vec![&mut a, &mut b];
    let (_, rec) = pdc_admm_step_ordered(&mut areas, &links, &mut state, &[0, 1]).unwrap();
    assert_eq!(rec.copies, [1.0, 3.0]);
    assert_eq!(rec.owners, [4.0, 2.0]);
    assert_eq!(rec.lambda, [settings.rho * -3.0, settings.rho * 1.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Within a round every area sees the previous round's data, so the
    /// visiting order cannot change the result.
    #[test]
    fn round_is_independent_of_area_order(
        a in proptest::collection::vec(0.5f64..5.0, 3),
        p in proptest::collection::vec(-2.0f64..2.0, 3),
        rounds in 1usize..8,
    ) {
        let settings = AdmmSettings::default();
        let links = vec![
            Link { copy: SlotRef { area: 0, slot: 0 }, owner: SlotRef { area: 1, slot: 0 } },
            Link { copy: SlotRef { area: 2, slot: 0 }, owner: SlotRef { area: 1, slot: 0 } },
        ];
        let w = slot_weights(&links, &[1, 1, 1], &settings);
        let run = |order: &[usize]| {
            let mut s: Vec<Scalar> = (0..3).map(|i| Scalar { a: a[i], p: p[i], w: w[i][0] }).collect();
            let mut state = ConsensusState::new(&links, vec![vec![0.0]; 3], None, &settings);
            let mut records = Vec::new();
            for _ in 0..rounds {
                let mut areas: Vec<&mut dyn ConsensusArea> = s.iter_mut().map(|x| x as &mut dyn ConsensusArea).collect();
                records.push(pdc_admm_step_ordered(&mut areas, &links, &mut state, order).unwrap());
            }
            (state, records)
        };
        prop_assert_eq!(run(&[0, 1, 2]), run(&[2, 0, 1]));
    }
}

#[test]
fn single_area_matches_the_centralized_controller() {
    let g = support::two_bus(true);
    let x0 = SystemState::at_equilibrium(&g).unwrap();
    let cfg = MpcConfig::new(&g, 0.1, 0.01).with_regime(Regime::VAR_VAR);
    let (central, _) = receding_horizon_run(&g, &x0, &cfg, 0.5, SimOptions::default()).unwrap();
    let (dist, _, reports) =
        distributed_mpc_run(&g, &x0, &AreaPartition::single(&g), &cfg, &AdmmSettings::default(), 0.5, SimOptions::default())
            .unwrap();
    assert!(reports.iter().all(|r| r.converged));
    for (c, d) in central.rows.iter().zip(&dist.rows) {
        for (x, y) in c.state.angles.iter().chain(&c.state.omega).chain(&c.state.energy).zip(
            d.state.angles.iter().chain(&d.state.omega).chain(&d.state.energy),
        ) {
            assert!((x - y).abs() < 1e-6, "t {}: {x} vs {y}", c.state.t);
        }
    }
}

#[test]
fn two_area_split_tracks_the_centralized_objective() {
    let g = support::two_bus(true);
    let x0 = SystemState::at_equilibrium(&g).unwrap();
    let cfg = MpcConfig::new(&g, 0.1, 0.01).with_regime(Regime::VAR_VAR);
    let t_total = 2.0;
    let (central, _) = receding_horizon_run(&g, &x0, &cfg, t_total, SimOptions::default()).unwrap();
    let part = partition_from_areas(&g, &[vec![0], vec![1]]).unwrap();
    let admm = AdmmSettings::default();
    let (dist, log, reports) = distributed_mpc_run(&g, &x0, &part, &cfg, &admm, t_total, SimOptions::default()).unwrap();
    assert!(log.iter().all(|o| o.result().is_some()));
    for r in &reports {
        assert!(r.converged);
        assert!(r.max_iterations() <= admm.max_iter);
        assert!(r.final_residual() < admm.tol);
    }
    let (jc, jd) = (closed_loop_objective(&g, &cfg, &central).total, closed_loop_objective(&g, &cfg, &dist).total);
    assert!((jd - jc).abs() <= 0.01 * jc.abs(), "central {jc}, distributed {jd}");
}
