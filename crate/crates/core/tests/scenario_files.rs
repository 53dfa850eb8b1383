use std::path::PathBuf;

use approx::assert_relative_eq;
use inertia_mpc::grid::BusRole;
use inertia_mpc::scenario::{parse_scenario, parse_scenario_str, ScenarioError};

fn shipped(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

#[test]
fn two_bus_file_matches_the_stated_system() {
    let sc = parse_scenario(&shipped("two_bus.scn")).unwrap();
    let g = &sc.grid;
    assert_eq!(g.n_buses(), 2);
    assert_eq!(g.lines()[0].susceptance, 50.0);
    assert!(matches!(g.bus(0).role, BusRole::Generator { inertia, .. } if inertia == 3.0));
    let p = g.storage_params(0);
    assert_eq!((p.inertia_min, p.inertia_max), (1.0, 15.0));
    assert!(p.power_min <= -3.0 && p.power_max >= -3.0);
    assert_eq!((p.energy_min, p.energy_max), (-45.0, 10.0));
    assert_eq!(sc.mpc.steps(), 10);
    assert_eq!(sc.ts, 0.01);
}

#[test]
fn twelve_bus_file_matches_the_tables() {
    let sc = parse_scenario(&shipped("twelve_bus.scn")).unwrap();
    let g = &sc.grid;
    assert_eq!(g.n_buses(), 12);
    let expect = [(0, 15.0, 3.0), (1, 15.0, 3.0), (4, 20.0, 4.0), (5, 20.0, 4.0), (8, 10.0, 2.0), (9, 10.0, 2.0), (2, 1.0, 0.1), (6, 1.0, 0.1), (10, 1.0, 0.1)];
    for (bus, m, d) in expect {
        match g.bus(bus).role {
            BusRole::Generator { inertia, damping } => assert_eq!((inertia, damping), (m, d), "bus {bus}"),
            ref r => panic!("bus {bus} is {}", r.kind()),
        }
    }
    for s in 0..3 {
        let p = g.storage_params(s);
        assert_eq!((p.inertia_min, p.inertia_max), (4.0, 10.0));
        assert_eq!(p.damping, 0.1);
    }
    assert_eq!(g.storage_buses(), &[3, 7, 11]);
    let gen_mw = [(0, 138.0), (1, 1050.0), (4, 719.0), (5, 350.0), (8, 700.0), (9, 700.0)];
    for (bus, mw) in gen_mw {
        assert_relative_eq!(g.bus(bus).injection, mw / 100.0, epsilon = 1e-12);
    }
    let b = g.check_power_balance();
    assert_relative_eq!(b.generation, 36.57, epsilon = 1e-9);
    assert_relative_eq!(b.load, 36.57, epsilon = 1e-9);
    assert!(b.residual.abs() < 1e-9);
    assert_eq!(g.reference_bus().0, 8);
    let part = sc.partition.as_ref().unwrap();
    assert_eq!(part.n_areas(), 3);
    assert_eq!(part.tie_lines().len(), 3);
    assert_eq!(sc.mpc.steps(), 6);
}

#[test]
fn twelve_bus_equilibrium_is_close_to_the_published_angles() {
    let published = [-0.1931, -0.0452, -0.2552, -0.3340, -0.1146, -0.3681, -0.4381, -0.4960, 0.0, -0.1750, -0.3150, -0.4150];
    let sc = parse_scenario(&shipped("twelve_bus.scn")).unwrap();
    let eq = sc.grid.solve_equilibrium().unwrap();
    for (i, (a, b)) in eq.angles.iter().zip(published).enumerate() {
        assert!((a - b).abs() < 0.02, "bus {i}: {a} vs {b}");
    }
}

#[test]
fn write_then_parse_is_identity() {
    for name in ["two_bus.scn", "twelve_bus.scn"] {
        let sc = parse_scenario(&shipped(name)).unwrap();
        let again = parse_scenario_str(&sc.write()).unwrap();
        assert_eq!(sc, again, "{name}");
        assert_eq!(again.write(), sc.write());
    }
}

#[test]
fn overlapping_areas_name_the_bus() {
    let text = std::fs::read_to_string(shipped("twelve_bus.scn")).unwrap();
    let text = text.replace("[4, 5, 6, 7]", "[3, 4, 5, 6, 7]");
    let err = parse_scenario_str(&text).unwrap_err();
    assert!(matches!(err, ScenarioError::Partition(_)));
    assert!(err.to_string().contains("bus 3"), "{err}");
}

#[test]
fn missing_file_is_an_io_error() {
    let err = parse_scenario(&shipped("nope.scn")).unwrap_err();
    assert!(err.is_io());
}
