mod common;

use common::{c, dense_voltages, loss_from_voltages, random_grid, random_injection};
use microgrid::grid::{read_grid, solve_power_flow, write_grid, InjectionState, NodeId};
use microgrid::topology::{generate_grid, GenParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn tree_solver_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 0..150 {
        let grid = random_grid(&mut rng, 2 + k % 14);
        let inj = random_injection(&mut rng, &grid);
        let sol = solve_power_flow(&grid, &inj).unwrap();
        let oracle = dense_voltages(&grid, &inj);
        for (v, (a, b)) in sol.node_voltage.iter().zip(&oracle).enumerate() {
            assert!((a - b).norm() < 1e-9, "grid {k} node {v}: {a} vs {b}");
        }
        let loss = loss_from_voltages(&grid, &oracle);
        assert!((sol.total_loss - loss).abs() <= 1e-9 * loss.max(1.0));
    }
}

#[test]
fn generated_grids_match_dense_oracle() {
    for seed in 0..30 {
        let grid = generate_grid(&GenParams { n_nodes: 15, seed, ..Default::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inj = random_injection(&mut rng, &grid);
        let sol = solve_power_flow(&grid, &inj).unwrap();
        let oracle = dense_voltages(&grid, &inj);
        let worst = sol.node_voltage.iter().zip(&oracle).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(worst < 1e-9, "seed {seed}: {worst}");
    }
}

#[test]
fn voltage_drops_are_linear_in_injections() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..40 {
        let grid = random_grid(&mut rng, 12);
        let a = random_injection(&mut rng, &grid);
        let b = random_injection(&mut rng, &grid);
        let u0 = solve_power_flow(&grid, &InjectionState::new()).unwrap().node_voltage;
        let ua = solve_power_flow(&grid, &a).unwrap().node_voltage;
        let ub = solve_power_flow(&grid, &b).unwrap().node_voltage;
        let uab = solve_power_flow(&grid, &a.plus(&b)).unwrap().node_voltage;
        for v in 0..grid.len() {
            // U(a+b) − U(0) = (U(a) − U(0)) + (U(b) − U(0))
            let lhs = uab[v] - u0[v];
            let rhs = (ua[v] - u0[v]) + (ub[v] - u0[v]);
            assert!((lhs - rhs).norm() < 1e-9);
        }
    }
}

#[test]
fn grid_file_round_trip_on_generated_grids() {
    for seed in 0..10 {
        let grid = generate_grid(&GenParams { seed, ..Default::default() }).unwrap();
        let back = read_grid(&write_grid(&grid)).unwrap();
        assert_eq!(back, grid);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solution_invariants(seed in any::<u64>(), n in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = random_grid(&mut rng, n);
        let inj = random_injection(&mut rng, &grid);
        let sol = solve_power_flow(&grid, &inj).unwrap();
        prop_assert!(sol.total_loss >= 0.0);
        prop_assert!(sol.balance_residual < 1e-6);
        prop_assert!(sol.kcl_residual < 1e-9);
        prop_assert_eq!(sol.voltage(NodeId::PCC), grid.pcc_voltage());
        prop_assert!((sol.loss_complex.re - sol.total_loss).abs() <= 1e-9 * sol.total_loss.max(1.0));
    }

    #[test]
    fn random_grids_survive_file_round_trip(seed in any::<u64>(), n in 1usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = random_grid(&mut rng, n);
        prop_assert_eq!(read_grid(&write_grid(&grid)).unwrap(), grid);
    }

    #[test]
    fn zero_load_without_injection_is_flat(seed in any::<u64>(), n in 2usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = random_grid(&mut rng, n);
        let idle: Vec<_> = grid.nodes().iter().map(|node| {
            let mut node = node.clone();
            if node.load_demand.is_some() {
                node.load_demand = Some(c(0.0, 0.0));
            }
            node
        }).collect();
        let grid = grid.with_nodes(idle).unwrap();
        let sol = solve_power_flow(&grid, &InjectionState::new()).unwrap();
        prop_assert_eq!(sol.total_loss, 0.0);
        prop_assert!(sol.node_voltage.iter().all(|&u| u == grid.pcc_voltage()));
    }
}
