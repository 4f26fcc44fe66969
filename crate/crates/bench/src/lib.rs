//! Shared fixtures for the criterion benches.

use microgrid::{generate_grid, GenParams, GridTree, InjectionState, Phasor};

pub fn fixture_grid(n_nodes: usize, seed: u64) -> GridTree {
    generate_grid(&GenParams {
        n_nodes,
        seed,
        ..GenParams::default()
    })
    .expect("default parameters generate")
}

/// A modest injection at every DG so the solver does not see a trivial state.
pub fn fixture_injection(grid: &GridTree) -> InjectionState {
    grid.dgs().map(|dg| (dg, Phasor::new(5.0, -2.0))).collect()
}
