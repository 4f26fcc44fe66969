//! Co-simulation of loss-minimising control in tree-shaped micro-grids.
//!
//! The grid is solved as a linear circuit of constant-current loads and
//! controllable DG current sources. DGs coordinate over a token ring routed
//! along the power lines and run one of several current controllers.

pub mod clustering;
pub mod comms;
pub mod control;
pub mod error;
pub mod grid;
pub mod harness;
pub mod topology;

pub use clustering::{Cluster, ClusterTable, SpecialCluster};
pub use comms::{LinkState, MessageLog, TokenState};
pub use control::{controller_by_name, ControlMode, Controller};
pub use error::{Error, Result};
pub use grid::{
    solve_power_flow, BranchId, GridTree, InjectionState, NodeId, Phasor, PowerFlowSolution,
};
pub use harness::{run_scenario, MetricsRecord, ScenarioConfig};
pub use topology::{generate_grid, GenParams};
