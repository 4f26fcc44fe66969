//! Loss-minimising control laws and the uniform controller interface.
//!
//! Every DG's injection is split in two: the feed of its associated load,
//! switched on the first time the DG acts, and a control current computed
//! by the controller. [`ControllerOutcome::new_injection`] is always the
//! control part.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::clustering::{build_all_tables, discover_neighbors, ClusterTable};
use crate::comms::{gather, GatherKind, Gathered, LinkState, MessageLog, Payload};
use crate::error::ControlError;
use crate::grid::{thevenin_impedance, GridTree, NodeId, Phasor, PowerFlowSolution};

/// Stop threshold on |ΔI| for iterative controllers, A.
pub const CURRENT_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControlMode {
    #[serde(rename = "full")]
    FullCurrent,
    #[serde(rename = "reactive")]
    ReactiveOnly,
}

impl ControlMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ControlMode::FullCurrent => "full",
            ControlMode::ReactiveOnly => "reactive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(ControlMode::FullCurrent),
            "reactive" => Some(ControlMode::ReactiveOnly),
            _ => None,
        }
    }

    /// Drops the real part in reactive-only mode.
    pub fn restrict(self, i: Phasor) -> Phasor {
        match self {
            ControlMode::FullCurrent => i,
            ControlMode::ReactiveOnly => Phasor::new(0.0, i.im),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControllerOutcome {
    /// Control current, excluding the associated-load feed, A.
    pub new_injection: Phasor,
    pub converged_hint: bool,
}

fn load_current(load_s: Phasor, u_nominal: Phasor) -> Result<Phasor, ControlError> {
    if u_nominal.norm() == 0.0 || !u_nominal.re.is_finite() || !u_nominal.im.is_finite() {
        return Err(ControlError::Numeric(format!("nominal voltage {u_nominal}")));
    }
    Ok((load_s / u_nominal).conj())
}

/// Local control: the reactive part of the associated load's current.
pub fn lc_current(load_s: Phasor, u_nominal: Phasor) -> Result<Phasor, ControlError> {
    Ok(ControlMode::ReactiveOnly.restrict(load_current(load_s, u_nominal)?))
}

/// Extended local control: the associated load's whole current.
pub fn elc_current(load_s: Phasor, u_nominal: Phasor) -> Result<Phasor, ControlError> {
    load_current(load_s, u_nominal)
}

/// Optimal surround current from a cluster table:
///
/// I = Σ_h (1 / R_{A,h}) Σ_{i ∈ L(A,h)} I_i · R_{h,i} / s_i
///
/// where s_i is the number of clusters sharing load i (1 on a plain line),
/// plus the full current of every special cluster the DG owns.
pub fn cbsc_current(table: &ClusterTable, mode: ControlMode) -> Result<ControllerOutcome, ControlError> {
    if table.is_empty() {
        return Ok(ControllerOutcome {
            new_injection: Phasor::default(),
            converged_hint: true,
        });
    }
    let mut total = Phasor::default();
    for cluster in table.clusters.values() {
        if cluster.path_resistance.is_nan() || cluster.path_resistance <= 0.0 {
            return Err(ControlError::Input(format!(
                "cluster {}-{} has non-positive resistance",
                cluster.owner, cluster.peer
            )));
        }
        let mut share = Phasor::default();
        for m in &cluster.members {
            share += m.current * m.resistance_to_peer / (cluster.path_resistance * m.shared_by as f64);
        }
        total += share;
    }
    for special in &table.special {
        total += special.total_current();
    }
    Ok(ControllerOutcome {
        new_injection: mode.restrict(total),
        converged_hint: false,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborVoltage {
    pub node: NodeId,
    pub voltage: Phasor,
    pub path_impedance: Phasor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VbscInputs {
    pub own_voltage: Phasor,
    /// Reachable neighbours only.
    pub neighbors: Vec<NeighborVoltage>,
    pub thevenin: Phasor,
}

/// Resistance-weighted mean of neighbour voltages,
///
/// U_opt = Σ_h (R_h / |Z_h|²) U_h / Σ_h (R_h / |Z_h|²),
///
/// or `None` when no neighbour could be reached.
pub fn vbsc_optimal_voltage(inputs: &VbscInputs) -> Result<Option<Phasor>, ControlError> {
    if inputs.neighbors.is_empty() {
        return Ok(None);
    }
    let mut num = Phasor::default();
    let mut den = 0.0;
    for n in &inputs.neighbors {
        let z = n.path_impedance;
        if z.re.is_nan() || z.re <= 0.0 {
            return Err(ControlError::Input(format!("path to {} has non-positive resistance", n.node)));
        }
        let w = z.re / z.norm_sqr();
        num += n.voltage * w;
        den += w;
    }
    Ok(Some(num / den))
}

/// One voltage-based control action: ΔI = (U_opt − U⁰) / Z_eq.
pub fn vbsc_step(
    inputs: &VbscInputs,
    current_injection: Phasor,
    mode: ControlMode,
) -> Result<ControllerOutcome, ControlError> {
    if inputs.thevenin.norm() == 0.0 {
        return Err(ControlError::Numeric("zero Thevenin impedance".into()));
    }
    let Some(target) = vbsc_optimal_voltage(inputs)? else {
        return Ok(ControllerOutcome {
            new_injection: current_injection,
            converged_hint: true,
        });
    };
    let delta = mode.restrict((target - inputs.own_voltage) / inputs.thevenin);
    Ok(ControllerOutcome {
        new_injection: current_injection + delta,
        converged_hint: delta.norm() < CURRENT_TOLERANCE,
    })
}

/// What a DG sees when it holds the token.
pub struct ActionContext<'a> {
    pub grid: &'a GridTree,
    pub links: &'a LinkState,
    pub solution: &'a PowerFlowSolution,
    pub dg: NodeId,
    /// Control part currently injected by `dg`.
    pub control: Phasor,
    /// PCC voltage held by a promoted coordinator; set only in PCC-less components.
    pub reference_voltage: Option<Phasor>,
    pub log: &'a mut MessageLog,
}

/// Uniform controller contract used by the simulation loop.
///
/// A new control law plugs in by implementing this trait and registering a
/// name in [`controller_by_name`].
pub trait Controller: Send {
    fn name(&self) -> &'static str;

    fn mode(&self) -> ControlMode;

    /// Nodes that take part in the token ring.
    fn smart_nodes(&self, grid: &GridTree) -> Vec<NodeId> {
        grid.dgs().collect()
    }

    /// Whether links matter at all; local controllers ignore the overlay.
    fn uses_communication(&self) -> bool {
        true
    }

    /// One-off setup before the first token round (cluster construction).
    fn prepare(
        &mut self,
        _grid: &GridTree,
        _links: &LinkState,
        _log: &mut MessageLog,
    ) -> Result<(), ControlError> {
        Ok(())
    }

    /// Current the DG supplies to its own load once it starts acting.
    fn associated_feed(&self, grid: &GridTree, dg: NodeId) -> Result<Phasor, ControlError> {
        let s = grid.node(dg)?.load_demand.unwrap_or_default();
        elc_current(s, grid.pcc_voltage())
    }

    fn act(&mut self, ctx: &mut ActionContext<'_>) -> Result<ControllerOutcome, ControlError>;
}

/// No control at all: the DG never injects.
pub struct NoInjection;

impl Controller for NoInjection {
    fn name(&self) -> &'static str {
        "none"
    }

    fn mode(&self) -> ControlMode {
        ControlMode::FullCurrent
    }

    fn uses_communication(&self) -> bool {
        false
    }

    fn associated_feed(&self, _grid: &GridTree, _dg: NodeId) -> Result<Phasor, ControlError> {
        Ok(Phasor::default())
    }

    fn act(&mut self, _ctx: &mut ActionContext<'_>) -> Result<ControllerOutcome, ControlError> {
        Ok(ControllerOutcome {
            new_injection: Phasor::default(),
            converged_hint: true,
        })
    }
}

/// LC or ELC: the feed is the whole action.
pub struct LocalControl {
    extended: bool,
    mode: ControlMode,
}

impl LocalControl {
    pub fn lc() -> Self {
        LocalControl {
            extended: false,
            mode: ControlMode::ReactiveOnly,
        }
    }

    pub fn elc(mode: ControlMode) -> Self {
        LocalControl { extended: true, mode }
    }
}

impl Controller for LocalControl {
    fn name(&self) -> &'static str {
        if self.extended {
            "elc"
        } else {
            "lc"
        }
    }

    fn mode(&self) -> ControlMode {
        self.mode
    }

    fn uses_communication(&self) -> bool {
        false
    }

    fn associated_feed(&self, grid: &GridTree, dg: NodeId) -> Result<Phasor, ControlError> {
        let s = grid.node(dg)?.load_demand.unwrap_or_default();
        if self.extended {
            elc_current(s, grid.pcc_voltage())
        } else {
            lc_current(s, grid.pcc_voltage())
        }
    }

    fn act(&mut self, _ctx: &mut ActionContext<'_>) -> Result<ControllerOutcome, ControlError> {
        Ok(ControllerOutcome {
            new_injection: Phasor::default(),
            converged_hint: true,
        })
    }
}

/// Current-based surround control. Every node must be smart.
pub struct Cbsc {
    mode: ControlMode,
    enhanced: bool,
    tables: BTreeMap<NodeId, ClusterTable>,
}

impl Cbsc {
    pub fn new(mode: ControlMode, enhanced: bool) -> Self {
        Cbsc {
            mode,
            enhanced,
            tables: BTreeMap::new(),
        }
    }

    pub fn tables(&self) -> &BTreeMap<NodeId, ClusterTable> {
        &self.tables
    }
}

impl Controller for Cbsc {
    fn name(&self) -> &'static str {
        if self.enhanced {
            "cbsc-ec"
        } else {
            "cbsc"
        }
    }

    fn mode(&self) -> ControlMode {
        self.mode
    }

    fn smart_nodes(&self, grid: &GridTree) -> Vec<NodeId> {
        grid.nodes().iter().skip(1).map(|n| n.id).collect()
    }

    fn prepare(
        &mut self,
        grid: &GridTree,
        links: &LinkState,
        log: &mut MessageLog,
    ) -> Result<(), ControlError> {
        self.tables = build_all_tables(grid, links, self.enhanced, log)?;
        Ok(())
    }

    fn act(&mut self, ctx: &mut ActionContext<'_>) -> Result<ControllerOutcome, ControlError> {
        let table = self
            .tables
            .get_mut(&ctx.dg)
            .ok_or_else(|| ControlError::Input(format!("no cluster table for {}", ctx.dg)))?;
        // Refresh member demands over each cluster path.
        let peers: Vec<NodeId> = table.clusters.keys().copied().collect();
        for peer in peers {
            match gather(ctx.grid, ctx.links, None, ctx.dg, peer, GatherKind::Data, ctx.log)? {
                Gathered::Delivered(Payload::Loads(loads)) => {
                    let cluster = table.clusters.get_mut(&peer).expect("listed");
                    for (m, fresh) in cluster.members.iter_mut().zip(&loads) {
                        m.current = fresh.current;
                    }
                }
                Gathered::Delivered(Payload::Voltage(_)) => unreachable!("data replies carry loads"),
                Gathered::Unreachable => {
                    table.clusters.remove(&peer);
                }
            }
        }
        let mut out = cbsc_current(table, self.mode)?;
        out.converged_hint = (out.new_injection - ctx.control).norm() < CURRENT_TOLERANCE;
        Ok(out)
    }
}

/// Voltage-based surround control. Only DGs need to be smart.
pub struct Vbsc {
    mode: ControlMode,
    neighbors: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

impl Vbsc {
    pub fn new(mode: ControlMode) -> Self {
        Vbsc {
            mode,
            neighbors: BTreeMap::new(),
        }
    }
}

impl Controller for Vbsc {
    fn name(&self) -> &'static str {
        "vbsc"
    }

    fn mode(&self) -> ControlMode {
        self.mode
    }

    fn prepare(
        &mut self,
        grid: &GridTree,
        _links: &LinkState,
        _log: &mut MessageLog,
    ) -> Result<(), ControlError> {
        self.neighbors = grid
            .dgs()
            .map(|dg| Ok((dg, discover_neighbors(grid, dg)?)))
            .collect::<Result<_, ControlError>>()?;
        Ok(())
    }

    fn act(&mut self, ctx: &mut ActionContext<'_>) -> Result<ControllerOutcome, ControlError> {
        let own_voltage = ctx.solution.voltage(ctx.dg);
        let mut neighbors = Vec::new();
        let listed = self
            .neighbors
            .get(&ctx.dg)
            .ok_or_else(|| ControlError::Input(format!("{} has no neighbour list", ctx.dg)))?;
        for &h in listed {
            let got = gather(ctx.grid, ctx.links, Some(ctx.solution), ctx.dg, h, GatherKind::Voltage, ctx.log)?;
            let voltage = match got {
                Gathered::Delivered(Payload::Voltage(u)) => Some(u),
                Gathered::Delivered(Payload::Loads(_)) => unreachable!("voltage replies carry a voltage"),
                Gathered::Unreachable if h == NodeId::PCC => ctx.reference_voltage,
                Gathered::Unreachable => None,
            };
            if let Some(voltage) = voltage {
                neighbors.push(NeighborVoltage {
                    node: h,
                    voltage,
                    path_impedance: crate::grid::path_impedance(ctx.grid, ctx.dg, h)?,
                });
            }
        }
        let inputs = VbscInputs {
            own_voltage,
            neighbors,
            thevenin: thevenin_impedance(ctx.grid, ctx.dg)?,
        };
        vbsc_step(&inputs, ctx.control, self.mode)
    }
}

pub const CONTROLLER_NAMES: [&str; 6] = ["none", "lc", "elc", "cbsc", "cbsc-ec", "vbsc"];

pub fn controller_by_name(name: &str, mode: ControlMode) -> Result<Box<dyn Controller>, ControlError> {
    Ok(match name {
        "none" => Box::new(NoInjection),
        "lc" => Box::new(LocalControl::lc()),
        "elc" => Box::new(LocalControl::elc(mode)),
        "cbsc" => Box::new(Cbsc::new(mode, false)),
        "cbsc-ec" => Box::new(Cbsc::new(mode, true)),
        "vbsc" => Box::new(Vbsc::new(mode)),
        other => {
            return Err(ControlError::Input(format!(
                "unknown controller {other:?}; expected one of {}",
                CONTROLLER_NAMES.join(", ")
            )))
        }
    })
}
