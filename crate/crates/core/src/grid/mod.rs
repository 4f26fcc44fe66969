//! Electrical model of a radial micro-grid and its steady-state phasor solver.
//!
//! The grid is a rooted tree. Node 0 is the point of common coupling (PCC), an
//! ideal voltage source. Loads are constant-current sinks whose current is
//! fixed at the nominal PCC voltage, and DGs are ideal current sources, so the
//! whole circuit is linear in the injected currents.
//!
//! Branch `k` always connects node `k + 1` to its parent, so a branch is
//! identified by its child node.

mod file;

pub use file::{read_grid, write_grid};

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use num_complex::Complex64;

use crate::error::GridError;

/// Complex phasor. Units depend on context: V, A, Ω or VA.
pub type Phasor = Complex64;

/// Nominal phase voltage at the PCC.
pub const NOMINAL_VOLTAGE: f64 = 230.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeId(pub usize);

impl NodeId {
    pub const PCC: NodeId = NodeId(0);

    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "N{}", self.0)
    }
}

/// A branch is named after its child node: `BranchId(k)` feeds node `k + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BranchId(pub usize);

impl BranchId {
    pub fn child(self) -> NodeId {
        NodeId(self.0 + 1)
    }

    pub fn of_child(child: NodeId) -> Option<BranchId> {
        child.0.checked_sub(1).map(BranchId)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for BranchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "B{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Pcc,
    LoadOnly,
    DgWithLoad,
    Junction,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Pcc => "pcc",
            NodeKind::LoadOnly => "load",
            NodeKind::DgWithLoad => "dg",
            NodeKind::Junction => "junction",
        }
    }

    pub fn parse(s: &str) -> Option<NodeKind> {
        match s {
            "pcc" => Some(NodeKind::Pcc),
            "load" => Some(NodeKind::LoadOnly),
            "dg" => Some(NodeKind::DgWithLoad),
            "junction" => Some(NodeKind::Junction),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridNode {
    pub id: NodeId,
    pub kind: NodeKind,
    /// Apparent power demand in VA (positive imaginary part = inductive).
    pub load_demand: Option<Phasor>,
    pub is_smart: bool,
}

impl GridNode {
    pub fn pcc() -> Self {
        GridNode {
            id: NodeId::PCC,
            kind: NodeKind::Pcc,
            load_demand: None,
            is_smart: true,
        }
    }

    pub fn load(id: usize, demand: Phasor) -> Self {
        GridNode {
            id: NodeId(id),
            kind: NodeKind::LoadOnly,
            load_demand: Some(demand),
            is_smart: true,
        }
    }

    pub fn dg(id: usize, demand: Phasor) -> Self {
        GridNode {
            id: NodeId(id),
            kind: NodeKind::DgWithLoad,
            load_demand: Some(demand),
            is_smart: true,
        }
    }

    pub fn junction(id: usize) -> Self {
        GridNode {
            id: NodeId(id),
            kind: NodeKind::Junction,
            load_demand: None,
            is_smart: true,
        }
    }

    pub fn is_dg(&self) -> bool {
        self.kind == NodeKind::DgWithLoad
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub parent: NodeId,
    pub child: NodeId,
    /// Metres.
    pub length: f64,
    /// Ω per metre.
    pub impedance_per_m: Phasor,
}

impl Branch {
    pub fn new(parent: usize, child: usize, length: f64, impedance_per_m: Phasor) -> Self {
        Branch {
            parent: NodeId(parent),
            child: NodeId(child),
            length,
            impedance_per_m,
        }
    }

    pub fn id(&self) -> BranchId {
        BranchId(self.child.0 - 1)
    }

    pub fn impedance(&self) -> Phasor {
        self.impedance_per_m * self.length
    }
}

/// Validated radial grid. Construction fails unless the node/branch set forms
/// a tree rooted at the PCC (node 0).
#[derive(Clone, Debug, PartialEq)]
pub struct GridTree {
    nodes: Vec<GridNode>,
    /// Indexed by `BranchId`, i.e. by child id − 1.
    branches: Vec<Branch>,
    children: Vec<Vec<NodeId>>,
    depth: Vec<usize>,
    /// Nodes in breadth-first order from the root.
    order: Vec<NodeId>,
    pcc_voltage: Phasor,
}

fn finite(z: Phasor) -> bool {
    z.re.is_finite() && z.im.is_finite()
}

impl GridTree {
    pub fn new(
        pcc_voltage: Phasor,
        mut nodes: Vec<GridNode>,
        branches: Vec<Branch>,
    ) -> Result<Self, GridError> {
        if !finite(pcc_voltage) || pcc_voltage.norm() == 0.0 {
            return Err(GridError::NonFinite(format!("pcc voltage {pcc_voltage}")));
        }
        nodes.sort_by_key(|n| n.id);
        let n = nodes.len();
        if n == 0 {
            return Err(GridError::Structure("grid has no nodes".into()));
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.id.0 != i {
                return Err(GridError::Structure(format!(
                    "node ids must be dense 0..{n}, found {}",
                    node.id
                )));
            }
            match (node.kind, node.load_demand) {
                (NodeKind::Pcc, _) if i != 0 => {
                    return Err(GridError::Structure(format!("second PCC at {}", node.id)))
                }
                (NodeKind::Pcc, Some(_)) => {
                    return Err(GridError::Structure("the PCC cannot carry a load".into()))
                }
                (NodeKind::DgWithLoad | NodeKind::LoadOnly, None) => {
                    return Err(GridError::Structure(format!("{} is missing its load", node.id)))
                }
                (NodeKind::Junction, Some(_)) => {
                    return Err(GridError::Structure(format!("junction {} has a load", node.id)))
                }
                (_, Some(s)) if !finite(s) => {
                    return Err(GridError::NonFinite(format!("load of {}", node.id)))
                }
                _ => {}
            }
        }
        if nodes[0].kind != NodeKind::Pcc {
            return Err(GridError::Structure("node 0 must be the PCC".into()));
        }
        if branches.len() != n - 1 {
            return Err(GridError::Structure(format!(
                "{} branches for {n} nodes, a tree needs {}",
                branches.len(),
                n - 1
            )));
        }

        let mut slots: Vec<Option<Branch>> = vec![None; n - 1];
        let mut children = vec![Vec::new(); n];
        for b in branches {
            if b.child.0 == 0 || b.child.0 >= n || b.parent.0 >= n {
                return Err(GridError::Structure(format!(
                    "branch {}->{} references an unknown node or feeds the root",
                    b.parent, b.child
                )));
            }
            if b.parent == b.child {
                return Err(GridError::Structure(format!("self-loop at {}", b.child)));
            }
            if !(b.length.is_finite() && b.length > 0.0) || !finite(b.impedance_per_m) {
                return Err(GridError::NonFinite(format!(
                    "branch {}->{} length/impedance",
                    b.parent, b.child
                )));
            }
            if b.impedance().re <= 0.0 {
                return Err(GridError::Structure(format!(
                    "branch {}->{} must have positive resistance",
                    b.parent, b.child
                )));
            }
            let slot = &mut slots[b.child.0 - 1];
            if slot.is_some() {
                return Err(GridError::Structure(format!("{} has two parents", b.child)));
            }
            children[b.parent.0].push(b.child);
            *slot = Some(b);
        }
        let branches: Vec<Branch> = slots.into_iter().map(|b| b.expect("counted")).collect();
        for c in &mut children {
            c.sort();
        }

        let mut depth = vec![usize::MAX; n];
        let mut order = Vec::with_capacity(n);
        let mut queue = VecDeque::from([NodeId::PCC]);
        depth[0] = 0;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &c in &children[v.0] {
                if depth[c.0] != usize::MAX {
                    return Err(GridError::Structure(format!("cycle through {c}")));
                }
                depth[c.0] = depth[v.0] + 1;
                queue.push_back(c);
            }
        }
        if order.len() != n {
            return Err(GridError::Structure(format!(
                "{} of {n} nodes unreachable from the PCC",
                n - order.len()
            )));
        }

        Ok(GridTree {
            nodes,
            branches,
            children,
            depth,
            order,
            pcc_voltage,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> NodeId {
        NodeId::PCC
    }

    pub fn pcc_voltage(&self) -> Phasor {
        self.pcc_voltage
    }

    pub fn nodes(&self) -> &[GridNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&GridNode, GridError> {
        self.nodes.get(id.0).ok_or(GridError::UnknownNode(id))
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.0 < self.nodes.len()
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn branch(&self, id: BranchId) -> &Branch {
        &self.branches[id.0]
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        BranchId::of_child(id).map(|b| self.branches[b.0].parent)
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.children[id.0]
    }

    pub fn depth(&self, id: NodeId) -> usize {
        self.depth[id.0]
    }

    pub fn bfs_order(&self) -> &[NodeId] {
        &self.order
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.children[id.0].is_empty()
    }

    pub fn dgs(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().filter(|n| n.is_dg()).map(|n| n.id)
    }

    pub fn is_dg(&self, id: NodeId) -> bool {
        self.nodes.get(id.0).is_some_and(GridNode::is_dg)
    }

    /// DGs and the PCC: the endpoints a cluster can have.
    pub fn is_generator(&self, id: NodeId) -> bool {
        id == NodeId::PCC || self.is_dg(id)
    }

    /// Constant current drawn by the node's load: conj(S / U_pcc).
    pub fn load_current(&self, id: NodeId) -> Phasor {
        self.nodes[id.0]
            .load_demand
            .map(|s| (s / self.pcc_voltage).conj())
            .unwrap_or_default()
    }

    /// Same tree with every branch impedance per metre replaced.
    pub fn with_impedance_per_m(&self, z: Phasor) -> Result<GridTree, GridError> {
        let branches = self
            .branches
            .iter()
            .map(|b| Branch {
                impedance_per_m: z,
                ..b.clone()
            })
            .collect();
        GridTree::new(self.pcc_voltage, self.nodes.clone(), branches)
    }

    /// Same tree with a different node set (kinds, loads, smart flags).
    pub fn with_nodes(&self, nodes: Vec<GridNode>) -> Result<GridTree, GridError> {
        GridTree::new(self.pcc_voltage, nodes, self.branches.clone())
    }

    /// Node sequence of the unique tree path from `a` to `b`, both included.
    pub fn path_nodes(&self, a: NodeId, b: NodeId) -> Result<Vec<NodeId>, GridError> {
        self.node(a)?;
        self.node(b)?;
        let (mut x, mut y) = (a, b);
        let mut up = vec![x];
        let mut down = vec![y];
        while self.depth(x) > self.depth(y) {
            x = self.parent(x).expect("non-root");
            up.push(x);
        }
        while self.depth(y) > self.depth(x) {
            y = self.parent(y).expect("non-root");
            down.push(y);
        }
        while x != y {
            x = self.parent(x).expect("non-root");
            y = self.parent(y).expect("non-root");
            up.push(x);
            down.push(y);
        }
        down.pop();
        up.extend(down.into_iter().rev());
        Ok(up)
    }

    /// Branches traversed by the path from `a` to `b`, in travel order.
    pub fn path_branches(&self, a: NodeId, b: NodeId) -> Result<Vec<BranchId>, GridError> {
        let nodes = self.path_nodes(a, b)?;
        Ok(nodes
            .windows(2)
            .map(|w| {
                let child = if self.parent(w[1]) == Some(w[0]) { w[1] } else { w[0] };
                BranchId::of_child(child).expect("edge child is never the root")
            })
            .collect())
    }

    pub fn hop_distance(&self, a: NodeId, b: NodeId) -> Result<usize, GridError> {
        Ok(self.path_nodes(a, b)?.len() - 1)
    }

    /// Longest shortest path, in hops.
    pub fn diameter(&self) -> usize {
        // Two sweeps suffice on a tree.
        let far = |from: NodeId| -> (NodeId, usize) {
            self.nodes
                .iter()
                .map(|n| (n.id, self.hop_distance(from, n.id).expect("in grid")))
                .max_by_key(|&(id, d)| (d, std::cmp::Reverse(id)))
                .expect("non-empty")
        };
        let (end, _) = far(NodeId::PCC);
        far(end).1
    }

    /// Whether `node` lies in the subtree rooted at `top` (inclusive).
    pub fn in_subtree(&self, node: NodeId, top: NodeId) -> bool {
        let mut v = node;
        loop {
            if v == top {
                return true;
            }
            match self.parent(v) {
                Some(p) => v = p,
                None => return false,
            }
        }
    }

    /// All nodes of the subtree rooted at `top`, in preorder.
    pub fn subtree(&self, top: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![top];
        while let Some(v) = stack.pop() {
            out.push(v);
            stack.extend(self.children(v).iter().rev());
        }
        out
    }
}

/// Sum of branch impedances along the unique tree path between two distinct nodes.
pub fn path_impedance(grid: &GridTree, a: NodeId, b: NodeId) -> Result<Phasor, GridError> {
    if a == b {
        return Err(GridError::SameNode(a));
    }
    Ok(grid
        .path_branches(a, b)?
        .into_iter()
        .map(|br| grid.branch(br).impedance())
        .sum())
}

/// Thevenin impedance seen from `node` with the PCC source shorted.
///
/// Constant-current loads are open circuits for this purpose, so the only
/// return path is the series chain of branches up to the PCC.
pub fn thevenin_impedance(grid: &GridTree, node: NodeId) -> Result<Phasor, GridError> {
    grid.node(node)?;
    if node == grid.root() {
        return Ok(Phasor::new(0.0, 0.0));
    }
    path_impedance(grid, grid.root(), node)
}

/// Current injected by each DG, in amperes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InjectionState {
    currents: BTreeMap<NodeId, Phasor>,
}

impl InjectionState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, dg: NodeId, current: Phasor) {
        self.currents.insert(dg, current);
    }

    pub fn get(&self, dg: NodeId) -> Phasor {
        self.currents.get(&dg).copied().unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, Phasor)> + '_ {
        self.currents.iter().map(|(&k, &v)| (k, v))
    }

    /// Element-wise sum; used by the superposition property.
    pub fn plus(&self, other: &InjectionState) -> InjectionState {
        let mut out = self.clone();
        for (k, v) in other.iter() {
            let cur = out.get(k);
            out.set(k, cur + v);
        }
        out
    }
}

impl FromIterator<(NodeId, Phasor)> for InjectionState {
    fn from_iter<T: IntoIterator<Item = (NodeId, Phasor)>>(iter: T) -> Self {
        InjectionState {
            currents: iter.into_iter().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerFlowSolution {
    /// Indexed by node id.
    pub node_voltage: Vec<Phasor>,
    /// Indexed by branch id; positive direction is parent → child.
    pub branch_current: Vec<Phasor>,
    /// Watts.
    pub total_loss: f64,
    /// Complex power delivered by the PCC, VA.
    pub pcc_power: Phasor,
    /// Σ Z_b |I_b|², the complex power absorbed by the lines.
    pub loss_complex: Phasor,
    /// Largest |KCL| mismatch over all nodes, A.
    pub kcl_residual: f64,
    /// Relative complex power imbalance of the solution.
    pub balance_residual: f64,
}

impl PowerFlowSolution {
    pub fn voltage(&self, id: NodeId) -> Phasor {
        self.node_voltage[id.0]
    }

    pub fn current(&self, id: BranchId) -> Phasor {
        self.branch_current[id.0]
    }
}

/// Solves the linear radial circuit in two sweeps: leaf-to-root current
/// accumulation, then root-to-leaf voltage drops.
pub fn solve_power_flow(
    grid: &GridTree,
    injections: &InjectionState,
) -> Result<PowerFlowSolution, GridError> {
    let n = grid.len();
    let mut draw: Vec<Phasor> = (0..n).map(|i| grid.load_current(NodeId(i))).collect();
    for (id, current) in injections.iter() {
        if !grid.is_dg(id) {
            return Err(GridError::NotADg(id));
        }
        if !finite(current) {
            return Err(GridError::NonFinite(format!("injection at {id}")));
        }
        draw[id.0] -= current;
    }

    let mut subtree_draw = draw.clone();
    for &v in grid.bfs_order().iter().rev() {
        if let Some(p) = grid.parent(v) {
            let d = subtree_draw[v.0];
            subtree_draw[p.0] += d;
        }
    }
    let branch_current: Vec<Phasor> = (1..n).map(|c| subtree_draw[c]).collect();

    let mut node_voltage = vec![Phasor::default(); n];
    node_voltage[0] = grid.pcc_voltage();
    for &v in grid.bfs_order().iter().skip(1) {
        let b = BranchId::of_child(v).expect("non-root");
        let p = grid.branch(b).parent;
        node_voltage[v.0] = node_voltage[p.0] - grid.branch(b).impedance() * branch_current[b.0];
    }

    let loss_complex: Phasor = grid
        .branches()
        .iter()
        .zip(&branch_current)
        .map(|(b, i)| b.impedance() * i.norm_sqr())
        .sum();
    let total_loss: f64 = grid
        .branches()
        .iter()
        .zip(&branch_current)
        .map(|(b, i)| b.impedance().re * i.norm_sqr())
        .sum();
    let pcc_current = subtree_draw[0];
    let pcc_power = grid.pcc_voltage() * pcc_current.conj();

    if !finite(pcc_power) || !total_loss.is_finite() {
        return Err(GridError::NonFinite("power flow diverged".into()));
    }

    let kcl_residual = (0..n)
        .map(|v| {
            let inflow = BranchId::of_child(NodeId(v))
                .map(|b| branch_current[b.0])
                .unwrap_or(pcc_current);
            let outflow: Phasor = grid
                .children(NodeId(v))
                .iter()
                .map(|&c| branch_current[c.0 - 1])
                .sum();
            (inflow - outflow - draw[v]).norm()
        })
        .fold(0.0, f64::max);

    let mut scale = pcc_power.norm() + loss_complex.norm();
    let mut imbalance = pcc_power - loss_complex;
    for (v, &u) in node_voltage.iter().enumerate() {
        let id = NodeId(v);
        let load = u * grid.load_current(id).conj();
        let injected = u * injections.get(id).conj();
        imbalance += injected - load;
        scale += load.norm() + injected.norm();
    }
    let balance_residual = if scale > 0.0 { imbalance.norm() / scale } else { 0.0 };

    Ok(PowerFlowSolution {
        node_voltage,
        branch_current,
        total_loss,
        pcc_power,
        loss_complex,
        kcl_residual,
        balance_residual,
    })
}

pub fn total_loss(sol: &PowerFlowSolution) -> f64 {
    sol.total_loss
}

/// Real power delivered by the PCC, W.
pub fn pcc_workload(sol: &PowerFlowSolution) -> f64 {
    sol.pcc_power.re
}
