//! Cluster construction for surround control.
//!
//! A cluster is a pair of generators (DG or PCC) whose connecting path holds
//! only loads. Each DG keeps a table of its clusters, filled by a
//! build-cluster round trip along every path. Enhanced clustering (EC) also
//! hands each dangling load-only subtree to its nearest DG as a special
//! cluster.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use crate::comms::{gather, GatherKind, Gathered, LinkState, MessageLog, Payload};
use crate::error::{GridError, ProtocolError};
use crate::grid::{path_impedance, BranchId, GridTree, NodeId, Phasor};

#[derive(Clone, Debug, PartialEq)]
pub struct MemberLoad {
    pub node: NodeId,
    /// Current absorbed by the load, A.
    pub current: Phasor,
    /// Impedance of the path from the cluster owner to this load.
    pub impedance_from_owner: Phasor,
    /// Resistance of the path from the peer generator to this load.
    pub resistance_to_peer: f64,
    /// Number of clusters whose path runs through this load; a load at a
    /// junction sits on several and its current is split between them.
    pub shared_by: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    pub owner: NodeId,
    pub peer: NodeId,
    /// Loads strictly between owner and peer, in path order from the owner.
    pub members: Vec<MemberLoad>,
    pub path_impedance: Phasor,
    pub path_resistance: f64,
}

/// A load-only subtree that ends in leaves and lies on no cluster path.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecialCluster {
    pub owner: NodeId,
    /// Node on the generator-spanning part of the tree the subtree hangs from.
    pub attach: NodeId,
    /// Root of the dangling subtree (a child of `attach`).
    pub top: NodeId,
    /// (load, current) for every load in the subtree, preorder.
    pub loads: Vec<(NodeId, Phasor)>,
    /// Branch into `top` plus every branch inside the subtree.
    pub branches: Vec<BranchId>,
}

impl SpecialCluster {
    pub fn total_current(&self) -> Phasor {
        self.loads.iter().map(|&(_, i)| i).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClusterTable {
    pub owner: NodeId,
    /// Every generator reachable through load-only paths, reachable or not.
    pub neighbors: BTreeSet<NodeId>,
    /// Only neighbours whose build-cluster round trip succeeded.
    pub clusters: BTreeMap<NodeId, Cluster>,
    pub special: Vec<SpecialCluster>,
}

impl ClusterTable {
    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty() && self.special.is_empty()
    }
}

/// Generators reachable from `from` without crossing another generator.
pub fn discover_neighbors(grid: &GridTree, from: NodeId) -> Result<BTreeSet<NodeId>, GridError> {
    grid.node(from)?;
    if !grid.is_generator(from) {
        return Err(GridError::NotADg(from));
    }
    let mut seen = vec![false; grid.len()];
    seen[from.0] = true;
    let mut found = BTreeSet::new();
    let mut queue = VecDeque::from([from]);
    while let Some(v) = queue.pop_front() {
        let around = grid.parent(v).into_iter().chain(grid.children(v).iter().copied());
        for w in around {
            if std::mem::replace(&mut seen[w.0], true) {
                continue;
            }
            if grid.is_generator(w) {
                found.insert(w);
            } else {
                queue.push_back(w);
            }
        }
    }
    Ok(found)
}

/// Builds the cluster for one neighbour from a gathered load list.
pub fn cluster_from_payload(
    grid: &GridTree,
    owner: NodeId,
    peer: NodeId,
    loads: &[crate::comms::PathLoad],
) -> Result<Cluster, GridError> {
    let path_z = path_impedance(grid, owner, peer)?;
    let members = loads
        .iter()
        .map(|l| {
            Ok(MemberLoad {
                node: l.node,
                current: l.current,
                impedance_from_owner: l.impedance_from_src,
                resistance_to_peer: path_impedance(grid, peer, l.node)?.re,
                shared_by: 1,
            })
        })
        .collect::<Result<Vec<_>, GridError>>()?;
    Ok(Cluster {
        owner,
        peer,
        members,
        path_impedance: path_z,
        path_resistance: path_z.re,
    })
}

/// Discovers `dg`'s neighbours and runs the build-cluster round trip to each.
/// Neighbours behind a broken link are left out of `clusters`.
pub fn build_cluster_table(
    grid: &GridTree,
    dg: NodeId,
    links: &LinkState,
    log: &mut MessageLog,
) -> Result<ClusterTable, ProtocolError> {
    if !grid.is_dg(dg) {
        return Err(GridError::NotADg(dg).into());
    }
    let neighbors = discover_neighbors(grid, dg)?;
    let mut clusters = BTreeMap::new();
    for &h in &neighbors {
        match gather(grid, links, None, dg, h, GatherKind::BuildCluster, log)? {
            Gathered::Delivered(Payload::Loads(loads)) => {
                clusters.insert(h, cluster_from_payload(grid, dg, h, &loads)?);
            }
            Gathered::Delivered(Payload::Voltage(_)) => unreachable!("build-cluster replies carry loads"),
            Gathered::Unreachable => {}
        }
    }
    Ok(ClusterTable {
        owner: dg,
        neighbors,
        clusters,
        special: Vec::new(),
    })
}

/// `true` for nodes whose subtree (inclusive) holds at least one DG.
fn dg_below(grid: &GridTree) -> Vec<bool> {
    let mut below: Vec<bool> = grid.nodes().iter().map(|n| n.is_dg()).collect();
    for &v in grid.bfs_order().iter().rev() {
        if let Some(p) = grid.parent(v) {
            if below[v.0] {
                below[p.0] = true;
            }
        }
    }
    below
}

/// Every dangling load-only subtree, assigned to the DG with the smallest path
/// resistance to it (ties go to the lower id). Empty when there are no DGs.
pub fn find_special_clusters(
    grid: &GridTree,
) -> Result<BTreeMap<NodeId, Vec<SpecialCluster>>, GridError> {
    let dgs: Vec<NodeId> = grid.dgs().collect();
    let mut out: BTreeMap<NodeId, Vec<SpecialCluster>> = BTreeMap::new();
    if dgs.is_empty() {
        return Ok(out);
    }
    let below = dg_below(grid);
    for &attach in grid.bfs_order() {
        if !(below[attach.0] || attach == grid.root()) {
            continue;
        }
        for &top in grid.children(attach) {
            if below[top.0] {
                continue;
            }
            let mut best: Option<(f64, NodeId)> = None;
            for &dg in &dgs {
                let r = path_impedance(grid, dg, top)?.re;
                if best.is_none_or(|(br, bid)| r < br || (r == br && dg < bid)) {
                    best = Some((r, dg));
                }
            }
            let owner = best.expect("at least one DG").1;
            let nodes = grid.subtree(top);
            let loads = nodes
                .iter()
                .filter(|v| grid.nodes()[v.0].load_demand.is_some())
                .map(|&v| (v, grid.load_current(v)))
                .collect();
            let branches = nodes
                .iter()
                .map(|&v| BranchId::of_child(v).expect("subtree top is never the root"))
                .collect();
            out.entry(owner).or_default().push(SpecialCluster {
                owner,
                attach,
                top,
                loads,
                branches,
            });
        }
    }
    Ok(out)
}

/// Cluster tables for every DG. With `enhanced`, special clusters are added;
/// the owner probes each leaf of a special subtree and drops the subtree if
/// any probe fails.
pub fn build_all_tables(
    grid: &GridTree,
    links: &LinkState,
    enhanced: bool,
    log: &mut MessageLog,
) -> Result<BTreeMap<NodeId, ClusterTable>, ProtocolError> {
    let mut tables = BTreeMap::new();
    for dg in grid.dgs() {
        tables.insert(dg, build_cluster_table(grid, dg, links, log)?);
    }
    set_sharing(&mut tables);
    if enhanced {
        for (owner, specials) in find_special_clusters(grid)? {
            let table = tables.get_mut(&owner).expect("owner is a DG");
            'next: for sc in specials {
                for &(v, _) in &sc.loads {
                    if !grid.is_leaf(v) {
                        continue;
                    }
                    if gather(grid, links, None, owner, v, GatherKind::BuildCluster, log)?
                        == Gathered::Unreachable
                    {
                        continue 'next;
                    }
                }
                table.special.push(sc);
            }
        }
    }
    Ok(tables)
}

/// Counts, for every load, the distinct generator pairs whose cluster path
/// holds it. Loads learn this while relaying build-cluster packets.
pub fn set_sharing(tables: &mut BTreeMap<NodeId, ClusterTable>) {
    let mut pairs: BTreeMap<NodeId, BTreeSet<(NodeId, NodeId)>> = BTreeMap::new();
    for t in tables.values() {
        for c in t.clusters.values() {
            let key = (c.owner.min(c.peer), c.owner.max(c.peer));
            for m in &c.members {
                pairs.entry(m.node).or_default().insert(key);
            }
        }
    }
    for t in tables.values_mut() {
        for c in t.clusters.values_mut() {
            for m in &mut c.members {
                m.shared_by = pairs[&m.node].len();
            }
        }
    }
}

/// Branches on the path of any pairwise cluster.
pub fn cluster_path_branches(
    grid: &GridTree,
    tables: &BTreeMap<NodeId, ClusterTable>,
) -> Result<BTreeSet<BranchId>, GridError> {
    let mut out = BTreeSet::new();
    for t in tables.values() {
        for c in t.clusters.values() {
            out.extend(grid.path_branches(c.owner, c.peer)?);
        }
    }
    Ok(out)
}

/// Line-oriented dump of cluster tables, stable across runs.
pub fn dump_tables(tables: &BTreeMap<NodeId, ClusterTable>) -> String {
    let mut out = String::new();
    for t in tables.values() {
        let neigh: Vec<String> = t.neighbors.iter().map(|n| n.0.to_string()).collect();
        writeln!(out, "table {} neighbors {}", t.owner.0, neigh.join(",")).unwrap();
        for c in t.clusters.values() {
            write!(
                out,
                "  cluster {}-{} r {:.6e} z {:.6e} {:.6e} loads",
                c.owner.0, c.peer.0, c.path_resistance, c.path_impedance.re, c.path_impedance.im
            )
            .unwrap();
            if c.members.is_empty() {
                out.push_str(" -");
            }
            for m in &c.members {
                write!(
                    out,
                    " {}:{:.6e}:{:.6e}:{:.6e}",
                    m.node.0, m.current.re, m.current.im, m.resistance_to_peer
                )
                .unwrap();
            }
            out.push('\n');
        }
        for s in &t.special {
            let loads: Vec<String> = s.loads.iter().map(|(v, _)| v.0.to_string()).collect();
            writeln!(
                out,
                "  special attach {} top {} loads {}",
                s.attach.0,
                s.top.0,
                loads.join(",")
            )
            .unwrap();
        }
    }
    out
}
