//! Random test grids: ring lattice, small-world rewiring, BFS spanning tree,
//! then electrical parameters and DG placement.

use std::collections::{BTreeSet, VecDeque};

use rand::seq::index;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::GenError;
use crate::grid::{Branch, GridNode, GridTree, NodeId, NodeKind, Phasor, NOMINAL_VOLTAGE};

const MAX_GENERATION_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UndirectedGraph {
    n: usize,
    /// Stored as (min, max).
    edges: BTreeSet<(usize, usize)>,
}

impl UndirectedGraph {
    pub fn new(n: usize) -> Self {
        UndirectedGraph {
            n,
            edges: BTreeSet::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    /// Adds an edge; self-loops, duplicates and out-of-range nodes are refused.
    pub fn add_edge(&mut self, a: usize, b: usize) -> bool {
        if a == b || a >= self.n || b >= self.n {
            return false;
        }
        self.edges.insert((a.min(b), a.max(b)))
    }

    pub fn remove_edge(&mut self, a: usize, b: usize) -> bool {
        self.edges.remove(&(a.min(b), a.max(b)))
    }

    pub fn degree(&self, v: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == v || b == v).count()
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn is_connected(&self) -> bool {
        self.n == 0 || bfs_parents(&self.adjacency(), 0).iter().all(Option::is_some)
    }
}

/// Ring of `n` nodes, each linked to its `per_side` nearest neighbours on
/// either side. `per_side = 1` is the plain cycle.
pub fn ring_lattice(n: usize, per_side: usize) -> Result<UndirectedGraph, GenError> {
    if n < 3 {
        return Err(GenError::Parameter(format!("ring lattice needs n >= 3, got {n}")));
    }
    if per_side == 0 || 2 * per_side >= n {
        return Err(GenError::Parameter(format!(
            "{per_side} neighbours per side does not fit a ring of {n}"
        )));
    }
    let mut g = UndirectedGraph::new(n);
    for i in 0..n {
        for k in 1..=per_side {
            g.add_edge(i, (i + k) % n);
        }
    }
    Ok(g)
}

/// Rewires each edge with probability `p`, returning the new graph and how
/// many edges were moved.
///
/// A rewired edge keeps one endpoint (fair coin) and gets a uniformly drawn
/// replacement for the other; draws that would create a self-loop or a
/// duplicate are rejected and redrawn.
pub fn rewire_counted<R: Rng + ?Sized>(
    g: &UndirectedGraph,
    p: f64,
    rng: &mut R,
) -> (UndirectedGraph, usize) {
    let mut out = g.clone();
    let mut moved = 0;
    let n = g.n;
    let originals: Vec<(usize, usize)> = g.edges().collect();
    for (a, b) in originals {
        if !rng.gen_bool(p) {
            continue;
        }
        let (keep, old) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
        let mut replacement = None;
        for _ in 0..(16 * n) {
            let cand = rng.gen_range(0..n);
            if cand != keep && cand != old && !out.has_edge(keep, cand) {
                replacement = Some(cand);
                break;
            }
        }
        if let Some(c) = replacement {
            out.remove_edge(a, b);
            out.add_edge(keep, c);
            moved += 1;
        }
    }
    (out, moved)
}

pub fn rewire<R: Rng + ?Sized>(g: &UndirectedGraph, p: f64, rng: &mut R) -> UndirectedGraph {
    rewire_counted(g, p, rng).0
}

fn bfs_parents(adj: &[Vec<usize>], root: usize) -> Vec<Option<usize>> {
    let mut parent = vec![None; adj.len()];
    parent[root] = Some(root);
    let mut queue = VecDeque::from([root]);
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if parent[w].is_none() {
                parent[w] = Some(v);
                queue.push_back(w);
            }
        }
    }
    parent
}

/// Rooted spanning tree: `parent[v]` for every non-root node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeSkeleton {
    pub root: usize,
    pub parent: Vec<Option<usize>>,
}

impl TreeSkeleton {
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.parent
            .iter()
            .enumerate()
            .filter_map(|(c, p)| p.map(|p| (p, c)))
    }
}

/// Breadth-first spanning tree, lower ids explored first.
pub fn extract_tree(g: &UndirectedGraph, root: usize) -> Result<TreeSkeleton, GenError> {
    if root >= g.n {
        return Err(GenError::Parameter(format!("root {root} not in graph")));
    }
    let mut parent = bfs_parents(&g.adjacency(), root);
    if parent.iter().any(Option::is_none) {
        return Err(GenError::Disconnected(1));
    }
    parent[root] = None;
    Ok(TreeSkeleton { root, parent })
}

fn default_lattice_neighbors() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenParams {
    pub n_nodes: usize,
    pub rewiring_p: f64,
    #[serde(default = "default_lattice_neighbors")]
    pub lattice_neighbors: usize,
    /// Metres; lengths are drawn from [0.5, 1.5] × mean.
    pub mean_line_length: f64,
    pub impedance_per_m: Phasor,
    pub dg_fraction: f64,
    /// |S| range in VA.
    pub load_s_range: (f64, f64),
    /// Inductive power factor range.
    pub load_pf_range: (f64, f64),
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            n_nodes: 30,
            rewiring_p: 0.5,
            lattice_neighbors: default_lattice_neighbors(),
            mean_line_length: 30.0,
            impedance_per_m: Phasor::new(0.08e-3, 0.08e-3),
            dg_fraction: 0.3,
            load_s_range: (2_000.0, 8_000.0),
            load_pf_range: (0.80, 0.95),
            seed: 1,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: String| Err(GenError::Parameter(m));
        if self.n_nodes < 3 {
            return bad(format!("n_nodes must be >= 3, got {}", self.n_nodes));
        }
        if !(0.0..=1.0).contains(&self.rewiring_p) {
            return bad(format!("rewiring_p {} outside [0, 1]", self.rewiring_p));
        }
        if !(0.0..=1.0).contains(&self.dg_fraction) {
            return bad(format!("dg_fraction {} outside [0, 1]", self.dg_fraction));
        }
        if !(self.mean_line_length.is_finite() && self.mean_line_length > 0.0) {
            return bad(format!("mean_line_length {} must be positive", self.mean_line_length));
        }
        let (smin, smax) = self.load_s_range;
        if !(smin >= 0.0 && smin <= smax && smax.is_finite()) {
            return bad(format!("load_s_range ({smin}, {smax}) is not an ordered range"));
        }
        let (pmin, pmax) = self.load_pf_range;
        if !(pmin > 0.0 && pmin <= pmax && pmax <= 1.0) {
            return bad(format!("load_pf_range ({pmin}, {pmax}) must satisfy 0 < min <= max <= 1"));
        }
        if !(self.impedance_per_m.re > 0.0 && self.impedance_per_m.im.is_finite()) {
            return bad("impedance_per_m needs a positive real part".into());
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Samples branch lengths and loads on a skeleton rooted at node 0.
/// Every non-PCC node becomes a smart load.
pub fn assign_electrical<R: Rng + ?Sized>(
    skeleton: &TreeSkeleton,
    params: &GenParams,
    rng: &mut R,
) -> Result<GridTree, GenError> {
    if skeleton.root != 0 {
        return Err(GenError::Parameter("skeleton must be rooted at node 0".into()));
    }
    let mean = params.mean_line_length;
    let mut branches: Vec<Branch> = skeleton
        .edges()
        .map(|(p, c)| Branch::new(p, c, 0.0, params.impedance_per_m))
        .collect();
    branches.sort_by_key(|b| b.child);
    for b in &mut branches {
        b.length = uniform(rng, 0.5 * mean, 1.5 * mean);
    }
    let mut nodes = vec![GridNode::pcc()];
    for id in 1..skeleton.parent.len() {
        let s = uniform(rng, params.load_s_range.0, params.load_s_range.1);
        let pf = uniform(rng, params.load_pf_range.0, params.load_pf_range.1);
        let q = (1.0 - pf * pf).max(0.0).sqrt();
        nodes.push(GridNode::load(id, Phasor::new(s * pf, s * q)));
    }
    Ok(GridTree::new(Phasor::new(NOMINAL_VOLTAGE, 0.0), nodes, branches)?)
}

/// Turns ⌈fraction·(n−1)⌉ uniformly chosen non-PCC nodes into DGs.
pub fn place_dgs<R: Rng + ?Sized>(
    grid: &GridTree,
    fraction: f64,
    rng: &mut R,
) -> Result<GridTree, GenError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(GenError::Parameter(format!("dg fraction {fraction} outside [0, 1]")));
    }
    let candidates = grid.len() - 1;
    let count = dg_count(grid.len(), fraction);
    let mut nodes = grid.nodes().to_vec();
    for i in index::sample(rng, candidates, count).into_iter() {
        let node = &mut nodes[i + 1];
        if node.load_demand.is_none() {
            node.load_demand = Some(Phasor::default());
        }
        node.kind = NodeKind::DgWithLoad;
    }
    Ok(grid.with_nodes(nodes)?)
}

/// ⌈fraction·(n−1)⌉, guarding against float noise just above an integer.
pub fn dg_count(n_nodes: usize, fraction: f64) -> usize {
    let raw = fraction * (n_nodes - 1) as f64;
    let count = (raw - 1e-9).ceil().max(0.0) as usize;
    count.min(n_nodes - 1)
}

/// Full pipeline. Deterministic in `params.seed`; disconnected rewirings are
/// redrawn from the same stream up to a fixed attempt budget.
pub fn generate_grid(params: &GenParams) -> Result<GridTree, GenError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let lattice = ring_lattice(params.n_nodes, params.lattice_neighbors)?;
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let g = rewire(&lattice, params.rewiring_p, &mut rng);
        if let Ok(skeleton) = extract_tree(&g, 0) {
            let grid = assign_electrical(&skeleton, params, &mut rng)?;
            return place_dgs(&grid, params.dg_fraction, &mut rng);
        }
    }
    Err(GenError::Disconnected(MAX_GENERATION_ATTEMPTS))
}

/// The hand-built nine-node example network with DGs at N0, N3, N5 and N8.
///
/// Node `k + 1` is N_k and branch `k` is B_k. Loads are illustrative 5 kVA
/// at pf 0.9.
pub fn example_network() -> GridTree {
    let zpm = Phasor::new(0.8e-3, 0.8e-3);
    // (parent, length in m) for N0..N8
    let layout: [(usize, f64); 9] = [
        (0, 100.0), // B0: PCC-N0
        (1, 23.0),  // B1: N0-N1
        (1, 45.0),  // B2: N0-N2
        (3, 26.0),  // B3: N2-N3
        (0, 35.0),  // B4: PCC-N4
        (5, 67.0),  // B5: N4-N5
        (6, 32.0),  // B6: N5-N6
        (6, 12.0),  // B7: N5-N7
        (8, 66.0),  // B8: N7-N8
    ];
    let s = Phasor::new(4500.0, 4500.0 * (1.0f64 - 0.81).sqrt() / 0.9);
    let dgs = [1, 4, 6, 9];
    let mut nodes = vec![GridNode::pcc()];
    for id in 1..=9 {
        nodes.push(if dgs.contains(&id) {
            GridNode::dg(id, s)
        } else {
            GridNode::load(id, s)
        });
    }
    let branches = layout
        .iter()
        .enumerate()
        .map(|(k, &(p, len))| Branch::new(p, k + 1, len, zpm))
        .collect();
    GridTree::new(Phasor::new(NOMINAL_VOLTAGE, 0.0), nodes, branches)
        .expect("example network is a valid tree")
}

/// Node id of N_k in [`example_network`].
pub fn example_node(k: usize) -> NodeId {
    NodeId(k + 1)
}
