//! Communication overlay on the grid tree: link failures, unique-path routing,
//! hop-by-hop gathering, and the token ring used to serialise control actions.
//!
//! Time is counted in synchronous ticks, one hop per tick. Links fail for
//! communication only; the electrical branch is unaffected.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use crate::error::{GridError, ProtocolError};
use crate::grid::{path_impedance, BranchId, GridTree, NodeId, Phasor, PowerFlowSolution};

pub const DEFAULT_MAX_ATTEMPTS: usize = 3;

/// Per-branch broken flag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinkState {
    broken: Vec<bool>,
}

impl LinkState {
    pub fn intact(grid: &GridTree) -> Self {
        LinkState {
            broken: vec![false; grid.branches().len()],
        }
    }

    /// Breaks exactly ⌊q·E⌋ links chosen uniformly without replacement.
    pub fn sample<R: Rng + ?Sized>(
        grid: &GridTree,
        fraction: f64,
        rng: &mut R,
    ) -> Result<Self, ProtocolError> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(ProtocolError::Parameter(format!(
                "broken link fraction {fraction} outside [0, 1]"
            )));
        }
        let e = grid.branches().len();
        let count = broken_link_count(e, fraction);
        let mut state = LinkState::intact(grid);
        for i in index::sample(rng, e, count).into_iter() {
            state.broken[i] = true;
        }
        Ok(state)
    }

    pub fn from_broken(grid: &GridTree, ids: &[BranchId]) -> Result<Self, ProtocolError> {
        let mut state = LinkState::intact(grid);
        for id in ids {
            let slot = state.broken.get_mut(id.0).ok_or_else(|| {
                ProtocolError::Parameter(format!("no branch {id} in a grid of {} branches", grid.branches().len()))
            })?;
            *slot = true;
        }
        Ok(state)
    }

    /// Parses a failure script: one branch id per line (`7` or `B7`), `#` comments.
    pub fn parse_script(grid: &GridTree, text: &str) -> Result<Self, ProtocolError> {
        let mut ids = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let tok = raw.split('#').next().unwrap_or("").trim();
            if tok.is_empty() {
                continue;
            }
            let digits = tok.strip_prefix('B').unwrap_or(tok);
            let k: usize = digits.parse().map_err(|_| {
                ProtocolError::Parameter(format!("failure script line {}: bad branch id {tok:?}", i + 1))
            })?;
            ids.push(BranchId(k));
        }
        LinkState::from_broken(grid, &ids)
    }

    pub fn is_broken(&self, id: BranchId) -> bool {
        self.broken.get(id.0).copied().unwrap_or(false)
    }

    pub fn broken_count(&self) -> usize {
        self.broken.iter().filter(|&&b| b).count()
    }

    pub fn broken_ids(&self) -> Vec<BranchId> {
        self.broken
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| BranchId(i))
            .collect()
    }
}

pub fn broken_link_count(links: usize, fraction: f64) -> usize {
    ((fraction * links as f64) + 1e-9).floor().min(links as f64) as usize
}

/// Message and timing counters. Every field only grows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MessageLog {
    pub tokens_passed: u64,
    pub token_hops: u64,
    pub retries: u64,
    pub skips: u64,
    pub gathers: u64,
    pub gather_failures: u64,
    /// All hops traversed by any frame, token and acks included.
    pub hops: u64,
    /// Frames sent: tokens, acks, gather requests and replies, failed attempts.
    pub messages: u64,
    pub ticks: u64,
}

impl MessageLog {
    pub fn merge(&mut self, other: &MessageLog) {
        self.tokens_passed += other.tokens_passed;
        self.token_hops += other.token_hops;
        self.retries += other.retries;
        self.skips += other.skips;
        self.gathers += other.gathers;
        self.gather_failures += other.gather_failures;
        self.hops += other.hops;
        self.messages += other.messages;
        self.ticks += other.ticks;
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Route {
    /// Node sequence from source to destination.
    Path(Vec<NodeId>),
    Unreachable,
}

impl Route {
    pub fn hops(&self) -> Option<usize> {
        match self {
            Route::Path(p) => Some(p.len() - 1),
            Route::Unreachable => None,
        }
    }

    pub fn is_reachable(&self) -> bool {
        matches!(self, Route::Path(_))
    }
}

/// The unique tree path, or `Unreachable` if any link on it is broken.
pub fn route(
    grid: &GridTree,
    links: &LinkState,
    src: NodeId,
    dst: NodeId,
) -> Result<Route, GridError> {
    let nodes = grid.path_nodes(src, dst)?;
    let broken = grid
        .path_branches(src, dst)?
        .into_iter()
        .any(|b| links.is_broken(b));
    Ok(if broken { Route::Unreachable } else { Route::Path(nodes) })
}

/// SN index → node, assigned in depth-first preorder from the root with
/// children visited in ascending id order.
pub fn assign_dfs_ids(grid: &GridTree, smart: &[NodeId]) -> Result<Vec<NodeId>, ProtocolError> {
    if smart.is_empty() {
        return Err(ProtocolError::Parameter("no smart nodes".into()));
    }
    let mut member = vec![false; grid.len()];
    for &s in smart {
        grid.node(s)?;
        member[s.0] = true;
    }
    Ok(grid
        .subtree(grid.root())
        .into_iter()
        .filter(|v| member[v.0])
        .collect())
}

pub fn next_owner(i: usize, n: usize) -> usize {
    (i + 1) % n.max(1)
}

/// Timeout before a token transmission is retried: 2·diameter + 2 ticks.
pub fn token_timeout(grid: &GridTree) -> u64 {
    2 * grid.diameter() as u64 + 2
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenState {
    /// Current owner, as an index into `id_of`.
    pub owner: usize,
    pub id_of: Vec<NodeId>,
    /// Attempts spent on the most recent handover.
    pub attempts: usize,
    pub timeout: u64,
    pub max_attempts: usize,
    pub coordinator: NodeId,
}

impl TokenState {
    pub fn new(grid: &GridTree, id_of: Vec<NodeId>) -> Result<Self, ProtocolError> {
        let coordinator = *id_of
            .first()
            .ok_or_else(|| ProtocolError::Parameter("token ring with no members".into()))?;
        Ok(TokenState {
            owner: 0,
            id_of,
            attempts: 0,
            timeout: token_timeout(grid),
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            coordinator,
        })
    }

    pub fn sn_count(&self) -> usize {
        self.id_of.len()
    }

    pub fn owner_node(&self) -> NodeId {
        self.id_of[self.owner]
    }
}

/// Hands the token to the next SN in id order.
///
/// Each handover is retried up to `max_attempts` times, each failed attempt
/// costing one timeout. An SN that never acknowledges is skipped. If nobody
/// in the ring can be reached the owner keeps the token.
pub fn pass_token(
    state: &TokenState,
    grid: &GridTree,
    links: &LinkState,
    log: &mut MessageLog,
) -> Result<TokenState, GridError> {
    let n = state.sn_count();
    let mut next = state.clone();
    next.attempts = 0;
    if n <= 1 {
        return Ok(next);
    }
    let src = state.owner_node();
    let mut j = next_owner(state.owner, n);
    while j != state.owner {
        let dst = state.id_of[j];
        match route(grid, links, src, dst)? {
            Route::Path(p) => {
                let hops = (p.len() - 1) as u64;
                next.attempts += 1;
                log.tokens_passed += 1;
                log.token_hops += hops;
                log.hops += 2 * hops;
                log.messages += 2;
                log.ticks += 2 * hops;
                next.owner = j;
                return Ok(next);
            }
            Route::Unreachable => {
                for attempt in 0..state.max_attempts {
                    if attempt > 0 {
                        log.retries += 1;
                    }
                    log.messages += 1;
                    log.ticks += state.timeout;
                }
                next.attempts += state.max_attempts;
                log.skips += 1;
                j = next_owner(j, n);
            }
        }
    }
    Ok(next)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GatherKind {
    /// Refresh of load current demands along a cluster path.
    Data,
    /// Neighbour voltage read-back.
    Voltage,
    /// Initial cluster construction: loads, demands and impedances from the source.
    BuildCluster,
}

/// One relaying load's contribution to a gathered payload.
#[derive(Clone, Debug, PartialEq)]
pub struct PathLoad {
    pub node: NodeId,
    pub current: Phasor,
    /// Cumulative path impedance from the gathering source to this load.
    pub impedance_from_src: Phasor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Loads(Vec<PathLoad>),
    Voltage(Phasor),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Gathered {
    Delivered(Payload),
    Unreachable,
}

/// Request/ack round trip from `src` to `dst`; relays append their data to the ack.
///
/// `solution` supplies the measured voltage for [`GatherKind::Voltage`].
pub fn gather(
    grid: &GridTree,
    links: &LinkState,
    solution: Option<&PowerFlowSolution>,
    src: NodeId,
    dst: NodeId,
    kind: GatherKind,
    log: &mut MessageLog,
) -> Result<Gathered, ProtocolError> {
    let path = grid.path_nodes(src, dst)?;
    if kind != GatherKind::Voltage {
        if let Some(&dumb) = path.iter().find(|&&v| !grid.nodes()[v.0].is_smart) {
            return Err(ProtocolError::NotSmart(dumb));
        }
    }
    log.gathers += 1;
    let nodes = match route(grid, links, src, dst)? {
        Route::Path(nodes) => nodes,
        Route::Unreachable => {
            log.gather_failures += 1;
            log.messages += 1;
            return Ok(Gathered::Unreachable);
        }
    };
    let hops = (nodes.len() - 1) as u64;
    log.hops += 2 * hops;
    log.messages += 2;
    log.ticks += 2 * hops;

    let payload = match kind {
        GatherKind::Voltage => {
            let sol = solution.ok_or_else(|| {
                ProtocolError::Parameter("voltage gathering needs a power-flow solution".into())
            })?;
            Payload::Voltage(sol.voltage(dst))
        }
        GatherKind::Data | GatherKind::BuildCluster => {
            let mut loads = Vec::new();
            for &v in &nodes[1..nodes.len() - 1] {
                if grid.nodes()[v.0].load_demand.is_some() {
                    loads.push(PathLoad {
                        node: v,
                        current: grid.load_current(v),
                        impedance_from_src: path_impedance(grid, src, v)?,
                    });
                }
            }
            Payload::Loads(loads)
        }
    };
    Ok(Gathered::Delivered(payload))
}

/// A connected piece of the communication network and its own token ring.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    /// Member SNs in DFS-id order; the first is the coordinator.
    pub members: Vec<NodeId>,
    pub coordinator: NodeId,
    /// True when the coordinator self-promoted after losing the original one.
    pub promoted: bool,
    pub contains_pcc: bool,
    /// PCC voltage held by a promoted coordinator, used as the reference
    /// for PCC-less components.
    pub reference_voltage: Option<Phasor>,
    pub token: TokenState,
}

/// Splits the SNs into communication components and elects one coordinator
/// per component: the original one where present, otherwise the member with
/// the smallest DFS id.
pub fn detect_partitions_and_promote(
    grid: &GridTree,
    links: &LinkState,
    smart: &[NodeId],
) -> Result<Vec<Component>, ProtocolError> {
    let ids = assign_dfs_ids(grid, smart)?;
    let original = ids[0];

    // Physical component label: topmost node reachable through intact links.
    let mut label = vec![NodeId::PCC; grid.len()];
    for &v in grid.bfs_order() {
        label[v.0] = match grid.parent(v) {
            Some(p) if !links.is_broken(BranchId::of_child(v).expect("non-root")) => label[p.0],
            _ => v,
        };
    }

    let mut groups: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
    let mut first_seen: BTreeMap<NodeId, usize> = BTreeMap::new();
    for (sn_index, &v) in ids.iter().enumerate() {
        let key = *first_seen.entry(label[v.0]).or_insert(sn_index);
        groups.entry(key).or_default().push(v);
    }

    let mut out = Vec::with_capacity(groups.len());
    for members in groups.into_values() {
        let top = label[members[0].0];
        let contains_pcc = top == NodeId::PCC;
        let coordinator = if members.contains(&original) { original } else { members[0] };
        let promoted = coordinator != original;
        let mut token = TokenState::new(grid, members.clone())?;
        token.coordinator = coordinator;
        token.owner = members.iter().position(|&m| m == coordinator).expect("member");
        out.push(Component {
            members,
            coordinator,
            promoted,
            contains_pcc,
            reference_voltage: (!contains_pcc).then(|| grid.pcc_voltage()),
            token,
        });
    }
    Ok(out)
}
