//! IDNC packet-combination selection.
//!
//! A combination κ is a binary XOR of packets the sender holds; it instantly
//! serves every player for whom it contains exactly one wanted packet. The
//! optimal choice per delay metric is NP-hard, so this module provides a
//! greedy max-weight clique heuristic over the coding graph together with an
//! exhaustive oracle for desk-scale instances; experiments fall back from
//! the oracle to the heuristic above a work budget and log the choice.

use crate::model::{
    completion_time_estimate, critical_players, expected_delay_increment, targeted_set,
    wants_indicator, DelayMetric, ErasureMatrix, PacketMask, PlayerMask, StateMatrix,
};
use thiserror::Error;

/// Packets a sender needs at most 2^20 subsets to search exhaustively.
pub const ENUMERATION_BOUND: u32 = 20;

#[derive(Debug, Error, PartialEq)]
pub enum CodingError {
    #[error("has-set of {0} packets exceeds the enumeration bound of {ENUMERATION_BOUND}")]
    AboveEnumerationBound(u32),
}

/// Who is encoding this stage.
#[derive(Debug, Clone)]
pub enum Sender<'a> {
    /// A cooperating player; its Has set and link losses come from the state.
    Player(usize),
    /// The base station: holds the whole frame, loses to player i with
    /// probability `loss[i]`.
    BaseStation { loss: &'a [f64] },
}

/// Everything a stage decision can see.
#[derive(Debug, Clone, Copy)]
pub struct StageSnapshot<'a> {
    pub state: &'a StateMatrix,
    pub delay: &'a [u32],
    pub initial_wants: &'a [u32],
    pub erasure: &'a ErasureMatrix,
}

impl<'a> StageSnapshot<'a> {
    fn sender_has(&self, sender: &Sender) -> PacketMask {
        match sender {
            Sender::Player(i) => self.state.has(*i),
            Sender::BaseStation { .. } => crate::model::packet_universe(self.state.packets()),
        }
    }

    fn delivery_loss(&self, sender: &Sender, receiver: usize) -> f64 {
        match sender {
            Sender::Player(j) => self.erasure.loss(receiver, *j),
            Sender::BaseStation { loss } => loss[receiver],
        }
    }

    fn sender_index(&self, sender: &Sender) -> Option<usize> {
        match sender {
            Sender::Player(i) => Some(*i),
            Sender::BaseStation { .. } => None,
        }
    }
}

/// Coding graph for one sender: a vertex per (player, wanted packet the
/// sender holds); an edge when the two vertices can be served by one
/// combination. Any clique induces a combination instantly decodable for
/// every clique member.
#[derive(Debug, Clone)]
pub struct IdncGraph {
    pub vertices: Vec<(usize, usize)>,
    adjacency: Vec<Vec<bool>>,
}

impl IdncGraph {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        self.adjacency[a][b]
    }
}

fn vertices_compatible(state: &StateMatrix, a: (usize, usize), b: (usize, usize)) -> bool {
    let ((i1, j1), (i2, j2)) = (a, b);
    j1 == j2 || (state.has(i2) >> j1 & 1 == 1 && state.has(i1) >> j2 & 1 == 1)
}

/// Materializes the coding graph for `sender` over the current state.
pub fn build_idnc_graph(sender: &Sender, snapshot: &StageSnapshot) -> IdncGraph {
    let state = snapshot.state;
    let has = snapshot.sender_has(sender);
    let own = snapshot.sender_index(sender);
    let mut vertices = Vec::new();
    for i in 0..state.players() {
        if own == Some(i) {
            continue;
        }
        let mut wanted = state.wants(i) & has;
        while wanted != 0 {
            let j = wanted.trailing_zeros() as usize;
            wanted &= wanted - 1;
            vertices.push((i, j));
        }
    }
    let n = vertices.len();
    let mut adjacency = vec![vec![false; n]; n];
    for a in 0..n {
        for b in 0..n {
            if a != b && vertices_compatible(state, vertices[a], vertices[b]) {
                adjacency[a][b] = true;
            }
        }
    }
    IdncGraph { vertices, adjacency }
}

/// Grows a clique greedily by maximum vertex weight: critical players first
/// (the metric's priority set), then delivery probability, then the lowest
/// (player, packet) index for determinism. Returns the XOR support of the
/// clique's packets; the zero combination when the graph is empty.
pub fn greedy_combination(
    sender: &Sender,
    snapshot: &StageSnapshot,
    metric: DelayMetric,
    priority: PlayerMask,
) -> PacketMask {
    let state = snapshot.state;
    let has = snapshot.sender_has(sender);
    let own = snapshot.sender_index(sender);
    let _ = metric; // the metric acts through `priority`; kept for call-site clarity
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for i in 0..state.players() {
        if own == Some(i) {
            continue;
        }
        let mut wanted = state.wants(i) & has;
        while wanted != 0 {
            let j = wanted.trailing_zeros() as usize;
            wanted &= wanted - 1;
            candidates.push((i, j));
        }
    }
    let mut clique: Vec<(usize, usize)> = Vec::new();
    let mut kappa: PacketMask = 0;
    loop {
        let mut best: Option<((usize, usize), (u8, f64))> = None;
        for &(i, j) in &candidates {
            let w = (
                (priority >> i & 1) as u8,
                1.0 - snapshot.delivery_loss(sender, i),
            );
            let better = match &best {
                None => true,
                Some((bv, bw)) => {
                    w.0 > bw.0
                        || (w.0 == bw.0 && w.1 > bw.1)
                        || (w.0 == bw.0 && w.1 == bw.1 && (i, j) < *bv)
                }
            };
            if better {
                best = Some(((i, j), w));
            }
        }
        let Some((v, _)) = best else { break };
        clique.push(v);
        kappa |= 1u64 << v.1;
        candidates.retain(|&c| c != v && clique.iter().all(|&m| vertices_compatible(state, c, m)));
    }
    kappa
}

/// Expected stage objective of transmitting `kappa`, per metric:
/// SDD: expected number of wanting players left unserved and undelayed-only-by-erasure;
/// MDD: 0/1 flag for whether the max delay must rise (a critical player is
/// untargeted), SDD-score tie-broken;
/// CT: the resulting largest expected completion estimate, SDD tie-broken.
fn combination_score(
    sender: &Sender,
    snapshot: &StageSnapshot,
    metric: DelayMetric,
    kappa: PacketMask,
) -> (f64, f64) {
    let state = snapshot.state;
    let wanting = wants_indicator(state);
    let untargeted = wanting & !targeted_set(kappa, state);
    let m = state.players();
    let mut sdd = 0.0;
    for i in 0..m {
        if untargeted >> i & 1 == 1 {
            sdd += 1.0 - snapshot.delivery_loss(sender, i);
        }
    }
    match metric {
        DelayMetric::SumDelay => (sdd, 0.0),
        DelayMetric::MaxDelay => {
            let critical = critical_players(
                DelayMetric::MaxDelay,
                state,
                snapshot.delay,
                snapshot.initial_wants,
                snapshot.erasure,
            );
            let rises = critical & untargeted != 0;
            (if rises { 1.0 } else { 0.0 }, sdd)
        }
        DelayMetric::CompletionTime => {
            let p_bar = snapshot.erasure.row_averages();
            let est = completion_time_estimate(snapshot.initial_wants, snapshot.delay, &p_bar)
                .expect("valid averages");
            let mut new_max = f64::NEG_INFINITY;
            for i in 0..m {
                let bump = if untargeted >> i & 1 == 1 {
                    (1.0 - snapshot.delivery_loss(sender, i)) / (1.0 - p_bar[i])
                } else {
                    0.0
                };
                new_max = new_max.max(est[i] + bump);
            }
            (new_max, sdd)
        }
    }
}

/// Enumerates every subset of the sender's Has set restricted to packets
/// somebody else wants (other packets never change any targeted set),
/// scores each by the metric's stage objective, and returns a minimizer.
/// Ties resolve to the smaller SDD score, then the lexicographically
/// smallest κ.
pub fn exhaustive_best_combination(
    sender: &Sender,
    snapshot: &StageSnapshot,
    metric: DelayMetric,
) -> Result<PacketMask, CodingError> {
    let state = snapshot.state;
    let has = snapshot.sender_has(sender);
    if has.count_ones() > ENUMERATION_BOUND {
        return Err(CodingError::AboveEnumerationBound(has.count_ones()));
    }
    let own = snapshot.sender_index(sender);
    let mut useful: PacketMask = 0;
    for i in 0..state.players() {
        if own != Some(i) {
            useful |= state.wants(i);
        }
    }
    useful &= has;
    let bits: Vec<u32> = (0..64).filter(|b| useful >> b & 1 == 1).collect();
    let mut best_kappa = 0u64;
    let mut best = combination_score(sender, snapshot, metric, 0);
    for sub in 1..(1u64 << bits.len()) {
        let mut kappa = 0u64;
        for (pos, &bit) in bits.iter().enumerate() {
            if sub >> pos & 1 == 1 {
                kappa |= 1u64 << bit;
            }
        }
        let score = combination_score(sender, snapshot, metric, kappa);
        if score.0 < best.0
            || (score.0 == best.0 && score.1 < best.1)
            || (score.0 == best.0 && score.1 == best.1 && kappa < best_kappa)
        {
            best = score;
            best_kappa = kappa;
        }
    }
    Ok(best_kappa)
}

/// Point-to-multipoint selection: the base station encodes over the whole
/// frame with per-player loss `q`.
pub fn pmp_combination(
    snapshot: &StageSnapshot,
    metric: DelayMetric,
    q: &[f64],
    policy: SelectionPolicy,
) -> PacketMask {
    select_combination(&Sender::BaseStation { loss: q }, snapshot, metric, policy)
}

/// How a scheme picks combinations: the oracle when the sender's Has set is
/// within `exhaustive_budget` packets, the greedy heuristic otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectionPolicy {
    pub exhaustive_budget: u32,
}

impl SelectionPolicy {
    /// Oracle whenever the hard enumeration bound allows it.
    pub const EXACT: SelectionPolicy = SelectionPolicy { exhaustive_budget: ENUMERATION_BOUND };
    /// Experiment-scale default; beyond ~2^10 subsets per stage decision the
    /// oracle dominates the runtime.
    pub const BUDGETED: SelectionPolicy = SelectionPolicy { exhaustive_budget: 10 };

    pub fn uses_oracle(&self, sender_has: PacketMask) -> bool {
        sender_has.count_ones() <= self.exhaustive_budget.min(ENUMERATION_BOUND)
    }
}

/// Metric-aware selection entry point used by the dynamics.
pub fn select_combination(
    sender: &Sender,
    snapshot: &StageSnapshot,
    metric: DelayMetric,
    policy: SelectionPolicy,
) -> PacketMask {
    let has = snapshot.sender_has(sender);
    if policy.uses_oracle(has) {
        exhaustive_best_combination(sender, snapshot, metric)
            .expect("budget is capped at the enumeration bound")
    } else {
        let priority = critical_players(
            metric,
            snapshot.state,
            snapshot.delay,
            snapshot.initial_wants,
            snapshot.erasure,
        );
        greedy_combination(sender, snapshot, metric, priority)
    }
}

/// Expected sum-delay increment of a solo transmission, used as a secondary
/// objective in a few places.
pub fn expected_sum_delay(sender: usize, kappa: PacketMask, snapshot: &StageSnapshot) -> f64 {
    expected_delay_increment(sender, kappa, snapshot.state, snapshot.erasure)
        .iter()
        .sum()
}
