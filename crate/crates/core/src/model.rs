//! Network state, stochastic channel, and the delay / completion-time
//! kernels shared by every game.
//!
//! Player sets and packet sets are bitmasks (`u64`), so the model supports
//! up to 64 players and 64 packets per frame; the configuration validator
//! enforces the bound.

use crate::rng::{self, Purpose};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Bit i set = player i is in the set.
pub type PlayerMask = u64;
/// Bit j set = packet j is in the set.
pub type PacketMask = u64;

pub const MAX_PLAYERS: usize = 64;
pub const MAX_PACKETS: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("player count {0} outside 1..={MAX_PLAYERS}")]
    BadPlayerCount(usize),
    #[error("packet count {0} outside 1..={MAX_PACKETS}")]
    BadPacketCount(usize),
    #[error("erasure probability {value} at ({row},{col}) outside [0,1)")]
    BadErasure { row: usize, col: usize, value: f64 },
    #[error("base-station erasure {value} for player {player} outside [0,1)")]
    BadBsErasure { player: usize, value: f64 },
    #[error("satisfaction margin must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("max_stages must be positive")]
    BadMaxStages,
    #[error("average erasure {0} not below 1")]
    BadAverageErasure(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Full parameterization of one recovery session.
#[derive(Debug, Clone)]
pub struct GameConfig {
    /// Number of cooperating players (M).
    pub players: usize,
    /// Number of source packets in the frame (N).
    pub packets: usize,
    /// Player-to-player packet loss probabilities.
    pub erasure: ErasureMatrix,
    /// Base-station-to-player loss probability per player (Q).
    pub bs_erasure: Vec<f64>,
    /// Punishment length in stages after a collision (V).
    pub backoff_window: usize,
    /// Satisfaction margin for the learning stimulus (ε).
    pub epsilon: f64,
    /// Episode cutoff in stages.
    pub max_stages: usize,
    /// Root seed; all sub-streams derive from it.
    pub seed: u64,
}

impl GameConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.players == 0 || self.players > MAX_PLAYERS {
            return Err(ModelError::BadPlayerCount(self.players));
        }
        if self.packets == 0 || self.packets > MAX_PACKETS {
            return Err(ModelError::BadPacketCount(self.packets));
        }
        if self.erasure.players() != self.players {
            return Err(ModelError::DimensionMismatch {
                expected: self.players,
                got: self.erasure.players(),
            });
        }
        if self.bs_erasure.len() != self.players {
            return Err(ModelError::DimensionMismatch {
                expected: self.players,
                got: self.bs_erasure.len(),
            });
        }
        for (i, &q) in self.bs_erasure.iter().enumerate() {
            if !(0.0..1.0).contains(&q) {
                return Err(ModelError::BadBsErasure { player: i, value: q });
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(ModelError::BadEpsilon(self.epsilon));
        }
        if self.max_stages == 0 {
            return Err(ModelError::BadMaxStages);
        }
        Ok(())
    }
}

/// Per-link loss probabilities: `loss(i, j)` is the probability that a
/// packet sent by player j is erased at player i. The diagonal is forced to
/// zero so self-links never inflate the row averages.
#[derive(Debug, Clone, PartialEq)]
pub struct ErasureMatrix {
    loss: Vec<f64>,
    players: usize,
}

impl ErasureMatrix {
    /// Builds from a row-major M×M matrix; entries must lie in [0,1).
    /// Asymmetry is allowed. Diagonal entries are overwritten with 0.
    pub fn new(players: usize, loss: Vec<f64>) -> Result<Self, ModelError> {
        if loss.len() != players * players {
            return Err(ModelError::DimensionMismatch {
                expected: players * players,
                got: loss.len(),
            });
        }
        let mut loss = loss;
        for i in 0..players {
            for j in 0..players {
                let v = loss[i * players + j];
                if !(0.0..1.0).contains(&v) {
                    return Err(ModelError::BadErasure { row: i, col: j, value: v });
                }
            }
            loss[i * players + i] = 0.0;
        }
        Ok(Self { loss, players })
    }

    /// Same loss probability `p` on every off-diagonal link.
    pub fn uniform(players: usize, p: f64) -> Result<Self, ModelError> {
        Self::new(players, vec![p; players * players])
    }

    pub fn players(&self) -> usize {
        self.players
    }

    /// Loss probability from sender `j` to receiver `i`.
    pub fn loss(&self, i: usize, j: usize) -> f64 {
        self.loss[i * self.players + j]
    }

    /// Row average p̄_i = ||P_i||_1 / M (diagonal included, and zero).
    pub fn row_average(&self, i: usize) -> f64 {
        let row = &self.loss[i * self.players..(i + 1) * self.players];
        row.iter().sum::<f64>() / self.players as f64
    }

    pub fn row_averages(&self) -> Vec<f64> {
        (0..self.players).map(|i| self.row_average(i)).collect()
    }
}

/// Has/Wants state of the session: bit j of `wants(i)` is set while player i
/// is still missing packet j.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateMatrix {
    wants: Vec<PacketMask>,
    packets: usize,
}

impl StateMatrix {
    pub fn new(wants: Vec<PacketMask>, packets: usize) -> Self {
        debug_assert!(packets <= MAX_PACKETS);
        let mask = packet_universe(packets);
        debug_assert!(wants.iter().all(|w| w & !mask == 0));
        Self { wants, packets }
    }

    /// Convenience constructor from 0/1 rows (1 = wants).
    pub fn from_rows(rows: &[Vec<u8>]) -> Self {
        let packets = rows.first().map_or(0, Vec::len);
        let wants = rows
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|&(_, &v)| v != 0)
                    .fold(0u64, |m, (j, _)| m | (1 << j))
            })
            .collect();
        Self::new(wants, packets)
    }

    pub fn players(&self) -> usize {
        self.wants.len()
    }

    pub fn packets(&self) -> usize {
        self.packets
    }

    pub fn wants(&self, player: usize) -> PacketMask {
        self.wants[player]
    }

    pub fn has(&self, player: usize) -> PacketMask {
        !self.wants[player] & packet_universe(self.packets)
    }

    pub fn wants_size(&self, player: usize) -> u32 {
        self.wants[player].count_ones()
    }

    pub fn wants_sizes(&self) -> Vec<u32> {
        (0..self.players()).map(|i| self.wants_size(i)).collect()
    }

    /// True once every Wants set is empty (end of the recovery phase).
    pub fn is_complete(&self) -> bool {
        self.wants.iter().all(|&w| w == 0)
    }

    /// Marks `packet` as decoded by `player`.
    pub fn decode(&mut self, player: usize, packet: usize) {
        self.wants[player] &= !(1u64 << packet);
    }

    /// Every packet is held by at least one player.
    pub fn covered(&self) -> bool {
        let mut held = 0u64;
        for i in 0..self.players() {
            held |= self.has(i);
        }
        held == packet_universe(self.packets)
    }
}

pub fn packet_universe(packets: usize) -> PacketMask {
    if packets == 64 {
        !0
    } else {
        (1u64 << packets) - 1
    }
}

pub fn player_universe(players: usize) -> PlayerMask {
    if players == 64 {
        !0
    } else {
        (1u64 << players) - 1
    }
}

/// One stage's channel realization: `delivered(sender)` has bit r set when
/// the link from `sender` to player r delivered. Entries are independent
/// Bernoulli draws; the self-link always delivers (zero self-loss).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelState {
    delivered: Vec<PlayerMask>,
}

impl ChannelState {
    pub fn delivered(&self, sender: usize) -> PlayerMask {
        self.delivered[sender]
    }

    pub fn link(&self, receiver: usize, sender: usize) -> bool {
        self.delivered[sender] >> receiver & 1 == 1
    }

    pub fn all_delivered(players: usize) -> Self {
        Self { delivered: vec![player_universe(players); players] }
    }

    pub fn from_delivered(delivered: Vec<PlayerMask>) -> Self {
        Self { delivered }
    }
}

/// The delay aspect a scheme tries to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DelayMetric {
    /// Largest completion-time estimate (CT).
    CompletionTime,
    /// Largest cumulative decoding delay (MDD).
    MaxDelay,
    /// Total cumulative decoding delay (SDD).
    SumDelay,
}

impl DelayMetric {
    pub const ALL: [DelayMetric; 3] =
        [DelayMetric::CompletionTime, DelayMetric::MaxDelay, DelayMetric::SumDelay];
}

/// Players that can still push the metric's cost up this stage: for MDD the
/// wanting players sitting at the current maximum delay; for CT the wanting
/// players whose estimate would exceed the current largest one after a unit
/// delay. Empty for SDD, which has no criticality structure.
pub fn critical_players(
    metric: DelayMetric,
    state: &StateMatrix,
    delay: &[u32],
    initial_wants: &[u32],
    erasure: &ErasureMatrix,
) -> PlayerMask {
    let wanting = wants_indicator(state);
    match metric {
        DelayMetric::SumDelay => 0,
        DelayMetric::MaxDelay => {
            let max = delay.iter().copied().max().unwrap_or(0);
            (0..state.players())
                .filter(|&i| wanting >> i & 1 == 1 && delay[i] == max)
                .fold(0u64, |m, i| m | (1 << i))
        }
        DelayMetric::CompletionTime => {
            let p_bar = erasure.row_averages();
            let est = completion_time_estimate(initial_wants, delay, &p_bar)
                .expect("row averages below 1 by construction");
            let max = max_completion_estimate(&est);
            (0..state.players())
                .filter(|&i| wanting >> i & 1 == 1 && est[i] + 1.0 / (1.0 - p_bar[i]) > max)
                .fold(0u64, |m, i| m | (1 << i))
        }
    }
}

/// Outcome of the broadcast phase: the resulting state matrix plus how many
/// times each packet had to be sent before somebody held it.
#[derive(Debug, Clone)]
pub struct InitialPhase {
    pub state: StateMatrix,
    pub broadcasts: Vec<u32>,
}

/// Broadcasts the frame uncoded; packet j is erased at player i with
/// probability q_i, and any packet nobody received is re-sent until at
/// least one player holds it.
pub fn initial_phase(config: &GameConfig, rng: &mut ChaCha8Rng) -> InitialPhase {
    let m = config.players;
    let n = config.packets;
    let mut wants = vec![packet_universe(n); m];
    let mut broadcasts = vec![0u32; n];
    for j in 0..n {
        loop {
            broadcasts[j] += 1;
            let mut held = false;
            for (i, w) in wants.iter_mut().enumerate() {
                if *w >> j & 1 == 1 && rng.random::<f64>() >= config.bs_erasure[i] {
                    *w &= !(1u64 << j);
                }
                held |= *w >> j & 1 == 0;
            }
            if held {
                break;
            }
        }
    }
    InitialPhase { state: StateMatrix::new(wants, n), broadcasts }
}

/// Initial phase on its own sub-stream of the config seed.
pub fn initial_phase_seeded(config: &GameConfig, episode: u64) -> InitialPhase {
    let mut rng = rng::stage_stream(config.seed, episode, 0, Purpose::InitialPhase);
    initial_phase(config, &mut rng)
}

/// Draws one stage's link realizations: each link from j to i delivers with
/// probability 1 − p(i, j). Draw order is sender-major so the stream layout
/// is fixed.
pub fn sample_channel_state(erasure: &ErasureMatrix, rng: &mut ChaCha8Rng) -> ChannelState {
    let m = erasure.players();
    let mut delivered = vec![0u64; m];
    for (sender, d) in delivered.iter_mut().enumerate() {
        for receiver in 0..m {
            if rng.random::<f64>() >= erasure.loss(receiver, sender) {
                *d |= 1 << receiver;
            }
        }
    }
    ChannelState { delivered }
}

/// τ: players for whom the combination contains exactly one wanted packet.
pub fn targeted_set(kappa: PacketMask, state: &StateMatrix) -> PlayerMask {
    let mut t = 0u64;
    for i in 0..state.players() {
        if (state.wants(i) & kappa).count_ones() == 1 {
            t |= 1 << i;
        }
    }
    t
}

/// M^w: players whose Wants set is non-empty.
pub fn wants_indicator(state: &StateMatrix) -> PlayerMask {
    let mut w = 0u64;
    for i in 0..state.players() {
        if state.wants(i) != 0 {
            w |= 1 << i;
        }
    }
    w
}

/// Unit delay hits for a single-transmitter stage: players that received,
/// are not targeted, and still want packets (Hadamard product of the three
/// indicator vectors). Callers add the wants indicator instead when not
/// exactly one player transmits.
pub fn delay_increment(
    delivered_by_sender: PlayerMask,
    kappa: PacketMask,
    state: &StateMatrix,
) -> PlayerMask {
    delivered_by_sender & !targeted_set(kappa, state) & wants_indicator(state)
}

/// Expected per-player delay increment when `sender` alone transmits
/// `kappa`: (1 − p_{i,sender}) for wanting untargeted players, 0 otherwise.
/// The self-link has zero loss, so a transmitter that still wants packets
/// always expects a full unit.
pub fn expected_delay_increment(
    sender: usize,
    kappa: PacketMask,
    state: &StateMatrix,
    erasure: &ErasureMatrix,
) -> Vec<f64> {
    let hit = !targeted_set(kappa, state) & wants_indicator(state);
    (0..state.players())
        .map(|i| if hit >> i & 1 == 1 { 1.0 - erasure.loss(i, sender) } else { 0.0 })
        .collect()
}

/// Cumulative-delay update: silence or collision charges every wanting
/// player; a unique transmitter charges its realized delay increment.
pub fn update_cumulative_delay(
    delay: &[u32],
    profile: PlayerMask,
    combination_of_sender: PacketMask,
    channel: &ChannelState,
    state: &StateMatrix,
) -> Vec<u32> {
    let hits = if profile.count_ones() == 1 {
        let sender = profile.trailing_zeros() as usize;
        delay_increment(channel.delivered(sender), combination_of_sender, state)
    } else {
        wants_indicator(state)
    };
    delay
        .iter()
        .enumerate()
        .map(|(i, &d)| d + (hits >> i & 1) as u32)
        .collect()
}

/// Completion-time estimate C_i = (W_i + 𝔻_i − p̄_i) / (1 − p̄_i), with W the
/// Wants-set size at the start of the recovery phase. Estimates of players
/// that started complete can be slightly negative; they are left as-is.
pub fn completion_time_estimate(
    initial_wants: &[u32],
    delay: &[u32],
    row_avg_erasure: &[f64],
) -> Result<Vec<f64>, ModelError> {
    if let Some(&bad) = row_avg_erasure.iter().find(|p| !(**p < 1.0)) {
        return Err(ModelError::BadAverageErasure(bad));
    }
    Ok(initial_wants
        .iter()
        .zip(delay)
        .zip(row_avg_erasure)
        .map(|((&w, &d), &p)| (w as f64 + d as f64 - p) / (1.0 - p))
        .collect())
}

/// Largest completion estimate. Signed max, not the absolute-value norm:
/// started-complete players carry small negative estimates that must not
/// dominate.
pub fn max_completion_estimate(estimates: &[f64]) -> f64 {
    estimates.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}
