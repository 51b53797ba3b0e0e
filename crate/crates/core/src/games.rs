//! The six stage games: common-payoff utilities over action profiles, the
//! collision indicator and history window, and the back-off action spaces.
//!
//! Utilities are identical for every player, so each game is its own
//! coordination game and the stage utility is an exact potential. A profile
//! is scored either against a realized channel draw (for episode scoring
//! and learning stimuli) or in expected mode with the channel replaced by
//! its mean (for stage decisions and equilibrium analysis). Expected mode
//! uses the fractional delivery expectation for the completion-time and
//! sum-delay terms, and a 0/1 step for the max-delay term: the max of the
//! probability-weighted delay vector either exceeds the previous maximum or
//! it does not.

use crate::coding::{select_combination, SelectionPolicy, Sender, StageSnapshot};
use crate::model::{
    completion_time_estimate, delay_increment, expected_delay_increment, max_completion_estimate,
    wants_indicator, ChannelState, DelayMetric, ErasureMatrix, PacketMask, PlayerMask, StateMatrix,
};
use std::collections::VecDeque;

/// One of the six games: a delay metric, plain or with the sparsity /
/// punishment terms of the reformulated versions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GameKind {
    pub metric: DelayMetric,
    pub regularized: bool,
}

impl GameKind {
    pub const ALL: [GameKind; 6] = [
        GameKind { metric: DelayMetric::CompletionTime, regularized: false },
        GameKind { metric: DelayMetric::MaxDelay, regularized: false },
        GameKind { metric: DelayMetric::SumDelay, regularized: false },
        GameKind { metric: DelayMetric::CompletionTime, regularized: true },
        GameKind { metric: DelayMetric::MaxDelay, regularized: true },
        GameKind { metric: DelayMetric::SumDelay, regularized: true },
    ];

    /// Conventional 1-based numbering: 1–3 plain CT/MDD/SDD, 4–6 regularized.
    pub fn number(&self) -> u8 {
        let base = match self.metric {
            DelayMetric::CompletionTime => 1,
            DelayMetric::MaxDelay => 2,
            DelayMetric::SumDelay => 3,
        };
        if self.regularized {
            base + 3
        } else {
            base
        }
    }
}

/// Sliding window of collision indicators over the last V stages.
/// Indicators for non-positive time are zero, so a fresh history is empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollisionHistory {
    window: VecDeque<PlayerMask>,
    length: usize,
}

impl CollisionHistory {
    pub fn new(length: usize) -> Self {
        Self { window: VecDeque::new(), length }
    }

    pub fn window_length(&self) -> usize {
        self.length
    }

    /// Columns currently in the window, oldest first.
    pub fn columns(&self) -> impl Iterator<Item = PlayerMask> + '_ {
        self.window.iter().copied()
    }

    /// Back-off vector: players that collided within the window.
    pub fn backoff(&self) -> PlayerMask {
        self.window.iter().fold(0, |acc, &c| acc | c)
    }

    /// Slides the window one stage forward with the new indicator.
    pub fn push(&mut self, indicator: PlayerMask) {
        if self.length == 0 {
            return;
        }
        if self.window.len() == self.length {
            self.window.pop_front();
        }
        self.window.push_back(indicator);
    }
}

/// c_t: players that transmitted in a multi-transmitter stage.
pub fn collision_indicator(profile: PlayerMask) -> PlayerMask {
    if profile.count_ones() > 1 {
        profile
    } else {
        0
    }
}

/// Sliding-window update as a pure function.
pub fn update_collision_history(history: &CollisionHistory, indicator: PlayerMask) -> CollisionHistory {
    let mut next = history.clone();
    next.push(indicator);
    next
}

/// A player's available actions this stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSet {
    /// Transmit its combination or stay silent.
    TransmitOrSilent,
    /// Backed off: silence only.
    SilentOnly,
}

pub fn allowed_actions(player: usize, backoff: PlayerMask) -> ActionSet {
    if backoff >> player & 1 == 1 {
        ActionSet::SilentOnly
    } else {
        ActionSet::TransmitOrSilent
    }
}

/// Everything a stage utility depends on: the shared state, the cumulative
/// delays so far, frame-start Wants sizes (completion estimates), the link
/// losses, each player's chosen combination under the game's metric, and
/// the collision window.
#[derive(Debug, Clone)]
pub struct History {
    pub state: StateMatrix,
    pub delay: Vec<u32>,
    pub initial_wants: Vec<u32>,
    pub erasure: ErasureMatrix,
    pub combinations: Vec<PacketMask>,
    pub collisions: CollisionHistory,
}

impl History {
    /// Builds a stage history, selecting every player's combination for
    /// `metric` under `policy`.
    pub fn build(
        metric: DelayMetric,
        state: StateMatrix,
        delay: Vec<u32>,
        initial_wants: Vec<u32>,
        erasure: ErasureMatrix,
        collisions: CollisionHistory,
        policy: SelectionPolicy,
    ) -> Self {
        let snapshot =
            StageSnapshot { state: &state, delay: &delay, initial_wants: &initial_wants, erasure: &erasure };
        let combinations = (0..state.players())
            .map(|i| select_combination(&Sender::Player(i), &snapshot, metric, policy))
            .collect();
        Self { state, delay, initial_wants, erasure, combinations, collisions }
    }

    pub fn players(&self) -> usize {
        self.state.players()
    }

    pub fn snapshot(&self) -> StageSnapshot<'_> {
        StageSnapshot {
            state: &self.state,
            delay: &self.delay,
            initial_wants: &self.initial_wants,
            erasure: &self.erasure,
        }
    }

    /// Previous-stage cost of the plain game for `metric` (the φ′ baseline
    /// of the closed-form expressions).
    pub fn previous_cost(&self, metric: DelayMetric) -> f64 {
        match metric {
            DelayMetric::SumDelay => self.delay.iter().map(|&d| d as f64).sum(),
            DelayMetric::MaxDelay => self.delay.iter().copied().max().unwrap_or(0) as f64,
            DelayMetric::CompletionTime => {
                let p_bar = self.erasure.row_averages();
                let est = completion_time_estimate(&self.initial_wants, &self.delay, &p_bar)
                    .expect("valid erasure averages");
                max_completion_estimate(&est)
            }
        }
    }
}

/// Scoring mode: a realized channel draw, or the channel replaced by its
/// expectation for decision-time analysis.
#[derive(Debug, Clone, Copy)]
pub enum UtilityMode<'a> {
    Realized(&'a ChannelState),
    Expected,
}

/// Per-player delay increments for a profile, as fractions of a unit.
/// Realized draws give 0/1 entries; expected mode gives delivery
/// probabilities for wanting untargeted players under a unique transmitter
/// and full units when not exactly one player transmits.
fn delay_delta(profile: PlayerMask, h: &History, mode: UtilityMode) -> Vec<f64> {
    let m = h.players();
    if profile.count_ones() == 1 {
        let sender = profile.trailing_zeros() as usize;
        let kappa = h.combinations[sender];
        match mode {
            UtilityMode::Realized(channel) => {
                let hits = delay_increment(channel.delivered(sender), kappa, &h.state);
                (0..m).map(|i| (hits >> i & 1) as f64).collect()
            }
            UtilityMode::Expected => {
                expected_delay_increment(sender, kappa, &h.state, &h.erasure)
            }
        }
    } else {
        let wanting = wants_indicator(&h.state);
        (0..m).map(|i| (wanting >> i & 1) as f64).collect()
    }
}

/// Stage cost shared by realized scoring, expected-mode analysis, and the
/// lossy-feedback payoff estimation: cumulative delays plus this stage's
/// per-player increments, reduced per the metric, plus the regularized
/// games' extra terms. `step_max` selects the expected-mode MDD semantics
/// (the max either holds or rises by one full unit).
pub fn stage_cost(
    kind: GameKind,
    delay: &[f64],
    delta: &[f64],
    initial_wants: &[u32],
    erasure: &ErasureMatrix,
    transmitters: u32,
    step_max: bool,
) -> f64 {
    let m = delay.len();
    let base = match kind.metric {
        DelayMetric::SumDelay => delay.iter().sum::<f64>() + delta.iter().sum::<f64>(),
        DelayMetric::MaxDelay => {
            if step_max {
                let prev = delay.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let rises = (0..m).any(|i| delay[i] > prev - 1e-9 && delta[i] > 0.0);
                prev + if rises { 1.0 } else { 0.0 }
            } else {
                (0..m).map(|i| delay[i] + delta[i]).fold(f64::NEG_INFINITY, f64::max)
            }
        }
        DelayMetric::CompletionTime => (0..m)
            .map(|i| {
                let p = erasure.row_average(i);
                (initial_wants[i] as f64 + delay[i] + delta[i] - p) / (1.0 - p)
            })
            .fold(f64::NEG_INFINITY, f64::max),
    };
    let mut cost = base;
    if kind.regularized {
        cost += transmitters as f64;
        if kind.metric != DelayMetric::SumDelay {
            cost += delta.iter().sum::<f64>() / m as f64;
        }
    }
    cost
}

/// Common stage utility of `profile` for game `kind`.
///
/// Plain games return the negative of the updated cost (max completion
/// estimate, max cumulative delay, or total cumulative delay). Regularized
/// games additionally subtract the transmitter count, and for the CT and
/// MDD metrics the per-player-normalized step of the cumulative delay.
pub fn utility(kind: GameKind, profile: PlayerMask, h: &History, mode: UtilityMode) -> f64 {
    let delta = delay_delta(profile, h, mode);
    let delay: Vec<f64> = h.delay.iter().map(|&d| d as f64).collect();
    let step_max = matches!(mode, UtilityMode::Expected);
    -stage_cost(
        kind,
        &delay,
        &delta,
        &h.initial_wants,
        &h.erasure,
        profile.count_ones(),
        step_max,
    )
}

/// Realized payoff of one stage in the plain game for `metric`: the drop in
/// utility relative to leaving the cumulative delays untouched. Used as the
/// perceived payoff in the learning stimulus.
pub fn realized_stage_payoff(
    metric: DelayMetric,
    profile: PlayerMask,
    h: &History,
    channel: &ChannelState,
) -> f64 {
    let kind = GameKind { metric, regularized: false };
    utility(kind, profile, h, UtilityMode::Realized(channel)) + h.previous_cost(metric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::packet_universe;
    use crate::rng::substream;
    use rand::Rng;

    fn simple_history(metric: DelayMetric) -> History {
        // Player 0 holds everything; players 1 and 2 each want one packet.
        let state = StateMatrix::from_rows(&[vec![0, 0, 0], vec![1, 0, 0], vec![0, 1, 0]]);
        let erasure = ErasureMatrix::uniform(3, 0.2).unwrap();
        History::build(
            metric,
            state,
            vec![2, 2, 1],
            vec![1, 2, 2],
            erasure,
            CollisionHistory::new(2),
            SelectionPolicy::EXACT,
        )
    }

    #[test]
    fn sum_delay_utility_when_everyone_served() {
        let h = simple_history(DelayMetric::SumDelay);
        // Player 0's oracle combination targets both wanting players.
        assert_eq!(crate::model::targeted_set(h.combinations[0], &h.state), 0b110);
        let ch = ChannelState::all_delivered(3);
        let u = utility(
            GameKind { metric: DelayMetric::SumDelay, regularized: false },
            0b001,
            &h,
            UtilityMode::Realized(&ch),
        );
        assert_eq!(u, -5.0); // -(2+2+1): no new delay
        let u6 = utility(
            GameKind { metric: DelayMetric::SumDelay, regularized: true },
            0b001,
            &h,
            UtilityMode::Realized(&ch),
        );
        assert_eq!(u6, -6.0); // the ℓ1 term
    }

    #[test]
    fn max_delay_collision_example() {
        let state = StateMatrix::from_rows(&[vec![1, 0], vec![1, 0], vec![1, 0]]);
        let erasure = ErasureMatrix::uniform(3, 0.2).unwrap();
        let h = History::build(
            DelayMetric::MaxDelay,
            state,
            vec![2, 2, 1],
            vec![2, 2, 2],
            erasure,
            CollisionHistory::new(2),
            SelectionPolicy::EXACT,
        );
        let ch = ChannelState::all_delivered(3);
        let u = utility(
            GameKind { metric: DelayMetric::MaxDelay, regularized: false },
            0b011,
            &h,
            UtilityMode::Realized(&ch),
        );
        assert_eq!(u, -3.0); // collision bumps every wanting player
    }

    #[test]
    fn collision_indicator_cases() {
        assert_eq!(collision_indicator(0b001), 0);
        assert_eq!(collision_indicator(0b011), 0b011);
        assert_eq!(collision_indicator(0), 0);
    }

    #[test]
    fn collision_window_replay() {
        let mut h = CollisionHistory::new(3);
        let log = [0b01u64, 0, 0b10, 0b11, 0, 0];
        let mut replay: Vec<Vec<u64>> = Vec::new();
        for &c in &log {
            h.push(c);
            replay.push(h.columns().collect());
        }
        // Window contents equal the last V indicators in order.
        assert_eq!(replay[3], vec![0, 0b10, 0b11]);
        assert_eq!(replay[5], vec![0b11, 0, 0]);
        assert_eq!(h.backoff(), 0b11);
        h.push(0);
        assert_eq!(h.backoff(), 0);
    }

    #[test]
    fn zero_window_never_backs_off() {
        let mut h = CollisionHistory::new(0);
        h.push(0b111);
        assert_eq!(h.backoff(), 0);
    }

    #[test]
    fn backoff_lifts_after_exactly_v_stages() {
        let v = 3;
        let mut h = CollisionHistory::new(v);
        h.push(collision_indicator(0b011));
        assert_eq!(allowed_actions(0, h.backoff()), ActionSet::SilentOnly);
        assert_eq!(allowed_actions(2, h.backoff()), ActionSet::TransmitOrSilent);
        for stage in 0..v {
            assert_eq!(
                allowed_actions(1, h.backoff()),
                ActionSet::SilentOnly,
                "stage {stage} after the collision"
            );
            h.push(0);
        }
        assert_eq!(allowed_actions(1, h.backoff()), ActionSet::TransmitOrSilent);
    }

    fn random_history(metric: DelayMetric, rng: &mut rand_chacha::ChaCha8Rng) -> History {
        let players = rng.random_range(2..=4usize);
        let packets = rng.random_range(2..=4usize);
        let state = loop {
            let rows: Vec<u64> =
                (0..players).map(|_| rng.random::<u64>() & packet_universe(packets)).collect();
            let s = StateMatrix::new(rows, packets);
            if s.covered() {
                break s;
            }
        };
        let mut loss = vec![0.0; players * players];
        for v in loss.iter_mut() {
            *v = rng.random::<f64>() * 0.5 + 0.05;
        }
        let erasure = ErasureMatrix::new(players, loss).unwrap();
        let delay: Vec<u32> = (0..players).map(|_| rng.random_range(0..5)).collect();
        let wants0: Vec<u32> =
            (0..players).map(|i| state.wants_size(i) + rng.random_range(0..3)).collect();
        History::build(
            metric,
            state,
            delay,
            wants0,
            erasure,
            CollisionHistory::new(2),
            SelectionPolicy::EXACT,
        )
    }

    #[test]
    fn regularized_games_relate_to_plain_by_their_extra_terms() {
        let mut rng = substream(21, &[0]);
        for _ in 0..200 {
            for metric in DelayMetric::ALL {
                let h = random_history(metric, &mut rng);
                let m = h.players() as f64;
                let profile = rng.random::<u64>() & crate::model::player_universe(h.players());
                let plain = GameKind { metric, regularized: false };
                let reg = GameKind { metric, regularized: true };
                let delta = delay_delta(profile, &h, UtilityMode::Expected);
                let extra = profile.count_ones() as f64
                    + if metric != DelayMetric::SumDelay {
                        delta.iter().sum::<f64>() / m
                    } else {
                        0.0
                    };
                let lhs = utility(reg, profile, &h, UtilityMode::Expected);
                let rhs = utility(plain, profile, &h, UtilityMode::Expected) - extra;
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn collision_and_silence_differ_by_the_transmitter_count() {
        // Both charge every wanting player, so the delay deltas coincide and
        // the regularized-game gap is exactly the ℓ1 term.
        let mut rng = substream(22, &[0]);
        for _ in 0..100 {
            for metric in DelayMetric::ALL {
                let h = random_history(metric, &mut rng);
                if h.players() < 2 {
                    continue;
                }
                let collision = 0b11u64;
                let reg = GameKind { metric, regularized: true };
                let u_col = utility(reg, collision, &h, UtilityMode::Expected);
                let u_silent = utility(reg, 0, &h, UtilityMode::Expected);
                assert!((u_silent - u_col - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn utility_is_common_to_all_players() {
        // The exact-potential identity: the game is its own coordination
        // game, so a unilateral deviation changes every player's utility by
        // the same amount.
        let mut rng = substream(23, &[0]);
        for _ in 0..200 {
            for kind in GameKind::ALL {
                let h = random_history(kind.metric, &mut rng);
                let universe = crate::model::player_universe(h.players());
                let a = rng.random::<u64>() & universe;
                let i = rng.random_range(0..h.players());
                let b = a ^ (1 << i);
                let diff = utility(kind, a, &h, UtilityMode::Expected)
                    - utility(kind, b, &h, UtilityMode::Expected);
                for _observer in 0..h.players() {
                    let again = utility(kind, a, &h, UtilityMode::Expected)
                        - utility(kind, b, &h, UtilityMode::Expected);
                    assert!((diff - again).abs() < 1e-12);
                }
            }
        }
    }
}
