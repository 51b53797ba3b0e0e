//! Stage dynamics and full recovery episodes.
//!
//! Best response solves the sequential stage game with common payoffs by
//! lookahead, which for these games reduces to picking the cheapest action
//! among silence and the single-transmitter profiles; ties resolve toward
//! silence and then to the lexicographically smallest profile, matching the
//! Pareto-optimal NE tie-break. Bush–Mosteller reinforcement learning keeps
//! a transmit probability per player, reinforces the taken action by a
//! normalized stimulus, and respects the collision back-off.

use crate::coding::{expected_sum_delay, pmp_combination, SelectionPolicy, StageSnapshot};
use crate::games::{
    collision_indicator, realized_stage_payoff, stage_cost, CollisionHistory, GameKind, History,
    UtilityMode,
};
use crate::lossy::{
    estimated_payoff, update_local_feedback, AckObservation, EstimationView, LocalFeedback,
};
use crate::model::{
    initial_phase_seeded, sample_channel_state, targeted_set, update_cumulative_delay,
    wants_indicator, ChannelState, DelayMetric, GameConfig, PacketMask, PlayerMask, StateMatrix,
};
use crate::rng::{stage_stream, Purpose};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LearnError {
    #[error("stimulus {0} outside [-1, 1]")]
    StimulusOutOfRange(f64),
    #[error("learning rate {0} outside (0, 1)")]
    RateOutOfRange(f64),
}

/// The five experiment schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// Base station recovers everything, full knowledge.
    OptPmp,
    /// Cooperative best response with complete information.
    OptCde,
    /// Low-complexity cooperative reinforcement learning.
    LcCde,
    /// Base station recovery under lossy acknowledgements.
    LsPmp,
    /// Cooperative reinforcement learning under lossy acknowledgements.
    LsCde,
}

impl Scheme {
    pub const ALL: [Scheme; 5] =
        [Scheme::OptPmp, Scheme::OptCde, Scheme::LcCde, Scheme::LsPmp, Scheme::LsCde];

    pub fn label(&self) -> &'static str {
        match self {
            Scheme::OptPmp => "OPT-PMP",
            Scheme::OptCde => "OPT-CDE",
            Scheme::LcCde => "LC-CDE",
            Scheme::LsPmp => "LS-PMP",
            Scheme::LsCde => "LS-CDE",
        }
    }

    pub fn parse(s: &str) -> Option<Scheme> {
        Scheme::ALL.iter().copied().find(|x| x.label().eq_ignore_ascii_case(s))
    }
}

/// Tie handling for the best-response stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TieBreak {
    /// Silence wins ties (the PONE's lexicographic rule). Default for
    /// analysis.
    Silence,
    /// Among cost-minimal actions, prefer the one that serves most (lowest
    /// expected sum-delay increment). Episodes use this: under the
    /// max-delay metric whole cost plateaus are common and pure silence
    /// ties would stall the frame.
    Progress,
}

/// Best response of the sequential stage game: the action profile a
/// farsighted in-order pass lands on, which for a common-payoff game is the
/// utility-maximizing profile among silence and the solos of players that
/// are not backed off.
pub fn best_response_stage(kind: GameKind, h: &History, tie: TieBreak) -> PlayerMask {
    let backoff = h.collisions.backoff();
    let cost = |profile: PlayerMask| {
        -crate::games::utility(kind, profile, h, UtilityMode::Expected)
    };
    // Progress keys, coarse to fine: unrelieved critical players (the
    // max-delay cost plateaus across whole action sets; chipping at the
    // critical set still ranks the choices), then the expected sum-delay
    // increment.
    let critical = crate::model::critical_players(
        kind.metric,
        &h.state,
        &h.delay,
        &h.initial_wants,
        &h.erasure,
    );
    let unrelieved = |profile: PlayerMask| -> f64 {
        if profile.count_ones() == 1 {
            let j = profile.trailing_zeros() as usize;
            (critical & !crate::model::targeted_set(h.combinations[j], &h.state)).count_ones()
                as f64
        } else {
            critical.count_ones() as f64
        }
    };
    let served = |profile: PlayerMask| -> f64 {
        if profile == 0 {
            wants_indicator(&h.state).count_ones() as f64
        } else {
            let j = profile.trailing_zeros() as usize;
            expected_sum_delay(j, h.combinations[j], &h.snapshot())
        }
    };
    let eps = crate::equilibrium::EPS;
    let mut best: PlayerMask = 0;
    let mut best_key = (cost(0), unrelieved(0), served(0));
    for j in (0..h.players()).rev() {
        if backoff >> j & 1 == 1 {
            continue;
        }
        let a = 1u64 << j;
        let key = (cost(a), unrelieved(a), served(a));
        let better = if key.0 < best_key.0 - eps {
            true
        } else if key.0 < best_key.0 + eps {
            match tie {
                TieBreak::Silence => false, // silence and lower indexes keep the tie
                TieBreak::Progress => {
                    key.1 < best_key.1 - eps
                        || (key.1 < best_key.1 + eps && key.2 < best_key.2 - eps)
                }
            }
        } else {
            false
        };
        if better {
            best = a;
            best_key = key;
        }
    }
    best
}

/// A player's learning state at one stage: its current transmit
/// probability, the Has-ratio learning rate, and the satisfaction level.
#[derive(Debug, Clone)]
pub struct MixedAction {
    pub transmit_prob: f64,
    pub learning_rate: f64,
    pub satisfaction: f64,
}

impl MixedAction {
    /// Assembles the stage view for `player`: λ = |H|/N (clamped into the
    /// open unit interval), satisfaction −||M^w||ₗ₁ + ε.
    pub fn for_player(
        state: &StateMatrix,
        player: usize,
        transmit_prob: f64,
        packets: usize,
        epsilon: f64,
    ) -> Self {
        Self {
            transmit_prob,
            learning_rate: learning_rate(state.has(player).count_ones(), packets),
            satisfaction: -(wants_indicator(state).count_ones() as f64) + epsilon,
        }
    }
}

/// Bush–Mosteller update of the taken action's probability:
/// p′ = p + λ·s̄·(1−p) for satisfying stimuli, p′ = p + λ·s̄·p otherwise.
/// Stays in [0,1] analytically.
pub fn bm_update(prob_taken: f64, rate: f64, stimulus: f64) -> Result<f64, LearnError> {
    if !(-1.0..=1.0).contains(&stimulus) {
        return Err(LearnError::StimulusOutOfRange(stimulus));
    }
    if !(rate > 0.0 && rate < 1.0) {
        return Err(LearnError::RateOutOfRange(rate));
    }
    Ok(if stimulus >= 0.0 {
        prob_taken + rate * stimulus * (1.0 - prob_taken)
    } else {
        prob_taken + rate * stimulus * prob_taken
    })
}

/// Normalized stimulus (payoff − satisfaction) / bound, zero when the bound
/// degenerates (nothing to learn from). The bound is the maximum of
/// |payoff − satisfaction| over the player's actions, so the quotient lies
/// in [−1, 1]; the clamp only absorbs float dust.
pub fn stimulus(payoff: f64, satisfaction: f64, bound: f64) -> f64 {
    if bound <= 1e-12 {
        0.0
    } else {
        ((payoff - satisfaction) / bound).clamp(-1.0, 1.0)
    }
}

/// Draws the stage profile: backed-off players are forced silent, everyone
/// else transmits independently with its current probability.
pub fn rl_stage(
    transmit_probs: &[f64],
    backoff: PlayerMask,
    rng: &mut ChaCha8Rng,
) -> PlayerMask {
    let mut profile = 0u64;
    for (i, &x) in transmit_probs.iter().enumerate() {
        if backoff >> i & 1 == 1 {
            continue;
        }
        if rng.random::<f64>() < x {
            profile |= 1 << i;
        }
    }
    profile
}

/// How acknowledgement losses are drawn for the LS schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeedbackRegime {
    /// Reciprocal channel: the ACK from i to observer k is erased with the
    /// data-link loss from i to k (players) or the base-station loss (BS).
    Reciprocal,
    /// Fixed ACK loss probability on every feedback link.
    Override(f64),
    /// Oracle views: every observer sees the true state (the
    /// perfect-feedback counterpart of an LS scheme).
    Oracle,
}

#[derive(Debug, Clone)]
pub struct EpisodeOptions {
    pub tie_break: TieBreak,
    pub feedback: FeedbackRegime,
    /// Start from this state instead of running the broadcast phase.
    pub initial_state: Option<StateMatrix>,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        Self {
            tie_break: TieBreak::Progress,
            feedback: FeedbackRegime::Reciprocal,
            initial_state: None,
        }
    }
}

/// One stage of a recorded episode.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage: u32,
    /// Transmitting players (empty for the PMP schemes: the base station is
    /// the implicit unique transmitter).
    pub profile: PlayerMask,
    pub collision: PlayerMask,
    /// Cumulative delays after the stage.
    pub delay: Vec<u32>,
    /// Realized plain-game utility after the stage.
    pub utility: f64,
    /// Total uncertain entries across observer views (LS schemes).
    pub uncertain: u32,
}

/// Replayable record of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub scheme: Scheme,
    pub metric: DelayMetric,
    pub episode: u64,
    pub players: usize,
    pub packets: usize,
    pub stages: Vec<StageRecord>,
    pub completed: bool,
    /// First stage at which every Wants set emptied; None when the frame
    /// was already complete after the broadcast phase or the cutoff hit.
    pub completion_stage: Option<u32>,
    /// Stage at which each player's Wants set emptied (0 = already complete
    /// after the broadcast phase; None = cutoff reached first).
    pub per_player_completion: Vec<Option<u32>>,
    pub collisions_total: u64,
}

impl EpisodeTrace {
    pub fn final_delay(&self) -> Vec<u32> {
        self.stages.last().map(|s| s.delay.clone()).unwrap_or_else(|| vec![0; self.players])
    }

    pub fn sum_delay(&self) -> u64 {
        self.final_delay().iter().map(|&d| d as u64).sum()
    }

    pub fn max_delay(&self) -> u32 {
        self.final_delay().into_iter().max().unwrap_or(0)
    }

    /// Stages to frame completion; 0 when the broadcast phase finished the
    /// frame, the cutoff count when the episode was cut off.
    pub fn completion_time(&self) -> u32 {
        self.completion_stage.unwrap_or(if self.completed { 0 } else { self.stages.len() as u32 })
    }

    /// Line-oriented serialization; byte-stable for a fixed build.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "scheme {} metric {:?} episode {} players {} packets {}\n",
            self.scheme.label(),
            self.metric,
            self.episode,
            self.players,
            self.packets
        ));
        for s in &self.stages {
            let delay: Vec<String> = s.delay.iter().map(u32::to_string).collect();
            out.push_str(&format!(
                "stage {} profile {:0width$b} collision {:0width$b} delay {} utility {} uncertain {}\n",
                s.stage,
                s.profile,
                s.collision,
                delay.join(";"),
                s.utility,
                s.uncertain,
                width = self.players
            ));
        }
        out.push_str(&format!(
            "completed {} completion {:?} collisions {}\n",
            self.completed, self.completion_stage, self.collisions_total
        ));
        out
    }
}

fn plain_utility(metric: DelayMetric, delay: &[u32], wants0: &[u32], config: &GameConfig) -> f64 {
    let delay_f: Vec<f64> = delay.iter().map(|&d| d as f64).collect();
    let zeros = vec![0.0; delay.len()];
    -stage_cost(
        GameKind { metric, regularized: false },
        &delay_f,
        &zeros,
        wants0,
        &config.erasure,
        0,
        false,
    )
}

/// Applies a unique transmission to the true state: targeted players that
/// received decode their packet. Returns the set of players that
/// acknowledged (targeted and delivered).
fn apply_reception(
    state: &mut StateMatrix,
    kappa: PacketMask,
    delivered: PlayerMask,
) -> PlayerMask {
    let targeted = targeted_set(kappa, state);
    let served = targeted & delivered;
    let mut acked = 0u64;
    for i in 0..state.players() {
        if served >> i & 1 == 1 {
            let packet = (kappa & state.wants(i)).trailing_zeros() as usize;
            state.decode(i, packet);
            acked |= 1 << i;
        }
    }
    acked
}

struct EpisodeState {
    state: StateMatrix,
    wants0: Vec<u32>,
    delay: Vec<u32>,
    window: CollisionHistory,
    trace: EpisodeTrace,
}

impl EpisodeState {
    fn record_stage(
        &mut self,
        config: &GameConfig,
        stage: u32,
        profile: PlayerMask,
        uncertain: u32,
    ) {
        let collision = collision_indicator(profile);
        self.trace.collisions_total += collision.count_ones() as u64;
        self.window.push(collision);
        let utility =
            plain_utility(self.trace.metric, &self.delay, &self.wants0, config);
        self.trace.stages.push(StageRecord {
            stage,
            profile,
            collision,
            delay: self.delay.clone(),
            utility,
            uncertain,
        });
        for i in 0..self.state.players() {
            if self.state.wants(i) == 0 && self.trace.per_player_completion[i].is_none() {
                self.trace.per_player_completion[i] = Some(stage);
            }
        }
        if self.state.is_complete() {
            self.trace.completed = true;
            self.trace.completion_stage = Some(stage);
        }
    }
}

/// Runs one full recovery episode of `scheme` under the experiment metric.
pub fn run_episode(
    scheme: Scheme,
    metric: DelayMetric,
    config: &GameConfig,
    episode: u64,
) -> EpisodeTrace {
    run_episode_with(scheme, metric, config, episode, EpisodeOptions::default())
}

pub fn run_episode_with(
    scheme: Scheme,
    metric: DelayMetric,
    config: &GameConfig,
    episode: u64,
    options: EpisodeOptions,
) -> EpisodeTrace {
    debug_assert!(config.validate().is_ok());
    let m = config.players;
    let state = match options.initial_state.clone() {
        Some(s) => s,
        None => initial_phase_seeded(config, episode).state,
    };
    let wants0 = state.wants_sizes();
    let mut ep = EpisodeState {
        wants0: wants0.clone(),
        delay: vec![0; m],
        window: CollisionHistory::new(config.backoff_window),
        trace: EpisodeTrace {
            scheme,
            metric,
            episode,
            players: m,
            packets: config.packets,
            stages: Vec::new(),
            completed: false,
            completion_stage: None,
            per_player_completion: (0..m)
                .map(|i| if state.wants(i) == 0 { Some(0) } else { None })
                .collect(),
            collisions_total: 0,
        },
        state,
    };
    if ep.state.is_complete() {
        ep.trace.completed = true;
        return ep.trace;
    }
    match scheme {
        Scheme::OptPmp => run_pmp(config, metric, episode, &mut ep, None),
        Scheme::LsPmp => run_pmp(config, metric, episode, &mut ep, Some(options.feedback)),
        Scheme::OptCde => run_best_response(config, metric, episode, &mut ep, options.tie_break),
        Scheme::LcCde => run_rl(config, metric, episode, &mut ep),
        Scheme::LsCde => run_lossy_rl(config, metric, episode, &mut ep, options.feedback),
    }
    ep.trace
}

fn bs_policy() -> SelectionPolicy {
    SelectionPolicy::BUDGETED
}

fn run_pmp(
    config: &GameConfig,
    metric: DelayMetric,
    episode: u64,
    ep: &mut EpisodeState,
    lossy: Option<FeedbackRegime>,
) {
    let m = config.players;
    let mut bs_view = LocalFeedback::from_truth(&ep.state);
    let mut bs_delay_estimate = vec![0.0f64; m];
    for t in 1..=config.max_stages as u32 {
        let kappa = match lossy {
            None => {
                let snap = StageSnapshot {
                    state: &ep.state,
                    delay: &ep.delay,
                    initial_wants: &ep.wants0,
                    erasure: &config.erasure,
                };
                pmp_combination(&snap, metric, &config.bs_erasure, bs_policy())
            }
            Some(_) => lossy_view_combination(
                &bs_view,
                crate::model::packet_universe(config.packets),
                None,
                &config.bs_erasure,
                metric,
                &bs_delay_estimate,
                &ep.wants0,
                config,
            ),
        };
        let mut channel_rng = stage_stream(config.seed, episode, t as u64, Purpose::Channel);
        let mut delivered = 0u64;
        for i in 0..m {
            if channel_rng.random::<f64>() >= config.bs_erasure[i] {
                delivered |= 1 << i;
            }
        }
        let hits = crate::model::delay_increment(delivered, kappa, &ep.state);
        for i in 0..m {
            ep.delay[i] += (hits >> i & 1) as u32;
        }
        let acked = apply_reception(&mut ep.state, kappa, delivered);
        if let Some(regime) = lossy {
            match regime {
                FeedbackRegime::Oracle => {
                    bs_view = LocalFeedback::from_truth(&ep.state);
                }
                _ => {
                    let mut fb_rng =
                        stage_stream(config.seed, episode, t as u64, Purpose::Feedback);
                    let mut heard = 0u64;
                    for i in 0..m {
                        let loss = match regime {
                            FeedbackRegime::Override(p) => p,
                            _ => config.bs_erasure[i],
                        };
                        if acked >> i & 1 == 1 && fb_rng.random::<f64>() >= loss {
                            heard |= 1 << i;
                        }
                    }
                    let feedback_loss: Vec<f64> = (0..m)
                        .map(|i| match regime {
                            FeedbackRegime::Override(p) => p,
                            _ => config.bs_erasure[i],
                        })
                        .collect();
                    let obs = AckObservation {
                        heard,
                        forward_loss: config.bs_erasure.clone(),
                        feedback_loss,
                    };
                    update_local_feedback(&mut bs_view, None, kappa, None, &obs);
                }
            }
            // BS delay estimate via expected increments under its view.
            for i in 0..m {
                let wanting = bs_view.wanting_prob(i);
                let targeted = bs_view.targeted_prob(i, kappa);
                bs_delay_estimate[i] +=
                    (1.0 - config.bs_erasure[i]) * (wanting - targeted).max(0.0);
            }
        }
        let uncertain = if lossy.is_some() { bs_view.uncertain_count() as u32 } else { 0 };
        ep.record_stage(config, t, 0, uncertain);
        if ep.trace.completed {
            break;
        }
    }
}

fn run_best_response(
    config: &GameConfig,
    metric: DelayMetric,
    episode: u64,
    ep: &mut EpisodeState,
    tie: TieBreak,
) {
    let kind = GameKind { metric, regularized: false };
    for t in 1..=config.max_stages as u32 {
        let h = History::build(
            metric,
            ep.state.clone(),
            ep.delay.clone(),
            ep.wants0.clone(),
            config.erasure.clone(),
            ep.window.clone(),
            SelectionPolicy::BUDGETED,
        );
        let profile = best_response_stage(kind, &h, tie);
        let mut channel_rng = stage_stream(config.seed, episode, t as u64, Purpose::Channel);
        let channel = sample_channel_state(&config.erasure, &mut channel_rng);
        step_true_state(ep, &h, profile, &channel);
        ep.record_stage(config, t, profile, 0);
        if ep.trace.completed {
            break;
        }
    }
}

/// Applies profile + channel to the true delays and state.
fn step_true_state(
    ep: &mut EpisodeState,
    h: &History,
    profile: PlayerMask,
    channel: &ChannelState,
) {
    let kappa = if profile.count_ones() == 1 {
        h.combinations[profile.trailing_zeros() as usize]
    } else {
        0
    };
    ep.delay = update_cumulative_delay(&ep.delay, profile, kappa, channel, &ep.state);
    if profile.count_ones() == 1 {
        let sender = profile.trailing_zeros() as usize;
        apply_reception(&mut ep.state, kappa, channel.delivered(sender));
    }
}

fn learning_rate(has: u32, packets: usize) -> f64 {
    (has as f64 / packets as f64).clamp(0.05, 0.95)
}

/// Initial transmit probability |H_i|/N, capped strictly below 1: an exact
/// 1.0 is an absorbing point of the indicator-form update (the (1−x) factor
/// vanishes), and two players stuck at 1.0 collide forever.
fn initial_transmit_prob(state: &StateMatrix, player: usize, config: &GameConfig) -> f64 {
    (state.has(player).count_ones() as f64 / config.packets as f64).min(0.95)
}

fn run_rl(config: &GameConfig, metric: DelayMetric, episode: u64, ep: &mut EpisodeState) {
    let m = config.players;
    let mut x: Vec<f64> = (0..m).map(|i| initial_transmit_prob(&ep.state, i, config)).collect();
    for t in 1..=config.max_stages as u32 {
        let h = History::build(
            metric,
            ep.state.clone(),
            ep.delay.clone(),
            ep.wants0.clone(),
            config.erasure.clone(),
            ep.window.clone(),
            SelectionPolicy::BUDGETED,
        );
        let backoff = ep.window.backoff();
        let mut action_rng = stage_stream(config.seed, episode, t as u64, Purpose::Actions);
        let profile = rl_stage(&x, backoff, &mut action_rng);
        let mut channel_rng = stage_stream(config.seed, episode, t as u64, Purpose::Channel);
        let channel = sample_channel_state(&config.erasure, &mut channel_rng);

        // Perceived payoff and two-point stimulus per free player, others
        // fixed at their realized actions.
        let payoff_taken = realized_stage_payoff(metric, profile, &h, &channel);
        for i in 0..m {
            if backoff >> i & 1 == 1 {
                continue;
            }
            let ma = MixedAction::for_player(&ep.state, i, x[i], config.packets, config.epsilon);
            let flipped = profile ^ (1 << i);
            let payoff_flip = realized_stage_payoff(metric, flipped, &h, &channel);
            let bound = (payoff_taken - ma.satisfaction)
                .abs()
                .max((payoff_flip - ma.satisfaction).abs());
            let s = stimulus(payoff_taken, ma.satisfaction, bound);
            let acted_transmit = profile >> i & 1 == 1;
            if acted_transmit {
                x[i] = bm_update(ma.transmit_prob, ma.learning_rate, s).expect("stimulus normalized");
            } else {
                let p_silent = bm_update(1.0 - ma.transmit_prob, ma.learning_rate, s)
                    .expect("stimulus normalized");
                x[i] = 1.0 - p_silent;
            }
        }
        step_true_state(ep, &h, profile, &channel);
        ep.record_stage(config, t, profile, 0);
        if ep.trace.completed {
            break;
        }
    }
}

/// Runs the Bush–Mosteller dynamic on a frozen stage game: the state and
/// delays never advance, so the learned profile sequence can be checked
/// against the stage game's NE set (the convergence statement is about a
/// fixed repeated game). Channel draws, stimuli, and back-off work exactly
/// as in an episode stage.
pub fn run_repeated_stage_game(
    metric: DelayMetric,
    h: &History,
    epsilon: f64,
    packets: usize,
    stages: u32,
    seed: u64,
) -> Vec<PlayerMask> {
    let m = h.players();
    let mut x: Vec<f64> = (0..m)
        .map(|i| (h.state.has(i).count_ones() as f64 / packets as f64).min(0.95))
        .collect();
    let mut window = h.collisions.clone();
    let mut profiles = Vec::with_capacity(stages as usize);
    let wanting = wants_indicator(&h.state).count_ones() as f64;
    let satisfaction = -wanting + epsilon;
    for t in 1..=stages {
        let backoff = window.backoff();
        let mut action_rng = stage_stream(seed, 0, t as u64, Purpose::Actions);
        let profile = rl_stage(&x, backoff, &mut action_rng);
        let mut channel_rng = stage_stream(seed, 0, t as u64, Purpose::Channel);
        let channel = sample_channel_state(&h.erasure, &mut channel_rng);
        let payoff_taken = realized_stage_payoff(metric, profile, h, &channel);
        for i in 0..m {
            if backoff >> i & 1 == 1 {
                continue;
            }
            let flipped = profile ^ (1 << i);
            let payoff_flip = realized_stage_payoff(metric, flipped, h, &channel);
            let bound =
                (payoff_taken - satisfaction).abs().max((payoff_flip - satisfaction).abs());
            let s = stimulus(payoff_taken, satisfaction, bound);
            let rate = learning_rate(h.state.has(i).count_ones(), packets);
            if profile >> i & 1 == 1 {
                x[i] = bm_update(x[i], rate, s).expect("stimulus normalized");
            } else {
                let p_silent = bm_update(1.0 - x[i], rate, s).expect("stimulus normalized");
                x[i] = 1.0 - p_silent;
            }
        }
        window.push(collision_indicator(profile));
        profiles.push(profile);
    }
    profiles
}

/// Greedy combination over an observer's (possibly uncertain) view:
/// vertices are wants-side (player, packet) pairs the sender holds, scored
/// by metric priority, then want-probability times delivery probability.
#[allow(clippy::too_many_arguments)]
fn lossy_view_combination(
    view: &LocalFeedback,
    sender_has: PacketMask,
    sender: Option<usize>,
    delivery_loss: &[f64],
    metric: DelayMetric,
    delay_estimate: &[f64],
    initial_wants: &[u32],
    config: &GameConfig,
) -> PacketMask {
    let m = view.players();
    // Estimated critical set per metric over the observer's delay estimate.
    let critical: PlayerMask = match metric {
        DelayMetric::SumDelay => 0,
        DelayMetric::MaxDelay => {
            let max = delay_estimate.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (0..m)
                .filter(|&i| delay_estimate[i] > max - 1e-9 && view.apparent_wants(i) != 0)
                .fold(0u64, |acc, i| acc | (1 << i))
        }
        DelayMetric::CompletionTime => {
            let est: Vec<f64> = (0..m)
                .map(|i| {
                    let p = config.erasure.row_average(i);
                    (initial_wants[i] as f64 + delay_estimate[i] - p) / (1.0 - p)
                })
                .collect();
            let max = est.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (0..m)
                .filter(|&i| {
                    view.apparent_wants(i) != 0
                        && est[i] + 1.0 / (1.0 - config.erasure.row_average(i)) > max
                })
                .fold(0u64, |acc, i| acc | (1 << i))
        }
    };
    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..m {
        if Some(i) == sender {
            continue;
        }
        let mut wanted = view.apparent_wants(i) & sender_has;
        while wanted != 0 {
            let j = wanted.trailing_zeros() as usize;
            wanted &= wanted - 1;
            let weight = view.entry(i, j).want_prob() * (1.0 - delivery_loss[i]);
            candidates.push((i, j, weight));
        }
    }
    let compatible = |a: (usize, usize), b: (usize, usize)| {
        a.1 == b.1
            || (view.apparent_has(b.0) >> a.1 & 1 == 1 && view.apparent_has(a.0) >> b.1 & 1 == 1)
    };
    let mut clique: Vec<(usize, usize)> = Vec::new();
    let mut kappa = 0u64;
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for &(i, j, w) in &candidates {
            let key = ((critical >> i & 1) as u8, w);
            let better = match best {
                None => true,
                Some((bi, bj, bw)) => {
                    let bkey = ((critical >> bi & 1) as u8, bw);
                    key.0 > bkey.0
                        || (key.0 == bkey.0 && key.1 > bkey.1)
                        || (key.0 == bkey.0 && key.1 == bkey.1 && (i, j) < (bi, bj))
                }
            };
            if better {
                best = Some((i, j, w));
            }
        }
        let Some((i, j, _)) = best else { break };
        clique.push((i, j));
        kappa |= 1u64 << j;
        candidates.retain(|&(ci, cj, _)| {
            (ci, cj) != (i, j) && clique.iter().all(|&mbr| compatible((ci, cj), mbr))
        });
    }
    kappa
}

fn run_lossy_rl(
    config: &GameConfig,
    metric: DelayMetric,
    episode: u64,
    ep: &mut EpisodeState,
    regime: FeedbackRegime,
) {
    let m = config.players;
    let kind = GameKind { metric, regularized: false };
    let mut x: Vec<f64> = (0..m).map(|i| initial_transmit_prob(&ep.state, i, config)).collect();
    let mut views: Vec<LocalFeedback> =
        (0..m).map(|_| LocalFeedback::from_truth(&ep.state)).collect();
    let mut delay_estimates: Vec<Vec<f64>> = vec![vec![0.0; m]; m];
    for t in 1..=config.max_stages as u32 {
        let backoff = ep.window.backoff();
        // Each player picks its own combination from its own view.
        let combos: Vec<PacketMask> = (0..m)
            .map(|k| {
                let delivery: Vec<f64> = (0..m).map(|i| config.erasure.loss(i, k)).collect();
                lossy_view_combination(
                    &views[k],
                    ep.state.has(k),
                    Some(k),
                    &delivery,
                    metric,
                    &delay_estimates[k],
                    &ep.wants0,
                    config,
                )
            })
            .collect();
        let mut action_rng = stage_stream(config.seed, episode, t as u64, Purpose::Actions);
        let profile = rl_stage(&x, backoff, &mut action_rng);
        let mut channel_rng = stage_stream(config.seed, episode, t as u64, Purpose::Channel);
        let channel = sample_channel_state(&config.erasure, &mut channel_rng);
        let sender = if profile.count_ones() == 1 {
            Some(profile.trailing_zeros() as usize)
        } else {
            None
        };
        let kappa = sender.map(|s| combos[s]).unwrap_or(0);

        // Estimated stimulus per free player from its pre-stage view.
        for k in 0..m {
            if backoff >> k & 1 == 1 {
                continue;
            }
            let est = EstimationView {
                view: &views[k],
                delay_estimate: &delay_estimates[k],
                initial_wants: &ep.wants0,
                erasure: &config.erasure,
            };
            // Stage payoffs are increments over the pre-stage baseline cost.
            let zeros = vec![0.0; m];
            let base = stage_cost(
                kind,
                &delay_estimates[k],
                &zeros,
                &ep.wants0,
                &config.erasure,
                0,
                true,
            );
            // A counterfactual unique sender is always either k itself or a
            // player that actually transmitted, so its combination header
            // is known to k.
            let payoff_of = |p: PlayerMask| -> f64 {
                let s = if p.count_ones() == 1 {
                    combos[p.trailing_zeros() as usize]
                } else {
                    0
                };
                estimated_payoff(kind, p, s, &est) + base
            };
            // Satisfaction sits ε above the payoff of transmitting nothing
            // useful. Under expected payoffs the absolute-worst baseline is
            // unusable: an empty transmission already beats it by
            // Σ p·P(want) (erasures shield delay), so once p·||M^w|| > ε a
            // junk transmitter would stay satisfied forever. This baseline
            // degenerates to the worst-payoff one as losses vanish.
            let junk = estimated_payoff(kind, 1 << k, 0, &est) + base;
            let satisfaction = junk + config.epsilon;
            let taken = payoff_of(profile);
            let flipped = payoff_of(profile ^ (1 << k));
            let bound = (taken - satisfaction).abs().max((flipped - satisfaction).abs());
            let s = stimulus(taken, satisfaction, bound);
            let rate = learning_rate(ep.state.has(k).count_ones(), config.packets);
            let acted = profile >> k & 1 == 1;
            x[k] = crate::lossy::lossy_rl_update(x[k], rate, s, acted)
                .expect("stimulus normalized, rate clamped");
        }

        // True reception and acknowledgements.
        let delivered = sender.map(|s| channel.delivered(s)).unwrap_or(0);
        let hits = if sender.is_some() {
            crate::model::delay_increment(delivered, kappa, &ep.state)
        } else {
            wants_indicator(&ep.state)
        };
        for i in 0..m {
            ep.delay[i] += (hits >> i & 1) as u32;
        }
        let acked = if sender.is_some() {
            apply_reception(&mut ep.state, kappa, delivered)
        } else {
            0
        };

        // Observer updates.
        match regime {
            FeedbackRegime::Oracle => {
                for k in 0..m {
                    views[k] = LocalFeedback::from_truth(&ep.state);
                }
            }
            _ => {
                if let Some(s) = sender {
                    let mut fb_rng =
                        stage_stream(config.seed, episode, t as u64, Purpose::Feedback);
                    for k in 0..m {
                        let mut heard = 0u64;
                        for i in 0..m {
                            if acked >> i & 1 != 1 {
                                continue;
                            }
                            if i == k {
                                heard |= 1 << i; // own ACK
                                continue;
                            }
                            let loss = match regime {
                                FeedbackRegime::Override(p) => p,
                                _ => config.erasure.loss(k, i),
                            };
                            if fb_rng.random::<f64>() >= loss {
                                heard |= 1 << i;
                            }
                        }
                        let forward_loss: Vec<f64> =
                            (0..m).map(|i| config.erasure.loss(i, s)).collect();
                        let feedback_loss: Vec<f64> = (0..m)
                            .map(|i| match regime {
                                FeedbackRegime::Override(p) => p,
                                _ => config.erasure.loss(k, i),
                            })
                            .collect();
                        let obs = AckObservation { heard, forward_loss, feedback_loss };
                        update_local_feedback(&mut views[k], Some(k), kappa, Some(s), &obs);
                        views[k].sync_own_row(k, &ep.state);
                    }
                } else {
                    for k in 0..m {
                        views[k].sync_own_row(k, &ep.state);
                    }
                }
            }
        }
        // Delay estimates advance by expected increments under each view.
        for k in 0..m {
            for i in 0..m {
                let inc = match sender {
                    Some(s) => {
                        let wanting = views[k].wanting_prob(i);
                        let targeted = views[k].targeted_prob(i, kappa);
                        (1.0 - config.erasure.loss(i, s)) * (wanting - targeted).max(0.0)
                    }
                    None => views[k].wanting_prob(i),
                };
                delay_estimates[k][i] += inc;
            }
        }
        let uncertain: u32 = views.iter().map(|v| v.uncertain_count() as u32).sum();
        ep.record_stage(config, t, profile, uncertain);
        if ep.trace.completed {
            break;
        }
    }
}
