//! Lossy-feedback machinery: per-observer local feedback matrices with
//! uncertain entries, the reception posterior for unheard acknowledgements,
//! payoff estimation over uncertainty assignments, and the modified
//! reinforcement-learning update.
//!
//! Acknowledgements ride the reciprocal channel: the ACK from player i is
//! erased at observer k with the same probability as a data packet from i
//! to k. Combination headers are assumed reliable, so every observer knows
//! who transmitted what; only payloads and ACKs are lost.

use crate::games::{stage_cost, GameKind};
use crate::model::{ErasureMatrix, PacketMask, PlayerMask, StateMatrix};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossyError {
    #[error("stimulus {0} outside [-1, 1]")]
    StimulusOutOfRange(f64),
    #[error("learning rate {0} outside (0, 1)")]
    RateOutOfRange(f64),
}

/// One entry of a local feedback matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Entry {
    /// An ACK for this packet was delivered to the observer (or the
    /// observer's own row says so).
    Has,
    /// Known missing.
    Wants,
    /// Targeted but no ACK heard; `received` is the posterior probability
    /// the packet was in fact delivered.
    Uncertain { received: f64 },
}

impl Entry {
    /// Probability the entry is truly wanted.
    pub fn want_prob(self) -> f64 {
        match self {
            Entry::Has => 0.0,
            Entry::Wants => 1.0,
            Entry::Uncertain { received } => 1.0 - received,
        }
    }

    pub fn is_uncertain(self) -> bool {
        matches!(self, Entry::Uncertain { .. })
    }

    fn wants_side(self) -> bool {
        !matches!(self, Entry::Has)
    }
}

/// An observer's view of the session state. Every entry not marked
/// uncertain agrees with what the observer's ACK log supports: `Has` is
/// written only on a delivered acknowledgement (or the observer's own
/// reception), never guessed.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeedback {
    entries: Vec<Entry>,
    players: usize,
    packets: usize,
}

impl LocalFeedback {
    /// Starts from ground truth: the broadcast-phase ACKs are reliable, so
    /// every observer opens the recovery phase with the true state matrix.
    pub fn from_truth(state: &StateMatrix) -> Self {
        let players = state.players();
        let packets = state.packets();
        let mut entries = vec![Entry::Has; players * packets];
        for i in 0..players {
            for j in 0..packets {
                if state.wants(i) >> j & 1 == 1 {
                    entries[i * packets + j] = Entry::Wants;
                }
            }
        }
        Self { entries, players, packets }
    }

    pub fn players(&self) -> usize {
        self.players
    }

    pub fn packets(&self) -> usize {
        self.packets
    }

    pub fn entry(&self, player: usize, packet: usize) -> Entry {
        self.entries[player * self.packets + packet]
    }

    pub fn set(&mut self, player: usize, packet: usize, e: Entry) {
        self.entries[player * self.packets + packet] = e;
    }

    /// Wants-side support of a row (known wants plus uncertain).
    pub fn apparent_wants(&self, player: usize) -> PacketMask {
        (0..self.packets)
            .filter(|&j| self.entry(player, j).wants_side())
            .fold(0u64, |m, j| m | (1 << j))
    }

    /// Packets the observer is certain the player holds.
    pub fn apparent_has(&self, player: usize) -> PacketMask {
        crate::model::packet_universe(self.packets) & !self.apparent_wants(player)
    }

    pub fn uncertain_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_uncertain()).count()
    }

    /// Expected number of players with a non-empty Wants set under the
    /// entry posteriors.
    pub fn expected_wanting(&self) -> f64 {
        (0..self.players).map(|i| self.wanting_prob(i)).sum()
    }

    pub fn wanting_prob(&self, player: usize) -> f64 {
        let mut none = 1.0;
        for j in 0..self.packets {
            none *= 1.0 - self.entry(player, j).want_prob();
        }
        1.0 - none
    }

    /// Probability the combination is instantly decodable for `player`
    /// (exactly one of its packets is truly wanted).
    pub fn targeted_prob(&self, player: usize, kappa: PacketMask) -> f64 {
        let probs: Vec<f64> = (0..self.packets)
            .filter(|&j| kappa >> j & 1 == 1)
            .map(|j| self.entry(player, j).want_prob())
            .collect();
        let mut exactly_one = 0.0;
        for (k, &p) in probs.iter().enumerate() {
            let mut term = p;
            for (k2, &p2) in probs.iter().enumerate() {
                if k2 != k {
                    term *= 1.0 - p2;
                }
            }
            exactly_one += term;
        }
        exactly_one
    }

    /// Synchronizes the observer's own row with its true state.
    pub fn sync_own_row(&mut self, observer: usize, state: &StateMatrix) {
        for j in 0..self.packets {
            let e = if state.wants(observer) >> j & 1 == 1 { Entry::Wants } else { Entry::Has };
            self.set(observer, j, e);
        }
    }
}

/// Probability a targeted packet WAS received given that no ACK was heard:
/// (1−p_f)·p_b / (p_f + (1−p_f)·p_b). Zero denominator (both links
/// perfect) is the impossible-event convention 0.
pub fn uncertainty_posterior(p_forward: f64, p_feedback: f64) -> f64 {
    let num = (1.0 - p_forward) * p_feedback;
    let den = p_forward + num;
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Bayesian compounding across repeated targetings: given a prior
/// probability `prior` that the player already holds the packet, another
/// round with no ACK heard updates it to
/// P(has | no ACK) = (prior + (1−prior)(1−p_f)p_b) /
///                   (prior + (1−prior)(p_f + (1−p_f)p_b)).
/// A zero prior reduces to [`uncertainty_posterior`]; repeated unheard
/// targetings drive the posterior toward certainty, so stale entries
/// resolve instead of pinning the observer's view forever.
pub fn compounded_posterior(prior: f64, p_forward: f64, p_feedback: f64) -> f64 {
    let ack_lost = (1.0 - p_forward) * p_feedback;
    let no_ack_if_wants = p_forward + ack_lost;
    let num = prior + (1.0 - prior) * ack_lost;
    let den = prior + (1.0 - prior) * no_ack_if_wants;
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// One stage's acknowledgement observations for one observer.
#[derive(Debug, Clone)]
pub struct AckObservation {
    /// Players whose ACK the observer heard this stage.
    pub heard: PlayerMask,
    /// Forward loss toward each player (data link from the sender).
    pub forward_loss: Vec<f64>,
    /// Feedback loss from each player toward the observer.
    pub feedback_loss: Vec<f64>,
}

/// Folds one transmission's acknowledgement outcomes into the observer's
/// view. For each player the observer believes was targeted (exactly one
/// wants-side candidate in κ): a heard ACK certifies the candidate as Has;
/// an unheard ACK downgrades it to Uncertain with the reception posterior.
/// Degenerate posteriors resolve to definite entries: perfect feedback
/// means no-ACK is a definite miss, a perfect forward link a definite
/// reception. Ambiguous rows (two or more candidates) are left unchanged.
pub fn update_local_feedback(
    view: &mut LocalFeedback,
    observer: Option<usize>,
    kappa: PacketMask,
    sender: Option<usize>,
    obs: &AckObservation,
) {
    for i in 0..view.players() {
        if Some(i) == observer || Some(i) == sender {
            continue;
        }
        let candidates = kappa & view.apparent_wants(i);
        if candidates.count_ones() != 1 {
            continue;
        }
        let j = candidates.trailing_zeros() as usize;
        if obs.heard >> i & 1 == 1 {
            view.set(i, j, Entry::Has);
        } else {
            let prior = match view.entry(i, j) {
                Entry::Uncertain { received } => received,
                _ => 0.0,
            };
            let posterior = compounded_posterior(prior, obs.forward_loss[i], obs.feedback_loss[i]);
            let e = if posterior == 0.0 {
                Entry::Wants
            } else if posterior >= 1.0 {
                Entry::Has
            } else {
                Entry::Uncertain { received: posterior }
            };
            view.set(i, j, e);
        }
    }
}

/// Inputs to payoff estimation: the observer's view, its running delay
/// estimate (expected increments; true delays are not observable under
/// lossy feedback), and the frame parameters.
#[derive(Debug, Clone, Copy)]
pub struct EstimationView<'a> {
    pub view: &'a LocalFeedback,
    pub delay_estimate: &'a [f64],
    pub initial_wants: &'a [u32],
    pub erasure: &'a ErasureMatrix,
}

/// Uncertainty assignments beyond this many entries fall back to the
/// per-player marginal approximation.
pub const EXHAUSTIVE_UNCERTAINTY_BOUND: usize = 16;

fn delta_for_assignment(
    est: &EstimationView,
    wants_rows: &[PacketMask],
    profile_transmitters: u32,
    sender: Option<usize>,
    kappa: PacketMask,
) -> Vec<f64> {
    let m = est.view.players();
    let state = StateMatrix::new(wants_rows.to_vec(), est.view.packets());
    let wanting = crate::model::wants_indicator(&state);
    if profile_transmitters == 1 {
        let s = sender.expect("unique transmitter has an index");
        crate::model::expected_delay_increment(s, kappa, &state, est.erasure)
    } else {
        (0..m).map(|i| (wanting >> i & 1) as f64).collect()
    }
}

/// Expected-mode utility estimated from a local view: the exact expectation
/// over the 2^|U| uncertainty assignments weighted by the entry posteriors
/// (per-player marginal approximation above the bound). With no uncertain
/// entries and a true delay estimate this is exactly the expected-mode
/// stage utility.
pub fn estimated_payoff(
    kind: GameKind,
    profile: PlayerMask,
    kappa_of_sender: PacketMask,
    est: &EstimationView,
) -> f64 {
    let view = est.view;
    let m = view.players();
    let transmitters = profile.count_ones();
    let sender = if transmitters == 1 { Some(profile.trailing_zeros() as usize) } else { None };
    let uncertain: Vec<(usize, usize, f64)> = (0..m)
        .flat_map(|i| (0..view.packets()).map(move |j| (i, j)))
        .filter_map(|(i, j)| match view.entry(i, j) {
            Entry::Uncertain { received } => Some((i, j, received)),
            _ => None,
        })
        .collect();
    let base_rows: Vec<PacketMask> = (0..m)
        .map(|i| {
            (0..view.packets())
                .filter(|&j| matches!(view.entry(i, j), Entry::Wants))
                .fold(0u64, |r, j| r | (1 << j))
        })
        .collect();
    if uncertain.len() <= EXHAUSTIVE_UNCERTAINTY_BOUND {
        let mut total = 0.0;
        for assignment in 0u64..(1u64 << uncertain.len()) {
            let mut rows = base_rows.clone();
            let mut weight = 1.0;
            for (bit, &(i, j, received)) in uncertain.iter().enumerate() {
                if assignment >> bit & 1 == 1 {
                    // resolved as still wanted
                    rows[i] |= 1 << j;
                    weight *= 1.0 - received;
                } else {
                    weight *= received;
                }
            }
            let delta = delta_for_assignment(est, &rows, transmitters, sender, kappa_of_sender);
            let cost = stage_cost(
                kind,
                est.delay_estimate,
                &delta,
                est.initial_wants,
                est.erasure,
                transmitters,
                true,
            );
            total += weight * -cost;
        }
        total
    } else {
        // Marginal approximation: per-player wanting/targeted probabilities.
        let delta: Vec<f64> = (0..m)
            .map(|i| {
                let wanting = view.wanting_prob(i);
                match sender {
                    Some(s) => {
                        let targeted = view.targeted_prob(i, kappa_of_sender);
                        (1.0 - est.erasure.loss(i, s)) * (wanting - targeted).max(0.0)
                    }
                    None => wanting,
                }
            })
            .collect();
        -stage_cost(
            kind,
            est.delay_estimate,
            &delta,
            est.initial_wants,
            est.erasure,
            transmitters,
            true,
        )
    }
}

/// Modified reinforcement update for estimated payoffs: the Bush–Mosteller
/// rule driven by the estimated stimulus, expressed on the probability of
/// action s_j with `acted` the indicator that s_j was the taken action.
///
/// For satisfying stimuli this is exactly x′ = x + λ·s̃·(𝟙 − x); the
/// dissatisfied branch scales the taken action's probability down
/// multiplicatively, which keeps x in [0,1] analytically (a literal
/// (𝟙 − x) step for negative stimuli escapes the interval and makes x = 1
/// absorbing).
pub fn lossy_rl_update(x: f64, rate: f64, stimulus: f64, acted: bool) -> Result<f64, LossyError> {
    if !(-1.0..=1.0).contains(&stimulus) {
        return Err(LossyError::StimulusOutOfRange(stimulus));
    }
    if !(rate > 0.0 && rate < 1.0) {
        return Err(LossyError::RateOutOfRange(rate));
    }
    let p_taken = if acted { x } else { 1.0 - x };
    let updated = if stimulus >= 0.0 {
        p_taken + rate * stimulus * (1.0 - p_taken)
    } else {
        p_taken + rate * stimulus * p_taken
    };
    Ok(if acted { updated } else { 1.0 - updated })
}
