//! Fixed-length feature encodings of observations, states, and actions.
//!
//! All learners in this crate are linear in these features, so the layout is
//! part of the model definition and is documented per block:
//!
//! * observation features (`3·U + A_s + 1` entries):
//!   1. bag of user-query template counts over the history (U),
//!   2. bag of agent-response template counts over the history (U),
//!   3. one-hot of the current query's template (U),
//!   4. one-hot of the most recent agent strategy, all zero on turn 1 (A_s),
//!   5. the raw 1-based turn number (1).
//! * state features: observation features ⊕ belief posterior (B entries);
//!   the belief block is zeroed when belief conditioning is ablated.
//! * action features (`A_s + A_s·A_r` entries): strategy one-hot ⊕ response
//!   template one-hot.

use crate::types::{Action, Observation, Spaces, Speaker, State};

/// Length of [`observation_features`] vectors for these spaces.
pub fn observation_feature_len(spaces: &Spaces) -> usize {
    3 * spaces.n_templates() + spaces.n_strategies() + 1
}

/// Length of [`state_features`] vectors for these spaces.
pub fn state_feature_len(spaces: &Spaces) -> usize {
    observation_feature_len(spaces) + spaces.n_beliefs()
}

/// Length of [`action_features`] vectors for these spaces.
pub fn action_feature_len(spaces: &Spaces) -> usize {
    spaces.n_strategies() + spaces.n_actions()
}

/// Encode an observation (see the module doc for the block layout).
pub fn observation_features(spaces: &Spaces, observation: &Observation) -> Vec<f64> {
    let u = spaces.n_templates();
    let mut out = vec![0.0; observation_feature_len(spaces)];
    for entry in &observation.history {
        let offset = match entry.speaker {
            Speaker::User => 0,
            Speaker::Agent => u,
        };
        out[offset + entry.utterance.template_id] += 1.0;
    }
    out[2 * u + observation.current_query.template_id] = 1.0;
    if let Some(strategy) = observation.last_agent_strategy(spaces) {
        out[3 * u + strategy] = 1.0;
    }
    out[3 * u + spaces.n_strategies()] = observation.turn_number() as f64;
    out
}

/// Encode a state: observation features followed by the belief posterior.
/// With `use_belief = false` the belief block stays zero, keeping the length
/// (and any linear weights over it) unchanged.
pub fn state_features(spaces: &Spaces, state: &State, use_belief: bool) -> Vec<f64> {
    let mut out = observation_features(spaces, &state.observation);
    if use_belief {
        out.extend_from_slice(state.belief.probs());
    } else {
        out.resize(state_feature_len(spaces), 0.0);
    }
    out
}

/// Encode an action: strategy one-hot followed by a one-hot over the agent
/// response templates.
pub fn action_features(spaces: &Spaces, action: &Action) -> Vec<f64> {
    let mut out = vec![0.0; action_feature_len(spaces)];
    out[action.strategy] = 1.0;
    out[spaces.n_strategies() + action.flat_index(spaces)] = 1.0;
    out
}
