//! Preference-trained reward model: a logistic-linear scorer over
//! state-action features fitted to Bradley-Terry pairwise comparisons.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    action_feature_len, action_features, observation_feature_len, state_feature_len,
    state_features,
};
use crate::numeric::{log_sigmoid, sigmoid};
use crate::policy::{self, PolicyParams};
use crate::types::{Action, Spaces, State, Trajectory};

fn default_true() -> bool {
    true
}

/// Parameters of the reward model: one weight per state feature followed by
/// one per action feature, plus a bias. The score is the logistic of the
/// linear form, so it always falls in (0,1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModelParams {
    pub spaces: Spaces,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// When false the belief block of the state features is zeroed before
    /// scoring, severing the reward from latent-state information.
    #[serde(default = "default_true")]
    pub use_belief: bool,
}

impl RewardModelParams {
    pub fn new_zero(spaces: Spaces) -> Self {
        let n = state_feature_len(&spaces) + action_feature_len(&spaces);
        Self { spaces, weights: vec![0.0; n], bias: 0.0, use_belief: true }
    }

    /// Uniform weights in [−scale, scale].
    pub fn random<R: Rng>(spaces: Spaces, scale: f64, rng: &mut R) -> Self {
        let n = state_feature_len(&spaces) + action_feature_len(&spaces);
        let weights = (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect();
        let bias = (rng.random::<f64>() * 2.0 - 1.0) * scale;
        Self { spaces, weights, bias, use_belief: true }
    }

    pub fn validate(&self) -> Result<()> {
        self.spaces.validate()?;
        let want = state_feature_len(&self.spaces) + action_feature_len(&self.spaces);
        if self.weights.len() != want {
            return Err(Error::Validation(format!(
                "reward weights have {} entries, the feature space needs {}",
                self.weights.len(),
                want
            )));
        }
        if !self.weights.iter().all(|w| w.is_finite()) || !self.bias.is_finite() {
            return Err(Error::NonFinite("reward model parameters".into()));
        }
        Ok(())
    }

    fn state_len(&self) -> usize {
        state_feature_len(&self.spaces)
    }

    fn belief_block(&self) -> std::ops::Range<usize> {
        let start = observation_feature_len(&self.spaces);
        start..start + self.spaces.n_beliefs()
    }
}

/// One pairwise comparison: shared context state features plus the action
/// features of the preferred and rejected responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub context: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

impl PreferencePair {
    pub fn new(context: Vec<f64>, positive: Vec<f64>, negative: Vec<f64>) -> Result<Self> {
        if positive == negative {
            return Err(Error::InvalidArgument(
                "preference pair needs distinct positive and negative actions".into(),
            ));
        }
        Ok(Self { context, positive, negative })
    }
}

/// Pre-activation score of one (context, action-features) pair, with the
/// belief block of the context masked out when `use_belief` is off.
fn linear_score(params: &RewardModelParams, context: &[f64], action: &[f64]) -> Result<f64> {
    let s_len = params.state_len();
    let a_len = action_feature_len(&params.spaces);
    if context.len() != s_len || action.len() != a_len {
        return Err(Error::InvalidArgument(format!(
            "feature lengths ({}, {}) do not match the reward model ({s_len}, {a_len})",
            context.len(),
            action.len()
        )));
    }
    let belief = params.belief_block();
    let mut z = params.bias;
    for (i, (&w, &x)) in params.weights[..s_len].iter().zip(context).enumerate() {
        if params.use_belief || !belief.contains(&i) {
            z += w * x;
        }
    }
    for (&w, &y) in params.weights[s_len..].iter().zip(action) {
        z += w * y;
    }
    Ok(z)
}

/// Score ℛ(s, a) ∈ (0,1) of taking `action` in `state`.
pub fn rm_score(params: &RewardModelParams, state: &State, action: &Action) -> Result<f64> {
    let context = state_features(&params.spaces, state, params.use_belief);
    let response = action_features(&params.spaces, action);
    Ok(sigmoid(linear_score(params, &context, &response)?))
}

/// Score margin ℛ(y₊|x) − ℛ(y₋|x) of one pair; always in (−1, 1).
pub fn pair_margin(params: &RewardModelParams, pair: &PreferencePair) -> Result<f64> {
    let plus = sigmoid(linear_score(params, &pair.context, &pair.positive)?);
    let minus = sigmoid(linear_score(params, &pair.context, &pair.negative)?);
    Ok(plus - minus)
}

/// Bradley-Terry loss of a single score margin: −ln σ(margin). Equals ln 2 at
/// zero margin and tends to 0 as the margin grows.
pub fn pair_loss_from_margin(margin: f64) -> f64 {
    -log_sigmoid(margin)
}

/// Mean Bradley-Terry loss over a batch of pairs.
pub fn rm_loss(params: &RewardModelParams, batch: &[PreferencePair]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Precondition("reward-model loss needs a non-empty batch".into()));
    }
    let mut total = 0.0;
    for pair in batch {
        total += pair_loss_from_margin(pair_margin(params, pair)?);
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of [`rm_loss`] with respect to the weights and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct RmGradient {
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Loss and its exact gradient over a batch, sharing one pass per pair.
pub fn rm_loss_gradient(
    params: &RewardModelParams,
    batch: &[PreferencePair],
) -> Result<(f64, RmGradient)> {
    if batch.is_empty() {
        return Err(Error::Precondition("reward-model loss needs a non-empty batch".into()));
    }
    let s_len = params.state_len();
    let belief = params.belief_block();
    let mut grad_w = vec![0.0; params.weights.len()];
    let mut grad_b = 0.0;
    let mut total = 0.0;
    for pair in batch {
        let z_plus = linear_score(params, &pair.context, &pair.positive)?;
        let z_minus = linear_score(params, &pair.context, &pair.negative)?;
        let s_plus = sigmoid(z_plus);
        let s_minus = sigmoid(z_minus);
        let margin = s_plus - s_minus;
        total += pair_loss_from_margin(margin);
        let d_margin = -sigmoid(-margin);
        let d_plus = d_margin * s_plus * (1.0 - s_plus);
        let d_minus = -d_margin * s_minus * (1.0 - s_minus);
        for (i, &x) in pair.context.iter().enumerate() {
            if params.use_belief || !belief.contains(&i) {
                grad_w[i] += (d_plus + d_minus) * x;
            }
        }
        for (j, (&yp, &ym)) in pair.positive.iter().zip(&pair.negative).enumerate() {
            grad_w[s_len + j] += d_plus * yp + d_minus * ym;
        }
        grad_b += d_plus + d_minus;
    }
    let n = batch.len() as f64;
    for g in &mut grad_w {
        *g /= n;
    }
    Ok((total / n, RmGradient { weights: grad_w, bias: grad_b / n }))
}

/// Full-batch gradient-descent schedule for [`train_rm`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRmConfig {
    pub learning_rate: f64,
    pub steps: usize,
}

impl Default for TrainRmConfig {
    fn default() -> Self {
        Self { learning_rate: 1.0, steps: 200 }
    }
}

impl TrainRmConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Validation("learning rate must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Full-batch gradient descent on [`rm_loss`]. Returns the trained parameters
/// and the loss curve: the loss before each step, then a final evaluation.
pub fn train_rm(
    pairs: &[PreferencePair],
    params: &RewardModelParams,
    config: &TrainRmConfig,
) -> Result<(RewardModelParams, Vec<f64>)> {
    params.validate()?;
    config.validate()?;
    let mut current = params.clone();
    let mut curve = Vec::with_capacity(config.steps + 1);
    for _ in 0..config.steps {
        let (loss, grad) = rm_loss_gradient(&current, pairs)?;
        curve.push(loss);
        for (w, g) in current.weights.iter_mut().zip(&grad.weights) {
            *w -= config.learning_rate * g;
        }
        current.bias -= config.learning_rate * grad.bias;
    }
    curve.push(rm_loss(&current, pairs)?);
    Ok((current, curve))
}

/// Fraction of pairs whose positive action strictly outscores the negative;
/// ties count as failures.
pub fn ranking_accuracy(params: &RewardModelParams, pairs: &[PreferencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Precondition("ranking accuracy needs a non-empty batch".into()));
    }
    let mut hits = 0usize;
    for pair in pairs {
        if pair_margin(params, pair)? > 0.0 {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Build Bradley-Terry pairs from logged turns: each positive is the action
/// the dataset took, each negative a single draw from the policy at the same
/// state. Draws that reproduce the positive are skipped; the skip count is
/// returned alongside the pairs. Contexts keep their belief block; ablation
/// is applied at scoring time by the model's `use_belief` flag.
pub fn make_preference_pairs<R: Rng>(
    dataset: &[Trajectory],
    policy: &PolicyParams,
    rng: &mut R,
) -> Result<(Vec<PreferencePair>, usize)> {
    if dataset.is_empty() {
        return Err(Error::Precondition("pair construction needs at least one dialogue".into()));
    }
    let spaces = &policy.spaces;
    let mut pairs = Vec::new();
    let mut skipped = 0usize;
    for trajectory in dataset {
        for turn in &trajectory.turns {
            let state =
                State { observation: turn.observation.clone(), belief: turn.belief.clone() };
            let (sampled, _) = policy::act(policy, &state, rng)?;
            if sampled == turn.action {
                skipped += 1;
                continue;
            }
            pairs.push(PreferencePair::new(
                state_features(spaces, &state, true),
                action_features(spaces, &turn.action),
                action_features(spaces, &sampled),
            )?);
        }
    }
    Ok((pairs, skipped))
}
