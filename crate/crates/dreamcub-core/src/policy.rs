//! Softmax actor over the flat action space, a linear Q critic, and the
//! KL-regularized PPO update that trains them both.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{state_feature_len, state_features};
use crate::numeric::{categorical_kl, log_softmax, sample_categorical, softmax, Tensor};
use crate::types::{Action, Spaces, State, Trajectory};

/// Actor parameters: one row of feature weights per flat action, so the
/// action logits are `weights · φ(s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub spaces: Spaces,
    pub weights: Tensor,
}

impl PolicyParams {
    pub fn new_zero(spaces: Spaces) -> Self {
        let weights = Tensor::zeros(vec![spaces.n_actions(), state_feature_len(&spaces)]);
        Self { spaces, weights }
    }

    /// Uniform weights in [−scale, scale].
    pub fn random<R: Rng>(spaces: Spaces, scale: f64, rng: &mut R) -> Self {
        let mut params = Self::new_zero(spaces);
        for w in &mut params.weights.data {
            *w = (rng.random::<f64>() * 2.0 - 1.0) * scale;
        }
        params
    }

    pub fn validate(&self) -> Result<()> {
        self.spaces.validate()?;
        self.weights
            .validate_shape("policy weights", &[self.spaces.n_actions(), state_feature_len(&self.spaces)])?;
        self.weights.validate_finite("policy weights")
    }
}

/// Logits over flat actions for one state.
pub fn action_logits(params: &PolicyParams, state: &State) -> Vec<f64> {
    logits_from_features(params, &state_features(&params.spaces, state, true))
}

fn logits_from_features(params: &PolicyParams, features: &[f64]) -> Vec<f64> {
    (0..params.weights.n_rows())
        .map(|a| params.weights.row(a).iter().zip(features).map(|(w, x)| w * x).sum())
        .collect()
}

/// π(·|s) as a probability vector over flat actions.
pub fn action_distribution(params: &PolicyParams, state: &State) -> Vec<f64> {
    softmax(&action_logits(params, state))
}

/// Exact log π(a|s).
pub fn log_prob(params: &PolicyParams, state: &State, action: &Action) -> f64 {
    log_softmax(&action_logits(params, state))[action.flat_index(&params.spaces)]
}

/// Sample an action from π(·|s) and return it with its exact log probability.
pub fn act<R: Rng>(params: &PolicyParams, state: &State, rng: &mut R) -> Result<(Action, f64)> {
    let log_probs = log_softmax(&action_logits(params, state));
    let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
    let flat = sample_categorical(rng, &probs);
    Ok((Action::from_flat(&params.spaces, flat)?, log_probs[flat]))
}

/// Critic parameters: a linear map over state features concatenated with a
/// one-hot action indicator, plus a bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticParams {
    pub spaces: Spaces,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl CriticParams {
    pub fn new_zero(spaces: Spaces) -> Self {
        let n = state_feature_len(&spaces) + spaces.n_actions();
        Self { spaces, weights: vec![0.0; n], bias: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        self.spaces.validate()?;
        let want = state_feature_len(&self.spaces) + self.spaces.n_actions();
        if self.weights.len() != want {
            return Err(Error::Validation(format!(
                "critic weights have {} entries, the feature space needs {want}",
                self.weights.len()
            )));
        }
        if !self.weights.iter().all(|w| w.is_finite()) || !self.bias.is_finite() {
            return Err(Error::NonFinite("critic parameters".into()));
        }
        Ok(())
    }
}

/// Q(s,a) for every flat action at once, given precomputed state features.
fn q_values_from_features(critic: &CriticParams, features: &[f64]) -> Vec<f64> {
    let s_len = features.len();
    let base: f64 =
        critic.bias + critic.weights[..s_len].iter().zip(features).map(|(w, x)| w * x).sum::<f64>();
    critic.weights[s_len..].iter().map(|wa| base + wa).collect()
}

/// Q(s,a) under the critic.
pub fn q_value(critic: &CriticParams, state: &State, action: &Action) -> f64 {
    let features = state_features(&critic.spaces, state, true);
    q_values_from_features(critic, &features)[action.flat_index(&critic.spaces)]
}

/// V(s) = Σ_a π(a|s) · Q(s,a): the critic's Q averaged under the policy.
pub fn state_value(policy: &PolicyParams, critic: &CriticParams, state: &State) -> f64 {
    let features = state_features(&policy.spaces, state, true);
    let probs = softmax(&logits_from_features(policy, &features));
    probs.iter().zip(q_values_from_features(critic, &features)).map(|(p, q)| p * q).sum()
}

/// KL-regularized reward: r − β·(log π(a|s) − log π_ref(a|s)).
pub fn modified_reward(r: f64, logprob_policy: f64, logprob_ref: f64, kl_beta: f64) -> f64 {
    r - kl_beta * (logprob_policy - logprob_ref)
}

/// PPO hyperparameters. The frozen reference policy is passed to
/// [`ppo_update`] alongside the batch rather than stored here, so the config
/// stays plain serializable data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub policy_learning_rate: f64,
    pub critic_learning_rate: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            kl_beta: 0.01,
            gamma: 0.9,
            epochs: 4,
            policy_learning_rate: 0.05,
            critic_learning_rate: 0.1,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::Validation("clip_epsilon must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Validation("gamma must lie in [0, 1]".into()));
        }
        if self.kl_beta < 0.0 || !self.kl_beta.is_finite() {
            return Err(Error::Validation("kl_beta must be finite and non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be at least 1".into()));
        }
        if self.policy_learning_rate < 0.0
            || self.critic_learning_rate < 0.0
            || !self.policy_learning_rate.is_finite()
            || !self.critic_learning_rate.is_finite()
        {
            return Err(Error::Validation("learning rates must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Per-turn quantities PPO needs after the advantage pass: frozen features,
/// the action taken, the snapshot log-probability, the advantage, and the
/// discounted-return target for the critic.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoSample {
    pub features: Vec<f64>,
    pub action_flat: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub target_return: f64,
}

/// Discounted returns, values, and advantages for one reward sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    pub returns: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Backward-accumulated discounted returns G_t, the policy-expected critic
/// values V(s_t), and the advantages G_t − V(s_t).
pub fn compute_advantages(
    policy: &PolicyParams,
    critic: &CriticParams,
    states: &[State],
    rewards: &[f64],
    gamma: f64,
) -> Result<Advantages> {
    if states.is_empty() || states.len() != rewards.len() {
        return Err(Error::InvalidArgument(format!(
            "advantage estimation needs matching non-empty states and rewards, got {} and {}",
            states.len(),
            rewards.len()
        )));
    }
    let mut returns = vec![0.0; rewards.len()];
    let mut future = 0.0;
    for (g, &r) in returns.iter_mut().zip(rewards).rev() {
        future = r + gamma * future;
        *g = future;
    }
    let values: Vec<f64> = states.iter().map(|s| state_value(policy, critic, s)).collect();
    let advantages = returns.iter().zip(&values).map(|(g, v)| g - v).collect();
    Ok(Advantages { returns, values, advantages })
}

/// Mean clipped-surrogate objective and its gradient in the policy weights.
/// A sample contributes gradient only while its unclipped term is the active
/// branch of the min.
pub fn clipped_surrogate_and_gradient(
    policy: &PolicyParams,
    samples: &[PpoSample],
    clip_epsilon: f64,
) -> Result<(f64, Tensor)> {
    if samples.is_empty() {
        return Err(Error::Precondition("PPO surrogate needs a non-empty batch".into()));
    }
    let n_actions = policy.spaces.n_actions();
    let mut gradient = Tensor::zeros(vec![n_actions, state_feature_len(&policy.spaces)]);
    let mut objective = 0.0;
    let scale = 1.0 / samples.len() as f64;
    for sample in samples {
        let log_probs = log_softmax(&logits_from_features(policy, &sample.features));
        let ratio = (log_probs[sample.action_flat] - sample.old_log_prob).exp();
        let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
        let unclipped_term = ratio * sample.advantage;
        let clipped_term = clipped * sample.advantage;
        objective += scale * unclipped_term.min(clipped_term);
        if unclipped_term <= clipped_term {
            let coeff = scale * sample.advantage * ratio;
            if coeff != 0.0 {
                let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
                for a in 0..n_actions {
                    let indicator = if a == sample.action_flat { 1.0 } else { 0.0 };
                    let row_coeff = coeff * (indicator - probs[a]);
                    let row = gradient.row_mut(a);
                    for (g, &x) in row.iter_mut().zip(&sample.features) {
                        *g += row_coeff * x;
                    }
                }
            }
        }
    }
    Ok((objective, gradient))
}

/// Gradient of the critic's mean squared error toward the return targets.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticGradient {
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Mean squared error of Q(s,a) against the discounted-return targets, with
/// its exact gradient.
pub fn critic_loss_and_gradient(
    critic: &CriticParams,
    samples: &[PpoSample],
) -> Result<(f64, CriticGradient)> {
    if samples.is_empty() {
        return Err(Error::Precondition("critic update needs a non-empty batch".into()));
    }
    let mut grad = CriticGradient { weights: vec![0.0; critic.weights.len()], bias: 0.0 };
    let mut loss = 0.0;
    let scale = 1.0 / samples.len() as f64;
    for sample in samples {
        let s_len = sample.features.len();
        let q = q_values_from_features(critic, &sample.features)[sample.action_flat];
        let residual = q - sample.target_return;
        loss += scale * residual * residual;
        let d = 2.0 * scale * residual;
        for (g, &x) in grad.weights[..s_len].iter_mut().zip(&sample.features) {
            *g += d * x;
        }
        grad.weights[s_len + sample.action_flat] += d;
        grad.bias += d;
    }
    Ok((loss, grad))
}

/// Summary statistics of one [`ppo_update`] call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    /// Mean KL(π ‖ π_ref) over the batch states after the update.
    pub mean_kl: f64,
    /// Mean per-trajectory sum of raw (unmodified) rewards.
    pub mean_return: f64,
    /// Negated clipped surrogate at the final parameters.
    pub policy_loss: f64,
    /// Critic mean squared error at the final parameters.
    pub critic_loss: f64,
}

/// One PPO round over a batch of trajectories: snapshot log-probabilities and
/// advantages under the incoming parameters, then several epochs of clipped
/// policy ascent and critic descent. Rewards are KL-regularized against the
/// frozen reference before discounting. Fully deterministic.
pub fn ppo_update(
    policy: &PolicyParams,
    critic: &CriticParams,
    reference: &PolicyParams,
    batch: &[Trajectory],
    config: &PpoConfig,
) -> Result<(PolicyParams, CriticParams, PpoStats)> {
    config.validate()?;
    if batch.is_empty() || batch.iter().any(|t| t.turns.is_empty()) {
        return Err(Error::Precondition("PPO needs a non-empty batch of non-empty trajectories".into()));
    }
    let spaces = &policy.spaces;
    let mut samples = Vec::new();
    let mut return_sum = 0.0;
    for trajectory in batch {
        let states: Vec<State> = trajectory
            .turns
            .iter()
            .map(|t| State { observation: t.observation.clone(), belief: t.belief.clone() })
            .collect();
        let mut rewards = Vec::with_capacity(states.len());
        let mut flats = Vec::with_capacity(states.len());
        let mut old_log_probs = Vec::with_capacity(states.len());
        for (turn, state) in trajectory.turns.iter().zip(&states) {
            let old = log_prob(policy, state, &turn.action);
            let reference_lp = log_prob(reference, state, &turn.action);
            rewards.push(modified_reward(turn.reward, old, reference_lp, config.kl_beta));
            flats.push(turn.action.flat_index(spaces));
            old_log_probs.push(old);
        }
        return_sum += trajectory.turns.iter().map(|t| t.reward).sum::<f64>();
        let advantages = compute_advantages(policy, critic, &states, &rewards, config.gamma)?;
        for (((state, flat), old), index) in
            states.iter().zip(flats).zip(old_log_probs).zip(0..states.len())
        {
            samples.push(PpoSample {
                features: state_features(spaces, state, true),
                action_flat: flat,
                old_log_prob: old,
                advantage: advantages.advantages[index],
                target_return: advantages.returns[index],
            });
        }
    }

    let mut new_policy = policy.clone();
    let mut new_critic = critic.clone();
    for _ in 0..config.epochs {
        let (_, policy_grad) = clipped_surrogate_and_gradient(&new_policy, &samples, config.clip_epsilon)?;
        for (w, g) in new_policy.weights.data.iter_mut().zip(&policy_grad.data) {
            *w += config.policy_learning_rate * g;
        }
        let (_, critic_grad) = critic_loss_and_gradient(&new_critic, &samples)?;
        for (w, g) in new_critic.weights.iter_mut().zip(&critic_grad.weights) {
            *w -= config.critic_learning_rate * g;
        }
        new_critic.bias -= config.critic_learning_rate * critic_grad.bias;
    }

    let (objective, _) = clipped_surrogate_and_gradient(&new_policy, &samples, config.clip_epsilon)?;
    let (critic_loss, _) = critic_loss_and_gradient(&new_critic, &samples)?;
    let mut kl_sum = 0.0;
    for sample in &samples {
        let p = softmax(&logits_from_features(&new_policy, &sample.features));
        let q = softmax(&logits_from_features(reference, &sample.features));
        kl_sum += categorical_kl(&p, &q);
    }
    let stats = PpoStats {
        mean_kl: kl_sum / samples.len() as f64,
        mean_return: return_sum / batch.len() as f64,
        policy_loss: -objective,
        critic_loss,
    };
    Ok((new_policy, new_critic, stats))
}

/// Supervised pretraining schedule for [`train_supervised`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSupervisedConfig {
    pub learning_rate: f64,
    pub steps: usize,
}

impl Default for TrainSupervisedConfig {
    fn default() -> Self {
        Self { learning_rate: 0.5, steps: 100 }
    }
}

/// Cross-entropy fit of the policy to logged actions: full-batch gradient
/// descent on −mean log π(a_t|s_t). Returns the fitted parameters and the
/// loss before each step plus a final evaluation.
pub fn train_supervised(
    dataset: &[Trajectory],
    params: &PolicyParams,
    config: &TrainSupervisedConfig,
) -> Result<(PolicyParams, Vec<f64>)> {
    if !config.learning_rate.is_finite() || config.learning_rate < 0.0 {
        return Err(Error::Validation("learning rate must be finite and non-negative".into()));
    }
    let turns: Vec<(Vec<f64>, usize)> = dataset
        .iter()
        .flat_map(|t| t.turns.iter())
        .map(|turn| {
            let state =
                State { observation: turn.observation.clone(), belief: turn.belief.clone() };
            (state_features(&params.spaces, &state, true), turn.action.flat_index(&params.spaces))
        })
        .collect();
    if turns.is_empty() {
        return Err(Error::Precondition("supervised training needs at least one turn".into()));
    }
    let scale = 1.0 / turns.len() as f64;
    let loss_and_gradient = |p: &PolicyParams| {
        let mut loss = 0.0;
        let mut grad = Tensor::zeros(p.weights.dims.clone());
        for (features, flat) in &turns {
            let log_probs = log_softmax(&logits_from_features(p, features));
            loss -= scale * log_probs[*flat];
            let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
            for (a, &prob) in probs.iter().enumerate() {
                let indicator = if a == *flat { 1.0 } else { 0.0 };
                let row_coeff = scale * (prob - indicator);
                let row = grad.row_mut(a);
                for (g, &x) in row.iter_mut().zip(features) {
                    *g += row_coeff * x;
                }
            }
        }
        (loss, grad)
    };
    let mut current = params.clone();
    let mut curve = Vec::with_capacity(config.steps + 1);
    for _ in 0..config.steps {
        let (loss, grad) = loss_and_gradient(&current);
        curve.push(loss);
        for (w, g) in current.weights.data.iter_mut().zip(&grad.data) {
            *w -= config.learning_rate * g;
        }
    }
    curve.push(loss_and_gradient(&current).0);
    Ok((current, curve))
}
