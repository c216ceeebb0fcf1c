//! The learned dialogue world model: a linear-softmax belief inference head
//! over observation features, tabular belief dynamics with a next-query
//! emission head and a Gaussian reward head, trained by gradient ascent on an
//! evidence lower bound whose expectations are exact sums over the finite
//! belief space. Also home to imagination rollouts and the bound/gap
//! diagnostics that compare the model against the environment oracles.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    exact_loglik, probs_to_logits, smoothing_conditionals, EnvSpec, LOG_FLOOR, REWARD_SIGMA,
};
use crate::error::{Error, Result};
use crate::features::{observation_feature_len, observation_features};
use crate::numeric::{
    gaussian_log_density, log_softmax, log_sum_exp, sample_categorical, softmax, weighted, Tensor,
};
use crate::policy::{act, PolicyParams};
use crate::reward_model::{rm_score, RewardModelParams};
use crate::rng::rng_for;
use crate::types::{
    Action, BeliefPosterior, Observation, Spaces, State, Trajectory, TemplateKind, TurnRecord,
    Utterance,
};

fn default_true() -> bool {
    true
}

/// All learnable parameters of the dialogue world model.
///
/// Every distribution is a softmax of a logit row, so any finite parameter
/// setting is valid. The Gaussian reward likelihood has per-belief mean
/// `reward_head[b]` and fixed standard deviation [`REWARD_SIGMA`], matching
/// the environment's exact likelihood family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldModelParams {
    pub spaces: Spaces,
    /// `[belief × observation feature]` weights of the belief inference head:
    /// the belief posterior is the softmax of these weights applied to
    /// [`observation_features`].
    pub inference_logits: Tensor,
    /// `[belief × action × next belief]` transition logits.
    pub transition_logits: Tensor,
    /// `[belief × user template]` next-query emission logits.
    pub emission_logits: Tensor,
    /// Logits of the learned prior over the first turn's belief.
    pub initial_logits: Vec<f64>,
    /// Per-belief mean of the Gaussian reward likelihood.
    pub reward_head: Vec<f64>,
    /// When false, belief inference ignores the observation and always
    /// returns the uniform posterior; dynamics and emission still train.
    #[serde(default = "default_true")]
    pub belief_conditioning: bool,
}

impl WorldModelParams {
    /// All-zero parameters: uniform inference, transitions, emissions, and
    /// initial prior; reward means at zero.
    pub fn new_zero(spaces: Spaces) -> Self {
        let b = spaces.n_beliefs();
        let a = spaces.n_actions();
        let u = spaces.n_user_templates();
        let f = observation_feature_len(&spaces);
        Self {
            inference_logits: Tensor::zeros(vec![b, f]),
            transition_logits: Tensor::zeros(vec![b, a, b]),
            emission_logits: Tensor::zeros(vec![b, u]),
            initial_logits: vec![0.0; b],
            reward_head: vec![0.0; b],
            belief_conditioning: true,
            spaces,
        }
    }

    pub fn random<R: Rng>(spaces: Spaces, scale: f64, rng: &mut R) -> Self {
        let mut params = Self::new_zero(spaces);
        for block in [
            &mut params.inference_logits.data,
            &mut params.transition_logits.data,
            &mut params.emission_logits.data,
        ] {
            for x in block.iter_mut() {
                *x = (rng.random::<f64>() * 2.0 - 1.0) * scale;
            }
        }
        for x in params.initial_logits.iter_mut().chain(params.reward_head.iter_mut()) {
            *x = (rng.random::<f64>() * 2.0 - 1.0) * scale;
        }
        params
    }

    /// Deterministic warm start that pins what each latent index means
    /// before any training. The all-zero start is useless for that: it is an
    /// exact stationary point of the bound under which every latent receives
    /// identical gradients, and the bound itself is invariant under latent
    /// relabeling, so training from an uninformed start converges to an
    /// arbitrary permutation of the labels. This start reads only public
    /// structure: each user template advertises its (emotion, sentiment)
    /// pair, the terminal intention is an absorbing episode end, earlier
    /// intention labels are the more common openers, and latents tend to
    /// persist across a turn. Because latents persist, past queries in the
    /// history bag carry the same label evidence as the current one, so the
    /// bag block starts with the same weights as the current-query block —
    /// that is what lets the posterior sharpen over a conversation instead
    /// of tracking only the latest query.
    pub fn anchored_init(spaces: Spaces) -> Result<Self> {
        const LABEL_MATCH: f64 = 3.0;
        const EMOTION_MATCH: f64 = 1.0;
        const STAY: f64 = 1.0;
        const OPENER_LEAN: f64 = -0.2;
        const TERMINAL_DECAY: f64 = -0.5;

        let mut params = Self::new_zero(spaces);
        let spaces = &params.spaces;
        let b_count = spaces.n_beliefs();
        let a_count = spaces.n_actions();
        let query_offset = 2 * spaces.n_templates();
        let turn_feature = observation_feature_len(spaces) - 1;

        for b in 0..b_count {
            let latent = spaces.unflatten(b);
            for (t, template) in
                spaces.template_table.templates[..spaces.n_user_templates()].iter().enumerate()
            {
                let TemplateKind::UserQuery { emotion, sentiment } = template.kind else {
                    continue;
                };
                let weight = if emotion == latent.emotion {
                    if sentiment == latent.sentiment {
                        LABEL_MATCH
                    } else {
                        EMOTION_MATCH
                    }
                } else {
                    0.0
                };
                params.emission_logits.row_mut(b)[t] = weight;
                params.inference_logits.row_mut(b)[t] = weight;
                params.inference_logits.row_mut(b)[query_offset + t] = weight;
            }
            for a in 0..a_count {
                params.transition_logits.row_mut(b * a_count + a)[b] = STAY;
            }
            params.initial_logits[b] = if Some(latent.intention) == spaces.terminal_intention {
                LOG_FLOOR
            } else {
                OPENER_LEAN * latent.intention as f64
            };
            if Some(latent.intention) == spaces.terminal_intention {
                params.inference_logits.row_mut(b)[turn_feature] = TERMINAL_DECAY;
            }
            params.reward_head[b] = 0.5;
        }
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        self.spaces.validate()?;
        let b = self.spaces.n_beliefs();
        let a = self.spaces.n_actions();
        let u = self.spaces.n_user_templates();
        let f = observation_feature_len(&self.spaces);
        self.inference_logits.validate_shape("inference_logits", &[b, f])?;
        self.transition_logits.validate_shape("transition_logits", &[b, a, b])?;
        self.emission_logits.validate_shape("emission_logits", &[b, u])?;
        if self.initial_logits.len() != b {
            return Err(Error::Validation("initial_logits length mismatch".into()));
        }
        if self.reward_head.len() != b {
            return Err(Error::Validation("reward_head length mismatch".into()));
        }
        self.inference_logits.validate_finite("inference_logits")?;
        self.transition_logits.validate_finite("transition_logits")?;
        self.emission_logits.validate_finite("emission_logits")?;
        if self.initial_logits.iter().chain(&self.reward_head).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("world model parameter is not finite".into()));
        }
        Ok(())
    }

    /// Gradient-ascent step: every parameter moves by `learning_rate` times
    /// its gradient entry.
    pub fn apply_step(&mut self, gradient: &WorldModelGradient, learning_rate: f64) {
        let pairs = [
            (&mut self.inference_logits.data, &gradient.inference_logits.data),
            (&mut self.transition_logits.data, &gradient.transition_logits.data),
            (&mut self.emission_logits.data, &gradient.emission_logits.data),
        ];
        for (params, grads) in pairs {
            for (p, g) in params.iter_mut().zip(grads) {
                *p += learning_rate * g;
            }
        }
        for (p, g) in self.initial_logits.iter_mut().zip(&gradient.initial_logits) {
            *p += learning_rate * g;
        }
        for (p, g) in self.reward_head.iter_mut().zip(&gradient.reward_head) {
            *p += learning_rate * g;
        }
    }
}

/// Copy an environment spec's tables into world-model parameters: logits are
/// the log probabilities with exact zeros floored at [`crate::env::LOG_FLOOR`]
/// (whose softmax reproduces the zeros exactly), the reward head copies the
/// reward table, and the inference head starts at zero weights (uniform
/// beliefs). The result is a world model whose generative side equals the
/// spec.
pub fn spec_to_world_model(spec: &EnvSpec) -> WorldModelParams {
    let mut params = WorldModelParams::new_zero(spec.spaces.clone());
    let b = spec.spaces.n_beliefs();
    let a = spec.spaces.n_actions();
    for row in 0..b * a {
        params
            .transition_logits
            .row_mut(row)
            .copy_from_slice(&probs_to_logits(spec.transition.row(row)));
    }
    for row in 0..b {
        params.emission_logits.row_mut(row).copy_from_slice(&probs_to_logits(spec.emission_row(row)));
    }
    params.initial_logits = probs_to_logits(&spec.initial_dist);
    params.reward_head = spec.reward_table.clone();
    params
}

/// Belief posterior q(b | o): softmax of the inference head applied to the
/// observation's features, with terminal-intention latents masked out at
/// episode openings. Total on valid observations; with belief conditioning
/// ablated the softmax is replaced by the uniform posterior (the opening
/// mask still applies).
pub fn infer_belief(params: &WorldModelParams, observation: &Observation) -> BeliefPosterior {
    let spaces = &params.spaces;
    let b = spaces.n_beliefs();
    let mut probs = if params.belief_conditioning {
        let features = observation_features(spaces, observation);
        let logits: Vec<f64> = (0..b)
            .map(|row| {
                params.inference_logits.row(row).iter().zip(&features).map(|(w, x)| w * x).sum()
            })
            .collect();
        softmax(&logits)
    } else {
        vec![1.0 / b as f64; b]
    };
    // A dialogue's first query cannot come from an already-ended
    // conversation, so opening observations carry exactly zero mass on the
    // absorbing intention.
    if observation.history.is_empty() {
        if let Some(terminal) = spaces.terminal_intention {
            for (flat, p) in probs.iter_mut().enumerate() {
                if spaces.unflatten(flat).intention == terminal {
                    *p = 0.0;
                }
            }
            let alive: f64 = probs.iter().sum();
            for p in probs.iter_mut() {
                *p /= alive;
            }
        }
    }
    BeliefPosterior::from_probs(probs).expect("masked softmax output is a distribution")
}

/// One-step belief prediction: the mixture Σ_b q(b) · softmax(transition
/// logits[b, a]) over next beliefs.
pub fn predict_transition(
    params: &WorldModelParams,
    posterior: &BeliefPosterior,
    action: &Action,
) -> BeliefPosterior {
    let b_count = params.spaces.n_beliefs();
    let a = action.flat_index(&params.spaces);
    let mut out = vec![0.0; b_count];
    for (b, &w) in posterior.probs().iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let row = softmax(params.transition_logits.row(b * params.spaces.n_actions() + a));
        for (o, p) in out.iter_mut().zip(row) {
            *o += w * p;
        }
    }
    let z: f64 = out.iter().sum();
    for o in out.iter_mut() {
        *o /= z;
    }
    BeliefPosterior::from_probs(out).expect("normalized mixture is a distribution")
}

/// Mixture distribution over the next user query under a belief posterior.
fn query_mixture(params: &WorldModelParams, posterior: &BeliefPosterior) -> Vec<f64> {
    let u = params.spaces.n_user_templates();
    let mut out = vec![0.0; u];
    for (b, &w) in posterior.probs().iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let row = softmax(params.emission_logits.row(b));
        for (o, p) in out.iter_mut().zip(row) {
            *o += w * p;
        }
    }
    out
}

/// Sample the next user query from the emission mixture under `posterior`.
pub fn emit_next_query<R: Rng>(
    params: &WorldModelParams,
    posterior: &BeliefPosterior,
    rng: &mut R,
) -> Utterance {
    let mixture = query_mixture(params, posterior);
    let template = sample_categorical(rng, &mixture);
    Utterance::from_template(&params.spaces, template).expect("sampled template id is in range")
}

/// The evidence lower bound of one trajectory, split into its three terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    /// `reconstruction + reward_loglik − kl`.
    pub total: f64,
    /// Σ_t E_q[log p(o_t | b_t)] over the emission head.
    pub reconstruction: f64,
    /// Σ_t E_q[log N(r_t; reward_head[b_t], σ)].
    pub reward_loglik: f64,
    /// Σ_t E[KL(q(b_t) ‖ prior(b_t | b_{t-1}, a_{t-1}))], the first turn
    /// against the learned initial prior (or the transition from the
    /// previous exchange when the trajectory is a mid-episode window).
    pub kl: f64,
}

impl ElboBreakdown {
    fn zero() -> Self {
        Self { total: 0.0, reconstruction: 0.0, reward_loglik: 0.0, kl: 0.0 }
    }

    fn add(&mut self, other: &Self) {
        self.total += other.total;
        self.reconstruction += other.reconstruction;
        self.reward_loglik += other.reward_loglik;
        self.kl += other.kl;
    }

    fn scale(&mut self, factor: f64) {
        self.total *= factor;
        self.reconstruction *= factor;
        self.reward_loglik *= factor;
        self.kl *= factor;
    }
}

/// Log-probability tables the bound is evaluated against. Built either from
/// model parameters (log-softmax, always finite) or from a spec's probability
/// tables (exact logs, −inf on zero entries).
struct LogTables {
    log_transition: Tensor,
    log_emission: Tensor,
    log_initial: Vec<f64>,
    reward_head: Vec<f64>,
    n_actions: usize,
}

impl LogTables {
    fn from_params(params: &WorldModelParams) -> Self {
        let mut log_transition = params.transition_logits.clone();
        for row in 0..log_transition.n_rows() {
            let normalized = log_softmax(log_transition.row(row));
            log_transition.row_mut(row).copy_from_slice(&normalized);
        }
        let mut log_emission = params.emission_logits.clone();
        for row in 0..log_emission.n_rows() {
            let normalized = log_softmax(log_emission.row(row));
            log_emission.row_mut(row).copy_from_slice(&normalized);
        }
        Self {
            log_transition,
            log_emission,
            log_initial: log_softmax(&params.initial_logits),
            reward_head: params.reward_head.clone(),
            n_actions: params.spaces.n_actions(),
        }
    }

    fn from_spec(spec: &EnvSpec) -> Self {
        let ln = |p: &f64| p.ln();
        let log_transition = Tensor::from_data(
            spec.transition.dims.clone(),
            spec.transition.data.iter().map(ln).collect(),
        )
        .expect("spec tensor dims are consistent");
        let log_emission =
            Tensor::from_data(spec.emission.dims.clone(), spec.emission.data.iter().map(ln).collect())
                .expect("spec tensor dims are consistent");
        Self {
            log_transition,
            log_emission,
            log_initial: spec.initial_dist.iter().map(ln).collect(),
            reward_head: spec.reward_table.clone(),
            n_actions: spec.spaces.n_actions(),
        }
    }

    fn transition_row(&self, belief: usize, action: usize) -> &[f64] {
        self.log_transition.row(belief * self.n_actions + action)
    }
}

/// What the first turn's KL term is taken against.
enum PriorTerm {
    /// Episode opening: the learned initial prior.
    Initial,
    /// Mid-episode window: the transition from the inferred belief over the
    /// previous exchange's observation.
    Window { q0: Vec<f64>, action0: usize, features: Vec<f64> },
}

fn prior_term(params: &WorldModelParams, trajectory: &Trajectory) -> Result<PriorTerm> {
    let first = &trajectory.turns[0].observation;
    if first.history.is_empty() {
        return Ok(PriorTerm::Initial);
    }
    let (prev_obs, prev_action) = first.previous_exchange(&params.spaces).ok_or_else(|| {
        Error::Validation("observation history is non-empty but holds no complete exchange".into())
    })?;
    let q0 = infer_belief(params, &prev_obs).probs().to_vec();
    let features = observation_features(&params.spaces, &prev_obs);
    Ok(PriorTerm::Window { q0, action0: prev_action.flat_index(&params.spaces), features })
}

/// Per-turn evidence of a trajectory: query template ids, rewards, and the
/// flat actions linking consecutive turns (one fewer than the turn count).
fn window_evidence(spaces: &Spaces, trajectory: &Trajectory) -> (Vec<usize>, Vec<f64>, Vec<usize>) {
    let queries =
        trajectory.turns.iter().map(|t| t.observation.current_query.template_id).collect();
    let rewards = trajectory.turns.iter().map(|t| t.reward).collect();
    let action_flats = trajectory.turns[..trajectory.turns.len() - 1]
        .iter()
        .map(|t| t.action.flat_index(spaces))
        .collect();
    (queries, rewards, action_flats)
}

/// Σ_d q[d]·ln q[d] (the negative entropy), with 0·ln 0 = 0.
fn neg_entropy(q: &[f64]) -> f64 {
    q.iter().map(|&p| weighted(p, p.ln())).sum()
}

/// KL(q ‖ exp(log_row)) given the precomputed negative entropy of q.
fn kl_against_log_row(q: &[f64], q_neg_entropy: f64, log_row: &[f64]) -> f64 {
    q_neg_entropy - q.iter().zip(log_row).map(|(&p, &lp)| weighted(p, lp)).sum::<f64>()
}

fn elbo_core(
    tables: &LogTables,
    posteriors: &[Vec<f64>],
    prior: &PriorTerm,
    queries: &[usize],
    rewards: &[f64],
    action_flats: &[usize],
) -> ElboBreakdown {
    let mut reconstruction = 0.0;
    let mut reward_loglik = 0.0;
    let mut kl = 0.0;
    let neg_entropies: Vec<f64> = posteriors.iter().map(|q| neg_entropy(q)).collect();
    for (i, q) in posteriors.iter().enumerate() {
        for (b, &w) in q.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            reconstruction += weighted(w, tables.log_emission.row(b)[queries[i]]);
            reward_loglik += w * gaussian_log_density(rewards[i], tables.reward_head[b], REWARD_SIGMA);
        }
        if i == 0 {
            match prior {
                PriorTerm::Initial => {
                    kl += kl_against_log_row(q, neg_entropies[0], &tables.log_initial);
                }
                PriorTerm::Window { q0, action0, .. } => {
                    for (bp, &w) in q0.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        kl += weighted(
                            w,
                            kl_against_log_row(q, neg_entropies[0], tables.transition_row(bp, *action0)),
                        );
                    }
                }
            }
        } else {
            let prev = &posteriors[i - 1];
            let a = action_flats[i - 1];
            for (bp, &w) in prev.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                kl += weighted(w, kl_against_log_row(q, neg_entropies[i], tables.transition_row(bp, a)));
            }
        }
    }
    ElboBreakdown { total: reconstruction + reward_loglik - kl, reconstruction, reward_loglik, kl }
}

/// Evidence lower bound of a trajectory under the model, with all
/// expectations over the inferred beliefs taken as exact sums.
///
/// An episode-opening trajectory takes its first KL term against the learned
/// initial prior; a window cut from mid-episode reconstructs the previous
/// exchange from the first observation's history and uses the transition from
/// the belief inferred there.
pub fn elbo(params: &WorldModelParams, trajectory: &Trajectory) -> Result<ElboBreakdown> {
    params.validate()?;
    trajectory.validate(&params.spaces)?;
    let tables = LogTables::from_params(params);
    elbo_with_tables(params, &tables, trajectory)
}

fn elbo_with_tables(
    params: &WorldModelParams,
    tables: &LogTables,
    trajectory: &Trajectory,
) -> Result<ElboBreakdown> {
    let posteriors: Vec<Vec<f64>> = trajectory
        .turns
        .iter()
        .map(|t| infer_belief(params, &t.observation).probs().to_vec())
        .collect();
    let prior = prior_term(params, trajectory)?;
    let (queries, rewards, action_flats) = window_evidence(&params.spaces, trajectory);
    Ok(elbo_core(tables, &posteriors, &prior, &queries, &rewards, &action_flats))
}

/// Gradient of [`elbo`]'s total with respect to every parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldModelGradient {
    pub inference_logits: Tensor,
    pub transition_logits: Tensor,
    pub emission_logits: Tensor,
    pub initial_logits: Vec<f64>,
    pub reward_head: Vec<f64>,
}

impl WorldModelGradient {
    pub fn zeros(spaces: &Spaces) -> Self {
        let b = spaces.n_beliefs();
        Self {
            inference_logits: Tensor::zeros(vec![b, observation_feature_len(spaces)]),
            transition_logits: Tensor::zeros(vec![b, spaces.n_actions(), b]),
            emission_logits: Tensor::zeros(vec![b, spaces.n_user_templates()]),
            initial_logits: vec![0.0; b],
            reward_head: vec![0.0; b],
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for block in [
            &mut self.inference_logits.data,
            &mut self.transition_logits.data,
            &mut self.emission_logits.data,
        ] {
            for x in block.iter_mut() {
                *x *= factor;
            }
        }
        for x in self.initial_logits.iter_mut().chain(self.reward_head.iter_mut()) {
            *x *= factor;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        let mut sum = 0.0;
        for block in [
            &self.inference_logits.data,
            &self.transition_logits.data,
            &self.emission_logits.data,
            &self.initial_logits,
            &self.reward_head,
        ] {
            sum += block.iter().map(|x| x * x).sum::<f64>();
        }
        sum.sqrt()
    }
}

/// Analytic gradient of the trajectory bound with respect to all parameters;
/// matches central finite differences of [`elbo`]'s total.
pub fn elbo_gradient(params: &WorldModelParams, trajectory: &Trajectory) -> Result<WorldModelGradient> {
    params.validate()?;
    trajectory.validate(&params.spaces)?;
    let tables = LogTables::from_params(params);
    let mut gradient = WorldModelGradient::zeros(&params.spaces);
    accumulate_elbo_gradient(params, &tables, trajectory, &mut gradient)?;
    Ok(gradient)
}

/// Add one trajectory's bound gradient into `gradient` and return the
/// trajectory's bound. Shared by [`elbo_gradient`] and [`train_dynamics`].
fn accumulate_elbo_gradient(
    params: &WorldModelParams,
    tables: &LogTables,
    trajectory: &Trajectory,
    gradient: &mut WorldModelGradient,
) -> Result<ElboBreakdown> {
    let b_count = params.spaces.n_beliefs();
    let sigma2 = REWARD_SIGMA * REWARD_SIGMA;
    let posteriors: Vec<Vec<f64>> = trajectory
        .turns
        .iter()
        .map(|t| infer_belief(params, &t.observation).probs().to_vec())
        .collect();
    let prior = prior_term(params, trajectory)?;
    let (queries, rewards, action_flats) = window_evidence(&params.spaces, trajectory);
    let breakdown = elbo_core(tables, &posteriors, &prior, &queries, &rewards, &action_flats);
    let n = posteriors.len();

    let mut occupancy = vec![0.0; b_count];
    for (i, q) in posteriors.iter().enumerate() {
        for (b, &w) in q.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            gradient.reward_head[b] += w * (rewards[i] - params.reward_head[b]) / sigma2;
            gradient.emission_logits.row_mut(b)[queries[i]] += w;
            occupancy[b] += w;
        }
    }
    for b in 0..b_count {
        if occupancy[b] == 0.0 {
            continue;
        }
        let log_row = tables.log_emission.row(b).to_vec();
        let grad_row = gradient.emission_logits.row_mut(b);
        for (g, lp) in grad_row.iter_mut().zip(log_row) {
            *g -= occupancy[b] * lp.exp();
        }
    }

    let mut transition_edge = |prev: &[f64], a: usize, next: &[f64]| {
        for (bp, &w) in prev.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let log_row = tables.transition_row(bp, a).to_vec();
            let grad_row = gradient.transition_logits.row_mut(bp * params.spaces.n_actions() + a);
            for ((g, &q_next), lp) in grad_row.iter_mut().zip(next).zip(log_row) {
                *g += w * (q_next - lp.exp());
            }
        }
    };
    if let PriorTerm::Window { q0, action0, .. } = &prior {
        transition_edge(q0, *action0, &posteriors[0]);
    }
    for i in 1..n {
        transition_edge(&posteriors[i - 1], action_flats[i - 1], &posteriors[i]);
    }

    if let PriorTerm::Initial = prior {
        for (d, (&q, &l)) in posteriors[0].iter().zip(&tables.log_initial).enumerate() {
            gradient.initial_logits[d] += q - l.exp();
        }
    }

    if params.belief_conditioning {
        let neg_entropies: Vec<f64> = posteriors.iter().map(|q| neg_entropy(q)).collect();
        let mut push_softmax_grad = |q: &[f64], u: &[f64], features: &[f64]| {
            let mean: f64 = q.iter().zip(u).map(|(&w, &v)| weighted(w, v)).sum();
            for (c, (&w, &v)) in q.iter().zip(u).enumerate() {
                let dz = weighted(w, v - mean);
                if dz == 0.0 {
                    continue;
                }
                let row = gradient.inference_logits.row_mut(c);
                for (g, &x) in row.iter_mut().zip(features) {
                    *g += dz * x;
                }
            }
        };
        for (i, q) in posteriors.iter().enumerate() {
            let mut u = vec![0.0; b_count];
            let mut prior_mix = vec![0.0; b_count];
            match (&prior, i) {
                (PriorTerm::Initial, 0) => prior_mix.copy_from_slice(&tables.log_initial),
                (PriorTerm::Window { q0, action0, .. }, 0) => {
                    for (bp, &w) in q0.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for (m, &lp) in prior_mix.iter_mut().zip(tables.transition_row(bp, *action0)) {
                            *m += weighted(w, lp);
                        }
                    }
                }
                _ => {
                    for (bp, &w) in posteriors[i - 1].iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for (m, &lp) in
                            prior_mix.iter_mut().zip(tables.transition_row(bp, action_flats[i - 1]))
                        {
                            *m += weighted(w, lp);
                        }
                    }
                }
            }
            for (c, slot) in u.iter_mut().enumerate() {
                if q[c] == 0.0 {
                    continue;
                }
                let mut v = tables.log_emission.row(c)[queries[i]]
                    + gaussian_log_density(rewards[i], tables.reward_head[c], REWARD_SIGMA)
                    + prior_mix[c]
                    - q[c].ln();
                if i + 1 < n {
                    v -= kl_against_log_row(
                        &posteriors[i + 1],
                        neg_entropies[i + 1],
                        tables.transition_row(c, action_flats[i]),
                    );
                }
                *slot = v;
            }
            let features = observation_features(&params.spaces, &trajectory.turns[i].observation);
            push_softmax_grad(q, &u, &features);
        }
        if let PriorTerm::Window { q0, action0, features } = &prior {
            let mut u = vec![0.0; b_count];
            for (bp, slot) in u.iter_mut().enumerate() {
                if q0[bp] == 0.0 {
                    continue;
                }
                *slot = -kl_against_log_row(
                    &posteriors[0],
                    neg_entropies[0],
                    tables.transition_row(bp, *action0),
                );
            }
            push_softmax_grad(q0, &u, features);
        }
    }
    Ok(breakdown)
}

/// Exact log p(o_{1:T}, r_{1:T} | a_{1:T}) under the model's own softmax
/// tables and Gaussian reward likelihood, by a log-space forward recursion.
/// The bound [`elbo`] never exceeds this value. Requires an episode-opening
/// trajectory (the model prior only covers first turns).
pub fn model_loglik(params: &WorldModelParams, trajectory: &Trajectory) -> Result<f64> {
    params.validate()?;
    trajectory.validate(&params.spaces)?;
    if !trajectory.turns[0].observation.history.is_empty() {
        return Err(Error::InvalidArgument(
            "trajectory must start at an episode opening (empty history)".into(),
        ));
    }
    let tables = LogTables::from_params(params);
    let (queries, rewards, action_flats) = window_evidence(&params.spaces, trajectory);
    let b_count = params.spaces.n_beliefs();
    let mut total = 0.0;
    let mut log_post: Vec<f64> = Vec::new();
    for i in 0..queries.len() {
        let mut log_w = vec![0.0; b_count];
        for (b, slot) in log_w.iter_mut().enumerate() {
            let log_prior = if i == 0 {
                tables.log_initial[b]
            } else {
                let terms: Vec<f64> = (0..b_count)
                    .map(|bp| log_post[bp] + tables.transition_row(bp, action_flats[i - 1])[b])
                    .collect();
                log_sum_exp(&terms)
            };
            *slot = log_prior
                + tables.log_emission.row(b)[queries[i]]
                + gaussian_log_density(rewards[i], tables.reward_head[b], REWARD_SIGMA);
        }
        let z = log_sum_exp(&log_w);
        if !z.is_finite() {
            return Err(Error::ImpossibleEvidence(format!(
                "turn {} evidence has zero probability under the model",
                i + 1
            )));
        }
        total += z;
        log_post = log_w.iter().map(|&w| w - z).collect();
    }
    Ok(total)
}

/// Configuration of [`train_dynamics`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DynamicsConfig {
    /// Windows sampled per gradient step.
    pub batch_size: usize,
    /// Maximum turns per sampled window.
    pub window_len: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self { batch_size: 32, window_len: 8, steps: 2000, learning_rate: 1e-2, seed: 0 }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.window_len == 0 {
            return Err(Error::InvalidArgument("batch_size and window_len must be ≥ 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidArgument("learning rate must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

/// Stochastic gradient ascent on the mean trajectory bound over windows
/// sampled from the buffer.
///
/// Each step draws `batch_size` windows uniformly over all (trajectory, start
/// turn) pairs that admit a full `window_len`-turn window — trajectories
/// shorter than the window contribute a single truncated one — and takes one
/// ascent step on their mean bound. Returns the updated
/// parameters and the per-step mean [`ElboBreakdown`] of the sampled batch,
/// evaluated before that step's update. Deterministic given the seed and
/// buffer contents.
pub fn train_dynamics(
    buffer: &[Trajectory],
    params: &WorldModelParams,
    config: &DynamicsConfig,
) -> Result<(WorldModelParams, Vec<ElboBreakdown>)> {
    params.validate()?;
    config.validate()?;
    for trajectory in buffer {
        trajectory.validate(&params.spaces)?;
    }
    let starts: Vec<(usize, usize)> = buffer
        .iter()
        .enumerate()
        .filter(|(_, t)| !t.is_empty())
        .flat_map(|(i, t)| (0..=t.len().saturating_sub(config.window_len)).map(move |s| (i, s)))
        .collect();
    if starts.len() < config.batch_size {
        return Err(Error::Precondition(format!(
            "buffer offers {} windows, a batch needs {}",
            starts.len(),
            config.batch_size
        )));
    }
    let mut current = params.clone();
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut rng = rng_for(config.seed, "dynamics-windows", step as u64);
        let tables = LogTables::from_params(&current);
        let mut gradient = WorldModelGradient::zeros(&current.spaces);
        let mut mean = ElboBreakdown::zero();
        for _ in 0..config.batch_size {
            let (ti, start) = starts[rng.random_range(0..starts.len())];
            let window = buffer[ti].window(start, config.window_len);
            let breakdown = accumulate_elbo_gradient(&current, &tables, &window, &mut gradient)?;
            mean.add(&breakdown);
        }
        mean.scale(1.0 / config.batch_size as f64);
        gradient.scale(1.0 / config.batch_size as f64);
        curve.push(mean);
        current.apply_step(&gradient, config.learning_rate);
    }
    Ok((current, curve))
}

/// Roll a trajectory entirely inside the world model: the policy picks
/// actions, the reward model scores them, and the model's transition and
/// emission heads produce the next belief and query. Stops early if the
/// observation history fills up; `true_latent` is absent on every turn.
pub fn imagine_rollout<R: Rng>(
    params: &WorldModelParams,
    reward_params: &RewardModelParams,
    start: &State,
    policy: &PolicyParams,
    horizon: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("imagination horizon must be ≥ 1".into()));
    }
    let mut state = start.clone();
    let mut turns = Vec::with_capacity(horizon);
    for step in 0..horizon {
        let (action, _) = act(policy, &state, rng)?;
        let reward = rm_score(reward_params, &state, &action)?;
        turns.push(TurnRecord {
            observation: state.observation.clone(),
            belief: state.belief.clone(),
            action: action.clone(),
            reward,
            true_latent: None,
        });
        if step + 1 == horizon {
            break;
        }
        let next_belief = predict_transition(params, &state.belief, &action);
        let next_query = emit_next_query(params, &next_belief, rng);
        match state.observation.extend_history(&params.spaces, &action, next_query) {
            Ok(observation) => state = State { observation, belief: next_belief },
            Err(Error::Capacity(_)) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(Trajectory { turns, terminated: false })
}

/// The inferred belief at every turn of a trajectory.
pub fn inference_posteriors(
    params: &WorldModelParams,
    trajectory: &Trajectory,
) -> Result<Vec<BeliefPosterior>> {
    params.validate()?;
    trajectory.validate(&params.spaces)?;
    Ok(trajectory.turns.iter().map(|t| infer_belief(params, &t.observation)).collect())
}

/// Exact forward-filtered posterior after every turn of a trajectory under
/// the model's own generative tables — learned initial prior, transitions,
/// and query emissions; rewards are not part of this evidence. This is the
/// model-side counterpart of the environment's filtering oracle: it measures
/// what the learned dynamics imply about the latent, independently of the
/// amortized inference head.
pub fn filtered_posteriors(
    params: &WorldModelParams,
    trajectory: &Trajectory,
) -> Result<Vec<BeliefPosterior>> {
    params.validate()?;
    trajectory.validate(&params.spaces)?;
    if !trajectory.turns[0].observation.history.is_empty() {
        return Err(Error::InvalidArgument(
            "trajectory must start at an episode opening (empty history)".into(),
        ));
    }
    let tables = LogTables::from_params(params);
    let b_count = params.spaces.n_beliefs();
    let last = trajectory.turns.last().expect("validated non-empty");
    let queries = last.observation.user_query_templates();
    let flats: Vec<usize> = trajectory.turns[..trajectory.turns.len() - 1]
        .iter()
        .map(|t| t.action.flat_index(&params.spaces))
        .collect();
    let mut posteriors = Vec::with_capacity(queries.len());
    let mut previous: Vec<f64> = Vec::new();
    let mut scratch = vec![0.0; b_count];
    for (t, &query) in queries.iter().enumerate() {
        let mut log_w = vec![0.0; b_count];
        for (b, w) in log_w.iter_mut().enumerate() {
            let prior = if t == 0 {
                tables.log_initial[b]
            } else {
                let row_action = flats[t - 1];
                for (prev, s) in previous.iter().enumerate() {
                    scratch[prev] = s + tables.transition_row(prev, row_action)[b];
                }
                log_sum_exp(&scratch)
            };
            *w = prior + tables.log_emission.row(b)[query];
        }
        let z = log_sum_exp(&log_w);
        if !z.is_finite() {
            return Err(Error::ImpossibleEvidence(format!(
                "turn {} has zero probability under the model's tables",
                t + 1
            )));
        }
        for w in log_w.iter_mut() {
            *w -= z;
        }
        posteriors.push(BeliefPosterior::from_probs(log_w.iter().map(|w| w.exp()).collect())?);
        previous = log_w;
    }
    Ok(posteriors)
}

/// Both sides of the bound-gap identity for explicit per-turn posteriors,
/// with the generative side fixed to the spec's exact tables:
///
/// * `gap_direct` = exact trajectory log-likelihood minus the bound;
/// * `gap_kl_sum` = Σ_t E[KL(q_t ‖ p(b_t | b_{t-1}, evidence))] against the
///   exact smoothing conditionals.
///
/// The two agree to numerical precision, and both are zero exactly when the
/// posteriors equal the smoothing conditionals (e.g. a deterministic
/// environment where every posterior is one-hot). Either side is `+inf` when
/// a posterior puts mass on a latent path the evidence rules out.
pub fn elbo_gap_from_posteriors(
    spec: &EnvSpec,
    posteriors: &[BeliefPosterior],
    trajectory: &Trajectory,
) -> Result<(f64, f64)> {
    spec.validate()?;
    let loglik = exact_loglik(spec, trajectory)?;
    if posteriors.len() != trajectory.len() {
        return Err(Error::InvalidArgument(format!(
            "{} posteriors for a {}-turn trajectory",
            posteriors.len(),
            trajectory.len()
        )));
    }
    let q: Vec<Vec<f64>> = posteriors.iter().map(|p| p.probs().to_vec()).collect();
    let tables = LogTables::from_spec(spec);
    let (queries, rewards, action_flats) = window_evidence(&spec.spaces, trajectory);
    let bound = elbo_core(&tables, &q, &PriorTerm::Initial, &queries, &rewards, &action_flats);
    let gap_direct = loglik - bound.total;

    let smooth = smoothing_conditionals(spec, trajectory)?;
    let neg_entropies: Vec<f64> = q.iter().map(|row| neg_entropy(row)).collect();
    let kl_vs_probs = |qt: &[f64], neg_ent: f64, row: &[f64]| -> f64 {
        neg_ent - qt.iter().zip(row).map(|(&p, &m)| weighted(p, m.ln())).sum::<f64>()
    };
    let mut gap_kl_sum = match &smooth[0][0] {
        Some(row) => kl_vs_probs(&q[0], neg_entropies[0], row),
        None => f64::INFINITY,
    };
    for i in 1..q.len() {
        for (prev, &w) in q[i - 1].iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            match &smooth[i][prev] {
                Some(row) => gap_kl_sum += w * kl_vs_probs(&q[i], neg_entropies[i], row),
                None => gap_kl_sum = f64::INFINITY,
            }
        }
    }
    Ok((gap_direct, gap_kl_sum))
}

/// [`elbo_gap_from_posteriors`] with the posteriors taken from the model's
/// inference head.
pub fn elbo_gap_diagnostic(
    spec: &EnvSpec,
    params: &WorldModelParams,
    trajectory: &Trajectory,
) -> Result<(f64, f64)> {
    let posteriors = inference_posteriors(params, trajectory)?;
    elbo_gap_from_posteriors(spec, &posteriors, trajectory)
}

/// Mean per-turn log-probability the model assigns to each observed user
/// query before seeing it: the first turn is predicted from the learned
/// initial prior, later turns from the transition applied to the previous
/// turn's inferred belief. Trajectories must start at episode openings.
pub fn next_query_predictive_loglik(
    params: &WorldModelParams,
    dataset: &[Trajectory],
) -> Result<f64> {
    params.validate()?;
    if dataset.is_empty() {
        return Err(Error::Precondition("no trajectories to evaluate".into()));
    }
    let b_count = params.spaces.n_beliefs();
    let emission: Vec<Vec<f64>> =
        (0..b_count).map(|b| softmax(params.emission_logits.row(b))).collect();
    let initial = softmax(&params.initial_logits);
    let mut total = 0.0;
    let mut turns = 0usize;
    for trajectory in dataset {
        trajectory.validate(&params.spaces)?;
        if !trajectory.turns[0].observation.history.is_empty() {
            return Err(Error::InvalidArgument(
                "trajectory must start at an episode opening (empty history)".into(),
            ));
        }
        let mut pred = initial.clone();
        for (i, turn) in trajectory.turns.iter().enumerate() {
            if i > 0 {
                let previous = &trajectory.turns[i - 1];
                let q_prev = infer_belief(params, &previous.observation);
                pred = predict_transition(params, &q_prev, &previous.action).probs().to_vec();
            }
            let query = turn.observation.current_query.template_id;
            let p: f64 = pred.iter().zip(&emission).map(|(&w, row)| w * row[query]).sum();
            total += p.ln();
            turns += 1;
        }
    }
    Ok(total / turns as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{
        env_reset, env_step, random_dense_spec, true_posterior, true_posterior_sequence,
        EmissionMode, EnvGenConfig, EnvSpec, SyntheticEnv, LOG_FLOOR,
    };
    use crate::numeric::{central_difference, gradient_relative_error};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn default_spec() -> EnvSpec {
        EnvGenConfig::default().generate().unwrap()
    }

    fn one_hot_spec() -> EnvSpec {
        EnvGenConfig { emission_mode: EmissionMode::OneHot, ..EnvGenConfig::default() }
            .generate()
            .unwrap()
    }

    /// Roll one episode with uniformly random actions, recording exact
    /// uniform placeholder beliefs; mirrors the env test helper.
    fn roll_episode(spec: &EnvSpec, episode_seed: u64, max_turns: usize) -> Trajectory {
        let mut env = SyntheticEnv::new(spec.clone()).unwrap();
        env.reset(episode_seed).unwrap();
        let mut rng = rng_for(episode_seed, "world-model-test-actions", 0);
        let mut turns = Vec::new();
        loop {
            let state = env.current_state().unwrap().clone();
            let action =
                Action::from_flat(&spec.spaces, rng.random_range(0..spec.spaces.n_actions()))
                    .unwrap();
            let (_, reward, done) = env.step(&action).unwrap();
            turns.push(TurnRecord {
                observation: state.observation_so_far.clone(),
                belief: BeliefPosterior::uniform(spec.spaces.n_beliefs()),
                action,
                reward,
                true_latent: Some(state.current_latent.clone()),
            });
            if done || turns.len() >= max_turns {
                break;
            }
        }
        Trajectory { turns, terminated: true }
    }

    /// A degenerate spec where the whole episode is a single forced path:
    /// one-hot initial at `b_star`, identity transitions, one-hot emissions.
    fn single_path_spec(b_star: usize) -> EnvSpec {
        let spaces = EnvGenConfig::default().spaces();
        let b = spaces.n_beliefs();
        let a = spaces.n_actions();
        let u = spaces.n_user_templates();
        let mut initial_dist = vec![0.0; b];
        initial_dist[b_star] = 1.0;
        let mut transition = Tensor::zeros(vec![b, a, b]);
        for belief in 0..b {
            for action in 0..a {
                transition.row_mut(belief * a + action)[belief] = 1.0;
            }
        }
        let mut emission = Tensor::zeros(vec![b, u]);
        for belief in 0..b {
            emission.row_mut(belief)[belief % u] = 1.0;
        }
        let reward_table: Vec<f64> =
            spaces.beliefs().map(|lb| spaces.sentiment_centers[lb.sentiment]).collect();
        let spec = EnvSpec {
            spaces,
            initial_dist,
            transition,
            emission,
            reward_table,
            seed: 0,
        };
        spec.validate().unwrap();
        spec
    }

    /// Inference weights that pin the posterior to `b_star` on every
    /// observation, via a huge weight on the always-1 turn-count feature.
    fn pin_inference(params: &mut WorldModelParams, b_star: usize) {
        let f = observation_feature_len(&params.spaces);
        params.inference_logits.row_mut(b_star)[f - 1] = 600.0;
    }

    fn hand_trajectory(spec: &EnvSpec, queries: &[usize], action_flats: &[usize], rewards: &[f64]) -> Trajectory {
        let spaces = &spec.spaces;
        let mut observation =
            Observation::opening(Utterance::from_template(spaces, queries[0]).unwrap());
        let mut turns = Vec::new();
        for i in 0..queries.len() {
            let action = Action::from_flat(spaces, action_flats[i.min(action_flats.len() - 1)])
                .unwrap();
            turns.push(TurnRecord {
                observation: observation.clone(),
                belief: BeliefPosterior::uniform(spaces.n_beliefs()),
                action: action.clone(),
                reward: rewards[i],
                true_latent: None,
            });
            if i + 1 < queries.len() {
                observation = observation
                    .extend_history(
                        spaces,
                        &action,
                        Utterance::from_template(spaces, queries[i + 1]).unwrap(),
                    )
                    .unwrap();
            }
        }
        Trajectory { turns, terminated: false }
    }

    #[test]
    fn zero_inference_weights_give_the_uniform_posterior() {
        let spec = default_spec();
        let spaces = &spec.spaces;
        let params = WorldModelParams::new_zero(spaces.clone());
        let trajectory = roll_episode(&spec, 5, 4);
        let terminal = spaces.terminal_intention.unwrap();
        let alive = spaces.n_beliefs() - spaces.n_emotions() * spaces.n_sentiments();
        for (t, turn) in trajectory.turns.iter().enumerate() {
            let posterior = infer_belief(&params, &turn.observation);
            for (flat, &p) in posterior.probs().iter().enumerate() {
                let expected = if t > 0 {
                    1.0 / 63.0
                } else if spaces.unflatten(flat).intention == terminal {
                    0.0
                } else {
                    1.0 / alive as f64
                };
                assert_abs_diff_eq!(p, expected, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn opening_inference_masks_the_terminal_intention_exactly() {
        let spec = default_spec();
        let spaces = &spec.spaces;
        let mut rng = rng_for(91, "opening-mask", 0);
        let params = WorldModelParams::random(spaces.clone(), 1.5, &mut rng);
        let trajectory = roll_episode(&spec, 91, 6);
        let terminal = spaces.terminal_intention.unwrap();
        let opening = infer_belief(&params, &trajectory.turns[0].observation);
        for (flat, &p) in opening.probs().iter().enumerate() {
            if spaces.unflatten(flat).intention == terminal {
                assert_eq!(p, 0.0);
            } else {
                assert!(p > 0.0);
            }
        }
        let later = infer_belief(&params, &trajectory.turns[1].observation);
        assert!(later.probs().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn anchored_start_reads_query_labels_and_opens_alive() {
        let spec = default_spec();
        let spaces = &spec.spaces;
        let params = WorldModelParams::anchored_init(spaces.clone()).unwrap();
        for trajectory in (0..6).map(|s| roll_episode(&spec, 100 + s, 3)) {
            let turn = &trajectory.turns[0];
            let TemplateKind::UserQuery { emotion, sentiment } = spaces
                .template_table
                .get(turn.observation.current_query.template_id)
                .unwrap()
                .kind
            else {
                panic!("opening query is a user template");
            };
            let posterior = infer_belief(&params, &turn.observation);
            let best = posterior
                .probs()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(flat, _)| spaces.unflatten(flat))
                .unwrap();
            assert_eq!(best.emotion, emotion);
            assert_eq!(best.sentiment, sentiment);
            assert_ne!(Some(best.intention), spaces.terminal_intention);
        }
        let prior = softmax(&params.initial_logits);
        for (flat, &p) in prior.iter().enumerate() {
            if Some(spaces.unflatten(flat).intention) == spaces.terminal_intention {
                assert_eq!(p, 0.0);
            }
        }
    }

    #[test]
    fn adding_a_constant_to_all_inference_weights_leaves_the_posterior_unchanged() {
        let spec = default_spec();
        let mut rng = rng_for(11, "shift-invariance", 0);
        let params = WorldModelParams::random(spec.spaces.clone(), 0.5, &mut rng);
        let mut shifted = params.clone();
        for x in shifted.inference_logits.data.iter_mut() {
            *x += 0.7;
        }
        let observation = roll_episode(&spec, 3, 3).turns[2].observation.clone();
        let a = infer_belief(&params, &observation);
        let b = infer_belief(&shifted, &observation);
        for (&pa, &pb) in a.probs().iter().zip(b.probs()) {
            assert_abs_diff_eq!(pa, pb, epsilon = 1e-12);
        }
    }

    #[test]
    fn ablated_inference_is_uniform_regardless_of_weights() {
        let spec = default_spec();
        let mut rng = rng_for(12, "ablated-inference", 0);
        let mut params = WorldModelParams::random(spec.spaces.clone(), 2.0, &mut rng);
        params.belief_conditioning = false;
        let observation = roll_episode(&spec, 8, 2).turns[1].observation.clone();
        let posterior = infer_belief(&params, &observation);
        for &p in posterior.probs() {
            assert_abs_diff_eq!(p, 1.0 / 63.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn one_hot_posterior_transition_is_exactly_the_softmax_row() {
        let spec = default_spec();
        let mut rng = rng_for(13, "transition-one-hot", 0);
        let params = WorldModelParams::random(spec.spaces.clone(), 1.0, &mut rng);
        let b_star = 17;
        let action = Action::from_flat(&spec.spaces, 6).unwrap();
        let posterior = BeliefPosterior::one_hot(63, b_star);
        let predicted = predict_transition(&params, &posterior, &action);
        let expected = softmax(
            params
                .transition_logits
                .row(b_star * spec.spaces.n_actions() + action.flat_index(&spec.spaces)),
        );
        for (&p, &e) in predicted.probs().iter().zip(&expected) {
            assert_abs_diff_eq!(p, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn uniform_transition_rows_map_everything_to_uniform() {
        let spec = default_spec();
        let params = WorldModelParams::new_zero(spec.spaces.clone());
        let mut rng = rng_for(14, "transition-uniform", 0);
        let probs: Vec<f64> = {
            let raw: Vec<f64> = (0..63).map(|_| rng.random::<f64>() + 0.01).collect();
            let z: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / z).collect()
        };
        let posterior = BeliefPosterior::from_probs(probs).unwrap();
        let action = Action::from_flat(&spec.spaces, 3).unwrap();
        let predicted = predict_transition(&params, &posterior, &action);
        for &p in predicted.probs() {
            assert_abs_diff_eq!(p, 1.0 / 63.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn mixture_transition_matches_the_hand_computed_convex_combination() {
        let spec = default_spec();
        let mut rng = rng_for(15, "transition-mixture", 0);
        let params = WorldModelParams::random(spec.spaces.clone(), 1.0, &mut rng);
        let action = Action::from_flat(&spec.spaces, 9).unwrap();
        let a = action.flat_index(&spec.spaces);
        let mut probs = vec![0.0; 63];
        probs[4] = 0.3;
        probs[40] = 0.7;
        let posterior = BeliefPosterior::from_probs(probs).unwrap();
        let predicted = predict_transition(&params, &posterior, &action);
        let row4 = softmax(params.transition_logits.row(4 * 16 + a));
        let row40 = softmax(params.transition_logits.row(40 * 16 + a));
        for (d, &p) in predicted.probs().iter().enumerate() {
            assert_abs_diff_eq!(p, 0.3 * row4[d] + 0.7 * row40[d], epsilon = 1e-12);
        }
    }

    #[test]
    fn one_hot_emission_with_one_hot_posterior_is_deterministic() {
        let spec = single_path_spec(10);
        let params = spec_to_world_model(&spec);
        let posterior = BeliefPosterior::one_hot(63, 10);
        let mut rng = rng_for(16, "emit-deterministic", 0);
        for _ in 0..20 {
            let utterance = emit_next_query(&params, &posterior, &mut rng);
            assert_eq!(utterance.template_id, 10 % spec.spaces.n_user_templates());
        }
    }

    #[test]
    fn emission_sampling_frequencies_match_the_mixture_within_three_sigma() {
        let spec = default_spec();
        let mut rng = rng_for(17, "emit-frequencies", 0);
        let params = WorldModelParams::random(spec.spaces.clone(), 1.0, &mut rng);
        let posterior = infer_belief(&params, &roll_episode(&spec, 2, 1).turns[0].observation);
        let mixture = query_mixture(&params, &posterior);
        let draws = 10_000usize;
        let mut counts = vec![0usize; mixture.len()];
        let mut sample_rng = rng_for(17, "emit-frequencies", 1);
        for _ in 0..draws {
            counts[emit_next_query(&params, &posterior, &mut sample_rng).template_id] += 1;
        }
        for (template, &p) in mixture.iter().enumerate() {
            let expected = draws as f64 * p;
            let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
            assert!(
                ((counts[template] as f64) - expected).abs() <= 3.0 * sigma + 1.0,
                "template {template}: {} draws vs expected {expected:.1} ± {sigma:.1}",
                counts[template]
            );
        }
    }

    #[test]
    fn emission_sampling_is_reproducible_for_a_fixed_seed() {
        let spec = default_spec();
        let mut rng = rng_for(18, "emit-reproducible", 0);
        let params = WorldModelParams::random(spec.spaces.clone(), 1.0, &mut rng);
        let posterior = BeliefPosterior::uniform(63);
        let first = emit_next_query(&params, &posterior, &mut rng_for(18, "draw", 0));
        let second = emit_next_query(&params, &posterior, &mut rng_for(18, "draw", 0));
        assert_eq!(first, second);
    }

    #[test]
    fn elbo_terms_satisfy_the_identity_and_kl_is_nonnegative() {
        let spec = default_spec();
        for seed in 0..10u64 {
            let mut rng = rng_for(19, "elbo-identity", seed);
            let params = WorldModelParams::random(spec.spaces.clone(), 1.5, &mut rng);
            let trajectory = roll_episode(&spec, seed, 5);
            let breakdown = elbo(&params, &trajectory).unwrap();
            assert_abs_diff_eq!(
                breakdown.total,
                breakdown.reconstruction + breakdown.reward_loglik - breakdown.kl,
                epsilon = 1e-9
            );
            assert!(breakdown.kl >= -1e-12, "kl = {}", breakdown.kl);
        }
    }

    #[test]
    #[ignore]
    fn probe_recovery_from_anchored_start() {
        let spec = default_spec();
        let spaces = &spec.spaces;
        let buffer: Vec<Trajectory> =
            (0..250).map(|s| roll_episode(&spec, 10_000 + s, spaces.t_max)).collect();
        let turns: usize = buffer.iter().map(Trajectory::len).sum();
        let held_out: Vec<Trajectory> =
            (0..40u64).map(|s| roll_episode(&spec, 90_000 + s, spaces.t_max)).collect();
        let kl = |q: &[f64], p: &[f64]| -> f64 {
            q.iter()
                .zip(p)
                .map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 })
                .sum()
        };
        let evaluate = |model: &WorldModelParams, use_filter: bool| -> (f64, f64, Vec<f64>) {
            let mut by_turn = vec![(0.0f64, 0usize); spaces.t_max];
            let mut total_kl = 0.0;
            let mut hits = 0usize;
            let mut count = 0usize;
            for held in &held_out {
                let inferred = if use_filter {
                    filtered_posteriors(model, held).unwrap()
                } else {
                    inference_posteriors(model, held).unwrap()
                };
                let oracle = true_posterior_sequence(&spec, held).unwrap();
                for (t, ((q, p), turn)) in
                    inferred.iter().zip(&oracle).zip(&held.turns).enumerate()
                {
                    let d = kl(q.probs(), p.probs());
                    total_kl += d;
                    by_turn[t].0 += d;
                    by_turn[t].1 += 1;
                    let mut marg = vec![0.0; spaces.n_emotions()];
                    for (flat, &pr) in q.probs().iter().enumerate() {
                        marg[spaces.unflatten(flat).emotion] += pr;
                    }
                    let best =
                        marg.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
                    if best == turn.true_latent.unwrap().emotion {
                        hits += 1;
                    }
                    count += 1;
                }
            }
            (
                total_kl / count as f64,
                hits as f64 / count as f64,
                by_turn
                    .iter()
                    .map(|(s, n)| if *n > 0 { s / *n as f64 } else { f64::NAN })
                    .collect(),
            )
        };
        println!("buffer turns {turns}");
        for window_len in [1usize, 2, 8] {
            for lr in [0.01, 0.03] {
                let start = std::time::Instant::now();
                let mut model = WorldModelParams::anchored_init(spaces.clone()).unwrap();
                let (kl0, acc0, _) = evaluate(&model, false);
                println!("[L {window_len} lr {lr}] init  head KL {kl0:.4} acc {acc0:.4}");
                let stage_steps = 500;
                for stage in 0..6u64 {
                    let config = DynamicsConfig {
                        batch_size: 32,
                        window_len,
                        steps: stage_steps,
                        learning_rate: lr,
                        seed: stage,
                    };
                    let (next, _) = train_dynamics(&buffer, &model, &config).unwrap();
                    model = next;
                    let (head_kl, head_acc, per_turn) = evaluate(&model, false);
                    let fmt: Vec<String> = per_turn.iter().map(|k| format!("{k:.3}")).collect();
                    println!(
                        "[L {window_len} lr {lr}] {:>4} steps  head KL {head_kl:.4} acc {head_acc:.4}  by turn [{}]",
                        (stage + 1) * stage_steps as u64,
                        fmt.join(" "),
                    );
                }
                println!("[L {window_len} lr {lr}] elapsed {:?}", start.elapsed());
            }
        }
    }

    #[test]
    fn kl_vanishes_when_every_posterior_matches_its_prior() {
        let spec = default_spec();
        let spaces = &spec.spaces;
        let mut params = WorldModelParams::new_zero(spaces.clone());
        let terminal = spaces.terminal_intention.unwrap();
        for flat in 0..spaces.n_beliefs() {
            if spaces.unflatten(flat).intention == terminal {
                params.initial_logits[flat] = LOG_FLOOR;
            }
        }
        let trajectory = roll_episode(&spec, 21, 5);
        let breakdown = elbo(&params, &trajectory).unwrap();
        assert_abs_diff_eq!(breakdown.kl, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn elbo_equals_exact_loglik_on_a_deterministic_single_path() {
        let b_star = 22;
        let spec = single_path_spec(b_star);
        let mut params = spec_to_world_model(&spec);
        pin_inference(&mut params, b_star);
        let trajectory = roll_episode(&spec, 4, 4);
        for turn in &trajectory.turns {
            assert_eq!(turn.true_latent.as_ref().unwrap().flat_index(&spec.spaces), b_star);
        }
        let breakdown = elbo(&params, &trajectory).unwrap();
        let loglik = exact_loglik(&spec, &trajectory).unwrap();
        assert_abs_diff_eq!(breakdown.total, loglik, epsilon = 1e-9);
    }

    #[test]
    fn gap_identity_holds_on_dense_two_turn_fixtures() {
        let spaces = EnvGenConfig::default().spaces();
        for seed in 0..5u64 {
            let spec = random_dense_spec(&spaces, 100 + seed).unwrap();
            let mut rng = rng_for(22, "gap-identity", seed);
            let mut params = spec_to_world_model(&spec);
            for x in params.inference_logits.data.iter_mut() {
                *x = (rng.random::<f64>() * 2.0 - 1.0) * 0.8;
            }
            let trajectory = hand_trajectory(
                &spec,
                &[rng.random_range(0..21), rng.random_range(0..21)],
                &[rng.random_range(0..16)],
                &[rng.random::<f64>(), rng.random::<f64>()],
            );
            let (gap_direct, gap_kl_sum) = elbo_gap_diagnostic(&spec, &params, &trajectory).unwrap();
            assert!(gap_direct >= -1e-9);
            assert!(gap_kl_sum >= -1e-9);
            assert_abs_diff_eq!(gap_direct, gap_kl_sum, epsilon = 1e-8);

            let breakdown = elbo(&params, &trajectory).unwrap();
            let loglik = exact_loglik(&spec, &trajectory).unwrap();
            assert_abs_diff_eq!(loglik - breakdown.total, gap_direct, epsilon = 1e-8);
        }
    }

    #[test]
    fn oracle_posteriors_close_the_gap_exactly() {
        let spec = single_path_spec(30);
        let trajectory = roll_episode(&spec, 7, 3);
        let posteriors = true_posterior_sequence(&spec, &trajectory).unwrap();
        let (gap_direct, gap_kl_sum) =
            elbo_gap_from_posteriors(&spec, &posteriors, &trajectory).unwrap();
        assert_abs_diff_eq!(gap_direct, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(gap_kl_sum, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn elbo_never_exceeds_the_models_own_loglik() {
        let spec = default_spec();
        for seed in 0..10u64 {
            let mut rng = rng_for(23, "elbo-bound", seed);
            let params = WorldModelParams::random(spec.spaces.clone(), 1.2, &mut rng);
            let trajectory = roll_episode(&spec, 50 + seed, 6);
            let breakdown = elbo(&params, &trajectory).unwrap();
            let loglik = model_loglik(&params, &trajectory).unwrap();
            assert!(
                breakdown.total <= loglik + 1e-9,
                "seed {seed}: elbo {} > model loglik {loglik}",
                breakdown.total
            );
        }
    }

    #[test]
    fn elbo_never_exceeds_the_spec_loglik_when_tables_are_copied() {
        let spaces = EnvGenConfig::default().spaces();
        for seed in 0..10u64 {
            let spec = random_dense_spec(&spaces, 300 + seed).unwrap();
            let mut rng = rng_for(24, "spec-bound", seed);
            let mut params = spec_to_world_model(&spec);
            for x in params.inference_logits.data.iter_mut() {
                *x = (rng.random::<f64>() * 2.0 - 1.0) * 1.5;
            }
            let trajectory = hand_trajectory(
                &spec,
                &[rng.random_range(0..21), rng.random_range(0..21), rng.random_range(0..21)],
                &[rng.random_range(0..16), rng.random_range(0..16)],
                &[rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()],
            );
            let breakdown = elbo(&params, &trajectory).unwrap();
            let loglik = exact_loglik(&spec, &trajectory).unwrap();
            assert!(breakdown.total <= loglik + 1e-9);
        }
    }

    #[test]
    fn gradient_is_zero_at_the_deterministic_stationary_point() {
        let b_star = 22;
        let spec = single_path_spec(b_star);
        let mut params = spec_to_world_model(&spec);
        pin_inference(&mut params, b_star);
        let trajectory = roll_episode(&spec, 4, 4);
        let gradient = elbo_gradient(&params, &trajectory).unwrap();
        assert!(gradient.l2_norm() <= 1e-6, "norm = {}", gradient.l2_norm());
    }

    #[test]
    fn inference_gradient_vanishes_when_q_matches_every_prior() {
        let spec = default_spec();
        let mut params = WorldModelParams::new_zero(spec.spaces.clone());
        for h in params.reward_head.iter_mut() {
            *h = 0.5;
        }
        let trajectory = roll_episode(&spec, 25, 4);
        let gradient = elbo_gradient(&params, &trajectory).unwrap();
        for &g in &gradient.inference_logits.data {
            assert_abs_diff_eq!(g, 0.0, epsilon = 1e-12);
        }
    }

    fn flatten_params(params: &WorldModelParams) -> Vec<f64> {
        let mut flat = params.inference_logits.data.clone();
        flat.extend_from_slice(&params.transition_logits.data);
        flat.extend_from_slice(&params.emission_logits.data);
        flat.extend_from_slice(&params.initial_logits);
        flat.extend_from_slice(&params.reward_head);
        flat
    }

    fn unflatten_params(template: &WorldModelParams, flat: &[f64]) -> WorldModelParams {
        let mut params = template.clone();
        let mut offset = 0;
        for block in [
            &mut params.inference_logits.data,
            &mut params.transition_logits.data,
            &mut params.emission_logits.data,
            &mut params.initial_logits,
            &mut params.reward_head,
        ] {
            let len = block.len();
            block.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        params
    }

    fn flatten_gradient(gradient: &WorldModelGradient) -> Vec<f64> {
        let mut flat = gradient.inference_logits.data.clone();
        flat.extend_from_slice(&gradient.transition_logits.data);
        flat.extend_from_slice(&gradient.emission_logits.data);
        flat.extend_from_slice(&gradient.initial_logits);
        flat.extend_from_slice(&gradient.reward_head);
        flat
    }

    fn check_gradient_against_finite_differences(trajectory: &Trajectory, seed: u64) {
        let spec = default_spec();
        let mut rng = rng_for(seed, "fd-params", 0);
        let params = WorldModelParams::random(spec.spaces.clone(), 0.6, &mut rng);
        let analytic = flatten_gradient(&elbo_gradient(&params, trajectory).unwrap());
        let flat = flatten_params(&params);
        let total = flat.len();
        let mut coords: Vec<usize> = (0..total).step_by(997).collect();
        coords.extend((0..40).map(|i| (i * 7919 + seed as usize) % total));
        coords.sort_unstable();
        coords.dedup();
        let numeric = central_difference(
            |x| elbo(&unflatten_params(&params, x), trajectory).unwrap().total,
            &flat,
            1e-5,
            &coords,
        );
        for (&coord, &fd) in coords.iter().zip(&numeric) {
            let err = gradient_relative_error(analytic[coord], fd);
            assert!(
                err <= 1e-4,
                "coordinate {coord}: analytic {} vs finite difference {fd} (rel err {err:.2e})",
                analytic[coord]
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences_on_an_episode_opening() {
        let spec = default_spec();
        let trajectory = roll_episode(&spec, 31, 4);
        check_gradient_against_finite_differences(&trajectory, 26);
    }

    #[test]
    fn gradient_matches_finite_differences_on_a_mid_episode_window() {
        let spec = default_spec();
        let full = roll_episode(&spec, 33, 5);
        assert!(full.len() >= 3, "episode ended too early for a window fixture");
        let window = full.window(1, 3);
        assert!(!window.turns[0].observation.history.is_empty());
        check_gradient_against_finite_differences(&window, 27);
    }

    #[test]
    fn zero_learning_rate_training_is_an_exact_no_op() {
        let spec = default_spec();
        let mut rng = rng_for(28, "no-op", 0);
        let params = WorldModelParams::random(spec.spaces.clone(), 0.4, &mut rng);
        let buffer: Vec<Trajectory> = (0..4).map(|s| roll_episode(&spec, s, 5)).collect();
        let config = DynamicsConfig {
            steps: 3,
            learning_rate: 0.0,
            batch_size: 8,
            window_len: 4,
            ..Default::default()
        };
        let (trained, curve) = train_dynamics(&buffer, &params, &config).unwrap();
        assert_eq!(trained, params);
        assert_eq!(curve.len(), 3);
    }

    #[test]
    fn training_is_deterministic_given_the_seed() {
        let spec = default_spec();
        let params = WorldModelParams::new_zero(spec.spaces.clone());
        let buffer: Vec<Trajectory> = (0..6).map(|s| roll_episode(&spec, s, 6)).collect();
        let config = DynamicsConfig {
            steps: 5,
            batch_size: 8,
            window_len: 4,
            seed: 9,
            ..Default::default()
        };
        let (a_params, a_curve) = train_dynamics(&buffer, &params, &config).unwrap();
        let (b_params, b_curve) = train_dynamics(&buffer, &params, &config).unwrap();
        assert_eq!(a_params, b_params);
        assert_eq!(a_curve, b_curve);
    }

    #[test]
    fn training_raises_the_bound_on_a_held_out_set() {
        let spec = default_spec();
        let params = WorldModelParams::new_zero(spec.spaces.clone());
        let buffer: Vec<Trajectory> = (0..40).map(|s| roll_episode(&spec, s, 8)).collect();
        let held_out: Vec<Trajectory> = (1000..1010).map(|s| roll_episode(&spec, s, 8)).collect();
        let config = DynamicsConfig { steps: 60, seed: 3, ..Default::default() };
        let (trained, curve) = train_dynamics(&buffer, &params, &config).unwrap();
        assert_eq!(curve.len(), 60);
        let mean_bound = |p: &WorldModelParams| -> f64 {
            held_out.iter().map(|t| elbo(p, t).unwrap().total).sum::<f64>() / held_out.len() as f64
        };
        let before = mean_bound(&params);
        let after = mean_bound(&trained);
        assert!(after > before, "bound did not improve: {before} → {after}");
    }

    #[test]
    fn training_rejects_a_buffer_smaller_than_a_batch() {
        let spec = default_spec();
        let params = WorldModelParams::new_zero(spec.spaces.clone());
        let buffer = vec![roll_episode(&spec, 0, 2)];
        let config = DynamicsConfig { batch_size: 64, ..Default::default() };
        assert!(matches!(
            train_dynamics(&buffer, &params, &config),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            train_dynamics(&[], &params, &config),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn elbo_rejects_non_finite_parameters() {
        let spec = default_spec();
        let mut params = WorldModelParams::new_zero(spec.spaces.clone());
        params.reward_head[5] = f64::NAN;
        let trajectory = roll_episode(&spec, 1, 2);
        assert!(matches!(elbo(&params, &trajectory), Err(Error::NonFinite(_))));
    }

    #[test]
    fn imagination_horizon_one_yields_exactly_one_turn() {
        let spec = default_spec();
        let params = spec_to_world_model(&spec);
        let mut rng = rng_for(29, "imagine-h1", 0);
        let rm = RewardModelParams::random(spec.spaces.clone(), 0.3, &mut rng);
        let policy = PolicyParams::new_zero(spec.spaces.clone());
        let (_, observation) = env_reset(&spec, 77).unwrap();
        let start = State {
            observation: observation.clone(),
            belief: true_posterior(&spec, &observation, &[]).unwrap(),
        };
        let trajectory =
            imagine_rollout(&params, &rm, &start, &policy, 1, &mut rng).unwrap();
        assert_eq!(trajectory.len(), 1);
        assert!(trajectory.turns[0].true_latent.is_none());
        assert!(!trajectory.terminated);
        assert!(matches!(
            imagine_rollout(&params, &rm, &start, &policy, 0, &mut rng),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn imagination_is_deterministic_given_the_rng_stream() {
        let spec = default_spec();
        let params = spec_to_world_model(&spec);
        let mut setup_rng = rng_for(30, "imagine-det", 0);
        let rm = RewardModelParams::random(spec.spaces.clone(), 0.3, &mut setup_rng);
        let policy = PolicyParams::new_zero(spec.spaces.clone());
        let (_, observation) = env_reset(&spec, 78).unwrap();
        let start = State {
            observation: observation.clone(),
            belief: true_posterior(&spec, &observation, &[]).unwrap(),
        };
        let a = imagine_rollout(&params, &rm, &start, &policy, 5, &mut rng_for(30, "roll", 0)).unwrap();
        let b = imagine_rollout(&params, &rm, &start, &policy, 5, &mut rng_for(30, "roll", 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        a.validate(&spec.spaces).unwrap();
    }

    #[test]
    fn imagination_stops_when_the_history_fills_up() {
        let spec = default_spec();
        let params = spec_to_world_model(&spec);
        let mut rng = rng_for(31, "imagine-capacity", 0);
        let rm = RewardModelParams::random(spec.spaces.clone(), 0.3, &mut rng);
        let policy = PolicyParams::new_zero(spec.spaces.clone());
        let trajectory = roll_episode(&spec, 80, spec.spaces.t_max);
        let last = trajectory.turns.last().unwrap();
        let start = State {
            observation: last.observation.clone(),
            belief: BeliefPosterior::uniform(63),
        };
        let expected = spec.spaces.t_max - last.observation.turn_number() + 2;
        let rolled = imagine_rollout(&params, &rm, &start, &policy, 20, &mut rng).unwrap();
        assert_eq!(rolled.len(), expected);
    }

    #[test]
    fn imagined_second_queries_match_the_environment_within_total_variation() {
        let spec = default_spec();
        let params = spec_to_world_model(&spec);
        let policy = PolicyParams::new_zero(spec.spaces.clone());
        let mut rng = rng_for(32, "tv-setup", 0);
        let rm = RewardModelParams::random(spec.spaces.clone(), 0.3, &mut rng);
        let rollouts = 10_000usize;
        let u = spec.spaces.n_user_templates();
        let mut env_counts = vec![0usize; u];
        let mut model_counts = vec![0usize; u];
        let mut model_rng = rng_for(32, "tv-model", 0);
        for episode in 0..rollouts as u64 {
            let (state, observation) = env_reset(&spec, episode).unwrap();
            let mut env_rng = rng_for(32, "tv-env", episode);
            let (action, _) = act(
                &policy,
                &State { observation: observation.clone(), belief: BeliefPosterior::uniform(63) },
                &mut env_rng,
            )
            .unwrap();
            let (_, next_obs, _, _) = env_step(&spec, &state, &action, &mut env_rng).unwrap();
            env_counts[next_obs.current_query.template_id] += 1;

            let start = State {
                observation: observation.clone(),
                belief: true_posterior(&spec, &observation, &[]).unwrap(),
            };
            let imagined = imagine_rollout(&params, &rm, &start, &policy, 2, &mut model_rng).unwrap();
            assert_eq!(imagined.len(), 2);
            model_counts[imagined.turns[1].observation.current_query.template_id] += 1;
        }
        let tv: f64 = env_counts
            .iter()
            .zip(&model_counts)
            .map(|(&e, &m)| ((e as f64 - m as f64) / rollouts as f64).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv <= 0.05, "total variation {tv}");
    }

    #[test]
    fn uniform_model_predictive_loglik_is_the_uniform_template_rate() {
        let spec = default_spec();
        let params = WorldModelParams::new_zero(spec.spaces.clone());
        let dataset: Vec<Trajectory> = (0..3).map(|s| roll_episode(&spec, s, 4)).collect();
        let loglik = next_query_predictive_loglik(&params, &dataset).unwrap();
        assert_abs_diff_eq!(loglik, -(21f64.ln()), epsilon = 1e-12);
    }

    #[test]
    fn predictive_loglik_rejects_windows_and_empty_input() {
        let spec = default_spec();
        let params = WorldModelParams::new_zero(spec.spaces.clone());
        assert!(matches!(
            next_query_predictive_loglik(&params, &[]),
            Err(Error::Precondition(_))
        ));
        let full = roll_episode(&spec, 3, 4);
        if full.len() >= 2 {
            let window = full.window(1, 2);
            assert!(matches!(
                next_query_predictive_loglik(&params, &[window]),
                Err(Error::InvalidArgument(_))
            ));
        }
    }

    #[test]
    fn spec_copied_model_reproduces_exact_zero_probabilities() {
        let spec = one_hot_spec();
        let params = spec_to_world_model(&spec);
        for b in 0..63 {
            let probs = softmax(params.emission_logits.row(b));
            for (u, &p) in probs.iter().enumerate() {
                let spec_p = spec.emission_row(b)[u];
                if spec_p == 0.0 {
                    assert_eq!(p, 0.0, "emission[{b}][{u}] should stay exactly zero");
                } else {
                    assert_relative_eq!(p, spec_p, max_relative = 1e-12);
                }
            }
        }
        assert_eq!(params.initial_logits.iter().filter(|&&l| l == LOG_FLOOR).count(), 21);
    }

    #[test]
    fn spec_copied_filter_matches_the_environment_oracle() {
        let spec = default_spec();
        let params = spec_to_world_model(&spec);
        for seed in 0..5 {
            let trajectory = roll_episode(&spec, 400 + seed, 8);
            let model_side = filtered_posteriors(&params, &trajectory).unwrap();
            let oracle = true_posterior_sequence(&spec, &trajectory).unwrap();
            for (ours, truth) in model_side.iter().zip(&oracle) {
                for (&a, &b) in ours.probs().iter().zip(truth.probs()) {
                    assert_abs_diff_eq!(a, b, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn model_filter_requires_an_episode_opening() {
        let spec = default_spec();
        let params = spec_to_world_model(&spec);
        let full = roll_episode(&spec, 41, 4);
        assert!(full.len() >= 2, "episode ended too early for a window fixture");
        assert!(matches!(
            filtered_posteriors(&params, &full.window(1, 2)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn parameters_round_trip_through_json_and_default_the_ablation_flag() {
        let spec = default_spec();
        let mut rng = rng_for(34, "serde", 0);
        let params = WorldModelParams::random(spec.spaces.clone(), 0.9, &mut rng);
        let json = serde_json::to_string(&params).unwrap();
        let back: WorldModelParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, params);

        let mut value: serde_json::Value = serde_json::from_str(&json).unwrap();
        value.as_object_mut().unwrap().remove("belief_conditioning");
        let legacy: WorldModelParams = serde_json::from_value(value).unwrap();
        assert!(legacy.belief_conditioning);
    }

    #[test]
    fn window_bound_uses_the_previous_exchange_as_its_prior() {
        let spec = default_spec();
        let mut rng = rng_for(35, "window-prior", 0);
        let params = WorldModelParams::random(spec.spaces.clone(), 0.7, &mut rng);
        let full = roll_episode(&spec, 90, 5);
        assert!(full.len() >= 4, "episode ended too early for a window fixture");
        let window = full.window(2, 2);
        let breakdown = elbo(&params, &window).unwrap();
        assert!(breakdown.total.is_finite());
        assert!(breakdown.kl >= -1e-12);

        let tables = LogTables::from_params(&params);
        let q0 = infer_belief(&params, &full.turns[1].observation);
        let q1 = infer_belief(&params, &window.turns[0].observation);
        let q2 = infer_belief(&params, &window.turns[1].observation);
        let a0 = full.turns[1].action.flat_index(&spec.spaces);
        let a1 = window.turns[0].action.flat_index(&spec.spaces);
        let ne1 = neg_entropy(q1.probs());
        let ne2 = neg_entropy(q2.probs());
        let edge = |prev: &BeliefPosterior, next: &BeliefPosterior, ne: f64, a: usize| -> f64 {
            prev.probs()
                .iter()
                .enumerate()
                .map(|(bp, &w)| {
                    weighted(w, kl_against_log_row(next.probs(), ne, tables.transition_row(bp, a)))
                })
                .sum()
        };
        let expected = edge(&q0, &q1, ne1, a0) + edge(&q1, &q2, ne2, a1);
        assert_abs_diff_eq!(breakdown.kl, expected, epsilon = 1e-9);
    }

    #[test]
    fn belief_ablated_gradient_leaves_inference_weights_untouched() {
        let spec = default_spec();
        let mut rng = rng_for(36, "ablated-grad", 0);
        let mut params = WorldModelParams::random(spec.spaces.clone(), 0.8, &mut rng);
        params.belief_conditioning = false;
        let trajectory = roll_episode(&spec, 12, 4);
        let gradient = elbo_gradient(&params, &trajectory).unwrap();
        assert!(gradient.inference_logits.data.iter().all(|&g| g == 0.0));
        assert!(gradient.emission_logits.data.iter().any(|&g| g != 0.0));
    }
}
