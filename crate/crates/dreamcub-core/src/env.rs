//! The synthetic dialogue environment: a fully tabular POMDP over the latent
//! user state, with a seeded generator for its distribution tables and exact
//! oracles (filtered posterior, sequence log-likelihood, smoothing
//! conditionals) computed by enumeration over the 63-state belief space.
//!
//! The reward likelihood used by [`exact_loglik`] and the smoothing oracle is
//! the same Gaussian family (mean from the reward table, fixed
//! [`REWARD_SIGMA`]) that the world model trains against, so bound and gap
//! identities can be checked exactly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{gaussian_log_density, log_sum_exp, sample_categorical, Tensor};
use crate::rng::rng_for;
use crate::types::{
    default_spaces_without_templates, Action, BeliefPosterior, LatentBelief, Observation, Spaces,
    Template, TemplateKind, TemplateTable, Trajectory, Utterance,
};

/// Standard deviation of the Gaussian reward likelihood shared by the
/// environment oracles and the world model.
pub const REWARD_SIGMA: f64 = 0.1;

/// Tolerance for distribution-row normalization checks.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// The token vocabulary. Template token ids index into this list.
pub const WORDS: [&str; 64] = [
    "fine", "glad", "wow", "afraid", "gross", "blue", "mad", // emotion words
    "awful", "okay", "great", // sentiment words
    "asking", "venting", "wrapping", // intention words
    "facts", "question", "advice", "promise", // strategy words
    "now", "soon", "today", "later", // response variants
    "i", "feel", "we", // fixed frame words
    "the", "and", "about", "this", "that", "help", "talk", "more", "less", "again", "still",
    "very", "quite", "just", "really", "maybe", "sure", "thanks", "sorry", "please", "right",
    "wrong", "good", "bad", "day", "time", "thing", "way", "here", "there", "home", "work",
    "friend", "family", "plan", "idea", "hope", "rest", "calm", "done",
];

const EMOTION_WORD: usize = 0;
const SENTIMENT_WORD: usize = 7;
const INTENTION_WORD: usize = 10;
const STRATEGY_WORD: usize = 13;
const VARIANT_WORD: usize = 17;
const WORD_I: usize = 21;
const WORD_FEEL: usize = 22;
const WORD_WE: usize = 23;

/// How user-query emissions relate to the latent state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum EmissionMode {
    /// One user template per (emotion, sentiment) pair; `own_mass` of the
    /// probability lands on the latent's own emotion, and within that the
    /// template matching the latent sentiment bin receives
    /// `sentiment_sharpness`. The remainder is uniform over other emotions.
    Informative { own_mass: f64, sentiment_sharpness: f64 },
    /// One user template per latent state; emissions reveal the latent.
    OneHot,
    /// Every user template equally likely regardless of the latent.
    Uniform,
}

/// Seeded recipe for a complete [`EnvSpec`] over the default label sets.
///
/// Emotion is fixed for the whole episode. Sentiment drifts one bin at a time
/// with probability `sentiment_drift_prob`, upward or downward depending on
/// the (strategy, intention) pair. Intention persists, swapping between the
/// non-terminal intentions with probability `intention_swap_prob` and
/// absorbing into close-conversation with a per-strategy probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvGenConfig {
    pub seed: u64,
    pub emission_mode: EmissionMode,
    pub sentiment_drift_prob: f64,
    pub intention_swap_prob: f64,
    /// Mass each non-terminal transition row spreads uniformly over all
    /// non-terminal latents, so every continuation keeps positive probability
    /// and no observed history is ever impossible under the true dynamics.
    pub transition_leak: f64,
    /// Probability that the conversation absorbs into the terminal intention,
    /// per strategy.
    pub close_probs: Vec<f64>,
    /// Initial distribution over sentiment bins.
    pub initial_sentiment: Vec<f64>,
    /// Initial distribution over intentions (terminal entry normally 0).
    pub initial_intention: Vec<f64>,
}

impl Default for EnvGenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            emission_mode: EmissionMode::Informative { own_mass: 0.8, sentiment_sharpness: 0.99 },
            sentiment_drift_prob: 0.25,
            intention_swap_prob: 0.03,
            transition_leak: 0.0,
            close_probs: vec![0.002, 0.002, 0.005, 0.001],
            initial_sentiment: vec![0.25, 0.5, 0.25],
            initial_intention: vec![0.55, 0.45, 0.0],
        }
    }
}

/// Direction the sentiment bin drifts under each strategy: informing and
/// committing comfort the user upward, questioning and directing press down.
/// Sentiment is the only latent the agent steers; intention evolves on its
/// own schedule so the two dimensions stay separately identifiable.
pub fn drift_direction(strategy: usize) -> i64 {
    match strategy {
        0 | 3 => 1,
        _ => -1,
    }
}

impl EnvGenConfig {
    /// The spaces this generator targets, template table included.
    pub fn spaces(&self) -> Spaces {
        let mut spaces = default_spaces_without_templates();
        spaces.template_table = self.build_template_table(&spaces);
        spaces
    }

    fn build_template_table(&self, spaces: &Spaces) -> TemplateTable {
        let mut templates = Vec::new();
        match self.emission_mode {
            EmissionMode::OneHot => {
                for e in 0..spaces.n_emotions() {
                    for v in 0..spaces.n_sentiments() {
                        for g in 0..spaces.n_intentions() {
                            let tokens = vec![
                                WORD_I as u32,
                                WORD_FEEL as u32,
                                (EMOTION_WORD + e) as u32,
                                (SENTIMENT_WORD + v) as u32,
                                (INTENTION_WORD + g) as u32,
                            ];
                            templates.push(Template {
                                text: token_text(&tokens),
                                tokens,
                                kind: TemplateKind::UserQuery { emotion: e, sentiment: v },
                            });
                        }
                    }
                }
            }
            EmissionMode::Informative { .. } | EmissionMode::Uniform => {
                for e in 0..spaces.n_emotions() {
                    for v in 0..spaces.n_sentiments() {
                        let tokens = vec![
                            WORD_I as u32,
                            WORD_FEEL as u32,
                            (EMOTION_WORD + e) as u32,
                            (SENTIMENT_WORD + v) as u32,
                        ];
                        templates.push(Template {
                            text: token_text(&tokens),
                            tokens,
                            kind: TemplateKind::UserQuery { emotion: e, sentiment: v },
                        });
                    }
                }
            }
        }
        for s in 0..spaces.n_strategies() {
            for r in 0..spaces.responses_per_strategy {
                let tokens = vec![WORD_WE as u32, (STRATEGY_WORD + s) as u32, (VARIANT_WORD + r) as u32];
                templates.push(Template {
                    text: token_text(&tokens),
                    tokens,
                    kind: TemplateKind::AgentResponse { strategy: s, variant: r },
                });
            }
        }
        TemplateTable { templates }
    }

    /// Build the full environment specification.
    pub fn generate(&self) -> Result<EnvSpec> {
        let spaces = self.spaces();
        if spaces.n_strategies() != self.close_probs.len() {
            return Err(Error::InvalidArgument(
                "close_probs length must match the strategy count".into(),
            ));
        }
        if spaces.n_sentiments() != self.initial_sentiment.len()
            || spaces.n_intentions() != self.initial_intention.len()
        {
            return Err(Error::InvalidArgument(
                "initial distribution lengths must match the label sets".into(),
            ));
        }
        for &p in self
            .close_probs
            .iter()
            .chain(&self.initial_sentiment)
            .chain(&self.initial_intention)
            .chain([&self.sentiment_drift_prob, &self.intention_swap_prob, &self.transition_leak])
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("probability {p} outside [0,1]")));
            }
        }
        let terminal = spaces
            .terminal_intention
            .ok_or_else(|| Error::InvalidArgument("generator requires a terminal intention".into()))?;

        let b_count = spaces.n_beliefs();
        let a_count = spaces.n_actions();
        let u_user = spaces.n_user_templates();

        let sent_total: f64 = self.initial_sentiment.iter().sum();
        let int_total: f64 = self.initial_intention.iter().sum();
        let mut initial_dist = vec![0.0; b_count];
        for b in spaces.beliefs() {
            initial_dist[b.flat_index(&spaces)] = (1.0 / spaces.n_emotions() as f64)
                * (self.initial_sentiment[b.sentiment] / sent_total)
                * (self.initial_intention[b.intention] / int_total);
        }

        let non_terminal: Vec<usize> = spaces
            .beliefs()
            .filter(|b| b.intention != terminal)
            .map(|b| b.flat_index(&spaces))
            .collect();
        let mut transition = Tensor::zeros(vec![b_count, a_count, b_count]);
        for b in spaces.beliefs() {
            let leak = if b.intention == terminal { 0.0 } else { self.transition_leak };
            for s in 0..spaces.n_strategies() {
                for r in 0..spaces.responses_per_strategy {
                    let a = s * spaces.responses_per_strategy + r;
                    let row = transition.row_mut(b.flat_index(&spaces) * a_count + a);
                    let sent_kernel = self.sentiment_kernel(&spaces, b.sentiment, s);
                    let int_kernel = self.intention_kernel(&spaces, b.intention, s, terminal);
                    for (v2, &pv) in sent_kernel.iter().enumerate() {
                        for (g2, &pg) in int_kernel.iter().enumerate() {
                            let next = LatentBelief { emotion: b.emotion, sentiment: v2, intention: g2 };
                            row[next.flat_index(&spaces)] = (1.0 - leak) * pv * pg;
                        }
                    }
                    for &cell in &non_terminal {
                        row[cell] += leak / non_terminal.len() as f64;
                    }
                }
            }
        }

        let mut emission = Tensor::zeros(vec![b_count, u_user]);
        for b in spaces.beliefs() {
            let row = emission.row_mut(b.flat_index(&spaces));
            match self.emission_mode {
                EmissionMode::OneHot => row[b.flat_index(&spaces)] = 1.0,
                EmissionMode::Uniform => row.fill(1.0 / u_user as f64),
                EmissionMode::Informative { own_mass, sentiment_sharpness } => {
                    let v_count = spaces.n_sentiments() as f64;
                    let off_emotion =
                        (1.0 - own_mass) / ((spaces.n_emotions() as f64 - 1.0) * v_count);
                    for (u, template) in spaces.template_table.templates[..u_user].iter().enumerate() {
                        let TemplateKind::UserQuery { emotion, sentiment } = template.kind else {
                            continue;
                        };
                        row[u] = if emotion == b.emotion {
                            if sentiment == b.sentiment {
                                own_mass * sentiment_sharpness
                            } else {
                                own_mass * (1.0 - sentiment_sharpness) / (v_count - 1.0)
                            }
                        } else {
                            off_emotion
                        };
                    }
                }
            }
        }

        let reward_table: Vec<f64> = (0..b_count)
            .map(|i| spaces.sentiment_centers[spaces.unflatten(i).sentiment])
            .collect();

        let spec = EnvSpec { spaces, initial_dist, transition, emission, reward_table, seed: self.seed };
        spec.validate()?;
        Ok(spec)
    }

    fn sentiment_kernel(&self, spaces: &Spaces, v: usize, strategy: usize) -> Vec<f64> {
        let mut kernel = vec![0.0; spaces.n_sentiments()];
        let target = v as i64 + drift_direction(strategy);
        if target < 0 || target >= spaces.n_sentiments() as i64 {
            kernel[v] = 1.0;
        } else {
            kernel[v] = 1.0 - self.sentiment_drift_prob;
            kernel[target as usize] += self.sentiment_drift_prob;
        }
        kernel
    }

    fn intention_kernel(&self, spaces: &Spaces, g: usize, strategy: usize, terminal: usize) -> Vec<f64> {
        let mut kernel = vec![0.0; spaces.n_intentions()];
        if g == terminal {
            kernel[terminal] = 1.0;
            return kernel;
        }
        let close = self.close_probs[strategy];
        kernel[terminal] = close;
        let others: Vec<usize> =
            (0..spaces.n_intentions()).filter(|&g2| g2 != terminal && g2 != g).collect();
        kernel[g] = (1.0 - close) * (1.0 - self.intention_swap_prob);
        for &g2 in &others {
            kernel[g2] = (1.0 - close) * self.intention_swap_prob / others.len() as f64;
        }
        kernel
    }
}

fn token_text(tokens: &[u32]) -> String {
    tokens.iter().map(|&t| WORDS[t as usize]).collect::<Vec<_>>().join(" ")
}

/// Complete tabular description of the environment: all distributions plus
/// the spaces (template table included), serializable as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub spaces: Spaces,
    /// Distribution over the initial latent state, flat-indexed.
    pub initial_dist: Vec<f64>,
    /// `[belief × action × next belief]` transition probabilities.
    pub transition: Tensor,
    /// `[belief × user template]` emission probabilities.
    pub emission: Tensor,
    /// Reward for each latent state, in [0,1].
    pub reward_table: Vec<f64>,
    pub seed: u64,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        self.spaces.validate()?;
        let b = self.spaces.n_beliefs();
        let a = self.spaces.n_actions();
        let u = self.spaces.n_user_templates();
        if self.initial_dist.len() != b {
            return Err(Error::Validation("initial_dist length mismatch".into()));
        }
        let init_sum: f64 = self.initial_dist.iter().sum();
        if self.initial_dist.iter().any(|&p| !p.is_finite() || p < 0.0)
            || (init_sum - 1.0).abs() > ROW_SUM_TOLERANCE
        {
            return Err(Error::Validation("initial_dist is not a distribution".into()));
        }
        self.transition.validate_shape("transition", &[b, a, b])?;
        self.transition.validate_stochastic("transition", ROW_SUM_TOLERANCE)?;
        self.emission.validate_shape("emission", &[b, u])?;
        self.emission.validate_stochastic("emission", ROW_SUM_TOLERANCE)?;
        if self.reward_table.len() != b {
            return Err(Error::Validation("reward_table length mismatch".into()));
        }
        if self.reward_table.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
            return Err(Error::Validation("reward_table values must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// Transition distribution over next latents for (belief, action).
    pub fn transition_row(&self, belief: usize, action: usize) -> &[f64] {
        self.transition.row(belief * self.spaces.n_actions() + action)
    }

    /// Emission distribution over user templates for a latent.
    pub fn emission_row(&self, belief: usize) -> &[f64] {
        self.emission.row(belief)
    }
}

/// Full ground-truth state of one running episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub current_latent: LatentBelief,
    pub observation_so_far: Observation,
    /// Number of agent actions taken so far.
    pub turn_count: usize,
}

impl EnvState {
    /// Whether the episode can no longer be stepped.
    pub fn is_done(&self, spaces: &Spaces) -> bool {
        self.turn_count >= spaces.t_max
            || Some(self.current_latent.intention) == spaces.terminal_intention
    }
}

/// Start an episode: sample the initial latent, emit the first user query.
/// Deterministic given `rng_seed`.
pub fn env_reset(spec: &EnvSpec, rng_seed: u64) -> Result<(EnvState, Observation)> {
    let mut rng = rng_for(rng_seed, "env-reset", 0);
    let latent_flat = sample_categorical(&mut rng, &spec.initial_dist);
    let query_template = sample_categorical(&mut rng, spec.emission_row(latent_flat));
    let observation = Observation::opening(Utterance::from_template(&spec.spaces, query_template)?);
    let state = EnvState {
        current_latent: spec.spaces.unflatten(latent_flat),
        observation_so_far: observation.clone(),
        turn_count: 0,
    };
    Ok((state, observation))
}

/// Advance one turn: sample the next latent from the transition row, emit the
/// next user query from it, and pay `reward_table[next latent]`. The episode
/// is done when the turn budget is spent or the intention absorbs.
pub fn env_step<R: Rng>(
    spec: &EnvSpec,
    state: &EnvState,
    action: &Action,
    rng: &mut R,
) -> Result<(EnvState, Observation, f64, bool)> {
    if state.is_done(&spec.spaces) {
        return Err(Error::State("cannot step a finished episode".into()));
    }
    let b = state.current_latent.flat_index(&spec.spaces);
    let a = action.flat_index(&spec.spaces);
    let next_flat = sample_categorical(rng, spec.transition_row(b, a));
    let query_template = sample_categorical(rng, spec.emission_row(next_flat));
    let next_query = Utterance::from_template(&spec.spaces, query_template)?;
    let observation = state.observation_so_far.extend_history(&spec.spaces, action, next_query)?;
    let next_state = EnvState {
        current_latent: spec.spaces.unflatten(next_flat),
        observation_so_far: observation.clone(),
        turn_count: state.turn_count + 1,
    };
    let reward = spec.reward_table[next_flat];
    let done = next_state.is_done(&spec.spaces);
    Ok((next_state, observation, reward, done))
}

/// Stateful wrapper around [`env_reset`]/[`env_step`] that owns the episode
/// rng and counts real environment steps (the counter backs the guarantee
/// that imagination-phase training never touches the environment).
#[derive(Debug, Clone)]
pub struct SyntheticEnv {
    spec: EnvSpec,
    state: Option<EnvState>,
    rng: Option<ChaCha8Rng>,
    steps_taken: u64,
}

impl SyntheticEnv {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, state: None, rng: None, steps_taken: 0 })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// Begin a fresh episode with its own derived rng stream.
    pub fn reset(&mut self, episode_seed: u64) -> Result<Observation> {
        let (state, observation) = env_reset(&self.spec, episode_seed)?;
        self.rng = Some(rng_for(episode_seed, "env-steps", 0));
        self.state = Some(state);
        Ok(observation)
    }

    pub fn step(&mut self, action: &Action) -> Result<(Observation, f64, bool)> {
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| Error::State("step before reset".into()))?;
        let rng = self.rng.as_mut().expect("rng exists whenever state does");
        let (next_state, observation, reward, done) = env_step(&self.spec, state, action, rng)?;
        self.steps_taken += 1;
        self.state = Some(next_state);
        Ok((observation, reward, done))
    }

    /// Ground-truth state of the running episode, if one is active.
    pub fn current_state(&self) -> Option<&EnvState> {
        self.state.as_ref()
    }

    /// Total [`env_step`] calls made through this wrapper.
    pub fn step_count(&self) -> u64 {
        self.steps_taken
    }
}

struct ForwardFilter {
    /// Normalized posterior over latents after each turn's evidence.
    posteriors: Vec<Vec<f64>>,
    /// Accumulated log normalizers = log-likelihood of all evidence.
    loglik: f64,
}

/// Shared forward recursion. `rewards` adds the Gaussian reward factor at
/// each turn; without it the filter conditions on observations only.
fn forward_filter(
    spec: &EnvSpec,
    queries: &[usize],
    action_flats: &[usize],
    rewards: Option<&[f64]>,
) -> Result<ForwardFilter> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no turns to filter".into()));
    }
    if action_flats.len() + 1 != queries.len() {
        return Err(Error::InvalidArgument(format!(
            "{} queries need {} actions, got {}",
            queries.len(),
            queries.len() - 1,
            action_flats.len()
        )));
    }
    if let Some(rs) = rewards {
        if rs.len() != queries.len() {
            return Err(Error::InvalidArgument("one reward per turn required".into()));
        }
    }
    let b_count = spec.spaces.n_beliefs();
    let mut posteriors = Vec::with_capacity(queries.len());
    let mut loglik = 0.0;
    let mut previous: Vec<f64> = Vec::new();
    for (t, &query) in queries.iter().enumerate() {
        let mut log_w = vec![0.0; b_count];
        for b in 0..b_count {
            let prior = if t == 0 {
                spec.initial_dist[b].ln()
            } else {
                let pred: f64 = previous
                    .iter()
                    .enumerate()
                    .map(|(prev, &p)| p * spec.transition_row(prev, action_flats[t - 1])[b])
                    .sum();
                pred.ln()
            };
            let mut w = prior + spec.emission_row(b)[query].ln();
            if let Some(rs) = rewards {
                w += gaussian_log_density(rs[t], spec.reward_table[b], REWARD_SIGMA);
            }
            log_w[b] = w;
        }
        let z = log_sum_exp(&log_w);
        if !z.is_finite() {
            return Err(Error::ImpossibleEvidence(format!(
                "turn {} evidence has zero probability under the spec",
                t + 1
            )));
        }
        loglik += z;
        previous = log_w.iter().map(|&w| (w - z).exp()).collect();
        posteriors.push(previous.clone());
    }
    Ok(ForwardFilter { posteriors, loglik })
}

fn query_and_action_indices(
    spec: &EnvSpec,
    observation: &Observation,
    actions: &[Action],
) -> Result<(Vec<usize>, Vec<usize>)> {
    observation.validate(&spec.spaces)?;
    let queries = observation.user_query_templates();
    if actions.len() + 1 != queries.len() {
        return Err(Error::InvalidArgument(format!(
            "observation with {} queries needs {} actions, got {}",
            queries.len(),
            queries.len() - 1,
            actions.len()
        )));
    }
    let mut flats = Vec::with_capacity(actions.len());
    for (action, entry) in actions.iter().zip(
        observation.history.iter().filter(|e| e.speaker == crate::types::Speaker::Agent),
    ) {
        if action.response.template_id != entry.utterance.template_id {
            return Err(Error::InvalidArgument(
                "action sequence does not match the observation history".into(),
            ));
        }
        flats.push(action.flat_index(&spec.spaces));
    }
    Ok((queries, flats))
}

/// Exact filtered posterior p(b_t | o_{1:t}, a_{1:t-1}) over the latent state
/// given the full observation (its history carries the earlier queries) and
/// the actions taken. Conditions on observations only, not rewards.
pub fn true_posterior(spec: &EnvSpec, observation: &Observation, actions: &[Action]) -> Result<BeliefPosterior> {
    let (queries, flats) = query_and_action_indices(spec, observation, actions)?;
    let filter = forward_filter(spec, &queries, &flats, None)?;
    BeliefPosterior::from_probs(filter.posteriors.last().expect("at least one turn").clone())
}

/// Trajectory oracles pair each turn's reward with a query; a window cut from
/// the middle of an episode carries extra queries in its history and would
/// misalign the two, so they insist on a fresh opening.
fn require_episode_start(trajectory: &Trajectory) -> Result<()> {
    if !trajectory.turns[0].observation.history.is_empty() {
        return Err(Error::InvalidArgument(
            "trajectory must start at an episode opening (empty history)".into(),
        ));
    }
    Ok(())
}

/// Filtered posterior after every turn of a trajectory.
pub fn true_posterior_sequence(spec: &EnvSpec, trajectory: &Trajectory) -> Result<Vec<BeliefPosterior>> {
    trajectory.validate(&spec.spaces)?;
    require_episode_start(trajectory)?;
    let last = trajectory.turns.last().expect("validated non-empty");
    let queries = last.observation.user_query_templates();
    let flats: Vec<usize> =
        trajectory.turns[..trajectory.turns.len() - 1].iter().map(|t| t.action.flat_index(&spec.spaces)).collect();
    let filter = forward_filter(spec, &queries, &flats, None)?;
    filter.posteriors.into_iter().map(BeliefPosterior::from_probs).collect()
}

/// Exact log p(o_{1:T}, r_{1:T} | a_{1:T}) under the spec's tables with the
/// Gaussian reward likelihood attached to each turn's latent. Stabilized by
/// log-sum-exp; the summation order is fixed, so results are bit-reproducible.
pub fn exact_loglik(spec: &EnvSpec, trajectory: &Trajectory) -> Result<f64> {
    trajectory.validate(&spec.spaces)?;
    require_episode_start(trajectory)?;
    let last = trajectory.turns.last().expect("validated non-empty");
    let queries = last.observation.user_query_templates();
    let flats: Vec<usize> =
        trajectory.turns[..trajectory.turns.len() - 1].iter().map(|t| t.action.flat_index(&spec.spaces)).collect();
    let rewards: Vec<f64> = trajectory.turns.iter().map(|t| t.reward).collect();
    let filter = forward_filter(spec, &queries, &flats, Some(&rewards))?;
    Ok(filter.loglik)
}

/// Exact smoothing conditionals for a trajectory: entry `[t][prev]` is
/// p(b_t | b_{t-1} = prev, o_{1:T}, r_{1:T}, a_{1:T}), computed by backward
/// messages over the full evidence; `[0]` has a single prior-conditioned row.
/// A row is `None` when the conditioning event has zero probability.
pub fn smoothing_conditionals(
    spec: &EnvSpec,
    trajectory: &Trajectory,
) -> Result<Vec<Vec<Option<Vec<f64>>>>> {
    trajectory.validate(&spec.spaces)?;
    require_episode_start(trajectory)?;
    let b_count = spec.spaces.n_beliefs();
    let n = trajectory.turns.len();
    let last = trajectory.turns.last().expect("validated non-empty");
    let queries = last.observation.user_query_templates();
    let flats: Vec<usize> = trajectory.turns.iter().map(|t| t.action.flat_index(&spec.spaces)).collect();
    let rewards: Vec<f64> = trajectory.turns.iter().map(|t| t.reward).collect();

    let log_evidence = |t: usize, b: usize| -> f64 {
        spec.emission_row(b)[queries[t]].ln()
            + gaussian_log_density(rewards[t], spec.reward_table[b], REWARD_SIGMA)
    };

    let mut log_beta = vec![vec![0.0; b_count]; n];
    for t in (0..n - 1).rev() {
        for b in 0..b_count {
            let row = spec.transition_row(b, flats[t]);
            let terms: Vec<f64> = (0..b_count)
                .map(|b2| row[b2].ln() + log_evidence(t + 1, b2) + log_beta[t + 1][b2])
                .collect();
            log_beta[t][b] = log_sum_exp(&terms);
        }
    }

    let normalize = |log_w: Vec<f64>| -> Option<Vec<f64>> {
        let z = log_sum_exp(&log_w);
        if z.is_finite() {
            Some(log_w.iter().map(|&w| (w - z).exp()).collect())
        } else {
            None
        }
    };

    let mut out = Vec::with_capacity(n);
    let first: Vec<f64> = (0..b_count)
        .map(|b| spec.initial_dist[b].ln() + log_evidence(0, b) + log_beta[0][b])
        .collect();
    let first = normalize(first)
        .ok_or_else(|| Error::ImpossibleEvidence("trajectory has zero probability".into()))?;
    out.push(vec![Some(first)]);
    for t in 1..n {
        let mut rows = Vec::with_capacity(b_count);
        for prev in 0..b_count {
            let row = spec.transition_row(prev, flats[t - 1]);
            let log_w: Vec<f64> = (0..b_count)
                .map(|b| row[b].ln() + log_evidence(t, b) + log_beta[t][b])
                .collect();
            rows.push(normalize(log_w));
        }
        out.push(rows);
    }
    Ok(out)
}

/// Expected immediate reward of taking `action` under a belief posterior:
/// Σ_b q(b) Σ_b' T(b,a)(b') · reward_table(b').
pub fn expected_next_reward(spec: &EnvSpec, posterior: &BeliefPosterior, action: &Action) -> f64 {
    let a = action.flat_index(&spec.spaces);
    posterior
        .probs()
        .iter()
        .enumerate()
        .map(|(b, &q)| {
            q * spec
                .transition_row(b, a)
                .iter()
                .zip(&spec.reward_table)
                .map(|(&p, &r)| p * r)
                .sum::<f64>()
        })
        .sum()
}

/// Exact expected episode return when every turn's action is drawn from a
/// fixed distribution over flat actions, computed by propagating the latent
/// chain (with termination) for up to T_max turns.
pub fn expected_return_under_action_dist(spec: &EnvSpec, action_dist: &[f64]) -> Result<f64> {
    let b_count = spec.spaces.n_beliefs();
    let a_count = spec.spaces.n_actions();
    if action_dist.len() != a_count {
        return Err(Error::InvalidArgument("action distribution length mismatch".into()));
    }
    let total: f64 = action_dist.iter().sum();
    if action_dist.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(Error::InvalidArgument("action distribution must be normalized".into()));
    }
    let terminal = spec.spaces.terminal_intention;
    let alive = |b: usize| Some(spec.spaces.unflatten(b).intention) != terminal;

    let mut mean_kernel = vec![0.0; b_count * b_count];
    for b in 0..b_count {
        for (a, &pa) in action_dist.iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            for (b2, &p) in spec.transition_row(b, a).iter().enumerate() {
                mean_kernel[b * b_count + b2] += pa * p;
            }
        }
    }

    let mut mass: Vec<f64> = spec
        .initial_dist
        .iter()
        .enumerate()
        .map(|(b, &p)| if alive(b) { p } else { 0.0 })
        .collect();
    let mut expected = 0.0;
    for _ in 0..spec.spaces.t_max {
        let mut next = vec![0.0; b_count];
        for (b, &m) in mass.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for b2 in 0..b_count {
                next[b2] += m * mean_kernel[b * b_count + b2];
            }
        }
        expected += next.iter().zip(&spec.reward_table).map(|(&m, &r)| m * r).sum::<f64>();
        for (b, m) in next.iter_mut().enumerate() {
            if !alive(b) {
                *m = 0.0;
            }
        }
        mass = next;
    }
    Ok(expected)
}

/// Convert a spec's probability table row into logits, flooring exact zeros
/// far below any reachable softmax mass.
pub fn probs_to_logits(probs: &[f64]) -> Vec<f64> {
    probs.iter().map(|&p| if p > 0.0 { p.ln() } else { LOG_FLOOR }).collect()
}

/// Logit assigned to zero-probability entries when converting tables;
/// exp(LOG_FLOOR) underflows to exactly 0 in f64 softmax arithmetic.
pub const LOG_FLOOR: f64 = -2000.0;

/// Random fully-supported spec over the given spaces: every initial,
/// transition, and emission probability is strictly positive, so every latent
/// path can explain any evidence and all oracle log-probabilities stay
/// finite. Entries are drawn uniformly from [0.1, 1.0) and normalized, which
/// bounds how extreme any single probability can get.
pub fn random_dense_spec(spaces: &Spaces, seed: u64) -> Result<EnvSpec> {
    let mut rng = rng_for(seed, "dense-spec", 0);
    let b = spaces.n_beliefs();
    let a = spaces.n_actions();
    let u = spaces.n_user_templates();
    let mut draw_row = |len: usize| -> Vec<f64> {
        let raw: Vec<f64> = (0..len).map(|_| rng.random_range(0.1..1.0)).collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / z).collect()
    };
    let initial_dist = draw_row(b);
    let mut transition = Vec::with_capacity(b * a * b);
    for _ in 0..b * a {
        transition.extend(draw_row(b));
    }
    let mut emission = Vec::with_capacity(b * u);
    for _ in 0..b {
        emission.extend(draw_row(u));
    }
    let reward_table = (0..b).map(|_| rng.random_range(0.0..=1.0)).collect();
    let spec = EnvSpec {
        spaces: spaces.clone(),
        initial_dist,
        transition: Tensor::from_data(vec![b, a, b], transition)?,
        emission: Tensor::from_data(vec![b, u], emission)?,
        reward_table,
        seed,
    };
    spec.validate()?;
    Ok(spec)
}
