//! POMDP vocabulary shared by every module: latent beliefs with a canonical
//! flat index, belief posteriors, templated utterances, observations, actions,
//! states, and trajectories.
//!
//! The hidden user state is the triple (emotion, sentiment bin, intention)
//! with flat index `((emotion·V)+sentiment)·G + intention`, so distributions
//! over beliefs are plain vectors of length E·V·G. Utterances are drawn from a
//! finite template table (user-query templates first, then one response
//! template per (strategy, variant) pair), which makes the observation model
//! an exact categorical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which side of the dialogue produced an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Agent,
}

/// Role of a template in the table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum TemplateKind {
    /// A user query, tagged with the emotion (and sentiment bin) it signals.
    UserQuery { emotion: usize, sentiment: usize },
    /// An agent response variant for one strategy.
    AgentResponse { strategy: usize, variant: usize },
}

/// One entry of the template table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub tokens: Vec<u32>,
    pub text: String,
    pub kind: TemplateKind,
}

/// The finite utterance vocabulary: user-query templates at indices
/// `0..user_count`, followed by agent response templates in
/// (strategy, variant) order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateTable {
    pub templates: Vec<Template>,
}

impl TemplateTable {
    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn get(&self, template_id: usize) -> Result<&Template> {
        self.templates
            .get(template_id)
            .ok_or_else(|| Error::InvalidArgument(format!("template id {template_id} out of range")))
    }

    /// Number of user-query templates (they occupy the table prefix).
    pub fn user_count(&self) -> usize {
        self.templates
            .iter()
            .take_while(|t| matches!(t.kind, TemplateKind::UserQuery { .. }))
            .count()
    }

    /// Template id holding the given text, if any (exact match).
    pub fn find_text(&self, text: &str) -> Option<usize> {
        self.templates.iter().position(|t| t.text == text)
    }
}

/// The full discrete geometry of the problem: label sets, action space,
/// template table, vocabulary size, and episode cap. Immutable once built;
/// every parameter object and spec carries a copy so serialized artifacts are
/// self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spaces {
    pub emotion_labels: Vec<String>,
    pub sentiment_labels: Vec<String>,
    /// Strictly increasing bin centers in [0,1]; the continuous sentiment
    /// score is recovered as the bin-center expectation under a posterior.
    pub sentiment_centers: Vec<f64>,
    pub intention_labels: Vec<String>,
    /// Index of the absorbing intention that ends an episode, if any.
    pub terminal_intention: Option<usize>,
    pub strategy_labels: Vec<String>,
    /// Response template variants per strategy (A_r).
    pub responses_per_strategy: usize,
    /// Token vocabulary size (W).
    pub vocab_size: u32,
    /// Maximum dialogue turns per episode (T_max).
    pub t_max: usize,
    pub template_table: TemplateTable,
}

impl Spaces {
    pub fn n_emotions(&self) -> usize {
        self.emotion_labels.len()
    }

    pub fn n_sentiments(&self) -> usize {
        self.sentiment_centers.len()
    }

    pub fn n_intentions(&self) -> usize {
        self.intention_labels.len()
    }

    pub fn n_strategies(&self) -> usize {
        self.strategy_labels.len()
    }

    /// Size of the latent belief space, E·V·G.
    pub fn n_beliefs(&self) -> usize {
        self.n_emotions() * self.n_sentiments() * self.n_intentions()
    }

    /// Size of the flat action space, A_s·A_r.
    pub fn n_actions(&self) -> usize {
        self.n_strategies() * self.responses_per_strategy
    }

    pub fn n_templates(&self) -> usize {
        self.template_table.len()
    }

    pub fn n_user_templates(&self) -> usize {
        self.template_table.user_count()
    }

    /// Template id of the response (strategy, variant) pair.
    pub fn response_template_id(&self, strategy: usize, variant: usize) -> usize {
        self.n_user_templates() + strategy * self.responses_per_strategy + variant
    }

    /// Enumerate all latent beliefs in flat-index order.
    pub fn beliefs(&self) -> impl Iterator<Item = LatentBelief> + '_ {
        (0..self.n_beliefs()).map(|i| self.unflatten(i))
    }

    /// Inverse of [`LatentBelief::flat_index`].
    pub fn unflatten(&self, flat: usize) -> LatentBelief {
        let g = self.n_intentions();
        let v = self.n_sentiments();
        LatentBelief {
            emotion: flat / (v * g),
            sentiment: (flat / g) % v,
            intention: flat % g,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.emotion_labels.is_empty()
            || self.sentiment_centers.is_empty()
            || self.intention_labels.is_empty()
            || self.strategy_labels.is_empty()
            || self.responses_per_strategy == 0
        {
            return Err(Error::Validation("empty label set".into()));
        }
        if self.sentiment_labels.len() != self.sentiment_centers.len() {
            return Err(Error::Validation("sentiment labels/centers length mismatch".into()));
        }
        if !self
            .sentiment_centers
            .windows(2)
            .all(|w| w[0] < w[1])
        {
            return Err(Error::Validation("sentiment bin centers must strictly increase".into()));
        }
        if self
            .sentiment_centers
            .iter()
            .any(|&c| !(0.0..=1.0).contains(&c))
        {
            return Err(Error::Validation("sentiment bin centers must lie in [0,1]".into()));
        }
        if let Some(t) = self.terminal_intention {
            if t >= self.n_intentions() {
                return Err(Error::Validation("terminal intention out of range".into()));
            }
        }
        let user = self.n_user_templates();
        let expected = user + self.n_actions();
        if self.template_table.len() != expected {
            return Err(Error::Validation(format!(
                "template table has {} entries, expected {} (user) + {} (agent)",
                self.template_table.len(),
                user,
                self.n_actions()
            )));
        }
        for (id, template) in self.template_table.templates.iter().enumerate() {
            if template.tokens.is_empty() {
                return Err(Error::Validation(format!("template {id} has no tokens")));
            }
            if template.tokens.iter().any(|&t| t >= self.vocab_size) {
                return Err(Error::Validation(format!("template {id} has out-of-vocab token")));
            }
            match template.kind {
                TemplateKind::UserQuery { emotion, sentiment } => {
                    if id >= user {
                        return Err(Error::Validation(format!(
                            "user template {id} after agent block start"
                        )));
                    }
                    if emotion >= self.n_emotions() || sentiment >= self.n_sentiments() {
                        return Err(Error::Validation(format!("template {id} tag out of range")));
                    }
                }
                TemplateKind::AgentResponse { strategy, variant } => {
                    if strategy >= self.n_strategies() || variant >= self.responses_per_strategy {
                        return Err(Error::Validation(format!("template {id} tag out of range")));
                    }
                    if id != self.response_template_id(strategy, variant) {
                        return Err(Error::Validation(format!(
                            "agent template {id} not in canonical (strategy, variant) position"
                        )));
                    }
                }
            }
        }
        let mut texts: Vec<&str> = self
            .template_table
            .templates
            .iter()
            .map(|t| t.text.as_str())
            .collect();
        texts.sort_unstable();
        if texts.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Validation("duplicate template texts".into()));
        }
        Ok(())
    }
}

/// A concrete hidden user state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentBelief {
    pub emotion: usize,
    pub sentiment: usize,
    pub intention: usize,
}

impl LatentBelief {
    pub fn new(spaces: &Spaces, emotion: usize, sentiment: usize, intention: usize) -> Result<Self> {
        if emotion >= spaces.n_emotions()
            || sentiment >= spaces.n_sentiments()
            || intention >= spaces.n_intentions()
        {
            return Err(Error::InvalidArgument(format!(
                "latent component out of range: ({emotion}, {sentiment}, {intention})"
            )));
        }
        Ok(Self { emotion, sentiment, intention })
    }

    /// Canonical flat index `((emotion·V)+sentiment)·G + intention`.
    pub fn flat_index(&self, spaces: &Spaces) -> usize {
        (self.emotion * spaces.n_sentiments() + self.sentiment) * spaces.n_intentions()
            + self.intention
    }
}

/// A probability simplex over all latent beliefs, in flat-index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BeliefPosterior {
    probs: Vec<f64>,
}

impl BeliefPosterior {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    /// Normalize non-negative weights into a posterior.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::InvalidArgument(
                "posterior weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("posterior weights sum to zero".into()));
        }
        Ok(Self {
            probs: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    /// Wrap an already-normalized distribution, verifying the simplex invariants.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::InvalidArgument(
                "posterior entries must be finite and non-negative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "posterior sums to {total}, outside 1 ± {}",
                Self::SUM_TOLERANCE
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(n: usize, index: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Flat index of the most probable belief (lowest index wins ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Marginal distribution over emotions.
    pub fn emotion_marginal(&self, spaces: &Spaces) -> Vec<f64> {
        let mut out = vec![0.0; spaces.n_emotions()];
        for (i, &p) in self.probs.iter().enumerate() {
            out[spaces.unflatten(i).emotion] += p;
        }
        out
    }

    /// Marginal distribution over sentiment bins.
    pub fn sentiment_marginal(&self, spaces: &Spaces) -> Vec<f64> {
        let mut out = vec![0.0; spaces.n_sentiments()];
        for (i, &p) in self.probs.iter().enumerate() {
            out[spaces.unflatten(i).sentiment] += p;
        }
        out
    }

    /// Marginal distribution over intentions.
    pub fn intention_marginal(&self, spaces: &Spaces) -> Vec<f64> {
        let mut out = vec![0.0; spaces.n_intentions()];
        for (i, &p) in self.probs.iter().enumerate() {
            out[spaces.unflatten(i).intention] += p;
        }
        out
    }

    /// Expected sentiment score: bin-center expectation under the posterior.
    pub fn expected_sentiment_score(&self, spaces: &Spaces) -> f64 {
        self.sentiment_marginal(spaces)
            .iter()
            .zip(&spaces.sentiment_centers)
            .map(|(p, c)| p * c)
            .sum()
    }
}

/// A templated utterance; `token_ids` always equals the template's tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub template_id: usize,
    pub token_ids: Vec<u32>,
}

impl Utterance {
    pub fn from_template(spaces: &Spaces, template_id: usize) -> Result<Self> {
        let template = spaces.template_table.get(template_id)?;
        Ok(Self {
            template_id,
            token_ids: template.tokens.clone(),
        })
    }
}

/// One history entry: who spoke, and what.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub speaker: Speaker,
    pub utterance: Utterance,
}

/// What the agent sees: the alternating dialogue history plus the user's
/// current query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub history: Vec<HistoryEntry>,
    pub current_query: Utterance,
}

impl Observation {
    /// An observation at dialogue start: empty history, one user query.
    pub fn opening(current_query: Utterance) -> Self {
        Self {
            history: Vec::new(),
            current_query,
        }
    }

    /// Append the completed (query, response) exchange and install the next
    /// user query. Fails when the history would exceed 2·T_max entries.
    pub fn extend_history(&self, spaces: &Spaces, action: &Action, next_query: Utterance) -> Result<Self> {
        if self.history.len() + 2 > 2 * spaces.t_max {
            return Err(Error::Capacity(format!(
                "history of {} entries cannot take another exchange (t_max = {})",
                self.history.len(),
                spaces.t_max
            )));
        }
        let mut history = self.history.clone();
        history.push(HistoryEntry {
            speaker: Speaker::User,
            utterance: self.current_query.clone(),
        });
        history.push(HistoryEntry {
            speaker: Speaker::Agent,
            utterance: action.response.clone(),
        });
        Ok(Self {
            history,
            current_query: next_query,
        })
    }

    /// 1-based dialogue turn of the current query.
    pub fn turn_number(&self) -> usize {
        self.history.len() / 2 + 1
    }

    /// All user query templates seen so far, the current query last.
    pub fn user_query_templates(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .history
            .iter()
            .filter(|e| e.speaker == Speaker::User)
            .map(|e| e.utterance.template_id)
            .collect();
        out.push(self.current_query.template_id);
        out
    }

    /// Strategy of the most recent agent response, if any.
    pub fn last_agent_strategy(&self, spaces: &Spaces) -> Option<usize> {
        let last_agent = self.history.iter().rev().find(|e| e.speaker == Speaker::Agent)?;
        match spaces.template_table.get(last_agent.utterance.template_id).ok()?.kind {
            TemplateKind::AgentResponse { strategy, .. } => Some(strategy),
            TemplateKind::UserQuery { .. } => None,
        }
    }

    /// Undo the most recent exchange: the observation as it was one turn
    /// earlier, together with the action taken then. `None` at dialogue start.
    pub fn previous_exchange(&self, spaces: &Spaces) -> Option<(Observation, Action)> {
        if self.history.len() < 2 {
            return None;
        }
        let n = self.history.len();
        let prev_query = &self.history[n - 2];
        let response = &self.history[n - 1];
        debug_assert_eq!(prev_query.speaker, Speaker::User);
        debug_assert_eq!(response.speaker, Speaker::Agent);
        let action = Action::from_response(spaces, response.utterance.clone()).ok()?;
        Some((
            Observation {
                history: self.history[..n - 2].to_vec(),
                current_query: prev_query.utterance.clone(),
            },
            action,
        ))
    }

    pub fn validate(&self, spaces: &Spaces) -> Result<()> {
        if self.history.len() > 2 * spaces.t_max {
            return Err(Error::Capacity(format!(
                "history has {} entries, cap is {}",
                self.history.len(),
                2 * spaces.t_max
            )));
        }
        for (i, entry) in self.history.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::User } else { Speaker::Agent };
            if entry.speaker != expected {
                return Err(Error::Validation(format!(
                    "history entry {i} has speaker {:?}, expected {:?}",
                    entry.speaker, expected
                )));
            }
            validate_utterance(spaces, &entry.utterance)?;
            let kind = spaces.template_table.get(entry.utterance.template_id)?.kind;
            let kind_ok = match entry.speaker {
                Speaker::User => matches!(kind, TemplateKind::UserQuery { .. }),
                Speaker::Agent => matches!(kind, TemplateKind::AgentResponse { .. }),
            };
            if !kind_ok {
                return Err(Error::Validation(format!(
                    "history entry {i}: template role does not match speaker"
                )));
            }
        }
        if self.history.len() % 2 != 0 {
            return Err(Error::Validation("history must hold complete exchanges".into()));
        }
        validate_utterance(spaces, &self.current_query)?;
        let kind = spaces.template_table.get(self.current_query.template_id)?.kind;
        if !matches!(kind, TemplateKind::UserQuery { .. }) {
            return Err(Error::Validation("current query must be a user template".into()));
        }
        Ok(())
    }
}

fn validate_utterance(spaces: &Spaces, utterance: &Utterance) -> Result<()> {
    let template = spaces.template_table.get(utterance.template_id)?;
    if utterance.token_ids != template.tokens {
        return Err(Error::Validation(format!(
            "utterance tokens do not match template {}",
            utterance.template_id
        )));
    }
    Ok(())
}

/// An agent action: a dialogue strategy plus one of its response templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub strategy: usize,
    pub response: Utterance,
}

impl Action {
    /// Build the action for a flat index over A_s·A_r.
    pub fn from_flat(spaces: &Spaces, flat: usize) -> Result<Self> {
        if flat >= spaces.n_actions() {
            return Err(Error::InvalidArgument(format!(
                "flat action {flat} out of range (n_actions = {})",
                spaces.n_actions()
            )));
        }
        let strategy = flat / spaces.responses_per_strategy;
        let variant = flat % spaces.responses_per_strategy;
        let response = Utterance::from_template(spaces, spaces.response_template_id(strategy, variant))?;
        Ok(Self { strategy, response })
    }

    /// Recover the action from a response utterance (its template encodes
    /// both strategy and variant).
    pub fn from_response(spaces: &Spaces, response: Utterance) -> Result<Self> {
        match spaces.template_table.get(response.template_id)?.kind {
            TemplateKind::AgentResponse { strategy, .. } => Ok(Self { strategy, response }),
            TemplateKind::UserQuery { .. } => Err(Error::InvalidArgument(
                "response utterance uses a user-query template".into(),
            )),
        }
    }

    /// Canonical flat index `strategy · A_r + variant`.
    pub fn flat_index(&self, spaces: &Spaces) -> usize {
        let variant = match spaces
            .template_table
            .get(self.response.template_id)
            .map(|t| t.kind)
        {
            Ok(TemplateKind::AgentResponse { variant, .. }) => variant,
            _ => 0,
        };
        self.strategy * spaces.responses_per_strategy + variant
    }
}

/// The policy's input: observation plus inferred belief posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub observation: Observation,
    pub belief: BeliefPosterior,
}

/// One dialogue turn as stored in the replay buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub observation: Observation,
    pub belief: BeliefPosterior,
    pub action: Action,
    pub reward: f64,
    /// Ground-truth latent; populated only by the synthetic environment.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub true_latent: Option<LatentBelief>,
}

/// A time-ordered sequence of turns with a terminal flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub turns: Vec<TurnRecord>,
    /// Whether the episode ended by itself (absorbing intention or T_max)
    /// rather than by truncation.
    pub terminated: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// Sum of recorded rewards (the undiscounted episode return).
    pub fn total_reward(&self) -> f64 {
        self.turns.iter().map(|t| t.reward).sum()
    }

    /// Contiguous sub-trajectory of up to `len` turns starting at `start`.
    /// Chaining still holds because consecutive turns of the parent chain.
    pub fn window(&self, start: usize, len: usize) -> Trajectory {
        let end = (start + len).min(self.turns.len());
        Trajectory {
            turns: self.turns[start..end].to_vec(),
            terminated: self.terminated && end == self.turns.len(),
        }
    }

    /// Validate per-turn contents plus the chaining invariant:
    /// `turns[t+1].observation` extends `turns[t].observation` by the turn's
    /// exchange.
    pub fn validate(&self, spaces: &Spaces) -> Result<()> {
        if self.turns.is_empty() || self.turns.len() > spaces.t_max {
            return Err(Error::Validation(format!(
                "trajectory length {} outside 1..={}",
                self.turns.len(),
                spaces.t_max
            )));
        }
        for turn in &self.turns {
            turn.observation.validate(spaces)?;
            if !turn.reward.is_finite() {
                return Err(Error::Validation("non-finite reward".into()));
            }
        }
        for pair in self.turns.windows(2) {
            let expected = pair[0].observation.extend_history(
                spaces,
                &pair[0].action,
                pair[1].observation.current_query.clone(),
            )?;
            if expected != pair[1].observation {
                return Err(Error::Validation("trajectory observations do not chain".into()));
            }
        }
        Ok(())
    }
}

/// Default label sets: 7 emotions, 3 sentiment bins, 3 intentions,
/// 4 strategies. The template table is filled in by the environment
/// generator.
pub fn default_spaces_without_templates() -> Spaces {
    Spaces {
        emotion_labels: [
            "no-emotion",
            "happiness",
            "surprise",
            "fear",
            "disgust",
            "sadness",
            "anger",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        sentiment_labels: ["negative", "neutral", "positive"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        sentiment_centers: vec![0.0, 0.5, 1.0],
        intention_labels: ["seek-information", "vent", "close-conversation"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        terminal_intention: Some(2),
        strategy_labels: ["inform", "question", "directive", "commissive"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        responses_per_strategy: 4,
        vocab_size: 64,
        t_max: 8,
        template_table: TemplateTable { templates: Vec::new() },
    }
}
