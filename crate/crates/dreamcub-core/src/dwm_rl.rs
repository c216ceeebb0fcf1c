//! Joint dialogue-world-model / policy training loop.
//!
//! A bounded FIFO replay buffer of real episodes feeds three phases per
//! outer iteration: dynamics (ELBO ascent on buffered windows), behavior
//! (PPO on reward-model-scored imagined rollouts), and interaction (fresh
//! environment episodes appended to the buffer). The loop is preceded by a
//! demonstration corpus, supervised policy pretraining that also freezes
//! the KL reference, and reward-model pretraining on demonstration
//! preferences.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{
    expected_next_reward, expected_return_under_action_dist, true_posterior, EnvSpec, SyntheticEnv,
};
use crate::error::{Error, Result};
use crate::policy::{
    act, ppo_update, train_supervised, CriticParams, PolicyParams, PpoConfig, PpoStats,
    TrainSupervisedConfig,
};
use crate::reward_model::{
    make_preference_pairs, rm_loss, train_rm, RewardModelParams, TrainRmConfig,
};
use crate::rng::{derive_seed, rng_for};
use crate::types::{Action, BeliefPosterior, Spaces, State, Trajectory, TurnRecord};
use crate::world_model::{
    imagine_rollout, infer_belief, train_dynamics, DynamicsConfig, ElboBreakdown, WorldModelParams,
};

/// Bounded FIFO store of complete trajectories. Every push gets a monotone
/// id so evictions can be audited; once full, the oldest trajectory leaves
/// first.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    next_id: u64,
    ids: Vec<u64>,
    trajectories: Vec<Trajectory>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay buffer capacity must be positive".into()));
        }
        Ok(Self { capacity, next_id: 0, ids: Vec::new(), trajectories: Vec::new() })
    }

    /// Append a trajectory, evicting the oldest one when full, and return
    /// the id assigned to the new entry.
    pub fn push(&mut self, trajectory: Trajectory) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.ids.push(id);
        self.trajectories.push(trajectory);
        if self.trajectories.len() > self.capacity {
            self.ids.remove(0);
            self.trajectories.remove(0);
        }
        id
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Ids of the stored trajectories, oldest first.
    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn total_turns(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }
}

/// Draw `batch` windows of `window_len` turns, uniformly over all
/// (trajectory, start-turn) pairs that admit a full-length window; episodes
/// shorter than the window contribute a single start and are truncated at
/// the episode end.
pub fn sample_windows<R: Rng>(
    buffer: &ReplayBuffer,
    batch: usize,
    window_len: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    if batch == 0 || window_len == 0 {
        return Err(Error::InvalidArgument("batch and window length must be positive".into()));
    }
    let starts: Vec<(usize, usize)> = buffer
        .trajectories()
        .iter()
        .enumerate()
        .filter(|(_, t)| !t.is_empty())
        .flat_map(|(i, t)| (0..=t.len().saturating_sub(window_len)).map(move |s| (i, s)))
        .collect();
    if starts.is_empty() {
        return Err(Error::Precondition("window sampling needs a non-empty buffer".into()));
    }
    Ok((0..batch)
        .map(|_| {
            let (ti, start) = starts[rng.random_range(0..starts.len())];
            buffer.trajectories()[ti].window(start, window_len)
        })
        .collect())
}

fn guard_episode_running(env: &SyntheticEnv) -> Result<()> {
    let state = env
        .current_state()
        .ok_or_else(|| Error::State("no running episode".into()))?;
    if state.is_done(&env.spec().spaces) {
        return Err(Error::State("episode finished before any agent turn".into()));
    }
    Ok(())
}

/// Roll one episode with an ε-greedy one-step-lookahead demonstrator: with
/// probability 1−ε it takes the action maximizing the exact expected next
/// reward under the filtered posterior, otherwise a uniform action. Beliefs
/// recorded on the turns are the exact posteriors.
pub fn demonstrate_episode<R: Rng>(
    env: &mut SyntheticEnv,
    epsilon: f64,
    max_turns: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument("epsilon must lie in [0, 1]".into()));
    }
    if max_turns == 0 {
        return Err(Error::InvalidArgument("an episode needs at least one turn".into()));
    }
    let spaces = env.spec().spaces.clone();
    let mut observation = env.reset(rng.random())?;
    guard_episode_running(env)?;
    let mut actions_taken: Vec<Action> = Vec::new();
    let mut turns = Vec::new();
    let mut terminated = false;
    for _ in 0..max_turns {
        let latent = env.current_state().expect("episode is running").current_latent;
        let belief = true_posterior(env.spec(), &observation, &actions_taken)?;
        let flat = if rng.random::<f64>() < epsilon {
            rng.random_range(0..spaces.n_actions())
        } else {
            greedy_flat_action(env.spec(), &belief)?
        };
        let action = Action::from_flat(&spaces, flat)?;
        let (next_observation, reward, done) = env.step(&action)?;
        turns.push(TurnRecord {
            observation,
            belief,
            action: action.clone(),
            reward,
            true_latent: Some(latent),
        });
        actions_taken.push(action);
        observation = next_observation;
        if done {
            terminated = true;
            break;
        }
    }
    Ok(Trajectory { turns, terminated })
}

fn greedy_flat_action(spec: &EnvSpec, belief: &BeliefPosterior) -> Result<usize> {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for flat in 0..spec.spaces.n_actions() {
        let action = Action::from_flat(&spec.spaces, flat)?;
        let value = expected_next_reward(spec, belief, &action);
        if value > best_value {
            best_value = value;
            best = flat;
        }
    }
    Ok(best)
}

/// Roll one episode against the real environment: each turn infers a belief
/// from the current observation, builds the policy state, samples an action,
/// and records the real reward (plus the ground-truth latent for offline
/// diagnostics).
pub fn interact<R: Rng>(
    env: &mut SyntheticEnv,
    world_model: &WorldModelParams,
    policy: &PolicyParams,
    max_turns: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if max_turns == 0 {
        return Err(Error::InvalidArgument("an episode needs at least one turn".into()));
    }
    let mut observation = env.reset(rng.random())?;
    guard_episode_running(env)?;
    let mut turns = Vec::new();
    let mut terminated = false;
    for _ in 0..max_turns {
        let latent = env.current_state().expect("episode is running").current_latent;
        let belief = infer_belief(world_model, &observation);
        let state = State { observation: observation.clone(), belief: belief.clone() };
        let (action, _) = act(policy, &state, rng)?;
        let (next_observation, reward, done) = env.step(&action)?;
        turns.push(TurnRecord {
            observation,
            belief,
            action,
            reward,
            true_latent: Some(latent),
        });
        observation = next_observation;
        if done {
            terminated = true;
            break;
        }
    }
    Ok(Trajectory { turns, terminated })
}

/// Fill a fresh buffer with `episodes` on-policy episodes whose beliefs come
/// from the given (typically still untrained) world model.
pub fn seed_buffer(
    env: &mut SyntheticEnv,
    world_model: &WorldModelParams,
    policy: &PolicyParams,
    episodes: usize,
    capacity: usize,
    seed: u64,
) -> Result<ReplayBuffer> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("buffer seeding needs at least one episode".into()));
    }
    let mut buffer = ReplayBuffer::new(capacity)?;
    let mut rng = rng_for(seed, "seed-buffer", 0);
    let max_turns = env.spec().spaces.t_max;
    for _ in 0..episodes {
        let trajectory = interact(env, world_model, policy, max_turns, &mut rng)?;
        buffer.push(trajectory);
    }
    Ok(buffer)
}

/// Schedule and batch sizes of the full training loop. Defaults are sized
/// for a desk-scale run; the original large-scale settings were a 24,000
/// trajectory buffer, dynamics batches of 256 sequences of length 1,024,
/// and PPO batches of 512 transitions from horizon-16 rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DwmRlConfig {
    /// Replay buffer capacity in trajectories.
    pub buffer_capacity: usize,
    /// Windows per dynamics gradient step (B_DWM).
    pub dwm_batch: usize,
    /// Imagined transitions per behavior update (B_PPO).
    pub ppo_batch: usize,
    /// Maximum turns per sampled dynamics window (L).
    pub window_len: usize,
    /// Imagined rollout length in turns (H).
    pub horizon: usize,
    /// Maximum agent turns per real episode (T).
    pub interaction_turns: usize,
    /// Fresh episodes appended to the buffer each outer iteration.
    pub episodes_per_iteration: usize,
    /// Outer iteration cap.
    pub max_iterations: usize,
    /// Episodes rolled to seed the buffer before the first iteration.
    pub seed_episodes: usize,
    /// Demonstration episodes for supervised and reward-model pretraining.
    pub demo_episodes: usize,
    /// Exploration rate of the demonstrator.
    pub demo_epsilon: f64,
    /// Dynamics gradient steps per outer iteration.
    pub dynamics_steps: usize,
    pub dynamics_learning_rate: f64,
    /// Refresh the reward model on buffer preferences every this many
    /// iterations; 0 keeps the pretrained model fixed.
    pub rm_refresh_every: usize,
    /// Run the behavior phase on replayed real windows instead of imagined
    /// rollouts.
    pub ppo_on_real: bool,
    /// Condition inferred beliefs on observations; off replaces every
    /// inferred belief with the uniform one.
    pub belief_in_wm: bool,
    /// Let the reward model read the belief block of its state features.
    pub belief_in_rm: bool,
    pub sft: TrainSupervisedConfig,
    pub rm: TrainRmConfig,
    pub ppo: PpoConfig,
}

impl Default for DwmRlConfig {
    fn default() -> Self {
        Self {
            buffer_capacity: 2000,
            dwm_batch: 32,
            ppo_batch: 64,
            window_len: 8,
            horizon: 4,
            interaction_turns: 8,
            episodes_per_iteration: 4,
            max_iterations: 200,
            seed_episodes: 32,
            demo_episodes: 64,
            demo_epsilon: 0.1,
            dynamics_steps: 5,
            dynamics_learning_rate: 0.01,
            rm_refresh_every: 0,
            ppo_on_real: false,
            belief_in_wm: true,
            belief_in_rm: true,
            sft: TrainSupervisedConfig::default(),
            rm: TrainRmConfig::default(),
            ppo: PpoConfig::default(),
        }
    }
}

impl DwmRlConfig {
    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("buffer_capacity", self.buffer_capacity),
            ("dwm_batch", self.dwm_batch),
            ("ppo_batch", self.ppo_batch),
            ("window_len", self.window_len),
            ("horizon", self.horizon),
            ("interaction_turns", self.interaction_turns),
            ("episodes_per_iteration", self.episodes_per_iteration),
            ("max_iterations", self.max_iterations),
            ("seed_episodes", self.seed_episodes),
            ("demo_episodes", self.demo_episodes),
        ];
        for (name, value) in positives {
            if value == 0 {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.demo_epsilon) {
            return Err(Error::Validation("demo_epsilon must lie in [0, 1]".into()));
        }
        if self.dynamics_steps == 0 {
            return Err(Error::Validation("dynamics_steps must be positive".into()));
        }
        if !self.dynamics_learning_rate.is_finite() || self.dynamics_learning_rate < 0.0 {
            return Err(Error::Validation(
                "dynamics_learning_rate must be finite and non-negative".into(),
            ));
        }
        self.ppo.validate()?;
        Ok(())
    }
}

/// Stable fingerprint of a configuration, embedded in reports so artifacts
/// can be traced back to the exact settings that produced them.
pub fn config_fingerprint(config: &DwmRlConfig) -> String {
    let encoded = serde_json::to_string(config).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(encoded.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything measured during one outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Phase names in execution order.
    pub phases: Vec<String>,
    /// Batch-mean bound terms at the iteration's final dynamics step.
    pub elbo: ElboBreakdown,
    /// Reward-model loss on the current preference set.
    pub rm_loss: f64,
    pub ppo: PpoStats,
    /// Mean raw return of this iteration's real episodes.
    pub env_return: f64,
    /// Share of fresh turns whose belief puts its emotion argmax on the
    /// true latent's emotion.
    pub belief_emotion_accuracy: f64,
    pub buffer_len: usize,
    /// Cumulative real environment steps after this iteration.
    pub env_steps: u64,
}

/// Full record of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub config_hash: String,
    pub root_seed: u64,
    /// Exact expected episode return of the uniform-random policy.
    pub baseline_return: f64,
    /// Mean return of the demonstration episodes.
    pub demo_return: f64,
    /// Supervised pretraining loss after the final step.
    pub sft_loss: f64,
    /// Reward-model loss after pretraining.
    pub rm_pretrain_loss: f64,
    /// Preference pairs available after pretraining.
    pub rm_pairs: usize,
    pub iterations: Vec<IterationRecord>,
    /// Completed iterations at the moving-average stop, if it fired before
    /// the iteration cap.
    pub converged_after: Option<usize>,
}

/// Final parameters of a training run alongside its report.
#[derive(Debug, Clone)]
pub struct DwmRlOutcome {
    pub report: TrainingReport,
    pub world_model: WorldModelParams,
    pub reward_model: RewardModelParams,
    pub policy: PolicyParams,
    pub critic: CriticParams,
    /// Frozen supervised policy used as the KL reference.
    pub reference: PolicyParams,
}

fn emotion_argmax(spaces: &Spaces, posterior: &BeliefPosterior) -> usize {
    let mut totals = vec![0.0; spaces.n_emotions()];
    for (b, &p) in posterior.probs().iter().enumerate() {
        totals[spaces.unflatten(b).emotion] += p;
    }
    let mut best = 0;
    for (e, &total) in totals.iter().enumerate() {
        if total > totals[best] {
            best = e;
        }
    }
    best
}

fn imagination_batch<R: Rng>(
    buffer: &ReplayBuffer,
    world_model: &WorldModelParams,
    reward_model: &RewardModelParams,
    policy: &PolicyParams,
    ppo_batch: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    let starts: Vec<(usize, usize)> = buffer
        .trajectories()
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |s| (i, s)))
        .collect();
    if starts.is_empty() {
        return Err(Error::Precondition("imagination needs a non-empty buffer".into()));
    }
    let rollouts = (ppo_batch / horizon).max(1);
    (0..rollouts)
        .map(|_| {
            let (ti, si) = starts[rng.random_range(0..starts.len())];
            let turn = &buffer.trajectories()[ti].turns[si];
            let start = State {
                observation: turn.observation.clone(),
                belief: infer_belief(world_model, &turn.observation),
            };
            imagine_rollout(world_model, reward_model, &start, policy, horizon, rng)
        })
        .collect()
}

fn replay_batch<R: Rng>(
    buffer: &ReplayBuffer,
    world_model: &WorldModelParams,
    ppo_batch: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    let windows = sample_windows(buffer, (ppo_batch / horizon).max(1), horizon, rng)?;
    Ok(windows
        .into_iter()
        .map(|mut window| {
            for turn in &mut window.turns {
                turn.belief = infer_belief(world_model, &turn.observation);
            }
            window
        })
        .collect())
}

/// Run the full loop: demonstrations, supervised pretraining (freezing the
/// KL reference), reward-model pretraining, buffer seeding, then iterations
/// of dynamics → behavior → interaction until the iteration cap or until
/// the 20-iteration moving-average return improves by less than 1%. Each
/// completed iteration's record is also passed to `on_iteration` so callers
/// can persist partial progress before a later phase fails.
pub fn run_dwm_rl(
    config: &DwmRlConfig,
    spec: &EnvSpec,
    root_seed: u64,
    mut on_iteration: Option<&mut dyn FnMut(&IterationRecord)>,
) -> Result<DwmRlOutcome> {
    config.validate()?;
    spec.validate()?;
    let spaces = spec.spaces.clone();
    if config.window_len > spaces.t_max * config.buffer_capacity {
        return Err(Error::Validation(
            "window length exceeds the buffer's maximum turn count".into(),
        ));
    }
    let mut env = SyntheticEnv::new(spec.clone())?;
    let uniform = vec![1.0 / spaces.n_actions() as f64; spaces.n_actions()];
    let baseline_return = expected_return_under_action_dist(spec, &uniform)?;

    let mut demo_rng = rng_for(root_seed, "demonstrations", 0);
    let demos: Vec<Trajectory> = (0..config.demo_episodes)
        .map(|_| {
            demonstrate_episode(&mut env, config.demo_epsilon, config.interaction_turns, &mut demo_rng)
        })
        .collect::<Result<_>>()?;
    let demo_return =
        demos.iter().map(Trajectory::total_reward).sum::<f64>() / demos.len() as f64;

    let (mut policy, sft_curve) =
        train_supervised(&demos, &PolicyParams::new_zero(spaces.clone()), &config.sft)?;
    let sft_loss = *sft_curve.last().expect("curve has a final evaluation");
    let reference = policy.clone();

    let mut rm_init = RewardModelParams::new_zero(spaces.clone());
    rm_init.use_belief = config.belief_in_rm;
    let mut pair_rng = rng_for(root_seed, "preference-pairs", 0);
    let (mut pairs, _skipped) = make_preference_pairs(&demos, &policy, &mut pair_rng)?;
    let (mut reward_model, rm_curve) = train_rm(&pairs, &rm_init, &config.rm)?;
    let rm_pretrain_loss = *rm_curve.last().expect("curve has a final evaluation");

    let mut world_model = WorldModelParams::new_zero(spaces.clone());
    world_model.belief_conditioning = config.belief_in_wm;
    let mut critic = CriticParams::new_zero(spaces.clone());
    let mut buffer = seed_buffer(
        &mut env,
        &world_model,
        &policy,
        config.seed_episodes,
        config.buffer_capacity,
        derive_seed(root_seed, "buffer-seed", 0),
    )?;

    let mut report = TrainingReport {
        config_hash: config_fingerprint(config),
        root_seed,
        baseline_return,
        demo_return,
        sft_loss,
        rm_pretrain_loss,
        rm_pairs: pairs.len(),
        iterations: Vec::new(),
        converged_after: None,
    };

    for iteration in 0..config.max_iterations {
        let mut phases = Vec::with_capacity(3);

        let dynamics_config = DynamicsConfig {
            batch_size: config.dwm_batch,
            window_len: config.window_len,
            steps: config.dynamics_steps,
            learning_rate: config.dynamics_learning_rate,
            seed: derive_seed(root_seed, "dynamics", iteration as u64),
        };
        let (next_world_model, curve) =
            train_dynamics(buffer.trajectories(), &world_model, &dynamics_config)?;
        world_model = next_world_model;
        let elbo = *curve.last().expect("at least one dynamics step");
        phases.push("dynamics".to_string());

        let steps_before = env.step_count();
        let mut behavior_rng = rng_for(root_seed, "behavior", iteration as u64);
        let batch = if config.ppo_on_real {
            replay_batch(&buffer, &world_model, config.ppo_batch, config.horizon, &mut behavior_rng)?
        } else {
            imagination_batch(
                &buffer,
                &world_model,
                &reward_model,
                &policy,
                config.ppo_batch,
                config.horizon,
                &mut behavior_rng,
            )?
        };
        let (next_policy, next_critic, ppo_stats) =
            ppo_update(&policy, &critic, &reference, &batch, &config.ppo)?;
        policy = next_policy;
        critic = next_critic;
        if config.rm_refresh_every > 0 && (iteration + 1) % config.rm_refresh_every == 0 {
            let mut refresh_rng = rng_for(root_seed, "rm-refresh", iteration as u64);
            let (fresh_pairs, _) =
                make_preference_pairs(buffer.trajectories(), &policy, &mut refresh_rng)?;
            let (refreshed, _) = train_rm(&fresh_pairs, &reward_model, &config.rm)?;
            reward_model = refreshed;
            pairs = fresh_pairs;
        }
        if env.step_count() != steps_before {
            return Err(Error::Invariant(
                "environment stepped during the imagination-only behavior phase".into(),
            ));
        }
        phases.push("behavior".to_string());

        let mut interaction_rng = rng_for(root_seed, "interaction", iteration as u64);
        let mut return_sum = 0.0;
        let mut emotion_hits = 0usize;
        let mut emotion_total = 0usize;
        for _ in 0..config.episodes_per_iteration {
            let trajectory =
                interact(&mut env, &world_model, &policy, config.interaction_turns, &mut interaction_rng)?;
            return_sum += trajectory.total_reward();
            for turn in &trajectory.turns {
                if let Some(latent) = turn.true_latent {
                    emotion_total += 1;
                    if emotion_argmax(&spaces, &turn.belief) == latent.emotion {
                        emotion_hits += 1;
                    }
                }
            }
            buffer.push(trajectory);
        }
        phases.push("interaction".to_string());

        let record = IterationRecord {
            iteration,
            phases,
            elbo,
            rm_loss: rm_loss(&reward_model, &pairs)?,
            ppo: ppo_stats,
            env_return: return_sum / config.episodes_per_iteration as f64,
            belief_emotion_accuracy: if emotion_total == 0 {
                0.0
            } else {
                emotion_hits as f64 / emotion_total as f64
            },
            buffer_len: buffer.len(),
            env_steps: env.step_count(),
        };
        if let Some(callback) = on_iteration.as_deref_mut() {
            callback(&record);
        }
        report.iterations.push(record);

        let window = 20;
        if report.iterations.len() >= 2 * window {
            let mean = |records: &[IterationRecord]| {
                records.iter().map(|r| r.env_return).sum::<f64>() / records.len() as f64
            };
            let n = report.iterations.len();
            let recent = mean(&report.iterations[n - window..]);
            let previous = mean(&report.iterations[n - 2 * window..n - window]);
            if recent - previous < 0.01 * previous.abs() {
                report.converged_after = Some(n);
                break;
            }
        }
    }

    Ok(DwmRlOutcome { report, world_model, reward_model, policy, critic, reference })
}
