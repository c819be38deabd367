//! Self-play, replay, target generation and the optimization loop.
//!
//! Exploration episodes act with the uncertainty-bonus tree; exploitation
//! episodes act with the plain tree. With double planning, exploration
//! episodes also search a plain tree whose statistics feed value bootstraps
//! and the max-target rules.

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::harness::{temperature_at, EstimatorKind, ExperimentConfig};
use crate::mcts::{run_search, sample_action, RootNoise, SearchConfig, SearchCounters, SelectionRule};
use crate::model::{unrolled_loss_into, LossConfig, ModelBundle, StepTarget, UnrollTargets};
use crate::uncertainty::{CountUncertainty, EnsembleUncertainty, UncertaintySource, VisitCounter, ZeroUncertainty};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeType {
    Explore,
    Exploit,
}

impl EpisodeType {
    pub fn as_str(self) -> &'static str {
        match self {
            EpisodeType::Explore => "explore",
            EpisodeType::Exploit => "exploit",
        }
    }
}

/// Root statistics of one search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RootStats {
    pub value: f64,
    pub visit_distribution: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameHistory {
    pub episode_type: EpisodeType,
    /// One more entry than `actions`: the final observation is included.
    pub observations: Vec<Vec<f64>>,
    pub env_states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Plain-tree statistics per step (acting tree in exploit episodes).
    pub exploit: Vec<Option<RootStats>>,
    /// Bonus-tree statistics per step, explore episodes only.
    pub explore: Vec<Option<RootStats>>,
    pub terminal: bool,
    /// Plain-tree value at the final observation of a truncated episode.
    pub final_value: Option<f64>,
}

impl GameHistory {
    pub fn new(episode_type: EpisodeType, observation: Vec<f64>, env_state: Vec<f64>) -> Self {
        Self {
            episode_type,
            observations: vec![observation],
            env_states: vec![env_state],
            actions: Vec::new(),
            rewards: Vec::new(),
            exploit: Vec::new(),
            explore: Vec::new(),
            terminal: false,
            final_value: None,
        }
    }

    /// Number of actions taken.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Statistics of the tree the agent acted on at step `t`.
    pub fn acting_stats(&self, t: usize) -> Option<&RootStats> {
        match self.episode_type {
            EpisodeType::Explore => self.explore[t].as_ref(),
            EpisodeType::Exploit => self.exploit[t].as_ref(),
        }
    }

    /// Plain-tree statistics; without double planning an exploration
    /// episode has none and falls back to its acting tree.
    pub fn exploit_stats(&self, t: usize, mode: &TargetMode) -> Result<&RootStats> {
        if let Some(s) = &self.exploit[t] {
            return Ok(s);
        }
        if self.episode_type == EpisodeType::Explore && !mode.double_planning {
            if let Some(s) = &self.explore[t] {
                return Ok(s);
            }
        }
        Err(Error::Config(format!("step {t} has no exploitation-tree statistics")))
    }

    /// Value estimate of the state at position `t` (the final position
    /// included: zero when terminal, the stored bootstrap otherwise).
    pub fn state_value(&self, t: usize, mode: &TargetMode) -> Result<f64> {
        if t >= self.len() {
            return Ok(if self.terminal { 0.0 } else { self.final_value.unwrap_or(0.0) });
        }
        Ok(self.exploit_stats(t, mode)?.value)
    }

    fn check(&self) -> Result<()> {
        let n = self.actions.len();
        if self.observations.len() != n + 1
            || self.env_states.len() != n + 1
            || self.rewards.len() != n
            || self.exploit.len() != n
            || self.explore.len() != n
        {
            return Err(Error::Config("game history sequences disagree in length".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMode {
    NStep,
    ZeroStep,
    ZeroStepExploreOnly,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    Max,
    ExploreOnly,
    ExploitOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetMode {
    pub value_mode: ValueMode,
    pub policy_mode: PolicyMode,
    pub alternating: bool,
    pub double_planning: bool,
}

impl TargetMode {
    pub fn vanilla() -> Self {
        Self {
            value_mode: ValueMode::NStep,
            policy_mode: PolicyMode::ExploitOnly,
            alternating: false,
            double_planning: false,
        }
    }

    pub fn op2e() -> Self {
        Self {
            value_mode: ValueMode::Max,
            policy_mode: PolicyMode::Max,
            alternating: true,
            double_planning: true,
        }
    }
}

/// `Σ_{i<n} γⁱ r_{t+i} + γⁿ v_{t+n}`, where `v` is the plain-tree root value.
/// Past a terminal state nothing is bootstrapped; a truncated episode
/// bootstraps from its final value.
pub fn n_step_return(h: &GameHistory, t: usize, n: usize, gamma: f64, mode: &TargetMode) -> Result<f64> {
    let len = h.len();
    let end = (t + n).min(len);
    let mut acc = 0.0;
    let mut discount = 1.0;
    for r in &h.rewards[t.min(len)..end] {
        acc += discount * r;
        discount *= gamma;
    }
    if t + n < len || !h.terminal {
        acc += discount * h.state_value(end, mode)?;
    }
    Ok(acc)
}

pub fn value_target(h: &GameHistory, t: usize, n: usize, gamma: f64, mode: &TargetMode) -> Result<f64> {
    if t >= h.len() {
        return h.state_value(t, mode);
    }
    let explore = h.episode_type == EpisodeType::Explore;
    Ok(match mode.value_mode {
        ValueMode::NStep => n_step_return(h, t, n, gamma, mode)?,
        ValueMode::ZeroStep => h.state_value(t, mode)?,
        ValueMode::ZeroStepExploreOnly if explore => h.state_value(t, mode)?,
        ValueMode::Max if explore => n_step_return(h, t, n, gamma, mode)?.max(h.state_value(t, mode)?),
        _ => n_step_return(h, t, n, gamma, mode)?,
    })
}

/// Policy target at step `t` and whether it came from the bonus tree.
pub fn policy_target_with_source(
    h: &GameHistory,
    t: usize,
    n: usize,
    gamma: f64,
    mode: &TargetMode,
) -> Result<(Vec<f64>, bool)> {
    let exploit = || h.exploit_stats(t, mode).map(|s| (s.visit_distribution.clone(), false));
    if h.episode_type == EpisodeType::Exploit {
        return exploit();
    }
    let explore = || {
        h.explore[t]
            .as_ref()
            .map(|s| (s.visit_distribution.clone(), true))
            .ok_or_else(|| Error::Config(format!("step {t} has no exploration-tree statistics")))
    };
    match mode.policy_mode {
        PolicyMode::ExploitOnly => exploit(),
        PolicyMode::ExploreOnly => explore(),
        PolicyMode::Max => {
            if n_step_return(h, t, n, gamma, mode)? > h.state_value(t, mode)? {
                explore()
            } else {
                exploit()
            }
        }
    }
}

pub fn policy_target(h: &GameHistory, t: usize, n: usize, gamma: f64, mode: &TargetMode) -> Result<Vec<f64>> {
    policy_target_with_source(h, t, n, gamma, mode).map(|(p, _)| p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSettings {
    pub mode: TargetMode,
    pub n: usize,
    pub gamma: f64,
    pub unroll_steps: usize,
}

/// Actions and targets for an unroll starting at step `t`. Actions past the
/// episode end are drawn uniformly; their targets are masked.
pub fn make_unroll<R: Rng + ?Sized>(
    h: &GameHistory,
    t: usize,
    settings: &TargetSettings,
    action_count: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, UnrollTargets, usize)> {
    let len = h.len();
    let mut actions = Vec::with_capacity(settings.unroll_steps);
    for k in 0..settings.unroll_steps {
        let i = t + k;
        actions.push(if i < len { h.actions[i] } else { rng.random_range(0..action_count) });
    }
    let uniform = vec![1.0 / action_count as f64; action_count];
    let mut explore_targets = 0;
    let mut steps = Vec::with_capacity(settings.unroll_steps + 1);
    for k in 0..=settings.unroll_steps {
        let i = t + k;
        let reward = if k >= 1 && i - 1 < len { h.rewards[i - 1] } else { 0.0 };
        if i < len {
            let (policy, from_explore) = policy_target_with_source(h, i, settings.n, settings.gamma, &settings.mode)?;
            explore_targets += from_explore as usize;
            steps.push(StepTarget {
                value: value_target(h, i, settings.n, settings.gamma, &settings.mode)?,
                reward,
                policy,
                mask: true,
                policy_mask: true,
            });
        } else if i == len {
            steps.push(StepTarget {
                value: h.state_value(i, &settings.mode)?,
                reward,
                policy: uniform.clone(),
                mask: true,
                policy_mask: false,
            });
        } else {
            steps.push(StepTarget {
                value: 0.0,
                reward: 0.0,
                policy: uniform.clone(),
                mask: false,
                policy_mask: false,
            });
        }
    }
    Ok((actions, UnrollTargets { steps }, explore_targets))
}

pub const PRIORITY_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
struct StoredGame {
    id: u64,
    game: GameHistory,
    priorities: Vec<f64>,
}

/// FIFO buffer of whole games with per-position priorities.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub priority_exponent: f64,
    games: VecDeque<StoredGame>,
    next_id: u64,
}

/// One sampled position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleRef {
    pub game_id: u64,
    pub slot: usize,
    pub step: usize,
    /// Sampling probability of this position.
    pub probability: f64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, priority_exponent: f64) -> Self {
        Self {
            capacity,
            priority_exponent,
            games: VecDeque::new(),
            next_id: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.games.len()
    }

    pub fn is_empty(&self) -> bool {
        self.games.is_empty()
    }

    pub fn positions(&self) -> usize {
        self.games.iter().map(|g| g.game.len()).sum()
    }

    /// Stores a game, evicting the oldest when full. Returns the game id.
    pub fn push(&mut self, game: GameHistory, priorities: Vec<f64>) -> Result<u64> {
        game.check()?;
        if priorities.len() != game.len() {
            return Err(Error::InputShape {
                expected: game.len(),
                got: priorities.len(),
            });
        }
        let id = self.next_id;
        self.next_id += 1;
        let priorities = priorities.into_iter().map(|p| p.max(PRIORITY_FLOOR)).collect();
        self.games.push_back(StoredGame { id, game, priorities });
        while self.games.len() > self.capacity {
            self.games.pop_front();
        }
        Ok(id)
    }

    pub fn game(&self, slot: usize) -> &GameHistory {
        &self.games[slot].game
    }

    pub fn games(&self) -> impl Iterator<Item = &GameHistory> {
        self.games.iter().map(|g| &g.game)
    }

    pub fn priority(&self, slot: usize, step: usize) -> f64 {
        self.games[slot].priorities[step]
    }

    /// Game priority: the largest of its step priorities.
    pub fn game_priority(&self, slot: usize) -> f64 {
        self.games[slot].priorities.iter().copied().fold(0.0, f64::max)
    }

    /// Samples positions with probability proportional to `priority^exponent`.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<SampleRef>> {
        if self.positions() == 0 {
            return Err(Error::EmptyBuffer);
        }
        let mut cumulative = Vec::with_capacity(self.positions());
        let mut index = Vec::with_capacity(self.positions());
        let mut total = 0.0;
        for (slot, g) in self.games.iter().enumerate() {
            for (step, p) in g.priorities.iter().enumerate() {
                total += p.powf(self.priority_exponent);
                cumulative.push(total);
                index.push((slot, step));
            }
        }
        let mut out = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let u = rng.random::<f64>() * total;
            let pos = cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1);
            let (slot, step) = index[pos];
            let weight = cumulative[pos] - if pos == 0 { 0.0 } else { cumulative[pos - 1] };
            out.push(SampleRef {
                game_id: self.games[slot].id,
                slot,
                step,
                probability: weight / total,
            });
        }
        Ok(out)
    }

    pub fn update_priority(&mut self, sample: &SampleRef, priority: f64) {
        if let Some(g) = self.games.get_mut(sample.slot) {
            if g.id == sample.game_id {
                g.priorities[sample.step] = if priority.is_finite() {
                    priority.max(PRIORITY_FLOOR)
                } else {
                    1.0
                };
            }
        }
    }

    /// Overwrites stored plain-tree values (acting-tree values when no plain
    /// tree exists) with the current value head, for roughly `fraction` of
    /// all stored steps. Visit distributions are untouched.
    pub fn reanalyse_refresh<R: Rng + ?Sized>(&mut self, bundle: &ModelBundle, fraction: f64, rng: &mut R) -> Result<usize> {
        if fraction <= 0.0 {
            return Ok(0);
        }
        let mut refreshed = 0;
        for g in &mut self.games {
            let game = &mut g.game;
            for t in 0..=game.len() {
                if fraction < 1.0 && rng.random::<f64>() >= fraction {
                    continue;
                }
                if t == game.len() {
                    if !game.terminal && game.final_value.is_some() {
                        game.final_value = Some(bundle.value_of_observation(&game.observations[t])?);
                        refreshed += 1;
                    }
                    continue;
                }
                let value = bundle.value_of_observation(&game.observations[t])?;
                let slot = if game.exploit[t].is_some() {
                    &mut game.exploit[t]
                } else {
                    &mut game.explore[t]
                };
                if let Some(stats) = slot {
                    stats.value = value;
                    refreshed += 1;
                }
            }
        }
        Ok(refreshed)
    }
}

/// Settings for playing one episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaySettings {
    pub base_rule: SelectionRule,
    pub explore_rule: SelectionRule,
    pub budget: usize,
    pub gamma: f64,
    pub root_noise: Option<RootNoise>,
    pub double_planning: bool,
    /// Split the node budget between the two trees of a double-planning step.
    pub split_budget: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeCounters {
    pub explore_searches: u64,
    pub exploit_searches: u64,
    pub search: SearchCounters,
}

impl EpisodeCounters {
    fn add_search(&mut self, c: &SearchCounters, explore: bool) {
        if explore {
            self.explore_searches += 1;
        } else {
            self.exploit_searches += 1;
        }
        self.search.estimator_calls += c.estimator_calls;
        self.search.model_transitions += c.model_transitions;
    }
}

/// Plays one episode. `on_visit` sees every real state the episode passes
/// through, the reset state included.
#[allow(clippy::too_many_arguments)]
pub fn play_episode<R: Rng + ?Sized>(
    env_spec: &EnvSpec,
    reset_seed: u64,
    bundle: &ModelBundle,
    counter: &mut VisitCounter,
    estimator_kind: EstimatorKind,
    estimator_params: (usize, f64),
    settings: &PlaySettings,
    episode_type: EpisodeType,
    temperature: f64,
    rng: &mut R,
) -> Result<(GameHistory, EpisodeCounters)> {
    let mut env = env_spec.build();
    let env_model = env_spec.model();
    let obs = env.reset(reset_seed);
    let mut history = GameHistory::new(episode_type, obs, env.state());
    counter.record_visit(&env.state());
    let mut counters = EpisodeCounters::default();
    let (horizon, gamma) = estimator_params;
    loop {
        let obs = history.observations.last().cloned().unwrap_or_default();
        let state = env.state();
        let (acting, exploit_stats, explore_stats) = {
            let zero = ZeroUncertainty;
            let ensemble;
            let counts;
            let estimator: &dyn UncertaintySource = match estimator_kind {
                EstimatorKind::None | EstimatorKind::Zero => &zero,
                EstimatorKind::Ensemble => {
                    ensemble = EnsembleUncertainty { bundle };
                    &ensemble
                }
                EstimatorKind::VisitCount => {
                    counts = CountUncertainty {
                        counter,
                        env: env_model,
                        horizon,
                        gamma,
                    };
                    &counts
                }
            };
            match episode_type {
                EpisodeType::Exploit => {
                    let cfg = SearchConfig {
                        rule: settings.base_rule,
                        budget: settings.budget,
                        gamma: settings.gamma,
                        root_noise: settings.root_noise,
                    };
                    let (tree, r) = run_search(bundle, &zero, &obs, Some(&state), &cfg, rng)?;
                    counters.add_search(&tree.counters, false);
                    let stats = RootStats {
                        value: r.root_value,
                        visit_distribution: r.visit_distribution.clone(),
                    };
                    (r.visit_counts, Some(stats), None)
                }
                EpisodeType::Explore => {
                    let budget = if settings.double_planning && settings.split_budget {
                        (settings.budget / 2).max(1)
                    } else {
                        settings.budget
                    };
                    let cfg = SearchConfig {
                        rule: settings.explore_rule,
                        budget,
                        gamma: settings.gamma,
                        root_noise: settings.root_noise,
                    };
                    let (tree, r) = run_search(bundle, estimator, &obs, Some(&state), &cfg, rng)?;
                    counters.add_search(&tree.counters, true);
                    let explore = RootStats {
                        value: r.root_value,
                        visit_distribution: r.visit_distribution.clone(),
                    };
                    let exploit = if settings.double_planning {
                        let cfg = SearchConfig {
                            rule: settings.base_rule,
                            budget,
                            gamma: settings.gamma,
                            root_noise: None,
                        };
                        let (tree, r) = run_search(bundle, &zero, &obs, Some(&state), &cfg, rng)?;
                        counters.add_search(&tree.counters, false);
                        Some(RootStats {
                            value: r.root_value,
                            visit_distribution: r.visit_distribution,
                        })
                    } else {
                        None
                    };
                    (r.visit_counts, exploit, Some(explore))
                }
            }
        };
        let action = sample_action(&acting, temperature, rng);
        let step = env.step(action)?;
        counter.record_visit(&env.state());
        history.actions.push(action);
        history.rewards.push(step.reward);
        history.exploit.push(exploit_stats);
        history.explore.push(explore_stats);
        history.observations.push(step.observation);
        history.env_states.push(env.state());
        if step.terminal {
            history.terminal = true;
            break;
        }
        if step.truncated {
            let cfg = SearchConfig {
                rule: settings.base_rule,
                budget: settings.budget,
                gamma: settings.gamma,
                root_noise: None,
            };
            let obs = history.observations.last().cloned().unwrap_or_default();
            let (tree, r) = run_search(bundle, &ZeroUncertainty, &obs, None, &cfg, rng)?;
            counters.add_search(&tree.counters, false);
            history.final_value = Some(r.root_value);
            break;
        }
    }
    Ok((history, counters))
}

/// Episode type of the `index`-th episode (0-based).
pub fn episode_type_for(index: u64, explores: bool, alternating: bool) -> EpisodeType {
    if !explores || (alternating && index % 2 == 1) {
        EpisodeType::Exploit
    } else {
        EpisodeType::Explore
    }
}

/// Plain gradient descent with heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Momentum {
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Momentum {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// One update; the gradient is first rescaled to global norm at most
    /// `max_norm` when `max_norm > 0`.
    pub fn step(&mut self, bundle: &mut ModelBundle, grads: &[f64], lr: f64, max_norm: f64) -> Result<()> {
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        let clip = if max_norm > 0.0 && norm > max_norm { max_norm / norm } else { 1.0 };
        let mut params = bundle.trainable_params();
        if self.velocity.len() != params.len() {
            self.velocity = vec![0.0; params.len()];
        }
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            *v = self.momentum * *v + clip * g;
            *p -= lr * *v;
        }
        bundle.set_trainable_params(&params)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub env_steps: u64,
    pub train_steps: u64,
    pub episode_index: u64,
    /// `explore`, `exploit`, or `train` for periodic training rows.
    pub episode_type: String,
    pub episode_return: Option<f64>,
    pub loss: Option<f64>,
    pub lr: f64,
    pub root_value_mean: Option<f64>,
}

/// Counts used to show which code paths a run exercised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounters {
    pub explore_episodes: u64,
    pub exploit_episodes: u64,
    pub explore_searches: u64,
    pub exploit_searches: u64,
    pub estimator_calls: u64,
    pub explore_policy_targets: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub index: u64,
    pub episode_type: EpisodeType,
    pub env_steps_end: u64,
    pub episode_return: f64,
    pub length: usize,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

pub struct RunOutput {
    pub records: Vec<LogRecord>,
    pub episodes: Vec<EpisodeSummary>,
    pub losses: Vec<f64>,
    pub bundle: ModelBundle,
    pub counter: VisitCounter,
    pub counters: RunCounters,
    pub env_steps: u64,
    pub train_steps: u64,
}

/// Independent RNG streams derived from one master seed.
pub struct RunRngs {
    pub init: ChaCha8Rng,
    pub act: ChaCha8Rng,
    pub train: ChaCha8Rng,
}

impl RunRngs {
    pub fn new(seed: u64) -> Self {
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        Self {
            init: ChaCha8Rng::seed_from_u64(master.random()),
            act: ChaCha8Rng::seed_from_u64(master.random()),
            train: ChaCha8Rng::seed_from_u64(master.random()),
        }
    }
}

pub fn new_counter(cfg: &ExperimentConfig) -> VisitCounter {
    match &cfg.env {
        EnvSpec::Slide(s) => VisitCounter::slide(s.length, cfg.estimator.beta, cfg.estimator.epsilon),
        EnvSpec::MountainCar(_) => VisitCounter::mountain_car(cfg.estimator.beta, cfg.estimator.epsilon),
    }
}

pub fn build_bundle(cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<ModelBundle> {
    let model = cfg.env.model();
    let mut mc = crate::model::ModelConfig::new(model.observation_size(), model.action_count());
    mc.latent_size = cfg.model.latent_size;
    mc.hidden_size = cfg.model.hidden_size;
    mc.support = cfg.model.support;
    mc.activation = cfg.model.activation;
    if cfg.estimator.kind == EstimatorKind::Ensemble {
        mc.ensemble_size = cfg.estimator.ensemble_size;
        mc.prior_scale = cfg.estimator.prior_scale;
    }
    let mut bundle = ModelBundle::new(mc, rng)?;
    if cfg.model.propagate_covariance {
        bundle.propagation = Some(if cfg.model.state_noise > 0.0 {
            crate::uncertainty::CovarianceMap::Isotropic(cfg.model.state_noise)
        } else {
            crate::uncertainty::CovarianceMap::Zero
        });
    }
    Ok(bundle)
}

fn play_settings(cfg: &ExperimentConfig) -> PlaySettings {
    let rule = cfg.search.rule();
    PlaySettings {
        base_rule: rule.with_kind(rule.kind.base()),
        explore_rule: rule,
        budget: cfg.search.budget,
        gamma: cfg.training.discount,
        root_noise: Some(RootNoise {
            alpha: cfg.search.dirichlet_alpha,
            fraction: cfg.search.exploration_fraction,
        }),
        double_planning: cfg.targets.double_planning,
        split_budget: cfg.search.split_budget,
    }
}

fn target_settings(cfg: &ExperimentConfig) -> TargetSettings {
    TargetSettings {
        mode: cfg.targets.mode(),
        n: cfg.targets.n_step,
        gamma: cfg.training.discount,
        unroll_steps: cfg.targets.unroll_steps,
    }
}

fn initial_priorities(h: &GameHistory, settings: &TargetSettings) -> Vec<f64> {
    (0..h.len())
        .map(|t| {
            let target = value_target(h, t, settings.n, settings.gamma, &settings.mode);
            let estimate = h.state_value(t, &settings.mode);
            match (target, estimate) {
                (Ok(z), Ok(v)) => (z - v).abs(),
                _ => 1.0,
            }
        })
        .collect()
}

/// Trains one seed. `observer` sees every log record as it is produced.
/// Periodic and diagnostic checkpoints go under `checkpoint_dir`.
pub fn train_loop(
    cfg: &ExperimentConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
    observer: &mut dyn FnMut(&LogRecord),
) -> Result<RunOutput> {
    let mut rngs = RunRngs::new(seed);
    let mut bundle = build_bundle(cfg, &mut rngs.init)?;
    let mut counter = new_counter(cfg);
    let mut buffer = ReplayBuffer::new(cfg.training.buffer_size, cfg.training.priority_exponent);
    let mut optimizer = Momentum::new(cfg.training.momentum);
    let play = play_settings(cfg);
    let targets = target_settings(cfg);
    let loss_cfg = LossConfig {
        value_loss_weight: cfg.training.value_loss_weight,
        gradient_scale: cfg.training.gradient_scale,
    };
    let explores = cfg.search.rule_kind.is_explore();
    let total_steps = cfg.training.training_steps;
    let max_env = cfg.run.max_env_steps;
    let action_count = bundle.action_count();
    let members = bundle.reward.member_count();

    let mut out = RunOutput {
        records: Vec::new(),
        episodes: Vec::new(),
        losses: Vec::new(),
        bundle: bundle.clone(),
        counter: counter.clone(),
        counters: RunCounters::default(),
        env_steps: 0,
        train_steps: 0,
    };
    let mut env_steps: u64 = 0;
    let mut train_steps: u64 = 0;
    let mut episode_index: u64 = 0;
    let mut recent_loss = None;

    while train_steps < total_steps && (max_env == 0 || env_steps < max_env) {
        let episode_type = episode_type_for(episode_index, explores, cfg.targets.alternating);
        let temperature = temperature_at(&cfg.temperature, train_steps, total_steps);
        let reset_seed: u64 = rngs.act.random();
        let (history, ep_counters) = play_episode(
            &cfg.env,
            reset_seed,
            &bundle,
            &mut counter,
            cfg.estimator.kind,
            (cfg.estimator.horizon, cfg.training.discount),
            &play,
            episode_type,
            temperature,
            &mut rngs.act,
        )?;
        env_steps += history.len() as u64;
        match episode_type {
            EpisodeType::Explore => out.counters.explore_episodes += 1,
            EpisodeType::Exploit => out.counters.exploit_episodes += 1,
        }
        out.counters.explore_searches += ep_counters.explore_searches;
        out.counters.exploit_searches += ep_counters.exploit_searches;
        out.counters.estimator_calls += ep_counters.search.estimator_calls;

        let root_values: Vec<f64> = (0..history.len())
            .filter_map(|t| history.acting_stats(t).map(|s| s.value))
            .collect();
        let root_value_mean = (!root_values.is_empty()).then(|| root_values.iter().sum::<f64>() / root_values.len() as f64);
        out.episodes.push(EpisodeSummary {
            index: episode_index,
            episode_type,
            env_steps_end: env_steps,
            episode_return: history.episode_return(),
            length: history.len(),
            actions: history.actions.clone(),
            rewards: history.rewards.clone(),
        });
        let record = LogRecord {
            env_steps,
            train_steps,
            episode_index,
            episode_type: episode_type.as_str().into(),
            episode_return: Some(history.episode_return()),
            loss: recent_loss,
            lr: crate::nn::learning_rate(cfg.training.lr_init, cfg.training.lr_decay_rate, cfg.training.lr_decay_steps, train_steps),
            root_value_mean,
        };
        observer(&record);
        out.records.push(record);

        let priorities = initial_priorities(&history, &targets);
        buffer.push(history, priorities)?;
        buffer.reanalyse_refresh(&bundle, cfg.training.reanalyse_fraction, &mut rngs.train)?;
        episode_index += 1;

        while (train_steps as f64) < cfg.training.ratio * env_steps as f64 && train_steps < total_steps {
            let lr = crate::nn::learning_rate(cfg.training.lr_init, cfg.training.lr_decay_rate, cfg.training.lr_decay_steps, train_steps);
            let batch = match buffer.sample_batch(cfg.training.batch_size, &mut rngs.train) {
                Ok(b) => b,
                Err(e) if e.is_retryable() => break,
                Err(e) => return Err(e),
            };
            let mut grads = bundle.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            let mut updates = Vec::with_capacity(batch.len());
            for sample in &batch {
                let game = buffer.game(sample.slot);
                let (actions, unroll, explore_targets) =
                    make_unroll(game, sample.step, &targets, action_count, &mut rngs.train)?;
                out.counters.explore_policy_targets += explore_targets as u64;
                let mask: Vec<bool> = if members > 1 {
                    (0..members).map(|_| rngs.train.random::<bool>()).collect()
                } else {
                    Vec::new()
                };
                let result = unrolled_loss_into(
                    &bundle,
                    &game.observations[sample.step],
                    &actions,
                    &unroll,
                    &mask,
                    &loss_cfg,
                    scale,
                    &mut grads,
                )?;
                loss += result.loss * scale;
                updates.push((*sample, (result.initial_value - unroll.steps[0].value).abs()));
            }
            if !loss.is_finite() || !grads.is_finite() {
                if let Some(dir) = checkpoint_dir {
                    let _ = bundle.save_checkpoint(&dir.join(format!("diagnostic-step-{train_steps}")));
                }
                return Err(Error::NonFiniteLoss { step: train_steps });
            }
            for (sample, priority) in &updates {
                buffer.update_priority(sample, *priority);
            }
            optimizer.step(&mut bundle, &grads.flatten(), lr, cfg.training.max_grad_norm)?;
            train_steps += 1;
            out.losses.push(loss);
            if let (Some(dir), true) = (checkpoint_dir, cfg.run.checkpoint_interval > 0) {
                if train_steps % cfg.run.checkpoint_interval == 0 {
                    bundle.save_checkpoint(&dir.join(format!("checkpoint-{train_steps}")))?;
                }
            }
            recent_loss = Some(loss);
            if cfg.training.log_interval > 0 && train_steps % cfg.training.log_interval == 0 {
                let record = LogRecord {
                    env_steps,
                    train_steps,
                    episode_index,
                    episode_type: "train".into(),
                    episode_return: None,
                    loss: Some(loss),
                    lr,
                    root_value_mean: None,
                };
                observer(&record);
                out.records.push(record);
            }
        }
    }
    out.bundle = bundle;
    out.counter = counter;
    out.env_steps = env_steps;
    out.train_steps = train_steps;
    Ok(out)
}
