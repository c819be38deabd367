//! Benchmark environments: the Slide chain and Mountain Car.
//!
//! Each environment exposes its pure transition function through
//! [`EnvModel`], which the count-based estimator and the oracle planning
//! model use to roll the true dynamics forward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LatentState, PlanningModel};

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
    pub truncated: bool,
}

/// Pure description of an environment's dynamics.
pub trait EnvModel {
    fn action_count(&self) -> usize;
    fn observation_size(&self) -> usize;
    /// Deterministic successor state.
    fn next_state(&self, state: &[f64], action: usize) -> Result<Vec<f64>>;
    /// Reward of the transition `state -a-> next`, where `elapsed` counts
    /// steps including this one.
    fn reward(&self, state: &[f64], action: usize, next: &[f64], elapsed: usize) -> f64;
    fn is_terminal(&self, state: &[f64]) -> bool;
    fn observe(&self, state: &[f64]) -> Vec<f64>;
    fn state_from_observation(&self, observation: &[f64]) -> Vec<f64>;
    fn max_steps(&self) -> usize;
}

/// Episodic environment with an explicit reset/step protocol.
pub trait Environment {
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: usize) -> Result<StepResult>;
    fn action_count(&self) -> usize;
    fn observation_size(&self) -> usize;
    fn max_steps(&self) -> usize;
    /// Raw (unscaled) state.
    fn state(&self) -> Vec<f64>;
    fn elapsed(&self) -> usize;
    fn model(&self) -> &dyn EnvModel;
}

/// Runs an [`EnvModel`] as an episodic environment.
#[derive(Clone, Debug)]
pub struct Episodic<M> {
    pub model: M,
    state: Vec<f64>,
    elapsed: usize,
    done: bool,
    started: bool,
}

/// Models that can draw an initial state.
pub trait InitialState {
    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
}

impl<M: EnvModel + InitialState> Episodic<M> {
    pub fn new(model: M) -> Self {
        Self {
            model,
            state: Vec::new(),
            elapsed: 0,
            done: true,
            started: false,
        }
    }
}

impl<M: EnvModel + InitialState> Environment for Episodic<M> {
    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = self.model.initial_state(&mut rng);
        self.elapsed = 0;
        self.done = false;
        self.started = true;
        self.model.observe(&self.state)
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.done {
            return Err(Error::Protocol(if self.started {
                "step after episode end; call reset".into()
            } else {
                "step before reset".into()
            }));
        }
        let next = self.model.next_state(&self.state, action)?;
        self.elapsed += 1;
        let reward = self.model.reward(&self.state, action, &next, self.elapsed);
        let terminal = self.model.is_terminal(&next);
        let truncated = !terminal && self.elapsed >= self.model.max_steps();
        self.state = next;
        self.done = terminal || truncated;
        Ok(StepResult {
            observation: self.model.observe(&self.state),
            reward,
            terminal,
            truncated,
        })
    }

    fn action_count(&self) -> usize {
        self.model.action_count()
    }

    fn observation_size(&self) -> usize {
        self.model.observation_size()
    }

    fn max_steps(&self) -> usize {
        self.model.max_steps()
    }

    fn state(&self) -> Vec<f64> {
        self.state.clone()
    }

    fn elapsed(&self) -> usize {
        self.elapsed
    }

    fn model(&self) -> &dyn EnvModel {
        &self.model
    }
}

fn check_action(action: usize, count: usize) -> Result<()> {
    if action >= count {
        return Err(Error::Domain(format!("action {action} outside [0, {count})")));
    }
    Ok(())
}

/// Chain of `length` positions. Actions: 0 left, 1 stay, 2 right.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slide {
    pub length: usize,
    pub timeout: usize,
    pub goal_terminal: bool,
}

pub const SLIDE_LEFT: usize = 0;
pub const SLIDE_STAY: usize = 1;
pub const SLIDE_RIGHT: usize = 2;

impl Default for Slide {
    fn default() -> Self {
        Self {
            length: 50,
            timeout: 100,
            goal_terminal: true,
        }
    }
}

impl Slide {
    pub fn new(length: usize) -> Self {
        Self {
            length,
            ..Self::default()
        }
    }

    pub fn goal(&self) -> usize {
        self.length - 1
    }

    /// One transition on integer positions.
    pub fn slide_step(&self, position: usize, action: usize) -> Result<(usize, f64, bool)> {
        check_action(action, 3)?;
        let next = match action {
            SLIDE_LEFT => position.saturating_sub(10),
            SLIDE_STAY => position.saturating_sub(5),
            _ => (position + 1).min(self.goal()),
        };
        let at_goal = next == self.goal();
        Ok((next, if at_goal { 1.0 } else { 0.0 }, at_goal && self.goal_terminal))
    }
}

impl EnvModel for Slide {
    fn action_count(&self) -> usize {
        3
    }

    fn observation_size(&self) -> usize {
        1
    }

    fn next_state(&self, state: &[f64], action: usize) -> Result<Vec<f64>> {
        let (next, _, _) = self.slide_step(state[0].round() as usize, action)?;
        Ok(vec![next as f64])
    }

    fn reward(&self, _state: &[f64], _action: usize, next: &[f64], _elapsed: usize) -> f64 {
        if next[0].round() as usize == self.goal() {
            1.0
        } else {
            0.0
        }
    }

    fn is_terminal(&self, state: &[f64]) -> bool {
        self.goal_terminal && state[0].round() as usize == self.goal()
    }

    fn observe(&self, state: &[f64]) -> Vec<f64> {
        vec![state[0] / self.goal() as f64]
    }

    fn state_from_observation(&self, observation: &[f64]) -> Vec<f64> {
        vec![(observation[0] * self.goal() as f64).round()]
    }

    fn max_steps(&self) -> usize {
        self.timeout
    }
}

impl InitialState for Slide {
    fn initial_state(&self, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        vec![0.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardScheme {
    StandardMinusOne,
    PositiveGoalNonmarkovian,
}

pub const MC_MIN_POSITION: f64 = -1.2;
pub const MC_MAX_POSITION: f64 = 0.6;
pub const MC_MAX_SPEED: f64 = 0.07;
pub const MC_GOAL: f64 = 0.5;

/// Classic deterministic Mountain Car. Actions: 0 push left, 1 no push,
/// 2 push right.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MountainCar {
    pub scheme: RewardScheme,
    pub timeout: usize,
}

impl Default for MountainCar {
    fn default() -> Self {
        Self {
            scheme: RewardScheme::StandardMinusOne,
            timeout: 200,
        }
    }
}

impl MountainCar {
    pub fn new(scheme: RewardScheme) -> Self {
        Self {
            scheme,
            ..Self::default()
        }
    }

    pub fn mountain_car_step(&self, position: f64, velocity: f64, action: usize) -> Result<(f64, f64)> {
        check_action(action, 3)?;
        let mut v = velocity + 0.001 * (action as f64 - 1.0) - 0.0025 * (3.0 * position).cos();
        v = v.clamp(-MC_MAX_SPEED, MC_MAX_SPEED);
        let mut x = position + v;
        x = x.clamp(MC_MIN_POSITION, MC_MAX_POSITION);
        if x == MC_MIN_POSITION && v < 0.0 {
            v = 0.0;
        }
        Ok((x, v))
    }
}

impl EnvModel for MountainCar {
    fn action_count(&self) -> usize {
        3
    }

    fn observation_size(&self) -> usize {
        2
    }

    fn next_state(&self, state: &[f64], action: usize) -> Result<Vec<f64>> {
        let (x, v) = self.mountain_car_step(state[0], state[1], action)?;
        Ok(vec![x, v])
    }

    fn reward(&self, _state: &[f64], _action: usize, next: &[f64], elapsed: usize) -> f64 {
        match self.scheme {
            RewardScheme::StandardMinusOne => -1.0,
            RewardScheme::PositiveGoalNonmarkovian => {
                if self.is_terminal(next) {
                    self.timeout as f64 - elapsed as f64
                } else {
                    0.0
                }
            }
        }
    }

    fn is_terminal(&self, state: &[f64]) -> bool {
        state[0] >= MC_GOAL
    }

    fn observe(&self, state: &[f64]) -> Vec<f64> {
        vec![
            2.0 * (state[0] - MC_MIN_POSITION) / (MC_MAX_POSITION - MC_MIN_POSITION) - 1.0,
            state[1] / MC_MAX_SPEED,
        ]
    }

    fn state_from_observation(&self, observation: &[f64]) -> Vec<f64> {
        vec![
            (observation[0] + 1.0) / 2.0 * (MC_MAX_POSITION - MC_MIN_POSITION) + MC_MIN_POSITION,
            observation[1] * MC_MAX_SPEED,
        ]
    }

    fn max_steps(&self) -> usize {
        self.timeout
    }
}

impl InitialState for MountainCar {
    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        vec![rng.random_range(-0.6..-0.4), 0.0]
    }
}

/// Environment selection as stored in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSpec {
    Slide(Slide),
    MountainCar(MountainCar),
}

impl EnvSpec {
    pub fn build(&self) -> Box<dyn Environment> {
        match self {
            EnvSpec::Slide(s) => Box::new(Episodic::new(s.clone())),
            EnvSpec::MountainCar(m) => Box::new(Episodic::new(m.clone())),
        }
    }

    pub fn model(&self) -> &dyn EnvModel {
        match self {
            EnvSpec::Slide(s) => s,
            EnvSpec::MountainCar(m) => m,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvSpec::Slide(_) => "slide",
            EnvSpec::MountainCar(_) => "mountaincar",
        }
    }
}

/// Plans with the true dynamics: the latent is the raw environment state.
/// Terminal states are absorbing with zero reward; leaf values are zero and
/// priors uniform.
pub struct OracleModel<'a> {
    pub env: &'a dyn EnvModel,
    /// Step count at the root, used by time-dependent rewards.
    pub elapsed: usize,
}

impl PlanningModel for OracleModel<'_> {
    fn action_count(&self) -> usize {
        self.env.action_count()
    }

    fn initial_state(&self, observation: &[f64]) -> Result<LatentState> {
        let mut mean = self.env.state_from_observation(observation);
        mean.push(self.elapsed as f64);
        Ok(LatentState::new(mean))
    }

    fn transition(&self, state: &LatentState, action: usize) -> Result<(LatentState, f64)> {
        let (raw, elapsed) = state.mean.split_at(state.mean.len() - 1);
        if self.env.is_terminal(raw) {
            return Ok((state.clone(), 0.0));
        }
        let elapsed = elapsed[0] as usize + 1;
        let next = self.env.next_state(raw, action)?;
        let reward = self.env.reward(raw, action, &next, elapsed);
        let mut mean = next;
        mean.push(elapsed as f64);
        Ok((LatentState::new(mean), reward))
    }

    fn evaluate(&self, _state: &LatentState) -> Result<(f64, Vec<f64>)> {
        let n = self.env.action_count();
        Ok((0.0, vec![1.0 / n as f64; n]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    #[test]
    fn slide_rules() {
        let s = Slide::default();
        assert_eq!(s.slide_step(7, SLIDE_LEFT).unwrap(), (0, 0.0, false));
        assert_eq!(s.slide_step(30, SLIDE_LEFT).unwrap().0, 20);
        assert_eq!(s.slide_step(12, SLIDE_STAY).unwrap().0, 7);
        assert_eq!(s.slide_step(48, SLIDE_RIGHT).unwrap(), (49, 1.0, true));
        assert!(matches!(s.slide_step(3, 3), Err(Error::Domain(_))));
    }

    #[test]
    fn slide_non_terminal_goal_flag() {
        let s = Slide {
            goal_terminal: false,
            ..Slide::default()
        };
        assert_eq!(s.slide_step(48, SLIDE_RIGHT).unwrap(), (49, 1.0, false));
        assert_eq!(s.slide_step(49, SLIDE_RIGHT).unwrap(), (49, 1.0, false));
    }

    #[test]
    fn slide_observation_endpoints() {
        let s = Slide::default();
        assert_eq!(s.observe(&[0.0]), vec![0.0]);
        assert_eq!(s.observe(&[49.0]), vec![1.0]);
        assert_eq!(s.state_from_observation(&[36.0 / 49.0]), vec![36.0]);
    }

    #[test]
    fn slide_shortest_path_is_all_rights() {
        // BFS over the 50-state graph, counting shortest paths.
        let s = Slide::default();
        let mut dist = vec![usize::MAX; 50];
        let mut paths = vec![0u64; 50];
        let mut queue = VecDeque::from([0usize]);
        dist[0] = 0;
        paths[0] = 1;
        while let Some(p) = queue.pop_front() {
            if p == s.goal() {
                continue;
            }
            for a in 0..3 {
                let (n, _, _) = s.slide_step(p, a).unwrap();
                if dist[n] == usize::MAX {
                    dist[n] = dist[p] + 1;
                    queue.push_back(n);
                }
                if dist[n] == dist[p] + 1 {
                    paths[n] += paths[p];
                }
            }
        }
        assert_eq!(dist[49], 49);
        assert_eq!(paths[49], 1);
    }

    #[test]
    fn slide_is_adversarial_to_random_actions() {
        let mut hits = 0;
        for seed in 0..100u64 {
            let s = Slide::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = 0;
            for _ in 0..100_000 {
                let (n, r, _) = s.slide_step(p, rng.random_range(0..3)).unwrap();
                p = n;
                if r > 0.0 {
                    hits += 1;
                    break;
                }
            }
        }
        assert_eq!(hits, 0);
    }

    #[test]
    fn mountain_car_first_step() {
        let mc = MountainCar::default();
        let (x, v) = mc.mountain_car_step(-0.5, 0.0, 1).unwrap();
        let want_v = -0.0025 * (-1.5f64).cos();
        assert!((v - want_v).abs() < 1e-15);
        assert!((x - (-0.5 + want_v)).abs() < 1e-15);
        assert!((v + 0.000177).abs() < 1e-6);
    }

    #[test]
    fn mountain_car_rewards() {
        let mc = MountainCar::default();
        assert_eq!(mc.reward(&[-0.5, 0.0], 1, &[-0.5, 0.0], 3), -1.0);
        let nm = MountainCar::new(RewardScheme::PositiveGoalNonmarkovian);
        assert_eq!(nm.reward(&[0.49, 0.02], 2, &[0.51, 0.02], 150), 50.0);
        assert_eq!(nm.reward(&[0.0, 0.02], 2, &[0.02, 0.02], 150), 0.0);
    }

    #[test]
    fn mountain_car_observation_endpoints_and_inverse() {
        let mc = MountainCar::default();
        assert_eq!(mc.observe(&[-1.2, -0.07]), vec![-1.0, -1.0]);
        let o = mc.observe(&[0.6, 0.07]);
        assert!((o[0] - 1.0).abs() < 1e-15 && (o[1] - 1.0).abs() < 1e-15);
        let back = mc.state_from_observation(&mc.observe(&[-0.3, 0.01]));
        assert!((back[0] + 0.3).abs() < 1e-12 && (back[1] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn mountain_car_left_wall_stops() {
        let mc = MountainCar::default();
        let (x, v) = mc.mountain_car_step(-1.19, -0.07, 0).unwrap();
        assert_eq!(x, MC_MIN_POSITION);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn episode_protocol() {
        let mut env = Episodic::new(Slide {
            length: 3,
            timeout: 5,
            goal_terminal: true,
        });
        assert!(matches!(env.step(0), Err(Error::Protocol(_))));
        env.reset(0);
        assert!(!env.step(SLIDE_RIGHT).unwrap().terminal);
        let r = env.step(SLIDE_RIGHT).unwrap();
        assert!(r.terminal && r.reward == 1.0);
        assert!(matches!(env.step(0), Err(Error::Protocol(_))));
        env.reset(1);
        for i in 0..5 {
            let r = env.step(SLIDE_LEFT).unwrap();
            assert_eq!(r.truncated, i == 4);
            assert!(!r.terminal);
        }
        assert!(env.step(0).is_err());
    }

    #[test]
    fn nonmarkovian_return_rule() {
        let mut env = Episodic::new(MountainCar::new(RewardScheme::PositiveGoalNonmarkovian));
        env.reset(3);
        let mut ret = 0.0;
        let mut steps = 0;
        loop {
            // Energy pumping: push in the direction of motion.
            let v = env.state()[1];
            let r = env.step(if v >= 0.0 { 2 } else { 0 }).unwrap();
            ret += r.reward;
            steps += 1;
            if r.terminal || r.truncated {
                assert!(r.terminal);
                break;
            }
        }
        assert_eq!(ret, 200.0 - steps as f64);

        env.reset(3);
        let mut ret = 0.0;
        loop {
            let r = env.step(1).unwrap();
            ret += r.reward;
            if r.terminal || r.truncated {
                assert!(r.truncated);
                break;
            }
        }
        assert_eq!(ret, 0.0);
    }

    #[test]
    fn mountain_car_reset_range() {
        let mut env = Episodic::new(MountainCar::default());
        for seed in 0..50 {
            env.reset(seed);
            let s = env.state();
            assert!((-0.6..-0.4).contains(&s[0]) && s[1] == 0.0);
        }
    }

    #[test]
    fn oracle_model_absorbs_terminal() {
        let s = Slide::new(5);
        let oracle = OracleModel { env: &s, elapsed: 0 };
        let root = oracle.initial_state(&s.observe(&[3.0])).unwrap();
        let (goal, r) = oracle.transition(&root, SLIDE_RIGHT).unwrap();
        assert_eq!(r, 1.0);
        let (again, r2) = oracle.transition(&goal, SLIDE_RIGHT).unwrap();
        assert_eq!((again, r2), (goal, 0.0));
    }
}
