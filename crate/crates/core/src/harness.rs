//! Declarative experiment configuration, built-in presets, ablation grids and
//! the multi-seed runner that writes per-seed and aggregate CSV logs.
//!
//! Config files are TOML. Only the keys that differ from the defaults need to
//! be given; defaults depend on the environment (`[env] kind`), or on the
//! preset named by a top-level `preset` key.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::{EnvSpec, MountainCar, RewardScheme, Slide};
use crate::error::{Error, Result};
use crate::mcts::{run_search, RuleKind, SearchConfig, SelectionRule};
use crate::model::ModelBundle;
use crate::nn::Activation;
use crate::training::{train_loop, LogRecord, PolicyMode, RunCounters, TargetMode, ValueMode};
use crate::uncertainty::ZeroUncertainty;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_VAR: &str = "OP2E_OUTPUT_ROOT";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// No uncertainty at all; exploration rules are rejected.
    None,
    /// Exploration machinery with an estimator that always returns zero.
    Zero,
    Ensemble,
    VisitCount,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub beta: f64,
    pub epsilon: f64,
    pub horizon: usize,
    pub ensemble_size: usize,
    pub prior_scale: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            kind: EstimatorKind::VisitCount,
            beta: 1.0,
            epsilon: 0.1,
            horizon: 3,
            ensemble_size: 5,
            prior_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    #[serde(rename = "rule")]
    pub rule_kind: RuleKind,
    pub c_p: f64,
    pub c_1: f64,
    pub c_2: f64,
    pub c_sigma: f64,
    pub normalize_q: bool,
    pub budget: usize,
    pub dirichlet_alpha: f64,
    pub exploration_fraction: f64,
    /// Split the budget between the two trees of double planning.
    pub split_budget: bool,
}

impl SearchSection {
    pub fn rule(&self) -> SelectionRule {
        SelectionRule {
            kind: self.rule_kind,
            c_p: self.c_p,
            c_1: self.c_1,
            c_2: self.c_2,
            c_sigma: self.c_sigma,
            normalize_q: self.normalize_q,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetsSection {
    pub value_mode: ValueMode,
    pub policy_mode: PolicyMode,
    pub alternating: bool,
    pub double_planning: bool,
    pub n_step: usize,
    pub unroll_steps: usize,
}

impl TargetsSection {
    pub fn mode(&self) -> TargetMode {
        TargetMode {
            value_mode: self.value_mode,
            policy_mode: self.policy_mode,
            alternating: self.alternating,
            double_planning: self.double_planning,
        }
    }

    fn set_mode(&mut self, m: TargetMode) {
        self.value_mode = m.value_mode;
        self.policy_mode = m.policy_mode;
        self.alternating = m.alternating;
        self.double_planning = m.double_planning;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub discount: f64,
    pub training_steps: u64,
    /// Training steps per environment step.
    pub ratio: f64,
    pub batch_size: usize,
    /// Capacity in games.
    pub buffer_size: usize,
    pub lr_init: f64,
    pub lr_decay_rate: f64,
    pub lr_decay_steps: u64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
    pub value_loss_weight: f64,
    pub gradient_scale: f64,
    pub priority_exponent: f64,
    /// Fraction of stored steps whose values are refreshed after each episode.
    pub reanalyse_fraction: f64,
    pub log_interval: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub latent_size: usize,
    pub hidden_size: usize,
    pub support: usize,
    pub activation: Activation,
    pub propagate_covariance: bool,
    pub state_noise: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            latent_size: 4,
            hidden_size: 16,
            support: 15,
            activation: Activation::Elu,
            propagate_covariance: false,
            state_noise: 0.0,
        }
    }
}

/// Piecewise-constant temperature over the fraction of training done.
/// `values[i]` applies from `breakpoints[i-1]` (or 0) up to `breakpoints[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

impl TemperatureSchedule {
    pub fn regular() -> Self {
        Self {
            breakpoints: vec![0.3, 0.5],
            values: vec![1.0, 0.5, 0.25],
        }
    }

    pub fn low_slide() -> Self {
        Self {
            breakpoints: vec![0.3, 0.5, 0.75],
            values: vec![0.75, 0.25, 0.175, 0.02],
        }
    }

    pub fn low_mountain_car() -> Self {
        Self {
            breakpoints: vec![0.3, 0.5, 0.75],
            values: vec![0.5, 0.25, 0.175, 0.1],
        }
    }

    fn validate(&self, errors: &mut Vec<String>) {
        if self.values.len() != self.breakpoints.len() + 1 {
            errors.push(format!(
                "temperature.values: expected {} values for {} breakpoints, got {}",
                self.breakpoints.len() + 1,
                self.breakpoints.len(),
                self.values.len()
            ));
        }
        let mut prev = 0.0;
        for b in &self.breakpoints {
            if !(*b > prev && *b <= 1.0) {
                errors.push("temperature.breakpoints: must be strictly increasing within (0, 1]".into());
                break;
            }
            prev = *b;
        }
        if self.values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            errors.push("temperature.values: must be positive".into());
        }
    }
}

pub fn temperature_at(schedule: &TemperatureSchedule, train_step: u64, total_steps: u64) -> f64 {
    let frac = if total_steps == 0 { 0.0 } else { train_step as f64 / total_steps as f64 };
    let idx = schedule.breakpoints.iter().filter(|b| **b <= frac).count();
    schedule.values[idx.min(schedule.values.len() - 1)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seeds: usize,
    pub seed_base: u64,
    /// Stop after this many environment steps; 0 means no limit.
    pub max_env_steps: u64,
    /// Save a checkpoint every this many training steps; 0 saves only the final model.
    pub checkpoint_interval: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seeds: 10,
            seed_base: 0,
            max_env_steps: 0,
            checkpoint_interval: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub env: EnvSpec,
    pub estimator: EstimatorConfig,
    pub search: SearchSection,
    pub targets: TargetsSection,
    pub training: TrainingSection,
    pub model: ModelSection,
    pub temperature: TemperatureSchedule,
    pub run: RunSection,
}

impl ExperimentConfig {
    /// OP2E with visit counts and the hyperparameters of the environment.
    pub fn defaults_for(env: &EnvSpec) -> Self {
        let slide = matches!(env, EnvSpec::Slide(_));
        let search = SearchSection {
            rule_kind: RuleKind::UctExplore,
            c_p: 0.25,
            c_1: 19652.0,
            c_2: 1.25,
            c_sigma: 10.0,
            normalize_q: false,
            budget: if slide { 30 } else { 200 },
            dirichlet_alpha: 0.25,
            exploration_fraction: 0.25,
            split_budget: false,
        };
        let training = TrainingSection {
            discount: if slide { 0.95 } else { 0.997 },
            training_steps: if slide { 70_000 } else { 120_000 },
            ratio: if slide { 2.25 } else { 1.75 },
            batch_size: 128,
            buffer_size: if slide { 500 } else { 1000 },
            lr_init: 0.02,
            lr_decay_rate: 0.9,
            lr_decay_steps: if slide { 500 } else { 2000 },
            momentum: 0.9,
            max_grad_norm: 5.0,
            value_loss_weight: 1.0,
            gradient_scale: 0.5,
            priority_exponent: 0.5,
            reanalyse_fraction: 0.1,
            log_interval: 500,
        };
        Self {
            name: format!("{}-op2e-counts", env.name()),
            env: env.clone(),
            estimator: EstimatorConfig::default(),
            search,
            targets: TargetsSection {
                value_mode: ValueMode::Max,
                policy_mode: PolicyMode::Max,
                alternating: true,
                double_planning: true,
                n_step: 50,
                unroll_steps: 10,
            },
            training,
            model: ModelSection::default(),
            temperature: if slide {
                TemperatureSchedule::low_slide()
            } else {
                TemperatureSchedule::low_mountain_car()
            },
            run: RunSection::default(),
        }
    }

    /// Turns an OP2E config into its vanilla counterpart: only the estimator,
    /// the selection rule, the target mode and the temperatures change.
    pub fn into_vanilla(mut self) -> Self {
        self.estimator.kind = EstimatorKind::None;
        self.search.rule_kind = self.search.rule_kind.base();
        self.search.c_sigma = 0.0;
        self.targets.set_mode(TargetMode::vanilla());
        self.temperature = TemperatureSchedule::regular();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                errors.push(msg.to_string());
            }
        };
        match &self.env {
            EnvSpec::Slide(s) => {
                check(s.length >= 2, "env.length: must be at least 2");
                check(s.timeout >= 1, "env.timeout: must be positive");
            }
            EnvSpec::MountainCar(m) => check(m.timeout >= 1, "env.timeout: must be positive"),
        }
        let e = &self.estimator;
        check(
            !(e.kind == EstimatorKind::None && self.search.rule_kind.is_explore()),
            "search.rule: exploration rules need an uncertainty estimator (estimator.kind is none)",
        );
        check(e.beta > 0.0, "estimator.beta: must be positive");
        check(e.epsilon > 0.0, "estimator.epsilon: must be positive");
        check(
            e.kind != EstimatorKind::Ensemble || e.ensemble_size >= 2,
            "estimator.ensemble_size: an ensemble needs at least 2 members",
        );
        check(e.prior_scale >= 0.0, "estimator.prior_scale: must be non-negative");
        let s = &self.search;
        check(s.budget >= 1, "search.budget: must be positive");
        check(s.c_p >= 0.0, "search.c_p: must be non-negative");
        check(s.c_1 > 0.0, "search.c_1: must be positive");
        check(s.c_sigma >= 0.0, "search.c_sigma: must be non-negative");
        check(s.dirichlet_alpha > 0.0, "search.dirichlet_alpha: must be positive");
        check(
            (0.0..=1.0).contains(&s.exploration_fraction),
            "search.exploration_fraction: must lie in [0, 1]",
        );
        let t = &self.targets;
        check(t.n_step >= 1, "targets.n_step: must be positive");
        check(t.unroll_steps >= 1, "targets.unroll_steps: must be positive");
        let tr = &self.training;
        check(tr.discount > 0.0 && tr.discount < 1.0, "training.discount: must lie in (0, 1)");
        check(tr.training_steps >= 1, "training.training_steps: must be positive");
        check(tr.ratio > 0.0, "training.ratio: must be positive");
        check(tr.batch_size >= 1, "training.batch_size: must be positive");
        check(tr.buffer_size >= 1, "training.buffer_size: must be positive");
        check(tr.lr_init > 0.0, "training.lr_init: must be positive");
        check(
            tr.lr_decay_rate > 0.0 && tr.lr_decay_rate <= 1.0,
            "training.lr_decay_rate: must lie in (0, 1]",
        );
        check(tr.lr_decay_steps >= 1, "training.lr_decay_steps: must be positive");
        check((0.0..1.0).contains(&tr.momentum), "training.momentum: must lie in [0, 1)");
        check(tr.max_grad_norm >= 0.0, "training.max_grad_norm: must be non-negative");
        check(tr.value_loss_weight >= 0.0, "training.value_loss_weight: must be non-negative");
        check(
            tr.gradient_scale > 0.0 && tr.gradient_scale <= 1.0,
            "training.gradient_scale: must lie in (0, 1]",
        );
        check(tr.priority_exponent >= 0.0, "training.priority_exponent: must be non-negative");
        check(
            (0.0..=1.0).contains(&tr.reanalyse_fraction),
            "training.reanalyse_fraction: must lie in [0, 1]",
        );
        let m = &self.model;
        check(m.latent_size >= 1, "model.latent_size: must be positive");
        check(m.hidden_size >= 1, "model.hidden_size: must be positive");
        check(m.support >= 1, "model.support: must be positive");
        check(m.state_noise >= 0.0, "model.state_noise: must be non-negative");
        check(self.run.seeds >= 1, "run.seeds: must be positive");
        self.temperature.validate(&mut errors);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn slide_env() -> EnvSpec {
    EnvSpec::Slide(Slide::default())
}

fn mountain_car_env(scheme: RewardScheme) -> EnvSpec {
    EnvSpec::MountainCar(MountainCar::new(scheme))
}

fn ensemble_variant(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.estimator.kind = EstimatorKind::Ensemble;
    cfg.search.c_sigma = 1e4;
    cfg
}

fn desk_slide(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.env = EnvSpec::Slide(Slide::new(25));
    cfg.run.seeds = 5;
    cfg.run.max_env_steps = 5_000;
    cfg.training.training_steps = 11_250;
    cfg.training.batch_size = 32;
    cfg
}

fn desk_mountain_car(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.run.seeds = 5;
    cfg.run.max_env_steps = 10_000;
    cfg.training.training_steps = 17_500;
    cfg.training.batch_size = 16;
    cfg.targets.unroll_steps = 5;
    cfg
}

fn named(mut cfg: ExperimentConfig, name: &str) -> ExperimentConfig {
    cfg.name = name.to_string();
    cfg
}

/// Built-in presets with a one-line description each.
pub fn presets() -> Vec<(&'static str, &'static str, ExperimentConfig)> {
    let slide = ExperimentConfig::defaults_for(&slide_env());
    let mc = ExperimentConfig::defaults_for(&mountain_car_env(RewardScheme::StandardMinusOne));
    let mut slide_ablation = slide.clone();
    slide_ablation.training.training_steps = 45_000;
    let mut mc_ablation = ExperimentConfig::defaults_for(&mountain_car_env(RewardScheme::PositiveGoalNonmarkovian));
    mc_ablation.training.training_steps = 100_000;
    let table: Vec<(&'static str, &'static str, ExperimentConfig)> = vec![
        ("slide-op2e-counts", "Slide, visit-count uncertainty, full OP2E", slide.clone()),
        ("slide-op2e-ensemble", "Slide, ensemble uncertainty, full OP2E", ensemble_variant(slide.clone())),
        ("slide-vanilla", "Slide, plain MuZero-style agent", slide.clone().into_vanilla()),
        ("mountaincar-op2e-counts", "Mountain Car, visit-count uncertainty, full OP2E", mc.clone()),
        ("mountaincar-op2e-ensemble", "Mountain Car, ensemble uncertainty, full OP2E", ensemble_variant(mc.clone())),
        ("mountaincar-vanilla", "Mountain Car, plain MuZero-style agent", mc.clone().into_vanilla()),
        ("slide-ablation", "Slide ablation base (visit counts, 45k training steps)", slide_ablation),
        ("mountaincar-ablation", "Mountain Car ablation base (non-Markovian reward, 100k training steps)", mc_ablation),
        ("slide-desk-op2e-counts", "Slide of length 25, 5 seeds, 5k env steps, visit counts", desk_slide(slide.clone())),
        ("slide-desk-vanilla", "Slide of length 25, 5 seeds, 5k env steps, plain agent", desk_slide(slide).into_vanilla()),
        ("mountaincar-desk-op2e-counts", "Mountain Car, 5 seeds, 10k env steps, visit counts", desk_mountain_car(mc.clone())),
        ("mountaincar-desk-vanilla", "Mountain Car, 5 seeds, 10k env steps, plain agent", desk_mountain_car(mc).into_vanilla()),
    ];
    table.into_iter().map(|(n, d, c)| (n, d, named(c, n))).collect()
}

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    presets().into_iter().find(|(n, _, _)| *n == name).map(|(_, _, c)| c)
}

fn to_table(cfg: &ExperimentConfig) -> Result<toml::Table> {
    toml::Table::try_from(cfg).map_err(|e| Error::Config(e.to_string()))
}

fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in given {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (value, known.get(key)) {
            (_, None) => out.push(format!("{path}: unknown key")),
            (toml::Value::Table(g), Some(toml::Value::Table(k))) => unknown_keys(g, k, &path, out),
            _ => {}
        }
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Parses a config, applying defaults from the named preset or from the
/// environment kind, and validates it.
pub fn load_config_str(text: &str) -> Result<ExperimentConfig> {
    let mut given: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let base = match given.remove("preset") {
        Some(toml::Value::String(name)) => {
            preset(&name).ok_or_else(|| Error::Validation(vec![format!("preset: unknown preset {name:?}")]))?
        }
        Some(_) => return Err(Error::Validation(vec!["preset: must be a string".into()])),
        None => {
            let kind = given
                .get("env")
                .and_then(|e| e.get("kind"))
                .and_then(|k| k.as_str())
                .unwrap_or("slide");
            let env = match kind {
                "slide" => slide_env(),
                "mountain_car" => {
                    let scheme = given
                        .get("env")
                        .and_then(|e| e.get("scheme"))
                        .and_then(|s| s.as_str())
                        .map(|s| if s == "positive_goal_nonmarkovian" { RewardScheme::PositiveGoalNonmarkovian } else { RewardScheme::StandardMinusOne })
                        .unwrap_or(RewardScheme::StandardMinusOne);
                    mountain_car_env(scheme)
                }
                other => return Err(Error::Validation(vec![format!("env.kind: unknown environment {other:?}")])),
            };
            ExperimentConfig::defaults_for(&env)
        }
    };
    let mut table = to_table(&base)?;
    // A different environment kind replaces the whole env table.
    if let (Some(toml::Value::Table(g)), Some(toml::Value::Table(b))) = (given.get("env"), table.get("env")) {
        if g.get("kind").is_some() && g.get("kind") != b.get("kind") {
            table.remove("env");
            let env = match g.get("kind").and_then(|k| k.as_str()) {
                Some("mountain_car") => mountain_car_env(RewardScheme::StandardMinusOne),
                _ => slide_env(),
            };
            table.insert("env".into(), toml::Value::try_from(&env).map_err(|e| Error::Config(e.to_string()))?);
        }
    }
    let mut unknown = Vec::new();
    let mut known = table.clone();
    for env in [slide_env(), mountain_car_env(RewardScheme::StandardMinusOne)] {
        if let Ok(toml::Value::Table(t)) = toml::Value::try_from(&env) {
            if let Some(toml::Value::Table(k)) = known.get_mut("env") {
                k.extend(t);
            }
        }
    }
    unknown_keys(&given, &known, "", &mut unknown);
    if !unknown.is_empty() {
        return Err(Error::Validation(unknown));
    }
    merge(&mut table, given);
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Validation(vec![e.to_string().trim().to_string()]))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    load_config_str(&text)
}

/// Resolves a CLI config argument: a file path, or else a preset name.
pub fn resolve_config(arg: &str) -> Result<ExperimentConfig> {
    let path = Path::new(arg);
    if path.exists() {
        return load_config(path);
    }
    preset(arg).ok_or_else(|| Error::Config(format!("{arg:?} is neither a config file nor a preset name")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Value,
    Policy,
    Alternation,
    Double,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Value, Axis::Policy, Axis::Alternation, Axis::Double];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Value => "value",
            Axis::Policy => "policy",
            Axis::Alternation => "alternation",
            Axis::Double => "double",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

fn value_label(v: ValueMode) -> &'static str {
    match v {
        ValueMode::NStep => "n_step",
        ValueMode::ZeroStep => "zero_step_all",
        ValueMode::ZeroStepExploreOnly => "zero_step_explore_only",
        ValueMode::Max => "max",
    }
}

/// Variants of `base` along one ablation axis, each labelled.
pub fn ablation_axis(base: &ExperimentConfig, axis: Axis) -> Vec<(String, ExperimentConfig)> {
    let with = |label: String, f: &dyn Fn(&mut TargetMode)| {
        let mut cfg = base.clone();
        let mut mode = cfg.targets.mode();
        f(&mut mode);
        cfg.targets.set_mode(mode);
        cfg.name = format!("{}-{}-{}", base.name, axis.name(), label);
        (label, cfg)
    };
    match axis {
        Axis::Value => [ValueMode::Max, ValueMode::NStep, ValueMode::ZeroStepExploreOnly, ValueMode::ZeroStep]
            .into_iter()
            .map(|v| with(value_label(v).into(), &move |m| m.value_mode = v))
            .collect(),
        Axis::Policy => [
            (PolicyMode::Max, "max"),
            (PolicyMode::ExploreOnly, "explore_only"),
            (PolicyMode::ExploitOnly, "exploit_only"),
        ]
        .into_iter()
        .map(|(p, l)| with(l.into(), &move |m| m.policy_mode = p))
        .collect(),
        Axis::Alternation => [(ValueMode::Max, true), (ValueMode::Max, false), (ValueMode::NStep, true), (ValueMode::NStep, false)]
            .into_iter()
            .map(|(v, alt)| {
                let label = format!("{}-{}", value_label(v), if alt { "alt" } else { "no_alt" });
                with(label, &move |m| {
                    m.value_mode = v;
                    m.alternating = alt;
                })
            })
            .collect(),
        Axis::Double => [true, false]
            .into_iter()
            .map(|d| with(if d { "on".into() } else { "off".into() }, &move |m| m.double_planning = d))
            .collect(),
    }
}

/// The full ablation grid: value, policy, alternation and double-planning variants.
pub fn ablation_suite(base: &ExperimentConfig) -> Vec<(Axis, String, ExperimentConfig)> {
    Axis::ALL
        .into_iter()
        .flat_map(|axis| ablation_axis(base, axis).into_iter().map(move |(l, c)| (axis, l, c)))
        .collect()
}

/// Target-mode fields in which two configs differ, by axis; `None` if they
/// also differ outside the target mode (the name aside).
pub fn differing_axes(base: &ExperimentConfig, other: &ExperimentConfig) -> Option<Vec<Axis>> {
    let mut a = base.clone();
    let mut b = other.clone();
    a.name.clear();
    b.name.clear();
    let (ma, mb) = (a.targets.mode(), b.targets.mode());
    b.targets.set_mode(ma);
    if a != b {
        return None;
    }
    let mut axes = Vec::new();
    if ma.value_mode != mb.value_mode {
        axes.push(Axis::Value);
    }
    if ma.policy_mode != mb.policy_mode {
        axes.push(Axis::Policy);
    }
    if ma.alternating != mb.alternating {
        axes.push(Axis::Alternation);
    }
    if ma.double_planning != mb.double_planning {
        axes.push(Axis::Double);
    }
    Some(axes)
}

/// Target-mode fields an axis is allowed to vary.
pub fn axis_fields(axis: Axis) -> &'static [Axis] {
    match axis {
        Axis::Value => &[Axis::Value],
        Axis::Policy => &[Axis::Policy],
        Axis::Alternation => &[Axis::Alternation, Axis::Value],
        Axis::Double => &[Axis::Double],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub train_steps: u64,
    pub seeds: usize,
    pub env_steps_mean: Option<f64>,
    pub return_mean: Option<f64>,
    pub return_sem: Option<f64>,
    pub exploit_return_mean: Option<f64>,
    pub exploit_return_sem: Option<f64>,
    pub loss_mean: Option<f64>,
    pub loss_sem: Option<f64>,
}

/// Mean and standard error of the mean (sample deviation over √n; 0 for one value).
pub fn mean_sem(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return Some((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, (var / n).sqrt()))
}

fn bin_mean(records: &[&LogRecord], f: impl Fn(&LogRecord) -> Option<f64>) -> Option<f64> {
    let xs: Vec<f64> = records.iter().filter_map(|r| f(r)).collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Aggregates per-seed logs into bins of `interval` training steps: each
/// seed contributes its per-bin mean, then mean and SEM are taken over seeds.
pub fn aggregate_records(per_seed: &[Vec<LogRecord>], interval: u64) -> Vec<AggregateRow> {
    let interval = interval.max(1);
    let last_bin = per_seed.iter().flatten().map(|r| r.train_steps / interval).max();
    let Some(last_bin) = last_bin else {
        return Vec::new();
    };
    let mut rows = Vec::new();
    for bin in 0..=last_bin {
        let mut env_steps = Vec::new();
        let mut returns = Vec::new();
        let mut exploit_returns = Vec::new();
        let mut losses = Vec::new();
        let mut seeds = 0;
        for records in per_seed {
            let in_bin: Vec<&LogRecord> = records.iter().filter(|r| r.train_steps / interval == bin).collect();
            if in_bin.is_empty() {
                continue;
            }
            seeds += 1;
            let episodes: Vec<&LogRecord> = in_bin.iter().copied().filter(|r| r.episode_type != "train").collect();
            let exploit: Vec<&LogRecord> = episodes.iter().copied().filter(|r| r.episode_type == "exploit").collect();
            if let Some(m) = bin_mean(&in_bin, |r| Some(r.env_steps as f64)) {
                env_steps.push(m);
            }
            if let Some(m) = bin_mean(&episodes, |r| r.episode_return) {
                returns.push(m);
            }
            if let Some(m) = bin_mean(&exploit, |r| r.episode_return) {
                exploit_returns.push(m);
            }
            if let Some(m) = bin_mean(&in_bin, |r| r.loss) {
                losses.push(m);
            }
        }
        if seeds == 0 {
            continue;
        }
        let r = mean_sem(&returns);
        let x = mean_sem(&exploit_returns);
        let l = mean_sem(&losses);
        rows.push(AggregateRow {
            train_steps: bin * interval,
            seeds,
            env_steps_mean: mean_sem(&env_steps).map(|p| p.0),
            return_mean: r.map(|p| p.0),
            return_sem: r.map(|p| p.1),
            exploit_return_mean: x.map(|p| p.0),
            exploit_return_sem: x.map(|p| p.1),
            loss_mean: l.map(|p| p.0),
            loss_sem: l.map(|p| p.1),
        });
    }
    rows
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Config(e.to_string()))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e: csv::Error| Error::Config(e.to_string())))
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub csv: PathBuf,
    pub error: Option<String>,
    pub env_steps: u64,
    pub train_steps: u64,
    pub distinct_cells: usize,
    pub counters: RunCounters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub run_dir: PathBuf,
    pub aggregate_csv: PathBuf,
    pub seeds: Vec<SeedOutcome>,
}

impl ExperimentReport {
    pub fn failures(&self) -> usize {
        self.seeds.iter().filter(|s| s.error.is_some()).count()
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

/// Runs every seed of `cfg` into `out_root/<name>`. A failing seed is
/// recorded and the remaining seeds still run.
pub fn run_experiment(cfg: &ExperimentConfig, out_root: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    let run_dir = out_root.join(&cfg.name);
    fs::create_dir_all(&run_dir)?;
    fs::write(run_dir.join("config.toml"), cfg.to_toml()?)?;
    let mut outcomes = Vec::new();
    let mut logs = Vec::new();
    for i in 0..cfg.run.seeds {
        let seed = cfg.run.seed_base + i as u64;
        let seed_dir = run_dir.join(format!("seed-{seed}"));
        fs::create_dir_all(&seed_dir)?;
        let csv_path = run_dir.join(format!("seed-{seed}.csv"));
        let mut records = Vec::new();
        let result = catch_unwind(AssertUnwindSafe(|| {
            train_loop(cfg, seed, Some(&seed_dir), &mut |r| records.push(r.clone()))
        }));
        let mut outcome = SeedOutcome {
            seed,
            csv: csv_path.clone(),
            error: None,
            env_steps: 0,
            train_steps: 0,
            distinct_cells: 0,
            counters: RunCounters::default(),
        };
        match result {
            Ok(Ok(out)) => {
                out.bundle.save_checkpoint(&seed_dir.join("final"))?;
                fs::write(seed_dir.join("visits.txt"), out.counter.to_sparse_text())?;
                outcome.env_steps = out.env_steps;
                outcome.train_steps = out.train_steps;
                outcome.distinct_cells = out.counter.distinct_cells();
                outcome.counters = out.counters;
            }
            Ok(Err(e)) => outcome.error = Some(e.to_string()),
            Err(p) => outcome.error = Some(format!("panicked: {}", panic_message(p))),
        }
        write_csv(&csv_path, &records)?;
        logs.push(records);
        outcomes.push(outcome);
    }
    let aggregate_csv = run_dir.join("aggregate.csv");
    write_csv(&aggregate_csv, &aggregate_records(&logs, cfg.training.log_interval))?;
    let report = ExperimentReport {
        run_dir: run_dir.clone(),
        aggregate_csv,
        seeds: outcomes,
    };
    fs::write(
        run_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

/// Searches from `obs` with a saved model and returns the tree as JSON.
pub fn dump_tree(checkpoint: &Path, obs: &[f64], rule: SelectionRule, budget: usize, gamma: f64, depth: usize) -> Result<serde_json::Value> {
    let bundle = ModelBundle::load_checkpoint(checkpoint)?;
    let cfg = SearchConfig {
        rule,
        budget,
        gamma,
        root_noise: None,
    };
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let (tree, result) = run_search(&bundle, &ZeroUncertainty, obs, None, &cfg, &mut rng)?;
    Ok(serde_json::json!({
        "root_value": result.root_value,
        "visit_counts": result.visit_counts,
        "per_action_q": result.per_action_q,
        "tree": tree.dump(depth),
    }))
}
