//! The learned model: representation, dynamics, reward, value and policy
//! networks, plus the unrolled multi-step training loss.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    decode_weights, encode_scalar, log_softmax, read_checkpoint, softmax, write_checkpoint, Activation,
    CategoricalScalar, DenseNetworkSpec, EnsembleMember, ForwardTrace, Network, OutputActivation,
    PriorEnsembleSpec, SupportSpec,
};
use crate::uncertainty::{propagate_state_moments, CovarianceMap, MomentPair, TransitionMap};

/// Abstract state inside the planning tree.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub mean: Vec<f64>,
    pub covariance: Option<DMatrix<f64>>,
}

impl LatentState {
    pub fn new(mean: Vec<f64>) -> Self {
        Self {
            mean,
            covariance: None,
        }
    }
}

/// What a search needs from a model. Implemented by [`ModelBundle`] and by
/// oracle models built from a true environment.
pub trait PlanningModel {
    fn action_count(&self) -> usize;

    fn initial_state(&self, observation: &[f64]) -> Result<LatentState>;

    /// Next latent and the (decoded) reward of the transition.
    fn transition(&self, state: &LatentState, action: usize) -> Result<(LatentState, f64)>;

    /// Decoded value and policy prior.
    fn evaluate(&self, state: &LatentState) -> Result<(f64, Vec<f64>)>;

    /// `J_r Σ J_rᵀ` for the reward predicted at `state`; zero without covariance.
    fn reward_variance_term(&self, _state: &LatentState) -> Result<f64> {
        Ok(0.0)
    }

    /// `J_v Σ J_vᵀ` for the value predicted at `state`; zero without covariance.
    fn value_variance_term(&self, _state: &LatentState) -> Result<f64> {
        Ok(0.0)
    }
}

/// A categorical output block made of one or more randomized-prior members.
/// A plain head is a single member with `prior_scale = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalHead {
    pub ensemble: PriorEnsembleSpec,
    pub members: Vec<EnsembleMember>,
}

struct MemberTrace {
    trainable: ForwardTrace,
    prior: Option<ForwardTrace>,
    logits: Vec<f64>,
}

impl CategoricalHead {
    fn new<R: Rng + ?Sized>(spec: DenseNetworkSpec, members: usize, prior_scale: f64, rng: &mut R) -> Self {
        let ensemble = PriorEnsembleSpec {
            member_count: members,
            prior_scale,
            base_spec: spec.with_output(OutputActivation::Identity),
        };
        let members = ensemble.init_members(rng);
        Self { ensemble, members }
    }

    pub fn member_count(&self) -> usize {
        self.members.len()
    }

    fn spec(&self) -> &DenseNetworkSpec {
        &self.ensemble.base_spec
    }

    fn member_trace(&self, m: usize, x: &[f64]) -> Result<MemberTrace> {
        let member = &self.members[m];
        let trainable = crate::nn::forward_trace(self.spec(), &member.trainable, x)?;
        let mut logits = trainable.output().to_vec();
        let prior = if self.ensemble.prior_scale != 0.0 {
            let p = crate::nn::forward_trace(self.spec(), &member.prior, x)?;
            for (l, v) in logits.iter_mut().zip(p.output()) {
                *l += self.ensemble.prior_scale * v;
            }
            Some(p)
        } else {
            None
        };
        Ok(MemberTrace {
            trainable,
            prior,
            logits,
        })
    }

    /// Accumulates trainable-parameter gradients; returns the input gradient.
    fn member_backward(
        &self,
        m: usize,
        trace: &MemberTrace,
        upstream: &[f64],
        scale: f64,
        grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        let member = &self.members[m];
        let mut dx = crate::nn::backward_into(self.spec(), &member.trainable, &trace.trainable, upstream, scale, grads)?;
        if let Some(prior) = &trace.prior {
            let mut scratch = vec![0.0; member.prior.len()];
            let dp = crate::nn::backward_into(self.spec(), &member.prior, prior, upstream, 0.0, &mut scratch)?;
            for (d, p) in dx.iter_mut().zip(dp) {
                *d += self.ensemble.prior_scale * p;
            }
        }
        Ok(dx)
    }

    /// Per-member probability vectors.
    pub fn distributions(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        (0..self.members.len())
            .map(|m| Ok(softmax(&self.ensemble.member_logits(&self.members[m], x)?)))
            .collect()
    }

    /// Average of the member distributions.
    pub fn mean_distribution(&self, x: &[f64]) -> Result<Vec<f64>> {
        let dists = self.distributions(x)?;
        Ok(crate::nn::ensemble_mean(&dists))
    }

    /// Gradient of the decoded mean prediction w.r.t. the input.
    pub fn decoded_gradient(&self, x: &[f64], support: SupportSpec) -> Result<Vec<f64>> {
        let bins = support.bin_values();
        let n = self.members.len() as f64;
        let mut grad = vec![0.0; x.len()];
        for m in 0..self.members.len() {
            let trace = self.member_trace(m, x)?;
            let p = softmax(&trace.logits);
            let mean = decode_weights(&p, support);
            let upstream: Vec<f64> = p.iter().zip(&bins).map(|(pi, b)| pi * (b - mean) / n).collect();
            let mut scratch = vec![0.0; self.members[m].trainable.len()];
            let dx = self.member_backward(m, &trace, &upstream, 0.0, &mut scratch)?;
            for (g, d) in grad.iter_mut().zip(dx) {
                *g += d;
            }
        }
        Ok(grad)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub observation_size: usize,
    pub action_count: usize,
    pub latent_size: usize,
    pub hidden_size: usize,
    pub support: usize,
    pub activation: Activation,
    /// Members of the reward and value heads; 1 means a plain head.
    pub ensemble_size: usize,
    pub prior_scale: f64,
}

impl ModelConfig {
    pub fn new(observation_size: usize, action_count: usize) -> Self {
        Self {
            observation_size,
            action_count,
            latent_size: 4,
            hidden_size: 16,
            support: 15,
            activation: Activation::Elu,
            ensemble_size: 1,
            prior_scale: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub representation: Network,
    pub dynamics: Network,
    pub reward: CategoricalHead,
    pub value: CategoricalHead,
    pub policy: Network,
    /// State covariance map used when propagating latent moments; `None`
    /// disables propagation entirely.
    pub propagation: Option<CovarianceMap>,
}

impl ModelBundle {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let h = config.hidden_size;
        let z = config.latent_size;
        let act = config.activation;
        let representation = DenseNetworkSpec::new(vec![config.observation_size, h, z], act, OutputActivation::Identity)?;
        let dynamics = DenseNetworkSpec::new(vec![z + config.action_count, h, h, z], act, OutputActivation::Identity)?;
        let head = DenseNetworkSpec::new(vec![z, h, h, 2 * config.support + 1], act, OutputActivation::Identity)?;
        let policy = DenseNetworkSpec::new(vec![z, h, h, config.action_count], act, OutputActivation::Identity)?;
        if config.ensemble_size == 0 {
            return Err(Error::Config("ensemble_size must be at least 1".into()));
        }
        let prior_scale = if config.ensemble_size > 1 { config.prior_scale } else { 0.0 };
        Ok(Self {
            representation: Network::random(representation, rng),
            dynamics: Network::random(dynamics, rng),
            reward: CategoricalHead::new(head.clone(), config.ensemble_size, prior_scale, rng),
            value: CategoricalHead::new(head, config.ensemble_size, prior_scale, rng),
            policy: Network::random(policy, rng),
            config,
            propagation: None,
        })
    }

    pub fn support(&self) -> SupportSpec {
        SupportSpec::new(self.config.support)
    }

    pub fn action_count(&self) -> usize {
        self.config.action_count
    }

    fn dynamics_input(&self, mean: &[f64], action: usize) -> Result<Vec<f64>> {
        if action >= self.config.action_count {
            return Err(Error::Domain(format!(
                "action {action} outside [0, {})",
                self.config.action_count
            )));
        }
        let mut input = Vec::with_capacity(mean.len() + self.config.action_count);
        input.extend_from_slice(mean);
        input.extend((0..self.config.action_count).map(|i| if i == action { 1.0 } else { 0.0 }));
        Ok(input)
    }

    pub fn represent(&self, observation: &[f64]) -> Result<LatentState> {
        let mean = self.representation.forward(observation)?;
        let covariance = self
            .propagation
            .as_ref()
            .map(|_| DMatrix::zeros(mean.len(), mean.len()));
        Ok(LatentState { mean, covariance })
    }

    /// Advances the latent by one action. The reward head reads the
    /// post-transition latent.
    pub fn step_dynamics(&self, state: &LatentState, action: usize) -> Result<(LatentState, CategoricalScalar)> {
        let input = self.dynamics_input(&state.mean, action)?;
        let next = match (&self.propagation, &state.covariance) {
            (Some(noise), Some(cov)) => {
                let moments = MomentPair::new(state.mean.clone(), cov.clone())?;
                let out = propagate_state_moments(&DynamicsMap { bundle: self }, noise, &moments, action)?;
                LatentState {
                    mean: out.mean.iter().copied().collect(),
                    covariance: Some(out.covariance),
                }
            }
            _ => LatentState::new(self.dynamics.forward(&input)?),
        };
        let reward = CategoricalScalar(self.reward.mean_distribution(&next.mean)?);
        Ok((next, reward))
    }

    pub fn predict(&self, state: &LatentState) -> Result<(CategoricalScalar, Vec<f64>)> {
        let value = CategoricalScalar(self.value.mean_distribution(&state.mean)?);
        let policy = softmax(&self.policy.forward(&state.mean)?);
        Ok((value, policy))
    }

    /// Decoded value prediction straight from an observation.
    pub fn value_of_observation(&self, observation: &[f64]) -> Result<f64> {
        let latent = self.represent(observation)?;
        let dist = self.value.mean_distribution(&latent.mean)?;
        Ok(decode_weights(&dist, self.support()))
    }

    /// Flat copy of every trainable parameter (priors excluded).
    pub fn trainable_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.representation.params);
        out.extend_from_slice(&self.dynamics.params);
        for m in &self.reward.members {
            out.extend_from_slice(&m.trainable);
        }
        for m in &self.value.members {
            out.extend_from_slice(&m.trainable);
        }
        out.extend_from_slice(&self.policy.params);
        out
    }

    pub fn set_trainable_params(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.trainable_params().len();
        if flat.len() != expected {
            return Err(Error::InputShape {
                expected,
                got: flat.len(),
            });
        }
        let mut rest = flat;
        let mut take = |dst: &mut Vec<f64>| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        take(&mut self.representation.params);
        take(&mut self.dynamics.params);
        for m in &mut self.reward.members {
            take(&mut m.trainable);
        }
        for m in &mut self.value.members {
            take(&mut m.trainable);
        }
        take(&mut self.policy.params);
        Ok(())
    }

    pub fn zero_grads(&self) -> BundleGrads {
        BundleGrads {
            representation: vec![0.0; self.representation.params.len()],
            dynamics: vec![0.0; self.dynamics.params.len()],
            reward: self.reward.members.iter().map(|m| vec![0.0; m.trainable.len()]).collect(),
            value: self.value.members.iter().map(|m| vec![0.0; m.trainable.len()]).collect(),
            policy: vec![0.0; self.policy.params.len()],
        }
    }

    /// Gradient-descent update of the trainable parameters; priors stay frozen.
    pub fn apply_gradients(&mut self, grads: &BundleGrads, lr: f64) {
        use crate::nn::sgd_step;
        sgd_step(&mut self.representation.params, &grads.representation, lr);
        sgd_step(&mut self.dynamics.params, &grads.dynamics, lr);
        for (m, g) in self.reward.members.iter_mut().zip(&grads.reward) {
            sgd_step(&mut m.trainable, g, lr);
        }
        for (m, g) in self.value.members.iter_mut().zip(&grads.value) {
            sgd_step(&mut m.trainable, g, lr);
        }
        sgd_step(&mut self.policy.params, &grads.policy, lr);
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut blocks = Vec::new();
        let mut write = |name: String, spec: &DenseNetworkSpec, params: &[f64]| -> Result<()> {
            let file = format!("{name}.bin");
            write_checkpoint(BufWriter::new(File::create(dir.join(&file))?), spec, params)?;
            blocks.push(BlockEntry { name, file });
            Ok(())
        };
        write("representation".into(), &self.representation.spec, &self.representation.params)?;
        write("dynamics".into(), &self.dynamics.spec, &self.dynamics.params)?;
        for (head_name, head) in [("reward", &self.reward), ("value", &self.value)] {
            for (i, m) in head.members.iter().enumerate() {
                write(format!("{head_name}_{i}"), head.spec(), &m.trainable)?;
                write(format!("{head_name}_{i}_prior"), head.spec(), &m.prior)?;
            }
        }
        write("policy".into(), &self.policy.spec, &self.policy.params)?;
        let manifest = BundleManifest {
            format: "op2e-bundle".into(),
            version: 1,
            config: self.config.clone(),
            reward_support: self.support(),
            value_support: self.support(),
            prior_scale: self.reward.ensemble.prior_scale,
            blocks,
        };
        serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("manifest.json"))?), &manifest)?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let manifest: BundleManifest =
            serde_json::from_reader(BufReader::new(File::open(dir.join("manifest.json"))?))?;
        if manifest.format != "op2e-bundle" || manifest.version != 1 {
            return Err(Error::Checkpoint(format!(
                "unsupported bundle manifest {} v{}",
                manifest.format, manifest.version
            )));
        }
        let read = |name: &str| -> Result<Network> {
            let entry = manifest
                .blocks
                .iter()
                .find(|b| b.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("manifest has no block {name}")))?;
            let (spec, params) = read_checkpoint(BufReader::new(File::open(dir.join(&entry.file))?))?;
            Network::new(spec, params)
        };
        let config = manifest.config.clone();
        let head = |head_name: &str| -> Result<CategoricalHead> {
            let mut members = Vec::new();
            let mut spec = None;
            for i in 0..config.ensemble_size {
                let t = read(&format!("{head_name}_{i}"))?;
                let p = read(&format!("{head_name}_{i}_prior"))?;
                spec = Some(t.spec.clone());
                members.push(EnsembleMember {
                    trainable: t.params,
                    prior: p.params,
                });
            }
            let base_spec = spec.ok_or_else(|| Error::Checkpoint(format!("{head_name} head has no members")))?;
            Ok(CategoricalHead {
                ensemble: PriorEnsembleSpec {
                    member_count: members.len(),
                    prior_scale: manifest.prior_scale,
                    base_spec,
                },
                members,
            })
        };
        Ok(Self {
            representation: read("representation")?,
            dynamics: read("dynamics")?,
            reward: head("reward")?,
            value: head("value")?,
            policy: read("policy")?,
            config,
            propagation: None,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BundleManifest {
    format: String,
    version: u32,
    config: ModelConfig,
    reward_support: SupportSpec,
    value_support: SupportSpec,
    prior_scale: f64,
    blocks: Vec<BlockEntry>,
}

/// The dynamics network viewed as a differentiable map of the latent mean.
struct DynamicsMap<'a> {
    bundle: &'a ModelBundle,
}

impl TransitionMap for DynamicsMap<'_> {
    fn mean(&self, state: &[f64], action: usize) -> Result<Vec<f64>> {
        self.bundle.dynamics.forward(&self.bundle.dynamics_input(state, action)?)
    }

    fn jacobian(&self, state: &[f64], action: usize) -> Result<DMatrix<f64>> {
        let input = self.bundle.dynamics_input(state, action)?;
        let rows = self.bundle.dynamics.input_jacobian(&input, state.len())?;
        Ok(DMatrix::from_fn(rows.len(), state.len(), |r, c| rows[r][c]))
    }
}

fn quadratic_form(grad: &[f64], cov: &DMatrix<f64>) -> f64 {
    let g = nalgebra::DVector::from_column_slice(grad);
    (g.transpose() * cov * &g)[(0, 0)].max(0.0)
}

impl PlanningModel for ModelBundle {
    fn action_count(&self) -> usize {
        self.config.action_count
    }

    fn initial_state(&self, observation: &[f64]) -> Result<LatentState> {
        self.represent(observation)
    }

    fn transition(&self, state: &LatentState, action: usize) -> Result<(LatentState, f64)> {
        let (next, reward) = self.step_dynamics(state, action)?;
        let r = decode_weights(reward.weights(), self.support());
        Ok((next, r))
    }

    fn evaluate(&self, state: &LatentState) -> Result<(f64, Vec<f64>)> {
        let (value, policy) = self.predict(state)?;
        Ok((decode_weights(value.weights(), self.support()), policy))
    }

    fn reward_variance_term(&self, state: &LatentState) -> Result<f64> {
        match &state.covariance {
            Some(cov) => Ok(quadratic_form(&self.reward.decoded_gradient(&state.mean, self.support())?, cov)),
            None => Ok(0.0),
        }
    }

    fn value_variance_term(&self, state: &LatentState) -> Result<f64> {
        match &state.covariance {
            Some(cov) => Ok(quadratic_form(&self.value.decoded_gradient(&state.mean, self.support())?, cov)),
            None => Ok(0.0),
        }
    }
}

/// Gradients with the same block structure as the trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BundleGrads {
    pub representation: Vec<f64>,
    pub dynamics: Vec<f64>,
    pub reward: Vec<Vec<f64>>,
    pub value: Vec<Vec<f64>>,
    pub policy: Vec<f64>,
}

impl BundleGrads {
    /// Same ordering as [`ModelBundle::trainable_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.representation);
        out.extend_from_slice(&self.dynamics);
        for g in &self.reward {
            out.extend_from_slice(g);
        }
        for g in &self.value {
            out.extend_from_slice(g);
        }
        out.extend_from_slice(&self.policy);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|g| g.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTarget {
    pub value: f64,
    /// Reward of the transition into this step; ignored at step 0.
    pub reward: f64,
    pub policy: Vec<f64>,
    /// False past the end of the episode; masks every term of the step.
    pub mask: bool,
    /// False where no search produced a policy (terminal or final observation).
    pub policy_mask: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnrollTargets {
    pub steps: Vec<StepTarget>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub value_loss_weight: f64,
    /// Multiplier on the latent gradient passed back through each dynamics step.
    pub gradient_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            value_loss_weight: 1.0,
            gradient_scale: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossParts {
    pub value: f64,
    pub reward: f64,
    pub policy: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.value + self.reward + self.policy
    }
}

#[derive(Clone, Debug)]
pub struct UnrollOutput {
    pub loss: f64,
    pub parts: LossParts,
    /// Decoded value prediction at the first step.
    pub initial_value: f64,
}

/// Cross-entropy of `softmax(logits)` against `target`, with its gradient
/// w.r.t. the logits.
fn cross_entropy(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let logp = log_softmax(logits);
    let mass: f64 = target.iter().sum();
    let loss = -target.iter().zip(&logp).map(|(t, l)| if *t == 0.0 { 0.0 } else { t * l }).sum::<f64>();
    let grad = logp.iter().zip(target).map(|(l, t)| l.exp() * mass - t).collect();
    (loss, grad)
}

/// Loss of one head over its active ensemble members; accumulates member
/// gradients and returns (loss, input gradient).
#[allow(clippy::too_many_arguments)]
fn head_loss(
    head: &CategoricalHead,
    x: &[f64],
    target: &[f64],
    weight: f64,
    active: &[bool],
    scale: f64,
    grads: &mut [Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    let count = active.iter().filter(|a| **a).count();
    let mut dx = vec![0.0; x.len()];
    if count == 0 {
        return Ok((0.0, dx));
    }
    let share = weight / count as f64;
    let mut loss = 0.0;
    for m in (0..head.member_count()).filter(|&m| active[m]) {
        let trace = head.member_trace(m, x)?;
        let (l, mut g) = cross_entropy(&trace.logits, target);
        loss += share * l;
        for v in &mut g {
            *v *= share;
        }
        let d = head.member_backward(m, &trace, &g, scale, &mut grads[m])?;
        for (a, b) in dx.iter_mut().zip(d) {
            *a += b;
        }
    }
    Ok((loss, dx))
}

/// Unrolled loss over `actions.len()` dynamics steps.
///
/// `bootstrap` selects which reward/value ensemble members see this sample;
/// an empty slice activates all of them. Gradients, multiplied by `scale`,
/// are added into `grads`.
#[allow(clippy::too_many_arguments)]
pub fn unrolled_loss_into(
    bundle: &ModelBundle,
    observation: &[f64],
    actions: &[usize],
    targets: &UnrollTargets,
    bootstrap: &[bool],
    cfg: &LossConfig,
    scale: f64,
    grads: &mut BundleGrads,
) -> Result<UnrollOutput> {
    let k_steps = actions.len();
    if targets.steps.len() != k_steps + 1 {
        return Err(Error::InputShape {
            expected: k_steps + 1,
            got: targets.steps.len(),
        });
    }
    let members = bundle.reward.member_count();
    let all = vec![true; members];
    let active: &[bool] = if bootstrap.is_empty() { &all } else { bootstrap };
    if active.len() != members {
        return Err(Error::Config(format!(
            "bootstrap mask has {} entries for {members} members",
            active.len()
        )));
    }
    let support = bundle.support();
    let latent_size = bundle.config.latent_size;

    let rep_trace = bundle.representation.trace(observation)?;
    let mut latents = vec![rep_trace.output().to_vec()];
    let mut dyn_traces = Vec::with_capacity(k_steps);
    for (k, &a) in actions.iter().enumerate() {
        let input = bundle.dynamics_input(&latents[k], a)?;
        let trace = bundle.dynamics.trace(&input)?;
        latents.push(trace.output().to_vec());
        dyn_traces.push(trace);
    }

    let initial_value = decode_weights(&bundle.value.mean_distribution(&latents[0])?, support);
    let mut parts = LossParts::default();
    let mut latent_grads = vec![vec![0.0; latent_size]; k_steps + 1];

    for (k, step) in targets.steps.iter().enumerate() {
        if !step.mask {
            continue;
        }
        let s = &latents[k];
        let value_target = encode_scalar(step.value, support);
        let (lv, dv) = head_loss(
            &bundle.value,
            s,
            value_target.weights(),
            cfg.value_loss_weight,
            active,
            scale,
            &mut grads.value,
        )?;
        parts.value += lv;
        add_into(&mut latent_grads[k], &dv);
        if k >= 1 {
            let reward_target = encode_scalar(step.reward, support);
            let (lr, dr) = head_loss(&bundle.reward, s, reward_target.weights(), 1.0, active, scale, &mut grads.reward)?;
            parts.reward += lr;
            add_into(&mut latent_grads[k], &dr);
        }
        if step.policy_mask {
            let trace = bundle.policy.trace(s)?;
            let (lp, g) = cross_entropy(trace.output(), &step.policy);
            parts.policy += lp;
            let dp = bundle.policy.backward_into(&trace, &g, scale, &mut grads.policy)?;
            add_into(&mut latent_grads[k], &dp);
        }
    }

    for k in (0..k_steps).rev() {
        let upstream = latent_grads[k + 1].clone();
        if upstream.iter().all(|g| *g == 0.0) {
            continue;
        }
        let dx = bundle.dynamics.backward_into(&dyn_traces[k], &upstream, scale, &mut grads.dynamics)?;
        for (g, d) in latent_grads[k].iter_mut().zip(&dx[..latent_size]) {
            *g += cfg.gradient_scale * d;
        }
    }
    if latent_grads[0].iter().any(|g| *g != 0.0) {
        bundle
            .representation
            .backward_into(&rep_trace, &latent_grads[0], scale, &mut grads.representation)?;
    }

    Ok(UnrollOutput {
        loss: parts.total(),
        parts,
        initial_value,
    })
}

/// Single-sample unrolled loss and its gradients.
pub fn unrolled_loss(
    bundle: &ModelBundle,
    observation: &[f64],
    actions: &[usize],
    targets: &UnrollTargets,
    bootstrap: &[bool],
    cfg: &LossConfig,
) -> Result<(f64, BundleGrads)> {
    let mut grads = bundle.zero_grads();
    let out = unrolled_loss_into(bundle, observation, actions, targets, bootstrap, cfg, 1.0, &mut grads)?;
    Ok((out.loss, grads))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
