//! Monte Carlo tree search over a learned (or oracle) model, with UCT/PUCT
//! selection and their uncertainty-bonus variants.
//!
//! Statistics of an edge `(parent, a)` live on the child reached by `a`:
//! `value_sum` accumulates backed-up returns that include the edge reward,
//! so `q(parent, a) = child.value_sum / child.visit_count`, and
//! `variance_sum` accumulates the matching return variances.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LatentState, PlanningModel};
use crate::uncertainty::{return_variance_backup, UncertaintyContext, UncertaintySource};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Uct,
    Puct,
    UctExplore,
    PuctExplore,
}

impl RuleKind {
    pub fn is_explore(self) -> bool {
        matches!(self, RuleKind::UctExplore | RuleKind::PuctExplore)
    }

    pub fn uses_prior(self) -> bool {
        matches!(self, RuleKind::Puct | RuleKind::PuctExplore)
    }

    /// The same heuristic without the uncertainty bonus.
    pub fn base(self) -> Self {
        match self {
            RuleKind::UctExplore => RuleKind::Uct,
            RuleKind::PuctExplore => RuleKind::Puct,
            k => k,
        }
    }

    pub fn explore(self) -> Self {
        match self {
            RuleKind::Uct => RuleKind::UctExplore,
            RuleKind::Puct => RuleKind::PuctExplore,
            k => k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRule {
    pub kind: RuleKind,
    pub c_p: f64,
    /// PUCT base constant (pb-c-base).
    pub c_1: f64,
    /// PUCT init constant (pb-c-init).
    pub c_2: f64,
    pub c_sigma: f64,
    /// Min-max normalize q inside selection. Defaults to on for PUCT only.
    pub normalize_q: bool,
}

impl SelectionRule {
    pub fn new(kind: RuleKind) -> Self {
        Self {
            kind,
            c_p: 0.25,
            c_1: 19652.0,
            c_2: 1.25,
            c_sigma: 0.0,
            normalize_q: kind.uses_prior(),
        }
    }

    pub fn with_kind(&self, kind: RuleKind) -> Self {
        Self { kind, ..*self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RootNoise {
    pub alpha: f64,
    pub fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub rule: SelectionRule,
    /// Node expansions, the root expansion included.
    pub budget: usize,
    pub gamma: f64,
    pub root_noise: Option<RootNoise>,
}

#[derive(Clone, Debug)]
pub struct SearchNode {
    pub parent: Option<usize>,
    /// Action on the edge into this node.
    pub action: usize,
    pub latent: LatentState,
    pub env_state: Option<Vec<f64>>,
    pub reward_mean: f64,
    pub reward_var: f64,
    pub prior: f64,
    pub visit_count: u32,
    pub value_sum: f64,
    pub variance_sum: f64,
    pub children: Vec<usize>,
    pub expanded: bool,
    pub leaf_value: f64,
    pub leaf_value_var: f64,
    /// `reward_var + γ² leaf_value_var`, the bonus variance before any visit.
    pub one_step_var: f64,
    evaluated: bool,
    policy: Vec<f64>,
}

impl SearchNode {
    fn slot(parent: usize, action: usize, prior: f64) -> Self {
        Self {
            parent: Some(parent),
            action,
            latent: LatentState::new(Vec::new()),
            env_state: None,
            reward_mean: 0.0,
            reward_var: 0.0,
            prior,
            visit_count: 0,
            value_sum: 0.0,
            variance_sum: 0.0,
            children: Vec::new(),
            expanded: false,
            leaf_value: 0.0,
            leaf_value_var: 0.0,
            one_step_var: 0.0,
            evaluated: false,
            policy: Vec::new(),
        }
    }

    /// Mean backed-up return through this node's incoming edge.
    pub fn q(&self) -> Option<f64> {
        (self.visit_count > 0).then(|| self.value_sum / self.visit_count as f64)
    }
}

/// Counters used to show which code paths a search exercised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchCounters {
    pub estimator_calls: u64,
    pub model_transitions: u64,
}

#[derive(Clone, Debug)]
pub struct SearchTree {
    pub nodes: Vec<SearchNode>,
    pub gamma: f64,
    pub counters: SearchCounters,
    min_q: f64,
    max_q: f64,
}

pub const ROOT: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub root_value: f64,
    pub visit_counts: Vec<u32>,
    pub visit_distribution: Vec<f64>,
    pub per_action_q: Vec<f64>,
    pub per_action_variance: Vec<f64>,
}

impl SearchTree {
    fn new(root: SearchNode, gamma: f64) -> Self {
        Self {
            nodes: vec![root],
            gamma,
            counters: SearchCounters::default(),
            min_q: f64::INFINITY,
            max_q: f64::NEG_INFINITY,
        }
    }

    /// Bare tree for hand-built tests and demos: one root with given latent.
    pub fn with_root(latent: LatentState, gamma: f64) -> Self {
        let mut root = SearchNode::slot(0, 0, 1.0);
        root.parent = None;
        root.latent = latent;
        root.evaluated = true;
        Self::new(root, gamma)
    }

    /// Appends an expanded-child slot; used to build trees by hand.
    pub fn add_child(&mut self, parent: usize, action: usize, reward_mean: f64, reward_var: f64) -> usize {
        let idx = self.nodes.len();
        let mut node = SearchNode::slot(parent, action, 1.0);
        node.reward_mean = reward_mean;
        node.reward_var = reward_var;
        node.evaluated = true;
        self.nodes.push(node);
        self.nodes[parent].children.push(idx);
        self.nodes[parent].expanded = true;
        idx
    }

    fn normalized(&self, q: f64) -> f64 {
        if self.max_q > self.min_q {
            (q - self.min_q) / (self.max_q - self.min_q)
        } else {
            q
        }
    }

    /// Picks the child action maximizing the rule's score; ties go to the
    /// lowest action index.
    pub fn select_child(&self, node: usize, rule: &SelectionRule) -> Result<usize> {
        let n = &self.nodes[node];
        if !n.expanded || n.children.is_empty() {
            return Err(Error::Protocol(format!("select_child on unexpanded node {node}")));
        }
        let total: u32 = n.children.iter().map(|&c| self.nodes[c].visit_count).sum();
        let total = total as f64;
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (a, &c) in n.children.iter().enumerate() {
            let child = &self.nodes[c];
            let visits = child.visit_count as f64;
            let mut score = match rule.kind.base() {
                RuleKind::Uct => match child.q() {
                    None => f64::INFINITY,
                    Some(q) => {
                        let q = if rule.normalize_q { self.normalized(q) } else { q };
                        q + 2.0 * rule.c_p * (2.0 * total.ln() / visits).sqrt()
                    }
                },
                _ => {
                    let q = match child.q() {
                        None => 0.0,
                        Some(q) if rule.normalize_q => self.normalized(q),
                        Some(q) => q,
                    };
                    let pb_c = rule.c_2 + ((total + rule.c_1 + 1.0) / rule.c_1).ln();
                    q + child.prior * total.sqrt() / (1.0 + visits) * pb_c
                }
            };
            if rule.kind.is_explore() {
                let mean_var = if child.visit_count == 0 {
                    child.one_step_var
                } else {
                    child.variance_sum / visits
                };
                score += rule.c_sigma * mean_var.max(0.0).sqrt();
            }
            if score > best_score {
                best_score = score;
                best = a;
            }
        }
        Ok(best)
    }

    /// Walks `path` (root first, leaf last) backwards accumulating the
    /// discounted return and its variance.
    pub fn backup(&mut self, path: &[usize], leaf_value: f64, leaf_value_var: f64) {
        let mut nu = leaf_value;
        let mut var = leaf_value_var;
        for &idx in path.iter().rev() {
            let node = &mut self.nodes[idx];
            node.visit_count += 1;
            if node.parent.is_none() {
                continue;
            }
            nu = node.reward_mean + self.gamma * nu;
            var = return_variance_backup(node.reward_var, self.gamma, var);
            node.value_sum += nu;
            node.variance_sum += var;
            let q = node.value_sum / node.visit_count as f64;
            self.min_q = self.min_q.min(q);
            self.max_q = self.max_q.max(q);
        }
    }

    pub fn root_children(&self) -> &[usize] {
        &self.nodes[ROOT].children
    }

    pub fn result(&self) -> SearchResult {
        let kids = self.root_children();
        let visit_counts: Vec<u32> = kids.iter().map(|&c| self.nodes[c].visit_count).collect();
        let total: u32 = visit_counts.iter().sum();
        let visit_distribution = if total == 0 {
            vec![1.0 / kids.len().max(1) as f64; kids.len()]
        } else {
            visit_counts.iter().map(|&n| n as f64 / total as f64).collect()
        };
        let root_value = if total == 0 {
            self.nodes[ROOT].leaf_value
        } else {
            kids.iter().map(|&c| self.nodes[c].value_sum).sum::<f64>() / total as f64
        };
        SearchResult {
            root_value,
            visit_distribution,
            per_action_q: kids.iter().map(|&c| self.nodes[c].q().unwrap_or(0.0)).collect(),
            per_action_variance: kids
                .iter()
                .map(|&c| {
                    let n = &self.nodes[c];
                    if n.visit_count == 0 {
                        n.one_step_var
                    } else {
                        n.variance_sum / n.visit_count as f64
                    }
                })
                .collect(),
            visit_counts,
        }
    }

    /// JSON dump of node statistics down to `max_depth`.
    pub fn dump(&self, max_depth: usize) -> serde_json::Value {
        self.dump_node(ROOT, max_depth)
    }

    fn dump_node(&self, idx: usize, depth: usize) -> serde_json::Value {
        let n = &self.nodes[idx];
        let children: Vec<serde_json::Value> = if depth == 0 {
            Vec::new()
        } else {
            n.children
                .iter()
                .filter(|&&c| self.nodes[c].visit_count > 0)
                .map(|&c| self.dump_node(c, depth - 1))
                .collect()
        };
        serde_json::json!({
            "action": if n.parent.is_some() { Some(n.action) } else { None },
            "visit_count": n.visit_count,
            "q": n.q(),
            "variance_sum": n.variance_sum,
            "reward": n.reward_mean,
            "reward_var": n.reward_var,
            "prior": n.prior,
            "leaf_value": n.leaf_value,
            "leaf_value_var": n.leaf_value_var,
            "latent": n.latent.mean,
            "env_state": n.env_state,
            "children": children,
        })
    }
}

struct Expander<'a> {
    model: &'a dyn PlanningModel,
    estimator: &'a dyn UncertaintySource,
    explore: bool,
}

impl Expander<'_> {
    /// Computes latent, reward, value, policy and (for explore rules) the
    /// local variances of a node. Idempotent.
    fn materialize(&self, tree: &mut SearchTree, idx: usize) -> Result<()> {
        if tree.nodes[idx].evaluated {
            return Ok(());
        }
        let parent = tree.nodes[idx]
            .parent
            .ok_or_else(|| Error::Protocol("root must be evaluated at creation".into()))?;
        let action = tree.nodes[idx].action;
        let (latent, reward) = self.model.transition(&tree.nodes[parent].latent, action)?;
        tree.counters.model_transitions += 1;
        let (value, policy) = self.model.evaluate(&latent)?;
        let mut env_state = None;
        let (mut reward_var, mut value_var) = (0.0, 0.0);
        if self.explore {
            if let (Some(env), Some(s)) = (self.estimator.env_model(), &tree.nodes[parent].env_state) {
                env_state = Some(env.next_state(s, action)?);
            }
            let ctx = UncertaintyContext {
                latent: &latent.mean,
                env_state: env_state.as_deref(),
                action,
            };
            reward_var = self.estimator.reward_variance(&ctx)? + self.model.reward_variance_term(&latent)?;
            value_var = self.estimator.value_variance(&ctx)? + self.model.value_variance_term(&latent)?;
            tree.counters.estimator_calls += 2;
            if !(reward_var.is_finite() && value_var.is_finite()) || reward_var < 0.0 || value_var < 0.0 {
                return Err(Error::Estimator(format!(
                    "estimator returned invalid variances ({reward_var}, {value_var})"
                )));
            }
        }
        let gamma = tree.gamma;
        let node = &mut tree.nodes[idx];
        node.latent = latent;
        node.env_state = env_state;
        node.reward_mean = reward;
        node.reward_var = reward_var;
        node.leaf_value = value;
        node.leaf_value_var = value_var;
        node.one_step_var = reward_var + gamma * gamma * value_var;
        node.policy = policy;
        node.evaluated = true;
        Ok(())
    }

    /// Expands a node: evaluates it and creates one child slot per action.
    /// Returns the leaf value and its variance.
    fn expand(&self, tree: &mut SearchTree, idx: usize) -> Result<(f64, f64)> {
        if tree.nodes[idx].expanded {
            return Err(Error::Protocol(format!("node {idx} expanded twice")));
        }
        self.materialize(tree, idx)?;
        let policy = std::mem::take(&mut tree.nodes[idx].policy);
        let actions = self.model.action_count();
        if policy.len() != actions {
            return Err(Error::InputShape {
                expected: actions,
                got: policy.len(),
            });
        }
        for (a, p) in policy.iter().enumerate() {
            let child = tree.nodes.len();
            tree.nodes.push(SearchNode::slot(idx, a, *p));
            tree.nodes[idx].children.push(child);
        }
        tree.nodes[idx].expanded = true;
        if self.explore {
            for c in tree.nodes[idx].children.clone() {
                self.materialize(tree, c)?;
            }
        }
        let node = &tree.nodes[idx];
        Ok((node.leaf_value, node.leaf_value_var))
    }
}

fn apply_root_noise<R: Rng + ?Sized>(tree: &mut SearchTree, noise: RootNoise, rng: &mut R) -> Result<()> {
    let gamma = Gamma::new(noise.alpha, 1.0).map_err(|e| Error::Config(format!("dirichlet alpha: {e}")))?;
    let kids = tree.nodes[ROOT].children.clone();
    let draws: Vec<f64> = kids.iter().map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    for (c, d) in kids.iter().zip(draws) {
        let eta = if sum > 0.0 { d / sum } else { 1.0 / kids.len() as f64 };
        let node = &mut tree.nodes[*c];
        node.prior = node.prior * (1.0 - noise.fraction) + eta * noise.fraction;
    }
    Ok(())
}

/// Runs one search from `observation`. `root_env_state` is the real state,
/// needed only by estimators that step the true model.
pub fn run_search<R: Rng + ?Sized>(
    model: &dyn PlanningModel,
    estimator: &dyn UncertaintySource,
    observation: &[f64],
    root_env_state: Option<&[f64]>,
    cfg: &SearchConfig,
    rng: &mut R,
) -> Result<(SearchTree, SearchResult)> {
    if cfg.budget == 0 {
        return Err(Error::Config("search budget must be at least 1".into()));
    }
    let latent = model.initial_state(observation)?;
    let (value, policy) = model.evaluate(&latent)?;
    let mut root = SearchNode::slot(0, 0, 1.0);
    root.parent = None;
    root.latent = latent;
    root.env_state = root_env_state.map(<[f64]>::to_vec);
    root.leaf_value = value;
    root.policy = policy;
    root.evaluated = true;
    let mut tree = SearchTree::new(root, cfg.gamma);
    let expander = Expander {
        model,
        estimator,
        explore: cfg.rule.kind.is_explore(),
    };
    expander.expand(&mut tree, ROOT)?;
    tree.nodes[ROOT].visit_count = 1;
    if let Some(noise) = cfg.root_noise {
        apply_root_noise(&mut tree, noise, rng)?;
    }
    let mut path = Vec::new();
    for _ in 1..cfg.budget {
        path.clear();
        let mut node = ROOT;
        path.push(node);
        while tree.nodes[node].expanded {
            let a = tree.select_child(node, &cfg.rule)?;
            node = tree.nodes[node].children[a];
            path.push(node);
        }
        let (leaf_value, leaf_var) = expander.expand(&mut tree, node)?;
        tree.backup(&path, leaf_value, leaf_var);
    }
    let result = tree.result();
    Ok((tree, result))
}

/// Samples an action with probability proportional to `N^(1/T)`; `T = 0`
/// is greedy with lowest-index ties, all-zero counts sample uniformly.
pub fn sample_action<R: Rng + ?Sized>(visit_counts: &[u32], temperature: f64, rng: &mut R) -> usize {
    if visit_counts.iter().all(|&n| n == 0) {
        return rng.random_range(0..visit_counts.len());
    }
    if temperature <= 0.0 {
        let max = *visit_counts.iter().max().unwrap_or(&0);
        return visit_counts.iter().position(|&n| n == max).unwrap_or(0);
    }
    let probs = action_probabilities(visit_counts, temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// `N^(1/T) / Σ N^(1/T)`, computed in log space.
pub fn action_probabilities(visit_counts: &[u32], temperature: f64) -> Vec<f64> {
    let logs: Vec<f64> = visit_counts
        .iter()
        .map(|&n| if n == 0 { f64::NEG_INFINITY } else { (n as f64).ln() / temperature })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![1.0 / visit_counts.len() as f64; visit_counts.len()];
    }
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.iter().map(|x| x / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvModel, OracleModel, Slide, SLIDE_RIGHT};
    use crate::model::{ModelBundle, ModelConfig};
    use crate::uncertainty::{CountUncertainty, VisitCounter, ZeroUncertainty};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_children(q: [f64; 2], n: [u32; 2], var: [f64; 2]) -> SearchTree {
        let mut t = SearchTree::with_root(LatentState::new(vec![]), 1.0);
        for a in 0..2 {
            let c = t.add_child(ROOT, a, 0.0, 0.0);
            t.nodes[c].visit_count = n[a];
            t.nodes[c].value_sum = q[a] * n[a] as f64;
            t.nodes[c].variance_sum = var[a];
            t.nodes[c].prior = 0.5;
        }
        t.nodes[ROOT].visit_count = n[0] + n[1] + 1;
        t
    }

    #[test]
    fn uct_prefers_higher_q() {
        let t = two_children([1.0, 0.0], [3, 3], [0.0, 0.0]);
        assert_eq!(t.select_child(ROOT, &SelectionRule::new(RuleKind::Uct)).unwrap(), 0);
    }

    #[test]
    fn explore_bonus_uses_mean_std() {
        let t = two_children([0.0, 0.0], [1, 1], [0.0, 9.0]);
        let mut rule = SelectionRule::new(RuleKind::UctExplore);
        rule.c_p = 0.0;
        rule.c_sigma = 1.0;
        assert_eq!(t.select_child(ROOT, &rule).unwrap(), 1);
        assert_eq!(t.select_child(ROOT, &rule.with_kind(RuleKind::Uct)).unwrap(), 0);
    }

    #[test]
    fn puct_uniform_tie_goes_to_first() {
        let t = two_children([0.5, 0.5], [2, 2], [0.0, 0.0]);
        assert_eq!(t.select_child(ROOT, &SelectionRule::new(RuleKind::Puct)).unwrap(), 0);
    }

    #[test]
    fn unexpanded_select_is_protocol_error() {
        let t = SearchTree::with_root(LatentState::new(vec![]), 1.0);
        assert!(matches!(
            t.select_child(ROOT, &SelectionRule::new(RuleKind::Uct)),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn backup_examples() {
        let mut t = SearchTree::with_root(LatentState::new(vec![]), 0.5);
        let c = t.add_child(ROOT, 0, 1.0, 1.0);
        t.backup(&[ROOT, c], 4.0, 4.0);
        assert_eq!(t.nodes[c].value_sum, 3.0);
        assert_eq!(t.nodes[c].variance_sum, 2.0);
        assert_eq!(t.nodes[ROOT].visit_count, 1);
        assert_eq!(t.nodes[ROOT].value_sum, 0.0);

        let mut t = SearchTree::with_root(LatentState::new(vec![]), 1.0);
        let c = t.add_child(ROOT, 0, 0.0, 0.0);
        t.backup(&[ROOT, c], 0.0, 2.0);
        t.backup(&[ROOT, c], 0.0, 3.0);
        assert_eq!(t.nodes[c].variance_sum, 5.0);
        assert_eq!(t.nodes[c].visit_count, 2);
    }

    fn slide_bundle(seed: u64) -> ModelBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelBundle::new(ModelConfig::new(1, 3), &mut rng).unwrap()
    }

    fn cfg(kind: RuleKind, budget: usize) -> SearchConfig {
        SearchConfig {
            rule: SelectionRule::new(kind),
            budget,
            gamma: 0.95,
            root_noise: None,
        }
    }

    #[test]
    fn budget_one_returns_root_prediction() {
        let b = slide_bundle(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, r) = run_search(&b, &ZeroUncertainty, &[0.2], None, &cfg(RuleKind::Puct, 1), &mut rng).unwrap();
        let (v, _) = b.evaluate(&b.represent(&[0.2]).unwrap()).unwrap();
        assert_eq!(r.root_value, v);
        assert!((r.visit_distribution.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_budget_is_error() {
        let b = slide_bundle(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(run_search(&b, &ZeroUncertainty, &[0.2], None, &cfg(RuleKind::Uct, 0), &mut rng).is_err());
    }

    #[test]
    fn bookkeeping_invariants() {
        let b = slide_bundle(2);
        for kind in [RuleKind::Uct, RuleKind::Puct, RuleKind::UctExplore, RuleKind::PuctExplore] {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut c = cfg(kind, 40);
            c.rule.c_sigma = 1.0;
            c.root_noise = Some(RootNoise {
                alpha: 0.25,
                fraction: 0.25,
            });
            let (tree, r) = run_search(&b, &ZeroUncertainty, &[0.5], None, &c, &mut rng).unwrap();
            assert_eq!(r.visit_counts.iter().sum::<u32>(), 39);
            assert!((r.visit_distribution.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let eq2: f64 = r.per_action_q.iter().zip(&r.visit_counts).map(|(q, n)| q * *n as f64).sum::<f64>() / 39.0;
            assert!((eq2 - r.root_value).abs() < 1e-12);
            // Every non-root node's visits equal the visits of its visited children plus one.
            for (i, n) in tree.nodes.iter().enumerate().skip(1) {
                if n.visit_count > 0 {
                    let below: u32 = n.children.iter().map(|&c| tree.nodes[c].visit_count).sum();
                    assert_eq!(n.visit_count, below + 1, "node {i}");
                }
            }
        }
    }

    #[test]
    fn zero_estimator_explore_matches_plain_uct() {
        let b = slide_bundle(3);
        for kind in [RuleKind::Uct, RuleKind::Puct] {
            let mut c_plain = cfg(kind, 30);
            c_plain.root_noise = Some(RootNoise {
                alpha: 0.25,
                fraction: 0.25,
            });
            let mut c_explore = c_plain;
            c_explore.rule = c_plain.rule.with_kind(kind.explore());
            c_explore.rule.c_sigma = 123.0;
            let (t1, r1) = run_search(&b, &ZeroUncertainty, &[0.3], None, &c_plain, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let (t2, r2) = run_search(&b, &ZeroUncertainty, &[0.3], None, &c_explore, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            assert_eq!(r1, r2);
            let visits = |t: &SearchTree| t.nodes.iter().map(|n| (n.visit_count, n.value_sum.to_bits())).collect::<Vec<_>>();
            let v1 = visits(&t1);
            let v2: Vec<_> = visits(&t2);
            // Prefetched children add zero-visit nodes only; visited statistics agree.
            let nz = |v: Vec<(u32, u64)>| v.into_iter().filter(|x| x.0 > 0).collect::<Vec<_>>();
            assert_eq!(nz(v1), nz(v2));
            assert_eq!(t1.counters.estimator_calls, 0);
            assert!(t2.counters.estimator_calls > 0);
        }
    }

    #[test]
    fn variance_sums_never_decrease() {
        let slide = Slide::new(10);
        let counter = VisitCounter::slide(10, 1.0, 0.1);
        let est = CountUncertainty {
            counter: &counter,
            env: &slide,
            horizon: 3,
            gamma: 0.95,
        };
        let b = slide_bundle(4);
        let mut c = cfg(RuleKind::UctExplore, 2);
        c.rule.c_sigma = 1.0;
        let mut prev: Option<Vec<f64>> = None;
        for budget in 2..30 {
            c.budget = budget;
            let (tree, _) = run_search(&b, &est, &[0.0], Some(&[0.0]), &c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let sums: Vec<f64> = tree.nodes.iter().map(|n| n.variance_sum).collect();
            if let Some(p) = &prev {
                for (a, b) in p.iter().zip(&sums) {
                    assert!(b >= a);
                }
            }
            prev = Some(sums);
        }
    }

    #[test]
    fn counter_estimator_reward_var_on_fresh_state() {
        let slide = Slide::default();
        let counter = VisitCounter::slide(50, 1.0, 0.1);
        let est = CountUncertainty {
            counter: &counter,
            env: &slide,
            horizon: 3,
            gamma: 0.95,
        };
        let b = slide_bundle(5);
        let mut c = cfg(RuleKind::UctExplore, 1);
        c.rule.c_sigma = 10.0;
        let (tree, _) = run_search(&b, &est, &[0.0], Some(&[0.0]), &c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let right = tree.nodes[tree.root_children()[SLIDE_RIGHT]].clone();
        assert_eq!(right.reward_var, 10.0);
        assert_eq!(right.env_state, Some(vec![1.0]));
        let (v, _) = b.evaluate(&right.latent).unwrap();
        assert_eq!(right.leaf_value, v);
    }

    #[test]
    fn oracle_search_moves_right_near_goal() {
        let slide = Slide::default();
        let oracle = OracleModel { env: &slide, elapsed: 0 };
        let mut c = cfg(RuleKind::Uct, 500);
        c.rule.c_p = 0.5;
        let obs = slide.observe(&[48.0]);
        let (_, r) = run_search(&oracle, &ZeroUncertainty, &obs, None, &c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(sample_action(&r.visit_counts, 0.0, &mut ChaCha8Rng::seed_from_u64(0)), SLIDE_RIGHT);
        assert!((r.per_action_q[SLIDE_RIGHT] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_rules() {
        let p = action_probabilities(&[3, 1], 1.0);
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        assert_eq!(action_probabilities(&[1, 1], 0.3), vec![0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_action(&[3, 1], 0.0, &mut rng), 0);
            assert_eq!(sample_action(&[3, 1], 1e-6, &mut rng), 0);
        }
        let mut hits = [0; 3];
        for _ in 0..3000 {
            hits[sample_action(&[0, 0, 0], 1.0, &mut rng)] += 1;
        }
        assert!(hits.iter().all(|&h| h > 800));
        assert_eq!(sample_action(&[2, 5, 5], 0.0, &mut rng), 1);
    }

    #[test]
    fn dump_has_visited_children() {
        let b = slide_bundle(6);
        let (tree, _) = run_search(&b, &ZeroUncertainty, &[0.1], None, &cfg(RuleKind::Uct, 10), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let json = tree.dump(3);
        assert_eq!(json["visit_count"], 10);
        assert_eq!(json["children"].as_array().unwrap().len(), 3);
    }
}
