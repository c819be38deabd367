//! Epistemic uncertainty: first-order moment propagation through the latent
//! dynamics, ensemble disagreement, and state-visitation counting.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::envs::{EnvModel, MC_MAX_POSITION, MC_MAX_SPEED, MC_MIN_POSITION};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::nn::CategoricalScalar;

/// Mean and covariance of a state distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentPair {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl MomentPair {
    pub fn new(mean: Vec<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::InputShape {
                expected: n,
                got: covariance.nrows(),
            });
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            covariance,
        })
    }

    pub fn point(mean: Vec<f64>) -> Self {
        let n = mean.len();
        Self {
            mean: DVector::from_vec(mean),
            covariance: DMatrix::zeros(n, n),
        }
    }
}

/// A differentiable state transition.
pub trait TransitionMap {
    fn mean(&self, state: &[f64], action: usize) -> Result<Vec<f64>>;
    /// Jacobian w.r.t. the state, rows = outputs.
    fn jacobian(&self, state: &[f64], action: usize) -> Result<DMatrix<f64>>;
}

/// `s -> A s`, independent of the action.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap(pub DMatrix<f64>);

impl TransitionMap for LinearMap {
    fn mean(&self, state: &[f64], _action: usize) -> Result<Vec<f64>> {
        Ok((&self.0 * DVector::from_column_slice(state)).iter().copied().collect())
    }

    fn jacobian(&self, _state: &[f64], _action: usize) -> Result<DMatrix<f64>> {
        Ok(self.0.clone())
    }
}

/// Covariance added by one transition, `Σ(s, a)`.
#[derive(Clone, Debug, PartialEq)]
pub enum CovarianceMap {
    Zero,
    Isotropic(f64),
    Constant(DMatrix<f64>),
}

impl CovarianceMap {
    pub fn at(&self, dim: usize) -> DMatrix<f64> {
        match self {
            CovarianceMap::Zero => DMatrix::zeros(dim, dim),
            CovarianceMap::Isotropic(q) => DMatrix::identity(dim, dim) * *q,
            CovarianceMap::Constant(m) => m.clone(),
        }
    }
}

/// `(C + Cᵀ)/2`, with negative eigenvalues raised to zero.
fn symmetrize_psd(c: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&c + c.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return sym;
    }
    let floored = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&floored) * v.transpose();
    (&out + out.transpose()) * 0.5
}

/// One-step prediction of the state moments:
/// mean `f(s̄, a)`, covariance `Σ(s̄, a) + J Σ̄ Jᵀ`.
pub fn propagate_state_moments(
    f: &dyn TransitionMap,
    sigma: &CovarianceMap,
    input: &MomentPair,
    action: usize,
) -> Result<MomentPair> {
    let mean_in: Vec<f64> = input.mean.iter().copied().collect();
    let mean = f.mean(&mean_in, action)?;
    let j = f.jacobian(&mean_in, action)?;
    if j.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite Jacobian".into()));
    }
    let cov = sigma.at(mean.len()) + &j * &input.covariance * j.transpose();
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite covariance".into()));
    }
    Ok(MomentPair {
        mean: DVector::from_vec(mean),
        covariance: symmetrize_psd(cov),
    })
}

/// Variance of a scalar prediction `h(s)` under the state distribution:
/// `local_var + ∇h Σ ∇hᵀ`, clamped at zero. `gradient` is `∇h` at the mean.
pub fn scalar_prediction_variance(gradient: &[f64], local_var: f64, input: &MomentPair) -> f64 {
    let g = DVector::from_column_slice(gradient);
    (local_var + (g.transpose() * &input.covariance * &g)[(0, 0)]).max(0.0)
}

/// `V[ν_k] = V[r_k] + γ² V[ν_{k+1}]`.
pub fn return_variance_backup(reward_var: f64, gamma: f64, downstream_var: f64) -> f64 {
    reward_var + gamma * gamma * downstream_var
}

/// Sum over bins of the population variance of the bin weight across members.
pub fn ensemble_variance(members: &[CategoricalScalar]) -> Result<f64> {
    ensemble_variance_of(&members.iter().map(|m| m.0.as_slice()).collect::<Vec<_>>())
}

pub(crate) fn ensemble_variance_of(members: &[&[f64]]) -> Result<f64> {
    if members.len() < 2 {
        return Err(Error::Estimator(format!(
            "ensemble variance needs at least 2 members, got {}",
            members.len()
        )));
    }
    let bins = members[0].len();
    if members.iter().any(|m| m.len() != bins) {
        return Err(Error::Estimator("members disagree on bin count".into()));
    }
    let n = members.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        let mean = members.iter().map(|m| m[b]).sum::<f64>() / n;
        total += members.iter().map(|m| (m[b] - mean).powi(2)).sum::<f64>() / n;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub bins: usize,
}

impl GridAxis {
    fn cell(&self, x: f64) -> usize {
        let t = (x - self.min) / (self.max - self.min) * self.bins as f64;
        if t.is_nan() || t < 0.0 {
            0
        } else {
            (t as usize).min(self.bins - 1)
        }
    }
}

/// Visitation counts over a regular grid of real environment states.
#[derive(Clone, Debug, PartialEq)]
pub struct VisitCounter {
    pub axes: Vec<GridAxis>,
    counts: HashMap<usize, u64>,
    pub beta: f64,
    pub epsilon: f64,
    total: u64,
}

impl VisitCounter {
    pub fn new(axes: Vec<GridAxis>, beta: f64, epsilon: f64) -> Self {
        Self {
            axes,
            counts: HashMap::new(),
            beta,
            epsilon,
            total: 0,
        }
    }

    /// One cell per chain position.
    pub fn slide(length: usize, beta: f64, epsilon: f64) -> Self {
        Self::new(
            vec![GridAxis {
                min: -0.5,
                max: length as f64 - 0.5,
                bins: length,
            }],
            beta,
            epsilon,
        )
    }

    /// 50 x 50 position-velocity grid.
    pub fn mountain_car(beta: f64, epsilon: f64) -> Self {
        Self::new(
            vec![
                GridAxis {
                    min: MC_MIN_POSITION,
                    max: MC_MAX_POSITION,
                    bins: 50,
                },
                GridAxis {
                    min: -MC_MAX_SPEED,
                    max: MC_MAX_SPEED,
                    bins: 50,
                },
            ],
            beta,
            epsilon,
        )
    }

    /// Flat index of the cell containing `state`; out-of-range values land
    /// in the boundary cell.
    pub fn cell(&self, state: &[f64]) -> usize {
        let mut index = 0;
        for (axis, &x) in self.axes.iter().zip(state) {
            index = index * axis.bins + axis.cell(x);
        }
        index
    }

    pub fn record_visit(&mut self, state: &[f64]) {
        *self.counts.entry(self.cell(state)).or_insert(0) += 1;
        self.total += 1;
    }

    pub fn count(&self, state: &[f64]) -> u64 {
        self.cell_count(self.cell(state))
    }

    pub fn cell_count(&self, cell: usize) -> u64 {
        self.counts.get(&cell).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn distinct_cells(&self) -> usize {
        self.counts.len()
    }

    pub fn cell_total(&self) -> usize {
        self.axes.iter().map(|a| a.bins).product()
    }

    /// Sparse text form: a header, one `axis` line per dimension and one
    /// `cell count` line per visited cell, sorted by cell.
    pub fn to_sparse_text(&self) -> String {
        let mut out = String::from("# visit counter v1\n");
        let _ = writeln!(out, "beta {:e}", self.beta);
        let _ = writeln!(out, "epsilon {:e}", self.epsilon);
        for a in &self.axes {
            let _ = writeln!(out, "axis {:e} {:e} {}", a.min, a.max, a.bins);
        }
        let mut cells: Vec<_> = self.counts.iter().collect();
        cells.sort();
        for (c, n) in cells {
            let _ = writeln!(out, "{c} {n}");
        }
        out
    }

    pub fn from_sparse_text(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Checkpoint(format!("bad counter line: {line:?}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next() != Some("# visit counter v1") {
            return Err(Error::Checkpoint("missing counter header".into()));
        }
        let mut counter = Self::new(Vec::new(), 1.0, 0.1);
        for line in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            match parts.as_slice() {
                ["beta", v] => counter.beta = num(v)?,
                ["epsilon", v] => counter.epsilon = num(v)?,
                ["axis", min, max, bins] => counter.axes.push(GridAxis {
                    min: num(min)?,
                    max: num(max)?,
                    bins: bins.parse().map_err(|_| bad(line))?,
                }),
                [cell, count] => {
                    let cell: usize = cell.parse().map_err(|_| bad(line))?;
                    let count: u64 = count.parse().map_err(|_| bad(line))?;
                    if cell >= counter.cell_total() {
                        return Err(bad(line));
                    }
                    counter.counts.insert(cell, count);
                    counter.total += count;
                }
                _ => return Err(bad(line)),
            }
        }
        Ok(counter)
    }
}

/// `β / (n + ε)` for the cell containing `state`.
pub fn count_reward_uncertainty(counter: &VisitCounter, state: &[f64]) -> f64 {
    counter.beta / (counter.count(state) as f64 + counter.epsilon)
}

/// Rolls the true model `horizon` steps repeating `repeat_action`, summing
/// `γ^{2i} u_r`, then closes with the geometric tail `γ^{2h}/(1-γ²) u_r`.
pub fn count_value_uncertainty(
    counter: &VisitCounter,
    env: &dyn EnvModel,
    state: &[f64],
    repeat_action: usize,
    horizon: usize,
    gamma: f64,
) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Domain(format!("gamma {gamma} must lie in (0, 1)")));
    }
    let g2 = gamma * gamma;
    let mut s = state.to_vec();
    let mut acc = 0.0;
    let mut weight = 1.0;
    for _ in 0..horizon {
        acc += weight * count_reward_uncertainty(counter, &s);
        s = env.next_state(&s, repeat_action)?;
        weight *= g2;
    }
    Ok(acc + weight / (1.0 - g2) * count_reward_uncertainty(counter, &s))
}

/// What an estimator gets to look at for one tree node.
#[derive(Clone, Copy, Debug)]
pub struct UncertaintyContext<'a> {
    pub latent: &'a [f64],
    /// Real environment state of the node; only available to estimators
    /// that hold the true model.
    pub env_state: Option<&'a [f64]>,
    /// Action on the edge into the node.
    pub action: usize,
}

/// Local epistemic variances of reward and value predictions.
pub trait UncertaintySource {
    fn reward_variance(&self, ctx: &UncertaintyContext) -> Result<f64>;
    fn value_variance(&self, ctx: &UncertaintyContext) -> Result<f64>;
    /// The true environment model, when the estimator is granted it.
    fn env_model(&self) -> Option<&dyn EnvModel> {
        None
    }
}

/// Reports zero variance everywhere.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroUncertainty;

impl UncertaintySource for ZeroUncertainty {
    fn reward_variance(&self, _ctx: &UncertaintyContext) -> Result<f64> {
        Ok(0.0)
    }

    fn value_variance(&self, _ctx: &UncertaintyContext) -> Result<f64> {
        Ok(0.0)
    }
}

/// Counting estimator. Holds the true model, which is an oracle privilege.
pub struct CountUncertainty<'a> {
    pub counter: &'a VisitCounter,
    pub env: &'a dyn EnvModel,
    pub horizon: usize,
    pub gamma: f64,
}

impl CountUncertainty<'_> {
    fn state<'c>(&self, ctx: &UncertaintyContext<'c>) -> Result<&'c [f64]> {
        ctx.env_state
            .ok_or_else(|| Error::Estimator("counting estimator needs the real environment state".into()))
    }
}

impl UncertaintySource for CountUncertainty<'_> {
    fn reward_variance(&self, ctx: &UncertaintyContext) -> Result<f64> {
        Ok(count_reward_uncertainty(self.counter, self.state(ctx)?))
    }

    fn value_variance(&self, ctx: &UncertaintyContext) -> Result<f64> {
        count_value_uncertainty(self.counter, self.env, self.state(ctx)?, ctx.action, self.horizon, self.gamma)
    }

    fn env_model(&self) -> Option<&dyn EnvModel> {
        Some(self.env)
    }
}

/// Disagreement of the reward and value ensemble heads.
pub struct EnsembleUncertainty<'a> {
    pub bundle: &'a ModelBundle,
}

impl UncertaintySource for EnsembleUncertainty<'_> {
    fn reward_variance(&self, ctx: &UncertaintyContext) -> Result<f64> {
        let d = self.bundle.reward.distributions(ctx.latent)?;
        ensemble_variance_of(&d.iter().map(Vec::as_slice).collect::<Vec<_>>())
    }

    fn value_variance(&self, ctx: &UncertaintyContext) -> Result<f64> {
        let d = self.bundle.value.distributions(ctx.latent)?;
        ensemble_variance_of(&d.iter().map(Vec::as_slice).collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{MountainCar, Slide};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn identity_map_leaves_moments_unchanged() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let input = MomentPair::new(vec![1.0, -1.0], cov.clone()).unwrap();
        let out = propagate_state_moments(&LinearMap(DMatrix::identity(2, 2)), &CovarianceMap::Zero, &input, 0).unwrap();
        assert_eq!(out.mean, input.mean);
        assert_eq!(out.covariance, cov);
    }

    #[test]
    fn linear_map_is_exact() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]);
        let q = DMatrix::from_row_slice(2, 2, &[0.1, 0.02, 0.02, 0.05]);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let input = MomentPair::new(vec![0.0, 0.0], s.clone()).unwrap();
        let out = propagate_state_moments(&LinearMap(a.clone()), &CovarianceMap::Constant(q.clone()), &input, 0).unwrap();
        let want = &q + &a * &s * a.transpose();
        assert!((out.covariance - want).abs().max() < 1e-15);
    }

    struct Square;

    impl TransitionMap for Square {
        fn mean(&self, s: &[f64], _a: usize) -> Result<Vec<f64>> {
            Ok(vec![s[0] * s[0]])
        }
        fn jacobian(&self, s: &[f64], _a: usize) -> Result<DMatrix<f64>> {
            Ok(DMatrix::from_element(1, 1, 2.0 * s[0]))
        }
    }

    #[test]
    fn square_map_matches_sampling() {
        let var = 0.01;
        let input = MomentPair::new(vec![1.0], DMatrix::from_element(1, 1, var)).unwrap();
        let out = propagate_state_moments(&Square, &CovarianceMap::Zero, &input, 0).unwrap();
        assert!((out.covariance[(0, 0)] - 4.0 * var).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 200_000;
        let ys: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (1.0 + var.sqrt() * z).powi(2)
            })
            .collect();
        let m = ys.iter().sum::<f64>() / n as f64;
        let v = ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / n as f64;
        assert!((v - 4.0 * var).abs() / (4.0 * var) < 0.05, "{v}");
    }

    struct BadJacobian;

    impl TransitionMap for BadJacobian {
        fn mean(&self, s: &[f64], _a: usize) -> Result<Vec<f64>> {
            Ok(s.to_vec())
        }
        fn jacobian(&self, _s: &[f64], _a: usize) -> Result<DMatrix<f64>> {
            Ok(DMatrix::from_element(1, 1, f64::NAN))
        }
    }

    #[test]
    fn non_finite_jacobian_is_numeric_error() {
        let input = MomentPair::point(vec![0.0]);
        let err = propagate_state_moments(&BadJacobian, &CovarianceMap::Zero, &input, 0).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn negative_eigenvalues_are_floored() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let fixed = symmetrize_psd(c);
        let eig = fixed.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-12));
    }

    #[test]
    fn scalar_variance_is_quadratic_form() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let input = MomentPair::new(vec![0.0, 0.0], cov).unwrap();
        assert_eq!(scalar_prediction_variance(&[1.0, 2.0], 0.3, &input), 0.3 + 2.0 + 2.0 + 4.0);
        assert_eq!(scalar_prediction_variance(&[1.0, 2.0], 0.3, &MomentPair::point(vec![0.0, 0.0])), 0.3);
    }

    #[test]
    fn scalar_variance_matches_sampling_for_smooth_map() {
        // h(s) = sin(s0) + s0 s1 at small covariance.
        let mean = [0.3f64, -0.7];
        let grad = [mean[0].cos() + mean[1], mean[0]];
        let cov = DMatrix::from_row_slice(2, 2, &[1e-4, 2e-5, 2e-5, 5e-5]);
        let input = MomentPair::new(mean.to_vec(), cov.clone()).unwrap();
        let predicted = scalar_prediction_variance(&grad, 0.0, &input);
        let chol = cov.cholesky().unwrap().l();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 200_000;
        let ys: Vec<f64> = (0..n)
            .map(|_| {
                let z = DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
                let x = &chol * z;
                let (a, b) = (mean[0] + x[0], mean[1] + x[1]);
                a.sin() + a * b
            })
            .collect();
        let m = ys.iter().sum::<f64>() / n as f64;
        let v = ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / n as f64;
        assert!((v - predicted).abs() / predicted < 0.05, "{v} vs {predicted}");
    }

    #[test]
    fn backup_examples() {
        assert_eq!(return_variance_backup(1.0, 0.5, 4.0), 2.0);
        assert_eq!(return_variance_backup(0.7, 0.9, 0.0), 0.7);
        let mut v = 0.5;
        for _ in 0..6 {
            v = return_variance_backup(0.25, 1.0, v);
        }
        assert_eq!(v, 6.0 * 0.25 + 0.5);
    }

    #[test]
    fn backup_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let (r, d, g) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), rng.random_range(0.01..1.0));
            let base = return_variance_backup(r, g, d);
            assert!(return_variance_backup(r + 0.1, g, d) >= base);
            assert!(return_variance_backup(r, g, d + 0.1) >= base);
        }
    }

    #[test]
    fn ensemble_variance_examples() {
        let a = CategoricalScalar(vec![1.0, 0.0]);
        let b = CategoricalScalar(vec![0.0, 1.0]);
        assert_eq!(ensemble_variance(&[a.clone(), b.clone()]).unwrap(), 0.5);
        assert_eq!(ensemble_variance(&[b.clone(), a.clone()]).unwrap(), 0.5);
        assert_eq!(ensemble_variance(&[a.clone(), a.clone(), a.clone()]).unwrap(), 0.0);
        assert!(matches!(ensemble_variance(&[a]), Err(Error::Estimator(_))));
    }

    #[test]
    fn count_reward_examples() {
        let mut c = VisitCounter::slide(50, 1.0, 0.1);
        assert_eq!(count_reward_uncertainty(&c, &[3.0]), 10.0);
        c.record_visit(&[3.0]);
        assert!((count_reward_uncertainty(&c, &[3.0]) - 1.0 / 1.1).abs() < 1e-15);
        let mut last = count_reward_uncertainty(&c, &[3.0]);
        for _ in 0..20 {
            c.record_visit(&[3.0]);
            let u = count_reward_uncertainty(&c, &[3.0]);
            assert!(u < last);
            last = u;
        }
    }

    /// Test model where every state maps to itself.
    struct Still;

    impl EnvModel for Still {
        fn action_count(&self) -> usize {
            1
        }
        fn observation_size(&self) -> usize {
            1
        }
        fn next_state(&self, s: &[f64], _a: usize) -> Result<Vec<f64>> {
            Ok(s.to_vec())
        }
        fn reward(&self, _s: &[f64], _a: usize, _n: &[f64], _e: usize) -> f64 {
            0.0
        }
        fn is_terminal(&self, _s: &[f64]) -> bool {
            false
        }
        fn observe(&self, s: &[f64]) -> Vec<f64> {
            s.to_vec()
        }
        fn state_from_observation(&self, o: &[f64]) -> Vec<f64> {
            o.to_vec()
        }
        fn max_steps(&self) -> usize {
            10
        }
    }

    #[test]
    fn count_value_examples() {
        // β = ε = 1 with zero counts makes u_r = 1 everywhere.
        let c = VisitCounter::slide(5, 1.0, 1.0);
        let h0 = count_value_uncertainty(&c, &Still, &[0.0], 0, 0, 0.5).unwrap();
        assert!((h0 - 4.0 / 3.0).abs() < 1e-15);
        let h1 = count_value_uncertainty(&c, &Still, &[0.0], 0, 1, 0.5).unwrap();
        assert!((h1 - 4.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            count_value_uncertainty(&c, &Still, &[0.0], 0, 1, 1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn count_value_vanishes_with_counts() {
        let mut c = VisitCounter::slide(5, 1.0, 0.1);
        for _ in 0..1_000_000 {
            c.record_visit(&[2.0]);
        }
        assert!(count_value_uncertainty(&c, &Still, &[2.0], 0, 3, 0.9).unwrap() < 1e-4);
    }

    #[test]
    fn count_value_follows_true_dynamics() {
        let slide = Slide::new(10);
        let mut c = VisitCounter::slide(10, 1.0, 0.1);
        c.record_visit(&[3.0]);
        // From 2 repeating "right": 2 (unseen), 3 (seen once), 4 (unseen) tail.
        let got = count_value_uncertainty(&c, &slide, &[2.0], 2, 2, 0.5).unwrap();
        let want = 10.0 + 0.25 / 1.1 + 0.0625 / 0.75 * 10.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn visits_and_grid_cells() {
        let mut c = VisitCounter::slide(50, 1.0, 0.1);
        c.record_visit(&[7.0]);
        assert_eq!(c.count(&[7.0]), 1);
        assert_eq!((0..50).map(|p| c.count(&[p as f64])).sum::<u64>(), 1);
        for _ in 0..4 {
            c.record_visit(&[7.0]);
        }
        assert_eq!(c.count(&[7.0]), 5);
        assert_eq!(c.total(), 5);
        assert_eq!(c.cell(&[-3.0]), 0);
        assert_eq!(c.cell(&[99.0]), 49);

        let mut mc = VisitCounter::mountain_car(1.0, 0.1);
        assert_eq!(mc.cell(&[-1.2, -0.07]), 0);
        assert_eq!(mc.cell(&[0.6, 0.07]), 2499);
        assert_eq!(mc.cell(&[5.0, 1.0]), 2499);
        mc.record_visit(&[-0.5, 0.0]);
        mc.record_visit(&[-0.5, 0.0001]);
        assert_eq!(mc.distinct_cells(), 1);
        let _ = MountainCar::default();
    }

    #[test]
    fn counter_text_roundtrip() {
        let mut c = VisitCounter::mountain_car(2.0, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..300 {
            c.record_visit(&[rng.random_range(-1.2..0.6), rng.random_range(-0.07..0.07)]);
        }
        let back = VisitCounter::from_sparse_text(&c.to_sparse_text()).unwrap();
        assert_eq!(back, c);
        assert!(VisitCounter::from_sparse_text("nonsense").is_err());
    }

    #[test]
    fn zero_source() {
        let ctx = UncertaintyContext {
            latent: &[0.0; 4],
            env_state: None,
            action: 0,
        };
        assert_eq!(ZeroUncertainty.reward_variance(&ctx).unwrap(), 0.0);
        assert_eq!(ZeroUncertainty.value_variance(&ctx).unwrap(), 0.0);
    }
}
