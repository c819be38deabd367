use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Elu,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation and the activation output.
    #[inline]
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Elu => {
                if pre > 0.0 {
                    1.0
                } else {
                    post + 1.0
                }
            }
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Elu => 0,
            Activation::Relu => 1,
            Activation::Identity => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Elu),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Softmax,
}

/// Shape of a dense feed-forward chain.
///
/// Parameters are stored flat, layer after layer: the `fan_out x fan_in`
/// weight matrix in row-major order followed by the `fan_out` biases.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseNetworkSpec {
    pub layer_sizes: Vec<usize>,
    /// One entry per hidden layer.
    pub hidden_activations: Vec<Activation>,
    pub output_activation: OutputActivation,
}

#[derive(Clone, Copy, Debug)]
struct LayerLayout {
    weights: usize,
    biases: usize,
    fan_in: usize,
    fan_out: usize,
}

impl DenseNetworkSpec {
    /// Builds a spec with the same activation on every hidden layer.
    pub fn new(
        layer_sizes: Vec<usize>,
        hidden: Activation,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        let hidden_count = layer_sizes.len().saturating_sub(2);
        let spec = Self {
            layer_sizes,
            hidden_activations: vec![hidden; hidden_count],
            output_activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least an input and an output layer, got {} layers",
                self.layer_sizes.len()
            )));
        }
        if let Some(i) = self.layer_sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidSpec(format!("layer {i} has size 0")));
        }
        if self.hidden_activations.len() != self.layer_sizes.len() - 2 {
            return Err(Error::InvalidSpec(format!(
                "{} hidden layers but {} activations",
                self.layer_sizes.len() - 2,
                self.hidden_activations.len()
            )));
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    /// Same shape with a different output activation.
    pub fn with_output(&self, output_activation: OutputActivation) -> Self {
        Self {
            output_activation,
            ..self.clone()
        }
    }

    fn layouts(&self) -> impl Iterator<Item = LayerLayout> + '_ {
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = offset;
            let biases = weights + fan_in * fan_out;
            offset = biases + fan_out;
            LayerLayout {
                weights,
                biases,
                fan_in,
                fan_out,
            }
        })
    }

    fn activation(&self, layer: usize) -> Option<Activation> {
        self.hidden_activations.get(layer).copied()
    }

    /// Uniform fan-in scaled initialization; biases start at zero.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = vec![0.0; self.param_count()];
        for l in self.layouts() {
            let bound = (6.0 / l.fan_in as f64).sqrt();
            for w in &mut params[l.weights..l.biases] {
                *w = rng.random_range(-bound..bound);
            }
        }
        params
    }
}

/// Activations recorded by a forward pass, needed for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `inputs[l]` is the input of layer `l`; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn into_output(self) -> Vec<f64> {
        self.output
    }
}

fn check_params(spec: &DenseNetworkSpec, params: &[f64]) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::InvalidSpec(format!(
            "expected {} parameters, got {}",
            spec.param_count(),
            params.len()
        )));
    }
    Ok(())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

pub fn forward_trace(spec: &DenseNetworkSpec, params: &[f64], input: &[f64]) -> Result<ForwardTrace> {
    check_params(spec, params)?;
    if input.len() != spec.input_size() {
        return Err(Error::InputShape {
            expected: spec.input_size(),
            got: input.len(),
        });
    }
    let n_layers = spec.layer_count();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pre = Vec::with_capacity(n_layers);
    let mut x = input.to_vec();
    for (index, l) in spec.layouts().enumerate() {
        let w = &params[l.weights..l.biases];
        let b = &params[l.biases..l.biases + l.fan_out];
        let z: Vec<f64> = (0..l.fan_out)
            .map(|o| {
                let row = &w[o * l.fan_in..(o + 1) * l.fan_in];
                b[o] + row.iter().zip(&x).map(|(wi, xi)| wi * xi).sum::<f64>()
            })
            .collect();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: index });
        }
        let next = match spec.activation(index) {
            Some(act) => z.iter().map(|&v| act.apply(v)).collect(),
            None => match spec.output_activation {
                OutputActivation::Identity => z.clone(),
                OutputActivation::Softmax => softmax(&z),
            },
        };
        inputs.push(x);
        pre.push(z);
        x = next;
    }
    Ok(ForwardTrace {
        inputs,
        pre,
        output: x,
    })
}

pub fn forward(spec: &DenseNetworkSpec, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
    forward_trace(spec, params, input).map(ForwardTrace::into_output)
}

/// Backpropagates `upstream` (the gradient of a scalar w.r.t. the network
/// output) through a recorded forward pass.
///
/// Parameter gradients are added into `param_grads` after multiplying by
/// `scale`; the returned vector is the unscaled gradient w.r.t. the input.
pub fn backward_into(
    spec: &DenseNetworkSpec,
    params: &[f64],
    trace: &ForwardTrace,
    upstream: &[f64],
    scale: f64,
    param_grads: &mut [f64],
) -> Result<Vec<f64>> {
    check_params(spec, params)?;
    if upstream.len() != spec.output_size() {
        return Err(Error::InputShape {
            expected: spec.output_size(),
            got: upstream.len(),
        });
    }
    if param_grads.len() != params.len() {
        return Err(Error::InputShape {
            expected: params.len(),
            got: param_grads.len(),
        });
    }
    let layouts: Vec<LayerLayout> = spec.layouts().collect();
    let last = layouts.len() - 1;

    // Gradient w.r.t. the pre-activation of the output layer.
    let mut delta: Vec<f64> = match spec.output_activation {
        OutputActivation::Identity => upstream.to_vec(),
        OutputActivation::Softmax => {
            let p = &trace.output;
            let dot: f64 = p.iter().zip(upstream).map(|(a, b)| a * b).sum();
            p.iter().zip(upstream).map(|(pi, gi)| pi * (gi - dot)).collect()
        }
    };

    for index in (0..=last).rev() {
        let l = layouts[index];
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: index });
        }
        let x = &trace.inputs[index];
        {
            let gw = &mut param_grads[l.weights..l.biases];
            for o in 0..l.fan_out {
                let d = delta[o] * scale;
                if d != 0.0 {
                    let row = &mut gw[o * l.fan_in..(o + 1) * l.fan_in];
                    for (g, xi) in row.iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
            let gb = &mut param_grads[l.biases..l.biases + l.fan_out];
            for (g, d) in gb.iter_mut().zip(&delta) {
                *g += d * scale;
            }
        }
        let w = &params[l.weights..l.biases];
        let mut dx = vec![0.0; l.fan_in];
        for o in 0..l.fan_out {
            let d = delta[o];
            if d != 0.0 {
                let row = &w[o * l.fan_in..(o + 1) * l.fan_in];
                for (g, wi) in dx.iter_mut().zip(row) {
                    *g += d * wi;
                }
            }
        }
        if index == 0 {
            return Ok(dx);
        }
        // Through the activation of the previous (hidden) layer.
        let act = spec.activation(index - 1).unwrap_or(Activation::Identity);
        let pre = &trace.pre[index - 1];
        let post = x;
        delta = dx
            .iter()
            .zip(pre.iter().zip(post))
            .map(|(g, (&z, &a))| g * act.derivative(z, a))
            .collect();
    }
    unreachable!("network has at least one layer")
}

/// Exact gradients of `output . upstream` w.r.t. the parameters and the input.
pub fn gradients(
    spec: &DenseNetworkSpec,
    params: &[f64],
    input: &[f64],
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let trace = forward_trace(spec, params, input)?;
    let mut grads = vec![0.0; params.len()];
    let input_grad = backward_into(spec, params, &trace, upstream, 1.0, &mut grads)?;
    Ok((grads, input_grad))
}

/// A spec together with its parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: DenseNetworkSpec,
    pub params: Vec<f64>,
}

impl Network {
    pub fn new(spec: DenseNetworkSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        check_params(&spec, &params)?;
        Ok(Self { spec, params })
    }

    pub fn random<R: Rng + ?Sized>(spec: DenseNetworkSpec, rng: &mut R) -> Self {
        let params = spec.init_params(rng);
        Self { spec, params }
    }

    pub fn zeros(spec: DenseNetworkSpec) -> Self {
        let params = vec![0.0; spec.param_count()];
        Self { spec, params }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        forward(&self.spec, &self.params, input)
    }

    pub fn trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        forward_trace(&self.spec, &self.params, input)
    }

    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        upstream: &[f64],
        scale: f64,
        grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        backward_into(&self.spec, &self.params, trace, upstream, scale, grads)
    }

    /// Jacobian of the output w.r.t. the first `inputs` entries of the input,
    /// one backward pass per output row.
    pub fn input_jacobian(&self, input: &[f64], inputs: usize) -> Result<Vec<Vec<f64>>> {
        let trace = self.trace(input)?;
        let mut scratch = vec![0.0; self.params.len()];
        let mut rows = Vec::with_capacity(self.spec.output_size());
        for o in 0..self.spec.output_size() {
            let mut e = vec![0.0; self.spec.output_size()];
            e[o] = 1.0;
            let g = self.backward_into(&trace, &e, 0.0, &mut scratch)?;
            rows.push(g[..inputs].to_vec());
        }
        Ok(rows)
    }
}

/// Plain gradient descent step.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

/// Learning rate after `step` updates: `lr_init * decay_rate^(step / decay_steps)`.
pub fn learning_rate(lr_init: f64, decay_rate: f64, decay_steps: u64, step: u64) -> f64 {
    lr_init * decay_rate.powf(step as f64 / decay_steps as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: plain nested loops over explicitly built matrices.
    fn matmul_oracle(sizes: &[usize], acts: &[Activation], params: &[f64], input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        let mut off = 0;
        for (l, w) in sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let mut mat = vec![vec![0.0; n_in]; n_out];
            for (o, row) in mat.iter_mut().enumerate() {
                for (i, m) in row.iter_mut().enumerate() {
                    *m = params[off + o * n_in + i];
                }
            }
            off += n_in * n_out;
            let bias = &params[off..off + n_out];
            off += n_out;
            let mut y = vec![0.0; n_out];
            for o in 0..n_out {
                let mut acc = bias[o];
                for i in 0..n_in {
                    acc += mat[o][i] * x[i];
                }
                y[o] = match acts.get(l) {
                    Some(Activation::Elu) => {
                        if acc > 0.0 {
                            acc
                        } else {
                            acc.exp() - 1.0
                        }
                    }
                    Some(Activation::Relu) => acc.max(0.0),
                    _ => acc,
                };
            }
            x = y;
        }
        x
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let spec = DenseNetworkSpec::new(vec![3, 2], Activation::Identity, OutputActivation::Identity).unwrap();
        let out = forward(&spec, &vec![0.0; spec.param_count()], &[1.0, -2.0, 5.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_logit_softmax_is_uniform() {
        let spec = DenseNetworkSpec::new(vec![4, 8, 31], Activation::Elu, OutputActivation::Softmax).unwrap();
        let out = forward(&spec, &vec![0.0; spec.param_count()], &[0.3, 0.1, -0.2, 0.9]).unwrap();
        assert_eq!(out.len(), 31);
        for p in out {
            assert!((p - 1.0 / 31.0).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_matches_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = DenseNetworkSpec::new(vec![1, 16, 4], Activation::Elu, OutputActivation::Identity).unwrap();
        let params = spec.init_params(&mut rng);
        let input = [0.37];
        let got = forward(&spec, &params, &input).unwrap();
        let want = matmul_oracle(&spec.layer_sizes, &spec.hidden_activations, &params, &input);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn param_count_formula() {
        let spec = DenseNetworkSpec::new(vec![7, 16, 16, 4], Activation::Elu, OutputActivation::Identity).unwrap();
        assert_eq!(spec.param_count(), 8 * 16 + 17 * 16 + 17 * 4);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(DenseNetworkSpec::new(vec![3], Activation::Elu, OutputActivation::Identity).is_err());
        assert!(DenseNetworkSpec::new(vec![3, 0, 2], Activation::Elu, OutputActivation::Identity).is_err());
    }

    #[test]
    fn input_shape_error() {
        let spec = DenseNetworkSpec::new(vec![3, 2], Activation::Elu, OutputActivation::Identity).unwrap();
        let err = forward(&spec, &vec![0.0; spec.param_count()], &[1.0]).unwrap_err();
        assert!(matches!(err, Error::InputShape { expected: 3, got: 1 }));
    }

    #[test]
    fn non_finite_reports_layer() {
        let spec = DenseNetworkSpec::new(vec![1, 2, 1], Activation::Elu, OutputActivation::Identity).unwrap();
        let mut params = vec![1.0; spec.param_count()];
        // second layer weight
        params[4] = f64::INFINITY;
        let err = forward(&spec, &params, &[1.0]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { layer: 1 }));
    }

    #[test]
    fn linear_layer_weight_gradient() {
        let spec = DenseNetworkSpec::new(vec![3, 2], Activation::Identity, OutputActivation::Identity).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = spec.init_params(&mut rng);
        let x = [0.5, -1.5, 2.0];
        let up = [0.3, -0.7];
        let (g, _) = gradients(&spec, &params, &x, &up).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!((g[i * 3 + j] - up[i] * x[j]).abs() < 1e-15);
            }
            assert!((g[6 + i] - up[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let spec = DenseNetworkSpec::new(vec![2, 5, 3], Activation::Elu, OutputActivation::Softmax).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = spec.init_params(&mut rng);
        let (g, gx) = gradients(&spec, &params, &[0.1, 0.2], &[0.0; 3]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(gx.iter().all(|&v| v == 0.0));
    }

    fn fd_check(spec: &DenseNetworkSpec, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec.init_params(&mut rng);
        let input: Vec<f64> = (0..spec.input_size()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up: Vec<f64> = (0..spec.output_size()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |p: &[f64], x: &[f64]| -> f64 {
            forward(spec, p, x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let (g, gx) = gradients(spec, &params, &input, &up).unwrap();
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            let fp = objective(&p, &input);
            p[i] -= 2.0 * h;
            let fm = objective(&p, &input);
            let fd = (fp - fm) / (2.0 * h);
            max_rel = max_rel.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6));
        }
        for i in 0..input.len() {
            let mut x = input.clone();
            x[i] += h;
            let fp = objective(&params, &x);
            x[i] -= 2.0 * h;
            let fm = objective(&params, &x);
            let fd = (fp - fm) / (2.0 * h);
            max_rel = max_rel.max((fd - gx[i]).abs() / fd.abs().max(gx[i].abs()).max(1e-6));
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let configs = [
            (vec![1, 16, 4], Activation::Elu, OutputActivation::Identity),
            (vec![7, 16, 16, 4], Activation::Elu, OutputActivation::Identity),
            (vec![4, 16, 16, 31], Activation::Elu, OutputActivation::Identity),
            (vec![4, 16, 16, 3], Activation::Elu, OutputActivation::Softmax),
            (vec![2, 8, 3], Activation::Relu, OutputActivation::Softmax),
        ];
        for (seed, (sizes, act, out)) in configs.into_iter().enumerate() {
            let spec = DenseNetworkSpec::new(sizes, act, out).unwrap();
            fd_check(&spec, seed as u64 + 10);
        }
    }

    #[test]
    fn learning_rate_schedule() {
        assert!((learning_rate(0.02, 0.9, 500, 500) - 0.018).abs() < 1e-15);
        assert_eq!(learning_rate(0.02, 0.9, 500, 0), 0.02);
    }

    #[test]
    fn input_jacobian_of_linear_net_is_weight_matrix() {
        let spec = DenseNetworkSpec::new(vec![2, 3], Activation::Identity, OutputActivation::Identity).unwrap();
        let params: Vec<f64> = (0..spec.param_count()).map(|i| i as f64 * 0.5).collect();
        let net = Network::new(spec, params.clone()).unwrap();
        let jac = net.input_jacobian(&[0.2, 0.4], 2).unwrap();
        for o in 0..3 {
            for i in 0..2 {
                assert_eq!(jac[o][i], params[o * 2 + i]);
            }
        }
    }
}
