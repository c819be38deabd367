//! Ensembles whose members add a frozen, randomly initialized prior network
//! to their trainable output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dense::{forward, softmax, DenseNetworkSpec, OutputActivation};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorEnsembleSpec {
    pub member_count: usize,
    pub prior_scale: f64,
    pub base_spec: DenseNetworkSpec,
}

/// Trainable and frozen prior parameters of one member. Both share the
/// layout of the ensemble's base spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub trainable: Vec<f64>,
    pub prior: Vec<f64>,
}

impl PriorEnsembleSpec {
    pub fn init_members<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<EnsembleMember> {
        (0..self.member_count)
            .map(|_| EnsembleMember {
                trainable: self.base_spec.init_params(rng),
                prior: self.base_spec.init_params(rng),
            })
            .collect()
    }

    /// Member logits: `trainable(x) + prior_scale * prior(x)`, before any
    /// output activation.
    pub fn member_logits(&self, member: &EnsembleMember, input: &[f64]) -> Result<Vec<f64>> {
        let raw = self.base_spec.with_output(OutputActivation::Identity);
        let mut out = forward(&raw, &member.trainable, input)?;
        if self.prior_scale != 0.0 {
            let prior = forward(&raw, &member.prior, input)?;
            for (o, p) in out.iter_mut().zip(prior) {
                *o += self.prior_scale * p;
            }
        }
        Ok(out)
    }
}

pub fn ensemble_forward(
    ens: &PriorEnsembleSpec,
    members: &[EnsembleMember],
    input: &[f64],
) -> Result<Vec<Vec<f64>>> {
    if members.len() != ens.member_count {
        return Err(Error::Config(format!(
            "ensemble expects {} members, got {}",
            ens.member_count,
            members.len()
        )));
    }
    members
        .iter()
        .map(|m| {
            let logits = ens.member_logits(m, input)?;
            Ok(match ens.base_spec.output_activation {
                OutputActivation::Identity => logits,
                OutputActivation::Softmax => softmax(&logits),
            })
        })
        .collect()
}

/// Element-wise average of member outputs.
pub fn ensemble_mean(outputs: &[Vec<f64>]) -> Vec<f64> {
    let n = outputs.len() as f64;
    let mut mean = vec![0.0; outputs.first().map_or(0, Vec::len)];
    for out in outputs {
        for (m, o) in mean.iter_mut().zip(out) {
            *m += o / n;
        }
    }
    mean
}
