//! Two-hot categorical encoding of bounded scalars.

use serde::{Deserialize, Serialize};

/// Integer-spaced support `[-support, support]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportSpec {
    pub support: usize,
}

impl SupportSpec {
    pub fn new(support: usize) -> Self {
        Self { support }
    }

    pub fn bin_count(&self) -> usize {
        2 * self.support + 1
    }

    /// Scalar represented by bin `i`.
    pub fn bin_value(&self, i: usize) -> f64 {
        i as f64 - self.support as f64
    }

    pub fn bin_values(&self) -> Vec<f64> {
        (0..self.bin_count()).map(|i| self.bin_value(i)).collect()
    }

    pub fn clip(&self, x: f64) -> f64 {
        let s = self.support as f64;
        x.clamp(-s, s)
    }
}

/// Probability vector over the bins of a [`SupportSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalScalar(pub Vec<f64>);

impl CategoricalScalar {
    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|&w| w >= 0.0 && w.is_finite())
            && (self.0.iter().sum::<f64>() - 1.0).abs() < 1e-9
    }
}

/// Out-of-range values are clipped to the support before encoding.
pub fn encode_scalar(x: f64, support: SupportSpec) -> CategoricalScalar {
    let x = support.clip(x);
    let mut weights = vec![0.0; support.bin_count()];
    let floor = x.floor();
    let frac = x - floor;
    let lower = (floor + support.support as f64) as usize;
    weights[lower] = 1.0 - frac;
    if frac > 0.0 {
        weights[lower + 1] = frac;
    }
    CategoricalScalar(weights)
}

pub fn decode_categorical(c: &CategoricalScalar, support: SupportSpec) -> f64 {
    decode_weights(&c.0, support)
}

pub(crate) fn decode_weights(weights: &[f64], support: SupportSpec) -> f64 {
    weights
        .iter()
        .enumerate()
        .map(|(i, w)| w * support.bin_value(i))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const S15: SupportSpec = SupportSpec { support: 15 };

    #[test]
    fn integer_value_is_one_hot() {
        let c = encode_scalar(0.0, S15);
        assert_eq!(c.0[15], 1.0);
        assert_eq!(c.0.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn fractional_value_is_two_hot() {
        let c = encode_scalar(2.4, S15);
        assert!((c.0[17] - 0.6).abs() < 1e-12);
        assert!((c.0[18] - 0.4).abs() < 1e-12);
        assert!(c.is_valid());
    }

    #[test]
    fn out_of_range_is_clipped() {
        let c = encode_scalar(-15.7, S15);
        assert_eq!(c.0[0], 1.0);
        let c = encode_scalar(40.0, S15);
        assert_eq!(c.0[30], 1.0);
        assert_eq!(decode_categorical(&c, S15), 15.0);
    }

    #[test]
    fn symmetric_weights_decode_to_zero() {
        let uniform = CategoricalScalar(vec![1.0 / 31.0; 31]);
        assert!(decode_categorical(&uniform, S15).abs() < 1e-12);
        let mut w = vec![0.0; 31];
        w[14] = 0.5;
        w[16] = 0.5;
        assert_eq!(decode_categorical(&CategoricalScalar(w), S15), 0.0);
    }

    proptest! {
        #[test]
        fn roundtrip(x in -15.0f64..=15.0) {
            let c = encode_scalar(x, S15);
            prop_assert!(c.is_valid());
            prop_assert!((decode_categorical(&c, S15) - x).abs() < 1e-9);
        }

        #[test]
        fn roundtrip_any_support(support in 1usize..40, u in 0.0f64..=1.0) {
            let s = SupportSpec::new(support);
            let x = (2.0 * u - 1.0) * support as f64;
            prop_assert!((decode_categorical(&encode_scalar(x, s), s) - x).abs() < 1e-9);
        }
    }
}
