//! Binary parameter checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! | bytes      | content                                         |
//! |------------|-------------------------------------------------|
//! | 8          | magic `OP2ENET\0`                               |
//! | 4          | format version (`u32`, currently 1)             |
//! | 4          | layer count `L` (`u32`)                         |
//! | 4 * L      | layer sizes (`u32` each)                        |
//! | L - 2      | hidden activation codes (`u8`: 0 elu, 1 relu, 2 identity) |
//! | 1          | output activation code (`u8`: 0 identity, 1 softmax) |
//! | 8          | parameter count `P` (`u64`)                     |
//! | 8 * P      | parameters (`f64`)                              |

use std::io::{Read, Write};

use super::dense::{Activation, DenseNetworkSpec, OutputActivation};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"OP2ENET\0";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, spec: &DenseNetworkSpec, params: &[f64]) -> Result<()> {
    spec.validate()?;
    if params.len() != spec.param_count() {
        return Err(Error::Checkpoint(format!(
            "{} parameters for a spec expecting {}",
            params.len(),
            spec.param_count()
        )));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(spec.layer_sizes.len() as u32).to_le_bytes())?;
    for &s in &spec.layer_sizes {
        w.write_all(&(s as u32).to_le_bytes())?;
    }
    for a in &spec.hidden_activations {
        w.write_all(&[a.code()])?;
    }
    let out = match spec.output_activation {
        OutputActivation::Identity => 0u8,
        OutputActivation::Softmax => 1u8,
    };
    w.write_all(&[out])?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(DenseNetworkSpec, Vec<f64>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n_layers = read_u32(&mut r)? as usize;
    if !(2..=64).contains(&n_layers) {
        return Err(Error::Checkpoint(format!("implausible layer count {n_layers}")));
    }
    let layer_sizes = (0..n_layers)
        .map(|_| read_u32(&mut r).map(|s| s as usize))
        .collect::<Result<Vec<_>>>()?;
    let hidden_activations = (0..n_layers - 2)
        .map(|_| {
            let code = read_u8(&mut r)?;
            Activation::from_code(code)
                .ok_or_else(|| Error::Checkpoint(format!("unknown activation code {code}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let output_activation = match read_u8(&mut r)? {
        0 => OutputActivation::Identity,
        1 => OutputActivation::Softmax,
        c => return Err(Error::Checkpoint(format!("unknown output activation code {c}"))),
    };
    let spec = DenseNetworkSpec {
        layer_sizes,
        hidden_activations,
        output_activation,
    };
    spec.validate()?;
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    let count = u64::from_le_bytes(b) as usize;
    if count != spec.param_count() {
        return Err(Error::Checkpoint(format!(
            "header declares {count} parameters, spec implies {}",
            spec.param_count()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut b)?;
        params.push(f64::from_le_bytes(b));
    }
    Ok((spec, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip(sizes in proptest::collection::vec(1usize..6, 2..5), seed in any::<u64>()) {
            use rand::SeedableRng;
            let spec = DenseNetworkSpec::new(sizes, Activation::Relu, OutputActivation::Softmax).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let params = spec.init_params(&mut rng);
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &spec, &params).unwrap();
            let (spec2, params2) = read_checkpoint(buf.as_slice()).unwrap();
            prop_assert_eq!(spec, spec2);
            prop_assert_eq!(params, params2);
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let spec = DenseNetworkSpec::new(vec![1, 2], Activation::Elu, OutputActivation::Identity).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &spec, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(&buf[..8], b"OP2ENET\0");
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(buf.len(), 8 + 4 + 4 + 8 + 1 + 8 + 32);
        assert_eq!(&buf[buf.len() - 8..], &4.0f64.to_le_bytes());
    }

    #[test]
    fn truncated_or_corrupt_rejected() {
        let spec = DenseNetworkSpec::new(vec![2, 2], Activation::Elu, OutputActivation::Identity).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &spec, &[0.0; 6]).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::Checkpoint(_))));
    }
}
