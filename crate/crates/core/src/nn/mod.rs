//! Dense networks with analytic gradients, the categorical scalar codec and
//! randomized-prior ensembles. No external ML framework is involved.

mod checkpoint;
mod codec;
mod dense;
mod ensemble;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use codec::{decode_categorical, encode_scalar, CategoricalScalar, SupportSpec};
pub(crate) use codec::decode_weights;
pub use dense::{
    backward_into, forward, forward_trace, gradients, learning_rate, log_softmax, sgd_step, softmax,
    Activation, DenseNetworkSpec, ForwardTrace, Network, OutputActivation,
};
pub use ensemble::{ensemble_forward, ensemble_mean, EnsembleMember, PriorEnsembleSpec};
