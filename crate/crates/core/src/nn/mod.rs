//! Minimal differentiable building blocks. Every forward has a matching
//! hand-written backward; there is no tape.

mod activation;
mod gradcheck;
mod layer;
mod loss;
mod optim;

pub use activation::{elu_plus_one, elu_plus_one_grad, softmax_in_place, Activation};
pub use gradcheck::{central_difference, finite_diff_check, GradCheckReport};
pub(crate) use gradcheck::record;
pub use layer::{DenseLayer, Mlp, MlpTrace};
pub use loss::{
    bernoulli_nll, gaussian_nll, BernoulliNll, GaussianNll, HALF_LN_2PI, PROB_CLAMP, VAR_FLOOR,
};
pub use optim::{clip_gradients, global_norm, AdamConfig, AdamState};
