//! Layer primitives. Each op is a pair of pure forward/backward functions;
//! the layer structs wrap them with parameters and the cached activations
//! their backward pass needs.

mod activation;
mod conv;
mod linear;
mod norm;
mod pool;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Parameter, Scalar, Tensor};

pub use activation::{activation, activation_backward, Activation, ActivationKind};
pub use conv::{conv2d, conv2d_backward, Conv2d, Conv2dGrads, Conv2dSpec};
pub use linear::{dense, dense_backward, dropout, Dense, DenseGrads, Dropout};
pub use norm::{BatchNorm2d, BatchNormGrads, BatchNormState, BN_EPS, BN_MOMENTUM};
pub use pool::{pooling, pooling_backward, PoolKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-forward state: the mode and the RNG that drives dropout masks.
#[derive(Clone, Debug)]
pub struct ForwardCtx {
    pub mode: Mode,
    pub rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn infer() -> Self {
        Self::new(Mode::Infer, 0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BackwardCtx {
    /// Rectifiers pass gradient only where both input and upstream gradient are positive.
    pub guided: bool,
    /// Skip the input gradient of the receiving layer (first layer of a network).
    pub skip_input_grad: bool,
}

/// A differentiable layer with cached forward state.
pub trait Module<T: Scalar> {
    fn forward(&mut self, x: Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>>;

    /// Propagates `grad` (w.r.t. the last forward output) back to the input,
    /// accumulating parameter gradients on the way.
    fn backward(&mut self, grad: Tensor<T>, ctx: BackwardCtx) -> Result<Tensor<T>>;

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>));

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>));

    /// Non-learnable persistent state (BN running statistics).
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&str, &mut Tensor<T>)) {}

    fn visit_buffers(&self, _f: &mut dyn FnMut(&str, &Tensor<T>)) {}
}

pub(crate) fn missing_cache(layer: &str) -> crate::error::Error {
    crate::error::Error::Mode(format!("{layer}: backward called before forward"))
}
