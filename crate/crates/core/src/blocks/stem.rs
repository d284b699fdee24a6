use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{
    Activation, ActivationKind, BackwardCtx, BatchNorm2d, Conv2d, Conv2dSpec, ForwardCtx, Module,
};
use crate::tensor::{Parameter, Scalar, Tensor};

/// Convolution (no bias) → batch norm → optional rectifier.
#[derive(Clone, Debug)]
pub struct ConvBnAct<T: Scalar> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub act: Option<Activation<T>>,
}

impl<T: Scalar> ConvBnAct<T> {
    pub fn new(
        name: &str,
        spec: Conv2dSpec,
        act: Option<ActivationKind>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&format!("{name}.conv"), spec, false, rng)?,
            bn: BatchNorm2d::new(&format!("{name}.bn"), spec.out_channels),
            act: act.map(Activation::new),
        })
    }
}

impl<T: Scalar> Module<T> for ConvBnAct<T> {
    fn forward(&mut self, x: Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let y = self.conv.forward(x, ctx)?;
        let y = self.bn.forward(y, ctx)?;
        match &mut self.act {
            Some(a) => a.forward(y, ctx),
            None => Ok(y),
        }
    }

    fn backward(&mut self, grad: Tensor<T>, ctx: BackwardCtx) -> Result<Tensor<T>> {
        let inner = BackwardCtx {
            skip_input_grad: false,
            ..ctx
        };
        let g = match &mut self.act {
            Some(a) => a.backward(grad, inner)?,
            None => grad,
        };
        let g = self.bn.backward(g, inner)?;
        self.conv.backward(g, ctx)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.conv.visit_params_mut(f);
        self.bn.visit_params_mut(f);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.bn.visit_buffers_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.bn.visit_buffers(f);
    }
}
