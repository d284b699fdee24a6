use rand_chacha::ChaCha8Rng;

use super::ConvBnAct;
use crate::error::{Error, Result};
use crate::nn::{ActivationKind, BackwardCtx, Conv2dSpec, ForwardCtx, Module};
use crate::tensor::{Parameter, Scalar, Tensor};

pub const EXPANSION: usize = 3;

/// Expand (1×1) → depthwise 3×3 → project (1×1), each followed by batch
/// norm; ReLU6 after the first two. Adds the input back when the stride is
/// 1 and the channel count is unchanged.
#[derive(Clone, Debug)]
pub struct InvertedResidualBlock<T: Scalar> {
    pub channels_in: usize,
    pub channels_out: usize,
    pub stride: usize,
    pub expansion: usize,
    pub expand: ConvBnAct<T>,
    pub depthwise: ConvBnAct<T>,
    pub project: ConvBnAct<T>,
}

impl<T: Scalar> InvertedResidualBlock<T> {
    pub fn new(
        name: &str,
        channels_in: usize,
        channels_out: usize,
        stride: usize,
        expansion: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !(1..=2).contains(&stride) {
            return Err(Error::config(format!("inverted residual stride must be 1 or 2, got {stride}")));
        }
        if expansion == 0 {
            return Err(Error::config("expansion factor must be positive"));
        }
        let hidden = channels_in * expansion;
        let relu6 = Some(ActivationKind::Relu6);
        Ok(Self {
            channels_in,
            channels_out,
            stride,
            expansion,
            expand: ConvBnAct::new(&format!("{name}.expand"), Conv2dSpec::new(channels_in, hidden, 1), relu6, rng)?,
            depthwise: ConvBnAct::new(
                &format!("{name}.depthwise"),
                Conv2dSpec::depthwise(hidden, 3).stride(stride).padding(1),
                relu6,
                rng,
            )?,
            project: ConvBnAct::new(&format!("{name}.project"), Conv2dSpec::new(hidden, channels_out, 1), None, rng)?,
        })
    }

    pub fn has_skip(&self) -> bool {
        self.stride == 1 && self.channels_in == self.channels_out
    }
}

impl<T: Scalar> Module<T> for InvertedResidualBlock<T> {
    fn forward(&mut self, x: Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let skip = self.has_skip().then(|| x.clone());
        let y = self.expand.forward(x, ctx)?;
        let y = self.depthwise.forward(y, ctx)?;
        let mut y = self.project.forward(y, ctx)?;
        if let Some(s) = skip {
            for (a, b) in y.data_mut().iter_mut().zip(s.data()) {
                *a += *b;
            }
        }
        Ok(y)
    }

    fn backward(&mut self, grad: Tensor<T>, ctx: BackwardCtx) -> Result<Tensor<T>> {
        let inner = BackwardCtx {
            skip_input_grad: false,
            ..ctx
        };
        let skip = self.has_skip().then(|| grad.clone());
        let g = self.project.backward(grad, inner)?;
        let g = self.depthwise.backward(g, inner)?;
        let mut g = self.expand.backward(g, inner)?;
        if let Some(s) = skip {
            for (a, b) in g.data_mut().iter_mut().zip(s.data()) {
                *a += *b;
            }
        }
        Ok(g)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.expand.visit_params(f);
        self.depthwise.visit_params(f);
        self.project.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.expand.visit_params_mut(f);
        self.depthwise.visit_params_mut(f);
        self.project.visit_params_mut(f);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.expand.visit_buffers_mut(f);
        self.depthwise.visit_buffers_mut(f);
        self.project.visit_buffers_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.expand.visit_buffers(f);
        self.depthwise.visit_buffers(f);
        self.project.visit_buffers(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::{finite_difference_gradient, relative_error};
    use rand::{Rng, SeedableRng};

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_weights_with_skip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let mut block = InvertedResidualBlock::<f64>::new("ir", 4, 4, 1, EXPANSION, &mut rng).unwrap();
        block.visit_params_mut(&mut |p| p.value.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let x = random(&[2, 4, 5, 5], &mut rng);
        for mode in [Mode::Train, Mode::Infer] {
            let y = block.forward(x.clone(), &mut ForwardCtx::new(mode, 0)).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn stride_two_halves_spatial_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let mut block = InvertedResidualBlock::<f32>::new("ir", 4, 8, 2, EXPANSION, &mut rng).unwrap();
        assert!(!block.has_skip());
        let y = block.forward(Tensor::zeros(&[1, 4, 28, 28]).unwrap(), &mut ForwardCtx::infer()).unwrap();
        assert_eq!(y.dims(), &[1, 8, 14, 14]);
    }

    #[test]
    fn gradients_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        for (c_in, c_out, stride, dims) in [
            (4, 4, 1, [2, 4, 4, 4]),
            (2, 4, 2, [2, 2, 6, 6]),
            (3, 3, 1, [3, 3, 3, 3]),
            (4, 2, 2, [2, 4, 5, 5]),
            (2, 2, 1, [2, 2, 5, 3]),
        ] {
            for mode in [Mode::Train, Mode::Infer] {
                let mut block = InvertedResidualBlock::<f64>::new("ir", c_in, c_out, stride, EXPANSION, &mut rng).unwrap();
                let x = random(&dims, &mut rng);
                let y = block.forward(x.clone(), &mut ForwardCtx::new(mode, 0)).unwrap();
                let up = random(y.dims(), &mut rng);
                let dot = |y: Tensor<f64>| y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum::<f64>();
                let dx = block.backward(up.clone(), BackwardCtx::default()).unwrap();
                let mut probe = block.clone();
                let nx = finite_difference_gradient(
                    |x| Ok(dot(probe.forward(x.clone(), &mut ForwardCtx::new(mode, 0))?)),
                    &x,
                    1e-5,
                )
                .unwrap();
                assert!(relative_error(dx.data(), nx.data()) < 1e-4, "{dims:?} {mode:?}");
            }
        }
    }
}
