use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{BackwardCtx, Conv2d, Conv2dSpec, ForwardCtx, Module};
use crate::tensor::{concat_channels, split_channels, Parameter, Scalar, Tensor};

/// Efficient redundant reconstruction convolution.
///
/// The input is split into four equal channel groups. The first two pass
/// through untouched, the third goes through a 3×3 convolution and the
/// fourth through a 5×5 convolution (both C/4 → C/4, same padding). The
/// four groups are concatenated back to C channels and fused by a 1×1
/// convolution to `channels_out`. No biases anywhere, so the learnable
/// weight count is `9·(C/4)² + 25·(C/4)² + C·C_out`.
#[derive(Clone, Debug)]
pub struct ErrcBlock<T: Scalar> {
    pub channels_in: usize,
    pub channels_out: usize,
    pub branch3: Conv2d<T>,
    pub branch5: Conv2d<T>,
    pub pointwise: Conv2d<T>,
}

impl<T: Scalar> ErrcBlock<T> {
    pub fn new(name: &str, channels_in: usize, channels_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if channels_in == 0 || channels_in % 4 != 0 {
            return Err(Error::config(format!(
                "ERRC input channels must be a positive multiple of 4, got {channels_in}"
            )));
        }
        let q = channels_in / 4;
        Ok(Self {
            channels_in,
            channels_out,
            branch3: Conv2d::new(&format!("{name}.branch3"), Conv2dSpec::new(q, q, 3).same(), false, rng)?,
            branch5: Conv2d::new(&format!("{name}.branch5"), Conv2dSpec::new(q, q, 5).same(), false, rng)?,
            pointwise: Conv2d::new(
                &format!("{name}.pointwise"),
                Conv2dSpec::new(channels_in, channels_out, 1),
                false,
                rng,
            )?,
        })
    }

    fn quarters(&self) -> [usize; 4] {
        [self.channels_in / 4; 4]
    }
}

impl<T: Scalar> Module<T> for ErrcBlock<T> {
    fn forward(&mut self, x: Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let (_, c, _, _) = x.nchw()?;
        if c != self.channels_in {
            return Err(Error::shape(format!(
                "ERRC expects {} channels, got {c}",
                self.channels_in
            )));
        }
        let mut groups = split_channels(&x, &self.quarters())?.into_iter();
        let (g1, g2, g3, g4) = (
            groups.next().unwrap(),
            groups.next().unwrap(),
            groups.next().unwrap(),
            groups.next().unwrap(),
        );
        let b3 = self.branch3.forward(g3, ctx)?;
        let b5 = self.branch5.forward(g4, ctx)?;
        let fused = concat_channels(&[&g1, &g2, &b3, &b5])?;
        self.pointwise.forward(fused, ctx)
    }

    fn backward(&mut self, grad: Tensor<T>, ctx: BackwardCtx) -> Result<Tensor<T>> {
        let inner = BackwardCtx {
            skip_input_grad: false,
            ..ctx
        };
        let dcat = self.pointwise.backward(grad, inner)?;
        let mut parts = split_channels(&dcat, &self.quarters())?.into_iter();
        let (d1, d2, d3, d4) = (
            parts.next().unwrap(),
            parts.next().unwrap(),
            parts.next().unwrap(),
            parts.next().unwrap(),
        );
        let d3 = self.branch3.backward(d3, inner)?;
        let d4 = self.branch5.backward(d4, inner)?;
        concat_channels(&[&d1, &d2, &d3, &d4])
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.branch3.visit_params(f);
        self.branch5.visit_params(f);
        self.pointwise.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.branch3.visit_params_mut(f);
        self.branch5.visit_params_mut(f);
        self.pointwise.visit_params_mut(f);
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

    fn zero_all(block: &mut ErrcBlock<f64>) {
        block.visit_params_mut(&mut |p| p.value.data_mut().iter_mut().for_each(|v| *v = 0.0));
    }

    #[test]
    fn rejects_channels_not_divisible_by_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(ErrcBlock::<f64>::new("e", 6, 6, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mut block = ErrcBlock::<f64>::new("e", 8, 8, &mut rng).unwrap();
        zero_all(&mut block);
        let x = random(&[2, 8, 5, 5], &mut rng);
        let y = block.forward(x, &mut ForwardCtx::new(Mode::Infer, 0)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_fusion_exposes_untouched_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let mut block = ErrcBlock::<f64>::new("e", 8, 8, &mut rng).unwrap();
        zero_all(&mut block);
        for i in 0..8 {
            block.pointwise.weight.value.data_mut()[i * 8 + i] = 1.0;
        }
        let x = random(&[1, 8, 4, 4], &mut rng);
        let y = block.forward(x.clone(), &mut ForwardCtx::infer()).unwrap();
        let hw = 16;
        assert_eq!(&y.data()[..4 * hw], &x.data()[..4 * hw]);
        assert!(y.data()[4 * hw..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn preserves_spatial_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut block = ErrcBlock::<f64>::new("e", 12, 8, &mut rng).unwrap();
        let y = block.forward(random(&[3, 12, 7, 6], &mut rng), &mut ForwardCtx::infer()).unwrap();
        assert_eq!(y.dims(), &[3, 8, 7, 6]);
    }

    #[test]
    fn input_gradient_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        for (c_in, c_out, dims) in [
            (4, 4, [1, 4, 5, 5]),
            (8, 8, [2, 8, 4, 4]),
            (8, 4, [1, 8, 6, 3]),
            (12, 12, [1, 12, 3, 3]),
            (4, 8, [2, 4, 5, 6]),
        ] {
            let mut block = ErrcBlock::<f64>::new("e", c_in, c_out, &mut rng).unwrap();
            let x = random(&dims, &mut rng);
            let y = block.forward(x.clone(), &mut ForwardCtx::infer()).unwrap();
            let dx = block.backward(Tensor::full(y.dims(), 1.0).unwrap(), BackwardCtx::default()).unwrap();
            let mut probe = block.clone();
            let num = finite_difference_gradient(
                |x| Ok(probe.forward(x.clone(), &mut ForwardCtx::infer())?.sum()),
                &x,
                1e-5,
            )
            .unwrap();
            assert!(relative_error(dx.data(), num.data()) < 1e-6);
        }
    }
}
