use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    activation, activation_backward, conv2d, conv2d_backward, dense, dense_backward, pooling,
    pooling_backward, ActivationKind, BackwardCtx, Conv2d, Conv2dSpec, Dense, ForwardCtx, Module,
    PoolKind,
};
use crate::tensor::{
    concat_channels, elementwise, elementwise_backward, split_channels, ElementwiseOp, Parameter,
    Scalar, Tensor,
};

pub const CBAM_REDUCTION: usize = 16;
pub const CBAM_SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Debug)]
struct MlpTrace<T> {
    input: Tensor<T>,
    hidden: Tensor<T>,
    rectified: Tensor<T>,
}

#[derive(Clone, Debug)]
struct CbamCache<T> {
    x: Tensor<T>,
    avg: MlpTrace<T>,
    max: MlpTrace<T>,
    channel_gate: Tensor<T>,
    gated: Tensor<T>,
    descriptors: Tensor<T>,
    spatial_gate: Tensor<T>,
}

/// Channel attention followed by spatial attention.
///
/// `Mc = σ(MLP(avg(x)) + MLP(max(x)))`, `x' = Mc ⊙ x`,
/// `Ms = σ(conv7×7([mean_c(x'); max_c(x')]))`, output `Ms ⊙ x'`.
#[derive(Clone, Debug)]
pub struct CbamBlock<T: Scalar> {
    pub channels: usize,
    pub reduction: usize,
    pub mlp_in: Dense<T>,
    pub mlp_out: Dense<T>,
    pub spatial: Conv2d<T>,
    cache: Option<CbamCache<T>>,
}

impl<T: Scalar> CbamBlock<T> {
    pub fn new(name: &str, channels: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 || channels < reduction {
            return Err(Error::config(format!(
                "CBAM channels {channels} not divisible by reduction {reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            channels,
            reduction,
            mlp_in: Dense::new(&format!("{name}.mlp_in"), channels, hidden, rng)?,
            mlp_out: Dense::new(&format!("{name}.mlp_out"), hidden, channels, rng)?,
            spatial: Conv2d::new(
                &format!("{name}.spatial"),
                Conv2dSpec::new(2, 1, CBAM_SPATIAL_KERNEL).same(),
                false,
                rng,
            )?,
            cache: None,
        })
    }

    /// Channel gate of the last forward, N×C×1×1.
    pub fn channel_map(&self) -> Option<&Tensor<T>> {
        self.cache.as_ref().map(|c| &c.channel_gate)
    }

    /// Spatial gate of the last forward, N×1×H×W.
    pub fn spatial_map(&self) -> Option<&Tensor<T>> {
        self.cache.as_ref().map(|c| &c.spatial_gate)
    }

    fn mlp(&self, pooled: Tensor<T>) -> Result<(Tensor<T>, MlpTrace<T>)> {
        let n = pooled.dims()[0];
        let input = pooled.reshape(&[n, self.channels])?;
        let hidden = dense(&input, &self.mlp_in.weight.value, &self.mlp_in.bias.value)?;
        let rectified = activation(ActivationKind::Relu, &hidden)?;
        let out = dense(&rectified, &self.mlp_out.weight.value, &self.mlp_out.bias.value)?;
        Ok((
            out,
            MlpTrace {
                input,
                hidden,
                rectified,
            },
        ))
    }

    fn mlp_backward(&mut self, trace: &MlpTrace<T>, dout: &Tensor<T>, guided: bool) -> Result<Tensor<T>> {
        let g2 = dense_backward(&trace.rectified, &self.mlp_out.weight.value, dout)?;
        self.mlp_out.weight.accumulate(g2.weight.data());
        self.mlp_out.bias.accumulate(g2.bias.data());
        let dh = activation_backward(ActivationKind::Relu, &trace.hidden, &trace.rectified, &g2.input, guided)?;
        let g1 = dense_backward(&trace.input, &self.mlp_in.weight.value, &dh)?;
        self.mlp_in.weight.accumulate(g1.weight.data());
        self.mlp_in.bias.accumulate(g1.bias.data());
        Ok(g1.input)
    }
}

impl<T: Scalar> Module<T> for CbamBlock<T> {
    fn forward(&mut self, x: Tensor<T>, _ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let (n, c, _, _) = x.nchw()?;
        if c != self.channels {
            return Err(Error::shape(format!("CBAM expects {} channels, got {c}", self.channels)));
        }
        let (za, avg) = self.mlp(pooling(PoolKind::GlobalAvg, &x)?)?;
        let (zm, max) = self.mlp(pooling(PoolKind::GlobalMax, &x)?)?;
        let logits = elementwise(&za, ElementwiseOp::Add(&zm))?;
        let channel_gate = activation(ActivationKind::Sigmoid, &logits)?.reshape(&[n, c, 1, 1])?;
        let gated = elementwise(&x, ElementwiseOp::Mul(&channel_gate))?;

        let mean_map = pooling(PoolKind::ChannelMeanMap, &gated)?;
        let max_map = pooling(PoolKind::ChannelMaxMap, &gated)?;
        let descriptors = concat_channels(&[&mean_map, &max_map])?;
        let s = conv2d(&descriptors, &self.spatial.spec, &self.spatial.weight.value, None)?;
        let spatial_gate = activation(ActivationKind::Sigmoid, &s)?;
        let out = elementwise(&gated, ElementwiseOp::Mul(&spatial_gate))?;

        self.cache = Some(CbamCache {
            x,
            avg,
            max,
            channel_gate,
            gated,
            descriptors,
            spatial_gate,
        });
        Ok(out)
    }

    fn backward(&mut self, grad: Tensor<T>, ctx: BackwardCtx) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| crate::nn::missing_cache("cbam"))?;
        let result = (|| {
            let (mut d_gated, d_sgate) =
                elementwise_backward(&cache.gated, ElementwiseOp::Mul(&cache.spatial_gate), &grad)?;
            let d_sgate = d_sgate.expect("tensor operand");
            let ds = activation_backward(
                ActivationKind::Sigmoid,
                &cache.spatial_gate,
                &cache.spatial_gate,
                &d_sgate,
                false,
            )?;
            let conv_g = conv2d_backward(
                &cache.descriptors,
                &self.spatial.spec,
                &self.spatial.weight.value,
                false,
                &ds,
                true,
            )?;
            self.spatial.weight.accumulate(conv_g.weight.data());
            let d_desc = conv_g.input.expect("requested");
            let maps = split_channels(&d_desc, &[1, 1])?;
            let from_mean = pooling_backward(PoolKind::ChannelMeanMap, &cache.gated, &maps[0])?;
            let from_max = pooling_backward(PoolKind::ChannelMaxMap, &cache.gated, &maps[1])?;
            for ((d, a), b) in d_gated.data_mut().iter_mut().zip(from_mean.data()).zip(from_max.data()) {
                *d += *a + *b;
            }

            let (mut dx, d_cgate) =
                elementwise_backward(&cache.x, ElementwiseOp::Mul(&cache.channel_gate), &d_gated)?;
            let d_cgate = d_cgate.expect("tensor operand");
            let n = cache.x.dims()[0];
            let gate_flat = cache.channel_gate.clone().reshape(&[n, self.channels])?;
            let dz = activation_backward(
                ActivationKind::Sigmoid,
                &gate_flat,
                &gate_flat,
                &d_cgate.reshape(&[n, self.channels])?,
                false,
            )?;
            let d_avg = self.mlp_backward(&cache.avg, &dz, ctx.guided)?;
            let d_max = self.mlp_backward(&cache.max, &dz, ctx.guided)?;
            let from_avg = pooling_backward(PoolKind::GlobalAvg, &cache.x, &d_avg)?;
            let from_gmax = pooling_backward(PoolKind::GlobalMax, &cache.x, &d_max)?;
            for ((d, a), b) in dx.data_mut().iter_mut().zip(from_avg.data()).zip(from_gmax.data()) {
                *d += *a + *b;
            }
            Ok(dx)
        })();
        self.cache = Some(cache);
        result
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.mlp_in.visit_params(f);
        self.mlp_out.visit_params(f);
        self.spatial.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.mlp_in.visit_params_mut(f);
        self.mlp_out.visit_params_mut(f);
        self.spatial.visit_params_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::{finite_difference_gradient, relative_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random(dims: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    #[test]
    fn rejects_indivisible_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(CbamBlock::<f64>::new("c", 12, 8, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn gate_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let mut block = CbamBlock::<f64>::new("c", 8, 4, &mut rng).unwrap();
        let x = random(&[2, 8, 14, 14], &mut rng, 1.0);
        block.forward(x, &mut ForwardCtx::infer()).unwrap();
        let cm = block.channel_map().unwrap();
        let sm = block.spatial_map().unwrap();
        assert_eq!(cm.dims(), &[2, 8, 1, 1]);
        assert_eq!(sm.dims(), &[2, 1, 14, 14]);
        assert!(cm.data().iter().chain(sm.data()).all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let mut block = CbamBlock::<f64>::new("c", 4, 2, &mut rng).unwrap();
        let y = block.forward(Tensor::zeros(&[1, 4, 5, 5]).unwrap(), &mut ForwardCtx::infer()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        for (c, r, dims) in [
            (4, 2, [1, 4, 5, 5]),
            (8, 4, [2, 8, 4, 3]),
            (4, 4, [2, 4, 6, 6]),
            (6, 2, [1, 6, 3, 4]),
            (8, 2, [1, 8, 5, 2]),
        ] {
            let mut block = CbamBlock::<f64>::new("c", c, r, &mut rng).unwrap();
            let x = random(&dims, &mut rng, 1.0);
            let up = random(&dims, &mut rng, 1.0);
            let dot = |y: Tensor<f64>| y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum::<f64>();
            block.forward(x.clone(), &mut ForwardCtx::infer()).unwrap();
            let dx = block.backward(up.clone(), BackwardCtx::default()).unwrap();
            let mut probe = block.clone();
            let nx = finite_difference_gradient(|x| Ok(dot(probe.forward(x.clone(), &mut ForwardCtx::infer())?)), &x, 1e-5).unwrap();
            assert!(relative_error(dx.data(), nx.data()) < 1e-5, "{dims:?}");

            let w0 = block.mlp_in.weight.value.clone();
            let mut probe = block.clone();
            let nw = finite_difference_gradient(
                |w| {
                    probe.mlp_in.weight.value = w.clone();
                    Ok(dot(probe.forward(x.clone(), &mut ForwardCtx::infer())?))
                },
                &w0,
                1e-5,
            )
            .unwrap();
            assert!(relative_error(block.mlp_in.weight.grad.data(), nw.data()) < 1e-5);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn never_increases_magnitude(seed in 0u64..10_000, scale in 0.1f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut block = CbamBlock::<f64>::new("c", 8, 4, &mut rng).unwrap();
            let x = random(&[1, 8, 4, 4], &mut rng, scale);
            let y = block.forward(x.clone(), &mut ForwardCtx::new(Mode::Train, 0)).unwrap();
            for (a, b) in y.data().iter().zip(x.data()) {
                prop_assert!(a.abs() <= b.abs());
            }
        }
    }
}
