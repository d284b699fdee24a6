use super::{missing_cache, BackwardCtx, ForwardCtx, Mode, Module};
use crate::error::{Error, Result};
use crate::tensor::{Parameter, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel batch normalisation state. Running statistics follow
/// `running = momentum·running + (1 − momentum)·batch`.
#[derive(Clone, Debug)]
pub struct BatchNormState<T: Scalar> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<f64>,
    mode: Mode,
    dims: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        let ones = Tensor::from_parts(vec![channels], vec![T::one(); channels]);
        let zeros = Tensor::from_parts(vec![channels], vec![T::zero(); channels]);
        Self {
            gamma: Parameter::new(format!("{name}.gamma"), ones.clone()),
            beta: Parameter::new(format!("{name}.beta"), zeros.clone()),
            running_mean: zeros,
            running_var: ones,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn forward_cached(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BnCache<T>)> {
        let (n, c, h, w) = x.nchw()?;
        if c != self.channels() {
            return Err(Error::shape(format!(
                "batchnorm over {} channels got {c}",
                self.channels()
            )));
        }
        let hw = h * w;
        let (mean, inv_std): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::config("batchnorm needs batch size ≥ 2 in train mode"));
                }
                let m = (n * hw) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let planes = || (0..n).map(|b| &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw]);
                    mean[ch] = planes().map(lane_sum).sum::<f64>() / m;
                    var[ch] = planes().map(|p| lane_sum_sq_dev(p, mean[ch])).sum::<f64>() / m;
                }
                let mo = self.momentum;
                for ch in 0..c {
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = T::from_f64(mo * rm.as_f64() + (1.0 - mo) * mean[ch]);
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = T::from_f64(mo * rv.as_f64() + (1.0 - mo) * var[ch]);
                }
                let inv = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
                (mean, inv)
            }
            Mode::Infer => (
                self.running_mean.data().iter().map(|v| v.as_f64()).collect(),
                self.running_var
                    .data()
                    .iter()
                    .map(|v| 1.0 / (v.as_f64() + self.eps).sqrt())
                    .collect(),
            ),
        };
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let (mu, is) = (T::from_f64(mean[ch]), T::from_f64(inv_std[ch]));
                let (g, be) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for ((xh, yv), &xv) in xhat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&x.data()[r]) {
                    *xh = (xv - mu) * is;
                    *yv = g * *xh + be;
                }
            }
        }
        let cache = BnCache {
            xhat,
            inv_std,
            mode,
            dims: x.dims().to_vec(),
        };
        Ok((Tensor::from_parts(x.dims().to_vec(), y), cache))
    }

    fn backward_cached(&self, cache: &BnCache<T>, dy: &Tensor<T>) -> Result<BatchNormGrads<T>> {
        if dy.dims() != cache.dims.as_slice() {
            return Err(Error::shape("batchnorm upstream gradient shape mismatch"));
        }
        let (n, c, h, w) = dy.nchw()?;
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut dx = vec![T::zero(); dy.len()];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ch in 0..c {
            let planes = || (0..n).map(|b| (b * c + ch) * hw..(b * c + ch + 1) * hw);
            let sum_dy: f64 = planes().map(|r| lane_sum(&dy.data()[r])).sum();
            let sum_dy_xhat: f64 = planes().map(|r| lane_dot(&dy.data()[r.clone()], &cache.xhat[r])).sum();
            dgamma[ch] = T::from_f64(sum_dy_xhat);
            dbeta[ch] = T::from_f64(sum_dy);
            let gamma = self.gamma.value.data()[ch].as_f64();
            let is = cache.inv_std[ch];
            // Train: dx = γ·σ⁻¹/m · (m·dy − Σdy − x̂·Σdy·x̂); infer: dx = γ·σ⁻¹·dy.
            let (a, b0, b1) = match cache.mode {
                Mode::Train => (gamma * is, -gamma * is * sum_dy / m, -gamma * is * sum_dy_xhat / m),
                Mode::Infer => (gamma * is, 0.0, 0.0),
            };
            let (a, b0, b1) = (T::from_f64(a), T::from_f64(b0), T::from_f64(b1));
            for r in planes() {
                for ((d, &g), &xh) in dx[r.clone()].iter_mut().zip(&dy.data()[r.clone()]).zip(&cache.xhat[r]) {
                    *d = a * g + b0 + b1 * xh;
                }
            }
        }
        Ok(BatchNormGrads {
            input: Tensor::from_parts(dy.dims().to_vec(), dx),
            gamma: dgamma,
            beta: dbeta,
        })
    }
}

const LANES: usize = 8;

// Eight independent accumulators so the reductions vectorise; the
// summation order is fixed, so results stay deterministic.
fn lane_sum<T: Scalar>(v: &[T]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let chunks = v.chunks_exact(LANES);
    let tail: f64 = chunks.remainder().iter().map(|x| x.as_f64()).sum();
    for ch in chunks {
        for (a, x) in acc.iter_mut().zip(ch) {
            *a += x.as_f64();
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn lane_sum_sq_dev<T: Scalar>(v: &[T], mu: f64) -> f64 {
    let mut acc = [0.0f64; LANES];
    let chunks = v.chunks_exact(LANES);
    let tail: f64 = chunks.remainder().iter().map(|x| (x.as_f64() - mu).powi(2)).sum();
    for ch in chunks {
        for (a, x) in acc.iter_mut().zip(ch) {
            let d = x.as_f64() - mu;
            *a += d * d;
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn lane_dot<T: Scalar>(u: &[T], v: &[T]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let cu = u.chunks_exact(LANES);
    let cv = v.chunks_exact(LANES);
    let tail: f64 = cu.remainder().iter().zip(cv.remainder()).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
    for (a8, b8) in cu.zip(cv) {
        for ((acc, a), b) in acc.iter_mut().zip(a8).zip(b8) {
            *acc += a.as_f64() * b.as_f64();
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Batch normalisation layer over N×C×H×W activations.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Scalar> {
    pub state: BatchNormState<T>,
    name: String,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            state: BatchNormState::new(name, channels),
            name: name.to_string(),
            cache: None,
        }
    }

    /// Forward pass returning the output only; exposed for direct testing.
    pub fn apply(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (y, cache) = self.state.forward_cached(x, mode)?;
        self.cache = Some(cache);
        Ok(y)
    }

    pub fn gradients(&self, dy: &Tensor<T>) -> Result<BatchNormGrads<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache(&self.name))?;
        self.state.backward_cached(cache, dy)
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        self.apply(&x, ctx.mode)
    }

    fn backward(&mut self, grad: Tensor<T>, _ctx: BackwardCtx) -> Result<Tensor<T>> {
        let g = self.gradients(&grad)?;
        self.state.gamma.accumulate(&g.gamma);
        self.state.beta.accumulate(&g.beta);
        Ok(g.input)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.state.gamma);
        f(&self.state.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.state.gamma);
        f(&mut self.state.beta);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{}.running_mean", self.name), &mut self.state.running_mean);
        f(&format!("{}.running_var", self.name), &mut self.state.running_var);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{}.running_mean", self.name), &self.state.running_mean);
        f(&format!("{}.running_var", self.name), &self.state.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_gradient, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.gen_range(-2.0..3.0)).collect()).unwrap()
    }

    fn channel_stats(y: &Tensor<f64>, ch: usize) -> (f64, f64) {
        let (n, c, h, w) = y.nchw().unwrap();
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| y.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        (mean, var.sqrt())
    }

    #[test]
    fn train_mode_normalises_to_affine_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut bn = BatchNorm2d::<f64>::new("bn", 3);
        bn.state.gamma.value.data_mut().copy_from_slice(&[2.0, -0.5, 1.0]);
        bn.state.beta.value.data_mut().copy_from_slice(&[0.3, 1.0, -1.0]);
        let x = random(&[4, 3, 5, 5], &mut rng);
        let y = bn.apply(&x, Mode::Train).unwrap();
        for ch in 0..3 {
            let (mean, std) = channel_stats(&y, ch);
            assert!((mean - bn.state.beta.value.data()[ch]).abs() < 1e-4);
            assert!((std - bn.state.gamma.value.data()[ch].abs()).abs() < 1e-4);
        }
    }

    #[test]
    fn infer_mode_with_unit_stats_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut bn = BatchNorm2d::<f64>::new("bn", 2);
        let x = random(&[1, 2, 3, 3], &mut rng);
        let y = bn.apply(&x, Mode::Infer).unwrap();
        assert!(relative_error(x.data(), y.data()) < 1e-5);
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 1);
        bn.state.beta.value.data_mut()[0] = 0.7;
        let x = Tensor::full(&[2, 1, 3, 3], 5.0).unwrap();
        let y = bn.apply(&x, Mode::Train).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn batch_of_one_in_train_mode_is_rejected() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 1);
        let x = Tensor::full(&[1, 1, 3, 3], 5.0).unwrap();
        assert!(matches!(bn.apply(&x, Mode::Train), Err(Error::Config(_))));
        assert!(bn.apply(&x, Mode::Infer).is_ok());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 1);
        let x = Tensor::new(&[2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        bn.apply(&x, Mode::Train).unwrap();
        assert!((bn.state.running_mean.data()[0] - 0.1 * 4.0).abs() < 1e-12);
        assert!((bn.state.running_var.data()[0] - (0.9 + 0.1 * 5.0)).abs() < 1e-12);
        assert!(bn.state.running_var.data()[0] >= 0.0);
    }

    #[test]
    fn infer_mode_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut bn = BatchNorm2d::<f64>::new("bn", 2);
        bn.state.running_mean.data_mut().copy_from_slice(&[0.4, -1.0]);
        bn.state.running_var.data_mut().copy_from_slice(&[2.0, 0.5]);
        bn.state.gamma.value.data_mut().copy_from_slice(&[1.5, -2.0]);
        let u = random(&[1, 2, 2, 2], &mut rng);
        let v = random(&[1, 2, 2, 2], &mut rng);
        let f = |bn: &mut BatchNorm2d<f64>, x: &Tensor<f64>| bn.apply(x, Mode::Infer).unwrap();
        let fu = f(&mut bn, &u);
        let fv = f(&mut bn, &v);
        let mix: Vec<f64> = u.data().iter().zip(v.data()).map(|(a, b)| 0.3 * a + 0.7 * b).collect();
        let fmix = f(&mut bn, &Tensor::new(&[1, 2, 2, 2], mix).unwrap());
        for i in 0..8 {
            let expect = 0.3 * fu.data()[i] + 0.7 * fv.data()[i];
            assert!((fmix.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_oracle_in_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for dims in [[2, 3, 3, 3], [3, 2, 2, 4], [4, 1, 3, 2], [2, 4, 1, 1], [2, 2, 5, 5]] {
            for mode in [Mode::Train, Mode::Infer] {
                let x = random(&dims, &mut rng);
                let mut bn = BatchNorm2d::<f64>::new("bn", dims[1]);
                for v in bn.state.gamma.value.data_mut() {
                    *v = rng.gen_range(0.5..2.0);
                }
                for v in bn.state.running_var.data_mut() {
                    *v = rng.gen_range(0.5..2.0);
                }
                let up = random(&dims, &mut rng);
                let dot = |y: &Tensor<f64>| y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum::<f64>();
                bn.apply(&x, mode).unwrap();
                let g = bn.gradients(&up).unwrap();
                let mut probe = bn.clone();
                let nx = finite_difference_gradient(|x| Ok(dot(&probe.apply(x, mode)?)), &x, 1e-5).unwrap();
                assert!(relative_error(g.input.data(), nx.data()) < 1e-6, "{dims:?} {mode:?}");

                let gamma0 = bn.state.gamma.value.clone();
                let mut probe = bn.clone();
                let ng = finite_difference_gradient(
                    |gm| {
                        probe.state.gamma.value = gm.clone();
                        Ok(dot(&probe.apply(&x, mode)?))
                    },
                    &gamma0,
                    1e-5,
                )
                .unwrap();
                assert!(relative_error(&g.gamma, ng.data()) < 1e-6);
            }
        }
    }
}
