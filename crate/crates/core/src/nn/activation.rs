use super::{missing_cache, BackwardCtx, ForwardCtx, Module};
use crate::error::{Error, Result};
use crate::tensor::{Parameter, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    Relu6,
    Sigmoid,
    /// Over the last axis of an N×K tensor.
    Softmax,
}

fn sigmoid<T: Scalar>(v: T) -> T {
    // Stable in both tails.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Scalar>(kind: ActivationKind, x: &Tensor<T>) -> Result<Tensor<T>> {
    let six = T::from_f64(6.0);
    Ok(match kind {
        ActivationKind::Relu => x.map(|v| v.max(T::zero())),
        ActivationKind::Relu6 => x.map(|v| v.max(T::zero()).min(six)),
        ActivationKind::Sigmoid => x.map(sigmoid),
        ActivationKind::Softmax => {
            if x.rank() != 2 {
                return Err(Error::shape(format!(
                    "softmax expects N×classes, got {:?}",
                    x.dims()
                )));
            }
            let k = x.dims()[1];
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(k) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v /= total);
            }
            Tensor::from_parts(x.dims().to_vec(), out)
        }
    })
}

/// Gradient w.r.t. the activation input. `x` is the forward input and `y`
/// the forward output. With `guided`, rectifiers also drop negative
/// upstream gradient.
pub fn activation_backward<T: Scalar>(
    kind: ActivationKind,
    x: &Tensor<T>,
    y: &Tensor<T>,
    dy: &Tensor<T>,
    guided: bool,
) -> Result<Tensor<T>> {
    if dy.dims() != x.dims() || y.dims() != x.dims() {
        return Err(Error::shape("activation gradient shape mismatch"));
    }
    let zero = T::zero();
    let six = T::from_f64(6.0);
    let gate = |open: bool, g: T| {
        if open && (!guided || g > zero) {
            g
        } else {
            zero
        }
    };
    let data: Vec<T> = match kind {
        ActivationKind::Relu => x
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &g)| gate(v > zero, g))
            .collect(),
        ActivationKind::Relu6 => x
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &g)| gate(v > zero && v < six, g))
            .collect(),
        ActivationKind::Sigmoid => y
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&s, &g)| g * s * (T::one() - s))
            .collect(),
        ActivationKind::Softmax => {
            let k = x.dims()[1];
            let mut out = vec![zero; x.len()];
            for ((o, yr), gr) in out.chunks_mut(k).zip(y.data().chunks(k)).zip(dy.data().chunks(k)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                    *ov = yv * (gv - dot);
                }
            }
            out
        }
    };
    Ok(Tensor::from_parts(x.dims().to_vec(), data))
}

/// Stateless activation layer.
#[derive(Clone, Debug)]
pub struct Activation<T: Scalar> {
    pub kind: ActivationKind,
    cache: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Activation<T> {
    pub fn new(kind: ActivationKind) -> Self {
        Self { kind, cache: None }
    }
}

impl<T: Scalar> Module<T> for Activation<T> {
    fn forward(&mut self, x: Tensor<T>, _ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let y = activation(self.kind, &x)?;
        self.cache = Some((x, y.clone()));
        Ok(y)
    }

    fn backward(&mut self, grad: Tensor<T>, ctx: BackwardCtx) -> Result<Tensor<T>> {
        let (x, y) = self.cache.as_ref().ok_or_else(|| missing_cache("activation"))?;
        activation_backward(self.kind, x, y, &grad, ctx.guided)
    }

    fn visit_params(&self, _f: &mut dyn FnMut(&Parameter<T>)) {}

    fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&mut Parameter<T>)) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_gradient, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(data: &[f64]) -> Tensor<f64> {
        Tensor::new(&[1, data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn pointwise_values() {
        assert_eq!(activation(ActivationKind::Relu6, &v(&[7.0])).unwrap().data(), &[6.0]);
        assert_eq!(activation(ActivationKind::Relu, &v(&[-1.0, 2.0])).unwrap().data(), &[0.0, 2.0]);
        assert_eq!(activation(ActivationKind::Softmax, &v(&[0.0, 0.0])).unwrap().data(), &[0.5, 0.5]);
        assert_eq!(activation(ActivationKind::Sigmoid, &v(&[0.0])).unwrap().data(), &[0.5]);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = Tensor::new(&[50, 2], (0..100).map(|_| rng.gen_range(-10.0..10.0)).collect()).unwrap();
        let y = activation(ActivationKind::Softmax, &x).unwrap();
        for row in y.data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
        let big = v(&[1000.0, -1000.0]);
        assert!(activation(ActivationKind::Softmax, &big).unwrap().is_finite());
    }

    #[test]
    fn guided_gate_requires_positive_input_and_gradient() {
        let x = v(&[-1.0, 2.0, 3.0, 7.0]);
        let y = activation(ActivationKind::Relu6, &x).unwrap();
        let dy = v(&[1.0, -1.0, 2.0, 2.0]);
        let plain = activation_backward(ActivationKind::Relu6, &x, &y, &dy, false).unwrap();
        assert_eq!(plain.data(), &[0.0, -1.0, 2.0, 0.0]);
        let guided = activation_backward(ActivationKind::Relu6, &x, &y, &dy, true).unwrap();
        assert_eq!(guided.data(), &[0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn gradients_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for kind in [ActivationKind::Relu, ActivationKind::Relu6, ActivationKind::Sigmoid, ActivationKind::Softmax] {
            for (n, k) in [(1, 2), (3, 2), (2, 5), (4, 3), (5, 7)] {
                // Keep away from the rectifier kinks at 0 and 6.
                let x = Tensor::new(
                    &[n, k],
                    (0..n * k)
                        .map(|_| {
                            let m: f64 = rng.gen_range(0.1..8.0);
                            if rng.gen_bool(0.3) { -m } else if (5.9..6.1).contains(&m) { 4.0 } else { m }
                        })
                        .collect(),
                )
                .unwrap();
                let up = Tensor::new(&[n, k], (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
                let y = activation(kind, &x).unwrap();
                let g = activation_backward(kind, &x, &y, &up, false).unwrap();
                let num = finite_difference_gradient(
                    |x| Ok(activation(kind, x)?.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()),
                    &x,
                    1e-5,
                )
                .unwrap();
                assert!(relative_error(g.data(), num.data()) < 1e-6, "{kind:?}");
            }
        }
    }
}
