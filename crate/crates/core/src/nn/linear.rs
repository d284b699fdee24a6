use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{missing_cache, BackwardCtx, ForwardCtx, Mode, Module};
use crate::error::{Error, Result};
use crate::tensor::{Parameter, Scalar, Tensor};

fn dense_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match (x.dims(), w.dims()) {
        ([n, d], [wd, m]) if d == wd => Ok((*n, *d, *m)),
        _ => Err(Error::shape(format!(
            "dense of {:?} with weight {:?}",
            x.dims(),
            w.dims()
        ))),
    }
}

/// `x · w + b` for x: N×D, w: D×M, b: M.
pub fn dense<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d, m) = dense_dims(x, weight)?;
    if bias.len() != m {
        return Err(Error::shape(format!("dense bias {} for {m} outputs", bias.len())));
    }
    let mut out = vec![T::zero(); n * m];
    for row in out.chunks_mut(m) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(n, d, m, x.data(), false, weight.data(), false, &mut out, true);
    Ok(Tensor::from_parts(vec![n, m], out))
}

#[derive(Clone, Debug)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, dy: &Tensor<T>) -> Result<DenseGrads<T>> {
    let (n, d, m) = dense_dims(x, weight)?;
    if dy.dims() != [n, m] {
        return Err(Error::shape("dense upstream gradient shape mismatch"));
    }
    let mut dx = vec![T::zero(); n * d];
    T::gemm(n, m, d, dy.data(), false, weight.data(), true, &mut dx, false);
    let mut dw = vec![T::zero(); d * m];
    T::gemm(d, n, m, x.data(), true, dy.data(), false, &mut dw, false);
    let mut db = vec![T::zero(); m];
    for row in dy.data().chunks(m) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok(DenseGrads {
        input: Tensor::from_parts(vec![n, d], dx),
        weight: Tensor::from_parts(vec![d, m], dw),
        bias: Tensor::from_parts(vec![m], db),
    })
}

/// Inverted dropout. Returns the output and, in train mode with a non-zero
/// rate, the per-element multiplier mask (0 or 1/(1−rate)).
pub fn dropout<T: Scalar>(
    x: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((Tensor::from_parts(x.dims().to_vec(), data), Some(mask)))
}

/// Fully connected layer with weight D×M and bias M.
#[derive(Clone, Debug)]
pub struct Dense<T: Scalar> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let bound = (6.0 / inputs as f64).sqrt();
        let w = (0..inputs * outputs)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        Ok(Self {
            weight: Parameter::new(format!("{name}.weight"), Tensor::new(&[inputs, outputs], w)?),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[outputs])?),
            input: None,
        })
    }

    pub fn outputs(&self) -> usize {
        self.bias.numel()
    }
}

impl<T: Scalar> Module<T> for Dense<T> {
    fn forward(&mut self, x: Tensor<T>, _ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let y = dense(&x, &self.weight.value, &self.bias.value)?;
        self.input = Some(x);
        Ok(y)
    }

    fn backward(&mut self, grad: Tensor<T>, _ctx: BackwardCtx) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache(&self.weight.name))?;
        let g = dense_backward(x, &self.weight.value, &grad)?;
        self.weight.accumulate(g.weight.data());
        self.bias.accumulate(g.bias.data());
        Ok(g.input)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct Dropout<T: Scalar> {
    pub rate: f64,
    mask: Option<Vec<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self { rate, mask: None })
    }
}

impl<T: Scalar> Module<T> for Dropout<T> {
    fn forward(&mut self, x: Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let (y, mask) = dropout(&x, self.rate, ctx.mode, &mut ctx.rng)?;
        self.mask = mask;
        Ok(y)
    }

    fn backward(&mut self, grad: Tensor<T>, _ctx: BackwardCtx) -> Result<Tensor<T>> {
        Ok(match &self.mask {
            None => grad,
            Some(mask) => {
                let data = grad.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                Tensor::from_parts(grad.dims().to_vec(), data)
            }
        })
    }

    fn visit_params(&self, _f: &mut dyn FnMut(&Parameter<T>)) {}

    fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&mut Parameter<T>)) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_gradient, relative_error};
    use rand::SeedableRng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn dropout_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = random(&[4, 8], &mut rng);
        assert_eq!(dropout(&x, 0.0, Mode::Train, &mut rng).unwrap().0, x);
        assert_eq!(dropout(&x, 0.2, Mode::Infer, &mut rng).unwrap().0, x);
        assert!(dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::<f64>::full(&[1, 4], 3.0).unwrap();
        let trials = 10_000;
        let mut acc = vec![0.0; 4];
        for _ in 0..trials {
            let (y, _) = dropout(&x, 0.2, Mode::Train, &mut rng).unwrap();
            for (a, v) in acc.iter_mut().zip(y.data()) {
                *a += v;
            }
        }
        for a in acc {
            let mean = a / trials as f64;
            assert!((mean - 3.0).abs() / 3.0 < 0.02, "{mean}");
        }
    }

    #[test]
    fn dense_shapes_and_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let layer = Dense::<f64>::new("fc", 10, 2, &mut rng).unwrap();
        assert_eq!(layer.weight.numel() + layer.bias.numel(), 22);
        let x = random(&[3, 4], &mut rng);
        let w = random(&[5, 2], &mut rng);
        assert!(dense(&x, &w, &Tensor::zeros(&[2]).unwrap()).is_err());
    }

    #[test]
    fn dense_gradients_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for (n, d, m) in [(1, 3, 2), (4, 5, 3), (2, 1, 1), (3, 7, 4), (5, 2, 6)] {
            let x = random(&[n, d], &mut rng);
            let w = random(&[d, m], &mut rng);
            let b = random(&[m], &mut rng);
            let up = random(&[n, m], &mut rng);
            let dot = |y: Tensor<f64>| y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum::<f64>();
            let g = dense_backward(&x, &w, &up).unwrap();
            let nx = finite_difference_gradient(|x| Ok(dot(dense(x, &w, &b)?)), &x, 1e-5).unwrap();
            let nw = finite_difference_gradient(|w| Ok(dot(dense(&x, w, &b)?)), &w, 1e-5).unwrap();
            let nb = finite_difference_gradient(|b| Ok(dot(dense(&x, &w, b)?)), &b, 1e-5).unwrap();
            assert!(relative_error(g.input.data(), nx.data()) < 1e-6);
            assert!(relative_error(g.weight.data(), nw.data()) < 1e-6);
            assert!(relative_error(g.bias.data(), nb.data()) < 1e-6);
        }
    }
}
