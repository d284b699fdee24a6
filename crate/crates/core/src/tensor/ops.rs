use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Elementwise operation applied to a left-hand tensor.
///
/// Tensor right-hand sides broadcast numpy-style aligned from the right:
/// every extent of `b` must be 1 or equal to the matching extent of `a`.
/// This covers scalars, per-channel `C×1×1` gates and `N×1×H×W` spatial
/// gates against `N×C×H×W` activations.
#[derive(Clone, Copy, Debug)]
pub enum ElementwiseOp<'a, T> {
    Add(&'a Tensor<T>),
    Sub(&'a Tensor<T>),
    Mul(&'a Tensor<T>),
    AddScalar(T),
    Scale(T),
    Clamp(T, T),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

fn pad4(dims: &[usize]) -> [usize; 4] {
    let mut out = [1; 4];
    out[4 - dims.len()..].copy_from_slice(dims);
    out
}

fn strides4(dims: &[usize; 4]) -> [usize; 4] {
    [dims[1] * dims[2] * dims[3], dims[2] * dims[3], dims[3], 1]
}

/// Strides to read `b` while iterating over `a`'s index space.
fn broadcast_strides(a: &[usize], b: &[usize]) -> Result<[usize; 4]> {
    if b.len() > a.len() {
        return Err(Error::shape(format!("cannot broadcast {b:?} onto {a:?}")));
    }
    let (a4, b4) = (pad4(a), pad4(b));
    let bs = strides4(&b4);
    let mut out = [0; 4];
    for i in 0..4 {
        if b4[i] == a4[i] {
            out[i] = if b4[i] == 1 { 0 } else { bs[i] };
        } else if b4[i] == 1 {
            out[i] = 0;
        } else {
            return Err(Error::shape(format!("cannot broadcast {b:?} onto {a:?}")));
        }
    }
    Ok(out)
}

/// Calls `f(a_index, b_index)` for every element of `a`.
fn for_each_broadcast(a: &[usize], bstr: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let a4 = pad4(a);
    let mut ai = 0;
    for i0 in 0..a4[0] {
        for i1 in 0..a4[1] {
            for i2 in 0..a4[2] {
                let base = i0 * bstr[0] + i1 * bstr[1] + i2 * bstr[2];
                for i3 in 0..a4[3] {
                    f(ai, base + i3 * bstr[3]);
                    ai += 1;
                }
            }
        }
    }
}

fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.dims() == b.dims() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| op(x, y)).collect();
        return Ok(Tensor::from_parts(a.dims().to_vec(), data));
    }
    let bstr = broadcast_strides(a.dims(), b.dims())?;
    let mut out = vec![T::zero(); a.len()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(a.dims(), bstr, |i, j| out[i] = op(ad[i], bd[j]));
    Ok(Tensor::from_parts(a.dims().to_vec(), out))
}

/// Sums `g` (shaped like `a`) down onto the shape of `b`.
fn unbroadcast<T: Scalar>(a_dims: &[usize], b: &Tensor<T>, g: &[T]) -> Result<Tensor<T>> {
    if a_dims == b.dims() {
        return Ok(Tensor::from_parts(b.dims().to_vec(), g.to_vec()));
    }
    let bstr = broadcast_strides(a_dims, b.dims())?;
    let mut out = vec![T::zero(); b.len()];
    for_each_broadcast(a_dims, bstr, |i, j| out[j] += g[i]);
    Ok(Tensor::from_parts(b.dims().to_vec(), out))
}

pub fn elementwise<T: Scalar>(a: &Tensor<T>, op: ElementwiseOp<'_, T>) -> Result<Tensor<T>> {
    match op {
        ElementwiseOp::Add(b) => binary(a, b, |x, y| x + y),
        ElementwiseOp::Sub(b) => binary(a, b, |x, y| x - y),
        ElementwiseOp::Mul(b) => binary(a, b, |x, y| x * y),
        ElementwiseOp::AddScalar(s) => Ok(a.map(|x| x + s)),
        ElementwiseOp::Scale(s) => Ok(a.map(|x| x * s)),
        ElementwiseOp::Clamp(lo, hi) => {
            if lo > hi {
                return Err(Error::Domain(format!("clamp bounds {lo} > {hi}")));
            }
            Ok(a.map(|x| x.max(lo).min(hi)))
        }
    }
}

/// Gradients of an elementwise op with respect to `a` and, for tensor
/// right-hand sides, `b` (summed over broadcast axes).
pub fn elementwise_backward<T: Scalar>(
    a: &Tensor<T>,
    op: ElementwiseOp<'_, T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    if grad.dims() != a.dims() {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match {:?}",
            grad.dims(),
            a.dims()
        )));
    }
    let g = grad.data();
    match op {
        ElementwiseOp::Add(b) => Ok((grad.clone(), Some(unbroadcast(a.dims(), b, g)?))),
        ElementwiseOp::Sub(b) => {
            let neg: Vec<T> = g.iter().map(|&v| -v).collect();
            Ok((grad.clone(), Some(unbroadcast(a.dims(), b, &neg)?)))
        }
        ElementwiseOp::Mul(b) => {
            let ga = binary(grad, b, |gv, bv| gv * bv)?;
            let gb: Vec<T> = g.iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect();
            Ok((ga, Some(unbroadcast(a.dims(), b, &gb)?)))
        }
        ElementwiseOp::AddScalar(_) => Ok((grad.clone(), None)),
        ElementwiseOp::Scale(s) => Ok((grad.map(|v| v * s), None)),
        ElementwiseOp::Clamp(lo, hi) => {
            let data = a
                .data()
                .iter()
                .zip(g)
                .map(|(&x, &gv)| if x > lo && x < hi { gv } else { T::zero() })
                .collect();
            Ok((Tensor::from_parts(a.dims().to_vec(), data), None))
        }
    }
}

struct ReducePlan {
    out_keep: Vec<usize>,
    out_squeezed: Vec<usize>,
    // for each input element, its output slot
    slots: Vec<usize>,
    group: usize,
}

fn plan_reduce(dims: &[usize], axes: &[usize]) -> Result<ReducePlan> {
    let rank = dims.len();
    if axes.is_empty() {
        return Err(Error::shape("reduce needs at least one axis"));
    }
    let mut reduced = [false; 4];
    for &ax in axes {
        if ax >= rank {
            return Err(Error::shape(format!("axis {ax} out of range for rank {rank}")));
        }
        reduced[ax] = true;
    }
    let out_keep: Vec<usize> = dims
        .iter()
        .enumerate()
        .map(|(i, &d)| if reduced[i] { 1 } else { d })
        .collect();
    let mut out_squeezed: Vec<usize> = dims
        .iter()
        .enumerate()
        .filter(|(i, _)| !reduced[*i])
        .map(|(_, &d)| d)
        .collect();
    if out_squeezed.is_empty() {
        out_squeezed.push(1);
    }
    let group = dims
        .iter()
        .enumerate()
        .filter(|(i, _)| reduced[*i])
        .map(|(_, &d)| d)
        .product();
    let bstr = broadcast_strides(dims, &out_keep)?;
    let mut slots = vec![0; dims.iter().product()];
    for_each_broadcast(dims, bstr, |i, j| slots[i] = j);
    Ok(ReducePlan {
        out_keep,
        out_squeezed,
        slots,
        group,
    })
}

/// Reduces `x` over `axes`. `Max` resolves ties to the first maximal
/// element in row-major scan order.
pub fn reduce<T: Scalar>(
    x: &Tensor<T>,
    op: ReduceOp,
    axes: &[usize],
    keep_dims: bool,
) -> Result<Tensor<T>> {
    if x.is_empty() {
        return Err(Error::Domain("reduce of empty tensor".into()));
    }
    let plan = plan_reduce(x.dims(), axes)?;
    let n_out: usize = plan.out_keep.iter().product();
    let out = match op {
        ReduceOp::Sum | ReduceOp::Mean => {
            let mut acc = vec![T::zero(); n_out];
            for (v, &s) in x.data().iter().zip(&plan.slots) {
                acc[s] += *v;
            }
            if op == ReduceOp::Mean {
                let inv = T::one() / T::from_f64(plan.group as f64);
                acc.iter_mut().for_each(|v| *v *= inv);
            }
            acc
        }
        ReduceOp::Max => {
            let mut acc = vec![T::neg_infinity(); n_out];
            for (v, &s) in x.data().iter().zip(&plan.slots) {
                if *v > acc[s] {
                    acc[s] = *v;
                }
            }
            acc
        }
    };
    let dims = if keep_dims { plan.out_keep } else { plan.out_squeezed };
    Ok(Tensor::from_parts(dims, out))
}

/// Gradient of [`reduce`] with respect to `x`; `grad` holds one value per
/// output slot (either `keep_dims` layout works, the flat order is shared).
pub fn reduce_backward<T: Scalar>(
    x: &Tensor<T>,
    op: ReduceOp,
    axes: &[usize],
    grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    let plan = plan_reduce(x.dims(), axes)?;
    let n_out: usize = plan.out_keep.iter().product();
    if grad.len() != n_out {
        return Err(Error::shape(format!(
            "reduce gradient has {} elements, expected {n_out}",
            grad.len()
        )));
    }
    let g = grad.data();
    let mut out = vec![T::zero(); x.len()];
    match op {
        ReduceOp::Sum => {
            for (o, &s) in out.iter_mut().zip(&plan.slots) {
                *o = g[s];
            }
        }
        ReduceOp::Mean => {
            let inv = T::one() / T::from_f64(plan.group as f64);
            for (o, &s) in out.iter_mut().zip(&plan.slots) {
                *o = g[s] * inv;
            }
        }
        ReduceOp::Max => {
            let mut best: Vec<Option<usize>> = vec![None; n_out];
            for (i, (&v, &s)) in x.data().iter().zip(&plan.slots).enumerate() {
                match best[s] {
                    Some(b) if x.data()[b] >= v => {}
                    _ => best[s] = Some(i),
                }
            }
            for (s, b) in best.into_iter().enumerate() {
                if let Some(i) = b {
                    out[i] = g[s];
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.dims().to_vec(), out))
}

/// Concatenates N×C×H×W tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?;
    let (n, _, h, w) = first.nchw()?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.nchw()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(format!(
                "concat of {:?} with {:?}",
                first.dims(),
                p.dims()
            )));
        }
        total_c += pc;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total_c * hw);
    for b in 0..n {
        for p in parts {
            let pc = p.dims()[1];
            data.extend_from_slice(&p.data()[b * pc * hw..(b + 1) * pc * hw]);
        }
    }
    Ok(Tensor::from_parts(vec![n, total_c, h, w], data))
}

/// Splits an N×C×H×W tensor into consecutive channel groups of `sizes`.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = x.nchw()?;
    if sizes.iter().sum::<usize>() != c || sizes.iter().any(|&s| s == 0) {
        return Err(Error::shape(format!(
            "split sizes {sizes:?} do not partition {c} channels"
        )));
    }
    let hw = h * w;
    let mut outs: Vec<Vec<T>> = sizes.iter().map(|&s| Vec::with_capacity(n * s * hw)).collect();
    for b in 0..n {
        let mut off = b * c * hw;
        for (out, &s) in outs.iter_mut().zip(sizes) {
            out.extend_from_slice(&x.data()[off..off + s * hw]);
            off += s * hw;
        }
    }
    Ok(outs
        .into_iter()
        .zip(sizes)
        .map(|(d, &s)| Tensor::from_parts(vec![n, s, h, w], d))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_gradient, relative_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims, data.to_vec()).unwrap()
    }

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn add_and_scale() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(elementwise(&a, ElementwiseOp::Add(&b)).unwrap().data(), &[4.0, 6.0]);
        let c = t(&[3], &[1.0, 2.0, 3.0]);
        assert_eq!(
            elementwise(&c, ElementwiseOp::Scale(0.0)).unwrap().data(),
            &[0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn per_channel_ones_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 4, 5], &mut rng);
        let ones = Tensor::full(&[3, 1, 1], 1.0).unwrap();
        assert_eq!(elementwise(&x, ElementwiseOp::Mul(&ones)).unwrap(), x);
    }

    #[test]
    fn broadcast_mismatch_is_shape_error() {
        let a = Tensor::<f64>::zeros(&[2, 3, 4, 4]).unwrap();
        let b = Tensor::<f64>::zeros(&[2, 1, 4]).unwrap();
        assert!(matches!(
            elementwise(&a, ElementwiseOp::Add(&b)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn reductions() {
        let x = t(&[2], &[2.0, 4.0]);
        assert_eq!(reduce(&x, ReduceOp::Mean, &[0], false).unwrap().data(), &[3.0]);
        let mut hot = vec![0.0; 9];
        hot[4] = 7.0;
        let m = t(&[1, 1, 3, 3], &hot);
        assert_eq!(reduce(&m, ReduceOp::Max, &[2, 3], true).unwrap().data(), &[7.0]);
        let g = reduce_backward(&x, ReduceOp::Sum, &[0], &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.data(), &[1.0, 1.0]);
    }

    #[test]
    fn max_backward_routes_to_first_maximum() {
        let x = t(&[1, 4], &[1.0, 5.0, 5.0, 2.0]);
        let g = reduce_backward(&x, ReduceOp::Max, &[1], &Tensor::scalar(3.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&[2, 2, 3, 3], &mut rng);
        let b = random(&[2, 3, 3, 3], &mut rng);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.dims(), &[2, 5, 3, 3]);
        let parts = split_channels(&c, &[2, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);

        let x = random(&[1, 8, 2, 2], &mut rng);
        let parts = split_channels(&x, &[2, 2, 2, 2]).unwrap();
        assert_eq!(parts.len(), 4);
        assert_eq!(parts[2].data(), &x.data()[16..24]);
        assert!(split_channels(&x, &[2, 2, 2]).is_err());
        let bad = random(&[1, 1, 3, 2], &mut rng);
        assert!(concat_channels(&[&x, &bad]).is_err());
    }

    #[test]
    fn broadcast_mul_gradients_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for dims in [[2, 3, 4, 4], [1, 2, 3, 5], [3, 4, 2, 2], [2, 1, 3, 3], [1, 5, 1, 4]] {
            let a = random(&dims, &mut rng);
            for b_dims in [vec![dims[1], 1, 1], vec![dims[0], 1, dims[2], dims[3]]] {
                let b = random(&b_dims, &mut rng);
                let w = random(&dims, &mut rng);
                let loss = |a: &Tensor<f64>, b: &Tensor<f64>| {
                    let y = elementwise(a, ElementwiseOp::Mul(b)).unwrap();
                    y.data().iter().zip(w.data()).map(|(p, q)| p * q).sum::<f64>()
                };
                let (ga, gb) = elementwise_backward(&a, ElementwiseOp::Mul(&b), &w).unwrap();
                let na = finite_difference_gradient(|x| Ok(loss(x, &b)), &a, 1e-5).unwrap();
                let nb = finite_difference_gradient(|x| Ok(loss(&a, x)), &b, 1e-5).unwrap();
                assert!(relative_error(ga.data(), na.data()) < 1e-6);
                assert!(relative_error(gb.unwrap().data(), nb.data()) < 1e-6);
            }
        }
    }

    #[test]
    fn reduce_gradients_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for dims in [[2, 3, 4, 4], [1, 2, 3, 5], [3, 1, 2, 2], [2, 2, 1, 3], [1, 4, 3, 3]] {
            let x = random(&dims, &mut rng);
            for (op, axes) in [
                (ReduceOp::Sum, vec![1]),
                (ReduceOp::Mean, vec![2, 3]),
                (ReduceOp::Max, vec![2, 3]),
                (ReduceOp::Max, vec![1]),
            ] {
                let out = reduce(&x, op, &axes, true).unwrap();
                let w = random(out.dims(), &mut rng);
                let loss = |x: &Tensor<f64>| {
                    let y = reduce(x, op, &axes, true)?;
                    Ok(y.data().iter().zip(w.data()).map(|(p, q)| p * q).sum())
                };
                let g = reduce_backward(&x, op, &axes, &w).unwrap();
                let n = finite_difference_gradient(loss, &x, 1e-5).unwrap();
                assert!(relative_error(g.data(), n.data()) < 1e-6, "{op:?} {axes:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn split_inverts_concat(n in 1usize..3, c1 in 1usize..4, c2 in 1usize..4, h in 1usize..4, w in 1usize..4, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&[n, c1, h, w], &mut rng);
            let b = random(&[n, c2, h, w], &mut rng);
            let parts = split_channels(&concat_channels(&[&a, &b]).unwrap(), &[c1, c2]).unwrap();
            prop_assert_eq!(&parts[0], &a);
            prop_assert_eq!(&parts[1], &b);
        }

        #[test]
        fn broadcast_mul_conserves_gradient_mass(seed in 0u64..1000) {
            // With b = ones, d(sum(a*b))/db summed equals the total upstream mass.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::full(&[2, 3, 2, 2], 1.0).unwrap();
            let b = Tensor::full(&[3, 1, 1], 1.0).unwrap();
            let g = random(&[2, 3, 2, 2], &mut rng);
            let (ga, gb) = elementwise_backward(&a, ElementwiseOp::Mul(&b), &g).unwrap();
            prop_assert!((gb.unwrap().sum() - g.sum()).abs() < 1e-12);
            prop_assert!((ga.sum() - g.sum()).abs() < 1e-12);
        }
    }
}
