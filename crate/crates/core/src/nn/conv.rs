use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{missing_cache, BackwardCtx, ForwardCtx, Module};
use crate::error::{Error, Result};
use crate::tensor::{Parameter, Scalar, Tensor};

/// Square-kernel 2-D convolution with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    /// Padding that keeps spatial size at stride 1.
    pub fn same(self) -> Self {
        let p = self.kernel / 2;
        self.padding(p)
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        Self::new(channels, channels, kernel).groups(channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::config(format!("degenerate conv spec {self:?}")));
        }
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(Error::config(format!(
                "groups {} must divide {} and {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        ]
    }

    pub fn weight_count(&self) -> usize {
        self.weight_dims().iter().product()
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let extent = |n: usize| {
            let padded = n + 2 * self.padding;
            if padded < self.kernel {
                None
            } else {
                Some((padded - self.kernel) / self.stride + 1)
            }
        };
        match (extent(h), extent(w)) {
            (Some(ho), Some(wo)) => Ok((ho, wo)),
            _ => Err(Error::shape(format!(
                "kernel {} with padding {} does not fit {h}×{w}",
                self.kernel, self.padding
            ))),
        }
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.in_channels == self.out_channels
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

fn geometry<T: Scalar>(x: &Tensor<T>, spec: &Conv2dSpec, weight: &Tensor<T>) -> Result<(usize, Geometry)> {
    spec.validate()?;
    let (n, c, h, w) = x.nchw()?;
    if c != spec.in_channels {
        return Err(Error::shape(format!(
            "conv expects {} input channels, got {c}",
            spec.in_channels
        )));
    }
    if weight.dims() != spec.weight_dims() {
        return Err(Error::shape(format!(
            "conv weight {:?}, expected {:?}",
            weight.dims(),
            spec.weight_dims()
        )));
    }
    let (ho, wo) = spec.output_size(h, w)?;
    Ok((n, Geometry { c, h, w, ho, wo }))
}

/// Range of output columns whose input column `o*s + off - p` lands inside `[0, len)`.
#[inline]
fn valid_range(len: usize, out_len: usize, off: usize, s: usize, p: usize) -> (usize, usize) {
    // o*s + off >= p
    let lo = if off >= p { 0 } else { (p - off).div_ceil(s) };
    // o*s + off - p <= len - 1
    let hi = if len + p > off {
        ((len + p - off - 1) / s + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds channels `[c0, c0+cg)` of one image into a `(cg·k·k) × (ho·wo)` matrix.
fn im2col<T: Scalar>(img: &[T], spec: &Conv2dSpec, g: &Geometry, c0: usize, cg: usize, col: &mut [T]) {
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let hw_o = g.ho * g.wo;
    for c in 0..cg {
        let plane = &img[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ki in 0..k {
            let (oy_lo, oy_hi) = valid_range(g.h, g.ho, ki, s, p);
            for kj in 0..k {
                let row = &mut col[((c * k + ki) * k + kj) * hw_o..][..hw_o];
                let (ox_lo, ox_hi) = valid_range(g.w, g.wo, kj, s, p);
                for oy in 0..g.ho {
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if oy < oy_lo || oy >= oy_hi || ox_lo >= ox_hi {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let iy = oy * s + ki - p;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    dst[..ox_lo].iter_mut().for_each(|v| *v = T::zero());
                    dst[ox_hi..].iter_mut().for_each(|v| *v = T::zero());
                    let ix0 = ox_lo * s + kj - p;
                    if s == 1 {
                        dst[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for (j, d) in dst[ox_lo..ox_hi].iter_mut().enumerate() {
                            *d = src[ix0 + j * s];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into image planes.
fn col2im<T: Scalar>(col: &[T], spec: &Conv2dSpec, g: &Geometry, c0: usize, cg: usize, img: &mut [T]) {
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let hw_o = g.ho * g.wo;
    for c in 0..cg {
        let plane = &mut img[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ki in 0..k {
            let (oy_lo, oy_hi) = valid_range(g.h, g.ho, ki, s, p);
            for kj in 0..k {
                let row = &col[((c * k + ki) * k + kj) * hw_o..][..hw_o];
                let (ox_lo, ox_hi) = valid_range(g.w, g.wo, kj, s, p);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ki - p;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let src = &row[oy * g.wo..(oy + 1) * g.wo];
                    let ix0 = ox_lo * s + kj - p;
                    for (j, &v) in src[ox_lo..ox_hi].iter().enumerate() {
                        dst[ix0 + j * s] += v;
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Scalar>(img: &[T], weight: &[T], spec: &Conv2dSpec, g: &Geometry, out: &mut [T]) {
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        let wk = &weight[c * k * k..(c + 1) * k * k];
        let dst = &mut out[c * g.ho * g.wo..(c + 1) * g.ho * g.wo];
        dst.iter_mut().for_each(|v| *v = T::zero());
        for ki in 0..k {
            let (oy_lo, oy_hi) = valid_range(g.h, g.ho, ki, s, p);
            for kj in 0..k {
                let wv = wk[ki * k + kj];
                let (ox_lo, ox_hi) = valid_range(g.w, g.wo, kj, s, p);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ki - p;
                    let src = &plane[iy * g.w..];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let ix0 = ox_lo * s + kj - p;
                    for (d, &v) in drow[ox_lo..ox_hi].iter_mut().zip(src[ix0..].iter().step_by(s)) {
                        *d += wv * v;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward<T: Scalar>(
    img: &[T],
    weight: &[T],
    spec: &Conv2dSpec,
    g: &Geometry,
    dout: &[T],
    dw: &mut [T],
    dx: Option<&mut [T]>,
) {
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let mut dx = dx;
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        let wk = &weight[c * k * k..(c + 1) * k * k];
        let dwk = &mut dw[c * k * k..(c + 1) * k * k];
        let drows = &dout[c * g.ho * g.wo..(c + 1) * g.ho * g.wo];
        for ki in 0..k {
            let (oy_lo, oy_hi) = valid_range(g.h, g.ho, ki, s, p);
            for kj in 0..k {
                let (ox_lo, ox_hi) = valid_range(g.w, g.wo, kj, s, p);
                if ox_lo >= ox_hi {
                    continue;
                }
                let wv = wk[ki * k + kj];
                let mut acc = T::zero();
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ki - p;
                    let ix0 = ox_lo * s + kj - p;
                    let grow = &drows[oy * g.wo..(oy + 1) * g.wo];
                    let src = &plane[iy * g.w..];
                    for (&gv, &v) in grow[ox_lo..ox_hi].iter().zip(src[ix0..].iter().step_by(s)) {
                        acc += gv * v;
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let dplane = &mut dx[c * g.h * g.w + iy * g.w + ix0..];
                        for (&gv, d) in grow[ox_lo..ox_hi].iter().zip(dplane.iter_mut().step_by(s)) {
                            *d += gv * wv;
                        }
                    }
                }
                dwk[ki * k + kj] += acc;
            }
        }
    }
}

/// Cross-correlation of an N×C×H×W batch with zero padding.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    spec: &Conv2dSpec,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, g) = geometry(x, spec, weight)?;
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(Error::shape(format!(
                "conv bias has {} entries, expected {}",
                b.len(),
                spec.out_channels
            )));
        }
    }
    let co = spec.out_channels;
    let hw_o = g.ho * g.wo;
    let in_per = g.c * g.h * g.w;
    let mut out = vec![T::zero(); n * co * hw_o];

    let cig = spec.in_channels / spec.groups;
    let cog = co / spec.groups;
    let kk = cig * spec.kernel * spec.kernel;
    let mut col = if spec.is_depthwise() || spec.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * hw_o]
    };
    let w = weight.data();

    for b in 0..n {
        let img = &x.data()[b * in_per..(b + 1) * in_per];
        let dst = &mut out[b * co * hw_o..(b + 1) * co * hw_o];
        if spec.is_depthwise() {
            depthwise_forward(img, w, spec, &g, dst);
        } else {
            for grp in 0..spec.groups {
                let wg = &w[grp * cog * kk..(grp + 1) * cog * kk];
                let dg = &mut dst[grp * cog * hw_o..(grp + 1) * cog * hw_o];
                if spec.is_pointwise() {
                    let src = &img[grp * cig * hw_o..(grp + 1) * cig * hw_o];
                    T::gemm(cog, kk, hw_o, wg, false, src, false, dg, false);
                } else {
                    im2col(img, spec, &g, grp * cig, cig, &mut col);
                    T::gemm(cog, kk, hw_o, wg, false, &col, false, dg, false);
                }
            }
        }
        if let Some(bias) = bias {
            for (c, &bv) in bias.data().iter().enumerate() {
                dst[c * hw_o..(c + 1) * hw_o].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, co, g.ho, g.wo], out))
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads<T> {
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    spec: &Conv2dSpec,
    weight: &Tensor<T>,
    with_bias: bool,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<Conv2dGrads<T>> {
    let (n, g) = geometry(x, spec, weight)?;
    let co = spec.out_channels;
    if grad_out.dims() != [n, co, g.ho, g.wo] {
        return Err(Error::shape(format!(
            "conv upstream gradient {:?}, expected {:?}",
            grad_out.dims(),
            [n, co, g.ho, g.wo]
        )));
    }
    let hw_o = g.ho * g.wo;
    let in_per = g.c * g.h * g.w;
    let cig = spec.in_channels / spec.groups;
    let cog = co / spec.groups;
    let kk = cig * spec.kernel * spec.kernel;
    let w = weight.data();

    let mut dw = vec![T::zero(); w.len()];
    let mut dx = if want_input {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    let needs_col = !(spec.is_depthwise() || spec.is_pointwise());
    let mut col = if needs_col { vec![T::zero(); kk * hw_o] } else { Vec::new() };
    let mut dcol = if needs_col && want_input {
        vec![T::zero(); kk * hw_o]
    } else {
        Vec::new()
    };

    for b in 0..n {
        let img = &x.data()[b * in_per..(b + 1) * in_per];
        let dout = &grad_out.data()[b * co * hw_o..(b + 1) * co * hw_o];
        if spec.is_depthwise() {
            let dxi = if want_input {
                Some(&mut dx[b * in_per..(b + 1) * in_per])
            } else {
                None
            };
            depthwise_backward(img, w, spec, &g, dout, &mut dw, dxi);
            continue;
        }
        for grp in 0..spec.groups {
            let wg = &w[grp * cog * kk..(grp + 1) * cog * kk];
            let dwg = &mut dw[grp * cog * kk..(grp + 1) * cog * kk];
            let dg = &dout[grp * cog * hw_o..(grp + 1) * cog * hw_o];
            if spec.is_pointwise() {
                let src = &img[grp * cig * hw_o..(grp + 1) * cig * hw_o];
                T::gemm(cog, hw_o, kk, dg, false, src, true, dwg, true);
                if want_input {
                    let dxi = &mut dx[b * in_per + grp * cig * hw_o..][..cig * hw_o];
                    T::gemm(kk, cog, hw_o, wg, true, dg, false, dxi, true);
                }
            } else {
                im2col(img, spec, &g, grp * cig, cig, &mut col);
                T::gemm(cog, hw_o, kk, dg, false, &col, true, dwg, true);
                if want_input {
                    T::gemm(kk, cog, hw_o, wg, true, dg, false, &mut dcol, false);
                    col2im(&dcol, spec, &g, grp * cig, cig, &mut dx[b * in_per..(b + 1) * in_per]);
                }
            }
        }
    }

    let bias = with_bias.then(|| {
        let mut db = vec![T::zero(); co];
        for b in 0..n {
            for (c, acc) in db.iter_mut().enumerate() {
                *acc += grad_out.data()[(b * co + c) * hw_o..(b * co + c + 1) * hw_o]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
        }
        Tensor::from_parts(vec![co], db)
    });
    Ok(Conv2dGrads {
        input: want_input.then(|| Tensor::from_parts(x.dims().to_vec(), dx)),
        weight: Tensor::from_parts(weight.dims().to_vec(), dw),
        bias,
    })
}

/// Convolution layer owning its weight (and optional bias).
#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar> {
    pub spec: Conv2dSpec,
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// Kaiming-style fan-in initialisation: uniform in ±sqrt(6 / fan_in).
    pub fn new(name: &str, spec: Conv2dSpec, with_bias: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let fan_in = (spec.in_channels / spec.groups) * spec.kernel * spec.kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..spec.weight_count())
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        let weight = Tensor::new(&spec.weight_dims(), data)?;
        Ok(Self {
            spec,
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: with_bias.then(|| {
                Parameter::new(format!("{name}.bias"), Tensor::from_parts(vec![spec.out_channels], vec![T::zero(); spec.out_channels]))
            }),
            input: None,
        })
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn forward(&mut self, x: Tensor<T>, _ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let y = conv2d(&x, &self.spec, &self.weight.value, self.bias.as_ref().map(|b| &b.value))?;
        self.input = Some(x);
        Ok(y)
    }

    fn backward(&mut self, grad: Tensor<T>, ctx: BackwardCtx) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache(&self.weight.name))?;
        let grads = conv2d_backward(
            x,
            &self.spec,
            &self.weight.value,
            self.bias.is_some(),
            &grad,
            !ctx.skip_input_grad,
        )?;
        self.weight.accumulate(grads.weight.data());
        if let (Some(b), Some(db)) = (self.bias.as_mut(), grads.bias) {
            b.accumulate(db.data());
        }
        Ok(grads.input.unwrap_or_else(|| x.zeros_like()))
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}
