//! Grad-CAM, guided backpropagation and heatmap overlays.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::{resize_image, Image};
use crate::model::PinSiteNet;
use crate::nn::{BackwardCtx, Mode};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_ALPHA: f64 = 0.4;

/// Class-activation map with values in `[0, 1]`, row-major `height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub values: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub source_layer: String,
    pub class_index: usize,
    /// The raw map was identically zero; `values` are all zero.
    pub degenerate: bool,
}

impl Heatmap {
    /// Min-max normalises a non-negative raw map. A constant positive map
    /// becomes all ones, an all-zero map stays zero and is flagged.
    pub fn from_raw(raw: Vec<f64>, width: usize, height: usize, source_layer: &str, class_index: usize) -> Result<Self> {
        if raw.len() != width * height {
            return Err(Error::shape(format!("heatmap has {} values for {width}×{height}", raw.len())));
        }
        let max = raw.iter().copied().fold(0.0, f64::max);
        let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let degenerate = max <= 0.0;
        let values = if degenerate {
            vec![0.0; raw.len()]
        } else if max > min {
            raw.iter().map(|v| (v - min) / (max - min)).collect()
        } else {
            vec![1.0; raw.len()]
        };
        Ok(Self {
            values,
            width,
            height,
            source_layer: source_layer.to_string(),
            class_index,
            degenerate,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Share of the mass of the pixels at or above the `quantile` value that
    /// lies where `inside` holds. `None` for a degenerate map.
    pub fn top_mass_fraction(&self, quantile: f64, inside: impl Fn(usize, usize) -> bool) -> Option<f64> {
        if self.degenerate {
            return None;
        }
        let mut sorted = self.values.clone();
        sorted.sort_by(f64::total_cmp);
        let keep = ((sorted.len() as f64 * (1.0 - quantile)).ceil() as usize).clamp(1, sorted.len());
        let cut = sorted[sorted.len() - keep];
        let (mut total, mut hit) = (0.0, 0.0);
        for (i, &v) in self.values.iter().enumerate() {
            if v >= cut {
                total += v;
                if inside(i % self.width, i / self.width) {
                    hit += v;
                }
            }
        }
        (total > 0.0).then(|| hit / total)
    }

    /// One CSV row per image row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.width) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }
}

/// Bilinear resampling of a single plane with half-pixel centres.
fn upsample(src: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let axis = |i: usize, n_out: usize, n: usize| {
        let s = ((i as f64 + 0.5) * n as f64 / n_out as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n - 1), s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, out_h, h);
        for x in 0..out_w {
            let (x0, x1, fx) = axis(x, out_w, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn check_inputs<T: Scalar>(net: &PinSiteNet<T>, x: &Tensor<T>, class_index: usize) -> Result<(usize, usize)> {
    if net.mode() != Mode::Infer {
        return Err(Error::Mode("explanations need an infer-mode network".into()));
    }
    let (n, c, h, w) = x.nchw()?;
    if n != 1 || c != 3 {
        return Err(Error::shape(format!("expected a 1×3×H×W image, got {:?}", x.dims())));
    }
    if class_index >= net.config().head.num_classes {
        return Err(Error::config(format!("class index {class_index} out of range")));
    }
    Ok((h, w))
}

fn one_hot<T: Scalar>(classes: usize, index: usize) -> Tensor<T> {
    let mut d = vec![T::zero(); classes];
    d[index] = T::one();
    Tensor::from_parts(vec![1, classes], d)
}

/// Grad-CAM of the pre-softmax score of `class_index` at `layer`, upsampled
/// to the input size. `x` is a prepared `1×3×H×W` batch.
pub fn grad_cam<T: Scalar>(net: &mut PinSiteNet<T>, x: &Tensor<T>, class_index: usize, layer: &str) -> Result<Heatmap> {
    let (h, w) = check_inputs(net, x, class_index)?;
    let (logits, acts) = net.forward_recording(x.clone(), layer)?;
    let grads = net.backward_to(one_hot(logits.dims()[1], class_index), layer, false)?;
    net.zero_grad();
    let (_, k, fh, fw) = acts.nchw()?;
    let plane = fh * fw;
    let mut raw = vec![0.0; plane];
    for (a, g) in acts.data().chunks(plane).zip(grads.data().chunks(plane)).take(k) {
        let alpha = g.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
        for (r, v) in raw.iter_mut().zip(a) {
            *r += alpha * v.as_f64();
        }
    }
    for r in &mut raw {
        *r = r.max(0.0);
    }
    Heatmap::from_raw(upsample(&raw, fw, fh, w, h), w, h, layer, class_index)
}

/// Input gradient of the class score with rectifiers passing only positive
/// gradient through positive activations. Shape `3×H×W`.
pub fn guided_backprop<T: Scalar>(net: &mut PinSiteNet<T>, x: &Tensor<T>, class_index: usize) -> Result<Tensor<T>> {
    let (h, w) = check_inputs(net, x, class_index)?;
    let logits = net.forward_logits(x.clone())?;
    let ctx = BackwardCtx {
        guided: true,
        skip_input_grad: false,
    };
    let g = net.backward_logits(one_hot(logits.dims()[1], class_index), ctx)?;
    net.zero_grad();
    g.reshape(&[3, h, w])
}

/// Elementwise product of a heatmap (broadcast over channels) with a
/// guided-backprop map.
pub fn combine_guided<T: Scalar>(heatmap: &Heatmap, guided: &Tensor<T>) -> Result<Tensor<T>> {
    let plane = heatmap.width * heatmap.height;
    if guided.dims() != [3, heatmap.height, heatmap.width] {
        return Err(Error::shape(format!(
            "guided map {:?} does not match heatmap {}×{}",
            guided.dims(),
            heatmap.height,
            heatmap.width
        )));
    }
    let data = guided
        .data()
        .iter()
        .enumerate()
        .map(|(i, &g)| g * T::from_f64(heatmap.values[i % plane]))
        .collect();
    Ok(Tensor::from_parts(guided.dims().to_vec(), data))
}

pub fn guided_grad_cam<T: Scalar>(
    net: &mut PinSiteNet<T>,
    x: &Tensor<T>,
    class_index: usize,
    layer: &str,
) -> Result<Tensor<T>> {
    let heatmap = grad_cam(net, x, class_index, layer)?;
    combine_guided(&heatmap, &guided_backprop(net, x, class_index)?)
}

/// Blue→red colour of a heatmap value.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [255.0 * v, 0.0, 255.0 * (1.0 - v)]
}

/// Blends the colour-mapped heatmap onto `image` resized to the heatmap.
pub fn render_overlay(image: &Image, heatmap: &Heatmap, alpha: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("overlay alpha {alpha} outside [0, 1]")));
    }
    let mut out = resize_image(image, heatmap.width, heatmap.height);
    for y in 0..heatmap.height {
        for x in 0..heatmap.width {
            let colour = colormap(heatmap.get(x, y));
            let px = out.get(x, y);
            let blended: [u8; 3] =
                std::array::from_fn(|c| ((1.0 - alpha) * px[c] as f64 + alpha * colour[c]).round().clamp(0.0, 255.0) as u8);
            out.put(x, y, blended);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, DEFAULT_CAM_LAYER};
    use crate::nn::{activation, activation_backward, ActivationKind, Dense, ForwardCtx, Module};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn input(seed: u64, size: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[1, 3, size, size], (0..3 * size * size).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn tiny_net() -> PinSiteNet<f64> {
        PinSiteNet::new(ModelConfig::tiny()).unwrap()
    }

    #[test]
    fn normalisation_contract() {
        let h = Heatmap::from_raw(vec![0.0, 2.0, 1.0, 4.0], 2, 2, "l", 0).unwrap();
        assert_eq!(h.values, vec![0.0, 0.5, 0.25, 1.0]);
        assert!(!h.degenerate);
        let z = Heatmap::from_raw(vec![0.0; 4], 2, 2, "l", 0).unwrap();
        assert!(z.degenerate && z.values.iter().all(|&v| v == 0.0));
        assert_eq!(z.top_mass_fraction(0.9, |_, _| true), None);
        let c = Heatmap::from_raw(vec![3.0; 4], 2, 2, "l", 0).unwrap();
        assert_eq!(c.values, vec![1.0; 4]);
    }

    #[test]
    fn top_mass_fraction_counts_upper_tail() {
        let raw: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let h = Heatmap::from_raw(raw, 10, 10, "l", 0).unwrap();
        // Top decile is the last row; put the box over it.
        assert_eq!(h.top_mass_fraction(0.9, |_, y| y == 9), Some(1.0));
        assert_eq!(h.top_mass_fraction(0.9, |_, y| y < 9), Some(0.0));
    }

    #[test]
    fn grad_cam_shape_and_range() {
        let mut net = tiny_net();
        for class in [0, 1] {
            let h = grad_cam(&mut net, &input(1, 8), class, DEFAULT_CAM_LAYER).unwrap();
            assert_eq!((h.width, h.height), (8, 8));
            assert!(h.values.iter().all(|v| (0.0..=1.0).contains(v)));
            let max = h.values.iter().copied().fold(0.0, f64::max);
            assert!(h.degenerate || max == 1.0);
        }
        assert!(matches!(grad_cam(&mut net, &input(1, 8), 0, "nope"), Err(Error::Config(_))));
        assert!(matches!(grad_cam(&mut net, &input(1, 8), 2, DEFAULT_CAM_LAYER), Err(Error::Config(_))));
        net.set_mode(Mode::Train);
        assert!(matches!(grad_cam(&mut net, &input(1, 8), 0, DEFAULT_CAM_LAYER), Err(Error::Mode(_))));
    }

    #[test]
    fn grad_cam_ignores_shared_logit_shift() {
        let mut net = tiny_net();
        let before = grad_cam(&mut net, &input(2, 8), 1, "stage2.errc").unwrap();
        net.named_tensors_mut(&mut |name, t| {
            if name == "head.fc2.bias" {
                for v in t.data_mut() {
                    *v += 3.5;
                }
            }
        });
        let after = grad_cam(&mut net, &input(2, 8), 1, "stage2.errc").unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn guided_gates() {
        // Closed gates: every rectifier input negative.
        let x = Tensor::new(&[1, 4], vec![-1.0, -0.5, -2.0, -0.1]).unwrap();
        let y = activation(ActivationKind::Relu, &x).unwrap();
        let dy = Tensor::new(&[1, 4], vec![1.0, 2.0, -3.0, 4.0]).unwrap();
        let g = activation_backward(ActivationKind::Relu, &x, &y, &dy, true).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));

        // No rectifiers: guided equals plain.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = Dense::<f64>::new("d", 4, 2, &mut rng).unwrap();
        let x = Tensor::new(&[1, 4], vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let dy = Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap();
        let mut grads = Vec::new();
        for guided in [false, true] {
            layer.forward(x.clone(), &mut ForwardCtx::infer()).unwrap();
            grads.push(layer.backward(dy.clone(), BackwardCtx { guided, skip_input_grad: false }).unwrap());
        }
        assert_eq!(grads[0], grads[1]);
    }

    #[test]
    fn guided_backprop_deterministic() {
        let mut net = tiny_net();
        let a = guided_backprop(&mut net, &input(4, 8), 0).unwrap();
        let b = guided_backprop(&mut net, &input(4, 8), 0).unwrap();
        assert_eq!(a.dims(), &[3, 8, 8]);
        assert!(a.is_finite());
        assert_eq!(a, b);
    }

    #[test]
    fn guided_grad_cam_identities() {
        let mut net = tiny_net();
        let x = input(5, 8);
        let gb = guided_backprop(&mut net, &x, 1).unwrap();
        let heat = grad_cam(&mut net, &x, 1, DEFAULT_CAM_LAYER).unwrap();

        let zero = Heatmap::from_raw(vec![0.0; 64], 8, 8, "l", 1).unwrap();
        assert!(combine_guided(&zero, &gb).unwrap().data().iter().all(|&v| v == 0.0));
        let ones = Heatmap::from_raw(vec![1.0; 64], 8, 8, "l", 1).unwrap();
        assert_eq!(combine_guided(&ones, &gb).unwrap(), gb);

        let ggc = guided_grad_cam(&mut net, &x, 1, DEFAULT_CAM_LAYER).unwrap();
        for (i, (&v, &g)) in ggc.data().iter().zip(gb.data()).enumerate() {
            let hv = heat.values[i % 64];
            assert_eq!(v, g * hv);
            if hv == 0.0 {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn overlay_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = Image::new(12, 12, (0..432).map(|_| rng.gen()).collect()).unwrap();
        let heat = Heatmap::from_raw((0..144).map(|i| i as f64).collect(), 12, 12, "l", 0).unwrap();
        assert_eq!(render_overlay(&img, &heat, 0.0).unwrap(), img);
        let full = Heatmap::from_raw(vec![1.0; 144], 12, 12, "l", 0).unwrap();
        let red = render_overlay(&img, &full, 1.0).unwrap();
        assert_eq!((red.width(), red.height()), (12, 12));
        assert!(red.pixels().chunks(3).all(|p| p == [255, 0, 0]));
        assert!(render_overlay(&img, &heat, 1.5).is_err());
    }
}
