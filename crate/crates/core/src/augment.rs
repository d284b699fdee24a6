//! The eight training-time transforms and the 9× set expansion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::image::Image;

pub const FACTOR_RANGE: (f64, f64) = (1.1, 1.5);
pub const MAX_ROTATION_DEG: f64 = 45.0;
pub const MAX_SHEAR_DEG: f64 = 16.0;
pub const CUTOUT_SIZE: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugmentKind {
    HFlip,
    VFlip,
    Brightness,
    Contrast,
    Rotate,
    VFlipRotate,
    Shear,
    Cutout,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 8] = [
        AugmentKind::HFlip,
        AugmentKind::VFlip,
        AugmentKind::Brightness,
        AugmentKind::Contrast,
        AugmentKind::Rotate,
        AugmentKind::VFlipRotate,
        AugmentKind::Shear,
        AugmentKind::Cutout,
    ];

    /// File-name suffix for augmented copies.
    pub fn suffix(self) -> &'static str {
        match self {
            AugmentKind::HFlip => "_hf",
            AugmentKind::VFlip => "_vf",
            AugmentKind::Brightness => "_br",
            AugmentKind::Contrast => "_ct",
            AugmentKind::Rotate => "_rot",
            AugmentKind::VFlipRotate => "_vfr",
            AugmentKind::Shear => "_sh",
            AugmentKind::Cutout => "_co",
        }
    }
}

/// A transform with its sampled parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Augment {
    HFlip,
    VFlip,
    Brightness(f64),
    Contrast(f64),
    /// Degrees, counter-clockwise.
    Rotate(f64),
    VFlipRotate(f64),
    /// Horizontal shear angle in degrees.
    Shear(f64),
    /// Centre of the 30×30 square.
    Cutout { cx: usize, cy: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    pub transform: Augment,
    pub seed: u64,
}

impl AugmentSpec {
    /// Draws the kind's parameter from its legal range.
    pub fn sample(kind: AugmentKind, width: usize, height: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factor = |rng: &mut ChaCha8Rng| rng.gen_range(FACTOR_RANGE.0..=FACTOR_RANGE.1);
        let transform = match kind {
            AugmentKind::HFlip => Augment::HFlip,
            AugmentKind::VFlip => Augment::VFlip,
            AugmentKind::Brightness => Augment::Brightness(factor(&mut rng)),
            AugmentKind::Contrast => Augment::Contrast(factor(&mut rng)),
            AugmentKind::Rotate => Augment::Rotate(rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG)),
            AugmentKind::VFlipRotate => Augment::VFlipRotate(rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG)),
            AugmentKind::Shear => Augment::Shear(rng.gen_range(-MAX_SHEAR_DEG..=MAX_SHEAR_DEG)),
            AugmentKind::Cutout => Augment::Cutout {
                cx: rng.gen_range(0..width),
                cy: rng.gen_range(0..height),
            },
        };
        Self { transform, seed }
    }

    pub fn kind(&self) -> AugmentKind {
        match self.transform {
            Augment::HFlip => AugmentKind::HFlip,
            Augment::VFlip => AugmentKind::VFlip,
            Augment::Brightness(_) => AugmentKind::Brightness,
            Augment::Contrast(_) => AugmentKind::Contrast,
            Augment::Rotate(_) => AugmentKind::Rotate,
            Augment::VFlipRotate(_) => AugmentKind::VFlipRotate,
            Augment::Shear(_) => AugmentKind::Shear,
            Augment::Cutout { .. } => AugmentKind::Cutout,
        }
    }

    pub fn validate(&self, image: &Image) -> Result<()> {
        let in_range = |v: f64, lo: f64, hi: f64, what: &str| {
            if v.is_finite() && (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(Error::Spec(format!("{what} {v} outside [{lo}, {hi}]")))
            }
        };
        match self.transform {
            Augment::HFlip | Augment::VFlip => Ok(()),
            Augment::Brightness(f) | Augment::Contrast(f) => in_range(f, FACTOR_RANGE.0, FACTOR_RANGE.1, "factor"),
            Augment::Rotate(a) | Augment::VFlipRotate(a) => in_range(a, -MAX_ROTATION_DEG, MAX_ROTATION_DEG, "angle"),
            Augment::Shear(a) => in_range(a, -MAX_SHEAR_DEG, MAX_SHEAR_DEG, "shear"),
            Augment::Cutout { cx, cy } => {
                if cx < image.width() && cy < image.height() {
                    Ok(())
                } else {
                    Err(Error::Spec(format!("cutout centre ({cx}, {cy}) outside image")))
                }
            }
        }
    }
}

fn map_pixels(image: &Image, f: impl Fn(usize, f64) -> f64) -> Image {
    let mut out = image.clone();
    for (i, v) in out.pixels_mut().iter_mut().enumerate() {
        *v = f(i % 3, *v as f64).round().clamp(0.0, 255.0) as u8;
    }
    out
}

fn mirror(image: &Image, horizontal: bool) -> Image {
    let (w, h) = (image.width(), image.height());
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = if horizontal { (w - 1 - x, y) } else { (x, h - 1 - y) };
            out.put(x, y, image.get(sx, sy));
        }
    }
    out
}

/// Inverse-maps every destination pixel through `src` and samples
/// bilinearly, filling outside the source with 0.
fn warp(image: &Image, src: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let (w, h) = (image.width(), image.height());
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = src(x as f64 - cx, y as f64 - cy);
            let rgb = [0, 1, 2].map(|c| {
                image
                    .sample_zero_fill(dx + cx, dy + cy, c)
                    .round()
                    .clamp(0.0, 255.0) as u8
            });
            out.put(x, y, rgb);
        }
    }
    out
}

fn rotate(image: &Image, degrees: f64) -> Image {
    if degrees == 0.0 {
        return image.clone();
    }
    let (s, c) = degrees.to_radians().sin_cos();
    // Counter-clockwise on screen (y down): destination = R·source, so the
    // source is Rᵀ·destination.
    warp(image, |x, y| (c * x - s * y, s * x + c * y))
}

fn shear(image: &Image, degrees: f64) -> Image {
    let t = degrees.to_radians().tan();
    warp(image, |x, y| (x - t * y, y))
}

fn cutout(image: &Image, cx: usize, cy: usize) -> Image {
    let half = CUTOUT_SIZE / 2;
    let x0 = cx.saturating_sub(half);
    let y0 = cy.saturating_sub(half);
    let x1 = (cx + CUTOUT_SIZE - half).min(image.width());
    let y1 = (cy + CUTOUT_SIZE - half).min(image.height());
    let mut out = image.clone();
    for y in y0..y1 {
        for x in x0..x1 {
            out.put(x, y, [0; 3]);
        }
    }
    out
}

pub fn apply(image: &Image, spec: &AugmentSpec) -> Result<Image> {
    spec.validate(image)?;
    Ok(match spec.transform {
        Augment::HFlip => mirror(image, true),
        Augment::VFlip => mirror(image, false),
        Augment::Brightness(f) => map_pixels(image, |_, v| v * f),
        Augment::Contrast(f) => {
            let mu = image.channel_means();
            map_pixels(image, |c, v| (v - mu[c]) * f + mu[c])
        }
        Augment::Rotate(a) => rotate(image, a),
        Augment::VFlipRotate(a) => rotate(&mirror(image, false), a),
        Augment::Shear(a) => shear(image, a),
        Augment::Cutout { cx, cy } => cutout(image, cx, cy),
    })
}

/// Per-(image, transform) seed, independent of processing order.
fn derived_seed(seed: u64, index: usize, kind: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((index * AugmentKind::ALL.len() + kind) as u64);
    rng.gen()
}

/// Every original followed by one sampled instance of each transform.
pub fn expand_training_set(images: &[LabeledImage], seed: u64) -> Vec<LabeledImage> {
    let mut out = Vec::with_capacity(images.len() * (AugmentKind::ALL.len() + 1));
    for (i, item) in images.iter().enumerate() {
        out.push(item.clone());
        for (k, kind) in AugmentKind::ALL.into_iter().enumerate() {
            let spec = AugmentSpec::sample(kind, item.image.width(), item.image.height(), derived_seed(seed, i, k));
            let image = apply(&item.image, &spec).expect("sampled specs are in range");
            out.push(LabeledImage {
                id: format!("{}{}", item.id, kind.suffix()),
                image,
                label: item.label,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::Label;
    use proptest::prelude::{prop_assert_eq, proptest};

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(w, h, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap()
    }

    fn spec(t: Augment) -> AugmentSpec {
        AugmentSpec { transform: t, seed: 0 }
    }

    fn channel_sum(img: &Image, c: usize) -> u64 {
        img.pixels().iter().skip(c).step_by(3).map(|&v| v as u64).sum()
    }

    #[test]
    fn flips_are_involutions() {
        let img = random_image(7, 5, 1);
        for t in [Augment::HFlip, Augment::VFlip] {
            let once = apply(&img, &spec(t)).unwrap();
            assert_ne!(once, img);
            assert_eq!(apply(&once, &spec(t)).unwrap(), img);
        }
        assert_eq!(apply(&img, &spec(Augment::HFlip)).unwrap().get(0, 2), img.get(6, 2));
    }

    #[test]
    fn zero_angles_are_identity() {
        let img = random_image(8, 6, 2);
        assert_eq!(apply(&img, &spec(Augment::Rotate(0.0))).unwrap(), img);
        assert_eq!(apply(&img, &spec(Augment::Shear(0.0))).unwrap(), img);
        assert_eq!(
            apply(&img, &spec(Augment::VFlipRotate(0.0))).unwrap(),
            apply(&img, &spec(Augment::VFlip)).unwrap()
        );
    }

    #[test]
    fn rotation_direction_and_fill() {
        // Odd size so the centre is a pixel.
        let mut img = Image::filled(21, 21, [0; 3]).unwrap();
        img.put(20, 10, [255; 3]);
        let r = apply(&img, &spec(Augment::Rotate(45.0))).unwrap();
        // 10 px right of centre rotated 45° counter-clockwise on screen is up-right.
        let d = 10.0 / 2f64.sqrt();
        let (x, y) = ((10.0 + d).round() as usize, (10.0 - d).round() as usize);
        assert!(r.get(x, y)[0] > 0);
        let white = Image::filled(20, 20, [255; 3]).unwrap();
        let r = apply(&white, &spec(Augment::Rotate(45.0))).unwrap();
        assert_eq!(r.get(0, 0), [0; 3]);
        assert_eq!(r.get(10, 10), [255; 3]);
    }

    #[test]
    fn photometric_transforms() {
        let img = Image::new(2, 1, vec![100, 200, 10, 200, 250, 30]).unwrap();
        let b = apply(&img, &spec(Augment::Brightness(1.5))).unwrap();
        assert_eq!(b.pixels(), &[150, 255, 15, 255, 255, 45]);
        let c = apply(&img, &spec(Augment::Contrast(1.2))).unwrap();
        // Means 150, 225, 20.
        assert_eq!(c.pixels(), &[90, 195, 8, 210, 255, 32]);
    }

    #[test]
    fn cutout_interior_and_clipped() {
        let white = Image::filled(64, 64, [255; 3]).unwrap();
        let co = apply(&white, &spec(Augment::Cutout { cx: 32, cy: 32 })).unwrap();
        for c in 0..3 {
            assert_eq!(channel_sum(&white, c) - channel_sum(&co, c), 900 * 255);
        }
        let co = apply(&white, &spec(Augment::Cutout { cx: 0, cy: 63 })).unwrap();
        assert_eq!(channel_sum(&white, 0) - channel_sum(&co, 0), 15 * 16 * 255);
    }

    #[test]
    fn out_of_range_specs_fail() {
        let img = random_image(4, 4, 3);
        for t in [
            Augment::Brightness(1.0),
            Augment::Contrast(1.6),
            Augment::Rotate(46.0),
            Augment::Shear(-17.0),
            Augment::Cutout { cx: 4, cy: 0 },
            Augment::Rotate(f64::NAN),
        ] {
            assert!(matches!(apply(&img, &spec(t)), Err(Error::Spec(_))), "{t:?}");
        }
    }

    #[test]
    fn expansion_counts_and_determinism() {
        let items: Vec<LabeledImage> = (0..3)
            .map(|i| LabeledImage {
                id: format!("p{i}"),
                image: random_image(12, 10, i),
                label: if i == 0 { Label::GroupA } else { Label::GroupB },
            })
            .collect();
        let out = expand_training_set(&items, 5);
        assert_eq!(out.len(), 27);
        assert_eq!(out, expand_training_set(&items, 5));
        assert_ne!(out, expand_training_set(&items, 6));
        assert_eq!(expand_training_set(&items[..1], 5).len(), 9);
        for (i, chunk) in out.chunks(9).enumerate() {
            assert_eq!(chunk[0], items[i]);
            assert!(chunk.iter().all(|c| c.label == items[i].label));
            assert_eq!(chunk[6].id, format!("p{i}_vfr"));
        }
        // Seeds depend on position, not on the rest of the list.
        assert_eq!(expand_training_set(&items[..1], 5)[..], out[..9]);
    }

    proptest! {
        #[test]
        fn sampled_specs_are_legal_and_preserve_dims(kind in 0usize..8, seed: u64, w in 1usize..40, h in 1usize..40) {
            let img = random_image(w, h, seed);
            let s = AugmentSpec::sample(AugmentKind::ALL[kind], w, h, seed);
            prop_assert_eq!(s.kind(), AugmentKind::ALL[kind]);
            let out = apply(&img, &s).unwrap();
            prop_assert_eq!((out.width(), out.height()), (w, h));
        }
    }
}
