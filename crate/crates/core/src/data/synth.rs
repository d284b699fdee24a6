use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::label::Label;

pub const SYNTH_SIZE: usize = 256;

/// Axis-aligned box in pixel units; `x + w` and `y + h` are exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    /// Maps the box into an image rescaled from `from` to `to` pixels.
    pub fn rescale(&self, from: usize, to: usize) -> BBox {
        let s = to as f64 / from as f64;
        let x0 = (self.x as f64 * s).floor() as usize;
        let y0 = (self.y as f64 * s).floor() as usize;
        let x1 = (((self.x + self.w) as f64 * s).ceil() as usize).min(to);
        let y1 = (((self.y + self.h) as f64 * s).ceil() as usize).min(to);
        BBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub item: LabeledImage,
    /// Inflammation blob extent; Group A only.
    pub bbox: Option<BBox>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub label: Label,
    pub bbox: Option<BBox>,
}

fn dist_to_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// One synthetic pin-site photograph: skin background with lighting
/// gradient and noise, a dark pin shaft entering at a random point, and for
/// Group A a reddish radial blob centred on the entry point.
pub fn synthesize_sample(label: Label, rng: &mut ChaCha8Rng) -> (Image, Option<BBox>) {
    let n = SYNTH_SIZE;
    let red = rng.gen_range(150.0..195.0);
    let skin = [red, red * rng.gen_range(0.68..0.80), red * rng.gen_range(0.55..0.68)];
    let light_dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let light_amp = rng.gen_range(4.0..14.0);

    let entry = (rng.gen_range(72.0..184.0), rng.gen_range(72.0..184.0));
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let length = rng.gen_range(90.0..160.0);
    let tip = (entry.0 + length * theta.cos(), entry.1 + length * theta.sin());
    let half_width = rng.gen_range(2.5..4.5);
    let pin_gray = rng.gen_range(50.0..90.0);

    let blob = (label == Label::GroupA).then(|| {
        let r = rng.gen_range(20.0..=60.0f64);
        let tint = [rng.gen_range(235.0..255.0), rng.gen_range(55.0..90.0), rng.gen_range(50.0..80.0)];
        (r, tint)
    });

    let mut pixels = Vec::with_capacity(n * n * 3);
    let c = (n as f64 - 1.0) / 2.0;
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64, y as f64);
            let shade = light_amp * (((fx - c) * light_dir.cos() + (fy - c) * light_dir.sin()) / c);
            let mut px = skin.map(|v| v + shade);
            let d = dist_to_segment(fx, fy, entry, tip);
            if d < half_width + 1.0 {
                let cover = (half_width + 1.0 - d).min(1.0);
                let highlight = if d < half_width * 0.3 { 25.0 } else { 0.0 };
                for v in &mut px {
                    *v = *v * (1.0 - cover) + (pin_gray + highlight) * cover;
                }
            }
            if let Some((r, tint)) = blob {
                let dr = ((fx - entry.0).powi(2) + (fy - entry.1).powi(2)).sqrt() / r;
                if dr < 1.0 {
                    let a = 0.9 * (1.0 - dr * dr);
                    for (v, t) in px.iter_mut().zip(tint) {
                        *v = *v * (1.0 - a) + t * a;
                    }
                }
            }
            for v in px {
                let noisy = v + rng.gen_range(-6.0..6.0);
                pixels.push(noisy.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let bbox = blob.map(|(r, _)| {
        let x0 = (entry.0 - r).floor().max(0.0) as usize;
        let y0 = (entry.1 - r).floor().max(0.0) as usize;
        let x1 = ((entry.0 + r).ceil() as usize + 1).min(n);
        let y1 = ((entry.1 + r).ceil() as usize + 1).min(n);
        BBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
    });
    (Image::new(n, n, pixels).expect("generator dims"), bbox)
}

fn sample_id(label: Label, i: usize) -> String {
    match label {
        Label::GroupA => format!("synth_a{i:04}"),
        Label::GroupB => format!("synth_b{i:04}"),
    }
}

/// `n_per_class` images of each class, each drawn from its own RNG stream
/// so the output is a pure function of `(n_per_class, seed)`.
pub fn synthesize(n_per_class: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    if n_per_class == 0 {
        return Err(Error::Input("n_per_class must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(2 * n_per_class);
    for (k, label) in Label::ALL.into_iter().enumerate() {
        for i in 0..n_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((k * n_per_class + i) as u64);
            let (image, bbox) = synthesize_sample(label, &mut rng);
            out.push(SyntheticSample {
                item: LabeledImage { id: sample_id(label, i), image, label },
                bbox,
            });
        }
    }
    Ok(out)
}

/// Writes `groupA/`, `groupB/` PNGs and `manifest.csv` under `out_dir`.
pub fn generate_synthetic(n_per_class: usize, seed: u64, out_dir: &Path) -> Result<Vec<ManifestRow>> {
    let samples = synthesize(n_per_class, seed)?;
    for label in Label::ALL {
        fs::create_dir_all(out_dir.join(label.dir_name()))?;
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in &samples {
        let path = out_dir.join(s.item.label.dir_name()).join(format!("{}.png", s.item.id));
        s.item.image.write(&path)?;
        rows.push(ManifestRow { id: s.item.id.clone(), label: s.item.label, bbox: s.bbox });
    }
    write_manifest(&rows, &out_dir.join("manifest.csv"))?;
    Ok(rows)
}

pub fn write_manifest(rows: &[ManifestRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "label", "bbox_x", "bbox_y", "bbox_w", "bbox_h"])?;
    for r in rows {
        let b = r.bbox.map(|b| [b.x, b.y, b.w, b.h].map(|v| v.to_string()));
        let fields = b.unwrap_or_default();
        w.write_record([r.id.as_str(), &r.label.to_string(), &fields[0], &fields[1], &fields[2], &fields[3]])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let bad = || Error::Dataset(format!("{}: malformed row {}", path.display(), line + 2));
        if rec.len() != 6 {
            return Err(bad());
        }
        let label: Label = rec[1].parse().map_err(|_| bad())?;
        let bbox = if rec[2].is_empty() {
            None
        } else {
            let v: Vec<usize> = (2..6)
                .map(|i| rec[i].parse().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            Some(BBox { x: v[0], y: v[1], w: v[2], h: v[3] })
        };
        rows.push(ManifestRow { id: rec[0].to_string(), label, bbox });
    }
    Ok(rows)
}
