//! Dataset loading, splitting, tensor preparation and the synthetic
//! pin-site generator.

mod split;
mod synth;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{is_supported, resize_bilinear, Image};
use crate::label::Label;
use crate::tensor::Tensor;

pub use split::{split_dataset, split_sizes, write_split_manifest, AugmentedTrainSet, DatasetSplit, TrainSet};
pub use synth::{
    generate_synthetic, read_manifest, synthesize, synthesize_sample, write_manifest, BBox, ManifestRow,
    SyntheticSample, SYNTH_SIZE,
};

pub const INPUT_SIZE: usize = 224;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub image: Image,
    pub label: Label,
}

/// Result of scanning a dataset root. Files that fail to decode are
/// reported, not fatal.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub items: Vec<LabeledImage>,
    pub failures: Vec<(PathBuf, String)>,
}

impl LoadReport {
    pub fn count(&self, label: Label) -> usize {
        self.items.iter().filter(|i| i.label == label).count()
    }
}

/// Reads `<root>/groupA` and `<root>/groupB`; the directory fixes the label.
pub fn load_dataset(root: &Path) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    let mut seen: HashMap<String, Label> = HashMap::new();
    for label in Label::ALL {
        let dir = root.join(label.dir_name());
        if !dir.is_dir() {
            return Err(Error::Dataset(format!("missing class directory {}", dir.display())));
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        paths.retain(|p| p.is_file() && is_supported(p));
        paths.sort();
        let before = report.items.len();
        for path in paths {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Dataset(format!("non-UTF-8 file name {}", path.display())))?
                .to_string();
            if let Some(prev) = seen.insert(id.clone(), label) {
                return Err(Error::Dataset(format!("duplicate id {id:?} in {} and {}", prev.dir_name(), label.dir_name())));
            }
            match Image::read(&path) {
                Ok(image) => report.items.push(LabeledImage { id, image, label }),
                Err(e) => report.failures.push((path, e.to_string())),
            }
        }
        if report.items.len() == before {
            return Err(Error::Dataset(format!("class directory {} has no readable images", dir.display())));
        }
    }
    report.items.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(report)
}

/// Bilinear resize to `INPUT_SIZE`² and scale to [0, 1]; `3×224×224`.
pub fn prepare(image: &Image) -> Result<Tensor<f32>> {
    prepare_sized(image, INPUT_SIZE)
}

pub fn prepare_sized(image: &Image, size: usize) -> Result<Tensor<f32>> {
    if size == 0 {
        return Err(Error::Input("target size must be positive".into()));
    }
    let mut planes = resize_bilinear(image, size, size);
    planes.iter_mut().for_each(|v| *v /= 255.0);
    Tensor::new(&[3, size, size], planes)
}

/// Stacks prepared images into an `N×3×S×S` batch.
pub fn prepare_batch<'a>(images: impl IntoIterator<Item = &'a Image>, size: usize) -> Result<Tensor<f32>> {
    let parts = images
        .into_iter()
        .map(|img| prepare_sized(img, size))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, label: Label, id: &str, rgb: [u8; 3]) {
        let d = dir.join(label.dir_name());
        fs::create_dir_all(&d).unwrap();
        Image::filled(4, 4, rgb).unwrap().write(&d.join(format!("{id}.png"))).unwrap();
    }

    #[test]
    fn loads_sorted_with_counts() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            write(dir.path(), Label::GroupA, &format!("a{i}"), [1, 2, 3]);
        }
        for i in 0..5 {
            write(dir.path(), Label::GroupB, &format!("b{i}"), [4, 5, 6]);
        }
        fs::write(dir.path().join("groupB/broken.ppm"), b"P6\n9 9\n255\n").unwrap();
        fs::write(dir.path().join("groupB/notes.txt"), b"ignored").unwrap();
        let report = load_dataset(dir.path()).unwrap();
        assert_eq!(report.items.len(), 8);
        assert_eq!((report.count(Label::GroupA), report.count(Label::GroupB)), (3, 5));
        assert_eq!(report.failures.len(), 1);
        let ids: Vec<_> = report.items.iter().map(|i| i.id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn duplicate_and_empty_classes_fail() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), Label::GroupA, "x", [0; 3]);
        write(dir.path(), Label::GroupB, "x", [0; 3]);
        assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset(_))));

        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), Label::GroupA, "x", [0; 3]);
        fs::create_dir_all(dir.path().join("groupB")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset(_))));
    }

    #[test]
    fn prepare_contract() {
        let white = Image::filled(224, 224, [255; 3]).unwrap();
        let t = prepare(&white).unwrap();
        assert_eq!(t.dims(), &[3, 224, 224]);
        assert!(t.data().iter().all(|&v| v == 1.0));

        let img = Image::new(224, 224, (0..224 * 224 * 3).map(|i| (i % 251) as u8).collect()).unwrap();
        let t = prepare(&img).unwrap();
        assert_eq!(t.data()[224 + 5], img.get(5, 1)[0] as f32 / 255.0);
        assert_eq!(t.data()[2 * 224 * 224], img.get(0, 0)[2] as f32 / 255.0);

        let big = Image::filled(448, 448, [51; 3]).unwrap();
        assert!(prepare(&big).unwrap().data().iter().all(|&v| v == 0.2));
    }
}
