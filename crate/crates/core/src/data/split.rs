use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::LabeledImage;
use crate::augment::expand_training_set;
use crate::error::{Error, Result};

/// Training images as produced by a split. Only this type can be
/// augmented, so validation and test data never pass through the
/// augmentation pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSet(Vec<LabeledImage>);

/// The training list the optimiser consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedTrainSet(Vec<LabeledImage>);

impl TrainSet {
    pub fn images(&self) -> &[LabeledImage] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Originals plus one sample of each of the eight transforms.
    pub fn augment(&self, seed: u64) -> AugmentedTrainSet {
        AugmentedTrainSet(expand_training_set(&self.0, seed))
    }

    /// Trains on the originals only.
    pub fn unaugmented(&self) -> AugmentedTrainSet {
        AugmentedTrainSet(self.0.clone())
    }
}

impl AugmentedTrainSet {
    pub fn images(&self) -> &[LabeledImage] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: TrainSet,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub seed: u64,
}

/// `(train, val, test)` sizes: 70 % of `n` (floored) forms the training
/// pool, 80 % of the pool (floored) is trained on, the rest validates.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let pool = n * 7 / 10;
    let train = pool * 8 / 10;
    (train, pool - train, n - pool)
}

pub fn split_dataset(mut items: Vec<LabeledImage>, seed: u64) -> Result<DatasetSplit> {
    if items.len() < 10 {
        return Err(Error::Dataset(format!("need at least 10 items to split, got {}", items.len())));
    }
    items.sort_by(|a, b| a.id.cmp(&b.id));
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, val, _) = split_sizes(items.len());
    let test = items.split_off(train + val);
    let val_items = items.split_off(train);
    Ok(DatasetSplit {
        train: TrainSet(items),
        val: val_items,
        test,
        seed,
    })
}

impl DatasetSplit {
    pub fn manifest_csv(&self) -> String {
        let mut rows: Vec<(&str, &str)> = Vec::new();
        rows.extend(self.train.images().iter().map(|i| (i.id.as_str(), "train")));
        rows.extend(self.val.iter().map(|i| (i.id.as_str(), "val")));
        rows.extend(self.test.iter().map(|i| (i.id.as_str(), "test")));
        rows.sort();
        let mut out = String::from("id,split\n");
        for (id, split) in rows {
            let _ = writeln!(out, "{id},{split}");
        }
        out
    }
}

pub fn write_split_manifest(split: &DatasetSplit, path: &Path) -> Result<()> {
    fs::write(path, split.manifest_csv())?;
    Ok(())
}
