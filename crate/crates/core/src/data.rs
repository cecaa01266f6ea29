//! Dataset discovery, mask loading, and source-level splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{read_netpbm, BinaryMask, ImageU8};

/// Fraction of mask pixels allowed to be neither 0 nor 255.
pub const MASK_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub id: u32,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

impl DatasetEntry {
    /// Zero-padded id as used in file names.
    pub fn label(&self) -> String {
        format!("{:02}", self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Ascending by id.
    pub entries: Vec<DatasetEntry>,
}

impl DatasetManifest {
    pub fn get(&self, id: u32) -> Option<&DatasetEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

fn list(dir: &Path, exts: &[&str]) -> Result<BTreeMap<u32, PathBuf>> {
    let mut out = BTreeMap::new();
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let (Some(stem), Some(ext)) = (path.file_stem().and_then(|s| s.to_str()), path.extension().and_then(|s| s.to_str())) else {
            continue;
        };
        if !exts.contains(&ext) {
            continue;
        }
        let id: u32 = stem
            .parse()
            .map_err(|_| Error::Data(format!("{}: file name is not a numeric id", path.display())))?;
        if let Some(prev) = out.insert(id, path.clone()) {
            return Err(Error::Data(format!(
                "id {id} appears twice: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Pairs `root/images/<id>.pgm|ppm` with `root/masks/<id>.pgm`.
pub fn scan_dataset(root: &Path) -> Result<DatasetManifest> {
    let images = list(&root.join("images"), &["pgm", "ppm"])?;
    let masks = list(&root.join("masks"), &["pgm"])?;
    let orphans = |a: &BTreeMap<u32, PathBuf>, b: &BTreeMap<u32, PathBuf>| -> Vec<u32> {
        a.keys().filter(|k| !b.contains_key(k)).copied().collect()
    };
    let (no_mask, no_image) = (orphans(&images, &masks), orphans(&masks, &images));
    if !no_mask.is_empty() || !no_image.is_empty() {
        return Err(Error::Data(format!(
            "unpaired files under {}: images without masks {no_mask:?}, masks without images {no_image:?}",
            root.display()
        )));
    }
    if images.is_empty() {
        return Err(Error::Data(format!("no image/mask pairs under {}", root.display())));
    }
    let entries = images
        .into_iter()
        .map(|(id, image_path)| DatasetEntry {
            id,
            image_path,
            mask_path: masks[&id].clone(),
        })
        .collect();
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
    })
}

/// Thresholds an 8-bit mask at 128; fails when more than 1% of pixels are
/// neither 0 nor 255.
pub fn mask_from_u8(img: &ImageU8) -> Result<BinaryMask> {
    if img.channels != 1 {
        return Err(Error::Data("mask must be single-channel".into()));
    }
    let off = img.data.iter().filter(|&&v| v != 0 && v != 255).count();
    if off as f64 > MASK_TOLERANCE * img.data.len() as f64 {
        return Err(Error::Data(format!(
            "mask is not binary: {off} of {} pixels are neither 0 nor 255",
            img.data.len()
        )));
    }
    BinaryMask::new(img.width, img.height, img.data.iter().map(|&v| u8::from(v >= 128)).collect())
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    mask_from_u8(&read_netpbm(path)?).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads one entry; image and mask must share dimensions.
pub fn load_pair(entry: &DatasetEntry) -> Result<(ImageU8, BinaryMask)> {
    let image = read_netpbm(&entry.image_path)?;
    let mask = load_mask(&entry.mask_path)?;
    if (image.width, image.height) != (mask.width, mask.height) {
        return Err(Error::Data(format!(
            "id {}: image is {}x{} but mask is {}x{}",
            entry.id, image.width, image.height, mask.width, mask.height
        )));
    }
    Ok((image, mask))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_count: usize,
    /// Share of training sources (and so of their augmented variants) held out for validation.
    pub val_fraction: f64,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_count: 30,
            val_fraction: 0.2,
            test_count: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

/// Number of training sources held out for validation: `round(f n)`,
/// kept within `[1, n - 1]` whenever `n >= 2`.
pub fn val_source_count(train_sources: usize, val_fraction: f64) -> usize {
    if train_sources < 2 {
        return 0;
    }
    ((val_fraction * train_sources as f64).round() as usize).clamp(1, train_sources - 1)
}

/// Seeded shuffle; the first `train_count` ids form the training pool
/// (validation sources are carved from it), the next `test_count` the test set.
pub fn split(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<Split> {
    if !(spec.val_fraction > 0.0 && spec.val_fraction < 1.0) {
        return Err(Error::Parameter(format!("val_fraction {} outside (0, 1)", spec.val_fraction)));
    }
    if spec.train_count == 0 {
        return Err(Error::Parameter("train_count must be at least 1".into()));
    }
    let n = manifest.entries.len();
    if spec.train_count + spec.test_count > n {
        return Err(Error::Parameter(format!(
            "train_count {} + test_count {} exceeds the {n} available pairs",
            spec.train_count, spec.test_count
        )));
    }
    let mut ids: Vec<u32> = manifest.entries.iter().map(|e| e.id).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut pool = ids[..spec.train_count].to_vec();
    let mut test = ids[spec.train_count..spec.train_count + spec.test_count].to_vec();
    let n_val = val_source_count(pool.len(), spec.val_fraction);
    let mut val = pool.split_off(pool.len() - n_val);
    pool.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split {
        train: pool,
        val,
        test,
    })
}
