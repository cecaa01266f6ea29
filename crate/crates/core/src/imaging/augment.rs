use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::preprocess::{hflip, rotate, vflip};
use super::{BinaryMask, GrayImage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Identity,
    Hflip,
    Vflip,
    Rotate,
}

/// A concrete transform; rotation angles are whole millidegrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentOp {
    Identity,
    Hflip,
    Vflip,
    Rotate { millidegrees: i32 },
}

impl AugmentOp {
    pub fn name(self) -> &'static str {
        match self {
            AugmentOp::Identity => "identity",
            AugmentOp::Hflip => "hflip",
            AugmentOp::Vflip => "vflip",
            AugmentOp::Rotate { .. } => "rotate",
        }
    }

    pub fn millidegrees(self) -> i32 {
        match self {
            AugmentOp::Rotate { millidegrees } => millidegrees,
            _ => 0,
        }
    }

    pub fn apply(self, img: &GrayImage, mask: &BinaryMask) -> Result<(GrayImage, BinaryMask)> {
        Ok(match self {
            AugmentOp::Identity => (img.clone(), mask.clone()),
            AugmentOp::Hflip => (hflip(img), hflip(mask)),
            AugmentOp::Vflip => (vflip(img), vflip(mask)),
            AugmentOp::Rotate { millidegrees } => rotate(img, mask, f64::from(millidegrees) / 1000.0)?,
        })
    }
}

impl fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    /// Variants emitted per source, in order.
    pub ops: Vec<AugmentKind>,
    pub seed: u64,
    /// Rotation angles are drawn uniformly from `[-rotation_range, rotation_range]` degrees.
    pub rotation_range: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            ops: vec![AugmentKind::Identity, AugmentKind::Hflip, AugmentKind::Vflip, AugmentKind::Rotate],
            seed: 0,
            rotation_range: 30.0,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ops.is_empty() {
            return Err(Error::Parameter("augmentation needs at least one op".into()));
        }
        if !(self.rotation_range >= 0.0 && self.rotation_range <= 180.0) {
            return Err(Error::Parameter(format!("rotation_range {} outside [0, 180]", self.rotation_range)));
        }
        Ok(())
    }

    /// The concrete ops for source `index`; one angle per source, drawn from `seed + index`.
    pub fn ops_for(&self, index: usize) -> Vec<AugmentOp> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(index as u64));
        let range = (self.rotation_range * 1000.0).round() as i32;
        let angle = if range == 0 { 0 } else { rng.random_range(-range..=range) };
        self.ops
            .iter()
            .map(|k| match k {
                AugmentKind::Identity => AugmentOp::Identity,
                AugmentKind::Hflip => AugmentOp::Hflip,
                AugmentKind::Vflip => AugmentOp::Vflip,
                AugmentKind::Rotate => AugmentOp::Rotate { millidegrees: angle },
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub source_id: String,
    pub op: AugmentOp,
    pub image: GrayImage,
    pub mask: BinaryMask,
}

impl AugmentedPair {
    /// `<source>_<op>`, unique within one expansion.
    pub fn stem(&self) -> String {
        format!("{}_{}", self.source_id, self.op.name())
    }
}

/// Expands every source into one pair per op, sources in input order.
pub fn augment_dataset(pairs: &[(String, GrayImage, BinaryMask)], spec: &AugmentSpec) -> Result<Vec<AugmentedPair>> {
    spec.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("nothing to augment".into()));
    }
    let per_source: Vec<Vec<AugmentedPair>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (id, img, mask))| {
            spec.ops_for(i)
                .into_iter()
                .map(|op| {
                    let (image, mask) = op.apply(img, mask)?;
                    Ok(AugmentedPair {
                        source_id: id.clone(),
                        op,
                        image,
                        mask,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_source.into_iter().flatten().collect())
}

/// One provenance row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentRecord {
    pub source_id: String,
    pub op: String,
    pub angle_millidegrees: i32,
    pub output_file: String,
}

pub const MANIFEST_HEADER: &str = "source_id,op,angle_millidegrees,output_file";

pub fn format_augment_manifest(records: &[AugmentRecord]) -> String {
    let mut out = format!("{MANIFEST_HEADER}\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{}", r.source_id, r.op, r.angle_millidegrees, r.output_file);
    }
    out
}

pub fn parse_augment_manifest(text: &str) -> Result<Vec<AugmentRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Format(format!("augmentation manifest must start with {MANIFEST_HEADER:?}")));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("malformed manifest row {line:?}"));
            if f.len() != 4 || !matches!(f[1], "identity" | "hflip" | "vflip" | "rotate") {
                return Err(bad());
            }
            Ok(AugmentRecord {
                source_id: f[0].to_string(),
                op: f[1].to_string(),
                angle_millidegrees: f[2].parse().map_err(|_| bad())?,
                output_file: f[3].to_string(),
            })
        })
        .collect()
}
