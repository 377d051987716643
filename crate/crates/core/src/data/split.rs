use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassId, Fruit, Quality, SampleRecord, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must be in [0, 1] and sum to 1, got {}:{}:{}",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

/// `round(x)` with halves rounded up, tolerant of representation error in
/// products such as `285 * 0.2`.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

/// Per class: shuffle with `seed`, then `round(n·test)` samples go to test,
/// `round(n·val)` to validation and the rest to training.
pub fn stratified_split(
    records: &[SampleRecord],
    ratios: SplitRatios,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    ratios.validate()?;
    let mut by_class: BTreeMap<ClassId, Vec<&SampleRecord>> = BTreeMap::new();
    for r in records {
        by_class.entry(r.class).or_default().push(r);
    }
    let too_small: Vec<String> = by_class
        .iter()
        .filter(|(_, members)| members.len() < 3)
        .map(|(class, members)| format!("{} ({})", class.folder_name(), members.len()))
        .collect();
    if !too_small.is_empty() {
        return Err(Error::Dataset(format!(
            "classes need at least 3 samples to populate train, val and test: {}",
            too_small.join(", ")
        )));
    }
    let mut out = Vec::with_capacity(records.len());
    for (class, mut members) in by_class {
        members.sort_by(|a, b| a.path.cmp(&b.path));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((class.fine_label() as u64 + 1) << 32));
        members.shuffle(&mut rng);
        let n = members.len();
        let test = round_half_up(n as f64 * ratios.test).min(n);
        let val = round_half_up(n as f64 * ratios.val).min(n - test);
        for (i, r) in members.into_iter().enumerate() {
            let split = if i < test {
                Split::Test
            } else if i < test + val {
                Split::Val
            } else {
                Split::Train
            };
            out.push(SampleRecord {
                split: Some(split),
                ..r.clone()
            });
        }
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct SplitRow {
    path: PathBuf,
    fruit: Fruit,
    quality: Quality,
    split: String,
}

/// Writes `path,fruit,quality,split` rows.
pub fn write_split_csv(path: impl AsRef<Path>, records: &[SampleRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in records {
        let split = r
            .split
            .ok_or_else(|| Error::Dataset(format!("{} has no split", r.path.display())))?;
        writer
            .serialize(SplitRow {
                path: r.path.clone(),
                fruit: r.class.fruit,
                quality: r.class.quality,
                split: split.name().to_string(),
            })
            .map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_split_csv(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    reader
        .deserialize::<SplitRow>()
        .map(|row| {
            let row = row.map_err(|e| csv_error(path, e))?;
            Ok(SampleRecord {
                path: row.path,
                class: ClassId {
                    fruit: row.fruit,
                    quality: row.quality,
                },
                split: Some(row.split.parse()?),
            })
        })
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}
