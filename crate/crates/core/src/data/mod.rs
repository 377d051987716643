//! Dataset records, label mappings, splitting, image loading and the
//! procedural stand-in dataset.

mod image;
mod scan;
mod split;
mod synth;

pub use self::image::{
    channel_stats, decode_image, load_batch, resize_bilinear, save_png, DiskSource, MemorySource,
    Normalization, SampleSource,
};
pub use scan::{class_of_path, scan_dataset, DatasetIndex, IMAGE_EXTENSIONS};
pub use split::{read_split_csv, round_half_up, stratified_split, write_split_csv, SplitRatios};
pub use synth::{generate_synthetic, Placement, ShapeAnnotation, SynthOptions, SynthSummary};

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fruit type, in alphabetical (label) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Fruit {
    Apple,
    Banana,
    Guava,
    Lime,
    Orange,
    Pomegranate,
}

/// Quality grade, in label order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quality {
    Bad,
    Good,
    Mixed,
}

impl Fruit {
    pub const ALL: [Fruit; 6] = [
        Fruit::Apple,
        Fruit::Banana,
        Fruit::Guava,
        Fruit::Lime,
        Fruit::Orange,
        Fruit::Pomegranate,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Fruit::Apple => "Apple",
            Fruit::Banana => "Banana",
            Fruit::Guava => "Guava",
            Fruit::Lime => "Lime",
            Fruit::Orange => "Orange",
            Fruit::Pomegranate => "Pomegranate",
        }
    }
}

impl Quality {
    pub const ALL: [Quality; 3] = [Quality::Bad, Quality::Good, Quality::Mixed];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Quality::Bad => "Bad",
            Quality::Good => "Good",
            Quality::Mixed => "Mixed",
        }
    }
}

impl FromStr for Fruit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Fruit::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Dataset(format!("unknown fruit `{s}`")))
    }
}

impl FromStr for Quality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Quality::ALL
            .into_iter()
            .find(|q| q.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Dataset(format!("unknown quality `{s}`")))
    }
}

impl fmt::Display for Fruit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One of the 18 fruit × quality classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassId {
    pub fruit: Fruit,
    pub quality: Quality,
}

impl ClassId {
    pub fn all() -> impl Iterator<Item = ClassId> {
        Fruit::ALL.into_iter().flat_map(|fruit| {
            Quality::ALL
                .into_iter()
                .map(move |quality| ClassId { fruit, quality })
        })
    }

    /// `Fruit_Quality`, the flat-layout folder name.
    pub fn folder_name(self) -> String {
        format!("{}_{}", self.fruit, self.quality)
    }

    pub fn fine_label(self) -> usize {
        self.fruit.index() * Quality::ALL.len() + self.quality.index()
    }

    pub fn from_fine_label(label: usize) -> Option<ClassId> {
        (label < 18).then(|| ClassId {
            fruit: Fruit::ALL[label / 3],
            quality: Quality::ALL[label % 3],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

/// Which labels a classifier predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum TaskMode {
    #[default]
    FineGrained18,
    Fruit6,
    Quality3,
}

impl TaskMode {
    pub const ALL: [TaskMode; 3] = [TaskMode::FineGrained18, TaskMode::Fruit6, TaskMode::Quality3];

    pub fn num_classes(self) -> usize {
        match self {
            TaskMode::FineGrained18 => 18,
            TaskMode::Fruit6 => 6,
            TaskMode::Quality3 => 3,
        }
    }

    pub fn label(self, class: ClassId) -> usize {
        match self {
            TaskMode::FineGrained18 => class.fine_label(),
            TaskMode::Fruit6 => class.fruit.index(),
            TaskMode::Quality3 => class.quality.index(),
        }
    }

    /// Maps a fine-grained label onto this task.
    pub fn project(self, fine_label: usize) -> usize {
        match self {
            TaskMode::FineGrained18 => fine_label,
            TaskMode::Fruit6 => fine_label / 3,
            TaskMode::Quality3 => fine_label % 3,
        }
    }

    pub fn label_names(self) -> Vec<String> {
        match self {
            TaskMode::FineGrained18 => ClassId::all().map(ClassId::folder_name).collect(),
            TaskMode::Fruit6 => Fruit::ALL.iter().map(|f| f.name().to_string()).collect(),
            TaskMode::Quality3 => Quality::ALL.iter().map(|q| q.name().to_string()).collect(),
        }
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            TaskMode::FineGrained18 => "fine18",
            TaskMode::Fruit6 => "fruit6",
            TaskMode::Quality3 => "quality3",
        }
    }
}

impl FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fine18" | "finegrained18" | "fine" | "18" => Ok(TaskMode::FineGrained18),
            "fruit6" | "fruit" | "6" => Ok(TaskMode::Fruit6),
            "quality3" | "quality" | "3" => Ok(TaskMode::Quality3),
            other => Err(Error::Config(format!(
                "unknown task `{other}` (expected fine18, fruit6 or quality3)"
            ))),
        }
    }
}

impl fmt::Display for TaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub class: ClassId,
    /// Assigned by [`stratified_split`].
    pub split: Option<Split>,
}

/// Integer labels of `records` under `task`.
pub fn relabel(records: &[SampleRecord], task: TaskMode) -> Vec<usize> {
    records.iter().map(|r| task.label(r.class)).collect()
}

/// Decoded images with their labels. `indices` identify each sample within
/// its source and key its augmentation stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fine_labels_follow_alphabetical_fruit_then_quality() {
        let first = ClassId {
            fruit: Fruit::Apple,
            quality: Quality::Bad,
        };
        let last = ClassId {
            fruit: Fruit::Pomegranate,
            quality: Quality::Mixed,
        };
        assert_eq!(first.fine_label(), 0);
        assert_eq!(last.fine_label(), 17);
        let labels: Vec<usize> = ClassId::all().map(ClassId::fine_label).collect();
        assert_eq!(labels, (0..18).collect::<Vec<_>>());
    }

    #[test]
    fn projections_agree_with_direct_labels() {
        for class in ClassId::all() {
            for task in TaskMode::ALL {
                assert_eq!(task.project(class.fine_label()), task.label(class));
            }
            assert_eq!(ClassId::from_fine_label(class.fine_label()), Some(class));
        }
        assert_eq!(ClassId::from_fine_label(18), None);
    }

    #[test]
    fn guava_is_fruit_two() {
        for quality in Quality::ALL {
            let class = ClassId {
                fruit: Fruit::Guava,
                quality,
            };
            assert_eq!(TaskMode::Fruit6.label(class), 2);
        }
    }

    #[test]
    fn quality_task_has_three_labels_of_six_classes() {
        let mut counts = [0; 3];
        for class in ClassId::all() {
            counts[TaskMode::Quality3.label(class)] += 1;
        }
        assert_eq!(counts, [6, 6, 6]);
    }

    #[test]
    fn parsing_is_case_insensitive() {
        assert_eq!("apple".parse::<Fruit>().unwrap(), Fruit::Apple);
        assert_eq!("MIXED".parse::<Quality>().unwrap(), Quality::Mixed);
        assert!("Dragonfruit".parse::<Fruit>().is_err());
        assert_eq!("quality3".parse::<TaskMode>().unwrap(), TaskMode::Quality3);
    }
}
