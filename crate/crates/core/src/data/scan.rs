use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{ClassId, Fruit, Quality, SampleRecord};
use crate::error::{Error, Result};

pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Records found under a dataset root.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    /// Sorted by path.
    pub records: Vec<SampleRecord>,
    /// Files inside class folders that are not images.
    pub skipped: Vec<PathBuf>,
}

impl DatasetIndex {
    pub fn counts(&self) -> BTreeMap<ClassId, usize> {
        let mut counts: BTreeMap<ClassId, usize> = ClassId::all().map(|c| (c, 0)).collect();
        for r in &self.records {
            *counts.entry(r.class).or_default() += 1;
        }
        counts
    }
}

/// Splits a folder name into alphabetic tokens, e.g. `Bad Quality_Fruits`
/// → [`Bad`, `Quality`, `Fruits`].
fn tokens(name: &str) -> Vec<&str> {
    name.split(|c: char| !c.is_ascii_alphabetic())
        .filter(|t| !t.is_empty())
        .collect()
}

/// `Fruit_Quality` folder name.
fn parse_flat(name: &str) -> Option<std::result::Result<ClassId, String>> {
    let parts = tokens(name);
    let [fruit, quality] = parts.as_slice() else {
        return None;
    };
    let q = quality.parse::<Quality>().ok()?;
    Some(match fruit.parse::<Fruit>() {
        Ok(f) => Ok(ClassId { fruit: f, quality: q }),
        Err(_) => Err(format!("`{name}` (unknown fruit `{fruit}`)")),
    })
}

/// Quality folder of the nested layout: its first token names the grade.
fn parse_quality_dir(name: &str) -> Option<Quality> {
    let parts = tokens(name);
    if parts.len() == 2 && parts[0].parse::<Fruit>().is_ok() {
        return None;
    }
    parts.first()?.parse::<Quality>().ok()
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    Ok(entries)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn name_of(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Class implied by the folders around an image file, under either layout.
pub fn class_of_path(path: &Path) -> Option<ClassId> {
    let parent = path.parent()?;
    if let Some(Ok(class)) = parse_flat(&name_of(parent)) {
        return Some(class);
    }
    let quality = parse_quality_dir(&name_of(parent.parent()?))?;
    let fruit = tokens(&name_of(parent)).first()?.parse::<Fruit>().ok()?;
    Some(ClassId { fruit, quality })
}

/// Indexes a dataset stored either flat as `<root>/<Fruit>_<Quality>/*` or
/// nested as `<root>/<Quality>/<Fruit>/*`. Unrecognized folder names are an
/// error listing every offending folder.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<DatasetIndex> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let mut class_dirs: Vec<(ClassId, PathBuf)> = Vec::new();
    let mut unrecognized: Vec<String> = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = name_of(&dir);
        if name.starts_with('.') {
            continue;
        }
        if let Some(parsed) = parse_flat(&name) {
            match parsed {
                Ok(class) => class_dirs.push((class, dir)),
                Err(msg) => unrecognized.push(msg),
            }
            continue;
        }
        let Some(quality) = parse_quality_dir(&name) else {
            unrecognized.push(format!("`{name}`"));
            continue;
        };
        for sub in sorted_entries(&dir)?.into_iter().filter(|p| p.is_dir()) {
            let sub_name = name_of(&sub);
            let parts = tokens(&sub_name);
            let fruit = parts.first().and_then(|t| t.parse::<Fruit>().ok());
            let grade_agrees = parts
                .get(1)
                .is_none_or(|t| t.parse::<Quality>().ok() == Some(quality));
            match fruit {
                Some(fruit) if grade_agrees && parts.len() <= 2 => {
                    class_dirs.push((ClassId { fruit, quality }, sub))
                }
                _ => unrecognized.push(format!("`{name}/{sub_name}`")),
            }
        }
    }
    if !unrecognized.is_empty() {
        return Err(Error::Dataset(format!(
            "unrecognized class folder(s) under {}: {}",
            root.display(),
            unrecognized.join(", ")
        )));
    }
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (class, dir) in class_dirs {
        for file in sorted_entries(&dir)? {
            if file.is_dir() {
                continue;
            }
            if is_image(&file) {
                records.push(SampleRecord {
                    path: file,
                    class,
                    split: None,
                });
            } else {
                skipped.push(file);
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!(
            "no images found under {}",
            root.display()
        )));
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        records,
        skipped,
    })
}
