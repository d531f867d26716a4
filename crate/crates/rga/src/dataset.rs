//! Directory datasets.
//!
//! A dataset root holds `train/`, `query/`, and `gallery/`. Each split
//! directory contains PNG images named `<pid>_c<cam>[anything].png`, e.g.
//! `0001_c2_f0042.png`. An optional `masks/` directory inside the split holds
//! one 8-bit grayscale PNG per image under the same stem, whose pixel values
//! are region labels (0 = background, 1..=N classes).

use std::fs;
use std::path::{Path, PathBuf};

use rga_core::data::{DatasetSplit, Image, LabelMap, Sample, SplitRole};

use crate::error::{Error, Result};
use crate::formats::{read_label_png, read_rgb_png};

/// A loaded split plus the files that did not follow the naming convention.
#[derive(Debug)]
pub struct LoadedSplit {
    pub split: DatasetSplit,
    pub skipped: Vec<PathBuf>,
}

/// Parses the `<pid>_c<cam>` filename prefix.
pub fn parse_name(stem: &str) -> Option<(u32, u32)> {
    let (pid, rest) = stem.split_once('_')?;
    if pid.is_empty() || !pid.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let rest = rest.strip_prefix('c')?;
    let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let tail = &rest[digits..];
    if !(tail.is_empty() || tail.starts_with(['_', '-', '.', 's'])) {
        return None;
    }
    Some((pid.parse().ok()?, rest[..digits].parse().ok()?))
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Loads one split directory in lexicographic path order.
pub fn load_split(dir: &Path, role: SplitRole) -> Result<LoadedSplit> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_png(&path) {
            paths.push(path);
        }
    }
    paths.sort();
    let mask_dir = dir.join("masks");
    let mut samples = Vec::with_capacity(paths.len());
    let mut skipped = Vec::new();
    for path in paths {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let Some((person_id, camera_id)) = parse_name(stem) else {
            skipped.push(path);
            continue;
        };
        let image: Image = read_rgb_png(&path)?;
        let mask_path = mask_dir.join(format!("{stem}.png"));
        let pseudo_mask: Option<LabelMap> = if mask_path.is_file() {
            Some(read_label_png(&mask_path)?)
        } else {
            None
        };
        samples.push(Sample {
            image,
            person_id,
            camera_id,
            pseudo_mask,
            occlusion_flags: None,
            source: Some(path.display().to_string()),
        });
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!(
            "no images named <pid>_c<cam>*.png in {} ({} skipped)",
            dir.display(),
            skipped.len()
        )));
    }
    if !skipped.is_empty() {
        log::warn!("{}: skipped {} file(s) with malformed names", dir.display(), skipped.len());
    }
    Ok(LoadedSplit {
        split: DatasetSplit::new(samples, role)?,
        skipped,
    })
}

/// The three splits of a dataset root.
#[derive(Debug)]
pub struct Dataset {
    pub train: DatasetSplit,
    pub query: DatasetSplit,
    pub gallery: DatasetSplit,
    pub skipped: usize,
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let train = load_split(&root.join("train"), SplitRole::Train)?;
    let query = load_split(&root.join("query"), SplitRole::Query)?;
    let gallery = load_split(&root.join("gallery"), SplitRole::Gallery)?;
    Ok(Dataset {
        skipped: train.skipped.len() + query.skipped.len() + gallery.skipped.len(),
        train: train.split,
        query: query.split,
        gallery: gallery.split,
    })
}
