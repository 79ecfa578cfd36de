//! Chips, augmentation, synthetic data and the on-disk dataset formats.

mod augment;
mod chips;
mod synth;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use augment::{augment, hflip, jitter, rotate90_cw, vflip, AugmentConfig};
pub use chips::{
    chips_to_tensor, extract_chips, Annotation, Chip, ChipSource, ChipWindow, Discard,
    DiscardReason, DiskImages, Extraction, ImageSource,
};
pub use synth::{exponent_for_ratio, synth_dataset, SynthConfig};

use crate::error::{Error, Result};
use crate::ClassId;

/// Labeled chips split into training and test sets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChipDataset {
    pub class_names: Vec<String>,
    pub train: Vec<Chip>,
    pub test: Vec<Chip>,
}

impl ChipDataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn train_labels(&self) -> Vec<ClassId> {
        self.train.iter().map(|c| c.class_id).collect()
    }

    pub fn test_labels(&self) -> Vec<ClassId> {
        self.test.iter().map(|c| c.class_id).collect()
    }

    /// Writes `classes.txt` and, per split, `chips/*.png` plus `index.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let names = dir.join("classes.txt");
        fs::write(&names, self.class_names.join("\n") + "\n").map_err(|e| Error::io(&names, e))?;
        for (split, chips) in [("train", &self.train), ("test", &self.test)] {
            write_split(&dir.join(split), chips)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let names = dir.join("classes.txt");
        let text = fs::read_to_string(&names).map_err(|e| Error::io(&names, e))?;
        let class_names: Vec<String> = text.lines().map(str::to_owned).collect();
        let train = read_split(&dir.join("train"), class_names.len())?;
        let test = read_split(&dir.join("test"), class_names.len())?;
        Ok(Self {
            class_names,
            train,
            test,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    chip_path: String,
    class_id: ClassId,
    source_image: String,
    bbox: String,
}

fn write_split(dir: &Path, chips: &[Chip]) -> Result<()> {
    let chip_dir = dir.join("chips");
    fs::create_dir_all(&chip_dir).map_err(|e| Error::io(&chip_dir, e))?;
    let index = dir.join("index.csv");
    let mut w = csv::Writer::from_path(&index)?;
    for (i, chip) in chips.iter().enumerate() {
        let rel = format!("chips/{i:06}.png");
        let path = dir.join(&rel);
        chip.to_image()
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path, source })?;
        let (source_image, bbox) = match &chip.source {
            Some(s) => (s.image.clone(), serde_json::to_string(&s.bbox)?),
            None => (String::new(), String::new()),
        };
        w.serialize(IndexRow {
            chip_path: rel,
            class_id: chip.class_id,
            source_image,
            bbox,
        })?;
    }
    w.flush().map_err(|e| Error::io(&index, e))?;
    Ok(())
}

fn read_split(dir: &Path, classes: usize) -> Result<Vec<Chip>> {
    let mut r = csv::Reader::from_path(dir.join("index.csv"))?;
    let mut chips = Vec::new();
    for row in r.deserialize() {
        let row: IndexRow = row?;
        if row.class_id >= classes {
            return Err(Error::Invalid(format!(
                "{}: class id {} but only {classes} classes",
                row.chip_path, row.class_id
            )));
        }
        let path = dir.join(&row.chip_path);
        let img = image::open(&path)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?
            .to_rgb8();
        let mut chip = Chip::from_image(&img, row.class_id)?;
        if !row.source_image.is_empty() || !row.bbox.is_empty() {
            chip = chip.with_source(ChipSource {
                image: row.source_image,
                bbox: serde_json::from_str(&row.bbox)?,
            });
        }
        chips.push(chip);
    }
    Ok(chips)
}

/// Reads a JSON-lines annotation manifest; blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<Annotation>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let a: Annotation = serde_json::from_str(&line)
            .map_err(|e| Error::Invalid(format!("{} line {}: {e}", path.display(), n + 1)))?;
        out.push(a);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, annotations: &[Annotation]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for a in annotations {
        serde_json::to_writer(&mut w, a)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row of a class-population table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Population {
    #[serde(rename = "class")]
    pub name: String,
    pub train_count: u64,
    pub test_count: u64,
}

/// Per-class train/test counts, in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PopulationTable {
    pub rows: Vec<Population>,
}

const XVIEW_POPULATIONS: &str = include_str!("../../data/xview_populations.csv");

impl PopulationTable {
    /// The 60-class xView chip populations shipped with the crate.
    pub fn xview() -> Self {
        Self::from_reader(XVIEW_POPULATIONS.as_bytes()).expect("shipped table parses")
    }

    pub fn from_reader(r: impl std::io::Read) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let rows = reader
            .deserialize()
            .collect::<std::result::Result<Vec<Population>, _>>()?;
        if rows.is_empty() {
            return Err(Error::Invalid("population table has no rows".into()));
        }
        Ok(Self { rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn train_counts(&self) -> Vec<u64> {
        self.rows.iter().map(|r| r.train_count).collect()
    }

    pub fn test_counts(&self) -> Vec<u64> {
        self.rows.iter().map(|r| r.test_count).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.name.clone()).collect()
    }
}

/// Paths of every chip image in a saved dataset split, in index order.
pub fn chip_paths(dir: &Path, split: &str) -> Result<Vec<PathBuf>> {
    let split_dir = dir.join(split);
    let mut r = csv::Reader::from_path(split_dir.join("index.csv"))?;
    r.deserialize::<IndexRow>()
        .map(|row| Ok(split_dir.join(row?.chip_path)))
        .collect()
}
