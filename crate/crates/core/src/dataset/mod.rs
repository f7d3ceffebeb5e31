//! Labelled images: synthetic generation, stratified splits and on-disk
//! manifests of PGM files.

mod synth;

pub use synth::{generate_synthetic, SyntheticSpec};

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{quantize_u8, read_pgm, write_pgm, GrayImage};
use crate::metrics::Rect;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Person,
    Empty,
}

impl Label {
    pub fn sign(self) -> i8 {
        match self {
            Label::Person => 1,
            Label::Empty => -1,
        }
    }

    pub fn from_sign(s: i8) -> Label {
        if s > 0 {
            Label::Person
        } else {
            Label::Empty
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Person => "person",
            Label::Empty => "empty",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "person" | "1" | "+1" => Ok(Label::Person),
            "empty" | "0" | "-1" => Ok(Label::Empty),
            other => Err(Error::Format {
                what: "label",
                detail: format!("unknown label {other:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub id: String,
    pub image: GrayImage,
    pub label: Label,
    pub gt_face_box: Option<Rect>,
}

/// Stratified split into train and test index lists, each ascending.
pub fn split_indices(labels: &[Label], train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in [Label::Person, Label::Empty] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < 2 {
            return Err(Error::InsufficientSamples {
                required: 2,
                actual: members.len(),
            });
        }
        members.shuffle(&mut rng);
        let n_train = ((members.len() as f64 * train_fraction).round() as usize).clamp(1, members.len() - 1);
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split(data: &[LabeledImage], train_fraction: f64, seed: u64) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let labels: Vec<Label> = data.iter().map(|d| d.label).collect();
    let (tr, te) = split_indices(&labels, train_fraction, seed)?;
    Ok((
        tr.into_iter().map(|i| data[i].clone()).collect(),
        te.into_iter().map(|i| data[i].clone()).collect(),
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    path: String,
    label: String,
    x: Option<f64>,
    y: Option<f64>,
    w: Option<f64>,
    h: Option<f64>,
}

pub const MANIFEST_NAME: &str = "manifest.csv";

/// Writes `<id>.pgm` per image plus `manifest.csv` into `dir`.
pub fn write_dataset(dir: &Path, data: &[LabeledImage]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest = dir.join(MANIFEST_NAME);
    let mut w = csv::Writer::from_path(&manifest)?;
    for d in data {
        let name = format!("{}.pgm", d.id);
        write_pgm(&d.image, BufWriter::new(File::create(dir.join(&name))?))?;
        let b = d.gt_face_box;
        w.serialize(ManifestRow {
            path: name,
            label: d.label.to_string(),
            x: b.map(|r| r.x),
            y: b.map(|r| r.y),
            w: b.map(|r| r.w),
            h: b.map(|r| r.h),
        })?;
    }
    w.flush()?;
    Ok(manifest)
}

/// Loads a manifest; image paths resolve relative to the manifest's directory.
/// Ids are file stems.
pub fn read_dataset(manifest: &Path) -> Result<Vec<LabeledImage>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut r = csv::Reader::from_path(manifest)?;
    let mut out = Vec::new();
    for row in r.deserialize::<ManifestRow>() {
        let row = row?;
        let path = base.join(&row.path);
        let image = read_pgm(BufReader::new(File::open(&path)?))?;
        let gt_face_box = match (row.x, row.y, row.w, row.h) {
            (Some(x), Some(y), Some(w), Some(h)) => Some(Rect::new(x, y, w, h)?),
            (None, None, None, None) => None,
            _ => {
                return Err(Error::Format {
                    what: "manifest",
                    detail: format!("partial face box for {}", row.path),
                })
            }
        };
        let id = Path::new(&row.path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or(row.path.clone());
        out.push(LabeledImage {
            id,
            image,
            label: row.label.parse()?,
            gt_face_box,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("manifest"));
    }
    Ok(out)
}

/// Same images after 8-bit storage, for comparing in-memory and on-disk runs.
pub fn quantized(data: &[LabeledImage]) -> Vec<LabeledImage> {
    data.iter()
        .map(|d| LabeledImage {
            image: quantize_u8(&d.image),
            ..d.clone()
        })
        .collect()
}
