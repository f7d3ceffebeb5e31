//! Versioned JSON model file holding every trained pipeline component.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::LinearModel;
use crate::descriptors::{DenseParams, DescriptorSet, RAW_DIM};
use crate::dpm::PartMixtureModel;
use crate::encoders::{EncodedVector, Encoder, EncoderKind, Vocabulary};
use crate::error::{Error, Result};
use crate::pca::PcaModel;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineModel {
    pub version: u32,
    pub descriptor: DenseParams,
    pub pca: Option<PcaModel>,
    pub vocabulary: Vocabulary,
    pub encoder: EncoderKind,
    pub k: usize,
    pub final_pca: Option<PcaModel>,
    pub classifier: LinearModel,
    #[serde(default)]
    pub dpm: Option<PartMixtureModel>,
    /// Person threshold on the part-model score, chosen on training images.
    #[serde(default)]
    pub dpm_threshold: Option<f64>,
}

impl PipelineModel {
    /// Checks the version and that every stage's output feeds the next.
    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::InvalidModel(format!(
                "model version {} (expected {FORMAT_VERSION})",
                self.version
            )));
        }
        let mut dim = RAW_DIM;
        if let Some(p) = &self.pca {
            p.validate()?;
            if p.d_in() != dim {
                return Err(mismatch("pca input", dim, p.d_in()));
            }
            dim = p.d_out();
        }
        self.vocabulary.validate()?;
        if self.vocabulary.d() != dim {
            return Err(mismatch("vocabulary dimension", dim, self.vocabulary.d()));
        }
        if self.vocabulary.k() != self.k {
            return Err(mismatch("vocabulary size", self.k, self.vocabulary.k()));
        }
        Encoder::new(self.encoder, &self.vocabulary)?;
        let mut len = self.encoder.encoded_len(self.k, dim);
        if let Some(p) = &self.final_pca {
            p.validate()?;
            if p.d_in() != len {
                return Err(mismatch("final pca input", len, p.d_in()));
            }
            len = p.d_out();
        }
        self.classifier.validate()?;
        let fp = self.classifier.trained_on;
        if fp.len != len || fp.kind != self.encoder || fp.k != self.k || fp.d != dim {
            return Err(Error::InvalidModel(format!("classifier trained on {fp}")));
        }
        if let Some(d) = &self.dpm {
            d.validate()?;
        }
        if self.dpm_threshold.is_some_and(|t| t.is_nan()) {
            return Err(Error::NonFinite("part model threshold"));
        }
        Ok(())
    }

    pub fn encoder(&self) -> Result<Encoder<'_>> {
        Ok(Encoder::new(self.encoder, &self.vocabulary)?.with_compression(self.final_pca.as_ref()))
    }

    /// Projects raw descriptors through the optional PCA.
    pub fn reduce(&self, ds: &DescriptorSet) -> Result<DescriptorSet> {
        match &self.pca {
            None => Ok(ds.clone()),
            Some(p) => crate::pipeline::project_set(p, ds),
        }
    }

    pub fn score(&self, v: &EncodedVector) -> Result<f64> {
        self.classifier.score(v)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: PipelineModel = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn mismatch(what: &str, expected: usize, actual: usize) -> Error {
    Error::InvalidModel(format!("{what}: expected {expected}, found {actual}"))
}

/// Replaces `path` only once `bytes` are fully written.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
