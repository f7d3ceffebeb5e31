//! Binary little-endian container for a labelled set of encoded vectors.
//!
//! Layout: magic `OCCMAT01`, kind (u8), k, d, count, dim (u64 each),
//! normalized (u8); then per row label (i8), id length (u32), id bytes and
//! `dim` f64 values.

use std::io::{Read, Write};

use crate::encoders::{EncodedVector, EncoderKind};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"OCCMAT01";

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRow {
    pub id: String,
    pub label: i8,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedMatrix {
    pub kind: EncoderKind,
    pub k: usize,
    pub d: usize,
    pub dim: usize,
    pub normalized: bool,
    pub rows: Vec<MatrixRow>,
}

fn kind_code(kind: EncoderKind) -> u8 {
    match kind {
        EncoderKind::Bow => 0,
        EncoderKind::Vlad => 1,
        EncoderKind::Fisher => 2,
    }
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "encoded matrix",
        detail: detail.into(),
    }
}

impl EncodedMatrix {
    /// All vectors must share one fingerprint.
    pub fn from_vectors(rows: Vec<(String, i8, EncodedVector)>) -> Result<Self> {
        let Some((_, _, first)) = rows.first() else {
            return Err(Error::EmptyInput("encoded vectors"));
        };
        let (kind, k, d, normalized, dim) = (first.kind, first.k, first.d, first.normalized, first.values.len());
        let fp = first.fingerprint();
        let mut out = Vec::with_capacity(rows.len());
        for (id, label, v) in rows {
            if v.fingerprint() != fp {
                return Err(Error::FingerprintMismatch {
                    expected: fp.to_string(),
                    actual: v.fingerprint().to_string(),
                });
            }
            out.push(MatrixRow {
                id,
                label,
                values: v.values,
            });
        }
        Ok(EncodedMatrix {
            kind,
            k,
            d,
            dim,
            normalized,
            rows: out,
        })
    }

    pub fn vector(&self, i: usize) -> EncodedVector {
        EncodedVector {
            values: self.rows[i].values.clone(),
            kind: self.kind,
            k: self.k,
            d: self.d,
            normalized: self.normalized,
        }
    }

    pub fn vectors(&self) -> Vec<EncodedVector> {
        (0..self.rows.len()).map(|i| self.vector(i)).collect()
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[kind_code(self.kind)])?;
        for v in [self.k, self.d, self.rows.len(), self.dim] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&[u8::from(self.normalized)])?;
        for r in &self.rows {
            if r.values.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    actual: r.values.len(),
                });
            }
            w.write_all(&r.label.to_le_bytes())?;
            w.write_all(&(r.id.len() as u32).to_le_bytes())?;
            w.write_all(r.id.as_bytes())?;
            for v in &r.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let kind = match read_u8(&mut r)? {
            0 => EncoderKind::Bow,
            1 => EncoderKind::Vlad,
            2 => EncoderKind::Fisher,
            c => return Err(bad(format!("unknown kind code {c}"))),
        };
        let k = read_u64(&mut r)? as usize;
        let d = read_u64(&mut r)? as usize;
        let count = read_u64(&mut r)? as usize;
        let dim = read_u64(&mut r)? as usize;
        let normalized = match read_u8(&mut r)? {
            0 => false,
            1 => true,
            c => return Err(bad(format!("bad normalized flag {c}"))),
        };
        let mut rows = Vec::with_capacity(count.min(1 << 16));
        let mut buf8 = [0u8; 8];
        for _ in 0..count {
            let label = read_u8(&mut r)? as i8;
            let mut len = [0u8; 4];
            r.read_exact(&mut len)?;
            let mut id = vec![0u8; u32::from_le_bytes(len) as usize];
            r.read_exact(&mut id)?;
            let id = String::from_utf8(id).map_err(|_| bad("id is not utf-8"))?;
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut buf8)?;
                values.push(f64::from_le_bytes(buf8));
            }
            rows.push(MatrixRow { id, label, values });
        }
        Ok(EncodedMatrix {
            kind,
            k,
            d,
            dim,
            normalized,
            rows,
        })
    }

    /// `id,label,v0,…` with one row per vector.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id".to_string(), "label".to_string()];
        header.extend((0..self.dim).map(|i| format!("v{i}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.id.clone(), r.label.to_string()];
            rec.extend(r.values.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
