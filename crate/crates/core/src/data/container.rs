//! `MCDS1` container: magic line, u64 LE header length, UTF-8 JSON header,
//! then a raw little-endian f64 payload.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, TrialRecord};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"MCDS1\n";
pub const FORMAT_VERSION: u32 = 1;

/// A decoded container whose payload has not been interpreted yet.
#[derive(Clone, Debug)]
pub struct RawContainer {
    pub path: PathBuf,
    pub header: serde_json::Value,
    payload: Vec<u8>,
}

impl RawContainer {
    /// Parses the header into `T`.
    pub fn header_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.header.clone()).map_err(|e| Error::Header(e.to_string()))
    }

    /// The payload as `expected` f64 values; a short payload is a truncation
    /// error, trailing bytes a header error.
    pub fn values(&self, expected: u64) -> Result<Vec<f64>> {
        let need = expected
            .checked_mul(8)
            .ok_or_else(|| Error::Header(format!("declared value count {expected} overflows")))?;
        let have = self.payload.len() as u64;
        if have < need {
            return Err(Error::Truncated {
                path: self.path.clone(),
                expected: need,
                actual: have,
            });
        }
        if have > need {
            return Err(Error::Header(format!("{} trailing payload bytes", have - need)));
        }
        Ok(self
            .payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn encode_container<H: Serialize>(header: &H, payload: &[f64]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + payload.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes container bytes; `path` is only used in error messages.
pub fn decode_container(bytes: &[u8], path: &Path) -> Result<RawContainer> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 8 {
        return Err(Error::Truncated {
            path: path.into(),
            expected: 8,
            actual: rest.len() as u64,
        });
    }
    let len = u64::from_le_bytes(rest[..8].try_into().unwrap());
    let rest = &rest[8..];
    if (rest.len() as u64) < len {
        return Err(Error::Truncated {
            path: path.into(),
            expected: len,
            actual: rest.len() as u64,
        });
    }
    let (header, payload) = rest.split_at(len as usize);
    let header: serde_json::Value = serde_json::from_slice(header).map_err(|e| Error::Header(e.to_string()))?;
    let version = header
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Header("missing `format_version`".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::VersionMismatch {
            found: version.try_into().unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    Ok(RawContainer {
        path: path.into(),
        header,
        payload: payload.to_vec(),
    })
}

pub fn write_container<H: Serialize>(path: &Path, header: &H, payload: &[f64]) -> Result<()> {
    let bytes = encode_container(header, payload)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<RawContainer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes, path)
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format_version: u32,
    kind: String,
    in_dim: usize,
    embed_dim: usize,
    subjects: Vec<String>,
    classes: Vec<String>,
    counts: BTreeMap<String, usize>,
    record_count: u64,
    /// `[subject index, class, x…, e…]`
    record_len: u64,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    let header = DatasetHeader {
        format_version: FORMAT_VERSION,
        kind: "dataset".into(),
        in_dim: ds.in_dim,
        embed_dim: ds.embed_dim,
        subjects: ds.subjects.clone(),
        classes: (0..ds.n_classes).map(|c| format!("c{c}")).collect(),
        counts: ds.counts(),
        record_count: ds.records.len() as u64,
        record_len: (2 + ds.in_dim + ds.embed_dim) as u64,
        meta: ds.meta.clone(),
    };
    let mut payload = Vec::with_capacity(ds.records.len() * header.record_len as usize);
    for r in &ds.records {
        let s = ds.subjects.iter().position(|s| s == &r.subject).unwrap();
        payload.push(s as f64);
        payload.push(r.class as f64);
        payload.extend_from_slice(&r.x);
        payload.extend_from_slice(&r.e);
    }
    write_container(path, &header, &payload)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let raw = read_container(path)?;
    let h: DatasetHeader = raw.header_as()?;
    if h.kind != "dataset" {
        return Err(Error::Header(format!("expected a dataset, found `{}`", h.kind)));
    }
    if h.record_len != (2 + h.in_dim + h.embed_dim) as u64 {
        return Err(Error::Header(format!("record length {} does not match dims", h.record_len)));
    }
    let values = raw.values(h.record_count.saturating_mul(h.record_len))?;
    let mut records = Vec::with_capacity(h.record_count as usize);
    for rec in values.chunks_exact(h.record_len as usize) {
        let s = rec[0] as usize;
        let subject = h
            .subjects
            .get(s)
            .ok_or_else(|| Error::Header(format!("subject index {s} outside the subject table")))?;
        records.push(TrialRecord {
            subject: subject.clone(),
            class: rec[1] as usize,
            x: rec[2..2 + h.in_dim].to_vec(),
            e: rec[2 + h.in_dim..].to_vec(),
        });
    }
    let mut ds = Dataset::new(h.in_dim, h.embed_dim, h.classes.len(), h.subjects, records)
        .map_err(|e| Error::Header(e.to_string()))?;
    ds.meta = h.meta;
    if ds.counts() != h.counts {
        return Err(Error::Header("per-subject counts disagree with records".into()));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn sample() -> Dataset {
        generate_synthetic(&SyntheticConfig {
            n_subjects: 2,
            n_classes: 3,
            trials_per_class: 4,
            in_dim: 6,
            embed_dim: 3,
            latent_dim: 2,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.mcds");
        let ds = sample();
        save_dataset(&p, &ds).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), ds);
    }

    #[test]
    fn corruptions_map_to_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.mcds");
        let ds = sample();
        save_dataset(&p, &ds).unwrap();
        let good = std::fs::read(&p).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::BadMagic { .. })));

        let rewrite = |f: &dyn Fn(&mut serde_json::Value)| {
            let raw = decode_container(&good, &p).unwrap();
            let mut h = raw.header.clone();
            f(&mut h);
            let mut bytes = encode_container(&h, &[]).unwrap();
            bytes.extend_from_slice(&raw.payload);
            std::fs::write(&p, bytes).unwrap();
        };
        rewrite(&|h| h["record_count"] = (h["record_count"].as_u64().unwrap() + 1).into());
        assert!(matches!(load_dataset(&p), Err(Error::Truncated { .. })));
        rewrite(&|h| h["format_version"] = 2.into());
        assert!(matches!(load_dataset(&p), Err(Error::VersionMismatch { found: 2, expected: 1 })));

        std::fs::write(&p, &good[..good.len() - 3]).unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Truncated { .. })));
        assert!(matches!(load_dataset(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
