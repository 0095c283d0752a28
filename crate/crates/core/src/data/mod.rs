//! Trial records, synthetic generation, DE features and the on-disk
//! container format.

mod container;
mod de;
mod synthetic;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use container::{
    decode_container, encode_container, load_dataset, read_container, save_dataset, write_container, RawContainer,
    FORMAT_VERSION, MAGIC,
};
pub use de::{band_powers, de_feature, differential_entropy, DeFeatures, POWER_FLOOR, SEED_BANDS};
pub use synthetic::{generate_synthetic, SyntheticConfig, CLONE_SUBJECT};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One `(subject, class, brain features, target embedding)` sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub subject: String,
    pub class: usize,
    pub x: Vec<f64>,
    pub e: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub in_dim: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
    /// Subject table; record subjects must appear here.
    pub subjects: Vec<String>,
    pub records: Vec<TrialRecord>,
    /// Free-form provenance (e.g. the generating config), kept in the header.
    pub meta: serde_json::Value,
}

/// Row-stacked tensors for one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectData {
    pub x: Tensor,
    pub e: Tensor,
    pub classes: Vec<usize>,
}

impl SubjectData {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> SubjectData {
        SubjectData {
            x: self.x.select_rows(idx),
            e: self.e.select_rows(idx),
            classes: idx.iter().map(|&i| self.classes[i]).collect(),
        }
    }
}

impl Dataset {
    pub fn new(
        in_dim: usize,
        embed_dim: usize,
        n_classes: usize,
        subjects: Vec<String>,
        records: Vec<TrialRecord>,
    ) -> Result<Self> {
        let ds = Dataset {
            in_dim,
            embed_dim,
            n_classes,
            subjects,
            records,
            meta: serde_json::Value::Null,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if !self.subjects.contains(&r.subject) {
                return Err(Error::UnknownSubject(r.subject.clone()));
            }
            if r.class >= self.n_classes {
                return Err(Error::invalid(format!(
                    "record {i}: class {} out of range for {} classes",
                    r.class, self.n_classes
                )));
            }
            if r.x.len() != self.in_dim || r.e.len() != self.embed_dim {
                return Err(Error::shape(
                    "dataset record",
                    &[self.in_dim, self.embed_dim],
                    &[r.x.len(), r.e.len()],
                ));
            }
            if !r.x.iter().chain(&r.e).all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("record {i} has non-finite values")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn counts(&self) -> BTreeMap<String, usize> {
        let mut out: BTreeMap<String, usize> = self.subjects.iter().map(|s| (s.clone(), 0)).collect();
        for r in &self.records {
            *out.entry(r.subject.clone()).or_default() += 1;
        }
        out
    }

    /// Same header, different records.
    pub fn with_records(&self, records: Vec<TrialRecord>) -> Dataset {
        Dataset {
            records,
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            in_dim: self.in_dim,
            embed_dim: self.embed_dim,
            n_classes: self.n_classes,
            subjects: self.subjects.clone(),
            records: Vec::new(),
            meta: self.meta.clone(),
        }
    }

    pub fn subject_records(&self, subject: &str) -> Vec<TrialRecord> {
        self.records.iter().filter(|r| r.subject == subject).cloned().collect()
    }

    pub fn subject_data(&self, subject: &str) -> Result<SubjectData> {
        stack(&self.subject_records(subject), self.in_dim, self.embed_dim)
            .map_err(|_| Error::EmptyDataset(format!("no records for subject `{subject}`")))
    }

    /// Stacked data for every subject that has at least one record.
    pub fn by_subject(&self) -> Result<BTreeMap<String, SubjectData>> {
        let mut out = BTreeMap::new();
        for s in &self.subjects {
            if self.records.iter().any(|r| &r.subject == s) {
                out.insert(s.clone(), self.subject_data(s)?);
            }
        }
        Ok(out)
    }

    /// Mean target embedding of each class over the records.
    pub fn class_embeddings(&self) -> Result<Vec<Vec<f64>>> {
        let mut sums = vec![vec![0.0; self.embed_dim]; self.n_classes];
        let mut counts = vec![0usize; self.n_classes];
        for r in &self.records {
            counts[r.class] += 1;
            for (s, v) in sums[r.class].iter_mut().zip(&r.e) {
                *s += v;
            }
        }
        for (c, (sum, &n)) in sums.iter_mut().zip(&counts).enumerate() {
            if n == 0 {
                return Err(Error::EmptyDataset(format!("class {c} has no records")));
            }
            sum.iter_mut().for_each(|v| *v /= n as f64);
        }
        Ok(sums)
    }

    /// Writes one JSON object per trial, for debugging.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Row-stacks records into tensors.
pub fn stack(records: &[TrialRecord], in_dim: usize, embed_dim: usize) -> Result<SubjectData> {
    if records.is_empty() {
        return Err(Error::EmptyDataset("no records to stack".into()));
    }
    let n = records.len();
    let mut x = Vec::with_capacity(n * in_dim);
    let mut e = Vec::with_capacity(n * embed_dim);
    for r in records {
        x.extend_from_slice(&r.x);
        e.extend_from_slice(&r.e);
    }
    Ok(SubjectData {
        x: Tensor::new(vec![n, in_dim], x)?,
        e: Tensor::new(vec![n, embed_dim], e)?,
        classes: records.iter().map(|r| r.class).collect(),
    })
}

/// Indices of records grouped by `(subject, class)`, in a fixed order.
fn strata(records: &[TrialRecord]) -> BTreeMap<(&str, usize), Vec<usize>> {
    let mut groups: BTreeMap<(&str, usize), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry((r.subject.as_str(), r.class)).or_default().push(i);
    }
    groups
}

/// Class-stratified train/test split per subject. Each stratum keeps
/// `round(f·n)` training trials, clamped so both sides are non-empty.
/// Both halves preserve input order.
pub fn split(records: &[TrialRecord], train_fraction: f64, seed: u64) -> Result<(Vec<TrialRecord>, Vec<TrialRecord>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!("train fraction must be in (0, 1), got {train_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; records.len()];
    for ((subject, class), mut idx) in strata(records) {
        if idx.len() < 2 {
            return Err(Error::invalid(format!(
                "subject `{subject}` class {class} has {} trial(s); splitting needs at least 2",
                idx.len()
            )));
        }
        let n = idx.len();
        let k = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        idx.shuffle(&mut rng);
        for &i in &idx[..k] {
            in_train[i] = true;
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (r, t) in records.iter().zip(in_train) {
        if t { train.push(r.clone()) } else { test.push(r.clone()) }
    }
    Ok((train, test))
}

/// Draws `n` records with class proportions preserved as closely as
/// possible (largest-remainder apportionment, ties to the lower class).
pub fn stratified_subset(records: &[TrialRecord], n: usize, seed: u64) -> Result<Vec<TrialRecord>> {
    Ok(stratified_subset_indices(records, n, seed)?
        .into_iter()
        .map(|i| records[i].clone())
        .collect())
}

/// Ascending record indices chosen by [`stratified_subset`].
pub fn stratified_subset_indices(records: &[TrialRecord], n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || n > records.len() {
        return Err(Error::invalid(format!(
            "budget {n} must be between 1 and the {} available trials",
            records.len()
        )));
    }
    let groups: Vec<Vec<usize>> = strata(records).into_values().collect();
    let total = records.len() as f64;
    let exact: Vec<f64> = groups.iter().map(|g| n as f64 * g.len() as f64 / total).collect();
    let mut take: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - take[a] as f64, exact[b] - take[b] as f64);
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = n - take.iter().sum::<usize>();
    for &g in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        if take[g] < groups[g].len() {
            take[g] += 1;
            missing -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n);
    for (mut g, k) in groups.into_iter().zip(take) {
        g.shuffle(&mut rng);
        chosen.extend_from_slice(&g[..k]);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(subjects: usize, classes: usize, per: usize) -> Vec<TrialRecord> {
        let mut out = Vec::new();
        for s in 0..subjects {
            for c in 0..classes {
                for t in 0..per {
                    out.push(TrialRecord {
                        subject: format!("s{s}"),
                        class: c,
                        x: vec![t as f64, s as f64],
                        e: vec![c as f64],
                    });
                }
            }
        }
        out
    }

    #[test]
    fn split_counts_match_block_protocol() {
        let recs = records(1, 40, 35);
        assert_eq!(recs.len(), 1400);
        let (train, test) = split(&recs, 6.0 / 7.0, 3).unwrap();
        assert_eq!((train.len(), test.len()), (1200, 200));
    }

    #[test]
    fn split_is_a_partition_and_deterministic() {
        let recs = records(3, 4, 7);
        let (a, b) = split(&recs, 0.5, 9).unwrap();
        let (a2, b2) = split(&recs, 0.5, 9).unwrap();
        assert_eq!((a.clone(), b.clone()), (a2, b2));
        let mut union: Vec<_> = a.iter().chain(&b).map(|r| format!("{r:?}")).collect();
        let mut orig: Vec<_> = recs.iter().map(|r| format!("{r:?}")).collect();
        union.sort();
        orig.sort();
        assert_eq!(union, orig);
        let (c, _) = split(&recs, 0.5, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_rejects_tiny_strata_and_bad_fractions() {
        let recs = records(1, 2, 1);
        assert!(split(&recs, 0.5, 0).is_err());
        let recs = records(1, 2, 4);
        assert!(split(&recs, 1.0, 0).is_err());
        assert!(split(&recs, 0.0, 0).is_err());
    }

    #[test]
    fn stratified_subset_balances_classes() {
        let recs = records(1, 4, 25);
        let sub = stratified_subset(&recs, 10, 1).unwrap();
        assert_eq!(sub.len(), 10);
        let mut per = [0; 4];
        for r in &sub {
            per[r.class] += 1;
        }
        assert_eq!(per, [3, 3, 2, 2]);
        assert!(stratified_subset(&recs, 101, 1).is_err());
        assert_eq!(stratified_subset(&recs, 100, 1).unwrap(), recs);
    }

    #[test]
    fn dataset_validation_and_grouping() {
        let recs = records(2, 2, 3);
        let ds = Dataset::new(2, 1, 2, vec!["s0".into(), "s1".into()], recs.clone()).unwrap();
        let groups = ds.by_subject().unwrap();
        assert_eq!(groups["s1"].x.shape(), &[6, 2]);
        assert_eq!(ds.class_embeddings().unwrap(), vec![vec![0.0], vec![1.0]]);
        assert!(Dataset::new(2, 1, 2, vec!["s0".into()], recs.clone()).is_err());
        assert!(Dataset::new(3, 1, 2, vec!["s0".into(), "s1".into()], recs).is_err());
    }
}
