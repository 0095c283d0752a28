use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, TrialRecord};
use crate::error::{Error, Result};

/// Id given to the subject generated from `clone_source`.
pub const CLONE_SUBJECT: &str = "new";

fn v1() -> u32 {
    1
}

fn default_clone_perturbation() -> f64 {
    0.05
}

/// Generator for correlated multi-subject data: every subject sees the same
/// class embeddings through its own linear "brain response" mixing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default = "v1")]
    pub version: u32,
    pub n_subjects: usize,
    pub n_classes: usize,
    pub trials_per_class: usize,
    /// Feature length `m`.
    pub in_dim: usize,
    /// Embedding length `d`.
    pub embed_dim: usize,
    /// Latent length `q`.
    pub latent_dim: usize,
    pub noise_sigma: f64,
    /// Scale of each subject's deviation from the shared mixing and of its bias.
    pub subject_perturbation: f64,
    /// When set, an extra subject named [`CLONE_SUBJECT`] is generated from
    /// this subject's mixing plus a small perturbation.
    #[serde(default)]
    pub clone_source: Option<String>,
    #[serde(default = "default_clone_perturbation")]
    pub clone_perturbation: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            version: 1,
            n_subjects: 4,
            n_classes: 10,
            trials_per_class: 100,
            in_dim: 310,
            embed_dim: 32,
            latent_dim: 16,
            noise_sigma: 0.3,
            subject_perturbation: 1.0,
            clone_source: None,
            clone_perturbation: default_clone_perturbation(),
            seed: 0,
        }
    }
}

pub(crate) fn subject_id(i: usize) -> String {
    format!("s{i}")
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::VersionMismatch {
                found: self.version,
                expected: 1,
            });
        }
        let positive = [
            ("n_subjects", self.n_subjects),
            ("trials_per_class", self.trials_per_class),
            ("in_dim", self.in_dim),
            ("embed_dim", self.embed_dim),
            ("latent_dim", self.latent_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::validation(field, "must be >= 1"));
            }
        }
        if self.n_classes < 2 {
            return Err(Error::validation("n_classes", "must be >= 2"));
        }
        if self.latent_dim > self.in_dim {
            return Err(Error::validation("latent_dim", "must not exceed in_dim"));
        }
        for (field, v) in [
            ("noise_sigma", self.noise_sigma),
            ("subject_perturbation", self.subject_perturbation),
            ("clone_perturbation", self.clone_perturbation),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::validation(field, "must be a finite value >= 0"));
            }
        }
        if let Some(src) = &self.clone_source {
            if !(0..self.n_subjects).any(|i| &subject_id(i) == src) {
                return Err(Error::validation(
                    "clone_source",
                    format!("`{src}` is not one of s0..s{}", self.n_subjects - 1),
                ));
            }
        }
        Ok(())
    }

    pub fn subject_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = (0..self.n_subjects).map(subject_id).collect();
        if self.clone_source.is_some() {
            ids.push(CLONE_SUBJECT.to_string());
        }
        ids
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Row-major `rows × cols` matrix times vector.
fn matvec(a: &[f64], v: &[f64], rows: usize) -> Vec<f64> {
    let cols = v.len();
    (0..rows)
        .map(|i| a[i * cols..(i + 1) * cols].iter().zip(v).map(|(x, y)| x * y).sum())
        .collect()
}

struct Mixing {
    a: Vec<f64>,
    b: Vec<f64>,
}

/// Generates subjects `s0..s{N-1}` (plus [`CLONE_SUBJECT`] when cloning).
/// Class embeddings are uniform on the unit sphere; each trial is
/// `x = A_i (W e_c + ε) + b_i` with `A_i = A₀ + perturbation·G_i`.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let (m, d, q) = (config.in_dim, config.embed_dim, config.latent_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let embeddings: Vec<Vec<f64>> = (0..config.n_classes)
        .map(|_| loop {
            let v = gaussian(&mut rng, d, 1.0);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect();
    let lift = gaussian(&mut rng, q * d, 1.0);
    let base = gaussian(&mut rng, m * q, 1.0 / (q as f64).sqrt());

    let pert = config.subject_perturbation;
    let mut mixings: Vec<Mixing> = (0..config.n_subjects)
        .map(|_| {
            let g = gaussian(&mut rng, m * q, 1.0 / (q as f64).sqrt());
            let b = gaussian(&mut rng, m, pert);
            Mixing {
                a: base.iter().zip(&g).map(|(a, g)| a + pert * g).collect(),
                b,
            }
        })
        .collect();
    if let Some(src) = &config.clone_source {
        let j = (0..config.n_subjects).position(|i| &subject_id(i) == src).unwrap();
        let cp = config.clone_perturbation;
        let g = gaussian(&mut rng, m * q, 1.0 / (q as f64).sqrt());
        let gb = gaussian(&mut rng, m, cp);
        let a = mixings[j].a.iter().zip(&g).map(|(a, g)| a + cp * g).collect();
        let b = mixings[j].b.iter().zip(&gb).map(|(b, g)| b + g).collect();
        mixings.push(Mixing { a, b });
    }

    let subjects = config.subject_ids();
    let latents: Vec<Vec<f64>> = embeddings.iter().map(|e| matvec(&lift, e, q)).collect();
    let mut records = Vec::with_capacity(subjects.len() * config.n_classes * config.trials_per_class);
    for (subject, mix) in subjects.iter().zip(&mixings) {
        for (class, latent) in latents.iter().enumerate() {
            for _ in 0..config.trials_per_class {
                let noisy: Vec<f64> = latent
                    .iter()
                    .zip(gaussian(&mut rng, q, config.noise_sigma))
                    .map(|(z, n)| z + n)
                    .collect();
                let x = matvec(&mix.a, &noisy, m)
                    .into_iter()
                    .zip(&mix.b)
                    .map(|(v, b)| v + b)
                    .collect();
                records.push(TrialRecord {
                    subject: subject.clone(),
                    class,
                    x,
                    e: embeddings[class].clone(),
                });
            }
        }
    }
    let mut ds = Dataset::new(m, d, config.n_classes, subjects, records)?;
    ds.meta = serde_json::to_value(config)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_subjects: 2,
            n_classes: 3,
            trials_per_class: 20,
            in_dim: 12,
            embed_dim: 4,
            latent_dim: 3,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn shapes_and_determinism() {
        let cfg = small();
        let a = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.len(), 2 * 3 * 20);
        assert_eq!(a, generate_synthetic(&cfg).unwrap());
        for r in &a.records {
            let n: f64 = r.e.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let b = generate_synthetic(&SyntheticConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.records, b.records);
    }

    #[test]
    fn zero_perturbation_and_noise_gives_identical_subjects() {
        let cfg = SyntheticConfig {
            subject_perturbation: 0.0,
            noise_sigma: 0.0,
            ..small()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let s0 = ds.subject_records("s0");
        let s1 = ds.subject_records("s1");
        for (a, b) in s0.iter().zip(&s1) {
            assert_eq!(a.class, b.class);
            assert_eq!(a.x, b.x);
        }
    }

    #[test]
    fn clone_subject_tracks_its_source() {
        let cfg = SyntheticConfig {
            n_subjects: 3,
            noise_sigma: 0.0,
            clone_source: Some("s1".into()),
            ..small()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.subjects.last().unwrap(), CLONE_SUBJECT);
        let new = ds.subject_records(CLONE_SUBJECT);
        let dist = |s: &str| -> f64 {
            ds.subject_records(s)
                .iter()
                .zip(&new)
                .map(|(a, b)| a.x.iter().zip(&b.x).map(|(u, v)| (u - v).powi(2)).sum::<f64>())
                .sum()
        };
        assert!(dist("s1") < dist("s0"));
        assert!(dist("s1") < dist("s2"));
    }

    #[test]
    fn validation_names_fields() {
        let bad = SyntheticConfig { n_classes: 1, ..small() };
        assert!(matches!(bad.validate(), Err(Error::Validation { field, .. }) if field == "n_classes"));
        let bad = SyntheticConfig { latent_dim: 13, ..small() };
        assert!(bad.validate().is_err());
        let bad = SyntheticConfig {
            clone_source: Some("s9".into()),
            ..small()
        };
        assert!(bad.validate().is_err());
        let bad = SyntheticConfig { noise_sigma: -1.0, ..small() };
        assert!(bad.validate().is_err());
    }
}
