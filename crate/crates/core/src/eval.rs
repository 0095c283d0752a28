//! N-way top-K scoring, a centroid classifier in embedding space, and
//! linear probes for subject information in learned features.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SubjectData};
use crate::error::{Error, Result};
use crate::model::MindCrossModel;
use crate::pipeline::{self, RunConfig};
use crate::tensor::Tensor;

/// Maps a predicted embedding to a probability vector over classes.
pub trait Classifier {
    fn n_classes(&self) -> usize;
    fn probs(&self, embedding: &[f64]) -> Vec<f64>;
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.into_iter().map(|x| x / s).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax of cosine similarities to ℓ2-normalized class centroids.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidClassifier {
    centroids: Vec<Vec<f64>>,
    temperature: f64,
}

pub const CENTROID_TEMPERATURE: f64 = 0.1;

impl CentroidClassifier {
    /// Builds centroids from `(class, embedding)` pairs covering `n_classes`.
    pub fn fit<'a>(n_classes: usize, samples: impl IntoIterator<Item = (usize, &'a [f64])>) -> Result<Self> {
        let mut sums: Vec<Option<Vec<f64>>> = vec![None; n_classes];
        for (c, e) in samples {
            let slot = sums
                .get_mut(c)
                .ok_or_else(|| Error::invalid(format!("class {c} out of range for {n_classes}")))?;
            match slot {
                None => *slot = Some(e.to_vec()),
                Some(s) => s.iter_mut().zip(e).for_each(|(a, b)| *a += b),
            }
        }
        let centroids = sums
            .into_iter()
            .enumerate()
            .map(|(c, s)| {
                let s = s.ok_or_else(|| Error::EmptyDataset(format!("class {c} has no embeddings")))?;
                normalized(&s).ok_or(Error::ZeroNorm { row: c })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CentroidClassifier {
            centroids,
            temperature: CENTROID_TEMPERATURE,
        })
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        Self::fit(ds.n_classes, ds.records.iter().map(|r| (r.class, r.e.as_slice())))
    }
}

impl Classifier for CentroidClassifier {
    fn n_classes(&self) -> usize {
        self.centroids.len()
    }

    fn probs(&self, embedding: &[f64]) -> Vec<f64> {
        let q = normalized(embedding).unwrap_or_else(|| vec![0.0; embedding.len()]);
        let logits: Vec<f64> = self
            .centroids
            .iter()
            .map(|c| c.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / self.temperature)
            .collect();
        softmax(&logits)
    }
}

/// Whether `gt` ranks within the top `k_top` among itself and `distractors`
/// (ties go to the lower class index).
pub fn gt_in_top_k(probs: &[f64], gt: usize, distractors: &[usize], k_top: usize) -> bool {
    let pg = probs[gt];
    let above = distractors
        .iter()
        .filter(|&&c| probs[c] > pg || (probs[c] == pg && c < gt))
        .count();
    above < k_top
}

fn check_nway(n_classes: usize, n_way: usize, k_top: usize) -> Result<()> {
    if n_way < 2 || n_way > n_classes {
        return Err(Error::invalid(format!("n_way must be in [2, {n_classes}], got {n_way}")));
    }
    if k_top == 0 || k_top >= n_way {
        return Err(Error::invalid(format!("k_top must be in [1, {}), got {k_top}", n_way)));
    }
    Ok(())
}

/// N-way top-K accuracy of one probability vector: the fraction of `trials`
/// random distractor draws in which the ground truth survives.
pub fn nway_topk_probs<R: Rng + ?Sized>(
    probs: &[f64],
    gt: usize,
    n_way: usize,
    k_top: usize,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    let c = probs.len();
    check_nway(c, n_way, k_top)?;
    if gt >= c {
        return Err(Error::invalid(format!("ground-truth class {gt} out of range")));
    }
    if trials == 0 {
        return Err(Error::invalid("trials must be >= 1"));
    }
    let mut hits = 0usize;
    let mut distractors = Vec::with_capacity(n_way - 1);
    for _ in 0..trials {
        distractors.clear();
        distractors.extend(sample(rng, c - 1, n_way - 1).iter().map(|i| if i < gt { i } else { i + 1 }));
        hits += usize::from(gt_in_top_k(probs, gt, &distractors, k_top));
    }
    Ok(hits as f64 / trials as f64)
}

/// Mean N-way top-K accuracy over predictions `pred` (one row each) with
/// ground-truth classes `gt`, `trials` draws per prediction.
pub fn nway_topk<C: Classifier + ?Sized, R: Rng + ?Sized>(
    classifier: &C,
    pred: &Tensor,
    gt: &[usize],
    n_way: usize,
    k_top: usize,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    if pred.rows() != gt.len() || gt.is_empty() {
        return Err(Error::shape("nway_topk", &[pred.rows()], &[gt.len()]));
    }
    check_nway(classifier.n_classes(), n_way, k_top)?;
    let mut total = 0.0;
    for (i, &g) in gt.iter().enumerate() {
        total += nway_topk_probs(&classifier.probs(pred.row(i)), g, n_way, k_top, trials, rng)?;
    }
    Ok(total / gt.len() as f64)
}

/// Fraction of predictions whose most probable class is the ground truth.
pub fn retrieval_accuracy<C: Classifier + ?Sized>(classifier: &C, pred: &Tensor, gt: &[usize]) -> f64 {
    let hits = gt
        .iter()
        .enumerate()
        .filter(|&(i, &g)| argmax(&classifier.probs(pred.row(i))) == g)
        .count();
    hits as f64 / gt.len().max(1) as f64
}

const PROBE_STEPS: usize = 300;

/// Held-out accuracy of a linear softmax probe predicting `labels` from
/// `features` rows. Features are standardized with training statistics and
/// the probe is fit by full-batch gradient descent with a fixed budget.
pub fn domain_probe(features: &Tensor, labels: &[usize], heldout_fraction: f64, seed: u64) -> Result<f64> {
    if features.rows() != labels.len() {
        return Err(Error::shape("domain_probe", &[features.rows()], &[labels.len()]));
    }
    if !(heldout_fraction > 0.0 && heldout_fraction < 1.0) {
        return Err(Error::invalid(format!("held-out fraction must be in (0, 1), got {heldout_fraction}")));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    if by_label.len() < 2 {
        return Err(Error::invalid("domain probe needs at least two subjects"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (l, mut idx) in by_label {
        if idx.len() < 2 {
            return Err(Error::invalid(format!("subject label {l} has fewer than 2 samples")));
        }
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        let k = ((heldout_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();

    let dim = features.cols();
    let mut mean = vec![0.0; dim];
    for &i in &train {
        mean.iter_mut().zip(features.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let mut sd = vec![0.0; dim];
    for &i in &train {
        sd.iter_mut()
            .zip(features.row(i))
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m) * (v - m));
    }
    sd.iter_mut().for_each(|s| {
        *s = (*s / train.len() as f64).sqrt();
        if !(*s > 1e-12) {
            *s = 1.0;
        }
    });
    let standardize = |i: usize| -> Vec<f64> {
        features
            .row(i)
            .iter()
            .zip(&mean)
            .zip(&sd)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    };
    let xtr: Vec<Vec<f64>> = train.iter().map(|&i| standardize(i)).collect();
    let xte: Vec<Vec<f64>> = test.iter().map(|&i| standardize(i)).collect();
    let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();

    // Step size from the largest eigenvalue of the (augmented) Gram matrix,
    // which bounds the softmax loss curvature by λ_max / 2.
    let lambda_max = {
        let mut v = vec![1.0 / ((dim + 1) as f64).sqrt(); dim + 1];
        let mut lam = 1.0;
        for _ in 0..50 {
            let mut next = vec![0.0; dim + 1];
            for x in &xtr {
                let dot: f64 = x.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[dim];
                next.iter_mut().zip(x).for_each(|(n, a)| *n += dot * a);
                next[dim] += dot;
            }
            next.iter_mut().for_each(|n| *n /= xtr.len() as f64);
            lam = next.iter().map(|n| n * n).sum::<f64>().sqrt();
            if lam == 0.0 {
                break;
            }
            v = next.into_iter().map(|n| n / lam).collect();
        }
        lam.max(1e-12)
    };
    let lr = 1.0 / lambda_max;

    let mut w = vec![vec![0.0; n_classes]; dim];
    let mut b = vec![0.0; n_classes];
    let logits = |w: &[Vec<f64>], b: &[f64], x: &[f64]| -> Vec<f64> {
        let mut z = b.to_vec();
        for (xi, wi) in x.iter().zip(w) {
            z.iter_mut().zip(wi).for_each(|(zc, wc)| *zc += xi * wc);
        }
        z
    };
    for _ in 0..PROBE_STEPS {
        let mut gw = vec![vec![0.0; n_classes]; dim];
        let mut gb = vec![0.0; n_classes];
        for (x, &y) in xtr.iter().zip(&ytr) {
            let mut p = softmax(&logits(&w, &b, x));
            p[y] -= 1.0;
            for (xi, gwi) in x.iter().zip(gw.iter_mut()) {
                gwi.iter_mut().zip(&p).for_each(|(g, pc)| *g += xi * pc);
            }
            gb.iter_mut().zip(&p).for_each(|(g, pc)| *g += pc);
        }
        let scale = lr / xtr.len() as f64;
        for (wi, gwi) in w.iter_mut().zip(&gw) {
            wi.iter_mut().zip(gwi).for_each(|(a, g)| *a -= scale * g);
        }
        b.iter_mut().zip(&gb).for_each(|(a, g)| *a -= scale * g);
    }
    let hits = xte
        .iter()
        .zip(&test)
        .filter(|(x, &i)| argmax(&logits(&w, &b, x)) == labels[i])
        .count();
    Ok(hits as f64 / test.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Distractor draws per prediction.
    pub trials: usize,
    pub seed: u64,
    pub probe_heldout: f64,
    /// Run the subject probes on specific and shared features.
    pub probes: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            trials: 100,
            seed: 0,
            probe_heldout: 0.3,
            probes: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub trials: usize,
    /// Keyed `"{n_way}-way-top-{k_top}"`.
    pub nway_topk: BTreeMap<String, f64>,
    pub retrieval: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeScores {
    pub specific: f64,
    pub shared: f64,
    pub chance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub seed: u64,
    pub n_classes: usize,
    pub overall: Scores,
    pub per_subject: BTreeMap<String, Scores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probes: Option<ProbeScores>,
    pub lambda_collab: f64,
    pub top_k: usize,
}

pub fn nway_key(n_way: usize, k_top: usize) -> String {
    format!("{n_way}-way-top-{k_top}")
}

impl MetricReport {
    pub fn nway(&self, n_way: usize, k_top: usize) -> Option<f64> {
        self.overall.nway_topk.get(&nway_key(n_way, k_top)).copied()
    }
}

/// Predicted embeddings: training subjects through their own branch, other
/// subjects through the Top-K collaborative predictor.
pub fn predictions(model: &MindCrossModel, subject: &str, data: &SubjectData, cfg: &RunConfig) -> Result<Tensor> {
    if model.domain_index(subject).is_some() {
        pipeline::semantic(model, subject, &data.x)
    } else {
        pipeline::predict(model, subject, &data.x, cfg)
    }
}

/// Scores every subject of `test` with sampled N-way Top-K accuracy at (2,1)
/// and (min(40, C), 1), retrieval accuracy, and optional subject probes.
pub fn evaluate<C: Classifier + ?Sized>(
    model: &MindCrossModel,
    test: &Dataset,
    classifier: &C,
    run: &RunConfig,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if test.is_empty() {
        return Err(Error::EmptyDataset("test set has no records".into()));
    }
    if test.in_dim != model.config().in_dim || test.embed_dim != model.config().embed_dim {
        return Err(Error::shape(
            "evaluate: data vs model dims",
            &[model.config().in_dim, model.config().embed_dim],
            &[test.in_dim, test.embed_dim],
        ));
    }
    let c = classifier.n_classes();
    let ways = [(2usize, 1usize), (c.min(40), 1)];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let groups = test.by_subject()?;
    let mut per_subject = BTreeMap::new();
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut retrieval_hits = 0.0;
    let mut total = 0usize;
    for (subject, data) in &groups {
        let pred = predictions(model, subject, data, run)?;
        let mut scores = Scores {
            trials: data.len(),
            nway_topk: BTreeMap::new(),
            retrieval: retrieval_accuracy(classifier, &pred, &data.classes),
        };
        for &(n, k) in &ways {
            let acc = nway_topk(classifier, &pred, &data.classes, n, k, cfg.trials, &mut rng)?;
            scores.nway_topk.insert(nway_key(n, k), acc);
            *sums.entry(nway_key(n, k)).or_default() += acc * data.len() as f64;
        }
        retrieval_hits += scores.retrieval * data.len() as f64;
        total += data.len();
        per_subject.insert(subject.clone(), scores);
    }
    let overall = Scores {
        trials: total,
        nway_topk: sums.into_iter().map(|(k, v)| (k, v / total as f64)).collect(),
        retrieval: retrieval_hits / total as f64,
    };

    let probes = if cfg.probes {
        let known: Vec<(&String, &SubjectData)> = groups
            .iter()
            .filter(|(s, d)| model.domain_index(s).is_some() && d.len() >= 2)
            .collect();
        if known.len() >= 2 {
            let mut spec = Vec::new();
            let mut shared = Vec::new();
            let mut labels = Vec::new();
            for (label, (s, d)) in known.iter().enumerate() {
                spec.push(pipeline::specific_features(model, s, &d.x)?);
                shared.push(pipeline::shared_features(model, &d.x)?);
                labels.extend(std::iter::repeat_n(label, d.len()));
            }
            let stack = |parts: &[Tensor]| -> Result<Tensor> {
                let cols = parts[0].cols();
                let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
                Tensor::new(vec![data.len() / cols, cols], data)
            };
            Some(ProbeScores {
                specific: domain_probe(&stack(&spec)?, &labels, cfg.probe_heldout, cfg.seed)?,
                shared: domain_probe(&stack(&shared)?, &labels, cfg.probe_heldout, cfg.seed)?,
                chance: 1.0 / known.len() as f64,
            })
        } else {
            None
        }
    } else {
        None
    };

    Ok(MetricReport {
        seed: cfg.seed,
        n_classes: c,
        overall,
        per_subject,
        probes,
        lambda_collab: run.lambda_collab,
        top_k: run.top_k,
    })
}
