//! Training, calibration and Top-K collaborative prediction.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Var;
use crate::data::SubjectData;
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights, TrainLossParts};
use crate::model::{Graph, MindCrossModel, ModelConfig, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DaVariant {
    /// Cross-entropy through a gradient-reversal node.
    Grl,
    /// KL divergence between projected per-subject means.
    Kl,
    /// Pairwise p-norm between per-subject means.
    Lp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// One optimizer step per subject batch, subjects taken round-robin.
    PerSubject,
    /// Every step sees an equal share of each subject.
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NewSubjectInit {
    /// Fresh weights from the new-subject seed stream.
    Fresh,
    /// Copy of the training subject whose branch best decodes the
    /// calibration data.
    CopyClosest,
}

mod defaults {
    pub fn version() -> u32 {
        1
    }
    pub fn epochs_train() -> usize {
        1000
    }
    pub fn epochs_calib() -> usize {
        200
    }
    pub fn batch_size() -> usize {
        256
    }
    pub fn lr() -> f64 {
        1e-3
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn eps() -> f64 {
        1e-8
    }
    pub fn lp_p() -> u32 {
        2
    }
    pub fn top_k() -> usize {
        1
    }
    pub fn lambda() -> f64 {
        1e-2
    }
    pub fn da_variant() -> super::DaVariant {
        super::DaVariant::Grl
    }
    pub fn new_subject_init() -> super::NewSubjectInit {
        super::NewSubjectInit::Fresh
    }
    pub fn batch_mode() -> super::BatchMode {
        super::BatchMode::PerSubject
    }
}

/// Every run hyperparameter in one serializable record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "defaults::version")]
    pub version: u32,
    #[serde(default = "defaults::epochs_train")]
    pub epochs_train: usize,
    #[serde(default = "defaults::epochs_calib")]
    pub epochs_calib: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub learning_rate: f64,
    #[serde(default = "defaults::beta1")]
    pub adam_beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub adam_beta2: f64,
    #[serde(default = "defaults::eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "defaults::da_variant")]
    pub da_variant: DaVariant,
    #[serde(default = "defaults::lp_p")]
    pub lp_p: u32,
    #[serde(default = "defaults::top_k", alias = "K")]
    pub top_k: usize,
    #[serde(default = "defaults::lambda")]
    pub lambda_collab: f64,
    #[serde(default = "defaults::batch_mode")]
    pub batch_mode: BatchMode,
    /// Rescale the selected Top-K weights to sum to one.
    #[serde(default)]
    pub renormalize_topk: bool,
    /// Include wall-clock times in epoch records (breaks byte-identical reruns).
    #[serde(default)]
    pub record_time: bool,
    #[serde(default = "defaults::new_subject_init")]
    pub new_subject_init: NewSubjectInit,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::validation(
                "version",
                format!("config version {} is not supported (expected {})", self.version, 1),
            ));
        }
        if self.epochs_train == 0 {
            return Err(Error::validation("epochs_train", "must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::validation("batch_size", "must be >= 2"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::validation("learning_rate", "must be a finite value >= 0"));
        }
        for (field, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::validation(field, "must be in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::validation("adam_eps", "must be > 0"));
        }
        if self.lp_p != 1 && self.lp_p != 2 {
            return Err(Error::validation("lp_p", "must be 1 or 2"));
        }
        if self.top_k == 0 {
            return Err(Error::validation("top_k", "must be >= 1"));
        }
        if !(self.lambda_collab >= 0.0) || !self.lambda_collab.is_finite() {
            return Err(Error::validation("lambda_collab", "must be a finite value >= 0"));
        }
        self.weights.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Batch composition actually used: the mean-based alignment variants
    /// need at least two subjects in every batch.
    pub fn effective_batch_mode(&self) -> BatchMode {
        match self.da_variant {
            DaVariant::Grl => self.batch_mode,
            DaVariant::Kl | DaVariant::Lp => BatchMode::Mixed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, g)| vec![0.0; g.tensor.len()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of every trainable group that has a
/// gradient. Frozen groups are never written.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[(ParamId, Vec<f64>)],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::invalid(format!(
            "optimizer state tracks {} groups, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (id, g) in grads {
        let group = params.get_mut(*id);
        if !group.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        if g.len() != m.len() {
            return Err(Error::shape("adam_step", &[m.len()], &[g.len()]));
        }
        for (((p, gi), mi), vi) in group.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            *p -= cfg.lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Mean loss components over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub steps: usize,
    pub total: f64,
    pub align: f64,
    pub rec: f64,
    /// Absent during calibration, which has no domain terms.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub da: Option<f64>,
    pub diff: f64,
    pub learning_rate: f64,
    /// Digest of the sampling RNG state after the epoch.
    pub rng_digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Total wall time; never serialized.
    pub elapsed: Duration,
}

impl TrainHistory {
    pub fn final_total(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.total)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn rng_digest(rng: &ChaCha8Rng) -> String {
    let mut h = Sha256::new();
    h.update(rng.get_seed());
    h.update(rng.get_stream().to_le_bytes());
    h.update(rng.get_word_pos().to_le_bytes());
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, Default)]
struct Components {
    total: f64,
    align: f64,
    rec: f64,
    dc: f64,
    da: f64,
    diff: f64,
}

impl Components {
    fn accumulate(&mut self, o: &Components) {
        self.total += o.total;
        self.align += o.align;
        self.rec += o.rec;
        self.dc += o.dc;
        self.da += o.da;
        self.diff += o.diff;
    }

    fn detail(&self) -> String {
        format!(
            "total={} align={} rec={} dc={} da={} diff={}",
            self.total, self.align, self.rec, self.dc, self.da, self.diff
        )
    }
}

fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let cols = parts[0].cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.cols() != cols {
            return Err(Error::shape("concat_rows", &[cols], &[p.cols()]));
        }
        rows += p.rows();
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, cols], data)
}

/// One subject's slice of a mini-batch.
struct Chunk<'a> {
    subject: &'a str,
    domain: usize,
    data: SubjectData,
}

type Grads = Vec<(ParamId, Vec<f64>)>;

fn train_step(model: &MindCrossModel, chunks: &[Chunk], cfg: &RunConfig, dropout_seed: u64) -> Result<(Components, Grads)> {
    let w = &cfg.weights;
    let mut g = Graph::train(model, dropout_seed);
    let inputs: Vec<(&str, Var)> = chunks.iter().map(|c| (c.subject, g.input(c.data.x.clone()))).collect();
    let x = concat_rows(&chunks.iter().map(|c| &c.data.x).collect::<Vec<_>>())?;
    let e = concat_rows(&chunks.iter().map(|c| &c.data.e).collect::<Vec<_>>())?;
    let labels: Vec<usize> = chunks.iter().flat_map(|c| std::iter::repeat_n(c.domain, c.data.len())).collect();
    let n_domains = model.domain_subjects().len();

    let (core, dc_logits, da_grl) = if cfg.da_variant == DaVariant::Grl {
        let out = g.forward_train(&inputs)?;
        (out.core, out.dc_logits, Some(out.da_logits))
    } else {
        let core = g.forward_core(&inputs)?;
        let dc = g.classify(model.dc_classifier, core.s)?;
        (core, dc, None)
    };
    let x = g.input(x);
    let e = g.input(e);
    let t = &mut g.tape;
    let align = losses::alignment_loss(t, core.e_hat, e, w.tau, w.normalize_clip)?;
    let rec = losses::reconstruction_loss(t, core.x_hat_s, core.x_hat_r, x)?;
    let dc = losses::domain_classification_loss(t, dc_logits, &labels)?;
    let da = match (cfg.da_variant, da_grl) {
        (DaVariant::Grl, Some(logits)) => losses::domain_alignment_loss_grl(t, logits, &labels)?,
        (DaVariant::Kl, _) => {
            let pw = g.param(model.kl_projection.weight);
            let pb = g.param(model.kl_projection.bias);
            losses::domain_alignment_loss_kl(&mut g.tape, core.r, &labels, n_domains, pw, pb)?
        }
        _ => losses::domain_alignment_loss_lp(t, core.r, &labels, n_domains, cfg.lp_p)?,
    };
    let t = &mut g.tape;
    let diff = losses::difference_loss(t, core.s, core.r)?;
    let parts = TrainLossParts {
        align,
        rec,
        dc,
        da,
        diff,
    };
    let total = losses::total_train_loss(t, &parts, w)?;
    let c = Components {
        total: t.value(total).item(),
        align: t.value(align).item(),
        rec: t.value(rec).item(),
        dc: t.value(dc).item(),
        da: t.value(da).item(),
        diff: t.value(diff).item(),
    };
    if !c.total.is_finite() {
        return Ok((c, Vec::new()));
    }
    t.backward(total)?;
    Ok((c, g.param_grads()))
}

fn calib_step(model: &MindCrossModel, chunk: &Chunk, cfg: &RunConfig, dropout_seed: u64) -> Result<(Components, Grads)> {
    let w = &cfg.weights;
    let mut g = Graph::train(model, dropout_seed);
    let xv = g.input(chunk.data.x.clone());
    let core = g.forward_core(&[(chunk.subject, xv)])?;
    let e = g.input(chunk.data.e.clone());
    let t = &mut g.tape;
    let align = losses::alignment_loss(t, core.e_hat, e, w.tau, w.normalize_clip)?;
    let rec = losses::reconstruction_loss(t, core.x_hat_s, core.x_hat_r, xv)?;
    let diff = losses::difference_loss(t, core.s, core.r)?;
    let total = losses::total_calibration_loss(t, align, rec, diff, w)?;
    let c = Components {
        total: t.value(total).item(),
        align: t.value(align).item(),
        rec: t.value(rec).item(),
        diff: t.value(diff).item(),
        ..Components::default()
    };
    if !c.total.is_finite() {
        return Ok((c, Vec::new()));
    }
    t.backward(total)?;
    Ok((c, g.param_grads()))
}

/// `n_max` indices into `0..n`: concatenated fresh permutations, truncated.
fn index_stream(n: usize, n_max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(n_max + n);
    while out.len() < n_max {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        out.extend(perm);
    }
    out.truncate(n_max);
    out
}

fn check_subject_data(model: &MindCrossModel, subject: &str, d: &SubjectData) -> Result<()> {
    if d.is_empty() {
        return Err(Error::EmptyDataset(format!("subject `{subject}` has no training data")));
    }
    let cfg = model.config();
    if d.x.cols() != cfg.in_dim || d.e.cols() != cfg.embed_dim {
        return Err(Error::shape(
            "subject data vs model dims",
            &[cfg.in_dim, cfg.embed_dim],
            &[d.x.cols(), d.e.cols()],
        ));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn epoch_record(
    phase: &str,
    epoch: usize,
    steps: usize,
    sum: Components,
    with_domain: bool,
    cfg: &RunConfig,
    rng: &ChaCha8Rng,
    started: Instant,
) -> EpochRecord {
    let k = steps.max(1) as f64;
    EpochRecord {
        phase: phase.into(),
        epoch,
        steps,
        total: sum.total / k,
        align: sum.align / k,
        rec: sum.rec / k,
        dc: with_domain.then_some(sum.dc / k),
        da: with_domain.then_some(sum.da / k),
        diff: sum.diff / k,
        learning_rate: cfg.learning_rate,
        rng_digest: rng_digest(rng),
        wall_time_s: cfg.record_time.then(|| started.elapsed().as_secs_f64()),
    }
}

// Independent ChaCha streams per purpose, so that e.g. the epoch count
// never changes initialization.
const STREAM_INIT: u64 = 2;
const STREAM_NEW_SUBJECT: u64 = 3;

/// Builds a model initialized from `seed`.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<MindCrossModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_INIT);
    MindCrossModel::build(config, &mut rng)
}

/// Adds a freshly initialized branch for `subject`, seeded by `seed`.
pub fn add_subject(model: &mut MindCrossModel, subject: &str, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_NEW_SUBJECT);
    model.add_new_subject(subject, &mut rng)
}

/// Adds `subject` initialized per `cfg.new_subject_init`. `data` is the
/// calibration set, used only to pick the copy source.
pub fn add_subject_for(model: &mut MindCrossModel, subject: &str, data: &SubjectData, cfg: &RunConfig) -> Result<()> {
    match cfg.new_subject_init {
        NewSubjectInit::Fresh => add_subject(model, subject, cfg.seed),
        NewSubjectInit::CopyClosest => {
            let source = closest_subject(model, data, cfg)?;
            add_subject(model, subject, cfg.seed)?;
            model.copy_branch(&source, subject)
        }
    }
}

/// Training subject whose own branch decodes `data` with the lowest
/// alignment loss (ties go to the earlier subject).
pub fn closest_subject(model: &MindCrossModel, data: &SubjectData, cfg: &RunConfig) -> Result<String> {
    let w = &cfg.weights;
    let mut best: Option<(f64, &String)> = None;
    for subject in model.domain_subjects() {
        let pred = semantic(model, subject, &data.x)?;
        let mut t = crate::autograd::Tape::new();
        let (p, e) = (t.constant(pred), t.constant(data.e.clone()));
        let loss = losses::alignment_loss(&mut t, p, e, w.tau, w.normalize_clip)?;
        let v = t.value(loss).item();
        if best.is_none_or(|(b, _)| v < b) {
            best = Some((v, subject));
        }
    }
    best.map(|(_, s)| s.clone())
        .ok_or_else(|| Error::invalid("model has no training subjects"))
}

/// Names of the fixed projection used by the KL alignment variant. Letting
/// the optimizer move it would collapse the divergence to zero.
fn is_kl_projection(name: &str) -> bool {
    name.starts_with("align/kl_projection/")
}

/// Trains every training subject's branch together with the shared parts.
///
/// Each epoch makes one pass over the largest subject; smaller subjects are
/// resampled from fresh permutations to the same length.
pub fn train(model: &mut MindCrossModel, data: &BTreeMap<String, SubjectData>, cfg: &RunConfig) -> Result<TrainHistory> {
    train_observed(model, data, cfg, &mut |_| Ok(()))
}

/// [`train`] with a callback after every epoch, e.g. to stream metrics.
pub fn train_observed(
    model: &mut MindCrossModel,
    data: &BTreeMap<String, SubjectData>,
    cfg: &RunConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let subjects: Vec<String> = model.domain_subjects().to_vec();
    for s in &subjects {
        let d = data
            .get(s)
            .ok_or_else(|| Error::EmptyDataset(format!("no training data for subject `{s}`")))?;
        check_subject_data(model, s, d)?;
    }
    let extra = model.extra_subjects();
    model.set_trainable(|name| !is_kl_projection(name) && !extra.iter().any(|s| MindCrossModel::is_subject_param(name, s)));

    let mode = cfg.effective_batch_mode();
    let n_max = subjects.iter().map(|s| data[s].len()).max().unwrap();
    let chunk = match mode {
        BatchMode::PerSubject => cfg.batch_size,
        BatchMode::Mixed => cfg.batch_size.div_ceil(subjects.len()),
    };
    let n_chunks = n_max.div_ceil(chunk);
    let adam = cfg.adam();
    let mut state = AdamState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory::default();
    let started = Instant::now();

    for epoch in 0..cfg.epochs_train {
        let streams: Vec<Vec<usize>> = subjects.iter().map(|s| index_stream(data[s].len(), n_max, &mut rng)).collect();
        let chunk_of = |si: usize, k: usize| -> Chunk {
            let idx = &streams[si][k * chunk..((k + 1) * chunk).min(n_max)];
            Chunk {
                subject: &subjects[si],
                domain: si,
                data: data[&subjects[si]].select(idx),
            }
        };
        let mut sum = Components::default();
        let mut steps = 0;
        for k in 0..n_chunks {
            let batches: Vec<Vec<Chunk>> = match mode {
                BatchMode::PerSubject => (0..subjects.len()).map(|si| vec![chunk_of(si, k)]).collect(),
                BatchMode::Mixed => vec![(0..subjects.len()).map(|si| chunk_of(si, k)).collect()],
            };
            for batch in batches {
                let (c, grads) = train_step(model, &batch, cfg, rng.next_u64())?;
                if !c.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step: steps,
                        detail: c.detail(),
                    });
                }
                adam_step(model.params_mut(), &grads, &mut state, &adam)?;
                sum.accumulate(&c);
                steps += 1;
            }
        }
        let record = epoch_record("train", epoch, steps, sum, true, cfg, &rng, started);
        on_epoch(&record)?;
        history.epochs.push(record);
    }
    history.elapsed = started.elapsed();
    Ok(history)
}

/// Test hooks for [`calibrate_with_hooks`].
#[doc(hidden)]
#[derive(Clone, Copy, Debug, Default)]
pub struct CalibrationHooks {
    /// Nudges one frozen group mid-run so the freeze check must fire.
    pub inject_frozen_drift: bool,
}

/// Adapts a newly added subject against the frozen backbone, then caches
/// its similarity vector over the training subjects.
pub fn calibrate(model: &mut MindCrossModel, subject: &str, data: &SubjectData, cfg: &RunConfig) -> Result<TrainHistory> {
    calibrate_with_hooks(model, subject, data, cfg, CalibrationHooks::default())
}

#[doc(hidden)]
pub fn calibrate_with_hooks(
    model: &mut MindCrossModel,
    subject: &str,
    data: &SubjectData,
    cfg: &RunConfig,
    hooks: CalibrationHooks,
) -> Result<TrainHistory> {
    cfg.validate()?;
    model.branch(subject)?;
    if model.domain_index(subject).is_some() {
        return Err(Error::invalid(format!(
            "`{subject}` is a training subject; calibrate a subject added with add_new_subject"
        )));
    }
    check_subject_data(model, subject, data)?;
    model.set_trainable(|name| MindCrossModel::is_subject_param(name, subject));
    let frozen: Vec<(ParamId, Tensor)> = model
        .params()
        .iter()
        .filter(|(_, g)| !g.trainable)
        .map(|(id, g)| (id, g.tensor.clone()))
        .collect();

    let adam = cfg.adam();
    let mut state = AdamState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut history = TrainHistory::default();
    let started = Instant::now();
    let n = data.len();
    for epoch in 0..cfg.epochs_calib {
        let order = index_stream(n, n, &mut rng);
        let mut sum = Components::default();
        let mut steps = 0;
        for idx in order.chunks(cfg.batch_size) {
            let chunk = Chunk {
                subject,
                domain: usize::MAX,
                data: data.select(idx),
            };
            let (c, grads) = calib_step(model, &chunk, cfg, rng.next_u64())?;
            if !c.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: steps,
                    detail: c.detail(),
                });
            }
            adam_step(model.params_mut(), &grads, &mut state, &adam)?;
            sum.accumulate(&c);
            steps += 1;
        }
        if hooks.inject_frozen_drift && epoch == 0 {
            if let Some((id, _)) = frozen.first() {
                let g = model.params_mut().get_mut(*id);
                g.tensor.data_mut()[0] += 1e-9;
            }
        }
        history.epochs.push(epoch_record("calibrate", epoch, steps, sum, false, cfg, &rng, started));
    }
    for (id, before) in &frozen {
        let g = model.params().get(*id);
        let same = g.tensor.data().iter().zip(before.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::FrozenDrift(g.name.clone()));
        }
    }
    let p = similarity(model, subject, &data.x)?;
    model.similarity.insert(subject.to_string(), p);
    history.elapsed = started.elapsed();
    Ok(history)
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.into_iter().map(|x| x / s).collect()
}

/// Domain-classifier logits of `subject`'s specific features.
pub fn domain_logits(model: &MindCrossModel, subject: &str, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference(model);
    let xv = g.input(x.clone());
    let s = g.specific(subject, xv)?;
    let logits = g.classify(model.dc_classifier, s)?;
    Ok(g.tape.value(logits).clone())
}

/// Softmax (temperature 1) of batch-mean logits: how much `subject`'s
/// specific features resemble each training subject.
pub fn similarity(model: &MindCrossModel, subject: &str, x: &Tensor) -> Result<Vec<f64>> {
    let logits = domain_logits(model, subject, x)?;
    let n = logits.cols();
    let mut mean = vec![0.0; n];
    for i in 0..logits.rows() {
        for (m, v) in mean.iter_mut().zip(logits.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= logits.rows() as f64);
    Ok(softmax(&mean))
}

/// Indices of the `k` largest entries of `p`, ties broken by lower index.
pub fn topk_indices(p: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > p.len() {
        return Err(Error::invalid(format!("K must be in [1, {}], got {k}", p.len())));
    }
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// `Σ_{k ∈ TopK(p)} p_k · pred(k)`, optionally with renormalized weights.
pub fn combine_topk(
    p: &[f64],
    k: usize,
    renormalize: bool,
    mut pred: impl FnMut(usize) -> Result<Tensor>,
) -> Result<Tensor> {
    let sel = topk_indices(p, k)?;
    let norm: f64 = if renormalize { sel.iter().map(|&i| p[i]).sum() } else { 1.0 };
    let mut acc: Option<Tensor> = None;
    for &i in &sel {
        let e = pred(i)?;
        let w = p[i] / norm;
        match acc.as_mut() {
            None => {
                let mut t = e;
                t.data_mut().iter_mut().for_each(|v| *v *= w);
                acc = Some(t);
            }
            Some(a) => {
                if a.shape() != e.shape() {
                    return Err(Error::shape("combine_topk", a.shape(), e.shape()));
                }
                for (x, y) in a.data_mut().iter_mut().zip(e.data()) {
                    *x += w * y;
                }
            }
        }
    }
    Ok(acc.expect("k >= 1"))
}

/// `ê = head(decoder(ResFuse_subject(E_subject(x), E_shared(x))))` in eval mode.
pub fn semantic(model: &MindCrossModel, subject: &str, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference(model);
    let xv = g.input(x.clone());
    let s = g.specific(subject, xv)?;
    let r = g.shared(xv)?;
    let e = g.semantic(subject, s, r)?;
    Ok(g.tape.value(e).clone())
}

/// Specific features of `x` under `subject`'s encoder.
pub fn specific_features(model: &MindCrossModel, subject: &str, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference(model);
    let xv = g.input(x.clone());
    let s = g.specific(subject, xv)?;
    Ok(g.tape.value(s).clone())
}

pub fn shared_features(model: &MindCrossModel, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference(model);
    let xv = g.input(x.clone());
    let r = g.shared(xv)?;
    Ok(g.tape.value(r).clone())
}

/// Routes `x` through the Top-K most similar training subjects' branches.
pub fn topk_collaborate(model: &MindCrossModel, x: &Tensor, p: &[f64], k: usize, renormalize: bool) -> Result<Tensor> {
    let n = model.domain_subjects().len();
    if p.len() != n {
        return Err(Error::shape("topk_collaborate", &[n], &[p.len()]));
    }
    let mut g = Graph::inference(model);
    let xv = g.input(x.clone());
    let r = g.shared(xv)?;
    combine_topk(p, k, renormalize, |i| {
        let subject = &model.domain_subjects()[i];
        let s = g.specific(subject, xv)?;
        let e = g.semantic(subject, s, r)?;
        Ok(g.tape.value(e).clone())
    })
}

/// `ê = ê^t + λ·ê_c`. Uses the similarity cached at calibration, or computes
/// it from `x` when none is cached. `λ = 0` returns the subject's own branch.
pub fn predict(model: &MindCrossModel, subject: &str, x: &Tensor, cfg: &RunConfig) -> Result<Tensor> {
    let mut e = semantic(model, subject, x)?;
    if cfg.lambda_collab == 0.0 {
        return Ok(e);
    }
    let p = match model.similarity.get(subject) {
        Some(p) => p.clone(),
        None => similarity(model, subject, x)?,
    };
    let ec = topk_collaborate(model, x, &p, cfg.top_k, cfg.renormalize_topk)?;
    for (a, b) in e.data_mut().iter_mut().zip(ec.data()) {
        *a += cfg.lambda_collab * b;
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn tiny_model(subjects: &[&str], seed: u64) -> MindCrossModel {
        let cfg = ModelConfig::new(6, 8, 3, subjects.iter().map(|s| s.to_string()).collect());
        MindCrossModel::build(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn toy_data(subjects: &[&str], n: usize, seed: u64) -> BTreeMap<String, SubjectData> {
        let ds = crate::data::generate_synthetic(&crate::data::SyntheticConfig {
            n_subjects: subjects.len(),
            n_classes: 4,
            trials_per_class: n / 4,
            in_dim: 6,
            embed_dim: 3,
            latent_dim: 3,
            seed,
            ..Default::default()
        })
        .unwrap();
        ds.by_subject()
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, (_, d))| (subjects[i].to_string(), d))
            .collect()
    }

    fn quick_cfg(epochs: usize) -> RunConfig {
        RunConfig {
            epochs_train: epochs.max(1),
            epochs_calib: epochs,
            batch_size: 16,
            learning_rate: 3e-3,
            ..RunConfig::default()
        }
    }

    #[test]
    fn default_config_matches_documented_values() {
        let c = RunConfig::default();
        assert_eq!((c.epochs_train, c.epochs_calib, c.batch_size, c.top_k), (1000, 200, 256, 1));
        assert_eq!((c.learning_rate, c.lambda_collab), (1e-3, 1e-2));
        c.validate().unwrap();
        let parsed: RunConfig = serde_json::from_str(r#"{"K": 2, "da_variant": "kl"}"#).unwrap();
        assert_eq!((parsed.top_k, parsed.da_variant), (2, DaVariant::Kl));
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
        assert!(RunConfig { batch_size: 1, ..c.clone() }.validate().is_err());
        assert!(RunConfig { lambda_collab: -1.0, ..c }.validate().is_err());
    }

    fn scalar_store(v: f64) -> (MindCrossModel, ParamId) {
        let model = tiny_model(&["a"], 0);
        let id = model.params().id_of("head/semantic/bias").unwrap();
        let mut model = model;
        model.params_mut().get_mut(id).tensor.data_mut()[0] = v;
        (model, id)
    }

    #[test]
    fn adam_constant_gradient_descends_monotonically() {
        let (mut model, id) = scalar_store(0.0);
        let mut state = AdamState::new(model.params());
        let cfg = RunConfig::default().adam();
        let mut last = 0.0;
        for _ in 0..50 {
            adam_step(model.params_mut(), &[(id, vec![1.0, 0.0, 0.0])], &mut state, &cfg).unwrap();
            let now = model.params().get(id).tensor.data()[0];
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn adam_first_step_is_lr_regardless_of_scale() {
        for g in [1e-6, 1.0, 1e6] {
            let (mut model, id) = scalar_store(0.0);
            let mut state = AdamState::new(model.params());
            let cfg = RunConfig::default().adam();
            adam_step(model.params_mut(), &[(id, vec![g, -g, 0.0])], &mut state, &cfg).unwrap();
            let d = model.params().get(id).tensor.data();
            // m̂ = g and v̂ = g², so the step is lr·g/(|g| + eps).
            let expected = cfg.lr * g / (g + cfg.eps);
            assert!((d[0] + expected).abs() < 1e-15, "{g}: {d:?}");
            assert!((d[1] - expected).abs() < 1e-15);
            assert_eq!(d[2], 0.0);
        }
    }

    #[test]
    fn adam_skips_frozen_groups() {
        let (mut model, id) = scalar_store(0.5);
        model.params_mut().get_mut(id).trainable = false;
        let before = model.params().get(id).tensor.clone();
        let mut state = AdamState::new(model.params());
        let cfg = RunConfig::default().adam();
        for _ in 0..1000 {
            adam_step(model.params_mut(), &[(id, vec![1.0, 1.0, 1.0])], &mut state, &cfg).unwrap();
        }
        assert_eq!(model.params().get(id).tensor, before);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let subjects = ["a", "b"];
        let data = toy_data(&subjects, 32, 1);
        let mut decreasing = 0;
        for seed in 0..5 {
            let cfg = RunConfig { seed, ..quick_cfg(5) };
            let mut m = tiny_model(&subjects, seed);
            let h = train(&mut m, &data, &cfg).unwrap();
            assert_eq!(h.epochs.len(), 5);
            if h.epochs.windows(2).all(|w| w[1].total < w[0].total) {
                decreasing += 1;
            }
            if seed == 0 {
                let mut m2 = tiny_model(&subjects, seed);
                let h2 = train(&mut m2, &data, &cfg).unwrap();
                assert_eq!(h.to_jsonl().unwrap(), h2.to_jsonl().unwrap());
                assert_eq!(m, m2);
            }
        }
        assert!(decreasing >= 4, "{decreasing}/5 seeds decreased");
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let subjects = ["a", "b"];
        let data = toy_data(&subjects, 16, 2);
        let mut m = tiny_model(&subjects, 3);
        let before = m.params().clone();
        let cfg = RunConfig {
            learning_rate: 0.0,
            ..quick_cfg(2)
        };
        train(&mut m, &data, &cfg).unwrap();
        for ((_, a), (_, b)) in m.params().iter().zip(before.iter()) {
            assert_eq!(a.tensor, b.tensor, "{}", a.name);
        }
    }

    #[test]
    fn all_variants_and_batch_modes_train() {
        let subjects = ["a", "b", "c"];
        let data = toy_data(&subjects, 16, 4);
        for (variant, mode) in [
            (DaVariant::Grl, BatchMode::Mixed),
            (DaVariant::Kl, BatchMode::PerSubject),
            (DaVariant::Lp, BatchMode::PerSubject),
        ] {
            let cfg = RunConfig {
                da_variant: variant,
                batch_mode: mode,
                ..quick_cfg(2)
            };
            let mut m = tiny_model(&subjects, 1);
            let kl_before = m.params().by_name("align/kl_projection/weight").unwrap().tensor.clone();
            let h = train(&mut m, &data, &cfg).unwrap();
            assert!(h.final_total().unwrap().is_finite());
            // 16 trials per subject in chunks of ceil(16 / 3) = 6: three mixed steps.
            assert_eq!(h.epochs[0].steps, 3, "{variant:?}");
            assert_eq!(m.params().by_name("align/kl_projection/weight").unwrap().tensor, kl_before);
        }
    }

    #[test]
    fn training_requires_every_subject() {
        let data = toy_data(&["a"], 16, 0);
        let mut m = tiny_model(&["a", "b"], 0);
        assert!(matches!(train(&mut m, &data, &quick_cfg(1)), Err(Error::EmptyDataset(_))));
    }

    fn calibrated(epochs: usize) -> (MindCrossModel, MindCrossModel, SubjectData, RunConfig) {
        let subjects = ["a", "b", "c"];
        let data = toy_data(&subjects, 16, 5);
        let mut m = tiny_model(&subjects, 2);
        let cfg = quick_cfg(epochs);
        train(&mut m, &data, &RunConfig { epochs_train: 2, ..cfg.clone() }).unwrap();
        m.add_new_subject("new", &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let before = m.clone();
        let new = toy_data(&["x", "y", "z", "new"], 40, 6).remove("new").unwrap();
        calibrate(&mut m, "new", &new, &cfg).unwrap();
        (before, m, new, cfg)
    }

    #[test]
    fn calibration_touches_only_the_new_branch() {
        let (before, after, new, cfg) = calibrated(5);
        let mut changed = 0;
        for ((_, a), (_, b)) in before.params().iter().zip(after.params().iter()) {
            if MindCrossModel::is_subject_param(&a.name, "new") {
                changed += usize::from(a.tensor != b.tensor);
            } else {
                assert_eq!(a.tensor, b.tensor, "{}", a.name);
            }
        }
        assert!(changed > 0);
        for s in ["a", "b", "c"] {
            assert_eq!(semantic(&before, s, &new.x).unwrap(), semantic(&after, s, &new.x).unwrap());
        }
        let p = &after.similarity["new"];
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(predict(&after, "new", &new.x, &cfg).unwrap().shape(), &[40, 3]);
    }

    #[test]
    fn calibration_loss_decreases_on_forty_samples() {
        let subjects = ["a", "b"];
        let data = toy_data(&subjects, 16, 5);
        let mut m = tiny_model(&subjects, 2);
        train(&mut m, &data, &quick_cfg(3)).unwrap();
        m.add_new_subject("new", &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let new = toy_data(&["x", "new"], 40, 7).remove("new").unwrap();
        let h = calibrate(&mut m, "new", &new, &quick_cfg(30)).unwrap();
        assert!(h.epochs.last().unwrap().total < h.epochs[0].total);
        assert!(h.epochs[0].dc.is_none());
    }

    #[test]
    fn zero_epoch_calibration_keeps_initialization() {
        let (before, after, _, _) = calibrated(0);
        for ((_, a), (_, b)) in before.params().iter().zip(after.params().iter()) {
            assert_eq!(a.tensor, b.tensor);
        }
    }

    #[test]
    fn drift_injection_is_caught() {
        let subjects = ["a", "b"];
        let data = toy_data(&subjects, 16, 5);
        let mut m = tiny_model(&subjects, 2);
        m.add_new_subject("new", &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let hooks = CalibrationHooks {
            inject_frozen_drift: true,
        };
        let r = calibrate_with_hooks(&mut m, "new", &data["a"], &quick_cfg(2), hooks);
        assert!(matches!(r, Err(Error::FrozenDrift(_))));
        assert!(calibrate(&mut m, "a", &data["a"], &quick_cfg(1)).is_err());
    }

    #[test]
    fn copy_init_clones_the_closest_branch() {
        let subjects = ["a", "b"];
        let data = toy_data(&subjects, 32, 6);
        let mut m = tiny_model(&subjects, 3);
        train(&mut m, &data, &quick_cfg(40)).unwrap();
        for s in subjects {
            assert_eq!(closest_subject(&m, &data[s], &quick_cfg(1)).unwrap(), s);
        }
        let cfg = RunConfig {
            new_subject_init: NewSubjectInit::CopyClosest,
            ..quick_cfg(1)
        };
        add_subject_for(&mut m, "new", &data["b"], &cfg).unwrap();
        let x = &data["a"].x;
        assert_eq!(semantic(&m, "new", x).unwrap(), semantic(&m, "b", x).unwrap());
        assert!(m.copy_branch("ghost", "new").is_err());

        let mut fresh = m.clone();
        add_subject_for(&mut fresh, "other", &data["b"], &quick_cfg(1)).unwrap();
        assert_ne!(semantic(&fresh, "other", x).unwrap(), semantic(&fresh, "b", x).unwrap());
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(softmax(&[0.3, 0.3, 0.3, 0.3]), vec![0.25; 4]);
        let p = softmax(&[2.0, 0.0, 0.0]);
        for (a, b) in p.iter().zip([0.7870, 0.1065, 0.1065]) {
            assert!((a - b).abs() < 1e-4);
        }
        let q = softmax(&[0.0, 2.0, 0.0]);
        assert_eq!((q[1], q[0]), (p[0], p[1]));
    }

    #[test]
    fn topk_hand_cases() {
        let vecs = [Tensor::vector(vec![1.0, 0.0]), Tensor::vector(vec![0.0, 1.0]), Tensor::vector(vec![5.0, 5.0])];
        let p = [0.7, 0.2, 0.1];
        let out = combine_topk(&p, 2, false, |i| Ok(vecs[i].clone())).unwrap();
        assert_eq!(out.data(), &[0.7, 0.2]);
        let one = combine_topk(&p, 1, false, |i| Ok(vecs[i].clone())).unwrap();
        assert_eq!(one.data(), &[0.7, 0.0]);
        let v = Tensor::vector(vec![0.25, -1.5]);
        let all = combine_topk(&[0.5, 0.25, 0.25], 3, false, |_| Ok(v.clone())).unwrap();
        assert!(all.max_abs_diff(&v) < 1e-15);
        let renorm = combine_topk(&p, 2, true, |i| Ok(vecs[i].clone())).unwrap();
        assert!((renorm.data()[0] - 0.7 / 0.9).abs() < 1e-15);
        assert_eq!(topk_indices(&[0.4, 0.4, 0.2], 1).unwrap(), vec![0]);
        assert!(topk_indices(&p, 0).is_err());
        assert!(topk_indices(&p, 4).is_err());
    }

    #[test]
    fn predict_lambda_zero_is_the_branch_and_continuity_holds() {
        let (_, m, new, cfg) = calibrated(2);
        let et = semantic(&m, "new", &new.x).unwrap();
        let zero = predict(&m, "new", &new.x, &RunConfig { lambda_collab: 0.0, ..cfg.clone() }).unwrap();
        assert_eq!(zero.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), et.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let lam = 1e-2;
        let with = predict(&m, "new", &new.x, &RunConfig { lambda_collab: lam, top_k: 2, ..cfg }).unwrap();
        let max_norm = ["a", "b", "c"]
            .iter()
            .map(|s| {
                let e = semantic(&m, s, &new.x).unwrap();
                (0..e.rows()).map(|i| e.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        for i in 0..with.rows() {
            let d: f64 = with.row(i).iter().zip(et.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(d <= lam * max_norm + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn topk_selection_is_nested(p in prop::collection::vec(0.0f64..1.0, 2..8)) {
            for k in 1..p.len() {
                let small = topk_indices(&p, k).unwrap();
                let big = topk_indices(&p, k + 1).unwrap();
                prop_assert!(small.iter().all(|i| big.contains(i)));
            }
        }

        #[test]
        fn similarity_softmax_is_equivariant(v in prop::collection::vec(-5.0f64..5.0, 2..6), rot in 0usize..6) {
            let n = v.len();
            let shifted: Vec<f64> = (0..n).map(|i| v[(i + rot) % n]).collect();
            let a = softmax(&v);
            let b = softmax(&shifted);
            for i in 0..n {
                prop_assert!((b[i] - a[(i + rot) % n]).abs() < 1e-15);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
