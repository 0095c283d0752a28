//! The cross-subject network: per-subject specific branches, a shared
//! encoder/reconstructer, residual fusion, a shared decoder and two domain
//! classifiers.
//!
//! Parameters live in a flat [`ParamStore`] of named groups. Forward passes
//! are recorded on a fresh [`Graph`] per step, which binds each parameter as a
//! tape leaf on first use.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SHARED: &str = "shared";
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn default_dropout() -> f64 {
    0.15
}

fn default_grl_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input feature length `m` (310 for 62-channel, 5-band DE features).
    pub in_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    /// Training subjects, in domain-classifier label order.
    pub subjects: Vec<String>,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
    #[serde(default = "default_grl_scale")]
    pub grl_scale: f64,
}

impl ModelConfig {
    pub fn new(in_dim: usize, hidden: usize, embed_dim: usize, subjects: Vec<String>) -> Self {
        ModelConfig {
            in_dim,
            hidden,
            embed_dim,
            subjects,
            dropout_p: default_dropout(),
            grl_scale: default_grl_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("in_dim", self.in_dim), ("hidden", self.hidden), ("embed_dim", self.embed_dim)] {
            if v == 0 {
                return Err(Error::validation(field, "must be >= 1"));
            }
        }
        if self.subjects.is_empty() {
            return Err(Error::validation("subjects", "must not be empty"));
        }
        for (i, s) in self.subjects.iter().enumerate() {
            validate_subject_id(s)?;
            if self.subjects[..i].contains(s) {
                return Err(Error::validation("subjects", format!("duplicate subject `{s}`")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::validation("dropout_p", "must be in [0, 1)"));
        }
        if !(self.grl_scale > 0.0) {
            return Err(Error::validation("grl_scale", "must be > 0"));
        }
        Ok(())
    }
}

fn validate_subject_id(id: &str) -> Result<()> {
    if id.is_empty() || id == SHARED || id.contains('/') {
        return Err(Error::validation(
            "subjects",
            format!("invalid subject id `{id}` (empty, reserved, or contains '/')"),
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in creation order.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameter tensors, in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    groups: Vec<ParamGroup>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    fn insert(&mut self, name: String, tensor: Tensor) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        self.index.insert(name.clone(), self.groups.len());
        self.groups.push(ParamGroup {
            name,
            tensor,
            trainable: true,
        });
        ParamId(self.groups.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamGroup {
        &self.groups[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamGroup {
        &mut self.groups[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamGroup> {
        self.index.get(name).map(|&i| &self.groups[i])
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamGroup)> {
        self.groups.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamGroup> {
        self.groups.iter_mut()
    }

    pub fn total_elements(&self) -> usize {
        self.groups.iter().map(|g| g.tensor.len()).sum()
    }

    pub fn trainable_elements(&self) -> usize {
        self.groups.iter().filter(|g| g.trainable).map(|g| g.tensor.len()).sum()
    }

    /// Elements of every group whose name starts with `prefix`.
    pub fn elements_with_prefix(&self, prefix: &str) -> usize {
        self.groups
            .iter()
            .filter(|g| g.name.starts_with(prefix))
            .map(|g| g.tensor.len())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// `[linear m→h, LN, GELU, linear h→h, LN, GELU]`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Encoder {
    pub layer0: Linear,
    pub norm0: Norm,
    pub layer1: Linear,
    pub norm1: Norm,
}

/// `[linear h→m, LN(m), GELU, linear m→m]`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reconstructer {
    pub layer0: Linear,
    pub norm0: Norm,
    pub layer1: Linear,
}

/// `f(concat(s, r)) + r` with `f = [linear 2h→h, LN, GELU, dropout]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResFuse {
    pub proj: Linear,
    pub norm: Norm,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderBlock {
    pub linear: Linear,
    pub norm: Norm,
}

/// `[linear h→h, GELU, linear h→N]`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainClassifier {
    pub layer0: Linear,
    pub layer1: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubjectBranch {
    pub encoder: Encoder,
    pub reconstructer: Reconstructer,
    pub fuser: ResFuse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MindCrossModel {
    config: ModelConfig,
    params: ParamStore,
    /// Training subjects first (domain-label order), then calibrated ones.
    branches: Vec<(String, SubjectBranch)>,
    pub shared_encoder: Encoder,
    pub shared_reconstructer: Reconstructer,
    pub decoder: [DecoderBlock; 2],
    pub head_semantic: Linear,
    pub dc_classifier: DomainClassifier,
    pub da_classifier: DomainClassifier,
    /// Linear projection used by the KL alignment variant.
    pub kl_projection: Linear,
    /// Similarity vectors over training subjects, cached per calibrated subject.
    pub similarity: BTreeMap<String, Vec<f64>>,
}

struct Builder<'a, R: Rng> {
    params: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        Linear {
            weight: self
                .params
                .insert(format!("{prefix}/weight"), Tensor::new(vec![fan_in, fan_out], w).unwrap()),
            bias: self.params.insert(format!("{prefix}/bias"), Tensor::zeros(vec![fan_out])),
        }
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> Norm {
        Norm {
            gain: self.params.insert(format!("{prefix}/gain"), Tensor::filled(vec![dim], 1.0)),
            bias: self.params.insert(format!("{prefix}/bias"), Tensor::zeros(vec![dim])),
        }
    }

    fn encoder(&mut self, who: &str, m: usize, h: usize) -> Encoder {
        Encoder {
            layer0: self.linear(&format!("encoder/{who}/layer0"), m, h),
            norm0: self.norm(&format!("encoder/{who}/norm0"), h),
            layer1: self.linear(&format!("encoder/{who}/layer1"), h, h),
            norm1: self.norm(&format!("encoder/{who}/norm1"), h),
        }
    }

    fn reconstructer(&mut self, who: &str, m: usize, h: usize) -> Reconstructer {
        Reconstructer {
            layer0: self.linear(&format!("reconstructer/{who}/layer0"), h, m),
            norm0: self.norm(&format!("reconstructer/{who}/norm0"), m),
            layer1: self.linear(&format!("reconstructer/{who}/layer1"), m, m),
        }
    }

    fn fuser(&mut self, who: &str, h: usize) -> ResFuse {
        ResFuse {
            proj: self.linear(&format!("fuse/{who}/proj"), 2 * h, h),
            norm: self.norm(&format!("fuse/{who}/norm"), h),
        }
    }

    fn branch(&mut self, who: &str, m: usize, h: usize) -> SubjectBranch {
        SubjectBranch {
            encoder: self.encoder(who, m, h),
            reconstructer: self.reconstructer(who, m, h),
            fuser: self.fuser(who, h),
        }
    }

    fn classifier(&mut self, who: &str, h: usize, n: usize) -> DomainClassifier {
        DomainClassifier {
            layer0: self.linear(&format!("{who}/layer0"), h, h),
            layer1: self.linear(&format!("{who}/layer1"), h, n),
        }
    }
}

impl MindCrossModel {
    pub fn build<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (m, h, d, n) = (config.in_dim, config.hidden, config.embed_dim, config.subjects.len());
        let mut params = ParamStore::default();
        let mut b = Builder {
            params: &mut params,
            rng,
        };
        let branches: Vec<(String, SubjectBranch)> = config
            .subjects
            .iter()
            .map(|s| (s.clone(), b.branch(s, m, h)))
            .collect();
        let shared_encoder = b.encoder(SHARED, m, h);
        let shared_reconstructer = b.reconstructer(SHARED, m, h);
        let decoder = [0, 1].map(|k| DecoderBlock {
            linear: b.linear(&format!("decoder/block{k}/linear"), h, h),
            norm: b.norm(&format!("decoder/block{k}/norm"), h),
        });
        let head_semantic = b.linear("head/semantic", h, d);
        let dc_classifier = b.classifier("dc", h, n);
        let da_classifier = b.classifier("da", h, n);
        let kl_projection = b.linear("align/kl_projection", h, n);
        Ok(MindCrossModel {
            config,
            params,
            branches,
            shared_encoder,
            shared_reconstructer,
            decoder,
            head_semantic,
            dc_classifier,
            da_classifier,
            kl_projection,
            similarity: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Training subjects, i.e. the domain-classifier classes.
    pub fn domain_subjects(&self) -> &[String] {
        &self.config.subjects
    }

    pub fn domain_index(&self, subject: &str) -> Option<usize> {
        self.config.subjects.iter().position(|s| s == subject)
    }

    /// Every subject with a specific branch, training subjects first.
    pub fn subjects(&self) -> impl Iterator<Item = &str> {
        self.branches.iter().map(|(s, _)| s.as_str())
    }

    pub fn has_subject(&self, subject: &str) -> bool {
        self.branches.iter().any(|(s, _)| s == subject)
    }

    pub fn branch(&self, subject: &str) -> Result<&SubjectBranch> {
        self.branches
            .iter()
            .find(|(s, _)| s == subject)
            .map(|(_, b)| b)
            .ok_or_else(|| Error::UnknownSubject(subject.to_string()))
    }

    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params.trainable_elements()
    }

    /// Adds a freshly initialized specific encoder, reconstructer and fuser.
    pub fn add_new_subject<R: Rng>(&mut self, id: &str, rng: &mut R) -> Result<()> {
        validate_subject_id(id)?;
        if self.has_subject(id) {
            return Err(Error::DuplicateSubject(id.to_string()));
        }
        let (m, h) = (self.config.in_dim, self.config.hidden);
        let mut b = Builder {
            params: &mut self.params,
            rng,
        };
        let branch = b.branch(id, m, h);
        self.branches.push((id.to_string(), branch));
        Ok(())
    }

    /// Overwrites `to`'s branch weights with a copy of `from`'s.
    pub fn copy_branch(&mut self, from: &str, to: &str) -> Result<()> {
        self.branch(from)?;
        self.branch(to)?;
        let copies: Vec<(usize, Tensor)> = Self::subject_prefixes(to)
            .iter()
            .zip(Self::subject_prefixes(from))
            .flat_map(|(dst, src)| {
                self.params
                    .iter()
                    .filter(|(_, g)| g.name.starts_with(dst.as_str()))
                    .map(|(id, g)| (id.0, format!("{src}{}", &g.name[dst.len()..])))
                    .collect::<Vec<_>>()
            })
            .map(|(id, src)| {
                let t = self.params.by_name(&src).expect("branches share a layout").tensor.clone();
                (id, t)
            })
            .collect();
        for (id, t) in copies {
            self.params.get_mut(ParamId(id)).tensor = t;
        }
        Ok(())
    }

    /// Sets every group's trainable flag from `predicate(name)` and returns
    /// the number of trainable scalar parameters.
    pub fn set_trainable(&mut self, predicate: impl Fn(&str) -> bool) -> usize {
        for g in self.params.iter_mut() {
            g.trainable = predicate(&g.name);
        }
        self.trainable_param_count()
    }

    /// Name prefixes of the groups owned by one subject's specific branch.
    pub fn subject_prefixes(subject: &str) -> [String; 3] {
        [
            format!("encoder/{subject}/"),
            format!("reconstructer/{subject}/"),
            format!("fuse/{subject}/"),
        ]
    }

    pub fn is_subject_param(name: &str, subject: &str) -> bool {
        Self::subject_prefixes(subject).iter().any(|p| name.starts_with(p))
    }

    /// Reassembles a model from checkpointed groups. Groups are matched by
    /// name against a fresh build; `extra_subjects` are re-added in order.
    pub(crate) fn from_groups(
        config: ModelConfig,
        extra_subjects: &[String],
        groups: Vec<ParamGroup>,
        similarity: BTreeMap<String, Vec<f64>>,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = MindCrossModel::build(config, &mut rng)?;
        for s in extra_subjects {
            model.add_new_subject(s, &mut rng)?;
        }
        if groups.len() != model.params.len() {
            return Err(Error::Header(format!(
                "checkpoint has {} parameter groups, architecture expects {}",
                groups.len(),
                model.params.len()
            )));
        }
        for g in groups {
            let id = model
                .params
                .id_of(&g.name)
                .ok_or_else(|| Error::Header(format!("unexpected parameter group `{}`", g.name)))?;
            let slot = model.params.get_mut(id);
            if slot.tensor.shape() != g.tensor.shape() {
                return Err(Error::shape("checkpoint", slot.tensor.shape(), g.tensor.shape()));
            }
            *slot = g;
        }
        model.similarity = similarity;
        Ok(model)
    }

    /// Subjects that were added after construction, in order.
    pub fn extra_subjects(&self) -> Vec<String> {
        self.branches[self.config.subjects.len()..]
            .iter()
            .map(|(s, _)| s.clone())
            .collect()
    }
}

/// Output of a forward pass over one or more subject groups, rows
/// concatenated in group order.
#[derive(Clone, Copy, Debug)]
pub struct CoreOutputs {
    pub s: Var,
    pub r: Var,
    pub x_hat_s: Var,
    pub x_hat_r: Var,
    pub e_hat: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainOutputs {
    pub core: CoreOutputs,
    pub dc_logits: Var,
    pub da_logits: Var,
}

/// One forward/backward pass over a model.
pub struct Graph<'m> {
    pub tape: Tape,
    model: &'m MindCrossModel,
    bound: Vec<Option<Var>>,
    track_grads: bool,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'m> Graph<'m> {
    /// Training mode: dropout active, trainable parameters tracked.
    pub fn train(model: &'m MindCrossModel, dropout_seed: u64) -> Self {
        Graph {
            tape: Tape::new(),
            model,
            bound: vec![None; model.params.len()],
            track_grads: true,
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
        }
    }

    /// Eval mode with gradients (dropout is the identity).
    pub fn eval_with_grads(model: &'m MindCrossModel) -> Self {
        Graph {
            tape: Tape::new(),
            model,
            bound: vec![None; model.params.len()],
            track_grads: true,
            dropout_rng: None,
        }
    }

    /// Eval mode, every parameter a constant.
    pub fn inference(model: &'m MindCrossModel) -> Self {
        Graph {
            tape: Tape::new(),
            model,
            bound: vec![None; model.params.len()],
            track_grads: false,
            dropout_rng: None,
        }
    }

    pub fn model(&self) -> &'m MindCrossModel {
        self.model
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let g = self.model.params.get(id);
        let v = self.tape.leaf(g.tensor.clone(), self.track_grads && g.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable parameter, moved out of the tape.
    pub fn param_grads(&mut self) -> Vec<(ParamId, Vec<f64>)> {
        let tape = &mut self.tape;
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| tape.take_grad((*v)?).map(|g| (ParamId(i), g)))
            .collect()
    }

    pub fn input(&mut self, x: Tensor) -> Var {
        self.tape.constant(x)
    }

    pub fn linear(&mut self, l: Linear, x: Var) -> Result<Var> {
        let w = self.param(l.weight);
        let b = self.param(l.bias);
        self.tape.affine(x, w, b)
    }

    pub fn norm(&mut self, n: Norm, x: Var) -> Result<Var> {
        let g = self.param(n.gain);
        let b = self.param(n.bias);
        self.tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.model.config.dropout_p;
        match self.dropout_rng.as_mut() {
            Some(rng) => self.tape.dropout(x, p, true, rng),
            None => Ok(x),
        }
    }

    pub fn encoder(&mut self, e: Encoder, x: Var) -> Result<Var> {
        let y = self.linear(e.layer0, x)?;
        let y = self.norm(e.norm0, y)?;
        let y = self.tape.gelu(y);
        let y = self.linear(e.layer1, y)?;
        let y = self.norm(e.norm1, y)?;
        Ok(self.tape.gelu(y))
    }

    pub fn reconstructer(&mut self, r: Reconstructer, x: Var) -> Result<Var> {
        let y = self.linear(r.layer0, x)?;
        let y = self.norm(r.norm0, y)?;
        let y = self.tape.gelu(y);
        self.linear(r.layer1, y)
    }

    pub fn fuse(&mut self, f: ResFuse, s: Var, r: Var) -> Result<Var> {
        let c = self.tape.concat_last(s, r)?;
        let y = self.linear(f.proj, c)?;
        let y = self.norm(f.norm, y)?;
        let y = self.tape.gelu(y);
        let y = self.dropout(y)?;
        self.tape.add(y, r)
    }

    /// Shared decoder (two residual blocks) followed by the semantic head.
    pub fn decode(&mut self, z: Var) -> Result<Var> {
        let mut z = z;
        for block in self.model.decoder {
            let y = self.linear(block.linear, z)?;
            let y = self.norm(block.norm, y)?;
            let y = self.tape.gelu(y);
            let y = self.dropout(y)?;
            z = self.tape.add(z, y)?;
        }
        self.linear(self.model.head_semantic, z)
    }

    pub fn classify(&mut self, c: DomainClassifier, x: Var) -> Result<Var> {
        let y = self.linear(c.layer0, x)?;
        let y = self.tape.gelu(y);
        self.linear(c.layer1, y)
    }

    /// Specific feature `s` of `x` under `subject`'s encoder.
    pub fn specific(&mut self, subject: &str, x: Var) -> Result<Var> {
        let branch = *self.model.branch(subject)?;
        self.encoder(branch.encoder, x)
    }

    pub fn shared(&mut self, x: Var) -> Result<Var> {
        self.encoder(self.model.shared_encoder, x)
    }

    /// `ê = head(decoder(ResFuse_subject(s, r)))`.
    pub fn semantic(&mut self, subject: &str, s: Var, r: Var) -> Result<Var> {
        let branch = *self.model.branch(subject)?;
        let z = self.fuse(branch.fuser, s, r)?;
        self.decode(z)
    }

    /// Specific/shared features, reconstructions and semantic prediction for
    /// each `(subject, x)` group; outputs are row-concatenated. Shared
    /// modules run once over all rows, subject modules once per group.
    pub fn forward_core(&mut self, groups: &[(&str, Var)]) -> Result<CoreOutputs> {
        let xs: Vec<Var> = groups.iter().map(|g| g.1).collect();
        let x = self.join(&xs)?;
        let r = self.shared(x)?;
        let x_hat_r = self.reconstructer(self.model.shared_reconstructer, r)?;
        let (mut s_parts, mut rec_parts, mut z_parts) = (Vec::new(), Vec::new(), Vec::new());
        let mut start = 0;
        for &(subject, xg) in groups {
            let branch = *self.model.branch(subject)?;
            let end = start + self.tape.shape(xg)[0];
            let rg = if groups.len() == 1 { r } else { self.tape.slice_rows(r, start, end)? };
            let s = self.encoder(branch.encoder, xg)?;
            rec_parts.push(self.reconstructer(branch.reconstructer, s)?);
            z_parts.push(self.fuse(branch.fuser, s, rg)?);
            s_parts.push(s);
            start = end;
        }
        let z = self.join(&z_parts)?;
        let e_hat = self.decode(z)?;
        Ok(CoreOutputs {
            s: self.join(&s_parts)?,
            r,
            x_hat_s: self.join(&rec_parts)?,
            x_hat_r,
            e_hat,
        })
    }

    fn join(&mut self, parts: &[Var]) -> Result<Var> {
        match parts {
            [single] => Ok(*single),
            _ => self.tape.concat_rows(parts),
        }
    }

    /// [`Graph::forward_core`] plus both domain-classifier heads; the
    /// alignment classifier sees `r` through a gradient-reversal node.
    pub fn forward_train(&mut self, groups: &[(&str, Var)]) -> Result<TrainOutputs> {
        let core = self.forward_core(groups)?;
        let dc_logits = self.classify(self.model.dc_classifier, core.s)?;
        let reversed = self.tape.grad_reverse(core.r, self.model.config.grl_scale)?;
        let da_logits = self.classify(self.model.da_classifier, reversed)?;
        Ok(TrainOutputs {
            core,
            dc_logits,
            da_logits,
        })
    }
}
