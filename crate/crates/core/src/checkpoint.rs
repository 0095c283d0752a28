//! Model checkpoints in the `MCDS1` container: a JSON header listing every
//! parameter group, followed by the group values in header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{read_container, write_container, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::model::{MindCrossModel, ModelConfig, ParamGroup};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GroupMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    kind: String,
    config_digest: String,
    model_config: ModelConfig,
    /// Effective run configuration, echoed for auditing.
    run_config: serde_json::Value,
    extra_subjects: Vec<String>,
    similarity: BTreeMap<String, Vec<f64>>,
    groups: Vec<GroupMeta>,
}

/// SHA-256 over the canonical JSON of both configurations.
pub fn config_digest(model: &ModelConfig, run: &serde_json::Value) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model)?);
    h.update(b"\n");
    h.update(serde_json::to_vec(run)?);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn save_checkpoint(path: &Path, model: &MindCrossModel, run_config: &serde_json::Value) -> Result<()> {
    let groups: Vec<GroupMeta> = model
        .params()
        .iter()
        .map(|(_, g)| GroupMeta {
            name: g.name.clone(),
            shape: g.tensor.shape().to_vec(),
            trainable: g.trainable,
        })
        .collect();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        kind: "checkpoint".into(),
        config_digest: config_digest(model.config(), run_config)?,
        model_config: model.config().clone(),
        run_config: run_config.clone(),
        extra_subjects: model.extra_subjects(),
        similarity: model.similarity.clone(),
        groups,
    };
    let mut payload = Vec::with_capacity(model.param_count());
    for (_, g) in model.params().iter() {
        payload.extend_from_slice(g.tensor.data());
    }
    write_container(path, &header, &payload)
}

/// A loaded model and the run configuration it was saved with.
pub struct Checkpoint {
    pub model: MindCrossModel,
    pub run_config: serde_json::Value,
    pub config_digest: String,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let raw = read_container(path)?;
    let h: CheckpointHeader = raw.header_as()?;
    if h.kind != "checkpoint" {
        return Err(Error::Header(format!("expected a checkpoint, found `{}`", h.kind)));
    }
    if config_digest(&h.model_config, &h.run_config)? != h.config_digest {
        return Err(Error::Header("config digest does not match the stored configuration".into()));
    }
    let sizes: Vec<usize> = h.groups.iter().map(|g| g.shape.iter().product()).collect();
    let values = raw.values(sizes.iter().sum::<usize>() as u64)?;
    let mut offset = 0;
    let mut groups = Vec::with_capacity(h.groups.len());
    for (meta, n) in h.groups.into_iter().zip(sizes) {
        let tensor = Tensor::new(meta.shape, values[offset..offset + n].to_vec())
            .map_err(|e| Error::Header(format!("group `{}`: {e}", meta.name)))?;
        offset += n;
        groups.push(ParamGroup {
            name: meta.name,
            tensor,
            trainable: meta.trainable,
        });
    }
    let model = MindCrossModel::from_groups(h.model_config, &h.extra_subjects, groups, h.similarity)?;
    Ok(Checkpoint {
        model,
        run_config: h.run_config,
        config_digest: h.config_digest,
    })
}
