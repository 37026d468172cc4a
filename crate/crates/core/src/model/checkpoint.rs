use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{AdapterSpec, BackboneConfig};
use super::transformer::{attach_adapter, AdaptedModel, Backbone};
use crate::error::{Error, Result};
use crate::io::{atomic_with, atomic_write, read_to_string};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone: BackboneConfig,
    pub adapter: AdapterSpec,
    /// Checksum of the backbone weights this adapter was trained against.
    pub frozen_checksum: String,
    /// Checksum of the untouched backbone, differs from `frozen_checksum`
    /// only after full fine-tuning.
    pub origin_checksum: String,
    pub backbone_trained: bool,
    pub adapter_checksum: String,
    pub step: usize,
    pub epoch: usize,
}

/// Paths written for one checkpoint stem.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointFiles {
    pub meta: PathBuf,
    pub adapter: PathBuf,
    pub backbone: Option<PathBuf>,
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut name = stem.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    stem.with_file_name(name)
}

impl CheckpointFiles {
    pub fn for_stem(stem: &Path, with_backbone: bool) -> Self {
        Self {
            meta: with_suffix(stem, ".json"),
            adapter: with_suffix(stem, ".adapter.safetensors"),
            backbone: with_backbone.then(|| with_suffix(stem, ".backbone.safetensors")),
        }
    }

    pub fn all(&self) -> Vec<&Path> {
        let mut v = vec![self.meta.as_path(), self.adapter.as_path()];
        v.extend(self.backbone.as_deref());
        v
    }
}

pub fn save_checkpoint(
    model: &AdaptedModel,
    origin_checksum: &str,
    step: usize,
    epoch: usize,
    stem: &Path,
) -> Result<CheckpointFiles> {
    let files = CheckpointFiles::for_stem(stem, model.backbone_trainable());
    atomic_with(&files.adapter, |tmp| model.adapter_store().save(tmp))?;
    if let Some(path) = &files.backbone {
        atomic_with(path, |tmp| model.backbone().store().save(tmp))?;
    }
    let meta = CheckpointMeta {
        backbone: model.config().clone(),
        adapter: model.spec().clone(),
        frozen_checksum: model.backbone().checksum()?,
        origin_checksum: origin_checksum.to_string(),
        backbone_trained: model.backbone_trainable(),
        adapter_checksum: model.adapter_store().checksum()?,
        step,
        epoch,
    };
    atomic_write(&files.meta, serde_json::to_string_pretty(&meta)?.as_bytes())?;
    Ok(files)
}

pub fn read_checkpoint_meta(stem: &Path) -> Result<CheckpointMeta> {
    let path = with_suffix(stem, ".json");
    if !path.exists() {
        return Err(Error::MissingArtifact { path, producer: "train-adapter".into() });
    }
    Ok(serde_json::from_str(&read_to_string(&path)?)?)
}

/// Rebuilds the named backbone, verifies its checksum, and loads the adapter.
pub fn load_checkpoint(stem: &Path) -> Result<AdaptedModel> {
    let meta = read_checkpoint_meta(stem)?;
    let files = CheckpointFiles::for_stem(stem, meta.backbone_trained);
    let backbone = Backbone::new(&meta.backbone)?;
    let origin = backbone.checksum()?;
    if origin != meta.origin_checksum {
        return Err(Error::Integrity(format!(
            "backbone checksum {origin} does not match the checkpoint's {}",
            meta.origin_checksum
        )));
    }
    let (mut model, _) = attach_adapter(backbone, &meta.adapter)?;
    model.adapter_store_mut().load_values(&files.adapter)?;
    if let Some(path) = &files.backbone {
        model.backbone_store_mut().load_values(path)?;
    }
    let frozen = model.backbone().checksum()?;
    if frozen != meta.frozen_checksum {
        return Err(Error::Integrity(format!(
            "loaded backbone checksum {frozen} differs from recorded {}",
            meta.frozen_checksum
        )));
    }
    if model.adapter_store().checksum()? != meta.adapter_checksum {
        return Err(Error::Integrity(format!("{} is corrupted", files.adapter.display())));
    }
    Ok(model)
}
