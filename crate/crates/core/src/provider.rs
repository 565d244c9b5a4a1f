//! Part-mask sources.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};
use crate::synth::{record_seed, NoiseConfig, SceneSpec};
use crate::types::PartMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    File,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskProviderConfig {
    pub backend: Backend,
    pub masks_dir: Option<PathBuf>,
    pub seed: u64,
}

impl MaskProviderConfig {
    pub fn file(dir: impl Into<PathBuf>) -> Self {
        Self {
            backend: Backend::File,
            masks_dir: Some(dir.into()),
            seed: 0,
        }
    }

    pub fn synthetic(seed: u64) -> Self {
        Self {
            backend: Backend::Synthetic,
            masks_dir: None,
            seed,
        }
    }
}

/// Read-only after construction; safe to share across threads.
#[derive(Clone, Debug)]
pub struct MaskProvider {
    cfg: MaskProviderConfig,
}

/// Canvas used by the synthetic backend when the request is not a valid
/// scene size.
const FALLBACK_CANVAS: usize = 64;

impl MaskProvider {
    pub fn new(cfg: MaskProviderConfig) -> Result<Self> {
        if cfg.backend == Backend::File {
            let dir = cfg
                .masks_dir
                .as_deref()
                .ok_or_else(|| Error::InvalidConfig("file mask backend needs a masks directory".into()))?;
            if !dir.is_dir() {
                return Err(Error::MissingDirectory(dir.to_path_buf()));
            }
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &MaskProviderConfig {
        &self.cfg
    }

    /// Part mask for `image_id` at `h x w`, nearest-neighbor resized when
    /// stored at another size.
    pub fn get_parts(&self, image_id: &str, h: usize, w: usize) -> Result<PartMask> {
        let mask = match self.cfg.backend {
            Backend::File => {
                let dir = self.cfg.masks_dir.as_deref().expect("checked in new");
                let path = mask_path(dir, image_id);
                if !path.is_file() {
                    return Err(Error::MissingMask {
                        stem: image_id.to_string(),
                        dir: dir.to_path_buf(),
                    });
                }
                codec::load_part_mask(&path)?
            }
            Backend::Synthetic => {
                let canvas = if h == w && h >= 16 && h.is_multiple_of(8) {
                    h
                } else {
                    FALLBACK_CANVAS
                };
                let spec = SceneSpec::random(record_seed(self.cfg.seed, image_id), canvas, &NoiseConfig::none())?;
                crate::synth::generate_scene(&spec)?.parts
            }
        };
        if (mask.height(), mask.width()) == (h, w) {
            Ok(mask)
        } else {
            mask.resized(h, w)
        }
    }
}

pub fn mask_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.png"))
}
