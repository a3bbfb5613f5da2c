//! Binary checkpoint: versioned header followed by little-endian f64 arrays
//! (parameters, EMA, Adam first and second moments). Training metadata goes
//! into a JSON sidecar next to the file (`<path>.json`).
//!
//! Layout:
//! ```text
//! magic "PDCK" | version u32
//! input_dim u32 | n_hidden u32 | hidden_dims u32 * n_hidden
//! output_channels u32 | time_embed_dim u32
//! activation u8 | parameterization u8 | schedule u8 | reserved u8
//! base_lr beta1 beta2 eps ema_decay clip_norm weight_decay lr : f64
//! step u64 | n_params u64
//! params f64 * n | ema f64 * n | m f64 * n | v f64 * n
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Activation, MlpConfig, Model, OptState, OptimizerSettings};
use crate::diffusion::Parameterization;
use crate::error::{Error, Result};
use crate::schedule::ScheduleKind;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Contents of the JSON sidecar.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    /// "base" or "distilled".
    pub kind: String,
    pub parameterization: Option<Parameterization>,
    pub loss_weighting: Option<crate::diffusion::LossWeighting>,
    pub dataset: Option<serde_json::Value>,
    /// Sampling steps this model was distilled for.
    pub n_steps: Option<usize>,
    pub teacher_hash: Option<String>,
    pub base_hash: Option<String>,
    pub updates: u64,
    pub seed: u64,
    pub final_loss: Option<f64>,
    pub extra: Option<serde_json::Value>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or("truncated file")?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(8).ok_or("length overflow")?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.config();
        let s = &self.opt.settings;
        let n = self.params.len();
        let mut out = Vec::with_capacity(96 + 32 * n);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(c.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(c.hidden_dims.len() as u32).to_le_bytes());
        for &h in &c.hidden_dims {
            out.extend_from_slice(&(h as u32).to_le_bytes());
        }
        out.extend_from_slice(&(c.output_channels as u32).to_le_bytes());
        out.extend_from_slice(&(c.time_embed_dim as u32).to_le_bytes());
        out.extend_from_slice(&[
            c.activation.tag(),
            self.parameterization.tag(),
            self.schedule.tag(),
            0,
        ]);
        for v in [
            s.base_lr,
            s.beta1,
            s.beta2,
            s.eps,
            s.ema_decay,
            s.clip_norm,
            s.weight_decay,
            self.opt.lr,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.opt.step.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for arr in [&self.params, &self.opt.ema, &self.opt.m, &self.opt.v] {
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let input_dim = r.u32()? as usize;
        let n_hidden = r.u32()? as usize;
        if n_hidden > 1024 {
            return Err(format!("implausible hidden layer count {n_hidden}"));
        }
        let hidden_dims = (0..n_hidden)
            .map(|_| r.u32().map(|h| h as usize))
            .collect::<std::result::Result<_, _>>()?;
        let output_channels = r.u32()? as usize;
        let time_embed_dim = r.u32()? as usize;
        let tags = r.take(4)?;
        let activation = Activation::from_tag(tags[0]).ok_or("unknown activation tag")?;
        let parameterization =
            Parameterization::from_tag(tags[1]).ok_or("unknown parameterization tag")?;
        let schedule = ScheduleKind::from_tag(tags[2]).ok_or("unknown schedule tag")?;
        let settings = OptimizerSettings {
            base_lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
            ema_decay: r.f64()?,
            clip_norm: r.f64()?,
            weight_decay: r.f64()?,
        };
        let lr = r.f64()?;
        let step = r.u64()?;
        let n = r.u64()? as usize;
        let params = r.f64s(n)?;
        let ema = r.f64s(n)?;
        let m = r.f64s(n)?;
        let v = r.f64s(n)?;
        if r.pos != bytes.len() {
            return Err("trailing bytes".into());
        }
        let config = MlpConfig {
            input_dim,
            hidden_dims,
            output_channels,
            time_embed_dim,
            activation,
        };
        let opt = OptState {
            settings,
            lr,
            step,
            m,
            v,
            ema,
        };
        Model::from_parts(config, parameterization, schedule, params, opt)
            .map_err(|e| e.to_string())
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Write the checkpoint and, when given, its JSON sidecar.
    pub fn save(&self, path: &Path, meta: Option<&CheckpointMeta>) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        if let Some(meta) = meta {
            let mut json = serde_json::to_string_pretty(meta)?;
            json.push('\n');
            std::fs::write(sidecar_path(path), json)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint {
            path: path.to_owned(),
            reason: e.to_string(),
        })?;
        Model::from_bytes(&bytes).map_err(|reason| Error::Checkpoint {
            path: path.to_owned(),
            reason,
        })
    }

    /// Sidecar metadata, if present.
    pub fn load_meta(path: &Path) -> Result<Option<CheckpointMeta>> {
        let side = sidecar_path(path);
        if !side.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&std::fs::read_to_string(side)?)?))
    }
}
