//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `PHNMCKPT`, a little-endian `u32` header length,
//! a UTF-8 JSON header, then the payload: every tensor as row-major
//! little-endian `f32`, at the byte offset (from payload start) given in the
//! header's tensor list. Optimizer moments of a resumable checkpoint are
//! stored as extra tensors named `optim.m/<param>` and `optim.v/<param>`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ca_mae::CaMaeModel;
use crate::error::{Error, Result};
use crate::mae::{MaeModel, WslModel};
use crate::nn::{Mat, ParamStore};
use crate::trainer::{LossCurve, OptimizerKind, OptimizerState, TrainConfig, TrainingState};
use crate::vit::ViTConfig;

pub const MAGIC: &[u8; 8] = b"PHNMCKPT";
pub const SCHEMA: &str = "phenom-checkpoint/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mae,
    CaMae,
    Wsl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainingHeader {
    config: TrainConfig,
    step: usize,
    epoch: usize,
    optimizer: OptimizerKind,
    optimizer_t: u64,
    curve: LossCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema: String,
    pub kind: ModelKind,
    pub config: ViTConfig,
    pub channel_agnostic: bool,
    #[serde(default)]
    pub n_classes: Option<usize>,
    /// Parameter-name prefixes of the per-channel decoders (CA-MAE only).
    #[serde(default)]
    pub decoder_groups: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    training: Option<TrainingHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: ViTConfig,
    pub n_classes: Option<usize>,
    /// Model parameters in store order.
    pub tensors: Vec<(String, Mat)>,
    pub training: Option<TrainingState>,
}

pub enum AnyModel {
    Mae(MaeModel),
    CaMae(CaMaeModel),
    Wsl(WslModel),
}

impl AnyModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Mae(_) => ModelKind::Mae,
            Self::CaMae(_) => ModelKind::CaMae,
            Self::Wsl(_) => ModelKind::Wsl,
        }
    }

    pub fn config(&self) -> &ViTConfig {
        match self {
            Self::Mae(m) => &m.config,
            Self::CaMae(m) => &m.config,
            Self::Wsl(m) => &m.config,
        }
    }
}

fn named(store: &ParamStore) -> Vec<(String, Mat)> {
    store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect()
}

impl Checkpoint {
    pub fn from_mae(model: &MaeModel, training: Option<&TrainingState>) -> Self {
        Self {
            kind: ModelKind::Mae,
            config: model.config.clone(),
            n_classes: None,
            tensors: named(&model.params),
            training: training.cloned(),
        }
    }

    pub fn from_ca_mae(model: &CaMaeModel, training: Option<&TrainingState>) -> Self {
        Self {
            kind: ModelKind::CaMae,
            config: model.config.clone(),
            n_classes: None,
            tensors: named(&model.params),
            training: training.cloned(),
        }
    }

    pub fn from_wsl(model: &WslModel, training: Option<&TrainingState>) -> Self {
        Self {
            kind: ModelKind::Wsl,
            config: model.config.clone(),
            n_classes: Some(model.n_classes),
            tensors: named(&model.params),
            training: training.cloned(),
        }
    }

    pub fn channel_agnostic(&self) -> bool {
        self.kind == ModelKind::CaMae
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut all: Vec<(String, &Mat)> =
            self.tensors.iter().map(|(n, m)| (n.clone(), m)).collect();
        if let Some(t) = &self.training {
            if t.optimizer.m.len() != self.tensors.len() {
                return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
            }
            for (prefix, moments) in [("optim.m/", &t.optimizer.m), ("optim.v/", &t.optimizer.v)] {
                for ((name, _), m) in self.tensors.iter().zip(moments) {
                    all.push((format!("{prefix}{name}"), m));
                }
            }
        }
        let mut entries = Vec::with_capacity(all.len());
        let mut payload = Vec::new();
        for (name, m) in &all {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: [m.nrows(), m.ncols()],
                dtype: "f32".into(),
                offset: payload.len(),
            });
            for &v in m.iter() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let decoder_groups = if self.channel_agnostic() {
            (0..self.config.in_channels).map(|c| format!("decoder.{c}")).collect()
        } else {
            Vec::new()
        };
        let header = Header {
            schema: SCHEMA.into(),
            kind: self.kind,
            config: self.config.clone(),
            channel_agnostic: self.channel_agnostic(),
            n_classes: self.n_classes,
            decoder_groups,
            tensors: entries,
            training: self.training.as_ref().map(|t| TrainingHeader {
                config: t.config.clone(),
                step: t.step,
                epoch: t.epoch,
                optimizer: t.optimizer.kind,
                optimizer_t: t.optimizer.t,
                curve: t.curve.clone(),
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = bytes
            .get(12..12 + len)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(json)?;
        if header.schema != SCHEMA {
            return Err(Error::Checkpoint(format!("unsupported schema {:?}", header.schema)));
        }
        Ok((header, &bytes[12 + len..]))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = Self::read_header(bytes)?;
        let mut model = Vec::new();
        let mut moments: HashMap<String, Mat> = HashMap::new();
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("tensor {} has dtype {}", e.name, e.dtype)));
            }
            let n = e.shape[0] * e.shape[1];
            let raw = payload
                .get(e.offset..e.offset + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} out of bounds", e.name)))?;
            let values: Vec<f64> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            let m = Mat::from_shape_vec((e.shape[0], e.shape[1]), values).expect("shape from header");
            if e.name.starts_with("optim.") {
                moments.insert(e.name.clone(), m);
            } else {
                model.push((e.name.clone(), m));
            }
        }
        let training = match header.training {
            None => None,
            Some(t) => {
                let take = |prefix: &str, moments: &mut HashMap<String, Mat>| -> Result<Vec<Mat>> {
                    model
                        .iter()
                        .map(|(name, _)| {
                            moments.remove(&format!("{prefix}{name}")).ok_or_else(|| {
                                Error::Checkpoint(format!("missing {prefix}{name}"))
                            })
                        })
                        .collect()
                };
                let m = take("optim.m/", &mut moments)?;
                let v = match t.optimizer {
                    OptimizerKind::Adamw => take("optim.v/", &mut moments)?,
                    OptimizerKind::Lion => Vec::new(),
                };
                Some(TrainingState {
                    config: t.config,
                    step: t.step,
                    epoch: t.epoch,
                    optimizer: OptimizerState {
                        kind: t.optimizer,
                        t: t.optimizer_t,
                        m,
                        v,
                    },
                    curve: t.curve,
                })
            }
        };
        Ok(Self {
            kind: header.kind,
            config: header.config,
            n_classes: header.n_classes,
            tensors: model,
            training,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }

    /// Rebuild the model; architecture comes from the header, values from the payload.
    pub fn into_model(self) -> Result<(AnyModel, Option<TrainingState>)> {
        let named: HashMap<String, Mat> = self.tensors.into_iter().collect();
        let model = match self.kind {
            ModelKind::Mae => {
                let mut m = MaeModel::new(self.config, 0)?;
                m.params.load_named(named)?;
                AnyModel::Mae(m)
            }
            ModelKind::CaMae => {
                let mut m = CaMaeModel::new(self.config, 0)?;
                m.params.load_named(named)?;
                AnyModel::CaMae(m)
            }
            ModelKind::Wsl => {
                let k = self
                    .n_classes
                    .ok_or_else(|| Error::Checkpoint("WSL checkpoint without n_classes".into()))?;
                let mut m = WslModel::new(self.config, k, 0)?;
                m.params.load_named(named)?;
                AnyModel::Wsl(m)
            }
        };
        Ok((model, self.training))
    }
}
