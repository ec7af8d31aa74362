//! Checkpoint file pair: `<name>.ckpt.json` (config, metadata, blob length)
//! and `<name>.ckpt.raw` (little-endian f32 state in declared order).
//!
//! State order: every conv block contributes weight, bias, gamma, beta,
//! running mean, running variance; encoder blocks come first, then decoder
//! blocks (deepest stage first), then the output head's weight and bias.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::architecture::{ClassifierMode, ConvBlock, Classifier, Encoder, MaskedAutoencoder, ModelConfig};
use crate::error::{Error, Result};
use crate::neuralops::{Scalar, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mae,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    pub seed: u64,
    /// Share of the training manifest a classifier was trained on.
    #[serde(default)]
    pub label_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: ModelKind,
    config: ModelConfig,
    mode: Option<ClassifierMode>,
    encoder_trainable: Option<bool>,
    param_count: usize,
    state_len: usize,
    blob_bytes: usize,
    metadata: TrainingMetadata,
}

pub enum Model {
    Mae(MaskedAutoencoder<f32>),
    Classifier(Classifier<f32>),
}

pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(".ckpt.json")
        .or_else(|| s.strip_suffix(".ckpt.raw"))
        .unwrap_or(&s)
        .to_string();
    (PathBuf::from(format!("{stem}.ckpt.json")), PathBuf::from(format!("{stem}.ckpt.raw")))
}

fn push_block<T: Scalar>(b: &ConvBlock<T>, out: &mut Vec<f32>) {
    for t in [&b.weight, &b.bias, &b.gamma, &b.beta] {
        out.extend(t.data().iter().map(|v| v.as_f64() as f32));
    }
    out.extend(b.stats.mean.iter().map(|v| v.as_f64() as f32));
    out.extend(b.stats.var.iter().map(|v| v.as_f64() as f32));
}

struct Cursor<'a> {
    data: &'a [f32],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[f32]> {
        if self.pos + n > self.data.len() {
            return Err(Error::LengthMismatch {
                expected: 4 * (self.pos + n),
                found: 4 * self.data.len(),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn fill(&mut self, t: &mut Tensor<f32>) -> Result<()> {
        let n = t.len();
        t.data_mut().copy_from_slice(self.take(n)?);
        Ok(())
    }

    fn fill_block(&mut self, b: &mut ConvBlock<f32>) -> Result<()> {
        for t in [&mut b.weight, &mut b.bias, &mut b.gamma, &mut b.beta] {
            self.fill(t)?;
        }
        let c = b.stats.mean.len();
        b.stats.mean.copy_from_slice(self.take(c)?);
        b.stats.var.copy_from_slice(self.take(c)?);
        Ok(())
    }
}

fn mae_state<T: Scalar>(mae: &MaskedAutoencoder<T>) -> Vec<f32> {
    let mut out = Vec::new();
    for b in mae.blocks() {
        push_block(b, &mut out);
    }
    out.extend(mae.head_weight.data().iter().chain(mae.head_bias.data()).map(|v| v.as_f64() as f32));
    out
}

fn classifier_state<T: Scalar>(c: &Classifier<T>) -> Vec<f32> {
    let mut out = Vec::new();
    for b in c.encoder.blocks() {
        push_block(b, &mut out);
    }
    out.extend(c.head_weight.data().iter().chain(c.head_bias.data()).map(|v| v.as_f64() as f32));
    out
}

fn write_pair(path: &Path, header: &Header, state: &[f32]) -> Result<()> {
    let (json_path, raw_path) = checkpoint_paths(path);
    if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = crate::json::to_sorted_string(header).map_err(|e| Error::format(&json_path, e.to_string()))?;
    let mut bytes = Vec::with_capacity(state.len() * 4);
    for v in state {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}

pub fn save_mae<T: Scalar>(mae: &MaskedAutoencoder<T>, metadata: &TrainingMetadata, path: impl AsRef<Path>) -> Result<()> {
    let state = mae_state(mae);
    let header = Header {
        version: CHECKPOINT_VERSION,
        kind: ModelKind::Mae,
        config: mae.config.clone(),
        mode: None,
        encoder_trainable: None,
        param_count: mae.param_count(),
        state_len: state.len(),
        blob_bytes: 4 * state.len(),
        metadata: metadata.clone(),
    };
    write_pair(path.as_ref(), &header, &state)
}

pub fn save_classifier<T: Scalar>(c: &Classifier<T>, metadata: &TrainingMetadata, path: impl AsRef<Path>) -> Result<()> {
    let state = classifier_state(c);
    let header = Header {
        version: CHECKPOINT_VERSION,
        kind: ModelKind::Classifier,
        config: c.config.clone(),
        mode: Some(c.mode),
        encoder_trainable: Some(c.encoder_trainable),
        param_count: c.param_count(),
        state_len: state.len(),
        blob_bytes: 4 * state.len(),
        metadata: metadata.clone(),
    };
    write_pair(path.as_ref(), &header, &state)
}

/// Loads either kind of checkpoint, with its training metadata.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, TrainingMetadata)> {
    let (json_path, raw_path) = checkpoint_paths(path.as_ref());
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::format(&json_path, e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: header.version,
        });
    }
    header.config.validate()?;
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    if bytes.len() != header.blob_bytes || header.blob_bytes != 4 * header.state_len {
        return Err(Error::LengthMismatch {
            expected: header.blob_bytes,
            found: bytes.len(),
        });
    }
    let state: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    if let Some(i) = state.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    let mut cur = Cursor { data: &state, pos: 0 };
    // Shapes come from a freshly built model; values are overwritten.
    let mut rng = crate::rng::seeded(0);
    let model = match header.kind {
        ModelKind::Mae => {
            let mut mae = crate::architecture::build_mae::<f32, _>(&header.config, &mut rng)?;
            for b in mae.blocks_mut() {
                cur.fill_block(b)?;
            }
            cur.fill(&mut mae.head_weight)?;
            cur.fill(&mut mae.head_bias)?;
            Model::Mae(mae)
        }
        ModelKind::Classifier => {
            let mode = header.mode.ok_or_else(|| Error::format(&json_path, "classifier checkpoint without mode"))?;
            let mut c = crate::architecture::build_classifier::<f32, _>(
                crate::architecture::EncoderSource::Fresh(&header.config),
                crate::architecture::ClassifierMode::RandomInit,
                &mut rng,
            )?;
            c.mode = mode;
            c.encoder_trainable = header.encoder_trainable.unwrap_or(mode.encoder_trainable());
            for b in c.encoder.blocks_mut() {
                cur.fill_block(b)?;
            }
            cur.fill(&mut c.head_weight)?;
            cur.fill(&mut c.head_bias)?;
            Model::Classifier(c)
        }
    };
    if cur.pos != state.len() {
        return Err(Error::LengthMismatch {
            expected: 4 * cur.pos,
            found: bytes.len(),
        });
    }
    Ok((model, header.metadata))
}

/// Loads the encoder of either checkpoint kind.
pub fn load_encoder<T: Scalar>(path: &Path) -> Result<(ModelConfig, Encoder<T>)> {
    match load_checkpoint(path)?.0 {
        Model::Mae(m) => Ok((m.config.clone(), m.encoder.cast())),
        Model::Classifier(c) => Ok((c.config.clone(), c.encoder.cast())),
    }
}

pub fn load_mae(path: impl AsRef<Path>) -> Result<(MaskedAutoencoder<f32>, TrainingMetadata)> {
    match load_checkpoint(path.as_ref())? {
        (Model::Mae(m), meta) => Ok((m, meta)),
        _ => Err(Error::format(path.as_ref(), "expected an autoencoder checkpoint")),
    }
}

pub fn load_classifier(path: impl AsRef<Path>) -> Result<(Classifier<f32>, TrainingMetadata)> {
    match load_checkpoint(path.as_ref())? {
        (Model::Classifier(c), meta) => Ok((c, meta)),
        _ => Err(Error::format(path.as_ref(), "expected a classifier checkpoint")),
    }
}

/// Encoder slice of the raw state blob of a checkpoint.
pub fn encoder_state(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    Ok(match load_checkpoint(path)?.0 {
        Model::Mae(m) => {
            let mut out = Vec::new();
            m.encoder.blocks().for_each(|b| push_block(b, &mut out));
            out
        }
        Model::Classifier(c) => {
            let mut out = Vec::new();
            c.encoder.blocks().for_each(|b| push_block(b, &mut out));
            out
        }
    })
}
