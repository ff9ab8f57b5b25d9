//! Checkpoint bundles: a directory holding config, vocabulary, schema
//! fingerprint, parameters, and the training log.
//!
//! ```text
//! <dir>/
//!   config.json        stage, schema fingerprint, encoder config
//!   vocab.json         token → index map
//!   params.json        full model parameters
//!   training_log.tsv   epoch, train loss, dev F1, best marker
//! ```
//!
//! All files are deterministic functions of the model, so two identical
//! training runs write byte-identical bundles.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::CheckpointError;
use crate::schema::Schema;
use crate::training::{EpochLog, Stage, StageModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub schema_fingerprint: String,
    pub encoder: EncoderConfig,
    pub hidden_dim: usize,
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn json_err(path: &Path, message: impl ToString) -> CheckpointError {
    CheckpointError::Malformed {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

fn encoder_of(model: &StageModel) -> &crate::encoder::Encoder {
    match model {
        StageModel::Tagger(m) => &m.encoder,
        StageModel::Modality(m) => &m.encoder,
        StageModel::Relation(m) => &m.encoder,
    }
}

fn vocab_of(model: &StageModel) -> &crate::encoder::Vocab {
    match model {
        StageModel::Tagger(m) => &m.vocab,
        StageModel::Modality(m) => &m.vocab,
        StageModel::Relation(m) => &m.vocab,
    }
}

pub fn save(
    dir: &Path,
    model: &StageModel,
    schema: &Schema,
    log: &[EpochLog],
) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let meta = CheckpointMeta {
        stage: model.stage(),
        schema_fingerprint: schema.fingerprint(),
        encoder: encoder_of(model).config,
        hidden_dim: encoder_of(model).hidden_dim(),
    };

    let config_path = dir.join("config.json");
    let config = serde_json::to_string_pretty(&meta).map_err(|e| json_err(&config_path, e))?;
    fs::write(&config_path, config).map_err(|e| io_err(&config_path, e))?;

    let vocab_path = dir.join("vocab.json");
    let vocab =
        serde_json::to_string_pretty(vocab_of(model)).map_err(|e| json_err(&vocab_path, e))?;
    fs::write(&vocab_path, vocab).map_err(|e| io_err(&vocab_path, e))?;

    let params_path = dir.join("params.json");
    let params = serde_json::to_string(model).map_err(|e| json_err(&params_path, e))?;
    fs::write(&params_path, params).map_err(|e| io_err(&params_path, e))?;

    let log_path = dir.join("training_log.tsv");
    let mut lines = String::from("epoch\ttrain_loss\tdev_f1\tbest\n");
    for entry in log {
        lines.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{}\n",
            entry.epoch,
            entry.train_loss,
            entry.dev_f1,
            if entry.is_best { "*" } else { "" }
        ));
    }
    fs::write(&log_path, lines).map_err(|e| io_err(&log_path, e))?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(StageModel, CheckpointMeta), CheckpointError> {
    let config_path = dir.join("config.json");
    let config = fs::read_to_string(&config_path).map_err(|e| io_err(&config_path, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&config).map_err(|e| json_err(&config_path, e))?;

    let params_path = dir.join("params.json");
    let params = fs::read_to_string(&params_path).map_err(|e| io_err(&params_path, e))?;
    let model: StageModel =
        serde_json::from_str(&params).map_err(|e| json_err(&params_path, e))?;

    if model.stage() != meta.stage {
        return Err(CheckpointError::StageMismatch {
            found: model.stage().code().to_string(),
            expected: meta.stage.code().to_string(),
        });
    }
    Ok((model, meta))
}

/// Refuse checkpoints produced under a different schema.
pub fn verify_fingerprint(meta: &CheckpointMeta, schema: &Schema) -> Result<(), CheckpointError> {
    let expected = schema.fingerprint();
    if meta.schema_fingerprint != expected {
        return Err(CheckpointError::FingerprintMismatch {
            found: meta.schema_fingerprint.clone(),
            expected,
        });
    }
    Ok(())
}
