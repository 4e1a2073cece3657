//! Checkpoint file format.
//!
//! Layout: magic `DDL1`, u32 LE format version, u64 LE JSON length, a JSON
//! header (configs, step counter, RNG state, dtype, parameter manifest),
//! then raw little-endian blobs — every parameter in manifest order,
//! followed by the Adam first and second moments in the same order.
//! Serialization is canonical, so save -> load -> save is byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::param::Parameterized;
use crate::scalar::Scalar;
use crate::trainer::optim::{AdamConfig, AdamW};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 4] = b"DDL1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    step: usize,
    model_seed: u64,
    rng_seed: u64,
    rng_word_pos: u128,
    dtype: String,
    params: Vec<ParamEntry>,
}

/// Everything needed to resume a run.
#[derive(Debug)]
pub struct CheckpointState<S: Scalar> {
    pub model: Model<S>,
    pub train: TrainConfig,
    pub opt: AdamW<S>,
    pub step: usize,
    pub model_seed: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

#[allow(clippy::too_many_arguments)]
pub fn save<S: Scalar>(
    path: &Path,
    model: &Model<S>,
    train: &TrainConfig,
    opt: &AdamW<S>,
    step: usize,
    model_seed: u64,
    rng_seed: u64,
    rng_word_pos: u128,
) -> Result<()> {
    let mut params = Vec::new();
    model.visit_params(&mut |p| params.push(ParamEntry { name: p.name.clone(), shape: p.shape.clone() }));
    let header = Header {
        format_version: FORMAT_VERSION,
        model: model.cfg.clone(),
        train: train.clone(),
        step,
        model_seed,
        rng_seed,
        rng_word_pos,
        dtype: S::DTYPE.to_string(),
        params,
    };
    let json = serde_json::to_vec(&header)?;

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    model.visit_params(&mut |p| {
        for &v in &p.data {
            v.write_le(&mut buf);
        }
    });
    for (_, m, v) in opt.moments() {
        for &x in m {
            x.write_le(&mut buf);
        }
        for &x in v {
            x.write_le(&mut buf);
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<CheckpointState<S>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |msg: &str| Error::CheckpointFormat(format!("{msg} ({})", path.display()));

    if bytes.len() < 16 {
        return Err(fail("file too short for header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic, not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointFormat(format!(
            "format version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + json_len {
        return Err(fail("truncated JSON header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + json_len])?;
    if header.dtype != S::DTYPE {
        return Err(Error::CheckpointFormat(format!(
            "dtype mismatch: file holds {}, requested {}",
            header.dtype,
            S::DTYPE
        )));
    }

    let mut model: Model<S> = Model::new(&header.model, header.model_seed)?;
    let mut offset = 16 + json_len;
    let es = S::BYTES;
    let take = |bytes: &[u8], offset: &mut usize, n: usize| -> Result<Vec<S>> {
        let need = n * es;
        if bytes.len() < *offset + need {
            return Err(Error::CheckpointFormat("truncated parameter blob".into()));
        }
        let out =
            bytes[*offset..*offset + need].chunks(es).map(S::read_le).collect::<Vec<S>>();
        *offset += need;
        Ok(out)
    };

    let mut entry_idx = 0;
    let mut load_err: Option<Error> = None;
    model.visit_params_mut(&mut |p| {
        if load_err.is_some() {
            return;
        }
        if entry_idx >= header.params.len() {
            load_err = Some(Error::CheckpointFormat("parameter manifest shorter than model".into()));
            return;
        }
        let entry = &header.params[entry_idx];
        entry_idx += 1;
        if entry.name != p.name || entry.shape != p.shape {
            load_err = Some(Error::CheckpointFormat(format!(
                "manifest entry `{}` {:?} does not match parameter `{}` {:?}",
                entry.name, entry.shape, p.name, p.shape
            )));
            return;
        }
        match take(&bytes, &mut offset, p.numel()) {
            Ok(data) => p.data = data,
            Err(e) => load_err = Some(e),
        }
    });
    if let Some(e) = load_err {
        return Err(e);
    }
    if entry_idx != header.params.len() {
        return Err(Error::CheckpointFormat("parameter manifest longer than model".into()));
    }

    let adam_cfg = AdamConfig {
        beta1: header.train.adam_beta1,
        beta2: header.train.adam_beta2,
        eps: header.train.adam_eps,
        weight_decay: header.train.weight_decay,
    };
    let mut opt: AdamW<S> = AdamW::new(&model, adam_cfg);
    let mut moments = Vec::new();
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let m = take(&bytes, &mut offset, n)?;
        let v = take(&bytes, &mut offset, n)?;
        moments.push((entry.name.clone(), m, v));
    }
    if offset != bytes.len() {
        return Err(fail("trailing bytes after moment blobs"));
    }
    opt.restore_moments(header.step, moments);

    Ok(CheckpointState {
        model,
        train: header.train,
        opt,
        step: header.step,
        model_seed: header.model_seed,
        rng_seed: header.rng_seed,
        rng_word_pos: header.rng_word_pos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;

    fn tiny() -> (Model<f32>, TrainConfig, AdamW<f32>) {
        let cfg = ModelConfig {
            d: 8,
            n_layers: 1,
            n_heads: 2,
            head_dim: 4,
            vocab_size: 16,
            seq_len: 8,
            ..ModelConfig::default()
        };
        let model: Model<f32> = Model::new(&cfg, 7).unwrap();
        let train = TrainConfig::default();
        let opt = AdamW::new(&model, AdamConfig::default());
        (model, train, opt)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (model, train, opt) = tiny();
        let p1 = dir.path().join("a.ddl");
        let p2 = dir.path().join("b.ddl");
        save(&p1, &model, &train, &opt, 42, 7, 1, 12345).unwrap();
        let state: CheckpointState<f32> = load(&p1).unwrap();
        save(&p2, &state.model, &state.train, &state.opt, state.step, state.model_seed, state.rng_seed, state.rng_word_pos)
            .unwrap();
        let a = std::fs::read(&p1).unwrap();
        let b = std::fs::read(&p2).unwrap();
        assert_eq!(a, b, "round-trip changed bytes");
    }

    #[test]
    fn parameters_survive_roundtrip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (model, train, opt) = tiny();
        let p = dir.path().join("c.ddl");
        save(&p, &model, &train, &opt, 10, 7, 3, 999).unwrap();
        let state: CheckpointState<f32> = load(&p).unwrap();
        let mut originals = Vec::new();
        model.visit_params(&mut |pp| originals.push(pp.data.clone()));
        let mut restored = Vec::new();
        state.model.visit_params(&mut |pp| restored.push(pp.data.clone()));
        assert_eq!(originals, restored);
        assert_eq!(state.step, 10);
        assert_eq!(state.rng_word_pos, 999);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ddl");
        std::fs::write(&p, b"NOPE0000000000000000").unwrap();
        let err = load::<f32>(&p).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (model, train, opt) = tiny();
        let p = dir.path().join("t.ddl");
        save(&p, &model, &train, &opt, 1, 7, 1, 0).unwrap();
        let full = std::fs::read(&p).unwrap();
        std::fs::write(&p, &full[..full.len() - 64]).unwrap();
        let err = load::<f32>(&p).unwrap_err();
        assert!(err.to_string().contains("truncated") || err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (model, train, opt) = tiny();
        let p = dir.path().join("d.ddl");
        save(&p, &model, &train, &opt, 1, 7, 1, 0).unwrap();
        let err = load::<f64>(&p).unwrap_err();
        assert!(err.to_string().contains("dtype mismatch"), "{err}");
    }
}
