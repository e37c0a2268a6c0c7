//! Checkpoint container: a JSON manifest (names, shapes, dtypes, embedded
//! config) followed by raw little-endian f32 tensor blobs, in one file.
//!
//! Training state (Adam moments, step) rides along as extra tensors so a
//! resumed run continues bit-exactly: the trainers round their live state
//! through f32 at every checkpoint, making the file the exact state.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::beat::{TrackerConfig, TrackerParams, TrackerTrainer};
use crate::error::{Error, Result};
use crate::lm::{LMConfig, LMParams, LMTrainer};
use crate::nn::{Adam, Params};
use crate::vq::{CodecConfig, CodecParams, CodecTrainer};

const MAGIC: &[u8; 4] = b"DGCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    /// Byte offset into the blob region.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Model family: "vq_codec", "tracker", or "lm".
    pub kind: String,
    /// Training step the state was captured at.
    pub step: u64,
    /// Embedded model configuration.
    pub config: serde_json::Value,
    /// Untyped sidecar state (optimizer settings, flags).
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Write a checkpoint; tensor values are rounded to f32.
pub fn save_raw(
    path: impl AsRef<Path>,
    kind: &str,
    step: u64,
    config: serde_json::Value,
    extra: serde_json::Value,
    tensors: &[(String, Array2<f64>)],
) -> Result<()> {
    let path = path.as_ref();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, a) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            rows: a.nrows(),
            cols: a.ncols(),
            dtype: "f32".into(),
            offset,
        });
        offset += (a.len() * 4) as u64;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.into(),
        step,
        config,
        extra,
        tensors: entries,
    };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut buf = Vec::with_capacity(16 + manifest_bytes.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest_bytes);
    for (_, a) in tensors {
        for &v in a.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Read a checkpoint back into named f64 tensors.
pub fn load_raw(path: impl AsRef<Path>) -> Result<(Manifest, BTreeMap<String, Array2<f64>>)> {
    let path = path.as_ref();
    let mut data = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut data)
        .map_err(|e| Error::io(path, e))?;
    if data.len() < 16 || &data[..4] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(data[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format version {version}",
            path.display()
        )));
    }
    let mlen = u64::from_le_bytes(data[8..16].try_into().expect("8 bytes")) as usize;
    if data.len() < 16 + mlen {
        return Err(Error::Checkpoint(format!("{}: truncated manifest", path.display())));
    }
    let manifest: Manifest = serde_json::from_slice(&data[16..16 + mlen])
        .map_err(|e| Error::Checkpoint(format!("{}: bad manifest: {e}", path.display())))?;
    let blob = &data[16 + mlen..];
    let mut tensors = BTreeMap::new();
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported dtype {} for {}",
                path.display(),
                entry.dtype,
                entry.name
            )));
        }
        let n = entry.rows * entry.cols;
        let start = entry.offset as usize;
        let end = start + n * 4;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "{}: tensor {} overruns blob",
                path.display(),
                entry.name
            )));
        }
        let mut a = Array2::zeros((entry.rows, entry.cols));
        for (i, v) in a.iter_mut().enumerate() {
            let at = start + i * 4;
            *v = f32::from_le_bytes(blob[at..at + 4].try_into().expect("4 bytes")) as f64;
        }
        tensors.insert(entry.name.clone(), a);
    }
    Ok((manifest, tensors))
}

fn params_tensors(params: &dyn Params) -> Vec<(String, Array2<f64>)> {
    let mut out = Vec::new();
    params.visit(&mut |name, a| out.push((name.to_string(), a.clone())));
    out
}

fn adam_tensors(adam: &Adam, out: &mut Vec<(String, Array2<f64>)>) {
    for (name, a) in &adam.m {
        out.push((format!("adam.m.{name}"), a.clone()));
    }
    for (name, a) in &adam.v {
        out.push((format!("adam.v.{name}"), a.clone()));
    }
}

fn fill_params(params: &mut dyn Params, map: &BTreeMap<String, Array2<f64>>, path: &Path) -> Result<()> {
    let mut problem: Option<String> = None;
    params.visit_mut(&mut |name, a| {
        if problem.is_some() {
            return;
        }
        match map.get(name) {
            Some(src) if src.raw_dim() == a.raw_dim() => a.assign(src),
            Some(src) => {
                problem = Some(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    src.dim(),
                    a.dim()
                ))
            }
            None => problem = Some(format!("missing tensor {name}")),
        }
    });
    match problem {
        Some(p) => Err(Error::Checkpoint(format!("{}: {p}", path.display()))),
        None => Ok(()),
    }
}

fn restore_adam(map: &BTreeMap<String, Array2<f64>>, extra: &serde_json::Value) -> Adam {
    let lr = extra["adam_lr"].as_f64().unwrap_or(3e-4);
    let mut adam = Adam::new(lr);
    adam.step = extra["adam_step"].as_u64().unwrap_or(0);
    for (name, a) in map {
        if let Some(p) = name.strip_prefix("adam.m.") {
            adam.m.insert(p.to_string(), a.clone());
        } else if let Some(p) = name.strip_prefix("adam.v.") {
            adam.v.insert(p.to_string(), a.clone());
        }
    }
    adam
}

fn config_json<T: Serialize>(cfg: &T) -> Result<serde_json::Value> {
    serde_json::to_value(cfg).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn parse_config<T: for<'de> Deserialize<'de>>(manifest: &Manifest, path: &Path) -> Result<T> {
    serde_json::from_value(manifest.config.clone()).map_err(|e| {
        Error::Checkpoint(format!("{}: config does not parse: {e}", path.display()))
    })
}

fn expect_kind(manifest: &Manifest, kind: &str, path: &Path) -> Result<()> {
    if manifest.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{}: checkpoint kind {:?}, expected {kind:?}",
            path.display(),
            manifest.kind
        )));
    }
    Ok(())
}

/// Round live training state through f32 and write a codec checkpoint.
pub fn save_codec(path: impl AsRef<Path>, trainer: &mut CodecTrainer) -> Result<()> {
    trainer.params.quantize_f32();
    trainer.adam.quantize_f32();
    let mut tensors = params_tensors(&trainer.params);
    adam_tensors(&trainer.adam, &mut tensors);
    let extra = serde_json::json!({
        "codebook_initialized": trainer.params.codebook.initialized,
        "adam_step": trainer.adam.step,
        "adam_lr": trainer.adam.lr,
        "seed": trainer.seed,
        "batch": trainer.batch,
    });
    save_raw(
        path,
        "vq_codec",
        trainer.step,
        config_json(&trainer.params.cfg)?,
        extra,
        &tensors,
    )
}

/// Load codec parameters for inference.
pub fn load_codec(path: impl AsRef<Path>) -> Result<CodecParams> {
    let path = path.as_ref();
    let (manifest, map) = load_raw(path)?;
    expect_kind(&manifest, "vq_codec", path)?;
    let cfg: CodecConfig = parse_config(&manifest, path)?;
    let mut params = CodecParams::init(&cfg, 0)?;
    fill_params(&mut params, &map, path)?;
    params.codebook.initialized = manifest.extra["codebook_initialized"]
        .as_bool()
        .unwrap_or(true);
    Ok(params)
}

/// Restore a codec trainer to continue from the checkpointed step.
pub fn resume_codec(path: impl AsRef<Path>) -> Result<CodecTrainer> {
    let path = path.as_ref();
    let (manifest, map) = load_raw(path)?;
    expect_kind(&manifest, "vq_codec", path)?;
    let cfg: CodecConfig = parse_config(&manifest, path)?;
    let mut params = CodecParams::init(&cfg, 0)?;
    fill_params(&mut params, &map, path)?;
    params.codebook.initialized = manifest.extra["codebook_initialized"]
        .as_bool()
        .unwrap_or(true);
    let adam = restore_adam(&map, &manifest.extra);
    Ok(CodecTrainer {
        params,
        adam,
        step: manifest.step,
        seed: manifest.extra["seed"].as_u64().unwrap_or(0),
        batch: manifest.extra["batch"].as_u64().unwrap_or(1) as usize,
    })
}

pub fn save_tracker(path: impl AsRef<Path>, trainer: &mut TrackerTrainer) -> Result<()> {
    trainer.params.quantize_f32();
    trainer.adam.quantize_f32();
    let mut tensors = params_tensors(&trainer.params);
    adam_tensors(&trainer.adam, &mut tensors);
    let extra = serde_json::json!({
        "adam_step": trainer.adam.step,
        "adam_lr": trainer.adam.lr,
        "seed": trainer.seed,
        "batch": trainer.batch,
    });
    save_raw(
        path,
        "tracker",
        trainer.step,
        config_json(&trainer.params.cfg)?,
        extra,
        &tensors,
    )
}

pub fn load_tracker(path: impl AsRef<Path>) -> Result<TrackerParams> {
    let path = path.as_ref();
    let (manifest, map) = load_raw(path)?;
    expect_kind(&manifest, "tracker", path)?;
    let cfg: TrackerConfig = parse_config(&manifest, path)?;
    let mut params = TrackerParams::init(&cfg, 0);
    fill_params(&mut params, &map, path)?;
    Ok(params)
}

pub fn resume_tracker(path: impl AsRef<Path>) -> Result<TrackerTrainer> {
    let path = path.as_ref();
    let (manifest, map) = load_raw(path)?;
    expect_kind(&manifest, "tracker", path)?;
    let cfg: TrackerConfig = parse_config(&manifest, path)?;
    let mut params = TrackerParams::init(&cfg, 0);
    fill_params(&mut params, &map, path)?;
    let adam = restore_adam(&map, &manifest.extra);
    Ok(TrackerTrainer {
        params,
        adam,
        step: manifest.step,
        seed: manifest.extra["seed"].as_u64().unwrap_or(0),
        batch: manifest.extra["batch"].as_u64().unwrap_or(1) as usize,
    })
}

pub fn save_lm(path: impl AsRef<Path>, trainer: &mut LMTrainer) -> Result<()> {
    trainer.params.quantize_f32();
    trainer.adam.quantize_f32();
    let mut tensors = params_tensors(&trainer.params);
    adam_tensors(&trainer.adam, &mut tensors);
    let extra = serde_json::json!({
        "adam_step": trainer.adam.step,
        "adam_lr": trainer.adam.lr,
        "seed": trainer.seed,
        "batch": trainer.batch,
        "tracker_emb_dim": trainer.params.cond.low_w.nrows(),
    });
    save_raw(
        path,
        "lm",
        trainer.step,
        config_json(&trainer.params.cfg)?,
        extra,
        &tensors,
    )
}

pub fn load_lm(path: impl AsRef<Path>) -> Result<LMParams> {
    let path = path.as_ref();
    let (manifest, map) = load_raw(path)?;
    expect_kind(&manifest, "lm", path)?;
    let cfg: LMConfig = parse_config(&manifest, path)?;
    let emb_dim = manifest.extra["tracker_emb_dim"].as_u64().unwrap_or(50) as usize;
    let mut params = LMParams::init(&cfg, 0, emb_dim)?;
    fill_params(&mut params, &map, path)?;
    Ok(params)
}

pub fn resume_lm(path: impl AsRef<Path>) -> Result<LMTrainer> {
    let path = path.as_ref();
    let (manifest, map) = load_raw(path)?;
    expect_kind(&manifest, "lm", path)?;
    let cfg: LMConfig = parse_config(&manifest, path)?;
    let emb_dim = manifest.extra["tracker_emb_dim"].as_u64().unwrap_or(50) as usize;
    let mut params = LMParams::init(&cfg, 0, emb_dim)?;
    fill_params(&mut params, &map, path)?;
    let adam = restore_adam(&map, &manifest.extra);
    Ok(LMTrainer {
        params,
        adam,
        step: manifest.step,
        seed: manifest.extra["seed"].as_u64().unwrap_or(0),
        batch: manifest.extra["batch"].as_u64().unwrap_or(1) as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::MelSpec;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_codec_cfg() -> CodecConfig {
        CodecConfig {
            codebook_size: 8,
            latent_dim: 4,
            channels: 6,
            ..CodecConfig::default()
        }
    }

    fn random_mel(rng: &mut ChaCha8Rng, frames: usize) -> MelSpec {
        let mut values = Array2::zeros((frames, 80));
        for v in values.iter_mut() {
            *v = rng.gen_range(-8.0..1.0);
        }
        MelSpec { values }
    }

    #[test]
    fn raw_roundtrip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let a = Array2::from_shape_fn((3, 5), |(r, c)| (r * 5 + c) as f64 * 0.37 - 1.0);
        let quantized = a.mapv(|v| v as f32 as f64);
        save_raw(
            &path,
            "vq_codec",
            7,
            serde_json::json!({}),
            serde_json::json!({"note": 1}),
            &[("w".into(), a)],
        )
        .unwrap();
        let (manifest, map) = load_raw(&path).unwrap();
        assert_eq!(manifest.kind, "vq_codec");
        assert_eq!(manifest.step, 7);
        assert_eq!(manifest.tensors[0].dtype, "f32");
        assert_eq!(map["w"], quantized);
    }

    #[test]
    fn codec_checkpoint_roundtrip_after_quantize() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codec.ckpt");
        let cfg = tiny_codec_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let corpus = vec![random_mel(&mut rng, 16)];
        let mut trainer = CodecTrainer::new(&cfg, 5, 3e-4, 1).unwrap();
        for _ in 0..3 {
            trainer.train_step(&corpus).unwrap();
        }
        save_codec(&path, &mut trainer).unwrap();
        let loaded = load_codec(&path).unwrap();
        // save_codec quantized the live params, so the file reproduces them.
        assert_eq!(loaded.named(), trainer.params.named());
        assert_eq!(loaded.codebook.initialized, true);
    }

    #[test]
    fn resumed_codec_training_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codec.ckpt");
        let cfg = tiny_codec_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let corpus = vec![random_mel(&mut rng, 16), random_mel(&mut rng, 16)];

        // Uninterrupted run that also checkpoints (and hence quantizes) at
        // step 4.
        let mut full = CodecTrainer::new(&cfg, 9, 3e-4, 1).unwrap();
        for _ in 0..4 {
            full.train_step(&corpus).unwrap();
        }
        save_codec(&path, &mut full).unwrap();
        for _ in 0..4 {
            full.train_step(&corpus).unwrap();
        }

        let mut resumed = resume_codec(&path).unwrap();
        assert_eq!(resumed.step, 4);
        for _ in 0..4 {
            resumed.train_step(&corpus).unwrap();
        }
        assert_eq!(full.params.named(), resumed.params.named());
    }

    #[test]
    fn kind_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let cfg = crate::beat::TrackerConfig {
            hidden: 4,
            n_mels: 8,
        };
        let mut trainer = TrackerTrainer::new(&cfg, 1, 1e-3, 1);
        save_tracker(&path, &mut trainer).unwrap();
        assert!(load_codec(&path).is_err());
        assert!(load_tracker(&path).is_ok());
    }

    #[test]
    fn lm_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.ckpt");
        let cfg = LMConfig {
            d_model: 8,
            heads: 2,
            chunk: 4,
            encoder_layers: 1,
            decoder_layers: 2,
            t: 8,
            vocab_in: 5,
            vocab_out: 5,
            dropout: 0.0,
            ff_mult: 2,
            seq2seq: true,
            cond_encoder: true,
            cond_decoder: true,
        };
        let mut trainer = LMTrainer::new(&cfg, 3, 1e-3, 1, 10).unwrap();
        save_lm(&path, &mut trainer).unwrap();
        let loaded = load_lm(&path).unwrap();
        assert_eq!(loaded.cfg, cfg);
        assert_eq!(loaded.named(), trainer.params.named());
        assert_eq!(loaded.cond.low_w.nrows(), 10);
    }

    #[test]
    fn corrupt_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"garbage").unwrap();
        assert!(load_raw(&path).is_err());
    }
}
