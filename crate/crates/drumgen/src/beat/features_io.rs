//! Binary feature-file format for beat features computed by an external
//! tracker.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic           4 bytes  "DGBF"
//! version         u32      1
//! frames          u32
//! emb_dim         u32
//! n_beats         u32
//! n_downbeats     u32
//! frame_rate      f64
//! embeddings      frames * emb_dim  f32, row-major
//! activations     frames * 3        f32, row-major
//! beats           n_beats           f64, seconds
//! downbeats       n_downbeats       f64, seconds
//! ```

use std::io::Read;
use std::path::Path;

use ndarray::Array2;

use super::BeatFeatures;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DGBF";
const VERSION: u32 = 1;

/// Write features to disk; embeddings and activations are stored as f32.
pub fn save_features(path: impl AsRef<Path>, feats: &BeatFeatures) -> Result<()> {
    let path = path.as_ref();
    feats.validate()?;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(feats.frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(feats.tracker_emb.ncols() as u32).to_le_bytes());
    buf.extend_from_slice(&(feats.beats.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(feats.downbeats.len() as u32).to_le_bytes());
    buf.extend_from_slice(&feats.frame_rate.to_le_bytes());
    for &v in feats.tracker_emb.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &v in feats.activations.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &t in feats.beats.iter().chain(feats.downbeats.iter()) {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Read a feature file, re-checking every invariant.
pub fn load_features(path: impl AsRef<Path>) -> Result<BeatFeatures> {
    let path = path.as_ref();
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    file.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;
    let mut cursor = Cursor { data: &data, at: 0 };

    let magic = cursor.bytes(4)?;
    if magic != MAGIC {
        return Err(Error::Shape(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let version = cursor.u32()?;
    if version != VERSION {
        return Err(Error::Shape(format!(
            "{}: unsupported feature file version {version}",
            path.display()
        )));
    }
    let frames = cursor.u32()? as usize;
    let emb_dim = cursor.u32()? as usize;
    let n_beats = cursor.u32()? as usize;
    let n_downbeats = cursor.u32()? as usize;
    let frame_rate = cursor.f64()?;

    let mut tracker_emb = Array2::zeros((frames, emb_dim));
    for v in tracker_emb.iter_mut() {
        *v = cursor.f32()? as f64;
    }
    let mut activations = Array2::zeros((frames, 3));
    for v in activations.iter_mut() {
        *v = cursor.f32()? as f64;
    }
    let beats: Vec<f64> = (0..n_beats).map(|_| cursor.f64()).collect::<Result<_>>()?;
    let downbeats: Vec<f64> = (0..n_downbeats)
        .map(|_| cursor.f64())
        .collect::<Result<_>>()?;
    if cursor.at != data.len() {
        return Err(Error::Shape(format!(
            "{}: {} trailing bytes",
            path.display(),
            data.len() - cursor.at
        )));
    }

    let feats = BeatFeatures {
        frame_rate,
        tracker_emb,
        activations,
        beats,
        downbeats,
    };
    feats.validate()?;
    Ok(feats)
}

struct Cursor<'a> {
    data: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.data.len() {
            return Err(Error::Shape("feature file truncated".into()));
        }
        let out = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn sample_features(frames: usize) -> BeatFeatures {
        let mut activations = Array2::zeros((frames, 3));
        for t in 0..frames {
            let b = 0.25f32 as f64;
            let d = 0.125f32 as f64;
            activations[[t, 0]] = b;
            activations[[t, 1]] = d;
            activations[[t, 2]] = 1.0 - b - d;
        }
        BeatFeatures {
            frame_rate: 172.265625,
            tracker_emb: Array2::from_shape_fn((frames, 50), |(r, c)| {
                ((r * 50 + c) as f32 * 0.01) as f64
            }),
            activations,
            beats: vec![0.5, 1.0, 1.5],
            downbeats: vec![0.5],
        }
    }

    #[test]
    fn roundtrip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let a_path = dir.path().join("a.feat");
        let b_path = dir.path().join("b.feat");
        let feats = sample_features(64);
        save_features(&a_path, &feats).unwrap();
        let loaded = load_features(&a_path).unwrap();
        save_features(&b_path, &loaded).unwrap();
        let a = std::fs::read(&a_path).unwrap();
        let b = std::fs::read(&b_path).unwrap();
        assert_eq!(a, b);
        assert_eq!(loaded.frames(), 64);
        assert_eq!(loaded.beats, feats.beats);
    }

    #[test]
    fn rejects_non_simplex_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.feat");
        let mut feats = sample_features(8);
        feats.activations[[3, 0]] = 0.5;
        feats.activations[[3, 1]] = 0.0;
        feats.activations[[3, 2]] = 0.0;
        // save_features validates too, so write the corrupt file by hand.
        assert!(save_features(&path, &feats).is_err());

        let good = sample_features(8);
        save_features(&path, &good).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Overwrite one activation f32 after the 32-byte header + embeddings.
        let offset = 32 + 8 * 50 * 4;
        bytes[offset..offset + 4].copy_from_slice(&0.9f32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_features(&path).is_err());
    }

    #[test]
    fn frame_count_matches_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.feat");
        save_features(&path, &sample_features(96)).unwrap();
        let loaded = load_features(&path).unwrap();
        assert_eq!(loaded.frames(), 96);
        assert_eq!(loaded.tracker_emb.nrows(), 96);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.feat");
        save_features(&path, &sample_features(8)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_features(&path).is_err());
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_features(&path).is_err());
    }
}
