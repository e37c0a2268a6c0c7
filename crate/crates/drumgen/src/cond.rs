//! Beat condition embeddings: turn tracker features into one `d_model` row
//! per code step, at three levels of abstraction (plus "none").

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::beat::{pick_peaks, BeatFeatures};
use crate::error::{Error, Result};
use crate::nn::init_xavier;

/// Which beat information feeds the language model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BeatLevel {
    /// Pooled tracker embeddings through a learned projection.
    Low,
    /// Peak / non-peak flags from the activation functions.
    Mid,
    /// Beat / downbeat / non-beat labels from decoded times.
    High,
    /// No beat conditioning (all-zero rows).
    None,
}

impl std::fmt::Display for BeatLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BeatLevel::Low => "low",
            BeatLevel::Mid => "mid",
            BeatLevel::High => "high",
            BeatLevel::None => "none",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for BeatLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(BeatLevel::Low),
            "mid" => Ok(BeatLevel::Mid),
            "high" => Ok(BeatLevel::High),
            "none" => Ok(BeatLevel::None),
            other => Err(Error::config(
                "beat_level",
                format!("unknown level {other:?} (expected low|mid|high|none)"),
            )),
        }
    }
}

/// Peak-picking settings for the mid-level condition.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PeakConfig {
    pub min_height: f64,
    /// Minimum peak spacing in seconds.
    pub min_distance_secs: f64,
}

impl Default for PeakConfig {
    fn default() -> Self {
        Self {
            min_height: 0.3,
            min_distance_secs: 0.1,
        }
    }
}

/// Learned conditioning weights (stored and trained with the LM).
#[derive(Debug, Clone)]
pub struct CondParams {
    /// Low-level projection, `emb_dim x d_model` plus bias.
    pub low_w: Array2<f64>,
    pub low_b: Array2<f64>,
    /// High-level table rows: `[beat, downbeat, non-beat]`.
    pub high_table: Array2<f64>,
    /// Mid-level table rows: `[peak, non-peak]`.
    pub mid_table: Array2<f64>,
}

impl CondParams {
    pub fn init(emb_dim: usize, d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            low_w: init_xavier(rng, emb_dim, d_model),
            low_b: Array2::zeros((1, d_model)),
            high_table: init_xavier(rng, 3, d_model),
            mid_table: init_xavier(rng, 2, d_model),
        }
    }

    pub fn d_model(&self) -> usize {
        self.low_w.ncols()
    }
}

/// Per-step conditioning data before embedding; this is what LM training
/// caches per clip.
#[derive(Debug, Clone, PartialEq)]
pub enum CondInput {
    None,
    /// `T x emb_dim` pooled tracker embeddings.
    Low(Array2<f64>),
    /// `T` labels in `{0: beat, 1: downbeat, 2: non-beat}`.
    High(Vec<usize>),
    /// `T` labels in `{0: peak, 1: non-peak}`.
    Mid(Vec<usize>),
}

impl CondInput {
    pub fn level(&self) -> BeatLevel {
        match self {
            CondInput::None => BeatLevel::None,
            CondInput::Low(_) => BeatLevel::Low,
            CondInput::High(_) => BeatLevel::High,
            CondInput::Mid(_) => BeatLevel::Mid,
        }
    }

    pub fn len(&self) -> Option<usize> {
        match self {
            CondInput::None => None,
            CondInput::Low(a) => Some(a.nrows()),
            CondInput::High(l) | CondInput::Mid(l) => Some(l.len()),
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self.len(), Some(0))
    }
}

/// Materialized beat condition sequence, `T x d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeatCondSeq {
    pub values: Array2<f64>,
    pub level: BeatLevel,
}

impl BeatCondSeq {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Linear row resampling with endpoint preservation.
pub fn resample_rows(src: &Array2<f64>, target_rows: usize) -> Array2<f64> {
    let (n, c) = src.dim();
    assert!(n > 0 && target_rows > 0);
    let mut out = Array2::zeros((target_rows, c));
    if n == 1 {
        for mut row in out.rows_mut() {
            row.assign(&src.row(0));
        }
        return out;
    }
    if target_rows == 1 {
        out.row_mut(0).assign(&src.row(0));
        return out;
    }
    let scale = (n - 1) as f64 / (target_rows - 1) as f64;
    for i in 0..target_rows {
        let pos = i as f64 * scale;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let frac = pos - lo as f64;
        for ch in 0..c {
            out[[i, ch]] = src[[lo, ch]] * (1.0 - frac) + src[[hi, ch]] * frac;
        }
    }
    out
}

/// Resample tracker embeddings to `t * l` frames and mean-pool every `l`.
pub fn pooled_low(feats: &BeatFeatures, t: usize, l: usize) -> Result<Array2<f64>> {
    if feats.frames() == 0 {
        return Err(Error::Shape("empty beat features".into()));
    }
    let resampled = resample_rows(&feats.tracker_emb, t * l);
    let c = resampled.ncols();
    let mut out = Array2::zeros((t, c));
    for step in 0..t {
        for f in 0..l {
            let row = resampled.row(step * l + f);
            let mut acc = out.row_mut(step);
            acc += &row;
        }
        out.row_mut(step).mapv_inplace(|v| v / l as f64);
    }
    Ok(out)
}

/// Per-step labels from decoded beat/downbeat times.
///
/// Each event marks mel frame `floor(time * frame_rate)`; a code step takes
/// the highest-priority label (downbeat > beat > non-beat) among its `l`
/// frames.
pub fn labels_high(feats: &BeatFeatures, t: usize, l: usize, frame_rate: f64) -> Vec<usize> {
    let frames = t * l;
    let mut frame_labels = vec![2usize; frames];
    for &time in &feats.beats {
        let f = (time * frame_rate).floor() as usize;
        if f < frames {
            frame_labels[f] = 0;
        }
    }
    for &time in &feats.downbeats {
        let f = (time * frame_rate).floor() as usize;
        if f < frames {
            frame_labels[f] = 1;
        }
    }
    (0..t)
        .map(|step| {
            let group = &frame_labels[step * l..(step + 1) * l];
            if group.contains(&1) {
                1
            } else if group.contains(&0) {
                0
            } else {
                2
            }
        })
        .collect()
}

/// Per-step peak flags from the beat and downbeat activation channels
/// (union of their peaks). 0 = peak, 1 = non-peak.
pub fn labels_mid(
    feats: &BeatFeatures,
    t: usize,
    l: usize,
    frame_rate: f64,
    peaks: &PeakConfig,
) -> Result<Vec<usize>> {
    if feats.frames() == 0 {
        return Err(Error::Shape("empty beat features".into()));
    }
    let frames = t * l;
    let acts = resample_rows(&feats.activations, frames);
    let min_distance = ((peaks.min_distance_secs * frame_rate).round() as usize).max(1);
    let mut is_peak = vec![false; frames];
    for channel in [0usize, 1] {
        let scores: Vec<f64> = acts.column(channel).to_vec();
        for p in pick_peaks(&scores, peaks.min_height, min_distance) {
            is_peak[p] = true;
        }
    }
    Ok((0..t)
        .map(|step| {
            let any = (step * l..(step + 1) * l).any(|f| is_peak[f]);
            if any {
                0
            } else {
                1
            }
        })
        .collect())
}

/// Compute the conditioning input for a level in one call.
pub fn cond_input(
    level: BeatLevel,
    feats: &BeatFeatures,
    t: usize,
    l: usize,
    frame_rate: f64,
    peaks: &PeakConfig,
) -> Result<CondInput> {
    Ok(match level {
        BeatLevel::None => CondInput::None,
        BeatLevel::Low => CondInput::Low(pooled_low(feats, t, l)?),
        BeatLevel::High => CondInput::High(labels_high(feats, t, l, frame_rate)),
        BeatLevel::Mid => CondInput::Mid(labels_mid(feats, t, l, frame_rate, peaks)?),
    })
}

/// Materialize a conditioning input as a `T x d_model` matrix.
pub fn embed(input: &CondInput, params: &CondParams, t: usize) -> Result<BeatCondSeq> {
    let d = params.d_model();
    let values = match input {
        CondInput::None => Array2::zeros((t, d)),
        CondInput::Low(pooled) => {
            if pooled.ncols() != params.low_w.nrows() {
                return Err(Error::Shape(format!(
                    "embedding dim {} != projection input {}",
                    pooled.ncols(),
                    params.low_w.nrows()
                )));
            }
            if pooled.nrows() != t {
                return Err(Error::Shape("pooled rows != T".into()));
            }
            &pooled.dot(&params.low_w) + &params.low_b.row(0)
        }
        CondInput::High(labels) => {
            let mut out = Array2::zeros((t, d));
            for (i, &label) in labels.iter().enumerate() {
                out.row_mut(i).assign(&params.high_table.row(label));
            }
            out
        }
        CondInput::Mid(labels) => {
            let mut out = Array2::zeros((t, d));
            for (i, &label) in labels.iter().enumerate() {
                out.row_mut(i).assign(&params.mid_table.row(label));
            }
            out
        }
    };
    Ok(BeatCondSeq {
        values,
        level: input.level(),
    })
}

/// Low-level condition: resample, pool every `l` frames, project to `d_model`.
pub fn cond_low(feats: &BeatFeatures, params: &CondParams, t: usize, l: usize) -> Result<BeatCondSeq> {
    embed(&CondInput::Low(pooled_low(feats, t, l)?), params, t)
}

/// High-level condition from decoded beat/downbeat positions.
pub fn cond_high(
    feats: &BeatFeatures,
    params: &CondParams,
    t: usize,
    l: usize,
    hop: usize,
    sample_rate: u32,
) -> Result<BeatCondSeq> {
    let frame_rate = sample_rate as f64 / hop as f64;
    embed(
        &CondInput::High(labels_high(feats, t, l, frame_rate)),
        params,
        t,
    )
}

/// Mid-level condition from activation peaks.
pub fn cond_mid(
    feats: &BeatFeatures,
    params: &CondParams,
    t: usize,
    l: usize,
    frame_rate: f64,
    peaks: &PeakConfig,
) -> Result<BeatCondSeq> {
    embed(
        &CondInput::Mid(labels_mid(feats, t, l, frame_rate, peaks)?),
        params,
        t,
    )
}

/// The all-zero condition used by the "w/o beat" variants.
pub fn cond_none(t: usize, d_model: usize) -> BeatCondSeq {
    BeatCondSeq {
        values: Array2::zeros((t, d_model)),
        level: BeatLevel::None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn features(frames: usize, emb_dim: usize) -> BeatFeatures {
        let mut activations = Array2::zeros((frames, 3));
        activations.column_mut(2).fill(1.0);
        BeatFeatures {
            frame_rate: 44100.0 / 256.0,
            tracker_emb: Array2::from_shape_fn((frames, emb_dim), |(r, c)| {
                r as f64 + 0.01 * c as f64
            }),
            activations,
            beats: Vec::new(),
            downbeats: Vec::new(),
        }
    }

    fn params(d_model: usize) -> CondParams {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        CondParams::init(50, d_model, &mut rng)
    }

    #[test]
    fn low_shapes_and_constant_rows() {
        let p = params(16);
        let mut feats = features(64, 50);
        let out = cond_low(&feats, &p, 16, 4).unwrap();
        assert_eq!(out.values.dim(), (16, 16));
        assert_eq!(out.level, BeatLevel::Low);

        // Constant embeddings stay constant through resample + pool + affine.
        feats.tracker_emb.fill(0.25);
        let out = cond_low(&feats, &p, 16, 4).unwrap();
        let first = out.values.row(0).to_owned();
        for row in out.values.rows() {
            for (a, b) in row.iter().zip(first.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resample_preserves_endpoints_and_interpolates() {
        let src = Array2::from_shape_fn((5, 2), |(r, c)| (r * 10 + c) as f64);
        let out = resample_rows(&src, 9);
        assert_eq!(out.row(0), src.row(0));
        assert_eq!(out.row(8), src.row(4));
        // Ramp input stays a ramp under linear interpolation.
        for i in 0..9 {
            let want = i as f64 * 40.0 / 8.0;
            assert!((out[[i, 0]] - want).abs() < 1e-12);
        }

        // Upsampling from half rate: target row t draws on source rows
        // around t/2, so a step in the source lands mid-output.
        let mut step = Array2::zeros((8, 1));
        for r in 4..8 {
            step[[r, 0]] = 1.0;
        }
        let up = resample_rows(&step, 16);
        assert_eq!(up[[0, 0]], 0.0);
        assert_eq!(up[[15, 0]], 1.0);
        assert!(up[[7, 0]] > 0.0 && up[[7, 0]] < 1.0);
    }

    #[test]
    fn high_no_beats_is_all_nonbeat_rows() {
        let p = params(8);
        let feats = features(64, 50);
        let out = cond_high(&feats, &p, 16, 4, 256, 44100).unwrap();
        for row in out.values.rows() {
            assert_eq!(row, p.high_table.row(2));
        }
    }

    #[test]
    fn high_downbeat_at_zero_marks_step_zero() {
        let p = params(8);
        let mut feats = features(64, 50);
        feats.beats = vec![0.0];
        feats.downbeats = vec![0.0];
        let out = cond_high(&feats, &p, 16, 4, 256, 44100).unwrap();
        assert_eq!(out.values.row(0), p.high_table.row(1));
        for r in 1..16 {
            assert_eq!(out.values.row(r), p.high_table.row(2));
        }
    }

    #[test]
    fn high_beat_at_one_second_lands_on_step_43() {
        let p = params(8);
        let t = 64;
        let mut feats = features(t * 4, 50);
        feats.beats = vec![1.0];
        let out = cond_high(&feats, &p, t, 4, 256, 44100).unwrap();
        // floor((1.0 * 44100 / 256) / 4) = 43
        for r in 0..t {
            let expect = if r == 43 { 0 } else { 2 };
            assert_eq!(out.values.row(r), p.high_table.row(expect), "step {r}");
        }
    }

    #[test]
    fn high_rows_are_bit_identical_to_table_rows() {
        let p = params(8);
        let mut feats = features(64, 50);
        feats.beats = vec![0.05, 0.3, 0.55, 0.8];
        feats.downbeats = vec![0.05];
        let out = cond_high(&feats, &p, 16, 4, 256, 44100).unwrap();
        for row in out.values.rows() {
            let matches = (0..3).any(|k| row == p.high_table.row(k));
            assert!(matches);
        }
    }

    #[test]
    fn mid_flat_activations_are_all_nonpeak() {
        let p = params(8);
        let feats = features(64, 50);
        let out = cond_mid(
            &feats,
            &p,
            16,
            4,
            feats.frame_rate,
            &PeakConfig::default(),
        )
        .unwrap();
        for row in out.values.rows() {
            assert_eq!(row, p.mid_table.row(1));
        }
    }

    #[test]
    fn mid_single_peak_marks_its_step() {
        let p = params(8);
        let mut feats = features(64, 50);
        // One clean activation peak at frame 7 -> code step floor(7/4) = 1.
        feats.activations.column_mut(0).fill(0.0);
        feats.activations.column_mut(2).fill(1.0);
        feats.activations[[7, 0]] = 0.9;
        feats.activations[[7, 2]] = 0.1;
        // Frame count equals T*L so resampling is the identity here.
        let out = cond_mid(&feats, &p, 16, 4, feats.frame_rate, &PeakConfig::default()).unwrap();
        for (r, row) in out.values.rows().into_iter().enumerate() {
            let expect = if r == 1 { 0 } else { 1 };
            assert_eq!(row, p.mid_table.row(expect), "step {r}");
        }
    }

    #[test]
    fn mid_peaks_at_least_as_dense_as_beats() {
        let p = params(8);
        let t = 32;
        let l = 4;
        let mut feats = features(t * l, 50);
        let fr = feats.frame_rate;
        // Sub-beat onsets: activation peaks every 16 frames, decoded beats
        // only every 32 frames.
        for f in (0..t * l).step_by(16) {
            feats.activations[[f, 0]] = 0.9;
            feats.activations[[f, 2]] = 0.1;
        }
        feats.beats = (0..t * l)
            .step_by(32)
            .map(|f| (f as f64 + 0.5) / fr)
            .collect();

        let mid = labels_mid(&feats, t, l, fr, &PeakConfig::default()).unwrap();
        let high = labels_high(&feats, t, l, fr);
        let peak_steps = mid.iter().filter(|&&v| v == 0).count();
        let beat_steps = high.iter().filter(|&&v| v != 2).count();
        assert!(peak_steps >= beat_steps, "{peak_steps} < {beat_steps}");
        assert!(beat_steps > 0);
    }

    #[test]
    fn none_is_zero_matrix() {
        let out = cond_none(16, 8);
        assert_eq!(out.level, BeatLevel::None);
        assert!(out.values.iter().all(|&v| v == 0.0));
        assert_eq!(out.values.dim(), (16, 8));
    }

    #[test]
    fn output_shape_fixed_across_levels() {
        let p = params(24);
        let mut feats = features(64, 50);
        feats.beats = vec![0.1, 0.4];
        for level in [BeatLevel::Low, BeatLevel::Mid, BeatLevel::High, BeatLevel::None] {
            let input = cond_input(level, &feats, 16, 4, feats.frame_rate, &PeakConfig::default())
                .unwrap();
            let out = embed(&input, &p, 16).unwrap();
            assert_eq!(out.values.dim(), (16, 24), "{level}");
        }
    }

    #[test]
    fn low_rejects_wrong_embedding_width() {
        let p = params(8);
        let feats = features(64, 10);
        assert!(cond_low(&feats, &p, 16, 4).is_err());
    }
}
