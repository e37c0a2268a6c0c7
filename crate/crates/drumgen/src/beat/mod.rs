//! Beat/downbeat tracking: a small trainable BLSTM tracker, peak picking,
//! Viterbi beat decoding, and a binary feature-file format for externally
//! computed features.

mod features_io;
mod peaks;
mod tracker;
mod viterbi;

pub use features_io::{load_features, save_features};
pub use peaks::pick_peaks;
pub use tracker::{
    frame_accuracy, labels_from_times, tracker_forward, train_tracker, FrameLabel, TrackerConfig,
    TrackerParams, TrackerTrainer,
};
pub use viterbi::{decode_beats, viterbi_beats, ViterbiParams};

use ndarray::Array2;

use crate::error::{Error, Result};

/// Per-frame tracker outputs plus decoded beat/downbeat times.
///
/// Activation channel order is `[beat, downbeat, non-beat]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeatFeatures {
    pub frame_rate: f64,
    /// `frames x emb_dim` recurrent embeddings.
    pub tracker_emb: Array2<f64>,
    /// `frames x 3` class probabilities.
    pub activations: Array2<f64>,
    /// Beat times in seconds, strictly increasing.
    pub beats: Vec<f64>,
    /// Downbeat times in seconds, a subset of `beats`.
    pub downbeats: Vec<f64>,
}

impl BeatFeatures {
    pub fn frames(&self) -> usize {
        self.activations.nrows()
    }

    /// Check the structural invariants: simplex activation rows, strictly
    /// increasing times, and downbeats within one frame of some beat.
    pub fn validate(&self) -> Result<()> {
        if self.activations.ncols() != 3 {
            return Err(Error::Shape(format!(
                "activations must have 3 channels, got {}",
                self.activations.ncols()
            )));
        }
        if self.tracker_emb.nrows() != self.activations.nrows() {
            return Err(Error::Shape(
                "embedding and activation frame counts differ".into(),
            ));
        }
        if self.frame_rate <= 0.0 {
            return Err(Error::Shape("frame rate must be positive".into()));
        }
        for (r, row) in self.activations.rows().into_iter().enumerate() {
            let mut sum = 0.0;
            for &v in row.iter() {
                if !(0.0..=1.0 + 1e-9).contains(&v) {
                    return Err(Error::Shape(format!(
                        "activation row {r} has value {v} outside [0, 1]"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Shape(format!(
                    "activation row {r} sums to {sum}, not 1"
                )));
            }
        }
        for times in [&self.beats, &self.downbeats] {
            for w in times.windows(2) {
                if w[1] <= w[0] {
                    return Err(Error::Shape("times must be strictly increasing".into()));
                }
            }
        }
        let tol = 1.0 / self.frame_rate;
        for &db in &self.downbeats {
            if !self.beats.iter().any(|&b| (b - db).abs() <= tol) {
                return Err(Error::Shape(format!(
                    "downbeat {db} has no matching beat within one frame"
                )));
            }
        }
        Ok(())
    }
}
