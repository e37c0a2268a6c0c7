//! Audio I/O, STFT/mel analysis, Griffin-Lim inversion, and paired-clip slicing.
//!
//! Everything here is a pure function of its inputs; there is no shared
//! mutable state, so all operations are safe to call concurrently.

use std::path::Path;

use ndarray::{Array1, Array2};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The only sample rate this crate operates at.
pub const SAMPLE_RATE: u32 = 44_100;

/// Mono waveform pinned to 44.1 kHz.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Audio(format!(
                "sample rate must be {SAMPLE_RATE} Hz, got {sample_rate}"
            )));
        }
        if samples.is_empty() {
            return Err(Error::Audio("empty audio".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Audio("non-finite sample".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        let sq: f64 = self.samples.iter().map(|s| s * s).sum();
        (sq / self.samples.len() as f64).sqrt()
    }
}

/// Log-mel spectrogram, `frames x n_mels`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpec {
    pub values: Array2<f64>,
}

impl MelSpec {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }
}

/// Analysis / inversion / slicing parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DspConfig {
    pub win_length: usize,
    pub hop: usize,
    pub n_mels: usize,
    /// Window length for paired-clip slicing, in samples.
    pub clip_samples: usize,
    /// Fractional overlap between consecutive slices.
    pub overlap: f64,
    pub mel_fmin: f64,
    pub mel_fmax: f64,
    /// Energies are clamped to this floor before the log.
    pub log_floor: f64,
    pub griffin_lim_iters: usize,
    /// Drum clips with RMS below this are dropped by the slicer.
    pub silence_rms: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            win_length: 1024,
            hop: 256,
            n_mels: 80,
            clip_samples: 1 << 20,
            overlap: 0.5,
            mel_fmin: 0.0,
            mel_fmax: 22_050.0,
            log_floor: 1e-5,
            griffin_lim_iters: 64,
            silence_rms: 1e-4,
        }
    }
}

impl DspConfig {
    pub fn validate(&self) -> Result<()> {
        if self.win_length == 0 || self.hop == 0 {
            return Err(Error::config("dsp.win_length", "window and hop must be nonzero"));
        }
        if self.hop > self.win_length {
            return Err(Error::config("dsp.hop", "hop must not exceed win_length"));
        }
        if self.clip_samples % self.hop != 0 {
            return Err(Error::config(
                "dsp.clip_samples",
                format!(
                    "clip_samples ({}) must be divisible by hop ({})",
                    self.clip_samples, self.hop
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::config("dsp.overlap", "overlap must lie in [0, 1)"));
        }
        if self.mel_fmax <= self.mel_fmin {
            return Err(Error::config("dsp.mel_fmax", "mel_fmax must exceed mel_fmin"));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::config("dsp.log_floor", "log_floor must be positive"));
        }
        Ok(())
    }

    /// Number of STFT frames produced for a clip of `clip_samples`.
    pub fn frames_per_clip(&self) -> usize {
        self.clip_samples / self.hop
    }

    /// Mel frame rate in Hz.
    pub fn frame_rate(&self) -> f64 {
        SAMPLE_RATE as f64 / self.hop as f64
    }

    /// Slice stride in samples.
    pub fn slice_stride(&self) -> usize {
        let stride = (self.clip_samples as f64 * (1.0 - self.overlap)).round() as usize;
        stride.max(1)
    }

    pub fn freq_bins(&self) -> usize {
        self.win_length / 2 + 1
    }
}

/// Read a WAV file and return a 44.1 kHz mono clip with samples in [-1, 1].
///
/// Stereo input is downmixed by averaging; other rates are linearly resampled.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Audio(format!("{}: zero channels", path.display())));
    }

    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Int, bits) if bits <= 32 => {
            let scale = (1i64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
        (fmt, bits) => {
            return Err(Error::Audio(format!(
                "{}: unsupported encoding {fmt:?}/{bits}-bit",
                path.display()
            )))
        }
    };

    if interleaved.is_empty() {
        return Err(Error::Audio(format!("{}: empty audio", path.display())));
    }

    let mono: Vec<f64> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / frame.len() as f64)
        .collect();

    let samples = if spec.sample_rate == SAMPLE_RATE {
        mono
    } else {
        resample_linear(&mono, spec.sample_rate, SAMPLE_RATE)
    };

    AudioClip::new(samples, SAMPLE_RATE)
}

/// Write a mono clip as a 32-bit float WAV.
pub fn save_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
    for &s in &clip.samples {
        writer.write_sample(s as f32)?;
    }
    writer.finalize()?;
    Ok(())
}

fn resample_linear(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    let out_len = ((samples.len() as u64 * to as u64) / from as u64).max(1) as usize;
    let ratio = from as f64 / to as f64;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            let a = samples[lo.min(samples.len() - 1)];
            let b = samples[(lo + 1).min(samples.len() - 1)];
            a + (b - a) * frac
        })
        .collect()
}

/// Periodic Hann window.
fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Reflect-pad `half` samples on each side (mirror without repeating the edge).
fn reflect_pad(samples: &[f64], half: usize) -> Vec<f64> {
    let n = samples.len();
    debug_assert!(n > half);
    let mut padded = Vec::with_capacity(n + 2 * half);
    for i in (1..=half).rev() {
        padded.push(samples[i]);
    }
    padded.extend_from_slice(samples);
    for i in 1..=half {
        padded.push(samples[n - 1 - i]);
    }
    padded
}

/// Magnitude STFT with center (reflect) padding.
///
/// A clip of `n` samples yields exactly `n / hop` frames; frame `k` is
/// centered on sample `k * hop`.
pub fn stft_mag(clip: &AudioClip, cfg: &DspConfig) -> Result<Array2<f64>> {
    let n = clip.len();
    let win = cfg.win_length;
    if n < win {
        return Err(Error::Audio(format!(
            "clip of {n} samples is shorter than one window ({win})"
        )));
    }
    let hop = cfg.hop;
    let frames = n / hop;
    let bins = cfg.freq_bins();
    let window = hann_window(win);
    let padded = reflect_pad(&clip.samples, win / 2);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(win);
    let mut mag = Array2::<f64>::zeros((frames, bins));
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    for k in 0..frames {
        let start = k * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (j, out) in mag.row_mut(k).iter_mut().enumerate() {
            *out = buf[j].norm();
        }
    }
    Ok(mag)
}

/// Triangular, area-normalized mel filterbank, `n_mels x (win/2 + 1)`.
pub fn mel_filterbank(cfg: &DspConfig) -> Array2<f64> {
    fn hz_to_mel(f: f64) -> f64 {
        2595.0 * (1.0 + f / 700.0).log10()
    }
    fn mel_to_hz(m: f64) -> f64 {
        700.0 * (10f64.powf(m / 2595.0) - 1.0)
    }

    let bins = cfg.freq_bins();
    let mel_lo = hz_to_mel(cfg.mel_fmin);
    let mel_hi = hz_to_mel(cfg.mel_fmax);
    let points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();

    let bin_hz = |k: usize| k as f64 * SAMPLE_RATE as f64 / cfg.win_length as f64;
    let mut fb = Array2::<f64>::zeros((cfg.n_mels, bins));
    for m in 0..cfg.n_mels {
        let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
        // Slaney-style normalization: each triangle has area 2 / (hi - lo).
        let norm = 2.0 / (hi - lo);
        for k in 0..bins {
            let f = bin_hz(k);
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= mid {
                (f - lo) / (mid - lo)
            } else {
                (hi - f) / (hi - mid)
            };
            fb[[m, k]] = w * norm;
        }
    }
    fb
}

/// Project a magnitude spectrogram onto log-mel bands.
pub fn mel_project(mag: &Array2<f64>, cfg: &DspConfig) -> Result<MelSpec> {
    let bins = cfg.freq_bins();
    if mag.ncols() != bins {
        return Err(Error::Shape(format!(
            "magnitude matrix has {} bins, expected {bins}",
            mag.ncols()
        )));
    }
    let fb = mel_filterbank(cfg);
    let energies = mag.dot(&fb.t());
    let values = energies.mapv(|e| e.max(cfg.log_floor).ln());
    Ok(MelSpec { values })
}

/// Analyze a clip straight to its log-mel spectrogram.
pub fn mel_of_clip(clip: &AudioClip, cfg: &DspConfig) -> Result<MelSpec> {
    mel_project(&stft_mag(clip, cfg)?, cfg)
}

/// Invert a log-mel spectrogram to audio.
///
/// The mel energies are lifted back to a linear magnitude estimate through the
/// clamped pseudo-inverse of the filterbank, then phase is recovered by
/// iterative STFT/ISTFT projection. Output length is exactly `frames * hop`.
pub fn griffin_lim(mel: &MelSpec, cfg: &DspConfig) -> Result<AudioClip> {
    let frames = mel.frames();
    if frames == 0 {
        return Err(Error::Shape("empty mel spectrogram".into()));
    }
    if mel.bins() != cfg.n_mels {
        return Err(Error::Shape(format!(
            "mel has {} bins, expected {}",
            mel.bins(),
            cfg.n_mels
        )));
    }

    let fb = mel_filterbank(cfg);
    let energies = mel.values.mapv(f64::exp);
    // Right pseudo-inverse fb^T (fb fb^T)^-1, clamped non-negative.
    let gram = fb.dot(&fb.t());
    let pinv = fb.t().dot(&solve_spd(&gram));
    let mut mag = energies.dot(&pinv.t());
    mag.mapv_inplace(|v| v.max(0.0));

    let win = cfg.win_length;
    let hop = cfg.hop;
    let window = Array1::from(hann_window(win));
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(win);
    let inv = planner.plan_fft_inverse(win);

    // Zero initial phase keeps the whole inversion deterministic.
    let mut spec: Array2<Complex<f64>> = mag.mapv(|m| Complex::new(m, 0.0));
    let n = frames * hop;
    let mut signal = vec![0.0f64; n];
    for _ in 0..cfg.griffin_lim_iters {
        istft_into(&spec, &window, &*inv, hop, &mut signal);
        let rebuilt = stft_complex(&signal, &window, &*fwd, hop, frames);
        for (s, r) in spec.iter_mut().zip(rebuilt.iter()) {
            let norm = r.norm();
            let phase = if norm > 0.0 { *r / norm } else { Complex::new(1.0, 0.0) };
            *s = phase;
        }
        spec.zip_mut_with(&mag, |s, &m| *s *= m);
    }
    istft_into(&spec, &window, &*inv, hop, &mut signal);

    AudioClip::new(signal, SAMPLE_RATE)
}

/// Solve for the inverse of a symmetric positive-definite matrix by
/// Gauss-Jordan elimination with partial pivoting.
fn solve_spd(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut inv = Array2::<f64>::eye(n);
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if m[[r, col]].abs() > m[[pivot, col]].abs() {
                pivot = r;
            }
        }
        if pivot != col {
            for c in 0..n {
                m.swap([col, c], [pivot, c]);
                inv.swap([col, c], [pivot, c]);
            }
        }
        let d = m[[col, col]];
        // The mel Gram matrix is well conditioned; a tiny ridge guards the rest.
        let d = if d.abs() < 1e-12 { 1e-12 } else { d };
        for c in 0..n {
            m[[col, c]] /= d;
            inv[[col, c]] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = m[[r, col]];
                if f != 0.0 {
                    for c in 0..n {
                        m[[r, c]] -= f * m[[col, c]];
                        inv[[r, c]] -= f * inv[[col, c]];
                    }
                }
            }
        }
    }
    inv
}

fn stft_complex(
    signal: &[f64],
    window: &Array1<f64>,
    fft: &dyn rustfft::Fft<f64>,
    hop: usize,
    frames: usize,
) -> Array2<Complex<f64>> {
    let win = window.len();
    let bins = win / 2 + 1;
    let padded = reflect_pad(signal, win / 2);
    let mut out = Array2::from_elem((frames, bins), Complex::new(0.0, 0.0));
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    for k in 0..frames {
        let start = k * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for j in 0..bins {
            out[[k, j]] = buf[j];
        }
    }
    out
}

/// Overlap-add ISTFT matching `stft_complex`'s framing; writes `frames * hop`
/// samples into `signal`.
fn istft_into(
    spec: &Array2<Complex<f64>>,
    window: &Array1<f64>,
    ifft: &dyn rustfft::Fft<f64>,
    hop: usize,
    signal: &mut [f64],
) {
    let frames = spec.nrows();
    let bins = spec.ncols();
    let win = window.len();
    let half = win / 2;
    let padded_len = frames * hop + win;
    let mut acc = vec![0.0f64; padded_len];
    let mut norm = vec![0.0f64; padded_len];
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    let scale = 1.0 / win as f64;
    for k in 0..frames {
        buf[..bins].copy_from_slice(spec.row(k).to_slice().expect("contiguous row"));
        for j in bins..win {
            buf[j] = spec[[k, win - j]].conj();
        }
        ifft.process(&mut buf);
        let start = k * hop;
        for i in 0..win {
            let w = window[i];
            acc[start + i] += buf[i].re * scale * w;
            norm[start + i] += w * w;
        }
    }
    for (i, s) in signal.iter_mut().enumerate() {
        let j = i + half;
        *s = if norm[j] > 1e-10 { acc[j] / norm[j] } else { 0.0 };
    }
}

/// Slice a (drumless, drums) stem pair into overlapping fixed-length windows,
/// discarding windows whose drum side is silent.
pub fn slice_paired_clips(
    drumless: &AudioClip,
    drums: &AudioClip,
    cfg: &DspConfig,
) -> Result<Vec<(AudioClip, AudioClip)>> {
    if drumless.len() != drums.len() {
        return Err(Error::Audio(format!(
            "stem lengths differ: {} vs {}",
            drumless.len(),
            drums.len()
        )));
    }
    let n = drumless.len();
    let len = cfg.clip_samples;
    let stride = cfg.slice_stride();
    let mut pairs = Vec::new();
    let mut offset = 0usize;
    while offset + len <= n {
        let d = drums.samples[offset..offset + len].to_vec();
        let rms = (d.iter().map(|s| s * s).sum::<f64>() / len as f64).sqrt();
        if rms >= cfg.silence_rms {
            let m = drumless.samples[offset..offset + len].to_vec();
            pairs.push((
                AudioClip::new(m, SAMPLE_RATE)?,
                AudioClip::new(d, SAMPLE_RATE)?,
            ));
        }
        offset += stride;
    }
    Ok(pairs)
}

/// Window offsets produced by the slicer for a given stem length, whether or
/// not the drum side is silent there.
pub fn slice_offsets(stem_len: usize, cfg: &DspConfig) -> Vec<usize> {
    let mut offsets = Vec::new();
    let mut offset = 0usize;
    while offset + cfg.clip_samples <= stem_len {
        offsets.push(offset);
        offset += cfg.slice_stride();
    }
    offsets
}

/// Test-signal helper: a pure sine at `freq` Hz.
pub fn sine_clip(freq: f64, amplitude: f64, samples: usize) -> AudioClip {
    let w = 2.0 * std::f64::consts::PI * freq / SAMPLE_RATE as f64;
    AudioClip {
        samples: (0..samples).map(|i| amplitude * (w * i as f64).sin()).collect(),
        sample_rate: SAMPLE_RATE,
    }
}
