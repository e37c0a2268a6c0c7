//! Small trainable beat tracker: one bidirectional LSTM layer over log-mel
//! frames, a fully-connected softmax head, and a cross-entropy trainer.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BeatFeatures;
use crate::dsp::MelSpec;
use crate::error::{Error, Result};
use crate::nn::{init_xavier, Adam, Params, Tape, Var};
use crate::vq::step_rng;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrackerConfig {
    /// Hidden size per direction; the embedding is twice this wide.
    pub hidden: usize,
    pub n_mels: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            hidden: 25,
            n_mels: 80,
        }
    }
}

/// Per-frame class used for tracker training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameLabel {
    Beat,
    Downbeat,
    NonBeat,
}

impl FrameLabel {
    pub fn index(self) -> usize {
        match self {
            FrameLabel::Beat => 0,
            FrameLabel::Downbeat => 1,
            FrameLabel::NonBeat => 2,
        }
    }
}

/// Frame labels from annotated beat/downbeat times; downbeats win when both
/// land on the same frame.
pub fn labels_from_times(
    beats: &[f64],
    downbeats: &[f64],
    frames: usize,
    frame_rate: f64,
) -> Vec<FrameLabel> {
    let mut labels = vec![FrameLabel::NonBeat; frames];
    for &t in beats {
        let f = (t * frame_rate).floor() as usize;
        if f < frames {
            labels[f] = FrameLabel::Beat;
        }
    }
    for &t in downbeats {
        let f = (t * frame_rate).floor() as usize;
        if f < frames {
            labels[f] = FrameLabel::Downbeat;
        }
    }
    labels
}

#[derive(Debug, Clone)]
pub struct TrackerParams {
    pub cfg: TrackerConfig,
    pub wx_f: Array2<f64>,
    pub wh_f: Array2<f64>,
    pub b_f: Array2<f64>,
    pub wx_b: Array2<f64>,
    pub wh_b: Array2<f64>,
    pub b_b: Array2<f64>,
    pub head_w: Array2<f64>,
    pub head_b: Array2<f64>,
}

impl TrackerParams {
    pub fn init(cfg: &TrackerConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.hidden;
        Self {
            wx_f: init_xavier(&mut rng, cfg.n_mels, 4 * h),
            wh_f: init_xavier(&mut rng, h, 4 * h),
            b_f: Array2::zeros((1, 4 * h)),
            wx_b: init_xavier(&mut rng, cfg.n_mels, 4 * h),
            wh_b: init_xavier(&mut rng, h, 4 * h),
            b_b: Array2::zeros((1, 4 * h)),
            head_w: init_xavier(&mut rng, 2 * h, 3),
            head_b: Array2::zeros((1, 3)),
            cfg: cfg.clone(),
        }
    }

    /// Width of the tracker embedding (concatenated directions).
    pub fn emb_dim(&self) -> usize {
        2 * self.cfg.hidden
    }
}

impl Params for TrackerParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        f("fwd.wx", &self.wx_f);
        f("fwd.wh", &self.wh_f);
        f("fwd.b", &self.b_f);
        f("bwd.wx", &self.wx_b);
        f("bwd.wh", &self.wh_b);
        f("bwd.b", &self.b_b);
        f("head.w", &self.head_w);
        f("head.b", &self.head_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        f("fwd.wx", &mut self.wx_f);
        f("fwd.wh", &mut self.wh_f);
        f("fwd.b", &mut self.b_f);
        f("bwd.wx", &mut self.wx_b);
        f("bwd.wh", &mut self.wh_b);
        f("bwd.b", &mut self.b_b);
        f("head.w", &mut self.head_w);
        f("head.b", &mut self.head_b);
    }
}

struct TrackerVars<'t> {
    wx_f: Var<'t>,
    wh_f: Var<'t>,
    b_f: Var<'t>,
    wx_b: Var<'t>,
    wh_b: Var<'t>,
    b_b: Var<'t>,
    head_w: Var<'t>,
    head_b: Var<'t>,
}

fn bind<'t>(tape: &'t Tape, params: &TrackerParams) -> (TrackerVars<'t>, Vec<(String, Var<'t>)>) {
    let mut named = Vec::new();
    let mut leaf = |name: &str, a: &Array2<f64>| {
        let v = tape.leaf(a.clone());
        named.push((name.to_string(), v));
        v
    };
    let vars = TrackerVars {
        wx_f: leaf("fwd.wx", &params.wx_f),
        wh_f: leaf("fwd.wh", &params.wh_f),
        b_f: leaf("fwd.b", &params.b_f),
        wx_b: leaf("bwd.wx", &params.wx_b),
        wh_b: leaf("bwd.wh", &params.wh_b),
        b_b: leaf("bwd.b", &params.b_b),
        head_w: leaf("head.w", &params.head_w),
        head_b: leaf("head.b", &params.head_b),
    };
    (vars, named)
}

/// BLSTM embeddings and head logits for one clip.
fn forward_graph<'t>(
    tape: &'t Tape,
    vars: &TrackerVars<'t>,
    mel: &MelSpec,
) -> (Var<'t>, Var<'t>) {
    let x = tape.leaf(mel.values.clone());
    let fwd = x.lstm(vars.wx_f, vars.wh_f, vars.b_f, false);
    let bwd = x.lstm(vars.wx_b, vars.wh_b, vars.b_b, true);
    let emb = Var::concat_cols(&[fwd, bwd]);
    let logits = emb.matmul(vars.head_w).add_bias(vars.head_b);
    (emb, logits)
}

/// Run the tracker over a clip, producing embeddings and activations only
/// (beat/downbeat times stay empty until decoded).
pub fn tracker_forward(mel: &MelSpec, params: &TrackerParams, frame_rate: f64) -> BeatFeatures {
    let tape = Tape::new();
    let (vars, _) = bind(&tape, params);
    let (emb, logits) = forward_graph(&tape, &vars, mel);
    BeatFeatures {
        frame_rate,
        tracker_emb: emb.value(),
        activations: logits.softmax().value(),
        beats: Vec::new(),
        downbeats: Vec::new(),
    }
}

/// Stateful tracker trainer (per-frame cross-entropy, Adam).
pub struct TrackerTrainer {
    pub params: TrackerParams,
    pub adam: Adam,
    pub step: u64,
    pub seed: u64,
    pub batch: usize,
}

impl TrackerTrainer {
    pub fn new(cfg: &TrackerConfig, seed: u64, lr: f64, batch: usize) -> Self {
        Self {
            params: TrackerParams::init(cfg, seed),
            adam: Adam::new(lr),
            step: 0,
            seed,
            batch,
        }
    }

    pub fn train_step(&mut self, corpus: &[(MelSpec, Vec<FrameLabel>)]) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::Dataset("empty tracker training corpus".into()));
        }
        let mut rng = step_rng(self.seed, self.step);
        let tape = Tape::new();
        let (vars, named) = bind(&tape, &self.params);
        let mut total: Option<Var<'_>> = None;
        for _ in 0..self.batch {
            let (mel, labels) = &corpus[rng.gen_range(0..corpus.len())];
            if labels.len() != mel.frames() {
                return Err(Error::Shape(format!(
                    "label count {} != frame count {}",
                    labels.len(),
                    mel.frames()
                )));
            }
            let (_, logits) = forward_graph(&tape, &vars, mel);
            let targets = Rc::new(labels.iter().map(|l| l.index()).collect::<Vec<_>>());
            let loss = logits.cross_entropy(targets);
            total = Some(match total {
                None => loss,
                Some(acc) => acc.add(loss),
            });
        }
        let loss = total.expect("nonempty batch").scale(1.0 / self.batch as f64);
        let loss_val = loss.value()[[0, 0]];
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("tracker loss {loss_val}"),
            });
        }
        let grads = tape.backward(loss);
        let mut by_name = BTreeMap::new();
        for (name, var) in &named {
            if let Some(g) = grads.of(*var) {
                by_name.insert(name.clone(), g.clone());
            }
        }
        self.adam.update(&mut self.params, &by_name);
        self.step += 1;
        Ok(loss_val)
    }
}

/// Train a tracker for a fixed number of steps.
pub fn train_tracker(
    corpus: &[(MelSpec, Vec<FrameLabel>)],
    cfg: &TrackerConfig,
    steps: u64,
    seed: u64,
    lr: f64,
    batch: usize,
) -> Result<(TrackerParams, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::Dataset("empty tracker training corpus".into()));
    }
    let mut trainer = TrackerTrainer::new(cfg, seed, lr, batch);
    let mut trace = Vec::new();
    for _ in 0..steps {
        trace.push(trainer.train_step(corpus)?);
    }
    Ok((trainer.params, trace))
}

/// Fraction of frames the tracker classifies correctly.
pub fn frame_accuracy(
    params: &TrackerParams,
    corpus: &[(MelSpec, Vec<FrameLabel>)],
    frame_rate: f64,
) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (mel, labels) in corpus {
        let feats = tracker_forward(mel, params, frame_rate);
        for (t, label) in labels.iter().enumerate() {
            let row = feats.activations.row(t);
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                .expect("3 channels")
                .0;
            if pred == label.index() {
                hits += 1;
            }
            total += 1;
        }
    }
    hits as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> TrackerConfig {
        TrackerConfig {
            hidden: 6,
            n_mels: 12,
        }
    }

    /// Clicky synthetic corpus: loud frames on a beat grid, extra energy in
    /// the low bins on downbeats.
    fn click_corpus(cfg: &TrackerConfig, n_clips: usize, frames: usize, seed: u64) -> Vec<(MelSpec, Vec<FrameLabel>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_clips)
            .map(|_| {
                let period = rng.gen_range(6..10usize);
                let mut values = Array2::from_elem((frames, cfg.n_mels), -8.0);
                let mut labels = vec![FrameLabel::NonBeat; frames];
                for f in (0..frames).step_by(period) {
                    let beat_idx = f / period;
                    let is_down = beat_idx % 4 == 0;
                    for b in 0..cfg.n_mels {
                        values[[f, b]] = if b < cfg.n_mels / 2 { 1.0 } else { 0.0 };
                        if is_down && b < 3 {
                            values[[f, b]] = 3.0;
                        }
                    }
                    labels[f] = if is_down {
                        FrameLabel::Downbeat
                    } else {
                        FrameLabel::Beat
                    };
                }
                (MelSpec { values }, labels)
            })
            .collect()
    }

    #[test]
    fn forward_shapes_simplex_and_determinism() {
        let cfg = TrackerConfig::default();
        let params = TrackerParams::init(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut values = Array2::zeros((32, 80));
        for v in values.iter_mut() {
            *v = rng.gen_range(-8.0..1.0);
        }
        let mel = MelSpec { values };
        let fr = 44100.0 / 256.0;
        let a = tracker_forward(&mel, &params, fr);
        assert_eq!(a.tracker_emb.dim(), (32, 50));
        assert_eq!(a.activations.dim(), (32, 3));
        a.validate().unwrap();
        let b = tracker_forward(&mel, &params, fr);
        assert_eq!(a.tracker_emb, b.tracker_emb);
        assert_eq!(a.activations, b.activations);
    }

    #[test]
    fn labels_from_times_priority_and_indexing() {
        let fr = 10.0;
        let labels = labels_from_times(&[0.0, 0.55, 1.0], &[0.0], 12, fr);
        assert_eq!(labels[0], FrameLabel::Downbeat);
        assert_eq!(labels[5], FrameLabel::Beat);
        assert_eq!(labels[10], FrameLabel::Beat);
        assert_eq!(labels[1], FrameLabel::NonBeat);
    }

    #[test]
    fn overfits_click_corpus() {
        let cfg = small_cfg();
        let corpus = click_corpus(&cfg, 2, 60, 3);
        let (params, trace) = train_tracker(&corpus, &cfg, 300, 7, 0.01, 2).unwrap();
        let acc = frame_accuracy(&params, &corpus, 44100.0 / 256.0);
        assert!(
            acc >= 0.9,
            "frame accuracy {acc} (loss {} -> {})",
            trace[0],
            trace.last().unwrap()
        );
    }

    #[test]
    fn zero_steps_returns_init() {
        let cfg = small_cfg();
        let corpus = click_corpus(&cfg, 1, 30, 4);
        let (params, trace) = train_tracker(&corpus, &cfg, 0, 11, 0.01, 1).unwrap();
        assert!(trace.is_empty());
        let fresh = TrackerParams::init(&cfg, 11);
        assert_eq!(params.named(), fresh.named());
    }

    #[test]
    fn training_is_seed_deterministic() {
        let cfg = small_cfg();
        let corpus = click_corpus(&cfg, 2, 40, 5);
        let (a, _) = train_tracker(&corpus, &cfg, 25, 13, 0.01, 2).unwrap();
        let (b, _) = train_tracker(&corpus, &cfg, 25, 13, 0.01, 2).unwrap();
        assert_eq!(a.named(), b.named());
    }

    #[test]
    fn empty_corpus_rejected() {
        let cfg = small_cfg();
        assert!(train_tracker(&[], &cfg, 5, 1, 0.01, 1).is_err());
    }
}
