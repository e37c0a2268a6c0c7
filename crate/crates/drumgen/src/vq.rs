//! Mel-domain VQ-VAE: convolutional encoder/decoder over the time axis,
//! nearest-prototype quantization with straight-through gradients, EMA
//! codebook learning, and a deterministic trainer.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::MelSpec;
use crate::error::{Error, Result};
use crate::nn::{init_uniform, init_xavier, Adam, Params, Tape, Var};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CodecConfig {
    /// Codebook size K.
    pub codebook_size: usize,
    /// Latent dimension D.
    pub latent_dim: usize,
    /// STFT frames represented by one code (L). Must equal `2^encoder_layers`.
    pub frames_per_code: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Channel width of the convolutional blocks.
    pub channels: usize,
    /// Mel bins consumed and produced by the codec.
    pub n_mels: usize,
    pub ema_decay: f64,
    pub commitment_beta: f64,
    /// Codebook entries whose EMA usage drops below this are reseeded.
    pub dead_code_threshold: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            codebook_size: 1024,
            latent_dim: 64,
            frames_per_code: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            channels: 128,
            n_mels: 80,
            ema_decay: 0.99,
            commitment_beta: 0.25,
            dead_code_threshold: 0.1,
        }
    }
}

impl CodecConfig {
    /// Paper-scale drum codec: K = 32.
    pub fn drum() -> Self {
        Self {
            codebook_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self, field_prefix: &str) -> Result<()> {
        let f = |name: &str| format!("{field_prefix}.{name}");
        if self.codebook_size < 2 {
            return Err(Error::config(f("codebook_size"), "need at least 2 entries"));
        }
        if self.frames_per_code != 1 << self.encoder_layers {
            return Err(Error::config(
                f("frames_per_code"),
                format!(
                    "must equal 2^encoder_layers = {}, got {}",
                    1 << self.encoder_layers,
                    self.frames_per_code
                ),
            ));
        }
        if self.decoder_layers != self.encoder_layers {
            return Err(Error::config(
                f("decoder_layers"),
                "encoder and decoder must be symmetric",
            ));
        }
        if self.latent_dim == 0 || self.channels == 0 || self.n_mels == 0 {
            return Err(Error::config(f("latent_dim"), "dimensions must be nonzero"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config(f("ema_decay"), "decay must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Learned prototype vectors plus the EMA statistics that train them.
#[derive(Debug, Clone)]
pub struct Codebook {
    /// `K x D` prototype vectors.
    pub vectors: Array2<f64>,
    /// `1 x K` EMA usage counts.
    pub usage: Array2<f64>,
    /// `K x D` EMA of assigned-latent sums.
    pub ema_sums: Array2<f64>,
    /// False until seeded from real latents by the trainer.
    pub initialized: bool,
}

impl Codebook {
    pub fn new(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let vectors = init_uniform(rng, k, d, 0.05);
        Self {
            usage: Array2::ones((1, k)),
            ema_sums: vectors.clone(),
            vectors,
            initialized: false,
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Seed every entry from a batch of latents (sampled with replacement).
    pub fn init_from_latents(&mut self, latents: &Array2<f64>, rng: &mut ChaCha8Rng) {
        let n = latents.nrows();
        for k in 0..self.len() {
            let pick = rng.gen_range(0..n);
            self.vectors.row_mut(k).assign(&latents.row(pick));
        }
        self.ema_sums.assign(&self.vectors);
        self.usage.fill(1.0);
        self.initialized = true;
    }
}

/// Sequence of latent vectors, `T x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSeq {
    pub values: Array2<f64>,
}

impl LatentSeq {
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

/// Discrete code sequence with its vocabulary size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSeq {
    pub ids: Vec<usize>,
    pub vocab: usize,
}

impl CodeSeq {
    pub fn new(ids: Vec<usize>, vocab: usize) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Shape(format!("code id {bad} out of range (K={vocab})")));
        }
        Ok(Self { ids, vocab })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Weights of one stride-2 residual conv block (encoder side).
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv1_w: Array2<f64>,
    pub conv1_b: Array2<f64>,
    pub conv2_w: Array2<f64>,
    pub conv2_b: Array2<f64>,
    pub proj_w: Array2<f64>,
    pub proj_b: Array2<f64>,
}

impl ConvBlock {
    fn init(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            conv1_w: init_xavier(rng, kernel * c_in, c_out),
            conv1_b: Array2::zeros((1, c_out)),
            conv2_w: init_xavier(rng, 3 * c_out, c_out),
            conv2_b: Array2::zeros((1, c_out)),
            proj_w: init_xavier(rng, c_in, c_out),
            proj_b: Array2::zeros((1, c_out)),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        f(&format!("{prefix}.conv1.w"), &self.conv1_w);
        f(&format!("{prefix}.conv1.b"), &self.conv1_b);
        f(&format!("{prefix}.conv2.w"), &self.conv2_w);
        f(&format!("{prefix}.conv2.b"), &self.conv2_b);
        f(&format!("{prefix}.proj.w"), &self.proj_w);
        f(&format!("{prefix}.proj.b"), &self.proj_b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        f(&format!("{prefix}.conv1.w"), &mut self.conv1_w);
        f(&format!("{prefix}.conv1.b"), &mut self.conv1_b);
        f(&format!("{prefix}.conv2.w"), &mut self.conv2_w);
        f(&format!("{prefix}.conv2.b"), &mut self.conv2_b);
        f(&format!("{prefix}.proj.w"), &mut self.proj_w);
        f(&format!("{prefix}.proj.b"), &mut self.proj_b);
    }
}

/// Full codec parameters: encoder, decoder, and codebook.
#[derive(Debug, Clone)]
pub struct CodecParams {
    pub cfg: CodecConfig,
    pub enc_blocks: Vec<ConvBlock>,
    pub enc_head_w: Array2<f64>,
    pub enc_head_b: Array2<f64>,
    pub dec_in_w: Array2<f64>,
    pub dec_in_b: Array2<f64>,
    pub dec_blocks: Vec<ConvBlock>,
    pub dec_head_w: Array2<f64>,
    pub dec_head_b: Array2<f64>,
    pub codebook: Codebook,
}

impl CodecParams {
    pub fn init(cfg: &CodecConfig, seed: u64) -> Result<Self> {
        cfg.validate("codec")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = cfg.channels;
        let enc_blocks = (0..cfg.encoder_layers)
            .map(|l| {
                let c_in = if l == 0 { cfg.n_mels } else { ch };
                ConvBlock::init(&mut rng, c_in, ch, 4)
            })
            .collect();
        let dec_blocks = (0..cfg.decoder_layers)
            .map(|_| ConvBlock::init(&mut rng, ch, ch, 4))
            .collect();
        Ok(Self {
            enc_blocks,
            dec_blocks,
            enc_head_w: init_xavier(&mut rng, ch, cfg.latent_dim),
            enc_head_b: Array2::zeros((1, cfg.latent_dim)),
            dec_in_w: init_xavier(&mut rng, cfg.latent_dim, ch),
            dec_in_b: Array2::zeros((1, ch)),
            dec_head_w: init_xavier(&mut rng, ch, cfg.n_mels),
            dec_head_b: Array2::zeros((1, cfg.n_mels)),
            codebook: Codebook::new(cfg.codebook_size, cfg.latent_dim, &mut rng),
            cfg: cfg.clone(),
        })
    }
}

impl Params for CodecParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        for (i, b) in self.enc_blocks.iter().enumerate() {
            b.visit(&format!("enc.{i}"), f);
        }
        f("enc.head.w", &self.enc_head_w);
        f("enc.head.b", &self.enc_head_b);
        f("dec.in.w", &self.dec_in_w);
        f("dec.in.b", &self.dec_in_b);
        for (i, b) in self.dec_blocks.iter().enumerate() {
            b.visit(&format!("dec.{i}"), f);
        }
        f("dec.head.w", &self.dec_head_w);
        f("dec.head.b", &self.dec_head_b);
        f("codebook.vectors", &self.codebook.vectors);
        f("codebook.usage", &self.codebook.usage);
        f("codebook.ema_sums", &self.codebook.ema_sums);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        for (i, b) in self.enc_blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("enc.{i}"), f);
        }
        f("enc.head.w", &mut self.enc_head_w);
        f("enc.head.b", &mut self.enc_head_b);
        f("dec.in.w", &mut self.dec_in_w);
        f("dec.in.b", &mut self.dec_in_b);
        for (i, b) in self.dec_blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("dec.{i}"), f);
        }
        f("dec.head.w", &mut self.dec_head_w);
        f("dec.head.b", &mut self.dec_head_b);
        f("codebook.vectors", &mut self.codebook.vectors);
        f("codebook.usage", &mut self.codebook.usage);
        f("codebook.ema_sums", &mut self.codebook.ema_sums);
    }
}

/// Tape-bound codec parameters.
pub struct CodecVars<'t> {
    enc_blocks: Vec<[Var<'t>; 6]>,
    enc_head_w: Var<'t>,
    enc_head_b: Var<'t>,
    dec_in_w: Var<'t>,
    dec_in_b: Var<'t>,
    dec_blocks: Vec<[Var<'t>; 6]>,
    dec_head_w: Var<'t>,
    dec_head_b: Var<'t>,
}

/// Insert all trainable codec weights as tape leaves, returning both the
/// bound view and the node names for gradient collection.
pub fn bind<'t>(tape: &'t Tape, params: &CodecParams) -> (CodecVars<'t>, Vec<(String, Var<'t>)>) {
    let mut named = Vec::new();
    let mut bind_block = |prefix: &str, b: &ConvBlock| -> [Var<'t>; 6] {
        let vars = [
            tape.leaf(b.conv1_w.clone()),
            tape.leaf(b.conv1_b.clone()),
            tape.leaf(b.conv2_w.clone()),
            tape.leaf(b.conv2_b.clone()),
            tape.leaf(b.proj_w.clone()),
            tape.leaf(b.proj_b.clone()),
        ];
        for (v, name) in vars.iter().zip([
            "conv1.w", "conv1.b", "conv2.w", "conv2.b", "proj.w", "proj.b",
        ]) {
            named.push((format!("{prefix}.{name}"), *v));
        }
        vars
    };
    let enc_blocks: Vec<_> = params
        .enc_blocks
        .iter()
        .enumerate()
        .map(|(i, b)| bind_block(&format!("enc.{i}"), b))
        .collect();
    let dec_blocks: Vec<_> = params
        .dec_blocks
        .iter()
        .enumerate()
        .map(|(i, b)| bind_block(&format!("dec.{i}"), b))
        .collect();
    let mut named_leaf = |name: &str, a: &Array2<f64>| {
        let v = tape.leaf(a.clone());
        named.push((name.to_string(), v));
        v
    };
    let vars = CodecVars {
        enc_blocks,
        dec_blocks,
        enc_head_w: named_leaf("enc.head.w", &params.enc_head_w),
        enc_head_b: named_leaf("enc.head.b", &params.enc_head_b),
        dec_in_w: named_leaf("dec.in.w", &params.dec_in_w),
        dec_in_b: named_leaf("dec.in.b", &params.dec_in_b),
        dec_head_w: named_leaf("dec.head.w", &params.dec_head_w),
        dec_head_b: named_leaf("dec.head.b", &params.dec_head_b),
    };
    (vars, named)
}

/// Encoder graph: mel rows -> `T x D` latents. Halves the frame count per block.
pub fn encode_graph<'t>(vars: &CodecVars<'t>, mel: Var<'t>) -> Var<'t> {
    let mut x = mel;
    for [c1w, c1b, c2w, c2b, pw, pb] in &vars.enc_blocks {
        let h = x.unfold(4, 2, 1).matmul(*c1w).add_bias(*c1b).relu();
        let h = h.unfold(3, 1, 1).matmul(*c2w).add_bias(*c2b);
        // Strided shortcut: keep every second row, then a pointwise projection.
        let shortcut = x.unfold(1, 2, 0).matmul(*pw).add_bias(*pb);
        x = h.add(shortcut).relu();
    }
    x.matmul(vars.enc_head_w).add_bias(vars.enc_head_b)
}

/// Decoder graph: `T x D` latents -> mel rows. Doubles the frame count per block.
pub fn decode_graph<'t>(vars: &CodecVars<'t>, latents: Var<'t>) -> Var<'t> {
    let mut x = latents.matmul(vars.dec_in_w).add_bias(vars.dec_in_b);
    for [c1w, c1b, c2w, c2b, pw, pb] in &vars.dec_blocks {
        // Transposed conv k4 s2 p1 as zero-stuffing plus a k4 s1 p2 conv.
        let h = x.zero_stuff().unfold(4, 1, 2).matmul(*c1w).add_bias(*c1b).relu();
        let h = h.unfold(3, 1, 1).matmul(*c2w).add_bias(*c2b);
        let shortcut = x.repeat_rows(2).matmul(*pw).add_bias(*pb);
        x = h.add(shortcut).relu();
    }
    x.matmul(vars.dec_head_w).add_bias(vars.dec_head_b)
}

/// Encode a mel spectrogram to its latent sequence.
pub fn encode(mel: &MelSpec, params: &CodecParams) -> Result<LatentSeq> {
    let l = params.cfg.frames_per_code;
    if mel.frames() % l != 0 {
        return Err(Error::Shape(format!(
            "mel frame count {} not divisible by frames_per_code {l}",
            mel.frames()
        )));
    }
    if mel.bins() != params.cfg.n_mels {
        return Err(Error::Shape(format!(
            "mel has {} bins, codec expects {}",
            mel.bins(),
            params.cfg.n_mels
        )));
    }
    let tape = Tape::new();
    let (vars, _) = bind(&tape, params);
    let mel_var = tape.leaf(mel.values.clone());
    Ok(LatentSeq {
        values: encode_graph(&vars, mel_var).value(),
    })
}

/// Nearest-prototype quantization with lowest-index tie-breaking.
pub fn quantize(latents: &LatentSeq, codebook: &Codebook) -> Result<(CodeSeq, LatentSeq)> {
    if latents.dim() != codebook.dim() {
        return Err(Error::Shape(format!(
            "latent dim {} != codebook dim {}",
            latents.dim(),
            codebook.dim()
        )));
    }
    let t_len = latents.len();
    let k = codebook.len();
    let mut ids = Vec::with_capacity(t_len);
    let mut quantized = Array2::zeros((t_len, latents.dim()));
    for t in 0..t_len {
        let h = latents.values.row(t);
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for idx in 0..k {
            let e = codebook.vectors.row(idx);
            let dist: f64 = h
                .iter()
                .zip(e.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if dist < best_dist {
                best_dist = dist;
                best = idx;
            }
        }
        ids.push(best);
        quantized.row_mut(t).assign(&codebook.vectors.row(best));
    }
    Ok((
        CodeSeq::new(ids, k)?,
        LatentSeq { values: quantized },
    ))
}

/// Decode quantized latents back to a mel spectrogram.
pub fn decode(quantized: &LatentSeq, params: &CodecParams) -> Result<MelSpec> {
    if quantized.dim() != params.cfg.latent_dim {
        return Err(Error::Shape(format!(
            "latent dim {} != codec dim {}",
            quantized.dim(),
            params.cfg.latent_dim
        )));
    }
    let tape = Tape::new();
    let (vars, _) = bind(&tape, params);
    let latent_var = tape.leaf(quantized.values.clone());
    Ok(MelSpec {
        values: decode_graph(&vars, latent_var).value(),
    })
}

/// Look up codebook rows for a code sequence (LM output path).
pub fn embed_codes(codes: &CodeSeq, codebook: &Codebook) -> Result<LatentSeq> {
    if codes.vocab != codebook.len() {
        return Err(Error::Shape(format!(
            "code vocab {} != codebook size {}",
            codes.vocab,
            codebook.len()
        )));
    }
    let mut values = Array2::zeros((codes.len(), codebook.dim()));
    for (t, &id) in codes.ids.iter().enumerate() {
        values.row_mut(t).assign(&codebook.vectors.row(id));
    }
    Ok(LatentSeq { values })
}

/// How the quantizer participates in the loss graph.
pub enum QuantMode<'a> {
    /// Live nearest-neighbor quantization (production path).
    Nearest,
    /// Bypass the quantizer entirely; the decoder sees raw latents.
    Identity,
    /// Use fixed quantizer outputs captured at a base point. Finite
    /// differences of this graph respect stop-gradient semantics.
    Frozen(&'a FrozenQuant),
}

/// Quantizer constants captured at a base parameter point.
pub struct FrozenQuant {
    /// `quantized - latents` at the base point (straight-through offset).
    pub offset: Array2<f64>,
    /// Quantized latents at the base point (commitment target).
    pub targets: Array2<f64>,
}

impl FrozenQuant {
    /// Capture the quantizer outputs for `mel` at the current parameters.
    pub fn capture(mel: &MelSpec, params: &CodecParams) -> Result<Self> {
        let latents = encode(mel, params)?;
        let (_, quantized) = quantize(&latents, &params.codebook)?;
        Ok(Self {
            offset: &quantized.values - &latents.values,
            targets: quantized.values,
        })
    }
}

/// Outputs of one clip's loss graph.
pub struct ClipLoss<'t> {
    pub total: Var<'t>,
    pub reconstruction: Var<'t>,
    pub commitment: Var<'t>,
    pub latents: Array2<f64>,
    pub ids: Vec<usize>,
}

/// Build the straight-through VQ-VAE loss for one mel clip.
pub fn loss_graph<'t>(
    tape: &'t Tape,
    vars: &CodecVars<'t>,
    codebook: &Codebook,
    mel: &MelSpec,
    beta: f64,
    mode: &QuantMode<'_>,
) -> Result<ClipLoss<'t>> {
    let mel_var = tape.leaf(mel.values.clone());
    let h = encode_graph(vars, mel_var);
    let h_val = h.value();
    let t_len = h_val.nrows();

    let (dec_in, commit_target, ids) = match mode {
        QuantMode::Nearest => {
            let latents = LatentSeq {
                values: h_val.clone(),
            };
            let (codes, quantized) = quantize(&latents, codebook)?;
            let offset = tape.leaf(&quantized.values - &h_val);
            (h.add(offset), tape.leaf(quantized.values), codes.ids)
        }
        QuantMode::Identity => (h, h.detach(), vec![0; t_len]),
        QuantMode::Frozen(frozen) => {
            let offset = tape.leaf(frozen.offset.clone());
            (h.add(offset), tape.leaf(frozen.targets.clone()), vec![0; t_len])
        }
    };

    let recon_raw = decode_graph(vars, dec_in).sub(mel_var);
    let reconstruction = recon_raw.mul(recon_raw).mean_all();

    let commit_diff = h.sub(commit_target);
    let commitment = commit_diff
        .mul(commit_diff)
        .sum_all()
        .scale(1.0 / t_len as f64);

    let total = reconstruction.add(commitment.scale(beta));
    Ok(ClipLoss {
        total,
        reconstruction,
        commitment,
        latents: h_val,
        ids,
    })
}

/// Reconstruction and commitment losses for one clip at the current params.
pub fn vq_losses(mel: &MelSpec, params: &CodecParams) -> Result<(f64, f64)> {
    let tape = Tape::new();
    let (vars, _) = bind(&tape, params);
    let loss = loss_graph(
        &tape,
        &vars,
        &params.codebook,
        mel,
        params.cfg.commitment_beta,
        &QuantMode::Nearest,
    )?;
    Ok((
        loss.reconstruction.value()[[0, 0]],
        loss.commitment.value()[[0, 0]],
    ))
}

/// One EMA codebook update from a batch of assigned latents, followed by
/// dead-code reseeding.
pub fn codebook_update(
    codebook: &mut Codebook,
    latents: &LatentSeq,
    ids: &CodeSeq,
    threshold: f64,
    decay: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if ids.len() != latents.len() {
        return Err(Error::Shape("ids/latents length mismatch".into()));
    }
    if ids.vocab != codebook.len() {
        return Err(Error::Shape("ids vocab != codebook size".into()));
    }
    let k = codebook.len();
    let d = codebook.dim();
    let mut counts = vec![0.0f64; k];
    let mut sums = Array2::<f64>::zeros((k, d));
    for (t, &id) in ids.ids.iter().enumerate() {
        counts[id] += 1.0;
        let mut row = sums.row_mut(id);
        row += &latents.values.row(t);
    }
    for idx in 0..k {
        let usage = decay * codebook.usage[[0, idx]] + (1.0 - decay) * counts[idx];
        codebook.usage[[0, idx]] = usage;
        for c in 0..d {
            codebook.ema_sums[[idx, c]] =
                decay * codebook.ema_sums[[idx, c]] + (1.0 - decay) * sums[[idx, c]];
        }
        if usage > 1e-12 {
            for c in 0..d {
                codebook.vectors[[idx, c]] = codebook.ema_sums[[idx, c]] / usage;
            }
        }
    }
    // Reseed starved entries from the current batch.
    for idx in 0..k {
        if codebook.usage[[0, idx]] < threshold {
            let pick = rng.gen_range(0..latents.len());
            codebook.vectors.row_mut(idx).assign(&latents.values.row(pick));
            codebook.ema_sums.row_mut(idx).assign(&latents.values.row(pick));
            codebook.usage[[0, idx]] = 1.0;
        }
    }
    Ok(())
}

/// Deterministic per-step RNG: one ChaCha stream per step.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_add(1));
    rng
}

/// Stateful codec trainer; the pipeline drives it step by step so training
/// can checkpoint and resume exactly.
pub struct CodecTrainer {
    pub params: CodecParams,
    pub adam: Adam,
    pub step: u64,
    pub seed: u64,
    pub batch: usize,
}

/// Per-step losses reported by the trainers.
#[derive(Debug, Clone, Copy)]
pub struct StepLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub commitment: f64,
}

impl CodecTrainer {
    pub fn new(cfg: &CodecConfig, seed: u64, lr: f64, batch: usize) -> Result<Self> {
        Ok(Self {
            params: CodecParams::init(cfg, seed)?,
            adam: Adam::new(lr),
            step: 0,
            seed,
            batch,
        })
    }

    /// Run one minibatch step over the corpus.
    pub fn train_step(&mut self, corpus: &[MelSpec]) -> Result<StepLoss> {
        if corpus.is_empty() {
            return Err(Error::Dataset("empty codec training corpus".into()));
        }
        let mut rng = step_rng(self.seed, self.step);
        let batch: Vec<&MelSpec> = (0..self.batch)
            .map(|_| &corpus[rng.gen_range(0..corpus.len())])
            .collect();

        let tape = Tape::new();
        let (vars, named) = bind(&tape, &self.params);

        // Data-dependent codebook init from the first batch's latents.
        if !self.params.codebook.initialized {
            let mut all = Vec::new();
            for mel in &batch {
                let mel_var = tape.leaf(mel.values.clone());
                all.push(encode_graph(&vars, mel_var).value());
            }
            let rows: usize = all.iter().map(|a| a.nrows()).sum();
            let mut stacked = Array2::zeros((rows, self.params.cfg.latent_dim));
            let mut at = 0;
            for a in &all {
                stacked
                    .slice_mut(ndarray::s![at..at + a.nrows(), ..])
                    .assign(a);
                at += a.nrows();
            }
            self.params.codebook.init_from_latents(&stacked, &mut rng);
        }

        let mut total = None;
        let mut recon_sum = 0.0;
        let mut commit_sum = 0.0;
        let mut batch_latents: Vec<Array2<f64>> = Vec::new();
        let mut batch_ids: Vec<usize> = Vec::new();
        for mel in &batch {
            let clip = loss_graph(
                &tape,
                &vars,
                &self.params.codebook,
                mel,
                self.params.cfg.commitment_beta,
                &QuantMode::Nearest,
            )?;
            recon_sum += clip.reconstruction.value()[[0, 0]];
            commit_sum += clip.commitment.value()[[0, 0]];
            batch_latents.push(clip.latents);
            batch_ids.extend(clip.ids);
            total = Some(match total {
                None => clip.total,
                Some(acc) => clip.total.add(acc),
            });
        }
        let loss = total.expect("nonempty batch").scale(1.0 / batch.len() as f64);
        let loss_val = loss.value()[[0, 0]];
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("codec loss {loss_val}"),
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

        // EMA codebook update on this batch's assignments.
        let rows: usize = batch_latents.iter().map(|a| a.nrows()).sum();
        let mut stacked = Array2::zeros((rows, self.params.cfg.latent_dim));
        let mut at = 0;
        for a in &batch_latents {
            stacked
                .slice_mut(ndarray::s![at..at + a.nrows(), ..])
                .assign(a);
            at += a.nrows();
        }
        let latents = LatentSeq { values: stacked };
        let ids = CodeSeq::new(batch_ids, self.params.cfg.codebook_size)?;
        codebook_update(
            &mut self.params.codebook,
            &latents,
            &ids,
            self.params.cfg.dead_code_threshold,
            self.params.cfg.ema_decay,
            &mut rng,
        )?;

        self.step += 1;
        Ok(StepLoss {
            total: loss_val,
            reconstruction: recon_sum / batch.len() as f64,
            commitment: commit_sum / batch.len() as f64,
        })
    }
}

/// Train a codec for a fixed number of steps, returning the loss trace.
pub fn train_codec(
    corpus: &[MelSpec],
    cfg: &CodecConfig,
    steps: u64,
    seed: u64,
    lr: f64,
    batch: usize,
) -> Result<(CodecParams, Vec<StepLoss>)> {
    if corpus.is_empty() {
        return Err(Error::Dataset("empty codec training corpus".into()));
    }
    let mut trainer = CodecTrainer::new(cfg, seed, lr, batch)?;
    let mut trace = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        trace.push(trainer.train_step(corpus)?);
    }
    Ok((trainer.params, trace))
}
