//! Seq2seq code language model with chunked factorized attention and
//! additive beat conditioning.

pub mod pattern;
mod sample;

pub use pattern::{allowed_positions, build_pattern, layer_kinds, AttentionPattern, PatternKind};
pub use sample::sample;

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cond::{BeatCondSeq, CondInput, CondParams};
use crate::error::{Error, Result};
use crate::nn::{init_uniform, init_xavier, Adam, Params, Tape, Var};
use crate::vq::{step_rng, CodeSeq};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LMConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Chunk size for the factorized attention patterns.
    pub chunk: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Code sequence length.
    pub t: usize,
    /// Drumless vocabulary including the start token (K^m + 1).
    pub vocab_in: usize,
    /// Drum vocabulary including the start token (K^d + 1).
    pub vocab_out: usize,
    pub dropout: f64,
    /// Feed-forward expansion factor.
    pub ff_mult: usize,
    /// False for the decoder-only variants.
    pub seq2seq: bool,
    /// Inject the beat condition on the encoder side.
    pub cond_encoder: bool,
    /// Inject the beat condition on the decoder side.
    pub cond_decoder: bool,
}

impl LMConfig {
    /// Full-scale configuration: 9 encoder layers, 20 decoder layers,
    /// d_model 512, 2 heads, chunk 16, T = 1024.
    pub fn full_scale(vocab_in_codes: usize, vocab_out_codes: usize) -> Self {
        Self {
            d_model: 512,
            heads: 2,
            chunk: 16,
            encoder_layers: 9,
            decoder_layers: 20,
            t: 1024,
            vocab_in: vocab_in_codes + 1,
            vocab_out: vocab_out_codes + 1,
            dropout: 0.0,
            ff_mult: 4,
            seq2seq: true,
            cond_encoder: true,
            cond_decoder: true,
        }
    }

    /// The decoder-only counterpart drops the five encoder/decoder attention
    /// layers, going from 20 layers to 15.
    pub fn into_decoder_only(mut self) -> Self {
        if self.seq2seq {
            let enc_dec = layer_kinds(self.decoder_layers, true)
                .iter()
                .filter(|k| **k == PatternKind::EncDec)
                .count();
            self.decoder_layers -= enc_dec;
            self.seq2seq = false;
        }
        self
    }

    pub fn validate(&self, field_prefix: &str) -> Result<()> {
        let f = |name: &str| format!("{field_prefix}.{name}");
        if self.chunk == 0 || self.t % self.chunk != 0 {
            return Err(Error::config(
                f("chunk"),
                format!("T ({}) must be divisible by chunk ({})", self.t, self.chunk),
            ));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(
                f("heads"),
                format!("heads ({}) must divide d_model ({})", self.heads, self.d_model),
            ));
        }
        if self.vocab_out < 2 || self.vocab_in < 2 {
            return Err(Error::config(f("vocab_out"), "vocabularies need >= 2 entries"));
        }
        if self.decoder_layers == 0 {
            return Err(Error::config(f("decoder_layers"), "need at least one layer"));
        }
        if self.seq2seq && self.encoder_layers == 0 {
            return Err(Error::config(f("encoder_layers"), "seq2seq needs encoder layers"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(f("dropout"), "dropout must lie in [0, 1)"));
        }
        if self.ff_mult == 0 {
            return Err(Error::config(f("ff_mult"), "ff_mult must be positive"));
        }
        Ok(())
    }

    /// Start-of-sequence token for the decoder vocabulary.
    pub fn start_token(&self) -> usize {
        self.vocab_out - 1
    }

    /// Width of the decoder logits (drum codes only, no start token).
    pub fn logits_vocab(&self) -> usize {
        self.vocab_out - 1
    }
}

/// One attention + feed-forward block.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array2<f64>,
    pub wk: Array2<f64>,
    pub bk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub ln1_g: Array2<f64>,
    pub ln1_b: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    pub ln2_g: Array2<f64>,
    pub ln2_b: Array2<f64>,
}

impl LayerParams {
    fn init(rng: &mut ChaCha8Rng, d: usize, ff: usize) -> Self {
        Self {
            wq: init_xavier(rng, d, d),
            bq: Array2::zeros((1, d)),
            wk: init_xavier(rng, d, d),
            bk: Array2::zeros((1, d)),
            wv: init_xavier(rng, d, d),
            bv: Array2::zeros((1, d)),
            wo: init_xavier(rng, d, d),
            bo: Array2::zeros((1, d)),
            ln1_g: Array2::ones((1, d)),
            ln1_b: Array2::zeros((1, d)),
            w1: init_xavier(rng, d, ff),
            b1: Array2::zeros((1, ff)),
            w2: init_xavier(rng, ff, d),
            b2: Array2::zeros((1, d)),
            ln2_g: Array2::ones((1, d)),
            ln2_b: Array2::zeros((1, d)),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        for (name, a) in self.fields() {
            f(&format!("{prefix}.{name}"), a);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        for (name, a) in self.fields_mut() {
            f(&format!("{prefix}.{name}"), a);
        }
    }

    fn fields(&self) -> [(&'static str, &Array2<f64>); 16] {
        [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln1.g", &self.ln1_g),
            ("ln1.b", &self.ln1_b),
            ("ff.w1", &self.w1),
            ("ff.b1", &self.b1),
            ("ff.w2", &self.w2),
            ("ff.b2", &self.b2),
            ("ln2.g", &self.ln2_g),
            ("ln2.b", &self.ln2_b),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Array2<f64>); 16] {
        [
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln1.g", &mut self.ln1_g),
            ("ln1.b", &mut self.ln1_b),
            ("ff.w1", &mut self.w1),
            ("ff.b1", &mut self.b1),
            ("ff.w2", &mut self.w2),
            ("ff.b2", &mut self.b2),
            ("ln2.g", &mut self.ln2_g),
            ("ln2.b", &mut self.ln2_b),
        ]
    }
}

/// Encoder-side parameters (absent for decoder-only models).
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub tok: Array2<f64>,
    pub pos: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub ln_g: Array2<f64>,
    pub ln_b: Array2<f64>,
}

/// Full language-model parameters, conditioning tables included.
#[derive(Debug, Clone)]
pub struct LMParams {
    pub cfg: LMConfig,
    pub enc: Option<EncoderParams>,
    pub tok_out: Array2<f64>,
    pub pos_dec: Array2<f64>,
    pub dec_layers: Vec<LayerParams>,
    pub ln_f_g: Array2<f64>,
    pub ln_f_b: Array2<f64>,
    /// Output projection, zero-initialized so the untrained model emits
    /// uniform logits.
    pub out_w: Array2<f64>,
    pub out_b: Array2<f64>,
    pub cond: CondParams,
}

impl LMParams {
    pub fn init(cfg: &LMConfig, seed: u64, tracker_emb_dim: usize) -> Result<Self> {
        cfg.validate("lm")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let ff = cfg.ff_mult * d;
        let enc = if cfg.seq2seq {
            Some(EncoderParams {
                tok: init_uniform(&mut rng, cfg.vocab_in, d, 0.05),
                pos: init_uniform(&mut rng, cfg.t, d, 0.05),
                layers: (0..cfg.encoder_layers)
                    .map(|_| LayerParams::init(&mut rng, d, ff))
                    .collect(),
                ln_g: Array2::ones((1, d)),
                ln_b: Array2::zeros((1, d)),
            })
        } else {
            None
        };
        Ok(Self {
            enc,
            tok_out: init_uniform(&mut rng, cfg.vocab_out, d, 0.05),
            pos_dec: init_uniform(&mut rng, cfg.t, d, 0.05),
            dec_layers: (0..cfg.decoder_layers)
                .map(|_| LayerParams::init(&mut rng, d, ff))
                .collect(),
            ln_f_g: Array2::ones((1, d)),
            ln_f_b: Array2::zeros((1, d)),
            out_w: Array2::zeros((d, cfg.logits_vocab())),
            out_b: Array2::zeros((1, cfg.logits_vocab())),
            cond: CondParams::init(tracker_emb_dim, d, &mut rng),
            cfg: cfg.clone(),
        })
    }
}

impl Params for LMParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        if let Some(enc) = &self.enc {
            f("enc.tok", &enc.tok);
            f("enc.pos", &enc.pos);
            for (i, l) in enc.layers.iter().enumerate() {
                l.visit(&format!("enc.{i}"), f);
            }
            f("enc.ln.g", &enc.ln_g);
            f("enc.ln.b", &enc.ln_b);
        }
        f("dec.tok", &self.tok_out);
        f("dec.pos", &self.pos_dec);
        for (i, l) in self.dec_layers.iter().enumerate() {
            l.visit(&format!("dec.{i}"), f);
        }
        f("dec.ln.g", &self.ln_f_g);
        f("dec.ln.b", &self.ln_f_b);
        f("out.w", &self.out_w);
        f("out.b", &self.out_b);
        f("cond.low.w", &self.cond.low_w);
        f("cond.low.b", &self.cond.low_b);
        f("cond.high", &self.cond.high_table);
        f("cond.mid", &self.cond.mid_table);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        if let Some(enc) = &mut self.enc {
            f("enc.tok", &mut enc.tok);
            f("enc.pos", &mut enc.pos);
            for (i, l) in enc.layers.iter_mut().enumerate() {
                l.visit_mut(&format!("enc.{i}"), f);
            }
            f("enc.ln.g", &mut enc.ln_g);
            f("enc.ln.b", &mut enc.ln_b);
        }
        f("dec.tok", &mut self.tok_out);
        f("dec.pos", &mut self.pos_dec);
        for (i, l) in self.dec_layers.iter_mut().enumerate() {
            l.visit_mut(&format!("dec.{i}"), f);
        }
        f("dec.ln.g", &mut self.ln_f_g);
        f("dec.ln.b", &mut self.ln_f_b);
        f("out.w", &mut self.out_w);
        f("out.b", &mut self.out_b);
        f("cond.low.w", &mut self.cond.low_w);
        f("cond.low.b", &mut self.cond.low_b);
        f("cond.high", &mut self.cond.high_table);
        f("cond.mid", &mut self.cond.mid_table);
    }
}

struct LayerVars<'t> {
    vars: [Var<'t>; 16],
}

impl<'t> LayerVars<'t> {
    fn wq(&self) -> Var<'t> {
        self.vars[0]
    }
    fn bq(&self) -> Var<'t> {
        self.vars[1]
    }
    fn wk(&self) -> Var<'t> {
        self.vars[2]
    }
    fn bk(&self) -> Var<'t> {
        self.vars[3]
    }
    fn wv(&self) -> Var<'t> {
        self.vars[4]
    }
    fn bv(&self) -> Var<'t> {
        self.vars[5]
    }
    fn wo(&self) -> Var<'t> {
        self.vars[6]
    }
    fn bo(&self) -> Var<'t> {
        self.vars[7]
    }
    fn ln1(&self) -> (Var<'t>, Var<'t>) {
        (self.vars[8], self.vars[9])
    }
    fn ffn(&self) -> (Var<'t>, Var<'t>, Var<'t>, Var<'t>) {
        (self.vars[10], self.vars[11], self.vars[12], self.vars[13])
    }
    fn ln2(&self) -> (Var<'t>, Var<'t>) {
        (self.vars[14], self.vars[15])
    }
}

struct LMVars<'t> {
    enc_tok: Option<Var<'t>>,
    enc_pos: Option<Var<'t>>,
    enc_layers: Vec<LayerVars<'t>>,
    enc_ln: Option<(Var<'t>, Var<'t>)>,
    dec_tok: Var<'t>,
    dec_pos: Var<'t>,
    dec_layers: Vec<LayerVars<'t>>,
    dec_ln: (Var<'t>, Var<'t>),
    out_w: Var<'t>,
    out_b: Var<'t>,
    cond_low_w: Var<'t>,
    cond_low_b: Var<'t>,
    cond_high: Var<'t>,
    cond_mid: Var<'t>,
}

fn leaf<'t>(
    tape: &'t Tape,
    named: &mut Vec<(String, Var<'t>)>,
    name: String,
    a: &Array2<f64>,
) -> Var<'t> {
    let v = tape.leaf(a.clone());
    named.push((name, v));
    v
}

fn bind_layer<'t>(
    tape: &'t Tape,
    named: &mut Vec<(String, Var<'t>)>,
    prefix: &str,
    l: &LayerParams,
) -> LayerVars<'t> {
    let mut vars = Vec::with_capacity(16);
    for (name, a) in l.fields() {
        vars.push(leaf(tape, named, format!("{prefix}.{name}"), a));
    }
    LayerVars {
        vars: vars.try_into().unwrap_or_else(|_| unreachable!()),
    }
}

fn bind<'t>(tape: &'t Tape, params: &LMParams) -> (LMVars<'t>, Vec<(String, Var<'t>)>) {
    let mut named: Vec<(String, Var<'t>)> = Vec::new();
    let n = &mut named;
    let (enc_tok, enc_pos, enc_layers, enc_ln) = match &params.enc {
        Some(enc) => {
            let tok = leaf(tape, n, "enc.tok".into(), &enc.tok);
            let pos = leaf(tape, n, "enc.pos".into(), &enc.pos);
            let layers = enc
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| bind_layer(tape, n, &format!("enc.{i}"), l))
                .collect();
            let ln = (
                leaf(tape, n, "enc.ln.g".into(), &enc.ln_g),
                leaf(tape, n, "enc.ln.b".into(), &enc.ln_b),
            );
            (Some(tok), Some(pos), layers, Some(ln))
        }
        None => (None, None, Vec::new(), None),
    };
    let dec_tok = leaf(tape, n, "dec.tok".into(), &params.tok_out);
    let dec_pos = leaf(tape, n, "dec.pos".into(), &params.pos_dec);
    let dec_layers = params
        .dec_layers
        .iter()
        .enumerate()
        .map(|(i, l)| bind_layer(tape, n, &format!("dec.{i}"), l))
        .collect();
    let dec_ln = (
        leaf(tape, n, "dec.ln.g".into(), &params.ln_f_g),
        leaf(tape, n, "dec.ln.b".into(), &params.ln_f_b),
    );
    let vars = LMVars {
        enc_tok,
        enc_pos,
        enc_layers,
        enc_ln,
        dec_tok,
        dec_pos,
        dec_layers,
        dec_ln,
        out_w: leaf(tape, n, "out.w".into(), &params.out_w),
        out_b: leaf(tape, n, "out.b".into(), &params.out_b),
        cond_low_w: leaf(tape, n, "cond.low.w".into(), &params.cond.low_w),
        cond_low_b: leaf(tape, n, "cond.low.b".into(), &params.cond.low_b),
        cond_high: leaf(tape, n, "cond.high".into(), &params.cond.high_table),
        cond_mid: leaf(tape, n, "cond.mid".into(), &params.cond.mid_table),
    };
    (vars, named)
}

/// Training-time dropout state; inference passes `None`.
struct Dropout<'r> {
    rate: f64,
    rng: &'r std::cell::RefCell<ChaCha8Rng>,
}

impl Dropout<'_> {
    /// Inverted-dropout mask multiplication.
    fn apply<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        if self.rate <= 0.0 {
            return x;
        }
        let (r, c) = x.dim();
        let keep = 1.0 - self.rate;
        let mut rng = self.rng.borrow_mut();
        let mut mask = Array2::zeros((r, c));
        for v in mask.iter_mut() {
            *v = if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 };
        }
        x.mul(tape.leaf(mask))
    }
}

/// Build the conditioning rows on the tape so the tables receive gradients.
fn cond_graph<'t>(tape: &'t Tape, vars: &LMVars<'t>, input: &CondInput) -> Option<Var<'t>> {
    match input {
        CondInput::None => None,
        CondInput::Low(pooled) => {
            let p = tape.leaf(pooled.clone());
            Some(p.matmul(vars.cond_low_w).add_bias(vars.cond_low_b))
        }
        CondInput::High(labels) => Some(vars.cond_high.gather_rows(Rc::new(labels.clone()))),
        CondInput::Mid(labels) => Some(vars.cond_mid.gather_rows(Rc::new(labels.clone()))),
    }
}

/// One attention + feed-forward block on the tape.
fn block<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    memory: Option<Var<'t>>,
    layer: &LayerVars<'t>,
    mask: Option<Rc<Array2<bool>>>,
    heads: usize,
    drop: Option<&Dropout<'_>>,
) -> Var<'t> {
    let (g1, b1) = layer.ln1();
    let xn = x.layer_norm(g1, b1);
    let kv_src = memory.unwrap_or(xn);
    let q = xn.matmul(layer.wq()).add_bias(layer.bq());
    let k = kv_src.matmul(layer.wk()).add_bias(layer.bk());
    let v = kv_src.matmul(layer.wv()).add_bias(layer.bv());
    let d = q.dim().1;
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut ctxs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let qh = q.slice_cols(lo, hi);
        let kh = k.slice_cols(lo, hi);
        let vh = v.slice_cols(lo, hi);
        let scores = qh.matmul(kh.transpose()).scale(scale);
        let attn = match &mask {
            Some(m) => scores.masked_softmax(Rc::clone(m)),
            None => scores.softmax(),
        };
        ctxs.push(attn.matmul(vh));
    }
    let ctx = Var::concat_cols(&ctxs);
    let mut attn_out = ctx.matmul(layer.wo()).add_bias(layer.bo());
    if let Some(dr) = drop {
        attn_out = dr.apply(tape, attn_out);
    }
    let x = x.add(attn_out);

    let (g2, b2) = layer.ln2();
    let (w1, b1f, w2, b2f) = layer.ffn();
    let mut ff = x
        .layer_norm(g2, b2)
        .matmul(w1)
        .add_bias(b1f)
        .relu()
        .matmul(w2)
        .add_bias(b2f);
    if let Some(dr) = drop {
        ff = dr.apply(tape, ff);
    }
    x.add(ff)
}

fn encoder_graph<'t>(
    tape: &'t Tape,
    vars: &LMVars<'t>,
    cfg: &LMConfig,
    codes: &[usize],
    cond: Option<Var<'t>>,
    drop: Option<&Dropout<'_>>,
) -> Var<'t> {
    let tok = vars.enc_tok.expect("encoder params present");
    let pos = vars.enc_pos.expect("encoder params present");
    let positions = Rc::new((0..codes.len()).collect::<Vec<_>>());
    let mut x = tok
        .gather_rows(Rc::new(codes.to_vec()))
        .add(pos.gather_rows(positions));
    if let Some(c) = cond {
        x = x.add(c);
    }
    let kinds = layer_kinds(cfg.encoder_layers, false);
    for (layer, kind) in vars.enc_layers.iter().zip(kinds) {
        let mask = Rc::new(pattern::prefix_mask(kind, codes.len(), cfg.chunk, false));
        x = block(tape, x, None, layer, Some(mask), cfg.heads, drop);
    }
    let (g, b) = vars.enc_ln.expect("encoder params present");
    x.layer_norm(g, b)
}

fn decoder_graph<'t>(
    tape: &'t Tape,
    vars: &LMVars<'t>,
    cfg: &LMConfig,
    prefix: &[usize],
    memory: Option<Var<'t>>,
    cond: Option<Var<'t>>,
    drop: Option<&Dropout<'_>>,
) -> Var<'t> {
    let p = prefix.len();
    let positions = Rc::new((0..p).collect::<Vec<_>>());
    let mut x = vars
        .dec_tok
        .gather_rows(Rc::new(prefix.to_vec()))
        .add(vars.dec_pos.gather_rows(positions));
    if let Some(c) = cond {
        x = x.add(c);
    }
    let kinds = layer_kinds(cfg.decoder_layers, cfg.seq2seq);
    for (layer, kind) in vars.dec_layers.iter().zip(kinds) {
        match kind {
            PatternKind::EncDec => {
                let memory = memory.expect("seq2seq decoder needs memory");
                x = block(tape, x, Some(memory), layer, None, cfg.heads, drop);
            }
            _ => {
                let mask = Rc::new(pattern::prefix_mask(kind, p, cfg.chunk, true));
                x = block(tape, x, None, layer, Some(mask), cfg.heads, drop);
            }
        }
    }
    let (g, b) = vars.dec_ln;
    x.layer_norm(g, b).matmul(vars.out_w).add_bias(vars.out_b)
}

/// Run the encoder over a drumless code sequence, returning the memory
/// (`T x d_model`). `cond` rows are added to the input embeddings.
pub fn encoder_forward(
    codes: &CodeSeq,
    cond: Option<&BeatCondSeq>,
    params: &LMParams,
) -> Result<Array2<f64>> {
    let cfg = &params.cfg;
    if !cfg.seq2seq {
        return Err(Error::Shape("decoder-only model has no encoder".into()));
    }
    if codes.len() != cfg.t {
        return Err(Error::Shape(format!(
            "encoder expects {} codes, got {}",
            cfg.t,
            codes.len()
        )));
    }
    if let Some(&bad) = codes.ids.iter().find(|&&id| id >= cfg.vocab_in) {
        return Err(Error::Shape(format!("code id {bad} >= vocab_in {}", cfg.vocab_in)));
    }
    if let Some(c) = cond {
        if c.values.dim() != (cfg.t, cfg.d_model) {
            return Err(Error::Shape(format!(
                "condition shape {:?}, expected ({}, {})",
                c.values.dim(),
                cfg.t,
                cfg.d_model
            )));
        }
    }
    let tape = Tape::new();
    let (vars, _) = bind(&tape, params);
    let cond_var = cond.map(|c| tape.leaf(c.values.clone()));
    Ok(encoder_graph(&tape, &vars, cfg, &codes.ids, cond_var, None).value())
}

/// Teacher-forced decoder pass: logits for every prefix position.
pub fn decoder_forward(
    prefix: &[usize],
    memory: Option<&Array2<f64>>,
    cond: Option<&BeatCondSeq>,
    params: &LMParams,
) -> Result<Array2<f64>> {
    let cfg = &params.cfg;
    if prefix.is_empty() || prefix.len() > cfg.t {
        return Err(Error::Shape(format!(
            "prefix length {} out of range 1..={}",
            prefix.len(),
            cfg.t
        )));
    }
    if let Some(&bad) = prefix.iter().find(|&&id| id >= cfg.vocab_out) {
        return Err(Error::Shape(format!("token {bad} >= vocab_out {}", cfg.vocab_out)));
    }
    let tape = Tape::new();
    let (vars, _) = bind(&tape, params);
    let memory_var = if cfg.seq2seq {
        let m = memory.ok_or_else(|| Error::Shape("seq2seq decoder requires memory".into()))?;
        Some(tape.leaf(m.clone()))
    } else {
        None
    };
    let cond_var = cond.map(|c| {
        tape.leaf(
            c.values
                .slice(ndarray::s![..prefix.len(), ..])
                .to_owned(),
        )
    });
    Ok(decoder_graph(&tape, &vars, cfg, prefix, memory_var, cond_var, None).value())
}

/// One training example: aligned drumless/drum codes plus the conditioning
/// input computed from the drumless audio.
#[derive(Debug, Clone)]
pub struct LMExample {
    pub drumless: CodeSeq,
    pub drums: CodeSeq,
    pub cond: CondInput,
}

/// Teacher-forced cross-entropy for a batch at the current parameters.
fn batch_loss_graph<'t>(
    tape: &'t Tape,
    vars: &LMVars<'t>,
    cfg: &LMConfig,
    batch: &[&LMExample],
    drop: Option<&Dropout<'_>>,
) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for ex in batch {
        if ex.drums.len() != cfg.t {
            return Err(Error::Shape(format!(
                "drum code length {} != T {}",
                ex.drums.len(),
                cfg.t
            )));
        }
        let cond_enc = if cfg.cond_encoder {
            cond_graph(tape, vars, &ex.cond)
        } else {
            None
        };
        let cond_dec = if cfg.cond_decoder {
            cond_graph(tape, vars, &ex.cond)
        } else {
            None
        };
        let memory = if cfg.seq2seq {
            if ex.drumless.len() != cfg.t {
                return Err(Error::Shape(format!(
                    "drumless code length {} != T {}",
                    ex.drumless.len(),
                    cfg.t
                )));
            }
            Some(encoder_graph(tape, vars, cfg, &ex.drumless.ids, cond_enc, drop))
        } else {
            None
        };
        let mut prefix = Vec::with_capacity(cfg.t);
        prefix.push(cfg.start_token());
        prefix.extend_from_slice(&ex.drums.ids[..cfg.t - 1]);
        let logits = decoder_graph(tape, vars, cfg, &prefix, memory, cond_dec, drop);
        let loss = logits.cross_entropy(Rc::new(ex.drums.ids.clone()));
        total = Some(match total {
            None => loss,
            Some(acc) => acc.add(loss),
        });
    }
    Ok(total
        .expect("nonempty batch")
        .scale(1.0 / batch.len() as f64))
}

/// Stateful LM trainer.
pub struct LMTrainer {
    pub params: LMParams,
    pub adam: Adam,
    pub step: u64,
    pub seed: u64,
    pub batch: usize,
}

impl LMTrainer {
    pub fn new(cfg: &LMConfig, seed: u64, lr: f64, batch: usize, tracker_emb_dim: usize) -> Result<Self> {
        Ok(Self {
            params: LMParams::init(cfg, seed, tracker_emb_dim)?,
            adam: Adam::new(lr),
            step: 0,
            seed,
            batch,
        })
    }

    pub fn train_step(&mut self, data: &[LMExample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Dataset("empty LM training corpus".into()));
        }
        let mut rng = step_rng(self.seed, self.step);
        let batch: Vec<&LMExample> = (0..self.batch)
            .map(|_| &data[rng.gen_range(0..data.len())])
            .collect();
        let tape = Tape::new();
        let (vars, named) = bind(&tape, &self.params);
        let drop_rng = std::cell::RefCell::new(rng.clone());
        let drop = Dropout {
            rate: self.params.cfg.dropout,
            rng: &drop_rng,
        };
        let loss = batch_loss_graph(&tape, &vars, &self.params.cfg, &batch, Some(&drop))?;
        let loss_val = loss.value()[[0, 0]];
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("lm loss {loss_val}"),
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

/// Teacher-forced loss of a batch without updating anything.
pub fn teacher_forced_loss(params: &LMParams, data: &[LMExample]) -> Result<f64> {
    let tape = Tape::new();
    let (vars, _) = bind(&tape, params);
    let refs: Vec<&LMExample> = data.iter().collect();
    let loss = batch_loss_graph(&tape, &vars, &params.cfg, &refs, None)?;
    Ok(loss.value()[[0, 0]])
}

/// Teacher-forced next-token accuracy over a dataset.
pub fn teacher_forced_accuracy(params: &LMParams, data: &[LMExample]) -> Result<f64> {
    let cfg = &params.cfg;
    let mut hits = 0usize;
    let mut total = 0usize;
    for ex in data {
        let cond_seq = crate::cond::embed(&ex.cond, &params.cond, cfg.t)?;
        let cond = if cfg.cond_decoder { Some(&cond_seq) } else { None };
        let memory = if cfg.seq2seq {
            let enc_cond = if cfg.cond_encoder { Some(&cond_seq) } else { None };
            Some(encoder_forward(&ex.drumless, enc_cond, params)?)
        } else {
            None
        };
        let mut prefix = Vec::with_capacity(cfg.t);
        prefix.push(cfg.start_token());
        prefix.extend_from_slice(&ex.drums.ids[..cfg.t - 1]);
        let logits = decoder_forward(&prefix, memory.as_ref(), cond, params)?;
        for (row, &target) in ex.drums.ids.iter().enumerate() {
            let pred = logits
                .row(row)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .expect("nonempty row")
                .0;
            if pred == target {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests;
