//! Autoregressive sampling with per-layer key/value caches.
//!
//! The factorized patterns mean each new position attends to a handful of
//! cached rows, so a full `T`-step sample costs `O(T)` layer evaluations
//! instead of `O(T^2)`. Equivalence with the full teacher-forced forward is
//! pinned by tests.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pattern::{allowed_positions, layer_kinds, PatternKind};
use super::{LMParams, LayerParams};
use crate::cond::BeatCondSeq;
use crate::error::{Error, Result};
use crate::vq::CodeSeq;

const LN_EPS: f64 = 1e-5;

fn ln_row(x: &Array1<f64>, g: &Array2<f64>, b: &Array2<f64>) -> Array1<f64> {
    let m = x.len() as f64;
    let mean = x.sum() / m;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    Array1::from_iter(
        x.iter()
            .enumerate()
            .map(|(c, &v)| (v - mean) * rstd * g[[0, c]] + b[[0, c]]),
    )
}

fn affine(x: &Array1<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array1<f64> {
    &x.dot(w) + &b.row(0)
}

struct SelfCache {
    k: Array2<f64>,
    v: Array2<f64>,
}

enum LayerState {
    SelfAttn(SelfCache),
    /// Precomputed memory projections for encoder/decoder attention.
    Cross { k: Array2<f64>, v: Array2<f64> },
}

/// Multi-head attention of a single query row over a set of key/value rows.
fn attend_row(
    q: &Array1<f64>,
    keys: &Array2<f64>,
    values: &Array2<f64>,
    rows: &[usize],
    heads: usize,
) -> Array1<f64> {
    let d = q.len();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut ctx = Array1::zeros(d);
    let mut scores = vec![0.0f64; rows.len()];
    for h in 0..heads {
        let lo = h * dk;
        let hi = lo + dk;
        let mut max = f64::NEG_INFINITY;
        for (s, &j) in scores.iter_mut().zip(rows) {
            let mut dot = 0.0;
            for c in lo..hi {
                dot += q[c] * keys[[j, c]];
            }
            *s = dot * scale;
            max = max.max(*s);
        }
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for (s, &j) in scores.iter().zip(rows) {
            let p = s / sum;
            for c in lo..hi {
                ctx[c] += p * values[[j, c]];
            }
        }
    }
    ctx
}

fn block_row(
    x: &Array1<f64>,
    layer: &LayerParams,
    state: &mut LayerState,
    pos: usize,
    kind: PatternKind,
    chunk: usize,
    heads: usize,
) -> Array1<f64> {
    let xn = ln_row(x, &layer.ln1_g, &layer.ln1_b);
    let q = affine(&xn, &layer.wq, &layer.bq);
    let ctx = match state {
        LayerState::SelfAttn(cache) => {
            let k = affine(&xn, &layer.wk, &layer.bk);
            let v = affine(&xn, &layer.wv, &layer.bv);
            cache.k.row_mut(pos).assign(&k);
            cache.v.row_mut(pos).assign(&v);
            let rows = allowed_positions(kind, pos, chunk);
            attend_row(&q, &cache.k, &cache.v, &rows, heads)
        }
        LayerState::Cross { k, v } => {
            let rows: Vec<usize> = (0..k.nrows()).collect();
            attend_row(&q, k, v, &rows, heads)
        }
    };
    let x = x + &affine(&ctx, &layer.wo, &layer.bo);
    let ffn_in = ln_row(&x, &layer.ln2_g, &layer.ln2_b);
    let mut hidden = affine(&ffn_in, &layer.w1, &layer.b1);
    hidden.mapv_inplace(|v| v.max(0.0));
    &x + &affine(&hidden, &layer.w2, &layer.b2)
}

/// Temperature-scaled top-k categorical draw; ties rank lower indices first.
fn draw(logits: &Array1<f64>, temperature: f64, top_k: usize, rng: &mut ChaCha8Rng) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .expect("finite logits")
            .then(a.cmp(&b))
    });
    order.truncate(top_k);
    let max = logits[order[0]];
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| ((logits[i] - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (w, &i) in weights.iter().zip(&order) {
        acc += w;
        if u < acc {
            return i;
        }
    }
    *order.last().expect("top_k >= 1")
}

/// Sample a drum code sequence of length `cfg.t`.
///
/// `memory` is required for seq2seq models and ignored otherwise. The result
/// is a deterministic function of (memory, cond, params, settings, seed).
pub fn sample(
    memory: Option<&Array2<f64>>,
    cond: Option<&BeatCondSeq>,
    params: &LMParams,
    temperature: f64,
    top_k: usize,
    seed: u64,
) -> Result<CodeSeq> {
    let cfg = &params.cfg;
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::config("sample.temperature", "must be positive"));
    }
    if top_k == 0 || top_k > cfg.logits_vocab() {
        return Err(Error::config(
            "sample.top_k",
            format!("must lie in 1..={}", cfg.logits_vocab()),
        ));
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
    let kinds = layer_kinds(cfg.decoder_layers, cfg.seq2seq);
    let memory = if cfg.seq2seq {
        let m = memory.ok_or_else(|| Error::Shape("seq2seq sampling requires memory".into()))?;
        if m.ncols() != cfg.d_model {
            return Err(Error::Shape("memory width != d_model".into()));
        }
        Some(m)
    } else {
        None
    };

    let mut states: Vec<LayerState> = kinds
        .iter()
        .zip(&params.dec_layers)
        .map(|(kind, layer)| match kind {
            PatternKind::EncDec => {
                let m = memory.expect("memory checked above");
                LayerState::Cross {
                    k: m.dot(&layer.wk) + &layer.bk.row(0),
                    v: m.dot(&layer.wv) + &layer.bv.row(0),
                }
            }
            _ => LayerState::SelfAttn(SelfCache {
                k: Array2::zeros((cfg.t, cfg.d_model)),
                v: Array2::zeros((cfg.t, cfg.d_model)),
            }),
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens: Vec<usize> = Vec::with_capacity(cfg.t);
    let mut prev = cfg.start_token();
    for pos in 0..cfg.t {
        let mut x = &params.tok_out.row(prev) + &params.pos_dec.row(pos);
        if let Some(c) = cond {
            x = &x + &c.values.row(pos);
        }
        for ((layer, state), kind) in params.dec_layers.iter().zip(&mut states).zip(&kinds) {
            x = block_row(&x, layer, state, pos, *kind, cfg.chunk, cfg.heads);
        }
        let xn = ln_row(&x, &params.ln_f_g, &params.ln_f_b);
        let logits = affine(&xn, &params.out_w, &params.out_b);
        let token = draw(&logits, temperature, top_k, &mut rng);
        tokens.push(token);
        prev = token;
    }
    CodeSeq::new(tokens, cfg.logits_vocab())
}
