//! Factorized attention patterns over fixed-size chunks.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four attention layer kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatternKind {
    /// Attend within the position's own chunk.
    InChunk,
    /// Attend to positions congruent modulo the chunk size.
    CrossChunk,
    /// Attend to the whole previous chunk plus self.
    PrevChunk,
    /// Decoder attends over all encoder steps (no mask).
    EncDec,
}

/// A pattern plus its boolean mask (`None` for encoder/decoder attention).
pub struct AttentionPattern {
    pub kind: PatternKind,
    pub mask: Option<Array2<bool>>,
}

/// Whether position `i` may attend to `j` under a pattern.
pub fn allows(kind: PatternKind, i: usize, j: usize, chunk: usize, causal: bool) -> bool {
    if causal && j > i {
        return false;
    }
    match kind {
        PatternKind::InChunk => i / chunk == j / chunk,
        PatternKind::CrossChunk => i % chunk == j % chunk,
        // Causal by construction: the previous chunk always precedes i.
        PatternKind::PrevChunk => {
            let c = i / chunk;
            j == i || (c > 0 && j / chunk == c - 1)
        }
        PatternKind::EncDec => true,
    }
}

/// Mask for the first `rows` query positions of a length-`t` sequence.
/// Chunk membership is absolute, so a prefix mask agrees with the full one.
pub(crate) fn prefix_mask(kind: PatternKind, rows: usize, chunk: usize, causal: bool) -> Array2<bool> {
    let mut mask = Array2::from_elem((rows, rows), false);
    for i in 0..rows {
        for j in 0..rows {
            mask[[i, j]] = allows(kind, i, j, chunk, causal);
        }
    }
    mask
}

/// Build a full `t x t` pattern; `EncDec` carries no mask.
pub fn build_pattern(kind: PatternKind, t: usize, chunk: usize, causal: bool) -> Result<AttentionPattern> {
    if chunk == 0 || t % chunk != 0 {
        return Err(Error::config(
            "lm.chunk",
            format!("sequence length {t} not divisible by chunk {chunk}"),
        ));
    }
    let mask = match kind {
        PatternKind::EncDec => None,
        _ => Some(prefix_mask(kind, t, chunk, causal)),
    };
    Ok(AttentionPattern { kind, mask })
}

/// Attended positions for query `i` (ascending), as the sampler consumes them.
pub fn allowed_positions(kind: PatternKind, i: usize, chunk: usize) -> Vec<usize> {
    match kind {
        PatternKind::InChunk => ((i / chunk) * chunk..=i).collect(),
        PatternKind::CrossChunk => (0..=i).filter(|j| j % chunk == i % chunk).collect(),
        PatternKind::PrevChunk => {
            let c = i / chunk;
            let mut out: Vec<usize> = if c > 0 {
                ((c - 1) * chunk..c * chunk).collect()
            } else {
                Vec::new()
            };
            out.push(i);
            out
        }
        PatternKind::EncDec => panic!("EncDec positions come from the encoder"),
    }
}

/// Layer kinds for a stack of `n` layers; seq2seq decoders interleave an
/// encoder/decoder attention layer after every chunked cycle.
pub fn layer_kinds(n: usize, seq2seq_decoder: bool) -> Vec<PatternKind> {
    let cycle: &[PatternKind] = if seq2seq_decoder {
        &[
            PatternKind::InChunk,
            PatternKind::CrossChunk,
            PatternKind::PrevChunk,
            PatternKind::EncDec,
        ]
    } else {
        &[
            PatternKind::InChunk,
            PatternKind::CrossChunk,
            PatternKind::PrevChunk,
        ]
    };
    (0..n).map(|l| cycle[l % cycle.len()]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn allowed_row(p: &AttentionPattern, i: usize) -> Vec<usize> {
        let mask = p.mask.as_ref().unwrap();
        (0..mask.ncols()).filter(|&j| mask[[i, j]]).collect()
    }

    #[test]
    fn spec_rows_t8_chunk4() {
        let in_chunk = build_pattern(PatternKind::InChunk, 8, 4, true).unwrap();
        assert_eq!(allowed_row(&in_chunk, 5), vec![4, 5]);

        let cross = build_pattern(PatternKind::CrossChunk, 8, 4, true).unwrap();
        assert_eq!(allowed_row(&cross, 6), vec![2, 6]);

        for kind in [PatternKind::InChunk, PatternKind::CrossChunk, PatternKind::PrevChunk] {
            let p = build_pattern(kind, 8, 4, true).unwrap();
            assert_eq!(allowed_row(&p, 0), vec![0], "{kind:?}");
        }
    }

    #[test]
    fn prev_chunk_covers_previous_block_plus_self() {
        let p = build_pattern(PatternKind::PrevChunk, 12, 4, true).unwrap();
        assert_eq!(allowed_row(&p, 9), vec![4, 5, 6, 7, 9]);
        assert_eq!(allowed_row(&p, 2), vec![2]);
    }

    #[test]
    fn causal_masks_are_lower_triangular_with_diagonal() {
        for kind in [PatternKind::InChunk, PatternKind::CrossChunk, PatternKind::PrevChunk] {
            let p = build_pattern(kind, 64, 8, true).unwrap();
            let mask = p.mask.as_ref().unwrap();
            for i in 0..64 {
                assert!(mask[[i, i]], "{kind:?} diagonal at {i}");
                for j in i + 1..64 {
                    assert!(!mask[[i, j]], "{kind:?} above diagonal at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn rejects_indivisible_chunk() {
        assert!(build_pattern(PatternKind::InChunk, 10, 4, true).is_err());
    }

    #[test]
    fn two_layer_compositions_cover_causal_triangle() {
        // With residual connections, any ordered pair of patterns (or a single
        // one) must let every j <= i reach i.
        let t = 64;
        let chunk = 8;
        let kinds = [PatternKind::InChunk, PatternKind::CrossChunk, PatternKind::PrevChunk];
        let masks: Vec<Array2<bool>> = kinds
            .iter()
            .map(|&k| prefix_mask(k, t, chunk, true))
            .collect();
        let mut reach = Array2::from_elem((t, t), false);
        for m in &masks {
            reach.zip_mut_with(m, |r, &v| *r |= v);
        }
        for second in &masks {
            for first in &masks {
                for i in 0..t {
                    for j in 0..=i {
                        if reach[[i, j]] {
                            continue;
                        }
                        // i attends mid via `second`, mid attends j via `first`.
                        let ok = (j..=i).any(|mid| second[[i, mid]] && first[[mid, j]]);
                        if ok {
                            reach[[i, j]] = true;
                        }
                    }
                }
            }
        }
        for i in 0..t {
            for j in 0..=i {
                assert!(reach[[i, j]], "({i},{j}) unreachable in 2 layers");
            }
        }
    }

    #[test]
    fn layer_kind_cycles() {
        let dec = layer_kinds(20, true);
        assert_eq!(dec.len(), 20);
        assert_eq!(dec.iter().filter(|k| **k == PatternKind::EncDec).count(), 5);
        assert_eq!(dec[3], PatternKind::EncDec);

        let dec_only = layer_kinds(15, false);
        assert!(dec_only.iter().all(|k| *k != PatternKind::EncDec));
        assert_eq!(dec_only[3], PatternKind::InChunk);

        let enc = layer_kinds(9, false);
        assert_eq!(enc[8], PatternKind::PrevChunk);
    }

    #[test]
    fn allowed_positions_match_masks() {
        let chunk = 4;
        for kind in [PatternKind::InChunk, PatternKind::CrossChunk, PatternKind::PrevChunk] {
            let p = build_pattern(kind, 16, chunk, true).unwrap();
            for i in 0..16 {
                assert_eq!(allowed_positions(kind, i, chunk), allowed_row(&p, i), "{kind:?} row {i}");
            }
        }
    }
}
