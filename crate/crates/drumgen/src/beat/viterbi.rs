//! Interval-constrained Viterbi beat decoding.
//!
//! A beat sequence is any set of frames whose consecutive gaps lie in
//! `[d_min, d_max]`. Each beat earns `ln(act) - ln(act_floor)`; each change of
//! inter-beat interval pays a log-Gaussian penalty on the interval ratio. The
//! decoder returns the globally best-scoring sequence (possibly empty).

use ndarray::Array2;

use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct ViterbiParams {
    /// Minimum inter-beat interval in frames.
    pub d_min: usize,
    /// Maximum inter-beat interval in frames.
    pub d_max: usize,
    /// Width of the log-Gaussian tempo-change penalty.
    pub sigma: f64,
    /// Activation level below which placing a beat costs score.
    pub act_floor: f64,
}

impl ViterbiParams {
    /// Standard decoding parameters at a given frame rate: intervals limited
    /// to [0.25 s, 1.0 s], sigma 0.1, activation floor 0.05.
    pub fn standard(frame_rate: f64) -> Self {
        Self {
            d_min: (0.25 * frame_rate).ceil() as usize,
            d_max: (1.0 * frame_rate).floor() as usize,
            sigma: 0.1,
            act_floor: 0.05,
        }
    }
}

/// Decode the best beat-frame sequence from a per-frame activation channel.
/// Returns the frames (ascending) and the optimal path score.
pub fn viterbi_beats(scores: &[f64], p: &ViterbiParams) -> (Vec<usize>, f64) {
    let f_len = scores.len();
    if f_len < p.d_min || p.d_min == 0 || p.d_max < p.d_min {
        return (Vec::new(), 0.0);
    }
    let d_count = p.d_max - p.d_min + 1;
    let emit: Vec<f64> = scores
        .iter()
        .map(|&a| (a.max(1e-12)).ln() - p.act_floor.ln())
        .collect();

    // pen[di][dj]: cost of interval d_min+di following interval d_min+dj.
    let mut pen = Array2::<f64>::zeros((d_count, d_count));
    for di in 0..d_count {
        for dj in 0..d_count {
            let r = ((p.d_min + di) as f64 / (p.d_min + dj) as f64).ln();
            pen[[di, dj]] = r * r / (2.0 * p.sigma * p.sigma);
        }
    }

    // dp[t][di]: best score of a sequence ending with a beat at t whose last
    // interval is d_min+di. parent -1 means the previous beat was the first.
    let mut dp = Array2::<f64>::from_elem((f_len, d_count), f64::NEG_INFINITY);
    let mut parent = Array2::<i32>::from_elem((f_len, d_count), i32::MIN);
    for t in 0..f_len {
        for di in 0..d_count {
            let d = p.d_min + di;
            if t < d {
                continue;
            }
            let tp = t - d;
            let mut best = emit[tp]; // predecessor was a first beat
            let mut arg = -1i32;
            for dj in 0..d_count {
                let prev = dp[[tp, dj]];
                if prev > f64::NEG_INFINITY {
                    let s = prev - pen[[di, dj]];
                    if s > best {
                        best = s;
                        arg = dj as i32;
                    }
                }
            }
            dp[[t, di]] = emit[t] + best;
            parent[[t, di]] = arg;
        }
    }

    // Best ending: empty sequence, a lone beat, or a dp state.
    let mut best_score = 0.0f64;
    let mut end: Option<(usize, i32)> = None;
    for t in 0..f_len {
        if emit[t] > best_score {
            best_score = emit[t];
            end = Some((t, -1));
        }
        for di in 0..d_count {
            if dp[[t, di]] > best_score {
                best_score = dp[[t, di]];
                end = Some((t, di as i32));
            }
        }
    }

    let mut beats = Vec::new();
    if let Some((mut t, mut di)) = end {
        loop {
            beats.push(t);
            if di < 0 {
                break;
            }
            let d = p.d_min + di as usize;
            let pj = parent[[t, di as usize]];
            t -= d;
            di = pj;
        }
        beats.reverse();
    }
    (beats, best_score)
}

/// Decode beat and downbeat times from `frames x 3` activations
/// (channels `[beat, downbeat, non-beat]`).
///
/// Downbeats are the decoded beats at bar position 1 of a fixed 4-beat cycle,
/// choosing the phase that maximizes summed downbeat activation.
pub fn decode_beats(activations: &Array2<f64>, frame_rate: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let params = ViterbiParams::standard(frame_rate);
    let beat_channel: Vec<f64> = activations.column(0).to_vec();
    let (beat_frames, _) = viterbi_beats(&beat_channel, &params);
    if beat_frames.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }

    let mut best_phase = 0usize;
    let mut best_sum = f64::NEG_INFINITY;
    for phase in 0..4 {
        let sum: f64 = beat_frames
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 4 == phase)
            .map(|(_, &f)| activations[[f, 1]])
            .sum();
        if sum > best_sum {
            best_sum = sum;
            best_phase = phase;
        }
    }

    let beats: Vec<f64> = beat_frames.iter().map(|&f| f as f64 / frame_rate).collect();
    let downbeats: Vec<f64> = beat_frames
        .iter()
        .enumerate()
        .filter(|(i, _)| i % 4 == best_phase)
        .map(|(_, &f)| f as f64 / frame_rate)
        .collect();
    Ok((beats, downbeats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent exhaustive search over every valid beat sequence.
    fn brute_best_score(scores: &[f64], p: &ViterbiParams) -> f64 {
        let f_len = scores.len();
        if f_len < p.d_min {
            return 0.0;
        }
        let emit: Vec<f64> = scores
            .iter()
            .map(|&a| (a.max(1e-12)).ln() - p.act_floor.ln())
            .collect();
        fn extend(
            emit: &[f64],
            p: &ViterbiParams,
            last: usize,
            prev_interval: Option<usize>,
            score: f64,
            best: &mut f64,
        ) {
            *best = best.max(score);
            for d in p.d_min..=p.d_max {
                let next = last + d;
                if next >= emit.len() {
                    break;
                }
                let mut s = score + emit[next];
                if let Some(pd) = prev_interval {
                    let r = (d as f64 / pd as f64).ln();
                    s -= r * r / (2.0 * p.sigma * p.sigma);
                }
                extend(emit, p, next, Some(d), s, best);
            }
        }
        let mut best = 0.0f64; // empty sequence
        for start in 0..f_len {
            extend(&emit, p, start, None, emit[start], &mut best);
        }
        best
    }

    /// Score a decoded path with independent arithmetic.
    fn path_score(beats: &[usize], scores: &[f64], p: &ViterbiParams) -> f64 {
        let mut s = 0.0;
        for &b in beats {
            s += scores[b].max(1e-12).ln() - p.act_floor.ln();
        }
        for w in beats.windows(3) {
            let d1 = (w[1] - w[0]) as f64;
            let d2 = (w[2] - w[1]) as f64;
            let r = (d2 / d1).ln();
            s -= r * r / (2.0 * p.sigma * p.sigma);
        }
        s
    }

    #[test]
    fn matches_exhaustive_search_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..30 {
            let f_len = rng.gen_range(5..=30);
            let d_min = rng.gen_range(3..=6);
            let d_max = d_min + rng.gen_range(1..=4);
            let p = ViterbiParams {
                d_min,
                d_max,
                sigma: 0.1,
                act_floor: 0.05,
            };
            let scores: Vec<f64> = (0..f_len).map(|_| rng.gen_range(0.0..1.0)).collect();
            let (beats, score) = viterbi_beats(&scores, &p);
            let brute = brute_best_score(&scores, &p);
            assert!(
                (score - brute).abs() < 1e-9,
                "case {case}: viterbi {score} vs brute {brute}"
            );
            // The returned path must actually realize the claimed score.
            assert!((path_score(&beats, &scores, &p) - score).abs() < 1e-9);
            for w in beats.windows(2) {
                let d = w[1] - w[0];
                assert!(d >= p.d_min && d <= p.d_max);
            }
        }
    }

    #[test]
    fn impulse_grid_decodes_to_half_second_beats() {
        let frame_rate = 44100.0 / 256.0;
        let frames = (8.0 * frame_rate) as usize;
        let mut act = Array2::zeros((frames, 3));
        for t in 0..frames {
            act[[t, 0]] = 0.001;
            act[[t, 2]] = 0.999;
        }
        let grid: Vec<usize> = (0..16)
            .map(|k| (k as f64 * 0.5 * frame_rate).round() as usize)
            .filter(|&f| f < frames)
            .collect();
        for &f in &grid {
            act[[f, 0]] = 0.9;
            act[[f, 2]] = 0.1;
        }
        let (beats, _) = decode_beats(&act, frame_rate).unwrap();
        assert_eq!(beats.len(), grid.len());
        let tol = 1.0 / frame_rate + 1e-9;
        for (b, &g) in beats.iter().zip(grid.iter()) {
            let want = g as f64 / frame_rate;
            assert!((b - want).abs() <= tol, "beat {b} vs grid {want}");
        }
    }

    #[test]
    fn uniform_activations_decode_to_equal_intervals() {
        let frame_rate = 40.0;
        let frames = 200;
        let mut act = Array2::zeros((frames, 3));
        act.fill(1.0 / 3.0);
        let (beats, _) = decode_beats(&act, frame_rate).unwrap();
        assert!(beats.len() > 2);
        let first = beats[1] - beats[0];
        for w in beats.windows(2) {
            assert!((w[1] - w[0] - first).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_beat_activation_decodes_empty() {
        let frame_rate = 40.0;
        let mut act = Array2::zeros((100, 3));
        act.column_mut(2).fill(1.0);
        let (beats, downbeats) = decode_beats(&act, frame_rate).unwrap();
        assert!(beats.is_empty());
        assert!(downbeats.is_empty());
    }

    #[test]
    fn too_few_frames_decode_empty() {
        let frame_rate = 172.265625;
        let mut act = Array2::zeros((10, 3));
        act.column_mut(0).fill(1.0);
        let (beats, _) = decode_beats(&act, frame_rate).unwrap();
        assert!(beats.is_empty());
    }

    #[test]
    fn decoded_intervals_stay_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frame_rate = 44100.0 / 256.0;
        let frames = 800;
        let mut act = Array2::zeros((frames, 3));
        for t in 0..frames {
            let b: f64 = rng.gen_range(0.0..1.0);
            act[[t, 0]] = b;
            act[[t, 1]] = (1.0 - b) * 0.3;
            act[[t, 2]] = (1.0 - b) * 0.7;
        }
        let (beats, downbeats) = decode_beats(&act, frame_rate).unwrap();
        for w in beats.windows(2) {
            let d = w[1] - w[0];
            assert!((0.25..=1.0).contains(&d), "interval {d}");
        }
        for &db in &downbeats {
            assert!(beats.contains(&db));
        }
    }

    #[test]
    fn downbeat_phase_follows_activation() {
        let frame_rate = 40.0;
        let frames = 400;
        let mut act = Array2::zeros((frames, 3));
        for t in 0..frames {
            act[[t, 0]] = 0.001;
            act[[t, 2]] = 0.999;
        }
        // Beats every 20 frames; downbeat activation high on every 4th beat
        // starting from the third.
        let grid: Vec<usize> = (0..frames / 20).map(|k| k * 20).collect();
        for (i, &f) in grid.iter().enumerate() {
            act[[f, 0]] = 0.9;
            act[[f, 1]] = if i % 4 == 2 { 0.8 } else { 0.01 };
            act[[f, 2]] = 0.1;
        }
        let (beats, downbeats) = decode_beats(&act, frame_rate).unwrap();
        assert_eq!(beats.len(), grid.len());
        let expect: Vec<f64> = grid
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 4 == 2)
            .map(|(_, &f)| f as f64 / frame_rate)
            .collect();
        assert_eq!(downbeats, expect);
    }
}
