/// Strict local maxima at least `min_height` tall, greedily suppressed so the
/// kept peaks are at least `min_distance` frames apart (tallest first, ties to
/// the earlier frame). Returned in ascending frame order.
pub fn pick_peaks(scores: &[f64], min_height: f64, min_distance: usize) -> Vec<usize> {
    let mut candidates: Vec<usize> = (1..scores.len().saturating_sub(1))
        .filter(|&i| {
            scores[i] > scores[i - 1] && scores[i] > scores[i + 1] && scores[i] >= min_height
        })
        .collect();
    candidates.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in candidates {
        if kept.iter().all(|&j| i.abs_diff(j) >= min_distance) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: repeatedly scan for the tallest eligible local
    /// maximum not yet suppressed, then blank out its neighborhood.
    fn oracle(scores: &[f64], min_height: f64, min_distance: usize) -> Vec<usize> {
        let maxima: Vec<usize> = (1..scores.len().saturating_sub(1))
            .filter(|&i| {
                scores[i] > scores[i - 1] && scores[i] > scores[i + 1] && scores[i] >= min_height
            })
            .collect();
        let mut kept = Vec::new();
        let mut available: Vec<bool> = vec![true; scores.len()];
        loop {
            let mut best: Option<usize> = None;
            for &i in &maxima {
                if !available[i] {
                    continue;
                }
                best = match best {
                    None => Some(i),
                    Some(b) if scores[i] > scores[b] => Some(i),
                    other => other,
                };
            }
            let Some(b) = best else { break };
            kept.push(b);
            for (j, slot) in available.iter_mut().enumerate() {
                if b.abs_diff(j) < min_distance {
                    *slot = false;
                }
            }
            available[b] = false;
        }
        kept.sort_unstable();
        kept
    }

    #[test]
    fn spec_examples() {
        assert_eq!(pick_peaks(&[0.0, 1.0, 0.0, 2.0, 0.0], 0.5, 1), vec![1, 3]);
        assert_eq!(pick_peaks(&[0.3; 10], 0.0, 1), Vec::<usize>::new());
        assert_eq!(pick_peaks(&[0.0, 0.9, 0.8, 1.0, 0.0], 0.0, 3), vec![3]);
    }

    #[test]
    fn empty_and_short_inputs() {
        assert!(pick_peaks(&[], 0.0, 1).is_empty());
        assert!(pick_peaks(&[1.0], 0.0, 1).is_empty());
        assert!(pick_peaks(&[1.0, 2.0], 0.0, 1).is_empty());
    }

    #[test]
    fn matches_oracle_on_random_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..300 {
            let n = rng.gen_range(0..60);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let min_height = rng.gen_range(0.0..0.8);
            let min_distance = rng.gen_range(1..8);
            assert_eq!(
                pick_peaks(&scores, min_height, min_distance),
                oracle(&scores, min_height, min_distance),
                "scores {scores:?} h={min_height} d={min_distance}"
            );
        }
    }
}
