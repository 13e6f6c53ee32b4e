//! Histogram of target-vs-behavior similarity scores over `N` equal tiers of
//! `[-1, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use mmrec_tensor::Segments;

use crate::reps::{dot, Embeddings};

/// How counts are turned into a model feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TierScaling {
    /// Counts divided by `max(L, 1)`.
    #[default]
    Normalized,
    /// `ln(1 + count)`.
    Log,
}

/// Dot products of the target with each behavior representation, clamped to
/// `[-1, 1]` to absorb rounding on unit vectors.
pub fn sim_scores<'a, I>(target: &[f32], seq: I) -> Result<Vec<f32>>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    seq.into_iter()
        .map(|v| {
            if v.len() != target.len() {
                return Err(CoreError::Dim {
                    op: "sim_scores",
                    expected: target.len(),
                    got: v.len(),
                });
            }
            Ok(dot(v, target).clamp(-1.0, 1.0))
        })
        .collect()
}

/// Upper edge of tier `t`: `2(t+1)/N - 1`.
fn upper_edge(t: usize, n: usize) -> f64 {
    2.0 * (t + 1) as f64 / n as f64 - 1.0
}

/// Tier of a score: `clamp(ceil((s+1)/2 * N) - 1, 0, N-1)`.
///
/// Tier `t` is the left-open interval `(2t/N - 1, 2(t+1)/N - 1]`; `s = -1`
/// falls into tier 0. The closed form is followed by an edge fix-up so the
/// result agrees with the interval definition even when rounding lands the
/// product on the wrong side of an integer.
pub fn tier_index(s: f32, n: usize) -> usize {
    assert!(n >= 1, "tier count must be positive");
    let s = s as f64;
    let raw = ((s + 1.0) / 2.0 * n as f64).ceil() as i64 - 1;
    let mut t = raw.clamp(0, n as i64 - 1) as usize;
    while t > 0 && s <= upper_edge(t - 1, n) {
        t -= 1;
    }
    while t + 1 < n && s > upper_edge(t, n) {
        t += 1;
    }
    t
}

/// The unshifted index rule `ceil((s+1)/2 * N)`, kept for comparison. Only
/// indices below `N` are counted, so scores in the top tier are dropped and
/// index 0 is reached only at `s = -1`.
pub fn tier_index_unshifted(s: f32, n: usize) -> Option<usize> {
    let idx = ((s as f64 + 1.0) / 2.0 * n as f64).ceil();
    (idx >= 0.0 && (idx as usize) < n).then_some(idx as usize)
}

/// Tier counts of a set of scores. `unshifted` selects
/// [`tier_index_unshifted`] instead of [`tier_index`].
pub fn simtier(scores: &[f32], n: usize, unshifted: bool) -> Vec<u32> {
    let mut counts = vec![0u32; n];
    for &s in scores {
        let t = if unshifted {
            tier_index_unshifted(s, n)
        } else {
            Some(tier_index(s, n))
        };
        if let Some(t) = t {
            counts[t] += 1;
        }
    }
    counts
}

/// Tier counts for a packed batch: row `r` compares `reps[targets[r]]` with
/// the behaviors `seq_items[segs.range(r)]`.
pub fn simtier_batch(
    reps: &Embeddings,
    targets: &[usize],
    segs: &Segments,
    seq_items: &[usize],
    n: usize,
    unshifted: bool,
) -> Result<Vec<Vec<u32>>> {
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let seq = segs.range(r).map(|p| reps.row(seq_items[p]));
            Ok(simtier(&sim_scores(reps.row(t), seq)?, n, unshifted))
        })
        .collect()
}

/// Scales counts into a length-invariant feature.
pub fn simtier_feature(counts: &[u32], len: usize, scaling: TierScaling) -> Vec<f32> {
    match scaling {
        TierScaling::Normalized => {
            let d = len.max(1) as f32;
            counts.iter().map(|&c| c as f32 / d).collect()
        }
        TierScaling::Log => counts.iter().map(|&c| (c as f32).ln_1p()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scores_of_aligned_opposite_and_orthogonal_vectors() {
        let c = [0.6f32, 0.8];
        let s = sim_scores(&c, [&[0.6f32, 0.8][..], &[-0.6, -0.8], &[0.8, -0.6]]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-6);
        assert!((s[1] + 1.0).abs() < 1e-6);
        assert!(s[2].abs() < 1e-6);
        assert!(sim_scores(&c, [&[1.0f32][..]]).is_err());
    }

    #[test]
    fn four_tier_histogram() {
        assert_eq!(simtier(&[0.9, -0.5, 0.1], 4, false), vec![1, 0, 1, 1]);
        assert_eq!(simtier(&[1.0; 7], 4, false), vec![0, 0, 0, 7]);
        assert_eq!(simtier(&[-1.0], 4, false), vec![1, 0, 0, 0]);
        assert_eq!(simtier(&[], 4, false), vec![0; 4]);
    }

    #[test]
    fn unshifted_rule_drops_top_tier() {
        assert_eq!(simtier(&[0.9, -0.5, 0.1, -1.0], 4, true), vec![1, 1, 0, 1]);
    }

    #[test]
    fn feature_scaling() {
        let f = simtier_feature(&[1, 0, 1, 1], 3, TierScaling::Normalized);
        assert_eq!(f, vec![1.0 / 3.0, 0.0, 1.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(simtier_feature(&[0; 4], 0, TierScaling::Normalized), vec![0.0; 4]);
        let l = simtier_feature(&[0, 3], 3, TierScaling::Log);
        assert_eq!(l, vec![0.0, 4f32.ln()]);
    }
}
