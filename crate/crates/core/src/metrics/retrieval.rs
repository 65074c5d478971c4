use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::objective::SimilarityMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Text queries ranked over the video gallery (columns of `S`).
    TextToVideo,
    /// Video queries ranked over the text gallery (rows of `S`).
    VideoToText,
}

/// 1-based rank of every query's true match. Higher similarity ranks first;
/// among equal scores the lower gallery index ranks first.
pub fn true_match_ranks(sim: &SimilarityMatrix, direction: Direction) -> Vec<usize> {
    let n = sim.len();
    let score = |q: usize, g: usize| match direction {
        Direction::VideoToText => sim.get(q, g),
        Direction::TextToVideo => sim.get(g, q),
    };
    (0..n)
        .map(|q| {
            let own = score(q, q);
            1 + (0..n)
                .filter(|&g| {
                    let s = score(q, g);
                    s > own || (s == own && g < q)
                })
                .count()
        })
        .collect()
}

/// Percentage of queries whose match ranks within the top `k`.
pub fn recall_at_k(sim: &SimilarityMatrix, k: usize, direction: Direction) -> Result<f64, MetricsError> {
    let n = sim.len();
    if k == 0 || k > n {
        return Err(MetricsError::InvalidK { k, gallery: n });
    }
    let hits = true_match_ranks(sim, direction).iter().filter(|&&r| r <= k).count();
    Ok(100.0 * hits as f64 / n as f64)
}

/// Median true-match rank; the lower middle value for an even count.
pub fn median_rank(sim: &SimilarityMatrix, direction: Direction) -> usize {
    let mut ranks = true_match_ranks(sim, direction);
    ranks.sort_unstable();
    ranks[(ranks.len() - 1) / 2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub queries: usize,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub median_rank: usize,
}

impl RetrievalReport {
    /// R@1/5/10 with K capped at the gallery size.
    pub fn compute(sim: &SimilarityMatrix, direction: Direction) -> Self {
        let n = sim.len();
        let r = |k: usize| recall_at_k(sim, k.min(n), direction).expect("k within gallery");
        Self {
            direction,
            queries: n,
            r1: r(1),
            r5: r(5),
            r10: r(10),
            median_rank: median_rank(sim, direction),
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::seed;

    fn matrix(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> SimilarityMatrix {
        let data = (0..n * n).map(|k| f(k / n, k % n)).collect();
        SimilarityMatrix::from_square(n, data).unwrap()
    }

    /// Sort every gallery by (score desc, index asc) and find the match.
    fn sorted_ranks(sim: &SimilarityMatrix, direction: Direction) -> Vec<usize> {
        let n = sim.len();
        (0..n)
            .map(|q| {
                let mut gallery: Vec<(f64, usize)> = (0..n)
                    .map(|g| {
                        let s = match direction {
                            Direction::VideoToText => sim.get(q, g),
                            Direction::TextToVideo => sim.get(g, q),
                        };
                        (s, g)
                    })
                    .collect();
                gallery.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                1 + gallery.iter().position(|&(_, g)| g == q).unwrap()
            })
            .collect()
    }

    #[test]
    fn identity_is_perfect() {
        let s = matrix(6, |i, j| f64::from(u8::from(i == j)));
        for d in [Direction::TextToVideo, Direction::VideoToText] {
            assert_eq!(recall_at_k(&s, 1, d).unwrap(), 100.0);
            assert_eq!(median_rank(&s, d), 1);
        }
    }

    #[test]
    fn anti_diagonal_best() {
        let s = matrix(4, |i, j| {
            if i + j == 3 {
                1.0
            } else {
                f64::from(u8::from(i == j)) * 0.5
            }
        });
        for d in [Direction::TextToVideo, Direction::VideoToText] {
            assert_eq!(recall_at_k(&s, 1, d).unwrap(), 0.0);
            assert_eq!(recall_at_k(&s, 4, d).unwrap(), 100.0);
        }
        assert!(recall_at_k(&s, 5, Direction::TextToVideo).is_err());
        assert!(recall_at_k(&s, 0, Direction::TextToVideo).is_err());
    }

    #[test]
    fn true_match_always_last() {
        let s = matrix(5, |i, j| if i == j { -1.0 } else { 0.0 });
        assert_eq!(median_rank(&s, Direction::TextToVideo), 5);
    }

    #[test]
    fn ties_favor_lower_index() {
        let s = matrix(3, |_, _| 0.5);
        assert_eq!(true_match_ranks(&s, Direction::VideoToText), vec![1, 2, 3]);
        // Even count: lower of the two middle ranks.
        let s = matrix(4, |_, _| 0.5);
        assert_eq!(median_rank(&s, Direction::VideoToText), 2);
    }

    #[test]
    fn matches_sort_based_oracle() {
        for s in 0..50 {
            let mut rng = seed::rng(s);
            let n = 8;
            // Coarse values to force ties.
            let sim = matrix(n, |_, _| f64::from(rng.gen_range(0..5u8)) / 4.0);
            for d in [Direction::TextToVideo, Direction::VideoToText] {
                let oracle = sorted_ranks(&sim, d);
                assert_eq!(true_match_ranks(&sim, d), oracle);
                for k in 1..=n {
                    let hits = oracle.iter().filter(|&&r| r <= k).count();
                    assert_eq!(recall_at_k(&sim, k, d).unwrap(), 100.0 * hits as f64 / n as f64);
                }
                let mut sorted = oracle.clone();
                sorted.sort();
                assert_eq!(median_rank(&sim, d), sorted[3]);
            }
        }
    }

    #[test]
    fn report_orders_and_clamps() {
        let s = matrix(3, |i, j| if i == j { 0.9 } else { (i + j) as f64 * 0.1 });
        let r = RetrievalReport::compute(&s, Direction::TextToVideo);
        assert!(r.r1 <= r.r5 && r.r5 <= r.r10 && r.r10 <= 100.0);
        assert_eq!(r.r10, 100.0);
        assert_eq!(r.queries, 3);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"text_to_video\""));
    }

    proptest! {
        #[test]
        fn invariant_under_increasing_maps(values in prop::collection::vec(-1.0f64..1.0, 36), k in 1usize..=6) {
            let s = SimilarityMatrix::from_square(6, values.clone()).unwrap();
            let t = SimilarityMatrix::from_square(6, values.iter().map(|v| (3.0 * v).exp() + 2.0).collect()).unwrap();
            for d in [Direction::TextToVideo, Direction::VideoToText] {
                prop_assert_eq!(recall_at_k(&s, k, d).unwrap(), recall_at_k(&t, k, d).unwrap());
                prop_assert_eq!(median_rank(&s, d), median_rank(&t, d));
            }
        }
    }
}
