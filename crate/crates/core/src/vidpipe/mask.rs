use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::VidError;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    /// Keep every patch.
    None,
    /// Independent uniform draw per frame.
    #[default]
    Random,
    /// One draw shared by all frames.
    Tube,
}

impl std::str::FromStr for MaskStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "random" => Ok(Self::Random),
            "tube" => Ok(Self::Tube),
            other => Err(format!("unknown mask strategy `{other}` (none|random|tube)")),
        }
    }
}

/// Number of masked patches out of `patches` at `ratio`, rounding half up.
/// The slack keeps decimal ratios such as `0.35 · 90` on the upper side of
/// an exact tie.
pub fn masked_count(ratio: f64, patches: usize) -> usize {
    (ratio * patches as f64 + 0.5 + 1e-9).floor() as usize
}

/// Per-frame sorted lists of visible spatial indices.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub seed: u64,
    patches: usize,
    visible: Vec<Vec<usize>>,
}

impl MaskPlan {
    /// Plan that keeps everything.
    pub fn full(frames: usize, patches: usize) -> Self {
        Self {
            strategy: MaskStrategy::None,
            ratio: 0.0,
            seed: 0,
            patches,
            visible: vec![(0..patches).collect(); frames],
        }
    }

    pub fn frames(&self) -> usize {
        self.visible.len()
    }

    pub fn patches_per_frame(&self) -> usize {
        self.patches
    }

    pub fn visible(&self, frame: usize) -> &[usize] {
        &self.visible[frame]
    }

    /// Spatial indices hidden in `frame`, ascending.
    pub fn masked(&self, frame: usize) -> Vec<usize> {
        let vis = &self.visible[frame];
        (0..self.patches).filter(|s| vis.binary_search(s).is_err()).collect()
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().map(Vec::len).sum()
    }

    /// `(frame, spatial)` of every visible token, frame-major.
    pub fn visible_tokens(&self) -> Vec<(usize, usize)> {
        self.visible
            .iter()
            .enumerate()
            .flat_map(|(f, v)| v.iter().map(move |&s| (f, s)))
            .collect()
    }
}

fn complement(masked: &[usize], patches: usize) -> Vec<usize> {
    let mut hidden = vec![false; patches];
    for &m in masked {
        hidden[m] = true;
    }
    (0..patches).filter(|&s| !hidden[s]).collect()
}

/// Draws a mask plan for `frames × patches` tokens.
pub fn sample_mask(
    strategy: MaskStrategy,
    ratio: f64,
    frames: usize,
    patches: usize,
    seed_value: u64,
) -> Result<MaskPlan, VidError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(VidError::InvalidRatio(ratio));
    }
    if strategy == MaskStrategy::None {
        return Ok(MaskPlan {
            seed: seed_value,
            ..MaskPlan::full(frames, patches)
        });
    }
    let k = masked_count(ratio, patches);
    if k >= patches {
        return Err(VidError::DegeneratePlan { ratio, patches });
    }
    let mut rng = seed::rng(seed_value);
    let visible = match strategy {
        MaskStrategy::Tube => {
            let drawn = index::sample(&mut rng, patches, k).into_vec();
            vec![complement(&drawn, patches); frames]
        }
        _ => (0..frames)
            .map(|_| complement(&index::sample(&mut rng, patches, k).into_vec(), patches))
            .collect(),
    };
    Ok(MaskPlan {
        strategy,
        ratio,
        seed: seed_value,
        patches,
        visible,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn default_ratio_counts() {
        assert_eq!(masked_count(0.6, 196), 118);
        let p = sample_mask(MaskStrategy::Random, 0.6, 4, 196, 1).unwrap();
        for f in 0..4 {
            assert_eq!(p.visible(f).len(), 78);
            assert_eq!(p.masked(f).len(), 118);
        }
        assert_eq!(masked_count(0.6, 16), 10);
    }

    #[test]
    fn decimal_ties_round_up() {
        // 0.35 · 90 and 0.7 · 45 are 31.5 in exact arithmetic.
        assert_eq!(masked_count(0.35, 90), 32);
        assert_eq!(masked_count(0.7, 45), 32);
        assert_eq!(masked_count(0.15, 7), 1);
    }

    #[test]
    fn zero_ratio_keeps_everything() {
        for strategy in [MaskStrategy::Random, MaskStrategy::Tube, MaskStrategy::None] {
            let p = sample_mask(strategy, 0.0, 3, 16, 4).unwrap();
            assert_eq!(p.visible_count(), 48);
        }
        let p = sample_mask(MaskStrategy::None, 0.9, 3, 16, 4).unwrap();
        assert_eq!(p.visible_count(), 48);
    }

    #[test]
    fn invalid_and_degenerate_ratios() {
        assert!(matches!(
            sample_mask(MaskStrategy::Random, 1.0, 1, 16, 0),
            Err(VidError::InvalidRatio(_))
        ));
        assert!(matches!(
            sample_mask(MaskStrategy::Random, -0.1, 1, 16, 0),
            Err(VidError::InvalidRatio(_))
        ));
        // round(0.97 * 16) = 16
        assert!(matches!(
            sample_mask(MaskStrategy::Tube, 0.97, 1, 16, 0),
            Err(VidError::DegeneratePlan { .. })
        ));
    }

    #[test]
    fn tube_replicates_across_frames() {
        for s in 0..50 {
            let p = sample_mask(MaskStrategy::Tube, 0.6, 4, 16, s).unwrap();
            for f in 1..4 {
                assert_eq!(p.visible(0), p.visible(f));
            }
        }
    }

    #[test]
    fn random_frames_usually_differ() {
        let differing = (0..1000)
            .filter(|&s| {
                let p = sample_mask(MaskStrategy::Random, 0.6, 4, 16, s).unwrap();
                (1..4).any(|f| p.visible(f) != p.visible(0))
            })
            .count();
        assert!(differing > 990, "{differing}/1000");
    }

    #[test]
    fn each_index_masked_at_ratio_frequency() {
        // 0.6 * 20 is integral, so the realized ratio equals the nominal one.
        let n = 20;
        let ratio = 0.6;
        let trials = 10_000u64;
        let mut counts = vec![0usize; n];
        for s in 0..trials {
            let p = sample_mask(MaskStrategy::Random, ratio, 1, n, s).unwrap();
            for m in p.masked(0) {
                counts[m] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / trials as f64;
            assert!((freq - ratio).abs() <= 0.02, "index {i}: {freq}");
        }
    }

    proptest! {
        #[test]
        fn visible_count_is_exact(ratio in 0.0f64..0.95, n in 1usize..300, frames in 1usize..5, s: u64, tube: bool) {
            let strategy = if tube { MaskStrategy::Tube } else { MaskStrategy::Random };
            let k = masked_count(ratio, n);
            match sample_mask(strategy, ratio, frames, n, s) {
                Ok(p) => {
                    for f in 0..frames {
                        prop_assert_eq!(p.visible(f).len(), n - k);
                        prop_assert!(p.visible(f).windows(2).all(|w| w[0] < w[1]));
                    }
                }
                Err(VidError::DegeneratePlan { .. }) => prop_assert!(k >= n),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
    }
}
