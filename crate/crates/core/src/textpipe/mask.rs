use rand::seq::index;

use super::{TextError, TextSequence, MASK};
use crate::seed;
use crate::vidpipe::masked_count;

/// Whole words chosen for replacement and the token positions they cover.
#[derive(Debug, Clone, PartialEq)]
pub struct TextMaskPlan {
    pub ratio: f64,
    pub seed: u64,
    /// Indices into `word_groups`, ascending.
    pub groups: Vec<usize>,
    /// Union of the chosen spans, ascending.
    pub positions: Vec<usize>,
}

/// Picks `round(ratio · words)` whole words uniformly without replacement.
pub fn sample_text_mask(seq: &TextSequence, ratio: f64, seed_value: u64) -> Result<TextMaskPlan, TextError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(TextError::InvalidRatio(ratio));
    }
    let n = seq.word_groups.len();
    let k = masked_count(ratio, n);
    let mut groups = index::sample(&mut seed::rng(seed_value), n, k).into_vec();
    groups.sort_unstable();
    let positions = groups.iter().flat_map(|&g| seq.word_groups[g].clone()).collect();
    Ok(TextMaskPlan {
        ratio,
        seed: seed_value,
        groups,
        positions,
    })
}

/// Overwrites every planned position with `[MASK]`; length and padding are
/// untouched.
pub fn apply_text_mask(seq: &TextSequence, plan: &TextMaskPlan) -> Result<TextSequence, TextError> {
    let mut expected = Vec::with_capacity(plan.positions.len());
    for &g in &plan.groups {
        let span = seq
            .word_groups
            .get(g)
            .ok_or_else(|| TextError::PlanMismatch(format!("word {g} of {}", seq.word_groups.len())))?;
        expected.extend(span.clone());
    }
    if expected != plan.positions {
        return Err(TextError::PlanMismatch(
            "positions are not the union of the chosen words".into(),
        ));
    }
    let mut out = seq.clone();
    for &p in &plan.positions {
        out.ids[p] = MASK;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textpipe::{tokenize, Vocabulary, CLS, PAD};

    fn vocab() -> Vocabulary {
        Vocabulary::build(["a red square moving left across the frame"], 100)
    }

    #[test]
    fn one_of_seven_words_at_default_ratio() {
        let v = vocab();
        let s = tokenize("a red square moving left across the frame", &v, 16).unwrap();
        assert_eq!(s.word_groups.len(), 8);
        let s7 = tokenize("a red square moving left across frame", &v, 16).unwrap();
        let p = sample_text_mask(&s7, 0.15, 3).unwrap();
        assert_eq!(p.groups.len(), 1);
        assert_eq!(sample_text_mask(&s, 0.15, 3).unwrap().groups.len(), 1);
    }

    #[test]
    fn zero_ratio_is_identity() {
        let v = vocab();
        let s = tokenize("a red square", &v, 8).unwrap();
        let p = sample_text_mask(&s, 0.0, 9).unwrap();
        assert!(p.positions.is_empty());
        assert_eq!(apply_text_mask(&s, &p).unwrap(), s);
        assert!(sample_text_mask(&s, 1.0, 0).is_err());
    }

    #[test]
    fn multi_piece_word_is_masked_whole() {
        let v = vocab();
        let s = tokenize("redsquare red", &v, 16).unwrap();
        let span = s.word_groups[0].clone();
        assert!(span.len() >= 2);
        let plan = TextMaskPlan {
            ratio: 0.5,
            seed: 0,
            groups: vec![0],
            positions: span.clone().collect(),
        };
        let out = apply_text_mask(&s, &plan).unwrap();
        assert!(out.ids[span].iter().all(|&i| i == MASK));
        assert_eq!(out.ids[s.word_groups[1].start], s.ids[s.word_groups[1].start]);
    }

    #[test]
    fn foreign_plan_is_rejected() {
        let v = vocab();
        let s = tokenize("a red", &v, 8).unwrap();
        let bad = TextMaskPlan {
            ratio: 0.5,
            seed: 0,
            groups: vec![5],
            positions: vec![6],
        };
        assert!(matches!(apply_text_mask(&s, &bad), Err(TextError::PlanMismatch(_))));
        let bad = TextMaskPlan {
            groups: vec![0],
            positions: vec![2],
            ..bad
        };
        assert!(apply_text_mask(&s, &bad).is_err());
    }

    #[test]
    fn sampling_statistics_and_replacement_only() {
        let v = vocab();
        let s = tokenize("a red square moving left across the frame redsquare x", &v, 20).unwrap();
        let n = s.word_groups.len();
        let ratio = 0.3;
        let trials = 10_000u64;
        let mut counts = vec![0usize; n];
        for seed in 0..trials {
            let plan = sample_text_mask(&s, ratio, seed).unwrap();
            for &g in &plan.groups {
                counts[g] += 1;
            }
            let out = apply_text_mask(&s, &plan).unwrap();
            assert_eq!(out.length, s.length);
            assert_eq!(out.ids[0], CLS);
            for (i, (&a, &b)) in s.ids.iter().zip(&out.ids).enumerate() {
                assert!(b == a || b == MASK, "position {i} holds {b}");
                if i >= s.length {
                    assert_eq!(b, PAD);
                }
            }
            for g in &s.word_groups {
                let masked = out.ids[g.clone()].iter().filter(|&&i| i == MASK).count();
                assert!(masked == 0 || masked == g.len());
            }
        }
        let expected = masked_count(ratio, n) as f64 / n as f64;
        for (g, &c) in counts.iter().enumerate() {
            let freq = c as f64 / trials as f64;
            assert!((freq - expected).abs() <= 0.02, "word {g}: {freq} vs {expected}");
        }
    }
}
