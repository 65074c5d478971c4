//! Grouped multi-head scaled dot-product attention.
//!
//! A layout partitions the rows of a sequence into groups. Each row issues
//! its query in exactly one group and attends only over that group's key
//! slots. Groups are padded to a common slot width; padded slots receive an
//! additive [`MASKED_SCORE`] bias before the softmax and therefore carry zero
//! probability. Divided space-time attention and padded text attention are
//! both expressed as layouts.

use std::collections::BTreeMap;

use super::{DiffError, Real, Result};

/// Pre-softmax score given to padded key slots.
pub const MASKED_SCORE: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionGroup {
    /// Rows whose queries are answered by this group.
    pub queries: Vec<usize>,
    /// Key/value rows; `None` is a padded slot.
    pub keys: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionLayout {
    rows: usize,
    groups: Vec<AttentionGroup>,
}

impl AttentionLayout {
    pub fn new(rows: usize, groups: Vec<AttentionGroup>) -> Result<Self> {
        let mut seen = vec![false; rows];
        for (gi, g) in groups.iter().enumerate() {
            if !g.keys.iter().any(Option::is_some) {
                return Err(invalid(format!("group {gi} has no live key slot")));
            }
            if let Some(&j) = g.keys.iter().flatten().find(|&&j| j >= rows) {
                return Err(invalid(format!("group {gi} key row {j} out of {rows}")));
            }
            for &r in &g.queries {
                if r >= rows {
                    return Err(invalid(format!("group {gi} query row {r} out of {rows}")));
                }
                if std::mem::replace(&mut seen[r], true) {
                    return Err(invalid(format!("row {r} queried by more than one group")));
                }
            }
        }
        if let Some(r) = seen.iter().position(|s| !s) {
            return Err(invalid(format!("row {r} is not queried by any group")));
        }
        Ok(Self { rows, groups })
    }

    /// Single group over all rows; key rows at or beyond `live` are padding.
    pub fn full(rows: usize, live: usize) -> Result<Self> {
        let keys = (0..rows).map(|j| (j < live).then_some(j)).collect();
        Self::new(
            rows,
            vec![AttentionGroup {
                queries: (0..rows).collect(),
                keys,
            }],
        )
    }

    /// Row 0 is a global token; rows `1..` are tokens tagged with a group key.
    ///
    /// Tokens attend within their group plus the global row; groups are
    /// padded to the widest one. The global row attends over every row.
    pub fn grouped_with_global(tags: &[usize]) -> Result<Self> {
        let rows = tags.len() + 1;
        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &t) in tags.iter().enumerate() {
            members.entry(t).or_default().push(i + 1);
        }
        let width = 1 + members.values().map(Vec::len).max().unwrap_or(0);
        let mut groups = Vec::with_capacity(members.len() + 1);
        groups.push(AttentionGroup {
            queries: vec![0],
            keys: (0..rows).map(Some).collect(),
        });
        for rows_in_group in members.into_values() {
            let mut keys = Vec::with_capacity(width);
            keys.push(Some(0));
            keys.extend(rows_in_group.iter().copied().map(Some));
            keys.resize(width, None);
            groups.push(AttentionGroup {
                queries: rows_in_group,
                keys,
            });
        }
        Self::new(rows, groups)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn groups(&self) -> &[AttentionGroup] {
        &self.groups
    }

    /// Largest number of live (non-global-only) query rows in one group.
    pub fn max_group_queries(&self) -> usize {
        self.groups.iter().map(|g| g.queries.len()).max().unwrap_or(0)
    }

    fn prob_len(&self, heads: usize) -> usize {
        self.groups.iter().map(|g| g.queries.len() * g.keys.len() * heads).sum()
    }
}

fn invalid(detail: String) -> DiffError {
    DiffError::Invalid {
        op: "attention",
        detail,
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Returns the attention output and the cached probabilities.
pub(crate) fn forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    width: usize,
    heads: usize,
    layout: &AttentionLayout,
) -> (Vec<T>, Vec<T>) {
    let dh = width / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let masked = T::lit(MASKED_SCORE);
    let mut out = vec![T::zero(); layout.rows * width];
    let mut probs = Vec::with_capacity(layout.prob_len(heads));
    for g in &layout.groups {
        for &r in &g.queries {
            for h in 0..heads {
                let off = h * dh;
                let qh = &q[r * width + off..r * width + off + dh];
                let start = probs.len();
                let mut max = T::neg_infinity();
                for slot in &g.keys {
                    let s = match *slot {
                        Some(j) => dot(qh, &k[j * width + off..j * width + off + dh]) * scale,
                        None => masked,
                    };
                    max = max.max(s);
                    probs.push(s);
                }
                let p = &mut probs[start..];
                let mut total = T::zero();
                for s in p.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                for s in p.iter_mut() {
                    *s = *s / total;
                }
                let o = &mut out[r * width + off..r * width + off + dh];
                for (slot, &pj) in g.keys.iter().zip(p.iter()) {
                    if let Some(j) = *slot {
                        let vj = &v[j * width + off..j * width + off + dh];
                        for (oi, &vi) in o.iter_mut().zip(vj) {
                            *oi += pj * vi;
                        }
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Gradients with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    grad_out: &[T],
    width: usize,
    heads: usize,
    layout: &AttentionLayout,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = width / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = Vec::new();
    let mut cursor = 0;
    for g in &layout.groups {
        let w = g.keys.len();
        for &r in &g.queries {
            for h in 0..heads {
                let off = h * dh;
                let p = &probs[cursor..cursor + w];
                cursor += w;
                let go = &grad_out[r * width + off..r * width + off + dh];
                dp.clear();
                for (slot, &pj) in g.keys.iter().zip(p) {
                    match *slot {
                        Some(j) => {
                            let base = j * width + off;
                            dp.push(dot(go, &v[base..base + dh]));
                            for (d, &gi) in dv[base..base + dh].iter_mut().zip(go) {
                                *d += pj * gi;
                            }
                        }
                        None => dp.push(T::zero()),
                    }
                }
                let mean = p.iter().zip(&dp).fold(T::zero(), |a, (&pj, &dj)| a + pj * dj);
                let qbase = r * width + off;
                for ((slot, &pj), &dpj) in g.keys.iter().zip(p).zip(&dp) {
                    let Some(j) = *slot else { continue };
                    let ds = pj * (dpj - mean) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kbase = j * width + off;
                    for t in 0..dh {
                        dq[qbase + t] += ds * k[kbase + t];
                        dk[kbase + t] += ds * q[qbase + t];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
