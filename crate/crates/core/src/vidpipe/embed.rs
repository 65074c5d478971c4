use crate::diffcore::{Array, ParamId, ParamInit, ParamLayout, ParamStore, Real, Tape, Var};

use super::{MaskPlan, PatchSet, VidError};

/// Learnable spatial (`max_patches × D`) and temporal (`max_frames × D`)
/// position tables. Every token of a spatial position shares its spatial
/// row; every token of a frame shares its temporal row.
#[derive(Debug, Clone)]
pub struct PositionalTables {
    pub spatial: ParamId,
    pub temporal: ParamId,
    pub max_patches: usize,
    pub max_frames: usize,
}

/// Linear patch projection plus positional tables.
#[derive(Debug, Clone)]
pub struct PatchEmbedding {
    pub weight: ParamId,
    pub bias: ParamId,
    pub positions: PositionalTables,
    pub token_width: usize,
    pub width: usize,
}

impl PatchEmbedding {
    pub fn register(
        layout: &mut ParamLayout,
        prefix: &str,
        token_width: usize,
        width: usize,
        max_patches: usize,
        max_frames: usize,
    ) -> Self {
        let init = ParamInit::TruncNormal { std: 0.02 };
        Self {
            weight: layout.add(
                format!("{prefix}.patch_proj.w"),
                &[token_width, width],
                ParamInit::TruncNormal {
                    std: (token_width as f64).sqrt().recip(),
                },
            ),
            bias: layout.add(format!("{prefix}.patch_proj.b"), &[width], ParamInit::Zeros),
            positions: PositionalTables {
                spatial: layout.add(format!("{prefix}.pos_spatial"), &[max_patches, width], init.clone()),
                temporal: layout.add(format!("{prefix}.pos_temporal"), &[max_frames, width], init),
                max_patches,
                max_frames,
            },
            token_width,
            width,
        }
    }
}

/// Embeddings of the visible tokens only, with their positions.
#[derive(Debug, Clone)]
pub struct VisibleTokens {
    pub embeddings: Var,
    pub frame_index: Vec<usize>,
    pub spatial_index: Vec<usize>,
}

impl VisibleTokens {
    pub fn len(&self) -> usize {
        self.frame_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_index.is_empty()
    }
}

/// Maps a byte to roughly `[-1, 1]`.
fn normalize<T: Real>(b: u8) -> T {
    T::lit(f64::from(b) / 127.5 - 1.0)
}

/// Projects the visible patches of `plan` and adds their positional rows.
///
/// Masked patches are never read: the output has one row per visible token.
pub fn embed_and_gather<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    embed: &PatchEmbedding,
    patches: &PatchSet,
    plan: &MaskPlan,
) -> Result<VisibleTokens, VidError> {
    if plan.frames() != patches.frames() || plan.patches_per_frame() != patches.per_frame() {
        return Err(VidError::PlanMismatch {
            plan_frames: plan.frames(),
            plan_patches: plan.patches_per_frame(),
            frames: patches.frames(),
            patches: patches.per_frame(),
        });
    }
    if patches.per_frame() > embed.positions.max_patches || patches.frames() > embed.positions.max_frames {
        return Err(VidError::Config(format!(
            "{} frames x {} patches exceed positional tables {} x {}",
            patches.frames(),
            patches.per_frame(),
            embed.positions.max_frames,
            embed.positions.max_patches
        )));
    }
    if patches.token_width() != embed.token_width {
        return Err(VidError::Config(format!(
            "patch width {} does not match projection input {}",
            patches.token_width(),
            embed.token_width
        )));
    }
    let tokens = plan.visible_tokens();
    if tokens.is_empty() {
        return Err(VidError::Config("no visible tokens".into()));
    }
    let mut data = Vec::with_capacity(tokens.len() * embed.token_width);
    for &(f, s) in &tokens {
        data.extend(patches.token_at(f, s).iter().map(|&b| normalize::<T>(b)));
    }
    let (frame_index, spatial_index): (Vec<usize>, Vec<usize>) = tokens.into_iter().unzip();
    let raw = tape.input(Array::new(vec![frame_index.len(), embed.token_width], data)?)?;
    let w = tape.param(store, embed.weight)?;
    let b = tape.param(store, embed.bias)?;
    let es = tape.param(store, embed.positions.spatial)?;
    let et = tape.param(store, embed.positions.temporal)?;
    let x = tape.matmul(raw, w)?;
    let x = tape.add_row(x, b)?;
    let pos_s = tape.gather_rows(es, &spatial_index)?;
    let pos_t = tape.gather_rows(et, &frame_index)?;
    let x = tape.add(x, pos_s)?;
    let embeddings = tape.add(x, pos_t)?;
    Ok(VisibleTokens {
        embeddings,
        frame_index,
        spatial_index,
    })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::vidpipe::{patchify, sample_mask, MaskStrategy, VideoClip};

    fn setup() -> (PatchEmbedding, ParamStore<f64>, PatchSet) {
        let mut layout = ParamLayout::new();
        let embed = PatchEmbedding::register(&mut layout, "video", 4 * 4 * 3, 8, 4, 3);
        let store = ParamStore::init(layout.specs(), 5).unwrap();
        let data = (0..3 * 8 * 8 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let clip = VideoClip::new(0, 3, 8, 8, data).unwrap();
        (embed, store, patchify(&clip, 4).unwrap())
    }

    #[test]
    fn full_plan_keeps_every_row() {
        let (embed, store, patches) = setup();
        let mut tape = Tape::new();
        let out = embed_and_gather(&mut tape, &store, &embed, &patches, &MaskPlan::full(3, 4)).unwrap();
        assert_eq!(tape.value(out.embeddings).shape(), &[12, 8]);
    }

    #[test]
    fn masked_rows_are_absent() {
        let (embed, store, patches) = setup();
        let plan = sample_mask(MaskStrategy::Random, 0.5, 3, 4, 2).unwrap();
        let mut tape = Tape::new();
        let out = embed_and_gather(&mut tape, &store, &embed, &patches, &plan).unwrap();
        assert_eq!(tape.value(out.embeddings).rows(), 6);
        assert_eq!(out.len(), 6);
    }

    #[test]
    fn same_spatial_index_shares_spatial_row() {
        let (embed, store, patches) = setup();
        let mut tape = Tape::new();
        let out = embed_and_gather(&mut tape, &store, &embed, &patches, &MaskPlan::full(3, 4)).unwrap();
        let es = store.value(embed.positions.spatial);
        let et = store.value(embed.positions.temporal);
        let w = store.value(embed.weight);
        // Strip projection and temporal rows; what remains is the spatial row.
        for t in [1usize, 5, 9] {
            let (f, s) = (out.frame_index[t], out.spatial_index[t]);
            assert_eq!(s, 1);
            let row = tape.value(out.embeddings).row(t);
            for j in 0..8 {
                let proj: f64 = patches
                    .token_at(f, s)
                    .iter()
                    .enumerate()
                    .map(|(i, &b)| normalize::<f64>(b) * w.at(i, j))
                    .sum();
                let residual = row[j] - proj - et.at(f, j);
                assert!((residual - es.at(1, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_plan_is_rejected() {
        let (embed, store, patches) = setup();
        let mut tape = Tape::new();
        let err = embed_and_gather(&mut tape, &store, &embed, &patches, &MaskPlan::full(2, 4)).unwrap_err();
        assert!(matches!(err, VidError::PlanMismatch { .. }));
    }
}
