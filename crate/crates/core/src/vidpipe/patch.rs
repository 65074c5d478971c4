use super::{VidError, VideoClip, CHANNELS};

/// Non-overlapping `patch × patch` tiles of every frame, flattened.
///
/// Token `t` belongs to frame `t / N` and raster position `t % N`, where
/// `N = (H / P) · (W / P)`. Each token row holds `P·P·C` raw bytes in
/// `(y, x, channel)` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchSet {
    pub clip_id: u64,
    frames: usize,
    patch: usize,
    grid_h: usize,
    grid_w: usize,
    data: Vec<u8>,
}

impl PatchSet {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    /// Patches per frame.
    pub fn per_frame(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn len(&self) -> usize {
        self.frames * self.per_frame()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token_width(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }

    pub fn token(&self, t: usize) -> &[u8] {
        let w = self.token_width();
        &self.data[t * w..(t + 1) * w]
    }

    /// Token of `spatial` position in `frame`.
    pub fn token_at(&self, frame: usize, spatial: usize) -> &[u8] {
        self.token(frame * self.per_frame() + spatial)
    }

    pub fn token_at_mut(&mut self, frame: usize, spatial: usize) -> &mut [u8] {
        let w = self.token_width();
        let t = frame * self.per_frame() + spatial;
        &mut self.data[t * w..(t + 1) * w]
    }

    pub fn frame_index(&self, t: usize) -> usize {
        t / self.per_frame()
    }

    pub fn spatial_index(&self, t: usize) -> usize {
        t % self.per_frame()
    }

    /// Reassembles the original frames.
    pub fn unpatchify(&self) -> VideoClip {
        let p = self.patch;
        let (h, w) = (self.grid_h * p, self.grid_w * p);
        let mut data = vec![0u8; self.frames * h * w * CHANNELS];
        for f in 0..self.frames {
            for s in 0..self.per_frame() {
                let (gy, gx) = (s / self.grid_w, s % self.grid_w);
                let tok = self.token_at(f, s);
                for py in 0..p {
                    let dst = ((f * h + gy * p + py) * w + gx * p) * CHANNELS;
                    let src = py * p * CHANNELS;
                    data[dst..dst + p * CHANNELS].copy_from_slice(&tok[src..src + p * CHANNELS]);
                }
            }
        }
        VideoClip::new(self.clip_id, self.frames, h, w, data).expect("extents come from a valid clip")
    }
}

/// Cuts every frame of `clip` into `patch × patch` tiles.
pub fn patchify(clip: &VideoClip, patch: usize) -> Result<PatchSet, VidError> {
    let (h, w) = (clip.height(), clip.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(VidError::Config(format!(
            "frame size {h}x{w} is not divisible by patch size {patch}"
        )));
    }
    let (grid_h, grid_w) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(clip.data().len());
    for f in 0..clip.frames() {
        let frame = clip.frame(f);
        for gy in 0..grid_h {
            for gx in 0..grid_w {
                for py in 0..patch {
                    let src = ((gy * patch + py) * w + gx * patch) * CHANNELS;
                    data.extend_from_slice(&frame[src..src + patch * CHANNELS]);
                }
            }
        }
    }
    Ok(PatchSet {
        clip_id: clip.id,
        frames: clip.frames(),
        patch,
        grid_h,
        grid_w,
        data,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn clip(frames: usize, h: usize, w: usize, salt: u8) -> VideoClip {
        let data = (0..frames * h * w * 3)
            .map(|i| (i as u8).wrapping_mul(37).wrapping_add(salt))
            .collect();
        VideoClip::new(1, frames, h, w, data).unwrap()
    }

    #[test]
    fn token_counts() {
        let p = patchify(&clip(1, 224, 224, 0), 16).unwrap();
        assert_eq!(p.per_frame(), 196);
        let p = patchify(&clip(4, 32, 32, 0), 16).unwrap();
        assert_eq!(p.len(), 16);
        assert_eq!(p.per_frame(), 4);
    }

    #[test]
    fn indivisible_frame_is_config_error() {
        let err = patchify(&clip(1, 30, 32, 0), 8).unwrap_err();
        assert!(matches!(err, VidError::Config(_)));
    }

    #[test]
    fn token_layout_is_frame_major_raster() {
        let c = clip(2, 16, 16, 5);
        let p = patchify(&c, 8).unwrap();
        assert_eq!(p.frame_index(5), 1);
        assert_eq!(p.spatial_index(5), 1);
        // spatial index 1 of frame 1: top row, second tile.
        let tok = p.token_at(1, 1);
        assert_eq!(&tok[..3], &c.pixel(1, 0, 8));
        assert_eq!(&tok[tok.len() - 3..], &c.pixel(1, 7, 15));
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(frames in 1usize..4, gh in 1usize..4, gw in 1usize..4, salt: u8) {
            let c = clip(frames, gh * 4, gw * 4, salt);
            prop_assert_eq!(patchify(&c, 4).unwrap().unpatchify(), c);
        }
    }
}
