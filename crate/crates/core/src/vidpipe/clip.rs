use image::imageops::{self, FilterType};
use image::RgbImage;

use super::VidError;

pub const CHANNELS: usize = 3;

/// Raw RGB frames, `frames × height × width × 3` bytes in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoClip {
    pub id: u64,
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl VideoClip {
    pub fn new(id: u64, frames: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self, VidError> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(VidError::Config(format!(
                "clip {id} has an empty extent ({frames}x{height}x{width})"
            )));
        }
        let expected = frames * height * width * CHANNELS;
        if data.len() != expected {
            return Err(VidError::Config(format!(
                "clip {id}: {} bytes for {frames}x{height}x{width}x{CHANNELS}",
                data.len()
            )));
        }
        Ok(Self {
            id,
            frames,
            height,
            width,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * CHANNELS
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.frame_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn pixel(&self, f: usize, y: usize, x: usize) -> [u8; 3] {
        let o = f * self.frame_len() + (y * self.width + x) * CHANNELS;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// New clip made of the listed frames, in the listed order.
    pub fn select_frames(&self, indices: &[usize]) -> Result<Self, VidError> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.frames) {
            return Err(VidError::Config(format!(
                "frame {bad} out of {} in clip {}",
                self.frames, self.id
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * self.frame_len());
        for &i in indices {
            data.extend_from_slice(self.frame(i));
        }
        Self::new(self.id, indices.len(), self.height, self.width, data)
    }

    /// Center-crops every frame to a square and resizes it to `size × size`.
    /// A clip that is already `size × size` is returned unchanged.
    pub fn preprocess(&self, size: usize) -> Result<Self, VidError> {
        if self.height == size && self.width == size {
            return Ok(self.clone());
        }
        let side = self.height.min(self.width);
        let (top, left) = ((self.height - side) / 2, (self.width - side) / 2);
        let mut data = Vec::with_capacity(self.frames * size * size * CHANNELS);
        for f in 0..self.frames {
            let img = RgbImage::from_raw(self.width as u32, self.height as u32, self.frame(f).to_vec())
                .ok_or_else(|| VidError::Config(format!("clip {} frame {f} is malformed", self.id)))?;
            let crop = imageops::crop_imm(&img, left as u32, top as u32, side as u32, side as u32).to_image();
            let resized = imageops::resize(&crop, size as u32, size as u32, FilterType::Triangle);
            data.extend_from_slice(resized.as_raw());
        }
        Self::new(self.id, self.frames, size, size, data)
    }
}

/// Wraps a still image as a one-frame clip.
pub fn image_as_clip(image: &RgbImage, id: u64) -> Result<VideoClip, VidError> {
    VideoClip::new(
        id,
        1,
        image.height() as usize,
        image.width() as usize,
        image.as_raw().clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(frames: usize, h: usize, w: usize) -> VideoClip {
        let data = (0..frames * h * w * 3).map(|i| (i * 31 % 251) as u8).collect();
        VideoClip::new(3, frames, h, w, data).unwrap()
    }

    #[test]
    fn rejects_wrong_length() {
        assert!(VideoClip::new(0, 2, 4, 4, vec![0; 10]).is_err());
        assert!(VideoClip::new(0, 0, 4, 4, vec![]).is_err());
    }

    #[test]
    fn select_frames_reorders() {
        let c = clip(4, 2, 2);
        let s = c.select_frames(&[3, 0]).unwrap();
        assert_eq!(s.frames(), 2);
        assert_eq!(s.frame(0), c.frame(3));
        assert_eq!(s.frame(1), c.frame(0));
        assert!(c.select_frames(&[4]).is_err());
    }

    #[test]
    fn preprocess_crops_to_square_target() {
        let c = clip(2, 40, 60);
        let p = c.preprocess(32).unwrap();
        assert_eq!((p.frames(), p.height(), p.width()), (2, 32, 32));
        assert_eq!(p.preprocess(32).unwrap(), p);
        assert_eq!(p.preprocess(32).unwrap(), p.preprocess(32).unwrap());
    }

    #[test]
    fn image_becomes_single_frame() {
        let img = RgbImage::from_fn(224, 224, |x, y| image::Rgb([x as u8, y as u8, 7]));
        let c = image_as_clip(&img, 9).unwrap();
        assert_eq!((c.frames(), c.height(), c.width()), (1, 224, 224));
        assert_eq!(c.pixel(0, 5, 6), [6, 5, 7]);
    }
}
