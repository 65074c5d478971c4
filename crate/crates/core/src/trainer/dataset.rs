use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::seed::{self, tag};
use crate::vidpipe::{VideoClip, CHANNELS};

const CLIP_MAGIC: &[u8; 5] = b"MACV1";
/// Magic plus four little-endian u32 extents.
pub const CLIP_HEADER_LEN: usize = CLIP_MAGIC.len() + 16;

macro_rules! factor {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w { $($word => Some($name::$variant),)+ _ => None }
            }
        }
    };
}

factor!(Pattern { Solid => "solid", Striped => "striped", Dotted => "dotted", Checkered => "checkered" });
factor!(Color { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow" });
factor!(Motion { Left => "left", Right => "right", Up => "up", Down => "down" });

impl Color {
    fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [50, 70, 230],
            Color::Yellow => [230, 210, 40],
        }
    }
}

impl Motion {
    /// Unit displacement per frame as (dx, dy).
    fn delta(self) -> (i64, i64) {
        match self {
            Motion::Left => (-1, 0),
            Motion::Right => (1, 0),
            Motion::Up => (0, -1),
            Motion::Down => (0, 1),
        }
    }
}

impl Pattern {
    /// Whether object-relative pixel `(y, x)` takes the full color; the
    /// rest of the object is a darker shade. Every pattern repeats within
    /// four pixels, so any patch that sees the object sees its pattern.
    fn lit(self, y: usize, x: usize) -> bool {
        match self {
            Pattern::Solid => true,
            Pattern::Striped => (y / 2).is_multiple_of(2),
            Pattern::Dotted => y % 3 == 1 && x % 3 == 1,
            Pattern::Checkered => (y / 2 + x / 2).is_multiple_of(2),
        }
    }
}

/// The three generating factors of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Latent {
    pub pattern: Pattern,
    pub color: Color,
    pub motion: Motion,
}

impl Latent {
    pub const COUNT: usize = 64;

    /// Enumerates all tuples; `index` is taken modulo 64.
    pub fn from_index(index: usize) -> Self {
        let i = index % Self::COUNT;
        Self {
            pattern: Pattern::ALL[i / 16],
            color: Color::ALL[(i / 4) % 4],
            motion: Motion::ALL[i % 4],
        }
    }

    pub fn index(self) -> usize {
        let pattern = Pattern::ALL.iter().position(|&v| v == self.pattern).expect("listed");
        let color = Color::ALL.iter().position(|&v| v == self.color).expect("listed");
        let motion = Motion::ALL.iter().position(|&v| v == self.motion).expect("listed");
        pattern * 16 + color * 4 + motion
    }

    pub fn caption(self) -> String {
        format!(
            "a {} {} block moving {} across the frame",
            self.color.word(),
            self.pattern.word(),
            self.motion.word()
        )
    }

    /// Inverse of [`Latent::caption`].
    pub fn parse_caption(caption: &str) -> Option<Self> {
        let words: Vec<&str> = caption.split(' ').collect();
        match words.as_slice() {
            ["a", color, pattern, "block", "moving", motion, "across", "the", "frame"] => Some(Self {
                pattern: Pattern::from_word(pattern)?,
                color: Color::from_word(color)?,
                motion: Motion::from_word(motion)?,
            }),
            _ => None,
        }
    }

    pub fn words(self) -> [&'static str; 3] {
        [self.pattern.word(), self.color.word(), self.motion.word()]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub count: usize,
    pub frames: usize,
    pub frame_size: usize,
    pub object_size: usize,
    /// Pixels travelled per frame.
    pub speed: usize,
    /// Length in pixels of the fading trail left behind the object.
    pub trail: usize,
    /// Background pixels are uniform in `120 ± noise`.
    pub noise: u8,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            count: 256,
            frames: 4,
            frame_size: 32,
            object_size: 12,
            speed: 4,
            trail: 4,
            noise: 30,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.count == 0 || self.frames == 0 || self.object_size == 0 {
            return Err(TrainError::Config(
                "count, frames and object_size must be positive".into(),
            ));
        }
        let travel = self.speed * (self.frames - 1);
        if self.object_size + travel > self.frame_size {
            return Err(TrainError::Config(format!(
                "object of {} moving {travel} px does not fit a {} px frame",
                self.object_size, self.frame_size
            )));
        }
        Ok(())
    }

    /// Renders sample `id`, whose factors are `Latent::from_index(id)`.
    pub fn render(&self, id: u64) -> (Latent, VideoClip) {
        let latent = Latent::from_index(id as usize);
        let mut rng = seed::rng_for(self.seed, &[tag::DATASET, id]);
        let (size, obj) = (self.frame_size, self.object_size);
        let range = (size - obj) as i64;
        let travel = (self.speed * (self.frames - 1)) as i64;
        let (dx, dy) = latent.motion.delta();
        // Start positions are whole multiples of the per-frame step.
        let step = self.speed.max(1) as i64;
        let start = |d: i64, rng: &mut seed::Rng| {
            let (lo, hi) = match d {
                1 => (0, range - travel),
                -1 => (travel, range),
                _ => (0, range),
            };
            step * rng.gen_range((lo + step - 1) / step..=hi / step)
        };
        let x0 = start(dx, &mut rng);
        let y0 = start(dy, &mut rng);
        let color = latent.color.rgb();
        let shade = color.map(|c| c / 3);
        let trail = self.trail as i64;
        let noise = self.noise.min(120);
        let n = size as i64;
        let mut data = Vec::with_capacity(self.frames * size * size * CHANNELS);
        let mut bg = vec![0u8; size * size];
        for f in 0..self.frames as i64 {
            for g in bg.iter_mut() {
                *g = rng.gen_range(120 - noise..=120 + noise);
            }
            let shift = self.speed as i64 * f;
            let ox = x0 + dx * shift;
            let oy = y0 + dy * shift;
            for y in 0..n {
                for x in 0..n {
                    let (ry, rx) = (y - oy, x - ox);
                    let g = bg[(y * n + x) as usize];
                    let inside = |v: i64| (0..obj as i64).contains(&v);
                    if inside(ry) && inside(rx) {
                        let lit = latent.pattern.lit(ry as usize, rx as usize);
                        data.extend_from_slice(if lit { &color } else { &shade });
                        continue;
                    }
                    // Distance behind the trailing edge, zero when not in the trail.
                    let behind = match (dx, dy) {
                        (1, _) if inside(ry) => -rx,
                        (-1, _) if inside(ry) => rx - obj as i64 + 1,
                        (_, 1) if inside(rx) => -ry,
                        (_, -1) if inside(rx) => ry - obj as i64 + 1,
                        _ => 0,
                    };
                    if (1..=trail).contains(&behind) {
                        let w = 0.8 * (trail + 1 - behind) as f64 / (trail + 1) as f64;
                        let v = (w * 255.0 + (1.0 - w) * f64::from(g)).round() as u8;
                        data.extend_from_slice(&[v, v, v]);
                    } else {
                        data.extend_from_slice(&[g, g, g]);
                    }
                }
            }
        }
        let clip = VideoClip::new(id, self.frames, size, size, data).expect("extents are consistent");
        (latent, clip)
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: u64,
    pub caption: String,
    pub clip: String,
    /// `[pattern, color, motion]` words.
    pub latent: [String; 3],
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: u64,
    pub caption: String,
    pub clip: VideoClip,
}

/// Loaded dataset container.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn captions(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.caption.as_str())
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self, TrainError> {
        let root = root.as_ref().to_path_buf();
        let manifest = root.join("manifest.jsonl");
        let file = fs::File::open(&manifest).map_err(|e| TrainError::io(&manifest, e))?;
        let mut samples = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| TrainError::io(&manifest, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| TrainError::Format {
                path: manifest.clone(),
                detail: format!("line {}: {e}", n + 1),
            })?;
            let path = root.join(&rec.clip);
            let clip = read_clip(&path, rec.id)?;
            samples.push(Sample {
                id: rec.id,
                caption: rec.caption,
                clip,
            });
        }
        if samples.is_empty() {
            return Err(TrainError::Format {
                path: manifest,
                detail: "no samples".into(),
            });
        }
        Ok(Self { root, samples })
    }
}

/// Writes `spec` as a container under `root` and returns it loaded.
pub fn generate_dataset(spec: &SyntheticDatasetSpec, root: impl AsRef<Path>) -> Result<Dataset, TrainError> {
    spec.validate()?;
    let root = root.as_ref();
    let clips = root.join("clips");
    fs::create_dir_all(&clips).map_err(|e| TrainError::io(&clips, e))?;
    let manifest = root.join("manifest.jsonl");
    let file = fs::File::create(&manifest).map_err(|e| TrainError::io(&manifest, e))?;
    let mut out = BufWriter::new(file);
    for id in 0..spec.count as u64 {
        let (latent, clip) = spec.render(id);
        let rel = format!("clips/{id:06}.macv");
        write_clip(&root.join(&rel), &clip)?;
        let rec = ManifestRecord {
            id,
            caption: latent.caption(),
            clip: rel,
            latent: latent.words().map(str::to_string),
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(out, "{line}").map_err(|e| TrainError::io(&manifest, e))?;
    }
    out.flush().map_err(|e| TrainError::io(&manifest, e))?;
    Dataset::load(root)
}

pub fn write_clip(path: &Path, clip: &VideoClip) -> Result<(), TrainError> {
    let mut bytes = Vec::with_capacity(CLIP_HEADER_LEN + clip.data().len());
    bytes.extend_from_slice(CLIP_MAGIC);
    for v in [clip.frames(), clip.height(), clip.width(), CHANNELS] {
        bytes.extend_from_slice(&(v as u32).to_le_bytes());
    }
    bytes.extend_from_slice(clip.data());
    fs::write(path, bytes).map_err(|e| TrainError::io(path, e))
}

pub fn read_clip(path: &Path, id: u64) -> Result<VideoClip, TrainError> {
    let bytes = fs::read(path).map_err(|e| TrainError::io(path, e))?;
    let bad = |detail: String| TrainError::Format {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < CLIP_HEADER_LEN || &bytes[..CLIP_MAGIC.len()] != CLIP_MAGIC {
        return Err(bad("missing MACV1 header".into()));
    }
    let dims: Vec<usize> = bytes[CLIP_MAGIC.len()..CLIP_HEADER_LEN]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    if dims[3] != CHANNELS {
        return Err(bad(format!("{} channels, expected {CHANNELS}", dims[3])));
    }
    let expected = dims.iter().product::<usize>();
    if bytes.len() - CLIP_HEADER_LEN != expected {
        return Err(bad(format!(
            "{} sample bytes for {}x{}x{}x{}",
            bytes.len() - CLIP_HEADER_LEN,
            dims[0],
            dims[1],
            dims[2],
            dims[3]
        )));
    }
    VideoClip::new(id, dims[0], dims[1], dims[2], bytes[CLIP_HEADER_LEN..].to_vec()).map_err(|e| bad(e.to_string()))
}
