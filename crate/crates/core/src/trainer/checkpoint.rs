use std::fs;
use std::path::Path;

use super::{AdamState, SessionConfig, TrainError, LOG_TAU};
use crate::diffcore::{Array, ParamStore};
use crate::encoders::{EncoderConfig, MacModel};
use crate::textpipe::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MACCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

const META_STEP: &str = "meta.step";
const META_EPOCH: &str = "meta.epoch";
const META_CONFIG: &str = "meta.config_json";
const META_VOCAB: &str = "meta.vocab";

/// Complete training state: parameters (including the log-temperature),
/// optimizer moments, completed epochs and the configuration echo. Every
/// random stream is derived from the configured seed and the epoch
/// counter, so these fields are also the full generator state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: SessionConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<f32>,
    pub adam: AdamState,
    pub epoch: usize,
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f32>,
}

/// u64 split into four exact 16-bit chunks, low first.
fn u64_values(v: u64) -> Vec<f32> {
    (0..4).map(|k| ((v >> (16 * k)) & 0xFFFF) as f32).collect()
}

fn integer_values(e: &Entry, max: f32) -> Result<impl Iterator<Item = u64> + '_, TrainError> {
    if let Some(bad) = e
        .values
        .iter()
        .find(|v| !(v.fract() == 0.0 && (0.0..=max).contains(*v)))
    {
        return Err(TrainError::Entry {
            name: e.name.clone(),
            detail: format!("value {bad} is not an integer in 0..={max}"),
        });
    }
    Ok(e.values.iter().map(|&v| v as u64))
}

fn decode_u64(e: &Entry) -> Result<u64, TrainError> {
    if e.values.len() != 4 {
        return Err(TrainError::Shape {
            name: e.name.clone(),
            expected: vec![4],
            found: e.shape.clone(),
        });
    }
    Ok(integer_values(e, 65535.0)?
        .enumerate()
        .fold(0, |acc, (k, c)| acc | (c << (16 * k))))
}

fn decode_text(e: &Entry) -> Result<String, TrainError> {
    let bytes: Vec<u8> = integer_values(e, 255.0)?.map(|b| b as u8).collect();
    String::from_utf8(bytes).map_err(|err| TrainError::Entry {
        name: e.name.clone(),
        detail: err.to_string(),
    })
}

fn text_entry(name: &str, text: &str) -> Entry {
    Entry {
        name: name.into(),
        shape: vec![text.len()],
        values: text.bytes().map(f32::from).collect(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TrainError::Entry {
            name: what.into(),
            detail: "payload ends early".into(),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn model(&self) -> Result<MacModel, TrainError> {
        Ok(MacModel::new(self.config.encoder.clone())?)
    }

    pub fn log_tau(&self) -> f64 {
        let id = self
            .params
            .id(LOG_TAU)
            .expect("checkpoints always carry the temperature");
        f64::from(self.params.value(id).data()[0])
    }

    pub fn tau(&self) -> f64 {
        self.config.contrastive.tau(self.log_tau())
    }

    /// Fails with a shape error naming the first parameter whose stored
    /// shape differs from what `encoder` would build.
    pub fn check_compatible(&self, encoder: &EncoderConfig) -> Result<(), TrainError> {
        let model = MacModel::new(encoder.clone())?;
        for spec in model.layout().specs() {
            let id = self
                .params
                .id(&spec.name)
                .ok_or_else(|| TrainError::MissingEntry(spec.name.clone()))?;
            let found = self.params.value(id).shape();
            if found != spec.shape.as_slice() {
                return Err(TrainError::Shape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: found.to_vec(),
                });
            }
        }
        Ok(())
    }

    fn entries(&self) -> Vec<Entry> {
        let mut out = Vec::new();
        for (_, p) in self.params.iter() {
            out.push(Entry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                values: p.value.data().to_vec(),
            });
        }
        for (kind, moments) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            for ((_, p), buf) in self.params.iter().zip(moments) {
                out.push(Entry {
                    name: format!("adam.{kind}/{}", p.name),
                    shape: p.value.shape().to_vec(),
                    values: buf.clone(),
                });
            }
        }
        for (name, v) in [(META_STEP, self.adam.step), (META_EPOCH, self.epoch as u64)] {
            out.push(Entry {
                name: name.into(),
                shape: vec![4],
                values: u64_values(v),
            });
        }
        let config = serde_json::to_string(&self.config).expect("config serializes");
        out.push(text_entry(META_CONFIG, &config));
        out.push(text_entry(META_VOCAB, &self.vocab.to_text()));
        out
    }

    /// Magic, version, entry count, entries, then the CRC32 of everything
    /// after the magic.
    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self.entries();
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for e in &entries {
            b.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            b.extend_from_slice(e.name.as_bytes());
            b.push(e.shape.len() as u8);
            for &d in &e.shape {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.values {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&b[CHECKPOINT_MAGIC.len()..]);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let header = |detail: &str| TrainError::Entry {
            name: "header".into(),
            detail: detail.into(),
        };
        if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(header("bad magic, expected MACCKPT1"));
        }
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 {
            return Err(header("file ends before the checksum"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&body[CHECKPOINT_MAGIC.len()..]);
        if stored != computed {
            return Err(TrainError::Crc { stored, computed });
        }

        let mut r = Reader {
            bytes: body,
            pos: CHECKPOINT_MAGIC.len(),
        };
        let version = r.u32("header")?;
        if version != CHECKPOINT_VERSION {
            return Err(header(&format!("version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let count = r.u32("header")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for k in 0..count {
            let what = format!("entry #{k}");
            let len = u16::from_le_bytes(r.take(2, &what)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(len, &what)?.to_vec()).map_err(|e| TrainError::Entry {
                name: what.clone(),
                detail: e.to_string(),
            })?;
            let rank = r.take(1, &name)?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32(&name).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| TrainError::Entry {
                    name: name.clone(),
                    detail: "shape overflows".into(),
                })?;
            let raw = r.take(n.saturating_mul(4), &name)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push(Entry { name, shape, values });
        }
        if r.pos != body.len() {
            return Err(header("trailing bytes after the last entry"));
        }
        Self::from_entries(entries)
    }

    fn from_entries(entries: Vec<Entry>) -> Result<Self, TrainError> {
        let find = |name: &str| {
            entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| TrainError::MissingEntry(name.into()))
        };
        let config_entry = find(META_CONFIG)?;
        let config: SessionConfig =
            serde_json::from_str(&decode_text(config_entry)?).map_err(|e| TrainError::Entry {
                name: META_CONFIG.into(),
                detail: e.to_string(),
            })?;
        let vocab = Vocabulary::from_text(&decode_text(find(META_VOCAB)?)?).map_err(|e| TrainError::Entry {
            name: META_VOCAB.into(),
            detail: e.to_string(),
        })?;
        let step = decode_u64(find(META_STEP)?)?;
        let epoch = decode_u64(find(META_EPOCH)?)? as usize;

        let model = MacModel::new(config.encoder.clone())?;
        let mut expected: Vec<(String, Vec<usize>)> = model
            .layout()
            .specs()
            .iter()
            .map(|s| (s.name.clone(), s.shape.clone()))
            .collect();
        expected.push((LOG_TAU.into(), vec![1]));

        let checked = |name: &str, shape: &[usize]| -> Result<&Entry, TrainError> {
            let e = find(name)?;
            if e.shape != shape {
                return Err(TrainError::Shape {
                    name: name.into(),
                    expected: shape.to_vec(),
                    found: e.shape.clone(),
                });
            }
            Ok(e)
        };
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for (name, shape) in &expected {
            let e = checked(name, shape)?;
            params.insert(name.clone(), Array::new(shape.clone(), e.values.clone())?)?;
            m.push(checked(&format!("adam.m/{name}"), shape)?.values.clone());
            v.push(checked(&format!("adam.v/{name}"), shape)?.values.clone());
        }
        let known = 3 * expected.len() + 4;
        if entries.len() != known {
            let extra = entries
                .iter()
                .find(|e| {
                    let base = e
                        .name
                        .strip_prefix("adam.m/")
                        .or(e.name.strip_prefix("adam.v/"))
                        .unwrap_or(&e.name);
                    !e.name.starts_with("meta.") && !expected.iter().any(|(n, _)| n == base)
                })
                .map_or("<duplicate>".to_string(), |e| e.name.clone());
            return Err(TrainError::Entry {
                name: extra,
                detail: "not part of the configured model".into(),
            });
        }
        Ok(Self {
            config,
            vocab,
            params,
            adam: AdamState { step, m, v },
            epoch,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| TrainError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| TrainError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
