//! On-disk formats.
//!
//! Every file is one named-array container:
//!
//! | offset | size | content                                            |
//! |--------|------|----------------------------------------------------|
//! | 0      | 8    | magic `ECHOARR\0`                                  |
//! | 8      | 4    | format version, `u32` LE (currently 1)             |
//! | 12     | 4    | dtype, `u32` LE: 0 = `f32`, 1 = `f64`              |
//! | 16     | 8    | header length `n`, `u64` LE                        |
//! | 24     | n    | UTF-8 JSON header `{"meta": {...}, "arrays": [...]}` |
//! | 24 + n | ...  | array payloads in header order, little-endian      |
//!
//! Each `arrays` entry is `{"name": .., "shape": [..]}`; the payload of an
//! array is `prod(shape)` values of the container dtype. Trailing bytes are
//! rejected. Samples are stored as `f32`; checkpoints and generated clips as
//! `f64`.

use std::fs;
use std::path::{Path, PathBuf};

use echo_core::datamodel::{
    AudioFeatureSeq, ConversationSample, DialogueHistory, MaskLayout, MotionLatentCodec, MotionSeq, Rect,
    SampleMeta, Speaker, SpatialLatent, Turn, VisualTokenSeq,
};
use echo_core::nn::Parameters;
use echo_core::tensor::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"ECHOARR\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u32 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Value,
    arrays: Vec<ArrayEntry>,
}

/// Metadata plus ordered named arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: Value,
    pub arrays: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(meta: Value) -> Self {
        Self { meta, arrays: Vec::new() }
    }

    pub fn push(&mut self, name: &str, t: Tensor) {
        self.arrays.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CliError::Format(format!("missing array `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.arrays.iter().any(|(n, _)| n == name)
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Vec<u8> {
        let header = Header {
            meta: self.meta.clone(),
            arrays: self.arrays.iter().map(|(n, t)| ArrayEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(24 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&dtype.code().to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.arrays {
            for &v in t.data() {
                match dtype {
                    Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Dtype)> {
        let bad = |m: &str| CliError::Format(m.to_string());
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err(bad("not an array container (bad magic or truncated)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(CliError::Format(format!("unsupported container version {version}")));
        }
        let dtype = match u32::from_le_bytes(bytes[12..16].try_into().unwrap()) {
            0 => Dtype::F32,
            1 => Dtype::F64,
            other => return Err(CliError::Format(format!("unknown dtype code {other}"))),
        };
        let n = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let body = bytes.get(24..24usize.saturating_add(n)).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| CliError::Format(format!("header: {e}")))?;
        let mut pos = 24 + n;
        let w = dtype.width();
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for a in header.arrays {
            let len: usize = a.shape.iter().product();
            let raw = bytes
                .get(pos..pos + len * w)
                .ok_or_else(|| CliError::Format(format!("truncated payload of `{}`", a.name)))?;
            let data: Vec<f64> = raw
                .chunks_exact(w)
                .map(|c| match dtype {
                    Dtype::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                    Dtype::F64 => f64::from_le_bytes(c.try_into().unwrap()),
                })
                .collect();
            pos += len * w;
            arrays.push((a.name, Tensor::new(&a.shape, data)?));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after last array"));
        }
        Ok((Self { meta: header.meta, arrays }, dtype))
    }

    pub fn write(&self, path: &Path, dtype: Dtype) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        fs::write(path, self.to_bytes(dtype)).map_err(|e| CliError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes).map(|(c, _)| c).map_err(|e| match e {
            CliError::Format(m) => CliError::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn bools(t: &Tensor) -> Vec<bool> {
    t.data().iter().map(|&v| v != 0.0).collect()
}

fn bool_tensor(v: &[bool]) -> Tensor {
    Tensor::from_fn(&[v.len()], |i| if v[i] { 1.0 } else { 0.0 })
}

fn rect_json(r: &Rect) -> Value {
    serde_json::json!([r.row0, r.row1, r.col0, r.col1])
}

fn rect_from(v: &Value) -> Result<Rect> {
    let a: [usize; 4] = serde_json::from_value(v.clone()).map_err(|e| CliError::Format(format!("mask rectangle: {e}")))?;
    Ok(Rect::new(a[0], a[1], a[2], a[3]))
}

/// Parameters of the fixed motion codec, carried with every sample so that
/// generated latents can be decoded without the synthesis config.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecSpec {
    pub gain: f64,
    pub seed: u64,
}

impl CodecSpec {
    pub fn build(&self, sample: &ConversationSample) -> Result<MotionLatentCodec> {
        Ok(MotionLatentCodec::new(&sample.masks()?, sample.gt_latent.channels(), self.gain, self.seed)?)
    }
}

#[derive(Serialize, Deserialize)]
struct SampleMetaJson {
    kind: String,
    fps: f64,
    face: Value,
    lip: Value,
    dialogue: Vec<(String, String)>,
    emotion_label: Option<String>,
    conversation_id: u64,
    window_index: usize,
    seed: u64,
    codec: Option<CodecSpec>,
}

pub fn sample_container(s: &ConversationSample, codec: Option<CodecSpec>) -> Container {
    let meta = SampleMetaJson {
        kind: "sample".into(),
        fps: s.user_audio.fps(),
        face: rect_json(&s.mask_layout.face),
        lip: rect_json(&s.mask_layout.lip),
        dialogue: s.dialogue.turns().iter().map(|t| (t.speaker.as_str().to_string(), t.text.clone())).collect(),
        emotion_label: s.emotion_label.clone(),
        conversation_id: s.meta.conversation_id,
        window_index: s.meta.window_index,
        seed: s.meta.seed,
        codec,
    };
    let mut c = Container::new(serde_json::to_value(meta).expect("sample meta serialises"));
    c.push("user_audio", s.user_audio.data().clone());
    c.push("user_visual", s.user_visual.data().clone());
    c.push("face_token_mask", bool_tensor(s.user_visual.face_token_mask()));
    c.push("avatar_audio", s.avatar_audio.data().clone());
    c.push("ref_latent", s.ref_latent.clone());
    c.push("prev_frames", s.prev_frames.data().clone());
    c.push("gt_latent", s.gt_latent.data().clone());
    c.push("gt_motion", s.gt_motion.data().clone());
    c.push("avatar_speaking", bool_tensor(&s.avatar_speaking));
    c.push("user_motion", s.user_motion.data().clone());
    c
}

pub fn sample_from_container(c: &Container) -> Result<(ConversationSample, Option<CodecSpec>)> {
    let m: SampleMetaJson = serde_json::from_value(c.meta.clone()).map_err(|e| CliError::Format(format!("sample metadata: {e}")))?;
    if m.kind != "sample" {
        return Err(CliError::Format(format!("expected a sample file, found `{}`", m.kind)));
    }
    let turns = m
        .dialogue
        .iter()
        .map(|(s, t)| Ok(Turn { speaker: Speaker::parse(s)?, text: t.clone() }))
        .collect::<echo_core::Result<Vec<_>>>()?;
    let s = ConversationSample {
        user_audio: AudioFeatureSeq::new(c.get("user_audio")?.clone())?,
        user_visual: VisualTokenSeq::new(c.get("user_visual")?.clone(), bools(c.get("face_token_mask")?))?,
        avatar_audio: AudioFeatureSeq::new(c.get("avatar_audio")?.clone())?,
        dialogue: DialogueHistory::new(turns)?,
        ref_latent: c.get("ref_latent")?.clone(),
        prev_frames: SpatialLatent::new(c.get("prev_frames")?.clone())?,
        gt_latent: SpatialLatent::new(c.get("gt_latent")?.clone())?,
        gt_motion: MotionSeq::new(c.get("gt_motion")?.clone())?,
        avatar_speaking: bools(c.get("avatar_speaking")?),
        emotion_label: m.emotion_label,
        user_motion: MotionSeq::new(c.get("user_motion")?.clone())?,
        mask_layout: MaskLayout { face: rect_from(&m.face)?, lip: rect_from(&m.lip)? },
        meta: SampleMeta { conversation_id: m.conversation_id, window_index: m.window_index, seed: m.seed },
    };
    s.validate()?;
    Ok((s, m.codec))
}

pub fn write_sample(path: &Path, s: &ConversationSample, codec: Option<CodecSpec>) -> Result<()> {
    sample_container(s, codec).write(path, Dtype::F32)
}

pub fn read_sample(path: &Path) -> Result<(ConversationSample, Option<CodecSpec>)> {
    sample_from_container(&Container::read(path)?)
}

/// A motion file: `motion` (`T x 56`) plus optional `energy` and `speaking`
/// per-frame arrays.
pub fn write_motion(path: &Path, m: &MotionSeq, lip: Option<(&[f64], &[bool])>) -> Result<()> {
    let mut c = Container::new(serde_json::json!({ "kind": "motion" }));
    c.push("motion", m.data().clone());
    if let Some((e, s)) = lip {
        c.push("energy", Tensor::new(&[e.len()], e.to_vec())?);
        c.push("speaking", bool_tensor(s));
    }
    c.write(path, Dtype::F64)
}

pub fn read_motion(path: &Path) -> Result<(MotionSeq, Option<(Vec<f64>, Vec<bool>)>)> {
    let c = Container::read(path)?;
    let m = MotionSeq::new(c.get("motion")?.clone())?;
    let lip = if c.has("energy") && c.has("speaking") {
        Some((c.get("energy")?.data().to_vec(), bools(c.get("speaking")?)))
    } else {
        None
    };
    Ok((m, lip))
}

/// Copies every named tensor of `c` into `p`, requiring an exact name and
/// shape match in both directions.
pub fn load_parameters<P: Parameters + ?Sized>(p: &mut P, c: &Container, prefix: &str) -> Result<()> {
    let mut expected = 0;
    let mut err = None;
    p.visit_mut(prefix, &mut |name, t| {
        expected += 1;
        match c.arrays.iter().find(|(n, _)| n == name) {
            Some((_, src)) if src.shape() == t.shape() => t.data_mut().copy_from_slice(src.data()),
            Some((_, src)) => {
                err.get_or_insert_with(|| format!("`{name}` has shape {:?}, expected {:?}", src.shape(), t.shape()));
            }
            None => {
                err.get_or_insert_with(|| format!("missing parameter `{name}`"));
            }
        }
    });
    if let Some(e) = err {
        return Err(CliError::Format(e));
    }
    let present = c.arrays.iter().filter(|(n, _)| prefix.is_empty() || n.starts_with(&format!("{prefix}."))).count();
    if present != expected {
        return Err(CliError::Format(format!("{present} stored `{prefix}` tensors, model has {expected}")));
    }
    Ok(())
}

pub fn push_parameters<P: Parameters + ?Sized>(c: &mut Container, p: &P, prefix: &str) {
    p.visit(prefix, &mut |name, t| c.push(name, t.clone()));
}

/// Reads a manifest: one path per line (relative to the manifest's
/// directory), blank lines and `#` comments ignored.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect())
}
