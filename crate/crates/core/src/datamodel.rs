//! Domain types shared by every stage: framed audio/visual features, the
//! avatar latent grid and its region masks, facial motion sequences, and the
//! fixed linear codec between motion coefficients and latents.
//!
//! Arrays are held as 64-bit [`Tensor`]s in memory. The on-disk sample format
//! stores 32-bit floats, so synthesised samples are quantised to `f32`
//! precision at creation and round-trip bit-exactly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{shape_err, Error, Result};
use crate::rng::{normal, seeded};
use crate::tensor::Tensor;

/// Frames per second of every framed sequence.
pub const FPS: f64 = 25.0;
/// Expression coefficients per motion frame.
pub const EXPR_DIMS: usize = 50;
/// Head pose coefficients per motion frame.
pub const POSE_DIMS: usize = 6;
/// Total motion coefficients per frame.
pub const MOTION_DIMS: usize = EXPR_DIMS + POSE_DIMS;
/// Leading expression coefficients that drive the mouth; dim 0 is jaw opening.
pub const LIP_DIMS: usize = 4;

/// Which slice of a motion frame a metric looks at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionSplit {
    Expression,
    Pose,
    All,
}

impl MotionSplit {
    pub fn range(self) -> core::ops::Range<usize> {
        match self {
            MotionSplit::Expression => 0..EXPR_DIMS,
            MotionSplit::Pose => EXPR_DIMS..MOTION_DIMS,
            MotionSplit::All => 0..MOTION_DIMS,
        }
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(String::from(what)))
    }
}

/// Per-frame audio features with a centred context window: `T x L_w x D_a`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatureSeq {
    data: Tensor,
}

impl AudioFeatureSeq {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(shape_err("AudioFeatureSeq", format!("expected rank 3, got {:?}", data.shape())));
        }
        let (t, w, d) = (data.dim(0), data.dim(1), data.dim(2));
        if t == 0 || d == 0 {
            return Err(Error::Invalid(format!("audio features need T >= 1 and D >= 1, got {t}x{w}x{d}")));
        }
        if w == 0 || w % 2 == 0 {
            return Err(Error::Invalid(format!("context window must be odd, got {w}")));
        }
        check_finite(&data, "audio features")?;
        Ok(Self { data })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn frames(&self) -> usize {
        self.data.dim(0)
    }

    pub fn window(&self) -> usize {
        self.data.dim(1)
    }

    pub fn dim(&self) -> usize {
        self.data.dim(2)
    }

    pub fn fps(&self) -> f64 {
        FPS
    }

    /// Frames `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self { data: self.data.slice_outer(start, len)? })
    }

    /// The `T x (L_w * D_a)` view, one flattened window per row.
    pub fn flat_windows(&self) -> Tensor {
        let (t, w, d) = (self.frames(), self.window(), self.dim());
        self.data.clone().reshape(&[t, w * d]).expect("flatten windows")
    }

    /// Root mean square of each frame's full window.
    pub fn window_rms(&self) -> Vec<f64> {
        let c = self.window() * self.dim();
        (0..self.frames())
            .map(|i| {
                let row = &self.data.data()[i * c..(i + 1) * c];
                crate::math::sqrt(row.iter().map(|x| x * x).sum::<f64>() / c as f64)
            })
            .collect()
    }

    /// Root mean square of each frame's own (centre-slot) features.
    pub fn center_rms(&self) -> Vec<f64> {
        let (w, d) = (self.window(), self.dim());
        let mid = w / 2;
        (0..self.frames())
            .map(|i| {
                let row = &self.data.data()[(i * w + mid) * d..(i * w + mid + 1) * d];
                crate::math::sqrt(row.iter().map(|x| x * x).sum::<f64>() / d as f64)
            })
            .collect()
    }
}

/// Per-frame visual tokens on a square token grid, `T x N_tok x D_v`, with a
/// token-level facial mask.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualTokenSeq {
    data: Tensor,
    face_token_mask: Vec<bool>,
}

impl VisualTokenSeq {
    pub fn new(data: Tensor, face_token_mask: Vec<bool>) -> Result<Self> {
        if data.rank() != 3 {
            return Err(shape_err("VisualTokenSeq", format!("expected rank 3, got {:?}", data.shape())));
        }
        let n = data.dim(1);
        let side = libm::sqrt(n as f64) as usize;
        if n == 0 || side * side != n {
            return Err(Error::Invalid(format!("token count {n} is not a perfect square")));
        }
        if face_token_mask.len() != n {
            return Err(shape_err("VisualTokenSeq", format!("mask length {} vs {n} tokens", face_token_mask.len())));
        }
        if !face_token_mask.iter().any(|&m| m) {
            return Err(Error::Invalid(String::from("face token mask selects no token")));
        }
        check_finite(&data, "visual tokens")?;
        Ok(Self { data, face_token_mask })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn face_token_mask(&self) -> &[bool] {
        &self.face_token_mask
    }

    pub fn frames(&self) -> usize {
        self.data.dim(0)
    }

    pub fn tokens(&self) -> usize {
        self.data.dim(1)
    }

    pub fn dim(&self) -> usize {
        self.data.dim(2)
    }

    pub fn face_tokens(&self) -> usize {
        self.face_token_mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Speaker {
    User,
    Avatar,
}

impl Speaker {
    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::User => "user",
            Speaker::Avatar => "avatar",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "user" => Ok(Speaker::User),
            "avatar" => Ok(Speaker::Avatar),
            other => Err(Error::Invalid(format!("unknown speaker `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

/// Ordered multi-turn dialogue history.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueHistory {
    turns: Vec<Turn>,
}

impl DialogueHistory {
    pub fn new(turns: Vec<Turn>) -> Result<Self> {
        if turns.is_empty() {
            return Err(Error::Invalid(String::from("dialogue history is empty")));
        }
        if let Some(i) = turns.iter().position(|t| t.text.trim().is_empty()) {
            return Err(Error::Invalid(format!("dialogue turn {i} has no text")));
        }
        Ok(Self { turns })
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }
}

/// Avatar latent clip `T x C x H' x W'`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialLatent {
    data: Tensor,
}

impl SpatialLatent {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 4 {
            return Err(shape_err("SpatialLatent", format!("expected rank 4, got {:?}", data.shape())));
        }
        if data.dim(1) == 0 || data.dim(2) < 4 || data.dim(3) < 4 {
            return Err(Error::Invalid(format!("latent needs C >= 1 and H', W' >= 4, got {:?}", data.shape())));
        }
        check_finite(&data, "latent")?;
        Ok(Self { data })
    }

    /// A latent with zero frames, used for an empty previous-frame prefix.
    pub fn empty(channels: usize, height: usize, width: usize) -> Self {
        Self { data: Tensor::zeros(&[0, channels, height, width]) }
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn frames(&self) -> usize {
        self.data.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.data.dim(1)
    }

    pub fn height(&self) -> usize {
        self.data.dim(2)
    }

    pub fn width(&self) -> usize {
        self.data.dim(3)
    }

    pub fn cells(&self) -> usize {
        self.height() * self.width()
    }

    /// Token layout used by the generator: `(T * H' * W') x C`, rows ordered
    /// frame-major then row-major over cells.
    pub fn to_tokens(&self) -> Tensor {
        latent_to_tokens(&self.data)
    }

    pub fn from_tokens(tokens: &Tensor, frames: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        if tokens.shape() != [frames * height * width, channels] {
            return Err(shape_err(
                "SpatialLatent::from_tokens",
                format!("tokens {:?} vs {frames}x{channels}x{height}x{width}", tokens.shape()),
            ));
        }
        let cells = height * width;
        let mut data = Tensor::zeros(&[frames, channels, height, width]);
        for f in 0..frames {
            for cell in 0..cells {
                for c in 0..channels {
                    data.data_mut()[(f * channels + c) * cells + cell] = tokens.data()[(f * cells + cell) * channels + c];
                }
            }
        }
        if frames == 0 {
            return Ok(Self { data });
        }
        Self::new(data)
    }

    /// Frames `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self { data: self.data.slice_outer(start, len)? })
    }
}

/// `[T, C, H, W]` (or `[C, H, W]` for a single frame) to `(T*H*W) x C` tokens.
pub fn latent_to_tokens(data: &Tensor) -> Tensor {
    let (frames, channels, h, w) = match data.rank() {
        3 => (1, data.dim(0), data.dim(1), data.dim(2)),
        4 => (data.dim(0), data.dim(1), data.dim(2), data.dim(3)),
        r => panic!("latent_to_tokens: rank {r}"),
    };
    let cells = h * w;
    let mut out = Tensor::zeros(&[frames * cells, channels]);
    for f in 0..frames {
        for c in 0..channels {
            for cell in 0..cells {
                out.data_mut()[(f * cells + cell) * channels + c] = data.data()[(f * channels + c) * cells + cell];
            }
        }
    }
    out
}

/// Inclusive cell rectangle on the latent grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl Rect {
    pub fn new(row0: usize, row1: usize, col0: usize, col1: usize) -> Self {
        Self { row0, row1, col0, col1 }
    }

    fn contains(&self, r: usize, c: usize) -> bool {
        (self.row0..=self.row1).contains(&r) && (self.col0..=self.col1).contains(&c)
    }

    fn within(&self, other: &Rect) -> bool {
        self.row0 >= other.row0 && self.row1 <= other.row1 && self.col0 >= other.col0 && self.col1 <= other.col1
    }

    fn is_empty(&self) -> bool {
        self.row1 < self.row0 || self.col1 < self.col0
    }
}

/// Face and lip rectangles on the latent grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskLayout {
    pub face: Rect,
    pub lip: Rect,
}

impl MaskLayout {
    /// Layout for the default 8x8 grid: face rows/cols 1-6, lips rows 4-5, cols 3-4.
    pub fn default_8x8() -> Self {
        Self { face: Rect::new(1, 6, 1, 6), lip: Rect::new(4, 5, 3, 4) }
    }
}

/// Disjoint binary lip and (non-lip) face masks over `H' x W'` cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMasks {
    height: usize,
    width: usize,
    lip: Vec<bool>,
    face: Vec<bool>,
}

impl RegionMasks {
    /// Masks from explicit cell vectors, checking disjointness and coverage.
    pub fn from_cells(height: usize, width: usize, lip: Vec<bool>, face: Vec<bool>) -> Result<Self> {
        if lip.len() != height * width || face.len() != height * width {
            return Err(shape_err("RegionMasks", format!("masks must have {} cells", height * width)));
        }
        if lip.iter().zip(&face).any(|(&l, &f)| l && f) {
            return Err(Error::Invalid(String::from("lip and face masks overlap")));
        }
        if !lip.iter().any(|&x| x) || !face.iter().any(|&x| x) {
            return Err(Error::Invalid(String::from("lip and face masks must each select a cell")));
        }
        Ok(Self { height, width, lip, face })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn lip(&self) -> &[bool] {
        &self.lip
    }

    pub fn face(&self) -> &[bool] {
        &self.face
    }

    pub fn lip_count(&self) -> usize {
        self.lip.iter().filter(|&&x| x).count()
    }

    pub fn face_count(&self) -> usize {
        self.face.iter().filter(|&&x| x).count()
    }

    /// Cells outside both masks.
    pub fn background(&self) -> Vec<bool> {
        self.lip.iter().zip(&self.face).map(|(&l, &f)| !l && !f).collect()
    }
}

/// Builds disjoint lip/face masks; lip cells are removed from the face mask.
pub fn build_region_masks(height: usize, width: usize, layout: &MaskLayout) -> Result<RegionMasks> {
    if height < 4 || width < 4 {
        return Err(Error::Config(format!("latent grid must be at least 4x4, got {height}x{width}")));
    }
    let MaskLayout { face, lip } = *layout;
    if face.is_empty() || lip.is_empty() {
        return Err(Error::Config(String::from("face and lip rectangles must be non-empty")));
    }
    if face.row1 >= height || face.col1 >= width {
        return Err(Error::Config(format!("face rectangle {face:?} out of a {height}x{width} grid")));
    }
    if !lip.within(&face) || lip == face {
        return Err(Error::Config(format!("lip rectangle {lip:?} must lie strictly inside face {face:?}")));
    }
    let mut lip_m = vec![false; height * width];
    let mut face_m = vec![false; height * width];
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            if lip.contains(r, c) {
                lip_m[i] = true;
            } else if face.contains(r, c) {
                face_m[i] = true;
            }
        }
    }
    RegionMasks::from_cells(height, width, lip_m, face_m)
}

/// `T x 56` facial motion: 50 expression then 6 pose coefficients per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSeq {
    data: Tensor,
}

impl MotionSeq {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 2 || data.dim(1) != MOTION_DIMS {
            return Err(shape_err("MotionSeq", format!("expected T x {MOTION_DIMS}, got {:?}", data.shape())));
        }
        if data.dim(0) < 2 {
            return Err(Error::Invalid(format!("motion needs at least 2 frames, got {}", data.dim(0))));
        }
        check_finite(&data, "motion")?;
        Ok(Self { data })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn frames(&self) -> usize {
        self.data.dim(0)
    }

    /// Time series of coefficient `dim`.
    pub fn channel(&self, dim: usize) -> Vec<f64> {
        (0..self.frames()).map(|t| self.data.data()[t * MOTION_DIMS + dim]).collect()
    }

    /// Frames `start..start + len` (at least two).
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        Self::new(self.data.slice_outer(start, len)?)
    }

    /// Frames selected by index, in the given order.
    pub fn select(&self, frames: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(frames.len() * MOTION_DIMS);
        for &f in frames {
            data.extend_from_slice(self.data.row(f));
        }
        Self::new(Tensor::new(&[frames.len(), MOTION_DIMS], data)?)
    }
}

/// Identifying metadata of a sample within its conversation.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct SampleMeta {
    pub conversation_id: u64,
    pub window_index: usize,
    pub seed: u64,
}

/// One dyadic clip: the user's long-range behaviour, the avatar's current
/// window and everything the generator conditions on or is scored against.
#[derive(Clone, Debug, PartialEq)]
pub struct ConversationSample {
    pub user_audio: AudioFeatureSeq,
    pub user_visual: VisualTokenSeq,
    pub avatar_audio: AudioFeatureSeq,
    pub dialogue: DialogueHistory,
    /// Reference latent `C x H' x W'`.
    pub ref_latent: Tensor,
    pub prev_frames: SpatialLatent,
    pub gt_latent: SpatialLatent,
    pub gt_motion: MotionSeq,
    pub avatar_speaking: Vec<bool>,
    pub emotion_label: Option<String>,
    /// User motion over the whole history `1..T`.
    pub user_motion: MotionSeq,
    pub mask_layout: MaskLayout,
    pub meta: SampleMeta,
}

impl ConversationSample {
    /// History length `T`.
    pub fn history_len(&self) -> usize {
        self.user_audio.frames()
    }

    /// Current window length `T_cur`.
    pub fn current_len(&self) -> usize {
        self.gt_latent.frames()
    }

    pub fn prev_len(&self) -> usize {
        self.prev_frames.frames()
    }

    /// Checks mutual consistency of every temporal length and latent shape.
    pub fn validate(&self) -> Result<()> {
        let t = self.history_len();
        let t_cur = self.current_len();
        let bad = |what: String| Err(Error::Invalid(what));
        if t_cur > t {
            return bad(format!("T_cur = {t_cur} exceeds T = {t}"));
        }
        if self.user_visual.frames() != t {
            return bad(format!("user visual has {} frames, audio {t}", self.user_visual.frames()));
        }
        if self.user_motion.frames() != t {
            return bad(format!("user motion has {} frames, history {t}", self.user_motion.frames()));
        }
        if self.avatar_audio.frames() != t_cur {
            return bad(format!("avatar audio has {} frames, window {t_cur}", self.avatar_audio.frames()));
        }
        if self.gt_motion.frames() != t_cur {
            return bad(format!("gt motion has {} frames, window {t_cur}", self.gt_motion.frames()));
        }
        if self.avatar_speaking.len() != t_cur {
            return bad(format!("speaking flags have {} entries, window {t_cur}", self.avatar_speaking.len()));
        }
        if self.user_audio.window() != self.avatar_audio.window() || self.user_audio.dim() != self.avatar_audio.dim() {
            return bad(String::from("user and avatar audio feature layouts differ"));
        }
        let (c, h, w) = (self.gt_latent.channels(), self.gt_latent.height(), self.gt_latent.width());
        if self.ref_latent.shape() != [c, h, w] {
            return bad(format!("reference latent {:?} vs {c}x{h}x{w}", self.ref_latent.shape()));
        }
        if self.prev_frames.data().shape()[1..] != [c, h, w] {
            return bad(format!("previous frames {:?} vs {c}x{h}x{w}", self.prev_frames.data().shape()));
        }
        if self.prev_len() > t - t_cur {
            return bad(format!("{} previous frames precede a window starting at {}", self.prev_len(), t - t_cur));
        }
        build_region_masks(h, w, &self.mask_layout)?;
        Ok(())
    }

    pub fn masks(&self) -> Result<RegionMasks> {
        build_region_masks(self.gt_latent.height(), self.gt_latent.width(), &self.mask_layout)
    }
}

/// Fixed linear map between 56-d motion and the flattened `C*H'*W'` latent
/// (index `c * H' * W' + row * W' + col`).
///
/// Lip coefficients are supported only on lip cells, the remaining
/// expression coefficients only on face cells and pose only on background
/// cells. Columns are orthogonal with norm `gain`; `decode` is the
/// pseudo-inverse of `encode`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionLatentCodec {
    channels: usize,
    height: usize,
    width: usize,
    encode: Tensor,
    decode: Tensor,
}

impl MotionLatentCodec {
    pub fn new(masks: &RegionMasks, channels: usize, gain: f64, seed: u64) -> Result<Self> {
        let (h, w) = (masks.height(), masks.width());
        let cells = h * w;
        let latent = channels * cells;
        let lip_idx = support(masks.lip(), channels, cells);
        let face_idx = support(masks.face(), channels, cells);
        let bg_idx = support(&masks.background(), channels, cells);
        let groups = [
            (0..LIP_DIMS, &lip_idx, "lip"),
            (LIP_DIMS..EXPR_DIMS, &face_idx, "face"),
            (EXPR_DIMS..MOTION_DIMS, &bg_idx, "background"),
        ];
        let mut rng = seeded(seed);
        let mut enc = DMatrix::<f64>::zeros(latent, MOTION_DIMS);
        for (dims, idx, name) in groups {
            if idx.len() < dims.len() {
                return Err(Error::Config(format!(
                    "{name} region has {} latent entries for {} motion dims",
                    idx.len(),
                    dims.len()
                )));
            }
            let mut basis: Vec<Vec<f64>> = Vec::new();
            for d in dims {
                // Gram-Schmidt within the region support.
                loop {
                    let mut v: Vec<f64> = idx.iter().map(|_| normal(&mut rng)).collect();
                    for b in &basis {
                        let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                        for (x, y) in v.iter_mut().zip(b) {
                            *x -= dot * y;
                        }
                    }
                    let norm = crate::math::sqrt(v.iter().map(|x| x * x).sum::<f64>());
                    if norm > 1e-6 {
                        v.iter_mut().for_each(|x| *x /= norm);
                        for (&row, &x) in idx.iter().zip(&v) {
                            enc[(row, d)] = gain * x;
                        }
                        basis.push(v);
                        break;
                    }
                }
            }
        }
        let dec = enc.clone().pseudo_inverse(1e-12).map_err(|e| Error::Config(String::from(e)))?;
        let encode = Tensor::new(&[latent, MOTION_DIMS], row_major(&enc))?;
        let decode = Tensor::new(&[MOTION_DIMS, latent], row_major(&dec))?;
        Ok(Self { channels, height: h, width: w, encode, decode })
    }

    pub fn latent_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `C*H'*W' x 56` encode matrix.
    pub fn encode_matrix(&self) -> &Tensor {
        &self.encode
    }

    /// `56 x C*H'*W'` decode matrix.
    pub fn decode_matrix(&self) -> &Tensor {
        &self.decode
    }

    /// Decode matrix with columns permuted to token order
    /// (`cell * C + channel`), i.e. `56 x (H'*W'*C)`.
    pub fn decode_matrix_tokens(&self) -> Tensor {
        let cells = self.height * self.width;
        let l = self.latent_len();
        let mut out = Tensor::zeros(&[MOTION_DIMS, l]);
        for d in 0..MOTION_DIMS {
            for c in 0..self.channels {
                for cell in 0..cells {
                    out.data_mut()[d * l + cell * self.channels + c] = self.decode.data()[d * l + c * cells + cell];
                }
            }
        }
        out
    }

    /// Latent vector of one motion frame.
    pub fn encode_frame(&self, m: &[f64]) -> Vec<f64> {
        let l = self.latent_len();
        (0..l).map(|i| self.encode.row(i).iter().zip(m).map(|(a, b)| a * b).sum()).collect()
    }

    /// Motion frame of one latent vector.
    pub fn decode_frame(&self, z: &[f64]) -> Vec<f64> {
        (0..MOTION_DIMS).map(|d| self.decode.row(d).iter().zip(z).map(|(a, b)| a * b).sum()).collect()
    }
}

fn support(cells_mask: &[bool], channels: usize, cells: usize) -> Vec<usize> {
    let mut idx = Vec::new();
    for c in 0..channels {
        for (cell, &on) in cells_mask.iter().enumerate() {
            if on {
                idx.push(c * cells + cell);
            }
        }
    }
    idx
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

/// Per-frame linear encoding of motion into the latent grid.
pub fn encode_motion(m: &MotionSeq, codec: &MotionLatentCodec) -> Result<SpatialLatent> {
    let (c, h, w) = (codec.channels, codec.height, codec.width);
    let mut data = Vec::with_capacity(m.frames() * codec.latent_len());
    for t in 0..m.frames() {
        data.extend(codec.encode_frame(m.data().row(t)));
    }
    SpatialLatent::new(Tensor::new(&[m.frames(), c, h, w], data)?)
}

/// Per-frame decoding of a latent clip back to motion.
pub fn decode_latent(z: &SpatialLatent, codec: &MotionLatentCodec) -> Result<MotionSeq> {
    if z.data().shape()[1..] != [codec.channels, codec.height, codec.width] {
        return Err(shape_err(
            "decode_latent",
            format!("latent {:?} vs codec {}x{}x{}", z.data().shape(), codec.channels, codec.height, codec.width),
        ));
    }
    let l = codec.latent_len();
    let mut data = Vec::with_capacity(z.frames() * MOTION_DIMS);
    for t in 0..z.frames() {
        data.extend(codec.decode_frame(&z.data().data()[t * l..(t + 1) * l]));
    }
    MotionSeq::new(Tensor::new(&[z.frames(), MOTION_DIMS], data)?)
}

/// Rounds every element to the nearest `f32`.
pub fn quantize_f32(t: &Tensor) -> Tensor {
    t.map(|x| x as f32 as f64)
}

/// Face-token gather `T x N_tok x D_v -> T x N_f x D_v`, keeping frame and token order.
pub fn mask_face_tokens(v: &VisualTokenSeq) -> Result<Tensor> {
    let idx: Vec<usize> = v.face_token_mask().iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if idx.is_empty() {
        return Err(Error::Invalid(String::from("face token mask is empty")));
    }
    let (t, n, d) = (v.frames(), v.tokens(), v.dim());
    let mut data = Vec::with_capacity(t * idx.len() * d);
    for f in 0..t {
        for &j in &idx {
            data.extend_from_slice(&v.data().data()[(f * n + j) * d..(f * n + j + 1) * d]);
        }
    }
    Tensor::new(&[t, idx.len(), d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_layout_counts() {
        let m = build_region_masks(8, 8, &MaskLayout::default_8x8()).unwrap();
        assert_eq!(m.lip_count(), 4);
        assert_eq!(m.face_count(), 32);
        assert_eq!(m.lip().iter().zip(m.face()).filter(|(&a, &b)| a && b).count(), 0);
    }

    #[test]
    fn invalid_layouts_are_rejected() {
        let empty_lip = MaskLayout { face: Rect::new(1, 6, 1, 6), lip: Rect::new(4, 3, 3, 4) };
        assert!(matches!(build_region_masks(8, 8, &empty_lip), Err(Error::Config(_))));
        let outside = MaskLayout { face: Rect::new(1, 6, 1, 6), lip: Rect::new(6, 7, 3, 4) };
        assert!(build_region_masks(8, 8, &outside).is_err());
        let oob = MaskLayout { face: Rect::new(1, 8, 1, 6), lip: Rect::new(4, 5, 3, 4) };
        assert!(build_region_masks(8, 8, &oob).is_err());
        assert!(build_region_masks(3, 8, &MaskLayout::default_8x8()).is_err());
    }

    proptest! {
        #[test]
        fn masks_are_disjoint_for_valid_layouts(
            h in 4usize..12, w in 4usize..12,
            a in 0usize..100, b in 0usize..100, c in 0usize..100, d in 0usize..100,
            e in 0usize..100, f in 0usize..100, g in 0usize..100, k in 0usize..100,
        ) {
            let fr0 = a % h; let fr1 = fr0 + b % (h - fr0);
            let fc0 = c % w; let fc1 = fc0 + d % (w - fc0);
            let lr0 = fr0 + e % (fr1 - fr0 + 1); let lr1 = lr0 + f % (fr1 - lr0 + 1);
            let lc0 = fc0 + g % (fc1 - fc0 + 1); let lc1 = lc0 + k % (fc1 - lc0 + 1);
            let layout = MaskLayout { face: Rect::new(fr0, fr1, fc0, fc1), lip: Rect::new(lr0, lr1, lc0, lc1) };
            if let Ok(m) = build_region_masks(h, w, &layout) {
                prop_assert!(m.lip().iter().zip(m.face()).all(|(&x, &y)| !(x && y)));
                let face_area = (fr1 - fr0 + 1) * (fc1 - fc0 + 1);
                prop_assert_eq!(m.lip_count() + m.face_count(), face_area);
            } else {
                prop_assert!(layout.lip == layout.face);
            }
        }
    }

    fn codec() -> (RegionMasks, MotionLatentCodec) {
        let m = build_region_masks(8, 8, &MaskLayout::default_8x8()).unwrap();
        let c = MotionLatentCodec::new(&m, 4, 3.0, 11).unwrap();
        (m, c)
    }

    #[test]
    fn zero_motion_encodes_to_zero() {
        let (_, c) = codec();
        let z = encode_motion(&MotionSeq::new(Tensor::zeros(&[3, MOTION_DIMS])).unwrap(), &c).unwrap();
        assert!(z.data().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lip_motion_stays_inside_lip_cells() {
        let (m, c) = codec();
        let mut motion = Tensor::zeros(&[2, MOTION_DIMS]);
        for t in 0..2 {
            for d in 0..LIP_DIMS {
                motion.set(&[t, d], 0.3 * (d as f64 + 1.0) - t as f64);
            }
        }
        let z = encode_motion(&MotionSeq::new(motion).unwrap(), &c).unwrap();
        let cells = m.cells();
        for t in 0..2 {
            for ch in 0..4 {
                for cell in 0..cells {
                    let v = z.data().data()[(t * 4 + ch) * cells + cell];
                    if !m.lip()[cell] {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn codec_round_trip_on_random_motion() {
        let (_, c) = codec();
        let mut rng = seeded(5);
        for _ in 0..1000 {
            let m = MotionSeq::new(Tensor::randn(&[2, MOTION_DIMS], 2.0, &mut rng)).unwrap();
            let back = decode_latent(&encode_motion(&m, &c).unwrap(), &c).unwrap();
            for (a, b) in m.data().data().iter().zip(back.data().data()) {
                assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn token_layout_round_trip() {
        let mut rng = seeded(6);
        let z = SpatialLatent::new(Tensor::randn(&[3, 4, 4, 5], 1.0, &mut rng)).unwrap();
        let tok = z.to_tokens();
        assert_eq!(tok.shape(), [60, 4]);
        assert_eq!(tok.at(&[20 + 7, 2]), z.data().at(&[1, 2, 1, 2]));
        let back = SpatialLatent::from_tokens(&tok, 3, 4, 4, 5).unwrap();
        assert_eq!(back, z);
    }

    #[test]
    fn token_decode_matrix_matches_latent_decode() {
        let (_, c) = codec();
        let mut rng = seeded(7);
        let z = SpatialLatent::new(Tensor::randn(&[1, 4, 8, 8], 1.0, &mut rng)).unwrap();
        let direct = c.decode_frame(z.data().data());
        let tok = z.to_tokens();
        let dt = c.decode_matrix_tokens();
        for (d, &want) in direct.iter().enumerate() {
            let got: f64 = dt.row(d).iter().zip(tok.data()).map(|(a, b)| a * b).sum();
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn face_token_gather_matches_index_list() {
        let mut rng = seeded(8);
        let data = Tensor::randn(&[3, 9, 2], 1.0, &mut rng);
        let mask: Vec<bool> = (0..9).map(|i| i % 3 != 1).collect();
        let v = VisualTokenSeq::new(data.clone(), mask.clone()).unwrap();
        let out = mask_face_tokens(&v).unwrap();
        let idx: Vec<usize> = (0..9).filter(|i| mask[*i]).collect();
        assert_eq!(out.shape(), [3, idx.len(), 2]);
        for t in 0..3 {
            for (k, &j) in idx.iter().enumerate() {
                for d in 0..2 {
                    assert_eq!(out.at(&[t, k, d]), data.at(&[t, j, d]));
                }
            }
        }
        let all = VisualTokenSeq::new(data.clone(), vec![true; 9]).unwrap();
        assert_eq!(mask_face_tokens(&all).unwrap(), data);
        let one = VisualTokenSeq::new(data.clone(), (0..9).map(|i| i == 4).collect()).unwrap();
        let o = mask_face_tokens(&one).unwrap();
        assert_eq!(o.shape(), [3, 1, 2]);
        assert_eq!(o.at(&[2, 0, 1]), data.at(&[2, 4, 1]));
        assert!(VisualTokenSeq::new(data, vec![false; 9]).is_err());
    }

    #[test]
    fn type_invariants() {
        assert!(AudioFeatureSeq::new(Tensor::zeros(&[4, 4, 2])).is_err());
        assert!(AudioFeatureSeq::new(Tensor::zeros(&[4, 3, 2])).is_ok());
        assert!(AudioFeatureSeq::new(Tensor::filled(&[1, 1, 1], f64::NAN)).is_err());
        assert!(VisualTokenSeq::new(Tensor::zeros(&[2, 8, 2]), vec![true; 8]).is_err());
        assert!(MotionSeq::new(Tensor::zeros(&[1, MOTION_DIMS])).is_err());
        assert!(SpatialLatent::new(Tensor::zeros(&[1, 4, 3, 8])).is_err());
        assert!(DialogueHistory::new(vec![]).is_err());
        assert!(DialogueHistory::new(vec![Turn { speaker: Speaker::User, text: "  ".into() }]).is_err());
    }
}
