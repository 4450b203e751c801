//! Procedural dyadic conversations with a known coupling law.
//!
//! Two speakers take half-duplex turns. Each speaker's audio is a bump
//! envelope times a fixed timbre vector. The avatar's lip coefficients
//! follow its own audio envelope, its remaining expression mirrors the
//! user's expression with a lag plus a per-emotion offset, and the user's
//! face is observed through a fixed linear "camera" into visual tokens.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::datamodel::{
    build_region_masks, encode_motion, AudioFeatureSeq, ConversationSample, DialogueHistory, MaskLayout,
    MotionLatentCodec, MotionSeq, RegionMasks, SampleMeta, Speaker, Turn, VisualTokenSeq, EXPR_DIMS, LIP_DIMS,
    MOTION_DIMS, POSE_DIMS,
};
use crate::error::{Error, Result};
use crate::lcu::EMOTIONS;
use crate::math;
use crate::rng::{derive_seed, normal, seeded, SeededRng};
use crate::tensor::Tensor;

/// Non-lip expression dims, where mirroring and emotion offsets live.
pub const MIRROR_DIMS: core::ops::Range<usize> = LIP_DIMS..EXPR_DIMS;
const MIRROR: usize = EXPR_DIMS - LIP_DIMS;

/// Lip coefficient gains on the speaker's own audio envelope.
pub const LIP_GAINS: [f64; LIP_DIMS] = [1.0, 0.6, 0.4, 0.3];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub history: usize,
    pub current: usize,
    pub prev: usize,
    pub seg_min: usize,
    pub seg_max: usize,
    pub max_gap: usize,
    pub lag: usize,
    pub rho: f64,
    pub sigma_n: f64,
    pub offset_scale: f64,
    pub user_latent_dim: usize,
    /// AR(1) coefficient of the user's latent expression trajectory.
    pub user_smoothing: f64,
    pub loading_scale: f64,
    pub syllable_min: usize,
    pub syllable_max: usize,
    pub bump_width: f64,
    pub lip_noise: f64,
    pub audio_noise: f64,
    pub pose_scale: f64,
    pub audio_dim: usize,
    pub window: usize,
    pub visual_grid: usize,
    pub visual_dim: usize,
    pub visual_noise: f64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub codec_gain: f64,
    /// Seed of everything shared across conversations (codec, camera,
    /// loadings, offsets, timbres).
    pub world_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            history: 64,
            current: 16,
            prev: 4,
            seg_min: 12,
            seg_max: 32,
            max_gap: 3,
            lag: 3,
            rho: 0.7,
            sigma_n: 0.05,
            offset_scale: 0.5,
            user_latent_dim: 4,
            user_smoothing: 0.85,
            loading_scale: 2.0,
            syllable_min: 3,
            syllable_max: 7,
            bump_width: 1.2,
            lip_noise: 0.02,
            audio_noise: 0.01,
            pose_scale: 0.1,
            audio_dim: 32,
            window: 5,
            visual_grid: 4,
            visual_dim: 16,
            visual_noise: 0.02,
            channels: 4,
            height: 8,
            width: 8,
            codec_gain: 3.0,
            world_seed: 0xec40,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return fail(format!("rho must lie in (0, 1], got {}", self.rho));
        }
        if !(self.sigma_n >= 0.0) {
            return fail(format!("sigma_n must be >= 0, got {}", self.sigma_n));
        }
        if self.current < 2 || self.current + self.prev > self.history {
            return fail(format!(
                "need 2 <= current and current + prev <= history (got {}, {}, {})",
                self.current, self.prev, self.history
            ));
        }
        if self.lag + self.current > self.history {
            return fail(format!("lag {} reaches before the history", self.lag));
        }
        if self.seg_min == 0 || self.seg_min > self.seg_max || self.syllable_min == 0 || self.syllable_min > self.syllable_max {
            return fail(String::from("segment and syllable ranges must be non-empty and positive"));
        }
        if self.window % 2 == 0 || self.audio_dim == 0 || self.visual_dim == 0 || self.visual_grid < 3 {
            return fail(String::from("audio window must be odd; feature dims >= 1; visual grid >= 3"));
        }
        if self.user_latent_dim + EMOTIONS.len() > MIRROR {
            return fail(format!("{} latent dims leave no room for emotion offsets", self.user_latent_dim));
        }
        if !(self.user_smoothing.abs() < 1.0) {
            return fail(format!("user smoothing must satisfy |a| < 1, got {}", self.user_smoothing));
        }
        for (name, v) in [
            ("offset_scale", self.offset_scale),
            ("loading_scale", self.loading_scale),
            ("lip_noise", self.lip_noise),
            ("audio_noise", self.audio_noise),
            ("pose_scale", self.pose_scale),
            ("visual_noise", self.visual_noise),
            ("bump_width", self.bump_width),
            ("codec_gain", self.codec_gain),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return fail(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    pub fn mask_layout(&self) -> MaskLayout {
        MaskLayout::default_8x8()
    }
}

/// Everything shared by all conversations of one configuration.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub masks: RegionMasks,
    pub codec: MotionLatentCodec,
    /// `MIRROR x latent` loading of the user's latent trajectory.
    pub loading: Vec<Vec<f64>>,
    /// Unit-norm offset direction per emotion (over `MIRROR_DIMS`), orthogonal
    /// to each other and to the loading span.
    pub offset_dirs: Vec<Vec<f64>>,
    /// Per face token, `visual_dim x MIRROR` projection.
    pub camera: Vec<Tensor>,
    pub face_tokens: Vec<bool>,
    pub timbre_user: Vec<f64>,
    pub timbre_avatar: Vec<f64>,
}

fn gram_schmidt(vs: &mut [Vec<f64>]) {
    for i in 0..vs.len() {
        for j in 0..i {
            let d: f64 = vs[i].iter().zip(&vs[j]).map(|(a, b)| a * b).sum();
            let (head, tail) = vs.split_at_mut(i);
            for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                *a -= d * b;
            }
        }
        let n = math::sqrt(vs[i].iter().map(|a| a * a).sum::<f64>());
        vs[i].iter_mut().for_each(|a| *a /= n);
    }
}

fn unit_rms(rng: &mut SeededRng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
    let rms = math::sqrt(v.iter().map(|x| x * x).sum::<f64>() / dim as f64);
    v.into_iter().map(|x| x / rms).collect()
}

impl SynthWorld {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let masks = build_region_masks(cfg.height, cfg.width, &cfg.mask_layout())?;
        let codec = MotionLatentCodec::new(&masks, cfg.channels, cfg.codec_gain, derive_seed(cfg.world_seed, 1))?;
        let mut rng = seeded(derive_seed(cfg.world_seed, 2));
        let k = cfg.user_latent_dim;
        let mut basis: Vec<Vec<f64>> = (0..k + EMOTIONS.len()).map(|_| (0..MIRROR).map(|_| normal(&mut rng)).collect()).collect();
        gram_schmidt(&mut basis);
        let loading = (0..MIRROR).map(|d| (0..k).map(|j| cfg.loading_scale * basis[j][d]).collect()).collect();
        let offset_dirs = basis[k..].to_vec();
        let g = cfg.visual_grid;
        let face_tokens: Vec<bool> = (0..g * g)
            .map(|i| {
                let (r, c) = (i / g, i % g);
                !((r == 0 || r == g - 1) && (c == 0 || c == g - 1))
            })
            .collect();
        let std = 1.0 / math::sqrt(MIRROR as f64);
        let camera = face_tokens
            .iter()
            .filter(|&&f| f)
            .map(|_| Tensor::randn(&[cfg.visual_dim, MIRROR], std, &mut rng))
            .collect();
        let timbre_user = unit_rms(&mut rng, cfg.audio_dim);
        let timbre_avatar = unit_rms(&mut rng, cfg.audio_dim);
        Ok(Self { masks, codec, loading, offset_dirs, camera, face_tokens, timbre_user, timbre_avatar })
    }

    /// Offset added to the mirrored expression dims for `emotion`.
    pub fn offset(&self, cfg: &SynthConfig, emotion: usize) -> Vec<f64> {
        self.offset_dirs[emotion].iter().map(|x| x * cfg.offset_scale).collect()
    }
}

/// Per-frame speaker activity of a half-duplex schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnSchedule {
    pub user: Vec<bool>,
    pub avatar: Vec<bool>,
}

pub fn turn_schedule(cfg: &SynthConfig, len: usize, rng: &mut SeededRng) -> TurnSchedule {
    let mut user = vec![false; len];
    let mut avatar = vec![false; len];
    let mut who_user = rng.random::<bool>();
    let mut t = 0;
    while t < len {
        let seg = rng.random_range(cfg.seg_min..=cfg.seg_max);
        let end = (t + seg).min(len);
        let track = if who_user { &mut user } else { &mut avatar };
        track[t..end].fill(true);
        t = end + rng.random_range(0..=cfg.max_gap);
        who_user = !who_user;
    }
    TurnSchedule { user, avatar }
}

/// Sum of Gaussian bumps at syllable spacing, zero outside `active`.
pub fn bump_envelope(cfg: &SynthConfig, active: &[bool], rng: &mut SeededRng) -> Vec<f64> {
    let len = active.len();
    let mut env = vec![0.0; len];
    let mut c = rng.random_range(0..cfg.syllable_max) as f64;
    while c < len as f64 + 3.0 {
        let a = rng.random_range(0.5..1.5);
        for (t, e) in env.iter_mut().enumerate() {
            let d = (t as f64 - c) / cfg.bump_width;
            *e += a * math::exp(-0.5 * d * d);
        }
        c += rng.random_range(cfg.syllable_min..=cfg.syllable_max) as f64;
    }
    env.iter().zip(active).map(|(&e, &on)| if on { e } else { 0.0 }).collect()
}

/// `len x window x dim` audio windows, zero padded at both ends.
fn audio_windows(env: &[f64], timbre: &[f64], noise: f64, window: usize, rng: &mut SeededRng) -> Tensor {
    let len = env.len();
    let d = timbre.len();
    let frames: Vec<f64> = (0..len * d).map(|i| env[i / d] * timbre[i % d] + noise * normal(rng)).collect();
    let half = window / 2;
    let mut out = Tensor::zeros(&[len, window, d]);
    for t in 0..len {
        for s in 0..window {
            let src = t as isize + s as isize - half as isize;
            if src >= 0 && (src as usize) < len {
                let o = (t * window + s) * d;
                out.data_mut()[o..o + d].copy_from_slice(&frames[src as usize * d..(src as usize + 1) * d]);
            }
        }
    }
    out
}

fn wander(len: usize, dim: usize, scale: f64, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let a: f64 = 0.95;
    let innov = math::sqrt(1.0 - a * a);
    let mut x: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(x.iter().map(|v| v * scale).collect());
        for v in x.iter_mut() {
            *v = a * *v + innov * normal(rng);
        }
    }
    out
}

const USER_LINES: [[&str; 3]; 5] = [
    ["I am so glad we finally talked about it.", "That was a great day and I feel excited.", "Everything went wonderful at work today."],
    ["I really miss how things used to be.", "I feel lonely since my friend moved away.", "Sometimes I just want to cry about it."],
    ["I am worried about the exam next week.", "There is some trouble at home again.", "I felt such shame after the meeting."],
    ["It was an okay day with nothing special.", "I am fine, just a little tired.", "Things are calm at the moment."],
    ["I am afraid of what the doctor will say.", "Walking home at night makes me scared.", "I had a panic attack on the train."],
];

const AVATAR_LINES: [&str; 4] =
    ["Tell me more about that.", "I hear you.", "What happened next?", "How long has it been like this?"];

fn dialogue(emotion: usize, rng: &mut SeededRng) -> Result<DialogueHistory> {
    let exchanges = rng.random_range(2..=4);
    let mut turns = Vec::new();
    for _ in 0..exchanges {
        let u = USER_LINES[emotion][rng.random_range(0..3)];
        turns.push(Turn { speaker: Speaker::User, text: u.to_string() });
        let a = AVATAR_LINES[rng.random_range(0..AVATAR_LINES.len())];
        turns.push(Turn { speaker: Speaker::Avatar, text: a.to_string() });
    }
    DialogueHistory::new(turns)
}

/// Full-length tracks of one conversation before windowing.
#[derive(Clone, Debug)]
pub struct ConversationTracks {
    pub emotion: usize,
    pub turns: TurnSchedule,
    pub user_audio: Tensor,
    pub avatar_audio: Tensor,
    pub user_motion: Tensor,
    pub avatar_motion: Tensor,
    pub visual: Tensor,
    pub base_pose: Vec<f64>,
    pub dialogue: DialogueHistory,
}

/// Simulates `len` frames of one conversation.
pub fn simulate(cfg: &SynthConfig, world: &SynthWorld, len: usize, seed: u64) -> Result<ConversationTracks> {
    let mut rng = seeded(seed);
    let emotion = rng.random_range(0..EMOTIONS.len());
    let turns = turn_schedule(cfg, len, &mut rng);
    let env_u = bump_envelope(cfg, &turns.user, &mut rng);
    let env_a = bump_envelope(cfg, &turns.avatar, &mut rng);
    let user_audio = audio_windows(&env_u, &world.timbre_user, cfg.audio_noise, cfg.window, &mut rng);
    let avatar_audio = audio_windows(&env_a, &world.timbre_avatar, cfg.audio_noise, cfg.window, &mut rng);

    let offset = world.offset(cfg, emotion);
    let k = cfg.user_latent_dim;
    let a = cfg.user_smoothing;
    let innov = math::sqrt(1.0 - a * a);
    let lag = cfg.lag;
    let mut z: Vec<f64> = (0..k).map(|_| normal(&mut rng)).collect();
    // User mirrored dims for frames -lag..len.
    let mut user_mirror = Vec::with_capacity(len + lag);
    for _ in 0..len + lag {
        user_mirror.push(
            (0..MIRROR)
                .map(|d| offset[d] + (0..k).map(|j| world.loading[d][j] * z[j]).sum::<f64>())
                .collect::<Vec<f64>>(),
        );
        for v in z.iter_mut() {
            *v = a * *v + innov * normal(&mut rng);
        }
    }
    let user_pose = wander(len, POSE_DIMS, cfg.pose_scale, &mut rng);
    let avatar_pose = wander(len, POSE_DIMS, cfg.pose_scale, &mut rng);
    let base_pose: Vec<f64> = (0..POSE_DIMS).map(|_| 0.2 * normal(&mut rng)).collect();

    let mut user_motion = Tensor::zeros(&[len, MOTION_DIMS]);
    let mut avatar_motion = Tensor::zeros(&[len, MOTION_DIMS]);
    for t in 0..len {
        let um = &mut user_motion.data_mut()[t * MOTION_DIMS..(t + 1) * MOTION_DIMS];
        for (l, g) in LIP_GAINS.iter().enumerate() {
            um[l] = g * env_u[t] + cfg.lip_noise * normal(&mut rng);
        }
        um[MIRROR_DIMS].copy_from_slice(&user_mirror[t + lag]);
        um[EXPR_DIMS..].copy_from_slice(&user_pose[t]);

        let am = &mut avatar_motion.data_mut()[t * MOTION_DIMS..(t + 1) * MOTION_DIMS];
        for (l, g) in LIP_GAINS.iter().enumerate() {
            am[l] = g * env_a[t] + cfg.lip_noise * normal(&mut rng);
        }
        let src = &user_mirror[t];
        for d in 0..MIRROR {
            am[LIP_DIMS + d] = cfg.rho * src[d] + offset[d] + cfg.sigma_n * normal(&mut rng);
        }
        for p in 0..POSE_DIMS {
            am[EXPR_DIMS + p] = base_pose[p] + avatar_pose[t][p];
        }
    }

    let ntok = world.face_tokens.len();
    let mut visual = Tensor::zeros(&[len, ntok, cfg.visual_dim]);
    for t in 0..len {
        let mirror = &user_mirror[t + lag];
        let mut face = 0;
        for j in 0..ntok {
            let o = (t * ntok + j) * cfg.visual_dim;
            for c in 0..cfg.visual_dim {
                let signal = if world.face_tokens[j] {
                    let row = world.camera[face].row(c);
                    row.iter().zip(mirror).map(|(w, x)| w * x).sum::<f64>()
                } else {
                    0.0
                };
                visual.data_mut()[o + c] = signal + cfg.visual_noise * normal(&mut rng);
            }
            if world.face_tokens[j] {
                face += 1;
            }
        }
    }
    let dialogue = dialogue(emotion, &mut rng)?;
    Ok(ConversationTracks { emotion, turns, user_audio, avatar_audio, user_motion, avatar_motion, visual, base_pose, dialogue })
}

fn rows(t: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    t.slice_outer(start, len)
}

/// Cuts window `index` (current frames ending at `history + index * current`)
/// out of simulated tracks.
pub fn window_sample(
    cfg: &SynthConfig,
    world: &SynthWorld,
    tracks: &ConversationTracks,
    index: usize,
    meta: SampleMeta,
) -> Result<ConversationSample> {
    let end = cfg.history + index * cfg.current;
    let len = tracks.user_motion.dim(0);
    if end > len {
        return Err(Error::Invalid(format!("window {index} ends at {end} past {len} frames")));
    }
    let h0 = end - cfg.history;
    let c0 = end - cfg.current;
    let p0 = c0 - cfg.prev;
    let gt_motion = MotionSeq::new(rows(&tracks.avatar_motion, c0, cfg.current)?)?;
    let gt_latent = encode_motion(&gt_motion, &world.codec)?;
    let prev_frames = if cfg.prev > 0 {
        encode_motion(&MotionSeq::new(rows(&tracks.avatar_motion, p0, cfg.prev)?)?, &world.codec)?
    } else {
        crate::datamodel::SpatialLatent::empty(cfg.channels, cfg.height, cfg.width)
    };
    let mut neutral = vec![0.0; MOTION_DIMS];
    neutral[EXPR_DIMS..].copy_from_slice(&tracks.base_pose);
    let ref_latent = Tensor::new(&[cfg.channels, cfg.height, cfg.width], world.codec.encode_frame(&neutral))?;
    let emotion = EMOTIONS[tracks.emotion];
    let sample = ConversationSample {
        user_audio: AudioFeatureSeq::new(rows(&tracks.user_audio, h0, cfg.history)?)?,
        user_visual: VisualTokenSeq::new(rows(&tracks.visual, h0, cfg.history)?, world.face_tokens.clone())?,
        avatar_audio: AudioFeatureSeq::new(rows(&tracks.avatar_audio, c0, cfg.current)?)?,
        dialogue: tracks.dialogue.clone(),
        ref_latent,
        prev_frames,
        gt_latent,
        gt_motion,
        avatar_speaking: tracks.turns.avatar[c0..end].to_vec(),
        emotion_label: Some(emotion.to_string()),
        user_motion: MotionSeq::new(rows(&tracks.user_motion, h0, cfg.history)?)?,
        mask_layout: cfg.mask_layout(),
        meta,
    };
    sample.validate()?;
    Ok(sample)
}

/// A conversation cut into `windows` consecutive samples.
pub fn synth_conversation_windows(cfg: &SynthConfig, world: &SynthWorld, seed: u64, windows: usize) -> Result<Vec<ConversationSample>> {
    if windows == 0 {
        return Err(Error::Config(String::from("need at least one window")));
    }
    let len = cfg.history + (windows - 1) * cfg.current;
    let tracks = simulate(cfg, world, len, seed)?;
    (0..windows)
        .map(|i| window_sample(cfg, world, &tracks, i, SampleMeta { conversation_id: seed, window_index: i, seed }))
        .collect()
}

pub fn synth_conversation(cfg: &SynthConfig, world: &SynthWorld, seed: u64) -> Result<ConversationSample> {
    Ok(synth_conversation_windows(cfg, world, seed, 1)?.remove(0))
}

/// `n` single-window conversations with per-sample seeds `derive_seed(seed, i)`.
pub fn synth_samples(cfg: &SynthConfig, world: &SynthWorld, n: usize, seed: u64) -> Result<Vec<ConversationSample>> {
    if n == 0 {
        return Err(Error::Config(String::from("dataset size must be >= 1")));
    }
    (0..n).map(|i| synth_conversation(cfg, world, derive_seed(seed, i as u64))).collect()
}

/// User motion aligned to the avatar's current window with the coupling lag:
/// row `i` is the user's frame `i - lag` relative to the window start.
pub fn lagged_user(sample: &ConversationSample, lag: usize) -> Result<MotionSeq> {
    let t = sample.history_len();
    let c = sample.current_len();
    if lag + c > t {
        return Err(Error::Invalid(format!("lag {lag} reaches before the history")));
    }
    sample.user_motion.slice(t - c - lag, c)
}

/// Indices of current frames where the avatar is silent.
pub fn listening_frames(sample: &ConversationSample) -> Vec<usize> {
    (0..sample.avatar_speaking.len()).filter(|&i| !sample.avatar_speaking[i]).collect()
}

/// Dataset-level coupling summary.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingStats {
    /// Mean over mirrored dims of the pooled listening-frame correlation
    /// between avatar expression and lagged user expression.
    pub mirror_pcc: f64,
    /// Minimum of the same per-dim correlations.
    pub mirror_pcc_min: f64,
    /// Pooled speaking-frame correlation of the jaw with audio energy.
    pub lip_pcc: f64,
    pub listening_frames: usize,
    pub speaking_frames: usize,
}

pub fn coupling_stats(samples: &[ConversationSample], lag: usize) -> Result<CouplingStats> {
    let mut av: Vec<Vec<f64>> = vec![Vec::new(); MIRROR];
    let mut us: Vec<Vec<f64>> = vec![Vec::new(); MIRROR];
    let (mut jaw, mut energy) = (Vec::new(), Vec::new());
    for s in samples {
        let user = lagged_user(s, lag)?;
        let e = s.avatar_audio.center_rms();
        for i in 0..s.current_len() {
            if s.avatar_speaking[i] {
                jaw.push(s.gt_motion.data().row(i)[0]);
                energy.push(e[i]);
            } else {
                for d in 0..MIRROR {
                    av[d].push(s.gt_motion.data().row(i)[LIP_DIMS + d]);
                    us[d].push(user.data().row(i)[LIP_DIMS + d]);
                }
            }
        }
    }
    let per: Vec<f64> = (0..MIRROR).filter_map(|d| math::pearson(&av[d], &us[d])).collect();
    if per.is_empty() {
        return Err(Error::Invalid(String::from("no listening frames with variance")));
    }
    Ok(CouplingStats {
        mirror_pcc: math::mean(&per),
        mirror_pcc_min: per.iter().cloned().fold(f64::INFINITY, f64::min),
        lip_pcc: math::pearson(&jaw, &energy).unwrap_or(f64::NAN),
        listening_frames: av[0].len(),
        speaking_frames: jaw.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lcu::KeywordReasoner;
    use crate::metrics::lipsync_proxy;

    #[test]
    fn determinism_and_validity() {
        let cfg = SynthConfig::default();
        let w = SynthWorld::new(&cfg).unwrap();
        let a = synth_conversation(&cfg, &w, 11).unwrap();
        let b = synth_conversation(&cfg, &w, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_conversation(&cfg, &w, 12).unwrap());
    }

    #[test]
    fn turns_never_overlap() {
        let cfg = SynthConfig::default();
        for seed in 0..50 {
            let s = turn_schedule(&cfg, 300, &mut seeded(seed));
            assert!(s.user.iter().zip(&s.avatar).all(|(u, a)| !(u & a)));
            assert!(s.user.iter().any(|&u| u) && s.avatar.iter().any(|&a| a));
        }
    }

    #[test]
    fn coupling_endpoint_is_exact() {
        let cfg = SynthConfig { sigma_n: 0.0, rho: 1.0, lag: 0, ..SynthConfig::default() };
        let w = SynthWorld::new(&cfg).unwrap();
        let tr = simulate(&cfg, &w, 80, 5).unwrap();
        let off = w.offset(&cfg, tr.emotion);
        for t in 0..80 {
            if tr.turns.avatar[t] {
                continue;
            }
            for d in 0..MIRROR {
                let u = tr.user_motion.at(&[t, LIP_DIMS + d]);
                assert_eq!(tr.avatar_motion.at(&[t, LIP_DIMS + d]), u + off[d]);
            }
        }
    }

    #[test]
    fn keyword_reasoner_recovers_every_emotion() {
        let cfg = SynthConfig::default();
        let w = SynthWorld::new(&cfg).unwrap();
        let r = KeywordReasoner::default();
        for s in synth_samples(&cfg, &w, 60, 3).unwrap() {
            assert_eq!(Some(r.label(&s.dialogue).to_string()), s.emotion_label);
        }
    }

    #[test]
    fn gt_lipsync_is_high() {
        let cfg = SynthConfig::default();
        let w = SynthWorld::new(&cfg).unwrap();
        let mut checked = 0;
        for s in synth_samples(&cfg, &w, 40, 4).unwrap() {
            if s.avatar_speaking.iter().filter(|&&x| x).count() < 4 {
                continue;
            }
            let p = lipsync_proxy(&s.gt_latent, &s.avatar_audio, &w.codec, &s.avatar_speaking).unwrap();
            assert!(p >= 0.9, "{p}");
            checked += 1;
        }
        assert!(checked > 10);
    }

    #[test]
    fn offsets_are_orthonormal() {
        let cfg = SynthConfig::default();
        let w = SynthWorld::new(&cfg).unwrap();
        for i in 0..EMOTIONS.len() {
            for j in 0..EMOTIONS.len() {
                let d: f64 = w.offset_dirs[i].iter().zip(&w.offset_dirs[j]).map(|(a, b)| a * b).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
            for k in 0..cfg.user_latent_dim {
                let d: f64 = (0..MIRROR).map(|m| w.loading[m][k] * w.offset_dirs[i][m]).sum();
                assert!(d.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn oracle_coupling_holds() {
        let cfg = SynthConfig::default();
        let w = SynthWorld::new(&cfg).unwrap();
        let st = coupling_stats(&synth_samples(&cfg, &w, 64, 9).unwrap(), cfg.lag).unwrap();
        assert!(st.mirror_pcc_min >= 0.8, "{st:?}");
        assert!(st.mirror_pcc >= cfg.rho - 3.0 * cfg.sigma_n);
        assert!(st.lip_pcc >= 0.9);
    }
}
