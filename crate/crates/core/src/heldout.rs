//! Held-out checks of a trained model against the synthetic coupling laws:
//! lip/audio synchrony, lagged listening responsiveness and the effect of
//! the emotion text.

use alloc::vec::Vec;

use crate::datamodel::{MotionLatentCodec, MotionSeq};
use crate::error::Result;
use crate::lcu::{emotion_index, emotion_sentence, emotion_token_ids, EMOTIONS};
use crate::math;
use crate::metrics::{lipsync_from_motion, rpcc_with, PccAggregation, MIN_SPEAKING_FRAMES};
use crate::pipeline::{decode_tokens, EchoModel, PreparedSample};
use crate::synthdata::{lagged_user, listening_frames, SynthWorld, MIRROR_DIMS};

/// Minimum listening frames for a clip to enter the responsiveness score.
pub const MIN_LISTENING_FRAMES: usize = 6;

/// Samples a clip and decodes it to motion.
pub fn generate_motion(model: &EchoModel, p: &PreparedSample, codec: &MotionLatentCodec, seed: u64, n_steps: usize) -> Result<MotionSeq> {
    let tokens = model.generate_tokens(p, seed, n_steps)?;
    MotionSeq::new(decode_tokens(&tokens, p.sample.current_len(), codec)?)
}

/// Jaw/audio-energy correlation over speaking frames; `None` when the clip
/// has too few speaking frames or a constant signal.
pub fn clip_lipsync(gen: &MotionSeq, p: &PreparedSample) -> Option<f64> {
    let s = &p.sample.avatar_speaking;
    if s.iter().filter(|&&x| x).count() < MIN_SPEAKING_FRAMES {
        return None;
    }
    lipsync_from_motion(gen, &p.sample.avatar_audio.center_rms(), s).ok()
}

/// rPCC over the clip's listening frames, against the user's motion shifted
/// by the coupling lag, on the mirrored expression dims.
pub fn clip_listening_rpcc(gen: &MotionSeq, p: &PreparedSample, lag: usize) -> Result<Option<f64>> {
    let idx = listening_frames(&p.sample);
    if idx.len() < MIN_LISTENING_FRAMES {
        return Ok(None);
    }
    let user = lagged_user(&p.sample, lag)?.select(&idx)?;
    let gt = p.sample.gt_motion.select(&idx)?;
    let gen = gen.select(&idx)?;
    Ok(rpcc_with(&gen, &gt, &user, MIRROR_DIMS, PccAggregation::PerDim).ok().map(|r| r.value))
}

/// Label used for the swap probe: the next emotion in index order.
pub fn swapped_label(label: &str) -> &'static str {
    let k = emotion_index(label).unwrap_or(0);
    EMOTIONS[(k + 1) % EMOTIONS.len()]
}

/// Same sample with its emotion text replaced by `label`'s sentence.
pub fn with_emotion(p: &PreparedSample, label: &str, vocab: usize) -> PreparedSample {
    let mut out = p.clone();
    out.emotion_text = emotion_sentence(label);
    out.emotion_ids = emotion_token_ids(&out.emotion_text, vocab);
    out
}

/// Projection of the mean mirrored-expression change onto the unit
/// direction from the old emotion offset to the new one.
pub fn emotion_shift(before: &MotionSeq, after: &MotionSeq, world: &SynthWorld, old: usize, new: usize) -> f64 {
    let dir: Vec<f64> = world.offset_dirs[new].iter().zip(&world.offset_dirs[old]).map(|(a, b)| a - b).collect();
    let norm = math::sqrt(dir.iter().map(|x| x * x).sum::<f64>());
    let t = before.frames();
    let mut proj = 0.0;
    for f in 0..t {
        let (a, b) = (before.data().row(f), after.data().row(f));
        for (j, d) in MIRROR_DIMS.enumerate() {
            proj += (b[d] - a[d]) * dir[j];
        }
    }
    proj / (t as f64 * norm)
}

/// One-sided binomial sign-test p-value `P(X >= positives)` for `X ~ Bin(n, 1/2)`.
pub fn sign_test_p(positives: usize, n: usize) -> f64 {
    let mut p = 0.0;
    let mut c = 1.0f64;
    for k in 0..=n {
        if k > 0 {
            c = c * (n - k + 1) as f64 / k as f64;
        }
        if k >= positives {
            p += c;
        }
    }
    p / math::powi(2.0, n as i32)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeldoutReport {
    pub clips: usize,
    pub lipsync: f64,
    pub lipsync_clips: usize,
    pub listening_rpcc: f64,
    pub listening_clips: usize,
    /// Per-clip emotion projections (empty without emotion conditioning).
    pub emotion_shifts: Vec<f64>,
    pub emotion_positive: usize,
    pub emotion_p: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeldoutConfig {
    pub n_steps: usize,
    pub seed: u64,
    pub lag: usize,
    pub vocab: usize,
    pub emotion_probe: bool,
}

/// Runs every held-out check with clip `i` sampled from noise seed
/// `derive_seed(seed, i)`; the emotion probe reuses that seed.
pub fn heldout_report(
    model: &EchoModel,
    clips: &[PreparedSample],
    world: &SynthWorld,
    cfg: &HeldoutConfig,
) -> Result<HeldoutReport> {
    let mut r = HeldoutReport { clips: clips.len(), ..HeldoutReport::default() };
    let (mut lip, mut rp) = (0.0, 0.0);
    for (i, p) in clips.iter().enumerate() {
        let seed = crate::rng::derive_seed(cfg.seed, i as u64);
        let gen = generate_motion(model, p, &world.codec, seed, cfg.n_steps)?;
        if let Some(v) = clip_lipsync(&gen, p) {
            lip += v;
            r.lipsync_clips += 1;
        }
        if let Some(v) = clip_listening_rpcc(&gen, p, cfg.lag)? {
            rp += v;
            r.listening_clips += 1;
        }
        if cfg.emotion_probe && model.ablation.lau && model.lcu.is_some() {
            let Some(label) = p.sample.emotion_label.as_deref() else { continue };
            let new = swapped_label(label);
            let swapped = with_emotion(p, new, cfg.vocab);
            let after = generate_motion(model, &swapped, &world.codec, seed, cfg.n_steps)?;
            let old = emotion_index(label).unwrap_or(0);
            let new = emotion_index(new).unwrap_or(0);
            r.emotion_shifts.push(emotion_shift(&gen, &after, world, old, new));
        }
    }
    r.lipsync = if r.lipsync_clips > 0 { lip / r.lipsync_clips as f64 } else { f64::NAN };
    r.listening_rpcc = if r.listening_clips > 0 { rp / r.listening_clips as f64 } else { f64::NAN };
    r.emotion_positive = r.emotion_shifts.iter().filter(|&&s| s > 0.0).count();
    r.emotion_p = if r.emotion_shifts.is_empty() { 1.0 } else { sign_test_p(r.emotion_positive, r.emotion_shifts.len()) };
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_reference_values() {
        assert!((sign_test_p(0, 10) - 1.0).abs() < 1e-15);
        assert!((sign_test_p(10, 10) - 1.0 / 1024.0).abs() < 1e-15);
        // P(X >= 22 | n = 32) = 0.0250...
        let p = sign_test_p(22, 32);
        assert!(p > 0.025 && p < 0.0251, "{p}");
        assert!(sign_test_p(21, 32) > 0.05);
    }

    #[test]
    fn swap_cycles_labels() {
        assert_eq!(swapped_label("happy"), "sad");
        assert_eq!(swapped_label("fearful"), "happy");
    }
}
