//! Per-sample preparation and inference: precomputed conditioning, the
//! trained model bundle, and clip generation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::Graph;
use crate::datamodel::{ConversationSample, MotionLatentCodec, RegionMasks};
use crate::error::{Error, Result};
use crate::generator::{condition_bundle, flow_sample, ConditioningBundle, Generator};
use crate::lcu::{
    emotion_sentence, emotion_token_ids, understand_behavior, AffectiveReasoner, Ablation, Lcu, LcuInputs,
    UnderstandingModel,
};
use crate::nn::{AdapterSet, Binder};
use crate::rng::seeded;
use crate::tensor::Tensor;

/// A sample with everything that does not depend on trainable weights.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub sample: ConversationSample,
    /// Avatar-side conditioning (no user or emotion features).
    pub base: ConditioningBundle,
    pub gt_tokens: Tensor,
    pub masks: RegionMasks,
    pub understanding: Tensor,
    pub emotion_text: String,
    pub emotion_ids: Vec<usize>,
}

/// Precomputes conditioning. `emotion_override` replaces the reasoner's
/// label (used to probe emotion conditioning).
pub fn prepare_sample(
    sample: &ConversationSample,
    understanding: &dyn UnderstandingModel,
    reasoner: &dyn AffectiveReasoner,
    vocab: usize,
    emotion_override: Option<&str>,
) -> Result<PreparedSample> {
    sample.validate()?;
    let masks = sample.masks()?;
    let base = condition_bundle(sample, None, None)?;
    let s = understand_behavior(understanding, &sample.user_visual, &sample.user_audio, sample.emotion_label.as_deref())?;
    let emotion_text = match emotion_override {
        Some(label) => emotion_sentence(label),
        None => reasoner.infer(&sample.dialogue),
    };
    Ok(PreparedSample {
        base,
        gt_tokens: sample.gt_latent.to_tokens(),
        masks,
        understanding: s,
        emotion_ids: emotion_token_ids(&emotion_text, vocab),
        emotion_text,
        sample: sample.clone(),
    })
}

impl PreparedSample {
    pub fn lcu_inputs(&self) -> LcuInputs<'_> {
        LcuInputs {
            user_audio: &self.sample.user_audio,
            user_visual: &self.sample.user_visual,
            current_len: self.sample.current_len(),
            understanding: Some(&self.understanding),
            emotion_tokens: Some(&self.emotion_ids),
        }
    }

    /// Same sample with different previous-frame tokens (for chaining).
    pub fn with_prev_tokens(&self, prev: Tensor) -> Self {
        let mut out = self.clone();
        out.base.prev_tokens = prev;
        out
    }
}

/// A trained model: stage 1 has only the generator; stage 2 adds the
/// contextual understanding pipeline and adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct EchoModel {
    pub generator: Generator,
    pub lcu: Option<Lcu>,
    pub adapters: Option<AdapterSet>,
    pub ablation: Ablation,
}

impl EchoModel {
    pub fn stage(&self) -> u8 {
        if self.lcu.is_some() {
            2
        } else {
            1
        }
    }

    /// Full conditioning for a prepared sample (user and emotion features
    /// evaluated without a tape).
    pub fn conditioning(&self, p: &PreparedSample) -> Result<ConditioningBundle> {
        let Some(lcu) = &self.lcu else { return Ok(p.base.clone()) };
        let mut g = Graph::new();
        let mut b = Binder::new();
        b.bind_frozen(&mut g, lcu);
        let out = lcu.forward(&mut g, &b, &p.lcu_inputs())?;
        Ok(ConditioningBundle {
            f_pu: Some(g.value(out.f_pu).clone()),
            c_emo: out.c_emo.map(|v| g.value(v).clone()),
            ..p.base.clone()
        })
    }

    /// Samples one clip as current-frame tokens, from noise drawn with `seed`.
    pub fn generate_tokens(&self, p: &PreparedSample, seed: u64, n_steps: usize) -> Result<Tensor> {
        let cond = self.conditioning(p)?;
        self.sample_with(&cond, &p.masks, seed, n_steps)
    }

    pub fn sample_with(&self, cond: &ConditioningBundle, masks: &RegionMasks, seed: u64, n_steps: usize) -> Result<Tensor> {
        let cfg = &self.generator.config;
        let mut rng = seeded(seed);
        let x0 = Tensor::randn(&[cfg.cur_frames * cfg.cells(), cfg.channels], 1.0, &mut rng);
        let gen = &self.generator;
        let adapters = self.adapters.as_ref();
        flow_sample(&x0, n_steps, |x, t| gen.velocity(x, t, cond, masks, adapters))
    }
}

/// Decodes current-frame tokens to a `T x 56` motion tensor.
pub fn decode_tokens(tokens: &Tensor, frames: usize, codec: &MotionLatentCodec) -> Result<Tensor> {
    let dec = codec.decode_matrix_tokens();
    let l = dec.cols();
    if tokens.len() != frames * l {
        return Err(Error::Invalid(format!("{} token values for {frames} frames of {l}", tokens.len())));
    }
    let mut out = Vec::with_capacity(frames * dec.rows());
    for f in 0..frames {
        let z = &tokens.data()[f * l..(f + 1) * l];
        for d in 0..dec.rows() {
            out.push(dec.row(d).iter().zip(z).map(|(a, b)| a * b).sum());
        }
    }
    Tensor::new(&[frames, dec.rows()], out)
}
