//! Long-range contextual understanding: turns the user's audio-visual
//! history and the dialogue into perception-understanding features (one
//! token per current frame) and an emotion embedding.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{AttnSpec, Graph, Var};
use crate::datamodel::{mask_face_tokens, AudioFeatureSeq, DialogueHistory, VisualTokenSeq};
use crate::error::{shape_err, Error, Result};
use crate::impl_parameters;
use crate::math;
use crate::nn::{AttentionProj, Binder, LayerNorm, Linear, Mlp};
use crate::rng::{seeded, SeededRng};
use crate::tensor::Tensor;

/// Branch switches for the ablation variants. `true` keeps the branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    /// Long-range visual perception and its integration with audio.
    pub lpe: bool,
    /// Understanding-model tokens fused by gated cross-attention.
    pub hbcu: bool,
    /// Dialogue-derived emotion conditioning.
    pub lau: bool,
    /// Region-decoupled injection; when off, user and avatar conditioning
    /// are fused into one token stream injected everywhere.
    pub sdcm: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { lpe: true, hbcu: true, lau: true, sdcm: true }
    }
}

impl Ablation {
    pub fn name(&self) -> String {
        let mut off = Vec::new();
        for (on, n) in [(self.lpe, "no-lpe"), (self.hbcu, "no-hbcu"), (self.lau, "no-lau"), (self.sdcm, "no-sdcm")] {
            if !on {
                off.push(n);
            }
        }
        if off.is_empty() {
            String::from("full")
        } else {
            off.join("+")
        }
    }
}

/// Diagonal input-gated linear recurrence with pre-normalisation:
/// `s_t = a * s_{t-1} + (b * sigmoid(x~ W_g)) * (x~ W_in)`, `y_t = (c * s_t) W_out`.
///
/// The decay is stored through `tanh` so every update keeps `|a| < 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanLayer {
    pub norm: LayerNorm,
    pub w_in: Linear,
    pub w_gate: Linear,
    pub w_out: Linear,
    pub decay_logit: Tensor,
    pub b: Tensor,
    pub c: Tensor,
}

impl_parameters!(ScanLayer { norm, w_in, w_gate, w_out, decay_logit, b, c });

impl ScanLayer {
    /// Random projections, decays spread over `[0.5, 0.99]`, zero output
    /// projection (the residual branch starts silent).
    pub fn new(dim: usize, state: usize, rng: &mut SeededRng) -> Self {
        let decay: Vec<f64> = (0..state)
            .map(|j| 0.5 + 0.49 * j as f64 / (state.max(2) - 1) as f64)
            .collect();
        let mut layer = Self {
            norm: LayerNorm::new(dim),
            w_in: Linear::new(dim, state, false, rng),
            w_gate: Linear::new(dim, state, true, rng),
            w_out: Linear::zeros(state, dim, false),
            decay_logit: Tensor::zeros(&[1, state]),
            b: Tensor::filled(&[1, state], 1.0),
            c: Tensor::filled(&[1, state], 1.0),
        };
        layer.set_decay(&decay).expect("decays in range");
        layer
    }

    pub fn dim(&self) -> usize {
        self.w_in.input_dim()
    }

    pub fn state_dim(&self) -> usize {
        self.w_in.output_dim()
    }

    /// Sets the decay vector; every entry must satisfy `|a| < 1`.
    pub fn set_decay(&mut self, decay: &[f64]) -> Result<()> {
        if decay.len() != self.state_dim() {
            return Err(shape_err("ScanLayer::set_decay", format!("{} decays for {} states", decay.len(), self.state_dim())));
        }
        if let Some(a) = decay.iter().find(|a| !(a.abs() < 1.0)) {
            return Err(Error::Config(format!("unstable scan decay {a}")));
        }
        self.decay_logit = Tensor::from_fn(&[1, decay.len()], |j| libm::atanh(decay[j]));
        Ok(())
    }

    pub fn decay(&self) -> Vec<f64> {
        self.decay_logit.data().iter().map(|&x| math::tanh(x)).collect()
    }

    /// Recurrent state sequence for `x` split into sequences of `seq_len` rows.
    pub fn states(&self, g: &mut Graph, b: &Binder, x: Var, seq_len: usize) -> Var {
        let xn = self.norm.forward(g, b, x);
        let u = self.w_in.forward(g, b, xn);
        let gate = self.w_gate.forward(g, b, xn);
        let gate = g.sigmoid(gate);
        let gate = g.mul_row(gate, b.var(&self.b));
        let z = g.mul(gate, u);
        let a = g.tanh(b.var(&self.decay_logit));
        g.recurrence(z, a, seq_len)
    }

    pub fn forward(&self, g: &mut Graph, b: &Binder, x: Var, seq_len: usize) -> Var {
        let s = self.states(g, b, x, seq_len);
        let s = g.mul_row(s, b.var(&self.c));
        self.w_out.forward(g, b, s)
    }
}

/// Residual stack of scan layers over sequences of `seq_len` rows.
pub fn scan_stack(g: &mut Graph, b: &Binder, layers: &[ScanLayer], x: Var, seq_len: usize) -> Var {
    let mut h = x;
    for layer in layers {
        let r = layer.forward(g, b, h, seq_len);
        h = g.add(h, r);
    }
    h
}

/// Window fuser plus residual scan stack over the user's audio history.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioContextEncoder {
    pub window_fuser: Linear,
    pub layers: Vec<ScanLayer>,
}

impl_parameters!(AudioContextEncoder { window_fuser, layers });

impl AudioContextEncoder {
    pub fn new(window: usize, dim: usize, layers: usize, state: usize, rng: &mut SeededRng) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config(String::from("audio context encoder needs at least one scan layer")));
        }
        Ok(Self {
            window_fuser: Linear::new(window * dim, dim, true, rng),
            layers: (0..layers).map(|_| ScanLayer::new(dim, state, rng)).collect(),
        })
    }

    /// `T x (L_w * D_a)` flattened windows to `T x D_a` frame embeddings.
    pub fn fuse(&self, g: &mut Graph, b: &Binder, windows: Var) -> Result<Var> {
        let (_, c) = g.shape(windows);
        if c != self.window_fuser.input_dim() {
            return Err(shape_err("fuse_audio_window", format!("window width {c} vs fuser {}", self.window_fuser.input_dim())));
        }
        Ok(self.window_fuser.forward(g, b, windows))
    }

    pub fn encode(&self, g: &mut Graph, b: &Binder, windows: Var) -> Result<Var> {
        let fused = self.fuse(g, b, windows)?;
        let t = g.shape(fused).0;
        Ok(scan_stack(g, b, &self.layers, fused, t))
    }
}

/// `A^ = A + sigmoid(gate([A; Ā])) * tanh(proj(Ā))`, with `Ā` the encoded
/// context broadcast over each frame's window slots.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedModulation {
    pub proj: Linear,
    pub gate_fuser: Linear,
}

impl_parameters!(GatedModulation { proj, gate_fuser });

impl GatedModulation {
    pub fn new(dim: usize, rng: &mut SeededRng) -> Self {
        Self { proj: Linear::new(dim, dim, true, rng), gate_fuser: Linear::new(2 * dim, dim, true, rng) }
    }

    /// `current`: `(T_cur * L_w) x D_a` window rows; `context`: `T_cur x D_a`.
    pub fn forward(&self, g: &mut Graph, b: &Binder, current: Var, context: Var, window: usize) -> Result<Var> {
        let (rows, d) = g.shape(current);
        let (t, dc) = g.shape(context);
        if rows != t * window || d != dc || d != self.proj.input_dim() {
            return Err(shape_err(
                "gated_residual_modulate",
                format!("current {rows}x{d}, context {t}x{dc}, window {window}, proj {}", self.proj.input_dim()),
            ));
        }
        let idx: Vec<usize> = (0..rows).map(|r| r / window).collect();
        let bar = g.gather_rows(context, &idx);
        let both = g.concat_cols(&[current, bar]);
        let gate = self.gate_fuser.forward(g, b, both);
        let gate = g.sigmoid(gate);
        let p = self.proj.forward(g, b, bar);
        let p = g.tanh(p);
        let m = g.mul(gate, p);
        Ok(g.add(current, m))
    }
}

/// Per-frame pool of audio window slots and face tokens, concatenated and
/// projected to the perception width. Without the visual branch the
/// projection sees the audio pool only.
pub fn integrate_perception(
    g: &mut Graph,
    b: &Binder,
    proj: &Linear,
    audio: Var,
    window: usize,
    visual: Option<(Var, usize)>,
) -> Result<Var> {
    let pooled_a = g.group_mean(audio, window);
    let t = g.shape(pooled_a).0;
    let pooled = match visual {
        Some((v, tokens)) => {
            let pv = g.group_mean(v, tokens);
            if g.shape(pv).0 != t {
                return Err(shape_err("integrate_perception", format!("{t} audio frames vs {} visual frames", g.shape(pv).0)));
            }
            g.concat_cols(&[pooled_a, pv])
        }
        None => pooled_a,
    };
    let w = g.shape(pooled).1;
    if w != proj.input_dim() {
        return Err(shape_err("integrate_perception", format!("pooled width {w} vs projection {}", proj.input_dim())));
    }
    Ok(proj.forward(g, b, pooled))
}

/// Gated cross-attention fusion of perception features with aligned
/// understanding tokens: `f_m = attn(P, align(S)) tanh(alpha) + P`,
/// `f_pu = ffn(f_m) tanh(beta) + f_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedCrossAttention {
    pub attn: AttentionProj,
    pub align: Mlp,
    pub ffn: Mlp,
    pub alpha: Tensor,
    pub beta: Tensor,
}

impl_parameters!(GatedCrossAttention { attn, align, ffn, alpha, beta });

impl GatedCrossAttention {
    pub fn new(perception: usize, understanding: usize, heads: usize, rng: &mut SeededRng) -> Self {
        Self {
            attn: AttentionProj::new(perception, perception, heads, false, rng),
            align: Mlp::new(understanding, perception, perception, rng),
            ffn: Mlp::new(perception, 4 * perception, perception, rng),
            alpha: Tensor::zeros(&[1, 1]),
            beta: Tensor::zeros(&[1, 1]),
        }
    }

    /// `tokens = None` drops the cross-attention term (`f_m = P`).
    pub fn forward(&self, g: &mut Graph, b: &Binder, p: Var, tokens: Option<Var>) -> Result<Var> {
        let fm = match tokens {
            Some(s) => {
                let (ns, ds) = g.shape(s);
                if ns == 0 || ds != self.align.fc1.input_dim() {
                    return Err(shape_err("gca_fuse", format!("tokens {ns}x{ds} vs align input {}", self.align.fc1.input_dim())));
                }
                let t = g.shape(p).0;
                let aligned = self.align.forward(g, b, s);
                let spec = AttnSpec { groups: 1, q_len: t, kv_len: ns, heads: 1, causal: false, shared_kv: true };
                let a = self.attn.forward(g, b, p, aligned, spec, None, "");
                let ta = g.tanh(b.var(&self.alpha));
                let a = g.scale_by(a, ta);
                g.add(a, p)
            }
            None => p,
        };
        let f = self.ffn.forward(g, b, fm);
        let tb = g.tanh(b.var(&self.beta));
        let f = g.scale_by(f, tb);
        Ok(g.add(f, fm))
    }
}

/// Widths and depths of the contextual understanding pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct LcuConfig {
    pub window: usize,
    pub audio_dim: usize,
    pub audio_layers: usize,
    pub state_dim: usize,
    pub visual_dim: usize,
    pub visual_layers: usize,
    pub perception_dim: usize,
    pub understanding_dim: usize,
    pub understanding_tokens: usize,
    pub gca_heads: usize,
    pub vocab: usize,
    pub emotion_dim: usize,
}

impl Default for LcuConfig {
    fn default() -> Self {
        Self {
            window: 5,
            audio_dim: 32,
            audio_layers: 2,
            state_dim: 16,
            visual_dim: 16,
            visual_layers: 1,
            perception_dim: 16,
            understanding_dim: 12,
            understanding_tokens: 8,
            gca_heads: 1,
            vocab: 256,
            emotion_dim: 16,
        }
    }
}

/// All learnable parts of the contextual understanding pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Lcu {
    pub audio: AudioContextEncoder,
    pub modulation: GatedModulation,
    pub visual: Vec<ScanLayer>,
    pub integrate: Linear,
    pub gca: GatedCrossAttention,
    pub emotion_table: Tensor,
    pub ablation: Ablation,
    pub config: LcuConfig,
}

impl_parameters!(Lcu { audio, modulation, visual, integrate, gca, emotion_table });

/// Inputs of one pass; `understanding` is the precomputed token block and
/// `emotion_tokens` the hashed ids of the emotion sentence.
pub struct LcuInputs<'a> {
    pub user_audio: &'a AudioFeatureSeq,
    pub user_visual: &'a VisualTokenSeq,
    pub current_len: usize,
    pub understanding: Option<&'a Tensor>,
    pub emotion_tokens: Option<&'a [usize]>,
}

pub struct LcuOutput {
    /// `T_cur x D_p`.
    pub f_pu: Var,
    /// `N_e x D_e` when emotion conditioning is enabled.
    pub c_emo: Option<Var>,
}

impl Lcu {
    pub fn new(cfg: &LcuConfig, ablation: Ablation, rng: &mut SeededRng) -> Result<Self> {
        if cfg.window == 0 || cfg.window % 2 == 0 {
            return Err(Error::Config(format!("audio window must be odd, got {}", cfg.window)));
        }
        let pooled = if ablation.lpe { cfg.audio_dim + cfg.visual_dim } else { cfg.audio_dim };
        Ok(Self {
            audio: AudioContextEncoder::new(cfg.window, cfg.audio_dim, cfg.audio_layers, cfg.state_dim, rng)?,
            modulation: GatedModulation::new(cfg.audio_dim, rng),
            visual: if ablation.lpe {
                (0..cfg.visual_layers).map(|_| ScanLayer::new(cfg.visual_dim, cfg.state_dim, rng)).collect()
            } else {
                Vec::new()
            },
            integrate: Linear::new(pooled, cfg.perception_dim, true, rng),
            gca: GatedCrossAttention::new(cfg.perception_dim, cfg.understanding_dim, cfg.gca_heads, rng),
            emotion_table: Tensor::randn(&[cfg.vocab, cfg.emotion_dim], 1.0, rng),
            ablation,
            config: cfg.clone(),
        })
    }

    pub fn forward(&self, g: &mut Graph, b: &Binder, inp: &LcuInputs<'_>) -> Result<LcuOutput> {
        let audio = inp.user_audio;
        let (t, w) = (audio.frames(), audio.window());
        let t_cur = inp.current_len;
        if t_cur == 0 || t_cur > t {
            return Err(Error::Invalid(format!("current window {t_cur} vs history {t}")));
        }
        if w != self.config.window || audio.dim() != self.config.audio_dim {
            return Err(shape_err("lcu", format!("audio {w}x{} vs config {}x{}", audio.dim(), self.config.window, self.config.audio_dim)));
        }
        let windows = g.constant(audio.flat_windows());
        let context = self.audio.encode(g, b, windows)?;
        let context = g.slice_rows(context, t - t_cur, t_cur);
        let raw = audio.data().slice_outer(t - t_cur, t_cur)?;
        let current = g.constant(raw.reshape(&[t_cur * w, audio.dim()])?);
        let modulated = self.modulation.forward(g, b, current, context, w)?;

        let visual = if self.ablation.lpe {
            let v = inp.user_visual;
            if v.frames() != t || v.dim() != self.config.visual_dim {
                return Err(shape_err("lcu", format!("visual {}x{} vs {t}x{}", v.frames(), v.dim(), self.config.visual_dim)));
            }
            let faces = mask_face_tokens(v)?;
            let nf = faces.dim(1);
            let x = g.constant(faces.reshape(&[t * nf, v.dim()])?);
            let enc = scan_stack(g, b, &self.visual, x, t * nf);
            Some((g.slice_rows(enc, (t - t_cur) * nf, t_cur * nf), nf))
        } else {
            None
        };
        let p = integrate_perception(g, b, &self.integrate, modulated, w, visual)?;

        let tokens = if self.ablation.hbcu {
            let s = inp
                .understanding
                .ok_or_else(|| Error::Invalid(String::from("understanding tokens missing")))?;
            Some(g.constant(s.clone()))
        } else {
            None
        };
        let f_pu = self.gca.forward(g, b, p, tokens)?;

        let c_emo = if self.ablation.lau {
            let ids = inp
                .emotion_tokens
                .ok_or_else(|| Error::Invalid(String::from("emotion tokens missing")))?;
            Some(embed_emotion_ids(g, b, &self.emotion_table, ids)?)
        } else {
            None
        };
        Ok(LcuOutput { f_pu, c_emo })
    }
}

/// Emotion labels in index order.
pub const EMOTIONS: [&str; 5] = ["happy", "sad", "concerned", "neutral", "fearful"];

pub fn emotion_index(label: &str) -> Option<usize> {
    EMOTIONS.iter().position(|&e| e == label)
}

/// Fixed instruction handed to the understanding model.
pub const THINK_PROMPT: &str =
    "Watch the user's recent behaviour and summarise their affect, engagement and conversational intent.";

/// Everything an understanding model may look at.
pub struct UnderstandingQuery<'a> {
    pub prompt: &'a str,
    pub visual: &'a VisualTokenSeq,
    pub audio: &'a AudioFeatureSeq,
    pub emotion_hint: Option<&'a str>,
}

/// Produces a fixed block of hidden tokens summarising the user's history.
pub trait UnderstandingModel {
    fn id(&self) -> &'static str;
    fn tokens(&self) -> usize;
    fn dim(&self) -> usize;
    fn understand(&self, q: &UnderstandingQuery<'_>) -> Result<Tensor>;
}

/// Seeded projection of per-third mean and variance statistics.
pub struct StatStub {
    tokens: usize,
    dim: usize,
    proj: Tensor,
    bias: Tensor,
}

impl StatStub {
    pub fn new(seed: u64, audio_dim: usize, visual_dim: usize, tokens: usize, dim: usize) -> Self {
        let stats = 6 * (audio_dim + visual_dim);
        let mut rng = seeded(seed);
        let proj = Tensor::randn(&[stats, tokens * dim], 1.0 / math::sqrt(stats as f64), &mut rng);
        let bias = Tensor::randn(&[1, tokens * dim], 0.1, &mut rng);
        Self { tokens, dim, proj, bias }
    }

    /// Mean and variance per feature over each third of the history.
    pub fn statistics(audio: &AudioFeatureSeq, visual: &VisualTokenSeq) -> Vec<f64> {
        let mut out = Vec::new();
        let t = audio.frames();
        for part in 0..3 {
            let (s, e) = (part * t / 3, ((part + 1) * t / 3).max(part * t / 3 + 1).min(t));
            let per = audio.window();
            push_stats(&mut out, &audio.data().data()[s * per * audio.dim()..e * per * audio.dim()], audio.dim());
            let tv = visual.frames();
            let (s, e) = (part * tv / 3, ((part + 1) * tv / 3).max(part * tv / 3 + 1).min(tv));
            let per = visual.tokens();
            push_stats(&mut out, &visual.data().data()[s * per * visual.dim()..e * per * visual.dim()], visual.dim());
        }
        out
    }
}

fn push_stats(out: &mut Vec<f64>, rows: &[f64], dim: usize) {
    let n = (rows.len() / dim).max(1) as f64;
    let mut mean = vec![0.0; dim];
    for r in rows.chunks(dim) {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows.chunks(dim) {
        for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    out.extend(mean);
    out.extend(var);
}

impl UnderstandingModel for StatStub {
    fn id(&self) -> &'static str {
        "stat_stub"
    }
    fn tokens(&self) -> usize {
        self.tokens
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn understand(&self, q: &UnderstandingQuery<'_>) -> Result<Tensor> {
        if q.prompt.trim().is_empty() {
            return Err(Error::Invalid(String::from("understanding prompt is empty")));
        }
        let stats = Self::statistics(q.audio, q.visual);
        if stats.len() != self.proj.dim(0) {
            return Err(shape_err("StatStub", format!("{} statistics vs projection {}", stats.len(), self.proj.dim(0))));
        }
        let x = Tensor::new(&[1, stats.len()], stats)?;
        let lin = Linear { w: self.proj.clone(), b: Some(self.bias.clone()) };
        lin.apply(&x).reshape(&[self.tokens, self.dim])
    }
}

/// Emits the known emotion as a one-hot token block.
pub struct OracleStub {
    tokens: usize,
    dim: usize,
}

impl OracleStub {
    pub fn new(tokens: usize, dim: usize) -> Result<Self> {
        if dim < EMOTIONS.len() || tokens == 0 {
            return Err(Error::Config(format!("oracle stub needs >= {} channels and >= 1 token", EMOTIONS.len())));
        }
        Ok(Self { tokens, dim })
    }
}

impl UnderstandingModel for OracleStub {
    fn id(&self) -> &'static str {
        "oracle_stub"
    }
    fn tokens(&self) -> usize {
        self.tokens
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn understand(&self, q: &UnderstandingQuery<'_>) -> Result<Tensor> {
        let label = q
            .emotion_hint
            .ok_or_else(|| Error::Invalid(String::from("oracle stub needs an emotion label")))?;
        let k = emotion_index(label).ok_or_else(|| Error::Invalid(format!("unknown emotion `{label}`")))?;
        Ok(Tensor::from_fn(&[self.tokens, self.dim], |i| if i % self.dim == k { 1.0 } else { 0.0 }))
    }
}

/// Understanding model by registry id.
pub fn understanding_model(
    id: &str,
    seed: u64,
    audio_dim: usize,
    visual_dim: usize,
    tokens: usize,
    dim: usize,
) -> Result<Box<dyn UnderstandingModel>> {
    match id {
        "stat_stub" => Ok(Box::new(StatStub::new(seed, audio_dim, visual_dim, tokens, dim))),
        "oracle_stub" => Ok(Box::new(OracleStub::new(tokens, dim)?)),
        other => Err(Error::Unknown { kind: "understanding model", name: other.to_string() }),
    }
}

/// Runs the model on the fixed prompt.
pub fn understand_behavior(
    model: &dyn UnderstandingModel,
    visual: &VisualTokenSeq,
    audio: &AudioFeatureSeq,
    emotion_hint: Option<&str>,
) -> Result<Tensor> {
    model.understand(&UnderstandingQuery { prompt: THINK_PROMPT, visual, audio, emotion_hint })
}

/// Lower-cased alphanumeric runs; everything else separates tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_lowercase())
        .collect()
}

/// Token sequence fed to the emotion embedding: the words plus an end marker.
pub fn emotion_tokens(text: &str) -> Vec<String> {
    let mut t = tokenize(text);
    t.push(String::from("</s>"));
    t
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn emotion_token_ids(text: &str, vocab: usize) -> Vec<usize> {
    emotion_tokens(text).iter().map(|t| (fnv1a64(t.as_bytes()) % vocab as u64) as usize).collect()
}

/// Looks up one embedding row per token id.
pub fn embed_emotion_ids(g: &mut Graph, b: &Binder, table: &Tensor, ids: &[usize]) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::Invalid(String::from("emotion text has no tokens")));
    }
    if let Some(&i) = ids.iter().find(|&&i| i >= table.dim(0)) {
        return Err(shape_err("embed_emotion", format!("token id {i} outside table of {}", table.dim(0))));
    }
    Ok(g.gather_rows(b.var(table), ids))
}

/// Infers a one-sentence emotional state from the dialogue.
pub trait AffectiveReasoner {
    fn infer(&self, d: &DialogueHistory) -> String;
}

/// Adverbial colour attached to each label.
pub fn emotion_modifier(label: &str) -> &'static str {
    match label {
        "happy" => "warm",
        "sad" => "downcast",
        "concerned" => "gentle",
        "fearful" => "tense",
        _ => "attentive",
    }
}

pub fn emotion_sentence(label: &str) -> String {
    format!("The avatar feels {label}, {}.", emotion_modifier(label))
}

/// Keyword vote over the whole dialogue; ties go to the label whose keyword
/// occurred last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeywordReasoner {
    table: BTreeMap<String, String>,
}

/// Shipped keyword table, one `token label` pair per line.
pub const DEFAULT_KEYWORDS: &str = "\
happy happy
glad happy
great happy
wonderful happy
excited happy
sad sad
lonely sad
miss sad
lost sad
cry sad
shame concerned
embarrassment concerned
embarrassed concerned
worried concerned
trouble concerned
calm neutral
fine neutral
okay neutral
afraid fearful
scared fearful
fear fearful
panic fearful
";

impl KeywordReasoner {
    /// Parses `token label` lines; `#` starts a comment.
    pub fn from_table(text: &str) -> Result<Self> {
        let mut table = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(tok), Some(label), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Config(format!("keyword table line {}: expected `token label`", n + 1)));
            };
            if emotion_index(label).is_none() {
                return Err(Error::Config(format!("keyword table line {}: unknown label `{label}`", n + 1)));
            }
            table.insert(tok.to_lowercase(), label.to_string());
        }
        Ok(Self { table })
    }

    pub fn label(&self, d: &DialogueHistory) -> &'static str {
        let mut counts = [0usize; EMOTIONS.len()];
        let mut last = [0usize; EMOTIONS.len()];
        let mut pos = 0;
        for turn in d.turns() {
            for tok in tokenize(&turn.text) {
                pos += 1;
                if let Some(l) = self.table.get(&tok) {
                    let k = emotion_index(l).expect("validated label");
                    counts[k] += 1;
                    last[k] = pos;
                }
            }
        }
        let best = (0..EMOTIONS.len())
            .filter(|&k| counts[k] > 0)
            .max_by_key(|&k| (counts[k], last[k]));
        best.map_or("neutral", |k| EMOTIONS[k])
    }
}

impl Default for KeywordReasoner {
    fn default() -> Self {
        Self::from_table(DEFAULT_KEYWORDS).expect("default table parses")
    }
}

impl AffectiveReasoner for KeywordReasoner {
    fn infer(&self, d: &DialogueHistory) -> String {
        emotion_sentence(self.label(d))
    }
}

pub fn infer_emotion(d: &DialogueHistory, reasoner: &dyn AffectiveReasoner) -> String {
    reasoner.infer(d)
}

pub fn reasoner(id: &str, table: Option<&str>) -> Result<Box<dyn AffectiveReasoner>> {
    match id {
        "keyword" => Ok(Box::new(match table {
            Some(t) => KeywordReasoner::from_table(t)?,
            None => KeywordReasoner::default(),
        })),
        other => Err(Error::Unknown { kind: "reasoner", name: other.to_string() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Speaker, Turn};
    use crate::nn::Parameters;

    fn dialogue(lines: &[(&str, Speaker)]) -> DialogueHistory {
        DialogueHistory::new(lines.iter().map(|(t, s)| Turn { speaker: *s, text: t.to_string() }).collect()).unwrap()
    }

    #[test]
    fn tokenizer_counts_six_for_reference_sentence() {
        assert_eq!(emotion_tokens("The avatar feels happy, warm.").len(), 6);
        assert_eq!(tokenize("Hello,  World!"), ["hello", "world"]);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn keyword_reasoner_rules() {
        let r = KeywordReasoner::default();
        let d = dialogue(&[
            ("I feel such shame about it", Speaker::User),
            ("Tell me more", Speaker::Avatar),
            ("the embarrassment is hard", Speaker::User),
        ]);
        assert_eq!(r.label(&d), "concerned");
        let none = dialogue(&[("the weather today", Speaker::User)]);
        assert_eq!(r.infer(&none), "The avatar feels neutral, attentive.");
        let tie = dialogue(&[("I am so happy", Speaker::User), ("but also scared", Speaker::User)]);
        assert_eq!(r.label(&tie), "fearful");
        let tie2 = dialogue(&[("scared", Speaker::User), ("happy", Speaker::Avatar)]);
        assert_eq!(r.label(&tie2), "happy");
        assert!(KeywordReasoner::from_table("foo bar").is_err());
        assert!(matches!(reasoner("llm", None), Err(Error::Unknown { .. })));
    }

    #[test]
    fn scan_layer_decay_is_validated() {
        let mut rng = seeded(0);
        let mut l = ScanLayer::new(3, 4, &mut rng);
        assert!(l.set_decay(&[0.0, 0.5, 1.0, 0.2]).is_err());
        l.set_decay(&[0.0, -0.5, 0.999, 0.2]).unwrap();
        let d = l.decay();
        assert!((d[2] - 0.999).abs() < 1e-12);
    }

    #[test]
    fn scan_layer_geometric_series() {
        let mut rng = seeded(1);
        let dim = 3;
        let mut l = ScanLayer::new(dim, dim, &mut rng);
        l.set_decay(&[0.999; 3]).unwrap();
        // Constant normalised input of ones: zero norm scale, unit shift.
        l.norm.scale = Tensor::zeros(&[1, dim]);
        l.norm.shift = Tensor::filled(&[1, dim], 1.0);
        l.w_in = Linear::identity(dim, false);
        l.w_gate = Linear::zeros(dim, dim, true);
        l.w_gate.b = Some(Tensor::filled(&[1, dim], 40.0));
        let mut g = Graph::new();
        let mut b = Binder::new();
        b.bind_frozen(&mut g, &l);
        let t = 50;
        let x = g.constant(Tensor::filled(&[t, dim], 1.0));
        let s = l.states(&mut g, &b, x, t);
        let a = l.decay()[0];
        for step in 0..t {
            let want = (1.0 - math::powi(a, step as i32 + 1)) / (1.0 - a);
            assert!((g.value(s).at(&[step, 0]) - want).abs() < 1e-9 * want);
        }
        assert!((a - 0.999).abs() < 1e-15);
    }

    #[test]
    fn zero_output_projection_gives_identity_stack() {
        let mut rng = seeded(2);
        let enc = AudioContextEncoder::new(3, 4, 2, 5, &mut rng).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new();
        b.bind_frozen(&mut g, &enc);
        let x = g.constant(Tensor::randn(&[7, 12], 1.0, &mut rng));
        let fused = enc.fuse(&mut g, &b, x).unwrap();
        let out = enc.encode(&mut g, &b, x).unwrap();
        assert_eq!(g.value(out), g.value(fused));
    }

    #[test]
    fn gca_identity_at_zero_gates() {
        let mut rng = seeded(3);
        let gca = GatedCrossAttention::new(4, 3, 1, &mut rng);
        let mut g = Graph::new();
        let mut b = Binder::new();
        b.bind_frozen(&mut g, &gca);
        let p = g.constant(Tensor::randn(&[5, 4], 1.0, &mut rng));
        let s = g.constant(Tensor::randn(&[2, 3], 1.0, &mut rng));
        let out = gca.forward(&mut g, &b, p, Some(s)).unwrap();
        assert_eq!(g.value(out), g.value(p));
    }

    #[test]
    fn stat_stub_zero_input_gives_bias() {
        let audio = AudioFeatureSeq::new(Tensor::zeros(&[9, 3, 2])).unwrap();
        let visual = VisualTokenSeq::new(Tensor::zeros(&[9, 4, 2]), vec![true; 4]).unwrap();
        let stub = StatStub::new(4, 2, 2, 3, 5);
        let a = understand_behavior(&stub, &visual, &audio, None).unwrap();
        assert_eq!(a.data(), stub.bias.data());
        assert_eq!(a, understand_behavior(&stub, &visual, &audio, None).unwrap());
    }

    #[test]
    fn oracle_stub_marks_label_channel() {
        let audio = AudioFeatureSeq::new(Tensor::zeros(&[3, 1, 1])).unwrap();
        let visual = VisualTokenSeq::new(Tensor::zeros(&[3, 1, 1]), vec![true]).unwrap();
        let stub = understanding_model("oracle_stub", 0, 1, 1, 8, 12).unwrap();
        let s = understand_behavior(stub.as_ref(), &visual, &audio, Some("happy")).unwrap();
        for r in 0..8 {
            let row = s.row(r);
            let arg = (0..12).max_by(|&i, &j| row[i].partial_cmp(&row[j]).unwrap()).unwrap();
            assert_eq!(arg, emotion_index("happy").unwrap());
        }
        assert!(understand_behavior(stub.as_ref(), &visual, &audio, None).is_err());
        assert!(understanding_model("qwen", 0, 1, 1, 8, 12).is_err());
    }

    #[test]
    fn emotion_embedding_rows_follow_tokens() {
        let mut rng = seeded(5);
        let table = Tensor::randn(&[256, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let mut b = Binder::new();
        b.bind_frozen(&mut g, &table);
        let a_ids = emotion_token_ids("The avatar feels happy, warm.", 256);
        let b_ids = emotion_token_ids("The avatar feels sad, warm.", 256);
        let ea = embed_emotion_ids(&mut g, &b, &table, &a_ids).unwrap();
        let eb = embed_emotion_ids(&mut g, &b, &table, &b_ids).unwrap();
        let (va, vb) = (g.value(ea).clone(), g.value(eb).clone());
        for r in 0..6 {
            assert_eq!(va.row(r) == vb.row(r), r != 3, "row {r}");
        }
    }

    #[test]
    fn ablations_build_and_run() {
        let cfg = LcuConfig { audio_dim: 4, visual_dim: 3, state_dim: 4, perception_dim: 4, understanding_dim: 5, understanding_tokens: 2, vocab: 16, emotion_dim: 3, ..LcuConfig::default() };
        let mut rng = seeded(6);
        let audio = AudioFeatureSeq::new(Tensor::randn(&[10, 5, 4], 1.0, &mut rng)).unwrap();
        let visual = VisualTokenSeq::new(Tensor::randn(&[10, 4, 3], 1.0, &mut rng), vec![true, false, true, true]).unwrap();
        let s = Tensor::randn(&[2, 5], 1.0, &mut rng);
        let ids = emotion_token_ids("The avatar feels sad, downcast.", 16);
        for ab in [
            Ablation::default(),
            Ablation { lpe: false, ..Ablation::default() },
            Ablation { hbcu: false, ..Ablation::default() },
            Ablation { lau: false, ..Ablation::default() },
        ] {
            let lcu = Lcu::new(&cfg, ab, &mut rng).unwrap();
            let mut g = Graph::new();
            let mut b = Binder::new();
            b.bind(&mut g, &lcu, "lcu", &|_| true);
            let inp = LcuInputs { user_audio: &audio, user_visual: &visual, current_len: 4, understanding: Some(&s), emotion_tokens: Some(&ids) };
            let out = lcu.forward(&mut g, &b, &inp).unwrap();
            assert_eq!(g.shape(out.f_pu), (4, 4));
            assert_eq!(out.c_emo.is_some(), ab.lau);
            assert!(lcu.num_params() > 0);
        }
    }
}
