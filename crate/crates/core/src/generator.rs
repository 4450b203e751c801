//! Latent velocity-field generator and the Euler flow sampler.
//!
//! Rows of the latent state are tokens ordered frame-major then cell-major
//! (`frame * H' * W' + row * W' + col`), columns are channels. Previous
//! frames are prefixed along the frame axis; the velocity is produced for the
//! current frames only.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{AttnSpec, Graph, Var};
use crate::datamodel::{latent_to_tokens, ConversationSample, RegionMasks};
use crate::error::{shape_err, Error, Result};
use crate::impl_parameters;
use crate::lcu::Ablation;
use crate::math;
use crate::nn::{join, AdapterSet, AttentionProj, Binder, LayerNorm, Linear, LowRankAdapter, Mlp, Parameters};
use crate::rng::SeededRng;
use crate::sdcm::{frame_context, EntangledInjection, Injection, InjectionContext, Sdcm};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub cur_frames: usize,
    pub prev_frames: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub audio_window: usize,
    pub audio_dim: usize,
    pub user_dim: usize,
    pub emotion_dim: usize,
    pub context_radius: usize,
    pub gate_dim: usize,
    pub time_dim: usize,
    pub ffn_mult: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            height: 8,
            width: 8,
            cur_frames: 16,
            prev_frames: 4,
            model_dim: 64,
            heads: 4,
            blocks: 4,
            audio_window: 5,
            audio_dim: 32,
            user_dim: 16,
            emotion_dim: 16,
            context_radius: 2,
            gate_dim: 8,
            time_dim: 32,
            ffn_mult: 4,
        }
    }
}

impl GeneratorConfig {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.blocks == 0 {
            return bad(String::from("generator needs at least one block"));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad(format!("model width {} not divisible by {} heads", self.model_dim, self.heads));
        }
        if self.channels == 0 || self.height < 4 || self.width < 4 {
            return bad(format!("latent {}x{}x{} too small", self.channels, self.height, self.width));
        }
        if self.cur_frames == 0 || self.time_dim < 2 || self.time_dim % 2 != 0 {
            return bad(String::from("current frames >= 1 and an even time embedding width are required"));
        }
        Ok(())
    }
}

/// One generator block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm_s: LayerNorm,
    pub attn_s: AttentionProj,
    pub norm_t: LayerNorm,
    pub attn_t: AttentionProj,
    pub injection: Injection,
    pub norm_emo: LayerNorm,
    pub emo: AttentionProj,
    pub norm_f: LayerNorm,
    pub ffn: Mlp,
}

impl_parameters!(Block { norm_s, attn_s, norm_t, attn_t, injection, norm_emo, emo, norm_f, ffn });

/// The velocity-field network.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub in_proj: Linear,
    pub cell_pos: Tensor,
    pub frame_pos: Tensor,
    pub time_mlp: Mlp,
    pub audio_fuser: Linear,
    pub avatar_slots: Tensor,
    pub user_pos: Tensor,
    pub blocks: Vec<Block>,
    pub out_norm: LayerNorm,
    pub out_proj: Linear,
    pub config: GeneratorConfig,
}

impl_parameters!(Generator {
    in_proj, cell_pos, frame_pos, time_mlp, audio_fuser, avatar_slots, user_pos, blocks, out_norm, out_proj
});

/// Conditioning of one clip as tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    /// `T_cur x (L_w * D_a)` flattened avatar audio windows.
    pub avatar_audio: Tensor,
    /// `H'W' x C` reference tokens.
    pub ref_tokens: Tensor,
    /// `(T_prev * H'W') x C` previous-frame tokens.
    pub prev_tokens: Tensor,
    /// `T_cur x D_p`.
    pub f_pu: Option<Tensor>,
    /// `N_e x D_e`.
    pub c_emo: Option<Tensor>,
}

/// Conditioning of one clip on the tape.
#[derive(Clone, Copy)]
pub struct CondVars {
    pub avatar_audio: Var,
    pub ref_tokens: Var,
    pub prev_tokens: Option<Var>,
    pub prev_frames: usize,
    pub f_pu: Option<Var>,
    pub c_emo: Option<Var>,
}

/// Packs a sample's conditioning with externally computed `f_pu` / `c_emo`.
pub fn condition_bundle(s: &ConversationSample, f_pu: Option<Tensor>, c_emo: Option<Tensor>) -> Result<ConditioningBundle> {
    let t_cur = s.current_len();
    if s.avatar_audio.frames() != t_cur {
        return Err(shape_err("condition_bundle", format!("{} audio frames vs {t_cur}", s.avatar_audio.frames())));
    }
    if let Some(f) = &f_pu {
        if f.rows() != t_cur {
            return Err(shape_err("condition_bundle", format!("f_pu has {} rows vs {t_cur} frames", f.rows())));
        }
    }
    Ok(ConditioningBundle {
        avatar_audio: s.avatar_audio.flat_windows(),
        ref_tokens: latent_to_tokens(&s.ref_latent),
        prev_tokens: s.prev_frames.to_tokens(),
        f_pu,
        c_emo,
    })
}

impl ConditioningBundle {
    pub fn to_vars(&self, g: &mut Graph, cells: usize) -> CondVars {
        let prev_frames = self.prev_tokens.rows() / cells;
        CondVars {
            avatar_audio: g.constant(self.avatar_audio.clone()),
            ref_tokens: g.constant(self.ref_tokens.clone()),
            prev_tokens: (prev_frames > 0).then(|| g.constant(self.prev_tokens.clone())),
            prev_frames,
            f_pu: self.f_pu.as_ref().map(|t| g.constant(t.clone())),
            c_emo: self.c_emo.as_ref().map(|t| g.constant(t.clone())),
        }
    }
}

/// Output of a forward pass.
pub struct GeneratorOutput {
    /// `(T_cur * H'W') x C` velocity.
    pub velocity: Var,
    /// Per block, the current-frame rows of the block output.
    pub features: Vec<Var>,
}

/// Sinusoidal embedding of the flow time `t` in `[0, 1]`.
pub fn time_features(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn(&[1, dim], |i| {
        let k = i % half;
        let freq = math::exp(-math::ln(1000.0) * k as f64 / half as f64);
        let a = 100.0 * t * freq;
        if i < half {
            math::sin(a)
        } else {
            math::cos(a)
        }
    })
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig, ablation: Ablation, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let k = 2 * cfg.context_radius + 1;
        let blocks = (0..cfg.blocks)
            .map(|_| Block {
                norm_s: LayerNorm::new(d),
                attn_s: AttentionProj::new(d, d, cfg.heads, false, rng),
                norm_t: LayerNorm::new(d),
                attn_t: AttentionProj::new(d, d, cfg.heads, false, rng),
                injection: if ablation.sdcm {
                    Injection::Decoupled(Sdcm::new(d, cfg.audio_dim, cfg.user_dim, cfg.gate_dim, cfg.heads, rng))
                } else {
                    Injection::Entangled(EntangledInjection::new(d, cfg.audio_dim, cfg.user_dim, cfg.heads, rng))
                },
                norm_emo: LayerNorm::new(d),
                emo: AttentionProj::new(d, cfg.emotion_dim, cfg.heads, true, rng),
                norm_f: LayerNorm::new(d),
                ffn: Mlp::new(d, cfg.ffn_mult * d, d, rng),
            })
            .collect();
        Ok(Self {
            in_proj: Linear::new(2 * cfg.channels, d, true, rng),
            cell_pos: Tensor::randn(&[cfg.cells(), d], 0.5, rng),
            frame_pos: Tensor::randn(&[cfg.prev_frames + cfg.cur_frames, d], 0.5, rng),
            time_mlp: Mlp::new(cfg.time_dim, d, d, rng),
            audio_fuser: Linear::new(cfg.audio_window * cfg.audio_dim, cfg.audio_dim, true, rng),
            avatar_slots: Tensor::randn(&[k, cfg.audio_dim], 0.5, rng),
            user_pos: Tensor::randn(&[k, cfg.user_dim], 0.5, rng),
            blocks,
            out_norm: LayerNorm::new(d),
            out_proj: Linear::new(d, cfg.channels, true, rng),
            config: cfg.clone(),
        })
    }

    pub fn is_decoupled(&self) -> bool {
        matches!(self.blocks[0].injection, Injection::Decoupled(_))
    }

    /// Zero-delta adapters on the query and key/value projections of every
    /// injection stream and, when `emotion` is set, the emotion attention.
    pub fn fresh_adapters(&self, rank: usize, scale: f64, emotion: bool, rng: &mut SeededRng) -> Result<AdapterSet> {
        let mut set = AdapterSet::new();
        for (i, blk) in self.blocks.iter().enumerate() {
            let base = format!("blocks.{i}");
            let mut targets: Vec<(String, &Linear)> = blk
                .injection
                .adapter_targets()
                .into_iter()
                .map(|(n, l)| (join(&join(&base, "injection"), n), l))
                .collect();
            if emotion {
                for (n, l) in [("wq", &blk.emo.wq), ("wk", &blk.emo.wk), ("wv", &blk.emo.wv)] {
                    targets.push((join(&join(&base, "emo"), n), l));
                }
            }
            for (name, lin) in targets {
                let a = LowRankAdapter::new(&name, lin.input_dim(), lin.output_dim(), rank, scale, rng)?;
                set.insert(name, a);
            }
        }
        Ok(set)
    }

    /// Velocity at `x` (current-frame tokens) and flow time `t`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Binder,
        x: Var,
        t: f64,
        cond: &CondVars,
        masks: &RegionMasks,
        adapters: Option<&AdapterSet>,
    ) -> Result<GeneratorOutput> {
        let cfg = &self.config;
        let cells = cfg.cells();
        let c = cfg.channels;
        let t_cur = cfg.cur_frames;
        if g.shape(x) != (t_cur * cells, c) {
            return Err(shape_err("generator_forward", format!("state {:?} vs {}x{c}", g.shape(x), t_cur * cells)));
        }
        if masks.cells() != cells {
            return Err(shape_err("generator_forward", format!("masks cover {} cells vs {cells}", masks.cells())));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Invalid(format!("flow time {t} outside [0, 1]")));
        }
        let t_prev = cond.prev_frames;
        if t_prev > cfg.prev_frames {
            return Err(shape_err("generator_forward", format!("{t_prev} previous frames vs capacity {}", cfg.prev_frames)));
        }
        if g.shape(cond.ref_tokens) != (cells, c) || g.shape(cond.avatar_audio) != (t_cur, self.audio_fuser.input_dim()) {
            return Err(shape_err(
                "generator_forward",
                format!("reference {:?}, audio {:?}", g.shape(cond.ref_tokens), g.shape(cond.avatar_audio)),
            ));
        }
        let frames = t_prev + t_cur;
        let rows = frames * cells;
        let state = match cond.prev_tokens {
            Some(p) if t_prev > 0 => {
                if g.shape(p) != (t_prev * cells, c) {
                    return Err(shape_err("generator_forward", format!("previous tokens {:?}", g.shape(p))));
                }
                g.concat_rows(&[p, x])
            }
            _ => x,
        };
        let cell_idx: Vec<usize> = (0..rows).map(|r| r % cells).collect();
        let reference = g.gather_rows(cond.ref_tokens, &cell_idx);
        let inp = g.concat_cols(&[state, reference]);
        let mut h = self.in_proj.forward(g, b, inp);
        let cp = g.gather_rows(b.var(&self.cell_pos), &cell_idx);
        h = g.add(h, cp);
        let offset = cfg.prev_frames - t_prev;
        let frame_idx: Vec<usize> = (0..rows).map(|r| offset + r / cells).collect();
        let fp = g.gather_rows(b.var(&self.frame_pos), &frame_idx);
        h = g.add(h, fp);
        let tf = g.constant(time_features(t, cfg.time_dim));
        let temb = self.time_mlp.forward(g, b, tf);
        h = g.add_row(h, temb);

        let audio = self.audio_fuser.forward(g, b, cond.avatar_audio);
        let avatar_ctx = frame_context(g, audio, b.var(&self.avatar_slots), cfg.context_radius)?;
        let user_ctx = match cond.f_pu {
            Some(f) => {
                if g.shape(f) != (t_cur, cfg.user_dim) {
                    return Err(shape_err("generator_forward", format!("f_pu {:?} vs {t_cur}x{}", g.shape(f), cfg.user_dim)));
                }
                Some(frame_context(g, f, b.var(&self.user_pos), cfg.context_radius)?)
            }
            None => None,
        };
        let ctx = InjectionContext { avatar: avatar_ctx, user: user_ctx, kv_len: 2 * cfg.context_radius + 1 };

        let perm: Vec<usize> = (0..rows).map(|i| (i % frames) * cells + i / frames).collect();
        let inv: Vec<usize> = (0..rows).map(|r| (r % cells) * frames + r / cells).collect();
        let mut features = Vec::with_capacity(self.blocks.len());
        for (i, blk) in self.blocks.iter().enumerate() {
            let key = format!("blocks.{i}");
            let hn = blk.norm_s.forward(g, b, h);
            let spec = AttnSpec { groups: frames, q_len: cells, kv_len: cells, heads: 1, causal: false, shared_kv: false };
            let a = blk.attn_s.forward(g, b, hn, hn, spec, None, "");
            h = g.add(h, a);

            let hn = blk.norm_t.forward(g, b, h);
            let ht = g.gather_rows(hn, &perm);
            let spec = AttnSpec { groups: cells, q_len: frames, kv_len: frames, heads: 1, causal: true, shared_kv: false };
            let a = blk.attn_t.forward(g, b, ht, ht, spec, None, "");
            let a = g.gather_rows(a, &inv);
            h = g.add(h, a);

            let cur = g.slice_rows(h, t_prev * cells, t_cur * cells);
            let cur = blk.injection.forward(g, b, cur, &ctx, masks, adapters, &join(&key, "injection"))?;
            h = if t_prev > 0 {
                let prev = g.slice_rows(h, 0, t_prev * cells);
                g.concat_rows(&[prev, cur])
            } else {
                cur
            };

            if let Some(e) = cond.c_emo {
                let (ne, de) = g.shape(e);
                if de != cfg.emotion_dim || ne == 0 {
                    return Err(shape_err("generator_forward", format!("c_emo {ne}x{de} vs width {}", cfg.emotion_dim)));
                }
                let hn = blk.norm_emo.forward(g, b, h);
                let spec = AttnSpec { groups: 1, q_len: rows, kv_len: ne, heads: 1, causal: false, shared_kv: true };
                let a = blk.emo.forward(g, b, hn, e, spec, adapters, &join(&key, "emo"));
                h = g.add(h, a);
            }

            let hn = blk.norm_f.forward(g, b, h);
            let f = blk.ffn.forward(g, b, hn);
            h = g.add(h, f);
            features.push(g.slice_rows(h, t_prev * cells, t_cur * cells));
        }
        let cur = *features.last().expect("at least one block");
        let hn = self.out_norm.forward(g, b, cur);
        let velocity = self.out_proj.forward(g, b, hn);
        Ok(GeneratorOutput { velocity, features })
    }

    /// Tape-free velocity evaluation.
    pub fn velocity(
        &self,
        x: &Tensor,
        t: f64,
        cond: &ConditioningBundle,
        masks: &RegionMasks,
        adapters: Option<&AdapterSet>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::new();
        b.bind_frozen(&mut g, self);
        if let Some(a) = adapters {
            b.bind_frozen(&mut g, a);
        }
        let cv = cond.to_vars(&mut g, self.config.cells());
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &b, xv, t, &cv, masks, adapters)?;
        Ok(g.value(out.velocity).clone())
    }
}

/// Euler integration of `dx/dt = v(x, t)` from `t = 0` to `1` on the grid
/// `t_k = k / n_steps`.
pub fn flow_sample(
    x0: &Tensor,
    n_steps: usize,
    mut field: impl FnMut(&Tensor, f64) -> Result<Tensor>,
) -> Result<Tensor> {
    if n_steps == 0 {
        return Err(Error::Config(String::from("flow sampler needs at least one step")));
    }
    let dt = 1.0 / n_steps as f64;
    let mut x = x0.clone();
    for k in 0..n_steps {
        let t = k as f64 / n_steps as f64;
        let v = field(&x, t)?;
        if v.shape() != x.shape() {
            return Err(shape_err("flow_sample", format!("field {:?} vs state {:?}", v.shape(), x.shape())));
        }
        if !v.all_finite() {
            return Err(Error::NonFinite(format!("velocity at step {k}")));
        }
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += dt * vi;
        }
    }
    Ok(x)
}

/// A generator whose velocity is the constant `delta` everywhere: every weight
/// is zero except the output bias.
pub fn constant_field_generator(cfg: &GeneratorConfig, delta: &[f64], rng: &mut SeededRng) -> Result<Generator> {
    if delta.len() != cfg.channels {
        return Err(shape_err("constant_field_generator", format!("{} values for {} channels", delta.len(), cfg.channels)));
    }
    let mut gen = Generator::new(cfg, Ablation::default(), rng)?;
    gen.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
    gen.out_proj.b = Some(Tensor::new(&[1, cfg.channels], delta.to_vec())?);
    Ok(gen)
}
