//! Region-decoupled cross-attention injection.
//!
//! Two cross-attention streams read the avatar's own audio and the user's
//! perception-understanding features. Lip cells receive only the avatar
//! stream; other face cells receive a per-cell gated blend of both; cells
//! outside the face pass through untouched. The entangled variant used for
//! ablation fuses both conditioning streams into one token sequence and
//! injects it everywhere.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{AttnSpec, Graph, Var};
use crate::datamodel::RegionMasks;
use crate::error::{shape_err, Error, Result};
use crate::impl_parameters;
use crate::nn::{join, AdapterSet, AttentionProj, Binder, LayerNorm, Linear, Parameters};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Per-frame context windows: row `f * (2r+1) + j` holds token `f + j - r`
/// (zero outside the clip) plus slot embedding `j`.
pub fn frame_context(g: &mut Graph, tokens: Var, slots: Var, radius: usize) -> Result<Var> {
    let (t, d) = g.shape(tokens);
    let (k, ds) = g.shape(slots);
    if k != 2 * radius + 1 || ds != d {
        return Err(shape_err("frame_context", format!("slots {k}x{ds} for radius {radius}, width {d}")));
    }
    if t == 0 {
        return Err(Error::Invalid(alloc::string::String::from("context sequence is empty")));
    }
    let padded = if radius > 0 {
        let z = g.constant(Tensor::zeros(&[radius, d]));
        g.concat_rows(&[z, tokens, z])
    } else {
        tokens
    };
    let mut idx = Vec::with_capacity(t * k);
    let mut slot_idx = Vec::with_capacity(t * k);
    for f in 0..t {
        for j in 0..k {
            idx.push(f + j);
            slot_idx.push(j);
        }
    }
    let ctx = g.gather_rows(padded, &idx);
    let pos = g.gather_rows(slots, &slot_idx);
    Ok(g.add(ctx, pos))
}

/// Cross-attention of latent cells over context tokens; `groups` frames of
/// `q_len` cells each attend to their own `kv_len` context rows.
#[allow(clippy::too_many_arguments)]
pub fn cross_attend(
    g: &mut Graph,
    b: &Binder,
    p: &AttentionProj,
    h: Var,
    ctx: Var,
    groups: usize,
    kv_len: usize,
    adapters: Option<&AdapterSet>,
    key: &str,
) -> Result<Var> {
    let (rows, d) = g.shape(h);
    let (crows, cd) = g.shape(ctx);
    if kv_len == 0 || crows == 0 {
        return Err(Error::Invalid(alloc::string::String::from("cross-attention context is empty")));
    }
    let shared = crows == kv_len;
    if groups == 0 || rows % groups != 0 || (!shared && crows != groups * kv_len) || d != p.dim() || cd != p.ctx_dim() {
        return Err(shape_err(
            "cross_attend",
            format!("queries {rows}x{d}, context {crows}x{cd}, groups {groups}, kv_len {kv_len}"),
        ));
    }
    let spec = AttnSpec { groups, q_len: rows / groups, kv_len, heads: p.heads, causal: false, shared_kv: shared };
    Ok(p.forward(g, b, h, ctx, spec, adapters, key))
}

/// Parameters of one decoupled injection block.
#[derive(Clone, Debug, PartialEq)]
pub struct Sdcm {
    pub norm: LayerNorm,
    pub avatar: AttentionProj,
    pub user: AttentionProj,
    pub conv_user: Linear,
    pub conv_avatar: Linear,
    pub gate: Linear,
}

impl_parameters!(Sdcm { norm, avatar, user, conv_user, conv_avatar, gate });

impl Sdcm {
    pub fn new(dim: usize, audio_dim: usize, user_dim: usize, gate_dim: usize, heads: usize, rng: &mut SeededRng) -> Self {
        Self {
            norm: LayerNorm::new(dim),
            avatar: AttentionProj::new(dim, audio_dim, heads, true, rng),
            user: AttentionProj::new(dim, user_dim, heads, true, rng),
            conv_user: Linear::new(dim, gate_dim, true, rng),
            conv_avatar: Linear::new(dim, gate_dim, true, rng),
            gate: Linear::new(2 * gate_dim, 1, true, rng),
        }
    }
}

/// `sigmoid(f_g([f1(h_usr); f2(h_avt)]))`, one value per row (cell).
pub fn spatial_gate(g: &mut Graph, b: &Binder, p: &Sdcm, h_usr: Var, h_avt: Var) -> Result<Var> {
    if g.shape(h_usr) != g.shape(h_avt) {
        return Err(shape_err("spatial_gate", format!("{:?} vs {:?}", g.shape(h_usr), g.shape(h_avt))));
    }
    let u = p.conv_user.forward(g, b, h_usr);
    let a = p.conv_avatar.forward(g, b, h_avt);
    let both = g.concat_cols(&[u, a]);
    let z = p.gate.forward(g, b, both);
    Ok(g.sigmoid(z))
}

/// Mask of `frames` consecutive frames as a `(frames * cells) x 1` column.
pub fn mask_column(mask: &[bool], frames: usize) -> Tensor {
    let cells = mask.len();
    Tensor::from_fn(&[frames * cells, 1], |i| if mask[i % cells] { 1.0 } else { 0.0 })
}

/// Conditioning contexts of the current clip, already windowed per frame.
#[derive(Clone, Copy)]
pub struct InjectionContext {
    pub avatar: Var,
    pub user: Option<Var>,
    pub kv_len: usize,
}

/// Intermediate streams of one decoupled injection, for inspection.
pub struct SdcmTrace {
    pub out: Var,
    pub h_usr: Var,
    pub h_avt: Var,
    pub gate: Var,
}

/// `h + h_avt * M_lip + (g * h_avt + (1 - g) * h_usr) * M_face` over the
/// current-frame rows `h` (`frames * cells` rows). Without a user context the
/// user stream is zero.
#[allow(clippy::too_many_arguments)]
pub fn sdcm_forward(
    g: &mut Graph,
    b: &Binder,
    p: &Sdcm,
    h: Var,
    ctx: &InjectionContext,
    masks: &RegionMasks,
    adapters: Option<&AdapterSet>,
    key: &str,
) -> Result<SdcmTrace> {
    let (rows, d) = g.shape(h);
    let cells = masks.cells();
    if rows % cells != 0 {
        return Err(shape_err("sdcm_forward", format!("{rows} rows not a whole number of {cells}-cell frames")));
    }
    if masks.lip().iter().zip(masks.face()).any(|(&l, &f)| l && f) {
        return Err(Error::Invalid(alloc::string::String::from("lip and face masks overlap")));
    }
    let frames = rows / cells;
    let hn = p.norm.forward(g, b, h);
    let h_avt = cross_attend(g, b, &p.avatar, hn, ctx.avatar, frames, ctx.kv_len, adapters, &join(key, "avatar"))?;
    let h_usr = match ctx.user {
        Some(u) => cross_attend(g, b, &p.user, hn, u, frames, ctx.kv_len, adapters, &join(key, "user"))?,
        None => g.constant(Tensor::zeros(&[rows, d])),
    };
    let gate = spatial_gate(g, b, p, h_usr, h_avt)?;
    let lip = g.constant(mask_column(masks.lip(), frames));
    let face = g.constant(mask_column(masks.face(), frames));
    let h_lip = g.mul_col(h_avt, lip);
    let from_avt = g.mul_col(h_avt, gate);
    let inv = g.affine(gate, -1.0, 1.0);
    let from_usr = g.mul_col(h_usr, inv);
    let blend = g.add(from_avt, from_usr);
    let h_face = g.mul_col(blend, face);
    let out = g.add(h, h_lip);
    let out = g.add(out, h_face);
    Ok(SdcmTrace { out, h_usr, h_avt, gate })
}

/// Single cross-attention over the sum of avatar audio tokens and projected
/// user features, added to every cell.
#[derive(Clone, Debug, PartialEq)]
pub struct EntangledInjection {
    pub norm: LayerNorm,
    pub user_in: Linear,
    pub attn: AttentionProj,
}

impl_parameters!(EntangledInjection { norm, user_in, attn });

impl EntangledInjection {
    pub fn new(dim: usize, audio_dim: usize, user_dim: usize, heads: usize, rng: &mut SeededRng) -> Self {
        Self {
            norm: LayerNorm::new(dim),
            user_in: Linear::zeros(user_dim, audio_dim, true),
            attn: AttentionProj::new(dim, audio_dim, heads, true, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Binder,
        h: Var,
        ctx: &InjectionContext,
        frames: usize,
        adapters: Option<&AdapterSet>,
        key: &str,
    ) -> Result<Var> {
        let fused = match ctx.user {
            Some(u) => {
                let pu = self.user_in.forward(g, b, u);
                g.add(ctx.avatar, pu)
            }
            None => ctx.avatar,
        };
        let hn = self.norm.forward(g, b, h);
        let a = cross_attend(g, b, &self.attn, hn, fused, frames, ctx.kv_len, adapters, &join(key, "attn"))?;
        Ok(g.add(h, a))
    }
}

/// Injection used inside each generator block.
#[derive(Clone, Debug, PartialEq)]
pub enum Injection {
    Decoupled(Sdcm),
    Entangled(EntangledInjection),
}

impl Parameters for Injection {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        match self {
            Injection::Decoupled(p) => p.visit(prefix, f),
            Injection::Entangled(p) => p.visit(prefix, f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Injection::Decoupled(p) => p.visit_mut(prefix, f),
            Injection::Entangled(p) => p.visit_mut(prefix, f),
        }
    }
}

impl Injection {
    /// Output rows for the current frames of `h`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Binder,
        h: Var,
        ctx: &InjectionContext,
        masks: &RegionMasks,
        adapters: Option<&AdapterSet>,
        key: &str,
    ) -> Result<Var> {
        match self {
            Injection::Decoupled(p) => Ok(sdcm_forward(g, b, p, h, ctx, masks, adapters, key)?.out),
            Injection::Entangled(p) => {
                let frames = g.shape(h).0 / masks.cells();
                p.forward(g, b, h, ctx, frames, adapters, key)
            }
        }
    }

    /// Names of the projections that carry stage-2 adapters.
    pub fn adapter_targets(&self) -> Vec<(&'static str, &Linear)> {
        match self {
            Injection::Decoupled(p) => alloc::vec![
                ("avatar.wq", &p.avatar.wq),
                ("avatar.wk", &p.avatar.wk),
                ("avatar.wv", &p.avatar.wv),
                ("user.wq", &p.user.wq),
                ("user.wk", &p.user.wk),
                ("user.wv", &p.user.wv),
            ],
            Injection::Entangled(p) => alloc::vec![("attn.wq", &p.attn.wq), ("attn.wk", &p.attn.wk), ("attn.wv", &p.attn.wv)],
        }
    }
}
