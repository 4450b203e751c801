//! Central finite-difference checks of every differentiable building block.
//!
//! Each case draws a small random instance, reduces its output to a scalar
//! with a fixed random weighting, and compares tape gradients of all inputs
//! and parameters against `(f(x + eps) - f(x - eps)) / 2 eps`. The error of a
//! tensor is `max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf, 1e-12)`.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::datamodel::{build_region_masks, MaskLayout, Rect, RegionMasks};
use crate::error::{Error, Result};
use crate::generator::{CondVars, Generator, GeneratorConfig};
use crate::lcu::{Ablation, GatedCrossAttention, GatedModulation, ScanLayer};
use crate::nn::{AttentionProj, Binder, Linear, Parameters};
use crate::rng::{derive_seed, seeded, SeededRng};
use crate::sdcm::{cross_attend, sdcm_forward, spatial_gate, InjectionContext, Sdcm};
use crate::tensor::Tensor;
use crate::training::{flow_loss, hfa_loss, pixel_loss};

/// Tolerance for smooth nonlinear operations.
pub const TOL_NONLINEAR: f64 = 1e-4;
/// Tolerance for operations that are at most quadratic in every input, where
/// central differences are exact up to rounding.
pub const TOL_LINEAR: f64 = 1e-9;

/// Every registered operation, in report order.
pub const OPS: [&str; 11] = [
    "linear_map",
    "scan_layer",
    "gated_residual_modulate",
    "gca_fuse",
    "cross_attend",
    "spatial_gate",
    "sdcm_forward",
    "generator_forward",
    "flow_matching_loss",
    "pixel_loss",
    "hfa_loss",
];

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub seed: u64,
    /// Step for nonlinear cases; at-most-quadratic cases use `eps_linear`.
    pub eps: f64,
    pub eps_linear: f64,
    /// Scales the analytic gradient of the named operation by 1.01
    /// (exercises the failure path).
    pub fault: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { seed: 7, eps: 1e-5, eps_linear: 1e-3, fault: None }
    }
}

type Build<'a, P> = dyn Fn(&mut Graph, &Binder, &P, &[Var]) -> Result<Var> + 'a;

fn randomize<P: Parameters>(p: &mut P, std: f64, rng: &mut SeededRng) {
    p.visit_mut("", &mut |_, t| {
        let r = Tensor::randn(t.shape(), std, rng);
        t.data_mut().copy_from_slice(r.data());
    });
}

fn weighted(g: &mut Graph, out: Var, weights: &Tensor) -> Var {
    let w = g.constant(weights.clone());
    let m = g.mul(out, w);
    g.sum_all(m)
}

fn eval<P: Parameters>(module: &P, inputs: &[Tensor], build: &Build<'_, P>, weights: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let mut b = Binder::new();
    b.bind_frozen(&mut g, module);
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &b, module, &vars)?;
    let l = weighted(&mut g, out, weights);
    Ok(g.scalar(l))
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let scale = a.iter().chain(n).fold(1e-12f64, |m, x| m.max(x.abs()));
    a.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Checks one case; returns the worst tensor error and the number of
/// scalar entries compared.
fn check_case<P: Parameters + Clone>(
    module: &P,
    inputs: &[Tensor],
    build: &Build<'_, P>,
    eps: f64,
    corrupt: bool,
    rng: &mut SeededRng,
) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let mut b = Binder::new();
    b.bind(&mut g, module, "", &|_| true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &b, module, &vars)?;
    let (r, c) = g.shape(out);
    let weights = Tensor::randn(&[r, c], 1.0, rng);
    let l = weighted(&mut g, out, &weights);
    let grads = g.backward(l);
    let pgrads = b.collect(&grads, module, "");
    let factor = if corrupt { 1.01 } else { 1.0 };

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, t) in module.named_tensors() {
        let analytic: Vec<f64> = match pgrads.get(&name) {
            Some(gr) => gr.data().iter().map(|x| x * factor).collect(),
            None => alloc::vec![0.0; t.len()],
        };
        let mut numeric = Vec::with_capacity(t.len());
        for e in 0..t.len() {
            let mut f = [0.0; 2];
            for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
                let mut m = module.clone();
                m.visit_mut("", &mut |n, x| {
                    if n == name {
                        x.data_mut()[e] += sign * eps;
                    }
                });
                f[s] = eval(&m, inputs, build, &weights)?;
            }
            numeric.push((f[0] - f[1]) / (2.0 * eps));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
        checked += t.len();
    }
    for (slot, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*v) {
            Some(gr) => gr.data().iter().map(|x| x * factor).collect(),
            None => alloc::vec![0.0; inputs[slot].len()],
        };
        let mut numeric = Vec::with_capacity(inputs[slot].len());
        for e in 0..inputs[slot].len() {
            let mut f = [0.0; 2];
            for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
                let mut xs = inputs.to_vec();
                xs[slot].data_mut()[e] += sign * eps;
                f[s] = eval(module, &xs, build, &weights)?;
            }
            numeric.push((f[0] - f[1]) / (2.0 * eps));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
        checked += inputs[slot].len();
    }
    Ok((worst, checked))
}

fn small_masks() -> Result<RegionMasks> {
    build_region_masks(4, 4, &MaskLayout { face: Rect::new(1, 2, 1, 2), lip: Rect::new(2, 2, 1, 2) })
}

fn tiny_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        channels: 2,
        height: 4,
        width: 4,
        cur_frames: 3,
        prev_frames: 1,
        model_dim: 4,
        heads: 2,
        blocks: 1,
        audio_window: 3,
        audio_dim: 2,
        user_dim: 3,
        emotion_dim: 3,
        context_radius: 1,
        gate_dim: 2,
        time_dim: 4,
        ffn_mult: 2,
    }
}

/// Runs one registered case by name.
pub fn run_op(name: &str, opts: &GradCheckOptions) -> Result<OpReport> {
    let idx = OPS.iter().position(|&o| o == name).ok_or_else(|| Error::Unknown { kind: "gradcheck op", name: name.into() })?;
    let mut rng = seeded(derive_seed(opts.seed, idx as u64));
    let corrupt = opts.fault.as_deref() == Some(name);
    let rn = |shape: &[usize], rng: &mut SeededRng| Tensor::randn(shape, 1.0, rng);
    let linear = matches!(name, "linear_map" | "flow_matching_loss" | "pixel_loss" | "hfa_loss");
    let eps = if linear { opts.eps_linear } else { opts.eps };
    let (err, checked) = match name {
        "linear_map" => {
            let mut m = Linear::new(4, 3, true, &mut rng);
            randomize(&mut m, 1.0, &mut rng);
            let x = rn(&[5, 4], &mut rng);
            let f: Box<Build<'_, Linear>> = Box::new(|g, b, m, v| Ok(m.forward(g, b, v[0])));
            check_case(&m, &[x], &*f, eps, corrupt, &mut rng)?
        }
        "scan_layer" => {
            let mut m = ScanLayer::new(3, 4, &mut rng);
            randomize(&mut m, 0.5, &mut rng);
            let x = rn(&[12, 3], &mut rng);
            let f: Box<Build<'_, ScanLayer>> = Box::new(|g, b, m, v| Ok(m.forward(g, b, v[0], 6)));
            check_case(&m, &[x], &*f, eps, corrupt, &mut rng)?
        }
        "gated_residual_modulate" => {
            let mut m = GatedModulation::new(3, &mut rng);
            randomize(&mut m, 0.7, &mut rng);
            let cur = rn(&[4 * 3, 3], &mut rng);
            let ctx = rn(&[4, 3], &mut rng);
            let f: Box<Build<'_, GatedModulation>> = Box::new(|g, b, m, v| m.forward(g, b, v[0], v[1], 3));
            check_case(&m, &[cur, ctx], &*f, eps, corrupt, &mut rng)?
        }
        "gca_fuse" => {
            let mut m = GatedCrossAttention::new(4, 3, 1, &mut rng);
            randomize(&mut m, 0.7, &mut rng);
            let p = rn(&[5, 4], &mut rng);
            let s = rn(&[3, 3], &mut rng);
            let f: Box<Build<'_, GatedCrossAttention>> = Box::new(|g, b, m, v| m.forward(g, b, v[0], Some(v[1])));
            check_case(&m, &[p, s], &*f, eps, corrupt, &mut rng)?
        }
        "cross_attend" => {
            let mut m = AttentionProj::new(4, 3, 2, true, &mut rng);
            randomize(&mut m, 0.7, &mut rng);
            let h = rn(&[2 * 5, 4], &mut rng);
            let ctx = rn(&[2 * 3, 3], &mut rng);
            let f: Box<Build<'_, AttentionProj>> = Box::new(|g, b, m, v| cross_attend(g, b, m, v[0], v[1], 2, 3, None, ""));
            check_case(&m, &[h, ctx], &*f, eps, corrupt, &mut rng)?
        }
        "spatial_gate" => {
            let mut m = Sdcm::new(4, 3, 3, 2, 2, &mut rng);
            randomize(&mut m, 0.7, &mut rng);
            let hu = rn(&[6, 4], &mut rng);
            let ha = rn(&[6, 4], &mut rng);
            let f: Box<Build<'_, Sdcm>> = Box::new(|g, b, m, v| spatial_gate(g, b, m, v[0], v[1]));
            check_case(&m, &[hu, ha], &*f, eps, corrupt, &mut rng)?
        }
        "sdcm_forward" => {
            let masks = small_masks()?;
            let mut m = Sdcm::new(4, 3, 3, 2, 2, &mut rng);
            randomize(&mut m, 0.7, &mut rng);
            let h = rn(&[2 * 16, 4], &mut rng);
            let a = rn(&[2 * 3, 3], &mut rng);
            let u = rn(&[2 * 3, 3], &mut rng);
            let f: Box<Build<'_, Sdcm>> = Box::new(move |g, b, m, v| {
                let ctx = InjectionContext { avatar: v[1], user: Some(v[2]), kv_len: 3 };
                Ok(sdcm_forward(g, b, m, v[0], &ctx, &masks, None, "")?.out)
            });
            check_case(&m, &[h, a, u], &*f, eps, corrupt, &mut rng)?
        }
        "generator_forward" => {
            let cfg = tiny_generator_config();
            let masks = small_masks()?;
            let mut m = Generator::new(&cfg, Ablation::default(), &mut rng)?;
            randomize(&mut m, 0.5, &mut rng);
            let cells = cfg.cells();
            let x = rn(&[cfg.cur_frames * cells, cfg.channels], &mut rng);
            let audio = rn(&[cfg.cur_frames, cfg.audio_window * cfg.audio_dim], &mut rng);
            let refs = rn(&[cells, cfg.channels], &mut rng);
            let prev = rn(&[cfg.prev_frames * cells, cfg.channels], &mut rng);
            let fpu = rn(&[cfg.cur_frames, cfg.user_dim], &mut rng);
            let emo = rn(&[2, cfg.emotion_dim], &mut rng);
            let prev_frames = cfg.prev_frames;
            let f: Box<Build<'_, Generator>> = Box::new(move |g, b, m, v| {
                let cond = CondVars {
                    avatar_audio: v[1],
                    ref_tokens: v[2],
                    prev_tokens: Some(v[3]),
                    prev_frames,
                    f_pu: Some(v[4]),
                    c_emo: Some(v[5]),
                };
                Ok(m.forward(g, b, v[0], 0.37, &cond, &masks, None)?.velocity)
            });
            check_case(&m, &[x, audio, refs, prev, fpu, emo], &*f, eps, corrupt, &mut rng)?
        }
        "flow_matching_loss" => {
            let v = rn(&[6, 3], &mut rng);
            let t = rn(&[6, 3], &mut rng);
            let f: Box<Build<'_, Tensor>> = Box::new(|g, _, _, v| Ok(flow_loss(g, v[0], v[1])));
            check_case(&Tensor::zeros(&[0]), &[v, t], &*f, eps, corrupt, &mut rng)?
        }
        "pixel_loss" => {
            let (frames, l, m) = (2, 6, 5);
            let a = rn(&[frames * 3, 2], &mut rng);
            let b0 = rn(&[frames * 3, 2], &mut rng);
            let dec = rn(&[l, m], &mut rng);
            let f: Box<Build<'_, Tensor>> = Box::new(move |g, _, _, v| pixel_loss(g, v[0], v[1], frames, v[2]));
            check_case(&Tensor::zeros(&[0]), &[a, b0, dec], &*f, eps, corrupt, &mut rng)?
        }
        "hfa_loss" => {
            let cells = 3;
            let w = [0.2, 1.0];
            let s0 = rn(&[2 * cells, 4], &mut rng);
            let s1 = rn(&[2 * cells, 4], &mut rng);
            let r0 = rn(&[2 * cells, 4], &mut rng);
            let r1 = rn(&[2 * cells, 4], &mut rng);
            let f: Box<Build<'_, Tensor>> =
                Box::new(move |g, _, _, v| hfa_loss(g, &[v[0], v[1]], &[v[2], v[3]], &[0, 1], &w, cells));
            check_case(&Tensor::zeros(&[0]), &[s0, s1, r0, r1], &*f, eps, corrupt, &mut rng)?
        }
        _ => unreachable!("op list and dispatch agree"),
    };
    let tolerance = if linear { TOL_LINEAR } else { TOL_NONLINEAR };
    Ok(OpReport { name: name.into(), max_rel_err: err, tolerance, checked, passed: err <= tolerance && err.is_finite() })
}

/// Runs every registered case once, in [`OPS`] order.
pub fn run_suite(opts: &GradCheckOptions) -> Result<Vec<OpReport>> {
    OPS.iter().map(|op| run_op(op, opts)).collect()
}
