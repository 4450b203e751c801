//! Acceptance suite: runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each. The long training runs of criteria 8 and 9 are
//! part of it, so expect tens of minutes on one core.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use echo::commands::{self, load_checkpoint, load_dataset, prepare_all};
use echo::runner::PoolRunner;
use echo::Config;
use echo_core::autodiff::Graph;
use echo_core::datamodel::{build_region_masks, AudioFeatureSeq, MaskLayout, MotionSeq, MotionSplit, Rect};
use echo_core::generator::{constant_field_generator, flow_sample};
use echo_core::gradcheck::{run_suite, GradCheckOptions};
use echo_core::heldout::{heldout_report, HeldoutConfig, HeldoutReport};
use echo_core::lcu::{scan_stack, AudioContextEncoder, Lcu, ScanLayer};
use echo_core::metrics::{self, frechet_distance, kmeans, oracle, KMeansConfig};
use echo_core::nn::{Binder, Parameters};
use echo_core::pipeline::EchoModel;
use echo_core::rng::{derive_seed, seeded, SeededRng};
use echo_core::scan::linear_recurrence;
use echo_core::sdcm::{sdcm_forward, InjectionContext, Sdcm};
use echo_core::synthdata::SynthWorld;
use echo_core::tensor::Tensor;
use echo_core::training::{rms_frame_weights, stage2_init, stage2_sample_grad};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

fn bitwise(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn randomize(p: &mut (impl Parameters + ?Sized), sd: f64, rng: &mut SeededRng) {
    p.visit_mut("", &mut |_, t| {
        let r = Tensor::randn(t.shape(), sd, rng);
        t.data_mut().copy_from_slice(r.data());
    });
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let reports = run_suite(&GradCheckOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    let want = [
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
    for name in want {
        let r = reports.iter().find(|r| r.name == name).ok_or(format!("{name} not registered"))?;
        check(r.tolerance <= 1e-4, format!("{name}: tolerance {:e}", r.tolerance))?;
        check(r.passed && r.max_rel_err <= r.tolerance, format!("{name}: rel err {:.2e} > {:.0e}", r.max_rel_err, r.tolerance))?;
    }
    check(elapsed <= Duration::from_secs(120), format!("took {elapsed:?}"))?;
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(format!("{} ops, worst rel err {worst:.1e}, {:.1}s", reports.len(), elapsed.as_secs_f64()))
}

struct SdcmCase {
    module: Sdcm,
    masks: echo_core::datamodel::RegionMasks,
    h: Tensor,
    avatar: Tensor,
    user: Tensor,
    kv: usize,
}

fn sdcm_case(rng: &mut SeededRng, trained: bool) -> SdcmCase {
    let (height, width) = (rng.random_range(4..7), rng.random_range(4..7));
    let (r0, c0) = (rng.random_range(0..height - 1), rng.random_range(0..width - 2));
    let layout = MaskLayout { face: Rect::new(r0, height - 1, c0, width - 1), lip: Rect::new(height - 1, height - 1, c0 + 1, width - 1) };
    let masks = build_region_masks(height, width, &layout).unwrap();
    let dim = 2 * rng.random_range(1..4);
    let (audio_dim, user_dim) = (rng.random_range(1..5), rng.random_range(1..5));
    let (frames, kv) = (rng.random_range(1..4), rng.random_range(1..4));
    let mut module = Sdcm::new(dim, audio_dim, user_dim, 2, 2, rng);
    if trained {
        randomize(&mut module, 0.7, rng);
    }
    SdcmCase {
        h: Tensor::randn(&[frames * masks.cells(), dim], 1.0, rng),
        avatar: Tensor::randn(&[frames * kv, audio_dim], 1.0, rng),
        user: Tensor::randn(&[frames * kv, user_dim], 1.0, rng),
        module,
        masks,
        kv,
    }
}

fn sdcm_run(c: &SdcmCase, user: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let mut b = Binder::new();
    b.bind_frozen(&mut g, &c.module);
    let h = g.constant(c.h.clone());
    let avatar = g.constant(c.avatar.clone());
    let user = g.constant(user.clone());
    let ctx = InjectionContext { avatar, user: Some(user), kv_len: c.kv };
    let out = sdcm_forward(&mut g, &b, &c.module, h, &ctx, &c.masks, None, "").unwrap().out;
    g.value(out).clone()
}

fn lip_decoupling() -> Outcome {
    for case in 0..100u64 {
        let mut rng = seeded(derive_seed(0x5dc, case));
        let c = sdcm_case(&mut rng, true);
        let base = sdcm_run(&c, &c.user);
        let moved = Tensor::from_fn(c.user.shape(), |i| c.user.data()[i] + rng.random_range(0.5..2.0));
        let out = sdcm_run(&c, &moved);
        let (cells, dim) = (c.masks.cells(), c.h.dim(1));
        let mut face_changed = false;
        for r in 0..c.h.dim(0) {
            let (a, b) = (&base.data()[r * dim..(r + 1) * dim], &out.data()[r * dim..(r + 1) * dim]);
            let cell = r % cells;
            if c.masks.lip()[cell] {
                check(bitwise(a, b), format!("case {case}: lip cell {cell} moved"))?;
            } else if c.masks.face()[cell] && a != b {
                face_changed = true;
            }
        }
        check(face_changed, format!("case {case}: no face cell responded"))?;

        let fresh = sdcm_case(&mut rng, false);
        check(sdcm_run(&fresh, &fresh.user) == fresh.h, format!("case {case}: zero projections are not identity"))?;
    }
    Ok(String::from("100 instances: lip cells bit-identical, face cells respond, zero init is identity"))
}

fn sequential(z: &[f64], a: &[f64], len: usize, dim: usize, seq_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for c in 0..dim {
        let mut s = 0.0;
        for t in 0..len {
            if t % seq_len == 0 {
                s = 0.0;
            }
            s = a[c] * s + z[t * dim + c];
            out[t * dim + c] = s;
        }
    }
    out
}

fn scan_equivalence() -> Outcome {
    for case in 0..1000u64 {
        let mut rng = seeded(derive_seed(0x5ca, case));
        let len = rng.random_range(1..70);
        let dim = rng.random_range(1..21);
        let a: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.999..0.999)).collect();
        let z: Vec<f64> = (0..len * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut out = vec![0.0; len * dim];
        linear_recurrence(&z, &a, &mut out, len, dim);
        check(bitwise(&out, &sequential(&z, &a, len, dim, len)), format!("kernel case {case}"))?;

        let (dim, state) = (rng.random_range(1..7), rng.random_range(1..9));
        let (seqs, seq_len) = (rng.random_range(1..4), rng.random_range(1..25));
        let mut layer = ScanLayer::new(dim, state, &mut rng);
        randomize(&mut layer, 0.8, &mut rng);
        let x = Tensor::randn(&[seqs * seq_len, dim], 1.0, &mut rng);
        let mut g = Graph::new();
        let mut b = Binder::new();
        b.bind_frozen(&mut g, &layer);
        let xv = g.constant(x);
        let s = layer.states(&mut g, &b, xv, seq_len);
        let xn = layer.norm.forward(&mut g, &b, xv);
        let u = layer.w_in.forward(&mut g, &b, xn);
        let gate = layer.w_gate.forward(&mut g, &b, xn);
        let gate = g.sigmoid(gate);
        let gate = g.mul_row(gate, b.var(&layer.b));
        let z = g.mul(gate, u);
        let want = sequential(g.value(z).data(), &layer.decay(), seqs * seq_len, state, seq_len);
        check(bitwise(g.value(s).data(), &want), format!("scan layer case {case}"))?;
    }

    let mut rng = seeded(0xca5);
    let mut enc = AudioContextEncoder::new(5, 6, 2, 8, &mut rng).unwrap();
    randomize(&mut enc, 0.5, &mut rng);
    let (t, width) = (20, 30);
    let x = Tensor::randn(&[t, width], 1.0, &mut rng);
    let run = |x: &Tensor| {
        let mut g = Graph::new();
        let mut b = Binder::new();
        b.bind_frozen(&mut g, &enc);
        let v = g.constant(x.clone());
        let out = enc.encode(&mut g, &b, v).unwrap();
        g.value(out).clone()
    };
    let base = run(&x);
    let cols = base.dim(1);
    for k in [0, 7, 19] {
        let mut y = x.clone();
        y.data_mut()[k * width..(k + 1) * width].iter_mut().for_each(|v| *v += 1.0);
        let out = run(&y);
        check(out.data()[..k * cols] == base.data()[..k * cols], format!("audio encoder: frame {k} leaks backwards"))?;
        check(out.data()[k * cols..(k + 1) * cols] != base.data()[k * cols..(k + 1) * cols], format!("audio encoder ignores frame {k}"))?;
    }

    let mut layers: Vec<ScanLayer> = (0..2).map(|_| ScanLayer::new(4, 6, &mut rng)).collect();
    randomize(&mut layers, 0.5, &mut rng);
    let (t, tokens, dim) = (12, 3, 4);
    let x = Tensor::randn(&[t * tokens, dim], 1.0, &mut rng);
    let run = |x: &Tensor| {
        let mut g = Graph::new();
        let mut b = Binder::new();
        b.bind_frozen(&mut g, &layers);
        let v = g.constant(x.clone());
        let out = scan_stack(&mut g, &b, &layers, v, t * tokens);
        g.value(out).clone()
    };
    let base = run(&x);
    for k in [0, 5, 11] {
        let mut y = x.clone();
        y.data_mut()[(k * tokens + 1) * dim] += 1.0;
        let out = run(&y);
        let row = k * tokens * dim;
        check(out.data()[..row] == base.data()[..row], format!("visual encoder: frame {k} leaks backwards"))?;
        check(out.data()[row..] != base.data()[row..], format!("visual encoder ignores frame {k}"))?;
    }
    Ok(String::from("1000 kernel + 1000 layer cases bit-exact; both encoders causal"))
}

fn random_seq(frames: usize, rng: &mut SeededRng) -> MotionSeq {
    MotionSeq::new(Tensor::randn(&[frames, 56], 1.0, rng)).unwrap()
}

fn metric_oracles() -> Outcome {
    let mut rng = seeded(0x0e7);
    let user = random_seq(40, &mut rng);
    let gt = random_seq(40, &mut rng);
    let r = metrics::rpcc(&gt, &gt, &user).map_err(|e| e.to_string())?;
    check(r == 0.0, format!("rPCC(gt, gt) = {r}"))?;

    for k in [2usize, 3, 9, 15] {
        let h = metrics::entropy_bits(&vec![11; k]);
        check((h - (k as f64).log2()).abs() <= 1e-9, format!("uniform SID k={k}: {h}"))?;
        let mut one = vec![0; k];
        one[0] = 50;
        check(metrics::entropy_bits(&one) == 0.0, "degenerate SID is not 0")?;
    }

    let n = 100_000;
    let a: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let b: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let shifted: Vec<f64> = b.iter().map(|x| x + 1.5).collect();
    let d = frechet_distance(&shifted, &a, 1).map_err(|e| e.to_string())?;
    check((d - 2.25).abs() <= 0.05 * 2.25, format!("mean-shift FD {d} vs 2.25"))?;
    let scaled: Vec<f64> = b.iter().map(|x| 2.0 * x).collect();
    let d = frechet_distance(&scaled, &a, 1).map_err(|e| e.to_string())?;
    check((d - 1.0).abs() <= 0.05, format!("scale FD {d} vs 1"))?;

    let noise: Vec<MotionSeq> = (0..20).map(|_| random_seq(500, &mut rng)).collect();
    let v = metrics::temporal_variance(&noise, MotionSplit::All.range()).map_err(|e| e.to_string())?;
    check((v - 1.0).abs() <= 0.05, format!("white-noise Var {v}"))?;

    for case in 0..100u64 {
        let mut rng = seeded(derive_seed(0xb7f, case));
        let frames = rng.random_range(8..24);
        let (g, r, u) = (random_seq(frames, &mut rng), random_seq(frames, &mut rng), random_seq(frames, &mut rng));
        let (e, p) = metrics::motion_mse(&g, &r).map_err(|e| e.to_string())?;
        check(close(e, oracle::mse(&g, &r, 0..50), 1e-9) && close(p, oracle::mse(&g, &r, 50..56), 1e-9), format!("MSE case {case}"))?;
        let rp = metrics::rpcc(&g, &r, &u).map_err(|e| e.to_string())?;
        check(close(rp, oracle::rpcc(&g, &r, &u, 0..50).unwrap(), 1e-9), format!("rPCC case {case}"))?;
        let energy: Vec<f64> = (0..frames).map(|_| rng.random::<f64>()).collect();
        let speaking: Vec<bool> = (0..frames).map(|t| t % 3 != 0).collect();
        let l = metrics::lipsync_from_motion(&g, &energy, &speaking).map_err(|e| e.to_string())?;
        check(close(l, oracle::lipsync(&g, &energy, &speaking).unwrap(), 1e-9), format!("lipsync case {case}"))?;
        let set = [g.clone(), r.clone()];
        let v = metrics::temporal_variance(&set, 0..56).map_err(|e| e.to_string())?;
        check(close(v, oracle::variance(&set, 0..56), 1e-9), format!("Var case {case}"))?;

        let dim = rng.random_range(1..6);
        let rows = rng.random_range(dim + 4..60);
        let a: Vec<f64> = (0..rows * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..rows * dim).map(|_| 0.5 + 2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect();
        let got = frechet_distance(&a, &b, dim).map_err(|e| e.to_string())?;
        let want = oracle::frechet(&a, &b, dim, 1e-6);
        check(close(got, want, 1e-6), format!("FD case {case}: {got} vs {want}"))?;

        let k = rng.random_range(2..6);
        let pts: Vec<f64> = (0..40 * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let model = kmeans::fit(&pts, dim, &KMeansConfig { k, restarts: 3, iterations: 50, seed: case }).map_err(|e| e.to_string())?;
        let h = metrics::entropy_bits(&model.histogram(&a));
        check(close(h, oracle::assignment_entropy(&a, &model.centroids, dim), 1e-9), format!("SID case {case}"))?;
    }
    Ok(String::from("closed forms hold; 100 brute-force instances agree"))
}

/// Tiny world shared by the sampler and stage-2 identity checks.
fn tiny_world(dir: &Path) -> (Config, PathBuf) {
    let mut cfg = Config::default();
    for kv in ["synth.n=3", "synth.windows=1", "model.dim=8", "model.blocks=2", "model.time_dim=8"] {
        cfg.apply_override(kv).unwrap();
    }
    let data = dir.join("data");
    fs::create_dir_all(&data).unwrap();
    commands::synth(&cfg, &data).unwrap();
    (cfg, data.join("manifest.txt"))
}

fn flow_sampler(dir: &Path) -> Outcome {
    let (cfg, manifest) = tiny_world(dir);
    let data = load_dataset(&manifest).map_err(|e| e.to_string())?;
    let prepared = prepare_all(&cfg, &data, &PoolRunner::new(1)).map_err(|e| e.to_string())?;
    let gc = cfg.generator(&data.layout).map_err(|e| e.to_string())?;
    let mut rng = seeded(0xf10);
    let delta = [0.75, -0.5, 0.125, 1.5];
    let gen = constant_field_generator(&gc, &delta, &mut rng).map_err(|e| e.to_string())?;
    let p = &prepared[0];
    let x0 = Tensor::randn(&[gc.cur_frames * gc.cells(), gc.channels], 1.0, &mut rng);
    let x1 = Tensor::from_fn(x0.shape(), |i| x0.data()[i] + delta[i % 4]);
    for n in [1, 2, 3, 7, 25, 64] {
        let out = flow_sample(&x0, n, |x, t| gen.velocity(x, t, &p.base, &p.masks, None)).map_err(|e| e.to_string())?;
        // One step is x0 + delta itself; more steps accumulate rounding only.
        let err = out.data().iter().zip(x1.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        check(if n == 1 { bitwise(out.data(), x1.data()) } else { err <= 1e-12 }, format!("constant field, {n} steps: off by {err:e}"))?;
    }
    let x0 = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let out = flow_sample(&x0, 100, |x, _| Ok(x.map(|v| -v))).map_err(|e| e.to_string())?;
    let e1 = (-1.0f64).exp();
    let worst = out.data().iter().zip(x0.data()).map(|(o, x)| ((o - e1 * x) / (e1 * x)).abs()).fold(0.0, f64::max);
    check(worst <= 0.006, format!("v = -x lands {:.3}% off", worst * 100.0))?;
    Ok(format!("constant field exact at 1 step, within 1e-12 up to 64; v = -x within {:.3}%", worst * 100.0))
}

fn stage2_identity(dir: &Path) -> Outcome {
    let (cfg, manifest) = tiny_world(dir);
    let data = load_dataset(&manifest).map_err(|e| e.to_string())?;
    let prepared = prepare_all(&cfg, &data, &PoolRunner::new(1)).map_err(|e| e.to_string())?;
    let ablation = cfg.ablation().map_err(|e| e.to_string())?;
    // A briefly trained stage-1 reference, so identity is not an artefact of init.
    let s1 = dir.join("s1");
    let mut t = cfg.clone();
    for kv in ["train.stage1.steps=4", "train.stage1.batch=2"] {
        t.apply_override(kv).unwrap();
    }
    t.apply_override(&format!("train.data={}", manifest.display())).unwrap();
    commands::train(&mut t, &s1).map_err(|e| e.to_string())?;
    let reference = load_checkpoint(&s1).map_err(|e| e.to_string())?.model.generator;
    let stage1 = EchoModel { generator: reference.clone(), lcu: None, adapters: None, ablation };
    let lc = cfg.lcu(data.layout.window, data.layout.audio_dim, data.layout.visual_dim).map_err(|e| e.to_string())?;
    let s2 = cfg.stage2().map_err(|e| e.to_string())?;
    let lcu = Lcu::new(&lc, ablation, &mut seeded(3)).map_err(|e| e.to_string())?;
    let state = stage2_init(&reference, lcu, &s2).map_err(|e| e.to_string())?;
    let student = state.clone().into_model();
    for (i, p) in prepared.iter().enumerate() {
        let a = stage1.generate_tokens(p, i as u64, 4).map_err(|e| e.to_string())?;
        let b = student.generate_tokens(p, i as u64, 4).map_err(|e| e.to_string())?;
        check(bitwise(a.data(), b.data()), format!("clip {i}: student differs from reference"))?;
        let sg = stage2_sample_grad(&state, &reference, p, s2.gamma, s2.w_min, &[0, 1], i as u64).map_err(|e| e.to_string())?;
        check(sg.record.align == 0.0, format!("clip {i}: alignment loss {} at step 0", sg.record.align))?;
    }
    Ok(format!("{} clips bit-identical, alignment loss 0", prepared.len()))
}

fn audio(frames: usize, values: Vec<f64>) -> AudioFeatureSeq {
    AudioFeatureSeq::new(Tensor::new(&[frames, 3, 2], values).unwrap()).unwrap()
}

fn hfa_weights() -> Outcome {
    for w_min in [0.0, 0.1, 0.5] {
        check(rms_frame_weights(&audio(6, vec![0.0; 36]), w_min).iter().all(|&w| w == w_min), "silent clip is not at the floor")?;
    }
    let mut rng = seeded(0x4fa);
    for case in 0..200 {
        let values: Vec<f64> = (0..36).map(|_| rng.random_range(-3.0..3.0)).collect();
        let scale = rng.random_range(0.01..100.0);
        let w_min = rng.random_range(0.0..1.0);
        let a = audio(6, values.clone());
        let w = rms_frame_weights(&a, w_min);
        let ws = rms_frame_weights(&audio(6, values.iter().map(|v| v * scale).collect()), w_min);
        let e = a.window_rms();
        // The 1e-8 guard in the denominator is the only scale-dependent term.
        let max = e.iter().cloned().fold(0.0, f64::max);
        let bound = 1e-8 / (max * scale.min(1.0)) * 1.01 + 1e-15;
        check(w.iter().zip(&ws).all(|(x, y)| (x - y).abs() <= bound), format!("case {case}: not scale invariant"))?;
        for i in 0..6 {
            for j in 0..6 {
                check(e[i] > e[j] || w[i] <= w[j], format!("case {case}: weights not monotone in energy"))?;
            }
        }
    }
    Ok(String::from("silent floor, scale invariance and monotonicity over 200 clips"))
}

struct Trained {
    report: HeldoutReport,
    elapsed: Duration,
}

struct Pipeline {
    dir: PathBuf,
    base: Config,
    world: SynthWorld,
    test: Vec<echo_core::pipeline::PreparedSample>,
    heldout: HeldoutConfig,
}

impl Pipeline {
    fn new(dir: &Path) -> Self {
        let base = Config::default();
        let mut tr = base.clone();
        tr.apply_override("synth.n=256").unwrap();
        tr.apply_override("seed=101").unwrap();
        let mut te = base.clone();
        te.apply_override("synth.n=32").unwrap();
        te.apply_override("seed=202").unwrap();
        for (c, name) in [(&tr, "train"), (&te, "test")] {
            let d = dir.join(name);
            fs::create_dir_all(&d).unwrap();
            commands::synth(c, &d).unwrap();
        }
        let test_data = load_dataset(&dir.join("test/manifest.txt")).unwrap();
        let test = prepare_all(&base, &test_data, &PoolRunner::from_env()).unwrap();
        let world = SynthWorld::new(&base.synth().unwrap()).unwrap();
        let lc = base.lcu(test_data.layout.window, test_data.layout.audio_dim, test_data.layout.visual_dim).unwrap();
        let heldout = HeldoutConfig {
            n_steps: base.get("generate.n_steps").unwrap(),
            seed: 0x4e1d,
            lag: base.synth().unwrap().lag,
            vocab: lc.vocab,
            emotion_probe: true,
        };
        Self { dir: dir.to_path_buf(), base, world, test, heldout }
    }

    fn train(&self, name: &str, stage: u8, flags: &[&str], stage1: Option<&Path>) -> PathBuf {
        let out = self.dir.join(name);
        fs::create_dir_all(&out).unwrap();
        let mut cfg = self.base.clone();
        cfg.apply_override(&format!("train.stage={stage}")).unwrap();
        cfg.apply_override(&format!("train.data={}", self.dir.join("train/manifest.txt").display())).unwrap();
        if let Some(p) = stage1 {
            cfg.apply_override(&format!("train.stage1_ckpt={}", p.display())).unwrap();
        }
        for f in flags {
            cfg.apply_override(f).unwrap();
        }
        commands::train(&mut cfg, &out).unwrap();
        out
    }

    fn score(&self, ckpt: &Path) -> HeldoutReport {
        let model = load_checkpoint(ckpt).unwrap().model;
        heldout_report(&model, &self.test, &self.world, &self.heldout).unwrap()
    }

    fn run(&self, name: &str, flags: &[&str], stage1: &Path) -> Trained {
        let t0 = Instant::now();
        let ckpt = self.train(name, 2, flags, Some(stage1));
        let elapsed = t0.elapsed();
        Trained { report: self.score(&ckpt), elapsed }
    }
}

fn end_to_end(s1_time: Duration, s1_report: &HeldoutReport, full: &Trained) -> Outcome {
    let r = &full.report;
    let total = s1_time + full.elapsed;
    let line = format!(
        "lipsync {:.3} (n={}), rPCC {:.3} vs stage-1 {:.3} (n={}), emotion {}/{} positive p={:.3}, train {:.1} min",
        r.lipsync,
        r.lipsync_clips,
        r.listening_rpcc,
        s1_report.listening_rpcc,
        r.listening_clips,
        r.emotion_positive,
        r.emotion_shifts.len(),
        r.emotion_p,
        total.as_secs_f64() / 60.0
    );
    let mut failed = Vec::new();
    if !(r.lipsync >= 0.6) {
        failed.push("(a) lipsync < 0.6");
    }
    if !(r.listening_rpcc <= 0.35) {
        failed.push("(b) rPCC > 0.35");
    }
    if !(r.listening_rpcc < s1_report.listening_rpcc) {
        failed.push("(b) rPCC not better than stage 1");
    }
    if !(r.emotion_shifts.iter().sum::<f64>() > 0.0 && r.emotion_p < 0.05) {
        failed.push("(c) emotion shift not significant");
    }
    if total > Duration::from_secs(30 * 60) {
        failed.push("over 30 min");
    }
    if failed.is_empty() {
        Ok(line)
    } else {
        Err(format!("{}; {line}", failed.join(", ")))
    }
}

fn ablations(full: &HeldoutReport, no_sdcm: &HeldoutReport, no_lpe: &HeldoutReport, no_hbcu: &HeldoutReport) -> Outcome {
    let line = format!(
        "lipsync full {:.3} vs no-sdcm {:.3}; rPCC full {:.3} vs no-lpe {:.3}, no-hbcu {:.3}",
        full.lipsync, no_sdcm.lipsync, full.listening_rpcc, no_lpe.listening_rpcc, no_hbcu.listening_rpcc
    );
    let mut failed = Vec::new();
    if !(no_sdcm.lipsync < full.lipsync) {
        failed.push("no-sdcm lipsync not worse");
    }
    if !(no_lpe.listening_rpcc > full.listening_rpcc) {
        failed.push("no-lpe rPCC not worse");
    }
    if !(no_hbcu.listening_rpcc > full.listening_rpcc) {
        failed.push("no-hbcu rPCC not worse");
    }
    if failed.is_empty() {
        Ok(line)
    } else {
        Err(format!("{}; {line}", failed.join(", ")))
    }
}

/// Every file under `dir` with its bytes.
fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "train_log.jsonl") {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn replay(dir: &Path) -> Outcome {
    let mut cfg = Config::default();
    for kv in ["synth.n=2", "synth.windows=2", "model.dim=8", "model.blocks=1", "model.time_dim=8", "train.stage1.steps=3", "train.stage1.batch=2", "seed=77"] {
        cfg.apply_override(kv).unwrap();
    }
    let first = dir.join("first");
    let data = first.join("data");
    let s1 = first.join("s1");
    for d in [&data, &s1] {
        fs::create_dir_all(d).unwrap();
    }
    commands::synth(&cfg, &data).map_err(|e| e.to_string())?;
    let mut t = cfg.clone();
    t.apply_override(&format!("train.data={}", data.join("manifest.txt").display())).unwrap();
    commands::train(&mut t, &s1).map_err(|e| e.to_string())?;

    // Replay both runs from their written snapshots alone.
    let second = dir.join("second");
    for (name, run) in [("data", 0), ("s1", 1)] {
        let src = first.join(name);
        let dst = second.join(name);
        fs::create_dir_all(&dst).unwrap();
        let mut c = Config::default();
        c.apply_file(&src.join("resolved.cfg")).map_err(|e| e.to_string())?;
        if run == 0 {
            commands::synth(&c, &dst).map_err(|e| e.to_string())?;
        } else {
            commands::train(&mut c, &dst).map_err(|e| e.to_string())?;
        }
        let (a, b) = (files(&src), files(&dst));
        check(!a.is_empty() && a == b, format!("{name}: replay differs"))?;
    }
    Ok(String::from("synth and train replay bit-identically from their snapshots"))
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    let mut record = |n: u8, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} {:<4} {name}: {}", if o.is_ok() { "PASS" } else { "FAIL" }, o.as_ref().unwrap_or_else(|e| e));
        results.push((n, name, o));
    };

    record(1, "gradient suite", gradients());
    record(2, "lip decoupling", lip_decoupling());
    record(3, "scan equivalence and causality", scan_equivalence());
    record(4, "metric oracles", metric_oracles());
    record(5, "flow sampler", flow_sampler(&dir.join("c5")));
    record(6, "stage-2 identity at init", stage2_identity(&dir.join("c6")));
    record(7, "alignment weights", hfa_weights());

    let p = Pipeline::new(&dir.join("e2e"));
    let t0 = Instant::now();
    let s1 = p.train("s1", 1, &[], None);
    let s1_time = t0.elapsed();
    let s1_report = p.score(&s1);
    let full = p.run("full", &[], &s1);
    record(8, "end-to-end toy reproduction", end_to_end(s1_time, &s1_report, &full));

    let no_lpe = p.run("no_lpe", &["ablation.lpe=false"], &s1);
    let no_hbcu = p.run("no_hbcu", &["ablation.hbcu=false"], &s1);
    let s1_plain = p.train("s1_no_sdcm", 1, &["ablation.sdcm=false"], None);
    let no_sdcm = p.run("no_sdcm", &["ablation.sdcm=false"], &s1_plain);
    record(9, "ablation directionality", ablations(&full.report, &no_sdcm.report, &no_lpe.report, &no_hbcu.report));

    record(10, "determinism and replay", replay(&dir.join("c10")));

    let failed: Vec<String> = results.iter().filter(|r| r.2.is_err()).map(|r| format!("{} ({})", r.0, r.1)).collect();
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
