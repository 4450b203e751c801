//! Two-stage flow-matching training.
//!
//! Stage 1 trains the generator on avatar-side conditioning only with a flow
//! loss plus a decoded-motion reconstruction term. Stage 2 freezes the base
//! weights, adds the contextual understanding pipeline, low-rank adapters and
//! the user/emotion branches, and regularises block features towards the
//! frozen stage-1 model with per-frame speech-energy weights.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::datamodel::{AudioFeatureSeq, MotionLatentCodec};
use crate::error::{shape_err, Error, Result};
use crate::generator::Generator;
use crate::lcu::Lcu;
use crate::nn::{accumulate, scale_grads, AdapterSet, Binder, GradMap};
use crate::optim::{AdamW, AdamWConfig};
use crate::pipeline::{EchoModel, PreparedSample};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Config {
    pub lambda: f64,
    pub lr: f64,
    pub optimizer: AdamWConfig,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self { lambda: 0.1, lr: 2e-3, optimizer: AdamWConfig::default(), steps: 1000, batch: 4, seed: 0 }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.lr > 0.0) || self.batch == 0 {
            return Err(Error::Config(format!(
                "stage 1 needs lambda >= 0, lr > 0 and batch >= 1 (got {}, {}, {})",
                self.lambda, self.lr, self.batch
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Config {
    pub gamma: f64,
    pub rank: usize,
    pub adapter_scale: f64,
    pub subset: usize,
    pub w_min: f64,
    pub lr_adapters: f64,
    pub lr_other: f64,
    pub optimizer: AdamWConfig,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            rank: 8,
            adapter_scale: 1.0,
            subset: 2,
            w_min: 0.1,
            lr_adapters: 2e-3,
            lr_other: 2e-3,
            optimizer: AdamWConfig::default(),
            steps: 1000,
            batch: 4,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self, blocks: usize) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.subset == 0 || self.subset > blocks {
            return Err(Error::Config(format!("block subset {} outside 1..={blocks}", self.subset)));
        }
        if !(0.0..=1.0).contains(&self.w_min) {
            return Err(Error::Config(format!("w_min {} outside [0, 1]", self.w_min)));
        }
        if self.rank == 0 || self.batch == 0 || !(self.lr_adapters > 0.0) || !(self.lr_other > 0.0) {
            return Err(Error::Config(String::from("stage 2 needs rank, batch and step sizes > 0")));
        }
        Ok(())
    }
}

/// `w(i) = w_min + (1 - w_min) e(i) / (max e + 1e-8)` with `e` the RMS of
/// frame `i`'s full audio window.
pub fn rms_frame_weights(audio: &AudioFeatureSeq, w_min: f64) -> Vec<f64> {
    let e = audio.window_rms();
    let max = e.iter().cloned().fold(0.0, f64::max);
    e.iter().map(|&x| w_min + (1.0 - w_min) * x / (max + 1e-8)).collect()
}

/// Mean squared error between the predicted velocity and its target.
pub fn flow_loss(g: &mut Graph, velocity: Var, target: Var) -> Var {
    let d = g.sub(velocity, target);
    let sq = g.mul(d, d);
    g.mean_all(sq)
}

/// `T x (H'W' * C)` decode matrix transposed, for right-multiplying frame rows.
pub fn decode_columns(codec: &MotionLatentCodec) -> Tensor {
    let d = codec.decode_matrix_tokens();
    let (m, l) = (d.rows(), d.cols());
    Tensor::from_fn(&[l, m], |i| d.data()[(i % m) * l + i / m])
}

/// Mean absolute difference of the motion decoded from two token blocks of
/// `frames` frames.
pub fn pixel_loss(g: &mut Graph, a: Var, b: Var, frames: usize, decode_cols: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(shape_err("pixel_loss", format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    let (r, c) = g.shape(a);
    let l = g.shape(decode_cols).0;
    if frames == 0 || r * c != frames * l {
        return Err(shape_err("pixel_loss", format!("{r}x{c} tokens for {frames} frames of {l}")));
    }
    let d = g.sub(a, b);
    let d = g.reshape(d, frames, l);
    let m = g.matmul(d, decode_cols);
    let m = g.abs(m);
    Ok(g.mean_all(m))
}

/// `(1/|S|) sum_{l in S} sum_i w(i) mean_cells ||h_l(i) - h_ref_l(i)||^2`.
pub fn hfa_loss(
    g: &mut Graph,
    student: &[Var],
    reference: &[Var],
    subset: &[usize],
    weights: &[f64],
    cells: usize,
) -> Result<Var> {
    if student.len() != reference.len() || subset.is_empty() {
        return Err(shape_err("hfa_loss", format!("{} student vs {} reference blocks", student.len(), reference.len())));
    }
    let w = g.constant(Tensor::new(&[1, weights.len()], weights.to_vec())?);
    let mut total: Option<Var> = None;
    for &l in subset {
        if l >= student.len() {
            return Err(shape_err("hfa_loss", format!("block {l} of {}", student.len())));
        }
        let (rows, d) = g.shape(student[l]);
        if g.shape(reference[l]) != (rows, d) || rows != weights.len() * cells {
            return Err(shape_err(
                "hfa_loss",
                format!("block {l}: {:?} vs {:?} for {} frames", g.shape(student[l]), g.shape(reference[l]), weights.len()),
            ));
        }
        let diff = g.sub(student[l], reference[l]);
        let sq = g.mul(diff, diff);
        let ones = g.constant(Tensor::filled(&[d, 1], 1.0));
        let per_cell = g.matmul(sq, ones);
        let per_frame = g.group_mean(per_cell, cells);
        let term = g.matmul(w, per_frame);
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    let total = total.expect("non-empty subset");
    Ok(g.scale(total, 1.0 / subset.len() as f64))
}

/// Loss components of one training step (batch means).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub flow: f64,
    pub pixel: f64,
    pub align: f64,
}

/// Loss and gradients of one sample.
#[derive(Clone, Debug, Default)]
pub struct SampleGrad {
    pub record: StepRecord,
    pub grads: GradMap,
}

/// Evaluates per-sample jobs, possibly concurrently. Results must come back
/// in index order.
pub trait BatchRunner: Sync {
    fn run(&self, n: usize, job: &(dyn Fn(usize) -> Result<SampleGrad> + Sync)) -> Vec<Result<SampleGrad>>;
}

/// Runs jobs one after another on the calling thread.
pub struct Sequential;

impl BatchRunner for Sequential {
    fn run(&self, n: usize, job: &(dyn Fn(usize) -> Result<SampleGrad> + Sync)) -> Vec<Result<SampleGrad>> {
        (0..n).map(job).collect()
    }
}

/// Noise, flow time and interpolated state for one sample draw.
pub struct FlowDraw {
    pub t: f64,
    pub x0: Tensor,
    pub xt: Tensor,
    pub target: Tensor,
}

pub fn flow_draw(x1: &Tensor, seed: u64) -> FlowDraw {
    let mut rng = seeded(seed);
    let t: f64 = rng.random::<f64>();
    let x0 = Tensor::randn(x1.shape(), 1.0, &mut rng);
    let xt = Tensor::from_fn(x1.shape(), |i| (1.0 - t) * x0.data()[i] + t * x1.data()[i]);
    let target = Tensor::from_fn(x1.shape(), |i| x1.data()[i] - x0.data()[i]);
    FlowDraw { t, x0, xt, target }
}

fn check_finite(rec: &StepRecord, what: &str) -> Result<()> {
    for (name, v) in [("loss", rec.loss), ("flow", rec.flow), ("pixel", rec.pixel), ("align", rec.align)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{what} step {}: {name} = {v}", rec.step)));
        }
    }
    Ok(())
}

/// Stage-1 loss and gradients (names prefixed `gen.`) for one sample.
pub fn stage1_sample_grad(
    gen: &Generator,
    p: &PreparedSample,
    decode_cols: &Tensor,
    lambda: f64,
    seed: u64,
) -> Result<SampleGrad> {
    let draw = flow_draw(&p.gt_tokens, seed);
    let mut g = Graph::new();
    let mut b = Binder::new();
    b.bind(&mut g, gen, "gen", &|_| true);
    let cond = p.base.to_vars(&mut g, gen.config.cells());
    let xt = g.constant(draw.xt.clone());
    let out = gen.forward(&mut g, &b, xt, draw.t, &cond, &p.masks, None)?;
    let target = g.constant(draw.target);
    let flow = flow_loss(&mut g, out.velocity, target);
    let mut rec = StepRecord { flow: g.scalar(flow), ..StepRecord::default() };
    let loss = if lambda > 0.0 {
        let step = g.scale(out.velocity, 1.0 - draw.t);
        let x1_hat = g.add(xt, step);
        let gt = g.constant(p.gt_tokens.clone());
        let dc = g.constant(decode_cols.clone());
        let pix = pixel_loss(&mut g, x1_hat, gt, gen.config.cur_frames, dc)?;
        rec.pixel = g.scalar(pix);
        let weighted = g.scale(pix, lambda);
        g.add(flow, weighted)
    } else {
        flow
    };
    rec.loss = g.scalar(loss);
    let grads = g.backward(loss);
    Ok(SampleGrad { record: rec, grads: b.collect(&grads, gen, "gen") })
}

fn reduce(results: Vec<Result<SampleGrad>>, step: usize) -> Result<(StepRecord, GradMap)> {
    let n = results.len() as f64;
    let mut rec = StepRecord { step, ..StepRecord::default() };
    let mut grads = GradMap::new();
    for r in results {
        let r = r?;
        rec.loss += r.record.loss / n;
        rec.flow += r.record.flow / n;
        rec.pixel += r.record.pixel / n;
        rec.align += r.record.align / n;
        accumulate(&mut grads, r.grads);
    }
    scale_grads(&mut grads, 1.0 / n);
    Ok((rec, grads))
}

fn batch_indices(n: usize, batch: usize, step: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeded(derive_seed(seed, 0x5eed_0000 + step as u64));
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Stage 1: trains every generator weight on avatar-side conditioning.
pub fn stage1_train(
    data: &[PreparedSample],
    mut gen: Generator,
    codec: &MotionLatentCodec,
    cfg: &Stage1Config,
    runner: &dyn BatchRunner,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<Generator> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid(String::from("training set is empty")));
    }
    let decode_cols = decode_columns(codec);
    let mut opt = AdamW::new(cfg.optimizer.clone());
    for step in 0..cfg.steps {
        let idx = batch_indices(data.len(), cfg.batch, step, cfg.seed);
        let gen_ref = &gen;
        let job = |i: usize| {
            let seed = derive_seed(cfg.seed, (step * cfg.batch + i) as u64);
            stage1_sample_grad(gen_ref, &data[idx[i]], &decode_cols, cfg.lambda, seed)
        };
        let (rec, grads) = reduce(runner.run(cfg.batch, &job), step)?;
        check_finite(&rec, "stage 1")?;
        log(&rec);
        opt.step(&mut gen, "gen", &grads, &|_| cfg.lr);
    }
    Ok(gen)
}

/// Generator parameters trained in stage 2: the user stream, gate, user
/// positional slots and emotion attention. Names are unprefixed.
pub fn stage2_generator_trainable(name: &str) -> bool {
    name == "user_pos"
        || name.contains(".injection.user.")
        || name.contains(".injection.conv_")
        || name.contains(".injection.gate.")
        || name.contains(".injection.user_in.")
        || name.contains(".emo.")
        || name.contains(".norm_emo.")
}

/// Stage-2 student state.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2State {
    pub generator: Generator,
    pub lcu: Lcu,
    pub adapters: AdapterSet,
}

impl Stage2State {
    pub fn into_model(self) -> EchoModel {
        let ablation = self.lcu.ablation;
        EchoModel { generator: self.generator, lcu: Some(self.lcu), adapters: Some(self.adapters), ablation }
    }
}

/// Stage-2 loss and gradients (prefixes `gen.`, `lcu.`, `adapters.`).
pub fn stage2_sample_grad(
    state: &Stage2State,
    reference: &Generator,
    p: &PreparedSample,
    gamma: f64,
    w_min: f64,
    subset: &[usize],
    seed: u64,
) -> Result<SampleGrad> {
    let draw = flow_draw(&p.gt_tokens, seed);
    let cells = reference.config.cells();

    let ref_feats: Vec<Tensor> = if gamma > 0.0 {
        let mut g = Graph::new();
        let mut b = Binder::new();
        b.bind_frozen(&mut g, reference);
        let cond = p.base.to_vars(&mut g, cells);
        let xt = g.constant(draw.xt.clone());
        let out = reference.forward(&mut g, &b, xt, draw.t, &cond, &p.masks, None)?;
        out.features.iter().map(|&f| g.value(f).clone()).collect()
    } else {
        Vec::new()
    };

    let mut g = Graph::new();
    let mut b = Binder::new();
    b.bind(&mut g, &state.generator, "gen", &|n| stage2_generator_trainable(n.trim_start_matches("gen.")));
    b.bind(&mut g, &state.lcu, "lcu", &|_| true);
    b.bind(&mut g, &state.adapters, "adapters", &|_| true);
    let lcu_out = state.lcu.forward(&mut g, &b, &p.lcu_inputs())?;
    let mut cond = p.base.to_vars(&mut g, cells);
    cond.f_pu = Some(lcu_out.f_pu);
    cond.c_emo = lcu_out.c_emo;
    let xt = g.constant(draw.xt.clone());
    let out = state.generator.forward(&mut g, &b, xt, draw.t, &cond, &p.masks, Some(&state.adapters))?;
    let target = g.constant(draw.target);
    let flow = flow_loss(&mut g, out.velocity, target);
    let mut rec = StepRecord { flow: g.scalar(flow), ..StepRecord::default() };
    let loss = if gamma > 0.0 {
        let refs: Vec<Var> = ref_feats.into_iter().map(|t| g.constant(t)).collect();
        let w = rms_frame_weights(&p.sample.avatar_audio, w_min);
        let align = hfa_loss(&mut g, &out.features, &refs, subset, &w, cells)?;
        rec.align = g.scalar(align);
        let weighted = g.scale(align, gamma);
        g.add(flow, weighted)
    } else {
        flow
    };
    rec.loss = g.scalar(loss);
    let grads = g.backward(loss);
    let mut map = b.collect(&grads, &state.generator, "gen");
    map.extend(b.collect(&grads, &state.lcu, "lcu"));
    map.extend(b.collect(&grads, &state.adapters, "adapters"));
    Ok(SampleGrad { record: rec, grads: map })
}

/// Uniform block subset of the given size, sorted.
pub fn sample_block_subset(blocks: usize, size: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut rng = seeded(derive_seed(seed, 0xb10c_0000 + step as u64));
    let mut set = BTreeSet::new();
    while set.len() < size.min(blocks) {
        set.insert(rng.random_range(0..blocks));
    }
    set.into_iter().collect()
}

/// Fresh stage-2 student around a stage-1 generator.
pub fn stage2_init(reference: &Generator, lcu: Lcu, cfg: &Stage2Config) -> Result<Stage2State> {
    let mut rng = seeded(derive_seed(cfg.seed, 0xada9));
    let adapters = reference.fresh_adapters(cfg.rank, cfg.adapter_scale, lcu.ablation.lau, &mut rng)?;
    Ok(Stage2State { generator: reference.clone(), lcu, adapters })
}

/// Stage 2: adapts the student with flow loss plus feature alignment to the
/// frozen `reference`.
pub fn stage2_train(
    data: &[PreparedSample],
    reference: &Generator,
    mut state: Stage2State,
    cfg: &Stage2Config,
    runner: &dyn BatchRunner,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<Stage2State> {
    cfg.validate(reference.config.blocks)?;
    if data.is_empty() {
        return Err(Error::Invalid(String::from("training set is empty")));
    }
    let mut opt = AdamW::new(cfg.optimizer.clone());
    for step in 0..cfg.steps {
        let idx = batch_indices(data.len(), cfg.batch, step, cfg.seed);
        let subset = sample_block_subset(reference.config.blocks, cfg.subset, cfg.seed, step);
        let st = &state;
        let job = |i: usize| {
            let seed = derive_seed(cfg.seed, (step * cfg.batch + i) as u64);
            stage2_sample_grad(st, reference, &data[idx[i]], cfg.gamma, cfg.w_min, &subset, seed)
        };
        let (rec, grads) = reduce(runner.run(cfg.batch, &job), step)?;
        check_finite(&rec, "stage 2")?;
        log(&rec);
        let lr = |n: &str| if n.starts_with("adapters.") { cfg.lr_adapters } else { cfg.lr_other };
        opt.step(&mut state.generator, "gen", &grads, &lr);
        opt.step(&mut state.lcu, "lcu", &grads, &lr);
        opt.step(&mut state.adapters, "adapters", &grads, &lr);
    }
    Ok(state)
}
