//! Subcommand implementations. Each takes the resolved configuration and an
//! output directory and writes `resolved.cfg` there first.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use echo_core::datamodel::{ConversationSample, MotionSeq, MotionSplit, SpatialLatent};
use echo_core::generator::Generator;
use echo_core::gradcheck::{self, GradCheckOptions, OpReport};
use echo_core::lcu::{self, Lcu};
use echo_core::metrics::{self, frechet, oracle, EvalItem, MetricReport, PccAggregation};
use echo_core::pipeline::{decode_tokens, prepare_sample, EchoModel, PreparedSample};
use echo_core::rng::{derive_seed, seeded};
use echo_core::synthdata::{coupling_stats, synth_conversation_windows, SynthWorld};
use echo_core::tensor::Tensor;
use echo_core::training::{stage1_train, stage2_init, stage2_train, StepRecord};
use serde_json::{json, Value};

use crate::config::{Config, DataLayout};
use crate::error::{CliError, Result};
use crate::runner::PoolRunner;
use crate::store::{self, CodecSpec, Container, Dtype};

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn path_key(cfg: &Config, key: &str) -> Result<PathBuf> {
    match cfg.str(key) {
        "" => Err(CliError::Usage(format!("`{key}` is required"))),
        p => Ok(PathBuf::from(p)),
    }
}

/// Writes `n` synthetic conversations (each `synth.windows` consecutive
/// windows) plus `manifest.txt` and `summary.json`.
pub fn synth(cfg: &Config, out: &Path) -> Result<()> {
    cfg.write_snapshot(out)?;
    let sc = cfg.synth()?;
    let n: usize = cfg.get("synth.n")?;
    let windows: usize = cfg.get("synth.windows")?;
    if n == 0 || windows == 0 {
        return Err(CliError::Usage(String::from("synth.n and synth.windows must be >= 1")));
    }
    let seed = cfg.seed()?;
    let world = SynthWorld::new(&sc)?;
    let codec = CodecSpec { gain: sc.codec_gain, seed: derive_seed(sc.world_seed, 1) };
    let runner = PoolRunner::from_env();
    let convs: Vec<Result<Vec<ConversationSample>>> =
        runner.map(n, |i| Ok(synth_conversation_windows(&sc, &world, derive_seed(seed, i as u64), windows)?));
    let mut manifest = String::new();
    let mut stored = Vec::with_capacity(n * windows);
    for (i, conv) in convs.into_iter().enumerate() {
        for (w, s) in conv?.into_iter().enumerate() {
            let rel = format!("samples/{i:06}_{w:03}.echo");
            let path = out.join(&rel);
            store::write_sample(&path, &s, Some(codec))?;
            stored.push(store::read_sample(&path)?.0);
            manifest.push_str(&rel);
            manifest.push('\n');
        }
    }
    write_text(&out.join("manifest.txt"), &manifest)?;
    let st = coupling_stats(&stored, sc.lag)?;
    let summary = json!({
        "samples": stored.len(),
        "conversations": n,
        "mirror_pcc": st.mirror_pcc,
        "mirror_pcc_min": st.mirror_pcc_min,
        "lip_pcc": st.lip_pcc,
        "listening_frames": st.listening_frames,
        "speaking_frames": st.speaking_frames,
    });
    write_text(&out.join("summary.json"), &serde_json::to_string_pretty(&summary).unwrap())?;
    eprintln!("wrote {} samples to {}", stored.len(), out.display());
    Ok(())
}

pub struct Dataset {
    pub paths: Vec<PathBuf>,
    pub samples: Vec<ConversationSample>,
    pub codec: Option<CodecSpec>,
    pub layout: DataLayout,
}

pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let paths = store::read_manifest(manifest)?;
    if paths.is_empty() {
        return Err(CliError::Usage(format!("{} lists no samples", manifest.display())));
    }
    let mut samples = Vec::with_capacity(paths.len());
    let mut codec = None;
    for p in &paths {
        let (s, c) = store::read_sample(p)?;
        codec = codec.or(c);
        samples.push(s);
    }
    let layout = DataLayout::of(&samples[0]);
    if let Some(i) = samples.iter().position(|s| DataLayout::of(s) != layout) {
        return Err(CliError::Usage(format!("{} has a different layout from {}", paths[i].display(), paths[0].display())));
    }
    Ok(Dataset { paths, samples, codec, layout })
}

/// Conditioning precomputation with the configured understanding model and
/// reasoner.
pub fn prepare_all(cfg: &Config, data: &Dataset, runner: &PoolRunner) -> Result<Vec<PreparedSample>> {
    let tokens: usize = cfg.get("lcu.understanding_tokens")?;
    let dim: usize = cfg.get("lcu.understanding_dim")?;
    let vocab: usize = cfg.get("lcu.vocab")?;
    let l = &data.layout;
    let model = lcu::understanding_model(cfg.str("understanding"), cfg.get("understanding.seed")?, l.audio_dim, l.visual_dim, tokens, dim)?;
    let table = match cfg.str("reasoner.table") {
        "" => None,
        p => Some(fs::read_to_string(p).map_err(|e| CliError::io(Path::new(p), e))?),
    };
    let reasoner = lcu::reasoner(cfg.str("reasoner"), table.as_deref())?;
    // The plug-in traits are not `Sync`, so preparation stays sequential.
    let _ = runner;
    data.samples
        .iter()
        .map(|s| Ok(prepare_sample(s, model.as_ref(), reasoner.as_ref(), vocab, None)?))
        .collect()
}

fn log_writer(path: &Path) -> Result<impl FnMut(u8, &StepRecord)> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| CliError::io(path, e))?);
    let t0 = Instant::now();
    Ok(move |stage: u8, r: &StepRecord| {
        let line = json!({
            "stage": stage,
            "step": r.step,
            "loss": r.loss,
            "flow": r.flow,
            "pixel": r.pixel,
            "align": r.align,
            "wall_ms": t0.elapsed().as_millis() as u64,
        });
        let _ = writeln!(f, "{line}");
        let _ = f.flush();
    })
}

const MODEL_FILE: &str = "model.echo";
const ADAPTER_FILE: &str = "adapters.echo";

fn layout_json(l: &DataLayout) -> Value {
    json!({
        "channels": l.channels, "height": l.height, "width": l.width, "current": l.current,
        "prev": l.prev, "window": l.window, "audio_dim": l.audio_dim, "visual_dim": l.visual_dim,
    })
}

fn layout_from(v: &Value) -> Result<DataLayout> {
    let get = |k: &str| {
        v.get(k).and_then(Value::as_u64).map(|x| x as usize).ok_or_else(|| CliError::Format(format!("checkpoint layout lacks `{k}`")))
    };
    Ok(DataLayout {
        channels: get("channels")?,
        height: get("height")?,
        width: get("width")?,
        current: get("current")?,
        prev: get("prev")?,
        window: get("window")?,
        audio_dim: get("audio_dim")?,
        visual_dim: get("visual_dim")?,
    })
}

/// A model restored from a checkpoint directory with the configuration it
/// was trained under.
pub struct Checkpoint {
    pub model: EchoModel,
    pub config: Config,
    pub layout: DataLayout,
    pub codec: Option<CodecSpec>,
}

pub fn save_checkpoint(dir: &Path, ck: &Checkpoint) -> Result<()> {
    let meta = json!({
        "kind": "checkpoint",
        "stage": ck.model.stage(),
        "config": ck.config.snapshot(),
        "layout": layout_json(&ck.layout),
        "codec": ck.codec,
    });
    let mut c = Container::new(meta);
    store::push_parameters(&mut c, &ck.model.generator, "gen");
    if let Some(l) = &ck.model.lcu {
        store::push_parameters(&mut c, l, "lcu");
    }
    c.write(&dir.join(MODEL_FILE), Dtype::F64)?;
    if let Some(a) = &ck.model.adapters {
        let mut c = Container::new(json!({ "kind": "adapters" }));
        store::push_parameters(&mut c, a, "adapters");
        c.write(&dir.join(ADAPTER_FILE), Dtype::F64)?;
    }
    Ok(())
}

/// Loads a checkpoint; `with_adapters = false` restores only the base
/// weights (the frozen stage-1 view of a stage-2 checkpoint is not needed
/// anywhere, but adapters are always kept apart on disk).
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let c = Container::read(&dir.join(MODEL_FILE))?;
    if c.meta.get("kind").and_then(Value::as_str) != Some("checkpoint") {
        return Err(CliError::Format(format!("{} is not a checkpoint", dir.display())));
    }
    let mut config = Config::default();
    config.apply_text(c.meta.get("config").and_then(Value::as_str).unwrap_or(""))?;
    let layout = layout_from(c.meta.get("layout").unwrap_or(&Value::Null))?;
    let codec: Option<CodecSpec> = serde_json::from_value(c.meta.get("codec").cloned().unwrap_or(Value::Null))
        .map_err(|e| CliError::Format(format!("checkpoint codec: {e}")))?;
    let stage = c.meta.get("stage").and_then(Value::as_u64).unwrap_or(0);
    let ablation = config.ablation()?;
    let mut generator = Generator::new(&config.generator(&layout)?, ablation, &mut seeded(0))?;
    store::load_parameters(&mut generator, &c, "gen")?;
    let (lcu, adapters) = match stage {
        1 => (None, None),
        2 => {
            let lc = config.lcu(layout.window, layout.audio_dim, layout.visual_dim)?;
            let mut l = Lcu::new(&lc, ablation, &mut seeded(0))?;
            store::load_parameters(&mut l, &c, "lcu")?;
            let s2 = config.stage2()?;
            let mut a = generator.fresh_adapters(s2.rank, s2.adapter_scale, ablation.lau, &mut seeded(0))?;
            let ac = Container::read(&dir.join(ADAPTER_FILE))?;
            store::load_parameters(&mut a, &ac, "adapters")?;
            (Some(l), Some(a))
        }
        other => return Err(CliError::Format(format!("checkpoint stage {other}"))),
    };
    Ok(Checkpoint { model: EchoModel { generator, lcu, adapters, ablation }, config, layout, codec })
}

/// Keys that define the generator and must follow the stage-1 checkpoint.
const GENERATOR_KEYS: &[&str] = &[
    "model.dim",
    "model.heads",
    "model.blocks",
    "model.time_dim",
    "model.ffn_mult",
    "model.context_radius",
    "model.gate_dim",
    "lcu.perception_dim",
    "lcu.emotion_dim",
    "ablation.sdcm",
];

pub fn train(cfg: &mut Config, out: &Path) -> Result<()> {
    let stage: u8 = cfg.get("train.stage")?;
    if stage != 1 && stage != 2 {
        return Err(CliError::Usage(format!("train.stage must be 1 or 2, got {stage}")));
    }
    let reference = if stage == 2 {
        let dir = path_key(cfg, "train.stage1_ckpt").map_err(|_| CliError::Usage(String::from("stage 2 requires --stage1-ckpt")))?;
        let ck = load_checkpoint(&dir)?;
        if ck.model.stage() != 1 {
            return Err(CliError::Usage(format!("{} is not a stage-1 checkpoint", dir.display())));
        }
        for k in GENERATOR_KEYS {
            cfg.set(k, ck.config.str(k))?;
        }
        Some(ck)
    } else {
        None
    };
    cfg.write_snapshot(out)?;
    let data = load_dataset(&path_key(cfg, "train.data")?)?;
    let runner = PoolRunner::from_env();
    let prepared = prepare_all(cfg, &data, &runner)?;
    let seed = cfg.seed()?;
    let ablation = cfg.ablation()?;
    let mut log = log_writer(&out.join("train_log.jsonl"))?;
    let model = match reference {
        None => {
            let codec_spec = data.codec.ok_or_else(|| CliError::Format(String::from("samples carry no codec parameters")))?;
            let codec = codec_spec.build(&data.samples[0])?;
            let gen = Generator::new(&cfg.generator(&data.layout)?, ablation, &mut seeded(derive_seed(seed, 0x6e4)))?;
            let gen = stage1_train(&prepared, gen, &codec, &cfg.stage1()?, &runner, &mut |r| log(1, r))?;
            EchoModel { generator: gen, lcu: None, adapters: None, ablation }
        }
        Some(ck) => {
            if ck.layout != data.layout {
                return Err(CliError::Usage(String::from("stage-2 data layout differs from the stage-1 checkpoint")));
            }
            let lc = cfg.lcu(data.layout.window, data.layout.audio_dim, data.layout.visual_dim)?;
            let lcu = Lcu::new(&lc, ablation, &mut seeded(derive_seed(seed, 0x1c0)))?;
            let s2 = cfg.stage2()?;
            let reference = ck.model.generator;
            let state = stage2_init(&reference, lcu, &s2)?;
            let state = stage2_train(&prepared, &reference, state, &s2, &runner, &mut |r| log(2, r))?;
            state.into_model()
        }
    };
    save_checkpoint(out, &Checkpoint { model, config: cfg.clone(), layout: data.layout, codec: data.codec })?;
    eprintln!("stage {stage} checkpoint written to {}", out.display());
    Ok(())
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Generated clip of one sample.
pub struct Clip {
    pub index: usize,
    pub tokens: Tensor,
    pub prev_tokens: Tensor,
    pub prev_source: String,
    pub seed: u64,
}

/// Samples every clip. With `chain`, windows of one conversation run in
/// window order and each takes the previous window's last frames as its
/// prefix.
pub fn generate_clips(
    model: &EchoModel,
    prepared: &[PreparedSample],
    seed: u64,
    n_steps: usize,
    chain: bool,
    runner: &PoolRunner,
) -> Result<Vec<Clip>> {
    let cells = model.generator.config.cells();
    let run_one = |i: usize, p: &PreparedSample, prev_source: String| -> Result<Clip> {
        let s = derive_seed(seed, i as u64);
        Ok(Clip { index: i, tokens: model.generate_tokens(p, s, n_steps)?, prev_tokens: p.base.prev_tokens.clone(), prev_source, seed: s })
    };
    if !chain {
        return runner.map(prepared.len(), |i| run_one(i, &prepared[i], String::from("ground-truth"))).into_iter().collect();
    }
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, p) in prepared.iter().enumerate() {
        groups.entry(p.sample.meta.conversation_id).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups
        .into_values()
        .map(|mut g| {
            g.sort_by_key(|&i| prepared[i].sample.meta.window_index);
            g
        })
        .collect();
    let per_group = runner.map(groups.len(), |gi| -> Result<Vec<Clip>> {
        let mut out: Vec<Clip> = Vec::new();
        for &i in &groups[gi] {
            let p = &prepared[i];
            let follows = out.last().filter(|c| prepared[c.index].sample.meta.window_index + 1 == p.sample.meta.window_index);
            let clip = match follows {
                Some(prev) => {
                    let rows = p.sample.prev_len() * cells;
                    let total = prev.tokens.rows();
                    let tail = Tensor::new(&[rows, prev.tokens.cols()], prev.tokens.data()[(total - rows) * prev.tokens.cols()..].to_vec())?;
                    run_one(i, &p.with_prev_tokens(tail), format!("generated:{}", prev.index))?
                }
                None => run_one(i, p, String::from("ground-truth"))?,
            };
            out.push(clip);
        }
        Ok(out)
    });
    let mut clips = Vec::with_capacity(prepared.len());
    for g in per_group {
        clips.extend(g?);
    }
    clips.sort_by_key(|c| c.index);
    Ok(clips)
}

pub fn generate(cfg: &mut Config, out: &Path) -> Result<()> {
    let ck_dir = path_key(cfg, "generate.ckpt")?;
    let data_path = path_key(cfg, "generate.data")?;
    cfg.write_snapshot(out)?;
    let ck = load_checkpoint(&ck_dir)?;
    let data = load_dataset(&data_path)?;
    if data.layout != ck.layout {
        return Err(CliError::Usage(String::from("sample layout differs from the checkpoint")));
    }
    let runner = PoolRunner::from_env();
    let prepared = prepare_all(&ck.config, &data, &runner)?;
    let n_steps: usize = cfg.get("generate.n_steps")?;
    let chain: bool = cfg.get("generate.chain")?;
    let clips = generate_clips(&ck.model, &prepared, cfg.seed()?, n_steps, chain, &runner)?;
    let spec = data.codec.or(ck.codec).ok_or_else(|| CliError::Format(String::from("no codec parameters in samples or checkpoint")))?;
    let codec = spec.build(&data.samples[0])?;
    let mut manifest = String::new();
    for clip in &clips {
        let p = &prepared[clip.index];
        let s = &p.sample;
        let id = file_stem(&data.paths[clip.index]);
        let frames = s.current_len();
        let (c, h, w) = (s.gt_latent.channels(), s.gt_latent.height(), s.gt_latent.width());
        let latent = SpatialLatent::from_tokens(&clip.tokens, frames, c, h, w)?;
        let motion = MotionSeq::new(decode_tokens(&clip.tokens, frames, &codec)?)?;
        let meta = json!({
            "kind": "generated",
            "id": id,
            "source": data.paths[clip.index].display().to_string(),
            "conversation_id": s.meta.conversation_id,
            "window_index": s.meta.window_index,
            "seed": clip.seed,
            "n_steps": n_steps,
            "prev_source": clip.prev_source,
            "stage": ck.model.stage(),
        });
        let mut gc = Container::new(meta.clone());
        gc.push("latent", latent.data().clone());
        gc.push("prev_tokens", clip.prev_tokens.clone());
        gc.push("motion", motion.data().clone());
        gc.write(&out.join(format!("clips/{id}.gen.echo")), Dtype::F64)?;
        let energy = s.avatar_audio.center_rms();
        store::write_motion(&out.join(format!("clips/{id}.gt.echo")), &s.gt_motion, Some((&energy, &s.avatar_speaking)))?;
        let user = s.user_motion.slice(s.history_len() - frames, frames)?;
        store::write_motion(&out.join(format!("clips/{id}.user.echo")), &user, None)?;
        write_text(&out.join(format!("clips/{id}.json")), &serde_json::to_string_pretty(&meta).unwrap())?;
        manifest.push_str(&format!("clips/{id}.gen.echo clips/{id}.gt.echo clips/{id}.user.echo\n"));
    }
    write_text(&out.join("eval_manifest.txt"), &manifest)?;
    eprintln!("generated {} clips into {}", clips.len(), out.display());
    Ok(())
}

pub fn load_eval_items(manifest: &Path) -> Result<Vec<EvalItem>> {
    let text = fs::read_to_string(manifest).map_err(|e| CliError::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new(""));
    let mut items = Vec::new();
    for (i, line) in text.lines().map(str::trim).enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(CliError::Usage(format!("{} line {}: expected `gen gt user`", manifest.display(), i + 1)));
        }
        let (gen, _) = store::read_motion(&base.join(parts[0]))?;
        let (gt, lip) = store::read_motion(&base.join(parts[1]))?;
        let (user, _) = store::read_motion(&base.join(parts[2]))?;
        if gen.frames() != gt.frames() || gt.frames() != user.frames() {
            return Err(CliError::Usage(format!("{} line {}: gen/gt/user lengths differ", manifest.display(), i + 1)));
        }
        items.push(EvalItem { id: file_stem(Path::new(parts[0])).trim_end_matches(".gen").to_string(), gen, gt, user, lip });
    }
    if items.is_empty() {
        return Err(CliError::Usage(format!("{} lists no clips", manifest.display())));
    }
    Ok(items)
}

fn cov_trace(rows: &[f64], dim: usize) -> f64 {
    let n = rows.len() / dim;
    (0..dim)
        .map(|j| {
            let m = (0..n).map(|i| rows[i * dim + j]).sum::<f64>() / n as f64;
            (0..n).map(|i| (rows[i * dim + j] - m).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64
        })
        .sum()
}

/// Independent recomputation of every report field; returns
/// `(field, main, oracle, tolerance)` rows.
pub fn oracle_check(items: &[EvalItem], report: &MetricReport, cfg: &Config) -> Result<Vec<(String, f64, f64, f64)>> {
    let ec = cfg.eval()?;
    let gen: Vec<MotionSeq> = items.iter().map(|i| i.gen.clone()).collect();
    let gt: Vec<MotionSeq> = items.iter().map(|i| i.gt.clone()).collect();
    let n = items.len() as f64;
    let mut rows = Vec::new();
    let mut push = |name: &str, a: f64, b: f64, tol: f64| rows.push((name.to_string(), a, b, tol));
    for split in [MotionSplit::Expression, MotionSplit::Pose] {
        let dim = split.range().len();
        let name = if split == MotionSplit::Expression { "exp" } else { "pose" };
        let (pg, pr) = (metrics::pooled_frames(&gen, split), metrics::pooled_frames(&gt, split));
        let o = oracle::frechet(&pg, &pr, dim, frechet::FD_EPS);
        let main = if split == MotionSplit::Expression { report.fd_exp } else { report.fd_pose };
        // FD is a difference of covariance traces; rounding scales with them.
        let scale = (cov_trace(&pg, dim) + cov_trace(&pr, dim)).max(1.0) / main.abs().max(1.0);
        push(&format!("fd_{name}"), main, o.max(0.0), 1e-6 * scale);
        let k = if split == MotionSplit::Expression { ec.k_exp } else { ec.k_pose };
        let (h, model) = metrics::sid(&gen, &gt, split, &ec.kmeans(k))?;
        let o = oracle::assignment_entropy(&metrics::pooled_frames(&gen, split), &model.centroids, dim);
        let main = if split == MotionSplit::Expression { report.sid_exp } else { report.sid_pose };
        push(&format!("sid_{name}"), main, o, 1e-9);
        let _ = h;
        let main = if split == MotionSplit::Expression { report.var_exp } else { report.var_pose };
        push(&format!("var_{name}"), main, oracle::variance(&gen, split.range()), 1e-9);
    }
    push("var_mean", report.var_mean, oracle::variance(&gen, MotionSplit::All.range()), 1e-9);
    let mse_e: f64 = items.iter().map(|i| oracle::mse(&i.gen, &i.gt, MotionSplit::Expression.range())).sum::<f64>() / n;
    let mse_p: f64 = items.iter().map(|i| oracle::mse(&i.gen, &i.gt, MotionSplit::Pose.range())).sum::<f64>() / n;
    push("mse_exp", report.mse_exp, mse_e, 1e-9);
    push("mse_pose", report.mse_pose, mse_p, 1e-9);
    let dims = MotionSplit::Expression.range();
    let rp: Vec<f64> = items
        .iter()
        .filter_map(|i| match ec.aggregation {
            PccAggregation::PerDim => oracle::rpcc(&i.gen, &i.gt, &i.user, dims.clone()),
            PccAggregation::DimAveraged => {
                let avg = |m: &MotionSeq| -> Vec<f64> {
                    (0..m.frames()).map(|t| m.data().row(t)[dims.clone()].iter().sum::<f64>() / dims.len() as f64).collect()
                };
                let u = avg(&i.user);
                Some((oracle::pcc(&avg(&i.gt), &u)? - oracle::pcc(&avg(&i.gen), &u)?).abs())
            }
        })
        .collect();
    push("rpcc", report.rpcc, rp.iter().sum::<f64>() / rp.len().max(1) as f64, 1e-9);
    let lips: Vec<f64> =
        items.iter().filter_map(|i| i.lip.as_ref().and_then(|(e, s)| oracle::lipsync(&i.gen, e, s))).collect();
    if let Some(main) = report.lipsync_pcc {
        push("lipsync_pcc", main, lips.iter().sum::<f64>() / lips.len().max(1) as f64, 1e-9);
    }
    Ok(rows)
}

pub fn report_json(r: &MetricReport) -> Value {
    let mut fields = serde_json::Map::new();
    for (k, v) in r.fields() {
        fields.insert(k.to_string(), if v.is_finite() { json!(v) } else { Value::Null });
    }
    fields.insert("rank_warning".into(), json!(r.rank_warning));
    let seqs: Vec<Value> = r
        .sequences
        .iter()
        .map(|s| json!({ "id": s.id, "mse_exp": s.mse_exp, "mse_pose": s.mse_pose, "var": s.var, "rpcc": s.rpcc, "lipsync_pcc": s.lipsync_pcc }))
        .collect();
    fields.insert("sequences".into(), Value::Array(seqs));
    Value::Object(fields)
}

pub fn report_table(r: &MetricReport) -> String {
    let mut s = format!("{:<12} {:>14}\n", "metric", "value");
    for (k, v) in r.fields() {
        s.push_str(&format!("{k:<12} {v:>14.6}\n"));
    }
    if r.rank_warning {
        s.push_str("warning: fewer pooled frames than expression dims; FD relies on the diagonal regulariser\n");
    }
    s
}

pub fn evaluate(cfg: &mut Config, out: &Path) -> Result<()> {
    let manifest = path_key(cfg, "evaluate.manifest")?;
    cfg.write_snapshot(out)?;
    let items = load_eval_items(&manifest)?;
    let report = metrics::evaluate(&items, &cfg.eval()?)?;
    let mut doc = report_json(&report);
    let oracle = if cfg.get::<bool>("evaluate.oracle")? { Some(oracle_check(&items, &report, cfg)?) } else { None };
    if let Some(rows) = &oracle {
        let v: Vec<Value> = rows.iter().map(|(k, a, b, t)| json!({ "field": k, "main": a, "oracle": b, "tolerance": t })).collect();
        doc["oracle"] = Value::Array(v);
    }
    write_text(&out.join("report.json"), &serde_json::to_string_pretty(&doc).unwrap())?;
    let table = report_table(&report);
    write_text(&out.join("report.txt"), &table)?;
    print!("{table}");
    if let Some(rows) = oracle {
        let bad: Vec<String> = rows
            .iter()
            .filter(|(_, a, b, t)| !((a - b).abs() <= t * a.abs().max(b.abs()).max(1.0)))
            .map(|(k, a, b, _)| format!("{k}: {a} vs {b}"))
            .collect();
        if !bad.is_empty() {
            return Err(CliError::Numerical(format!("oracle disagreement: {}", bad.join(", "))));
        }
        println!("oracle cross-check: all fields agree");
    }
    Ok(())
}

pub fn gradcheck_table(reports: &[OpReport]) -> String {
    let mut s = format!("{:<26} {:>12} {:>10} {:>8}  result\n", "op", "max_rel_err", "tolerance", "checked");
    for r in reports {
        let verdict = if r.passed { "pass" } else { "FAIL" };
        s.push_str(&format!("{:<26} {:>12.3e} {:>10.0e} {:>8}  {verdict}\n", r.name, r.max_rel_err, r.tolerance, r.checked));
    }
    s
}

pub fn gradcheck(cfg: &mut Config, out: &Path) -> Result<()> {
    cfg.write_snapshot(out)?;
    let opts = GradCheckOptions {
        seed: cfg.seed()?,
        eps: cfg.get("gradcheck.eps")?,
        eps_linear: cfg.get("gradcheck.eps_linear")?,
        fault: match cfg.str("gradcheck.fault") {
            "" => None,
            op if gradcheck::OPS.contains(&op) => Some(op.to_string()),
            op => return Err(CliError::Usage(format!("unknown gradcheck op `{op}`"))),
        },
    };
    let t0 = Instant::now();
    let reports = gradcheck::run_suite(&opts)?;
    let table = gradcheck_table(&reports);
    print!("{table}");
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
    let doc: Vec<Value> = reports
        .iter()
        .map(|r| json!({ "op": r.name, "max_rel_err": r.max_rel_err, "tolerance": r.tolerance, "checked": r.checked, "passed": r.passed }))
        .collect();
    write_text(&out.join("gradcheck.json"), &serde_json::to_string_pretty(&doc).unwrap())?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(CliError::Numerical(format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(())
}
