//! Flat `key = value` configuration with dotted keys.
//!
//! Sources are applied in order (defaults, file, `--set` overrides, explicit
//! flags); later sources win. Unknown keys are rejected. The resolved
//! snapshot lists every key and replays the run when passed back as
//! `--config`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use echo_core::generator::GeneratorConfig;
use echo_core::lcu::{Ablation, LcuConfig};
use echo_core::metrics::{EvalConfig, PccAggregation};
use echo_core::optim::AdamWConfig;
use echo_core::synthdata::SynthConfig;
use echo_core::training::{Stage1Config, Stage2Config};

use crate::error::{CliError, Result};

/// Every accepted key with its default.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    // Synthetic data.
    ("synth.n", "64"),
    ("synth.windows", "1"),
    ("synth.history", "64"),
    ("synth.current", "16"),
    ("synth.prev", "4"),
    ("synth.seg_min", "12"),
    ("synth.seg_max", "32"),
    ("synth.max_gap", "3"),
    ("synth.lag", "3"),
    ("synth.rho", "0.7"),
    ("synth.sigma_n", "0.05"),
    ("synth.offset_scale", "0.5"),
    ("synth.user_latent_dim", "4"),
    ("synth.user_smoothing", "0.85"),
    ("synth.loading_scale", "2"),
    ("synth.syllable_min", "3"),
    ("synth.syllable_max", "7"),
    ("synth.bump_width", "1.2"),
    ("synth.lip_noise", "0.02"),
    ("synth.audio_noise", "0.01"),
    ("synth.pose_scale", "0.1"),
    ("synth.audio_dim", "32"),
    ("synth.window", "5"),
    ("synth.visual_grid", "4"),
    ("synth.visual_dim", "16"),
    ("synth.visual_noise", "0.02"),
    ("synth.channels", "4"),
    ("synth.height", "8"),
    ("synth.width", "8"),
    ("synth.codec_gain", "3"),
    ("synth.world_seed", "60480"),
    // Model.
    ("model.dim", "16"),
    ("model.heads", "2"),
    ("model.blocks", "2"),
    ("model.time_dim", "16"),
    ("model.ffn_mult", "2"),
    ("model.context_radius", "2"),
    ("model.gate_dim", "8"),
    ("lcu.audio_layers", "2"),
    ("lcu.state_dim", "16"),
    ("lcu.visual_layers", "1"),
    ("lcu.perception_dim", "16"),
    ("lcu.understanding_dim", "12"),
    ("lcu.understanding_tokens", "8"),
    ("lcu.gca_heads", "1"),
    ("lcu.vocab", "256"),
    ("lcu.emotion_dim", "16"),
    ("understanding", "stat_stub"),
    ("understanding.seed", "3"),
    ("reasoner", "keyword"),
    ("reasoner.table", ""),
    ("ablation.lpe", "true"),
    ("ablation.hbcu", "true"),
    ("ablation.lau", "true"),
    ("ablation.sdcm", "true"),
    // Training.
    ("train.stage", "1"),
    ("train.data", ""),
    ("train.stage1_ckpt", ""),
    ("train.stage1.lambda", "0.1"),
    ("train.stage1.lr", "0.002"),
    ("train.stage1.steps", "1000"),
    ("train.stage1.batch", "4"),
    ("train.stage2.gamma", "0.5"),
    ("train.stage2.rank", "8"),
    ("train.stage2.adapter_scale", "1"),
    ("train.stage2.subset", "2"),
    ("train.stage2.w_min", "0.1"),
    ("train.stage2.lr_adapters", "0.002"),
    ("train.stage2.lr_other", "0.002"),
    ("train.stage2.steps", "1000"),
    ("train.stage2.batch", "4"),
    ("train.optimizer.beta1", "0.9"),
    ("train.optimizer.beta2", "0.999"),
    ("train.optimizer.eps", "1e-8"),
    ("train.optimizer.weight_decay", "0.01"),
    // Generation.
    ("generate.ckpt", ""),
    ("generate.data", ""),
    ("generate.n_steps", "8"),
    ("generate.chain", "false"),
    // Evaluation.
    ("evaluate.manifest", ""),
    ("evaluate.k_exp", "15"),
    ("evaluate.k_pose", "9"),
    ("evaluate.kmeans_seed", "24301"),
    ("evaluate.restarts", "20"),
    ("evaluate.iterations", "300"),
    ("evaluate.aggregation", "per-dim"),
    ("evaluate.oracle", "false"),
    // Gradient check.
    ("gradcheck.eps", "1e-5"),
    ("gradcheck.eps_linear", "1e-3"),
    ("gradcheck.fault", ""),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|&(k, v)| (k, v.to_string())).collect() }
    }
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = KEYS.iter().find(|(k, _)| *k == key).ok_or_else(|| CliError::UnknownKey(key.to_string()))?.0;
        self.values.insert(k, value.trim().to_string());
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        self.apply_text(&text)
    }

    /// Parses a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.str(key);
        v.parse().map_err(|_| CliError::Usage(format!("invalid value `{v}` for `{key}`")))
    }

    /// Every key, sorted, one `key = value` per line.
    pub fn snapshot(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join("resolved.cfg");
        fs::write(&path, self.snapshot()).map_err(|e| CliError::io(&path, e))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let c = SynthConfig {
            history: self.get("synth.history")?,
            current: self.get("synth.current")?,
            prev: self.get("synth.prev")?,
            seg_min: self.get("synth.seg_min")?,
            seg_max: self.get("synth.seg_max")?,
            max_gap: self.get("synth.max_gap")?,
            lag: self.get("synth.lag")?,
            rho: self.get("synth.rho")?,
            sigma_n: self.get("synth.sigma_n")?,
            offset_scale: self.get("synth.offset_scale")?,
            user_latent_dim: self.get("synth.user_latent_dim")?,
            user_smoothing: self.get("synth.user_smoothing")?,
            loading_scale: self.get("synth.loading_scale")?,
            syllable_min: self.get("synth.syllable_min")?,
            syllable_max: self.get("synth.syllable_max")?,
            bump_width: self.get("synth.bump_width")?,
            lip_noise: self.get("synth.lip_noise")?,
            audio_noise: self.get("synth.audio_noise")?,
            pose_scale: self.get("synth.pose_scale")?,
            audio_dim: self.get("synth.audio_dim")?,
            window: self.get("synth.window")?,
            visual_grid: self.get("synth.visual_grid")?,
            visual_dim: self.get("synth.visual_dim")?,
            visual_noise: self.get("synth.visual_noise")?,
            channels: self.get("synth.channels")?,
            height: self.get("synth.height")?,
            width: self.get("synth.width")?,
            codec_gain: self.get("synth.codec_gain")?,
            world_seed: self.get("synth.world_seed")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn ablation(&self) -> Result<Ablation> {
        Ok(Ablation {
            lpe: self.get("ablation.lpe")?,
            hbcu: self.get("ablation.hbcu")?,
            lau: self.get("ablation.lau")?,
            sdcm: self.get("ablation.sdcm")?,
        })
    }

    /// LCU widths; audio and visual layouts come from the data.
    pub fn lcu(&self, window: usize, audio_dim: usize, visual_dim: usize) -> Result<LcuConfig> {
        Ok(LcuConfig {
            window,
            audio_dim,
            audio_layers: self.get("lcu.audio_layers")?,
            state_dim: self.get("lcu.state_dim")?,
            visual_dim,
            visual_layers: self.get("lcu.visual_layers")?,
            perception_dim: self.get("lcu.perception_dim")?,
            understanding_dim: self.get("lcu.understanding_dim")?,
            understanding_tokens: self.get("lcu.understanding_tokens")?,
            gca_heads: self.get("lcu.gca_heads")?,
            vocab: self.get("lcu.vocab")?,
            emotion_dim: self.get("lcu.emotion_dim")?,
        })
    }

    /// Generator widths; latent and audio layouts come from the data.
    pub fn generator(&self, layout: &DataLayout) -> Result<GeneratorConfig> {
        let c = GeneratorConfig {
            channels: layout.channels,
            height: layout.height,
            width: layout.width,
            cur_frames: layout.current,
            prev_frames: layout.prev,
            model_dim: self.get("model.dim")?,
            heads: self.get("model.heads")?,
            blocks: self.get("model.blocks")?,
            audio_window: layout.window,
            audio_dim: layout.audio_dim,
            user_dim: self.get("lcu.perception_dim")?,
            emotion_dim: self.get("lcu.emotion_dim")?,
            context_radius: self.get("model.context_radius")?,
            gate_dim: self.get("model.gate_dim")?,
            time_dim: self.get("model.time_dim")?,
            ffn_mult: self.get("model.ffn_mult")?,
        };
        c.validate()?;
        Ok(c)
    }

    fn optimizer(&self) -> Result<AdamWConfig> {
        Ok(AdamWConfig {
            beta1: self.get("train.optimizer.beta1")?,
            beta2: self.get("train.optimizer.beta2")?,
            eps: self.get("train.optimizer.eps")?,
            weight_decay: self.get("train.optimizer.weight_decay")?,
        })
    }

    pub fn stage1(&self) -> Result<Stage1Config> {
        let c = Stage1Config {
            lambda: self.get("train.stage1.lambda")?,
            lr: self.get("train.stage1.lr")?,
            optimizer: self.optimizer()?,
            steps: self.get("train.stage1.steps")?,
            batch: self.get("train.stage1.batch")?,
            seed: self.seed()?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn stage2(&self) -> Result<Stage2Config> {
        Ok(Stage2Config {
            gamma: self.get("train.stage2.gamma")?,
            rank: self.get("train.stage2.rank")?,
            adapter_scale: self.get("train.stage2.adapter_scale")?,
            subset: self.get("train.stage2.subset")?,
            w_min: self.get("train.stage2.w_min")?,
            lr_adapters: self.get("train.stage2.lr_adapters")?,
            lr_other: self.get("train.stage2.lr_other")?,
            optimizer: self.optimizer()?,
            steps: self.get("train.stage2.steps")?,
            batch: self.get("train.stage2.batch")?,
            seed: self.seed()?,
        })
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            k_exp: self.get("evaluate.k_exp")?,
            k_pose: self.get("evaluate.k_pose")?,
            kmeans_seed: self.get("evaluate.kmeans_seed")?,
            restarts: self.get("evaluate.restarts")?,
            iterations: self.get("evaluate.iterations")?,
            aggregation: PccAggregation::parse(self.str("evaluate.aggregation"))?,
        })
    }
}

/// Shapes shared by every sample of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataLayout {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub current: usize,
    pub prev: usize,
    pub window: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
}

impl DataLayout {
    pub fn of(s: &echo_core::datamodel::ConversationSample) -> Self {
        Self {
            channels: s.gt_latent.channels(),
            height: s.gt_latent.height(),
            width: s.gt_latent.width(),
            current: s.current_len(),
            prev: s.prev_len(),
            window: s.user_audio.window(),
            audio_dim: s.user_audio.dim(),
            visual_dim: s.user_visual.dim(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_library_defaults() {
        let c = Config::default();
        assert_eq!(c.synth().unwrap(), SynthConfig::default());
        let s1 = c.stage1().unwrap();
        assert_eq!(s1, Stage1Config::default());
        assert_eq!(c.stage2().unwrap(), Stage2Config::default());
        assert_eq!(c.eval().unwrap(), EvalConfig::default());
        assert_eq!(c.ablation().unwrap(), Ablation::default());
        assert_eq!(c.lcu(5, 32, 16).unwrap(), LcuConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_named() {
        let mut c = Config::default();
        let e = c.apply_text("synth.n = 3\nsynth.nope = 1\n").unwrap_err();
        assert!(e.to_string().contains("synth.nope"));
        c.set("synth.rho", "abc").unwrap();
        assert!(c.synth().unwrap_err().to_string().contains("synth.rho"));
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = Config::default();
        c.apply_override("train.stage2.gamma=0.25").unwrap();
        let mut d = Config::default();
        d.apply_text(&c.snapshot()).unwrap();
        assert_eq!(c, d);
    }
}
