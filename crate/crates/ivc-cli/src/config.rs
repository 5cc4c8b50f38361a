//! Plain-text `key=value` run configuration with rejected unknown keys.

use ivc_core::insta::{FinetuneConfig, GlobalTrainConfig};
use ivc_core::models::ArchConfig;
use ivc_core::pipeline::CodecSettings;

/// Every tunable of the toolchain, with the standard quantization settings
/// as defaults: bin width `t = 0.001`, slab `sigma = 0.05`, spike `s = t/6`,
/// ratio `alpha = 100`, grid tail mass `epsilon = 2^-8`.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub arch: String,
    pub beta: f64,
    pub gop_size: usize,
    pub max_steps: usize,
    pub checkpoint_every: usize,
    pub lr: f32,
    pub seed: u64,
    pub t: f64,
    pub sigma: f64,
    pub s: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub temporal_subsample: usize,
    pub train_steps: usize,
    pub train_lr: f32,
    pub train_window: usize,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            arch: "ssf-lite".to_string(),
            beta: 0.0016,
            gop_size: 4,
            max_steps: 200,
            checkpoint_every: 20,
            lr: 1e-4,
            seed: 0,
            t: 0.001,
            sigma: 0.05,
            s: 0.001 / 6.0,
            alpha: 100.0,
            epsilon: 2f64.powi(-8),
            temporal_subsample: 1,
            train_steps: 500,
            train_lr: 1e-4,
            train_window: 3,
        }
    }
}

impl RunConfig {
    /// Parses `key=value` lines; `#` starts a comment; unknown keys are
    /// rejected. When `t` is set without `s`, the spike width follows as
    /// `t / 6`.
    pub fn parse(text: &str) -> Result<RunConfig, String> {
        let mut cfg = RunConfig::default();
        let mut s_given = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value, got {raw:?}", lineno + 1))?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| format!("line {}: bad {what} value {value:?}", lineno + 1);
            macro_rules! num {
                ($what:expr) => {
                    value.parse().map_err(|_| bad($what))?
                };
            }
            match key {
                "arch" => {
                    if ArchConfig::preset(value).is_none() {
                        return Err(format!(
                            "line {}: unknown arch preset {value:?} (known: {})",
                            lineno + 1,
                            ArchConfig::PRESET_NAMES.join(", ")
                        ));
                    }
                    cfg.arch = value.to_string();
                }
                "beta" => cfg.beta = num!("beta"),
                "gop_size" => {
                    cfg.gop_size = if value == "inf" { 0 } else { num!("gop_size") }
                }
                "max_steps" => cfg.max_steps = num!("max_steps"),
                "checkpoint_every" => cfg.checkpoint_every = num!("checkpoint_every"),
                "lr" => cfg.lr = num!("lr"),
                "seed" => cfg.seed = num!("seed"),
                "t" => cfg.t = num!("t"),
                "s" => {
                    cfg.s = num!("s");
                    s_given = true;
                }
                "sigma" => cfg.sigma = num!("sigma"),
                "alpha" => cfg.alpha = num!("alpha"),
                "epsilon" => cfg.epsilon = num!("epsilon"),
                "temporal_subsample" => cfg.temporal_subsample = num!("temporal_subsample"),
                "train_steps" => cfg.train_steps = num!("train_steps"),
                "train_lr" => cfg.train_lr = num!("train_lr"),
                "train_window" => cfg.train_window = num!("train_window"),
                other => return Err(format!("line {}: unknown key {other:?}", lineno + 1)),
            }
        }
        if !s_given {
            cfg.s = cfg.t / 6.0;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), String> {
        if !(self.beta > 0.0) {
            return Err("beta must be positive".to_string());
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err("epsilon must be in (0, 1)".to_string());
        }
        let exp = -self.epsilon.log2();
        if (exp - exp.round()).abs() > 1e-9 || !(1.0..=32.0).contains(&exp) {
            return Err(format!(
                "epsilon must be a power of two in (2^-32, 1/2], got {}",
                self.epsilon
            ));
        }
        if self.temporal_subsample == 0 {
            return Err("temporal_subsample must be at least 1".to_string());
        }
        if self.train_window == 0 {
            return Err("train_window must be at least 1".to_string());
        }
        Ok(())
    }

    pub fn eps_exponent(&self) -> u8 {
        (-self.epsilon.log2()).round() as u8
    }

    pub fn settings(&self, preset_id: u8) -> CodecSettings {
        CodecSettings {
            preset_id,
            gop_size: self.gop_size,
            beta: self.beta,
            sigma: self.sigma,
            s: self.s,
            alpha: self.alpha,
            t: self.t,
            eps_exponent: self.eps_exponent(),
        }
        .rounded_through_f32()
    }

    pub fn finetune(&self, clip_frames: usize) -> FinetuneConfig {
        FinetuneConfig {
            beta: self.beta,
            lr: self.lr,
            max_steps: self.max_steps,
            checkpoint_every: self.checkpoint_every,
            train_gop: 3.min(clip_frames).max(2),
            seed: self.seed,
        }
    }

    pub fn global_train(&self) -> GlobalTrainConfig {
        GlobalTrainConfig {
            beta: self.beta,
            lr: self.train_lr,
            steps: self.train_steps,
            window: self.train_window,
            seed: self.seed,
        }
    }
}
