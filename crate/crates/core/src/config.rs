//! Flat `section.key=value` run configuration: parsed from a config file,
//! overridable by CLI flags, hashed into run logs. One `Settings` value
//! carries everything a pipeline run needs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::FamilyMix;
use crate::env::{EnvConfig, TaskFamily};
use crate::error::{Error, Result};
use crate::eval::VlaEvalConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSettings {
    pub episodes: usize,
    pub seed: u64,
    pub families: FamilyMix,
    pub n_bins: usize,
    pub split_ratio: f64,
    pub split_seed: u64,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            episodes: 200,
            seed: 0,
            families: FamilyMix::default(),
            n_bins: 256,
            split_ratio: 0.9,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Settings {
    pub env: EnvConfig,
    pub data: DataSettings,
    pub train: TrainConfig,
    pub eval: VlaEvalConfig,
    /// Held-out pair budget for next-frame evaluation.
    pub wm_max_pairs: usize,
    /// Keys explicitly set by file or flag; everything else may be
    /// defaulted from the training section.
    #[serde(skip)]
    explicit: std::collections::BTreeSet<String>,
}

impl Settings {
    pub fn new() -> Self {
        Self {
            wm_max_pairs: 128,
            ..Default::default()
        }
    }

    /// File first, then overrides, then cross-section defaulting.
    pub fn from_sources(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Settings> {
        let mut s = Settings::new();
        if let Some(path) = file {
            s.load_file(path)?;
        }
        for (k, v) in overrides {
            s.apply(k, v)?;
        }
        s.finalize();
        Ok(s)
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key=value", path.display(), lineno + 1))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Rollout evaluation mirrors the training layout unless explicitly
    /// overridden.
    pub fn finalize(&mut self) {
        self.eval.layout = self.train.layout;
        if !self.explicit.contains("eval.mask_kind") {
            self.eval.mask_kind = self.train.mask_kind;
        }
        if !self.explicit.contains("eval.k_exec") {
            self.eval.k_exec = self.train.layout.k_chunk;
        }
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("serializable settings"));
        crate::env::hex_string(&h.finalize()[..8])
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        self.explicit.insert(key.to_string());
        let bad = |k: &str, v: &str| Error::Config(format!("cannot parse {k}={v}"));
        macro_rules! set {
            ($slot:expr, $ty:ty) => {
                $slot = value.parse::<$ty>().map_err(|_| bad(key, value))?
            };
        }
        match key {
            "env.width" => set!(self.env.width, f64),
            "env.height" => set!(self.env.height, f64),
            "env.front_rows" => set!(self.env.front_rows, usize),
            "env.front_cols" => set!(self.env.front_cols, usize),
            "env.wrist_rows" => set!(self.env.wrist_rows, usize),
            "env.wrist_cols" => set!(self.env.wrist_cols, usize),
            "env.grasp_radius" => set!(self.env.grasp_radius, f64),
            "env.zone_radius" => set!(self.env.zone_radius, f64),
            "env.max_step" => set!(self.env.max_step, f64),
            "env.max_episode_len" => set!(self.env.max_episode_len, usize),

            "data.episodes" => set!(self.data.episodes, usize),
            "data.seed" => set!(self.data.seed, u64),
            "data.n_bins" => set!(self.data.n_bins, usize),
            "data.split_ratio" => set!(self.data.split_ratio, f64),
            "data.split_seed" => set!(self.data.split_seed, u64),
            "data.families" => self.data.families = parse_families(value)?,

            "model.layers" => set!(self.train.model.layers, usize),
            "model.heads" => set!(self.train.model.heads, usize),
            "model.embed_dim" => set!(self.train.model.embed_dim, usize),
            "model.ff_dim" => set!(self.train.model.ff_dim, usize),
            "model.max_seq_len" => set!(self.train.model.max_seq_len, usize),
            "model.k_max" => set!(self.train.model.k_max, usize),
            "model.head_layers" => set!(self.train.model.head_layers, usize),
            "model.alpha" => set!(self.train.model.alpha, f64),
            "model.init_std" => set!(self.train.model.init_std, f64),
            "model.use_pos_emb" => set!(self.train.model.use_pos_emb, bool),
            "model.head_self_attn" => set!(self.train.model.head_self_attn, bool),

            "train.mix_ratio" => set!(self.train.mix_ratio, f64),
            "train.batch_size" => set!(self.train.batch_size, usize),
            "train.steps" => set!(self.train.steps, u64),
            "train.seed" => set!(self.train.seed, u64),
            "train.lr" => set!(self.train.optim.lr, f64),
            "train.beta1" => set!(self.train.optim.beta1, f64),
            "train.beta2" => set!(self.train.optim.beta2, f64),
            "train.adam_eps" => set!(self.train.optim.eps, f64),
            "train.weight_decay" => set!(self.train.optim.weight_decay, f64),
            "train.warmup_steps" => set!(self.train.optim.warmup_steps, u64),
            "train.m_history" => set!(self.train.layout.m_history, usize),
            "train.k_chunk" => set!(self.train.layout.k_chunk, usize),
            "train.n_rounds" => set!(self.train.layout.n_rounds, usize),
            "train.use_wrist" => set!(self.train.layout.use_wrist, bool),
            "train.use_state" => set!(self.train.layout.use_state, bool),
            "train.mask_kind" => self.train.mask_kind = value.parse()?,
            "train.discrete_action_loss" => set!(self.train.discrete_action_loss, bool),
            "train.world_model_data" => set!(self.train.world_model_data, bool),
            "train.continuous_head" => set!(self.train.continuous_head, bool),
            "train.eval_interval" => set!(self.train.eval_interval, u64),
            "train.checkpoint_interval" => set!(self.train.checkpoint_interval, u64),

            "eval.n_episodes" => set!(self.eval.n_episodes, usize),
            "eval.k_exec" => set!(self.eval.k_exec, usize),
            "eval.mask_kind" => self.eval.mask_kind = value.parse()?,
            "eval.action_type" => self.eval.action_type = value.parse()?,
            "eval.task_family" => self.eval.task_family = value.parse()?,
            "eval.seed" => set!(self.eval.seed, u64),
            "eval.replan_every_step" => set!(self.eval.replan_every_step, bool),
            "eval.wm_max_pairs" => set!(self.wm_max_pairs, usize),

            other => return Err(Error::Config(format!("unknown config key {other}"))),
        }
        Ok(())
    }

    /// The resolved view, printed at the start of every run.
    pub fn render(&self) -> String {
        format!(
            "settings_hash={}\n{}",
            self.hash(),
            serde_json::to_string_pretty(self).expect("serializable settings")
        )
    }
}

/// `family` or `family:weight,family:weight`.
fn parse_families(value: &str) -> Result<FamilyMix> {
    let mut entries = Vec::new();
    for part in value.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        match part.split_once(':') {
            Some((fam, w)) => {
                let family: TaskFamily = fam.trim().parse()?;
                let weight: f64 = w
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad family weight {w}")))?;
                entries.push((family, weight));
            }
            None => entries.push((part.parse()?, 1.0)),
        }
    }
    if entries.is_empty() {
        return Err(Error::Config("empty family mix".into()));
    }
    Ok(FamilyMix(entries))
}
