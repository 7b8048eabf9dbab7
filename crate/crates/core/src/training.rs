//! Mixed-data training loop: every batch draws policy-format and
//! world-model-format samples Bernoulli(mix_ratio), runs per-sample
//! forward/backward in parallel, accumulates gradients in batch order (so
//! runs are bit-reproducible), and applies Adam. A two-stage variant cold
//! starts from a pure world-model run.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::engine::{adam_step, AdamConfig, Gradients, OptimState};
use crate::error::{Error, Result};
use crate::masks::MaskKind;
use crate::model::{sample_loss, LossComponents, LossFlags, ModelConfig, ModelParams};
use crate::sequence::{build_vla_sample, build_wm_sample, LayoutConfig, SampleKind, TrainingSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Fraction of policy-format samples per batch; the rest are
    /// world-model-format.
    pub mix_ratio: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub optim: AdamConfig,
    pub model: ModelConfig,
    pub layout: LayoutConfig,
    /// Attention regime for policy samples (world-model samples always use
    /// the plain causal world-model mask).
    pub mask_kind: MaskKind,
    // Feature flags mirroring the ablation axes.
    pub discrete_action_loss: bool,
    pub world_model_data: bool,
    pub continuous_head: bool,
    /// Steps between eval-hook invocations; 0 disables.
    pub eval_interval: u64,
    /// Steps between checkpoint files (requires `out_dir`); 0 disables.
    pub checkpoint_interval: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mix_ratio: 0.5,
            batch_size: 8,
            steps: 600,
            seed: 0,
            optim: AdamConfig::default(),
            model: ModelConfig::default(),
            layout: LayoutConfig::default(),
            mask_kind: MaskKind::ActionIsolated,
            discrete_action_loss: true,
            world_model_data: true,
            continuous_head: true,
            eval_interval: 0,
            checkpoint_interval: 0,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::Config(format!(
                "mix_ratio {} outside [0, 1]",
                self.mix_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let vla_possible = self.mix_ratio > 0.0;
        let wm_possible = self.world_model_data && self.mix_ratio < 1.0;
        if !vla_possible && !wm_possible {
            return Err(Error::NoSampleKindEnabled);
        }
        if vla_possible && !self.discrete_action_loss && !self.continuous_head {
            return Err(Error::Config(
                "policy samples enabled but both action losses disabled".into(),
            ));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("serializable config"));
        crate::env::hex_string(&h.finalize()[..8])
    }

    fn flags(&self) -> LossFlags {
        LossFlags {
            discrete_action_loss: self.discrete_action_loss,
            continuous_head: self.continuous_head,
        }
    }

    /// Model config specialized to a dataset's vocabulary.
    pub fn model_for(&self, dataset: &Dataset) -> ModelConfig {
        let mut m = self.model.clone();
        m.vocab_size = dataset.tokenizers.layout.total_size();
        m.k_max = m.k_max.max(self.layout.k_chunk);
        m
    }
}

/// Stable sub-seed derivation: sha256(base, tag).
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: u64,
        total: f64,
        dis_action: f64,
        img: f64,
        conti: f64,
        n_vla: usize,
        n_wm: usize,
    },
    Eval {
        step: u64,
        metrics: Vec<(String, f64)>,
    },
}

/// Append-only run log: config snapshot plus per-step loss components and
/// periodic eval metrics, serialized as line-delimited JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config_json: String,
    pub config_hash: String,
    pub seed: u64,
    pub records: Vec<LogRecord>,
}

impl RunLog {
    fn new(cfg: &TrainConfig) -> Self {
        Self {
            config_json: serde_json::to_string(cfg).expect("serializable config"),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            records: Vec::new(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{{\"config_hash\":\"{}\",\"seed\":{},\"config\":{}}}\n",
            self.config_hash, self.seed, self.config_json
        ));
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("serializable record"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn eval_series(&self, metric: &str) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Eval { step, metrics } => metrics
                    .iter()
                    .find(|(k, _)| k == metric)
                    .map(|(_, v)| (*step, *v)),
                _ => None,
            })
            .collect()
    }

    /// Mean total loss over the `window` steps ending at `at_step`.
    pub fn moving_average_total(&self, window: u64, at_step: u64) -> Option<f64> {
        let lo = at_step.saturating_sub(window);
        let vals: Vec<f64> = self
            .records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { step, total, .. } if *step > lo && *step <= at_step => {
                    Some(*total)
                }
                _ => None,
            })
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// Per-sample kind and position draws for one batch. Positions are uniform
/// over the valid starts for the sample kind.
pub fn make_batch(
    dataset: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainingSample>> {
    if indices.is_empty() {
        return Err(Error::TooFewEpisodes(0));
    }
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let want_vla = if !cfg.world_model_data {
            true
        } else if cfg.mix_ratio >= 1.0 {
            true
        } else if cfg.mix_ratio <= 0.0 {
            false
        } else {
            rng.gen_range(0.0..1.0) < cfg.mix_ratio
        };
        let sample = if want_vla {
            let (ep_idx, t) = draw_position(dataset, indices, cfg.layout.k_chunk, 0, rng)?;
            build_vla_sample(&dataset.tokenizers, &dataset.episodes[ep_idx], t, &cfg.layout)?
        } else {
            let (ep_idx, t) = draw_position(dataset, indices, cfg.layout.n_rounds, 1, rng)?;
            build_wm_sample(&dataset.tokenizers, &dataset.episodes[ep_idx], t, &cfg.layout)?
        };
        batch.push(sample);
    }
    Ok(batch)
}

fn draw_position(
    dataset: &Dataset,
    indices: &[usize],
    span: usize,
    tail: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize)> {
    for _ in 0..100 {
        let ep_idx = indices[rng.gen_range(0..indices.len())];
        let len = dataset.episodes[ep_idx].len();
        if len < span + tail {
            continue;
        }
        let max_t = len - span - tail;
        return Ok((ep_idx, rng.gen_range(0..=max_t)));
    }
    Err(Error::Config(format!(
        "no training episode long enough for span {span}"
    )))
}

pub struct TrainOutcome {
    pub model: ModelParams<f32>,
    pub log: RunLog,
}

/// Optional per-eval-interval callback; returned metrics land in the run log.
pub type EvalHook<'a> = &'a mut dyn FnMut(u64, &ModelParams<f32>) -> Result<Vec<(String, f64)>>;

pub fn train(cfg: &TrainConfig, dataset: &Dataset, hook: Option<EvalHook>) -> Result<TrainOutcome> {
    let init = init_model(cfg, dataset)?;
    train_from(cfg, dataset, init, hook)
}

pub fn init_model(cfg: &TrainConfig, dataset: &Dataset) -> Result<ModelParams<f32>> {
    ModelParams::init(
        cfg.model_for(dataset),
        &dataset.tokenizers.hash(),
        &bins_hash(dataset),
        derive_seed(cfg.seed, "model_init"),
    )
}

pub fn bins_hash(dataset: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&dataset.tokenizers.action_bins).expect("bins"));
    h.update(serde_json::to_vec(&dataset.tokenizers.state_bins).expect("bins"));
    crate::env::hex_string(&h.finalize()[..8])
}

/// Training from explicit initial parameters (resume path). The optimizer
/// state always starts fresh.
pub fn train_from(
    cfg: &TrainConfig,
    dataset: &Dataset,
    mut model: ModelParams<f32>,
    mut hook: Option<EvalHook>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let expect_cfg = cfg.model_for(dataset);
    if model.cfg != expect_cfg {
        return Err(Error::CheckpointMismatch(format!(
            "resume config hash {} differs from requested {}",
            model.cfg.hash(),
            expect_cfg.hash()
        )));
    }
    if model.vocab_hash != dataset.tokenizers.hash() {
        return Err(Error::CheckpointMismatch(
            "resume vocabulary differs from dataset".into(),
        ));
    }
    let indices = dataset.train_indices();
    let mut optim: OptimState<f32> = OptimState::new(cfg.optim, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batches"));
    let mut log = RunLog::new(cfg);
    let flags = cfg.flags();
    let n_params = model.params.len();
    let inv_batch = 1.0f32 / cfg.batch_size as f32;

    for step in 1..=cfg.steps {
        let batch = make_batch(dataset, &indices, cfg, &mut rng)?;
        if !cfg.world_model_data {
            assert!(
                batch.iter().all(|s| s.layout.kind == SampleKind::Vla),
                "world-model samples with flag disabled"
            );
        }
        let results: Result<Vec<(Vec<Option<crate::engine::Tensor<f32>>>, LossComponents, SampleKind)>> =
            batch
                .par_iter()
                .map(|sample| {
                    let kind = match sample.layout.kind {
                        SampleKind::Vla => cfg.mask_kind,
                        SampleKind::WorldModel => MaskKind::WorldModel,
                    };
                    let (g, loss, comps) = sample_loss(&model, sample, kind, &flags)?;
                    let grads = g.backward(loss, n_params)?;
                    Ok((grads, comps, sample.layout.kind))
                })
                .collect();
        let results = results?;

        // Batch-order accumulation keeps runs bit-identical.
        let mut acc: Gradients<f32> = Gradients::zeros(n_params);
        let mut total = 0.0;
        let mut dis_action = 0.0;
        let mut img = 0.0;
        let mut conti = 0.0;
        let mut n_vla = 0usize;
        let mut n_wm = 0usize;
        for (slots, comps, kind) in &results {
            acc.add_scaled(slots, inv_batch);
            total += comps.total;
            dis_action += comps.dis_action;
            img += comps.img;
            conti += comps.conti;
            match kind {
                SampleKind::Vla => n_vla += 1,
                SampleKind::WorldModel => n_wm += 1,
            }
        }
        let b = cfg.batch_size as f64;
        let (total, dis_action, img, conti) = (total / b, dis_action / b, img / b, conti / b);
        if !total.is_finite() {
            return Err(Error::NonFiniteTrainingLoss {
                step,
                dis_action,
                img,
                conti,
            });
        }
        adam_step(&mut model.params, &acc, &mut optim)?;
        log.records.push(LogRecord::Step {
            step,
            total,
            dis_action,
            img,
            conti,
            n_vla,
            n_wm,
        });

        if cfg.eval_interval > 0 && step % cfg.eval_interval == 0 {
            if let Some(h) = hook.as_mut() {
                let metrics = h(step, &model)?;
                log.records.push(LogRecord::Eval { step, metrics });
            }
        }
        if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 {
            if let Some(dir) = &cfg.out_dir {
                std::fs::create_dir_all(dir)?;
                crate::model::save_checkpoint(&model, &dir.join(format!("ckpt_step{step}.bin")))?;
            }
        }
    }
    Ok(TrainOutcome { model, log })
}

/// Cold start: a pure world-model stage followed by the main stage resuming
/// from its parameters with a fresh optimizer state.
pub fn pretrain_then_finetune(
    cfg_pre: &TrainConfig,
    cfg_ft: &TrainConfig,
    dataset: &Dataset,
    hook: Option<EvalHook>,
) -> Result<(TrainOutcome, RunLog)> {
    if cfg_pre.mix_ratio != 0.0 {
        return Err(Error::Config(format!(
            "pretraining stage must be pure world-model (mix_ratio 0), got {}",
            cfg_pre.mix_ratio
        )));
    }
    if cfg_pre.steps == 0 {
        // Degenerate stage: plain single-stage training.
        let out = train(cfg_ft, dataset, hook)?;
        let pre_log = RunLog::new(cfg_pre);
        return Ok((out, pre_log));
    }
    let pre = train(cfg_pre, dataset, None)?;
    let out = train_from(cfg_ft, dataset, pre.model, hook)?;
    Ok((out, pre.log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{collect, FamilyMix};
    use crate::env::EnvConfig;

    fn small_cfg(dataset_bins: usize) -> (Dataset, TrainConfig) {
        let mut d = collect(&EnvConfig::default(), 6, 3, &FamilyMix::default(), dataset_bins).unwrap();
        d.assign_split(0.8, 0).unwrap();
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 2,
            model: ModelConfig {
                layers: 1,
                heads: 2,
                embed_dim: 16,
                ff_dim: 32,
                max_seq_len: 512,
                k_max: 5,
                head_layers: 1,
                ..Default::default()
            },
            layout: LayoutConfig {
                m_history: 1,
                k_chunk: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        (d, cfg)
    }

    #[test]
    fn mix_ratio_extremes_select_one_kind() {
        let (d, mut cfg) = small_cfg(16);
        let indices = d.train_indices();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        cfg.mix_ratio = 1.0;
        cfg.batch_size = 8;
        let batch = make_batch(&d, &indices, &cfg, &mut rng).unwrap();
        assert!(batch.iter().all(|s| s.layout.kind == SampleKind::Vla));
        cfg.mix_ratio = 0.0;
        let batch = make_batch(&d, &indices, &cfg, &mut rng).unwrap();
        assert!(batch.iter().all(|s| s.layout.kind == SampleKind::WorldModel));
    }

    #[test]
    fn mix_fraction_tracks_ratio() {
        let (d, mut cfg) = small_cfg(16);
        let indices = d.train_indices();
        cfg.mix_ratio = 0.5;
        cfg.batch_size = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = make_batch(&d, &indices, &cfg, &mut rng).unwrap();
        let vla = batch
            .iter()
            .filter(|s| s.layout.kind == SampleKind::Vla)
            .count() as f64
            / batch.len() as f64;
        assert!((vla - 0.5).abs() < 0.02, "vla fraction {vla}");
    }

    #[test]
    fn disabled_kinds_error() {
        let (_, mut cfg) = small_cfg(16);
        cfg.world_model_data = false;
        cfg.mix_ratio = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::NoSampleKindEnabled)));
        let mut cfg2 = cfg.clone();
        cfg2.world_model_data = true;
        cfg2.mix_ratio = 0.5;
        cfg2.discrete_action_loss = false;
        cfg2.continuous_head = false;
        assert!(cfg2.validate().is_err());
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (d, mut cfg) = small_cfg(16);
        cfg.steps = 0;
        let out = train(&cfg, &d, None).unwrap();
        let fresh = init_model(&cfg, &d).unwrap();
        for (a, b) in out.model.params.iter().zip(fresh.params.iter()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
        assert!(out.log.records.is_empty());
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let (d, cfg) = small_cfg(16);
        let a = train(&cfg, &d, None).unwrap();
        let b = train(&cfg, &d, None).unwrap();
        for (pa, pb) in a.model.params.iter().zip(b.model.params.iter()) {
            let ba: Vec<u32> = pa.tensor.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = pb.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ba, bb, "param {} diverged", pa.name);
        }
        assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
    }

    #[test]
    fn head_gradients_are_zero_with_continuous_head_off() {
        let (d, mut cfg) = small_cfg(16);
        cfg.continuous_head = false;
        let model = init_model(&cfg, &d).unwrap();
        let indices = d.train_indices();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        cfg.mix_ratio = 1.0;
        let batch = make_batch(&d, &indices, &cfg, &mut rng).unwrap();
        let (g, loss, _) =
            sample_loss(&model, &batch[0], cfg.mask_kind, &cfg.flags()).unwrap();
        let grads = g.backward(loss, model.params.len()).unwrap();
        for slot in model.head_param_slots() {
            assert!(grads[slot].is_none(), "head slot {slot} received gradient");
        }
    }

    #[test]
    fn pretrain_guards_and_degenerate_stage() {
        let (d, cfg) = small_cfg(16);
        let mut pre = cfg.clone();
        pre.mix_ratio = 0.5;
        assert!(pretrain_then_finetune(&pre, &cfg, &d, None).is_err());

        let mut pre = cfg.clone();
        pre.mix_ratio = 0.0;
        pre.steps = 0;
        let (two_stage, _) = pretrain_then_finetune(&pre, &cfg, &d, None).unwrap();
        let single = train(&cfg, &d, None).unwrap();
        for (a, b) in two_stage.model.params.iter().zip(single.model.params.iter()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
    }

    #[test]
    fn resume_rejects_mismatched_config() {
        let (d, cfg) = small_cfg(16);
        let out = train(&cfg, &d, None).unwrap();
        let mut other = cfg.clone();
        other.model.embed_dim = 32;
        assert!(matches!(
            train_from(&other, &d, out.model, None),
            Err(Error::CheckpointMismatch(_))
        ));
    }
}
