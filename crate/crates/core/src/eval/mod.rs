//! Evaluation harnesses: deployment rollouts (success rate over seeded
//! episodes, open-loop chunk execution), next-frame prediction quality on the
//! held-out split, decode-step accounting, and the ablation drivers.

mod metrics;

pub use metrics::{grid_to_intensity, psnr, ssim, PSNR_CAP_DB};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::env::{Action, Env, EnvConfig, Observation, TaskFamily};
use crate::error::{Error, Result};
use crate::masks::MaskKind;
use crate::model::{
    decode_continuous_chunk, decode_discrete_chunk, rollout_world_model, DecodeMode, ModelParams,
};
use crate::sequence::{build_vla_prefix, LayoutConfig};
use crate::tokenizer::Tokenizers;
use crate::training::{derive_seed, train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionType {
    Discrete,
    Continuous,
}

impl std::str::FromStr for ActionType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discrete" => Ok(Self::Discrete),
            "continuous" => Ok(Self::Continuous),
            other => Err(Error::Config(format!("unknown action type {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlaEvalConfig {
    pub n_episodes: usize,
    /// Actions executed per decoded chunk before re-observation.
    pub k_exec: usize,
    pub action_type: ActionType,
    pub task_family: TaskFamily,
    pub seed: u64,
    pub layout: LayoutConfig,
    pub mask_kind: MaskKind,
    /// Re-plan after every executed action instead of running the chunk
    /// open-loop.
    pub replan_every_step: bool,
}

impl Default for VlaEvalConfig {
    fn default() -> Self {
        Self {
            n_episodes: 50,
            k_exec: 5,
            action_type: ActionType::Continuous,
            task_family: TaskFamily::SingleTarget,
            seed: 1000,
            layout: LayoutConfig::default(),
            mask_kind: MaskKind::ActionIsolated,
            replan_every_step: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub outcomes: Vec<bool>,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub decode_steps_total: u64,
}

impl EvalReport {
    pub fn success_rate(&self) -> f64 {
        self.metrics["success_rate"]
    }

    /// Tab-separated rendering plus a short human-readable summary.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tvalue\n");
        for (k, v) in &self.metrics {
            out.push_str(&format!("{k}\t{v}\n"));
        }
        out
    }
}

/// Episode seeds for one evaluation: a dedicated stream, disjoint from the
/// collection stream by construction.
fn episode_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n)
        .map(|i| derive_seed(base, &format!("eval_episode_{i}")))
        .collect()
}

enum Policy<'a> {
    Model(&'a ModelParams<f32>, &'a Tokenizers),
    Random,
    Expert,
}

/// Success rate over seeded deployment rollouts. Each decision renders the
/// current observation, decodes a chunk, executes `k_exec` actions open-loop
/// (or one action with re-planning), then re-observes, until success or the
/// episode time limit.
pub fn eval_vla(
    model: &ModelParams<f32>,
    toks: &Tokenizers,
    env_cfg: &EnvConfig,
    cfg: &VlaEvalConfig,
) -> Result<EvalReport> {
    if model.vocab_hash != toks.hash() {
        return Err(Error::CheckpointMismatch(
            "checkpoint vocabulary differs from tokenizer metadata".into(),
        ));
    }
    run_rollouts(Policy::Model(model, toks), env_cfg, cfg)
}

/// Uniform-random actions through the identical harness; the floor any
/// trained policy must beat.
pub fn eval_random_baseline(env_cfg: &EnvConfig, cfg: &VlaEvalConfig) -> Result<EvalReport> {
    run_rollouts(Policy::Random, env_cfg, cfg)
}

/// The scripted expert through the identical harness; the ceiling.
pub fn eval_expert(env_cfg: &EnvConfig, cfg: &VlaEvalConfig) -> Result<EvalReport> {
    run_rollouts(Policy::Expert, env_cfg, cfg)
}

fn run_rollouts(policy: Policy, env_cfg: &EnvConfig, cfg: &VlaEvalConfig) -> Result<EvalReport> {
    let env = Env::new(env_cfg.clone());
    let seeds = episode_seeds(cfg.seed, cfg.n_episodes);
    let results: Result<Vec<(bool, u64)>> = seeds
        .par_iter()
        .map(|&seed| run_episode(&policy, &env, seed, cfg))
        .collect();
    let results = results?;
    let outcomes: Vec<bool> = results.iter().map(|(s, _)| *s).collect();
    let decode_steps_total: u64 = results.iter().map(|(_, d)| *d).sum();
    let success_rate =
        outcomes.iter().filter(|&&b| b).count() as f64 / outcomes.len().max(1) as f64;
    let mut metrics = BTreeMap::new();
    metrics.insert("success_rate".to_string(), success_rate);
    metrics.insert("episodes".to_string(), outcomes.len() as f64);
    metrics.insert("decode_steps_total".to_string(), decode_steps_total as f64);
    let config_hash = match policy {
        Policy::Model(m, _) => m.cfg.hash(),
        Policy::Random => "random".to_string(),
        Policy::Expert => "expert".to_string(),
    };
    Ok(EvalReport {
        metrics,
        outcomes,
        seeds,
        config_hash,
        decode_steps_total,
    })
}

fn run_episode(
    policy: &Policy,
    env: &Env,
    seed: u64,
    cfg: &VlaEvalConfig,
) -> Result<(bool, u64)> {
    let (mut state, task) = env.reset(seed, cfg.task_family)?;
    let max_len = env.cfg().max_episode_len;
    let mut history: Vec<Observation> = vec![env.render(&state)];
    let mut decode_steps = 0u64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "episode_rng"));

    while (state.step_count as usize) < max_len {
        if env.is_success(&state, &task) {
            return Ok((true, decode_steps));
        }
        let chunk: Vec<[f64; 3]> = match policy {
            Policy::Model(model, toks) => {
                let m = cfg.layout.m_history;
                let frames: Vec<&Observation> = (0..m)
                    .map(|h| {
                        let back = m - 1 - h;
                        &history[history.len().saturating_sub(1 + back).max(0)]
                    })
                    .collect();
                let proprio = env.proprio(&state);
                let (prefix, spans) =
                    build_vla_prefix(toks, &task.instruction, &proprio, &frames, &cfg.layout)?;
                match cfg.action_type {
                    ActionType::Discrete => {
                        let (actions, steps) = decode_discrete_chunk(
                            *model,
                            toks,
                            &prefix,
                            &spans,
                            cfg.k_exec,
                            cfg.mask_kind,
                            DecodeMode::Greedy,
                            &mut rng,
                        )?;
                        decode_steps += steps as u64;
                        actions
                    }
                    ActionType::Continuous => {
                        let (actions, steps) =
                            decode_continuous_chunk(*model, &prefix, &spans, cfg.k_exec)?;
                        decode_steps += steps as u64;
                        actions
                    }
                }
            }
            Policy::Random => {
                let ms = env.cfg().max_step;
                (0..cfg.k_exec)
                    .map(|_| {
                        [
                            rng.gen_range(-ms..ms),
                            rng.gen_range(-ms..ms),
                            rng.gen_range(-1.0..1.0),
                        ]
                    })
                    .collect()
            }
            Policy::Expert => {
                // One expert action per decision; chunking is meaningless
                // for the scripted oracle.
                let a = env.expert_action(&state, &task)?;
                vec![a.as_array()]
            }
        };

        let execute = if cfg.replan_every_step { 1 } else { chunk.len() };
        for a in chunk.iter().take(execute) {
            state = env.step(&state, &Action::new(a[0], a[1], a[2]));
            history.push(env.render(&state));
            if env.is_success(&state, &task) {
                return Ok((true, decode_steps));
            }
            if state.step_count as usize >= max_len {
                return Ok((false, decode_steps));
            }
        }
    }
    Ok((env.is_success(&state, &task), decode_steps))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WmReport {
    pub token_accuracy: f64,
    pub frame_exact_match: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub n_pairs: usize,
    pub decode_steps_per_pair: u64,
}

/// Next-frame prediction quality on the held-out split, averaged over valid
/// (episode, t) pairs (deterministically strided down to `max_pairs`).
pub fn eval_wm(
    model: &ModelParams<f32>,
    dataset: &Dataset,
    layout: &LayoutConfig,
    n_rounds: usize,
    max_pairs: usize,
) -> Result<WmReport> {
    let val = dataset.val_indices();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for &ep_idx in &val {
        let len = dataset.episodes[ep_idx].len();
        if len < n_rounds + 1 {
            continue;
        }
        for t in 0..=(len - 1 - n_rounds) {
            pairs.push((ep_idx, t));
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyValidationSet);
    }
    if pairs.len() > max_pairs {
        let stride_pairs: Vec<(usize, usize)> = (0..max_pairs)
            .map(|i| pairs[i * pairs.len() / max_pairs])
            .collect();
        pairs = stride_pairs;
    }

    let toks = &dataset.tokenizers;
    let results: Result<Vec<(usize, usize, usize, usize, f64, f64, u64)>> = pairs
        .par_iter()
        .map(|&(ep_idx, t)| {
            let ep = &dataset.episodes[ep_idx];
            let actions: Vec<[f64; 3]> = (0..n_rounds)
                .map(|i| ep.steps[t + i].action.as_array())
                .collect();
            let out = rollout_world_model(
                model,
                toks,
                &ep.steps[t].obs,
                &actions,
                n_rounds,
                layout.use_wrist,
            )?;
            let mut correct = 0usize;
            let mut cells = 0usize;
            let mut exact = 0usize;
            let mut psnr_sum = 0.0;
            let mut ssim_sum = 0.0;
            let mut frames = 0usize;
            for (i, (front, wrist)) in out.frames.iter().enumerate() {
                let gt = &ep.steps[t + i + 1].obs;
                let mut pair_exact = true;
                for (pred, truth) in
                    [(front, &gt.front)].into_iter().chain(wrist.as_ref().map(|w| (w, &gt.wrist)))
                {
                    let eq = pred
                        .cells
                        .iter()
                        .zip(&truth.cells)
                        .filter(|(a, b)| a == b)
                        .count();
                    correct += eq;
                    cells += truth.cells.len();
                    pair_exact &= eq == truth.cells.len();
                    let pi = grid_to_intensity(pred);
                    let ti = grid_to_intensity(truth);
                    psnr_sum += psnr(&pi, &ti, 255.0)?;
                    ssim_sum += ssim(&pi, &ti, 255.0)?;
                    frames += 1;
                }
                exact += pair_exact as usize;
            }
            Ok((
                correct,
                cells,
                exact,
                out.frames.len(),
                psnr_sum / frames as f64,
                ssim_sum / frames as f64,
                out.decode_steps as u64 / n_rounds as u64,
            ))
        })
        .collect();
    let results = results?;
    let total_cells: usize = results.iter().map(|r| r.1).sum();
    let total_correct: usize = results.iter().map(|r| r.0).sum();
    let total_frames: usize = results.iter().map(|r| r.3).sum();
    let total_exact: usize = results.iter().map(|r| r.2).sum();
    Ok(WmReport {
        token_accuracy: total_correct as f64 / total_cells as f64,
        frame_exact_match: total_exact as f64 / total_frames as f64,
        psnr: results.iter().map(|r| r.4).sum::<f64>() / results.len() as f64,
        ssim: results.iter().map(|r| r.5).sum::<f64>() / results.len() as f64,
        n_pairs: results.len(),
        decode_steps_per_pair: results[0].6,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeCostKind {
    Discrete,
    Continuous,
    WorldModelFrame,
}

/// Exact sequential decode-step counts, cross-checked against the counters
/// the decode operations report.
pub fn count_decode_steps(
    kind: DecodeCostKind,
    k: usize,
    dims: usize,
    frame_tokens: usize,
) -> usize {
    match kind {
        DecodeCostKind::Discrete => k * dims,
        DecodeCostKind::Continuous => 1,
        DecodeCostKind::WorldModelFrame => frame_tokens,
    }
}

/// Builds a training-loop eval hook that reports rollout success rate.
pub fn success_rate_hook<'a>(
    toks: &'a Tokenizers,
    env_cfg: &'a EnvConfig,
    eval_cfg: VlaEvalConfig,
) -> impl FnMut(u64, &ModelParams<f32>) -> Result<Vec<(String, f64)>> + 'a {
    move |_step, model| {
        let rep = eval_vla(model, toks, env_cfg, &eval_cfg)?;
        Ok(vec![("success_rate".to_string(), rep.success_rate())])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub k: usize,
    pub mask: MaskKind,
    pub mean: f64,
    pub sd: f64,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<f64>,
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Chunk-length grid: trains one model per (K, mask kind, seed) and
/// evaluates discrete-chunk rollouts at that K.
pub fn ablate_chunk_length(
    base: &TrainConfig,
    dataset: &Dataset,
    env_cfg: &EnvConfig,
    eval_base: &VlaEvalConfig,
    ks: &[usize],
    kinds: &[MaskKind],
    seeds: &[u64],
) -> Result<Vec<AblationCell>> {
    assert!(seeds.len() >= 3, "chunk-length trend needs >= 3 seeds");
    let mut cells = Vec::new();
    for &k in ks {
        for &kind in kinds {
            let mut per_seed = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.layout.k_chunk = k;
                cfg.mask_kind = kind;
                cfg.seed = seed;
                let out = train(&cfg, dataset, None)?;
                let mut ecfg = eval_base.clone();
                ecfg.k_exec = k;
                ecfg.layout = cfg.layout;
                ecfg.mask_kind = kind;
                let rep = eval_vla(&out.model, &dataset.tokenizers, env_cfg, &ecfg)?;
                per_seed.push(rep.success_rate());
            }
            let (mean, sd) = mean_sd(&per_seed);
            cells.push(AblationCell {
                k,
                mask: kind,
                mean,
                sd,
                seeds: seeds.to_vec(),
                per_seed,
            });
        }
    }
    Ok(cells)
}

/// Renders the fixed ablation table schema: (K, mask, mean, sd, seeds).
pub fn ablation_table(cells: &[AblationCell]) -> String {
    let mut out = String::from("k\tmask\tmean\tsd\tseeds\n");
    for c in cells {
        out.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\t{}\n",
            c.k,
            c.mask.name(),
            c.mean,
            c.sd,
            c.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
        ));
    }
    out
}

fn flatten_json(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, val) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_json(&key, val, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

fn diff_serializable<T: Serialize>(prefix: &str, a: &T, b: &T) -> Vec<String> {
    let mut fa = BTreeMap::new();
    let mut fb = BTreeMap::new();
    flatten_json(prefix, &serde_json::to_value(a).expect("json"), &mut fa);
    flatten_json(prefix, &serde_json::to_value(b).expect("json"), &mut fb);
    fa.iter()
        .filter(|(k, va)| fb.get(*k) != Some(*va) && !k.ends_with("seed"))
        .map(|(k, _)| k.clone())
        .collect()
}

/// Leaf-level config fields that differ between the two arms of a paired
/// experiment (seeds excluded).
pub fn config_diff_fields(a: &TrainConfig, b: &TrainConfig) -> Vec<String> {
    diff_serializable("train", a, b)
}

/// Flag differences across both the training and evaluation configs of a
/// paired experiment; a valid pair has exactly one.
pub fn paired_diff_fields(
    a: &TrainConfig,
    b: &TrainConfig,
    eval_a: &VlaEvalConfig,
    eval_b: &VlaEvalConfig,
) -> Vec<String> {
    let mut d = diff_serializable("train", a, b);
    d.extend(diff_serializable("eval", eval_a, eval_b));
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCurves {
    pub eval_steps: Vec<u64>,
    /// Per-seed success curves for each arm.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub a_auc_mean: f64,
    pub b_auc_mean: f64,
}

/// Paired success-vs-step curves for two configs differing in exactly one
/// flag. Both arms share the eval step grid and seeds.
pub fn ablate_convergence(
    cfg_a: &TrainConfig,
    cfg_b: &TrainConfig,
    dataset: &Dataset,
    env_cfg: &EnvConfig,
    eval_a: &VlaEvalConfig,
    eval_b: &VlaEvalConfig,
    seeds: &[u64],
) -> Result<ConvergenceCurves> {
    let diff = paired_diff_fields(cfg_a, cfg_b, eval_a, eval_b);
    if diff.len() != 1 {
        return Err(Error::ConfigPairMismatch(diff.len()));
    }
    assert!(cfg_a.eval_interval > 0 && cfg_a.eval_interval == cfg_b.eval_interval);
    assert_eq!(cfg_a.steps, cfg_b.steps);

    let eval_steps: Vec<u64> = (1..=cfg_a.steps / cfg_a.eval_interval)
        .map(|i| i * cfg_a.eval_interval)
        .collect();
    let run_arm = |cfg: &TrainConfig, ecfg: &VlaEvalConfig, seed: u64| -> Result<Vec<f64>> {
        let mut cfg = cfg.clone();
        cfg.seed = seed;
        let mut hook = success_rate_hook(&dataset.tokenizers, env_cfg, ecfg.clone());
        let out = train(&cfg, dataset, Some(&mut hook))?;
        Ok(out
            .log
            .eval_series("success_rate")
            .into_iter()
            .map(|(_, v)| v)
            .collect())
    };
    let mut a = Vec::new();
    let mut b = Vec::new();
    for &seed in seeds {
        a.push(run_arm(cfg_a, eval_a, seed)?);
        b.push(run_arm(cfg_b, eval_b, seed)?);
    }
    let auc = |curves: &[Vec<f64>]| {
        let per: Vec<f64> = curves
            .iter()
            .map(|c| c.iter().sum::<f64>() / c.len().max(1) as f64)
            .collect();
        per.iter().sum::<f64>() / per.len().max(1) as f64
    };
    Ok(ConvergenceCurves {
        eval_steps,
        a_auc_mean: auc(&a),
        b_auc_mean: auc(&b),
        a,
        b,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixCell {
    pub mix_ratio: f64,
    pub success_mean: f64,
    pub success_sd: f64,
    pub wm_token_accuracy: f64,
    pub per_seed_success: Vec<f64>,
}

/// Data-mixture sweep: success rate and next-frame token accuracy per mix
/// ratio, means over seeds.
pub fn ablate_mix(
    base: &TrainConfig,
    dataset: &Dataset,
    env_cfg: &EnvConfig,
    eval_base: &VlaEvalConfig,
    ratios: &[f64],
    seeds: &[u64],
    wm_max_pairs: usize,
) -> Result<Vec<MixCell>> {
    let mut cells = Vec::new();
    for &ratio in ratios {
        let mut success = Vec::new();
        let mut token_acc = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.mix_ratio = ratio;
            cfg.seed = seed;
            let out = train(&cfg, dataset, None)?;
            if ratio > 0.0 {
                let rep = eval_vla(&out.model, &dataset.tokenizers, env_cfg, eval_base)?;
                success.push(rep.success_rate());
            } else {
                success.push(0.0);
            }
            if ratio < 1.0 {
                let wm = eval_wm(&out.model, dataset, &cfg.layout, cfg.layout.n_rounds, wm_max_pairs)?;
                token_acc.push(wm.token_accuracy);
            }
        }
        let (mean, sd) = mean_sd(&success);
        let wm_token_accuracy = if token_acc.is_empty() {
            f64::NAN
        } else {
            token_acc.iter().sum::<f64>() / token_acc.len() as f64
        };
        cells.push(MixCell {
            mix_ratio: ratio,
            success_mean: mean,
            success_sd: sd,
            wm_token_accuracy,
            per_seed_success: success,
        });
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{collect, FamilyMix};

    #[test]
    fn expert_hits_full_success_through_the_harness() {
        let cfg = VlaEvalConfig {
            n_episodes: 50,
            ..Default::default()
        };
        let rep = eval_expert(&EnvConfig::default(), &cfg).unwrap();
        assert_eq!(rep.success_rate(), 1.0);
        assert_eq!(rep.outcomes.len(), 50);
    }

    #[test]
    fn random_baseline_is_weak_and_deterministic() {
        let cfg = VlaEvalConfig {
            n_episodes: 30,
            k_exec: 5,
            ..Default::default()
        };
        let a = eval_random_baseline(&EnvConfig::default(), &cfg).unwrap();
        let b = eval_random_baseline(&EnvConfig::default(), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.success_rate() < 0.35, "random rate {}", a.success_rate());
    }

    #[test]
    fn decode_step_arithmetic() {
        assert_eq!(count_decode_steps(DecodeCostKind::Discrete, 10, 3, 0), 30);
        assert_eq!(count_decode_steps(DecodeCostKind::Discrete, 5, 3, 0), 15);
        assert_eq!(count_decode_steps(DecodeCostKind::Continuous, 10, 3, 0), 1);
        assert_eq!(
            count_decode_steps(DecodeCostKind::WorldModelFrame, 0, 0, 77),
            77
        );
    }

    #[test]
    fn config_pair_guard_counts_flag_diffs() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.discrete_action_loss = false;
        assert_eq!(config_diff_fields(&a, &b), vec!["train.discrete_action_loss"]);
        b.mix_ratio = 0.9;
        assert_eq!(config_diff_fields(&a, &b).len(), 2);
        // Seeds never count as a flag difference.
        let mut c = a.clone();
        c.seed = 999;
        assert!(config_diff_fields(&a, &c).is_empty());
        // An eval-side flag (decode action type) counts through the paired
        // view, so discrete-vs-continuous comparisons are one-flag pairs.
        let ea = VlaEvalConfig::default();
        let mut eb = ea.clone();
        eb.action_type = ActionType::Discrete;
        assert_eq!(paired_diff_fields(&a, &a, &ea, &eb).len(), 1);
    }

    #[test]
    fn wm_eval_needs_a_validation_split() {
        let d = collect(&EnvConfig::default(), 2, 3, &FamilyMix::default(), 16).unwrap();
        let m = crate::training::init_model(&TrainConfig::default(), &d).unwrap();
        let layout = LayoutConfig::default();
        assert!(matches!(
            eval_wm(&m, &d, &layout, 1, 8),
            Err(Error::EmptyValidationSet)
        ));
    }

    #[test]
    fn wm_eval_reports_bounded_metrics_on_untrained_model() {
        let mut d = collect(&EnvConfig::default(), 4, 3, &FamilyMix::default(), 16).unwrap();
        d.assign_split(0.5, 0).unwrap();
        let mut cfg = TrainConfig::default();
        cfg.model.layers = 1;
        cfg.model.embed_dim = 16;
        cfg.model.ff_dim = 32;
        cfg.model.heads = 2;
        let m = crate::training::init_model(&cfg, &d).unwrap();
        let rep = eval_wm(&m, &d, &cfg.layout, 1, 4).unwrap();
        assert!((0.0..=1.0).contains(&rep.token_accuracy));
        assert!((0.0..=1.0).contains(&rep.frame_exact_match));
        assert!((-1.0..=1.0).contains(&rep.ssim));
        assert!(rep.psnr >= 0.0 && rep.psnr <= PSNR_CAP_DB);
        assert_eq!(rep.decode_steps_per_pair, 77);
        assert_eq!(rep.n_pairs, 4);
    }
}
