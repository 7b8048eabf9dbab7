//! Demonstration collection via the scripted expert, preprocessing (success
//! filtering, no-op filtering, bin-range computation, train/val split) and a
//! versioned binary episode format with a whole-file checksum.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{
    Action, Env, EnvConfig, Observation, ProprioState, Task, TaskFamily, ACTION_DIMS,
    CELL_CATEGORIES, STATE_DIMS,
};
use crate::error::{Error, Result};
use crate::tokenizer::{BinSpec, TextVocab, Tokenizers};

const MAGIC: &[u8; 8] = b"AWMDSET\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStep {
    pub proprio: ProprioState,
    pub obs: Observation,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub task: Task,
    pub family: TaskFamily,
    pub seed: u64,
    pub steps: Vec<EpisodeStep>,
    pub success: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Weighted mixture of task families used during collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyMix(pub Vec<(TaskFamily, f64)>);

impl FamilyMix {
    pub fn single(family: TaskFamily) -> Self {
        Self(vec![(family, 1.0)])
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> TaskFamily {
        let total: f64 = self.0.iter().map(|(_, w)| w).sum();
        let mut dart = rng.gen_range(0.0..total.max(f64::MIN_POSITIVE));
        for (family, w) in &self.0 {
            dart -= w;
            if dart <= 0.0 {
                return *family;
            }
        }
        self.0.last().expect("non-empty mix").0
    }
}

impl Default for FamilyMix {
    fn default() -> Self {
        Self::single(TaskFamily::SingleTarget)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub env_cfg: EnvConfig,
    pub tokenizers: Tokenizers,
    pub episodes: Vec<Episode>,
    pub split: Vec<Split>,
    pub noop_steps_removed: usize,
    pub expert_failures: usize,
    pub collect_seed: u64,
}

impl Dataset {
    pub fn train_indices(&self) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == Split::Train)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn val_indices(&self) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == Split::Val)
            .map(|(i, _)| i)
            .collect()
    }

    /// Episode-level shuffled split; deterministic for a given seed. Train
    /// size is `round(ratio * n)` clamped so both sides stay non-empty.
    pub fn assign_split(&mut self, ratio: f64, seed: u64) -> Result<(usize, usize)> {
        let n = self.episodes.len();
        if n < 2 {
            return Err(Error::TooFewEpisodes(n));
        }
        if !(0.0 < ratio && ratio < 1.0) {
            return Err(Error::Config(format!("split ratio {ratio} outside (0, 1)")));
        }
        let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        self.split = vec![Split::Val; n];
        for &i in order.iter().take(n_train) {
            self.split[i] = Split::Train;
        }
        Ok((n_train, n - n_train))
    }
}

/// Collects successful expert demonstrations, applies no-op filtering, and
/// computes bin ranges from the retained data.
pub fn collect(
    env_cfg: &EnvConfig,
    n_episodes: usize,
    seed: u64,
    mix: &FamilyMix,
    n_bins: usize,
) -> Result<Dataset> {
    assert!(n_episodes >= 1);
    let env = Env::new(env_cfg.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::with_capacity(n_episodes);
    let mut failures = 0usize;
    let max_attempts = n_episodes * 2 + 10;
    let mut attempts = 0usize;
    while episodes.len() < n_episodes {
        attempts += 1;
        if attempts > max_attempts {
            let rate = failures as f64 / attempts as f64;
            return Err(Error::ExpertFailureRate(rate));
        }
        let env_seed: u64 = rng.gen();
        let family = mix.sample(&mut rng);
        match run_expert_episode(&env, env_seed, family)? {
            Some(ep) => episodes.push(ep),
            None => failures += 1,
        }
    }
    if failures * 2 > attempts {
        return Err(Error::ExpertFailureRate(failures as f64 / attempts as f64));
    }

    let mut removed = 0usize;
    let episodes: Vec<Episode> = episodes
        .into_iter()
        .map(|ep| {
            let before = ep.len();
            let filtered = filter_noop(ep, NOOP_EPS);
            removed += before - filtered.len();
            filtered
        })
        .collect();

    let (action_bins, state_bins) = compute_bins(&episodes, n_bins)?;
    let tokenizers = Tokenizers::new(
        TextVocab::toy_grammar(),
        CELL_CATEGORIES,
        action_bins,
        state_bins,
    );
    let n = episodes.len();
    Ok(Dataset {
        env_cfg: env_cfg.clone(),
        tokenizers,
        episodes,
        split: vec![Split::Train; n],
        noop_steps_removed: removed,
        expert_failures: failures,
        collect_seed: seed,
    })
}

fn run_expert_episode(env: &Env, seed: u64, family: TaskFamily) -> Result<Option<Episode>> {
    let (mut state, task) = env.reset(seed, family)?;
    let mut steps = Vec::new();
    let mut success = env.is_success(&state, &task);
    while !success && steps.len() < env.cfg().max_episode_len {
        let action = env.expert_action(&state, &task)?;
        steps.push(EpisodeStep {
            proprio: env.proprio(&state),
            obs: env.render(&state),
            action,
        });
        state = env.step(&state, &action);
        success = env.is_success(&state, &task);
    }
    if !success || steps.is_empty() {
        return Ok(None);
    }
    Ok(Some(Episode {
        task,
        family,
        seed,
        steps,
        success,
    }))
}

/// Default motion threshold for no-op removal, far below the expert's unit
/// step scale.
pub const NOOP_EPS: f64 = 1e-3;

/// Drops steps whose deltas are below `eps` and whose gripper command leaves
/// the aperture unchanged. The final step always survives.
pub fn filter_noop(episode: Episode, eps: f64) -> Episode {
    let last = episode.steps.len() - 1;
    let steps = episode
        .steps
        .iter()
        .enumerate()
        .filter(|(i, s)| {
            if *i == last {
                return true;
            }
            let still = s.action.dx.abs() < eps && s.action.dy.abs() < eps;
            let closed = s.proprio.aperture == 1;
            let aperture_changes = (s.action.g > 0.0) != closed;
            !(still && !aperture_changes)
        })
        .map(|(_, s)| s.clone())
        .collect();
    Episode { steps, ..episode }
}

fn compute_bins(episodes: &[Episode], n_bins: usize) -> Result<(BinSpec, BinSpec)> {
    let mut a_lo = [f64::INFINITY; ACTION_DIMS];
    let mut a_hi = [f64::NEG_INFINITY; ACTION_DIMS];
    let mut s_lo = [f64::INFINITY; STATE_DIMS];
    let mut s_hi = [f64::NEG_INFINITY; STATE_DIMS];
    for ep in episodes {
        for step in &ep.steps {
            for (d, v) in step.action.as_array().iter().enumerate() {
                a_lo[d] = a_lo[d].min(*v);
                a_hi[d] = a_hi[d].max(*v);
            }
            for (d, v) in step.proprio.as_array().iter().enumerate() {
                s_lo[d] = s_lo[d].min(*v);
                s_hi[d] = s_hi[d].max(*v);
            }
        }
    }
    // Degenerate (constant) dimensions get a unit-wide range around the value.
    for d in 0..ACTION_DIMS {
        if !(a_hi[d] - a_lo[d]).is_finite() || a_hi[d] - a_lo[d] < 1e-6 {
            let mid = if a_lo[d].is_finite() { a_lo[d] } else { 0.0 };
            a_lo[d] = mid - 0.5;
            a_hi[d] = mid + 0.5;
        }
    }
    for d in 0..STATE_DIMS {
        if !(s_hi[d] - s_lo[d]).is_finite() || s_hi[d] - s_lo[d] < 1e-6 {
            let mid = if s_lo[d].is_finite() { s_lo[d] } else { 0.0 };
            s_lo[d] = mid - 0.5;
            s_hi[d] = mid + 0.5;
        }
    }
    Ok((
        BinSpec::new(a_lo.to_vec(), a_hi.to_vec(), n_bins)?,
        BinSpec::new(s_lo.to_vec(), s_hi.to_vec(), n_bins)?,
    ))
}

/// Re-simulates an episode's actions from its seed and checks that the stored
/// observations, proprioceptive states, and success flag are reproduced
/// exactly.
pub fn replay_matches(env_cfg: &EnvConfig, episode: &Episode) -> Result<bool> {
    let env = Env::new(env_cfg.clone());
    let (mut state, task) = env.reset(episode.seed, episode.family)?;
    if task != episode.task {
        return Ok(false);
    }
    for step in &episode.steps {
        if env.proprio(&state) != step.proprio || env.render(&state) != step.obs {
            return Ok(false);
        }
        state = env.step(&state, &step.action);
    }
    Ok(env.is_success(&state, &task) == episode.success)
}

#[derive(Serialize, Deserialize)]
struct HeaderV1 {
    env_cfg: EnvConfig,
    env_cfg_hash: String,
    tokenizers: Tokenizers,
    noop_steps_removed: usize,
    expert_failures: usize,
    collect_seed: u64,
    n_episodes: u32,
}

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    episode: Episode,
    split: Split,
}

/// Binary layout: magic, version, length-prefixed JSON header, length-prefixed
/// JSON episode records, SHA-256 of everything preceding. Writing is
/// deterministic, so identical datasets serialize byte-identically. A
/// human-readable `.meta.txt` sidecar is written next to the file.
pub fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let header = HeaderV1 {
        env_cfg: dataset.env_cfg.clone(),
        env_cfg_hash: dataset.env_cfg.hash(),
        tokenizers: dataset.tokenizers.clone(),
        noop_steps_removed: dataset.noop_steps_removed,
        expert_failures: dataset.expert_failures,
        collect_seed: dataset.collect_seed,
        n_episodes: dataset.episodes.len() as u32,
    };
    push_record(&mut buf, &serde_json::to_vec(&header).expect("header json"));
    for (episode, split) in dataset.episodes.iter().zip(&dataset.split) {
        let rec = EpisodeRecord {
            episode: episode.clone(),
            split: *split,
        };
        push_record(&mut buf, &serde_json::to_vec(&rec).expect("episode json"));
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, &buf)?;
    fs::write(sidecar_path(path), metadata_text(dataset))?;
    Ok(())
}

fn push_record(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(bytes);
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta.txt");
    std::path::PathBuf::from(os)
}

/// The sidecar key set: format_version, env_cfg_hash, vocab_hash, episodes,
/// train/val counts, steps, noop_steps_removed, expert_failures, per-dim
/// action/state bin ranges and n_bins.
pub fn metadata_text(dataset: &Dataset) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        out.push_str(k);
        out.push('=');
        out.push_str(&v);
        out.push('\n');
    };
    kv("format_version", FORMAT_VERSION.to_string());
    kv("env_cfg_hash", dataset.env_cfg.hash());
    kv("vocab_hash", dataset.tokenizers.hash());
    kv("episodes", dataset.episodes.len().to_string());
    kv("train_episodes", dataset.train_indices().len().to_string());
    kv("val_episodes", dataset.val_indices().len().to_string());
    kv(
        "steps",
        dataset
            .episodes
            .iter()
            .map(Episode::len)
            .sum::<usize>()
            .to_string(),
    );
    kv("noop_steps_removed", dataset.noop_steps_removed.to_string());
    kv("expert_failures", dataset.expert_failures.to_string());
    kv("n_bins", dataset.tokenizers.action_bins.n_bins.to_string());
    for d in 0..dataset.tokenizers.action_bins.dims() {
        kv(
            &format!("action_range_{d}"),
            format!(
                "{}..{}",
                dataset.tokenizers.action_bins.low[d], dataset.tokenizers.action_bins.high[d]
            ),
        );
    }
    for d in 0..dataset.tokenizers.state_bins.dims() {
        kv(
            &format!("state_range_{d}"),
            format!(
                "{}..{}",
                dataset.tokenizers.state_bins.low[d], dataset.tokenizers.state_bins.high[d]
            ),
        );
    }
    out
}

pub fn load(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::CorruptFile("file too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(Error::ChecksumMismatch);
    }
    if &body[..MAGIC.len()] != MAGIC {
        return Err(Error::CorruptFile("bad magic".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    match version {
        1 => load_v1(&body[12..]),
        other => Err(Error::UnsupportedVersion(other)),
    }
}

fn load_v1(mut body: &[u8]) -> Result<Dataset> {
    let header_bytes = take_record(&mut body)?;
    let header: HeaderV1 = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::CorruptFile(format!("header: {e}")))?;
    if header.env_cfg.hash() != header.env_cfg_hash {
        return Err(Error::CorruptFile("env config hash mismatch".into()));
    }
    let mut episodes = Vec::with_capacity(header.n_episodes as usize);
    let mut split = Vec::with_capacity(header.n_episodes as usize);
    for _ in 0..header.n_episodes {
        let rec_bytes = take_record(&mut body)?;
        let rec: EpisodeRecord = serde_json::from_slice(rec_bytes)
            .map_err(|e| Error::CorruptFile(format!("episode: {e}")))?;
        episodes.push(rec.episode);
        split.push(rec.split);
    }
    Ok(Dataset {
        env_cfg: header.env_cfg,
        tokenizers: header.tokenizers,
        episodes,
        split,
        noop_steps_removed: header.noop_steps_removed,
        expert_failures: header.expert_failures,
        collect_seed: header.collect_seed,
    })
}

fn take_record<'a>(body: &mut &'a [u8]) -> Result<&'a [u8]> {
    if body.len() < 4 {
        return Err(Error::CorruptFile("truncated record length".into()));
    }
    let len = u32::from_le_bytes(body[..4].try_into().unwrap()) as usize;
    if body.len() < 4 + len {
        return Err(Error::CorruptFile("truncated record".into()));
    }
    let rec = &body[4..4 + len];
    *body = &body[4 + len..];
    Ok(rec)
}
