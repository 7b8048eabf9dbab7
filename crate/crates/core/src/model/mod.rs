//! Decoder-only trunk over the shared vocabulary plus the continuous action
//! head (learnable queries cross-attending to the trunk's prefix hidden
//! states). Two execution paths share one parameter set: the differentiable
//! graph path used for training and gradient checks, and an incremental
//! inference path with a key/value cache used for decoding and rollouts.

mod forward;
mod infer;

pub use forward::{
    action_head_forward, continuous_loss, discrete_loss, sample_loss, trunk_forward,
    LossComponents, LossFlags, TrunkOut,
};
pub use infer::{
    decode_continuous_chunk, decode_discrete_chunk, rollout_world_model, DecodeMode, InferSession,
    WmRollout,
};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    /// Upper bound on the action-chunk size the head can emit.
    pub k_max: usize,
    pub head_layers: usize,
    pub action_dims: usize,
    /// Weight on the continuous regression loss.
    pub alpha: f64,
    /// Learned absolute position embeddings; disabled only in degenerate
    /// test configurations.
    pub use_pos_emb: bool,
    /// Self-attention among the head's action queries; disabled only in
    /// test configurations probing query independence.
    pub head_self_attn: bool,
    /// Standard deviation of the parameter init. Gradient-check configs use
    /// a larger value so attention is non-degenerate at the test point.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            embed_dim: 128,
            ff_dim: 256,
            max_seq_len: 512,
            vocab_size: 0,
            k_max: 16,
            head_layers: 2,
            action_dims: 3,
            alpha: 10.0,
            use_pos_emb: true,
            head_self_attn: true,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be set".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha {} < 0", self.alpha)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("serializable config"));
        crate::env::hex_string(&h.finalize()[..8])
    }
}

/// Parameter slot indices for one trunk layer.
#[derive(Debug, Clone)]
pub(crate) struct LayerIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Parameter slot indices for one head layer (query self-attention,
/// cross-attention to trunk states, feed-forward).
#[derive(Debug, Clone)]
pub(crate) struct HeadLayerIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub self_wq: usize,
    pub self_bq: usize,
    pub self_wk: usize,
    pub self_bk: usize,
    pub self_wv: usize,
    pub self_bv: usize,
    pub self_wo: usize,
    pub self_bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub cross_wq: usize,
    pub cross_bq: usize,
    pub cross_wk: usize,
    pub cross_bk: usize,
    pub cross_wv: usize,
    pub cross_bv: usize,
    pub cross_wo: usize,
    pub cross_bo: usize,
    pub ln3_g: usize,
    pub ln3_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Idx {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerIdx>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub queries: usize,
    pub head_layers: Vec<HeadLayerIdx>,
    pub head_ln_g: usize,
    pub head_ln_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
}

#[derive(Debug, Clone)]
pub struct ModelParams<S> {
    pub cfg: ModelConfig,
    pub params: ParamSet<S>,
    pub vocab_hash: String,
    pub bins_hash: String,
    pub(crate) idx: Idx,
}

fn gauss<S: Scalar>(rng: &mut ChaCha8Rng, std: f64) -> S {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    S::from_config(std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos())
}

fn randn<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor<S> {
    Tensor::from_rows(rows, cols, (0..rows * cols).map(|_| gauss(rng, std)).collect())
}

impl<S: Scalar> ModelParams<S> {
    /// Fresh parameters, deterministic for a given seed.
    pub fn init(cfg: ModelConfig, vocab_hash: &str, bins_hash: &str, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p: ParamSet<S> = ParamSet::new();
        let d = cfg.embed_dim;
        let f = cfg.ff_dim;
        let std = cfg.init_std;

        let norm = |p: &mut ParamSet<S>, name: &str| {
            let g = p.insert(format!("{name}.g"), ones::<S>(d), false);
            let b = p.insert(format!("{name}.b"), Tensor::zeros(vec![d]), false);
            (g, b)
        };
        let linear = |p: &mut ParamSet<S>, rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize| {
            let w = p.insert(format!("{name}.w"), randn::<S>(rng, rows, cols, std), true);
            let b = p.insert(format!("{name}.b"), Tensor::zeros(vec![cols]), false);
            (w, b)
        };

        let tok_emb = p.insert("tok_emb", randn::<S>(&mut rng, cfg.vocab_size, d, std), false);
        let pos_emb = p.insert("pos_emb", randn::<S>(&mut rng, cfg.max_seq_len, d, std), false);
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let (ln1_g, ln1_b) = norm(&mut p, &format!("l{i}.ln1"));
            let (wq, bq) = linear(&mut p, &mut rng, &format!("l{i}.attn.q"), d, d);
            let (wk, bk) = linear(&mut p, &mut rng, &format!("l{i}.attn.k"), d, d);
            let (wv, bv) = linear(&mut p, &mut rng, &format!("l{i}.attn.v"), d, d);
            let (wo, bo) = linear(&mut p, &mut rng, &format!("l{i}.attn.o"), d, d);
            let (ln2_g, ln2_b) = norm(&mut p, &format!("l{i}.ln2"));
            let (w1, b1) = linear(&mut p, &mut rng, &format!("l{i}.mlp.fc1"), d, f);
            let (w2, b2) = linear(&mut p, &mut rng, &format!("l{i}.mlp.fc2"), f, d);
            layers.push(LayerIdx {
                ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2,
            });
        }
        let (lnf_g, lnf_b) = norm(&mut p, "lnf");
        let (out_w, out_b) = linear(&mut p, &mut rng, "out", d, cfg.vocab_size);

        let queries = p.insert("head.queries", randn::<S>(&mut rng, cfg.k_max, d, std), false);
        let mut head_layers = Vec::with_capacity(cfg.head_layers);
        for i in 0..cfg.head_layers {
            let (ln1_g, ln1_b) = norm(&mut p, &format!("head.l{i}.ln1"));
            let (self_wq, self_bq) = linear(&mut p, &mut rng, &format!("head.l{i}.self.q"), d, d);
            let (self_wk, self_bk) = linear(&mut p, &mut rng, &format!("head.l{i}.self.k"), d, d);
            let (self_wv, self_bv) = linear(&mut p, &mut rng, &format!("head.l{i}.self.v"), d, d);
            let (self_wo, self_bo) = linear(&mut p, &mut rng, &format!("head.l{i}.self.o"), d, d);
            let (ln2_g, ln2_b) = norm(&mut p, &format!("head.l{i}.ln2"));
            let (cross_wq, cross_bq) = linear(&mut p, &mut rng, &format!("head.l{i}.cross.q"), d, d);
            let (cross_wk, cross_bk) = linear(&mut p, &mut rng, &format!("head.l{i}.cross.k"), d, d);
            let (cross_wv, cross_bv) = linear(&mut p, &mut rng, &format!("head.l{i}.cross.v"), d, d);
            let (cross_wo, cross_bo) = linear(&mut p, &mut rng, &format!("head.l{i}.cross.o"), d, d);
            let (ln3_g, ln3_b) = norm(&mut p, &format!("head.l{i}.ln3"));
            let (w1, b1) = linear(&mut p, &mut rng, &format!("head.l{i}.mlp.fc1"), d, f);
            let (w2, b2) = linear(&mut p, &mut rng, &format!("head.l{i}.mlp.fc2"), f, d);
            head_layers.push(HeadLayerIdx {
                ln1_g, ln1_b, self_wq, self_bq, self_wk, self_bk, self_wv, self_bv, self_wo,
                self_bo, ln2_g, ln2_b, cross_wq, cross_bq, cross_wk, cross_bk, cross_wv, cross_bv,
                cross_wo, cross_bo, ln3_g, ln3_b, w1, b1, w2, b2,
            });
        }
        let head_ln_g = p.insert("head.ln.g", ones::<S>(d), false);
        let head_ln_b = p.insert("head.ln.b", Tensor::zeros(vec![d]), false);
        let proj_w = p.insert("head.proj.w", randn::<S>(&mut rng, d, cfg.action_dims, std), true);
        let proj_b = p.insert("head.proj.b", Tensor::zeros(vec![cfg.action_dims]), false);

        let idx = Idx {
            tok_emb, pos_emb, layers, lnf_g, lnf_b, out_w, out_b,
            queries, head_layers, head_ln_g, head_ln_b, proj_w, proj_b,
        };
        Ok(Self {
            cfg,
            params: p,
            vocab_hash: vocab_hash.to_string(),
            bins_hash: bins_hash.to_string(),
            idx,
        })
    }

    /// Head parameter slots, used to assert that no continuous-loss gradient
    /// flows when the head is disabled.
    pub fn head_param_slots(&self) -> Vec<usize> {
        let mut v = vec![self.idx.queries, self.idx.head_ln_g, self.idx.head_ln_b, self.idx.proj_w, self.idx.proj_b];
        for h in &self.idx.head_layers {
            v.extend([
                h.ln1_g, h.ln1_b, h.self_wq, h.self_bq, h.self_wk, h.self_bk, h.self_wv, h.self_bv,
                h.self_wo, h.self_bo, h.ln2_g, h.ln2_b, h.cross_wq, h.cross_bq, h.cross_wk,
                h.cross_bk, h.cross_wv, h.cross_bv, h.cross_wo, h.cross_bo, h.ln3_g, h.ln3_b,
                h.w1, h.b1, h.w2, h.b2,
            ]);
        }
        v
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            cfg: self.cfg.clone(),
            params: self.params.cast::<T>(),
            vocab_hash: self.vocab_hash.clone(),
            bins_hash: self.bins_hash.clone(),
            idx: self.idx.clone(),
        }
    }
}

fn ones<S: Scalar>(n: usize) -> Tensor<S> {
    Tensor::new(vec![n], vec![S::one(); n])
}

const CKPT_MAGIC: &[u8; 8] = b"AWMCKPT\0";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    cfg: ModelConfig,
    vocab_hash: String,
    bins_hash: String,
    n_params: u32,
}

/// Versioned checkpoint: header (config + vocabulary/bin hashes), named
/// parameter tensors as little-endian f64, whole-file checksum. Loading
/// refuses version or hash mismatches.
pub fn save_checkpoint<S: Scalar>(model: &ModelParams<S>, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let header = CkptHeader {
        cfg: model.cfg.clone(),
        vocab_hash: model.vocab_hash.clone(),
        bins_hash: model.bins_hash.clone(),
        n_params: model.params.len() as u32,
    };
    let hbytes = serde_json::to_vec(&header).expect("header json");
    buf.extend_from_slice(&(hbytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&hbytes);
    for p in model.params.iter() {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(p.decay as u8);
        buf.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &e in p.tensor.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in p.tensor.data() {
            buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(
    path: &Path,
    expect_vocab_hash: Option<&str>,
) -> Result<ModelParams<S>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 44 {
        return Err(Error::CorruptFile("checkpoint too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::ChecksumMismatch);
    }
    if &body[..8] != CKPT_MAGIC {
        return Err(Error::CorruptFile("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut cur = &body[12..];
    let hlen = read_u32(&mut cur)? as usize;
    let header: CkptHeader = serde_json::from_slice(&cur[..hlen])
        .map_err(|e| Error::CorruptFile(format!("checkpoint header: {e}")))?;
    cur = &cur[hlen..];
    if let Some(h) = expect_vocab_hash {
        if h != header.vocab_hash {
            return Err(Error::CheckpointMismatch(format!(
                "vocab hash {} in checkpoint, {} expected",
                header.vocab_hash, h
            )));
        }
    }
    // Rebuild on a freshly initialized skeleton so slot indices match the
    // config deterministically, then overwrite every tensor.
    let mut model: ModelParams<S> =
        ModelParams::init(header.cfg.clone(), &header.vocab_hash, &header.bins_hash, 0)?;
    for _ in 0..header.n_params {
        let nlen = read_u32(&mut cur)? as usize;
        let name = std::str::from_utf8(&cur[..nlen])
            .map_err(|_| Error::CorruptFile("param name".into()))?
            .to_string();
        cur = &cur[nlen..];
        let _decay = take(&mut cur, 1)?[0];
        let rank = read_u32(&mut cur)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut cur)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut cur, numel * 8)?;
        let data: Vec<S> = raw
            .chunks_exact(8)
            .map(|c| S::from_config(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let slot = model.params.index_of(&name);
        if model.params.tensor(slot).shape() != shape.as_slice() {
            return Err(Error::CheckpointMismatch(format!(
                "shape mismatch for {name}"
            )));
        }
        *model.params.tensor_mut(slot) = Tensor::new(shape, data);
    }
    Ok(model)
}

fn read_u32(cur: &mut &[u8]) -> Result<u32> {
    let b = take(cur, 4)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

fn take<'a>(cur: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if cur.len() < n {
        return Err(Error::CorruptFile("truncated checkpoint".into()));
    }
    let (head, rest) = cur.split_at(n);
    *cur = rest;
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            embed_dim: 16,
            ff_dim: 32,
            max_seq_len: 32,
            vocab_size: 50,
            k_max: 4,
            head_layers: 1,
            ..Default::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a: ModelParams<f32> = ModelParams::init(tiny_cfg(), "vh", "bh", 3).unwrap();
        let b: ModelParams<f32> = ModelParams::init(tiny_cfg(), "vh", "bh", 3).unwrap();
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.tensor.data(), pb.tensor.data());
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_hash_guard() {
        let dir = std::env::temp_dir().join(format!("awm_ckpt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        let m: ModelParams<f32> = ModelParams::init(tiny_cfg(), "vh", "bh", 3).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let loaded: ModelParams<f32> = load_checkpoint(&path, Some("vh")).unwrap();
        assert_eq!(m.cfg, loaded.cfg);
        for (a, b) in m.params.iter().zip(loaded.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor, b.tensor);
        }
        assert!(matches!(
            load_checkpoint::<f32>(&path, Some("other")),
            Err(Error::CheckpointMismatch(_))
        ));
        // Truncation is caught by the checksum.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path, None),
            Err(Error::ChecksumMismatch)
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny_cfg();
        c.heads = 3;
        assert!(ModelParams::<f32>::init(c, "v", "b", 0).is_err());
        let mut c = tiny_cfg();
        c.vocab_size = 0;
        assert!(ModelParams::<f32>::init(c, "v", "b", 0).is_err());
    }
}
