//! Inference path: incremental forward with per-layer key/value caches, the
//! two chunk decoders and the world-model rollout. Decode-step accounting is
//! the number of sequential logit computations: feeding a token whose value
//! is already known (delimiters around action blocks, input action tokens)
//! extends the context without a decode step, while every generated token --
//! including the delimiters of generated frames -- costs one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{gelu, Tensor};
use crate::env::{Grid, Observation};
use crate::error::{Error, Result};
use crate::masks::{build_mask, MaskKind, MaskMatrix};
use crate::model::ModelParams;
use crate::scalar::Scalar;
use crate::sequence::{
    build_wm_prefix, plan_action_block, plan_frame_pair, plan_vla_layout, LayoutConfig,
    SampleKind, SampleLayout, SegmentSpan,
};
use crate::tokenizer::{Segment, SpecialToken, Tokenizers};

const LN_EPS: f64 = 1e-5;

fn layernorm_vec<S: Scalar>(x: &[S], g: &[S], b: &[S]) -> Vec<S> {
    let n = S::from_config(x.len() as f64);
    let mean = x.iter().copied().sum::<S>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    let rstd = (var + S::from_config(LN_EPS)).sqrt().recip();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(&v, (&gv, &bv))| gv * (v - mean) * rstd + bv)
        .collect()
}

/// y = x @ w + b for a row vector x and w of shape [d_in, d_out].
fn matvec<S: Scalar>(x: &[S], w: &Tensor<S>, b: &Tensor<S>) -> Vec<S> {
    let (din, dout) = (w.rows(), w.cols());
    assert_eq!(x.len(), din);
    let mut y: Vec<S> = b.data().to_vec();
    for (i, &xv) in x.iter().enumerate() {
        let row = &w.data()[i * dout..(i + 1) * dout];
        for j in 0..dout {
            y[j] = y[j] + xv * row[j];
        }
    }
    y
}

fn softmax_inplace<S: Scalar>(v: &mut [S]) {
    let mut max = v[0];
    for &x in v.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = S::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
}

/// Incremental trunk evaluation under a fixed (planned) attention mask.
pub struct InferSession<'m, S> {
    model: &'m ModelParams<S>,
    mask: MaskMatrix,
    /// Per-layer caches, rows appended per fed token.
    kcache: Vec<Vec<S>>,
    vcache: Vec<Vec<S>>,
    /// Final-norm hidden rows for every fed position.
    hidden: Vec<S>,
    n_fed: usize,
}

impl<'m, S: Scalar> InferSession<'m, S> {
    pub fn new(model: &'m ModelParams<S>, mask: MaskMatrix) -> Self {
        let layers = model.cfg.layers;
        Self {
            model,
            mask,
            kcache: vec![Vec::new(); layers],
            vcache: vec![Vec::new(); layers],
            hidden: Vec::new(),
            n_fed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.n_fed
    }

    pub fn is_empty(&self) -> bool {
        self.n_fed == 0
    }

    pub fn feed_all(&mut self, tokens: &[u32]) -> Result<()> {
        for &t in tokens {
            self.feed(t)?;
        }
        Ok(())
    }

    /// Processes one token at the next position, extending every cache.
    pub fn feed(&mut self, token: u32) -> Result<()> {
        let cfg = &self.model.cfg;
        let p = self.n_fed;
        if token as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfVocab(token, cfg.vocab_size));
        }
        if p >= cfg.max_seq_len || p >= self.mask.n() {
            return Err(Error::SequenceTooLong(p + 1, cfg.max_seq_len.min(self.mask.n())));
        }
        let d = cfg.embed_dim;
        let dh = cfg.head_dim();
        let scale = S::from_config(1.0 / (dh as f64).sqrt());
        let pm = &self.model.params;
        let idx = &self.model.idx;

        let mut x: Vec<S> =
            pm.tensor(idx.tok_emb).row(token as usize).to_vec();
        if cfg.use_pos_emb {
            for (xv, &pv) in x.iter_mut().zip(pm.tensor(idx.pos_emb).row(p)) {
                *xv = *xv + pv;
            }
        }

        for (l, li) in idx.layers.iter().enumerate() {
            let h = layernorm_vec(
                &x,
                pm.tensor(li.ln1_g).data(),
                pm.tensor(li.ln1_b).data(),
            );
            let q = matvec(&h, pm.tensor(li.wq), pm.tensor(li.bq));
            let k = matvec(&h, pm.tensor(li.wk), pm.tensor(li.bk));
            let v = matvec(&h, pm.tensor(li.wv), pm.tensor(li.bv));
            self.kcache[l].extend_from_slice(&k);
            self.vcache[l].extend_from_slice(&v);

            let mut merged = vec![S::zero(); d];
            for hh in 0..cfg.heads {
                let qh = &q[hh * dh..(hh + 1) * dh];
                // Scores over the attendable cached positions.
                let mut keys: Vec<usize> = Vec::with_capacity(p + 1);
                let mut scores: Vec<S> = Vec::with_capacity(p + 1);
                for j in 0..=p {
                    if !self.mask.allowed(p, j) {
                        continue;
                    }
                    let kj = &self.kcache[l][j * d + hh * dh..j * d + (hh + 1) * dh];
                    let mut dot = S::zero();
                    for (a, b) in qh.iter().zip(kj) {
                        dot = dot + *a * *b;
                    }
                    keys.push(j);
                    scores.push(dot * scale);
                }
                softmax_inplace(&mut scores);
                let out = &mut merged[hh * dh..(hh + 1) * dh];
                for (j, w) in keys.iter().zip(&scores) {
                    let vj = &self.vcache[l][j * d + hh * dh..j * d + (hh + 1) * dh];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o = *o + *w * vv;
                    }
                }
            }
            let attn = matvec(&merged, pm.tensor(li.wo), pm.tensor(li.bo));
            for (xv, av) in x.iter_mut().zip(&attn) {
                *xv = *xv + *av;
            }

            let m = layernorm_vec(
                &x,
                pm.tensor(li.ln2_g).data(),
                pm.tensor(li.ln2_b).data(),
            );
            let mut m1 = matvec(&m, pm.tensor(li.w1), pm.tensor(li.b1));
            for v in m1.iter_mut() {
                *v = gelu(*v);
            }
            let m2 = matvec(&m1, pm.tensor(li.w2), pm.tensor(li.b2));
            for (xv, mv) in x.iter_mut().zip(&m2) {
                *xv = *xv + *mv;
            }
        }

        let h = layernorm_vec(
            &x,
            pm.tensor(idx.lnf_g).data(),
            pm.tensor(idx.lnf_b).data(),
        );
        self.hidden.extend_from_slice(&h);
        self.n_fed += 1;
        Ok(())
    }

    /// Next-token logits after the last fed token. This is the unit of
    /// decode-step accounting.
    pub fn logits_last(&self) -> Vec<S> {
        assert!(self.n_fed > 0);
        let d = self.model.cfg.embed_dim;
        let h = &self.hidden[(self.n_fed - 1) * d..self.n_fed * d];
        matvec(
            h,
            self.model.params.tensor(self.model.idx.out_w),
            self.model.params.tensor(self.model.idx.out_b),
        )
    }

    pub fn hidden_row(&self, p: usize) -> &[S] {
        let d = self.model.cfg.embed_dim;
        &self.hidden[p * d..(p + 1) * d]
    }

    /// Continuous action head over the first `prefix_end` hidden rows; one
    /// parallel pass for the whole chunk.
    pub fn head_chunk(&self, prefix_end: usize, k_chunk: usize) -> Result<Vec<[f64; 3]>> {
        let cfg = &self.model.cfg;
        if k_chunk > cfg.k_max {
            return Err(Error::ChunkTooLarge {
                k: k_chunk,
                k_max: cfg.k_max,
            });
        }
        assert!(prefix_end > 0 && prefix_end <= self.n_fed);
        let d = cfg.embed_dim;
        let pm = &self.model.params;
        let idx = &self.model.idx;
        let scale = S::from_config(1.0 / (d as f64).sqrt());

        let mut q: Vec<Vec<S>> = (0..k_chunk)
            .map(|i| pm.tensor(idx.queries).row(i).to_vec())
            .collect();

        for hl in &idx.head_layers {
            if cfg.head_self_attn {
                let normed: Vec<Vec<S>> = q
                    .iter()
                    .map(|row| {
                        layernorm_vec(row, pm.tensor(hl.ln1_g).data(), pm.tensor(hl.ln1_b).data())
                    })
                    .collect();
                let qs: Vec<Vec<S>> = normed
                    .iter()
                    .map(|r| matvec(r, pm.tensor(hl.self_wq), pm.tensor(hl.self_bq)))
                    .collect();
                let ks: Vec<Vec<S>> = normed
                    .iter()
                    .map(|r| matvec(r, pm.tensor(hl.self_wk), pm.tensor(hl.self_bk)))
                    .collect();
                let vs: Vec<Vec<S>> = normed
                    .iter()
                    .map(|r| matvec(r, pm.tensor(hl.self_wv), pm.tensor(hl.self_bv)))
                    .collect();
                for i in 0..k_chunk {
                    let mut scores: Vec<S> = ks
                        .iter()
                        .map(|k| dot(&qs[i], k) * scale)
                        .collect();
                    softmax_inplace(&mut scores);
                    let mut out = vec![S::zero(); d];
                    for (w, v) in scores.iter().zip(&vs) {
                        for (o, &vv) in out.iter_mut().zip(v) {
                            *o = *o + *w * vv;
                        }
                    }
                    let proj = matvec(&out, pm.tensor(hl.self_wo), pm.tensor(hl.self_bo));
                    for (qv, pv) in q[i].iter_mut().zip(&proj) {
                        *qv = *qv + *pv;
                    }
                }
            }
            // Cross-attention to the trunk's prefix hidden states.
            let kctx: Vec<Vec<S>> = (0..prefix_end)
                .map(|p| matvec(self.hidden_row(p), pm.tensor(hl.cross_wk), pm.tensor(hl.cross_bk)))
                .collect();
            let vctx: Vec<Vec<S>> = (0..prefix_end)
                .map(|p| matvec(self.hidden_row(p), pm.tensor(hl.cross_wv), pm.tensor(hl.cross_bv)))
                .collect();
            for qi in q.iter_mut() {
                let normed =
                    layernorm_vec(qi, pm.tensor(hl.ln2_g).data(), pm.tensor(hl.ln2_b).data());
                let qq = matvec(&normed, pm.tensor(hl.cross_wq), pm.tensor(hl.cross_bq));
                let mut scores: Vec<S> = kctx.iter().map(|k| dot(&qq, k) * scale).collect();
                softmax_inplace(&mut scores);
                let mut out = vec![S::zero(); d];
                for (w, v) in scores.iter().zip(&vctx) {
                    for (o, &vv) in out.iter_mut().zip(v) {
                        *o = *o + *w * vv;
                    }
                }
                let proj = matvec(&out, pm.tensor(hl.cross_wo), pm.tensor(hl.cross_bo));
                for (qv, pv) in qi.iter_mut().zip(&proj) {
                    *qv = *qv + *pv;
                }
            }
            for qi in q.iter_mut() {
                let normed =
                    layernorm_vec(qi, pm.tensor(hl.ln3_g).data(), pm.tensor(hl.ln3_b).data());
                let mut m1 = matvec(&normed, pm.tensor(hl.w1), pm.tensor(hl.b1));
                for v in m1.iter_mut() {
                    *v = gelu(*v);
                }
                let m2 = matvec(&m1, pm.tensor(hl.w2), pm.tensor(hl.b2));
                for (qv, mv) in qi.iter_mut().zip(&m2) {
                    *qv = *qv + *mv;
                }
            }
        }

        Ok(q.iter()
            .map(|qi| {
                let normed = layernorm_vec(
                    qi,
                    pm.tensor(idx.head_ln_g).data(),
                    pm.tensor(idx.head_ln_b).data(),
                );
                let out = matvec(&normed, pm.tensor(idx.proj_w), pm.tensor(idx.proj_b));
                [
                    out[0].to_f64_lossy(),
                    out[1].to_f64_lossy(),
                    out[2].to_f64_lossy(),
                ]
            })
            .collect())
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc = acc + *x * *y;
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Sample,
}

/// Argmax (or sample) over a contiguous legal id range; decoding can never
/// leave the segment by construction, and the classification check turns any
/// violation into a hard error.
fn select_constrained<S: Scalar>(
    logits: &[S],
    range: std::ops::Range<u32>,
    mode: DecodeMode,
    rng: &mut ChaCha8Rng,
) -> u32 {
    match mode {
        DecodeMode::Greedy => {
            let mut best = range.start;
            let mut best_v = logits[range.start as usize];
            for t in range.clone() {
                let v = logits[t as usize];
                if v > best_v {
                    best_v = v;
                    best = t;
                }
            }
            best
        }
        DecodeMode::Sample => {
            let mut probs: Vec<S> = range.clone().map(|t| logits[t as usize]).collect();
            softmax_inplace(&mut probs);
            let mut dart = rng.gen_range(0.0..1.0);
            for (i, p) in probs.iter().enumerate() {
                dart -= p.to_f64_lossy();
                if dart <= 0.0 {
                    return range.start + i as u32;
                }
            }
            range.end - 1
        }
    }
}

/// Sequential discrete chunk decoding under the planned policy layout.
/// Emits 3 tokens per action block (delimiters are forced, not generated);
/// returns bin-center actions and the exact decode-step count `3 * K`.
pub fn decode_discrete_chunk<S: Scalar>(
    model: &ModelParams<S>,
    toks: &Tokenizers,
    prefix_tokens: &[u32],
    prefix_spans: &[SegmentSpan],
    k_chunk: usize,
    mask_kind: MaskKind,
    mode: DecodeMode,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<[f64; 3]>, usize)> {
    let dims = toks.layout.action_dims;
    let planned = plan_vla_layout(prefix_spans, prefix_tokens.len(), k_chunk, dims);
    let mask = build_mask(&planned, mask_kind)?;
    let mut session = InferSession::new(model, mask);
    session.feed_all(prefix_tokens)?;

    let mut steps = 0usize;
    let mut actions = Vec::with_capacity(k_chunk);
    for _k in 0..k_chunk {
        session.feed(toks.layout.special(SpecialToken::ActionBegin))?;
        let mut block = Vec::with_capacity(dims);
        for d in 0..dims {
            let logits = session.logits_last();
            steps += 1;
            let tok = select_constrained(&logits, toks.layout.action_dim_range(d), mode, rng);
            if toks.layout.classify(tok)? != Segment::Action {
                return Err(Error::ConstraintViolation {
                    token: tok,
                    segment: "action",
                });
            }
            session.feed(tok)?;
            block.push(tok);
        }
        session.feed(toks.layout.special(SpecialToken::ActionEnd))?;
        actions.push(toks.detokenize_action(&block)?);
    }
    Ok((actions, steps))
}

/// Parallel continuous chunk: one trunk pass over the prefix plus one head
/// pass; exactly one decode step regardless of K.
pub fn decode_continuous_chunk<S: Scalar>(
    model: &ModelParams<S>,
    prefix_tokens: &[u32],
    prefix_spans: &[SegmentSpan],
    k_chunk: usize,
) -> Result<(Vec<[f64; 3]>, usize)> {
    let layout = SampleLayout {
        kind: SampleKind::Vla,
        spans: prefix_spans.to_vec(),
        total_len: prefix_tokens.len(),
    };
    let mask = build_mask(&layout, MaskKind::Causal)?;
    let mut session = InferSession::new(model, mask);
    session.feed_all(prefix_tokens)?;
    let chunk = session.head_chunk(prefix_tokens.len(), k_chunk)?;
    Ok((chunk, 1))
}

#[derive(Debug, Clone)]
pub struct WmRollout {
    /// Predicted (front, wrist) grids, one entry per round.
    pub frames: Vec<(Grid, Option<Grid>)>,
    pub decode_steps: usize,
}

/// Autoregressive next-frame rollout: round i's input frames are round
/// i-1's predictions. Frame tokens decode greedily, constrained to the image
/// segment (delimiters to their single legal token), so predicted frames are
/// always valid grids. Every generated frame-pair token costs one decode
/// step: cells plus delimiters.
pub fn rollout_world_model<S: Scalar>(
    model: &ModelParams<S>,
    toks: &Tokenizers,
    obs: &Observation,
    actions: &[[f64; 3]],
    n_rounds: usize,
    use_wrist: bool,
) -> Result<WmRollout> {
    assert!(n_rounds >= 1 && actions.len() >= n_rounds);
    let cfg = LayoutConfig {
        use_wrist,
        n_rounds,
        ..Default::default()
    };
    let (prefix_tokens, mut spans) = build_wm_prefix(toks, obs, &cfg)?;
    let mut pos = prefix_tokens.len();
    let dims = toks.layout.action_dims;
    let front_cells = obs.front.rows * obs.front.cols;
    let wrist_cells = use_wrist.then_some(obs.wrist.rows * obs.wrist.cols);
    for i in 0..n_rounds {
        plan_action_block(&mut spans, &mut pos, i, dims);
        plan_frame_pair(&mut spans, &mut pos, i + 1, front_cells, wrist_cells);
    }
    let planned = SampleLayout {
        kind: SampleKind::WorldModel,
        spans,
        total_len: pos,
    };
    let mask = build_mask(&planned, MaskKind::WorldModel)?;
    let mut session = InferSession::new(model, mask);
    session.feed_all(&prefix_tokens)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0); // greedy path never consults it
    let mut steps = 0usize;
    let mut frames = Vec::with_capacity(n_rounds);
    let image_range = toks.layout.image_range();

    let mut decode_one = |session: &mut InferSession<S>, range: std::ops::Range<u32>, steps: &mut usize| -> Result<u32> {
        let logits = session.logits_last();
        *steps += 1;
        let tok = select_constrained(&logits, range, DecodeMode::Greedy, &mut rng);
        session.feed(tok)?;
        Ok(tok)
    };

    for i in 0..n_rounds {
        // Input action tokens are known: forced, no decode steps.
        session.feed(toks.layout.special(SpecialToken::ActionBegin))?;
        for t in toks.tokenize_action(&actions[i])? {
            session.feed(t)?;
        }
        session.feed(toks.layout.special(SpecialToken::ActionEnd))?;

        let mut decode_grid = |session: &mut InferSession<S>, cells: usize, rows: usize, cols: usize, steps: &mut usize| -> Result<Grid> {
            let fb = toks.layout.special(SpecialToken::FrameBegin);
            let tok = decode_one(session, fb..fb + 1, steps)?;
            debug_assert_eq!(tok, fb);
            let mut cell_tokens = Vec::with_capacity(cells);
            for _ in 0..cells {
                let tok = decode_one(session, image_range.clone(), steps)?;
                if toks.layout.classify(tok)? != Segment::Image {
                    return Err(Error::ConstraintViolation {
                        token: tok,
                        segment: "image",
                    });
                }
                cell_tokens.push(tok);
            }
            let fe = toks.layout.special(SpecialToken::FrameEnd);
            decode_one(session, fe..fe + 1, steps)?;
            toks.detokenize_frame(&cell_tokens, rows, cols)
        };

        let front = decode_grid(&mut session, front_cells, obs.front.rows, obs.front.cols, &mut steps)?;
        let wrist = match wrist_cells {
            Some(cells) => Some(decode_grid(&mut session, cells, obs.wrist.rows, obs.wrist.cols, &mut steps)?),
            None => None,
        };
        frames.push((front, wrist));
        let _ = i;
    }
    Ok(WmRollout {
        frames,
        decode_steps: steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{collect, FamilyMix};
    use crate::engine::Graph;
    use crate::env::EnvConfig;
    use crate::model::forward::{action_head_forward, trunk_forward};
    use crate::model::ModelConfig;
    use crate::sequence::build_vla_sample;

    fn fixture() -> (crate::data::Dataset, ModelParams<f64>, LayoutConfig) {
        let d = collect(&EnvConfig::default(), 2, 5, &FamilyMix::default(), 16).unwrap();
        let cfg = LayoutConfig {
            m_history: 1,
            k_chunk: 2,
            ..Default::default()
        };
        let m = ModelParams::init(
            ModelConfig {
                layers: 2,
                heads: 2,
                embed_dim: 16,
                ff_dim: 32,
                max_seq_len: 512,
                vocab_size: d.tokenizers.layout.total_size(),
                k_max: 12,
                head_layers: 1,
                ..Default::default()
            },
            &d.tokenizers.hash(),
            "bh",
            4,
        )
        .unwrap();
        (d, m, cfg)
    }

    #[test]
    fn incremental_matches_graph_forward() {
        let (d, m, cfg) = fixture();
        let s = build_vla_sample(&d.tokenizers, &d.episodes[0], 0, &cfg).unwrap();
        let mask = build_mask(&s.layout, MaskKind::ActionIsolated).unwrap();

        let mut g = Graph::new();
        let out = trunk_forward(&mut g, &m, &s.tokens, &mask).unwrap();
        let graph_logits = g.value(out.logits).clone();

        let mut session = InferSession::new(&m, mask.clone());
        session.feed_all(&s.tokens).unwrap();
        let inc_logits = session.logits_last();
        let last = s.tokens.len() - 1;
        for (a, b) in graph_logits.row(last).iter().zip(&inc_logits) {
            assert!((a - b).abs() < 1e-9, "logit mismatch {a} vs {b}");
        }

        // Head agreement on the same context.
        let pe = s.layout.prefix_end();
        let mut g = Graph::new();
        let out = trunk_forward(&mut g, &m, &s.tokens, &mask).unwrap();
        let chunk = action_head_forward(&mut g, &m, out.hidden, pe, 2).unwrap();
        let graph_chunk = g.value(chunk).clone();
        let inc_chunk = session.head_chunk(pe, 2).unwrap();
        for k in 0..2 {
            for d3 in 0..3 {
                let a = graph_chunk.row(k)[d3];
                let b = inc_chunk[k][d3];
                assert!((a - b).abs() < 1e-9, "chunk mismatch {a} vs {b}");
            }
        }
    }

    #[test]
    fn discrete_decode_accounting_and_determinism() {
        let (d, m, cfg) = fixture();
        let ep = &d.episodes[0];
        let frames = vec![&ep.steps[0].obs];
        let (prefix, spans) = crate::sequence::build_vla_prefix(
            &d.tokenizers,
            &ep.task.instruction,
            &ep.steps[0].proprio,
            &frames,
            &cfg,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in [5usize, 10] {
            let (actions, steps) = decode_discrete_chunk(
                &m, &d.tokenizers, &prefix, &spans, k,
                MaskKind::ActionIsolated, DecodeMode::Greedy, &mut rng,
            )
            .unwrap();
            assert_eq!(steps, 3 * k);
            assert_eq!(actions.len(), k);
        }
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            decode_discrete_chunk(
                &m, &d.tokenizers, &prefix, &spans, 4,
                MaskKind::ActionIsolated, DecodeMode::Greedy, &mut rng,
            )
            .unwrap()
        };
        assert_eq!(run().0, run().0);

        let (chunk, steps) = decode_continuous_chunk(&m, &prefix, &spans, 10).unwrap();
        assert_eq!(steps, 1);
        assert_eq!(chunk.len(), 10);
        let (chunk2, _) = decode_continuous_chunk(&m, &prefix, &spans, 10).unwrap();
        assert_eq!(chunk, chunk2);
    }

    #[test]
    fn wm_rollout_produces_valid_grids_with_exact_steps() {
        let (d, m, _) = fixture();
        let ep = &d.episodes[0];
        let actions = [ep.steps[0].action.as_array(), ep.steps[1].action.as_array()];
        let out = rollout_world_model(&m, &d.tokenizers, &ep.steps[0].obs, &actions, 1, true).unwrap();
        // 64 + 9 cells plus two begin/end delimiter pairs.
        assert_eq!(out.decode_steps, 64 + 9 + 4);
        assert_eq!(out.frames.len(), 1);
        let (front, wrist) = &out.frames[0];
        assert_eq!((front.rows, front.cols), (8, 8));
        assert!(front.cells.iter().all(|&c| (c as usize) < crate::env::CELL_CATEGORIES));
        let wrist = wrist.as_ref().unwrap();
        assert_eq!((wrist.rows, wrist.cols), (3, 3));

        // Two chained rounds double the frame output.
        let out2 = rollout_world_model(&m, &d.tokenizers, &ep.steps[0].obs, &actions, 2, true).unwrap();
        assert_eq!(out2.frames.len(), 2);
        assert_eq!(out2.decode_steps, 2 * 77);
        // Round 0 is identical to the single-round prediction.
        assert_eq!(out.frames[0].0, out2.frames[0].0);
    }
}
