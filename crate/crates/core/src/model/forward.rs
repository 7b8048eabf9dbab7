//! Differentiable execution path: trunk, action head and the loss terms,
//! all expressed on the engine graph.

use std::sync::Arc;

use crate::engine::{Axis, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::masks::{build_mask, MaskKind, MaskMatrix};
use crate::model::ModelParams;
use crate::scalar::Scalar;
use crate::sequence::{SampleKind, TrainingSample};

const LN_EPS: f64 = 1e-5;
const MASK_FILL: f64 = -1e9;

/// Caches the graph node of each bound parameter so one graph never holds a
/// parameter twice.
struct Binder<'m, S> {
    model: &'m ModelParams<S>,
    nodes: Vec<Option<NodeId>>,
}

impl<'m, S: Scalar> Binder<'m, S> {
    fn new(model: &'m ModelParams<S>) -> Self {
        Self {
            model,
            nodes: vec![None; model.params.len()],
        }
    }

    fn node(&mut self, g: &mut Graph<S>, slot: usize) -> NodeId {
        if let Some(id) = self.nodes[slot] {
            return id;
        }
        let id = g.param(slot, self.model.params.tensor(slot).clone());
        self.nodes[slot] = Some(id);
        id
    }
}

pub struct TrunkOut {
    /// Next-token logits at every position, `[n, vocab]`.
    pub logits: NodeId,
    /// Final-layer hidden states after the last norm, `[n, embed]`.
    pub hidden: NodeId,
}

/// Pre-norm transformer trunk under an explicit attention mask.
pub fn trunk_forward<S: Scalar>(
    g: &mut Graph<S>,
    model: &ModelParams<S>,
    tokens: &[u32],
    mask: &MaskMatrix,
) -> Result<TrunkOut> {
    let mut binder = Binder::new(model);
    trunk_forward_bound(g, &mut binder, tokens, mask)
}

fn trunk_forward_bound<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binder<S>,
    tokens: &[u32],
    mask: &MaskMatrix,
) -> Result<TrunkOut> {
    let cfg = &b.model.cfg;
    let n = tokens.len();
    if n > cfg.max_seq_len {
        return Err(Error::SequenceTooLong(n, cfg.max_seq_len));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfVocab(bad, cfg.vocab_size));
    }
    assert_eq!(mask.n(), n, "mask size must match sequence length");
    let idx = &b.model.idx;

    let tok_emb = b.node(g, idx.tok_emb);
    let mut x = g.embedding(tok_emb, Arc::new(tokens.to_vec()));
    if cfg.use_pos_emb {
        let pos_emb = b.node(g, idx.pos_emb);
        let positions: Vec<u32> = (0..n as u32).collect();
        let pos = g.embedding(pos_emb, Arc::new(positions));
        x = g.add(x, pos);
    }

    let blocked = mask.blocked_arc();
    let dh = cfg.head_dim();
    let scale = S::from_config(1.0 / (dh as f64).sqrt());
    let fill = S::from_config(MASK_FILL);
    let eps = S::from_config(LN_EPS);

    let layer_idx = idx.layers.clone();
    for li in &layer_idx {
        let (ln1_g, ln1_b) = (b.node(g, li.ln1_g), b.node(g, li.ln1_b));
        let h = g.layer_norm(x, ln1_g, ln1_b, eps);
        let q = linear(g, b, h, li.wq, li.bq);
        let k = linear(g, b, h, li.wk, li.bk);
        let v = linear(g, b, h, li.wv, li.bv);
        let mut heads = Vec::with_capacity(cfg.heads);
        for hh in 0..cfg.heads {
            let qh = g.slice(q, Axis::Cols, hh * dh, dh);
            let kh = g.slice(k, Axis::Cols, hh * dh, dh);
            let vh = g.slice(v, Axis::Cols, hh * dh, dh);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scaled = g.scale(scores, scale);
            let masked = g.masked_fill(scaled, blocked.clone(), fill);
            let att = g.softmax(masked);
            heads.push(g.matmul(att, vh));
        }
        let merged = g.concat(&heads, Axis::Cols);
        let attn_out = linear(g, b, merged, li.wo, li.bo);
        x = g.add(x, attn_out);

        let (ln2_g, ln2_b) = (b.node(g, li.ln2_g), b.node(g, li.ln2_b));
        let m = g.layer_norm(x, ln2_g, ln2_b, eps);
        let m1 = linear(g, b, m, li.w1, li.b1);
        let a1 = g.gelu(m1);
        let m2 = linear(g, b, a1, li.w2, li.b2);
        x = g.add(x, m2);
    }

    let (lnf_g, lnf_b) = (b.node(g, idx.lnf_g), b.node(g, idx.lnf_b));
    let hidden = g.layer_norm(x, lnf_g, lnf_b, eps);
    let logits = linear(g, b, hidden, idx.out_w, idx.out_b);
    Ok(TrunkOut { logits, hidden })
}

fn linear<S: Scalar>(g: &mut Graph<S>, b: &mut Binder<S>, x: NodeId, w: usize, bias: usize) -> NodeId {
    let wn = b.node(g, w);
    let bn = b.node(g, bias);
    let y = g.matmul(x, wn);
    g.add(y, bn)
}

/// Single-head attention used inside the action head.
fn attn_single<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binder<S>,
    q_in: NodeId,
    kv_in: NodeId,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
) -> NodeId {
    let d = b.model.cfg.embed_dim;
    let scale = S::from_config(1.0 / (d as f64).sqrt());
    let q = linear(g, b, q_in, wq, bq);
    let k = linear(g, b, kv_in, wk, bk);
    let v = linear(g, b, kv_in, wv, bv);
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scaled = g.scale(scores, scale);
    let att = g.softmax(scaled);
    let out = g.matmul(att, v);
    linear(g, b, out, wo, bo)
}

/// K learnable queries attend bidirectionally among themselves and
/// cross-attend to the trunk's hidden states at prefix positions only
/// (text / state / image, never discrete-action positions); a linear
/// projection emits the whole K x 3 chunk in one pass.
pub fn action_head_forward<S: Scalar>(
    g: &mut Graph<S>,
    model: &ModelParams<S>,
    hidden: NodeId,
    prefix_end: usize,
    k_chunk: usize,
) -> Result<NodeId> {
    let mut binder = Binder::new(model);
    action_head_bound(g, &mut binder, hidden, prefix_end, k_chunk)
}

fn action_head_bound<S: Scalar>(
    g: &mut Graph<S>,
    b: &mut Binder<S>,
    hidden: NodeId,
    prefix_end: usize,
    k_chunk: usize,
) -> Result<NodeId> {
    let cfg = &b.model.cfg;
    if k_chunk > cfg.k_max {
        return Err(Error::ChunkTooLarge {
            k: k_chunk,
            k_max: cfg.k_max,
        });
    }
    assert!(prefix_end > 0 && prefix_end <= g.value(hidden).rows());
    let idx = b.model.idx.clone();
    let eps = S::from_config(LN_EPS);

    let ctx = g.slice(hidden, Axis::Rows, 0, prefix_end);
    let queries = b.node(g, idx.queries);
    let mut q = g.slice(queries, Axis::Rows, 0, k_chunk);

    let self_attn = cfg.head_self_attn;
    for hl in &idx.head_layers {
        if self_attn {
            let (g1, b1) = (b.node(g, hl.ln1_g), b.node(g, hl.ln1_b));
            let hq = g.layer_norm(q, g1, b1, eps);
            let a = attn_single(
                g, b, hq, hq, hl.self_wq, hl.self_bq, hl.self_wk, hl.self_bk, hl.self_wv,
                hl.self_bv, hl.self_wo, hl.self_bo,
            );
            q = g.add(q, a);
        }
        let (g2, b2) = (b.node(g, hl.ln2_g), b.node(g, hl.ln2_b));
        let hq = g.layer_norm(q, g2, b2, eps);
        let a = attn_single(
            g, b, hq, ctx, hl.cross_wq, hl.cross_bq, hl.cross_wk, hl.cross_bk, hl.cross_wv,
            hl.cross_bv, hl.cross_wo, hl.cross_bo,
        );
        q = g.add(q, a);
        let (g3, b3) = (b.node(g, hl.ln3_g), b.node(g, hl.ln3_b));
        let m = g.layer_norm(q, g3, b3, eps);
        let m1 = linear(g, b, m, hl.w1, hl.b1);
        let a1 = g.gelu(m1);
        let m2 = linear(g, b, a1, hl.w2, hl.b2);
        q = g.add(q, m2);
    }

    let (lg, lb) = (b.node(g, idx.head_ln_g), b.node(g, idx.head_ln_b));
    let normed = g.layer_norm(q, lg, lb, eps);
    Ok(linear(g, b, normed, idx.proj_w, idx.proj_b))
}

/// Mean cross-entropy over the masked positions only.
pub fn discrete_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: NodeId,
    targets: &[u32],
    rows: &[bool],
) -> Result<NodeId> {
    g.cross_entropy(logits, Arc::new(targets.to_vec()), Arc::new(rows.to_vec()))
}

/// Mean absolute error between a K x 3 chunk and its raw targets.
pub fn continuous_loss<S: Scalar>(
    g: &mut Graph<S>,
    chunk: NodeId,
    targets: &[[f64; 3]],
) -> Result<NodeId> {
    let k = targets.len();
    let pred_shape = g.value(chunk).shape().to_vec();
    if pred_shape != [k, 3] {
        return Err(Error::ShapeMismatch(format!(
            "chunk {pred_shape:?} vs targets {k}x3"
        )));
    }
    let data: Vec<S> = targets
        .iter()
        .flat_map(|row| row.iter().map(|&v| S::from_config(v)))
        .collect();
    Ok(g.l1_loss(chunk, Tensor::from_rows(k, 3, data)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossFlags {
    pub discrete_action_loss: bool,
    pub continuous_head: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Self {
            discrete_action_loss: true,
            continuous_head: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossComponents {
    pub total: f64,
    pub dis_action: f64,
    pub img: f64,
    pub conti: f64,
}

impl LossComponents {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.dis_action.is_finite()
            && self.img.is_finite()
            && self.conti.is_finite()
    }
}

/// Full per-sample objective on one graph.
///
/// Policy samples contribute `L_dis_action + alpha * L_conti_action` (each
/// term subject to its feature flag); world-model samples contribute `L_img`.
pub fn sample_loss<S: Scalar>(
    model: &ModelParams<S>,
    sample: &TrainingSample,
    mask_kind: MaskKind,
    flags: &LossFlags,
) -> Result<(Graph<S>, NodeId, LossComponents)> {
    let mut g = Graph::new();
    let mut binder = Binder::new(model);
    let mask = build_mask(&sample.layout, mask_kind)?;
    let trunk = trunk_forward_bound(&mut g, &mut binder, &sample.tokens, &mask)?;

    let n = sample.tokens.len();
    // Row i of the logits predicts the token at position i + 1.
    let mut targets = vec![0u32; n];
    let mut rows = vec![false; n];
    for i in 0..n - 1 {
        targets[i] = sample.tokens[i + 1];
        rows[i] = sample.loss_mask[i + 1];
    }

    match sample.layout.kind {
        SampleKind::Vla => {
            let mut components = LossComponents::default();
            let mut total: Option<NodeId> = None;
            if flags.discrete_action_loss {
                let dis = discrete_loss(&mut g, trunk.logits, &targets, &rows)?;
                components.dis_action = g.value(dis).item().to_f64_lossy();
                total = Some(dis);
            }
            if flags.continuous_head {
                let targets = sample
                    .action_targets
                    .as_ref()
                    .expect("vla sample carries action targets");
                let chunk = action_head_bound(
                    &mut g,
                    &mut binder,
                    trunk.hidden,
                    sample.layout.prefix_end(),
                    targets.len(),
                )?;
                let conti = continuous_loss(&mut g, chunk, targets)?;
                components.conti = g.value(conti).item().to_f64_lossy();
                let weighted = g.scale(conti, S::from_config(model.cfg.alpha));
                total = Some(match total {
                    Some(t) => g.add(t, weighted),
                    None => weighted,
                });
            }
            let total = total.ok_or(Error::NoSampleKindEnabled)?;
            components.total = g.value(total).item().to_f64_lossy();
            Ok((g, total, components))
        }
        SampleKind::WorldModel => {
            let img = discrete_loss(&mut g, trunk.logits, &targets, &rows)?;
            let components = LossComponents {
                total: g.value(img).item().to_f64_lossy(),
                img: g.value(img).item().to_f64_lossy(),
                ..Default::default()
            };
            Ok((g, img, components))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{collect, FamilyMix};
    use crate::engine::finite_diff_check;
    use crate::env::EnvConfig;
    use crate::masks::MaskMatrix;
    use crate::model::ModelConfig;
    use crate::sequence::{build_vla_sample, build_wm_sample, LayoutConfig, SampleLayout, SegmentKind, SegmentSpan};

    fn tiny_model(vocab: usize, use_pos: bool) -> ModelParams<f64> {
        ModelParams::init(
            ModelConfig {
                layers: 2,
                heads: 2,
                embed_dim: 12,
                ff_dim: 24,
                max_seq_len: 64,
                vocab_size: vocab,
                k_max: 3,
                head_layers: 1,
                use_pos_emb: use_pos,
                ..Default::default()
            },
            "vh",
            "bh",
            9,
        )
        .unwrap()
    }

    fn causal(n: usize) -> MaskMatrix {
        let layout = SampleLayout {
            kind: crate::sequence::SampleKind::Vla,
            spans: vec![SegmentSpan { kind: SegmentKind::Text, start: 0, len: n, step: None }],
            total_len: n,
        };
        build_mask(&layout, MaskKind::Causal).unwrap()
    }

    #[test]
    fn outputs_before_a_position_ignore_it() {
        let m = tiny_model(20, true);
        let mask = causal(6);
        let tokens_a = vec![1, 2, 3, 4, 5, 6];
        let tokens_b = vec![1, 2, 3, 9, 5, 6]; // perturb position 3
        let run = |tokens: &[u32]| {
            let mut g = Graph::new();
            let out = trunk_forward(&mut g, &m, tokens, &mask).unwrap();
            g.value(out.logits).clone()
        };
        let la = run(&tokens_a);
        let lb = run(&tokens_b);
        for p in 0..3 {
            assert_eq!(la.row(p), lb.row(p), "position {p} must not see position 3");
        }
        assert_ne!(la.row(3), lb.row(3));
    }

    #[test]
    fn token_out_of_vocab_and_length_guards() {
        let m = tiny_model(20, true);
        let mask = causal(2);
        let mut g = Graph::new();
        assert!(matches!(
            trunk_forward(&mut g, &m, &[1, 25], &mask),
            Err(Error::TokenOutOfVocab(25, 20))
        ));
        let long = vec![0u32; 65];
        let mask = causal(65);
        let mut g = Graph::new();
        assert!(matches!(
            trunk_forward(&mut g, &m, &long, &mask),
            Err(Error::SequenceTooLong(65, 64))
        ));
    }

    #[test]
    fn identical_tokens_under_diagonal_mask_give_identical_rows() {
        // Degenerate config: no position encodings, attention restricted to
        // the diagonal, so both positions compute the same function.
        let m = tiny_model(20, false);
        let layout = SampleLayout {
            kind: crate::sequence::SampleKind::Vla,
            spans: vec![
                SegmentSpan { kind: SegmentKind::Action, start: 0, len: 1, step: Some(0) },
                SegmentSpan { kind: SegmentKind::Action, start: 1, len: 1, step: Some(1) },
            ],
            total_len: 2,
        };
        let mask = build_mask(&layout, MaskKind::ActionIsolated).unwrap();
        assert!(mask.allowed(0, 0) && mask.allowed(1, 1) && !mask.allowed(1, 0));
        let mut g = Graph::new();
        let out = trunk_forward(&mut g, &m, &[7, 7], &mask).unwrap();
        let logits = g.value(out.logits);
        assert_eq!(logits.row(0), logits.row(1));
    }

    #[test]
    fn discrete_loss_analytic_cases() {
        let mut g: Graph<f64> = Graph::new();
        let v = 10;
        let logits = g.input(Tensor::from_rows(4, v, vec![0.0; 4 * v]));
        let loss = discrete_loss(&mut g, logits, &[1, 2, 3, 4], &[true; 4]).unwrap();
        assert!((g.value(loss).item() - (v as f64).ln()).abs() < 1e-12);

        // Near-one-hot logits give near-zero loss.
        let mut g: Graph<f64> = Graph::new();
        let mut data = vec![0.0; 2 * v];
        data[3] = 50.0;
        data[v + 7] = 50.0;
        let logits = g.input(Tensor::from_rows(2, v, data));
        let loss = discrete_loss(&mut g, logits, &[3, 7], &[true, true]).unwrap();
        assert!(g.value(loss).item() < 1e-9);

        // Masking half the rows averages over that half only.
        let mut g: Graph<f64> = Graph::new();
        let mut data = vec![0.0; 4 * 2];
        data[0] = 1.0; // row 0 favors class 0
        data[3] = 1.0; // row 1 favors class 1
        let logits = g.input(Tensor::from_rows(4, 2, data.clone()));
        let loss = discrete_loss(&mut g, logits, &[0, 1, 0, 0], &[true, true, false, false]).unwrap();
        let expect = |z: f64| (1.0 + (-z).exp()).ln(); // -log sigmoid margin
        let want = (expect(1.0) + expect(1.0)) / 2.0;
        assert!((g.value(loss).item() - want).abs() < 1e-12);

        let mut g: Graph<f64> = Graph::new();
        let logits = g.input(Tensor::from_rows(1, 2, vec![0.0, 0.0]));
        assert!(matches!(
            discrete_loss(&mut g, logits, &[0], &[false]),
            Err(Error::EmptyLossMask)
        ));
    }

    #[test]
    fn continuous_loss_cases() {
        let mut g: Graph<f64> = Graph::new();
        let chunk = g.input(Tensor::from_rows(2, 3, vec![0.5; 6]));
        let loss = continuous_loss(&mut g, chunk, &[[0.5; 3]; 2]).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);

        let mut g: Graph<f64> = Graph::new();
        let chunk = g.input(Tensor::from_rows(2, 3, vec![1.0; 6]));
        let loss = continuous_loss(&mut g, chunk, &[[0.5; 3]; 2]).unwrap();
        assert!((g.value(loss).item() - 0.5).abs() < 1e-12);

        // Single-entry difference d in a K=2 chunk -> d/6.
        let mut g: Graph<f64> = Graph::new();
        let mut data = vec![0.0; 6];
        data[4] = 0.3;
        let chunk = g.input(Tensor::from_rows(2, 3, data));
        let loss = continuous_loss(&mut g, chunk, &[[0.0; 3]; 2]).unwrap();
        assert!((g.value(loss).item() - 0.3 / 6.0).abs() < 1e-12);

        let mut g: Graph<f64> = Graph::new();
        let chunk = g.input(Tensor::from_rows(2, 3, vec![0.0; 6]));
        assert!(continuous_loss(&mut g, chunk, &[[0.0; 3]; 3]).is_err());
    }

    fn dataset_and_model() -> (crate::data::Dataset, ModelParams<f64>, LayoutConfig) {
        let d = collect(&EnvConfig::default(), 2, 5, &FamilyMix::default(), 8).unwrap();
        let cfg = LayoutConfig {
            m_history: 1,
            k_chunk: 2,
            n_rounds: 1,
            use_wrist: false,
            use_state: true,
        };
        let m = ModelParams::init(
            ModelConfig {
                layers: 1,
                heads: 2,
                embed_dim: 8,
                ff_dim: 16,
                max_seq_len: 256,
                vocab_size: d.tokenizers.layout.total_size(),
                k_max: 2,
                head_layers: 1,
                init_std: 0.35,
                ..Default::default()
            },
            &d.tokenizers.hash(),
            "bh",
            1,
        )
        .unwrap();
        (d, m, cfg)
    }

    #[test]
    fn head_output_shape_and_query_independence() {
        let (d, mut m, cfg) = dataset_and_model();
        let s = build_vla_sample(&d.tokenizers, &d.episodes[0], 0, &cfg).unwrap();
        let mask = build_mask(&s.layout, MaskKind::ActionIsolated).unwrap();

        m.cfg.head_self_attn = false;
        let run = |m: &ModelParams<f64>| {
            let mut g = Graph::new();
            let out = trunk_forward(&mut g, m, &s.tokens, &mask).unwrap();
            let chunk =
                action_head_forward(&mut g, m, out.hidden, s.layout.prefix_end(), 2).unwrap();
            g.value(chunk).clone()
        };
        let base = run(&m);
        assert_eq!(base.shape(), &[2, 3]);

        // With query self-attention ablated, perturbing query 1 leaves query
        // 0's output untouched.
        let slot = m.idx.queries;
        let d_model = m.cfg.embed_dim;
        m.params.tensor_mut(slot).data_mut()[d_model] += 0.37; // row 1, col 0
        let perturbed = run(&m);
        assert_eq!(base.row(0), perturbed.row(0));
        assert_ne!(base.row(1), perturbed.row(1));

        let mut g = Graph::new();
        let out = trunk_forward(&mut g, &m, &s.tokens, &mask).unwrap();
        assert!(matches!(
            action_head_forward(&mut g, &m, out.hidden, s.layout.prefix_end(), 5),
            Err(Error::ChunkTooLarge { k: 5, k_max: 2 })
        ));
    }

    #[test]
    fn joint_gradient_check_through_head_and_trunk() {
        let (d, m, cfg) = dataset_and_model();
        let s = build_vla_sample(&d.tokenizers, &d.episodes[0], 0, &cfg).unwrap();
        let flags = LossFlags::default();
        let err = finite_diff_check(
            |p: &crate::engine::ParamSet<f64>| {
                let mut probe = m.clone();
                probe.params = p.clone();
                let (g, loss, _) = sample_loss(&probe, &s, MaskKind::ActionIsolated, &flags)?;
                Ok((g, loss))
            },
            &m.params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "joint gradient error {err}");
    }

    #[test]
    fn loss_composition_matches_formula() {
        let (d, m, cfg) = dataset_and_model();
        let vla = build_vla_sample(&d.tokenizers, &d.episodes[0], 0, &cfg).unwrap();
        let wm = build_wm_sample(&d.tokenizers, &d.episodes[0], 0, &cfg).unwrap();
        let flags = LossFlags::default();

        let (_, _, cv) = sample_loss(&m, &vla, MaskKind::ActionIsolated, &flags).unwrap();
        let want = cv.dis_action + m.cfg.alpha * cv.conti;
        assert!((cv.total - want).abs() <= 1e-6 * want.abs().max(1.0));
        assert_eq!(cv.img, 0.0);

        let (_, _, cw) = sample_loss(&m, &wm, MaskKind::WorldModel, &flags).unwrap();
        assert_eq!(cw.total, cw.img);
        assert_eq!(cw.dis_action, 0.0);
        assert_eq!(cw.conti, 0.0);

        // alpha = 0 reduces the policy objective to the discrete term.
        let mut m0 = m.clone();
        m0.cfg.alpha = 0.0;
        let (_, _, c0) = sample_loss(&m0, &vla, MaskKind::ActionIsolated, &flags).unwrap();
        assert!((c0.total - c0.dis_action).abs() <= 1e-9 * c0.total.abs().max(1.0));

        // Flags drop their terms.
        let only_cont = LossFlags { discrete_action_loss: false, continuous_head: true };
        let (_, _, cc) = sample_loss(&m, &vla, MaskKind::ActionIsolated, &only_cont).unwrap();
        assert_eq!(cc.dis_action, 0.0);
        assert!((cc.total - m.cfg.alpha * cc.conti).abs() <= 1e-9 * cc.total.abs().max(1.0));
    }

    #[test]
    fn blocked_positions_cannot_influence_later_action_blocks() {
        // Under the isolation mask, perturbing an action token in block 0
        // must leave logits inside block 1 unchanged.
        let (d, m, cfg) = dataset_and_model();
        let s = build_vla_sample(&d.tokenizers, &d.episodes[0], 0, &cfg).unwrap();
        let mask = build_mask(&s.layout, MaskKind::ActionIsolated).unwrap();
        let block0 = s
            .layout
            .spans
            .iter()
            .find(|sp| sp.kind == SegmentKind::Action && sp.step == Some(0))
            .unwrap()
            .clone();
        let block1 = s
            .layout
            .spans
            .iter()
            .find(|sp| sp.kind == SegmentKind::Action && sp.step == Some(1))
            .unwrap()
            .clone();
        let mut mutated = s.tokens.clone();
        // Move the dx token of block 0 to a different bin.
        let (dim, bin) = d.tokenizers.layout.action_dim_bin(mutated[block0.start]).unwrap();
        let new_bin = if bin == 0 { 1 } else { bin - 1 };
        mutated[block0.start] = d.tokenizers.layout.action_token(dim, new_bin);

        let run = |tokens: &[u32]| {
            let mut g = Graph::new();
            let out = trunk_forward(&mut g, &m, tokens, &mask).unwrap();
            g.value(out.logits).clone()
        };
        let la = run(&s.tokens);
        let lb = run(&mutated);
        for p in block1.start - 1..block1.end() {
            assert_eq!(la.row(p), lb.row(p), "block 1 logits at {p} changed");
        }
        // Under plain causal the same perturbation does reach block 1.
        let cmask = build_mask(&s.layout, MaskKind::Causal).unwrap();
        let runc = |tokens: &[u32]| {
            let mut g = Graph::new();
            let out = trunk_forward(&mut g, &m, tokens, &cmask).unwrap();
            g.value(out.logits).clone()
        };
        assert_ne!(runc(&s.tokens).row(block1.start), runc(&mutated).row(block1.start));
    }
}
