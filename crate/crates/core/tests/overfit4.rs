use awm_core::data::{collect, FamilyMix};
use awm_core::engine::{adam_step, AdamConfig, Gradients, OptimState};
use awm_core::env::EnvConfig;
use awm_core::masks::{build_mask, MaskKind};
use awm_core::model::*;
use awm_core::sequence::*;
use awm_core::engine::Graph;

#[test]
fn overfit_four_samples() {
    let mut env_cfg = EnvConfig::default();
    env_cfg.width = 6.0; env_cfg.height = 6.0; env_cfg.front_rows = 6; env_cfg.front_cols = 6;
    let d = collect(&env_cfg, 4, 9, &FamilyMix::default(), 32).unwrap();
    let cfg = LayoutConfig { m_history: 1, k_chunk: 1, n_rounds: 1, use_wrist: true, use_state: true };
    let toks = &d.tokenizers;
    let samples: Vec<TrainingSample> = (0..4)
        .map(|i| build_vla_sample(toks, &d.episodes[i], 2 * i, &cfg).unwrap())
        .collect();
    let mcfg = ModelConfig {
        layers: 2, heads: 4, embed_dim: 48, ff_dim: 96, max_seq_len: 256,
        vocab_size: toks.layout.total_size(), k_max: 1, head_layers: 1,
        ..Default::default()
    };
    let mut model: ModelParams<f32> = ModelParams::init(mcfg, &toks.hash(), "bh", 0).unwrap();
    let mut optim = OptimState::new(AdamConfig { lr: 1e-3, warmup_steps: 10, ..Default::default() }, &model.params);
    let flags = LossFlags::default();
    let n = model.params.len();
    for step in 0..500 {
        let mut acc = Gradients::zeros(n);
        let mut total = 0.0;
        for s in &samples {
            let (g, loss, comps) = sample_loss(&model, s, MaskKind::Causal, &flags).unwrap();
            let grads = g.backward(loss, n).unwrap();
            acc.add_scaled(&grads, 0.25);
            total += comps.total / 4.0;
        }
        adam_step(&mut model.params, &acc, &mut optim).unwrap();
        if step % 100 == 0 { println!("step {step}: loss {total:.4}"); }
    }
    // Teacher-forced argmax on the action tokens of the 4 samples.
    let mut correct = 0; let mut total_toks = 0;
    for s in &samples {
        let mask = build_mask(&s.layout, MaskKind::Causal).unwrap();
        let mut g = Graph::new();
        let out = trunk_forward(&mut g, &model, &s.tokens, &mask).unwrap();
        let logits = g.value(out.logits).clone();
        for (i, &m) in s.loss_mask.iter().enumerate() {
            if m {
                let row = logits.row(i - 1);
                let pred = row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0 as u32;
                if pred == s.tokens[i] { correct += 1; }
                total_toks += 1;
            }
        }
    }
    println!("overfit TF accuracy: {correct}/{total_toks}");
    assert!(correct as f64 / total_toks as f64 > 0.9, "cannot even overfit 4 samples");
}
