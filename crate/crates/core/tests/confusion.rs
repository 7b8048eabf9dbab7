use awm_core::data;
use awm_core::masks::MaskKind;
use awm_core::model::*;
use awm_core::sequence::*;
use rand::SeedableRng;

fn envv(k: &str, d: &str) -> String { std::env::var(k).unwrap_or_else(|_| d.into()) }

#[test]
fn sign_confusion() {
    let dataset = data::load(std::path::Path::new(&envv("PROBE_DATA", "/tmp/cal6.bin"))).unwrap();
    let model: ModelParams<f32> = load_checkpoint(std::path::Path::new(&envv("PROBE_CKPT", "/tmp/big4L128.ckpt")), None).unwrap();
    let cfg = LayoutConfig { m_history: 1, k_chunk: 1, n_rounds: 1, use_wrist: true, use_state: true };
    let toks = &dataset.tokenizers;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    // confusion[dim][expert_sign][decoded_sign] with signs in {-,0,+}
    let mut conf = [[[0usize; 3]; 3]; 2];
    let cls = |v: f64| if v < -0.2 { 0 } else if v > 0.2 { 2 } else { 1 };
    for &ep_idx in dataset.train_indices().iter().take(30) {
        let ep = &dataset.episodes[ep_idx];
        for t in 0..ep.len().saturating_sub(1) {
            let frames = vec![&ep.steps[t].obs];
            let (prefix, spans) = build_vla_prefix(toks, &ep.task.instruction, &ep.steps[t].proprio, &frames, &cfg).unwrap();
            let (acts, _) = decode_discrete_chunk(&model, toks, &prefix, &spans, 1, MaskKind::Causal, DecodeMode::Greedy, &mut rng).unwrap();
            let expert = ep.steps[t].action.as_array();
            for d in 0..2 {
                conf[d][cls(expert[d])][cls(acts[0][d])] += 1;
            }
        }
    }
    for (d, name) in ["dx", "dy"].iter().enumerate() {
        println!("{name}: expert\\decoded  -    0    +");
        for (si, sn) in ["-", "0", "+"].iter().enumerate() {
            println!("  {sn}: {:5} {:5} {:5}", conf[d][si][0], conf[d][si][1], conf[d][si][2]);
        }
    }
}
