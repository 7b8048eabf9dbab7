// Dev calibration probe, driven by env vars:
//   PROBE_DATA, PROBE_CKPT, PROBE_LAYERS, PROBE_DIM, PROBE_FF, PROBE_K
use awm_core::data;
use awm_core::env::Env;
use awm_core::model::*;
use awm_core::masks::MaskKind;
use awm_core::sequence::*;
use rand::SeedableRng;

fn envv(k: &str, d: &str) -> String { std::env::var(k).unwrap_or_else(|_| d.into()) }

#[test]
fn probe_sign_accuracy() {
    let dataset = data::load(std::path::Path::new(&envv("PROBE_DATA", "/tmp/cal6.bin"))).unwrap();
    let model: ModelParams<f32> = load_checkpoint(std::path::Path::new(&envv("PROBE_CKPT", "/tmp/a_base.ckpt")), None).unwrap();
    let k: usize = envv("PROBE_K", "1").parse().unwrap();
    let cfg = LayoutConfig { m_history: 1, k_chunk: k, n_rounds: 1, use_wrist: true, use_state: true };
    let toks = &dataset.tokenizers;
    let env = Env::new(dataset.env_cfg.clone());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);

    for (name, indices) in [("train", dataset.train_indices()), ("val", dataset.val_indices())] {
        let mut sign_ok = 0usize; let mut sign_tot = 0usize;
        let mut close_ok = 0usize; let mut close_tot = 0usize;
        let mut varsum = 0.0; let mut prev: Option<[f64;3]> = None; let mut distinct = 0usize;
        for &ep_idx in indices.iter().take(12) {
            let ep = &dataset.episodes[ep_idx];
            for t in 0..ep.len().saturating_sub(k) {
                let frames = vec![&ep.steps[t].obs];
                let (prefix, spans) = build_vla_prefix(toks, &ep.task.instruction, &ep.steps[t].proprio, &frames, &cfg).unwrap();
                let (acts, _) = decode_discrete_chunk(&model, toks, &prefix, &spans, k, MaskKind::Causal, DecodeMode::Greedy, &mut rng).unwrap();
                let expert = ep.steps[t].action.as_array();
                let a = acts[0];
                for d in 0..2 {
                    if expert[d].abs() > 0.15 {
                        sign_tot += 1;
                        if a[d].signum() == expert[d].signum() && a[d].abs() > 0.05 { sign_ok += 1; }
                    }
                }
                close_tot += 1;
                if (a[2] > 0.0) == (expert[2] > 0.0) { close_ok += 1; }
                if let Some(p) = prev { if p != a { distinct += 1; } }
                prev = Some(a);
                varsum += a[0].abs() + a[1].abs();
            }
        }
        println!("{name}: sign_acc {}/{} = {:.3}  g_acc {}/{} = {:.3}  distinct-frac {:.2}  mean|dxy| {:.3}",
            sign_ok, sign_tot, sign_ok as f64 / sign_tot.max(1) as f64,
            close_ok, close_tot, close_ok as f64 / close_tot.max(1) as f64,
            distinct as f64 / close_tot.max(1) as f64, varsum / (2.0 * close_tot.max(1) as f64));
        let _ = &env;
    }
}
