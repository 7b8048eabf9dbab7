use awm_core::data;
use awm_core::env::{Action, Env, Observation};
use awm_core::masks::MaskKind;
use awm_core::model::*;
use awm_core::sequence::*;
use awm_core::training::derive_seed;
use rand::SeedableRng;

fn envv(k: &str, d: &str) -> String { std::env::var(k).unwrap_or_else(|_| d.into()) }

#[test]
fn trace_one_rollout() {
    let dataset = data::load(std::path::Path::new(&envv("PROBE_DATA", "/tmp/cal6.bin"))).unwrap();
    let model: ModelParams<f32> = load_checkpoint(std::path::Path::new(&envv("PROBE_CKPT", "/tmp/big4L128.ckpt")), None).unwrap();
    let k: usize = envv("PROBE_K", "1").parse().unwrap();
    let at = envv("PROBE_AT", "continuous");
    let cfg = LayoutConfig { m_history: 1, k_chunk: k, n_rounds: 1, use_wrist: true, use_state: true };
    let toks = &dataset.tokenizers;
    let env = Env::new(dataset.env_cfg.clone());
    let seed = derive_seed(1000, "eval_episode_0");
    let (mut state, task) = env.reset(seed, awm_core::env::TaskFamily::SingleTarget).unwrap();
    println!("task: {} block {:?} zone {:?}", task.instruction, state.objects[0].pos, state.zone_center);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut history: Vec<Observation> = vec![env.render(&state)];
    for step in 0..20 {
        let frames = vec![&history[history.len()-1]];
        let proprio = env.proprio(&state);
        let (prefix, spans) = build_vla_prefix(toks, &task.instruction, &proprio, &frames, &cfg).unwrap();
        let acts = if at == "discrete" {
            decode_discrete_chunk(&model, toks, &prefix, &spans, k, MaskKind::Causal, DecodeMode::Greedy, &mut rng).unwrap().0
        } else {
            decode_continuous_chunk(&model, &prefix, &spans, k).unwrap().0
        };
        let a = acts[0];
        println!("step {step}: grip ({:.2},{:.2}) held {:?} -> a ({:+.2},{:+.2},{:+.2})",
            state.gripper.0, state.gripper.1, state.held, a[0], a[1], a[2]);
        state = env.step(&state, &Action::new(a[0], a[1], a[2]));
        history.push(env.render(&state));
        if env.is_success(&state, &task) { println!("SUCCESS at {step}"); return; }
    }
    println!("no success; block at {:?}", state.objects[0].pos);
}
