//! `awm` -- the pipeline entry point: data generation, training (including
//! the two-stage world-model cold start), rollout and next-frame evaluation,
//! the ablation suites, and debug utilities.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric
//! failure, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use awm_core::config::Settings;
use awm_core::data;
use awm_core::error::Error;
use awm_core::eval;
use awm_core::masks::{self, MaskKind};
use awm_core::model::{load_checkpoint, save_checkpoint, ModelParams};
use awm_core::sequence::{SampleKind, SampleLayout, SegmentKind, SegmentSpan};
use awm_core::training::{self, TrainConfig};

#[derive(Parser)]
#[command(name = "awm", version, about = "Unified policy / world-model pipeline on a toy tabletop")]
struct Cli {
    /// Worker threads for batch and rollout parallelism (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output directory for reports and checkpoints.
    #[arg(long, global = true, env = "AWM_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file in flat section.key=value form.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual overrides, e.g. --set train.steps=500 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn settings(&self) -> awm_core::Result<Settings> {
        let mut overrides = Vec::new();
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set {s}: expected KEY=VALUE")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        Settings::from_sources(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Collect expert demonstrations into a dataset file.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of successful episodes to retain.
        #[arg(long)]
        episodes: Option<usize>,
        /// Collection seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output dataset path.
        #[arg(long, default_value = "dataset.bin")]
        out: PathBuf,
    },
    /// Print a dataset's metadata sidecar and verify replay integrity.
    InspectDataset {
        /// Dataset path.
        path: PathBuf,
    },
    /// Train on a dataset (mixed policy / world-model batches).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset path.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Run-log output path (line-delimited records).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Two-stage run: pure world-model pretraining, then the main stage.
    PretrainWm {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Steps of the world-model pretraining stage.
        #[arg(long, default_value_t = 300)]
        pre_steps: u64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Deployment rollouts: success rate over seeded episodes.
    EvalVla {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// model (default), random, or expert.
        #[arg(long, default_value = "model")]
        policy: String,
        /// Report output path (TSV).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Next-frame prediction quality on the held-out split.
    EvalWm {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Autoregressive prediction rounds.
        #[arg(long, default_value_t = 1)]
        rounds: usize,
    },
    /// Chunk-length x mask-kind grid of short training runs.
    AblateChunk {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated chunk sizes.
        #[arg(long, default_value = "1,8")]
        ks: String,
        /// Comma-separated mask kinds.
        #[arg(long, default_value = "causal,action_isolated")]
        masks: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
    },
    /// Paired success-vs-step curves for two configs differing in one flag.
    AblateConvergence {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// The config key both arms differ in, e.g. train.discrete_action_loss.
        #[arg(long)]
        flag: String,
        /// Flag value of arm A.
        #[arg(long)]
        a: String,
        /// Flag value of arm B.
        #[arg(long)]
        b: String,
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
    },
    /// Data-mixture sweep: success rate and next-frame accuracy per ratio.
    AblateMix {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "0.0,0.5,1.0")]
        ratios: String,
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
    },
    /// Render an attention mask as a text matrix.
    ShowMask {
        /// demo-vla or demo-wm.
        #[arg(long, default_value = "demo-vla")]
        layout: String,
        /// causal, action_isolated, or world_model.
        #[arg(long, default_value = "action_isolated")]
        kind: String,
        /// Action blocks in the demo layout.
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Cells per demo frame.
        #[arg(long, default_value_t = 4)]
        image_len: usize,
    },
    /// Print version information.
    Version,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::MaskLayoutMismatch { .. } => 2,
        Error::Io(_)
        | Error::CorruptFile(_)
        | Error::UnsupportedVersion(_)
        | Error::ChecksumMismatch
        | Error::TooFewEpisodes(_)
        | Error::ExpertFailureRate(_)
        | Error::CheckpointMismatch(_)
        | Error::EmptyValidationSet => 3,
        Error::NonScalarLoss(_)
        | Error::NonFiniteBackward { .. }
        | Error::NonFinitePerturbedLoss { .. }
        | Error::NonFiniteTrainingLoss { .. }
        | Error::NonFiniteValue(_) => 4,
        _ => 1,
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> awm_core::Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<T>()
                .map_err(|_| Error::Config(format!("bad {what} entry {p}")))
        })
        .collect()
}

fn parse_masks(s: &str) -> awm_core::Result<Vec<MaskKind>> {
    s.split(',')
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<MaskKind>())
        .collect()
}

fn load_dataset_with_settings(path: &Path, settings: &mut Settings) -> awm_core::Result<data::Dataset> {
    let dataset = data::load(path)?;
    // The dataset's env config travels with the data; it wins over defaults.
    settings.env = dataset.env_cfg.clone();
    Ok(dataset)
}

fn announce(settings: &Settings) {
    println!("{}", settings.render());
}

fn run(cli: Cli) -> awm_core::Result<()> {
    match cli.command {
        Command::GenData { cfg, episodes, seed, out } => {
            let mut settings = cfg.settings()?;
            if let Some(n) = episodes {
                settings.data.episodes = n;
            }
            if let Some(s) = seed {
                settings.data.seed = s;
            }
            announce(&settings);
            let mut dataset = data::collect(
                &settings.env,
                settings.data.episodes,
                settings.data.seed,
                &settings.data.families,
                settings.data.n_bins,
            )?;
            dataset.assign_split(settings.data.split_ratio, settings.data.split_seed)?;
            data::save(&dataset, &out)?;
            println!(
                "dataset written to {} ({} episodes, {} train / {} val, {} expert failures)",
                out.display(),
                dataset.episodes.len(),
                dataset.train_indices().len(),
                dataset.val_indices().len(),
                dataset.expert_failures,
            );
            Ok(())
        }

        Command::InspectDataset { path } => {
            let dataset = data::load(&path)?;
            print!("{}", data::metadata_text(&dataset));
            let ok = dataset
                .episodes
                .iter()
                .take(5)
                .map(|ep| data::replay_matches(&dataset.env_cfg, ep))
                .collect::<awm_core::Result<Vec<bool>>>()?;
            println!("replay_check_first_5={}", ok.iter().all(|&b| b));
            Ok(())
        }

        Command::Train { cfg, data: data_path, checkpoint, log } => {
            let mut settings = cfg.settings()?;
            let dataset = load_dataset_with_settings(&data_path, &mut settings)?;
            announce(&settings);
            let out = run_training(&settings, &dataset, None)?;
            let ckpt_path = checkpoint.unwrap_or_else(|| cli.out_dir.join("model.ckpt"));
            persist(&out, &ckpt_path, log.as_deref(), &cli.out_dir)?;
            Ok(())
        }

        Command::PretrainWm { cfg, data: data_path, pre_steps, checkpoint, log } => {
            let mut settings = cfg.settings()?;
            let dataset = load_dataset_with_settings(&data_path, &mut settings)?;
            announce(&settings);
            let mut pre_cfg = settings.train.clone();
            pre_cfg.mix_ratio = 0.0;
            pre_cfg.steps = pre_steps;
            pre_cfg.eval_interval = 0;
            let (out, pre_log) =
                training::pretrain_then_finetune(&pre_cfg, &settings.train, &dataset, None)?;
            std::fs::create_dir_all(&cli.out_dir)?;
            pre_log.write(&cli.out_dir.join("pretrain.log.jsonl"))?;
            let ckpt_path = checkpoint.unwrap_or_else(|| cli.out_dir.join("model.ckpt"));
            persist(&out, &ckpt_path, log.as_deref(), &cli.out_dir)?;
            Ok(())
        }

        Command::EvalVla { cfg, data: data_path, checkpoint, policy, report } => {
            let mut settings = cfg.settings()?;
            let dataset = load_dataset_with_settings(&data_path, &mut settings)?;
            announce(&settings);
            let rep = match policy.as_str() {
                "random" => eval::eval_random_baseline(&settings.env, &settings.eval)?,
                "expert" => eval::eval_expert(&settings.env, &settings.eval)?,
                "model" => {
                    let path = checkpoint
                        .ok_or_else(|| Error::Config("--checkpoint required for model policy".into()))?;
                    let model: ModelParams<f32> =
                        load_checkpoint(&path, Some(&dataset.tokenizers.hash()))?;
                    eval::eval_vla(&model, &dataset.tokenizers, &settings.env, &settings.eval)?
                }
                other => return Err(Error::Config(format!("unknown policy {other}"))),
            };
            println!(
                "success_rate={:.4} episodes={} decode_steps_total={}",
                rep.success_rate(),
                rep.outcomes.len(),
                rep.decode_steps_total
            );
            if let Some(path) = report {
                std::fs::write(&path, rep.to_tsv())?;
                println!("report written to {}", path.display());
            }
            Ok(())
        }

        Command::EvalWm { cfg, data: data_path, checkpoint, rounds } => {
            let mut settings = cfg.settings()?;
            let dataset = load_dataset_with_settings(&data_path, &mut settings)?;
            announce(&settings);
            let model: ModelParams<f32> =
                load_checkpoint(&checkpoint, Some(&dataset.tokenizers.hash()))?;
            let rep = eval::eval_wm(
                &model,
                &dataset,
                &settings.train.layout,
                rounds,
                settings.wm_max_pairs,
            )?;
            println!(
                "token_accuracy={:.4} frame_exact_match={:.4} psnr={:.2} ssim={:.4} pairs={} decode_steps_per_pair={}",
                rep.token_accuracy, rep.frame_exact_match, rep.psnr, rep.ssim, rep.n_pairs,
                rep.decode_steps_per_pair
            );
            Ok(())
        }

        Command::AblateChunk { cfg, data: data_path, ks, masks, seeds } => {
            let mut settings = cfg.settings()?;
            let dataset = load_dataset_with_settings(&data_path, &mut settings)?;
            announce(&settings);
            let ks: Vec<usize> = parse_list(&ks, "chunk size")?;
            let kinds = parse_masks(&masks)?;
            let seeds: Vec<u64> = parse_list(&seeds, "seed")?;
            let mut eval_cfg = settings.eval.clone();
            eval_cfg.action_type = eval::ActionType::Discrete;
            let cells = eval::ablate_chunk_length(
                &settings.train,
                &dataset,
                &settings.env,
                &eval_cfg,
                &ks,
                &kinds,
                &seeds,
            )?;
            let table = eval::ablation_table(&cells);
            print!("{table}");
            std::fs::create_dir_all(&cli.out_dir)?;
            let path = cli.out_dir.join(format!("ablate_chunk_{}.tsv", settings.hash()));
            std::fs::write(&path, table)?;
            println!("table written to {}", path.display());
            Ok(())
        }

        Command::AblateConvergence { cfg, data: data_path, flag, a, b, seeds } => {
            let mut settings = cfg.settings()?;
            let dataset = load_dataset_with_settings(&data_path, &mut settings)?;
            let seeds: Vec<u64> = parse_list(&seeds, "seed")?;
            let mut arm_a = cfg.clone();
            arm_a.sets.push(format!("{flag}={a}"));
            let mut arm_b = cfg.clone();
            arm_b.sets.push(format!("{flag}={b}"));
            let sa = arm_a.settings()?;
            let sb = arm_b.settings()?;
            announce(&sa);
            let curves = eval::ablate_convergence(
                &sa.train,
                &sb.train,
                &dataset,
                &settings.env,
                &sa.eval,
                &sb.eval,
                &seeds,
            )?;
            println!("eval_steps={:?}", curves.eval_steps);
            println!("arm_a ({flag}={a}) auc_mean={:.4}", curves.a_auc_mean);
            println!("arm_b ({flag}={b}) auc_mean={:.4}", curves.b_auc_mean);
            std::fs::create_dir_all(&cli.out_dir)?;
            let path = cli.out_dir.join(format!("ablate_convergence_{}.json", settings.hash()));
            std::fs::write(&path, serde_json::to_vec_pretty(&curves).expect("curves json"))?;
            println!("curves written to {}", path.display());
            Ok(())
        }

        Command::AblateMix { cfg, data: data_path, ratios, seeds } => {
            let mut settings = cfg.settings()?;
            let dataset = load_dataset_with_settings(&data_path, &mut settings)?;
            announce(&settings);
            let ratios: Vec<f64> = parse_list(&ratios, "mix ratio")?;
            let seeds: Vec<u64> = parse_list(&seeds, "seed")?;
            let cells = eval::ablate_mix(
                &settings.train,
                &dataset,
                &settings.env,
                &settings.eval,
                &ratios,
                &seeds,
                settings.wm_max_pairs,
            )?;
            println!("mix_ratio\tsuccess_mean\tsuccess_sd\twm_token_accuracy");
            for c in &cells {
                println!(
                    "{}\t{:.4}\t{:.4}\t{:.4}",
                    c.mix_ratio, c.success_mean, c.success_sd, c.wm_token_accuracy
                );
            }
            Ok(())
        }

        Command::ShowMask { layout, kind, k, image_len } => {
            let kind: MaskKind = kind.parse()?;
            let demo = demo_layout(&layout, k, image_len)?;
            let mask = masks::build_mask(&demo, kind)?;
            println!("layout={layout} kind={} n={}", kind.name(), demo.total_len);
            print!("{}", masks::render_mask(&mask));
            Ok(())
        }

        Command::Version => {
            println!("awm {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    }
}

fn run_training(
    settings: &Settings,
    dataset: &data::Dataset,
    init: Option<ModelParams<f32>>,
) -> awm_core::Result<training::TrainOutcome> {
    let cfg: &TrainConfig = &settings.train;
    if cfg.eval_interval > 0 {
        let mut hook =
            eval::success_rate_hook(&dataset.tokenizers, &settings.env, settings.eval.clone());
        match init {
            Some(m) => training::train_from(cfg, dataset, m, Some(&mut hook)),
            None => training::train(cfg, dataset, Some(&mut hook)),
        }
    } else {
        match init {
            Some(m) => training::train_from(cfg, dataset, m, None),
            None => training::train(cfg, dataset, None),
        }
    }
}

fn persist(
    out: &training::TrainOutcome,
    ckpt_path: &Path,
    log_path: Option<&Path>,
    out_dir: &Path,
) -> awm_core::Result<()> {
    if let Some(parent) = ckpt_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_checkpoint(&out.model, ckpt_path)?;
    let log_path = match log_path {
        Some(p) => p.to_path_buf(),
        None => {
            std::fs::create_dir_all(out_dir)?;
            out_dir.join("train.log.jsonl")
        }
    };
    out.log.write(&log_path)?;
    let last = out.log.records.iter().rev().find_map(|r| match r {
        training::LogRecord::Step { step, total, dis_action, img, conti, .. } => {
            Some((*step, *total, *dis_action, *img, *conti))
        }
        _ => None,
    });
    if let Some((step, total, dis, img, conti)) = last {
        println!(
            "final step={step} total={total:.4} dis_action={dis:.4} img={img:.4} conti={conti:.4}"
        );
    }
    println!("checkpoint written to {}", ckpt_path.display());
    println!("run log written to {}", log_path.display());
    Ok(())
}

/// Small synthetic layouts for mask inspection.
fn demo_layout(name: &str, k: usize, image_len: usize) -> awm_core::Result<SampleLayout> {
    let mut spans = Vec::new();
    let mut pos = 0usize;
    let push = |spans: &mut Vec<SegmentSpan>, pos: &mut usize, kind, len, step| {
        spans.push(SegmentSpan { kind, start: *pos, len, step });
        *pos += len;
    };
    match name {
        "demo-vla" => {
            push(&mut spans, &mut pos, SegmentKind::Special, 1, None); // BOS
            push(&mut spans, &mut pos, SegmentKind::Text, 3, None);
            push(&mut spans, &mut pos, SegmentKind::State, 2, None);
            push(&mut spans, &mut pos, SegmentKind::ImageFront, image_len, Some(0));
            for kb in 0..k.max(1) {
                push(&mut spans, &mut pos, SegmentKind::Special, 1, Some(kb));
                push(&mut spans, &mut pos, SegmentKind::Action, 3, Some(kb));
                push(&mut spans, &mut pos, SegmentKind::Special, 1, Some(kb));
            }
            Ok(SampleLayout { kind: SampleKind::Vla, spans, total_len: pos })
        }
        "demo-wm" => {
            push(&mut spans, &mut pos, SegmentKind::Special, 1, None);
            push(&mut spans, &mut pos, SegmentKind::Text, 3, None);
            push(&mut spans, &mut pos, SegmentKind::ImageFront, image_len, Some(0));
            push(&mut spans, &mut pos, SegmentKind::Special, 1, Some(0));
            push(&mut spans, &mut pos, SegmentKind::Action, 3, Some(0));
            push(&mut spans, &mut pos, SegmentKind::Special, 1, Some(0));
            push(&mut spans, &mut pos, SegmentKind::ImageFront, image_len, Some(1));
            Ok(SampleLayout { kind: SampleKind::WorldModel, spans, total_len: pos })
        }
        other => Err(Error::Config(format!(
            "unknown demo layout {other} (demo-vla or demo-wm)"
        ))),
    }
}
