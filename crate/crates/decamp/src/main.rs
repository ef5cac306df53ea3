use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use decamp::checkpoint::Checkpoint;
use decamp::files::{read_json, read_scenes, write_json, write_scenes, Provenance};
use decamp::pipeline::{
    compare, finetune, generate_dataset, pretrain, prepare_scenes, ExperimentConfig, FinetuneInit, Finetuner,
    Pretrainer, RunDir,
};
use decamp::{Error, Result};
use decamp_core::masking::make_mask_plan;
use decamp_core::metrics::MetricsReport;
use decamp_core::numerics::RngState;
use decamp_core::scene::{EgoFrame, Frame, Scene};
use decamp_core::train::{evaluate_scene, predict, reconstruct, Prediction, Reconstruction, StageKind};

#[derive(Parser)]
#[command(name = "decamp", version, about = "Masked pre-training and multi-world forecasting on traffic scenes")]
struct Cli {
    /// Experiment configuration (JSON); unset fields take their defaults.
    #[arg(long, global = true, env = "DECAMP_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes as JSON lines.
    GenData {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised pre-training into a run directory.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a pre-training checkpoint or run directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<u64>,
        /// Checkpoints kept on disk.
        #[arg(long, default_value_t = 3)]
        keep: usize,
    },
    /// Multi-world fine-tuning, from a pre-training checkpoint or from scratch.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// Held-out scenes evaluated after every epoch.
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Pre-training checkpoint or run directory; omit to train from scratch.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long, default_value_t = 3)]
        keep: usize,
    },
    /// Metrics of a fine-tuned checkpoint on a scene file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predicted worlds and mode scores for plotting.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Original, masked and reconstructed views from a pre-training checkpoint.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-trained vs scratch fine-tuning over several seeds.
    Compare {
        #[arg(long)]
        pretrain_data: PathBuf,
        #[arg(long)]
        finetune_data: PathBuf,
        #[arg(long)]
        eval_data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    provenance: Provenance,
    #[serde(flatten)]
    metrics: &'a MetricsReport,
}

#[derive(Serialize)]
struct ScenePrediction {
    index: usize,
    /// Transform from the original frame; predictions are ego-normalised.
    ego: Option<EgoFrame>,
    #[serde(flatten)]
    prediction: Prediction,
}

#[derive(Serialize)]
struct SceneReconstruction {
    index: usize,
    original: Scene,
    /// Masked indices per agent history, agent future and lane.
    mask: MaskIndices,
    reconstructed: Reconstruction,
}

#[derive(Serialize)]
struct MaskIndices {
    history: Vec<Vec<usize>>,
    future: Vec<Vec<usize>>,
    lanes: Vec<Vec<usize>>,
}

#[derive(Serialize)]
struct Output<T> {
    provenance: Provenance,
    scenes: Vec<T>,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = match path {
        Some(p) => read_json(p)?,
        None => ExperimentConfig::default(),
    };
    let cfg = match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn normalized(scenes: Vec<Scene>) -> Result<Vec<(Scene, Option<EgoFrame>)>> {
    scenes
        .into_iter()
        .map(|s| match s.frame {
            Frame::Raw => {
                let (n, f) = decamp_core::scene::normalize_scene(&s)?;
                Ok((n, Some(f)))
            }
            Frame::EgoNormalized => Ok((s, None)),
        })
        .collect()
}

fn finetuned(path: &Path) -> Result<Finetuner> {
    let ck = Checkpoint::load(path)?;
    if ck.stage != StageKind::Finetune {
        return Err(Error::Usage(format!(
            "{} is a pre-training checkpoint; fine-tune it first with `decamp finetune --init {}`",
            path.display(),
            path.display()
        )));
    }
    Finetuner::restore(&ck)
}

fn stats(values: impl Iterator<Item = usize> + Clone) -> String {
    let n = values.clone().count();
    if n == 0 {
        return "-".into();
    }
    let min = values.clone().min().unwrap_or(0);
    let max = values.clone().max().unwrap_or(0);
    let mean = values.sum::<usize>() as f64 / n as f64;
    format!("{min}/{mean:.2}/{max}")
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let seed = cli.seed.unwrap_or(cfg.pretrain.seed);
    match cli.command {
        Command::GenData { count, out } => {
            let scenes = generate_dataset(&cfg.data, seed, count)?;
            write_scenes(&out, &scenes, Some(&Provenance::new("gen-data", seed, &cfg.data)))?;
            println!(
                "wrote {count} scenes to {}; agents min/mean/max {}; lanes min/mean/max {}",
                out.display(),
                stats(scenes.iter().map(Scene::num_agents)),
                stats(scenes.iter().map(Scene::num_lanes))
            );
        }
        Command::Pretrain { data, out, resume, epochs, max_steps, keep } => {
            let mut tc = cfg.pretrain.clone();
            tc.epochs = epochs.unwrap_or(tc.epochs);
            tc.max_steps = max_steps.or(tc.max_steps);
            let scenes = prepare_scenes(&read_scenes(&data)?, &tc)?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?.map(|mut ck| {
                ck.config.epochs = tc.epochs;
                ck.config.max_steps = tc.max_steps;
                ck
            });
            if let Some(ck) = &resume {
                tc = ck.config.clone();
            }
            let mut run = RunDir::create(&out, Provenance::new("pretrain", tc.seed, &tc), keep)?;
            let t: Pretrainer = pretrain(&scenes, &tc, resume.as_ref(), Some(&mut run))?;
            println!("pre-trained {} steps over {} epochs; checkpoints in {}", t.step, t.epoch, out.join("checkpoints").display());
        }
        Command::Finetune { data, eval, init, out, epochs, max_steps, keep } => {
            let mut tc = cfg.finetune.clone();
            tc.epochs = epochs.unwrap_or(tc.epochs);
            tc.max_steps = max_steps.or(tc.max_steps);
            let train = prepare_scenes(&read_scenes(&data)?, &tc)?;
            let held_out = match eval {
                Some(p) => prepare_scenes(&read_scenes(&p)?, &tc)?,
                None => Vec::new(),
            };
            let ck = init.as_deref().map(Checkpoint::load).transpose()?;
            if let Some(c) = &ck {
                if c.stage != StageKind::Pretrain {
                    return Err(Error::Usage("--init expects a pre-training checkpoint".into()));
                }
            }
            let mut run = RunDir::create(&out, Provenance::new("finetune", tc.seed, &tc), keep)?;
            let init = ck.as_ref().map_or(FinetuneInit::Scratch, FinetuneInit::Pretrained);
            let (t, transfer) = finetune(&train, &held_out, &tc, init, Some(&mut run))?;
            if let Some(r) = transfer {
                println!("transferred {} parameters, {} freshly initialised", r.transferred.len(), r.fresh.len());
            }
            if !held_out.is_empty() {
                let m = t.evaluate(&held_out)?;
                println!("held-out AvgMinFDE {:.4} AvgMinADE {:.4} ActorMR {:.4}", m.avg_min_fde, m.avg_min_ade, m.actor_mr);
            }
            println!("fine-tuned {} steps over {} epochs; checkpoints in {}", t.step, t.epoch, out.join("checkpoints").display());
        }
        Command::Eval { checkpoint, scenes, out } => {
            let t = finetuned(&checkpoint)?;
            let scenes = prepare_scenes(&read_scenes(&scenes)?, &t.cfg)?;
            let per_scene = scenes
                .iter()
                .map(|s| evaluate_scene(&t.model, &t.store, s, t.cfg.tau))
                .collect::<decamp_core::Result<Vec<_>>>()?;
            let m = MetricsReport::aggregate(per_scene, t.cfg.tau);
            write_json(&out, &EvalOutput { provenance: Provenance::new("eval", t.cfg.seed, &t.cfg), metrics: &m })?;
            println!("AvgMinFDE {:.4} AvgMinADE {:.4} ActorMR {:.4} over {} scenes", m.avg_min_fde, m.avg_min_ade, m.actor_mr, m.n_scenes);
        }
        Command::Predict { checkpoint, scenes, out } => {
            let t = finetuned(&checkpoint)?;
            let mut preds = Vec::new();
            for (index, (s, ego)) in normalized(read_scenes(&scenes)?)?.into_iter().enumerate() {
                let prediction = predict(&t.model, &t.store, &s)?;
                preds.push(ScenePrediction { index, ego, prediction });
            }
            let n = preds.len();
            write_json(&out, &Output { provenance: Provenance::new("predict", t.cfg.seed, &t.cfg), scenes: preds })?;
            println!("wrote predictions for {n} scenes to {}", out.display());
        }
        Command::Reconstruct { checkpoint, scene, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            if ck.stage != StageKind::Pretrain {
                return Err(Error::Usage(format!("{} is not a pre-training checkpoint", checkpoint.display())));
            }
            let t = Pretrainer::restore(&ck)?;
            let mut views = Vec::new();
            for (index, (s, _)) in normalized(read_scenes(&scene)?)?.into_iter().enumerate() {
                let mut rng = RngState::derive(seed, &[index as u64]);
                let plan = make_mask_plan(&s, t.cfg.model.ratios, t.cfg.mask_style, &mut rng)?;
                let reconstructed = reconstruct(&t.model, &t.store, &s, &plan)?;
                let idx = |m: &Vec<Vec<bool>>| {
                    m.iter().map(|r| r.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect()).collect()
                };
                let mask = MaskIndices { history: idx(&plan.history), future: idx(&plan.future), lanes: idx(&plan.lanes) };
                println!("scene {index}: mean reconstruction L1 {:.4} m", reconstructed.spatial_l1);
                views.push(SceneReconstruction { index, original: s, mask, reconstructed });
            }
            write_json(&out, &Output { provenance: Provenance::new("reconstruct", seed, &t.cfg), scenes: views })?;
        }
        Command::Compare { pretrain_data, finetune_data, eval_data, seeds, out } => {
            let p = prepare_scenes(&read_scenes(&pretrain_data)?, &cfg.pretrain)?;
            let f = prepare_scenes(&read_scenes(&finetune_data)?, &cfg.finetune)?;
            let e = prepare_scenes(&read_scenes(&eval_data)?, &cfg.finetune)?;
            let mut report = compare(&p, &f, &e, &cfg, &seeds, |line| println!("{line}"))?;
            report.provenance = Some(Provenance::new("compare", seed, &cfg));
            write_json(&out, &report)?;
            println!(
                "pretrained {:.4} ± {:.4}, scratch {:.4} ± {:.4} AvgMinFDE; pretrained no worse on {}/{} seeds",
                report.pretrained.avg_min_fde.mean,
                report.pretrained.avg_min_fde.std,
                report.scratch.avg_min_fde.mean,
                report.scratch.avg_min_fde.std,
                report.pretrained_wins,
                seeds.len()
            );
        }
    }
    Ok(())
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
