//! Training drivers, run directories and the pre-trained vs scratch comparison.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use decamp_core::metrics::MetricsReport;
use decamp_core::model::{transfer_backbone, ForecastModel, PretrainModel, TransferReport};
use decamp_core::numerics::{AdamW, ParamStore, RngState};
use decamp_core::scene::{generate_synthetic_scene, normalize_scene, Frame, Scene, SceneGenConfig};
use decamp_core::train::{
    batch_scenes, check_scene, epoch_order, evaluate, init_rng, shuffle_rng, train_step, Stage, StepStats,
    TrainConfig,
};

use crate::checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
use crate::error::{Error, Result};
use crate::files::{create, write_json, Provenance};

/// Ego-normalises raw scenes and checks every scene against the model configuration.
pub fn prepare_scenes(scenes: &[Scene], cfg: &TrainConfig) -> Result<Vec<Scene>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let s = match s.frame {
                Frame::Raw => normalize_scene(s)?.0,
                Frame::EgoNormalized => s.clone(),
            };
            check_scene(&s, &cfg.model).map_err(|e| Error::Usage(format!("scene {i}: {e}")))?;
            Ok(s)
        })
        .collect()
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepLog<R> {
    pub epoch: usize,
    #[serde(flatten)]
    pub stats: StepStats,
    #[serde(flatten)]
    pub report: R,
}

/// One line of the held-out evaluation log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalLog {
    pub epoch: usize,
    pub step: u64,
    pub avg_min_fde: f64,
    pub avg_min_ade: f64,
    pub actor_mr: f64,
    pub n_scenes: usize,
    pub tau: f64,
}

impl EvalLog {
    fn new(epoch: usize, step: u64, m: &MetricsReport) -> Self {
        Self {
            epoch,
            step,
            avg_min_fde: m.avg_min_fde,
            avg_min_ade: m.avg_min_ade,
            actor_mr: m.actor_mr,
            n_scenes: m.n_scenes,
            tau: m.tau,
        }
    }
}

/// Model, parameters and optimiser state of one training stage.
pub struct Trainer<S: Stage> {
    pub model: S,
    pub store: ParamStore,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    /// Completed optimiser steps.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
}

impl<S: Stage> Trainer<S> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, store) = S::build(&cfg.model, &mut init_rng(cfg.seed))?;
        let opt = AdamW::new(&store);
        Ok(Self { model, store, opt, cfg: cfg.clone(), step: 0, epoch: 0, rng: shuffle_rng(cfg.seed) })
    }

    pub fn checkpoint(&self, provenance: Option<Provenance>) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            stage: S::KIND,
            epoch: self.epoch,
            step: self.step,
            config: self.cfg.clone(),
            rng: self.rng.snapshot(),
            provenance,
            params: Checkpoint::params_from(&self.store),
            optimizer: self.opt.clone(),
        }
    }

    /// Rebuilds the exact training state stored in `ck`.
    pub fn restore(ck: &Checkpoint) -> Result<Self> {
        if ck.stage != S::KIND {
            return Err(Error::Checkpoint {
                path: PathBuf::new(),
                detail: format!("stage {:?} checkpoint, expected {:?}", ck.stage, S::KIND),
            });
        }
        let mut t = Self::new(&ck.config)?;
        ck.load_into(&mut t.store)?;
        if ck.optimizer.m.len() != t.store.len() {
            return Err(Error::Checkpoint { path: PathBuf::new(), detail: "optimiser state does not match model".into() });
        }
        t.opt = ck.optimizer.clone();
        t.step = ck.step;
        t.epoch = ck.epoch;
        t.rng = RngState::restore(ck.rng);
        Ok(t)
    }

    /// One optimiser step on `batch` of prepared scenes.
    pub fn step_batch(&mut self, batch: &[decamp_core::train::PaddedScene], total_steps: u64) -> Result<StepLog<S::Report>> {
        let (report, stats) =
            train_step(&self.model, &mut self.store, &mut self.opt, batch, &self.cfg, self.step, total_steps)?;
        self.step += 1;
        Ok(StepLog { epoch: self.epoch, stats, report })
    }

    /// One pass over `scenes` in shuffled order, stopping early at `total_steps`.
    pub fn run_epoch(
        &mut self,
        scenes: &[Scene],
        total_steps: u64,
        mut on_step: impl FnMut(&StepLog<S::Report>) -> Result<()>,
    ) -> Result<()> {
        let order = epoch_order(&mut self.rng, scenes.len());
        let shuffled: Vec<Scene> = order.into_iter().map(|i| scenes[i].clone()).collect();
        for batch in batch_scenes(&shuffled, self.cfg.batch_size) {
            if self.step >= total_steps {
                break;
            }
            let log = self.step_batch(&batch, total_steps)?;
            on_step(&log)?;
        }
        self.epoch += 1;
        Ok(())
    }

    /// Trains until the configured epochs or step budget are exhausted.
    /// `after_epoch` runs once per completed epoch.
    pub fn fit(
        &mut self,
        scenes: &[Scene],
        run: Option<&mut RunDir>,
        mut after_epoch: impl FnMut(&mut Self, Option<&mut RunDir>) -> Result<()>,
    ) -> Result<()> {
        if scenes.is_empty() {
            return Err(Error::Usage("training set is empty".into()));
        }
        let total = self.cfg.total_steps(scenes.len());
        let mut run = run;
        while self.epoch < self.cfg.epochs && self.step < total {
            let mut lines = Vec::new();
            self.run_epoch(scenes, total, |l| {
                lines.push(serde_json::to_string(l).expect("logs serialise"));
                Ok(())
            })?;
            if let Some(r) = run.as_deref_mut() {
                r.append_train_log(&lines)?;
                r.save_checkpoint(&self.checkpoint(Some(r.provenance.clone())))?;
            }
            after_epoch(self, run.as_deref_mut())?;
        }
        Ok(())
    }
}

pub type Pretrainer = Trainer<PretrainModel>;
pub type Finetuner = Trainer<ForecastModel>;

impl Finetuner {
    /// Fresh fine-tuning state whose backbone is copied from a pre-training checkpoint.
    pub fn from_pretrained(cfg: &TrainConfig, ck: &Checkpoint) -> Result<(Self, TransferReport)> {
        let mut t = Self::new(cfg)?;
        let source = ck.store()?;
        let report = transfer_backbone(&source, &mut t.store)?;
        Ok((t, report))
    }

    pub fn evaluate(&self, scenes: &[Scene]) -> Result<MetricsReport> {
        Ok(evaluate(&self.model, &self.store, scenes, self.cfg.tau)?)
    }
}

/// Output directory of a training run:
///
/// ```text
/// <root>/config.json        resolved configuration and provenance
/// <root>/train_log.jsonl    one line per optimiser step
/// <root>/eval_log.jsonl     held-out metrics per epoch (fine-tuning)
/// <root>/transfer.json      transferred and fresh parameter names (fine-tuning)
/// <root>/checkpoints/epoch_NNNN.json
/// ```
pub struct RunDir {
    pub root: PathBuf,
    pub provenance: Provenance,
    /// Number of most recent checkpoints kept on disk.
    pub keep: usize,
}

impl RunDir {
    pub fn create(root: &Path, provenance: Provenance, keep: usize) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints")).map_err(|e| Error::io(root, e))?;
        let run = Self { root: root.to_path_buf(), provenance, keep: keep.max(1) };
        write_json(&root.join("config.json"), &run.provenance)?;
        Ok(run)
    }

    fn append(&self, name: &str, lines: &[String]) -> Result<()> {
        let path = self.root.join(name);
        let file = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for l in lines {
            writeln!(w, "{l}").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn append_train_log(&self, lines: &[String]) -> Result<()> {
        self.append("train_log.jsonl", lines)
    }

    pub fn append_eval_log(&self, log: &EvalLog) -> Result<()> {
        self.append("eval_log.jsonl", &[serde_json::to_string(log).expect("logs serialise")])
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch_{epoch:04}.json"))
    }

    pub fn save_checkpoint(&self, ck: &Checkpoint) -> Result<PathBuf> {
        let path = self.checkpoint_path(ck.epoch);
        ck.save(&path)?;
        if ck.epoch >= self.keep {
            let old = self.checkpoint_path(ck.epoch - self.keep);
            if old.exists() {
                fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
            }
        }
        Ok(path)
    }

    pub fn write(&self, name: &str, value: &impl Serialize) -> Result<()> {
        write_json(&self.root.join(name), value)
    }
}

/// Pre-trains on prepared `scenes`, optionally resuming from `resume`.
pub fn pretrain(
    scenes: &[Scene],
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
    run: Option<&mut RunDir>,
) -> Result<Pretrainer> {
    let mut t = match resume {
        Some(ck) => Pretrainer::restore(ck)?,
        None => Pretrainer::new(cfg)?,
    };
    t.fit(scenes, run, |_, _| Ok(()))?;
    Ok(t)
}

/// Initialisation of the fine-tuning encoder.
pub enum FinetuneInit<'a> {
    Scratch,
    Pretrained(&'a Checkpoint),
}

/// Fine-tunes on prepared `train` scenes, evaluating on `held_out` after every epoch.
pub fn finetune(
    train: &[Scene],
    held_out: &[Scene],
    cfg: &TrainConfig,
    init: FinetuneInit,
    mut run: Option<&mut RunDir>,
) -> Result<(Finetuner, Option<TransferReport>)> {
    let (mut t, transfer) = match init {
        FinetuneInit::Scratch => (Finetuner::new(cfg)?, None),
        FinetuneInit::Pretrained(ck) => {
            let (t, r) = Finetuner::from_pretrained(cfg, ck)?;
            (t, Some(r))
        }
    };
    if let (Some(r), Some(tr)) = (run.as_deref_mut(), &transfer) {
        r.write("transfer.json", tr)?;
    }
    let tau = cfg.tau;
    t.fit(train, run, |t, run| {
        if let Some(r) = run.filter(|_| !held_out.is_empty()) {
            let m = evaluate(&t.model, &t.store, held_out, tau)?;
            r.append_eval_log(&EvalLog::new(t.epoch, t.step, &m))?;
        }
        Ok(())
    })?;
    Ok((t, transfer))
}

/// Configuration file shared by every command: data generation and both training stages.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: SceneGenConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        Ok(())
    }

    /// Both stages with their seeds replaced by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.pretrain.seed = seed;
        c.finetune.seed = seed;
        c
    }
}

/// `count` synthetic scenes; scene `i` depends only on `seed` and `i`.
pub fn generate_dataset(cfg: &SceneGenConfig, seed: u64, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| Ok(generate_synthetic_scene(&mut RngState::derive(seed, &[i as u64]), cfg)?))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub avg_min_fde: f64,
    pub avg_min_ade: f64,
    pub actor_mr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    fn of(xs: &[f64]) -> Self {
        let n = xs.len().max(1) as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub init: String,
    pub per_seed: Vec<SeedResult>,
    pub avg_min_fde: Spread,
    pub avg_min_ade: Spread,
    pub actor_mr: Spread,
}

impl ArmReport {
    fn new(init: &str, per_seed: Vec<SeedResult>) -> Self {
        let col = |f: fn(&SeedResult) -> f64| Spread::of(&per_seed.iter().map(f).collect::<Vec<_>>());
        Self {
            init: init.into(),
            avg_min_fde: col(|r| r.avg_min_fde),
            avg_min_ade: col(|r| r.avg_min_ade),
            actor_mr: col(|r| r.actor_mr),
            per_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub provenance: Option<Provenance>,
    pub split_sizes: [usize; 3],
    pub pretrained: ArmReport,
    pub scratch: ArmReport,
    /// Seeds on which the pre-trained arm's held-out AvgMinFDE is no worse than scratch.
    pub pretrained_wins: usize,
}

fn fingerprint(s: &Scene) -> u64 {
    let mut h = DefaultHasher::new();
    for a in &s.agents {
        for p in &a.positions {
            p[0].to_bits().hash(&mut h);
            p[1].to_bits().hash(&mut h);
        }
    }
    for l in &s.lanes {
        for p in &l.waypoints {
            p[0].to_bits().hash(&mut h);
            p[1].to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Rejects any scene shared between two splits.
pub fn check_disjoint(splits: &[(&str, &[Scene])]) -> Result<()> {
    let mut seen: Vec<(&str, HashSet<u64>)> = Vec::new();
    for (name, scenes) in splits {
        let prints: HashSet<u64> = scenes.iter().map(fingerprint).collect();
        if let Some((other, _)) = seen.iter().find(|(_, s)| !s.is_disjoint(&prints)) {
            return Err(Error::Usage(format!("splits `{other}` and `{name}` share scenes")));
        }
        seen.push((name, prints));
    }
    Ok(())
}

/// Pre-trained vs scratch fine-tuning on identical seeds; held-out metrics per seed.
/// `progress` receives one line per finished run.
pub fn compare(
    pretrain_set: &[Scene],
    finetune_set: &[Scene],
    eval_set: &[Scene],
    cfg: &ExperimentConfig,
    seeds: &[u64],
    mut progress: impl FnMut(&str),
) -> Result<CompareReport> {
    check_disjoint(&[("pretrain", pretrain_set), ("finetune", finetune_set), ("eval", eval_set)])?;
    if seeds.is_empty() {
        return Err(Error::Usage("at least one seed is required".into()));
    }
    let mut pre = Vec::new();
    let mut scratch = Vec::new();
    for &seed in seeds {
        let pcfg = TrainConfig { seed, ..cfg.pretrain.clone() };
        let fcfg = TrainConfig { seed, ..cfg.finetune.clone() };
        let p = pretrain(pretrain_set, &pcfg, None, None)?;
        let ck = p.checkpoint(None);
        progress(&format!("seed {seed}: pre-trained {} steps", p.step));
        for (arm, init, out) in [
            ("pretrained", FinetuneInit::Pretrained(&ck), &mut pre),
            ("scratch", FinetuneInit::Scratch, &mut scratch),
        ] {
            let (t, _) = finetune(finetune_set, &[], &fcfg, init, None)?;
            let m = t.evaluate(eval_set)?;
            progress(&format!("seed {seed}: {arm} AvgMinFDE {:.4}", m.avg_min_fde));
            out.push(SeedResult { seed, avg_min_fde: m.avg_min_fde, avg_min_ade: m.avg_min_ade, actor_mr: m.actor_mr });
        }
    }
    let wins = pre.iter().zip(&scratch).filter(|(p, s)| p.avg_min_fde <= s.avg_min_fde).count();
    Ok(CompareReport {
        provenance: None,
        split_sizes: [pretrain_set.len(), finetune_set.len(), eval_set.len()],
        pretrained: ArmReport::new("pretrained", pre),
        scratch: ArmReport::new("scratch", scratch),
        pretrained_wins: wins,
    })
}

/// Writes `lines` as a JSON-lines file.
pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    for l in lines {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
