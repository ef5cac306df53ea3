mod common;

use decamp::checkpoint::Checkpoint;
use decamp::files::Provenance;
use decamp::pipeline::{check_disjoint, compare, finetune, pretrain, FinetuneInit, Finetuner, Pretrainer, RunDir};
use decamp::Error;
use decamp_core::model::TRANSFER_PREFIXES;
use decamp_core::numerics::ParamStore;
use decamp_core::train::{batch_scenes, epoch_order, Stage};

fn assert_stores_equal(a: &ParamStore, b: &ParamStore) {
    assert_eq!(a.len(), b.len());
    for (id, p) in a.iter() {
        let q = b.value(id);
        assert!(p.value.data().iter().zip(q.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", p.name);
    }
}

fn next_step<S: Stage>(t: &mut decamp::pipeline::Trainer<S>, scenes: &[decamp_core::scene::Scene]) -> f64
where
    S::Report: serde::Serialize,
{
    let order = epoch_order(&mut t.rng, scenes.len());
    let shuffled: Vec<_> = order.into_iter().map(|i| scenes[i].clone()).collect();
    let batch = &batch_scenes(&shuffled, t.cfg.batch_size)[0];
    let log = t.step_batch(batch, 100).unwrap();
    serde_json::to_value(log).unwrap()["total"].as_f64().unwrap()
}

#[test]
fn checkpoint_round_trip_continues_bit_identically() {
    let cfg = common::small_experiment();
    let mut pcfg = cfg.pretrain.clone();
    pcfg.model.dropout = 0.1;
    let scenes = common::dataset(&cfg, 1, 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");

    let mut a = pretrain(&scenes, &pcfg, None, None).unwrap();
    a.checkpoint(None).save(&path).unwrap();
    let mut b = Pretrainer::restore(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_stores_equal(&a.store, &b.store);
    assert_eq!((a.step, a.epoch), (b.step, b.epoch));
    let (la, lb) = (next_step(&mut a, &scenes), next_step(&mut b, &scenes));
    assert_eq!(la.to_bits(), lb.to_bits());
    assert_stores_equal(&a.store, &b.store);

    let (mut f, _) = finetune(&scenes, &[], &cfg.finetune, FinetuneInit::Scratch, None).unwrap();
    f.checkpoint(None).save(&path).unwrap();
    let mut g = Finetuner::restore(&Checkpoint::load(&path).unwrap()).unwrap();
    let (lf, lg) = (next_step(&mut f, &scenes), next_step(&mut g, &scenes));
    assert_eq!(lf.to_bits(), lg.to_bits());
    assert_stores_equal(&f.store, &g.store);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = common::small_experiment();
    let scenes = common::dataset(&cfg, 2, 6);
    let full = pretrain(&scenes, &cfg.pretrain, None, None).unwrap();
    let one = decamp_core::train::TrainConfig { epochs: 1, ..cfg.pretrain.clone() };
    let half = pretrain(&scenes, &one, None, None).unwrap();
    let mut ck = half.checkpoint(None);
    ck.config.epochs = 2;
    let resumed = pretrain(&scenes, &ck.config.clone(), Some(&ck), None).unwrap();
    assert_eq!(resumed.step, full.step);
    assert_stores_equal(&full.store, &resumed.store);
}

#[test]
fn transfer_copies_exactly_the_backbone() {
    let cfg = common::small_experiment();
    let scenes = common::dataset(&cfg, 3, 4);
    let p = pretrain(&scenes, &cfg.pretrain, None, None).unwrap();
    let ck = p.checkpoint(None);
    let (f, report) = Finetuner::from_pretrained(&cfg.finetune, &ck).unwrap();
    let is_backbone = |n: &str| TRANSFER_PREFIXES.iter().any(|p| n.starts_with(p));
    let expected: Vec<String> = f.store.names().filter(|n| is_backbone(n)).map(String::from).collect();
    assert_eq!(report.transferred, expected);
    assert!(!report.fresh.is_empty() && report.fresh.iter().all(|n| n.starts_with("generator.")));
    for name in &report.transferred {
        let (src, dst) = (p.store.find(name).unwrap(), f.store.find(name).unwrap());
        assert_eq!(p.store.value(src), f.store.value(dst), "{name}");
    }
    let scratch = Finetuner::new(&cfg.finetune).unwrap();
    for name in &report.fresh {
        let id = f.store.find(name).unwrap();
        assert_eq!(f.store.value(id), scratch.store.value(id), "{name}");
    }
}

#[test]
fn transfer_reports_mismatched_and_missing_parameters() {
    let cfg = common::small_experiment();
    let p = Pretrainer::new(&cfg.pretrain).unwrap();
    let mut wide = cfg.finetune.clone();
    wide.model.width = 12;
    wide.model.generator_hidden = 12;
    match Finetuner::from_pretrained(&wide, &p.checkpoint(None)) {
        Err(e) => assert!(e.to_string().contains('`'), "{e}"),
        Ok(_) => panic!("width mismatch accepted"),
    }
    let mut ck = p.checkpoint(None);
    ck.params.retain(|t| t.name != "pe");
    match Finetuner::from_pretrained(&cfg.finetune, &ck) {
        Err(e) => assert!(e.to_string().contains("pe"), "{e}"),
        Ok(_) => panic!("missing parameter accepted"),
    }
}

#[test]
fn zero_epoch_finetune_evaluates_transferred_weights() {
    let cfg = common::small_experiment();
    let scenes = common::dataset(&cfg, 4, 4);
    let held_out = common::dataset(&cfg, 5, 3);
    let p = pretrain(&scenes, &cfg.pretrain, None, None).unwrap();
    let ck = p.checkpoint(None);
    let zero = decamp_core::train::TrainConfig { epochs: 0, ..cfg.finetune.clone() };
    let (t, report) = finetune(&scenes, &held_out, &zero, FinetuneInit::Pretrained(&ck), None).unwrap();
    assert_eq!(t.step, 0);
    assert!(report.is_some());
    let m = t.evaluate(&held_out).unwrap();
    assert_eq!(m.n_scenes, 3);
    assert!(m.avg_min_fde.is_finite() && m.avg_min_ade.is_finite());
}

#[test]
fn run_directory_layout_and_rotation() {
    let cfg = common::small_experiment();
    let scenes = common::dataset(&cfg, 6, 4);
    let held_out = common::dataset(&cfg, 7, 2);
    let dir = tempfile::tempdir().unwrap();
    let tc = decamp_core::train::TrainConfig { epochs: 3, ..cfg.finetune.clone() };
    let p = pretrain(&scenes, &cfg.pretrain, None, None).unwrap();
    let ck = p.checkpoint(None);
    let mut run = RunDir::create(dir.path(), Provenance::new("finetune", tc.seed, &tc), 2).unwrap();
    finetune(&scenes, &held_out, &tc, FinetuneInit::Pretrained(&ck), Some(&mut run)).unwrap();
    let root = dir.path();
    for f in ["config.json", "train_log.jsonl", "eval_log.jsonl", "transfer.json"] {
        assert!(root.join(f).is_file(), "{f}");
    }
    let ckpts: Vec<String> = std::fs::read_dir(root.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    let mut ckpts = ckpts;
    ckpts.sort();
    assert_eq!(ckpts, ["epoch_0002.json", "epoch_0003.json"]);
    let steps = tc.total_steps(scenes.len());
    let train_log = std::fs::read_to_string(root.join("train_log.jsonl")).unwrap();
    assert_eq!(train_log.lines().count() as u64, steps);
    for l in train_log.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        for k in ["epoch", "step", "lr", "grad_norm", "clipped", "k_star", "l_huber", "l_ce", "total"] {
            assert!(v.get(k).is_some(), "{k} missing from {l}");
        }
    }
    assert_eq!(std::fs::read_to_string(root.join("eval_log.jsonl")).unwrap().lines().count(), 3);
    let latest = Checkpoint::load(root).unwrap();
    assert_eq!(latest.epoch, 3);
}

#[test]
fn restoring_the_wrong_stage_fails() {
    let cfg = common::small_experiment();
    let p = Pretrainer::new(&cfg.pretrain).unwrap();
    assert!(matches!(Finetuner::restore(&p.checkpoint(None)), Err(Error::Checkpoint { .. })));
}

#[test]
fn compare_rejects_overlapping_splits_and_reports_every_seed() {
    let cfg = common::small_experiment();
    let a = common::dataset(&cfg, 8, 3);
    let b = common::dataset(&cfg, 9, 3);
    let c = common::dataset(&cfg, 10, 2);
    assert!(check_disjoint(&[("a", &a), ("b", &a[1..])]).is_err());
    assert!(compare(&a, &a, &c, &cfg, &[0], |_| {}).is_err());
    let mut exp = cfg.clone();
    exp.pretrain.epochs = 1;
    exp.finetune.epochs = 1;
    let r = compare(&a, &b, &c, &exp, &[0, 1], |_| {}).unwrap();
    assert_eq!(r.pretrained.per_seed.len(), 2);
    assert_eq!(r.scratch.per_seed.len(), 2);
    assert_eq!(r.split_sizes, [3, 3, 2]);
    assert!(r.pretrained_wins <= 2);
}
