mod common;

use common::*;
use decamp_core::embed::Branch;
use decamp_core::losses::alignment_loss;
use decamp_core::masking::{make_mask_plan, split_tokens, MaskStyle, Steps};
use decamp_core::model::{Anchors, ForecastModel, Generator, PretrainModel};
use decamp_core::nn::{params_with_prefix, Linear};
use decamp_core::numerics::{Graph, Mode, ParamStore, RngState, Tensor};
use decamp_core::train::{pad_scene, padded_plan, pretrain_targets, TrainConfig};

fn eval_graph(store: &ParamStore) -> Graph<'_> {
    Graph::new(store, Mode::Eval, RngState::new(0))
}

fn rows_differ(a: &Tensor, b: &Tensor) -> bool {
    a.data().iter().zip(b.data()).any(|(x, y)| (x - y).abs() > 1e-9)
}

#[test]
fn pretrain_shapes_follow_mask_counts() {
    let cfg = tiny_config();
    let (model, store) = PretrainModel::new(&cfg, &mut RngState::new(1)).unwrap();
    let scene = tiny_scene(&cfg, 2);
    let (n, z) = (scene.num_agents(), scene.num_lanes());
    let plan = make_mask_plan(&scene, cfg.ratios, MaskStyle::Random, &mut RngState::new(3)).unwrap();
    let (vis, msk) = split_tokens(&scene, &plan).unwrap();
    let valid_a = vec![true; n];
    let valid_l = vec![true; z];
    let mut g = eval_graph(&store);
    let tv = model.backbone.embed.assemble(&mut g, &vis, &valid_a, &valid_l, Branch::Visible).unwrap();
    let tm = model.backbone.embed.assemble(&mut g, &msk, &valid_a, &valid_l, Branch::Masked).unwrap();
    assert_eq!(tv.len(), 2 * n + z);
    let e_v = model.backbone.encode(&mut g, &tv).unwrap();
    assert_eq!(g.value(e_v).shape(), &[2 * n + z, cfg.width]);
    let r_m = model.regressor.forward(&mut g, e_v, &tv.valid, &tm.slots).unwrap();
    assert_eq!(g.value(r_m).shape(), &[2 * n + z, cfg.width]);
    let sp = model.spatial.forward(&mut g, r_m, &tm.valid, &Anchors::from_visible(&vis)).unwrap();
    assert_eq!(g.value(sp.history).shape(), &[n, 2 * cfg.masked_history()]);
    assert_eq!(g.value(sp.future).shape(), &[n, 2 * cfg.masked_future()]);
    assert_eq!(g.value(sp.lanes).shape(), &[z, 2 * cfg.masked_lane_points()]);
    let mo = model.motion.forward(&mut g, r_m, &tm.valid, n, z).unwrap();
    assert_eq!(g.value(mo.history).shape(), &[n, cfg.masked_history()]);
    assert_eq!(g.value(mo.future).shape(), &[n, cfg.masked_future()]);
    for v in [sp.history, sp.future, sp.lanes, mo.history, mo.future] {
        assert!(g.value(v).data().iter().all(|x| x.is_finite()));
    }
}

#[test]
fn default_head_widths() {
    let cfg = decamp_core::config::ModelConfig::default();
    assert_eq!(2 * cfg.masked_history(), 30);
    assert_eq!(cfg.masked_future(), 42);
    assert_eq!(2 * cfg.masked_lane_points(), 20);
}

#[test]
fn both_branches_share_one_encoder() {
    let cfg = tiny_config();
    let (model, store) = PretrainModel::new(&cfg, &mut RngState::new(4)).unwrap();
    let (fmodel, fstore) = ForecastModel::new(&cfg, &mut RngState::new(4)).unwrap();
    let names = |s: &ParamStore| s.names().filter(|n| n.starts_with("encoder.")).map(String::from).collect::<Vec<_>>();
    assert_eq!(names(&store), names(&fstore));
    assert_eq!(model.backbone.encoder.blocks.len(), cfg.encoder_depth);
    assert_eq!(fmodel.backbone.encoder.blocks.len(), cfg.encoder_depth);

    let scene = tiny_scene(&cfg, 5);
    let plan = make_mask_plan(&scene, cfg.ratios, MaskStyle::Random, &mut RngState::new(6)).unwrap();
    let (vis, msk) = split_tokens(&scene, &plan).unwrap();
    let va = vec![true; scene.num_agents()];
    let vl = vec![true; scene.num_lanes()];
    let mut g = eval_graph(&store);
    let tv = model.backbone.embed.assemble(&mut g, &vis, &va, &vl, Branch::Visible).unwrap();
    let tm = model.backbone.embed.assemble(&mut g, &msk, &va, &vl, Branch::Masked).unwrap();
    model.backbone.encode(&mut g, &tv).unwrap();
    let bound: Vec<_> = params_with_prefix(&store, "encoder.").iter().map(|&id| g.param_node(id).unwrap()).collect();
    model.backbone.encode(&mut g, &tm).unwrap();
    let again: Vec<_> = params_with_prefix(&store, "encoder.").iter().map(|&id| g.param_node(id).unwrap()).collect();
    assert_eq!(bound, again);

    let mut g = eval_graph(&store);
    let a = model.backbone.embed.assemble(&mut g, &vis, &va, &vl, Branch::Visible).unwrap();
    let b = model.backbone.embed.assemble(&mut g, &vis, &va, &vl, Branch::Masked).unwrap();
    let (ea, eb) = (model.backbone.encode(&mut g, &a).unwrap(), model.backbone.encode(&mut g, &b).unwrap());
    assert_eq!(g.value(ea), g.value(eb));
}

#[test]
fn alignment_gradient_reaches_queries_and_encoder() {
    let cfg = tiny_config();
    let (model, store) = PretrainModel::new(&cfg, &mut RngState::new(7)).unwrap();
    let scene = tiny_scene(&cfg, 8);
    let plan = make_mask_plan(&scene, cfg.ratios, MaskStyle::Random, &mut RngState::new(9)).unwrap();
    let (vis, msk) = split_tokens(&scene, &plan).unwrap();
    let va = vec![true; scene.num_agents()];
    let vl = vec![true; scene.num_lanes()];
    let mut g = eval_graph(&store);
    let tv = model.backbone.embed.assemble(&mut g, &vis, &va, &vl, Branch::Visible).unwrap();
    let tm = model.backbone.embed.assemble(&mut g, &msk, &va, &vl, Branch::Masked).unwrap();
    let e_v = model.backbone.encode(&mut g, &tv).unwrap();
    let e_m = model.backbone.encode(&mut g, &tm).unwrap();
    let e_m = g.detach(e_m);
    let r_m = model.regressor.forward(&mut g, e_v, &tv.valid, &tm.slots).unwrap();
    let rows: Vec<usize> = (0..tm.valid.len()).filter(|&i| tm.valid[i]).collect();
    let loss = alignment_loss(&mut g, r_m, e_m, &rows).unwrap();
    let grads = g.backward(loss).unwrap().params(&store);
    let nonzero = |id| grads.get(id).is_some_and(|t| t.data().iter().any(|v| *v != 0.0));
    assert!(nonzero(model.regressor.queries));
    for id in params_with_prefix(&store, "encoder.layers.") {
        assert!(nonzero(id), "encoder parameter {} got no gradient", store.get(id).name);
    }
}

#[test]
fn zero_context_gives_finite_regression() {
    let cfg = tiny_config();
    let (model, store) = PretrainModel::new(&cfg, &mut RngState::new(10)).unwrap();
    let mut g = eval_graph(&store);
    let ctx = g.constant(Tensor::zeros(&[7, cfg.width]));
    let r = model.regressor.forward(&mut g, ctx, &[true; 7], &[0, 1, 4, 5, 8, 9]).unwrap();
    assert_eq!(g.value(r).shape(), &[6, cfg.width]);
    assert!(g.value(r).data().iter().all(|v| v.is_finite()));
    let beyond = cfg.slot_count();
    assert!(model.regressor.forward(&mut g, ctx, &[true; 7], &[beyond]).is_err());
}

#[test]
fn zero_input_head_returns_bias() {
    let mut store = ParamStore::new();
    let lin = with_init(&mut store, 11, |i| Linear::new(i, "head", 8, 6));
    perturb(&mut store, 12);
    let mut g = eval_graph(&store);
    let x = g.constant(Tensor::zeros(&[3, 8]));
    let y = lin.forward(&mut g, x).unwrap();
    let bias = store.value(lin.b).data().to_vec();
    for r in 0..3 {
        assert_eq!(g.value(y).row_slice(r), &bias[..]);
    }
}

#[test]
fn spatial_head_with_zero_weights_returns_scaled_bias_plus_anchor() {
    let cfg = tiny_config();
    let (model, mut store) = PretrainModel::new(&cfg, &mut RngState::new(13)).unwrap();
    let head = &model.spatial.history_head;
    let w = store.value(head.w).shape().to_vec();
    store.set_value(&store.get(head.w).name.clone(), Tensor::zeros(&w)).unwrap();
    let (n, z) = (2, 1);
    let anchors = Anchors { history: vec![[1.0, -2.0], [3.0, 0.5]], future: vec![[0.0; 2]; n], lanes: vec![[0.0; 2]; z] };
    let mut g = eval_graph(&store);
    let r_m = g.constant(random_matrix(2 * n + z, cfg.width, 1.0, 14));
    let out = model.spatial.forward(&mut g, r_m, &[true; 5], &anchors).unwrap();
    let bias = store.value(head.b).data();
    for a in 0..n {
        let row = g.value(out.history).row_slice(a);
        for (c, v) in row.iter().enumerate() {
            assert_eq!(*v, bias[c] * cfg.coord_scale + anchors.history[a][c % 2]);
        }
    }
}

fn generator_setup(seed: u64) -> (Generator, ParamStore, Tensor, Vec<[f64; 2]>) {
    let cfg = tiny_config();
    let mut store = ParamStore::new();
    let gen = with_init(&mut store, seed, |i| Generator::new(i, &cfg));
    perturb(&mut store, seed + 1);
    let n = 3;
    let z_e = random_matrix(n + 2, cfg.width, 1.0, seed + 2);
    let last = vec![[1.0, 2.0], [-3.0, 0.5], [7.0, -1.0]];
    (gen, store, z_e, last)
}

#[test]
fn generator_shapes() {
    let (gen, store, z_e, last) = generator_setup(20);
    let mut g = eval_graph(&store);
    let z = g.constant(z_e);
    let w = gen.forward(&mut g, z, &last, &[0, 2]).unwrap();
    let cfg = tiny_config();
    assert_eq!(g.value(w.trajectories).shape(), &[cfg.modes * 3, 2 * cfg.horizon.future]);
    assert_eq!(g.value(w.logits).shape(), &[1, cfg.modes]);
    assert!(gen.forward(&mut g, z, &last, &[]).is_err());
    assert!(gen.forward(&mut g, z, &last, &[3]).is_err());
}

#[test]
fn zero_output_layer_predicts_last_position() {
    let (gen, mut store, z_e, last) = generator_setup(21);
    for id in [gen.out.w, gen.out.b] {
        let shape = store.value(id).shape().to_vec();
        store.set_value(&store.get(id).name.clone(), Tensor::zeros(&shape)).unwrap();
    }
    let mut g = eval_graph(&store);
    let z = g.constant(z_e);
    let w = gen.forward(&mut g, z, &last, &[0]).unwrap();
    let t = g.value(w.trajectories);
    for r in 0..t.rows() {
        for p in t.row_slice(r).chunks_exact(2) {
            assert_eq!(p, &last[r % 3][..]);
        }
    }
}

#[test]
fn identical_mode_rows_give_identical_worlds() {
    let (gen, mut store, z_e, last) = generator_setup(22);
    let mut table = store.value(gen.modes).clone();
    let d = table.cols();
    let first = table.row_slice(0).to_vec();
    table.data_mut()[d..2 * d].copy_from_slice(&first);
    store.set_value(&store.get(gen.modes).name.clone(), table).unwrap();
    let mut g = eval_graph(&store);
    let z = g.constant(z_e);
    let w = gen.forward(&mut g, z, &last, &[0, 1]).unwrap();
    let t = g.value(w.trajectories);
    for a in 0..3 {
        assert_eq!(t.row_slice(a), t.row_slice(3 + a));
    }
    assert_eq!(g.value(w.logits).data()[0], g.value(w.logits).data()[1]);
    assert!(rows_differ(&Tensor::matrix(1, t.cols(), t.row_slice(0).to_vec()).unwrap(), &Tensor::matrix(1, t.cols(), t.row_slice(6).to_vec()).unwrap()));
}

#[test]
fn generator_is_translation_consistent() {
    let (gen, store, z_e, last) = generator_setup(23);
    let shift = [12.5, -4.25];
    let moved: Vec<[f64; 2]> = last.iter().map(|p| [p[0] + shift[0], p[1] + shift[1]]).collect();
    let mut g = eval_graph(&store);
    let z = g.constant(z_e);
    let a = gen.forward(&mut g, z, &last, &[1]).unwrap();
    let b = gen.forward(&mut g, z, &moved, &[1]).unwrap();
    let (ta, tb) = (g.value(a.trajectories), g.value(b.trajectories));
    for (i, (x, y)) in ta.data().iter().zip(tb.data()).enumerate() {
        assert!((y - x - shift[i % 2]).abs() <= 1e-9);
    }
    assert_eq!(g.value(a.logits), g.value(b.logits));
}

fn lane(points: &[[f64; 2]]) -> Steps {
    points.iter().copied().enumerate().collect()
}

#[test]
fn lane_embedding_ignores_point_order_and_duplicates() {
    let cfg = tiny_config();
    let (model, store) = PretrainModel::new(&cfg, &mut RngState::new(30)).unwrap();
    let embed = &model.backbone.embed;
    let mut rng = RngState::new(31);
    let pts: Vec<[f64; 2]> = (0..cfg.lane_points).map(|_| [rng.uniform(-20.0, 20.0), rng.uniform(-20.0, 20.0)]).collect();
    let steps = lane(&pts);
    let mut shuffled = steps.clone();
    rng.shuffle(&mut shuffled);
    let mut dup = steps.clone();
    dup.push(steps[3]);
    dup.push(steps[0]);
    let mut g = eval_graph(&store);
    let a = embed.embed_lane(&mut g, &steps).unwrap();
    let b = embed.embed_lane(&mut g, &shuffled).unwrap();
    let c = embed.embed_lane(&mut g, &dup).unwrap();
    assert_eq!(g.value(a), g.value(b));
    assert_eq!(g.value(a), g.value(c));
}

#[test]
fn trajectory_embedding_depends_on_order_and_position() {
    use decamp_core::embed::Segment;
    let cfg = tiny_config();
    let (model, store) = PretrainModel::new(&cfg, &mut RngState::new(32)).unwrap();
    let embed = &model.backbone.embed;
    let mut rng = RngState::new(33);
    let pts: Vec<[f64; 2]> = (0..cfg.horizon.history).map(|_| [rng.uniform(-20.0, 20.0), rng.uniform(-20.0, 20.0)]).collect();
    let steps = lane(&pts);
    let mut rev = pts.clone();
    rev.reverse();
    let reversed = lane(&rev);
    let moved = lane(&pts.iter().map(|p| [p[0] + 10.0, p[1] + 10.0]).collect::<Vec<_>>());
    let mut g = eval_graph(&store);
    let a = embed.embed_trajectory(&mut g, Segment { steps: &steps, time_offset: 0 }).unwrap();
    let same = embed.embed_trajectory(&mut g, Segment { steps: &steps, time_offset: 0 }).unwrap();
    let b = embed.embed_trajectory(&mut g, Segment { steps: &reversed, time_offset: 0 }).unwrap();
    let c = embed.embed_trajectory(&mut g, Segment { steps: &moved, time_offset: 0 }).unwrap();
    assert_eq!(g.value(a), g.value(same));
    assert!(rows_differ(g.value(a), g.value(b)));
    assert!(rows_differ(g.value(a), g.value(c)));
    assert_eq!(g.value(a).shape(), &[1, cfg.width]);
    let few = embed.embed_trajectory(&mut g, Segment { steps: &steps[..3], time_offset: 0 }).unwrap();
    assert_eq!(g.value(few).shape(), &[1, cfg.width]);
    assert!(embed.embed_trajectory(&mut g, Segment { steps: &[], time_offset: 0 }).is_err());
}

#[test]
fn zero_positional_table_leaves_raw_embeddings() {
    let cfg = tiny_config();
    let (model, mut store) = PretrainModel::new(&cfg, &mut RngState::new(34)).unwrap();
    let pe = model.backbone.embed.positional;
    let shape = store.value(pe).shape().to_vec();
    store.set_value("pe", Tensor::zeros(&shape)).unwrap();
    let scene = tiny_scene(&cfg, 35);
    let plan = make_mask_plan(&scene, cfg.ratios, MaskStyle::Random, &mut RngState::new(36)).unwrap();
    let (vis, _) = split_tokens(&scene, &plan).unwrap();
    let mut g = eval_graph(&store);
    let tv = model.backbone.embed.assemble(&mut g, &vis, &vec![true; scene.num_agents()], &vec![true; scene.num_lanes()], Branch::Visible).unwrap();
    let n = scene.num_agents();
    let raw = model.backbone.embed.embed_lane(&mut g, &vis.lanes[0]).unwrap();
    assert_eq!(g.value(tv.tokens).row_slice(2 * n), g.value(raw).row_slice(0));
}

#[test]
fn decode_targets_align_with_masked_slots() {
    let cfg = tiny_config();
    let (model, store) = PretrainModel::new(&cfg, &mut RngState::new(40)).unwrap();
    let tc = TrainConfig { model: cfg.clone(), ..TrainConfig::default() };
    let mut rng = RngState::new(41);
    for seed in 0..20 {
        let scene = tiny_scene(&cfg, 200 + seed);
        let padded = pad_scene(&scene, cfg.max_agents, cfg.max_lanes);
        let plan = padded_plan(&padded, &tc, &mut rng).unwrap();
        let (_, msk) = split_tokens(&padded.scene, &plan).unwrap();
        let (spatial, motion) = pretrain_targets(&padded.scene, &plan, &cfg).unwrap();
        let mut g = eval_graph(&store);
        let tm = model.backbone.embed.assemble(&mut g, &msk, &padded.agent_valid, &padded.lane_valid, Branch::Masked).unwrap();
        let n = padded.scene.num_agents();
        let th = cfg.horizon.history;
        for a in 0..n {
            assert_eq!(tm.slots[a], model.backbone.embed.history_slot(a));
            assert_eq!(tm.slots[n + a], model.backbone.embed.future_slot(a));
            let track = &padded.scene.agents[a].positions;
            let want: Vec<f64> = plan.history[a].iter().enumerate().filter(|(_, m)| **m).flat_map(|(t, _)| track[t]).collect();
            assert_eq!(spatial.history.row_slice(a), &want[..]);
            let want: Vec<f64> = plan.future[a].iter().enumerate().filter(|(_, m)| **m).flat_map(|(t, _)| track[th + t]).collect();
            assert_eq!(spatial.future.row_slice(a), &want[..]);
            let speeds = decamp_core::scene::speeds(track);
            let want: Vec<f64> = plan.future[a].iter().enumerate().filter(|(_, m)| **m).map(|(t, _)| speeds[th + t]).collect();
            assert_eq!(motion.future.row_slice(a), &want[..]);
        }
        for (z, l) in padded.scene.lanes.iter().enumerate() {
            assert_eq!(tm.slots[2 * n + z], model.backbone.embed.lane_slot(z));
            let want: Vec<f64> = plan.lanes[z].iter().enumerate().filter(|(_, m)| **m).flat_map(|(w, _)| l.waypoints[w]).collect();
            assert_eq!(spatial.lanes.row_slice(z), &want[..]);
        }
    }
}
