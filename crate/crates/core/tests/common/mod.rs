#![allow(dead_code)]

use decamp_core::config::ModelConfig;
use decamp_core::nn::Init;
use decamp_core::numerics::gradcheck;
use decamp_core::numerics::{normal, Graph, Mode, ParamId, ParamStore, RngState, Tensor, Var};
use decamp_core::scene::{generate_synthetic_scene, normalize_scene, Horizon, Scene, SceneGenConfig};

pub const STEP: f64 = 1e-5;
pub const MAX_REL_ERR: f64 = 1e-3;

/// A deliberately small model so that finite differences stay cheap.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        width: 8,
        heads: 2,
        ffn_mult: 2,
        dropout: 0.0,
        encoder_depth: 2,
        regressor_depth: 1,
        spatial_depth: 1,
        motion_depth: 1,
        modes: 3,
        generator_hidden: 8,
        horizon: Horizon { history: 10, future: 12 },
        lane_points: 8,
        max_agents: 4,
        max_lanes: 6,
        ..ModelConfig::default()
    }
}

pub fn tiny_gen(cfg: &ModelConfig) -> SceneGenConfig {
    SceneGenConfig {
        min_agents: 2,
        max_agents: cfg.max_agents,
        min_lanes: 4,
        max_lanes: cfg.max_lanes,
        horizon: cfg.horizon,
        lane_points: cfg.lane_points,
        ..SceneGenConfig::default()
    }
}

pub fn tiny_scene(cfg: &ModelConfig, seed: u64) -> Scene {
    let raw = generate_synthetic_scene(&mut RngState::new(seed), &tiny_gen(cfg)).unwrap();
    normalize_scene(&raw).unwrap().0
}

pub fn with_init<T>(store: &mut ParamStore, seed: u64, build: impl FnOnce(&mut Init) -> T) -> T {
    let mut rng = RngState::new(seed);
    let mut init = Init { store, rng: &mut rng };
    build(&mut init)
}

/// Moves every parameter away from its structured initial value (zero
/// biases, unit gains) so that every entry has a generic gradient.
pub fn perturb(store: &mut ParamStore, seed: u64) {
    let mut rng = RngState::new(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        let noise = normal(&shape, 0.2, &mut rng);
        for (v, n) in store.get_mut(id).value.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}

pub fn random_matrix(rows: usize, cols: usize, std: f64, seed: u64) -> Tensor {
    normal(&[rows, cols], std, &mut RngState::new(seed))
}

/// `sum(x ⊙ R)` for a fixed random `R`, so every output entry matters.
pub fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
    let shape = g.value(x).shape().to_vec();
    let r = normal(&shape, 1.0, &mut RngState::new(seed ^ 0xabcd));
    let prod = g.mul_const(x, &r).unwrap();
    g.sum(prod)
}

/// Largest relative error between tape gradients and central differences,
/// over `inputs` random inputs with `samples` parameter entries each.
pub fn grad_check(
    store: &mut ParamStore,
    params: &[ParamId],
    inputs: usize,
    samples: usize,
    seed: u64,
    loss: impl Fn(&mut Graph, usize) -> Var,
) -> f64 {
    let mut rng = RngState::new(seed);
    let mut worst: f64 = 0.0;
    for input in 0..inputs {
        let analytic = {
            let mut g = Graph::new(store, Mode::Eval, RngState::new(0));
            let l = loss(&mut g, input);
            g.backward(l).unwrap().params(store)
        };
        let report = gradcheck::check(store, params, &analytic, samples, STEP, &mut rng, |st| {
            let mut g = Graph::new(st, Mode::Eval, RngState::new(0));
            let l = loss(&mut g, input);
            g.value(l).item()
        });
        assert_eq!(report.probes.len(), samples);
        worst = worst.max(report.max_rel_err());
    }
    worst
}

pub fn all_params(store: &ParamStore) -> Vec<ParamId> {
    store.ids().collect()
}
