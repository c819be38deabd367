//! WebAssembly bindings for the browser demo: a Slide search with and
//! without the uncertainty bonus, the Mountain Car count-uncertainty field,
//! and temperature-based action sampling.
//!
//! Each operation is a plain Rust function with a thin `wasm_bindgen` wrapper,
//! so the logic is tested natively.

use op2e::envs::{EnvModel, EnvSpec, MountainCar, OracleModel, RewardScheme, Slide};
use op2e::mcts::{action_probabilities, run_search, RuleKind, SearchConfig, SelectionRule};
use op2e::uncertainty::{count_value_uncertainty, CountUncertainty, VisitCounter};
use op2e::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Slide search from `position`, where every position up to `explored_up_to`
/// has been visited `visits` times before.
#[allow(clippy::too_many_arguments)]
pub fn slide_search(
    length: usize,
    position: usize,
    explored_up_to: usize,
    visits: u32,
    explore: bool,
    budget: usize,
    c_sigma: f64,
    seed: u64,
) -> Result<serde_json::Value> {
    if length < 2 || position >= length {
        return Err(op2e::Error::Domain(format!("position {position} outside a slide of length {length}")));
    }
    let spec = EnvSpec::Slide(Slide::new(length));
    let env = spec.model();
    let mut counter = VisitCounter::slide(length, 1.0, 0.1);
    for p in 0..=explored_up_to.min(length - 1) {
        for _ in 0..visits {
            counter.record_visit(&[p as f64]);
        }
    }
    let gamma = 0.95;
    let estimator = CountUncertainty {
        counter: &counter,
        env,
        horizon: 3,
        gamma,
    };
    let model = OracleModel { env, elapsed: 0 };
    let kind = if explore { RuleKind::UctExplore } else { RuleKind::Uct };
    let rule = SelectionRule {
        c_sigma,
        ..SelectionRule::new(kind)
    };
    let cfg = SearchConfig {
        rule,
        budget,
        gamma,
        root_noise: None,
    };
    let state = [position as f64];
    let obs = env.observe(&state);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tree, result) = run_search(&model, &estimator, &obs, Some(&state), &cfg, &mut rng)?;
    let mut position_visits = Vec::new();
    for node in &tree.nodes {
        if let Some(pos) = node.env_state.as_ref().and_then(|s| s.first()) {
            let i = *pos as usize;
            if position_visits.len() < length {
                position_visits.resize(length, 0u32);
            }
            position_visits[i] += node.visit_count;
        }
    }
    Ok(serde_json::json!({
        "visit_counts": result.visit_counts,
        "q": result.per_action_q,
        "variance": result.per_action_variance,
        "root_value": result.root_value,
        "position_visits": position_visits,
        "nodes": tree.nodes.len(),
    }))
}

/// Count-based value uncertainty over the Mountain Car grid after
/// `episodes` uniformly random episodes. Returns `bins·bins` visit counts
/// followed by `bins·bins` uncertainties, position-major.
pub fn mountain_car_field(episodes: usize, seed: u64, action: usize, horizon: usize) -> Result<Vec<f64>> {
    let car = MountainCar::new(RewardScheme::StandardMinusOne);
    let mut counter = VisitCounter::mountain_car(1.0, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..episodes {
        let mut x = rng.random_range(-0.6..-0.4);
        let mut v = 0.0;
        counter.record_visit(&[x, v]);
        for _ in 0..car.timeout {
            (x, v) = car.mountain_car_step(x, v, rng.random_range(0..3))?;
            counter.record_visit(&[x, v]);
            if car.is_terminal(&[x, v]) {
                break;
            }
        }
    }
    let (px, vx) = (counter.axes[0], counter.axes[1]);
    let center = |a: &op2e::uncertainty::GridAxis, i: usize| a.min + (i as f64 + 0.5) * (a.max - a.min) / a.bins as f64;
    let mut counts = Vec::with_capacity(px.bins * vx.bins);
    let mut field = Vec::with_capacity(px.bins * vx.bins);
    for i in 0..px.bins {
        for j in 0..vx.bins {
            let s = [center(&px, i), center(&vx, j)];
            counts.push(counter.count(&s) as f64);
            field.push(count_value_uncertainty(&counter, &car, &s, action, horizon, 0.997)?);
        }
    }
    counts.extend(field);
    Ok(counts)
}

/// Probability of each action when sampling visit counts at temperature `t`.
pub fn temperature_distribution(counts: &[u32], t: f64) -> Vec<f64> {
    action_probabilities(counts, t)
}

fn js_err(e: op2e::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = slideSearch)]
#[allow(clippy::too_many_arguments)]
pub fn slide_search_js(
    length: usize,
    position: usize,
    explored_up_to: usize,
    visits: u32,
    explore: bool,
    budget: usize,
    c_sigma: f64,
    seed: u32,
) -> std::result::Result<String, JsError> {
    slide_search(length, position, explored_up_to, visits, explore, budget, c_sigma, seed as u64)
        .map(|v| v.to_string())
        .map_err(js_err)
}

#[wasm_bindgen(js_name = mountainCarField)]
pub fn mountain_car_field_js(episodes: usize, seed: u32, action: usize, horizon: usize) -> std::result::Result<Vec<f64>, JsError> {
    mountain_car_field(episodes, seed as u64, action, horizon).map_err(js_err)
}

#[wasm_bindgen(js_name = temperatureDistribution)]
pub fn temperature_distribution_js(counts: Vec<u32>, t: f64) -> Vec<f64> {
    temperature_distribution(&counts, t)
}
