//! WebAssembly bindings for a single-page demo. Each export takes plain
//! numbers or JSON text and returns JSON text; the `*_json` functions hold
//! the logic and are callable natively.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use ddfm_core::ar::{ar_path, build_mask_coupling, verify_ar_generation, ArConditionalVelocity};
use ddfm_core::clustering::{balanced_kmeans, normalize_features};
use ddfm_core::decentral::{route, softmax_route, RouterConfig};
use ddfm_core::dfm::{marginal_velocity_field, Timestep, Vocab};
use ddfm_core::harness::synth::random_target;
use ddfm_core::{Error, Result};

/// Largest state space the page may request.
const MAX_STATES: usize = 4096;

fn to_js(result: Result<String>) -> std::result::Result<String, JsError> {
    result.map_err(|e| JsError::new(&e.to_string()))
}

fn parse<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::ConfigInvalid(format!("{what}: {e}")))
}

/// Samples a random target over sequences of length `len` with `vocab - 1`
/// content tokens, then returns the marginal path `p_t` and the active
/// velocity position at every step of the masked autoregressive flow.
pub fn ar_flow_json(vocab: usize, len: usize, prefix: usize, seed: u64) -> Result<String> {
    let states = vocab.checked_pow(len as u32).unwrap_or(usize::MAX);
    if states > MAX_STATES {
        return Err(Error::ConfigInvalid(format!(
            "{vocab}^{len} states exceeds the demo limit of {MAX_STATES}"
        )));
    }
    let v = Vocab::with_trailing_mask(vocab)?;
    let q = random_target(v, len, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let coupling = build_mask_coupling(&q, v, prefix)?;
    let path = ar_path(v, prefix);
    let cond = ArConditionalVelocity::new(v, prefix);
    let report = verify_ar_generation(&q, v, prefix)?;

    let render = |tokens: &[u32]| -> String {
        tokens
            .iter()
            .map(|&t| {
                if t == v.mask() {
                    "_".to_owned()
                } else {
                    t.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut steps = Vec::new();
    for t in Timestep::all(report.horizon) {
        let (_, p_t) = marginal_velocity_field(&path, &coupling, &cond, t)?;
        let mut support: Vec<(String, f64)> =
            p_t.iter().map(|(z, m)| (render(z.tokens()), m)).collect();
        support.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        steps.push(json!({
            "t": t.t(),
            "active_position": report.sparsity_positions.get(t.t()).copied().flatten(),
            "ce_residual": report.ce_residuals.get(t.t()).copied(),
            "states": support.iter().map(|(s, m)| json!({"seq": s, "mass": m})).collect::<Vec<_>>(),
        }));
    }
    Ok(json!({
        "horizon": report.horizon,
        "max_residual": report.max_residual(),
        "composed_gap": report.composed_gap,
        "steps": steps,
    })
    .to_string())
}

/// Softmax router weights for one feature vector, before and after the
/// top-k filter. `centroids` is a JSON array of rows; they are normalized
/// before use.
pub fn route_json(
    features: &str,
    centroids: &str,
    temperature: f64,
    top_k: usize,
) -> Result<String> {
    let features: Vec<f64> = parse("features", features)?;
    let rows: Vec<Vec<f64>> = parse("centroids", centroids)?;
    let ids = (0..rows.len()).map(|i| i.to_string()).collect();
    let unit = normalize_features(ids, &rows)?;
    let config = RouterConfig {
        temperature,
        top_k,
        centroids: unit.to_rows(),
    };
    let soft = softmax_route(&features, &config)?;
    let filtered = route(&features, &config)?;
    Ok(json!({
        "softmax": soft.as_slice(),
        "top_k": filtered.as_slice(),
        "argmax": soft.argmax(),
    })
    .to_string())
}

/// Balanced spherical k-means over 2D points given as a JSON array of
/// `[x, y]` pairs.
pub fn cluster_json(points: &str, clusters: usize, seed: u64) -> Result<String> {
    let rows: Vec<Vec<f64>> = parse("points", points)?;
    let ids = (0..rows.len()).map(|i| i.to_string()).collect();
    let features = normalize_features(ids, &rows)?;
    let model = balanced_kmeans(&features, clusters, 50, seed)?;
    let mut value: Value = serde_json::to_value(&model)?;
    value["size_spread"] = json!(model.size_spread());
    Ok(value.to_string())
}

#[wasm_bindgen]
pub fn ar_flow(
    vocab: usize,
    len: usize,
    prefix: usize,
    seed: u32,
) -> std::result::Result<String, JsError> {
    to_js(ar_flow_json(vocab, len, prefix, u64::from(seed)))
}

#[wasm_bindgen]
pub fn router_weights(
    features: &str,
    centroids: &str,
    temperature: f64,
    top_k: usize,
) -> std::result::Result<String, JsError> {
    to_js(route_json(features, centroids, temperature, top_k))
}

#[wasm_bindgen]
pub fn cluster_points(
    points: &str,
    clusters: usize,
    seed: u32,
) -> std::result::Result<String, JsError> {
    to_js(cluster_json(points, clusters, u64::from(seed)))
}
