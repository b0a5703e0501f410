//! Browser demo: Langevin and Ozaki chains on a two-mode target, and
//! posterior uncertainty for a clicked noisy point. Every export returns
//! JSON so the page needs no bindings beyond strings and numbers.

use hosm_core::distributions::Distribution;
use hosm_core::samplers::{mode_crossings, run_chains, InitSpec, Method, SamplerConfig};
use hosm_core::uq::denoise_with_scores;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
pub struct ChainView {
    /// Chain 0 positions after burn-in, `[x0, y0, x1, y1, ...]`.
    pub path: Vec<f64>,
    /// Final positions of all chains, flattened the same way.
    pub last: Vec<f64>,
    pub crossings: usize,
    pub min_ess: f64,
    pub clamp_events: usize,
}

#[derive(Serialize)]
pub struct PosteriorView {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    /// Ellipse axes as `[length, angle]`, one standard deviation long.
    pub axes: Vec<[f64; 2]>,
}

fn two_mode(separation: f64) -> Result<Distribution, String> {
    Distribution::two_mode(vec![separation, 0.0]).map_err(|e| e.to_string())
}

pub fn sample(method: &str, step_size: f64, iterations: usize, chains: usize, separation: f64, seed: u64) -> Result<ChainView, String> {
    let method = match method {
        "langevin" => Method::Langevin,
        "ozaki" => Method::OzakiDiag,
        other => return Err(format!("unknown method {other}")),
    };
    let dist = two_mode(separation)?;
    let cfg = SamplerConfig {
        method,
        step_size,
        iterations,
        burn_in: iterations / 10,
        chains,
        seed,
        init: InitSpec::FixedPoint {
            point: vec![separation, 0.0],
        },
        record: true,
    };
    let run = run_chains(&cfg, &dist, Some(&dist)).map_err(|e| e.to_string())?;
    let centers = [vec![separation, 0.0], vec![-separation, 0.0]];
    let crossings = mode_crossings(&run.state, &centers).map_err(|e| e.to_string())?;
    let hist = run.state.history.as_deref().unwrap_or(&[]);
    let path = hist.chunks_exact(2 * chains).flat_map(|t| t[..2].to_vec()).collect();
    Ok(ChainView {
        path,
        last: run.state.positions.as_slice().to_vec(),
        crossings: crossings[0],
        min_ess: run.ess.map_or(0.0, |e| e.min_ess),
        clamp_events: run.state.clamp_events,
    })
}

pub fn posterior(x: f64, y: f64, sigma: f64, separation: f64) -> Result<PosteriorView, String> {
    let noisy = two_mode(separation)?
        .noisy(sigma)
        .map_err(|e| e.to_string())?
        .ok_or("no closed-form noisy scores")?;
    let p = [x, y];
    let sc = noisy.scores(&p).map_err(|e| e.to_string())?;
    let s = denoise_with_scores(&p, &sc.s1, &sc.s2, sigma, 2).map_err(|e| e.to_string())?;
    let axes = s
        .top_eigen
        .iter()
        .map(|e| [e.value.max(0.0).sqrt(), e.vector[1].atan2(e.vector[0])])
        .collect();
    Ok(PosteriorView {
        mean: s.mean,
        cov: s.cov,
        axes,
    })
}

/// Log density of the noisy target on an `n x n` grid over
/// `[-extent, extent]^2`, row-major with `y` increasing downward.
pub fn log_density_grid(separation: f64, sigma: f64, n: usize, extent: f64) -> Result<Vec<f64>, String> {
    let dist = two_mode(separation)?;
    let dist = if sigma > 0.0 {
        dist.noisy(sigma).map_err(|e| e.to_string())?.ok_or("no closed-form noisy density")?
    } else {
        dist
    };
    let step = 2.0 * extent / (n.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let p = [-extent + c as f64 * step, extent - r as f64 * step];
            out.push(dist.log_density(&p).map_err(|e| e.to_string())?);
        }
    }
    Ok(out)
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = sample)]
pub fn sample_js(method: &str, step_size: f64, iterations: usize, chains: usize, separation: f64, seed: u64) -> Result<String, JsError> {
    to_js(sample(method, step_size, iterations, chains, separation, seed))
}

#[wasm_bindgen(js_name = posterior)]
pub fn posterior_js(x: f64, y: f64, sigma: f64, separation: f64) -> Result<String, JsError> {
    to_js(posterior(x, y, sigma, separation))
}

#[wasm_bindgen(js_name = logDensityGrid)]
pub fn log_density_grid_js(separation: f64, sigma: f64, n: usize, extent: f64) -> Result<Vec<f64>, JsError> {
    log_density_grid(separation, sigma, n, extent).map_err(|e| JsError::new(&e))
}
