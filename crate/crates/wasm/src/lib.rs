//! Browser bindings. Each call re-simulates from its seed, so the page
//! keeps no state on the Rust side. Results are JSON strings.

use pstomo::dde::{estimate_distributions, HankelConfig, HankelPlan};
use pstomo::experiment::distance_histograms;
use pstomo::features::{analytic_features, estimate_features, integer_axis, EstimateOptions};
use pstomo::geometry::{generate_model, PointSourceModel};
use pstomo::projector::{LineSource, SimulatedLines};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Demo inputs shared by every operation.
#[derive(Debug, Clone, Copy)]
pub struct Setup {
    pub k: usize,
    pub half_bins: usize,
    pub snr: f64,
    pub lines: usize,
    pub seed: u32,
}

impl Setup {
    fn build(&self) -> pstomo::Result<(PointSourceModel, SimulatedLines)> {
        if self.lines > 50_000 || self.half_bins > 2_000 {
            return Err(pstomo::Error::InvalidArgument(
                "keep L <= 50000 and M <= 2000 in the browser".into(),
            ));
        }
        let model = generate_model(self.k, self.seed as u64, 1.0)?;
        let data = SimulatedLines::new(&model, self.lines, self.half_bins, self.snr, self.seed as u64 + 1)?;
        Ok((model, data))
    }
}

/// Model points and the first `rows` projection lines.
pub fn sinogram(setup: Setup, rows: usize) -> pstomo::Result<Value> {
    let (model, data) = setup.build()?;
    let shown = rows.min(data.line_count());
    let lines: Vec<Vec<f64>> = (0..shown).map(|i| data.line(i)).collect();
    Ok(json!({
        "points": model.points(),
        "radius_bound": model.radius_bound(),
        "bins": data.bins(),
        "noise_variance": data.noise_variance(),
        "angles": &data.angles()[..shown],
        "lines": lines,
    }))
}

/// Estimated and analytic features on `0..=nu_max`.
pub fn features(setup: Setup, nu_max: usize) -> pstomo::Result<Value> {
    let (model, data) = setup.build()?;
    let freq = integer_axis(0, nu_max.min(setup.half_bins));
    let est = estimate_features(&data, setup.k, &freq, EstimateOptions::default())?;
    let truth = analytic_features(&model, &freq);
    Ok(json!({
        "nu": freq,
        "mu": est.mu_real(),
        "c": est.c2,
        "mu_true": truth.mu_real(),
        "c_true": truth.c2,
    }))
}

/// Estimated radial and pairwise distance distributions with the truth.
pub fn distributions(setup: Setup) -> pstomo::Result<Value> {
    let (model, data) = setup.build()?;
    let r = model.radius_bound();
    let config = HankelConfig {
        quad_points: 128,
        axis_points: 128,
        ..HankelConfig::for_half_bins(setup.half_bins, r)
    };
    let plan = HankelPlan::new(config, r)?;
    let est = estimate_distributions(&data, setup.k, &plan, EstimateOptions::default())?;
    let (true_pairs, true_radial) = distance_histograms(model.points(), plan.axis())?;
    let mass = |d: Option<&pstomo::geometry::DistanceDistribution>| d.map(|d| d.mass().to_vec());
    Ok(json!({
        "u": plan.axis().centers(),
        "p_mu": est.radial.mass(),
        "p_c": mass(est.pairwise.as_ref()),
        "true_radial": true_radial.mass(),
        "true_pairwise": mass(true_pairs.as_ref()),
    }))
}

fn to_js(v: pstomo::Result<Value>) -> Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = sinogram)]
pub fn js_sinogram(k: usize, half_bins: usize, snr: f64, lines: usize, seed: u32, rows: usize) -> Result<String, JsError> {
    to_js(sinogram(Setup { k, half_bins, snr, lines, seed }, rows))
}

#[wasm_bindgen(js_name = features)]
pub fn js_features(k: usize, half_bins: usize, snr: f64, lines: usize, seed: u32, nu_max: usize) -> Result<String, JsError> {
    to_js(features(Setup { k, half_bins, snr, lines, seed }, nu_max))
}

#[wasm_bindgen(js_name = distributions)]
pub fn js_distributions(k: usize, half_bins: usize, snr: f64, lines: usize, seed: u32) -> Result<String, JsError> {
    to_js(distributions(Setup { k, half_bins, snr, lines, seed }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> Setup {
        Setup {
            k: 4,
            half_bins: 60,
            snr: 10.0,
            lines: 400,
            seed: 5,
        }
    }

    #[test]
    fn sinogram_shape() {
        let v = sinogram(setup(), 16).unwrap();
        assert_eq!(v["lines"].as_array().unwrap().len(), 16);
        assert_eq!(v["lines"][0].as_array().unwrap().len(), 121);
        assert_eq!(v["points"].as_array().unwrap().len(), 4);
        assert_eq!(v["bins"], 121);
    }

    #[test]
    fn features_start_at_k() {
        let v = features(Setup { snr: f64::INFINITY, ..setup() }, 30).unwrap();
        assert_eq!(v["nu"].as_array().unwrap().len(), 31);
        assert_eq!(v["mu"][0].as_f64().unwrap(), 4.0);
        assert_eq!(v["mu_true"][0].as_f64().unwrap(), 4.0);
    }

    #[test]
    fn distributions_are_normalized() {
        let v = distributions(setup()).unwrap();
        for key in ["p_mu", "p_c", "true_radial", "true_pairwise"] {
            let s: f64 = v[key].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-9, "{key}: {s}");
        }
    }

    #[test]
    fn oversized_requests_are_refused() {
        assert!(sinogram(Setup { lines: 100_000, ..setup() }, 1).is_err());
        assert!(features(Setup { k: 0, ..setup() }, 5).is_err());
    }
}
