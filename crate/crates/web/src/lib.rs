//! Browser demo: phantom slices, gap densities and t-test p-values.
//!
//! The plain functions are what the native tests exercise; the
//! `#[wasm_bindgen]` wrappers only turn errors into JS exceptions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;
use wmage_core::phantom::generate_phantom_participant;
use wmage_core::stats;
use wmage_core::PhantomSpec;

/// Largest grid the page offers; bigger volumes take too long per keystroke.
pub const MAX_GRID: usize = 96;

/// One axial slice (`z`) of a synthetic participant, row-major `grid × grid`.
/// `channel` is `fa` or `md`; MD comes back in µm²/ms-style units (×1000)
/// so both channels sit near the unit range.
pub fn slice(
    age: f64,
    grid: usize,
    noise_fa: f64,
    seed: u64,
    channel: &str,
    z: usize,
) -> Result<Vec<f32>, String> {
    if !(4..=MAX_GRID).contains(&grid) {
        return Err(format!("grid must be between 4 and {MAX_GRID}"));
    }
    if z >= grid {
        return Err(format!("slice {z} is outside a grid of {grid}"));
    }
    let spec = PhantomSpec {
        grid: [grid; 3],
        noise_sigma_fa: noise_fa,
        seed,
        ..PhantomSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fa, md, _) =
        generate_phantom_participant(&spec, age, 0, &mut rng).map_err(|e| e.to_string())?;
    let (vol, scale) = match channel {
        "fa" => (fa, 1.0),
        "md" => (md, 1000.0),
        other => return Err(format!("unknown channel {other:?}")),
    };
    let plane = grid * grid;
    Ok(vol.data[z * plane..(z + 1) * plane]
        .iter()
        .map(|&v| (v * scale) as f32)
        .collect())
}

/// Gaussian KDE packed as `[bandwidth, x_0..x_{n-1}, d_0..d_{n-1}]`.
pub fn kde_packed(values: &[f64], points: usize) -> Result<Vec<f64>, String> {
    let c = stats::kde(values, points).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(1 + 2 * points);
    out.push(c.bandwidth);
    out.extend_from_slice(&c.x);
    out.extend_from_slice(&c.density);
    Ok(out)
}

/// Paired t-test as `[t, p, df]`.
pub fn paired(a: &[f64], b: &[f64]) -> Result<Vec<f64>, String> {
    let r = stats::paired_t_test(a, b).map_err(|e| e.to_string())?;
    Ok(vec![r.t, r.p, r.df])
}

/// Two-sided p-value; `NaN` unless `df > 0` and `t` is finite.
pub fn p_value(t: f64, df: f64) -> f64 {
    if df > 0.0 && t.is_finite() {
        stats::t_two_sided_p(t, df)
    } else {
        f64::NAN
    }
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen]
pub fn phantom_slice(
    age: f64,
    grid: usize,
    noise_fa: f64,
    seed: u32,
    channel: &str,
    z: usize,
) -> Result<Vec<f32>, JsError> {
    slice(age, grid, noise_fa, seed as u64, channel, z).map_err(js)
}

#[wasm_bindgen]
pub fn kde_curve(values: Vec<f64>, points: usize) -> Result<Vec<f64>, JsError> {
    kde_packed(&values, points).map_err(js)
}

#[wasm_bindgen]
pub fn paired_t(a: Vec<f64>, b: Vec<f64>) -> Result<Vec<f64>, JsError> {
    paired(&a, &b).map_err(js)
}

#[wasm_bindgen]
pub fn t_p_value(t: f64, df: f64) -> f64 {
    p_value(t, df)
}
