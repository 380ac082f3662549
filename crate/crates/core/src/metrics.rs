//! Quality proxies that need no pretrained networks: seam error of tiles,
//! exact periodicity of the encoding, cross-sample histogram diversity and
//! summaries of the critic's Wasserstein estimate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::FieldModel;
use crate::training::Telemetry;
use crate::{Error, Result};

pub const HISTOGRAM_BINS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeamError {
    /// Worst axis of `per_axis`.
    pub boundary_mad: f64,
    /// Mean absolute difference of adjacent samples over all axes.
    pub interior_gradient_mad: f64,
    /// Mean |first slice - last slice| along each axis.
    pub per_axis: Vec<f64>,
}

impl SeamError {
    pub fn passes(&self) -> bool {
        self.boundary_mad <= self.interior_gradient_mad
    }
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for a in (0..dims.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * dims[a + 1];
    }
    s
}

/// Seam statistics of a channels-last tile of shape `dims`.
pub fn seam_error(tile: &[f32], dims: &[usize], channels: usize) -> Result<SeamError> {
    let n: usize = dims.iter().product();
    if tile.len() != n * channels || channels == 0 {
        return Err(Error::config(format!(
            "tile buffer of {} values does not match dims {dims:?} x {channels}",
            tile.len()
        )));
    }
    if dims.is_empty() || dims.iter().any(|&d| d < 2) {
        return Err(Error::config(format!("tile {dims:?} needs at least 2 samples per axis")));
    }
    let st = strides(dims);
    let mut per_axis = Vec::with_capacity(dims.len());
    let mut grad_sum = 0.0;
    let mut grad_count = 0usize;
    for (a, &d) in dims.iter().enumerate() {
        let last = (d - 1) * st[a];
        let mut seam = 0.0;
        let mut seam_count = 0usize;
        for p in 0..n {
            let i = (p / st[a]) % d;
            for c in 0..channels {
                let v = tile[p * channels + c] as f64;
                if i + 1 < d {
                    grad_sum += (tile[(p + st[a]) * channels + c] as f64 - v).abs();
                    grad_count += 1;
                }
                if i == 0 {
                    seam += (tile[(p + last) * channels + c] as f64 - v).abs();
                    seam_count += 1;
                }
            }
        }
        per_axis.push(seam / seam_count as f64);
    }
    Ok(SeamError {
        boundary_mad: per_axis.iter().copied().fold(0.0, f64::max),
        interior_gradient_mad: grad_sum / grad_count as f64,
        per_axis,
    })
}

/// Perturbation applied to each generator input row before evaluation,
/// given the row's coordinates. Used to build negative controls.
pub type InputHook<'a> = &'a dyn Fn(&[f64], &mut [f32]);

/// `max |G(c) - G(c + (2/a_j) e_j)|` over `n_points` random coordinates and
/// every axis `j`, under a random constant latent vector.
pub fn periodicity_error(model: &FieldModel, n_points: usize, seed: u64) -> Result<f64> {
    periodicity_error_with(model, n_points, seed, None)
}

pub fn periodicity_error_with(model: &FieldModel, n_points: usize, seed: u64, hook: Option<InputHook<'_>>) -> Result<f64> {
    if n_points == 0 {
        return Ok(0.0);
    }
    let k = model.k();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<f32> = (0..model.latent.dim)
        .map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal))
        .collect();
    let reach = 2.0 * model.coords.scale_s;
    let base: Vec<f64> = (0..n_points * k).map(|_| rng.random_range(-reach..reach)).collect();
    let guidance = model
        .conditioning
        .is_conditional()
        .then(|| (0..n_points).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<f32>>());
    let eval = |coords: &[f64]| -> Result<Vec<f32>> {
        let latent = crate::model::LatentSource::Constant(&z);
        let mut rows = model.input_rows(coords, latent, guidance.as_deref())?;
        if let Some(h) = hook {
            let width = rows.len() / n_points;
            for (p, row) in rows.chunks_exact_mut(width).enumerate() {
                h(&coords[p * k..(p + 1) * k], row);
            }
        }
        model.generator.forward(&rows, n_points)
    };
    let reference = eval(&base)?;
    let period = model.period();
    let mut worst = 0.0f64;
    for (j, p) in period.iter().enumerate() {
        let shifted: Vec<f64> = base
            .iter()
            .enumerate()
            .map(|(i, &c)| if i % k == j { c + p } else { c })
            .collect();
        let out = eval(&shifted)?;
        for (x, y) in reference.iter().zip(&out) {
            worst = worst.max((*x as f64 - *y as f64).abs());
        }
    }
    Ok(worst)
}

/// Per-channel normalized histograms of unit-range values, concatenated.
pub fn channel_histograms(values: &[f32], channels: usize) -> Vec<f64> {
    let mut hist = vec![0.0; channels * HISTOGRAM_BINS];
    let n = values.len() / channels.max(1);
    for px in values.chunks_exact(channels) {
        for (c, &v) in px.iter().enumerate() {
            let b = ((v.clamp(0.0, 1.0) as f64) * HISTOGRAM_BINS as f64) as usize;
            hist[c * HISTOGRAM_BINS + b.min(HISTOGRAM_BINS - 1)] += 1.0;
        }
    }
    if n > 0 {
        hist.iter_mut().for_each(|h| *h /= n as f64);
    }
    hist
}

/// Mean over pairs of the channel-averaged L1 distance between
/// 64-bin histograms. Ranges over `[0, 2]`.
pub fn diversity_score(outputs: &[&[f32]], channels: usize) -> Result<f64> {
    if outputs.len() < 2 {
        return Err(Error::Usage(format!(
            "diversity needs at least 2 outputs, got {}",
            outputs.len()
        )));
    }
    if channels == 0 || outputs.iter().any(|o| o.len() != outputs[0].len() || o.len() % channels != 0) {
        return Err(Error::Usage("diversity outputs must share one shape".into()));
    }
    let hists: Vec<Vec<f64>> = outputs.iter().map(|o| channel_histograms(o, channels)).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..hists.len() {
        for j in i + 1..hists.len() {
            let d: f64 = hists[i].iter().zip(&hists[j]).map(|(a, b)| (a - b).abs()).sum();
            total += d / channels as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub last: f64,
}

/// Summary of the critic's Wasserstein estimate over recorded iterations.
pub fn wasserstein_trace(history: &[Telemetry]) -> Option<TraceStats> {
    let xs: Vec<f64> = history
        .iter()
        .map(|t| t.wasserstein_estimate)
        .filter(|v| v.is_finite())
        .collect();
    let last = *xs.last()?;
    Some(TraceStats {
        count: xs.len(),
        mean: xs.iter().sum::<f64>() / xs.len() as f64,
        min: xs.iter().copied().fold(f64::INFINITY, f64::min),
        max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        last,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub iteration: u64,
    pub seeds: usize,
    pub seam_error: SeamError,
    pub periodicity_error: f64,
    pub diversity: f64,
    pub wasserstein_trace: Option<TraceStats>,
    pub a: Vec<f64>,
    pub period_px: Vec<f64>,
}
