//! The trained field: generator, period parameter, latent grid and the
//! mapping between pixels and generator coordinates.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{ExemplarKind, Line, ValueMap};
use crate::fieldmath::{
    periodic_encode, scale_for_period, CoordGrid, EncoderConfig, LatentGrid, PeriodVector,
};
use crate::netcore::Generator;
use crate::{Error, Result};

/// How guidance enters the networks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Conditioning {
    #[default]
    None,
    /// Value of `a x + b y + c` at the crop's normalized center.
    Directional { a: f64, b: f64, c: f64 },
    /// Mean absolute SDF of the crop.
    Density,
}

impl Conditioning {
    pub fn name(&self) -> &'static str {
        match self {
            Conditioning::None => "none",
            Conditioning::Directional { .. } => "directional",
            Conditioning::Density => "density",
        }
    }

    pub fn is_conditional(&self) -> bool {
        !matches!(self, Conditioning::None)
    }

    pub fn guidance_dim(&self) -> usize {
        usize::from(self.is_conditional())
    }

    pub fn line(&self) -> Option<Line> {
        match *self {
            Conditioning::Directional { a, b, c } => Some(Line { a, b, c }),
            _ => None,
        }
    }
}

/// Pixel to coordinate mapping: `c = scale_s * (center + step * (idx - (n - 1) / 2))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordMapping {
    pub scale_s: f64,
    /// Unscaled coordinate distance between neighbouring pixels.
    pub step: f64,
}

impl CoordMapping {
    /// A training patch of `patch` pixels spans `[-1, 1]` (longest axis) before scaling.
    pub fn for_patch(scale_s: f64, patch: &[usize]) -> Self {
        let longest = patch.iter().copied().max().unwrap_or(1).max(1);
        Self {
            scale_s,
            step: 2.0 / longest as f64,
        }
    }

    /// Scaled coordinate units per pixel.
    pub fn pixel_size(&self) -> f64 {
        self.scale_s * self.step
    }

    /// Grid of `dims` pixels whose center sits at `offset` (scaled units).
    pub fn grid(&self, dims: &[usize], offset: &[f64]) -> Result<CoordGrid> {
        let center: Vec<f64> = offset.iter().map(|o| o / self.scale_s).collect();
        CoordGrid::new(dims, dims.len(), self.scale_s, &center, self.step)
    }
}

/// Where the latent input of the generator comes from.
#[derive(Clone, Copy, Debug)]
pub enum LatentSource<'a> {
    /// One realisation of the latent grid (`cells x dim` values).
    Field { values: &'a [f32], extent_scale: f64 },
    /// The same latent vector at every position.
    Constant(&'a [f32]),
}

/// Everything needed to evaluate the synthesized field at coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldModel {
    pub kind: ExemplarKind,
    pub channels: usize,
    pub generator: Generator<f32>,
    /// `a = exp(rho)` per axis.
    pub rho: Tensor<f32>,
    pub encoder: EncoderConfig,
    /// Unscaled latent grid geometry.
    pub latent: LatentGrid,
    /// Learned latent grid values, when the grid is trained rather than resampled.
    pub latent_values: Option<Tensor<f32>>,
    pub coords: CoordMapping,
    pub value_map: ValueMap,
    pub conditioning: Conditioning,
    /// Multiplier applied to raw guidance values before they enter the networks.
    pub guidance_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub kind: ExemplarKind,
    pub channels: usize,
    pub generator: crate::netcore::GeneratorArch,
    pub bandwidth: usize,
    pub latent_shape: Vec<usize>,
    pub latent_dim: usize,
    pub latent_spacing: f64,
    pub latent_sigma: f64,
    pub latent_trained: bool,
    pub coords: CoordMapping,
    pub value_map: ValueMap,
    pub conditioning: Conditioning,
    pub guidance_scale: f64,
}

impl FieldModel {
    pub fn k(&self) -> usize {
        self.kind.k()
    }

    pub fn period_vector(&self) -> PeriodVector {
        let rho: Vec<f64> = self.rho.data().iter().map(|&r| r as f64).collect();
        PeriodVector::from_rho(&rho, true)
    }

    pub fn a(&self) -> Vec<f64> {
        self.period_vector().a()
    }

    /// Encoding period per axis in scaled coordinate units (`2 / a`).
    pub fn period(&self) -> Vec<f64> {
        self.period_vector().period()
    }

    /// Encoding period per axis in output pixels.
    pub fn period_pixels(&self) -> Vec<f64> {
        let px = self.coords.pixel_size();
        self.period().iter().map(|p| p / px).collect()
    }

    /// Latent grid scaled so one cell spans one period, times `extent_scale`.
    pub fn scaled_latent(&self, extent_scale: f64) -> LatentGrid {
        let mut grid = self.latent.clone();
        grid.axis_scale = scale_for_period(&self.latent, &self.period_vector());
        grid.extent_scale = extent_scale;
        grid
    }

    /// A latent realisation: the trained grid, or standard normal draws from `rng`.
    pub fn draw_latent<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f32> {
        match &self.latent_values {
            Some(v) => v.data().to_vec(),
            None => (0..self.latent.value_len())
                .map(|_| rng.sample::<f32, _>(StandardNormal))
                .collect(),
        }
    }

    pub fn descriptor(&self) -> ModelDescriptor {
        ModelDescriptor {
            kind: self.kind,
            channels: self.channels,
            generator: self.generator.arch.clone(),
            bandwidth: self.encoder.bandwidth,
            latent_shape: self.latent.shape.clone(),
            latent_dim: self.latent.dim,
            latent_spacing: self.latent.spacing,
            latent_sigma: self.latent.sigma,
            latent_trained: self.latent_values.is_some(),
            coords: self.coords,
            value_map: self.value_map,
            conditioning: self.conditioning,
            guidance_scale: self.guidance_scale,
        }
    }

    /// Generator input rows `[encoding | latent | guidance]` for `coords`.
    pub fn input_rows(&self, coords: &[f64], latent: LatentSource<'_>, guidance: Option<&[f32]>) -> Result<Vec<f32>> {
        let k = self.k();
        let m = coords.len() / k;
        let e = self.encoder.out_dim();
        let d = self.latent.dim;
        let gd = self.conditioning.guidance_dim();
        match (guidance, gd) {
            (None, 0) => {}
            (Some(g), 1) if g.len() == m => {}
            (Some(_), 0) => return Err(Error::config("guidance given to an unconditional model")),
            (None, _) => return Err(Error::config("conditional model needs a guidance value per position")),
            (Some(g), _) => {
                return Err(Error::config(format!("guidance has {} values for {m} positions", g.len())))
            }
        }
        let encoded: Vec<f32> = periodic_encode(coords, &self.a(), &self.encoder)?;
        let mut lat = vec![0.0f32; m * d];
        match latent {
            LatentSource::Field { values, extent_scale } => {
                if values.len() != self.latent.value_len() {
                    return Err(Error::config("latent realisation does not match the grid"));
                }
                self.scaled_latent(extent_scale).eval_into(values, coords, &mut lat);
            }
            LatentSource::Constant(z) => {
                if z.len() != d {
                    return Err(Error::config(format!("constant latent has {} entries, expected {d}", z.len())));
                }
                for row in lat.chunks_exact_mut(d) {
                    row.copy_from_slice(z);
                }
            }
        }
        let width = e + d + gd;
        let mut input = Vec::with_capacity(m * width);
        for r in 0..m {
            input.extend_from_slice(&encoded[r * e..(r + 1) * e]);
            input.extend_from_slice(&lat[r * d..(r + 1) * d]);
            if let Some(g) = guidance {
                input.push(g[r] * self.guidance_scale as f32);
            }
        }
        Ok(input)
    }

    /// Generator output in `(0, 1)` at `coords` (`M x C`).
    pub fn eval_points(&self, coords: &[f64], latent: LatentSource<'_>, guidance: Option<&[f32]>) -> Result<Vec<f32>> {
        let input = self.input_rows(coords, latent, guidance)?;
        self.generator.forward(&input, coords.len() / self.k())
    }
}
