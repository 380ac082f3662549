//! Inference: chunked synthesis over arbitrary grids, seamless tiles under a
//! constant latent vector, latent-extent control and guidance maps.

use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{encode_ipfvol, encode_png, normalize_pixel_coords, ExemplarKind, Line, Volume};
use crate::fieldmath::CoordGrid;
use crate::model::{Conditioning, FieldModel, LatentSource};
use crate::{Error, Result};

/// Default chunk edge for images (pixels) and volumes (voxels).
pub const CHUNK_EDGE_2D: usize = 256;
pub const CHUNK_EDGE_3D: usize = 64;

/// Guidance supplied with a synthesis request, in the units used in training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GuidanceSpec {
    /// The same value everywhere.
    Scalar { value: f64 },
    /// Linear in the output index along `axis`, `from` at the first sample and `to` at the last.
    Ramp { axis: usize, from: f64, to: f64 },
    /// `a x + b y + c` over the output image in normalized coordinates.
    Line { a: f64, b: f64, c: f64 },
    /// One value per output position, row-major.
    Map { values: Vec<f32> },
}

fn default_extent() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisRequest {
    pub out_dims: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_extent")]
    pub latent_extent_scale: f64,
    /// Fixed latent vector for every position (seamless mode).
    #[serde(default)]
    pub constant_latent: Option<Vec<f32>>,
    #[serde(default)]
    pub guidance: Option<GuidanceSpec>,
    /// Defaults to 256 per axis for images and 64 for volumes, clipped to `out_dims`.
    #[serde(default)]
    pub chunk_dims: Option<Vec<usize>>,
    /// Grid center in scaled coordinate units.
    #[serde(default)]
    pub center_offset: Option<Vec<f64>>,
}

impl SynthesisRequest {
    pub fn new(out_dims: Vec<usize>, seed: u64) -> Self {
        Self {
            out_dims,
            seed,
            latent_extent_scale: 1.0,
            constant_latent: None,
            guidance: None,
            chunk_dims: None,
            center_offset: None,
        }
    }

    /// Multiply the latent field's footprint at inference time.
    pub fn with_latent_extent(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::config(format!("latent extent scale must be positive, got {scale}")));
        }
        self.latent_extent_scale = scale;
        Ok(self)
    }

    pub fn positions(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn chunk_dims_for(&self, kind: ExemplarKind) -> Vec<usize> {
        match &self.chunk_dims {
            Some(c) => c.clone(),
            None => {
                let edge = match kind {
                    ExemplarKind::Image2d => CHUNK_EDGE_2D,
                    ExemplarKind::Sdf3d => CHUNK_EDGE_3D,
                };
                self.out_dims.iter().map(|&d| d.min(edge)).collect()
            }
        }
    }

    pub fn validate(&self, model: &FieldModel) -> Result<()> {
        let k = model.k();
        if self.out_dims.len() != k {
            return Err(Error::config(format!(
                "request has {} output axes but the checkpoint is {k}-dimensional",
                self.out_dims.len()
            )));
        }
        if self.out_dims.contains(&0) {
            return Err(Error::config(format!("output dims {:?} must be positive", self.out_dims)));
        }
        let chunk = self.chunk_dims_for(model.kind);
        if chunk.len() != k || chunk.iter().zip(&self.out_dims).any(|(c, d)| *c == 0 || c > d) {
            return Err(Error::config(format!(
                "chunk dims {chunk:?} must be positive and within output dims {:?}",
                self.out_dims
            )));
        }
        if !(self.latent_extent_scale > 0.0 && self.latent_extent_scale.is_finite()) {
            return Err(Error::config(format!(
                "latent extent scale must be positive, got {}",
                self.latent_extent_scale
            )));
        }
        if let Some(z) = &self.constant_latent {
            if z.len() != model.latent.dim || z.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!(
                    "constant latent must hold {} finite values",
                    model.latent.dim
                )));
            }
        }
        if let Some(c) = &self.center_offset {
            if c.len() != k || c.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("center offset must hold {k} finite values")));
            }
        }
        validate_guidance(model, self.guidance.as_ref(), &self.out_dims)
    }
}

fn validate_guidance(model: &FieldModel, guidance: Option<&GuidanceSpec>, out_dims: &[usize]) -> Result<()> {
    let Some(g) = guidance else {
        return match model.conditioning {
            Conditioning::Density => Err(Error::config("density-conditioned checkpoint needs a guidance value or map")),
            _ => Ok(()),
        };
    };
    if !model.conditioning.is_conditional() {
        return Err(Error::config("guidance given for an unconditional checkpoint"));
    }
    match g {
        GuidanceSpec::Scalar { value } if !value.is_finite() => Err(Error::config("guidance value must be finite")),
        GuidanceSpec::Ramp { axis, from, to } => {
            if *axis >= out_dims.len() {
                Err(Error::config(format!("ramp axis {axis} out of range")))
            } else if !(from.is_finite() && to.is_finite()) {
                Err(Error::config("ramp endpoints must be finite"))
            } else {
                Ok(())
            }
        }
        GuidanceSpec::Line { a, b, c } => {
            if !matches!(model.conditioning, Conditioning::Directional { .. }) {
                return Err(Error::config("line guidance needs a directionally conditioned checkpoint"));
            }
            Line { a: *a, b: *b, c: *c }.validate()
        }
        GuidanceSpec::Map { values } => {
            let n: usize = out_dims.iter().product();
            if values.len() != n {
                Err(Error::config(format!(
                    "guidance map has {} values for {n} output positions",
                    values.len()
                )))
            } else if values.iter().any(|v| !v.is_finite()) {
                Err(Error::config("guidance map values must be finite"))
            } else {
                Ok(())
            }
        }
        GuidanceSpec::Scalar { .. } => Ok(()),
    }
}

/// Guidance resolved against the output grid.
enum GuidanceField<'a> {
    Scalar(f32),
    Ramp { axis: usize, from: f64, to: f64, len: usize },
    Line { line: Line, w: f64, h: f64 },
    Map(&'a [f32]),
}

impl GuidanceField<'_> {
    fn at(&self, idx: &[usize], flat: usize) -> f32 {
        match *self {
            GuidanceField::Scalar(v) => v,
            GuidanceField::Ramp { axis, from, to, len } => {
                let t = if len > 1 { idx[axis] as f64 / (len - 1) as f64 } else { 0.0 };
                (from + (to - from) * t) as f32
            }
            GuidanceField::Line { line, w, h } => {
                let (x, y) = normalize_pixel_coords((idx[1] as f64 + 0.5, idx[0] as f64 + 0.5), w, h);
                line.eval(x, y) as f32
            }
            GuidanceField::Map(m) => m[flat],
        }
    }
}

/// Synthesized field in the generator range `(0, 1)`, channels-last.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub kind: ExemplarKind,
    pub dims: Vec<usize>,
    pub channels: usize,
    pub values: Vec<f32>,
    pub value_map: crate::data::ValueMap,
}

impl SynthOutput {
    /// Values in exemplar units (SDF distances for volumes).
    pub fn raw_values(&self) -> Vec<f32> {
        self.values
            .iter()
            .map(|&u| self.value_map.from_unit(u as f64) as f32)
            .collect()
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        match (self.kind, self.dims.as_slice()) {
            (ExemplarKind::Image2d, &[h, w]) => encode_png(w, h, self.channels, &self.values),
            _ => Err(Error::config("PNG output needs a 2D result")),
        }
    }

    pub fn to_ipfvol(&self) -> Result<Vec<u8>> {
        match self.dims.as_slice() {
            &[d0, d1, d2] => encode_ipfvol(&Volume {
                dims: [d0, d1, d2],
                channels: self.channels,
                values: self.raw_values(),
            }),
            _ => Err(Error::config("IPFVOL output needs a 3D result")),
        }
    }

    /// PNG for images, IPFVOL for volumes, with the matching media type.
    pub fn encode(&self) -> Result<(Vec<u8>, &'static str)> {
        match self.kind {
            ExemplarKind::Image2d => Ok((self.to_png()?, "image/png")),
            ExemplarKind::Sdf3d => Ok((self.to_ipfvol()?, "application/x-ipfvol")),
        }
    }
}

/// A validated request bound to a model, ready to evaluate regions.
pub struct Synthesizer<'a> {
    model: &'a FieldModel,
    request: &'a SynthesisRequest,
    grid: CoordGrid,
    latent: Vec<f32>,
    guidance: Option<GuidanceField<'a>>,
}

impl<'a> Synthesizer<'a> {
    pub fn new(model: &'a FieldModel, request: &'a SynthesisRequest) -> Result<Self> {
        request.validate(model)?;
        let k = model.k();
        let offset = request.center_offset.clone().unwrap_or_else(|| vec![0.0; k]);
        let grid = model.coords.grid(&request.out_dims, &offset)?;
        let latent = match &request.constant_latent {
            Some(z) => z.clone(),
            None => model.draw_latent(&mut ChaCha8Rng::seed_from_u64(request.seed)),
        };
        let guidance = match (&request.guidance, model.conditioning) {
            (Some(GuidanceSpec::Scalar { value }), _) => Some(GuidanceField::Scalar(*value as f32)),
            (Some(GuidanceSpec::Ramp { axis, from, to }), _) => Some(GuidanceField::Ramp {
                axis: *axis,
                from: *from,
                to: *to,
                len: request.out_dims[*axis],
            }),
            (Some(GuidanceSpec::Line { a, b, c }), _) => Some(line_field(Line { a: *a, b: *b, c: *c }, &request.out_dims)),
            (Some(GuidanceSpec::Map { values }), _) => Some(GuidanceField::Map(values)),
            (None, Conditioning::Directional { a, b, c }) => Some(line_field(Line { a, b, c }, &request.out_dims)),
            (None, _) => None,
        };
        Ok(Self {
            model,
            request,
            grid,
            latent,
            guidance,
        })
    }

    fn source(&self) -> LatentSource<'_> {
        match self.request.constant_latent {
            Some(_) => LatentSource::Constant(&self.latent),
            None => LatentSource::Field {
                values: &self.latent,
                extent_scale: self.request.latent_extent_scale,
            },
        }
    }

    /// Evaluate the axis-aligned block `origin .. origin + dims` of the output grid.
    pub fn region(&self, origin: &[usize], dims: &[usize]) -> Result<Vec<f32>> {
        let out = &self.request.out_dims;
        if origin.len() != out.len()
            || dims.len() != out.len()
            || origin.iter().zip(dims).zip(out).any(|((o, d), n)| o + d > *n)
        {
            return Err(Error::config(format!(
                "region {origin:?}+{dims:?} outside output dims {out:?}"
            )));
        }
        let coords = self.grid.coords_region(origin, dims);
        let guidance = self.guidance.as_ref().map(|g| {
            let mut idx = origin.to_vec();
            let mut values = Vec::with_capacity(dims.iter().product());
            for_each_index(dims, |local| {
                for (a, v) in idx.iter_mut().enumerate() {
                    *v = origin[a] + local[a];
                }
                values.push(g.at(&idx, flat_index(&idx, out)));
            });
            values
        });
        self.model.eval_points(&coords, self.source(), guidance.as_deref())
    }

    /// Chunk origins and sizes, row-major over the chunk grid.
    pub fn chunks(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let out = &self.request.out_dims;
        let chunk = self.request.chunk_dims_for(self.model.kind);
        let counts: Vec<usize> = out.iter().zip(&chunk).map(|(d, c)| d.div_ceil(*c)).collect();
        let mut list = Vec::new();
        for_each_index(&counts, |ci| {
            let origin: Vec<usize> = ci.iter().zip(&chunk).map(|(i, c)| i * c).collect();
            let dims: Vec<usize> = origin.iter().zip(&chunk).zip(out).map(|((o, c), d)| (*c).min(d - o)).collect();
            list.push((origin, dims));
        });
        list
    }

    /// Evaluate every chunk (in parallel on the current rayon pool) and
    /// assemble the output. `progress` receives `(done, total)` per chunk.
    pub fn run_with(&self, progress: &(dyn Fn(usize, usize) + Sync)) -> Result<SynthOutput> {
        let c = self.model.channels;
        let out_dims = &self.request.out_dims;
        let chunks = self.chunks();
        let total = chunks.len();
        let buffer = Mutex::new((vec![0.0f32; self.request.positions() * c], 0usize));
        chunks.par_iter().try_for_each(|(origin, dims)| -> Result<()> {
            let values = self.region(origin, dims)?;
            let mut guard = buffer.lock().expect("output buffer lock");
            let (out, done) = &mut *guard;
            let row = dims[dims.len() - 1] * c;
            let mut src = 0;
            let lead = &dims[..dims.len() - 1];
            for_each_index(lead, |li| {
                let mut idx: Vec<usize> = li.iter().zip(origin).map(|(l, o)| l + o).collect();
                idx.push(origin[origin.len() - 1]);
                let dst = flat_index(&idx, out_dims) * c;
                out[dst..dst + row].copy_from_slice(&values[src..src + row]);
                src += row;
            });
            *done += 1;
            progress(*done, total);
            Ok(())
        })?;
        let (values, _) = buffer.into_inner().expect("output buffer lock");
        Ok(SynthOutput {
            kind: self.model.kind,
            dims: out_dims.clone(),
            channels: c,
            values,
            value_map: self.model.value_map,
        })
    }

    pub fn run(&self) -> Result<SynthOutput> {
        self.run_with(&|_, _| {})
    }
}

fn line_field(line: Line, out_dims: &[usize]) -> GuidanceField<'static> {
    GuidanceField::Line {
        line,
        w: out_dims.get(1).copied().unwrap_or(1) as f64,
        h: out_dims[0] as f64,
    }
}

fn flat_index(idx: &[usize], dims: &[usize]) -> usize {
    idx.iter().zip(dims).fold(0, |acc, (i, d)| acc * d + i)
}

/// Visit every multi-index of `dims` in row-major order.
fn for_each_index(dims: &[usize], mut f: impl FnMut(&[usize])) {
    if dims.contains(&0) {
        return;
    }
    let mut idx = vec![0usize; dims.len()];
    loop {
        f(&idx);
        let mut axis = dims.len();
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < dims[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

/// Evaluate the model over `request.out_dims`, chunk by chunk.
pub fn synthesize(model: &FieldModel, request: &SynthesisRequest) -> Result<SynthOutput> {
    Synthesizer::new(model, request)?.run()
}

/// [`synthesize`] for a guidance-conditioned checkpoint; the request must carry guidance.
pub fn conditioned_synthesize(model: &FieldModel, request: &SynthesisRequest) -> Result<SynthOutput> {
    if !model.conditioning.is_conditional() {
        return Err(Error::config("checkpoint was not trained with guidance"));
    }
    if request.guidance.is_none() {
        return Err(Error::config("conditioned synthesis needs a guidance value or map"));
    }
    synthesize(model, request)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileRequest {
    pub periods: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Drawn from `seed` when absent.
    #[serde(default)]
    pub constant_latent: Option<Vec<f32>>,
    #[serde(default)]
    pub guidance: Option<f64>,
}

/// Constant-latent tile spanning exactly `periods[j]` encoding periods per axis.
///
/// Each axis gets `n + 1` samples where `n` is the pixel count closest to the
/// span at the training resolution; the last sample lands on the first one
/// shifted by whole periods, so it repeats the first row. Drop it when
/// laying tiles side by side.
pub fn seamless_tile(model: &FieldModel, req: &TileRequest) -> Result<SynthOutput> {
    let k = model.k();
    if req.periods.len() != k || req.periods.contains(&0) {
        return Err(Error::config(format!(
            "periods {:?} must hold {k} positive integers",
            req.periods
        )));
    }
    let latent = match &req.constant_latent {
        Some(z) if z.len() == model.latent.dim && z.iter().all(|v| v.is_finite()) => z.clone(),
        Some(_) => {
            return Err(Error::config(format!(
                "constant latent must hold {} finite values",
                model.latent.dim
            )))
        }
        None => {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
            (0..model.latent.dim)
                .map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal))
                .collect()
        }
    };
    match (req.guidance, model.conditioning.is_conditional()) {
        (Some(_), false) => return Err(Error::config("guidance given for an unconditional checkpoint")),
        (None, true) => return Err(Error::config("conditional checkpoint needs a guidance value for tiling")),
        (Some(g), true) if !g.is_finite() => return Err(Error::config("guidance value must be finite")),
        _ => {}
    }
    let period = model.period();
    let px = model.coords.pixel_size();
    let mut dims = Vec::with_capacity(k);
    let mut axes = Vec::with_capacity(k);
    for j in 0..k {
        let span = req.periods[j] as f64 * period[j];
        let n = ((span / px).round() as usize).max(1);
        let step = span / n as f64;
        let start = -span / 2.0;
        axes.push((0..=n).map(|i| start + step * i as f64).collect::<Vec<f64>>());
        dims.push(n + 1);
    }
    let mut coords = Vec::with_capacity(dims.iter().product::<usize>() * k);
    for_each_index(&dims, |idx| {
        for (a, &i) in idx.iter().enumerate() {
            coords.push(axes[a][i]);
        }
    });
    let m = coords.len() / k;
    let guidance = req.guidance.map(|g| vec![g as f32; m]);
    let values = model.eval_points(&coords, LatentSource::Constant(&latent), guidance.as_deref())?;
    Ok(SynthOutput {
        kind: model.kind,
        dims,
        channels: model.channels,
        values,
        value_map: model.value_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Exemplar;
    use crate::metrics::seam_error;
    use crate::training::{TrainConfig, TrainState};

    fn model(json: &str) -> FieldModel {
        let values: Vec<f32> = (0..32 * 32 * 3).map(|i| ((i * 7) % 11) as f32 / 11.0).collect();
        let ex = Exemplar::image([32, 32], 3, values).unwrap();
        let cfg = TrainConfig::from_json(json).unwrap();
        TrainState::new(&ex, cfg).unwrap().model
    }

    fn small() -> FieldModel {
        model(r#"{"patch_size": [16, 16], "generator": {"hidden": 16, "layers": 4}, "critic": {"base_width": 4}}"#)
    }

    #[test]
    fn chunking_is_bit_identical() {
        let m = small();
        let mut req = SynthesisRequest::new(vec![40, 36], 5);
        let whole = synthesize(&m, &req).unwrap();
        for chunk in [vec![10, 9], vec![7, 36], vec![40, 1]] {
            req.chunk_dims = Some(chunk.clone());
            assert_eq!(synthesize(&m, &req).unwrap().values, whole.values, "chunk {chunk:?}");
        }
        let s = Synthesizer::new(&m, &req).unwrap();
        let block = s.region(&[12, 20], &[9, 16]).unwrap();
        for y in 0..9 {
            let src = ((12 + y) * 36 + 20) * 3;
            assert_eq!(&block[y * 16 * 3..(y + 1) * 16 * 3], &whole.values[src..src + 16 * 3]);
        }
        assert!(whole.values.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn seeds_and_extent() {
        let m = small();
        let base = SynthesisRequest::new(vec![24, 24], 1);
        let a = synthesize(&m, &base).unwrap();
        assert_eq!(a, synthesize(&m, &base).unwrap());
        assert_ne!(a.values, synthesize(&m, &SynthesisRequest::new(vec![24, 24], 2)).unwrap().values);
        let same = base.clone().with_latent_extent(1.0).unwrap();
        assert_eq!(a, synthesize(&m, &same).unwrap());
        let wide = base.clone().with_latent_extent(4.0).unwrap();
        assert_ne!(a.values, synthesize(&m, &wide).unwrap().values);
        assert!(base.clone().with_latent_extent(0.0).is_err());

        let mut constant = base.clone();
        constant.constant_latent = Some(vec![0.3; m.latent.dim]);
        let c1 = synthesize(&m, &constant).unwrap();
        let c4 = synthesize(&m, &constant.clone().with_latent_extent(4.0).unwrap()).unwrap();
        assert_eq!(c1, c4);
    }

    #[test]
    fn request_validation() {
        let m = small();
        let bad = |r: SynthesisRequest| matches!(synthesize(&m, &r), Err(Error::Config(_)));
        assert!(bad(SynthesisRequest::new(vec![8, 8, 8], 0)));
        assert!(bad(SynthesisRequest::new(vec![8, 0], 0)));
        let mut r = SynthesisRequest::new(vec![8, 8], 0);
        r.chunk_dims = Some(vec![16, 8]);
        assert!(bad(r));
        let mut r = SynthesisRequest::new(vec![8, 8], 0);
        r.guidance = Some(GuidanceSpec::Scalar { value: 0.5 });
        assert!(bad(r));
        let mut r = SynthesisRequest::new(vec![8, 8], 0);
        r.constant_latent = Some(vec![0.0; 2]);
        assert!(bad(r));
        let json = r#"{"out_dims": [8, 8], "sede": 3}"#;
        assert!(serde_json::from_str::<SynthesisRequest>(json).is_err());
    }

    #[test]
    fn tile_closes_on_itself() {
        let m = small();
        let tile = seamless_tile(&m, &TileRequest { periods: vec![2, 1], seed: 3, constant_latent: None, guidance: None }).unwrap();
        let (h, w, c) = (tile.dims[0], tile.dims[1], tile.channels);
        let px = m.period_pixels();
        assert_eq!(h, (2.0 * px[0]).round() as usize + 1);
        assert_eq!(w, px[1].round() as usize + 1);
        for x in 0..w * c {
            assert!((tile.values[x] - tile.values[(h - 1) * w * c + x]).abs() < 1e-5);
        }
        for y in 0..h {
            for ch in 0..c {
                let first = tile.values[(y * w) * c + ch];
                let last = tile.values[(y * w + w - 1) * c + ch];
                assert!((first - last).abs() < 1e-5);
            }
        }
        let s = seam_error(&tile.values, &tile.dims, c).unwrap();
        assert!(s.passes(), "{s:?}");
        let zero = seamless_tile(&m, &TileRequest { periods: vec![1, 1], seed: 0, constant_latent: Some(vec![0.0; 5]), guidance: None }).unwrap();
        let other = seamless_tile(&m, &TileRequest { periods: vec![1, 1], seed: 0, constant_latent: Some(vec![1.0; 5]), guidance: None }).unwrap();
        assert_ne!(zero.values, other.values);
    }

    #[test]
    fn directional_checkpoint_uses_its_line_by_default() {
        let m = model(
            r#"{"patch_size": [16, 16], "generator": {"hidden": 8, "layers": 3}, "critic": {"base_width": 4},
                "conditioning": {"kind": "directional", "a": 0, "b": 1, "c": 0}}"#,
        );
        let implicit = synthesize(&m, &SynthesisRequest::new(vec![16, 16], 0)).unwrap();
        let mut r = SynthesisRequest::new(vec![16, 16], 0);
        r.guidance = Some(GuidanceSpec::Line { a: 0.0, b: 1.0, c: 0.0 });
        assert_eq!(implicit, synthesize(&m, &r).unwrap());
        r.guidance = Some(GuidanceSpec::Ramp { axis: 0, from: -1.0, to: 1.0 });
        let ramp = conditioned_synthesize(&m, &r).unwrap();
        assert_eq!(ramp.dims, vec![16, 16]);
        assert!(conditioned_synthesize(&small(), &r).is_err());
        let png = ramp.to_png().unwrap();
        assert_eq!(&png[1..4], b"PNG");
    }
}
