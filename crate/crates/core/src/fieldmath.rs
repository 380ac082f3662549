//! Coordinate grids, the periodic encoding with a learnable period, and the
//! latent random field with exponential corner interpolation.
//!
//! Coordinates are always `f64`. The encoder reduces each phase `a * c`
//! modulo 2 before multiplying by `2^l * pi`, so two coordinates one period
//! apart produce bit-identical features even when the network downstream
//! runs in single precision.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{CustomOp, Real, Tensor};
use crate::{Error, Result};

/// Regular grid of sample coordinates.
///
/// `c[idx] = scale_s * (center + spacing * (idx - (dims - 1) / 2))`
#[derive(Clone, Debug, PartialEq)]
pub struct CoordGrid {
    pub dims: Vec<usize>,
    pub scale_s: f64,
    pub center: Vec<f64>,
    pub spacing: f64,
}

impl CoordGrid {
    pub fn new(dims: &[usize], k: usize, scale_s: f64, center: &[f64], spacing: f64) -> Result<Self> {
        if dims.len() != k {
            return Err(Error::config(format!(
                "coordinate grid has {} dims but k = {k}",
                dims.len()
            )));
        }
        if center.len() != k {
            return Err(Error::config(format!(
                "grid center has {} components but k = {k}",
                center.len()
            )));
        }
        if !(scale_s > 0.0 && scale_s.is_finite()) {
            return Err(Error::config(format!("scale_s must be positive, got {scale_s}")));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::config(format!("spacing must be positive, got {spacing}")));
        }
        Ok(Self {
            dims: dims.to_vec(),
            scale_s,
            center: center.to_vec(),
            spacing,
        })
    }

    pub fn k(&self) -> usize {
        self.dims.len()
    }

    pub fn num_points(&self) -> usize {
        self.dims.iter().product()
    }

    /// Distance between neighbouring samples after scaling.
    pub fn step(&self) -> f64 {
        self.scale_s * self.spacing
    }

    /// Coordinate along `axis` of grid index `i`.
    #[inline]
    pub fn axis_coord(&self, axis: usize, i: usize) -> f64 {
        let mid = (self.dims[axis] as f64 - 1.0) / 2.0;
        self.scale_s * (self.center[axis] + self.spacing * (i as f64 - mid))
    }

    /// All coordinates, row-major over `dims`, `k` values per point.
    pub fn coords(&self) -> Vec<f64> {
        let origin = vec![0; self.k()];
        self.coords_region(&origin, &self.dims)
    }

    /// Coordinates of the axis-aligned sub-block starting at `origin`.
    pub fn coords_region(&self, origin: &[usize], dims: &[usize]) -> Vec<f64> {
        let k = self.k();
        let n: usize = dims.iter().product();
        let axes: Vec<Vec<f64>> = (0..k)
            .map(|a| (0..dims[a]).map(|i| self.axis_coord(a, origin[a] + i)).collect())
            .collect();
        let mut out = Vec::with_capacity(n * k);
        let mut idx = vec![0usize; k];
        for _ in 0..n {
            for a in 0..k {
                out.push(axes[a][idx[a]]);
            }
            for a in (0..k).rev() {
                idx[a] += 1;
                if idx[a] < dims[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        out
    }
}

/// Convenience wrapper returning the flat `dims x k` coordinate array.
pub fn make_coord_grid(
    dims: &[usize],
    k: usize,
    scale_s: f64,
    center: &[f64],
    spacing: f64,
) -> Result<Vec<f64>> {
    Ok(CoordGrid::new(dims, k, scale_s, center, spacing)?.coords())
}

/// I.i.d. uniform offset in `[lo, hi]` per axis.
pub fn sample_center_offset<R: Rng + ?Sized>(rng: &mut R, k: usize, shift_range: [f64; 2]) -> Vec<f64> {
    let [lo, hi] = shift_range;
    debug_assert!(lo <= hi, "shift range [{lo}, {hi}]");
    (0..k)
        .map(|_| if lo == hi { lo } else { rng.random_range(lo..=hi) })
        .collect()
}

/// The per-axis period parameter `a`, stored as `a = exp(rho)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodVector {
    rho: Vec<f64>,
    pub trainable: bool,
}

impl PeriodVector {
    pub fn from_a(a: &[f64], trainable: bool) -> Result<Self> {
        if let Some(bad) = a.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::config(format!("period parameter must be positive, got {bad}")));
        }
        Ok(Self {
            rho: a.iter().map(|v| v.ln()).collect(),
            trainable,
        })
    }

    pub fn from_rho(rho: &[f64], trainable: bool) -> Self {
        Self {
            rho: rho.to_vec(),
            trainable,
        }
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn a(&self) -> Vec<f64> {
        self.rho.iter().map(|r| r.exp()).collect()
    }

    /// Spatial period `2 / a` of the lowest encoding frequency, per axis.
    pub fn period(&self) -> Vec<f64> {
        self.a().iter().map(|a| 2.0 / a).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Highest dyadic exponent `i`: levels `2^0 ..= 2^i`.
    pub bandwidth: usize,
    pub k: usize,
}

impl EncoderConfig {
    pub fn out_dim(&self) -> usize {
        2 * (self.bandwidth + 1) * self.k
    }
}

#[inline]
fn reduced_phase(a: f64, c: f64) -> f64 {
    // sin/cos(2^l pi t) only depends on t mod 2 for l >= 0
    let t = a * c;
    t - 2.0 * (t * 0.5).floor()
}

fn check_encode_inputs(coords: &[f64], a: &[f64], cfg: &EncoderConfig) -> Result<()> {
    if a.len() != cfg.k {
        return Err(Error::config(format!("period has {} axes, encoder k = {}", a.len(), cfg.k)));
    }
    if cfg.k == 0 || !coords.len().is_multiple_of(cfg.k) {
        return Err(Error::config(format!(
            "coordinate buffer of {} values is not a multiple of k = {}",
            coords.len(),
            cfg.k
        )));
    }
    if let Some(v) = coords.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite coordinate {v}")));
    }
    if let Some(v) = a.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::Numeric(format!("period parameter {v} is not a positive finite value")));
    }
    Ok(())
}

/// Periodic encoding of `M x k` coordinates into `M x 2(i+1)k` features.
///
/// Channel order: for each level `l = 0..=i`, for each axis, `cos` then
/// `sin` of `2^l * pi * a_axis * c_axis`.
pub fn periodic_encode<T: Real>(coords: &[f64], a: &[f64], cfg: &EncoderConfig) -> Result<Vec<T>> {
    check_encode_inputs(coords, a, cfg)?;
    let mut out = Vec::with_capacity(coords.len() / cfg.k * cfg.out_dim());
    for point in coords.chunks_exact(cfg.k) {
        encode_point(point, a, cfg.bandwidth, &mut out);
    }
    Ok(out)
}

#[inline]
fn encode_point<T: Real>(point: &[f64], a: &[f64], bandwidth: usize, out: &mut Vec<T>) {
    let mut phases = [0.0f64; 3];
    for (j, (&c, &aj)) in point.iter().zip(a).enumerate() {
        phases[j] = reduced_phase(aj, c);
    }
    for l in 0..=bandwidth {
        let f = (1u64 << l) as f64 * PI;
        for &p in &phases[..point.len()] {
            let (s, c) = (f * p).sin_cos();
            out.push(T::of(c));
            out.push(T::of(s));
        }
    }
}

/// Vector-Jacobian product of [`periodic_encode`].
///
/// Returns `(d/dcoords, d/da)` for the upstream gradient `upstream`
/// (`M x out_dim`).
pub fn periodic_encode_vjp(
    coords: &[f64],
    a: &[f64],
    cfg: &EncoderConfig,
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_encode_inputs(coords, a, cfg)?;
    let e = cfg.out_dim();
    let m = coords.len() / cfg.k;
    if upstream.len() != m * e {
        return Err(Error::config(format!(
            "upstream gradient has {} values, expected {}",
            upstream.len(),
            m * e
        )));
    }
    let mut d_coords = vec![0.0; coords.len()];
    let mut d_a = vec![0.0; cfg.k];
    encode_vjp_accumulate(coords, a, cfg, |i| upstream[i], &mut d_coords, &mut d_a);
    Ok((d_coords, d_a))
}

fn encode_vjp_accumulate(
    coords: &[f64],
    a: &[f64],
    cfg: &EncoderConfig,
    upstream: impl Fn(usize) -> f64,
    d_coords: &mut [f64],
    d_a: &mut [f64],
) {
    let k = cfg.k;
    let e = cfg.out_dim();
    for (m, point) in coords.chunks_exact(k).enumerate() {
        let base = m * e;
        for l in 0..=cfg.bandwidth {
            let f = (1u64 << l) as f64 * PI;
            for j in 0..k {
                let p = reduced_phase(a[j], point[j]);
                let (s, c) = (f * p).sin_cos();
                let ch = base + (l * k + j) * 2;
                // d cos(f a c) = -sin * f * (a dc + c da), d sin = cos * (...)
                let dphase = -s * upstream(ch) + c * upstream(ch + 1);
                d_coords[m * k + j] += dphase * f * a[j];
                d_a[j] += dphase * f * point[j];
            }
        }
    }
}

/// Encoding as a graph operation whose single input is `rho` (`a = exp(rho)`).
#[derive(Debug)]
pub struct EncodeOp {
    coords: Arc<Vec<f64>>,
    cfg: EncoderConfig,
}

impl EncodeOp {
    pub fn new(coords: Arc<Vec<f64>>, cfg: EncoderConfig) -> Self {
        Self { coords, cfg }
    }
}

impl<T: Real> CustomOp<T> for EncodeOp {
    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let a: Vec<f64> = inputs[0].data().iter().map(|r| r.f64().exp()).collect();
        let m = self.coords.len() / self.cfg.k;
        let data = periodic_encode::<T>(&self.coords, &a, &self.cfg)
            .expect("encode op inputs validated at construction");
        Tensor::new(vec![m, self.cfg.out_dim()], data)
    }

    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let a: Vec<f64> = inputs[0].data().iter().map(|r| r.f64().exp()).collect();
        let mut d_coords = vec![0.0; self.coords.len()];
        let mut d_a = vec![0.0; self.cfg.k];
        let g = grad.data();
        encode_vjp_accumulate(&self.coords, &a, &self.cfg, |i| g[i].f64(), &mut d_coords, &mut d_a);
        // chain through a = exp(rho)
        let d_rho: Vec<T> = d_a.iter().zip(&a).map(|(d, a)| T::of(d * a)).collect();
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), d_rho))]
    }
}

/// Geometry of the discrete latent grid.
///
/// Corner `i` along `axis` sits at `(i - (G - 1) / 2) * cell_size(axis)`,
/// with `cell_size = spacing * axis_scale * extent_scale`. The grid is
/// toroidal: indices wrap modulo `G`, so the field is defined everywhere
/// and is periodic with period `G * cell_size`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub shape: Vec<usize>,
    pub dim: usize,
    /// Unscaled corner spacing.
    pub spacing: f64,
    /// Interpolation sharpness, in unscaled grid units.
    pub sigma: f64,
    pub axis_scale: Vec<f64>,
    pub extent_scale: f64,
}

/// Enclosing corners of one point and their interpolation weights.
#[derive(Clone, Copy, Debug)]
pub struct Corners {
    pub count: usize,
    pub cells: [usize; 8],
    pub weights: [f64; 8],
}

impl LatentGrid {
    pub fn new(shape: &[usize], dim: usize, spacing: f64, sigma: f64) -> Result<Self> {
        let g = Self {
            shape: shape.to_vec(),
            dim,
            spacing,
            sigma,
            axis_scale: vec![1.0; shape.len()],
            extent_scale: 1.0,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.shape.len();
        if !(1..=3).contains(&k) {
            return Err(Error::config(format!("latent grid must be 1-3 dimensional, got {k}")));
        }
        if self.shape.contains(&0) || self.dim == 0 {
            return Err(Error::config("latent grid and latent dim must be non-empty"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!("latent sigma must be positive, got {}", self.sigma)));
        }
        if !(self.spacing > 0.0) || !(self.extent_scale > 0.0) || self.axis_scale.len() != k {
            return Err(Error::config("latent grid spacing and scales must be positive"));
        }
        if self.axis_scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::config("latent axis scales must be positive"));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.shape.len()
    }

    pub fn cells(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn value_len(&self) -> usize {
        self.cells() * self.dim
    }

    pub fn cell_size(&self, axis: usize) -> f64 {
        self.spacing * self.axis_scale[axis] * self.extent_scale
    }

    /// Corner coordinates along one axis.
    pub fn positions(&self, axis: usize) -> Vec<f64> {
        let g = self.shape[axis];
        let h = self.cell_size(axis);
        (0..g).map(|i| (i as f64 - (g as f64 - 1.0) / 2.0) * h).collect()
    }

    /// Wrap period of the field along one axis.
    pub fn period(&self, axis: usize) -> f64 {
        self.shape[axis] as f64 * self.cell_size(axis)
    }

    /// Cell-local fractional coordinates and base corner index per axis.
    #[inline]
    fn locate(&self, x: &[f64]) -> ([f64; 3], [usize; 3]) {
        let mut t = [0.0; 3];
        let mut base = [0usize; 3];
        for j in 0..self.k() {
            let g = self.shape[j];
            let u = x[j] / self.cell_size(j) + (g as f64 - 1.0) / 2.0;
            let f = u.floor();
            t[j] = u - f;
            base[j] = (f as i64).rem_euclid(g as i64) as usize;
        }
        (t, base)
    }

    #[inline]
    fn corner_cell(&self, base: &[usize; 3], bits: usize) -> usize {
        let mut flat = 0usize;
        for j in 0..self.k() {
            let g = self.shape[j];
            let b = (bits >> (self.k() - 1 - j)) & 1;
            flat = flat * g + (base[j] + b) % g;
        }
        flat
    }

    /// Softmax over negative scaled distances to the `2^k` enclosing corners.
    pub fn corners(&self, x: &[f64]) -> Corners {
        let k = self.k();
        let count = 1usize << k;
        let (t, base) = self.locate(x);
        let mut cells = [0usize; 8];
        let mut scores = [0.0f64; 8];
        let scale = self.spacing / self.sigma;
        for bits in 0..count {
            let mut d2 = 0.0;
            for j in 0..k {
                let b = ((bits >> (k - 1 - j)) & 1) as f64;
                d2 += (t[j] - b) * (t[j] - b);
            }
            scores[bits] = -d2.sqrt() * scale;
            cells[bits] = self.corner_cell(&base, bits);
        }
        let max = scores[..count].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut weights = [0.0f64; 8];
        let mut z = 0.0;
        for bits in 0..count {
            weights[bits] = (scores[bits] - max).exp();
            z += weights[bits];
        }
        for w in &mut weights[..count] {
            *w /= z;
        }
        Corners { count, cells, weights }
    }

    /// Interpolated latent vectors for `M x k` coordinates.
    pub fn eval_into<T: Real>(&self, values: &[T], coords: &[f64], out: &mut [T]) {
        let k = self.k();
        let d = self.dim;
        debug_assert_eq!(values.len(), self.value_len());
        debug_assert_eq!(out.len(), coords.len() / k * d);
        for (point, dst) in coords.chunks_exact(k).zip(out.chunks_exact_mut(d)) {
            let c = self.corners(point);
            interpolate(&c, values, d, dst);
        }
    }

    /// `(d/dvalues, d/dcoords)` of the interpolation for upstream `M x d`.
    pub fn vjp(&self, values: &[f64], coords: &[f64], upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let k = self.k();
        let d = self.dim;
        let count = 1usize << k;
        let scale = self.spacing / self.sigma;
        let mut d_values = vec![0.0; values.len()];
        let mut d_coords = vec![0.0; coords.len()];
        for (m, point) in coords.chunks_exact(k).enumerate() {
            let up = &upstream[m * d..(m + 1) * d];
            let c = self.corners(point);
            let (t, _) = self.locate(point);
            // ds_b/dx_j for each corner
            let mut ds = [[0.0f64; 3]; 8];
            let mut uv = [0.0f64; 8];
            for bits in 0..count {
                let mut diff = [0.0f64; 3];
                let mut d2 = 0.0;
                for j in 0..k {
                    let b = ((bits >> (k - 1 - j)) & 1) as f64;
                    diff[j] = t[j] - b;
                    d2 += diff[j] * diff[j];
                }
                let dist = d2.sqrt();
                if dist > 0.0 {
                    for j in 0..k {
                        ds[bits][j] = scale * diff[j] / dist / self.cell_size(j);
                    }
                }
                let cell = c.cells[bits];
                let v = &values[cell * d..(cell + 1) * d];
                uv[bits] = up.iter().zip(v).map(|(a, b)| a * b).sum();
                for (dv, u) in d_values[cell * d..(cell + 1) * d].iter_mut().zip(up) {
                    *dv += c.weights[bits] * u;
                }
            }
            let mean_uv: f64 = (0..count).map(|b| c.weights[b] * uv[b]).sum();
            for j in 0..k {
                let mean_ds: f64 = (0..count).map(|b| c.weights[b] * ds[b][j]).sum();
                let mut acc = 0.0;
                for b in 0..count {
                    acc -= c.weights[b] * uv[b] * ds[b][j];
                }
                d_coords[m * k + j] = acc + mean_uv * mean_ds;
            }
        }
        (d_values, d_coords)
    }
}

#[inline]
fn interpolate<T: Real>(c: &Corners, values: &[T], d: usize, dst: &mut [T]) {
    for o in dst.iter_mut() {
        *o = T::zero();
    }
    for b in 0..c.count {
        let w = T::of(c.weights[b]);
        let v = &values[c.cells[b] * d..(c.cells[b] + 1) * d];
        for (o, &x) in dst.iter_mut().zip(v) {
            *o += w * x;
        }
    }
}

/// A latent grid together with one realisation of its corner vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFieldSpec {
    pub grid: LatentGrid,
    /// `cells x dim`, row-major over the grid shape.
    pub values: Vec<f64>,
}

impl LatentFieldSpec {
    pub fn new(grid: LatentGrid, values: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.value_len() {
            return Err(Error::config(format!(
                "latent grid expects {} values, got {}",
                grid.value_len(),
                values.len()
            )));
        }
        Ok(Self { grid, values })
    }
}

/// Evaluate the interpolated latent field at `M x k` coordinates.
pub fn latent_field_eval(spec: &LatentFieldSpec, coords: &[f64]) -> Result<Vec<f64>> {
    spec.grid.validate()?;
    let k = spec.grid.k();
    if !coords.len().is_multiple_of(k) {
        return Err(Error::config("coordinate buffer is not a multiple of k"));
    }
    if coords.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite coordinate in latent field lookup".into()));
    }
    let mut out = vec![0.0; coords.len() / k * spec.grid.dim];
    spec.grid.eval_into(&spec.values, coords, &mut out);
    Ok(out)
}

/// Rescale the grid so one latent cell spans one encoding period `2 / a`.
pub fn scale_latent_grid(spec: &LatentFieldSpec, period: &PeriodVector) -> LatentFieldSpec {
    let mut out = spec.clone();
    out.grid.axis_scale = scale_for_period(&spec.grid, period);
    out
}

pub(crate) fn scale_for_period(grid: &LatentGrid, period: &PeriodVector) -> Vec<f64> {
    period.period().iter().map(|p| p / grid.spacing).collect()
}

/// Latent interpolation as a graph operation.
///
/// Input: corner values `[S, cells * dim]`, one row per grid realisation.
/// Points are grouped by realisation: point `m` uses row
/// `m / points_per_sample` (or row 0 when `S == 1`).
#[derive(Debug)]
pub struct LatentOp {
    grid: LatentGrid,
    corners: Vec<Corners>,
    points_per_sample: usize,
}

impl LatentOp {
    pub fn new(grid: LatentGrid, coords: &[f64], points_per_sample: usize) -> Self {
        let corners = coords.chunks_exact(grid.k()).map(|p| grid.corners(p)).collect();
        Self {
            grid,
            corners,
            points_per_sample: points_per_sample.max(1),
        }
    }

    fn row_of(&self, m: usize, rows: usize) -> usize {
        if rows == 1 {
            0
        } else {
            m / self.points_per_sample
        }
    }
}

impl<T: Real> CustomOp<T> for LatentOp {
    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let values = inputs[0];
        let rows = values.shape()[0];
        let vl = self.grid.value_len();
        let d = self.grid.dim;
        let mut out = vec![T::zero(); self.corners.len() * d];
        for (m, (c, dst)) in self.corners.iter().zip(out.chunks_exact_mut(d)).enumerate() {
            let r = self.row_of(m, rows);
            interpolate(c, &values.data()[r * vl..(r + 1) * vl], d, dst);
        }
        Tensor::new(vec![self.corners.len(), d], out)
    }

    fn vjp(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let values = inputs[0];
        let rows = values.shape()[0];
        let vl = self.grid.value_len();
        let d = self.grid.dim;
        let mut dv = vec![T::zero(); values.len()];
        let g = grad.data();
        for (m, c) in self.corners.iter().enumerate() {
            let r = self.row_of(m, rows);
            let up = &g[m * d..(m + 1) * d];
            for b in 0..c.count {
                let w = T::of(c.weights[b]);
                let off = r * vl + c.cells[b] * d;
                for (x, &u) in dv[off..off + d].iter_mut().zip(up) {
                    *x += w * u;
                }
            }
        }
        vec![Some(Tensor::new(values.shape().to_vec(), dv))]
    }
}
