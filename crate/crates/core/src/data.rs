//! Exemplar ingestion (PNG images, layered PNG stacks, IPFVOL volumes),
//! cropping, and guidance values for conditional training.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemplarKind {
    Image2d,
    Sdf3d,
}

impl ExemplarKind {
    pub fn k(self) -> usize {
        match self {
            ExemplarKind::Image2d => 2,
            ExemplarKind::Sdf3d => 3,
        }
    }
}

/// Affine map between stored values and the generator's `(0, 1)` range.
///
/// `unit = (value - offset) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueMap {
    pub offset: f64,
    pub scale: f64,
}

impl ValueMap {
    pub const IDENTITY: ValueMap = ValueMap { offset: 0.0, scale: 1.0 };

    /// Symmetric map sending `[-t, t]` to `[0, 1]`, `t = max |v|`.
    pub fn symmetric(values: &[f32]) -> Self {
        let t = values.iter().fold(0.0f64, |m, v| m.max((*v as f64).abs()));
        let t = if t > 0.0 { t } else { 1.0 };
        ValueMap {
            offset: -t,
            scale: 2.0 * t,
        }
    }

    #[inline]
    pub fn to_unit(&self, v: f64) -> f64 {
        (v - self.offset) / self.scale
    }

    #[inline]
    pub fn from_unit(&self, u: f64) -> f64 {
        self.offset + self.scale * u
    }
}

/// A 2D image or 3D signed-distance grid.
///
/// Values are row-major over `dims` with channels innermost. Image values
/// lie in `[0, 1]`; SDF values are raw distances.
#[derive(Clone, Debug, PartialEq)]
pub struct Exemplar {
    pub kind: ExemplarKind,
    pub dims: Vec<usize>,
    pub channels: usize,
    pub values: Vec<f32>,
    pub labels: Vec<String>,
}

impl Exemplar {
    pub fn image(dims: [usize; 2], channels: usize, values: Vec<f32>) -> Result<Self> {
        check_len(&dims, channels, values.len())?;
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::format(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self {
            kind: ExemplarKind::Image2d,
            dims: dims.to_vec(),
            channels,
            values,
            labels: default_labels(channels),
        })
    }

    pub fn sdf(dims: [usize; 3], values: Vec<f32>) -> Result<Self> {
        check_len(&dims, 1, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("SDF volume contains non-finite values"));
        }
        Ok(Self {
            kind: ExemplarKind::Sdf3d,
            dims: dims.to_vec(),
            channels: 1,
            values,
            labels: vec!["sdf".into()],
        })
    }

    pub fn k(&self) -> usize {
        self.dims.len()
    }

    pub fn positions(&self) -> usize {
        self.dims.iter().product()
    }

    /// Map used to bring values into the generator's output range.
    pub fn value_map(&self) -> ValueMap {
        match self.kind {
            ExemplarKind::Image2d => ValueMap::IDENTITY,
            ExemplarKind::Sdf3d => ValueMap::symmetric(&self.values),
        }
    }

    /// Copy out the axis-aligned block at `origin` of extent `size`.
    pub fn crop(&self, origin: &[usize], size: &[usize]) -> Result<Vec<f32>> {
        if origin.len() != self.k() || size.len() != self.k() {
            return Err(Error::config("crop rank does not match the exemplar"));
        }
        for j in 0..self.k() {
            if origin[j] + size[j] > self.dims[j] {
                return Err(Error::config(format!(
                    "crop {size:?} at {origin:?} exceeds exemplar dims {:?}",
                    self.dims
                )));
            }
        }
        let c = self.channels;
        let n: usize = size.iter().product();
        let mut out = Vec::with_capacity(n * c);
        let row = size[self.k() - 1] * c;
        let mut idx = vec![0usize; self.k() - 1];
        let outer: usize = size[..self.k() - 1].iter().product();
        for _ in 0..outer {
            let mut flat = 0usize;
            for j in 0..self.k() - 1 {
                flat = flat * self.dims[j] + origin[j] + idx[j];
            }
            let start = (flat * self.dims[self.k() - 1] + origin[self.k() - 1]) * c;
            out.extend_from_slice(&self.values[start..start + row]);
            for j in (0..self.k() - 1).rev() {
                idx[j] += 1;
                if idx[j] < size[j] {
                    break;
                }
                idx[j] = 0;
            }
        }
        Ok(out)
    }
}

fn check_len(dims: &[usize], channels: usize, len: usize) -> Result<()> {
    let n = dims.iter().product::<usize>() * channels;
    if dims.contains(&0) || channels == 0 {
        return Err(Error::format(format!("empty exemplar dims {dims:?} x {channels}")));
    }
    if n != len {
        return Err(Error::format(format!(
            "exemplar dims {dims:?} x {channels} need {n} values, got {len}"
        )));
    }
    Ok(())
}

fn default_labels(channels: usize) -> Vec<String> {
    match channels {
        1 => vec!["gray".into()],
        3 => ["r", "g", "b"].map(String::from).to_vec(),
        4 => ["r", "g", "b", "a"].map(String::from).to_vec(),
        n => (0..n).map(|i| format!("c{i}")).collect(),
    }
}

/// Load an exemplar by file extension: `.png`, `.json` (layer manifest) or `.ipfvol`.
pub fn load_exemplar(path: &Path) -> Result<Exemplar> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => load_image_exemplar(path),
        Some("json") => load_image_stack(path),
        Some("ipfvol") => load_volume_exemplar(path),
        _ => Err(Error::Usage(format!(
            "unrecognised exemplar type for {} (expected .png, .json or .ipfvol)",
            path.display()
        ))),
    }
}

/// Decoded PNG, values scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PngImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub values: Vec<f32>,
}

pub fn read_png(path: &Path) -> Result<PngImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let bad = |e: png::DecodingError| match e {
        png::DecodingError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, other)),
    };
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let channels = info.color_type.samples();
    let (w, h) = (info.width as usize, info.height as usize);
    let n = w * h * channels;
    let values = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..2 * n]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 65535.0)
            .collect(),
        png::BitDepth::Eight => buf[..n].iter().map(|&b| b as f32 / 255.0).collect(),
        depth => {
            return Err(Error::format(format!(
                "{}: unexpected bit depth {depth:?} after expansion",
                path.display()
            )))
        }
    };
    Ok(PngImage {
        width: w,
        height: h,
        channels,
        values,
    })
}

/// Write values in `[0, 1]` as an 8-bit PNG with 1-4 channels.
pub fn write_png(path: &Path, width: usize, height: usize, channels: usize, values: &[f32]) -> Result<()> {
    let bytes = encode_png(width, height, channels, values)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Encode to PNG bytes in memory.
pub fn encode_png(width: usize, height: usize, channels: usize, values: &[f32]) -> Result<Vec<u8>> {
    let color = match channels {
        1 => png::ColorType::Grayscale,
        2 => png::ColorType::GrayscaleAlpha,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        n => return Err(Error::config(format!("cannot store {n} channels in one PNG"))),
    };
    if values.len() != width * height * channels {
        return Err(Error::config("PNG buffer size does not match dims"));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let to_io = |e: png::EncodingError| Error::format(format!("PNG encoding failed: {e}"));
        let mut writer = enc.write_header().map_err(to_io)?;
        let bytes: Vec<u8> = values.iter().map(|&v| quantize(v)).collect();
        writer.write_image_data(&bytes).map_err(to_io)?;
        writer.finish().map_err(to_io)?;
    }
    Ok(out)
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_image_exemplar(path: &Path) -> Result<Exemplar> {
    let img = read_png(path)?;
    Exemplar::image([img.height, img.width], img.channels, img.values)
}

/// Layered image stack: a JSON manifest naming one PNG per role.
///
/// ```json
/// {"layers": [{"role": "color", "file": "color.png"}, {"role": "normal", "file": "normal.png"}]}
/// ```
/// Paths are relative to the manifest. Channels are concatenated in layer order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackManifest {
    pub layers: Vec<StackLayer>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackLayer {
    pub role: String,
    pub file: PathBuf,
}

pub fn load_image_stack(manifest_path: &Path) -> Result<Exemplar> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: StackManifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.layers.is_empty() {
        return Err(Error::format(format!("{}: manifest lists no layers", manifest_path.display())));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let images = manifest
        .layers
        .iter()
        .map(|l| read_png(&base.join(&l.file)))
        .collect::<Result<Vec<_>>>()?;
    let (w, h) = (images[0].width, images[0].height);
    if images.iter().any(|i| i.width != w || i.height != h) {
        return Err(Error::format(format!("{}: layer sizes differ", manifest_path.display())));
    }
    let channels: usize = images.iter().map(|i| i.channels).sum();
    let mut values = Vec::with_capacity(w * h * channels);
    let mut labels = Vec::with_capacity(channels);
    for (layer, img) in manifest.layers.iter().zip(&images) {
        for c in 0..img.channels {
            labels.push(format!("{}.{c}", layer.role));
        }
    }
    for p in 0..w * h {
        for img in &images {
            values.extend_from_slice(&img.values[p * img.channels..(p + 1) * img.channels]);
        }
    }
    let mut ex = Exemplar::image([h, w], channels, values)?;
    ex.labels = labels;
    Ok(ex)
}

/// Write a multi-channel image as 3-channel PNG layers plus a manifest.
pub fn write_image_stack(manifest_path: &Path, width: usize, height: usize, channels: usize, values: &[f32]) -> Result<()> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let stem = manifest_path.file_stem().and_then(|s| s.to_str()).unwrap_or("stack");
    let mut layers = Vec::new();
    let mut start = 0;
    while start < channels {
        let n = (channels - start).min(3);
        let mut buf = Vec::with_capacity(width * height * n);
        for p in 0..width * height {
            buf.extend_from_slice(&values[p * channels + start..p * channels + start + n]);
        }
        let file = PathBuf::from(format!("{stem}.layer{}.png", layers.len()));
        write_png(&base.join(&file), width, height, n, &buf)?;
        layers.push(StackLayer {
            role: format!("layer{}", layers.len()),
            file,
        });
        start += n;
    }
    let text = serde_json::to_string_pretty(&StackManifest { layers }).expect("manifest serializes");
    std::fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))
}

pub const IPFVOL_MAGIC: &[u8; 8] = b"IPFVOL1\0";

/// Raw IPFVOL payload.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub channels: usize,
    pub values: Vec<f32>,
}

pub fn encode_ipfvol(vol: &Volume) -> Result<Vec<u8>> {
    let n = vol.dims.iter().product::<usize>() * vol.channels;
    if vol.values.len() != n {
        return Err(Error::config("volume buffer size does not match dims"));
    }
    let mut out = Vec::with_capacity(24 + 4 * n);
    out.extend_from_slice(IPFVOL_MAGIC);
    for d in vol.dims {
        out.extend_from_slice(&u32::try_from(d).map_err(|_| Error::config("volume too large"))?.to_le_bytes());
    }
    out.extend_from_slice(&(vol.channels as u32).to_le_bytes());
    for v in &vol.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_ipfvol(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 24 {
        return Err(Error::format("IPFVOL header truncated"));
    }
    if &bytes[..8] != IPFVOL_MAGIC {
        return Err(Error::format("not an IPFVOL file (bad magic or version)"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let dims = [word(0), word(1), word(2)];
    let channels = word(3);
    let n = dims
        .iter()
        .try_fold(channels, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("IPFVOL dims overflow"))?;
    let payload = &bytes[24..];
    if payload.len() != n * 4 {
        return Err(Error::format(format!(
            "IPFVOL payload has {} bytes, header promises {}",
            payload.len(),
            n * 4
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Volume { dims, channels, values })
}

pub fn write_ipfvol(path: &Path, vol: &Volume) -> Result<()> {
    let bytes = encode_ipfvol(vol)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_ipfvol(path: &Path) -> Result<Volume> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_ipfvol(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn load_volume_exemplar(path: &Path) -> Result<Exemplar> {
    let vol = read_ipfvol(path)?;
    if vol.channels != 1 {
        return Err(Error::format(format!(
            "{}: SDF exemplar must have 1 channel, found {}",
            path.display(),
            vol.channels
        )));
    }
    Exemplar::sdf(vol.dims, vol.values)
}

/// `(2 p_x / w - 1, 2 p_y / h - 1)`.
pub fn normalize_pixel_coords(p: (f64, f64), w: f64, h: f64) -> (f64, f64) {
    (2.0 * p.0 / w - 1.0, 2.0 * p.1 / h - 1.0)
}

/// Implicit line `a x + b y + c = 0` in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Line {
    /// `y = 0`
    pub const HORIZONTAL: Line = Line { a: 0.0, b: 1.0, c: 0.0 };
    /// `x = 0`
    pub const VERTICAL: Line = Line { a: 1.0, b: 0.0, c: 0.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.b.is_finite() && self.c.is_finite()) {
            return Err(Error::config("line coefficients must be finite"));
        }
        if self.a == 0.0 && self.b == 0.0 {
            return Err(Error::config("degenerate guidance line: a and b are both zero"));
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.a * x + self.b * y + self.c
    }
}

/// Guidance for a crop centred at pixel `center = (p_x, p_y)` of a `w x h` image.
pub fn directional_guidance(center: (f64, f64), dims: (f64, f64), line: &Line) -> Result<f64> {
    line.validate()?;
    let (x, y) = normalize_pixel_coords(center, dims.0, dims.1);
    Ok(line.eval(x, y))
}

/// `(1/m) * sum |sdf|` over the patch.
pub fn density_guidance(sdf_patch: &[f32], m: f64) -> f64 {
    sdf_patch.iter().map(|v| (*v as f64).abs()).sum::<f64>() / m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_normalization_corners() {
        assert_eq!(normalize_pixel_coords((0.0, 0.0), 64.0, 32.0), (-1.0, -1.0));
        assert_eq!(normalize_pixel_coords((64.0, 32.0), 64.0, 32.0), (1.0, 1.0));
        assert_eq!(normalize_pixel_coords((32.0, 16.0), 64.0, 32.0), (0.0, 0.0));
    }

    #[test]
    fn directional_presets() {
        let dims = (100.0, 80.0);
        assert_eq!(directional_guidance((13.0, 40.0), dims, &Line::HORIZONTAL).unwrap(), 0.0);
        assert_eq!(directional_guidance((13.0, 80.0), dims, &Line::HORIZONTAL).unwrap(), 1.0);
        assert_eq!(directional_guidance((0.0, 5.0), dims, &Line::VERTICAL).unwrap(), -1.0);
        let line = Line { a: 0.3, b: -0.2, c: 0.7 };
        assert_eq!(directional_guidance((50.0, 40.0), dims, &line).unwrap(), 0.7);
        let flat = Line { a: 0.0, b: 0.0, c: 1.0 };
        assert!(matches!(directional_guidance((0.0, 0.0), dims, &flat), Err(Error::Config(_))));
    }

    #[test]
    fn density_examples() {
        assert_eq!(density_guidance(&[0.0; 27], 27.0), 0.0);
        let v = vec![-0.25f32, 0.25, 0.25, -0.25, 0.25, 0.25, -0.25, 0.25];
        assert!((density_guidance(&v, 8.0) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn crop_extracts_block() {
        let values: Vec<f32> = (0..4 * 5 * 2).map(|v| v as f32 / 40.0).collect();
        let ex = Exemplar::image([4, 5], 2, values.clone()).unwrap();
        let c = ex.crop(&[1, 2], &[2, 3]).unwrap();
        let mut expect = Vec::new();
        for r in 1..3 {
            for col in 2..5 {
                expect.extend_from_slice(&values[(r * 5 + col) * 2..(r * 5 + col) * 2 + 2]);
            }
        }
        assert_eq!(c, expect);
        assert_eq!(ex.crop(&[0, 0], &[4, 5]).unwrap(), values);
        assert!(matches!(ex.crop(&[3, 0], &[2, 5]), Err(Error::Config(_))));
    }

    #[test]
    fn crop_3d() {
        let values: Vec<f32> = (0..3 * 4 * 5).map(|v| v as f32).collect();
        let ex = Exemplar::sdf([3, 4, 5], values).unwrap();
        let c = ex.crop(&[1, 1, 2], &[2, 2, 2]).unwrap();
        let at = |i: usize, j: usize, k: usize| ((i * 4 + j) * 5 + k) as f32;
        assert_eq!(
            c,
            vec![at(1, 1, 2), at(1, 1, 3), at(1, 2, 2), at(1, 2, 3), at(2, 1, 2), at(2, 1, 3), at(2, 2, 2), at(2, 2, 3)]
        );
    }

    #[test]
    fn ipfvol_rejects_truncation_and_bad_magic() {
        let vol = Volume {
            dims: [2, 2, 2],
            channels: 1,
            values: vec![0.5; 8],
        };
        let bytes = encode_ipfvol(&vol).unwrap();
        assert_eq!(decode_ipfvol(&bytes).unwrap(), vol);
        assert!(matches!(decode_ipfvol(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[6] = b'2';
        assert!(matches!(decode_ipfvol(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn sdf_value_map_round_trip() {
        let m = ValueMap::symmetric(&[-2.0, 0.5, 1.0]);
        assert_eq!(m.to_unit(-2.0), 0.0);
        assert_eq!(m.to_unit(2.0), 1.0);
        assert!((m.from_unit(m.to_unit(0.5)) - 0.5).abs() < 1e-15);
    }
}
