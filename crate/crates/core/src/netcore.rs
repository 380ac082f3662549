//! Generator MLP, strided convolutional critic and their parameter containers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul, ConvGeometry, Graph, Real, Tensor, Var};
use crate::{Error, Result};

/// Named, ordered set of parameter tensors for one network.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamVector<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamVector<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.push((name.into(), value));
    }

    /// Number of named tensors.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_values());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::config(format!(
                "flat parameter vector has {} values, expected {}",
                flat.len(),
                self.num_values()
            )));
        }
        let mut off = 0;
        for (_, t) in &mut self.entries {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamVector<U> {
        ParamVector {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| {
                    let data = t.data().iter().map(|v| U::of(v.f64())).collect();
                    (n.clone(), Tensor::new(t.shape().to_vec(), data))
                })
                .collect(),
        }
    }

    /// Register every tensor on `g`, as params or constants.
    pub fn vars(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    /// Same names and shapes in the same order.
    pub fn same_layout<U: Real>(&self, other: &ParamVector<U>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }
}

fn uniform_tensor<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub encoded_dim: usize,
    pub latent_dim: usize,
    pub guidance_dim: usize,
    pub hidden: usize,
    /// Number of affine layers.
    pub layers: usize,
    pub out_channels: usize,
}

impl GeneratorArch {
    pub fn in_dim(&self) -> usize {
        self.encoded_dim + self.latent_dim + self.guidance_dim
    }

    /// Layer widths from input to output, `layers + 1` entries.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.in_dim()];
        w.extend(std::iter::repeat_n(self.hidden, self.layers.saturating_sub(1)));
        w.push(self.out_channels);
        w
    }

    pub fn num_params(&self) -> usize {
        self.widths().windows(2).map(|p| p[1] * p[0] + p[1]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.out_channels == 0 || self.in_dim() == 0 {
            return Err(Error::config(format!("invalid generator architecture {self:?}")));
        }
        Ok(())
    }
}

/// Pointwise MLP: affine layers with ReLU in between and a sigmoid head.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub arch: GeneratorArch,
    pub params: ParamVector<T>,
}

impl<T: Real> Generator<T> {
    /// Kaiming-uniform weights (fan-in, ReLU gain), zero biases.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, arch: GeneratorArch) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamVector::new();
        for (l, pair) in arch.widths().windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            params.push(format!("gen.{l}.w"), uniform_tensor(rng, vec![fan_out, fan_in], bound));
            params.push(format!("gen.{l}.b"), Tensor::zeros(vec![fan_out]));
        }
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: GeneratorArch, params: ParamVector<T>) -> Result<Self> {
        arch.validate()?;
        let mut expect = ParamVector::<T>::new();
        for (l, pair) in arch.widths().windows(2).enumerate() {
            expect.push(format!("gen.{l}.w"), Tensor::zeros(vec![pair[1], pair[0]]));
            expect.push(format!("gen.{l}.b"), Tensor::zeros(vec![pair[1]]));
        }
        if !expect.same_layout(&params) {
            return Err(Error::config("generator parameters do not match the architecture"));
        }
        Ok(Self { arch, params })
    }

    /// Forward on a graph. `input` is `[M, in_dim]`, `vars` from [`ParamVector::vars`].
    pub fn forward_graph(&self, g: &mut Graph<T>, vars: &[Var], input: Var) -> Var {
        let mut h = input;
        let n = self.arch.layers;
        for l in 0..n {
            h = g.linear(h, vars[2 * l], vars[2 * l + 1]);
            h = if l + 1 < n { g.relu(h) } else { g.sigmoid(h) };
        }
        h
    }

    /// Plain forward over `rows x in_dim` input rows, reusing layer buffers.
    pub fn forward(&self, input: &[T], rows: usize) -> Result<Vec<T>> {
        let in_dim = self.arch.in_dim();
        if input.len() != rows * in_dim {
            return Err(Error::config(format!(
                "generator input has {} values, expected {rows} x {in_dim}",
                input.len()
            )));
        }
        if rows == 0 {
            return Ok(Vec::new());
        }
        let widths = self.arch.widths();
        let tensors: Vec<&Tensor<T>> = self.params.tensors().collect();
        let mut h = input.to_vec();
        for l in 0..self.arch.layers {
            let (w, b) = (tensors[2 * l], tensors[2 * l + 1]);
            let (mut out, _, n) = matmul(&h, (rows, widths[l]), false, w.data(), w.dims2(), true);
            let last = l + 1 == self.arch.layers;
            for row in out.chunks_exact_mut(n) {
                for (o, &bb) in row.iter_mut().zip(b.data()) {
                    let v = *o + bb;
                    *o = if last {
                        crate::autodiff::sigmoid(v)
                    } else if v > T::zero() {
                        v
                    } else {
                        T::zero()
                    };
                }
            }
            h = out;
        }
        Ok(h)
    }

    /// Concatenates `[encoded | latents | guidance]` row-wise and runs [`forward`](Self::forward).
    pub fn forward_parts(&self, encoded: &[T], latents: &[T], guidance: Option<&[T]>) -> Result<Vec<T>> {
        let a = &self.arch;
        if a.encoded_dim == 0 || !encoded.len().is_multiple_of(a.encoded_dim) {
            return Err(Error::config("encoded input width does not match the generator"));
        }
        let rows = encoded.len() / a.encoded_dim;
        if latents.len() != rows * a.latent_dim {
            return Err(Error::config(format!(
                "latent input has {} values, expected {rows} x {}",
                latents.len(),
                a.latent_dim
            )));
        }
        let g_len = guidance.map_or(0, |g| g.len());
        if g_len != rows * a.guidance_dim {
            return Err(Error::config(format!(
                "guidance input has {g_len} values, expected {rows} x {}",
                a.guidance_dim
            )));
        }
        let mut input = Vec::with_capacity(rows * a.in_dim());
        for r in 0..rows {
            input.extend_from_slice(&encoded[r * a.encoded_dim..(r + 1) * a.encoded_dim]);
            input.extend_from_slice(&latents[r * a.latent_dim..(r + 1) * a.latent_dim]);
            if let Some(g) = guidance {
                input.extend_from_slice(&g[r * a.guidance_dim..(r + 1) * a.guidance_dim]);
            }
        }
        self.forward(&input, rows)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticArch {
    /// Spatial patch size; its length selects 2D or 3D convolutions.
    pub patch: Vec<usize>,
    pub in_channels: usize,
    /// Extra broadcast input channels carrying the guidance value.
    pub guidance_channels: usize,
    pub base_width: usize,
    pub max_width: usize,
    pub conv_layers: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub slope: f64,
}

impl CriticArch {
    /// DCGAN-style defaults for a patch: kernel 4, stride 2, halve until the
    /// feature map is at most 4 wide (between 1 and 5 conv layers).
    pub fn for_patch(patch: &[usize], in_channels: usize, guidance_channels: usize, base_width: usize) -> Self {
        let mut layers = 0;
        let mut s = patch.iter().copied().min().unwrap_or(1);
        while s > 4 && layers < 5 {
            s /= 2;
            layers += 1;
        }
        Self {
            patch: patch.to_vec(),
            in_channels,
            guidance_channels,
            base_width,
            max_width: 512,
            conv_layers: layers.max(1),
            kernel: 4,
            stride: 2,
            pad: 1,
            slope: 0.2,
        }
    }

    pub fn k(&self) -> usize {
        self.patch.len()
    }

    pub fn input_channels(&self) -> usize {
        self.in_channels + self.guidance_channels
    }

    pub fn patch_positions(&self) -> usize {
        self.patch.iter().product()
    }

    pub fn widths(&self) -> Vec<usize> {
        (0..self.conv_layers)
            .map(|l| (self.base_width << l).min(self.max_width))
            .collect()
    }

    /// Convolution geometries for a batch, one per layer.
    pub fn geometries(&self, batch: usize) -> Result<Vec<ConvGeometry>> {
        let mut spatial = self.patch.clone();
        let mut ch = self.input_channels();
        let mut out = Vec::with_capacity(self.conv_layers);
        for w in self.widths() {
            let geom = ConvGeometry::new(batch, &spatial, ch, self.kernel, self.stride, self.pad)
                .filter(|g| g.out_spatial.iter().all(|&s| s > 0))
                .ok_or_else(|| {
                    Error::config(format!("critic patch {:?} too small for {} layers", self.patch, self.conv_layers))
                })?;
            spatial = geom.out_spatial.clone();
            ch = w;
            out.push(geom);
        }
        Ok(out)
    }

    /// Width of the flattened final feature map fed to the scoring layer.
    pub fn head_in(&self) -> Result<usize> {
        let geoms = self.geometries(1)?;
        let last = geoms.last().expect("at least one conv layer");
        Ok(last.out_positions() * self.widths()[self.conv_layers - 1])
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.k()) || self.conv_layers == 0 || self.base_width == 0 || self.in_channels == 0 {
            return Err(Error::config(format!("invalid critic architecture {self:?}")));
        }
        self.head_in().map(|_| ())
    }

    pub fn num_params(&self) -> Result<usize> {
        let geoms = self.geometries(1)?;
        let conv: usize = geoms
            .iter()
            .zip(self.widths())
            .map(|(g, w)| w * g.cols() + w)
            .sum();
        Ok(conv + self.head_in()? + 1)
    }
}

/// Strided convolutional critic with an unbounded scalar score.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic<T> {
    pub arch: CriticArch,
    pub params: ParamVector<T>,
}

impl<T: Real> Critic<T> {
    fn layout(arch: &CriticArch) -> Result<Vec<(String, Vec<usize>)>> {
        let geoms = arch.geometries(1)?;
        let mut out = Vec::new();
        for (l, (g, w)) in geoms.iter().zip(arch.widths()).enumerate() {
            out.push((format!("critic.{l}.w"), vec![w, g.cols()]));
            out.push((format!("critic.{l}.b"), vec![w]));
        }
        out.push(("critic.head.w".into(), vec![1, arch.head_in()?]));
        out.push(("critic.head.b".into(), vec![1]));
        Ok(out)
    }

    /// Kaiming-uniform weights with leaky-ReLU gain, zero biases.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, arch: CriticArch) -> Result<Self> {
        arch.validate()?;
        let gain2 = 2.0 / (1.0 + arch.slope * arch.slope);
        let mut params = ParamVector::new();
        for (name, shape) in Self::layout(&arch)? {
            if shape.len() == 2 {
                let fan_in = shape[1];
                let bound = if name == "critic.head.w" {
                    (3.0 / fan_in as f64).sqrt()
                } else {
                    (3.0 * gain2 / fan_in as f64).sqrt()
                };
                params.push(name, uniform_tensor(rng, shape, bound));
            } else {
                params.push(name, Tensor::zeros(shape));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: CriticArch, params: ParamVector<T>) -> Result<Self> {
        arch.validate()?;
        let mut expect = ParamVector::<T>::new();
        for (name, shape) in Self::layout(&arch)? {
            expect.push(name, Tensor::zeros(shape));
        }
        if !expect.same_layout(&params) {
            return Err(Error::config("critic parameters do not match the architecture"));
        }
        Ok(Self { arch, params })
    }

    /// Scores for `batch` patches.
    ///
    /// `x` is channels-last `[batch * positions, in_channels]`; `guidance`,
    /// when the critic is conditional, is `[batch * positions, guidance_channels]`.
    /// Returns `[batch, 1]`.
    pub fn forward_graph(&self, g: &mut Graph<T>, vars: &[Var], x: Var, guidance: Option<Var>, batch: usize) -> Result<Var> {
        let a = &self.arch;
        let expect_rows = batch * a.patch_positions();
        if g.shape(x) != [expect_rows, a.in_channels] {
            return Err(Error::config(format!(
                "critic expects {batch} patches of {:?} x {} channels, got shape {:?}",
                a.patch,
                a.in_channels,
                g.shape(x)
            )));
        }
        let mut h = match (guidance, a.guidance_channels) {
            (None, 0) => x,
            (Some(gd), c) if c > 0 && g.shape(gd) == [expect_rows, c] => g.concat_cols(x, gd),
            _ => return Err(Error::config("guidance input does not match the critic's conditioning")),
        };
        for (l, geom) in a.geometries(batch)?.into_iter().enumerate() {
            let plan = geom.plan();
            let cols = g.im2col(h, &plan);
            h = g.linear(cols, vars[2 * l], vars[2 * l + 1]);
            h = g.leaky_relu(h, a.slope);
        }
        let rows = g.shape(h)[0] * g.shape(h)[1];
        let h = g.reshape(h, vec![batch, rows / batch.max(1)]);
        let n = a.conv_layers;
        Ok(g.linear(h, vars[2 * n], vars[2 * n + 1]))
    }

    /// Scores without recording gradients.
    pub fn score(&self, x: &[T], guidance: Option<&[T]>, batch: usize) -> Result<Vec<T>> {
        let a = &self.arch;
        let rows = batch * a.patch_positions();
        if x.len() != rows * a.in_channels {
            return Err(Error::config(format!(
                "critic expects {batch} patches of {:?} x {} channels ({} values), got {}",
                a.patch,
                a.in_channels,
                rows * a.in_channels,
                x.len()
            )));
        }
        let mut g = Graph::new();
        let vars = self.params.vars(&mut g, false);
        let xv = g.constant(Tensor::new(vec![rows, a.in_channels], x.to_vec()));
        let gv = match guidance {
            Some(gd) if gd.len() == rows * a.guidance_channels => {
                Some(g.constant(Tensor::new(vec![rows, a.guidance_channels], gd.to_vec())))
            }
            Some(_) => return Err(Error::config("guidance map size does not match the critic input")),
            None => None,
        };
        let out = self.forward_graph(&mut g, &vars, xv, gv, batch)?;
        Ok(g.value(out).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gen_arch() -> GeneratorArch {
        GeneratorArch {
            encoded_dim: 24,
            latent_dim: 5,
            guidance_dim: 0,
            hidden: 128,
            layers: 10,
            out_channels: 3,
        }
    }

    #[test]
    fn generator_param_count_closed_form() {
        let a = gen_arch();
        let expect = (29 * 128 + 128) + 8 * (128 * 128 + 128) + (128 * 3 + 3);
        assert_eq!(a.num_params(), expect);
        let g = Generator::<f32>::init(&mut ChaCha8Rng::seed_from_u64(1), a).unwrap();
        assert_eq!(g.params.num_values(), expect);
        assert_eq!(g.params.len(), 20);
    }

    #[test]
    fn generator_init_is_deterministic() {
        let a = Generator::<f32>::init(&mut ChaCha8Rng::seed_from_u64(9), gen_arch()).unwrap();
        let b = Generator::<f32>::init(&mut ChaCha8Rng::seed_from_u64(9), gen_arch()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_input_gives_sigmoid_of_bias_chain() {
        let g = Generator::<f64>::init(&mut ChaCha8Rng::seed_from_u64(2), gen_arch()).unwrap();
        let out = g.forward(&vec![0.0; 29], 1).unwrap();
        // zero biases: every hidden activation is 0, head = sigmoid(0)
        for v in out {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_batch_and_width_mismatch() {
        let g = Generator::<f32>::init(&mut ChaCha8Rng::seed_from_u64(3), gen_arch()).unwrap();
        assert!(g.forward(&[], 0).unwrap().is_empty());
        assert!(matches!(g.forward(&[0.0; 28], 1), Err(Error::Config(_))));
        assert!(matches!(
            g.forward_parts(&[0.0; 24], &[0.0; 4], None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn graph_and_plain_forward_agree() {
        let gen = Generator::<f64>::init(&mut ChaCha8Rng::seed_from_u64(4), gen_arch()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..3 * 29).map(|_| rng.random_range(-1.0..1.0)).collect();
        let plain = gen.forward(&x, 3).unwrap();
        let mut g = Graph::new();
        let vars = gen.params.vars(&mut g, true);
        let xv = g.constant(Tensor::new(vec![3, 29], x));
        let out = gen.forward_graph(&mut g, &vars, xv);
        for (a, b) in plain.iter().zip(g.value(out).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn flatten_round_trip() {
        let gen = Generator::<f32>::init(&mut ChaCha8Rng::seed_from_u64(6), gen_arch()).unwrap();
        let flat = gen.params.flatten();
        let mut other = gen.params.clone();
        for t in other.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        other.unflatten(&flat).unwrap();
        assert_eq!(other, gen.params);
        assert!(other.unflatten(&flat[1..]).is_err());
    }

    #[test]
    fn critic_layer_plan() {
        let a = CriticArch::for_patch(&[64, 64], 3, 0, 64);
        assert_eq!(a.conv_layers, 4);
        assert_eq!(a.widths(), vec![64, 128, 256, 512]);
        assert_eq!(a.head_in().unwrap(), 4 * 4 * 512);
        let a = CriticArch::for_patch(&[128, 128], 3, 0, 64);
        assert_eq!(a.conv_layers, 5);
        let a3 = CriticArch::for_patch(&[16, 16, 16], 1, 1, 32);
        assert_eq!(a3.conv_layers, 2);
        assert_eq!(a3.head_in().unwrap(), 64 * 64);
        assert_eq!(a3.input_channels(), 2);
    }

    #[test]
    fn critic_batch_scores_preserve_order() {
        let arch = CriticArch::for_patch(&[8, 8], 3, 0, 8);
        let c = Critic::<f64>::init(&mut ChaCha8Rng::seed_from_u64(7), arch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..3 * 64 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let batch = c.score(&x, None, 3).unwrap();
        for i in 0..3 {
            let single = c.score(&x[i * 192..(i + 1) * 192], None, 1).unwrap();
            assert!((single[0] - batch[i]).abs() < 1e-12);
        }
        assert!((batch[0] - batch[1]).abs() > 1e-9, "critic output is constant");
    }

    #[test]
    fn critic_head_is_linear_and_zero_weights_give_bias() {
        let arch = CriticArch::for_patch(&[8, 8], 1, 0, 4);
        let mut c = Critic::<f64>::init(&mut ChaCha8Rng::seed_from_u64(10), arch).unwrap();
        c.params.get_mut("critic.head.b").unwrap().data_mut()[0] = 0.0;
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let s1 = c.score(&x, None, 1).unwrap()[0];
        let hw = c.params.get_mut("critic.head.w").unwrap();
        *hw = hw.map(|v| 2.0 * v);
        let s2 = c.score(&x, None, 1).unwrap()[0];
        assert!((s2 - 2.0 * s1).abs() < 1e-12);

        for t in c.params.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        c.params.get_mut("critic.head.b").unwrap().data_mut()[0] = 0.75;
        assert_eq!(c.score(&x, None, 1).unwrap(), vec![0.75]);
    }

    #[test]
    fn critic_rejects_wrong_patch_size() {
        let arch = CriticArch::for_patch(&[8, 8], 3, 0, 8);
        let c = Critic::<f32>::init(&mut ChaCha8Rng::seed_from_u64(11), arch).unwrap();
        assert!(matches!(c.score(&[0.0; 3 * 49], None, 1), Err(Error::Config(_))));
    }

    #[test]
    fn conditional_critic_uses_guidance() {
        let arch = CriticArch::for_patch(&[8, 8, 8], 1, 1, 4);
        let c = Critic::<f64>::init(&mut ChaCha8Rng::seed_from_u64(12), arch).unwrap();
        let x = vec![0.2; 512];
        let a = c.score(&x, Some(&[0.0; 512]), 1).unwrap()[0];
        let b = c.score(&x, Some(&[1.0; 512]), 1).unwrap()[0];
        assert!((a - b).abs() > 1e-9);
        assert!(c.score(&x, None, 1).is_err());
    }
}
