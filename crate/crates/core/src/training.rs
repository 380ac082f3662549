//! Adversarial training: patch sampling, shifted coordinate grids, the
//! gradient-penalised critic objective and Adam updates.

use std::collections::VecDeque;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::data::{density_guidance, directional_guidance, Exemplar, ExemplarKind};
use crate::fieldmath::{sample_center_offset, EncodeOp, EncoderConfig, LatentGrid, LatentOp};
use crate::model::{Conditioning, CoordMapping, FieldModel, LatentSource};
use crate::netcore::{Critic, CriticArch, Generator, GeneratorArch};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentConfig {
    /// Corners per axis.
    pub grid_size: usize,
    pub dim: usize,
    pub spacing: f64,
    /// Interpolation sharpness in unscaled grid units.
    pub sigma: f64,
    /// Learn one fixed grid instead of drawing a fresh one per batch.
    pub trainable: bool,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            grid_size: 5,
            dim: 5,
            spacing: 1.0,
            sigma: 0.5,
            trainable: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub hidden: usize,
    pub layers: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { hidden: 128, layers: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    pub base_width: usize,
    pub max_width: usize,
    /// Defaults to halving the patch until it is at most 4 wide.
    pub conv_layers: Option<usize>,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            base_width: 64,
            max_width: 512,
            conv_layers: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: u64,
    pub batch: usize,
    pub patch_size: Vec<usize>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub d_steps: usize,
    pub g_steps: usize,
    pub lambda_gp: f64,
    pub shift_range: [f64; 2],
    pub scale_s: f64,
    pub bandwidth: usize,
    pub period_init: f64,
    /// Keep `a` fixed at `period_init`.
    pub disable_period_learning: bool,
    /// Always sample the centered coordinate grid.
    pub disable_shift: bool,
    pub latent: LatentConfig,
    pub generator: GeneratorConfig,
    pub critic: CriticConfig,
    pub conditioning: Conditioning,
    pub checkpoint_every: u64,
    pub history_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 12_500,
            batch: 8,
            patch_size: vec![128, 128],
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            adam_eps: 1e-8,
            d_steps: 5,
            g_steps: 5,
            lambda_gp: 10.0,
            shift_range: [-4.0, 4.0],
            scale_s: 4.0,
            bandwidth: 5,
            period_init: 1.0,
            disable_period_learning: false,
            disable_shift: false,
            latent: LatentConfig::default(),
            generator: GeneratorConfig::default(),
            critic: CriticConfig::default(),
            conditioning: Conditioning::None,
            checkpoint_every: 500,
            history_len: 256,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self, exemplar: &Exemplar) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) || !(self.adam_eps > 0.0) {
            return bad(format!("lr and adam_eps must be positive (lr {}, eps {})", self.lr, self.adam_eps));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.lambda_gp >= 0.0) {
            return bad(format!("lambda_gp must be non-negative, got {}", self.lambda_gp));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.shift_range[0] > self.shift_range[1] {
            return bad(format!("shift_range {:?} is reversed", self.shift_range));
        }
        if !(self.scale_s > 0.0) || !(self.period_init > 0.0) {
            return bad("scale_s and period_init must be positive".into());
        }
        if self.patch_size.len() != exemplar.k() {
            return bad(format!(
                "patch_size {:?} has {} axes but the exemplar has {}",
                self.patch_size,
                self.patch_size.len(),
                exemplar.k()
            ));
        }
        if self.patch_size.iter().zip(&exemplar.dims).any(|(p, d)| *p == 0 || p > d) {
            return bad(format!(
                "patch_size {:?} does not fit the exemplar dims {:?}",
                self.patch_size, exemplar.dims
            ));
        }
        match (self.conditioning, exemplar.kind) {
            (Conditioning::Directional { a, b, c }, ExemplarKind::Image2d) => {
                crate::data::Line { a, b, c }.validate()?;
            }
            (Conditioning::Directional { .. }, _) => {
                return bad("directional guidance needs an image exemplar".into());
            }
            (Conditioning::Density, ExemplarKind::Sdf3d) | (Conditioning::None, _) => {}
            (Conditioning::Density, _) => return bad("density guidance needs an SDF volume exemplar".into()),
        }
        if self.latent.grid_size == 0 || self.latent.dim == 0 || self.generator.layers == 0 || self.generator.hidden == 0 {
            return bad("latent and generator sizes must be positive".into());
        }
        LatentGrid::new(
            &vec![self.latent.grid_size; exemplar.k()],
            self.latent.dim,
            self.latent.spacing,
            self.latent.sigma,
        )?;
        if self.critic.base_width == 0 {
            return bad("critic.base_width must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates, aligned with a parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Real> AdamMoments<T> {
    pub fn zeros(sizes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<T>> = sizes.into_iter().map(|n| vec![T::zero(); n]).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One bias-corrected Adam step. Entries with `None` gradient are left
/// untouched (parameters and moments).
pub fn adam_update<T: Real>(params: &mut [&mut [T]], grads: &[Option<&[T]>], moments: &mut AdamMoments<T>, hp: &AdamConfig) {
    assert_eq!(params.len(), grads.len(), "adam: one gradient slot per parameter");
    assert_eq!(params.len(), moments.m.len(), "adam: moments do not match parameters");
    moments.t += 1;
    let t = moments.t as i32;
    let bc1 = T::of(1.0 - hp.beta1.powi(t));
    let bc2 = T::of(1.0 - hp.beta2.powi(t));
    let (b1, b2) = (T::of(hp.beta1), T::of(hp.beta2));
    let (lr, eps) = (T::of(hp.lr), T::of(hp.eps));
    let one = T::one();
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        assert_eq!(p.len(), g.len(), "adam: gradient shape");
        let (m, v) = (&mut moments.m[i], &mut moments.v[i]);
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            p[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Gradient penalty `mean_n (||grad_x D(x_hat_n)|| - 1)^2` on the graph.
///
/// `real` and `fake` hold `n = eps.len()` samples stacked along the first
/// axis; `x_hat = eps * real + (1 - eps) * fake` per sample. `critic` maps
/// a tensor shaped like `real` to per-sample scores.
pub fn gradient_penalty<T: Real>(
    g: &mut Graph<T>,
    critic: &mut dyn FnMut(&mut Graph<T>, Var) -> Result<Var>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    eps: &[T],
) -> Result<Var> {
    if real.shape() != fake.shape() {
        return Err(Error::config(format!(
            "real {:?} and fake {:?} batches differ in shape",
            real.shape(),
            fake.shape()
        )));
    }
    let n = eps.len();
    if n == 0 || !real.len().is_multiple_of(n) {
        return Err(Error::config("penalty batch does not split evenly into samples"));
    }
    let per = real.len() / n;
    let mut mix = Vec::with_capacity(real.len());
    for (s, &e) in eps.iter().enumerate() {
        let r = &real.data()[s * per..(s + 1) * per];
        let f = &fake.data()[s * per..(s + 1) * per];
        mix.extend(r.iter().zip(f).map(|(&r, &f)| e * r + (T::one() - e) * f));
    }
    let x_hat = g.param(Tensor::new(real.shape().to_vec(), mix));
    let scores = critic(g, x_hat)?;
    let total = g.sum_all(scores);
    let grad = g.grad(total, &[x_hat])[0];
    let grad = g.reshape(grad, vec![n, per]);
    let sq = g.square(grad);
    let norm2 = g.row_sum(sq);
    let norm2 = g.add_scalar(norm2, 1e-16);
    let norm = g.sqrt(norm2);
    let dev = g.add_scalar(norm, -1.0);
    let dev = g.square(dev);
    Ok(g.mean_all(dev))
}

/// Scalar penalty value with `eps ~ U(0, 1)` per sample, in double precision.
pub fn penalty_value<R: Rng + ?Sized>(
    critic: &mut dyn FnMut(&mut Graph<f64>, Var) -> Result<Var>,
    real: &Tensor<f64>,
    fake: &Tensor<f64>,
    rng: &mut R,
) -> Result<f64> {
    let n = real.shape()[0];
    let eps: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let mut g = Graph::new();
    let p = gradient_penalty(&mut g, critic, real, fake, &eps)?;
    Ok(g.value(p).item())
}

/// Per-iteration record written to the telemetry log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub iteration: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub wasserstein_estimate: f64,
    pub gradient_penalty: f64,
    pub a: Vec<f64>,
    pub period_px: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Critic,
    Generator,
}

/// Hooks invoked by [`train`]. All methods default to no-ops.
pub trait TrainObserver {
    fn on_step(&mut self, _kind: StepKind, _iteration: u64, _loss: f64) {}
    fn on_telemetry(&mut self, _record: &Telemetry) {}
    fn on_checkpoint(&mut self, _path: &Path, _iteration: u64) {}
}

impl TrainObserver for () {}

/// Full optimizer state: both networks, the field parameters, Adam moments,
/// iteration counter and random stream.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: FieldModel,
    pub critic: Critic<f32>,
    pub gen_moments: AdamMoments<f32>,
    pub critic_moments: AdamMoments<f32>,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub history: VecDeque<Telemetry>,
}

impl TrainState {
    pub fn new(exemplar: &Exemplar, config: TrainConfig) -> Result<Self> {
        config.validate(exemplar)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let k = exemplar.k();
        let encoder = EncoderConfig {
            bandwidth: config.bandwidth,
            k,
        };
        let lc = &config.latent;
        let latent = LatentGrid::new(&vec![lc.grid_size; k], lc.dim, lc.spacing, lc.sigma)?;
        let guidance_dim = config.conditioning.guidance_dim();
        let arch = GeneratorArch {
            encoded_dim: encoder.out_dim(),
            latent_dim: lc.dim,
            guidance_dim,
            hidden: config.generator.hidden,
            layers: config.generator.layers,
            out_channels: exemplar.channels,
        };
        let generator = Generator::init(&mut rng, arch)?;
        let mut carch = CriticArch::for_patch(&config.patch_size, exemplar.channels, guidance_dim, config.critic.base_width);
        carch.max_width = config.critic.max_width.max(1);
        if let Some(n) = config.critic.conv_layers {
            carch.conv_layers = n;
        }
        let critic = Critic::init(&mut rng, carch)?;
        let rho = Tensor::full(vec![k], config.period_init.ln() as f32);
        let latent_values = lc.trainable.then(|| {
            let v = (0..latent.value_len())
                .map(|_| rng.sample::<f32, _>(StandardNormal))
                .collect();
            Tensor::new(vec![1, latent.value_len()], v)
        });
        let value_map = exemplar.value_map();
        let guidance_scale = match config.conditioning {
            Conditioning::Density => 2.0 / value_map.scale,
            _ => 1.0,
        };
        let model = FieldModel {
            kind: exemplar.kind,
            channels: exemplar.channels,
            generator,
            rho,
            encoder,
            latent,
            latent_values,
            coords: CoordMapping::for_patch(config.scale_s, &config.patch_size),
            value_map,
            conditioning: config.conditioning,
            guidance_scale,
        };
        let gen_moments = AdamMoments::zeros(gen_group_sizes(&model));
        let critic_moments = AdamMoments::zeros(critic.params.tensors().map(|t| t.len()));
        Ok(Self {
            config,
            model,
            critic,
            gen_moments,
            critic_moments,
            iteration: 0,
            rng,
            history: VecDeque::new(),
        })
    }

    pub fn patch_positions(&self) -> usize {
        self.config.patch_size.iter().product()
    }
}

fn gen_group_sizes(model: &FieldModel) -> Vec<usize> {
    let mut sizes: Vec<usize> = model.generator.params.tensors().map(|t| t.len()).collect();
    sizes.push(model.rho.len());
    if let Some(v) = &model.latent_values {
        sizes.push(v.len());
    }
    sizes
}

/// A crop of the exemplar with its guidance value.
#[derive(Clone, Debug, PartialEq)]
pub struct RealPatch {
    pub origin: Vec<usize>,
    /// Raw exemplar values, channels-last.
    pub values: Vec<f32>,
    pub guidance: Option<f64>,
}

/// Uniformly random crop of `patch` size.
pub fn sample_real_patch<R: Rng + ?Sized>(
    exemplar: &Exemplar,
    patch: &[usize],
    conditioning: &Conditioning,
    rng: &mut R,
) -> Result<RealPatch> {
    if patch.len() != exemplar.k() || patch.iter().zip(&exemplar.dims).any(|(p, d)| p > d) {
        return Err(Error::config(format!(
            "patch {patch:?} larger than exemplar {:?}",
            exemplar.dims
        )));
    }
    let origin: Vec<usize> = patch
        .iter()
        .zip(&exemplar.dims)
        .map(|(&p, &d)| rng.random_range(0..=d - p))
        .collect();
    let values = exemplar.crop(&origin, patch)?;
    let guidance = match conditioning {
        Conditioning::None => None,
        Conditioning::Directional { .. } => {
            let line = conditioning.line().expect("directional line");
            let cx = origin[1] as f64 + patch[1] as f64 / 2.0;
            let cy = origin[0] as f64 + patch[0] as f64 / 2.0;
            let dims = (exemplar.dims[1] as f64, exemplar.dims[0] as f64);
            Some(directional_guidance((cx, cy), dims, &line)?)
        }
        Conditioning::Density => Some(density_guidance(&values, values.len() as f64)),
    };
    Ok(RealPatch { origin, values, guidance })
}

/// Real batch mapped to the generator range, `[n * positions, C]`.
struct RealBatch {
    values: Vec<f32>,
    guidance: Vec<f64>,
}

fn sample_real_batch(exemplar: &Exemplar, state: &mut TrainState) -> Result<RealBatch> {
    let map = state.model.value_map;
    let n = state.config.batch;
    let mut values = Vec::with_capacity(n * state.patch_positions() * exemplar.channels);
    let mut guidance = Vec::with_capacity(n);
    for _ in 0..n {
        let p = sample_real_patch(exemplar, &state.config.patch_size, &state.config.conditioning, &mut state.rng)?;
        values.extend(p.values.iter().map(|&v| map.to_unit(v as f64) as f32));
        guidance.push(p.guidance.unwrap_or(0.0));
    }
    Ok(RealBatch { values, guidance })
}

/// Random inputs of one fake batch: per-sample grid offsets, latent draws
/// and guidance values.
#[derive(Clone, Debug, PartialEq)]
pub struct FakeSetup {
    pub offsets: Vec<Vec<f64>>,
    /// `n x (cells * dim)` fresh draws, empty when the grid is trained.
    pub latents: Vec<f32>,
    pub guidance: Vec<f64>,
    pub coords: Arc<Vec<f64>>,
}

pub fn sample_fake_setup<R: Rng + ?Sized>(state: &TrainState, rng: &mut R, guidance: Vec<f64>) -> Result<FakeSetup> {
    let cfg = &state.config;
    let model = &state.model;
    let k = model.k();
    let mut offsets = Vec::with_capacity(cfg.batch);
    let mut latents = Vec::new();
    let mut coords = Vec::with_capacity(cfg.batch * state.patch_positions() * k);
    for _ in 0..cfg.batch {
        let offset = if cfg.disable_shift {
            vec![0.0; k]
        } else {
            sample_center_offset(rng, k, cfg.shift_range)
        };
        if model.latent_values.is_none() {
            latents.extend(model.draw_latent(rng));
        }
        coords.extend(model.coords.grid(&cfg.patch_size, &offset)?.coords());
        offsets.push(offset);
    }
    Ok(FakeSetup {
        offsets,
        latents,
        guidance,
        coords: Arc::new(coords),
    })
}

fn guidance_map<T: Real>(model: &FieldModel, positions: usize, guidance: &[f64]) -> Option<Vec<T>> {
    model.conditioning.is_conditional().then(|| {
        guidance
            .iter()
            .flat_map(|&g| std::iter::repeat_n(T::of(g * model.guidance_scale), positions))
            .collect()
    })
}

/// Generated batch `[n * positions, C]` in the generator range.
#[derive(Clone, Debug, PartialEq)]
pub struct FakeBatch {
    pub values: Vec<f32>,
    pub guidance: Vec<f64>,
    pub offsets: Vec<Vec<f64>>,
}

fn render_fake(state: &TrainState, setup: &FakeSetup) -> Result<Vec<f32>> {
    let model = &state.model;
    let p = state.patch_positions();
    let k = model.k();
    let lv = model.latent.value_len();
    let mut out = Vec::with_capacity(setup.offsets.len() * p * model.channels);
    for s in 0..setup.offsets.len() {
        let coords = &setup.coords[s * p * k..(s + 1) * p * k];
        let values = match &model.latent_values {
            Some(v) => v.data(),
            None => &setup.latents[s * lv..(s + 1) * lv],
        };
        let gmap = model
            .conditioning
            .is_conditional()
            .then(|| vec![setup.guidance[s] as f32; p]);
        out.extend(model.eval_points(
            coords,
            LatentSource::Field {
                values,
                extent_scale: 1.0,
            },
            gmap.as_deref(),
        )?);
    }
    Ok(out)
}

/// Sample offsets/latents from `rng` and render one fake batch.
pub fn make_fake_batch<R: Rng + ?Sized>(state: &TrainState, rng: &mut R, guidance: Vec<f64>) -> Result<FakeBatch> {
    let setup = sample_fake_setup(state, rng, guidance)?;
    let values = render_fake(state, &setup)?;
    Ok(FakeBatch {
        values,
        guidance: setup.guidance,
        offsets: setup.offsets,
    })
}

struct FakeVars {
    out: Var,
    gen: Vec<Var>,
    rho: Var,
    latent: Option<Var>,
}

/// Trainable tensors of one precision.
struct Nets<'a, T> {
    generator: &'a Generator<T>,
    rho: &'a Tensor<T>,
    latent: Option<&'a Tensor<T>>,
    critic: &'a Critic<T>,
}

impl TrainState {
    fn nets(&self) -> Nets<'_, f32> {
        Nets {
            generator: &self.model.generator,
            rho: &self.model.rho,
            latent: self.model.latent_values.as_ref(),
            critic: &self.critic,
        }
    }
}

fn fake_on_graph<T: Real>(
    g: &mut Graph<T>,
    model: &FieldModel,
    nets: &Nets<'_, T>,
    positions: usize,
    setup: &FakeSetup,
    learn_period: bool,
) -> FakeVars {
    let gen = nets.generator.params.vars(g, true);
    let rho = if learn_period {
        g.param(nets.rho.clone())
    } else {
        g.constant(nets.rho.clone())
    };
    let enc = g.custom(Arc::new(EncodeOp::new(setup.coords.clone(), model.encoder)), &[rho]);
    let (latent_var, latent) = match nets.latent {
        Some(v) => {
            let var = g.param(v.clone());
            (var, Some(var))
        }
        None => {
            let n = setup.offsets.len();
            let data = setup.latents.iter().map(|&v| T::of(v as f64)).collect();
            (g.constant(Tensor::new(vec![n, model.latent.value_len()], data)), None)
        }
    };
    let op = LatentOp::new(model.scaled_latent(1.0), &setup.coords, positions);
    let lat = g.custom(Arc::new(op), &[latent_var]);
    let mut x = g.concat_cols(enc, lat);
    if let Some(map) = guidance_map::<T>(model, positions, &setup.guidance) {
        let gm = g.constant(Tensor::new(vec![map.len(), 1], map));
        x = g.concat_cols(x, gm);
    }
    let out = nets.generator.forward_graph(g, &gen, x);
    FakeVars { out, gen, rho, latent }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticReport {
    pub loss: f64,
    pub wasserstein: f64,
    pub penalty: f64,
}

fn non_finite(what: &str, state: &TrainState, value: f64) -> Error {
    Error::Numeric(format!(
        "{what} became non-finite ({value}) at iteration {}; a = {:?}",
        state.iteration,
        state.model.a()
    ))
}

/// Critic loss pieces on `g`: the loss, the critic parameter vars, the
/// negated Wasserstein estimate and the penalty.
struct CriticTerms {
    loss: Var,
    vars: Vec<Var>,
    w: Var,
    pen: Var,
}

/// Critic objective on given batches without updating anything.
#[allow(clippy::too_many_arguments)]
fn critic_objective<T: Real>(
    g: &mut Graph<T>,
    model: &FieldModel,
    critic: &Critic<T>,
    config: &TrainConfig,
    real: Tensor<T>,
    fake: Tensor<T>,
    guidance: &[f64],
    eps: &[T],
) -> Result<CriticTerms> {
    let n = config.batch;
    let positions: usize = config.patch_size.iter().product();
    let rows = n * positions;
    let vars = critic.params.vars(g, true);
    let gmap = guidance_map::<T>(model, positions, guidance).map(|m| g.constant(Tensor::new(vec![rows, 1], m)));
    let xr = g.constant(real.clone());
    let xf = g.constant(fake.clone());
    let dr = critic.forward_graph(g, &vars, xr, gmap, n)?;
    let df = critic.forward_graph(g, &vars, xf, gmap, n)?;
    let mr = g.mean_all(dr);
    let mf = g.mean_all(df);
    let w = g.sub(mf, mr);
    let pen = gradient_penalty(
        g,
        &mut |g, x| critic.forward_graph(g, &vars, x, gmap, n),
        &real,
        &fake,
        eps,
    )?;
    let scaled = g.scale(pen, config.lambda_gp);
    let loss = g.add(w, scaled);
    Ok(CriticTerms { loss, vars, w, pen })
}

/// Generator loss `-mean D(fake)` on `g`, with the vars it depends on.
fn generator_objective<T: Real>(
    g: &mut Graph<T>,
    model: &FieldModel,
    nets: &Nets<'_, T>,
    config: &TrainConfig,
    setup: &FakeSetup,
    learn_period: bool,
) -> Result<(Var, FakeVars)> {
    let n = config.batch;
    let positions: usize = config.patch_size.iter().product();
    let rows = n * positions;
    let fv = fake_on_graph(g, model, nets, positions, setup, learn_period);
    let cvars = nets.critic.params.vars(g, false);
    let gmap = guidance_map::<T>(model, positions, &setup.guidance).map(|m| g.constant(Tensor::new(vec![rows, 1], m)));
    let scores = nets.critic.forward_graph(g, &cvars, fv.out, gmap, n)?;
    let mean = g.mean_all(scores);
    Ok((g.scale(mean, -1.0), fv))
}

/// One critic update: `mean D(fake) - mean D(real) + lambda * penalty`.
pub fn critic_step(state: &mut TrainState, exemplar: &Exemplar) -> Result<CriticReport> {
    let real = sample_real_batch(exemplar, state)?;
    let mut rng = std::mem::replace(&mut state.rng, ChaCha8Rng::seed_from_u64(0));
    let setup = sample_fake_setup(state, &mut rng, real.guidance.clone());
    let eps: Vec<f32> = (0..state.config.batch).map(|_| rng.random::<f32>()).collect();
    state.rng = rng;
    let setup = setup?;
    let fake = render_fake(state, &setup)?;
    let rows = state.config.batch * state.patch_positions();
    let c = state.model.channels;
    let mut g = Graph::new();
    let CriticTerms { loss, vars, w, pen } = critic_objective(
        &mut g,
        &state.model,
        &state.critic,
        &state.config,
        Tensor::new(vec![rows, c], real.values),
        Tensor::new(vec![rows, c], fake),
        &real.guidance,
        &eps,
    )?;
    let loss_v = g.value(loss).item().f64();
    if !loss_v.is_finite() {
        return Err(non_finite("critic loss", state, loss_v));
    }
    let report = CriticReport {
        loss: loss_v,
        wasserstein: -g.value(w).item().f64(),
        penalty: g.value(pen).item().f64(),
    };
    let grads = g.grad(loss, &vars);
    let grad_data: Vec<&[f32]> = grads.iter().map(|&v| g.value(v).data()).collect();
    if grad_data.iter().any(|d| d.iter().any(|x| !x.is_finite())) {
        return Err(non_finite("critic gradient", state, f64::NAN));
    }
    let hp = state.config.adam();
    let mut params: Vec<&mut [f32]> = state.critic.params.tensors_mut().map(|t| t.data_mut()).collect();
    let slots: Vec<Option<&[f32]>> = grad_data.into_iter().map(Some).collect();
    adam_update(&mut params, &slots, &mut state.critic_moments, &hp);
    Ok(report)
}

fn sample_guidance(state: &mut TrainState, exemplar: &Exemplar) -> Result<Vec<f64>> {
    if !state.model.conditioning.is_conditional() {
        return Ok(vec![0.0; state.config.batch]);
    }
    Ok(sample_real_batch(exemplar, state)?.guidance)
}

/// One generator update on `-mean D(fake)`, jointly over the MLP, the
/// period parameter and (when trained) the latent grid.
pub fn generator_step(state: &mut TrainState, exemplar: &Exemplar) -> Result<f64> {
    let guidance = sample_guidance(state, exemplar)?;
    let mut rng = std::mem::replace(&mut state.rng, ChaCha8Rng::seed_from_u64(0));
    let setup = sample_fake_setup(state, &mut rng, guidance);
    state.rng = rng;
    let setup = setup?;
    let learn_period = !state.config.disable_period_learning;
    let mut g = Graph::new();
    let (loss, fv) = generator_objective(&mut g, &state.model, &state.nets(), &state.config, &setup, learn_period)?;
    let loss_v = g.value(loss).item().f64();
    if !loss_v.is_finite() {
        return Err(non_finite("generator loss", state, loss_v));
    }
    let mut wrt = fv.gen.clone();
    wrt.push(fv.rho);
    if let Some(l) = fv.latent {
        wrt.push(l);
    }
    let grads = g.grad(loss, &wrt);
    let mut slots: Vec<Option<&[f32]>> = grads.iter().map(|&v| Some(g.value(v).data())).collect();
    if !learn_period {
        slots[fv.gen.len()] = None;
    }
    if slots.iter().flatten().any(|d| d.iter().any(|x| !x.is_finite())) {
        return Err(non_finite("generator gradient", state, f64::NAN));
    }
    let hp = state.config.adam();
    let model = &mut state.model;
    let mut params: Vec<&mut [f32]> = model.generator.params.tensors_mut().map(|t| t.data_mut()).collect();
    params.push(model.rho.data_mut());
    if let Some(v) = model.latent_values.as_mut() {
        params.push(v.data_mut());
    }
    adam_update(&mut params, &slots, &mut state.gen_moments, &hp);
    Ok(loss_v)
}

/// Both objectives in double precision on inputs frozen from one draw of
/// the training samplers, for checking analytic gradients.
#[derive(Clone, Debug)]
pub struct ObjectiveProbe {
    model: FieldModel,
    config: TrainConfig,
    generator: Generator<f64>,
    rho: Tensor<f64>,
    latent: Option<Tensor<f64>>,
    critic: Critic<f64>,
    real: Tensor<f64>,
    guidance: Vec<f64>,
    setup: FakeSetup,
    eps: Vec<f64>,
}

fn to_f64(t: &Tensor<f32>) -> Tensor<f64> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect())
}

impl ObjectiveProbe {
    /// Samples batches with a copy of the state's generator; `state` is untouched.
    pub fn new(state: &TrainState, exemplar: &Exemplar) -> Result<Self> {
        let mut st = state.clone();
        let real = sample_real_batch(exemplar, &mut st)?;
        let mut rng = st.rng.clone();
        let setup = sample_fake_setup(&st, &mut rng, real.guidance.clone())?;
        let eps = (0..st.config.batch).map(|_| rng.random::<f64>()).collect();
        let rows = st.config.batch * st.patch_positions();
        let m = &st.model;
        Ok(Self {
            generator: Generator::from_params(m.generator.arch.clone(), m.generator.params.cast())?,
            rho: to_f64(&m.rho),
            latent: m.latent_values.as_ref().map(to_f64),
            critic: Critic::from_params(st.critic.arch.clone(), st.critic.params.cast())?,
            real: Tensor::new(vec![rows, m.channels], real.values.iter().map(|&v| v as f64).collect()),
            guidance: real.guidance,
            setup,
            eps,
            model: st.model,
            config: st.config,
        })
    }

    fn nets(&self) -> Nets<'_, f64> {
        Nets {
            generator: &self.generator,
            rho: &self.rho,
            latent: self.latent.as_ref(),
            critic: &self.critic,
        }
    }

    /// Generator weights, then the log-period, then the trained latent grid.
    pub fn generator_params(&self) -> Vec<f64> {
        let mut flat = self.generator.params.flatten();
        flat.extend_from_slice(self.rho.data());
        if let Some(l) = &self.latent {
            flat.extend_from_slice(l.data());
        }
        flat
    }

    pub fn set_generator_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.generator_params().len() {
            return Err(Error::config("generator parameter vector has the wrong length"));
        }
        let n = self.generator.params.num_values();
        self.generator.params.unflatten(&flat[..n])?;
        let r = self.rho.len();
        self.rho.data_mut().copy_from_slice(&flat[n..n + r]);
        if let Some(l) = &mut self.latent {
            l.data_mut().copy_from_slice(&flat[n + r..]);
        }
        Ok(())
    }

    pub fn critic_params(&self) -> Vec<f64> {
        self.critic.params.flatten()
    }

    pub fn set_critic_params(&mut self, flat: &[f64]) -> Result<()> {
        self.critic.params.unflatten(flat)
    }

    /// Generator loss and its gradient in [`Self::generator_params`] order.
    pub fn generator_loss(&self) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let (loss, fv) = generator_objective(&mut g, &self.model, &self.nets(), &self.config, &self.setup, true)?;
        let mut wrt = fv.gen;
        wrt.push(fv.rho);
        wrt.extend(fv.latent);
        let grads = g.grad(loss, &wrt);
        let flat = grads.iter().flat_map(|&v| g.value(v).data().to_vec()).collect();
        Ok((g.value(loss).item(), flat))
    }

    /// Critic loss, penalty included, and its gradient in [`Self::critic_params`] order.
    pub fn critic_loss(&self) -> Result<(f64, Vec<f64>)> {
        let positions = self.real.shape()[0] / self.config.batch;
        let fake = {
            let mut g = Graph::new();
            let fv = fake_on_graph(&mut g, &self.model, &self.nets(), positions, &self.setup, false);
            g.value(fv.out).clone()
        };
        let mut g = Graph::new();
        let terms = critic_objective(
            &mut g,
            &self.model,
            &self.critic,
            &self.config,
            self.real.clone(),
            fake,
            &self.guidance,
            &self.eps,
        )?;
        let grads = g.grad(terms.loss, &terms.vars);
        let flat = grads.iter().flat_map(|&v| g.value(v).data().to_vec()).collect();
        Ok((g.value(terms.loss).item(), flat))
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for checkpoints, telemetry and diagnostics.
    pub out_dir: Option<PathBuf>,
}

/// Run iterations until `state.config.iterations` is reached.
///
/// Each iteration performs `d_steps` critic updates followed by `g_steps`
/// generator updates. With an output directory, checkpoints are written
/// every `checkpoint_every` iterations plus `ckpt-final.ipfn` at the end,
/// and one telemetry line per iteration goes to `telemetry.ndjson`. A
/// non-finite loss aborts with a numeric error after writing
/// `diagnostics.json`; earlier checkpoints are left in place.
pub fn train(exemplar: &Exemplar, state: &mut TrainState, opts: &TrainOptions, observer: &mut dyn TrainObserver) -> Result<()> {
    state.config.validate(exemplar)?;
    if exemplar.channels != state.model.channels || exemplar.kind != state.model.kind {
        return Err(Error::config("exemplar does not match the model being trained"));
    }
    let mut log = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("telemetry.ndjson");
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, std::io::BufWriter::new(file)))
        }
        None => None,
    };
    while state.iteration < state.config.iterations {
        match run_iteration(exemplar, state, observer) {
            Ok(record) => {
                if let Some((path, w)) = log.as_mut() {
                    let line = serde_json::to_string(&record).expect("telemetry serializes");
                    writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(&*path, e))?;
                }
                observer.on_telemetry(&record);
                state.history.push_back(record);
                while state.history.len() > state.config.history_len.max(1) {
                    state.history.pop_front();
                }
            }
            Err(e) => {
                if let Some(dir) = &opts.out_dir {
                    write_diagnostics(dir, state, &e)?;
                }
                return Err(e);
            }
        }
        let every = state.config.checkpoint_every;
        if let Some(dir) = &opts.out_dir {
            if every > 0 && state.iteration.is_multiple_of(every) && state.iteration < state.config.iterations {
                let path = dir.join(format!("ckpt-{:06}.ipfn", state.iteration));
                crate::checkpoint::save(&path, state)?;
                observer.on_checkpoint(&path, state.iteration);
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        let path = dir.join("ckpt-final.ipfn");
        crate::checkpoint::save(&path, state)?;
        observer.on_checkpoint(&path, state.iteration);
    }
    Ok(())
}

fn run_iteration(exemplar: &Exemplar, state: &mut TrainState, observer: &mut dyn TrainObserver) -> Result<Telemetry> {
    let mut last = CriticReport {
        loss: f64::NAN,
        wasserstein: f64::NAN,
        penalty: f64::NAN,
    };
    for _ in 0..state.config.d_steps {
        last = critic_step(state, exemplar)?;
        observer.on_step(StepKind::Critic, state.iteration, last.loss);
    }
    let mut g_loss = f64::NAN;
    for _ in 0..state.config.g_steps {
        g_loss = generator_step(state, exemplar)?;
        observer.on_step(StepKind::Generator, state.iteration, g_loss);
    }
    state.iteration += 1;
    Ok(Telemetry {
        iteration: state.iteration,
        d_loss: last.loss,
        g_loss,
        wasserstein_estimate: last.wasserstein,
        gradient_penalty: last.penalty,
        a: state.model.a(),
        period_px: state.model.period_pixels(),
    })
}

fn write_diagnostics(dir: &Path, state: &TrainState, err: &Error) -> Result<()> {
    let doc = serde_json::json!({
        "error": err.to_string(),
        "iteration": state.iteration,
        "a": state.model.a(),
        "recent": state.history.iter().rev().take(20).collect::<Vec<_>>(),
    });
    let path = dir.join("diagnostics.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc).expect("diagnostics serialize"))
        .map_err(|e| Error::io(&path, e))
}
