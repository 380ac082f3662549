//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `IPFNCKP1`, a little-endian `u32` header length,
//! a JSON header, then named f32 tensor records (`u32` name length, name,
//! `u32` rank, `u64` dims, raw little-endian payload), closed by a CRC32 of
//! everything before it.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::fieldmath::{EncoderConfig, LatentGrid};
use crate::model::{FieldModel, ModelDescriptor};
use crate::netcore::{Critic, CriticArch, Generator, ParamVector};
use crate::training::{AdamMoments, Telemetry, TrainConfig, TrainState};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IPFNCKP1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    /// `u128` does not survive every JSON reader, so it is stored as text.
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelDescriptor,
    critic: CriticArch,
    config: TrainConfig,
    iteration: u64,
    rng: RngState,
    gen_adam_steps: u64,
    critic_adam_steps: u64,
    history: Vec<Telemetry>,
}

/// Summary of a checkpoint for listings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub model: ModelDescriptor,
    pub iteration: u64,
    pub a: Vec<f64>,
    pub period_px: Vec<f64>,
}

impl CheckpointInfo {
    pub fn of(state: &TrainState) -> Self {
        Self {
            model: state.model.descriptor(),
            iteration: state.iteration,
            a: state.model.a(),
            period_px: state.model.period_pixels(),
        }
    }
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_bits().to_le_bytes());
    }
}

fn moments_records(out: &mut Vec<u8>, prefix: &str, m: &AdamMoments<f32>) {
    for (i, (a, b)) in m.m.iter().zip(&m.v).enumerate() {
        put_record(out, &format!("{prefix}.m.{i}"), &Tensor::new(vec![a.len()], a.clone()));
        put_record(out, &format!("{prefix}.v.{i}"), &Tensor::new(vec![b.len()], b.clone()));
    }
}

/// Serialize the full training state.
pub fn encode(state: &TrainState) -> Vec<u8> {
    let header = Header {
        model: state.model.descriptor(),
        critic: state.critic.arch.clone(),
        config: state.config.clone(),
        iteration: state.iteration,
        rng: RngState {
            seed: state.rng.get_seed().to_vec(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        gen_adam_steps: state.gen_moments.t,
        critic_adam_steps: state.critic_moments.t,
        history: state.history.iter().cloned().collect(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::new();
    out.extend(CHECKPOINT_MAGIC);
    out.extend((json.len() as u32).to_le_bytes());
    out.extend(&json);
    for (name, t) in state.model.generator.params.iter() {
        put_record(&mut out, name, t);
    }
    put_record(&mut out, "period.rho", &state.model.rho);
    if let Some(v) = &state.model.latent_values {
        put_record(&mut out, "latent.values", v);
    }
    for (name, t) in state.critic.params.iter() {
        put_record(&mut out, name, t);
    }
    moments_records(&mut out, "adam.gen", &state.gen_moments);
    moments_records(&mut out, "adam.critic", &state.critic_moments);
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format("checkpoint is truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn split(bytes: &[u8]) -> Result<(Header, HashMap<String, Tensor<f32>>)> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format("not an IPFN checkpoint"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::format("checkpoint checksum mismatch (truncated or corrupt)"));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let hlen = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    let mut records = HashMap::new();
    while r.pos < body.len() {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::format("checkpoint record name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format("checkpoint record too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        records.insert(name, Tensor::new(shape, data));
    }
    Ok((header, records))
}

fn take_params(
    records: &mut HashMap<String, Tensor<f32>>,
    names: impl IntoIterator<Item = String>,
) -> Result<ParamVector<f32>> {
    let mut p = ParamVector::new();
    for name in names {
        let t = records
            .remove(&name)
            .ok_or_else(|| Error::format(format!("checkpoint lacks tensor {name}")))?;
        p.push(name, t);
    }
    Ok(p)
}

fn take_moments(records: &mut HashMap<String, Tensor<f32>>, prefix: &str, sizes: &[usize], t: u64) -> Result<AdamMoments<f32>> {
    let mut m = AdamMoments::zeros(sizes.iter().copied());
    for (i, &n) in sizes.iter().enumerate() {
        for (slot, kind) in [(&mut m.m[i], "m"), (&mut m.v[i], "v")] {
            let name = format!("{prefix}.{kind}.{i}");
            let rec = records
                .remove(&name)
                .ok_or_else(|| Error::format(format!("checkpoint lacks tensor {name}")))?;
            if rec.len() != n {
                return Err(Error::format(format!("{name} has {} values, expected {n}", rec.len())));
            }
            *slot = rec.into_data();
        }
    }
    m.t = t;
    Ok(m)
}

/// Rebuild the training state written by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    let (h, mut records) = split(bytes)?;
    let d = &h.model;
    let gen_names: Vec<String> = (0..d.generator.layers)
        .flat_map(|l| [format!("gen.{l}.w"), format!("gen.{l}.b")])
        .collect();
    let gen_params = take_params(&mut records, gen_names)?;
    let generator = Generator::from_params(d.generator.clone(), gen_params)?;
    let critic_names: Vec<String> = (0..h.critic.conv_layers)
        .flat_map(|l| [format!("critic.{l}.w"), format!("critic.{l}.b")])
        .chain(["critic.head.w".to_string(), "critic.head.b".to_string()])
        .collect();
    let critic_params = take_params(&mut records, critic_names)?;
    let critic = Critic::from_params(h.critic.clone(), critic_params)?;
    let k = d.kind.k();
    let rho = records
        .remove("period.rho")
        .ok_or_else(|| Error::format("checkpoint lacks period.rho"))?;
    if rho.len() != k {
        return Err(Error::format("period.rho has the wrong length"));
    }
    let latent = LatentGrid::new(&d.latent_shape, d.latent_dim, d.latent_spacing, d.latent_sigma)?;
    let latent_values = records.remove("latent.values");
    if latent_values.is_some() != d.latent_trained || latent_values.as_ref().is_some_and(|v| v.len() != latent.value_len()) {
        return Err(Error::format("latent.values does not match the descriptor"));
    }
    let model = FieldModel {
        kind: d.kind,
        channels: d.channels,
        generator,
        rho,
        encoder: EncoderConfig {
            bandwidth: d.bandwidth,
            k,
        },
        latent,
        latent_values,
        coords: d.coords,
        value_map: d.value_map,
        conditioning: d.conditioning,
        guidance_scale: d.guidance_scale,
    };
    let mut gen_sizes: Vec<usize> = model.generator.params.tensors().map(|t| t.len()).collect();
    gen_sizes.push(model.rho.len());
    if let Some(v) = &model.latent_values {
        gen_sizes.push(v.len());
    }
    let critic_sizes: Vec<usize> = critic.params.tensors().map(|t| t.len()).collect();
    let gen_moments = take_moments(&mut records, "adam.gen", &gen_sizes, h.gen_adam_steps)?;
    let critic_moments = take_moments(&mut records, "adam.critic", &critic_sizes, h.critic_adam_steps)?;
    if let Some(extra) = records.keys().next() {
        return Err(Error::format(format!("unexpected checkpoint tensor {extra}")));
    }
    let seed: [u8; 32] = h
        .rng
        .seed
        .as_slice()
        .try_into()
        .map_err(|_| Error::format("rng seed must be 32 bytes"))?;
    let word_pos: u128 = h
        .rng
        .word_pos
        .parse()
        .map_err(|_| Error::format("rng word position is not an integer"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(h.rng.stream);
    rng.set_word_pos(word_pos);
    Ok(TrainState {
        config: h.config,
        model,
        critic,
        gen_moments,
        critic_moments,
        iteration: h.iteration,
        rng,
        history: VecDeque::from(h.history),
    })
}

/// Write atomically: a temporary sibling is renamed over `path`.
pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = encode(state);
    let tmp = path.with_extension("ipfn.tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
