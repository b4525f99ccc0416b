//! Parameters and their on-disk form.
//!
//! File layout: `RDW1` magic, little-endian `u64` header length, a JSON
//! header (`config`, `seed`, and `tensors` with name, shape and element
//! offset), then every tensor as little-endian `f32` in header order.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::tensor::{LayerNorm, Linear, Matrix};
use super::RdangleError;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"RDW1";
pub const INIT_RANGE: f32 = 0.1;

/// Callback receiving a tensor name, shape and data.
pub type TensorVisitor<'a> = &'a mut dyn FnMut(&str, &[usize], &[f32]);
pub type TensorVisitorMut<'a> = &'a mut dyn FnMut(&str, &[usize], &mut [f32]);

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl AttentionParams {
    fn zeros(d: usize) -> Self {
        AttentionParams {
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            output: Linear::zeros(d, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    fn zeros(d: usize, d_ff: usize) -> Self {
        FeedForward {
            up: Linear::zeros(d, d_ff),
            down: Linear::zeros(d_ff, d),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut h = self.up.forward(x);
        for v in h.data_mut() {
            *v = v.max(0.0);
        }
        self.down.forward(&h)
    }
}

/// Pre-norm encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub self_attn: AttentionParams,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

/// Pre-norm decoder block with causal self-attention and cross-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: AttentionParams,
    pub cross_norm: LayerNorm,
    pub cross_attn: AttentionParams,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    pub seed: Option<u64>,
    pub src_embed: Matrix,
    pub tgt_embed: Matrix,
    pub src_pos: Matrix,
    pub tgt_pos: Matrix,
    /// Distinct encoder layers; see [`Weights::encoder_stack`] and
    /// [`Weights::adaptive_stack`] for how they are arranged.
    pub encoder_pool: Vec<EncoderLayer>,
    pub encoder_norm: LayerNorm,
    /// Only present when the adaptive encoder shares no layers with the
    /// plain encoder; otherwise both end in `encoder_norm`.
    pub adaptive_norm: Option<LayerNorm>,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_norm: LayerNorm,
    pub output: Linear,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: Option<u64>,
    tensors: Vec<TensorEntry>,
}

impl Weights {
    /// Shape-correct parameters with zero matrices and identity norms.
    pub fn zeros(config: &ModelConfig) -> Result<Self, RdangleError> {
        config.validate()?;
        let d = config.d_model;
        let pool_size = config.encoder_layers + config.adaptive_layers() - config.shared_layers;
        let enc_layer = || EncoderLayer {
            attn_norm: LayerNorm::identity(d),
            self_attn: AttentionParams::zeros(d),
            ffn_norm: LayerNorm::identity(d),
            ffn: FeedForward::zeros(d, config.d_ff),
        };
        let dec_layer = || DecoderLayer {
            self_norm: LayerNorm::identity(d),
            self_attn: AttentionParams::zeros(d),
            cross_norm: LayerNorm::identity(d),
            cross_attn: AttentionParams::zeros(d),
            ffn_norm: LayerNorm::identity(d),
            ffn: FeedForward::zeros(d, config.d_ff),
        };
        Ok(Weights {
            config: config.clone(),
            seed: None,
            src_embed: Matrix::zeros(config.src_vocab, d),
            tgt_embed: Matrix::zeros(config.tgt_vocab, d),
            src_pos: Matrix::zeros(config.max_positions, d),
            tgt_pos: Matrix::zeros(config.max_positions, d),
            encoder_pool: (0..pool_size).map(|_| enc_layer()).collect(),
            encoder_norm: LayerNorm::identity(d),
            adaptive_norm: (config.shared_layers == 0).then(|| LayerNorm::identity(d)),
            decoder: (0..config.decoder_layers).map(|_| dec_layer()).collect(),
            decoder_norm: LayerNorm::identity(d),
            output: Linear::zeros(d, config.tgt_vocab),
        })
    }

    /// Uniform(-0.1, 0.1) for every matrix and bias; norms stay identity.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, RdangleError> {
        let mut w = Weights::zeros(config)?;
        w.seed = Some(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        w.visit_mut(&mut |name, _, data| {
            if !name.contains("norm") {
                for v in data.iter_mut() {
                    *v = rng.gen_range(-INIT_RANGE..INIT_RANGE);
                }
            }
        });
        Ok(w)
    }

    /// Indices into `encoder_pool` for the plain encoder, bottom to top.
    pub fn encoder_stack(&self) -> Vec<usize> {
        (0..self.config.encoder_layers).collect()
    }

    /// Indices into `encoder_pool` for the adaptive encoder, bottom to top.
    /// Its top `shared_layers` entries are the plain encoder's top layers.
    pub fn adaptive_stack(&self) -> Vec<usize> {
        let c = &self.config;
        let own = c.adaptive_layers() - c.shared_layers;
        (c.encoder_layers..c.encoder_layers + own)
            .chain(c.encoder_layers - c.shared_layers..c.encoder_layers)
            .collect()
    }

    pub fn adaptive_final_norm(&self) -> &LayerNorm {
        self.adaptive_norm.as_ref().unwrap_or(&self.encoder_norm)
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, data| n += data.len());
        n
    }

    /// Every tensor in a fixed order with a stable name and shape.
    pub fn visit(&self, f: TensorVisitor<'_>) {
        let mut emit = |name: String, shape: Vec<usize>, data: &[f32]| f(&name, &shape, data);
        matrix(&mut emit, "src_embed", &self.src_embed);
        matrix(&mut emit, "tgt_embed", &self.tgt_embed);
        matrix(&mut emit, "src_pos", &self.src_pos);
        matrix(&mut emit, "tgt_pos", &self.tgt_pos);
        for (i, l) in self.encoder_pool.iter().enumerate() {
            let p = format!("encoder_pool.{i}");
            norm(&mut emit, &format!("{p}.attn_norm"), &l.attn_norm);
            attention(&mut emit, &format!("{p}.self_attn"), &l.self_attn);
            norm(&mut emit, &format!("{p}.ffn_norm"), &l.ffn_norm);
            linear(&mut emit, &format!("{p}.ffn.up"), &l.ffn.up);
            linear(&mut emit, &format!("{p}.ffn.down"), &l.ffn.down);
        }
        norm(&mut emit, "encoder_norm", &self.encoder_norm);
        if let Some(n) = &self.adaptive_norm {
            norm(&mut emit, "adaptive_norm", n);
        }
        for (i, l) in self.decoder.iter().enumerate() {
            let p = format!("decoder.{i}");
            norm(&mut emit, &format!("{p}.self_norm"), &l.self_norm);
            attention(&mut emit, &format!("{p}.self_attn"), &l.self_attn);
            norm(&mut emit, &format!("{p}.cross_norm"), &l.cross_norm);
            attention(&mut emit, &format!("{p}.cross_attn"), &l.cross_attn);
            norm(&mut emit, &format!("{p}.ffn_norm"), &l.ffn_norm);
            linear(&mut emit, &format!("{p}.ffn.up"), &l.ffn.up);
            linear(&mut emit, &format!("{p}.ffn.down"), &l.ffn.down);
        }
        norm(&mut emit, "decoder_norm", &self.decoder_norm);
        linear(&mut emit, "output", &self.output);
    }

    /// Mutable counterpart of [`visit`](Self::visit), same order and names.
    pub fn visit_mut(&mut self, f: TensorVisitorMut<'_>) {
        let mut emit = |name: String, shape: Vec<usize>, data: &mut [f32]| f(&name, &shape, data);
        matrix_mut(&mut emit, "src_embed", &mut self.src_embed);
        matrix_mut(&mut emit, "tgt_embed", &mut self.tgt_embed);
        matrix_mut(&mut emit, "src_pos", &mut self.src_pos);
        matrix_mut(&mut emit, "tgt_pos", &mut self.tgt_pos);
        for (i, l) in self.encoder_pool.iter_mut().enumerate() {
            let p = format!("encoder_pool.{i}");
            norm_mut(&mut emit, &format!("{p}.attn_norm"), &mut l.attn_norm);
            attention_mut(&mut emit, &format!("{p}.self_attn"), &mut l.self_attn);
            norm_mut(&mut emit, &format!("{p}.ffn_norm"), &mut l.ffn_norm);
            linear_mut(&mut emit, &format!("{p}.ffn.up"), &mut l.ffn.up);
            linear_mut(&mut emit, &format!("{p}.ffn.down"), &mut l.ffn.down);
        }
        norm_mut(&mut emit, "encoder_norm", &mut self.encoder_norm);
        if let Some(n) = &mut self.adaptive_norm {
            norm_mut(&mut emit, "adaptive_norm", n);
        }
        for (i, l) in self.decoder.iter_mut().enumerate() {
            let p = format!("decoder.{i}");
            norm_mut(&mut emit, &format!("{p}.self_norm"), &mut l.self_norm);
            attention_mut(&mut emit, &format!("{p}.self_attn"), &mut l.self_attn);
            norm_mut(&mut emit, &format!("{p}.cross_norm"), &mut l.cross_norm);
            attention_mut(&mut emit, &format!("{p}.cross_attn"), &mut l.cross_attn);
            norm_mut(&mut emit, &format!("{p}.ffn_norm"), &mut l.ffn_norm);
            linear_mut(&mut emit, &format!("{p}.ffn.up"), &mut l.ffn.up);
            linear_mut(&mut emit, &format!("{p}.ffn.down"), &mut l.ffn.down);
        }
        norm_mut(&mut emit, "decoder_norm", &mut self.decoder_norm);
        linear_mut(&mut emit, "output", &mut self.output);
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), RdangleError> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        self.visit(&mut |name, shape, data| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: shape.to_vec(),
                offset,
            });
            offset += data.len();
        });
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            seed: self.seed,
            tensors,
        })
        .map_err(|e| RdangleError::WeightsFormat(e.to_string()))?;
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut blob = Vec::with_capacity(offset * 4);
        self.visit(&mut |_, _, data| {
            for x in data {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        });
        w.write_all(&blob)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, RdangleError> {
        let bad = |m: &str| RdangleError::WeightsFormat(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 30 {
            return Err(bad("header too large"));
        }
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header).map_err(|e| RdangleError::WeightsFormat(e.to_string()))?;
        let mut blob = Vec::new();
        r.read_to_end(&mut blob)?;
        if blob.len() % 4 != 0 {
            return Err(bad("tensor blob is not a whole number of f32"));
        }
        let values: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();

        let mut w = Weights::zeros(&header.config)?;
        w.seed = header.seed;
        let mut entries = header.tensors.iter();
        let mut error: Option<RdangleError> = None;
        let mut consumed = 0;
        w.visit_mut(&mut |name, shape, data| {
            if error.is_some() {
                return;
            }
            let Some(entry) = entries.next() else {
                error = Some(bad("header lists too few tensors"));
                return;
            };
            if entry.name != name || entry.shape != shape {
                error = Some(RdangleError::WeightsFormat(format!(
                    "expected tensor {name} {shape:?}, found {} {:?}",
                    entry.name, entry.shape
                )));
                return;
            }
            let end = entry.offset + data.len();
            if end > values.len() {
                error = Some(RdangleError::WeightsFormat(format!("tensor {name} runs past end of data")));
                return;
            }
            data.copy_from_slice(&values[entry.offset..end]);
            consumed += data.len();
        });
        if let Some(e) = error {
            return Err(e);
        }
        if entries.next().is_some() || consumed != values.len() {
            return Err(bad("header and data disagree on tensor count"));
        }
        Ok(w)
    }
}

fn matrix(emit: &mut impl FnMut(String, Vec<usize>, &[f32]), name: &str, m: &Matrix) {
    emit(name.to_string(), vec![m.rows(), m.cols()], m.data());
}

fn linear(emit: &mut impl FnMut(String, Vec<usize>, &[f32]), name: &str, l: &Linear) {
    matrix(emit, &format!("{name}.weight"), &l.weight);
    emit(format!("{name}.bias"), vec![l.bias.len()], &l.bias);
}

fn norm(emit: &mut impl FnMut(String, Vec<usize>, &[f32]), name: &str, n: &LayerNorm) {
    emit(format!("{name}.gamma"), vec![n.gamma.len()], &n.gamma);
    emit(format!("{name}.beta"), vec![n.beta.len()], &n.beta);
}

fn attention(emit: &mut impl FnMut(String, Vec<usize>, &[f32]), name: &str, a: &AttentionParams) {
    linear(emit, &format!("{name}.query"), &a.query);
    linear(emit, &format!("{name}.key"), &a.key);
    linear(emit, &format!("{name}.value"), &a.value);
    linear(emit, &format!("{name}.output"), &a.output);
}

fn matrix_mut(emit: &mut impl FnMut(String, Vec<usize>, &mut [f32]), name: &str, m: &mut Matrix) {
    let shape = vec![m.rows(), m.cols()];
    emit(name.to_string(), shape, m.data_mut());
}

fn linear_mut(emit: &mut impl FnMut(String, Vec<usize>, &mut [f32]), name: &str, l: &mut Linear) {
    matrix_mut(emit, &format!("{name}.weight"), &mut l.weight);
    let shape = vec![l.bias.len()];
    emit(format!("{name}.bias"), shape, &mut l.bias);
}

fn norm_mut(emit: &mut impl FnMut(String, Vec<usize>, &mut [f32]), name: &str, n: &mut LayerNorm) {
    let shape = vec![n.gamma.len()];
    emit(format!("{name}.gamma"), shape.clone(), &mut n.gamma);
    emit(format!("{name}.beta"), shape, &mut n.beta);
}

fn attention_mut(emit: &mut impl FnMut(String, Vec<usize>, &mut [f32]), name: &str, a: &mut AttentionParams) {
    linear_mut(emit, &format!("{name}.query"), &mut a.query);
    linear_mut(emit, &format!("{name}.key"), &mut a.key);
    linear_mut(emit, &format!("{name}.value"), &mut a.value);
    linear_mut(emit, &format!("{name}.output"), &mut a.output);
}
