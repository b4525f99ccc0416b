//! Encoders, cached decoder and the per-variant decode loop.
//!
//! Target positions are one-based in the public API: step `t` consumes
//! `y_t` (with `y_1` = BOS) and yields the logits for `y_{t+1}`. At a
//! re-encoding point `t_i` the source is re-encoded with `y_1..=y_{t_i}`
//! before `y_{t_i}` is decoded, and the target memory is rebuilt from empty.

use std::sync::Arc;

use super::attention::{attend, Mask};
use super::config::{Interval, ModelConfig, Variant};
use super::schedule::{build_schedule, ReEncodingSchedule};
use super::tensor::{argmax, Matrix};
use super::weights::{AttentionParams, DecoderLayer, EncoderLayer, Weights};
use super::RdangleError;

/// Source-side encodings as seen by every decoder layer's cross-attention.
#[derive(Debug, Clone)]
pub struct CrossEncodings {
    /// Encodings the keys are projected from.
    pub keys_src: Arc<Matrix>,
    /// Encodings the values are projected from.
    pub values_src: Arc<Matrix>,
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
}

impl CrossEncodings {
    pub fn source_len(&self) -> usize {
        self.keys_src.rows()
    }

    /// Projected keys and values for one decoder layer.
    pub fn layer(&self, l: usize) -> (&Matrix, &Matrix) {
        (&self.keys[l], &self.values[l])
    }
}

/// Cached target-side state for positions `1..=len()`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TargetMemory {
    tokens: Vec<u32>,
    /// Per layer: the layer's input hidden states.
    states: Vec<Matrix>,
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
}

impl TargetMemory {
    pub fn new() -> Self {
        TargetMemory::default()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Input hidden states of decoder layer `l`, one row per position.
    pub fn states(&self, l: usize) -> Option<&Matrix> {
        self.states.get(l)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum DecodeMode<'a> {
    /// Feed this target prefix (starting with BOS) one token per step.
    Forced(&'a [u32]),
    /// Start from BOS, feed back the argmax, stop after EOS or `max_len`
    /// generated tokens.
    Greedy { max_len: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StepTrace {
    pub step: usize,
    /// Re-encoding point whose encodings this step used.
    pub point: usize,
    pub reencoded: bool,
    pub key_hash: String,
    pub value_hash: String,
    pub token: u32,
}

/// Source encodings consumed at one step.
#[derive(Debug, Clone)]
pub struct StepEncodings {
    pub keys: Arc<Matrix>,
    pub values: Arc<Matrix>,
}

#[derive(Debug, Clone)]
pub struct DecodeOutcome {
    /// Argmax token per step (for greedy decoding, the generated sequence).
    pub tokens: Vec<u32>,
    pub logits: Vec<Vec<f32>>,
    pub trace: Vec<StepTrace>,
    pub encodings: Vec<StepEncodings>,
}

pub struct Engine<'w> {
    config: ModelConfig,
    weights: &'w Weights,
}

impl<'w> Engine<'w> {
    /// `config` may change the variant, interval and fusion switch, but the
    /// architecture must match the weights.
    pub fn new(config: &ModelConfig, weights: &'w Weights) -> Result<Self, RdangleError> {
        config.validate()?;
        if !config.same_architecture(&weights.config) {
            return Err(RdangleError::Config("configuration does not match weights".into()));
        }
        Ok(Engine {
            config: config.clone(),
            weights,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self, max_len: usize) -> ReEncodingSchedule {
        match self.config.variant {
            Variant::Vanilla => build_schedule(Interval::Infinite, max_len),
            Variant::Dangle => build_schedule(Interval::Every(1), max_len),
            Variant::RdangleShr | Variant::RdangleSep => build_schedule(self.config.interval, max_len),
        }
    }

    fn embed(&self, table: &Matrix, pos: &Matrix, tokens: &[u32], offset: usize) -> Result<Matrix, RdangleError> {
        let max = self.config.max_positions;
        if offset + tokens.len() > max {
            return Err(RdangleError::TooLong {
                len: offset + tokens.len(),
                max,
            });
        }
        let d = self.config.d_model;
        let mut out = Matrix::zeros(tokens.len(), d);
        for (i, &tok) in tokens.iter().enumerate() {
            if tok as usize >= table.rows() {
                return Err(RdangleError::TokenOutOfVocab {
                    token: tok,
                    vocab: table.rows(),
                });
            }
            let row = out.row_mut(i);
            for ((o, e), p) in row.iter_mut().zip(table.row(tok as usize)).zip(pos.row(offset + i)) {
                *o = e + p;
            }
        }
        Ok(out)
    }

    fn embed_source(&self, x: &[u32]) -> Result<Matrix, RdangleError> {
        if x.is_empty() {
            return Err(RdangleError::EmptyInput);
        }
        self.embed(&self.weights.src_embed, &self.weights.src_pos, x, 0)
    }

    fn encoder_layer(&self, layer: &EncoderLayer, x: &Matrix, mask: Mask) -> Result<Matrix, RdangleError> {
        let a = layer.attn_norm.forward(x);
        let mut h = x.clone();
        h.add_assign(&self_attention(&layer.self_attn, &a, &a, self.config.n_heads, mask)?);
        let f = layer.ffn.forward(&layer.ffn_norm.forward(&h));
        h.add_assign(&f);
        Ok(h)
    }

    /// Plain encoder: `N` for vanilla decoding, the value encodings for
    /// `rdangle_sep`.
    pub fn encode(&self, x: &[u32]) -> Result<Matrix, RdangleError> {
        let mut h = self.embed_source(x)?;
        for i in self.weights.encoder_stack() {
            h = self.encoder_layer(&self.weights.encoder_pool[i], &h, Mask::Full)?;
        }
        Ok(self.weights.encoder_norm.forward(&h))
    }

    /// Output of the `k1` fusion layers over `[x; prefix]`, all `n + t` rows.
    pub fn adaptive_fused(&self, x: &[u32], prefix: &[u32]) -> Result<Matrix, RdangleError> {
        if prefix.is_empty() {
            return Err(RdangleError::EmptyInput);
        }
        let n = x.len();
        if n + prefix.len() > self.config.max_positions {
            return Err(RdangleError::TooLong {
                len: n + prefix.len(),
                max: self.config.max_positions,
            });
        }
        let mut h = self.embed_source(x)?;
        h.append_rows(&self.embed(&self.weights.tgt_embed, &self.weights.tgt_pos, prefix, 0)?);
        let mask = if self.config.fuse_target {
            Mask::Full
        } else {
            Mask::SourceOnly { source_len: n }
        };
        for &i in &self.weights.adaptive_stack()[..self.config.k1] {
            h = self.encoder_layer(&self.weights.encoder_pool[i], &h, mask)?;
        }
        Ok(h)
    }

    /// Adaptive encodings `H_t`: fusion layers, keep the source rows, then
    /// `k2` layers over them. Always `n` rows.
    pub fn adaptive_encode(&self, x: &[u32], prefix: &[u32]) -> Result<Matrix, RdangleError> {
        let mut h = self.adaptive_fused(x, prefix)?.truncate_rows(x.len());
        for &i in &self.weights.adaptive_stack()[self.config.k1..] {
            h = self.encoder_layer(&self.weights.encoder_pool[i], &h, Mask::Full)?;
        }
        Ok(self.weights.adaptive_final_norm().forward(&h))
    }

    /// Projects key and value encodings through every decoder layer's
    /// cross-attention.
    pub fn cross_encodings(&self, keys: Arc<Matrix>, values: Arc<Matrix>) -> Result<CrossEncodings, RdangleError> {
        if keys.rows() != values.rows() {
            return Err(RdangleError::Shape(format!(
                "{} key encodings but {} value encodings",
                keys.rows(),
                values.rows()
            )));
        }
        let d = self.config.d_model;
        if keys.cols() != d || values.cols() != d {
            return Err(RdangleError::Shape(format!("encodings must have width {d}")));
        }
        let (k, v) = self
            .weights
            .decoder
            .iter()
            .map(|l| (l.cross_attn.key.forward(&keys), l.cross_attn.value.forward(&values)))
            .unzip();
        Ok(CrossEncodings {
            keys_src: keys,
            values_src: values,
            keys: k,
            values: v,
        })
    }

    fn decoder_layer(
        &self,
        l: usize,
        layer: &DecoderLayer,
        x: &Matrix,
        offset: usize,
        mem: &mut TargetMemory,
        enc: &CrossEncodings,
    ) -> Result<Matrix, RdangleError> {
        let heads = self.config.n_heads;
        let a = layer.self_norm.forward(x);
        let q = layer.self_attn.query.forward(&a);
        mem.states[l].append_rows(x);
        mem.keys[l].append_rows(&layer.self_attn.key.forward(&a));
        mem.values[l].append_rows(&layer.self_attn.value.forward(&a));
        let o = attend(&q, &mem.keys[l], &mem.values[l], heads, Mask::Causal { offset }, None)?;
        let mut h = x.clone();
        h.add_assign(&layer.self_attn.output.forward(&o));

        let c = layer.cross_norm.forward(&h);
        let q = layer.cross_attn.query.forward(&c);
        let (ck, cv) = enc.layer(l);
        let o = attend(&q, ck, cv, heads, Mask::Full, None)?;
        h.add_assign(&layer.cross_attn.output.forward(&o));

        let f = layer.ffn.forward(&layer.ffn_norm.forward(&h));
        h.add_assign(&f);
        Ok(h)
    }

    /// Decodes `tokens` at the positions following `mem`, extending it.
    /// Returns one row of logits per token.
    pub fn decode_block(
        &self,
        tokens: &[u32],
        mem: &mut TargetMemory,
        enc: &CrossEncodings,
    ) -> Result<Matrix, RdangleError> {
        if tokens.is_empty() {
            return Err(RdangleError::EmptyInput);
        }
        let n_layers = self.weights.decoder.len();
        if mem.states.len() != n_layers {
            if !mem.is_empty() {
                return Err(RdangleError::Shape("target memory built for another decoder".into()));
            }
            let d = self.config.d_model;
            mem.states = vec![Matrix::zeros(0, d); n_layers];
            mem.keys = vec![Matrix::zeros(0, d); n_layers];
            mem.values = vec![Matrix::zeros(0, d); n_layers];
        }
        let offset = mem.len();
        let mut h = self.embed(&self.weights.tgt_embed, &self.weights.tgt_pos, tokens, offset)?;
        for (l, layer) in self.weights.decoder.iter().enumerate() {
            h = self.decoder_layer(l, layer, &h, offset, mem, enc)?;
        }
        mem.tokens.extend_from_slice(tokens);
        Ok(self.weights.output.forward(&self.weights.decoder_norm.forward(&h)))
    }

    /// One cached step: consumes `y_t` given memory for `y_1..y_{t-1}`.
    pub fn decode_step(
        &self,
        token: u32,
        t: usize,
        mem: &mut TargetMemory,
        enc: &CrossEncodings,
    ) -> Result<Vec<f32>, RdangleError> {
        if t == 0 || mem.len() != t - 1 {
            return Err(RdangleError::MemoryMismatch {
                memory: mem.len(),
                expected: t.saturating_sub(1),
            });
        }
        let logits = self.decode_block(&[token], mem, enc)?;
        Ok(logits.row(0).to_vec())
    }

    /// All target states recomputed from an empty memory.
    pub fn decode_fresh(&self, prefix: &[u32], enc: &CrossEncodings) -> Result<(Matrix, TargetMemory), RdangleError> {
        let mut mem = TargetMemory::new();
        let logits = self.decode_block(prefix, &mut mem, enc)?;
        Ok((logits, mem))
    }

    /// Cached step with keys from `hk` and values from `hv`.
    pub fn kv_decode_step(
        &self,
        token: u32,
        t: usize,
        mem: &mut TargetMemory,
        hv: &Arc<Matrix>,
        hk: &Arc<Matrix>,
    ) -> Result<Vec<f32>, RdangleError> {
        let enc = self.cross_encodings(Arc::clone(hk), Arc::clone(hv))?;
        self.decode_step(token, t, mem, &enc)
    }

    /// Encodings to use from re-encoding point `t` on.
    fn encodings_at(
        &self,
        x: &[u32],
        prefix: &[u32],
        plain: &mut Option<Arc<Matrix>>,
    ) -> Result<CrossEncodings, RdangleError> {
        let mut plain_encoding = || -> Result<Arc<Matrix>, RdangleError> {
            if plain.is_none() {
                *plain = Some(Arc::new(self.encode(x)?));
            }
            Ok(Arc::clone(plain.as_ref().unwrap()))
        };
        match self.config.variant {
            Variant::Vanilla => {
                let n = plain_encoding()?;
                self.cross_encodings(Arc::clone(&n), n)
            }
            Variant::Dangle | Variant::RdangleShr => {
                let h = Arc::new(self.adaptive_encode(x, prefix)?);
                self.cross_encodings(Arc::clone(&h), h)
            }
            Variant::RdangleSep => {
                let hv = plain_encoding()?;
                let hk = Arc::new(self.adaptive_encode(x, prefix)?);
                self.cross_encodings(hk, hv)
            }
        }
    }

    pub fn run(&self, x: &[u32], mode: DecodeMode<'_>) -> Result<DecodeOutcome, RdangleError> {
        if x.is_empty() {
            return Err(RdangleError::EmptyInput);
        }
        let (mut prefix, steps) = match mode {
            DecodeMode::Forced(p) => {
                if p.is_empty() {
                    return Err(RdangleError::EmptyInput);
                }
                (p.to_vec(), p.len())
            }
            DecodeMode::Greedy { max_len } => (vec![self.config.bos], max_len),
        };
        let greedy = matches!(mode, DecodeMode::Greedy { .. });
        let schedule = self.schedule(steps);
        let mut out = DecodeOutcome {
            tokens: Vec::new(),
            logits: Vec::new(),
            trace: Vec::new(),
            encodings: Vec::new(),
        };
        let mut plain = None;
        let mut mem = TargetMemory::new();
        let mut current: Option<(CrossEncodings, usize, String, String)> = None;

        for t in 1..=steps {
            let reencode = current.is_none() || schedule.is_point(t);
            let logits = if self.config.variant == Variant::Dangle {
                // every step: fresh encodings and all target states from scratch
                let enc = self.encodings_at(x, &prefix[..t], &mut plain)?;
                let (logits, _) = self.decode_fresh(&prefix[..t], &enc)?;
                current = Some(with_hashes(enc, t));
                logits.row(t - 1).to_vec()
            } else if reencode {
                let enc = self.encodings_at(x, &prefix[..t], &mut plain)?;
                let (logits, fresh) = self.decode_fresh(&prefix[..t], &enc)?;
                mem = fresh;
                current = Some(with_hashes(enc, t));
                logits.row(t - 1).to_vec()
            } else {
                let (enc, ..) = current.as_ref().unwrap();
                self.decode_step(prefix[t - 1], t, &mut mem, enc)?
            };
            if logits.iter().any(|v| !v.is_finite()) {
                return Err(RdangleError::NonFinite { step: t });
            }
            let (enc, point, key_hash, value_hash) = current.as_ref().unwrap();
            let token = argmax(&logits) as u32;
            out.trace.push(StepTrace {
                step: t,
                point: *point,
                reencoded: reencode,
                key_hash: key_hash.clone(),
                value_hash: value_hash.clone(),
                token,
            });
            out.encodings.push(StepEncodings {
                keys: Arc::clone(&enc.keys_src),
                values: Arc::clone(&enc.values_src),
            });
            out.logits.push(logits);
            out.tokens.push(token);
            if greedy {
                if token == self.config.eos {
                    break;
                }
                prefix.push(token);
            }
        }
        Ok(out)
    }
}

fn with_hashes(enc: CrossEncodings, point: usize) -> (CrossEncodings, usize, String, String) {
    let k = enc.keys_src.digest();
    let v = if Arc::ptr_eq(&enc.keys_src, &enc.values_src) {
        k.clone()
    } else {
        enc.values_src.digest()
    };
    (enc, point, k, v)
}

fn self_attention(
    p: &AttentionParams,
    queries_from: &Matrix,
    keys_from: &Matrix,
    heads: usize,
    mask: Mask,
) -> Result<Matrix, RdangleError> {
    let q = p.query.forward(queries_from);
    let k = p.key.forward(keys_from);
    let v = p.value.forward(keys_from);
    Ok(p.output.forward(&attend(&q, &k, &v, heads, mask, None)?))
}

/// Greedy decode of `x` with the variant and interval in `cfg`. The
/// returned tokens exclude BOS and include EOS when it was produced.
pub fn greedy_decode(cfg: &ModelConfig, w: &Weights, x: &[u32], max_len: usize) -> Result<Vec<u32>, RdangleError> {
    Ok(Engine::new(cfg, w)?.run(x, DecodeMode::Greedy { max_len })?.tokens)
}
