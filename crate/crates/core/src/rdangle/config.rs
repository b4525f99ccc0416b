use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::RdangleError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Encode once, decode with cached target memory.
    Vanilla,
    /// Re-encode source and recompute all target states at every step.
    Dangle,
    /// Interval re-encoding; keys and values share the adaptive encodings.
    RdangleShr,
    /// Interval re-encoding of keys only; values come from one plain
    /// encoder pass per decode.
    RdangleSep,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Vanilla, Variant::Dangle, Variant::RdangleShr, Variant::RdangleSep];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Dangle => "dangle",
            Variant::RdangleShr => "rdangle_shr",
            Variant::RdangleSep => "rdangle_sep",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = RdangleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| RdangleError::Config(format!("unknown variant {s:?}")))
    }
}

/// Spacing between re-encoding points. `Infinite` re-encodes only at the
/// first step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Interval {
    Every(usize),
    Infinite,
}

impl Interval {
    pub fn every(o: usize) -> Result<Self, RdangleError> {
        if o == 0 {
            return Err(RdangleError::Config("interval must be at least 1".into()));
        }
        Ok(Interval::Every(o))
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Interval::Every(o) => write!(f, "{o}"),
            Interval::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Interval {
    type Err = RdangleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inf" | "infinite" | "∞" => Ok(Interval::Infinite),
            _ => s
                .parse::<usize>()
                .map_err(|_| RdangleError::Config(format!("bad interval {s:?}")))
                .and_then(Interval::every),
        }
    }
}

impl Serialize for Interval {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Interval::Every(o) => s.serialize_u64(*o as u64),
            Interval::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Interval {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Interval::every(n as usize).map_err(serde::de::Error::custom),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Positions are learned absolute embeddings; relative position
/// embeddings are not supported.
pub const POSITION_ENCODING: &str = "learned_absolute";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Depth of the plain encoder (the value encoder for `rdangle_sep`).
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Adaptive encoder: `k1` fusion layers over source + prefix, then `k2`
    /// layers over the source rows.
    pub k1: usize,
    pub k2: usize,
    /// The top `shared_layers` adaptive-encoder layers reuse the top layers
    /// of the plain encoder. `encoder_layers == k1 + k2 == shared_layers`
    /// makes the two encoders one.
    pub shared_layers: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_positions: usize,
    pub bos: u32,
    pub eos: u32,
    pub variant: Variant,
    pub interval: Interval,
    /// When false, source rows in the fusion layers cannot attend to target
    /// rows, so the adaptive encodings ignore the prefix.
    pub fuse_target: bool,
    #[serde(default = "default_position_encoding")]
    pub position_encoding: String,
}

fn default_position_encoding() -> String {
    POSITION_ENCODING.to_string()
}

impl ModelConfig {
    /// A small configuration for tests and simulation.
    pub fn toy(variant: Variant, interval: Interval) -> Self {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            encoder_layers: 2,
            decoder_layers: 2,
            k1: 1,
            k2: 1,
            shared_layers: 0,
            src_vocab: 24,
            tgt_vocab: 24,
            max_positions: 64,
            bos: 1,
            eos: 2,
            variant,
            interval,
            fuse_target: true,
            position_encoding: default_position_encoding(),
        }
    }

    pub fn adaptive_layers(&self) -> usize {
        self.k1 + self.k2
    }

    pub fn validate(&self) -> Result<(), RdangleError> {
        let fail = |m: String| Err(RdangleError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_ff == 0 || self.decoder_layers == 0 {
            return fail("d_ff and decoder_layers must be positive".into());
        }
        if self.adaptive_layers() == 0 {
            return fail("adaptive encoder needs k1 + k2 >= 1".into());
        }
        if self.shared_layers > self.encoder_layers.min(self.adaptive_layers()) {
            return fail(format!(
                "shared_layers {} exceeds min(encoder_layers {}, k1 + k2 {})",
                self.shared_layers,
                self.encoder_layers,
                self.adaptive_layers()
            ));
        }
        if self.src_vocab == 0 || self.tgt_vocab == 0 || self.max_positions == 0 {
            return fail("vocabularies and max_positions must be positive".into());
        }
        if self.bos as usize >= self.tgt_vocab || self.eos as usize >= self.tgt_vocab {
            return fail("bos/eos outside target vocabulary".into());
        }
        if self.position_encoding != POSITION_ENCODING {
            return fail(format!("unsupported position encoding {:?}", self.position_encoding));
        }
        Ok(())
    }

    /// True when both configs describe the same parameter shapes.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        (
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.encoder_layers,
            self.decoder_layers,
            self.k1,
            self.k2,
            self.shared_layers,
            self.src_vocab,
            self.tgt_vocab,
            self.max_positions,
        ) == (
            other.d_model,
            other.n_heads,
            other.d_ff,
            other.encoder_layers,
            other.decoder_layers,
            other.k1,
            other.k2,
            other.shared_layers,
            other.src_vocab,
            other.tgt_vocab,
            other.max_positions,
        )
    }
}
