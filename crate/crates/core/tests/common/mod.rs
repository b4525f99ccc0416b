#![allow(dead_code)]

pub mod oracle;

use compforge_core::rdangle::{Interval, ModelConfig, Variant, Weights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A small random architecture; every field valid.
pub fn random_config(rng: &mut ChaCha8Rng, variant: Variant, interval: Interval) -> ModelConfig {
    let n_heads = [1, 2, 4][rng.gen_range(0..3)];
    let d_model = n_heads * rng.gen_range(2..5);
    let k1 = rng.gen_range(1..3);
    let k2 = rng.gen_range(0..3);
    let encoder_layers = rng.gen_range(1..4);
    let shared_layers = rng.gen_range(0..=encoder_layers.min(k1 + k2));
    ModelConfig {
        d_model,
        n_heads,
        d_ff: rng.gen_range(4..20),
        encoder_layers,
        decoder_layers: rng.gen_range(1..3),
        k1,
        k2,
        shared_layers,
        src_vocab: rng.gen_range(8..30),
        tgt_vocab: rng.gen_range(8..30),
        max_positions: 64,
        bos: 1,
        eos: 2,
        variant,
        interval,
        fuse_target: rng.gen_bool(0.8),
        position_encoding: compforge_core::rdangle::POSITION_ENCODING.to_string(),
    }
}

pub fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

/// Target prefix starting with BOS.
pub fn random_prefix(rng: &mut ChaCha8Rng, len: usize, vocab: usize, bos: u32) -> Vec<u32> {
    let mut p = vec![bos];
    p.extend(random_tokens(rng, len - 1, vocab));
    p
}

/// Configuration under which `rdangle_shr` with an infinite interval must
/// reproduce vanilla decoding: one shared encoder, no target fusion.
pub fn degenerate_config(layers: usize, k1: usize) -> ModelConfig {
    let mut cfg = ModelConfig::toy(Variant::RdangleShr, Interval::Infinite);
    cfg.encoder_layers = layers;
    cfg.k1 = k1;
    cfg.k2 = layers - k1;
    cfg.shared_layers = layers;
    cfg.fuse_target = false;
    cfg
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

pub fn init(cfg: &ModelConfig, seed: u64) -> Weights {
    Weights::init(cfg, seed).expect("valid config")
}
