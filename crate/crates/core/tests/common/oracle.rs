//! Straightforward second implementation of the forward pass: rows as
//! `Vec<f32>`, one query at a time, every sequence recomputed from scratch.

use compforge_core::rdangle::{AttentionParams, Interval, LayerNorm, Linear, ModelConfig, Variant, Weights};

type Rows = Vec<Vec<f32>>;

pub fn layer_norm(x: &[f32], ln: &LayerNorm) -> Vec<f32> {
    let d = x.len() as f32;
    let mean = x.iter().sum::<f32>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / d;
    let denom = (var + 1e-5).sqrt();
    (0..x.len())
        .map(|i| (x[i] - mean) / denom * ln.gamma[i] + ln.beta[i])
        .collect()
}

pub fn linear(x: &[f32], l: &Linear) -> Vec<f32> {
    let out = l.bias.len();
    (0..out)
        .map(|o| {
            let mut s = 0.0f32;
            for (i, xi) in x.iter().enumerate() {
                s += xi * l.weight.row(i)[o];
            }
            s + l.bias[o]
        })
        .collect()
}

/// Per-head scaled dot-product attention over already projected rows.
pub fn attention(q: &Rows, k: &Rows, v: &Rows, heads: usize, allowed: impl Fn(usize, usize) -> bool) -> Rows {
    let d = q[0].len();
    let hd = d / heads;
    let mut out = vec![vec![0.0f32; d]; q.len()];
    for h in 0..heads {
        let lo = h * hd;
        for i in 0..q.len() {
            let mut scores = Vec::new();
            #[allow(clippy::needless_range_loop)]
            for j in 0..k.len() {
                if allowed(i, j) {
                    let mut dot = 0.0f32;
                    for c in lo..lo + hd {
                        dot += q[i][c] * k[j][c];
                    }
                    scores.push((j, dot * (1.0 / (hd as f32).sqrt())));
                }
            }
            let max = scores.iter().map(|s| s.1).fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<(usize, f32)> = scores.iter().map(|&(j, s)| (j, (s - max).exp())).collect();
            let z: f32 = exps.iter().map(|e| e.1).sum();
            for &(j, e) in &exps {
                let p = e / z;
                for c in lo..lo + hd {
                    out[i][c] += p * v[j][c];
                }
            }
        }
    }
    out
}

fn map(rows: &Rows, f: impl Fn(&[f32]) -> Vec<f32>) -> Rows {
    rows.iter().map(|r| f(r)).collect()
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn ffn(x: &[f32], up: &Linear, down: &Linear) -> Vec<f32> {
    let h: Vec<f32> = linear(x, up).into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect();
    linear(&h, down)
}

fn self_block(
    x: &Rows,
    norm: &LayerNorm,
    p: &AttentionParams,
    heads: usize,
    allowed: impl Fn(usize, usize) -> bool,
) -> Rows {
    let a = map(x, |r| layer_norm(r, norm));
    let q = map(&a, |r| linear(r, &p.query));
    let k = map(&a, |r| linear(r, &p.key));
    let v = map(&a, |r| linear(r, &p.value));
    let o = attention(&q, &k, &v, heads, allowed);
    add(x, &map(&o, |r| linear(r, &p.output)))
}

fn encoder_layer(w: &Weights, idx: usize, x: &Rows, allowed: impl Fn(usize, usize) -> bool) -> Rows {
    let l = &w.encoder_pool[idx];
    let h = self_block(x, &l.attn_norm, &l.self_attn, w.config.n_heads, allowed);
    let f = map(&h, |r| ffn(&layer_norm(r, &l.ffn_norm), &l.ffn.up, &l.ffn.down));
    add(&h, &f)
}

fn embed(table: &compforge_core::rdangle::Matrix, pos: &compforge_core::rdangle::Matrix, ids: &[u32]) -> Rows {
    ids.iter()
        .enumerate()
        .map(|(i, &t)| {
            table
                .row(t as usize)
                .iter()
                .zip(pos.row(i))
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect()
}

/// Layer indices of the adaptive encoder, derived from the config alone.
pub fn adaptive_layers(c: &ModelConfig) -> Vec<usize> {
    let own = c.k1 + c.k2 - c.shared_layers;
    let mut v: Vec<usize> = (c.encoder_layers..c.encoder_layers + own).collect();
    v.extend(c.encoder_layers - c.shared_layers..c.encoder_layers);
    v
}

pub fn encode(w: &Weights, x: &[u32]) -> Rows {
    let mut h = embed(&w.src_embed, &w.src_pos, x);
    for l in 0..w.config.encoder_layers {
        h = encoder_layer(w, l, &h, |_, _| true);
    }
    map(&h, |r| layer_norm(r, &w.encoder_norm))
}

fn adaptive_norm(w: &Weights) -> &LayerNorm {
    match &w.adaptive_norm {
        Some(n) => n,
        None => &w.encoder_norm,
    }
}

pub fn adaptive_encode(w: &Weights, x: &[u32], prefix: &[u32], fuse: bool) -> Rows {
    let n = x.len();
    let layers = adaptive_layers(&w.config);
    let mut c = embed(&w.src_embed, &w.src_pos, x);
    c.extend(embed(&w.tgt_embed, &w.tgt_pos, prefix));
    for &l in &layers[..w.config.k1] {
        c = encoder_layer(w, l, &c, |i, j| fuse || i >= n || j < n);
    }
    c.truncate(n);
    for &l in &layers[w.config.k1..] {
        c = encoder_layer(w, l, &c, |_, _| true);
    }
    map(&c, |r| layer_norm(r, adaptive_norm(w)))
}

/// The adaptive stack run over the source alone, ignoring any prefix.
pub fn adaptive_encode_source_only(w: &Weights, x: &[u32]) -> Rows {
    let mut h = embed(&w.src_embed, &w.src_pos, x);
    for l in adaptive_layers(&w.config) {
        h = encoder_layer(w, l, &h, |_, _| true);
    }
    map(&h, |r| layer_norm(r, adaptive_norm(w)))
}

/// Logits at every prefix position, all target states computed from scratch.
pub fn decode_all(w: &Weights, prefix: &[u32], keys_src: &Rows, values_src: &Rows) -> Rows {
    let heads = w.config.n_heads;
    let mut h = embed(&w.tgt_embed, &w.tgt_pos, prefix);
    for l in &w.decoder {
        h = self_block(&h, &l.self_norm, &l.self_attn, heads, |i, j| j <= i);
        let c = map(&h, |r| layer_norm(r, &l.cross_norm));
        let q = map(&c, |r| linear(r, &l.cross_attn.query));
        let k = map(keys_src, |r| linear(r, &l.cross_attn.key));
        let v = map(values_src, |r| linear(r, &l.cross_attn.value));
        let o = attention(&q, &k, &v, heads, |_, _| true);
        h = add(&h, &map(&o, |r| linear(r, &l.cross_attn.output)));
        let f = map(&h, |r| ffn(&layer_norm(r, &l.ffn_norm), &l.ffn.up, &l.ffn.down));
        h = add(&h, &f);
    }
    map(&h, |r| linear(&layer_norm(r, &w.decoder_norm), &w.output))
}

/// Latest re-encoding point at or before step `t`, by walking the points.
pub fn latest_point(variant: Variant, interval: Interval, t: usize) -> usize {
    match (variant, interval) {
        (Variant::Vanilla, _) => 1,
        (Variant::Dangle, _) => t,
        (_, Interval::Infinite) => 1,
        (_, Interval::Every(o)) => {
            let mut p = 1;
            while p + o <= t {
                p += o;
            }
            p
        }
    }
}

/// Key and value source encodings a step-`t` decode must consume.
pub fn step_encodings(cfg: &ModelConfig, w: &Weights, x: &[u32], prefix: &[u32], t: usize) -> (Rows, Rows) {
    let p = latest_point(cfg.variant, cfg.interval, t);
    match cfg.variant {
        Variant::Vanilla => {
            let n = encode(w, x);
            (n.clone(), n)
        }
        Variant::Dangle | Variant::RdangleShr => {
            let h = adaptive_encode(w, x, &prefix[..p], cfg.fuse_target);
            (h.clone(), h)
        }
        Variant::RdangleSep => (adaptive_encode(w, x, &prefix[..p], cfg.fuse_target), encode(w, x)),
    }
}

/// Logits after consuming `prefix[t - 1]` under `cfg`'s schedule.
pub fn step_logits(cfg: &ModelConfig, w: &Weights, x: &[u32], prefix: &[u32], t: usize) -> Vec<f32> {
    let (k, v) = step_encodings(cfg, w, x, prefix, t);
    decode_all(w, &prefix[..t], &k, &v).pop().unwrap()
}
