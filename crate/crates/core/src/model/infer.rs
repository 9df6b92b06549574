//! Incremental (KV-cached) decoding path. Each step costs one position and
//! reproduces the full-forward logits bit-for-bit: both paths share the
//! kernels in [`crate::autodiff::kernels`] and accumulate in the same order.

use super::{BevFeatures, DecoderConfig, ModelParams};
use crate::autodiff::{kernels, Tensor};

const LN_EPS: f64 = 1e-5;

fn row_linear(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (in_dim, out_dim) = w.dims2();
    debug_assert_eq!(x.len(), in_dim);
    let mut out = vec![0.0; out_dim];
    kernels::matmul_acc(x, &w.data, 1, in_dim, out_dim, &mut out);
    for (o, &bv) in out.iter_mut().zip(&b.data) {
        *o += bv;
    }
    out
}

fn ln_row(x: &[f64], gamma: &Tensor, beta: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    kernels::layer_norm_row(x, &gamma.data, &beta.data, LN_EPS, &mut out);
    out
}

#[derive(Clone)]
struct LayerCache {
    self_k: Vec<f64>,
    self_v: Vec<f64>,
}

struct CrossCache {
    k: Vec<f64>,
    v: Vec<f64>,
}

/// Per-sequence decoding state: grown self-attention K/V plus the fixed
/// cross-attention K/V projected once from the BEV features. Clones share
/// the cross projections, so forking hypotheses (beam search) is cheap.
#[derive(Clone)]
pub struct DecodeCache {
    layers: Vec<LayerCache>,
    cross: std::sync::Arc<Vec<CrossCache>>,
    cells: usize,
    tokens_fed: usize,
}

impl DecodeCache {
    /// Number of tokens consumed so far.
    pub fn len(&self) -> usize {
        self.tokens_fed
    }

    pub fn is_empty(&self) -> bool {
        self.tokens_fed == 0
    }
}

/// Builds the cache for one scene: projects cross-attention keys/values
/// from `features` for every layer.
pub fn new_cache(params: &ModelParams, cfg: &DecoderConfig, features: &BevFeatures) -> DecodeCache {
    let cells = features.cells();
    let d = cfg.model_dim;
    let cross = params
        .layers
        .iter()
        .map(|lp| {
            let project = |w: &Tensor, b: &Tensor| {
                let (f, dd) = w.dims2();
                debug_assert_eq!(dd, d);
                let mut out = vec![0.0; cells * d];
                kernels::matmul_acc(&features.data, &w.data, cells, f, d, &mut out);
                for r in 0..cells {
                    for j in 0..d {
                        out[r * d + j] += b.data[j];
                    }
                }
                out
            };
            CrossCache {
                k: project(&lp.cross_attn.wk, &lp.cross_attn.bk),
                v: project(&lp.cross_attn.wv, &lp.cross_attn.bv),
            }
        })
        .collect();
    DecodeCache {
        layers: vec![
            LayerCache {
                self_k: Vec::new(),
                self_v: Vec::new(),
            };
            params.layers.len()
        ],
        cross: std::sync::Arc::new(cross),
        cells,
        tokens_fed: 0,
    }
}

/// Multi-head attention of a single query row against `rows` cached rows.
fn attend_row(q: &[f64], keys: &[f64], values: &[f64], rows: usize, heads: usize, d: usize) -> Vec<f64> {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx = vec![0.0; d];
    let mut scores = vec![0.0; rows];
    for h in 0..heads {
        let off = h * hd;
        for (j, s) in scores.iter_mut().enumerate() {
            let mut acc = 0.0;
            for p in 0..hd {
                acc += q[off + p] * keys[j * d + off + p];
            }
            *s = acc * scale;
        }
        kernels::softmax_row(&mut scores);
        let ctx_h = &mut ctx[off..off + hd];
        for (j, &a) in scores.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for p in 0..hd {
                ctx_h[p] += a * values[j * d + off + p];
            }
        }
    }
    ctx
}

/// Feeds one token; returns the next-position logits. The cache grows by
/// exactly one position. Panics when the cache already holds `t_max` tokens.
pub fn step(
    params: &ModelParams,
    cfg: &DecoderConfig,
    cache: &mut DecodeCache,
    token: u32,
) -> Vec<f64> {
    let t = cache.tokens_fed;
    assert!(
        t < cfg.t_max,
        "cache length {t} at T_max {}; cannot feed another token",
        cfg.t_max
    );
    let d = cfg.model_dim;
    let tok_row = &params.tok_embedding.data[token as usize * d..(token as usize + 1) * d];
    let pos_row = &params.seq_pos.data[t * d..(t + 1) * d];
    let mut x: Vec<f64> = tok_row.iter().zip(pos_row).map(|(a, b)| a + b).collect();

    for (li, lp) in params.layers.iter().enumerate() {
        let h = ln_row(&x, &lp.ln1_gamma, &lp.ln1_beta);
        let q = row_linear(&h, &lp.self_attn.wq, &lp.self_attn.bq);
        let k = row_linear(&h, &lp.self_attn.wk, &lp.self_attn.bk);
        let v = row_linear(&h, &lp.self_attn.wv, &lp.self_attn.bv);
        let lc = &mut cache.layers[li];
        lc.self_k.extend_from_slice(&k);
        lc.self_v.extend_from_slice(&v);
        let ctx = attend_row(&q, &lc.self_k, &lc.self_v, t + 1, cfg.heads, d);
        let out = row_linear(&ctx, &lp.self_attn.wo, &lp.self_attn.bo);
        for (xi, oi) in x.iter_mut().zip(&out) {
            *xi += oi;
        }

        let h = ln_row(&x, &lp.ln2_gamma, &lp.ln2_beta);
        let q = row_linear(&h, &lp.cross_attn.wq, &lp.cross_attn.bq);
        let cross = &cache.cross[li];
        let ctx = attend_row(&q, &cross.k, &cross.v, cache.cells, cfg.heads, d);
        let out = row_linear(&ctx, &lp.cross_attn.wo, &lp.cross_attn.bo);
        for (xi, oi) in x.iter_mut().zip(&out) {
            *xi += oi;
        }

        let h = ln_row(&x, &lp.ln3_gamma, &lp.ln3_beta);
        let mut u = row_linear(&h, &lp.ffn_w1, &lp.ffn_b1);
        for uv in u.iter_mut() {
            *uv = kernels::gelu(*uv);
        }
        let y = row_linear(&u, &lp.ffn_w2, &lp.ffn_b2);
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi += yi;
        }
    }

    let xf = ln_row(&x, &params.final_ln_gamma, &params.final_ln_beta);
    cache.tokens_fed += 1;
    row_linear(&xf, &params.out_w, &params.out_b)
}
