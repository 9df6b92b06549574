//! Differentiable causal decoder forward pass. Logits at position `t`
//! depend only on tokens `<= t` and the BEV features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BoundAttention, BoundParams, DecoderConfig};
use crate::autodiff::{Tape, Var};

const LN_EPS: f64 = 1e-5;
/// Finite stand-in for -inf in masked attention scores.
pub const MASK_FILL: f64 = -1e30;

/// Training-time dropout. Every dropout site draws from its own stream
/// seeded by `(seed, site index)`, so one site's mask never depends on the
/// tensor sizes of another (padding a batch cannot move earlier masks).
pub struct DropoutCtx {
    pub rate: f64,
    pub seed: u64,
    site: u64,
}

impl DropoutCtx {
    pub fn new(rate: f64, seed: u64) -> Self {
        DropoutCtx {
            rate,
            seed,
            site: 0,
        }
    }

    fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (self.site).wrapping_mul(0x9e3779b97f4a7c15));
        self.site += 1;
        let keep = 1.0 - self.rate;
        let n = tape.value(x).len();
        // Row-major draws: appending rows never changes earlier masks.
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < self.rate {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        tape.dropout_mask(x, mask)
    }
}

fn maybe_dropout(tape: &mut Tape, x: Var, dropout: &mut Option<DropoutCtx>) -> Var {
    match dropout {
        Some(ctx) => ctx.apply(tape, x),
        None => x,
    }
}

fn attention(
    tape: &mut Tape,
    query_src: Var,
    memory: Var,
    attn: &BoundAttention,
    cfg: &DecoderConfig,
    causal: bool,
) -> Var {
    let t = tape.shape(query_src)[0];
    let s = tape.shape(memory)[0];
    let heads = cfg.heads;
    let hd = cfg.head_dim();

    let q = tape.matmul(query_src, attn.wq);
    let q = tape.add_bias(q, attn.bq);
    let k = tape.matmul(memory, attn.wk);
    let k = tape.add_bias(k, attn.bk);
    let v = tape.matmul(memory, attn.wv);
    let v = tape.add_bias(v, attn.bv);

    let causal_mask: Vec<bool> = if causal {
        (0..t * s).map(|idx| idx % s > idx / s).collect()
    } else {
        Vec::new()
    };

    let mut head_ctx = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice(q, 1, h * hd, hd);
        let kh = tape.slice(k, 1, h * hd, hd);
        let vh = tape.slice(v, 1, h * hd, hd);
        let kt = tape.transpose2d(kh);
        let scores = tape.matmul(qh, kt);
        let mut scores = tape.scale(scores, 1.0 / (hd as f64).sqrt());
        if causal {
            scores = tape.masked_fill(scores, &causal_mask, MASK_FILL);
        }
        let probs = tape.softmax(scores, 1);
        head_ctx.push(tape.matmul(probs, vh));
    }
    let ctx = tape.concat(&head_ctx, 1);
    let out = tape.matmul(ctx, attn.wo);
    tape.add_bias(out, attn.bo)
}

/// Logits for every prefix position: `[len(prefix), vocab_size]`.
pub fn decoder_forward(
    tape: &mut Tape,
    features: Var,
    prefix: &[u32],
    bound: &BoundParams,
    cfg: &DecoderConfig,
    mut dropout: Option<DropoutCtx>,
) -> Var {
    let t = prefix.len();
    assert!(
        t <= cfg.t_max,
        "prefix length {t} exceeds T_max {}",
        cfg.t_max
    );
    assert!(t > 0, "decoder needs at least the START token");

    let ids: Vec<usize> = prefix.iter().map(|&tok| tok as usize).collect();
    let tok = tape.embedding_lookup(bound.tok_embedding, &ids);
    let pos = tape.slice(bound.seq_pos, 0, 0, t);
    let mut x = tape.add(tok, pos);

    // Dropout touches only [T, d]-shaped sublayer outputs, drawn row-major:
    // appending padded rows never perturbs the masks of earlier rows.
    for layer in &bound.layers {
        let h = tape.layer_norm(x, layer.ln1.0, layer.ln1.1, LN_EPS);
        let sa = attention(tape, h, h, &layer.self_attn, cfg, true);
        let sa = maybe_dropout(tape, sa, &mut dropout);
        x = tape.add(x, sa);

        let h = tape.layer_norm(x, layer.ln2.0, layer.ln2.1, LN_EPS);
        let ca = attention(tape, h, features, &layer.cross_attn, cfg, false);
        let ca = maybe_dropout(tape, ca, &mut dropout);
        x = tape.add(x, ca);

        let h = tape.layer_norm(x, layer.ln3.0, layer.ln3.1, LN_EPS);
        let u = tape.matmul(h, layer.ffn_w1);
        let u = tape.add_bias(u, layer.ffn_b1);
        let u = tape.gelu(u);
        let y = tape.matmul(u, layer.ffn_w2);
        let y = tape.add_bias(y, layer.ffn_b2);
        let y = maybe_dropout(tape, y, &mut dropout);
        x = tape.add(x, y);
    }

    let xf = tape.layer_norm(x, bound.final_ln.0, bound.final_ln.1, LN_EPS);
    let logits = tape.matmul(xf, bound.out_w);
    tape.add_bias(logits, bound.out_b)
}
