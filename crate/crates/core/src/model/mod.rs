//! The detector network: a pillar-style point-cloud encoder producing
//! bird's-eye-view features, and a causal Transformer decoder that
//! cross-attends to them.

pub mod decoder;
pub mod encoder;
pub mod infer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Side length of the square BEV window, meters, centered on the ego.
    pub bev_extent: f64,
    pub cell_size: f64,
    /// Per-point MLP output dim (the pillar feature).
    pub pillar_dim: usize,
    /// Output feature dim of the BEV grid.
    pub feature_dim: usize,
    /// Per-point MLP depth.
    pub mlp_depth: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            bev_extent: 48.0,
            cell_size: 1.5,
            pillar_dim: 64,
            feature_dim: 128,
            mlp_depth: 2,
        }
    }
}

impl EncoderConfig {
    pub fn grid_side(&self) -> usize {
        let side = self.bev_extent / self.cell_size;
        assert!(
            (side - side.round()).abs() < 1e-9 && side > 0.0,
            "bev_extent {} must be an integer multiple of cell_size {}",
            self.bev_extent,
            self.cell_size
        );
        side.round() as usize
    }

    pub fn grid_cells(&self) -> usize {
        self.grid_side() * self.grid_side()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: u32,
    /// Maximum sequence length (positions in the learned table).
    pub t_max: usize,
    pub dropout: f64,
}

impl DecoderConfig {
    pub fn desk_scale(vocab_size: u32) -> Self {
        DecoderConfig {
            layers: 2,
            heads: 4,
            model_dim: 128,
            ffn_dim: 256,
            vocab_size,
            t_max: 82,
            dropout: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        assert!(
            self.model_dim % self.heads == 0,
            "model_dim {} not divisible by heads {}",
            self.model_dim,
            self.heads
        );
        self.model_dim / self.heads
    }
}

/// The encoder's BEV feature grid (positional embedding already added),
/// row-major over `grid index = ix * side + iy`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatures {
    pub side: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl BevFeatures {
    pub fn cells(&self) -> usize {
        self.side * self.side
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// Per-point MLP: (weight, bias) per layer.
    pub mlp: Vec<(Tensor, Tensor)>,
    pub empty_embedding: Tensor,
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub self_attn: AttentionParams,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub cross_attn: AttentionParams,
    pub ln3_gamma: Tensor,
    pub ln3_beta: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
}

/// All learned weights, with stable names for checkpoints and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub tok_embedding: Tensor,
    pub seq_pos: Tensor,
    pub bev_pos_x: Tensor,
    pub bev_pos_y: Tensor,
    pub layers: Vec<DecoderLayerParams>,
    pub final_ln_gamma: Tensor,
    pub final_ln_beta: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

const INIT_SIGMA: f64 = 0.02;
/// BEV positional tables need enough magnitude to register against
/// unit-scale encoder content.
const BEV_POS_SIGMA: f64 = 0.25;

fn gauss_scaled(shape: &[usize], sigma: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..numel)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect(),
    )
}

fn gauss(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    gauss_scaled(shape, INIT_SIGMA, rng)
}

/// Fan-in (He) scaling for the encoder's ReLU stack, which has no residual
/// stream: a flat small sigma shrinks signals geometrically and starves the
/// decoder of point information.
fn gauss_fan_in(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in = shape[0].max(1) as f64;
    gauss_scaled(shape, (2.0 / fan_in).sqrt(), rng)
}

fn ones(shape: &[usize]) -> Tensor {
    let numel: usize = shape.iter().product();
    Tensor::from_vec(shape, vec![1.0; numel])
}

fn attention_init(in_dim: usize, model_dim: usize, rng: &mut ChaCha8Rng) -> AttentionParams {
    AttentionParams {
        wq: gauss(&[model_dim, model_dim], rng),
        bq: Tensor::zeros(&[model_dim]),
        wk: gauss(&[in_dim, model_dim], rng),
        bk: Tensor::zeros(&[model_dim]),
        wv: gauss(&[in_dim, model_dim], rng),
        bv: Tensor::zeros(&[model_dim]),
        wo: gauss(&[model_dim, model_dim], rng),
        bo: Tensor::zeros(&[model_dim]),
    }
}

/// Deterministic small-scale Gaussian init (sigma 0.02), zero biases,
/// unit layer-norm gains.
pub fn init_params(enc: &EncoderConfig, dec: &DecoderConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = enc.grid_side();
    let d = dec.model_dim;
    let f = enc.feature_dim;
    let v = dec.vocab_size as usize;

    let mut mlp = Vec::with_capacity(enc.mlp_depth);
    let mut in_dim = encoder::POINT_FEATURES;
    for _ in 0..enc.mlp_depth {
        mlp.push((
            gauss_fan_in(&[in_dim, enc.pillar_dim], &mut rng),
            Tensor::zeros(&[enc.pillar_dim]),
        ));
        in_dim = enc.pillar_dim;
    }
    let encoder = EncoderParams {
        mlp,
        empty_embedding: gauss(&[enc.pillar_dim], &mut rng),
        conv1_w: gauss_fan_in(&[9 * enc.pillar_dim, f], &mut rng),
        conv1_b: Tensor::zeros(&[f]),
        conv2_w: gauss_fan_in(&[f, f], &mut rng),
        conv2_b: Tensor::zeros(&[f]),
    };

    let layers = (0..dec.layers)
        .map(|_| DecoderLayerParams {
            ln1_gamma: ones(&[d]),
            ln1_beta: Tensor::zeros(&[d]),
            self_attn: attention_init(d, d, &mut rng),
            ln2_gamma: ones(&[d]),
            ln2_beta: Tensor::zeros(&[d]),
            cross_attn: attention_init(f, d, &mut rng),
            ln3_gamma: ones(&[d]),
            ln3_beta: Tensor::zeros(&[d]),
            ffn_w1: gauss(&[d, dec.ffn_dim], &mut rng),
            ffn_b1: Tensor::zeros(&[dec.ffn_dim]),
            ffn_w2: gauss(&[dec.ffn_dim, d], &mut rng),
            ffn_b2: Tensor::zeros(&[d]),
        })
        .collect();

    ModelParams {
        encoder,
        tok_embedding: gauss(&[v, d], &mut rng),
        seq_pos: gauss(&[dec.t_max, d], &mut rng),
        bev_pos_x: gauss_scaled(&[side, f], BEV_POS_SIGMA, &mut rng),
        bev_pos_y: gauss_scaled(&[side, f], BEV_POS_SIGMA, &mut rng),
        layers,
        final_ln_gamma: ones(&[d]),
        final_ln_beta: Tensor::zeros(&[d]),
        out_w: gauss(&[d, v], &mut rng),
        out_b: Tensor::zeros(&[v]),
    }
}

impl ModelParams {
    /// Stable `(name, tensor)` listing; checkpoint and gradient order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (i, (w, b)) in self.encoder.mlp.iter().enumerate() {
            out.push((format!("enc.mlp{i}.w"), w));
            out.push((format!("enc.mlp{i}.b"), b));
        }
        out.push(("enc.empty".into(), &self.encoder.empty_embedding));
        out.push(("enc.conv1.w".into(), &self.encoder.conv1_w));
        out.push(("enc.conv1.b".into(), &self.encoder.conv1_b));
        out.push(("enc.conv2.w".into(), &self.encoder.conv2_w));
        out.push(("enc.conv2.b".into(), &self.encoder.conv2_b));
        out.push(("tok_emb".into(), &self.tok_embedding));
        out.push(("seq_pos".into(), &self.seq_pos));
        out.push(("bev_pos_x".into(), &self.bev_pos_x));
        out.push(("bev_pos_y".into(), &self.bev_pos_y));
        fn attn_entries<'a>(
            l: usize,
            tag: &str,
            a: &'a AttentionParams,
        ) -> Vec<(String, &'a Tensor)> {
            vec![
                (format!("dec{l}.{tag}.wq"), &a.wq),
                (format!("dec{l}.{tag}.bq"), &a.bq),
                (format!("dec{l}.{tag}.wk"), &a.wk),
                (format!("dec{l}.{tag}.bk"), &a.bk),
                (format!("dec{l}.{tag}.wv"), &a.wv),
                (format!("dec{l}.{tag}.bv"), &a.bv),
                (format!("dec{l}.{tag}.wo"), &a.wo),
                (format!("dec{l}.{tag}.bo"), &a.bo),
            ]
        }
        for (l, lp) in self.layers.iter().enumerate() {
            out.push((format!("dec{l}.ln1.g"), &lp.ln1_gamma));
            out.push((format!("dec{l}.ln1.b"), &lp.ln1_beta));
            out.extend(attn_entries(l, "self", &lp.self_attn));
            out.push((format!("dec{l}.ln2.g"), &lp.ln2_gamma));
            out.push((format!("dec{l}.ln2.b"), &lp.ln2_beta));
            out.extend(attn_entries(l, "cross", &lp.cross_attn));
            out.push((format!("dec{l}.ln3.g"), &lp.ln3_gamma));
            out.push((format!("dec{l}.ln3.b"), &lp.ln3_beta));
            out.push((format!("dec{l}.ffn.w1"), &lp.ffn_w1));
            out.push((format!("dec{l}.ffn.b1"), &lp.ffn_b1));
            out.push((format!("dec{l}.ffn.w2"), &lp.ffn_w2));
            out.push((format!("dec{l}.ffn.b2"), &lp.ffn_b2));
        }
        out.push(("final_ln.g".into(), &self.final_ln_gamma));
        out.push(("final_ln.b".into(), &self.final_ln_beta));
        out.push(("out.w".into(), &self.out_w));
        out.push(("out.b".into(), &self.out_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, (w, b)) in self.encoder.mlp.iter_mut().enumerate() {
            out.push((format!("enc.mlp{i}.w"), w));
            out.push((format!("enc.mlp{i}.b"), b));
        }
        out.push(("enc.empty".into(), &mut self.encoder.empty_embedding));
        out.push(("enc.conv1.w".into(), &mut self.encoder.conv1_w));
        out.push(("enc.conv1.b".into(), &mut self.encoder.conv1_b));
        out.push(("enc.conv2.w".into(), &mut self.encoder.conv2_w));
        out.push(("enc.conv2.b".into(), &mut self.encoder.conv2_b));
        out.push(("tok_emb".into(), &mut self.tok_embedding));
        out.push(("seq_pos".into(), &mut self.seq_pos));
        out.push(("bev_pos_x".into(), &mut self.bev_pos_x));
        out.push(("bev_pos_y".into(), &mut self.bev_pos_y));
        for (l, lp) in self.layers.iter_mut().enumerate() {
            out.push((format!("dec{l}.ln1.g"), &mut lp.ln1_gamma));
            out.push((format!("dec{l}.ln1.b"), &mut lp.ln1_beta));
            for (tag, a) in [("self", &mut lp.self_attn), ("cross", &mut lp.cross_attn)] {
                out.push((format!("dec{l}.{tag}.wq"), &mut a.wq));
                out.push((format!("dec{l}.{tag}.bq"), &mut a.bq));
                out.push((format!("dec{l}.{tag}.wk"), &mut a.wk));
                out.push((format!("dec{l}.{tag}.bk"), &mut a.bk));
                out.push((format!("dec{l}.{tag}.wv"), &mut a.wv));
                out.push((format!("dec{l}.{tag}.bv"), &mut a.bv));
                out.push((format!("dec{l}.{tag}.wo"), &mut a.wo));
                out.push((format!("dec{l}.{tag}.bo"), &mut a.bo));
            }
            out.push((format!("dec{l}.ln2.g"), &mut lp.ln2_gamma));
            out.push((format!("dec{l}.ln2.b"), &mut lp.ln2_beta));
            out.push((format!("dec{l}.ln3.g"), &mut lp.ln3_gamma));
            out.push((format!("dec{l}.ln3.b"), &mut lp.ln3_beta));
            out.push((format!("dec{l}.ffn.w1"), &mut lp.ffn_w1));
            out.push((format!("dec{l}.ffn.b1"), &mut lp.ffn_b1));
            out.push((format!("dec{l}.ffn.w2"), &mut lp.ffn_w2));
            out.push((format!("dec{l}.ffn.b2"), &mut lp.ffn_b2));
        }
        out.push(("final_ln.g".into(), &mut self.final_ln_gamma));
        out.push(("final_ln.b".into(), &mut self.final_ln_beta));
        out.push(("out.w".into(), &mut self.out_w));
        out.push(("out.b".into(), &mut self.out_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Names on the encoder side of the freeze boundary: everything that
    /// produces the BEV features, including the positional tables.
    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("enc.") || name.starts_with("bev_pos_")
    }
}

/// Tape handles mirroring [`ModelParams`], used to run differentiable
/// forward passes.
pub struct BoundParams {
    pub names: Vec<String>,
    pub vars: Vec<Var>,
    pub encoder_mlp: Vec<(Var, Var)>,
    pub encoder_empty: Var,
    pub encoder_conv1: (Var, Var),
    pub encoder_conv2: (Var, Var),
    pub tok_embedding: Var,
    pub seq_pos: Var,
    pub bev_pos_x: Var,
    pub bev_pos_y: Var,
    pub layers: Vec<BoundLayer>,
    pub final_ln: (Var, Var),
    pub out_w: Var,
    pub out_b: Var,
}

pub struct BoundAttention {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

pub struct BoundLayer {
    pub ln1: (Var, Var),
    pub self_attn: BoundAttention,
    pub ln2: (Var, Var),
    pub cross_attn: BoundAttention,
    pub ln3: (Var, Var),
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

impl BoundParams {
    /// Installs every parameter tensor as a leaf on `tape`, in
    /// `named_tensors` order.
    pub fn bind(tape: &mut Tape, params: &ModelParams) -> BoundParams {
        let named = params.named_tensors();
        let mut names = Vec::with_capacity(named.len());
        let mut vars = Vec::with_capacity(named.len());
        let mut by_name = std::collections::HashMap::new();
        for (name, tensor) in named {
            let v = tape.leaf(tensor.clone());
            by_name.insert(name.clone(), v);
            names.push(name);
            vars.push(v);
        }
        let get = |n: &str| *by_name.get(n).unwrap_or_else(|| panic!("missing param {n}"));
        let attn = |l: usize, tag: &str| BoundAttention {
            wq: get(&format!("dec{l}.{tag}.wq")),
            bq: get(&format!("dec{l}.{tag}.bq")),
            wk: get(&format!("dec{l}.{tag}.wk")),
            bk: get(&format!("dec{l}.{tag}.bk")),
            wv: get(&format!("dec{l}.{tag}.wv")),
            bv: get(&format!("dec{l}.{tag}.bv")),
            wo: get(&format!("dec{l}.{tag}.wo")),
            bo: get(&format!("dec{l}.{tag}.bo")),
        };
        BoundParams {
            encoder_mlp: (0..params.encoder.mlp.len())
                .map(|i| (get(&format!("enc.mlp{i}.w")), get(&format!("enc.mlp{i}.b"))))
                .collect(),
            encoder_empty: get("enc.empty"),
            encoder_conv1: (get("enc.conv1.w"), get("enc.conv1.b")),
            encoder_conv2: (get("enc.conv2.w"), get("enc.conv2.b")),
            tok_embedding: get("tok_emb"),
            seq_pos: get("seq_pos"),
            bev_pos_x: get("bev_pos_x"),
            bev_pos_y: get("bev_pos_y"),
            layers: (0..params.layers.len())
                .map(|l| BoundLayer {
                    ln1: (get(&format!("dec{l}.ln1.g")), get(&format!("dec{l}.ln1.b"))),
                    self_attn: attn(l, "self"),
                    ln2: (get(&format!("dec{l}.ln2.g")), get(&format!("dec{l}.ln2.b"))),
                    cross_attn: attn(l, "cross"),
                    ln3: (get(&format!("dec{l}.ln3.g")), get(&format!("dec{l}.ln3.b"))),
                    ffn_w1: get(&format!("dec{l}.ffn.w1")),
                    ffn_b1: get(&format!("dec{l}.ffn.b1")),
                    ffn_w2: get(&format!("dec{l}.ffn.w2")),
                    ffn_b2: get(&format!("dec{l}.ffn.b2")),
                })
                .collect(),
            final_ln: (get("final_ln.g"), get("final_ln.b")),
            out_w: get("out.w"),
            out_b: get("out.b"),
            names,
            vars,
        }
    }

    /// Gradients per parameter name after a backward pass.
    pub fn gradients(&self, tape: &Tape) -> Vec<(String, Vec<f64>)> {
        self.names
            .iter()
            .zip(&self.vars)
            .map(|(n, &v)| (n.clone(), tape.grad(v).to_vec()))
            .collect()
    }
}

/// `emb[i, j] = emb_x[i] + emb_y[j]`, flattened over `i * w + j`. Storage is
/// the two tables, `h*d + w*d`, never the `h*w*d` product.
pub fn bev_positional_embedding(params: &ModelParams) -> Vec<f64> {
    let (h, d) = params.bev_pos_x.dims2();
    let (w, _) = params.bev_pos_y.dims2();
    let mut out = vec![0.0; h * w * d];
    for i in 0..h {
        for j in 0..w {
            let dst = (i * w + j) * d;
            for k in 0..d {
                out[dst + k] = params.bev_pos_x.data[i * d + k] + params.bev_pos_y.data[j * d + k];
            }
        }
    }
    out
}
