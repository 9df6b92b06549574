//! Autoregressive inference: type-constrained greedy, beam, and nucleus
//! decoding over the KV-cached step path, with an early stop on END.
//!
//! END is legal only at object boundaries (interior offsets that are
//! multiples of ten), so every emitted sequence parses into whole objects.
//! If the length budget runs out first, the sequence is truncated to the
//! last complete object and END is appended.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::Box3D;
use crate::model::infer::{new_cache, step, DecodeCache};
use crate::model::{encoder, BevFeatures, BoundParams, DecoderConfig, EncoderConfig, ModelParams};
use crate::scenegen::Point;
use crate::tokenizer::{decode_scene, SceneSequence, VocabLayout, END, START};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Greedy,
    Beam { width: usize },
    Nucleus { top_p: f64, top_k: usize, temperature: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub t_max: usize,
    /// Mask logits to the token kinds legal at each position.
    pub constrain: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum DecodeConfigError {
    #[error("beam width must be >= 1")]
    BadWidth,
    #[error("top_p must be in (0, 1], got {0}")]
    BadTopP(f64),
    #[error("top_k must be >= 1")]
    BadTopK,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("t_max {0} cannot hold START and END")]
    BadTMax(usize),
}

impl DecodeConfig {
    pub fn new(strategy: Strategy, t_max: usize) -> Self {
        DecodeConfig {
            strategy,
            t_max,
            constrain: true,
        }
    }

    pub fn validate(&self) -> Result<(), DecodeConfigError> {
        if self.t_max < 2 {
            return Err(DecodeConfigError::BadTMax(self.t_max));
        }
        match self.strategy {
            Strategy::Greedy => Ok(()),
            Strategy::Beam { width } => {
                if width < 1 {
                    Err(DecodeConfigError::BadWidth)
                } else {
                    Ok(())
                }
            }
            Strategy::Nucleus { top_p, top_k, temperature, .. } => {
                if !(top_p > 0.0 && top_p <= 1.0) {
                    Err(DecodeConfigError::BadTopP(top_p))
                } else if top_k < 1 {
                    Err(DecodeConfigError::BadTopK)
                } else if temperature <= 0.0 {
                    Err(DecodeConfigError::BadTemperature(temperature))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Masks `logits` in place to the tokens legal at `interior_position`:
/// the slot's segment, plus END at object boundaries. PAD and START never
/// survive.
pub fn constrain_logits(logits: &mut [f64], interior_position: usize, layout: &VocabLayout) {
    let legal = layout.expected_kind(interior_position);
    let range = legal.segment_range(layout);
    let keep_end = legal.allow_end;
    let end_logit = logits[END as usize];
    let mut masked = vec![f64::NEG_INFINITY; logits.len()];
    masked[range.start as usize..range.end as usize]
        .copy_from_slice(&logits[range.start as usize..range.end as usize]);
    if keep_end {
        masked[END as usize] = end_logit;
    }
    logits.copy_from_slice(&masked);
}

/// Greedy argmax with the lowest token ID winning ties.
fn argmax(logits: &[f64]) -> u32 {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best as u32
}

/// Interior token budget: whole objects only.
pub(crate) fn interior_capacity(t_max: usize) -> usize {
    ((t_max - 2) / 10) * 10
}

pub(crate) fn finish_sequence(mut interior: Vec<u32>) -> SceneSequence {
    interior.truncate(interior.len() / 10 * 10);
    let mut tokens = Vec::with_capacity(interior.len() + 2);
    tokens.push(START);
    tokens.extend_from_slice(&interior);
    tokens.push(END);
    SceneSequence(tokens)
}

/// Deterministic greedy decoding on the KV-cache path.
pub fn greedy_decode(
    features: &BevFeatures,
    params: &ModelParams,
    dec: &DecoderConfig,
    cfg: &DecodeConfig,
    layout: &VocabLayout,
) -> SceneSequence {
    let cap = interior_capacity(cfg.t_max.min(dec.t_max));
    let mut cache = new_cache(params, dec, features);
    let mut logits = step(params, dec, &mut cache, START);
    let mut interior: Vec<u32> = Vec::new();
    loop {
        if cfg.constrain {
            constrain_logits(&mut logits, interior.len(), layout);
        }
        let tok = argmax(&logits);
        if tok == END {
            break;
        }
        interior.push(tok);
        if interior.len() >= cap {
            break;
        }
        logits = step(params, dec, &mut cache, tok);
    }
    finish_sequence(interior)
}

/// Greedy decoding that re-runs the full tape forward every step; the
/// equivalence partner for the cached path.
pub fn greedy_decode_full_recompute(
    features: &BevFeatures,
    params: &ModelParams,
    dec: &DecoderConfig,
    cfg: &DecodeConfig,
    layout: &VocabLayout,
) -> SceneSequence {
    use crate::autodiff::{Tape, Tensor};
    let cap = interior_capacity(cfg.t_max.min(dec.t_max));
    let mut prefix: Vec<u32> = vec![START];
    let mut interior: Vec<u32> = Vec::new();
    loop {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params);
        let f = tape.leaf(Tensor::from_vec(
            &[features.cells(), features.dim],
            features.data.clone(),
        ));
        let logits_var =
            crate::model::decoder::decoder_forward(&mut tape, f, &prefix, &bound, dec, None);
        let v = dec.vocab_size as usize;
        let t = prefix.len();
        let mut logits = tape.value(logits_var)[(t - 1) * v..t * v].to_vec();
        if cfg.constrain {
            constrain_logits(&mut logits, interior.len(), layout);
        }
        let tok = argmax(&logits);
        if tok == END {
            break;
        }
        interior.push(tok);
        if interior.len() >= cap {
            break;
        }
        prefix.push(tok);
    }
    finish_sequence(interior)
}

struct Hypothesis {
    interior: Vec<u32>,
    log_prob: f64,
    cache: DecodeCache,
    logits: Vec<f64>,
}

struct Finished {
    interior: Vec<u32>,
    log_prob: f64,
}

impl Finished {
    /// Length-normalized score; token count includes the END emission.
    fn normalized(&self) -> f64 {
        self.log_prob / (self.interior.len() + 1) as f64
    }
}

/// Standard beam search over constrained logits. Hypotheses that emit END
/// freeze; the final answer maximizes length-normalized log-probability with
/// deterministic tie-breaks (lower token IDs win).
pub fn beam_decode(
    features: &BevFeatures,
    params: &ModelParams,
    dec: &DecoderConfig,
    cfg: &DecodeConfig,
    layout: &VocabLayout,
    width: usize,
) -> SceneSequence {
    assert!(width >= 1, "beam width must be >= 1");
    let cap = interior_capacity(cfg.t_max.min(dec.t_max));
    let mut cache = new_cache(params, dec, features);
    let first_logits = step(params, dec, &mut cache, START);
    let mut live = vec![Hypothesis {
        interior: Vec::new(),
        log_prob: 0.0,
        cache,
        logits: first_logits,
    }];
    let mut finished: Vec<Finished> = Vec::new();

    while !live.is_empty() {
        // (parent, token, cumulative log-prob)
        let mut candidates: Vec<(usize, u32, f64)> = Vec::new();
        for (hi, hyp) in live.iter().enumerate() {
            let mut logits = hyp.logits.clone();
            if cfg.constrain {
                constrain_logits(&mut logits, hyp.interior.len(), layout);
            }
            let lse = crate::autodiff::kernels::log_sum_exp(&logits);
            for (tok, &lv) in logits.iter().enumerate() {
                if lv == f64::NEG_INFINITY {
                    continue;
                }
                candidates.push((hi, tok as u32, hyp.log_prob + (lv - lse)));
            }
        }
        candidates.sort_by(|a, b| {
            b.2.total_cmp(&a.2)
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        candidates.truncate(width);

        let mut next_live = Vec::with_capacity(width);
        for (parent, tok, lp) in candidates {
            let hyp = &live[parent];
            if tok == END {
                finished.push(Finished {
                    interior: hyp.interior.clone(),
                    log_prob: lp,
                });
                continue;
            }
            let mut interior = hyp.interior.clone();
            interior.push(tok);
            if interior.len() >= cap {
                // Budget exhausted: close out with whole objects only.
                interior.truncate(interior.len() / 10 * 10);
                finished.push(Finished {
                    interior,
                    log_prob: lp,
                });
                continue;
            }
            let mut cache = hyp.cache.clone();
            let logits = step(params, dec, &mut cache, tok);
            next_live.push(Hypothesis {
                interior,
                log_prob: lp,
                cache,
                logits,
            });
        }
        live = next_live;
    }

    let best = finished
        .iter()
        .min_by(|a, b| {
            b.normalized()
                .total_cmp(&a.normalized())
                .then(a.interior.cmp(&b.interior))
        })
        .expect("beam search always finishes at least one hypothesis");
    finish_sequence(best.interior.clone())
}

/// Temperature + top-k + top-p sampling over constrained logits,
/// deterministic per seed.
pub fn nucleus_decode(
    features: &BevFeatures,
    params: &ModelParams,
    dec: &DecoderConfig,
    cfg: &DecodeConfig,
    layout: &VocabLayout,
    top_p: f64,
    top_k: usize,
    temperature: f64,
    seed: u64,
) -> SceneSequence {
    let cap = interior_capacity(cfg.t_max.min(dec.t_max));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache = new_cache(params, dec, features);
    let mut logits = step(params, dec, &mut cache, START);
    let mut interior: Vec<u32> = Vec::new();
    loop {
        if cfg.constrain {
            constrain_logits(&mut logits, interior.len(), layout);
        }
        // Candidate (token, probability), sorted by descending probability
        // with lower IDs first on ties.
        let lse = crate::autodiff::kernels::log_sum_exp(
            &logits.iter().map(|&l| l / temperature).collect::<Vec<f64>>(),
        );
        let mut cands: Vec<(u32, f64)> = logits
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > f64::NEG_INFINITY)
            .map(|(tok, &l)| (tok as u32, (l / temperature - lse).exp()))
            .collect();
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        cands.truncate(top_k);
        // Smallest prefix with cumulative probability >= top_p.
        let mut cum = 0.0;
        let mut keep = cands.len();
        for (i, (_, p)) in cands.iter().enumerate() {
            cum += p;
            if cum >= top_p {
                keep = i + 1;
                break;
            }
        }
        cands.truncate(keep);
        let total: f64 = cands.iter().map(|(_, p)| p).sum();
        let mut u = rng.gen_range(0.0..1.0) * total;
        let mut tok = cands[cands.len() - 1].0;
        for (t, p) in &cands {
            if u < *p {
                tok = *t;
                break;
            }
            u -= p;
        }
        if tok == END {
            break;
        }
        interior.push(tok);
        if interior.len() >= cap {
            break;
        }
        logits = step(params, dec, &mut cache, tok);
    }
    finish_sequence(interior)
}

/// Decodes one sequence with the configured strategy.
pub fn decode_sequence(
    features: &BevFeatures,
    params: &ModelParams,
    dec: &DecoderConfig,
    cfg: &DecodeConfig,
    layout: &VocabLayout,
) -> SceneSequence {
    match cfg.strategy {
        Strategy::Greedy => greedy_decode(features, params, dec, cfg, layout),
        Strategy::Beam { width } => beam_decode(features, params, dec, cfg, layout, width),
        Strategy::Nucleus { top_p, top_k, temperature, seed } => nucleus_decode(
            features, params, dec, cfg, layout, top_p, top_k, temperature, seed,
        ),
    }
}

/// Full detection path: encode points, decode per strategy, detokenize.
/// Threshold-free: no confidences, no NMS.
pub fn detect(
    points: &[Point],
    params: &ModelParams,
    enc: &EncoderConfig,
    dec: &DecoderConfig,
    cfg: &DecodeConfig,
    layout: &VocabLayout,
) -> Vec<Box3D> {
    let features = encoder::encode_points(params, enc, points);
    let seq = decode_sequence(&features, params, dec, cfg, layout);
    decode_scene(&seq, layout).expect("constrained decoding emits parseable sequences")
}
