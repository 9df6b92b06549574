//! Reinforcement fine-tuning: the class-averaged IoU-F1 reward,
//! group-relative advantages, and the clipped policy-gradient update.
//!
//! Rollouts are sampled per scene with constrained multinomial sampling;
//! advantages standardize the G rewards within each group; one gradient
//! ascent step runs per batch with the encoder frozen.

use std::path::PathBuf;

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{adamw_step, AdamHyper, AdamState, Tape, Tensor};
use crate::decoding::{constrain_logits, finish_sequence, interior_capacity};
use crate::geometry::{iou_3d, Box3D};
use crate::model::decoder::decoder_forward;
use crate::model::infer::{new_cache, step};
use crate::model::{encoder, BevFeatures, BoundParams, DecoderConfig, EncoderConfig, ModelParams};
use crate::scenegen::Scene;
use crate::tokenizer::{decode_scene, SceneSequence, VocabLayout, END, START};
use crate::training::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct RLConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub temperature: f64,
    /// Fixed learning rate; no schedule during RL.
    pub lr: f64,
    pub batch_scenes: usize,
    pub steps: usize,
    pub seed: u64,
    pub metrics_path: Option<PathBuf>,
}

impl Default for RLConfig {
    fn default() -> Self {
        RLConfig {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.0,
            temperature: 1.0,
            lr: 1e-4,
            batch_scenes: 4,
            steps: 50,
            seed: 0,
            metrics_path: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum RlError {
    #[error("invalid RL config: {0}")]
    BadConfig(String),
    #[error("non-finite objective {value} at update {step} (mean reward {mean_reward})")]
    NonFiniteObjective {
        step: usize,
        value: f64,
        mean_reward: f64,
    },
    #[error("token {token} is illegal at interior position {position}")]
    IllegalToken { token: u32, position: usize },
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RLConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        if self.group_size < 2 {
            return Err(RlError::BadConfig("group_size must be >= 2".into()));
        }
        if self.clip_eps <= 0.0 {
            return Err(RlError::BadConfig("clip_eps must be positive".into()));
        }
        if self.kl_beta < 0.0 {
            return Err(RlError::BadConfig("kl_beta must be >= 0".into()));
        }
        if self.temperature <= 0.0 {
            return Err(RlError::BadConfig("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Per-category recall/precision/F1 terms of the reward.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryReward {
    pub category: usize,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardBreakdown {
    pub per_category: Vec<CategoryReward>,
    pub reward: f64,
}

/// Class-averaged IoU-F1 reward. Per category: every ground-truth box takes
/// its best IoU against same-category predictions; recall averages those
/// over ground truths, precision sums them over the prediction count, and
/// the category score is their harmonic mean. Categories present on either
/// side count; absent-on-one-side categories score zero. Both lists empty
/// is a perfect (empty) detection and scores 1.
pub fn reward(pred: &[Box3D], gt: &[Box3D]) -> (f64, RewardBreakdown) {
    let mut categories: Vec<usize> = gt
        .iter()
        .chain(pred)
        .map(|b| b.category)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    categories.sort_unstable();
    if categories.is_empty() {
        return (
            1.0,
            RewardBreakdown {
                per_category: Vec::new(),
                reward: 1.0,
            },
        );
    }
    let mut per_category = Vec::with_capacity(categories.len());
    let mut total = 0.0;
    for c in categories {
        let gts: Vec<&Box3D> = gt.iter().filter(|b| b.category == c).collect();
        let preds: Vec<&Box3D> = pred.iter().filter(|b| b.category == c).collect();
        let (recall, precision) = if gts.is_empty() || preds.is_empty() {
            (0.0, 0.0)
        } else {
            let best: Vec<f64> = gts
                .iter()
                .map(|g| {
                    preds
                        .iter()
                        .map(|p| iou_3d(g, p))
                        .fold(0.0f64, f64::max)
                })
                .collect();
            let sum: f64 = best.iter().sum();
            let recall = sum / gts.len() as f64;
            // Near-tangent ground truths can push the sum a hair over the
            // prediction count; keep the stated [0, 1] range.
            let precision = (sum / preds.len() as f64).clamp(0.0, 1.0);
            (recall, precision)
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        total += f1;
        per_category.push(CategoryReward {
            category: c,
            recall,
            precision,
            f1,
        });
    }
    let r = total / per_category.len() as f64;
    (r, RewardBreakdown { per_category, reward: r })
}

/// Group-standardized advantages: `(r_i - mean) / (std_pop + 1e-8)`.
/// A constant group is exactly zero (no rounding residue), which is what
/// makes constant-reward updates provable no-ops.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    assert!(rewards.len() >= 2, "need a group of at least 2 rollouts");
    if rewards.windows(2).all(|w| w[0] == w[1]) {
        return vec![0.0; rewards.len()];
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    rewards.iter().map(|r| (r - mean) / (std + 1e-8)).collect()
}

/// One sampled detection sequence plus its action log-probs under the
/// sampling policy (temperature-1, constrained).
#[derive(Debug, Clone)]
pub struct Rollout {
    /// Sampled interior tokens; may end on a partial object when the length
    /// budget ran out before END.
    pub sampled: Vec<u32>,
    /// Whether END was emitted by the policy (and is scored) rather than
    /// forced by the budget.
    pub ended_naturally: bool,
    /// Log-prob per scored action: each sampled token plus a natural END.
    pub old_log_probs: Vec<f64>,
    pub boxes: Vec<Box3D>,
    pub reward: f64,
}

/// Samples one constrained rollout from the current policy.
pub fn sample_rollout(
    params: &ModelParams,
    dec: &DecoderConfig,
    features: &BevFeatures,
    layout: &VocabLayout,
    gt: &[Box3D],
    temperature: f64,
    seed: u64,
) -> Rollout {
    let cap = interior_capacity(dec.t_max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache = new_cache(params, dec, features);
    let mut logits = step(params, dec, &mut cache, START);
    let mut sampled = Vec::new();
    let mut old_log_probs = Vec::new();
    let mut ended_naturally = false;
    loop {
        constrain_logits(&mut logits, sampled.len(), layout);
        // Temperature-1 log-softmax is what the importance ratios use.
        let lse1 = crate::autodiff::kernels::log_sum_exp(&logits);
        let tok = if (temperature - 1.0).abs() < 1e-12 {
            sample_categorical(&logits, lse1, &mut rng)
        } else {
            let scaled: Vec<f64> = logits.iter().map(|&l| l / temperature).collect();
            let lse_t = crate::autodiff::kernels::log_sum_exp(&scaled);
            sample_categorical(&scaled, lse_t, &mut rng)
        };
        old_log_probs.push(logits[tok as usize] - lse1);
        if tok == END {
            ended_naturally = true;
            break;
        }
        sampled.push(tok);
        if sampled.len() >= cap {
            // Budget forced the stop; the closing END is not an action.
            break;
        }
        logits = step(params, dec, &mut cache, tok);
    }
    let seq = finish_sequence(sampled.clone());
    let boxes = decode_scene(&seq, layout).expect("constrained rollout parses");
    let (r, _) = reward(&boxes, gt);
    Rollout {
        sampled,
        ended_naturally,
        old_log_probs,
        boxes,
        reward: r,
    }
}

fn sample_categorical(logits: &[f64], lse: f64, rng: &mut ChaCha8Rng) -> u32 {
    let mut u: f64 = rng.gen_range(0.0..1.0);
    let mut fallback = 0u32;
    for (tok, &l) in logits.iter().enumerate() {
        if l == f64::NEG_INFINITY {
            continue;
        }
        let p = (l - lse).exp();
        fallback = tok as u32;
        if u < p {
            return tok as u32;
        }
        u -= p;
    }
    fallback
}

/// Per-token log-probabilities of `sequence` under the constrained,
/// temperature-1 policy. Scores every post-START token including END.
pub fn sequence_log_prob(
    params: &ModelParams,
    dec: &DecoderConfig,
    features: &BevFeatures,
    sequence: &SceneSequence,
    layout: &VocabLayout,
) -> Result<Vec<f64>, RlError> {
    let tokens = sequence.tokens();
    assert!(tokens.first() == Some(&START), "sequence must begin with START");
    let mut cache = new_cache(params, dec, features);
    let mut out = Vec::with_capacity(tokens.len() - 1);
    let mut logits = step(params, dec, &mut cache, START);
    for (pos, &tok) in tokens[1..].iter().enumerate() {
        constrain_logits(&mut logits, pos, layout);
        if logits[tok as usize] == f64::NEG_INFINITY {
            return Err(RlError::IllegalToken {
                token: tok,
                position: pos,
            });
        }
        let lse = crate::autodiff::kernels::log_sum_exp(&logits);
        out.push(logits[tok as usize] - lse);
        if tok == END || pos + 2 == tokens.len() {
            break;
        }
        logits = step(params, dec, &mut cache, tok);
    }
    Ok(out)
}

/// Ascent coefficient on each token's new log-prob, realizing
/// `min(rho*A, clip(rho)*A) - beta*KL` exactly where the surrogate is
/// differentiable.
pub(crate) fn surrogate_coefficients(
    new_logp: &[f64],
    old_logp: &[f64],
    advantage: f64,
    clip_eps: f64,
    beta: f64,
    ref_logp: Option<&[f64]>,
) -> (Vec<f64>, f64, f64, f64) {
    assert_eq!(new_logp.len(), old_logp.len());
    let mut coeffs = Vec::with_capacity(new_logp.len());
    let mut objective = 0.0;
    let mut clipped_tokens = 0usize;
    let mut kl_sum = 0.0;
    for (t, (&nl, &ol)) in new_logp.iter().zip(old_logp).enumerate() {
        let rho = (nl - ol).exp();
        let unclipped = rho * advantage;
        let clipped = rho.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
        let surrogate = unclipped.min(clipped);
        let active = unclipped <= clipped;
        if !active {
            clipped_tokens += 1;
        }
        let mut coeff = if active { rho * advantage } else { 0.0 };
        objective += surrogate;
        if beta > 0.0 {
            let rl = ref_logp.expect("reference log-probs required when beta > 0");
            // k3 estimator over the sampled action.
            let r_ref = (rl[t] - nl).exp();
            let k3 = r_ref - 1.0 - (rl[t] - nl);
            kl_sum += k3;
            objective -= beta * k3;
            coeff -= beta * (1.0 - r_ref);
        }
        coeffs.push(coeff);
    }
    let n = new_logp.len().max(1) as f64;
    (
        coeffs,
        objective / n,
        clipped_tokens as f64 / n,
        kl_sum / n,
    )
}

/// Aggregate statistics of one GRPO update.
#[derive(Debug, Clone, PartialEq)]
pub struct RLStats {
    pub mean_reward: f64,
    pub mean_abs_advantage: f64,
    pub clip_fraction: f64,
    pub kl: f64,
    pub objective: f64,
    /// True when every group had constant rewards (zero advantage) and the
    /// parameters were provably left untouched.
    pub no_op: bool,
}

/// Optimizer state for the RL phase: AdamW with zero weight decay at a
/// fixed learning rate.
pub struct RlOptimizer {
    state: Vec<(String, AdamState)>,
    hyper: AdamHyper,
}

impl RlOptimizer {
    pub fn new(params: &ModelParams) -> Self {
        RlOptimizer {
            state: params
                .named_tensors()
                .iter()
                .map(|(n, t)| (n.clone(), AdamState::new(t.numel())))
                .collect(),
            hyper: AdamHyper {
                weight_decay: 0.0,
                ..AdamHyper::default()
            },
        }
    }
}

struct RolloutGrad {
    grads: Vec<(String, Vec<f64>)>,
    objective: f64,
    clip_fraction: f64,
    kl: f64,
}

/// One GRPO step over a batch of scenes: G rollouts per scene from the
/// current policy, group advantages, and a single clipped-surrogate ascent
/// update on the decoder (encoder frozen).
#[allow(clippy::too_many_arguments)]
pub fn grpo_update(
    params: &mut ModelParams,
    ref_params: Option<&ModelParams>,
    scenes: &[&Scene],
    layout: &VocabLayout,
    enc: &EncoderConfig,
    dec: &DecoderConfig,
    cfg: &RLConfig,
    opt: &mut RlOptimizer,
    update_index: usize,
) -> Result<RLStats, RlError> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.sort_by(|&a, &b| scenes[a].id.cmp(&scenes[b].id));

    // Rollout phase (policy fixed, read-only).
    let per_scene: Vec<(usize, BevFeatures, Vec<Rollout>)> = order
        .par_iter()
        .map(|&i| {
            let scene = scenes[i];
            let features = encoder::encode_points(params, enc, &scene.points);
            let rollouts: Vec<Rollout> = (0..cfg.group_size)
                .map(|g| {
                    let seed = derive_seed(
                        cfg.seed,
                        update_index as u64,
                        &format!("{}/{g}", scene.id),
                    );
                    sample_rollout(
                        params,
                        dec,
                        &features,
                        layout,
                        &scene.boxes,
                        cfg.temperature,
                        seed,
                    )
                })
                .collect();
            (i, features, rollouts)
        })
        .collect();

    let all_rewards: Vec<f64> = per_scene
        .iter()
        .flat_map(|(_, _, rs)| rs.iter().map(|r| r.reward))
        .collect();
    let mean_reward = all_rewards.iter().sum::<f64>() / all_rewards.len() as f64;

    // Group advantages per scene.
    let mut jobs: Vec<(usize, &BevFeatures, &Rollout, f64)> = Vec::new();
    let mut mean_abs_adv = 0.0;
    for (i, features, rollouts) in &per_scene {
        let advantages = group_advantages(&rollouts.iter().map(|r| r.reward).collect::<Vec<_>>());
        for (r, &a) in rollouts.iter().zip(&advantages) {
            mean_abs_adv += a.abs();
            if a != 0.0 || cfg.kl_beta > 0.0 {
                jobs.push((*i, features, r, a));
            }
        }
    }
    mean_abs_adv /= all_rewards.len() as f64;

    if jobs.is_empty() {
        // Constant rewards everywhere and no KL term: exact no-op.
        return Ok(RLStats {
            mean_reward,
            mean_abs_advantage: 0.0,
            clip_fraction: 0.0,
            kl: 0.0,
            objective: 0.0,
            no_op: true,
        });
    }

    let total_rollouts = (per_scene.len() * cfg.group_size) as f64;
    let results: Vec<RolloutGrad> = jobs
        .par_iter()
        .map(|(_, features, rollout, advantage)| {
            score_rollout(
                params, ref_params, features, rollout, *advantage, layout, dec, cfg,
                total_rollouts,
            )
        })
        .collect();

    // Fixed-order reduction.
    let mut grads = results[0].grads.clone();
    for r in &results[1..] {
        for (acc, src) in grads.iter_mut().zip(&r.grads) {
            debug_assert_eq!(acc.0, src.0);
            for (a, s) in acc.1.iter_mut().zip(&src.1) {
                *a += s;
            }
        }
    }
    let objective: f64 = results.iter().map(|r| r.objective).sum::<f64>() / total_rollouts;
    let clip_fraction = results.iter().map(|r| r.clip_fraction).sum::<f64>() / total_rollouts;
    let kl = results.iter().map(|r| r.kl).sum::<f64>() / total_rollouts;
    if !objective.is_finite() {
        return Err(RlError::NonFiniteObjective {
            step: update_index,
            value: objective,
            mean_reward,
        });
    }

    let mut named = params.named_tensors_mut();
    named.sort_by(|a, b| a.0.cmp(&b.0));
    let mut grad_sorted = grads;
    grad_sorted.sort_by(|a, b| a.0.cmp(&b.0));
    opt.state.sort_by(|a, b| a.0.cmp(&b.0));
    for (((name, tensor), (gname, grad)), (sname, state)) in named
        .iter_mut()
        .zip(&grad_sorted)
        .zip(opt.state.iter_mut())
    {
        debug_assert_eq!(name, gname);
        debug_assert_eq!(name, sname);
        if ModelParams::is_encoder_param(name) {
            continue;
        }
        adamw_step(&mut tensor.data, grad, state, cfg.lr, &opt.hyper);
    }

    Ok(RLStats {
        mean_reward,
        mean_abs_advantage: mean_abs_adv,
        clip_fraction,
        kl,
        objective,
        no_op: false,
    })
}

/// Gradient of the (negated) per-rollout surrogate with respect to the
/// parameters, via the coefficient-on-log-prob form.
#[allow(clippy::too_many_arguments)]
fn score_rollout(
    params: &ModelParams,
    ref_params: Option<&ModelParams>,
    features: &BevFeatures,
    rollout: &Rollout,
    advantage: f64,
    layout: &VocabLayout,
    dec: &DecoderConfig,
    cfg: &RLConfig,
    total_rollouts: f64,
) -> RolloutGrad {
    let mut targets: Vec<u32> = rollout.sampled.clone();
    if rollout.ended_naturally {
        targets.push(END);
    }
    let t = targets.len();
    let mut prefix = Vec::with_capacity(t);
    prefix.push(START);
    prefix.extend_from_slice(&targets[..t - 1]);

    let v = dec.vocab_size as usize;
    let mut mask = vec![true; t * v];
    for (pos, row) in mask.chunks_mut(v).enumerate() {
        let legal = layout.expected_kind(pos);
        let range = legal.segment_range(layout);
        for tok in range {
            row[tok as usize] = false;
        }
        if legal.allow_end {
            row[END as usize] = false;
        }
    }

    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let f = tape.leaf(Tensor::from_vec(
        &[features.cells(), features.dim],
        features.data.clone(),
    ));
    let logits = decoder_forward(&mut tape, f, &prefix, &bound, dec, None);
    let masked = tape.masked_fill(logits, &mask, crate::model::decoder::MASK_FILL);
    let target_ids: Vec<usize> = targets.iter().map(|&x| x as usize).collect();
    let logp = tape.gather_log_softmax(masked, &target_ids);

    let new_logp = tape.value(logp).to_vec();
    let ref_logp = ref_params.map(|rp| {
        let seq = {
            let mut toks = prefix.clone();
            toks.push(*targets.last().unwrap());
            if !rollout.ended_naturally {
                // Close the sequence for the reference scorer.
                toks.push(END);
            }
            SceneSequence(toks)
        };
        let mut lp = sequence_log_prob(rp, dec, features, &seq, layout)
            .expect("rollout tokens are legal under the shared constraint");
        lp.truncate(t);
        lp
    });
    let (coeffs, objective, clip_fraction, kl) = surrogate_coefficients(
        &new_logp,
        &rollout.old_log_probs,
        advantage,
        cfg.clip_eps,
        cfg.kl_beta,
        ref_logp.as_deref(),
    );

    // Loss = -J; each sequence contributes its token-mean over the batch.
    let scale = -1.0 / (total_rollouts * t as f64);
    let weights: Vec<f64> = coeffs.iter().map(|c| c * scale).collect();
    let loss = tape.dot_const(logp, &weights);
    tape.backward(loss);

    RolloutGrad {
        grads: bound.gradients(&tape),
        objective,
        clip_fraction,
        kl,
    }
}

/// Per-update record emitted to the RL metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct RLStepStat {
    pub step: usize,
    pub stats: RLStats,
}

/// The fine-tuning driver: batches scenes, runs [`grpo_update`] for
/// `cfg.steps` updates, and logs `step/reward/clipfrac/kl` lines.
pub fn finetune_rl(
    params: &mut ModelParams,
    scenes: &[Scene],
    layout: &VocabLayout,
    enc: &EncoderConfig,
    dec: &DecoderConfig,
    cfg: &RLConfig,
) -> Result<Vec<RLStepStat>, RlError> {
    cfg.validate()?;
    let ref_params = if cfg.kl_beta > 0.0 {
        Some(params.clone())
    } else {
        None
    };
    let mut opt = RlOptimizer::new(params);
    let mut metrics = match &cfg.metrics_path {
        Some(p) => Some(std::fs::File::create(p).map_err(|source| RlError::Io {
            path: p.clone(),
            source,
        })?),
        None => None,
    };
    let mut history = Vec::with_capacity(cfg.steps);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut pass = 0u64;
    for step_idx in 0..cfg.steps {
        if cursor + cfg.batch_scenes > order.len() {
            let mut idx: Vec<usize> = (0..scenes.len()).collect();
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, pass, "rl-shuffle"));
            idx.shuffle(&mut rng);
            order = idx;
            cursor = 0;
            pass += 1;
        }
        let take = cfg.batch_scenes.min(order.len());
        let batch: Vec<&Scene> = order[cursor..cursor + take].iter().map(|&i| &scenes[i]).collect();
        cursor += take;
        let stats = grpo_update(
            params,
            ref_params.as_ref(),
            &batch,
            layout,
            enc,
            dec,
            cfg,
            &mut opt,
            step_idx,
        )?;
        if let Some(f) = metrics.as_mut() {
            use std::io::Write;
            writeln!(
                f,
                "step {} reward {} clipfrac {} kl {}",
                step_idx, stats.mean_reward, stats.clip_fraction, stats.kl
            )
            .map_err(|source| RlError::Io {
                path: cfg.metrics_path.clone().unwrap(),
                source,
            })?;
        }
        history.push(RLStepStat {
            step: step_idx,
            stats,
        });
    }
    Ok(history)
}
