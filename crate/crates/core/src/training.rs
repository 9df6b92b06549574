//! Teacher-forced maximum-likelihood training: the scene sequence shifted by
//! one position under a single cross-entropy over all token types.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{adamw_step, cosine_warmup_lr, AdamHyper, AdamState, Tape, Tensor};
use crate::model::decoder::{decoder_forward, DropoutCtx};
use crate::model::{encoder, init_params, BoundParams, DecoderConfig, EncoderConfig, ModelParams};
use crate::scenegen::{per_box_point_counts, Scene, SceneError};
use crate::tokenizer::{encode_scene, CodecError, OrderingStrategy, SceneSequence, VocabLayout, PAD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("scene {scene}: sequence length {len} exceeds T_max {t_max}; rejected (never truncated)")]
    SequenceTooLong {
        scene: String,
        len: usize,
        t_max: usize,
    },
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub ordering: OrderingStrategy,
    pub freeze_encoder_steps: usize,
    /// Steps between periodic checkpoints; 0 disables.
    pub checkpoint_every: usize,
    pub metrics_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            base_lr: 1e-3,
            weight_decay: 0.01,
            warmup_fraction: 0.10,
            seed: 0,
            ordering: OrderingStrategy::NearToFar,
            freeze_encoder_steps: 0,
            checkpoint_every: 0,
            metrics_path: None,
        }
    }
}

/// Stable 64-bit mix of a base seed and context (FNV-1a over the parts).
pub fn derive_seed(base: u64, salt: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in base
        .to_le_bytes()
        .iter()
        .chain(salt.to_le_bytes().iter())
        .chain(id.as_bytes())
    {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Per-scene effective ordering: the Random strategy reshuffles every epoch by
/// deriving a fresh seed from its own, so it stays a pure function of
/// `(strategy, epoch, scene)`.
fn effective_ordering(base: OrderingStrategy, epoch: u64, scene_id: &str) -> OrderingStrategy {
    match base {
        OrderingStrategy::Random(seed) => {
            OrderingStrategy::Random(derive_seed(seed, epoch, scene_id))
        }
        other => other,
    }
}

/// Orders and tokenizes one scene, rejecting sequences the decoder cannot
/// hold.
pub fn scene_sequence(
    scene: &Scene,
    ordering: OrderingStrategy,
    layout: &VocabLayout,
    t_max: usize,
) -> Result<SceneSequence, TrainError> {
    let counts;
    let count_ref = match ordering {
        OrderingStrategy::PointCountDescending => {
            counts = per_box_point_counts(scene);
            Some(counts.as_slice())
        }
        _ => None,
    };
    let seq = encode_scene(&scene.boxes, ordering, count_ref, layout)?;
    if seq.tokens().len() > t_max {
        return Err(TrainError::SequenceTooLong {
            scene: scene.id.clone(),
            len: seq.tokens().len(),
            t_max,
        });
    }
    Ok(seq)
}

struct SceneGrad {
    ce_sum: f64,
    count: usize,
    grads: Vec<(String, Vec<f64>)>,
}

/// Forward+backward for one scene at a padded length; returns the summed
/// cross-entropy over non-PAD targets, their count, and parameter gradients
/// for that sum scaled 1/count (the tape loss is the per-scene mean).
#[allow(clippy::too_many_arguments)]
fn scene_forward_backward(
    scene: &Scene,
    seq: &SceneSequence,
    padded_len: usize,
    params: &ModelParams,
    layout: &VocabLayout,
    enc: &EncoderConfig,
    dec: &DecoderConfig,
    dropout_seed: Option<u64>,
    freeze_encoder: bool,
) -> SceneGrad {
    let _ = layout;
    let tokens = seq.tokens();
    let mut input: Vec<u32> = tokens[..tokens.len() - 1].to_vec();
    let mut target: Vec<u32> = tokens[1..].to_vec();
    input.resize(padded_len - 1, PAD);
    target.resize(padded_len - 1, PAD);

    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let features = if freeze_encoder {
        let f = encoder::encode_points(params, enc, &scene.points);
        tape.leaf(Tensor::from_vec(&[f.cells(), f.dim], f.data))
    } else {
        encoder::encode_points_tape(&mut tape, &bound, enc, &scene.points)
    };
    let dropout = match dropout_seed {
        Some(s) if dec.dropout > 0.0 => Some(DropoutCtx::new(dec.dropout, s)),
        _ => None,
    };
    let logits = decoder_forward(&mut tape, features, &input, &bound, dec, dropout);
    let loss = tape.cross_entropy(logits, &target, Some(PAD));
    let count = target.iter().filter(|&&t| t != PAD).count();
    let mean = tape.value(loss)[0];
    tape.backward(loss);
    SceneGrad {
        ce_sum: mean * count as f64,
        count,
        grads: bound.gradients(&tape),
    }
}

/// Mean token cross-entropy of a batch under teacher forcing. Sequences are
/// padded with PAD to the batch max length; PAD targets are ignored; scenes
/// are reduced in ascending-id order so the value is independent of batch
/// ordering.
#[allow(clippy::too_many_arguments)]
pub fn teacher_force_loss(
    scenes: &[&Scene],
    params: &ModelParams,
    layout: &VocabLayout,
    ordering: OrderingStrategy,
    enc: &EncoderConfig,
    dec: &DecoderConfig,
    dropout_base_seed: Option<u64>,
    freeze_encoder: bool,
) -> Result<(f64, Vec<(String, Vec<f64>)>), TrainError> {
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.sort_by(|&a, &b| scenes[a].id.cmp(&scenes[b].id));

    let seqs: Vec<SceneSequence> = order
        .iter()
        .map(|&i| scene_sequence(scenes[i], ordering, layout, dec.t_max))
        .collect::<Result<_, _>>()?;
    let padded_len = seqs.iter().map(|s| s.tokens().len()).max().unwrap_or(2);

    let jobs: Vec<(usize, &Scene, &SceneSequence, Option<u64>)> = order
        .iter()
        .zip(&seqs)
        .map(|(&i, seq)| {
            let ds = dropout_base_seed.map(|b| derive_seed(b, 0, &scenes[i].id));
            (i, scenes[i], seq, ds)
        })
        .collect();

    let results: Vec<SceneGrad> = jobs
        .par_iter()
        .map(|(_, scene, seq, ds)| {
            scene_forward_backward(
                scene, seq, padded_len, params, layout, enc, dec, *ds, freeze_encoder,
            )
        })
        .collect();

    let total_count: usize = results.iter().map(|r| r.count).sum();
    if total_count == 0 {
        return Ok((0.0, Vec::new()));
    }
    let loss = results.iter().map(|r| r.ce_sum).sum::<f64>() / total_count as f64;

    // grads of the global mean: sum of (per-scene mean grads) * count / total.
    let mut grads = results[0].grads.clone();
    for g in grads.iter_mut() {
        let scale = results[0].count as f64 / total_count as f64;
        g.1.iter_mut().for_each(|v| *v *= scale);
    }
    for r in &results[1..] {
        let scale = r.count as f64 / total_count as f64;
        for (acc, src) in grads.iter_mut().zip(&r.grads) {
            debug_assert_eq!(acc.0, src.0);
            for (a, s) in acc.1.iter_mut().zip(&src.1) {
                *a += s * scale;
            }
        }
    }
    Ok((loss, grads))
}

/// Per-step record emitted to the metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStat {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Runs the full teacher-forcing loop. Fully reproducible from
/// `(scenes, configs, seed)`; the returned history matches the metrics file.
#[allow(clippy::too_many_arguments)]
pub fn train(
    scenes: &[Scene],
    layout: &VocabLayout,
    enc: &EncoderConfig,
    dec: &DecoderConfig,
    cfg: &TrainConfig,
    mut checkpoint_hook: Option<&mut dyn FnMut(usize, &ModelParams)>,
) -> Result<(ModelParams, Vec<StepStat>), TrainError> {
    if scenes.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    // Reject overlong scenes up front, before any compute.
    for scene in scenes {
        scene_sequence(
            scene,
            effective_ordering(cfg.ordering, 0, &scene.id),
            layout,
            dec.t_max,
        )?;
    }

    let mut params = init_params(enc, dec, cfg.seed);
    let hyper = AdamHyper {
        weight_decay: cfg.weight_decay,
        ..AdamHyper::default()
    };
    let mut opt_state: Vec<(String, AdamState)> = params
        .named_tensors()
        .iter()
        .map(|(n, t)| (n.clone(), AdamState::new(t.numel())))
        .collect();

    let batches_per_epoch = scenes.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut history = Vec::with_capacity(total_steps);
    let mut metrics = match &cfg.metrics_path {
        Some(p) => Some(fs::File::create(p).map_err(|source| TrainError::Io {
            path: p.clone(),
            source,
        })?),
        None => None,
    };

    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut idx: Vec<usize> = (0..scenes.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, "shuffle"));
        use rand::seq::SliceRandom;
        idx.shuffle(&mut rng);

        for batch_ids in idx.chunks(cfg.batch_size) {
            let lr = cosine_warmup_lr(step, total_steps, cfg.base_lr, cfg.warmup_fraction);
            let frozen = step < cfg.freeze_encoder_steps;
            let batch: Vec<&Scene> = batch_ids.iter().map(|&i| &scenes[i]).collect();
            // The Random ordering reshuffles every epoch.
            let ordering = effective_ordering(cfg.ordering, epoch as u64, "epoch");
            let dropout_base = derive_seed(cfg.seed, step as u64, "dropout");
            let (loss, grads) = teacher_force_loss(
                &batch,
                &params,
                layout,
                ordering,
                enc,
                dec,
                Some(dropout_base),
                frozen,
            )?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step, loss });
            }

            let mut named = params.named_tensors_mut();
            named.sort_by(|a, b| a.0.cmp(&b.0));
            let mut grad_sorted = grads;
            grad_sorted.sort_by(|a, b| a.0.cmp(&b.0));
            opt_state.sort_by(|a, b| a.0.cmp(&b.0));
            for (((name, tensor), (gname, grad)), (sname, state)) in named
                .iter_mut()
                .zip(&grad_sorted)
                .zip(opt_state.iter_mut())
            {
                debug_assert_eq!(name, gname);
                debug_assert_eq!(name, sname);
                if frozen && ModelParams::is_encoder_param(name) {
                    continue;
                }
                adamw_step(&mut tensor.data, grad, state, lr, &hyper);
            }

            let stat = StepStat { step, lr, loss };
            if let Some(f) = metrics.as_mut() {
                writeln!(f, "step {} lr {} loss {}", stat.step, stat.lr, stat.loss).map_err(
                    |source| TrainError::Io {
                        path: cfg.metrics_path.clone().unwrap(),
                        source,
                    },
                )?;
            }
            history.push(stat);
            step += 1;
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                if let Some(hook) = checkpoint_hook.as_mut() {
                    hook(step, &params);
                }
            }
        }
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, GenConfig};

    fn small_world() -> (VocabLayout, EncoderConfig, DecoderConfig, Vec<Scene>) {
        let layout = VocabLayout::standard(10);
        let enc = EncoderConfig {
            bev_extent: 24.0,
            cell_size: 3.0,
            pillar_dim: 8,
            feature_dim: 16,
            mlp_depth: 1,
        };
        let dec = DecoderConfig {
            layers: 1,
            heads: 2,
            model_dim: 16,
            ffn_dim: 32,
            vocab_size: layout.vocab_size(),
            t_max: 42,
            dropout: 0.1,
        };
        let gen = GenConfig {
            half_extent: 10.0,
            kmin: 1,
            kmax: 3,
            point_budget: 64,
            ..GenConfig::default()
        };
        let scenes: Vec<Scene> = (0..6).map(|s| generate_scene(&gen, s).unwrap()).collect();
        (layout, enc, dec, scenes)
    }

    #[test]
    fn init_loss_near_log_vocab() {
        let (layout, enc, dec, scenes) = small_world();
        let params = init_params(&enc, &dec, 0);
        let batch: Vec<&Scene> = scenes.iter().take(2).collect();
        let (loss, _) = teacher_force_loss(
            &batch,
            &params,
            &layout,
            OrderingStrategy::NearToFar,
            &enc,
            &dec,
            None,
            false,
        )
        .unwrap();
        let expect = (layout.vocab_size() as f64).ln();
        assert!(
            (loss - expect).abs() < 0.1,
            "init loss {loss} vs ln V {expect}"
        );
    }

    #[test]
    fn loss_invariant_to_batch_order_and_padding() {
        let (layout, enc, dec, scenes) = small_world();
        let params = init_params(&enc, &dec, 1);
        let fwd = |batch: Vec<&Scene>| {
            teacher_force_loss(
                &batch,
                &params,
                &layout,
                OrderingStrategy::NearToFar,
                &enc,
                &dec,
                Some(33),
                false,
            )
            .unwrap()
        };
        let (a, ga) = fwd(vec![&scenes[0], &scenes[1], &scenes[2]]);
        let (b, gb) = fwd(vec![&scenes[2], &scenes[0], &scenes[1]]);
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }

    #[test]
    fn padding_rows_leave_loss_bit_identical() {
        // A scene batched with a longer partner gets PAD-extended; its
        // non-PAD rows, and hence the shared loss, must not move.
        let (layout, enc, dec, scenes) = small_world();
        let params = init_params(&enc, &dec, 2);
        let seq = scene_sequence(&scenes[0], OrderingStrategy::NearToFar, &layout, dec.t_max)
            .unwrap();
        let count = seq.tokens().len() - 1;

        let run_at = |padded_len: usize| {
            let sg = super::scene_forward_backward(
                &scenes[0],
                &seq,
                padded_len,
                &params,
                &layout,
                &enc,
                &dec,
                Some(derive_seed(33, 0, &scenes[0].id)),
                false,
            );
            assert_eq!(sg.count, count);
            sg.ce_sum
        };
        let natural = run_at(seq.tokens().len());
        let padded = run_at(seq.tokens().len() + 10);
        assert_eq!(natural, padded);
    }

    #[test]
    fn overlong_scene_rejected_with_diagnostic() {
        let (layout, enc, mut dec, scenes) = small_world();
        dec.t_max = 11;
        let err = train(
            &scenes,
            &layout,
            &enc,
            &dec,
            &TrainConfig {
                epochs: 1,
                batch_size: 2,
                ..TrainConfig::default()
            },
            None,
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::SequenceTooLong { .. }), "{err}");
    }

    #[test]
    fn freeze_zeroes_encoder_gradients() {
        let (layout, enc, dec, scenes) = small_world();
        let params = init_params(&enc, &dec, 3);
        let batch: Vec<&Scene> = scenes.iter().take(2).collect();
        let (_, grads) = teacher_force_loss(
            &batch,
            &params,
            &layout,
            OrderingStrategy::NearToFar,
            &enc,
            &dec,
            None,
            true,
        )
        .unwrap();
        for (name, g) in &grads {
            let norm: f64 = g.iter().map(|v| v * v).sum::<f64>();
            if ModelParams::is_encoder_param(name) {
                assert_eq!(norm, 0.0, "{name} should be frozen");
            } else {
                assert!(norm > 0.0, "{name} should receive gradient");
            }
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (layout, enc, dec, scenes) = small_world();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            base_lr: 1e-3,
            seed: 7,
            ..TrainConfig::default()
        };
        let (pa, ha) = train(&scenes, &layout, &enc, &dec, &cfg, None).unwrap();
        let (pb, hb) = train(&scenes, &layout, &enc, &dec, &cfg, None).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(ha, hb);
        assert_eq!(ha[0].lr, 0.0, "warmup starts at zero");
        assert!(ha.iter().all(|s| s.loss.is_finite()));
    }

    #[test]
    fn short_training_reduces_loss() {
        let (layout, enc, dec, scenes) = small_world();
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 6,
            base_lr: 3e-3,
            seed: 11,
            ..TrainConfig::default()
        };
        let (_, history) = train(&scenes, &layout, &enc, &dec, &cfg, None).unwrap();
        let first = history.first().unwrap().loss;
        let last = history.last().unwrap().loss;
        assert!(
            last < first,
            "loss should drop on a learnable dataset: {first} -> {last}"
        );
        // Warmup contract: lr at 10% of steps equals base lr.
        let warm = (history.len() as f64 * 0.10).round() as usize;
        assert!((history[warm].lr - cfg.base_lr).abs() < 1e-12);
    }
}
