//! The operator surface: subcommand implementations, configuration,
//! checkpoints, metrics files, and the SVG renderer. Every command is a
//! pure function of its flags, config file, and seed.

pub mod checkpoint;
pub mod config;
pub mod render;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use crate::decoding::{detect, DecodeConfig, Strategy};
use crate::eval::{evaluate, render_report, EvalReport, MatchConfig};
use crate::geometry::Box3D;
use crate::grpo::finetune_rl;
use crate::refine::{cascade, Detector};
use crate::scenegen::{generate_scene, load_dataset, write_dataset, Scene};
use crate::tokenizer::OrderingStrategy;
use crate::training::{derive_seed, train};
use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use config::FlatConfig;

fn load_config(path: Option<&Path>) -> Result<FlatConfig> {
    match path {
        Some(p) => FlatConfig::from_file(p),
        None => Ok(FlatConfig::new()),
    }
}

/// `greedy`, `beam:K`, or `nucleus:P,K,T` (seed supplied separately).
pub fn parse_strategy(spec: &str, seed: u64) -> Result<Strategy> {
    if spec == "greedy" {
        return Ok(Strategy::Greedy);
    }
    if let Some(rest) = spec.strip_prefix("beam:") {
        let width: usize = rest
            .parse()
            .with_context(|| format!("bad beam width {rest:?}"))?;
        return Ok(Strategy::Beam { width });
    }
    if let Some(rest) = spec.strip_prefix("nucleus:") {
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() != 3 {
            bail!("nucleus strategy needs top_p,top_k,temperature, got {spec:?}");
        }
        return Ok(Strategy::Nucleus {
            top_p: parts[0]
                .parse()
                .with_context(|| format!("bad top_p {:?}", parts[0]))?,
            top_k: parts[1]
                .parse()
                .with_context(|| format!("bad top_k {:?}", parts[1]))?,
            temperature: parts[2]
                .parse()
                .with_context(|| format!("bad temperature {:?}", parts[2]))?,
            seed,
        });
    }
    bail!("unknown strategy {spec:?}; expected greedy, beam:K, or nucleus:P,K,T")
}

/// Writes `count` scenes plus a manifest under `out`.
pub fn cmd_gen_data(config: Option<&Path>, count: usize, seed: u64, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let gen = config::gen_config(&cfg)?;
    let scenes: Result<Vec<Scene>, _> = (0..count)
        .map(|i| {
            generate_scene(&gen, derive_seed(seed, i as u64, "scene")).map(|mut s| {
                s.id = format!("s{i:05}");
                s
            })
        })
        .collect();
    write_dataset(&scenes?, out)?;
    Ok(())
}

/// Teacher-forced training over a dataset directory; saves a checkpoint.
pub fn cmd_train(data: &Path, config: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let layout = config::vocab_layout(&cfg)?;
    let enc = config::encoder_config(&cfg)?;
    let dec = config::decoder_config(&cfg, layout.vocab_size())?;
    let mut tcfg = config::train_config(&cfg, seed)?;
    if tcfg.metrics_path.is_none() {
        tcfg.metrics_path = Some(out.with_extension("metrics"));
    }
    let scenes = load_dataset(data)?;

    let ordering = tcfg.ordering;
    let mut hook_error: Option<anyhow::Error> = None;
    let mut hook = |step: usize, params: &crate::model::ModelParams| {
        let path = out.with_extension(format!("step{step}.ar3d"));
        let ckpt = Checkpoint {
            enc: enc.clone(),
            dec: dec.clone(),
            layout: layout.clone(),
            ordering,
            params: params.clone(),
        };
        if let Err(e) = save_checkpoint(&path, &ckpt) {
            hook_error = Some(e.into());
        }
    };
    let (params, _history) = train(&scenes, &layout, &enc, &dec, &tcfg, Some(&mut hook))?;
    if let Some(e) = hook_error {
        return Err(e.context("periodic checkpoint"));
    }
    save_checkpoint(
        out,
        &Checkpoint {
            enc,
            dec,
            layout,
            ordering,
            params,
        },
    )?;
    Ok(())
}

/// GRPO fine-tuning from a checkpoint, encoder frozen.
pub fn cmd_finetune_rl(
    data: &Path,
    ckpt_path: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.u64_or("seed", 0)?);
    let mut rl = config::rl_config(&cfg, seed)?;
    if rl.metrics_path.is_none() {
        rl.metrics_path = Some(out.with_extension("metrics"));
    }
    let mut ckpt = load_checkpoint(ckpt_path)?;
    let scenes = load_dataset(data)?;
    finetune_rl(
        &mut ckpt.params,
        &scenes,
        &ckpt.layout,
        &ckpt.enc,
        &ckpt.dec,
        &rl,
    )?;
    save_checkpoint(out, &ckpt)?;
    Ok(())
}

fn scene_b_line(b: &Box3D) -> String {
    format!(
        "b {} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
        b.category, b.x, b.y, b.z, b.l, b.w, b.h, b.yaw, b.vx, b.vy
    )
}

/// Parses the `b`-line format that `detect` prints (one box per line).
pub fn parse_box_lines(text: &str) -> Result<Vec<Box3D>> {
    let mut boxes = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 11 || fields[0] != "b" {
            bail!("line {}: expected `b <category> <9 floats>`", idx + 1);
        }
        let f = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .with_context(|| format!("line {}: bad float {:?}", idx + 1, fields[i]))
        };
        boxes.push(Box3D {
            category: fields[1]
                .parse()
                .with_context(|| format!("line {}: bad category", idx + 1))?,
            x: f(2)?,
            y: f(3)?,
            z: f(4)?,
            l: f(5)?,
            w: f(6)?,
            h: f(7)?,
            yaw: f(8)?,
            vx: f(9)?,
            vy: f(10)?,
        });
    }
    Ok(boxes)
}

/// Detects boxes in one scene file; returns them in the scene-file `b`
/// line format.
pub fn cmd_detect(ckpt_path: &Path, scene_path: &Path, strategy: &str, seed: u64) -> Result<String> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let scene = crate::scenegen::read_scene(scene_path)?;
    let decode = DecodeConfig::new(parse_strategy(strategy, seed)?, ckpt.dec.t_max);
    decode.validate()?;
    let boxes = detect(
        &scene.points,
        &ckpt.params,
        &ckpt.enc,
        &ckpt.dec,
        &decode,
        &ckpt.layout,
    );
    let mut out = String::new();
    for b in &boxes {
        writeln!(out, "{}", scene_b_line(b)).unwrap();
    }
    Ok(out)
}

/// Detections for every scene, in manifest order (scenes decode
/// concurrently; the collected order is deterministic).
pub fn detect_dataset(ckpt: &Checkpoint, scenes: &[Scene], strategy: Strategy) -> Vec<Vec<Box3D>> {
    let decode = DecodeConfig::new(strategy, ckpt.dec.t_max);
    scenes
        .par_iter()
        .map(|scene| {
            detect(
                &scene.points,
                &ckpt.params,
                &ckpt.enc,
                &ckpt.dec,
                &decode,
                &ckpt.layout,
            )
        })
        .collect()
}

pub fn eval_checkpoint(ckpt: &Checkpoint, scenes: &[Scene], strategy: Strategy) -> EvalReport {
    let preds = detect_dataset(ckpt, scenes, strategy);
    let pairs: Vec<(Vec<Box3D>, Vec<Box3D>)> = preds
        .into_iter()
        .zip(scenes)
        .map(|(p, s)| (p, s.boxes.clone()))
        .collect();
    evaluate(&pairs, &MatchConfig::default())
}

/// Evaluates a checkpoint over a dataset and renders the report.
pub fn cmd_eval(ckpt_path: &Path, data: &Path, strategy: &str, seed: u64) -> Result<String> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let strategy = parse_strategy(strategy, seed)?;
    DecodeConfig::new(strategy, ckpt.dec.t_max).validate()?;
    let scenes = load_dataset(data)?;
    let report = eval_checkpoint(&ckpt, &scenes, strategy);
    Ok(render_report(&report))
}

/// Cascading refinement over a dataset: prior-alone and cascade reports.
pub fn cmd_cascade(
    prior_path: &Path,
    completion_path: &Path,
    data: &Path,
    iou: f64,
    seed: u64,
) -> Result<String> {
    let prior = load_checkpoint(prior_path)?;
    let completion = load_checkpoint(completion_path)?;
    if prior.layout != completion.layout {
        bail!(
            "prior and completion checkpoints use different vocab layouts ({} vs {} tokens)",
            prior.layout.vocab_size(),
            completion.layout.vocab_size()
        );
    }
    if !matches!(completion.ordering, OrderingStrategy::Random(_)) {
        bail!(
            "completion model must be trained with random ordering, found {:?}",
            completion.ordering
        );
    }
    let scenes = load_dataset(data)?;

    let results: Vec<(Vec<Box3D>, bool)> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let r = cascade(
                &Detector {
                    params: &prior.params,
                    enc: &prior.enc,
                    dec: &prior.dec,
                },
                &Detector {
                    params: &completion.params,
                    enc: &completion.enc,
                    dec: &completion.dec,
                },
                &scene.points,
                &prior.layout,
                derive_seed(seed, i as u64, &scene.id),
                iou,
            );
            (r.boxes, r.completion_skipped)
        })
        .collect();
    let skipped = results.iter().filter(|(_, s)| *s).count();

    let prior_report = eval_checkpoint(&prior, &scenes, Strategy::Greedy);
    let cascade_pairs: Vec<(Vec<Box3D>, Vec<Box3D>)> = results
        .into_iter()
        .zip(&scenes)
        .map(|((p, _), s)| (p, s.boxes.clone()))
        .collect();
    let cascade_report = evaluate(&cascade_pairs, &MatchConfig::default());

    let mut out = String::new();
    writeln!(out, "== prior alone ==").unwrap();
    out.push_str(&render_report(&prior_report));
    writeln!(out, "== prior -> completion cascade (iou {iou}) ==").unwrap();
    out.push_str(&render_report(&cascade_report));
    if skipped > 0 {
        writeln!(
            out,
            "warning: completion skipped on {skipped} scenes (prefix exceeded its window)"
        )
        .unwrap();
    }
    writeln!(
        out,
        "cascade f1 {} vs prior f1 {}",
        cascade_report.f1, prior_report.f1
    )
    .unwrap();
    Ok(out)
}

/// Trains near-to-far / random / point-count variants under identical
/// budgets and prints the comparison.
pub fn cmd_ablate_ordering(
    data: &Path,
    config: Option<&Path>,
    eval_data: Option<&Path>,
    seed: u64,
) -> Result<String> {
    let cfg = load_config(config)?;
    let layout = config::vocab_layout(&cfg)?;
    let enc = config::encoder_config(&cfg)?;
    let dec = config::decoder_config(&cfg, layout.vocab_size())?;
    let scenes = load_dataset(data)?;
    let eval_scenes = match eval_data {
        Some(p) => load_dataset(p)?,
        None => scenes.clone(),
    };

    let variants = [
        ("random", OrderingStrategy::Random(derive_seed(seed, 0, "ablate"))),
        ("point_count", OrderingStrategy::PointCountDescending),
        ("near_to_far", OrderingStrategy::NearToFar),
    ];
    let mut rows = Vec::new();
    for (name, ordering) in variants {
        let mut tcfg = config::train_config(&cfg, seed)?;
        tcfg.ordering = ordering;
        tcfg.metrics_path = None;
        let (params, _) = train(&scenes, &layout, &enc, &dec, &tcfg, None)?;
        let ckpt = Checkpoint {
            enc: enc.clone(),
            dec: dec.clone(),
            layout: layout.clone(),
            ordering,
            params,
        };
        let report = eval_checkpoint(&ckpt, &eval_scenes, Strategy::Greedy);
        rows.push((name, report));
    }

    let mut out = String::new();
    writeln!(
        out,
        "{:<12} {:>9} {:>9} {:>9}",
        "order", "precision", "recall", "f1"
    )
    .unwrap();
    for (name, r) in &rows {
        writeln!(
            out,
            "{:<12} {:>9.4} {:>9.4} {:>9.4}",
            name, r.precision, r.recall, r.f1
        )
        .unwrap();
    }
    Ok(out)
}

/// Renders a scene (and optional predictions file) to SVG.
pub fn cmd_render(scene_path: &Path, pred_path: Option<&Path>, out: &Path) -> Result<()> {
    let scene = crate::scenegen::read_scene(scene_path)?;
    let preds = match pred_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading predictions {}", p.display()))?;
            parse_box_lines(&text)?
        }
        None => Vec::new(),
    };
    let svg = render::render_svg(&scene, &preds);
    std::fs::write(out, svg).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

/// Canonical checkpoint bundle builder used by commands and tests.
pub fn bundle(
    enc: crate::model::EncoderConfig,
    dec: crate::model::DecoderConfig,
    layout: crate::tokenizer::VocabLayout,
    ordering: OrderingStrategy,
    params: crate::model::ModelParams,
) -> Checkpoint {
    Checkpoint {
        enc,
        dec,
        layout,
        ordering,
        params,
    }
}

pub use checkpoint::{load_checkpoint as load, save_checkpoint as save};
pub type CheckpointPath = PathBuf;
