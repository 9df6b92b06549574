//! Deterministic synthetic LiDAR-like scenes and their on-disk text format.
//!
//! Scenes are generated from a `(config, seed)` pair alone: boxes with
//! category-specific size priors, surface points whose density decays with
//! range, and ground-plane clutter. All floats are snapped to six decimals
//! at generation time so the text format round-trips losslessly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{iou_bev, range_to_ego, Box3D};

/// Pairwise BEV-IoU cap enforced during box placement.
pub const OVERLAP_CAP: f64 = 0.01;
const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub points: Vec<Point>,
    pub boxes: Vec<Box3D>,
    pub seed: u64,
}

/// Per-category size prior (mean/sigma per dimension, meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizePrior {
    pub l: (f64, f64),
    pub w: (f64, f64),
    pub h: (f64, f64),
}

/// Plausible object archetypes; category sizes are distinct enough that the
/// class token is inferable from geometry.
pub fn default_priors() -> Vec<SizePrior> {
    let p = |l: (f64, f64), w: (f64, f64), h: (f64, f64)| SizePrior { l, w, h };
    vec![
        p((4.6, 0.4), (1.9, 0.15), (1.7, 0.15)),  // car
        p((6.9, 0.8), (2.5, 0.25), (2.8, 0.3)),   // truck
        p((11.0, 1.0), (2.9, 0.2), (3.5, 0.3)),   // bus
        p((12.3, 1.5), (2.9, 0.3), (3.9, 0.4)),   // trailer
        p((6.4, 1.0), (2.8, 0.4), (3.2, 0.5)),    // construction vehicle
        p((0.7, 0.1), (0.67, 0.1), (1.77, 0.12)), // pedestrian
        p((2.1, 0.25), (0.77, 0.1), (1.46, 0.15)),// motorcycle
        p((1.7, 0.2), (0.6, 0.1), (1.3, 0.12)),   // bicycle
        p((0.41, 0.06), (0.41, 0.06), (1.07, 0.2)), // traffic cone
        p((2.5, 0.3), (0.98, 0.15), (0.95, 0.1)), // barrier
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    /// Field of view is the square `[-half_extent, half_extent]^2`.
    pub half_extent: f64,
    pub kmin: usize,
    pub kmax: usize,
    pub categories: usize,
    pub priors: Vec<SizePrior>,
    /// Total points per scene (boxes plus clutter).
    pub point_budget: usize,
    /// Range at which box point density halves.
    pub density_decay: f64,
    pub clutter_fraction: f64,
    pub velocity_sigma: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            half_extent: 22.0,
            kmin: 2,
            kmax: 6,
            categories: 10,
            priors: default_priors(),
            point_budget: 512,
            density_decay: 12.0,
            clutter_fraction: 0.25,
            velocity_sigma: 3.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("field of view too crowded: {attempts} placement attempts for {placed} of {want} boxes")]
    TooCrowded {
        attempts: usize,
        placed: usize,
        want: usize,
    },
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: expected {expected_points} point and {expected_boxes} box records, found {found_points} and {found_boxes}")]
    Truncated {
        path: PathBuf,
        expected_points: usize,
        expected_boxes: usize,
        found_points: usize,
        found_boxes: usize,
    },
    #[error("invalid generation config: {0}")]
    BadConfig(String),
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let err = |m: &str| Err(SceneError::BadConfig(m.to_string()));
        if self.half_extent <= 0.0 || self.half_extent >= 54.0 {
            return err("half_extent must lie inside the tokenizer x/y range (0, 54)");
        }
        if self.kmin > self.kmax {
            return err("kmin > kmax");
        }
        if self.categories == 0 || self.categories > self.priors.len() {
            return err("categories must be in [1, len(priors)]");
        }
        if !(0.0..=1.0).contains(&self.clutter_fraction) {
            return err("clutter_fraction must be in [0, 1]");
        }
        if self.point_budget == 0 {
            return err("point_budget must be positive");
        }
        if self.density_decay <= 0.0 {
            return err("density_decay must be positive");
        }
        Ok(())
    }
}

/// Rounds through the on-disk text representation (six fractional digits).
fn snap(v: f64) -> f64 {
    format!("{v:.6}").parse().unwrap()
}

fn sample_normal(rng: &mut impl Rng, mean: f64, sigma: f64) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout obvious.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    mean + sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn sample_box(rng: &mut ChaCha8Rng, config: &GenConfig) -> Option<Box3D> {
    let category = rng.gen_range(0..config.categories);
    let prior = &config.priors[category];
    let dim = |rng: &mut ChaCha8Rng, (mean, sigma): (f64, f64), hi: f64| {
        sample_normal(rng, mean, sigma).clamp(0.2, hi)
    };
    let l = dim(rng, prior.l, 20.0);
    let w = dim(rng, prior.w, 5.0);
    let h = dim(rng, prior.h, 5.5);
    // Keep the whole footprint (any yaw) inside the field of view.
    let margin = l.hypot(w) / 2.0 + 0.1;
    let lim = config.half_extent - margin;
    if lim <= 0.5 {
        return None;
    }
    // Ground-standing: bottom near z = 0, center height h/2.
    let z = (h / 2.0 + sample_normal(rng, 0.0, 0.05)).clamp(h / 2.0 - 0.2, 2.95);
    let vel = |rng: &mut ChaCha8Rng| {
        sample_normal(rng, 0.0, config.velocity_sigma).clamp(-29.9, 29.9)
    };
    Some(Box3D {
        x: snap(rng.gen_range(-lim..lim)),
        y: snap(rng.gen_range(-lim..lim)),
        z: snap(z),
        l: snap(l),
        w: snap(w),
        h: snap(h),
        yaw: snap(rng.gen_range(-3.14159..3.14159)),
        vx: snap(vel(rng)),
        vy: snap(vel(rng)),
        category,
    })
}

/// Uniform sample on one of the box faces visible from the ego origin
/// (the facing sides plus the top), chosen with probability proportional
/// to face area.
fn sample_surface_point(rng: &mut ChaCha8Rng, b: &Box3D) -> Point {
    let (s, c) = b.yaw.sin_cos();
    // Ego origin in the box frame.
    let ex = -b.x * c - b.y * s;
    let ey = b.x * s - b.y * c;
    // Candidate faces in the box frame: (fixed axis, sign, area).
    let mut faces: Vec<(usize, f64, f64)> = vec![(2, 1.0, b.l * b.w)]; // top
    if ex.abs() > b.l / 2.0 {
        faces.push((0, ex.signum(), b.w * b.h));
    }
    if ey.abs() > b.w / 2.0 {
        faces.push((1, ey.signum(), b.l * b.h));
    }
    let total: f64 = faces.iter().map(|f| f.2).sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut face = faces[0];
    for f in &faces {
        if pick < f.2 {
            face = *f;
            break;
        }
        pick -= f.2;
    }
    let (he_l, he_w, he_h) = (b.l / 2.0, b.w / 2.0, b.h / 2.0);
    let (u, v, wz) = match face.0 {
        0 => (
            face.1 * he_l,
            rng.gen_range(-he_w..he_w),
            rng.gen_range(-he_h..he_h),
        ),
        1 => (
            rng.gen_range(-he_l..he_l),
            face.1 * he_w,
            rng.gen_range(-he_h..he_h),
        ),
        _ => (
            rng.gen_range(-he_l..he_l),
            rng.gen_range(-he_w..he_w),
            he_h,
        ),
    };
    Point {
        x: snap(b.x + u * c - v * s),
        y: snap(b.y + u * s + v * c),
        z: snap(b.z + wz),
        intensity: snap(rng.gen_range(0.0..1.0)),
    }
}

/// Generates one scene. Identical `(config, seed)` pairs produce
/// bit-identical scenes.
pub fn generate_scene(config: &GenConfig, seed: u64) -> Result<Scene, SceneError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(config.kmin..=config.kmax);

    let mut boxes: Vec<Box3D> = Vec::with_capacity(k);
    let mut attempts = 0usize;
    while boxes.len() < k {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(SceneError::TooCrowded {
                attempts,
                placed: boxes.len(),
                want: k,
            });
        }
        let Some(candidate) = sample_box(&mut rng, config) else {
            continue;
        };
        if boxes.iter().all(|b| iou_bev(b, &candidate) < OVERLAP_CAP) {
            boxes.push(candidate);
        }
    }

    let clutter_n = (config.point_budget as f64 * config.clutter_fraction).round() as usize;
    let box_budget = config.point_budget.saturating_sub(clutter_n);
    let mut points = Vec::with_capacity(config.point_budget);
    if !boxes.is_empty() {
        let weights: Vec<f64> = boxes
            .iter()
            .map(|b| 1.0 / (1.0 + range_to_ego(b) / config.density_decay))
            .collect();
        let total: f64 = weights.iter().sum();
        for (b, w) in boxes.iter().zip(&weights) {
            let n = ((box_budget as f64 * w / total).round() as usize).max(1);
            for _ in 0..n {
                points.push(sample_surface_point(&mut rng, b));
            }
        }
    }
    for _ in 0..clutter_n {
        points.push(Point {
            x: snap(rng.gen_range(-config.half_extent..config.half_extent)),
            y: snap(rng.gen_range(-config.half_extent..config.half_extent)),
            z: snap(sample_normal(&mut rng, 0.0, 0.02)),
            intensity: snap(rng.gen_range(0.0..1.0)),
        });
    }

    Ok(Scene {
        id: format!("scene-{seed}"),
        points,
        boxes,
        seed,
    })
}

/// Counts points inside the rotated box, faces inclusive (with a 1e-9
/// boundary tolerance so on-face samples count).
pub fn points_in_box(scene: &Scene, b: &Box3D) -> usize {
    const EPS: f64 = 1e-9;
    let (s, c) = b.yaw.sin_cos();
    scene
        .points
        .iter()
        .filter(|p| {
            let dx = p.x - b.x;
            let dy = p.y - b.y;
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            u.abs() <= b.l / 2.0 + EPS
                && v.abs() <= b.w / 2.0 + EPS
                && (p.z - b.z).abs() <= b.h / 2.0 + EPS
        })
        .count()
}

/// Point counts for every box in the scene, in box order.
pub fn per_box_point_counts(scene: &Scene) -> Vec<usize> {
    scene.boxes.iter().map(|b| points_in_box(scene, b)).collect()
}

pub fn scene_to_string(scene: &Scene) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "scene {} {} {} {}",
        scene.id,
        scene.points.len(),
        scene.boxes.len(),
        scene.seed
    )
    .unwrap();
    for p in &scene.points {
        writeln!(out, "p {:.6} {:.6} {:.6} {:.6}", p.x, p.y, p.z, p.intensity).unwrap();
    }
    for b in &scene.boxes {
        writeln!(
            out,
            "b {} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            b.category, b.x, b.y, b.z, b.l, b.w, b.h, b.yaw, b.vx, b.vy
        )
        .unwrap();
    }
    out
}

pub fn write_scene(scene: &Scene, path: &Path) -> Result<(), SceneError> {
    fs::write(path, scene_to_string(scene)).map_err(|source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn scene_from_string(text: &str, path: &Path) -> Result<Scene, SceneError> {
    let fmt = |line: usize, message: String| SceneError::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| fmt(1, "empty file".to_string()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != "scene" {
        return Err(fmt(1, format!("bad header: {header:?}")));
    }
    let id = fields[1].to_string();
    let parse_count = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| fmt(1, format!("bad {what} count: {s:?}")))
    };
    let num_points = parse_count(fields[2], "point")?;
    let num_boxes = parse_count(fields[3], "box")?;
    let seed: u64 = fields[4]
        .parse()
        .map_err(|_| fmt(1, format!("bad seed: {:?}", fields[4])))?;

    let mut points = Vec::with_capacity(num_points);
    let mut boxes = Vec::with_capacity(num_boxes);
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let parse_f = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| fmt(lineno, format!("bad float: {s:?}")))
        };
        match fields[0] {
            "p" => {
                if fields.len() != 5 {
                    return Err(fmt(lineno, format!("point record needs 4 fields: {line:?}")));
                }
                if points.len() == num_points {
                    return Err(fmt(lineno, "more point records than declared".to_string()));
                }
                points.push(Point {
                    x: parse_f(fields[1])?,
                    y: parse_f(fields[2])?,
                    z: parse_f(fields[3])?,
                    intensity: parse_f(fields[4])?,
                });
            }
            "b" => {
                if fields.len() != 11 {
                    return Err(fmt(lineno, format!("box record needs 10 fields: {line:?}")));
                }
                if boxes.len() == num_boxes {
                    return Err(fmt(lineno, "more box records than declared".to_string()));
                }
                let category: usize = fields[1]
                    .parse()
                    .map_err(|_| fmt(lineno, format!("bad category: {:?}", fields[1])))?;
                let b = Box3D {
                    x: parse_f(fields[2])?,
                    y: parse_f(fields[3])?,
                    z: parse_f(fields[4])?,
                    l: parse_f(fields[5])?,
                    w: parse_f(fields[6])?,
                    h: parse_f(fields[7])?,
                    yaw: parse_f(fields[8])?,
                    vx: parse_f(fields[9])?,
                    vy: parse_f(fields[10])?,
                    category,
                };
                if !b.is_valid() {
                    return Err(fmt(lineno, format!("box violates invariants: {line:?}")));
                }
                boxes.push(b);
            }
            other => return Err(fmt(lineno, format!("unknown record kind {other:?}"))),
        }
    }
    if points.len() != num_points || boxes.len() != num_boxes {
        return Err(SceneError::Truncated {
            path: path.to_path_buf(),
            expected_points: num_points,
            expected_boxes: num_boxes,
            found_points: points.len(),
            found_boxes: boxes.len(),
        });
    }
    Ok(Scene {
        id,
        points,
        boxes,
        seed,
    })
}

pub fn read_scene(path: &Path) -> Result<Scene, SceneError> {
    let text = fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    scene_from_string(&text, path)
}

/// Reads `manifest.txt` in `dir` and loads every listed scene, in manifest
/// order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>, SceneError> {
    let manifest = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest).map_err(|source| SceneError::Io {
        path: manifest.clone(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|name| read_scene(&dir.join(name.trim())))
        .collect()
}

/// Writes scenes plus a manifest into `dir`; returns the file names written.
pub fn write_dataset(scenes: &[Scene], dir: &Path) -> Result<Vec<String>, SceneError> {
    fs::create_dir_all(dir).map_err(|source| SceneError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut names = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let name = format!("{}.scene", scene.id);
        write_scene(scene, &dir.join(&name))?;
        names.push(name);
    }
    let manifest = dir.join("manifest.txt");
    let body: String = names.iter().map(|n| format!("{n}\n")).collect();
    fs::write(&manifest, body).map_err(|source| SceneError::Io {
        path: manifest,
        source,
    })?;
    Ok(names)
}
