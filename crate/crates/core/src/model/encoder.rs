//! Pillar-style point encoder: scatter points to grid cells, per-point MLP,
//! per-pillar max-pool (empty cells take a learned embedding), then two 3x3
//! grid-mixing convolutions. Positional embeddings are added at the end.

use super::{BevFeatures, BoundParams, EncoderConfig, ModelParams};
use crate::autodiff::{kernels, Tape, Tensor, Var};
use crate::scenegen::Point;

/// Per-point input features: offsets to the cell center, height, intensity.
pub const POINT_FEATURES: usize = 4;

/// Cell ids plus per-point features for every point inside the BEV extent;
/// points outside are dropped.
fn assign_points(points: &[Point], cfg: &EncoderConfig) -> (Vec<usize>, Vec<f64>) {
    let side = cfg.grid_side();
    let half = cfg.bev_extent / 2.0;
    let mut cells = Vec::with_capacity(points.len());
    let mut feats = Vec::with_capacity(points.len() * POINT_FEATURES);
    for p in points {
        let fx = (p.x + half) / cfg.cell_size;
        let fy = (p.y + half) / cfg.cell_size;
        if fx < 0.0 || fy < 0.0 {
            continue;
        }
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        if ix >= side || iy >= side {
            continue;
        }
        let cx = -half + (ix as f64 + 0.5) * cfg.cell_size;
        let cy = -half + (iy as f64 + 0.5) * cfg.cell_size;
        cells.push(ix * side + iy);
        feats.extend_from_slice(&[p.x - cx, p.y - cy, p.z, p.intensity]);
    }
    (cells, feats)
}

/// Differentiable encoder up to (and excluding) the positional embedding.
pub fn pillar_grid_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &EncoderConfig,
    points: &[Point],
) -> Var {
    let side = cfg.grid_side();
    let (cells, feats) = assign_points(points, cfg);
    let n = cells.len();
    let mut x = tape.leaf(Tensor::from_vec(&[n, POINT_FEATURES], feats));
    for &(w, b) in &bound.encoder_mlp {
        let mm = tape.matmul(x, w);
        let mm = tape.add_bias(mm, b);
        x = tape.relu(mm);
    }
    let pooled = tape.pillar_pool(x, &cells, side * side, bound.encoder_empty);
    // Grid mixing: one 3x3 spatial layer, one 1x1 channel layer.
    let cols = tape.im2col3x3(pooled, side, side);
    let mm = tape.matmul(cols, bound.encoder_conv1.0);
    let mm = tape.add_bias(mm, bound.encoder_conv1.1);
    let g = tape.relu(mm);
    let mm = tape.matmul(g, bound.encoder_conv2.0);
    let mm = tape.add_bias(mm, bound.encoder_conv2.1);
    tape.relu(mm)
}

/// Full differentiable encoder: pillar grid plus the decomposed x/y
/// positional embeddings.
pub fn encode_points_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &EncoderConfig,
    points: &[Point],
) -> Var {
    let side = cfg.grid_side();
    let grid = pillar_grid_tape(tape, bound, cfg, points);
    let ids_x: Vec<usize> = (0..side * side).map(|c| c / side).collect();
    let ids_y: Vec<usize> = (0..side * side).map(|c| c % side).collect();
    let px = tape.embedding_lookup(bound.bev_pos_x, &ids_x);
    let py = tape.embedding_lookup(bound.bev_pos_y, &ids_y);
    let with_x = tape.add(grid, px);
    tape.add(with_x, py)
}

fn linear_rows(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (in_dim, out_dim) = w.dims2();
    let mut out = vec![0.0; rows * out_dim];
    kernels::matmul_acc(x, &w.data, rows, in_dim, out_dim, &mut out);
    for r in 0..rows {
        for j in 0..out_dim {
            out[r * out_dim + j] += b.data[j];
        }
    }
    out
}

/// Inference-path encoder without positional embeddings.
pub fn pillar_grid(params: &ModelParams, cfg: &EncoderConfig, points: &[Point]) -> Vec<f64> {
    let side = cfg.grid_side();
    let (cells, feats) = assign_points(points, cfg);
    let n = cells.len();

    let mut x = feats;
    let mut dim = POINT_FEATURES;
    for (w, b) in &params.encoder.mlp {
        x = linear_rows(&x, n, w, b);
        dim = w.dims2().1;
        for v in x.iter_mut() {
            *v = kernels::relu(*v);
        }
    }

    let num_cells = side * side;
    let mut pooled = vec![f64::NEG_INFINITY; num_cells * dim];
    let mut occupied = vec![false; num_cells];
    for (p, &cell) in cells.iter().enumerate() {
        occupied[cell] = true;
        for j in 0..dim {
            let slot = cell * dim + j;
            let v = x[p * dim + j];
            if v > pooled[slot] {
                pooled[slot] = v;
            }
        }
    }
    for cell in 0..num_cells {
        if !occupied[cell] {
            pooled[cell * dim..(cell + 1) * dim]
                .copy_from_slice(&params.encoder.empty_embedding.data);
        }
    }

    let conv3x3 = |input: &[f64], c: usize, w: &Tensor, b: &Tensor| -> Vec<f64> {
        let mut cols = vec![0.0; num_cells * 9 * c];
        for i in 0..side {
            for j in 0..side {
                let base = (i * side + j) * 9 * c;
                for (tap, (di, dj)) in NEIGHBORS.iter().enumerate() {
                    let (ni, nj) = (i as isize + di, j as isize + dj);
                    if ni < 0 || nj < 0 || ni >= side as isize || nj >= side as isize {
                        continue;
                    }
                    let src = (ni as usize * side + nj as usize) * c;
                    cols[base + tap * c..base + (tap + 1) * c]
                        .copy_from_slice(&input[src..src + c]);
                }
            }
        }
        let mut out = linear_rows(&cols, num_cells, w, b);
        for v in out.iter_mut() {
            *v = kernels::relu(*v);
        }
        out
    };
    let g = conv3x3(&pooled, dim, &params.encoder.conv1_w, &params.encoder.conv1_b);
    let mut out = linear_rows(&g, num_cells, &params.encoder.conv2_w, &params.encoder.conv2_b);
    for v in out.iter_mut() {
        *v = kernels::relu(*v);
    }
    out
}

const NEIGHBORS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Inference-path encoder: deterministic BEV features with positional
/// embedding added.
pub fn encode_points(params: &ModelParams, cfg: &EncoderConfig, points: &[Point]) -> BevFeatures {
    let side = cfg.grid_side();
    let d = cfg.feature_dim;
    let mut data = pillar_grid(params, cfg, points);
    // Two separate adds, matching the tape path's rounding exactly.
    for ix in 0..side {
        for iy in 0..side {
            let dst = (ix * side + iy) * d;
            for k in 0..d {
                data[dst + k] += params.bev_pos_x.data[ix * d + k];
            }
            for k in 0..d {
                data[dst + k] += params.bev_pos_y.data[iy * d + k];
            }
        }
    }
    BevFeatures { side, dim: d, data }
}
