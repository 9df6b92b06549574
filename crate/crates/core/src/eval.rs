//! Score-free detection metrics: greedy center-distance matching,
//! per-category/per-threshold precision/recall/F1, and true-positive errors
//! over matched pairs.

use std::collections::BTreeSet;

use crate::geometry::{center_distance_bev, yaw_normalize, Box3D};

/// Distance threshold used for the single canonical TP-error computation.
pub const TP_ERROR_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchConfig {
    pub thresholds: Vec<f64>,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            thresholds: vec![0.5, 1.0, 2.0, 4.0],
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.thresholds.is_empty() {
            return Err("need at least one distance threshold".into());
        }
        if !self.thresholds.windows(2).all(|w| w[0] < w[1]) || self.thresholds[0] <= 0.0 {
            return Err(format!(
                "thresholds must be strictly increasing and positive: {:?}",
                self.thresholds
            ));
        }
        Ok(())
    }
}

/// Greedy one-to-one matching of same-category boxes by ascending BEV
/// center distance; pairs under `threshold` only. Returns `(pred index,
/// gt index)` pairs into the input lists.
pub fn match_boxes(
    preds: &[Box3D],
    gts: &[Box3D],
    category: usize,
    threshold: f64,
) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, p) in preds.iter().enumerate() {
        if p.category != category {
            continue;
        }
        for (gi, g) in gts.iter().enumerate() {
            if g.category != category {
                continue;
            }
            let d = center_distance_bev(p, g);
            if d < threshold {
                candidates.push((d, pi, gi));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_pred = vec![false; preds.len()];
    let mut used_gt = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for (_, pi, gi) in candidates {
        if used_pred[pi] || used_gt[gi] {
            continue;
        }
        used_pred[pi] = true;
        used_gt[gi] = true;
        pairs.push((pi, gi));
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matches: usize,
    pub preds: usize,
    pub gts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TpErrors {
    /// Mean BEV center distance, meters.
    pub ate: f64,
    /// Mean `1 - min/max` volume-ratio of aligned sizes.
    pub ase: f64,
    /// Mean wrapped absolute yaw difference, radians.
    pub aoe: f64,
    /// Mean L2 velocity difference, m/s.
    pub ave: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// One row per (category, threshold index).
    pub cells: Vec<(usize, f64, CellMetrics)>,
    /// Macro average over categories, one per threshold.
    pub per_threshold: Vec<(f64, CellMetrics)>,
    /// Macro over categories then thresholds.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when no pair matched at the TP threshold.
    pub tp_errors: Option<TpErrors>,
    pub scenes: usize,
}

impl EvalReport {
    /// F1 macro-averaged over categories at one threshold.
    pub fn f1_at(&self, threshold: f64) -> Option<f64> {
        self.per_threshold
            .iter()
            .find(|(t, _)| *t == threshold)
            .map(|(_, m)| m.f1)
    }
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Evaluates a dataset of `(predictions, ground truths)` scene pairs.
/// Categories absent from both sides everywhere are skipped; predicted-only
/// categories count with zero precision.
pub fn evaluate(scene_pairs: &[(Vec<Box3D>, Vec<Box3D>)], config: &MatchConfig) -> EvalReport {
    config.validate().expect("valid match config");
    let categories: BTreeSet<usize> = scene_pairs
        .iter()
        .flat_map(|(p, g)| p.iter().chain(g).map(|b| b.category))
        .collect();

    let mut cells = Vec::new();
    let mut per_threshold = Vec::new();
    let mut tp_pairs: Vec<(Box3D, Box3D)> = Vec::new();

    for &threshold in &config.thresholds {
        let mut macro_acc = (0.0, 0.0, 0.0);
        for &category in &categories {
            let mut matches = 0usize;
            let mut preds = 0usize;
            let mut gts = 0usize;
            for (p, g) in scene_pairs {
                let pairs = match_boxes(p, g, category, threshold);
                matches += pairs.len();
                preds += p.iter().filter(|b| b.category == category).count();
                gts += g.iter().filter(|b| b.category == category).count();
                if threshold == TP_ERROR_THRESHOLD {
                    tp_pairs.extend(pairs.iter().map(|&(pi, gi)| (p[pi], g[gi])));
                }
            }
            let precision = if preds > 0 {
                matches as f64 / preds as f64
            } else {
                0.0
            };
            let recall = if gts > 0 {
                matches as f64 / gts as f64
            } else {
                0.0
            };
            let cell = CellMetrics {
                precision,
                recall,
                f1: f1_of(precision, recall),
                matches,
                preds,
                gts,
            };
            macro_acc.0 += cell.precision;
            macro_acc.1 += cell.recall;
            macro_acc.2 += cell.f1;
            cells.push((category, threshold, cell));
        }
        let n = categories.len().max(1) as f64;
        per_threshold.push((
            threshold,
            CellMetrics {
                precision: macro_acc.0 / n,
                recall: macro_acc.1 / n,
                f1: macro_acc.2 / n,
                matches: 0,
                preds: 0,
                gts: 0,
            },
        ));
    }

    let nt = per_threshold.len() as f64;
    let precision = per_threshold.iter().map(|(_, m)| m.precision).sum::<f64>() / nt;
    let recall = per_threshold.iter().map(|(_, m)| m.recall).sum::<f64>() / nt;
    let f1 = per_threshold.iter().map(|(_, m)| m.f1).sum::<f64>() / nt;

    EvalReport {
        cells,
        per_threshold,
        precision,
        recall,
        f1,
        tp_errors: tp_errors(&tp_pairs),
        scenes: scene_pairs.len(),
    }
}

/// Single-list convenience wrapper over [`evaluate`].
pub fn precision_recall_f1(preds: &[Box3D], gts: &[Box3D], config: &MatchConfig) -> EvalReport {
    evaluate(&[(preds.to_vec(), gts.to_vec())], config)
}

/// True-positive errors over matched pairs; `None` when no pairs exist
/// (absent, never zero).
pub fn tp_errors(pairs: &[(Box3D, Box3D)]) -> Option<TpErrors> {
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    let mut ate = 0.0;
    let mut ase = 0.0;
    let mut aoe = 0.0;
    let mut ave = 0.0;
    for (p, g) in pairs {
        ate += center_distance_bev(p, g);
        // Sizes compared after aligning centers and yaw: the IoU of the two
        // aligned boxes is the product of per-dimension min/max ratios.
        let ratio = (p.l.min(g.l) / p.l.max(g.l))
            * (p.w.min(g.w) / p.w.max(g.w))
            * (p.h.min(g.h) / p.h.max(g.h));
        ase += 1.0 - ratio;
        aoe += yaw_normalize(p.yaw - g.yaw).abs();
        ave += (p.vx - g.vx).hypot(p.vy - g.vy);
    }
    Some(TpErrors {
        ate: ate / n,
        ase: ase / n,
        aoe: aoe / n,
        ave: ave / n,
        pairs: pairs.len(),
    })
}

/// Aligned plain-text table plus machine-readable `metric` lines.
pub fn render_report(report: &EvalReport) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    writeln!(
        out,
        "{:>8} {:>9} {:>9} {:>9} {:>9} {:>7} {:>7} {:>7}",
        "category", "threshold", "precision", "recall", "f1", "match", "preds", "gts"
    )
    .unwrap();
    for (category, threshold, m) in &report.cells {
        writeln!(
            out,
            "{:>8} {:>9} {:>9.4} {:>9.4} {:>9.4} {:>7} {:>7} {:>7}",
            category, threshold, m.precision, m.recall, m.f1, m.matches, m.preds, m.gts
        )
        .unwrap();
    }
    for (threshold, m) in &report.per_threshold {
        writeln!(
            out,
            "{:>8} {:>9} {:>9.4} {:>9.4} {:>9.4} {:>7} {:>7} {:>7}",
            "macro", threshold, m.precision, m.recall, m.f1, "-", "-", "-"
        )
        .unwrap();
    }
    writeln!(
        out,
        "{:>8} {:>9} {:>9.4} {:>9.4} {:>9.4} {:>7} {:>7} {:>7}",
        "macro", "all", report.precision, report.recall, report.f1, "-", "-", "-"
    )
    .unwrap();
    match &report.tp_errors {
        Some(tp) => writeln!(
            out,
            "tp-errors @{TP_ERROR_THRESHOLD}m over {} pairs: ate {:.4} ase {:.4} aoe {:.4} ave {:.4}",
            tp.pairs, tp.ate, tp.ase, tp.aoe, tp.ave
        )
        .unwrap(),
        None => writeln!(out, "tp-errors @{TP_ERROR_THRESHOLD}m: no matched pairs").unwrap(),
    }
    writeln!(out).unwrap();
    for (category, threshold, m) in &report.cells {
        for (name, v) in [
            ("precision", m.precision),
            ("recall", m.recall),
            ("f1", m.f1),
            ("matches", m.matches as f64),
        ] {
            writeln!(out, "metric {category} {threshold} {name} {v}").unwrap();
        }
    }
    for (threshold, m) in &report.per_threshold {
        writeln!(out, "metric macro {threshold} precision {}", m.precision).unwrap();
        writeln!(out, "metric macro {threshold} recall {}", m.recall).unwrap();
        writeln!(out, "metric macro {threshold} f1 {}", m.f1).unwrap();
    }
    writeln!(out, "metric macro all precision {}", report.precision).unwrap();
    writeln!(out, "metric macro all recall {}", report.recall).unwrap();
    writeln!(out, "metric macro all f1 {}", report.f1).unwrap();
    if let Some(tp) = &report.tp_errors {
        writeln!(out, "metric all {TP_ERROR_THRESHOLD} ate {}", tp.ate).unwrap();
        writeln!(out, "metric all {TP_ERROR_THRESHOLD} ase {}", tp.ase).unwrap();
        writeln!(out, "metric all {TP_ERROR_THRESHOLD} aoe {}", tp.aoe).unwrap();
        writeln!(out, "metric all {TP_ERROR_THRESHOLD} ave {}", tp.ave).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn boxed(x: f64, y: f64, category: usize) -> Box3D {
        Box3D {
            x,
            y,
            z: 0.5,
            l: 2.0,
            w: 1.0,
            h: 1.0,
            yaw: 0.0,
            vx: 0.0,
            vy: 0.0,
            category,
        }
    }

    #[test]
    fn perfect_predictions_are_perfect() {
        let gts = vec![boxed(0.0, 0.0, 0), boxed(5.0, 1.0, 1), boxed(-3.0, 2.0, 0)];
        let report = precision_recall_f1(&gts, &gts, &MatchConfig::default());
        assert_eq!(report.precision, 1.0);
        assert_eq!(report.recall, 1.0);
        assert_eq!(report.f1, 1.0);
        for (_, _, m) in &report.cells {
            assert_eq!(m.matches, m.gts);
        }
        let tp = report.tp_errors.unwrap();
        assert_eq!((tp.ate, tp.ase, tp.aoe, tp.ave), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn one_pred_between_two_gts_matches_once() {
        let gts = vec![boxed(-1.0, 0.0, 0), boxed(1.0, 0.0, 0)];
        let preds = vec![boxed(0.0, 0.0, 0)];
        let pairs = match_boxes(&preds, &gts, 0, 2.0);
        assert_eq!(pairs.len(), 1);
        // Equidistant: the lower gt index wins the tie.
        assert_eq!(pairs[0], (0, 0));
    }

    #[test]
    fn empty_predictions_score_zero() {
        let gts = vec![boxed(0.0, 0.0, 0)];
        let report = precision_recall_f1(&[], &gts, &MatchConfig::default());
        assert_eq!(report.precision, 0.0);
        assert_eq!(report.recall, 0.0);
        assert_eq!(report.f1, 0.0);
        assert!(report.tp_errors.is_none());
    }

    #[test]
    fn partial_match_rates() {
        let gts = vec![boxed(0.0, 0.0, 0), boxed(20.0, 0.0, 0)];
        let preds = vec![boxed(0.1, 0.0, 0)];
        let report = precision_recall_f1(&preds, &gts, &MatchConfig::default());
        let (_, _, m) = report
            .cells
            .iter()
            .find(|(c, t, _)| *c == 0 && *t == 2.0)
            .unwrap();
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.recall, 0.5);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn tp_error_components() {
        let g = boxed(0.0, 0.0, 0);
        let mut p = g;
        p.l = 2.0;
        let mut g2 = g;
        g2.l = 1.0;
        // sizes (2,1,1) vs (1,1,1) -> ASE = 1 - 1/2.
        let tp = tp_errors(&[(p, g2)]).unwrap();
        assert!((tp.ase - 0.5).abs() < 1e-12);

        let mut p = g;
        p.yaw = yaw_normalize(3.0 * PI / 2.0);
        let tp = tp_errors(&[(p, g)]).unwrap();
        assert!((tp.aoe - PI / 2.0).abs() < 1e-12);

        assert!(tp_errors(&[]).is_none());
    }

    #[test]
    fn f1_bounds_and_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(0..6);
            let m = rng.gen_range(0..6);
            let gts: Vec<Box3D> = (0..n)
                .map(|_| boxed(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(0..2)))
                .collect();
            let preds: Vec<Box3D> = (0..m)
                .map(|_| boxed(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(0..2)))
                .collect();
            let r = precision_recall_f1(&preds, &gts, &MatchConfig::default());
            for (_, _, c) in &r.cells {
                assert!(c.f1 <= c.precision.max(c.recall) + 1e-12);
                assert!(c.f1 >= 0.0);
                assert_eq!(c.f1 == 1.0, c.precision == 1.0 && c.recall == 1.0);
            }
            let mut preds2 = preds.clone();
            preds2.reverse();
            let mut gts2 = gts.clone();
            gts2.reverse();
            let r2 = precision_recall_f1(&preds2, &gts2, &MatchConfig::default());
            assert_eq!(r.f1, r2.f1);
            assert_eq!(r.precision, r2.precision);
            assert_eq!(r.recall, r2.recall);
        }
    }

    #[test]
    fn larger_thresholds_never_lose_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let gts: Vec<Box3D> = (0..rng.gen_range(1..6))
                .map(|_| boxed(rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0), 0))
                .collect();
            let preds: Vec<Box3D> = (0..rng.gen_range(1..6))
                .map(|_| boxed(rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0), 0))
                .collect();
            let mut last = 0usize;
            for t in [0.5, 1.0, 2.0, 4.0, 8.0] {
                let m = match_boxes(&preds, &gts, 0, t).len();
                assert!(m >= last);
                last = m;
            }
        }
    }

    /// Exhaustive maximum-cardinality assignment for tiny instances.
    fn optimal_match_count(
        preds: &[Box3D],
        gts: &[Box3D],
        category: usize,
        threshold: f64,
    ) -> usize {
        fn recurse(
            pi: usize,
            preds: &[usize],
            gts: &[usize],
            used: &mut Vec<bool>,
            ok: &dyn Fn(usize, usize) -> bool,
        ) -> usize {
            if pi == preds.len() {
                return 0;
            }
            // Skip this prediction.
            let mut best = recurse(pi + 1, preds, gts, used, ok);
            for (k, &gi) in gts.iter().enumerate() {
                if !used[k] && ok(preds[pi], gi) {
                    used[k] = true;
                    best = best.max(1 + recurse(pi + 1, preds, gts, used, ok));
                    used[k] = false;
                }
            }
            best
        }
        let pidx: Vec<usize> = (0..preds.len())
            .filter(|&i| preds[i].category == category)
            .collect();
        let gidx: Vec<usize> = (0..gts.len())
            .filter(|&i| gts[i].category == category)
            .collect();
        let ok = |pi: usize, gi: usize| center_distance_bev(&preds[pi], &gts[gi]) < threshold;
        recurse(0, &pidx, &gidx, &mut vec![false; gidx.len()], &ok)
    }

    #[test]
    fn greedy_matches_optimal_on_detection_like_instances() {
        // Detection-style instances: predictions are jittered copies of
        // ground truths plus occasional spurious boxes.
        let mut rng = ChaCha8Rng::seed_from_u64(20250811);
        for case in 0..500 {
            let n = rng.gen_range(0..=5usize);
            let gts: Vec<Box3D> = (0..n)
                .map(|_| {
                    boxed(
                        rng.gen_range(-15.0..15.0),
                        rng.gen_range(-15.0..15.0),
                        rng.gen_range(0..2),
                    )
                })
                .collect();
            let mut preds = Vec::new();
            for g in &gts {
                if rng.gen::<f64>() < 0.8 {
                    let mut p = *g;
                    p.x += rng.gen_range(-0.8..0.8);
                    p.y += rng.gen_range(-0.8..0.8);
                    preds.push(p);
                }
            }
            while preds.len() < 5 && rng.gen::<f64>() < 0.3 {
                preds.push(boxed(
                    rng.gen_range(-15.0..15.0),
                    rng.gen_range(-15.0..15.0),
                    rng.gen_range(0..2),
                ));
            }
            for threshold in [0.5, 2.0] {
                for category in 0..2 {
                    let greedy = match_boxes(&preds, &gts, category, threshold).len();
                    let optimal = optimal_match_count(&preds, &gts, category, threshold);
                    assert_eq!(
                        greedy, optimal,
                        "case {case} category {category} threshold {threshold}"
                    );
                }
            }
        }
    }
}
