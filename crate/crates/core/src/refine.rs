//! Cascading refinement: a near-to-far prior model's detections seed a
//! random-order completion model, and the union is merged by BEV-IoU
//! clustering.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoding::{constrain_logits, finish_sequence, interior_capacity};
use crate::geometry::{iou_bev, yaw_normalize, Box3D};
use crate::model::infer::{new_cache, step};
use crate::model::{encoder, DecoderConfig, EncoderConfig, ModelParams};
use crate::scenegen::Point;
use crate::tokenizer::{decode_scene, encode_box, OrderingStrategy, VocabLayout, END, START};

/// One model plus the configs needed to run it.
pub struct Detector<'a> {
    pub params: &'a ModelParams,
    pub enc: &'a EncoderConfig,
    pub dec: &'a DecoderConfig,
}

/// Merges connected components (transitive closure) under pairwise BEV IoU
/// >= `iou_threshold`. Centers, sizes, and velocities average
/// arithmetically; yaw averages circularly; category is the majority with
/// ties broken by the earliest box in input order.
pub fn cluster_boxes(boxes: &[Box3D], iou_threshold: f64) -> Vec<Box3D> {
    let n = boxes.len();
    if n <= 1 {
        return boxes.to_vec();
    }
    // Union-find over pairwise overlaps.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    for i in 0..n {
        for j in i + 1..n {
            if iou_bev(&boxes[i], &boxes[j]) >= iou_threshold {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut components: Vec<Vec<usize>> = Vec::new();
    let mut component_of = vec![usize::MAX; n];
    for i in 0..n {
        let root = find(&mut parent, i);
        if component_of[root] == usize::MAX {
            component_of[root] = components.len();
            components.push(Vec::new());
        }
        components[component_of[root]].push(i);
    }

    components
        .into_iter()
        .map(|members| {
            if members.len() == 1 {
                return boxes[members[0]];
            }
            // Average in a content-canonical order so the merged values do
            // not depend on input permutation.
            let mut sorted: Vec<&Box3D> = members.iter().map(|&i| &boxes[i]).collect();
            sorted.sort_by(|a, b| {
                (a.x, a.y, a.z, a.l, a.w, a.h, a.yaw)
                    .partial_cmp(&(b.x, b.y, b.z, b.l, b.w, b.h, b.yaw))
                    .unwrap()
            });
            let k = sorted.len() as f64;
            let mean = |f: &dyn Fn(&Box3D) -> f64| sorted.iter().map(|b| f(b)).sum::<f64>() / k;
            let sin_sum: f64 = sorted.iter().map(|b| b.yaw.sin()).sum();
            let cos_sum: f64 = sorted.iter().map(|b| b.yaw.cos()).sum();
            // Majority category; ties go to the category appearing earliest
            // in the input order.
            let mut counts: Vec<(usize, usize, usize)> = Vec::new(); // (cat, count, first input idx)
            for &i in &members {
                let cat = boxes[i].category;
                match counts.iter_mut().find(|(c, _, _)| *c == cat) {
                    Some(entry) => entry.1 += 1,
                    None => counts.push((cat, 1, i)),
                }
            }
            counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
            Box3D {
                x: mean(&|b| b.x),
                y: mean(&|b| b.y),
                z: mean(&|b| b.z),
                l: mean(&|b| b.l),
                w: mean(&|b| b.w),
                h: mean(&|b| b.h),
                yaw: yaw_normalize(sin_sum.atan2(cos_sum)),
                vx: mean(&|b| b.vx),
                vy: mean(&|b| b.vy),
                category: counts[0].0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeResult {
    pub boxes: Vec<Box3D>,
    pub prior_count: usize,
    pub completion_count: usize,
    /// True when the shuffled prior prefix did not fit the completion
    /// model's window and completion was skipped.
    pub completion_skipped: bool,
}

/// Greedy decode of one detector.
fn greedy_boxes(detector: &Detector, points: &[Point], layout: &VocabLayout) -> Vec<Box3D> {
    let features = encoder::encode_points(detector.params, detector.enc, points);
    let cfg = crate::decoding::DecodeConfig::new(
        crate::decoding::Strategy::Greedy,
        detector.dec.t_max,
    );
    let seq = crate::decoding::greedy_decode(&features, detector.params, detector.dec, &cfg, layout);
    decode_scene(&seq, layout).expect("constrained decode parses")
}

/// Prior detections, shuffled to strip the near-to-far positional bias,
/// feed the completion model as a prefix (no END); newly generated boxes
/// join the prior set and the union is IoU-clustered.
pub fn cascade(
    prior: &Detector,
    completion: &Detector,
    points: &[Point],
    layout: &VocabLayout,
    shuffle_seed: u64,
    iou_threshold: f64,
) -> CascadeResult {
    let prior_boxes = greedy_boxes(prior, points, layout);

    let mut shuffled = prior_boxes.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    shuffled.shuffle(&mut rng);

    // Room for the prefix plus at least one more token.
    if 10 * shuffled.len() + 2 > completion.dec.t_max {
        return CascadeResult {
            boxes: cluster_boxes(&prior_boxes, iou_threshold),
            prior_count: prior_boxes.len(),
            completion_count: 0,
            completion_skipped: true,
        };
    }

    let features = encoder::encode_points(completion.params, completion.enc, points);
    let mut cache = new_cache(completion.params, completion.dec, &features);
    let mut logits = step(completion.params, completion.dec, &mut cache, START);
    let mut interior: Vec<u32> = Vec::new();
    for b in &shuffled {
        for tok in encode_box(b, layout).expect("prior boxes tokenize") {
            interior.push(tok);
            logits = step(completion.params, completion.dec, &mut cache, tok);
        }
    }
    let cap = interior_capacity(completion.dec.t_max);
    let prefix_len = interior.len();
    loop {
        constrain_logits(&mut logits, interior.len(), layout);
        let tok = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i as u32)
            .unwrap();
        if tok == END {
            break;
        }
        interior.push(tok);
        if interior.len() >= cap {
            break;
        }
        logits = step(completion.params, completion.dec, &mut cache, tok);
    }
    let seq = finish_sequence(interior);
    let all = decode_scene(&seq, layout).expect("constrained decode parses");
    let new_boxes = &all[prefix_len / 10..];

    let mut union = prior_boxes.clone();
    union.extend_from_slice(new_boxes);
    CascadeResult {
        boxes: cluster_boxes(&union, iou_threshold),
        prior_count: prior_boxes.len(),
        completion_count: new_boxes.len(),
        completion_skipped: false,
    }
}

/// The ordering the completion model must have been trained with.
pub fn completion_ordering(seed: u64) -> OrderingStrategy {
    OrderingStrategy::Random(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn boxed(x: f64, y: f64, category: usize) -> Box3D {
        Box3D {
            x,
            y,
            z: 0.5,
            l: 2.0,
            w: 1.0,
            h: 1.0,
            yaw: 0.2,
            vx: 0.5,
            vy: -0.25,
            category,
        }
    }

    #[test]
    fn single_box_survives() {
        let b = boxed(1.0, 2.0, 3);
        assert_eq!(cluster_boxes(&[b], 0.1), vec![b]);
        assert!(cluster_boxes(&[], 0.1).is_empty());
    }

    #[test]
    fn identical_pair_merges_to_itself() {
        let b = boxed(1.0, 2.0, 3);
        let merged = cluster_boxes(&[b, b], 0.1);
        assert_eq!(merged.len(), 1);
        let m = merged[0];
        assert!((m.x - b.x).abs() < 1e-12);
        assert!((m.yaw - b.yaw).abs() < 1e-12);
        assert_eq!(m.category, b.category);
    }

    #[test]
    fn below_threshold_pair_survives() {
        // Axis-aligned 2x1 footprints offset 1.81 m: BEV IoU ~ 0.0499.
        let mut a = boxed(0.0, 0.0, 0);
        let mut b = boxed(1.81, 0.0, 0);
        a.yaw = 0.0;
        b.yaw = 0.0;
        let iou = iou_bev(&a, &b);
        assert!(iou > 0.04 && iou < 0.06, "iou {iou}");
        let merged = cluster_boxes(&[a, b], 0.1);
        assert_eq!(merged.len(), 2);
    }

    #[test]
    fn overlapping_pair_averages_centers() {
        let a = boxed(0.0, 0.0, 0);
        let b = boxed(0.4, 0.0, 0);
        assert!(iou_bev(&a, &b) > 0.1);
        let merged = cluster_boxes(&[a, b], 0.1);
        assert_eq!(merged.len(), 1);
        assert!((merged[0].x - 0.2).abs() < 1e-12);
        assert!((merged[0].y - 0.0).abs() < 1e-12);
    }

    #[test]
    fn yaw_averages_circularly_across_the_seam() {
        let mut a = boxed(0.0, 0.0, 0);
        let mut b = boxed(0.1, 0.0, 0);
        a.yaw = std::f64::consts::PI - 0.05;
        b.yaw = -std::f64::consts::PI + 0.05;
        let merged = cluster_boxes(&[a, b], 0.1);
        assert_eq!(merged.len(), 1);
        // The circular mean sits at the seam, not near zero.
        assert!(merged[0].yaw.abs() > 3.0, "yaw {}", merged[0].yaw);
    }

    #[test]
    fn clustering_reaches_fixpoint_within_len_applications() {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
        for _ in 0..30 {
            let boxes: Vec<Box3D> = (0..10)
                .map(|_| {
                    boxed(
                        rand::Rng::gen_range(&mut rng, -4.0..4.0),
                        rand::Rng::gen_range(&mut rng, -4.0..4.0),
                        rand::Rng::gen_range(&mut rng, 0..3),
                    )
                })
                .collect();
            let mut current = boxes.clone();
            let mut iterations = 0;
            loop {
                let next = cluster_boxes(&current, 0.1);
                iterations += 1;
                if next == current {
                    break;
                }
                assert!(iterations <= boxes.len(), "no fixpoint after {iterations}");
                current = next;
            }
        }
    }

    #[test]
    fn clustering_is_permutation_invariant() {
        let boxes = vec![
            boxed(0.0, 0.0, 0),
            boxed(0.3, 0.0, 0),
            boxed(5.0, 5.0, 1),
            boxed(5.2, 5.1, 1),
            boxed(-6.0, 2.0, 2),
        ];
        let a = cluster_boxes(&boxes, 0.1);
        let mut shuffled = boxes.clone();
        shuffled.reverse();
        shuffled.swap(0, 2);
        let b = cluster_boxes(&shuffled, 0.1);
        let key = |bx: &Box3D| (bx.x, bx.y);
        let mut a2 = a.clone();
        let mut b2 = b.clone();
        a2.sort_by(|p, q| key(p).partial_cmp(&key(q)).unwrap());
        b2.sort_by(|p, q| key(p).partial_cmp(&key(q)).unwrap());
        assert_eq!(a2, b2);
    }

    fn tiny_world() -> (VocabLayout, EncoderConfig, DecoderConfig) {
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
            dropout: 0.0,
        };
        (layout, enc, dec)
    }

    #[test]
    fn completion_that_ends_immediately_returns_clustered_prior() {
        let (layout, enc, dec) = tiny_world();
        let prior_params = init_params(&enc, &dec, 1);
        let mut completion_params = init_params(&enc, &dec, 2);
        completion_params.out_b.data[END as usize] = 60.0;
        let prior = Detector {
            params: &prior_params,
            enc: &enc,
            dec: &dec,
        };
        let completion = Detector {
            params: &completion_params,
            enc: &enc,
            dec: &dec,
        };
        let points: Vec<Point> = (0..40)
            .map(|i| Point {
                x: (i as f64) * 0.3 - 6.0,
                y: ((i * 7) % 11) as f64 - 5.0,
                z: 0.5,
                intensity: 0.4,
            })
            .collect();
        let result = cascade(&prior, &completion, &points, &layout, 5, 0.1);
        let prior_alone = greedy_boxes(&prior, &points, &layout);
        assert_eq!(result.completion_count, 0);
        assert!(!result.completion_skipped);
        assert_eq!(result.boxes, cluster_boxes(&prior_alone, 0.1));
    }

    #[test]
    fn empty_prior_falls_back_to_completion_alone() {
        let (layout, enc, dec) = tiny_world();
        let mut prior_params = init_params(&enc, &dec, 3);
        prior_params.out_b.data[END as usize] = 60.0;
        let completion_params = init_params(&enc, &dec, 4);
        let prior = Detector {
            params: &prior_params,
            enc: &enc,
            dec: &dec,
        };
        let completion = Detector {
            params: &completion_params,
            enc: &enc,
            dec: &dec,
        };
        let points = vec![Point {
            x: 1.0,
            y: -2.0,
            z: 0.5,
            intensity: 0.7,
        }];
        let result = cascade(&prior, &completion, &points, &layout, 5, 0.1);
        assert_eq!(result.prior_count, 0);
        let completion_alone = greedy_boxes(&completion, &points, &layout);
        assert_eq!(result.boxes, cluster_boxes(&completion_alone, 0.1));
    }

    #[test]
    fn oversized_prefix_skips_completion() {
        let (layout, enc, dec) = tiny_world();
        let prior_params = init_params(&enc, &dec, 5);
        let mut small_dec = dec.clone();
        small_dec.t_max = 12; // room for START + one object only
        let completion_params = init_params(&enc, &small_dec, 6);
        let prior = Detector {
            params: &prior_params,
            enc: &enc,
            dec: &dec,
        };
        let completion = Detector {
            params: &completion_params,
            enc: &enc,
            dec: &small_dec,
        };
        // Random-init prior on noisy points emits a long sequence; if it
        // emits >= 2 objects the prefix cannot fit.
        let points: Vec<Point> = (0..60)
            .map(|i| Point {
                x: ((i * 13) % 17) as f64 - 8.0,
                y: ((i * 5) % 19) as f64 - 9.0,
                z: 0.4,
                intensity: 0.2,
            })
            .collect();
        let result = cascade(&prior, &completion, &points, &layout, 7, 0.1);
        if result.prior_count >= 2 {
            assert!(result.completion_skipped);
            assert_eq!(result.completion_count, 0);
        }
    }
}
