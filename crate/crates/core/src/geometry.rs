//! Rotated 3D box geometry in the ego frame: BEV footprints, convex
//! intersection, IoU, center distances, yaw arithmetic.
//!
//! Everything here is a pure function on immutable values.

use std::f64::consts::PI;

/// One detected or annotated object.
///
/// `(x, y, z)` is the box center in the ego frame (`z` is the center height),
/// `(l, w, h)` the full extents, `yaw` the heading in `[-pi, pi)`, and
/// `(vx, vy)` the planar velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub category: usize,
}

impl Box3D {
    /// Checks the type invariants: positive extents, yaw in `[-pi, pi)`,
    /// all fields finite.
    pub fn is_valid(&self) -> bool {
        let finite = [
            self.x, self.y, self.z, self.l, self.w, self.h, self.yaw, self.vx, self.vy,
        ]
        .iter()
        .all(|v| v.is_finite());
        finite && self.l > 0.0 && self.w > 0.0 && self.h > 0.0 && (-PI..PI).contains(&self.yaw)
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    fn z_interval(&self) -> (f64, f64) {
        (self.z - self.h / 2.0, self.z + self.h / 2.0)
    }
}

/// Convex polygon in the BEV plane, vertices counter-clockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon2D {
    pub vertices: Vec<[f64; 2]>,
}

impl ConvexPolygon2D {
    /// Shoelace area. Non-negative for counter-clockwise winding.
    pub fn area(&self) -> f64 {
        shoelace(&self.vertices).max(0.0)
    }
}

fn shoelace(vertices: &[[f64; 2]]) -> f64 {
    if vertices.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..vertices.len() {
        let [x0, y0] = vertices[i];
        let [x1, y1] = vertices[(i + 1) % vertices.len()];
        acc += x0 * y1 - x1 * y0;
    }
    acc / 2.0
}

/// BEV footprint of a box: the yaw-rotated `l x w` rectangle around
/// `(x, y)`, counter-clockwise.
pub fn bev_footprint(b: &Box3D) -> ConvexPolygon2D {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (b.l / 2.0, b.w / 2.0);
    // CCW in the local frame, preserved by rotation.
    let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
    let vertices = local
        .iter()
        .map(|[u, v]| [b.x + u * c - v * s, b.y + u * s + v * c])
        .collect();
    ConvexPolygon2D { vertices }
}

/// Signed distance of `p` to the left of directed edge `a -> b` (up to scale).
fn edge_side(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Sutherland-Hodgman: clip `subject` against the left half-plane of `a -> b`.
fn clip_halfplane(subject: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(subject.len() + 1);
    let n = subject.len();
    for i in 0..n {
        let s = subject[i];
        let e = subject[(i + 1) % n];
        let sd = edge_side(a, b, s);
        let ed = edge_side(a, b, e);
        let s_in = sd >= 0.0;
        let e_in = ed >= 0.0;
        if s_in != e_in {
            let t = sd / (sd - ed);
            out.push([s[0] + (e[0] - s[0]) * t, s[1] + (e[1] - s[1]) * t]);
        }
        if e_in {
            out.push(e);
        }
    }
    out
}

/// Area of the intersection of two convex CCW polygons. Zero when disjoint
/// or when clipping degenerates below three vertices.
pub fn convex_intersection_area(a: &ConvexPolygon2D, b: &ConvexPolygon2D) -> f64 {
    let mut poly = a.vertices.clone();
    let nb = b.vertices.len();
    for i in 0..nb {
        if poly.len() < 3 {
            return 0.0;
        }
        poly = clip_halfplane(&poly, b.vertices[i], b.vertices[(i + 1) % nb]);
    }
    if poly.len() < 3 {
        0.0
    } else {
        shoelace(&poly).max(0.0)
    }
}

/// BEV footprint intersection area of two boxes. Arguments are ordered by a
/// deterministic key first so the result is exactly symmetric.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let key = |b: &Box3D| [b.x, b.y, b.z, b.l, b.w, b.h, b.yaw];
    let (first, second) = if key(a)
        .iter()
        .zip(key(b).iter())
        .find_map(|(p, q)| {
            let ord = p.total_cmp(q);
            (ord != std::cmp::Ordering::Equal).then_some(ord)
        })
        .unwrap_or(std::cmp::Ordering::Equal)
        == std::cmp::Ordering::Greater
    {
        (b, a)
    } else {
        (a, b)
    };
    convex_intersection_area(&bev_footprint(first), &bev_footprint(second))
}

/// Rotated-box 3D IoU: BEV footprint intersection times vertical interval
/// overlap, over the union of volumes.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let inter_bev = bev_intersection_area(a, b);
    if inter_bev <= 0.0 {
        return 0.0;
    }
    let (bot_a, top_a) = a.z_interval();
    let (bot_b, top_b) = b.z_interval();
    let dz = (top_a.min(top_b) - bot_a.max(bot_b)).max(0.0);
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = inter_bev * dz;
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Rotated-box BEV IoU: footprint intersection over footprint union.
pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.l * a.w + b.l * b.w - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Planar distance between box centers.
pub fn center_distance_bev(a: &Box3D, b: &Box3D) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Wraps an angle into `[-pi, pi)`; `+pi` maps to `-pi`.
pub fn yaw_normalize(theta: f64) -> f64 {
    debug_assert!(theta.is_finite());
    let t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can return exactly 2*pi for inputs just below it.
    if t >= PI {
        -PI
    } else {
        t
    }
}

/// BEV distance of a box center from the ego origin.
pub fn range_to_ego(b: &Box3D) -> f64 {
    b.x.hypot(b.y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_box() -> Box3D {
        Box3D {
            x: 0.0,
            y: 0.0,
            z: 0.0,
            l: 1.0,
            w: 1.0,
            h: 1.0,
            yaw: 0.0,
            vx: 0.0,
            vy: 0.0,
            category: 0,
        }
    }

    fn random_box(rng: &mut impl Rng) -> Box3D {
        Box3D {
            x: rng.gen_range(-3.0..3.0),
            y: rng.gen_range(-3.0..3.0),
            z: rng.gen_range(-0.5..0.5),
            l: rng.gen_range(1.0..6.0),
            w: rng.gen_range(0.5..3.0),
            h: rng.gen_range(0.5..3.0),
            yaw: rng.gen_range(-PI..PI),
            vx: 0.0,
            vy: 0.0,
            category: 0,
        }
    }

    /// Monte-Carlo IoU: uniform samples in the joint bounding box. Independent
    /// of the clipping path; shared with the acceptance suite by construction.
    fn monte_carlo_iou(a: &Box3D, b: &Box3D, samples: usize, seed: u64) -> f64 {
        fn point_in(b: &Box3D, p: [f64; 3]) -> bool {
            let (s, c) = b.yaw.sin_cos();
            let dx = p[0] - b.x;
            let dy = p[1] - b.y;
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            u.abs() <= b.l / 2.0 && v.abs() <= b.w / 2.0 && (p[2] - b.z).abs() <= b.h / 2.0
        }
        let corners = |bx: &Box3D| {
            let fp = bev_footprint(bx);
            let (zb, zt) = (bx.z - bx.h / 2.0, bx.z + bx.h / 2.0);
            (fp, zb, zt)
        };
        let (fa, zb_a, zt_a) = corners(a);
        let (fb, zb_b, zt_b) = corners(b);
        let xs: Vec<f64> = fa.vertices.iter().chain(&fb.vertices).map(|v| v[0]).collect();
        let ys: Vec<f64> = fa.vertices.iter().chain(&fb.vertices).map(|v| v[1]).collect();
        let (x0, x1) = (
            xs.iter().cloned().fold(f64::INFINITY, f64::min),
            xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        );
        let (y0, y1) = (
            ys.iter().cloned().fold(f64::INFINITY, f64::min),
            ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        );
        let (z0, z1) = (zb_a.min(zb_b), zt_a.max(zt_b));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut in_a, mut in_b, mut in_both) = (0u64, 0u64, 0u64);
        for _ in 0..samples {
            let p = [
                rng.gen_range(x0..x1),
                rng.gen_range(y0..y1),
                rng.gen_range(z0..z1),
            ];
            let ha = point_in(a, p);
            let hb = point_in(b, p);
            in_a += ha as u64;
            in_b += hb as u64;
            in_both += (ha && hb) as u64;
        }
        let union = in_a + in_b - in_both;
        if union == 0 {
            0.0
        } else {
            in_both as f64 / union as f64
        }
    }

    #[test]
    fn footprint_axis_aligned_unit_box() {
        let fp = bev_footprint(&unit_box());
        assert_eq!(fp.vertices.len(), 4);
        for v in &fp.vertices {
            assert!((v[0].abs() - 0.5).abs() < 1e-12);
            assert!((v[1].abs() - 0.5).abs() < 1e-12);
        }
        assert!((fp.area() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn footprint_quarter_turn_swaps_axes() {
        let mut b = unit_box();
        b.l = 2.0;
        let fp0 = bev_footprint(&b);
        b.yaw = PI / 2.0;
        let fp90 = bev_footprint(&b);
        // Extents along x/y swap under a quarter turn.
        let extent = |fp: &ConvexPolygon2D, axis: usize| {
            let vs: Vec<f64> = fp.vertices.iter().map(|v| v[axis]).collect();
            vs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - vs.iter().cloned().fold(f64::INFINITY, f64::min)
        };
        assert!((extent(&fp0, 0) - extent(&fp90, 1)).abs() < 1e-12);
        assert!((extent(&fp0, 1) - extent(&fp90, 0)).abs() < 1e-12);
    }

    #[test]
    fn footprint_diagonal_vertices() {
        let mut b = unit_box();
        b.yaw = PI / 4.0;
        let fp = bev_footprint(&b);
        for v in &fp.vertices {
            let d = v[0].hypot(v[1]);
            assert!((d - (2.0f64).sqrt() / 2.0).abs() < 1e-12);
            // On a diagonal: one coordinate is ~0.
            assert!(v[0].abs() < 1e-12 || v[1].abs() < 1e-12);
        }
    }

    #[test]
    fn intersection_with_self_is_area() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let fp = bev_footprint(&random_box(&mut rng));
            assert!((convex_intersection_area(&fp, &fp) - fp.area()).abs() < 1e-9);
        }
    }

    #[test]
    fn intersection_offset_unit_squares() {
        let a = bev_footprint(&unit_box());
        let mut b = unit_box();
        b.x = 0.5;
        let fb = bev_footprint(&b);
        assert!((convex_intersection_area(&a, &fb) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn intersection_rotated_octagon() {
        let a = bev_footprint(&unit_box());
        let mut r = unit_box();
        r.yaw = PI / 4.0;
        let b = bev_footprint(&r);
        let expect = 2.0 * ((2.0f64).sqrt() - 1.0);
        assert!((convex_intersection_area(&a, &b) - expect).abs() < 1e-9);
    }

    #[test]
    fn intersection_bounded_by_min_area() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let a = bev_footprint(&random_box(&mut rng));
            let b = bev_footprint(&random_box(&mut rng));
            let inter = convex_intersection_area(&a, &b);
            assert!(inter <= a.area().min(b.area()) + 1e-9);
            assert!(inter >= 0.0);
        }
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let b = unit_box();
        assert_eq!(iou_3d(&b, &b), 1.0);
        let mut far = b;
        far.z = 10.0;
        assert_eq!(iou_3d(&b, &far), 0.0);
        let mut side = b;
        side.x = 5.0;
        assert_eq!(iou_3d(&b, &side), 0.0);
    }

    #[test]
    fn iou_offset_unit_cubes() {
        let a = unit_box();
        let mut b = unit_box();
        b.x = 0.5;
        assert!((iou_3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_rotated_square_analytic() {
        let a = unit_box();
        let mut b = unit_box();
        b.yaw = PI / 4.0;
        let inter = 2.0 * ((2.0f64).sqrt() - 1.0);
        let expect = inter / (2.0 - inter);
        assert!((iou_3d(&a, &b) - expect).abs() < 1e-9);
        assert!((expect - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn iou_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            assert_eq!(iou_3d(&a, &b), iou_3d(&b, &a));
            assert_eq!(iou_bev(&a, &b), iou_bev(&b, &a));
        }
    }

    #[test]
    fn iou_rigid_bev_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let base = iou_3d(&a, &b);
            let (dx, dy, phi) = (
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-PI..PI),
            );
            let transform = |bx: &Box3D| {
                let (s, c) = phi.sin_cos();
                Box3D {
                    x: bx.x * c - bx.y * s + dx,
                    y: bx.x * s + bx.y * c + dy,
                    yaw: yaw_normalize(bx.yaw + phi),
                    ..*bx
                }
            };
            let moved = iou_3d(&transform(&a), &transform(&b));
            assert!((base - moved).abs() < 1e-9, "base {base} moved {moved}");
        }
    }

    #[test]
    fn iou_monte_carlo_sanity() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for i in 0..20 {
            let a = random_box(&mut rng);
            let mut b = random_box(&mut rng);
            // Pull b near a so overlap is common.
            b.x = a.x + rng.gen_range(-1.5..1.5);
            b.y = a.y + rng.gen_range(-1.5..1.5);
            b.z = a.z + rng.gen_range(-0.5..0.5);
            let exact = iou_3d(&a, &b);
            let mc = monte_carlo_iou(&a, &b, 200_000, 1000 + i);
            assert!(
                (exact - mc).abs() <= 8e-3,
                "pair {i}: exact {exact} mc {mc}"
            );
        }
    }

    #[test]
    fn center_distance_cases() {
        let a = unit_box();
        assert_eq!(center_distance_bev(&a, &a), 0.0);
        let mut b = unit_box();
        b.x = 3.0;
        b.y = 4.0;
        assert!((center_distance_bev(&a, &b) - 5.0).abs() < 1e-12);
        assert_eq!(center_distance_bev(&a, &b), center_distance_bev(&b, &a));
    }

    #[test]
    fn yaw_normalize_cases() {
        assert_eq!(yaw_normalize(0.0), 0.0);
        assert!((yaw_normalize(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(yaw_normalize(-PI), -PI);
        assert_eq!(yaw_normalize(PI), -PI);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..1000 {
            let t = rng.gen_range(-50.0..50.0);
            let n = yaw_normalize(t);
            assert!((-PI..PI).contains(&n));
            assert_eq!(yaw_normalize(n), n, "idempotent at {t}");
            let wrapped = (t - n) / (2.0 * PI);
            assert!((wrapped - wrapped.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn range_to_ego_cases() {
        let mut b = unit_box();
        assert_eq!(range_to_ego(&b), 0.0);
        b.x = 6.0;
        b.y = 8.0;
        b.z = -4.0;
        assert!((range_to_ego(&b) - 10.0).abs() < 1e-12);
        let z0 = range_to_ego(&b);
        b.z = 7.0;
        assert_eq!(range_to_ego(&b), z0);
    }
}
