//! Axis-aligned 3D box geometry: primitive centers, IoU, greedy NMS, and
//! residual box encoding.
//!
//! Boxes are parameterized by center and size. Sizes are strictly
//! positive and finite, enforced at construction, which keeps volumes and
//! unions positive everywhere downstream.

use thiserror::Error;

/// Default IoU threshold for non-maximum suppression.
pub const DEFAULT_NMS_IOU: f64 = 0.25;

/// Guard on residual log-size magnitudes so decoded sizes stay finite.
pub const MAX_LOG_SIZE_RATIO: f64 = 50.0;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("box size {size:?} must be componentwise positive and finite")]
    BadSize { size: [f64; 3] },
    #[error("box center {center:?} must be finite")]
    BadCenter { center: [f64; 3] },
    #[error("objectness {0} outside [0, 1]")]
    BadObjectness(f64),
}

/// Axis-aligned box given by center and extents (width, length, height
/// along x, y, z).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3 {
    center: [f64; 3],
    size: [f64; 3],
}

impl Box3 {
    pub fn new(center: [f64; 3], size: [f64; 3]) -> Result<Self, GeometryError> {
        if !center.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::BadCenter { center });
        }
        if !size.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(GeometryError::BadSize { size });
        }
        Ok(Box3 { center, size })
    }

    pub fn center(&self) -> [f64; 3] {
        self.center
    }

    pub fn size(&self) -> [f64; 3] {
        self.size
    }

    /// Minimum corner.
    pub fn min(&self) -> [f64; 3] {
        [
            self.center[0] - self.size[0] / 2.0,
            self.center[1] - self.size[1] / 2.0,
            self.center[2] - self.size[2] / 2.0,
        ]
    }

    /// Maximum corner.
    pub fn max(&self) -> [f64; 3] {
        [
            self.center[0] + self.size[0] / 2.0,
            self.center[1] + self.size[1] / 2.0,
            self.center[2] + self.size[2] / 2.0,
        ]
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// Whether a point lies inside the box (boundary inclusive).
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a])
    }

    /// Centers of the six faces, in the fixed order
    /// `+x, -x, +y, -y, +z, -z`.
    pub fn face_centers(&self) -> [[f64; 3]; 6] {
        let c = self.center;
        let h = [self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0];
        [
            [c[0] + h[0], c[1], c[2]],
            [c[0] - h[0], c[1], c[2]],
            [c[0], c[1] + h[1], c[2]],
            [c[0], c[1] - h[1], c[2]],
            [c[0], c[1], c[2] + h[2]],
            [c[0], c[1], c[2] - h[2]],
        ]
    }

    /// Midpoints of the twelve edges.
    ///
    /// Canonical order: edges parallel to x, then y, then z. Within each
    /// group the two free axes keep their x < y < z order and run through
    /// the sign patterns `(+,+), (+,-), (-,+), (-,-)`.
    pub fn edge_centers(&self) -> [[f64; 3]; 12] {
        let c = self.center;
        let h = [self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0];
        let mut out = [[0.0; 3]; 12];
        let mut k = 0;
        for axis in 0..3 {
            let (a, b) = match axis {
                0 => (1, 2), // free axes y, z
                1 => (0, 2), // free axes x, z
                _ => (0, 1), // free axes x, y
            };
            for (sa, sb) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let mut p = c;
                p[a] += sa * h[a];
                p[b] += sb * h[b];
                out[k] = p;
                k += 1;
            }
        }
        out
    }
}

/// Overlap volume of two axis-aligned boxes.
pub fn intersection_volume(a: &Box3, b: &Box3) -> f64 {
    let (amin, amax) = (a.min(), a.max());
    let (bmin, bmax) = (b.min(), b.max());
    let mut v = 1.0;
    for axis in 0..3 {
        let lo = amin[axis].max(bmin[axis]);
        let hi = amax[axis].min(bmax[axis]);
        let overlap = (hi - lo).max(0.0);
        if overlap == 0.0 {
            return 0.0;
        }
        v *= overlap;
    }
    v
}

/// Intersection-over-union of two axis-aligned boxes. Always in `[0, 1]`;
/// the union is positive because sizes are positive.
pub fn iou3d(a: &Box3, b: &Box3) -> f64 {
    let inter = intersection_volume(a, b);
    let union = a.volume() + b.volume() - inter;
    inter / union
}

/// One scored, classified box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: Box3,
    pub class_id: usize,
    pub objectness: f64,
}

impl Detection {
    pub fn new(bbox: Box3, class_id: usize, objectness: f64) -> Result<Self, GeometryError> {
        if !objectness.is_finite() || !(0.0..=1.0).contains(&objectness) {
            return Err(GeometryError::BadObjectness(objectness));
        }
        Ok(Detection {
            bbox,
            class_id,
            objectness,
        })
    }
}

/// Greedy per-class non-maximum suppression.
///
/// Detections are visited in a stable order (objectness descending, ties
/// by input index ascending); a detection is suppressed when a kept
/// detection of the same class overlaps it with IoU strictly above
/// `iou_thresh`. Different classes never suppress each other. The kept
/// detections are returned in visiting order.
pub fn nms(detections: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&i, &j| {
        detections[j]
            .objectness
            .partial_cmp(&detections[i].objectness)
            .expect("objectness is finite")
            .then(i.cmp(&j))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        let d = &detections[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou3d(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

/// Offset of a target box relative to an anchor box: center deltas
/// normalized by the anchor size, sizes as log-ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxResidual {
    pub d_center: [f64; 3],
    pub d_size: [f64; 3],
}

impl BoxResidual {
    pub const ZERO: BoxResidual = BoxResidual {
        d_center: [0.0; 3],
        d_size: [0.0; 3],
    };

    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), 6, "residual needs 6 components");
        BoxResidual {
            d_center: [v[0], v[1], v[2]],
            d_size: [v[3], v[4], v[5]],
        }
    }

    pub fn to_array(self) -> [f64; 6] {
        [
            self.d_center[0],
            self.d_center[1],
            self.d_center[2],
            self.d_size[0],
            self.d_size[1],
            self.d_size[2],
        ]
    }
}

/// Residual that moves `anchor` onto `target`.
pub fn encode_residual(target: &Box3, anchor: &Box3) -> BoxResidual {
    let mut d_center = [0.0; 3];
    let mut d_size = [0.0; 3];
    for a in 0..3 {
        d_center[a] = (target.center[a] - anchor.center[a]) / anchor.size[a];
        d_size[a] = (target.size[a] / anchor.size[a]).ln();
    }
    BoxResidual { d_center, d_size }
}

/// Applies a residual to an anchor. Sizes stay positive through the
/// exponential; log-ratios are clamped to ±50 so they also stay finite.
pub fn decode_residual(residual: &BoxResidual, anchor: &Box3) -> Box3 {
    let mut center = [0.0; 3];
    let mut size = [0.0; 3];
    for a in 0..3 {
        center[a] = anchor.center[a] + residual.d_center[a] * anchor.size[a];
        size[a] = anchor.size[a]
            * residual.d_size[a]
                .clamp(-MAX_LOG_SIZE_RATIO, MAX_LOG_SIZE_RATIO)
                .exp();
    }
    Box3 { center, size }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_box(rng: &mut ChaCha8Rng) -> Box3 {
        Box3::new(
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ],
            [
                rng.gen_range(0.2..2.0),
                rng.gen_range(0.2..2.0),
                rng.gen_range(0.2..2.0),
            ],
        )
        .unwrap()
    }

    #[test]
    fn construction_rejects_bad_sizes() {
        assert!(Box3::new([0.0; 3], [1.0, 1.0, 0.0]).is_err());
        assert!(Box3::new([0.0; 3], [1.0, -1.0, 1.0]).is_err());
        assert!(Box3::new([0.0; 3], [1.0, f64::NAN, 1.0]).is_err());
        assert!(Box3::new([f64::INFINITY, 0.0, 0.0], [1.0; 3]).is_err());
    }

    #[test]
    fn unit_cube_face_centers() {
        let b = Box3::new([0.0; 3], [1.0; 3]).unwrap();
        assert_eq!(
            b.face_centers(),
            [
                [0.5, 0.0, 0.0],
                [-0.5, 0.0, 0.0],
                [0.0, 0.5, 0.0],
                [0.0, -0.5, 0.0],
                [0.0, 0.0, 0.5],
                [0.0, 0.0, -0.5],
            ]
        );
    }

    /// Independent construction of edge midpoints: enumerate the eight
    /// corners, pair corners differing in exactly one coordinate, and
    /// average each adjacent pair.
    fn edge_midpoints_from_corners(b: &Box3) -> Vec<[f64; 3]> {
        let (lo, hi) = (b.min(), b.max());
        let corner = |mask: usize| -> [f64; 3] {
            let mut p = [0.0; 3];
            for a in 0..3 {
                p[a] = if mask & (1 << a) != 0 { hi[a] } else { lo[a] };
            }
            p
        };
        let mut mids = Vec::new();
        for i in 0..8usize {
            for j in (i + 1)..8usize {
                if (i ^ j).count_ones() == 1 {
                    let (p, q) = (corner(i), corner(j));
                    mids.push([
                        (p[0] + q[0]) / 2.0,
                        (p[1] + q[1]) / 2.0,
                        (p[2] + q[2]) / 2.0,
                    ]);
                }
            }
        }
        mids
    }

    #[test]
    fn edge_centers_match_corner_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let b = random_box(&mut rng);
            let got = b.edge_centers();
            assert_eq!(got.len(), 12);
            let mut expect = edge_midpoints_from_corners(&b);
            assert_eq!(expect.len(), 12);
            let key = |p: &[f64; 3]| {
                (
                    (p[0] * 1e9).round() as i64,
                    (p[1] * 1e9).round() as i64,
                    (p[2] * 1e9).round() as i64,
                )
            };
            let mut got: Vec<_> = got.to_vec();
            got.sort_by_key(key);
            expect.sort_by_key(key);
            for (g, e) in got.iter().zip(&expect) {
                for a in 0..3 {
                    assert!(
                        (g[a] - e[a]).abs() < 1e-9,
                        "edge midpoint {g:?} vs oracle {e:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn iou_identical_and_disjoint_boxes() {
        let a = Box3::new([0.0; 3], [1.0, 2.0, 3.0]).unwrap();
        assert_eq!(iou3d(&a, &a), 1.0);
        let b = Box3::new([10.0, 0.0, 0.0], [1.0; 3]).unwrap();
        assert_eq!(iou3d(&a, &b), 0.0);
    }

    #[test]
    fn iou_one_third_fixture() {
        // Two 2×2×2 cubes offset by 1 along x: intersection 1·2·2 = 4,
        // union 8 + 8 − 4 = 12.
        let a = Box3::new([0.0, 0.0, 0.0], [2.0; 3]).unwrap();
        let b = Box3::new([1.0, 0.0, 0.0], [2.0; 3]).unwrap();
        assert!((iou3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_symmetric_bounded_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..200 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let iou = iou3d(&a, &b);
            assert!((0.0..=1.0).contains(&iou));
            assert_eq!(iou, iou3d(&b, &a));
            let t = [
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ];
            let shift = |x: &Box3| {
                Box3::new(
                    [x.center[0] + t[0], x.center[1] + t[1], x.center[2] + t[2]],
                    x.size,
                )
                .unwrap()
            };
            assert!((iou3d(&shift(&a), &shift(&b)) - iou).abs() < 1e-12);
        }
    }

    #[test]
    fn growing_a_box_never_shrinks_the_intersection() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let before = intersection_volume(&a, &b);
            let grow = [
                rng.gen_range(1.0..2.0),
                rng.gen_range(1.0..2.0),
                rng.gen_range(1.0..2.0),
            ];
            let bigger = Box3::new(
                b.center,
                [b.size[0] * grow[0], b.size[1] * grow[1], b.size[2] * grow[2]],
            )
            .unwrap();
            let after = intersection_volume(&a, &bigger);
            assert!(
                after >= before - 1e-12,
                "intersection shrank from {before} to {after}"
            );
        }
    }

    #[test]
    fn nms_keeps_best_of_mutually_overlapping_cluster() {
        let mk = |c: f64, score: f64| Detection {
            bbox: Box3::new([c, 0.0, 0.0], [2.0; 3]).unwrap(),
            class_id: 0,
            objectness: score,
        };
        let dets = vec![mk(0.0, 0.7), mk(0.2, 0.9), mk(-0.2, 0.8)];
        let kept = nms(&dets, DEFAULT_NMS_IOU);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].objectness, 0.9);
    }

    #[test]
    fn nms_never_suppresses_across_classes() {
        let mk = |class: usize, score: f64| Detection {
            bbox: Box3::new([0.0; 3], [1.0; 3]).unwrap(),
            class_id: class,
            objectness: score,
        };
        let dets = vec![mk(0, 0.9), mk(1, 0.8), mk(2, 0.7)];
        let kept = nms(&dets, 0.25);
        assert_eq!(kept.len(), 3);
        // Visiting order is score-descending.
        assert!(kept[0].objectness > kept[1].objectness);
    }

    #[test]
    fn nms_of_empty_input_is_empty() {
        assert!(nms(&[], 0.25).is_empty());
    }

    #[test]
    fn nms_tie_break_is_input_order() {
        let mk = |c: f64| Detection {
            bbox: Box3::new([c, 0.0, 0.0], [1.0; 3]).unwrap(),
            class_id: 0,
            objectness: 0.5,
        };
        // Far apart, equal scores: both kept, input order preserved.
        let dets = vec![mk(10.0), mk(-10.0)];
        let kept = nms(&dets, 0.25);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].bbox.center()[0], 10.0);
    }

    #[test]
    fn zero_residual_is_the_identity() {
        let anchor = Box3::new([1.0, -2.0, 0.5], [0.4, 1.1, 2.2]).unwrap();
        let decoded = decode_residual(&BoxResidual::ZERO, &anchor);
        assert_eq!(decoded, anchor);
    }

    #[test]
    fn residual_roundtrip_recovers_the_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..200 {
            let target = random_box(&mut rng);
            let anchor = random_box(&mut rng);
            let r = encode_residual(&target, &anchor);
            let back = decode_residual(&r, &anchor);
            for a in 0..3 {
                assert!((back.center()[a] - target.center()[a]).abs() < 1e-9);
                assert!((back.size()[a] - target.size()[a]).abs() < 1e-9);
            }
        }
    }
}
