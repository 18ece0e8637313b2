//! Independent oracles used by the acceptance suite.
//!
//! Everything in here recomputes a quantity from its definition, with no
//! code shared with the library implementation, so a bug in the library
//! cannot hide inside its own test.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use votebox::geometry::Box3;

/// Monte-Carlo IoU: samples points uniformly over the joint bounding
/// volume of both boxes and counts membership directly from the box
/// definitions (center ± half size). Standard error at 10^6 samples is
/// well under the 0.01 acceptance band.
pub fn monte_carlo_iou(a: &Box3, b: &Box3, samples: usize, rng: &mut ChaCha8Rng) -> f64 {
    let bounds = |bx: &Box3| {
        let c = bx.center();
        let s = bx.size();
        (
            [c[0] - s[0] / 2.0, c[1] - s[1] / 2.0, c[2] - s[2] / 2.0],
            [c[0] + s[0] / 2.0, c[1] + s[1] / 2.0, c[2] + s[2] / 2.0],
        )
    };
    let (alo, ahi) = bounds(a);
    let (blo, bhi) = bounds(b);
    let lo = [
        alo[0].min(blo[0]),
        alo[1].min(blo[1]),
        alo[2].min(blo[2]),
    ];
    let hi = [
        ahi[0].max(bhi[0]),
        ahi[1].max(bhi[1]),
        ahi[2].max(bhi[2]),
    ];
    let inside = |lo: &[f64; 3], hi: &[f64; 3], p: &[f64; 3]| {
        (0..3).all(|k| p[k] >= lo[k] && p[k] <= hi[k])
    };
    let mut in_a = 0u64;
    let mut in_b = 0u64;
    let mut in_both = 0u64;
    for _ in 0..samples {
        let p = [
            rng.gen_range(lo[0]..=hi[0]),
            rng.gen_range(lo[1]..=hi[1]),
            rng.gen_range(lo[2]..=hi[2]),
        ];
        let a_hit = inside(&alo, &ahi, &p);
        let b_hit = inside(&blo, &bhi, &p);
        in_a += a_hit as u64;
        in_b += b_hit as u64;
        in_both += (a_hit && b_hit) as u64;
    }
    let union = in_a + in_b - in_both;
    if union == 0 {
        0.0
    } else {
        in_both as f64 / union as f64
    }
}

/// Brute-force average precision over ranked hit flags.
///
/// Recomputes the PR curve point by point — true positives by recounting
/// the whole prefix at every rank, the precision envelope by scanning
/// every later rank — and integrates in rank order. No running state is
/// carried between ranks, so this cannot share a bookkeeping bug with an
/// incremental implementation.
pub fn brute_force_ap(flags: &[bool], gt_count: usize) -> f64 {
    if gt_count == 0 || flags.is_empty() {
        return 0.0;
    }
    let n = flags.len();
    let prefix_tp = |rank: usize| flags[..=rank].iter().filter(|&&h| h).count();
    let recall_at = |rank: usize| prefix_tp(rank) as f64 / gt_count as f64;
    let precision_at = |rank: usize| prefix_tp(rank) as f64 / (rank + 1) as f64;
    let envelope_at = |rank: usize| {
        (rank..n)
            .map(precision_at)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for rank in 0..n {
        ap += (recall_at(rank) - prev_recall) * envelope_at(rank);
        prev_recall = recall_at(rank);
    }
    ap
}

/// Counting errors recomputed straight from their definitions: per class,
/// RMSE = sqrt(mean_i (p_i - g_i)^2) and relative RMSE divides each
/// squared error by (g_i + 1); the nz- variants restrict the mean to
/// scenes where the class truly appears, and the m- aggregates are plain
/// means over classes.
pub struct CountOracle {
    pub m_rmse: f64,
    pub m_rrmse: f64,
    pub m_nz_rmse: f64,
    pub m_nz_rrmse: f64,
}

pub fn brute_force_counts(predicted: &[Vec<usize>], truth: &[Vec<usize>]) -> CountOracle {
    let classes = predicted[0].len();
    let scenes = predicted.len();
    let mut rmse = Vec::new();
    let mut rrmse = Vec::new();
    let mut nz_rmse = Vec::new();
    let mut nz_rrmse = Vec::new();
    for c in 0..classes {
        let errs: Vec<(f64, f64, bool)> = (0..scenes)
            .map(|i| {
                let d = predicted[i][c] as f64 - truth[i][c] as f64;
                (d * d, d * d / (truth[i][c] as f64 + 1.0), truth[i][c] > 0)
            })
            .collect();
        let mean = |vals: &[f64]| {
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        let all_sq: Vec<f64> = errs.iter().map(|e| e.0).collect();
        let all_rel: Vec<f64> = errs.iter().map(|e| e.1).collect();
        let nz_sq: Vec<f64> = errs.iter().filter(|e| e.2).map(|e| e.0).collect();
        let nz_rel: Vec<f64> = errs.iter().filter(|e| e.2).map(|e| e.1).collect();
        rmse.push(mean(&all_sq).sqrt());
        rrmse.push(mean(&all_rel).sqrt());
        nz_rmse.push(mean(&nz_sq).sqrt());
        nz_rrmse.push(mean(&nz_rel).sqrt());
    }
    let class_mean = |vals: &[f64]| vals.iter().sum::<f64>() / vals.len() as f64;
    CountOracle {
        m_rmse: class_mean(&rmse),
        m_rrmse: class_mean(&rrmse),
        m_nz_rmse: class_mean(&nz_rmse),
        m_nz_rrmse: class_mean(&nz_rrmse),
    }
}

/// Random axis-aligned box with sides in `[0.2, 2.0]` and center in
/// `[-1.5, 1.5]^3` — sized so random pairs span disjoint, partially
/// overlapping, and nested configurations.
pub fn random_box(rng: &mut ChaCha8Rng) -> Box3 {
    let center = [
        rng.gen_range(-1.5..1.5),
        rng.gen_range(-1.5..1.5),
        rng.gen_range(-1.5..1.5),
    ];
    let size = [
        rng.gen_range(0.2..2.0),
        rng.gen_range(0.2..2.0),
        rng.gen_range(0.2..2.0),
    ];
    Box3::new(center, size).expect("positive sizes")
}
