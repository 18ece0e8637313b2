//! Point sampling and Hough-style voting: farthest point sampling, fixed
//! radius neighborhoods, per-seed offset votes, and vote clustering.

use thiserror::Error;

use crate::tensor::{Mlp, Tape, Tensor, TensorError};

/// Default cap on the number of points gathered per ball query.
pub const DEFAULT_MAX_POINTS_PER_BALL: usize = 16;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("requested {requested} samples from {available} points")]
    TooFewPoints { requested: usize, available: usize },
    #[error("radius {0} must be positive and finite")]
    BadRadius(f64),
    #[error("max points per ball must be at least 1")]
    BadBallCapacity,
    #[error("point set carries no features")]
    MissingFeatures,
    #[error("vote offset head must emit 3 channels, emits {0}")]
    BadOffsetWidth(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which box primitive a vote targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Center,
    Face,
    Edge,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 3] = [
        PrimitiveKind::Center,
        PrimitiveKind::Face,
        PrimitiveKind::Edge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Center => "center",
            PrimitiveKind::Face => "face",
            PrimitiveKind::Edge => "edge",
        }
    }
}

/// Points with optional per-point feature rows.
#[derive(Debug, Clone)]
pub struct PointSet {
    pub positions: Vec<[f64; 3]>,
    pub features: Option<Tensor>,
}

impl PointSet {
    pub fn positions_only(positions: Vec<[f64; 3]>) -> Self {
        PointSet {
            positions,
            features: None,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Votes cast by seed points toward one primitive kind.
#[derive(Debug, Clone)]
pub struct VoteSet {
    /// Seed position each vote was cast from.
    pub origins: Vec<[f64; 3]>,
    /// Voted (offset) positions.
    pub votes: Vec<[f64; 3]>,
    /// Per-vote feature rows (`n × d`).
    pub features: Tensor,
    pub kind: PrimitiveKind,
}

impl VoteSet {
    pub fn len(&self) -> usize {
        self.votes.len()
    }
}

/// Groups of votes around sampled cluster centers.
///
/// `features` stays empty at clustering time; the context layer fills in
/// one feature row per cluster downstream.
#[derive(Debug, Clone)]
pub struct ClusterSet {
    /// Vote index chosen as each cluster's center.
    pub center_votes: Vec<usize>,
    /// Position of each cluster center.
    pub centers: Vec<[f64; 3]>,
    /// Member vote indices per cluster, nearest first.
    pub member_indices: Vec<Vec<usize>>,
    /// Per-cluster feature rows (`n_clusters × d`), when attached.
    pub features: Option<Tensor>,
}

impl ClusterSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }
}

/// The parameters of one voting head: an offset MLP ending in 3 channels
/// and an optional feature-transform branch.
#[derive(Debug, Clone)]
pub struct VoteHead {
    pub offset: Mlp,
    pub feature: Option<Mlp>,
}

pub fn squared_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest point sampling.
///
/// Starts from index 0 and repeatedly picks the unselected point with the
/// largest distance to the selected set (ties to the lowest index), so a
/// fixed input yields a fixed selection. Duplicated positions have
/// distance zero to their twin and are only picked once every distinct
/// position is exhausted.
pub fn farthest_point_sample(
    positions: &[[f64; 3]],
    k: usize,
) -> Result<Vec<usize>, SamplingError> {
    if k > positions.len() {
        return Err(SamplingError::TooFewPoints {
            requested: k,
            available: positions.len(),
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let n = positions.len();
    let mut selected = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut min_dist = vec![f64::INFINITY; n];
    let mut current = 0usize;
    selected.push(current);
    taken[current] = true;
    for _ in 1..k {
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = usize::MAX;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = squared_distance(positions[i], positions[current]);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if min_dist[i] > best {
                best = min_dist[i];
                best_idx = i;
            }
        }
        current = best_idx;
        selected.push(current);
        taken[current] = true;
    }
    Ok(selected)
}

/// Indices of points within `radius` of each center (distance inclusive),
/// sorted by ascending distance with ties by index, truncated to
/// `max_pts`.
pub fn ball_query(
    points: &[[f64; 3]],
    centers: &[[f64; 3]],
    radius: f64,
    max_pts: usize,
) -> Result<Vec<Vec<usize>>, SamplingError> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(SamplingError::BadRadius(radius));
    }
    if max_pts == 0 {
        return Err(SamplingError::BadBallCapacity);
    }
    let r2 = radius * radius;
    let mut out = Vec::with_capacity(centers.len());
    for &c in centers {
        let mut hits: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter_map(|(i, &p)| {
                let d2 = squared_distance(p, c);
                (d2 <= r2).then_some((d2, i))
            })
            .collect();
        hits.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distance").then(a.1.cmp(&b.1)));
        hits.truncate(max_pts);
        out.push(hits.into_iter().map(|(_, i)| i).collect());
    }
    Ok(out)
}

/// Casts one vote per seed: the offset head maps each seed's feature row
/// to a 3-vector added to the seed position. Features pass through
/// unchanged unless the head carries a feature branch.
pub fn generate_votes(
    seeds: &PointSet,
    head: &VoteHead,
    kind: PrimitiveKind,
) -> Result<VoteSet, SamplingError> {
    let features = seeds.features.as_ref().ok_or(SamplingError::MissingFeatures)?;
    if head.offset.out_dim() != 3 {
        return Err(SamplingError::BadOffsetWidth(head.offset.out_dim()));
    }
    let mut tape = Tape::new();
    let fid = tape.leaf(features);
    let offset_ids = tape.load_mlp(&head.offset);
    let offsets = tape.mlp_forward(fid, &offset_ids)?;
    let out_features = match &head.feature {
        Some(mlp) => {
            let ids = tape.load_mlp(mlp);
            let t = tape.mlp_forward(fid, &ids)?;
            tape.tensor(t)
        }
        None => features.clone(),
    };
    let off = tape.value(offsets);
    let votes: Vec<[f64; 3]> = seeds
        .positions
        .iter()
        .enumerate()
        .map(|(i, &p)| [p[0] + off[i * 3], p[1] + off[i * 3 + 1], p[2] + off[i * 3 + 2]])
        .collect();
    Ok(VoteSet {
        origins: seeds.positions.clone(),
        votes,
        features: out_features,
        kind,
    })
}

/// Cluster layout over bare positions: which points were chosen as
/// centers and which indices belong to each cluster.
#[derive(Debug, Clone)]
pub struct ClusterGeometry {
    pub center_votes: Vec<usize>,
    pub centers: Vec<[f64; 3]>,
    pub member_indices: Vec<Vec<usize>>,
}

/// Groups positions into `n_clusters` clusters: centers are picked by
/// farthest point sampling, members by ball query around each center.
/// Every cluster retains its own center even when coincident lower-index
/// points would crowd it out of the cap.
pub fn cluster_positions(
    positions: &[[f64; 3]],
    n_clusters: usize,
    radius: f64,
    max_votes: usize,
) -> Result<ClusterGeometry, SamplingError> {
    let center_votes = farthest_point_sample(positions, n_clusters)?;
    let centers: Vec<[f64; 3]> = center_votes.iter().map(|&i| positions[i]).collect();
    let mut member_indices = ball_query(positions, &centers, radius, max_votes)?;
    for (members, &center_idx) in member_indices.iter_mut().zip(&center_votes) {
        if !members.contains(&center_idx) {
            // Only possible when `max_votes` coincident votes with lower
            // indices tie at distance zero; make room for the center.
            members.pop();
            members.insert(0, center_idx);
        }
    }
    Ok(ClusterGeometry {
        center_votes,
        centers,
        member_indices,
    })
}

/// [`cluster_positions`] applied to a vote set.
pub fn cluster_votes(
    votes: &VoteSet,
    n_clusters: usize,
    radius: f64,
    max_votes: usize,
) -> Result<ClusterSet, SamplingError> {
    let geometry = cluster_positions(&votes.votes, n_clusters, radius, max_votes)?;
    Ok(ClusterSet {
        center_votes: geometry.center_votes,
        centers: geometry.centers,
        member_indices: geometry.member_indices,
        features: None,
    })
}
