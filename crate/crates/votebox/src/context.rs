//! Contextual feature refinement over primitives, clusters, and the whole
//! scene.
//!
//! Three modules share one attention core (scaled dot-product weights,
//! row softmax, layer normalization):
//!
//! - the primitive module transforms per-vote feature maps with full
//!   attention, including a learned value transform;
//! - the cluster module pools each cluster's votes into a single vector
//!   and mixes the cluster vectors with attention weights applied to the
//!   vectors themselves (no value transform, so attention over a single
//!   element is an exact identity before normalization);
//! - the scene module pools cluster and primitive features into one scene
//!   vector, maps it through an MLP, and adds it to every cluster row.
//!
//! Pooling is channel-wise max, which makes the cluster path invariant to
//! vote order and vote duplication by construction.

use thiserror::Error;

use crate::tensor::{
    LayerNormParams, LinearParams, LinearIds, Mlp, MlpIds, Tape, Tensor, TensorError, TensorId,
};

/// Attention parameter bundle: query/key/value transforms plus the layer
/// normalization applied to the attention output.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub theta: LinearParams,
    pub phi: LinearParams,
    pub g: LinearParams,
    pub ln: LayerNormParams,
}

/// Tape ids of a loaded [`AttentionParams`].
#[derive(Debug, Clone)]
pub struct AttentionIds {
    pub theta: LinearIds,
    pub phi: LinearIds,
    pub g: LinearIds,
    pub ln: crate::tensor::LayerNormIds,
}

/// Which rows the cluster module's self-attention runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterAttention {
    /// Attention across the pooled cluster vectors (default): pooling
    /// happens first, so duplicated or reordered votes cannot change any
    /// cluster's output.
    AcrossClusters,
    /// Attention among each cluster's own votes, normalized and pooled
    /// afterwards.
    WithinCluster,
}

/// Switches for the three context modules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextConfig {
    pub enable_gcm: bool,
    pub enable_pcm: bool,
    pub enable_hcm: bool,
    /// Attention score scale; `None` means `1 / sqrt(d')`.
    pub attention_scale: Option<f64>,
    pub cluster_attention: ClusterAttention,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            enable_gcm: true,
            enable_pcm: true,
            enable_hcm: true,
            attention_scale: None,
            cluster_attention: ClusterAttention::AcrossClusters,
        }
    }
}

impl ContextConfig {
    /// The scale applied to attention scores for feature width `d_prime`.
    pub fn resolved_scale(&self, d_prime: usize) -> f64 {
        self.attention_scale
            .unwrap_or_else(|| 1.0 / (d_prime as f64).sqrt())
    }

    pub fn validate(&self) -> Result<(), ContextError> {
        if let Some(s) = self.attention_scale {
            if !(s > 0.0) || !s.is_finite() {
                return Err(ContextError::BadScale(s));
            }
        }
        Ok(())
    }

    /// All eight on/off combinations, all-off first, in a fixed order.
    pub fn all_combinations() -> Vec<ContextConfig> {
        let mut out = Vec::with_capacity(8);
        for bits in 0..8u8 {
            out.push(ContextConfig {
                enable_gcm: bits & 0b100 != 0,
                enable_pcm: bits & 0b010 != 0,
                enable_hcm: bits & 0b001 != 0,
                ..ContextConfig::default()
            });
        }
        out
    }
}

/// Full parameter set of the context layer for one primitive kind.
#[derive(Debug, Clone)]
pub struct ContextParams {
    pub gcm: AttentionParams,
    pub pcm_mlp: Mlp,
    pub pcm_attn: AttentionParams,
    pub hcm_mlp: Mlp,
}

/// Tape ids of a loaded [`ContextParams`].
#[derive(Debug, Clone)]
pub struct ContextIds {
    pub gcm: AttentionIds,
    pub pcm_mlp: MlpIds,
    pub pcm_attn: AttentionIds,
    pub hcm_mlp: MlpIds,
}

/// Context-layer outputs for one primitive kind, recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ContextTapeOutput {
    /// Refined primitive (per-vote) features, `p × d`.
    pub primitive: TensorId,
    /// Refined cluster features, `n_clusters × d`.
    pub cluster: TensorId,
}

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("cluster {cluster} has no member votes")]
    EmptyCluster { cluster: usize },
    #[error("scene head emits width {got}, cluster features have width {expected}")]
    SceneWidth { expected: usize, got: usize },
    #[error("attention scale {0} must be positive and finite")]
    BadScale(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn load_attention(tape: &mut Tape, params: &AttentionParams) -> AttentionIds {
    AttentionIds {
        theta: tape.load_linear(&params.theta),
        phi: tape.load_linear(&params.phi),
        g: tape.load_linear(&params.g),
        ln: tape.load_layer_norm(&params.ln),
    }
}

pub fn load_context(tape: &mut Tape, params: &ContextParams) -> ContextIds {
    ContextIds {
        gcm: load_attention(tape, &params.gcm),
        pcm_mlp: tape.load_mlp(&params.pcm_mlp),
        pcm_attn: load_attention(tape, &params.pcm_attn),
        hcm_mlp: tape.load_mlp(&params.hcm_mlp),
    }
}

/// Shared attention core: `layer_norm(row_softmax(scale · θ(x) · φ(x)ᵀ) · v)`
/// where `v` is `g(x)` when `with_value` is set and `x` itself otherwise.
fn scaled_attention(
    tape: &mut Tape,
    x: TensorId,
    attn: &AttentionIds,
    scale: f64,
    with_value: bool,
) -> Result<TensorId, ContextError> {
    let q = tape.linear(x, &attn.theta)?;
    let k = tape.linear(x, &attn.phi)?;
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, scale);
    let weights = tape.row_softmax(scaled);
    let v = if with_value {
        tape.linear(x, &attn.g)?
    } else {
        x
    };
    let mixed = tape.matmul(weights, v)?;
    Ok(tape.layer_norm_with(mixed, &attn.ln)?)
}

/// Primitive context: attention over the vote feature rows of one kind,
/// with learned value transform and output normalization.
pub fn gcm_on_tape(
    tape: &mut Tape,
    features: TensorId,
    attn: &AttentionIds,
    scale: f64,
) -> Result<TensorId, ContextError> {
    scaled_attention(tape, features, attn, scale, true)
}

/// Pure wrapper over [`gcm_on_tape`].
pub fn gcm(
    features: &Tensor,
    params: &AttentionParams,
    scale: f64,
) -> Result<Tensor, ContextError> {
    let mut tape = Tape::new();
    let fid = tape.leaf(features);
    let ids = load_attention(&mut tape, params);
    let out = gcm_on_tape(&mut tape, fid, &ids, scale)?;
    Ok(tape.tensor(out))
}

/// Pools one feature row per cluster: channel-wise max over each
/// cluster's member rows.
pub fn pool_clusters_on_tape(
    tape: &mut Tape,
    rows: TensorId,
    members: &[Vec<usize>],
) -> Result<TensorId, ContextError> {
    let mut pooled = Vec::with_capacity(members.len());
    for (cluster, member) in members.iter().enumerate() {
        if member.is_empty() {
            return Err(ContextError::EmptyCluster { cluster });
        }
        let picked = tape.select_rows(rows, member)?;
        pooled.push(tape.max_pool_set(picked)?);
    }
    Ok(tape.concat_rows(&pooled)?)
}

/// Cluster context. Returns `(refined, pre_attention)` cluster feature
/// maps, both `n_clusters × d'`; `pre_attention` is the pooled
/// representation before any attention ran, which the scene module taps.
pub fn pcm_on_tape(
    tape: &mut Tape,
    vote_features: TensorId,
    members: &[Vec<usize>],
    mlp: &MlpIds,
    attn: &AttentionIds,
    scale: f64,
    variant: ClusterAttention,
) -> Result<(TensorId, TensorId), ContextError> {
    match variant {
        ClusterAttention::AcrossClusters => {
            let h = tape.mlp_forward(vote_features, mlp)?;
            let pooled = pool_clusters_on_tape(tape, h, members)?;
            let refined = scaled_attention(tape, pooled, attn, scale, false)?;
            Ok((refined, pooled))
        }
        ClusterAttention::WithinCluster => {
            let h = tape.mlp_forward(vote_features, mlp)?;
            let mut refined_rows = Vec::with_capacity(members.len());
            let mut pooled_rows = Vec::with_capacity(members.len());
            for (cluster, member) in members.iter().enumerate() {
                if member.is_empty() {
                    return Err(ContextError::EmptyCluster { cluster });
                }
                let rows = tape.select_rows(h, member)?;
                pooled_rows.push(tape.max_pool_set(rows)?);
                let normalized = scaled_attention(tape, rows, attn, scale, false)?;
                refined_rows.push(tape.max_pool_set(normalized)?);
            }
            let refined = tape.concat_rows(&refined_rows)?;
            let pooled = tape.concat_rows(&pooled_rows)?;
            Ok((refined, pooled))
        }
    }
}

/// Pure wrapper over [`pcm_on_tape`] with the default across-cluster
/// attention; returns `(refined, pre_attention)` cluster features.
pub fn pcm(
    vote_features: &Tensor,
    members: &[Vec<usize>],
    mlp: &Mlp,
    attn: &AttentionParams,
    scale: f64,
) -> Result<(Tensor, Tensor), ContextError> {
    let mut tape = Tape::new();
    let vid = tape.leaf(vote_features);
    let mlp_ids = tape.load_mlp(mlp);
    let attn_ids = load_attention(&mut tape, attn);
    let (refined, pooled) = pcm_on_tape(
        &mut tape,
        vid,
        members,
        &mlp_ids,
        &attn_ids,
        scale,
        ClusterAttention::AcrossClusters,
    )?;
    Ok((tape.tensor(refined), tape.tensor(pooled)))
}

/// Scene context: pools the pre-attention cluster features and the raw
/// primitive features into one scene descriptor, maps it through an MLP,
/// and adds the result onto every refined cluster row.
pub fn hcm_on_tape(
    tape: &mut Tape,
    primitive_features: TensorId,
    cluster_features: TensorId,
    pre_attention_clusters: TensorId,
    mlp: &MlpIds,
) -> Result<TensorId, ContextError> {
    let d_prime = tape.shape(cluster_features)[1];
    let k_vec = tape.max_pool_set(pre_attention_clusters)?;
    let g_vec = tape.max_pool_set(primitive_features)?;
    let scene = tape.concat_cols(&[k_vec, g_vec])?;
    let width = tape.value(scene).len();
    let scene_row = tape.reshape(scene, vec![1, width])?;
    let mapped = tape.mlp_forward(scene_row, mlp)?;
    let got = tape.shape(mapped)[1];
    if got != d_prime {
        return Err(ContextError::SceneWidth {
            expected: d_prime,
            got,
        });
    }
    let mapped_vec = tape.reshape(mapped, vec![d_prime])?;
    Ok(tape.add_row(cluster_features, mapped_vec)?)
}

/// Pure wrapper over [`hcm_on_tape`].
pub fn hcm(
    primitive_features: &Tensor,
    cluster_features: &Tensor,
    pre_attention_clusters: &Tensor,
    mlp: &Mlp,
) -> Result<Tensor, ContextError> {
    let mut tape = Tape::new();
    let pid = tape.leaf(primitive_features);
    let cid = tape.leaf(cluster_features);
    let kid = tape.leaf(pre_attention_clusters);
    let ids = tape.load_mlp(mlp);
    let out = hcm_on_tape(&mut tape, pid, cid, kid, &ids)?;
    Ok(tape.tensor(out))
}

/// Runs the enabled context modules for one primitive kind.
///
/// `primitive_in` holds the raw per-vote features, `cluster_in` the
/// baseline pooled cluster features. Disabled modules pass their slot
/// through untouched: without the primitive module the vote features
/// stay as they are, without the cluster module the baseline pooled
/// features stand in for the refined ones, and without the scene module
/// no scene vector is added.
pub fn apply_context_on_tape(
    tape: &mut Tape,
    primitive_in: TensorId,
    cluster_in: TensorId,
    members: &[Vec<usize>],
    ids: &ContextIds,
    cfg: &ContextConfig,
) -> Result<ContextTapeOutput, ContextError> {
    cfg.validate()?;
    let d_prime = tape.shape(cluster_in)[1];
    let scale = cfg.resolved_scale(d_prime);
    let primitive = if cfg.enable_gcm {
        gcm_on_tape(tape, primitive_in, &ids.gcm, scale)?
    } else {
        primitive_in
    };
    let (refined, pre_attention) = if cfg.enable_pcm {
        pcm_on_tape(
            tape,
            primitive_in,
            members,
            &ids.pcm_mlp,
            &ids.pcm_attn,
            scale,
            cfg.cluster_attention,
        )?
    } else {
        (cluster_in, cluster_in)
    };
    let cluster = if cfg.enable_hcm {
        hcm_on_tape(tape, primitive_in, refined, pre_attention, &ids.hcm_mlp)?
    } else {
        refined
    };
    Ok(ContextTapeOutput { primitive, cluster })
}

/// Pure wrapper over [`apply_context_on_tape`].
pub fn apply_context(
    primitive_in: &Tensor,
    cluster_in: &Tensor,
    members: &[Vec<usize>],
    params: &ContextParams,
    cfg: &ContextConfig,
) -> Result<(Tensor, Tensor), ContextError> {
    let mut tape = Tape::new();
    let pid = tape.leaf(primitive_in);
    let cid = tape.leaf(cluster_in);
    let ids = load_context(&mut tape, params);
    let out = apply_context_on_tape(&mut tape, pid, cid, members, &ids, cfg)?;
    Ok((tape.tensor(out.primitive), tape.tensor(out.cluster)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{layer_norm, matmul, LAYER_NORM_EPS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_linear(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> LinearParams {
        LinearParams::new(
            Tensor::new(
                vec![d_in, d_out],
                (0..d_in * d_out).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
            Tensor::vector((0..d_out).map(|_| rng.gen_range(-0.5..0.5)).collect()),
        )
        .unwrap()
    }

    fn random_attention(rng: &mut ChaCha8Rng, d: usize) -> AttentionParams {
        AttentionParams {
            theta: random_linear(rng, d, d),
            phi: random_linear(rng, d, d),
            g: random_linear(rng, d, d),
            ln: LayerNormParams {
                gain: Tensor::vector((0..d).map(|_| rng.gen_range(0.5..1.5)).collect()),
                bias: Tensor::vector((0..d).map(|_| rng.gen_range(-0.5..0.5)).collect()),
                eps: LAYER_NORM_EPS,
            },
        }
    }

    fn random_tensor(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::new(
            vec![n, d],
            (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    fn random_context(rng: &mut ChaCha8Rng, d: usize) -> ContextParams {
        ContextParams {
            gcm: random_attention(rng, d),
            pcm_mlp: Mlp::new(vec![random_linear(rng, d, d), random_linear(rng, d, d)]).unwrap(),
            pcm_attn: random_attention(rng, d),
            hcm_mlp: Mlp::new(vec![random_linear(rng, 2 * d, d)]).unwrap(),
        }
    }

    #[test]
    fn single_primitive_attention_reduces_to_normalized_value_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let d = 5;
        let params = random_attention(&mut rng, d);
        let f = random_tensor(&mut rng, 1, d);
        let out = gcm(&f, &params, 1.0 / (d as f64).sqrt()).unwrap();

        // With one row the softmax weight is exactly 1, so the output is
        // layer_norm(g(F)).
        let gf = matmul(&f, &params.g.weight).unwrap();
        let gf = Tensor::new(
            vec![1, d],
            gf.data()
                .iter()
                .zip(params.g.bias.data())
                .map(|(v, b)| v + b)
                .collect(),
        )
        .unwrap();
        let expect = layer_norm(&gf, &params.ln).unwrap();
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn identical_primitive_rows_get_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let d = 4;
        let params = random_attention(&mut rng, d);
        let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = Tensor::from_rows(&[row.clone(), row]);
        let out = gcm(&f, &params, 0.5).unwrap();
        assert_eq!(
            &out.data()[..d],
            &out.data()[d..],
            "identical inputs must map to identical rows"
        );
    }

    #[test]
    fn primitive_attention_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (n, d) = (6, 4);
        let params = random_attention(&mut rng, d);
        let f = random_tensor(&mut rng, n, d);
        let out = gcm(&f, &params, 1.0 / 2.0).unwrap();

        let perm = vec![3, 0, 5, 1, 4, 2];
        let permuted_rows: Vec<Vec<f64>> = perm
            .iter()
            .map(|&i| f.data()[i * d..(i + 1) * d].to_vec())
            .collect();
        let out_perm = gcm(&Tensor::from_rows(&permuted_rows), &params, 1.0 / 2.0).unwrap();
        for (new_row, &src) in perm.iter().enumerate() {
            for j in 0..d {
                let a = out_perm.at(new_row, j);
                let b = out.at(src, j);
                assert!((a - b).abs() <= 1e-12, "row {src}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn singleton_cluster_is_normalized_mlp_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let d = 4;
        let params = random_context(&mut rng, d);
        let votes = random_tensor(&mut rng, 1, d);
        let members = vec![vec![0usize]];
        let (refined, _) = pcm(
            &votes,
            &members,
            &params.pcm_mlp,
            &params.pcm_attn,
            0.5,
        )
        .unwrap();

        let h = crate::tensor::mlp_forward(&votes, &params.pcm_mlp).unwrap();
        let expect = layer_norm(&h, &params.pcm_attn.ln).unwrap();
        assert_eq!(refined.data(), expect.data(), "one-element attention must be exact");
    }

    #[test]
    fn duplicated_votes_leave_cluster_features_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let d = 4;
        let params = random_context(&mut rng, d);
        let votes = random_tensor(&mut rng, 6, d);
        let members = vec![vec![0, 1, 2], vec![3, 4, 5]];
        let (base, _) = pcm(&votes, &members, &params.pcm_mlp, &params.pcm_attn, 0.5).unwrap();

        // Duplicate vote 1 inside cluster 0 (twice, in different spots).
        let dup = vec![vec![0, 1, 1, 2, 1], vec![3, 4, 5]];
        let (dup_out, _) = pcm(&votes, &dup, &params.pcm_mlp, &params.pcm_attn, 0.5).unwrap();
        assert_eq!(base.data(), dup_out.data());
    }

    #[test]
    fn vote_order_inside_a_cluster_is_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let d = 4;
        let params = random_context(&mut rng, d);
        let votes = random_tensor(&mut rng, 5, d);
        let members = vec![vec![0, 1, 2, 3, 4]];
        let (a, _) = pcm(&votes, &members, &params.pcm_mlp, &params.pcm_attn, 0.5).unwrap();
        let shuffled = vec![vec![4, 2, 0, 3, 1]];
        let (b, _) = pcm(&votes, &shuffled, &params.pcm_mlp, &params.pcm_attn, 0.5).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn empty_cluster_is_a_state_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let d = 3;
        let params = random_context(&mut rng, d);
        let votes = random_tensor(&mut rng, 4, d);
        let members = vec![vec![0, 1], vec![]];
        match pcm(&votes, &members, &params.pcm_mlp, &params.pcm_attn, 0.5) {
            Err(ContextError::EmptyCluster { cluster: 1 }) => {}
            other => panic!("expected EmptyCluster, got {other:?}"),
        }
    }

    #[test]
    fn zero_scene_mlp_is_the_identity_on_cluster_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let d = 4;
        let primitive = random_tensor(&mut rng, 7, d);
        let clusters = random_tensor(&mut rng, 3, d);
        let pre = random_tensor(&mut rng, 3, d);
        let zero_mlp = Mlp::new(vec![LinearParams::new(
            Tensor::zeros(vec![2 * d, d]),
            Tensor::zeros(vec![d]),
        )
        .unwrap()])
        .unwrap();
        let out = hcm(&primitive, &clusters, &pre, &zero_mlp).unwrap();
        assert_eq!(out.data(), clusters.data());
    }

    #[test]
    fn scene_descriptor_taps_pre_attention_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let d = 4;
        let mlp = Mlp::new(vec![random_linear(&mut rng, 2 * d, d)]).unwrap();
        let primitive = random_tensor(&mut rng, 5, d);
        let clusters = random_tensor(&mut rng, 3, d);
        let pre_a = random_tensor(&mut rng, 3, d);
        let pre_b = random_tensor(&mut rng, 3, d);
        let out_a = hcm(&primitive, &clusters, &pre_a, &mlp).unwrap();
        let out_b = hcm(&primitive, &clusters, &pre_b, &mlp).unwrap();
        assert_ne!(
            out_a.data(),
            out_b.data(),
            "the scene vector must depend on the pre-attention tap"
        );
    }

    #[test]
    fn disabled_modules_pass_slots_through_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let d = 4;
        let params = random_context(&mut rng, d);
        let votes = random_tensor(&mut rng, 6, d);
        let clusters = random_tensor(&mut rng, 2, d);
        let members = vec![vec![0, 1, 2], vec![3, 4, 5]];

        let off = ContextConfig {
            enable_gcm: false,
            enable_pcm: false,
            enable_hcm: false,
            ..ContextConfig::default()
        };
        let (p, c) = apply_context(&votes, &clusters, &members, &params, &off).unwrap();
        assert_eq!(p.data(), votes.data());
        assert_eq!(c.data(), clusters.data());

        // Primitive module alone transforms only the primitive slot.
        let gcm_only = ContextConfig {
            enable_gcm: true,
            enable_pcm: false,
            enable_hcm: false,
            ..ContextConfig::default()
        };
        let (p, c) = apply_context(&votes, &clusters, &members, &params, &gcm_only).unwrap();
        assert_ne!(p.data(), votes.data());
        assert_eq!(c.data(), clusters.data());
    }

    #[test]
    fn all_modules_preserve_downstream_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let d = 4;
        let params = random_context(&mut rng, d);
        let votes = random_tensor(&mut rng, 6, d);
        let clusters = random_tensor(&mut rng, 2, d);
        let members = vec![vec![0, 2, 4], vec![1, 3, 5]];
        for cfg in ContextConfig::all_combinations() {
            let (p, c) = apply_context(&votes, &clusters, &members, &params, &cfg).unwrap();
            assert_eq!(p.shape(), votes.shape(), "{cfg:?}");
            assert_eq!(c.shape(), clusters.shape(), "{cfg:?}");
        }
    }

    #[test]
    fn within_cluster_variant_runs_and_differs() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let d = 4;
        let params = random_context(&mut rng, d);
        let votes = random_tensor(&mut rng, 6, d);
        let members = vec![vec![0, 1, 2], vec![3, 4, 5]];
        let mut tape = Tape::new();
        let vid = tape.leaf(&votes);
        let mlp_ids = tape.load_mlp(&params.pcm_mlp);
        let attn_ids = load_attention(&mut tape, &params.pcm_attn);
        let (within, _) = pcm_on_tape(
            &mut tape,
            vid,
            &members,
            &mlp_ids,
            &attn_ids,
            0.5,
            ClusterAttention::WithinCluster,
        )
        .unwrap();
        assert_eq!(tape.shape(within), &[2, d]);
        let (across, _) = pcm(&votes, &members, &params.pcm_mlp, &params.pcm_attn, 0.5).unwrap();
        assert_ne!(tape.value(within), across.data());
    }

    #[test]
    fn context_modules_pass_gradient_checks_at_small_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let d = 3;
        let params = random_context(&mut rng, d);
        let votes = random_tensor(&mut rng, 5, d);
        let members = vec![vec![0, 1, 4], vec![2, 3]];
        let w: Vec<f64> = (0..2 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let report = crate::tensor::grad_check("cluster-context", &votes, 1e-4, |tape, vid| {
            let mlp_ids = tape.load_mlp(&params.pcm_mlp);
            let attn_ids = load_attention(tape, &params.pcm_attn);
            let (refined, _) = pcm_on_tape(
                tape,
                vid,
                &members,
                &mlp_ids,
                &attn_ids,
                0.5,
                ClusterAttention::AcrossClusters,
            )
            .map_err(|e| match e {
                ContextError::Tensor(t) => t,
                other => TensorError::Invalid {
                    op: "pcm",
                    msg: other.to_string(),
                },
            })?;
            tape.weighted_sum(refined, &w)
        })
        .unwrap();
        assert!(report.passed, "{report}");
    }
}
