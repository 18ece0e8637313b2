//! The end-to-end detector: seed encoding, three-kind voting, contextual
//! refinement, proposal assembly, and a cascade of refinement stages with
//! rising overlap thresholds — plus the toy trainer that fits the whole
//! model on synthetic scenes.
//!
//! Every differentiable quantity of a forward pass lives on one [`Tape`],
//! so a single backward call yields gradients for all parameters. Host-side
//! bookkeeping (sampling indices, cluster membership, box decoding, target
//! assignment) is recomputed from tape values and treated as constant by
//! the gradient.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, EncoderConfig, PipelineConfig};
use crate::context::{
    apply_context_on_tape, load_context, pool_clusters_on_tape, AttentionIds, AttentionParams,
    ContextError, ContextIds, ContextParams,
};
use crate::geometry::{
    decode_residual, encode_residual, iou3d, nms, Box3, BoxResidual, Detection, GeometryError,
    MAX_LOG_SIZE_RATIO,
};
use crate::sampling::{
    ball_query, cluster_positions, farthest_point_sample, squared_distance, PrimitiveKind,
    SamplingError,
};
use crate::scenes::Scene;
use crate::tensor::{
    load_named, save_named, CheckpointError, LayerNormParams, LinearParams, Mlp, MlpIds, Tape,
    Tensor, TensorError, TensorId,
};

/// How far outside a box a seed point may sit and still train its votes
/// toward that box's primitives. Surface samples carry isotropic noise,
/// so strict containment would drop a fraction of them.
const SEED_OWNERSHIP_MARGIN: f64 = 0.06;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("scene has {available} points but seed sampling needs {needed}")]
    TooFewPoints { available: usize, needed: usize },
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("training needs at least one scene")]
    EmptyDataset,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Store(#[from] CheckpointError),
}

// ---- model parameters -------------------------------------------------

/// One voting head: an offset branch ending in 3 channels and a feature
/// transform that re-embeds seed features for this primitive kind.
#[derive(Debug, Clone)]
pub struct VoteHeadParams {
    pub offset: Mlp,
    pub feature: Mlp,
}

/// The three prediction heads of one cascade stage.
#[derive(Debug, Clone)]
pub struct StageParams {
    pub objectness: Mlp,
    pub class: Mlp,
    pub residual: Mlp,
}

/// Every parameter of the detector. The three vote heads and context
/// layers are indexed like [`PrimitiveKind::ALL`].
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub encoder: Mlp,
    pub votes: [VoteHeadParams; 3],
    pub context: [ContextParams; 3],
    pub size_head: Mlp,
    pub stages: Vec<StageParams>,
}

fn uniform_linear(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> LinearParams {
    let bound = (6.0 / (d_in + d_out) as f64).sqrt();
    let data: Vec<f64> = (0..d_in * d_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    LinearParams::new(
        Tensor::new(vec![d_in, d_out], data).expect("finite init"),
        Tensor::zeros(vec![d_out]),
    )
    .expect("weight and bias widths agree")
}

fn zero_linear(d_in: usize, d_out: usize) -> LinearParams {
    LinearParams::new(Tensor::zeros(vec![d_in, d_out]), Tensor::zeros(vec![d_out]))
        .expect("weight and bias widths agree")
}

fn attention_init(rng: &mut ChaCha8Rng, d: usize) -> AttentionParams {
    // Tie the two projections at init so the score matrix starts as a Gram
    // matrix. Its diagonal dominates once features decorrelate, which keeps
    // early attention self-focused instead of averaging every row into the
    // same soup; training is free to split theta and phi afterwards.
    let theta = uniform_linear(rng, d, d);
    AttentionParams {
        phi: theta.clone(),
        theta,
        g: uniform_linear(rng, d, d),
        ln: LayerNormParams::identity(d),
    }
}

fn vote_head_init(rng: &mut ChaCha8Rng, d: usize) -> VoteHeadParams {
    VoteHeadParams {
        // The offset branch ends in zeros so a fresh model votes exactly
        // at its seeds; training moves the votes from there.
        offset: Mlp::new(vec![uniform_linear(rng, d, d), zero_linear(d, 3)])
            .expect("offset head dims chain"),
        feature: Mlp::new(vec![uniform_linear(rng, d, d)]).expect("single layer always chains"),
    }
}

fn context_init(rng: &mut ChaCha8Rng, d: usize) -> ContextParams {
    ContextParams {
        gcm: attention_init(rng, d),
        pcm_mlp: Mlp::new(vec![uniform_linear(rng, d, d), uniform_linear(rng, d, d)])
            .expect("cluster mlp dims chain"),
        pcm_attn: attention_init(rng, d),
        hcm_mlp: Mlp::new(vec![uniform_linear(rng, 2 * d, d)]).expect("single layer"),
    }
}

/// Input width of the per-proposal heads: three kind slots plus the six
/// vote-offset extremes from [`geometry_slot`].
fn proposal_width(d: usize) -> usize {
    3 * d + 6
}

fn stage_init(rng: &mut ChaCha8Rng, d: usize, classes: usize) -> StageParams {
    let w = proposal_width(d);
    StageParams {
        objectness: Mlp::new(vec![uniform_linear(rng, w, d), uniform_linear(rng, d, 1)])
            .expect("objectness head dims chain"),
        class: Mlp::new(vec![
            uniform_linear(rng, w, d),
            uniform_linear(rng, d, classes),
        ])
        .expect("class head dims chain"),
        // Zero-initialized residuals make every fresh stage the identity:
        // boxes pass through the cascade unchanged until training says
        // otherwise.
        residual: Mlp::new(vec![uniform_linear(rng, w, d), zero_linear(d, 6)])
            .expect("residual head dims chain"),
    }
}

impl ModelParams {
    /// Fresh parameters for the given configuration. The draw order is
    /// fixed, so one seed always produces one model.
    pub fn init(cfg: &PipelineConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.encoder.feature_dim;
        let classes = cfg.num_classes();
        let encoder = Mlp::new(vec![uniform_linear(rng, 3, d), uniform_linear(rng, d, d)])
            .expect("encoder dims chain");
        let votes = [
            vote_head_init(rng, d),
            vote_head_init(rng, d),
            vote_head_init(rng, d),
        ];
        let context = [
            context_init(rng, d),
            context_init(rng, d),
            context_init(rng, d),
        ];
        let size_head = Mlp::new(vec![
            uniform_linear(rng, proposal_width(d), d),
            zero_linear(d, 3),
        ])
        .expect("size head dims chain");
        let stages = cfg
            .cascade
            .thresholds
            .iter()
            .map(|_| stage_init(rng, d, classes))
            .collect();
        ModelParams {
            encoder,
            votes,
            context,
            size_head,
            stages,
        }
    }

    /// Stable name → tensor listing used by checkpoints and the
    /// optimizer. [`LoadedModel::all_ids`] follows the same order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        push_mlp(&mut out, "encoder", &self.encoder);
        for (ki, kind) in PrimitiveKind::ALL.iter().enumerate() {
            let tag = kind.name();
            push_mlp(&mut out, &format!("vote.{tag}.offset"), &self.votes[ki].offset);
            push_mlp(
                &mut out,
                &format!("vote.{tag}.feature"),
                &self.votes[ki].feature,
            );
            let ctx = &self.context[ki];
            push_attention(&mut out, &format!("context.{tag}.gcm"), &ctx.gcm);
            push_mlp(&mut out, &format!("context.{tag}.pcm.mlp"), &ctx.pcm_mlp);
            push_attention(&mut out, &format!("context.{tag}.pcm"), &ctx.pcm_attn);
            push_mlp(&mut out, &format!("context.{tag}.hcm.mlp"), &ctx.hcm_mlp);
        }
        push_mlp(&mut out, "size", &self.size_head);
        for (t, stage) in self.stages.iter().enumerate() {
            push_mlp(&mut out, &format!("stage.{t}.objectness"), &stage.objectness);
            push_mlp(&mut out, &format!("stage.{t}.class"), &stage.class);
            push_mlp(&mut out, &format!("stage.{t}.residual"), &stage.residual);
        }
        out
    }

    /// Mutable counterpart of [`Self::named_tensors`], same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        push_mlp_mut(&mut out, "encoder", &mut self.encoder);
        for ((kind, vote), ctx) in PrimitiveKind::ALL
            .iter()
            .zip(self.votes.iter_mut())
            .zip(self.context.iter_mut())
        {
            let tag = kind.name();
            push_mlp_mut(&mut out, &format!("vote.{tag}.offset"), &mut vote.offset);
            push_mlp_mut(&mut out, &format!("vote.{tag}.feature"), &mut vote.feature);
            push_attention_mut(&mut out, &format!("context.{tag}.gcm"), &mut ctx.gcm);
            push_mlp_mut(&mut out, &format!("context.{tag}.pcm.mlp"), &mut ctx.pcm_mlp);
            push_attention_mut(&mut out, &format!("context.{tag}.pcm"), &mut ctx.pcm_attn);
            push_mlp_mut(&mut out, &format!("context.{tag}.hcm.mlp"), &mut ctx.hcm_mlp);
        }
        push_mlp_mut(&mut out, "size", &mut self.size_head);
        for (t, stage) in self.stages.iter_mut().enumerate() {
            push_mlp_mut(
                &mut out,
                &format!("stage.{t}.objectness"),
                &mut stage.objectness,
            );
            push_mlp_mut(&mut out, &format!("stage.{t}.class"), &mut stage.class);
            push_mlp_mut(&mut out, &format!("stage.{t}.residual"), &mut stage.residual);
        }
        out
    }

    /// Loads every parameter onto a tape as leaves, in
    /// [`Self::named_tensors`] order.
    pub fn load(&self, tape: &mut Tape) -> LoadedModel {
        LoadedModel {
            encoder: tape.load_mlp(&self.encoder),
            votes: self
                .votes
                .iter()
                .map(|v| LoadedVoteHead {
                    offset: tape.load_mlp(&v.offset),
                    feature: tape.load_mlp(&v.feature),
                })
                .collect(),
            context: self.context.iter().map(|c| load_context(tape, c)).collect(),
            size_head: tape.load_mlp(&self.size_head),
            stages: self
                .stages
                .iter()
                .map(|s| LoadedStage {
                    objectness: tape.load_mlp(&s.objectness),
                    class: tape.load_mlp(&s.class),
                    residual: tape.load_mlp(&s.residual),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        save_named(path, &self.named_tensors())?;
        Ok(())
    }

    /// Reads a checkpoint written by [`Self::save`]. The file must hold
    /// exactly the tensors the configuration calls for, with matching
    /// shapes; values round-trip bit for bit.
    pub fn load_checkpoint(path: &Path, cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, tensor) in load_named(path)? {
            if by_name.insert(name.clone(), tensor).is_some() {
                return Err(PipelineError::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ModelParams::init(cfg, &mut rng);
        for (name, slot) in params.named_tensors_mut() {
            let stored = by_name
                .remove(&name)
                .ok_or_else(|| PipelineError::Checkpoint(format!("missing tensor {name}")))?;
            if stored.shape() != slot.shape() {
                return Err(PipelineError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    stored.shape(),
                    slot.shape()
                )));
            }
            *slot = stored;
        }
        if let Some(name) = by_name.into_keys().next() {
            return Err(PipelineError::Checkpoint(format!("unexpected tensor {name}")));
        }
        Ok(params)
    }
}

fn push_mlp<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, mlp: &'a Mlp) {
    for (i, layer) in mlp.layers.iter().enumerate() {
        out.push((format!("{prefix}.{i}.weight"), &layer.weight));
        out.push((format!("{prefix}.{i}.bias"), &layer.bias));
    }
}

fn push_attention<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, attn: &'a AttentionParams) {
    for (slot, lin) in [("theta", &attn.theta), ("phi", &attn.phi), ("g", &attn.g)] {
        out.push((format!("{prefix}.{slot}.weight"), &lin.weight));
        out.push((format!("{prefix}.{slot}.bias"), &lin.bias));
    }
    out.push((format!("{prefix}.ln.gain"), &attn.ln.gain));
    out.push((format!("{prefix}.ln.bias"), &attn.ln.bias));
}

fn push_mlp_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, mlp: &'a mut Mlp) {
    for (i, layer) in mlp.layers.iter_mut().enumerate() {
        out.push((format!("{prefix}.{i}.weight"), &mut layer.weight));
        out.push((format!("{prefix}.{i}.bias"), &mut layer.bias));
    }
}

fn push_attention_mut<'a>(
    out: &mut Vec<(String, &'a mut Tensor)>,
    prefix: &str,
    attn: &'a mut AttentionParams,
) {
    for (slot, lin) in [
        ("theta", &mut attn.theta),
        ("phi", &mut attn.phi),
        ("g", &mut attn.g),
    ] {
        out.push((format!("{prefix}.{slot}.weight"), &mut lin.weight));
        out.push((format!("{prefix}.{slot}.bias"), &mut lin.bias));
    }
    out.push((format!("{prefix}.ln.gain"), &mut attn.ln.gain));
    out.push((format!("{prefix}.ln.bias"), &mut attn.ln.bias));
}

/// Tape ids of one loaded voting head.
#[derive(Debug, Clone)]
pub struct LoadedVoteHead {
    pub offset: MlpIds,
    pub feature: MlpIds,
}

/// Tape ids of one loaded cascade stage.
#[derive(Debug, Clone)]
pub struct LoadedStage {
    pub objectness: MlpIds,
    pub class: MlpIds,
    pub residual: MlpIds,
}

/// Tape ids of a fully loaded model.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub encoder: MlpIds,
    pub votes: Vec<LoadedVoteHead>,
    pub context: Vec<ContextIds>,
    pub size_head: MlpIds,
    pub stages: Vec<LoadedStage>,
}

impl LoadedModel {
    /// Every parameter id, aligned with [`ModelParams::named_tensors`].
    pub fn all_ids(&self) -> Vec<TensorId> {
        let mut out = Vec::new();
        push_mlp_ids(&mut out, &self.encoder);
        for (vote, ctx) in self.votes.iter().zip(&self.context) {
            push_mlp_ids(&mut out, &vote.offset);
            push_mlp_ids(&mut out, &vote.feature);
            push_attention_ids(&mut out, &ctx.gcm);
            push_mlp_ids(&mut out, &ctx.pcm_mlp);
            push_attention_ids(&mut out, &ctx.pcm_attn);
            push_mlp_ids(&mut out, &ctx.hcm_mlp);
        }
        push_mlp_ids(&mut out, &self.size_head);
        for stage in &self.stages {
            push_mlp_ids(&mut out, &stage.objectness);
            push_mlp_ids(&mut out, &stage.class);
            push_mlp_ids(&mut out, &stage.residual);
        }
        out
    }
}

fn push_mlp_ids(out: &mut Vec<TensorId>, mlp: &MlpIds) {
    for layer in &mlp.layers {
        out.push(layer.weight);
        out.push(layer.bias);
    }
}

fn push_attention_ids(out: &mut Vec<TensorId>, attn: &AttentionIds) {
    out.push(attn.theta.weight);
    out.push(attn.theta.bias);
    out.push(attn.phi.weight);
    out.push(attn.phi.bias);
    out.push(attn.g.weight);
    out.push(attn.g.bias);
    out.push(attn.ln.gain);
    out.push(attn.ln.bias);
}

// ---- forward pass ------------------------------------------------------

/// Per-kind voting and clustering artifacts recorded during a forward
/// pass.
#[derive(Debug, Clone)]
pub struct KindTrace {
    pub kind: PrimitiveKind,
    /// Vote positions on the tape, `seeds × 3`.
    pub votes: TensorId,
    /// Host copy of the vote positions.
    pub vote_positions: Vec<[f64; 3]>,
    /// Vote features straight off the voting head, `seeds × d`.
    pub raw_features: TensorId,
    /// Vote features after the primitive context module (identical to
    /// `raw_features` when that module is disabled).
    pub primitive_features: TensorId,
    /// Refined cluster features, `n_clusters × d`.
    pub cluster_features: TensorId,
    pub cluster_centers: Vec<[f64; 3]>,
    pub members: Vec<Vec<usize>>,
}

/// Everything one cascade stage saw and produced.
#[derive(Debug, Clone)]
pub struct StageTrace {
    pub input_boxes: Vec<Box3>,
    /// Stage input features, `n_clusters × 3d`.
    pub features: TensorId,
    /// Objectness logits, `n_clusters × 1`.
    pub objectness: TensorId,
    /// Class logits, `n_clusters × classes`.
    pub class_logits: TensorId,
    /// Box residual predictions, `n_clusters × 6`.
    pub residuals: TensorId,
    pub output_boxes: Vec<Box3>,
}

/// Full record of one scene's forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub seed_positions: Vec<[f64; 3]>,
    pub seed_features: TensorId,
    pub kinds: Vec<KindTrace>,
    /// Log-size predictions for the initial proposals, `n_clusters × 3`.
    pub size_logits: TensorId,
    pub proposal_centers: Vec<[f64; 3]>,
    pub stages: Vec<StageTrace>,
}

/// A forward pass together with the tape it was recorded on.
pub struct SceneForward {
    pub tape: Tape,
    pub trace: ForwardTrace,
}

fn flatten(points: &[[f64; 3]]) -> Vec<f64> {
    points.iter().flatten().copied().collect()
}

fn rows3(data: &[f64]) -> Vec<[f64; 3]> {
    data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Seed encoder: farthest point sampling picks the seeds, a shared MLP
/// embeds each seed's ball neighborhood in coordinates relative to the
/// seed — so the embedding cannot depend on where the scene sits in the
/// room — and a channelwise max pool collapses each neighborhood to one
/// feature row per seed.
pub fn encode_seeds_on_tape(
    tape: &mut Tape,
    encoder: &MlpIds,
    points: &[[f64; 3]],
    cfg: &EncoderConfig,
) -> Result<(Vec<[f64; 3]>, TensorId), PipelineError> {
    if points.len() < cfg.seeds {
        return Err(PipelineError::TooFewPoints {
            available: points.len(),
            needed: cfg.seeds,
        });
    }
    let seed_indices = farthest_point_sample(points, cfg.seeds)?;
    let seed_positions: Vec<[f64; 3]> = seed_indices.iter().map(|&i| points[i]).collect();
    let neighborhoods = ball_query(points, &seed_positions, cfg.radius, cfg.neighbors)?;
    let mut relative = Vec::new();
    let mut spans = Vec::with_capacity(neighborhoods.len());
    for (seed, ball) in seed_positions.iter().zip(&neighborhoods) {
        // A seed always finds at least itself at distance zero.
        let start = relative.len() / 3;
        for &p in ball {
            let q = points[p];
            relative.extend_from_slice(&[q[0] - seed[0], q[1] - seed[1], q[2] - seed[2]]);
        }
        spans.push((start, ball.len()));
    }
    let rel = tape.leaf_raw(vec![relative.len() / 3, 3], relative);
    let embedded = tape.mlp_forward(rel, encoder)?;
    let mut pooled = Vec::with_capacity(spans.len());
    for (start, len) in spans {
        let rows: Vec<usize> = (start..start + len).collect();
        let sel = tape.select_rows(embedded, &rows)?;
        pooled.push(tape.max_pool_set(sel)?);
    }
    let features = tape.concat_rows(&pooled)?;
    Ok((seed_positions, features))
}

/// Pure wrapper over [`encode_seeds_on_tape`] with its own scratch tape.
pub fn encode_seeds(
    points: &[[f64; 3]],
    encoder: &Mlp,
    cfg: &EncoderConfig,
) -> Result<(Vec<[f64; 3]>, Tensor), PipelineError> {
    let mut tape = Tape::new();
    let ids = tape.load_mlp(encoder);
    let (positions, features) = encode_seeds_on_tape(&mut tape, &ids, points, cfg)?;
    Ok((positions, tape.tensor(features)))
}

/// Where a stage's center-kind feature slot comes from.
enum CenterSource {
    /// Stage one reads the center-kind cluster features directly.
    Clusters,
    /// Later stages re-pool refined primitive features from the votes
    /// near each refined box center.
    Repool { radius: f64, cap: usize },
}

fn nearest_index(candidates: &[[f64; 3]], query: [f64; 3]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &c) in candidates.iter().enumerate() {
        let d = squared_distance(c, query);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// One cluster-feature row per query: the row of the nearest cluster of
/// this kind.
fn neighbor_rows(
    tape: &mut Tape,
    kind: &KindTrace,
    queries: &[[f64; 3]],
) -> Result<TensorId, PipelineError> {
    let indices: Vec<usize> = queries
        .iter()
        .map(|&q| nearest_index(&kind.cluster_centers, q))
        .collect();
    Ok(tape.select_rows(kind.cluster_features, &indices)?)
}

/// Componentwise extremes of the member votes around a query center:
/// per axis, max(vote - center) and max(center - vote). A well-placed
/// proposal sees roughly symmetric extremes; one sitting beside its vote
/// mass sees everything on one side, which is what lets the stage heads
/// mark a drifted box down instead of trusting its feature content.
fn geometry_slot(
    tape: &mut Tape,
    votes: TensorId,
    members: &[usize],
    query: [f64; 3],
) -> Result<TensorId, PipelineError> {
    let sel = tape.select_rows(votes, members)?;
    let neg = tape.leaf_raw(vec![1, 3], vec![-query[0], -query[1], -query[2]]);
    let off = tape.add_row(sel, neg)?;
    let mirrored = tape.scale(off, -1.0);
    let both = tape.concat_cols(&[off, mirrored])?;
    Ok(tape.max_pool_set(both)?)
}

/// Builds per-proposal features: the center-kind slot (cluster row or
/// re-pooled neighborhood), the nearest face- and edge-cluster rows, and
/// the vote-offset extremes around the query.
fn assemble_features(
    tape: &mut Tape,
    kinds: &[KindTrace],
    queries: &[[f64; 3]],
    source: CenterSource,
) -> Result<TensorId, PipelineError> {
    let center = &kinds[0];
    // One member list per query; a query that reaches no vote falls back
    // to the closest one so every proposal keeps a feature row.
    let members: Vec<Vec<usize>> = match source {
        CenterSource::Clusters => queries
            .iter()
            .zip(&center.members)
            .map(|(&q, m)| {
                if m.is_empty() {
                    vec![nearest_index(&center.vote_positions, q)]
                } else {
                    m.clone()
                }
            })
            .collect(),
        CenterSource::Repool { radius, cap } => {
            let balls = ball_query(&center.vote_positions, queries, radius, cap)?;
            queries
                .iter()
                .zip(balls)
                .map(|(&q, ball)| {
                    if ball.is_empty() {
                        vec![nearest_index(&center.vote_positions, q)]
                    } else {
                        ball
                    }
                })
                .collect()
        }
    };
    let center_slot = match source {
        CenterSource::Clusters => center.cluster_features,
        CenterSource::Repool { .. } => {
            let mut rows = Vec::with_capacity(queries.len());
            for m in &members {
                let sel = tape.select_rows(center.primitive_features, m)?;
                rows.push(tape.max_pool_set(sel)?);
            }
            tape.concat_rows(&rows)?
        }
    };
    let face = neighbor_rows(tape, &kinds[1], queries)?;
    let edge = neighbor_rows(tape, &kinds[2], queries)?;
    let mut geo_rows = Vec::with_capacity(queries.len());
    for (query, m) in queries.iter().zip(&members) {
        geo_rows.push(geometry_slot(tape, center.votes, m, *query)?);
    }
    let geometry = tape.concat_rows(&geo_rows)?;
    Ok(tape.concat_cols(&[center_slot, face, edge, geometry])?)
}

fn clamped_exp(logit: f64) -> f64 {
    logit.clamp(-MAX_LOG_SIZE_RATIO, MAX_LOG_SIZE_RATIO).exp()
}

/// Records a full forward pass on `tape` for an already-loaded model.
pub fn forward_with(
    tape: &mut Tape,
    model: &LoadedModel,
    points: &[[f64; 3]],
    cfg: &PipelineConfig,
) -> Result<ForwardTrace, PipelineError> {
    if model.stages.len() != cfg.cascade.stages() {
        return Err(PipelineError::Checkpoint(format!(
            "model has {} refinement stages but the config asks for {}",
            model.stages.len(),
            cfg.cascade.stages()
        )));
    }
    let (seed_positions, seed_features) =
        encode_seeds_on_tape(tape, &model.encoder, points, &cfg.encoder)?;
    let seed_leaf = tape.leaf_raw(vec![seed_positions.len(), 3], flatten(&seed_positions));

    let mut kinds = Vec::with_capacity(PrimitiveKind::ALL.len());
    for (ki, &kind) in PrimitiveKind::ALL.iter().enumerate() {
        let head = &model.votes[ki];
        let offsets = tape.mlp_forward(seed_features, &head.offset)?;
        let votes = tape.add(seed_leaf, offsets)?;
        let raw_features = tape.mlp_forward(seed_features, &head.feature)?;
        let vote_positions = rows3(tape.value(votes));
        let clusters = cluster_positions(
            &vote_positions,
            cfg.cluster.count,
            cfg.cluster.radius,
            cfg.cluster.neighbors,
        )?;
        let baseline = pool_clusters_on_tape(tape, raw_features, &clusters.member_indices)?;
        let refined = apply_context_on_tape(
            tape,
            raw_features,
            baseline,
            &clusters.member_indices,
            &model.context[ki],
            &cfg.context,
        )?;
        kinds.push(KindTrace {
            kind,
            votes,
            vote_positions,
            raw_features,
            primitive_features: refined.primitive,
            cluster_features: refined.cluster,
            cluster_centers: clusters.centers,
            members: clusters.member_indices,
        });
    }

    let proposal_centers = kinds[0].cluster_centers.clone();
    let mut features = assemble_features(tape, &kinds, &proposal_centers, CenterSource::Clusters)?;
    let size_logits = tape.mlp_forward(features, &model.size_head)?;
    let mut boxes = {
        let logits = tape.value(size_logits);
        proposal_centers
            .iter()
            .enumerate()
            .map(|(i, &center)| {
                let size = [
                    clamped_exp(logits[i * 3]),
                    clamped_exp(logits[i * 3 + 1]),
                    clamped_exp(logits[i * 3 + 2]),
                ];
                Box3::new(center, size)
            })
            .collect::<Result<Vec<_>, _>>()?
    };

    let mut stages = Vec::with_capacity(model.stages.len());
    for (t, stage) in model.stages.iter().enumerate() {
        let objectness = tape.mlp_forward(features, &stage.objectness)?;
        let class_logits = tape.mlp_forward(features, &stage.class)?;
        let residuals = tape.mlp_forward(features, &stage.residual)?;
        let output_boxes: Vec<Box3> = {
            let rv = tape.value(residuals);
            boxes
                .iter()
                .enumerate()
                .map(|(i, b)| decode_residual(&BoxResidual::from_slice(&rv[i * 6..(i + 1) * 6]), b))
                .collect()
        };
        stages.push(StageTrace {
            input_boxes: std::mem::replace(&mut boxes, output_boxes.clone()),
            features,
            objectness,
            class_logits,
            residuals,
            output_boxes,
        });
        if t + 1 < model.stages.len() {
            let centers: Vec<[f64; 3]> = boxes.iter().map(|b| b.center()).collect();
            features = assemble_features(
                tape,
                &kinds,
                &centers,
                CenterSource::Repool {
                    radius: cfg.cascade.repool_radius,
                    cap: cfg.cluster.neighbors,
                },
            )?;
        }
    }

    Ok(ForwardTrace {
        seed_positions,
        seed_features,
        kinds,
        size_logits,
        proposal_centers,
        stages,
    })
}

/// Runs a forward pass on a fresh tape.
pub fn forward_scene(
    points: &[[f64; 3]],
    params: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<SceneForward, PipelineError> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let model = params.load(&mut tape);
    let trace = forward_with(&mut tape, &model, points, cfg)?;
    Ok(SceneForward { tape, trace })
}

/// Reads one stage's proposals as detections: sigmoid objectness, argmax
/// class (ties to the lowest class id), refined boxes. No NMS.
pub fn read_stage_detections(
    tape: &Tape,
    stage: &StageTrace,
) -> Result<Vec<Detection>, PipelineError> {
    let obj = tape.value(stage.objectness);
    let cls = tape.value(stage.class_logits);
    let classes = tape.shape(stage.class_logits)[1];
    let mut out = Vec::with_capacity(stage.output_boxes.len());
    for (i, &bbox) in stage.output_boxes.iter().enumerate() {
        let row = &cls[i * classes..(i + 1) * classes];
        let mut best = 0;
        for (j, &z) in row.iter().enumerate().skip(1) {
            if z > row[best] {
                best = j;
            }
        }
        out.push(Detection::new(bbox, best, sigmoid(obj[i]))?);
    }
    Ok(out)
}

/// Full detector: forward pass, final-stage readout, per-class NMS.
pub fn detect_scene(
    points: &[[f64; 3]],
    params: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<Vec<Detection>, PipelineError> {
    let fwd = forward_scene(points, params, cfg)?;
    let last = fwd.trace.stages.last().expect("cascade has at least one stage");
    let detections = read_stage_detections(&fwd.tape, last)?;
    Ok(nms(&detections, cfg.nms_iou))
}

// ---- target assignment and losses ---------------------------------------

/// Per-proposal training targets at one cascade stage.
#[derive(Debug, Clone)]
pub struct StageTargets {
    pub positive: Vec<bool>,
    pub gt_index: Vec<Option<usize>>,
    /// Target class per proposal; only meaningful where positive.
    pub class: Vec<usize>,
    /// Residual that moves the proposal onto its matched box; zero where
    /// negative.
    pub residuals: Vec<BoxResidual>,
}

/// Matches each box to its highest-overlap ground-truth box (ties to the
/// lowest index) and marks it positive when that overlap reaches `u`.
/// Raising `u` can only shrink the positive set, never grow it.
pub fn assign_targets(boxes: &[Box3], gt: &[(Box3, usize)], u: f64) -> StageTargets {
    let mut targets = StageTargets {
        positive: vec![false; boxes.len()],
        gt_index: vec![None; boxes.len()],
        class: vec![0; boxes.len()],
        residuals: vec![BoxResidual::ZERO; boxes.len()],
    };
    for (i, b) in boxes.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (k, (gt_box, _)) in gt.iter().enumerate() {
            let overlap = iou3d(b, gt_box);
            if best.map_or(true, |(_, best_iou)| overlap > best_iou) {
                best = Some((k, overlap));
            }
        }
        if let Some((k, overlap)) = best {
            if overlap >= u {
                targets.positive[i] = true;
                targets.gt_index[i] = Some(k);
                targets.class[i] = gt[k].1;
                targets.residuals[i] = encode_residual(&gt[k].0, b);
            }
        }
    }
    targets
}

/// The box whose (margin-expanded) extent contains `p`, nearest center
/// first; `None` for clutter points on no box.
fn owning_box(gt: &[(Box3, usize)], p: [f64; 3]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, (b, _)) in gt.iter().enumerate() {
        let c = b.center();
        let s = b.size();
        let inside = (0..3).all(|a| (p[a] - c[a]).abs() <= s[a] / 2.0 + SEED_OWNERSHIP_MARGIN);
        if inside {
            let d = squared_distance(p, c);
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((k, d));
            }
        }
    }
    best.map(|(k, _)| k)
}

/// The primitive point of `b` (center, a face center, or an edge
/// midpoint) closest to `from`.
fn nearest_primitive(b: &Box3, kind: PrimitiveKind, from: [f64; 3]) -> [f64; 3] {
    match kind {
        PrimitiveKind::Center => b.center(),
        PrimitiveKind::Face => nearest_point(&b.face_centers(), from),
        PrimitiveKind::Edge => nearest_point(&b.edge_centers(), from),
    }
}

fn nearest_point(candidates: &[[f64; 3]], from: [f64; 3]) -> [f64; 3] {
    let mut best = candidates[0];
    let mut best_d = squared_distance(candidates[0], from);
    for &c in &candidates[1..] {
        let d = squared_distance(c, from);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Differentiable training loss for one scene's forward trace:
///
/// - vote regression per primitive kind — smooth-L1 from each vote to the
///   matching primitive point of the box its seed sits on; seeds on no
///   box carry zero weight, so clutter votes stay put and keep feeding
///   the cascade negative proposals;
/// - size regression — smooth-L1 from the initial log-size prediction to
///   the log-size of the ground-truth box nearest each proposal center;
/// - per stage — binary cross-entropy on objectness over every proposal,
///   cross-entropy on class and smooth-L1 on box residuals over that
///   stage's positives.
///
/// The parts are stacked and combined with the configured weights into
/// one scalar.
pub fn scene_loss(
    tape: &mut Tape,
    trace: &ForwardTrace,
    gt: &[(Box3, usize)],
    cfg: &PipelineConfig,
) -> Result<TensorId, PipelineError> {
    let mut parts = Vec::new();
    let mut weights = Vec::new();

    if !gt.is_empty() {
        let owners: Vec<Option<usize>> = trace
            .seed_positions
            .iter()
            .map(|&s| owning_box(gt, s))
            .collect();
        for kind_trace in &trace.kinds {
            let mut target = vec![0.0; trace.seed_positions.len() * 3];
            let mut row_weights = vec![0.0; trace.seed_positions.len()];
            for (i, owner) in owners.iter().enumerate() {
                let Some(k) = owner else { continue };
                let p = nearest_primitive(&gt[*k].0, kind_trace.kind, trace.seed_positions[i]);
                target[i * 3..(i + 1) * 3].copy_from_slice(&p);
                row_weights[i] = 1.0;
            }
            parts.push(tape.smooth_l1_loss(kind_trace.votes, &target, &row_weights)?);
            weights.push(cfg.train.vote_loss_weight);
        }

        // Size supervision only makes sense for proposals sitting on an
        // object; clutter proposals would all pull toward the dataset mean.
        let mut size_target = vec![0.0; trace.proposal_centers.len() * 3];
        let mut size_weights = vec![0.0; trace.proposal_centers.len()];
        for (i, &center) in trace.proposal_centers.iter().enumerate() {
            let Some(k) = owning_box(gt, center) else { continue };
            let s = gt[k].0.size();
            size_target[i * 3] = s[0].ln();
            size_target[i * 3 + 1] = s[1].ln();
            size_target[i * 3 + 2] = s[2].ln();
            size_weights[i] = 1.0;
        }
        parts.push(tape.smooth_l1_loss(trace.size_logits, &size_target, &size_weights)?);
        weights.push(cfg.train.size_loss_weight);
    }

    for (stage, &u) in trace.stages.iter().zip(&cfg.cascade.thresholds) {
        let targets = assign_targets(&stage.input_boxes, gt, u);
        let labels: Vec<f64> = targets
            .positive
            .iter()
            .map(|&p| if p { 1.0 } else { 0.0 })
            .collect();
        // Most proposals sit on clutter or empty space, so an unweighted
        // mean lets the negatives pin every logit low; upweighting the
        // positives pushes real detections toward confident scores.
        let bce_weights: Vec<f64> = targets
            .positive
            .iter()
            .map(|&p| {
                if p {
                    cfg.train.objectness_positive_weight
                } else {
                    1.0
                }
            })
            .collect();
        parts.push(tape.bce_with_logits_loss(stage.objectness, &labels, &bce_weights)?);
        weights.push(cfg.train.objectness_loss_weight);
        parts.push(tape.softmax_cross_entropy_loss(stage.class_logits, &targets.class, &labels)?);
        weights.push(cfg.train.class_loss_weight);
        let residual_target: Vec<f64> = targets
            .residuals
            .iter()
            .flat_map(|r| r.to_array())
            .collect();
        parts.push(tape.smooth_l1_loss(stage.residuals, &residual_target, &labels)?);
        weights.push(cfg.train.residual_loss_weight);
    }

    let stacked = tape.concat_cols(&parts)?;
    Ok(tape.weighted_sum(stacked, &weights)?)
}

// ---- training ------------------------------------------------------------

/// Training progress: mean scene loss per epoch.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Adam state over a flat list of parameter tensors.
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    fn new(sizes: &[usize]) -> Self {
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    /// One update. `grads` holds per-tensor gradient sums, rescaled by
    /// `grad_scale` (one over the batch size).
    fn apply(
        &mut self,
        params: Vec<(String, &mut Tensor)>,
        grads: &[Vec<f64>],
        grad_scale: f64,
        lr: f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (k, (_, tensor)) in params.into_iter().enumerate() {
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grads[k][i] * grad_scale;
                self.m[k][i] = ADAM_BETA1 * self.m[k][i] + (1.0 - ADAM_BETA1) * g;
                self.v[k][i] = ADAM_BETA2 * self.v[k][i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = self.m[k][i] / bc1;
                let v_hat = self.v[k][i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Fits a fresh model to the given scenes with Adam over shuffled
/// mini-batches. Deterministic for a fixed config and scene list; errors
/// out with the offending epoch as soon as the loss stops being finite.
pub fn train_toy(
    scenes: &[Scene],
    cfg: &PipelineConfig,
) -> Result<(ModelParams, TrainReport), PipelineError> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(cfg, &mut rng);
    let sizes: Vec<usize> = params
        .named_tensors()
        .iter()
        .map(|(_, t)| t.len())
        .collect();
    let mut adam = Adam::new(&sizes);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        let decays = cfg
            .train
            .lr_decay_epochs
            .iter()
            .filter(|&&at| epoch >= at)
            .count();
        let lr = cfg.train.learning_rate * cfg.train.lr_decay_factor.powi(decays as i32);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.train.batch_size) {
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            for &si in batch {
                let scene = &scenes[si];
                let mut tape = Tape::new();
                let model = params.load(&mut tape);
                let loss = match forward_with(&mut tape, &model, &scene.points, cfg)
                    .and_then(|trace| scene_loss(&mut tape, &trace, &scene.gt, cfg))
                {
                    Ok(loss) => loss,
                    // Geometry failures mid-training mean activations went
                    // non-finite before the loss could say so.
                    Err(PipelineError::Geometry(e)) => {
                        return Err(PipelineError::Diverged {
                            epoch,
                            detail: format!("scene {}: {e}", scene.id),
                        })
                    }
                    Err(e) => return Err(e),
                };
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    let detail = match tape.first_nonfinite() {
                        Some((node, op)) => format!(
                            "scene {}: first non-finite value at node {node} ({op})",
                            scene.id
                        ),
                        None => format!("scene {}: non-finite loss", scene.id),
                    };
                    return Err(PipelineError::Diverged { epoch, detail });
                }
                loss_sum += value;
                tape.backward(loss)?;
                for (acc, &id) in grads.iter_mut().zip(&model.all_ids()) {
                    for (a, g) in acc.iter_mut().zip(tape.grad(id)) {
                        *a += g;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            adam.apply(params.named_tensors_mut(), &grads, scale, lr);
        }
        let mean = loss_sum / scenes.len() as f64;
        if !mean.is_finite() {
            return Err(PipelineError::Diverged {
                epoch,
                detail: "non-finite epoch mean loss".into(),
            });
        }
        epoch_losses.push(mean);
    }
    Ok((params, TrainReport { epoch_losses }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::ContextConfig;
    use crate::scenes::synth_scene;
    use crate::tensor::grad_check;

    fn tiny_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::default().with_seed(11);
        cfg.synth.objects_min = 2;
        cfg.synth.objects_max = 3;
        cfg.synth.surface_density = 60.0;
        cfg.encoder.seeds = 24;
        cfg.encoder.neighbors = 8;
        cfg.encoder.feature_dim = 6;
        cfg.cluster.count = 4;
        cfg.cluster.neighbors = 8;
        cfg.cascade.thresholds = vec![0.5, 0.6];
        cfg.train.epochs = 1;
        cfg.train.batch_size = 2;
        cfg
    }

    fn tiny_scene(cfg: &PipelineConfig, index: usize) -> Scene {
        synth_scene(&cfg.synth, index).unwrap()
    }

    fn as_tensor_error(e: PipelineError) -> TensorError {
        TensorError::Invalid {
            op: "pipeline",
            msg: e.to_string(),
        }
    }

    #[test]
    fn loaded_ids_align_with_named_tensors() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ModelParams::init(&cfg, &mut rng);
        let mut tape = Tape::new();
        let model = params.load(&mut tape);
        let ids = model.all_ids();
        let named_names: Vec<String> = {
            let named = params.named_tensors();
            assert_eq!(named.len(), ids.len());
            for ((name, tensor), id) in named.iter().zip(&ids) {
                assert_eq!(tape.value(*id), tensor.data(), "mismatch at {name}");
            }
            named.into_iter().map(|(n, _)| n).collect()
        };
        let mut_names: Vec<String> = params
            .named_tensors_mut()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(mut_names, named_names);
    }

    #[test]
    fn seed_encoder_is_deterministic_and_translation_invariant() {
        let cfg = tiny_config();
        let scene = tiny_scene(&cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ModelParams::init(&cfg, &mut rng);
        let (pos, feats) = encode_seeds(&scene.points, &params.encoder, &cfg.encoder).unwrap();
        assert_eq!(feats.shape(), &[cfg.encoder.seeds, cfg.encoder.feature_dim]);
        let (pos2, feats2) = encode_seeds(&scene.points, &params.encoder, &cfg.encoder).unwrap();
        assert_eq!(pos, pos2);
        assert_eq!(feats.data(), feats2.data());

        let shift = [10.0, -4.0, 2.0];
        let moved: Vec<[f64; 3]> = scene
            .points
            .iter()
            .map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]])
            .collect();
        let (moved_pos, moved_feats) =
            encode_seeds(&moved, &params.encoder, &cfg.encoder).unwrap();
        for (a, b) in pos.iter().zip(&moved_pos) {
            for axis in 0..3 {
                assert!((a[axis] + shift[axis] - b[axis]).abs() < 1e-9);
            }
        }
        for (a, b) in feats.data().iter().zip(moved_feats.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn encoder_rejects_scenes_with_too_few_points() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ModelParams::init(&cfg, &mut rng);
        let pts = vec![[0.0, 0.0, 0.0]; 5];
        match encode_seeds(&pts, &params.encoder, &cfg.encoder) {
            Err(PipelineError::TooFewPoints { available, needed }) => {
                assert_eq!((available, needed), (5, cfg.encoder.seeds));
            }
            other => panic!("expected TooFewPoints, got {other:?}"),
        }
    }

    #[test]
    fn fresh_model_votes_on_seeds_and_passes_boxes_through() {
        let cfg = tiny_config();
        let scene = tiny_scene(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = ModelParams::init(&cfg, &mut rng);
        let fwd = forward_scene(&scene.points, &params, &cfg).unwrap();
        for kt in &fwd.trace.kinds {
            assert_eq!(kt.vote_positions, fwd.trace.seed_positions);
        }
        let first = &fwd.trace.stages[0];
        assert_eq!(first.input_boxes.len(), cfg.cluster.count);
        for b in &first.input_boxes {
            assert_eq!(b.size(), [1.0, 1.0, 1.0]);
        }
        for stage in &fwd.trace.stages {
            assert_eq!(stage.input_boxes, stage.output_boxes);
        }
        assert_eq!(
            fwd.trace.stages.last().unwrap().output_boxes,
            first.input_boxes
        );
    }

    #[test]
    fn forward_and_detection_are_deterministic() {
        let cfg = tiny_config();
        let scene = tiny_scene(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = ModelParams::init(&cfg, &mut rng);
        let a = detect_scene(&scene.points, &params, &cfg).unwrap();
        let b = detect_scene(&scene.points, &params, &cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.bbox, y.bbox);
            assert_eq!(x.class_id, y.class_id);
            assert_eq!(x.objectness.to_bits(), y.objectness.to_bits());
        }
        assert!(!a.is_empty());
        assert!(a.len() <= cfg.cluster.count);
    }

    #[test]
    fn proposal_features_concatenate_kind_slots() {
        let mut cfg = tiny_config();
        cfg.context = ContextConfig {
            enable_gcm: false,
            enable_pcm: false,
            enable_hcm: false,
            ..cfg.context
        };
        let scene = tiny_scene(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut params = ModelParams::init(&cfg, &mut rng);
        // Zero the face and edge feature branches so their cluster rows
        // vanish and the concatenation layout becomes visible.
        for ki in 1..3 {
            for layer in &mut params.votes[ki].feature.layers {
                *layer = LinearParams::new(
                    Tensor::zeros(layer.weight.shape().to_vec()),
                    Tensor::zeros(layer.bias.shape().to_vec()),
                )
                .unwrap();
            }
        }
        let fwd = forward_scene(&scene.points, &params, &cfg).unwrap();
        let d = cfg.encoder.feature_dim;
        let x = fwd.tape.value(fwd.trace.stages[0].features);
        let center = fwd.tape.value(fwd.trace.kinds[0].cluster_features);
        for i in 0..cfg.cluster.count {
            for j in 0..d {
                assert_eq!(x[i * 3 * d + j], center[i * d + j]);
            }
            for j in d..3 * d {
                assert_eq!(x[i * 3 * d + j], 0.0);
            }
        }
    }

    #[test]
    fn target_assignment_follows_overlap_thresholds() {
        let gt = vec![
            (Box3::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]).unwrap(), 2),
            (Box3::new([5.0, 0.0, 0.0], [1.0, 1.0, 1.0]).unwrap(), 0),
        ];
        let exact = assign_targets(&[gt[0].0], &gt, 0.999);
        assert!(exact.positive[0]);
        assert_eq!(exact.gt_index[0], Some(0));
        assert_eq!(exact.class[0], 2);
        assert_eq!(exact.residuals[0], BoxResidual::ZERO);

        // Unit cubes offset by 6/19 along one axis overlap at exactly
        // (1 - d) / (1 + d) = 13/25.
        let offset = Box3::new([6.0 / 19.0, 0.0, 0.0], [1.0, 1.0, 1.0]).unwrap();
        assert!((iou3d(&offset, &gt[0].0) - 0.52).abs() < 1e-12);
        for (u, expect) in [(0.5, true), (0.55, false), (0.6, false)] {
            let t = assign_targets(&[offset], &gt, u);
            assert_eq!(t.positive[0], expect, "threshold {u}");
        }

        let none = assign_targets(&[offset], &[], 0.5);
        assert!(!none.positive[0]);
        assert_eq!(none.gt_index[0], None);
    }

    fn random_box(rng: &mut ChaCha8Rng) -> Box3 {
        Box3::new(
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ],
            [
                rng.gen_range(0.3..1.5),
                rng.gen_range(0.3..1.5),
                rng.gen_range(0.3..1.5),
            ],
        )
        .unwrap()
    }

    #[test]
    fn raising_the_overlap_threshold_never_adds_positives() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let gt: Vec<(Box3, usize)> = (0..3).map(|k| (random_box(&mut rng), k % 2)).collect();
            let boxes: Vec<Box3> = (0..8).map(|_| random_box(&mut rng)).collect();
            let lo = assign_targets(&boxes, &gt, 0.3);
            let hi = assign_targets(&boxes, &gt, 0.45);
            for i in 0..boxes.len() {
                if hi.positive[i] {
                    assert!(lo.positive[i]);
                    assert_eq!(lo.gt_index[i], hi.gt_index[i]);
                }
            }
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let mut cfg = tiny_config();
        cfg.train.learning_rate = 0.0;
        let scenes: Vec<Scene> = (0..2).map(|i| tiny_scene(&cfg, i)).collect();
        let (trained, report) = train_toy(&scenes, &cfg).unwrap();
        assert_eq!(report.epoch_losses.len(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let fresh = ModelParams::init(&cfg, &mut rng);
        for ((name, a), (_, b)) in trained.named_tensors().iter().zip(fresh.named_tensors()) {
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{name} changed");
        }
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let mut cfg = tiny_config();
        cfg.train.epochs = 2;
        cfg.train.learning_rate = 1e-3;
        let scenes: Vec<Scene> = (0..3).map(|i| tiny_scene(&cfg, i)).collect();
        let (a, ra) = train_toy(&scenes, &cfg).unwrap();
        let (b, rb) = train_toy(&scenes, &cfg).unwrap();
        assert_eq!(ra.epoch_losses, rb.epoch_losses);
        for ((name, ta), (_, tb)) in a.named_tensors().iter().zip(b.named_tensors()) {
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{name} differs between runs");
        }
        assert!(ra.epoch_losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn checkpoints_round_trip_bitwise_and_reject_mismatches() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let params = ModelParams::init(&cfg, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        params.save(&path).unwrap();
        let loaded = ModelParams::load_checkpoint(&path, &cfg).unwrap();
        for ((name, a), (_, b)) in params.named_tensors().iter().zip(loaded.named_tensors()) {
            assert_eq!(a.shape(), b.shape(), "{name}");
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{name}");
        }
        let mut bigger = cfg.clone();
        bigger.cascade.thresholds = vec![0.5, 0.55, 0.6];
        match ModelParams::load_checkpoint(&path, &bigger) {
            Err(PipelineError::Checkpoint(msg)) => assert!(msg.contains("stage.2"), "{msg}"),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn every_context_combination_runs_the_full_cascade() {
        let base = tiny_config();
        let scene = tiny_scene(&base, 4);
        for (i, ctx) in ContextConfig::all_combinations().into_iter().enumerate() {
            let mut cfg = base.clone();
            cfg.context = ctx;
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let params = ModelParams::init(&cfg, &mut rng);
            let fwd = forward_scene(&scene.points, &params, &cfg).unwrap();
            assert_eq!(fwd.trace.stages.len(), cfg.cascade.stages());
            for stage in &fwd.trace.stages {
                assert_eq!(
                    fwd.tape.shape(stage.features),
                    &[cfg.cluster.count, 3 * cfg.encoder.feature_dim]
                );
                assert_eq!(stage.output_boxes.len(), cfg.cluster.count);
            }
            let dets = detect_scene(&scene.points, &params, &cfg).unwrap();
            assert!(dets.len() <= cfg.cluster.count, "combo {i}");
        }
    }

    #[test]
    fn stage_count_must_match_the_configured_cascade() {
        let cfg = tiny_config();
        let mut single = cfg.clone();
        single.cascade.thresholds = vec![0.5];
        let scene = tiny_scene(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ModelParams::init(&single, &mut rng);
        match forward_scene(&scene.points, &params, &cfg) {
            Err(PipelineError::Checkpoint(msg)) => assert!(msg.contains("stages")),
            other => panic!("expected stage mismatch, got {:?}", other.map(|f| f.trace.stages.len())),
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = tiny_config();
        let scene = tiny_scene(&cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let params = ModelParams::init(&cfg, &mut rng);

        // A head-side parameter: the last objectness layer of stage 0.
        let probe = params.stages[0].objectness.layers.last().unwrap().weight.clone();
        grad_check("stage objectness weight", &probe, 1e-3, |tape, id| {
            let mut model = params.load(tape);
            model.stages[0].objectness.layers.last_mut().unwrap().weight = id;
            let trace = forward_with(tape, &model, &scene.points, &cfg).map_err(as_tensor_error)?;
            scene_loss(tape, &trace, &scene.gt, &cfg).map_err(as_tensor_error)
        })
        .unwrap();

        // An upstream parameter that moves every center vote at once: the
        // final bias of the center offset head. A uniform shift keeps all
        // sampling decisions fixed, so finite differences stay valid.
        let probe = params.votes[0].offset.layers.last().unwrap().bias.clone();
        grad_check("center vote offset bias", &probe, 1e-3, |tape, id| {
            let mut model = params.load(tape);
            model.votes[0].offset.layers.last_mut().unwrap().bias = id;
            let trace = forward_with(tape, &model, &scene.points, &cfg).map_err(as_tensor_error)?;
            scene_loss(tape, &trace, &scene.gt, &cfg).map_err(as_tensor_error)
        })
        .unwrap();
    }
}
