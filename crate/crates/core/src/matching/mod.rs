//! Inter-graph attention matching between two context graphs.
//!
//! Each round projects every part feature with that round's matrix `W_e`,
//! scores node pairs across the two graphs by the inner product of their
//! projected features, normalizes the scores with a softmax over the
//! opposing graph's real nodes, and feeds each node the attention-weighted
//! sum of projected opposing features. All parts of a node share its
//! attention weights. The node update is `h ← MLP([h; o])` per part, applied
//! to both graphs from the previous round's features.
//!
//! After the last round a self-attention readout pools the nodes of each
//! graph: `v_i = W_u h_i`, weights are a softmax of the first entry of `v_i`,
//! and the embedding is the weighted sum of the `v_i`. Group similarity is
//! the cosine of the two embeddings.
//!
//! Dummy nodes never enter any of these sums, so padding has no effect.

mod loss;
mod params;

pub use loss::{circle_loss, mean_gap_loss, CircleLoss, LossGrad};
pub use params::{MatchConfig, MatchParams, Mlp, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use thiserror::Error;

use crate::graph::ContextGraph;
use crate::linalg::{axpy, dot, norm, softmax, softmax_backward, Matrix};

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("graph layout (P = {graph_parts}, D_p = {graph_dim}) does not match parameters (P = {parts}, D_p = {dim})")]
    ConfigMismatch {
        graph_parts: usize,
        graph_dim: usize,
        parts: usize,
        dim: usize,
    },
    #[error("graph has no real nodes")]
    EmptyGraph,
    #[error("attention over an empty node set")]
    EmptyAttention,
    #[error("zero embedding has no direction")]
    ZeroEmbedding,
    #[error("non-finite value")]
    NonFinite,
    #[error("invalid parameters: {0}")]
    BadParams(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Pooled graph-level representation.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphEmbedding {
    pub vector: Vec<f64>,
}

/// Applies `proj` to every `proj.cols()`-sized part of `flat`.
fn project(proj: &Matrix, flat: &[f64]) -> Vec<f64> {
    flat.chunks_exact(proj.cols())
        .flat_map(|part| proj.matvec(part))
        .collect()
}

/// `e = ⟨W h_s, W h_r⟩`, summed over parts.
pub fn importance_weight(h_s: &[f64], h_r: &[f64], proj: &Matrix) -> Result<f64, MatchError> {
    if h_s.len() != h_r.len() {
        return Err(MatchError::DimensionMismatch {
            expected: h_s.len(),
            found: h_r.len(),
        });
    }
    if proj.rows() != proj.cols() || proj.cols() == 0 || h_s.len() % proj.cols() != 0 {
        return Err(MatchError::DimensionMismatch {
            expected: proj.cols(),
            found: h_s.len(),
        });
    }
    Ok(dot(&project(proj, h_s), &project(proj, h_r)))
}

/// Softmax over the importance weights of the opposing graph's real nodes.
pub fn attention_weights(e_row: &[f64]) -> Result<Vec<f64>, MatchError> {
    if e_row.is_empty() {
        return Err(MatchError::EmptyAttention);
    }
    if e_row.iter().any(|v| !v.is_finite()) {
        return Err(MatchError::NonFinite);
    }
    Ok(softmax(e_row))
}

/// Message for part `part` of one target node: `Σ_i a_i · W h_{i,part}` over
/// the real nodes of `source`.
pub fn aggregate_messages(
    source: &ContextGraph,
    part: usize,
    attn: &[f64],
    proj: &Matrix,
) -> Result<Vec<f64>, MatchError> {
    let real = source.real_nodes();
    if attn.len() != real.len() {
        return Err(MatchError::DimensionMismatch {
            expected: real.len(),
            found: attn.len(),
        });
    }
    if part >= source.part_count() || proj.cols() != source.part_dim() {
        return Err(MatchError::DimensionMismatch {
            expected: source.part_dim(),
            found: proj.cols(),
        });
    }
    let mut o = vec![0.0; proj.rows()];
    for (node, &a) in real.iter().zip(attn) {
        axpy(a, &proj.matvec(&node.part_features[part]), &mut o);
    }
    Ok(o)
}

/// `MLP([h; o])` for one part.
pub fn update_node(h_prev: &[f64], message: &[f64], mlp: &Mlp) -> Result<Vec<f64>, MatchError> {
    if h_prev.len() + message.len() != mlp.input_dim() || h_prev.len() != message.len() {
        return Err(MatchError::DimensionMismatch {
            expected: mlp.input_dim(),
            found: h_prev.len() + message.len(),
        });
    }
    Ok(mlp.forward(&[h_prev, message].concat()).1)
}

/// Cached intermediate values of one message-passing round.
#[derive(Debug, Clone)]
struct RoundCache {
    hs: Vec<Vec<f64>>,
    hr: Vec<Vec<f64>>,
    ps: Vec<Vec<f64>>,
    pr: Vec<Vec<f64>>,
    /// `att_s[i][j]`: weight of r-node `j` in the message to s-node `i`.
    att_s: Vec<Vec<f64>>,
    /// `att_r[j][i]`: weight of s-node `i` in the message to r-node `j`.
    att_r: Vec<Vec<f64>>,
    os: Vec<Vec<f64>>,
    or: Vec<Vec<f64>>,
    /// Hidden pre-activations, per node then per part.
    zs: Vec<Vec<Vec<f64>>>,
    zr: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
struct ReadoutCache {
    h: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    weights: Vec<f64>,
    embedding: Vec<f64>,
}

fn update_all(
    h: &[Vec<f64>],
    o: &[Vec<f64>],
    mlp: &Mlp,
    part_dim: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let mut out = Vec::with_capacity(h.len());
    let mut hidden = Vec::with_capacity(h.len());
    for (hi, oi) in h.iter().zip(o) {
        let mut node = Vec::with_capacity(hi.len());
        let mut zs = Vec::new();
        for (hq, oq) in hi.chunks_exact(part_dim).zip(oi.chunks_exact(part_dim)) {
            let (z, y) = mlp.forward(&[hq, oq].concat());
            node.extend(y);
            zs.push(z);
        }
        out.push(node);
        hidden.push(zs);
    }
    (out, hidden)
}

fn round_forward(
    hs: Vec<Vec<f64>>,
    hr: Vec<Vec<f64>>,
    proj: &Matrix,
    mlp: &Mlp,
) -> (RoundCache, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let part_dim = proj.cols();
    let ps: Vec<Vec<f64>> = hs.iter().map(|h| project(proj, h)).collect();
    let pr: Vec<Vec<f64>> = hr.iter().map(|h| project(proj, h)).collect();
    let e: Vec<Vec<f64>> = ps
        .iter()
        .map(|a| pr.iter().map(|b| dot(a, b)).collect())
        .collect();
    let att_s: Vec<Vec<f64>> = e.iter().map(|row| softmax(row)).collect();
    let att_r: Vec<Vec<f64>> = (0..pr.len())
        .map(|j| softmax(&e.iter().map(|row| row[j]).collect::<Vec<_>>()))
        .collect();
    let dim = hs[0].len();
    let weighted = |att: &[f64], src: &[Vec<f64>]| {
        let mut o = vec![0.0; dim];
        for (a, p) in att.iter().zip(src) {
            axpy(*a, p, &mut o);
        }
        o
    };
    let os: Vec<Vec<f64>> = att_s.iter().map(|a| weighted(a, &pr)).collect();
    let or: Vec<Vec<f64>> = att_r.iter().map(|a| weighted(a, &ps)).collect();
    let (new_s, zs) = update_all(&hs, &os, mlp, part_dim);
    let (new_r, zr) = update_all(&hr, &or, mlp, part_dim);
    let cache = RoundCache {
        hs,
        hr,
        ps,
        pr,
        att_s,
        att_r,
        os,
        or,
        zs,
        zr,
    };
    (cache, new_s, new_r)
}

fn readout_forward(h: Vec<Vec<f64>>, readout: &Matrix) -> ReadoutCache {
    let v: Vec<Vec<f64>> = h.iter().map(|hi| readout.matvec(hi)).collect();
    let logits: Vec<f64> = v.iter().map(|vi| vi[0]).collect();
    let weights = softmax(&logits);
    let mut embedding = vec![0.0; readout.rows()];
    for (w, vi) in weights.iter().zip(&v) {
        axpy(*w, vi, &mut embedding);
    }
    ReadoutCache {
        h,
        v,
        weights,
        embedding,
    }
}

fn real_features(g: &ContextGraph, params: &MatchParams) -> Result<Vec<Vec<f64>>, MatchError> {
    if g.part_count() != params.part_count || g.part_dim() != params.part_dim() {
        return Err(MatchError::ConfigMismatch {
            graph_parts: g.part_count(),
            graph_dim: g.part_dim(),
            parts: params.part_count,
            dim: params.part_dim(),
        });
    }
    let h: Vec<Vec<f64>> = g.real_nodes().iter().map(|n| n.flat_features()).collect();
    if h.is_empty() {
        return Err(MatchError::EmptyGraph);
    }
    Ok(h)
}

fn split_parts(h: &[f64], part_dim: usize) -> Vec<Vec<f64>> {
    h.chunks_exact(part_dim).map(<[f64]>::to_vec).collect()
}

fn run_rounds(
    mut hs: Vec<Vec<f64>>,
    mut hr: Vec<Vec<f64>>,
    params: &MatchParams,
) -> (Vec<RoundCache>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut caches = Vec::with_capacity(params.rounds());
    for proj in &params.projections {
        let (cache, s, r) = round_forward(hs, hr, proj, &params.mlp);
        caches.push(cache);
        hs = s;
        hr = r;
    }
    (caches, hs, hr)
}

/// Runs every message-passing round on the pair and returns both graphs with
/// updated real-node features.
pub fn propagate(
    gs: &ContextGraph,
    gr: &ContextGraph,
    params: &MatchParams,
) -> Result<(ContextGraph, ContextGraph), MatchError> {
    params.validate()?;
    let hs = real_features(gs, params)?;
    let hr = real_features(gr, params)?;
    let (_, hs, hr) = run_rounds(hs, hr, params);
    let dp = params.part_dim();
    let rebuild = |g: &ContextGraph, h: Vec<Vec<f64>>| {
        g.with_part_features(h.iter().map(|n| split_parts(n, dp)).collect())
    };
    Ok((rebuild(gs, hs), rebuild(gr, hr)))
}

/// Self-attention pooling of the real nodes of `graph`.
pub fn readout(graph: &ContextGraph, params: &MatchParams) -> Result<GraphEmbedding, MatchError> {
    let h = real_features(graph, params)?;
    Ok(GraphEmbedding {
        vector: readout_forward(h, &params.readout).embedding,
    })
}

/// Cosine similarity of two embeddings.
pub fn group_similarity(a: &GraphEmbedding, b: &GraphEmbedding) -> Result<f64, MatchError> {
    if a.vector.len() != b.vector.len() {
        return Err(MatchError::DimensionMismatch {
            expected: a.vector.len(),
            found: b.vector.len(),
        });
    }
    let (na, nb) = (norm(&a.vector), norm(&b.vector));
    if na == 0.0 || nb == 0.0 {
        return Err(MatchError::ZeroEmbedding);
    }
    if !(na.is_finite() && nb.is_finite()) {
        return Err(MatchError::NonFinite);
    }
    Ok((dot(&a.vector, &b.vector) / (na * nb)).clamp(-1.0, 1.0))
}

/// Forward pass of one graph pair with everything kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PairForward {
    rounds: Vec<RoundCache>,
    read_s: ReadoutCache,
    read_r: ReadoutCache,
    similarity: f64,
}

impl PairForward {
    pub fn new(
        gs: &ContextGraph,
        gr: &ContextGraph,
        params: &MatchParams,
    ) -> Result<Self, MatchError> {
        let hs = real_features(gs, params)?;
        let hr = real_features(gr, params)?;
        let (rounds, hs, hr) = run_rounds(hs, hr, params);
        let read_s = readout_forward(hs, &params.readout);
        let read_r = readout_forward(hr, &params.readout);
        let similarity = group_similarity(
            &GraphEmbedding {
                vector: read_s.embedding.clone(),
            },
            &GraphEmbedding {
                vector: read_r.embedding.clone(),
            },
        )?;
        Ok(Self {
            rounds,
            read_s,
            read_r,
            similarity,
        })
    }

    pub fn similarity(&self) -> f64 {
        self.similarity
    }

    pub fn embeddings(&self) -> (GraphEmbedding, GraphEmbedding) {
        (
            GraphEmbedding {
                vector: self.read_s.embedding.clone(),
            },
            GraphEmbedding {
                vector: self.read_r.embedding.clone(),
            },
        )
    }

    /// Accumulates `d_sim · ∂similarity/∂θ` into `grads` for every learned
    /// tensor θ.
    pub fn backward(&self, d_sim: f64, params: &MatchParams, grads: &mut MatchParams) {
        let (a, b) = (&self.read_s.embedding, &self.read_r.embedding);
        let (na, nb) = (norm(a), norm(b));
        // The forward clamp is inactive for well-conditioned inputs; use the
        // raw cosine for the derivative.
        let c = dot(a, b) / (na * nb);
        let grad_cos = |x: &[f64], y: &[f64], nx: f64| -> Vec<f64> {
            x.iter()
                .zip(y)
                .map(|(xi, yi)| d_sim * (yi / (na * nb) - c * xi / (nx * nx)))
                .collect()
        };
        let de_s = grad_cos(a, b, na);
        let de_r = grad_cos(b, a, nb);
        let mut dhs = readout_backward(&self.read_s, &de_s, &params.readout, &mut grads.readout);
        let mut dhr = readout_backward(&self.read_r, &de_r, &params.readout, &mut grads.readout);
        for (t, cache) in self.rounds.iter().enumerate().rev() {
            let (s, r) = round_backward(
                cache,
                &dhs,
                &dhr,
                &params.projections[t],
                &params.mlp,
                &mut grads.projections[t],
                &mut grads.mlp,
            );
            dhs = s;
            dhr = r;
        }
    }
}

fn readout_backward(
    cache: &ReadoutCache,
    d_embedding: &[f64],
    readout: &Matrix,
    d_readout: &mut Matrix,
) -> Vec<Vec<f64>> {
    let d_weights: Vec<f64> = cache.v.iter().map(|vi| dot(d_embedding, vi)).collect();
    let d_logits = softmax_backward(&cache.weights, &d_weights);
    cache
        .h
        .iter()
        .enumerate()
        .map(|(i, hi)| {
            let mut dv: Vec<f64> = d_embedding.iter().map(|d| d * cache.weights[i]).collect();
            dv[0] += d_logits[i];
            d_readout.add_outer(1.0, &dv, hi);
            readout.matvec_t(&dv)
        })
        .collect()
}

/// Backward through the node update for one graph. Returns the gradients
/// with respect to the round's input features and incoming messages.
fn update_backward(
    h: &[Vec<f64>],
    o: &[Vec<f64>],
    z: &[Vec<Vec<f64>>],
    d_out: &[Vec<f64>],
    mlp: &Mlp,
    d_mlp: &mut Mlp,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let dp = mlp.output_dim();
    let mut dh = Vec::with_capacity(h.len());
    let mut d_o = Vec::with_capacity(h.len());
    for i in 0..h.len() {
        let mut dhi = vec![0.0; h[i].len()];
        let mut doi = vec![0.0; h[i].len()];
        for q in 0..z[i].len() {
            let range = q * dp..(q + 1) * dp;
            let input = [&h[i][range.clone()], &o[i][range.clone()]].concat();
            let zq = &z[i][q];
            let hidden: Vec<f64> = zq.iter().map(|v| v.max(0.0)).collect();
            let dy = &d_out[i][range.clone()];
            d_mlp.w2.add_outer(1.0, dy, &hidden);
            axpy(1.0, dy, &mut d_mlp.b2);
            let mut dz = mlp.w2.matvec_t(dy);
            for (dzk, zk) in dz.iter_mut().zip(zq) {
                if *zk <= 0.0 {
                    *dzk = 0.0;
                }
            }
            d_mlp.w1.add_outer(1.0, &dz, &input);
            axpy(1.0, &dz, &mut d_mlp.b1);
            let dx = mlp.w1.matvec_t(&dz);
            axpy(1.0, &dx[..dp], &mut dhi[range.clone()]);
            axpy(1.0, &dx[dp..], &mut doi[range]);
        }
        dh.push(dhi);
        d_o.push(doi);
    }
    (dh, d_o)
}

fn round_backward(
    cache: &RoundCache,
    d_new_s: &[Vec<f64>],
    d_new_r: &[Vec<f64>],
    proj: &Matrix,
    mlp: &Mlp,
    d_proj: &mut Matrix,
    d_mlp: &mut Mlp,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (mut dhs, d_os) = update_backward(&cache.hs, &cache.os, &cache.zs, d_new_s, mlp, d_mlp);
    let (mut dhr, d_or) = update_backward(&cache.hr, &cache.or, &cache.zr, d_new_r, mlp, d_mlp);
    let (ns, nr) = (cache.ps.len(), cache.pr.len());
    let dim = cache.ps[0].len();
    let mut dps = vec![vec![0.0; dim]; ns];
    let mut dpr = vec![vec![0.0; dim]; nr];
    let mut de = vec![vec![0.0; nr]; ns];

    // Messages into s-nodes: os[i] = Σ_j att_s[i][j] pr[j].
    for i in 0..ns {
        let d_att: Vec<f64> = cache.pr.iter().map(|p| dot(&d_os[i], p)).collect();
        for (j, a) in cache.att_s[i].iter().enumerate() {
            axpy(*a, &d_os[i], &mut dpr[j]);
        }
        for (j, g) in softmax_backward(&cache.att_s[i], &d_att).into_iter().enumerate() {
            de[i][j] += g;
        }
    }
    // Messages into r-nodes: or[j] = Σ_i att_r[j][i] ps[i].
    for j in 0..nr {
        let d_att: Vec<f64> = cache.ps.iter().map(|p| dot(&d_or[j], p)).collect();
        for (i, a) in cache.att_r[j].iter().enumerate() {
            axpy(*a, &d_or[j], &mut dps[i]);
        }
        for (i, g) in softmax_backward(&cache.att_r[j], &d_att).into_iter().enumerate() {
            de[i][j] += g;
        }
    }
    // e[i][j] = ⟨ps[i], pr[j]⟩.
    for i in 0..ns {
        for j in 0..nr {
            let g = de[i][j];
            axpy(g, &cache.pr[j], &mut dps[i]);
            axpy(g, &cache.ps[i], &mut dpr[j]);
        }
    }
    // p = W h, per part.
    let dp = proj.cols();
    let mut project_back = |h: &[Vec<f64>], dp_all: &[Vec<f64>], dh: &mut [Vec<f64>]| {
        for (n, dpn) in dp_all.iter().enumerate() {
            for (q, (gq, hq)) in dpn.chunks_exact(dp).zip(h[n].chunks_exact(dp)).enumerate() {
                d_proj.add_outer(1.0, gq, hq);
                axpy(1.0, &proj.matvec_t(gq), &mut dh[n][q * dp..(q + 1) * dp]);
            }
        }
    };
    project_back(&cache.hs, &dps, &mut dhs);
    project_back(&cache.hr, &dpr, &mut dhr);
    (dhs, dhr)
}
