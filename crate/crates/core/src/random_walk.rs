//! Affinity scoring, the row-softmax walk matrix, walk iteration, and
//! selection of the probe subgraph with the highest average affinity to a
//! gallery group.
//!
//! The walk matrix is built from raw pairwise affinities `S` by a softmax over
//! each row with the diagonal excluded:
//!
//! ```text
//! W(i, j) = exp(S(i, j)) / Σ_{k≠i} exp(S(i, k)),   W(i, i) = 0
//! ```
//!
//! and one walk step is `y ← W y`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::PersonDescriptor;
use crate::graph::{candidate_sets, ContextGraph};
use crate::linalg::{dot, Matrix};

#[derive(Debug, Error, PartialEq)]
pub enum WalkError {
    #[error("walk needs at least 2 nodes, got {0}")]
    TooSmall(usize),
    #[error("affinity matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("non-finite affinity value")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid walk matrix: {0}")]
    InvalidWalk(String),
    #[error("candidate has no real nodes")]
    EmptyCandidate,
    #[error("no candidates to select from")]
    NoCandidates,
    #[error("bilinear scorer matrix must be {dim}x{dim}")]
    ScorerShape { dim: usize },
}

/// Serialized form of the affinity scorer, as it appears in run configs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScorerConfig {
    #[default]
    Cosine,
    Bilinear {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        matrix: Option<Vec<Vec<f64>>>,
    },
}

/// Pairwise affinity between two person descriptors, in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum AffinityScorer {
    /// `(⟨a, b⟩ + 1) / 2` on unit features.
    #[default]
    Cosine,
    /// `σ(aᵀ M b)` with `M` symmetrized on construction.
    Bilinear(Matrix),
}

impl AffinityScorer {
    pub fn bilinear(matrix: &Matrix) -> Result<Self, WalkError> {
        if matrix.rows() != matrix.cols() {
            return Err(WalkError::ScorerShape { dim: matrix.rows() });
        }
        if !matrix.is_finite() {
            return Err(WalkError::NonFinite);
        }
        let mut sym = matrix.clone();
        sym.add_scaled(1.0, &matrix.transpose());
        sym.scale(0.5);
        Ok(Self::Bilinear(sym))
    }

    /// Resolves a config for features of dimension `dim`. A bilinear scorer
    /// without a matrix uses the identity.
    pub fn from_config(config: &ScorerConfig, dim: usize) -> Result<Self, WalkError> {
        match config {
            ScorerConfig::Cosine => Ok(Self::Cosine),
            ScorerConfig::Bilinear { matrix: None } => Ok(Self::Bilinear(Matrix::identity(dim))),
            ScorerConfig::Bilinear { matrix: Some(rows) } => {
                let m = Matrix::from_rows(rows).ok_or(WalkError::ScorerShape { dim })?;
                if m.rows() != dim || m.cols() != dim {
                    return Err(WalkError::ScorerShape { dim });
                }
                Self::bilinear(&m)
            }
        }
    }

    pub fn score(&self, a: &[f64], b: &[f64]) -> Result<f64, WalkError> {
        if a.len() != b.len() {
            return Err(WalkError::DimensionMismatch {
                expected: a.len(),
                found: b.len(),
            });
        }
        match self {
            Self::Cosine => Ok(((dot(a, b) + 1.0) / 2.0).clamp(0.0, 1.0)),
            Self::Bilinear(m) => {
                if m.cols() != a.len() {
                    return Err(WalkError::DimensionMismatch {
                        expected: m.cols(),
                        found: a.len(),
                    });
                }
                let x = dot(a, &m.matvec(b));
                Ok(1.0 / (1.0 + (-x).exp()))
            }
        }
    }
}

pub fn score_affinity(
    a: &PersonDescriptor,
    b: &PersonDescriptor,
    scorer: &AffinityScorer,
) -> Result<f64, WalkError> {
    scorer.score(a.feature(), b.feature())
}

/// Raw affinities `S` and the walk matrix `W` derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    raw: Matrix,
    normalized: Matrix,
}

impl AffinityMatrix {
    /// Same as [`normalize_affinities`].
    pub fn from_raw(raw: &Matrix) -> Result<Self, WalkError> {
        normalize_affinities(raw)
    }

    /// Wraps an externally built walk matrix after checking its invariants:
    /// zero diagonal, entries in `[0, 1]`, rows summing to one.
    pub fn from_walk(raw: Matrix, normalized: Matrix) -> Result<Self, WalkError> {
        let n = normalized.rows();
        if normalized.cols() != n {
            return Err(WalkError::NotSquare {
                rows: n,
                cols: normalized.cols(),
            });
        }
        if raw.rows() != n || raw.cols() != n {
            return Err(WalkError::DimensionMismatch {
                expected: n,
                found: raw.rows(),
            });
        }
        for i in 0..n {
            let row = normalized.row(i);
            if row[i] != 0.0 {
                return Err(WalkError::InvalidWalk(format!("W({i},{i}) is not zero")));
            }
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(WalkError::InvalidWalk(format!("row {i} has entries outside [0, 1]")));
            }
            if n > 1 && (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(WalkError::InvalidWalk(format!("row {i} does not sum to 1")));
            }
        }
        Ok(Self { raw, normalized })
    }

    pub fn len(&self) -> usize {
        self.normalized.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn raw(&self) -> &Matrix {
        &self.raw
    }

    pub fn normalized(&self) -> &Matrix {
        &self.normalized
    }
}

/// Row softmax over off-diagonal entries with a zeroed diagonal. Each row is
/// shifted by its off-diagonal maximum before exponentiation.
pub fn normalize_affinities(raw: &Matrix) -> Result<AffinityMatrix, WalkError> {
    let n = raw.rows();
    if raw.cols() != n {
        return Err(WalkError::NotSquare {
            rows: n,
            cols: raw.cols(),
        });
    }
    if n < 2 {
        return Err(WalkError::TooSmall(n));
    }
    if !raw.is_finite() {
        return Err(WalkError::NonFinite);
    }
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        let s = raw.row(i);
        let max = (0..n)
            .filter(|&j| j != i)
            .map(|j| s[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let row = w.row_mut(i);
        let mut total = 0.0;
        for j in (0..n).filter(|&j| j != i) {
            row[j] = (s[j] - max).exp();
            total += row[j];
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(AffinityMatrix {
        raw: raw.clone(),
        normalized: w,
    })
}

/// Walk scores `y^(t)` over the nodes of a walk matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkState {
    pub scores: Vec<f64>,
    pub iteration: usize,
}

impl WalkState {
    pub fn new(scores: Vec<f64>) -> Self {
        Self {
            scores,
            iteration: 0,
        }
    }
}

/// `y^(t+1) = W y^(t)`.
pub fn walk_step(walk: &AffinityMatrix, state: &WalkState) -> Result<WalkState, WalkError> {
    if state.scores.len() != walk.len() {
        return Err(WalkError::DimensionMismatch {
            expected: walk.len(),
            found: state.scores.len(),
        });
    }
    Ok(WalkState {
        scores: walk.normalized.matvec(&state.scores),
        iteration: state.iteration + 1,
    })
}

pub fn iterate_walk(
    walk: &AffinityMatrix,
    initial: &WalkState,
    steps: usize,
) -> Result<WalkState, WalkError> {
    let mut state = walk_step(walk, initial)?;
    for _ in 1..steps {
        state = walk_step(walk, &state)?;
    }
    Ok(state)
}

/// Pairwise affinities over the real nodes of a probe graph followed by the
/// real nodes of a gallery graph, computed once and reused for every
/// candidate subset of the probe.
#[derive(Debug, Clone)]
pub struct JointAffinity {
    probe_len: usize,
    gallery_len: usize,
    scores: Matrix,
}

impl JointAffinity {
    pub fn new(
        probe: &ContextGraph,
        gallery: &ContextGraph,
        scorer: &AffinityScorer,
    ) -> Result<Self, WalkError> {
        let people: Vec<&PersonDescriptor> =
            probe.descriptors().chain(gallery.descriptors()).collect();
        let probe_len = probe.real_count();
        let gallery_len = people.len() - probe_len;
        if probe_len == 0 || gallery_len == 0 {
            return Err(WalkError::EmptyCandidate);
        }
        let n = people.len();
        let mut scores = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let s = score_affinity(people[i], people[j], scorer)?;
                scores[(i, j)] = s;
                scores[(j, i)] = s;
            }
        }
        Ok(Self {
            probe_len,
            gallery_len,
            scores,
        })
    }

    pub fn probe_len(&self) -> usize {
        self.probe_len
    }

    /// Affinities among the probe's real nodes only.
    pub fn probe_block(&self) -> Matrix {
        Matrix::from_fn(self.probe_len, self.probe_len, |i, j| self.scores[(i, j)])
    }

    /// Average refined affinity of the probe subset `members` (indices into
    /// the probe's real nodes) to the gallery group.
    ///
    /// The walk runs on the joint graph of the subset and the gallery. A
    /// subset node starts at its mean raw affinity to the gallery members; a
    /// gallery node starts at its best raw affinity to the subset. The result
    /// is the mean over subset nodes after `steps` walk iterations.
    pub fn average_for(&self, members: &[usize], steps: usize) -> Result<f64, WalkError> {
        if members.is_empty() {
            return Err(WalkError::EmptyCandidate);
        }
        let index: Vec<usize> = members
            .iter()
            .copied()
            .chain(self.probe_len..self.probe_len + self.gallery_len)
            .collect();
        let n = index.len();
        let k = members.len();
        let raw = Matrix::from_fn(n, n, |i, j| self.scores[(index[i], index[j])]);
        let mut y0 = Vec::with_capacity(n);
        for i in 0..k {
            y0.push(raw.row(i)[k..].iter().sum::<f64>() / self.gallery_len as f64);
        }
        for g in k..n {
            y0.push(raw.row(g)[..k].iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
        let walk = normalize_affinities(&raw)?;
        let refined = iterate_walk(&walk, &WalkState::new(y0), steps)?;
        Ok(refined.scores[..k].iter().sum::<f64>() / k as f64)
    }
}

/// Average refined affinity of `candidate` to `gallery`; see
/// [`JointAffinity::average_for`].
pub fn average_affinity(
    candidate: &ContextGraph,
    gallery: &ContextGraph,
    scorer: &AffinityScorer,
    steps: usize,
) -> Result<f64, WalkError> {
    if candidate.real_count() == 0 {
        return Err(WalkError::EmptyCandidate);
    }
    let joint = JointAffinity::new(candidate, gallery, scorer)?;
    let all: Vec<usize> = (0..joint.probe_len).collect();
    joint.average_for(&all, steps)
}

fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

#[cfg(feature = "parallel")]
fn map_indexed<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_indexed<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.iter().map(f).collect()
}

/// Candidate with the highest average affinity to `gallery`. Candidates with
/// a node set already seen are skipped; ties go to the earliest candidate.
pub fn select_best_graph(
    candidates: &[ContextGraph],
    gallery: &ContextGraph,
    scorer: &AffinityScorer,
    steps: usize,
) -> Result<(ContextGraph, f64), WalkError> {
    let mut seen = HashSet::new();
    let unique: Vec<&ContextGraph> = candidates
        .iter()
        .filter(|c| seen.insert(c.node_set()))
        .collect();
    if unique.is_empty() {
        return Err(WalkError::NoCandidates);
    }
    let scores = map_indexed(&unique, |c| average_affinity(c, gallery, scorer, steps))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let best = argmax_first(&scores);
    Ok((unique[best].clone(), scores[best]))
}

/// Walk matrix over the real nodes of `graph`.
pub fn graph_walk(graph: &ContextGraph, scorer: &AffinityScorer) -> Result<AffinityMatrix, WalkError> {
    let people: Vec<&PersonDescriptor> = graph.descriptors().collect();
    let n = people.len();
    let mut raw = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let s = score_affinity(people[i], people[j], scorer)?;
            raw[(i, j)] = s;
            raw[(j, i)] = s;
        }
    }
    normalize_affinities(&raw)
}

/// The full subgroup-selection stage: enumerate walk candidates of every size
/// from 2 to the probe's real-node count and keep the one with the highest
/// average affinity to `gallery`. A probe with a single real node is returned
/// unchanged.
pub fn select_subgroup(
    probe: &ContextGraph,
    gallery: &ContextGraph,
    scorer: &AffinityScorer,
    steps: usize,
) -> Result<(ContextGraph, f64), WalkError> {
    let joint = JointAffinity::new(probe, gallery, scorer)?;
    let real = joint.probe_len();
    if real == 1 {
        let score = joint.average_for(&[0], steps)?;
        return Ok((probe.clone(), score));
    }
    let walk = normalize_affinities(&joint.probe_block())?;
    let sets: Vec<Vec<usize>> = (2..=real)
        .flat_map(|size| candidate_sets(&walk, size, steps))
        .collect();
    let scores = sets
        .iter()
        .map(|m| joint.average_for(m, steps))
        .collect::<Result<Vec<_>, _>>()?;
    let best = argmax_first(&scores);
    Ok((probe.subgraph(&sets[best]), scores[best]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::GroupSample;
    use crate::graph::build_graph;

    fn unit(v: &[f64]) -> PersonDescriptor {
        PersonDescriptor::new("x", v.to_vec(), 1.0, 1).unwrap()
    }

    #[test]
    fn cosine_scorer_endpoints() {
        let s = AffinityScorer::Cosine;
        let a = unit(&[1.0, 0.0]);
        assert_eq!(score_affinity(&a, &a, &s).unwrap(), 1.0);
        assert_eq!(score_affinity(&a, &unit(&[0.0, 1.0]), &s).unwrap(), 0.5);
        assert_eq!(score_affinity(&a, &unit(&[-1.0, 0.0]), &s).unwrap(), 0.0);
        assert!(matches!(
            score_affinity(&a, &unit(&[1.0, 0.0, 0.0]), &s),
            Err(WalkError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn bilinear_scorer_is_symmetric() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let s = AffinityScorer::bilinear(&m).unwrap();
        let (a, b) = (unit(&[0.3, 0.9]), unit(&[-0.7, 0.2]));
        let ab = score_affinity(&a, &b, &s).unwrap();
        assert_eq!(ab, score_affinity(&b, &a, &s).unwrap());
        assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn scorer_config_parses() {
        let c: ScorerConfig = toml::from_str("kind = \"cosine\"").unwrap();
        assert_eq!(c, ScorerConfig::Cosine);
        let c: ScorerConfig = toml::from_str("kind = \"bilinear\"\nmatrix = [[1.0, 0.0], [0.0, 1.0]]").unwrap();
        assert!(matches!(
            AffinityScorer::from_config(&c, 2).unwrap(),
            AffinityScorer::Bilinear(_)
        ));
        assert!(AffinityScorer::from_config(&c, 3).is_err());
    }

    #[test]
    fn two_nodes_always_swap() {
        let raw = Matrix::from_rows(&[vec![5.0, -3.0], vec![0.2, 9.0]]).unwrap();
        let w = normalize_affinities(&raw).unwrap();
        assert_eq!(w.normalized().as_slice(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn equal_off_diagonal_gives_half() {
        let w = normalize_affinities(&Matrix::from_fn(3, 3, |i, j| if i == j { 7.0 } else { 0.3 })).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0.0 } else { 0.5 };
                assert!((w.normalized()[(i, j)] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ln2_row_gives_two_thirds() {
        let mut raw = Matrix::zeros(3, 3);
        raw[(0, 1)] = std::f64::consts::LN_2;
        let w = normalize_affinities(&raw).unwrap();
        // e^{ln 2} / (e^{ln 2} + e^0) = 2/3
        assert!((w.normalized()[(0, 1)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w.normalized()[(0, 2)] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_small_or_non_finite() {
        assert_eq!(normalize_affinities(&Matrix::zeros(1, 1)), Err(WalkError::TooSmall(1)));
        let mut raw = Matrix::zeros(2, 2);
        raw[(0, 1)] = f64::INFINITY;
        assert_eq!(normalize_affinities(&raw), Err(WalkError::NonFinite));
    }

    #[test]
    fn walk_step_examples() {
        let swap = normalize_affinities(&Matrix::zeros(2, 2)).unwrap();
        let y = walk_step(&swap, &WalkState::new(vec![0.2, 0.8])).unwrap();
        assert_eq!(y.scores, vec![0.8, 0.2]);
        assert_eq!(y.iteration, 1);
        assert_eq!(
            walk_step(&swap, &WalkState::new(vec![0.0, 0.0])).unwrap().scores,
            vec![0.0, 0.0]
        );
        let uniform = normalize_affinities(&Matrix::zeros(3, 3)).unwrap();
        let y = walk_step(&uniform, &WalkState::new(vec![1.0, 0.0, 0.0])).unwrap();
        // Row i of the uniform walk puts 1/2 on each other node.
        assert_eq!(y.scores, vec![0.0, 0.5, 0.5]);
        assert!(walk_step(&uniform, &WalkState::new(vec![1.0])).is_err());
    }

    #[test]
    fn permutation_squared_is_identity() {
        let swap = normalize_affinities(&Matrix::zeros(2, 2)).unwrap();
        let y = iterate_walk(&swap, &WalkState::new(vec![0.2, 0.8]), 2).unwrap();
        assert_eq!(y.scores, vec![0.2, 0.8]);
        assert_eq!(y.iteration, 2);
    }

    fn single(id: &str, v: &[f64]) -> ContextGraph {
        let g = GroupSample::new(id, "A", vec![PersonDescriptor::new(id, v.to_vec(), 1.0, 1).unwrap()]);
        build_graph(&g, 1).unwrap()
    }

    #[test]
    fn singleton_pair_keeps_initial_score() {
        let c = single("c", &[1.0, 0.0]);
        let g = single("g", &[0.6, 0.8]);
        let a = average_affinity(&c, &g, &AffinityScorer::Cosine, 1).unwrap();
        assert!((a - 0.8).abs() < 1e-15);
    }

    #[test]
    fn empty_candidates_rejected() {
        let g = single("g", &[1.0]);
        assert_eq!(
            select_best_graph(&[], &g, &AffinityScorer::Cosine, 1).unwrap_err(),
            WalkError::NoCandidates
        );
    }

    #[test]
    fn one_candidate_selected() {
        let c = single("c", &[1.0, 0.0]);
        let g = single("g", &[0.0, 1.0]);
        let (best, score) = select_best_graph(std::slice::from_ref(&c), &g, &AffinityScorer::Cosine, 1).unwrap();
        assert_eq!(best, c);
        assert!((score - 0.5).abs() < 1e-15);
    }
}
