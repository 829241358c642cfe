//! Depth-ordered context graphs with dummy padding, and candidate subgraphs.

use std::collections::HashSet;

use thiserror::Error;

use crate::feature_store::{depth_order, GroupSample, PersonDescriptor};
use crate::random_walk::AffinityMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("group {group_id} has {members} members but the node budget is {n_max}")]
    TooLarge {
        group_id: String,
        members: usize,
        n_max: usize,
    },
    #[error("group {0} has no members")]
    EmptyGroup(String),
    #[error("subgraph size {size} not in 1..={real}")]
    BadSize { size: usize, real: usize },
    #[error("walk matrix is {walk}x{walk} but the graph has {real} real nodes")]
    WalkDimension { walk: usize, real: usize },
}

/// A graph node: a real person or a zero-feature dummy.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub descriptor: Option<PersonDescriptor>,
    pub part_features: Vec<Vec<f64>>,
}

impl Node {
    pub fn real(descriptor: PersonDescriptor) -> Self {
        let part_features = descriptor.parts().map(<[f64]>::to_vec).collect();
        Self {
            descriptor: Some(descriptor),
            part_features,
        }
    }

    pub fn dummy(part_count: usize, part_dim: usize) -> Self {
        Self {
            descriptor: None,
            part_features: vec![vec![0.0; part_dim]; part_count],
        }
    }

    #[inline]
    pub fn is_dummy(&self) -> bool {
        self.descriptor.is_none()
    }

    /// Concatenation of the part features.
    pub fn flat_features(&self) -> Vec<f64> {
        self.part_features.concat()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextGraph {
    /// Identifier of the source group, carried through for reporting.
    pub group_id: String,
    pub camera_id: String,
    pub nodes: Vec<Node>,
    /// Undirected edges as `(i, j)` with `i < j`, over real nodes only.
    pub edges: Vec<(usize, usize)>,
    pub n_max: usize,
    part_count: usize,
    part_dim: usize,
}

impl ContextGraph {
    pub fn part_count(&self) -> usize {
        self.part_count
    }

    pub fn part_dim(&self) -> usize {
        self.part_dim
    }

    /// Real nodes come first, so this is also the index of the first dummy.
    pub fn real_count(&self) -> usize {
        self.nodes.iter().take_while(|n| !n.is_dummy()).count()
    }

    pub fn real_nodes(&self) -> &[Node] {
        &self.nodes[..self.real_count()]
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &PersonDescriptor> {
        self.nodes.iter().filter_map(|n| n.descriptor.as_ref())
    }

    /// Person ids of the real nodes, sorted; identifies the node set.
    pub fn node_set(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.descriptors().map(|d| d.person_id.as_str()).collect();
        ids.sort_unstable();
        ids
    }

    /// Induced subgraph on the given real-node indices, re-padded to `n_max`.
    /// Indices are taken in ascending order so depth order is preserved.
    pub fn subgraph(&self, indices: &[usize]) -> ContextGraph {
        let mut idx = indices.to_vec();
        idx.sort_unstable();
        idx.dedup();
        let mut nodes: Vec<Node> = idx.iter().map(|&i| self.nodes[i].clone()).collect();
        let real = nodes.len();
        nodes.resize_with(self.n_max, || Node::dummy(self.part_count, self.part_dim));
        ContextGraph {
            group_id: self.group_id.clone(),
            camera_id: self.camera_id.clone(),
            nodes,
            edges: complete_edges(real),
            n_max: self.n_max,
            part_count: self.part_count,
            part_dim: self.part_dim,
        }
    }

    /// Same graph with different node features; dummies keep zero features.
    pub fn with_part_features(&self, features: Vec<Vec<Vec<f64>>>) -> ContextGraph {
        let mut out = self.clone();
        for (node, f) in out.nodes.iter_mut().zip(features) {
            if !node.is_dummy() {
                node.part_features = f;
            }
        }
        out
    }

    /// Same graph with a different node budget (never below the real count).
    pub fn repadded(&self, n_max: usize) -> ContextGraph {
        let real = self.real_count();
        let mut g = self.clone();
        g.n_max = n_max.max(real);
        g.nodes.truncate(real);
        g.nodes
            .resize_with(g.n_max, || Node::dummy(self.part_count, self.part_dim));
        g
    }
}

fn complete_edges(real: usize) -> Vec<(usize, usize)> {
    (0..real)
        .flat_map(|i| (i + 1..real).map(move |j| (i, j)))
        .collect()
}

/// Builds the depth-ordered context graph of `group` with `n_max` nodes.
pub fn build_graph(group: &GroupSample, n_max: usize) -> Result<ContextGraph, GraphError> {
    let Some(first) = group.members.first() else {
        return Err(GraphError::EmptyGroup(group.group_id.clone()));
    };
    if group.members.len() > n_max {
        return Err(GraphError::TooLarge {
            group_id: group.group_id.clone(),
            members: group.members.len(),
            n_max,
        });
    }
    let (part_count, part_dim) = (first.part_count(), first.part_dim());
    let mut members = group.members.clone();
    members.sort_by(depth_order);
    let real = members.len();
    let mut nodes: Vec<Node> = members.into_iter().map(Node::real).collect();
    nodes.resize_with(n_max, || Node::dummy(part_count, part_dim));
    Ok(ContextGraph {
        group_id: group.group_id.clone(),
        camera_id: group.camera_id.clone(),
        nodes,
        edges: complete_edges(real),
        n_max,
        part_count,
        part_dim,
    })
}

/// Visitation scores `e_v · W^steps` from start node `v`.
pub fn visitation_scores(walk: &AffinityMatrix, start: usize, steps: usize) -> Vec<f64> {
    let w = walk.normalized();
    let n = w.rows();
    let mut r = vec![0.0; n];
    r[start] = 1.0;
    for _ in 0..steps {
        r = w.matvec_t(&r);
    }
    r
}

/// Real-node index sets of the candidates of one size: each start node plus
/// the `size - 1` nodes it visits most under `steps` walk iterations (ties go
/// to the shallower node). Duplicate sets are kept once, in order of their
/// first starting node.
pub fn candidate_sets(walk: &AffinityMatrix, size: usize, steps: usize) -> Vec<Vec<usize>> {
    let real = walk.len();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for start in 0..real {
        let members: Vec<usize> = if size >= real {
            (0..real).collect()
        } else if size <= 1 {
            vec![start]
        } else {
            let scores = visitation_scores(walk, start, steps);
            let mut others: Vec<usize> = (0..real).filter(|&u| u != start).collect();
            others.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let mut m = others[..size - 1].to_vec();
            m.push(start);
            m.sort_unstable();
            m
        };
        if seen.insert(members.clone()) {
            out.push(members);
        }
    }
    out
}

/// Candidate subgraphs of `size` real nodes, one per distinct starting node
/// selection (see [`candidate_sets`]), each re-padded to the parent budget.
pub fn enumerate_candidates(
    graph: &ContextGraph,
    walk: &AffinityMatrix,
    size: usize,
    steps: usize,
) -> Result<Vec<ContextGraph>, GraphError> {
    let real = graph.real_count();
    if size == 0 || size > real {
        return Err(GraphError::BadSize { size, real });
    }
    if walk.len() != real {
        return Err(GraphError::WalkDimension {
            walk: walk.len(),
            real,
        });
    }
    Ok(candidate_sets(walk, size, steps)
        .iter()
        .map(|m| graph.subgraph(m))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    fn person(id: &str, depth: f64, feature: Vec<f64>) -> PersonDescriptor {
        PersonDescriptor::new(id, feature, depth, 2).unwrap()
    }

    fn group(n: usize) -> GroupSample {
        let members = (0..n)
            .map(|i| person(&format!("p{i}"), (n - i) as f64, vec![1.0, i as f64, 0.5, 2.0]))
            .collect();
        GroupSample::new("g", "A", members)
    }

    #[test]
    fn three_members_five_slots() {
        let g = build_graph(&group(3), 5).unwrap();
        assert_eq!(g.nodes.len(), 5);
        assert_eq!(g.real_count(), 3);
        assert_eq!(g.edges, vec![(0, 1), (0, 2), (1, 2)]);
        assert!(g.nodes[3..].iter().all(|n| n.is_dummy()
            && n.part_features.iter().flatten().all(|&v| v == 0.0)));
        let depths: Vec<f64> = g.descriptors().map(|d| d.depth_mean).collect();
        assert_eq!(depths, vec![1.0, 2.0, 3.0]);
        // Real node features are the member's parts.
        let d = g.nodes[0].descriptor.as_ref().unwrap();
        assert_eq!(g.nodes[0].flat_features(), d.feature());
    }

    #[test]
    fn singleton_has_no_edges() {
        let g = build_graph(&group(1), 1).unwrap();
        assert_eq!(g.real_count(), 1);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn oversized_group_rejected() {
        assert!(matches!(build_graph(&group(4), 3), Err(GraphError::TooLarge { .. })));
    }

    #[test]
    fn full_size_gives_single_candidate() {
        let g = build_graph(&group(3), 4).unwrap();
        let w = AffinityMatrix::from_raw(&Matrix::zeros(3, 3)).unwrap();
        let c = enumerate_candidates(&g, &w, 3, 1).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].real_count(), 3);
    }

    #[test]
    fn singletons_per_start() {
        let g = build_graph(&group(2), 2).unwrap();
        let w = AffinityMatrix::from_raw(&Matrix::zeros(2, 2)).unwrap();
        let c = enumerate_candidates(&g, &w, 1, 1).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.iter().all(|g| g.real_count() == 1 && g.nodes.len() == 2));
        assert_ne!(c[0].node_set(), c[1].node_set());
    }

    #[test]
    fn size_beyond_real_count_rejected() {
        let g = build_graph(&group(2), 4).unwrap();
        let w = AffinityMatrix::from_raw(&Matrix::zeros(2, 2)).unwrap();
        assert!(matches!(
            enumerate_candidates(&g, &w, 3, 1),
            Err(GraphError::BadSize { size: 3, real: 2 })
        ));
    }

    /// Brute force: for each start node, the size-2 subset containing it that
    /// maximizes total visitation mass. On a block-diagonal walk this must be
    /// the start's own block.
    #[test]
    fn block_diagonal_walk_recovers_blocks() {
        let g = build_graph(&group(4), 4).unwrap();
        let w = Matrix::from_rows(&[
            vec![0.0, 1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ])
        .unwrap();
        let walk = AffinityMatrix::from_walk(Matrix::zeros(4, 4), w).unwrap();
        for start in 0..4 {
            let scores = visitation_scores(&walk, start, 1);
            let best = (0..4)
                .filter(|&u| u != start)
                .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
                .unwrap();
            assert_eq!(best, start ^ 1);
        }
        let c = enumerate_candidates(&g, &walk, 2, 1).unwrap();
        let sets: Vec<Vec<&str>> = c.iter().map(|c| c.node_set()).collect();
        let ids: Vec<&str> = g.descriptors().map(|d| d.person_id.as_str()).collect();
        let mut b0 = vec![ids[0], ids[1]];
        let mut b1 = vec![ids[2], ids[3]];
        b0.sort_unstable();
        b1.sort_unstable();
        assert_eq!(sets, vec![b0, b1]);
    }
}
