//! The matching pipeline with its optional stages: random-walk subgroup
//! selection (RW), graph matching (GM) and the circle loss (CL, training
//! only). With GM off, two groups are compared by the cosine of their mean
//! member features.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ContextGraph, GraphError};
use crate::linalg::{axpy, cosine};
use crate::matching::{MatchError, MatchParams, PairForward};
use crate::random_walk::{select_subgroup, AffinityScorer, ScorerConfig, WalkError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Walk(#[from] WalkError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error("graph matching is enabled but no parameters were given")]
    MissingParams,
    #[error("gallery is empty")]
    EmptyGallery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineFlags {
    pub rw: bool,
    pub gm: bool,
    pub cl: bool,
}

impl Default for PipelineFlags {
    fn default() -> Self {
        Self {
            rw: true,
            gm: true,
            cl: true,
        }
    }
}

impl PipelineFlags {
    pub const BASE: Self = Self {
        rw: false,
        gm: false,
        cl: false,
    };

    /// The four evaluation variants: Base, +RW, +GM, +RW+GM.
    pub fn ablation_grid() -> [(&'static str, PipelineFlags); 4] {
        let v = |rw, gm| PipelineFlags { rw, gm, cl: true };
        [
            ("Base", v(false, false)),
            ("+RW", v(true, false)),
            ("+GM", v(false, true)),
            ("+RW+GM", v(true, true)),
        ]
    }

    pub fn label(&self) -> &'static str {
        match (self.rw, self.gm) {
            (false, false) => "Base",
            (true, false) => "+RW",
            (false, true) => "+GM",
            (true, true) => "+RW+GM",
        }
    }
}

/// Settings shared by training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Node budget; defaults to the largest group in the data.
    pub n_max: Option<usize>,
    /// Walk iterations for both candidate enumeration and affinity refinement.
    pub walk_steps: usize,
    pub scorer: ScorerConfig,
    pub flags: PipelineFlags,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_max: None,
            walk_steps: 1,
            scorer: ScorerConfig::Cosine,
            flags: PipelineFlags::default(),
        }
    }
}

/// A resolved pipeline ready to score graph pairs.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub scorer: AffinityScorer,
    pub walk_steps: usize,
    pub flags: PipelineFlags,
}

impl Pipeline {
    pub fn new(config: &PipelineConfig, feature_dim: usize) -> Result<Self, PipelineError> {
        Ok(Self {
            scorer: AffinityScorer::from_config(&config.scorer, feature_dim)?,
            walk_steps: config.walk_steps.max(1),
            flags: config.flags,
        })
    }

    pub fn with_flags(&self, flags: PipelineFlags) -> Self {
        Self {
            flags,
            ..self.clone()
        }
    }

    /// The probe graph as it enters matching: the selected subgroup when RW
    /// is on, the whole probe otherwise.
    pub fn prepare_probe(
        &self,
        probe: &ContextGraph,
        gallery: &ContextGraph,
    ) -> Result<ContextGraph, PipelineError> {
        if self.flags.rw {
            Ok(select_subgroup(probe, gallery, &self.scorer, self.walk_steps)?.0)
        } else {
            Ok(probe.clone())
        }
    }

    pub fn similarity(
        &self,
        probe: &ContextGraph,
        gallery: &ContextGraph,
        params: Option<&MatchParams>,
    ) -> Result<f64, PipelineError> {
        let probe = self.prepare_probe(probe, gallery)?;
        if self.flags.gm {
            let params = params.ok_or(PipelineError::MissingParams)?;
            Ok(PairForward::new(&probe, gallery, params)?.similarity())
        } else {
            Ok(baseline_similarity(&probe, gallery)?)
        }
    }
}

/// Cosine of the mean real-node features.
pub fn baseline_similarity(a: &ContextGraph, b: &ContextGraph) -> Result<f64, MatchError> {
    let mean = |g: &ContextGraph| -> Result<Vec<f64>, MatchError> {
        let mut m = vec![0.0; g.part_count() * g.part_dim()];
        let mut n = 0;
        for d in g.descriptors() {
            axpy(1.0, d.feature(), &mut m);
            n += 1;
        }
        if n == 0 {
            return Err(MatchError::EmptyGraph);
        }
        Ok(m)
    };
    let (ma, mb) = (mean(a)?, mean(b)?);
    if ma.len() != mb.len() {
        return Err(MatchError::DimensionMismatch {
            expected: ma.len(),
            found: mb.len(),
        });
    }
    cosine(&ma, &mb).ok_or(MatchError::ZeroEmbedding)
}
