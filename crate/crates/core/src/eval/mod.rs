//! Synthetic scenarios and CMC evaluation.

pub mod rank;
pub mod synth;

pub use rank::{cmc, rank_all, write_results, RankingResult, VariantResults, REPORT_RANKS};
pub use synth::{generate, SynthConfig, SynthError, GALLERY_CAMERA, PROBE_CAMERA};

use crate::feature_store::DatasetManifest;
use crate::graph::{build_graph, ContextGraph, GraphError};
use crate::matching::MatchParams;
use crate::pipeline::{Pipeline, PipelineError, PipelineFlags};

/// Graphs of one camera's view, sorted by group id.
pub fn view_graphs(
    dataset: &DatasetManifest,
    camera: &str,
    n_max: usize,
) -> Result<Vec<ContextGraph>, GraphError> {
    dataset
        .view(camera)
        .iter()
        .map(|g| build_graph(g, n_max))
        .collect()
}

/// Ranks every probe under each requested variant.
pub fn evaluate_variants(
    probes: &[ContextGraph],
    gallery: &[ContextGraph],
    params: Option<&MatchParams>,
    pipeline: &Pipeline,
    variants: &[(&str, PipelineFlags)],
) -> Result<Vec<VariantResults>, PipelineError> {
    variants
        .iter()
        .map(|(label, flags)| {
            let p = pipeline.with_flags(*flags);
            Ok(VariantResults {
                label: label.to_string(),
                results: rank_all(probes, gallery, params, &p)?,
            })
        })
        .collect()
}
