//! Gallery ranking, CMC curves and the results file.

use std::io::Write;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::graph::ContextGraph;
use crate::matching::MatchParams;
use crate::pipeline::{Pipeline, PipelineError};

/// Ranks reported in the summary block.
pub const REPORT_RANKS: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub probe_id: String,
    /// Gallery group ids with scores, best first.
    pub ranked: Vec<(String, f64)>,
    /// 1-based position of the probe's own group, if present in the gallery.
    pub correct_rank: Option<usize>,
}

fn rank_one(
    probe: &ContextGraph,
    gallery: &[ContextGraph],
    params: Option<&MatchParams>,
    pipeline: &Pipeline,
) -> Result<RankingResult, PipelineError> {
    let mut ranked = gallery
        .iter()
        .map(|g| Ok((g.group_id.clone(), pipeline.similarity(probe, g, params)?)))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let correct_rank = ranked
        .iter()
        .position(|(id, _)| *id == probe.group_id)
        .map(|p| p + 1);
    Ok(RankingResult {
        probe_id: probe.group_id.clone(),
        ranked,
        correct_rank,
    })
}

/// Scores every probe against every gallery graph. Results come back sorted
/// by probe id; ties in score are broken by gallery id.
pub fn rank_all(
    probes: &[ContextGraph],
    gallery: &[ContextGraph],
    params: Option<&MatchParams>,
    pipeline: &Pipeline,
) -> Result<Vec<RankingResult>, PipelineError> {
    if gallery.is_empty() {
        return Err(PipelineError::EmptyGallery);
    }
    #[cfg(feature = "parallel")]
    let iter = probes.par_iter();
    #[cfg(not(feature = "parallel"))]
    let iter = probes.iter();
    let mut out = iter
        .map(|p| rank_one(p, gallery, params, pipeline))
        .collect::<Result<Vec<_>, _>>()?;
    out.sort_by(|a, b| a.probe_id.cmp(&b.probe_id));
    Ok(out)
}

/// Fraction of probes whose own group appears within the top `k`, for each
/// `k`. Probes without a gallery match count as misses.
pub fn cmc(results: &[RankingResult], ks: &[usize]) -> Vec<f64> {
    ks.iter()
        .map(|&k| {
            if results.is_empty() {
                return 0.0;
            }
            let hits = results
                .iter()
                .filter(|r| r.correct_rank.is_some_and(|rank| rank <= k))
                .count();
            hits as f64 / results.len() as f64
        })
        .collect()
}

/// One evaluated variant.
#[derive(Debug, Clone)]
pub struct VariantResults {
    pub label: String,
    pub results: Vec<RankingResult>,
}

impl VariantResults {
    /// Rank-1/5/10/20 as percentages.
    pub fn summary(&self) -> Vec<f64> {
        cmc(&self.results, &REPORT_RANKS).into_iter().map(|f| 100.0 * f).collect()
    }
}

/// Writes `probe<TAB>rank<TAB>top20` records per variant, then one
/// `summary` line per variant with Rank-1/5/10/20 percentages.
pub fn write_results(mut out: impl Write, variants: &[VariantResults]) -> std::io::Result<()> {
    writeln!(out, "# probe\trank\ttop20")?;
    for v in variants {
        writeln!(out, "# variant {}", v.label)?;
        for r in &v.results {
            let rank = r.correct_rank.map_or_else(|| "-".to_string(), |k| k.to_string());
            let top: Vec<&str> = r.ranked.iter().take(20).map(|(id, _)| id.as_str()).collect();
            writeln!(out, "{}\t{}\t{}", r.probe_id, rank, top.join(","))?;
        }
    }
    writeln!(out, "# summary\tvariant\trank1\trank5\trank10\trank20")?;
    for v in variants {
        let s = v.summary();
        writeln!(
            out,
            "summary\t{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
            v.label, s[0], s[1], s[2], s[3]
        )?;
    }
    Ok(())
}
