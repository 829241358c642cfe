//! Browser bindings for the demo page in `www/`. Every export takes and
//! returns JSON strings so the page stays plain JavaScript.

use groupwalk::eval::{cmc, evaluate_variants, generate, view_graphs, SynthConfig, GALLERY_CAMERA, PROBE_CAMERA};
use groupwalk::graph::candidate_sets;
use groupwalk::matching::{circle_loss, MatchConfig};
use groupwalk::pipeline::{Pipeline, PipelineConfig, PipelineFlags};
use groupwalk::random_walk::{normalize_affinities, select_subgroup, AffinityScorer, JointAffinity};
use groupwalk::training::{train, TrainConfig};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub identities: usize,
    pub members: usize,
    pub sigma: f64,
    pub churn: usize,
    pub distractors: usize,
    pub steps: usize,
    pub seed: u64,
    pub train_epochs: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            identities: 40,
            members: 4,
            sigma: 0.05,
            churn: 1,
            distractors: 2,
            steps: 1,
            seed: 0,
            train_epochs: 0,
        }
    }
}

impl SceneParams {
    fn synth(&self, identities: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            n_identities: identities,
            members_per_group: [self.members, self.members],
            noise_sigma: self.sigma,
            churn_count: self.churn,
            distractor_count: self.distractors,
            seed,
            ..SynthConfig::default()
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Candidate {
    pub members: Vec<usize>,
    pub score: f64,
}

#[derive(Debug, Serialize)]
pub struct WalkView {
    pub probe: Vec<String>,
    pub gallery: Vec<String>,
    pub affinity: Vec<Vec<f64>>,
    pub walk: Vec<Vec<f64>>,
    pub candidates: Vec<Candidate>,
    pub selected: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct Curve {
    pub label: String,
    pub cmc: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct LossCurve {
    pub negative: Vec<f64>,
    pub loss: Vec<f64>,
}

fn rows(m: &groupwalk::linalg::Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// One probe group against its gallery view: the probe's affinity and walk
/// matrices, every walk candidate with its average affinity, and the pick.
pub fn walk_view(p: &SceneParams) -> Result<WalkView, String> {
    let data = generate(&p.synth(1, p.seed)).map_err(|e| e.to_string())?;
    let n_max = p.members + p.distractors;
    let probe = view_graphs(&data, PROBE_CAMERA, n_max).map_err(|e| e.to_string())?.remove(0);
    let gallery = view_graphs(&data, GALLERY_CAMERA, n_max).map_err(|e| e.to_string())?.remove(0);
    let scorer = AffinityScorer::Cosine;
    let joint = JointAffinity::new(&probe, &gallery, &scorer).map_err(|e| e.to_string())?;
    let walk = normalize_affinities(&joint.probe_block()).map_err(|e| e.to_string())?;
    let mut candidates = Vec::new();
    for size in 2..=joint.probe_len() {
        for members in candidate_sets(&walk, size, p.steps) {
            let score = joint.average_for(&members, p.steps).map_err(|e| e.to_string())?;
            candidates.push(Candidate { members, score });
        }
    }
    let (best, _) = select_subgroup(&probe, &gallery, &scorer, p.steps).map_err(|e| e.to_string())?;
    let ids = |g: &groupwalk::graph::ContextGraph| g.descriptors().map(|d| d.person_id.clone()).collect();
    Ok(WalkView {
        probe: ids(&probe),
        gallery: ids(&gallery),
        affinity: rows(walk.raw()),
        walk: rows(walk.normalized()),
        candidates,
        selected: ids(&best),
    })
}

/// CMC curves (ranks 1 to 20, as fractions) for a synthetic scene. Graph
/// matching variants are included only when `train_epochs > 0`; their
/// weights are fitted on a disjoint split drawn from `seed + 1`.
pub fn cmc_curves(p: &SceneParams) -> Result<Vec<Curve>, String> {
    let data = generate(&p.synth(p.identities, p.seed)).map_err(|e| e.to_string())?;
    let n_max = p.members + p.distractors;
    let probes = view_graphs(&data, PROBE_CAMERA, n_max).map_err(|e| e.to_string())?;
    let gallery = view_graphs(&data, GALLERY_CAMERA, n_max).map_err(|e| e.to_string())?;
    let config = PipelineConfig {
        n_max: Some(n_max),
        walk_steps: p.steps,
        ..PipelineConfig::default()
    };
    let pipeline = Pipeline::new(&config, data.feature_dim).map_err(|e| e.to_string())?;
    let grid = PipelineFlags::ablation_grid();
    let (variants, params) = if p.train_epochs == 0 {
        (&grid[..2], None)
    } else {
        let split = generate(&p.synth(p.identities, p.seed.wrapping_add(1))).map_err(|e| e.to_string())?;
        let train_config = TrainConfig {
            learning_rate: 1e-2,
            epochs: p.train_epochs,
            seed: p.seed,
            ..TrainConfig::default()
        };
        let match_config = MatchConfig {
            part_count: split.part_count,
            ..MatchConfig::default()
        };
        let report = train(&split, &train_config, &match_config, &config).map_err(|e| e.to_string())?;
        (&grid[..], Some(report.params))
    };
    let ranks: Vec<usize> = (1..=20).collect();
    let results = evaluate_variants(&probes, &gallery, params.as_ref(), &pipeline, variants)
        .map_err(|e| e.to_string())?;
    Ok(results
        .iter()
        .map(|v| Curve {
            label: v.label.clone(),
            cmc: cmc(&v.results, &ranks),
        })
        .collect())
}

/// Circle loss of one negative pair swept over [-1, 1] with fixed positives.
pub fn loss_curve(gamma: f64, positives: &[f64], points: usize) -> Result<LossCurve, String> {
    let points = points.max(2);
    let negative: Vec<f64> = (0..points)
        .map(|i| -1.0 + 2.0 * i as f64 / (points - 1) as f64)
        .collect();
    let loss = negative
        .iter()
        .map(|&s| circle_loss(positives, &[s], gamma, 1.0, 1.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    Ok(LossCurve { negative, loss })
}

fn parse(json: &str) -> Result<SceneParams, JsError> {
    if json.trim().is_empty() {
        return Ok(SceneParams::default());
    }
    serde_json::from_str(json).map_err(|e| JsError::new(&e.to_string()))
}

fn to_json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = walkView)]
pub fn walk_view_js(params: &str) -> Result<String, JsError> {
    to_json(walk_view(&parse(params)?))
}

#[wasm_bindgen(js_name = cmcCurves)]
pub fn cmc_curves_js(params: &str) -> Result<String, JsError> {
    to_json(cmc_curves(&parse(params)?))
}

#[wasm_bindgen(js_name = lossCurve)]
pub fn loss_curve_js(gamma: f64, positives: &[f64], points: usize) -> Result<String, JsError> {
    to_json(loss_curve(gamma, positives, points))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn walk_view_shapes() {
        let v = walk_view(&SceneParams::default()).unwrap();
        let n = v.probe.len();
        assert_eq!(n, 4 + 2);
        assert_eq!(v.affinity.len(), n);
        for (i, row) in v.walk.iter().enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(row[i], 0.0);
        }
        assert!(v.selected.len() >= 2 && v.selected.len() <= n);
        let best = v.candidates.iter().map(|c| c.score).fold(f64::NEG_INFINITY, f64::max);
        let picked = v
            .candidates
            .iter()
            .find(|c| c.members.iter().map(|&i| v.probe[i].clone()).collect::<Vec<_>>() == v.selected)
            .unwrap();
        assert_eq!(picked.score, best);
    }

    #[test]
    fn base_and_walk_curves_without_training() {
        let c = cmc_curves(&SceneParams { identities: 10, ..SceneParams::default() }).unwrap();
        assert_eq!(c.iter().map(|c| c.label.as_str()).collect::<Vec<_>>(), ["Base", "+RW"]);
        for curve in &c {
            assert_eq!(curve.cmc.len(), 20);
            assert_eq!(*curve.cmc.last().unwrap(), 1.0);
        }
    }

    #[test]
    fn training_adds_matching_variants() {
        let p = SceneParams { identities: 8, train_epochs: 2, ..SceneParams::default() };
        assert_eq!(cmc_curves(&p).unwrap().len(), 4);
    }

    #[test]
    fn loss_rises_with_negative_similarity() {
        let c = loss_curve(32.0, &[0.8], 21).unwrap();
        assert_eq!(c.negative.first(), Some(&-1.0));
        assert!(c.loss.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn params_accept_partial_json() {
        let p: SceneParams = serde_json::from_str(r#"{"sigma": 0.1}"#).unwrap();
        assert_eq!(p.sigma, 0.1);
        assert_eq!(p.identities, 40);
    }
}
