//! Gradient-descent training of the matching weights.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::DatasetManifest;
use crate::graph::{build_graph, ContextGraph, GraphError};
use crate::linalg::norm;
use crate::matching::{mean_gap_loss, CircleLoss, LossGrad, MatchConfig, MatchError, MatchParams, PairForward};
use crate::pipeline::{Pipeline, PipelineConfig, PipelineError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("batch needs at least one positive and one negative pair")]
    UnbalancedBatch,
    #[error("need at least 2 group identities seen by 2 or more cameras, found {0}")]
    InsufficientIdentities(usize),
    #[error("graph matching is disabled; there is nothing to train")]
    NothingToTrain,
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Pairs per step, split evenly between positives and negatives.
    pub batch_pairs: usize,
    pub seed: u64,
    pub grad_check: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 300,
            batch_pairs: 16,
            seed: 0,
            grad_check: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::BadConfig("learning_rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be at least 1".into()));
        }
        if self.batch_pairs < 2 {
            return Err(TrainError::BadConfig("batch_pairs must be at least 2".into()));
        }
        Ok(())
    }
}

/// A graph pair with its label.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub probe: ContextGraph,
    pub gallery: ContextGraph,
    pub same_group: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Circle,
    MeanGap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub entries: usize,
    /// Tensor with the largest relative error.
    pub worst_tensor: String,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub params: MatchParams,
    pub grad_check: Option<GradCheck>,
    pub updates: usize,
}

#[cfg(feature = "parallel")]
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.iter().map(f).collect()
}

fn batch_loss(sims: &[f64], batch: &[PairSample], params: &MatchParams, kind: LossKind) -> Result<LossGrad, MatchError> {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (s, p) in sims.iter().zip(batch) {
        if p.same_group {
            pos.push(*s);
        } else {
            neg.push(*s);
        }
    }
    match kind {
        LossKind::Circle => CircleLoss {
            gamma: params.gamma,
            weight_pos: params.weight_pos,
            weight_neg: params.weight_neg,
        }
        .value_and_grad(&pos, &neg),
        LossKind::MeanGap => mean_gap_loss(&pos, &neg),
    }
}

/// Loss over the batch similarities and its gradient with respect to every
/// parameter. Pairs are evaluated independently; per-pair gradients are
/// summed in batch order, so the result does not depend on thread count.
pub fn loss_and_grad(
    batch: &[PairSample],
    params: &MatchParams,
    kind: LossKind,
) -> Result<(f64, MatchParams), TrainError> {
    if !batch.iter().any(|p| p.same_group) || batch.iter().all(|p| p.same_group) {
        return Err(TrainError::UnbalancedBatch);
    }
    let forwards = par_map(batch, |p| PairForward::new(&p.probe, &p.gallery, params))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let sims: Vec<f64> = forwards.iter().map(PairForward::similarity).collect();
    let lg = batch_loss(&sims, batch, params, kind)?;
    let (mut ip, mut ineg) = (0, 0);
    let d_sims: Vec<f64> = batch
        .iter()
        .map(|p| {
            if p.same_group {
                ip += 1;
                lg.d_pos[ip - 1]
            } else {
                ineg += 1;
                lg.d_neg[ineg - 1]
            }
        })
        .collect();
    let jobs: Vec<(&PairForward, f64)> = forwards.iter().zip(d_sims).collect();
    let per_pair = par_map(&jobs, |(f, d)| {
        let mut g = params.zeros_like();
        f.backward(*d, params, &mut g);
        g
    });
    let mut grads = params.zeros_like();
    for g in &per_pair {
        grads.add_scaled(1.0, g);
    }
    grads.gamma = lg.d_gamma;
    grads.weight_pos = lg.d_weight_pos;
    grads.weight_neg = lg.d_weight_neg;
    Ok((lg.loss, grads))
}

/// Loss only, no gradient.
pub fn batch_loss_value(batch: &[PairSample], params: &MatchParams, kind: LossKind) -> Result<f64, TrainError> {
    let sims = par_map(batch, |p| PairForward::new(&p.probe, &p.gallery, params).map(|f| f.similarity()))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(batch_loss(&sims, batch, params, kind)?.loss)
}

/// Finite-difference steps tried by [`check_gradients`].
pub const FD_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];

/// Compares the analytic gradient of every parameter tensor, including the
/// loss constants, against central differences. A tensor's relative error is
/// `‖a − n‖ / max(‖a‖, ‖n‖, floor)`, taken at whichever of `steps` agrees
/// best: large steps suffer truncation, small ones roundoff, and any step can
/// straddle a ReLU kink.
pub fn check_gradients(
    batch: &[PairSample],
    params: &MatchParams,
    kind: LossKind,
    steps: &[f64],
    floor: f64,
) -> Result<GradCheck, TrainError> {
    if steps.is_empty() {
        return Err(TrainError::BadConfig("no finite-difference steps".into()));
    }
    let (_, analytic) = loss_and_grad(batch, params, kind)?;
    let central = |bump: &dyn Fn(&mut MatchParams, f64), h: f64| -> Result<f64, TrainError> {
        let mut up = params.clone();
        bump(&mut up, h);
        let mut down = params.clone();
        bump(&mut down, -h);
        Ok((batch_loss_value(batch, &up, kind)? - batch_loss_value(batch, &down, kind)?) / (2.0 * h))
    };
    let rel = |a: &[f64], n: &[f64]| {
        let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        diff / norm(a).max(norm(n)).max(floor)
    };
    let mut report = GradCheck {
        max_rel_error: 0.0,
        entries: 0,
        worst_tensor: String::new(),
    };
    let mut record = |name: &str, err: f64, len: usize| {
        if err > report.max_rel_error || report.worst_tensor.is_empty() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst_tensor = name.to_string();
        }
        report.entries += len;
    };
    for (t, (name, grad)) in analytic.tensors().into_iter().enumerate() {
        let mut best = f64::INFINITY;
        for &h in steps {
            let numeric = (0..grad.len())
                .map(|k| central(&|p: &mut MatchParams, d| p.tensors_mut()[t].1[k] += d, h))
                .collect::<Result<Vec<_>, _>>()?;
            best = best.min(rel(grad, &numeric));
        }
        record(&name, best, grad.len());
    }
    if kind == LossKind::Circle {
        type Field = fn(&mut MatchParams) -> &mut f64;
        let fields: [(&str, Field, f64); 3] = [
            ("gamma", |p| &mut p.gamma, analytic.gamma),
            ("weight_pos", |p| &mut p.weight_pos, analytic.weight_pos),
            ("weight_neg", |p| &mut p.weight_neg, analytic.weight_neg),
        ];
        for (name, field, a) in fields {
            let mut best = f64::INFINITY;
            for &h in steps {
                best = best.min(rel(&[a], &[central(&|p: &mut MatchParams, d| *field(p) += d, h)?]));
            }
            record(name, best, 1);
        }
    }
    Ok(report)
}

/// Graphs of every view of every identity seen by at least two cameras,
/// keyed by group id, with views in camera order.
pub fn training_views(
    dataset: &DatasetManifest,
    n_max: usize,
) -> Result<BTreeMap<String, Vec<ContextGraph>>, TrainError> {
    let mut views: BTreeMap<String, Vec<ContextGraph>> = BTreeMap::new();
    for g in &dataset.groups {
        views
            .entry(g.group_id.clone())
            .or_default()
            .push(build_graph(g, n_max)?);
    }
    views.retain(|_, v| v.len() >= 2);
    for v in views.values_mut() {
        v.sort_by(|a, b| a.camera_id.cmp(&b.camera_id));
    }
    if views.len() < 2 {
        return Err(TrainError::InsufficientIdentities(views.len()));
    }
    Ok(views)
}

/// Largest group in the dataset, or the configured budget if set.
pub fn node_budget(dataset: &DatasetManifest, configured: Option<usize>) -> usize {
    let largest = dataset.groups.iter().map(|g| g.members.len()).max().unwrap_or(1);
    configured.unwrap_or(largest).max(1)
}

/// Plain gradient descent on the pair loss. Every step uses half positive
/// pairs (two camera views of one identity) and, for each of them, one
/// negative pair formed with a uniformly drawn other identity.
pub fn train(
    dataset: &DatasetManifest,
    config: &TrainConfig,
    match_config: &MatchConfig,
    pipeline_config: &PipelineConfig,
) -> Result<TrainReport, TrainError> {
    train_from(dataset, config, pipeline_config, MatchParams::init(
        dataset.feature_dim,
        match_config,
        config.seed,
    )?)
}

/// [`train`] starting from given parameters.
pub fn train_from(
    dataset: &DatasetManifest,
    config: &TrainConfig,
    pipeline_config: &PipelineConfig,
    mut params: MatchParams,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if !pipeline_config.flags.gm {
        return Err(TrainError::NothingToTrain);
    }
    params.validate()?;
    let pipeline = Pipeline::new(pipeline_config, dataset.feature_dim)?;
    let kind = if pipeline_config.flags.cl {
        LossKind::Circle
    } else {
        LossKind::MeanGap
    };
    let n_max = node_budget(dataset, pipeline_config.n_max);
    let views = training_views(dataset, n_max)?;
    let ids: Vec<&String> = views.keys().collect();
    let mut positives: Vec<(usize, usize, usize)> = Vec::new();
    for (k, id) in ids.iter().enumerate() {
        let n = views[*id].len();
        for a in 0..n {
            for b in a + 1..n {
                positives.push((k, a, b));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let half = (config.batch_pairs / 2).max(1);
    let mut grad_check = None;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut updates = 0;
    for epoch in 0..config.epochs {
        positives.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in positives.chunks(half) {
            let mut batch = Vec::with_capacity(2 * chunk.len());
            for &(k, a, b) in chunk {
                let group = &views[ids[k]];
                let (probe, gallery) = (&group[a], &group[b]);
                let mut other = rng.random_range(0..ids.len() - 1);
                if other >= k {
                    other += 1;
                }
                let other_views = &views[ids[other]];
                let negative = &other_views[rng.random_range(0..other_views.len())];
                batch.push(PairSample {
                    probe: pipeline.prepare_probe(probe, gallery)?,
                    gallery: gallery.clone(),
                    same_group: true,
                });
                batch.push(PairSample {
                    probe: pipeline.prepare_probe(probe, negative)?,
                    gallery: negative.clone(),
                    same_group: false,
                });
            }
            if config.grad_check && grad_check.is_none() {
                grad_check = Some(check_gradients(&batch[..batch.len().min(4)], &params, kind, &FD_STEPS, 1e-6)?);
            }
            let (loss, grads) = loss_and_grad(&batch, &params, kind)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step: steps });
            }
            params.add_scaled(-config.learning_rate, &grads);
            if !params.l2_norm().is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step: steps });
            }
            total += loss;
            steps += 1;
            updates += 1;
        }
        epoch_losses.push(total / steps as f64);
    }
    Ok(TrainReport {
        epoch_losses,
        params,
        grad_check,
        updates,
    })
}
