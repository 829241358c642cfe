//! Synthetic two-view group scenarios.
//!
//! Every identity has a set of member prototypes on the unit sphere. Camera
//! `A` sees all of them plus `distractor_count` bystanders; camera `B` sees
//! the same group with `churn_count` members swapped for newcomers. Each
//! sighting adds Gaussian noise to the prototype and renormalizes. Depths are
//! drawn independently per view, so member order differs between views.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::{DatasetManifest, GroupSample, PersonDescriptor, StoreError};

pub const PROBE_CAMERA: &str = "A";
pub const GALLERY_CAMERA: &str = "B";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("churn count {churn} must be smaller than the smallest group ({members})")]
    ChurnTooLarge { churn: usize, members: usize },
    #[error("invalid synthetic config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_identities: usize,
    /// Inclusive range of true members per group.
    pub members_per_group: [usize; 2],
    pub feature_dim: usize,
    pub part_count: usize,
    pub noise_sigma: f64,
    pub churn_count: usize,
    pub distractor_count: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_identities: 200,
            members_per_group: [3, 5],
            feature_dim: 16,
            part_count: 4,
            noise_sigma: 0.05,
            churn_count: 1,
            distractor_count: 2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let [lo, hi] = self.members_per_group;
        if self.n_identities == 0 {
            return Err(SynthError::BadConfig("n_identities must be positive".into()));
        }
        if lo == 0 || lo > hi {
            return Err(SynthError::BadConfig(format!("members_per_group range [{lo}, {hi}] is empty")));
        }
        if self.part_count == 0 || self.feature_dim == 0 || self.feature_dim % self.part_count != 0 {
            return Err(SynthError::BadConfig("part count must divide dimension".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(SynthError::BadConfig("noise_sigma must be finite and non-negative".into()));
        }
        if self.churn_count >= lo {
            return Err(SynthError::ChurnTooLarge {
                churn: self.churn_count,
                members: lo,
            });
        }
        Ok(())
    }
}

fn prototype(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = crate::linalg::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn sighting(
    rng: &mut ChaCha8Rng,
    id: String,
    proto: &[f64],
    config: &SynthConfig,
) -> Result<PersonDescriptor, StoreError> {
    let feature: Vec<f64> = proto
        .iter()
        .map(|&x| {
            let z: f64 = StandardNormal.sample(rng);
            x + config.noise_sigma * z
        })
        .collect();
    let depth = rng.random_range(0.5..10.0);
    PersonDescriptor::new(id, feature, depth, config.part_count)
}

/// Two views per identity; identical seeds give identical manifests.
pub fn generate(config: &SynthConfig) -> Result<DatasetManifest, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let width = config.n_identities.saturating_sub(1).to_string().len().max(4);
    let mut groups = Vec::with_capacity(2 * config.n_identities);
    for g in 0..config.n_identities {
        let group_id = format!("g{g:0width$}");
        let [lo, hi] = config.members_per_group;
        let members = rng.random_range(lo..=hi);
        let protos: Vec<Vec<f64>> = (0..members)
            .map(|_| prototype(&mut rng, config.feature_dim))
            .collect();
        let churned = sample(&mut rng, members, config.churn_count).into_vec();

        let mut view_a = Vec::with_capacity(members + config.distractor_count);
        for (k, p) in protos.iter().enumerate() {
            view_a.push(sighting(&mut rng, format!("{group_id}_p{k}"), p, config)?);
        }
        for k in 0..config.distractor_count {
            let p = prototype(&mut rng, config.feature_dim);
            view_a.push(sighting(&mut rng, format!("{group_id}_d{k}"), &p, config)?);
        }

        let mut view_b = Vec::with_capacity(members);
        for (k, p) in protos.iter().enumerate() {
            if churned.contains(&k) {
                let fresh = prototype(&mut rng, config.feature_dim);
                view_b.push(sighting(&mut rng, format!("{group_id}_c{k}"), &fresh, config)?);
            } else {
                view_b.push(sighting(&mut rng, format!("{group_id}_p{k}"), p, config)?);
            }
        }
        groups.push(GroupSample::new(group_id.clone(), PROBE_CAMERA, view_a));
        groups.push(GroupSample::new(group_id, GALLERY_CAMERA, view_b));
    }
    Ok(DatasetManifest {
        groups,
        feature_dim: config.feature_dim,
        part_count: config.part_count,
    })
}
