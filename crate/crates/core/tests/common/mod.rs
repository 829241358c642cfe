#![allow(dead_code)]

use groupwalk::{GroupSample, PersonDescriptor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn person(rng: &mut ChaCha8Rng, id: String, feature: Vec<f64>, parts: usize) -> PersonDescriptor {
    let depth = rng.random_range(0.0..10.0);
    PersonDescriptor::new(id, feature, depth, parts).unwrap()
}

/// A group of `n` people with random unit features.
pub fn random_group(rng: &mut ChaCha8Rng, id: &str, camera: &str, n: usize, dim: usize, parts: usize) -> GroupSample {
    let members = (0..n)
        .map(|k| {
            let f = unit(rng, dim);
            person(rng, format!("{id}_{camera}{k}"), f, parts)
        })
        .collect();
    GroupSample::new(id, camera, members)
}

/// Same people with freshly drawn depths, which reorders the graph nodes.
pub fn relayout(rng: &mut ChaCha8Rng, g: &GroupSample) -> GroupSample {
    let members = g
        .members
        .iter()
        .map(|m| person(rng, m.person_id.clone(), m.feature().to_vec(), m.part_count()))
        .collect();
    GroupSample::new(g.group_id.clone(), g.camera_id.clone(), members)
}

/// A second view of `g`: a subset of its people with small perturbations
/// plus `extra` strangers.
pub fn noisy_view(rng: &mut ChaCha8Rng, g: &GroupSample, keep: usize, extra: usize, camera: &str) -> GroupSample {
    let dim = g.members[0].dim();
    let parts = g.members[0].part_count();
    let mut members = Vec::new();
    for m in g.members.iter().take(keep) {
        let f: Vec<f64> = m.feature().iter().map(|x| x + rng.random_range(-0.1..0.1)).collect();
        members.push(person(rng, m.person_id.clone(), f, parts));
    }
    for k in 0..extra {
        let f = unit(rng, dim);
        members.push(person(rng, format!("{}_x{k}", g.group_id), f, parts));
    }
    GroupSample::new(g.group_id.clone(), camera, members)
}
