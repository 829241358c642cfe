//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; the process fails if any criterion does.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use groupwalk::eval::{
    generate, rank_all, view_graphs, SynthConfig, GALLERY_CAMERA, PROBE_CAMERA, REPORT_RANKS,
};
use groupwalk::graph::build_graph;
use groupwalk::linalg::Matrix;
use groupwalk::matching::{circle_loss, MatchConfig, MatchParams};
use groupwalk::pipeline::{Pipeline, PipelineConfig, PipelineFlags};
use groupwalk::random_walk::{iterate_walk, normalize_affinities, select_best_graph, AffinityScorer, WalkState};
use groupwalk::training::{check_gradients, FD_STEPS, node_budget, train, LossKind, PairSample, TrainConfig};
use groupwalk::ContextGraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{noisy_view, random_group, relayout};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn walk_matrix_invariants() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_sum, mut worst_shift): (f64, f64) = (0.0, 0.0);
    for case in 0..1000 {
        let n = 2 + case % 15;
        let raw = Matrix::from_fn(n, n, |_, _| rng.random_range(-5.0..5.0));
        let w = normalize_affinities(&raw).map_err(|e| e.to_string())?;
        let w = w.normalized();
        for i in 0..n {
            ensure(w[(i, i)] == 0.0, || format!("case {case}: diagonal entry {i} is {}", w[(i, i)]))?;
            worst_sum = worst_sum.max((w.row(i).iter().sum::<f64>() - 1.0).abs());
        }
        let row = rng.random_range(0..n);
        let c = rng.random_range(-50.0..50.0);
        let shifted = Matrix::from_fn(n, n, |i, j| raw[(i, j)] + if i == row { c } else { 0.0 });
        let ws = normalize_affinities(&shifted).map_err(|e| e.to_string())?;
        for (a, b) in w.as_slice().iter().zip(ws.normalized().as_slice()) {
            worst_shift = worst_shift.max((a - b).abs());
        }
    }
    ensure(worst_sum <= 1e-9, || format!("row sum off by {worst_sum:e}"))?;
    ensure(worst_shift <= 1e-9, || format!("shift changed W by {worst_shift:e}"))?;
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!(
        "1000 matrices, max row-sum error {worst_sum:.1e}, max shift change {worst_shift:.1e}, {:.2?}",
        start.elapsed()
    ))
}

fn walk_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.random_range(2..=12);
        let steps = rng.random_range(1..=5);
        let raw = Matrix::from_fn(n, n, |_, _| rng.random_range(0.0..1.0));
        let walk = normalize_affinities(&raw).map_err(|e| e.to_string())?;
        let y0: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let got = iterate_walk(&walk, &WalkState::new(y0.clone()), steps).map_err(|e| e.to_string())?;

        // Explicit row softmax without the diagonal, then repeated W·y.
        let mut w = vec![vec![0.0; n]; n];
        for i in 0..n {
            let m = (0..n).filter(|&j| j != i).map(|j| raw[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..n).filter(|&j| j != i).map(|j| (raw[(i, j)] - m).exp()).sum();
            for j in (0..n).filter(|&j| j != i) {
                w[i][j] = (raw[(i, j)] - m).exp() / z;
            }
        }
        let mut y = y0;
        for _ in 0..steps {
            y = (0..n).map(|i| (0..n).map(|j| w[i][j] * y[j]).sum()).collect();
        }
        for (a, b) in got.scores.iter().zip(&y) {
            worst = worst.max((a - b).abs());
        }
        ensure(got.iteration == steps, || format!("iteration counter {} != {steps}", got.iteration))?;
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("500 instances, max deviation {worst:.1e}"))
}

/// Average refined affinity of a probe subset, computed from scratch.
fn oracle_average(subset: &[&[f64]], gallery: &[&[f64]], steps: usize) -> f64 {
    let people: Vec<&[f64]> = subset.iter().chain(gallery).copied().collect();
    let (n, k) = (people.len(), subset.len());
    let s = |i: usize, j: usize| {
        let d: f64 = people[i].iter().zip(people[j]).map(|(a, b)| a * b).sum();
        ((d + 1.0) / 2.0).clamp(0.0, 1.0)
    };
    let mut y: Vec<f64> = (0..n)
        .map(|i| {
            if i < k {
                (k..n).map(|j| s(i, j)).sum::<f64>() / (n - k) as f64
            } else {
                (0..k).map(|j| s(i, j)).fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .collect();
    let mut w = vec![vec![0.0; n]; n];
    for i in 0..n {
        let m = (0..n).filter(|&j| j != i).map(|j| s(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).filter(|&j| j != i).map(|j| (s(i, j) - m).exp()).sum();
        for j in (0..n).filter(|&j| j != i) {
            w[i][j] = (s(i, j) - m).exp() / z;
        }
    }
    for _ in 0..steps {
        y = (0..n).map(|i| (0..n).map(|j| w[i][j] * y[j]).sum()).collect();
    }
    y[..k].iter().sum::<f64>() / k as f64
}

fn subgraph_selection_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scorer = AffinityScorer::Cosine;
    let mut subsets_checked = 0;
    for case in 0..200 {
        let n = rng.random_range(2..=8);
        let probe_group = random_group(&mut rng, "g", "A", n, 8, 2);
        let keep = rng.random_range(1..=n);
        let extra = rng.random_range(0..=2);
        let gallery_group = noisy_view(&mut rng, &probe_group, keep, extra, "B");
        let steps = rng.random_range(1..=3);
        let probe = build_graph(&probe_group, 8).map_err(|e| e.to_string())?;
        let gallery = build_graph(&gallery_group, 10).map_err(|e| e.to_string())?;

        let mut subsets: Vec<Vec<usize>> = Vec::new();
        for size in 2..=n {
            for mask in 0u32..(1 << n) {
                if mask.count_ones() as usize == size {
                    subsets.push((0..n).filter(|i| mask & (1 << i) != 0).collect());
                }
            }
        }
        let feats: Vec<&[f64]> = probe.descriptors().map(|d| d.feature()).collect();
        let gal: Vec<&[f64]> = gallery.descriptors().map(|d| d.feature()).collect();
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (idx, set) in subsets.iter().enumerate() {
            let members: Vec<&[f64]> = set.iter().map(|&i| feats[i]).collect();
            let score = oracle_average(&members, &gal, steps);
            if score > best_score {
                best = idx;
                best_score = score;
            }
        }
        subsets_checked += subsets.len();

        let candidates: Vec<ContextGraph> = subsets.iter().map(|s| probe.subgraph(s)).collect();
        let (chosen, score) = select_best_graph(&candidates, &gallery, &scorer, steps).map_err(|e| e.to_string())?;
        let expected = candidates[best].node_set();
        ensure(chosen.node_set() == expected, || {
            format!("case {case}: chose {:?} ({score}), oracle {expected:?} ({best_score})", chosen.node_set())
        })?;
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!("200 instances, {subsets_checked} subsets, {:.2?}", start.elapsed()))
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for case in 0..50 {
        let part_dim = rng.random_range(1..=4);
        let dim = 2 * part_dim;
        let config = MatchConfig {
            part_count: 2,
            rounds: rng.random_range(1..=2),
            embed_dim: Some(rng.random_range(1..=4)),
            gamma: rng.random_range(1.0..40.0),
            weight_pos: rng.random_range(0.5..2.0),
            weight_neg: rng.random_range(0.5..2.0),
        };
        let params = MatchParams::init(dim, &config, case).map_err(|e| e.to_string())?;
        let mut graph = |id: &str, cam: &str| {
            let n = rng.random_range(1..=4);
            build_graph(&random_group(&mut rng, id, cam, n, dim, 2), 4).unwrap()
        };
        let mut batch = Vec::new();
        for k in 0..2 {
            let (a, b, c) = (graph("p", "A"), graph("p", "B"), graph("q", "B"));
            batch.push(PairSample { probe: a.clone(), gallery: b, same_group: true });
            if k == 0 || case % 2 == 0 {
                batch.push(PairSample { probe: a, gallery: c, same_group: false });
            }
        }
        let kind = if case % 5 == 4 { LossKind::MeanGap } else { LossKind::Circle };
        let check = check_gradients(&batch, &params, kind, &FD_STEPS, 1e-6).map_err(|e| e.to_string())?;
        worst = worst.max(check.max_rel_error);
        entries += check.entries;
        ensure(check.max_rel_error <= 1e-4, || {
            format!("case {case}: relative error {:e} in {}", check.max_rel_error, check.worst_tensor)
        })?;
    }
    Ok(format!("50 instances, {entries} entries, max relative error {worst:.1e}"))
}

fn permutation_and_padding_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let config = MatchConfig {
        part_count: 2,
        ..MatchConfig::default()
    };
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let params = MatchParams::init(8, &config, case).map_err(|e| e.to_string())?;
        let n = rng.random_range(1..=6);
        let probe = random_group(&mut rng, "g", "A", n, 8, 2);
        let keep = rng.random_range(1..=n);
        let extra = rng.random_range(0..=2);
        let gallery = noisy_view(&mut rng, &probe, keep, extra, "B");
        let (probe2, gallery2) = (relayout(&mut rng, &probe), relayout(&mut rng, &gallery));
        let pad = rng.random_range(1..=4);
        let build = |g, extra: usize| build_graph(g, 8 + extra).unwrap();
        let pipeline = Pipeline::new(&PipelineConfig::default(), 8).map_err(|e| e.to_string())?;
        for (_, flags) in PipelineFlags::ablation_grid() {
            let p = pipeline.with_flags(flags);
            let a = p.similarity(&build(&probe, 0), &build(&gallery, 0), Some(&params)).map_err(|e| e.to_string())?;
            let b = p
                .similarity(&build(&probe2, pad), &build(&gallery2, pad), Some(&params))
                .map_err(|e| e.to_string())?;
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-12, || format!("similarity changed by {worst:e}"))?;
    Ok(format!("100 cases x 4 variants, max change {worst:.1e}"))
}

fn circle_loss_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(0..=5);
        let l = rng.random_range(0..=5);
        let pos: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let neg: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gamma = rng.random_range(0.5..64.0);
        let (wp, wn) = (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
        let got = circle_loss(&pos, &neg, gamma, wp, wn).map_err(|e| e.to_string())?;
        let mut sum = 0.0;
        for sn in &neg {
            for sp in &pos {
                sum += (gamma * (wn * sn - wp * sp)).exp();
            }
        }
        let expected = (1.0 + sum).ln();
        worst = worst.max((got - expected).abs());
    }
    ensure(worst <= 1e-10, || format!("max deviation {worst:e}"))?;
    let empty = circle_loss(&[], &[0.3], 32.0, 1.0, 1.0).map_err(|e| e.to_string())?;
    ensure(empty == 0.0, || format!("empty positives gave {empty}"))?;
    let empty = circle_loss(&[0.3], &[], 32.0, 1.0, 1.0).map_err(|e| e.to_string())?;
    ensure(empty == 0.0, || format!("empty negatives gave {empty}"))?;
    let ln2 = circle_loss(&[0.4], &[0.4], 32.0, 1.0, 1.0).map_err(|e| e.to_string())?;
    ensure((ln2 - 2f64.ln()).abs() <= 1e-12, || format!("equal pair gave {ln2}"))?;
    Ok(format!("1000 batches, max deviation {worst:.1e}; empty = 0, equal pair = ln 2"))
}

fn benchmark_params() -> Result<(MatchParams, Duration), String> {
    let start = Instant::now();
    let train_set = generate(&SynthConfig {
        n_identities: 100,
        seed: 1,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        epochs: 300,
        batch_pairs: 16,
        seed: 0,
        grad_check: false,
    };
    let report = train(&train_set, &cfg, &MatchConfig::default(), &PipelineConfig::default()).map_err(|e| e.to_string())?;
    Ok((report.params, start.elapsed()))
}

fn rank1_by_variant(data: &SynthConfig, params: &MatchParams) -> Result<Vec<(&'static str, Vec<f64>)>, String> {
    let dataset = generate(data).map_err(|e| e.to_string())?;
    let n_max = node_budget(&dataset, None);
    let probes = view_graphs(&dataset, PROBE_CAMERA, n_max).map_err(|e| e.to_string())?;
    let gallery = view_graphs(&dataset, GALLERY_CAMERA, n_max).map_err(|e| e.to_string())?;
    let pipeline = Pipeline::new(&PipelineConfig::default(), dataset.feature_dim).map_err(|e| e.to_string())?;
    PipelineFlags::ablation_grid()
        .into_iter()
        .map(|(label, flags)| {
            let r = rank_all(&probes, &gallery, Some(params), &pipeline.with_flags(flags)).map_err(|e| e.to_string())?;
            let cmc = groupwalk::eval::cmc(&r, &REPORT_RANKS);
            Ok((label, cmc.into_iter().map(|f| 100.0 * f).collect()))
        })
        .collect()
}

fn noiseless_sanity(trained: &MatchParams) -> Outcome {
    let data = SynthConfig {
        noise_sigma: 0.0,
        churn_count: 0,
        distractor_count: 0,
        ..SynthConfig::default()
    };
    let rows = rank1_by_variant(&data, trained)?;
    for (label, acc) in &rows {
        ensure(acc[0] == 100.0, || format!("{label} Rank-1 {:.2}", acc[0]))?;
    }
    let labels: Vec<&str> = rows.iter().map(|(l, _)| *l).collect();
    Ok(format!("Rank-1 100.00 for {}", labels.join(", ")))
}

fn ablation_direction(trained: &MatchParams, train_time: Duration) -> Outcome {
    let start = Instant::now();
    let rows = rank1_by_variant(&SynthConfig::default(), trained)?;
    let r1 = |name: &str| rows.iter().find(|(l, _)| *l == name).unwrap().1[0];
    let summary = rows
        .iter()
        .map(|(l, a)| format!("{l} {:.2}/{:.2}/{:.2}/{:.2}", a[0], a[1], a[2], a[3]))
        .collect::<Vec<_>>()
        .join(", ");
    let full = r1("+RW+GM");
    for other in ["Base", "+RW", "+GM"] {
        ensure(full >= r1(other), || format!("+RW+GM Rank-1 {full:.2} < {other} {:.2} ({summary})", r1(other)))?;
    }
    Ok(format!(
        "R1/R5/R10/R20: {summary}; train {train_time:.1?}, eval {:.1?}",
        start.elapsed()
    ))
}

fn run_cli(dir: &Path, threads: usize, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_groupwalk"))
        .current_dir(dir)
        .env_remove("GROUPWALK_CONFIG")
        .arg("--threads")
        .arg(threads.to_string())
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("{args:?} exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr))
    })
}

fn determinism() -> Outcome {
    let mut artifacts = Vec::new();
    for threads in [1, 4] {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        run_cli(dir.path(), threads, &["synth", "--out", "data.tsv", "--identities", "30", "--seed", "11"])?;
        run_cli(
            dir.path(),
            threads,
            &["train", "--data", "data.tsv", "--checkpoint", "model.ckpt", "--epochs", "15", "--lr", "0.01", "--seed", "3"],
        )?;
        run_cli(
            dir.path(),
            threads,
            &["eval", "--data", "data.tsv", "--checkpoint", "model.ckpt", "--out", "results.tsv", "--ablate"],
        )?;
        let files = ["data.tsv", "model.ckpt", "model.ckpt.loss", "results.tsv"];
        let bytes = files
            .iter()
            .map(|f| std::fs::read(dir.path().join(f)).map_err(|e| format!("{f}: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        artifacts.push(bytes);
    }
    for (k, name) in ["data.tsv", "model.ckpt", "model.ckpt.loss", "results.tsv"].iter().enumerate() {
        ensure(artifacts[0][k] == artifacts[1][k], || format!("{name} differs between 1 and 4 threads"))?;
    }
    Ok("synth, train and eval artifacts byte-identical with 1 and 4 threads".into())
}

fn main() {
    let suite = Instant::now();
    let mut failures = 0;
    let mut report = |id: usize, name: &str, outcome: Outcome| {
        match outcome {
            Ok(detail) => println!("PASS  {id} {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL  {id} {name}: {detail}");
            }
        }
    };
    report(1, "walk-matrix invariants", walk_matrix_invariants());
    report(2, "walk oracle equivalence", walk_oracle_equivalence());
    report(3, "subgraph selection oracle", subgraph_selection_oracle());
    report(4, "gradient correctness", gradient_correctness());
    report(5, "permutation and padding invariance", permutation_and_padding_invariance());
    report(6, "circle loss oracle", circle_loss_oracle());
    match benchmark_params() {
        Ok((params, train_time)) => {
            report(7, "noiseless sanity", noiseless_sanity(&params));
            report(8, "ablation direction", ablation_direction(&params, train_time));
        }
        Err(e) => {
            report(7, "noiseless sanity", Err(format!("training failed: {e}")));
            report(8, "ablation direction", Err(format!("training failed: {e}")));
        }
    }
    report(9, "determinism", determinism());
    let total = suite.elapsed();
    let budget = Duration::from_secs(120);
    report(0, "suite runtime", within(total, budget).map(|_| format!("{total:.1?}")));
    if failures > 0 {
        println!("{failures} acceptance check(s) failed");
        std::process::exit(1);
    }
}
