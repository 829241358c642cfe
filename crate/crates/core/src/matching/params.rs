use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MatchError;
use crate::linalg::Matrix;

/// Shape and loss hyperparameters of the matching network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    /// Body parts per person (`P`).
    pub part_count: usize,
    /// Message-passing rounds (`T`).
    pub rounds: usize,
    /// Graph embedding width; defaults to the feature dimension.
    pub embed_dim: Option<usize>,
    /// Circle-loss scale.
    pub gamma: f64,
    /// Circle-loss weight on positive-pair similarities.
    pub weight_pos: f64,
    /// Circle-loss weight on negative-pair similarities.
    pub weight_neg: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            part_count: 4,
            rounds: 2,
            embed_dim: None,
            gamma: 32.0,
            weight_pos: 1.0,
            weight_neg: 1.0,
        }
    }
}

/// One-hidden-layer perceptron `[h; o] ↦ W2 · relu(W1 [h; o] + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl Mlp {
    pub fn zeros(part_dim: usize) -> Self {
        Self {
            w1: Matrix::zeros(2 * part_dim, 2 * part_dim),
            b1: vec![0.0; 2 * part_dim],
            w2: Matrix::zeros(part_dim, 2 * part_dim),
            b2: vec![0.0; part_dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    /// Returns the hidden pre-activation and the output.
    pub(crate) fn forward(&self, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut z = self.w1.matvec(input);
        for (zi, bi) in z.iter_mut().zip(&self.b1) {
            *zi += bi;
        }
        let hidden: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
        let mut out = self.w2.matvec(&hidden);
        for (oi, bi) in out.iter_mut().zip(&self.b2) {
            *oi += bi;
        }
        (z, out)
    }
}

/// Learned weights of the matching network plus the circle-loss constants.
///
/// The same struct doubles as a gradient container: [`MatchParams::zeros_like`]
/// gives a zeroed copy whose fields accumulate derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchParams {
    /// One `D_p × D_p` projection per round.
    pub projections: Vec<Matrix>,
    pub mlp: Mlp,
    /// Readout projection `W_u`, `D_g × D`. Its first row also produces the
    /// self-attention logit of each node.
    pub readout: Matrix,
    pub gamma: f64,
    pub weight_pos: f64,
    pub weight_neg: f64,
    pub part_count: usize,
}

pub const CHECKPOINT_MAGIC: &str = "groupwalk-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

impl MatchParams {
    /// Seeded uniform initialization in `±1/√fan_in`.
    pub fn init(feature_dim: usize, config: &MatchConfig, seed: u64) -> Result<Self, MatchError> {
        let (part_dim, embed_dim) = check_config(feature_dim, config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
        };
        let projections = (0..config.rounds)
            .map(|_| uniform(part_dim, part_dim, part_dim))
            .collect();
        let w1 = uniform(2 * part_dim, 2 * part_dim, 2 * part_dim);
        let b1 = uniform(1, 2 * part_dim, 2 * part_dim).as_slice().to_vec();
        let w2 = uniform(part_dim, 2 * part_dim, 2 * part_dim);
        let b2 = uniform(1, part_dim, 2 * part_dim).as_slice().to_vec();
        let readout = uniform(embed_dim, feature_dim, feature_dim);
        Ok(Self {
            projections,
            mlp: Mlp { w1, b1, w2, b2 },
            readout,
            gamma: config.gamma,
            weight_pos: config.weight_pos,
            weight_neg: config.weight_neg,
            part_count: config.part_count,
        })
    }

    pub fn rounds(&self) -> usize {
        self.projections.len()
    }

    pub fn part_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.readout.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.readout.rows()
    }

    pub fn config(&self) -> MatchConfig {
        MatchConfig {
            part_count: self.part_count,
            rounds: self.rounds(),
            embed_dim: Some(self.embed_dim()),
            gamma: self.gamma,
            weight_pos: self.weight_pos,
            weight_neg: self.weight_neg,
        }
    }

    /// Checks shapes and value ranges.
    pub fn validate(&self) -> Result<(), MatchError> {
        let dp = self.part_dim();
        let bad = |msg: String| Err(MatchError::BadParams(msg));
        if self.projections.is_empty() {
            return bad("at least one round is required".into());
        }
        if self.projections.iter().any(|p| p.rows() != dp || p.cols() != dp) {
            return bad(format!("projections must be {dp}x{dp}"));
        }
        let m = &self.mlp;
        if m.w1.rows() != 2 * dp || m.w1.cols() != 2 * dp || m.b1.len() != 2 * dp
            || m.w2.cols() != 2 * dp || m.b2.len() != dp
        {
            return bad("update MLP shapes are inconsistent".into());
        }
        if self.readout.cols() != self.part_count * dp || self.readout.rows() == 0 {
            return bad(format!("readout must have {} columns", self.part_count * dp));
        }
        if self.tensors().iter().any(|(_, t)| t.iter().any(|v| !v.is_finite())) {
            return bad("non-finite weight".into());
        }
        if !(self.gamma > 0.0) || !(self.weight_pos >= 0.0) || !(self.weight_neg >= 0.0) {
            return bad("gamma must be positive and loss weights non-negative".into());
        }
        Ok(())
    }

    /// Same shapes, every value zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        z.gamma = 0.0;
        z.weight_pos = 0.0;
        z.weight_neg = 0.0;
        z
    }

    /// Named views of the learned tensors, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = self
            .projections
            .iter()
            .enumerate()
            .map(|(t, p)| (format!("projection.{t}"), p.as_slice()))
            .collect();
        out.push(("mlp.w1".into(), self.mlp.w1.as_slice()));
        out.push(("mlp.b1".into(), &self.mlp.b1));
        out.push(("mlp.w2".into(), self.mlp.w2.as_slice()));
        out.push(("mlp.b2".into(), &self.mlp.b2));
        out.push(("readout".into(), self.readout.as_slice()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = self
            .projections
            .iter_mut()
            .enumerate()
            .map(|(t, p)| (format!("projection.{t}"), p.as_mut_slice()))
            .collect();
        out.push(("mlp.w1".into(), self.mlp.w1.as_mut_slice()));
        out.push(("mlp.b1".into(), &mut self.mlp.b1));
        out.push(("mlp.w2".into(), self.mlp.w2.as_mut_slice()));
        out.push(("mlp.b2".into(), &mut self.mlp.b2));
        out.push(("readout".into(), self.readout.as_mut_slice()));
        out
    }

    /// `self += alpha · other` over the learned tensors; the loss constants
    /// are left alone.
    pub fn add_scaled(&mut self, alpha: f64, other: &MatchParams) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Text checkpoint. Floats are written in shortest round-trip form, so
    /// reading the result back reproduces every bit.
    pub fn to_checkpoint_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        let _ = writeln!(s, "config part_count {}", self.part_count);
        let _ = writeln!(s, "config part_dim {}", self.part_dim());
        let _ = writeln!(s, "config feature_dim {}", self.feature_dim());
        let _ = writeln!(s, "config embed_dim {}", self.embed_dim());
        let _ = writeln!(s, "config rounds {}", self.rounds());
        let _ = writeln!(s, "config gamma {:?}", self.gamma);
        let _ = writeln!(s, "config weight_pos {:?}", self.weight_pos);
        let _ = writeln!(s, "config weight_neg {:?}", self.weight_neg);
        let shapes = self.tensor_shapes();
        for ((name, data), (rows, cols)) in self.tensors().into_iter().zip(shapes) {
            let _ = writeln!(s, "tensor {name} {rows} {cols}");
            for r in 0..rows {
                let row: Vec<String> = data[r * cols..(r + 1) * cols]
                    .iter()
                    .map(|v| format!("{v:?}"))
                    .collect();
                let _ = writeln!(s, "{}", row.join(" "));
            }
        }
        s
    }

    fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> =
            self.projections.iter().map(|p| (p.rows(), p.cols())).collect();
        out.push((self.mlp.w1.rows(), self.mlp.w1.cols()));
        out.push((1, self.mlp.b1.len()));
        out.push((self.mlp.w2.rows(), self.mlp.w2.cols()));
        out.push((1, self.mlp.b2.len()));
        out.push((self.readout.rows(), self.readout.cols()));
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self, MatchError> {
        let bad = |line: usize, msg: &str| MatchError::Checkpoint(format!("line {line}: {msg}"));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty checkpoint"))?;
        let mut head = header.split_whitespace();
        if head.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad(1, "not a checkpoint file"));
        }
        match head.next().and_then(|v| v.parse::<u32>().ok()) {
            Some(CHECKPOINT_VERSION) => {}
            _ => return Err(bad(1, "unsupported checkpoint version")),
        }

        let mut cfg = std::collections::BTreeMap::new();
        let mut tensors: Vec<(String, usize, usize, Vec<f64>)> = Vec::new();
        let mut pending: Option<(usize, usize)> = None;
        for (no, line) in lines {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((remaining, cols)) = pending.as_mut() {
                let t = tensors.last_mut().expect("pending tensor");
                let row = line
                    .split_whitespace()
                    .map(str::parse::<f64>)
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| bad(no, "bad tensor value"))?;
                if row.len() != *cols {
                    return Err(bad(no, "tensor row has the wrong length"));
                }
                t.3.extend(row);
                *remaining -= 1;
                if *remaining == 0 {
                    pending = None;
                }
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["config", key, value] => {
                    cfg.insert(key.to_string(), value.to_string());
                }
                ["tensor", name, rows, cols] => {
                    let rows: usize = rows.parse().map_err(|_| bad(no, "bad tensor rows"))?;
                    let cols: usize = cols.parse().map_err(|_| bad(no, "bad tensor cols"))?;
                    tensors.push((name.to_string(), rows, cols, Vec::with_capacity(rows * cols)));
                    if rows > 0 {
                        pending = Some((rows, cols));
                    }
                }
                _ => return Err(bad(no, "unrecognized line")),
            }
        }
        if pending.is_some() {
            return Err(MatchError::Checkpoint("truncated tensor".into()));
        }

        let get = |key: &str| {
            cfg.get(key)
                .ok_or_else(|| MatchError::Checkpoint(format!("missing config {key}")))
        };
        let get_usize = |key: &str| -> Result<usize, MatchError> {
            get(key)?
                .parse()
                .map_err(|_| MatchError::Checkpoint(format!("bad config {key}")))
        };
        let get_f64 = |key: &str| -> Result<f64, MatchError> {
            get(key)?
                .parse()
                .map_err(|_| MatchError::Checkpoint(format!("bad config {key}")))
        };
        let rounds = get_usize("rounds")?;
        let mut take = |name: &str| -> Result<Matrix, MatchError> {
            let pos = tensors
                .iter()
                .position(|t| t.0 == name)
                .ok_or_else(|| MatchError::Checkpoint(format!("missing tensor {name}")))?;
            let (_, rows, cols, data) = tensors.remove(pos);
            Matrix::from_vec(rows, cols, data)
                .ok_or_else(|| MatchError::Checkpoint(format!("tensor {name} has a bad size")))
        };
        let projections = (0..rounds)
            .map(|t| take(&format!("projection.{t}")))
            .collect::<Result<Vec<_>, _>>()?;
        let mlp = Mlp {
            w1: take("mlp.w1")?,
            b1: take("mlp.b1")?.as_slice().to_vec(),
            w2: take("mlp.w2")?,
            b2: take("mlp.b2")?.as_slice().to_vec(),
        };
        let readout = take("readout")?;
        if let Some(extra) = tensors.first() {
            return Err(MatchError::Checkpoint(format!("unexpected tensor {}", extra.0)));
        }
        let params = Self {
            projections,
            mlp,
            readout,
            gamma: get_f64("gamma")?,
            weight_pos: get_f64("weight_pos")?,
            weight_neg: get_f64("weight_neg")?,
            part_count: get_usize("part_count")?,
        };
        params.validate()?;
        if params.part_dim() != get_usize("part_dim")?
            || params.feature_dim() != get_usize("feature_dim")?
            || params.embed_dim() != get_usize("embed_dim")?
        {
            return Err(MatchError::Checkpoint("config does not match tensor shapes".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_checkpoint_string())
    }

    pub fn load(path: &Path) -> Result<Self, MatchError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MatchError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint_str(&text)
    }
}

/// Returns `(part_dim, embed_dim)`.
fn check_config(feature_dim: usize, config: &MatchConfig) -> Result<(usize, usize), MatchError> {
    if config.part_count == 0 || feature_dim == 0 || feature_dim % config.part_count != 0 {
        return Err(MatchError::BadParams(format!(
            "part count {} must divide feature dimension {feature_dim}",
            config.part_count
        )));
    }
    if config.rounds == 0 {
        return Err(MatchError::BadParams("rounds must be at least 1".into()));
    }
    if !(config.gamma > 0.0) || !(config.weight_pos >= 0.0) || !(config.weight_neg >= 0.0) {
        return Err(MatchError::BadParams(
            "gamma must be positive and loss weights non-negative".into(),
        ));
    }
    let embed_dim = config.embed_dim.unwrap_or(feature_dim);
    if embed_dim == 0 {
        return Err(MatchError::BadParams("embed_dim must be positive".into()));
    }
    Ok((feature_dim / config.part_count, embed_dim))
}
