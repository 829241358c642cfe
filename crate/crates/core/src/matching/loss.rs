//! Pairwise ranking losses over batches of group similarities.

use super::MatchError;

/// Circle-loss constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleLoss {
    pub gamma: f64,
    pub weight_pos: f64,
    pub weight_neg: f64,
}

/// Loss value and its derivatives with respect to every input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub d_pos: Vec<f64>,
    pub d_neg: Vec<f64>,
    pub d_gamma: f64,
    pub d_weight_pos: f64,
    pub d_weight_neg: f64,
}

fn check_finite(xs: &[f64]) -> Result<(), MatchError> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MatchError::NonFinite)
    }
}

impl CircleLoss {
    /// `log(1 + Σ_i Σ_j exp(γ (w_neg · neg_i − w_pos · pos_j)))`.
    pub fn value(&self, pos: &[f64], neg: &[f64]) -> Result<f64, MatchError> {
        Ok(self.value_and_grad(pos, neg)?.loss)
    }

    pub fn value_and_grad(&self, pos: &[f64], neg: &[f64]) -> Result<LossGrad, MatchError> {
        check_finite(pos)?;
        check_finite(neg)?;
        let mut out = LossGrad {
            loss: 0.0,
            d_pos: vec![0.0; pos.len()],
            d_neg: vec![0.0; neg.len()],
            d_gamma: 0.0,
            d_weight_pos: 0.0,
            d_weight_neg: 0.0,
        };
        if pos.is_empty() || neg.is_empty() {
            return Ok(out);
        }
        let logit = |n: f64, p: f64| self.gamma * (self.weight_neg * n - self.weight_pos * p);
        // Shift by max(0, max logit): the "1 +" term is exp(0).
        let shift = neg
            .iter()
            .flat_map(|&n| pos.iter().map(move |&p| logit(n, p)))
            .fold(0.0_f64, f64::max);
        let mut total = (-shift).exp();
        for &n in neg {
            for &p in pos {
                total += (logit(n, p) - shift).exp();
            }
        }
        out.loss = shift + total.ln();
        for (i, &n) in neg.iter().enumerate() {
            for (j, &p) in pos.iter().enumerate() {
                // ∂L/∂logit_ij
                let w = (logit(n, p) - shift).exp() / total;
                out.d_neg[i] += w * self.gamma * self.weight_neg;
                out.d_pos[j] -= w * self.gamma * self.weight_pos;
                out.d_gamma += w * (self.weight_neg * n - self.weight_pos * p);
                out.d_weight_neg += w * self.gamma * n;
                out.d_weight_pos -= w * self.gamma * p;
            }
        }
        Ok(out)
    }
}

/// Free-function form of [`CircleLoss::value`].
pub fn circle_loss(
    pos: &[f64],
    neg: &[f64],
    gamma: f64,
    weight_pos: f64,
    weight_neg: f64,
) -> Result<f64, MatchError> {
    CircleLoss {
        gamma,
        weight_pos,
        weight_neg,
    }
    .value(pos, neg)
}

/// `2 + mean(neg) − mean(pos)`: the objective used when the circle loss is
/// switched off. Non-negative because similarities lie in `[−1, 1]`.
pub fn mean_gap_loss(pos: &[f64], neg: &[f64]) -> Result<LossGrad, MatchError> {
    check_finite(pos)?;
    check_finite(neg)?;
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    Ok(LossGrad {
        loss: 2.0 + mean(neg) - mean(pos),
        d_pos: vec![-1.0 / pos.len().max(1) as f64; pos.len()],
        d_neg: vec![1.0 / neg.len().max(1) as f64; neg.len()],
        d_gamma: 0.0,
        d_weight_pos: 0.0,
        d_weight_neg: 0.0,
    })
}
