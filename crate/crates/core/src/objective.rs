//! Bradley-Terry loss over in-batch negatives, the score-centering penalty,
//! their combination, and exact gradients through the scorer.

use crate::error::{Error, Result};
use crate::scorer::{split_batch, ScoreMatrix, ScorerParams};
use crate::splitter::PrefixSuffixPair;

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// How the centering penalty weighs diagonal against off-diagonal scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CenterMode {
    /// Per row: `S_ii^2 + mean_{j != i} S_ij^2`, averaged over rows.
    #[default]
    Expectation,
    /// Plain mean of `S_ij^2` over all `B^2` entries.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub bt: f64,
    pub center: f64,
    pub c: f64,
    pub total: f64,
}

fn check(s: &ScoreMatrix) -> Result<usize> {
    let b = s.size();
    if b < 2 {
        return Err(Error::domain(format!("loss needs B >= 2, got {b}")));
    }
    if !s.is_finite() {
        return Err(Error::numerical("score matrix contains non-finite values"));
    }
    Ok(b)
}

/// Mean over rows of the mean over `j != i` of `-log sigmoid(S_ii - S_ij)`.
pub fn bt_loss(s: &ScoreMatrix) -> Result<f64> {
    let b = check(s)?;
    let mut total = 0.0;
    for i in 0..b {
        let pos = s.get(i, i);
        let row: f64 = (0..b).filter(|&j| j != i).map(|j| softplus(-(pos - s.get(i, j)))).sum();
        total += row / (b - 1) as f64;
    }
    Ok(total / b as f64)
}

pub fn center_loss(s: &ScoreMatrix) -> Result<f64> {
    center_loss_with(s, CenterMode::Expectation)
}

pub fn center_loss_with(s: &ScoreMatrix, mode: CenterMode) -> Result<f64> {
    let b = check(s)?;
    Ok(match mode {
        CenterMode::Expectation => {
            let mut total = 0.0;
            for i in 0..b {
                let neg: f64 = (0..b).filter(|&j| j != i).map(|j| s.get(i, j).powi(2)).sum();
                total += s.get(i, i).powi(2) + neg / (b - 1) as f64;
            }
            total / b as f64
        }
        CenterMode::Pooled => s.data().iter().map(|x| x * x).sum::<f64>() / (b * b) as f64,
    })
}

pub fn total_loss(s: &ScoreMatrix, c: f64) -> Result<LossBreakdown> {
    total_loss_with(s, c, CenterMode::Expectation)
}

pub fn total_loss_with(s: &ScoreMatrix, c: f64, mode: CenterMode) -> Result<LossBreakdown> {
    if !(c >= 0.0 && c.is_finite()) {
        return Err(Error::config(format!("centering coefficient must be >= 0, got {c}")));
    }
    let bt = bt_loss(s)?;
    let center = center_loss_with(s, mode)?;
    Ok(LossBreakdown {
        bt,
        center,
        c,
        total: bt + c * center,
    })
}

/// Bradley-Terry loss for one explicit chosen/rejected pair.
pub fn pairwise_bt_loss(s_chosen: f64, s_rejected: f64) -> f64 {
    softplus(-(s_chosen - s_rejected))
}

/// Loss and `dL/dS` for a score matrix.
pub fn score_matrix_gradient(s: &ScoreMatrix, c: f64, mode: CenterMode) -> Result<(LossBreakdown, ScoreMatrix)> {
    let loss = total_loss_with(s, c, mode)?;
    let b = s.size();
    let mut g = vec![0.0; b * b];
    let pair_w = 1.0 / (b * (b - 1)) as f64;
    for i in 0..b {
        let pos = s.get(i, i);
        for j in (0..b).filter(|&j| j != i) {
            // d softplus(-m)/dm = -sigmoid(-m)
            let dm = -sigmoid(-(pos - s.get(i, j))) * pair_w;
            g[i * b + i] += dm;
            g[i * b + j] -= dm;
        }
    }
    match mode {
        CenterMode::Expectation => {
            for i in 0..b {
                for j in 0..b {
                    let w = if i == j { 1.0 / b as f64 } else { pair_w };
                    g[i * b + j] += c * 2.0 * s.get(i, j) * w;
                }
            }
        }
        CenterMode::Pooled => {
            let w = 2.0 * c / (b * b) as f64;
            for (gi, si) in g.iter_mut().zip(s.data()) {
                *gi += w * si;
            }
        }
    }
    Ok((loss, ScoreMatrix::new(b, g)?))
}

pub fn loss_gradient(params: &ScorerParams, batch: &[PrefixSuffixPair], c: f64) -> Result<Vec<f64>> {
    Ok(loss_and_gradient(params, batch, c, CenterMode::Expectation)?.1)
}

/// Total loss on the batch's score matrix and its exact gradient in `theta`.
pub fn loss_and_gradient(
    params: &ScorerParams,
    batch: &[PrefixSuffixPair],
    c: f64,
    mode: CenterMode,
) -> Result<(LossBreakdown, Vec<f64>)> {
    if batch.len() < 2 {
        return Err(Error::domain("loss gradient needs at least 2 pairs"));
    }
    let (prefixes, suffixes) = split_batch(batch);
    let enc = params.encode_batch(&prefixes, &suffixes)?;
    let s = params.score_grid(&enc)?;
    let (loss, ds) = score_matrix_gradient(&s, c, mode)?;
    let b = s.size();
    let entries: Vec<(usize, usize, f64)> = (0..b)
        .flat_map(|i| (0..b).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, ds.get(i, j)))
        .collect();
    let grad = params.backprop(&prefixes, &suffixes, &enc, &entries);
    check_gradient(params, &grad)?;
    Ok((loss, grad))
}

pub(crate) fn check_gradient(params: &ScorerParams, grad: &[f64]) -> Result<()> {
    if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::numerical(format!(
            "non-finite gradient at index {k} ({})",
            params.block_of(k)
        )));
    }
    Ok(())
}
