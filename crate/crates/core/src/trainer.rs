//! Online training loop: batching, Adam with linear warmup, token-budget
//! accounting, validation metrics and checkpointing. Also hosts the
//! curated chosen/rejected continuation path.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::corpus::{tokenize, Tokenizer};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::objective::{check_gradient, loss_and_gradient, pairwise_bt_loss, sigmoid, CenterMode, LossBreakdown};
use crate::scorer::{save_checkpoint, ScorerParams};
use crate::splitter::PrefixSuffixPair;

pub const METRICS_HEADER: &str =
    "step,tokens_seen,lr,bt_loss,center_loss,total_loss,val_rank_acc,val_mean_pos,val_mean_neg,val_margin,val_mean_sq_score";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Centering coefficient.
    pub c: f64,
    pub center_mode: CenterMode,
    pub base_lr: f64,
    pub warmup_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub token_budget: u64,
    /// Hard cap on optimizer steps, applied after the token budget.
    pub max_steps: Option<u64>,
    pub seed: u64,
    /// Write `ckpt-<tokens>.ckpt` every this many tokens; 0 disables.
    pub checkpoint_every: u64,
    /// Emit a metrics row every this many steps (and always after the last).
    pub val_every: u64,
    /// Shuffle batch order with `seed` instead of keeping stream order.
    pub shuffle: bool,
    /// Rescale gradients whose L2 norm exceeds this value.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            c: 0.01,
            center_mode: CenterMode::Expectation,
            base_lr: 1e-6,
            warmup_ratio: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            token_budget: 11_000_000,
            max_steps: None,
            seed: 2025,
            checkpoint_every: 0,
            val_every: 0,
            shuffle: false,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config(format!("batch size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return Err(Error::config(format!("c must be >= 0, got {}", self.c)));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::config(format!("warmup_ratio must lie in [0, 1), got {}", self.warmup_ratio)));
        }
        if self.token_budget == 0 {
            return Err(Error::config("token_budget must be positive"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("lr must be >= 0, got {}", self.base_lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("adam eps must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        OptimizerState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Linear warmup from 0 to `base_lr` over `ceil(warmup_ratio * total_steps)`
/// steps, constant afterwards.
pub fn lr_schedule(step: u64, total_steps: u64, base_lr: f64, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total_steps as f64).ceil() as u64;
    if warmup == 0 || step >= warmup {
        base_lr
    } else {
        base_lr * step as f64 / warmup as f64
    }
}

/// Bias-corrected Adam update, in place.
pub fn adam_step(
    state: &mut OptimizerState,
    params: &mut [f64],
    grad: &[f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::domain("adam: parameter, gradient and state lengths differ"));
    }
    if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::numerical(format!("adam: non-finite gradient at index {k}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Groups pairs into consecutive batches of `b`, dropping the final partial
/// batch. With `shuffle_seed` the pair order is permuted first.
pub fn make_batches(
    pairs: &[PrefixSuffixPair],
    b: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Vec<PrefixSuffixPair>>> {
    if b < 2 {
        return Err(Error::config(format!("batch size must be >= 2, got {b}")));
    }
    if pairs.len() < b {
        return Err(Error::config(format!("{} pairs cannot fill one batch of {b}", pairs.len())));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order
        .chunks_exact(b)
        .map(|idx| idx.iter().map(|&i| pairs[i].clone()).collect())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationStats {
    pub rank_acc: f64,
    pub mean_pos: f64,
    pub mean_neg: f64,
    pub margin: f64,
    pub mean_sq_score: f64,
    pub rows: usize,
}

impl ValidationStats {
    fn nan() -> Self {
        ValidationStats {
            rank_acc: f64::NAN,
            mean_pos: f64::NAN,
            mean_neg: f64::NAN,
            margin: f64::NAN,
            mean_sq_score: f64::NAN,
            rows: 0,
        }
    }
}

/// Fraction of rows whose diagonal is the strict row maximum; ties count as
/// misses.
pub fn row_rank_correct(row: &[f64], i: usize) -> bool {
    row.iter().enumerate().all(|(j, &s)| j == i || row[i] > s)
}

/// In-batch ranking metrics over held-out batches.
pub fn validate(params: &ScorerParams, batches: &[Vec<PrefixSuffixPair>]) -> Result<ValidationStats> {
    if batches.is_empty() {
        return Err(Error::domain("validation needs at least one batch"));
    }
    let mut correct = 0usize;
    let mut rows = 0usize;
    let (mut pos, mut npos) = (0.0, 0usize);
    let (mut neg, mut nneg) = (0.0, 0usize);
    let mut sq = 0.0;
    for batch in batches {
        let s = params.score_matrix(batch)?;
        let b = s.size();
        for i in 0..b {
            if row_rank_correct(s.row(i), i) {
                correct += 1;
            }
            for j in 0..b {
                let x = s.get(i, j);
                sq += x * x;
                if i == j {
                    pos += x;
                    npos += 1;
                } else {
                    neg += x;
                    nneg += 1;
                }
            }
        }
        rows += b;
    }
    let mean_pos = pos / npos as f64;
    let mean_neg = neg / nneg as f64;
    Ok(ValidationStats {
        rank_acc: correct as f64 / rows as f64,
        mean_pos,
        mean_neg,
        margin: mean_pos - mean_neg,
        mean_sq_score: sq / (npos + nneg) as f64,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainMetrics {
    pub step: u64,
    pub tokens_seen: u64,
    pub lr: f64,
    pub bt_loss: f64,
    pub center_loss: f64,
    pub total_loss: f64,
    pub val: ValidationStats,
}

impl TrainMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.tokens_seen,
            self.lr,
            self.bt_loss,
            self.center_loss,
            self.total_loss,
            self.val.rank_acc,
            self.val.mean_pos,
            self.val.mean_neg,
            self.val.margin,
            self.val.mean_sq_score
        )
    }
}

pub fn metrics_csv(rows: &[TrainMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{}", r.csv_row()).unwrap();
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ScorerParams,
    pub state: OptimizerState,
    pub metrics: Vec<TrainMetrics>,
    pub steps: u64,
    pub tokens_seen: u64,
}

/// Where training writes checkpoints and the metrics log.
#[derive(Debug, Clone, Copy)]
pub struct OutputDir<'a>(pub &'a Path);

impl OutputDir<'_> {
    fn checkpoint(&self, name: &str, params: &ScorerParams, state: &OptimizerState) -> Result<()> {
        save_checkpoint(params, Some(state), &self.0.join(name))
    }
}

/// Per-step optimization over a cyclic batch source, shared by both
/// training paths.
struct Loop<'a> {
    config: &'a TrainConfig,
    params: ScorerParams,
    state: OptimizerState,
    out: Option<OutputDir<'a>>,
    metrics: Vec<TrainMetrics>,
    tokens_seen: u64,
    next_checkpoint: u64,
}

impl<'a> Loop<'a> {
    fn new(
        config: &'a TrainConfig,
        params: ScorerParams,
        state: Option<OptimizerState>,
        out: Option<OutputDir<'a>>,
    ) -> Result<Self> {
        config.validate()?;
        let n = params.param_count();
        let state = state.unwrap_or_else(|| OptimizerState::new(n));
        if state.m.len() != n {
            return Err(Error::config("optimizer state does not match parameter count"));
        }
        Ok(Loop {
            config,
            params,
            state,
            out,
            metrics: Vec::new(),
            tokens_seen: 0,
            next_checkpoint: config.checkpoint_every,
        })
    }

    /// Runs steps until the token budget (at least one step) or `max_steps`.
    fn run(
        mut self,
        n_batches: usize,
        tokens_in: impl Fn(usize) -> u64,
        mut step_fn: impl FnMut(&ScorerParams, usize) -> Result<(LossBreakdown, Vec<f64>)>,
        validate_fn: impl Fn(&ScorerParams) -> Result<ValidationStats>,
        order_for_epoch: impl Fn(u64) -> Vec<usize>,
    ) -> Result<TrainOutcome> {
        let cfg = self.config;
        let per_batch = tokens_in(0).max(1);
        let total_steps = cfg.token_budget.div_ceil(per_batch).max(1);
        let total_steps = cfg.max_steps.map_or(total_steps, |m| total_steps.min(m));
        let mut step = 0u64;
        let mut epoch = 0u64;
        let mut order = order_for_epoch(0);
        let mut cursor = 0usize;
        while step < total_steps && (step == 0 || self.tokens_seen < cfg.token_budget) {
            if cursor == n_batches {
                epoch += 1;
                order = order_for_epoch(epoch);
                cursor = 0;
            }
            let bi = order[cursor];
            cursor += 1;
            step += 1;
            let lr = lr_schedule(step, total_steps, cfg.base_lr, cfg.warmup_ratio);
            let result = step_fn(&self.params, bi).and_then(|(loss, mut grad)| {
                if let Some(max_norm) = cfg.grad_clip {
                    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                    if norm > max_norm {
                        let k = max_norm / norm;
                        grad.iter_mut().for_each(|g| *g *= k);
                    }
                }
                let mut theta = self.params.theta.clone();
                let mut state = self.state.clone();
                adam_step(&mut state, &mut theta, &grad, lr, cfg.beta1, cfg.beta2, cfg.eps)?;
                if let Some(k) = theta.iter().position(|x| !x.is_finite()) {
                    return Err(Error::numerical(format!(
                        "step {step}: parameter {k} ({}) became non-finite",
                        self.params.block_of(k)
                    )));
                }
                Ok((loss, theta, state))
            });
            let (loss, theta, state) = match result {
                Ok(r) => r,
                Err(e) => {
                    if let Some(out) = self.out {
                        out.checkpoint("last-good.ckpt", &self.params, &self.state)?;
                    }
                    return Err(e);
                }
            };
            self.params.theta = theta;
            self.state = state;
            self.tokens_seen += tokens_in(bi);

            if let Some(out) = self.out {
                while cfg.checkpoint_every > 0 && self.tokens_seen >= self.next_checkpoint {
                    out.checkpoint(&format!("ckpt-{}.ckpt", self.next_checkpoint), &self.params, &self.state)?;
                    self.next_checkpoint += cfg.checkpoint_every;
                }
            }

            let last = step == total_steps || self.tokens_seen >= cfg.token_budget;
            if last || (cfg.val_every > 0 && step.is_multiple_of(cfg.val_every)) {
                let val = validate_fn(&self.params)?;
                self.metrics.push(TrainMetrics {
                    step,
                    tokens_seen: self.tokens_seen,
                    lr,
                    bt_loss: loss.bt,
                    center_loss: loss.center,
                    total_loss: loss.total,
                    val,
                });
            }
        }
        if let Some(out) = self.out {
            out.checkpoint("final.ckpt", &self.params, &self.state)?;
            write_atomic(&out.0.join("metrics.csv"), metrics_csv(&self.metrics).as_bytes())?;
        }
        Ok(TrainOutcome {
            params: self.params,
            state: self.state,
            metrics: self.metrics,
            steps: step,
            tokens_seen: self.tokens_seen,
        })
    }
}

/// Trains the scorer on in-batch preference pairs.
///
/// Each step consumes one batch of `B` pairs and counts its prefix and suffix
/// tokens. Steps continue until `token_budget` tokens have been seen (always
/// at least one step); batches are reused cyclically when the data runs out.
pub fn train(
    config: &TrainConfig,
    init: ScorerParams,
    init_state: Option<OptimizerState>,
    pairs: &[PrefixSuffixPair],
    val_batches: &[Vec<PrefixSuffixPair>],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let batches = make_batches(pairs, config.batch_size, None)?;
    let lp = Loop::new(config, init, init_state, out.map(OutputDir))?;
    let n = batches.len();
    let tokens: Vec<u64> = batches
        .iter()
        .map(|b| b.iter().map(|p| p.token_count() as u64).sum())
        .collect();
    let shuffle = config.shuffle;
    let seed = config.seed;
    lp.run(
        n,
        |bi| tokens[bi],
        |params, bi| loss_and_gradient(params, &batches[bi], config.c, config.center_mode),
        |params| {
            if val_batches.is_empty() {
                Ok(ValidationStats::nan())
            } else {
                validate(params, val_batches)
            }
        },
        |epoch| {
            let mut order: Vec<usize> = (0..n).collect();
            if shuffle {
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch)));
            }
            order
        },
    )
}

/// An explicit preference example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triple {
    pub prompt: Vec<u32>,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
}

impl Triple {
    fn token_count(&self) -> u64 {
        (self.prompt.len() + self.chosen.len() + self.rejected.len()) as u64
    }
}

#[derive(Deserialize)]
struct TripleRecord {
    prompt: String,
    chosen: String,
    rejected: String,
}

/// Reads `{prompt, chosen, rejected}` JSON-lines and tokenizes each field.
pub fn parse_triples(content: &str, tokenizer: &Tokenizer) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for (n, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: TripleRecord =
            serde_json::from_str(line).map_err(|e| Error::format(format!("triples line {}: {e}", n + 1)))?;
        let t = Triple {
            prompt: tokenize(&r.prompt, tokenizer)?.tokens,
            chosen: tokenize(&r.chosen, tokenizer)?.tokens,
            rejected: tokenize(&r.rejected, tokenizer)?.tokens,
        };
        if t.prompt.is_empty() || t.chosen.is_empty() || t.rejected.is_empty() {
            return Err(Error::format(format!("triples line {}: empty field after tokenization", n + 1)));
        }
        out.push(t);
    }
    Ok(out)
}

/// Mean pairwise loss over a batch of triples plus `c` times the mean of
/// `s_chosen^2 + s_rejected^2`, with its gradient.
pub fn curated_loss_and_gradient(
    params: &ScorerParams,
    batch: &[Triple],
    c: f64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::domain("curated batch is empty"));
    }
    let b = batch.len();
    let prompts: Vec<&[u32]> = batch.iter().map(|t| t.prompt.as_slice()).collect();
    let responses: Vec<&[u32]> = batch
        .iter()
        .map(|t| t.chosen.as_slice())
        .chain(batch.iter().map(|t| t.rejected.as_slice()))
        .collect();
    let enc = params.encode_batch(&prompts, &responses)?;
    let mut bt = 0.0;
    let mut center = 0.0;
    let mut entries = Vec::with_capacity(2 * b);
    let inv = 1.0 / b as f64;
    for i in 0..b {
        let sc = params.head(&enc.u[i], &enc.v[i]);
        let sr = params.head(&enc.u[i], &enc.v[b + i]);
        if !(sc.is_finite() && sr.is_finite()) {
            return Err(Error::numerical(format!("non-finite score for triple {i}")));
        }
        bt += pairwise_bt_loss(sc, sr) * inv;
        center += (sc * sc + sr * sr) * inv;
        let dm = -sigmoid(-(sc - sr)) * inv;
        entries.push((i, i, dm + c * 2.0 * sc * inv));
        entries.push((i, b + i, -dm + c * 2.0 * sr * inv));
    }
    let grad = params.backprop(&prompts, &responses, &enc, &entries);
    check_gradient(params, &grad)?;
    Ok((
        LossBreakdown {
            bt,
            center,
            c,
            total: bt + c * center,
        },
        grad,
    ))
}

/// Chosen-vs-rejected metrics reported in the same columns as in-batch
/// validation: `rank_acc` is the fraction with `s_chosen > s_rejected`.
pub fn validate_curated(params: &ScorerParams, triples: &[Triple]) -> Result<ValidationStats> {
    if triples.is_empty() {
        return Err(Error::domain("curated validation needs at least one triple"));
    }
    let mut correct = 0;
    let (mut pos, mut neg, mut sq) = (0.0, 0.0, 0.0);
    for t in triples {
        let sc = params.score_pair(&t.prompt, &t.chosen)?;
        let sr = params.score_pair(&t.prompt, &t.rejected)?;
        if sc > sr {
            correct += 1;
        }
        pos += sc;
        neg += sr;
        sq += sc * sc + sr * sr;
    }
    let n = triples.len() as f64;
    Ok(ValidationStats {
        rank_acc: correct as f64 / n,
        mean_pos: pos / n,
        mean_neg: neg / n,
        margin: (pos - neg) / n,
        mean_sq_score: sq / (2.0 * n),
        rows: triples.len(),
    })
}

/// Continues training on explicit chosen/rejected triples, optionally from an
/// existing checkpoint's parameters and optimizer state.
pub fn train_curated(
    config: &TrainConfig,
    init: ScorerParams,
    init_state: Option<OptimizerState>,
    triples: &[Triple],
    val: &[Triple],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.max_steps == Some(0) {
        let n = init.param_count();
        let state = init_state.unwrap_or_else(|| OptimizerState::new(n));
        if let Some(dir) = out {
            save_checkpoint(&init, Some(&state), &dir.join("final.ckpt"))?;
            write_atomic(&dir.join("metrics.csv"), metrics_csv(&[]).as_bytes())?;
        }
        return Ok(TrainOutcome {
            params: init,
            state,
            metrics: Vec::new(),
            steps: 0,
            tokens_seen: 0,
        });
    }
    let b = config.batch_size.min(triples.len());
    if b == 0 {
        return Err(Error::config("no curated triples"));
    }
    let batches: Vec<&[Triple]> = triples.chunks_exact(b).collect();
    let n = batches.len();
    let tokens: Vec<u64> = batches.iter().map(|bt| bt.iter().map(Triple::token_count).sum()).collect();
    let lp = Loop::new(config, init, init_state, out.map(OutputDir))?;
    let (shuffle, seed) = (config.shuffle, config.seed);
    lp.run(
        n,
        |bi| tokens[bi],
        |params, bi| curated_loss_and_gradient(params, batches[bi], config.c),
        |params| {
            if val.is_empty() {
                Ok(ValidationStats::nan())
            } else {
                validate_curated(params, val)
            }
        },
        |epoch| {
            let mut order: Vec<usize> = (0..n).collect();
            if shuffle {
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch)));
            }
            order
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TokenSequence;
    use crate::scorer::{init_params, ScoreMatrix, ScorerConfig};
    use crate::splitter::PairOrigin;

    fn pair(i: u32) -> PrefixSuffixPair {
        PrefixSuffixPair {
            prefix: TokenSequence::new(vec![i % 16, (i + 1) % 16], 16).unwrap(),
            suffix: TokenSequence::new(vec![(i + 2) % 16, (i + 3) % 16, (i + 5) % 16], 16).unwrap(),
            origin: PairOrigin {
                source: "t".into(),
                index: i as usize,
                offset: 0,
            },
        }
    }

    #[test]
    fn batching_arithmetic() {
        let pairs: Vec<_> = (0..70).map(pair).collect();
        let b = make_batches(&pairs, 32, None).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[1][0], pairs[32]);
        assert_eq!(make_batches(&pairs[..2], 2, None).unwrap().len(), 1);
        assert!(matches!(make_batches(&pairs[..3], 4, None), Err(Error::Config(_))));
        let s1 = make_batches(&pairs, 8, Some(4)).unwrap();
        let s2 = make_batches(&pairs, 8, Some(4)).unwrap();
        assert_eq!(s1, s2);
        assert_ne!(s1, make_batches(&pairs, 8, None).unwrap());
    }

    #[test]
    fn warmup_schedule() {
        // 1000 total steps, ratio 0.05 -> 50 warmup steps
        assert!((lr_schedule(25, 1000, 1.0, 0.05) - 0.5).abs() < 1e-15);
        assert_eq!(lr_schedule(50, 1000, 2.0, 0.05), 2.0);
        assert_eq!(lr_schedule(700, 1000, 2.0, 0.05), 2.0);
        assert_eq!(lr_schedule(0, 1000, 2.0, 0.0), 2.0);
    }

    #[test]
    fn adam_zero_grad_and_first_step() {
        let mut st = OptimizerState::new(2);
        let mut p = vec![1.0, -2.0];
        adam_step(&mut st, &mut p, &[0.0, 0.0], 0.1, 0.9, 0.95, 1e-8).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.step, 1);

        let mut st = OptimizerState::new(1);
        let mut p = vec![0.0];
        adam_step(&mut st, &mut p, &[1.0], 0.1, 0.9, 0.95, 1e-8).unwrap();
        // m_hat = 1, v_hat = 1
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);

        assert!(matches!(
            adam_step(&mut st, &mut p, &[f64::NAN], 0.1, 0.9, 0.95, 1e-8),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn validation_rules() {
        let zero = ScorerParams::zeros(&ScorerConfig::bilinear(16, 4));
        let batch: Vec<_> = (0..4).map(pair).collect();
        let v = validate(&zero, &[batch]).unwrap();
        assert_eq!(v.rank_acc, 0.0);
        assert_eq!(v.margin, 0.0);
        let eye = ScoreMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(row_rank_correct(eye.row(0), 0) && row_rank_correct(eye.row(1), 1));
        assert!(!row_rank_correct(&[1.0, 1.0], 0));
    }

    fn small_config(budget: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            base_lr: 0.05,
            token_budget: budget,
            warmup_ratio: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn token_budget_accounting() {
        let pairs: Vec<_> = (0..16).map(pair).collect();
        let init = init_params(&ScorerConfig::bilinear(16, 4), 1).unwrap();
        // per step: 4 pairs * 5 tokens
        let out = train(&small_config(40), init.clone(), None, &pairs, &[], None).unwrap();
        assert_eq!(out.steps, 2);
        assert_eq!(out.tokens_seen, 40);
        let out = train(&small_config(1), init.clone(), None, &pairs, &[], None).unwrap();
        assert_eq!(out.steps, 1);
        // 4 batches available, 10 steps requested: cycles
        let out = train(&small_config(200), init, None, &pairs, &[], None).unwrap();
        assert_eq!(out.steps, 10);
        assert_eq!(out.state.step, 10);
    }

    #[test]
    fn training_writes_outputs_deterministically() {
        let pairs: Vec<_> = (0..16).map(pair).collect();
        let val = make_batches(&pairs[..8], 4, None).unwrap();
        let init = init_params(&ScorerConfig::bilinear(16, 4), 1).unwrap();
        let mut cfg = small_config(200);
        cfg.checkpoint_every = 80;
        cfg.val_every = 3;
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = train(&cfg, init.clone(), None, &pairs, &val, Some(d1.path())).unwrap();
        train(&cfg, init, None, &pairs, &val, Some(d2.path())).unwrap();
        for f in ["metrics.csv", "final.ckpt", "ckpt-80.ckpt", "ckpt-160.ckpt"] {
            assert_eq!(
                std::fs::read(d1.path().join(f)).unwrap(),
                std::fs::read(d2.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let csv = std::fs::read_to_string(d1.path().join("metrics.csv")).unwrap();
        assert!(csv.starts_with(METRICS_HEADER));
        // rows at steps 3, 6, 9 and the final step 10
        assert_eq!(a.metrics.iter().map(|m| m.step).collect::<Vec<_>>(), vec![3, 6, 9, 10]);
    }

    fn triple(p: u32, c: u32, r: u32) -> Triple {
        Triple {
            prompt: vec![p],
            chosen: vec![c],
            rejected: vec![r],
        }
    }

    #[test]
    fn curated_loss_values() {
        let params = init_params(&ScorerConfig::bilinear(16, 4), 2).unwrap();
        let (l, g) = curated_loss_and_gradient(&params, &[triple(1, 3, 3)], 0.0).unwrap();
        assert!((l.bt - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(g.iter().all(|x| *x == 0.0));

        // d = 1 bilinear: token 0 -> 1, token 1 -> 2, token 2 -> 0, W = 1, b = 0
        let p = ScorerParams {
            config: ScorerConfig::bilinear(3, 1),
            theta: vec![1.0, 2.0, 0.0, 1.0, 0.0],
        };
        let (l, _) = curated_loss_and_gradient(&p, &[triple(0, 1, 2)], 0.0).unwrap();
        assert!((l.bt - pairwise_bt_loss(2.0, 0.0)).abs() < 1e-15);
    }

    #[test]
    fn curated_zero_steps_is_noop() {
        let params = init_params(&ScorerConfig::bilinear(16, 4), 2).unwrap();
        let cfg = TrainConfig {
            max_steps: Some(0),
            ..small_config(100)
        };
        let out = train_curated(&cfg, params.clone(), None, &[triple(1, 2, 3)], &[], None).unwrap();
        assert_eq!(out.params, params);
        assert_eq!(out.steps, 0);
    }

    #[test]
    fn curated_training_separates_pairs() {
        let params = init_params(&ScorerConfig::bilinear(16, 4), 2).unwrap();
        let triples: Vec<_> = (0..8).map(|i| triple(i, i, (i + 8) % 16)).collect();
        let cfg = TrainConfig {
            batch_size: 4,
            base_lr: 0.05,
            warmup_ratio: 0.0,
            token_budget: 3 * 8 * 50,
            ..TrainConfig::default()
        };
        let before = validate_curated(&params, &triples).unwrap();
        let out = train_curated(&cfg, params, None, &triples, &triples, None).unwrap();
        assert_eq!(out.steps, 100);
        let after = out.metrics.last().unwrap().val;
        assert!(after.margin > before.margin);
        assert_eq!(after.rank_acc, 1.0);
    }

    #[test]
    fn triples_parse() {
        let t = parse_triples(
            "{\"prompt\":\"ab\",\"chosen\":\"c\",\"rejected\":\"d\"}\n",
            &Tokenizer::byte(),
        )
        .unwrap();
        assert_eq!(t[0], Triple { prompt: vec![97, 98], chosen: vec![99], rejected: vec![100] });
        assert!(parse_triples("{\"prompt\":\"\",\"chosen\":\"c\",\"rejected\":\"d\"}", &Tokenizer::byte()).is_err());
    }
}
