//! Group-relative policy optimization at toy scale: per-group reward
//! standardization, the clipped surrogate with a squared log-ratio penalty
//! toward a frozen reference, and a tabular softmax actor trained against a
//! reward model.

use std::fmt::Write as _;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{sample_keyed_tokens, SyntheticSpec};
use crate::error::{Error, Result};
use crate::scorer::ScorerParams;
use crate::trainer::{adam_step, OptimizerState};

pub const REWARD_CURVE_HEADER: &str = "epoch,mean_oracle_acc,mean_rm_reward";

/// `A_i = (r_i - mean) / (std + eps)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Vec<f64> {
    let k = rewards.len() as f64;
    let mu = rewards.iter().sum::<f64>() / k;
    let var = rewards.iter().map(|r| (r - mu) * (r - mu)).sum::<f64>() / k;
    let denom = var.sqrt() + eps;
    rewards.iter().map(|r| (r - mu) / denom).collect()
}

fn check_aligned(a: &[Vec<f64>], b: &[Vec<f64>], what: &str) -> Result<usize> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::domain(format!("{what}: log-prob arrays are not aligned")));
    }
    let n: usize = a.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(Error::domain(format!("{what}: no tokens")));
    }
    Ok(n)
}

/// Per-token clipped objective term and its derivative in `logp_new`.
fn surrogate_term(logp_new: f64, logp_old: f64, a: f64, clip: f64) -> Result<(f64, f64)> {
    let rho = (logp_new - logp_old).exp();
    if !rho.is_finite() {
        return Err(Error::numerical(format!("non-finite probability ratio (log ratio {})", logp_new - logp_old)));
    }
    let unclipped = rho * a;
    let clipped = rho.clamp(1.0 - clip, 1.0 + clip) * a;
    if unclipped <= clipped {
        Ok((-unclipped, -unclipped))
    } else {
        Ok((-clipped, 0.0))
    }
}

/// Mean over all tokens of `-min(rho A, clamp(rho) A)`, with one advantage
/// per completion.
pub fn clipped_surrogate(logp_new: &[Vec<f64>], logp_old: &[Vec<f64>], adv: &[f64], clip: f64) -> Result<f64> {
    let n = check_aligned(logp_new, logp_old, "surrogate")?;
    if adv.len() != logp_new.len() {
        return Err(Error::domain("surrogate: one advantage per completion required"));
    }
    if !(clip > 0.0) {
        return Err(Error::config(format!("clip must be > 0, got {clip}")));
    }
    let mut total = 0.0;
    for ((new, old), &a) in logp_new.iter().zip(logp_old).zip(adv) {
        for (&ln, &lo) in new.iter().zip(old) {
            total += surrogate_term(ln, lo, a, clip)?.0;
        }
    }
    Ok(total / n as f64)
}

/// Mean over tokens of `0.5 * (logp_new - logp_ref)^2`.
pub fn kl_mse(logp_new: &[Vec<f64>], logp_ref: &[Vec<f64>]) -> Result<f64> {
    let n = check_aligned(logp_new, logp_ref, "kl")?;
    let s: f64 = logp_new
        .iter()
        .zip(logp_ref)
        .flat_map(|(a, b)| a.iter().zip(b))
        .map(|(x, y)| 0.5 * (x - y) * (x - y))
        .sum();
    Ok(s / n as f64)
}

/// Tabular softmax actor: one logit row per prompt state, tokens sampled
/// independently of position.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    pub n_states: usize,
    pub vocab_size: usize,
    pub temperature: f64,
    pub logits: Vec<f64>,
}

impl ToyPolicy {
    pub fn uniform(n_states: usize, vocab_size: usize, temperature: f64) -> Result<Self> {
        let p = ToyPolicy {
            n_states,
            vocab_size,
            temperature,
            logits: vec![0.0; n_states * vocab_size],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.vocab_size < 2 {
            return Err(Error::config("toy policy needs >= 1 state and vocab >= 2"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.logits.len() != self.n_states * self.vocab_size {
            return Err(Error::config("logit table has the wrong size"));
        }
        if let Some(k) = self.logits.iter().position(|x| !x.is_finite()) {
            return Err(Error::numerical(format!("policy logit {k} is non-finite")));
        }
        Ok(())
    }

    fn row(&self, state: usize) -> &[f64] {
        &self.logits[state * self.vocab_size..(state + 1) * self.vocab_size]
    }

    /// Log-probabilities of every token in `state`.
    pub fn log_probs(&self, state: usize) -> Vec<f64> {
        let z: Vec<f64> = self.row(state).iter().map(|x| x / self.temperature).collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        z.iter().map(|x| x - lse).collect()
    }

    pub fn probs(&self, state: usize) -> Vec<f64> {
        self.log_probs(state).into_iter().map(f64::exp).collect()
    }

    pub fn sample<R: Rng>(&self, state: usize, len: usize, rng: &mut R) -> Result<Vec<u32>> {
        let dist = WeightedIndex::new(self.probs(state))
            .map_err(|e| Error::numerical(format!("degenerate policy in state {state}: {e}")))?;
        Ok((0..len).map(|_| dist.sample(rng) as u32).collect())
    }

    pub fn token_log_probs(&self, state: usize, tokens: &[u32]) -> Vec<f64> {
        let lp = self.log_probs(state);
        tokens.iter().map(|&t| lp[t as usize]).collect()
    }
}

/// One prompt's group of sampled completions with rewards, advantages and the
/// behaviour/reference log-probs recorded at sampling time.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRollout {
    pub state: usize,
    pub prompt: Vec<u32>,
    pub completions: Vec<Vec<u32>>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub logp_old: Vec<Vec<f64>>,
    pub logp_ref: Vec<Vec<f64>>,
}

impl GroupRollout {
    pub fn validate(&self) -> Result<()> {
        let k = self.completions.len();
        if k < 2 {
            return Err(Error::domain(format!("group needs K >= 2 completions, got {k}")));
        }
        let lens_ok = |arr: &[Vec<f64>]| arr.len() == k && arr.iter().zip(&self.completions).all(|(a, c)| a.len() == c.len());
        if self.rewards.len() != k || self.advantages.len() != k || !lens_ok(&self.logp_old) || !lens_ok(&self.logp_ref) {
            return Err(Error::domain("rollout arrays do not align with completions"));
        }
        Ok(())
    }
}

/// Surrogate plus `lambda` times the penalty, averaged over rollouts, with
/// log-probs of the completions under `policy`.
pub fn actor_loss(policy: &ToyPolicy, rollouts: &[GroupRollout], clip: f64, lambda: f64) -> Result<f64> {
    Ok(actor_loss_parts(policy, rollouts, clip, lambda)?.0)
}

/// Returns `(loss, mean surrogate, mean penalty)`.
pub fn actor_loss_parts(policy: &ToyPolicy, rollouts: &[GroupRollout], clip: f64, lambda: f64) -> Result<(f64, f64, f64)> {
    if rollouts.is_empty() {
        return Err(Error::domain("actor loss needs at least one rollout"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::config(format!("lambda must be >= 0, got {lambda}")));
    }
    let (mut sur, mut kl) = (0.0, 0.0);
    for r in rollouts {
        r.validate()?;
        let new: Vec<Vec<f64>> = r.completions.iter().map(|c| policy.token_log_probs(r.state, c)).collect();
        sur += clipped_surrogate(&new, &r.logp_old, &r.advantages, clip)?;
        kl += kl_mse(&new, &r.logp_ref)?;
    }
    let n = rollouts.len() as f64;
    let (sur, kl) = (sur / n, kl / n);
    Ok((sur + lambda * kl, sur, kl))
}

/// Actor loss and its gradient with respect to the policy logits.
pub fn actor_loss_and_grad(
    policy: &ToyPolicy,
    rollouts: &[GroupRollout],
    clip: f64,
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    let loss = actor_loss(policy, rollouts, clip, lambda)?;
    let v = policy.vocab_size;
    let mut grad = vec![0.0; policy.logits.len()];
    let per_rollout = 1.0 / rollouts.len() as f64;
    for r in rollouts {
        let lp = policy.log_probs(r.state);
        let p: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
        let n_tok: usize = r.completions.iter().map(Vec::len).sum();
        let w = per_rollout / n_tok as f64;
        // d loss / d logp for each token, accumulated per token id
        let mut dlogp = vec![0.0; v];
        for (ci, c) in r.completions.iter().enumerate() {
            for (t, &y) in c.iter().enumerate() {
                let ln = lp[y as usize];
                let (_, d_sur) = surrogate_term(ln, r.logp_old[ci][t], r.advantages[ci], clip)?;
                dlogp[y as usize] += w * (d_sur + lambda * (ln - r.logp_ref[ci][t]));
            }
        }
        // logp_y = z_y / T - lse(z / T): d logp_y / d z_k = (1[k=y] - p_k) / T
        let total: f64 = dlogp.iter().sum();
        let row = &mut grad[r.state * v..(r.state + 1) * v];
        for k in 0..v {
            row[k] += (dlogp[k] - total * p[k]) / policy.temperature;
        }
    }
    if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::numerical(format!("non-finite policy gradient at logit {k}")));
    }
    Ok((loss, grad))
}

pub trait RewardModel: Sync {
    fn reward(&self, prompt: &[u32], completion: &[u32]) -> Result<f64>;
}

impl RewardModel for ScorerParams {
    fn reward(&self, prompt: &[u32], completion: &[u32]) -> Result<f64> {
        self.score_pair(prompt, completion)
    }
}

/// Control reward that ignores its input.
#[derive(Debug, Clone, Copy)]
pub struct ConstantReward(pub f64);

impl RewardModel for ConstantReward {
    fn reward(&self, _: &[u32], _: &[u32]) -> Result<f64> {
        Ok(self.0)
    }
}

/// Keyed completion task: each prompt carries a key and a completion is
/// correct iff it contains that key token.
#[derive(Debug, Clone, PartialEq)]
pub struct GrpoTask {
    pub prompts: Vec<Vec<u32>>,
    pub keys: Vec<u32>,
    pub vocab_size: u32,
}

pub fn gen_grpo_task(corpus: &SyntheticSpec, n_prompts: usize, prompt_len: usize) -> Result<GrpoTask> {
    corpus.validate()?;
    if n_prompts == 0 || prompt_len == 0 {
        return Err(Error::config("GRPO task needs prompts of positive length"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(corpus.seed);
    let mut prompts = Vec::with_capacity(n_prompts);
    let mut keys = Vec::with_capacity(n_prompts);
    for _ in 0..n_prompts {
        let key = rng.gen_range(1..=corpus.n_keys);
        prompts.push(sample_keyed_tokens(&mut rng, corpus, key, prompt_len));
        keys.push(key);
    }
    Ok(GrpoTask {
        prompts,
        keys,
        vocab_size: corpus.vocab_size,
    })
}

impl GrpoTask {
    /// Probability that a completion of `len` tokens contains the prompt's
    /// key, averaged over prompts.
    pub fn expected_oracle_acc(&self, policy: &ToyPolicy, len: usize) -> f64 {
        let total: f64 = self
            .keys
            .iter()
            .enumerate()
            .map(|(s, &k)| 1.0 - (1.0 - policy.probs(s)[k as usize]).powi(len as i32))
            .sum();
        total / self.keys.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoConfig {
    /// Completions per prompt.
    pub k: usize,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    /// Optimizer steps per epoch on the same rollouts.
    pub inner_steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub eps: f64,
    pub completion_len: usize,
    pub temperature: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            k: 8,
            lambda: 0.1,
            clip: 0.2,
            epochs: 5,
            inner_steps: 4,
            lr: 0.2,
            seed: 2025,
            eps: 1e-6,
            completion_len: 16,
            temperature: 1.0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config(format!("K must be >= 2, got {}", self.k)));
        }
        if !(self.lambda >= 0.0) || !(self.clip > 0.0) || !(self.lr >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::config("lambda and lr must be >= 0, clip and eps > 0"));
        }
        if self.completion_len == 0 {
            return Err(Error::config("completion_len must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_oracle_acc: f64,
    pub mean_rm_reward: f64,
}

#[derive(Debug, Clone)]
pub struct GrpoOutcome {
    pub policy: ToyPolicy,
    pub curve: Vec<EpochStats>,
}

pub fn reward_curve_csv(curve: &[EpochStats]) -> String {
    let mut out = String::from(REWARD_CURVE_HEADER);
    out.push('\n');
    for e in curve {
        writeln!(out, "{},{},{}", e.epoch, e.mean_oracle_acc, e.mean_rm_reward).unwrap();
    }
    out
}

fn rollout_seed(seed: u64, epoch: usize, state: usize) -> u64 {
    seed ^ ((epoch as u64) << 40) ^ (state as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Samples one group per prompt from `behaviour` and standardizes rewards.
pub fn collect_rollouts<M: RewardModel>(
    behaviour: &ToyPolicy,
    reference: &ToyPolicy,
    task: &GrpoTask,
    reward: &M,
    cfg: &GrpoConfig,
    epoch: usize,
) -> Result<Vec<GroupRollout>> {
    (0..task.prompts.len())
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(rollout_seed(cfg.seed, epoch, s));
            let completions = (0..cfg.k)
                .map(|_| behaviour.sample(s, cfg.completion_len, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let rewards = completions
                .iter()
                .map(|c| reward.reward(&task.prompts[s], c))
                .collect::<Result<Vec<_>>>()?;
            Ok(GroupRollout {
                state: s,
                prompt: task.prompts[s].clone(),
                advantages: group_advantages(&rewards, cfg.eps),
                logp_old: completions.iter().map(|c| behaviour.token_log_probs(s, c)).collect(),
                logp_ref: completions.iter().map(|c| reference.token_log_probs(s, c)).collect(),
                completions,
                rewards,
            })
        })
        .collect()
}

/// Trains a uniform toy policy against `reward`. Entry 0 of the curve is the
/// initial policy; entry `e` is the policy after epoch `e`. Oracle accuracy
/// is the exact probability of emitting the key; reward is averaged over the
/// rollouts sampled from that policy.
pub fn grpo_train_toy<M: RewardModel>(cfg: &GrpoConfig, reward: &M, task: &GrpoTask) -> Result<GrpoOutcome> {
    cfg.validate()?;
    let mut policy = ToyPolicy::uniform(task.prompts.len(), task.vocab_size as usize, cfg.temperature)?;
    let reference = policy.clone();
    let mut state = OptimizerState::new(policy.logits.len());
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    let mean_reward = |r: &[GroupRollout]| {
        r.iter().flat_map(|g| &g.rewards).sum::<f64>() / (r.len() * cfg.k) as f64
    };
    let mut rollouts = collect_rollouts(&policy, &reference, task, reward, cfg, 0)?;
    curve.push(EpochStats {
        epoch: 0,
        mean_oracle_acc: task.expected_oracle_acc(&policy, cfg.completion_len),
        mean_rm_reward: mean_reward(&rollouts),
    });
    for epoch in 1..=cfg.epochs {
        for _ in 0..cfg.inner_steps {
            let (_, grad) = actor_loss_and_grad(&policy, &rollouts, cfg.clip, cfg.lambda)?;
            adam_step(&mut state, &mut policy.logits, &grad, cfg.lr, 0.9, 0.95, 1e-8)?;
            policy.validate()?;
        }
        rollouts = collect_rollouts(&policy, &reference, task, reward, cfg, epoch)?;
        curve.push(EpochStats {
            epoch,
            mean_oracle_acc: task.expected_oracle_acc(&policy, cfg.completion_len),
            mean_rm_reward: mean_reward(&rollouts),
        });
    }
    Ok(GrpoOutcome { policy, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[0.7; 5], 1e-6), vec![0.0; 5]);
        let a = group_advantages(&[1.0, 2.0, 3.0], 1e-6);
        let expect = 1.0 / ((2.0f64 / 3.0).sqrt() + 1e-6);
        assert!((a[0] + expect).abs() < 1e-12 && a[1] == 0.0 && (a[2] - expect).abs() < 1e-12);
        assert!((a[2] - 1.224_744).abs() < 1e-5);
    }

    #[test]
    fn surrogate_examples() {
        let lp = vec![vec![-1.0, -2.0], vec![-0.5]];
        let adv = [1.5, -0.3];
        let v = clipped_surrogate(&lp, &lp, &adv, 0.2).unwrap();
        // mean over tokens of -A: (-1.5 - 1.5 + 0.3) / 3
        assert!((v - (-2.7 / 3.0)).abs() < 1e-15);
        let new = vec![vec![2f64.ln()]];
        let old = vec![vec![0.0]];
        assert!((clipped_surrogate(&new, &old, &[1.0], 0.2).unwrap() + 1.2).abs() < 1e-15);
        assert_eq!(clipped_surrogate(&lp, &lp, &[0.0, 0.0], 0.2).unwrap(), 0.0);
        assert!(matches!(
            clipped_surrogate(&[vec![1000.0]], &[vec![0.0]], &[1.0], 0.2),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn kl_examples() {
        let a = vec![vec![-1.0, -2.0]];
        assert_eq!(kl_mse(&a, &a).unwrap(), 0.0);
        let b = vec![vec![-1.3, -2.3]];
        assert!((kl_mse(&a, &b).unwrap() - 0.5 * 0.09).abs() < 1e-15);
    }

    fn small_rollouts(policy: &ToyPolicy, seed: u64) -> Vec<GroupRollout> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perturbed = ToyPolicy {
            logits: policy.logits.iter().map(|x| x + rng.gen_range(-0.3..0.3)).collect(),
            ..policy.clone()
        };
        let reference = ToyPolicy {
            logits: policy.logits.iter().map(|x| x + rng.gen_range(-0.3..0.3)).collect(),
            ..policy.clone()
        };
        (0..policy.n_states)
            .map(|s| {
                let completions: Vec<Vec<u32>> = (0..3).map(|_| perturbed.sample(s, 4, &mut rng).unwrap()).collect();
                let rewards: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                GroupRollout {
                    state: s,
                    prompt: vec![1],
                    advantages: group_advantages(&rewards, 1e-6),
                    logp_old: completions.iter().map(|c| perturbed.token_log_probs(s, c)).collect(),
                    logp_ref: completions.iter().map(|c| reference.token_log_probs(s, c)).collect(),
                    completions,
                    rewards,
                }
            })
            .collect()
    }

    #[test]
    fn actor_loss_linear_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = ToyPolicy {
            logits: (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ..ToyPolicy::uniform(2, 6, 1.0).unwrap()
        };
        let r = small_rollouts(&policy, 2);
        let (_, sur, kl) = actor_loss_parts(&policy, &r, 0.2, 0.0).unwrap();
        assert_eq!(actor_loss(&policy, &r, 0.2, 0.0).unwrap(), sur);
        let l1 = actor_loss(&policy, &r, 0.2, 0.1).unwrap();
        let l2 = actor_loss(&policy, &r, 0.2, 0.2).unwrap();
        assert!(((l2 - sur) - 2.0 * (l1 - sur)).abs() < 1e-14);
        assert!(kl > 0.0);
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let policy = ToyPolicy {
                logits: (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                ..ToyPolicy::uniform(3, 5, 0.7).unwrap()
            };
            let r = small_rollouts(&policy, seed + 100);
            let (_, g) = actor_loss_and_grad(&policy, &r, 0.2, 0.1).unwrap();
            let h = 1e-5;
            for k in 0..policy.logits.len() {
                let mut p = policy.clone();
                p.logits[k] += h;
                let fp = actor_loss(&p, &r, 0.2, 0.1).unwrap();
                p.logits[k] -= 2.0 * h;
                let fm = actor_loss(&p, &r, 0.2, 0.1).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-6 + 1e-4 * fd.abs(), "seed {seed} k {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn clip_region_is_flat() {
        // rho = 2 > 1.2 with A > 0: clamped branch is active
        let (v, d) = surrogate_term(2f64.ln(), 0.0, 1.0, 0.2).unwrap();
        assert_eq!((v, d), (-1.2, 0.0));
        // rho = 0.5 < 0.8 with A < 0: clamped branch is active
        let (_, d) = surrogate_term(0.5f64.ln(), 0.0, -1.0, 0.2).unwrap();
        assert_eq!(d, 0.0);
        // inside the trust region the gradient is -rho A
        let (_, d) = surrogate_term(1.1f64.ln(), 0.0, 2.0, 0.2).unwrap();
        assert!((d + 2.2).abs() < 1e-12);
    }

    fn task() -> GrpoTask {
        let spec = SyntheticSpec {
            n_docs: 0,
            vocab_size: 16,
            n_keys: 4,
            key_density: 0.4,
            doc_len: 1,
            seed: 9,
        };
        gen_grpo_task(&spec, 4, 12).unwrap()
    }

    #[test]
    fn constant_reward_and_zero_lr_leave_policy_unchanged() {
        let t = task();
        let cfg = GrpoConfig::default();
        let out = grpo_train_toy(&cfg, &ConstantReward(0.3), &t).unwrap();
        assert!(out.policy.logits.iter().all(|&x| x == 0.0));
        let cfg0 = GrpoConfig { lr: 0.0, ..cfg };
        let rm = ScorerParams::zeros(&crate::scorer::ScorerConfig::bilinear(16, 2));
        let out = grpo_train_toy(&cfg0, &rm, &t).unwrap();
        assert!(out.policy.logits.iter().all(|&x| x == 0.0));
        let accs: Vec<f64> = out.curve.iter().map(|e| e.mean_oracle_acc).collect();
        assert!(accs.iter().all(|&a| a == accs[0]));
        assert_eq!(out.curve.len(), 6);
    }

    #[test]
    fn key_reward_improves_policy() {
        struct KeyReward(Vec<u32>, Vec<Vec<u32>>);
        impl RewardModel for KeyReward {
            fn reward(&self, prompt: &[u32], completion: &[u32]) -> Result<f64> {
                let s = self.1.iter().position(|p| p == prompt).unwrap();
                Ok(completion.iter().filter(|&&t| t == self.0[s]).count() as f64)
            }
        }
        let t = task();
        let rm = KeyReward(t.keys.clone(), t.prompts.clone());
        let cfg = GrpoConfig { epochs: 10, ..GrpoConfig::default() };
        let a = grpo_train_toy(&cfg, &rm, &t).unwrap();
        let b = grpo_train_toy(&cfg, &rm, &t).unwrap();
        assert_eq!(a.policy, b.policy);
        assert!(a.curve.last().unwrap().mean_oracle_acc > a.curve[0].mean_oracle_acc + 0.1);
        assert!(reward_curve_csv(&a.curve).starts_with("epoch,mean_oracle_acc,mean_rm_reward\n0,"));
    }

    proptest! {
        #[test]
        fn advantages_are_standardized(rewards in proptest::collection::vec(-10.0f64..10.0, 2..16)) {
            let eps = 1e-6;
            let a = group_advantages(&rewards, eps);
            let k = a.len() as f64;
            let mean = a.iter().sum::<f64>() / k;
            let std = (a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / k).sqrt();
            let mu = rewards.iter().sum::<f64>() / k;
            let sigma = (rewards.iter().map(|r| (r - mu) * (r - mu)).sum::<f64>() / k).sqrt();
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((std - sigma / (sigma + eps)).abs() < 1e-9);
        }

        #[test]
        fn advantages_affine_invariant(rewards in proptest::collection::vec(-10.0f64..10.0, 2..16), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let spread = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - rewards.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 1e-3);
            let x = group_advantages(&rewards, 1e-12);
            let mapped: Vec<f64> = rewards.iter().map(|r| a * r + b).collect();
            let y = group_advantages(&mapped, 1e-12);
            for (p, q) in x.iter().zip(&y) {
                prop_assert!((p - q).abs() < 1e-6);
            }
        }

        #[test]
        fn kl_nonnegative(a in proptest::collection::vec(-5.0f64..0.0, 1..10), shift in -2.0f64..2.0) {
            let b: Vec<f64> = a.iter().map(|x| x + shift).collect();
            let v = kl_mse(std::slice::from_ref(&a), &[b]).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert_eq!(v == 0.0, shift == 0.0);
        }
    }
}
