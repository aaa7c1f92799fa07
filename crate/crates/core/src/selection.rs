//! Best-of-N reranking: scoring candidate pools, top-score selection, accuracy
//! curves over nested N, MAP and its gain over a baseline scorer.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_keyed_tokens, SyntheticSpec};
use crate::error::{Error, Result};
use crate::scorer::ScorerParams;

pub const DEFAULT_NS: [usize; 6] = [1, 2, 4, 8, 16, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoNCandidateSet {
    pub prompt_tokens: Vec<u32>,
    pub candidates: Vec<Vec<u32>>,
    pub correct: Vec<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scores: Vec<f64>,
}

impl BoNCandidateSet {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() != self.correct.len() {
            return Err(Error::format(format!(
                "{} candidates but {} correctness flags",
                self.candidates.len(),
                self.correct.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoNCurve {
    pub ns: Vec<usize>,
    pub accuracy: Vec<f64>,
}

impl BoNCurve {
    pub fn new(ns: Vec<usize>, accuracy: Vec<f64>) -> Result<Self> {
        if ns.len() != accuracy.len() || ns.is_empty() {
            return Err(Error::domain("curve needs one accuracy per N and at least one N"));
        }
        check_ns(&ns)?;
        Ok(BoNCurve { ns, accuracy })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("N,accuracy\n");
        for (n, a) in self.ns.iter().zip(&self.accuracy) {
            writeln!(out, "{n},{a}").unwrap();
        }
        writeln!(out, "MAP,{}", map(self)).unwrap();
        out
    }
}

fn check_ns(ns: &[usize]) -> Result<()> {
    if ns.first() == Some(&0) || ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(format!("N values must be positive and strictly increasing, got {ns:?}")));
    }
    Ok(())
}

/// Fills `scores` with the scorer's value for each candidate.
pub fn score_candidates(params: &ScorerParams, set: &BoNCandidateSet) -> Result<BoNCandidateSet> {
    set.validate()?;
    if set.candidates.is_empty() {
        return Err(Error::domain("candidate set is empty"));
    }
    let scores = set
        .candidates
        .iter()
        .map(|c| params.score_pair(&set.prompt_tokens, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(BoNCandidateSet {
        scores,
        ..set.clone()
    })
}

pub fn score_all(params: &ScorerParams, sets: &[BoNCandidateSet]) -> Result<Vec<BoNCandidateSet>> {
    sets.par_iter().map(|s| score_candidates(params, s)).collect()
}

/// Index of the highest of the first `n` scores; ties go to the lowest index.
pub fn bon_select(scores: &[f64], n: usize) -> Result<usize> {
    if n == 0 || n > scores.len() {
        return Err(Error::domain(format!("N = {n} outside 1..={}", scores.len())));
    }
    let mut best = 0;
    for k in 1..n {
        if scores[k] > scores[best] {
            best = k;
        }
    }
    Ok(best)
}

pub fn bon_curve(sets: &[BoNCandidateSet], ns: &[usize]) -> Result<BoNCurve> {
    check_ns(ns)?;
    if sets.is_empty() {
        return Err(Error::domain("no candidate sets"));
    }
    let max_n = *ns.last().unwrap_or(&0);
    for (i, s) in sets.iter().enumerate() {
        s.validate()?;
        if s.scores.len() != s.candidates.len() {
            return Err(Error::domain(format!("set {i} has not been scored")));
        }
        if s.candidates.len() < max_n {
            return Err(Error::domain(format!(
                "set {i} has {} candidates, N up to {max_n} requested",
                s.candidates.len()
            )));
        }
    }
    let mut accuracy = Vec::with_capacity(ns.len());
    for &n in ns {
        let mut hits = 0usize;
        for s in sets {
            if s.correct[bon_select(&s.scores, n)?] {
                hits += 1;
            }
        }
        accuracy.push(hits as f64 / sets.len() as f64);
    }
    BoNCurve::new(ns.to_vec(), accuracy)
}

/// Best accuracy along the curve.
pub fn map(curve: &BoNCurve) -> f64 {
    curve.accuracy.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn delta_map(curve: &BoNCurve, baseline: &BoNCurve) -> Result<f64> {
    if curve.ns != baseline.ns {
        return Err(Error::domain(format!(
            "curves use different N values: {:?} vs {:?}",
            curve.ns, baseline.ns
        )));
    }
    Ok(map(curve) - map(baseline))
}

/// Keyed candidate pools: each prompt carries a key, each candidate is a
/// keyed continuation, and a candidate is correct iff its key matches.
#[derive(Debug, Clone, PartialEq)]
pub struct BoNTaskSpec {
    pub corpus: SyntheticSpec,
    pub n_prompts: usize,
    pub n_candidates: usize,
    pub prompt_len: usize,
    pub candidate_len: usize,
    /// Probability that a candidate uses the prompt's key.
    pub correct_rate: f64,
}

pub fn gen_bon_task(spec: &BoNTaskSpec) -> Result<Vec<BoNCandidateSet>> {
    spec.corpus.validate()?;
    if spec.corpus.n_keys < 2 {
        return Err(Error::config("BoN task needs at least 2 keys"));
    }
    if !(0.0..=1.0).contains(&spec.correct_rate) {
        return Err(Error::config("correct_rate must lie in [0, 1]"));
    }
    if spec.prompt_len == 0 || spec.candidate_len == 0 || spec.n_candidates == 0 {
        return Err(Error::config("BoN task lengths and candidate count must be positive"));
    }
    let c = &spec.corpus;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    Ok((0..spec.n_prompts)
        .map(|_| {
            let key = rng.gen_range(1..=c.n_keys);
            let prompt_tokens = sample_keyed_tokens(&mut rng, c, key, spec.prompt_len);
            let mut candidates = Vec::with_capacity(spec.n_candidates);
            let mut correct = Vec::with_capacity(spec.n_candidates);
            for _ in 0..spec.n_candidates {
                let ok = rng.gen_bool(spec.correct_rate);
                let k = if ok {
                    key
                } else {
                    // uniform over the other keys
                    let r = rng.gen_range(1..c.n_keys);
                    if r >= key {
                        r + 1
                    } else {
                        r
                    }
                };
                candidates.push(sample_keyed_tokens(&mut rng, c, k, spec.candidate_len));
                correct.push(ok);
            }
            BoNCandidateSet {
                prompt_tokens,
                candidates,
                correct,
                scores: Vec::new(),
            }
        })
        .collect())
}

pub fn sets_to_jsonl(sets: &[BoNCandidateSet]) -> String {
    let mut out = String::new();
    for s in sets {
        out.push_str(&serde_json::to_string(s).expect("candidate set serializes"));
        out.push('\n');
    }
    out
}

pub fn sets_from_jsonl(content: &str) -> Result<Vec<BoNCandidateSet>> {
    let mut out = Vec::new();
    for (n, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s: BoNCandidateSet =
            serde_json::from_str(line).map_err(|e| Error::format(format!("candidate line {}: {e}", n + 1)))?;
        s.validate()
            .map_err(|e| Error::format(format!("candidate line {}: {e}", n + 1)))?;
        out.push(s);
    }
    Ok(out)
}

/// Parses a comma-separated N list such as `1,2,4,8`.
pub fn parse_n_list(s: &str) -> Result<Vec<usize>> {
    let ns = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad N value {t:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    check_ns(&ns)?;
    Ok(ns)
}
