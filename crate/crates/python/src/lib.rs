//! Python bindings: tokenization, pair construction, the scorer, losses,
//! training, validation, best-of-N, toy policy optimization and costs.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rbs_core::corpus::{self, Chunk, Document, SyntheticSpec, TokenSequence, Tokenizer};
use rbs_core::costs::{self, CostMode, PriceSpec};
use rbs_core::objective::{self, CenterMode};
use rbs_core::policy::{self, GrpoConfig};
use rbs_core::scorer::{self, Architecture, ScoreMatrix, ScorerConfig, ScorerParams};
use rbs_core::selection::{self, BoNCandidateSet, BoNTaskSpec};
use rbs_core::splitter::{self, OversizePolicy, PairOrigin, PrefixSuffixPair, SentenceSplitConfig};
use rbs_core::trainer::{self, TrainConfig, ValidationStats};
use rbs_core::Error;

type Pair = (Vec<u32>, Vec<u32>);
/// `(prompt, candidates, correct)`.
type CandidateSet = (Vec<u32>, Vec<Vec<u32>>, Vec<bool>);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(m) | Error::Domain(m) => PyValueError::new_err(m),
        Error::Numerical(m) => PyArithmeticError::new_err(m),
        Error::Format(m) => PyOSError::new_err(m),
        Error::Io(e) => PyOSError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for rbs_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn center_mode(name: &str) -> PyResult<CenterMode> {
    match name {
        "expectation" => Ok(CenterMode::Expectation),
        "pooled" => Ok(CenterMode::Pooled),
        _ => Err(PyValueError::new_err(format!("center_mode must be expectation or pooled, got {name:?}"))),
    }
}

fn to_pairs(pairs: &[Pair], vocab_size: u32) -> PyResult<Vec<PrefixSuffixPair>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, (p, s))| {
            Ok(PrefixSuffixPair {
                prefix: TokenSequence::new(p.clone(), vocab_size).py()?,
                suffix: TokenSequence::new(s.clone(), vocab_size).py()?,
                origin: PairOrigin {
                    source: "python".into(),
                    index: i,
                    offset: 0,
                },
            })
        })
        .collect()
}

fn from_pairs(pairs: Vec<PrefixSuffixPair>) -> Vec<Pair> {
    pairs.into_iter().map(|p| (p.prefix.tokens, p.suffix.tokens)).collect()
}

fn stats_dict<'py>(py: Python<'py>, v: &ValidationStats) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("rank_acc", v.rank_acc)?;
    d.set_item("mean_pos", v.mean_pos)?;
    d.set_item("mean_neg", v.mean_neg)?;
    d.set_item("margin", v.margin)?;
    d.set_item("mean_sq_score", v.mean_sq_score)?;
    d.set_item("rows", v.rows)?;
    Ok(d)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<ScoreMatrix> {
    ScoreMatrix::from_rows(&rows).py()
}

/// Byte-level tokenization of UTF-8 text.
#[pyfunction]
fn tokenize_bytes(text: &str) -> PyResult<Vec<u32>> {
    Ok(corpus::tokenize(text, &Tokenizer::byte()).py()?.tokens)
}

/// Keyed synthetic corpus as fixed-split (prefix, suffix) pairs.
#[pyfunction]
#[pyo3(signature = (n_docs, l1, l2, vocab_size=1024, n_keys=512, key_density=0.4, seed=2025))]
fn synthetic_pairs(
    n_docs: usize,
    l1: usize,
    l2: usize,
    vocab_size: u32,
    n_keys: u32,
    key_density: f64,
    seed: u64,
) -> PyResult<Vec<Pair>> {
    let spec = SyntheticSpec {
        n_docs,
        vocab_size,
        n_keys,
        key_density,
        doc_len: l1 + l2 - 1,
        seed,
    };
    let stream = corpus::synthetic_stream(&spec).py()?;
    let chunks = corpus::chunk_stream(&stream, l1 + l2).py()?;
    let pairs: rbs_core::Result<Vec<_>> = chunks.iter().map(|c| splitter::fixed_split(c, l1, l2)).collect();
    Ok(from_pairs(pairs.py()?))
}

/// Cuts a stream into chunks of `l1 + l2` tokens and splits each at `l1`.
#[pyfunction]
fn fixed_split(tokens: Vec<u32>, l1: usize, l2: usize) -> PyResult<Vec<Pair>> {
    let vocab = tokens.iter().max().map_or(1, |m| m + 1);
    let stream = TokenSequence::new(tokens, vocab).py()?;
    let chunks: Vec<Chunk> = corpus::chunk_stream(&stream, l1 + l2).py()?;
    let pairs: rbs_core::Result<Vec<_>> = chunks.iter().map(|c| splitter::fixed_split(c, l1, l2)).collect();
    Ok(from_pairs(pairs.py()?))
}

/// Sentence-aware pairs from one document, byte-tokenized.
#[pyfunction]
#[pyo3(signature = (text, max_len, min_len, target_prefix, oversize="discard", eos=Some(0)))]
fn sentence_split(
    text: &str,
    max_len: usize,
    min_len: usize,
    target_prefix: usize,
    oversize: &str,
    eos: Option<u32>,
) -> PyResult<Vec<Pair>> {
    let oversize = match oversize {
        "split" => OversizePolicy::Split,
        "discard" => OversizePolicy::Discard,
        _ => return Err(PyValueError::new_err("oversize must be split or discard")),
    };
    let cfg = SentenceSplitConfig {
        max_len,
        min_len,
        target_prefix,
        oversize,
        eos,
    };
    let doc = Document::new("python", text, "python");
    let (pairs, _) = splitter::sentence_aware_split(&doc, &Tokenizer::byte(), &cfg).py()?;
    Ok(from_pairs(pairs))
}

#[pyfunction]
fn bt_loss(scores: Vec<Vec<f64>>) -> PyResult<f64> {
    objective::bt_loss(&matrix(scores)?).py()
}

#[pyfunction]
#[pyo3(signature = (scores, mode="expectation"))]
fn center_loss(scores: Vec<Vec<f64>>, mode: &str) -> PyResult<f64> {
    objective::center_loss_with(&matrix(scores)?, center_mode(mode)?).py()
}

/// `(bt, center, total)` for coefficient `c`.
#[pyfunction]
#[pyo3(signature = (scores, c=0.01, mode="expectation"))]
fn total_loss(scores: Vec<Vec<f64>>, c: f64, mode: &str) -> PyResult<(f64, f64, f64)> {
    let l = objective::total_loss_with(&matrix(scores)?, c, center_mode(mode)?).py()?;
    Ok((l.bt, l.center, l.total))
}

/// Gradient of the total loss with respect to the score matrix.
#[pyfunction]
#[pyo3(signature = (scores, c=0.01, mode="expectation"))]
fn score_gradient(scores: Vec<Vec<f64>>, c: f64, mode: &str) -> PyResult<Vec<Vec<f64>>> {
    let (_, g) = objective::score_matrix_gradient(&matrix(scores)?, c, center_mode(mode)?).py()?;
    Ok((0..g.size()).map(|i| g.row(i).to_vec()).collect())
}

/// Factorized reward scorer over token sequences.
#[pyclass(name = "Scorer", module = "rbs", skip_from_py_object)]
#[derive(Clone)]
struct PyScorer {
    params: ScorerParams,
}

#[pymethods]
impl PyScorer {
    /// Seeded initialization; `arch` is "bilinear" or "mlp".
    #[new]
    #[pyo3(signature = (vocab_size, embed_dim=32, arch="bilinear", hidden=32, init_scale=0.1, seed=2025))]
    fn new(vocab_size: u32, embed_dim: usize, arch: &str, hidden: usize, init_scale: f64, seed: u64) -> PyResult<Self> {
        let architecture = match arch {
            "bilinear" => Architecture::Bilinear,
            "mlp" => Architecture::Mlp { hidden },
            _ => return Err(PyValueError::new_err(format!("arch must be bilinear or mlp, got {arch:?}"))),
        };
        let config = ScorerConfig {
            vocab_size,
            embed_dim,
            architecture,
            init_scale,
        };
        Ok(PyScorer {
            params: scorer::init_params(&config, seed).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (params, _) = scorer::load_checkpoint(&path).py()?;
        Ok(PyScorer { params })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        scorer::save_checkpoint(&self.params, None, &path).py()
    }

    #[getter]
    fn vocab_size(&self) -> u32 {
        self.params.config.vocab_size
    }

    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.params.theta.clone()
    }

    #[setter]
    fn set_theta(&mut self, theta: Vec<f64>) -> PyResult<()> {
        if theta.len() != self.params.theta.len() {
            return Err(PyValueError::new_err(format!(
                "expected {} parameters, got {}",
                self.params.theta.len(),
                theta.len()
            )));
        }
        self.params.theta = theta;
        Ok(())
    }

    fn score(&self, prefix: Vec<u32>, suffix: Vec<u32>) -> PyResult<f64> {
        self.params.score_pair(&prefix, &suffix).py()
    }

    /// `S[i][j]` = score of prefix i with suffix j.
    fn score_matrix(&self, pairs: Vec<Pair>) -> PyResult<Vec<Vec<f64>>> {
        let batch = to_pairs(&pairs, self.params.config.vocab_size)?;
        let m = self.params.score_matrix(&batch).py()?;
        Ok((0..m.size()).map(|i| m.row(i).to_vec()).collect())
    }

    /// `(total_loss, gradient)` of one batch with respect to `theta`.
    #[pyo3(signature = (pairs, c=0.01, mode="expectation"))]
    fn loss_and_gradient(&self, pairs: Vec<Pair>, c: f64, mode: &str) -> PyResult<(f64, Vec<f64>)> {
        let batch = to_pairs(&pairs, self.params.config.vocab_size)?;
        let (l, g) = objective::loss_and_gradient(&self.params, &batch, c, center_mode(mode)?).py()?;
        Ok((l.total, g))
    }

    fn __repr__(&self) -> String {
        format!("Scorer({})", self.params.config.to_text().trim().replace('\n', ", "))
    }
}

/// Trains a copy of `scorer`; returns the trained scorer and the metrics rows.
#[pyfunction]
#[pyo3(signature = (
    scorer, pairs, val_pairs=None, batch_size=32, c=0.01, lr=1e-6, token_budget=11_000_000,
    warmup_ratio=0.05, seed=2025, val_every=0, out_dir=None
))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    scorer: &PyScorer,
    pairs: Vec<Pair>,
    val_pairs: Option<Vec<Pair>>,
    batch_size: usize,
    c: f64,
    lr: f64,
    token_budget: u64,
    warmup_ratio: f64,
    seed: u64,
    val_every: u64,
    out_dir: Option<PathBuf>,
) -> PyResult<(PyScorer, Vec<Bound<'py, PyDict>>)> {
    let vocab = scorer.params.config.vocab_size;
    let train_pairs = to_pairs(&pairs, vocab)?;
    let val_batches = match val_pairs {
        Some(v) => trainer::make_batches(&to_pairs(&v, vocab)?, batch_size, None).py()?,
        None => Vec::new(),
    };
    let cfg = TrainConfig {
        batch_size,
        c,
        base_lr: lr,
        token_budget,
        warmup_ratio,
        seed,
        val_every,
        ..TrainConfig::default()
    };
    let init = scorer.params.clone();
    let outcome = py
        .detach(|| trainer::train(&cfg, init, None, &train_pairs, &val_batches, out_dir.as_deref()))
        .py()?;
    let rows = outcome
        .metrics
        .iter()
        .map(|m| {
            let d = stats_dict(py, &m.val)?;
            d.set_item("step", m.step)?;
            d.set_item("tokens_seen", m.tokens_seen)?;
            d.set_item("lr", m.lr)?;
            d.set_item("bt_loss", m.bt_loss)?;
            d.set_item("center_loss", m.center_loss)?;
            d.set_item("total_loss", m.total_loss)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((PyScorer { params: outcome.params }, rows))
}

/// In-batch ranking metrics over consecutive batches of `batch_size`.
#[pyfunction]
#[pyo3(signature = (scorer, pairs, batch_size=8))]
fn validate<'py>(py: Python<'py>, scorer: &PyScorer, pairs: Vec<Pair>, batch_size: usize) -> PyResult<Bound<'py, PyDict>> {
    let batches = trainer::make_batches(&to_pairs(&pairs, scorer.params.config.vocab_size)?, batch_size, None).py()?;
    stats_dict(py, &trainer::validate(&scorer.params, &batches).py()?)
}

/// Synthetic best-of-N sets as `(prompt, candidates, correct)` tuples.
#[pyfunction]
#[pyo3(signature = (n_prompts, n_candidates, prompt_len, candidate_len, correct_rate=0.25,
                    vocab_size=1024, n_keys=512, key_density=0.4, seed=2026))]
#[allow(clippy::too_many_arguments)]
fn synthetic_bon_task(
    n_prompts: usize,
    n_candidates: usize,
    prompt_len: usize,
    candidate_len: usize,
    correct_rate: f64,
    vocab_size: u32,
    n_keys: u32,
    key_density: f64,
    seed: u64,
) -> PyResult<Vec<CandidateSet>> {
    let spec = BoNTaskSpec {
        corpus: SyntheticSpec {
            n_docs: 0,
            vocab_size,
            n_keys,
            key_density,
            doc_len: candidate_len.max(1),
            seed,
        },
        n_prompts,
        n_candidates,
        prompt_len,
        candidate_len,
        correct_rate,
    };
    Ok(selection::gen_bon_task(&spec)
        .py()?
        .into_iter()
        .map(|s| (s.prompt_tokens, s.candidates, s.correct))
        .collect())
}

/// Accuracy at each N given per-set candidate scores and correctness.
#[pyfunction]
#[pyo3(signature = (scores, correct, ns=vec![1, 2, 4, 8, 16, 32]))]
fn bon_curve(scores: Vec<Vec<f64>>, correct: Vec<Vec<bool>>, ns: Vec<usize>) -> PyResult<Vec<f64>> {
    if scores.len() != correct.len() {
        return Err(PyValueError::new_err("scores and correct need one entry per set"));
    }
    let sets: Vec<BoNCandidateSet> = scores
        .into_iter()
        .zip(correct)
        .map(|(s, c)| BoNCandidateSet {
            prompt_tokens: Vec::new(),
            candidates: vec![Vec::new(); c.len()],
            correct: c,
            scores: s,
        })
        .collect();
    Ok(selection::bon_curve(&sets, &ns).py()?.accuracy)
}

/// Scores every candidate of every set with `scorer`.
#[pyfunction]
fn score_candidates(py: Python<'_>, scorer: &PyScorer, sets: Vec<CandidateSet>) -> PyResult<Vec<Vec<f64>>> {
    let sets: Vec<BoNCandidateSet> = sets
        .into_iter()
        .map(|(prompt_tokens, candidates, correct)| BoNCandidateSet {
            prompt_tokens,
            candidates,
            correct,
            scores: Vec::new(),
        })
        .collect();
    let params = scorer.params.clone();
    let scored = py.detach(|| selection::score_all(&params, &sets)).py()?;
    Ok(scored.into_iter().map(|s| s.scores).collect())
}

/// Best accuracy along a curve.
#[pyfunction]
#[pyo3(name = "map")]
fn map_of(accuracy: Vec<f64>) -> PyResult<f64> {
    accuracy
        .into_iter()
        .reduce(f64::max)
        .ok_or_else(|| PyValueError::new_err("empty curve"))
}

#[pyfunction]
#[pyo3(signature = (rewards, eps=1e-6))]
fn group_advantages(rewards: Vec<f64>, eps: f64) -> Vec<f64> {
    policy::group_advantages(&rewards, eps)
}

#[pyfunction]
#[pyo3(signature = (logp_new, logp_old, advantages, clip=0.2))]
fn clipped_surrogate(logp_new: Vec<Vec<f64>>, logp_old: Vec<Vec<f64>>, advantages: Vec<f64>, clip: f64) -> PyResult<f64> {
    policy::clipped_surrogate(&logp_new, &logp_old, &advantages, clip).py()
}

#[pyfunction]
fn kl_mse(logp_new: Vec<Vec<f64>>, logp_ref: Vec<Vec<f64>>) -> PyResult<f64> {
    policy::kl_mse(&logp_new, &logp_ref).py()
}

/// Toy policy optimization against `scorer` on the keyed completion task.
/// Returns `(epoch, mean_oracle_acc, mean_rm_reward)` rows; row 0 is the
/// initial policy.
#[pyfunction]
#[pyo3(signature = (scorer, n_prompts=64, prompt_len=32, epochs=5, k=8, lr=0.2, inner_steps=4,
                    completion_len=16, lambda_=0.1, clip=0.2, seed=2025, n_keys=512, key_density=0.4))]
#[allow(clippy::too_many_arguments)]
fn grpo_toy(
    py: Python<'_>,
    scorer: &PyScorer,
    n_prompts: usize,
    prompt_len: usize,
    epochs: usize,
    k: usize,
    lr: f64,
    inner_steps: usize,
    completion_len: usize,
    lambda_: f64,
    clip: f64,
    seed: u64,
    n_keys: u32,
    key_density: f64,
) -> PyResult<Vec<(usize, f64, f64)>> {
    let spec = SyntheticSpec {
        n_docs: 0,
        vocab_size: scorer.params.config.vocab_size,
        n_keys,
        key_density,
        doc_len: prompt_len.max(1),
        seed,
    };
    let cfg = GrpoConfig {
        k,
        lambda: lambda_,
        clip,
        epochs,
        inner_steps,
        lr,
        seed,
        completion_len,
        ..GrpoConfig::default()
    };
    let params = scorer.params.clone();
    let outcome = py
        .detach(|| {
            let task = policy::gen_grpo_task(&spec, n_prompts, prompt_len)?;
            policy::grpo_train_toy(&cfg, &params, &task)
        })
        .py()?;
    Ok(outcome
        .curve
        .into_iter()
        .map(|e| (e.epoch, e.mean_oracle_acc, e.mean_rm_reward))
        .collect())
}

fn price_spec(prices: &str) -> PyResult<PriceSpec> {
    PriceSpec::parse(prices).py()
}

/// Cost of one dataset: `(t_in, t_out, cost, cost_per_pair)`.
#[pyfunction]
#[pyo3(signature = (mode, n, prompt_len, pref_len, rej_len, prices="stated"))]
fn dataset_cost(mode: &str, n: u64, prompt_len: f64, pref_len: f64, rej_len: f64, prices: &str) -> PyResult<(f64, f64, f64, f64)> {
    let row = costs::DatasetCostRow {
        name: String::new(),
        n,
        prompt_len,
        pref_len,
        rej_len,
    };
    row.validate().py()?;
    let p = price_spec(prices)?;
    let r = match CostMode::parse(mode).py()? {
        CostMode::Generation => costs::generation_cost(&row, &p),
        CostMode::Annotation => costs::annotation_cost(&row, &p),
    };
    Ok((r.t_in, r.t_out, r.cost, r.cost_per_pair))
}

/// Cost table over the bundled dataset rows as CSV text.
#[pyfunction]
#[pyo3(signature = (mode="annotation", prices="stated"))]
fn cost_table_csv(mode: &str, prices: &str) -> PyResult<String> {
    let mode = CostMode::parse(mode).py()?;
    let rows = costs::parse_rows(match mode {
        CostMode::Generation => costs::GENERATION_ROWS_CSV,
        CostMode::Annotation => costs::ANNOTATION_ROWS_CSV,
    })
    .py()?;
    Ok(costs::cost_table(&rows, &price_spec(prices)?, mode).py()?.to_csv())
}

#[pymodule]
fn rbs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScorer>()?;
    m.add_function(wrap_pyfunction!(tokenize_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(fixed_split, m)?)?;
    m.add_function(wrap_pyfunction!(sentence_split, m)?)?;
    m.add_function(wrap_pyfunction!(bt_loss, m)?)?;
    m.add_function(wrap_pyfunction!(center_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(score_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_bon_task, m)?)?;
    m.add_function(wrap_pyfunction!(bon_curve, m)?)?;
    m.add_function(wrap_pyfunction!(score_candidates, m)?)?;
    m.add_function(wrap_pyfunction!(map_of, m)?)?;
    m.add_function(wrap_pyfunction!(group_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(clipped_surrogate, m)?)?;
    m.add_function(wrap_pyfunction!(kl_mse, m)?)?;
    m.add_function(wrap_pyfunction!(grpo_toy, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_cost, m)?)?;
    m.add_function(wrap_pyfunction!(cost_table_csv, m)?)?;
    Ok(())
}
