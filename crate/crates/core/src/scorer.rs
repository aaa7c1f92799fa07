//! Factorized scalar scorer `s(p, r)`.
//!
//! Prefix and suffix are each mean-pooled over a shared token embedding table
//! (`u`, `v`), then combined by a head: bilinear `u^T W v + b`, or a one
//! hidden-layer tanh MLP over `[u; v; u*v]`. Because the encoders are
//! independent, a B x B score matrix needs only 2B encodings.
//!
//! Parameters live in one flat `f64` vector:
//!
//! ```text
//! bilinear: E (V x d) | W (d x d, row-major) | b
//! mlp:      E (V x d) | W1 (h x 3d) | b1 (h) | w2 (h) | b2
//! ```

use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{write_atomic, ByteReader};
use crate::splitter::PrefixSuffixPair;
use crate::trainer::OptimizerState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RBSCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Bilinear,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerConfig {
    pub vocab_size: u32,
    pub embed_dim: usize,
    pub architecture: Architecture,
    pub init_scale: f64,
}

impl ScorerConfig {
    pub fn bilinear(vocab_size: u32, embed_dim: usize) -> Self {
        ScorerConfig {
            vocab_size,
            embed_dim,
            architecture: Architecture::Bilinear,
            init_scale: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::config("scorer vocab_size must be positive"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be >= 1"));
        }
        if let Architecture::Mlp { hidden: 0 } = self.architecture {
            return Err(Error::config("mlp hidden width must be >= 1"));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config(format!("init_scale must be > 0, got {}", self.init_scale)));
        }
        Ok(())
    }

    fn embed_len(&self) -> usize {
        self.vocab_size as usize * self.embed_dim
    }

    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        self.embed_len()
            + match self.architecture {
                Architecture::Bilinear => d * d + 1,
                Architecture::Mlp { hidden: h } => h * 3 * d + h + h + 1,
            }
    }

    /// Flat `key=value` rendering stored in checkpoints.
    pub fn to_text(&self) -> String {
        let (arch, hidden) = match self.architecture {
            Architecture::Bilinear => ("bilinear", 0),
            Architecture::Mlp { hidden } => ("mlp", hidden),
        };
        format!(
            "vocab_size={}\nembed_dim={}\narchitecture={arch}\nhidden={hidden}\ninit_scale={}\n",
            self.vocab_size, self.embed_dim, self.init_scale
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut vocab_size = None;
        let mut embed_dim = None;
        let mut arch = None;
        let mut hidden = 0usize;
        let mut init_scale = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("scorer config line {line:?}")))?;
            let bad = || Error::format(format!("scorer config: bad value for {k}: {v:?}"));
            match k {
                "vocab_size" => vocab_size = Some(v.parse().map_err(|_| bad())?),
                "embed_dim" => embed_dim = Some(v.parse().map_err(|_| bad())?),
                "architecture" => arch = Some(v.to_string()),
                "hidden" => hidden = v.parse().map_err(|_| bad())?,
                "init_scale" => init_scale = Some(v.parse().map_err(|_| bad())?),
                _ => return Err(Error::format(format!("scorer config: unknown key {k}"))),
            }
        }
        let missing = |k: &str| Error::format(format!("scorer config: missing {k}"));
        let architecture = match arch.as_deref() {
            Some("bilinear") => Architecture::Bilinear,
            Some("mlp") => Architecture::Mlp { hidden },
            Some(other) => return Err(Error::format(format!("unknown architecture {other:?}"))),
            None => return Err(missing("architecture")),
        };
        let cfg = ScorerConfig {
            vocab_size: vocab_size.ok_or_else(|| missing("vocab_size"))?,
            embed_dim: embed_dim.ok_or_else(|| missing("embed_dim"))?,
            architecture,
            init_scale: init_scale.ok_or_else(|| missing("init_scale"))?,
        };
        cfg.validate().map_err(|e| Error::format(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    pub config: ScorerConfig,
    pub theta: Vec<f64>,
}

/// Uniform `[-init_scale, init_scale]` for embeddings and weights, zero
/// biases; deterministic in `seed`.
pub fn init_params(config: &ScorerConfig, seed: u64) -> Result<ScorerParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = config.init_scale;
    let mut theta = vec![0.0; config.param_count()];
    let d = config.embed_dim;
    let e = config.embed_len();
    let weight_ranges: Vec<std::ops::Range<usize>> = match config.architecture {
        Architecture::Bilinear => vec![0..e + d * d],
        Architecture::Mlp { hidden: h } => vec![0..e + h * 3 * d, e + h * 3 * d + h..e + h * 3 * d + 2 * h],
    };
    for r in weight_ranges {
        for x in &mut theta[r] {
            *x = rng.gen_range(-s..=s);
        }
    }
    Ok(ScorerParams {
        config: config.clone(),
        theta,
    })
}

/// B x B matrix of scores, `get(i, j) = s(p_i, r_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    n: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::domain(format!("score matrix data has {} entries, expected {}", data.len(), n * n)));
        }
        Ok(ScoreMatrix { n, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::domain("score matrix rows must be square"));
        }
        Ok(ScoreMatrix {
            n,
            data: rows.concat(),
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl fmt::Display for ScoreMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.n {
            writeln!(f, "{:?}", self.row(i))?;
        }
        Ok(())
    }
}

/// Pooled prefix and suffix embeddings for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl ScorerParams {
    pub fn zeros(config: &ScorerConfig) -> Self {
        ScorerParams {
            config: config.clone(),
            theta: vec![0.0; config.param_count()],
        }
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    fn d(&self) -> usize {
        self.config.embed_dim
    }

    fn embedding(&self, tok: u32) -> &[f64] {
        let d = self.d();
        let at = tok as usize * d;
        &self.theta[at..at + d]
    }

    fn head_offset(&self) -> usize {
        self.config.embed_len()
    }

    /// Named parameter blocks, for error context.
    pub fn block_of(&self, index: usize) -> &'static str {
        let e = self.config.embed_len();
        let d = self.d();
        if index < e {
            return "embedding";
        }
        let k = index - e;
        match self.config.architecture {
            Architecture::Bilinear if k < d * d => "bilinear weight",
            Architecture::Bilinear => "bilinear bias",
            Architecture::Mlp { hidden: h } => {
                if k < h * 3 * d {
                    "mlp W1"
                } else if k < h * 3 * d + h {
                    "mlp b1"
                } else if k < h * 3 * d + 2 * h {
                    "mlp w2"
                } else {
                    "mlp b2"
                }
            }
        }
    }

    /// Mean of the token embeddings of `seq`.
    pub fn encode(&self, seq: &[u32]) -> Result<Vec<f64>> {
        if seq.is_empty() {
            return Err(Error::domain("cannot encode an empty sequence"));
        }
        let d = self.d();
        let mut out = vec![0.0; d];
        for &t in seq {
            if t >= self.config.vocab_size {
                return Err(Error::domain(format!(
                    "token {t} out of range for vocab_size {}",
                    self.config.vocab_size
                )));
            }
            for (o, e) in out.iter_mut().zip(self.embedding(t)) {
                *o += e;
            }
        }
        let inv = 1.0 / seq.len() as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        Ok(out)
    }

    /// Combines pooled embeddings into a score.
    pub fn head(&self, u: &[f64], v: &[f64]) -> f64 {
        let d = self.d();
        let o = self.head_offset();
        match self.config.architecture {
            Architecture::Bilinear => {
                let w = &self.theta[o..o + d * d];
                let mut s = self.theta[o + d * d];
                for a in 0..d {
                    let row = &w[a * d..(a + 1) * d];
                    s += u[a] * dot(row, v);
                }
                s
            }
            Architecture::Mlp { hidden: h } => {
                let (w1, b1, w2, b2) = self.mlp_blocks(h);
                let z = mlp_input(u, v);
                let mut s = b2;
                for k in 0..h {
                    let pre = b1[k] + dot(&w1[k * 3 * d..(k + 1) * 3 * d], &z);
                    s += w2[k] * pre.tanh();
                }
                s
            }
        }
    }

    fn mlp_blocks(&self, h: usize) -> (&[f64], &[f64], &[f64], f64) {
        let d = self.d();
        let o = self.head_offset();
        let w1 = &self.theta[o..o + h * 3 * d];
        let b1 = &self.theta[o + h * 3 * d..o + h * 3 * d + h];
        let w2 = &self.theta[o + h * 3 * d + h..o + h * 3 * d + 2 * h];
        (w1, b1, w2, self.theta[o + h * 3 * d + 2 * h])
    }

    pub fn score_pair(&self, prefix: &[u32], suffix: &[u32]) -> Result<f64> {
        let s = self.head(&self.encode(prefix)?, &self.encode(suffix)?);
        if !s.is_finite() {
            return Err(Error::numerical(format!("non-finite score {s}")));
        }
        Ok(s)
    }

    pub fn encode_batch(&self, prefixes: &[&[u32]], suffixes: &[&[u32]]) -> Result<EncodedBatch> {
        Ok(EncodedBatch {
            u: prefixes.iter().map(|p| self.encode(p)).collect::<Result<_>>()?,
            v: suffixes.iter().map(|s| self.encode(s)).collect::<Result<_>>()?,
        })
    }

    /// Scores every prefix against every suffix from pre-encoded embeddings.
    pub fn score_grid(&self, enc: &EncodedBatch) -> Result<ScoreMatrix> {
        let n = enc.u.len();
        if enc.v.len() != n {
            return Err(Error::domain("score grid needs as many suffixes as prefixes"));
        }
        let mut data = Vec::with_capacity(n * n);
        for (i, u) in enc.u.iter().enumerate() {
            for (j, v) in enc.v.iter().enumerate() {
                let s = self.head(u, v);
                if !s.is_finite() {
                    return Err(Error::numerical(format!("non-finite score at ({i}, {j})")));
                }
                data.push(s);
            }
        }
        Ok(ScoreMatrix { n, data })
    }

    /// `S[i][j] = s(p_i, r_j)` over a batch of pairs.
    pub fn score_matrix(&self, batch: &[PrefixSuffixPair]) -> Result<ScoreMatrix> {
        if batch.len() < 2 {
            return Err(Error::domain("score matrix needs at least 2 pairs"));
        }
        let (p, s) = split_batch(batch);
        self.score_grid(&self.encode_batch(&p, &s)?)
    }

    /// Gradient of `sum g * s(prefix_i, suffix_j)` over the sparse entries
    /// `(i, j, g)` with respect to every parameter.
    pub fn backprop(
        &self,
        prefixes: &[&[u32]],
        suffixes: &[&[u32]],
        enc: &EncodedBatch,
        entries: &[(usize, usize, f64)],
    ) -> Vec<f64> {
        let d = self.d();
        let o = self.head_offset();
        let mut grad = vec![0.0; self.theta.len()];
        let mut du = vec![vec![0.0; d]; enc.u.len()];
        let mut dv = vec![vec![0.0; d]; enc.v.len()];

        match self.config.architecture {
            Architecture::Bilinear => {
                let w = &self.theta[o..o + d * d];
                let wv: Vec<Vec<f64>> = enc.v.iter().map(|v| mat_vec(w, v, d)).collect();
                let wtu: Vec<Vec<f64>> = enc.u.iter().map(|u| mat_t_vec(w, u, d)).collect();
                let mut acc = vec![vec![0.0; d]; enc.u.len()];
                let mut db = 0.0;
                for &(i, j, g) in entries {
                    axpy(g, &wv[j], &mut du[i]);
                    axpy(g, &wtu[i], &mut dv[j]);
                    axpy(g, &enc.v[j], &mut acc[i]);
                    db += g;
                }
                let dw = &mut grad[o..o + d * d];
                for (u, a) in enc.u.iter().zip(&acc) {
                    for r in 0..d {
                        axpy(u[r], a, &mut dw[r * d..(r + 1) * d]);
                    }
                }
                grad[o + d * d] = db;
            }
            Architecture::Mlp { hidden: h } => {
                let (w1, b1, w2, _) = self.mlp_blocks(h);
                let (w1_at, b1_at, w2_at, b2_at) = (o, o + h * 3 * d, o + h * 3 * d + h, o + h * 3 * d + 2 * h);
                let mut act = vec![0.0; h];
                let mut dz = vec![0.0; 3 * d];
                for &(i, j, g) in entries {
                    let (u, v) = (&enc.u[i], &enc.v[j]);
                    let z = mlp_input(u, v);
                    for k in 0..h {
                        act[k] = (b1[k] + dot(&w1[k * 3 * d..(k + 1) * 3 * d], &z)).tanh();
                    }
                    grad[b2_at] += g;
                    dz.iter_mut().for_each(|x| *x = 0.0);
                    for k in 0..h {
                        grad[w2_at + k] += g * act[k];
                        let dpre = g * w2[k] * (1.0 - act[k] * act[k]);
                        grad[b1_at + k] += dpre;
                        let row = &w1[k * 3 * d..(k + 1) * 3 * d];
                        axpy(dpre, &z, &mut grad[w1_at + k * 3 * d..w1_at + (k + 1) * 3 * d]);
                        axpy(dpre, row, &mut dz);
                    }
                    for a in 0..d {
                        du[i][a] += dz[a] + dz[2 * d + a] * v[a];
                        dv[j][a] += dz[d + a] + dz[2 * d + a] * u[a];
                    }
                }
            }
        }

        for (seqs, dpool) in [(prefixes, &du), (suffixes, &dv)] {
            for (seq, dp) in seqs.iter().zip(dpool.iter()) {
                let inv = 1.0 / seq.len() as f64;
                for &t in seq.iter() {
                    let at = t as usize * d;
                    axpy(inv, dp, &mut grad[at..at + d]);
                }
            }
        }
        grad
    }
}

pub(crate) fn split_batch(batch: &[PrefixSuffixPair]) -> (Vec<&[u32]>, Vec<&[u32]>) {
    batch
        .iter()
        .map(|p| (p.prefix.as_slice(), p.suffix.as_slice()))
        .unzip()
}

fn mlp_input(u: &[f64], v: &[f64]) -> Vec<f64> {
    let mut z = Vec::with_capacity(3 * u.len());
    z.extend_from_slice(u);
    z.extend_from_slice(v);
    z.extend(u.iter().zip(v).map(|(a, b)| a * b));
    z
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn mat_vec(w: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    (0..d).map(|r| dot(&w[r * d..(r + 1) * d], v)).collect()
}

fn mat_t_vec(w: &[f64], u: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for r in 0..d {
        axpy(u[r], &w[r * d..(r + 1) * d], &mut out);
    }
    out
}

/// Serializes parameters and optional optimizer state.
///
/// ```text
/// "RBSCKPT1" u32 version  u32 cfg_len  cfg_len bytes of UTF-8 config
/// u64 n  n x f64 theta
/// u64 state_len  [u64 step  n x f64 m  n x f64 v]   (state_len == 0: absent)
/// ```
pub fn encode_checkpoint(params: &ScorerParams, state: Option<&OptimizerState>) -> Result<Vec<u8>> {
    let n = params.theta.len();
    if n != params.config.param_count() {
        return Err(Error::domain("parameter vector does not match its config"));
    }
    let cfg = params.config.to_text();
    let mut out = Vec::with_capacity(32 + cfg.len() + 8 * n * 3);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for x in &params.theta {
        out.extend_from_slice(&x.to_le_bytes());
    }
    match state {
        None => out.extend_from_slice(&0u64.to_le_bytes()),
        Some(st) => {
            if st.m.len() != n || st.v.len() != n {
                return Err(Error::domain("optimizer state length does not match parameters"));
            }
            out.extend_from_slice(&((8 + 16 * n) as u64).to_le_bytes());
            out.extend_from_slice(&st.step.to_le_bytes());
            for x in st.m.iter().chain(&st.v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ScorerParams, Option<OptimizerState>)> {
    let mut r = ByteReader::new(bytes, "checkpoint");
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?).map_err(|_| Error::format("checkpoint config is not UTF-8"))?;
    let config = ScorerConfig::from_text(cfg_text)?;
    let n = r.u64()? as usize;
    if n != config.param_count() {
        return Err(Error::format(format!(
            "checkpoint holds {n} parameters, config implies {}",
            config.param_count()
        )));
    }
    let theta = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let state_len = r.u64()? as usize;
    let state = if state_len == 0 {
        None
    } else {
        if state_len != 8 + 16 * n {
            return Err(Error::format(format!("optimizer block length {state_len} inconsistent")));
        }
        let step = r.u64()?;
        let m = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let v = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        Some(OptimizerState { m, v, step })
    };
    r.finish()?;
    Ok((ScorerParams { config, theta }, state))
}

pub fn save_checkpoint(params: &ScorerParams, state: Option<&OptimizerState>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params, state)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(ScorerParams, Option<OptimizerState>)> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TokenSequence;
    use crate::splitter::PairOrigin;
    use proptest::prelude::*;

    fn pair(p: Vec<u32>, s: Vec<u32>, vocab: u32) -> PrefixSuffixPair {
        PrefixSuffixPair {
            prefix: TokenSequence::new(p, vocab).unwrap(),
            suffix: TokenSequence::new(s, vocab).unwrap(),
            origin: PairOrigin {
                source: "t".into(),
                index: 0,
                offset: 0,
            },
        }
    }

    fn mlp_config() -> ScorerConfig {
        ScorerConfig {
            vocab_size: 20,
            embed_dim: 4,
            architecture: Architecture::Mlp { hidden: 5 },
            init_scale: 0.5,
        }
    }

    #[test]
    fn init_is_deterministic_and_counts_match() {
        let cfg = ScorerConfig::bilinear(256, 16);
        assert_eq!(cfg.param_count(), 256 * 16 + 16 * 16 + 1);
        let a = init_params(&cfg, 7).unwrap();
        let b = init_params(&cfg, 7).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.theta.len(), cfg.param_count());
        assert_eq!(*a.theta.last().unwrap(), 0.0);
        assert!(a.theta.iter().all(|x| x.abs() <= 0.1));
        assert_eq!(mlp_config().param_count(), 20 * 4 + 5 * 12 + 5 + 5 + 1);
    }

    #[test]
    fn tiny_init_scale_gives_near_zero_scores() {
        let mut cfg = ScorerConfig::bilinear(16, 4);
        cfg.init_scale = 1e-300;
        let p = init_params(&cfg, 1).unwrap();
        assert_eq!(p.score_pair(&[1, 2], &[3]).unwrap(), 0.0);
        cfg.init_scale = 0.0;
        assert!(init_params(&cfg, 1).is_err());
    }

    #[test]
    fn encode_means() {
        let cfg = ScorerConfig::bilinear(8, 3);
        let p = init_params(&cfg, 3).unwrap();
        let e1 = p.encode(&[1]).unwrap();
        assert_eq!(e1, p.embedding(1).to_vec());
        assert_eq!(p.encode(&[1, 1, 1, 1]).unwrap(), e1);
        let e2 = p.embedding(2).to_vec();
        let mean = p.encode(&[1, 2]).unwrap();
        for a in 0..3 {
            assert!((mean[a] - (e1[a] + e2[a]) / 2.0).abs() < 1e-15);
        }
        assert!(matches!(p.encode(&[]), Err(Error::Domain(_))));
        assert!(matches!(p.encode(&[8]), Err(Error::Domain(_))));
    }

    #[test]
    fn bilinear_hand_value() {
        // d = 1, vocab 2: token 0 embeds to 2, token 1 to 3, W = 0.5, b = 0.1
        let cfg = ScorerConfig::bilinear(2, 1);
        let p = ScorerParams {
            config: cfg,
            theta: vec![2.0, 3.0, 0.5, 0.1],
        };
        assert!((p.score_pair(&[0], &[1]).unwrap() - 3.1).abs() < 1e-15);
    }

    #[test]
    fn zero_params_score_zero() {
        let p = ScorerParams::zeros(&ScorerConfig::bilinear(10, 4));
        let batch = vec![pair(vec![1], vec![2], 10), pair(vec![3], vec![4], 10)];
        let s = p.score_matrix(&batch).unwrap();
        assert_eq!(s.data(), &[0.0; 4]);
    }

    #[test]
    fn score_matrix_matches_naive_loop() {
        for cfg in [ScorerConfig::bilinear(20, 4), mlp_config()] {
            let p = init_params(&cfg, 11).unwrap();
            let batch: Vec<_> = (0..4u32)
                .map(|i| pair(vec![i, i + 3, 7], vec![i + 10, 19 - i], 20))
                .collect();
            let s = p.score_matrix(&batch).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    let naive = p.score_pair(batch[i].prefix.as_slice(), batch[j].suffix.as_slice()).unwrap();
                    assert!((s.get(i, j) - naive).abs() <= 1e-12);
                    if i == j {
                        assert_eq!(s.get(i, i), naive);
                    }
                }
            }
        }
    }

    #[test]
    fn score_matrix_needs_two_pairs() {
        let p = ScorerParams::zeros(&ScorerConfig::bilinear(10, 4));
        assert!(p.score_matrix(&[pair(vec![1], vec![2], 10)]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = init_params(&mlp_config(), 5).unwrap();
        let n = p.param_count();
        let st = OptimizerState {
            m: (0..n).map(|i| i as f64 * 1e-3).collect(),
            v: (0..n).map(|i| (i as f64).sqrt()).collect(),
            step: 17,
        };
        let bytes = encode_checkpoint(&p, Some(&st)).unwrap();
        let (q, st2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(q.config, p.config);
        assert!(q.theta.iter().zip(&p.theta).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(st2.as_ref(), Some(&st));
        assert_eq!(encode_checkpoint(&q, st2.as_ref()).unwrap(), bytes);

        let (_, none) = decode_checkpoint(&encode_checkpoint(&p, None).unwrap()).unwrap();
        assert!(none.is_none());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let p = init_params(&ScorerConfig::bilinear(8, 2), 5).unwrap();
        let bytes = encode_checkpoint(&p, None).unwrap();
        let mut bad = bytes.clone();
        bad[3] = b'?';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 9]), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = init_params(&ScorerConfig::bilinear(8, 2), 5).unwrap();
        save_checkpoint(&p, None, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().0, p);
    }

    proptest! {
        #[test]
        fn encode_is_permutation_invariant(mut toks in proptest::collection::vec(0u32..30, 1..40), seed in 0u64..50) {
            let p = init_params(&ScorerConfig::bilinear(30, 6), seed).unwrap();
            let a = p.encode(&toks).unwrap();
            toks.reverse();
            let b = p.encode(&toks).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn scores_finite(seed in 0u64..100, len in 1usize..30) {
            let p = init_params(&mlp_config(), seed).unwrap();
            let toks: Vec<u32> = (0..len as u32).map(|i| (i * 7 + seed as u32) % 20).collect();
            prop_assert!(p.score_pair(&toks, &toks[..1]).unwrap().is_finite());
        }
    }
}
