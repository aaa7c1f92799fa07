//! Flat `key=value` run configuration shared by every subcommand.
//!
//! Blank lines and lines starting with `#` are ignored. Absent keys take
//! their defaults; unknown keys and unparsable values are errors that name
//! the line and key.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

macro_rules! run_config {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty = $default:expr, $key:literal; )*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( $(#[$doc])* pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$( $key ),*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( $key => self.$field = parse_value(key, value)?, )*
                    _ => {
                        return Err(Error::config(format!(
                            "unknown key {key:?}; valid keys: {}",
                            Self::KEYS.join(", ")
                        )))
                    }
                }
                Ok(())
            }

            /// Resolved configuration in the same `key=value` format.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $( writeln!(out, "{}={}", $key, self.$field).unwrap(); )*
                out
            }
        }
    };
}

run_config! {
    seed: u64 = 2025, "seed";
    // data preparation
    split: String = "fixed".into(), "split";
    tokenizer: String = "byte".into(), "tokenizer";
    vocab_cap: u32 = 32_000, "vocab_cap";
    /// Chunk length; must equal `L1 + L2` for fixed splitting.
    l: usize = 1536, "L";
    l1: usize = 512, "L1";
    l2: usize = 1024, "L2";
    /// 0 means `L1 + 1`.
    min_len: usize = 0, "min_len";
    max_len: usize = 1536, "max_len";
    target_prefix: usize = 512, "target_prefix";
    oversize: String = "discard".into(), "oversize";
    min_prefix: usize = 1, "min_prefix";
    max_prefix: usize = 0, "max_prefix";
    // scorer
    embed_dim: usize = 32, "embed_dim";
    arch: String = "bilinear".into(), "arch";
    mlp_hidden: usize = 32, "mlp_hidden";
    init_scale: f64 = 0.1, "init_scale";
    // training
    b: usize = 32, "B";
    c: f64 = 0.01, "c";
    center_mode: String = "expectation".into(), "center_mode";
    lr: f64 = 1e-6, "lr";
    warmup_ratio: f64 = 0.05, "warmup_ratio";
    beta1: f64 = 0.9, "beta1";
    beta2: f64 = 0.95, "beta2";
    adam_eps: f64 = 1e-8, "adam_eps";
    token_budget: u64 = 11_000_000, "token_budget";
    /// 0 means no step cap.
    max_steps: u64 = 0, "max_steps";
    checkpoint_every: u64 = 0, "checkpoint_every";
    val_every: u64 = 0, "val_every";
    val_batches: usize = 16, "val_batches";
    shuffle: bool = false, "shuffle";
    /// 0 disables clipping.
    grad_clip: f64 = 0.0, "grad_clip";
    // synthetic corpus
    n_docs: usize = 11_500, "n_docs";
    vocab_size: u32 = 1024, "vocab_size";
    n_keys: u32 = 512, "n_keys";
    key_density: f64 = 0.4, "key_density";
    doc_len: usize = 95, "doc_len";
    // best-of-N
    n_prompts: usize = 200, "n_prompts";
    n_candidates: usize = 32, "n_candidates";
    correct_rate: f64 = 0.25, "correct_rate";
    n_list: String = "1,2,4,8,16,32".into(), "N_list";
    // policy optimization
    k: usize = 8, "K";
    lambda: f64 = 0.1, "lambda";
    clip: f64 = 0.2, "clip";
    epochs: usize = 5, "epochs";
    inner_steps: usize = 4, "inner_steps";
    grpo_lr: f64 = 0.2, "grpo_lr";
    adv_eps: f64 = 1e-6, "adv_eps";
    completion_len: usize = 16, "completion_len";
    temperature: f64 = 1.0, "temperature";
    prompt_len: usize = 32, "prompt_len";
    // cost estimation
    mode: String = "annotation".into(), "mode";
    prices: String = "stated".into(), "prices";
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("key {key:?}: cannot parse {value:?} as {}", std::any::type_name::<T>())))
}

impl RunConfig {
    /// Parses a flat config file over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() || value.contains('=') {
                return Err(Error::config(format!("line {}: malformed entry {line:?}", n + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::config(format!("line {}: {}", n + 1, strip_kind(&e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn max_steps_opt(&self) -> Option<u64> {
        (self.max_steps > 0).then_some(self.max_steps)
    }

    /// Minimum block length for sentence-aware splitting.
    pub fn min_len_resolved(&self) -> usize {
        if self.min_len == 0 {
            self.l1 + 1
        } else {
            self.min_len
        }
    }

    pub fn grad_clip_opt(&self) -> Option<f64> {
        (self.grad_clip > 0.0).then_some(self.grad_clip)
    }
}

fn strip_kind(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.b, c.c, c.beta1, c.beta2, c.warmup_ratio, c.lr), (32, 0.01, 0.9, 0.95, 0.05, 1e-6));
        assert_eq!((c.k, c.lambda, c.seed), (8, 0.1, 2025));
    }

    #[test]
    fn overrides_and_comments() {
        let c = RunConfig::parse("# comment\n\nB=8\n c = 0.0 \nshuffle=true\n").unwrap();
        assert_eq!(c.b, 8);
        assert_eq!(c.c, 0.0);
        assert!(c.shuffle);
    }

    #[test]
    fn errors_name_line_and_key() {
        let e = RunConfig::parse("B=8\nB==\n").unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
        let e = RunConfig::parse("bogus=1").unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("bogus"), "{e}");
        let e = RunConfig::parse("\nB=eight").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("\"B\""), "{e}");
        assert!(RunConfig::parse("novalue").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.set("lr", "0.003").unwrap();
        c.set("N_list", "1,4").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(c.to_text().lines().count(), RunConfig::KEYS.len());
    }
}
