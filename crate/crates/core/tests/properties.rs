//! Cross-module invariants, checked on generated inputs.

use proptest::prelude::*;

use rbs_core::corpus::{
    chunk_stream, concat_stream, gen_synthetic_tokens, Document, SyntheticSpec, TokenSequence, Tokenizer,
};
use rbs_core::costs::{annotation_cost, generation_cost, DatasetCostRow, PriceSpec};
use rbs_core::objective::{bt_loss, center_loss};
use rbs_core::policy::kl_mse;
use rbs_core::scorer::{init_params, Architecture, ScoreMatrix, ScorerConfig};
use rbs_core::selection::bon_select;
use rbs_core::splitter::{
    fixed_split, sentence_aware_split, OversizePolicy, PairOrigin, PrefixSuffixPair, SentenceSplitConfig,
};
use rbs_core::trainer::{train, TrainConfig};

fn square(max_b: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2..=max_b).prop_flat_map(|b| proptest::collection::vec(proptest::collection::vec(-30.0f64..30.0, b), b))
}

fn pair(tokens: Vec<u32>, cut: usize, vocab: u32) -> PrefixSuffixPair {
    PrefixSuffixPair {
        prefix: TokenSequence::new(tokens[..cut].to_vec(), vocab).unwrap(),
        suffix: TokenSequence::new(tokens[cut..].to_vec(), vocab).unwrap(),
        origin: PairOrigin {
            source: "prop".into(),
            index: 0,
            offset: 0,
        },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chunking_keeps_whole_chunks(tokens in proptest::collection::vec(0u32..100, 0..500), l in 2usize..64) {
        let s = TokenSequence::new(tokens.clone(), 100).unwrap();
        let chunks = chunk_stream(&s, l).unwrap();
        let total: usize = chunks.iter().map(|c| c.len()).sum();
        prop_assert_eq!(total, tokens.len() / l * l);
        for c in &chunks {
            prop_assert_eq!(c.tokens.as_slice(), &tokens[c.offset..c.offset + l]);
        }
    }

    #[test]
    fn concat_associative(texts in proptest::collection::vec("[a-z .]{0,20}", 3..6), cut in 1usize..3) {
        let docs: Vec<Document> = texts.iter().enumerate().map(|(i, t)| Document::new(i.to_string(), t.clone(), "p")).collect();
        let tok = Tokenizer::byte();
        let whole = concat_stream(&docs, &tok, 0).unwrap();
        let left = concat_stream(&docs[..cut], &tok, 0).unwrap();
        let right = concat_stream(&docs[cut..], &tok, 0).unwrap();
        let mut joined = left.tokens.clone();
        joined.push(0);
        joined.extend(&right.tokens);
        prop_assert_eq!(whole.tokens, joined);
    }

    #[test]
    fn bt_depends_only_on_row_margins(rows in square(10), shift in -50.0f64..50.0, r in 0usize..10) {
        let b = rows.len();
        let r = r % b;
        let mut shifted = rows.clone();
        for x in shifted[r].iter_mut() {
            *x += shift;
        }
        let s = ScoreMatrix::from_rows(&rows).unwrap();
        let t = ScoreMatrix::from_rows(&shifted).unwrap();
        prop_assert!((bt_loss(&s).unwrap() - bt_loss(&t).unwrap()).abs() < 1e-9);
        if shift.abs() > 1e-3 {
            prop_assert!((center_loss(&s).unwrap() - center_loss(&t).unwrap()).abs() > 0.0);
        }
        prop_assert!(bt_loss(&s).unwrap() > 0.0);
    }

    #[test]
    fn score_matrix_matches_pairwise(seed in 0u64..1000, b in 2usize..7, mlp in any::<bool>()) {
        let mut cfg = ScorerConfig::bilinear(40, 4);
        if mlp {
            cfg.architecture = Architecture::Mlp { hidden: 5 };
        }
        let params = init_params(&cfg, seed).unwrap();
        let batch: Vec<_> = (0..b)
            .map(|i| pair((0..9).map(|k| ((seed as usize + 7 * i + 3 * k) % 40) as u32).collect(), 1 + (i % 7), 40))
            .collect();
        let m = params.score_matrix(&batch).unwrap();
        prop_assert!(m.is_finite());
        for i in 0..b {
            for j in 0..b {
                let naive = params.score_pair(batch[i].prefix.as_slice(), batch[j].suffix.as_slice()).unwrap();
                prop_assert!((m.get(i, j) - naive).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn sentence_split_invariants(words in proptest::collection::vec("[a-z]{1,6}[.!?]?", 1..80), max_len in 20usize..80) {
        let text = words.join(" ");
        let cfg = SentenceSplitConfig {
            max_len,
            min_len: max_len / 4 + 2,
            target_prefix: max_len / 3,
            oversize: OversizePolicy::Split,
            eos: Some(0),
        };
        let doc = Document::new("d", text.clone(), "p");
        let tok = Tokenizer::byte();
        let (a, _) = sentence_aware_split(&doc, &tok, &cfg).unwrap();
        let (b, _) = sentence_aware_split(&doc, &tok, &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        for p in &a {
            let n = p.prefix.len() + p.suffix.len();
            prop_assert!(n >= cfg.min_len && n <= cfg.max_len);
            prop_assert!(!p.prefix.is_empty() && !p.suffix.is_empty());
        }
    }

    #[test]
    fn token_accounting(b in 2usize..6, l1 in 1usize..6, l2 in 1usize..6, budget in 1u64..400, n in 2usize..30) {
        let vocab = 16;
        let pairs: Vec<_> = (0..n.max(b))
            .map(|i| pair((0..l1 + l2).map(|k| ((i + k) % 16) as u32).collect(), l1, vocab))
            .collect();
        let cfg = TrainConfig { batch_size: b, base_lr: 0.01, token_budget: budget, ..TrainConfig::default() };
        let out = train(&cfg, init_params(&ScorerConfig::bilinear(vocab, 3), 1).unwrap(), None, &pairs, &[], None).unwrap();
        let per_step = (b * (l1 + l2)) as u64;
        prop_assert_eq!(out.tokens_seen, out.steps * per_step);
        prop_assert_eq!(out.steps, budget.div_ceil(per_step).max(1));
    }

    #[test]
    fn costs_are_linear(n in 1u64..100_000, p in 0.0f64..2000.0, a in 0.0f64..2000.0, r in 0.0f64..2000.0,
                        p_in in 0.1f64..20.0, p_out in 0.1f64..40.0) {
        let row = DatasetCostRow { name: "x".into(), n, prompt_len: p, pref_len: a, rej_len: r };
        let prices = PriceSpec { p_in, p_out, ..PriceSpec::stated() };
        let doubled_out = PriceSpec { p_out: 2.0 * p_out, ..prices };
        let double_n = DatasetCostRow { n: 2 * n, ..row.clone() };
        for f in [generation_cost, annotation_cost] {
            let base = f(&row, &prices);
            let out_part = base.t_out / 1e6 * p_out;
            prop_assert!((f(&row, &doubled_out).cost - (base.cost + out_part)).abs() <= 1e-9 * base.cost.max(1.0));
            prop_assert!((f(&double_n, &prices).cost - 2.0 * base.cost).abs() <= 1e-9 * base.cost.max(1.0));
        }
        let bare = PriceSpec { o_in_judge: 0.0, o_out_judge: 0.0, ..prices };
        let no_prompt = DatasetCostRow { prompt_len: 0.0, ..row.clone() };
        let c = annotation_cost(&no_prompt, &bare);
        prop_assert!((c.cost - n as f64 * (a + r) / 1e6 * p_in).abs() <= 1e-9 * c.cost.max(1.0));
    }

    #[test]
    fn kl_zero_iff_equal(a in proptest::collection::vec(-5.0f64..0.0, 1..10), k in 0usize..10, d in -1.0f64..1.0) {
        let x = vec![a.clone()];
        prop_assert_eq!(kl_mse(&x, &x).unwrap(), 0.0);
        let mut b = a.clone();
        let k = k % b.len();
        b[k] += d;
        let v = kl_mse(&x, &[b]).unwrap();
        prop_assert!(v >= 0.0);
        prop_assert_eq!(v == 0.0, d == 0.0);
    }

    #[test]
    fn selected_score_dominates(scores in proptest::collection::vec(-5.0f64..5.0, 1..40), n in 1usize..40) {
        let n = n.min(scores.len());
        let k = bon_select(&scores, n).unwrap();
        prop_assert!(k < n);
        prop_assert!(scores[..n].iter().all(|&s| s <= scores[k]));
        prop_assert!(scores[..k].iter().all(|&s| s < scores[k]));
    }
}

#[test]
fn key_frequency_near_density() {
    for (density, seed) in [(0.1, 1), (0.4, 2), (0.75, 3)] {
        let spec = SyntheticSpec {
            n_docs: 20,
            vocab_size: 256,
            n_keys: 32,
            key_density: density,
            doc_len: 2000,
            seed,
        };
        for d in gen_synthetic_tokens(&spec).unwrap() {
            let hits = d.tokens.iter().filter(|&&t| t == d.key).count() as f64;
            let n = d.tokens.len() as f64;
            let sigma = (density * (1.0 - density) / n).sqrt();
            assert!((hits / n - density).abs() <= 3.0 * sigma + 1e-12, "density {density}: {}", hits / n);
        }
    }
}

#[test]
fn fixed_split_rejects_wrong_length() {
    let s = TokenSequence::new((0..10).collect(), 10).unwrap();
    let chunk = &chunk_stream(&s, 10).unwrap()[0];
    assert!(fixed_split(chunk, 3, 6).is_err());
    assert!(fixed_split(chunk, 0, 10).is_err());
}
