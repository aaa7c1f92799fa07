use std::fs;
use std::path::{Path, PathBuf};

use rbs_core::config::RunConfig;
use rbs_core::corpus::{
    chunk_stream, concat_stream, gen_synthetic_corpus, load_documents, synthetic_stream, synthetic_vocab, Document,
    SyntheticSpec, TokenSequence, Tokenizer, Vocab, DEFAULT_SEPARATOR,
};
use rbs_core::costs::{self, cost_table, CostMode, PriceSpec};
use rbs_core::io::{is_token_stream, read_token_stream, write_atomic, write_token_stream};
use rbs_core::objective::CenterMode;
use rbs_core::policy::{gen_grpo_task, grpo_train_toy, reward_curve_csv, GrpoConfig};
use rbs_core::scorer::{init_params, load_checkpoint, Architecture, ScorerConfig, ScorerParams};
use rbs_core::selection::{bon_curve, delta_map, gen_bon_task, map, parse_n_list, score_all, sets_from_jsonl, sets_to_jsonl, BoNTaskSpec};
use rbs_core::splitter::{
    fixed_split, load_pairs, random_breakpoint_split, sentence_aware_split, write_pairs, OversizePolicy,
    PrefixSuffixPair, SentenceSplitConfig, SplitStats,
};
use rbs_core::trainer::{
    make_batches, parse_triples, train, train_curated, validate, TrainConfig, TrainOutcome, ValidationStats,
};
use rbs_core::{Error, Result};

use crate::{Cli, Command, Flags, SplitKind, TokenizerFlag};

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numerical(_) => 3,
        Error::Domain(_) | Error::Format(_) | Error::Io(_) => 2,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.flags, &cli.command)?;
    let name = command_name(&cli.command);
    if let Command::Cost { rows } = &cli.command {
        let out = run_dir(&cli.flags, name, false);
        return cost(&cfg, rows.as_deref(), out.as_deref());
    }
    let out = run_dir(&cli.flags, name, true).expect("default run directory");
    fs::create_dir_all(&out)?;
    write_atomic(&out.join("config.cfg"), cfg.to_text().as_bytes())?;
    match &cli.command {
        Command::Prepare { input } => prepare(&cfg, input, &out),
        Command::Synth => synth(&cfg, &out),
        Command::Train { input, val, init } => train_cmd(&cfg, input, val.as_deref(), init.as_deref(), &out),
        Command::TrainCurated { input, val, init, vocab } => {
            train_curated_cmd(&cfg, input, val.as_deref(), init.as_deref(), vocab.as_deref(), &out)
        }
        Command::Validate { checkpoint, input } => validate_cmd(&cfg, checkpoint, input, &out),
        Command::Bon {
            checkpoint,
            baseline,
            input,
        } => bon(&cfg, checkpoint, baseline.as_deref(), input.as_deref(), &out),
        Command::Grpo { checkpoint } => grpo(&cfg, checkpoint, &out),
        Command::Cost { .. } => unreachable!(),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Prepare { .. } => "prepare",
        Command::Synth => "synth",
        Command::Train { .. } => "train",
        Command::TrainCurated { .. } => "train-curated",
        Command::Validate { .. } => "validate",
        Command::Bon { .. } => "bon",
        Command::Grpo { .. } => "grpo",
        Command::Cost { .. } => "cost",
    }
}

/// `--out`, else `$RBS_OUT/<subcommand>`, else `runs/<subcommand>` when a
/// directory is required.
fn run_dir(flags: &Flags, name: &str, required: bool) -> Option<PathBuf> {
    if let Some(o) = &flags.out {
        return Some(o.clone());
    }
    match std::env::var_os("RBS_OUT") {
        Some(root) => Some(PathBuf::from(root).join(name)),
        None => required.then(|| PathBuf::from("runs").join(name)),
    }
}

/// Config file, then `RBS_SEED`, then command-line flags.
fn resolve_config(flags: &Flags, command: &Command) -> Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read config {}: {io}", p.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    if let Ok(s) = std::env::var("RBS_SEED") {
        cfg.set("seed", &s).map_err(|_| Error::Config(format!("RBS_SEED must be an integer, got {s:?}")))?;
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.split {
        cfg.split = match v {
            SplitKind::Fixed => "fixed",
            SplitKind::Sentence => "sentence",
            SplitKind::RandomBreakpoint => "random-breakpoint",
        }
        .into();
    }
    if let Some(v) = flags.l1 {
        cfg.l1 = v;
    }
    if let Some(v) = flags.l2 {
        cfg.l2 = v;
    }
    match flags.l {
        Some(v) => cfg.l = v,
        None if flags.l1.is_some() || flags.l2.is_some() => cfg.l = cfg.l1 + cfg.l2,
        None => {}
    }
    if let Some(v) = flags.b {
        cfg.b = v;
    }
    if let Some(v) = flags.c {
        cfg.c = v;
    }
    if let Some(v) = flags.lr {
        cfg.lr = v;
    }
    if let Some(v) = flags.token_budget {
        cfg.token_budget = v;
    }
    if let Some(v) = flags.tokenizer {
        cfg.tokenizer = match v {
            TokenizerFlag::Byte => "byte",
            TokenizerFlag::Whitespace => "whitespace",
        }
        .into();
    }
    if let Some(v) = &flags.n_list {
        cfg.n_list = v.clone();
    }
    if let Some(v) = flags.k {
        cfg.k = v;
    }
    if let Some(v) = flags.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = flags.clip {
        cfg.clip = v;
    }
    if let Some(v) = &flags.mode {
        cfg.mode = v.clone();
    }
    if let Some(v) = &flags.prices {
        cfg.prices = v.clone();
    }
    if let Command::Cost { .. } = command {
        CostMode::parse(&cfg.mode)?;
        PriceSpec::parse(&cfg.prices)?;
    }
    Ok(cfg)
}

fn synthetic_spec(cfg: &RunConfig, seed_offset: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_docs: cfg.n_docs,
        vocab_size: cfg.vocab_size,
        n_keys: cfg.n_keys,
        key_density: cfg.key_density,
        doc_len: cfg.doc_len,
        seed: cfg.seed.wrapping_add(seed_offset),
    }
}

fn bon_spec(cfg: &RunConfig) -> BoNTaskSpec {
    BoNTaskSpec {
        corpus: synthetic_spec(cfg, 1),
        n_prompts: cfg.n_prompts,
        n_candidates: cfg.n_candidates,
        prompt_len: cfg.l1,
        candidate_len: cfg.l2,
        correct_rate: cfg.correct_rate,
    }
}

fn scorer_config(cfg: &RunConfig, vocab_size: u32) -> Result<ScorerConfig> {
    let architecture = match cfg.arch.as_str() {
        "bilinear" => Architecture::Bilinear,
        "mlp" => Architecture::Mlp { hidden: cfg.mlp_hidden },
        other => return Err(Error::Config(format!("unknown arch {other:?}; expected bilinear or mlp"))),
    };
    let sc = ScorerConfig {
        vocab_size,
        embed_dim: cfg.embed_dim,
        architecture,
        init_scale: cfg.init_scale,
    };
    sc.validate()?;
    Ok(sc)
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let center_mode = match cfg.center_mode.as_str() {
        "expectation" => CenterMode::Expectation,
        "pooled" => CenterMode::Pooled,
        other => return Err(Error::Config(format!("unknown center_mode {other:?}; expected expectation or pooled"))),
    };
    let tc = TrainConfig {
        batch_size: cfg.b,
        c: cfg.c,
        center_mode,
        base_lr: cfg.lr,
        warmup_ratio: cfg.warmup_ratio,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
        token_budget: cfg.token_budget,
        max_steps: cfg.max_steps_opt(),
        seed: cfg.seed,
        checkpoint_every: cfg.checkpoint_every,
        val_every: cfg.val_every,
        shuffle: cfg.shuffle,
        grad_clip: cfg.grad_clip_opt(),
    };
    tc.validate()?;
    Ok(tc)
}

fn build_tokenizer(cfg: &RunConfig, docs: &[Document]) -> Result<Tokenizer> {
    match cfg.tokenizer.as_str() {
        "byte" => Ok(Tokenizer::byte()),
        "whitespace" => Ok(Tokenizer::whitespace(Vocab::build_by_frequency(
            docs.iter().map(|d| d.text.as_str()),
            cfg.vocab_cap,
        )?)),
        other => Err(Error::Config(format!("unknown tokenizer {other:?}; expected byte or whitespace"))),
    }
}

fn split_stream(cfg: &RunConfig, stream: &TokenSequence) -> Result<Vec<PrefixSuffixPair>> {
    let chunks = chunk_stream(stream, cfg.l)?;
    match cfg.split.as_str() {
        "fixed" => chunks.iter().map(|c| fixed_split(c, cfg.l1, cfg.l2)).collect(),
        "random-breakpoint" => {
            let max = if cfg.max_prefix == 0 { cfg.l - 1 } else { cfg.max_prefix };
            random_breakpoint_split(&chunks, cfg.min_prefix, max, cfg.seed)
        }
        "sentence" => Err(Error::Config("sentence splitting needs a document corpus, not a token stream".into())),
        other => Err(Error::Config(format!(
            "unknown split {other:?}; expected fixed, sentence or random-breakpoint"
        ))),
    }
}

fn prepare(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let (pairs, vocab_size) = if is_token_stream(input) {
        let stream = read_token_stream(input)?;
        (split_stream(cfg, &stream)?, stream.vocab_size)
    } else {
        let docs = load_documents(input)?;
        if docs.is_empty() {
            return Err(Error::Format(format!("{}: no documents", input.display())));
        }
        let tok = build_tokenizer(cfg, &docs)?;
        if let Some(v) = tok.vocab() {
            write_atomic(&out.join("vocab.tsv"), v.to_tsv().as_bytes())?;
        }
        let vocab_size = tok.vocab_size()?;
        if cfg.split == "sentence" {
            let sc = SentenceSplitConfig {
                max_len: cfg.max_len,
                min_len: cfg.min_len_resolved(),
                target_prefix: cfg.target_prefix,
                oversize: match cfg.oversize.as_str() {
                    "split" => OversizePolicy::Split,
                    "discard" => OversizePolicy::Discard,
                    other => return Err(Error::Config(format!("unknown oversize {other:?}; expected split or discard"))),
                },
                eos: Some(DEFAULT_SEPARATOR),
            };
            let mut pairs = Vec::new();
            let mut stats = SplitStats::default();
            for d in &docs {
                let (p, s) = sentence_aware_split(d, &tok, &sc)?;
                pairs.extend(p);
                stats.merge(&s);
            }
            let text = format!(
                "blocks,emitted,short_blocks,unsplittable_blocks,oversize_units\n{},{},{},{},{}\n",
                stats.blocks, stats.emitted, stats.short_blocks, stats.unsplittable_blocks, stats.oversize_units
            );
            write_atomic(&out.join("split_stats.csv"), text.as_bytes())?;
            (pairs, vocab_size)
        } else {
            let stream = concat_stream(&docs, &tok, DEFAULT_SEPARATOR)?;
            (split_stream(cfg, &stream)?, vocab_size)
        }
    };
    write_pairs(out, &pairs, vocab_size)?;
    println!("pairs={} vocab_size={vocab_size} out={}", pairs.len(), out.display());
    Ok(())
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = synthetic_spec(cfg, 0);
    let stream = synthetic_stream(&spec)?;
    write_token_stream(&out.join("stream.bin"), &stream)?;
    let mut jsonl = String::new();
    for d in gen_synthetic_corpus(&spec)? {
        let rec = serde_json::json!({ "id": d.id, "text": d.text, "source": d.source });
        jsonl.push_str(&rec.to_string());
        jsonl.push('\n');
    }
    write_atomic(&out.join("corpus.jsonl"), jsonl.as_bytes())?;
    write_atomic(&out.join("vocab.tsv"), synthetic_vocab(spec.vocab_size).to_tsv().as_bytes())?;
    let sets = gen_bon_task(&bon_spec(cfg))?;
    write_atomic(&out.join("bon.jsonl"), sets_to_jsonl(&sets).as_bytes())?;
    println!(
        "docs={} stream_tokens={} bon_sets={} out={}",
        spec.n_docs,
        stream.len(),
        sets.len(),
        out.display()
    );
    Ok(())
}

fn vocab_of(pairs: &[PrefixSuffixPair]) -> Result<u32> {
    pairs
        .first()
        .map(|p| p.prefix.vocab_size)
        .ok_or_else(|| Error::Format("pair file is empty".into()))
}

fn load_init(cfg: &RunConfig, init: Option<&Path>, vocab_size: u32) -> Result<(ScorerParams, Option<rbs_core::trainer::OptimizerState>)> {
    match init {
        Some(p) => {
            let (params, state) = load_checkpoint(p)?;
            if params.config.vocab_size < vocab_size {
                return Err(Error::Format(format!(
                    "checkpoint vocab {} smaller than data vocab {vocab_size}",
                    params.config.vocab_size
                )));
            }
            Ok((params, state))
        }
        None => Ok((init_params(&scorer_config(cfg, vocab_size)?, cfg.seed)?, None)),
    }
}

fn report(outcome: &TrainOutcome) {
    println!("steps={} tokens_seen={}", outcome.steps, outcome.tokens_seen);
    if let Some(m) = outcome.metrics.last() {
        println!(
            "total_loss={} val_rank_acc={} val_margin={} val_mean_sq_score={}",
            m.total_loss, m.val.rank_acc, m.val.margin, m.val.mean_sq_score
        );
    }
}

fn train_cmd(cfg: &RunConfig, input: &Path, val: Option<&Path>, init: Option<&Path>, out: &Path) -> Result<()> {
    let tc = train_config(cfg)?;
    let mut pairs = load_pairs(input, None)?;
    let vocab_size = vocab_of(&pairs)?;
    let val_pairs = match val {
        Some(p) => load_pairs(p, Some(vocab_size))?,
        None => {
            let n_val = cfg.val_batches * cfg.b;
            if pairs.len() < n_val + cfg.b {
                return Err(Error::Config(format!(
                    "{} pairs cannot hold {} validation batches plus one training batch of {}",
                    pairs.len(),
                    cfg.val_batches,
                    cfg.b
                )));
            }
            pairs.split_off(pairs.len() - n_val)
        }
    };
    let val_batches = if val_pairs.is_empty() {
        Vec::new()
    } else {
        make_batches(&val_pairs, cfg.b, None)?
    };
    let (params, state) = load_init(cfg, init, vocab_size)?;
    let outcome = train(&tc, params, state, &pairs, &val_batches, Some(out))?;
    report(&outcome);
    Ok(())
}

fn train_curated_cmd(
    cfg: &RunConfig,
    input: &Path,
    val: Option<&Path>,
    init: Option<&Path>,
    vocab: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let tc = train_config(cfg)?;
    let text = fs::read_to_string(input)?;
    let tok = match vocab {
        Some(p) => Tokenizer::whitespace(Vocab::from_tsv(&fs::read_to_string(p)?)?),
        None => {
            let docs: Vec<Document> = text.lines().map(|l| Document::new("", l, "triples")).collect();
            build_tokenizer(cfg, &docs)?
        }
    };
    let triples = parse_triples(&text, &tok)?;
    let val = match val {
        Some(p) => parse_triples(&fs::read_to_string(p)?, &tok)?,
        None => Vec::new(),
    };
    let (params, state) = load_init(cfg, init, tok.vocab_size()?)?;
    let outcome = train_curated(&tc, params, state, &triples, &val, Some(out))?;
    report(&outcome);
    Ok(())
}

fn validation_csv(v: &ValidationStats) -> String {
    format!(
        "val_rank_acc,val_mean_pos,val_mean_neg,val_margin,val_mean_sq_score,rows\n{},{},{},{},{},{}\n",
        v.rank_acc, v.mean_pos, v.mean_neg, v.margin, v.mean_sq_score, v.rows
    )
}

fn validate_cmd(cfg: &RunConfig, checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let (params, _) = load_checkpoint(checkpoint)?;
    let pairs = load_pairs(input, None)?;
    let v = validate(&params, &make_batches(&pairs, cfg.b, None)?)?;
    let csv = validation_csv(&v);
    write_atomic(&out.join("validation.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn bon(cfg: &RunConfig, checkpoint: &Path, baseline: Option<&Path>, input: Option<&Path>, out: &Path) -> Result<()> {
    let (params, _) = load_checkpoint(checkpoint)?;
    let base = match baseline {
        Some(p) => load_checkpoint(p)?.0,
        None => init_params(&params.config, cfg.seed)?,
    };
    let sets = match input {
        Some(p) => sets_from_jsonl(&fs::read_to_string(p)?)?,
        None => gen_bon_task(&bon_spec(cfg))?,
    };
    let ns = parse_n_list(&cfg.n_list)?;
    let curve = bon_curve(&score_all(&params, &sets)?, &ns)?;
    let base_curve = bon_curve(&score_all(&base, &sets)?, &ns)?;
    let delta = delta_map(&curve, &base_curve)?;
    write_atomic(&out.join("curve.csv"), curve.to_csv().as_bytes())?;
    write_atomic(&out.join("baseline_curve.csv"), base_curve.to_csv().as_bytes())?;
    let summary = format!("MAP,{}\nbaseline_MAP,{}\ndelta_MAP,{delta}\n", map(&curve), map(&base_curve));
    write_atomic(&out.join("summary.csv"), summary.as_bytes())?;
    print!("{}baseline_MAP,{}\ndelta_MAP,{delta}\n", curve.to_csv(), map(&base_curve));
    Ok(())
}

fn grpo(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let (params, _) = load_checkpoint(checkpoint)?;
    let task = gen_grpo_task(&synthetic_spec(cfg, 2), cfg.n_prompts, cfg.prompt_len)?;
    if task.vocab_size > params.config.vocab_size {
        return Err(Error::Format(format!(
            "task vocab {} exceeds scorer vocab {}",
            task.vocab_size, params.config.vocab_size
        )));
    }
    let gc = GrpoConfig {
        k: cfg.k,
        lambda: cfg.lambda,
        clip: cfg.clip,
        epochs: cfg.epochs,
        inner_steps: cfg.inner_steps,
        lr: cfg.grpo_lr,
        seed: cfg.seed,
        eps: cfg.adv_eps,
        completion_len: cfg.completion_len,
        temperature: cfg.temperature,
    };
    let outcome = grpo_train_toy(&gc, &params, &task)?;
    let csv = reward_curve_csv(&outcome.curve);
    write_atomic(&out.join("reward_curve.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn cost(cfg: &RunConfig, rows: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let mode = CostMode::parse(&cfg.mode)?;
    let prices = PriceSpec::parse(&cfg.prices)?;
    let rows = match rows {
        Some(p) => costs::load_rows(p)?,
        None => costs::parse_rows(match mode {
            CostMode::Generation => costs::GENERATION_ROWS_CSV,
            CostMode::Annotation => costs::ANNOTATION_ROWS_CSV,
        })?,
    };
    let csv = cost_table(&rows, &prices, mode)?.to_csv();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("config.cfg"), cfg.to_text().as_bytes())?;
        write_atomic(&dir.join("costs.csv"), csv.as_bytes())?;
    }
    print!("{csv}");
    Ok(())
}
