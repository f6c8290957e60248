use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::Rng;
use serde_json::json;

use card_core::analysis::{self, ContinuityConfig, MiConfig, WeightSweepConfig};
use card_core::corruption::{mask_count, tail_window};
use card_core::inference::{self, GridSetting, GRID_HEADER};
use card_core::rng::{stream, Purpose};
use card_core::trainer::{self, RunOutput};
use card_core::weighting::WeightVector;
use card_core::{
    Checkpoint, Dataset, LabConfig, MarkovSource, MaskStrategy, Model, Objective, TokenId, TrainState, Vocab,
};

use crate::{
    BenchDecodeArgs, BenchTrainArgs, Common, ComplexityArgs, ContinuityArgs, EvalArgs,
    GenerateArgs, InspectArgs, MiArgs, TrainArgs, Usage, WeightArgs,
};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

/// Turns a configuration failure into a usage error.
fn config_err(e: impl std::fmt::Display) -> anyhow::Error {
    usage(format!("configuration: {e}"))
}

/// Defaults, then an optional base blob, the config file, `--set` overrides
/// and finally the subcommand's own flags.
fn resolve(common: &Common, base: Option<&str>, flags: &[(&str, String)]) -> Result<LabConfig> {
    let mut cfg = LabConfig::default();
    if let Some(text) = base {
        cfg.apply_text(text).map_err(config_err)?;
    }
    if let Some(path) = &common.config {
        if !path.exists() {
            return Err(usage(format!(
                "config file `{}` not found; pass an existing key = value file or drop --config",
                path.display()
            )));
        }
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text).map_err(config_err)?;
    }
    cfg.apply_overrides(&common.overrides).map_err(config_err)?;
    for (k, v) in flags {
        cfg.set(k, v).map_err(config_err)?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.decode.seed = seed;
    }
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

/// Writes the resolved configuration to `<out>/config.txt`.
fn snapshot(common: &Common, cfg: &LabConfig, subcommand: &str) -> Result<()> {
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    let path = common.out.join("config.txt");
    let text = format!("# resolved configuration of `card {subcommand}`\n{}", cfg.to_text());
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_out(common: &Common, name: &str, contents: &str) -> Result<PathBuf> {
    let path = common.out.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(usage(format!(
            "checkpoint `{}` not found; create one with `card train --out DIR` and pass DIR/final.ck",
            path.display()
        )));
    }
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

/// Configuration stored in a checkpoint with command-line changes on top, and
/// the model it holds.
fn checkpoint_model(common: &Common, path: &Path, flags: &[(&str, String)]) -> Result<(LabConfig, Model<f32>)> {
    let ck = load_checkpoint(path)?;
    let cfg = resolve(common, Some(&ck.config), flags)?;
    let model_cfg = cfg.model_config().map_err(config_err)?;
    let state = TrainState::from_checkpoint(&ck, &model_cfg)
        .with_context(|| format!("checkpoint `{}` does not match its configuration", path.display()))?;
    Ok((cfg, state.eval_model()))
}

fn is_symbolic(vocab: &Vocab) -> bool {
    vocab.data_symbols() <= 10
}

fn encode_prompt(vocab: &Vocab, text: &str) -> Result<Vec<TokenId>> {
    if !is_symbolic(vocab) {
        return Ok(card_core::corpus::tokenize(text));
    }
    text.chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| match c.to_digit(10) {
            Some(d) if (d as usize) < vocab.data_symbols() => Ok(d as TokenId),
            _ => Err(usage(format!(
                "prompt symbol `{c}` is outside this vocabulary (digits 0..{})",
                vocab.data_symbols() - 1
            ))),
        })
        .collect()
}

fn render(vocab: &Vocab, ids: &[TokenId]) -> String {
    if is_symbolic(vocab) {
        ids.iter().map(|&id| char::from_digit(u32::from(id), 10).unwrap_or('?')).collect()
    } else {
        card_core::corpus::detokenize_lossy(ids)
    }
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(o) = &args.objective {
        flags.push(("objective.name", o.clone()));
    }
    if let Some(s) = args.steps {
        flags.push(("train.steps", s.to_string()));
    }
    let cfg = resolve(&args.common, None, &flags)?;
    snapshot(&args.common, &cfg, "train")?;
    let (vocab, corpus) = cfg.data.load().context("loading training data")?;
    let model_cfg = cfg.model_config().map_err(config_err)?;
    let state = match &args.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            TrainState::from_checkpoint(&ck, &model_cfg)
                .with_context(|| format!("checkpoint `{}` does not match the configuration", path.display()))?
        }
        None => TrainState::new(Model::init(model_cfg, cfg.train.seed)?, cfg.train.ema_decay.is_some()),
    };
    let validation = (!corpus.validation.is_empty()).then_some(&corpus.validation);
    let output = RunOutput { dir: args.common.out.clone(), config_blob: cfg.to_text() };
    log::info!(
        "training {} on {} sequences of {} tokens",
        cfg.objective.objective.name(),
        corpus.train.len(),
        cfg.data.seq_len
    );
    let (_, summary, _) =
        trainer::train(&cfg.train, &cfg.objective, &vocab, &corpus.train, validation, state, Some(output))?;
    let fmt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
    println!("steps = {}", summary.steps);
    println!("final_train_loss = {}", fmt(summary.final_train_loss));
    println!("final_validation = {}", fmt(summary.final_validation));
    println!("best_validation = {}", fmt(summary.best_validation));
    if summary.skipped_steps > 0 {
        println!("skipped_steps = {}", summary.skipped_steps);
    }
    if let Some(src) = cfg.data.markov_source()? {
        let h = src.entropy_rate()?;
        println!("source_entropy_rate = {h:.6}");
        if let (Some(v), true) = (summary.final_validation, cfg.objective.objective.is_causal()) {
            println!("validation_over_entropy_rate = {:.4}", v / h);
        }
    }
    println!("checkpoint = {}", args.common.out.join("final.ck").display());
    Ok(())
}

pub fn eval_ppl(args: EvalArgs) -> Result<()> {
    let (cfg, model) = checkpoint_model(&args.common, &args.checkpoint, &[])?;
    snapshot(&args.common, &cfg, "eval-ppl")?;
    let (vocab, corpus) = cfg.data.load().context("loading evaluation data")?;
    let data: &Dataset = match args.split.as_str() {
        "validation" => &corpus.validation,
        "train" => &corpus.train,
        other => return Err(usage(format!("unknown split `{other}` (expected validation or train)"))),
    };
    if data.is_empty() {
        return Err(usage(format!(
            "the {} split is empty; raise data.val_fraction or data.tokens",
            args.split
        )));
    }
    let (kind, nll) = if cfg.objective.objective.is_causal() {
        ("next_token", inference::eval_ppl(&model, data, &vocab)?.ln())
    } else {
        let v = trainer::evaluate(&model, data, &cfg.objective, &vocab, cfg.train.seed, 0)?;
        ("objective_bound", v)
    };
    let mut csv = String::from("split,sequences,tokens,measure,nll,ppl\n");
    let _ = writeln!(
        csv,
        "{},{},{},{kind},{nll:.6},{:.6}",
        args.split,
        data.len(),
        data.token_count(),
        nll.exp()
    );
    write_out(&args.common, "eval.csv", &csv)?;
    print!("{csv}");
    if let Some(src) = cfg.data.markov_source()? {
        let h = src.entropy_rate()?;
        println!("# source entropy rate {h:.6} nats, ppl {:.6}", h.exp());
    }
    Ok(())
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(k) = args.block_size {
        flags.push(("decode.block_size", k.to_string()));
    }
    if let Some(t) = args.tau {
        flags.push(("decode.threshold", t.to_string()));
    }
    if let Some(t) = args.max_iters {
        flags.push(("decode.max_iters", t.to_string()));
    }
    if let Some(n) = args.tokens {
        flags.push(("decode.max_new_tokens", n.to_string()));
    }
    let (cfg, model) = checkpoint_model(&args.common, &args.checkpoint, &flags)?;
    snapshot(&args.common, &cfg, "generate")?;
    let vocab = cfg.data.vocab()?;
    let prompt = encode_prompt(&vocab, &args.prompt)?;
    let generation = if args.arm {
        inference::decode_arm(&model, &vocab, &prompt, cfg.decode.max_new_tokens)?
    } else {
        inference::generate(&model, &vocab, &prompt, &cfg.decode)?
    };
    if let Some(path) = &args.trace {
        let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        for b in &generation.trace.blocks {
            let line = json!({
                "block": b.block_index,
                "iterations": b.iterations,
                "committed_per_iter": b.committed_per_iter,
                "confidences": b.confidences,
                "forwards": b.forwards,
                "positions": b.positions,
            });
            writeln!(f, "{line}")?;
        }
        let t = &generation.trace;
        let summary = json!({
            "summary": true,
            "tokens": t.tokens,
            "forwards": t.forwards,
            "prefill_forwards": t.prefill_forwards,
            "tokens_per_forward": t.tokens_per_forward(),
            "truncated": t.truncated,
        });
        writeln!(f, "{summary}")?;
    }
    println!("{}", render(&vocab, &generation.tokens()));
    let t = &generation.trace;
    log::info!(
        "{} tokens in {} forwards ({:.3} per forward){}",
        t.tokens,
        t.forwards,
        t.tokens_per_forward(),
        if t.truncated { ", cut short by the context length" } else { "" }
    );
    Ok(())
}

pub fn bench_train(args: BenchTrainArgs) -> Result<()> {
    let objectives = args
        .objectives
        .split(',')
        .map(|s| Objective::parse(s.trim()).map_err(config_err))
        .collect::<Result<Vec<_>>>()?;
    if objectives.is_empty() {
        return Err(usage("no objectives given"));
    }
    let cfg = resolve(&args.common, None, &[])?;
    for &o in &objectives {
        let c = card_core::ObjectiveConfig { objective: o, ..cfg.objective.clone() };
        c.validate(cfg.data.seq_len, cfg.model.max_len).map_err(config_err)?;
    }
    snapshot(&args.common, &cfg, "bench-train")?;
    let (vocab, corpus) = cfg.data.load().context("loading training data")?;
    let model_cfg = cfg.model_config().map_err(config_err)?;
    let rows = trainer::bench_step_cost(
        &model_cfg,
        &cfg.objective,
        &cfg.train,
        &objectives,
        &vocab,
        &corpus.train,
        args.rounds,
    )?;
    let mut shape = String::from("objective,forwards_per_sequence,forward_ratio\n");
    let mut timing = String::from("objective,ms_per_step,time_ratio\n");
    for r in &rows {
        let _ = writeln!(shape, "{},{},{:.4}", r.objective.name(), r.forwards_per_sequence, r.forward_ratio);
        let _ = writeln!(timing, "{},{:.3},{:.4}", r.objective.name(), r.ms_per_step, r.time_ratio);
    }
    write_out(&args.common, "bench_train.csv", &shape)?;
    write_out(&args.common, "bench_train_timing.csv", &timing)?;
    println!("objective,ms_per_step,time_ratio,forwards_per_sequence,forward_ratio");
    for r in &rows {
        println!(
            "{},{:.3},{:.4},{},{:.4}",
            r.objective.name(),
            r.ms_per_step,
            r.time_ratio,
            r.forwards_per_sequence,
            r.forward_ratio
        );
    }
    Ok(())
}

pub fn bench_decode(args: BenchDecodeArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(t) = args.tau {
        flags.push(("decode.threshold", t.to_string()));
    }
    let (cfg, model) = checkpoint_model(&args.common, &args.checkpoint, &flags)?;
    let mut settings = Vec::new();
    if args.arm_baseline {
        settings.push(GridSetting { block_size: 1, max_iters: 1, threshold: 0.0 });
    }
    for entry in args.grid.split(',').filter(|s| !s.trim().is_empty()) {
        settings.push(GridSetting::parse(entry.trim(), cfg.decode.threshold).map_err(config_err)?);
    }
    if settings.is_empty() {
        return Err(usage("the decoding grid is empty"));
    }
    snapshot(&args.common, &cfg, "bench-decode")?;
    let (vocab, corpus) = cfg.data.load().context("loading prompts")?;
    let prompts: Vec<Vec<TokenId>> = (0..corpus.validation.len())
        .filter(|&i| corpus.validation.valid_len(i) >= args.prompt_len)
        .take(args.prompts)
        .map(|i| corpus.validation.get(i).ids()[..args.prompt_len].to_vec())
        .collect();
    if prompts.is_empty() {
        return Err(usage(format!(
            "no validation sequence has {} tokens for a prompt; lower --prompt-len or raise data.tokens",
            args.prompt_len
        )));
    }
    let source = if args.prompt_len > 0 { cfg.data.markov_source()? } else { None };
    let rows = inference::bench_decode(
        &model,
        &vocab,
        &prompts,
        args.new_tokens,
        &settings,
        source.as_ref(),
        cfg.decode.seed,
    )?;
    let mut csv = format!("{GRID_HEADER}\n");
    let mut timing = String::from("block_size,max_iters,threshold,wall_ms,tokens_per_second\n");
    for r in &rows {
        let _ = writeln!(csv, "{}", r.csv());
        let s = r.setting;
        let tps = r.tokens as f64 / (r.wall_ms / 1e3).max(1e-9);
        let _ = writeln!(timing, "{},{},{},{:.3},{:.1}", s.block_size, s.max_iters, s.threshold, r.wall_ms, tps);
    }
    write_out(&args.common, "bench_decode.csv", &csv)?;
    write_out(&args.common, "bench_decode_timing.csv", &timing)?;
    print!("{csv}");
    Ok(())
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|x| !x.trim().is_empty())
        .map(|x| x.trim().parse::<T>().map_err(|_| usage(format!("bad {what} `{x}`"))))
        .collect()
}

fn analysis_seed(common: &Common, cfg: &LabConfig) -> u64 {
    common.seed.unwrap_or(cfg.train.seed)
}

pub fn complexity(args: ComplexityArgs) -> Result<()> {
    let cfg = resolve(&args.common, None, &[])?;
    snapshot(&args.common, &cfg, "analyze complexity")?;
    let lengths: Vec<usize> = parse_list("length", &args.lengths)?;
    let mut csv = format!("{}\n", analysis::COMPLEXITY_HEADER);
    let mut checks = Vec::new();
    for &len in &lengths {
        let k = args.block_size.filter(|&k| k > 0 && len % k == 0);
        let r = analysis::complexity(len, k).map_err(config_err)?;
        let _ = writeln!(csv, "{}", r.csv_row());
        if args.check {
            let n = analysis::count_card_contexts_bruteforce(len).map_err(config_err)?;
            let ok = r.card.to_string() == n.to_string();
            checks.push(format!("# L={len}: enumerated CARD contexts {n} ({})", if ok { "match" } else { "MISMATCH" }));
        }
    }
    write_out(&args.common, "complexity.csv", &csv)?;
    print!("{csv}");
    for c in checks {
        println!("{c}");
    }
    Ok(())
}

pub fn mi(args: MiArgs) -> Result<()> {
    let cfg = resolve(&args.common, None, &[])?;
    snapshot(&args.common, &cfg, "analyze mi")?;
    let source = MarkovSource::two_state(args.stay).map_err(config_err)?;
    let mi_cfg = MiConfig {
        len: args.len,
        t_grid: parse_list("noise time", &args.t_grid)?,
        samples: args.samples,
        tail_factor: cfg.objective.corruption.tail_factor,
        seed: analysis_seed(&args.common, &cfg),
        ..Default::default()
    };
    let report = analysis::mi_retention(&source, &mi_cfg).map_err(config_err)?;
    write_out(&args.common, "mi.csv", &report.csv())?;
    write_out(&args.common, "mi_margins.csv", &report.margins_csv())?;
    print!("{}", report.csv());
    print!("{}", report.margins_csv());
    Ok(())
}

pub fn continuity(args: ContinuityArgs) -> Result<()> {
    let cfg = resolve(&args.common, None, &[])?;
    snapshot(&args.common, &cfg, "analyze continuity")?;
    let strategy = MaskStrategy::parse(&args.strategy).map_err(config_err)?;
    let c = ContinuityConfig {
        len: args.len,
        samples: args.samples,
        t: args.t,
        tail_factor: cfg.objective.corruption.tail_factor,
        block: args.block,
        seed: analysis_seed(&args.common, &cfg),
    };
    let report = analysis::continuity_profile(strategy, &c).map_err(config_err)?;
    write_out(&args.common, "continuity.csv", &report.csv())?;
    print!("{}", report.csv());
    if let Some((i, d, se)) = report.max_adjacent() {
        println!("# max adjacent difference {d:.6} between {i} and {} (se {se:.6}); 2/L = {:.6}", i + 1, 2.0 / args.len as f64);
    }
    if let Some(b) = &report.boundary {
        println!("# block boundary at {}: jump {:.6} (se {:.6})", b.index, b.jump, b.se);
    }
    Ok(())
}

pub fn weights(args: WeightArgs) -> Result<()> {
    let cfg = resolve(&args.common, None, &[])?;
    snapshot(&args.common, &cfg, "analyze weights")?;
    let w = WeightSweepConfig {
        len: args.len,
        patterns: args.patterns,
        corruption: cfg.objective.corruption,
        weighting: cfg.objective.weighting,
        grad_patterns: args.grad_patterns,
        seed: analysis_seed(&args.common, &cfg),
        ..Default::default()
    };
    let report = analysis::weight_bound_sweep(&w).map_err(config_err)?;
    write_out(&args.common, "weights.csv", &report.csv())?;
    print!("{}", report.csv());
    if !report.grad_bins.is_empty() {
        write_out(&args.common, "weight_grads.csv", &report.grad_csv())?;
        print!("{}", report.grad_csv());
    }
    println!("# max w*S over {} positions: {:.9}", report.positions, report.max_ws);
    Ok(())
}

pub fn inspect_mask(args: InspectArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(s) = &args.strategy {
        flags.push(("corruption.strategy", s.clone()));
    }
    let cfg = resolve(&args.common, None, &flags)?;
    if let Some(t) = args.t {
        if !(0.0..=1.0).contains(&t) {
            return Err(usage(format!("noise time {t} outside [0, 1]")));
        }
    }
    let corruption = cfg.objective.corruption;
    corruption.validate(args.len).map_err(config_err)?;
    snapshot(&args.common, &cfg, "inspect-mask")?;
    let seed = analysis_seed(&args.common, &cfg);
    let mut out = String::new();
    for i in 0..args.count {
        let mut rng = stream(seed, Purpose::MonteCarlo, 0x15, i as u64);
        let t = args.t.unwrap_or_else(|| rng.random::<f64>());
        let pattern = corruption.sample(args.len, t, &mut rng)?;
        let (n, w) = match corruption.strategy {
            MaskStrategy::SoftTail => {
                let n = mask_count(args.len, t);
                (n, tail_window(args.len, n, corruption.tail_factor).max(n))
            }
            MaskStrategy::StrictTail => {
                let n = mask_count(args.len, t);
                (n, n)
            }
            MaskStrategy::Uniform => (pattern.count(), args.len),
            MaskStrategy::Block { size } => (pattern.count(), size),
        };
        let _ = writeln!(out, "t={t} N={n} W={w} mask={}", pattern.bitstring());
        if args.scores {
            let wv = WeightVector::compute(pattern.masked(), &cfg.objective.weighting)?;
            let _ = writeln!(out, "pos,mask,C,S,w");
            for p in 0..args.len {
                let _ = writeln!(
                    out,
                    "{p},{},{},{:.6},{:.6}",
                    pattern.masked()[p] as u8,
                    wv.costs[p],
                    wv.scores[p],
                    wv.weights[p]
                );
            }
        }
    }
    write_out(&args.common, "masks.txt", &out)?;
    print!("{out}");
    Ok(())
}
