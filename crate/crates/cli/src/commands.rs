//! Subcommand implementations.

use crate::checkpoint::{load_backbone, load_light, save_backbone, save_light};
use crate::{debug, info, CliError, CliResult, Opts};
use lslu_core::backbone::{Backbone, BackboneConfig};
use lslu_core::clm_data::{read_pairs_corpus, write_pairs_corpus, MaskMode, MaskingPolicy, Vocab};
use lslu_core::datasim::{
    corrupt, generate_corpus, project_labels, read_labeled_corpus, split_corpus,
    write_labeled_corpus, Grammar, LabeledUtterance, NoiseChannel, NoiseChannelConfig, Provenance,
};
use lslu_core::light_encoder::{
    evaluate, finetune, finetune_full, DomainSchema, FinetuneConfig, LightEncoder,
    LightEncoderConfig,
};
use lslu_core::optim::OptimizerConfig;
use lslu_core::pretrain::{init_light_encoder_mlm, pretrain, InitConfig, PretrainConfig, Regime};
use lslu_core::report::{
    count_parameters, full_finetune_report, render_report, DomainScore, MetricsRow, ParamReport,
};
use std::path::{Path, PathBuf};

pub fn known_flags(subcommand: &str) -> Option<&'static [&'static str]> {
    match subcommand {
        "datagen" => Some(DATAGEN_FLAGS),
        "pretrain" => Some(PRETRAIN_FLAGS),
        "init-light" => Some(INIT_FLAGS),
        "finetune" => Some(FINETUNE_FLAGS),
        "eval" => Some(EVAL_FLAGS),
        "params" => Some(PARAMS_FLAGS),
        "report" => Some(REPORT_FLAGS),
        _ => None,
    }
}

fn read_text(path: &str) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("cannot read {path}: {e}")))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Io(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    std::fs::write(path, text)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn preset_config(name: &str, vocab_size: usize) -> CliResult<BackboneConfig> {
    match name {
        "toy" => Ok(BackboneConfig::toy(vocab_size)),
        "mini" => Ok(BackboneConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            vocab_size,
            max_positions: 48,
            n_type_ids: 2,
            dropout: 0.1,
        }),
        "paper" => {
            let mut cfg = BackboneConfig::paper();
            cfg.vocab_size = vocab_size;
            Ok(cfg)
        }
        other => Err(CliError::Config(format!(
            "unknown backbone preset {other:?} (toy, mini, paper)"
        ))),
    }
}

fn parse_mask_mode(s: &str) -> CliResult<MaskMode> {
    match s {
        "entities_only" | "entities-only" => Ok(MaskMode::EntitiesOnly),
        "standard" => Ok(MaskMode::Standard),
        "mixed" => Ok(MaskMode::Mixed),
        other => Err(CliError::Config(format!(
            "unknown mask mode {other:?} (entities_only, standard, mixed)"
        ))),
    }
}

fn read_sentences(path: &str) -> CliResult<Vec<Vec<String>>> {
    Ok(read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

// ── datagen ─────────────────────────────────────────────────────────────

const DATAGEN_FLAGS: &[&str] = &["grammar", "out", "n", "n-pairs", "splits", "wer", "seed"];

pub fn datagen(args: &[String]) -> CliResult<()> {
    let opts = Opts::parse(args, DATAGEN_FLAGS)?;
    let grammar = Grammar::by_name(opts.get_or("grammar", "music"))?;
    let out_dir = PathBuf::from(opts.require("out")?);
    let n = opts.get_usize("n", 700)?;
    let n_pairs = opts.get_usize("n-pairs", n)?;
    let seed = opts.get_u64("seed", 0)?;

    let fractions: Vec<f64> = opts
        .get_or("splits", "0.8,0.2")
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("bad split fraction {s:?}")))
        })
        .collect::<CliResult<_>>()?;
    let split_names: &[&str] = match fractions.len() {
        1 => &["train"],
        2 => &["train", "test"],
        3 => &["train", "dev", "test"],
        n => {
            return Err(CliError::Config(format!(
                "--splits supports 1-3 fractions, got {n}"
            )))
        }
    };

    let (utterances, _) = generate_corpus(&grammar, n, seed)?;
    let (_, pairs) = generate_corpus(&grammar, n_pairs, seed ^ 0x70a175)?;
    let vocab = Vocab::from_tokens(grammar.vocabulary());
    let schema = DomainSchema::from_grammar(&grammar);

    write_text(&out_dir.join("vocab.txt"), &vocab.to_text())?;
    write_text(&out_dir.join("schema.txt"), &schema.to_text())?;
    write_text(&out_dir.join("pairs.tsv"), &write_pairs_corpus(&pairs))?;
    let mut text = String::new();
    for p in &pairs {
        text.push_str(&p.query_tokens.join(" "));
        text.push('\n');
        if !p.response_tokens.is_empty() {
            text.push_str(&p.response_tokens.join(" "));
            text.push('\n');
        }
    }
    write_text(&out_dir.join("text.txt"), &text)?;

    let splits = split_corpus(&utterances, &fractions, seed ^ 0x59117)?;
    let channel = match opts.get("wer") {
        None => None,
        Some(w) => {
            let wer: f64 = w
                .parse()
                .map_err(|_| CliError::Config(format!("--wer expects a number, got {w:?}")))?;
            Some(NoiseChannel::new(
                NoiseChannelConfig::for_target_wer(wer, seed ^ 0xA5A5),
                grammar.vocabulary(),
            )?)
        }
    };
    for (name, split) in split_names.iter().zip(&splits) {
        write_text(
            &out_dir.join(format!("{name}.tsv")),
            &write_labeled_corpus(split),
        )?;
        info(&format!("{name}: {} utterances", split.len()));
        if let Some(channel) = &channel {
            let mut rng = channel.rng();
            let corrupted: Vec<LabeledUtterance> = split
                .iter()
                .filter_map(|u| {
                    let (hyp, aligned) = corrupt(&u.tokens, channel, &mut rng);
                    if hyp.is_empty() {
                        return None; // channel deleted every token
                    }
                    let tags = project_labels(&u.bio_tags, &aligned).ok()?;
                    Some(LabeledUtterance {
                        domain: u.domain.clone(),
                        tokens: hyp,
                        intent: u.intent.clone(),
                        bio_tags: tags,
                        provenance: Provenance::Hypothesis,
                    })
                })
                .collect();
            write_text(
                &out_dir.join(format!("{name}.hyp.tsv")),
                &write_labeled_corpus(&corrupted),
            )?;
            info(&format!("{name}.hyp: {} utterances", corrupted.len()));
        }
    }
    info(&format!(
        "datagen complete: {} utterances, {} pairs, vocab {}",
        n,
        n_pairs,
        vocab.len()
    ));
    Ok(())
}

// ── pretrain ────────────────────────────────────────────────────────────

const PRETRAIN_FLAGS: &[&str] = &[
    "pairs",
    "vocab",
    "text",
    "out",
    "metrics",
    "regime",
    "epochs",
    "batch-size",
    "lr",
    "seed",
    "preset",
    "mix-ratio",
    "mask-rate",
    "mask-mode",
];

pub fn pretrain_cmd(args: &[String]) -> CliResult<()> {
    let opts = Opts::parse(args, PRETRAIN_FLAGS)?;
    let vocab = Vocab::from_text(&read_text(opts.require("vocab")?)?)?;
    let regime = Regime::parse(opts.get_or("regime", "clm"))?;
    let pairs = match opts.get("pairs") {
        Some(path) => read_pairs_corpus(&read_text(path)?)?,
        None if regime == Regime::PlainMlm => Vec::new(),
        None => return Err(CliError::Usage("missing required flag --pairs".into())),
    };
    let text = match opts.get("text") {
        Some(path) => read_sentences(path)?,
        None => Vec::new(),
    };
    let seed = opts.get_u64("seed", 0)?;
    let cfg = PretrainConfig {
        regime,
        epochs: opts.get_usize("epochs", 20)?,
        batch_size: opts.get_usize("batch-size", 16)?,
        optimizer: OptimizerConfig::adam(opts.get_f64("lr", 1e-4)?),
        seed: seed ^ 0x11,
        masking: MaskingPolicy {
            mode: parse_mask_mode(opts.get_or("mask-mode", "mixed"))?,
            mask_rate: opts.get_f64("mask-rate", 0.15)?,
            replace_probs: (0.8, 0.1, 0.1),
        },
        mix_ratio: opts.get_usize("mix-ratio", 1)?,
    };
    let backbone_cfg = preset_config(opts.get_or("preset", "toy"), vocab.len())?;
    let mut backbone = Backbone::new(backbone_cfg, seed)?;
    info(&format!(
        "pre-training backbone ({} params) for {} epochs",
        backbone.params.num_scalars(),
        cfg.epochs
    ));
    let trace = pretrain(&mut backbone, &pairs, &text, &vocab, &cfg)?;
    if let (Some(first), Some(last)) = (trace.first_loss(), trace.final_loss()) {
        info(&format!(
            "done in {:.1}s: loss {first:.4} -> {last:.4}, final epoch masked acc {:.4}",
            trace.wall_clock.as_secs_f64(),
            trace.epoch_masked_acc.last().copied().unwrap_or(0.0)
        ));
    }
    save_backbone(Path::new(opts.require("out")?), &backbone)?;
    if let Some(metrics) = opts.get("metrics") {
        write_text(Path::new(metrics), &trace.to_metrics_text())?;
    }
    Ok(())
}

// ── init-light ──────────────────────────────────────────────────────────

const INIT_FLAGS: &[&str] = &[
    "backbone",
    "pairs",
    "vocab",
    "schema",
    "out",
    "metrics",
    "variant",
    "lstm-hidden",
    "epochs",
    "batch-size",
    "lr",
    "seed",
    "regime",
];

pub fn init_light(args: &[String]) -> CliResult<()> {
    let opts = Opts::parse(args, INIT_FLAGS)?;
    let mut backbone = load_backbone(Path::new(opts.require("backbone")?))?;
    backbone.freeze();
    let vocab = Vocab::from_text(&read_text(opts.require("vocab")?)?)?;
    let pairs = read_pairs_corpus(&read_text(opts.require("pairs")?)?)?;
    let schema = DomainSchema::from_text(&read_text(opts.require("schema")?)?)?;
    let seed = opts.get_u64("seed", 0)?;

    let hidden = opts.get_usize("lstm-hidden", 32)?;
    let le_cfg = LightEncoderConfig::by_variant(opts.get_or("variant", "concat-lstm"), hidden)?;
    let mut light = LightEncoder::new(
        le_cfg,
        schema,
        backbone.config.n_layers,
        backbone.config.d_model,
        seed ^ 0x1237,
    )?;

    let defaults = InitConfig::default();
    let cfg = InitConfig {
        epochs: opts.get_usize("epochs", defaults.epochs)?,
        batch_size: opts.get_usize("batch-size", defaults.batch_size)?,
        optimizer: OptimizerConfig::adam(opts.get_f64("lr", defaults.optimizer.lr)?),
        seed: seed ^ 0x9d,
        masking: defaults.masking,
        regime: Regime::parse(opts.get_or("regime", "query_only"))?,
    };
    info(&format!(
        "MLM-initializing {} light encoder for {} epochs",
        light.config.variant_name(),
        cfg.epochs
    ));
    let trace = init_light_encoder_mlm(&backbone, &mut light, &pairs, &vocab, &cfg)?;
    if let (Some(first), Some(last)) = (trace.first_loss(), trace.final_loss()) {
        info(&format!("init loss {first:.4} -> {last:.4}"));
    }
    save_light(Path::new(opts.require("out")?), &light)?;
    if let Some(metrics) = opts.get("metrics") {
        write_text(Path::new(metrics), &trace.to_metrics_text())?;
    }
    Ok(())
}

// ── finetune ────────────────────────────────────────────────────────────

const FINETUNE_FLAGS: &[&str] = &[
    "backbone",
    "train",
    "dev",
    "vocab",
    "schema",
    "out",
    "out-backbone",
    "metrics",
    "variant",
    "light-init",
    "epochs",
    "batch-size",
    "lr",
    "seed",
    "lstm-hidden",
    "eval-every",
];

pub fn finetune_cmd(args: &[String]) -> CliResult<()> {
    let opts = Opts::parse(args, FINETUNE_FLAGS)?;
    let mut backbone = load_backbone(Path::new(opts.require("backbone")?))?;
    let vocab = Vocab::from_text(&read_text(opts.require("vocab")?)?)?;
    let train = read_labeled_corpus(&read_text(opts.require("train")?)?)?;
    let dev = match opts.get("dev") {
        Some(path) => read_labeled_corpus(&read_text(path)?)?,
        None => Vec::new(),
    };
    let seed = opts.get_u64("seed", 0)?;
    let variant = opts.get_or("variant", "concat-lstm").to_string();

    let mut light = match opts.get("light-init") {
        Some(path) => load_light(Path::new(path), &backbone.config)?,
        None => {
            let schema = DomainSchema::from_text(&read_text(opts.require("schema")?)?)?;
            let hidden = opts.get_usize("lstm-hidden", 32)?;
            let base_variant = if variant == "full" {
                "concat-lstm"
            } else {
                variant.as_str()
            };
            let cfg = LightEncoderConfig::by_variant(base_variant, hidden)?;
            LightEncoder::new(
                cfg,
                schema,
                backbone.config.n_layers,
                backbone.config.d_model,
                seed ^ 0x77,
            )?
        }
    };

    let cfg = FinetuneConfig {
        epochs: opts.get_usize("epochs", 30)?,
        batch_size: opts.get_usize("batch-size", 16)?,
        optimizer: OptimizerConfig::adam(opts.get_f64("lr", 1e-3)?),
        seed: seed ^ 0x3f,
        eval_every: opts.get_usize("eval-every", 0)?,
    };

    let trace = if variant == "full" {
        info(&format!(
            "fine-tuning the whole model for {} epochs",
            cfg.epochs
        ));
        let trace = finetune_full(&mut backbone, &mut light, &vocab, &train, &dev, &cfg)?;
        let out_backbone = opts.require("out-backbone")?;
        save_backbone(Path::new(out_backbone), &backbone)?;
        trace
    } else {
        backbone.freeze();
        info(&format!(
            "fine-tuning {} light encoder ({} trainable params) for {} epochs",
            light.config.variant_name(),
            light.params.num_scalars(),
            cfg.epochs
        ));
        finetune(&backbone, &mut light, &vocab, &train, &dev, &cfg)?
    };
    if let Some(eval) = trace.final_eval() {
        info(&format!(
            "final epoch: train loss {:.4}, dev IC {:.4}, dev span F1 {:.4}",
            eval.train_loss, eval.dev_ic_accuracy, eval.dev_span_f1
        ));
    }
    save_light(Path::new(opts.require("out")?), &light)?;
    if let Some(metrics) = opts.get("metrics") {
        let mut text = String::new();
        for e in &trace.epochs {
            let fmt = |v: f64| {
                if v.is_nan() {
                    "-".to_string()
                } else {
                    format!("{v:.6}")
                }
            };
            text.push_str(&format!(
                "{}\t{:.6}\t{}\t{}\n",
                e.epoch,
                e.train_loss,
                fmt(e.dev_ic_accuracy),
                fmt(e.dev_span_f1)
            ));
        }
        write_text(Path::new(metrics), &text)?;
    }
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

const EVAL_FLAGS: &[&str] = &[
    "backbone",
    "light",
    "test",
    "vocab",
    "out",
    "model-name",
    "domain",
];

pub fn eval_cmd(args: &[String]) -> CliResult<()> {
    let opts = Opts::parse(args, EVAL_FLAGS)?;
    let mut backbone = load_backbone(Path::new(opts.require("backbone")?))?;
    backbone.freeze();
    let light = load_light(Path::new(opts.require("light")?), &backbone.config)?;
    let vocab = Vocab::from_text(&read_text(opts.require("vocab")?)?)?;
    let test = read_labeled_corpus(&read_text(opts.require("test")?)?)?;
    debug(&format!("evaluating {} utterances", test.len()));

    let (ic_acc, span_f1) = evaluate(&backbone, &light, &vocab, &test)?;
    let model = opts
        .get_or("model-name", light.config.variant_name())
        .to_string();
    let domain = opts.get_or("domain", &light.schema.domain_name).to_string();
    println!("model {model} domain {domain}: IC accuracy {ic_acc:.4}, SL span F1 {span_f1:.4}");
    if let Some(out) = opts.get("out") {
        write_text(
            Path::new(out),
            &format!("{domain}\t{model}\t{ic_acc:.6}\t{span_f1:.6}\n"),
        )?;
    }
    Ok(())
}

// ── params ──────────────────────────────────────────────────────────────

const PARAMS_FLAGS: &[&str] = &[
    "backbone",
    "variant",
    "tasks",
    "vocab-size",
    "intents",
    "slots",
    "lstm-hidden",
    "seed",
    "out",
];

fn params_reports(opts: &Opts) -> CliResult<(Vec<ParamReport>, usize)> {
    let vocab_size = opts.get_usize("vocab-size", 30522)?;
    let backbone = preset_config(opts.get_or("backbone", "paper"), vocab_size)?;
    let hidden = opts.get_usize(
        "lstm-hidden",
        if backbone.d_model >= 768 { 256 } else { 32 },
    )?;
    let n_intents = opts.get_usize("intents", 16)?;
    let n_slots = opts.get_usize("slots", 31)?;
    let k = opts.get_usize("tasks", 5)?;
    let mut reports = vec![full_finetune_report(
        &backbone,
        &LightEncoderConfig::concat_lstm(hidden),
        n_intents,
        n_slots,
        k,
    )];
    for cfg in [
        LightEncoderConfig::concat_lstm(hidden),
        LightEncoderConfig::linear_lstm(hidden),
        LightEncoderConfig::lastlayer_lstm(hidden),
        LightEncoderConfig::concat(hidden),
    ] {
        reports.push(count_parameters(&backbone, &cfg, n_intents, n_slots, k));
    }
    Ok((reports, k))
}

pub fn params_cmd(args: &[String]) -> CliResult<()> {
    let opts = Opts::parse(args, PARAMS_FLAGS)?;
    let (reports, k) = params_reports(&opts)?;
    let requested = LightEncoderConfig::by_variant(opts.get_or("variant", "concat-lstm"), 8)?
        .variant_name()
        .to_string();
    let mut out = String::new();
    out.push_str(&format!(
        "backbone parameters: {}\n",
        reports[0].backbone_params
    ));
    for r in &reports[1..] {
        let marker = if r.variant == requested { " <--" } else { "" };
        out.push_str(&format!(
            "{:<16} light-encoder params {:>12}  trained/task {:>5.1}%  total for {k} tasks {:.2}x{marker}\n",
            r.variant,
            r.light_params,
            r.per_task_fraction * 100.0,
            r.total_multiplier
        ));
    }
    out.push_str(&format!(
        "full fine-tuning baseline: 100.0% per task, {:.2}x total for {k} tasks\n",
        reports[0].total_multiplier
    ));
    print!("{out}");
    if let Some(path) = opts.get("out") {
        write_text(Path::new(path), &out)?;
    }
    Ok(())
}

// ── report ──────────────────────────────────────────────────────────────

const REPORT_FLAGS: &[&str] = &[
    "baseline",
    "out",
    "backbone",
    "vocab-size",
    "intents",
    "slots",
    "lstm-hidden",
    "tasks",
    "rows",
];

pub fn report_cmd(args: &[String]) -> CliResult<()> {
    let opts = Opts::parse(args, REPORT_FLAGS)?;
    let mut row_files: Vec<String> = opts.positional.clone();
    if let Some(listed) = opts.get("rows") {
        row_files.extend(listed.split(',').map(str::to_string));
    }
    if row_files.is_empty() {
        return Err(CliError::Usage(
            "report needs at least one eval row file".into(),
        ));
    }
    let mut rows: Vec<MetricsRow> = Vec::new();
    for path in &row_files {
        for line in read_text(path)?.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(CliError::Io(format!(
                    "{path}: expected 4 tab-separated fields per row, got {}",
                    fields.len()
                )));
            }
            let parse_score = |s: &str| -> CliResult<f64> {
                s.parse()
                    .map_err(|_| CliError::Io(format!("{path}: bad score {s:?}")))
            };
            let (domain, model) = (fields[0].to_string(), fields[1].to_string());
            let score = DomainScore {
                domain,
                ic: parse_score(fields[2])?,
                sl: parse_score(fields[3])?,
            };
            match rows.iter_mut().find(|r| r.model_name == model) {
                Some(row) => row.per_domain.push(score),
                None => rows.push(MetricsRow {
                    model_name: model,
                    per_domain: vec![score],
                }),
            }
        }
    }
    let (params, _) = params_reports(&opts)?;
    let text = render_report(&rows, &params, opts.get("baseline"))?;
    print!("{text}");
    if let Some(path) = opts.get("out") {
        write_text(Path::new(path), &text)?;
    }
    Ok(())
}
