use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mdug_core::corpus::{save_corpus, Split};
use mdug_core::generation::{GeneratorModel, LabelSource, ResponseRecord};
use mdug_core::harness::config::{parse_override, RunConfig, Variant};
use mdug_core::harness::pipeline::{
    corpus_for, infer, run_ablation, score_predictions, score_responses, stub_captioner, train_generator_for,
    train_understanding_mode,
};
use mdug_core::harness::report::{find_reports, GenerationRow, SplitReport, TrackScores, UnderstandingRow};
use mdug_core::jsonl::{read_jsonl, write_jsonl};
use mdug_core::understanding::{evaluate_split, prediction_records, PredictionRecord, TaskMode, UnderstandingManifest};
use mdug_core::{AblationFlags, Captioner, MetricReport, UnderstandingModel};

const UNDERSTANDING_CKPT: &str = "understanding.ckpt";
const GENERATOR_CKPT: &str = "generator.ckpt";
const GENERATOR_RUN: &str = "generator.run.json";
const HISTORY: &str = "history.json";
const PREDICTIONS: &str = "predictions.jsonl";
const RESPONSES: &str = "responses.jsonl";

#[derive(Parser)]
#[command(name = "mdug", version, about = "Dialogue understanding and response generation over synthetic video dialogues")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and write it as JSONL.
    GenCorpus {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a boundary model (multi-task or single-track).
    TrainUnderstand {
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        mode: Option<TaskMode>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a boundary model, or an existing predictions file, on one split.
    EvalUnderstand {
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        model: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a response generator for one ablation variant.
    TrainGenerate {
        #[command(flatten)]
        seed: SeedArg,
        /// Ablation variant; defaults to the configured flags.
        #[arg(long)]
        variant: Option<Variant>,
        /// Boundary checkpoint whose last-turn predictions fill the prompt;
        /// gold labels are used without one.
        #[arg(long)]
        understanding: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict last-turn labels, build inputs and decode responses.
    Infer {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        understanding: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a responses file against the final utterance of each episode.
    EvalGenerate {
        #[arg(long)]
        responses: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score every configured variant over every seed.
    Ablate {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the tables of every report under a directory.
    Report {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Copy)]
struct SeedArg {
    /// Defaults to the first configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl SeedArg {
    fn resolve(self, cfg: &RunConfig) -> u64 {
        self.seed.unwrap_or(cfg.run.seeds[0])
    }
}

/// Bad input from the caller; reported with exit status 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Serialize, Deserialize)]
struct GeneratorRun {
    flags: AblationFlags,
    seed: u64,
    config_hash: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<UsageError>()
            || matches!(
                c.downcast_ref::<mdug_core::Error>(),
                Some(mdug_core::Error::Config(_) | mdug_core::Error::Record { .. })
            )
    })
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let overrides = cli
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<mdug_core::Result<Vec<_>>>()?;
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.run.output_dir).join(cfg.run_id())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn checkpoint_in(path: &Path, file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(file)
    } else {
        path.to_path_buf()
    }
}

fn load_understanding(path: &Path) -> Result<(UnderstandingModel, UnderstandingManifest)> {
    let ckpt = checkpoint_in(path, UNDERSTANDING_CKPT);
    UnderstandingModel::load(&ckpt).with_context(|| format!("loading boundary model {}", ckpt.display()))
}

fn single_report(cfg: &RunConfig, seed: u64, split: Split, rows: SplitReport) -> MetricReport {
    MetricReport {
        run_id: cfg.run_id(),
        config_hash: cfg.hash(),
        seeds: vec![seed],
        splits: BTreeMap::from([(split.as_str().to_string(), rows)]),
        warnings: Vec::new(),
    }
}

fn understanding_report(cfg: &RunConfig, seed: u64, split: Split, name: &str, scores: TrackScores) -> MetricReport {
    let rows = SplitReport {
        understanding: BTreeMap::from([(
            name.to_string(),
            UnderstandingRow::from_seeds(BTreeMap::from([(seed, scores)])),
        )]),
        ..SplitReport::default()
    };
    single_report(cfg, seed, split, rows)
}

fn finish_report(report: &MetricReport, dir: &Path) -> Result<()> {
    report.write(dir)?;
    print!("{}", report.render());
    log::info!("report written to {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let hash = cfg.hash();
    match cli.command {
        Command::GenCorpus { out } => {
            let out = out.unwrap_or_else(|| Path::new(&cfg.run.output_dir).join("corpus.jsonl"));
            log::info!("gen-corpus: config {hash} corpus seed {}", cfg.corpus.seed);
            let corpus = corpus_for(&cfg)?;
            if let Some(parent) = out.parent() {
                create_dir(parent)?;
            }
            save_corpus(&corpus, &out)?;
            log::info!("wrote {} episodes to {}", corpus.episodes.len(), out.display());
        }
        Command::TrainUnderstand { seed, mode, out } => {
            let seed = seed.resolve(&cfg);
            let mode = mode.unwrap_or(cfg.understand.mode);
            log::info!("train-understand: config {hash} seed {seed} mode {mode}");
            let corpus = corpus_for(&cfg)?;
            let trained = train_understanding_mode(&cfg, &corpus, mode, seed)?;
            let out = out.unwrap_or_else(|| run_dir(&cfg).join(format!("understand-{mode}-seed{seed}")));
            create_dir(&out)?;
            trained
                .model
                .save(&out.join(UNDERSTANDING_CKPT), &trained.config.task, trained.config.window)?;
            write_json(&out.join(HISTORY), &trained.history)?;
            let best = &trained.history[trained.best_epoch];
            log::info!(
                "best epoch {}: dev scene acc {:.3} session acc {:.3}; saved to {}",
                best.epoch,
                best.dev_scene.acc * 100.0,
                best.dev_session.acc * 100.0,
                out.display()
            );
        }
        Command::EvalUnderstand { model, predictions, split, seed, out } => {
            let seed = seed.resolve(&cfg);
            log::info!("eval-understand: config {hash} seed {seed} split {split}");
            let corpus = corpus_for(&cfg)?;
            let out = out.unwrap_or_else(|| run_dir(&cfg).join(format!("eval-understand-{split}-seed{seed}")));
            let scores = match (model, predictions) {
                (Some(model), _) => {
                    let (model, manifest) = load_understanding(&model)?;
                    let (preds, scene, session) = evaluate_split(&model, &corpus, split, &manifest.task, manifest.window)?;
                    let records: Vec<PredictionRecord> =
                        preds.iter().flat_map(|(id, p)| prediction_records(id, p)).collect();
                    create_dir(&out)?;
                    write_jsonl(&out.join(PREDICTIONS), &records)?;
                    TrackScores { scene, session }
                }
                (None, Some(path)) => {
                    let records: Vec<PredictionRecord> = read_jsonl(&path)?;
                    score_predictions(&corpus, split, &records)?
                }
                (None, None) => bail!(UsageError("pass --model or --predictions".into())),
            };
            finish_report(&understanding_report(&cfg, seed, split, "model", scores), &out)?;
        }
        Command::TrainGenerate { seed, variant, understanding, out } => {
            let seed = seed.resolve(&cfg);
            let flags = variant.map_or_else(|| cfg.flags(), Variant::flags);
            log::info!("train-generate: config {hash} seed {seed} flags {flags:?}");
            let corpus = corpus_for(&cfg)?;
            let captioner = stub_captioner(&corpus, &cfg);
            let loaded = understanding.as_deref().map(load_understanding).transpose()?;
            let labels = label_source(loaded.as_ref());
            let trained = train_generator_for(&cfg, &corpus, flags, Some(&captioner as &dyn Captioner), labels, seed)?;
            let name = variant.map_or("configured", Variant::name);
            let out = out.unwrap_or_else(|| run_dir(&cfg).join(format!("generate-{name}-seed{seed}")));
            create_dir(&out)?;
            trained.model.save(&out.join(GENERATOR_CKPT))?;
            write_json(&out.join(GENERATOR_RUN), &GeneratorRun { flags, seed, config_hash: hash.clone() })?;
            write_json(&out.join(HISTORY), &trained.history)?;
            log::info!("best epoch {}; saved to {}", trained.best_epoch, out.display());
        }
        Command::Infer { generator, understanding, split, out } => {
            let dir = if generator.is_dir() {
                generator.clone()
            } else {
                generator.parent().map(Path::to_path_buf).unwrap_or_default()
            };
            let run_path = dir.join(GENERATOR_RUN);
            let run: GeneratorRun = serde_json::from_str(
                &std::fs::read_to_string(&run_path).with_context(|| format!("reading {}", run_path.display()))?,
            )?;
            log::info!("infer: config {hash} seed {} split {split} flags {:?}", run.seed, run.flags);
            if run.config_hash != hash {
                log::warn!("generator was trained under config {}", run.config_hash);
            }
            let corpus = corpus_for(&cfg)?;
            let captioner = stub_captioner(&corpus, &cfg);
            let model = GeneratorModel::load(&checkpoint_in(&generator, GENERATOR_CKPT))?;
            let mut gen_cfg = cfg.generate_config(corpus.vocab().len());
            gen_cfg.flags = run.flags;
            let loaded = understanding.as_deref().map(load_understanding).transpose()?;
            if loaded.is_none() && run.flags.label_prompt {
                log::warn!("no boundary model given; prompting with gold last-turn labels");
            }
            let responses = infer(
                &corpus,
                split,
                &model,
                &gen_cfg,
                Some(&captioner as &dyn Captioner),
                label_source(loaded.as_ref()),
            )?;
            let out = out.unwrap_or_else(|| dir.join(format!("{split}-{RESPONSES}")));
            if let Some(parent) = out.parent() {
                create_dir(parent)?;
            }
            write_jsonl(&out, &responses)?;
            log::info!("wrote {} responses to {}", responses.len(), out.display());
        }
        Command::EvalGenerate { responses, split, seed, out } => {
            let seed = seed.resolve(&cfg);
            log::info!("eval-generate: config {hash} seed {seed} split {split}");
            let corpus = corpus_for(&cfg)?;
            let records: Vec<ResponseRecord> = read_jsonl(&responses)?;
            let score = score_responses(&corpus, split, &records)?;
            let rows = SplitReport {
                generation: BTreeMap::from([(
                    "responses".to_string(),
                    GenerationRow::from_seeds(BTreeMap::from([(seed, score)])),
                )]),
                ..SplitReport::default()
            };
            let out = out.unwrap_or_else(|| run_dir(&cfg).join(format!("eval-generate-{split}-seed{seed}")));
            finish_report(&single_report(&cfg, seed, split, rows), &out)?;
        }
        Command::Ablate { out } => {
            log::info!("ablate: config {hash} seeds {:?}", cfg.run.seeds);
            let corpus = corpus_for(&cfg)?;
            let report = run_ablation(&cfg, &corpus)?;
            finish_report(&report, &out.unwrap_or_else(|| run_dir(&cfg)))?;
        }
        Command::Report { dir } => {
            let dir = dir.unwrap_or_else(|| PathBuf::from(&cfg.run.output_dir));
            if !dir.is_dir() {
                bail!(UsageError(format!("{} is not a directory", dir.display())));
            }
            let found = find_reports(&dir)?;
            if found.is_empty() {
                bail!(UsageError(format!("no report.json in {} or its subdirectories", dir.display())));
            }
            for (i, path) in found.iter().enumerate() {
                let report = MetricReport::read(path)?;
                if i > 0 {
                    println!();
                }
                println!("== {}", path.display());
                print!("{}", report.render());
            }
        }
    }
    Ok(())
}

fn label_source(loaded: Option<&(UnderstandingModel, UnderstandingManifest)>) -> LabelSource<'_> {
    match loaded {
        Some((model, manifest)) => LabelSource::Predicted {
            scene: model,
            session: model,
            task: &manifest.task,
            window: manifest.window,
        },
        None => LabelSource::Gold,
    }
}
