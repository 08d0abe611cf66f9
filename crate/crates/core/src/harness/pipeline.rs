//! End-to-end orchestration: corpus, both training stages, last-turn
//! inference and the ablation grid.

use std::collections::{BTreeMap, HashMap};

use crate::captioning::{Captioner, StubCaptioner};
use crate::corpus::{generate_corpus, load_corpus, Corpus, Split};
use crate::error::{Error, Result};
use crate::generation::{
    train_generator, GenerateConfig, GeneratorModel, LabelSource, ResponseRecord, TrainedGenerator,
};
use crate::harness::config::{RunConfig, Variant};
use crate::harness::report::{GenerationRow, MetricReport, SplitReport, TrackScores, UnderstandingRow};
use crate::metrics::{
    boundary_score, gen_score, majority_boundary, random_boundary, random_generation, single_refs, GenScore,
};
use crate::prompting::AblationFlags;
use crate::understanding::{
    evaluate_split, train_understanding, MultiTaskConfig, PredictionRecord, TaskMode, TrainedUnderstanding,
    UnderstandingModel,
};

/// Loads `corpus.path`, or generates a corpus from the config.
pub fn corpus_for(cfg: &RunConfig) -> Result<Corpus> {
    if cfg.corpus.path.is_empty() {
        generate_corpus(&cfg.corpus.generator, cfg.corpus.seed)
    } else {
        load_corpus(std::path::Path::new(&cfg.corpus.path))
    }
}

pub fn stub_captioner(corpus: &Corpus, cfg: &RunConfig) -> StubCaptioner {
    StubCaptioner::new(corpus.meta.scenes.clone(), cfg.run.captioner_seed)
}

pub fn train_understanding_mode(cfg: &RunConfig, corpus: &Corpus, mode: TaskMode, seed: u64) -> Result<TrainedUnderstanding> {
    log::info!("train understanding: mode {mode} seed {seed} config {}", cfg.hash());
    let encoder = cfg.encoder_config(corpus.vocab().len(), corpus.feature_dim());
    train_understanding(corpus, &encoder, &cfg.understand_config_for(mode), seed)
}

pub fn generate_config_for(cfg: &RunConfig, corpus: &Corpus, flags: AblationFlags) -> GenerateConfig {
    let mut g = cfg.generate_config(corpus.vocab().len());
    g.flags = flags;
    g
}

pub fn train_generator_for(
    cfg: &RunConfig,
    corpus: &Corpus,
    flags: AblationFlags,
    captioner: Option<&dyn Captioner>,
    dev_labels: LabelSource,
    seed: u64,
) -> Result<TrainedGenerator> {
    log::info!("train generator: flags {flags:?} seed {seed} config {}", cfg.hash());
    train_generator(corpus, &generate_config_for(cfg, corpus, flags), captioner, dev_labels, seed)
}

/// For each episode of `split`: predict the last turn's labels, build the
/// prompt, caption the window and the final frame, assemble the input and
/// decode a response.
pub fn infer(
    corpus: &Corpus,
    split: Split,
    model: &GeneratorModel,
    config: &GenerateConfig,
    captioner: Option<&dyn Captioner>,
    labels: LabelSource,
) -> Result<Vec<ResponseRecord>> {
    let builder = config.builder(corpus.vocab(), captioner);
    let mut out = Vec::new();
    for ep in corpus.split(split) {
        let turn_labels = labels.last_turn(corpus.vocab(), ep)?;
        let sample = builder.build(ep, turn_labels)?;
        let result = model.generate(corpus.vocab(), &sample.input, config.decode, config.max_len)?;
        out.push(ResponseRecord {
            episode_id: ep.episode_id.clone(),
            response_text: result.text,
            decode_method: result.method,
            log_prob: result.log_prob,
        });
    }
    Ok(out)
}

/// Scores responses against each episode's final utterance. Every episode of
/// the split needs exactly one response.
pub fn score_responses(corpus: &Corpus, split: Split, records: &[ResponseRecord]) -> Result<GenScore> {
    let mut by_id: HashMap<&str, &str> = HashMap::new();
    for r in records {
        if by_id.insert(&r.episode_id, &r.response_text).is_some() {
            return Err(Error::Config(format!("duplicate response for episode {}", r.episode_id)));
        }
    }
    let (mut cands, mut refs) = (Vec::new(), Vec::new());
    for ep in corpus.split(split) {
        let text = by_id
            .remove(ep.episode_id.as_str())
            .ok_or_else(|| Error::Config(format!("no response for episode {}", ep.episode_id)))?;
        cands.push(text.to_string());
        refs.push(ep.utterances.last().map(|u| u.text.clone()).unwrap_or_default());
    }
    if let Some(extra) = by_id.keys().next() {
        return Err(Error::Config(format!("response for unknown episode {extra}")));
    }
    gen_score(&cands, &single_refs(&refs))
}

/// Scores per-utterance predictions against the gold labels of `split`.
pub fn score_predictions(corpus: &Corpus, split: Split, records: &[PredictionRecord]) -> Result<TrackScores> {
    let mut by_key: HashMap<(&str, usize), (u8, u8)> = HashMap::new();
    for r in records {
        if by_key
            .insert((&r.episode_id, r.utterance_index), (r.scene_label, r.session_label))
            .is_some()
        {
            return Err(Error::Config(format!(
                "duplicate prediction for {} utterance {}",
                r.episode_id, r.utterance_index
            )));
        }
    }
    let (mut ps, mut pt, mut gs, mut gt) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for ep in corpus.split(split) {
        for (i, u) in ep.utterances.iter().enumerate() {
            let (s, t) = by_key.remove(&(ep.episode_id.as_str(), i)).ok_or_else(|| {
                Error::Config(format!("no prediction for {} utterance {i}", ep.episode_id))
            })?;
            ps.push(s);
            pt.push(t);
            gs.push(u.scene_label);
            gt.push(u.session_label);
        }
    }
    if !by_key.is_empty() {
        return Err(Error::Config(format!("{} predictions do not match the split", by_key.len())));
    }
    Ok(TrackScores {
        scene: boundary_score(&ps, &gs)?,
        session: boundary_score(&pt, &gt)?,
    })
}

fn track_scores(model: &UnderstandingModel, corpus: &Corpus, task: &MultiTaskConfig, window: usize) -> Result<TrackScores> {
    let (_, scene, session) = evaluate_split(model, corpus, Split::Test, task, window)?;
    Ok(TrackScores { scene, session })
}

/// Trains and scores every configured variant for every seed, on the test
/// split. Understanding rows cover the random and majority baselines and the
/// trained models; generation rows cover the random baseline and each
/// variant.
pub fn run_ablation(cfg: &RunConfig, corpus: &Corpus) -> Result<MetricReport> {
    cfg.validate()?;
    let captioner = stub_captioner(corpus, cfg);
    let cap: &dyn Captioner = &captioner;
    let variants = &cfg.ablation.variants;
    let window = cfg.understand.window;
    let needs_single = variants.contains(&Variant::SingleTask);

    let mut under: BTreeMap<String, BTreeMap<u64, TrackScores>> = BTreeMap::new();
    let mut generation: BTreeMap<String, BTreeMap<u64, GenScore>> = BTreeMap::new();
    let mut warnings = Vec::new();
    let test_refs: Vec<String> = corpus
        .split(Split::Test)
        .map(|e| e.utterances.last().map(|u| u.text.clone()).unwrap_or_default())
        .collect();

    for &seed in &cfg.run.seeds {
        log::info!("ablation seed {seed} config {}", cfg.hash());
        let rb = random_boundary(corpus.split(Split::Test), seed)?;
        under.entry("random".into()).or_default().insert(seed, TrackScores {
            scene: rb.scene,
            session: rb.session,
        });
        let mb = majority_boundary(corpus.split(Split::Test))?;
        under.entry("majority".into()).or_default().insert(seed, TrackScores {
            scene: mb.scene,
            session: mb.session,
        });
        generation
            .entry("random".into())
            .or_default()
            .insert(seed, random_generation(corpus.vocab(), &test_refs, seed)?);

        let multi = train_understanding_mode(cfg, corpus, TaskMode::Multi, seed)
            .map_err(|e| e.in_run(format!("multi-task understanding, seed {seed}")))?;
        warnings.extend(multi.warnings.iter().map(|w| format!("seed {seed} multi-task: {w}")));
        let multi_task = multi.config.task;
        under
            .entry("multi_task".into())
            .or_default()
            .insert(seed, track_scores(&multi.model, corpus, &multi_task, window)?);

        let single = if needs_single {
            let scene = train_understanding_mode(cfg, corpus, TaskMode::SceneOnly, seed)
                .map_err(|e| e.in_run(format!("scene-only understanding, seed {seed}")))?;
            let session = train_understanding_mode(cfg, corpus, TaskMode::SessionOnly, seed)
                .map_err(|e| e.in_run(format!("session-only understanding, seed {seed}")))?;
            let s = track_scores(&scene.model, corpus, &scene.config.task, window)?;
            let t = track_scores(&session.model, corpus, &session.config.task, window)?;
            under.entry("single_task".into()).or_default().insert(seed, TrackScores {
                scene: s.scene,
                session: t.session,
            });
            Some((scene, session))
        } else {
            None
        };

        for &variant in variants {
            let labels = match (variant, &single) {
                (Variant::NoPrompt, _) => LabelSource::Gold,
                (Variant::SingleTask, Some((scene, session))) => LabelSource::Predicted {
                    scene: &scene.model,
                    session: &session.model,
                    task: &multi_task,
                    window,
                },
                _ => LabelSource::Predicted {
                    scene: &multi.model,
                    session: &multi.model,
                    task: &multi_task,
                    window,
                },
            };
            let score = (|| {
                let flags = variant.flags();
                let trained = train_generator_for(cfg, corpus, flags, Some(cap), labels, seed)?;
                let gen_cfg = generate_config_for(cfg, corpus, flags);
                let responses = infer(corpus, Split::Test, &trained.model, &gen_cfg, Some(cap), labels)?;
                score_responses(corpus, Split::Test, &responses)
            })()
            .map_err(|e| e.in_run(format!("variant {variant}, seed {seed}")))?;
            log::info!("variant {variant} seed {seed}: avg {:.3}", score.avg * 100.0);
            generation.entry(variant.name().into()).or_default().insert(seed, score);
        }
    }

    let split = SplitReport {
        understanding: under
            .into_iter()
            .map(|(k, v)| (k, UnderstandingRow::from_seeds(v)))
            .collect(),
        generation: generation
            .into_iter()
            .map(|(k, v)| (k, GenerationRow::from_seeds(v)))
            .collect(),
    };
    Ok(MetricReport {
        run_id: cfg.run_id(),
        config_hash: cfg.hash(),
        seeds: cfg.run.seeds.clone(),
        splits: BTreeMap::from([(Split::Test.as_str().to_string(), split)]),
        warnings,
    })
}
