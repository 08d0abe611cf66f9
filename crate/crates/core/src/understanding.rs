//! Scene and session boundary prediction: two logistic heads over the fusion
//! encoder's separator vectors, trained jointly or one task at a time.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Matrix, ParamStore, Var};
use crate::checkpoint::{load_manifest, load_params_into, save_checkpoint};
use crate::corpus::{Corpus, DialogueEpisode, Split, Utterance};
use crate::error::{Error, Result};
use crate::fusion::{assemble_window, window_from_utterances, EncodedDialogue, Encoder, EncoderConfig, WindowInput, WindowUtterance};
use crate::metrics::{boundary_score, BoundaryScore};
use crate::nn::Linear;
use crate::optim::{shuffled_batches, TrainConfig, Trainer};
use crate::vocab::Vocab;

pub const DEFAULT_WINDOW: usize = 8;
pub const MAX_AUTO_POS_WEIGHT: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    Multi,
    SceneOnly,
    SessionOnly,
}

impl fmt::Display for TaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskMode::Multi => "multi",
            TaskMode::SceneOnly => "scene_only",
            TaskMode::SessionOnly => "session_only",
        })
    }
}

impl FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi" => Ok(TaskMode::Multi),
            "scene_only" => Ok(TaskMode::SceneOnly),
            "session_only" => Ok(TaskMode::SessionOnly),
            other => Err(Error::Config(format!("unknown task mode {other:?}"))),
        }
    }
}

/// Positive-class weight: inverse training prevalence capped at 10, or a
/// fixed value (1 disables reweighting).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ClassWeight {
    Auto,
    Fixed(f64),
}

impl FromStr for ClassWeight {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(ClassWeight::Auto);
        }
        match s.parse::<f64>() {
            Ok(w) if w > 0.0 && w.is_finite() => Ok(ClassWeight::Fixed(w)),
            _ => Err(Error::Config(format!("class_weight must be \"auto\" or a positive number, got {s:?}"))),
        }
    }
}

impl TryFrom<String> for ClassWeight {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ClassWeight> for String {
    fn from(w: ClassWeight) -> String {
        match w {
            ClassWeight::Auto => "auto".into(),
            ClassWeight::Fixed(v) => v.to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosWeights {
    pub scene: f64,
    pub session: f64,
}

impl PosWeights {
    pub const UNIT: PosWeights = PosWeights { scene: 1.0, session: 1.0 };

    pub fn resolve(weight: ClassWeight, scene_rate: f64, session_rate: f64) -> Self {
        let auto = |p: f64| if p > 0.0 { (1.0 / p).min(MAX_AUTO_POS_WEIGHT) } else { 1.0 };
        match weight {
            ClassWeight::Auto => PosWeights {
                scene: auto(scene_rate),
                session: auto(session_rate),
            },
            ClassWeight::Fixed(w) => PosWeights { scene: w, session: w },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskConfig {
    pub mode: TaskMode,
    pub w_scene: f64,
    pub w_session: f64,
    pub threshold: f64,
    pub repair: bool,
    pub class_weight: ClassWeight,
}

impl Default for MultiTaskConfig {
    fn default() -> Self {
        Self::for_mode(TaskMode::Multi)
    }
}

impl MultiTaskConfig {
    /// Unit weights on the active tasks, zero elsewhere.
    pub fn for_mode(mode: TaskMode) -> Self {
        let (w_scene, w_session) = match mode {
            TaskMode::Multi => (1.0, 1.0),
            TaskMode::SceneOnly => (1.0, 0.0),
            TaskMode::SessionOnly => (0.0, 1.0),
        };
        Self {
            mode,
            w_scene,
            w_session,
            threshold: 0.5,
            repair: false,
            class_weight: ClassWeight::Auto,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_scene >= 0.0 && self.w_session >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        let consistent = match self.mode {
            TaskMode::Multi => self.w_scene > 0.0 && self.w_session > 0.0,
            TaskMode::SceneOnly => self.w_scene > 0.0 && self.w_session == 0.0,
            TaskMode::SessionOnly => self.w_scene == 0.0 && self.w_session > 0.0,
        };
        if !consistent {
            return Err(Error::Config(format!(
                "mode {} is inconsistent with weights ({}, {})",
                self.mode, self.w_scene, self.w_session
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-utterance probabilities and thresholded labels for both tracks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPrediction {
    pub scene_prob: Vec<f64>,
    pub session_prob: Vec<f64>,
    pub scene_label: Vec<u8>,
    pub session_label: Vec<u8>,
    pub repair_applied: Vec<bool>,
}

impl BoundaryPrediction {
    /// Thresholds (ties count as positive) and optionally repairs the
    /// forbidden `(scene=1, session=0)` pair by promoting session to 1.
    pub fn from_probs(scene_prob: Vec<f64>, session_prob: Vec<f64>, threshold: f64, repair: bool) -> Self {
        let scene_label: Vec<u8> = scene_prob.iter().map(|&p| (p >= threshold) as u8).collect();
        let mut session_label: Vec<u8> = session_prob.iter().map(|&p| (p >= threshold) as u8).collect();
        let mut repair_applied = vec![false; scene_label.len()];
        if repair {
            for i in 0..scene_label.len() {
                if scene_label[i] == 1 && session_label[i] == 0 {
                    session_label[i] = 1;
                    repair_applied[i] = true;
                }
            }
        }
        Self {
            scene_prob,
            session_prob,
            scene_label,
            session_label,
            repair_applied,
        }
    }

    pub fn len(&self) -> usize {
        self.scene_label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scene_label.is_empty()
    }

    fn extend(&mut self, other: BoundaryPrediction, from: usize) {
        self.scene_prob.extend_from_slice(&other.scene_prob[from..]);
        self.session_prob.extend_from_slice(&other.session_prob[from..]);
        self.scene_label.extend_from_slice(&other.scene_label[from..]);
        self.session_label.extend_from_slice(&other.session_label[from..]);
        self.repair_applied.extend_from_slice(&other.repair_applied[from..]);
    }

    fn empty() -> Self {
        Self::from_probs(Vec::new(), Vec::new(), 0.5, false)
    }
}

fn check_labels(labels: &[u8]) -> Result<Vec<f64>> {
    labels
        .iter()
        .map(|&l| if l <= 1 { Ok(l as f64) } else { Err(Error::InvalidLabel(l as i64)) })
        .collect()
}

/// `w_scene · BCE_scene + w_session · BCE_session`, each a mean over the
/// rows of its `n × 1` logits. Terms with zero weight are left out of the
/// graph, so their head receives no gradient at all.
pub fn joint_loss(
    g: &mut Graph,
    scene_logits: Var,
    session_logits: Var,
    gold_scene: &[u8],
    gold_session: &[u8],
    config: &MultiTaskConfig,
    pos_weights: PosWeights,
) -> Result<Var> {
    if !(config.w_scene >= 0.0 && config.w_session >= 0.0) {
        return Err(Error::Config("loss weights must be non-negative".into()));
    }
    if config.w_scene == 0.0 && config.w_session == 0.0 {
        return Err(Error::Config("at least one loss weight must be positive".into()));
    }
    let n = g.value(scene_logits).nrows();
    for labels in [gold_scene, gold_session] {
        if labels.len() != n {
            return Err(Error::LengthMismatch {
                left: n,
                right: labels.len(),
            });
        }
    }
    let mut terms = Vec::with_capacity(2);
    if config.w_scene > 0.0 {
        let y = check_labels(gold_scene)?;
        let l = g.bce_with_logits(scene_logits, &y, pos_weights.scene);
        terms.push(g.scale(l, config.w_scene));
    }
    if config.w_session > 0.0 {
        let y = check_labels(gold_session)?;
        let l = g.bce_with_logits(session_logits, &y, pos_weights.session);
        terms.push(g.scale(l, config.w_session));
    }
    Ok(match terms[..] {
        [a] => a,
        [a, b] => g.add(a, b),
        _ => unreachable!("one or two loss terms"),
    })
}

/// Window `[start, end)` plus the first index whose labels it predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpan {
    pub start: usize,
    pub end: usize,
    pub first_target: usize,
}

/// Windows of `size` utterances where consecutive windows share one
/// utterance; the shared utterance is predicted by the earlier window, where
/// it is preceded by context.
pub fn window_spans(n: usize, size: usize) -> Vec<WindowSpan> {
    window_spans_shifted(n, size, 0)
}

/// The same tiling with the first window shortened by `shift` utterances,
/// which moves every later boundary `shift` places earlier.
pub fn window_spans_shifted(n: usize, size: usize, shift: usize) -> Vec<WindowSpan> {
    assert!(size >= 2, "window size must be at least 2");
    assert!(shift + 2 <= size, "shift must leave at least two utterances in the first window");
    let mut spans = Vec::new();
    let mut start = 0;
    let mut end = (size - shift).min(n);
    loop {
        spans.push(WindowSpan {
            start,
            end,
            first_target: if start == 0 { 0 } else { start + 1 },
        });
        if end >= n {
            break;
        }
        start = end - 1;
        end = (start + size).min(n);
    }
    spans
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnderstandingManifest {
    pub encoder: EncoderConfig,
    pub task: MultiTaskConfig,
    pub window: usize,
}

/// Fused encoder with a scene head and a session head.
#[derive(Clone, Debug)]
pub struct UnderstandingModel {
    pub params: ParamStore,
    pub encoder: Encoder,
    pub scene_head: Linear,
    pub session_head: Linear,
}

impl UnderstandingModel {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, "enc", config, true, &mut rng)?;
        let d = encoder.config.d_model;
        let scene_head = Linear::new(&mut params, "head.scene", d, 1, &mut rng);
        let session_head = Linear::new(&mut params, "head.session", d, 1, &mut rng);
        Ok(Self {
            params,
            encoder,
            scene_head,
            session_head,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    /// Scene and session logits (`n × 1`) for the utterances at `rows` of
    /// the window.
    pub fn logits(&self, g: &mut Graph, input: &WindowInput, rows: &[usize]) -> Result<(Var, Var)> {
        let h = self.encoder.forward(g, &input.tokens, Some(&input.features))?;
        let positions: Vec<usize> = rows.iter().map(|&r| input.sep_positions[r]).collect();
        let sep = g.gather(h, &positions);
        let scene = self.scene_head.forward(g, sep);
        let session = self.session_head.forward(g, sep);
        Ok((scene, session))
    }

    /// Both tracks from one pass over the heads.
    pub fn predict(&self, encoded: &EncodedDialogue, config: &MultiTaskConfig) -> Result<BoundaryPrediction> {
        if encoded.sep_vectors.ncols() != self.config().d_model {
            return Err(Error::Dimension {
                context: "separator vectors",
                expected: self.config().d_model,
                found: encoded.sep_vectors.ncols(),
            });
        }
        let mut g = Graph::new(&self.params);
        let sep = g.constant(encoded.sep_vectors.clone());
        let s = self.scene_head.forward(&mut g, sep);
        let t = self.session_head.forward(&mut g, sep);
        let probs = |m: &Matrix| m.column(0).iter().map(|&z| sigmoid(z)).collect::<Vec<f64>>();
        Ok(BoundaryPrediction::from_probs(
            probs(g.value(s)),
            probs(g.value(t)),
            config.threshold,
            config.repair,
        ))
    }

    pub fn encode(&self, window: &[WindowUtterance]) -> Result<EncodedDialogue> {
        let input = assemble_window(window, self.config().feature_dim, self.config().max_tokens)?;
        self.encoder.encode(&self.params, &input)
    }

    /// Predicts every utterance of an episode using overlapping windows.
    pub fn predict_episode(
        &self,
        vocab: &Vocab,
        episode: &DialogueEpisode,
        config: &MultiTaskConfig,
        window: usize,
    ) -> Result<BoundaryPrediction> {
        let track = episode.frame_track();
        let all = window_from_utterances(vocab, &episode.utterances, &track)?;
        let mut out = BoundaryPrediction::empty();
        for span in window_spans(all.len(), window) {
            let encoded = self.encode(&all[span.start..span.end])?;
            // Utterances dropped by truncation are predicted from a shorter
            // window holding just the newest ones.
            let pred = self.predict(&encoded, config)?;
            let offset = span.start + encoded.dropped;
            let from = span.first_target.saturating_sub(offset);
            if offset > span.first_target {
                return Err(Error::Config(format!(
                    "window of {window} utterances exceeds max_tokens {}",
                    self.config().max_tokens
                )));
            }
            out.extend(pred, from);
        }
        Ok(out)
    }

    /// Labels for a turn whose text is not known yet: the preceding
    /// utterances plus the new turn's frame, with its words hidden.
    pub fn predict_last_turn(
        &self,
        vocab: &Vocab,
        context: &[Utterance],
        response_feature: &[f64],
        config: &MultiTaskConfig,
        window: usize,
    ) -> Result<(u8, u8, f64, f64)> {
        let keep = context.len().min(window.saturating_sub(1));
        let ctx = &context[context.len() - keep..];
        let mut utts: Vec<WindowUtterance> = ctx
            .iter()
            .map(|u| WindowUtterance {
                tokens: vocab.encode(&u.text),
                feature: u.frame_feature.clone(),
            })
            .collect();
        utts.push(WindowUtterance::masked(response_feature.to_vec()));
        let pred = self.predict(&self.encode(&utts)?, config)?;
        let i = pred.len() - 1;
        Ok((pred.scene_label[i], pred.session_label[i], pred.scene_prob[i], pred.session_prob[i]))
    }

    pub fn save(&self, path: &Path, task: &MultiTaskConfig, window: usize) -> Result<()> {
        let manifest = UnderstandingManifest {
            encoder: self.config().clone(),
            task: *task,
            window,
        };
        save_checkpoint(path, &self.params, &manifest)
    }

    pub fn load(path: &Path) -> Result<(Self, UnderstandingManifest)> {
        let manifest: UnderstandingManifest = load_manifest(path)?;
        let mut model = Self::new(manifest.encoder.clone(), 0)?;
        load_params_into(path, &mut model.params)?;
        Ok((model, manifest))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnderstandConfig {
    pub task: MultiTaskConfig,
    pub train: TrainConfig,
    pub window: usize,
    /// Chance that a training window's final utterance has its words hidden.
    pub mask_last_prob: f64,
}

impl Default for UnderstandConfig {
    fn default() -> Self {
        Self {
            task: MultiTaskConfig::default(),
            train: TrainConfig::default(),
            window: DEFAULT_WINDOW,
            mask_last_prob: 0.25,
        }
    }
}

impl UnderstandConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.train.validate()?;
        if self.window < 2 {
            return Err(Error::Config("understanding window must hold at least 2 utterances".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_last_prob) {
            return Err(Error::Config("mask_last_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_scene: BoundaryScore,
    pub dev_session: BoundaryScore,
    /// Model-selection score: mean accuracy over the active tracks.
    pub dev_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedUnderstanding {
    pub model: UnderstandingModel,
    pub config: UnderstandConfig,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub warnings: Vec<String>,
}

struct WindowSample {
    full: WindowInput,
    masked: WindowInput,
    rows: Vec<usize>,
    scene: Vec<u8>,
    session: Vec<u8>,
}

/// Window-ready utterances and gold labels of one episode.
struct PreparedEpisode {
    utterances: Vec<WindowUtterance>,
    scene: Vec<u8>,
    session: Vec<u8>,
}

fn prepare_split(corpus: &Corpus, split: Split) -> Result<Vec<PreparedEpisode>> {
    corpus
        .split(split)
        .map(|ep| {
            Ok(PreparedEpisode {
                utterances: window_from_utterances(corpus.vocab(), &ep.utterances, &ep.frame_track())?,
                scene: ep.utterances.iter().map(|u| u.scene_label).collect(),
                session: ep.utterances.iter().map(|u| u.session_label).collect(),
            })
        })
        .collect()
}

/// Training windows for one epoch. Each episode's tiling is shifted by a
/// random amount so utterances do not always sit at the same window offset.
fn window_samples(
    episodes: &[PreparedEpisode],
    config: &EncoderConfig,
    window: usize,
    rng: &mut impl Rng,
) -> Result<Vec<WindowSample>> {
    let mut out = Vec::new();
    for ep in episodes {
        let shift = rng.random_range(0..window - 1);
        for span in window_spans_shifted(ep.utterances.len(), window, shift) {
            let utts = &ep.utterances[span.start..span.end];
            let full = assemble_window(utts, config.feature_dim, config.max_tokens)?;
            let mut hidden = utts.to_vec();
            let last = hidden.len() - 1;
            hidden[last] = WindowUtterance::masked(hidden[last].feature.clone());
            let masked = assemble_window(&hidden, config.feature_dim, config.max_tokens)?;
            if full.dropped != masked.dropped {
                continue;
            }
            let first = span.first_target.max(span.start + full.dropped);
            let rows: Vec<usize> = (first..span.end).map(|i| i - span.start - full.dropped).collect();
            out.push(WindowSample {
                full,
                masked,
                rows,
                scene: ep.scene[first..span.end].to_vec(),
                session: ep.session[first..span.end].to_vec(),
            });
        }
    }
    Ok(out)
}

/// Per-episode predictions and pooled scores for one split.
pub fn evaluate_split(
    model: &UnderstandingModel,
    corpus: &Corpus,
    split: Split,
    config: &MultiTaskConfig,
    window: usize,
) -> Result<(Vec<(String, BoundaryPrediction)>, BoundaryScore, BoundaryScore)> {
    let mut preds = Vec::new();
    let (mut ps, mut pt, mut gs, mut gt) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for ep in corpus.split(split) {
        let p = model.predict_episode(corpus.vocab(), ep, config, window)?;
        ps.extend_from_slice(&p.scene_label);
        pt.extend_from_slice(&p.session_label);
        gs.extend(ep.utterances.iter().map(|u| u.scene_label));
        gt.extend(ep.utterances.iter().map(|u| u.session_label));
        preds.push((ep.episode_id.clone(), p));
    }
    Ok((preds, boundary_score(&ps, &gs)?, boundary_score(&pt, &gt)?))
}

pub fn selection_score(mode: TaskMode, scene: &BoundaryScore, session: &BoundaryScore) -> f64 {
    match mode {
        TaskMode::Multi => 0.5 * (scene.acc + session.acc),
        TaskMode::SceneOnly => scene.acc,
        TaskMode::SessionOnly => session.acc,
    }
}

fn positive_rate(labels: impl Iterator<Item = u8>) -> f64 {
    let (mut pos, mut n) = (0usize, 0usize);
    for l in labels {
        pos += l as usize;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        pos as f64 / n as f64
    }
}

/// Flags a track whose predictions collapsed onto the negative class.
pub fn majority_collapse_warning(track: &str, score: &BoundaryScore) -> Option<String> {
    let negative_rate = (score.tn + score.fp) as f64 / score.n().max(1) as f64;
    (score.f1 == 0.0 && score.tp + score.fp == 0 && (score.acc - negative_rate).abs() < 1e-12).then(|| {
        format!(
            "{track}: majority collapse (F1 = 0, accuracy {:.3} equals the negative rate)",
            score.acc * 100.0
        )
    })
}

/// Trains on the train split, scores dev after every epoch and keeps the
/// parameters of the best-scoring epoch (earliest on ties).
pub fn train_understanding(
    corpus: &Corpus,
    encoder: &EncoderConfig,
    config: &UnderstandConfig,
    seed: u64,
) -> Result<TrainedUnderstanding> {
    config.validate()?;
    if encoder.vocab_size != corpus.vocab().len() || encoder.feature_dim != corpus.feature_dim() {
        return Err(Error::Config(format!(
            "encoder expects vocab {} / k {}, corpus has {} / {}",
            encoder.vocab_size,
            encoder.feature_dim,
            corpus.vocab().len(),
            corpus.feature_dim()
        )));
    }
    if corpus.split(Split::Train).next().is_none() || corpus.split(Split::Dev).next().is_none() {
        return Err(Error::Empty("train or dev split"));
    }
    let mut model = UnderstandingModel::new(encoder.clone(), seed)?;
    let episodes = prepare_split(corpus, Split::Train)?;
    let train_utts = || corpus.split(Split::Train).flat_map(|e| e.utterances.iter());
    let weights = PosWeights::resolve(
        config.task.class_weight,
        positive_rate(train_utts().map(|u| u.scene_label)),
        positive_rate(train_utts().map(|u| u.session_label)),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut samples = window_samples(&episodes, encoder, config.window, &mut rng)?;
    let steps_per_epoch = samples.len().div_ceil(config.train.batch_size);
    let mut trainer = Trainer::new(&model.params, &config.train, steps_per_epoch);
    let mut history = Vec::with_capacity(config.train.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 0..config.train.epochs {
        if epoch > 0 {
            samples = window_samples(&episodes, encoder, config.window, &mut rng)?;
        }
        let mut loss_sum = 0.0;
        let batches = shuffled_batches(samples.len(), config.train.batch_size, &mut rng);
        for (step, batch) in batches.iter().enumerate() {
            let masks: Vec<bool> = batch.iter().map(|_| rng.random::<f64>() < config.mask_last_prob).collect();
            let graph_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let (loss, grads) = {
                let mut g = Graph::train(&model.params, graph_rng);
                let mut total: Option<Var> = None;
                for (&i, &mask) in batch.iter().zip(&masks) {
                    let s = &samples[i];
                    let input = if mask { &s.masked } else { &s.full };
                    let (zs, zt) = model.logits(&mut g, input, &s.rows)?;
                    let l = joint_loss(&mut g, zs, zt, &s.scene, &s.session, &config.task, weights)?;
                    total = Some(match total {
                        Some(t) => g.add(t, l),
                        None => l,
                    });
                }
                let total = total.expect("non-empty batch");
                let mean = g.scale(total, 1.0 / batch.len() as f64);
                (g.scalar(mean), g.backward(mean))
            };
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            loss_sum += loss;
            trainer.step(&mut model.params, grads);
        }
        let (_, dev_scene, dev_session) = evaluate_split(&model, corpus, Split::Dev, &config.task, config.window)?;
        let dev_acc = selection_score(config.task.mode, &dev_scene, &dev_session);
        let train_loss = loss_sum / batches.len().max(1) as f64;
        log::info!(
            "understand epoch {epoch}: loss {train_loss:.5} dev scene acc {:.3} session acc {:.3}",
            dev_scene.acc * 100.0,
            dev_session.acc * 100.0
        );
        history.push(EpochLog {
            epoch,
            train_loss,
            dev_scene,
            dev_session,
            dev_acc,
        });
        if best.as_ref().is_none_or(|(b, _, _)| dev_acc > *b) {
            best = Some((dev_acc, epoch, model.params.clone()));
        }
    }

    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    let log_best = &history[best_epoch];
    let mut warnings = Vec::new();
    if config.task.mode != TaskMode::SessionOnly {
        warnings.extend(majority_collapse_warning("scene", &log_best.dev_scene));
    }
    if config.task.mode != TaskMode::SceneOnly {
        warnings.extend(majority_collapse_warning("session", &log_best.dev_session));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(TrainedUnderstanding {
        model,
        config: config.clone(),
        history,
        best_epoch,
        warnings,
    })
}

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub episode_id: String,
    pub utterance_index: usize,
    pub scene_prob: f64,
    pub session_prob: f64,
    pub scene_label: u8,
    pub session_label: u8,
}

pub fn prediction_records(episode_id: &str, pred: &BoundaryPrediction) -> Vec<PredictionRecord> {
    (0..pred.len())
        .map(|i| PredictionRecord {
            episode_id: episode_id.to_string(),
            utterance_index: i,
            scene_prob: pred.scene_prob[i],
            session_prob: pred.session_prob[i],
            scene_label: pred.scene_label[i],
            session_label: pred.session_label[i],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn repair_promotes_session() {
        let p = BoundaryPrediction::from_probs(vec![0.9, 0.1], vec![0.2, 0.1], 0.5, true);
        assert_eq!((p.scene_label[0], p.session_label[0]), (1, 1));
        assert!(p.repair_applied[0]);
        assert_eq!((p.scene_label[1], p.session_label[1]), (0, 0));
        assert!(!p.repair_applied[1]);
    }

    #[test]
    fn repair_off_keeps_raw_pair() {
        let p = BoundaryPrediction::from_probs(vec![0.9], vec![0.2], 0.5, false);
        assert_eq!((p.scene_label[0], p.session_label[0]), (1, 0));
    }

    #[test]
    fn threshold_ties_are_positive() {
        let p = BoundaryPrediction::from_probs(vec![0.49, 0.5], vec![0.5, 0.51], 0.5, false);
        assert_eq!(p.scene_label, vec![0, 1]);
        assert_eq!(p.session_label, vec![1, 1]);
    }

    #[test]
    fn uniform_logits_cost_ln2_per_task() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let zs = g.constant(array![[0.0], [0.0]]);
        let zt = g.constant(array![[0.0], [0.0]]);
        let cfg = MultiTaskConfig::for_mode(TaskMode::Multi);
        let l = joint_loss(&mut g, zs, zt, &[1, 0], &[1, 1], &cfg, PosWeights::UNIT).unwrap();
        assert!((g.scalar(l) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_cost_nothing() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let zs = g.constant(array![[60.0], [-60.0]]);
        let zt = g.constant(array![[60.0], [-60.0]]);
        let cfg = MultiTaskConfig::default();
        let l = joint_loss(&mut g, zs, zt, &[1, 0], &[1, 0], &cfg, PosWeights::UNIT).unwrap();
        assert!(g.scalar(l) < 1e-20);
    }

    #[test]
    fn negative_weight_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let z = g.constant(array![[0.0]]);
        let cfg = MultiTaskConfig {
            w_scene: -1.0,
            ..MultiTaskConfig::default()
        };
        assert!(joint_loss(&mut g, z, z, &[0], &[0], &cfg, PosWeights::UNIT).is_err());
    }

    #[test]
    fn mode_and_weights_must_agree() {
        let bad = MultiTaskConfig {
            w_session: 0.5,
            ..MultiTaskConfig::for_mode(TaskMode::SceneOnly)
        };
        assert!(bad.validate().is_err());
        assert!(MultiTaskConfig::for_mode(TaskMode::SessionOnly).validate().is_ok());
    }

    #[test]
    fn windows_overlap_by_one() {
        let spans = window_spans(20, 8);
        assert_eq!(
            spans,
            vec![
                WindowSpan { start: 0, end: 8, first_target: 0 },
                WindowSpan { start: 7, end: 15, first_target: 8 },
                WindowSpan { start: 14, end: 20, first_target: 15 },
            ]
        );
        assert_eq!(window_spans(5, 8), vec![WindowSpan { start: 0, end: 5, first_target: 0 }]);
    }

    #[test]
    fn shifted_windows_predict_every_utterance_once() {
        for shift in 0..7 {
            let spans = window_spans_shifted(20, 8, shift);
            assert_eq!(spans[0].end, 8 - shift);
            let targets: Vec<usize> = spans.iter().flat_map(|s| s.first_target..s.end).collect();
            assert_eq!(targets, (0..20).collect::<Vec<_>>());
            assert!(spans.iter().all(|s| s.end - s.start <= 8));
        }
    }

    #[test]
    fn class_weight_parses() {
        assert_eq!("auto".parse::<ClassWeight>().unwrap(), ClassWeight::Auto);
        assert_eq!("1".parse::<ClassWeight>().unwrap(), ClassWeight::Fixed(1.0));
        assert!("-2".parse::<ClassWeight>().is_err());
        let w = PosWeights::resolve(ClassWeight::Auto, 0.05, 0.25);
        assert_eq!((w.scene, w.session), (10.0, 4.0));
    }
}
