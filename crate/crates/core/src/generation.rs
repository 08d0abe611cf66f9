//! Encoder-decoder response generator conditioned on the assembled input
//! (context, captions, prompt), trained with teacher forcing.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, ParamId, ParamStore, Var};
use crate::captioning::Captioner;
use crate::checkpoint::{load_manifest, load_params_into, save_checkpoint};
use crate::corpus::{Corpus, DialogueEpisode, Split};
use crate::error::{Error, Result};
use crate::fusion::{Encoder, EncoderConfig};
use crate::metrics::{bleu1, single_refs};
use crate::nn::{causal_mask, sinusoid_table, DecoderLayer, LayerNorm, Linear};
use crate::optim::{shuffled_batches, TrainConfig, Trainer};
use crate::prompting::{assemble_input, build_prompt, AblationFlags, GeneratorInput, InputParts};
use crate::understanding::{MultiTaskConfig, UnderstandingModel};
use crate::vocab::{is_special, TokenId, Vocab, BOS, EOS, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Text-only encoder; `feature_dim` is ignored.
    pub encoder: EncoderConfig,
    pub decoder_layers: usize,
    /// Longest decoder sequence, `[BOS]` and `[EOS]` included.
    pub max_target_len: usize,
}

impl GeneratorConfig {
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            encoder: EncoderConfig::tiny(vocab_size, 1),
            decoder_layers: 2,
            max_target_len: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.max_target_len < 2 {
            return Err(Error::Config("max_target_len must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMethod {
    Greedy,
    Beam(usize),
}

impl fmt::Display for DecodeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeMethod::Greedy => f.write_str("greedy"),
            DecodeMethod::Beam(b) => write!(f, "beam({b})"),
        }
    }
}

impl FromStr for DecodeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("decode method must be \"greedy\" or \"beam(<width>)\", got {s:?}"));
        if s == "greedy" {
            return Ok(DecodeMethod::Greedy);
        }
        let width = s
            .strip_prefix("beam(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|w| w.parse::<usize>().ok())
            .ok_or_else(bad)?;
        if width == 0 {
            return Err(bad());
        }
        Ok(DecodeMethod::Beam(width))
    }
}

impl Serialize for DecodeMethod {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DecodeMethod {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Generated tokens, ending with `[EOS]` when one was produced.
    pub token_ids: Vec<TokenId>,
    pub text: String,
    pub token_log_probs: Vec<f64>,
    /// Sum of `token_log_probs`.
    pub log_prob: f64,
    pub method: DecodeMethod,
}

fn log_softmax_row(row: ndarray::ArrayView1<f64>) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    row.iter().map(|z| z - lse).collect()
}

/// Tokens the decoder may emit: `[EOS]` and every ordinary word.
fn emittable(id: TokenId) -> bool {
    id == EOS || !is_special(id)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorManifest {
    pub config: GeneratorConfig,
}

/// Text encoder plus a causal decoder that shares the token embedding table.
#[derive(Clone, Debug)]
pub struct GeneratorModel {
    pub params: ParamStore,
    pub config: GeneratorConfig,
    pub encoder: Encoder,
    decoder_positions: ParamId,
    decoder_emb_norm: LayerNorm,
    decoder_layers: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    pub output: Linear,
}

impl GeneratorModel {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, "gen.enc", config.encoder.clone(), false, &mut rng)?;
        let d = config.encoder.d_model;
        let decoder_positions = params.add("gen.dec.pos_emb", sinusoid_table(config.max_target_len, d));
        let decoder_emb_norm = LayerNorm::new(&mut params, "gen.dec.emb_norm", d);
        let decoder_layers = (0..config.decoder_layers)
            .map(|i| {
                DecoderLayer::new(
                    &mut params,
                    &format!("gen.dec.layer{i}"),
                    d,
                    config.encoder.n_heads,
                    config.encoder.d_ff,
                    &mut rng,
                )
            })
            .collect();
        let decoder_norm = LayerNorm::new(&mut params, "gen.dec.final_norm", d);
        let output = Linear::new(&mut params, "gen.out", d, config.encoder.vocab_size, &mut rng);
        Ok(Self {
            params,
            config,
            encoder,
            decoder_positions,
            decoder_emb_norm,
            decoder_layers,
            decoder_norm,
            output,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.config.encoder.vocab_size
    }

    /// Encoder hidden states for the assembled input.
    pub fn memory(&self, g: &mut Graph, input: &GeneratorInput) -> Result<Var> {
        self.encoder.forward(g, &input.token_ids, None)
    }

    /// Next-token logits (`n × vocab`) for every position of `prefix`.
    pub fn decoder_logits(&self, g: &mut Graph, memory: Var, prefix: &[TokenId]) -> Result<Var> {
        if prefix.is_empty() {
            return Err(Error::Empty("decoder prefix"));
        }
        if prefix.len() > self.config.max_target_len {
            return Err(Error::Dimension {
                context: "decoder length (max_target_len)",
                expected: self.config.max_target_len,
                found: prefix.len(),
            });
        }
        if let Some(&bad) = prefix.iter().find(|&&t| t as usize >= self.vocab_size()) {
            return Err(Error::Dimension {
                context: "token id (vocab_size)",
                expected: self.vocab_size(),
                found: bad as usize,
            });
        }
        let ids: Vec<usize> = prefix.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..prefix.len()).collect();
        let table = g.param(self.encoder.token_embedding);
        let tok = g.gather(table, &ids);
        let pos_table = g.param(self.decoder_positions);
        let pos = g.gather(pos_table, &positions);
        let x = g.add(tok, pos);
        let mut h = self.decoder_emb_norm.forward(g, x);
        let dropout = self.config.encoder.dropout;
        h = g.dropout(h, dropout);
        let mask = causal_mask(prefix.len());
        for layer in &self.decoder_layers {
            h = layer.forward(g, h, memory, &mask, dropout);
        }
        let h = self.decoder_norm.forward(g, h);
        Ok(self.output.forward(g, h))
    }

    /// Teacher-forced mean next-token negative log-likelihood over the
    /// non-pad positions of `target` (which runs `[BOS] ... [EOS]`).
    pub fn ar_loss(&self, g: &mut Graph, input: &GeneratorInput, target: &[TokenId]) -> Result<Var> {
        check_target(target)?;
        let memory = self.memory(g, input)?;
        let logits = self.decoder_logits(g, memory, &target[..target.len() - 1])?;
        let labels: Vec<Option<usize>> = target[1..]
            .iter()
            .map(|&t| (t != PAD).then_some(t as usize))
            .collect();
        if labels.iter().all(Option::is_none) {
            return Err(Error::Empty("target (all padding)"));
        }
        Ok(g.cross_entropy(logits, &labels))
    }

    /// Mean of the per-sample losses.
    pub fn ar_loss_batch(&self, g: &mut Graph, batch: &[(&GeneratorInput, &[TokenId])]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut total: Option<Var> = None;
        for (input, target) in batch {
            let l = self.ar_loss(g, input, target)?;
            total = Some(match total {
                Some(t) => g.add(t, l),
                None => l,
            });
        }
        Ok(g.scale(total.expect("non-empty"), 1.0 / batch.len() as f64))
    }

    /// Eval-mode encoder states, reused across decoding steps.
    pub fn encode_memory(&self, input: &GeneratorInput) -> Result<Matrix> {
        let mut g = Graph::new(&self.params);
        let m = self.memory(&mut g, input)?;
        Ok(g.value(m).clone())
    }

    /// Log-probabilities of the token following `prefix`.
    pub fn next_log_probs(&self, memory: &Matrix, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let mem = g.constant(memory.clone());
        let logits = self.decoder_logits(&mut g, mem, prefix)?;
        let v = g.value(logits);
        Ok(log_softmax_row(v.row(v.nrows() - 1)))
    }

    /// Decodes up to `max_len` tokens (the `[EOS]` counts) after `[BOS]`.
    pub fn generate(&self, vocab: &Vocab, input: &GeneratorInput, method: DecodeMethod, max_len: usize) -> Result<GenerationResult> {
        if max_len < 1 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if max_len + 1 > self.config.max_target_len {
            return Err(Error::Config(format!(
                "max_len {max_len} exceeds the decoder's {} positions",
                self.config.max_target_len - 1
            )));
        }
        let memory = self.encode_memory(input)?;
        let (token_ids, token_log_probs) = match method {
            DecodeMethod::Greedy => self.greedy(&memory, max_len)?,
            DecodeMethod::Beam(width) => self.beam(&memory, max_len, width)?,
        };
        Ok(GenerationResult {
            text: vocab.decode(&token_ids),
            log_prob: token_log_probs.iter().sum(),
            token_ids,
            token_log_probs,
            method,
        })
    }

    fn greedy(&self, memory: &Matrix, max_len: usize) -> Result<(Vec<TokenId>, Vec<f64>)> {
        let mut prefix = vec![BOS];
        let mut lps = Vec::new();
        for _ in 0..max_len {
            let lp = self.next_log_probs(memory, &prefix)?;
            let mut best: Option<(TokenId, f64)> = None;
            for (id, &v) in lp.iter().enumerate() {
                let id = id as TokenId;
                if emittable(id) && best.is_none_or(|(_, b)| v > b) {
                    best = Some((id, v));
                }
            }
            let (id, v) = best.ok_or(Error::Empty("emittable vocabulary"))?;
            prefix.push(id);
            lps.push(v);
            if id == EOS {
                break;
            }
        }
        Ok((prefix[1..].to_vec(), lps))
    }

    fn beam(&self, memory: &Matrix, max_len: usize, width: usize) -> Result<(Vec<TokenId>, Vec<f64>)> {
        #[derive(Clone)]
        struct Hyp {
            tokens: Vec<TokenId>,
            lps: Vec<f64>,
            sum: f64,
        }
        impl Hyp {
            fn done(&self) -> bool {
                self.tokens.last() == Some(&EOS)
            }
            fn score(&self) -> f64 {
                if self.tokens.is_empty() {
                    0.0
                } else {
                    self.sum / self.tokens.len() as f64
                }
            }
        }
        let rank = |a: &Hyp, b: &Hyp| {
            b.score()
                .partial_cmp(&a.score())
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
        };

        let mut beams = vec![Hyp {
            tokens: Vec::new(),
            lps: Vec::new(),
            sum: 0.0,
        }];
        for _ in 0..max_len {
            if beams.iter().all(Hyp::done) {
                break;
            }
            let mut candidates = Vec::new();
            for h in &beams {
                if h.done() {
                    candidates.push(h.clone());
                    continue;
                }
                let mut prefix = vec![BOS];
                prefix.extend_from_slice(&h.tokens);
                let lp = self.next_log_probs(memory, &prefix)?;
                let mut options: Vec<(TokenId, f64)> = lp
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (i as TokenId, v))
                    .filter(|&(i, _)| emittable(i))
                    .collect();
                options.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
                for &(id, v) in options.iter().take(width) {
                    let mut next = h.clone();
                    next.tokens.push(id);
                    next.lps.push(v);
                    next.sum += v;
                    candidates.push(next);
                }
            }
            candidates.sort_by(rank);
            candidates.truncate(width);
            beams = candidates;
        }
        beams.sort_by(rank);
        let best = beams.into_iter().next().ok_or(Error::Empty("beam"))?;
        Ok((best.tokens, best.lps))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.params, &GeneratorManifest { config: self.config.clone() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest: GeneratorManifest = load_manifest(path)?;
        let mut model = Self::new(manifest.config, 0)?;
        load_params_into(path, &mut model.params)?;
        Ok(model)
    }
}

fn check_target(target: &[TokenId]) -> Result<()> {
    if target.len() < 2 {
        return Err(Error::Empty("target sequence"));
    }
    if target[0] != BOS || target[target.len() - 1] != EOS {
        return Err(Error::Config("target must start with [BOS] and end with [EOS]".into()));
    }
    Ok(())
}

/// Where the prompt's labels come from.
#[derive(Clone, Copy)]
pub enum LabelSource<'a> {
    Gold,
    /// Last-turn predictions; `scene` and `session` may be the same model.
    Predicted {
        scene: &'a UnderstandingModel,
        session: &'a UnderstandingModel,
        task: &'a MultiTaskConfig,
        window: usize,
    },
}

impl LabelSource<'_> {
    /// Labels of the episode's final utterance.
    pub fn last_turn(&self, vocab: &Vocab, episode: &DialogueEpisode) -> Result<(u8, u8)> {
        let last = episode
            .utterances
            .last()
            .ok_or(Error::Empty("episode"))?;
        match *self {
            LabelSource::Gold => Ok(last.labels()),
            LabelSource::Predicted {
                scene,
                session,
                task,
                window,
            } => {
                let ctx = &episode.utterances[..episode.utterances.len() - 1];
                let (s, t_same, _, _) = scene.predict_last_turn(vocab, ctx, &last.frame_feature, task, window)?;
                let t = if std::ptr::eq(scene, session) {
                    t_same
                } else {
                    session.predict_last_turn(vocab, ctx, &last.frame_feature, task, window)?.1
                };
                Ok(if task.repair && s == 1 && t == 0 { (1, 1) } else { (s, t) })
            }
        }
    }
}

/// One training or evaluation example: the final utterance of an episode is
/// the response, the turns before it are the context.
#[derive(Clone, Debug, PartialEq)]
pub struct GenSample {
    pub episode_id: String,
    pub input: GeneratorInput,
    pub target: Vec<TokenId>,
    pub reference: String,
    pub labels: (u8, u8),
}

#[derive(Clone, Copy)]
pub struct SampleBuilder<'a> {
    pub vocab: &'a Vocab,
    pub captioner: Option<&'a dyn Captioner>,
    pub flags: AblationFlags,
    pub context_turns: usize,
    pub max_tokens: usize,
    pub max_target_len: usize,
}

impl SampleBuilder<'_> {
    pub fn build(&self, episode: &DialogueEpisode, labels: (u8, u8)) -> Result<GenSample> {
        let n = episode.utterances.len();
        if n < 2 {
            return Err(Error::Config(format!(
                "episode {} needs a context turn before its response",
                episode.episode_id
            )));
        }
        let start = (n - 1).saturating_sub(self.context_turns.max(1));
        let context: Vec<String> = episode.utterances[start..n - 1].iter().map(|u| u.text.clone()).collect();
        let response = &episode.utterances[n - 1];

        let needs_captioner = self.flags.video_caption || self.flags.image_caption;
        let captioner = match (needs_captioner, self.captioner) {
            (true, None) => return Err(Error::Captioner("caption flags are on but no captioner is configured".into())),
            (_, c) => c,
        };
        let track = episode.frame_track();
        let video = match (self.flags.video_caption, captioner) {
            (true, Some(c)) => Some(c.caption_video(&track[start..])?),
            _ => None,
        };
        let image = match (self.flags.image_caption, captioner) {
            (true, Some(c)) => Some(c.caption_image(&track[n - 1])?),
            _ => None,
        };
        let prompt = if self.flags.label_prompt {
            Some(build_prompt(labels.0, labels.1)?)
        } else {
            None
        };
        let parts = InputParts {
            context: &context,
            video_caption: video.as_ref(),
            image_caption: image.as_ref(),
            prompt: prompt.as_ref(),
        };
        let input = assemble_input(self.vocab, &parts, self.flags, self.max_tokens)?;

        let mut words = self.vocab.encode(&response.text);
        words.truncate(self.max_target_len.saturating_sub(2));
        let mut target = Vec::with_capacity(words.len() + 2);
        target.push(BOS);
        target.extend(words);
        target.push(EOS);
        Ok(GenSample {
            episode_id: episode.episode_id.clone(),
            input,
            target,
            reference: response.text.clone(),
            labels,
        })
    }

    pub fn build_split(&self, corpus: &Corpus, split: Split, labels: LabelSource) -> Result<Vec<GenSample>> {
        corpus
            .split(split)
            .map(|ep| self.build(ep, labels.last_turn(corpus.vocab(), ep)?))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub model: GeneratorConfig,
    pub train: TrainConfig,
    pub context_turns: usize,
    /// Decoding budget, `[EOS]` included.
    pub max_len: usize,
    pub decode: DecodeMethod,
    pub flags: AblationFlags,
}

impl GenerateConfig {
    pub fn new(model: GeneratorConfig) -> Self {
        Self {
            model,
            train: TrainConfig::default(),
            context_turns: 3,
            max_len: 20,
            decode: DecodeMethod::Greedy,
            flags: AblationFlags::ALL_ON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.context_turns == 0 {
            return Err(Error::Config("context_turns must be positive".into()));
        }
        if self.max_len == 0 || self.max_len + 1 > self.model.max_target_len {
            return Err(Error::Config("max_len must lie in 1..max_target_len".into()));
        }
        Ok(())
    }

    pub fn builder<'a>(&self, vocab: &'a Vocab, captioner: Option<&'a dyn Captioner>) -> SampleBuilder<'a> {
        SampleBuilder {
            vocab,
            captioner,
            flags: self.flags,
            context_turns: self.context_turns,
            max_tokens: self.model.encoder.max_tokens,
            max_target_len: self.model.max_target_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_bleu1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedGenerator {
    pub model: GeneratorModel,
    pub history: Vec<GenEpochLog>,
    pub best_epoch: usize,
}

/// Decodes every sample and returns the response texts.
pub fn decode_samples(
    model: &GeneratorModel,
    vocab: &Vocab,
    samples: &[GenSample],
    method: DecodeMethod,
    max_len: usize,
) -> Result<Vec<GenerationResult>> {
    samples
        .iter()
        .map(|s| model.generate(vocab, &s.input, method, max_len))
        .collect()
}

/// Trains on gold-label prompts and keeps the epoch with the best dev BLEU-1
/// (earliest on ties). Dev prompts use `dev_labels`.
pub fn train_generator(
    corpus: &Corpus,
    config: &GenerateConfig,
    captioner: Option<&dyn Captioner>,
    dev_labels: LabelSource,
    seed: u64,
) -> Result<TrainedGenerator> {
    config.validate()?;
    if config.model.encoder.vocab_size != corpus.vocab().len() {
        return Err(Error::Config(format!(
            "generator vocab {} does not match corpus vocab {}",
            config.model.encoder.vocab_size,
            corpus.vocab().len()
        )));
    }
    let builder = config.builder(corpus.vocab(), captioner);
    let train = builder.build_split(corpus, Split::Train, LabelSource::Gold)?;
    let dev = builder.build_split(corpus, Split::Dev, dev_labels)?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Empty("train or dev split"));
    }
    let dev_refs = single_refs(&dev.iter().map(|s| s.reference.clone()).collect::<Vec<_>>());

    let mut model = GeneratorModel::new(config.model.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let steps_per_epoch = train.len().div_ceil(config.train.batch_size);
    let mut trainer = Trainer::new(&model.params, &config.train, steps_per_epoch);
    let mut history = Vec::with_capacity(config.train.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 0..config.train.epochs {
        let batches = shuffled_batches(train.len(), config.train.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        for (step, batch) in batches.iter().enumerate() {
            let graph_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let (loss, grads) = {
                let mut g = Graph::train(&model.params, graph_rng);
                let items: Vec<(&GeneratorInput, &[TokenId])> =
                    batch.iter().map(|&i| (&train[i].input, &train[i].target[..])).collect();
                let l = model.ar_loss_batch(&mut g, &items)?;
                (g.scalar(l), g.backward(l))
            };
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            loss_sum += loss;
            trainer.step(&mut model.params, grads);
        }
        let outputs = decode_samples(&model, corpus.vocab(), &dev, DecodeMethod::Greedy, config.max_len)?;
        let texts: Vec<String> = outputs.into_iter().map(|r| r.text).collect();
        let dev_bleu1 = bleu1(&texts, &dev_refs)?;
        let train_loss = loss_sum / batches.len().max(1) as f64;
        log::info!("generate epoch {epoch}: loss {train_loss:.5} dev BLEU-1 {:.3}", dev_bleu1 * 100.0);
        history.push(GenEpochLog {
            epoch,
            train_loss,
            dev_bleu1,
        });
        if best.as_ref().is_none_or(|(b, _, _)| dev_bleu1 > *b) {
            best = Some((dev_bleu1, epoch, model.params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    Ok(TrainedGenerator {
        model,
        history,
        best_epoch,
    })
}

/// One line of a responses file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseRecord {
    pub episode_id: String,
    pub response_text: String,
    pub decode_method: DecodeMethod,
    pub log_prob: f64,
}
