//! Dialogue data model, JSONL persistence and the synthetic episode generator.
//!
//! Each episode is a run of utterances with time intervals, a per-utterance
//! visual feature vector and gold scene/session boundary labels. A label of 1
//! on utterance `i` means utterance `i` opens a new scene (or session). Every
//! scene boundary is also a session boundary; the pair `(scene=1, session=0)`
//! is rejected everywhere.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::captioning::CAPTION_WORDS;
use crate::error::{Error, Result};
use crate::prompting::PROMPT_WORDS;
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub text: String,
    pub t_start: f64,
    pub t_end: f64,
    pub frame_feature: Vec<f64>,
    pub scene_label: u8,
    pub session_label: u8,
    pub speaker_id: u8,
}

impl Utterance {
    pub fn labels(&self) -> (u8, u8) {
        (self.scene_label, self.session_label)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?} (expected train, dev or test)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueEpisode {
    pub episode_id: String,
    pub utterances: Vec<Utterance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_scene_ids: Option<Vec<u32>>,
    pub split: Split,
}

/// One visual frame on the video clock.
#[derive(Clone, Debug, PartialEq)]
pub struct TimedFrame {
    pub time: f64,
    pub feature: Vec<f64>,
}

impl DialogueEpisode {
    /// The episode's frame track: one frame per utterance, stamped at the
    /// midpoint of its interval.
    pub fn frame_track(&self) -> Vec<TimedFrame> {
        self.utterances
            .iter()
            .map(|u| TimedFrame {
                time: 0.5 * (u.t_start + u.t_end),
                feature: u.frame_feature.clone(),
            })
            .collect()
    }

    /// Checks every structural invariant. `feature_dim` is the corpus-wide k.
    pub fn validate(&self, feature_dim: usize) -> std::result::Result<(), String> {
        if self.utterances.is_empty() {
            return Err(format!("episode {} has no utterances", self.episode_id));
        }
        let mut prev_start = f64::NEG_INFINITY;
        for (i, u) in self.utterances.iter().enumerate() {
            if u.scene_label > 1 || u.session_label > 1 {
                return Err(format!("utterance {i}: labels must be 0 or 1"));
            }
            if u.scene_label == 1 && u.session_label == 0 {
                return Err(format!(
                    "utterance {i}: scene_label=1 with session_label=0 violates the co-occurrence rule \
                     (every scene boundary is also a session boundary)"
                ));
            }
            if u.frame_feature.len() != feature_dim {
                return Err(format!(
                    "utterance {i}: frame_feature has dimension {}, corpus dimension is {feature_dim}",
                    u.frame_feature.len()
                ));
            }
            if u.frame_feature.iter().any(|v| !v.is_finite()) {
                return Err(format!("utterance {i}: non-finite frame_feature entry"));
            }
            if !(u.t_start < u.t_end) {
                return Err(format!("utterance {i}: t_start must be before t_end"));
            }
            if u.t_start < prev_start {
                return Err(format!("utterance {i}: t_start decreases"));
            }
            prev_start = u.t_start;
        }
        if let Some(ids) = &self.latent_scene_ids {
            if ids.len() != self.utterances.len() {
                return Err("latent_scene_ids length differs from utterance count".into());
            }
            for i in 1..ids.len() {
                let changed = ids[i] != ids[i - 1];
                if changed != (self.utterances[i].scene_label == 1) {
                    return Err(format!("utterance {i}: latent scene ids disagree with scene_label"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub scene_positive_rate: f64,
    pub session_positive_rate: f64,
    pub vocab_size: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
}

impl CorpusStats {
    pub fn validate(&self) -> Result<()> {
        let in_range = |r: f64| r > 0.0 && r < 0.5;
        if !in_range(self.scene_positive_rate) || !in_range(self.session_positive_rate) {
            return Err(Error::Config("positive rates must lie in (0, 0.5)".into()));
        }
        if self.scene_positive_rate > self.session_positive_rate {
            return Err(Error::Config("scene rate exceeds session rate".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentScene {
    pub name: String,
    pub keywords: Vec<String>,
    pub mean: Vec<f64>,
}

/// Per-scene metadata produced by the generator and consumed by the stub
/// captioners.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneCatalog {
    pub scenes: Vec<LatentScene>,
}

impl SceneCatalog {
    /// Index of the scene whose mean is closest (Euclidean) to `feature`;
    /// ties resolve to the lower index.
    pub fn nearest(&self, feature: &[f64]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, s) in self.scenes.iter().enumerate() {
            let d: f64 = s.mean.iter().zip(feature).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn keywords(&self) -> impl Iterator<Item = &str> {
        self.scenes.iter().flat_map(|s| s.keywords.iter().map(String::as_str))
    }
}

/// Sidecar metadata persisted next to the JSONL corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub stats: CorpusStats,
    pub feature_dim: usize,
    pub vocab: Vocab,
    pub scenes: SceneCatalog,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GenConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub meta: CorpusMeta,
    pub episodes: Vec<DialogueEpisode>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &DialogueEpisode> {
        self.episodes.iter().filter(move |e| e.split == split)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.meta.vocab
    }

    pub fn feature_dim(&self) -> usize {
        self.meta.feature_dim
    }

    pub fn n_utterances(&self, split: Split) -> usize {
        self.split(split).map(|e| e.utterances.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub scene_rate: f64,
    pub session_rate: f64,
    pub feature_dim: usize,
    pub n_scenes: usize,
    pub n_topics: usize,
    pub words_per_topic: usize,
    pub feature_noise: f64,
    /// Probability that a reference response names its scene keyword.
    pub leak: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_train: 600,
            n_dev: 100,
            n_test: 400,
            min_len: 8,
            max_len: 20,
            scene_rate: 0.0837,
            session_rate: 0.1263,
            feature_dim: 16,
            n_scenes: 12,
            n_topics: 24,
            words_per_topic: 6,
            feature_noise: 0.5,
            leak: 0.8,
        }
    }
}

const SCENES: [(&str, &str, &str); 16] = [
    ("kitchen", "stove", "coffee"),
    ("street", "traffic", "sidewalk"),
    ("office", "desk", "meeting"),
    ("bar", "drinks", "bartender"),
    ("park", "bench", "trees"),
    ("hospital", "doctor", "nurse"),
    ("car", "driving", "road"),
    ("bedroom", "bed", "pillow"),
    ("restaurant", "menu", "waiter"),
    ("classroom", "teacher", "homework"),
    ("beach", "sand", "waves"),
    ("church", "priest", "wedding"),
    ("store", "shelves", "cashier"),
    ("apartment", "couch", "neighbor"),
    ("station", "train", "platform"),
    ("garden", "flowers", "fence"),
];

const FUNCTION_WORDS: [&str; 24] = [
    "i", "you", "we", "it", "that", "this", "was", "a", "to", "and", "of", "just", "really", "think", "know",
    "what", "do", "yeah", "well", "okay", "right", "me", "my", "your",
];

const SESSION_MARKERS: [&str; 3] = ["anyway", "listen", "hey"];

const SYLLABLES: [&str; 12] = ["ba", "ko", "ri", "mu", "te", "lo", "sa", "vi", "ne", "du", "pa", "gi"];

pub const LEAK_PREFIX: &str = "in the";

fn topic_word(i: usize) -> String {
    let n = SYLLABLES.len();
    let mut w = format!("{}{}", SYLLABLES[i % n], SYLLABLES[(i / n) % n]);
    if i >= n * n {
        w.push_str(SYLLABLES[(i / (n * n)) % n]);
    }
    w
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let in_range = |r: f64| r > 0.0 && r < 0.5;
        if !in_range(self.scene_rate) || !in_range(self.session_rate) {
            return Err(Error::Config(format!(
                "positive rates must lie in (0, 0.5), got scene {} / session {}",
                self.scene_rate, self.session_rate
            )));
        }
        if self.scene_rate > self.session_rate {
            return Err(Error::Config(format!(
                "scene rate {} exceeds session rate {}; every scene boundary is a session boundary",
                self.scene_rate, self.session_rate
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature dimension k must be positive".into()));
        }
        if !(2..=SCENES.len()).contains(&self.n_scenes) {
            return Err(Error::Config(format!("n_scenes must be in 2..={}", SCENES.len())));
        }
        if self.n_topics < 2 || self.words_per_topic == 0 {
            return Err(Error::Config("need at least two topics with one word each".into()));
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return Err(Error::Config("episode lengths need 2 <= min_len <= max_len".into()));
        }
        if !(0.0..=1.0).contains(&self.leak) {
            return Err(Error::Config("leak strength must lie in [0, 1]".into()));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(Error::Config("feature noise must be finite and non-negative".into()));
        }
        if self.n_train == 0 {
            return Err(Error::Config("train split must be non-empty".into()));
        }
        Ok(())
    }

    fn topic_words(&self, topic: usize) -> impl Iterator<Item = String> + '_ {
        (0..self.words_per_topic).map(move |j| topic_word(topic * self.words_per_topic + j))
    }

    /// Closed vocabulary: prompt and caption words, scene keywords, function
    /// words, session markers, topic words.
    pub fn vocab(&self) -> Vocab {
        let mut words: Vec<String> = PROMPT_WORDS.iter().map(|s| s.to_string()).collect();
        words.extend(CAPTION_WORDS.iter().map(|s| s.to_string()));
        words.extend(LEAK_PREFIX.split(' ').map(str::to_string));
        for (name, a, b) in SCENES.iter().take(self.n_scenes) {
            words.extend([name.to_string(), a.to_string(), b.to_string()]);
        }
        words.extend(FUNCTION_WORDS.iter().map(|s| s.to_string()));
        words.extend(SESSION_MARKERS.iter().map(|s| s.to_string()));
        for t in 0..self.n_topics {
            words.extend(self.topic_words(t));
        }
        Vocab::new(words)
    }
}

/// Generates train/dev/test episodes. Pure in `(config, seed)`.
///
/// Positive labels are allocated exactly: each split receives
/// `round(rate · N)` scene and session boundaries over its `N` utterances.
pub fn generate_corpus(config: &GenConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let scenes: Vec<LatentScene> = SCENES
        .iter()
        .take(config.n_scenes)
        .map(|(name, a, b)| LatentScene {
            name: name.to_string(),
            keywords: vec![name.to_string(), a.to_string(), b.to_string()],
            mean: (0..config.feature_dim).map(|_| unit.sample(&mut rng)).collect(),
        })
        .collect();
    let catalog = SceneCatalog { scenes };
    let vocab = config.vocab();

    let mut episodes = Vec::new();
    for (split, count) in [
        (Split::Train, config.n_train),
        (Split::Dev, config.n_dev),
        (Split::Test, config.n_test),
    ] {
        episodes.extend(generate_split(config, &catalog, split, count, &mut rng));
    }

    let total: usize = episodes.iter().map(|e| e.utterances.len()).sum();
    let scene_pos: usize = episodes
        .iter()
        .flat_map(|e| &e.utterances)
        .filter(|u| u.scene_label == 1)
        .count();
    let session_pos: usize = episodes
        .iter()
        .flat_map(|e| &e.utterances)
        .filter(|u| u.session_label == 1)
        .count();
    let stats = CorpusStats {
        scene_positive_rate: scene_pos as f64 / total as f64,
        session_positive_rate: session_pos as f64 / total as f64,
        vocab_size: vocab.len(),
        n_train: config.n_train,
        n_dev: config.n_dev,
        n_test: config.n_test,
    };
    Ok(Corpus {
        meta: CorpusMeta {
            stats,
            feature_dim: config.feature_dim,
            vocab,
            scenes: catalog,
            generator: Some(config.clone()),
            seed: Some(seed),
        },
        episodes,
    })
}

fn pick_other(rng: &mut ChaCha8Rng, n: usize, current: usize) -> usize {
    let r = rng.random_range(0..n - 1);
    if r >= current {
        r + 1
    } else {
        r
    }
}

fn generate_split(
    config: &GenConfig,
    catalog: &SceneCatalog,
    split: Split,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<DialogueEpisode> {
    if count == 0 {
        return Vec::new();
    }
    let lengths: Vec<usize> = (0..count)
        .map(|_| rng.random_range(config.min_len..=config.max_len))
        .collect();
    let total: usize = lengths.iter().sum();
    let n_scene = (config.scene_rate * total as f64).round() as usize;
    let n_session = ((config.session_rate * total as f64).round() as usize).max(n_scene);

    let mut scene_flags = vec![false; total];
    let mut session_flags = vec![false; total];
    for i in sample(rng, total, n_scene).into_iter() {
        scene_flags[i] = true;
        session_flags[i] = true;
    }
    let rest: Vec<usize> = (0..total).filter(|&i| !scene_flags[i]).collect();
    for j in sample(rng, rest.len(), n_session - n_scene).into_iter() {
        session_flags[rest[j]] = true;
    }

    let noise = Normal::new(0.0, config.feature_noise.max(f64::MIN_POSITIVE)).expect("noise std");
    let mut offset = 0;
    let mut episodes = Vec::with_capacity(count);
    for (e, &len) in lengths.iter().enumerate() {
        let mut scene = rng.random_range(0..config.n_scenes);
        let mut topic = rng.random_range(0..config.n_topics);
        let mut speaker: u8 = rng.random_range(0..2);
        let mut cursor = rng.random_range(0.0..5.0);
        let mut utterances = Vec::with_capacity(len);
        let mut latent = Vec::with_capacity(len);
        for i in 0..len {
            let scene_label = scene_flags[offset + i];
            let session_label = session_flags[offset + i];
            if scene_label {
                scene = pick_other(rng, config.n_scenes, scene);
            }
            if session_label {
                topic = pick_other(rng, config.n_topics, topic);
                speaker = rng.random_range(0..4);
            } else if i > 0 {
                speaker = if speaker == 0 { 1 } else { 0 };
            }

            let n_words = rng.random_range(4..=8);
            let mut words: Vec<String> = Vec::with_capacity(n_words + 3);
            let marker_p = if session_label { 0.6 } else { 0.03 };
            if rng.random::<f64>() < marker_p {
                words.push(SESSION_MARKERS[rng.random_range(0..SESSION_MARKERS.len())].to_string());
            }
            for _ in 0..n_words {
                if rng.random::<f64>() < 0.55 {
                    let j = rng.random_range(0..config.words_per_topic);
                    words.push(topic_word(topic * config.words_per_topic + j));
                } else {
                    words.push(FUNCTION_WORDS[rng.random_range(0..FUNCTION_WORDS.len())].to_string());
                }
            }
            // The closing utterance is the reference response.
            if i + 1 == len && rng.random::<f64>() < config.leak {
                words.push(LEAK_PREFIX.to_string());
                words.push(catalog.scenes[scene].name.clone());
            }

            let duration: f64 = rng.random_range(1.0..4.0);
            let gap: f64 = rng.random_range(0.0..0.8);
            let t_start = round3(cursor);
            let t_end = round3(cursor + duration);
            cursor = t_end + gap;

            let frame_feature = catalog.scenes[scene]
                .mean
                .iter()
                .map(|m| m + if config.feature_noise > 0.0 { noise.sample(rng) } else { 0.0 })
                .collect();

            utterances.push(Utterance {
                text: words.join(" "),
                t_start,
                t_end,
                frame_feature,
                scene_label: scene_label as u8,
                session_label: session_label as u8,
                speaker_id: speaker,
            });
            latent.push(scene as u32);
        }
        offset += len;
        episodes.push(DialogueEpisode {
            episode_id: format!("{}-{e:05}", split.as_str()),
            utterances,
            latent_scene_ids: Some(latent),
            split,
        });
    }
    episodes
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// Path of the stats/metadata sidecar for a corpus file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("stats.json")
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for ep in &corpus.episodes {
        serde_json::to_writer(&mut out, ep)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&corpus.meta)?;
    std::fs::write(&side, json + "\n").map_err(|e| Error::io(side, e))?;
    Ok(())
}

// Labels are read as wide integers first so out-of-range values get a
// dedicated message instead of a generic type error.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUtterance {
    text: String,
    t_start: f64,
    t_end: f64,
    frame_feature: Vec<f64>,
    scene_label: i64,
    session_label: i64,
    speaker_id: u8,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEpisode {
    episode_id: String,
    utterances: Vec<RawUtterance>,
    #[serde(default)]
    latent_scene_ids: Option<Vec<u32>>,
    split: Split,
}

fn label(v: i64, line: usize, i: usize, which: &str) -> Result<u8> {
    match v {
        0 | 1 => Ok(v as u8),
        _ => Err(Error::Record {
            line,
            message: format!("utterance {i}: {which} must be 0 or 1, got {v}"),
        }),
    }
}

/// Loads a JSONL corpus; the sidecar is used when present, otherwise the
/// metadata is reconstructed from the records.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let side = sidecar_path(path);
    let meta: Option<CorpusMeta> = if side.exists() {
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: CorpusMeta = serde_json::from_str(&text)?;
        meta.stats.validate()?;
        Some(meta)
    } else {
        None
    };

    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut feature_dim = meta.as_ref().map(|m| m.feature_dim);
    let mut episodes = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawEpisode = serde_json::from_str(&line).map_err(|e| Error::Record {
            line: lineno,
            message: e.to_string(),
        })?;
        let mut utterances = Vec::with_capacity(raw.utterances.len());
        for (i, u) in raw.utterances.into_iter().enumerate() {
            utterances.push(Utterance {
                scene_label: label(u.scene_label, lineno, i, "scene_label")?,
                session_label: label(u.session_label, lineno, i, "session_label")?,
                text: u.text,
                t_start: u.t_start,
                t_end: u.t_end,
                frame_feature: u.frame_feature,
                speaker_id: u.speaker_id,
            });
        }
        let ep = DialogueEpisode {
            episode_id: raw.episode_id,
            utterances,
            latent_scene_ids: raw.latent_scene_ids,
            split: raw.split,
        };
        let k = *feature_dim.get_or_insert_with(|| ep.utterances.first().map_or(0, |u| u.frame_feature.len()));
        ep.validate(k).map_err(|message| Error::Record { line: lineno, message })?;
        episodes.push(ep);
    }
    if episodes.is_empty() {
        return Err(Error::Empty("corpus file has no episodes"));
    }

    let meta = match meta {
        Some(m) => m,
        None => reconstruct_meta(&episodes, feature_dim.unwrap_or(0)),
    };
    Ok(Corpus { meta, episodes })
}

fn reconstruct_meta(episodes: &[DialogueEpisode], feature_dim: usize) -> CorpusMeta {
    let mut words: Vec<String> = PROMPT_WORDS.iter().map(|s| s.to_string()).collect();
    words.extend(CAPTION_WORDS.iter().map(|s| s.to_string()));
    let mut counts: BTreeMap<Split, usize> = BTreeMap::new();
    let (mut total, mut scene, mut session) = (0usize, 0usize, 0usize);
    for ep in episodes {
        *counts.entry(ep.split).or_default() += 1;
        for u in &ep.utterances {
            words.extend(crate::vocab::tokenize(&u.text));
            total += 1;
            scene += u.scene_label as usize;
            session += u.session_label as usize;
        }
    }
    let vocab = Vocab::new(words);
    CorpusMeta {
        stats: CorpusStats {
            scene_positive_rate: scene as f64 / total.max(1) as f64,
            session_positive_rate: session as f64 / total.max(1) as f64,
            vocab_size: vocab.len(),
            n_train: counts.get(&Split::Train).copied().unwrap_or(0),
            n_dev: counts.get(&Split::Dev).copied().unwrap_or(0),
            n_test: counts.get(&Split::Test).copied().unwrap_or(0),
        },
        feature_dim,
        vocab,
        scenes: SceneCatalog::default(),
        generator: None,
        seed: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            n_train: 20,
            n_dev: 5,
            n_test: 5,
            ..GenConfig::default()
        }
    }

    #[test]
    fn rejects_invalid_rates() {
        let bad = GenConfig {
            scene_rate: 0.6,
            ..small()
        };
        assert!(matches!(generate_corpus(&bad, 1), Err(Error::Config(_))));
        let inverted = GenConfig {
            scene_rate: 0.2,
            session_rate: 0.1,
            ..small()
        };
        assert!(matches!(generate_corpus(&inverted, 1), Err(Error::Config(_))));
        let zero_k = GenConfig {
            feature_dim: 0,
            ..small()
        };
        assert!(matches!(generate_corpus(&zero_k, 1), Err(Error::Config(_))));
    }

    #[test]
    fn generated_episodes_validate() {
        let c = generate_corpus(&small(), 3).unwrap();
        for ep in &c.episodes {
            ep.validate(c.feature_dim()).unwrap();
        }
        assert_eq!(c.split(Split::Dev).count(), 5);
    }

    #[test]
    fn zero_leak_responses_carry_no_scene_keywords() {
        let cfg = GenConfig { leak: 0.0, ..small() };
        let c = generate_corpus(&cfg, 9).unwrap();
        let keywords: Vec<&str> = c.meta.scenes.keywords().collect();
        for ep in &c.episodes {
            let last = ep.utterances.last().unwrap();
            for w in crate::vocab::tokenize(&last.text) {
                assert!(!keywords.contains(&w.as_str()), "{w} leaked");
            }
        }
    }

    #[test]
    fn every_generated_word_is_in_vocabulary() {
        let c = generate_corpus(&small(), 4).unwrap();
        for ep in &c.episodes {
            for u in &ep.utterances {
                for w in crate::vocab::tokenize(&u.text) {
                    assert!(c.vocab().contains(&w), "{w} missing");
                }
            }
        }
    }

    #[test]
    fn nearest_scene_prefers_lower_index_on_ties() {
        let cat = SceneCatalog {
            scenes: vec![
                LatentScene { name: "a".into(), keywords: vec![], mean: vec![1.0] },
                LatentScene { name: "b".into(), keywords: vec![], mean: vec![-1.0] },
            ],
        };
        assert_eq!(cat.nearest(&[0.0]), Some(0));
        assert_eq!(cat.nearest(&[-0.7]), Some(1));
    }

    #[test]
    fn topic_words_are_distinct() {
        let words: std::collections::HashSet<String> = (0..300).map(topic_word).collect();
        assert_eq!(words.len(), 300);
    }
}
