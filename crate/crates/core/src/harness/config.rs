//! Run configuration as a flat `section.key = value` text file.
//!
//! Every field has a default; a config file and `--set` overrides only name
//! the keys they change. Lists are comma-separated. The configuration hash is
//! taken over the sorted canonical `key=value` lines, so it does not depend
//! on the order keys were written in.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::corpus::GenConfig;
use crate::error::{Error, Result};
use crate::fusion::EncoderConfig;
use crate::generation::{DecodeMethod, GenerateConfig, GeneratorConfig};
use crate::optim::TrainConfig;
use crate::prompting::AblationFlags;
use crate::understanding::{ClassWeight, MultiTaskConfig, TaskMode, UnderstandConfig};

/// Environment variable that overrides `run.output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "MDUG_OUTPUT_ROOT";

/// Keys that name where results go rather than what they are; left out of
/// the configuration hash.
const UNHASHED_KEYS: [&str; 1] = ["run.output_dir"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    SingleTask,
    NoImage,
    NoVideo,
    NoPrompt,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::SingleTask,
        Variant::NoImage,
        Variant::NoVideo,
        Variant::NoPrompt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SingleTask => "single_task",
            Variant::NoImage => "no_image",
            Variant::NoVideo => "no_video",
            Variant::NoPrompt => "no_prompt",
        }
    }

    /// Generator input flags; `no_prompt` drops captions and prompt alike.
    pub fn flags(self) -> AblationFlags {
        match self {
            Variant::Full | Variant::SingleTask => AblationFlags::ALL_ON,
            Variant::NoImage => AblationFlags {
                image_caption: false,
                ..AblationFlags::ALL_ON
            },
            Variant::NoVideo => AblationFlags {
                video_caption: false,
                ..AblationFlags::ALL_ON
            },
            Variant::NoPrompt => AblationFlags::ALL_OFF,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSection {
    /// Existing corpus file; empty means generate from the fields below.
    pub path: String,
    pub seed: u64,
    #[serde(flatten)]
    pub generator: GenConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_tokens: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnderstandSection {
    pub mode: TaskMode,
    pub w_scene: f64,
    pub w_session: f64,
    pub threshold: f64,
    pub repair: bool,
    pub class_weight: ClassWeight,
    pub window: usize,
    pub mask_last_prob: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub decoder_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_tokens: usize,
    pub max_target_len: usize,
    pub dropout: f64,
    pub context_turns: usize,
    pub max_len: usize,
    pub decode: DecodeMethod,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSection {
    pub video_caption: bool,
    pub image_caption: bool,
    pub label_prompt: bool,
    pub variants: Vec<Variant>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub output_dir: String,
    pub captioner_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    pub encoder: EncoderSection,
    pub understand: UnderstandSection,
    pub generator: GeneratorSection,
    pub ablation: AblationSection,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let task = MultiTaskConfig::default();
        Self {
            corpus: CorpusSection {
                path: String::new(),
                seed: 7,
                generator: GenConfig::default(),
            },
            encoder: EncoderSection {
                d_model: 64,
                n_layers: 2,
                n_heads: 4,
                d_ff: 128,
                max_tokens: 512,
                dropout: 0.1,
            },
            understand: UnderstandSection {
                mode: task.mode,
                w_scene: task.w_scene,
                w_session: task.w_session,
                threshold: task.threshold,
                repair: task.repair,
                class_weight: task.class_weight,
                window: crate::understanding::DEFAULT_WINDOW,
                mask_last_prob: 0.25,
                epochs: train.epochs,
                batch_size: train.batch_size,
                lr: train.lr,
                warmup: train.warmup,
                weight_decay: train.weight_decay,
            },
            generator: GeneratorSection {
                d_model: 64,
                n_layers: 2,
                decoder_layers: 2,
                n_heads: 4,
                d_ff: 128,
                max_tokens: 512,
                max_target_len: 32,
                dropout: 0.1,
                context_turns: 3,
                max_len: 20,
                decode: DecodeMethod::Greedy,
                epochs: train.epochs,
                batch_size: train.batch_size,
                lr: train.lr,
                warmup: train.warmup,
                weight_decay: train.weight_decay,
            },
            ablation: AblationSection {
                video_caption: true,
                image_caption: true,
                label_prompt: true,
                variants: Variant::ALL.to_vec(),
            },
            run: RunSection {
                seeds: vec![1, 2, 3],
                output_dir: "runs".into(),
                captioner_seed: 0,
            },
        }
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, String>) {
    let scalar = |v: &Value| match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    };
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        Value::Array(items) => {
            out.insert(prefix.to_string(), items.iter().map(scalar).collect::<Vec<_>>().join(","));
        }
        other => {
            out.insert(prefix.to_string(), scalar(other));
        }
    }
}

fn parse_like(key: &str, template: &Value, raw: &str) -> Result<Value> {
    let bad = |what: &str| Error::Config(format!("{key}: expected {what}, got {raw:?}"));
    let raw = raw.trim();
    Ok(match template {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("true or false"))?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?),
        Value::Number(n) if n.is_i64() => Value::from(raw.parse::<i64>().map_err(|_| bad("an integer"))?),
        Value::Number(_) => {
            let v: f64 = raw.parse().map_err(|_| bad("a number"))?;
            if !v.is_finite() {
                return Err(bad("a finite number"));
            }
            Value::from(v)
        }
        Value::Array(items) => {
            let element = items.first().cloned().unwrap_or(Value::String(String::new()));
            if raw.is_empty() {
                Value::Array(Vec::new())
            } else {
                Value::Array(
                    raw.split(',')
                        .map(|part| parse_like(key, &element, part))
                        .collect::<Result<_>>()?,
                )
            }
        }
        _ => Value::String(raw.to_string()),
    })
}

fn set_path(root: &mut Value, key: &str, value: Value) {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .expect("section is an object")
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    node.as_object_mut()
        .expect("section is an object")
        .insert(parts[parts.len() - 1].to_string(), value);
}

fn get_path<'v>(root: &'v Value, key: &str) -> Option<&'v Value> {
    key.split('.').try_fold(root, |node, p| node.get(p))
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Record {
            line: i + 1,
            message: "expected key = value".into(),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Record {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Record {
                line: i + 1,
                message: format!("duplicate key {k}"),
            });
        }
    }
    Ok(out)
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    /// Canonical flat view: every key with its value.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// Defaults overlaid with `entries`; unknown keys are rejected.
    pub fn from_kv<'a>(entries: impl IntoIterator<Item = (&'a String, &'a String)>) -> Result<Self> {
        let defaults = serde_json::to_value(Self::default())?;
        let mut tree = defaults.clone();
        for (k, v) in entries {
            let template = get_path(&defaults, k)
                .filter(|t| !t.is_object())
                .ok_or_else(|| Error::Config(format!("unknown config key {k:?}")))?;
            set_path(&mut tree, k, parse_like(k, template, v)?);
        }
        let cfg: Self = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads an optional config file, applies overrides in order, then the
    /// output-root environment variable.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut kv = match path {
            Some(p) => parse_kv(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => BTreeMap::new(),
        };
        for (k, v) in overrides {
            kv.insert(k.clone(), v.clone());
        }
        if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
            if !root.is_empty() {
                kv.insert("run.output_dir".into(), root);
            }
        }
        Self::from_kv(&kv)
    }

    /// Canonical text form, one `key = value` per line in key order.
    pub fn to_text(&self) -> String {
        self.to_kv().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 over the sorted canonical lines (output location excluded).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_kv() {
            if UNHASHED_KEYS.contains(&k.as_str()) {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn run_id(&self) -> String {
        format!("run-{}", &self.hash()[..12])
    }

    pub fn validate(&self) -> Result<()> {
        if !self.corpus.path.is_empty() && !Path::new(&self.corpus.path).exists() {
            return Err(Error::Config(format!("corpus.path {} does not exist", self.corpus.path)));
        }
        if self.corpus.path.is_empty() {
            self.corpus.generator.validate()?;
        }
        if self.run.seeds.is_empty() {
            return Err(Error::Config("run.seeds must list at least one seed".into()));
        }
        if self.ablation.variants.is_empty() {
            return Err(Error::Config("ablation.variants must not be empty".into()));
        }
        self.understand_config().validate()?;
        self.encoder_config(2, 1).validate()?;
        self.generate_config(2).validate()
    }

    pub fn encoder_config(&self, vocab_size: usize, feature_dim: usize) -> EncoderConfig {
        let e = &self.encoder;
        EncoderConfig {
            vocab_size,
            d_model: e.d_model,
            feature_dim,
            n_layers: e.n_layers,
            n_heads: e.n_heads,
            d_ff: e.d_ff,
            max_tokens: e.max_tokens,
            dropout: e.dropout,
        }
    }

    pub fn task_config(&self) -> MultiTaskConfig {
        let u = &self.understand;
        MultiTaskConfig {
            mode: u.mode,
            w_scene: u.w_scene,
            w_session: u.w_session,
            threshold: u.threshold,
            repair: u.repair,
            class_weight: u.class_weight,
        }
    }

    /// Understanding settings; `mode` overrides the configured task mode and
    /// resets the loss weights to that mode's unit weights when they
    /// disagree with it.
    pub fn understand_config_for(&self, mode: TaskMode) -> UnderstandConfig {
        let u = &self.understand;
        let mut task = self.task_config();
        if mode != task.mode {
            let unit = MultiTaskConfig::for_mode(mode);
            task.mode = mode;
            task.w_scene = unit.w_scene;
            task.w_session = unit.w_session;
        }
        UnderstandConfig {
            task,
            train: TrainConfig {
                epochs: u.epochs,
                batch_size: u.batch_size,
                lr: u.lr,
                warmup: u.warmup,
                weight_decay: u.weight_decay,
            },
            window: u.window,
            mask_last_prob: u.mask_last_prob,
        }
    }

    pub fn understand_config(&self) -> UnderstandConfig {
        self.understand_config_for(self.understand.mode)
    }

    pub fn flags(&self) -> AblationFlags {
        AblationFlags {
            video_caption: self.ablation.video_caption,
            image_caption: self.ablation.image_caption,
            label_prompt: self.ablation.label_prompt,
        }
    }

    pub fn generate_config(&self, vocab_size: usize) -> GenerateConfig {
        let g = &self.generator;
        GenerateConfig {
            model: GeneratorConfig {
                encoder: EncoderConfig {
                    vocab_size,
                    d_model: g.d_model,
                    feature_dim: 1,
                    n_layers: g.n_layers,
                    n_heads: g.n_heads,
                    d_ff: g.d_ff,
                    max_tokens: g.max_tokens,
                    dropout: g.dropout,
                },
                decoder_layers: g.decoder_layers,
                max_target_len: g.max_target_len,
            },
            train: TrainConfig {
                epochs: g.epochs,
                batch_size: g.batch_size,
                lr: g.lr,
                warmup: g.warmup,
                weight_decay: g.weight_decay,
            },
            context_turns: g.context_turns,
            max_len: g.max_len,
            decode: g.decode,
            flags: self.flags(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_kv() {
        let cfg = RunConfig::default();
        let kv = cfg.to_kv();
        assert_eq!(kv["understand.lr"], "0.00001");
        assert_eq!(kv["run.seeds"], "1,2,3");
        assert_eq!(kv["corpus.scene_rate"], "0.0837");
        assert_eq!(RunConfig::from_kv(&kv).unwrap(), cfg);
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let mut kv = BTreeMap::new();
        kv.insert("understand.lr".to_string(), "0.002".to_string());
        kv.insert("run.seeds".to_string(), "4, 5".to_string());
        kv.insert("generator.decode".to_string(), "beam(3)".to_string());
        let cfg = RunConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.understand.lr, 0.002);
        assert_eq!(cfg.run.seeds, vec![4, 5]);
        assert_eq!(cfg.generator.decode, DecodeMethod::Beam(3));

        kv.insert("understand.nope".to_string(), "1".to_string());
        assert!(RunConfig::from_kv(&kv).is_err());
    }

    #[test]
    fn type_errors_name_the_key() {
        let mut kv = BTreeMap::new();
        kv.insert("understand.epochs".to_string(), "ten".to_string());
        let err = RunConfig::from_kv(&kv).unwrap_err().to_string();
        assert!(err.contains("understand.epochs"), "{err}");
    }

    #[test]
    fn hash_ignores_key_order_and_output_dir() {
        let a = parse_kv("understand.lr = 0.002\nrun.seeds = 1\n").unwrap();
        let b = parse_kv("# reordered\nrun.seeds=1\n\nunderstand.lr=2e-3\n").unwrap();
        let ca = RunConfig::from_kv(&a).unwrap();
        let mut cb = RunConfig::from_kv(&b).unwrap();
        assert_eq!(ca.hash(), cb.hash());
        cb.run.output_dir = "elsewhere".into();
        assert_eq!(ca.hash(), cb.hash());
        cb.understand.epochs = 3;
        assert_ne!(ca.hash(), cb.hash());
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        match parse_kv("a = 1\nnot a pair\n") {
            Err(Error::Record { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_kv("a = 1\na = 2\n").is_err());
    }

    #[test]
    fn mode_override_resets_weights() {
        let cfg = RunConfig::default();
        let u = cfg.understand_config_for(TaskMode::SceneOnly);
        assert_eq!((u.task.w_scene, u.task.w_session), (1.0, 0.0));
        assert!(u.validate().is_ok());
    }

    #[test]
    fn empty_seed_list_rejected() {
        let mut kv = BTreeMap::new();
        kv.insert("run.seeds".to_string(), String::new());
        assert!(RunConfig::from_kv(&kv).is_err());
    }
}
