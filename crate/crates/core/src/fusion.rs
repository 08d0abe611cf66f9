//! Timeline-aligned multimodal encoder.
//!
//! Each utterance's interval is matched against the frame track and the
//! pooled frame vector is projected into the model dimension and added to the
//! token and position embeddings of that utterance's tokens. A small pre-norm
//! transformer then produces hidden states; the hidden state at each
//! utterance's `[SEP]` is its separator vector.

use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, ParamId, ParamStore, Var};
use crate::corpus::{TimedFrame, Utterance};
use crate::error::{Error, Result};
use crate::nn::{normal_matrix, sinusoid_table, EncoderLayer, LayerNorm, Linear};
use crate::vocab::{TokenId, Vocab, CLS, SEP, UNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    /// Frame feature dimension k.
    pub feature_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_tokens: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn tiny(vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            feature_dim,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_tokens: 512,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_tokens < 2 || self.d_ff == 0 {
            return Err(Error::Config("vocab_size, d_ff must be positive and max_tokens >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Result of matching one utterance interval against a frame track.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub feature: Vec<f64>,
    /// No frame fell inside the interval; the nearest frame was used.
    pub clamped: bool,
}

/// Mean of the frames stamped inside `[t_start, t_end]`; when none are, the
/// single nearest frame (earliest on ties).
pub fn align_frames(utterance: &Utterance, track: &[TimedFrame]) -> Result<Alignment> {
    align_interval(utterance.t_start, utterance.t_end, track)
}

pub fn align_interval(t_start: f64, t_end: f64, track: &[TimedFrame]) -> Result<Alignment> {
    let first = track.first().ok_or(Error::Empty("frame track"))?;
    let k = first.feature.len();
    let mut sum = vec![0.0; k];
    let mut count = 0usize;
    for f in track {
        if f.feature.len() != k {
            return Err(Error::Dimension {
                context: "frame track",
                expected: k,
                found: f.feature.len(),
            });
        }
        if f.time >= t_start && f.time <= t_end {
            for (s, v) in sum.iter_mut().zip(&f.feature) {
                *s += v;
            }
            count += 1;
        }
    }
    if count > 0 {
        let n = count as f64;
        return Ok(Alignment {
            feature: sum.into_iter().map(|s| s / n).collect(),
            clamped: false,
        });
    }
    let distance = |t: f64| if t < t_start { t_start - t } else { t - t_end };
    let mut best = first;
    for f in &track[1..] {
        if distance(f.time) < distance(best.time) {
            best = f;
        }
    }
    log::warn!(
        "no frame inside [{t_start}, {t_end}]; clamped to the frame at t={}",
        best.time
    );
    Ok(Alignment {
        feature: best.feature.clone(),
        clamped: true,
    })
}

/// Token sequence for one dialogue window, ready for the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowInput {
    pub tokens: Vec<TokenId>,
    /// Per-token frame feature, `n_tokens × k`; zero rows on `[CLS]`/`[SEP]`.
    pub features: Matrix,
    pub sep_positions: Vec<usize>,
    pub token_to_utterance: Vec<Option<usize>>,
    /// Number of leading utterances dropped to fit `max_tokens`.
    pub dropped: usize,
}

/// One utterance as the encoder sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowUtterance {
    pub tokens: Vec<TokenId>,
    pub feature: Vec<f64>,
}

impl WindowUtterance {
    /// Text hidden behind a single `[UNK]`; used for a turn whose words are
    /// not yet known.
    pub fn masked(feature: Vec<f64>) -> Self {
        Self { tokens: vec![UNK], feature }
    }
}

/// `[CLS] u0 [SEP] u1 [SEP] ...`, dropping the oldest utterances until the
/// sequence fits in `max_tokens`.
pub fn assemble_window(utterances: &[WindowUtterance], feature_dim: usize, max_tokens: usize) -> Result<WindowInput> {
    if utterances.is_empty() {
        return Err(Error::Empty("dialogue window"));
    }
    for u in utterances {
        if u.feature.len() != feature_dim {
            return Err(Error::Dimension {
                context: "window utterance feature",
                expected: feature_dim,
                found: u.feature.len(),
            });
        }
    }
    let mut dropped = 0;
    let cost = |us: &[WindowUtterance]| 1 + us.iter().map(|u| u.tokens.len() + 1).sum::<usize>();
    while utterances.len() - dropped > 1 && cost(&utterances[dropped..]) > max_tokens {
        dropped += 1;
    }
    let kept = &utterances[dropped..];
    let budget = max_tokens.saturating_sub(2).max(1);

    let mut tokens = vec![CLS];
    let mut owner = vec![None];
    let mut rows: Vec<Option<&[f64]>> = vec![None];
    let mut sep_positions = Vec::with_capacity(kept.len());
    for (i, u) in kept.iter().enumerate() {
        // Only a lone oversize utterance is cut; keep its newest tokens.
        let text = if u.tokens.len() > budget {
            &u.tokens[u.tokens.len() - budget..]
        } else {
            &u.tokens[..]
        };
        for &t in text {
            tokens.push(t);
            owner.push(Some(i));
            rows.push(Some(&u.feature));
        }
        sep_positions.push(tokens.len());
        tokens.push(SEP);
        owner.push(None);
        rows.push(None);
    }
    let mut features = Matrix::zeros((tokens.len(), feature_dim));
    for (r, row) in rows.iter().enumerate() {
        if let Some(f) = row {
            for (c, v) in f.iter().enumerate() {
                features[[r, c]] = *v;
            }
        }
    }
    Ok(WindowInput {
        tokens,
        features,
        sep_positions,
        token_to_utterance: owner,
        dropped,
    })
}

/// Hidden states for an encoded window.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDialogue {
    pub hidden_states: Matrix,
    pub sep_vectors: Matrix,
    pub token_to_utterance: Vec<Option<usize>>,
    pub dropped: usize,
}

/// Token + position embeddings, an optional frame projection, and a stack of
/// encoder layers.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub projection: Option<Linear>,
    emb_norm: LayerNorm,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
}

impl Encoder {
    /// `fused = false` builds a text-only encoder (no frame projection).
    pub fn new(store: &mut ParamStore, prefix: &str, config: EncoderConfig, fused: bool, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let token_embedding = store.add(format!("{prefix}.tok_emb"), normal_matrix(rng, config.vocab_size, d, 0.1));
        let position_embedding = store.add(format!("{prefix}.pos_emb"), sinusoid_table(config.max_tokens, d));
        let projection = if fused {
            Some(Linear::new(store, &format!("{prefix}.frame_proj"), config.feature_dim, d, rng))
        } else {
            None
        };
        let emb_norm = LayerNorm::new(store, &format!("{prefix}.emb_norm"), d);
        let layers = (0..config.n_layers)
            .map(|i| EncoderLayer::new(store, &format!("{prefix}.layer{i}"), d, config.n_heads, config.d_ff, rng))
            .collect();
        let final_norm = LayerNorm::new(store, &format!("{prefix}.final_norm"), d);
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            projection,
            emb_norm,
            layers,
            final_norm,
        })
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if tokens.len() > self.config.max_tokens {
            return Err(Error::Dimension {
                context: "sequence length (max_tokens)",
                expected: self.config.max_tokens,
                found: tokens.len(),
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Dimension {
                context: "token id (vocab_size)",
                expected: self.config.vocab_size,
                found: bad as usize,
            });
        }
        Ok(())
    }

    /// `embedding(token) + positional(pos) [+ W_proj · feature + b]`.
    ///
    /// With `features = None` (or a text-only encoder) the visual term is
    /// omitted entirely.
    pub fn embed_fused(&self, g: &mut Graph, tokens: &[TokenId], features: Option<&Matrix>) -> Result<Var> {
        self.check_tokens(tokens)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let table = g.param(self.token_embedding);
        let tok = g.gather(table, &ids);
        let pos_table = g.param(self.position_embedding);
        let pos = g.gather(pos_table, &positions);
        let x = g.add(tok, pos);
        match (features, &self.projection) {
            (Some(f), Some(proj)) => {
                if f.nrows() != tokens.len() {
                    return Err(Error::Dimension {
                        context: "per-token features (rows)",
                        expected: tokens.len(),
                        found: f.nrows(),
                    });
                }
                if f.ncols() != self.config.feature_dim {
                    return Err(Error::Dimension {
                        context: "per-token features (k)",
                        expected: self.config.feature_dim,
                        found: f.ncols(),
                    });
                }
                let fv = g.constant(f.clone());
                let visual = proj.forward(g, fv);
                Ok(g.add(x, visual))
            }
            _ => Ok(x),
        }
    }

    /// Full encoder stack; returns the `n_tokens × d_model` hidden states.
    pub fn forward(&self, g: &mut Graph, tokens: &[TokenId], features: Option<&Matrix>) -> Result<Var> {
        let x = self.embed_fused(g, tokens, features)?;
        let mut h = self.emb_norm.forward(g, x);
        h = g.dropout(h, self.config.dropout);
        for layer in &self.layers {
            h = layer.forward(g, h, self.config.dropout);
        }
        Ok(self.final_norm.forward(g, h))
    }

    /// Eval-mode encoding of an assembled window.
    pub fn encode(&self, params: &ParamStore, input: &WindowInput) -> Result<EncodedDialogue> {
        let mut g = Graph::new(params);
        let h = self.forward(&mut g, &input.tokens, Some(&input.features))?;
        let hidden = g.value(h).clone();
        let sep_vectors = hidden.select(Axis(0), &input.sep_positions);
        Ok(EncodedDialogue {
            hidden_states: hidden,
            sep_vectors,
            token_to_utterance: input.token_to_utterance.clone(),
            dropped: input.dropped,
        })
    }

    /// Aligns each utterance against `track`, assembles and encodes the window.
    pub fn encode_window(
        &self,
        params: &ParamStore,
        vocab: &Vocab,
        utterances: &[Utterance],
        track: &[TimedFrame],
    ) -> Result<EncodedDialogue> {
        let window = window_from_utterances(vocab, utterances, track)?;
        let input = assemble_window(&window, self.config.feature_dim, self.config.max_tokens)?;
        self.encode(params, &input)
    }
}

pub fn window_from_utterances(vocab: &Vocab, utterances: &[Utterance], track: &[TimedFrame]) -> Result<Vec<WindowUtterance>> {
    utterances
        .iter()
        .map(|u| {
            Ok(WindowUtterance {
                tokens: vocab.encode(&u.text),
                feature: align_frames(u, track)?.feature,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frame(time: f64, v: &[f64]) -> TimedFrame {
        TimedFrame { time, feature: v.to_vec() }
    }

    fn utt(t0: f64, t1: f64) -> Utterance {
        Utterance {
            text: "a".into(),
            t_start: t0,
            t_end: t1,
            frame_feature: vec![0.0; 2],
            scene_label: 0,
            session_label: 0,
            speaker_id: 0,
        }
    }

    #[test]
    fn single_frame_interval_returns_that_frame() {
        let track: Vec<_> = (0..10).map(|i| frame(i as f64, &[i as f64, -(i as f64)])).collect();
        let a = align_frames(&utt(6.5, 7.5), &track).unwrap();
        assert_eq!(a.feature, vec![7.0, -7.0]);
        assert!(!a.clamped);
    }

    #[test]
    fn two_frame_interval_is_mean() {
        let track = vec![frame(0.0, &[1.0, 3.0]), frame(1.0, &[3.0, 5.0]), frame(9.0, &[100.0, 100.0])];
        let a = align_frames(&utt(-0.5, 1.5), &track).unwrap();
        assert_eq!(a.feature, vec![2.0, 4.0]);
    }

    #[test]
    fn empty_track_is_an_error() {
        assert!(matches!(align_frames(&utt(0.0, 1.0), &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn truncation_drops_oldest_utterances() {
        let us: Vec<WindowUtterance> = (0..5)
            .map(|i| WindowUtterance {
                tokens: vec![10 + i; 4],
                feature: vec![i as f64],
            })
            .collect();
        // Each utterance costs 5 tokens; CLS + 2 utterances = 11.
        let w = assemble_window(&us, 1, 11).unwrap();
        assert_eq!(w.dropped, 3);
        assert_eq!(w.tokens.len(), 11);
        assert_eq!(w.tokens[1], 13);
        assert_eq!(w.sep_positions, vec![5, 10]);
        assert_eq!(w.features[[1, 0]], 3.0);
        assert_eq!(w.features[[5, 0]], 0.0);
    }

    #[test]
    fn embed_rejects_feature_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 8,
            n_layers: 1,
            max_tokens: 16,
            ..EncoderConfig::tiny(10, 3)
        };
        let enc = Encoder::new(&mut store, "e", cfg, true, &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let bad = Matrix::zeros((2, 4));
        assert!(matches!(enc.embed_fused(&mut g, &[0, 1], Some(&bad)), Err(Error::Dimension { .. })));
    }
}
