//! Boundary and text-generation scoring plus seeded random baselines.

mod boundary;
mod text;

pub use boundary::{boundary_score, harmonic_f1, BoundaryScore};
pub use text::{
    bleu1, cider, gen_score, meteor_lite, meteor_lite_pair, rouge_l, rouge_l_pair, single_refs, stem, GenScore,
    CIDER_MAX_N, ROUGE_BETA,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{DialogueEpisode, Utterance};
use crate::error::Result;
use crate::vocab::{Vocab, SPECIAL_TOKENS};

/// Gold scene and session labels of every utterance, in episode order.
pub fn gold_labels<'a>(episodes: impl IntoIterator<Item = &'a DialogueEpisode>) -> (Vec<u8>, Vec<u8>) {
    episodes
        .into_iter()
        .flat_map(|e| e.utterances.iter().map(Utterance::labels))
        .unzip()
}

/// Scores of the seeded coin-flip boundary predictor on both tracks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RandomBoundary {
    pub scene: BoundaryScore,
    pub session: BoundaryScore,
}

pub fn random_boundary<'a>(episodes: impl IntoIterator<Item = &'a DialogueEpisode>, seed: u64) -> Result<RandomBoundary> {
    let (scene_gold, session_gold) = gold_labels(episodes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene: Vec<u8> = scene_gold.iter().map(|_| rng.random_bool(0.5) as u8).collect();
    let session: Vec<u8> = session_gold.iter().map(|_| rng.random_bool(0.5) as u8).collect();
    Ok(RandomBoundary {
        scene: boundary_score(&scene, &scene_gold)?,
        session: boundary_score(&session, &session_gold)?,
    })
}

/// Scores the all-negative predictor.
pub fn majority_boundary<'a>(episodes: impl IntoIterator<Item = &'a DialogueEpisode>) -> Result<RandomBoundary> {
    let (scene_gold, session_gold) = gold_labels(episodes);
    Ok(RandomBoundary {
        scene: boundary_score(&vec![0; scene_gold.len()], &scene_gold)?,
        session: boundary_score(&vec![0; session_gold.len()], &session_gold)?,
    })
}

pub const RANDOM_MIN_LEN: usize = 3;
pub const RANDOM_MAX_LEN: usize = 12;

/// One uniformly random response per reference: length in 3..=12, words
/// drawn uniformly from the non-special vocabulary.
pub fn random_responses(vocab: &Vocab, n: usize, seed: u64) -> Vec<String> {
    let words: Vec<&str> = vocab
        .words()
        .iter()
        .map(String::as_str)
        .filter(|w| !SPECIAL_TOKENS.contains(w))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(RANDOM_MIN_LEN..=RANDOM_MAX_LEN);
            (0..len)
                .map(|_| words[rng.random_range(0..words.len())])
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

pub fn random_generation(vocab: &Vocab, references: &[String], seed: u64) -> Result<GenScore> {
    let candidates = random_responses(vocab, references.len(), seed);
    gen_score(&candidates, &single_refs(references))
}
