//! Corpus-level text generation metrics: BLEU-1, ROUGE-L, METEOR-lite and
//! CIDEr, following the coco-caption conventions.
//!
//! Every metric takes one candidate per item and one or more references per
//! item, tokenized with the shared lowercase tokenizer.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::tokenize;

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_MAX_N: usize = 4;

/// Generation scores on their natural scales; `avg` is the mean of the four.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenScore {
    pub bleu1: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub cider: f64,
    pub avg: f64,
}

impl GenScore {
    pub fn new(bleu1: f64, rouge_l: f64, meteor: f64, cider: f64) -> Self {
        Self {
            bleu1,
            rouge_l,
            meteor,
            cider,
            avg: (bleu1 + rouge_l + meteor + cider) / 4.0,
        }
    }
}

fn check(candidates: &[String], references: &[Vec<String>]) -> Result<()> {
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch {
            left: candidates.len(),
            right: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(Error::Empty("candidate corpus"));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::Empty("reference set"));
    }
    Ok(())
}

fn tokenized(refs: &[String]) -> Vec<Vec<String>> {
    refs.iter().map(|r| tokenize(r)).collect()
}

fn counts<'a>(tokens: &'a [String]) -> HashMap<&'a str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// Corpus BLEU-1: clipped unigram precision times the brevity penalty
/// `exp(min(0, 1 - r/c))`, with `r` the summed closest reference lengths.
pub fn bleu1(candidates: &[String], references: &[Vec<String>]) -> Result<f64> {
    check(candidates, references)?;
    let (mut matched, mut cand_len, mut ref_len) = (0usize, 0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        let c = tokenize(cand);
        let refs = tokenized(refs);
        let mut max_ref: HashMap<&str, usize> = HashMap::new();
        for r in &refs {
            for (w, n) in counts(r) {
                let e = max_ref.entry(w).or_insert(0);
                *e = (*e).max(n);
            }
        }
        for (w, n) in counts(&c) {
            matched += n.min(max_ref.get(w).copied().unwrap_or(0));
        }
        cand_len += c.len();
        // Closest reference length; ties go to the shorter one.
        let closest = refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| ((l as i64 - c.len() as i64).abs(), l))
            .unwrap_or(0);
        ref_len += closest;
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let precision = matched as f64 / cand_len as f64;
    let bp = (1.0 - ref_len as f64 / cand_len as f64).min(0.0).exp();
    Ok(bp * precision)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure for one candidate against its references: maximum
/// precision and recall over references, combined with beta = 1.2.
pub fn rouge_l_pair(candidate: &str, references: &[String]) -> f64 {
    let c = tokenize(candidate);
    if c.is_empty() {
        return 0.0;
    }
    let (mut p_max, mut r_max) = (0.0f64, 0.0f64);
    for r in tokenized(references) {
        if r.is_empty() {
            continue;
        }
        let lcs = lcs_len(&c, &r) as f64;
        p_max = p_max.max(lcs / c.len() as f64);
        r_max = r_max.max(lcs / r.len() as f64);
    }
    if p_max == 0.0 || r_max == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p_max * r_max / (r_max + b2 * p_max)
}

pub fn rouge_l(candidates: &[String], references: &[Vec<String>]) -> Result<f64> {
    check(candidates, references)?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_l_pair(c, r))
        .sum();
    Ok(total / candidates.len() as f64)
}

/// Suffix-stripping stemmer used for the second METEOR matching stage.
pub fn stem(word: &str) -> &str {
    for suffix in ["ing", "ed", "es", "ly", "s"] {
        if let Some(base) = word.strip_suffix(suffix) {
            if base.chars().count() >= 3 {
                return base;
            }
        }
    }
    word
}

// Greedy alignment: for each candidate position prefer the reference position
// right after the previous match, otherwise the earliest free one.
fn align(c: &[String], r: &[String], key: impl Fn(&str) -> String, matches: &mut Vec<(usize, usize)>) {
    let mut cand_used = vec![false; c.len()];
    let mut ref_used = vec![false; r.len()];
    for &(i, j) in matches.iter() {
        cand_used[i] = true;
        ref_used[j] = true;
    }
    let rkeys: Vec<String> = r.iter().map(|w| key(w)).collect();
    let mut prev: Option<usize> = None;
    for i in 0..c.len() {
        if cand_used[i] {
            prev = matches.iter().find(|m| m.0 == i).map(|m| m.1);
            continue;
        }
        let ck = key(&c[i]);
        let next = prev.map(|p| p + 1).filter(|&j| j < r.len() && !ref_used[j] && rkeys[j] == ck);
        let pick = next.or_else(|| (0..r.len()).find(|&j| !ref_used[j] && rkeys[j] == ck));
        match pick {
            Some(j) => {
                ref_used[j] = true;
                cand_used[i] = true;
                matches.push((i, j));
                prev = Some(j);
            }
            None => prev = None,
        }
    }
}

fn meteor_single(c: &[String], r: &[String]) -> f64 {
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut matches = Vec::new();
    align(c, r, |w| w.to_string(), &mut matches);
    align(c, r, |w| stem(w).to_string(), &mut matches);
    let m = matches.len();
    if m == 0 {
        return 0.0;
    }
    matches.sort_unstable();
    let mut chunks = 1;
    for w in matches.windows(2) {
        if !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1) {
            chunks += 1;
        }
    }
    let p = m as f64 / c.len() as f64;
    let rc = m as f64 / r.len() as f64;
    let fmean = p * rc / (0.9 * p + 0.1 * rc);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

/// METEOR without synonym matching: best score over references.
pub fn meteor_lite_pair(candidate: &str, references: &[String]) -> f64 {
    let c = tokenize(candidate);
    tokenized(references)
        .iter()
        .map(|r| meteor_single(&c, r))
        .fold(0.0, f64::max)
}

pub fn meteor_lite(candidates: &[String], references: &[Vec<String>]) -> Result<f64> {
    check(candidates, references)?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| meteor_lite_pair(c, r))
        .sum();
    Ok(total / candidates.len() as f64)
}

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.join(" ")).or_insert(0.0) += 1.0;
        }
    }
    m
}

fn tfidf(counts: BTreeMap<String, f64>, df: &BTreeMap<String, f64>, n_docs: f64) -> (BTreeMap<String, f64>, f64) {
    let vec: BTreeMap<String, f64> = counts
        .into_iter()
        .map(|(g, c)| {
            let idf = (n_docs / df.get(&g).copied().unwrap_or(0.0).max(1.0)).ln();
            (g, c * idf)
        })
        .collect();
    let norm = vec.values().map(|v| v * v).sum::<f64>().sqrt();
    (vec, norm)
}

/// CIDEr: per n in 1..=4, cosine similarity of tf-idf n-gram vectors
/// (idf = ln(N / max(df, 1)) over the reference sets), averaged over
/// references and n, times 10, then averaged over the corpus.
pub fn cider(candidates: &[String], references: &[Vec<String>]) -> Result<f64> {
    check(candidates, references)?;
    let n_docs = references.len() as f64;
    let cand_tok: Vec<Vec<String>> = candidates.iter().map(|c| tokenize(c)).collect();
    let ref_tok: Vec<Vec<Vec<String>>> = references.iter().map(|r| tokenized(r)).collect();

    let mut per_item = vec![0.0; candidates.len()];
    for n in 1..=CIDER_MAX_N {
        let mut df: BTreeMap<String, f64> = BTreeMap::new();
        for refs in &ref_tok {
            let mut seen = BTreeSet::new();
            for r in refs {
                seen.extend(ngrams(r, n).into_keys());
            }
            for g in seen {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        for (i, (c, refs)) in cand_tok.iter().zip(&ref_tok).enumerate() {
            let (cv, cn) = tfidf(ngrams(c, n), &df, n_docs);
            let mut sim = 0.0;
            for r in refs {
                let (rv, rn) = tfidf(ngrams(r, n), &df, n_docs);
                if cn > 0.0 && rn > 0.0 {
                    let dot: f64 = cv.iter().map(|(g, w)| w * rv.get(g).copied().unwrap_or(0.0)).sum();
                    sim += dot / (cn * rn);
                }
            }
            per_item[i] += sim / refs.len() as f64;
        }
    }
    let total: f64 = per_item.iter().map(|s| s / CIDER_MAX_N as f64 * 10.0).sum();
    Ok(total / candidates.len() as f64)
}

pub fn gen_score(candidates: &[String], references: &[Vec<String>]) -> Result<GenScore> {
    Ok(GenScore::new(
        bleu1(candidates, references)?,
        rouge_l(candidates, references)?,
        meteor_lite(candidates, references)?,
        cider(candidates, references)?,
    ))
}

/// Wraps single references into one-element reference sets.
pub fn single_refs(references: &[String]) -> Vec<Vec<String>> {
    references.iter().map(|r| vec![r.clone()]).collect()
}
