#![allow(dead_code)]

use mdug_core::autodiff::{Grads, ParamStore};

/// Result of comparing analytic gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_at: String,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.worst_rel <= tol
    }
}

/// Relative error with a small floor so exactly-zero gradients compare by
/// absolute difference.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Central differences `(f(θ+h) − f(θ−h)) / 2h` on up to `per_param` entries
/// of every parameter whose name passes `select`. Entries with a nonzero
/// analytic gradient are preferred; one zero entry is kept when present.
pub fn central_differences<M>(
    model: &mut M,
    store: impl Fn(&mut M) -> &mut ParamStore,
    loss: impl Fn(&M) -> f64,
    analytic: &Grads,
    select: impl Fn(&str) -> bool,
    per_param: usize,
    step: f64,
) -> GradReport {
    let mut report = GradReport { checked: 0, worst_rel: 0.0, worst_at: String::new() };
    let ids: Vec<_> = store(model).ids().collect();
    for id in ids {
        let name = store(model).name(id).to_string();
        if !select(&name) {
            continue;
        }
        let Some(grad) = analytic.get(id).cloned() else { continue };
        let cols = grad.ncols();
        let nonzero: Vec<usize> = (0..grad.len()).filter(|&i| grad[[i / cols, i % cols]].abs() > 1e-12).collect();
        let mut picks: Vec<usize> = if nonzero.len() <= per_param {
            nonzero.clone()
        } else {
            (0..per_param).map(|j| nonzero[j * nonzero.len() / per_param]).collect()
        };
        if let Some(z) = (0..grad.len()).find(|i| !nonzero.contains(i)) {
            picks.push(z);
        }
        for idx in picks {
            let (r, c) = (idx / cols, idx % cols);
            let orig = store(model).get(id)[[r, c]];
            store(model).get_mut(id)[[r, c]] = orig + step;
            let plus = loss(model);
            store(model).get_mut(id)[[r, c]] = orig - step;
            let minus = loss(model);
            store(model).get_mut(id)[[r, c]] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let e = rel_err(grad[[r, c]], numeric);
            report.checked += 1;
            if e > report.worst_rel {
                report.worst_rel = e;
                report.worst_at = format!("{name}[{r},{c}] analytic {} numeric {numeric}", grad[[r, c]]);
            }
        }
    }
    report
}

/// Straightforward CIDEr: tf-idf over n-grams with idf ln(N / max(df, 1))
/// taken from the reference sets, cosine per n, mean over n = 1..4, ×10,
/// mean over references and then over the corpus.
pub fn cider_reference(candidates: &[&str], references: &[Vec<&str>]) -> f64 {
    use std::collections::{HashMap, HashSet};
    let grams = |s: &str, n: usize| -> HashMap<Vec<String>, f64> {
        let toks: Vec<String> = s.split_whitespace().map(str::to_lowercase).collect();
        let mut m = HashMap::new();
        if toks.len() >= n {
            for w in toks.windows(n) {
                *m.entry(w.to_vec()).or_insert(0.0) += 1.0;
            }
        }
        m
    };
    let n_docs = references.len() as f64;
    let mut total = 0.0;
    for (cand, refs) in candidates.iter().zip(references) {
        let mut per_ref = 0.0;
        for r in refs {
            let mut per_n = 0.0;
            for n in 1..=4 {
                let mut df: HashMap<Vec<String>, f64> = HashMap::new();
                for doc in references {
                    let seen: HashSet<Vec<String>> = doc.iter().flat_map(|d| grams(d, n).into_keys()).collect();
                    for g in seen {
                        *df.entry(g).or_insert(0.0) += 1.0;
                    }
                }
                let vec = |counts: HashMap<Vec<String>, f64>| -> HashMap<Vec<String>, f64> {
                    counts
                        .into_iter()
                        .map(|(g, c)| {
                            let d = df.get(&g).copied().unwrap_or(0.0).max(1.0);
                            (g, c * (n_docs / d).ln())
                        })
                        .collect()
                };
                let (a, b) = (vec(grams(cand, n)), vec(grams(r, n)));
                let dot: f64 = a.iter().map(|(g, v)| v * b.get(g).copied().unwrap_or(0.0)).sum();
                let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
                let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
                if na > 0.0 && nb > 0.0 {
                    per_n += dot / (na * nb);
                }
            }
            per_ref += 10.0 * per_n / 4.0;
        }
        total += per_ref / refs.len() as f64;
    }
    total / candidates.len() as f64
}

/// Longest common subsequence length by the textbook table.
pub fn lcs(a: &[&str], b: &[&str]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] { t[i - 1][j - 1] + 1 } else { t[i - 1][j].max(t[i][j - 1]) };
        }
    }
    t[a.len()][b.len()]
}
