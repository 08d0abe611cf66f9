//! Metric reports: per-seed scores, seed means and aligned text tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{BoundaryScore, GenScore};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TABLE: &str = "report.txt";

/// Scene and session scores of one predictor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackScores {
    pub scene: BoundaryScore,
    pub session: BoundaryScore,
}

/// Seed-averaged rates (counts are not averaged).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanBoundary {
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanTracks {
    pub scene: MeanBoundary,
    pub session: MeanBoundary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnderstandingRow {
    /// Keyed by seed.
    pub per_seed: BTreeMap<u64, TrackScores>,
    pub mean: MeanTracks,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRow {
    pub per_seed: BTreeMap<u64, GenScore>,
    pub mean: GenScore,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub understanding: BTreeMap<String, UnderstandingRow>,
    pub generation: BTreeMap<String, GenerationRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub run_id: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Keyed by split name.
    pub splits: BTreeMap<String, SplitReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn mean_boundary<'a>(scores: impl Iterator<Item = &'a BoundaryScore> + Clone) -> MeanBoundary {
    MeanBoundary {
        acc: mean_of(scores.clone().map(|s| s.acc)),
        precision: mean_of(scores.clone().map(|s| s.precision)),
        recall: mean_of(scores.clone().map(|s| s.recall)),
        f1: mean_of(scores.map(|s| s.f1)),
    }
}

impl UnderstandingRow {
    /// Plain (untrimmed) mean over seeds.
    pub fn from_seeds(per_seed: BTreeMap<u64, TrackScores>) -> Self {
        let mean = MeanTracks {
            scene: mean_boundary(per_seed.values().map(|t| &t.scene)),
            session: mean_boundary(per_seed.values().map(|t| &t.session)),
        };
        Self { per_seed, mean }
    }
}

impl GenerationRow {
    pub fn from_seeds(per_seed: BTreeMap<u64, GenScore>) -> Self {
        let mean = GenScore::new(
            mean_of(per_seed.values().map(|s| s.bleu1)),
            mean_of(per_seed.values().map(|s| s.rouge_l)),
            mean_of(per_seed.values().map(|s| s.meteor)),
            mean_of(per_seed.values().map(|s| s.cider)),
        );
        Self { per_seed, mean }
    }
}

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, "  {c:>w$}");
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(&header.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    out += &line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>());
    for r in rows {
        out += &line(r);
    }
    out
}

fn pct(v: f64) -> String {
    format!("{:.3}", v * 100.0)
}

impl MetricReport {
    /// Aligned tables of seed means, values ×100.
    pub fn render(&self) -> String {
        let mut out = format!("run {}  config {}\n", self.run_id, self.config_hash);
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        out += &format!("seeds {}\n", seeds.join(","));
        for (split, rep) in &self.splits {
            if !rep.understanding.is_empty() {
                out += &format!("\n[{split}] boundary prediction (seed mean)\n");
                let rows: Vec<Vec<String>> = rep
                    .understanding
                    .iter()
                    .map(|(name, row)| {
                        let (s, t) = (&row.mean.scene, &row.mean.session);
                        vec![
                            name.clone(),
                            pct(s.acc),
                            pct(s.f1),
                            pct(s.precision),
                            pct(s.recall),
                            pct(t.acc),
                            pct(t.f1),
                            pct(t.precision),
                            pct(t.recall),
                        ]
                    })
                    .collect();
                out += &table(
                    &["model", "Acc_s", "F1_s", "P_s", "R_s", "Acc_t", "F1_t", "P_t", "R_t"],
                    &rows,
                );
            }
            if !rep.generation.is_empty() {
                out += &format!("\n[{split}] response generation (seed mean)\n");
                let rows: Vec<Vec<String>> = rep
                    .generation
                    .iter()
                    .map(|(name, row)| {
                        let m = &row.mean;
                        vec![name.clone(), pct(m.bleu1), pct(m.rouge_l), pct(m.meteor), pct(m.cider), pct(m.avg)]
                    })
                    .collect();
                out += &table(&["variant", "BLEU-1", "ROUGE-L", "METEOR", "CIDEr", "Avg"], &rows);
            }
        }
        for w in &self.warnings {
            out += &format!("\nwarning: {w}\n");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(REPORT_JSON);
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        let txt = dir.join(REPORT_TABLE);
        std::fs::write(&txt, self.render()).map_err(|e| Error::io(&txt, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Every `report.json` directly in `dir` or one level below, sorted.
pub fn find_reports(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let direct = dir.join(REPORT_JSON);
    if direct.is_file() {
        found.push(direct);
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let candidate = entry.path().join(REPORT_JSON);
        if candidate.is_file() {
            found.push(candidate);
        }
    }
    found.sort();
    Ok(found)
}
