//! Video and image captioner interfaces.
//!
//! [`StubCaptioner`] recovers the latent scene of a frame (or the mean of a
//! frame track) by nearest-mean lookup in the generator's scene catalog and
//! renders a short template sentence. [`ExternalCaptioner`] hands the frames
//! to a subprocess and reads back one line of text.

use std::io::Write as _;
use std::path::PathBuf;
use std::process::Command;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::checkpoint::{write_archive, NamedArray};
use crate::corpus::{SceneCatalog, TimedFrame};
use crate::error::{Error, Result};

/// Words the stub templates can emit (besides scene names).
pub const CAPTION_WORDS: [&str; 11] = ["people", "talk", "are", "talking", "in", "a", "view", "of", "photo", "scene", "the"];

pub const ABSTAIN_TEXT: &str = "a scene";
pub const MAX_CAPTION_TOKENS: usize = 12;

const VIDEO_TEMPLATES: [&str; 2] = ["people talk in the {} scene", "people are talking in the {}"];
const IMAGE_TEMPLATES: [&str; 2] = ["a view of the {}", "a photo of the {}"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionSource {
    Video,
    Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipSpan {
    Interval { start: f64, end: f64 },
    Frame { time: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub source: CaptionSource,
    pub clip_span: ClipSpan,
}

impl Caption {
    pub fn is_abstention(&self) -> bool {
        self.text == ABSTAIN_TEXT
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionerKind {
    Stub,
    External,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionerHandle {
    pub kind: CaptionerKind,
    pub identifier: String,
    /// Template-selection seed; stubs only.
    pub seed: Option<u64>,
}

pub trait Captioner: Send + Sync {
    fn handle(&self) -> &CaptionerHandle;

    /// Captions the whole frame track of a dialogue window.
    fn caption_video(&self, track: &[TimedFrame]) -> Result<Caption>;

    /// Captions a single (final) frame.
    fn caption_image(&self, frame: &TimedFrame) -> Result<Caption>;
}

fn span_of(track: &[TimedFrame]) -> ClipSpan {
    let start = track.iter().map(|f| f.time).fold(f64::INFINITY, f64::min);
    let end = track.iter().map(|f| f.time).fold(f64::NEG_INFINITY, f64::max);
    ClipSpan::Interval { start, end }
}

fn is_blank(feature: &[f64]) -> bool {
    feature.iter().all(|v| v.abs() < 1e-12)
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic stand-in captioner driven by the corpus scene catalog.
#[derive(Clone, Debug)]
pub struct StubCaptioner {
    handle: CaptionerHandle,
    catalog: SceneCatalog,
}

impl StubCaptioner {
    pub fn new(catalog: SceneCatalog, seed: u64) -> Self {
        Self {
            handle: CaptionerHandle {
                kind: CaptionerKind::Stub,
                identifier: "nearest-scene-stub".into(),
                seed: Some(seed),
            },
            catalog,
        }
    }

    fn render(&self, feature: &[f64], templates: &[&str]) -> String {
        if is_blank(feature) {
            return ABSTAIN_TEXT.to_string();
        }
        match self.catalog.nearest(feature) {
            Some(idx) => {
                let seed = self.handle.seed.unwrap_or(0);
                let t = templates[(mix(seed ^ idx as u64) % templates.len() as u64) as usize];
                t.replace("{}", &self.catalog.scenes[idx].name)
            }
            None => ABSTAIN_TEXT.to_string(),
        }
    }
}

impl Captioner for StubCaptioner {
    fn handle(&self) -> &CaptionerHandle {
        &self.handle
    }

    fn caption_video(&self, track: &[TimedFrame]) -> Result<Caption> {
        let first = track.first().ok_or(Error::Empty("frame track"))?;
        let k = first.feature.len();
        let mut mean = vec![0.0; k];
        for f in track {
            if f.feature.len() != k {
                return Err(Error::Dimension {
                    context: "frame track",
                    expected: k,
                    found: f.feature.len(),
                });
            }
            for (m, v) in mean.iter_mut().zip(&f.feature) {
                *m += v;
            }
        }
        let n = track.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Ok(Caption {
            text: self.render(&mean, &VIDEO_TEMPLATES),
            source: CaptionSource::Video,
            clip_span: span_of(track),
        })
    }

    fn caption_image(&self, frame: &TimedFrame) -> Result<Caption> {
        if frame.feature.is_empty() {
            return Err(Error::Empty("image frame"));
        }
        Ok(Caption {
            text: self.render(&frame.feature, &IMAGE_TEMPLATES),
            source: CaptionSource::Image,
            clip_span: ClipSpan::Frame { time: frame.time },
        })
    }
}

/// Subprocess captioner.
///
/// The program is invoked as `program [args..] <frames-file> <video|image>`.
/// The frames file is a named-array archive holding `frames` (`n × k`) and
/// `times` (`n × 1`); the program prints one UTF-8 caption line on stdout.
#[derive(Debug)]
pub struct ExternalCaptioner {
    handle: CaptionerHandle,
    program: PathBuf,
    args: Vec<String>,
    lock: Mutex<()>,
}

impl ExternalCaptioner {
    pub fn new(identifier: impl Into<String>, program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        Self {
            handle: CaptionerHandle {
                kind: CaptionerKind::External,
                identifier: identifier.into(),
                seed: None,
            },
            program: program.into(),
            args,
            lock: Mutex::new(()),
        }
    }

    fn run(&self, track: &[TimedFrame], source: CaptionSource) -> Result<String> {
        let first = track.first().ok_or(Error::Empty("frame track"))?;
        let k = first.feature.len();
        let mut frames = Matrix::zeros((track.len(), k));
        let mut times = Matrix::zeros((track.len(), 1));
        for (i, f) in track.iter().enumerate() {
            if f.feature.len() != k {
                return Err(Error::Dimension {
                    context: "frame track",
                    expected: k,
                    found: f.feature.len(),
                });
            }
            for (j, v) in f.feature.iter().enumerate() {
                frames[[i, j]] = *v;
            }
            times[[i, 0]] = f.time;
        }
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut file = tempfile_in_temp_dir()?;
        let bytes = write_archive(&[
            NamedArray::from_matrix("frames", &frames),
            NamedArray::from_matrix("times", &times),
        ]);
        file.1.write_all(&bytes).map_err(|e| Error::io(&file.0, e))?;
        drop(file.1);
        let tag = match source {
            CaptionSource::Video => "video",
            CaptionSource::Image => "image",
        };
        let output = Command::new(&self.program)
            .args(&self.args)
            .arg(&file.0)
            .arg(tag)
            .output()
            .map_err(|e| Error::io(&self.program, e));
        let _ = std::fs::remove_file(&file.0);
        let output = output?;
        if !output.status.success() {
            return Err(Error::Captioner(format!(
                "{} exited with {}: {}",
                self.handle.identifier,
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let stdout = String::from_utf8(output.stdout)
            .map_err(|_| Error::Captioner(format!("{} wrote non-UTF-8 output", self.handle.identifier)))?;
        Ok(stdout.lines().next().unwrap_or("").trim().to_string())
    }
}

fn tempfile_in_temp_dir() -> Result<(PathBuf, std::fs::File)> {
    static COUNTER: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    let path = std::env::temp_dir().join(format!("mdug-frames-{}-{n}.bin", std::process::id()));
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok((path, file))
}

impl Captioner for ExternalCaptioner {
    fn handle(&self) -> &CaptionerHandle {
        &self.handle
    }

    fn caption_video(&self, track: &[TimedFrame]) -> Result<Caption> {
        let text = self.run(track, CaptionSource::Video)?;
        Ok(Caption {
            text,
            source: CaptionSource::Video,
            clip_span: span_of(track),
        })
    }

    fn caption_image(&self, frame: &TimedFrame) -> Result<Caption> {
        let text = self.run(std::slice::from_ref(frame), CaptionSource::Image)?;
        Ok(Caption {
            text,
            source: CaptionSource::Image,
            clip_span: ClipSpan::Frame { time: frame.time },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LatentScene;
    use crate::vocab::tokenize;

    fn catalog() -> SceneCatalog {
        SceneCatalog {
            scenes: vec![
                LatentScene {
                    name: "kitchen".into(),
                    keywords: vec!["kitchen".into()],
                    mean: vec![2.0, 0.0],
                },
                LatentScene {
                    name: "street".into(),
                    keywords: vec!["street".into()],
                    mean: vec![-2.0, 1.0],
                },
            ],
        }
    }

    fn frame(t: f64, v: [f64; 2]) -> TimedFrame {
        TimedFrame { time: t, feature: v.to_vec() }
    }

    #[test]
    fn zero_track_abstains() {
        let c = StubCaptioner::new(catalog(), 0);
        let cap = c.caption_video(&[frame(0.0, [0.0, 0.0]), frame(1.0, [0.0, 0.0])]).unwrap();
        assert!(cap.is_abstention());
        assert!(c.caption_image(&frame(0.0, [0.0, 0.0])).unwrap().is_abstention());
    }

    #[test]
    fn image_caption_names_nearest_scene() {
        let c = StubCaptioner::new(catalog(), 5);
        let cap = c.caption_image(&frame(3.0, [-1.8, 0.7])).unwrap();
        assert!(tokenize(&cap.text).contains(&"street".to_string()));
        assert_eq!(cap.source, CaptionSource::Image);
        assert!(tokenize(&cap.text).len() <= MAX_CAPTION_TOKENS);
    }

    #[test]
    fn empty_track_is_an_error() {
        let c = StubCaptioner::new(catalog(), 0);
        assert!(c.caption_video(&[]).is_err());
    }

    #[test]
    fn external_captioner_reads_first_stdout_line() {
        let c = ExternalCaptioner::new(
            "echo",
            "/bin/sh",
            vec!["-c".into(), "echo \"people talk in the $2\"; echo ignored".into(), "captioner".into()],
        );
        let cap = c.caption_video(&[frame(0.0, [1.0, 2.0])]).unwrap();
        assert_eq!(cap.text, "people talk in the video");
        assert_eq!(c.handle().kind, CaptionerKind::External);
    }

    #[test]
    fn external_captioner_failure_is_reported() {
        let c = ExternalCaptioner::new("fail", "/bin/sh", vec!["-c".into(), "exit 3".into(), "x".into()]);
        assert!(matches!(c.caption_image(&frame(0.0, [1.0, 2.0])), Err(Error::Captioner(_))));
    }
}
