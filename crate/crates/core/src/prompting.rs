//! Fixed-template scene/session prompt and generator input assembly.

use serde::{Deserialize, Serialize};

use crate::captioning::Caption;
use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocab, CLS, SEP};

/// Every word the template can produce; reserved in the corpus vocabulary.
pub const PROMPT_WORDS: [&str; 9] = ["the", "scene", "is", "continuous", ",", "while", "dialogue", "session", "not"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    pub scene_label: u8,
    pub session_label: u8,
    /// Set when the labels form the pair ruled out by the co-occurrence rule.
    pub warning: Option<String>,
}

fn continuity(label: u8) -> &'static str {
    if label == 0 {
        "continuous"
    } else {
        "not continuous"
    }
}

/// Label 0 renders as "continuous", label 1 as "not continuous".
pub fn build_prompt(scene_label: u8, session_label: u8) -> Result<PromptText> {
    for l in [scene_label, session_label] {
        if l > 1 {
            return Err(Error::InvalidLabel(l as i64));
        }
    }
    let warning = (scene_label == 1 && session_label == 0)
        .then(|| "labels (scene=1, session=0) violate the co-occurrence rule; rendered unchanged".to_string());
    Ok(PromptText {
        text: format!(
            "the scene is {}, while the dialogue session is {}",
            continuity(scene_label),
            continuity(session_label)
        ),
        scene_label,
        session_label,
        warning,
    })
}

/// Which optional segments enter the generator input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub video_caption: bool,
    pub image_caption: bool,
    pub label_prompt: bool,
}

impl AblationFlags {
    pub const ALL_ON: AblationFlags = AblationFlags {
        video_caption: true,
        image_caption: true,
        label_prompt: true,
    };
    pub const ALL_OFF: AblationFlags = AblationFlags {
        video_caption: false,
        image_caption: false,
        label_prompt: false,
    };
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::ALL_ON
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Cls,
    Context,
    Sep,
    VideoCaption,
    ImageCaption,
    Prompt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorInput {
    pub token_ids: Vec<TokenId>,
    pub segments: Vec<Segment>,
}

impl GeneratorInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn segment(&self, kind: SegmentKind) -> Option<&[TokenId]> {
        self.segments
            .iter()
            .find(|s| s.kind == kind)
            .map(|s| &self.token_ids[s.start..s.end])
    }

    /// Token ids as a JSON array, for debugging dumps.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.token_ids).expect("token ids serialize")
    }
}

/// Generator input pieces before tokenization.
#[derive(Clone, Debug)]
pub struct InputParts<'a> {
    pub context: &'a [String],
    pub video_caption: Option<&'a Caption>,
    pub image_caption: Option<&'a Caption>,
    pub prompt: Option<&'a PromptText>,
}

/// `[CLS] context [SEP] video [SEP] image [SEP] prompt`, skipping disabled
/// segments with their separators. Only the context is truncated (oldest
/// utterances first, then oldest tokens) to respect `max_tokens`.
pub fn assemble_input(vocab: &Vocab, parts: &InputParts, flags: AblationFlags, max_tokens: usize) -> Result<GeneratorInput> {
    if parts.context.is_empty() {
        return Err(Error::Empty("dialogue context"));
    }
    let mut tail: Vec<(SegmentKind, Vec<TokenId>)> = Vec::new();
    if flags.video_caption {
        let c = parts
            .video_caption
            .ok_or_else(|| Error::Config("video caption enabled but none supplied".into()))?;
        tail.push((SegmentKind::VideoCaption, vocab.encode(&c.text)));
    }
    if flags.image_caption {
        let c = parts
            .image_caption
            .ok_or_else(|| Error::Config("image caption enabled but none supplied".into()))?;
        tail.push((SegmentKind::ImageCaption, vocab.encode(&c.text)));
    }
    if flags.label_prompt {
        let p = parts
            .prompt
            .ok_or_else(|| Error::Config("label prompt enabled but none supplied".into()))?;
        tail.push((SegmentKind::Prompt, vocab.encode(&p.text)));
    }

    let fixed = 1 + tail.iter().map(|(_, t)| t.len() + 1).sum::<usize>();
    if fixed >= max_tokens {
        return Err(Error::Config(format!(
            "max_tokens {max_tokens} leaves no room for context after {fixed} caption/prompt tokens"
        )));
    }
    let budget = max_tokens - fixed;

    let utterances: Vec<Vec<TokenId>> = parts.context.iter().map(|t| vocab.encode(t)).collect();
    let mut start = 0;
    while start + 1 < utterances.len() && utterances[start..].iter().map(Vec::len).sum::<usize>() > budget {
        start += 1;
    }
    let mut context: Vec<TokenId> = utterances[start..].concat();
    if context.len() > budget {
        context.drain(..context.len() - budget);
    }

    let mut token_ids = vec![CLS];
    let mut segments = vec![Segment {
        kind: SegmentKind::Cls,
        start: 0,
        end: 1,
    }];
    let push = |kind: SegmentKind, toks: &[TokenId], ids: &mut Vec<TokenId>, segs: &mut Vec<Segment>| {
        let start = ids.len();
        ids.extend_from_slice(toks);
        segs.push(Segment {
            kind,
            start,
            end: ids.len(),
        });
    };
    push(SegmentKind::Context, &context, &mut token_ids, &mut segments);
    for (kind, toks) in &tail {
        push(SegmentKind::Sep, &[SEP], &mut token_ids, &mut segments);
        push(*kind, toks, &mut token_ids, &mut segments);
    }
    debug_assert!(token_ids.len() <= max_tokens);
    Ok(GeneratorInput { token_ids, segments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioning::{CaptionSource, ClipSpan};

    #[test]
    fn template_matches_reference_wording() {
        assert_eq!(
            build_prompt(0, 1).unwrap().text,
            "the scene is continuous, while the dialogue session is not continuous"
        );
        assert_eq!(
            build_prompt(0, 0).unwrap().text,
            "the scene is continuous, while the dialogue session is continuous"
        );
        assert_eq!(
            build_prompt(1, 1).unwrap().text,
            "the scene is not continuous, while the dialogue session is not continuous"
        );
    }

    #[test]
    fn prompt_is_a_bijection_over_label_pairs() {
        let texts: std::collections::HashSet<String> = [(0, 0), (0, 1), (1, 0), (1, 1)]
            .iter()
            .map(|&(s, t)| build_prompt(s, t).unwrap().text)
            .collect();
        assert_eq!(texts.len(), 4);
    }

    #[test]
    fn forbidden_pair_renders_with_warning() {
        let p = build_prompt(1, 0).unwrap();
        assert!(p.warning.is_some());
        assert_eq!((p.scene_label, p.session_label), (1, 0));
        assert!(build_prompt(0, 0).unwrap().warning.is_none());
    }

    #[test]
    fn non_binary_labels_rejected() {
        assert!(matches!(build_prompt(2, 0), Err(Error::InvalidLabel(2))));
    }

    fn fixture() -> (Vocab, Vec<String>, Caption, Caption, PromptText) {
        let vocab = Vocab::new(PROMPT_WORDS.iter().copied().chain(["a", "b", "c", "people", "kitchen", "view"]));
        let ctx = vec!["a b".to_string(), "c a".to_string()];
        let vid = Caption {
            text: "people kitchen".into(),
            source: CaptionSource::Video,
            clip_span: ClipSpan::Interval { start: 0.0, end: 1.0 },
        };
        let img = Caption {
            text: "view kitchen".into(),
            source: CaptionSource::Image,
            clip_span: ClipSpan::Frame { time: 1.0 },
        };
        (vocab, ctx, vid, img, build_prompt(0, 1).unwrap())
    }

    #[test]
    fn all_on_has_four_sep_delimited_segments() {
        let (vocab, ctx, vid, img, prompt) = fixture();
        let parts = InputParts {
            context: &ctx,
            video_caption: Some(&vid),
            image_caption: Some(&img),
            prompt: Some(&prompt),
        };
        let input = assemble_input(&vocab, &parts, AblationFlags::ALL_ON, 512).unwrap();
        let kinds: Vec<SegmentKind> = input.segments.iter().map(|s| s.kind).collect();
        use SegmentKind::*;
        assert_eq!(kinds, [Cls, Context, Sep, VideoCaption, Sep, ImageCaption, Sep, Prompt]);
        assert_eq!(input.token_ids.iter().filter(|&&t| t == SEP).count(), 3);
        assert_eq!(input.token_ids[0], CLS);
    }

    #[test]
    fn all_off_is_cls_plus_context() {
        let (vocab, ctx, _, _, _) = fixture();
        let parts = InputParts {
            context: &ctx,
            video_caption: None,
            image_caption: None,
            prompt: None,
        };
        let input = assemble_input(&vocab, &parts, AblationFlags::ALL_OFF, 512).unwrap();
        assert_eq!(input.len(), 5);
        assert_eq!(input.segments.len(), 2);
    }

    #[test]
    fn truncation_only_shrinks_context() {
        let (vocab, ctx, vid, img, prompt) = fixture();
        let parts = InputParts {
            context: &ctx,
            video_caption: Some(&vid),
            image_caption: Some(&img),
            prompt: Some(&prompt),
        };
        let full = assemble_input(&vocab, &parts, AblationFlags::ALL_ON, 512).unwrap();
        let cut = assemble_input(&vocab, &parts, AblationFlags::ALL_ON, full.len() - 3).unwrap();
        assert_eq!(cut.segment(SegmentKind::Context).unwrap(), &vocab.encode("a")[..]);
        assert_eq!(cut.segment(SegmentKind::Prompt), full.segment(SegmentKind::Prompt));
        assert_eq!(cut.segment(SegmentKind::VideoCaption), full.segment(SegmentKind::VideoCaption));
    }

    #[test]
    fn missing_enabled_caption_is_an_error() {
        let (vocab, ctx, _, img, prompt) = fixture();
        let parts = InputParts {
            context: &ctx,
            video_caption: None,
            image_caption: Some(&img),
            prompt: Some(&prompt),
        };
        assert!(assemble_input(&vocab, &parts, AblationFlags::ALL_ON, 512).is_err());
    }

    #[test]
    fn empty_context_is_an_error() {
        let (vocab, _, _, _, _) = fixture();
        let parts = InputParts {
            context: &[],
            video_caption: None,
            image_caption: None,
            prompt: None,
        };
        assert!(matches!(
            assemble_input(&vocab, &parts, AblationFlags::ALL_OFF, 512),
            Err(Error::Empty(_))
        ));
    }
}
