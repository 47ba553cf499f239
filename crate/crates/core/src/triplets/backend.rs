//! Captioning and reformulation backends, plus the deterministic oracles used
//! with synthetic worlds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::world::SyntheticWorldConfig;

/// Sent with every image to external captioning backends.
pub const CAPTION_PROMPT: &str =
    "Describe this image in detail, covering object, color, style, and setting.";

const REFORMULATION_TEMPLATE_HEAD: &str = "You have two captions for two images, image A and image B, you are supposed to write a reformulation text describing changing from image A to image B.";
const REFORMULATION_TEMPLATE_TAIL: &str = "answer should be concise and within 12 words, only contain normal words, do not use special characters.";

pub const DEFAULT_WORD_CAP: usize = 12;

pub const ORACLE_CAPTION_ID: &str = "oracle-caption";
pub const ORACLE_REFORMULATE_ID: &str = "oracle-reformulate";

const KEEP_SAME: &str = "keep the item the same";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub text: String,
    pub backend_id: String,
}

pub trait CaptionBackend: Send + Sync {
    fn id(&self) -> &str;
    fn caption(&self, image: &ImageRecord) -> Result<String>;
}

pub trait ReformulationBackend: Send + Sync {
    fn id(&self) -> &str;
    /// Raw backend output; length policy is applied by [`reformulate`].
    fn reformulate(&self, caption_a: &str, caption_b: &str) -> Result<String>;
    /// Oracle output is already within the cap, so truncating it is silent.
    fn is_external(&self) -> bool {
        true
    }
}

/// The reformulation prompt with both caption slots filled in.
pub fn render_reformulation_prompt(caption_a: &str, caption_b: &str) -> Result<String> {
    if caption_a.trim().is_empty() || caption_b.trim().is_empty() {
        return Err(Error::EmptyCaption(None));
    }
    Ok(format!(
        "{REFORMULATION_TEMPLATE_HEAD}\ncaption A: {caption_a}\ncaption B: {caption_b}\n{REFORMULATION_TEMPLATE_TAIL}\nDifference:"
    ))
}

pub fn caption(image: &ImageRecord, backend: &dyn CaptionBackend) -> Result<CaptionRecord> {
    image.validate()?;
    let text = backend.caption(image)?;
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::EmptyCaption(Some(image.id.clone())));
    }
    Ok(CaptionRecord {
        image_id: image.id.clone(),
        text: text.to_string(),
        backend_id: backend.id().to_string(),
    })
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Keeps the first `cap` whitespace-separated words.
pub fn truncate_words(text: &str, cap: usize) -> String {
    text.split_whitespace().take(cap).collect::<Vec<_>>().join(" ")
}

pub fn reformulate(
    caption_a: &str,
    caption_b: &str,
    backend: &dyn ReformulationBackend,
    word_cap: usize,
) -> Result<String> {
    if caption_a.trim().is_empty() || caption_b.trim().is_empty() {
        return Err(Error::EmptyCaption(None));
    }
    let raw = backend.reformulate(caption_a, caption_b)?;
    let normalized = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    if normalized.is_empty() {
        return Err(Error::EmptyReformulation(backend.id().to_string()));
    }
    let n = word_count(&normalized);
    if n > word_cap {
        if backend.is_external() {
            log::warn!(
                "backend `{}` returned {n} words, truncating to {word_cap}: {normalized:?}",
                backend.id()
            );
        }
        return Ok(truncate_words(&normalized, word_cap));
    }
    Ok(normalized)
}

/// Schema view shared by the two oracles.
#[derive(Debug, Clone)]
struct Grammar {
    /// (attribute name, values) in schema order.
    attributes: Vec<(String, Vec<String>)>,
    head: String,
}

impl Grammar {
    fn new(world: &SyntheticWorldConfig) -> Result<Self> {
        world.validate()?;
        Ok(Self {
            attributes: world
                .attributes
                .iter()
                .map(|a| (a.name.clone(), a.values.clone()))
                .collect(),
            head: world.head_attribute.clone(),
        })
    }

    fn attribute_of(&self, word: &str) -> Option<&str> {
        self.attributes
            .iter()
            .find(|(_, values)| values.iter().any(|v| v == word))
            .map(|(name, _)| name.as_str())
    }
}

/// Captions from the attribute tuple: `a <modifiers in schema order> <head>`.
/// Missing or empty modifiers are omitted.
#[derive(Debug, Clone)]
pub struct OracleCaptioner {
    grammar: Grammar,
}

impl OracleCaptioner {
    pub fn new(world: &SyntheticWorldConfig) -> Result<Self> {
        Ok(Self {
            grammar: Grammar::new(world)?,
        })
    }

    pub fn caption_attributes(&self, attributes: &BTreeMap<String, String>) -> Option<String> {
        let head = attributes.get(&self.grammar.head).filter(|v| !v.is_empty())?;
        let mut words = vec!["a"];
        for (name, _) in &self.grammar.attributes {
            if *name == self.grammar.head {
                continue;
            }
            if let Some(v) = attributes.get(name).filter(|v| !v.is_empty()) {
                words.push(v);
            }
        }
        words.push(head);
        Some(words.join(" "))
    }
}

impl CaptionBackend for OracleCaptioner {
    fn id(&self) -> &str {
        ORACLE_CAPTION_ID
    }

    fn caption(&self, image: &ImageRecord) -> Result<String> {
        self.caption_attributes(&image.attributes)
            .ok_or_else(|| Error::BackendUnavailable {
                backend: ORACLE_CAPTION_ID.into(),
                reason: format!(
                    "image `{}` has no `{}` attribute",
                    image.id, self.grammar.head
                ),
            })
    }
}

/// Parses two oracle captions back into attribute tuples and describes the
/// difference: `change <attr> from <old> to <new>`, further clauses joined by
/// `and` without repeating the verb, truncated to the word cap.
#[derive(Debug, Clone)]
pub struct OracleReformulator {
    grammar: Grammar,
    word_cap: usize,
}

impl OracleReformulator {
    pub fn new(world: &SyntheticWorldConfig, word_cap: usize) -> Result<Self> {
        if word_cap == 0 {
            return Err(Error::InvalidConfig("word cap must be > 0".into()));
        }
        Ok(Self {
            grammar: Grammar::new(world)?,
            word_cap,
        })
    }

    fn parse(&self, caption: &str) -> Result<BTreeMap<String, String>> {
        let mut words = caption.split_whitespace();
        let unparseable = |why: String| Error::BackendUnavailable {
            backend: ORACLE_REFORMULATE_ID.into(),
            reason: format!("caption {caption:?} outside the oracle grammar: {why}"),
        };
        if words.next() != Some("a") {
            return Err(unparseable("missing article".into()));
        }
        let mut out = BTreeMap::new();
        for w in words {
            let attr = self
                .grammar
                .attribute_of(w)
                .ok_or_else(|| unparseable(format!("unknown word `{w}`")))?;
            if out.insert(attr.to_string(), w.to_string()).is_some() {
                return Err(unparseable(format!("attribute `{attr}` repeated")));
            }
        }
        Ok(out)
    }

    pub fn diff_text(&self, a: &BTreeMap<String, String>, b: &BTreeMap<String, String>) -> String {
        let mut clauses = Vec::new();
        for (name, _) in &self.grammar.attributes {
            let old = a.get(name).map(String::as_str).unwrap_or("none");
            let new = b.get(name).map(String::as_str).unwrap_or("none");
            if old != new {
                let verb = if clauses.is_empty() { "change " } else { "" };
                clauses.push(format!("{verb}{name} from {old} to {new}"));
            }
        }
        if clauses.is_empty() {
            return KEEP_SAME.to_string();
        }
        truncate_words(&clauses.join(" and "), self.word_cap)
    }
}

impl ReformulationBackend for OracleReformulator {
    fn id(&self) -> &str {
        ORACLE_REFORMULATE_ID
    }

    fn reformulate(&self, caption_a: &str, caption_b: &str) -> Result<String> {
        let a = self.parse(caption_a)?;
        let b = self.parse(caption_b)?;
        Ok(self.diff_text(&a, &b))
    }

    fn is_external(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::world::{AttributeSpec, MotifKind};
    use ndarray::Array3;

    fn fashion() -> SyntheticWorldConfig {
        SyntheticWorldConfig {
            attributes: vec![
                AttributeSpec::new("object", &["dress", "shirt"], MotifKind::Shape),
                AttributeSpec::new("color", &["red", "blue"], MotifKind::Fill),
                AttributeSpec::new("pattern", &["floral", "plain"], MotifKind::Texture),
                AttributeSpec::new("style", &["strapless", "sleeveless"], MotifKind::Proportion),
            ],
            ..Default::default()
        }
    }

    fn image(attrs: &[(&str, &str)]) -> ImageRecord {
        let mut im = ImageRecord::new("x", Array3::zeros((2, 2, 3)), Split::Index).unwrap();
        im.attributes = attrs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        im
    }

    #[test]
    fn oracle_caption_grammar() {
        let cap = OracleCaptioner::new(&fashion()).unwrap();
        let rec = caption(
            &image(&[("object", "dress"), ("color", "red"), ("style", "strapless")]),
            &cap,
        )
        .unwrap();
        assert_eq!(rec.text, "a red strapless dress");
        assert_eq!(rec.backend_id, ORACLE_CAPTION_ID);
        let rec = caption(
            &image(&[("object", "shirt"), ("color", "blue"), ("pattern", "floral")]),
            &cap,
        )
        .unwrap();
        assert_eq!(rec.text, "a blue floral shirt");
    }

    #[test]
    fn oracle_caption_is_pure() {
        let cap = OracleCaptioner::new(&fashion()).unwrap();
        let im = image(&[("object", "dress"), ("color", "red")]);
        assert_eq!(cap.caption(&im).unwrap(), cap.caption(&im).unwrap());
    }

    #[test]
    fn oracle_caption_without_head_fails() {
        let cap = OracleCaptioner::new(&fashion()).unwrap();
        assert!(matches!(
            caption(&image(&[("color", "red")]), &cap),
            Err(Error::BackendUnavailable { .. })
        ));
    }

    struct Blank;
    impl CaptionBackend for Blank {
        fn id(&self) -> &str {
            "blank"
        }
        fn caption(&self, _: &ImageRecord) -> Result<String> {
            Ok("   ".into())
        }
    }
    impl ReformulationBackend for Blank {
        fn id(&self) -> &str {
            "blank"
        }
        fn reformulate(&self, _: &str, _: &str) -> Result<String> {
            Ok("\n".into())
        }
    }

    struct Verbose;
    impl ReformulationBackend for Verbose {
        fn id(&self) -> &str {
            "verbose"
        }
        fn reformulate(&self, _: &str, _: &str) -> Result<String> {
            Ok((1..=20).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" "))
        }
    }

    #[test]
    fn blank_backend_outputs_are_errors() {
        assert!(matches!(
            caption(&image(&[]), &Blank),
            Err(Error::EmptyCaption(Some(_)))
        ));
        assert!(matches!(
            reformulate("a", "b", &Blank, 12),
            Err(Error::EmptyReformulation(_))
        ));
    }

    #[test]
    fn long_external_output_truncated_at_word_boundary() {
        let out = reformulate("a x", "a y", &Verbose, 12).unwrap();
        assert_eq!(word_count(&out), 12);
        assert!(out.ends_with("w12"));
    }

    #[test]
    fn prompt_substitutes_both_captions() {
        let p = render_reformulation_prompt("a red dress", "a blue dress").unwrap();
        assert!(p.contains("caption A: a red dress\n"));
        assert!(p.contains("caption B: a blue dress\n"));
        assert!(p.starts_with("You have two captions"));
        assert!(p.contains("concise and within 12 words"));
        assert_eq!(p, render_reformulation_prompt("a red dress", "a blue dress").unwrap());
        assert!(matches!(
            render_reformulation_prompt("", "a blue dress"),
            Err(Error::EmptyCaption(None))
        ));
    }

    #[test]
    fn oracle_diff_grammar() {
        let r = OracleReformulator::new(&fashion(), 12).unwrap();
        assert_eq!(
            reformulate("a red strapless dress", "a blue strapless dress", &r, 12).unwrap(),
            "change color from red to blue"
        );
        assert_eq!(
            reformulate("a red dress", "a red dress", &r, 12).unwrap(),
            "keep the item the same"
        );
        assert_eq!(
            r.reformulate("a red floral dress", "a blue plain dress").unwrap(),
            "change color from red to blue and pattern from floral to plain"
        );
    }

    #[test]
    fn oracle_rejects_foreign_captions() {
        let r = OracleReformulator::new(&fashion(), 12).unwrap();
        assert!(r.reformulate("a green dress", "a red dress").is_err());
        assert!(r.reformulate("red dress", "a red dress").is_err());
    }

    #[test]
    fn oracle_is_directional() {
        let r = OracleReformulator::new(&fashion(), 12).unwrap();
        let ab = r.reformulate("a red dress", "a blue dress").unwrap();
        let ba = r.reformulate("a blue dress", "a red dress").unwrap();
        assert_ne!(ab, ba);
    }
}
