//! Refinement of uncertain mentions and visual grounding.
//!
//! Refinement sends every uncertain mention of a sentence to the multimodal
//! model in one call. Replies that cannot be parsed or verdicts that do not
//! validate fall back to CONFIRM. Grounding asks for one box per mention and
//! abstains (`None`) whenever the reply is unusable.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{AnnotatedSample, BoundingBox, MentionSpan, Schema, Sentence};
use crate::error::Result;
use crate::gateway::{ContentPart, Gateway, Message, Role};
use crate::prompt::{extract_json, TemplateKind, Templates};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "mention", rename_all = "UPPERCASE")]
pub enum Verdict {
    Confirm,
    Correct(MentionSpan),
    Delete,
    Add(MentionSpan),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementOutcome {
    /// `None` only for ADD.
    pub original: Option<MentionSpan>,
    #[serde(flatten)]
    pub verdict: Verdict,
    pub rationale: String,
}

#[derive(Debug, Default)]
pub struct RefineStats {
    pub calls: AtomicU64,
    pub parse_failures: AtomicU64,
    pub rejected_verdicts: AtomicU64,
}

impl RefineStats {
    pub fn parse_failures(&self) -> u64 {
        self.parse_failures.load(Ordering::Relaxed)
    }

    pub fn rejected_verdicts(&self) -> u64 {
        self.rejected_verdicts.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Accept entities the model reports as missed.
    pub allow_add: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { allow_add: true }
    }
}

fn render_numbered(mentions: &[MentionSpan]) -> String {
    mentions
        .iter()
        .enumerate()
        .map(|(i, m)| format!("{}. \"{}\" ({})", i + 1, m.surface, m.etype.name))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Occurrence of `surface` in the sentence, preferring one that overlaps
/// `near`.
fn find_span(sentence: &Sentence, surface: &str, near: Option<&MentionSpan>) -> Option<(usize, usize)> {
    let hits = sentence.find_all(surface);
    if let Some(n) = near {
        if let Some(h) = hits.iter().find(|(s, e)| *s < n.token_end && n.token_start < *e) {
            return Some(*h);
        }
    }
    hits.first().copied()
}

/// One verdict per uncertain mention, plus ADD outcomes when enabled.
/// `confident` is only used to drop ADDs that duplicate kept predictions.
#[allow(clippy::too_many_arguments)]
pub fn refine(
    uncertain: &[MentionSpan],
    confident: &[MentionSpan],
    sample: &AnnotatedSample,
    schema: &Schema,
    gateway: &Gateway,
    templates: &Templates,
    config: &RefineConfig,
    stats: &RefineStats,
) -> Result<Vec<RefinementOutcome>> {
    if uncertain.is_empty() {
        return Ok(Vec::new());
    }
    let prompt = templates.render(
        TemplateKind::Refine,
        &[
            ("types", &schema.names().join(", ")),
            ("sentence", &sample.sentence.text),
            ("entities", &render_numbered(uncertain)),
        ],
    )?;
    let request = gateway.config().vision_request(vec![Message {
        role: Role::User,
        content: vec![ContentPart::text(prompt), ContentPart::image(sample.image.path.clone())],
    }]);
    stats.calls.fetch_add(1, Ordering::Relaxed);
    let reply = gateway.complete(&request)?;

    let confirm_all = |rationale: String| {
        uncertain
            .iter()
            .map(|m| RefinementOutcome {
                original: Some(m.clone()),
                verdict: Verdict::Confirm,
                rationale: rationale.clone(),
            })
            .collect()
    };
    let Some(v) = extract_json(&reply) else {
        log::warn!("refinement reply for `{}` unparseable; confirming all", sample.id());
        stats.parse_failures.fetch_add(1, Ordering::Relaxed);
        return Ok(confirm_all(String::new()));
    };
    let Some(items) = v.get("entities").and_then(Value::as_array) else {
        log::warn!(
            "refinement reply for `{}` lacks `entities`; confirming all",
            sample.id()
        );
        stats.parse_failures.fetch_add(1, Ordering::Relaxed);
        return Ok(confirm_all(String::new()));
    };
    let rationale = v
        .get("reasoning")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();

    let mut outcomes = Vec::with_capacity(uncertain.len());
    for (i, m) in uncertain.iter().enumerate() {
        let item = items
            .iter()
            .find(|it| it.get("id").and_then(Value::as_u64) == Some(i as u64 + 1));
        let verdict = match item {
            None => Verdict::Confirm,
            Some(it) => match parse_verdict(it, m, &sample.sentence, schema) {
                Ok(v) => v,
                Err(why) => {
                    log::warn!(
                        "refinement of \"{}\" in `{}` rejected ({why}); confirming",
                        m.surface,
                        sample.id()
                    );
                    stats.rejected_verdicts.fetch_add(1, Ordering::Relaxed);
                    Verdict::Confirm
                }
            },
        };
        outcomes.push(RefinementOutcome {
            original: Some(m.clone()),
            verdict,
            rationale: rationale.clone(),
        });
    }

    if config.allow_add {
        for a in v.get("added").and_then(Value::as_array).into_iter().flatten() {
            let (Some(text), Some(t)) = (
                a.get("text").and_then(Value::as_str),
                a.get("type").and_then(Value::as_str),
            ) else {
                stats.rejected_verdicts.fetch_add(1, Ordering::Relaxed);
                continue;
            };
            let Some(etype) = schema.get(t) else {
                stats.rejected_verdicts.fetch_add(1, Ordering::Relaxed);
                continue;
            };
            let Some((s, e)) = find_span(&sample.sentence, text, None) else {
                log::warn!("added mention \"{text}\" not found in `{}`", sample.id());
                stats.rejected_verdicts.fetch_add(1, Ordering::Relaxed);
                continue;
            };
            let mention = sample.sentence.mention(s, e, etype)?;
            if confident
                .iter()
                .chain(uncertain)
                .any(|c| c.same_span(&mention) && c.etype == mention.etype)
            {
                continue;
            }
            outcomes.push(RefinementOutcome {
                original: None,
                verdict: Verdict::Add(mention),
                rationale: rationale.clone(),
            });
        }
    }
    Ok(outcomes)
}

fn parse_verdict(
    item: &Value,
    original: &MentionSpan,
    sentence: &Sentence,
    schema: &Schema,
) -> std::result::Result<Verdict, String> {
    let verdict = item
        .get("verdict")
        .and_then(Value::as_str)
        .ok_or("missing verdict")?
        .to_ascii_uppercase();
    match verdict.as_str() {
        "CONFIRM" => Ok(Verdict::Confirm),
        "DELETE" => Ok(Verdict::Delete),
        "CORRECT" => {
            let text = item.get("text").and_then(Value::as_str).unwrap_or(&original.surface);
            let t = item.get("type").and_then(Value::as_str).unwrap_or(&original.etype.name);
            let etype = schema.get(t).ok_or_else(|| format!("type `{t}` not in schema"))?;
            let (s, e) =
                find_span(sentence, text, Some(original)).ok_or_else(|| format!("\"{text}\" not in sentence"))?;
            let m = sentence.mention(s, e, etype).map_err(|e| e.to_string())?;
            if m == *original {
                Ok(Verdict::Confirm)
            } else {
                Ok(Verdict::Correct(m))
            }
        }
        other => Err(format!("unknown verdict `{other}`")),
    }
}

/// Confident spans first, then outcomes in order; anything overlapping an
/// earlier span is dropped. Sorted by span.
pub fn merge(confident: &[MentionSpan], outcomes: &[RefinementOutcome]) -> Vec<MentionSpan> {
    let mut out: Vec<MentionSpan> = Vec::new();
    let mut push = |m: &MentionSpan| {
        if !out.iter().any(|o| o.overlaps(m)) {
            out.push(m.clone());
        }
    };
    for c in confident {
        push(c);
    }
    for o in outcomes {
        match (&o.verdict, &o.original) {
            (Verdict::Confirm, Some(m)) => push(m),
            (Verdict::Correct(m), _) | (Verdict::Add(m), _) => push(m),
            _ => {}
        }
    }
    out.sort_by_key(|m| (m.token_start, m.token_end));
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingResult {
    pub mention: MentionSpan,
    pub region: Option<BoundingBox>,
    pub raw_response: String,
}

fn render_boxes(sample: &AnnotatedSample) -> String {
    if sample.triplets.is_empty() {
        return "(none)".into();
    }
    sample
        .triplets
        .iter()
        .map(|t| {
            let b = match &t.region {
                Some(b) => format!("[{}, {}, {}, {}]", b.x_min, b.y_min, b.x_max, b.y_max),
                None => "null".into(),
            };
            format!("- \"{}\" ({}): {}", t.mention.surface, t.mention.etype.name, b)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_examples(examples: &[&AnnotatedSample]) -> String {
    let mut out = String::new();
    for (i, ex) in examples.iter().enumerate() {
        out.push_str(&format!(
            "Example {} (image {}, {}x{} pixels)\nSentence:\n{}\nEntities and boxes:\n{}\n\n",
            i + 1,
            i + 1,
            ex.image.width,
            ex.image.height,
            ex.sentence.text,
            render_boxes(ex)
        ));
    }
    out
}

/// Boxes for `entities` in `sample`'s image. Example images are attached
/// before the query image, in retrieval order.
pub fn ground(
    entities: &[MentionSpan],
    sample: &AnnotatedSample,
    examples: &[&AnnotatedSample],
    gateway: &Gateway,
    templates: &Templates,
) -> Result<Vec<GroundingResult>> {
    if entities.is_empty() {
        return Ok(Vec::new());
    }
    let prompt = templates.render(
        TemplateKind::Ground,
        &[
            ("examples", &render_examples(examples)),
            ("sentence", &sample.sentence.text),
            ("entities", &render_numbered(entities)),
            ("width", &sample.image.width.to_string()),
            ("height", &sample.image.height.to_string()),
        ],
    )?;
    let mut content = vec![ContentPart::text(prompt)];
    content.extend(examples.iter().map(|e| ContentPart::image(e.image.path.clone())));
    content.push(ContentPart::image(sample.image.path.clone()));
    let request = gateway.config().vision_request(vec![Message {
        role: Role::User,
        content,
    }]);
    let reply = gateway.complete(&request)?;

    let items = extract_json(&reply).and_then(|v| v.get("entities").and_then(Value::as_array).cloned());
    if items.is_none() {
        log::warn!("grounding reply for `{}` unparseable; abstaining", sample.id());
    }
    let items = items.unwrap_or_default();
    Ok(entities
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let item = items
                .iter()
                .find(|it| it.get("id").and_then(Value::as_u64) == Some(i as u64 + 1));
            let region = item.and_then(|it| parse_box(it.get("box")?, sample, m));
            GroundingResult {
                mention: m.clone(),
                region,
                raw_response: reply.clone(),
            }
        })
        .collect())
}

fn parse_box(v: &Value, sample: &AnnotatedSample, m: &MentionSpan) -> Option<BoundingBox> {
    if v.is_null() {
        return None;
    }
    let coords: Option<Vec<i64>> = v
        .as_array()
        .filter(|a| a.len() == 4)
        .map(|a| {
            a.iter()
                .map(|c| c.as_f64().filter(|x| x.is_finite()).map(|x| x.round() as i64))
                .collect()
        })
        .and_then(|c: Option<Vec<i64>>| c);
    let Some(c) = coords else {
        log::warn!("bad box {v} for \"{}\" in `{}`; abstaining", m.surface, sample.id());
        return None;
    };
    let b = BoundingBox::clipped([c[0], c[1], c[2], c[3]], sample.image.width, sample.image.height);
    if b.is_none() {
        log::warn!(
            "degenerate box {v} for \"{}\" in `{}`; abstaining",
            m.surface,
            sample.id()
        );
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{GmnerTriplet, ImageRef};
    use crate::gateway::{ChatRequest, FnTransport, GatewayConfig, GatewayMode, TranscriptCache, TransportError};
    use std::sync::{Arc, Mutex};

    fn schema() -> Schema {
        Schema::new(&["AIRCRAFT", "WEAPON"]).unwrap()
    }

    fn sample() -> AnnotatedSample {
        AnnotatedSample {
            sentence: Sentence::new("q", "Troops fired the MG5 machine gun at an F-35").unwrap(),
            triplets: Vec::new(),
            image: ImageRef {
                path: "q.jpg".into(),
                width: 20,
                height: 50,
            },
        }
    }

    fn mention(s: usize, e: usize, t: &str) -> MentionSpan {
        sample().sentence.mention(s, e, schema().get(t).unwrap()).unwrap()
    }

    fn gateway(reply: &'static str, seen: Option<Arc<Mutex<Vec<ChatRequest>>>>) -> Gateway {
        let t = FnTransport(move |r: &ChatRequest| -> std::result::Result<String, TransportError> {
            if let Some(s) = &seen {
                s.lock().unwrap().push(r.clone());
            }
            Ok(reply.to_string())
        });
        let cfg = GatewayConfig {
            mode: GatewayMode::Live,
            endpoint: Some("x".into()),
            ..Default::default()
        };
        Gateway::new(cfg, TranscriptCache::in_memory(), Some(Box::new(t))).unwrap()
    }

    fn run(
        reply: &'static str,
        uncertain: &[MentionSpan],
        confident: &[MentionSpan],
        stats: &RefineStats,
    ) -> Vec<RefinementOutcome> {
        refine(
            uncertain,
            confident,
            &sample(),
            &schema(),
            &gateway(reply, None),
            &Templates::default(),
            &RefineConfig::default(),
            stats,
        )
        .unwrap()
    }

    #[test]
    fn confirm_correct_delete() {
        let stats = RefineStats::default();
        let long = mention(3, 6, "WEAPON");
        let jet = mention(8, 9, "AIRCRAFT");
        let out = run(
            r#"{"reasoning": "MG5 is the weapon", "entities": [{"id": 1, "verdict": "CORRECT", "text": "MG5", "type": "WEAPON"}, {"id": 2, "verdict": "DELETE"}]}"#,
            &[long.clone(), jet.clone()],
            &[],
            &stats,
        );
        assert_eq!(out[0].verdict, Verdict::Correct(mention(3, 4, "WEAPON")));
        assert_eq!(out[1].verdict, Verdict::Delete);
        assert_eq!(out[0].rationale, "MG5 is the weapon");
        let merged = merge(&[], &out);
        assert_eq!(merged, vec![mention(3, 4, "WEAPON")]);

        let out = run(
            r#"{"entities": [{"id": 1, "verdict": "CONFIRM"}]}"#,
            &[mention(3, 4, "WEAPON")],
            &[],
            &stats,
        );
        assert_eq!(out[0].verdict, Verdict::Confirm);
    }

    #[test]
    fn invalid_corrections_and_garbage_fall_back() {
        let stats = RefineStats::default();
        let m = mention(3, 4, "WEAPON");
        let out = run(
            r#"{"entities": [{"id": 1, "verdict": "CORRECT", "text": "M249 SAW", "type": "WEAPON"}]}"#,
            std::slice::from_ref(&m),
            &[],
            &stats,
        );
        assert_eq!(out[0].verdict, Verdict::Confirm);
        assert_eq!(stats.rejected_verdicts(), 1);
        let out = run("I think it is a gun", std::slice::from_ref(&m), &[], &stats);
        assert_eq!(out[0].verdict, Verdict::Confirm);
        assert_eq!(stats.parse_failures(), 1);
    }

    #[test]
    fn adds_validated_and_deduplicated() {
        let stats = RefineStats::default();
        let out = run(
            r#"{"entities": [], "added": [{"text": "F-35", "type": "AIRCRAFT"}, {"text": "MG5", "type": "WEAPON"}, {"text": "B-2", "type": "AIRCRAFT"}]}"#,
            &[mention(0, 1, "WEAPON")],
            &[mention(3, 4, "WEAPON")],
            &stats,
        );
        let adds: Vec<_> = out.iter().filter(|o| o.original.is_none()).collect();
        assert_eq!(adds.len(), 1);
        assert_eq!(adds[0].verdict, Verdict::Add(mention(8, 9, "AIRCRAFT")));
        let no_add = refine(
            &[mention(0, 1, "WEAPON")],
            &[],
            &sample(),
            &schema(),
            &gateway(
                r#"{"entities": [], "added": [{"text": "F-35", "type": "AIRCRAFT"}]}"#,
                None,
            ),
            &Templates::default(),
            &RefineConfig { allow_add: false },
            &stats,
        )
        .unwrap();
        assert_eq!(no_add.len(), 1);
    }

    #[test]
    fn merge_rules() {
        let c = vec![mention(8, 9, "AIRCRAFT"), mention(3, 4, "WEAPON")];
        assert_eq!(merge(&c, &[]), vec![mention(3, 4, "WEAPON"), mention(8, 9, "AIRCRAFT")]);
        let add_overlap = RefinementOutcome {
            original: None,
            verdict: Verdict::Add(mention(3, 6, "WEAPON")),
            rationale: String::new(),
        };
        let deleted = RefinementOutcome {
            original: Some(mention(0, 1, "WEAPON")),
            verdict: Verdict::Delete,
            rationale: String::new(),
        };
        let once = merge(&c, &[add_overlap, deleted]);
        assert_eq!(once, merge(&c, &[]));
        assert_eq!(merge(&once, &[]), once);
    }

    #[test]
    fn grounding_clips_abstains_and_orders_images() {
        let ents = [mention(3, 4, "WEAPON"), mention(8, 9, "AIRCRAFT")];
        let seen = Arc::new(Mutex::new(Vec::new()));
        let g = gateway(
            r#"{"entities": [{"id": 1, "box": [-5, 10, 30, 40]}, {"id": 2, "box": null}]}"#,
            Some(seen.clone()),
        );
        let ex = AnnotatedSample {
            sentence: Sentence::new("e", "An F-15").unwrap(),
            triplets: Vec::new(),
            image: ImageRef {
                path: "e.jpg".into(),
                width: 5,
                height: 5,
            },
        };
        let out = ground(&ents, &sample(), &[&ex], &g, &Templates::default()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].region, BoundingBox::new(0, 10, 20, 40));
        assert_eq!(out[1].region, None);
        let req = &seen.lock().unwrap()[0];
        let images: Vec<_> = req.messages[0]
            .content
            .iter()
            .filter_map(|p| match p {
                ContentPart::ImagePath { path } => Some(path.clone()),
                _ => None,
            })
            .collect();
        assert_eq!(images, ["e.jpg", "q.jpg"]);

        let g = gateway("the jet is top left", None);
        let out = ground(&ents, &sample(), &[], &g, &Templates::default()).unwrap();
        assert!(out.iter().all(|r| r.region.is_none()));
        let g = gateway(r#"{"entities": [{"id": 1, "box": [30, 10, 40, 40]}]}"#, None);
        assert_eq!(
            ground(&ents, &sample(), &[], &g, &Templates::default()).unwrap()[0].region,
            None
        );
    }

    #[test]
    fn example_rendering_lists_boxes() {
        let s = Sentence::new("e", "An F-15 overhead").unwrap();
        let ex = AnnotatedSample {
            triplets: vec![GmnerTriplet {
                mention: s.mention(1, 2, schema().get("AIRCRAFT").unwrap()).unwrap(),
                region: BoundingBox::new(1, 2, 3, 4),
            }],
            sentence: s,
            image: ImageRef {
                path: "e.jpg".into(),
                width: 5,
                height: 5,
            },
        };
        let text = render_examples(&[&ex]);
        assert!(text.contains("\"F-15\" (AIRCRAFT): [1, 2, 3, 4]"));
    }
}
