//! Guideline table maintenance and LLM data synthesis.
//!
//! The guideline table holds one row per entity type: a description and a
//! capped list of negative descriptions distilled from annotation mistakes.
//! It is folded over the annotated set in file order. Synthesized samples
//! are text-only and go through reject-only validation; nothing is repaired.

use std::collections::{HashMap, HashSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{AnnotatedSample, EntityRecord, EntityType, MentionSpan, Schema, Sentence};
use crate::error::{Error, Result};
use crate::gateway::{ContentPart, Gateway, Message, Role};
use crate::prompt::{extract_json, TemplateKind, Templates};

pub const NEG_CAP: usize = 10;
pub const YIELD_WARNING: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidelineRow {
    #[serde(rename = "type")]
    pub typ: String,
    pub des: String,
    pub neg: Vec<String>,
}

impl GuidelineRow {
    /// Appends a negative description, skipping duplicates and evicting the
    /// oldest entry past the cap.
    pub fn push_negative(&mut self, description: &str) -> bool {
        let d = description.trim();
        if d.is_empty() || self.neg.iter().any(|n| n == d) {
            return false;
        }
        self.neg.push(d.to_string());
        if self.neg.len() > NEG_CAP {
            self.neg.remove(0);
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidelineTable {
    pub rows: Vec<GuidelineRow>,
    pub version: u64,
}

impl GuidelineTable {
    pub fn new(schema: &Schema) -> Self {
        GuidelineTable {
            rows: schema
                .names()
                .into_iter()
                .map(|typ| GuidelineRow {
                    typ,
                    des: String::new(),
                    neg: Vec::new(),
                })
                .collect(),
            version: 0,
        }
    }

    /// One row per schema type, in schema order.
    pub fn check(&self, schema: &Schema) -> Result<()> {
        let names: Vec<&str> = self.rows.iter().map(|r| r.typ.as_str()).collect();
        if names != schema.names().iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Config {
                field: "guideline.rows".into(),
                message: format!("rows {names:?} do not match schema {:?}", schema.names()),
            });
        }
        Ok(())
    }

    pub fn row(&self, typ: &str) -> Option<&GuidelineRow> {
        self.rows.iter().find(|r| r.typ == typ)
    }

    fn row_mut(&mut self, typ: &str) -> Option<&mut GuidelineRow> {
        self.rows.iter_mut().find(|r| r.typ == typ)
    }

    /// Prompt rendering.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let des = if r.des.is_empty() {
                "(no description yet)"
            } else {
                &r.des
            };
            out.push_str(&format!("- {}: {}\n", r.typ, des));
            for n in &r.neg {
                out.push_str(&format!("    avoid: {n}\n"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LlmMention {
    pub text: String,
    #[serde(rename = "type")]
    pub etype: String,
}

pub fn render_entities(mentions: &[(String, String)]) -> String {
    if mentions.is_empty() {
        return "(none)".into();
    }
    mentions
        .iter()
        .map(|(s, t)| format!("- \"{s}\" ({t})"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn gold_pairs(sample: &AnnotatedSample) -> Vec<(String, String)> {
    sample
        .triplets
        .iter()
        .map(|t| (t.mention.surface.clone(), t.mention.etype.name.clone()))
        .collect()
}

fn mentions_field(v: &Value, key: &str) -> Option<Vec<LlmMention>> {
    serde_json::from_value(v.get(key)?.clone()).ok()
}

/// One annotation mistake found by diffing LLM tags against gold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TagError {
    /// Right type, wrong extent.
    Boundary {
        predicted: String,
        gold: String,
        etype: String,
    },
    /// Right extent, wrong type.
    WrongType {
        surface: String,
        predicted: String,
        gold: String,
    },
    Spurious {
        surface: String,
        etype: String,
    },
}

impl TagError {
    /// Row the negative belongs to, and its text.
    pub fn negative(&self) -> (&str, String) {
        match self {
            TagError::Boundary { predicted, gold, etype } if predicted.contains(gold.as_str()) => (
                etype,
                format!("\"{predicted}\" over-extends the mention; annotate only \"{gold}\""),
            ),
            TagError::Boundary { predicted, gold, etype } => (
                etype,
                format!("\"{predicted}\" is incomplete; annotate the full mention \"{gold}\""),
            ),
            TagError::WrongType {
                surface,
                predicted,
                gold,
            } => (predicted, format!("\"{surface}\" is a {gold}, not a {predicted}")),
            TagError::Spurious { surface, etype } => (etype, format!("\"{surface}\" is not a {etype} mention")),
        }
    }
}

/// False positives of `predicted` against `gold`, classified.
pub fn diff_tags(gold: &[(String, String)], predicted: &[LlmMention]) -> Vec<TagError> {
    let mut unmatched: Vec<(String, String)> = gold.to_vec();
    let mut fps = Vec::new();
    for p in predicted {
        if let Some(i) = unmatched.iter().position(|(s, t)| *s == p.text && *t == p.etype) {
            unmatched.remove(i);
        } else {
            fps.push(p);
        }
    }
    fps.into_iter()
        .map(|p| {
            if let Some((_, t)) = gold.iter().find(|(s, _)| *s == p.text) {
                return TagError::WrongType {
                    surface: p.text.clone(),
                    predicted: p.etype.clone(),
                    gold: t.clone(),
                };
            }
            let nested = gold
                .iter()
                .find(|(s, t)| *t == p.etype && (p.text.contains(s.as_str()) || s.contains(p.text.as_str())));
            match nested {
                Some((s, _)) => TagError::Boundary {
                    predicted: p.text.clone(),
                    gold: s.clone(),
                    etype: p.etype.clone(),
                },
                None => TagError::Spurious {
                    surface: p.text.clone(),
                    etype: p.etype.clone(),
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidelineUpdate {
    pub table: GuidelineTable,
    pub accepted: bool,
    pub errors: Vec<TagError>,
}

/// Two-step update from one annotated sample: tag-and-compare for
/// negatives, then a description refresh. Either reply failing to parse
/// leaves the table untouched.
pub fn update_guideline(
    table: &GuidelineTable,
    sample: &AnnotatedSample,
    schema: &Schema,
    gateway: &Gateway,
    templates: &Templates,
) -> Result<GuidelineUpdate> {
    let gold = gold_pairs(sample);
    let unchanged = |errors| GuidelineUpdate {
        table: table.clone(),
        accepted: false,
        errors,
    };

    let neg_prompt = templates.render(
        TemplateKind::GuidelineNeg,
        &[
            ("guideline", &table.render()),
            ("sentence", &sample.sentence.text),
            ("entities", &render_entities(&gold)),
        ],
    )?;
    let reply = gateway.complete(&user_request(gateway, neg_prompt))?;
    let Some(v) = extract_json(&reply) else {
        log::warn!("guideline update for `{}`: unparseable NER reply", sample.id());
        return Ok(unchanged(Vec::new()));
    };
    let Some(predicted) = mentions_field(&v, "predictions") else {
        log::warn!("guideline update for `{}`: reply lacks `predictions`", sample.id());
        return Ok(unchanged(Vec::new()));
    };
    let errors = diff_tags(&gold, &predicted);

    let mut next = table.clone();
    if !errors.is_empty() {
        let offered: Vec<(String, String)> = v
            .get("negatives")
            .and_then(Value::as_array)
            .map(|a| {
                a.iter()
                    .filter_map(|n| {
                        Some((
                            n.get("type")?.as_str()?.to_string(),
                            n.get("description")?.as_str()?.to_string(),
                        ))
                    })
                    .filter(|(t, d)| schema.get(t).is_some() && !d.trim().is_empty())
                    .collect()
            })
            .unwrap_or_default();
        let negatives = if offered.is_empty() {
            errors
                .iter()
                .map(|e| {
                    let (t, d) = e.negative();
                    (t.to_string(), d)
                })
                .collect()
        } else {
            offered
        };
        for (t, d) in negatives {
            match next.row_mut(&t) {
                Some(row) => {
                    row.push_negative(&d);
                }
                None => log::warn!("negative for unknown type `{t}` dropped"),
            }
        }
    }

    let des_prompt = templates.render(
        TemplateKind::GuidelineDes,
        &[
            ("guideline", &next.render()),
            ("sentence", &sample.sentence.text),
            ("entities", &render_entities(&gold)),
        ],
    )?;
    let reply = gateway.complete(&user_request(gateway, des_prompt))?;
    let descriptions = extract_json(&reply).and_then(|v| v.get("descriptions").and_then(Value::as_array).cloned());
    let Some(descriptions) = descriptions else {
        log::warn!("guideline update for `{}`: unparseable description reply", sample.id());
        return Ok(unchanged(errors));
    };
    for d in descriptions {
        let (Some(t), Some(text)) = (
            d.get("type").and_then(Value::as_str),
            d.get("description").and_then(Value::as_str),
        ) else {
            continue;
        };
        if let Some(row) = next.row_mut(t) {
            if !text.trim().is_empty() {
                row.des = text.trim().to_string();
            }
        }
    }
    next.version = table.version + 1;
    Ok(GuidelineUpdate {
        table: next,
        accepted: true,
        errors,
    })
}

/// Folds [`update_guideline`] over `samples` in order.
pub fn build_guideline(
    initial: GuidelineTable,
    samples: &[AnnotatedSample],
    schema: &Schema,
    gateway: &Gateway,
    templates: &Templates,
) -> Result<GuidelineTable> {
    let mut table = initial;
    for s in samples {
        table = update_guideline(&table, s, schema, gateway, templates)?.table;
    }
    Ok(table)
}

fn user_request(gateway: &Gateway, prompt: String) -> crate::gateway::ChatRequest {
    gateway.config().text_request(vec![Message {
        role: Role::User,
        content: vec![ContentPart::text(prompt)],
    }])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Strategy {
    Substitution,
    Paraphrase,
}

impl Strategy {
    fn instructions(self) -> &'static str {
        match self {
            Strategy::Substitution => "Entity-level substitution. Keep the seed sentence word for word except for the entity mentions. Replace each mention with a different mention of the same type that fits the guideline.",
            Strategy::Paraphrase => "Sentence-level paraphrasing. Rewrite the wording of the seed sentence while keeping every entity mention exactly as written, with the same type.",
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Strategy::Substitution => "sub",
            Strategy::Paraphrase => "para",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "substitution" => Ok(Strategy::Substitution),
            "paraphrase" => Ok(Strategy::Paraphrase),
            other => Err(Error::Config {
                field: "synthesis.strategies".into(),
                message: format!("unknown strategy `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesizedSample {
    pub sentence: Sentence,
    pub entities: Vec<MentionSpan>,
    pub provenance: Strategy,
    pub source_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    SurfaceMismatch,
    TypeNotInSchema,
    EntityLost,
    Duplicate,
    OverlappingSpans,
    EmptySentence,
    StructureChanged,
    MalformedReply,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::SurfaceMismatch => "surface mismatch",
            RejectReason::TypeNotInSchema => "type not in schema",
            RejectReason::EntityLost => "entity lost",
            RejectReason::Duplicate => "duplicate",
            RejectReason::OverlappingSpans => "overlapping spans",
            RejectReason::EmptySentence => "empty sentence",
            RejectReason::StructureChanged => "structure changed",
            RejectReason::MalformedReply => "malformed reply",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

/// Checks a sample on its own; with a seed, also the strategy contract.
pub fn validate_synthesized(sample: &SynthesizedSample, schema: &Schema, seed: Option<&AnnotatedSample>) -> Verdict {
    use RejectReason::*;
    if sample.sentence.text.trim().is_empty() || sample.sentence.is_empty() {
        return Verdict::Reject(EmptySentence);
    }
    if sample.entities.iter().any(|m| schema.get(&m.etype.name).is_none()) {
        return Verdict::Reject(TypeNotInSchema);
    }
    for m in &sample.entities {
        if m.token_start >= m.token_end
            || m.token_end > sample.sentence.len()
            || sample.sentence.span_text(m.token_start, m.token_end) != m.surface
        {
            return Verdict::Reject(SurfaceMismatch);
        }
    }
    for (i, a) in sample.entities.iter().enumerate() {
        if sample.entities[i + 1..].iter().any(|b| a.overlaps(b)) {
            return Verdict::Reject(OverlappingSpans);
        }
    }
    if let Some(seed) = seed {
        match sample.provenance {
            Strategy::Paraphrase => {
                let mut want = gold_pairs(seed);
                let mut got: Vec<(String, String)> = sample
                    .entities
                    .iter()
                    .map(|m| (m.surface.clone(), m.etype.name.clone()))
                    .collect();
                want.sort();
                got.sort();
                if want != got {
                    return Verdict::Reject(EntityLost);
                }
            }
            Strategy::Substitution => {
                if sample.entities.len() != seed.triplets.len() {
                    return Verdict::Reject(EntityLost);
                }
                if slots(&seed.sentence, &seed.mentions()) != slots(&sample.sentence, &sample.entities) {
                    return Verdict::Reject(StructureChanged);
                }
            }
        }
    }
    Verdict::Accept
}

#[derive(PartialEq, Eq, Debug)]
enum Slot<'a> {
    Token(&'a str),
    Entity(&'a str),
}

/// Token sequence with each mention collapsed to a typed slot.
fn slots<'a>(sentence: &'a Sentence, mentions: &'a [MentionSpan]) -> Vec<Slot<'a>> {
    let mut sorted: Vec<&MentionSpan> = mentions.iter().collect();
    sorted.sort_by_key(|m| m.token_start);
    let mut out = Vec::new();
    let mut i = 0;
    let mut next = sorted.into_iter().peekable();
    while i < sentence.len() {
        match next.peek() {
            Some(m) if m.token_start == i => {
                out.push(Slot::Entity(&m.etype.name));
                i = m.token_end.max(i + 1);
                next.next();
            }
            _ => {
                out.push(Slot::Token(&sentence.tokens[i].surface));
                i += 1;
            }
        }
    }
    out
}

/// Builds a sample from an LLM candidate, re-locating spans by string
/// search. Repeated surfaces take successive free occurrences.
pub fn locate(
    id: String,
    text: &str,
    entities: &[LlmMention],
    schema: &Schema,
    provenance: Strategy,
    source_id: &str,
) -> std::result::Result<SynthesizedSample, RejectReason> {
    let sentence = Sentence::new(id, text).map_err(|_| RejectReason::EmptySentence)?;
    let mut used: Vec<(usize, usize)> = Vec::new();
    let mut spans = Vec::with_capacity(entities.len());
    for e in entities {
        let hits = sentence.find_all(&e.text);
        let Some(&first) = hits.first() else {
            return Err(RejectReason::SurfaceMismatch);
        };
        let pick = hits.iter().copied().find(|h| !used.contains(h)).unwrap_or(first);
        used.push(pick);
        let etype = schema.get(&e.etype).cloned().unwrap_or(EntityType {
            name: e.etype.clone(),
            id: usize::MAX,
        });
        spans.push(
            sentence
                .mention(pick.0, pick.1, &etype)
                .map_err(|_| RejectReason::SurfaceMismatch)?,
        );
    }
    Ok(SynthesizedSample {
        sentence,
        entities: spans,
        provenance,
        source_id: source_id.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub source_id: String,
    pub strategy: Strategy,
    pub text: Option<String>,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynthesisOutcome {
    pub accepted: Vec<SynthesizedSample>,
    pub rejected: Vec<Rejection>,
}

impl SynthesisOutcome {
    pub fn generated(&self) -> usize {
        self.accepted.len() + self.rejected.len()
    }

    pub fn yield_rate(&self) -> f64 {
        if self.generated() == 0 {
            0.0
        } else {
            self.accepted.len() as f64 / self.generated() as f64
        }
    }
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Generates `count_per_seed` samples per seed and validates them. Texts in
/// `existing` (normalized for whitespace) and earlier accepted outputs count
/// as duplicates.
#[allow(clippy::too_many_arguments)]
pub fn synthesize(
    seeds: &[AnnotatedSample],
    table: &GuidelineTable,
    strategy: Strategy,
    count_per_seed: usize,
    schema: &Schema,
    gateway: &Gateway,
    templates: &Templates,
    existing: &HashSet<String>,
) -> Result<SynthesisOutcome> {
    if count_per_seed == 0 {
        return Err(Error::Config {
            field: "synthesis.count_per_seed".into(),
            message: "must be at least 1".into(),
        });
    }
    if table.rows.is_empty() {
        return Err(Error::Config {
            field: "guideline.rows".into(),
            message: "guideline table is empty".into(),
        });
    }
    let guideline = table.render();
    let count = count_per_seed.to_string();
    let replies: Vec<String> = seeds
        .par_iter()
        .map(|seed| {
            let prompt = templates.render(
                TemplateKind::Synthesize,
                &[
                    ("guideline", &guideline),
                    ("sentence", &seed.sentence.text),
                    ("entities", &render_entities(&gold_pairs(seed))),
                    ("strategy", strategy.instructions()),
                    ("count", &count),
                ],
            )?;
            gateway.complete(&user_request(gateway, prompt))
        })
        .collect::<Result<_>>()?;

    let mut seen: HashSet<String> = existing.iter().map(|t| normalize(t)).collect();
    let mut out = SynthesisOutcome::default();
    for (seed, reply) in seeds.iter().zip(&replies) {
        let reject = |text: Option<String>, reason| Rejection {
            source_id: seed.id().to_string(),
            strategy,
            text,
            reason,
        };
        let candidates = extract_json(reply).and_then(|v| v.get("samples").and_then(Value::as_array).cloned());
        let Some(candidates) = candidates else {
            log::warn!("synthesis for `{}`: malformed reply", seed.id());
            out.rejected.push(reject(None, RejectReason::MalformedReply));
            continue;
        };
        for (j, c) in candidates.iter().take(count_per_seed).enumerate() {
            let text = c.get("sentence").and_then(Value::as_str);
            let entities = mentions_field(c, "entities");
            let (Some(text), Some(entities)) = (text, entities) else {
                out.rejected.push(reject(None, RejectReason::MalformedReply));
                continue;
            };
            let id = format!("{}-{}{}", seed.id(), strategy.tag(), j);
            let sample = match locate(id, text, &entities, schema, strategy, seed.id()) {
                Ok(s) => s,
                Err(reason) => {
                    out.rejected.push(reject(Some(text.to_string()), reason));
                    continue;
                }
            };
            if let Verdict::Reject(reason) = validate_synthesized(&sample, schema, Some(seed)) {
                out.rejected.push(reject(Some(text.to_string()), reason));
                continue;
            }
            if !seen.insert(normalize(text)) {
                out.rejected
                    .push(reject(Some(text.to_string()), RejectReason::Duplicate));
                continue;
            }
            out.accepted.push(sample);
        }
    }
    if out.generated() > 0 && out.yield_rate() < YIELD_WARNING {
        log::warn!(
            "{:?} synthesis yield {:.0}% ({} of {}) is below {:.0}%",
            strategy,
            100.0 * out.yield_rate(),
            out.accepted.len(),
            out.generated(),
            100.0 * YIELD_WARNING
        );
    }
    Ok(out)
}

/// Wire form of one synthesized sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRecord {
    pub id: String,
    pub text: String,
    pub entities: Vec<EntityRecord>,
    pub provenance: Strategy,
    pub source_id: String,
}

impl SynthesizedSample {
    pub fn to_record(&self) -> SynthRecord {
        SynthRecord {
            id: self.sentence.id.clone(),
            text: self.sentence.text.clone(),
            entities: self
                .entities
                .iter()
                .map(|m| {
                    let (cs, ce) = self.sentence.char_range(m.token_start, m.token_end);
                    EntityRecord {
                        char_start: cs,
                        char_end: ce,
                        etype: m.etype.name.clone(),
                        region: None,
                        text: Some(m.surface.clone()),
                    }
                })
                .collect(),
            provenance: self.provenance,
            source_id: self.source_id.clone(),
        }
    }

    pub fn from_record(rec: &SynthRecord, schema: &Schema) -> Result<Self> {
        let sentence = Sentence::new(rec.id.clone(), rec.text.clone())?;
        let mut entities = Vec::with_capacity(rec.entities.len());
        for e in &rec.entities {
            let etype = schema.get(&e.etype).ok_or_else(|| Error::Config {
                field: format!("synth[{}].type", rec.id),
                message: format!("type `{}` not in schema", e.etype),
            })?;
            let (s, t) = sentence.token_span(e.char_start, e.char_end).ok_or_else(|| {
                Error::IdMismatch(format!(
                    "span {}..{} of `{}` is not token aligned",
                    e.char_start, e.char_end, rec.id
                ))
            })?;
            entities.push(sentence.mention(s, t, etype)?);
        }
        Ok(SynthesizedSample {
            sentence,
            entities,
            provenance: rec.provenance,
            source_id: rec.source_id.clone(),
        })
    }
}

/// Counts of accepted samples per (source, strategy), for reporting.
pub fn accepted_by_source(samples: &[SynthesizedSample]) -> HashMap<(String, Strategy), usize> {
    let mut m = HashMap::new();
    for s in samples {
        *m.entry((s.source_id.clone(), s.provenance)).or_insert(0) += 1;
    }
    m
}
