//! Domain types shared by every stage, and the JSON-lines dataset loader.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{self, Token};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityType {
    pub name: String,
    pub id: usize,
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Ordered set of entity types; ids are dense from 0 in declaration order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    types: Vec<EntityType>,
}

impl Schema {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut types = Vec::with_capacity(names.len());
        for (id, name) in names.iter().enumerate() {
            let name = name.as_ref().trim();
            if name.is_empty() {
                return Err(Error::Config {
                    field: "schema".into(),
                    message: "empty entity type name".into(),
                });
            }
            if !seen.insert(name.to_string()) {
                return Err(Error::Config {
                    field: "schema".into(),
                    message: format!("duplicate entity type `{name}`"),
                });
            }
            types.push(EntityType {
                name: name.to_string(),
                id,
            });
        }
        if types.is_empty() {
            return Err(Error::Config {
                field: "schema".into(),
                message: "schema has no entity types".into(),
            });
        }
        Ok(Schema { types })
    }

    pub fn types(&self) -> &[EntityType] {
        &self.types
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&EntityType> {
        self.types.iter().find(|t| t.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.types.iter().map(|t| t.name.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub id: String,
    pub text: String,
    pub tokens: Vec<Token>,
}

impl Sentence {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let tokens = text::tokenize(&text)?;
        Ok(Sentence {
            id: id.into(),
            text,
            tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Text covered by tokens `start..end`, including interior whitespace.
    pub fn span_text(&self, start: usize, end: usize) -> String {
        let cs = self.tokens[start].char_start;
        let ce = self.tokens[end - 1].char_end;
        text::char_slice(&self.text, cs, ce)
    }

    pub fn char_range(&self, start: usize, end: usize) -> (usize, usize) {
        (self.tokens[start].char_start, self.tokens[end - 1].char_end)
    }

    /// Maps a char span onto the token span it covers exactly.
    pub fn token_span(&self, char_start: usize, char_end: usize) -> Option<(usize, usize)> {
        let start = self.tokens.iter().position(|t| t.char_start == char_start)?;
        let end = self.tokens[start..]
            .iter()
            .position(|t| t.char_end == char_end)
            .map(|i| start + i + 1)?;
        Some((start, end))
    }

    /// Every token-aligned occurrence of `surface`, in order.
    pub fn find_all(&self, surface: &str) -> Vec<(usize, usize)> {
        let Ok(needle) = text::tokenize(surface) else {
            return Vec::new();
        };
        let n = needle.len();
        if n == 0 || n > self.tokens.len() {
            return Vec::new();
        }
        (0..=self.tokens.len() - n)
            .filter(|&s| {
                self.tokens[s..s + n]
                    .iter()
                    .zip(&needle)
                    .all(|(a, b)| a.surface == b.surface)
            })
            .filter(|&s| self.span_text(s, s + n) == surface)
            .map(|s| (s, s + n))
            .collect()
    }

    pub fn mention(&self, start: usize, end: usize, etype: &EntityType) -> Result<MentionSpan> {
        if start >= end || end > self.tokens.len() {
            return Err(Error::SpanOutOfRange {
                start,
                end,
                len: self.tokens.len(),
            });
        }
        Ok(MentionSpan {
            sentence_id: self.id.clone(),
            token_start: start,
            token_end: end,
            surface: self.span_text(start, end),
            etype: etype.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MentionSpan {
    pub sentence_id: String,
    pub token_start: usize,
    pub token_end: usize,
    pub surface: String,
    pub etype: EntityType,
}

impl MentionSpan {
    pub fn overlaps(&self, other: &MentionSpan) -> bool {
        self.token_start < other.token_end && other.token_start < self.token_end
    }

    pub fn same_span(&self, other: &MentionSpan) -> bool {
        self.token_start == other.token_start && self.token_end == other.token_end
    }

    pub fn len(&self) -> usize {
        self.token_end - self.token_start
    }

    pub fn is_empty(&self) -> bool {
        self.token_end == self.token_start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: i32,
    pub y_min: i32,
    pub x_max: i32,
    pub y_max: i32,
}

impl BoundingBox {
    pub fn new(x_min: i32, y_min: i32, x_max: i32, y_max: i32) -> Option<Self> {
        (x_min < x_max && y_min < y_max).then_some(BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Clips raw coordinates to a `width`×`height` image; `None` if nothing is left.
    pub fn clipped(raw: [i64; 4], width: u32, height: u32) -> Option<Self> {
        let cx = |v: i64| v.clamp(0, width as i64) as i32;
        let cy = |v: i64| v.clamp(0, height as i64) as i32;
        BoundingBox::new(cx(raw[0]), cy(raw[1]), cx(raw[2]), cy(raw[3]))
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) as f64 * (self.y_max - self.y_min) as f64
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.x_min >= 0 && self.y_min >= 0 && self.x_max <= width as i32 && self.y_max <= height as i32
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GmnerTriplet {
    pub mention: MentionSpan,
    /// `None` when the entity is not depicted in the image.
    pub region: Option<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    pub sentence: Sentence,
    pub triplets: Vec<GmnerTriplet>,
    pub image: ImageRef,
}

impl AnnotatedSample {
    pub fn id(&self) -> &str {
        &self.sentence.id
    }

    pub fn mentions(&self) -> Vec<MentionSpan> {
        self.triplets.iter().map(|t| t.mention.clone()).collect()
    }

    pub fn region_count(&self) -> usize {
        self.triplets.iter().filter(|t| t.region.is_some()).count()
    }

    /// Same sentence and image with the gold annotations removed.
    pub fn without_gold(&self) -> AnnotatedSample {
        AnnotatedSample {
            sentence: self.sentence.clone(),
            triplets: Vec::new(),
            image: self.image.clone(),
        }
    }

    pub fn to_record(&self) -> DatasetRecord {
        DatasetRecord {
            id: Some(self.sentence.id.clone()),
            text: self.sentence.text.clone(),
            image: self.image.clone(),
            entities: self
                .triplets
                .iter()
                .map(|t| EntityRecord::from_triplet(&self.sentence, t))
                .collect(),
        }
    }
}

/// Wire form of one dataset line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub text: String,
    pub image: ImageRef,
    pub entities: Vec<EntityRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityRecord {
    pub char_start: usize,
    pub char_end: usize,
    #[serde(rename = "type")]
    pub etype: String,
    #[serde(rename = "box")]
    pub region: Option<BoxRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl EntityRecord {
    pub fn from_triplet(sentence: &Sentence, t: &GmnerTriplet) -> Self {
        let (cs, ce) = sentence.char_range(t.mention.token_start, t.mention.token_end);
        EntityRecord {
            char_start: cs,
            char_end: ce,
            etype: t.mention.etype.name.clone(),
            region: t.region.map(BoxRecord::from),
            text: Some(t.mention.surface.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    pub x_min: i64,
    pub y_min: i64,
    pub x_max: i64,
    pub y_max: i64,
}

impl From<BoundingBox> for BoxRecord {
    fn from(b: BoundingBox) -> Self {
        BoxRecord {
            x_min: b.x_min as i64,
            y_min: b.y_min as i64,
            x_max: b.x_max as i64,
            y_max: b.y_max as i64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    #[default]
    JsonLines,
}

impl std::str::FromStr for DatasetFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" | "json-lines" => Ok(DatasetFormat::JsonLines),
            other => Err(Error::Config {
                field: "format".into(),
                message: format!("unknown dataset format `{other}`"),
            }),
        }
    }
}

pub fn load_dataset(path: &Path, format: DatasetFormat, schema: &Schema) -> Result<Vec<AnnotatedSample>> {
    let DatasetFormat::JsonLines = format;
    let raw = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(line).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: line_no,
            field: serde_field(&e),
            message: e.to_string(),
        })?;
        let id = record.id.clone().unwrap_or_else(|| line_no.to_string());
        let sample = sample_from_record(&record, id, schema).map_err(|e| e.locate(path, line_no))?;
        if !ids.insert(sample.sentence.id.clone()) {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                line: line_no,
                field: "id".into(),
                message: format!("duplicate sample id `{}`", sample.sentence.id),
            });
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// Record validation failure before it is tied to a file location.
#[derive(Debug)]
pub enum RecordError {
    Field { field: String, message: String },
    Alignment { char_start: usize, char_end: usize },
}

impl RecordError {
    fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        RecordError::Field {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn locate(self, path: &Path, line: usize) -> Error {
        match self {
            RecordError::Field { field, message } => Error::Schema {
                path: path.to_path_buf(),
                line,
                field,
                message,
            },
            RecordError::Alignment { char_start, char_end } => Error::SpanAlignment {
                path: path.to_path_buf(),
                line,
                char_start,
                char_end,
            },
        }
    }
}

pub fn sample_from_record(
    record: &DatasetRecord,
    id: String,
    schema: &Schema,
) -> std::result::Result<AnnotatedSample, RecordError> {
    if id.is_empty() {
        return Err(RecordError::field("id", "empty id"));
    }
    let sentence = Sentence::new(id.clone(), record.text.clone())
        .map_err(|_| RecordError::field("text", format!("record `{id}` has empty text")))?;
    let image = record.image.clone();
    if image.width == 0 || image.height == 0 {
        return Err(RecordError::field(
            "image",
            format!("record `{id}` has zero image dimensions"),
        ));
    }
    let mut triplets: Vec<GmnerTriplet> = Vec::with_capacity(record.entities.len());
    for (k, ent) in record.entities.iter().enumerate() {
        let etype = schema.get(&ent.etype).ok_or_else(|| {
            RecordError::field(
                format!("entities[{k}].type"),
                format!("record `{id}`: type `{}` not in schema", ent.etype),
            )
        })?;
        if ent.char_start >= ent.char_end {
            return Err(RecordError::field(
                format!("entities[{k}].char_end"),
                format!("record `{id}`: empty or reversed char span"),
            ));
        }
        let (ts, te) = sentence
            .token_span(ent.char_start, ent.char_end)
            .ok_or(RecordError::Alignment {
                char_start: ent.char_start,
                char_end: ent.char_end,
            })?;
        let region = match ent.region {
            None => None,
            Some(b) => {
                if b.x_max <= b.x_min || b.y_max <= b.y_min {
                    return Err(RecordError::field(
                        format!("entities[{k}].box"),
                        format!("record `{id}`: degenerate box {b:?}"),
                    ));
                }
                Some(
                    BoundingBox::clipped([b.x_min, b.y_min, b.x_max, b.y_max], image.width, image.height).ok_or_else(
                        || {
                            RecordError::field(
                                format!("entities[{k}].box"),
                                format!("record `{id}`: box {b:?} lies outside the image"),
                            )
                        },
                    )?,
                )
            }
        };
        let mention = sentence.mention(ts, te, etype).expect("aligned span is in range");
        if let Some(prev) = triplets.iter().find(|t| t.mention.overlaps(&mention)) {
            return Err(RecordError::field(
                format!("entities[{k}]"),
                format!(
                    "record `{id}`: span {ts}..{te} overlaps {}..{}",
                    prev.mention.token_start, prev.mention.token_end
                ),
            ));
        }
        triplets.push(GmnerTriplet { mention, region });
    }
    triplets.sort_by_key(|t| (t.mention.token_start, t.mention.token_end));
    Ok(AnnotatedSample {
        sentence,
        triplets,
        image,
    })
}

pub fn write_dataset(path: &Path, samples: &[AnnotatedSample]) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(&s.to_record()).map_err(|e| Error::json("encoding record", e))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn serde_field(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    msg.split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "record".into())
}
