//! BIO tag scheme over a [`Schema`].
//!
//! Label ids: `0` is `O`; type `k` owns `B-k = 1 + 2k` and `I-k = 2 + 2k`.

use crate::dataset::{EntityType, MentionSpan, Schema, Sentence};
use crate::error::{Error, Result};

pub const OUTSIDE: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    schema: Schema,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Outside,
    Begin(usize),
    Inside(usize),
}

impl LabelSet {
    pub fn new(schema: Schema) -> Self {
        LabelSet { schema }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        1 + 2 * self.schema.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn begin(&self, etype: &EntityType) -> usize {
        1 + 2 * etype.id
    }

    pub fn inside(&self, etype: &EntityType) -> usize {
        2 + 2 * etype.id
    }

    pub fn tag(&self, label: usize) -> Tag {
        match label {
            0 => Tag::Outside,
            l if l % 2 == 1 => Tag::Begin((l - 1) / 2),
            l => Tag::Inside((l - 2) / 2),
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["O".to_string()];
        for t in self.schema.types() {
            out.push(format!("B-{}", t.name));
            out.push(format!("I-{}", t.name));
        }
        out
    }

    pub fn encode(&self, spans: &[MentionSpan], token_count: usize) -> Result<Vec<usize>> {
        let mut sorted: Vec<&MentionSpan> = spans.iter().collect();
        sorted.sort_by_key(|s| (s.token_start, s.token_end));
        for pair in sorted.windows(2) {
            if pair[0].overlaps(pair[1]) {
                return Err(Error::OverlappingSpans {
                    first: (pair[0].token_start, pair[0].token_end),
                    second: (pair[1].token_start, pair[1].token_end),
                });
            }
        }
        let mut labels = vec![OUTSIDE; token_count];
        for s in sorted {
            if s.token_start >= s.token_end || s.token_end > token_count {
                return Err(Error::SpanOutOfRange {
                    start: s.token_start,
                    end: s.token_end,
                    len: token_count,
                });
            }
            labels[s.token_start] = self.begin(&s.etype);
            for l in &mut labels[s.token_start + 1..s.token_end] {
                *l = self.inside(&s.etype);
            }
        }
        Ok(labels)
    }

    /// Decodes a label sequence into spans. An `I-X` that does not continue
    /// an open `X` span starts a new one, so any CRF output decodes.
    pub fn decode(&self, labels: &[usize], sentence: &Sentence) -> Vec<MentionSpan> {
        let mut spans = Vec::new();
        let mut open: Option<(usize, usize)> = None;
        let close = |open: &mut Option<(usize, usize)>, end: usize, spans: &mut Vec<MentionSpan>| {
            if let Some((start, ty)) = open.take() {
                let etype = &self.schema.types()[ty];
                spans.push(sentence.mention(start, end, etype).expect("decoded span in range"));
            }
        };
        for (i, &label) in labels.iter().enumerate() {
            match self.tag(label) {
                Tag::Outside => close(&mut open, i, &mut spans),
                Tag::Begin(ty) => {
                    close(&mut open, i, &mut spans);
                    open = Some((i, ty));
                }
                Tag::Inside(ty) => match open {
                    Some((_, cur)) if cur == ty => {}
                    _ => {
                        close(&mut open, i, &mut spans);
                        open = Some((i, ty));
                    }
                },
            }
        }
        close(&mut open, labels.len(), &mut spans);
        spans
    }
}
