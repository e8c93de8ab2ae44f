//! In-context example retrieval for grounding.
//!
//! Each annotated candidate is scored against a query sample as
//!
//! ```text
//! λ1·S_entity + λ2·S_sentence + λ3·S_image
//! ```
//!
//! where `S_entity` pairs every query entity with every candidate entity
//! (cosine plus `δ` when the types agree), keeps the best candidate pair per
//! query entity and averages over query entities. `S_image` is zero for
//! candidates whose image has no annotated region. Whole samples are ranked;
//! ties go to the lower candidate index.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotatedSample, EntityType, MentionSpan};
use crate::embedding::{self, cosine, EmbeddingStore, EmbeddingVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorConfig {
    pub delta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub k: usize,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            delta: 0.6,
            lambda1: 0.6,
            lambda2: 0.4,
            lambda3: 0.2,
            k: 3,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda1, self.lambda2, self.lambda3];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::SelectorConfig("weights must be finite and non-negative".into()));
        }
        if w.iter().all(|x| *x == 0.0) {
            return Err(Error::SelectorConfig("at least one weight must be positive".into()));
        }
        if !self.delta.is_finite() {
            return Err(Error::SelectorConfig("delta must be finite".into()));
        }
        if self.k == 0 {
            return Err(Error::SelectorConfig("k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn combine(&self, entity: f64, sentence: f64, image: f64) -> f64 {
        self.lambda1 * entity + self.lambda2 * sentence + self.lambda3 * image
    }
}

/// An annotated sample with its embeddings resolved.
#[derive(Debug, Clone)]
pub struct IclExample {
    pub sample: AnnotatedSample,
    pub sentence: EmbeddingVector,
    pub image: EmbeddingVector,
    pub entities: Vec<(EntityType, EmbeddingVector)>,
}

impl IclExample {
    pub fn has_regions(&self) -> bool {
        self.sample.region_count() > 0
    }
}

/// Embedding stores used to resolve samples and queries.
#[derive(Debug, Clone, Copy)]
pub struct Stores<'a> {
    pub sentence: &'a EmbeddingStore,
    pub entity: &'a EmbeddingStore,
    pub image: &'a EmbeddingStore,
}

impl Stores<'_> {
    pub fn example(&self, sample: &AnnotatedSample) -> Result<IclExample> {
        Ok(IclExample {
            sample: sample.clone(),
            sentence: self.sentence.get(sample.id())?.clone(),
            image: self.image.get(&embedding::image_key(&sample.image.path))?.clone(),
            entities: self.entities(&sample.mentions())?,
        })
    }

    pub fn entities(&self, mentions: &[MentionSpan]) -> Result<Vec<(EntityType, EmbeddingVector)>> {
        mentions
            .iter()
            .map(|m| {
                Ok((
                    m.etype.clone(),
                    self.entity.get(&embedding::entity_key(&m.surface))?.clone(),
                ))
            })
            .collect()
    }

    /// Query side of a refined sample. A missing image embedding yields `None`.
    pub fn query(&self, sample: &AnnotatedSample, mentions: &[MentionSpan]) -> Result<Query> {
        Ok(Query {
            id: sample.id().to_string(),
            sentence: self.sentence.get(sample.id())?.clone(),
            image: self.image.get(&embedding::image_key(&sample.image.path)).ok().cloned(),
            entities: self.entities(mentions)?,
        })
    }

    /// Like [`Stores::query`], but mentions with no entity embedding are
    /// left out; their surfaces are returned alongside.
    pub fn query_partial(&self, sample: &AnnotatedSample, mentions: &[MentionSpan]) -> Result<(Query, Vec<String>)> {
        let (known, missing): (Vec<&MentionSpan>, Vec<&MentionSpan>) = mentions
            .iter()
            .partition(|m| self.entity.contains(&embedding::entity_key(&m.surface)));
        let known: Vec<MentionSpan> = known.into_iter().cloned().collect();
        Ok((
            self.query(sample, &known)?,
            missing.into_iter().map(|m| m.surface.clone()).collect(),
        ))
    }
}

#[derive(Debug, Clone)]
pub struct Query {
    pub id: String,
    pub sentence: EmbeddingVector,
    pub image: Option<EmbeddingVector>,
    pub entities: Vec<(EntityType, EmbeddingVector)>,
}

pub fn entity_pair_score(
    q: &(EntityType, EmbeddingVector),
    c: &(EntityType, EmbeddingVector),
    delta: f64,
) -> Result<f64> {
    let mask = if q.0.name == c.0.name { 1.0 } else { 0.0 };
    Ok(cosine(&q.1, &c.1)? + delta * mask)
}

/// Mean over query entities of the best pair score against the candidate.
pub fn entity_similarity(
    query: &[(EntityType, EmbeddingVector)],
    candidate: &[(EntityType, EmbeddingVector)],
    delta: f64,
) -> Result<f64> {
    if query.is_empty() || candidate.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for q in query {
        let mut best = f64::NEG_INFINITY;
        for c in candidate {
            best = best.max(entity_pair_score(q, c, delta)?);
        }
        total += best;
    }
    Ok(total / query.len() as f64)
}

pub fn sentence_similarity(query: &EmbeddingVector, candidate: &IclExample) -> Result<f64> {
    cosine(query, &candidate.sentence)
}

pub fn image_similarity(query: Option<&EmbeddingVector>, candidate: &IclExample) -> Result<f64> {
    match query {
        Some(q) if candidate.has_regions() => cosine(q, &candidate.image),
        _ => Ok(0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub index: usize,
    pub entity: f64,
    pub sentence: f64,
    pub image: f64,
    pub combined: f64,
}

/// Indices of the `k` largest scores, descending, ties to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::NotEnoughCandidates {
            k,
            available: scores.len(),
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub scores: Vec<CandidateScore>,
    pub chosen: Vec<usize>,
}

/// Immutable candidate pool.
#[derive(Debug, Clone)]
pub struct Selector {
    config: SelectorConfig,
    pool: Vec<IclExample>,
}

impl Selector {
    pub fn new(pool: Vec<IclExample>, config: SelectorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Selector { config, pool })
    }

    pub fn pool(&self) -> &[IclExample] {
        &self.pool
    }

    pub fn config(&self) -> &SelectorConfig {
        &self.config
    }

    pub fn score(&self, query: &Query) -> Result<Vec<CandidateScore>> {
        self.pool
            .iter()
            .enumerate()
            .map(|(index, c)| {
                let entity = entity_similarity(&query.entities, &c.entities, self.config.delta)?;
                let sentence = sentence_similarity(&query.sentence, c)?;
                let image = image_similarity(query.image.as_ref(), c)?;
                Ok(CandidateScore {
                    index,
                    entity,
                    sentence,
                    image,
                    combined: self.config.combine(entity, sentence, image),
                })
            })
            .collect()
    }

    pub fn select_topk(&self, query: &Query) -> Result<Selection> {
        if self.pool.is_empty() {
            return Err(Error::NotEnoughCandidates {
                k: self.config.k,
                available: 0,
            });
        }
        let scores = self.score(query)?;
        let combined: Vec<f64> = scores.iter().map(|s| s.combined).collect();
        let chosen = top_k(&combined, self.config.k)?;
        Ok(Selection { scores, chosen })
    }

    pub fn examples(&self, chosen: &[usize]) -> Vec<&IclExample> {
        chosen.iter().map(|&i| &self.pool[i]).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub query_id: String,
    pub scores: Vec<CandidateScore>,
    pub chosen: Vec<usize>,
    pub chosen_ids: Vec<String>,
}
