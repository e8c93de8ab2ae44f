//! Triplet-level precision/recall/F1.
//!
//! A predicted triplet is correct when its token span and type equal a gold
//! triplet's and the regions agree: both `None`, or both boxes with IoU
//! strictly above 0.5. Matching is one-to-one per sentence. Identical
//! predictions are deduplicated first; candidate pairs are then taken
//! greedily by match quality (`None`/`None` first, then IoU descending), with
//! ties broken by gold order and canonical prediction order, so the report
//! does not depend on prediction order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::dataset::{AnnotatedSample, BoundingBox, EntityRecord, GmnerTriplet};
use crate::error::{Error, Result};

pub const IOU_THRESHOLD: f64 = 0.5;

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0) as f64;
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0) as f64;
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

pub fn regions_match(gold: Option<&BoundingBox>, pred: Option<&BoundingBox>) -> bool {
    match (gold, pred) {
        (None, None) => true,
        (Some(g), Some(p)) => iou(g, p) > IOU_THRESHOLD,
        _ => false,
    }
}

pub fn triplet_match(gold: &GmnerTriplet, pred: &GmnerTriplet) -> bool {
    gold.mention.same_span(&pred.mention)
        && gold.mention.etype.name == pred.mention.etype.name
        && regions_match(gold.region.as_ref(), pred.region.as_ref())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Span, type and region.
    #[default]
    Triplet,
    /// Span and type only.
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub gold: usize,
    pub pred: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Counts {
    pub fn prf(&self) -> Prf {
        let precision = ratio(self.correct, self.pred);
        let recall = ratio(self.correct, self.gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf { precision, recall, f1 }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeReport {
    #[serde(flatten)]
    pub counts: Counts,
    #[serde(flatten)]
    pub scores: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub mode: MatchMode,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
    pub per_type: BTreeMap<String, TypeReport>,
}

impl EvalReport {
    pub fn passes(&self, f1_gate: f64) -> bool {
        self.f1 >= f1_gate
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, Counts, Prf)> = self
            .per_type
            .iter()
            .map(|(k, v)| (k.clone(), v.counts, v.scores))
            .collect();
        rows.push((
            "ALL".into(),
            self.counts,
            Prf {
                precision: self.precision,
                recall: self.recall,
                f1: self.f1,
            },
        ));
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(4).max(4);
        let mut out = String::new();
        let _ = writeln!(out, "variant: {} ({:?})", self.variant, self.mode);
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>6}  {:>7}  {:>9}  {:>6}  {:>6}",
            "type", "gold", "pred", "correct", "precision", "recall", "f1"
        );
        for (name, c, s) in rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>6}  {:>6}  {:>7}  {:>9.4}  {:>6.4}  {:>6.4}",
                name, c.gold, c.pred, c.correct, s.precision, s.recall, s.f1
            );
        }
        out
    }
}

/// Scores predictions keyed by sample id. Ids absent from `pred` count as
/// empty predictions; ids absent from `gold` are an error.
pub fn score(
    gold: &[AnnotatedSample],
    pred: &HashMap<String, Vec<GmnerTriplet>>,
    mode: MatchMode,
    variant: &str,
) -> Result<EvalReport> {
    let gold_ids: HashSet<&str> = gold.iter().map(|s| s.id()).collect();
    let mut unknown: Vec<&String> = pred.keys().filter(|k| !gold_ids.contains(k.as_str())).collect();
    if !unknown.is_empty() {
        unknown.sort();
        return Err(Error::IdMismatch(format!(
            "predictions for unknown sample ids {unknown:?}"
        )));
    }

    let mut total = Counts::default();
    let mut per_type: BTreeMap<String, Counts> = BTreeMap::new();
    for sample in gold {
        let preds = pred.get(sample.id()).map(Vec::as_slice).unwrap_or(&[]);
        if let Some(bad) = preds.iter().find(|t| t.mention.sentence_id != sample.id()) {
            return Err(Error::IdMismatch(format!(
                "prediction for `{}` filed under `{}`",
                bad.mention.sentence_id,
                sample.id()
            )));
        }
        let preds = canonical_predictions(preds, mode);
        let matched = match_sentence(&sample.triplets, &preds, mode);

        total.gold += sample.triplets.len();
        total.pred += preds.len();
        total.correct += matched.len();
        for g in &sample.triplets {
            per_type.entry(g.mention.etype.name.clone()).or_default().gold += 1;
        }
        for p in &preds {
            per_type.entry(p.mention.etype.name.clone()).or_default().pred += 1;
        }
        for &(gi, _) in &matched {
            per_type
                .entry(sample.triplets[gi].mention.etype.name.clone())
                .or_default()
                .correct += 1;
        }
    }

    let overall = total.prf();
    Ok(EvalReport {
        variant: variant.to_string(),
        mode,
        precision: overall.precision,
        recall: overall.recall,
        f1: overall.f1,
        counts: total,
        per_type: per_type
            .into_iter()
            .map(|(k, c)| {
                (
                    k,
                    TypeReport {
                        counts: c,
                        scores: c.prf(),
                    },
                )
            })
            .collect(),
    })
}

fn canonical_predictions(preds: &[GmnerTriplet], mode: MatchMode) -> Vec<GmnerTriplet> {
    let mut out: Vec<GmnerTriplet> = preds
        .iter()
        .map(|t| match mode {
            MatchMode::Triplet => t.clone(),
            MatchMode::Text => GmnerTriplet {
                mention: t.mention.clone(),
                region: None,
            },
        })
        .collect();
    out.sort_by(|a, b| {
        (
            a.mention.token_start,
            a.mention.token_end,
            &a.mention.etype.name,
            a.region,
        )
            .cmp(&(
                b.mention.token_start,
                b.mention.token_end,
                &b.mention.etype.name,
                b.region,
            ))
    });
    out.dedup_by(|a, b| {
        a.mention.same_span(&b.mention) && a.mention.etype.name == b.mention.etype.name && a.region == b.region
    });
    out
}

/// Greedy one-to-one matching; returns `(gold index, pred index)` pairs.
fn match_sentence(gold: &[GmnerTriplet], preds: &[GmnerTriplet], mode: MatchMode) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (gi, g) in gold.iter().enumerate() {
        for (pi, p) in preds.iter().enumerate() {
            if !g.mention.same_span(&p.mention) || g.mention.etype.name != p.mention.etype.name {
                continue;
            }
            let quality = match mode {
                MatchMode::Text => 2.0,
                MatchMode::Triplet => match (&g.region, &p.region) {
                    (None, None) => 2.0,
                    (Some(a), Some(b)) if iou(a, b) > IOU_THRESHOLD => iou(a, b),
                    _ => continue,
                },
            };
            candidates.push((quality, gi, pi));
        }
    }
    candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_g = vec![false; gold.len()];
    let mut used_p = vec![false; preds.len()];
    let mut out = Vec::new();
    for (_, gi, pi) in candidates {
        if !used_g[gi] && !used_p[pi] {
            used_g[gi] = true;
            used_p[pi] = true;
            out.push((gi, pi));
        }
    }
    out
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: String,
    pub triplets: Vec<EntityRecord>,
}

impl PredictionRecord {
    pub fn from_triplets(sample: &AnnotatedSample, triplets: &[GmnerTriplet]) -> Self {
        PredictionRecord {
            id: sample.id().to_string(),
            triplets: triplets
                .iter()
                .map(|t| EntityRecord::from_triplet(&sample.sentence, t))
                .collect(),
        }
    }
}

/// Reads a predictions file against its gold samples (for token alignment).
pub fn read_predictions(path: &Path, gold: &[AnnotatedSample]) -> Result<HashMap<String, Vec<GmnerTriplet>>> {
    let (_, records): (_, Vec<PredictionRecord>) = artifact::read_jsonl(path)?;
    let by_id: HashMap<&str, &AnnotatedSample> = gold.iter().map(|s| (s.id(), s)).collect();
    let schema_err = |field: String, message: String| Error::Schema {
        path: path.to_path_buf(),
        line: 0,
        field,
        message,
    };
    let mut out = HashMap::new();
    for rec in records {
        let sample = by_id
            .get(rec.id.as_str())
            .ok_or_else(|| Error::IdMismatch(format!("prediction for unknown sample id `{}`", rec.id)))?;
        let mut triplets = Vec::with_capacity(rec.triplets.len());
        for (k, e) in rec.triplets.iter().enumerate() {
            let (ts, te) =
                sample
                    .sentence
                    .token_span(e.char_start, e.char_end)
                    .ok_or_else(|| Error::SpanAlignment {
                        path: path.to_path_buf(),
                        line: 0,
                        char_start: e.char_start,
                        char_end: e.char_end,
                    })?;
            let etype = crate::dataset::EntityType {
                name: e.etype.clone(),
                id: usize::MAX,
            };
            let region = match e.region {
                None => None,
                Some(b) => Some(
                    BoundingBox::clipped(
                        [b.x_min, b.y_min, b.x_max, b.y_max],
                        sample.image.width,
                        sample.image.height,
                    )
                    .ok_or_else(|| schema_err(format!("{}.triplets[{k}].box", rec.id), format!("invalid box {b:?}")))?,
                ),
            };
            let mention = sample.sentence.mention(ts, te, &etype)?;
            triplets.push(GmnerTriplet { mention, region });
        }
        if out.insert(rec.id.clone(), triplets).is_some() {
            return Err(Error::IdMismatch(format!("duplicate prediction line for `{}`", rec.id)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ImageRef, Schema, Sentence};
    use proptest::prelude::*;

    fn b(x0: i32, y0: i32, x1: i32, y1: i32) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn sample() -> AnnotatedSample {
        let schema = Schema::new(&["WEAPON", "AIRCRAFT"]).unwrap();
        let s = Sentence::new("s1", "the MG5 and F-35 fly").unwrap();
        AnnotatedSample {
            triplets: vec![
                GmnerTriplet {
                    mention: s.mention(1, 2, &schema.types()[0]).unwrap(),
                    region: Some(b(0, 0, 10, 10)),
                },
                GmnerTriplet {
                    mention: s.mention(3, 4, &schema.types()[1]).unwrap(),
                    region: None,
                },
            ],
            sentence: s,
            image: ImageRef {
                path: "x.jpg".into(),
                width: 100,
                height: 100,
            },
        }
    }

    fn with(id: &str, ts: Vec<GmnerTriplet>) -> HashMap<String, Vec<GmnerTriplet>> {
        HashMap::from([(id.to_string(), ts)])
    }

    #[test]
    fn iou_hand_cases() {
        assert_eq!(iou(&b(0, 0, 10, 10), &b(0, 0, 10, 10)), 1.0);
        assert_eq!(iou(&b(0, 0, 10, 10), &b(20, 20, 30, 30)), 0.0);
        assert!((iou(&b(0, 0, 10, 10), &b(5, 5, 15, 15)) - 25.0 / 175.0).abs() < 1e-6);
    }

    #[test]
    fn triplet_match_rules() {
        let s = sample();
        let none_pair = &s.triplets[1];
        assert!(triplet_match(none_pair, none_pair));
        // half-overlapping boxes: inter 50, union 100 → IoU exactly 0.5
        let g = GmnerTriplet {
            mention: s.triplets[0].mention.clone(),
            region: Some(b(0, 0, 10, 10)),
        };
        let p = GmnerTriplet {
            mention: s.triplets[0].mention.clone(),
            region: Some(b(0, 0, 5, 10)),
        };
        assert_eq!(iou(g.region.as_ref().unwrap(), p.region.as_ref().unwrap()), 0.5);
        assert!(!triplet_match(&g, &p));
        let shifted = GmnerTriplet {
            mention: s.sentence.mention(1, 3, &s.triplets[0].mention.etype).unwrap(),
            region: g.region,
        };
        assert!(!triplet_match(&g, &shifted));
    }

    #[test]
    fn perfect_and_empty() {
        let s = sample();
        let r = score(
            std::slice::from_ref(&s),
            &with("s1", s.triplets.clone()),
            MatchMode::Triplet,
            "t",
        )
        .unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let r = score(&[s], &HashMap::new(), MatchMode::Triplet, "t").unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn one_gold_two_preds() {
        let mut s = sample();
        s.triplets.truncate(1);
        let spurious = GmnerTriplet {
            mention: s.sentence.mention(3, 4, &s.triplets[0].mention.etype).unwrap(),
            region: None,
        };
        let r = score(
            std::slice::from_ref(&s),
            &with("s1", vec![s.triplets[0].clone(), spurious]),
            MatchMode::Triplet,
            "t",
        )
        .unwrap();
        assert_eq!((r.precision, r.recall), (0.5, 1.0));
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn duplicates_counted_once_and_unknown_ids_rejected() {
        let s = sample();
        let mut preds = s.triplets.clone();
        preds.push(s.triplets[0].clone());
        let r = score(std::slice::from_ref(&s), &with("s1", preds), MatchMode::Triplet, "t").unwrap();
        assert_eq!(
            r.counts,
            Counts {
                gold: 2,
                pred: 2,
                correct: 2
            }
        );
        assert!(matches!(
            score(&[s], &with("zzz", vec![]), MatchMode::Triplet, "t"),
            Err(Error::IdMismatch(_))
        ));
    }

    #[test]
    fn text_mode_ignores_regions() {
        let s = sample();
        let mut preds = s.triplets.clone();
        preds[0].region = None;
        let r = score(
            std::slice::from_ref(&s),
            &with("s1", preds.clone()),
            MatchMode::Text,
            "t",
        )
        .unwrap();
        assert_eq!(r.f1, 1.0);
        let r = score(&[s], &with("s1", preds), MatchMode::Triplet, "t").unwrap();
        assert_eq!(r.counts.correct, 1);
    }

    #[test]
    fn table_has_all_row() {
        let s = sample();
        let r = score(
            std::slice::from_ref(&s),
            &with("s1", s.triplets.clone()),
            MatchMode::Triplet,
            "overall",
        )
        .unwrap();
        let t = r.to_table();
        assert!(t.contains("ALL"));
        assert!(t.contains("WEAPON"));
        assert!(r.passes(0.99));
    }

    #[test]
    fn prediction_file_round_trip() {
        let s = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pred.jsonl");
        artifact::write_jsonl(&p, None, &[PredictionRecord::from_triplets(&s, &s.triplets)]).unwrap();
        let preds = read_predictions(&p, std::slice::from_ref(&s)).unwrap();
        let r = score(&[s], &preds, MatchMode::Triplet, "t").unwrap();
        assert_eq!(r.f1, 1.0);
    }

    fn arb_box() -> impl Strategy<Value = Option<BoundingBox>> {
        prop_oneof![
            Just(None),
            (0i32..20, 0i32..20, 1i32..20, 1i32..20).prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h)),
        ]
    }

    proptest! {
        #[test]
        fn bounded_and_order_invariant(
            preds in proptest::collection::vec((0usize..4, 1usize..3, 0usize..2, arb_box()), 0..8),
            seed in 0u64..1000,
        ) {
            let s = sample();
            let types = [s.triplets[0].mention.etype.clone(), s.triplets[1].mention.etype.clone()];
            let triplets: Vec<GmnerTriplet> = preds
                .into_iter()
                .filter(|(st, len, _, _)| st + len <= s.sentence.len())
                .map(|(st, len, ty, region)| GmnerTriplet { mention: s.sentence.mention(st, st + len, &types[ty]).unwrap(), region })
                .collect();
            let r = score(std::slice::from_ref(&s), &with("s1", triplets.clone()), MatchMode::Triplet, "p").unwrap();
            for x in [r.precision, r.recall, r.f1] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
            if r.precision > 0.0 && r.recall > 0.0 {
                prop_assert!(r.f1 <= r.precision.max(r.recall) + 1e-12);
                prop_assert!(r.f1 >= r.precision.min(r.recall) - 1e-12);
            }
            prop_assert!(r.counts.correct <= r.counts.gold.min(r.counts.pred));
            let mut shuffled = triplets;
            let n = shuffled.len();
            if n > 1 {
                shuffled.rotate_left((seed as usize) % n);
                shuffled.swap(0, n - 1);
            }
            let r2 = score(&[s], &with("s1", shuffled), MatchMode::Triplet, "p").unwrap();
            prop_assert_eq!(r, r2);
        }
    }
}
