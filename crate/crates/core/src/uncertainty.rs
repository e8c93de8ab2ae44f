//! Entropy-based routing of CRF predictions.
//!
//! Token entropy is the Shannon entropy of the token's marginal label
//! distribution; an entity's uncertainty is the mean over its tokens. An
//! entity is sent to the refiner only when its uncertainty is strictly
//! greater than `beta`.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crf::MarginalTable;
use crate::dataset::MentionSpan;
use crate::error::{Error, Result};

/// Probabilities below this contribute exactly zero entropy.
const PROB_FLOOR: f64 = 1e-12;
const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    Natural,
    Two,
    Ten,
}

impl LogBase {
    fn ln_base(self) -> f64 {
        match self {
            LogBase::Natural => 1.0,
            LogBase::Two => std::f64::consts::LN_2,
            LogBase::Ten => std::f64::consts::LN_10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    pub beta: f64,
    pub log_base: LogBase,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            beta: 0.8,
            log_base: LogBase::Natural,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta.is_nan() || self.beta < 0.0 {
            return Err(Error::Config {
                field: "router.beta".into(),
                message: format!("must be non-negative, got {}", self.beta),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Route {
    Keep,
    Refine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub mention: MentionSpan,
    pub uncertainty: f64,
    pub routed_to: Route,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Routing {
    pub keep: Vec<MentionSpan>,
    pub refine: Vec<MentionSpan>,
    pub decisions: Vec<RoutingDecision>,
}

pub fn token_entropy(row: &[f64]) -> Result<f64> {
    token_entropy_in(row, LogBase::Natural)
}

pub fn token_entropy_in(row: &[f64], base: LogBase) -> Result<f64> {
    if row.is_empty() {
        return Err(Error::NotDistribution("empty row".into()));
    }
    if let Some(p) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::NotDistribution(format!("entry {p} outside [0, 1]")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::NotDistribution(format!("row sums to {sum}")));
    }
    let h: f64 = row.iter().filter(|&&p| p >= PROB_FLOOR).map(|&p| -p * p.ln()).sum();
    // tiny negatives from rows summing to just over 1
    Ok(h.max(0.0) / base.ln_base())
}

pub fn entity_uncertainty(mention: &MentionSpan, marginals: &MarginalTable, base: LogBase) -> Result<f64> {
    if mention.token_start >= mention.token_end || mention.token_end > marginals.len() {
        return Err(Error::SpanOutOfRange {
            start: mention.token_start,
            end: mention.token_end,
            len: marginals.len(),
        });
    }
    let mut total = 0.0;
    for i in mention.token_start..mention.token_end {
        total += token_entropy_in(marginals.row(i), base)?;
    }
    Ok(total / mention.len() as f64)
}

/// Splits predictions into kept and refined sets, preserving input order.
pub fn route(
    predictions: &[MentionSpan],
    marginals: &HashMap<String, MarginalTable>,
    config: &RouterConfig,
) -> Result<Routing> {
    let mut out = Routing::default();
    for m in predictions {
        let table = marginals
            .get(&m.sentence_id)
            .ok_or_else(|| Error::IdMismatch(format!("no marginals for sentence `{}`", m.sentence_id)))?;
        let u = entity_uncertainty(m, table, config.log_base)?;
        let routed_to = if u > config.beta { Route::Refine } else { Route::Keep };
        match routed_to {
            Route::Keep => out.keep.push(m.clone()),
            Route::Refine => out.refine.push(m.clone()),
        }
        out.decisions.push(RoutingDecision {
            mention: m.clone(),
            uncertainty: u,
            routed_to,
        });
    }
    Ok(out)
}

/// One line of the routing report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub sentence_id: String,
    pub token_start: usize,
    pub token_end: usize,
    pub surface: String,
    #[serde(rename = "type")]
    pub etype: String,
    pub uncertainty: f64,
    pub verdict: Route,
}

impl From<&RoutingDecision> for RoutingRecord {
    fn from(d: &RoutingDecision) -> Self {
        RoutingRecord {
            sentence_id: d.mention.sentence_id.clone(),
            token_start: d.mention.token_start,
            token_end: d.mention.token_end,
            surface: d.mention.surface.clone(),
            etype: d.mention.etype.name.clone(),
            uncertainty: d.uncertainty,
            verdict: d.routed_to,
        }
    }
}

/// One JSON object per decision.
pub fn write_routing_report(mut w: impl Write, decisions: &[RoutingDecision]) -> Result<()> {
    for d in decisions {
        serde_json::to_writer(&mut w, &RoutingRecord::from(d)).map_err(|e| Error::json("routing report", e))?;
        w.write_all(b"\n").map_err(|e| Error::io("routing report", e))?;
    }
    Ok(())
}

pub fn write_routing_report_file(path: &Path, decisions: &[RoutingDecision]) -> Result<()> {
    let mut buf = Vec::new();
    write_routing_report(&mut buf, decisions)?;
    std::fs::write(path, buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Schema, Sentence};
    use proptest::prelude::*;

    fn mention(start: usize, end: usize) -> MentionSpan {
        let schema = Schema::new(&["WEAPON"]).unwrap();
        let s = Sentence::new("s", "a b c d e").unwrap();
        s.mention(start, end, &schema.types()[0]).unwrap()
    }

    /// Four-label row `[1-p, p/3, p/3, p/3]` with the given entropy in nats,
    /// found by bisection on p in [0, 3/4] where entropy rises from 0 to ln 4.
    fn row_with_entropy(h: f64) -> Vec<f64> {
        let row = |p: f64| vec![1.0 - p, p / 3.0, p / 3.0, p / 3.0];
        let (mut lo, mut hi) = (0.0, 0.75);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if token_entropy(&row(mid)).unwrap() < h {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        row(0.5 * (lo + hi))
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(token_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((token_entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
        // -(0.5 ln 0.5 + 2 × 0.25 ln 0.25) = 1.5 ln 2
        assert!((token_entropy(&[0.5, 0.25, 0.25]).unwrap() - 1.0397208).abs() < 1e-6);
        assert!((token_entropy_in(&[0.5, 0.5], LogBase::Two).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_non_distributions() {
        assert!(token_entropy(&[0.5, 0.6]).is_err());
        assert!(token_entropy(&[-0.1, 1.1]).is_err());
        assert!(token_entropy(&[]).is_err());
        assert!(token_entropy(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn entity_uncertainty_is_token_mean() {
        let table = MarginalTable::from_rows(vec![
            row_with_entropy(0.9),
            row_with_entropy(0.7),
            vec![1.0, 0.0, 0.0, 0.0],
        ]);
        let u = entity_uncertainty(&mention(0, 2), &table, LogBase::Natural).unwrap();
        assert!((u - 0.8).abs() < 1e-9);
        let single = entity_uncertainty(&mention(1, 2), &table, LogBase::Natural).unwrap();
        assert!((single - token_entropy(table.row(1)).unwrap()).abs() < 1e-15);
        let uniform = MarginalTable::from_rows(vec![vec![0.25; 4]; 3]);
        assert!((entity_uncertainty(&mention(0, 3), &uniform, LogBase::Natural).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            entity_uncertainty(&mention(2, 4), &table, LogBase::Natural),
            Err(Error::SpanOutOfRange { .. })
        ));
    }

    fn one_entity_routing(u_rows: Vec<Vec<f64>>, beta: f64) -> Routing {
        let mut tables = HashMap::new();
        let n = u_rows.len();
        tables.insert("s".to_string(), MarginalTable::from_rows(u_rows));
        route(
            &[mention(0, n)],
            &tables,
            &RouterConfig {
                beta,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn boundary_is_kept() {
        // entropy of the row is exactly the threshold used
        let row = vec![0.5, 0.25, 0.25];
        let h = token_entropy(&row).unwrap();
        let r = one_entity_routing(vec![row.clone()], h);
        assert_eq!(r.decisions[0].routed_to, Route::Keep);
        let r = one_entity_routing(vec![row], h - 1e-9);
        assert_eq!(r.decisions[0].routed_to, Route::Refine);
    }

    #[test]
    fn threshold_crossing_and_huge_beta() {
        let r = one_entity_routing(vec![row_with_entropy(0.81)], 0.8);
        assert_eq!((r.keep.len(), r.refine.len()), (0, 1));
        let r = one_entity_routing(vec![vec![0.25; 4]], 1e300);
        assert_eq!((r.keep.len(), r.refine.len()), (1, 0));
    }

    #[test]
    fn missing_marginals_is_error() {
        assert!(route(&[mention(0, 1)], &HashMap::new(), &RouterConfig::default()).is_err());
    }

    #[test]
    fn report_lines() {
        let r = one_entity_routing(vec![vec![0.25; 4]], 0.8);
        let mut buf = Vec::new();
        write_routing_report(&mut buf, &r.decisions).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(v["verdict"], "REFINE");
        assert_eq!(v["sentence_id"], "s");
    }

    fn distribution() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, 1..8).prop_filter_map("nonzero", |xs| {
            let s: f64 = xs.iter().sum();
            (s > 1e-6).then(|| xs.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn entropy_bounded(row in distribution()) {
            let h = token_entropy(&row).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (row.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn uncertainty_permutation_invariant(rows in proptest::collection::vec(distribution().prop_map(|r| r), 1..5), rot in 0usize..5) {
            let l = rows[0].len();
            let rows: Vec<Vec<f64>> = rows.into_iter().filter(|r| r.len() == l).collect();
            let n = rows.len();
            let mut shifted = rows.clone();
            shifted.rotate_left(rot % n);
            let a = entity_uncertainty(&mention(0, n), &MarginalTable::from_rows(rows), LogBase::Natural).unwrap();
            let b = entity_uncertainty(&mention(0, n), &MarginalTable::from_rows(shifted), LogBase::Natural).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn raising_beta_never_moves_keep_to_refine(rows in proptest::collection::vec(distribution(), 1..5), b1 in 0.0f64..2.0, db in 0.0f64..2.0) {
            let n = rows.len();
            let lo = one_entity_routing(rows.clone(), b1);
            let hi = one_entity_routing(rows, b1 + db);
            prop_assert!(n >= 1);
            if lo.decisions[0].routed_to == Route::Keep {
                prop_assert_eq!(hi.decisions[0].routed_to, Route::Keep);
            }
        }
    }
}
