use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AtomDictionary, Example};
use crate::error::{Error, Result};

/// Inclusive source-length ranges used for the context-length breakdown.
pub const CONTEXT_BUCKETS: [(usize, usize, &str); 4] = [
    (0, 7, "<=7"),
    (8, 10, "8-10"),
    (11, 13, "11-13"),
    (14, usize::MAX, ">=14"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group: String,
    pub instances: usize,
    pub instance_errors: usize,
    pub instance_rate: f64,
    /// Aggregate figures are only defined when every instance of a compound
    /// falls in the same group.
    pub compounds: Option<usize>,
    pub compound_errors: Option<usize>,
    pub aggregate_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CterReport {
    pub instances: usize,
    pub instance_errors: usize,
    pub instance_rate: f64,
    pub compounds: usize,
    pub compound_errors: usize,
    pub aggregate_rate: f64,
    pub by_compound_length: Vec<GroupStats>,
    pub by_context_length: Vec<GroupStats>,
    pub by_mod: Vec<GroupStats>,
}

/// True iff some valid rendering of the example's compound occurs
/// contiguously in `prediction`.
pub fn check_compound(prediction: &[String], example: &Example, dict: &AtomDictionary) -> Result<bool> {
    let realizations = dict.compound_realizations(example.compound.kind, &example.compound.atoms)?;
    Ok(realizations
        .iter()
        .any(|r| !r.is_empty() && prediction.windows(r.len()).any(|w| w == r.as_slice())))
}

fn context_bucket(len: usize) -> &'static str {
    CONTEXT_BUCKETS
        .iter()
        .find(|(lo, hi, _)| (*lo..=*hi).contains(&len))
        .map(|b| b.2)
        .unwrap()
}

#[derive(Default)]
struct Tally {
    instances: usize,
    errors: usize,
    /// compound key → any error
    compounds: BTreeMap<String, bool>,
}

impl Tally {
    fn add(&mut self, key: &str, wrong: bool) {
        self.instances += 1;
        self.errors += usize::from(wrong);
        *self.compounds.entry(key.to_owned()).or_default() |= wrong;
    }

    fn compound_errors(&self) -> usize {
        self.compounds.values().filter(|&&e| e).count()
    }
}

fn rate(num: usize, den: usize) -> f64 {
    num as f64 / den as f64
}

fn groups(tallies: BTreeMap<(usize, String), Tally>, with_aggregate: bool) -> Vec<GroupStats> {
    tallies
        .into_iter()
        .map(|((_, group), t)| {
            let ce = t.compound_errors();
            GroupStats {
                group,
                instances: t.instances,
                instance_errors: t.errors,
                instance_rate: rate(t.errors, t.instances),
                compounds: with_aggregate.then_some(t.compounds.len()),
                compound_errors: with_aggregate.then_some(ce),
                aggregate_rate: with_aggregate.then(|| rate(ce, t.compounds.len())),
            }
        })
        .collect()
}

/// Instance- and aggregate-level compound translation error rates, with
/// breakdowns by compound length, context length, and modifier presence.
pub fn cter(predictions: &[Vec<String>], cg_test: &[Example], dict: &AtomDictionary) -> Result<CterReport> {
    if predictions.len() != cg_test.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} examples",
            predictions.len(),
            cg_test.len()
        )));
    }
    if cg_test.is_empty() {
        return Err(Error::contract("no examples to score"));
    }
    let mut all = Tally::default();
    let mut by_len: BTreeMap<(usize, String), Tally> = BTreeMap::new();
    let mut by_ctx: BTreeMap<(usize, String), Tally> = BTreeMap::new();
    let mut by_mod: BTreeMap<(usize, String), Tally> = BTreeMap::new();
    for (pred, ex) in predictions.iter().zip(cg_test) {
        let wrong = !check_compound(pred, ex, dict)?;
        let key = ex.compound.key();
        all.add(&key, wrong);
        let n = ex.lengths.compound;
        by_len.entry((n, n.to_string())).or_default().add(&key, wrong);
        let b = CONTEXT_BUCKETS
            .iter()
            .position(|x| x.2 == context_bucket(ex.lengths.context))
            .unwrap();
        by_ctx
            .entry((b, CONTEXT_BUCKETS[b].2.to_owned()))
            .or_default()
            .add(&key, wrong);
        let m = ex.compound.kind.has_mod();
        let label = if m { "with_mod" } else { "without_mod" };
        by_mod
            .entry((usize::from(m), label.to_owned()))
            .or_default()
            .add(&key, wrong);
    }
    let ce = all.compound_errors();
    Ok(CterReport {
        instances: all.instances,
        instance_errors: all.errors,
        instance_rate: rate(all.errors, all.instances),
        compounds: all.compounds.len(),
        compound_errors: ce,
        aggregate_rate: rate(ce, all.compounds.len()),
        by_compound_length: groups(by_len, true),
        by_context_length: groups(by_ctx, false),
        by_mod: groups(by_mod, true),
    })
}

/// Fraction of predictions identical to their reference.
pub fn exact_match<T: PartialEq>(predictions: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::contract("no predictions to score"));
    }
    let hits = predictions.iter().zip(references).filter(|(p, r)| p == r).count();
    Ok(rate(hits, predictions.len()))
}
