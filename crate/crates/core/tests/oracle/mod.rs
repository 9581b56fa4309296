//! Brute-force recounts of the CG metrics. Matching is done on space-joined
//! strings against the realizations stored in each example's annotation,
//! and grouping uses linear scans.
#![allow(dead_code)]

use lrf_core::compgen::{CterReport, Example, GroupStats};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn compound_ok(prediction: &[String], example: &Example) -> bool {
    let hay = format!(" {} ", prediction.join(" "));
    example
        .compound
        .realizations
        .iter()
        .any(|r| !r.is_empty() && hay.contains(&format!(" {} ", r.join(" "))))
}

#[derive(Debug, PartialEq)]
pub struct Count {
    pub instances: usize,
    pub errors: usize,
    pub compounds: usize,
    pub compound_errors: usize,
}

fn count(items: &[(String, bool)]) -> Count {
    let mut seen: Vec<(&str, bool)> = Vec::new();
    for (key, wrong) in items {
        match seen.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 |= *wrong,
            None => seen.push((key, *wrong)),
        }
    }
    Count {
        instances: items.len(),
        errors: items.iter().filter(|x| x.1).count(),
        compounds: seen.len(),
        compound_errors: seen.iter().filter(|x| x.1).count(),
    }
}

fn identity(e: &Example) -> String {
    format!("{:?}|{}", e.compound.kind, e.compound.atoms.join(","))
}

fn bucket(len: usize) -> &'static str {
    if len <= 7 {
        "<=7"
    } else if len <= 10 {
        "8-10"
    } else if len <= 13 {
        "11-13"
    } else {
        ">=14"
    }
}

/// Overall counts plus `(label, count)` groups for each breakdown.
pub struct Recount {
    pub all: Count,
    pub by_compound_length: Vec<(String, Count)>,
    pub by_context_length: Vec<(String, Count)>,
    pub by_mod: Vec<(String, Count)>,
}

fn grouped(rows: &[(String, String, bool)]) -> Vec<(String, Count)> {
    let mut labels: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
    labels.sort();
    labels.dedup();
    labels
        .into_iter()
        .map(|l| {
            let items: Vec<(String, bool)> = rows.iter().filter(|r| r.0 == l).map(|r| (r.1.clone(), r.2)).collect();
            (l, count(&items))
        })
        .collect()
}

pub fn recount(predictions: &[Vec<String>], examples: &[Example]) -> Recount {
    let verdicts: Vec<(String, bool)> = predictions
        .iter()
        .zip(examples)
        .map(|(p, e)| (identity(e), !compound_ok(p, e)))
        .collect();
    let rows = |label: &dyn Fn(&Example) -> String| -> Vec<(String, String, bool)> {
        examples
            .iter()
            .zip(&verdicts)
            .map(|(e, (k, w))| (label(e), k.clone(), *w))
            .collect()
    };
    Recount {
        all: count(&verdicts),
        by_compound_length: grouped(&rows(&|e| (e.compound.span[1] - e.compound.span[0]).to_string())),
        by_context_length: grouped(&rows(&|e| bucket(e.src.len()).to_owned())),
        by_mod: grouped(&rows(&|e| {
            if e.compound.atoms.iter().any(|a| a.starts_with('m')) {
                "with_mod"
            } else {
                "without_mod"
            }
            .to_owned()
        })),
    }
}

pub fn exact_match_count(predictions: &[Vec<String>], references: &[Vec<String>]) -> usize {
    let mut hits = 0;
    for i in 0..predictions.len() {
        if predictions[i].join("\u{1}") == references[i].join("\u{1}") && predictions[i].len() == references[i].len() {
            hits += 1;
        }
    }
    hits
}

fn same_group(g: &GroupStats, label: &str, c: &Count, aggregate: bool) -> bool {
    let base = g.group == label
        && g.instances == c.instances
        && g.instance_errors == c.errors
        && g.instance_rate == c.errors as f64 / c.instances as f64;
    let agg = if aggregate {
        g.compounds == Some(c.compounds)
            && g.compound_errors == Some(c.compound_errors)
            && g.aggregate_rate == Some(c.compound_errors as f64 / c.compounds as f64)
    } else {
        g.compounds.is_none() && g.compound_errors.is_none() && g.aggregate_rate.is_none()
    };
    base && agg
}

fn same_groups(gs: &[GroupStats], rc: &[(String, Count)], aggregate: bool) -> bool {
    let mut gs: Vec<&GroupStats> = gs.iter().collect();
    gs.sort_by(|a, b| a.group.cmp(&b.group));
    gs.len() == rc.len() && gs.iter().zip(rc).all(|(g, (l, c))| same_group(g, l, c, aggregate))
}

/// Exact agreement of a report with the recount.
pub fn agrees(report: &CterReport, rc: &Recount) -> bool {
    let a = &rc.all;
    report.instances == a.instances
        && report.instance_errors == a.errors
        && report.compounds == a.compounds
        && report.compound_errors == a.compound_errors
        && report.instance_rate == a.errors as f64 / a.instances as f64
        && report.aggregate_rate == a.compound_errors as f64 / a.compounds as f64
        && same_groups(&report.by_compound_length, &rc.by_compound_length, true)
        && same_groups(&report.by_context_length, &rc.by_context_length, false)
        && same_groups(&report.by_mod, &rc.by_mod, true)
}

/// Predictions derived from the references by random edits: exact copies,
/// token substitutions, deletions, insertions, shuffles, swaps with other
/// references, and empty outputs.
pub fn random_predictions(rng: &mut ChaCha8Rng, examples: &[Example]) -> Vec<Vec<String>> {
    let vocab: Vec<String> = examples.iter().flat_map(|e| e.tgt.clone()).collect();
    examples
        .iter()
        .map(|e| {
            let mut p = e.tgt.clone();
            match rng.random_range(0..7) {
                0 => {}
                1 if !p.is_empty() => {
                    let i = rng.random_range(0..p.len());
                    p[i] = vocab.choose(rng).unwrap().clone();
                }
                2 if !p.is_empty() => {
                    p.remove(rng.random_range(0..p.len()));
                }
                3 => {
                    let i = rng.random_range(0..=p.len());
                    p.insert(i, vocab.choose(rng).unwrap().clone());
                }
                4 => {
                    use rand::seq::SliceRandom;
                    p.shuffle(rng);
                }
                5 => p = examples.choose(rng).unwrap().tgt.clone(),
                _ => p.clear(),
            }
            p
        })
        .collect()
}
