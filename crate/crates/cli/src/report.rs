use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use lrf_core::compgen::GroupStats;
use lrf_core::fusion::FuseProbRow;
use lrf_core::LrfVariant;

use crate::pipeline::SweepRow;

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `side,layer,prev_layer,probability`; `prev_layer` 0 is the embedding.
pub fn write_fuse_probs(path: &Path, rows: &[FuseProbRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["side", "layer", "prev_layer", "probability"])?;
    for r in rows {
        for (j, p) in r.probs.iter().enumerate() {
            w.write_record([r.side.to_string(), r.layer.to_string(), j.to_string(), p.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_groups(path: &Path, groups: &[GroupStats]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "group",
        "instances",
        "instance_errors",
        "instance_rate",
        "compounds",
        "compound_errors",
        "aggregate_rate",
    ])?;
    for g in groups {
        w.write_record([
            g.group.clone(),
            g.instances.to_string(),
            g.instance_errors.to_string(),
            g.instance_rate.to_string(),
            opt(g.compounds),
            opt(g.compound_errors),
            opt(g.aggregate_rate),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const SWEEP_COLUMNS: [&str; 7] = [
    "variant",
    "seed",
    "params",
    "added_params",
    "cter_inst",
    "cter_aggr",
    "exact_match",
];

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.variant.to_string(),
            r.seed.to_string(),
            r.params.to_string(),
            r.added_params.to_string(),
            r.cter_inst.to_string(),
            r.cter_aggr.to_string(),
            r.exact_match.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-variant means, in first-appearance order.
pub fn sweep_means(rows: &[SweepRow]) -> Vec<(LrfVariant, usize, usize, [f64; 3])> {
    let mut order: Vec<LrfVariant> = Vec::new();
    let mut acc: BTreeMap<String, (usize, usize, usize, [f64; 3])> = BTreeMap::new();
    for r in rows {
        let key = r.variant.to_string();
        if !acc.contains_key(&key) {
            order.push(r.variant);
        }
        let e = acc.entry(key).or_insert((r.params, r.added_params, 0, [0.0; 3]));
        e.2 += 1;
        e.3[0] += r.cter_inst;
        e.3[1] += r.cter_aggr;
        e.3[2] += r.exact_match;
    }
    order
        .into_iter()
        .map(|v| {
            let (p, a, n, s) = acc[&v.to_string()];
            (v, p, a, s.map(|x| x / n as f64))
        })
        .collect()
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

pub fn sweep_markdown(rows: &[SweepRow]) -> String {
    let mut s = String::from("## Runs\n\n| variant | seed | params | added params | CTER inst (%) | CTER aggr (%) | exact match (%) |\n|---|---:|---:|---:|---:|---:|---:|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} |",
            r.variant,
            r.seed,
            r.params,
            r.added_params,
            pct(r.cter_inst),
            pct(r.cter_aggr),
            pct(r.exact_match)
        );
    }
    s.push_str("\n## Means over seeds\n\n| variant | params | added params | CTER inst (%) | CTER aggr (%) | exact match (%) |\n|---|---:|---:|---:|---:|---:|\n");
    for (v, p, a, m) in sweep_means(rows) {
        let _ = writeln!(s, "| {v} | {p} | {a} | {} | {} | {} |", pct(m[0]), pct(m[1]), pct(m[2]));
    }
    s
}

pub fn write_sweep_fuse_probs(path: &Path, runs: &[(LrfVariant, u64, Vec<FuseProbRow>)]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "seed", "side", "layer", "prev_layer", "probability"])?;
    for (variant, seed, rows) in runs {
        for r in rows {
            for (j, p) in r.probs.iter().enumerate() {
                w.write_record([
                    variant.to_string(),
                    seed.to_string(),
                    r.side.to_string(),
                    r.layer.to_string(),
                    j.to_string(),
                    p.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
