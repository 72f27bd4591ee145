//! Comparison tables over metrics documents.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{MetricsDocument, Variant};
use crate::error::{Error, Result};

/// Seed-averaged final-task metrics of one variant.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub variant: Variant,
    pub seeds: usize,
    pub base_map: f64,
    pub novel_map: f64,
    pub avg_map: f64,
    pub base_recall: f64,
    pub novel_recall: f64,
    pub avg_recall: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// One row per variant, averaged over seeds, ordered by average mAP
/// (highest first; ties keep the variant order).
pub fn comparison_rows(docs: &[MetricsDocument]) -> Result<Vec<ComparisonRow>> {
    let mut by_variant: BTreeMap<Variant, Vec<&MetricsDocument>> = BTreeMap::new();
    for d in docs {
        by_variant.entry(d.variant).or_default().push(d);
    }
    let mut rows = Vec::new();
    for (variant, group) in by_variant {
        let mut cols: [Vec<f64>; 6] = Default::default();
        for d in &group {
            let m = &d
                .final_report()
                .ok_or_else(|| Error::Input(format!("{} run has no task reports", variant.name())))?
                .metrics;
            let vals = [m.base_map, m.novel_map, m.avg_map, m.base_recall, m.novel_recall, m.avg_recall];
            for (c, v) in cols.iter_mut().zip(vals) {
                if let Some(v) = v {
                    c.push(v);
                }
            }
        }
        rows.push(ComparisonRow {
            variant,
            seeds: group.len(),
            base_map: mean(&cols[0]),
            novel_map: mean(&cols[1]),
            avg_map: mean(&cols[2]),
            base_recall: mean(&cols[3]),
            novel_recall: mean(&cols[4]),
            avg_recall: mean(&cols[5]),
        });
    }
    rows.sort_by(|a, b| b.avg_map.total_cmp(&a.avg_map));
    Ok(rows)
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Input(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Input(e.to_string()))
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else {
        format!("{v:.1}")
    }
}

/// Plain-text table: method, then base / novel / average mAP@0.25.
pub fn comparison_text(rows: &[ComparisonRow]) -> String {
    let mut out = format!(
        "{:<16} {:>5} {:>7} {:>7} {:>7}\n",
        "Method", "Seeds", "B", "N", "Avg"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<16} {:>5} {:>7} {:>7} {:>7}\n",
            r.variant.name(),
            r.seeds,
            fmt(r.base_map),
            fmt(r.novel_map),
            fmt(r.avg_map)
        ));
    }
    out
}

/// The ablation ladder in its fixed order, whatever the scores.
pub fn ablation_summary(docs: &[MetricsDocument]) -> Result<String> {
    let rows = comparison_rows(docs)?;
    let ordered: Vec<ComparisonRow> = Variant::LADDER
        .iter()
        .filter_map(|v| rows.iter().find(|r| r.variant == *v).cloned())
        .collect();
    Ok(comparison_text(&ordered))
}
