//! Cross-method comparison of run summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiment::RunReport;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedEntry {
    /// 1-based; methods with equal block efficiency share a rank.
    pub rank: usize,
    pub method: String,
    pub block_efficiency: f64,
    pub modeled_speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScenarioRanking {
    pub scenario: String,
    pub entries: Vec<RankedEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonTable {
    /// Methods in name order; the column order of [`ComparisonTable::to_text`].
    pub methods: Vec<String>,
    pub scenarios: Vec<ScenarioRanking>,
}

/// Ranks methods by block efficiency within each scenario.
///
/// Every method must have been run on the same set of scenarios, and a
/// (scenario, method) pair may appear only once.
pub fn compare_report(reports: &[RunReport]) -> Result<ComparisonTable> {
    if reports.is_empty() {
        return Err(Error::EmptyRun);
    }
    let mut by_method: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut cells: BTreeMap<&str, Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        if !by_method.entry(&r.method).or_default().insert(&r.scenario) {
            return Err(Error::ScenarioMismatch(format!(
                "method {:?} appears twice in scenario {:?}",
                r.method, r.scenario
            )));
        }
        cells.entry(&r.scenario).or_default().push(r);
    }
    let all: BTreeSet<&str> = cells.keys().copied().collect();
    if let Some((m, s)) = by_method.iter().find(|(_, s)| **s != all) {
        let missing: Vec<&str> = all.difference(s).copied().collect();
        return Err(Error::ScenarioMismatch(format!(
            "method {m:?} is missing scenarios {missing:?}"
        )));
    }
    let scenarios = cells
        .into_iter()
        .map(|(scenario, mut rs)| {
            rs.sort_by(|a, b| {
                b.block_efficiency
                    .total_cmp(&a.block_efficiency)
                    .then_with(|| a.method.cmp(&b.method))
            });
            let mut entries: Vec<RankedEntry> = Vec::with_capacity(rs.len());
            for (i, r) in rs.iter().enumerate() {
                let rank = match entries.last() {
                    Some(prev) if prev.block_efficiency == r.block_efficiency => prev.rank,
                    _ => i + 1,
                };
                entries.push(RankedEntry {
                    rank,
                    method: r.method.clone(),
                    block_efficiency: r.block_efficiency,
                    modeled_speedup: r.modeled_speedup,
                });
            }
            ScenarioRanking {
                scenario: scenario.to_string(),
                entries,
            }
        })
        .collect();
    Ok(ComparisonTable {
        methods: by_method.keys().map(|m| m.to_string()).collect(),
        scenarios,
    })
}

impl ComparisonTable {
    /// Long-format CSV: `scenario, rank, method, block_efficiency, modeled_speedup`.
    pub fn to_csv(&self) -> String {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(["scenario", "rank", "method", "block_efficiency", "modeled_speedup"])
            .expect("in-memory write");
        for s in &self.scenarios {
            for e in &s.entries {
                wtr.write_record([
                    s.scenario.clone(),
                    e.rank.to_string(),
                    e.method.clone(),
                    e.block_efficiency.to_string(),
                    e.modeled_speedup.to_string(),
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(wtr.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("table serializes");
        s.push('\n');
        s
    }

    /// One row per scenario, one column per method. Cells read `τ (rank)`;
    /// the best method in a row is marked `*`.
    pub fn to_text(&self) -> String {
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["scenario".to_string()];
        header.extend(self.methods.iter().cloned());
        rows.push(header);
        for s in &self.scenarios {
            let mut row = vec![s.scenario.clone()];
            for m in &self.methods {
                let e = s.entries.iter().find(|e| &e.method == m).expect("every method ranked");
                let mark = if e.rank == 1 { "*" } else { "" };
                row.push(format!("{:.3} ({}){mark}", e.block_efficiency, e.rank));
            }
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in rows.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, &w))| if c == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::DecodeMode;
    use crate::experiment::{PromptRecord, SCHEMA_VERSION};
    use crate::metrics::BlockRecord;

    fn report(scenario: &str, method: &str, accepted: &[usize]) -> RunReport {
        let blocks: Vec<BlockRecord> = accepted
            .iter()
            .map(|&a| BlockRecord {
                position: 0,
                accepted_count: a,
                tokens_emitted: a + 1,
                weight_used: vec![1.0],
            })
            .collect();
        let tau = accepted.iter().map(|a| (a + 1) as f64).sum::<f64>() / accepted.len() as f64;
        RunReport {
            schema_version: SCHEMA_VERSION,
            scenario: scenario.into(),
            method: method.into(),
            seed: 0,
            mode: DecodeMode::Greedy,
            gamma: 5,
            d: None,
            sources: vec!["a".into()],
            num_blocks: blocks.len(),
            total_tokens: 0,
            block_efficiency: tau,
            latency_ratio: 0.063,
            modeled_speedup: tau / 1.315,
            prompts: vec![PromptRecord {
                index: 0,
                seed: 0,
                prompt_len: 0,
                generated: vec![],
                block_efficiency: tau,
                blocks,
            }],
        }
    }

    #[test]
    fn single_report_is_one_column() {
        let t = compare_report(&[report("s", "m", &[2, 4, 0])]).unwrap();
        assert_eq!(t.methods, vec!["m"]);
        assert_eq!(t.scenarios[0].entries[0].rank, 1);
        assert_eq!(t.scenarios[0].entries[0].block_efficiency, 3.0);
        let text = t.to_text();
        assert_eq!(text.lines().next().unwrap().split_whitespace().count(), 2);
    }

    #[test]
    fn ties_share_rank_in_name_order() {
        let t = compare_report(&[
            report("s", "zeta", &[1, 1]),
            report("s", "alpha", &[1, 1]),
            report("s", "mid", &[3, 3]),
        ])
        .unwrap();
        let e = &t.scenarios[0].entries;
        let got: Vec<(&str, usize)> = e.iter().map(|e| (e.method.as_str(), e.rank)).collect();
        assert_eq!(got, vec![("mid", 1), ("alpha", 2), ("zeta", 2)]);
    }

    #[test]
    fn mismatched_scenarios_are_rejected() {
        let err = compare_report(&[report("a", "m", &[1]), report("b", "n", &[1])]).unwrap_err();
        assert!(matches!(err, Error::ScenarioMismatch(_)));
        let dup = compare_report(&[report("a", "m", &[1]), report("a", "m", &[2])]).unwrap_err();
        assert!(matches!(dup, Error::ScenarioMismatch(_)));
    }

    #[test]
    fn csv_layout() {
        let t = compare_report(&[report("s", "m", &[0]), report("s", "n", &[5])]).unwrap();
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "scenario,rank,method,block_efficiency,modeled_speedup");
        assert!(lines[1].starts_with("s,1,n,6,"));
        assert!(lines[2].starts_with("s,2,m,1,"));
    }
}
