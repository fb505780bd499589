//! Side-by-side tables of run reports, averaged over seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::attack::Outcome;

use super::run::RunReport;
use super::tasks::TaskKind;
use super::{ArchitectureChoice, ExperimentError, Result};

const NA: &str = "N/A";

const METRICS: [&str; 5] = [
    "runs",
    "accuracy",
    "finetune_privacy",
    "inference_privacy",
    "fine_tune_bytes",
];

/// One metric of one architecture, one value per task column.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub architecture: String,
    pub metric: String,
    /// `None` is a Not-Applicable cell.
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub tasks: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

fn task_name(t: TaskKind) -> String {
    serde_json::to_value(t)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

fn outcome(o: &Outcome<f64>) -> Option<f64> {
    o.as_option().copied()
}

fn metric(reports: &[&RunReport], name: &str) -> Option<f64> {
    match name {
        "runs" => Some(reports.len() as f64),
        "accuracy" => mean(reports.iter().map(|r| Some(r.accuracy.fine_tuned))),
        "finetune_privacy" => mean(reports.iter().map(|r| outcome(&r.finetune_privacy))),
        "inference_privacy" => mean(reports.iter().map(|r| outcome(&r.inference_privacy))),
        "fine_tune_bytes" => mean(reports.iter().map(|r| Some(r.comm.fine_tune_bytes as f64))),
        _ => None,
    }
}

/// Groups reports by architecture and task, averages over seeds and adds
/// differences against the split-learning baseline.
pub fn emit_comparison(reports: &[RunReport]) -> Result<Comparison> {
    let first = reports
        .first()
        .ok_or_else(|| ExperimentError::Config("comparison needs at least one report".into()))?;
    if let Some(r) = reports.iter().find(|r| r.model != first.model) {
        return Err(ExperimentError::Config(format!(
            "cannot compare runs with different model configs (seed {} {:?} vs seed {} {:?})",
            first.seed, first.model, r.seed, r.model
        )));
    }
    let mut tasks: Vec<TaskKind> = reports.iter().map(|r| r.task).collect();
    tasks.sort_by_key(|t| task_name(*t));
    tasks.dedup();
    let mut groups: BTreeMap<ArchitectureChoice, BTreeMap<String, Vec<&RunReport>>> = BTreeMap::new();
    for r in reports {
        groups
            .entry(r.architecture)
            .or_default()
            .entry(task_name(r.task))
            .or_default()
            .push(r);
    }
    let names: Vec<String> = tasks.iter().map(|t| task_name(*t)).collect();
    let cell = |arch: ArchitectureChoice, task: &str, m: &str| {
        groups.get(&arch).and_then(|g| g.get(task)).and_then(|rs| metric(rs, m))
    };
    let mut rows = Vec::new();
    for &arch in groups.keys() {
        for m in METRICS {
            rows.push(ComparisonRow {
                architecture: arch.name().into(),
                metric: m.into(),
                values: names.iter().map(|t| cell(arch, t, m)).collect(),
            });
        }
        for m in &METRICS[1..] {
            rows.push(ComparisonRow {
                architecture: arch.name().into(),
                metric: format!("delta_{m}"),
                values: names
                    .iter()
                    .map(|t| Some(cell(arch, t, m)? - cell(ArchitectureChoice::Sl, t, m)?))
                    .collect(),
            });
        }
    }
    Ok(Comparison { tasks: names, rows })
}

fn fmt_cell(v: Option<f64>, precise: bool) -> String {
    match v {
        None => NA.into(),
        Some(x) if precise => format!("{x}"),
        Some(x) => format!("{x:.2}"),
    }
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = format!("architecture,metric,{}\n", self.tasks.join(","));
        for r in &self.rows {
            let cells: Vec<String> = r.values.iter().map(|v| fmt_cell(*v, true)).collect();
            let _ = writeln!(s, "{},{},{}", r.architecture, r.metric, cells.join(","));
        }
        s
    }

    /// Aligned plain-text table, one block per architecture.
    pub fn to_text(&self) -> String {
        let w = self.tasks.iter().map(String::len).max().unwrap_or(0).max(12);
        let mut s = format!("{:<24}", "");
        for t in &self.tasks {
            let _ = write!(s, " {t:>w$}");
        }
        s.push('\n');
        let mut current = "";
        for r in &self.rows {
            if r.architecture != current {
                current = &r.architecture;
                let _ = writeln!(s, "[{current}]");
            }
            let _ = write!(s, "  {:<22}", r.metric);
            for v in &r.values {
                let _ = write!(s, " {:>w$}", fmt_cell(*v, false));
            }
            s.push('\n');
        }
        s
    }
}

/// Parses the output of [`Comparison::to_csv`].
pub fn parse_comparison_csv(text: &str) -> Result<Comparison> {
    let bad = |line: usize, m: &str| ExperimentError::Config(format!("comparison csv line {line}: {m}"));
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| bad(1, "empty input"))?.split(',').collect();
    if header.len() < 2 || header[0] != "architecture" || header[1] != "metric" {
        return Err(bad(1, "unexpected header"));
    }
    let tasks: Vec<String> = header[2..].iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(bad(i + 2, "wrong number of cells"));
        }
        let values = cells[2..]
            .iter()
            .map(|c| match *c {
                NA => Ok(None),
                c => c.parse::<f64>().map(Some).map_err(|_| bad(i + 2, "bad number")),
            })
            .collect::<Result<_>>()?;
        rows.push(ComparisonRow {
            architecture: cells[0].into(),
            metric: cells[1].into(),
            values,
        });
    }
    Ok(Comparison { tasks, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackReport;
    use crate::experiment::run::Accuracy;
    use crate::model::ModelConfig;
    use crate::protocol::CommReport;

    fn report(arch: ArchitectureChoice, seed: u64, f1: Option<f64>, bytes: u64) -> RunReport {
        RunReport {
            version: 1,
            config_hash: String::new(),
            architecture: arch,
            task: TaskKind::KeyedLookup,
            seed,
            model: ModelConfig::default(),
            accuracy: Accuracy {
                zero_shot: 0.0,
                fine_tuned: 0.5 + seed as f64 / 10.0,
            },
            finetune_privacy: f1.map_or(Outcome::NotApplicable, Outcome::Applicable),
            inference_privacy: Outcome::Applicable(40.0),
            attack: AttackReport {
                finetune_activation: Outcome::NotApplicable,
                finetune_gradient: Outcome::NotApplicable,
                inference: Outcome::NotApplicable,
            },
            shared_layer_count: 2,
            comm: CommReport {
                fine_tune_bytes: bytes,
                ..CommReport::default()
            },
            loss_curve: vec![],
            wall_time_secs: 1.0,
        }
    }

    fn suite() -> Vec<RunReport> {
        vec![
            report(ArchitectureChoice::Sl, 0, Some(90.0), 1000),
            report(ArchitectureChoice::Sl, 1, Some(80.0), 1000),
            report(ArchitectureChoice::Online, 0, Some(30.0), 300),
            report(ArchitectureChoice::Gradfree, 0, None, 150),
            report(ArchitectureChoice::Offline, 0, None, 77),
        ]
    }

    #[test]
    fn layout_and_deltas() {
        let c = emit_comparison(&suite()).unwrap();
        assert_eq!(c.tasks, vec!["keyed-lookup"]);
        assert_eq!(c.rows.len(), 4 * 9);
        let get = |a: &str, m: &str| {
            c.rows
                .iter()
                .find(|r| r.architecture == a && r.metric == m)
                .unwrap()
                .values[0]
        };
        assert_eq!(get("sl", "finetune_privacy"), Some(85.0));
        assert_eq!(get("online", "delta_finetune_privacy"), Some(-55.0));
        assert_eq!(get("gradfree", "finetune_privacy"), None);
        assert_eq!(get("offline", "delta_fine_tune_bytes"), Some(-923.0));
        assert_eq!(get("sl", "runs"), Some(2.0));
        let text = c.to_text();
        assert!(text.contains("[online]") && text.contains("N/A"));
    }

    #[test]
    fn csv_round_trip() {
        let c = emit_comparison(&suite()).unwrap();
        assert_eq!(parse_comparison_csv(&c.to_csv()).unwrap(), c);
    }

    #[test]
    fn refuses_mixed_models() {
        let mut reports = suite();
        reports[1].model.d_model = 32;
        assert!(emit_comparison(&reports)
            .unwrap_err()
            .to_string()
            .contains("model config"));
        assert!(emit_comparison(&[]).is_err());
    }
}
