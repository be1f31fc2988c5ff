//! Metric rows, best-model selection, and CSV / text-table emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::{Error, Result};

use super::Task;

/// Metric names shared by evaluation and reporting.
pub mod metric {
    pub const MIOU: &str = "mIoU";
    pub const AGREEMENT: &str = "agreement";
    /// Prefix of per-class IoU rows, followed by the class name.
    pub const IOU_PREFIX: &str = "IoU/";
    pub const MAP: &str = "mAP";
    pub const DETECTION: [&str; 6] = ["mAP", "AP50", "AP75", "APs", "APm", "APl"];
    pub const TRAIN_LOSS: &str = "train_loss";
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    /// `teacher`, `supervised`, `distill` or `distill-aux`.
    pub model: String,
    pub steps: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub task: Task,
    pub rows: Vec<ReportRow>,
    /// Best step budget per model by the task's primary metric.
    pub best: BTreeMap<String, u64>,
}

pub const CSV_HEADER: &str = "strategy,steps,metric,value";

impl RunReport {
    pub fn new(task: Task) -> Self {
        RunReport {
            task,
            rows: Vec::new(),
            best: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, model: &str, steps: u64, metric: &str, value: f64) {
        self.rows.push(ReportRow {
            model: model.to_string(),
            steps,
            metric: metric.to_string(),
            value,
        });
    }

    pub fn extend(&mut self, other: RunReport) {
        self.rows.extend(other.rows);
        self.best.extend(other.best);
    }

    /// Drops rows whose (model, steps, metric) key already appeared.
    pub fn dedup(&mut self) {
        let mut seen = std::collections::BTreeSet::new();
        self.rows
            .retain(|r| seen.insert((r.model.clone(), r.steps, r.metric.clone())));
    }

    pub fn primary_metric(&self) -> &'static str {
        match self.task {
            Task::Segmentation => metric::MIOU,
            Task::Detection => metric::MAP,
        }
    }

    pub fn value(&self, model: &str, steps: u64, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.steps == steps && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn models(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.model) {
                out.push(r.model.clone());
            }
        }
        out
    }

    pub fn budgets(&self, model: &str) -> Vec<u64> {
        let mut b: Vec<u64> = self
            .rows
            .iter()
            .filter(|r| r.model == model)
            .map(|r| r.steps)
            .collect();
        b.sort_unstable();
        b.dedup();
        b
    }

    /// Recomputes `best`: for each model, the budget with the highest
    /// primary metric, ties going to the smaller budget.
    pub fn mark_best(&mut self) {
        let key = self.primary_metric();
        let mut best: BTreeMap<String, (u64, f64)> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.metric == key) {
            let e = best.entry(r.model.clone()).or_insert((r.steps, r.value));
            if r.value > e.1 || (r.value == e.1 && r.steps < e.0) {
                *e = (r.steps, r.value);
            }
        }
        self.best = best.into_iter().map(|(m, (s, _))| (m, s)).collect();
    }

    /// Metric of the best-marked run of `model`.
    pub fn best_value(&self, model: &str, metric: &str) -> Option<f64> {
        self.value(model, *self.best.get(model)?, metric)
    }

    /// `strategy,steps,metric,value` rows; best runs carry an extra
    /// `best` row with value 1.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# task={}", self.task).unwrap();
        writeln!(s, "{CSV_HEADER}").unwrap();
        for r in &self.rows {
            writeln!(s, "{},{},{},{}", r.model, r.steps, r.metric, r.value).unwrap();
        }
        for (m, steps) in &self.best {
            writeln!(s, "{m},{steps},best,1").unwrap();
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, reason: &str| Error::Format {
            kind: "report csv",
            reason: format!("line {line}: {reason}"),
        };
        let mut task = None;
        let mut report_rows = Vec::new();
        let mut best = BTreeMap::new();
        let mut saw_header = false;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# task=") {
                task = Some(rest.parse::<Task>().map_err(|_| bad(n, "unknown task"))?);
                continue;
            }
            if line == CSV_HEADER {
                saw_header = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(n, "expected four fields"));
            }
            let steps: u64 = f[1].parse().map_err(|_| bad(n, "steps is not an integer"))?;
            if f[2] == "best" {
                best.insert(f[0].to_string(), steps);
                continue;
            }
            let value: f64 = f[3].parse().map_err(|_| bad(n, "value is not a number"))?;
            report_rows.push(ReportRow {
                model: f[0].to_string(),
                steps,
                metric: f[2].to_string(),
                value,
            });
        }
        if !saw_header {
            return Err(bad(0, "missing header"));
        }
        Ok(RunReport {
            task: task.ok_or_else(|| bad(0, "missing task line"))?,
            rows: report_rows,
            best,
        })
    }

    /// Aligned text tables: the best run of each model with all its
    /// metrics, then the primary metric (and agreement, when present) for
    /// every step budget.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let models = self.models();
        let mut metrics: Vec<String> = Vec::new();
        for r in &self.rows {
            if r.metric != metric::TRAIN_LOSS && !metrics.contains(&r.metric) {
                metrics.push(r.metric.clone());
            }
        }
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v));

        let title = match self.task {
            Task::Segmentation => "Best run per model (IoU in %)",
            Task::Detection => "Best run per model (AP in %)",
        };
        writeln!(out, "{title}").unwrap();
        let headers: Vec<String> = metrics
            .iter()
            .map(|m| m.strip_prefix(metric::IOU_PREFIX).unwrap_or(m).to_string())
            .collect();
        let width = headers.iter().map(String::len).max().unwrap_or(6).max(6);
        write!(out, "{:<12} {:>8}", "model", "steps").unwrap();
        for h in &headers {
            write!(out, " {h:>width$}").unwrap();
        }
        out.push('\n');
        for m in &models {
            let Some(&steps) = self.best.get(m) else { continue };
            write!(out, "{m:<12} {steps:>8}").unwrap();
            for k in &metrics {
                write!(out, " {:>width$}", pct(self.value(m, steps, k))).unwrap();
            }
            out.push('\n');
        }

        let mut curve = vec![self.primary_metric().to_string()];
        if metrics.iter().any(|m| m == metric::AGREEMENT) {
            curve.push(metric::AGREEMENT.to_string());
        }
        for key in curve {
            writeln!(out, "\n{key} by step budget (%)").unwrap();
            let mut budgets: Vec<u64> = models.iter().flat_map(|m| self.budgets(m)).collect();
            budgets.sort_unstable();
            budgets.dedup();
            write!(out, "{:<12}", "model").unwrap();
            for b in &budgets {
                write!(out, " {b:>8}").unwrap();
            }
            out.push('\n');
            for m in &models {
                if !self.rows.iter().any(|r| &r.model == m && r.metric == key) {
                    continue;
                }
                write!(out, "{m:<12}").unwrap();
                for b in &budgets {
                    write!(out, " {:>8}", pct(self.value(m, *b, &key))).unwrap();
                }
                out.push('\n');
            }
        }
        out
    }
}
