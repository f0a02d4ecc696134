//! Strategy comparison table built only from persisted reports.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use segdg::eval::{MetricsReport, Summary};
use segdg::strategies::{run_name, CV_REPORT_FILE};
use segdg::types::{Strategy, Task};
use segdg::{Error, Result};

pub const SEEN_TEST: &str = "seen_test";
pub const UNSEEN_TEST: &str = "unseen_test";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    CrossValidation,
    SeenTest,
    UnseenTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::CrossValidation, Split::SeenTest, Split::UnseenTest];

    pub fn title(self) -> &'static str {
        match self {
            Split::CrossValidation => "Cross-Validation",
            Split::SeenTest => "Seen test",
            Split::UnseenTest => "Unseen test",
        }
    }

    /// Report file under `run_dir` holding this split's scores for a run.
    pub fn report_path(self, run_dir: &Path, strategy: Strategy, task: Task) -> std::path::PathBuf {
        let name = run_name(strategy, task);
        match self {
            Split::CrossValidation => run_dir.join("runs").join(name).join(CV_REPORT_FILE),
            Split::SeenTest => run_dir.join("eval").join(name).join(format!("{SEEN_TEST}.json")),
            Split::UnseenTest => run_dir.join("eval").join(name).join(format!("{UNSEEN_TEST}.json")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub task: Task,
    pub split: Split,
    /// One cell per strategy in `Strategy::ALL` order; `None` renders "n/a".
    pub cells: [Option<Summary>; 3],
}

impl TableRow {
    pub fn label(&self) -> String {
        format!("{}: {}", self.task.short(), self.split.title())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvCell {
    task: Task,
    split: Split,
    strategy: Strategy,
    n: usize,
    mean: f64,
    std: f64,
}

/// Unseen-test Dice of one strategy against Conventional on the same task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendEntry {
    pub task: Task,
    pub strategy: Strategy,
    pub unseen_mean: f64,
    pub conventional_unseen_mean: f64,
    pub delta: f64,
}

fn empty_rows() -> Vec<TableRow> {
    Task::ALL
        .iter()
        .flat_map(|&task| {
            Split::ALL.iter().map(move |&split| TableRow {
                task,
                split,
                cells: [None; 3],
            })
        })
        .collect()
}

fn column(strategy: Strategy) -> usize {
    Strategy::ALL.iter().position(|&s| s == strategy).expect("listed")
}

impl Table {
    /// Reads every report the run directory has; absent ones become "n/a".
    pub fn from_run_dir(run_dir: &Path) -> Result<Table> {
        let mut rows = empty_rows();
        for row in &mut rows {
            for strategy in Strategy::ALL {
                let path = row.split.report_path(run_dir, strategy, row.task);
                if path.exists() {
                    row.cells[column(strategy)] = Some(MetricsReport::read_json(&path)?.aggregate);
                }
            }
        }
        Ok(Table { rows })
    }

    pub fn cell(&self, task: Task, split: Split, strategy: Strategy) -> Option<Summary> {
        self.rows
            .iter()
            .find(|r| r.task == task && r.split == split)
            .and_then(|r| r.cells[column(strategy)])
    }

    pub fn missing_cells(&self) -> usize {
        self.rows.iter().map(|r| r.cells.iter().filter(|c| c.is_none()).count()).sum()
    }

    pub fn render(&self) -> String {
        let header: Vec<String> = std::iter::once(String::new())
            .chain(Strategy::ALL.iter().map(|s| s.title().to_string()))
            .collect();
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                std::iter::once(r.label())
                    .chain(r.cells.iter().map(|c| c.map_or("n/a".to_string(), |s| s.to_string())))
                    .collect()
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                body.iter()
                    .map(|r| r[i].chars().count())
                    .chain([header[i].chars().count()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            format!("| {} |", padded.join(" | "))
        };
        let mut out = line(&header) + "\n";
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        out += &format!("|-{}-|\n", rule.join("-|-"));
        for r in &body {
            out += &line(r);
            out.push('\n');
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            for (strategy, cell) in Strategy::ALL.iter().zip(&row.cells) {
                if let Some(s) = cell {
                    w.serialize(CsvCell {
                        task: row.task,
                        split: row.split,
                        strategy: *strategy,
                        n: s.n,
                        mean: s.mean,
                        std: s.std,
                    })
                    .map_err(csv_error)?;
                }
            }
        }
        w.flush().map_err(|e| Error::Io {
            path: "table.csv".into(),
            source: e,
        })
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Table> {
        let mut rows = empty_rows();
        for rec in csv::Reader::from_reader(input).deserialize::<CsvCell>() {
            let c = rec.map_err(csv_error)?;
            let row = rows
                .iter_mut()
                .find(|r| r.task == c.task && r.split == c.split)
                .expect("every task and split has a row");
            row.cells[column(c.strategy)] = Some(Summary {
                n: c.n,
                mean: c.mean,
                std: c.std,
            });
        }
        Ok(Table { rows })
    }

    /// Unseen-test change of each non-conventional strategy, for tasks where
    /// both reports exist.
    pub fn trend(&self) -> Vec<TrendEntry> {
        let mut out = Vec::new();
        for task in Task::ALL {
            let Some(base) = self.cell(task, Split::UnseenTest, Strategy::Standard) else {
                continue;
            };
            for strategy in [Strategy::CrossTask, Strategy::Union] {
                if let Some(s) = self.cell(task, Split::UnseenTest, strategy) {
                    out.push(TrendEntry {
                        task,
                        strategy,
                        unseen_mean: s.mean,
                        conventional_unseen_mean: base.mean,
                        delta: s.mean - base.mean,
                    });
                }
            }
        }
        out
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io {
        path: "table.csv".into(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Text block listing the trend entries, in Dice percentage points.
pub fn render_trend(trend: &[TrendEntry]) -> String {
    let mut out = String::from("Unseen-domain Dice relative to Conventional:\n");
    if trend.is_empty() {
        out += "  n/a\n";
    }
    for t in trend {
        let _ = writeln!(
            out,
            "  {} {}: {:.2} vs {:.2} ({:+.2})",
            t.task.short(),
            t.strategy.title(),
            100.0 * t.unseen_mean,
            100.0 * t.conventional_unseen_mean,
            100.0 * t.delta
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(mean: f64) -> Option<Summary> {
        Some(Summary { n: 4, mean, std: 0.125 })
    }

    #[test]
    fn six_rows_render_with_na() {
        let mut t = Table { rows: empty_rows() };
        t.rows[0].cells = [s(0.6125), s(0.7), s(0.81)];
        let text = t.render();
        assert_eq!(text.lines().count(), 8);
        assert!(text.contains("T1: Cross-Validation"));
        assert!(text.contains("61.25 ± 12.50"));
        assert!(text.contains("n/a"));
        assert!(text.lines().next().unwrap().contains("Crossed Pre-Training"));
        assert_eq!(t.missing_cells(), 15);
    }

    #[test]
    fn csv_round_trip() {
        let mut t = Table { rows: empty_rows() };
        t.rows[2].cells = [s(0.1 + 0.2), None, s(1.0 / 3.0)];
        t.rows[5].cells = [None, s(0.0), None];
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(Table::read_csv(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn trend_needs_conventional_baseline() {
        let mut t = Table { rows: empty_rows() };
        t.rows[2].cells = [s(0.5), s(0.75), None];
        t.rows[5].cells = [None, s(0.9), s(0.9)];
        let trend = t.trend();
        assert_eq!(trend.len(), 1);
        assert_eq!(trend[0].delta, 0.25);
        assert!(render_trend(&trend).contains("(+25.00)"));
    }
}
