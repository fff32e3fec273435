use std::fmt::Write as _;
use std::path::Path;

use super::{AblationRow, ExperimentResult};
use crate::error::{Error, Result};
use crate::losses::LossMask;

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `held_out,seed,accuracy`, one line per run.
pub fn write_results_csv(path: &Path, results: &[ExperimentResult]) -> Result<()> {
    let mut s = String::from("held_out,seed,accuracy\n");
    for r in results {
        for (seed, acc) in r.seeds.iter().zip(&r.accuracies) {
            writeln!(s, "{},{seed},{acc:.4}", r.held_out).unwrap();
        }
    }
    write(path, &s)
}

/// `held_out,mean,std`, one line per result row.
pub fn write_aggregate_csv(path: &Path, rows: &[ExperimentResult]) -> Result<()> {
    let mut s = String::from("held_out,mean,std\n");
    for r in rows {
        writeln!(s, "{},{:.4},{:.4}", r.held_out, r.mean, r.std).unwrap();
    }
    write(path, &s)
}

/// One boolean column per loss plus the mean accuracy.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut s = LossMask::COLUMNS.join(",");
    s.push_str(",mean_accuracy\n");
    for r in rows {
        for f in r.mask.flags() {
            write!(s, "{f},").unwrap();
        }
        writeln!(s, "{:.4}", r.mean_accuracy).unwrap();
    }
    write(path, &s)
}

/// Domains as columns with a trailing Avg, "mean ± std" cells.
pub fn render_results_table(title: &str, rows: &[ExperimentResult]) -> String {
    let cells: Vec<(String, String)> = rows
        .iter()
        .map(|r| (r.held_out.clone(), format!("{:.1} ± {:.1}", r.mean, r.std)))
        .collect();
    let width = |i: usize| cells[i].0.chars().count().max(cells[i].1.chars().count());
    let label = title.chars().count().max(6);
    let mut head = format!("{:<label$}", "Method");
    let mut body = format!("{title:<label$}");
    for (i, (h, c)) in cells.iter().enumerate() {
        let w = width(i);
        write!(head, " | {h:>w$}").unwrap();
        write!(body, " | {c:>w$}").unwrap();
    }
    let rule = "-".repeat(head.chars().count());
    format!("{head}\n{rule}\n{body}\n")
}

/// Check-mark grid of loss masks with the resulting average accuracy.
pub fn render_ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    for c in LossMask::COLUMNS {
        write!(s, "{c:>6} ").unwrap();
    }
    s.push_str("|    Avg\n");
    s.push_str(&"-".repeat(7 * LossMask::COLUMNS.len() + 9));
    s.push('\n');
    for r in rows {
        for f in r.mask.flags() {
            write!(s, "{:>6} ", if f { "✓" } else { "" }).unwrap();
        }
        writeln!(s, "| {:>6.1}", r.mean_accuracy).unwrap();
    }
    s
}
