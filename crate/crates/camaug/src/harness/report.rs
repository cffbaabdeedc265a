//! Text rendering of run, sweep, and all-centres records: aligned tables
//! with the augmented Dice cells annotated by the winning probability,
//! e.g. "0.7470 (40%)".

use crate::harness::sweep::{AllCentresRecord, SweepRecord};
use crate::metrics::dice_with_p;

fn fmt_p(p: f64) -> String {
    format!("{p:.2}")
}

/// The per-centre comparison table: one row per held-out centre, baseline
/// against the sweep winner, both scored on test_out Dice. Failed members
/// render as FAILED and their reasons are listed under the table.
pub fn combined_table(rec: &AllCentresRecord) -> String {
    let grid: Vec<String> = rec.p_values.iter().map(|&p| fmt_p(p)).collect();
    let mut out = format!("model: {}    p grid: {}\n", rec.model, grid.join(" / "));
    out.push_str(&format!(
        "{:<8}{:<12}{:<18}{}\n",
        "centre", "baseline", "augmented", "delta"
    ));
    let mut notes: Vec<String> = Vec::new();
    for row in &rec.rows {
        let base = row
            .baseline
            .as_ref()
            .and_then(|r| r.metrics.per_set.get("test_out"))
            .map(|s| s.dice);
        let aug = row.augmented().and_then(|r| {
            let dice = r.metrics.per_set.get("test_out")?.dice;
            Some((dice, r.p.expect("augmented runs carry p")))
        });
        let base_cell = base.map_or_else(|| "FAILED".to_string(), |d| format!("{d:.4}"));
        let aug_cell = aug.map_or_else(|| "FAILED".to_string(), |(d, p)| dice_with_p(d, p));
        let delta_cell = match (base, aug) {
            (Some(b), Some((a, _))) => format!("{:+.4}", a - b),
            _ => "-".to_string(),
        };
        out.push_str(&format!(
            "{:<8}{:<12}{:<18}{}\n",
            row.centre, base_cell, aug_cell, delta_cell
        ));
        for e in &row.errors {
            notes.push(format!("centre {}: {e}", row.centre));
        }
    }
    if !notes.is_empty() {
        out.push('\n');
        for n in notes {
            out.push_str(&n);
            out.push('\n');
        }
    }
    out
}

/// The sweep comparison table: one row per probability with all three
/// evaluation sets, the winner marked.
pub fn sweep_table(rec: &SweepRecord) -> String {
    let mut out = format!(
        "model: {}    held-out centre: {}\n{:<6}{:<9}{:<9}{}\n",
        rec.model, rec.held_out_centre, "p", "val", "test_in", "test_out"
    );
    for r in &rec.runs {
        let p = r.p.expect("sweep members carry p");
        let cell = |set: &str| {
            r.metrics
                .per_set
                .get(set)
                .map_or_else(|| "-".to_string(), |s| format!("{:.4}", s.dice))
        };
        let test_out = r
            .metrics
            .per_set
            .get("test_out")
            .map_or_else(|| "-".to_string(), |s| dice_with_p(s.dice, p));
        let marker = if rec.best_p == Some(p) { "  <- selected" } else { "" };
        out.push_str(&format!(
            "{:<6}{:<9}{:<9}{}{}\n",
            fmt_p(p),
            cell("val"),
            cell("test_in"),
            test_out,
            marker
        ));
    }
    if let Some(err) = &rec.error {
        out.push_str(&format!("sweep failed: {err}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    use crate::harness::experiment::RunRecord;
    use crate::harness::sweep::CentreOutcome;
    use crate::metrics::{MetricsReport, SetMetrics};

    fn run(centre: u32, p: Option<f64>, sets: &[(&str, f64)]) -> RunRecord {
        let mut per_set = BTreeMap::new();
        for &(name, dice) in sets {
            per_set.insert(
                name.to_string(),
                SetMetrics { dice, recall: 0.5, accuracy: 0.9, samples: 3 },
            );
        }
        RunRecord {
            fingerprint: "fp".into(),
            split_fingerprint: "split".into(),
            model: "unet".into(),
            held_out_centre: centre,
            masking_enabled: p.is_some(),
            p,
            seed: 0,
            epochs_trained: 1,
            best_epoch: 0,
            best_val_dice: 0.5,
            loss_curve: Vec::new(),
            metrics: MetricsReport {
                model: "unet".into(),
                held_out_centre: centre,
                p,
                fingerprint: "fp".into(),
                per_set,
            },
        }
    }

    #[test]
    fn combined_table_annotates_augmented_cells_with_p() {
        let sweep = SweepRecord {
            model: "unet".into(),
            held_out_centre: 3,
            p_values: vec![0.4],
            runs: vec![run(3, Some(0.4), &[("test_out", 0.7470)])],
            best_p: Some(0.4),
            error: None,
        };
        let rec = AllCentresRecord {
            model: "unet".into(),
            p_values: vec![0.4],
            rows: vec![CentreOutcome {
                centre: 3,
                baseline: Some(run(3, None, &[("test_out", 0.7054)])),
                sweep: Some(sweep),
                errors: Vec::new(),
            }],
        };
        let table = combined_table(&rec);
        assert!(table.contains("0.7054"), "baseline cell, got:\n{table}");
        assert!(table.contains("0.7470 (40%)"), "annotated augmented cell, got:\n{table}");
        assert!(table.contains("+0.0416"), "delta column, got:\n{table}");
    }

    #[test]
    fn combined_table_marks_failures_and_lists_reasons() {
        let rec = AllCentresRecord {
            model: "unet".into(),
            p_values: vec![0.4],
            rows: vec![CentreOutcome {
                centre: 1,
                baseline: None,
                sweep: None,
                errors: vec!["baseline: boom".into()],
            }],
        };
        let table = combined_table(&rec);
        assert!(table.contains("FAILED"), "got:\n{table}");
        assert!(table.contains("centre 1: baseline: boom"), "got:\n{table}");
    }

    #[test]
    fn sweep_table_marks_the_selected_probability() {
        let rec = SweepRecord {
            model: "unet".into(),
            held_out_centre: 2,
            p_values: vec![0.4, 0.6],
            runs: vec![
                run(2, Some(0.4), &[("val", 0.71), ("test_in", 0.70), ("test_out", 0.58)]),
                run(2, Some(0.6), &[("val", 0.72), ("test_in", 0.69), ("test_out", 0.6062)]),
            ],
            best_p: Some(0.6),
            error: None,
        };
        let table = sweep_table(&rec);
        assert!(table.contains("0.6062 (60%)"), "got:\n{table}");
        let selected: Vec<&str> =
            table.lines().filter(|l| l.contains("<- selected")).collect();
        assert_eq!(selected.len(), 1, "exactly one winner, got:\n{table}");
        assert!(selected[0].starts_with("0.60"), "p=0.6 row wins, got: {}", selected[0]);
    }
}
