//! The masking-probability sweep and the leave-one-centre-out protocol:
//! one experiment per p on a fixed centre, and one baseline-plus-sweep pair
//! per centre over the whole dataset.

use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::harness::config::ExperimentConfig;
use crate::harness::experiment::{read_json, run_experiment, write_json, RunRecord};
use crate::harness::report;
use crate::{Error, Result};

/// The probability grid of the parameter study.
pub const SWEEP_P_VALUES: [f64; 3] = [0.4, 0.5, 0.6];

/// Outcome of one p sweep on a fixed held-out centre.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SweepRecord {
    pub model: String,
    pub held_out_centre: u32,
    /// The grid, ascending; `runs` holds the completed members in the same
    /// order (shorter than the grid exactly when the sweep failed).
    pub p_values: Vec<f64>,
    pub runs: Vec<RunRecord>,
    /// Winning probability by out-of-distribution Dice, smallest p on ties;
    /// `None` until the sweep completes.
    pub best_p: Option<f64>,
    /// The failing member's error, when one failed.
    pub error: Option<String>,
}

impl SweepRecord {
    /// The winning run, once selection has happened.
    pub fn best(&self) -> Option<&RunRecord> {
        let p = self.best_p?;
        self.runs.iter().find(|r| r.p == Some(p))
    }
}

/// Index of the run with the highest test_out Dice. Runs are ordered by
/// ascending p and the comparison is strict, so ties resolve to the
/// smallest probability.
pub(crate) fn select_best(runs: &[RunRecord]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in runs.iter().enumerate() {
        let Some(set) = r.metrics.per_set.get("test_out") else { continue };
        match best {
            Some((_, d)) if set.dice <= d => {}
            _ => best = Some((i, set.dice)),
        }
    }
    best.map(|(i, _)| i)
}

fn normalized_values(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Config("a p sweep needs at least one probability".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Config("p values must not be NaN".into()));
    }
    let mut vals = values.to_vec();
    vals.sort_by(|a, b| a.partial_cmp(b).expect("NaN rejected above"));
    vals.dedup();
    Ok(vals)
}

/// Where a sweep's record lives: stable in the template (with p and the
/// enabled flag normalized out) and in the grid itself.
pub fn sweep_file_path(template: &ExperimentConfig, values: &[f64]) -> PathBuf {
    let mut normalized = template.clone();
    normalized.masking.enabled = true;
    normalized.masking.p = 0.0;
    let mut h = Sha256::new();
    h.update(normalized.fingerprint().as_bytes());
    for v in values {
        h.update(v.to_le_bytes());
    }
    let id = format!("{:x}", h.finalize());
    template.output_dir.join("sweeps").join(format!("sweep-{}.json", &id[..12]))
}

/// Runs one experiment per probability (masking forced on) and selects the
/// best by test_out Dice, smallest p on ties.
///
/// A failing member aborts the sweep: the partial record — completed runs
/// plus the error — is persisted before the error propagates.
pub fn sweep_p(template: &ExperimentConfig, values: &[f64]) -> Result<SweepRecord> {
    let vals = normalized_values(values)?;
    let path = sweep_file_path(template, &vals);
    let mut record = SweepRecord {
        model: template.model.kind().to_string(),
        held_out_centre: template.held_out_centre,
        p_values: vals.clone(),
        runs: Vec::new(),
        best_p: None,
        error: None,
    };
    for &p in &vals {
        let mut member = template.clone();
        member.masking.enabled = true;
        member.masking.p = p;
        match run_experiment(&member) {
            Ok(r) => record.runs.push(r),
            Err(e) => {
                record.error = Some(format!("p={p}: {e}"));
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent).map_err(|err| Error::io(parent, err))?;
                }
                write_json(&path, &record)?;
                return Err(e);
            }
        }
    }
    record.best_p = select_best(&record.runs).map(|i| {
        record.runs[i].p.expect("sweep members always run with masking enabled")
    });
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_json(&path, &record)?;
    Ok(record)
}

/// Reads a persisted sweep record back from disk.
pub fn load_sweep_record(path: &std::path::Path) -> Result<SweepRecord> {
    read_json(path)
}

/// Reads the persisted all-centres record from an output root.
pub fn load_all_centres(output_dir: &std::path::Path) -> Result<AllCentresRecord> {
    read_json(&output_dir.join("all-centres.json"))
}

/// One centre's row of the leave-one-centre-out table.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CentreOutcome {
    pub centre: u32,
    /// The masking-off run; `None` when it failed.
    pub baseline: Option<RunRecord>,
    /// The p sweep (possibly partial when a member failed).
    pub sweep: Option<SweepRecord>,
    /// Human-readable failure notes; empty on full success.
    pub errors: Vec<String>,
}

impl CentreOutcome {
    /// The sweep's winning run, when the sweep completed.
    pub fn augmented(&self) -> Option<&RunRecord> {
        self.sweep.as_ref().and_then(|s| s.best())
    }
}

/// The full protocol over every centre in the dataset.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AllCentresRecord {
    pub model: String,
    pub p_values: Vec<f64>,
    pub rows: Vec<CentreOutcome>,
}

impl AllCentresRecord {
    /// True when every baseline and every sweep member finished.
    pub fn fully_succeeded(&self) -> bool {
        self.rows.iter().all(|r| r.errors.is_empty())
    }
}

/// Runs baseline + p sweep with each centre held out in turn. Member
/// failures are recorded in the row and the remaining centres still run.
/// The combined record and its rendered table are persisted under the
/// template's output directory.
pub fn run_all_centres(
    template: &ExperimentConfig,
    values: &[f64],
) -> Result<AllCentresRecord> {
    let vals = normalized_values(values)?;
    // Fail fast on template-level config errors; per-centre issues are
    // handled per row below.
    {
        let mut probe = template.clone();
        probe.held_out_centre = 1;
        probe.validate()?;
    }
    let ds = crate::harness::experiment::load_dataset(template)?;
    let mut rows = Vec::with_capacity(ds.centres.len());
    for &centre in &ds.centres {
        let mut row =
            CentreOutcome { centre, baseline: None, sweep: None, errors: Vec::new() };

        let mut base_cfg = template.clone();
        base_cfg.held_out_centre = centre;
        base_cfg.masking.enabled = false;
        match run_experiment(&base_cfg) {
            Ok(r) => row.baseline = Some(r),
            Err(e) => row.errors.push(format!("baseline: {e}")),
        }

        let mut aug_template = template.clone();
        aug_template.held_out_centre = centre;
        aug_template.masking.enabled = true;
        match sweep_p(&aug_template, &vals) {
            Ok(s) => row.sweep = Some(s),
            Err(e) => {
                row.errors.push(format!("sweep: {e}"));
                // The partial record was persisted before the failure; show
                // its completed members in the table.
                if let Ok(partial) =
                    read_json::<SweepRecord>(&sweep_file_path(&aug_template, &vals))
                {
                    row.sweep = Some(partial);
                }
            }
        }

        // Fair comparison: everything in this row must have consumed the
        // identical patient-level split.
        if let (Some(b), Some(s)) = (&row.baseline, &row.sweep) {
            for r in &s.runs {
                if r.split_fingerprint != b.split_fingerprint {
                    row.errors.push(format!(
                        "protocol: augmented run (p={:?}) used split {} but the baseline used {}",
                        r.p,
                        &r.split_fingerprint[..12],
                        &b.split_fingerprint[..12]
                    ));
                }
            }
        }
        rows.push(row);
    }

    let record =
        AllCentresRecord { model: template.model.kind().to_string(), p_values: vals, rows };
    let json_path = template.output_dir.join("all-centres.json");
    write_json(&json_path, &record)?;
    let table_path = template.output_dir.join("all-centres.txt");
    std::fs::write(&table_path, report::combined_table(&record))
        .map_err(|e| Error::io(&table_path, e))?;
    Ok(record)
}
