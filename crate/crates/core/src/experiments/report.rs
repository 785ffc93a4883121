use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::artifacts::hash_text;
use super::ExperimentError;
use crate::format::shortest;
use crate::losses::LossVariant;

pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_FILE: &str = "comparison.csv";

/// Outcome of one training run, as written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub kind: String,
    pub variant: LossVariant,
    pub m: f64,
    pub s: f64,
    pub seed: u64,
    pub steps: usize,
    pub diverged: bool,
    pub divergence_step: Option<usize>,
    pub final_loss: Option<f64>,
    /// Accuracy of the final model over the whole training set.
    pub train_accuracy: Option<f64>,
    /// Last held-out verification accuracy.
    pub verification_accuracy: Option<f64>,
    /// Whole-training-set accuracy when the loss switched, for staged runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch_accuracy: Option<f64>,
}

impl RunSummary {
    pub fn run_id(variant: LossVariant, m: f64, s: f64, seed: u64) -> String {
        format!("{variant}-m{}-s{}-seed{seed}", shortest(m), shortest(s))
    }
}

const COLUMNS: &str = "run_id,kind,variant,m,s,seed,steps,diverged,divergence_step,final_loss,train_accuracy,verification_accuracy";

fn opt(v: Option<f64>) -> String {
    v.map(shortest).unwrap_or_default()
}

fn find_summaries(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), ExperimentError> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(ExperimentError::io(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(ExperimentError::io(dir))?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            find_summaries(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == SUMMARY_FILE) {
            out.push(path);
        }
    }
    Ok(())
}

/// Comparison CSV body (header plus one row per run) in report order.
pub fn comparison_table(runs: &mut [RunSummary]) -> Result<String, ExperimentError> {
    let mut seen = BTreeSet::new();
    for r in runs.iter() {
        let key = (r.variant, r.m.to_bits(), r.s.to_bits(), r.seed);
        if !seen.insert(key) {
            return Err(ExperimentError::DuplicateRun(r.run_id.clone()));
        }
    }
    runs.sort_by(|a, b| {
        a.m.total_cmp(&b.m)
            .then(a.variant.cmp(&b.variant))
            .then(a.s.total_cmp(&b.s))
            .then(a.seed.cmp(&b.seed))
    });
    let mut body = format!("{COLUMNS}\n");
    for r in runs.iter() {
        body.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.run_id,
            r.kind,
            r.variant,
            shortest(r.m),
            shortest(r.s),
            r.seed,
            r.steps,
            r.diverged,
            r.divergence_step.map(|s| s.to_string()).unwrap_or_default(),
            opt(r.final_loss),
            opt(r.train_accuracy),
            opt(r.verification_accuracy),
        ));
    }
    Ok(body)
}

/// Merges every `summary.json` under `dir` into one CSV, one row per run,
/// sorted by margin, then variant, scale and seed. The first line records a
/// digest of the merged summaries and the shared seed (`mixed` if runs
/// differ).
pub fn emit_reports(dir: &Path) -> Result<String, ExperimentError> {
    let mut paths = Vec::new();
    find_summaries(dir, &mut paths)?;
    if paths.is_empty() {
        return Err(ExperimentError::NoRunsFound(dir.to_path_buf()));
    }
    let mut runs = Vec::with_capacity(paths.len());
    for path in &paths {
        let text = std::fs::read_to_string(path).map_err(ExperimentError::io(path))?;
        let run: RunSummary = serde_json::from_str(&text).map_err(|source| ExperimentError::ConfigParse {
            path: path.clone(),
            source,
        })?;
        runs.push(run);
    }
    let body = comparison_table(&mut runs)?;
    let seeds: BTreeSet<u64> = runs.iter().map(|r| r.seed).collect();
    let seed = match seeds.len() {
        1 => seeds.first().expect("one seed").to_string(),
        _ => "mixed".to_string(),
    };
    Ok(format!("# config_hash={} seed={seed}\n{body}", hash_text(&body)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(m: f64, seed: u64) -> RunSummary {
        RunSummary {
            run_id: RunSummary::run_id(LossVariant::LiArcFace, m, 64.0, seed),
            kind: "train".into(),
            variant: LossVariant::LiArcFace,
            m,
            s: 64.0,
            seed,
            steps: 10,
            diverged: false,
            divergence_step: None,
            final_loss: Some(1.5),
            train_accuracy: Some(0.9),
            verification_accuracy: None,
            switch_accuracy: None,
        }
    }

    fn put(dir: &Path, sub: &str, s: &RunSummary) {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).unwrap();
        std::fs::write(d.join(SUMMARY_FILE), serde_json::to_string(s).unwrap()).unwrap();
    }

    #[test]
    fn single_run_one_row() {
        let dir = tempfile::tempdir().unwrap();
        put(dir.path(), "a", &summary(0.4, 1));
        let csv = emit_reports(dir.path()).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert!(lines[0].starts_with("# config_hash=") && lines[0].ends_with("seed=1"));
        assert_eq!(lines[1], COLUMNS);
        assert_eq!(lines[2], "li-arcface-m0.4-s64-seed1,train,li-arcface,0.4,64,1,10,false,,1.5,0.9,");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn sorted_by_margin() {
        let dir = tempfile::tempdir().unwrap();
        for (sub, m) in [("x", 0.5), ("y", 0.35), ("z", 0.45)] {
            put(dir.path(), sub, &summary(m, 2));
        }
        let csv = emit_reports(dir.path()).unwrap();
        let ms: Vec<&str> = csv.lines().skip(2).map(|l| l.split(',').nth(3).unwrap()).collect();
        assert_eq!(ms, ["0.35", "0.45", "0.5"]);
    }

    #[test]
    fn duplicates_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_reports(dir.path()), Err(ExperimentError::NoRunsFound(_))));
        put(dir.path(), "a", &summary(0.4, 1));
        put(dir.path(), "b", &summary(0.4, 1));
        assert!(matches!(emit_reports(dir.path()), Err(ExperimentError::DuplicateRun(_))));
    }
}
