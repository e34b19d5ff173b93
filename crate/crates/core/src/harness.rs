//! Evaluation harness: fixed-subset selection, natural/robust accuracy
//! measurement, and report persistence.
//!
//! Attack generation and accuracy measurement always use the same subset in
//! the same order, so paired comparisons across runs line up sample by
//! sample.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{Attack, DefendedPipeline};
use crate::dataset::DatasetSource;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, splitmix64};

/// Deterministic sample-without-replacement of `n` indices.
///
/// Draw `j` is `splitmix64(seed + j)`; a partial Fisher-Yates pass over the
/// index pool consumes one draw per selected element (`pool[i] <->
/// pool[i + d_i mod remaining]`). The modulo bias is negligible for any
/// realistic dataset size. Selecting the whole dataset returns canonical
/// order.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > len {
        return Err(Error::Domain(format!(
            "cannot sample {n} from a dataset of {len}"
        )));
    }
    if n == len {
        return Ok((0..len).collect());
    }
    let mut pool: Vec<usize> = (0..len).collect();
    for i in 0..n {
        let draw = splitmix64(seed.wrapping_add(i as u64));
        let j = i + (draw % (len - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(n);
    Ok(pool)
}

/// Subset selection against a dataset source.
pub fn sample_fixed_subset(dataset: &DatasetSource, n: usize, seed: u64) -> Result<Vec<usize>> {
    sample_indices(dataset.len(), n, seed)
}

/// Robust-accuracy entry for one attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustEntry {
    pub attack: String,
    pub accuracy: f64,
    pub attack_success_rate: f64,
    pub config: serde_json::Value,
    pub correct: Vec<bool>,
}

/// One evaluation run: accuracies plus full provenance. A report without
/// its config echoes is invalid and will not validate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    /// Percent in [0, 100].
    pub natural_accuracy: f64,
    pub robust: Vec<RobustEntry>,
    pub n_evaluated: usize,
    pub subset_seed: u64,
    pub subset_indices: Vec<usize>,
    pub pipeline: serde_json::Value,
    pub dataset: serde_json::Value,
    pub natural_correct: Vec<bool>,
    pub checksums: BTreeMap<String, String>,
    pub wall_clock_ms: u64,
}

impl EvalReport {
    pub const SCHEMA_VERSION: u32 = 1;

    /// Provenance and range invariants.
    pub fn validate(&self) -> Result<()> {
        if self.n_evaluated == 0 {
            return Err(Error::Domain("report covers zero samples".into()));
        }
        if !(0.0..=100.0).contains(&self.natural_accuracy) {
            return Err(Error::Domain("natural accuracy outside [0, 100]".into()));
        }
        if self.pipeline.is_null() || self.dataset.is_null() {
            return Err(Error::Domain("report missing provenance".into()));
        }
        if self.natural_correct.len() != self.n_evaluated {
            return Err(Error::Domain("bitmap length mismatch".into()));
        }
        if self.subset_indices.len() != self.n_evaluated {
            return Err(Error::Domain("subset identity missing".into()));
        }
        for entry in &self.robust {
            if !(0.0..=100.0).contains(&entry.accuracy) {
                return Err(Error::Domain("robust accuracy outside [0, 100]".into()));
            }
            if entry.correct.len() != self.n_evaluated {
                return Err(Error::Domain("bitmap length mismatch".into()));
            }
            if entry.config.is_null() {
                return Err(Error::Domain("attack config echo missing".into()));
            }
        }
        Ok(())
    }

    /// Equality of everything except wall-clock time.
    pub fn same_results(&self, other: &EvalReport) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.wall_clock_ms = 0;
        b.wall_clock_ms = 0;
        a == b
    }
}

fn accuracy_percent(correct: &[bool]) -> f64 {
    100.0 * correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64
}

/// Evaluation settings: subset size and the seed that fixes both the subset
/// and all purifier randomness inside the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSettings {
    pub subset_size: usize,
    pub seed: u64,
    /// Extra artifact checksums (classifier checkpoint, config file).
    #[serde(default)]
    pub checksums: BTreeMap<String, String>,
}

/// Run the full protocol: fixed subset, natural accuracy through the
/// (optional) purifier, then robust accuracy per attack over the same
/// subset. With no purifier and no attacks this reduces to plain test
/// accuracy. Any component failure invalidates the whole report.
pub fn evaluate(
    pipeline: &DefendedPipeline,
    attacks: &[Box<dyn Attack>],
    dataset: &DatasetSource,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let start = Instant::now();
    let indices = sample_fixed_subset(dataset, settings.subset_size, settings.seed)?;
    if indices.is_empty() {
        return Err(Error::Domain("empty evaluation subset".into()));
    }
    let x = dataset.load_indices(&indices)?;
    let labels = x
        .labels()
        .ok_or_else(|| Error::Domain("evaluation requires a labelled dataset".into()))?
        .to_vec();

    let natural_preds = pipeline.predict(&x, derive_seed(settings.seed, 0))?;
    let natural_correct: Vec<bool> = natural_preds
        .iter()
        .zip(labels.iter())
        .map(|(p, t)| p == t)
        .collect();

    let mut robust = Vec::with_capacity(attacks.len());
    for (k, attack) in attacks.iter().enumerate() {
        let result = attack.run(pipeline, &x, &labels)?;
        let preds = pipeline.predict(&result.x_adv, derive_seed(settings.seed, 1 + k as u64))?;
        let correct: Vec<bool> = preds.iter().zip(labels.iter()).map(|(p, t)| p == t).collect();
        robust.push(RobustEntry {
            attack: attack.name(),
            accuracy: accuracy_percent(&correct),
            attack_success_rate: result.success_rate(),
            config: attack.config_echo(),
            correct,
        });
    }

    let report = EvalReport {
        schema_version: EvalReport::SCHEMA_VERSION,
        natural_accuracy: accuracy_percent(&natural_correct),
        robust,
        n_evaluated: indices.len(),
        subset_seed: settings.seed,
        subset_indices: indices,
        pipeline: pipeline.describe(),
        dataset: dataset.describe(),
        natural_correct,
        checksums: settings.checksums.clone(),
        wall_clock_ms: start.elapsed().as_millis() as u64,
    };
    report.validate()?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// Lossless machine-readable record.
    Json,
    /// Natural/Robust column table.
    Table,
}

/// Render a report. JSON round-trips losslessly; the table mirrors the
/// Natural / Robust-per-attack column layout, attacks in config order.
pub fn render_report(report: &EvalReport, format: ReportFormat) -> Result<String> {
    report.validate()?;
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)?),
        ReportFormat::Table => {
            let mut headers = vec!["Natural".to_string()];
            if report.robust.len() == 1 {
                headers.push("Robust".to_string());
            } else {
                for entry in &report.robust {
                    headers.push(format!("Robust[{}]", entry.attack));
                }
            }
            let mut values = vec![format!("{:.2}", report.natural_accuracy)];
            for entry in &report.robust {
                values.push(format!("{:.2}", entry.accuracy));
            }
            let widths: Vec<usize> = headers
                .iter()
                .zip(values.iter())
                .map(|(h, v)| h.len().max(v.len()))
                .collect();
            let mut out = String::new();
            out.push_str(&format!(
                "n = {}   subset_seed = {}\n",
                report.n_evaluated, report.subset_seed
            ));
            for (h, w) in headers.iter().zip(&widths) {
                out.push_str(&format!("{h:<w$}   "));
            }
            out.push('\n');
            for (v, w) in values.iter().zip(&widths) {
                out.push_str(&format!("{v:<w$}   "));
            }
            out.push('\n');
            Ok(out)
        }
    }
}

/// Parse a machine-readable report back.
pub fn parse_report(text: &str) -> Result<EvalReport> {
    let report: EvalReport = serde_json::from_str(text)?;
    report.validate()?;
    Ok(report)
}
