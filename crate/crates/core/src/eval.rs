//! Single-step and roll-out evaluation.
//!
//! Errors are per-vertex Euclidean distances pooled over frames `1..=h` of
//! every sequence for each horizon `h`, reported in millimeters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::network::{predict_sequence, Model, PredictMode};
use crate::physics::Trajectory;

pub const DEFAULT_HORIZONS: [usize; 5] = [10, 20, 30, 40, 50];
pub const CSV_HEADER: &str = "model,mode,horizon,mean_mm,sd_mm";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EvalMode {
    /// Ground-truth previous positions are fed at every step.
    #[serde(rename = "single-step")]
    SingleStep,
    /// Predictions are fed back.
    #[serde(rename = "rollout")]
    RollOut,
}

impl EvalMode {
    pub const BOTH: [EvalMode; 2] = [EvalMode::SingleStep, EvalMode::RollOut];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::SingleStep => "single-step",
            EvalMode::RollOut => "rollout",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single-step" | "single" => Ok(EvalMode::SingleStep),
            "rollout" | "roll-out" => Ok(EvalMode::RollOut),
            _ => Err(Error::contract(format!("unknown evaluation mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon: usize,
    pub mean_mm: f64,
    pub sd_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub mode: EvalMode,
    pub sequences: usize,
    pub rows: Vec<HorizonRow>,
}

impl EvalReport {
    pub fn row(&self, horizon: usize) -> Option<&HorizonRow> {
        self.rows.iter().find(|r| r.horizon == horizon)
    }

    /// CSV lines without the header.
    pub fn csv_lines(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{:.6},{:.6}",
                    self.model, self.mode, r.horizon, r.mean_mm, r.sd_mm
                )
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        reports_to_csv(std::slice::from_ref(self))
    }
}

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        for line in r.csv_lines() {
            out.push_str(&line);
            out.push('\n');
        }
    }
    out
}

/// Population mean and standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-frame, per-vertex errors in meters: `errors[t-1][v]` for frame `t`.
pub fn vertex_errors(
    model: &Model,
    g: &Graph,
    seq: &Trajectory,
    steps: usize,
    mode: EvalMode,
) -> Result<Vec<Vec<f64>>> {
    if seq.num_frames() < steps + 1 {
        return Err(Error::contract(format!(
            "horizon {steps} needs {} frames, sequence has {}",
            steps + 1,
            seq.num_frames()
        )));
    }
    let drivers = &seq.x[..=steps];
    let mode = match mode {
        EvalMode::SingleStep => PredictMode::SingleStep(&seq.y),
        EvalMode::RollOut => PredictMode::RollOut,
    };
    let preds = predict_sequence(model, g, drivers, &seq.y[0], mode)?;
    preds
        .iter()
        .zip(&seq.y[1..])
        .map(|(p, y)| Ok(p.sub(y)?.row_norms()?.into_data()))
        .collect()
}

pub fn evaluate(
    model: &Model,
    g: &Graph,
    seqs: &[Trajectory],
    horizons: &[usize],
    mode: EvalMode,
) -> Result<EvalReport> {
    if seqs.is_empty() {
        return Err(Error::contract("evaluation set is empty"));
    }
    if horizons.is_empty() || horizons.contains(&0) {
        return Err(Error::contract("horizons must be non-empty and positive"));
    }
    let max_h = *horizons.iter().max().expect("non-empty");
    let per_seq: Vec<Vec<Vec<f64>>> = seqs
        .iter()
        .map(|s| vertex_errors(model, g, s, max_h, mode))
        .collect::<Result<_>>()?;
    let mut sorted = horizons.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let rows = sorted
        .into_iter()
        .map(|h| {
            let pooled: Vec<f64> = per_seq
                .iter()
                .flat_map(|frames| frames[..h].iter().flatten())
                .map(|e| e * 1000.0)
                .collect();
            let (mean_mm, sd_mm) = mean_sd(&pooled);
            HorizonRow {
                horizon: h,
                mean_mm,
                sd_mm,
            }
        })
        .collect();
    Ok(EvalReport {
        model: model.kind().to_string(),
        mode,
        sequences: seqs.len(),
        rows,
    })
}
