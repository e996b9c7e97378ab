//! Routing-coefficient inspection of a single example.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::data::{Cue, Sample};
use crate::error::{Error, Result};
use crate::model::GraphCage;
use crate::modality::Modality;
use crate::trace::{RoutingTrace, Stage};

/// File stem of a trace: `construction_text`, `aggregation_audio_k2`, ...
pub fn trace_stem(t: &RoutingTrace) -> String {
    match t.k {
        Some(k) => format!("{}_{}_k{k}", t.stage.as_str(), t.modality.name()),
        None => format!("{}_{}", t.stage.as_str(), t.modality.name()),
    }
}

/// Mean peak routing coefficient on cue steps and on all other steps of a
/// construction trace, using the final routing iteration. A step's peak is
/// the largest coefficient it sends to any node; `None` when either group
/// is empty.
pub fn cue_peak_means(trace: &RoutingTrace, cue_steps: &[usize]) -> Option<(f64, f64)> {
    if trace.stage != Stage::Construction || trace.iterations.is_empty() {
        return None;
    }
    let peaks = trace.peak_by_step(trace.p() - 1);
    let (mut cue, mut other) = ((0.0, 0usize), (0.0, 0usize));
    for (i, &v) in peaks.iter().enumerate() {
        let g = if cue_steps.contains(&i) { &mut cue } else { &mut other };
        g.0 += v;
        g.1 += 1;
    }
    (cue.1 > 0 && other.1 > 0).then(|| (cue.0 / cue.1 as f64, other.0 / other.1 as f64))
}

#[derive(Clone, Debug, Serialize)]
pub struct ConstructionSummary {
    pub modality: Modality,
    pub p: usize,
    pub steps: usize,
    pub nodes: usize,
    pub max_normalization_error: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub cue_steps: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cue_mean_peak: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub other_mean_peak: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct InspectReport {
    pub prediction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<f64>,
    pub construction: Vec<ConstructionSummary>,
    pub files: Vec<PathBuf>,
    #[serde(skip)]
    pub traces: Vec<RoutingTrace>,
}

fn cue_steps(cues: &[Cue], m: Modality) -> Vec<usize> {
    cues.iter()
        .filter(|c| c.modality == m)
        .map(|c| c.position)
        .collect()
}

/// Runs one forward pass and summarizes its construction routing.
pub fn inspect(model: &GraphCage, sample: &Sample) -> Result<InspectReport> {
    let (prediction, traces) = model.inspect(&sample.bundle)?;
    let construction = traces
        .iter()
        .filter(|t| t.stage == Stage::Construction)
        .map(|t| {
            let steps = cue_steps(&sample.cues, t.modality);
            let means = cue_peak_means(t, &steps);
            ConstructionSummary {
                modality: t.modality,
                p: t.p(),
                steps: t.shape[0],
                nodes: t.shape[1],
                max_normalization_error: t.max_normalization_error(),
                cue_steps: steps,
                cue_mean_peak: means.map(|m| m.0),
                other_mean_peak: means.map(|m| m.1),
            }
        })
        .collect();
    Ok(InspectReport {
        prediction,
        label: Some(sample.label),
        construction,
        files: Vec::new(),
        traces,
    })
}

/// Writes one JSON file per trace (and a heatmap per trace if asked) into
/// `dir`, recording the paths in the report.
pub fn write_traces(report: &mut InspectReport, dir: &Path, heatmap: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in &report.traces {
        let stem = trace_stem(t);
        let path = dir.join(format!("{stem}.json"));
        fs::write(&path, t.to_json() + "\n").map_err(|e| Error::io(&path, e))?;
        report.files.push(path);
        if heatmap {
            let path = dir.join(format!("heatmap_{stem}.txt"));
            fs::write(&path, t.ascii_heatmap()).map_err(|e| Error::io(&path, e))?;
            report.files.push(path);
        }
    }
    Ok(())
}
