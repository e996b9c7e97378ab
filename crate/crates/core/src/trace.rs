//! Routing-coefficient traces and their JSON export.
//!
//! ```json
//! {"stage":"construction","modality":"text","k":null,"p":2,"shape":[20,12],
//!  "iterations":[[...],[...]],"output_norms":[...],"capsule_norms":[...]}
//! ```
//!
//! `iterations[it]` holds the coefficients of routing iteration `it`,
//! row-major over `shape` (`[T, n]` for construction, `[n]` for aggregation).
//! `capsule_norms` uses the same layout and holds the norm of the capsule
//! each coefficient weights. `output_norms` are the Euclidean norms of the
//! routed outputs (the nodes, or the graph representation): without a
//! squashing nonlinearity these grow with the number of routed capsules.
//! Numbers are written with 17 significant digits.

use std::fmt::Write as _;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::modality::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Construction,
    Aggregation,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Construction => "construction",
            Stage::Aggregation => "aggregation",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTrace {
    pub stage: Stage,
    pub modality: Modality,
    /// Graph-convolution iteration (aggregation traces only).
    pub k: Option<usize>,
    pub shape: Vec<usize>,
    pub iterations: Vec<Vec<f64>>,
    pub output_norms: Vec<f64>,
    /// Empty when the trace was read from a file without it.
    pub capsule_norms: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrace {
    stage: Stage,
    modality: Modality,
    k: Option<usize>,
    p: usize,
    shape: Vec<usize>,
    iterations: Vec<Vec<f64>>,
    #[serde(default)]
    output_norms: Vec<f64>,
    #[serde(default)]
    capsule_norms: Vec<f64>,
}

fn num(out: &mut String, v: f64) {
    if v.is_finite() {
        let _ = write!(out, "{v:.16e}");
    } else {
        out.push_str("null");
    }
}

fn num_list(out: &mut String, vs: &[f64]) {
    out.push('[');
    for (i, &v) in vs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        num(out, v);
    }
    out.push(']');
}

impl RoutingTrace {
    pub fn p(&self) -> usize {
        self.iterations.len()
    }

    pub fn to_json(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{{\"stage\":\"{}\",\"modality\":\"{}\",\"k\":",
            self.stage.as_str(),
            self.modality.name()
        );
        match self.k {
            Some(k) => {
                let _ = write!(s, "{k}");
            }
            None => s.push_str("null"),
        }
        let _ = write!(s, ",\"p\":{},\"shape\":{:?},\"iterations\":[", self.p(), self.shape);
        for (i, it) in self.iterations.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            num_list(&mut s, it);
        }
        s.push_str("],\"output_norms\":");
        num_list(&mut s, &self.output_norms);
        s.push_str(",\"capsule_norms\":");
        num_list(&mut s, &self.capsule_norms);
        s.push('}');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawTrace =
            serde_json::from_str(text).map_err(|e| Error::Trace(e.to_string()))?;
        let expected_rank = match raw.stage {
            Stage::Construction => 2,
            Stage::Aggregation => 1,
        };
        if raw.shape.len() != expected_rank {
            return Err(Error::Trace(format!(
                "{} trace needs a rank-{expected_rank} shape, got {:?}",
                raw.stage.as_str(),
                raw.shape
            )));
        }
        if raw.shape.contains(&0) {
            return Err(Error::Trace(format!("empty dimension in shape {:?}", raw.shape)));
        }
        if (raw.stage == Stage::Aggregation) != raw.k.is_some() {
            return Err(Error::Trace("k is required exactly for aggregation traces".into()));
        }
        if raw.p == 0 || raw.p != raw.iterations.len() {
            return Err(Error::Trace(format!(
                "p = {} but {} iterations recorded",
                raw.p,
                raw.iterations.len()
            )));
        }
        let numel = raw
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Trace("shape overflows".into()))?;
        if raw.iterations.iter().any(|it| it.len() != numel) {
            return Err(Error::Trace(format!(
                "every iteration must hold {numel} coefficients"
            )));
        }
        if !raw.capsule_norms.is_empty() && raw.capsule_norms.len() != numel {
            return Err(Error::Trace(format!(
                "capsule_norms must be empty or hold {numel} values"
            )));
        }
        Ok(Self {
            stage: raw.stage,
            modality: raw.modality,
            k: raw.k,
            shape: raw.shape,
            iterations: raw.iterations,
            output_norms: raw.output_norms,
            capsule_norms: raw.capsule_norms,
        })
    }

    /// Number of routing sources: time steps (construction) or nodes.
    pub fn sources(&self) -> usize {
        self.shape[0]
    }

    /// Largest deviation from 1 of any normalized coefficient group, over
    /// all iterations. Construction groups are rows (one per time step);
    /// an aggregation iteration is a single group.
    pub fn max_normalization_error(&self) -> f64 {
        let group = match self.stage {
            Stage::Construction => self.shape[1],
            Stage::Aggregation => self.shape[0],
        };
        self.iterations
            .iter()
            .flat_map(|it| it.chunks(group.max(1)))
            .map(|g| (g.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Per time step, the largest coefficient it sends to any node in the
    /// given iteration (construction traces).
    pub fn peak_by_step(&self, iteration: usize) -> Vec<f64> {
        let n = self.shape.get(1).copied().unwrap_or(1);
        self.iterations[iteration]
            .chunks(n)
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    /// Plain-text heatmap of the final iteration: one row per node, one
    /// column per time step, darker glyphs for larger coefficients relative
    /// to the trace maximum.
    pub fn ascii_heatmap(&self) -> String {
        const RAMP: &[u8] = b" .:-=+*#%@";
        let Some(last) = self.iterations.last() else {
            return String::new();
        };
        let (steps, nodes) = match self.stage {
            Stage::Construction => (self.shape[0], self.shape[1]),
            Stage::Aggregation => (1, self.shape[0]),
        };
        let max = last.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let mut out = format!(
            "# {} {}{} (rows = nodes, columns = {}), max = {max:.4}\n",
            self.stage.as_str(),
            self.modality.name(),
            self.k.map(|k| format!(" k={k}")).unwrap_or_default(),
            if steps == 1 { "representation" } else { "time steps" },
        );
        for j in 0..nodes {
            let _ = write!(out, "{j:>3} |");
            for i in 0..steps {
                let v = if steps == 1 { last[j] } else { last[i * nodes + j] };
                let level = ((v / max) * (RAMP.len() - 1) as f64).round() as usize;
                out.push(RAMP[level.min(RAMP.len() - 1)] as char);
            }
            out.push_str("|\n");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> RoutingTrace {
        RoutingTrace {
            stage: Stage::Construction,
            modality: Modality::Text,
            k: None,
            shape: vec![2, 3],
            iterations: vec![vec![1.0 / 3.0; 6], vec![0.2, 0.3, 0.5, 0.1, 0.1, 0.8]],
            output_norms: vec![1.5, 2.0, 0.25],
            capsule_norms: vec![1.0, 2.0, 3.0, 4.0, 0.5, 1.0],
        }
    }

    #[test]
    fn json_has_enough_digits_and_roundtrips() {
        let t = sample();
        let json = t.to_json();
        assert!(json.contains("3.3333333333333331e-1"), "{json}");
        assert_eq!(RoutingTrace::from_json(&json).unwrap(), t);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["p"], 2);
        assert_eq!(v["shape"], serde_json::json!([2, 3]));
    }

    #[test]
    fn rejects_inconsistent_traces() {
        let good = sample().to_json();
        assert!(RoutingTrace::from_json(&good.replace("\"p\":2", "\"p\":3")).is_err());
        assert!(RoutingTrace::from_json(&good.replace("\"k\":null", "\"k\":1")).is_err());
        assert!(RoutingTrace::from_json(&good.replace("[2, 3]", "[3, 3]")).is_err());
        assert!(RoutingTrace::from_json(&good.replace("\"capsule_norms\":[", "\"capsule_norms\":[1,")).is_err());
        let without = good.split(",\"capsule_norms\"").next().unwrap().to_owned() + "}";
        assert!(RoutingTrace::from_json(&without).unwrap().capsule_norms.is_empty());
        assert!(RoutingTrace::from_json("{").is_err());
        let empty = r#"{"stage":"construction","modality":"text","k":null,"p":1,"shape":[0,3],"iterations":[[]]}"#;
        assert!(RoutingTrace::from_json(empty).is_err());
    }

    #[test]
    fn normalization_and_peaks() {
        let t = sample();
        assert!(t.max_normalization_error() < 1e-15);
        assert_eq!(t.peak_by_step(1), vec![0.5, 0.8]);
    }

    #[test]
    fn heatmap_layout() {
        let map = sample().ascii_heatmap();
        let rows: Vec<&str> = map.lines().skip(1).collect();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.matches(['|']).count() == 2));
        assert!(rows[2].ends_with("@|"));
    }

    proptest! {
        #[test]
        fn parse_never_panics(s in ".{0,200}") {
            let _ = RoutingTrace::from_json(&s);
        }
    }
}
