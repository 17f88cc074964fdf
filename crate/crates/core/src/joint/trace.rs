use std::fmt::Write as _;

use super::{JointError, Stage};
use crate::kv::KvMap;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub stage: Stage,
    /// 1-based within the stage.
    pub step: usize,
    pub spatial_loss: Option<f64>,
    pub temporal_loss: Option<f64>,
    /// The loss the stage optimises.
    pub joint_loss: f64,
    pub wall_ms: f64,
}

/// Append-only per-step loss log. Stages only move forward.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    header: KvMap,
    records: Vec<TraceRecord>,
}

pub const TRACE_COLUMNS: [&str; 6] = [
    "stage",
    "step",
    "spatial_loss",
    "temporal_loss",
    "joint_loss",
    "wall_ms",
];

impl TrainTrace {
    pub fn new(header: KvMap) -> Self {
        TrainTrace {
            header,
            records: Vec::new(),
        }
    }

    pub fn header(&self) -> &KvMap {
        &self.header
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn push(&mut self, r: TraceRecord) -> Result<(), JointError> {
        if let Some(last) = self.records.last() {
            if r.stage < last.stage {
                return Err(JointError::Config(format!(
                    "stage {} record after stage {}",
                    r.stage.number(),
                    last.stage.number()
                )));
            }
        }
        self.records.push(r);
        Ok(())
    }

    /// Appends another trace's records; headers are kept from `self`.
    pub fn extend(&mut self, other: TrainTrace) -> Result<(), JointError> {
        for r in other.records {
            self.push(r)?;
        }
        Ok(())
    }

    /// Optimised loss of each step of `stage`, in order.
    pub fn losses(&self, stage: Stage) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.stage == stage)
            .map(|r| r.joint_loss)
            .collect()
    }

    /// Header as `# key=value` lines, then a column row, then one row per
    /// step. Missing losses are empty fields.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for k in self.header.keys() {
            let _ = writeln!(out, "# {}={}", k, self.header.get(k).unwrap_or(""));
        }
        out.push_str(&TRACE_COLUMNS.join(","));
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.stage.number(),
                r.step,
                opt(r.spatial_loss),
                opt(r.temporal_loss),
                r.joint_loss,
                r.wall_ms
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, JointError> {
        let mut header = KvMap::new();
        let mut body = String::new();
        for line in text.lines() {
            if let Some(h) = line.strip_prefix('#') {
                let (k, v) = h
                    .trim()
                    .split_once('=')
                    .ok_or_else(|| JointError::Config(format!("bad trace header `{}`", line)))?;
                header.insert(k.trim(), v.trim());
            } else {
                body.push_str(line);
                body.push('\n');
            }
        }
        let mut reader = csv::Reader::from_reader(body.as_bytes());
        let cols: Vec<String> = reader
            .headers()
            .map_err(|e| JointError::Config(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        if cols != TRACE_COLUMNS {
            return Err(JointError::Config(format!("unexpected trace columns {:?}", cols)));
        }
        let bad = |what: &str| JointError::Config(format!("bad trace field {}", what));
        let mut trace = TrainTrace::new(header);
        for rec in reader.records() {
            let rec = rec.map_err(|e| JointError::Config(e.to_string()))?;
            let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(&rec[i]));
            let opt = |i: usize| -> Result<Option<f64>, JointError> {
                if rec[i].is_empty() {
                    Ok(None)
                } else {
                    num(i).map(Some)
                }
            };
            trace.push(TraceRecord {
                stage: rec[0].parse()?,
                step: rec[1].parse().map_err(|_| bad(&rec[1]))?,
                spatial_loss: opt(2)?,
                temporal_loss: opt(3)?,
                joint_loss: num(4)?,
                wall_ms: num(5)?,
            })?;
        }
        Ok(trace)
    }
}

/// Trailing moving average; entry `i` averages `values[i+1-w ..= i]`, so
/// the output is `w - 1` shorter than the input.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(stage: Stage, step: usize, joint: f64) -> TraceRecord {
        TraceRecord {
            stage,
            step,
            spatial_loss: (stage != Stage::TemporalOnly).then_some(joint * 0.5),
            temporal_loss: (stage != Stage::SpatialOnly).then_some(-0.25),
            joint_loss: joint,
            wall_ms: 1.5,
        }
    }

    #[test]
    fn csv_roundtrip() {
        let mut kv = KvMap::new();
        kv.insert("w_spatial", 10);
        kv.insert("w_temporal", 1);
        let mut t = TrainTrace::new(kv);
        t.push(rec(Stage::SpatialOnly, 1, 0.1 + 0.2)).unwrap();
        t.push(rec(Stage::TemporalOnly, 1, -0.5)).unwrap();
        t.push(rec(Stage::JointFinetune, 1, 3.25e-7)).unwrap();
        let csv = t.to_csv();
        assert!(csv.starts_with("# w_spatial=10\n# w_temporal=1\nstage,step,"));
        let back = TrainTrace::from_csv(&csv).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.header().parse_value::<f64>("w_spatial").unwrap(), 10.0);
    }

    #[test]
    fn stages_only_move_forward() {
        let mut t = TrainTrace::default();
        t.push(rec(Stage::TemporalOnly, 1, 0.0)).unwrap();
        assert!(t.push(rec(Stage::SpatialOnly, 1, 0.0)).is_err());
    }

    #[test]
    fn moving_average_values() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
    }
}
