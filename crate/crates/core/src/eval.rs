//! Scores, the dictionary-learning baseline comparison, the supervised
//! validation loop and report emission.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::dictionary::{supervised_dict_learn, DictConfig, DictError, DictionaryModel};
use crate::overlap::{jaccard, ThresholdRule};
use crate::volume::{NetworkMap, TimeSeries, Volume4D, VolumeError};

/// Baseline counts as failed when no atom reaches this template overlap.
pub const BASELINE_FLOOR: f64 = 0.02;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("report error: {0}")]
    Report(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Dictionary(#[from] DictError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub r: f64,
    /// One series is constant; `r` is then 0.
    pub degenerate: bool,
}

/// Pearson correlation of two equal-length series.
pub fn temporal_similarity(pred: &TimeSeries, truth: &TimeSeries) -> Result<Similarity, EvalError> {
    if pred.len() != truth.len() {
        return Err(VolumeError::Dimension(format!(
            "series lengths {} and {}",
            pred.len(),
            truth.len()
        ))
        .into());
    }
    let n = pred.len() as f64;
    let (a, b) = (pred.values(), truth.values());
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(Similarity { r: 0.0, degenerate: true });
    }
    Ok(Similarity {
        r: (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Planted ground truth of a synthetic subject.
#[derive(Debug, Clone, Copy)]
pub struct Truth<'a> {
    pub map: &'a NetworkMap,
    pub series: &'a TimeSeries,
}

/// One subject's scores. `None` marks a score that was not computed.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub subject: String,
    pub jaccard_stcnn_template: f64,
    pub jaccard_baseline_template: Option<f64>,
    pub jaccard_stcnn_truth: Option<f64>,
    pub jaccard_baseline_truth: Option<f64>,
    pub temporal_pearson: Option<f64>,
    pub baseline_pearson: Option<f64>,
    pub supervised_sr_jaccard: Option<f64>,
    pub baseline_failed: Option<bool>,
}

impl ReportRow {
    fn fields(&self) -> [Option<f64>; 8] {
        [
            Some(self.jaccard_stcnn_template),
            self.jaccard_baseline_template,
            self.jaccard_stcnn_truth,
            self.jaccard_baseline_truth,
            self.temporal_pearson,
            self.baseline_pearson,
            self.supervised_sr_jaccard,
            self.baseline_failed.map(|f| f as u8 as f64),
        ]
    }
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "subject",
    "jaccard_stcnn_template",
    "jaccard_baseline_template",
    "jaccard_stcnn_truth",
    "jaccard_baseline_truth",
    "temporal_pearson",
    "baseline_pearson",
    "supervised_sr_jaccard",
    "baseline_failed",
];

/// Scores the network output (and the baseline decomposition, if given)
/// against the template and, for synthetic data, the planted truth.
///
/// The baseline's candidate is its atom with the highest template overlap;
/// it is marked failed when that overlap is below `floor`.
pub fn compare_baseline(
    subject: &str,
    map: &NetworkMap,
    series: &TimeSeries,
    baseline: Option<&DictionaryModel>,
    template: &NetworkMap,
    truth: Option<Truth<'_>>,
    floor: f64,
) -> Result<ReportRow, EvalError> {
    let rule = ThresholdRule::default();
    let mut row = ReportRow {
        subject: subject.to_string(),
        jaccard_stcnn_template: jaccard(map, template, rule)?.score,
        jaccard_baseline_template: None,
        jaccard_stcnn_truth: None,
        jaccard_baseline_truth: None,
        temporal_pearson: None,
        baseline_pearson: None,
        supervised_sr_jaccard: None,
        baseline_failed: None,
    };
    if let Some(t) = truth {
        row.jaccard_stcnn_truth = Some(jaccard(map, t.map, rule)?.score);
        row.temporal_pearson = Some(temporal_similarity(series, t.series)?.r);
    }
    if let Some(model) = baseline {
        let m = crate::dictionary::select_target(model, template, rule)?;
        row.jaccard_baseline_template = Some(m.jaccard);
        row.baseline_failed = Some(m.jaccard < floor);
        if let Some(t) = truth {
            let k = m.best_index;
            row.jaccard_baseline_truth = Some(jaccard(&model.maps()[k], t.map, rule)?.score);
            row.baseline_pearson = Some(temporal_similarity(&model.atoms()[k], t.series)?.r);
        }
    }
    Ok(row)
}

/// Supervised decomposition with `series` as the fixed atom; returns the
/// Jaccard overlap of that atom's coefficient map with `map`.
pub fn validate_supervised(
    map: &NetworkMap,
    series: &TimeSeries,
    data: &Volume4D,
    cfg: &DictConfig,
) -> Result<f64, EvalError> {
    let model = supervised_dict_learn(data, std::slice::from_ref(series), cfg)?;
    Ok(jaccard(&model.maps()[0], map, ThresholdRule::default())?.score)
}

/// Per-subject rows plus their column means.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    /// Mean of each numeric column over the rows that have it.
    pub fn means(&self) -> [Option<f64>; 8] {
        let mut out = [None; 8];
        for (c, slot) in out.iter_mut().enumerate() {
            let vals: Vec<f64> = self.rows.iter().filter_map(|r| r.fields()[c]).collect();
            if !vals.is_empty() {
                *slot = Some(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let f = r.fields();
            let _ = write!(out, "{}", r.subject);
            for v in &f[..7] {
                let _ = write!(out, ",{}", cell(*v));
            }
            let _ = writeln!(out, ",{}", r.baseline_failed.map(|b| (b as u8).to_string()).unwrap_or_default());
        }
        let _ = write!(out, "mean");
        for v in self.means() {
            let _ = write!(out, ",{}", cell(v));
        }
        out.push('\n');
        out
    }

    /// Parses [`EvalReport::to_csv`] output, checking that the `mean` row
    /// agrees with the recomputed means.
    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let bad = |m: String| EvalError::Report(m);
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let cols: Vec<String> = reader
            .headers()
            .map_err(|e| bad(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        if cols != REPORT_COLUMNS {
            return Err(bad(format!("unexpected columns {:?}", cols)));
        }
        let mut report = EvalReport::default();
        let mut stated_means = None;
        for rec in reader.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let num = |i: usize| -> Result<Option<f64>, EvalError> {
                if rec[i].is_empty() {
                    Ok(None)
                } else {
                    rec[i].parse().map(Some).map_err(|_| bad(format!("bad number `{}`", &rec[i])))
                }
            };
            let vals = (1..9).map(num).collect::<Result<Vec<_>, _>>()?;
            if &rec[0] == "mean" {
                stated_means = Some(vals);
                continue;
            }
            report.rows.push(ReportRow {
                subject: rec[0].to_string(),
                jaccard_stcnn_template: vals[0].ok_or_else(|| bad("missing jaccard_stcnn_template".into()))?,
                jaccard_baseline_template: vals[1],
                jaccard_stcnn_truth: vals[2],
                jaccard_baseline_truth: vals[3],
                temporal_pearson: vals[4],
                baseline_pearson: vals[5],
                supervised_sr_jaccard: vals[6],
                baseline_failed: vals[7].map(|v| v != 0.0),
            });
        }
        let stated = stated_means.ok_or_else(|| bad("no mean row".into()))?;
        for (c, (s, m)) in stated.iter().zip(report.means()).enumerate() {
            let ok = match (s, m) {
                (None, None) => true,
                (Some(a), Some(b)) => (a - b).abs() <= 1e-12 * b.abs().max(1.0),
                _ => false,
            };
            if !ok {
                return Err(bad(format!(
                    "mean of {} is {:?}, rows give {:?}",
                    REPORT_COLUMNS[c + 1],
                    s,
                    m
                )));
            }
        }
        Ok(report)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        for r in &self.rows {
            let f = r.fields();
            let jac = [f[0], f[1], f[2], f[3], f[6]];
            if jac.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(EvalError::Report(format!("{}: Jaccard outside [0, 1]", r.subject)));
            }
            if [f[4], f[5]].iter().flatten().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(EvalError::Report(format!("{}: correlation outside [-1, 1]", r.subject)));
            }
        }
        Ok(())
    }
}

/// Plot data of one subject.
#[derive(Debug, Clone, Copy)]
pub struct PlotData<'a> {
    pub subject: &'a str,
    pub map: &'a NetworkMap,
    pub series: &'a TimeSeries,
    pub truth: Option<Truth<'a>>,
}

/// Writes `report` to `csv_path` and, if `plot_dir` is given, a slice
/// mosaic (`<subject>.pred.pgm`, `<subject>.truth.pgm`) and a series table
/// (`<subject>.series.csv`) per subject. The CSV is read back and its means
/// re-checked. Output depends only on the inputs.
pub fn emit_report(
    report: &EvalReport,
    csv_path: &Path,
    plots: &[PlotData<'_>],
    plot_dir: Option<&Path>,
) -> Result<(), EvalError> {
    report.validate()?;
    if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let text = report.to_csv();
    fs::write(csv_path, &text)?;
    let back = EvalReport::from_csv(&fs::read_to_string(csv_path)?)?;
    if back.rows.len() != report.rows.len() {
        return Err(EvalError::Report("report did not round-trip".into()));
    }
    if let Some(dir) = plot_dir {
        fs::create_dir_all(dir)?;
        for p in plots {
            fs::write(dir.join(format!("{}.pred.pgm", p.subject)), mosaic_pgm(p.map))?;
            let mut table = String::from("t,pred");
            if p.truth.is_some() {
                table.push_str(",truth");
            }
            table.push('\n');
            for (t, v) in p.series.values().iter().enumerate() {
                let _ = write!(table, "{},{}", t, v);
                if let Some(tr) = p.truth {
                    let _ = write!(table, ",{}", tr.series.values().get(t).copied().unwrap_or(f64::NAN));
                }
                table.push('\n');
            }
            fs::write(dir.join(format!("{}.series.csv", p.subject)), table)?;
            if let Some(tr) = p.truth {
                fs::write(dir.join(format!("{}.truth.pgm", p.subject)), mosaic_pgm(tr.map))?;
            }
        }
    }
    Ok(())
}

/// Axial slices tiled left-to-right, top-to-bottom in a plain (ASCII) PGM.
/// Grey 128 is zero; the scale is symmetric about zero.
pub fn mosaic_pgm(map: &NetworkMap) -> String {
    let [d, h, w] = map.dims();
    let cols = (d as f64).sqrt().ceil() as usize;
    let rows = d.div_ceil(cols);
    let (width, height) = (cols * w, rows * h);
    let peak = map.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut pix = vec![0u8; width * height];
    for z in 0..d {
        let (ox, oy) = ((z % cols) * w, (z / cols) * h);
        for y in 0..h {
            for x in 0..w {
                let v = map.values()[(z * h + y) * w + x];
                let g = if peak > 0.0 { 127.5 + 127.5 * v / peak } else { 128.0 };
                pix[(oy + y) * width + ox + x] = g.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    let mut out = format!("P2\n{} {}\n255\n", width, height);
    for row in pix.chunks(width) {
        let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}
