use std::fs;
use std::path::{Path, PathBuf};

use super::JointError;
use crate::dictionary::{dict_learn, select_target, DictConfig, TemplateMatch};
use crate::overlap::ThresholdRule;
use crate::volume::{
    normalize, read_map, read_series_csv, read_volume4d, write_map, write_series_csv, NetworkMap,
    TimeSeries, Volume4D,
};

/// Training target of one subject: the selected atom's map and course.
#[derive(Debug, Clone, PartialEq)]
pub struct Label {
    pub map: NetworkMap,
    pub series: TimeSeries,
}

/// One training example; `volume` is already normalised.
#[derive(Debug, Clone)]
pub struct Subject {
    pub name: String,
    pub volume: Volume4D,
    pub label: Label,
}

const MAP_SUFFIX: &str = ".map.vol4";
const SERIES_SUFFIX: &str = ".series.csv";

/// `.vol4` data files in `dir` (masks and maps excluded), sorted by name.
pub fn list_volumes(dir: &Path) -> Result<Vec<PathBuf>, JointError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".vol4") && !name.ends_with(".mask.vol4") && !name.ends_with(MAP_SUFFIX)
        })
        .collect();
    out.sort();
    Ok(out)
}

/// File name without the `.vol4` extension.
pub fn stem(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.strip_suffix(".vol4").unwrap_or(name).to_string()
}

pub fn write_labels(dir: &Path, stem: &str, label: &Label) -> Result<(), JointError> {
    fs::create_dir_all(dir)?;
    write_map(&label.map, dir.join(format!("{}{}", stem, MAP_SUFFIX)))?;
    write_series_csv(std::slice::from_ref(&label.series), dir.join(format!("{}{}", stem, SERIES_SUFFIX)))?;
    Ok(())
}

pub fn read_labels(dir: &Path, stem: &str) -> Result<Label, JointError> {
    let map = read_map(dir.join(format!("{}{}", stem, MAP_SUFFIX)))?;
    let path = dir.join(format!("{}{}", stem, SERIES_SUFFIX));
    let series = read_series_csv(&path)?
        .into_iter()
        .next()
        .ok_or_else(|| JointError::Config(format!("{} holds no series", path.display())))?;
    Ok(Label { map, series })
}

/// Pairs every volume in `data_dir` with its labels in `labels_dir`,
/// normalising the volumes.
pub fn load_dataset(data_dir: &Path, labels_dir: &Path) -> Result<Vec<Subject>, JointError> {
    let mut out = Vec::new();
    for path in list_volumes(data_dir)? {
        let name = stem(&path);
        let volume = normalize(&read_volume4d(&path)?);
        let label = read_labels(labels_dir, &name)?;
        if label.map.dims() != volume.dims() || label.series.len() != volume.frames() {
            return Err(JointError::Dimension(format!(
                "labels of {} do not match its volume",
                name
            )));
        }
        out.push(Subject { name, volume, label });
    }
    if out.is_empty() {
        return Err(JointError::Config(format!("no volumes in {}", data_dir.display())));
    }
    Ok(out)
}

/// Decomposes a normalised volume and keeps the atom whose map best
/// overlaps `template`.
pub fn label_subject(
    volume: &Volume4D,
    template: &NetworkMap,
    cfg: &DictConfig,
) -> Result<(Label, TemplateMatch), JointError> {
    let model = dict_learn(volume, cfg)?;
    let m = select_target(&model, template, ThresholdRule::default())?;
    let mut map = model.maps()[m.best_index].clone();
    map.label = "label".into();
    Ok((
        Label {
            map,
            series: model.atoms()[m.best_index].clone(),
        },
        m,
    ))
}
