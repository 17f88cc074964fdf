//! `.vol4` payload plus `.vol4.hdr` sidecar.
//!
//! The payload is the raw little-endian sample array in `(T, D, H, W)`
//! row-major order with no header bytes. The sidecar is a `key = value`
//! text file:
//!
//! ```text
//! format = vol4
//! version = 1
//! dims = T D H W
//! dtype = f32
//! byte_order = little
//! repetition_time = 0.72
//! mask = none
//! label = target
//! ```
//!
//! `mask` is either `none` or a path, relative to the header's directory,
//! of a single-frame `.vol4` whose nonzero voxels are in the mask. `label`
//! is optional. Single-frame files (`T = 1`) hold network maps.

use std::fs;
use std::path::{Path, PathBuf};

use super::{NetworkMap, TimeSeries, Volume4D, VolumeError};
use crate::kv::KvMap;
use crate::tensor::Dtype;

pub const HEADER_SUFFIX: &str = ".hdr";

fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(HEADER_SUFFIX);
    PathBuf::from(s)
}

struct Raw {
    frames: usize,
    dims: [usize; 3],
    data: Vec<f64>,
    repetition_time: f64,
    mask: Option<PathBuf>,
    label: Option<String>,
}

fn encode(data: &[f64], dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * dtype.size());
    for &v in data {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

fn decode(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    }
}

fn read_raw(path: &Path) -> Result<Raw, VolumeError> {
    let hdr_path = header_path(path);
    let text = fs::read_to_string(&hdr_path).map_err(|e| {
        VolumeError::Format(format!("cannot read header {}: {}", hdr_path.display(), e))
    })?;
    let kv = KvMap::parse(&text)?;
    if kv.require("format")? != "vol4" {
        return Err(VolumeError::Format(format!(
            "unknown format `{}`",
            kv.require("format")?
        )));
    }
    let version: u32 = kv.parse_value("version")?;
    if version != 1 {
        return Err(VolumeError::Format(format!("unsupported version {}", version)));
    }
    let dims: Vec<usize> = kv.parse_list("dims")?;
    if dims.len() != 4 {
        return Err(VolumeError::Format(format!(
            "dims needs 4 entries (T D H W), got {}",
            dims.len()
        )));
    }
    if let Some(i) = dims.iter().position(|&d| d == 0) {
        let axis = ["T", "D", "H", "W"][i];
        return Err(VolumeError::Format(format!("{} = 0 in header", axis)));
    }
    let dtype = Dtype::parse(kv.require("dtype")?)
        .ok_or_else(|| VolumeError::Format(format!("unknown dtype `{}`", kv.get("dtype").unwrap_or(""))))?;
    if kv.get("byte_order").unwrap_or("little") != "little" {
        return Err(VolumeError::Format("only little-endian payloads are supported".into()));
    }
    let repetition_time: f64 = kv.parse_or("repetition_time", 1.0)?;
    let mask = match kv.get("mask") {
        None | Some("none") => None,
        Some(rel) => Some(hdr_path.parent().unwrap_or(Path::new(".")).join(rel)),
    };

    let bytes = fs::read(path)?;
    let count: usize = dims.iter().product();
    let expected = count * dtype.size();
    if bytes.len() != expected {
        return Err(VolumeError::Format(format!(
            "payload {} has {} bytes, expected {} ({:?} × {})",
            path.display(),
            bytes.len(),
            expected,
            dims,
            dtype.name()
        )));
    }
    let data = decode(&bytes, dtype);
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(VolumeError::Data(format!(
            "non-finite sample at index {} in {}",
            i,
            path.display()
        )));
    }
    Ok(Raw {
        frames: dims[0],
        dims: [dims[1], dims[2], dims[3]],
        data,
        repetition_time,
        mask,
        label: kv.get("label").map(str::to_string),
    })
}

struct WriteSpec<'a> {
    frames: usize,
    dims: [usize; 3],
    data: &'a [f64],
    dtype: Dtype,
    repetition_time: f64,
    mask: Option<&'a str>,
    label: Option<&'a str>,
}

fn write_raw(path: &Path, spec: &WriteSpec) -> Result<(), VolumeError> {
    if let Some(i) = spec.data.iter().position(|v| !v.is_finite()) {
        return Err(VolumeError::Data(format!("non-finite sample at index {}", i)));
    }
    let [d, h, w] = spec.dims;
    let mut kv = KvMap::new();
    kv.insert("format", "vol4");
    kv.insert("version", 1);
    kv.insert("dims", format!("{} {} {} {}", spec.frames, d, h, w));
    kv.insert("dtype", spec.dtype.name());
    kv.insert("byte_order", "little");
    kv.insert("repetition_time", spec.repetition_time);
    kv.insert("mask", spec.mask.unwrap_or("none"));
    if let Some(label) = spec.label {
        kv.insert("label", label);
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, encode(spec.data, spec.dtype))?;
    fs::write(header_path(path), kv.render())?;
    Ok(())
}

pub fn read_volume4d(path: impl AsRef<Path>) -> Result<Volume4D, VolumeError> {
    let raw = read_raw(path.as_ref())?;
    let mut vol = Volume4D::new(raw.frames, raw.dims, raw.data)?;
    vol.repetition_time = raw.repetition_time;
    if let Some(mask_path) = raw.mask {
        let m = read_raw(&mask_path)?;
        if m.frames != 1 || m.dims != raw.dims {
            return Err(VolumeError::Format(format!(
                "mask {} has dims {:?}×{}, volume frames are {:?}",
                mask_path.display(),
                m.dims,
                m.frames,
                raw.dims
            )));
        }
        vol = vol.with_mask(m.data.iter().map(|&v| v != 0.0).collect())?;
    }
    Ok(vol)
}

/// Writes a volume with a 32-bit payload.
pub fn write_volume4d(vol: &Volume4D, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    write_volume4d_as(vol, path, Dtype::F32)
}

/// Writes a volume; the mask, if any, goes to `<name>.mask.vol4` alongside.
pub fn write_volume4d_as(vol: &Volume4D, path: impl AsRef<Path>, dtype: Dtype) -> Result<(), VolumeError> {
    let path = path.as_ref();
    let mask_name = match vol.mask() {
        Some(mask) => {
            let name = format!(
                "{}.mask.vol4",
                path.file_stem().and_then(|s| s.to_str()).unwrap_or("volume")
            );
            let values: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            write_raw(
                &path.with_file_name(&name),
                &WriteSpec {
                    frames: 1,
                    dims: vol.dims(),
                    data: &values,
                    dtype: Dtype::F32,
                    repetition_time: vol.repetition_time,
                    mask: None,
                    label: Some("mask"),
                },
            )?;
            Some(name)
        }
        None => None,
    };
    write_raw(
        path,
        &WriteSpec {
            frames: vol.frames(),
            dims: vol.dims(),
            data: vol.data(),
            dtype,
            repetition_time: vol.repetition_time,
            mask: mask_name.as_deref(),
            label: None,
        },
    )
}

pub fn read_map(path: impl AsRef<Path>) -> Result<NetworkMap, VolumeError> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    if raw.frames != 1 {
        return Err(VolumeError::Format(format!(
            "{} holds {} frames, a map needs exactly 1",
            path.display(),
            raw.frames
        )));
    }
    NetworkMap::new(raw.dims, raw.data, raw.label.unwrap_or_default())
}

/// Writes a map as a single-frame `.vol4` with a 32-bit payload.
pub fn write_map(map: &NetworkMap, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    write_raw(
        path.as_ref(),
        &WriteSpec {
            frames: 1,
            dims: map.dims(),
            data: map.values(),
            dtype: Dtype::F32,
            repetition_time: 1.0,
            mask: None,
            label: (!map.label.is_empty()).then_some(map.label.as_str()),
        },
    )
}

/// One series per CSV row, no header.
pub fn write_series_csv(series: &[TimeSeries], path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let mut out = String::new();
    for s in series {
        let row: Vec<String> = s.values().iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    if let Some(dir) = path.as_ref().parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_series_csv(path: impl AsRef<Path>) -> Result<Vec<TimeSeries>, VolumeError> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| VolumeError::Format(format!("{}: {}", path.display(), e)))?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| VolumeError::Format(format!("{}: {}", path.display(), e)))?;
        let values = rec
            .iter()
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| {
                    VolumeError::Format(format!("{} row {}: bad number `{}`", path.display(), i + 1, f))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push(TimeSeries::new(values)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(seed: u64) -> Volume4D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..4 * 8 * 8 * 8).map(|_| rng.random_range(-3.0..3.0)).collect();
        Volume4D::new(4, [8, 8, 8], data).unwrap()
    }

    #[test]
    fn roundtrip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.vol4");
        let p2 = dir.path().join("b.vol4");
        let vol = random_volume(1);
        write_volume4d(&vol, &p1).unwrap();
        let back = read_volume4d(&p1).unwrap();
        write_volume4d(&back, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(read_volume4d(&p2).unwrap(), back);

        let p3 = dir.path().join("c.vol4");
        write_volume4d_as(&vol, &p3, Dtype::F64).unwrap();
        assert_eq!(read_volume4d(&p3).unwrap().data(), vol.data());
    }

    #[test]
    fn mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.vol4");
        let mask: Vec<bool> = (0..512).map(|i| i % 3 == 0).collect();
        let vol = random_volume(2).with_mask(mask.clone()).unwrap();
        write_volume4d(&vol, &p).unwrap();
        assert_eq!(read_volume4d(&p).unwrap().mask().unwrap(), &mask[..]);
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.vol4");
        write_volume4d(&random_volume(3), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        match read_volume4d(&p) {
            Err(VolumeError::Format(msg)) => {
                assert!(msg.contains("8182 bytes"), "{}", msg);
                assert!(msg.contains("expected 8192"), "{}", msg);
            }
            other => panic!("unexpected {:?}", other),
        }
    }

    #[test]
    fn zero_frames_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.vol4");
        write_volume4d(&random_volume(4), &p).unwrap();
        let hdr = header_path(&p);
        let text = fs::read_to_string(&hdr).unwrap().replace("dims = 4 ", "dims = 0 ");
        fs::write(&hdr, text).unwrap();
        assert!(matches!(read_volume4d(&p), Err(VolumeError::Format(m)) if m.contains("T = 0")));
    }

    #[test]
    fn non_finite_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.vol4");
        write_volume4d(&random_volume(5), &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[8..12].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_volume4d(&p), Err(VolumeError::Data(_))));
    }

    #[test]
    fn maps_and_series() {
        let dir = tempfile::tempdir().unwrap();
        let map = NetworkMap::new([2, 3, 4], (0..24).map(|i| i as f64 * 0.5).collect(), "dmn").unwrap();
        let p = dir.path().join("map.vol4");
        write_map(&map, &p).unwrap();
        assert_eq!(read_map(&p).unwrap(), map);
        assert!(read_volume4d(&p).is_err());

        let s = vec![
            TimeSeries::new(vec![0.1, -2.5, 3.0]).unwrap(),
            TimeSeries::new(vec![1.0 / 3.0, 2.0, 1e-17]).unwrap(),
        ];
        let p = dir.path().join("s.csv");
        write_series_csv(&s, &p).unwrap();
        assert_eq!(read_series_csv(&p).unwrap(), s);
    }
}
