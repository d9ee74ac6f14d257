//! Volume loading and saving.
//!
//! Two on-disk formats:
//! - NIfTI-1 (`.nii`, `.nii.gz`) — the interchange format;
//! - a raw fallback (`<name>.json` header + `<name>.bin` little-endian
//!   body) so fixtures can be built and inspected without NIfTI tooling.
//!
//! A volume's label sibling is `<stem>_label.<same format>`; images whose
//! stem ends in `_label` are treated as label files, not volumes.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{nifti, CtVolume, DataError, LabelVolume};

#[derive(Serialize, Deserialize)]
struct RawHeader {
    shape: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    #[serde(default)]
    subject_id: Option<String>,
}

/// Splits `volume.nii.gz` into ("volume", ".nii.gz"), handling the double
/// extension.
fn stem_and_ext(path: &Path) -> (String, String) {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    for ext in [".nii.gz", ".nii", ".json", ".bin"] {
        if let Some(stem) = name.strip_suffix(ext) {
            return (stem.to_string(), ext.to_string());
        }
    }
    (name.to_string(), String::new())
}

fn label_sibling(path: &Path) -> Option<PathBuf> {
    let (stem, ext) = stem_and_ext(path);
    let dir = path.parent().unwrap_or(Path::new(""));
    let candidate = dir.join(format!("{stem}_label{ext}"));
    candidate.exists().then_some(candidate)
}

fn read_raw(json_path: &Path) -> Result<(Array3<f32>, [f64; 3], Option<String>), DataError> {
    let text = fs::read_to_string(json_path).map_err(|e| DataError::io(json_path, e))?;
    let header: RawHeader = serde_json::from_str(&text)
        .map_err(|e| DataError::header(json_path, &format!("raw header: {e}")))?;
    let bin_path = json_path.with_extension("bin");
    let bytes = fs::read(&bin_path).map_err(|e| DataError::io(&bin_path, e))?;
    let [nz, ny, nx] = header.shape;
    let n = nz * ny * nx;
    let values: Vec<f32> = match header.dtype.as_str() {
        "f32" => {
            if bytes.len() != 4 * n {
                return Err(DataError::header(&bin_path, "binary length mismatch"));
            }
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect()
        }
        "u8" => {
            if bytes.len() != n {
                return Err(DataError::header(&bin_path, "binary length mismatch"));
            }
            bytes.iter().map(|&b| b as f32).collect()
        }
        other => {
            return Err(DataError::header(
                json_path,
                &format!("unsupported raw dtype {other:?}"),
            ))
        }
    };
    let data = Array3::from_shape_vec((nz, ny, nx), values)
        .map_err(|_| DataError::header(json_path, "shape/data inconsistency"))?;
    Ok((data, header.spacing, header.subject_id))
}

fn write_raw(
    json_path: &Path,
    data_f32: Option<&Array3<f32>>,
    data_u8: Option<&Array3<u8>>,
    spacing: [f64; 3],
    subject_id: Option<&str>,
) -> Result<(), DataError> {
    let (shape, dtype, bytes): ([usize; 3], &str, Vec<u8>) = match (data_f32, data_u8) {
        (Some(arr), None) => {
            let (z, y, x) = arr.dim();
            let mut b = Vec::with_capacity(arr.len() * 4);
            for v in arr.iter() {
                b.extend_from_slice(&v.to_le_bytes());
            }
            ([z, y, x], "f32", b)
        }
        (None, Some(arr)) => {
            let (z, y, x) = arr.dim();
            ([z, y, x], "u8", arr.iter().copied().collect())
        }
        _ => unreachable!("exactly one payload"),
    };
    let header = RawHeader {
        shape,
        spacing,
        dtype: dtype.to_string(),
        subject_id: subject_id.map(str::to_string),
    };
    let text = serde_json::to_string_pretty(&header)
        .map_err(|e| DataError::header(json_path, &format!("raw header: {e}")))?;
    fs::write(json_path, text).map_err(|e| DataError::io(json_path, e))?;
    let bin_path = json_path.with_extension("bin");
    fs::write(&bin_path, bytes).map_err(|e| DataError::io(&bin_path, e))?;
    Ok(())
}

/// Loads a CT volume (and its label sibling when present) from NIfTI or the
/// raw format.
pub fn load_volume(path: &Path) -> Result<(CtVolume, Option<LabelVolume>), DataError> {
    let (stem, ext) = stem_and_ext(path);
    let (data, spacing, explicit_id) = match ext.as_str() {
        ".nii" | ".nii.gz" => {
            let vol = nifti::read(path)?;
            (vol.data, vol.spacing, None)
        }
        ".json" => read_raw(path)?,
        _ => return Err(DataError::UnsupportedFormat(path.to_path_buf())),
    };
    let subject_id = explicit_id.unwrap_or(stem);
    let ct = CtVolume::new(data, spacing, subject_id)?;

    let labels = match label_sibling(path) {
        None => None,
        Some(lp) => Some(load_labels(&lp, Some(&ct))?),
    };
    Ok((ct, labels))
}

/// Loads a categorical (integer-coded) volume with values in `0..=max_code`.
pub fn load_coded(path: &Path, max_code: u8) -> Result<Array3<u8>, DataError> {
    let (_, ext) = stem_and_ext(path);
    let data: Array3<f32> = match ext.as_str() {
        ".nii" | ".nii.gz" => nifti::read(path)?.data,
        ".json" => read_raw(path)?.0,
        _ => return Err(DataError::UnsupportedFormat(path.to_path_buf())),
    };
    let mut bad: Option<u8> = None;
    let coded = data.map(|&v| {
        let r = v.round();
        if !(0.0..=max_code as f32).contains(&r) || (v - r).abs() > 1e-3 {
            bad.get_or_insert(if (0.0..=255.0).contains(&r) { r as u8 } else { 255 });
        }
        r.clamp(0.0, 255.0) as u8
    });
    if let Some(value) = bad {
        return Err(DataError::InvalidLabels { path: path.to_path_buf(), value });
    }
    Ok(coded)
}

/// Writes a categorical volume in the format implied by the extension.
pub fn save_coded(path: &Path, coded: &Array3<u8>, spacing: [f64; 3]) -> Result<(), DataError> {
    let (_, ext) = stem_and_ext(path);
    match ext.as_str() {
        ".nii" | ".nii.gz" => nifti::write_u8(path, coded, spacing),
        ".json" => write_raw(path, None, Some(coded), spacing, None),
        _ => Err(DataError::UnsupportedFormat(path.to_path_buf())),
    }
}

/// Loads a label volume, optionally checking its shape against a CT volume.
pub fn load_labels(path: &Path, paired_with: Option<&CtVolume>) -> Result<LabelVolume, DataError> {
    let coded = load_coded(path, 2)?;
    let labels = LabelVolume::new(coded)
        .map_err(|_| DataError::InvalidLabels { path: path.to_path_buf(), value: 255 })?;
    if let Some(ct) = paired_with {
        labels.check_paired(ct)?;
    }
    Ok(labels)
}

/// Writes a CT volume in the format implied by the extension.
pub fn save_volume(path: &Path, ct: &CtVolume) -> Result<(), DataError> {
    let (_, ext) = stem_and_ext(path);
    match ext.as_str() {
        ".nii" | ".nii.gz" => nifti::write_f32(path, &ct.intensities, ct.spacing),
        ".json" => write_raw(path, Some(&ct.intensities), None, ct.spacing, Some(&ct.subject_id)),
        _ => Err(DataError::UnsupportedFormat(path.to_path_buf())),
    }
}

/// Writes a label volume in the format implied by the extension. Spacing is
/// carried over from the paired CT volume.
pub fn save_labels(path: &Path, labels: &LabelVolume, spacing: [f64; 3]) -> Result<(), DataError> {
    let (_, ext) = stem_and_ext(path);
    match ext.as_str() {
        ".nii" | ".nii.gz" => nifti::write_u8(path, &labels.labels, spacing),
        ".json" => write_raw(path, None, Some(&labels.labels), spacing, None),
        _ => Err(DataError::UnsupportedFormat(path.to_path_buf())),
    }
}

/// Lists volume files in a directory, sorted; sibling files written next to
/// volumes (`*_label`, `*_lobes`) are excluded.
pub fn list_dataset(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let entries = fs::read_dir(dir).map_err(|e| DataError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let (stem, ext) = stem_and_ext(p);
            matches!(ext.as_str(), ".nii" | ".nii.gz" | ".json")
                && !stem.ends_with("_label")
                && !stem.ends_with("_lobes")
        })
        .collect();
    paths.sort();
    Ok(paths)
}
