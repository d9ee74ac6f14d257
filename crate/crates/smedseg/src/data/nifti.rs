//! Minimal NIfTI-1 reader/writer for single-file volumes (.nii / .nii.gz).
//!
//! Reading handles both endiannesses, the common scalar datatypes, and
//! scl_slope/scl_inter rescaling. Writing always emits little-endian
//! single-file NIfTI with a diagonal sform built from the voxel spacing.
//! Values are stored x-fastest, which matches a C-order `(z, y, x)` array,
//! so buffers map to [`ndarray::Array3`] without reshuffling.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array3;

use super::DataError;

const HEADER_SIZE: usize = 348;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

pub struct NiftiVolume {
    /// Intensities in (z, y, x) order after any slope/intercept scaling.
    pub data: Array3<f32>,
    /// Voxel spacing (dz, dy, dx) in millimeters.
    pub spacing: [f64; 3],
}

pub fn is_nifti_path(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

fn read_all(path: &Path) -> Result<Vec<u8>, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut bytes = Vec::new();
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if name.ends_with(".gz") {
        GzDecoder::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| DataError::io(path, e))?;
    } else {
        let mut file = file;
        file.read_to_end(&mut bytes).map_err(|e| DataError::io(path, e))?;
    }
    Ok(bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    swap: bool,
}

impl<'a> Cursor<'a> {
    fn i16_at(&self, off: usize) -> i16 {
        let b: [u8; 2] = self.bytes[off..off + 2].try_into().unwrap();
        if self.swap { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }
    }
    fn f32_at(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        if self.swap { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }
    }
}

pub fn read(path: &Path) -> Result<NiftiVolume, DataError> {
    let bytes = read_all(path)?;
    if bytes.len() < HEADER_SIZE + 4 {
        return Err(DataError::header(path, "file shorter than a NIfTI-1 header"));
    }
    // sizeof_hdr doubles as the endianness probe.
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let swap = match le {
        348 => false,
        _ if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348 => true,
        _ => return Err(DataError::header(path, "sizeof_hdr is not 348")),
    };
    let c = Cursor { bytes: &bytes, swap };

    let magic = &bytes[344..348];
    if magic != MAGIC_SINGLE {
        return Err(DataError::header(
            path,
            "only single-file NIfTI-1 (magic \"n+1\") is supported",
        ));
    }

    let ndim = c.i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(DataError::header(path, "implausible dim[0]"));
    }
    let dims: Vec<usize> = (1..=ndim as usize)
        .map(|i| c.i16_at(40 + 2 * i).max(1) as usize)
        .collect();
    if dims.len() < 3 || dims.iter().skip(3).any(|&d| d != 1) {
        return Err(DataError::header(
            path,
            "expected a 3-d volume (higher dims must be 1)",
        ));
    }
    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);

    let datatype = c.i16_at(70);
    let vox_offset = c.f32_at(108) as usize;
    let scl_slope = c.f32_at(112);
    let scl_inter = c.f32_at(116);
    let pixdim = [c.f32_at(76 + 4), c.f32_at(76 + 8), c.f32_at(76 + 12)];

    let n = nx * ny * nz;
    let elem = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(DataError::header(
                path,
                &format!("unsupported NIfTI datatype code {other}"),
            ))
        }
    };
    if bytes.len() < vox_offset + n * elem {
        return Err(DataError::header(path, "data section truncated"));
    }
    let raw = &bytes[vox_offset..vox_offset + n * elem];

    let mut values: Vec<f32> = Vec::with_capacity(n);
    let get = |i: usize| -> f32 {
        match datatype {
            DT_UINT8 => raw[i] as f32,
            DT_INT8 => raw[i] as i8 as f32,
            DT_INT16 => {
                let b: [u8; 2] = raw[2 * i..2 * i + 2].try_into().unwrap();
                (if swap { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }) as f32
            }
            DT_UINT16 => {
                let b: [u8; 2] = raw[2 * i..2 * i + 2].try_into().unwrap();
                (if swap { u16::from_be_bytes(b) } else { u16::from_le_bytes(b) }) as f32
            }
            DT_INT32 => {
                let b: [u8; 4] = raw[4 * i..4 * i + 4].try_into().unwrap();
                (if swap { i32::from_be_bytes(b) } else { i32::from_le_bytes(b) }) as f32
            }
            DT_UINT32 => {
                let b: [u8; 4] = raw[4 * i..4 * i + 4].try_into().unwrap();
                (if swap { u32::from_be_bytes(b) } else { u32::from_le_bytes(b) }) as f32
            }
            DT_FLOAT32 => {
                let b: [u8; 4] = raw[4 * i..4 * i + 4].try_into().unwrap();
                if swap { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }
            }
            DT_FLOAT64 => {
                let b: [u8; 8] = raw[8 * i..8 * i + 8].try_into().unwrap();
                (if swap { f64::from_be_bytes(b) } else { f64::from_le_bytes(b) }) as f32
            }
            _ => unreachable!(),
        }
    };
    let rescale = scl_slope != 0.0 && (scl_slope != 1.0 || scl_inter != 0.0);
    for i in 0..n {
        let v = get(i);
        values.push(if rescale { v * scl_slope + scl_inter } else { v });
    }

    // x-fastest linear order == C-order (z, y, x).
    let data = Array3::from_shape_vec((nz, ny, nx), values)
        .map_err(|_| DataError::header(path, "dim/data inconsistency"))?;
    let spacing = [
        pixdim[2].abs() as f64,
        pixdim[1].abs() as f64,
        pixdim[0].abs() as f64,
    ];
    Ok(NiftiVolume { data, spacing })
}

fn build_header(dims: (usize, usize, usize), spacing: [f64; 3], datatype: i16, bitpix: i16) -> Vec<u8> {
    let (nz, ny, nx) = dims;
    let (dz, dy, dx) = (spacing[0] as f32, spacing[1] as f32, spacing[2] as f32);
    let mut h = vec![0u8; HEADER_SIZE];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    // dim[0..3] = ndim, nx, ny, nz
    h[40..42].copy_from_slice(&3i16.to_le_bytes());
    h[42..44].copy_from_slice(&(nx as i16).to_le_bytes());
    h[44..46].copy_from_slice(&(ny as i16).to_le_bytes());
    h[46..48].copy_from_slice(&(nz as i16).to_le_bytes());
    for i in 4..8 {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&1i16.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    // pixdim[0] (qfac) must be +-1; then dx, dy, dz.
    h[76..80].copy_from_slice(&1f32.to_le_bytes());
    h[80..84].copy_from_slice(&dx.to_le_bytes());
    h[84..88].copy_from_slice(&dy.to_le_bytes());
    h[88..92].copy_from_slice(&dz.to_le_bytes());
    h[108..112].copy_from_slice(&352f32.to_le_bytes()); // vox_offset
    h[112..116].copy_from_slice(&1f32.to_le_bytes()); // scl_slope
    h[116..120].copy_from_slice(&0f32.to_le_bytes()); // scl_inter
    // sform: diagonal spacing, aligned anatomical coordinates.
    h[254..256].copy_from_slice(&1i16.to_le_bytes());
    h[280..284].copy_from_slice(&dx.to_le_bytes());
    h[300..304].copy_from_slice(&dy.to_le_bytes());
    h[320..324].copy_from_slice(&dz.to_le_bytes());
    h[344..348].copy_from_slice(MAGIC_SINGLE);
    h
}

fn write_bytes(path: &Path, header: &[u8], payload: &[u8]) -> Result<(), DataError> {
    let mut out: Vec<u8> = Vec::with_capacity(HEADER_SIZE + 4 + payload.len());
    out.extend_from_slice(header);
    out.extend_from_slice(&[0u8; 4]); // no header extensions
    out.extend_from_slice(payload);

    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if name.ends_with(".gz") {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(&out).map_err(|e| DataError::io(path, e))?;
        enc.finish().map_err(|e| DataError::io(path, e))?;
    } else {
        let mut file = file;
        file.write_all(&out).map_err(|e| DataError::io(path, e))?;
    }
    Ok(())
}

/// Writes a float volume (z, y, x) as float32 NIfTI-1.
pub fn write_f32(path: &Path, data: &Array3<f32>, spacing: [f64; 3]) -> Result<(), DataError> {
    let (nz, ny, nx) = data.dim();
    let header = build_header((nz, ny, nx), spacing, DT_FLOAT32, 32);
    let mut payload = Vec::with_capacity(data.len() * 4);
    for v in data.iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &header, &payload)
}

/// Writes a label volume (z, y, x) as uint8 NIfTI-1.
pub fn write_u8(path: &Path, data: &Array3<u8>, spacing: [f64; 3]) -> Result<(), DataError> {
    let (nz, ny, nx) = data.dim();
    let header = build_header((nz, ny, nx), spacing, DT_UINT8, 8);
    let payload: Vec<u8> = data.iter().copied().collect();
    write_bytes(path, &header, &payload)
}
