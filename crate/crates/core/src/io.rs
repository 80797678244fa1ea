//! Volume file formats.
//!
//! * Raw: a little-endian float32 block in z-major order (`<stem>.raw`) next
//!   to a JSON sidecar (`<stem>.json`) holding `shape`, `spacing_mm`,
//!   `origin_mm` and `intensity_range`.
//! * NIfTI-1 single file (`.nii`, or gzip-compressed `.nii.gz`).
//!
//! The scan id of a loaded volume is the file stem.

use crate::volume::Volume;
use crate::{Error, Result};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeFormat {
    Raw,
    Nifti,
    NiftiGz,
}

impl VolumeFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.ends_with(".nii.gz") {
            Ok(Self::NiftiGz)
        } else if name.ends_with(".nii") {
            Ok(Self::Nifti)
        } else if name.ends_with(".json") || name.ends_with(".raw") {
            Ok(Self::Raw)
        } else {
            Err(Error::format(path, "unrecognised volume extension (.raw/.json/.nii/.nii.gz)"))
        }
    }
}

/// File stem with any volume extension removed.
pub fn volume_stem(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    for ext in [".nii.gz", ".nii", ".json", ".raw"] {
        if let Some(s) = name.strip_suffix(ext) {
            return s.to_string();
        }
    }
    name.to_string()
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Raw => read_raw(path),
        VolumeFormat::Nifti => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            parse_nifti(path, &bytes)
        }
        VolumeFormat::NiftiGz => {
            let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            let mut bytes = Vec::new();
            GzDecoder::new(file)
                .read_to_end(&mut bytes)
                .map_err(|e| Error::io(path, e))?;
            parse_nifti(path, &bytes)
        }
    }
}

pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Raw => write_raw(path, volume),
        VolumeFormat::Nifti => std::fs::write(path, encode_nifti(volume)).map_err(|e| Error::io(path, e)),
        VolumeFormat::NiftiGz => {
            let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut enc = GzEncoder::new(file, Compression::default());
            enc.write_all(&encode_nifti(volume)).map_err(|e| Error::io(path, e))?;
            enc.finish().map_err(|e| Error::io(path, e))?;
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// raw + sidecar
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    #[serde(default)]
    origin_mm: [f64; 3],
    intensity_range: [f32; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    background: Option<f32>,
}

fn raw_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = volume_stem(path);
    let dir = path.parent().unwrap_or_else(|| Path::new(""));
    (dir.join(format!("{stem}.json")), dir.join(format!("{stem}.raw")))
}

fn read_raw(path: &Path) -> Result<Volume> {
    let (json_path, raw_path) = raw_paths(path);
    let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let side: Sidecar = serde_json::from_str(&text).map_err(|e| Error::format(&json_path, e.to_string()))?;
    let bytes = std::fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let n: usize = side.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::format(
            &raw_path,
            format!("expected {} bytes for shape {:?}, found {}", 4 * n, side.shape, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let [lo, hi] = side.intensity_range;
    Ok(Volume::new(volume_stem(path), side.shape, side.spacing_mm, data)?
        .with_origin(side.origin_mm)
        .with_intensity_range(lo, hi)
        .with_background(side.background.unwrap_or(lo)))
}

fn write_raw(path: &Path, v: &Volume) -> Result<()> {
    let (json_path, raw_path) = raw_paths(path);
    let (lo, hi) = v.intensity_range();
    let side = Sidecar {
        shape: v.shape(),
        spacing_mm: v.spacing(),
        origin_mm: v.origin(),
        intensity_range: [lo, hi],
        background: (v.background() != lo).then_some(v.background()),
    };
    let mut text = serde_json::to_string_pretty(&side)?;
    text.push('\n');
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    let mut bytes = Vec::with_capacity(4 * v.len());
    for x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

// ---------------------------------------------------------------------------
// NIfTI-1
// ---------------------------------------------------------------------------

const HEADER_LEN: usize = 348;
const DATA_OFFSET: usize = 352;

/// f32 header fields widened through their shortest decimal form, so values
/// such as 0.8 mm read back as the same f64 that was written.
fn widen(v: f32) -> f64 {
    v.to_string().parse().unwrap_or(v as f64)
}

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = [self.bytes[at], self.bytes[at + 1]];
        if self.big_endian { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }
    }

    fn u32_bytes(&self, at: usize) -> [u8; 4] {
        let mut b = [self.bytes[at], self.bytes[at + 1], self.bytes[at + 2], self.bytes[at + 3]];
        if self.big_endian {
            b.reverse();
        }
        b
    }

    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.u32_bytes(at))
    }

    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.u32_bytes(at))
    }
}

fn parse_nifti(path: &Path, bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "file shorter than a NIfTI-1 header"));
    }
    let big_endian = match (
        i32::from_le_bytes(bytes[0..4].try_into().unwrap()),
        i32::from_be_bytes(bytes[0..4].try_into().unwrap()),
    ) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(Error::format(path, "sizeof_hdr is not 348")),
    };
    let r = Reader { bytes, big_endian };
    if &bytes[344..347] != b"n+1" {
        return Err(Error::format(path, "only single-file NIfTI-1 (magic n+1) is supported"));
    }
    let ndim = r.i16(40);
    if !(3..=4).contains(&ndim) {
        return Err(Error::format(path, format!("expected a 3-D volume, dim[0] = {ndim}")));
    }
    let dims: Vec<i16> = (1..=4).map(|i| r.i16(40 + 2 * i)).collect();
    if ndim == 4 && dims[3] > 1 {
        return Err(Error::format(path, "4-D series are not supported"));
    }
    if dims[..3].iter().any(|&d| d < 1) {
        return Err(Error::format(path, format!("invalid dimensions {dims:?}")));
    }
    let (nx, ny, nz) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let datatype = r.i16(70);
    let pixdim: Vec<f64> = (1..=3).map(|i| widen(r.f32(76 + 4 * i)).abs()).collect();
    let vox_offset = r.f32(108) as usize;
    let (slope, inter) = (r.f32(112), r.f32(116));
    let (slope, inter) = if slope == 0.0 { (1.0, 0.0) } else { (slope, inter) };
    let (cal_max, cal_min) = (widen(r.f32(124)), widen(r.f32(128)));
    let origin = [widen(r.f32(276)), widen(r.f32(272)), widen(r.f32(268))];

    let n = nx * ny * nz;
    let width = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 16 => 4,
        64 => 8,
        other => return Err(Error::format(path, format!("unsupported NIfTI datatype {other}"))),
    };
    let start = vox_offset.max(HEADER_LEN);
    let end = start + n * width;
    if bytes.len() < end {
        return Err(Error::format(path, "voxel block truncated"));
    }
    let body = &bytes[start..end];
    let rd = Reader { bytes: body, big_endian };
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let at = i * width;
            match datatype {
                2 => body[at] as f64,
                256 => body[at] as i8 as f64,
                4 => rd.i16(at) as f64,
                512 => rd.i16(at) as u16 as f64,
                8 => rd.i32(at) as f64,
                16 => rd.f32(at) as f64,
                _ => {
                    let mut b: [u8; 8] = body[at..at + 8].try_into().unwrap();
                    if big_endian {
                        b.reverse();
                    }
                    f64::from_le_bytes(b)
                }
            }
        })
        .collect();
    let identity = slope == 1.0 && inter == 0.0;
    let data: Vec<f32> = raw
        .iter()
        .map(|&v| if identity { v as f32 } else { (v * slope as f64 + inter as f64) as f32 })
        .collect();
    // NIfTI stores x fastest then y then z, matching our z-major layout
    let mut vol = Volume::new(volume_stem(path), [nz, ny, nx], [pixdim[2], pixdim[1], pixdim[0]], data)?
        .with_origin(origin);
    let (lo, hi) = if cal_max > cal_min {
        (cal_min as f32, cal_max as f32)
    } else {
        vol.min_max()
    };
    vol = vol.with_intensity_range(lo, hi).with_background(lo);
    Ok(vol)
}

fn encode_nifti(v: &Volume) -> Vec<u8> {
    let mut h = vec![0u8; DATA_OFFSET];
    let put_i16 = |h: &mut Vec<u8>, at: usize, x: i16| h[at..at + 2].copy_from_slice(&x.to_le_bytes());
    let put_i32 = |h: &mut Vec<u8>, at: usize, x: i32| h[at..at + 4].copy_from_slice(&x.to_le_bytes());
    let put_f32 = |h: &mut Vec<u8>, at: usize, x: f32| h[at..at + 4].copy_from_slice(&x.to_le_bytes());
    let [nz, ny, nx] = v.shape();
    let [dz, dy, dx] = v.spacing();
    let [oz, oy, ox] = v.origin();
    put_i32(&mut h, 0, HEADER_LEN as i32);
    h[38] = b'r';
    for (i, d) in [3, nx, ny, nz, 1, 1, 1, 1].iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, *d as i16);
    }
    put_i16(&mut h, 70, 16);
    put_i16(&mut h, 72, 32);
    for (i, p) in [1.0, dx, dy, dz, 0.0, 0.0, 0.0, 0.0].iter().enumerate() {
        put_f32(&mut h, 76 + 4 * i, *p as f32);
    }
    put_f32(&mut h, 108, DATA_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2; // millimetres
    let (lo, hi) = v.intensity_range();
    put_f32(&mut h, 124, hi);
    put_f32(&mut h, 128, lo);
    put_i16(&mut h, 252, 1);
    put_f32(&mut h, 268, ox as f32);
    put_f32(&mut h, 272, oy as f32);
    put_f32(&mut h, 276, oz as f32);
    h[344..348].copy_from_slice(b"n+1\0");
    h.reserve(4 * v.len());
    for x in v.data() {
        h.extend_from_slice(&x.to_le_bytes());
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume {
        let shape = [3, 4, 5];
        let data = (0..60).map(|i| (i as f32 * 0.37).sin()).collect();
        Volume::new("case", shape, [1.0, 0.8, 0.7], data)
            .unwrap()
            .with_origin([-12.5, 3.25, 0.0])
            .with_intensity_range(-1.0, 1.0)
            .with_background(-1.0)
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample();
        write_volume(&dir.path().join("case.json"), &v).unwrap();
        assert_eq!(read_volume(&dir.path().join("case.raw")).unwrap(), v);
    }

    #[test]
    fn nifti_round_trip_plain_and_gz() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample();
        for name in ["case.nii", "case.nii.gz"] {
            let p = dir.path().join(name);
            write_volume(&p, &v).unwrap();
            assert_eq!(read_volume(&p).unwrap(), v, "{name}");
        }
    }

    #[test]
    fn nifti_int16_with_scaling() {
        let v = sample();
        let mut bytes = encode_nifti(&v);
        bytes.truncate(DATA_OFFSET);
        bytes[70..72].copy_from_slice(&4i16.to_le_bytes());
        bytes[72..74].copy_from_slice(&16i16.to_le_bytes());
        bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&(-1024.0f32).to_le_bytes());
        for i in 0..60i16 {
            bytes.extend_from_slice(&(i * 10).to_le_bytes());
        }
        let out = parse_nifti(Path::new("x.nii"), &bytes).unwrap();
        assert_eq!(out.get(0, 0, 1), 2.0 * 10.0 - 1024.0);
        assert_eq!(out.get(2, 3, 4), 2.0 * 590.0 - 1024.0);
    }

    #[test]
    fn rejects_unknown_extension_and_garbage() {
        assert!(VolumeFormat::from_path(Path::new("a.png")).is_err());
        assert!(matches!(parse_nifti(Path::new("a.nii"), &[0u8; 10]), Err(Error::Format { .. })));
    }
}
