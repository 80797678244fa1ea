//! Shell smoothing around a pasted nodule and write-back into the scan.

use crate::volume::{sample_cube_clamped, Box3, Volume, Voi, VOI_SIDE};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendConfig {
    /// Half-width of the band straddling each box face.
    pub shell_depth: usize,
    pub iterations: usize,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self {
            shell_depth: 3,
            iterations: 5,
        }
    }
}

/// Shell membership over a 64³ cube: voxels of `box` dilated by `depth`
/// that are not in `box` eroded by `depth`, clipped to the cube.
pub fn shell_mask(nodule_box: &Box3, depth: usize) -> Vec<bool> {
    let n = VOI_SIDE as i64;
    let d = depth as i64;
    let outer = Box3 {
        min: nodule_box.min.map(|m| (m - d).max(0)),
        max: nodule_box.max.map(|m| (m + d).min(n)),
    };
    let inner_min = nodule_box.min.map(|m| m + d);
    let inner_max = nodule_box.max.map(|m| m - d);
    let in_inner = |p: [i64; 3]| (0..3).all(|a| p[a] >= inner_min[a] && p[a] < inner_max[a]);
    let mut mask = vec![false; VOI_SIDE.pow(3)];
    if depth == 0 {
        return mask;
    }
    for p in outer.voxels() {
        if !in_inner(p) {
            mask[Voi::index(p[0] as usize, p[1] as usize, p[2] as usize)] = true;
        }
    }
    mask
}

/// Jacobi smoothing of the shell: each iteration replaces every shell voxel
/// by the mean of itself and its six face neighbours (clamped at the cube
/// border); voxels outside the shell are never written.
pub fn blend_boundary(voi_composited: &[f32], nodule_box: &Box3, config: &BlendConfig) -> Result<Vec<f32>> {
    let n = VOI_SIDE;
    if voi_composited.len() != n.pow(3) {
        return Err(Error::InvalidArgument("blend_boundary expects a 64³ array".into()));
    }
    let mask = shell_mask(nodule_box, config.shell_depth);
    let shell: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let mut cur = voi_composited.to_vec();
    let mut next = cur.clone();
    let plane = n * n;
    for _ in 0..config.iterations {
        for &i in &shell {
            let (z, y, x) = (i / plane, (i / n) % n, i % n);
            let zm = if z > 0 { i - plane } else { i };
            let zp = if z + 1 < n { i + plane } else { i };
            let ym = if y > 0 { i - n } else { i };
            let yp = if y + 1 < n { i + n } else { i };
            let xm = if x > 0 { i - 1 } else { i };
            let xp = if x + 1 < n { i + 1 } else { i };
            let s = cur[i] as f64
                + cur[zm] as f64
                + cur[zp] as f64
                + cur[ym] as f64
                + cur[yp] as f64
                + cur[xm] as f64
                + cur[xp] as f64;
            next[i] = (s / 7.0) as f32;
        }
        for &i in &shell {
            cur[i] = next[i];
        }
    }
    Ok(cur)
}

/// VOI-local region that blending and compositing may modify.
pub fn modified_region(voi: &Voi, config: &BlendConfig) -> Box3 {
    let d = config.shell_depth as i64;
    let n = VOI_SIDE as i64;
    Box3 {
        min: voi.nodule_box.min.map(|m| (m - d).max(0)),
        max: voi.nodule_box.max.map(|m| (m + d).min(n)),
    }
}

/// Resample the blended VOI onto the scan's native grid and write back the
/// voxels covered by the nodule box plus its blend shell. Everything else in
/// the scan is left bitwise unchanged.
pub fn finalize_synthetic(scan: &Volume, voi: &Voi, blended: &[f32], config: &BlendConfig) -> Result<Volume> {
    if blended.len() != VOI_SIDE.pow(3) {
        return Err(Error::InvalidArgument("blended VOI must be 64³".into()));
    }
    if voi.source_scan_id != scan.scan_id {
        return Err(Error::Consistency(format!(
            "VOI from scan '{}' written into scan '{}'",
            voi.source_scan_id, scan.scan_id
        )));
    }
    let region = modified_region(voi, config);
    let Some(footprint) = voi.scan_footprint(&region, &scan.bounds()) else {
        return Err(Error::OutOfBounds("synthetic footprint lies outside the scan".into()));
    };
    let mut out = scan.clone();
    for p in footprint.voxels() {
        let u = [0, 1, 2].map(|a| voi.scan_to_voi(a, p[a]));
        let v = sample_cube_clamped(blended, VOI_SIDE, u);
        let i = out.index(p[0] as usize, p[1] as usize, p[2] as usize);
        out.data_mut()[i] = v;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{extract_scaled_voi, extract_voi, paste_back};

    fn center() -> Box3 {
        Voi::center_box()
    }

    #[test]
    fn constant_is_a_fixed_point() {
        let v = vec![0.37f32; 64 * 64 * 64];
        let out = blend_boundary(&v, &center(), &BlendConfig::default()).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn zero_iterations_is_identity() {
        let v: Vec<f32> = (0..64 * 64 * 64).map(|i| ((i * 13) % 29) as f32).collect();
        let cfg = BlendConfig { shell_depth: 3, iterations: 0 };
        assert_eq!(blend_boundary(&v, &center(), &cfg).unwrap(), v);
    }

    #[test]
    fn shell_straddles_faces() {
        let m = shell_mask(&center(), 3);
        let at = |z: usize, y: usize, x: usize| m[Voi::index(z, y, x)];
        assert!(at(13, 32, 32) && at(15, 32, 32) && at(16, 32, 32) && at(18, 32, 32));
        assert!(!at(12, 32, 32) && !at(19, 32, 32) && !at(32, 32, 32));
        assert_eq!(m.iter().filter(|&&b| b).count(), 38usize.pow(3) - 26usize.pow(3));
    }

    #[test]
    fn step_edge_is_softened() {
        let mut v = vec![0.0f32; 64 * 64 * 64];
        for p in center().voxels() {
            v[Voi::index(p[0] as usize, p[1] as usize, p[2] as usize)] = 1.0;
        }
        let out = blend_boundary(&v, &center(), &BlendConfig::default()).unwrap();
        let jump = |d: &[f32]| {
            let mut worst = 0.0f32;
            for y in 16..48 {
                for x in 16..48 {
                    worst = worst.max((d[Voi::index(16, y, x)] - d[Voi::index(15, y, x)]).abs());
                }
            }
            worst
        };
        assert!(jump(&out) < jump(&v));
    }

    #[test]
    fn native_finalize_matches_paste_back_and_is_identity_when_unmodified() {
        let shape = [70, 72, 74];
        let data: Vec<f32> = (0..shape.iter().product::<usize>()).map(|i| ((i * 7) % 23) as f32 / 23.0).collect();
        let scan = Volume::new("s", shape, [1.0, 0.8, 0.8], data).unwrap();
        let voi = extract_voi(&scan, [35, 36, 37], 64).unwrap();
        let same = finalize_synthetic(&scan, &voi, &voi.data, &BlendConfig::default()).unwrap();
        assert_eq!(same, scan);
        let mut modified = voi.data.clone();
        let region = modified_region(&voi, &BlendConfig::default());
        for p in region.voxels() {
            modified[Voi::index(p[0] as usize, p[1] as usize, p[2] as usize)] = 0.5;
        }
        let a = finalize_synthetic(&scan, &voi, &modified, &BlendConfig::default()).unwrap();
        let b = paste_back(&scan, &Voi { data: modified, ..voi.clone() }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scaled_round_trip_is_near_identity_on_smooth_fields() {
        let shape = [60, 60, 60];
        let mut data = Vec::new();
        for z in 0..60 {
            for y in 0..60 {
                for x in 0..60 {
                    data.push(0.01 * z as f32 + 0.02 * y as f32 - 0.005 * x as f32);
                }
            }
        }
        let scan = Volume::new("s", shape, [1.0; 3], data).unwrap();
        let nodule = Box3::new([20, 22, 24], [36, 38, 40]).unwrap();
        let voi = extract_scaled_voi(&scan, &nodule).unwrap();
        let out = finalize_synthetic(&scan, &voi, &voi.data, &BlendConfig::default()).unwrap();
        let worst = out.data().iter().zip(scan.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(worst < 1e-5, "{worst}");
    }
}
