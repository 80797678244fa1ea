//! Volumes, voxel boxes, VOIs, and the resampling primitives shared by every
//! stage.
//!
//! Voxel coordinates are `(z, y, x)` and boxes are half-open `[min, max)`.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Side of a volume of interest.
pub const VOI_SIDE: usize = 64;
/// Side of the nodule cube at the VOI centre.
pub const NODULE_SIDE: usize = 32;

/// Default HU window mapped onto `[-1, 1]`.
pub const DEFAULT_HU_WINDOW: (f64, f64) = (-1000.0, 400.0);

/// A 3-D scalar grid with spacing and origin metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    pub scan_id: String,
    shape: [usize; 3],
    /// `(dz, dy, dx)` in millimetres.
    spacing: [f64; 3],
    /// World offset of voxel `(0, 0, 0)` in millimetres.
    origin: [f64; 3],
    /// Declared `[lo, hi]` of the intensity scale.
    intensity_range: (f32, f32),
    /// Value used for out-of-scan padding.
    background: f32,
    #[serde(skip)]
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        scan_id: impl Into<String>,
        shape: [usize; 3],
        spacing: [f64; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!("volume dimensions must be >= 1, got {shape:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self {
            scan_id: scan_id.into(),
            shape,
            spacing,
            origin: [0.0; 3],
            intensity_range: (-1.0, 1.0),
            background: -1.0,
            data,
        })
    }

    pub fn filled(scan_id: impl Into<String>, shape: [usize; 3], spacing: [f64; 3], value: f32) -> Result<Self> {
        Self::new(scan_id, shape, spacing, vec![value; shape.iter().product()])
    }

    pub fn with_origin(mut self, origin: [f64; 3]) -> Self {
        self.origin = origin;
        self
    }

    pub fn with_intensity_range(mut self, lo: f32, hi: f32) -> Self {
        self.intensity_range = (lo, hi);
        self
    }

    pub fn with_background(mut self, background: f32) -> Self {
        self.background = background;
        self
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn intensity_range(&self) -> (f32, f32) {
        self.intensity_range
    }

    pub fn background(&self) -> f32 {
        self.background
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Box covering the whole volume.
    pub fn bounds(&self) -> Box3 {
        Box3::from_shape(self.shape)
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    /// Value at a signed coordinate, or the background outside the scan.
    #[inline]
    pub fn get_or_background(&self, p: [i64; 3]) -> f32 {
        if self.contains(p) {
            self.get(p[0] as usize, p[1] as usize, p[2] as usize)
        } else {
            self.background
        }
    }

    pub fn contains(&self, p: [i64; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.shape[a])
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Clamp all voxels into the declared intensity range.
    pub fn clamp_to_range(&mut self) {
        let (lo, hi) = self.intensity_range;
        self.data.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    }
}

/// Map a HU window onto `[-1, 1]` (values outside the window are clamped).
/// The background becomes `-1` (air at the default window).
pub fn normalize_hu(volume: &Volume, window: (f64, f64)) -> Result<Volume> {
    let (lo, hi) = window;
    if !(hi > lo) {
        return Err(Error::InvalidArgument(format!("empty HU window {window:?}")));
    }
    let data = volume
        .data
        .iter()
        .map(|&v| ((2.0 * (v as f64 - lo) / (hi - lo)) - 1.0).clamp(-1.0, 1.0) as f32)
        .collect();
    Ok(Volume {
        data,
        intensity_range: (-1.0, 1.0),
        background: -1.0,
        ..volume.clone()
    })
}

/// Normalised value of a HU level under a window.
pub fn hu_to_normalized(hu: f64, window: (f64, f64)) -> f32 {
    ((2.0 * (hu - window.0) / (window.1 - window.0)) - 1.0).clamp(-1.0, 1.0) as f32
}

/// Axis-aligned half-open voxel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Box3 {
    pub min: [i64; 3],
    pub max: [i64; 3],
}

impl Box3 {
    pub fn new(min: [i64; 3], max: [i64; 3]) -> Result<Self> {
        if (0..3).any(|a| max[a] <= min[a]) {
            return Err(Error::InvalidArgument(format!(
                "degenerate box min={min:?} max={max:?}"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn from_shape(shape: [usize; 3]) -> Self {
        Self {
            min: [0; 3],
            max: shape.map(|n| n as i64),
        }
    }

    /// Cube of side `side` whose min corner is `center - side/2`.
    pub fn centered_cube(center: [i64; 3], side: usize) -> Self {
        let half = (side / 2) as i64;
        let min = center.map(|c| c - half);
        Self {
            min,
            max: min.map(|m| m + side as i64),
        }
    }

    pub fn extent(&self) -> [i64; 3] {
        [0, 1, 2].map(|a| self.max[a] - self.min[a])
    }

    pub fn volume(&self) -> i64 {
        self.extent().iter().product()
    }

    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| (self.min[a] + self.max[a]) as f64 / 2.0)
    }

    pub fn intersection(&self, other: &Box3) -> Option<Box3> {
        let min = [0, 1, 2].map(|a| self.min[a].max(other.min[a]));
        let max = [0, 1, 2].map(|a| self.max[a].min(other.max[a]));
        Box3::new(min, max).ok()
    }

    pub fn contains_box(&self, other: &Box3) -> bool {
        (0..3).all(|a| other.min[a] >= self.min[a] && other.max[a] <= self.max[a])
    }

    pub fn contains_point(&self, p: [i64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] < self.max[a])
    }

    pub fn translate(&self, d: [i64; 3]) -> Box3 {
        Box3 {
            min: [0, 1, 2].map(|a| self.min[a] + d[a]),
            max: [0, 1, 2].map(|a| self.max[a] + d[a]),
        }
    }

    /// Grow by `d` on every face (negative `d` shrinks; may become empty).
    pub fn dilate(&self, d: i64) -> Option<Box3> {
        Box3::new(self.min.map(|m| m - d), self.max.map(|m| m + d)).ok()
    }

    pub fn clip_to(&self, bounds: &Box3) -> Option<Box3> {
        self.intersection(bounds)
    }

    /// `[z0, y0, x0, z1, y1, x1]`.
    pub fn to_array(&self) -> [i64; 6] {
        [self.min[0], self.min[1], self.min[2], self.max[0], self.max[1], self.max[2]]
    }

    pub fn from_array(a: [i64; 6]) -> Result<Self> {
        Box3::new([a[0], a[1], a[2]], [a[3], a[4], a[5]])
    }

    /// Iterate all voxel coordinates in the box, z-major.
    pub fn voxels(&self) -> impl Iterator<Item = [i64; 3]> + '_ {
        (self.min[0]..self.max[0]).flat_map(move |z| {
            (self.min[1]..self.max[1]).flat_map(move |y| (self.min[2]..self.max[2]).map(move |x| [z, y, x]))
        })
    }
}

impl Serialize for Box3 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Box3 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let a = <[i64; 6]>::deserialize(d)?;
        Box3::from_array(a).map_err(serde::de::Error::custom)
    }
}

/// Intersection over union of two boxes, by voxel volume.
pub fn iou(a: &Box3, b: &Box3) -> f64 {
    match a.intersection(b) {
        None => 0.0,
        Some(i) => {
            let inter = i.volume();
            inter as f64 / (a.volume() + b.volume() - inter) as f64
        }
    }
}

/// A 64³ volume of interest cut from a scan.
///
/// `source_origin` is the scan region the VOI covers. When its extent is not
/// 64 on every axis the VOI was resampled to a working resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Voi {
    #[serde(skip)]
    pub data: Vec<f32>,
    pub source_scan_id: String,
    pub source_origin: Box3,
    pub nodule_box: Box3,
    pub background: f32,
}

impl Voi {
    /// Centre 32³ cube in VOI-local coordinates.
    pub fn center_box() -> Box3 {
        let lo = ((VOI_SIDE - NODULE_SIDE) / 2) as i64;
        let hi = lo + NODULE_SIDE as i64;
        Box3 { min: [lo; 3], max: [hi; 3] }
    }

    pub fn new(data: Vec<f32>, source_scan_id: impl Into<String>, source_origin: Box3, background: f32) -> Result<Self> {
        if data.len() != VOI_SIDE.pow(3) {
            return Err(Error::InvalidArgument(format!("VOI must hold 64³ voxels, got {}", data.len())));
        }
        Ok(Self {
            data,
            source_scan_id: source_scan_id.into(),
            source_origin,
            nodule_box: Self::center_box(),
            background,
        })
    }

    #[inline]
    pub fn index(z: usize, y: usize, x: usize) -> usize {
        (z * VOI_SIDE + y) * VOI_SIDE + x
    }

    /// True when the VOI maps 1:1 onto scan voxels.
    pub fn is_native(&self) -> bool {
        self.source_origin.extent() == [VOI_SIDE as i64; 3]
    }

    /// The nodule cube (`nodule_box` contents), z-major.
    pub fn center_crop(&self) -> Vec<f32> {
        crop_cube(&self.data, VOI_SIDE, &self.nodule_box)
    }

    /// Continuous VOI coordinate of the centre of scan voxel `v` along `axis`.
    pub fn scan_to_voi(&self, axis: usize, v: i64) -> f64 {
        let extent = self.source_origin.extent()[axis] as f64;
        (v - self.source_origin.min[axis]) as f64 * VOI_SIDE as f64 / extent
            + 0.5 * VOI_SIDE as f64 / extent
            - 0.5
    }

    /// Continuous scan coordinate of VOI voxel centre `u` along `axis`.
    pub fn voi_to_scan(&self, axis: usize, u: f64) -> f64 {
        let extent = self.source_origin.extent()[axis] as f64;
        self.source_origin.min[axis] as f64 + (u + 0.5) * extent / VOI_SIDE as f64 - 0.5
    }

    /// Scan voxels (clipped to `bounds`) whose centres fall inside the cells
    /// of VOI-local `region`.
    pub fn scan_footprint(&self, region: &Box3, bounds: &Box3) -> Option<Box3> {
        let mut min = [0i64; 3];
        let mut max = [0i64; 3];
        for a in 0..3 {
            let lo = region.min[a] as f64 - 0.5;
            let hi = region.max[a] as f64 - 0.5;
            let candidates = self.source_origin.min[a].max(bounds.min[a])..self.source_origin.max[a].min(bounds.max[a]);
            let inside: Vec<i64> = candidates
                .filter(|&v| {
                    let u = self.scan_to_voi(a, v);
                    u >= lo && u <= hi
                })
                .collect();
            min[a] = *inside.first()?;
            max[a] = *inside.last()? + 1;
        }
        Box3::new(min, max).ok()
    }
}

/// Copy a sub-box out of a cube of side `side`.
pub fn crop_cube(data: &[f32], side: usize, b: &Box3) -> Vec<f32> {
    let mut out = Vec::with_capacity(b.volume() as usize);
    for [z, y, x] in b.voxels() {
        out.push(data[(z as usize * side + y as usize) * side + x as usize]);
    }
    out
}

/// Linear interpolation along z onto slices `target_dz` apart.
pub fn resample_axial(volume: &Volume, target_dz: f64) -> Result<Volume> {
    if !(target_dz > 0.0) || !target_dz.is_finite() {
        return Err(Error::InvalidArgument(format!("target slice thickness must be > 0, got {target_dz}")));
    }
    let [d, h, w] = volume.shape;
    let dz = volume.spacing[0];
    let new_d = (((d - 1) as f64 * dz / target_dz).round() as usize) + 1;
    let plane = h * w;
    let mut data = vec![0.0f32; new_d * plane];
    for k in 0..new_d {
        let pos = (k as f64 * target_dz / dz).min((d - 1) as f64);
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        let dst = &mut data[k * plane..(k + 1) * plane];
        let a = &volume.data[lo * plane..(lo + 1) * plane];
        if frac == 0.0 || lo + 1 >= d {
            dst.copy_from_slice(a);
        } else {
            let b = &volume.data[(lo + 1) * plane..(lo + 2) * plane];
            let (wa, wb) = (1.0 - frac, frac);
            for i in 0..plane {
                dst[i] = (wa * a[i] as f64 + wb * b[i] as f64) as f32;
            }
        }
    }
    Ok(Volume {
        shape: [new_d, h, w],
        spacing: [target_dz, volume.spacing[1], volume.spacing[2]],
        data,
        ..volume.clone()
    })
}

/// Extract a `side³` crop centred at `center`, padding outside the scan
/// with the volume's background.
pub fn extract_voi(volume: &Volume, center: [i64; 3], side: usize) -> Result<Voi> {
    if !volume.contains(center) {
        return Err(Error::OutOfBounds(format!(
            "VOI centre {center:?} outside volume of shape {:?}",
            volume.shape
        )));
    }
    if side != VOI_SIDE {
        return Err(Error::InvalidArgument(format!("VOI side must be {VOI_SIDE}, got {side}")));
    }
    let crop = Box3::centered_cube(center, side);
    let data = crop.voxels().map(|p| volume.get_or_background(p)).collect();
    Voi::new(data, volume.scan_id.clone(), crop, volume.background)
}

/// VOI at working resolution around a nodule: the scan region twice the
/// nodule's extent is resampled to 64³, so the nodule box lands on the
/// centre 32³ cube. A 32³ nodule box reduces to [`extract_voi`].
pub fn extract_scaled_voi(volume: &Volume, nodule: &Box3) -> Result<Voi> {
    let e = nodule.extent();
    let min = [0, 1, 2].map(|a| nodule.min[a] - e[a] / 2);
    let region = Box3::new(min, [0, 1, 2].map(|a| min[a] + 2 * e[a]))?;
    let data = resample_region(volume, &region, [VOI_SIDE; 3]);
    Voi::new(data, volume.scan_id.clone(), region, volume.background)
}

/// Write the VOI back over its crop box. Only valid for native-resolution
/// VOIs; out-of-scan voxels are discarded.
pub fn paste_back(volume: &Volume, voi: &Voi) -> Result<Volume> {
    if voi.source_scan_id != volume.scan_id {
        return Err(Error::Consistency(format!(
            "VOI from scan '{}' pasted into scan '{}'",
            voi.source_scan_id, volume.scan_id
        )));
    }
    if !voi.is_native() {
        return Err(Error::InvalidArgument(
            "paste_back needs a native-resolution VOI; use blending::finalize_synthetic".into(),
        ));
    }
    let Some(region) = voi.source_origin.intersection(&volume.bounds()) else {
        return Err(Error::OutOfBounds("VOI does not intersect the volume".into()));
    };
    let mut out = volume.clone();
    let o = voi.source_origin.min;
    for [z, y, x] in region.voxels() {
        let (lz, ly, lx) = ((z - o[0]) as usize, (y - o[1]) as usize, (x - o[2]) as usize);
        let idx = out.index(z as usize, y as usize, x as usize);
        out.data[idx] = voi.data[Voi::index(lz, ly, lx)];
    }
    Ok(out)
}

/// Trilinear resampling of a box inside the volume onto an `out_side³` grid.
pub fn crop_resize(volume: &Volume, b: &Box3, out_side: usize) -> Result<Vec<f32>> {
    if b.extent().iter().any(|&e| e <= 0) || out_side == 0 {
        return Err(Error::InvalidArgument(format!("degenerate box or output size: {b:?}, {out_side}")));
    }
    if !volume.bounds().contains_box(b) {
        return Err(Error::OutOfBounds(format!("box {b:?} not within volume {:?}", volume.shape)));
    }
    Ok(resample_region(volume, b, [out_side; 3]))
}

/// Trilinear resampling of an arbitrary region (possibly extending past the
/// scan, where the background is used) onto `out` voxels, using cell-centre
/// alignment: output voxel `i` samples `min + (i + ½)·extent/out − ½`.
pub fn resample_region(volume: &Volume, region: &Box3, out: [usize; 3]) -> Vec<f32> {
    let e = region.extent();
    let coords: Vec<Vec<f64>> = (0..3)
        .map(|a| {
            let scale = e[a] as f64 / out[a] as f64;
            (0..out[a])
                .map(|i| region.min[a] as f64 + (i as f64 + 0.5) * scale - 0.5)
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(out.iter().product());
    for &z in &coords[0] {
        for &y in &coords[1] {
            for &x in &coords[2] {
                data.push(sample_trilinear(volume, [z, y, x]));
            }
        }
    }
    data
}

/// Trilinear sample at a continuous voxel coordinate. Neighbours outside the
/// scan contribute the background value; exact integer coordinates return
/// the stored voxel unchanged.
pub fn sample_trilinear(volume: &Volume, p: [f64; 3]) -> f32 {
    let base = p.map(|v| v.floor());
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    let b = base.map(|v| v as i64);
    if frac == [0.0; 3] {
        return volume.get_or_background(b);
    }
    let mut acc = 0.0f64;
    for dz in 0..2 {
        let wz = if dz == 0 { 1.0 - frac[0] } else { frac[0] };
        if wz == 0.0 {
            continue;
        }
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
            if wy == 0.0 {
                continue;
            }
            for dx in 0..2 {
                let wx = if dx == 0 { 1.0 - frac[2] } else { frac[2] };
                if wx == 0.0 {
                    continue;
                }
                acc += wz * wy * wx * volume.get_or_background([b[0] + dz, b[1] + dy, b[2] + dx]) as f64;
            }
        }
    }
    acc as f32
}

/// Trilinear sample inside a cube of side `side`, clamping coordinates to
/// the cube (replicated border).
pub fn sample_cube_clamped(data: &[f32], side: usize, p: [f64; 3]) -> f32 {
    let max = (side - 1) as f64;
    let p = p.map(|v| v.clamp(0.0, max));
    let base = p.map(|v| v.floor());
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    let b = base.map(|v| v as usize);
    let at = |z: usize, y: usize, x: usize| data[(z.min(side - 1) * side + y.min(side - 1)) * side + x.min(side - 1)] as f64;
    if frac == [0.0; 3] {
        return at(b[0], b[1], b[2]) as f32;
    }
    let mut acc = 0.0;
    for dz in 0..2 {
        let wz = if dz == 0 { 1.0 - frac[0] } else { frac[0] };
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
            for dx in 0..2 {
                let wx = if dx == 0 { 1.0 - frac[2] } else { frac[2] };
                let w = wz * wy * wx;
                if w != 0.0 {
                    acc += w * at(b[0] + dz, b[1] + dy, b[2] + dx);
                }
            }
        }
    }
    acc as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(shape: [usize; 3]) -> Volume {
        let n: usize = shape.iter().product();
        Volume::new("s", shape, [1.0; 3], (0..n).map(|i| ((i * 37) % 101) as f32 / 50.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn resample_identity_is_bitwise() {
        let v = ramp([5, 4, 3]);
        assert_eq!(resample_axial(&v, 1.0).unwrap(), v);
    }

    #[test]
    fn resample_constant_stays_constant() {
        let v = Volume::filled("c", [4, 2, 2], [2.5, 0.7, 0.7], 0.3).unwrap();
        let r = resample_axial(&v, 1.0).unwrap();
        assert_eq!(r.shape(), [9, 2, 2]);
        assert!(r.data().iter().all(|&x| x == 0.3));
    }

    #[test]
    fn resample_hand_profile() {
        let v = Volume::new("p", [3, 1, 1], [2.0, 0.7, 0.7], vec![0.0, 1.0, 0.0]).unwrap();
        let r = resample_axial(&v, 1.0).unwrap();
        assert_eq!(r.data(), &[0.0, 0.5, 1.0, 0.5, 0.0]);
        assert_eq!(r.spacing()[0], 1.0);
    }

    #[test]
    fn resample_rejects_bad_thickness() {
        let v = ramp([2, 2, 2]);
        assert!(matches!(resample_axial(&v, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(resample_axial(&v, -1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn voi_interior_copy_and_corner_padding() {
        let v = ramp([70, 70, 70]).with_background(-0.9);
        let voi = extract_voi(&v, [35, 35, 35], 64).unwrap();
        assert_eq!(voi.data[Voi::index(0, 0, 0)], v.get(3, 3, 3));
        assert_eq!(voi.nodule_box, Box3 { min: [16; 3], max: [48; 3] });
        let corner = extract_voi(&v, [0, 0, 0], 64).unwrap();
        assert_eq!(corner.data[Voi::index(0, 0, 0)], -0.9);
        assert_eq!(corner.data[Voi::index(32, 32, 32)], v.get(0, 0, 0));
        assert!(matches!(extract_voi(&v, [70, 0, 0], 64), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn paste_of_zeros_touches_only_the_crop() {
        let v = ramp([40, 50, 60]).with_background(-1.0);
        let mut voi = extract_voi(&v, [5, 45, 30], 64).unwrap();
        voi.data.iter_mut().for_each(|x| *x = 0.0);
        let out = paste_back(&v, &voi).unwrap();
        // explicit loop oracle
        for z in 0..40i64 {
            for y in 0..50i64 {
                for x in 0..60i64 {
                    let inside = voi.source_origin.contains_point([z, y, x]);
                    let want = if inside { 0.0 } else { v.get(z as usize, y as usize, x as usize) };
                    assert_eq!(out.get(z as usize, y as usize, x as usize), want);
                }
            }
        }
    }

    #[test]
    fn paste_rejects_foreign_voi() {
        let v = ramp([10, 10, 10]);
        let mut voi = extract_voi(&v, [5, 5, 5], 64).unwrap();
        voi.source_scan_id = "other".into();
        assert!(matches!(paste_back(&v, &voi), Err(Error::Consistency(_))));
    }

    #[test]
    fn crop_resize_contracts() {
        let v = ramp([40, 40, 40]);
        let b = Box3::new([4, 5, 6], [36, 37, 38]).unwrap();
        let out = crop_resize(&v, &b, 32).unwrap();
        let direct: Vec<f32> = b.voxels().map(|p| v.get_or_background(p)).collect();
        assert_eq!(out, direct);
        let c = Volume::filled("c", [20, 20, 20], [1.0; 3], 0.25).unwrap();
        let small = Box3::new([2, 3, 4], [9, 15, 12]).unwrap();
        assert!(crop_resize(&c, &small, 32).unwrap().iter().all(|&x| (x - 0.25).abs() < 1e-6));
        assert!(matches!(crop_resize(&v, &Box3::new([30, 0, 0], [41, 4, 4]).unwrap(), 32), Err(Error::OutOfBounds(_))));
        let degenerate = Box3 { min: [1, 1, 1], max: [1, 5, 5] };
        assert!(matches!(crop_resize(&v, &degenerate, 32), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn crop_resize_bright_voxel_lands_near_scaled_position() {
        let mut v = Volume::filled("b", [24, 24, 24], [1.0; 3], 0.0).unwrap();
        let b = Box3::new([4, 4, 4], [20, 20, 20]).unwrap();
        let bright = [9usize, 13, 6];
        let i = v.index(bright[0], bright[1], bright[2]);
        v.data_mut()[i] = 1.0;
        let out = crop_resize(&v, &b, 32).unwrap();
        // dense trilinear oracle: evaluate the interpolant on the output grid
        let (mut arg, mut best) = (0, f32::MIN);
        for (k, &val) in out.iter().enumerate() {
            if val > best {
                best = val;
                arg = k;
            }
        }
        assert!(best <= 1.0 && best > 0.0);
        let pos = [arg / 1024, (arg / 32) % 32, arg % 32];
        for a in 0..3 {
            // output cell i samples 4 + (i + 0.5)/2 - 0.5 => bright voxel near i = 2(b - 4) + 0.5
            let expected = 2.0 * (bright[a] as f64 - 4.0) + 0.5;
            assert!((pos[a] as f64 - expected).abs() <= 1.0, "axis {a}: {pos:?}");
        }
    }

    #[test]
    fn scaled_voi_of_32_cube_matches_plain_crop() {
        let v = ramp([80, 80, 80]);
        let nodule = Box3::new([20, 24, 22], [52, 56, 54]).unwrap();
        let scaled = extract_scaled_voi(&v, &nodule).unwrap();
        let plain = extract_voi(&v, [36, 40, 38], 64).unwrap();
        assert_eq!(scaled.source_origin, plain.source_origin);
        assert_eq!(scaled.data, plain.data);
    }

    #[test]
    fn iou_examples() {
        let a = Box3::new([0, 0, 0], [2, 2, 2]).unwrap();
        let b = Box3::new([1, 0, 0], [3, 2, 2]).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        let far = Box3::new([5, 5, 5], [6, 6, 6]).unwrap();
        assert_eq!(iou(&a, &far), 0.0);
    }

    #[test]
    fn box_rejects_degenerate() {
        assert!(Box3::new([0, 0, 0], [0, 1, 1]).is_err());
        assert!(Box3::from_array([0, 0, 0, 1, 1, 1]).is_ok());
    }

    fn arb_volume() -> impl Strategy<Value = Volume> {
        ([1usize..6, 1usize..5, 1usize..5], 0.3f64..4.0).prop_flat_map(|(shape, dz)| {
            let n: usize = shape.iter().product();
            proptest::collection::vec(-1.0f32..1.0, n)
                .prop_map(move |data| Volume::new("p", shape, [dz, 0.7, 0.7], data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn resample_stays_within_input_range(v in arb_volume(), target in 0.25f64..3.0) {
            let (lo, hi) = v.min_max();
            let r = resample_axial(&v, target).unwrap();
            let (rlo, rhi) = r.min_max();
            prop_assert!(rlo >= lo && rhi <= hi);
            prop_assert_eq!(resample_axial(&v, v.spacing()[0]).unwrap(), v);
        }

        #[test]
        fn iou_is_symmetric_and_one_only_on_equality(
            a in (0i64..6, 0i64..6, 0i64..6, 1i64..5, 1i64..5, 1i64..5),
            b in (0i64..6, 0i64..6, 0i64..6, 1i64..5, 1i64..5, 1i64..5),
        ) {
            let ba = Box3::new([a.0, a.1, a.2], [a.0 + a.3, a.1 + a.4, a.2 + a.5]).unwrap();
            let bb = Box3::new([b.0, b.1, b.2], [b.0 + b.3, b.1 + b.4, b.2 + b.5]).unwrap();
            prop_assert_eq!(iou(&ba, &bb), iou(&bb, &ba));
            prop_assert_eq!(iou(&ba, &bb) == 1.0, ba == bb);
        }
    }
}
