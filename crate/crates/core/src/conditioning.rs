//! Generator inputs: noise boxes and tiled size/attenuation conditions.

use crate::dataset::{AttenuationClass, SizeClass};
use crate::nn::Tensor;
use crate::volume::{Box3, Voi, NODULE_SIDE, VOI_SIDE};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Frozen channel order of every conditioned tensor (and of checkpoints).
pub const CHANNEL_ORDER: [&str; 7] = ["voi", "small", "medium", "large", "solid", "part_solid", "ggn"];

/// Number of condition channels.
pub const CONDITION_CHANNELS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConditionLabel {
    pub size: SizeClass,
    pub attenuation: AttenuationClass,
}

impl ConditionLabel {
    pub fn new(size: SizeClass, attenuation: AttenuationClass) -> Self {
        Self { size, attenuation }
    }

    /// The nine size × attenuation combinations.
    pub fn all() -> Vec<ConditionLabel> {
        SizeClass::ALL
            .iter()
            .flat_map(|&s| AttenuationClass::ALL.iter().map(move |&a| ConditionLabel::new(s, a)))
            .collect()
    }

    /// Indices of the two active condition channels (0-based within the six).
    pub fn active_channels(&self) -> [usize; 2] {
        [self.size.index(), 3 + self.attenuation.index()]
    }

    /// Two-hot code over the six condition channels.
    pub fn code(&self) -> [f32; CONDITION_CHANNELS] {
        let mut c = [0.0; CONDITION_CHANNELS];
        for i in self.active_channels() {
            c[i] = 1.0;
        }
        c
    }
}

impl fmt::Display for ConditionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.size, self.attenuation)
    }
}

/// Replace the nodule box with i.i.d. `U[-0.5, 0.5]` samples.
pub fn insert_noise_box(voi: &Voi, seed: u64) -> Voi {
    insert_noise_box_with(voi, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn insert_noise_box_with(voi: &Voi, rng: &mut impl Rng) -> Voi {
    let mut out = voi.clone();
    fill_noise(&mut out.data, &voi.nodule_box, rng);
    out
}

/// Noise over `region` of a 64³ cube, z-major sample order.
pub fn fill_noise(data: &mut [f32], region: &Box3, rng: &mut impl Rng) {
    for [z, y, x] in region.voxels() {
        data[Voi::index(z as usize, y as usize, x as usize)] = rng.random_range(-0.5f32..=0.5);
    }
}

/// Six `side³` condition planes in [`CHANNEL_ORDER`] order (after "voi").
pub fn tile_conditions(label: ConditionLabel, side: usize) -> Vec<f32> {
    let plane = side.pow(3);
    let mut out = Vec::with_capacity(CONDITION_CHANNELS * plane);
    for v in label.code() {
        out.extend(std::iter::repeat_n(v, plane));
    }
    out
}

/// Generator input `[1, 7, 64, 64, 64]` (channel-first layout of the
/// `64³×7` tensor).
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionedInput {
    pub tensor: Tensor<f32>,
    pub label: ConditionLabel,
    pub noise_box: Box3,
}

pub fn assemble_input(voi_noised: &Voi, label: ConditionLabel) -> Result<ConditionedInput> {
    if voi_noised.data.len() != VOI_SIDE.pow(3) {
        return Err(Error::InvalidArgument(format!(
            "VOI must have 64³ voxels, got {}",
            voi_noised.data.len()
        )));
    }
    let mut data = Vec::with_capacity(7 * VOI_SIDE.pow(3));
    data.extend_from_slice(&voi_noised.data);
    data.extend(tile_conditions(label, VOI_SIDE));
    Ok(ConditionedInput {
        tensor: Tensor::from_vec([1, 7, VOI_SIDE, VOI_SIDE, VOI_SIDE], data),
        label,
        noise_box: voi_noised.nodule_box,
    })
}

/// Nodule cube plus conditions for the nodule critic: `[7, 32, 32, 32]` flat.
pub fn critic_input(nodule: &[f32], label: ConditionLabel) -> Result<Vec<f32>> {
    if nodule.len() != NODULE_SIDE.pow(3) {
        return Err(Error::InvalidArgument(format!("nodule must have 32³ voxels, got {}", nodule.len())));
    }
    let mut data = Vec::with_capacity(7 * nodule.len());
    data.extend_from_slice(nodule);
    data.extend(tile_conditions(label, NODULE_SIDE));
    Ok(data)
}

/// Paste a 32³ nodule over the centre cube of a VOI.
pub fn composite(voi: &[f32], nodule: &[f32]) -> Result<Vec<f32>> {
    if voi.len() != VOI_SIDE.pow(3) || nodule.len() != NODULE_SIDE.pow(3) {
        return Err(Error::InvalidArgument("composite expects 64³ and 32³ arrays".into()));
    }
    let mut out = voi.to_vec();
    let b = Voi::center_box();
    for (i, [z, y, x]) in b.voxels().enumerate() {
        out[Voi::index(z as usize, y as usize, x as usize)] = nodule[i];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn voi(value: f32) -> Voi {
        let b = Box3::new([0; 3], [64; 3]).unwrap();
        Voi::new(vec![value; 64 * 64 * 64], "s", b, -1.0).unwrap()
    }

    #[test]
    fn noise_is_box_local_and_bounded() {
        let v = voi(0.9);
        let n = insert_noise_box(&v, 3);
        let b = v.nodule_box;
        for z in 0..64i64 {
            for y in 0..64i64 {
                for x in 0..64i64 {
                    let i = Voi::index(z as usize, y as usize, x as usize);
                    if b.contains_point([z, y, x]) {
                        assert!((-0.5..=0.5).contains(&n.data[i]));
                    } else {
                        assert_eq!(n.data[i].to_bits(), v.data[i].to_bits());
                    }
                }
            }
        }
        assert_eq!(insert_noise_box(&v, 3), n);
        assert_ne!(insert_noise_box(&v, 4), n);
    }

    #[test]
    fn tiling_examples() {
        let t = tile_conditions(ConditionLabel::new(SizeClass::Small, AttenuationClass::Solid), 4);
        let plane = 64;
        for c in 0..6 {
            let expect = if c == 0 || c == 3 { 1.0 } else { 0.0 };
            assert!(t[c * plane..(c + 1) * plane].iter().all(|&v| v == expect));
        }
        let l = ConditionLabel::new(SizeClass::Large, AttenuationClass::Ggn);
        assert_eq!(l.active_channels(), [2, 5]);
    }

    #[test]
    fn tiling_is_injective() {
        let codes: std::collections::HashSet<_> = ConditionLabel::all()
            .iter()
            .map(|l| l.code().map(|v| v as u8))
            .collect();
        assert_eq!(codes.len(), 9);
    }

    #[test]
    fn composite_reassembles() {
        let mut v = voi(0.0);
        for (i, x) in v.data.iter_mut().enumerate() {
            *x = (i % 97) as f32 / 97.0 + 0.01;
        }
        assert_eq!(composite(&v.data, &v.center_crop()).unwrap(), v.data);
        let zeroed = composite(&v.data, &vec![0.0; 32768]).unwrap();
        let changed = zeroed.iter().zip(&v.data).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 32768);
    }
}
