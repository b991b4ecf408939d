//! Dense 3D volumes, the ASAV container, and in-scope augmentations.
//!
//! ASAV layout (little-endian):
//!
//! ```text
//! 0..4   b"ASAV"
//! 4      version (0x01)
//! 5      flags, bit0 = labels present
//! 6..8   reserved, zero
//! 8..20  u32 T, H, W
//! ...    T·H·W f32 voxels, W fastest
//! ...    T·H·W u8 labels, when flagged
//! ```

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{contract, AsaError, Result};
use crate::rng::rng_from;

pub const ASAV_MAGIC: &[u8; 4] = b"ASAV";
pub const ASAV_VERSION: u8 = 1;
const HEADER_LEN: usize = 20;

/// A `T × H × W` scalar field with optional per-voxel class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub voxels: Vec<f32>,
    pub labels: Option<Vec<u8>>,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxels: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(contract(format!("zero extent in dims {dims:?}")));
        }
        if voxels.len() != dims.iter().product::<usize>() {
            return Err(contract(format!(
                "dims {dims:?} need {} voxels, got {}",
                dims.iter().product::<usize>(),
                voxels.len()
            )));
        }
        Ok(Self { dims, voxels, labels: None })
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.voxels.len() {
            return Err(contract("label count differs from voxel count"));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self { dims, voxels: vec![0.0; dims.iter().product()], labels: None }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let [t, h, w] = dims;
        let mut voxels = Vec::with_capacity(t * h * w);
        for z in 0..t {
            for y in 0..h {
                for x in 0..w {
                    voxels.push(f(z, y, x));
                }
            }
        }
        Self { dims, voxels, labels: None }
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.dims[1] + h) * self.dims[2] + w
    }

    #[inline]
    pub fn get(&self, t: usize, h: usize, w: usize) -> f32 {
        self.voxels[self.index(t, h, w)]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.voxels.len();
        let mut out = Vec::with_capacity(HEADER_LEN + 5 * n);
        out.extend_from_slice(ASAV_MAGIC);
        out.push(ASAV_VERSION);
        out.push(u8::from(self.labels.is_some()));
        out.extend_from_slice(&[0, 0]);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.voxels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            out.extend_from_slice(labels);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != ASAV_MAGIC {
            return Err(AsaError::Format("missing ASAV magic".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(AsaError::Corrupt(format!("header truncated at {} bytes", bytes.len())));
        }
        if bytes[4] != ASAV_VERSION {
            return Err(AsaError::Format(format!("unsupported ASAV version {}", bytes[4])));
        }
        let flags = bytes[5];
        if flags & !1 != 0 || bytes[6] != 0 || bytes[7] != 0 {
            return Err(AsaError::Format("reserved header bits are set".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        let dims = [dim(0), dim(1), dim(2)];
        if dims.contains(&0) {
            return Err(AsaError::Corrupt(format!("zero extent in dims {dims:?}")));
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| AsaError::Corrupt("dims overflow".into()))?;
        let has_labels = flags & 1 == 1;
        let expected = n
            .checked_mul(if has_labels { 5 } else { 4 })
            .and_then(|p| p.checked_add(HEADER_LEN))
            .ok_or_else(|| AsaError::Corrupt("dims overflow".into()))?;
        if bytes.len() != expected {
            return Err(AsaError::Corrupt(format!(
                "dims {dims:?} need {expected} bytes, file has {}",
                bytes.len()
            )));
        }
        let payload = &bytes[HEADER_LEN..HEADER_LEN + 4 * n];
        let voxels = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let labels = has_labels.then(|| bytes[HEADER_LEN + 4 * n..].to_vec());
        Ok(Self { dims, voxels, labels })
    }
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, v.to_bytes())?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    Volume::from_bytes(&fs::read(path)?)
}

/// Centered sub-box; the per-axis offset is `floor((in - out) / 2)`.
pub fn center_crop(v: &Volume, out: [usize; 3]) -> Result<Volume> {
    for a in 0..3 {
        if out[a] == 0 || out[a] > v.dims[a] {
            return Err(contract(format!("crop {out:?} does not fit inside {:?}", v.dims)));
        }
    }
    let off: Vec<usize> = (0..3).map(|a| (v.dims[a] - out[a]) / 2).collect();
    let mut voxels = Vec::with_capacity(out.iter().product());
    let mut labels = v.labels.as_ref().map(|_| Vec::with_capacity(out.iter().product()));
    for t in 0..out[0] {
        for h in 0..out[1] {
            let start = v.index(t + off[0], h + off[1], off[2]);
            voxels.extend_from_slice(&v.voxels[start..start + out[2]]);
            if let (Some(dst), Some(src)) = (labels.as_mut(), v.labels.as_ref()) {
                dst.extend_from_slice(&src[start..start + out[2]]);
            }
        }
    }
    Ok(Volume { dims: out, voxels, labels })
}

/// Reverses one axis (0 = T, 1 = H, 2 = W) of voxels and labels together.
pub fn flip_axis(v: &Volume, axis: usize) -> Volume {
    assert!(axis < 3, "axis {axis} out of range");
    let [t, h, w] = v.dims;
    let src_index = |z: usize, y: usize, x: usize| match axis {
        0 => v.index(t - 1 - z, y, x),
        1 => v.index(z, h - 1 - y, x),
        _ => v.index(z, y, w - 1 - x),
    };
    let mut voxels = Vec::with_capacity(v.len());
    let mut labels = v.labels.as_ref().map(|_| Vec::with_capacity(v.len()));
    for z in 0..t {
        for y in 0..h {
            for x in 0..w {
                let s = src_index(z, y, x);
                voxels.push(v.voxels[s]);
                if let (Some(dst), Some(src)) = (labels.as_mut(), v.labels.as_ref()) {
                    dst.push(src[s]);
                }
            }
        }
    }
    Volume { dims: v.dims, voxels, labels }
}

/// `v ← v^γ` voxelwise; labels are untouched.
pub fn gamma_transform(v: &Volume, gamma: f32) -> Volume {
    let voxels = v.voxels.iter().map(|x| x.max(0.0).powf(gamma)).collect();
    Volume { dims: v.dims, voxels, labels: v.labels.clone() }
}

/// The concrete draws of one [`augment`] call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flips: [bool; 3],
    pub gamma: f32,
}

impl AugmentDraw {
    pub fn sample(seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let flips = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
        let gamma = rng.random_range(0.7f32..=1.5);
        Self { flips, gamma }
    }

    pub fn apply(&self, v: &Volume) -> Volume {
        let mut out = v.clone();
        for (axis, &flip) in self.flips.iter().enumerate() {
            if flip {
                out = flip_axis(&out, axis);
            }
        }
        if self.gamma != 1.0 {
            out = gamma_transform(&out, self.gamma);
        }
        out
    }
}

/// Seeded random flips (probability 0.5 per axis) followed by a gamma
/// transform with `γ ~ U[0.7, 1.5]`.
pub fn augment(v: &Volume, seed: u64) -> Volume {
    AugmentDraw::sample(seed).apply(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = rng_from(seed);
        let n = dims.iter().product();
        Volume::new(dims, (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn asav_round_trip_is_bit_identical() {
        let v = random_volume([16, 16, 16], 1);
        let back = Volume::from_bytes(&v.to_bytes()).unwrap();
        assert_eq!(back.voxels.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                   v.voxels.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        let labelled = v.clone().with_labels((0..4096).map(|i| (i % 3) as u8).collect()).unwrap();
        assert_eq!(Volume::from_bytes(&labelled.to_bytes()).unwrap(), labelled);
    }

    #[test]
    fn asav_header_layout() {
        let v = Volume::zeros([2, 3, 4]).with_labels(vec![1; 24]).unwrap();
        let b = v.to_bytes();
        assert_eq!(&b[..8], &[b'A', b'S', b'A', b'V', 1, 1, 0, 0]);
        assert_eq!(&b[8..20], &[2, 0, 0, 0, 3, 0, 0, 0, 4, 0, 0, 0]);
        assert_eq!(b.len(), 20 + 24 * 4 + 24);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let b = random_volume([4, 4, 4], 2).to_bytes();
        assert!(matches!(Volume::from_bytes(&b[..b.len() - 1]), Err(AsaError::Corrupt(_))));
        assert!(matches!(Volume::from_bytes(&b[..10]), Err(AsaError::Corrupt(_))));
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut b = random_volume([4, 4, 4], 3).to_bytes();
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(Volume::from_bytes(&b), Err(AsaError::Format(_))));
    }

    #[test]
    fn crop_offsets() {
        let v = Volume::from_fn([6, 4, 4], |t, _, _| t as f32);
        assert_eq!(center_crop(&v, [6, 4, 4]).unwrap(), v);
        let c = center_crop(&v, [4, 4, 4]).unwrap();
        assert_eq!(c.get(0, 0, 0), 1.0);
        assert!(center_crop(&v, [7, 4, 4]).is_err());
    }

    #[test]
    fn double_flip_is_identity() {
        let v = random_volume([3, 4, 5], 4).with_labels((0..60).map(|i| (i % 3) as u8).collect()).unwrap();
        for axis in 0..3 {
            assert_eq!(flip_axis(&flip_axis(&v, axis), axis), v);
        }
    }

    #[test]
    fn gamma_arithmetic() {
        let v = Volume::new([1, 1, 2], vec![0.5, 1.0]).unwrap();
        assert_eq!(gamma_transform(&v, 2.0).voxels, vec![0.25, 1.0]);
        let id = AugmentDraw { flips: [false; 3], gamma: 1.0 };
        assert_eq!(id.apply(&v), v);
    }

    #[test]
    fn augmentation_keeps_labels_aligned() {
        let v = random_volume([5, 6, 7], 9);
        let labels: Vec<u8> = v.voxels.iter().map(|&x| (x * 3.0).min(2.0) as u8).collect();
        let v = v.with_labels(labels).unwrap();
        for seed in 0..8 {
            let draw = AugmentDraw { gamma: 1.0, ..AugmentDraw::sample(seed) };
            let a = draw.apply(&v);
            let l = a.labels.as_ref().unwrap();
            for (x, lab) in a.voxels.iter().zip(l) {
                assert_eq!((x * 3.0).min(2.0) as u8, *lab);
            }
        }
        assert_eq!(augment(&v, 5), augment(&v, 5));
    }

    #[test]
    fn gamma_draws_stay_in_range() {
        for seed in 0..200 {
            let d = AugmentDraw::sample(seed);
            assert!((0.7..=1.5).contains(&d.gamma));
        }
    }
}
