//! Voxel containers: raw scanner volumes, normalised cubic volumes, and
//! datasets of the latter.

use std::fmt;

use volgen_tensor::{Scalar, Tensor};

use crate::error::{Result, VolgenError};

/// Arbitrary-shape volume in scanner intensity units.
///
/// Voxels are stored in C order over `shape = [D, H, W]`; axis 0 is the
/// first NIfTI axis.
#[derive(Clone, Debug, PartialEq)]
pub struct RawVolume {
    shape: [usize; 3],
    voxels: Vec<f32>,
    pub source_id: String,
}

impl RawVolume {
    pub fn new(shape: [usize; 3], voxels: Vec<f32>, source_id: impl Into<String>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(VolgenError::Shape(format!("volume extents must be ≥ 1, got {shape:?}")));
        }
        if shape.iter().product::<usize>() != voxels.len() {
            return Err(VolgenError::Shape(format!(
                "shape {shape:?} holds {} voxels, got {}",
                shape.iter().product::<usize>(),
                voxels.len()
            )));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(VolgenError::Data("non-finite voxel data".into()));
        }
        Ok(Self {
            shape,
            voxels,
            source_id: source_id.into(),
        })
    }

    pub fn from_fn(shape: [usize; 3], source_id: impl Into<String>, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut voxels = Vec::with_capacity(shape.iter().product());
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                for k in 0..shape[2] {
                    voxels.push(f(i, j, k));
                }
            }
        }
        Self::new(shape, voxels, source_id)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.voxels[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    pub fn is_cubic(&self) -> bool {
        self.shape[0] == self.shape[1] && self.shape[1] == self.shape[2]
    }
}

/// Cubic volume with every voxel in `[-1, 1]`.
#[derive(Clone, PartialEq)]
pub struct Volume3D {
    size: usize,
    voxels: Vec<f32>,
}

impl fmt::Debug for Volume3D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Volume3D").field("size", &self.size).finish_non_exhaustive()
    }
}

impl Volume3D {
    pub fn new(size: usize, voxels: Vec<f32>) -> Result<Self> {
        if size == 0 || voxels.len() != size * size * size {
            return Err(VolgenError::Shape(format!(
                "cubic volume of edge {size} needs {} voxels, got {}",
                size * size * size,
                voxels.len()
            )));
        }
        if let Some(v) = voxels.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(VolgenError::Data(format!("voxel value {v} outside [-1, 1]")));
        }
        Ok(Self { size, voxels })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.voxels[(i * self.size + j) * self.size + k]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn into_raw(self, source_id: impl Into<String>) -> RawVolume {
        RawVolume {
            shape: [self.size; 3],
            voxels: self.voxels,
            source_id: source_id.into(),
        }
    }

    /// Mutates voxels in place, clamping the result back into `[-1, 1]`.
    pub(crate) fn map_clamped(&mut self, f: impl Fn(f32) -> f32) {
        for v in &mut self.voxels {
            *v = f(*v).clamp(-1.0, 1.0);
        }
    }

    pub(crate) fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }
}

/// Packs volumes into a `[B, 1, V, V, V]` tensor.
pub fn batch_tensor<T: Scalar>(volumes: &[Volume3D]) -> Result<Tensor<T>> {
    let Some(first) = volumes.first() else {
        return Err(VolgenError::Shape("empty volume batch".into()));
    };
    let v = first.size;
    let mut data = Vec::with_capacity(volumes.len() * v * v * v);
    for vol in volumes {
        if vol.size != v {
            return Err(VolgenError::Shape(format!("batch mixes edges {v} and {}", vol.size)));
        }
        data.extend(vol.voxels.iter().map(|&x| T::from_f64(x as f64)));
    }
    Ok(Tensor::new(vec![volumes.len(), 1, v, v, v], data).expect("shape matches data"))
}

/// Splits a `[B, 1, V, V, V]` tensor back into volumes, clamping to `[-1, 1]`.
pub fn volumes_from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Volume3D>> {
    let s = t.shape();
    if s.len() != 5 || s[1] != 1 || s[2] != s[3] || s[3] != s[4] {
        return Err(VolgenError::Shape(format!("expected [B,1,V,V,V], got {s:?}")));
    }
    let per = s[2] * s[3] * s[4];
    Ok(t.data()
        .chunks(per)
        .map(|c| Volume3D {
            size: s[2],
            voxels: c.iter().map(|x| (x.as_f64() as f32).clamp(-1.0, 1.0)).collect(),
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Phantom,
    Nifti,
}

/// Ordered, non-empty collection of equally-sized volumes.
#[derive(Clone, Debug)]
pub struct Dataset {
    volumes: Vec<Volume3D>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(volumes: Vec<Volume3D>, provenance: Provenance) -> Result<Self> {
        let Some(first) = volumes.first() else {
            return Err(VolgenError::Data("dataset is empty".into()));
        };
        if volumes.iter().any(|v| v.size != first.size) {
            return Err(VolgenError::Data("dataset volumes differ in size".into()));
        }
        Ok(Self { volumes, provenance })
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn volume_size(&self) -> usize {
        self.volumes[0].size
    }

    pub fn volumes(&self) -> &[Volume3D] {
        &self.volumes
    }

    pub fn get(&self, i: usize) -> &Volume3D {
        &self.volumes[i]
    }

    /// Splits off the last `n` volumes as a second dataset.
    pub fn split_tail(mut self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.volumes.len() {
            return Err(VolgenError::Data(format!(
                "cannot split {} volumes off a dataset of {}",
                n,
                self.volumes.len()
            )));
        }
        let tail = self.volumes.split_off(self.volumes.len() - n);
        let p = self.provenance;
        Ok((Dataset::new(self.volumes, p)?, Dataset::new(tail, p)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_rejects_non_finite_and_empty() {
        assert!(RawVolume::new([1, 1, 2], vec![0.0, f32::NAN], "x").is_err());
        assert!(RawVolume::new([0, 1, 1], vec![], "x").is_err());
        assert!(RawVolume::new([2, 2, 2], vec![0.0; 7], "x").is_err());
    }

    #[test]
    fn volume_enforces_range() {
        assert!(Volume3D::new(2, vec![0.0; 8]).is_ok());
        assert!(Volume3D::new(2, vec![1.5; 8]).is_err());
        assert!(Volume3D::new(2, vec![0.0; 7]).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let a = Volume3D::new(2, (0..8).map(|i| i as f32 / 8.0).collect()).unwrap();
        let b = Volume3D::new(2, (0..8).map(|i| -(i as f32) / 8.0).collect()).unwrap();
        let t = batch_tensor::<f32>(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 2, 2]);
        assert_eq!(volumes_from_tensor(&t).unwrap(), vec![a, b]);
    }

    #[test]
    fn dataset_requires_uniform_nonempty() {
        assert!(Dataset::new(vec![], Provenance::Phantom).is_err());
        let a = Volume3D::new(2, vec![0.0; 8]).unwrap();
        let b = Volume3D::new(1, vec![0.0; 1]).unwrap();
        assert!(Dataset::new(vec![a, b], Provenance::Phantom).is_err());
    }
}
