//! NIfTI-1 reading and writing (plain `.nii` or gzipped `.nii.gz`).

use std::path::{Path, PathBuf};

use ndarray::{Array3, ShapeBuilder};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};

use crate::error::{Result, VolgenError};
use crate::volume::{RawVolume, Volume3D};

fn nifti_err(path: &Path, e: impl ToString) -> VolgenError {
    VolgenError::Nifti {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads a single 3D image, casting any numeric voxel type to `f32`.
///
/// Trailing singleton dimensions (e.g. a 4D file with one frame) are
/// accepted; anything else beyond three axes is rejected.
pub fn load_nifti(path: impl AsRef<Path>) -> Result<RawVolume> {
    let path = path.as_ref();
    let obj = ReaderOptions::new().read_file(path).map_err(|e| nifti_err(path, e))?;
    let dim = obj.header().dim;
    let ndim = dim[0] as usize;
    if !(3..=7).contains(&ndim) || dim[1..=ndim].iter().skip(3).any(|&d| d > 1) {
        return Err(nifti_err(
            path,
            format!("expected a single 3D image, header dims are {:?}", &dim[..=ndim.min(7)]),
        ));
    }
    let shape = [dim[1] as usize, dim[2] as usize, dim[3] as usize];
    let arr = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| nifti_err(path, e))?;
    let voxels: Vec<f32> = arr.iter().copied().collect();
    let id = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    RawVolume::new(shape, voxels, id).map_err(|e| match e {
        VolgenError::Data(m) | VolgenError::Shape(m) => nifti_err(path, m),
        other => other,
    })
}

/// Writes a volume as 32-bit float NIfTI-1; a `.gz` suffix compresses.
pub fn save_nifti(path: impl AsRef<Path>, volume: &RawVolume) -> Result<()> {
    let path = path.as_ref();
    let shape = volume.shape();
    let arr = Array3::from_shape_vec(shape.strides([shape[1] * shape[2], shape[2], 1]), volume.voxels().to_vec())
        .map_err(|e| nifti_err(path, e))?;
    WriterOptions::new(path).write_nifti(&arr).map_err(|e| nifti_err(path, e))
}

pub fn save_volume(path: impl AsRef<Path>, volume: &Volume3D) -> Result<()> {
    save_nifti(path, &volume.clone().into_raw(""))
}

/// NIfTI files in `dir`, sorted lexicographically by file name.
pub fn list_nifti_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| VolgenError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| VolgenError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if (name.ends_with(".nii") || name.ends_with(".nii.gz")) && entry.path().is_file() {
            files.push(entry.path());
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_keep_their_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zeros.nii");
        let raw = RawVolume::new([91, 109, 91], vec![0.0; 91 * 109 * 91], "z").unwrap();
        save_nifti(&path, &raw).unwrap();
        let back = load_nifti(&path).unwrap();
        assert_eq!(back.shape(), [91, 109, 91]);
        assert!(back.voxels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_is_voxel_identical_and_axis_preserving() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ramp.nii.gz");
        let raw = RawVolume::from_fn([3, 4, 5], "r", |i, j, k| (i * 100 + j * 10 + k) as f32 * 0.37).unwrap();
        save_nifti(&path, &raw).unwrap();
        let back = load_nifti(&path).unwrap();
        assert_eq!(back.shape(), raw.shape());
        assert_eq!(back.voxels(), raw.voxels());
        assert_eq!(back.get(2, 3, 4), raw.get(2, 3, 4));
    }

    #[test]
    fn nan_voxel_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.nii");
        let arr = Array3::<f32>::from_shape_fn((2, 2, 2), |(i, _, _)| if i == 1 { f32::NAN } else { 0.0 });
        WriterOptions::new(&path).write_nifti(&arr).unwrap();
        let err = load_nifti(&path).unwrap_err().to_string();
        assert!(err.contains("non-finite voxel data"), "{err}");
    }

    #[test]
    fn four_d_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("4d.nii");
        let arr = ndarray::Array4::<f32>::zeros((2, 2, 2, 3));
        WriterOptions::new(&path).write_nifti(&arr).unwrap();
        assert!(load_nifti(&path).is_err());
        let path1 = dir.path().join("4d1.nii");
        let arr = ndarray::Array4::<f32>::zeros((2, 2, 2, 1));
        WriterOptions::new(&path1).write_nifti(&arr).unwrap();
        assert_eq!(load_nifti(&path1).unwrap().shape(), [2, 2, 2]);
    }

    #[test]
    fn unreadable_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.nii");
        std::fs::write(&path, b"not a nifti file").unwrap();
        assert!(load_nifti(&path).is_err());
        assert!(load_nifti(dir.path().join("missing.nii")).is_err());
    }

    #[test]
    fn other_voxel_types_are_cast() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u8.nii");
        let arr = Array3::<u8>::from_shape_fn((2, 3, 2), |(i, j, k)| (i * 6 + j * 2 + k) as u8);
        WriterOptions::new(&path).write_nifti(&arr).unwrap();
        let back = load_nifti(&path).unwrap();
        assert_eq!(back.get(1, 2, 1), 11.0);
    }
}
