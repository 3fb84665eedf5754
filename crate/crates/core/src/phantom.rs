//! Synthetic brain-like phantoms for desk-scale experiments.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VolgenError};
use crate::nifti_io::save_volume;
use crate::volume::{Dataset, Provenance, Volume3D};

struct Wave {
    freq: [f64; 3],
    phase: f64,
    amp: f64,
}

/// One phantom: a centred ellipsoidal "brain" on a background of exactly
/// -1, with a brighter inner "ventricle" ellipsoid and a smooth
/// low-frequency intensity modulation.
pub fn make_phantom<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Result<Volume3D> {
    if size < 16 {
        return Err(VolgenError::Shape(format!("phantom edge must be ≥ 16, got {size}")));
    }
    let v = size as f64;
    let centre = (v - 1.0) / 2.0;
    let brain: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.3..0.45) * v);
    let vent: [f64; 3] = std::array::from_fn(|a| rng.gen_range(0.2..0.4) * brain[a]);
    let vent_off: [f64; 3] = std::array::from_fn(|a| rng.gen_range(-0.15..0.15) * brain[a]);
    let vent_gain = rng.gen_range(0.35..0.6);
    let waves: Vec<Wave> = (0..3)
        .map(|_| Wave {
            freq: std::array::from_fn(|_| rng.gen_range(0.5..2.0) / v),
            phase: rng.gen_range(0.0..TAU),
            amp: rng.gen_range(0.05..0.15),
        })
        .collect();

    let mut raw = vec![0.0f64; size * size * size];
    let mut idx = 0;
    for i in 0..size {
        for j in 0..size {
            for k in 0..size {
                let p = [i as f64 - centre, j as f64 - centre, k as f64 - centre];
                let r_brain: f64 = (0..3).map(|a| (p[a] / brain[a]).powi(2)).sum();
                if r_brain <= 1.0 {
                    let r_vent: f64 = (0..3).map(|a| ((p[a] - vent_off[a]) / vent[a]).powi(2)).sum();
                    let modulation: f64 = waves
                        .iter()
                        .map(|w| w.amp * (TAU * (w.freq[0] * p[0] + w.freq[1] * p[1] + w.freq[2] * p[2]) + w.phase).cos())
                        .sum();
                    // Slight rim darkening gives a cortex-like shell.
                    let mut val = 0.6 + modulation - 0.15 * r_brain;
                    if r_vent <= 1.0 {
                        val += vent_gain * (1.0 - r_vent).sqrt();
                    }
                    raw[idx] = val.max(0.05);
                }
                idx += 1;
            }
        }
    }
    let hi = raw.iter().cloned().fold(0.0, f64::max);
    let voxels = raw.into_iter().map(|x| ((x / hi) * 2.0 - 1.0).clamp(-1.0, 1.0) as f32).collect();
    Volume3D::new(size, voxels)
}

/// `n` phantoms drawn from one seeded stream.
pub fn phantom_dataset(seed: u64, n: usize, size: usize) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let volumes = (0..n).map(|_| make_phantom(&mut rng, size)).collect::<Result<Vec<_>>>()?;
    Dataset::new(volumes, Provenance::Phantom)
}

pub fn phantom_file_name(index: usize) -> String {
    format!("phantom_{index:05}.nii.gz")
}

/// Writes a dataset as `phantom_00000.nii.gz`, `phantom_00001.nii.gz`, ...
pub fn write_dataset(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| VolgenError::io(dir, e))?;
    dataset
        .volumes()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let path = dir.join(phantom_file_name(i));
            save_volume(&path, v).map(|_| path)
        })
        .collect()
}
