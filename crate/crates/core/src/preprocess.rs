//! Preprocessing (zero-plane trimming, trilinear resizing, min-max
//! normalisation) and training-time augmentation.

use std::path::Path;

use rand::Rng;

use crate::error::{Result, VolgenError};
use crate::nifti_io::{list_nifti_files, load_nifti};
use crate::volume::{Dataset, Provenance, RawVolume, Volume3D};

/// Removes all-zero planes from both ends of every axis.
///
/// Interior zero planes are kept, so the result is the bounding box of the
/// non-zero voxels.
pub fn trim_zero_planes(v: &RawVolume) -> Result<RawVolume> {
    let [d, h, w] = v.shape();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for i in 0..d {
        for j in 0..h {
            for k in 0..w {
                if v.get(i, j, k) != 0.0 {
                    for (a, idx) in [i, j, k].into_iter().enumerate() {
                        lo[a] = lo[a].min(idx);
                        hi[a] = hi[a].max(idx);
                    }
                }
            }
        }
    }
    if lo[0] == usize::MAX {
        return Err(VolgenError::Data(format!("{}: empty after trim", v.source_id)));
    }
    let shape = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    if shape == v.shape() {
        return Ok(v.clone());
    }
    RawVolume::from_fn(shape, v.source_id.clone(), |i, j, k| v.get(i + lo[0], j + lo[1], k + lo[2]))
}

/// Source sample positions for corner-aligned resampling of `n` points to `m`.
fn taps(n: usize, m: usize) -> Vec<(usize, usize, f64)> {
    (0..m)
        .map(|o| {
            if n == 1 || m == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (n - 1) as f64 / (m - 1) as f64;
            let i0 = (pos.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

fn lerp(a: f32, b: f32, t: f64) -> f32 {
    let (a64, b64) = (a as f64, b as f64);
    let v = a64 + t * (b64 - a64);
    (v as f32).clamp(a.min(b), a.max(b))
}

/// Resamples one axis of a C-ordered `[outer, n, inner]` block to length `m`.
fn resize_axis(src: &[f32], outer: usize, n: usize, inner: usize, m: usize) -> Vec<f32> {
    let taps = taps(n, m);
    let mut out = Vec::with_capacity(outer * m * inner);
    for o in 0..outer {
        let block = &src[o * n * inner..(o + 1) * n * inner];
        for &(i0, i1, t) in &taps {
            let (r0, r1) = (&block[i0 * inner..(i0 + 1) * inner], &block[i1 * inner..(i1 + 1) * inner]);
            out.extend(r0.iter().zip(r1).map(|(&a, &b)| lerp(a, b, t)));
        }
    }
    out
}

/// Trilinear resampling to a `target`³ grid with corner-aligned sampling:
/// the first and last voxels of every axis map onto each other exactly.
///
/// Applied one axis at a time, so each output voxel is the usual product of
/// linear weights over its eight neighbours. Every intermediate value stays
/// between the samples it interpolates, hence the output never overshoots
/// the input range.
pub fn resize_trilinear(v: &RawVolume, target: usize) -> Result<RawVolume> {
    if target < 2 {
        return Err(VolgenError::Shape(format!("resize target must be ≥ 2, got {target}")));
    }
    let [d, h, w] = v.shape();
    if v.shape() == [target; 3] {
        return Ok(v.clone());
    }
    let x = resize_axis(v.voxels(), d * h, w, 1, target);
    let x = resize_axis(&x, d, h, target, target);
    let x = resize_axis(&x, 1, d, target * target, target);
    RawVolume::new([target; 3], x, v.source_id.clone())
}

/// Per-volume affine map of `[min, max]` onto `[-1, 1]`.
pub fn normalize_to_unit_range(v: &RawVolume) -> Result<Volume3D> {
    if !v.is_cubic() {
        return Err(VolgenError::Shape(format!("normalisation expects a cubic volume, got {:?}", v.shape())));
    }
    let (lo, hi) = v
        .voxels()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    if hi <= lo {
        return Err(VolgenError::Data(format!("{}: degenerate intensity range", v.source_id)));
    }
    let (lo, span) = (lo as f64, hi as f64 - lo as f64);
    let voxels = v
        .voxels()
        .iter()
        .map(|&x| (((x as f64 - lo) / span) * 2.0 - 1.0).clamp(-1.0, 1.0) as f32)
        .collect();
    Volume3D::new(v.shape()[0], voxels)
}

/// Trim, resize and normalise one scan.
pub fn prepare_volume(raw: &RawVolume, size: usize) -> Result<Volume3D> {
    let trimmed = trim_zero_planes(raw)?;
    let resized = resize_trilinear(&trimmed, size)?;
    normalize_to_unit_range(&resized)
}

/// Loads every NIfTI file in `dir` (lexicographic order) through the full
/// preprocessing pipeline.
pub fn load_dataset_dir(dir: impl AsRef<Path>, size: usize) -> Result<Dataset> {
    let dir = dir.as_ref();
    let files = list_nifti_files(dir)?;
    if files.is_empty() {
        return Err(VolgenError::Data(format!("{}: no .nii or .nii.gz files", dir.display())));
    }
    let volumes = files
        .iter()
        .map(|f| load_nifti(f).and_then(|raw| prepare_volume(&raw, size)))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(volumes, Provenance::Nifti)
}

/// Mirrors along axis 0, the left-right axis by convention.
pub fn flip_lr(x: &Volume3D) -> Volume3D {
    let v = x.size();
    let plane = v * v;
    let mut out = x.clone();
    let src = x.voxels();
    for (i, dst) in out.voxels_mut().chunks_mut(plane).enumerate() {
        let s = v - 1 - i;
        dst.copy_from_slice(&src[s * plane..(s + 1) * plane]);
    }
    out
}

/// Deterministic augmentation: optional flip, then multiplicative intensity
/// jitter clamped back into `[-1, 1]`.
pub fn augment_with(x: &Volume3D, flip: bool, factor: f32) -> Volume3D {
    let mut out = if flip { flip_lr(x) } else { x.clone() };
    if factor != 1.0 {
        out.map_clamped(|v| v * factor);
    }
    out
}

/// Flips with probability 1/2, then scales by a factor drawn from
/// `U[0.9, 1.1]`. The flip coin is drawn before the factor.
pub fn augment<R: Rng + ?Sized>(x: &Volume3D, rng: &mut R) -> Volume3D {
    let flip = rng.gen_bool(0.5);
    let factor = rng.gen_range(0.9f32..=1.1);
    augment_with(x, flip, factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn raw(shape: [usize; 3], f: impl FnMut(usize, usize, usize) -> f32) -> RawVolume {
        RawVolume::from_fn(shape, "t", f).unwrap()
    }

    /// Independent oracle: scan each axis for planes holding a non-zero voxel.
    fn bbox_oracle(v: &RawVolume) -> [usize; 3] {
        let s = v.shape();
        let mut out = [0; 3];
        for (axis, o) in out.iter_mut().enumerate() {
            let nonzero: Vec<usize> = (0..s[axis])
                .filter(|&p| {
                    let mut any = false;
                    for i in 0..s[0] {
                        for j in 0..s[1] {
                            for k in 0..s[2] {
                                let idx = [i, j, k];
                                if idx[axis] == p && v.get(i, j, k) != 0.0 {
                                    any = true;
                                }
                            }
                        }
                    }
                    any
                })
                .collect();
            *o = nonzero.last().unwrap() - nonzero.first().unwrap() + 1;
        }
        out
    }

    #[test]
    fn trim_inner_cube() {
        let v = raw([10, 10, 10], |i, j, k| {
            let inside = |x: usize| (2..=7).contains(&x);
            if inside(i) && inside(j) && inside(k) { 1.0 + i as f32 } else { 0.0 }
        });
        let t = trim_zero_planes(&v).unwrap();
        assert_eq!(t.shape(), [6, 6, 6]);
        assert_eq!(t.shape(), bbox_oracle(&v));
        assert_eq!(t.get(0, 0, 0), 3.0);
    }

    #[test]
    fn trim_keeps_interior_zero_planes() {
        let v = raw([5, 3, 3], |i, _, _| if i == 0 || i == 4 { 1.0 } else { 0.0 });
        assert_eq!(trim_zero_planes(&v).unwrap(), v);
    }

    #[test]
    fn trim_all_zero_fails() {
        let v = raw([3, 3, 3], |_, _, _| 0.0);
        assert!(trim_zero_planes(&v).unwrap_err().to_string().contains("empty after trim"));
    }

    #[test]
    fn resize_constant() {
        let v = raw([7, 11, 5], |_, _, _| 3.5);
        let r = resize_trilinear(&v, 16).unwrap();
        assert_eq!(r.shape(), [16; 3]);
        assert!(r.voxels().iter().all(|&x| x == 3.5));
    }

    #[test]
    fn resize_ramp_stays_linear() {
        let n = 13;
        let v = raw([9, 5, n], |_, _, k| k as f32 / (n - 1) as f32);
        let m = 32;
        let r = resize_trilinear(&v, m).unwrap();
        let mut worst = 0.0f64;
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    let expect = k as f64 / (m - 1) as f64;
                    worst = worst.max((r.get(i, j, k) as f64 - expect).abs());
                }
            }
        }
        assert!(worst < 1e-5, "max ramp error {worst}");
    }

    #[test]
    fn resize_identity() {
        let v = raw([8, 8, 8], |i, j, k| (i * 64 + j * 8 + k) as f32 * 0.13);
        assert_eq!(resize_trilinear(&v, 8).unwrap(), v);
    }

    /// Direct eight-neighbour trilinear formula.
    #[test]
    fn resize_matches_direct_trilinear() {
        let v = raw([4, 6, 5], |i, j, k| ((i * 7 + j * 3 + k * 11) % 17) as f32);
        let m = 9;
        let r = resize_trilinear(&v, m).unwrap();
        let s = v.shape();
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    let p: Vec<f64> = [i, j, k]
                        .iter()
                        .zip(s)
                        .map(|(&o, n)| o as f64 * (n - 1) as f64 / (m - 1) as f64)
                        .collect();
                    let mut acc = 0.0;
                    for c in 0..8 {
                        let mut idx = [0usize; 3];
                        let mut wgt = 1.0;
                        for a in 0..3 {
                            let f = p[a].floor();
                            let t = p[a] - f;
                            let hi = (c >> a) & 1 == 1;
                            idx[a] = ((f as usize) + hi as usize).min(s[a] - 1);
                            wgt *= if hi { t } else { 1.0 - t };
                        }
                        acc += wgt * v.get(idx[0], idx[1], idx[2]) as f64;
                    }
                    assert!((r.get(i, j, k) as f64 - acc).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn normalize_endpoints() {
        let v = raw([3, 3, 3], |i, j, k| match (i, j, k) {
            (0, 0, 0) => 0.0,
            (2, 2, 2) => 100.0,
            (1, 1, 1) => 50.0,
            _ => 25.0,
        });
        let n = normalize_to_unit_range(&v).unwrap();
        assert_eq!(n.get(0, 0, 0), -1.0);
        assert_eq!(n.get(2, 2, 2), 1.0);
        assert_eq!(n.get(1, 1, 1), 0.0);
    }

    #[test]
    fn normalize_identity_and_degenerate() {
        let v = raw([2, 2, 2], |i, j, k| [-1.0, -0.3, 0.2, 1.0][(i + j + k).min(3)]);
        let n = normalize_to_unit_range(&v).unwrap();
        for (a, b) in n.voxels().iter().zip(v.voxels()) {
            assert!((a - b).abs() <= 1e-7);
        }
        let c = raw([2, 2, 2], |_, _, _| 4.0);
        assert!(normalize_to_unit_range(&c).unwrap_err().to_string().contains("degenerate intensity range"));
    }

    fn vol(size: usize, f: impl FnMut(usize, usize, usize) -> f32) -> Volume3D {
        normalize_to_unit_range(&raw([size; 3], f)).unwrap()
    }

    #[test]
    fn flip_mirrors_axis_zero() {
        let x = vol(4, |i, j, k| (i * 16 + j * 4 + k) as f32);
        let f = augment_with(&x, true, 1.0);
        for i in 0..4 {
            assert_eq!(f.get(i, 1, 2), x.get(3 - i, 1, 2));
        }
        assert_eq!(augment_with(&f, true, 1.0), x);
    }

    #[test]
    fn factor_clamps() {
        let x = vol(3, |i, j, k| (i + j + k) as f32);
        let a = augment_with(&x, false, 1.1);
        assert_eq!(a.min_max(), (-1.0, 1.0));
        for (o, i) in a.voxels().iter().zip(x.voxels()) {
            assert_eq!(*o, (i * 1.1).clamp(-1.0, 1.0));
        }
    }

    #[test]
    fn augment_draws_flip_then_factor() {
        let x = vol(4, |i, j, k| (i * 5 + j * 3 + k) as f32);
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = a.clone();
        let got = augment(&x, &mut a);
        let flip = b.gen_bool(0.5);
        let factor = b.gen_range(0.9f32..=1.1);
        assert!((0.9..=1.1).contains(&factor));
        assert_eq!(got, augment_with(&x, flip, factor));
    }

    proptest! {
        #[test]
        fn trim_is_idempotent(
            shape in prop::array::uniform3(1usize..7),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n: usize = shape.iter().product();
            let mut data: Vec<f32> = (0..n).map(|_| if rng.gen_bool(0.2) { rng.gen_range(-5.0..5.0) } else { 0.0 }).collect();
            data[rng.gen_range(0..n)] = 1.0;
            let v = RawVolume::new(shape, data, "p").unwrap();
            let once = trim_zero_planes(&v).unwrap();
            prop_assert_eq!(once.shape(), bbox_oracle(&v));
            prop_assert_eq!(trim_zero_planes(&once).unwrap(), once);
        }

        #[test]
        fn flip_preserves_multiset(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = vol(5, |_, _, _| rng.gen_range(-3.0..3.0));
            let f = flip_lr(&x);
            let mut a = x.voxels().to_vec();
            let mut b = f.voxels().to_vec();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            prop_assert_eq!(a, b);
            prop_assert_eq!(flip_lr(&f), x);
        }

        #[test]
        fn resize_never_overshoots(
            shape in prop::array::uniform3(1usize..8),
            target in 2usize..12,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n: usize = shape.iter().product();
            let v = RawVolume::new(shape, (0..n).map(|_| rng.gen_range(-100.0f32..100.0)).collect(), "p").unwrap();
            let (lo, hi) = v.voxels().iter().fold((f32::MAX, f32::MIN), |(l, h), &x| (l.min(x), h.max(x)));
            let r = resize_trilinear(&v, target).unwrap();
            prop_assert!(r.voxels().iter().all(|&x| x >= lo && x <= hi));
        }

        #[test]
        fn normalize_attains_both_ends(seed in any::<u64>(), scale in 1e-3f32..1e4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = raw([4; 3], |_, _, _| rng.gen_range(0.0f32..1.0) * scale);
            let n = normalize_to_unit_range(&v).unwrap();
            prop_assert_eq!(n.min_max(), (-1.0, 1.0));
        }

        #[test]
        fn pipeline_yields_valid_volumes(
            shape in prop::array::uniform3(1usize..9),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n: usize = shape.iter().product();
            let mut data: Vec<f32> = (0..n).map(|_| if rng.gen_bool(0.5) { rng.gen_range(0.0f32..500.0) } else { 0.0 }).collect();
            data[0] = 1.0;
            data[n - 1] = 2.0;
            let v = RawVolume::new(shape, data, "p").unwrap();
            match prepare_volume(&v, 16) {
                Ok(out) => {
                    prop_assert_eq!(out.size(), 16);
                    prop_assert_eq!(out.min_max(), (-1.0, 1.0));
                }
                Err(e) => prop_assert!(e.to_string().contains("degenerate"), "{}", e),
            }
        }
    }
}
