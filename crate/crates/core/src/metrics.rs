//! Evaluation: batch-wise linear-kernel MMD², volumetric MS-SSIM and PCA
//! projections of real and generated volumes.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VolgenError};
use crate::networks::Network;
use crate::trainer::sample_generator;
use crate::volume::{Dataset, Volume3D};

/// Gaussian window extent and width for SSIM statistics.
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
/// Intensity range after shifting volumes from [-1, 1] to [0, 2].
pub const DYNAMIC_RANGE: f64 = 2.0;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub const DESK_SCALE_WEIGHTS: [f64; 3] = [0.2, 0.3, 0.5];
pub const STANDARD_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

pub const DEFAULT_TRIALS: usize = 100;
pub const DEFAULT_METRIC_BATCH: usize = 8;
pub const DEFAULT_PAIRS: usize = 1000;

/// Tables print MMD multiplied by this factor.
pub const MMD_REPORT_SCALE: f64 = 1e-4;

/// Source of volumes for sample-based metrics.
pub trait Sampler {
    fn sample(&mut self, n: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<Volume3D>>;
}

/// Draws from a generator network in evaluation mode.
pub struct GeneratorSampler<'a> {
    pub generator: &'a Network<f32>,
    pub latent_size: usize,
}

impl Sampler for GeneratorSampler<'_> {
    fn sample(&mut self, n: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<Volume3D>> {
        Ok(sample_generator(self.generator, self.latent_size, n, rng))
    }
}

/// Uniform draws with replacement from a dataset.
pub struct DatasetSampler<'a>(pub &'a Dataset);

impl Sampler for DatasetSampler<'_> {
    fn sample(&mut self, n: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<Volume3D>> {
        if self.0.is_empty() {
            return Err(VolgenError::Metric("cannot sample from an empty dataset".into()));
        }
        Ok((0..n).map(|_| self.0.volumes()[rng.gen_range(0..self.0.len())].clone()).collect())
    }
}

/// Always returns the same volume: a totally collapsed generator.
pub struct FixedSampler(pub Volume3D);

impl Sampler for FixedSampler {
    fn sample(&mut self, n: usize, _rng: &mut dyn rand::RngCore) -> Result<Vec<Volume3D>> {
        Ok(vec![self.0.clone(); n])
    }
}

/// Flattened generated and real batches, one row per volume.
#[derive(Clone, Debug)]
pub struct MetricBatch {
    g: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl MetricBatch {
    pub fn new(g: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if g.shape() != r.shape() {
            return Err(VolgenError::Shape(format!(
                "metric batch: generated {:?} vs real {:?}",
                g.shape(),
                r.shape()
            )));
        }
        if g.nrows() == 0 || g.ncols() == 0 {
            return Err(VolgenError::Shape("metric batch is empty".into()));
        }
        if g.iter().chain(r.iter()).any(|v| !v.is_finite()) {
            return Err(VolgenError::Metric("metric batch holds non-finite values".into()));
        }
        Ok(Self { g, r })
    }

    pub fn from_volumes(g: &[Volume3D], r: &[Volume3D]) -> Result<Self> {
        Self::new(flatten(g)?, flatten(r)?)
    }

    pub fn generated(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn real(&self) -> &DMatrix<f64> {
        &self.r
    }
}

/// Stacks volumes as the rows of a matrix.
pub fn flatten(vols: &[Volume3D]) -> Result<DMatrix<f64>> {
    let n = vols.first().map_or(0, |v| v.voxels().len());
    if vols.iter().any(|v| v.voxels().len() != n) {
        return Err(VolgenError::Shape("volumes of different sizes in one batch".into()));
    }
    Ok(DMatrix::from_fn(vols.len(), n, |i, j| vols[i].voxels()[j] as f64))
}

/// `(1/B²)(Σ g·gᵀ + Σ r·rᵀ − 2 Σ g·rᵀ)`, summing every Gram entry.
pub fn mmd2_batchwise(m: &MetricBatch) -> f64 {
    let b = m.g.nrows() as f64;
    let gg = (&m.g * m.g.transpose()).sum();
    let rr = (&m.r * m.r.transpose()).sum();
    let gr = (&m.g * m.r.transpose()).sum();
    (gg + rr - 2.0 * gr) / (b * b)
}

/// Mean and standard deviation of batch-wise MMD² over `trials`
/// independent draws of `batch` generated and `batch` real volumes.
pub fn mmd_score(
    sampler: &mut dyn Sampler,
    real: &Dataset,
    trials: usize,
    batch: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<(f64, f64)> {
    if trials == 0 || batch == 0 {
        return Err(VolgenError::Metric("mmd needs at least one trial and a non-empty batch".into()));
    }
    if real.len() < batch {
        return Err(VolgenError::Metric(format!(
            "dataset too small for mmd: {} volumes, batch {batch}",
            real.len()
        )));
    }
    let mut values = Vec::with_capacity(trials);
    for _ in 0..trials {
        let r: Vec<Volume3D> = (0..batch)
            .map(|_| real.volumes()[rng.gen_range(0..real.len())].clone())
            .collect();
        let g = sampler.sample(batch, rng)?;
        values.push(mmd2_batchwise(&MetricBatch::from_volumes(&g, &r)?));
    }
    Ok(mean_std(&values))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Number of pyramid levels used for volumes of extent `v`.
pub fn ms_ssim_scales(v: usize) -> usize {
    if v >= 128 {
        STANDARD_WEIGHTS.len()
    } else {
        DESK_SCALE_WEIGHTS.len()
    }
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Cubic f64 volume used inside the SSIM computation.
#[derive(Clone, Debug)]
struct Cube {
    n: usize,
    data: Vec<f64>,
}

impl Cube {
    fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[(z * self.n + y) * self.n + x]
    }

    /// Valid-mode separable filtering along all three axes.
    fn filter(&self, w: &[f64]) -> Cube {
        let k = w.len();
        let m = self.n - k + 1;
        let n = self.n;
        let mut a = vec![0.0; n * n * m];
        for zy in 0..n * n {
            for x in 0..m {
                a[zy * m + x] = (0..k).map(|t| w[t] * self.data[zy * n + x + t]).sum();
            }
        }
        let mut b = vec![0.0; n * m * m];
        for z in 0..n {
            for y in 0..m {
                for x in 0..m {
                    b[(z * m + y) * m + x] = (0..k).map(|t| w[t] * a[(z * n + y + t) * m + x]).sum();
                }
            }
        }
        let mut c = vec![0.0; m * m * m];
        for z in 0..m {
            for y in 0..m {
                for x in 0..m {
                    c[(z * m + y) * m + x] = (0..k).map(|t| w[t] * b[((z + t) * m + y) * m + x]).sum();
                }
            }
        }
        Cube { n: m, data: c }
    }

    fn avg_pool(&self) -> Cube {
        let m = self.n / 2;
        let mut data = vec![0.0; m * m * m];
        for z in 0..m {
            for y in 0..m {
                for x in 0..m {
                    let mut s = 0.0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                s += self.at(2 * z + dz, 2 * y + dy, 2 * x + dx);
                            }
                        }
                    }
                    data[(z * m + y) * m + x] = s / 8.0;
                }
            }
        }
        Cube { n: m, data }
    }

    fn zip(&self, other: &Cube, f: impl Fn(f64, f64) -> f64) -> Cube {
        Cube {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

/// Mean SSIM and mean contrast-structure term of two equal cubes.
fn ssim_terms(x: &Cube, y: &Cube, w: &[f64]) -> (f64, f64) {
    let c1 = (SSIM_K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (SSIM_K2 * DYNAMIC_RANGE).powi(2);
    let mx = x.filter(w);
    let my = y.filter(w);
    let sxx = x.zip(x, |a, b| a * b).filter(w);
    let syy = y.zip(y, |a, b| a * b).filter(w);
    let sxy = x.zip(y, |a, b| a * b).filter(w);
    let n = mx.data.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mx.data.len() {
        let (ux, uy) = (mx.data[i], my.data[i]);
        let vx = sxx.data[i] - ux * ux;
        let vy = syy.data[i] - uy * uy;
        let cov = sxy.data[i] - ux * uy;
        let c = (2.0 * cov + c2) / (vx + vy + c2);
        let l = (2.0 * ux * uy + c1) / (ux * ux + uy * uy + c1);
        cs += c;
        ssim += l * c;
    }
    (ssim / n, cs / n)
}

/// Volumetric multi-scale SSIM of two volumes.
///
/// Each scale contributes its mean contrast-structure term; the coarsest
/// scale contributes its full SSIM (luminance included). Negative terms are
/// clamped to zero before weighting, so the result lies in [0, 1].
pub fn ms_ssim_pair(x: &Volume3D, y: &Volume3D) -> Result<f64> {
    if x.size() != y.size() {
        return Err(VolgenError::Shape(format!(
            "ms-ssim: volumes of size {} and {}",
            x.size(),
            y.size()
        )));
    }
    let v = x.size();
    let scales = ms_ssim_scales(v);
    let weights: &[f64] = if scales == STANDARD_WEIGHTS.len() {
        &STANDARD_WEIGHTS
    } else {
        &DESK_SCALE_WEIGHTS
    };
    let needed = (1 << (scales - 1)) * 8;
    if v < needed {
        return Err(VolgenError::Metric(format!(
            "volume size {v} too small for {scales}-scale ms-ssim (needs {needed})"
        )));
    }
    let w = gaussian_window();
    let to_cube = |vol: &Volume3D| Cube {
        n: v,
        data: vol.voxels().iter().map(|&a| a as f64 + 1.0).collect(),
    };
    let (mut a, mut b) = (to_cube(x), to_cube(y));
    let mut score = 1.0;
    for (s, &wt) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_terms(&a, &b, &w);
        let term = if s + 1 == scales { ssim } else { cs };
        score *= term.max(0.0).powf(wt);
        if s + 1 < scales {
            a = a.avg_pool();
            b = b.avg_pool();
        }
    }
    Ok(score)
}

/// Mean MS-SSIM over `pairs` independently drawn sample pairs.
pub fn ms_ssim_diversity(sampler: &mut dyn Sampler, pairs: usize, rng: &mut dyn rand::RngCore) -> Result<f64> {
    if pairs == 0 {
        return Err(VolgenError::Metric("ms-ssim diversity needs at least one pair".into()));
    }
    const CHUNK: usize = 32;
    let mut total = 0.0;
    let mut done = 0;
    while done < pairs {
        let k = CHUNK.min(pairs - done);
        let vols = sampler.sample(2 * k, rng)?;
        for pair in vols.chunks_exact(2) {
            total += ms_ssim_pair(&pair[0], &pair[1])?;
        }
        done += k;
    }
    Ok(total / pairs as f64)
}

/// MMD summary over independent trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdSummary {
    pub mean: f64,
    pub std: f64,
    pub n_trials: usize,
    pub batch: usize,
}

/// Mean MS-SSIM over sample pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsSsimSummary {
    pub mean: f64,
    pub n_pairs: usize,
}

/// Summary of one evaluation. Either metric may be absent when only the
/// other was requested.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmd: Option<MmdSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msssim: Option<MsSsimSummary>,
    pub seed: u64,
}

/// Which metrics an evaluation computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MetricSelection {
    Mmd,
    MsSsim,
    #[default]
    Both,
}

impl MetricSelection {
    pub fn mmd(self) -> bool {
        self != Self::MsSsim
    }

    pub fn msssim(self) -> bool {
        self != Self::Mmd
    }
}

impl MetricReport {
    /// Column names and values; MMD appears in units of 10⁴.
    fn columns(&self) -> Vec<(&'static str, String)> {
        let mut cols = Vec::new();
        if let Some(m) = &self.mmd {
            cols.push(("mmd_x1e-4_mean", format!("{:.6}", m.mean * MMD_REPORT_SCALE)));
            cols.push(("mmd_x1e-4_std", format!("{:.6}", m.std * MMD_REPORT_SCALE)));
            cols.push(("n_trials", m.n_trials.to_string()));
            cols.push(("batch", m.batch.to_string()));
        }
        if let Some(m) = &self.msssim {
            cols.push(("msssim_mean", format!("{:.6}", m.mean)));
            cols.push(("n_pairs", m.n_pairs.to_string()));
        }
        cols.push(("seed", self.seed.to_string()));
        cols
    }

    pub fn to_csv(&self) -> String {
        let cols = self.columns();
        let head: Vec<&str> = cols.iter().map(|c| c.0).collect();
        let vals: Vec<&str> = cols.iter().map(|c| c.1.as_str()).collect();
        format!("{}\n{}\n", head.join(","), vals.join(","))
    }

    /// Writes `<stem>.csv` and `<stem>.json` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| VolgenError::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| VolgenError::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(&json, text).map_err(|e| VolgenError::io(&json, e))?;
        Ok(())
    }
}

/// Evaluation protocol: trial counts and the seed of the evaluation stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalProtocol {
    pub trials: usize,
    pub batch: usize,
    pub pairs: usize,
    pub seed: u64,
    pub metrics: MetricSelection,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            trials: DEFAULT_TRIALS,
            batch: DEFAULT_METRIC_BATCH,
            pairs: DEFAULT_PAIRS,
            seed: 0,
            metrics: MetricSelection::Both,
        }
    }
}

/// MMD against `real` and MS-SSIM diversity of one sampler.
pub fn evaluate_sampler(sampler: &mut dyn Sampler, real: &Dataset, protocol: &EvalProtocol) -> Result<MetricReport> {
    use crate::rng::{stream, Stream};
    let mut rng = stream(protocol.seed, Stream::Eval);
    let mmd = if protocol.metrics.mmd() {
        let (mean, std) = mmd_score(sampler, real, protocol.trials, protocol.batch, &mut rng)?;
        Some(MmdSummary {
            mean,
            std,
            n_trials: protocol.trials,
            batch: protocol.batch,
        })
    } else {
        None
    };
    let msssim = if protocol.metrics.msssim() {
        Some(MsSsimSummary {
            mean: ms_ssim_diversity(sampler, protocol.pairs, &mut rng)?,
            n_pairs: protocol.pairs,
        })
    } else {
        None
    };
    Ok(MetricReport {
        mmd,
        msssim,
        seed: protocol.seed,
    })
}

/// Which population the principal axes are fitted on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PcaFit {
    #[default]
    RealOnly,
    Combined,
}

/// Principal axes of a set of flattened volumes.
#[derive(Clone, Debug)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// One unit-norm component per row.
    pub components: DMatrix<f64>,
    /// Variance along each component.
    pub variances: Vec<f64>,
}

impl PcaModel {
    /// Fits `k` components through the eigen-decomposition of the n×n
    /// Gram matrix of the centred rows, which is cheaper than the voxel
    /// covariance when n is much smaller than the voxel count.
    pub fn fit(x: &DMatrix<f64>, k: usize) -> Result<Self> {
        let (n, d) = x.shape();
        if n < 2 {
            return Err(VolgenError::Metric("pca needs at least two volumes".into()));
        }
        if k == 0 || k > n {
            return Err(VolgenError::Metric(format!("pca: k = {k} with {n} volumes")));
        }
        let mean: Vec<f64> = (0..d).map(|j| x.column(j).mean()).collect();
        let mut c = x.clone();
        for mut row in c.row_iter_mut() {
            for (v, m) in row.iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        let gram = &c * c.transpose();
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top = eig.eigenvalues[order[0]];
        if top <= 1e-12 * (d as f64) {
            return Err(VolgenError::Metric("degenerate covariance: all volumes identical".into()));
        }
        let mut components = DMatrix::zeros(k, d);
        let mut variances = Vec::with_capacity(k);
        for (row, &i) in order.iter().take(k).enumerate() {
            let lambda = eig.eigenvalues[i];
            variances.push(lambda.max(0.0) / (n - 1) as f64);
            if lambda <= 1e-12 * top {
                // No variance left: the remaining axes are arbitrary, and
                // coordinates along them are zero for the fitted rows.
                continue;
            }
            let u = eig.eigenvectors.column(i);
            let mut axis = c.transpose() * u;
            axis /= lambda.sqrt();
            components.set_row(row, &axis.transpose());
        }
        Ok(Self {
            mean,
            components,
            variances,
        })
    }

    /// Coordinates of each row of `x` on the components.
    pub fn project(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(VolgenError::Shape(format!(
                "pca: {} voxels, model fitted on {}",
                x.ncols(),
                self.mean.len()
            )));
        }
        let mut c = x.clone();
        for mut row in c.row_iter_mut() {
            for (v, m) in row.iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        Ok(c * self.components.transpose())
    }
}

/// One projected volume.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaRow {
    pub population: String,
    pub coords: Vec<f64>,
}

/// Projects real and generated volumes onto `k` principal components.
pub fn pca_project(real: &Dataset, generated: &[Volume3D], k: usize, fit: PcaFit) -> Result<Vec<PcaRow>> {
    let r = flatten(real.volumes())?;
    let g = flatten(generated)?;
    if !generated.is_empty() && g.ncols() != r.ncols() {
        return Err(VolgenError::Shape("generated and real volumes differ in size".into()));
    }
    let model = match fit {
        PcaFit::RealOnly => PcaModel::fit(&r, k)?,
        PcaFit::Combined => {
            let mut both = DMatrix::zeros(r.nrows() + g.nrows(), r.ncols());
            both.rows_mut(0, r.nrows()).copy_from(&r);
            both.rows_mut(r.nrows(), g.nrows()).copy_from(&g);
            PcaModel::fit(&both, k)?
        }
    };
    let mut rows = Vec::with_capacity(r.nrows() + g.nrows());
    for (label, m) in [("real", &r), ("generated", &g)] {
        if m.nrows() == 0 {
            continue;
        }
        let p = model.project(m)?;
        rows.extend(p.row_iter().map(|row| PcaRow {
            population: label.to_string(),
            coords: row.iter().copied().collect(),
        }));
    }
    Ok(rows)
}

/// Delimited text with a `population,pc1,...` header.
pub fn pca_csv(rows: &[PcaRow]) -> String {
    let k = rows.first().map_or(2, |r| r.coords.len());
    let mut out = String::from("population");
    for i in 1..=k {
        let _ = write!(out, ",pc{i}");
    }
    out.push('\n');
    for r in rows {
        out.push_str(&r.population);
        for c in &r.coords {
            let _ = write!(out, ",{c:.6}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{make_phantom, phantom_dataset};
    use crate::volume::Provenance;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    fn vol_from(size: usize, f: impl FnMut(usize) -> f32) -> Volume3D {
        Volume3D::new(size, (0..size * size * size).map(f).collect()).unwrap()
    }

    #[test]
    fn mmd_hand_example() {
        let m = MetricBatch::new(mat(&[&[1.0], &[1.0]]), mat(&[&[0.0], &[0.0]])).unwrap();
        assert_eq!(mmd2_batchwise(&m), 1.0);
        let same = MetricBatch::new(mat(&[&[1.0, 2.0], &[3.0, -1.0]]), mat(&[&[1.0, 2.0], &[3.0, -1.0]])).unwrap();
        assert_eq!(mmd2_batchwise(&same), 0.0);
    }

    #[test]
    fn metric_batch_rejects_mismatch() {
        assert!(MetricBatch::new(mat(&[&[1.0]]), mat(&[&[1.0], &[2.0]])).is_err());
        assert!(MetricBatch::new(mat(&[&[f64::NAN]]), mat(&[&[1.0]])).is_err());
    }

    proptest! {
        #[test]
        fn mmd_matches_mean_difference(seed in any::<u64>(), b in 1usize..6, n in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = DMatrix::from_fn(b, n, |_, _| rng.gen_range(-1.0..1.0));
            let r = DMatrix::from_fn(b, n, |_, _| rng.gen_range(-1.0..1.0));
            let m = MetricBatch::new(g.clone(), r.clone()).unwrap();
            let v = mmd2_batchwise(&m);
            let oracle: f64 = (0..n)
                .map(|j| {
                    let dg: f64 = (0..b).map(|i| g[(i, j)]).sum::<f64>() / b as f64;
                    let dr: f64 = (0..b).map(|i| r[(i, j)]).sum::<f64>() / b as f64;
                    (dg - dr).powi(2)
                })
                .sum();
            prop_assert!((v - oracle).abs() <= 1e-9 * oracle.max(1e-12) + 1e-12);
            prop_assert!(v >= -1e-9);
            let swapped = mmd2_batchwise(&MetricBatch::new(r, g).unwrap());
            prop_assert!((v - swapped).abs() <= 1e-12 * v.abs().max(1.0));
        }
    }

    fn normal_dataset(n: usize, shift: f32, rng: &mut ChaCha8Rng) -> Dataset {
        // 16³ volumes filled with N(shift, 1) voxels, clamped into range by
        // a small scale factor so the Volume3D bounds hold.
        let vols = (0..n)
            .map(|_| {
                vol_from(16, |_| {
                    let z: f32 = StandardNormal.sample(rng);
                    ((z + shift) * 0.1).clamp(-1.0, 1.0)
                })
            })
            .collect();
        Dataset::new(vols, Provenance::Phantom).unwrap()
    }

    #[test]
    fn mmd_score_separates_shifted_populations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = normal_dataset(100, 0.0, &mut rng);
        let b = normal_dataset(100, 0.0, &mut rng);
        let c = normal_dataset(100, 5.0, &mut rng);
        let mut eval = ChaCha8Rng::seed_from_u64(1);
        let (same, same_sd) = mmd_score(&mut DatasetSampler(&b), &a, 100, 8, &mut eval).unwrap();
        let (far, _) = mmd_score(&mut DatasetSampler(&c), &a, 100, 8, &mut eval).unwrap();
        // Per voxel the batch means differ by 0.5 (5 × 0.1) plus noise of
        // variance 2·0.01/8, so far ≈ 4096·(0.25 + 0.0025).
        let expect_far = 4096.0 * (0.25 + 0.0025);
        assert!((far - expect_far).abs() / expect_far < 0.02, "{far}");
        // Same distribution: compare with a direct Monte-Carlo run of the
        // estimator, written with plain loops over batch means.
        let mut mc = ChaCha8Rng::seed_from_u64(99);
        let mc_trials = 2000;
        let mut acc = Vec::with_capacity(mc_trials);
        for _ in 0..mc_trials {
            let mut diff = vec![0.0f64; 4096];
            for _ in 0..8 {
                let r = &a.volumes()[mc.gen_range(0..100)];
                let g = &b.volumes()[mc.gen_range(0..100)];
                for (d, (&x, &y)) in diff.iter_mut().zip(g.voxels().iter().zip(r.voxels())) {
                    *d += (x as f64 - y as f64) / 8.0;
                }
            }
            acc.push(diff.iter().map(|d| d * d).sum::<f64>());
        }
        let (oracle, oracle_sd) = mean_std(&acc);
        let se = (same_sd.powi(2) / 100.0 + oracle_sd.powi(2) / mc_trials as f64).sqrt();
        assert!((same - oracle).abs() < 3.0 * se, "{same} vs {oracle} ± {se}");
        // Against its own population the estimator sits near 4096·2/8
        // (in units of the 0.01 voxel variance), about 1/101 of `far`.
        let (own, _) = mmd_score(&mut DatasetSampler(&a), &a, 100, 8, &mut eval).unwrap();
        assert!(far > 100.0 * own, "{far} vs {own}");
    }

    /// Replays the real draws made by `mmd_score` from a cloned stream.
    struct Replay<'a> {
        data: &'a Dataset,
        rng: ChaCha8Rng,
    }

    impl Sampler for Replay<'_> {
        fn sample(&mut self, n: usize, _rng: &mut dyn rand::RngCore) -> Result<Vec<Volume3D>> {
            Ok((0..n)
                .map(|_| self.data.volumes()[self.rng.gen_range(0..self.data.len())].clone())
                .collect())
        }
    }

    #[test]
    fn replaying_real_draws_scores_zero() {
        let data = phantom_dataset(3, 10, 16).unwrap();
        let rng = ChaCha8Rng::seed_from_u64(11);
        let mut replay = Replay {
            data: &data,
            rng: rng.clone(),
        };
        let (mean, sd) = mmd_score(&mut replay, &data, 20, 4, &mut rng.clone()).unwrap();
        assert_eq!((mean, sd), (0.0, 0.0));
    }

    #[test]
    fn mmd_score_rejects_small_dataset() {
        let data = phantom_dataset(3, 4, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(mmd_score(&mut DatasetSampler(&data), &data, 3, 8, &mut rng).is_err());
    }

    fn phantom(seed: u64, v: usize) -> Volume3D {
        make_phantom(&mut ChaCha8Rng::seed_from_u64(seed), v).unwrap()
    }

    #[test]
    fn ms_ssim_self_similarity_and_symmetry() {
        let (x, y) = (phantom(1, 32), phantom(2, 32));
        assert!((ms_ssim_pair(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        let a = ms_ssim_pair(&x, &y).unwrap();
        let b = ms_ssim_pair(&y, &x).unwrap();
        assert!((a - b).abs() < 1e-9);
        assert!((0.0..1.0).contains(&a));
    }

    #[test]
    fn ms_ssim_degrades_with_noise() {
        let x = phantom(4, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut noisy = |amp: f32| {
            let v: Vec<f32> = x
                .voxels()
                .iter()
                .map(|&a| (a + rng.gen_range(-amp..=amp)).clamp(-1.0, 1.0))
                .collect();
            Volume3D::new(32, v).unwrap()
        };
        let (strong, weak) = (noisy(0.5), noisy(0.1));
        assert!(ms_ssim_pair(&x, &strong).unwrap() < ms_ssim_pair(&x, &weak).unwrap());
    }

    #[test]
    fn ms_ssim_rejects_small_or_mismatched() {
        assert!(ms_ssim_pair(&phantom(1, 16), &phantom(2, 16)).is_err());
        assert!(ms_ssim_pair(&phantom(1, 32), &phantom(2, 16)).is_err());
    }

    #[test]
    fn collapsed_sampler_scores_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = ms_ssim_diversity(&mut FixedSampler(phantom(5, 32)), 5, &mut rng).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diversity_is_reproducible() {
        let data = phantom_dataset(1, 12, 32).unwrap();
        let run = || ms_ssim_diversity(&mut DatasetSampler(&data), 6, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn pca_rank_one_data() {
        let vols: Vec<Volume3D> = [-0.5f32, 0.0, 0.5]
            .iter()
            .map(|&a| vol_from(16, |i| if i == 100 { a } else { 0.2 }))
            .collect();
        let data = Dataset::new(vols, Provenance::Phantom).unwrap();
        let model = PcaModel::fit(&flatten(data.volumes()).unwrap(), 2).unwrap();
        assert!(model.variances[1].abs() < 1e-12);
        let rows = pca_project(&data, &[], 2, PcaFit::RealOnly).unwrap();
        let pc1: Vec<f64> = rows.iter().map(|r| r.coords[0].abs()).collect();
        assert!((pc1[0] - 0.5).abs() < 1e-6 && pc1[1] < 1e-6 && (pc1[2] - 0.5).abs() < 1e-6);
        assert!(rows.iter().all(|r| r.coords[1].abs() < 1e-9));
    }

    #[test]
    fn pca_reconstructs_centred_data_at_full_rank() {
        let data = phantom_dataset(8, 5, 16).unwrap();
        let x = flatten(data.volumes()).unwrap();
        // Five centred rows span at most four dimensions.
        let model = PcaModel::fit(&x, 4).unwrap();
        let gram = &model.components * model.components.transpose();
        assert!((gram - DMatrix::identity(4, 4)).abs().max() < 1e-6);
        let coords = model.project(&x).unwrap();
        let back = &coords * &model.components;
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                assert!((back[(i, j)] - (x[(i, j)] - model.mean[j])).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn pca_identical_populations_coincide() {
        let data = phantom_dataset(2, 6, 16).unwrap();
        let rows = pca_project(&data, data.volumes(), 2, PcaFit::RealOnly).unwrap();
        let (real, gen) = rows.split_at(6);
        for (a, b) in real.iter().zip(gen) {
            assert_eq!(a.coords, b.coords);
            assert_eq!((a.population.as_str(), b.population.as_str()), ("real", "generated"));
        }
        let csv = pca_csv(&rows);
        assert!(csv.starts_with("population,pc1,pc2\n"));
        assert_eq!(csv.lines().count(), 13);
    }

    #[test]
    fn pca_rejects_identical_volumes() {
        let v = phantom(1, 16);
        let data = Dataset::new(vec![v.clone(), v], Provenance::Phantom).unwrap();
        assert!(pca_project(&data, &[], 1, PcaFit::RealOnly).is_err());
        assert!(pca_project(&data, &[], 3, PcaFit::RealOnly).is_err());
    }

    #[test]
    fn report_round_trips() {
        let r = MetricReport {
            mmd: Some(MmdSummary {
                mean: 1234.5,
                std: 10.0,
                n_trials: 100,
                batch: 8,
            }),
            msssim: Some(MsSsimSummary {
                mean: 0.8,
                n_pairs: 1000,
            }),
            seed: 7,
        };
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path(), "metrics").unwrap();
        let text = std::fs::read_to_string(dir.path().join("metrics.json")).unwrap();
        assert_eq!(serde_json::from_str::<MetricReport>(&text).unwrap(), r);
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "mmd_x1e-4_mean,mmd_x1e-4_std,n_trials,batch,msssim_mean,n_pairs,seed");
        assert_eq!(lines[1], "0.123450,0.001000,100,8,0.800000,1000,7");
    }

    #[test]
    fn mmd_only_report_omits_msssim() {
        let data = phantom_dataset(5, 10, 32).unwrap();
        let protocol = EvalProtocol {
            trials: 3,
            batch: 4,
            pairs: 2,
            seed: 1,
            metrics: MetricSelection::Mmd,
        };
        let r = evaluate_sampler(&mut DatasetSampler(&data), &data, &protocol).unwrap();
        assert!(r.mmd.is_some() && r.msssim.is_none());
        assert!(!r.to_csv().contains("msssim"));
        assert!(!serde_json::to_string(&r).unwrap().contains("msssim"));
    }
}
