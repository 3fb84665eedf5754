//! Projects two volume populations onto the leading principal components.
//!
//! The second population is a brightened copy of a fresh phantom draw, so
//! its cloud sits visibly apart from the first along PC1.

use volgen::metrics::{pca_csv, pca_project, PcaFit};
use volgen::phantom::phantom_dataset;
use volgen::volume::Volume3D;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let real = phantom_dataset(1, 40, 16)?;
    let shifted: Vec<Volume3D> = phantom_dataset(2, 40, 16)?
        .volumes()
        .iter()
        .map(|v| Volume3D::new(v.size(), v.voxels().iter().map(|x| (x + 0.3).min(1.0)).collect()))
        .collect::<Result<_, _>>()?;

    let rows = pca_project(&real, &shifted, 2, PcaFit::RealOnly)?;
    for population in ["real", "generated"] {
        let pts: Vec<_> = rows.iter().filter(|r| r.population == population).collect();
        let centroid: Vec<f64> = (0..2)
            .map(|k| pts.iter().map(|r| r.coords[k]).sum::<f64>() / pts.len() as f64)
            .collect();
        println!("{population:9} n={}  centroid ({:+.3}, {:+.3})", pts.len(), centroid[0], centroid[1]);
    }
    let csv = pca_csv(&rows);
    println!("\nfirst rows of the csv:");
    for line in csv.lines().take(4) {
        println!("{line}");
    }
    Ok(())
}
