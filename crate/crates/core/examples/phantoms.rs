//! Writes a handful of synthetic head phantoms to NIfTI and reads them back.
//!
//! `cargo run --example phantoms -- [count] [size] [out_dir]`

use volgen::nifti_io::{list_nifti_files, load_nifti};
use volgen::phantom::{phantom_dataset, write_dataset};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let count: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(4);
    let size: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(32);
    let out = args.next().unwrap_or_else(|| "phantoms".into());

    let data = phantom_dataset(7, count, size)?;
    write_dataset(&out, &data)?;
    for path in list_nifti_files(&out)? {
        let raw = load_nifti(&path)?;
        let v = raw.voxels();
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        let inside = v.iter().filter(|&&x| x > -0.99).count() as f64 / v.len() as f64;
        println!(
            "{}  shape {:?}  mean {mean:+.3}  non-background {:.1}%",
            path.display(),
            raw.shape(),
            100.0 * inside
        );
    }
    Ok(())
}
