pub mod batch;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nifti_io;
pub mod optim;
pub mod phantom;
pub mod preprocess;
pub mod rng;
pub mod trainer;
pub mod volume;
