//! Poses, CTFs, projection operators and synthetic data.

mod ctf;
mod dataset;
mod pose;
mod projector;
mod volume;

pub use ctf::{sample_ctfs, CtfDistribution, CtfParams};
pub use dataset::{mean_signal_power, phantom, sigma_for_snr, synthesize_dataset, ImageStack};
pub use pose::{sample_concentrated_poses, sample_uniform_poses, Pose};
pub use projector::{ImageFrame, Interp, Projector, Stencil};
pub use volume::FourierVolume;
