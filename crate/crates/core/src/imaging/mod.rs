//! Images, PNG I/O, the canonical degradation operator and the patch-pair
//! training pipeline.

mod dataset;
mod image;
mod io;
mod resample;
pub mod synth;

pub use self::image::{Dihedral, Image};
pub use dataset::{augment, Dataset, DatasetSpec, NamedImage, PatchPair};
pub use io::{load_png, save_gray16_png, save_png};
pub use resample::{
    bicubic_resize, bicubic_upsample, cubic_kernel, degrade, degradation, resample_taps, Degradation, Taps,
};
