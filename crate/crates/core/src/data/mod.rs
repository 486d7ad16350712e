//! Dataset ingestion, augmentation, and the spatial/frequency input
//! modifications used for interpretability scoring.

pub mod augment;
pub mod cifar;
pub mod dataset;
pub mod dft;
pub mod mnist;
pub mod modify;
pub mod pnm;

pub use augment::augment;
pub use cifar::{load_cifar10, load_cifar10_batch, write_cifar10_batch};
pub use dataset::{ImageDataset, Normalization, Split};
pub use dft::{dft2, idft2, Spectrum};
pub use mnist::{load_mnist, write_mnist};
pub use modify::{freq_filter, occlude, FreqKeep, Modification, ModificationKind, OcclusionSource};
