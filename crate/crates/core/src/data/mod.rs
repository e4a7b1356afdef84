//! Label hierarchy, synthetic samples, dataset splits and their on-disk form.

mod disk;
mod generate;
mod hierarchy;
mod split;

pub use disk::{load_dataset, save_dataset, Manifest, ManifestEntry, Role};
pub use generate::{generate_dataset, generate_sample, DatasetSpec, GeneratorSpec};
pub use hierarchy::{HierarchySpec, LabelMap};
pub use split::{normalize_intensity, random_crop, split_dataset, DatasetSplit, Sample};
