//! From the GZ2 catalog and images to training-ready batches.

mod catalog;
mod curate;
mod image;
mod loader;
mod manifest;
mod synth;
mod tree;

pub use catalog::{parse_catalog, read_catalog, CatalogParse, CatalogRow, RowRejection, SUM_TOLERANCE};
pub use curate::{select_clean, Clause, Combine, CurationRule, Curation, LabeledSample, RuleSet};
pub use image::{
    augment, central_crop, load_image, rescale, rescale_and_resize, resize_bilinear,
    AugmentationConfig, ByteImage, Image, PreprocessConfig, Raster, STANDARD_SIZES,
};
pub use loader::{for_each_batch, Batch, Dataset, ImageSource, Sample, Target};
pub use manifest::{read_manifest, split_dataset, write_manifest, DatasetManifest, ManifestEntry, Split, SplitRatio};
pub use synth::{render_galaxy, synthetic_set, write_synthetic_set, CLASS_NAMES};
pub use tree::{propagate_tree, Answer, DecisionTree, Next, Task};

pub const NUM_TASKS: usize = 11;
pub const NUM_ANSWERS: usize = 37;
pub const NUM_CLASSES: usize = 7;
