//! Classification and regression scores, ensembles, submission files and
//! feature-map rendering.

mod classification;
mod featmap;
mod regression;
mod submission;

pub use classification::{confusion, report, ClassMetrics, ClassificationReport, ConfusionMatrix};
pub use featmap::{feature_maps, normalize_map, FeatureGrid, FeatureMapConfig};
pub use regression::{ensemble_average, rmse, RegressionReport};
pub use submission::{read_submission, write_submission};
