//! Seeded phantom volumes, exact hierarchical labels and template-rendered reports.

pub mod config;
pub mod dataset;
pub mod phantom;
pub mod report;

pub use config::{DatasetConfig, ForcedFinding, ReportOptions};
pub use dataset::{class_distribution, make_dataset, ClassCount, Dataset, Sample};
pub use phantom::{apply_windows, generate_phantom, FindingSpec, GroundTruth, Grid3, PhantomVolume, Window};
pub use report::{render_report, Section, StructuredReport};
