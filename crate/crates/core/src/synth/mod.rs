//! Procedural corpus of lesion images with templated five-variant reports.

pub mod dataset;
pub mod pnm;
pub mod render;
pub mod reports;
pub mod spec;

pub use dataset::{audit_disjoint, generate, make_case, read_dataset, read_image, write_dataset, Case, Dataset, Split, SynthConfig};
pub use render::{render, Rendered};
pub use reports::{compose_reports, parse_conclusion, parse_level, Report, NUM_TASKS, VARIANTS};
pub use spec::{conclusion_rule, sample_case_spec, CaseSpec, Ellipse, Label, IMAGE_SIZE};
