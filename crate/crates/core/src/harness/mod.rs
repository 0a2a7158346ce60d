//! Evaluation metrics, attention export and the command-line front end.

pub mod bleu;
pub mod cli;
pub mod eval;
pub mod export;
pub mod gradsuite;
pub mod metrics;

pub use bleu::{bleu_n, BleuStats};
pub use eval::{evaluate, EvalOptions, EvalReport, FeatureBank, MetricReport};
pub use export::{export_pgm, map_to_pgm};
pub use metrics::{attention_mass_in_mask, cr_at_k, dca_score, downsample_mask, extract_conclusion, rank_desc};
pub use cli::cli_main;
