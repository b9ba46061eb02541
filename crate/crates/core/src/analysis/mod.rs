//! Representation similarity, prototype classification and the metrics ledger.

mod cka;
mod ledger;
mod nme;

pub use cka::linear_cka;
pub use ledger::{summarize, BlockwiseRecord, MetricsLedger, Summary, TriMatrix, LEDGER_FORMAT_VERSION};
pub use nme::{build_class_means, fast_remember, nme_classify, ClassMean, ClassMeanStore, FastRemember};
