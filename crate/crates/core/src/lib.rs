//! Cross-modal identity association: link biometric observations (faces,
//! voices) to device MAC addresses through co-attendance across sessions.

pub mod association;
pub mod device_filter;
pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod linkage_tree;
pub mod model;
pub mod pipeline;
pub mod simulate;

pub use association::{Assignment, ScoreMatrix};
pub use error::{Error, Result};
pub use linkage_tree::LinkageTree;
pub use model::{BiometricSample, ContextMetric, ContextVector, Dataset, MacAddress, Session, Sighting};
