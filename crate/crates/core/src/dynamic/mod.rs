//! Loss-flow recording, GMM motion classification and the dynamic-object registry.

pub mod classifier;
pub mod flow;
pub mod gmm;
pub mod registry;

pub use classifier::{ClassifierConfig, FrameClassification, MotionClassifier};
pub use flow::{extract_features, read_flow_csv, write_flow_rows, LossFlowRecord, FLOW_CSV_HEADER};
pub use gmm::{classify, fit_gmm, EmOptions, GmmModel, Motion};
pub use registry::{prune_set, DynamicObjectRegistry, DEFAULT_STATIC_STREAK};
