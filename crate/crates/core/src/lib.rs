//! Query-aware dimensionality reduction for maximum-inner-product search.
//!
//! - [`sphering`]: the linear sphering model and its query-agnostic SVD baseline.
//! - [`gleanvec`]: piecewise-linear reduction over spherical k-means clusters.
//! - [`streaming`]: second-moment tracking with model refreshes and reprojection.
//! - [`graph`]: proximity graph construction and the preprocess, search, rerank pipeline.
//! - [`eval`]: ground truth, recall, throughput and figure tables.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod formats;
pub mod gleanvec;
pub mod graph;
mod io;
pub mod linalg;
pub mod sphering;
pub mod streaming;

pub use dataset::{GroundTruth, Similarity, VectorSet};
pub use error::{Error, ErrorKind, Result};
pub use formats::{Database, Model};
pub use gleanvec::{
    assign_tag, eager_ip, eager_prepare, encode_database, lazy_ip, train_gleanvec, EagerQueryState,
    EncodedDatabase, GleanVecModel, GleanVecParams,
};
pub use graph::{
    build_graph, multi_step_search, BuildMetric, BuildParams, GraphIndex, Reduced, SearchParams,
    SearchResult,
};
pub use sphering::{
    compute_sphering, train_flexible, train_svd_baseline, FlexibleSpheringModel, ProjectionPair,
    SpheredDatabase, SpheringTransform,
};
pub use streaming::{StreamingIndex, SummaryStats};
