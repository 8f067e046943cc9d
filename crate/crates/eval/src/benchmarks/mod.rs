//! Relationship recall, replicate/sibling retrieval and feature regression.

pub mod recall;
pub mod regression;
pub mod retrieval;

pub use recall::{
    cosine_similarity_matrix, percentile, recall_counts, recall_from_vectors, recall_known_pairs,
    RecallCounts,
};
pub use regression::{
    apply_transforms, fit_elastic_net_cv, fit_feature_regressors, skew_transform, ColumnTransform,
    FeatureCategory, FeatureTable, RegressionReport, SkewBranch,
};
pub use retrieval::{
    average_precision, bh_qvalues, retrieval_benchmark, RetrievalKind, RetrievalResult,
    RetrievalTask,
};
