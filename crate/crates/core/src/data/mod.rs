//! Label space, manifests, feature files and fold assignment.

pub mod features;
pub mod folds;
pub mod manifest;
pub mod taxonomy;

pub use features::{read_feature_file, write_feature_file, FeatureMatrix, Modality};
pub use folds::{stratified_kfold, FoldAssignment, DEFAULT_FOLDS};
pub use manifest::{
    attach_variants, class_stats, filter_subset, load_manifest, parse_records, save_dataset, variant_id,
    write_manifest, ClassStats, FeatureRefs, FeatureStore, Manifest, SubsetFilter, VariantEntry, VariantTable,
    VideoRecord,
};
pub use taxonomy::{binary_collapse, ClassId, Group, IntentClass, Polarity, CLASSES, NUM_CLASSES};
