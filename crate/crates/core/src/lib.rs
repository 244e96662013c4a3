//! Fisher Vector and Hyper-Fisher Vector encodings of local descriptor sets,
//! together with the k-means, GMM, PCA and linear SVM stages around them.

pub mod analysis;
pub mod classify;
pub mod clustering;
pub mod corpus;
pub mod descriptors;
pub mod encoding;
pub mod error;
pub mod gmm;
pub mod kv;
pub mod model_io;
pub mod pca;
pub mod pipeline;
pub mod sampling;
mod wire;

pub use classify::{evaluate, svm_predict, svm_train_ova, LinearModel, Metrics, SvmOptions};
pub use clustering::{kmeans_assign, kmeans_fit, Codebook, KMeansOptions, Memberships};
pub use corpus::{load_labeled_corpus, Dataset, LabeledCorpus, Split};
pub use descriptors::{load_descriptors, save_descriptors, DescriptorSet};
pub use encoding::{
    fv_encode, fv_encode_raw, hfv_encode, hfv_encode_raw, l2_normalize, power_normalize, CountNormalization,
    EncodedVector, HfvOptions,
};
pub use error::{Error, Result};
pub use gmm::{gmm_fit, gmm_log_likelihood, gmm_posteriors, GmmModel, GmmOptions, Responsibilities};
pub use model_io::{load_model, save_model};
pub use pca::{pca_fit, pca_project, PcaModel};
