//! Streaming N-way PLS regression with slice-wise sparse penalties.
//!
//! * [`tensor`]: dense tensors, unfoldings, Kronecker and Khatri-Rao products.
//! * [`thresholding`]: closed-form L0 / L0.5 / L1 element updates.
//! * [`parafac`]: rank-1 and rank-R ALS, penalized rank-1 ALS.
//! * [`pls`]: covariance statistics, calibration, recursive validation.
//! * [`stream`]: synthetic streams, replay harness, DotP / SparseIdx.
//! * [`io`]: NTNS1 tensors, model container, stream directories.

pub mod error;
pub mod io;
pub mod parafac;
pub mod pls;
pub mod stream;
pub mod tensor;
pub mod thresholding;

pub use error::{FormatError, ParafacError, PlsError, StreamError, TensorError, ThresholdError};
pub use parafac::{
    als_rank1, als_rank_r, penalized_als_rank1, update_protection_set, AlsConfig, AlsInit, FitStatus,
    ProjectorSet, ProtectionSet, Rank1Fit, RankRFit,
};
pub use pls::{calibrate, CovarianceState, LearnerConfig, PlsModel, RecursiveValidation, RewNpls, Truncation};
pub use stream::{
    dot_product_metric, replay, sparse_idx, synth_generate, GridPoint, MetricsRecord, ReplayConfig, StreamBatch,
    SynthConfig,
};
pub use tensor::{khatri_rao, kronecker, mode_fold, mode_unfold, outer_rank1, FactorMatrices, Tensor};
pub use thresholding::{NormOrder, PenaltySpec};
