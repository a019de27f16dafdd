//! Federated multi-label learning with consensus label-correlation
//! alignment.
//!
//! Clients estimate a soft label-correlation matrix from their predictions,
//! align it to a leave-one-out consensus of their peers inside spectral label
//! clusters, and the server weights uploads by how structurally consistent
//! they are with that consensus.
#![allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail these checks

pub mod aggregation;
pub mod alignment;
pub mod clustering;
pub mod consensus;
pub mod corrstats;
pub mod datagen;
pub mod error;
pub mod federation;
pub mod io;
pub mod metrics;

pub use aggregation::{AggregationWeights, ClientWeight, QualitySchedule};
pub use alignment::{AlignmentLossSpec, BlockDecomposition, Objective, Trajectory, WeightMask};
pub use clustering::{AffinityMatrix, LabelPartition};
pub use consensus::{ClientCorrelation, ClientCorrelationSet, ClientId, ConsensusMatrix, ConsensusMode};
pub use corrstats::{CorrelationJacobian, CorrelationMatrix, LabelMarginals, PredictionMatrix};
pub use datagen::{ClientData, FederatedDataset, LatentModel, SyntheticSpec};
pub use error::{Error, Result};
pub use federation::{
    Ablation, FederationConfig, FederationRun, GlobalModel, RoundArtifacts, RoundRecord, SamplingMode, Upload,
};
pub use metrics::{MetricReport, WilcoxonResult};
