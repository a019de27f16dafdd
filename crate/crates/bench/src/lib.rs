//! Shared fixtures for the benchmarks.

use fedharmony_core::clustering::{spectral_cluster, LabelPartition};
use fedharmony_core::consensus::ConsensusMatrix;
use fedharmony_core::corrstats::PredictionMatrix;
use fedharmony_core::datagen::{generate, SyntheticSpec};
use fedharmony_core::federation::GlobalModel;
use fedharmony_core::FederatedDataset;

pub struct Fixture {
    pub dataset: FederatedDataset,
    pub model: GlobalModel,
    pub predictions: PredictionMatrix,
    pub consensus: ConsensusMatrix,
    pub partition: LabelPartition,
}

/// A planted-block dataset with `labels` labels in `blocks` blocks, the
/// initial model's predictions on client 0, the ground truth as consensus and
/// the spectral partition of it.
pub fn fixture(labels: usize, blocks: usize, clients: usize) -> Fixture {
    let spec = SyntheticSpec {
        n_labels: labels,
        n_blocks: blocks,
        n_clients: clients,
        seed: 7,
        ..SyntheticSpec::default()
    };
    let dataset = generate(&spec).expect("valid bench spec");
    let model = GlobalModel::init(dataset.n_features(), labels, 0.5, 7);
    let scores = model.predict(&dataset.clients[0].features).expect("matching shapes");
    let predictions = PredictionMatrix::new(scores).expect("sigmoid outputs");
    let consensus = ConsensusMatrix::from_matrix(dataset.ground_truth.clone(), 0);
    let partition = spectral_cluster(&dataset.ground_truth, blocks, 7).expect("clusterable truth");
    Fixture {
        dataset,
        model,
        predictions,
        consensus,
        partition,
    }
}
