//! Round-based federated simulation.
//!
//! Each round the server samples participants, broadcasts the global model,
//! and every participant runs local SGD on binary cross-entropy plus, when
//! enabled, the correlation-alignment term against its leave-one-out
//! consensus. Participants upload `(parameters, correlation, sample count)`;
//! the server refreshes the consensus, scores every upload's structural
//! discrepancy and aggregates with either size weights or the
//! correlation-aware schedule.
//!
//! Clients train independently from RNG streams keyed by
//! `(seed, client, round)` and the server reduces in client order, so results
//! do not depend on the number of worker threads.

use std::collections::HashMap;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate_parameters, aggregation_weights, size_weights, structural_discrepancy, AggregationWeights,
    Participant, QualitySchedule,
};
use crate::alignment::{alignment_loss_and_grad_view, AlignmentLossSpec, WeightMask};
use crate::clustering::{eigengap_cluster_count, spectral_cluster, LabelPartition};
use crate::consensus::{
    consensus_drift, leave_one_out_consensus, ClientCorrelation, ClientCorrelationSet, ClientId,
    ConsensusMatrix, ConsensusMode,
};
use crate::corrstats::{correlation, CorrelationMatrix, PredictionMatrix, DEFAULT_EPSILON};
use crate::datagen::{ClientData, FederatedDataset};
use crate::error::{shape_err, Error, Result};
use crate::metrics::{report, MetricReport, DEFAULT_THRESHOLD};

/// Ablation switches: alignment loss, correlation-aware aggregation and
/// block-restricted alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub use_alignment: bool,
    pub use_caa: bool,
    pub use_blocks: bool,
}

impl Ablation {
    pub const FEDAVG: Self = Self {
        use_alignment: false,
        use_caa: false,
        use_blocks: false,
    };
    pub const FULL: Self = Self {
        use_alignment: true,
        use_caa: true,
        use_blocks: true,
    };
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Uniform,
    #[default]
    SizeProportional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub rounds: usize,
    pub participation: f64,
    pub sampling: SamplingMode,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub gamma_q: f64,
    pub t0: usize,
    /// Label clusters for block alignment; chosen by eigengap when unset.
    pub n_clusters: Option<usize>,
    pub gamma_in: f64,
    pub gamma_out: f64,
    pub consensus_mode: ConsensusMode,
    pub flags: Ablation,
    pub seed: u64,
    pub threshold: f64,
    /// Standard deviation of the initial parameters.
    pub init_scale: f64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 30,
            participation: 0.5,
            sampling: SamplingMode::SizeProportional,
            local_epochs: 5,
            batch_size: 32,
            learning_rate: 0.05,
            lambda: 0.1,
            epsilon: DEFAULT_EPSILON,
            gamma_q: crate::aggregation::DEFAULT_GAMMA_Q,
            t0: 10,
            n_clusters: None,
            gamma_in: 1.0,
            gamma_out: 0.0,
            consensus_mode: ConsensusMode::SizeWeighted,
            flags: Ablation::FULL,
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
            init_scale: 0.01,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: String| Err(Error::InvalidParameter { name, reason });
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad("participation", format!("must lie in (0, 1], got {}", self.participation));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be nonnegative".into());
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", "must be positive".into());
        }
        QualitySchedule::new(self.gamma_q, self.t0)?;
        if self.n_clusters == Some(0) {
            return bad("n_clusters", "must be positive".into());
        }
        if !(self.gamma_in > 0.0) || !(self.gamma_out >= 0.0) || self.gamma_out >= self.gamma_in {
            return bad("gamma_out", "need 0 <= gamma_out < gamma_in".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold", "must lie in (0, 1)".into());
        }
        if !(self.init_scale >= 0.0) {
            return bad("init_scale", "must be nonnegative".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> QualitySchedule {
        QualitySchedule {
            gamma_q: self.gamma_q,
            t0: self.t0,
        }
    }
}

/// Mixes a seed with stream coordinates (splitmix64 finalizer per word).
pub fn derive_seed(seed: u64, words: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &w in words {
        h ^= w.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

const TAG_CLIENT: u64 = 1;
const TAG_SAMPLING: u64 = 2;
const TAG_INIT: u64 = 3;
const TAG_CLUSTER: u64 = 4;

/// RNG stream of one client's local training in one round.
pub fn client_rng(seed: u64, client: ClientId, round: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_CLIENT, client as u64, round as u64]))
}

/// RNG stream of the server's participant sampling in one round.
pub fn sampling_rng(seed: u64, round: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_SAMPLING, round as u64]))
}

/// Number of participants for a ratio, `ceil(ratio * K)` and at least one.
pub fn participant_count(ratio: f64, n_clients: usize) -> usize {
    ((ratio * n_clients as f64 - 1e-9).ceil() as usize).clamp(1, n_clients)
}

/// Draws `ceil(ratio * K)` distinct clients, returned in ascending order.
pub fn sample_clients(sizes: &[usize], ratio: f64, mode: SamplingMode, rng: &mut impl Rng) -> Vec<ClientId> {
    let k = sizes.len();
    let m = participant_count(ratio, k);
    if m == k {
        return (0..k).collect();
    }
    let mut chosen = match mode {
        SamplingMode::Uniform => rand::seq::index::sample(rng, k, m).into_vec(),
        SamplingMode::SizeProportional => {
            let mut remaining: Vec<usize> = (0..k).collect();
            let mut chosen = Vec::with_capacity(m);
            for _ in 0..m {
                let total: f64 = remaining.iter().map(|&i| sizes[i] as f64).sum();
                let mut u = rng.random::<f64>() * total;
                let mut pick = remaining.len() - 1;
                for (pos, &i) in remaining.iter().enumerate() {
                    let w = sizes[i] as f64;
                    if u < w {
                        pick = pos;
                        break;
                    }
                    u -= w;
                }
                chosen.push(remaining.remove(pick));
            }
            chosen
        }
    };
    chosen.sort_unstable();
    chosen
}

/// Per-label linear classifier: `(d + 1) x C` parameters, the last row holds
/// the biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub params: Array2<f64>,
    pub round: usize,
}

impl GlobalModel {
    pub fn init(n_features: usize, n_labels: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_INIT]));
        let params = Array2::from_shape_simple_fn((n_features + 1, n_labels), || {
            scale * rng.sample::<f64, _>(StandardNormal)
        });
        Self { params, round: 0 }
    }

    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        predict(&self.params, x)
    }

    /// Little-endian `u64` header length, a JSON shape header, then the
    /// parameters as row-major little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::json!({
            "format": MODEL_FORMAT,
            "rows": self.params.nrows(),
            "cols": self.params.ncols(),
            "round": self.round,
            "layout": "row-major, last row holds the biases",
        })
        .to_string();
        let mut out = Vec::with_capacity(8 + header.len() + 8 * self.params.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for v in self.params.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let malformed = |what: &str| Error::Dataset(format!("malformed model file: {what}"));
        let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| malformed("truncated"))?.try_into().unwrap();
        let len = u64::from_le_bytes(len_bytes) as usize;
        let header: serde_json::Value =
            serde_json::from_slice(bytes.get(8..8 + len).ok_or_else(|| malformed("truncated header"))?)?;
        if header["format"] != MODEL_FORMAT {
            return Err(malformed("unknown format"));
        }
        let field = |k: &str| header[k].as_u64().map(|v| v as usize).ok_or_else(|| malformed(k));
        let (rows, cols, round) = (field("rows")?, field("cols")?, field("round")?);
        let body = &bytes[8 + len..];
        if body.len() != rows * cols * 8 {
            return Err(malformed("payload size"));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let params = Array2::from_shape_vec((rows, cols), values).map_err(|e| malformed(&e.to_string()))?;
        Ok(Self { params, round })
    }
}

pub const MODEL_FORMAT: &str = "fedharmony-model/1";

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn logits(params: &Array2<f64>, x: &Array2<f64>) -> Result<Array2<f64>> {
    let d = x.ncols();
    if params.nrows() != d + 1 {
        return Err(shape_err(format!("{} parameter rows", d + 1), params.nrows()));
    }
    let w = params.slice(ndarray::s![..d, ..]);
    let b = params.row(d);
    Ok(x.dot(&w) + b)
}

pub fn predict(params: &Array2<f64>, x: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(logits(params, x)?.mapv(sigmoid))
}

/// Pulls a gradient with respect to the logits back to the parameters.
fn param_grad(x: &Array2<f64>, dz: &Array2<f64>) -> Array2<f64> {
    let d = x.ncols();
    let mut g = Array2::zeros((d + 1, dz.ncols()));
    g.slice_mut(ndarray::s![..d, ..]).assign(&x.t().dot(dz));
    g.row_mut(d).assign(&dz.sum_axis(Axis(0)));
    g
}

/// Binary cross-entropy summed over labels and averaged over instances, with
/// its parameter gradient.
pub fn bce_loss_and_grad(params: &Array2<f64>, x: &Array2<f64>, y: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let z = logits(params, x)?;
    if z.dim() != y.dim() {
        return Err(shape_err(format!("{:?}", z.dim()), format!("{:?}", y.dim())));
    }
    let n = x.nrows() as f64;
    let loss = ndarray::Zip::from(&z)
        .and(y)
        .fold(0.0, |acc, &zi, &yi| acc + softplus(zi) - yi * zi)
        / n;
    let dz = ndarray::Zip::from(&z).and(y).map_collect(|&zi, &yi| (sigmoid(zi) - yi) / n);
    Ok((loss, param_grad(x, &dz)))
}

/// Alignment loss of the model's full-batch predictions and its parameter
/// gradient.
pub fn alignment_loss_and_param_grad(
    params: &Array2<f64>,
    x: &Array2<f64>,
    target: &ConsensusMatrix,
    spec: &AlignmentLossSpec,
    epsilon: f64,
) -> Result<(f64, Array2<f64>)> {
    let f = predict(params, x)?;
    let (loss, df) = alignment_loss_and_grad_view(f.view(), target.values(), spec, epsilon)?;
    let dz = ndarray::Zip::from(&df).and(&f).map_collect(|&g, &p| g * p * (1.0 - p));
    Ok((loss, param_grad(x, &dz)))
}

/// Full-batch local objective, BCE plus the optional alignment term.
pub fn local_objective(
    params: &Array2<f64>,
    data: &ClientData,
    target: Option<&AlignmentTarget>,
    epsilon: f64,
) -> Result<(f64, Array2<f64>)> {
    let (mut loss, mut grad) = bce_loss_and_grad(params, &data.features, &data.labels)?;
    if let Some(t) = target {
        let (a, g) = alignment_loss_and_param_grad(params, &data.features, &t.consensus, &t.spec, epsilon)?;
        loss += a;
        grad += &g;
    }
    Ok((loss, grad))
}

/// What a client aligns to in one round.
#[derive(Debug, Clone)]
pub struct AlignmentTarget {
    pub consensus: ConsensusMatrix,
    pub spec: AlignmentLossSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    /// Full-batch BCE after each epoch.
    pub epoch_bce: Vec<f64>,
    /// Alignment loss at the last epoch's evaluation, 0 without a target.
    pub loss_align: f64,
}

impl TrainDiagnostics {
    pub fn final_bce(&self) -> Option<f64> {
        self.epoch_bce.last().copied()
    }
}

/// The only data that crosses from a client to the server.
#[derive(Debug, Clone)]
pub struct Upload {
    pub client: ClientId,
    pub params: Array2<f64>,
    pub correlation: CorrelationMatrix,
    pub samples: usize,
}

/// A simulated client. Its raw data never leaves this type.
#[derive(Debug, Clone)]
pub struct ClientState {
    id: ClientId,
    data: ClientData,
    params: Option<Array2<f64>>,
    last_correlation: Option<CorrelationMatrix>,
    last_discrepancy: Option<f64>,
}

impl ClientState {
    pub fn new(id: ClientId, data: ClientData) -> Self {
        Self {
            id,
            data,
            params: None,
            last_correlation: None,
            last_discrepancy: None,
        }
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn n_samples(&self) -> usize {
        self.data.n_samples()
    }

    pub fn last_correlation(&self) -> Option<&CorrelationMatrix> {
        self.last_correlation.as_ref()
    }

    pub fn last_discrepancy(&self) -> Option<f64> {
        self.last_discrepancy
    }

    /// Runs local training from the broadcast parameters and records the
    /// result locally; the returned upload is all the server gets to see.
    pub fn train(
        &mut self,
        global: &Array2<f64>,
        target: Option<&AlignmentTarget>,
        cfg: &FederationConfig,
        round: usize,
    ) -> Result<(Upload, TrainDiagnostics)> {
        let (params, corr, diag) = local_train(self.id, &self.data, global, target, cfg, round)?;
        self.params = Some(params.clone());
        self.last_correlation = Some(corr.clone());
        Ok((
            Upload {
                client: self.id,
                params,
                correlation: corr,
                samples: self.n_samples(),
            },
            diag,
        ))
    }
}

/// Local SGD from `init`. Returns the parameters, the correlation of the
/// final predictions and per-epoch diagnostics.
pub fn local_train(
    client: ClientId,
    data: &ClientData,
    init: &Array2<f64>,
    target: Option<&AlignmentTarget>,
    cfg: &FederationConfig,
    round: usize,
) -> Result<(Array2<f64>, CorrelationMatrix, TrainDiagnostics)> {
    let n = data.n_samples();
    let x = &data.features;
    let y = &data.labels;
    if init.dim() != (x.ncols() + 1, y.ncols()) {
        return Err(shape_err(format!("({}, {})", x.ncols() + 1, y.ncols()), format!("{:?}", init.dim())));
    }
    let diverged = || Error::Divergence { client, round };
    let mut rng = client_rng(cfg.seed, client, round);
    let mut params = init.clone();
    let mut diag = TrainDiagnostics::default();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let last = batches.len() - 1;
        for (b, idx) in batches.iter().enumerate() {
            let xb = x.select(Axis(0), idx);
            let yb = y.select(Axis(0), idx);
            let (loss, mut grad) = bce_loss_and_grad(&params, &xb, &yb)?;
            if !loss.is_finite() {
                return Err(diverged());
            }
            if b == last {
                if let Some(t) = target {
                    let (a, g) = alignment_loss_and_param_grad(&params, x, &t.consensus, &t.spec, cfg.epsilon)?;
                    if !a.is_finite() {
                        return Err(diverged());
                    }
                    diag.loss_align = a;
                    grad += &g;
                }
            }
            params.scaled_add(-cfg.learning_rate, &grad);
        }
        let (bce, _) = bce_loss_and_grad(&params, x, y)?;
        if !bce.is_finite() || params.iter().any(|v| !v.is_finite()) {
            return Err(diverged());
        }
        diag.epoch_bce.push(bce);
    }
    let preds = PredictionMatrix::new(predict(&params, x)?)?;
    let corr = correlation(&preds, cfg.epsilon)?;
    Ok((params, corr, diag))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub sampling_ms: f64,
    pub consensus_ms: f64,
    pub local_train_ms: f64,
    pub aggregation_ms: f64,
    pub evaluation_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundRecord {
    pub client: ClientId,
    pub samples: usize,
    pub loss_bce: f64,
    pub loss_align: f64,
    /// Frobenius distance to the refreshed consensus; absent without peers.
    pub drift: Option<f64>,
    /// Block discrepancy `s_i` against the refreshed consensus.
    pub s: f64,
    pub n_bar: f64,
    pub q_bar: f64,
    pub w: f64,
    pub n_clusters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<ClientId>,
    pub clients: Vec<ClientRoundRecord>,
    /// Mean drift over participants with a consensus.
    pub mean_drift: Option<f64>,
    pub metrics: MetricReport,
    pub timing: PhaseTiming,
}

impl RoundRecord {
    /// The record with wall-clock timings zeroed, for replay comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            timing: PhaseTiming::default(),
            ..self.clone()
        }
    }
}

/// Matrices produced in one round, for persistence.
#[derive(Debug, Clone, Default)]
pub struct RoundArtifacts {
    pub round: usize,
    pub uploads: Vec<(ClientId, CorrelationMatrix)>,
    pub consensus: Vec<(ClientId, ConsensusMatrix)>,
    pub partitions: Vec<(ClientId, LabelPartition)>,
}

/// Server-side state: global model, latest uploads and the per-client
/// consensus cache.
#[derive(Debug, Clone)]
pub struct Server {
    pub model: GlobalModel,
    pool: ClientCorrelationSet,
    pool_version: u64,
    cache: HashMap<ClientId, (u64, ConsensusMatrix, LabelPartition)>,
    n_labels: usize,
}

impl Server {
    pub fn new(model: GlobalModel) -> Self {
        let n_labels = model.params.ncols();
        Self {
            model,
            pool: ClientCorrelationSet::new(0),
            pool_version: 0,
            cache: HashMap::new(),
            n_labels,
        }
    }

    pub fn uploads(&self) -> &ClientCorrelationSet {
        &self.pool
    }

    /// Leave-one-out consensus and alignment partition of `client` for the
    /// current pool, `None` while the client has no peers.
    pub fn consensus_for(
        &mut self,
        client: ClientId,
        cfg: &FederationConfig,
    ) -> Result<Option<(ConsensusMatrix, LabelPartition)>> {
        if let Some((v, cons, part)) = self.cache.get(&client) {
            if *v == self.pool_version {
                return Ok(Some((cons.clone(), part.clone())));
            }
        }
        let cons = match leave_one_out_consensus(&self.pool, client, cfg.consensus_mode) {
            Ok(c) => c,
            Err(Error::InsufficientPeers { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let part = if cfg.flags.use_blocks {
            let g = cfg
                .n_clusters
                .unwrap_or_else(|| eigengap_cluster_count(&cons.matrix))
                .min(self.n_labels);
            let seed = derive_seed(cfg.seed, &[TAG_CLUSTER, client as u64, self.pool_version]);
            spectral_cluster(&cons.matrix, g, seed)?
        } else {
            LabelPartition::single(self.n_labels)
        };
        self.cache
            .insert(client, (self.pool_version, cons.clone(), part.clone()));
        Ok(Some((cons, part)))
    }

    fn accept(&mut self, uploads: &[Upload], round: usize) -> Result<()> {
        self.pool.set_round(round);
        for up in uploads {
            self.pool.upsert(ClientCorrelation {
                client: up.client,
                matrix: up.correlation.clone(),
                sample_count: up.samples,
                round,
            })?;
        }
        self.pool_version += 1;
        Ok(())
    }
}

fn alignment_target(cfg: &FederationConfig, consensus: ConsensusMatrix, partition: LabelPartition) -> Result<AlignmentTarget> {
    let spec = if cfg.flags.use_blocks {
        let mask = WeightMask::block(partition.clone(), cfg.gamma_in, cfg.gamma_out)?;
        AlignmentLossSpec {
            weights: Some(mask.values().clone()),
            ..AlignmentLossSpec::blocks(cfg.lambda, partition)
        }
    } else {
        AlignmentLossSpec::full(cfg.lambda)
    };
    Ok(AlignmentTarget { consensus, spec })
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// One communication round.
pub fn run_round(
    server: &mut Server,
    clients: &mut [ClientState],
    test: &ClientData,
    cfg: &FederationConfig,
    t: usize,
) -> Result<(RoundRecord, RoundArtifacts)> {
    let mut timing = PhaseTiming::default();

    let clock = Instant::now();
    let sizes: Vec<usize> = clients.iter().map(ClientState::n_samples).collect();
    let participants = sample_clients(&sizes, cfg.participation, cfg.sampling, &mut sampling_rng(cfg.seed, t));
    timing.sampling_ms = ms_since(clock);

    // consensus from earlier uploads; none exists in round 0
    let clock = Instant::now();
    let mut targets: HashMap<ClientId, AlignmentTarget> = HashMap::new();
    if cfg.flags.use_alignment && cfg.lambda > 0.0 && t > 0 {
        for &k in &participants {
            if let Some((cons, part)) = server.consensus_for(k, cfg)? {
                targets.insert(k, alignment_target(cfg, cons, part)?);
            }
        }
    }
    timing.consensus_ms = ms_since(clock);

    let clock = Instant::now();
    let global = server.model.params.clone();
    let mut selected: Vec<&mut ClientState> = clients
        .iter_mut()
        .filter(|c| participants.binary_search(&c.id).is_ok())
        .collect();
    let results: Vec<Result<(Upload, TrainDiagnostics)>> = selected
        .par_iter_mut()
        .map(|c| c.train(&global, targets.get(&c.id), cfg, t))
        .collect();
    let mut uploads = Vec::with_capacity(results.len());
    let mut diags = Vec::with_capacity(results.len());
    for r in results {
        let (u, d) = r?;
        uploads.push(u);
        diags.push(d);
    }
    timing.local_train_ms = ms_since(clock);

    let clock = Instant::now();
    server.accept(&uploads, t)?;
    let mut artifacts = RoundArtifacts {
        round: t,
        ..RoundArtifacts::default()
    };
    let mut scored = Vec::with_capacity(uploads.len());
    let mut drifts = Vec::with_capacity(uploads.len());
    let mut cluster_counts = Vec::with_capacity(uploads.len());
    for up in &uploads {
        let (s, drift, g) = match server.consensus_for(up.client, cfg)? {
            Some((cons, part)) => {
                let s = structural_discrepancy(&up.correlation, &cons, &part)?;
                let drift = consensus_drift(&up.correlation, &cons)?;
                let g = part.n_clusters();
                artifacts.consensus.push((up.client, cons));
                artifacts.partitions.push((up.client, part));
                (s, Some(drift), g)
            }
            None => (0.0, None, 1),
        };
        artifacts.uploads.push((up.client, up.correlation.clone()));
        scored.push(Participant {
            client: up.client,
            samples: up.samples,
            discrepancy: s,
        });
        drifts.push(drift);
        cluster_counts.push(g);
    }
    for (c, s) in clients.iter_mut().zip(0..) {
        let _ = s;
        if let Some(p) = scored.iter().find(|p| p.client == c.id) {
            c.last_discrepancy = Some(p.discrepancy);
        }
    }
    let weights: AggregationWeights = if cfg.flags.use_caa {
        aggregation_weights(&scored, t, &cfg.schedule())?
    } else {
        size_weights(&scored, t)?
    };
    let pairs: Vec<(&Array2<f64>, f64)> = uploads.iter().zip(weights.weights()).map(|(u, w)| (&u.params, w)).collect();
    server.model = GlobalModel {
        params: aggregate_parameters(&pairs)?,
        round: t + 1,
    };
    timing.aggregation_ms = ms_since(clock);

    let clock = Instant::now();
    let metrics = evaluate(&server.model, test, cfg.threshold)?;
    timing.evaluation_ms = ms_since(clock);

    let records: Vec<ClientRoundRecord> = uploads
        .iter()
        .zip(&diags)
        .zip(&weights.per_client)
        .zip(scored.iter().zip(&drifts).zip(&cluster_counts))
        .map(|(((u, d), w), ((p, drift), &g))| ClientRoundRecord {
            client: u.client,
            samples: u.samples,
            loss_bce: d.final_bce().unwrap_or(f64::NAN),
            loss_align: d.loss_align,
            drift: *drift,
            s: p.discrepancy,
            n_bar: w.n_bar,
            q_bar: w.q_bar,
            w: w.w,
            n_clusters: g,
        })
        .collect();
    let known: Vec<f64> = drifts.iter().flatten().copied().collect();
    let mean_drift = (!known.is_empty()).then(|| known.iter().sum::<f64>() / known.len() as f64);
    Ok((
        RoundRecord {
            round: t,
            participants,
            clients: records,
            mean_drift,
            metrics,
            timing,
        },
        artifacts,
    ))
}

pub fn evaluate(model: &GlobalModel, test: &ClientData, threshold: f64) -> Result<MetricReport> {
    report(&model.predict(&test.features)?, &test.labels_bool(), threshold)
}

#[derive(Debug, Clone)]
pub struct FederationRun {
    pub records: Vec<RoundRecord>,
    pub model: GlobalModel,
    pub initial_metrics: MetricReport,
}

impl FederationRun {
    pub fn final_metrics(&self) -> &MetricReport {
        self.records.last().map_or(&self.initial_metrics, |r| &r.metrics)
    }
}

pub fn run_federation(cfg: &FederationConfig, dataset: &FederatedDataset) -> Result<FederationRun> {
    run_federation_with(cfg, dataset, |_, _| Ok(()))
}

/// Runs all rounds, handing each record and its matrices to `observer`.
pub fn run_federation_with(
    cfg: &FederationConfig,
    dataset: &FederatedDataset,
    mut observer: impl FnMut(&RoundRecord, &RoundArtifacts) -> Result<()>,
) -> Result<FederationRun> {
    cfg.validate()?;
    if dataset.clients.is_empty() {
        return Err(Error::EmptyInput("dataset has no clients"));
    }
    let model = GlobalModel::init(dataset.n_features(), dataset.n_labels(), cfg.init_scale, cfg.seed);
    let initial_metrics = evaluate(&model, &dataset.test, cfg.threshold)?;
    let mut server = Server::new(model);
    let mut clients: Vec<ClientState> = dataset
        .clients
        .iter()
        .enumerate()
        .map(|(k, d)| ClientState::new(k, d.clone()))
        .collect();
    let mut records = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let (record, artifacts) = run_round(&mut server, &mut clients, &dataset.test, cfg, t)?;
        observer(&record, &artifacts)?;
        records.push(record);
    }
    Ok(FederationRun {
        records,
        model: server.model,
        initial_metrics,
    })
}

/// Mean of each label column's predicted probability, handy for logging.
pub fn mean_scores(model: &GlobalModel, x: &Array2<f64>) -> Result<Array1<f64>> {
    Ok(model.predict(x)?.mean_axis(Axis(0)).expect("nonempty"))
}
