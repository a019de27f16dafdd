//! Synthetic federated multi-label data with planted label blocks.
//!
//! Every label belongs to one of `n_blocks` blocks. Each instance draws an
//! independent Bernoulli activator per block; a label fires through a
//! noisy-OR of its own block (probability `in_block_strength`) and every other
//! active block (probability `cross_block_strength`). With zero cross strength
//! the population correlation is exactly block diagonal.
//!
//! Clients partition a population pool. Client `k` draws block preferences
//! `pi_k ~ Dirichlet(dirichlet_gamma)` and each pool instance goes to client
//! `k` with probability proportional to `target_size_k * affinity(k, x)`,
//! where the affinity is the mean preference over the instance's active
//! blocks. Small concentrations concentrate blocks on few clients, which is
//! what skews the per-client label co-occurrence.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corrstats::{correlation, CorrelationMatrix, PredictionMatrix, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::io::{matrix_from_csv, matrix_to_csv, write_atomic};

const MAX_PARTITION_ATTEMPTS: usize = 16;
const REFERENCE_FLOOR: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_labels: usize,
    pub n_features: usize,
    pub n_blocks: usize,
    pub in_block_strength: f64,
    pub cross_block_strength: f64,
    /// Probability that a block's activator fires in the population.
    pub activation_rate: f64,
    pub n_clients: usize,
    pub dirichlet_gamma: f64,
    pub min_samples: usize,
    pub max_samples: usize,
    pub test_samples: usize,
    /// Size of the sample the ground-truth correlation is estimated on.
    pub reference_samples: usize,
    /// Norm of each label prototype in feature space.
    pub signal: f64,
    /// Standard deviation of the isotropic feature noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_labels: 24,
            n_features: 32,
            n_blocks: 4,
            in_block_strength: 0.8,
            cross_block_strength: 0.0,
            activation_rate: 0.3,
            n_clients: 16,
            dirichlet_gamma: 0.25,
            min_samples: 120,
            max_samples: 360,
            test_samples: 2000,
            reference_samples: REFERENCE_FLOOR,
            signal: 1.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: String| Err(Error::InvalidParameter { name, reason });
        if self.n_labels < 2 {
            return bad("n_labels", "need at least 2 labels".into());
        }
        if self.n_features == 0 {
            return bad("n_features", "need at least one feature".into());
        }
        if self.n_blocks == 0 || self.n_blocks > self.n_labels {
            return bad("n_blocks", format!("must lie in 1..={}", self.n_labels));
        }
        for (name, v) in [
            ("in_block_strength", self.in_block_strength),
            ("cross_block_strength", self.cross_block_strength),
            ("activation_rate", self.activation_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(name, format!("{v} is outside [0, 1]"));
            }
        }
        if self.in_block_strength <= self.cross_block_strength {
            return bad("in_block_strength", "must exceed the cross-block strength".into());
        }
        if self.n_clients == 0 {
            return bad("n_clients", "need at least one client".into());
        }
        if !(self.dirichlet_gamma > 0.0 && self.dirichlet_gamma.is_finite()) {
            return bad("dirichlet_gamma", format!("must be positive, got {}", self.dirichlet_gamma));
        }
        if self.min_samples == 0 || self.min_samples > self.max_samples {
            return bad("min_samples", "need 1 <= min_samples <= max_samples".into());
        }
        if self.test_samples == 0 {
            return bad("test_samples", "need a nonempty test split".into());
        }
        if self.reference_samples < REFERENCE_FLOOR {
            return bad("reference_samples", format!("must be at least {REFERENCE_FLOOR}"));
        }
        if !(self.signal >= 0.0 && self.noise >= 0.0) {
            return bad("signal", "signal and noise must be nonnegative".into());
        }
        // keep every label's population frequency well inside (0, 1)
        let a = self.activation_rate;
        let off = (1.0 - self.cross_block_strength * a).powi(self.n_blocks as i32 - 1);
        let freq = 1.0 - (1.0 - self.in_block_strength * a) * off;
        if !(0.02..=0.98).contains(&freq) {
            return bad("activation_rate", format!("label frequency {freq:.4} outside [0.02, 0.98]"));
        }
        Ok(())
    }

    /// Contiguous, near-equal label blocks.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let (c, g) = (self.n_labels, self.n_blocks);
        (0..g).map(|b| (b * c / g..(b + 1) * c / g).collect()).collect()
    }
}

/// The label-generating process behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentModel {
    pub blocks: Vec<Vec<usize>>,
    /// Block of every label.
    pub block_of: Vec<usize>,
    pub activation_rate: f64,
    pub in_block_strength: f64,
    pub cross_block_strength: f64,
    /// `n_labels x n_features`
    pub prototypes: Array2<f64>,
    pub noise: f64,
    pub ground_truth: CorrelationMatrix,
}

impl LatentModel {
    pub fn n_labels(&self) -> usize {
        self.block_of.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Draws the block activators of one instance.
    fn activators(&self, rng: &mut impl Rng) -> Vec<bool> {
        (0..self.n_blocks())
            .map(|_| rng.random::<f64>() < self.activation_rate)
            .collect()
    }

    fn labels_given(&self, active: &[bool], rng: &mut impl Rng) -> Vec<bool> {
        (0..self.n_labels())
            .map(|c| {
                let mut off = 1.0;
                for (g, &on) in active.iter().enumerate() {
                    if on {
                        let s = if g == self.block_of[c] {
                            self.in_block_strength
                        } else {
                            self.cross_block_strength
                        };
                        off *= 1.0 - s;
                    }
                }
                rng.random::<f64>() < 1.0 - off
            })
            .collect()
    }

    fn features_given(&self, labels: &[bool], rng: &mut impl Rng) -> Vec<f64> {
        let d = self.prototypes.ncols();
        let mut x: Vec<f64> = (0..d)
            .map(|_| self.noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for (c, &on) in labels.iter().enumerate() {
            if on {
                x.iter_mut()
                    .zip(self.prototypes.row(c))
                    .for_each(|(xi, p)| *xi += p);
            }
        }
        x
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_PROTOTYPES: u64 = 1;
const STREAM_REFERENCE: u64 = 2;
const STREAM_POOL: u64 = 3;
const STREAM_PARTITION: u64 = 4;

/// Builds the latent model and the ground-truth correlation of its label
/// distribution, estimated with hard labels on a large reference sample.
pub fn plant_structure(spec: &SyntheticSpec) -> Result<(LatentModel, CorrelationMatrix)> {
    spec.validate()?;
    let blocks = spec.blocks();
    let mut block_of = vec![0; spec.n_labels];
    for (g, b) in blocks.iter().enumerate() {
        for &c in b {
            block_of[c] = g;
        }
    }
    let mut rng = stream(spec.seed, STREAM_PROTOTYPES);
    let scale = spec.signal / (spec.n_features as f64).sqrt();
    let prototypes = Array2::from_shape_simple_fn((spec.n_labels, spec.n_features), || {
        scale * rng.sample::<f64, _>(StandardNormal)
    });
    let mut model = LatentModel {
        blocks,
        block_of,
        activation_rate: spec.activation_rate,
        in_block_strength: spec.in_block_strength,
        cross_block_strength: spec.cross_block_strength,
        prototypes,
        noise: spec.noise,
        ground_truth: CorrelationMatrix::from_values_unchecked(Array2::zeros((0, 0)), DEFAULT_EPSILON),
    };
    let mut rng = stream(spec.seed, STREAM_REFERENCE);
    let mut y = Array2::zeros((spec.reference_samples, spec.n_labels));
    for i in 0..spec.reference_samples {
        let active = model.activators(&mut rng);
        for (c, on) in model.labels_given(&active, &mut rng).into_iter().enumerate() {
            y[[i, c]] = if on { 1.0 } else { 0.0 };
        }
    }
    let truth = label_correlation(&y, DEFAULT_EPSILON)?;
    model.ground_truth = truth.clone();
    Ok((model, truth))
}

/// Phi correlation of a binary label matrix.
pub fn label_correlation(labels: &Array2<f64>, epsilon: f64) -> Result<CorrelationMatrix> {
    correlation(&PredictionMatrix::new(labels.clone())?, epsilon)
}

/// One client's private data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub features: Array2<f64>,
    /// Binary, stored as 0.0 / 1.0.
    pub labels: Array2<f64>,
    /// Pool indices of the instances, for provenance checks.
    pub instance_ids: Vec<usize>,
}

impl ClientData {
    pub fn new(features: Array2<f64>, labels: Array2<f64>) -> Result<Self> {
        let n = features.nrows();
        if n == 0 {
            return Err(Error::Dataset("client without samples".into()));
        }
        if labels.nrows() != n {
            return Err(Error::Dataset(format!(
                "{} feature rows but {} label rows",
                n,
                labels.nrows()
            )));
        }
        if labels.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Dataset("labels must be 0 or 1".into()));
        }
        Ok(Self {
            features,
            labels,
            instance_ids: Vec::new(),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn labels_bool(&self) -> Array2<bool> {
        self.labels.mapv(|v| v == 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub clients: Vec<ClientData>,
    pub test: ClientData,
    pub ground_truth: CorrelationMatrix,
    /// Block preferences each client was drawn with, when synthetic.
    pub block_preferences: Option<Array2<f64>>,
    pub spec: Option<SyntheticSpec>,
}

impl FederatedDataset {
    pub fn n_labels(&self) -> usize {
        self.test.labels.ncols()
    }

    pub fn n_features(&self) -> usize {
        self.test.features.ncols()
    }
}

fn dirichlet(alpha: f64, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|v| v / total).collect();
        }
    }
}

struct Instance {
    active: Vec<bool>,
    labels: Vec<bool>,
    features: Vec<f64>,
}

fn draw_instance(model: &LatentModel, rng: &mut impl Rng) -> Instance {
    let active = model.activators(rng);
    let labels = model.labels_given(&active, rng);
    let features = model.features_given(&labels, rng);
    Instance {
        active,
        labels,
        features,
    }
}

fn to_client(pool: &[Instance], ids: Vec<usize>, c: usize, d: usize) -> ClientData {
    let mut x = Array2::zeros((ids.len(), d));
    let mut y = Array2::zeros((ids.len(), c));
    for (row, &i) in ids.iter().enumerate() {
        for (j, &v) in pool[i].features.iter().enumerate() {
            x[[row, j]] = v;
        }
        for (j, &on) in pool[i].labels.iter().enumerate() {
            y[[row, j]] = if on { 1.0 } else { 0.0 };
        }
    }
    ClientData {
        features: x,
        labels: y,
        instance_ids: ids,
    }
}

/// Splits a freshly drawn population pool across clients with Dirichlet
/// block skew and draws an independent test split.
pub fn partition_clients(spec: &SyntheticSpec, model: &LatentModel) -> Result<FederatedDataset> {
    spec.validate()?;
    let (c, d, k, g) = (spec.n_labels, spec.n_features, spec.n_clients, spec.n_blocks);
    let mut rng = stream(spec.seed, STREAM_PARTITION);
    let targets: Vec<usize> = (0..k)
        .map(|_| rng.random_range(spec.min_samples..=spec.max_samples))
        .collect();
    let preferences: Vec<Vec<f64>> = (0..k).map(|_| dirichlet(spec.dirichlet_gamma, g, &mut rng)).collect();

    let pool_size: usize = targets.iter().sum::<usize>() + spec.test_samples;
    let mut pool_rng = stream(spec.seed, STREAM_POOL);
    let pool: Vec<Instance> = (0..pool_size).map(|_| draw_instance(model, &mut pool_rng)).collect();
    // the test split is the tail of the pool, drawn from the population
    let train_size = pool_size - spec.test_samples;

    let mut attempt = 0;
    let owners = loop {
        attempt += 1;
        let owners = assign_owners(&pool[..train_size], &preferences, &targets, &mut rng);
        let mut counts = vec![0usize; k];
        let mut positives = vec![false; k];
        for (i, &o) in owners.iter().enumerate() {
            counts[o] += 1;
            positives[o] |= pool[i].labels.iter().any(|&b| b);
        }
        match (0..k).find(|&j| counts[j] == 0 || !positives[j]) {
            None => break owners,
            Some(j) if attempt >= MAX_PARTITION_ATTEMPTS => {
                return Err(Error::DegenerateClient {
                    client: j,
                    attempts: attempt,
                })
            }
            Some(_) => {}
        }
    };

    let mut per_client: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &o) in owners.iter().enumerate() {
        per_client[o].push(i);
    }
    let clients: Vec<ClientData> = per_client.into_iter().map(|ids| to_client(&pool, ids, c, d)).collect();
    let test = to_client(&pool, (train_size..pool_size).collect(), c, d);

    let seen: Vec<bool> = (0..c)
        .map(|j| clients.iter().any(|cl| cl.labels.column(j).iter().any(|&v| v == 1.0)))
        .collect();
    if let Some(j) = seen.iter().position(|&s| !s) {
        return Err(Error::Dataset(format!("label {j} never occurs in client data")));
    }

    let ground_truth = model.ground_truth.clone();
    let prefs = Array2::from_shape_fn((k, g), |(i, j)| preferences[i][j]);
    Ok(FederatedDataset {
        clients,
        test,
        ground_truth,
        block_preferences: Some(prefs),
        spec: Some(spec.clone()),
    })
}

fn assign_owners(pool: &[Instance], preferences: &[Vec<f64>], targets: &[usize], rng: &mut impl Rng) -> Vec<usize> {
    let k = preferences.len();
    let g = preferences[0].len();
    let total: f64 = targets.iter().sum::<usize>() as f64;
    let mut weights = vec![0.0; k];
    pool.iter()
        .map(|inst| {
            let n_active = inst.active.iter().filter(|&&a| a).count();
            for (j, w) in weights.iter_mut().enumerate() {
                let affinity = if n_active == 0 {
                    1.0 / g as f64
                } else {
                    inst.active
                        .iter()
                        .zip(&preferences[j])
                        .filter(|(a, _)| **a)
                        .map(|(_, p)| p)
                        .sum::<f64>()
                        / n_active as f64
                };
                *w = targets[j] as f64 / total * affinity;
            }
            let sum: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * sum;
            for (j, &w) in weights.iter().enumerate() {
                if u < w {
                    return j;
                }
                u -= w;
            }
            // rounding can leave u marginally above the last bucket
            weights.iter().rposition(|&w| w > 0.0).unwrap_or(k - 1)
        })
        .collect()
}

/// Plants the structure and partitions clients in one go.
pub fn generate(spec: &SyntheticSpec) -> Result<FederatedDataset> {
    let (model, _) = plant_structure(spec)?;
    partition_clients(spec, &model)
}

/// Per-client empirical block exposure: the fraction of each client's
/// active-block mass that falls on each block, estimated from its labels.
pub fn block_label_share(data: &ClientData, blocks: &[Vec<usize>]) -> Array1<f64> {
    let mut mass = Array1::zeros(blocks.len());
    for (g, b) in blocks.iter().enumerate() {
        mass[g] = b.iter().map(|&c| data.labels.column(c).sum()).sum::<f64>();
    }
    let total = mass.sum();
    if total > 0.0 {
        mass / total
    } else {
        mass
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "fedharmony-dataset/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub features: String,
    pub labels: String,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub n_labels: usize,
    pub n_features: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SyntheticSpec>,
    /// Relative path of the ground-truth correlation CSV; recomputed from the
    /// pooled client labels when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_preferences: Option<String>,
    pub clients: Vec<SplitEntry>,
    pub test: SplitEntry,
}

/// Writes the dataset directory and returns the manifest path.
pub fn export_dataset(ds: &FederatedDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let write_split = |data: &ClientData, stem: &str| -> Result<SplitEntry> {
        let features = format!("{stem}_features.csv");
        let labels = format!("{stem}_labels.csv");
        write_atomic(&dir.join(&features), matrix_to_csv(&data.features).as_bytes())?;
        write_atomic(&dir.join(&labels), matrix_to_csv(&data.labels).as_bytes())?;
        Ok(SplitEntry {
            features,
            labels,
            samples: data.n_samples(),
        })
    };
    let clients = ds
        .clients
        .iter()
        .enumerate()
        .map(|(k, data)| write_split(data, &format!("client_{k:03}")))
        .collect::<Result<Vec<_>>>()?;
    let test = write_split(&ds.test, "test")?;
    write_atomic(&dir.join("ground_truth.csv"), ds.ground_truth.to_csv().as_bytes())?;
    let block_preferences = match &ds.block_preferences {
        Some(p) => {
            write_atomic(&dir.join("block_preferences.csv"), matrix_to_csv(p).as_bytes())?;
            Some("block_preferences.csv".to_string())
        }
        None => None,
    };
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        n_labels: ds.n_labels(),
        n_features: ds.n_features(),
        seed: ds.spec.as_ref().map(|s| s.seed),
        spec: ds.spec.clone(),
        ground_truth: Some("ground_truth.csv".into()),
        block_preferences,
        clients,
        test,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write_atomic(&path, json.as_bytes())?;
    Ok(path)
}

/// Loads any directory following the manifest format.
pub fn load_dataset(dir: &Path) -> Result<FederatedDataset> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Dataset(format!("unsupported format `{}`", manifest.format)));
    }
    let read = |name: &str| -> Result<Array2<f64>> { matrix_from_csv(&fs::read_to_string(dir.join(name))?) };
    let load_split = |e: &SplitEntry| -> Result<ClientData> {
        let x = read(&e.features)?;
        let y = read(&e.labels)?;
        if x.ncols() != manifest.n_features || y.ncols() != manifest.n_labels || x.nrows() != e.samples {
            return Err(Error::Dataset(format!(
                "{} / {} do not match the manifest shape",
                e.features, e.labels
            )));
        }
        ClientData::new(x, y)
    };
    let clients = manifest.clients.iter().map(load_split).collect::<Result<Vec<_>>>()?;
    if clients.is_empty() {
        return Err(Error::Dataset("manifest lists no clients".into()));
    }
    let test = load_split(&manifest.test)?;
    let ground_truth = match &manifest.ground_truth {
        Some(path) => CorrelationMatrix::from_values(read(path)?, DEFAULT_EPSILON)?,
        None => {
            let all: Vec<_> = clients.iter().map(|c| c.labels.view()).collect();
            label_correlation(&ndarray::concatenate(ndarray::Axis(0), &all).map_err(|e| Error::Dataset(e.to_string()))?, DEFAULT_EPSILON)?
        }
    };
    let block_preferences = manifest.block_preferences.as_deref().map(read).transpose()?;
    Ok(FederatedDataset {
        clients,
        test,
        ground_truth,
        block_preferences,
        spec: manifest.spec,
    })
}
