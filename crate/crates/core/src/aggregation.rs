//! Correlation-aware server aggregation.
//!
//! Every participant gets `w = alpha(t) * n_bar + (1 - alpha(t)) * q_bar`, where
//! `n_bar` is its share of the round's samples and `q_bar` its share of the
//! quality scores `exp(-gamma_q * s)`. The mixing coefficient decays linearly
//! from 1 to 0 over `t0` rounds, moving the weighting from data quantity to
//! structural quality.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::alignment::{block_objective, WeightMask};
use crate::clustering::LabelPartition;
use crate::consensus::{ClientId, ConsensusMatrix};
use crate::corrstats::CorrelationMatrix;
use crate::error::{shape_err, Error, Result};

pub const DEFAULT_GAMMA_Q: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualitySchedule {
    pub gamma_q: f64,
    pub t0: usize,
}

impl QualitySchedule {
    pub fn new(gamma_q: f64, t0: usize) -> Result<Self> {
        if !(gamma_q > 0.0 && gamma_q.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "gamma_q",
                reason: format!("must be positive, got {gamma_q}"),
            });
        }
        if t0 == 0 {
            return Err(Error::InvalidParameter {
                name: "t0",
                reason: "transition horizon must be at least 1".into(),
            });
        }
        Ok(Self { gamma_q, t0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientWeight {
    pub client: ClientId,
    pub n_bar: f64,
    pub q_bar: f64,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    pub round: usize,
    pub per_client: Vec<ClientWeight>,
}

impl AggregationWeights {
    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.per_client.iter().map(|c| c.w)
    }
}

/// Unit-weight block discrepancy between a client's matrix and its consensus.
pub fn structural_discrepancy(
    local: &CorrelationMatrix,
    consensus: &ConsensusMatrix,
    partition: &LabelPartition,
) -> Result<f64> {
    let c = local.n_labels();
    if partition.n_labels() != c || consensus.n_labels() != c {
        return Err(shape_err(
            format!("{c} labels"),
            format!("partition {} / consensus {}", partition.n_labels(), consensus.n_labels()),
        ));
    }
    let mask = WeightMask::block(partition.clone(), 1.0, 0.0)?;
    block_objective(local.values(), consensus.values(), &mask)
}

pub fn quality_score(s: f64, gamma_q: f64) -> f64 {
    (-gamma_q * s).exp()
}

pub fn mixing_coefficient(t: usize, t0: usize) -> f64 {
    (1.0 - t as f64 / t0 as f64).max(0.0)
}

/// A participant of the round: sample count and structural discrepancy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Participant {
    pub client: ClientId,
    pub samples: usize,
    pub discrepancy: f64,
}

pub fn aggregation_weights(
    participants: &[Participant],
    t: usize,
    schedule: &QualitySchedule,
) -> Result<AggregationWeights> {
    if participants.is_empty() {
        return Err(Error::EmptyInput("no participants to aggregate"));
    }
    if let Some(p) = participants.iter().find(|p| p.samples == 0) {
        return Err(Error::InvalidParameter {
            name: "samples",
            reason: format!("client {} has no samples", p.client),
        });
    }
    if let Some(p) = participants.iter().find(|p| !(p.discrepancy >= 0.0)) {
        return Err(Error::InvalidParameter {
            name: "discrepancy",
            reason: format!("client {} reported {}", p.client, p.discrepancy),
        });
    }
    let alpha = mixing_coefficient(t, schedule.t0);
    let n_total: f64 = participants.iter().map(|p| p.samples as f64).sum();
    let q: Vec<f64> = participants
        .iter()
        .map(|p| quality_score(p.discrepancy, schedule.gamma_q))
        .collect();
    let q_total: f64 = q.iter().sum();
    let per_client = participants
        .iter()
        .zip(&q)
        .map(|(p, &qi)| {
            let n_bar = p.samples as f64 / n_total;
            // all qualities can underflow for huge discrepancies
            let q_bar = if q_total > 0.0 {
                qi / q_total
            } else {
                1.0 / participants.len() as f64
            };
            let w = if alpha == 1.0 {
                n_bar
            } else {
                alpha * n_bar + (1.0 - alpha) * q_bar
            };
            ClientWeight {
                client: p.client,
                n_bar,
                q_bar,
                w,
            }
        })
        .collect();
    Ok(AggregationWeights { round: t, per_client })
}

/// Size-only weights, what FedAvg uses.
pub fn size_weights(participants: &[Participant], t: usize) -> Result<AggregationWeights> {
    let schedule = QualitySchedule { gamma_q: 1.0, t0: 1 };
    let mut w = aggregation_weights(participants, 0, &schedule)?;
    w.round = t;
    Ok(w)
}

/// Convex combination of parameter arrays of identical shape.
pub fn aggregate_parameters(params: &[(&Array2<f64>, f64)]) -> Result<Array2<f64>> {
    let Some((first, _)) = params.first() else {
        return Err(Error::EmptyInput("no parameters to aggregate"));
    };
    let total: f64 = params.iter().map(|(_, w)| w).sum();
    if (total - 1.0).abs() > 1e-9 || params.iter().any(|(_, w)| !(*w >= 0.0)) {
        return Err(Error::WeightSum(total));
    }
    let mut out = Array2::zeros(first.raw_dim());
    for (theta, w) in params {
        if theta.dim() != first.dim() {
            return Err(shape_err(format!("{:?}", first.dim()), format!("{:?}", theta.dim())));
        }
        out.scaled_add(*w, theta);
    }
    Ok(out)
}
