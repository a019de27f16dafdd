//! Leave-one-out consensus over the clients' uploaded correlation matrices.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corrstats::{symmetrize_clamp, CorrelationMatrix};
use crate::error::{check_square, Error, Result};

pub type ClientId = usize;

/// How peers are weighted inside the consensus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusMode {
    Uniform,
    #[default]
    SizeWeighted,
}

/// One uploaded matrix.
#[derive(Debug, Clone)]
pub struct ClientCorrelation {
    pub client: ClientId,
    pub matrix: CorrelationMatrix,
    pub sample_count: usize,
    /// Round in which the matrix was produced; older than the current round
    /// for clients that did not participate recently.
    pub round: usize,
}

/// Latest correlation upload of every client seen so far.
#[derive(Debug, Clone, Default)]
pub struct ClientCorrelationSet {
    entries: Vec<ClientCorrelation>,
    round: usize,
}

impl ClientCorrelationSet {
    pub fn new(round: usize) -> Self {
        Self {
            entries: Vec::new(),
            round,
        }
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn set_round(&mut self, round: usize) {
        self.round = round;
    }

    /// Inserts or replaces the upload of `entry.client`.
    pub fn upsert(&mut self, entry: ClientCorrelation) -> Result<()> {
        if entry.sample_count == 0 {
            return Err(Error::InvalidParameter {
                name: "sample_count",
                reason: format!("client {} reported zero samples", entry.client),
            });
        }
        if let Some(first) = self.entries.first() {
            let c = first.matrix.n_labels();
            let m = entry.matrix.values();
            check_square("client correlation", m.nrows(), m.ncols(), c)?;
        }
        match self.entries.iter_mut().find(|e| e.client == entry.client) {
            Some(slot) => *slot = entry,
            None => self.entries.push(entry),
        }
        Ok(())
    }

    pub fn entries(&self) -> &[ClientCorrelation] {
        &self.entries
    }

    pub fn get(&self, client: ClientId) -> Option<&ClientCorrelation> {
        self.entries.iter().find(|e| e.client == client)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Consensus correlation for one client, built without that client's upload.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusMatrix {
    pub matrix: CorrelationMatrix,
    pub excluded_client: ClientId,
}

impl ConsensusMatrix {
    pub fn values(&self) -> &Array2<f64> {
        self.matrix.values()
    }

    pub fn n_labels(&self) -> usize {
        self.matrix.n_labels()
    }

    /// Treats an arbitrary correlation matrix as a consensus target.
    pub fn from_matrix(matrix: CorrelationMatrix, excluded_client: ClientId) -> Self {
        Self {
            matrix,
            excluded_client,
        }
    }
}

pub fn leave_one_out_consensus(
    set: &ClientCorrelationSet,
    exclude: ClientId,
    mode: ConsensusMode,
) -> Result<ConsensusMatrix> {
    let peers: Vec<&ClientCorrelation> =
        set.entries.iter().filter(|e| e.client != exclude).collect();
    let Some(first) = peers.first() else {
        return Err(Error::InsufficientPeers { client: exclude });
    };
    let c = first.matrix.n_labels();
    let epsilon = first.matrix.epsilon();
    for p in &peers {
        let m = p.matrix.values();
        check_square("peer correlation", m.nrows(), m.ncols(), c)?;
    }

    let total: f64 = match mode {
        ConsensusMode::Uniform => peers.len() as f64,
        ConsensusMode::SizeWeighted => peers.iter().map(|p| p.sample_count as f64).sum(),
    };
    // Sum in client-id order so the result does not depend on upload order.
    let mut ordered = peers;
    ordered.sort_by_key(|p| p.client);
    let mut acc = Array2::<f64>::zeros((c, c));
    for p in ordered {
        let w = match mode {
            ConsensusMode::Uniform => 1.0,
            ConsensusMode::SizeWeighted => p.sample_count as f64,
        } / total;
        acc.scaled_add(w, p.matrix.values());
    }
    Ok(ConsensusMatrix {
        matrix: CorrelationMatrix::from_values_unchecked(symmetrize_clamp(acc), epsilon),
        excluded_client: exclude,
    })
}

/// Frobenius distance between a client's matrix and its consensus.
pub fn consensus_drift(local: &CorrelationMatrix, consensus: &ConsensusMatrix) -> Result<f64> {
    frobenius_distance(local.values(), consensus.values())
}

pub(crate) fn frobenius_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    let c = a.nrows();
    check_square("matrix", b.nrows(), b.ncols(), c)?;
    check_square("matrix", a.nrows(), a.ncols(), c)?;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}
