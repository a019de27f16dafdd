//! Weighted-Frobenius correlation alignment.
//!
//! Two objectives over a client correlation `R` and a consensus target `R*`:
//!
//! * full: `sum_{c,c'} g[c][c']^2 (R - R*)[c][c']^2`
//! * block: the same sum restricted to pairs inside one label cluster.
//!
//! Both have diagonal Hessians, so gradient descent contracts every pair
//! independently by `1 - 2 eta g^2` per step. [`gd_run`] runs that descent
//! and [`decomposition_terms`] splits the full objective of a block-supported
//! matrix into its in-block error and the cross-block consensus mass.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::clustering::LabelPartition;
use crate::consensus::ConsensusMatrix;
use crate::corrstats::{check_epsilon, correlation_with_pullback, CorrelationMatrix, PredictionMatrix};
use crate::error::{check_square, Error, Result};

/// Nonnegative symmetric pair weights with in-block floor `gamma_in` and
/// cross-block ceiling `gamma_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMask {
    values: Array2<f64>,
    partition: LabelPartition,
    gamma_in: f64,
    gamma_out: f64,
}

impl WeightMask {
    /// Constant `gamma_in` on in-block pairs and `gamma_out` across blocks.
    pub fn block(partition: LabelPartition, gamma_in: f64, gamma_out: f64) -> Result<Self> {
        let c = partition.n_labels();
        let values = Array2::from_shape_fn((c, c), |(i, j)| {
            if partition.same_block(i, j) {
                gamma_in
            } else {
                gamma_out
            }
        });
        Self::from_values(values, partition)
    }

    /// Unit weights everywhere with a single all-label cluster.
    pub fn uniform(n_labels: usize) -> Self {
        Self::block(LabelPartition::single(n_labels), 1.0, 0.0).expect("unit weights are valid")
    }

    pub fn from_values(values: Array2<f64>, partition: LabelPartition) -> Result<Self> {
        let c = partition.n_labels();
        check_square("weight mask", values.nrows(), values.ncols(), c)?;
        let invalid = |reason: String| Error::InvalidParameter {
            name: "weight mask",
            reason,
        };
        let mut gamma_in = f64::INFINITY;
        let mut gamma_out = 0.0f64;
        for i in 0..c {
            for j in 0..c {
                let v = values[[i, j]];
                if !(v >= 0.0 && v.is_finite()) || v != values[[j, i]] {
                    return Err(invalid(format!("entry ({i}, {j}) is negative, non-finite or asymmetric")));
                }
                if partition.same_block(i, j) {
                    gamma_in = gamma_in.min(v);
                } else {
                    gamma_out = gamma_out.max(v);
                }
            }
        }
        if !(gamma_in > 0.0) {
            return Err(invalid("in-block weights must be positive".into()));
        }
        if gamma_out >= gamma_in {
            return Err(invalid(format!(
                "cross-block weight {gamma_out} must stay below in-block weight {gamma_in}"
            )));
        }
        Ok(Self {
            values,
            partition,
            gamma_in,
            gamma_out,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn partition(&self) -> &LabelPartition {
        &self.partition
    }

    pub fn gamma_in(&self) -> f64 {
        self.gamma_in
    }

    pub fn gamma_out(&self) -> f64 {
        self.gamma_out
    }

    pub fn max_weight(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Largest stepsize for which descent on either objective is stable.
    pub fn max_stepsize(&self) -> f64 {
        1.0 / (2.0 * self.max_weight().powi(2))
    }

    fn n_labels(&self) -> usize {
        self.partition.n_labels()
    }
}

/// `B` (consensus on in-block pairs) and `E` (the rest).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDecomposition {
    pub in_block: Array2<f64>,
    pub cross_block: Array2<f64>,
    pub partition: LabelPartition,
}

/// Keeps entries with both labels in one cluster and zeroes the rest.
pub fn project_block_diagonal(m: &Array2<f64>, partition: &LabelPartition) -> Array2<f64> {
    let mut out = Array2::zeros(m.raw_dim());
    for cl in partition.clusters() {
        for &i in cl {
            for &j in cl {
                out[[i, j]] = m[[i, j]];
            }
        }
    }
    out
}

pub fn decompose_consensus(consensus: &ConsensusMatrix, partition: &LabelPartition) -> BlockDecomposition {
    let r = consensus.values();
    let in_block = project_block_diagonal(r, partition);
    let cross_block = r - &in_block;
    BlockDecomposition {
        in_block,
        cross_block,
        partition: partition.clone(),
    }
}

fn check_pair(r: &Array2<f64>, target: &Array2<f64>, mask: &WeightMask) -> Result<()> {
    let c = mask.n_labels();
    check_square("correlation", r.nrows(), r.ncols(), c)?;
    check_square("consensus", target.nrows(), target.ncols(), c)
}

fn weighted_sq(r: &Array2<f64>, target: &Array2<f64>, mask: &WeightMask, in_block_only: bool) -> f64 {
    let c = mask.n_labels();
    let mut acc = 0.0;
    for i in 0..c {
        for j in 0..c {
            if in_block_only && !mask.partition.same_block(i, j) {
                continue;
            }
            let d = r[[i, j]] - target[[i, j]];
            let g = mask.values[[i, j]];
            acc += g * g * d * d;
        }
    }
    acc
}

pub fn full_alignment_loss(r: &CorrelationMatrix, target: &ConsensusMatrix, mask: &WeightMask) -> Result<f64> {
    full_objective(r.values(), target.values(), mask)
}

pub fn block_alignment_loss(r: &CorrelationMatrix, target: &ConsensusMatrix, mask: &WeightMask) -> Result<f64> {
    block_objective(r.values(), target.values(), mask)
}

/// Full objective on raw matrices.
pub fn full_objective(r: &Array2<f64>, target: &Array2<f64>, mask: &WeightMask) -> Result<f64> {
    check_pair(r, target, mask)?;
    Ok(weighted_sq(r, target, mask, false))
}

/// Block objective on raw matrices.
pub fn block_objective(r: &Array2<f64>, target: &Array2<f64>, mask: &WeightMask) -> Result<f64> {
    check_pair(r, target, mask)?;
    Ok(weighted_sq(r, target, mask, true))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Full,
    Block,
}

/// Iterates and objective values of a descent run, `steps + 1` of each.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub iterates: Vec<Array2<f64>>,
    pub objective: Vec<f64>,
}

impl Trajectory {
    pub fn last(&self) -> &Array2<f64> {
        self.iterates.last().expect("trajectory holds the initial point")
    }

    /// `step,objective` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,objective\n");
        for (t, f) in self.objective.iter().enumerate() {
            out.push_str(&format!("{t},{f}\n"));
        }
        out
    }
}

/// One gradient step in place. Block steps only touch in-block pairs.
pub fn gd_step(r: &mut Array2<f64>, target: &Array2<f64>, mask: &WeightMask, eta: f64, objective: Objective) {
    match objective {
        Objective::Full => {
            ndarray::Zip::from(r)
                .and(target)
                .and(&mask.values)
                .for_each(|x, &t, &g| *x -= eta * 2.0 * g * g * (*x - t));
        }
        Objective::Block => {
            for cl in mask.partition.clusters() {
                for &i in cl {
                    for &j in cl {
                        let g = mask.values[[i, j]];
                        let x = r[[i, j]];
                        r[[i, j]] = x - eta * 2.0 * g * g * (x - target[[i, j]]);
                    }
                }
            }
        }
    }
}

pub fn gd_run(
    objective: Objective,
    r0: &Array2<f64>,
    target: &Array2<f64>,
    mask: &WeightMask,
    eta: f64,
    steps: usize,
) -> Result<Trajectory> {
    check_pair(r0, target, mask)?;
    let limit = mask.max_stepsize();
    if !(eta > 0.0) || eta > limit {
        return Err(Error::StepSize { eta, limit });
    }
    let eval = |r: &Array2<f64>| match objective {
        Objective::Full => weighted_sq(r, target, mask, false),
        Objective::Block => weighted_sq(r, target, mask, true),
    };
    let mut r = r0.clone();
    let mut iterates = Vec::with_capacity(steps + 1);
    let mut values = Vec::with_capacity(steps + 1);
    iterates.push(r.clone());
    values.push(eval(&r));
    for _ in 0..steps {
        gd_step(&mut r, target, mask, eta, objective);
        values.push(eval(&r));
        iterates.push(r.clone());
    }
    Ok(Trajectory {
        iterates,
        objective: values,
    })
}

/// Per-pair contraction factor of one descent step: `1 - 2 eta g^2`, with
/// weight zero outside the blocks for the block objective.
pub fn contraction_factor(mask: &WeightMask, eta: f64, objective: Objective, i: usize, j: usize) -> f64 {
    let g = match objective {
        Objective::Block if !mask.partition.same_block(i, j) => 0.0,
        _ => mask.values[[i, j]],
    };
    1.0 - 2.0 * eta * g * g
}

/// Worst (largest) per-step factor of each objective over the pairs it
/// actually optimizes: `(block, full)`.
pub fn worst_contraction(mask: &WeightMask, eta: f64) -> (f64, f64) {
    let c = mask.n_labels();
    let mut block = f64::NEG_INFINITY;
    let mut full = f64::NEG_INFINITY;
    for i in 0..c {
        for j in 0..c {
            let f = contraction_factor(mask, eta, Objective::Full, i, j);
            full = full.max(f);
            if mask.partition.same_block(i, j) {
                block = block.max(f);
            }
        }
    }
    (block, full)
}

/// Full objective, block objective and weighted cross-block consensus mass of
/// a block-supported matrix: `(f_full, f_blk, ||G_out o E||^2)`.
pub fn decomposition_terms(r_blk: &Array2<f64>, target: &ConsensusMatrix, mask: &WeightMask) -> Result<(f64, f64, f64)> {
    let t = target.values();
    check_pair(r_blk, t, mask)?;
    let c = mask.n_labels();
    for i in 0..c {
        for j in 0..c {
            if !mask.partition.same_block(i, j) && r_blk[[i, j]] != 0.0 {
                return Err(Error::SupportViolation { row: i, col: j });
            }
        }
    }
    let f_full = weighted_sq(r_blk, t, mask, false);
    let b = project_block_diagonal(t, &mask.partition);
    let f_blk = weighted_sq(&project_block_diagonal(r_blk, &mask.partition), &b, mask, false);
    let e = t - &b;
    let mut cross = 0.0;
    for i in 0..c {
        for j in 0..c {
            if !mask.partition.same_block(i, j) {
                let g = mask.values[[i, j]];
                cross += g * g * e[[i, j]] * e[[i, j]];
            }
        }
    }
    Ok((f_full, f_blk, cross))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    /// `sum g^2 (R - R*)^2`
    #[default]
    WeightedFrobenius,
}

/// Settings of the alignment term added to the local loss.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentLossSpec {
    pub lambda: f64,
    pub psi: Divergence,
    /// `None` aligns every label pair.
    pub partition: Option<LabelPartition>,
    /// Per-pair weights; unit weights when absent.
    pub weights: Option<Array2<f64>>,
}

impl AlignmentLossSpec {
    pub fn full(lambda: f64) -> Self {
        Self {
            lambda,
            psi: Divergence::WeightedFrobenius,
            partition: None,
            weights: None,
        }
    }

    pub fn blocks(lambda: f64, partition: LabelPartition) -> Self {
        Self {
            partition: Some(partition),
            ..Self::full(lambda)
        }
    }
}

/// Alignment loss of the scores' correlation against the consensus and its
/// gradient with respect to the scores.
///
/// With a partition set, only columns of one cluster interact, so each
/// cluster is evaluated on its own column slice.
pub fn local_alignment_loss_and_grad(
    preds: &PredictionMatrix,
    target: &ConsensusMatrix,
    spec: &AlignmentLossSpec,
    epsilon: f64,
) -> Result<(f64, Array2<f64>)> {
    alignment_loss_and_grad_view(preds.scores().view(), target.values(), spec, epsilon)
}

pub(crate) fn alignment_loss_and_grad_view(
    scores: ArrayView2<'_, f64>,
    target: &Array2<f64>,
    spec: &AlignmentLossSpec,
    epsilon: f64,
) -> Result<(f64, Array2<f64>)> {
    check_epsilon(epsilon)?;
    let (n, c) = scores.dim();
    check_square("consensus", target.nrows(), target.ncols(), c)?;
    if !(spec.lambda >= 0.0) {
        return Err(Error::InvalidParameter {
            name: "lambda",
            reason: format!("must be nonnegative, got {}", spec.lambda),
        });
    }
    if let Some(w) = &spec.weights {
        check_square("alignment weights", w.nrows(), w.ncols(), c)?;
    }
    if let Some(p) = &spec.partition {
        if p.n_labels() != c {
            return Err(crate::error::shape_err(format!("partition of {c} labels"), p.n_labels()));
        }
    }
    if spec.lambda == 0.0 {
        return Ok((0.0, Array2::zeros((n, c))));
    }
    let whole;
    let clusters: &[Vec<usize>] = match &spec.partition {
        Some(p) => p.clusters(),
        None => {
            whole = vec![(0..c).collect::<Vec<_>>()];
            &whole
        }
    };
    // gather the columns once so every cluster is a contiguous range
    let order = clusters.concat();
    let identity = order.iter().enumerate().all(|(i, &l)| i == l);
    let gathered;
    let view = if identity {
        scores
    } else {
        gathered = scores.select(ndarray::Axis(1), &order);
        gathered.view()
    };
    let mut grad = Array2::zeros((n, c));
    let mut loss = 0.0;
    let mut start = 0;
    for cl in clusters {
        let k = cl.len();
        let cols = ndarray::s![.., start..start + k];
        let weight = |a: usize, b: usize| spec.weights.as_ref().map_or(1.0, |w| w[[cl[a], cl[b]]]);
        let mut block_loss = 0.0;
        let (_, g) = correlation_with_pullback(view.slice(cols), epsilon, |r| {
            let mut up = Array2::zeros((k, k));
            for a in 0..k {
                for b in 0..k {
                    let w = weight(a, b);
                    let d = r[[a, b]] - target[[cl[a], cl[b]]];
                    block_loss += w * w * d * d;
                    up[[a, b]] = spec.lambda * 2.0 * w * w * d;
                }
            }
            up
        });
        loss += spec.lambda * block_loss;
        grad.slice_mut(cols).assign(&g);
        start += k;
    }
    if !identity {
        let mut inverse = vec![0; c];
        for (pos, &label) in order.iter().enumerate() {
            inverse[label] = pos;
        }
        grad = grad.select(ndarray::Axis(1), &inverse);
    }
    Ok((loss, grad))
}
