//! Soft label statistics and the phi-style correlation matrix.
//!
//! Scores `F` (instances x labels, entries in `[0, 1]`) are treated as soft
//! label indicators. Marginals are column means, joints are means of column
//! products, and the correlation of labels `c, c'` is
//!
//! ```text
//! R[c][c'] = (J[c][c'] - p[c] p[c']) / (sqrt(p[c](1-p[c]) p[c'](1-p[c'])) + eps)
//! ```
//!
//! The diagonal goes through the same formula, so with soft scores it is not
//! pinned to one.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_square, shape_err, Error, Result};

/// Default stability constant added to the correlation denominator.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Prediction scores of one client, rows are instances and columns labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    scores: Array2<f64>,
}

impl PredictionMatrix {
    pub fn new(scores: Array2<f64>) -> Result<Self> {
        let (n, c) = scores.dim();
        if n == 0 {
            return Err(Error::EmptyInput("prediction matrix has no instances"));
        }
        if c < 2 {
            return Err(shape_err("at least 2 labels", format!("{c} labels")));
        }
        if let Some(bad) = scores.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter {
                name: "scores",
                reason: format!("score {bad} outside [0, 1]"),
            });
        }
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }

    pub fn n_instances(&self) -> usize {
        self.scores.nrows()
    }

    pub fn n_labels(&self) -> usize {
        self.scores.ncols()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.scores
    }
}

/// Empirical marginal and pairwise joint occurrence of the labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMarginals {
    pub marginal: Array1<f64>,
    pub joint: Array2<f64>,
}

/// Symmetric matrix of phi-style label correlations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    values: Array2<f64>,
    epsilon: f64,
}

impl CorrelationMatrix {
    /// Wraps an existing matrix. It must be square and symmetric; entries are
    /// clamped into `[-1, 1]` to absorb floating-point drift.
    pub fn from_values(values: Array2<f64>, epsilon: f64) -> Result<Self> {
        let (r, c) = values.dim();
        check_square("correlation matrix", r, c, r)?;
        for i in 0..r {
            for j in (i + 1)..r {
                let (a, b) = (values[[i, j]], values[[j, i]]);
                if (a - b).abs() > 1e-9 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::InvalidParameter {
                        name: "correlation matrix",
                        reason: format!("not symmetric at ({i}, {j}): {a} vs {b}"),
                    });
                }
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "correlation matrix",
                reason: "non-finite entry".into(),
            });
        }
        Ok(Self::from_values_unchecked(symmetrize_clamp(values), epsilon))
    }

    pub(crate) fn from_values_unchecked(values: Array2<f64>, epsilon: f64) -> Self {
        Self { values, epsilon }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn n_labels(&self) -> usize {
        self.values.nrows()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// Headerless CSV, one matrix row per line, shortest round-trip decimals.
    pub fn to_csv(&self) -> String {
        crate::io::matrix_to_csv(&self.values)
    }

    pub fn from_csv(text: &str, epsilon: f64) -> Result<Self> {
        Self::from_values(crate::io::matrix_from_csv(text)?, epsilon)
    }
}

/// `(M + M^T) / 2`, clamped to `[-1, 1]`.
pub(crate) fn symmetrize_clamp(mut m: Array2<f64>) -> Array2<f64> {
    let n = m.nrows();
    for i in 0..n {
        m[[i, i]] = m[[i, i]].clamp(-1.0, 1.0);
        for j in (i + 1)..n {
            let v = (0.5 * (m[[i, j]] + m[[j, i]])).clamp(-1.0, 1.0);
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
    m
}

pub fn estimate_marginals(preds: &PredictionMatrix) -> LabelMarginals {
    marginals_of(preds.scores.view())
}

pub(crate) fn marginals_of(scores: ArrayView2<'_, f64>) -> LabelMarginals {
    let n = scores.nrows() as f64;
    let marginal = scores.sum_axis(Axis(0)) / n;
    let mut joint = scores.t().dot(&scores) / n;
    // the Gram product is symmetric up to rounding; make it exact
    let c = joint.nrows();
    for i in 0..c {
        for j in (i + 1)..c {
            let v = joint[[i, j]];
            joint[[j, i]] = v;
        }
    }
    LabelMarginals { marginal, joint }
}

/// Intermediate quantities of the correlation formula, reused by gradients.
pub(crate) struct PhiParts {
    pub marginal: Array1<f64>,
    pub variance: Array1<f64>,
    /// `sqrt(var_c var_c')`
    pub scale: Array2<f64>,
    pub numerator: Array2<f64>,
    pub values: Array2<f64>,
}

fn phi_parts(m: &LabelMarginals, epsilon: f64) -> PhiParts {
    let c = m.marginal.len();
    let variance = m.marginal.mapv(|p| (p * (1.0 - p)).max(0.0));
    let mut scale = Array2::zeros((c, c));
    let mut numerator = Array2::zeros((c, c));
    let mut values = Array2::zeros((c, c));
    for i in 0..c {
        for j in i..c {
            let num = m.joint[[i, j]] - m.marginal[i] * m.marginal[j];
            let s = (variance[i] * variance[j]).sqrt();
            let r = (num / (s + epsilon)).clamp(-1.0, 1.0);
            for (a, b) in [(i, j), (j, i)] {
                scale[[a, b]] = s;
                numerator[[a, b]] = num;
                values[[a, b]] = r;
            }
        }
    }
    PhiParts {
        marginal: m.marginal.clone(),
        variance,
        scale,
        numerator,
        values,
    }
}

pub fn phi_correlation(m: &LabelMarginals, epsilon: f64) -> Result<CorrelationMatrix> {
    check_epsilon(epsilon)?;
    let c = m.marginal.len();
    let (r, k) = m.joint.dim();
    check_square("joint", r, k, c)?;
    Ok(CorrelationMatrix::from_values_unchecked(
        phi_parts(m, epsilon).values,
        epsilon,
    ))
}

/// Marginals followed by the phi correlation.
pub fn correlation(preds: &PredictionMatrix, epsilon: f64) -> Result<CorrelationMatrix> {
    phi_correlation(&estimate_marginals(preds), epsilon)
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "epsilon",
            reason: format!("must be positive, got {epsilon}"),
        });
    }
    Ok(())
}

/// Jacobian of the correlation matrix with respect to the prediction scores.
///
/// `dR[c][c'] / dF[i][j]` vanishes unless `j` is `c` or `c'`, so only two
/// slabs are stored: `first[[c, c', i]]` collects the terms through column
/// `c` and `second[[c, c', i]]` the terms through column `c'`. On the
/// diagonal both slabs hit the same column and add up.
#[derive(Debug, Clone)]
pub struct CorrelationJacobian {
    first: Array3<f64>,
    second: Array3<f64>,
}

impl CorrelationJacobian {
    pub fn n_labels(&self) -> usize {
        self.first.dim().0
    }

    pub fn n_instances(&self) -> usize {
        self.first.dim().2
    }

    /// `dR[c][c2] / dF[i][j]`
    pub fn get(&self, c: usize, c2: usize, i: usize, j: usize) -> f64 {
        let mut g = 0.0;
        if j == c {
            g += self.first[[c, c2, i]];
        }
        if j == c2 {
            g += self.second[[c, c2, i]];
        }
        g
    }

    /// Dense `N x C` slice `dR[c][c2] / dF`.
    pub fn slice(&self, c: usize, c2: usize) -> Array2<f64> {
        let n = self.n_instances();
        let mut out = Array2::zeros((n, self.n_labels()));
        for i in 0..n {
            out[[i, c]] += self.first[[c, c2, i]];
            out[[i, c2]] += self.second[[c, c2, i]];
        }
        out
    }
}

pub fn correlation_gradient(preds: &PredictionMatrix, epsilon: f64) -> Result<CorrelationJacobian> {
    check_epsilon(epsilon)?;
    let f = preds.scores();
    let (n, c) = f.dim();
    let nf = n as f64;
    let parts = phi_parts(&estimate_marginals(preds), epsilon);
    let mut first = Array3::zeros((c, c, n));
    let mut second = Array3::zeros((c, c, n));
    for a in 0..c {
        for b in 0..c {
            let den = parts.scale[[a, b]] + epsilon;
            let s = parts.scale[[a, b]];
            let coef = -parts.numerator[[a, b]] / (den * den);
            // d scale / d p_a and d scale / d p_b, zero at a degenerate variance
            let (ds_a, ds_b) = if s > 0.0 {
                (
                    parts.variance[b] * (1.0 - 2.0 * parts.marginal[a]) / (2.0 * s),
                    parts.variance[a] * (1.0 - 2.0 * parts.marginal[b]) / (2.0 * s),
                )
            } else {
                (0.0, 0.0)
            };
            for i in 0..n {
                first[[a, b, i]] =
                    ((f[[i, b]] - parts.marginal[b]) / den + coef * ds_a) / nf;
                second[[a, b, i]] =
                    ((f[[i, a]] - parts.marginal[a]) / den + coef * ds_b) / nf;
            }
        }
    }
    Ok(CorrelationJacobian { first, second })
}

/// Correlation of `scores` and the pullback of `upstream = dL/dR` to `dL/dF`.
///
/// Works on any column count (including a single label), which lets callers
/// evaluate label blocks independently.
pub(crate) fn correlation_with_pullback(
    scores: ArrayView2<'_, f64>,
    epsilon: f64,
    mut upstream: impl FnMut(&Array2<f64>) -> Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let (n, c) = scores.dim();
    let nf = n as f64;
    let parts = phi_parts(&marginals_of(scores), epsilon);
    let g = upstream(&parts.values);
    let mut sym = Array2::zeros((c, c));
    let mut u = Array1::<f64>::zeros(c);
    for a in 0..c {
        for b in 0..c {
            let den = parts.scale[[a, b]] + epsilon;
            sym[[a, b]] += g[[a, b]] / den;
            sym[[b, a]] += g[[a, b]] / den;
            let s = parts.scale[[a, b]];
            if s > 0.0 {
                let coef = -g[[a, b]] * parts.numerator[[a, b]] / (den * den);
                u[a] += coef * parts.variance[b] * (1.0 - 2.0 * parts.marginal[a]) / (2.0 * s);
                u[b] += coef * parts.variance[a] * (1.0 - 2.0 * parts.marginal[b]) / (2.0 * s);
            }
        }
    }
    // (F - 1 p^T) S + 1 u^T, with the centering folded into one row offset
    sym /= nf;
    let offset = parts.marginal.dot(&sym) - &(u / nf);
    let mut grad = scores.dot(&sym);
    grad -= &offset;
    (parts.values, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn preds(a: Array2<f64>) -> PredictionMatrix {
        PredictionMatrix::new(a).unwrap()
    }

    #[test]
    fn hard_label_marginals() {
        let p = preds(array![[1., 1.], [1., 0.], [0., 1.], [0., 0.]]);
        let m = estimate_marginals(&p);
        assert_eq!(m.marginal[0], 0.5);
        assert_eq!(m.joint[[0, 1]], 0.25);
        assert_eq!(m.joint[[1, 0]], 0.25);
    }

    #[test]
    fn soft_marginals_match_direct_evaluation() {
        // high-precision oracle: 0.6 and 0.48666...
        let p = preds(array![[0.9, 0.5], [0.8, 0.5], [0.1, 0.5]]);
        let m = estimate_marginals(&p);
        assert_relative_eq!(m.marginal[0], 0.6, epsilon = 1e-15);
        assert_relative_eq!(m.joint[[0, 0]], 0.486_666_666_666_666_7, epsilon = 1e-15);
    }

    #[test]
    fn identical_columns_nearly_one() {
        let p = preds(array![[1., 1.], [1., 1.], [0., 0.], [0., 0.]]);
        let r = correlation(&p, 1e-8).unwrap();
        assert_relative_eq!(r.values()[[0, 1]], 0.25 / (0.25 + 1e-8), epsilon = 1e-15);
    }

    #[test]
    fn independent_columns_exactly_zero() {
        let p = preds(array![[1., 1.], [1., 0.], [0., 1.], [0., 0.]]);
        let r = correlation(&p, 1e-8).unwrap();
        assert_eq!(r.values()[[0, 1]], 0.0);
        assert_eq!(r.values()[[1, 0]], 0.0);
    }

    #[test]
    fn soft_pair_matches_oracle() {
        // p = (0.6, 0.5), J01 = (0.63 + 0.48 + 0.02) / 3 = 1.13 / 3
        // num = 1.13/3 - 0.3 ; den = sqrt(0.24 * 0.25) + 1e-8
        let p = preds(array![[0.9, 0.7], [0.8, 0.6], [0.1, 0.2]]);
        let r = correlation(&p, 1e-8).unwrap();
        let expected = (1.13 / 3.0 - 0.3) / ((0.24f64 * 0.25).sqrt() + 1e-8);
        assert_relative_eq!(r.values()[[0, 1]], expected, epsilon = 1e-14);
        assert_relative_eq!(r.values()[[0, 1]], 0.312_990_343_244_517_7, epsilon = 1e-13);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            PredictionMatrix::new(Array2::zeros((0, 3))),
            Err(Error::EmptyInput(_))
        ));
        assert!(PredictionMatrix::new(Array2::zeros((3, 1))).is_err());
        assert!(PredictionMatrix::new(array![[0.5, 1.5]]).is_err());
        let p = preds(array![[0.5, 0.2]]);
        assert!(correlation(&p, 0.0).is_err());
    }

    #[test]
    fn jacobian_is_symmetric_in_pair() {
        let p = preds(array![[0.9, 0.7, 0.3], [0.8, 0.6, 0.4], [0.1, 0.2, 0.9]]);
        let jac = correlation_gradient(&p, 1e-8).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                for i in 0..3 {
                    for j in 0..3 {
                        assert_relative_eq!(
                            jac.get(a, b, i, j),
                            jac.get(b, a, i, j),
                            epsilon = 1e-14
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let p = preds(array![[0.9, 0.7], [0.8, 0.6], [0.1, 0.2]]);
        let r = correlation(&p, 1e-8).unwrap();
        let back = CorrelationMatrix::from_csv(&r.to_csv(), 1e-8).unwrap();
        assert_eq!(r, back);
    }
}
