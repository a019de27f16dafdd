//! Randomized checks of the alignment convergence laws and the block
//! decomposition identity, plus a block-vs-full timing harness.

use std::hint::black_box;
use std::time::Instant;

use fedharmony_core::alignment::{
    block_objective, decomposition_terms, full_objective, gd_run, local_alignment_loss_and_grad,
    project_block_diagonal, worst_contraction, AlignmentLossSpec, Objective, WeightMask,
};
use fedharmony_core::clustering::LabelPartition;
use fedharmony_core::consensus::ConsensusMatrix;
use fedharmony_core::corrstats::{CorrelationMatrix, PredictionMatrix};
use fedharmony_core::federation::derive_seed;
use fedharmony_core::Error;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{CliError, VerifySettings};

#[derive(Debug, Clone, Serialize)]
pub struct ContractionReport {
    pub instances: usize,
    pub steps: usize,
    /// Largest `|r_T - (1 - 2 eta g^2)^T r_0| / |r_0|` over all coordinates.
    pub max_relative_violation: f64,
    pub worst_instance_seed: u64,
    pub rate_ordering_failures: Vec<u64>,
    pub block_bound_failures: Vec<u64>,
    /// Instances where `f_full(T) <= (1 - 2 eta g_out^2)^T f_full(0)` fails.
    /// Informational: the bound needs every cross weight to equal g_out.
    pub full_display_bound_violations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecompositionReport {
    pub instances: usize,
    pub iterates_checked: usize,
    pub max_relative_residual: f64,
    pub worst_instance_seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingReport {
    pub labels: usize,
    pub clusters: usize,
    pub samples: usize,
    pub repeats: usize,
    pub block_ms_per_step: f64,
    pub full_ms_per_step: f64,
    /// `block / full`
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub seed: u64,
    pub contraction: ContractionReport,
    pub decomposition: DecompositionReport,
    pub timing: TimingReport,
    pub passed: bool,
    pub failures: Vec<String>,
}

impl VerificationReport {
    pub fn summary(&self) -> String {
        let c = &self.contraction;
        let d = &self.decomposition;
        let t = &self.timing;
        let mut s = String::new();
        s += &format!(
            "contraction law: {} instances x {} steps, max relative violation {:.3e} (instance seed {})\n",
            c.instances, c.steps, c.max_relative_violation, c.worst_instance_seed
        );
        s += &format!(
            "rate ordering: {} failures; block bound: {} failures; full display bound violated on {} instances (informational)\n",
            c.rate_ordering_failures.len(),
            c.block_bound_failures.len(),
            c.full_display_bound_violations
        );
        s += &format!(
            "decomposition identity: {} iterates over {} instances, max relative residual {:.3e} (instance seed {})\n",
            d.iterates_checked, d.instances, d.max_relative_residual, d.worst_instance_seed
        );
        s += &format!(
            "alignment step C={} G={} N={}: block {:.4} ms, full {:.4} ms, ratio {:.3}\n",
            t.labels, t.clusters, t.samples, t.block_ms_per_step, t.full_ms_per_step, t.ratio
        );
        s += if self.passed { "result: PASS" } else { "result: FAIL" };
        for f in &self.failures {
            s += &format!("\n  {f}");
        }
        s
    }
}

fn random_partition(rng: &mut ChaCha8Rng, c: usize, g: usize) -> LabelPartition {
    let mut labels: Vec<usize> = (0..c).map(|i| if i < g { i } else { rng.random_range(0..g) }).collect();
    labels.shuffle(rng);
    LabelPartition::from_assignment(&labels).expect("every cluster is nonempty")
}

fn random_correlation(rng: &mut ChaCha8Rng, c: usize) -> Array2<f64> {
    let mut m = Array2::eye(c);
    for i in 0..c {
        for j in i + 1..c {
            let v = rng.random_range(-0.9..0.9);
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
    m
}

/// Heterogeneous weights: in-block in `[g_in, 2 g_in]`, cross-block in
/// `[0, rho g_in]`.
fn random_mask(rng: &mut ChaCha8Rng, partition: LabelPartition) -> WeightMask {
    let c = partition.n_labels();
    let g_in = rng.random_range(0.5..1.5);
    let rho = rng.random_range(0.0..0.9);
    let mut w = Array2::zeros((c, c));
    for i in 0..c {
        for j in i..c {
            let v = if partition.same_block(i, j) {
                rng.random_range(g_in..2.0 * g_in)
            } else {
                rng.random_range(0.0..=rho * g_in)
            };
            w[[i, j]] = v;
            w[[j, i]] = v;
        }
    }
    WeightMask::from_values(w, partition).expect("in-block weights dominate")
}

pub struct Instance {
    pub seed: u64,
    pub mask: WeightMask,
    pub r0: Array2<f64>,
    pub target: ConsensusMatrix,
    pub eta: f64,
}

pub fn instance(seed: u64, max_labels: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(4..=max_labels);
    let g = rng.random_range(2..=3);
    let partition = random_partition(&mut rng, c, g);
    let mask = random_mask(&mut rng, partition);
    let r0 = random_correlation(&mut rng, c);
    let target = ConsensusMatrix::from_matrix(
        CorrelationMatrix::from_values(random_correlation(&mut rng, c), 1e-8).expect("symmetric"),
        0,
    );
    let eta = mask.max_stepsize() * rng.random_range(0.1..=1.0);
    Instance {
        seed,
        mask,
        r0,
        target,
        eta,
    }
}

fn law_violation(inst: &Instance, objective: Objective, steps: usize) -> Result<(f64, Array2<f64>), Error> {
    let t = inst.target.values();
    let traj = gd_run(objective, &inst.r0, t, &inst.mask, inst.eta, steps)?;
    let last = traj.last();
    let part = inst.mask.partition();
    let mut worst = 0.0f64;
    for ((i, j), &x) in last.indexed_iter() {
        let g = match objective {
            Objective::Block if !part.same_block(i, j) => 0.0,
            _ => inst.mask.values()[[i, j]],
        };
        let r0 = inst.r0[[i, j]] - t[[i, j]];
        let expected = (1.0 - 2.0 * inst.eta * g * g).powi(steps as i32) * r0;
        let err = (x - t[[i, j]] - expected).abs();
        worst = worst.max(if r0 == 0.0 { err } else { err / r0.abs() });
    }
    Ok((worst, last.clone()))
}

pub fn check_contraction(seed: u64, s: &VerifySettings) -> Result<ContractionReport, CliError> {
    let mut report = ContractionReport {
        instances: s.instances,
        steps: s.steps,
        max_relative_violation: 0.0,
        worst_instance_seed: 0,
        rate_ordering_failures: Vec::new(),
        block_bound_failures: Vec::new(),
        full_display_bound_violations: 0,
    };
    for i in 0..s.instances {
        let inst = instance(derive_seed(seed, &[1, i as u64]), s.max_labels);
        let t = inst.target.values();
        let steps = s.steps as i32;
        let g_in = inst.mask.gamma_in();
        let g_out = inst.mask.gamma_out();
        for objective in [Objective::Full, Objective::Block] {
            let (v, last) = law_violation(&inst, objective, s.steps)
                .map_err(|e| CliError::Verification(format!("instance seed {}: {e}", inst.seed)))?;
            if v > report.max_relative_violation {
                report.max_relative_violation = v;
                report.worst_instance_seed = inst.seed;
            }
            match objective {
                Objective::Block => {
                    let f0 = block_objective(&inst.r0, t, &inst.mask)?;
                    let ft = block_objective(&last, t, &inst.mask)?;
                    if ft > (1.0 - 2.0 * inst.eta * g_in * g_in).powi(steps) * f0 * (1.0 + 1e-12) {
                        report.block_bound_failures.push(inst.seed);
                    }
                }
                Objective::Full => {
                    let f0 = full_objective(&inst.r0, t, &inst.mask)?;
                    let ft = full_objective(&last, t, &inst.mask)?;
                    if ft > (1.0 - 2.0 * inst.eta * g_out * g_out).powi(steps) * f0 * (1.0 + 1e-12) {
                        report.full_display_bound_violations += 1;
                    }
                }
            }
        }
        let (block, full) = worst_contraction(&inst.mask, inst.eta);
        if !(block < full) {
            report.rate_ordering_failures.push(inst.seed);
        }
    }
    Ok(report)
}

pub fn check_decomposition(seed: u64, s: &VerifySettings) -> Result<DecompositionReport, CliError> {
    let mut report = DecompositionReport {
        instances: s.instances,
        iterates_checked: 0,
        max_relative_residual: 0.0,
        worst_instance_seed: 0,
    };
    for i in 0..s.instances {
        let inst = instance(derive_seed(seed, &[2, i as u64]), s.max_labels);
        let start = project_block_diagonal(&inst.r0, inst.mask.partition());
        let traj = gd_run(Objective::Block, &start, inst.target.values(), &inst.mask, inst.eta, s.steps)
            .map_err(|e| CliError::Verification(format!("instance seed {}: {e}", inst.seed)))?;
        for it in &traj.iterates {
            let (full, blk, cross) = decomposition_terms(it, &inst.target, &inst.mask)?;
            let rel = (full - blk - cross).abs() / full.max(f64::MIN_POSITIVE);
            report.iterates_checked += 1;
            if rel > report.max_relative_residual {
                report.max_relative_residual = rel;
                report.worst_instance_seed = inst.seed;
            }
        }
    }
    Ok(report)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall-clock of one alignment loss-and-gradient evaluation for the
/// full objective and for contiguous equal blocks.
pub fn time_alignment_step(seed: u64, s: &VerifySettings) -> Result<TimingReport, CliError> {
    let (c, g, n) = (s.timing_labels, s.timing_clusters, s.timing_samples);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3]));
    let preds = PredictionMatrix::new(Array2::from_shape_simple_fn((n, c), || rng.random_range(0.05..0.95)))?;
    let target = ConsensusMatrix::from_matrix(CorrelationMatrix::from_values(random_correlation(&mut rng, c), 1e-8)?, 0);
    let assignment: Vec<usize> = (0..c).map(|i| i * g / c).collect();
    let partition = LabelPartition::from_assignment(&assignment)?;
    let full = AlignmentLossSpec::full(1.0);
    let block = AlignmentLossSpec::blocks(1.0, partition);
    let run = |spec: &AlignmentLossSpec| -> Result<f64, Error> {
        let clock = Instant::now();
        black_box(local_alignment_loss_and_grad(black_box(&preds), &target, spec, 1e-8)?);
        Ok(clock.elapsed().as_secs_f64() * 1e3)
    };
    run(&full)?;
    run(&block)?;
    let mut tf = Vec::with_capacity(s.timing_repeats);
    let mut tb = Vec::with_capacity(s.timing_repeats);
    for _ in 0..s.timing_repeats.max(1) {
        tf.push(run(&full)?);
        tb.push(run(&block)?);
    }
    let (full_ms, block_ms) = (median(tf), median(tb));
    Ok(TimingReport {
        labels: c,
        clusters: g,
        samples: n,
        repeats: s.timing_repeats,
        block_ms_per_step: block_ms,
        full_ms_per_step: full_ms,
        ratio: block_ms / full_ms,
    })
}

pub fn verify(seed: u64, s: &VerifySettings) -> Result<VerificationReport, CliError> {
    if s.inject_bad_stepsize {
        let inst = instance(derive_seed(seed, &[4]), s.max_labels);
        let eta = 2.0 * inst.mask.max_stepsize();
        if let Err(e) = gd_run(Objective::Full, &inst.r0, inst.target.values(), &inst.mask, eta, s.steps) {
            return Err(CliError::Verification(format!("instance seed {}: {e}", inst.seed)));
        }
    }
    let contraction = check_contraction(seed, s)?;
    let decomposition = check_decomposition(seed, s)?;
    let timing = time_alignment_step(seed, s)?;
    let mut failures = Vec::new();
    if contraction.max_relative_violation > s.law_tolerance {
        failures.push(format!(
            "contraction law violated by {:.3e} on instance seed {}",
            contraction.max_relative_violation, contraction.worst_instance_seed
        ));
    }
    if let Some(seed) = contraction.rate_ordering_failures.first() {
        failures.push(format!("rate ordering fails on instance seed {seed}"));
    }
    if let Some(seed) = contraction.block_bound_failures.first() {
        failures.push(format!("block rate bound fails on instance seed {seed}"));
    }
    if decomposition.max_relative_residual > s.decomposition_tolerance {
        failures.push(format!(
            "decomposition residual {:.3e} on instance seed {}",
            decomposition.max_relative_residual, decomposition.worst_instance_seed
        ));
    }
    if timing.clusters >= 2 && !(timing.ratio < 1.0) {
        failures.push(format!("block step not faster than full step (ratio {:.3})", timing.ratio));
    }
    Ok(VerificationReport {
        seed,
        contraction,
        decomposition,
        timing,
        passed: failures.is_empty(),
        failures,
    })
}
