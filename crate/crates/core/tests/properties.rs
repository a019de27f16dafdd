mod common;

use common::*;
use fedharmony_core::aggregation::{aggregate_parameters, aggregation_weights, size_weights, Participant, QualitySchedule};
use fedharmony_core::alignment::{
    block_objective, decompose_consensus, decomposition_terms, full_objective, gd_run, project_block_diagonal,
    worst_contraction, Objective, WeightMask,
};
use fedharmony_core::clustering::{adjusted_rand_index, spectral_cluster, LabelPartition};
use fedharmony_core::consensus::{leave_one_out_consensus, ClientCorrelation, ClientCorrelationSet, ConsensusMode};
use fedharmony_core::corrstats::{correlation, CorrelationMatrix, PredictionMatrix};
use fedharmony_core::metrics::{report, wilcoxon_with, WilcoxonMethod};
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn frob(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn pool(seed: u64, k: usize, c: usize) -> ClientCorrelationSet {
    let mut r = rng(seed);
    let mut set = ClientCorrelationSet::new(0);
    for client in 0..k {
        set.upsert(ClientCorrelation {
            client,
            matrix: random_correlation(&mut r, c),
            sample_count: r.random_range(1..500),
            round: 0,
        })
        .unwrap();
    }
    set
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn correlation_is_bounded_and_symmetric(seed in any::<u64>(), n in 1usize..40, c in 2usize..9, eps in 1e-12f64..1e-2) {
        let mut r = rng(seed);
        // mix soft scores with saturated columns
        let mut f = uniform(&mut r, n, c, 0.0, 1.0);
        if seed % 3 == 0 {
            f.column_mut(0).fill(1.0);
        }
        let m = correlation(&PredictionMatrix::new(f).unwrap(), eps).unwrap();
        let v = m.values();
        for i in 0..c {
            for j in 0..c {
                prop_assert!((-1.0..=1.0).contains(&v[[i, j]]));
                prop_assert_eq!(v[[i, j]].to_bits(), v[[j, i]].to_bits());
            }
        }
    }

    #[test]
    fn correlation_ignores_row_order(seed in any::<u64>(), n in 2usize..40, c in 2usize..8) {
        let mut r = rng(seed);
        let f = uniform(&mut r, n, c, 0.0, 1.0);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let a = correlation(&PredictionMatrix::new(f.clone()).unwrap(), 1e-8).unwrap();
        let b = correlation(&PredictionMatrix::new(f.select(Axis(0), &order)).unwrap(), 1e-8).unwrap();
        prop_assert!(frob(a.values(), b.values()) < 1e-12);
    }

    #[test]
    fn factorized_hard_labels_are_exactly_uncorrelated(
        e1 in 1u32..5, e2 in 1u32..5, ka_frac in 0.0f64..1.0, kb_frac in 0.0f64..1.0,
    ) {
        // product design: every (a_i, b_j) combination once, so the empirical
        // joint factorizes; dyadic counts keep every step exact
        let (m1, m2) = (1usize << e1, 1usize << e2);
        let ka = 1 + (ka_frac * (m1 - 1) as f64) as usize;
        let kb = 1 + (kb_frac * (m2 - 1) as f64) as usize;
        let mut f = Array2::zeros((m1 * m2, 2));
        for i in 0..m1 {
            for j in 0..m2 {
                f[[i * m2 + j, 0]] = if i < ka { 1.0 } else { 0.0 };
                f[[i * m2 + j, 1]] = if j < kb { 1.0 } else { 0.0 };
            }
        }
        let m = correlation(&PredictionMatrix::new(f).unwrap(), 1e-8).unwrap();
        prop_assert_eq!(m.values()[[0, 1]], 0.0);
    }

    #[test]
    fn consensus_obeys_jensen(seed in any::<u64>(), k in 2usize..7, c in 2usize..7, uniform_mode in any::<bool>()) {
        let set = pool(seed, k, c);
        let mode = if uniform_mode { ConsensusMode::Uniform } else { ConsensusMode::SizeWeighted };
        let g = random_correlation(&mut rng(seed ^ 1), c);
        let cons = leave_one_out_consensus(&set, 0, mode).unwrap();
        let peers: Vec<&ClientCorrelation> = set.entries().iter().filter(|e| e.client != 0).collect();
        let total: f64 = peers.iter().map(|p| if uniform_mode { 1.0 } else { p.sample_count as f64 }).sum();
        let bound: f64 = peers
            .iter()
            .map(|p| {
                let w = if uniform_mode { 1.0 } else { p.sample_count as f64 } / total;
                w * frob(p.matrix.values(), g.values())
            })
            .sum();
        prop_assert!(frob(cons.values(), g.values()) <= bound + 1e-12);
    }

    #[test]
    fn consensus_ignores_peer_order_and_own_matrix(seed in any::<u64>(), k in 2usize..7, c in 2usize..7) {
        let set = pool(seed, k, c);
        let mut entries = set.entries().to_vec();
        entries.reverse();
        let mut reordered = ClientCorrelationSet::new(0);
        for e in entries {
            reordered.upsert(e).unwrap();
        }
        let a = leave_one_out_consensus(&set, 1, ConsensusMode::SizeWeighted).unwrap();
        let b = leave_one_out_consensus(&reordered, 1, ConsensusMode::SizeWeighted).unwrap();
        prop_assert_eq!(a.values(), b.values());

        let mut changed = set.clone();
        let own = changed.get(1).unwrap().clone();
        changed
            .upsert(ClientCorrelation { matrix: random_correlation(&mut rng(!seed), c), sample_count: 7, ..own })
            .unwrap();
        let d = leave_one_out_consensus(&changed, 1, ConsensusMode::SizeWeighted).unwrap();
        prop_assert_eq!(a.values(), d.values());
    }

    #[test]
    fn spectral_partition_covers_labels(seed in any::<u64>(), c in 2usize..12, g_frac in 0.0f64..1.0) {
        let r = random_correlation(&mut rng(seed), c);
        let g = 1 + (g_frac * (c - 1) as f64) as usize;
        let p = spectral_cluster(&r, g, seed).unwrap();
        prop_assert_eq!(p.n_clusters(), g);
        let mut seen: Vec<usize> = p.clusters().iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..c).collect::<Vec<_>>());
        prop_assert_eq!(spectral_cluster(&r, g, seed).unwrap(), p);
    }

    #[test]
    fn spectral_partition_follows_label_permutation(seed in any::<u64>(), g in 2usize..4, per in 2usize..5) {
        // noisy block structure with a clear cluster signal
        let c = g * per;
        let mut r = rng(seed);
        let truth: Vec<usize> = (0..c).map(|i| i / per).collect();
        let mut m = Array2::eye(c);
        for i in 0..c {
            for j in i + 1..c {
                let v = if truth[i] == truth[j] { r.random_range(0.6..0.9) } else { r.random_range(-0.1..0.1) };
                m[[i, j]] = v;
                m[[j, i]] = v;
            }
        }
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut r);
        let pm = Array2::from_shape_fn((c, c), |(i, j)| m[[perm[i], perm[j]]]);
        let a = spectral_cluster(&CorrelationMatrix::from_values(m, 1e-8).unwrap(), g, 3).unwrap();
        let b = spectral_cluster(&CorrelationMatrix::from_values(pm, 1e-8).unwrap(), g, 3).unwrap();
        let back: Vec<usize> = {
            let mut v = vec![0; c];
            for (i, &p) in perm.iter().enumerate() {
                v[p] = b.assignment()[i];
            }
            v
        };
        prop_assert_eq!(adjusted_rand_index(a.assignment(), &back), 1.0);
        prop_assert_eq!(adjusted_rand_index(a.assignment(), &truth), 1.0);
    }

    #[test]
    fn components_are_recovered(seed in any::<u64>(), g in 2usize..5, c_extra in 0usize..6) {
        let c = 2 * g + c_extra;
        let mut r = rng(seed);
        let truth = random_partition(&mut r, c, g);
        // only nonzero entries inside components, each component connected
        let mut m = Array2::eye(c);
        for cl in truth.clusters() {
            for (a, &i) in cl.iter().enumerate() {
                for &j in &cl[a + 1..] {
                    let v = r.random_range(0.2..0.9) * if r.random::<bool>() { 1.0 } else { -1.0 };
                    m[[i, j]] = v;
                    m[[j, i]] = v;
                }
            }
        }
        let singleton_free = truth.clusters().iter().all(|cl| cl.len() > 1);
        prop_assume!(singleton_free);
        let p = spectral_cluster(&CorrelationMatrix::from_values(m, 1e-8).unwrap(), g, seed).unwrap();
        prop_assert_eq!(adjusted_rand_index(p.assignment(), truth.assignment()), 1.0);
    }

    #[test]
    fn contraction_law_is_exact(seed in any::<u64>(), c in 2usize..10, g in 1usize..4, ratio in 0.0f64..0.99, use_block in any::<bool>()) {
        let mut r = rng(seed);
        let part = random_partition(&mut r, c, g.min(c));
        let gamma_in = r.random_range(0.5..2.0);
        let mask = WeightMask::block(part, gamma_in, ratio * gamma_in).unwrap();
        let r0 = random_correlation(&mut r, c).into_values();
        let target = random_correlation(&mut r, c).into_values();
        let eta = mask.max_stepsize() * r.random_range(0.05..1.0);
        let objective = if use_block { Objective::Block } else { Objective::Full };
        let steps = 50;
        let traj = gd_run(objective, &r0, &target, &mask, eta, steps).unwrap();
        let rt = traj.last();
        for i in 0..c {
            for j in 0..c {
                let gamma = if use_block && !mask.partition().same_block(i, j) { 0.0 } else { mask.values()[[i, j]] };
                let res0 = r0[[i, j]] - target[[i, j]];
                let expected = (1.0 - 2.0 * eta * gamma * gamma).powi(steps as i32) * res0;
                let got = rt[[i, j]] - target[[i, j]];
                prop_assert!((got - expected).abs() <= 1e-10 * res0.abs().max(1e-300), "({i},{j}) {got} vs {expected}");
            }
        }
        for w in traj.objective.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-15);
        }
        if mask.partition().n_clusters() > 1 {
            let (block, full) = worst_contraction(&mask, eta);
            prop_assert!(block < full);
        }
    }

    #[test]
    fn decomposition_identity_along_block_runs(seed in any::<u64>(), c in 3usize..13, g in 2usize..4) {
        let mut r = rng(seed);
        let part = random_partition(&mut r, c, g.min(c));
        let gamma_in = r.random_range(0.5..2.0);
        let mask = WeightMask::block(part.clone(), gamma_in, r.random_range(0.0..0.9) * gamma_in).unwrap();
        let target = random_consensus(&mut r, c);
        let r0 = project_block_diagonal(random_correlation(&mut r, c).values(), &part);
        let traj = gd_run(Objective::Block, &r0, target.values(), &mask, mask.max_stepsize() * 0.5, 20).unwrap();
        for it in &traj.iterates {
            let (full, blk, cross) = decomposition_terms(it, &target, &mask).unwrap();
            prop_assert!((full - blk - cross).abs() <= 1e-12 * full.max(1e-300));
        }
        let d = decompose_consensus(&target, &part);
        prop_assert_eq!(&d.in_block + &d.cross_block, target.values().clone());
    }

    #[test]
    fn projector_is_idempotent_and_losses_agree_on_one_cluster(seed in any::<u64>(), c in 2usize..10) {
        let mut r = rng(seed);
        let part = random_partition(&mut r, c, 2.min(c));
        let m = uniform(&mut r, c, c, -1.0, 1.0);
        let once = project_block_diagonal(&m, &part);
        prop_assert_eq!(project_block_diagonal(&once, &part), once);

        let a = random_correlation(&mut r, c).into_values();
        let t = random_correlation(&mut r, c).into_values();
        let single = WeightMask::block(LabelPartition::single(c), 1.3, 0.0).unwrap();
        prop_assert_eq!(block_objective(&a, &t, &single).unwrap(), full_objective(&a, &t, &single).unwrap());
        let blocky = WeightMask::block(part.clone(), 1.0, 0.5).unwrap();
        prop_assert!(block_objective(&a, &t, &blocky).unwrap() >= 0.0);
        prop_assert!(full_objective(&a, &t, &blocky).unwrap() >= 0.0);
        // zero exactly when the in-block residual vanishes
        let mut fixed = a.clone();
        for cl in part.clusters() {
            for &i in cl {
                for &j in cl {
                    fixed[[i, j]] = t[[i, j]];
                }
            }
        }
        prop_assert_eq!(block_objective(&fixed, &t, &blocky).unwrap(), 0.0);
    }

    #[test]
    fn aggregation_weights_are_convex_and_monotone(seed in any::<u64>(), k in 1usize..8, t in 0usize..20, t0 in 1usize..10) {
        let mut r = rng(seed);
        let parts: Vec<Participant> = (0..k)
            .map(|client| Participant { client, samples: r.random_range(1..400), discrepancy: r.random_range(0.0..2.0) })
            .collect();
        let sched = QualitySchedule::new(5.0, t0).unwrap();
        let w = aggregation_weights(&parts, t, &sched).unwrap();
        let sum: f64 = w.weights().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(w.weights().all(|x| x >= 0.0));
        if t >= t0 && k > 1 {
            let mut worse = parts.clone();
            worse[0].discrepancy += 0.3;
            let w2 = aggregation_weights(&worse, t, &sched).unwrap();
            prop_assert!(w2.per_client[0].w < w.per_client[0].w);
        }
        if t == 0 {
            let fedavg = size_weights(&parts, 0).unwrap();
            prop_assert_eq!(w.weights().collect::<Vec<_>>(), fedavg.weights().collect::<Vec<_>>());
        }
    }

    #[test]
    fn aggregation_ignores_client_order(seed in any::<u64>(), k in 1usize..8) {
        let mut r = rng(seed);
        let thetas: Vec<Array2<f64>> = (0..k).map(|_| uniform(&mut r, 4, 3, -2.0, 2.0)).collect();
        let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let pairs: Vec<(&Array2<f64>, f64)> = thetas.iter().zip(raw.iter().map(|w| w / total)).collect();
        let a = aggregate_parameters(&pairs).unwrap();
        let mut rev = pairs.clone();
        rev.reverse();
        let b = aggregate_parameters(&rev).unwrap();
        prop_assert!(frob(&a, &b) < 1e-12);
        // elementwise oracle
        let mut oracle = Array2::<f64>::zeros((4, 3));
        for (th, w) in &pairs {
            for (o, v) in oracle.iter_mut().zip(th.iter()) {
                *o += w * v;
            }
        }
        prop_assert!(frob(&a, &oracle) < 1e-12);
    }

    #[test]
    fn metrics_are_permutation_invariant(seed in any::<u64>(), n in 2usize..30, c in 1usize..6) {
        let mut r = rng(seed);
        let scores = uniform(&mut r, n, c, 0.0, 1.0);
        let labels = Array2::from_shape_simple_fn((n, c), || r.random::<f64>() < 0.4);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let a = report(&scores, &labels, 0.5).unwrap();
        let b = report(&scores.select(Axis(0), &order), &labels.select(Axis(0), &order), 0.5).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(x));
        }
        prop_assert!(a.op >= 0.0 && a.or_ >= 0.0);
        prop_assert_eq!(a.of1 == 0.0, a.op * a.or_ == 0.0);

        // strictly monotone transform keeps every ranking
        let warped = scores.mapv(|s| (3.0 * s).exp() - 7.0);
        let w = report(&warped, &labels, 0.5).unwrap();
        prop_assert!((w.map - a.map).abs() < 1e-12);
    }

    #[test]
    fn wilcoxon_paths_agree_at_twenty(seed in any::<u64>(), shift in -0.5f64..0.5) {
        let mut r = rng(seed);
        let pairs: Vec<(f64, f64)> = (0..20).map(|_| (r.random_range(0.0..1.0) + shift, r.random_range(0.0..1.0))).collect();
        let exact = wilcoxon_with(&pairs, Some(WilcoxonMethod::Exact)).unwrap();
        let normal = wilcoxon_with(&pairs, Some(WilcoxonMethod::Normal)).unwrap();
        prop_assert!((exact.p_value - normal.p_value).abs() <= 0.02, "{} vs {}", exact.p_value, normal.p_value);
    }
}
