mod common;

use fedharmony_core::clustering::{adjusted_rand_index, spectral_cluster};
use fedharmony_core::datagen::{generate, label_correlation, plant_structure, SyntheticSpec};

fn block_assignment(spec: &SyntheticSpec) -> Vec<usize> {
    let mut a = vec![0; spec.n_labels];
    for (g, b) in spec.blocks().iter().enumerate() {
        for &l in b {
            a[l] = g;
        }
    }
    a
}

#[test]
fn no_leakage_gives_block_diagonal_truth() {
    let spec = SyntheticSpec { cross_block_strength: 0.0, seed: 3, ..SyntheticSpec::default() };
    let (model, truth) = plant_structure(&spec).unwrap();
    let v = truth.values();
    for i in 0..spec.n_labels {
        for j in 0..spec.n_labels {
            if model.block_of[i] != model.block_of[j] {
                assert!(v[[i, j]].abs() < 0.02, "({i},{j}) = {}", v[[i, j]]);
            }
        }
    }
}

#[test]
fn single_block_correlations_are_positive() {
    let spec = SyntheticSpec { n_labels: 8, n_blocks: 1, ..SyntheticSpec::default() };
    let (_, truth) = plant_structure(&spec).unwrap();
    assert!(truth.values().iter().all(|&v| v > 0.0));
}

#[test]
fn planted_blocks_are_recovered() {
    for seed in 0..5 {
        let spec = SyntheticSpec { seed, ..SyntheticSpec::default() };
        let (_, truth) = plant_structure(&spec).unwrap();
        let p = spectral_cluster(&truth, spec.n_blocks, seed).unwrap();
        assert_eq!(adjusted_rand_index(p.assignment(), &block_assignment(&spec)), 1.0);
    }
}

#[test]
fn huge_concentration_gives_uniform_preferences() {
    let spec = SyntheticSpec { dirichlet_gamma: 1e6, seed: 5, ..SyntheticSpec::default() };
    let ds = generate(&spec).unwrap();
    let prefs = ds.block_preferences.unwrap();
    let g = spec.n_blocks as f64;
    assert!(prefs.iter().all(|p| (p - 1.0 / g).abs() < 0.05));
}

#[test]
fn single_client_matches_ground_truth() {
    let spec = SyntheticSpec {
        n_clients: 1,
        min_samples: 30_000,
        max_samples: 30_000,
        seed: 8,
        ..SyntheticSpec::default()
    };
    let ds = generate(&spec).unwrap();
    let r = label_correlation(&ds.clients[0].labels, 1e-8).unwrap();
    let diff = r.values() - ds.ground_truth.values();
    let normalized = diff.iter().map(|d| d * d).sum::<f64>().sqrt() / spec.n_labels as f64;
    assert!(normalized < 0.05, "{normalized}");
}

fn mean_drift(spec: &SyntheticSpec) -> f64 {
    let ds = generate(spec).unwrap();
    let total: f64 = ds
        .clients
        .iter()
        .map(|c| {
            let r = label_correlation(&c.labels, 1e-8).unwrap();
            (r.values() - ds.ground_truth.values()).mapv(|d| d * d).sum().sqrt()
        })
        .sum();
    total / ds.clients.len() as f64
}

#[test]
fn stronger_skew_means_more_drift() {
    for seed in 0..5 {
        let skewed = mean_drift(&SyntheticSpec { dirichlet_gamma: 0.25, seed, ..SyntheticSpec::default() });
        let mild = mean_drift(&SyntheticSpec { dirichlet_gamma: 1.0, seed, ..SyntheticSpec::default() });
        assert!(skewed > mild, "seed {seed}: {skewed} <= {mild}");
    }
}

#[test]
fn global_marginals_are_interior_and_test_is_disjoint() {
    for seed in 0..3 {
        let ds = generate(&SyntheticSpec { seed, ..SyntheticSpec::default() }).unwrap();
        let c = ds.n_labels();
        let mut pos = vec![0.0; c];
        let mut n = 0.0;
        for cl in ds.clients.iter().chain(std::iter::once(&ds.test)) {
            for row in cl.labels.rows() {
                for (p, v) in pos.iter_mut().zip(row) {
                    *p += v;
                }
            }
            n += cl.n_samples() as f64;
        }
        assert!(pos.iter().all(|p| (0.02..=0.98).contains(&(p / n))));
        let mut seen = std::collections::HashSet::new();
        for id in ds.clients.iter().flat_map(|c| &c.instance_ids) {
            assert!(seen.insert(*id));
        }
        assert!(ds.test.instance_ids.iter().all(|id| !seen.contains(id)));
        assert_eq!(generate(&SyntheticSpec { seed, ..SyntheticSpec::default() }).unwrap(), ds);
    }
}
