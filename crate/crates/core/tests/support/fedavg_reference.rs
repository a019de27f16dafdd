//! Stand-alone FedAvg used as an oracle for the pipeline with every
//! ablation flag off. Only the sampling and RNG helpers are shared.

use fedharmony_core::datagen::FederatedDataset;
use fedharmony_core::federation::{client_rng, sample_clients, sampling_rng, FederationConfig, GlobalModel};
use ndarray::Array2;
use rand::seq::SliceRandom;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn sgd_step(theta: &mut Array2<f64>, x: &Array2<f64>, y: &Array2<f64>, rows: &[usize], lr: f64) {
    let (d1, c) = theta.dim();
    let d = d1 - 1;
    let b = rows.len() as f64;
    let mut grad = Array2::<f64>::zeros((d1, c));
    for &i in rows {
        for l in 0..c {
            let mut z = theta[[d, l]];
            for f in 0..d {
                z += x[[i, f]] * theta[[f, l]];
            }
            let g = (sigmoid(z) - y[[i, l]]) / b;
            for f in 0..d {
                grad[[f, l]] += x[[i, f]] * g;
            }
            grad[[d, l]] += g;
        }
    }
    theta.scaled_add(-lr, &grad);
}

/// Global parameters after every round.
pub fn reference_fedavg(ds: &FederatedDataset, cfg: &FederationConfig) -> Vec<Array2<f64>> {
    let mut theta = GlobalModel::init(ds.n_features(), ds.n_labels(), cfg.init_scale, cfg.seed).params;
    let sizes: Vec<usize> = ds.clients.iter().map(|c| c.n_samples()).collect();
    let mut history = Vec::new();
    for t in 0..cfg.rounds {
        let chosen = sample_clients(&sizes, cfg.participation, cfg.sampling, &mut sampling_rng(cfg.seed, t));
        let total: usize = chosen.iter().map(|&k| sizes[k]).sum();
        let mut next = Array2::<f64>::zeros(theta.raw_dim());
        for &k in &chosen {
            let data = &ds.clients[k];
            let mut local = theta.clone();
            let mut rng = client_rng(cfg.seed, k, t);
            let mut order: Vec<usize> = (0..data.n_samples()).collect();
            for _ in 0..cfg.local_epochs {
                order.shuffle(&mut rng);
                for batch in order.chunks(cfg.batch_size) {
                    sgd_step(&mut local, &data.features, &data.labels, batch, cfg.learning_rate);
                }
            }
            next.scaled_add(sizes[k] as f64 / total as f64, &local);
        }
        theta = next;
        history.push(theta.clone());
    }
    history
}
