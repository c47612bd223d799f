#![allow(dead_code)]

use cfmnar::synthetic::{
    apply_cptv_missingness, sample_ground_truth, GeneratorConfig, GroundTruth,
};
use cfmnar::{CptvParams, MixtureParams, RatingDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub truth: GroundTruth,
    pub data: RatingDataset,
}

/// Random observation probabilities bounded away from 0 and 1.
pub fn random_mu(rng: &mut ChaCha8Rng, n_values: usize) -> Vec<f64> {
    (0..n_values)
        .map(|_| rng.random_range(0.05..0.95))
        .collect()
}

/// Ground truth plus a CPT-v observed sample, all derived from `seed`.
pub fn instance(seed: u64, n_users: usize, n_items: usize, n_values: u8, k: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = GeneratorConfig {
        n_users,
        n_items,
        n_values,
        n_components: k,
        theta_concentration: rng.random_range(1.0..5.0),
        beta_concentration: rng.random_range(0.3..2.0),
        mu: random_mu(&mut rng, n_values as usize),
    };
    let truth = sample_ground_truth(&config, seed).unwrap();
    let data = apply_cptv_missingness(&truth, seed);
    Instance { truth, data }
}

/// Parameters drawn independently of any data, for oracle comparisons.
pub fn random_params(
    rng: &mut ChaCha8Rng,
    k: usize,
    n_items: usize,
    n_values: usize,
) -> MixtureParams {
    let mut theta: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    let t: f64 = theta.iter().sum();
    theta.iter_mut().for_each(|x| *x /= t);
    let mut beta = vec![0.0; n_items * n_values * k];
    for m in 0..n_items {
        for z in 0..k {
            let col: Vec<f64> = (0..n_values).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = col.iter().sum();
            for v in 0..n_values {
                beta[(m * n_values + v) * k + z] = col[v] / s;
            }
        }
    }
    MixtureParams::new(theta, n_items, n_values, |v, m, z| {
        beta[(m * n_values + v) * k + z]
    })
    .unwrap()
}

pub fn random_cptv(rng: &mut ChaCha8Rng, n_values: usize) -> CptvParams {
    CptvParams::new(random_mu(rng, n_values)).unwrap()
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
