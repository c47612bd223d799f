#![allow(clippy::needless_range_loop)]

mod common;

use approx::assert_relative_eq;
use cfmnar::cptv::{
    build_mu_prior, compute_gamma, e_step_nmar, fit_nmar, log_posterior_nmar, m_step_nmar,
    BetaPrior,
};
use cfmnar::mixture::{e_step_mar_with_stats, log_posterior_mar, m_step_mar};
use cfmnar::synthetic::{brute_force_posterior, brute_force_user_evidence};
use cfmnar::{
    fit_mar, CptvParams, FitConfig, MixtureParams, MuMode, Observation, RatingDataset,
    Responsibilities,
};
use common::{instance, random_cptv, random_params, rel_diff};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Linear-space joint p(z, observed row) under the MAR model.
fn mar_joint(params: &MixtureParams, row: &[Observation]) -> Vec<f64> {
    (0..params.n_components())
        .map(|z| {
            row.iter().fold(params.theta()[z], |acc, o| {
                acc * params.beta(o.value_index(), o.item, z)
            })
        })
        .collect()
}

/// Joint weight of every (component, missing assignment) for one user,
/// accumulated into per-entry value expectations.
struct Enumeration {
    /// p(z, observed pattern) per component.
    joint: Vec<f64>,
    /// Posterior expected [x_m = v] per (m, v, z), in the parameter layout.
    expected: Vec<f64>,
}

fn enumerate_user(params: &MixtureParams, mu: &[f64], row: &[Observation]) -> Enumeration {
    let (k, nm, nv) = (params.n_components(), params.n_items(), params.n_values());
    let mut fixed = vec![None; nm];
    for o in row {
        fixed[o.item] = Some(o.value_index());
    }
    let missing: Vec<usize> = (0..nm).filter(|&m| fixed[m].is_none()).collect();
    let total_assignments = nv.pow(missing.len() as u32);
    let mut joint = vec![0.0; k];
    let mut expected = vec![0.0; nm * nv * k];
    for z in 0..k {
        for code in 0..total_assignments {
            let mut values = fixed.clone();
            let mut c = code;
            for &m in &missing {
                values[m] = Some(c % nv);
                c /= nv;
            }
            let mut p = params.theta()[z];
            for m in 0..nm {
                let v = values[m].unwrap();
                let seen = if fixed[m].is_some() {
                    mu[v]
                } else {
                    1.0 - mu[v]
                };
                p *= seen * params.beta(v, m, z);
            }
            joint[z] += p;
            for m in 0..nm {
                expected[(m * nv + values[m].unwrap()) * k + z] += p;
            }
        }
    }
    let evidence: f64 = joint.iter().sum();
    expected.iter_mut().for_each(|e| *e /= evidence);
    Enumeration { joint, expected }
}

#[test]
fn mar_e_step_matches_linear_space_computation() {
    for seed in 0..40 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..=4);
        let inst = instance(seed, 30, 6, 4, 2);
        let params = random_params(&mut rng, k, 6, 4);
        let (resp, _, loglik) = e_step_mar_with_stats(&params, &inst.data).unwrap();
        let mut expected_ll = 0.0;
        for user in 0..inst.data.n_users() {
            let joint = mar_joint(&params, inst.data.row(user));
            let total: f64 = joint.iter().sum();
            expected_ll += total.ln();
            for z in 0..k {
                assert_relative_eq!(resp.row(user)[z], joint[z] / total, max_relative = 1e-12);
            }
        }
        assert_relative_eq!(loglik, expected_ll, max_relative = 1e-12);
    }
}

#[test]
fn mar_m_step_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inst = instance(7, 25, 5, 3, 2);
    let (k, nm, nv) = (3, 5, 3);
    let mut q = Vec::new();
    for _ in 0..25 {
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = w.iter().sum();
        q.extend(w.iter().map(|x| x / s));
    }
    let resp = Responsibilities::from_rows(k, q);
    let alpha = vec![1.5, 2.0, 3.0];
    let phi: Vec<f64> = (0..nm * nv * k).map(|i| 1.2 + (i % 4) as f64).collect();
    let params = m_step_mar(&resp, &inst.data, &alpha, &phi).unwrap();

    let phi_at = |v: usize, m: usize, z: usize| phi[(m * nv + v) * k + z];
    let n = inst.data.n_users() as f64;
    let alpha_total: f64 = alpha.iter().sum();
    for z in 0..k {
        let qz: f64 = (0..25).map(|i| resp.row(i)[z]).sum();
        let theta = (alpha[z] - 1.0 + qz) / (alpha_total + n - k as f64);
        assert_relative_eq!(params.theta()[z], theta, max_relative = 1e-12);
        for m in 0..nm {
            let mut counts = vec![0.0; nv];
            let mut rated = 0.0;
            for i in 0..25 {
                if let Some(x) = inst.data.get(i, m) {
                    counts[x as usize - 1] += resp.row(i)[z];
                    rated += resp.row(i)[z];
                }
            }
            let phi_total: f64 = (0..nv).map(|v| phi_at(v, m, z)).sum();
            for v in 0..nv {
                let b = (phi_at(v, m, z) - 1.0 + counts[v]) / (phi_total - nv as f64 + rated);
                assert_relative_eq!(params.beta(v, m, z), b, max_relative = 1e-12);
            }
        }
    }
}

#[test]
fn nmar_e_step_matches_enumeration() {
    for seed in 0..60 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let k = rng.random_range(1..=3);
        let nm = rng.random_range(1..=5);
        let nv = rng.random_range(2..=3);
        let inst = instance(seed, 12, nm, nv as u8, 2);
        let params = random_params(&mut rng, k, nm, nv);
        let cptv = random_cptv(&mut rng, nv);
        let (resp, stats, loglik) = e_step_nmar(&params, &cptv, &inst.data).unwrap();

        let mut expected_ll = 0.0;
        let mut expected_counts = vec![0.0; nm * nv * k];
        for user in 0..inst.data.n_users() {
            let row = inst.data.row(user);
            let e = enumerate_user(&params, cptv.mu(), row);
            let evidence: f64 = e.joint.iter().sum();
            expected_ll += evidence.ln();
            for z in 0..k {
                assert_relative_eq!(
                    resp.row(user)[z],
                    e.joint[z] / evidence,
                    max_relative = 1e-11
                );
            }
            for (acc, x) in expected_counts.iter_mut().zip(&e.expected) {
                *acc += x;
            }
            let brute = brute_force_user_evidence(&params, &cptv, row, nm).unwrap();
            assert!(rel_diff(brute, evidence) < 1e-12);
            let post = brute_force_posterior(&params, &cptv, row, nm).unwrap();
            for z in 0..k {
                assert_relative_eq!(post[z], resp.row(user)[z], max_relative = 1e-11);
            }
        }
        assert_relative_eq!(loglik, expected_ll, max_relative = 1e-12);
        for (a, b) in stats.expected_counts.iter().zip(&expected_counts) {
            assert!((a - b).abs() < 1e-10, "expected counts {a} vs {b}");
        }
    }
}

#[test]
fn gamma_table_evidence_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inst = instance(3, 10, 4, 3, 2);
    let params = random_params(&mut rng, 3, 4, 3);
    let cptv = random_cptv(&mut rng, 3);
    let table = compute_gamma(&params, &cptv, &inst.data).unwrap();
    for user in 0..10 {
        let e = enumerate_user(&params, cptv.mu(), inst.data.row(user));
        let evidence: f64 = e.joint.iter().sum();
        assert_relative_eq!(
            table.log_user_evidence(user, params.theta()),
            evidence.ln(),
            max_relative = 1e-12
        );
    }
}

#[test]
fn learned_mu_update_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (k, nm, nv) = (2, 4, 3);
    let inst = instance(11, 20, nm, nv as u8, k);
    let params = random_params(&mut rng, k, nm, nv);
    let cptv = random_cptv(&mut rng, nv);
    let prior = BetaPrior {
        xi1: vec![3.0, 2.5, 4.0],
        xi0: vec![10.0, 6.0, 2.0],
    };
    let (_, stats, _) = e_step_nmar(&params, &cptv, &inst.data).unwrap();
    let (_, updated) = m_step_nmar(&stats, &params, &cptv, Some(&prior));

    let observed = inst.data.value_counts();
    let mut expected_totals = vec![0.0; nv];
    for user in 0..inst.data.n_users() {
        let e = enumerate_user(&params, cptv.mu(), inst.data.row(user));
        for m in 0..nm {
            for v in 0..nv {
                for z in 0..k {
                    expected_totals[v] += e.expected[(m * nv + v) * k + z];
                }
            }
        }
    }
    for v in 0..nv {
        let mu = (prior.xi1[v] - 1.0 + observed[v] as f64)
            / (prior.xi1[v] + prior.xi0[v] - 2.0 + expected_totals[v]);
        assert_relative_eq!(updated.mu()[v], mu, max_relative = 1e-10);
    }
}

fn permuted(resp: &Responsibilities, perm: &[usize]) -> Vec<f64> {
    let k = resp.n_components();
    (0..resp.n_users())
        .flat_map(|i| (0..k).map(move |z| (i, z)))
        .map(|(i, z)| resp.row(i)[perm[z]])
        .collect()
}

#[test]
fn e_steps_are_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let inst = instance(21, 40, 8, 5, 3);
    let params = random_params(&mut rng, 4, 8, 5);
    let cptv = random_cptv(&mut rng, 5);
    let perm = [2, 0, 3, 1];
    let swapped = params.permute_components(&perm);

    let (a, _, lla) = e_step_mar_with_stats(&params, &inst.data).unwrap();
    let (b, _, llb) = e_step_mar_with_stats(&swapped, &inst.data).unwrap();
    for (x, y) in permuted(&a, &perm).iter().zip(b.as_flat()) {
        assert_relative_eq!(x, y, max_relative = 1e-12);
    }
    assert_relative_eq!(lla, llb, max_relative = 1e-12);

    let (a, _, lla) = e_step_nmar(&params, &cptv, &inst.data).unwrap();
    let (b, _, llb) = e_step_nmar(&swapped, &cptv, &inst.data).unwrap();
    for (x, y) in permuted(&a, &perm).iter().zip(b.as_flat()) {
        assert_relative_eq!(x, y, max_relative = 1e-12);
    }
    assert_relative_eq!(lla, llb, max_relative = 1e-12);
    assert_relative_eq!(
        log_posterior_mar(&params, &inst.data).unwrap(),
        log_posterior_mar(&swapped, &inst.data).unwrap(),
        max_relative = 1e-12
    );
}

#[test]
fn fully_observed_data_has_no_missing_mass() {
    let inst = instance(5, 30, 6, 4, 2);
    let full = inst.truth.to_dataset();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = random_params(&mut rng, 2, 6, 4);
    let cptv = CptvParams::new(vec![0.3; 4]).unwrap();
    let (_, stats, _) = e_step_nmar(&params, &cptv, &full).unwrap();
    assert!(stats.missing_value_mass.iter().all(|&m| m.abs() < 1e-9));
    // constant observation probability shifts the log posterior by N*M*ln(mu)
    let shift = (30 * 6) as f64 * 0.3f64.ln();
    assert_relative_eq!(
        log_posterior_nmar(&params, &cptv, &full).unwrap(),
        log_posterior_mar(&params, &full).unwrap() + shift,
        max_relative = 1e-12
    );
}

fn non_decreasing(initial: f64, trace: &[f64]) -> Result<(), TestCaseError> {
    let mut prev = initial;
    for (i, &lp) in trace.iter().enumerate() {
        prop_assert!(
            lp - prev >= -1e-9 * prev.abs(),
            "iteration {}: {} -> {}",
            i + 1,
            prev,
            lp
        );
        prev = lp;
    }
    Ok(())
}

fn tight(k: usize, seed: u64) -> FitConfig {
    FitConfig {
        max_iters: 60,
        rel_tol: 1e-12,
        ..FitConfig::with_components(k, seed)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mar_em_never_decreases_log_posterior(seed in 0u64..10_000, k in 1usize..5) {
        let inst = instance(seed, 60, 10, 5, 3);
        let fit = fit_mar(&inst.data, &tight(k, seed)).unwrap();
        non_decreasing(fit.initial_log_posterior, &fit.log_posterior_trace)?;
    }

    #[test]
    fn nmar_em_never_decreases_log_posterior(seed in 0u64..10_000, k in 1usize..5, learn in any::<bool>()) {
        let inst = instance(seed, 60, 10, 5, 3);
        let mu = inst.truth.cptv.mu().to_vec();
        let mode = if learn {
            MuMode::Learn(build_mu_prior(&mu, 40.0).unwrap())
        } else {
            MuMode::Fixed(mu)
        };
        let fit = fit_nmar(&inst.data, &tight(k, seed), &mode).unwrap();
        non_decreasing(fit.initial_log_posterior, &fit.log_posterior_trace)?;
        let lp = log_posterior_nmar(&fit.params, fit.cptv.as_ref().unwrap(), &inst.data).unwrap();
        prop_assert!(rel_diff(lp, fit.final_log_posterior()) < 1e-12);
    }

    #[test]
    fn responsibilities_are_distributions(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = instance(seed, 20, 7, 5, 2);
        let params = random_params(&mut rng, 3, 7, 5);
        let cptv = random_cptv(&mut rng, 5);
        let (resp, _, _) = e_step_nmar(&params, &cptv, &inst.data).unwrap();
        for i in 0..resp.n_users() {
            let row = resp.row(i);
            prop_assert!(row.iter().all(|&q| (0.0..=1.0).contains(&q)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn empty_rows_get_the_prior_under_mar() {
    let data = RatingDataset::new(3, 4, 5, vec![Observation::new(0, 1, 2)]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = random_params(&mut rng, 3, 4, 5);
    let (resp, _, _) = e_step_mar_with_stats(&params, &data).unwrap();
    for z in 0..3 {
        assert_relative_eq!(resp.row(2)[z], params.theta()[z], max_relative = 1e-12);
    }
}
