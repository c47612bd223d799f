//! Bayesian multinomial mixture over rating vectors, fitted by MAP-EM
//! under the missing-at-random assumption.
//!
//! Each user belongs to one of `K` latent components; given the component,
//! ratings of different items are independent categorical draws. Both the
//! mixing weights and every per-(item, component) rating distribution carry
//! Dirichlet priors. Unobserved ratings are simply dropped from the
//! likelihood, which is only correct when the missingness ignores the
//! rating value.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cptv::{CptvParams, MissingMassDiagnostic};
use crate::data::RatingDataset;
use crate::error::{Error, Result};
use crate::numeric::{ln_dirichlet_pdf, normalize_log_weights, sample_symmetric_dirichlet};

/// Default Dirichlet parameter for the mixing weights.
pub const DEFAULT_ALPHA: f64 = 2.0;
/// Default Dirichlet parameter for every rating distribution.
pub const DEFAULT_PHI: f64 = 2.0;
pub const DEFAULT_MAX_ITERS: usize = 1000;
pub const DEFAULT_REL_TOL: f64 = 1e-5;

/// Users per work unit. Fixed so that reductions do not depend on the
/// number of worker threads.
pub(crate) const USER_CHUNK: usize = 256;

const SIMPLEX_TOL: f64 = 1e-10;

/// Mixture parameters and their prior settings.
///
/// Rating distributions are stored item-major: the probability of value
/// index `v` (rating `v + 1`) for item `m` under component `z` lives at
/// `(m * V + v) * K + z`, so all components for one (item, value) pair are
/// contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    n_components: usize,
    n_items: usize,
    n_values: usize,
    theta: Vec<f64>,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    phi: Vec<f64>,
}

impl MixtureParams {
    /// Builds parameters from mixing weights and a `beta(v, m, z)` function
    /// (zero-based value index), with symmetric default priors.
    pub fn new(
        theta: Vec<f64>,
        n_items: usize,
        n_values: usize,
        beta: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let k = theta.len();
        let mut flat = vec![0.0; n_items * n_values * k];
        for m in 0..n_items {
            for v in 0..n_values {
                for z in 0..k {
                    flat[(m * n_values + v) * k + z] = beta(v, m, z);
                }
            }
        }
        Self::from_flat(
            theta,
            n_items,
            n_values,
            flat,
            vec![DEFAULT_ALPHA; k],
            vec![DEFAULT_PHI; n_items * n_values * k],
        )
    }

    /// Builds parameters from flat arrays in the internal layout and checks
    /// every invariant.
    pub fn from_flat(
        theta: Vec<f64>,
        n_items: usize,
        n_values: usize,
        beta: Vec<f64>,
        alpha: Vec<f64>,
        phi: Vec<f64>,
    ) -> Result<Self> {
        let k = theta.len();
        let p = Self::from_flat_unchecked(theta, n_items, n_values, beta, alpha, phi);
        if k == 0 || n_values == 0 {
            return Err(Error::Config(
                "need at least one component and one value".into(),
            ));
        }
        if p.beta.len() != n_items * n_values * k
            || p.alpha.len() != k
            || p.phi.len() != p.beta.len()
        {
            return Err(Error::Config(
                "parameter array lengths do not match dims".into(),
            ));
        }
        p.check_invariants()?;
        Ok(p)
    }

    pub(crate) fn from_flat_unchecked(
        theta: Vec<f64>,
        n_items: usize,
        n_values: usize,
        beta: Vec<f64>,
        alpha: Vec<f64>,
        phi: Vec<f64>,
    ) -> Self {
        Self {
            n_components: theta.len(),
            n_items,
            n_values,
            theta,
            beta,
            alpha,
            phi,
        }
    }

    /// Replaces the prior settings, keeping the point estimate.
    pub fn with_priors(mut self, alpha: Vec<f64>, phi: Vec<f64>) -> Result<Self> {
        if alpha.len() != self.n_components || phi.len() != self.beta.len() {
            return Err(Error::Config(
                "prior array lengths do not match dims".into(),
            ));
        }
        self.alpha = alpha;
        self.phi = phi;
        self.check_invariants()?;
        Ok(self)
    }

    pub fn check_invariants(&self) -> Result<()> {
        let sum: f64 = self.theta.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL || self.theta.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::Validation("theta is not a positive simplex".into()));
        }
        for m in 0..self.n_items {
            for z in 0..self.n_components {
                let col = self.beta_column(m, z);
                let s: f64 = col.iter().sum();
                if (s - 1.0).abs() > SIMPLEX_TOL || col.iter().any(|&b| !(b > 0.0)) {
                    return Err(Error::Validation(format!(
                        "rating distribution for item {m}, component {z} is not a positive simplex"
                    )));
                }
            }
        }
        if self.alpha.iter().any(|&a| !(a > 1.0)) {
            return Err(Error::Config("every alpha must exceed 1".into()));
        }
        if self.phi.iter().any(|&p| !(p > 1.0)) {
            return Err(Error::Config("every phi must exceed 1".into()));
        }
        Ok(())
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_values(&self) -> usize {
        self.n_values
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Flat rating distributions in the internal layout.
    pub fn beta_flat(&self) -> &[f64] {
        &self.beta
    }

    pub fn phi_flat(&self) -> &[f64] {
        &self.phi
    }

    #[inline]
    pub(crate) fn index(&self, v: usize, m: usize, z: usize) -> usize {
        (m * self.n_values + v) * self.n_components + z
    }

    /// Probability that item `m` receives value index `v` under component `z`.
    #[inline]
    pub fn beta(&self, v: usize, m: usize, z: usize) -> f64 {
        self.beta[self.index(v, m, z)]
    }

    pub fn phi(&self, v: usize, m: usize, z: usize) -> f64 {
        self.phi[self.index(v, m, z)]
    }

    /// Rating distribution of item `m` under component `z`.
    pub fn beta_column(&self, m: usize, z: usize) -> Vec<f64> {
        (0..self.n_values).map(|v| self.beta(v, m, z)).collect()
    }

    fn phi_column(&self, m: usize, z: usize) -> Vec<f64> {
        (0..self.n_values).map(|v| self.phi(v, m, z)).collect()
    }

    pub fn dims_match(&self, data: &RatingDataset) -> bool {
        self.n_items == data.n_items() && self.n_values == data.n_values() as usize
    }

    pub(crate) fn ensure_dims(&self, data: &RatingDataset) -> Result<()> {
        if self.dims_match(data) {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "model has {} items and {} values, data has {} items and {} values",
                self.n_items,
                self.n_values,
                data.n_items(),
                data.n_values()
            )))
        }
    }

    /// Log Dirichlet prior density of the current point estimate.
    pub fn log_prior(&self) -> f64 {
        let mut out = ln_dirichlet_pdf(&self.theta, &self.alpha);
        for m in 0..self.n_items {
            for z in 0..self.n_components {
                out += ln_dirichlet_pdf(&self.beta_column(m, z), &self.phi_column(m, z));
            }
        }
        out
    }

    pub(crate) fn ln_theta(&self) -> Vec<f64> {
        self.theta.iter().map(|t| t.ln()).collect()
    }

    pub(crate) fn ln_beta(&self) -> Vec<f64> {
        self.beta.iter().map(|b| b.ln()).collect()
    }

    /// Relabels components so that new component `j` is old component `perm[j]`.
    pub fn permute_components(&self, perm: &[usize]) -> MixtureParams {
        assert_eq!(perm.len(), self.n_components);
        let k = self.n_components;
        let theta = perm.iter().map(|&p| self.theta[p]).collect();
        let alpha = perm.iter().map(|&p| self.alpha[p]).collect();
        let mut beta = vec![0.0; self.beta.len()];
        let mut phi = vec![0.0; self.phi.len()];
        for row in 0..self.n_items * self.n_values {
            for (j, &p) in perm.iter().enumerate() {
                beta[row * k + j] = self.beta[row * k + p];
                phi[row * k + j] = self.phi[row * k + p];
            }
        }
        Self::from_flat_unchecked(theta, self.n_items, self.n_values, beta, alpha, phi)
    }
}

/// Per-user posterior over components, one simplex row per user.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    n_components: usize,
    q: Vec<f64>,
}

impl Responsibilities {
    pub fn from_rows(n_components: usize, q: Vec<f64>) -> Self {
        assert_eq!(q.len() % n_components.max(1), 0);
        Self { n_components, q }
    }

    pub fn n_users(&self) -> usize {
        self.q.len() / self.n_components
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn row(&self, user: usize) -> &[f64] {
        &self.q[user * self.n_components..(user + 1) * self.n_components]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.q
    }
}

/// EM run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub n_components: usize,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
    pub alpha: f64,
    pub phi: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_components: 1,
            max_iters: DEFAULT_MAX_ITERS,
            rel_tol: DEFAULT_REL_TOL,
            seed: 0,
            alpha: DEFAULT_ALPHA,
            phi: DEFAULT_PHI,
        }
    }
}

impl FitConfig {
    pub fn with_components(n_components: usize, seed: u64) -> Self {
        Self {
            n_components,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_components == 0 {
            return Err(Error::Config("need at least one mixture component".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::Config("rel_tol must be positive".into()));
        }
        if !(self.alpha > 1.0) || !(self.phi > 1.0) {
            return Err(Error::Config("alpha and phi must exceed 1".into()));
        }
        Ok(())
    }
}

/// Outcome of an EM fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: MixtureParams,
    /// Present for fits of the combined mixture / CPT-v model.
    pub cptv: Option<CptvParams>,
    /// Log posterior of the initial parameters.
    pub initial_log_posterior: f64,
    /// Log posterior after each M-step.
    pub log_posterior_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Responsibilities under the final parameters.
    pub responsibilities: Responsibilities,
    pub missing_mass: Option<MissingMassDiagnostic>,
}

impl FitResult {
    pub fn final_log_posterior(&self) -> f64 {
        self.log_posterior_trace
            .last()
            .copied()
            .unwrap_or(self.initial_log_posterior)
    }
}

/// Samples starting parameters from the symmetric Dirichlet priors.
pub fn init_params(
    n_components: usize,
    n_items: usize,
    n_values: usize,
    alpha: f64,
    phi: f64,
    seed: u64,
) -> Result<MixtureParams> {
    if n_components == 0 || n_values == 0 {
        return Err(Error::Config("K and V must be at least 1".into()));
    }
    if !(alpha > 1.0) || !(phi > 1.0) {
        return Err(Error::Config(format!(
            "alpha ({alpha}) and phi ({phi}) must exceed 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = sample_symmetric_dirichlet(&mut rng, alpha, n_components);
    let k = n_components;
    let mut beta = vec![0.0; n_items * n_values * k];
    for m in 0..n_items {
        for z in 0..k {
            let col = sample_symmetric_dirichlet(&mut rng, phi, n_values);
            for (v, b) in col.into_iter().enumerate() {
                beta[(m * n_values + v) * k + z] = b;
            }
        }
    }
    Ok(MixtureParams::from_flat_unchecked(
        theta,
        n_items,
        n_values,
        beta,
        vec![alpha; k],
        vec![phi; n_items * n_values * k],
    ))
}

/// Expected sufficient statistics of the MAR model.
#[derive(Debug, Clone, PartialEq)]
pub struct MarStats {
    /// Σ_i q_zi, per component.
    pub q_sum: Vec<f64>,
    /// Σ_i q_zi [x_im = v] in the parameter layout.
    pub counts: Vec<f64>,
}

impl MarStats {
    fn zeros(k: usize, m: usize, v: usize) -> Self {
        Self {
            q_sum: vec![0.0; k],
            counts: vec![0.0; k * m * v],
        }
    }

    fn merge(&mut self, other: &Self) {
        for (a, b) in self.q_sum.iter_mut().zip(&other.q_sum) {
            *a += b;
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

pub(crate) fn user_chunks(n_users: usize) -> Vec<Range<usize>> {
    (0..n_users)
        .step_by(USER_CHUNK)
        .map(|s| s..(s + USER_CHUNK).min(n_users))
        .collect()
}

/// Unnormalised log posterior weights of each component for one user.
pub(crate) fn mar_log_weights(
    ln_theta: &[f64],
    ln_beta: &[f64],
    n_values: usize,
    row: &[crate::data::Observation],
    out: &mut [f64],
) {
    let k = ln_theta.len();
    out.copy_from_slice(ln_theta);
    for o in row {
        let base = (o.item * n_values + o.value_index()) * k;
        for (w, lb) in out.iter_mut().zip(&ln_beta[base..base + k]) {
            *w += lb;
        }
    }
}

/// E-step together with its sufficient statistics and the data term of
/// the log posterior.
pub fn e_step_mar_with_stats(
    params: &MixtureParams,
    data: &RatingDataset,
) -> Result<(Responsibilities, MarStats, f64)> {
    params.ensure_dims(data)?;
    let (k, nm, nv) = (params.n_components, params.n_items, params.n_values);
    let ln_theta = params.ln_theta();
    let ln_beta = params.ln_beta();

    let parts: Vec<(Vec<f64>, MarStats, f64)> = user_chunks(data.n_users())
        .into_par_iter()
        .map(|range| {
            let mut q = vec![0.0; range.len() * k];
            let mut stats = MarStats::zeros(k, nm, nv);
            let mut loglik = 0.0;
            for (slot, user) in range.enumerate() {
                let row = data.row(user);
                let w = &mut q[slot * k..(slot + 1) * k];
                mar_log_weights(&ln_theta, &ln_beta, nv, row, w);
                loglik += normalize_log_weights(w);
                for (acc, &qz) in stats.q_sum.iter_mut().zip(w.iter()) {
                    *acc += qz;
                }
                for o in row {
                    let base = (o.item * nv + o.value_index()) * k;
                    for (acc, &qz) in stats.counts[base..base + k].iter_mut().zip(w.iter()) {
                        *acc += qz;
                    }
                }
            }
            (q, stats, loglik)
        })
        .collect();

    let mut q = Vec::with_capacity(data.n_users() * k);
    let mut stats = MarStats::zeros(k, nm, nv);
    let mut loglik = 0.0;
    for (part_q, part_stats, part_ll) in &parts {
        q.extend_from_slice(part_q);
        stats.merge(part_stats);
        loglik += part_ll;
    }
    Ok((Responsibilities::from_rows(k, q), stats, loglik))
}

/// Posterior over components for every user given the current parameters.
pub fn e_step_mar(params: &MixtureParams, data: &RatingDataset) -> Result<Responsibilities> {
    e_step_mar_with_stats(params, data).map(|(q, _, _)| q)
}

/// Accumulates MAR sufficient statistics from given responsibilities.
pub fn mar_stats(resp: &Responsibilities, data: &RatingDataset) -> Result<MarStats> {
    if resp.n_users() != data.n_users() {
        return Err(Error::Validation(format!(
            "responsibilities cover {} users, data has {}",
            resp.n_users(),
            data.n_users()
        )));
    }
    let (k, nm, nv) = (resp.n_components, data.n_items(), data.n_values() as usize);
    let mut stats = MarStats::zeros(k, nm, nv);
    for user in 0..data.n_users() {
        let q = resp.row(user);
        for (acc, &qz) in stats.q_sum.iter_mut().zip(q) {
            *acc += qz;
        }
        for o in data.row(user) {
            let base = (o.item * nv + o.value_index()) * k;
            for (acc, &qz) in stats.counts[base..base + k].iter_mut().zip(q) {
                *acc += qz;
            }
        }
    }
    Ok(stats)
}

/// MAP update of the mixing weights.
pub(crate) fn update_theta(alpha: &[f64], q_sum: &[f64]) -> Vec<f64> {
    let k = alpha.len() as f64;
    let denom: f64 = alpha.iter().zip(q_sum).map(|(a, q)| a + q).sum::<f64>() - k;
    alpha
        .iter()
        .zip(q_sum)
        .map(|(a, q)| (a - 1.0 + q) / denom)
        .collect()
}

/// MAP update of every rating distribution from expected value counts.
///
/// `counts` is in the parameter layout; the denominator is the sum of the
/// numerators for each (item, component) column.
pub(crate) fn update_beta(
    phi: &[f64],
    counts: &[f64],
    k: usize,
    n_items: usize,
    n_values: usize,
) -> Vec<f64> {
    let mut beta = vec![0.0; counts.len()];
    for m in 0..n_items {
        for z in 0..k {
            let mut denom = 0.0;
            for v in 0..n_values {
                let idx = (m * n_values + v) * k + z;
                let num = phi[idx] - 1.0 + counts[idx];
                beta[idx] = num;
                denom += num;
            }
            for v in 0..n_values {
                beta[(m * n_values + v) * k + z] /= denom;
            }
        }
    }
    beta
}

pub(crate) fn m_step_from_stats(
    stats: &MarStats,
    n_items: usize,
    n_values: usize,
    alpha: &[f64],
    phi: &[f64],
) -> MixtureParams {
    let k = alpha.len();
    let theta = update_theta(alpha, &stats.q_sum);
    let beta = update_beta(phi, &stats.counts, k, n_items, n_values);
    MixtureParams::from_flat_unchecked(theta, n_items, n_values, beta, alpha.to_vec(), phi.to_vec())
}

/// MAP M-step of the MAR model.
pub fn m_step_mar(
    resp: &Responsibilities,
    data: &RatingDataset,
    alpha: &[f64],
    phi: &[f64],
) -> Result<MixtureParams> {
    let (k, nm, nv) = (resp.n_components, data.n_items(), data.n_values() as usize);
    if alpha.len() != k || phi.len() != k * nm * nv {
        return Err(Error::Config(
            "prior array lengths do not match dims".into(),
        ));
    }
    let stats = mar_stats(resp, data)?;
    Ok(m_step_from_stats(&stats, nm, nv, alpha, phi))
}

/// Log posterior of the MAR model: per-user log mixture likelihood of the
/// observed ratings plus the log Dirichlet priors.
pub fn log_posterior_mar(params: &MixtureParams, data: &RatingDataset) -> Result<f64> {
    let (_, _, loglik) = e_step_mar_with_stats(params, data)?;
    Ok(loglik + params.log_prior())
}

pub(crate) struct EmOutcome<S, T> {
    pub state: S,
    pub stats: T,
    pub resp: Responsibilities,
    pub initial: f64,
    pub trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Generic EM driver. `e_step` returns responsibilities, sufficient
/// statistics and the log posterior of the state it was given.
pub(crate) fn run_em<S, T>(
    init: S,
    config: &FitConfig,
    e_step: impl Fn(&S) -> Result<(Responsibilities, T, f64)>,
    m_step: impl Fn(&S, &T) -> S,
) -> Result<EmOutcome<S, T>> {
    let mut state = init;
    let (mut resp, mut stats, initial) = e_step(&state)?;
    if !initial.is_finite() {
        return Err(Error::Numerical(format!(
            "initial log posterior is {initial}"
        )));
    }
    let mut prev = initial;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        state = m_step(&state, &stats);
        let (q, s, lp) = e_step(&state)?;
        iterations += 1;
        if !lp.is_finite() {
            return Err(Error::Numerical(format!(
                "log posterior became {lp} at iteration {iterations}"
            )));
        }
        resp = q;
        stats = s;
        trace.push(lp);
        if (lp - prev).abs() / lp.abs() < config.rel_tol {
            converged = true;
            break;
        }
        prev = lp;
    }
    Ok(EmOutcome {
        state,
        stats,
        resp,
        initial,
        trace,
        converged,
        iterations,
    })
}

/// Fits the MAR mixture by MAP-EM from a prior draw.
pub fn fit_mar(data: &RatingDataset, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let nv = data.n_values() as usize;
    let init = init_params(
        config.n_components,
        data.n_items(),
        nv,
        config.alpha,
        config.phi,
        config.seed,
    )?;
    let out = run_em(
        init,
        config,
        |p| {
            let (q, stats, ll) = e_step_mar_with_stats(p, data)?;
            Ok((q, stats, ll + p.log_prior()))
        },
        |p, stats| m_step_from_stats(stats, p.n_items, p.n_values, &p.alpha, &p.phi),
    )?;
    Ok(FitResult {
        params: out.state,
        cptv: None,
        initial_log_posterior: out.initial,
        log_posterior_trace: out.trace,
        converged: out.converged,
        iterations: out.iterations,
        responsibilities: out.resp,
        missing_mass: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Observation;
    use approx::assert_relative_eq;

    fn two_component_params() -> MixtureParams {
        let cols = [[0.9, 0.1], [0.1, 0.9]];
        MixtureParams::new(vec![0.5, 0.5], 1, 2, |v, _m, z| cols[z][v]).unwrap()
    }

    #[test]
    fn init_single_component_theta_is_one() {
        let p = init_params(1, 4, 5, 2.0, 2.0, 99).unwrap();
        assert_eq!(p.theta(), &[1.0]);
    }

    #[test]
    fn init_is_deterministic_and_normalised() {
        let a = init_params(3, 2, 5, 2.0, 2.0, 42).unwrap();
        let b = init_params(3, 2, 5, 2.0, 2.0, 42).unwrap();
        assert_eq!(a, b);
        for m in 0..2 {
            for z in 0..3 {
                assert_relative_eq!(
                    a.beta_column(m, z).iter().sum::<f64>(),
                    1.0,
                    epsilon = 1e-10
                );
            }
        }
        a.check_invariants().unwrap();
    }

    #[test]
    fn init_rejects_weak_priors() {
        assert!(matches!(
            init_params(2, 2, 5, 1.0, 2.0, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            init_params(2, 2, 5, 2.0, 0.5, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn e_step_hand_example() {
        let p = two_component_params();
        let data = RatingDataset::new(1, 1, 2, vec![Observation::new(0, 0, 1)]).unwrap();
        let q = e_step_mar(&p, &data).unwrap();
        assert_relative_eq!(q.row(0)[0], 0.9, epsilon = 1e-12);
        assert_relative_eq!(q.row(0)[1], 0.1, epsilon = 1e-12);
    }

    #[test]
    fn e_step_empty_user_gets_prior() {
        let p = MixtureParams::new(vec![0.3, 0.7], 1, 2, |_, _, _| 0.5).unwrap();
        let data = RatingDataset::empty(2, 1, 2);
        let q = e_step_mar(&p, &data).unwrap();
        assert_relative_eq!(q.row(1)[0], 0.3, epsilon = 1e-15);
        assert_relative_eq!(q.row(1)[1], 0.7, epsilon = 1e-15);
    }

    #[test]
    fn e_step_single_component() {
        let p = init_params(1, 3, 5, 2.0, 2.0, 1).unwrap();
        let data = RatingDataset::new(2, 3, 5, vec![Observation::new(0, 2, 4)]).unwrap();
        let q = e_step_mar(&p, &data).unwrap();
        assert_eq!(q.as_flat(), &[1.0, 1.0]);
    }

    #[test]
    fn m_step_prior_only() {
        let data = RatingDataset::empty(0, 2, 5);
        let resp = Responsibilities::from_rows(3, vec![]);
        let p = m_step_mar(&resp, &data, &[2.0; 3], &vec![2.0; 30]).unwrap();
        for &t in p.theta() {
            assert_relative_eq!(t, 1.0 / 3.0, epsilon = 1e-15);
        }
        for m in 0..2 {
            for z in 0..3 {
                for b in p.beta_column(m, z) {
                    assert_relative_eq!(b, 0.2, epsilon = 1e-15);
                }
            }
        }
    }

    #[test]
    fn m_step_single_observation() {
        let data = RatingDataset::new(1, 1, 5, vec![Observation::new(0, 0, 3)]).unwrap();
        let resp = Responsibilities::from_rows(1, vec![1.0]);
        let p = m_step_mar(&resp, &data, &[2.0], &[2.0; 5]).unwrap();
        let col = p.beta_column(0, 0);
        for (v, b) in col.iter().enumerate() {
            let expected = if v == 2 { 2.0 / 6.0 } else { 1.0 / 6.0 };
            assert_relative_eq!(*b, expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn log_posterior_single_user_uniform() {
        let p = MixtureParams::new(vec![1.0], 1, 5, |_, _, _| 0.2).unwrap();
        let data = RatingDataset::new(1, 1, 5, vec![Observation::new(0, 0, 4)]).unwrap();
        let lp = log_posterior_mar(&p, &data).unwrap();
        // Dirichlet(2) on a 1-simplex is a point mass with log density ln Γ(2) - ln Γ(2) = 0;
        // Dirichlet(2,...,2) over 5 values at the uniform point: ln Γ(10) + 5 ln(0.2).
        let prior_beta = statrs::function::gamma::ln_gamma(10.0) + 5.0 * 0.2f64.ln();
        assert_relative_eq!(lp, 0.2f64.ln() + prior_beta, epsilon = 1e-12);
    }

    #[test]
    fn duplicated_users_double_data_term() {
        let p = init_params(2, 3, 5, 2.0, 2.0, 5).unwrap();
        let data = RatingDataset::new(
            2,
            3,
            5,
            vec![
                Observation::new(0, 0, 4),
                Observation::new(0, 2, 1),
                Observation::new(1, 1, 5),
            ],
        )
        .unwrap();
        let doubled = data.concat_users(&data).unwrap();
        let single = log_posterior_mar(&p, &data).unwrap() - p.log_prior();
        let double = log_posterior_mar(&p, &doubled).unwrap() - p.log_prior();
        assert_relative_eq!(double, 2.0 * single, max_relative = 1e-14);
    }

    #[test]
    fn fit_single_component_converges_fast() {
        let data = RatingDataset::new(
            3,
            2,
            5,
            vec![
                Observation::new(0, 0, 4),
                Observation::new(1, 0, 5),
                Observation::new(2, 1, 1),
            ],
        )
        .unwrap();
        let fit = fit_mar(&data, &FitConfig::with_components(1, 3)).unwrap();
        assert!(fit.converged);
        assert!(fit.iterations <= 2, "took {} iterations", fit.iterations);
    }

    #[test]
    fn permuting_components_permutes_responsibilities() {
        let p = init_params(3, 4, 5, 2.0, 2.0, 11).unwrap();
        let data = RatingDataset::new(
            2,
            4,
            5,
            vec![
                Observation::new(0, 0, 4),
                Observation::new(0, 3, 2),
                Observation::new(1, 1, 5),
            ],
        )
        .unwrap();
        let perm = [2, 0, 1];
        let q = e_step_mar(&p, &data).unwrap();
        let qp = e_step_mar(&p.permute_components(&perm), &data).unwrap();
        for u in 0..2 {
            for (j, &src) in perm.iter().enumerate() {
                assert_relative_eq!(qp.row(u)[j], q.row(u)[src], epsilon = 1e-15);
            }
        }
    }
}
