//! CPT-v missing-data model combined with the multinomial mixture.
//!
//! Every (user, item) entry is observed independently with probability
//! `mu[v]`, where `v` is the entry's (possibly unobserved) rating. Summing
//! the missing rating out leaves one factor per entry:
//!
//! * observed with value `x`: `mu[x] * beta[x][m][z]`
//! * unobserved: `sum_v (1 - mu[v]) * beta[v][m][z]`
//!
//! The unobserved factor does not depend on the user, so it is computed
//! once per (item, component) and each user only pays for their observed
//! entries. Expected value counts for unobserved entries are likewise
//! accumulated as per-(item, component) totals rather than per user.

use rayon::prelude::*;

use crate::data::RatingDataset;
use crate::error::{Error, Result};
use crate::mixture::{
    init_params, run_em, update_beta, update_theta, user_chunks, FitConfig, FitResult,
    MixtureParams, Responsibilities,
};
use crate::numeric::{ln_beta_pdf, log_sum_exp, normalize_log_weights};

/// Observation probabilities are kept inside `[MU_CLAMP, 1 - MU_CLAMP]`.
pub const MU_CLAMP: f64 = 1e-12;

/// Observation probabilities per rating value (1..=5) estimated from
/// held-out random-sample ratings of a music service.
pub const PAPER_YAHOO_MU: [f64; 5] = [0.014, 0.011, 0.027, 0.063, 0.225];

/// Fraction above which one value absorbing the missing mass counts as a
/// boundary solution.
pub const BOUNDARY_FRACTION: f64 = 0.9;

pub fn clamp_mu(mu: f64) -> f64 {
    mu.clamp(MU_CLAMP, 1.0 - MU_CLAMP)
}

/// Beta prior on each observation probability. `xi1[v]` weighs observing,
/// `xi0[v]` weighs not observing.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaPrior {
    pub xi1: Vec<f64>,
    pub xi0: Vec<f64>,
}

impl BetaPrior {
    pub fn validate(&self, n_values: usize) -> Result<()> {
        if self.xi1.len() != n_values || self.xi0.len() != n_values {
            return Err(Error::Config(format!(
                "Beta prior has {} / {} entries, expected {n_values}",
                self.xi1.len(),
                self.xi0.len()
            )));
        }
        for (v, (&a, &b)) in self.xi1.iter().zip(&self.xi0).enumerate() {
            if !(a > 1.0) || !(b > 1.0) {
                return Err(Error::Config(format!(
                    "Beta prior for value {} is ({a}, {b}); both parameters must exceed 1",
                    v + 1
                )));
            }
        }
        Ok(())
    }

    /// Mode of each Beta prior.
    pub fn mode(&self) -> Vec<f64> {
        self.xi1
            .iter()
            .zip(&self.xi0)
            .map(|(a, b)| clamp_mu((a - 1.0) / (a + b - 2.0)))
            .collect()
    }
}

/// Informative prior centred on `mu_hat`: `xi1 = S * mu_hat`, `xi0 = S * (1 - mu_hat)`.
pub fn build_mu_prior(mu_hat: &[f64], strength: f64) -> Result<BetaPrior> {
    if !(strength > 0.0) {
        return Err(Error::Config(format!(
            "prior strength must be positive, got {strength}"
        )));
    }
    let prior = BetaPrior {
        xi1: mu_hat.iter().map(|m| strength * m).collect(),
        xi0: mu_hat.iter().map(|m| strength * (1.0 - m)).collect(),
    };
    prior.validate(mu_hat.len())?;
    Ok(prior)
}

/// Missing-data parameters: observation probability per rating value and,
/// when learned, its Beta prior.
#[derive(Debug, Clone, PartialEq)]
pub struct CptvParams {
    mu: Vec<f64>,
    prior: Option<BetaPrior>,
}

impl CptvParams {
    /// Fixed observation probabilities; each entry must lie in `[0, 1]`.
    pub fn new(mu: Vec<f64>) -> Result<Self> {
        if mu.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config(format!(
                "observation probabilities {mu:?} not in [0, 1]"
            )));
        }
        Ok(Self { mu, prior: None })
    }

    pub fn with_prior(mu: Vec<f64>, prior: BetaPrior) -> Result<Self> {
        prior.validate(mu.len())?;
        let mut p = Self::new(mu)?;
        p.prior = Some(prior);
        Ok(p)
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn prior(&self) -> Option<&BetaPrior> {
        self.prior.as_ref()
    }

    pub fn n_values(&self) -> usize {
        self.mu.len()
    }

    /// Log Beta prior density of `mu`; zero when `mu` is fixed.
    pub fn log_prior(&self) -> f64 {
        match &self.prior {
            None => 0.0,
            Some(p) => self
                .mu
                .iter()
                .zip(p.xi1.iter().zip(&p.xi0))
                .map(|(&m, (&a, &b))| ln_beta_pdf(m, a, b))
                .sum(),
        }
    }
}

/// How the observation probabilities are treated during fitting.
#[derive(Debug, Clone, PartialEq)]
pub enum MuMode {
    Fixed(Vec<f64>),
    Learn(BetaPrior),
}

impl MuMode {
    pub fn name(&self) -> &'static str {
        match self {
            MuMode::Fixed(_) => "fixed",
            MuMode::Learn(_) => "learn",
        }
    }
}

/// Per-(user, item, component) entry factors in log space, laid out as
/// `(user * M + item) * K + component`.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaTable {
    n_users: usize,
    n_items: usize,
    n_components: usize,
    log_gamma: Vec<f64>,
}

impl GammaTable {
    pub fn log_gamma(&self, user: usize, item: usize, z: usize) -> f64 {
        self.log_gamma[(user * self.n_items + item) * self.n_components + z]
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    /// `log sum_z theta_z prod_m gamma_mz` for one user.
    pub fn log_user_evidence(&self, user: usize, theta: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.n_components)
            .map(|z| {
                theta[z].ln()
                    + (0..self.n_items)
                        .map(|m| self.log_gamma(user, m, z))
                        .sum::<f64>()
            })
            .collect();
        log_sum_exp(&terms)
    }
}

fn ensure_mu_dims(params: &MixtureParams, cptv: &CptvParams) -> Result<()> {
    if cptv.n_values() != params.n_values() {
        return Err(Error::Validation(format!(
            "model has {} values, missing-data model has {}",
            params.n_values(),
            cptv.n_values()
        )));
    }
    Ok(())
}

/// Dense table of entry factors. Intended for inspection and small
/// instances; fitting never materialises it.
pub fn compute_gamma(
    params: &MixtureParams,
    cptv: &CptvParams,
    data: &RatingDataset,
) -> Result<GammaTable> {
    params.ensure_dims(data)?;
    ensure_mu_dims(params, cptv)?;
    let (k, nm, nv) = (params.n_components(), params.n_items(), params.n_values());
    let mu = cptv.mu();
    let mut log_gamma = vec![0.0; data.n_users() * nm * k];
    for user in 0..data.n_users() {
        let row = data.row(user);
        let mut next = row.iter().peekable();
        for m in 0..nm {
            let observed = match next.peek() {
                Some(o) if o.item == m => next.next().map(|o| o.value_index()),
                _ => None,
            };
            for z in 0..k {
                let g = match observed {
                    Some(x) => mu[x] * params.beta(x, m, z),
                    None => (0..nv).map(|v| (1.0 - mu[v]) * params.beta(v, m, z)).sum(),
                };
                log_gamma[(user * nm + m) * k + z] = g.ln();
            }
        }
    }
    Ok(GammaTable {
        n_users: data.n_users(),
        n_items: nm,
        n_components: k,
        log_gamma,
    })
}

/// Expected sufficient statistics of the combined model.
#[derive(Debug, Clone, PartialEq)]
pub struct NmarStats {
    pub q_sum: Vec<f64>,
    /// Σ_i q_zi [x_im = v] over observed entries, parameter layout.
    pub observed_counts: Vec<f64>,
    /// Σ_i q_zi λ_vmzi / γ_mzi over all entries, parameter layout.
    pub expected_counts: Vec<f64>,
    /// Per value: Σ_i Σ_z q_zi Σ_m r_im λ/γ.
    pub observed_value_totals: Vec<f64>,
    /// Per value: Σ_i Σ_z q_zi Σ_m λ/γ.
    pub expected_value_totals: Vec<f64>,
    /// Per value: expected number of unobserved entries carrying that value.
    pub missing_value_mass: Vec<f64>,
}

/// Precomputed per-iteration quantities shared by all users.
struct EntryFactors {
    /// Σ_m log of the unobserved-entry factor, per component.
    base: Vec<f64>,
    /// log(mu_v beta_vmz) - log(unobserved factor of (m, z)), parameter layout.
    observed_adjust: Vec<f64>,
    /// (1 - mu_v) beta_vmz / unobserved factor, parameter layout.
    missing_share: Vec<f64>,
}

fn entry_factors(params: &MixtureParams, mu: &[f64]) -> EntryFactors {
    let (k, nm, nv) = (params.n_components(), params.n_items(), params.n_values());
    let mut base = vec![0.0; k];
    let mut observed_adjust = vec![0.0; nm * nv * k];
    let mut missing_share = vec![0.0; nm * nv * k];
    for m in 0..nm {
        for z in 0..k {
            let unobserved: f64 = (0..nv).map(|v| (1.0 - mu[v]) * params.beta(v, m, z)).sum();
            let ln_unobserved = unobserved.ln();
            base[z] += ln_unobserved;
            for v in 0..nv {
                let idx = (m * nv + v) * k + z;
                let b = params.beta(v, m, z);
                observed_adjust[idx] = (mu[v] * b).ln() - ln_unobserved;
                missing_share[idx] = (1.0 - mu[v]) * b / unobserved;
            }
        }
    }
    EntryFactors {
        base,
        observed_adjust,
        missing_share,
    }
}

/// Unnormalised log posterior weights of each component for one user
/// under the combined model.
fn nmar_log_weights(
    ln_theta: &[f64],
    factors: &EntryFactors,
    n_values: usize,
    row: &[crate::data::Observation],
    out: &mut [f64],
) {
    let k = ln_theta.len();
    for ((w, lt), b) in out.iter_mut().zip(ln_theta).zip(&factors.base) {
        *w = lt + b;
    }
    for o in row {
        let base = (o.item * n_values + o.value_index()) * k;
        for (w, adj) in out.iter_mut().zip(&factors.observed_adjust[base..base + k]) {
            *w += adj;
        }
    }
}

/// Posterior over components for a single user under the combined model.
pub fn posterior_nmar_row(
    params: &MixtureParams,
    cptv: &CptvParams,
    row: &[crate::data::Observation],
) -> Vec<f64> {
    let factors = entry_factors(params, cptv.mu());
    let mut w = vec![0.0; params.n_components()];
    nmar_log_weights(&params.ln_theta(), &factors, params.n_values(), row, &mut w);
    normalize_log_weights(&mut w);
    w
}

/// E-step of the combined model. Returns responsibilities, expected
/// sufficient statistics and the data term of the log posterior.
pub fn e_step_nmar(
    params: &MixtureParams,
    cptv: &CptvParams,
    data: &RatingDataset,
) -> Result<(Responsibilities, NmarStats, f64)> {
    params.ensure_dims(data)?;
    ensure_mu_dims(params, cptv)?;
    let (k, nm, nv) = (params.n_components(), params.n_items(), params.n_values());
    let ln_theta = params.ln_theta();
    let factors = entry_factors(params, cptv.mu());

    // per chunk: responsibilities, q sums, observed counts, log-likelihood
    #[allow(clippy::type_complexity)]
    let parts: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, f64)> = user_chunks(data.n_users())
        .into_par_iter()
        .map(|range| {
            let mut q = vec![0.0; range.len() * k];
            let mut q_sum = vec![0.0; k];
            let mut observed = vec![0.0; nm * nv * k];
            let mut loglik = 0.0;
            for (slot, user) in range.enumerate() {
                let row = data.row(user);
                let w = &mut q[slot * k..(slot + 1) * k];
                nmar_log_weights(&ln_theta, &factors, nv, row, w);
                loglik += normalize_log_weights(w);
                for (acc, &qz) in q_sum.iter_mut().zip(w.iter()) {
                    *acc += qz;
                }
                for o in row {
                    let base = (o.item * nv + o.value_index()) * k;
                    for (acc, &qz) in observed[base..base + k].iter_mut().zip(w.iter()) {
                        *acc += qz;
                    }
                }
            }
            (q, q_sum, observed, loglik)
        })
        .collect();

    let mut q = Vec::with_capacity(data.n_users() * k);
    let mut q_sum = vec![0.0; k];
    let mut observed_counts = vec![0.0; nm * nv * k];
    let mut loglik = 0.0;
    for (pq, pq_sum, pobs, pll) in &parts {
        q.extend_from_slice(pq);
        for (a, b) in q_sum.iter_mut().zip(pq_sum) {
            *a += b;
        }
        for (a, b) in observed_counts.iter_mut().zip(pobs) {
            *a += b;
        }
        loglik += pll;
    }

    let mut expected_counts = observed_counts.clone();
    let mut observed_value_totals = vec![0.0; nv];
    let mut expected_value_totals = vec![0.0; nv];
    let mut missing_value_mass = vec![0.0; nv];
    for m in 0..nm {
        for z in 0..k {
            let observed_mass: f64 = (0..nv).map(|v| observed_counts[(m * nv + v) * k + z]).sum();
            let unobserved_mass = (q_sum[z] - observed_mass).max(0.0);
            for v in 0..nv {
                let idx = (m * nv + v) * k + z;
                let missing = unobserved_mass * factors.missing_share[idx];
                expected_counts[idx] += missing;
                observed_value_totals[v] += observed_counts[idx];
                expected_value_totals[v] += expected_counts[idx];
                missing_value_mass[v] += missing;
            }
        }
    }

    let stats = NmarStats {
        q_sum,
        observed_counts,
        expected_counts,
        observed_value_totals,
        expected_value_totals,
        missing_value_mass,
    };
    Ok((Responsibilities::from_rows(k, q), stats, loglik))
}

/// M-step of the combined model. Observation probabilities are only
/// updated when `learn` carries a prior.
pub fn m_step_nmar(
    stats: &NmarStats,
    params: &MixtureParams,
    cptv: &CptvParams,
    learn: Option<&BetaPrior>,
) -> (MixtureParams, CptvParams) {
    let (k, nm, nv) = (params.n_components(), params.n_items(), params.n_values());
    let theta = update_theta(params.alpha(), &stats.q_sum);
    let beta = update_beta(params.phi_flat(), &stats.expected_counts, k, nm, nv);
    let mixture = MixtureParams::from_flat_unchecked(
        theta,
        nm,
        nv,
        beta,
        params.alpha().to_vec(),
        params.phi_flat().to_vec(),
    );
    let cptv = match learn {
        None => cptv.clone(),
        Some(prior) => {
            let mu = (0..nv)
                .map(|v| {
                    let num = prior.xi1[v] - 1.0 + stats.observed_value_totals[v];
                    let den = prior.xi0[v] + prior.xi1[v] - 2.0 + stats.expected_value_totals[v];
                    clamp_mu(num / den)
                })
                .collect();
            CptvParams {
                mu,
                prior: Some(prior.clone()),
            }
        }
    };
    (mixture, cptv)
}

/// Log posterior of the combined model: per-user log evidence with the
/// missing ratings summed out, plus Dirichlet priors on the mixture and
/// Beta priors on learned observation probabilities.
pub fn log_posterior_nmar(
    params: &MixtureParams,
    cptv: &CptvParams,
    data: &RatingDataset,
) -> Result<f64> {
    let (_, _, loglik) = e_step_nmar(params, cptv, data)?;
    Ok(loglik + params.log_prior() + cptv.log_prior())
}

/// Share of the expected missing ratings attributed to each value.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingMassDiagnostic {
    /// Normalised per-value fractions (sum to 1 when any entry is missing).
    pub fractions: Vec<f64>,
    /// Rating value (1-based) with the largest share.
    pub dominant_value: u8,
    pub dominant_fraction: f64,
    /// True when one value holds more than [`BOUNDARY_FRACTION`] of the mass.
    pub boundary_solution: bool,
}

impl MissingMassDiagnostic {
    pub fn from_mass(mass: &[f64]) -> Self {
        let total: f64 = mass.iter().sum();
        let fractions: Vec<f64> = if total > 0.0 {
            mass.iter().map(|m| m / total).collect()
        } else {
            vec![0.0; mass.len()]
        };
        let (idx, &dominant_fraction) = fractions
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap_or((0, &0.0));
        Self {
            dominant_value: idx as u8 + 1,
            dominant_fraction,
            boundary_solution: dominant_fraction > BOUNDARY_FRACTION,
            fractions,
        }
    }
}

/// Fits the combined mixture / CPT-v model by MAP-EM.
pub fn fit_nmar(data: &RatingDataset, config: &FitConfig, mu_mode: &MuMode) -> Result<FitResult> {
    config.validate()?;
    let nv = data.n_values() as usize;
    let (cptv, learn) = match mu_mode {
        MuMode::Fixed(mu) => {
            if mu.len() != nv {
                return Err(Error::Config(format!(
                    "fixed mu has {} entries, data has {nv} values",
                    mu.len()
                )));
            }
            if let Some(bad) = mu.iter().find(|m| !(**m > 0.0 && **m < 1.0)) {
                return Err(Error::Config(format!(
                    "fixed mu entries must lie strictly inside (0, 1), got {bad}"
                )));
            }
            (CptvParams::new(mu.clone())?, None)
        }
        MuMode::Learn(prior) => {
            prior.validate(nv)?;
            (
                CptvParams::with_prior(prior.mode(), prior.clone())?,
                Some(prior),
            )
        }
    };
    let mixture = init_params(
        config.n_components,
        data.n_items(),
        nv,
        config.alpha,
        config.phi,
        config.seed,
    )?;

    let out = run_em(
        (mixture, cptv),
        config,
        |(p, c)| {
            let (q, stats, ll) = e_step_nmar(p, c, data)?;
            Ok((q, stats, ll + p.log_prior() + c.log_prior()))
        },
        |(p, c), stats| m_step_nmar(stats, p, c, learn),
    )?;
    let (params, cptv) = out.state;
    Ok(FitResult {
        params,
        cptv: Some(cptv),
        initial_log_posterior: out.initial,
        log_posterior_trace: out.trace,
        converged: out.converged,
        iterations: out.iterations,
        responsibilities: out.resp,
        missing_mass: Some(MissingMassDiagnostic::from_mass(
            &out.stats.missing_value_mass,
        )),
    })
}

/// Result of the held-out observation-probability estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct MuEstimate {
    pub mu_hat: Vec<f64>,
    /// Smoothed value frequencies of the random sample.
    pub value_freq: Vec<f64>,
    /// Joint probability of a value being present and observed.
    pub joint_freq: Vec<f64>,
    /// Per value: the raw ratio exceeded 1 and was clamped.
    pub exceeded_one: Vec<bool>,
}

impl MuEstimate {
    pub fn has_warnings(&self) -> bool {
        self.exceeded_one.iter().any(|&w| w)
    }
}

/// `mu_v = joint_v / freq_v`, clamped to the open unit interval.
pub fn mu_from_frequencies(value_freq: &[f64], joint_freq: &[f64]) -> Result<MuEstimate> {
    if value_freq.len() != joint_freq.len() {
        return Err(Error::Estimation(
            "frequency vectors differ in length".into(),
        ));
    }
    let mut mu_hat = Vec::with_capacity(value_freq.len());
    let mut exceeded_one = Vec::with_capacity(value_freq.len());
    for (v, (&f, &j)) in value_freq.iter().zip(joint_freq).enumerate() {
        if !(f > 0.0) {
            return Err(Error::Estimation(format!(
                "value {} has zero frequency in the random sample",
                v + 1
            )));
        }
        let ratio = j / f;
        exceeded_one.push(ratio > 1.0);
        mu_hat.push(clamp_mu(ratio));
    }
    Ok(MuEstimate {
        mu_hat,
        value_freq: value_freq.to_vec(),
        joint_freq: joint_freq.to_vec(),
        exceeded_one,
    })
}

/// Estimates observation probabilities from a random (MCAR) sample and a
/// user-selected sample of the same cohort.
///
/// Value frequencies come from the random sample with one pseudo-count per
/// value. The joint frequency of "value v and observed" is the number of
/// selected ratings with value v divided by the number of entries the
/// cohort could have rated, given per user in `exposure_counts`.
pub fn estimate_mu_heldout(
    random_sample: &RatingDataset,
    selected_sample: &RatingDataset,
    exposure_counts: &[usize],
) -> Result<MuEstimate> {
    if random_sample.n_values() != selected_sample.n_values() {
        return Err(Error::Estimation(
            "samples use different rating scales".into(),
        ));
    }
    if random_sample.is_empty() {
        return Err(Error::Estimation("random sample is empty".into()));
    }
    if exposure_counts.len() != selected_sample.n_users() {
        return Err(Error::Estimation(format!(
            "{} exposure counts for {} users",
            exposure_counts.len(),
            selected_sample.n_users()
        )));
    }
    for (user, &exposure) in exposure_counts.iter().enumerate() {
        let rated = selected_sample.row(user).len();
        if rated > exposure {
            return Err(Error::Estimation(format!(
                "user {user} rated {rated} items but could only rate {exposure}"
            )));
        }
    }
    let exposure: usize = exposure_counts.iter().sum();
    if exposure == 0 {
        return Err(Error::Estimation("total exposure is zero".into()));
    }

    let nv = random_sample.n_values() as usize;
    let counts = random_sample.value_counts();
    let total = random_sample.len() as f64 + nv as f64;
    let value_freq: Vec<f64> = counts.iter().map(|&c| (c as f64 + 1.0) / total).collect();
    let joint_freq: Vec<f64> = selected_sample
        .value_counts()
        .iter()
        .map(|&c| c as f64 / exposure as f64)
        .collect();
    mu_from_frequencies(&value_freq, &joint_freq)
}
