//! Ground-truth data generation: a complete rating matrix from a
//! multinomial mixture, then a missingness mechanism on top of it (CPT-v
//! for user-selected ratings, uniform sampling for random test ratings).
//!
//! Every per-user draw uses its own RNG stream derived from
//! `(seed, purpose, user)`, so outputs do not depend on thread scheduling.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cptv::{CptvParams, PAPER_YAHOO_MU};
use crate::data::{Observation, RatingDataset, SplitPair};
use crate::error::{Error, Result};
use crate::mixture::{MixtureParams, DEFAULT_ALPHA, DEFAULT_PHI};
use crate::numeric::{sample_categorical, sample_symmetric_dirichlet, CompensatedSum};

const STREAM_PARAMS: u64 = 1;
const STREAM_COMPLETE: u64 = 2;
const STREAM_MISSING: u64 = 3;
const STREAM_MCAR: u64 = 4;

/// Largest number of missing-value assignments the oracle will enumerate.
pub const ORACLE_LIMIT: f64 = 1e6;

/// Multiplier applied to the reference observation probabilities in the
/// default desk-scale study, so users still reach the minimum training
/// count with only 100 items.
pub const DEFAULT_MU_SCALE: f64 = 4.0;

fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

/// The reference observation probabilities scaled by `factor`, capped
/// below one.
pub fn scaled_paper_mu(factor: f64) -> Vec<f64> {
    PAPER_YAHOO_MU
        .iter()
        .map(|m| (m * factor).min(1.0 - 1e-6))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_values: u8,
    pub n_components: usize,
    /// Symmetric Dirichlet concentration for the mixing weights.
    pub theta_concentration: f64,
    /// Symmetric Dirichlet concentration for each rating distribution.
    pub beta_concentration: f64,
    pub mu: Vec<f64>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_items: 100,
            n_values: 5,
            n_components: 5,
            theta_concentration: 10.0,
            beta_concentration: 0.5,
            mu: scaled_paper_mu(DEFAULT_MU_SCALE),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 || self.n_values == 0 || self.n_components == 0 {
            return Err(Error::Config(
                "items, values and components must be positive".into(),
            ));
        }
        if !(self.theta_concentration > 0.0) || !(self.beta_concentration > 0.0) {
            return Err(Error::Config(
                "Dirichlet concentrations must be positive".into(),
            ));
        }
        if self.mu.len() != self.n_values as usize {
            return Err(Error::Config(format!(
                "mu has {} entries, expected {}",
                self.mu.len(),
                self.n_values
            )));
        }
        if self.mu.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("mu entries must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Complete data and the parameters that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub params: MixtureParams,
    pub cptv: CptvParams,
    n_users: usize,
    /// Row-major `N × M` matrix of ratings in `1..=V`.
    pub complete: Vec<u8>,
    /// Zero-based component of each user.
    pub z: Vec<usize>,
}

impl GroundTruth {
    /// Draws a complete matrix from given parameters.
    pub fn from_params(
        params: MixtureParams,
        cptv: CptvParams,
        n_users: usize,
        seed: u64,
    ) -> Result<Self> {
        if cptv.n_values() != params.n_values() {
            return Err(Error::Config(
                "mu length does not match the rating scale".into(),
            ));
        }
        let nm = params.n_items();
        let nv = params.n_values();
        let rows: Vec<(usize, Vec<u8>)> = (0..n_users)
            .into_par_iter()
            .map(|user| {
                let mut rng = stream_rng(seed, STREAM_COMPLETE, user as u64);
                let z = sample_categorical(&mut rng, params.theta());
                let mut col = vec![0.0; nv];
                let row = (0..nm)
                    .map(|m| {
                        for (v, c) in col.iter_mut().enumerate() {
                            *c = params.beta(v, m, z);
                        }
                        sample_categorical(&mut rng, &col) as u8 + 1
                    })
                    .collect();
                (z, row)
            })
            .collect();
        let mut complete = Vec::with_capacity(n_users * nm);
        let mut z = Vec::with_capacity(n_users);
        for (zi, row) in rows {
            z.push(zi);
            complete.extend(row);
        }
        Ok(Self {
            params,
            cptv,
            n_users,
            complete,
            z,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.params.n_items()
    }

    pub fn n_values(&self) -> u8 {
        self.params.n_values() as u8
    }

    pub fn value(&self, user: usize, item: usize) -> u8 {
        self.complete[user * self.n_items() + item]
    }

    /// The complete matrix as a fully observed dataset.
    pub fn to_dataset(&self) -> RatingDataset {
        let nm = self.n_items();
        let obs = (0..self.n_users)
            .flat_map(|u| (0..nm).map(move |m| (u, m)))
            .map(|(u, m)| Observation::new(u, m, self.value(u, m)))
            .collect();
        RatingDataset::from_observations_unchecked(self.n_users, nm, self.n_values(), obs)
    }

    /// Ground truth restricted to the listed users, re-indexed densely.
    pub fn select_users(&self, users: &[usize]) -> GroundTruth {
        let nm = self.n_items();
        let mut complete = Vec::with_capacity(users.len() * nm);
        for &u in users {
            complete.extend_from_slice(&self.complete[u * nm..(u + 1) * nm]);
        }
        GroundTruth {
            params: self.params.clone(),
            cptv: self.cptv.clone(),
            n_users: users.len(),
            complete,
            z: users.iter().map(|&u| self.z[u]).collect(),
        }
    }
}

/// Samples mixture parameters from the configured Dirichlets, then a
/// complete rating matrix from them.
pub fn sample_ground_truth(config: &GeneratorConfig, seed: u64) -> Result<GroundTruth> {
    config.validate()?;
    let (k, nm, nv) = (
        config.n_components,
        config.n_items,
        config.n_values as usize,
    );
    let mut rng = stream_rng(seed, STREAM_PARAMS, 0);
    let theta = sample_symmetric_dirichlet(&mut rng, config.theta_concentration, k);
    let mut beta = vec![0.0; nm * nv * k];
    for m in 0..nm {
        for z in 0..k {
            let col = sample_symmetric_dirichlet(&mut rng, config.beta_concentration, nv);
            for (v, b) in col.into_iter().enumerate() {
                beta[(m * nv + v) * k + z] = b;
            }
        }
    }
    let params = MixtureParams::from_flat_unchecked(
        theta,
        nm,
        nv,
        beta,
        vec![DEFAULT_ALPHA; k],
        vec![DEFAULT_PHI; nm * nv * k],
    );
    let cptv = CptvParams::new(config.mu.clone())?;
    GroundTruth::from_params(params, cptv, config.n_users, seed)
}

/// Observes each entry independently with probability `mu[value]`.
pub fn apply_cptv_missingness(gt: &GroundTruth, seed: u64) -> RatingDataset {
    let nm = gt.n_items();
    let mu = gt.cptv.mu();
    let rows: Vec<Vec<Observation>> = (0..gt.n_users)
        .into_par_iter()
        .map(|user| {
            let mut rng = stream_rng(seed, STREAM_MISSING, user as u64);
            (0..nm)
                .filter_map(|m| {
                    let x = gt.value(user, m);
                    let u: f64 = rng.random();
                    (u < mu[x as usize - 1]).then(|| Observation::new(user, m, x))
                })
                .collect()
        })
        .collect();
    RatingDataset::from_observations_unchecked(
        gt.n_users,
        nm,
        gt.n_values(),
        rows.into_iter().flatten().collect(),
    )
}

/// Draws `per_user` items per user uniformly without replacement from the
/// items not in that user's `exclude` row, copying their true values.
pub fn sample_mcar_test(
    gt: &GroundTruth,
    per_user: usize,
    exclude: Option<&RatingDataset>,
    seed: u64,
) -> Result<RatingDataset> {
    let nm = gt.n_items();
    if let Some(ex) = exclude {
        if ex.n_users() != gt.n_users || ex.n_items() != nm {
            return Err(Error::Generation(
                "exclusion set dimensions do not match the ground truth".into(),
            ));
        }
    }
    let rows: Vec<Result<Vec<Observation>>> = (0..gt.n_users)
        .into_par_iter()
        .map(|user| {
            let available: Vec<usize> = match exclude {
                None => (0..nm).collect(),
                Some(ex) => (0..nm).filter(|&m| !ex.contains(user, m)).collect(),
            };
            if per_user > available.len() {
                return Err(Error::Generation(format!(
                    "user {user} has only {} items left, {per_user} requested",
                    available.len()
                )));
            }
            let mut rng = stream_rng(seed, STREAM_MCAR, user as u64);
            let mut picked: Vec<usize> = sample_indices(&mut rng, available.len(), per_user)
                .into_iter()
                .map(|i| available[i])
                .collect();
            picked.sort_unstable();
            Ok(picked
                .into_iter()
                .map(|m| Observation::new(user, m, gt.value(user, m)))
                .collect())
        })
        .collect();
    let mut obs = Vec::new();
    for r in rows {
        obs.extend(r?);
    }
    Ok(RatingDataset::from_observations_unchecked(
        gt.n_users,
        nm,
        gt.n_values(),
        obs,
    ))
}

/// Train/test data shaped like the user-selected / random-survey study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyDataset {
    pub split: SplitPair,
    /// Ground-truth user index of each retained user.
    pub user_map: Vec<usize>,
}

/// Builds a study split: user-selected ratings through CPT-v for
/// training, `per_user_test` random ratings per user for testing. Test
/// pairs are removed from the training data, then users with fewer than
/// `min_train` remaining training ratings are dropped.
pub fn build_study_dataset(
    gt: &GroundTruth,
    per_user_test: usize,
    min_train: usize,
    seed: u64,
) -> Result<StudyDataset> {
    if per_user_test > gt.n_items() {
        return Err(Error::Generation(format!(
            "{per_user_test} test items per user requested, only {} items exist",
            gt.n_items()
        )));
    }
    let selected = apply_cptv_missingness(gt, seed);
    let test_all = sample_mcar_test(gt, per_user_test, None, seed)?;
    let train_all = selected.without_pairs_of(&test_all);
    let (train, user_map) = train_all.min_ratings_filter(min_train);
    let test = test_all.select_users(&user_map);
    Ok(StudyDataset {
        split: SplitPair::new(train, test)?,
        user_map,
    })
}

/// Held-out cohort for observation-probability estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldoutCohort {
    /// Ratings of uniformly chosen items.
    pub random: RatingDataset,
    /// Ratings selected through the CPT-v mechanism.
    pub selected: RatingDataset,
    /// Items each user could have rated.
    pub exposure: Vec<usize>,
}

pub fn build_heldout_cohort(
    gt: &GroundTruth,
    per_user_random: usize,
    seed: u64,
) -> Result<HeldoutCohort> {
    Ok(HeldoutCohort {
        random: sample_mcar_test(gt, per_user_random, None, seed)?,
        selected: apply_cptv_missingness(gt, seed),
        exposure: vec![gt.n_items(); gt.n_users()],
    })
}

/// Joint probability of the user's observation pattern and each component,
/// obtained by enumerating every value assignment of the missing entries.
pub fn brute_force_component_evidence(
    params: &MixtureParams,
    cptv: &CptvParams,
    row: &[Observation],
    n_items: usize,
) -> Result<Vec<f64>> {
    let nv = params.n_values();
    let mut observed: Vec<Option<usize>> = vec![None; n_items];
    for o in row {
        observed[o.item] = Some(o.value_index());
    }
    let missing: Vec<usize> = (0..n_items).filter(|&m| observed[m].is_none()).collect();
    let assignments = (nv as f64).powi(missing.len() as i32);
    if assignments > ORACLE_LIMIT {
        return Err(Error::OracleLimit(format!(
            "{} missing entries over {nv} values is {assignments:e} assignments",
            missing.len()
        )));
    }
    let assignments = assignments as usize;
    let mu = cptv.mu();

    let mut out = Vec::with_capacity(params.n_components());
    let mut values = vec![0usize; missing.len()];
    for z in 0..params.n_components() {
        let mut acc = CompensatedSum::new();
        values.iter_mut().for_each(|v| *v = 0);
        for _ in 0..assignments {
            let mut prod = params.theta()[z];
            let mut next_missing = 0;
            for (m, obs) in observed.iter().enumerate() {
                match *obs {
                    Some(x) => prod *= params.beta(x, m, z) * mu[x],
                    None => {
                        let v = values[next_missing];
                        next_missing += 1;
                        prod *= params.beta(v, m, z) * (1.0 - mu[v]);
                    }
                }
            }
            acc.add(prod);
            // odometer increment over the missing values
            for v in values.iter_mut() {
                *v += 1;
                if *v < nv {
                    break;
                }
                *v = 0;
            }
        }
        out.push(acc.value());
    }
    Ok(out)
}

/// Probability of a user's observed ratings and observation pattern under
/// the combined model, by explicit enumeration of the missing values.
pub fn brute_force_user_evidence(
    params: &MixtureParams,
    cptv: &CptvParams,
    row: &[Observation],
    n_items: usize,
) -> Result<f64> {
    let per_component = brute_force_component_evidence(params, cptv, row, n_items)?;
    let mut acc = CompensatedSum::new();
    for p in per_component {
        acc.add(p);
    }
    Ok(acc.value())
}

/// Posterior over components by explicit enumeration.
pub fn brute_force_posterior(
    params: &MixtureParams,
    cptv: &CptvParams,
    row: &[Observation],
    n_items: usize,
) -> Result<Vec<f64>> {
    let per_component = brute_force_component_evidence(params, cptv, row, n_items)?;
    let total: f64 = per_component.iter().sum();
    Ok(per_component.into_iter().map(|p| p / total).collect())
}
