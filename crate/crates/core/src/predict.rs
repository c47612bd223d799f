//! Posterior inference, predictive distributions, median prediction, MAE
//! and the train-on-selected / test-on-random protocol.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::cptv::{e_step_nmar, fit_nmar, posterior_nmar_row, CptvParams, MuMode};
use crate::data::{Observation, RatingDataset};
use crate::error::{Error, Result};
use crate::mixture::{
    e_step_mar, fit_mar, mar_log_weights, FitConfig, MixtureParams, Responsibilities,
    DEFAULT_ALPHA, DEFAULT_MAX_ITERS, DEFAULT_PHI, DEFAULT_REL_TOL,
};
use crate::numeric::normalize_log_weights;

/// A fitted rating model.
#[derive(Debug, Clone, PartialEq)]
pub enum FittedModel {
    /// Mixture fitted while ignoring the missing-data mechanism.
    Mar(MixtureParams),
    /// Mixture combined with the CPT-v missing-data model.
    Nmar {
        params: MixtureParams,
        cptv: CptvParams,
    },
}

impl FittedModel {
    pub fn mixture(&self) -> &MixtureParams {
        match self {
            FittedModel::Mar(p) => p,
            FittedModel::Nmar { params, .. } => params,
        }
    }

    /// Posterior over components for every user of `data`.
    pub fn responsibilities(&self, data: &RatingDataset) -> Result<Responsibilities> {
        match self {
            FittedModel::Mar(p) => e_step_mar(p, data),
            FittedModel::Nmar { params, cptv } => e_step_nmar(params, cptv, data).map(|r| r.0),
        }
    }
}

/// Posterior over components for one user's observed row.
///
/// The NMAR variant also accounts for every item the user did not rate.
pub fn posterior_z(model: &FittedModel, row: &[Observation]) -> Vec<f64> {
    match model {
        FittedModel::Mar(p) => {
            let mut w = vec![0.0; p.n_components()];
            mar_log_weights(&p.ln_theta(), &p.ln_beta(), p.n_values(), row, &mut w);
            normalize_log_weights(&mut w);
            w
        }
        FittedModel::Nmar { params, cptv } => posterior_nmar_row(params, cptv, row),
    }
}

/// Distribution over rating values `1..=V` for one (user, item).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    pub probs: Vec<f64>,
}

impl PredictiveDistribution {
    pub fn new(probs: Vec<f64>) -> Self {
        Self { probs }
    }

    /// Smallest rating whose cumulative probability reaches one half.
    pub fn median(&self) -> u8 {
        predict_median(self)
    }
}

/// Mixes the item's rating distributions by the user's component posterior.
pub fn predictive_distribution(
    params: &MixtureParams,
    posterior: &[f64],
    item: usize,
) -> PredictiveDistribution {
    let probs = (0..params.n_values())
        .map(|v| {
            posterior
                .iter()
                .enumerate()
                .map(|(z, &q)| q * params.beta(v, item, z))
                .sum()
        })
        .collect();
    PredictiveDistribution { probs }
}

pub fn predict_median(dist: &PredictiveDistribution) -> u8 {
    let mut cdf = 0.0;
    for (v, &p) in dist.probs.iter().enumerate() {
        cdf += p;
        if cdf >= 0.5 {
            return v as u8 + 1;
        }
    }
    // rounding left the total just under one half of the way; take the last
    // value with positive mass
    dist.probs
        .iter()
        .rposition(|&p| p > 0.0)
        .map_or(1, |v| v as u8 + 1)
}

pub fn mae(predictions: &[u8], truth: &[u8]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} ratings",
            predictions.len(),
            truth.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Evaluation("no ratings to score".into()));
    }
    let total: u64 = predictions
        .iter()
        .zip(truth)
        .map(|(&p, &t)| (p as i64 - t as i64).unsigned_abs())
        .sum();
    Ok(total as f64 / predictions.len() as f64)
}

/// One scored query.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub user: usize,
    pub item: usize,
    pub predicted: u8,
    pub distribution: PredictiveDistribution,
}

/// Predicts every (user, item) pair of `query`, conditioning each user's
/// posterior on their row in `evidence`.
pub fn predict_pairs(
    model: &FittedModel,
    evidence: &RatingDataset,
    query: &RatingDataset,
) -> Result<Vec<Prediction>> {
    if query.n_users() != evidence.n_users() || query.n_items() != evidence.n_items() {
        return Err(Error::Validation(
            "query and evidence datasets have different dimensions".into(),
        ));
    }
    let params = model.mixture();
    params.ensure_dims(query)?;
    let resp = model.responsibilities(evidence)?;
    Ok(query
        .observations()
        .iter()
        .map(|o| {
            let dist = predictive_distribution(params, resp.row(o.user), o.item);
            Prediction {
                user: o.user,
                item: o.item,
                predicted: predict_median(&dist),
                distribution: dist,
            }
        })
        .collect())
}

/// MAE of `model` on `query`, conditioning on `evidence`.
pub fn evaluate_mae(
    model: &FittedModel,
    evidence: &RatingDataset,
    query: &RatingDataset,
) -> Result<f64> {
    let preds = predict_pairs(model, evidence, query)?;
    let predicted: Vec<u8> = preds.iter().map(|p| p.predicted).collect();
    let truth: Vec<u8> = query.observations().iter().map(|o| o.value).collect();
    mae(&predicted, &truth)
}

/// Model family evaluated by the protocol.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelFamily {
    /// Mixture ignoring the missing-data mechanism.
    MmNone,
    /// Mixture with the CPT-v missing-data model.
    MmCptv(MuMode),
    /// Predicts the median of the training ratings for every query.
    GlobalMedian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub n_components: usize,
    pub alpha: f64,
    pub phi: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Prior strength used to build a learned-mu prior, for reporting.
    pub strength: Option<f64>,
}

impl ModelSpec {
    pub fn new(family: ModelFamily, n_components: usize) -> Self {
        Self {
            family,
            n_components,
            alpha: DEFAULT_ALPHA,
            phi: DEFAULT_PHI,
            max_iters: DEFAULT_MAX_ITERS,
            rel_tol: DEFAULT_REL_TOL,
            strength: None,
        }
    }

    pub fn model_name(&self) -> &'static str {
        match self.family {
            ModelFamily::MmNone => "mm-none",
            ModelFamily::MmCptv(_) => "mm-cptv",
            ModelFamily::GlobalMedian => "global-median",
        }
    }

    pub fn mu_mode_name(&self) -> &'static str {
        match &self.family {
            ModelFamily::MmCptv(mode) => mode.name(),
            _ => "none",
        }
    }

    pub fn label(&self) -> String {
        match self.strength {
            Some(s) => format!(
                "{} K={} mu={} S={s}",
                self.model_name(),
                self.n_components,
                self.mu_mode_name()
            ),
            None => format!(
                "{} K={} mu={}",
                self.model_name(),
                self.n_components,
                self.mu_mode_name()
            ),
        }
    }

    fn fit_config(&self, seed: u64) -> FitConfig {
        FitConfig {
            n_components: self.n_components,
            max_iters: self.max_iters,
            rel_tol: self.rel_tol,
            seed,
            alpha: self.alpha,
            phi: self.phi,
        }
    }
}

/// Result of one spec under one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolRow {
    pub spec_index: usize,
    pub seed: u64,
    pub train_mae: f64,
    pub test_mae: f64,
    pub iterations: usize,
    pub converged: bool,
    pub log_posterior: Option<f64>,
}

/// Mean and standard error of one spec across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub spec_index: usize,
    pub repetitions: usize,
    pub train_mae_mean: f64,
    pub train_mae_se: Option<f64>,
    pub test_mae_mean: f64,
    pub test_mae_se: Option<f64>,
    pub mean_iterations: f64,
    pub converged: usize,
}

#[derive(Debug, Clone)]
pub struct ProtocolReport {
    pub specs: Vec<ModelSpec>,
    pub rows: Vec<ProtocolRow>,
    pub aggregates: Vec<AggregateRow>,
    /// Specs that failed, with the error message.
    pub failures: Vec<(usize, String)>,
}

pub const REPORT_HEADER: &str =
    "model,K,mu_mode,S,seed,train_mae,test_mae,iterations,converged,agg,train_mae_se,test_mae_se,log_posterior";

/// Decimal rendering with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn mean_and_se(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

impl ProtocolReport {
    pub fn aggregate(&self, spec_index: usize) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|a| a.spec_index == spec_index)
    }

    /// Delimited rows: one per (spec, seed), then one aggregate per spec.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{REPORT_HEADER}").unwrap();
        let prefix = |i: usize| {
            let s = &self.specs[i];
            format!(
                "{},{},{},{}",
                s.model_name(),
                s.n_components,
                s.mu_mode_name(),
                fmt_opt(s.strength)
            )
        };
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},0,,,{}",
                prefix(r.spec_index),
                r.seed,
                fmt_f64(r.train_mae),
                fmt_f64(r.test_mae),
                r.iterations,
                r.converged,
                fmt_opt(r.log_posterior)
            )
            .unwrap();
        }
        for a in &self.aggregates {
            writeln!(
                out,
                "{},all,{},{},{},{}/{},1,{},{},",
                prefix(a.spec_index),
                fmt_f64(a.train_mae_mean),
                fmt_f64(a.test_mae_mean),
                fmt_f64(a.mean_iterations),
                a.converged,
                a.repetitions,
                fmt_opt(a.train_mae_se),
                fmt_opt(a.test_mae_se),
            )
            .unwrap();
        }
        out
    }

    /// Human-readable summary of the aggregates.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<34} {:>4} {:>18} {:>18}",
            "model", "reps", "train MAE", "test MAE"
        )
        .unwrap();
        let pm = |mean: f64, se: Option<f64>| match se {
            Some(se) => format!("{mean:.4} ± {se:.4}"),
            None => format!("{mean:.4}"),
        };
        for a in &self.aggregates {
            writeln!(
                out,
                "{:<34} {:>4} {:>18} {:>18}",
                self.specs[a.spec_index].label(),
                a.repetitions,
                pm(a.train_mae_mean, a.train_mae_se),
                pm(a.test_mae_mean, a.test_mae_se)
            )
            .unwrap();
        }
        for (i, msg) in &self.failures {
            writeln!(out, "FAILED {}: {msg}", self.specs[*i].label()).unwrap();
        }
        out
    }
}

/// Median of the training ratings, used by the constant baseline.
fn global_median(train: &RatingDataset) -> Result<u8> {
    let counts = train.value_counts();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Evaluation("training set is empty".into()));
    }
    let probs = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(predict_median(&PredictiveDistribution::new(probs)))
}

fn run_one(
    spec: &ModelSpec,
    spec_index: usize,
    seed: u64,
    train: &RatingDataset,
    test: &RatingDataset,
) -> Result<ProtocolRow> {
    let (model, iterations, converged, log_posterior) = match &spec.family {
        ModelFamily::GlobalMedian => {
            let v = global_median(train)?;
            let score = |d: &RatingDataset| -> Result<f64> {
                let truth: Vec<u8> = d.observations().iter().map(|o| o.value).collect();
                mae(&vec![v; truth.len()], &truth)
            };
            return Ok(ProtocolRow {
                spec_index,
                seed,
                train_mae: score(train)?,
                test_mae: score(test)?,
                iterations: 0,
                converged: true,
                log_posterior: None,
            });
        }
        ModelFamily::MmNone => {
            let fit = fit_mar(train, &spec.fit_config(seed))?;
            let lp = fit.final_log_posterior();
            (
                FittedModel::Mar(fit.params),
                fit.iterations,
                fit.converged,
                lp,
            )
        }
        ModelFamily::MmCptv(mode) => {
            let fit = fit_nmar(train, &spec.fit_config(seed), mode)?;
            let lp = fit.final_log_posterior();
            let cptv = fit
                .cptv
                .expect("combined fit carries missing-data parameters");
            (
                FittedModel::Nmar {
                    params: fit.params,
                    cptv,
                },
                fit.iterations,
                fit.converged,
                lp,
            )
        }
    };
    Ok(ProtocolRow {
        spec_index,
        seed,
        train_mae: evaluate_mae(&model, train, train)?,
        test_mae: evaluate_mae(&model, train, test)?,
        iterations,
        converged,
        log_posterior: Some(log_posterior),
    })
}

/// Fits every spec under every seed on `train` and scores MAE on both
/// sets. A failing spec is recorded and skipped; the others still run.
pub fn run_protocol(
    train: &RatingDataset,
    test: &RatingDataset,
    specs: &[ModelSpec],
    seeds: &[u64],
) -> Result<ProtocolReport> {
    if !train.same_dims(test) {
        return Err(Error::Validation("train and test dimensions differ".into()));
    }
    if let Some(o) = test
        .observations()
        .iter()
        .find(|o| train.contains(o.user, o.item))
    {
        return Err(Error::Validation(format!(
            "train and test share pair ({}, {})",
            o.user, o.item
        )));
    }
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }

    let jobs: Vec<(usize, u64)> = (0..specs.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<Result<ProtocolRow>> = jobs
        .par_iter()
        .map(|&(i, seed)| run_one(&specs[i], i, seed, train, test))
        .collect();

    let mut rows = Vec::new();
    let mut failures: Vec<(usize, String)> = Vec::new();
    for ((i, _), r) in jobs.iter().zip(results) {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => {
                if !failures.iter().any(|(j, _)| j == i) {
                    failures.push((*i, e.to_string()));
                }
            }
        }
    }
    // a spec that failed under any seed is dropped entirely
    rows.retain(|r| !failures.iter().any(|(j, _)| *j == r.spec_index));

    let aggregates = (0..specs.len())
        .filter_map(|i| {
            let mine: Vec<&ProtocolRow> = rows.iter().filter(|r| r.spec_index == i).collect();
            if mine.is_empty() {
                return None;
            }
            let train: Vec<f64> = mine.iter().map(|r| r.train_mae).collect();
            let test: Vec<f64> = mine.iter().map(|r| r.test_mae).collect();
            let (train_mae_mean, train_mae_se) = mean_and_se(&train);
            let (test_mae_mean, test_mae_se) = mean_and_se(&test);
            Some(AggregateRow {
                spec_index: i,
                repetitions: mine.len(),
                train_mae_mean,
                train_mae_se,
                test_mae_mean,
                test_mae_se,
                mean_iterations: mine.iter().map(|r| r.iterations as f64).sum::<f64>()
                    / mine.len() as f64,
                converged: mine.iter().filter(|r| r.converged).count(),
            })
        })
        .collect();

    Ok(ProtocolReport {
        specs: specs.to_vec(),
        rows,
        aggregates,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::init_params;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn median_examples() {
        let m = |p: &[f64]| predict_median(&PredictiveDistribution::new(p.to_vec()));
        assert_eq!(m(&[0.1, 0.1, 0.1, 0.1, 0.6]), 5);
        assert_eq!(m(&[0.5, 0.5, 0.0, 0.0, 0.0]), 1);
        assert_eq!(m(&[0.2; 5]), 3);
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(mae(&[2, 3, 4], &[1, 2, 5]).unwrap(), 1.0);
        assert_eq!(mae(&[1, 5], &[3, 5]).unwrap(), 1.0);
        assert!(matches!(mae(&[], &[]), Err(Error::Evaluation(_))));
        assert!(mae(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn predictive_single_component_is_beta_column() {
        let p = init_params(1, 3, 5, 2.0, 2.0, 4).unwrap();
        let d = predictive_distribution(&p, &[1.0], 2);
        assert_eq!(d.probs, p.beta_column(2, 0));
    }

    #[test]
    fn predictive_point_mass_mixture() {
        let cols = [[1.0, 0.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0, 0.0]];
        // point masses violate positivity, so skip the checked constructor
        let mut beta = vec![0.0; 10];
        for v in 0..5 {
            for z in 0..2 {
                beta[v * 2 + z] = cols[z][v];
            }
        }
        let p = MixtureParams::from_flat_unchecked(
            vec![0.5, 0.5],
            1,
            5,
            beta,
            vec![2.0; 2],
            vec![2.0; 10],
        );
        let d = predictive_distribution(&p, &[0.5, 0.5], 0);
        assert_eq!(d.probs, vec![0.5, 0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn posterior_of_empty_row_is_theta() {
        let p = init_params(3, 4, 5, 2.0, 2.0, 8).unwrap();
        let q = posterior_z(&FittedModel::Mar(p.clone()), &[]);
        for (a, b) in q.iter().zip(p.theta()) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
        let single = init_params(1, 4, 5, 2.0, 2.0, 8).unwrap();
        assert_eq!(posterior_z(&FittedModel::Mar(single), &[]), vec![1.0]);
    }

    #[test]
    fn global_median_baseline_by_hand() {
        // train values 1,2,2,5 -> median 2; test values 1,2,4,5 -> |1|+0+2+3 = 6 / 4
        let train = RatingDataset::new(
            2,
            6,
            5,
            vec![
                Observation::new(0, 0, 1),
                Observation::new(0, 1, 2),
                Observation::new(1, 0, 2),
                Observation::new(1, 1, 5),
            ],
        )
        .unwrap();
        let test = RatingDataset::new(
            2,
            6,
            5,
            vec![
                Observation::new(0, 2, 1),
                Observation::new(0, 3, 2),
                Observation::new(1, 4, 4),
                Observation::new(1, 5, 5),
            ],
        )
        .unwrap();
        let spec = ModelSpec::new(ModelFamily::GlobalMedian, 1);
        let report = run_protocol(&train, &test, &[spec], &[1]).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].test_mae, 1.5);
        // |1-2| + 0 + 0 + |5-2| = 4 / 4
        assert_eq!(report.rows[0].train_mae, 1.0);
        assert_eq!(report.aggregates[0].test_mae_se, None);
    }

    #[test]
    fn failing_spec_is_recorded() {
        let train = RatingDataset::new(1, 3, 5, vec![Observation::new(0, 0, 3)]).unwrap();
        let test = RatingDataset::new(1, 3, 5, vec![Observation::new(0, 1, 3)]).unwrap();
        let bad = ModelSpec::new(ModelFamily::MmCptv(MuMode::Fixed(vec![2.0; 5])), 1);
        let good = ModelSpec::new(ModelFamily::MmNone, 1);
        let report = run_protocol(&train, &test, &[bad, good], &[1, 2]).unwrap();
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].0, 0);
        assert_eq!(report.rows.len(), 2);
        assert!(report.aggregates[0].test_mae_se.is_some());
    }

    proptest! {
        #[test]
        fn median_ignores_trailing_zero_mass(raw in prop::collection::vec(0.01f64..1.0, 1..8), pad in 0usize..4) {
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
            let mut padded = probs.clone();
            padded.extend(std::iter::repeat_n(0.0, pad));
            let a = predict_median(&PredictiveDistribution::new(probs.clone()));
            let b = predict_median(&PredictiveDistribution::new(padded));
            prop_assert_eq!(a, b);
            prop_assert!(a >= 1 && a as usize <= probs.len());
        }

        #[test]
        fn predictive_is_simplex(seed in any::<u64>(), w in prop::collection::vec(0.01f64..1.0, 3)) {
            let p = init_params(3, 2, 5, 2.0, 2.0, seed).unwrap();
            let total: f64 = w.iter().sum();
            let post: Vec<f64> = w.iter().map(|x| x / total).collect();
            let d = predictive_distribution(&p, &post, 1);
            prop_assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }
}
