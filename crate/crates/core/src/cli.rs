//! Command-line interface: generate, train, predict, evaluate, analyze and
//! estimate-mu.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{paired_difference_histogram, skl_report, value_histogram};
use crate::cptv::{build_mu_prior, estimate_mu_heldout, fit_nmar, MuMode, PAPER_YAHOO_MU};
use crate::data::{load_csv, RatingDataset};
use crate::error::{Error, Result};
use crate::mixture::{
    fit_mar, FitConfig, FitResult, DEFAULT_ALPHA, DEFAULT_MAX_ITERS, DEFAULT_PHI, DEFAULT_REL_TOL,
};
use crate::model_io::{load_model, model_from_str, save_model, truth_to_string};
use crate::predict::{fmt_f64, predict_pairs, run_protocol, FittedModel, ModelFamily, ModelSpec};
use crate::synthetic::{
    build_heldout_cohort, build_study_dataset, sample_ground_truth, GeneratorConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "cfmnar",
    version,
    about = "Mixture-model rating prediction with non-random missing data"
)]
pub struct Cli {
    /// Worker threads used for fitting and generation.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic study: train.csv, test.csv and truth.txt.
    Generate(GenerateArgs),
    /// Fit a model and write it together with its log-posterior trace.
    Train(TrainArgs),
    /// Predict ratings for (user, item) pairs with a saved model.
    Predict(PredictArgs),
    /// Run the train/test protocol over a grid of models and seeds.
    Evaluate(EvaluateArgs),
    /// Rating histograms, per-item SKL and paired differences.
    Analyze(AnalyzeArgs),
    /// Estimate observation probabilities from a random and a selected sample.
    EstimateMu(EstimateMuArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    MmNone,
    MmCptv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MuModeArg {
    Fixed,
    Learn,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub users: usize,
    #[arg(long, default_value_t = 100)]
    pub items: usize,
    #[arg(long, default_value_t = 5)]
    pub values: u8,
    /// Number of generating mixture components.
    #[arg(short = 'K', long = "components", default_value_t = 5)]
    pub components: usize,
    /// Dirichlet concentration of the mixing weights.
    #[arg(long, default_value_t = 10.0)]
    pub theta_conc: f64,
    /// Dirichlet concentration of each rating distribution.
    #[arg(long, default_value_t = 0.5)]
    pub beta_conc: f64,
    /// Observation probabilities: comma list, `paper-yahoo`,
    /// `paper-yahoo*<factor>` or `file:<model file>`.
    #[arg(long, default_value = "paper-yahoo*4")]
    pub mu: String,
    /// Random test ratings per user.
    #[arg(long, default_value_t = 10)]
    pub test_per_user: usize,
    /// Minimum training ratings for a user to be kept.
    #[arg(long, default_value_t = 10)]
    pub min_train: usize,
    /// Extra users generated as a held-out cohort for estimate-mu.
    #[arg(long, default_value_t = 0)]
    pub heldout_users: usize,
    /// Random ratings per held-out user.
    #[arg(long, default_value_t = 50)]
    pub heldout_random: usize,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_PHI)]
    pub phi: f64,
    /// Relative log-posterior change that ends EM.
    #[arg(long, default_value_t = DEFAULT_REL_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    #[arg(long, value_enum, default_value_t = MuModeArg::Fixed)]
    pub mu_mode: MuModeArg,
    /// Fixed observation probabilities, or the prior centre in learn mode:
    /// comma list, `paper-yahoo`, `paper-yahoo*<factor>` or `file:<model file>`.
    #[arg(long, default_value = "paper-yahoo")]
    pub mu: String,
    /// Number of rating values.
    #[arg(long, default_value_t = 5)]
    pub values: u8,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Trace file; defaults to `<out>.trace.csv`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModelKind::MmNone)]
    pub model: ModelKind,
    #[arg(short = 'K', long = "components", default_value_t = 1)]
    pub components: usize,
    /// Prior strength for learned observation probabilities.
    #[arg(short = 'S', long = "strength")]
    pub strength: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Total item count, when the training file does not mention every item.
    #[arg(long)]
    pub items: Option<usize>,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model_file: PathBuf,
    /// Ratings each user's posterior is conditioned on.
    #[arg(long)]
    pub train: PathBuf,
    /// (user, item) pairs to predict; the rating column is carried through.
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Report file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "mm-none,mm-cptv"
    )]
    pub models: Vec<ModelKind>,
    #[arg(
        short = 'K',
        long = "components",
        value_delimiter = ',',
        default_value = "1,2,5,10"
    )]
    pub components: Vec<usize>,
    /// Prior strengths, used in learn mode.
    #[arg(short = 'S', long = "strength", value_delimiter = ',')]
    pub strength: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    /// Also score a constant global-median baseline.
    #[arg(long)]
    pub baseline: bool,
    #[command(flatten)]
    pub fit: FitArgs,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Second dataset to compare against.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub values: u8,
}

#[derive(Debug, Args)]
pub struct EstimateMuArgs {
    /// Ratings of randomly chosen items.
    #[arg(long)]
    pub random: PathBuf,
    /// Ratings the same users chose to give.
    #[arg(long)]
    pub selected: PathBuf,
    /// Items each user could have rated; defaults to the item count.
    #[arg(long)]
    pub exposure: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub values: u8,
}

/// Parses the `--mu` argument.
pub fn parse_mu(spec: &str, n_values: usize) -> Result<Vec<f64>> {
    let spec = spec.trim();
    let mu = if let Some(path) = spec.strip_prefix("file:") {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {path}"), e))?;
        match model_from_str(&text)? {
            FittedModel::Nmar { cptv, .. } => cptv.mu().to_vec(),
            FittedModel::Mar(_) => {
                return Err(Error::Config(format!(
                    "{path} has no observation probabilities"
                )))
            }
        }
    } else if let Some(rest) = spec.strip_prefix("paper-yahoo") {
        let factor = if rest.is_empty() {
            1.0
        } else {
            rest.strip_prefix('*')
                .and_then(|f| f.parse::<f64>().ok())
                .ok_or_else(|| Error::Config(format!("bad mu preset '{spec}'")))?
        };
        PAPER_YAHOO_MU.iter().map(|m| m * factor).collect()
    } else {
        spec.split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Config(format!("bad mu list '{spec}'")))?
    };
    if mu.len() != n_values {
        return Err(Error::Config(format!(
            "mu has {} entries, the rating scale has {n_values}",
            mu.len()
        )));
    }
    Ok(mu)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let probe = path.join(".cfmnar-write-test");
    fs::write(&probe, b"").map_err(|e| Error::io(format!("writing to {}", path.display()), e))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

fn ensure_parent_writable(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

/// Loads two datasets and pads both to their common dimensions.
fn load_pair(a: &Path, b: &Path, n_values: u8) -> Result<(RatingDataset, RatingDataset)> {
    let a = load_csv(a, n_values, None)?;
    let b = load_csv(b, n_values, None)?;
    let users = a.n_users().max(b.n_users());
    let items = a.n_items().max(b.n_items());
    Ok((a.with_dims(users, items)?, b.with_dims(users, items)?))
}

fn mu_mode(fit: &FitArgs, strength: Option<f64>) -> Result<MuMode> {
    let mu = parse_mu(&fit.mu, fit.values as usize)?;
    match fit.mu_mode {
        MuModeArg::Fixed => Ok(MuMode::Fixed(mu)),
        MuModeArg::Learn => {
            let s = strength
                .ok_or_else(|| Error::Config("learn mode needs a prior strength (-S)".into()))?;
            Ok(MuMode::Learn(build_mu_prior(&mu, s)?))
        }
    }
}

fn fit_config(fit: &FitArgs, components: usize, seed: u64) -> FitConfig {
    FitConfig {
        n_components: components,
        max_iters: fit.max_iters,
        rel_tol: fit.tol,
        seed,
        alpha: fit.alpha,
        phi: fit.phi,
    }
}

fn cmd_generate(args: &GenerateArgs) -> Result<String> {
    ensure_dir(&args.out)?;
    let mu = parse_mu(&args.mu, args.values as usize)?;
    let config = GeneratorConfig {
        n_users: args.users + args.heldout_users,
        n_items: args.items,
        n_values: args.values,
        n_components: args.components,
        theta_concentration: args.theta_conc,
        beta_concentration: args.beta_conc,
        mu,
    };
    config.validate()?;
    let gt = sample_ground_truth(&config, args.seed)?;
    let study_users: Vec<usize> = (0..args.users).collect();
    let study_gt = gt.select_users(&study_users);
    let study = build_study_dataset(&study_gt, args.test_per_user, args.min_train, args.seed)?;

    study.split.train.save_csv(&args.out.join("train.csv"))?;
    study.split.test.save_csv(&args.out.join("test.csv"))?;
    let provenance = [
        ("seed", args.seed.to_string()),
        (
            "dims",
            format!("{},{},{}", args.users, args.items, args.values),
        ),
        ("mechanism", "cptv".to_string()),
        ("retained_users", study.split.train.n_users().to_string()),
    ];
    write_file(
        &args.out.join("truth.txt"),
        &truth_to_string(&gt, &provenance),
    )?;
    let map: String = std::iter::once("user,truth_user\n".to_string())
        .chain(
            study
                .user_map
                .iter()
                .enumerate()
                .map(|(i, u)| format!("{i},{u}\n")),
        )
        .collect();
    write_file(&args.out.join("user_map.csv"), &map)?;

    if args.heldout_users > 0 {
        let held: Vec<usize> = (args.users..args.users + args.heldout_users).collect();
        let cohort = build_heldout_cohort(&gt.select_users(&held), args.heldout_random, args.seed)?;
        cohort
            .random
            .save_csv(&args.out.join("heldout_random.csv"))?;
        cohort
            .selected
            .save_csv(&args.out.join("heldout_selected.csv"))?;
    }

    let mut out = String::new();
    let train = &study.split.train;
    writeln!(
        out,
        "generated {} users ({} retained), {} items, {} values",
        args.users,
        train.n_users(),
        args.items,
        args.values
    )
    .unwrap();
    writeln!(
        out,
        "train ratings {}, test ratings {}",
        train.len(),
        study.split.test.len()
    )
    .unwrap();
    // observation rate per true value over the full study cohort
    let complete = study_gt.to_dataset().value_counts();
    let observed = crate::synthetic::apply_cptv_missingness(&study_gt, args.seed).value_counts();
    for v in 0..args.values as usize {
        let rate = if complete[v] > 0 {
            observed[v] as f64 / complete[v] as f64
        } else {
            0.0
        };
        writeln!(out, "value {}: observed fraction {rate:.4}", v + 1).unwrap();
    }
    Ok(out)
}

fn write_trace(path: &Path, fit: &FitResult) -> Result<()> {
    let mut text = String::from("iteration,log_posterior\n");
    writeln!(text, "0,{}", fmt_f64(fit.initial_log_posterior)).unwrap();
    for (i, lp) in fit.log_posterior_trace.iter().enumerate() {
        writeln!(text, "{},{}", i + 1, fmt_f64(*lp)).unwrap();
    }
    write_file(path, &text)
}

fn cmd_train(args: &TrainArgs) -> Result<String> {
    let config = fit_config(&args.fit, args.components, args.seed);
    config.validate()?;
    let mode = match args.model {
        ModelKind::MmNone => None,
        ModelKind::MmCptv => Some(mu_mode(&args.fit, args.strength)?),
    };
    ensure_parent_writable(&args.out)?;
    let trace_path = args.trace.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".trace.csv");
        PathBuf::from(p)
    });

    let mut data = load_csv(&args.train, args.fit.values, None)?;
    if let Some(items) = args.items {
        data = data.with_dims(data.n_users(), items)?;
    }
    let fit = match &mode {
        None => fit_mar(&data, &config)?,
        Some(mode) => fit_nmar(&data, &config, mode)?,
    };
    let model = match fit.cptv.clone() {
        None => FittedModel::Mar(fit.params.clone()),
        Some(cptv) => FittedModel::Nmar {
            params: fit.params.clone(),
            cptv,
        },
    };
    save_model(&args.out, &model)?;
    write_trace(&trace_path, &fit)?;

    let mut out = String::new();
    writeln!(
        out,
        "iterations {}, converged {}, log posterior {}",
        fit.iterations,
        fit.converged,
        fmt_f64(fit.final_log_posterior())
    )
    .unwrap();
    if let Some(c) = &fit.cptv {
        let mu: Vec<String> = c.mu().iter().map(|m| format!("{m:.6}")).collect();
        writeln!(out, "mu {}", mu.join(",")).unwrap();
    }
    if let Some(d) = &fit.missing_mass {
        let f: Vec<String> = d.fractions.iter().map(|m| format!("{m:.6}")).collect();
        writeln!(out, "missing mass by value {}", f.join(",")).unwrap();
        if d.boundary_solution {
            writeln!(
                out,
                "boundary solution: value {} explains {:.1}% of the missing ratings",
                d.dominant_value,
                100.0 * d.dominant_fraction
            )
            .unwrap();
        }
    }
    Ok(out)
}

fn cmd_predict(args: &PredictArgs) -> Result<String> {
    ensure_parent_writable(&args.out)?;
    let model = load_model(&args.model_file)?;
    let nv = model.mixture().n_values() as u8;
    let (train, query) = load_pair(&args.train, &args.query, nv)?;
    let items = model.mixture().n_items();
    let (train, query) = (
        train.with_dims(train.n_users(), items)?,
        query.with_dims(query.n_users(), items)?,
    );
    let preds = predict_pairs(&model, &train, &query)?;
    let mut text = String::from("user,item,rating,predicted");
    for v in 1..=nv {
        write!(text, ",p{v}").unwrap();
    }
    text.push('\n');
    for (p, o) in preds.iter().zip(query.observations()) {
        write!(text, "{},{},{},{}", p.user, p.item, o.value, p.predicted).unwrap();
        for prob in &p.distribution.probs {
            write!(text, ",{}", fmt_f64(*prob)).unwrap();
        }
        text.push('\n');
    }
    write_file(&args.out, &text)?;
    let mae = crate::predict::mae(
        &preds.iter().map(|p| p.predicted).collect::<Vec<_>>(),
        &query
            .observations()
            .iter()
            .map(|o| o.value)
            .collect::<Vec<_>>(),
    );
    Ok(match mae {
        Ok(m) => format!("{} predictions, MAE {m:.4}\n", preds.len()),
        Err(_) => "0 predictions\n".to_string(),
    })
}

fn evaluation_specs(args: &EvaluateArgs) -> Result<Vec<ModelSpec>> {
    let mut specs = Vec::new();
    if args.baseline {
        specs.push(ModelSpec::new(ModelFamily::GlobalMedian, 1));
    }
    let with_fit = |family: ModelFamily, k: usize, strength: Option<f64>| ModelSpec {
        family,
        n_components: k,
        alpha: args.fit.alpha,
        phi: args.fit.phi,
        max_iters: args.fit.max_iters,
        rel_tol: args.fit.tol,
        strength,
    };
    for model in &args.models {
        for &k in &args.components {
            match model {
                ModelKind::MmNone => specs.push(with_fit(ModelFamily::MmNone, k, None)),
                ModelKind::MmCptv => match args.fit.mu_mode {
                    MuModeArg::Fixed => {
                        let mode = mu_mode(&args.fit, None)?;
                        specs.push(with_fit(ModelFamily::MmCptv(mode), k, None));
                    }
                    MuModeArg::Learn => {
                        if args.strength.is_empty() {
                            return Err(Error::Config(
                                "learn mode needs at least one prior strength (-S)".into(),
                            ));
                        }
                        for &s in &args.strength {
                            // prior errors are reported per spec by the protocol run
                            let family = match mu_mode(&args.fit, Some(s)) {
                                Ok(mode) => ModelFamily::MmCptv(mode),
                                Err(e @ Error::Config(_)) => {
                                    return Err(Error::Config(format!("S = {s}: {e}")))
                                }
                                Err(e) => return Err(e),
                            };
                            specs.push(with_fit(family, k, Some(s)));
                        }
                    }
                },
            }
        }
    }
    Ok(specs)
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<String> {
    let specs = evaluation_specs(args)?;
    for s in &specs {
        fit_config(&args.fit, s.n_components, 0).validate()?;
    }
    ensure_parent_writable(&args.out)?;
    let (train, test) = load_pair(&args.train, &args.test, args.fit.values)?;
    let report = run_protocol(&train, &test, &specs, &args.seeds)?;
    write_file(&args.out, &report.to_csv())?;
    Ok(report.to_table())
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<String> {
    ensure_dir(&args.out)?;
    let mut out = String::new();
    let header = |stat: &str, params: &str| format!("# {stat} {params}\n");
    let a_name = args.data.display().to_string();
    match &args.compare {
        None => {
            let a = load_csv(&args.data, args.values, None)?;
            let h = value_histogram(&a);
            write_file(
                &args.out.join("histogram_a.csv"),
                &(header("value_histogram", &format!("data={a_name}")) + &h.to_csv()),
            )?;
            writeln!(out, "value counts {:?}", h.counts).unwrap();
        }
        Some(b_path) => {
            let (a, b) = load_pair(&args.data, b_path, args.values)?;
            let b_name = b_path.display().to_string();
            let ha = value_histogram(&a);
            let hb = value_histogram(&b);
            write_file(
                &args.out.join("histogram_a.csv"),
                &(header("value_histogram", &format!("data={a_name}")) + &ha.to_csv()),
            )?;
            write_file(
                &args.out.join("histogram_b.csv"),
                &(header("value_histogram", &format!("data={b_name}")) + &hb.to_csv()),
            )?;
            let skl = skl_report(&a, &b)?;
            write_file(
                &args.out.join("skl.csv"),
                &(header(
                    "skl_bits",
                    &format!("a={a_name} b={b_name} smoothing=add-one log_base=2"),
                ) + &skl.to_csv()),
            )?;
            let diff = paired_difference_histogram(&a, &b)?;
            write_file(
                &args.out.join("paired_difference.csv"),
                &(header(
                    "paired_difference",
                    &format!("a={a_name} b={b_name} diff=b-a"),
                ) + &diff.to_csv()),
            )?;
            writeln!(out, "value counts a {:?}", ha.counts).unwrap();
            writeln!(out, "value counts b {:?}", hb.counts).unwrap();
            writeln!(out, "median SKL {} bits", fmt_f64(skl.median)).unwrap();
            writeln!(out, "intersection {}", diff.intersection).unwrap();
        }
    }
    Ok(out)
}

fn cmd_estimate_mu(args: &EstimateMuArgs) -> Result<String> {
    ensure_parent_writable(&args.out)?;
    let (random, selected) = load_pair(&args.random, &args.selected, args.values)?;
    let exposure = args.exposure.unwrap_or(selected.n_items());
    let est = estimate_mu_heldout(&random, &selected, &vec![exposure; selected.n_users()])?;
    let mut text = String::from("value,mu_hat,value_freq,joint_freq,exceeded_one\n");
    let mut out = String::new();
    for v in 0..est.mu_hat.len() {
        writeln!(
            text,
            "{},{},{},{},{}",
            v + 1,
            fmt_f64(est.mu_hat[v]),
            fmt_f64(est.value_freq[v]),
            fmt_f64(est.joint_freq[v]),
            est.exceeded_one[v] as u8
        )
        .unwrap();
        writeln!(out, "value {}: mu_hat {:.6}", v + 1, est.mu_hat[v]).unwrap();
        if est.exceeded_one[v] {
            writeln!(
                out,
                "warning: value {} has joint frequency above its marginal; clamped",
                v + 1
            )
            .unwrap();
        }
    }
    write_file(&args.out, &text)?;
    Ok(out)
}

/// Runs one parsed command on a pool with the requested thread count and
/// returns the summary to print.
pub fn run(cli: &Cli) -> Result<String> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::EstimateMu(a) => cmd_estimate_mu(a),
    })
}
