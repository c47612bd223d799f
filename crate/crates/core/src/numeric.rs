//! Small numerical helpers shared by the models: log-domain normalisation,
//! log densities of the conjugate priors, compensated summation and
//! seeded simplex sampling.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use statrs::function::gamma::ln_gamma;

/// `log(sum(exp(xs)))`, returning `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Turns log weights into a normalised simplex in place and returns the
/// log normaliser.
pub fn normalize_log_weights(xs: &mut [f64]) -> f64 {
    let lse = log_sum_exp(xs);
    for x in xs.iter_mut() {
        *x = (*x - lse).exp();
    }
    lse
}

/// Log density of a Dirichlet distribution at `x`, including the
/// normalising gamma terms.
pub fn ln_dirichlet_pdf(x: &[f64], conc: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), conc.len());
    let total: f64 = conc.iter().sum();
    let mut out = ln_gamma(total);
    for (&xi, &ai) in x.iter().zip(conc) {
        out += (ai - 1.0) * xi.ln() - ln_gamma(ai);
    }
    out
}

/// Log density of `Beta(x | a1, a0)` where `a1` weighs `x` and `a0`
/// weighs `1 - x`.
pub fn ln_beta_pdf(x: f64, a1: f64, a0: f64) -> f64 {
    ln_gamma(a1 + a0) - ln_gamma(a1) - ln_gamma(a0)
        + (a1 - 1.0) * x.ln()
        + (a0 - 1.0) * (1.0 - x).ln()
}

/// Neumaier compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Smallest value a sampled simplex entry may take.
const SIMPLEX_FLOOR: f64 = 1e-300;

/// Draws from a symmetric Dirichlet with the given concentration.
///
/// Entries are floored at a tiny positive value so that the result is
/// strictly inside the simplex even for small concentrations.
pub fn sample_symmetric_dirichlet<R: Rng + ?Sized>(
    rng: &mut R,
    concentration: f64,
    len: usize,
) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("concentration must be positive");
    let mut draws: Vec<f64> = (0..len)
        .map(|_| gamma.sample(rng).max(SIMPLEX_FLOOR))
        .collect();
    let total: f64 = draws.iter().sum();
    for d in draws.iter_mut() {
        *d /= total;
    }
    draws
}

/// Samples an index from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Median of a list; the mean of the two central values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    Some(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}
