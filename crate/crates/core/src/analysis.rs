//! Distributional diagnostics comparing two rating samples: smoothed
//! per-item marginals, symmetrised KL divergence in bits, value
//! histograms and paired-rating differences.

use std::fmt::Write as _;

use crate::data::RatingDataset;
use crate::error::{Error, Result};
use crate::numeric::median;
use crate::predict::fmt_f64;

/// Add-one smoothed rating distribution of one item.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemMarginal {
    pub item: usize,
    pub probs: Vec<f64>,
    pub raw_counts: Vec<usize>,
}

pub fn item_marginals(data: &RatingDataset) -> Vec<ItemMarginal> {
    let nv = data.n_values() as usize;
    let mut counts = vec![vec![0usize; nv]; data.n_items()];
    for o in data.observations() {
        counts[o.item][o.value_index()] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(item, raw_counts)| {
            let total: usize = raw_counts.iter().sum();
            let denom = (total + nv) as f64;
            let probs = raw_counts.iter().map(|&c| (c + 1) as f64 / denom).collect();
            ItemMarginal {
                item,
                probs,
                raw_counts,
            }
        })
        .collect()
}

/// Symmetrised KL divergence in bits. Both inputs must be strictly
/// positive distributions of the same length.
pub fn skl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Validation(format!(
            "distributions differ in length ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    if p.iter().chain(q).any(|&x| !(x > 0.0)) {
        return Err(Error::Validation(
            "SKL needs strictly positive probabilities; smooth the input first".into(),
        ));
    }
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| a * (a / b).log2() + b * (b / a).log2())
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SklReport {
    pub per_item: Vec<f64>,
    pub median: f64,
}

impl SklReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "item,skl_bits").unwrap();
        for (m, s) in self.per_item.iter().enumerate() {
            writeln!(out, "{m},{}", fmt_f64(*s)).unwrap();
        }
        writeln!(out, "median,{}", fmt_f64(self.median)).unwrap();
        out
    }
}

fn ensure_comparable(a: &RatingDataset, b: &RatingDataset) -> Result<()> {
    if a.n_items() != b.n_items() || a.n_values() != b.n_values() {
        return Err(Error::Validation(format!(
            "datasets differ in shape: {} items / {} values vs {} items / {} values",
            a.n_items(),
            a.n_values(),
            b.n_items(),
            b.n_values()
        )));
    }
    Ok(())
}

/// Per-item SKL between the smoothed marginals of two samples.
pub fn skl_report(set_a: &RatingDataset, set_b: &RatingDataset) -> Result<SklReport> {
    ensure_comparable(set_a, set_b)?;
    let a = item_marginals(set_a);
    let b = item_marginals(set_b);
    let per_item = a
        .iter()
        .zip(&b)
        .map(|(x, y)| skl(&x.probs, &y.probs))
        .collect::<Result<Vec<_>>>()?;
    let median = median(&per_item).unwrap_or(0.0);
    Ok(SklReport { per_item, median })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueHistogram {
    pub counts: Vec<usize>,
    /// `None` when the dataset is empty.
    pub proportions: Option<Vec<f64>>,
}

impl ValueHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "value,count,proportion").unwrap();
        for (v, &c) in self.counts.iter().enumerate() {
            let p = self
                .proportions
                .as_ref()
                .map(|p| fmt_f64(p[v]))
                .unwrap_or_else(|| "undefined".into());
            writeln!(out, "{},{c},{p}", v + 1).unwrap();
        }
        out
    }
}

pub fn value_histogram(data: &RatingDataset) -> ValueHistogram {
    let counts = data.value_counts();
    let total: usize = counts.iter().sum();
    let proportions =
        (total > 0).then(|| counts.iter().map(|&c| c as f64 / total as f64).collect());
    ValueHistogram {
        counts,
        proportions,
    }
}

/// Histogram of `value_b - value_a` over pairs rated in both sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceHistogram {
    pub max_abs: i32,
    /// `counts[d + max_abs]` counts difference `d`.
    pub counts: Vec<usize>,
    pub intersection: usize,
}

impl DifferenceHistogram {
    pub fn count(&self, diff: i32) -> usize {
        self.counts[(diff + self.max_abs) as usize]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "difference,count").unwrap();
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(out, "{},{c}", i as i32 - self.max_abs).unwrap();
        }
        writeln!(out, "intersection,{}", self.intersection).unwrap();
        out
    }
}

pub fn paired_difference_histogram(
    set_a: &RatingDataset,
    set_b: &RatingDataset,
) -> Result<DifferenceHistogram> {
    ensure_comparable(set_a, set_b)?;
    let max_abs = set_a.n_values() as i32 - 1;
    let mut counts = vec![0usize; (2 * max_abs + 1) as usize];
    let mut intersection = 0;
    for o in set_a.observations() {
        if let Some(b) = set_b.get(o.user, o.item) {
            counts[(b as i32 - o.value as i32 + max_abs) as usize] += 1;
            intersection += 1;
        }
    }
    Ok(DifferenceHistogram {
        max_abs,
        counts,
        intersection,
    })
}
