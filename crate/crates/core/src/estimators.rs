//! Pairwise-kernel upper bounds on `I(X;T)` and `I(X;T|Y)` for a Gaussian
//! encoder `T = f(X) + Z`, `Z ~ N(0, (η²+σ²) I)`, evaluated on embedded
//! codes `f(x_i)`.
//!
//! Two kernel forms are available:
//!
//! * [`FormulaMode::CitedSource`] (default):
//!   `−(1/N) Σ_i ln (1/N) Σ_j exp(−½‖f_i−f_j‖² / (η²+σ²)) − d ln(σ²/(η²+σ²))`
//! * [`FormulaMode::AsPrinted`]: no `1/N` inside the logarithm and an
//!   unsquared norm in the exponent.
//!
//! `d` is the code dimension. Class-conditional bounds restrict both sums
//! to the rows of one class.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::diffcore::log_sum_exp;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormulaMode {
    AsPrinted,
    #[default]
    CitedSource,
}

impl fmt::Display for FormulaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FormulaMode::AsPrinted => "as-printed",
            FormulaMode::CitedSource => "cited-source",
        })
    }
}

/// Outer normalization of a per-class bound.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassNormalization {
    /// `1/N_y`: an average over the class's own samples.
    #[default]
    PerClass,
    /// `1/N` over the whole dataset.
    AsPrinted,
}

/// Weights used to combine per-class bounds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassWeighting {
    /// `N_y / N`
    #[default]
    Frequency,
    /// `N_y`
    Counts,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorOptions {
    pub mode: FormulaMode,
    pub class_normalization: ClassNormalization,
    pub weighting: ClassWeighting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedDataset {
    codes: Vec<Vec<f64>>,
    labels: Vec<usize>,
    sigma2: f64,
    eta2: f64,
}

impl EmbeddedDataset {
    pub fn new(codes: Vec<Vec<f64>>, labels: Vec<usize>, sigma2: f64, eta2: f64) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::InvalidArgument(
                "embedded dataset needs at least one code".into(),
            ));
        }
        if labels.len() != codes.len() {
            return Err(Error::dims("embedded labels", codes.len(), labels.len()));
        }
        let d = codes[0].len();
        for (i, c) in codes.iter().enumerate() {
            if c.len() != d {
                return Err(Error::dims(format!("code row {i}"), d, c.len()));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("code row {i}")));
            }
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma2 must be positive, got {sigma2}"
            )));
        }
        if !(eta2 >= 0.0 && eta2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "eta2 must be non-negative, got {eta2}"
            )));
        }
        Ok(Self {
            codes,
            labels,
            sigma2,
            eta2,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.codes[0].len()
    }

    pub fn codes(&self) -> &[Vec<f64>] {
        &self.codes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn eta2(&self) -> f64 {
        self.eta2
    }

    /// Sample counts per label present, in label order.
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for &y in &self.labels {
            *counts.entry(y).or_insert(0) += 1;
        }
        counts
    }

    fn rows_of(&self, y: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == y).collect()
    }
}

fn noise_term(data: &EmbeddedDataset) -> f64 {
    let total = data.eta2 + data.sigma2;
    -(data.dim() as f64) * (data.sigma2 / total).ln()
}

/// `Σ_{i∈rows} ln Σ_{j∈rows} k(i, j)` with the mode's kernel and inner
/// normalization.
fn log_kernel_sum(data: &EmbeddedDataset, rows: &[usize], mode: FormulaMode) -> f64 {
    let scale = data.eta2 + data.sigma2;
    let inner_norm = match mode {
        FormulaMode::CitedSource => (rows.len() as f64).ln(),
        FormulaMode::AsPrinted => 0.0,
    };
    let mut exps = vec![0.0; rows.len()];
    let mut total = 0.0;
    for &i in rows {
        let ci = &data.codes[i];
        for (slot, &j) in exps.iter_mut().zip(rows) {
            let sq: f64 = ci
                .iter()
                .zip(&data.codes[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let dist = match mode {
                FormulaMode::CitedSource => sq,
                FormulaMode::AsPrinted => sq.sqrt(),
            };
            *slot = -0.5 * dist / scale;
        }
        total += log_sum_exp(&exps) - inner_norm;
    }
    total
}

/// Upper bound on `I(X;T)` over the whole dataset.
pub fn mixture_bound(data: &EmbeddedDataset, mode: FormulaMode) -> Result<f64> {
    let rows: Vec<usize> = (0..data.len()).collect();
    Ok(-log_kernel_sum(data, &rows, mode) / data.len() as f64 + noise_term(data))
}

/// Bound on `I(X;T|Y=y)` with per-class (`1/N_y`) normalization.
pub fn conditional_bound(data: &EmbeddedDataset, y: usize, mode: FormulaMode) -> Result<f64> {
    conditional_bound_with(data, y, mode, ClassNormalization::PerClass)
}

pub fn conditional_bound_with(
    data: &EmbeddedDataset,
    y: usize,
    mode: FormulaMode,
    normalization: ClassNormalization,
) -> Result<f64> {
    let rows = data.rows_of(y);
    if rows.is_empty() {
        return Err(Error::EmptyClass(y));
    }
    let outer = match normalization {
        ClassNormalization::PerClass => rows.len(),
        ClassNormalization::AsPrinted => data.len(),
    } as f64;
    Ok(-log_kernel_sum(data, &rows, mode) / outer + noise_term(data))
}

/// Combines `(count, value)` pairs into one class-conditional bound.
pub fn aggregate_conditional(
    per_class: &[(usize, f64)],
    n: usize,
    weighting: ClassWeighting,
) -> Result<f64> {
    if per_class.iter().any(|&(c, _)| c == 0) {
        return Err(Error::InvalidArgument(
            "class counts must be positive".into(),
        ));
    }
    let total: usize = per_class.iter().map(|&(c, _)| c).sum();
    if total != n {
        return Err(Error::InvalidArgument(format!(
            "class counts sum to {total}, expected {n}"
        )));
    }
    Ok(per_class
        .iter()
        .map(|&(c, v)| match weighting {
            ClassWeighting::Frequency => (c as f64 / n as f64) * v,
            ClassWeighting::Counts => c as f64 * v,
        })
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBound {
    pub label: usize,
    pub count: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub mode: FormulaMode,
    pub unconditional: f64,
    pub aggregate: f64,
    pub per_class: Vec<ClassBound>,
}

pub fn bound_report(data: &EmbeddedDataset, options: EstimatorOptions) -> Result<BoundReport> {
    let unconditional = mixture_bound(data, options.mode)?;
    let mut per_class = Vec::new();
    for (label, count) in data.class_counts() {
        let value = conditional_bound_with(data, label, options.mode, options.class_normalization)?;
        per_class.push(ClassBound {
            label,
            count,
            value,
        });
    }
    let pairs: Vec<(usize, f64)> = per_class.iter().map(|c| (c.count, c.value)).collect();
    let aggregate = aggregate_conditional(&pairs, data.len(), options.weighting)?;
    Ok(BoundReport {
        mode: options.mode,
        unconditional,
        aggregate,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(codes: Vec<Vec<f64>>, labels: Vec<usize>, sigma2: f64, eta2: f64) -> EmbeddedDataset {
        EmbeddedDataset::new(codes, labels, sigma2, eta2).unwrap()
    }

    #[test]
    fn single_point_collapses_to_noise_term() {
        let d = data(vec![vec![0.3, -1.0, 2.0]], vec![0], 0.5, 0.25);
        let expected = -3.0 * (0.5f64 / 0.75).ln();
        for mode in [FormulaMode::AsPrinted, FormulaMode::CitedSource] {
            assert!((mixture_bound(&d, mode).unwrap() - expected).abs() < 1e-15);
            assert!((conditional_bound(&d, 0, mode).unwrap() - expected).abs() < 1e-15);
        }
        let d = data(vec![vec![1.0]], vec![0], 0.5, 0.0);
        assert_eq!(mixture_bound(&d, FormulaMode::AsPrinted).unwrap(), 0.0);
    }

    #[test]
    fn invalid_inputs() {
        assert!(EmbeddedDataset::new(vec![vec![0.0]], vec![0], 0.0, 0.0).is_err());
        assert!(EmbeddedDataset::new(vec![vec![0.0]], vec![0], 1.0, -1.0).is_err());
        assert!(EmbeddedDataset::new(vec![], vec![], 1.0, 0.0).is_err());
        assert!(EmbeddedDataset::new(vec![vec![f64::NAN]], vec![0], 1.0, 0.0).is_err());
        let d = data(vec![vec![0.0]], vec![0], 1.0, 0.0);
        assert!(matches!(
            conditional_bound(&d, 3, FormulaMode::CitedSource),
            Err(Error::EmptyClass(3))
        ));
    }

    #[test]
    fn single_class_restriction_is_identity() {
        let codes = vec![
            vec![0.0, 1.0],
            vec![2.0, -1.0],
            vec![0.5, 0.5],
            vec![-1.0, 0.0],
        ];
        let d = data(codes, vec![4; 4], 1.0, 0.3);
        for mode in [FormulaMode::AsPrinted, FormulaMode::CitedSource] {
            assert_eq!(
                mixture_bound(&d, mode).unwrap(),
                conditional_bound(&d, 4, mode).unwrap()
            );
            let r = bound_report(
                &d,
                EstimatorOptions {
                    mode,
                    ..Default::default()
                },
            )
            .unwrap();
            assert_eq!(r.aggregate, r.unconditional);
        }
    }

    #[test]
    fn aggregation() {
        assert_eq!(
            aggregate_conditional(&[(5, 0.7)], 5, ClassWeighting::Frequency).unwrap(),
            0.7
        );
        assert_eq!(
            aggregate_conditional(&[(3, 1.25), (3, 1.25)], 6, ClassWeighting::Frequency).unwrap(),
            1.25
        );
        let v = aggregate_conditional(
            &[(1, 0.3), (2, 0.9), (4, 2.0)],
            7,
            ClassWeighting::Frequency,
        )
        .unwrap();
        assert!((v - (0.3 / 7.0 + 1.8 / 7.0 + 8.0 / 7.0)).abs() < 1e-12);
        let v = aggregate_conditional(&[(1, 0.3), (2, 0.9), (4, 2.0)], 7, ClassWeighting::Counts)
            .unwrap();
        assert!((v - 10.1).abs() < 1e-12);
        assert!(
            aggregate_conditional(&[(1, 0.3), (2, 0.9)], 4, ClassWeighting::Frequency).is_err()
        );
        assert!(
            aggregate_conditional(&[(0, 0.3), (4, 0.9)], 4, ClassWeighting::Frequency).is_err()
        );
    }

    #[test]
    fn as_printed_class_normalization_uses_dataset_size() {
        let codes = vec![vec![0.0], vec![1.0], vec![5.0]];
        let d = data(codes, vec![0, 0, 1], 1.0, 0.0);
        let per =
            conditional_bound_with(&d, 0, FormulaMode::AsPrinted, ClassNormalization::PerClass)
                .unwrap();
        let all =
            conditional_bound_with(&d, 0, FormulaMode::AsPrinted, ClassNormalization::AsPrinted)
                .unwrap();
        // noise term is zero at eta2 = 0, so the two differ by N_y/N
        assert!((all - per * 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn report_json_field_names() {
        let d = data(
            vec![vec![0.0], vec![1.0], vec![5.0]],
            vec![0, 0, 1],
            1.0,
            0.0,
        );
        let r = bound_report(&d, EstimatorOptions::default()).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["mode"], "cited-source");
        assert!(v["unconditional"].is_number() && v["aggregate"].is_number());
        assert_eq!(v["per_class"][1]["label"], 1);
        assert_eq!(v["per_class"][1]["count"], 1);
        assert!(v["per_class"][0]["value"].is_number());
    }
}
