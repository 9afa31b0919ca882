//! Exact information quantities over finite tables.
//!
//! A [`DiscreteJoint`] holds `p(x, y)`, a [`DiscreteEncoder`] holds the
//! stochastic map `q(t | x)` where the latent alphabet is a product of
//! per-coordinate alphabets. Every quantity is obtained by exhaustive
//! summation over `(x, y, t)` with the conventions `0 ln 0 = 0` and
//! `KL = +∞` when the second argument vanishes on the first's support.
//!
//! Latent outcomes are indexed in mixed radix with the last coordinate
//! varying fastest.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest joint latent alphabet accepted.
pub const MAX_LATENT_OUTCOMES: usize = 64;

const SUM_TOL: f64 = 1e-12;

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// `Σ p ln(p/q)`; `+∞` if `q = 0` somewhere `p > 0`.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            total += a * (a / b).ln();
        }
    }
    total
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "{what} has a negative or non-finite entry"
        )));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::InvalidArgument(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// `p(x, y)` as an `|𝒳| × |𝒴|` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct DiscreteJoint {
    p: Vec<Vec<f64>>,
}

impl DiscreteJoint {
    /// Every class must carry positive probability.
    pub fn new(p: Vec<Vec<f64>>) -> Result<Self> {
        if p.is_empty() || p[0].is_empty() {
            return Err(Error::InvalidArgument(
                "joint table must be non-empty".into(),
            ));
        }
        let ny = p[0].len();
        for (x, row) in p.iter().enumerate() {
            if row.len() != ny {
                return Err(Error::dims(format!("joint row {x}"), ny, row.len()));
            }
        }
        let flat: Vec<f64> = p.iter().flatten().copied().collect();
        check_distribution(&flat, "joint table")?;
        let joint = Self { p };
        if let Some(y) = joint.p_y().iter().position(|&v| v <= 0.0) {
            return Err(Error::EmptyClass(y));
        }
        Ok(joint)
    }

    pub fn nx(&self) -> usize {
        self.p.len()
    }

    pub fn ny(&self) -> usize {
        self.p[0].len()
    }

    pub fn table(&self) -> &[Vec<f64>] {
        &self.p
    }

    pub fn p_x(&self) -> Vec<f64> {
        self.p.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn p_y(&self) -> Vec<f64> {
        (0..self.ny())
            .map(|y| self.p.iter().map(|r| r[y]).sum())
            .collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for DiscreteJoint {
    type Error = Error;
    fn try_from(p: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(p)
    }
}

impl From<DiscreteJoint> for Vec<Vec<f64>> {
    fn from(j: DiscreteJoint) -> Self {
        j.p
    }
}

/// Mixed-radix helper for product latent alphabets.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Radix {
    arities: Vec<usize>,
    coords: Vec<Vec<usize>>,
}

impl Radix {
    fn new(arities: &[usize]) -> Result<Self> {
        if arities.is_empty() || arities.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "invalid coordinate arities {arities:?}"
            )));
        }
        let size = arities
            .iter()
            .try_fold(1usize, |acc, &a| acc.checked_mul(a));
        let size = match size {
            Some(s) if s <= MAX_LATENT_OUTCOMES => s,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "latent alphabet {arities:?} exceeds {MAX_LATENT_OUTCOMES} outcomes"
                )))
            }
        };
        let coords = (0..size)
            .map(|mut t| {
                let mut c = vec![0; arities.len()];
                for j in (0..arities.len()).rev() {
                    c[j] = t % arities[j];
                    t /= arities[j];
                }
                c
            })
            .collect();
        Ok(Self {
            arities: arities.to_vec(),
            coords,
        })
    }

    fn size(&self) -> usize {
        self.coords.len()
    }

    fn marginals(&self, dist: &[f64]) -> Vec<Vec<f64>> {
        let mut m: Vec<Vec<f64>> = self.arities.iter().map(|&a| vec![0.0; a]).collect();
        for (t, &v) in dist.iter().enumerate() {
            for (j, &c) in self.coords[t].iter().enumerate() {
                m[j][c] += v;
            }
        }
        m
    }

    fn product(&self, marginals: &[Vec<f64>]) -> Vec<f64> {
        self.coords
            .iter()
            .map(|c| {
                c.iter()
                    .enumerate()
                    .map(|(j, &cj)| marginals[j][cj])
                    .product()
            })
            .collect()
    }
}

/// `q(t | x)` as an `|𝒳| × |𝒯|` row-stochastic table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EncoderRepr", into = "EncoderRepr")]
pub struct DiscreteEncoder {
    q: Vec<Vec<f64>>,
    radix: Radix,
}

#[derive(Serialize, Deserialize)]
struct EncoderRepr {
    q: Vec<Vec<f64>>,
    arities: Vec<usize>,
}

impl TryFrom<EncoderRepr> for DiscreteEncoder {
    type Error = Error;
    fn try_from(r: EncoderRepr) -> Result<Self> {
        Self::new(r.q, r.arities)
    }
}

impl From<DiscreteEncoder> for EncoderRepr {
    fn from(e: DiscreteEncoder) -> Self {
        EncoderRepr {
            q: e.q,
            arities: e.radix.arities,
        }
    }
}

impl DiscreteEncoder {
    pub fn new(q: Vec<Vec<f64>>, arities: Vec<usize>) -> Result<Self> {
        let radix = Radix::new(&arities)?;
        if q.is_empty() {
            return Err(Error::InvalidArgument(
                "encoder table must have at least one row".into(),
            ));
        }
        for (x, row) in q.iter().enumerate() {
            if row.len() != radix.size() {
                return Err(Error::dims(
                    format!("encoder row {x}"),
                    radix.size(),
                    row.len(),
                ));
            }
            check_distribution(row, &format!("encoder row {x}"))?;
        }
        Ok(Self { q, radix })
    }

    /// Deterministic encoder `t = map[x]`.
    pub fn deterministic(map: &[usize], arities: Vec<usize>) -> Result<Self> {
        let size: usize = arities.iter().product();
        let q = map
            .iter()
            .map(|&t| {
                let mut row = vec![0.0; size];
                if t < size {
                    row[t] = 1.0;
                }
                row
            })
            .collect();
        Self::new(q, arities)
    }

    pub fn nx(&self) -> usize {
        self.q.len()
    }

    pub fn nt(&self) -> usize {
        self.radix.size()
    }

    pub fn arities(&self) -> &[usize] {
        &self.radix.arities
    }

    pub fn table(&self) -> &[Vec<f64>] {
        &self.q
    }

    /// Coordinates of latent outcome `t`.
    pub fn coords(&self, t: usize) -> &[usize] {
        &self.radix.coords[t]
    }
}

fn check_pair(joint: &DiscreteJoint, enc: &DiscreteEncoder) -> Result<()> {
    if joint.nx() != enc.nx() {
        return Err(Error::dims(
            "encoder rows vs joint |X|",
            joint.nx(),
            enc.nx(),
        ));
    }
    Ok(())
}

/// Distributions induced by composing `p(x,y)` with `q(t|x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Induced {
    /// `q(t | y)`, one row per class.
    pub t_given_y: Vec<Vec<f64>>,
    /// `q(y | t)`; `None` where `q(t) = 0`.
    pub y_given_t: Vec<Option<Vec<f64>>>,
    pub t_marginal: Vec<f64>,
}

pub fn induced(joint: &DiscreteJoint, enc: &DiscreteEncoder) -> Result<Induced> {
    check_pair(joint, enc)?;
    let (ny, nt) = (joint.ny(), enc.nt());
    let mut yt = vec![vec![0.0; nt]; ny];
    for (x, prow) in joint.table().iter().enumerate() {
        for (y, &pxy) in prow.iter().enumerate() {
            for (t, &q) in enc.table()[x].iter().enumerate() {
                yt[y][t] += pxy * q;
            }
        }
    }
    let p_y = joint.p_y();
    let t_marginal: Vec<f64> = (0..nt).map(|t| (0..ny).map(|y| yt[y][t]).sum()).collect();
    let t_given_y = yt
        .iter()
        .zip(&p_y)
        .map(|(row, py)| row.iter().map(|v| v / py).collect())
        .collect();
    let y_given_t = (0..nt)
        .map(|t| {
            let qt = t_marginal[t];
            (qt > 0.0).then(|| (0..ny).map(|y| yt[y][t] / qt).collect())
        })
        .collect();
    Ok(Induced {
        t_given_y,
        y_given_t,
        t_marginal,
    })
}

/// Exact information quantities in nats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoReport {
    #[serde(rename = "H_Y")]
    pub h_y: f64,
    #[serde(rename = "H_Y_given_T")]
    pub h_y_given_t: f64,
    #[serde(rename = "I_XT")]
    pub i_xt: f64,
    #[serde(rename = "I_YT")]
    pub i_yt: f64,
    #[serde(rename = "I_XT_given_Y")]
    pub i_xt_given_y: f64,
    #[serde(rename = "I_XY_given_T")]
    pub i_xy_given_t: f64,
    /// `TC(T | Y=y)` per class.
    #[serde(rename = "TC_given_y")]
    pub tc_given_y: Vec<f64>,
}

/// `Σ_j H(T_j) − H(T)` of a distribution over the product alphabet.
fn total_correlation(radix: &Radix, dist: &[f64]) -> f64 {
    radix
        .marginals(dist)
        .iter()
        .map(|m| entropy(m))
        .sum::<f64>()
        - entropy(dist)
}

pub fn info_report(joint: &DiscreteJoint, enc: &DiscreteEncoder) -> Result<InfoReport> {
    check_pair(joint, enc)?;
    let (nx, ny, nt) = (joint.nx(), joint.ny(), enc.nt());
    let p = joint.table();
    let q = enc.table();

    let mut xyt = Vec::with_capacity(nx * ny * nt);
    let mut xt = vec![0.0; nx * nt];
    let mut yt = vec![0.0; ny * nt];
    let mut t_m = vec![0.0; nt];
    for x in 0..nx {
        for y in 0..ny {
            for t in 0..nt {
                let v = p[x][y] * q[x][t];
                xyt.push(v);
                xt[x * nt + t] += v;
                yt[y * nt + t] += v;
                t_m[t] += v;
            }
        }
    }
    let xy: Vec<f64> = p.iter().flatten().copied().collect();
    let (h_x, h_y, h_t) = (entropy(&joint.p_x()), entropy(&joint.p_y()), entropy(&t_m));
    let (h_xy, h_xt, h_yt, h_xyt) = (entropy(&xy), entropy(&xt), entropy(&yt), entropy(&xyt));

    let p_y = joint.p_y();
    let tc_given_y = (0..ny)
        .map(|y| {
            let cond: Vec<f64> = yt[y * nt..(y + 1) * nt]
                .iter()
                .map(|v| v / p_y[y])
                .collect();
            total_correlation(&enc.radix, &cond)
        })
        .collect();

    Ok(InfoReport {
        h_y,
        h_y_given_t: h_yt - h_t,
        i_xt: h_x + h_t - h_xt,
        i_yt: h_y + h_t - h_yt,
        i_xt_given_y: h_xy + h_yt - h_xyt - h_y,
        i_xy_given_t: h_xt + h_yt - h_xyt - h_t,
        tc_given_y,
    })
}

/// IB, CIB and sufficiency-form objective values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objectives {
    /// `H(Y|T) + β I(X;T)`
    pub ib: f64,
    /// `H(Y|T) + β′ I(X;T|Y)`
    pub cib: f64,
    /// `I(X;Y|T) + β′ I(X;T|Y)`
    pub sufficiency: f64,
}

pub fn objectives(report: &InfoReport, beta: f64, beta_prime: f64) -> Objectives {
    Objectives {
        ib: report.h_y_given_t + beta * report.i_xt,
        cib: report.h_y_given_t + beta_prime * report.i_xt_given_y,
        sufficiency: report.i_xy_given_t + beta_prime * report.i_xt_given_y,
    }
}

/// Indices whose value is within `tol` of the minimum.
pub fn argmin_set(values: &[f64], tol: f64) -> Vec<usize> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    (0..values.len())
        .filter(|&i| values[i] <= min + tol)
        .collect()
}

pub const ARGMIN_TIE_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceScan {
    pub beta: f64,
    pub beta_prime: f64,
    pub argmin_ib: Vec<usize>,
    pub argmin_cib: Vec<usize>,
    pub coincide: bool,
}

/// Compares the minimizers of the IB and CIB objectives over `family`.
pub fn equivalence_scan(
    joint: &DiscreteJoint,
    family: &[DiscreteEncoder],
    beta: f64,
) -> Result<EquivalenceScan> {
    if family.is_empty() {
        return Err(Error::InvalidArgument("encoder family is empty".into()));
    }
    let beta_prime = crate::objectives::beta_to_beta_prime(beta)?;
    let mut ib = Vec::with_capacity(family.len());
    let mut cib = Vec::with_capacity(family.len());
    for enc in family {
        let o = objectives(&info_report(joint, enc)?, beta, beta_prime);
        ib.push(o.ib);
        cib.push(o.cib);
    }
    let argmin_ib = argmin_set(&ib, ARGMIN_TIE_TOL);
    let argmin_cib = argmin_set(&cib, ARGMIN_TIE_TOL);
    Ok(EquivalenceScan {
        beta,
        beta_prime,
        coincide: argmin_ib == argmin_cib,
        argmin_ib,
        argmin_cib,
    })
}

/// Per-class product distributions `r(t|y) = Π_j r_j(t_j|y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductSurrogate {
    /// `marginals[y][j][a] = r_j(a | y)`
    pub marginals: Vec<Vec<Vec<f64>>>,
}

impl ProductSurrogate {
    pub fn new(marginals: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        for (y, per_class) in marginals.iter().enumerate() {
            for (j, m) in per_class.iter().enumerate() {
                check_distribution(
                    m,
                    &format!("surrogate marginal (class {y}, coordinate {j})"),
                )?;
            }
        }
        Ok(Self { marginals })
    }

    fn check_shape(&self, enc: &DiscreteEncoder, classes: usize) -> Result<()> {
        if self.marginals.len() != classes {
            return Err(Error::dims(
                "surrogate classes",
                classes,
                self.marginals.len(),
            ));
        }
        for per_class in &self.marginals {
            let ar: Vec<usize> = per_class.iter().map(Vec::len).collect();
            if ar != enc.arities() {
                return Err(Error::InvalidArgument(format!(
                    "surrogate arities {ar:?} differ from encoder arities {:?}",
                    enc.arities()
                )));
            }
        }
        Ok(())
    }

    /// Joint table of class `y` over the product alphabet.
    fn joint(&self, radix: &Radix, y: usize) -> Vec<f64> {
        radix.product(&self.marginals[y])
    }

    /// Joint tables of every class for an encoder's alphabet.
    pub fn tables(&self, enc: &DiscreteEncoder) -> Vec<Vec<f64>> {
        (0..self.marginals.len())
            .map(|y| self.joint(&enc.radix, y))
            .collect()
    }
}

/// For each class, the product of the coordinate marginals of `q(T|Y=y)`.
pub fn optimal_product_surrogate(
    t_given_y: &[Vec<f64>],
    arities: &[usize],
) -> Result<ProductSurrogate> {
    let radix = Radix::new(arities)?;
    let mut marginals = Vec::with_capacity(t_given_y.len());
    for (y, row) in t_given_y.iter().enumerate() {
        if row.len() != radix.size() {
            return Err(Error::dims(
                format!("q(T|Y={y}) row"),
                radix.size(),
                row.len(),
            ));
        }
        check_distribution(row, &format!("q(T|Y={y})"))?;
        marginals.push(radix.marginals(row));
    }
    Ok(ProductSurrogate { marginals })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// `E_{XY} KL(q(T|X) ‖ Π r(T_j|Y))`
    pub lhs: f64,
    pub i_xt_given_y: f64,
    /// `E_Y KL(q(T|Y) ‖ Π r(T_j|Y))`
    pub kl_residual: f64,
}

impl Decomposition {
    /// `lhs − (I(X;T|Y) + residual)`
    pub fn gap(&self) -> f64 {
        self.lhs - (self.i_xt_given_y + self.kl_residual)
    }
}

pub fn decomposition_check(
    joint: &DiscreteJoint,
    enc: &DiscreteEncoder,
    surrogate: &ProductSurrogate,
) -> Result<Decomposition> {
    check_pair(joint, enc)?;
    surrogate.check_shape(enc, joint.ny())?;
    let r = surrogate.tables(enc);
    let mut lhs = 0.0;
    for (x, prow) in joint.table().iter().enumerate() {
        for (y, &pxy) in prow.iter().enumerate() {
            if pxy > 0.0 {
                lhs += pxy * kl(&enc.table()[x], &r[y]);
            }
        }
    }
    let ind = induced(joint, enc)?;
    let kl_residual = joint
        .p_y()
        .iter()
        .enumerate()
        .map(|(y, &py)| py * kl(&ind.t_given_y[y], &r[y]))
        .sum();
    Ok(Decomposition {
        lhs,
        i_xt_given_y: info_report(joint, enc)?.i_xt_given_y,
        kl_residual,
    })
}

/// A finite sample `(x_i, y_i)` with labels `0..classes`.
fn sample_classes(samples: &[(usize, usize)], enc: &DiscreteEncoder) -> Result<Vec<Vec<usize>>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let classes = samples.iter().map(|s| s.1).max().unwrap_or(0) + 1;
    let mut members = vec![Vec::new(); classes];
    for (i, &(x, y)) in samples.iter().enumerate() {
        if x >= enc.nx() {
            return Err(Error::InvalidArgument(format!(
                "sample {i}: x = {x} outside encoder rows"
            )));
        }
        members[y].push(x);
    }
    if let Some(y) = members.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass(y));
    }
    Ok(members)
}

/// `q(T|Y)(t|y) = mean of q(t|x_i)` over the samples of class `y`.
pub fn empirical_t_given_y(
    samples: &[(usize, usize)],
    enc: &DiscreteEncoder,
) -> Result<Vec<Vec<f64>>> {
    let members = sample_classes(samples, enc)?;
    Ok(members
        .iter()
        .map(|xs| {
            let mut row = vec![0.0; enc.nt()];
            for &x in xs {
                for (t, v) in enc.table()[x].iter().enumerate() {
                    row[t] += v;
                }
            }
            row.iter().map(|v| v / xs.len() as f64).collect()
        })
        .collect())
}

/// `(1/N) Σ_i KL(q(T|x_i) ‖ r(T|y_i))`.
pub fn sample_kl_objective(
    samples: &[(usize, usize)],
    enc: &DiscreteEncoder,
    surrogate: &ProductSurrogate,
) -> Result<f64> {
    let members = sample_classes(samples, enc)?;
    surrogate.check_shape(enc, members.len())?;
    let r = surrogate.tables(enc);
    let total: f64 = samples
        .iter()
        .map(|&(x, y)| kl(&enc.table()[x], &r[y]))
        .sum();
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorollaryCheck {
    /// Minimum over product surrogates, attained by the product of
    /// class-conditional marginals.
    pub lhs_min: f64,
    /// `(1/N) Σ_i [KL(q(T|x_i) ‖ q(T|y_i)) + TC(T|y_i)]`
    pub rhs: f64,
}

impl CorollaryCheck {
    pub fn gap(&self) -> f64 {
        self.lhs_min - self.rhs
    }
}

pub fn corollary_check(
    samples: &[(usize, usize)],
    enc: &DiscreteEncoder,
) -> Result<CorollaryCheck> {
    let cond = empirical_t_given_y(samples, enc)?;
    let optimum = optimal_product_surrogate(&cond, enc.arities())?;
    let lhs_min = sample_kl_objective(samples, enc, &optimum)?;

    let tc: Vec<f64> = cond
        .iter()
        .map(|row| total_correlation(&enc.radix, row))
        .collect();
    let rhs = samples
        .iter()
        .map(|&(x, y)| kl(&enc.table()[x], &cond[y]) + tc[y])
        .sum::<f64>()
        / samples.len() as f64;
    Ok(CorollaryCheck { lhs_min, rhs })
}

/// Candidates obtained by moving `step` of mass between two outcomes of a
/// single coordinate marginal of a single class, then renormalizing.
pub fn perturbations(base: &ProductSurrogate, step: f64) -> Vec<ProductSurrogate> {
    let mut out = Vec::new();
    for y in 0..base.marginals.len() {
        for j in 0..base.marginals[y].len() {
            let m = &base.marginals[y][j];
            for from in 0..m.len() {
                for to in 0..m.len() {
                    if from == to || m[from] <= 0.0 {
                        continue;
                    }
                    let moved = step.min(m[from]);
                    let mut cand = m.clone();
                    cand[from] -= moved;
                    cand[to] += moved;
                    let s: f64 = cand.iter().sum();
                    cand.iter_mut().for_each(|v| *v /= s);
                    let mut next = base.clone();
                    next.marginals[y][j] = cand;
                    out.push(next);
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSearch {
    pub optimum: f64,
    pub best_candidate: f64,
    pub candidates: usize,
}

impl PerturbationSearch {
    /// How much the best candidate beats the closed-form optimum (positive
    /// means the optimum was beaten).
    pub fn improvement(&self) -> f64 {
        self.optimum - self.best_candidate
    }
}

/// Searches single-move perturbations of the closed-form optimal surrogate.
pub fn perturbation_search(
    samples: &[(usize, usize)],
    enc: &DiscreteEncoder,
    step: f64,
) -> Result<PerturbationSearch> {
    if !(step > 0.0 && step < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "perturbation step must be in (0,1), got {step}"
        )));
    }
    let cond = empirical_t_given_y(samples, enc)?;
    let optimum_s = optimal_product_surrogate(&cond, enc.arities())?;
    let optimum = sample_kl_objective(samples, enc, &optimum_s)?;
    let mut best = f64::INFINITY;
    let cands = perturbations(&optimum_s, step);
    for c in &cands {
        best = best.min(sample_kl_objective(samples, enc, c)?);
    }
    Ok(PerturbationSearch {
        optimum,
        best_candidate: best,
        candidates: cands.len(),
    })
}

/// Encoder `T = class(x)` for a joint in which `Y` is a function of `X`.
/// Returns `None` if some `x` carries mass under more than one class.
pub fn class_indicator_encoder(joint: &DiscreteJoint) -> Result<Option<DiscreteEncoder>> {
    let mut map = Vec::with_capacity(joint.nx());
    for row in joint.table() {
        let support: Vec<usize> = (0..row.len()).filter(|&y| row[y] > 0.0).collect();
        match support.as_slice() {
            [] => map.push(0),
            [y] => map.push(*y),
            _ => return Ok(None),
        }
    }
    DiscreteEncoder::deterministic(&map, vec![joint.ny()]).map(Some)
}

fn random_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1) + 1e-12).collect();
    let s: f64 = draws.iter().sum();
    draws.into_iter().map(|v| v / s).collect()
}

/// Random joint with every entry positive.
pub fn random_joint<R: Rng + ?Sized>(rng: &mut R, nx: usize, ny: usize) -> DiscreteJoint {
    let flat = random_simplex(rng, nx * ny);
    DiscreteJoint::new(flat.chunks(ny).map(<[f64]>::to_vec).collect())
        .expect("random joint is valid")
}

/// Random encoder; each entry is zeroed with probability `sparsity`
/// (every row keeps at least one positive entry).
pub fn random_encoder<R: Rng + ?Sized>(
    rng: &mut R,
    nx: usize,
    arities: &[usize],
    sparsity: f64,
) -> Result<DiscreteEncoder> {
    let nt = Radix::new(arities)?.size();
    let q = (0..nx)
        .map(|_| {
            let mut row = random_simplex(rng, nt);
            let keep = rng.gen_range(0..nt);
            for (t, v) in row.iter_mut().enumerate() {
                if t != keep && rng.gen::<f64>() < sparsity {
                    *v = 0.0;
                }
            }
            let s: f64 = row.iter().sum();
            row.iter().map(|v| v / s).collect()
        })
        .collect();
    DiscreteEncoder::new(q, arities.to_vec())
}

/// Random product surrogate with positive marginals.
pub fn random_product_surrogate<R: Rng + ?Sized>(
    rng: &mut R,
    classes: usize,
    arities: &[usize],
) -> ProductSurrogate {
    ProductSurrogate {
        marginals: (0..classes)
            .map(|_| arities.iter().map(|&a| random_simplex(rng, a)).collect())
            .collect(),
    }
}

/// Instance document read by the `oracle` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleInstance {
    pub p: DiscreteJoint,
    pub q: Vec<Vec<f64>>,
    pub arities: Vec<usize>,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    0.5
}

impl OracleInstance {
    pub fn encoder(&self) -> Result<DiscreteEncoder> {
        DiscreteEncoder::new(self.q.clone(), self.arities.clone())
    }
}

pub fn random_instance<R: Rng + ?Sized>(
    rng: &mut R,
    nx: usize,
    ny: usize,
    arities: &[usize],
) -> Result<OracleInstance> {
    let p = random_joint(rng, nx, ny);
    let enc = random_encoder(rng, nx, arities, 0.2)?;
    Ok(OracleInstance {
        p,
        q: enc.table().to_vec(),
        arities: arities.to_vec(),
        beta: 0.5,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Verdict {
    fn new(name: &str, residual: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            residual,
            tolerance,
            pass: residual.abs() < tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleOutput {
    pub report: InfoReport,
    pub objectives: Objectives,
    pub beta: f64,
    pub beta_prime: f64,
    pub verdicts: Vec<Verdict>,
}

impl OracleOutput {
    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }
}

/// Info report plus identity verdicts for one instance.
pub fn check_instance(instance: &OracleInstance) -> Result<OracleOutput> {
    let enc = instance.encoder()?;
    let joint = &instance.p;
    let report = info_report(joint, &enc)?;
    let beta = instance.beta;
    let beta_prime = crate::objectives::beta_to_beta_prime(beta)?;
    let obj = objectives(&report, beta, beta_prime);

    let negative = [
        report.h_y,
        report.h_y_given_t,
        report.i_xt,
        report.i_yt,
        report.i_xt_given_y,
        report.i_xy_given_t,
    ]
    .into_iter()
    .chain(report.tc_given_y.iter().copied())
    .fold(0.0f64, |acc, v| acc.min(v));

    let ind = induced(joint, &enc)?;
    let optimum = optimal_product_surrogate(&ind.t_given_y, enc.arities())?;
    let dec = decomposition_check(joint, &enc, &optimum)?;
    let weighted_tc: f64 = joint
        .p_y()
        .iter()
        .zip(&report.tc_given_y)
        .map(|(p, tc)| p * tc)
        .sum();

    let verdicts = vec![
        Verdict::new(
            "chain_rule",
            report.i_xt - report.i_xt_given_y - report.i_yt,
            1e-12,
        ),
        Verdict::new("nonnegativity", negative, 1e-12),
        Verdict::new(
            "ib_cib_identity",
            obj.ib - ((1.0 - beta) * obj.cib + beta * report.h_y),
            1e-12,
        ),
        Verdict::new("decomposition", dec.gap(), 1e-12),
        Verdict::new(
            "optimal_residual_is_tc",
            dec.kl_residual - weighted_tc,
            1e-12,
        ),
    ];
    Ok(OracleOutput {
        report,
        objectives: obj,
        beta,
        beta_prime,
        verdicts,
    })
}
