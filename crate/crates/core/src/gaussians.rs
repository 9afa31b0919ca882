//! Diagonal Gaussians over the bottleneck space and the per-class spherical
//! surrogate family `r(T|Y=y) = N(μ_y, σ_y² I)`.

use serde::{Deserialize, Serialize};

use crate::diffcore::{NodeId, Tape};
use crate::error::{Error, Result};

/// `½ ln(2π)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::dims(
                "gaussian log-variance",
                mean.len(),
                log_var.len(),
            ));
        }
        if mean.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian parameters".into()));
        }
        Ok(Self { mean, log_var })
    }

    /// `N(mean, var·I)`.
    pub fn spherical(mean: Vec<f64>, var: f64) -> Result<Self> {
        if var.is_nan() || var <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "variance must be positive, got {var}"
            )));
        }
        let d = mean.len();
        Self::new(mean, vec![var.ln(); d])
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|l| l.exp()).collect()
    }

    pub fn log_pdf(&self, t: &[f64]) -> Result<f64> {
        if t.len() != self.dim() {
            return Err(Error::dims("log_pdf point", self.dim(), t.len()));
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.log_var)
            .zip(t)
            .map(|((m, l), x)| -HALF_LN_2PI - 0.5 * l - 0.5 * (x - m).powi(2) / l.exp())
            .sum())
    }

    /// `mean + exp(½ log_var) ⊙ eps`
    pub fn sample_reparam(&self, eps: &[f64]) -> Result<Vec<f64>> {
        if eps.len() != self.dim() {
            return Err(Error::dims(
                "reparameterization noise",
                self.dim(),
                eps.len(),
            ));
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.log_var)
            .zip(eps)
            .map(|((m, l), e)| m + (0.5 * l).exp() * e)
            .collect())
    }

    /// Marginal of coordinate `j`.
    pub fn coordinate(&self, j: usize) -> DiagGaussian {
        Self {
            mean: vec![self.mean[j]],
            log_var: vec![self.log_var[j]],
        }
    }
}

/// Closed-form `KL(g1 ‖ g2)` for diagonal Gaussians.
pub fn kl_diag(g1: &DiagGaussian, g2: &DiagGaussian) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(Error::dims("kl_diag", g1.dim(), g2.dim()));
    }
    let mut kl = 0.0;
    for j in 0..g1.dim() {
        let (m1, l1) = (g1.mean[j], g1.log_var[j]);
        let (m2, l2) = (g2.mean[j], g2.log_var[j]);
        kl += (l1 - l2).exp() + (m1 - m2).powi(2) / l2.exp() - 1.0 + l2 - l1;
    }
    Ok(0.5 * kl)
}

/// Per-class spherical Gaussians with class priors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSurrogate {
    class_means: Vec<Vec<f64>>,
    class_log_sigma: Vec<f64>,
    priors: Vec<f64>,
}

impl ClassSurrogate {
    pub fn new(
        class_means: Vec<Vec<f64>>,
        class_log_sigma: Vec<f64>,
        priors: Vec<f64>,
    ) -> Result<Self> {
        let k = class_means.len();
        if k == 0 {
            return Err(Error::InvalidArgument(
                "surrogate needs at least one class".into(),
            ));
        }
        if class_log_sigma.len() != k {
            return Err(Error::dims(
                "surrogate log-sigma table",
                k,
                class_log_sigma.len(),
            ));
        }
        if priors.len() != k {
            return Err(Error::dims("surrogate prior table", k, priors.len()));
        }
        let d = class_means[0].len();
        for mu in &class_means {
            if mu.len() != d {
                return Err(Error::dims("surrogate class mean", d, mu.len()));
            }
        }
        let finite = class_means
            .iter()
            .flatten()
            .chain(&class_log_sigma)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("surrogate parameters".into()));
        }
        if priors.iter().any(|p| p.is_nan() || *p < 0.0)
            || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(Error::InvalidArgument(format!(
                "priors must be a probability vector, got {priors:?}"
            )));
        }
        Ok(Self {
            class_means,
            class_log_sigma,
            priors,
        })
    }

    /// Zero means, unit scale.
    pub fn initial(classes: usize, dim: usize, priors: Vec<f64>) -> Result<Self> {
        Self::new(vec![vec![0.0; dim]; classes], vec![0.0; classes], priors)
    }

    pub fn classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn dim(&self) -> usize {
        self.class_means[0].len()
    }

    pub fn class_means(&self) -> &[Vec<f64>] {
        &self.class_means
    }

    pub fn class_log_sigma(&self) -> &[f64] {
        &self.class_log_sigma
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn sigma(&self, y: usize) -> f64 {
        self.class_log_sigma[y].exp()
    }

    pub fn check_class(&self, y: usize) -> Result<()> {
        if y >= self.classes() {
            return Err(Error::UnknownClass {
                label: y,
                classes: self.classes(),
            });
        }
        Ok(())
    }

    /// `N(μ_y, σ_y² I)` as a [`DiagGaussian`].
    pub fn component(&self, y: usize) -> Result<DiagGaussian> {
        self.check_class(y)?;
        let d = self.dim();
        DiagGaussian::new(
            self.class_means[y].clone(),
            vec![2.0 * self.class_log_sigma[y]; d],
        )
    }
}

/// Relative class frequencies of `labels` over `classes` classes.
pub fn empirical_priors(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot estimate priors from no labels".into(),
        ));
    }
    let mut counts = vec![0usize; classes];
    for &y in labels {
        if y >= classes {
            return Err(Error::UnknownClass { label: y, classes });
        }
        counts[y] += 1;
    }
    let n = labels.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// `KL(g ‖ N(μ_y, σ_y² I))`.
pub fn kl_to_surrogate(g: &DiagGaussian, s: &ClassSurrogate, y: usize) -> Result<f64> {
    s.check_class(y)?;
    if g.dim() != s.dim() {
        return Err(Error::dims("kl_to_surrogate", s.dim(), g.dim()));
    }
    kl_diag(g, &s.component(y)?)
}

/// Tape form of [`kl_diag`]; all four inputs are length-`d` nodes.
pub fn kl_diag_node(tape: &mut Tape, m1: NodeId, l1: NodeId, m2: NodeId, l2: NodeId) -> NodeId {
    let dl = tape.sub(l1, l2);
    let ratio = tape.exp(dl);
    let diff = tape.sub(m1, m2);
    let sq = tape.square(diff);
    let neg_l2 = tape.scale(l2, -1.0);
    let inv_var2 = tape.exp(neg_l2);
    let maha = tape.mul(sq, inv_var2);
    let a = tape.add(ratio, maha);
    let b = tape.sub(l2, l1);
    let c = tape.add(a, b);
    let c = tape.shift(c, -1.0);
    let s = tape.sum(c);
    tape.scale(s, 0.5)
}

/// Tape form of [`kl_to_surrogate`]: `log_sigma` is a scalar node.
pub fn kl_spherical_node(
    tape: &mut Tape,
    mean: NodeId,
    log_var: NodeId,
    mu: NodeId,
    log_sigma: NodeId,
) -> NodeId {
    let d = tape.dim(mean);
    let lv = tape.scale(log_sigma, 2.0);
    let lv = tape.broadcast(lv, d);
    kl_diag_node(tape, mean, log_var, mu, lv)
}

/// Tape form of [`DiagGaussian::sample_reparam`] with frozen noise.
pub fn reparam_node(tape: &mut Tape, mean: NodeId, log_var: NodeId, eps: &[f64]) -> NodeId {
    let half = tape.scale(log_var, 0.5);
    let sd = tape.exp(half);
    let e = tape.constant(eps.to_vec());
    let noise = tape.mul(sd, e);
    tape.add(mean, noise)
}

/// `ln N(t; μ, σ² I)` with scalar node `log_sigma`.
pub fn spherical_log_pdf_node(tape: &mut Tape, t: NodeId, mu: NodeId, log_sigma: NodeId) -> NodeId {
    let d = tape.dim(t);
    let diff = tape.sub(t, mu);
    let sq = tape.square(diff);
    let ss = tape.sum(sq);
    let m2 = tape.scale(log_sigma, -2.0);
    let inv_var = tape.exp(m2);
    let quad = tape.mul(ss, inv_var);
    let quad = tape.scale(quad, -0.5);
    let norm = tape.scale(log_sigma, -(d as f64));
    let out = tape.add(quad, norm);
    tape.shift(out, -(d as f64) * HALF_LN_2PI)
}

/// Value form of [`spherical_log_pdf_node`].
pub fn spherical_log_pdf(t: &[f64], mu: &[f64], log_sigma: f64) -> f64 {
    let d = t.len() as f64;
    let ss: f64 = t.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum();
    -0.5 * ss * (-2.0 * log_sigma).exp() - d * log_sigma - d * HALF_LN_2PI
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::PI;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn trapezoid<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, n: usize) -> f64 {
        let h = (hi - lo) / n as f64;
        let inner: f64 = (1..n).map(|i| f(lo + i as f64 * h)).sum();
        h * (0.5 * f(lo) + inner + 0.5 * f(hi))
    }

    #[test]
    fn half_ln_2pi_constant() {
        close(HALF_LN_2PI, 0.5 * (2.0 * PI).ln(), 1e-16);
    }

    #[test]
    fn standard_normal_log_pdf() {
        let g = DiagGaussian::standard(1);
        close(g.log_pdf(&[0.0]).unwrap(), -0.918_938_5, 1e-7);
        close(
            g.log_pdf(&[1.0]).unwrap(),
            -0.5 * (2.0 * PI).ln() - 0.5,
            1e-15,
        );
        assert!(g.log_pdf(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn log_pdf_normalizes_under_quadrature() {
        let g = DiagGaussian::spherical(vec![0.3], 0.49).unwrap();
        let total = trapezoid(|x| g.log_pdf(&[x]).unwrap().exp(), -10.0, 10.0, 20_000);
        close(total, 1.0, 1e-8);
        // direct closed form at 1.1
        let expected = -0.5 * (2.0 * PI * 0.49).ln() - 0.5 * 0.8f64.powi(2) / 0.49;
        close(g.log_pdf(&[1.1]).unwrap(), expected, 1e-14);
    }

    #[test]
    fn kl_known_values() {
        let z = DiagGaussian::standard(3);
        assert_eq!(kl_diag(&z, &z).unwrap(), 0.0);
        let a = DiagGaussian::new(vec![1.0], vec![0.0]).unwrap();
        close(kl_diag(&a, &DiagGaussian::standard(1)).unwrap(), 0.5, 1e-15);
        assert!(kl_diag(&a, &z).is_err());
    }

    #[test]
    fn kl_matches_quadrature() {
        let p = DiagGaussian::spherical(vec![1.0], 0.25).unwrap();
        let q = DiagGaussian::standard(1);
        let numeric = trapezoid(
            |x| {
                let lp = p.log_pdf(&[x]).unwrap();
                lp.exp() * (lp - q.log_pdf(&[x]).unwrap())
            },
            -12.0,
            12.0,
            200_000,
        );
        close(kl_diag(&p, &q).unwrap(), numeric, 1e-6);
    }

    #[test]
    fn reparam_examples() {
        let g = DiagGaussian::new(vec![1.0, -2.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(g.sample_reparam(&[0.0, 0.0]).unwrap(), vec![1.0, -2.0]);
        assert_eq!(g.sample_reparam(&[1.0, 1.0]).unwrap(), vec![2.0, -1.0]);
    }

    #[test]
    fn reparam_sample_mean_converges() {
        let g = DiagGaussian::new(vec![0.7], vec![(1.5f64).ln()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| {
                let e: f64 = rng.sample(StandardNormal);
                g.sample_reparam(&[e]).unwrap()[0]
            })
            .sum::<f64>()
            / n as f64;
        let sd = 1.5f64.sqrt();
        assert!((mean - 0.7).abs() < 4.0 * sd / (n as f64).sqrt(), "{mean}");
    }

    fn surrogate() -> ClassSurrogate {
        ClassSurrogate::new(
            vec![vec![1.0, -1.0], vec![-0.5, 2.0]],
            vec![0.2, -0.3],
            vec![0.25, 0.75],
        )
        .unwrap()
    }

    #[test]
    fn surrogate_validation() {
        assert!(ClassSurrogate::new(vec![vec![0.0]], vec![0.0], vec![0.9]).is_err());
        assert!(ClassSurrogate::new(
            vec![vec![0.0], vec![0.0, 1.0]],
            vec![0.0, 0.0],
            vec![0.5, 0.5]
        )
        .is_err());
        assert!(ClassSurrogate::new(vec![vec![0.0]], vec![f64::NAN], vec![1.0]).is_err());
        assert_eq!(
            empirical_priors(&[0, 1, 1, 1], 2).unwrap(),
            vec![0.25, 0.75]
        );
    }

    #[test]
    fn kl_to_own_component_is_zero() {
        let s = surrogate();
        let g = DiagGaussian::spherical(vec![-0.5, 2.0], (-0.6f64).exp()).unwrap();
        close(kl_to_surrogate(&g, &s, 1).unwrap(), 0.0, 1e-15);
        assert!(matches!(
            kl_to_surrogate(&g, &s, 2),
            Err(Error::UnknownClass {
                label: 2,
                classes: 2
            })
        ));
    }

    #[test]
    fn kl_to_surrogate_is_kl_diag_and_additive() {
        let s = surrogate();
        let g = DiagGaussian::new(vec![0.3, 0.1], vec![-0.2, 0.4]).unwrap();
        for y in 0..2 {
            let k = kl_to_surrogate(&g, &s, y).unwrap();
            assert_eq!(k, kl_diag(&g, &s.component(y).unwrap()).unwrap());
            let comp = s.component(y).unwrap();
            let per: f64 = (0..2)
                .map(|j| kl_diag(&g.coordinate(j), &comp.coordinate(j)).unwrap())
                .sum();
            close(k, per, 1e-12);
        }
    }

    #[test]
    fn tape_forms_match_values() {
        let s = surrogate();
        let g = DiagGaussian::new(vec![0.3, 0.1], vec![-0.2, 0.4]).unwrap();
        let store = ParamStore::new(vec![]).unwrap();
        let mut t = Tape::new(&store);
        let m = t.constant(g.mean().to_vec());
        let l = t.constant(g.log_var().to_vec());
        let mu = t.constant(s.class_means()[1].clone());
        let ls = t.scalar_const(s.class_log_sigma()[1]);
        let k = kl_spherical_node(&mut t, m, l, mu, ls);
        close(t.scalar(k), kl_to_surrogate(&g, &s, 1).unwrap(), 1e-14);

        let smp = reparam_node(&mut t, m, l, &[0.5, -1.0]);
        assert_eq!(
            t.value(smp),
            g.sample_reparam(&[0.5, -1.0]).unwrap().as_slice()
        );

        let lp = spherical_log_pdf_node(&mut t, smp, mu, ls);
        let direct = s.component(1).unwrap().log_pdf(t.value(smp)).unwrap();
        close(t.scalar(lp), direct, 1e-13);
        close(
            spherical_log_pdf(t.value(smp), &s.class_means()[1], s.class_log_sigma()[1]),
            direct,
            1e-13,
        );
    }

    #[test]
    fn kl_gradient_wrt_class_mean_passes_grad_check() {
        let store = ParamStore::new(vec![
            ("mu".into(), vec![2], vec![0.4, -1.2]),
            ("log_sigma".into(), vec![1], vec![0.3]),
        ])
        .unwrap();
        let loss = |t: &mut Tape, s: &ParamStore| {
            let m = t.constant(vec![0.3, 0.1]);
            let l = t.constant(vec![-0.2, 0.4]);
            let mu = t.param(s, "mu")?;
            let ls = t.param(s, "log_sigma")?;
            Ok(kl_spherical_node(t, m, l, mu, ls))
        };
        let r = grad_check(loss, &store, 1e-5, 1e-5).unwrap();
        assert!(r.passed, "{r:?}");
    }
}
