//! Element-wise natural exponential families.
//!
//! Every family is written in the natural form `p(x | θ) = exp(x θ + h(x) - g(θ))`
//! with sufficient statistic `s(x) = x`. The log-cumulant `g` fixes the
//! family; its first derivative is the mean of `x`.

use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpFamilyKind {
    /// Bernoulli with logit link, `g(θ) = log(1 + e^θ)`.
    #[serde(alias = "bernoulli_logit")]
    Bernoulli,
    /// Poisson with log link, `g(θ) = e^θ`.
    #[serde(alias = "poisson_log")]
    Poisson,
    /// Unit-variance Gaussian, `g(θ) = θ²/2`.
    #[serde(alias = "gaussian_unit")]
    Gaussian,
    /// Exponential distribution in canonical form: `η < 0`, `g(η) = -log(-η)`,
    /// density `exp(η x + log(-η))` on `x ≥ 0`.
    #[serde(alias = "exponential_rate")]
    Exponential,
}

/// Hyperparameters of the conjugate prior kernel `exp(λ θ - ν g(θ))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConjugateHyper {
    pub lambda: f64,
    pub nu: f64,
}

impl ConjugateHyper {
    pub fn new(lambda: f64, nu: f64) -> Self {
        Self { lambda, nu }
    }

    /// Checks that the induced prior is proper for `family`.
    pub fn validate(&self, family: ExpFamilyKind) -> Result<()> {
        let ok = self.nu > 0.0
            && self.lambda.is_finite()
            && match family {
                ExpFamilyKind::Bernoulli => self.lambda > 0.0 && self.lambda < self.nu,
                ExpFamilyKind::Poisson => self.lambda > 0.0,
                ExpFamilyKind::Gaussian => true,
                ExpFamilyKind::Exponential => self.lambda > 0.0,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::config(
                "a_hyper",
                format!(
                    "lambda = {}, nu = {} does not give a proper conjugate prior for {family:?}",
                    self.lambda, self.nu
                ),
            ))
        }
    }
}

impl Default for ConjugateHyper {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            nu: 0.2,
        }
    }
}

/// `log(1 + e^θ)` without overflow.
pub fn softplus(theta: f64) -> f64 {
    if theta > 0.0 {
        theta + (-theta).exp().ln_1p()
    } else {
        theta.exp().ln_1p()
    }
}

pub fn sigmoid(theta: f64) -> f64 {
    if theta >= 0.0 {
        1.0 / (1.0 + (-theta).exp())
    } else {
        let e = theta.exp();
        e / (1.0 + e)
    }
}

impl ExpFamilyKind {
    pub fn in_domain(self, theta: f64) -> bool {
        match self {
            ExpFamilyKind::Exponential => theta < 0.0,
            _ => !theta.is_nan(),
        }
    }

    /// True when the natural parameter space is a strict subset of the reals.
    pub fn has_restricted_domain(self) -> bool {
        matches!(self, ExpFamilyKind::Exponential)
    }

    pub fn in_support(self, x: f64) -> bool {
        match self {
            ExpFamilyKind::Bernoulli => x == 0.0 || x == 1.0,
            ExpFamilyKind::Poisson => x >= 0.0 && x.fract() == 0.0 && x.is_finite(),
            ExpFamilyKind::Gaussian => x.is_finite(),
            ExpFamilyKind::Exponential => x >= 0.0 && x.is_finite(),
        }
    }

    fn check_domain(self, theta: f64) -> Result<()> {
        if self.in_domain(theta) {
            Ok(())
        } else {
            Err(Error::Domain {
                family: self,
                theta,
            })
        }
    }

    /// `g(θ)`.
    pub fn log_cumulant(self, theta: f64) -> Result<f64> {
        self.check_domain(theta)?;
        Ok(self.log_cumulant_unchecked(theta))
    }

    #[inline]
    pub(crate) fn log_cumulant_unchecked(self, theta: f64) -> f64 {
        match self {
            ExpFamilyKind::Bernoulli => softplus(theta),
            ExpFamilyKind::Poisson => theta.exp(),
            ExpFamilyKind::Gaussian => 0.5 * theta * theta,
            ExpFamilyKind::Exponential => -(-theta).ln(),
        }
    }

    /// `g'(θ)`, the mean of `x`.
    pub fn mean_param(self, theta: f64) -> Result<f64> {
        self.check_domain(theta)?;
        Ok(self.mean_param_unchecked(theta))
    }

    #[inline]
    pub(crate) fn mean_param_unchecked(self, theta: f64) -> f64 {
        match self {
            ExpFamilyKind::Bernoulli => sigmoid(theta),
            ExpFamilyKind::Poisson => theta.exp(),
            ExpFamilyKind::Gaussian => theta,
            ExpFamilyKind::Exponential => -1.0 / theta,
        }
    }

    /// `g''(θ)`, the variance of `x`.
    pub fn variance(self, theta: f64) -> Result<f64> {
        self.check_domain(theta)?;
        Ok(match self {
            ExpFamilyKind::Bernoulli => {
                let p = sigmoid(theta);
                p * (1.0 - p)
            }
            ExpFamilyKind::Poisson => theta.exp(),
            ExpFamilyKind::Gaussian => 1.0,
            ExpFamilyKind::Exponential => 1.0 / (theta * theta),
        })
    }

    /// Base measure `h(x)`.
    fn log_base(self, x: f64) -> f64 {
        match self {
            ExpFamilyKind::Bernoulli | ExpFamilyKind::Exponential => 0.0,
            ExpFamilyKind::Poisson => -ln_gamma(x + 1.0),
            ExpFamilyKind::Gaussian => -0.5 * x * x - HALF_LN_2PI,
        }
    }

    /// `x θ + h(x) - g(θ)`.
    pub fn log_pdf(self, x: f64, theta: f64) -> Result<f64> {
        if !self.in_support(x) {
            return Err(Error::Support { family: self, x });
        }
        self.check_domain(theta)?;
        Ok(self.log_pdf_unchecked(x, theta))
    }

    #[inline]
    pub(crate) fn log_pdf_unchecked(self, x: f64, theta: f64) -> f64 {
        x * theta + self.log_base(x) - self.log_cumulant_unchecked(theta)
    }

    /// Log-density up to terms that do not depend on `θ`.
    #[inline]
    pub(crate) fn log_lik_kernel(self, x: f64, theta: f64) -> f64 {
        x * theta - self.log_cumulant_unchecked(theta)
    }

    /// Draws `x ~ p(x | θ)`.
    pub fn sample<R: Rng + ?Sized>(self, theta: f64, rng: &mut R) -> Result<f64> {
        self.check_domain(theta)?;
        Ok(match self {
            ExpFamilyKind::Bernoulli => {
                if rng.random::<f64>() < sigmoid(theta) {
                    1.0
                } else {
                    0.0
                }
            }
            ExpFamilyKind::Poisson => sample_poisson(theta.exp(), rng),
            ExpFamilyKind::Gaussian => {
                let z: f64 = StandardNormal.sample(rng);
                theta + z
            }
            ExpFamilyKind::Exponential => Exp::new(-theta)
                .map_err(|_| Error::Domain {
                    family: self,
                    theta,
                })?
                .sample(rng),
        })
    }

    /// Unnormalized conjugate prior log-density `λ θ - ν g(θ)`.
    pub fn conj_log_kernel(self, theta: f64, hyper: ConjugateHyper) -> Result<f64> {
        self.check_domain(theta)?;
        Ok(self.conj_log_kernel_unchecked(theta, hyper))
    }

    #[inline]
    pub(crate) fn conj_log_kernel_unchecked(self, theta: f64, hyper: ConjugateHyper) -> f64 {
        hyper.lambda * theta - hyper.nu * self.log_cumulant_unchecked(theta)
    }

    /// Entry-wise natural parameter matched to an observation, used to
    /// start samplers inside the domain and near the data.
    pub fn moment_matched(self, x: f64) -> f64 {
        match self {
            ExpFamilyKind::Bernoulli => {
                let p = (x + 0.5) / 2.0;
                (p / (1.0 - p)).ln()
            }
            ExpFamilyKind::Poisson => (x + 0.5).ln(),
            ExpFamilyKind::Gaussian => x,
            ExpFamilyKind::Exponential => -1.0 / (x + 0.5),
        }
    }
}

fn sample_poisson<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    if !(rate > 0.0) {
        return 0.0;
    }
    if rate < 10.0 {
        // inversion
        let u: f64 = rng.random();
        let mut k = 0.0;
        let mut p = (-rate).exp();
        let mut cdf = p;
        while u > cdf {
            k += 1.0;
            p *= rate / k;
            cdf += p;
            if p == 0.0 && cdf < u {
                break;
            }
        }
        k
    } else {
        Poisson::new(rate)
            .expect("rate is finite and positive")
            .sample(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    const ALL: [ExpFamilyKind; 4] = [
        ExpFamilyKind::Bernoulli,
        ExpFamilyKind::Poisson,
        ExpFamilyKind::Gaussian,
        ExpFamilyKind::Exponential,
    ];

    #[test]
    fn log_cumulant_examples() {
        assert_close(
            ExpFamilyKind::Bernoulli.log_cumulant(0.0).unwrap(),
            2f64.ln(),
            1e-15,
        );
        assert_close(ExpFamilyKind::Poisson.log_cumulant(0.0).unwrap(), 1.0, 0.0);
        assert_close(ExpFamilyKind::Gaussian.log_cumulant(2.0).unwrap(), 2.0, 0.0);
        // no overflow far out in the tails
        assert_close(
            ExpFamilyKind::Bernoulli.log_cumulant(800.0).unwrap(),
            800.0,
            1e-12,
        );
        assert_eq!(ExpFamilyKind::Bernoulli.log_cumulant(-800.0).unwrap(), 0.0);
        assert!(matches!(
            ExpFamilyKind::Exponential.log_cumulant(1.0),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn mean_param_examples() {
        assert_close(ExpFamilyKind::Bernoulli.mean_param(0.0).unwrap(), 0.5, 0.0);
        assert_close(
            ExpFamilyKind::Poisson.mean_param(3f64.ln()).unwrap(),
            3.0,
            1e-14,
        );
        assert_eq!(ExpFamilyKind::Gaussian.mean_param(-1.7).unwrap(), -1.7);
        assert_close(
            ExpFamilyKind::Exponential.mean_param(-2.0).unwrap(),
            0.5,
            0.0,
        );
    }

    #[test]
    fn log_pdf_examples() {
        assert_close(
            ExpFamilyKind::Bernoulli.log_pdf(1.0, 0.0).unwrap(),
            -(2f64.ln()),
            1e-15,
        );
        assert_close(
            ExpFamilyKind::Poisson.log_pdf(2.0, 0.0).unwrap(),
            -1.693_147_180_559_945,
            1e-12,
        );
        assert_close(
            ExpFamilyKind::Gaussian.log_pdf(0.0, 0.0).unwrap(),
            -0.918_938_533_204_672_7,
            1e-15,
        );
        assert!(matches!(
            ExpFamilyKind::Bernoulli.log_pdf(0.5, 0.0),
            Err(Error::Support { .. })
        ));
        assert!(matches!(
            ExpFamilyKind::Poisson.log_pdf(-1.0, 0.0),
            Err(Error::Support { .. })
        ));
        assert!(matches!(
            ExpFamilyKind::Poisson.log_pdf(1.5, 0.0),
            Err(Error::Support { .. })
        ));
    }

    #[test]
    fn sample_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(ExpFamilyKind::Bernoulli.sample(50.0, &mut rng).unwrap(), 1.0);
            assert_eq!(ExpFamilyKind::Poisson.sample(-50.0, &mut rng).unwrap(), 0.0);
        }
        assert!(ExpFamilyKind::Exponential.sample(0.5, &mut rng).is_err());
    }

    #[test]
    fn bernoulli_sample_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| ExpFamilyKind::Bernoulli.sample(0.0, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        assert_close(mean, 0.5, 0.005);
    }

    #[test]
    fn sampler_consistency_all_families() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let cases = [
            (ExpFamilyKind::Bernoulli, 1.3),
            (ExpFamilyKind::Poisson, 0.4),
            (ExpFamilyKind::Poisson, 3.2),
            (ExpFamilyKind::Gaussian, -0.8),
            (ExpFamilyKind::Exponential, -1.5),
        ];
        for (family, theta) in cases {
            let draws: Vec<f64> = (0..n)
                .map(|_| family.sample(theta, &mut rng).unwrap())
                .collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let se = (family.variance(theta).unwrap() / n as f64).sqrt();
            let expected = family.mean_param(theta).unwrap();
            assert!(
                (mean - expected).abs() < 4.0 * se,
                "{family:?} θ={theta}: {mean} vs {expected} (se {se})"
            );
            assert!(draws.iter().all(|&x| family.in_support(x)));
        }
    }

    #[test]
    fn conj_log_kernel_examples() {
        let h = ConjugateHyper::new(0.1, 0.2);
        assert_close(
            ExpFamilyKind::Bernoulli.conj_log_kernel(0.0, h).unwrap(),
            -0.138_629_436_111_989_06,
            1e-12,
        );
        assert_close(
            ExpFamilyKind::Poisson
                .conj_log_kernel(0.0, ConjugateHyper::new(1.0, 1.0))
                .unwrap(),
            -1.0,
            0.0,
        );
    }

    #[test]
    fn conjugate_posterior_mean_matches_beta_closed_form() {
        // prior kernel exp(λθ - ν g(θ)) times the likelihood of five
        // observations, integrated on a θ grid
        let hyper = ConjugateHyper::new(0.1, 0.2);
        let xs = [1.0, 0.0, 1.0, 0.0, 0.0];
        let family = ExpFamilyKind::Bernoulli;
        let (lo, hi, m) = (-60.0, 60.0, 200_001);
        let h = (hi - lo) / (m - 1) as f64;
        let mut z = 0.0;
        let mut first = 0.0;
        for i in 0..m {
            let theta = lo + h * i as f64;
            let lp = family.conj_log_kernel(theta, hyper).unwrap()
                + xs.iter()
                    .map(|&x| family.log_pdf(x, theta).unwrap())
                    .sum::<f64>();
            let w = if i == 0 || i == m - 1 { 0.5 } else { 1.0 } * lp.exp();
            z += w;
            first += w * sigmoid(theta);
        }
        let grid_mean = first / z;
        // posterior on the mean parameter is Beta(λ + s, ν + n - λ - s)
        let s: f64 = xs.iter().sum();
        let n = xs.len() as f64;
        let closed = (hyper.lambda + s) / (hyper.nu + n);
        assert_close(grid_mean, closed, 1e-4);
    }

    #[test]
    fn in_domain_examples() {
        assert!(ExpFamilyKind::Bernoulli.in_domain(-1000.0));
        assert!(ExpFamilyKind::Gaussian.in_domain(0.0));
        assert!(!ExpFamilyKind::Exponential.in_domain(0.5));
        assert!(!ExpFamilyKind::Exponential.in_domain(0.0));
        assert!(ExpFamilyKind::Exponential.in_domain(-0.5));
    }

    #[test]
    fn bernoulli_normalizes() {
        let f = ExpFamilyKind::Bernoulli;
        let mut theta = -30.0;
        while theta <= 30.0 {
            let total = f.log_pdf(0.0, theta).unwrap().exp() + f.log_pdf(1.0, theta).unwrap().exp();
            assert_close(total, 1.0, 1e-12);
            theta += 0.25;
        }
    }

    #[test]
    fn poisson_normalizes() {
        let f = ExpFamilyKind::Poisson;
        for &theta in &[-5.0, -1.0, 0.0, 1.0, 2.0, 3.0] {
            let total: f64 = (0..=200)
                .map(|x| f.log_pdf(x as f64, theta).unwrap().exp())
                .sum();
            assert_close(total, 1.0, 1e-8);
        }
    }

    #[test]
    fn hyper_validation() {
        assert!(ConjugateHyper::new(0.1, 0.2)
            .validate(ExpFamilyKind::Bernoulli)
            .is_ok());
        assert!(ConjugateHyper::new(0.3, 0.2)
            .validate(ExpFamilyKind::Bernoulli)
            .is_err());
        assert!(ConjugateHyper::new(1.0, 0.0)
            .validate(ExpFamilyKind::Poisson)
            .is_err());
    }

    fn domain_point(family: ExpFamilyKind, u: f64) -> f64 {
        match family {
            ExpFamilyKind::Exponential => -(0.05 + 10.0 * u.abs()),
            ExpFamilyKind::Poisson => 10.0 * u,
            _ => 40.0 * u,
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn log_cumulant_is_convex(u in -1.0f64..1.0, which in 0usize..4) {
            let family = ALL[which];
            let theta = domain_point(family, u);
            let h = 1e-3 * (1.0 + theta.abs());
            let g = |t: f64| family.log_cumulant(t).unwrap();
            let second = (g(theta + h) - 2.0 * g(theta) + g(theta - h)) / (h * h);
            prop_assert!(second >= -1e-8, "{family:?} θ={theta}: {second}");
        }

        #[test]
        fn mean_param_is_derivative(u in -1.0f64..1.0, which in 0usize..4) {
            let family = ALL[which];
            let theta = domain_point(family, u);
            let h = 1e-5 * (1.0 + theta.abs());
            let g = |t: f64| family.log_cumulant(t).unwrap();
            let fd = (g(theta + h) - g(theta - h)) / (2.0 * h);
            let mean = family.mean_param(theta).unwrap();
            // absolute floor for Bernoulli tails, where both sides are ~1e-17
            prop_assert!((fd - mean).abs() <= 1e-6 * mean.abs().max(1e-4),
                "{family:?} θ={theta}: {fd} vs {mean}");
        }
    }
}
