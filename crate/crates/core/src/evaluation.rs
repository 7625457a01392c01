//! Synthetic data from the model and the metrics used to compare methods.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::chain::Chain;
use crate::error::{Error, Result};
use crate::expfam::ExpFamilyKind;
use crate::model::{BlockLayout, FactorState, LayoutSpec, ObservationSet};
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub layout: LayoutSpec,
    pub n_train: usize,
    pub n_test: usize,
    /// Standard deviation of the entries of `U`.
    pub latent_scale: f64,
    /// Standard deviation of the free entries of `V`.
    pub loading_scale: f64,
    /// Added to `Θ` in Poisson columns to keep counts small.
    pub poisson_shift: f64,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn new(layout: LayoutSpec, n_train: usize, n_test: usize, seed: u64) -> Self {
        Self {
            layout,
            n_train,
            n_test,
            latent_scale: 1.0,
            loading_scale: 1.0,
            poisson_shift: -1.0,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoupledData {
    pub train: ObservationSet,
    pub test: ObservationSet,
    /// `1` when the first shared latent coordinate is positive, else `0`.
    pub train_labels: Vec<f64>,
    pub test_labels: Vec<f64>,
    /// The generating parameters; rows `0..n_train` are the training rows.
    pub truth: FactorState,
    pub theta: DMatrix<f64>,
}

/// Draws `U`, `V` and `X` from the model described by `spec.layout`.
pub fn generate_coupled(spec: &GeneratorSpec) -> Result<CoupledData> {
    let layout = spec.layout.build()?;
    let n = spec.n_train + spec.n_test;
    let mut rng = stream_rng(spec.seed, 0);
    let mut gauss = |scale: f64| scale * rng.sample::<f64, _>(StandardNormal);
    let u = DMatrix::from_fn(n, layout.k(), |_, _| gauss(spec.latent_scale));
    let v = DMatrix::from_fn(layout.k(), layout.d(), |r, c| {
        let z = gauss(spec.loading_scale);
        if layout.is_free(r, c) { z } else { 0.0 }
    });
    let mut theta = &u * &v;
    for col in 0..layout.d() {
        let family = layout.family_of_col(col);
        for t in theta.column_mut(col).iter_mut() {
            match family {
                ExpFamilyKind::Poisson => *t += spec.poisson_shift,
                ExpFamilyKind::Exponential => *t = -t.exp(),
                _ => {}
            }
        }
    }
    let mut rng = stream_rng(spec.seed, 1);
    let mut x = DMatrix::zeros(n, layout.d());
    for col in 0..layout.d() {
        let family = layout.family_of_col(col);
        for row in 0..n {
            x[(row, col)] = family.sample(theta[(row, col)], &mut rng)?;
        }
    }
    let labels: Vec<f64> = (0..n).map(|r| if u[(r, 0)] > 0.0 { 1.0 } else { 0.0 }).collect();

    let split = |rows: std::ops::Range<usize>| -> Result<ObservationSet> {
        let idx: Vec<usize> = rows.collect();
        let xs = x.select_rows(&idx);
        let mask = DMatrix::from_element(idx.len(), layout.d(), true);
        ObservationSet::for_layout(xs, mask, &layout)
    };
    Ok(CoupledData {
        train: split(0..spec.n_train)?,
        test: split(spec.n_train..n)?,
        train_labels: labels[..spec.n_train].to_vec(),
        test_labels: labels[spec.n_train..].to_vec(),
        truth: FactorState { u, v, mean_row: None },
        theta,
    })
}

/// Misclassification rate at threshold 0.5 for Bernoulli targets, mean
/// squared error of the means otherwise.
pub fn prediction_error(predicted_means: &[f64], targets: &[f64], family: ExpFamilyKind) -> Result<f64> {
    if predicted_means.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            predicted_means.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let n = targets.len() as f64;
    Ok(match family {
        ExpFamilyKind::Bernoulli => {
            let wrong = predicted_means
                .iter()
                .zip(targets)
                .filter(|(&m, &t)| (m > 0.5) != (t > 0.5))
                .count();
            wrong as f64 / n
        }
        _ => predicted_means.iter().zip(targets).map(|(m, t)| (m - t).powi(2)).sum::<f64>() / n,
    })
}

fn check_holdout(full: &ObservationSet, train_mask: &DMatrix<bool>, holdout: &DMatrix<bool>) -> Result<()> {
    if holdout.shape() != full.x().shape() || train_mask.shape() != holdout.shape() {
        return Err(Error::Shape("holdout mask shape differs from data".into()));
    }
    for ((&h, &t), &o) in holdout.iter().zip(train_mask.iter()).zip(full.observed().iter()) {
        if h && t {
            return Err(Error::Mask("holdout overlaps the training mask".into()));
        }
        if h && !o {
            return Err(Error::Mask("holdout contains unobserved entries".into()));
        }
    }
    Ok(())
}

/// Log-likelihood of the held-out entries at a fitted `Θ`.
pub fn heldout_loglik(
    full: &ObservationSet,
    train_mask: &DMatrix<bool>,
    holdout: &DMatrix<bool>,
    theta: &DMatrix<f64>,
    layout: &BlockLayout,
) -> Result<f64> {
    check_holdout(full, train_mask, holdout)?;
    if theta.shape() != full.x().shape() {
        return Err(Error::Shape("Θ shape differs from data".into()));
    }
    let mut total = 0.0;
    for col in 0..full.d() {
        let family = layout.family_of_col(col);
        for row in 0..full.n() {
            if holdout[(row, col)] {
                total += family.log_pdf(full.x()[(row, col)], theta[(row, col)])?;
            }
        }
    }
    Ok(total)
}

/// Held-out log predictive density under a chain: for every held-out entry
/// the log of the mean over samples of `p(x | Θ_s)`, summed over entries.
pub fn heldout_loglik_chain(
    full: &ObservationSet,
    train_mask: &DMatrix<bool>,
    holdout: &DMatrix<bool>,
    chain: &Chain,
    layout: &BlockLayout,
) -> Result<f64> {
    check_holdout(full, train_mask, holdout)?;
    if chain.is_empty() {
        return Err(Error::Chain("chain has no samples".into()));
    }
    let s = chain.len() as f64;
    let mut total = 0.0;
    let mut terms = Vec::with_capacity(chain.len());
    for col in 0..full.d() {
        let family = layout.family_of_col(col);
        for row in 0..full.n() {
            if !holdout[(row, col)] {
                continue;
            }
            terms.clear();
            for sample in &chain.samples {
                terms.push(family.log_pdf(full.x()[(row, col)], sample.theta[(row, col)])?);
            }
            let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            total += m + (terms.iter().map(|t| (t - m).exp()).sum::<f64>() / s).ln();
        }
    }
    Ok(total)
}

/// Cross-validated misclassification rate of a `k`-nearest-neighbour
/// classifier (Euclidean distance, majority vote) on the rows of `latent`.
/// Row `i` belongs to fold `i % folds`; distance ties go to the lower index.
pub fn knn_latent_error(latent: &DMatrix<f64>, labels: &[f64], k: usize, folds: usize) -> Result<f64> {
    let n = latent.nrows();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if k == 0 || k % 2 == 0 {
        return Err(Error::config("knn.k", "must be odd"));
    }
    if !(2..=n).contains(&folds) {
        return Err(Error::config("knn.folds", format!("must be in 2..={n}")));
    }
    let smallest_train = n - n.div_ceil(folds);
    if k >= n || k > smallest_train {
        return Err(Error::config("knn.k", format!("{k} neighbours but only {smallest_train} training rows per fold")));
    }
    let mut wrong = 0usize;
    for i in 0..n {
        let fold = i % folds;
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j % folds != fold)
            .map(|j| ((latent.row(i) - latent.row(j)).norm_squared(), j))
            .collect();
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let ones = dists[..k].iter().filter(|(_, j)| labels[*j] > 0.5).count();
        let predicted = 2 * ones > k;
        if predicted != (labels[i] > 0.5) {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / n as f64)
}

/// Empirical autocorrelation for lags `0..=max_lag`.
pub fn acf(trace: &[f64], max_lag: usize) -> Vec<f64> {
    let n = trace.len();
    let mean = trace.iter().sum::<f64>() / n as f64;
    let c0 = trace.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
    (0..=max_lag.min(n.saturating_sub(1)))
        .map(|lag| {
            if c0 == 0.0 {
                return f64::NAN;
            }
            (0..n - lag).map(|t| (trace[t] - mean) * (trace[t + lag] - mean)).sum::<f64>() / c0
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncorrelatedTime {
    /// First lag with autocorrelation below 0.1.
    pub lag: Option<usize>,
    pub seconds: f64,
    /// The autocorrelation never dropped below 0.1 within half the trace.
    pub flagged: bool,
}

/// First lag with autocorrelation below 0.1, times `seconds_per_sample`.
pub fn time_between_uncorrelated_trace(trace: &[f64], seconds_per_sample: f64) -> Result<UncorrelatedTime> {
    if trace.len() < 100 {
        return Err(Error::Stat(format!("need at least 100 samples, got {}", trace.len())));
    }
    let rho = acf(trace, trace.len() / 2);
    match rho.iter().position(|&r| r < 0.1) {
        Some(lag) => Ok(UncorrelatedTime {
            lag: Some(lag),
            seconds: lag as f64 * seconds_per_sample,
            flagged: false,
        }),
        None => Ok(UncorrelatedTime {
            lag: None,
            seconds: f64::INFINITY,
            flagged: true,
        }),
    }
}

/// [`time_between_uncorrelated_trace`] on the chain's log-likelihood trace.
pub fn time_between_uncorrelated(chain: &Chain) -> Result<UncorrelatedTime> {
    time_between_uncorrelated_trace(&chain.log_lik_trace(), chain.mean_sample_seconds())
}

/// Bonferroni-corrected two-sided paired t-test p-value.
pub fn paired_significance(a: &[f64], b: &[f64], n_comparisons: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape("paired samples differ in length".into()));
    }
    let n = a.len();
    if n < 3 {
        return Err(Error::Stat(format!("need at least 3 replicates, got {n}")));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let scale = n_comparisons.max(1) as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 { 1.0 } else { (f64::MIN_POSITIVE * scale).min(1.0) });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Stat(e.to_string()))?;
    let p = 2.0 * dist.sf(t.abs());
    Ok((p.max(f64::MIN_POSITIVE) * scale).min(1.0))
}

/// Monte Carlo standard error of the trace mean by non-overlapping batch
/// means with about `sqrt(n)` batches.
pub fn mcse(trace: &[f64]) -> f64 {
    let n = trace.len();
    if n < 4 {
        return f64::NAN;
    }
    let batches = (n as f64).sqrt().floor() as usize;
    let size = n / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| trace[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

/// AR(1) trace `x_t = φ x_{t-1} + ε_t`, used to exercise the diagnostics.
pub fn ar1_trace<R: Rng + ?Sized>(phi: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let mut x = 0.0;
    let innov = (1.0 - phi * phi).sqrt();
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            x = phi * x + innov * z;
            x
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::ChainSample;
    use crate::expfam::ExpFamilyKind::*;
    use crate::model::{make_layout, Dims, ModelKind};

    fn epls_spec(seed: u64) -> GeneratorSpec {
        let layout = make_layout(
            ModelKind::Epls,
            Dims { d1: 1, d2: 20, k_shared: 1, k_first: 0, k_second: 5 },
            [Bernoulli, Bernoulli],
            [1.0, 1.0],
        )
        .unwrap();
        GeneratorSpec::new(layout.spec(), 50, 950, seed)
    }

    #[test]
    fn generator_shapes_and_determinism() {
        let a = generate_coupled(&epls_spec(3)).unwrap();
        let b = generate_coupled(&epls_spec(3)).unwrap();
        assert_eq!(a.train.x().shape(), (50, 21));
        assert_eq!(a.test.x().shape(), (950, 21));
        assert_eq!(a.train.x(), b.train.x());
        assert_eq!(a.test_labels, b.test_labels);
        assert!(a.train.x().iter().all(|&x| x == 0.0 || x == 1.0));
        // EPLS: specific components never touch the target column
        assert!((1..6).all(|k| a.truth.v[(k, 0)] == 0.0));

        let ecca = make_layout(
            ModelKind::Ecca,
            Dims { d1: 20, d2: 20, k_shared: 1, k_first: 2, k_second: 2 },
            [Poisson, Poisson],
            [1.0, 1.0],
        )
        .unwrap();
        let c = generate_coupled(&GeneratorSpec::new(ecca.spec(), 50, 0, 1)).unwrap();
        assert_eq!(c.train.x().shape(), (50, 40));
        for (r, &l) in c.train_labels.iter().enumerate() {
            assert_eq!(l > 0.5, c.truth.u[(r, 0)] > 0.0);
        }
    }

    #[test]
    fn prediction_error_cases() {
        assert_eq!(prediction_error(&[1.0, 0.0], &[1.0, 0.0], Bernoulli).unwrap(), 0.0);
        // 0.5 is not above the threshold, so every positive is missed
        assert_eq!(prediction_error(&[0.5; 4], &[1.0, 0.0, 1.0, 0.0], Bernoulli).unwrap(), 0.5);
        // hand count: 0.9→1 right, 0.4→0 wrong, 0.6→1 wrong, 0.2→0 right
        assert_eq!(prediction_error(&[0.9, 0.4, 0.6, 0.2], &[1.0, 1.0, 0.0, 0.0], Bernoulli).unwrap(), 0.5);
        assert_eq!(prediction_error(&[1.0, 3.0], &[2.0, 3.0], Poisson).unwrap(), 0.5);
        assert!(matches!(prediction_error(&[1.0], &[], Bernoulli), Err(Error::Shape(_))));
    }

    fn single_entry() -> (ObservationSet, BlockLayout) {
        let layout = make_layout(
            ModelKind::Epca,
            Dims { d1: 2, d2: 0, k_shared: 1, k_first: 0, k_second: 0 },
            [Bernoulli, Bernoulli],
            [1.0, 1.0],
        )
        .unwrap();
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        (ObservationSet::for_layout(x, DMatrix::from_element(1, 2, true), &layout).unwrap(), layout)
    }

    #[test]
    fn heldout_loglik_cases() {
        let (full, layout) = single_entry();
        let theta = DMatrix::zeros(1, 2);
        let train = DMatrix::from_row_slice(1, 2, &[false, true]);
        let none = DMatrix::from_element(1, 2, false);
        assert_eq!(heldout_loglik(&full, &train, &none, &theta, &layout).unwrap(), 0.0);
        let hold = DMatrix::from_row_slice(1, 2, &[true, false]);
        let ll = heldout_loglik(&full, &train, &hold, &theta, &layout).unwrap();
        assert!((ll + 2f64.ln()).abs() < 1e-15);
        let overlap = DMatrix::from_row_slice(1, 2, &[true, true]);
        assert!(matches!(heldout_loglik(&full, &train, &overlap, &theta, &layout), Err(Error::Mask(_))));
    }

    #[test]
    fn chain_heldout_is_log_mean_likelihood() {
        let (full, layout) = single_entry();
        let mut chain = Chain::new("test", 0, layout.spec());
        let start = std::time::Instant::now();
        let thetas = [0.3, -1.2, 2.0];
        for &t in &thetas {
            chain.push(
                ChainSample {
                    state: FactorState::zeros(1, &layout),
                    theta: DMatrix::from_row_slice(1, 2, &[t, -t]),
                    prior: None,
                    log_lik: 0.0,
                },
                &start,
            );
        }
        let train = DMatrix::from_element(1, 2, false);
        let hold = DMatrix::from_element(1, 2, true);
        let got = heldout_loglik_chain(&full, &train, &hold, &chain, &layout).unwrap();
        let sig = |t: f64| 1.0 / (1.0 + (-t).exp());
        let p1: f64 = thetas.iter().map(|&t| sig(t)).sum::<f64>() / 3.0;
        let p0: f64 = thetas.iter().map(|&t| 1.0 - sig(-t)).sum::<f64>() / 3.0;
        assert!((got - (p1.ln() + p0.ln())).abs() < 1e-12);
    }

    #[test]
    fn knn_trivial_cases() {
        let n = 40;
        let latent = DMatrix::from_fn(n, 2, |r, c| if r < n / 2 { -10.0 + (r + c) as f64 * 0.01 } else { 10.0 + c as f64 });
        let labels: Vec<f64> = (0..n).map(|r| if r < n / 2 { 0.0 } else { 1.0 }).collect();
        assert_eq!(knn_latent_error(&latent, &labels, 9, 10).unwrap(), 0.0);
        assert!(matches!(knn_latent_error(&latent, &labels, 41, 10), Err(Error::Config { .. })));

        let mut rng = stream_rng(2, 0);
        let n = 2000;
        let latent = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let labels: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        let err = knn_latent_error(&latent, &labels, 9, 10).unwrap();
        // binomial sd at n = 2000 is about 0.011
        assert!((err - 0.5).abs() < 0.045, "{err}");
    }

    #[test]
    fn knn_matches_exhaustive_enumeration() {
        let pts: [(f64, f64, f64); 12] = [
            (0.0, 0.0, 0.0), (1.0, 0.2, 0.0), (0.3, 1.1, 1.0), (2.0, 2.0, 1.0),
            (2.5, 1.0, 1.0), (-1.0, 0.5, 0.0), (0.7, -0.8, 0.0), (3.0, 0.1, 1.0),
            (-0.4, 2.2, 1.0), (1.6, -1.3, 0.0), (2.2, 2.9, 1.0), (-1.5, -1.5, 0.0),
        ];
        let latent = DMatrix::from_fn(12, 2, |r, c| if c == 0 { pts[r].0 } else { pts[r].1 });
        let labels: Vec<f64> = pts.iter().map(|p| p.2).collect();
        for (k, folds) in [(1, 12), (3, 4), (3, 3), (5, 2)] {
            // brute force: every training subset member is ranked by exact
            // distance through a full comparison count
            let mut wrong = 0;
            for i in 0..12 {
                let train: Vec<usize> = (0..12).filter(|j| j % folds != i % folds).collect();
                let d = |j: usize| (pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2);
                let neighbours: Vec<usize> = train
                    .iter()
                    .copied()
                    .filter(|&j| {
                        let closer = train.iter().filter(|&&m| d(m) < d(j) || (d(m) == d(j) && m < j)).count();
                        closer < k
                    })
                    .collect();
                assert_eq!(neighbours.len(), k);
                let ones = neighbours.iter().filter(|&&j| labels[j] == 1.0).count();
                if (2 * ones > k) != (labels[i] == 1.0) {
                    wrong += 1;
                }
            }
            let expect = wrong as f64 / 12.0;
            assert_eq!(knn_latent_error(&latent, &labels, k, folds).unwrap(), expect, "k={k} folds={folds}");
        }
    }

    #[test]
    fn uncorrelated_time_cases() {
        let mut rng = stream_rng(4, 0);
        let iid: Vec<f64> = (0..5000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let t = time_between_uncorrelated_trace(&iid, 0.25).unwrap();
        assert_eq!(t.lag, Some(1));
        assert_eq!(t.seconds, 0.25);

        // 0.8^10 = 0.107, 0.8^11 = 0.086
        assert!(0.8f64.powi(10) >= 0.1 && 0.8f64.powi(11) < 0.1);
        let ar = ar1_trace(0.8, 200_000, &mut rng);
        assert_eq!(time_between_uncorrelated_trace(&ar, 1.0).unwrap().lag, Some(11));

        let flat = vec![1.0; 200];
        let t = time_between_uncorrelated_trace(&flat, 1.0).unwrap();
        assert!(t.flagged && t.seconds.is_infinite());
        assert!(time_between_uncorrelated_trace(&flat[..50], 1.0).is_err());
    }

    #[test]
    fn uncorrelated_time_grows_with_ar_coefficient() {
        let mut last = 0;
        for phi in [0.0, 0.3, 0.6, 0.8, 0.9, 0.95] {
            let mut rng = stream_rng(5, 0);
            let lag = time_between_uncorrelated_trace(&ar1_trace(phi, 100_000, &mut rng), 1.0).unwrap().lag.unwrap();
            assert!(lag >= last, "phi {phi}: {lag} < {last}");
            last = lag;
        }
    }

    /// Student t CDF by Simpson integration of the density.
    fn t_sf_by_quadrature(t: f64, nu: f64) -> f64 {
        let ln_c = statrs::function::gamma::ln_gamma((nu + 1.0) / 2.0)
            - statrs::function::gamma::ln_gamma(nu / 2.0)
            - 0.5 * (nu * std::f64::consts::PI).ln();
        let pdf = |x: f64| (ln_c - (nu + 1.0) / 2.0 * (1.0 + x * x / nu).ln()).exp();
        // integrate from 0 to t and use symmetry
        let m = 20_000;
        let h = t / m as f64;
        let mut s = pdf(0.0) + pdf(t);
        for i in 1..m {
            s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        0.5 - s * h / 3.0
    }

    #[test]
    fn paired_test_cases() {
        let a = [0.3, 0.2, 0.5, 0.4];
        assert_eq!(paired_significance(&a, &a, 3).unwrap(), 1.0);
        let b: Vec<f64> = a.iter().map(|x| x - 1.0).collect();
        assert_eq!(paired_significance(&a, &b, 1).unwrap(), f64::MIN_POSITIVE);
        assert!(matches!(paired_significance(&a[..2], &a[..2], 1), Err(Error::Stat(_))));

        let x = [0.31, 0.28, 0.35, 0.30, 0.27, 0.33, 0.29, 0.36, 0.32, 0.30];
        let y = [0.29, 0.27, 0.30, 0.31, 0.24, 0.30, 0.28, 0.31, 0.30, 0.27];
        let d: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let mean = d.iter().sum::<f64>() / 10.0;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0).sqrt();
        let t = mean / (sd / 10f64.sqrt());
        let expect = 2.0 * t_sf_by_quadrature(t, 9.0);
        let got = paired_significance(&x, &y, 1).unwrap();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        assert!((paired_significance(&x, &y, 4).unwrap() - (4.0 * expect).min(1.0)).abs() < 1e-9);
    }

    #[test]
    fn mcse_of_iid_trace() {
        let mut rng = stream_rng(6, 0);
        let iid: Vec<f64> = (0..10_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let se = mcse(&iid);
        assert!((se / 0.01 - 1.0).abs() < 0.3, "{se}");
    }
}
