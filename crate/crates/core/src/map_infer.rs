//! MAP estimation by conjugate gradients and the two-stage cross-validation
//! used to pick prior hyperparameters.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::ConjugateHyper;
use crate::model::{
    assemble_theta, log_likelihood_grad_theta, BlockLayout, FactorState, ObservationSet,
    ParamPacking,
};
use crate::optim::{self, CgOptions, Objective, TraceRow};
use crate::prior::{add_gaussian_grad, log_a_grad_theta, log_prior_with_theta, PriorSpec};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapOptions {
    pub max_iter: usize,
    /// Sup-norm gradient tolerance; `None` means `1e-5 · sqrt(N·D)`.
    pub grad_tol: Option<f64>,
    pub restarts: usize,
    pub seed: u64,
    pub init_sd: f64,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            grad_tol: None,
            restarts: 1,
            seed: 0,
            init_sd: 0.01,
        }
    }
}

impl MapOptions {
    fn cg(&self, n: usize, d: usize) -> CgOptions {
        CgOptions {
            max_iter: self.max_iter,
            grad_tol: self
                .grad_tol
                .unwrap_or_else(|| 1e-5 * ((n * d) as f64).sqrt()),
            ..CgOptions::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct MapFit {
    pub state: FactorState,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Per-iteration trace of the winning restart.
    pub trace: Vec<TraceRow>,
    /// Final objective of every restart, in restart order.
    pub restart_objectives: Vec<f64>,
}

/// Observed-entry log-likelihood, or `None` if an observed `Θ` entry is out of
/// its family's domain.
fn loglik_checked(obs: &ObservationSet, theta: &DMatrix<f64>, layout: &BlockLayout) -> Option<f64> {
    let mut total = 0.0;
    for col in 0..obs.d() {
        let family = layout.family_of_col(col);
        let alpha = layout.alpha_of_col(col);
        let mut col_sum = 0.0;
        for row in 0..obs.n() {
            if obs.is_observed(row, col) {
                let t = theta[(row, col)];
                if !family.in_domain(t) {
                    return None;
                }
                col_sum += family.log_pdf_unchecked(obs.x()[(row, col)], t);
            }
        }
        total += alpha * col_sum;
    }
    Some(total)
}

/// `-(log-likelihood + log prior)`; `+∞` wherever the posterior vanishes.
pub fn objective(
    state: &FactorState,
    obs: &ObservationSet,
    layout: &BlockLayout,
    spec: &PriorSpec,
) -> Result<f64> {
    let theta = assemble_theta(state, layout)?;
    if obs.x().shape() != theta.shape() {
        return Err(Error::Shape("data and state disagree on N or D".into()));
    }
    Ok(objective_at(state, &theta, obs, layout, spec))
}

fn objective_at(
    state: &FactorState,
    theta: &DMatrix<f64>,
    obs: &ObservationSet,
    layout: &BlockLayout,
    spec: &PriorSpec,
) -> f64 {
    let prior = log_prior_with_theta(state, theta, spec, layout);
    if prior == f64::NEG_INFINITY {
        return f64::INFINITY;
    }
    match loglik_checked(obs, theta, layout) {
        Some(ll) => -(ll + prior),
        None => f64::INFINITY,
    }
}

/// Gradient of [`objective`] with respect to `U`, `V` and the mean row.
pub fn objective_grad(
    state: &FactorState,
    obs: &ObservationSet,
    layout: &BlockLayout,
    spec: &PriorSpec,
) -> Result<(DMatrix<f64>, DMatrix<f64>, Option<DVector<f64>>)> {
    let theta = assemble_theta(state, layout)?;
    let mut g_theta = log_likelihood_grad_theta(obs, &theta, layout);
    g_theta += log_a_grad_theta(&theta, spec, layout)?;
    let mut gu = &g_theta * state.v.transpose();
    let mut gv = state.u.transpose() * &g_theta;
    add_gaussian_grad(state, spec, layout, &mut gu, &mut gv);
    for k in 0..layout.k() {
        for d in 0..layout.d() {
            if !layout.is_free(k, d) {
                gv[(k, d)] = 0.0;
            }
        }
    }
    let gm = layout
        .use_mean_row()
        .then(|| DVector::from_iterator(layout.d(), g_theta.column_iter().map(|c| -c.sum())));
    Ok((-gu, -gv, gm))
}

/// The posterior as a function of the packed free coordinates.
pub(crate) struct PackedPosterior<'a> {
    pub obs: &'a ObservationSet,
    pub layout: &'a BlockLayout,
    pub spec: &'a PriorSpec,
    pub packing: ParamPacking,
}

impl<'a> PackedPosterior<'a> {
    pub fn new(obs: &'a ObservationSet, layout: &'a BlockLayout, spec: &'a PriorSpec) -> Self {
        Self {
            obs,
            layout,
            spec,
            packing: ParamPacking::new(obs.n(), layout),
        }
    }

    fn theta(&self, state: &FactorState) -> DMatrix<f64> {
        assemble_theta(state, self.layout).expect("packing matches layout")
    }

    /// Negative log posterior (up to a constant).
    pub fn energy(&self, x: &DVector<f64>) -> f64 {
        let state = self.packing.unpack(x);
        let theta = self.theta(&state);
        objective_at(&state, &theta, self.obs, self.layout, self.spec)
    }

    /// Energy and its gradient; the gradient is `None` when the energy is not
    /// finite.
    pub fn energy_and_grad(&self, x: &DVector<f64>) -> (f64, Option<DVector<f64>>) {
        let state = self.packing.unpack(x);
        let theta = self.theta(&state);
        let e = objective_at(&state, &theta, self.obs, self.layout, self.spec);
        if !e.is_finite() {
            return (e, None);
        }
        let (gu, gv, gm) = objective_grad(&state, self.obs, self.layout, self.spec)
            .expect("finite energy implies in-domain Θ");
        (e, Some(self.packing.pack_parts(&gu, &gv, gm.as_ref())))
    }
}

impl Objective for PackedPosterior<'_> {
    fn value(&mut self, x: &DVector<f64>) -> f64 {
        self.energy(x)
    }

    fn value_and_grad(&mut self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let (e, g) = self.energy_and_grad(x);
        (e, g.unwrap_or_else(|| DVector::from_element(x.len(), f64::NAN)))
    }
}

/// MAP estimate from a given starting state.
pub fn fit_map_from(
    obs: &ObservationSet,
    layout: &BlockLayout,
    spec: &PriorSpec,
    opts: &MapOptions,
    init: FactorState,
) -> Result<MapFit> {
    let mut posterior = PackedPosterior::new(obs, layout, spec);
    let x0 = posterior.packing.pack(&init);
    let cg = opts.cg(obs.n(), obs.d());
    let out = optim::minimize(&mut posterior, x0, &cg)
        .ok_or_else(|| Error::Fit("objective is not finite at the initial state".into()))?;
    if !out.value.is_finite() {
        return Err(Error::Fit("objective diverged".into()));
    }
    Ok(MapFit {
        state: posterior.packing.unpack(&out.x),
        objective: out.value,
        converged: out.converged,
        iterations: out.iterations,
        trace: out.trace,
        restart_objectives: vec![out.value],
    })
}

/// MAP estimate by conjugate gradients, best of `opts.restarts` random
/// initializations.
pub fn fit_map(
    obs: &ObservationSet,
    layout: &BlockLayout,
    spec: &PriorSpec,
    opts: &MapOptions,
) -> Result<MapFit> {
    if opts.max_iter == 0 {
        return Err(Error::config("engine.max_iter", "must be at least 1"));
    }
    check_inputs(obs, layout, spec)?;
    let restarts = opts.restarts.max(1);
    let mut best: Option<MapFit> = None;
    let mut objectives = Vec::with_capacity(restarts);
    let mut last_err = None;
    for r in 0..restarts {
        let mut rng = stream_rng(opts.seed, r as u64);
        let init = FactorState::random_init(obs.n(), layout, opts.init_sd, &mut rng);
        match fit_map_from(obs, layout, spec, opts, init) {
            Ok(fit) => {
                objectives.push(fit.objective);
                if best.as_ref().is_none_or(|b| fit.objective < b.objective) {
                    best = Some(fit);
                }
            }
            Err(e) => {
                objectives.push(f64::INFINITY);
                last_err = Some(e);
            }
        }
    }
    match best {
        Some(mut fit) => {
            fit.restart_objectives = objectives;
            Ok(fit)
        }
        None => Err(Error::Fit(format!(
            "all {restarts} restarts diverged (last error: {})",
            last_err.map(|e| e.to_string()).unwrap_or_default()
        ))),
    }
}

pub(crate) fn check_inputs(obs: &ObservationSet, layout: &BlockLayout, spec: &PriorSpec) -> Result<()> {
    let dims = layout.dims();
    if obs.view_widths() != [dims.d1, dims.d2] {
        return Err(Error::Shape(format!(
            "data views {:?} do not match layout [{}, {}]",
            obs.view_widths(),
            dims.d1,
            dims.d2
        )));
    }
    if obs.families()[..layout.n_views()] != layout.families()[..layout.n_views()] {
        return Err(Error::config(
            "layout.families",
            "data and layout disagree on the view families",
        ));
    }
    spec.validate(layout)
}

/// Candidate hyperparameters for [`cv_select_hyperparams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvGrid {
    /// Candidates for `(λ, ν)`, scored with `β = 1, γ = 0`.
    pub a_hyper: Vec<ConjugateHyper>,
    /// Candidates for `(σ²_U, σ²_V)`, scored with `β = 0, γ = 1`.
    pub variances: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvOptions {
    pub folds: usize,
    pub seed: u64,
    pub map: MapOptions,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            folds: 10,
            seed: 0,
            map: MapOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CvReport {
    pub a_scores: Vec<(ConjugateHyper, f64)>,
    pub variance_scores: Vec<((f64, f64), f64)>,
    pub selected: PriorSpec,
}

/// Splits the observed entries into `folds` disjoint groups of near-equal
/// size that together cover every observed entry.
pub fn cv_folds(obs: &ObservationSet, folds: usize, seed: u64) -> Result<Vec<DMatrix<bool>>> {
    if folds < 2 {
        return Err(Error::config("cv.folds", "at least two folds are required"));
    }
    let mut entries: Vec<(usize, usize)> = (0..obs.d())
        .flat_map(|c| (0..obs.n()).map(move |r| (r, c)))
        .filter(|&(r, c)| obs.is_observed(r, c))
        .collect();
    if entries.len() < folds {
        return Err(Error::config("cv.folds", "more folds than observed entries"));
    }
    entries.shuffle(&mut stream_rng(seed, 0));
    let mut out = vec![DMatrix::from_element(obs.n(), obs.d(), false); folds];
    for (i, (r, c)) in entries.into_iter().enumerate() {
        out[i % folds][(r, c)] = true;
    }
    Ok(out)
}

/// Log-likelihood of the entries marked in `holdout` at `Θ` (unweighted).
pub(crate) fn masked_loglik(
    obs: &ObservationSet,
    theta: &DMatrix<f64>,
    holdout: &DMatrix<bool>,
    layout: &BlockLayout,
) -> Result<f64> {
    let mut total = 0.0;
    for col in 0..obs.d() {
        let family = layout.family_of_col(col);
        for row in 0..obs.n() {
            if holdout[(row, col)] {
                total += family.log_pdf(obs.x()[(row, col)], theta[(row, col)])?;
            }
        }
    }
    Ok(total)
}

fn cv_score(
    obs: &ObservationSet,
    layout: &BlockLayout,
    spec: &PriorSpec,
    folds: &[DMatrix<bool>],
    opts: &CvOptions,
) -> Result<f64> {
    let mut total = 0.0;
    for (f, fold) in folds.iter().enumerate() {
        let train_mask = obs.observed().zip_map(fold, |o, h| o && !h);
        let train = obs.with_mask(train_mask)?;
        let map = MapOptions {
            seed: opts.map.seed.wrapping_add(f as u64),
            ..opts.map
        };
        let fit = fit_map(&train, layout, spec, &map)?;
        let theta = assemble_theta(&fit.state, layout)?;
        total += masked_loglik(obs, &theta, fold, layout)?;
    }
    Ok(total)
}

/// Index of the best score; scores within a relative `1e-6` of the best
/// count as ties and go to the earliest candidate.
fn argmax_first(scores: &[f64]) -> usize {
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-6 * best.abs().max(1.0);
    scores
        .iter()
        .position(|&s| s >= best - tol)
        .unwrap_or(0)
}

/// Two independent cross-validation searches: the conjugate hyperparameters
/// at `β = 1` and the Gaussian variances at `β = 0`. The winners are combined
/// into a prior with the requested `β` and `γ = 1 - β`.
pub fn cv_select_hyperparams(
    obs: &ObservationSet,
    layout: &BlockLayout,
    grid: &CvGrid,
    beta: f64,
    opts: &CvOptions,
) -> Result<CvReport> {
    if grid.a_hyper.is_empty() || grid.variances.is_empty() {
        return Err(Error::config("cv.grid", "candidate grid is empty"));
    }
    let k = layout.k();
    let folds = cv_folds(obs, opts.folds, opts.seed)?;

    let mut a_scores = Vec::with_capacity(grid.a_hyper.len());
    for &hyper in &grid.a_hyper {
        let spec = PriorSpec::interpolating(1.0, hyper, 1.0, 1.0, k);
        a_scores.push((hyper, cv_score(obs, layout, &spec, &folds, opts)?));
    }
    let mut variance_scores = Vec::with_capacity(grid.variances.len());
    for &(su, sv) in &grid.variances {
        let spec = PriorSpec::interpolating(0.0, ConjugateHyper::default(), su, sv, k);
        variance_scores.push(((su, sv), cv_score(obs, layout, &spec, &folds, opts)?));
    }

    let best_a = a_scores[argmax_first(&a_scores.iter().map(|s| s.1).collect::<Vec<_>>())].0;
    let (su, sv) =
        variance_scores[argmax_first(&variance_scores.iter().map(|s| s.1).collect::<Vec<_>>())].0;
    let selected = PriorSpec::interpolating(beta, best_a, su, sv, k);
    Ok(CvReport {
        a_scores,
        variance_scores,
        selected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::ExpFamilyKind::{self, *};
    use crate::model::{make_layout, Dims, ModelKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn epca(d: usize, k: usize, fam: ExpFamilyKind) -> BlockLayout {
        make_layout(
            ModelKind::Epca,
            Dims { d1: d, d2: 0, k_shared: k, k_first: 0, k_second: 0 },
            [fam, fam],
            [1.0, 1.0],
        )
        .unwrap()
    }

    fn synth(layout: &BlockLayout, n: usize, seed: u64) -> ObservationSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = FactorState::random_init(n, layout, 1.0, &mut rng);
        let theta = assemble_theta(&truth, layout).unwrap();
        let x = DMatrix::from_fn(n, layout.d(), |r, c| {
            layout.family_of_col(c).sample(theta[(r, c)], &mut rng).unwrap()
        });
        ObservationSet::for_layout(x, DMatrix::from_element(n, layout.d(), true), layout).unwrap()
    }

    #[test]
    fn flat_prior_objective_is_negative_loglik() {
        let layout = epca(4, 2, Poisson);
        let obs = synth(&layout, 5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let state = FactorState::random_init(5, &layout, 0.3, &mut rng);
        let spec = PriorSpec::interpolating(0.0, ConjugateHyper::default(), 1.0, 1.0, 2).with_gamma(0.0);
        let f = objective(&state, &obs, &layout, &spec).unwrap();
        let ll = crate::model::log_likelihood(&obs, &state, &layout).unwrap();
        assert_eq!(f, -ll);
    }

    #[test]
    fn objective_matches_resummation() {
        let layout = epca(3, 2, Bernoulli);
        let obs = synth(&layout, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let state = FactorState::random_init(4, &layout, 0.5, &mut rng);
        let spec = PriorSpec::interpolating(0.4, ConjugateHyper::new(0.1, 0.2), 0.5, 2.0, 2);
        let f = objective(&state, &obs, &layout, &spec).unwrap();
        let ll = crate::model::log_likelihood(&obs, &state, &layout).unwrap();
        let lp = crate::prior::log_prior_unnorm(&state, &spec, &layout).unwrap();
        assert!((f + ll + lp).abs() < 1e-12);
    }

    #[test]
    fn one_cg_step_decreases_objective() {
        let layout = epca(5, 2, Bernoulli);
        let obs = synth(&layout, 8, 5);
        let spec = PriorSpec::interpolating(0.0, ConjugateHyper::default(), 1.0, 1.0, 2);
        for seed in 0..10 {
            let opts = MapOptions { max_iter: 1, seed, ..Default::default() };
            let fit = fit_map(&obs, &layout, &spec, &opts).unwrap();
            assert!(fit.trace.len() >= 2);
            assert!(fit.trace[1].objective < fit.trace[0].objective);
        }
    }

    #[test]
    fn trace_is_non_increasing_and_deterministic() {
        let layout = make_layout(
            ModelKind::Ecca,
            Dims { d1: 4, d2: 3, k_shared: 1, k_first: 1, k_second: 1 },
            [Poisson, Bernoulli],
            [1.0, 1.0],
        )
        .unwrap();
        let obs = synth(&layout, 12, 6);
        let spec = PriorSpec::interpolating(0.3, ConjugateHyper::new(0.1, 0.2), 1.0, 1.0, 3);
        let opts = MapOptions { restarts: 3, seed: 9, ..Default::default() };
        let a = fit_map(&obs, &layout, &spec, &opts).unwrap();
        assert!(a.trace.windows(2).all(|w| w[1].objective <= w[0].objective));
        assert!(a.state.respects_mask(&layout));
        let b = fit_map(&obs, &layout, &spec, &opts).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.restart_objectives.len(), 3);
    }

    #[test]
    fn bernoulli_conjugate_stationary_point() {
        // x θ + λθ - (1 + ν) g(θ) is maximized at g'(θ) = (x + λ) / (1 + ν)
        let layout = epca(1, 1, Bernoulli);
        let obs = ObservationSet::for_layout(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, true),
            &layout,
        )
        .unwrap();
        let spec = PriorSpec::interpolating(1.0, ConjugateHyper::new(0.1, 0.2), 1.0, 1.0, 1);
        let opts = MapOptions { grad_tol: Some(1e-10), seed: 3, init_sd: 0.5, ..Default::default() };
        let fit = fit_map(&obs, &layout, &spec, &opts).unwrap();
        let theta = fit.state.u[(0, 0)] * fit.state.v[(0, 0)];
        let mean = crate::expfam::sigmoid(theta);
        assert!((mean - 1.1 / 1.2).abs() < 1e-8, "{mean}");
    }

    #[test]
    fn all_restarts_infeasible_is_a_fit_error() {
        let layout = epca(1, 1, Exponential);
        let obs = ObservationSet::for_layout(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, true),
            &layout,
        )
        .unwrap();
        let spec = PriorSpec::interpolating(0.0, ConjugateHyper::new(1.0, 1.0), 1.0, 1.0, 1);
        let init = FactorState {
            u: DMatrix::from_element(1, 1, 1.0),
            v: DMatrix::from_element(1, 1, 1.0),
            mean_row: None,
        };
        assert!(matches!(
            fit_map_from(&obs, &layout, &spec, &MapOptions::default(), init),
            Err(Error::Fit(_))
        ));
    }

    #[test]
    fn folds_are_a_disjoint_cover() {
        let layout = epca(6, 1, Bernoulli);
        let obs = synth(&layout, 7, 8);
        let mut mask = obs.observed().clone();
        mask[(0, 0)] = false;
        mask[(3, 2)] = false;
        let obs = obs.with_mask(mask).unwrap();
        let folds = cv_folds(&obs, 4, 1).unwrap();
        for r in 0..7 {
            for c in 0..6 {
                let hits = folds.iter().filter(|f| f[(r, c)]).count();
                assert_eq!(hits, usize::from(obs.is_observed(r, c)));
            }
        }
        let sizes: Vec<usize> = folds.iter().map(|f| f.iter().filter(|&&b| b).count()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert!(cv_folds(&obs, 1, 1).is_err());
    }

    #[test]
    fn single_candidate_grid_selects_it() {
        let layout = epca(4, 1, Bernoulli);
        let obs = synth(&layout, 10, 2);
        let grid = CvGrid {
            a_hyper: vec![ConjugateHyper::new(0.3, 0.7)],
            variances: vec![(0.5, 3.0)],
        };
        let report = cv_select_hyperparams(&obs, &layout, &grid, 0.25, &CvOptions { folds: 3, ..Default::default() })
            .unwrap();
        let s = report.selected;
        assert_eq!(s.beta, 0.25);
        assert_eq!(s.gamma, 0.75);
        assert_eq!(s.a_hyper[0], ConjugateHyper::new(0.3, 0.7));
        assert_eq!(s.sigma2_u, vec![0.5]);
        assert_eq!(s.sigma2_v, vec![3.0]);

        let empty = CvGrid { a_hyper: vec![], variances: vec![(1.0, 1.0)] };
        assert!(matches!(
            cv_select_hyperparams(&obs, &layout, &empty, 0.5, &CvOptions::default()),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn ties_go_to_the_first_candidate() {
        assert_eq!(argmax_first(&[-10.0, -5.0, -5.0 + 1e-9, -7.0]), 1);
        assert_eq!(argmax_first(&[-3.0, -1.0]), 1);
    }
}
