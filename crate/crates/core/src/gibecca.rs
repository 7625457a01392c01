//! The alternating sampler: a Gaussian factor-model Gibbs stage that treats
//! `Θ` as data, followed by an element-wise Metropolis refresh of `Θ` that
//! uses the Gaussian predictive as its proposal.
//!
//! The Gaussian stage models each row of `Θ` as `u_n V + e_n` with a
//! diagonal residual `e_n ~ N(0, τ²_view I)`. The proposal for a row is
//! `N(u_S V_S, Σ)` where, per view, `Σ = V_iᵀ diag(σ²_{U_i}) V_i + τ²_view I`
//! integrates out that view's specific latent variables and the residual.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::chain::{Chain, ChainSample};
use crate::error::{Error, Result};
use crate::map_infer::check_inputs;
use crate::model::{log_likelihood_theta, BlockLayout, FactorState, ObservationSet};
use crate::prior::PriorSpec;
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageOptions {
    /// Exponent `γ` applied to the Gaussian priors `b` and `c`.
    pub gamma: f64,
    /// Sample `σ²_U`, `σ²_V` from their inverse-gamma conditionals.
    pub infer_variances: bool,
    /// Fixed residual variance for both views; inferred when `None`.
    pub residual: Option<f64>,
    /// Keep `V` at its current value instead of sampling it.
    pub pin_v: bool,
    pub ig_shape: f64,
    pub ig_scale: f64,
    /// Relative diagonal jitter on `Σ`, times `trace(Σ)/D`.
    pub jitter: f64,
}

impl Default for StageOptions {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            infer_variances: true,
            residual: None,
            pin_v: false,
            ig_shape: 1.0,
            ig_scale: 1.0,
            jitter: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStageState {
    /// `N × K`, all component groups.
    pub u: DMatrix<f64>,
    /// `K × D`, zero on the structural mask.
    pub v: DMatrix<f64>,
    pub sigma2_u: Vec<f64>,
    pub sigma2_v: Vec<f64>,
    /// Residual variance of each view.
    pub tau2: [f64; 2],
    /// `D × D` proposal covariance, block-diagonal over views.
    pub sigma: DMatrix<f64>,
}

impl GaussianStageState {
    /// Starting point for the stage given a first `Θ`: small random `U`,
    /// zero `V`, unit variances and the per-view variance of `Θ` as residual.
    pub fn init<R: Rng + ?Sized>(theta: &DMatrix<f64>, layout: &BlockLayout, spec: &PriorSpec, rng: &mut R) -> Self {
        let (n, k, d) = (theta.nrows(), layout.k(), layout.d());
        let u = DMatrix::from_fn(n, k, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
        let mut tau2 = [1.0; 2];
        for (view, t) in tau2.iter_mut().enumerate().take(layout.n_views()) {
            let cols = layout.view_cols(view);
            let vals: Vec<f64> = cols.flat_map(|c| theta.column(c).iter().copied().collect::<Vec<_>>()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            *t = var.max(1e-3);
        }
        let mut state = Self {
            u,
            v: DMatrix::zeros(k, d),
            sigma2_u: spec.sigma2_u.clone(),
            sigma2_v: spec.sigma2_v.clone(),
            tau2,
            sigma: DMatrix::zeros(d, d),
        };
        state.sigma = proposal_covariance(&state, layout, 1.0, 1e-8);
        state
    }

    pub fn u_shared(&self, layout: &BlockLayout) -> DMatrix<f64> {
        self.u.columns_range(layout.shared()).into_owned()
    }

    pub fn u_first(&self, layout: &BlockLayout) -> DMatrix<f64> {
        self.u.columns_range(layout.first_specific()).into_owned()
    }

    pub fn u_second(&self, layout: &BlockLayout) -> DMatrix<f64> {
        self.u.columns_range(layout.second_specific()).into_owned()
    }

    pub fn factor_state(&self) -> FactorState {
        FactorState {
            u: self.u.clone(),
            v: self.v.clone(),
            mean_row: None,
        }
    }
}

fn view_specific(layout: &BlockLayout, view: usize) -> std::ops::Range<usize> {
    if view == 0 {
        layout.first_specific()
    } else {
        layout.second_specific()
    }
}

/// Per view, `V_iᵀ diag(σ²_{U_i}/γ) V_i + τ²_view I`, then a diagonal
/// jitter of `jitter · trace/D` (floored at 1e-12).
pub fn proposal_covariance(state: &GaussianStageState, layout: &BlockLayout, gamma: f64, jitter: f64) -> DMatrix<f64> {
    let d = layout.d();
    let mut sigma = DMatrix::zeros(d, d);
    for view in 0..layout.n_views() {
        let cols = layout.view_cols(view);
        for comp in view_specific(layout, view) {
            let w = state.sigma2_u[comp] / gamma;
            for i in cols.clone() {
                let vi = state.v[(comp, i)];
                if vi == 0.0 {
                    continue;
                }
                for j in cols.clone() {
                    sigma[(i, j)] += w * vi * state.v[(comp, j)];
                }
            }
        }
        for i in cols {
            sigma[(i, i)] += state.tau2[view];
        }
    }
    let trace: f64 = sigma.trace();
    let add = (jitter * trace / d as f64).max(1e-12);
    for i in 0..d {
        sigma[(i, i)] += add;
    }
    sigma
}

fn inv_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    let g: f64 = Gamma::new(shape, 1.0 / scale).expect("positive parameters").sample(rng);
    1.0 / g
}

fn standard_normal_matrix<R: Rng + ?Sized>(r: usize, c: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn cholesky(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or_else(|| Error::Stage(format!("{what} is not positive definite")))
}

/// One conjugate Gibbs sweep of the Gaussian factor model `Θ ≈ U V`: rows
/// of `U`, columns of `V` (free entries only), the component variances and
/// the residual variances. Returns the new state with its proposal
/// covariance.
pub fn gibbs_gaussian_stage<R: Rng + ?Sized>(
    theta: &DMatrix<f64>,
    layout: &BlockLayout,
    prev: &GaussianStageState,
    opts: &StageOptions,
    rng: &mut R,
) -> Result<GaussianStageState> {
    let (n, k, d) = (theta.nrows(), layout.k(), layout.d());
    if theta.ncols() != d || prev.u.nrows() != n || prev.u.ncols() != k || prev.v.shape() != (k, d) {
        return Err(Error::Shape("Θ, stage state and layout disagree".into()));
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::Stage("Θ has non-finite entries".into()));
    }
    if !(opts.gamma > 0.0) {
        return Err(Error::config("prior.gamma", "the Gaussian stage needs γ > 0"));
    }
    let gamma = opts.gamma;
    let mut st = prev.clone();
    if let Some(r) = opts.residual {
        st.tau2 = [r, r];
    }
    let col_prec: Vec<f64> = (0..d).map(|c| 1.0 / st.tau2[layout.view_of_col(c)]).collect();

    // U | V, Θ: every row shares the same precision.
    let mut prec = DMatrix::from_fn(k, k, |a, b| {
        (0..d).map(|c| st.v[(a, c)] * st.v[(b, c)] * col_prec[c]).sum::<f64>()
    });
    for a in 0..k {
        prec[(a, a)] += gamma / st.sigma2_u[a];
    }
    let chol = cholesky(prec, "U precision")?;
    let mut vw = st.v.clone();
    for c in 0..d {
        vw.column_mut(c).scale_mut(col_prec[c]);
    }
    let mean = chol.solve(&(&vw * theta.transpose())); // K × N
    let noise = chol.l().tr_solve_lower_triangular(&standard_normal_matrix(k, n, rng)).expect("triangular solve");
    st.u = (mean + noise).transpose();

    // V | U, Θ: columns are independent and share a precision within a view.
    if !opts.pin_v {
        for view in 0..layout.n_views() {
            let comps = layout.components_of_view(view);
            if comps.is_empty() {
                continue;
            }
            let cols: Vec<usize> = layout.view_cols(view).collect();
            let uf = st.u.select_columns(&comps);
            let p = st.tau2[view].recip();
            let mut prec = uf.transpose() * &uf * p;
            for (i, &c) in comps.iter().enumerate() {
                prec[(i, i)] += gamma / st.sigma2_v[c];
            }
            let chol = cholesky(prec, "V precision")?;
            let rhs = uf.transpose() * theta.select_columns(&cols) * p;
            let mean = chol.solve(&rhs);
            let noise = chol
                .l()
                .tr_solve_lower_triangular(&standard_normal_matrix(comps.len(), cols.len(), rng))
                .expect("triangular solve");
            let draw = mean + noise;
            for (j, &col) in cols.iter().enumerate() {
                for r in 0..k {
                    st.v[(r, col)] = 0.0;
                }
                for (i, &c) in comps.iter().enumerate() {
                    st.v[(c, col)] = draw[(i, j)];
                }
            }
        }
    }

    if opts.infer_variances {
        for c in 0..k {
            let ss = st.u.column(c).norm_squared();
            st.sigma2_u[c] = inv_gamma(opts.ig_shape + gamma * n as f64 / 2.0, opts.ig_scale + gamma * ss / 2.0, rng);
            let free: Vec<f64> = (0..d).filter(|&col| layout.is_free(c, col)).map(|col| st.v[(c, col)]).collect();
            let ss: f64 = free.iter().map(|x| x * x).sum();
            st.sigma2_v[c] = inv_gamma(
                opts.ig_shape + gamma * free.len() as f64 / 2.0,
                opts.ig_scale + gamma * ss / 2.0,
                rng,
            );
        }
    }
    if opts.residual.is_none() {
        let resid = theta - &st.u * &st.v;
        for view in 0..layout.n_views() {
            let cols = layout.view_cols(view);
            let m = (cols.len() * n) as f64;
            let ss: f64 = cols.map(|c| resid.column(c).norm_squared()).sum();
            st.tau2[view] = inv_gamma(opts.ig_shape + m / 2.0, opts.ig_scale + ss / 2.0, rng);
        }
    }
    st.sigma = proposal_covariance(&st, layout, gamma, opts.jitter);
    Ok(st)
}

/// Draws every row of a proposal `Θ*` independently from
/// `N(u_S,n V_S, Σ)`.
pub fn propose_theta_rows<R: Rng + ?Sized>(
    stage: &GaussianStageState,
    layout: &BlockLayout,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let shared = layout.shared();
    let us = stage.u.columns_range(shared.clone());
    let vs = stage.v.rows_range(shared);
    let mut out = us * vs;
    let n = out.nrows();
    for view in 0..layout.n_views() {
        let cols = layout.view_cols(view);
        let block = stage.sigma.view((cols.start, cols.start), (cols.len(), cols.len())).into_owned();
        let chol = Cholesky::new(block)
            .ok_or_else(|| Error::Proposal(format!("Σ block of view {view} is not positive definite")))?;
        let z = standard_normal_matrix(cols.len(), n, rng);
        let noise = chol.l() * z; // D_view × N
        for (j, col) in cols.enumerate() {
            for row in 0..n {
                out[(row, col)] += noise[(j, row)];
            }
        }
    }
    Ok(out)
}

/// Log of the per-element acceptance ratio
/// `p(x|θ*)^α a(θ*)^β / p(x|θ)^α a(θ)^β`; `-∞` when `θ*` leaves the domain.
fn log_accept_ratio(
    obs: &ObservationSet,
    layout: &BlockLayout,
    spec: &PriorSpec,
    row: usize,
    col: usize,
    old: f64,
    new: f64,
) -> f64 {
    let family = layout.family_of_col(col);
    if !family.in_domain(new) {
        return f64::NEG_INFINITY;
    }
    let mut r = 0.0;
    if obs.is_observed(row, col) {
        let x = obs.x()[(row, col)];
        r += layout.alpha_of_col(col) * (family.log_lik_kernel(x, new) - family.log_lik_kernel(x, old));
    }
    if spec.beta > 0.0 {
        let hyper = spec.a_hyper[layout.view_of_col(col)];
        r += spec.beta * (family.conj_log_kernel_unchecked(new, hyper) - family.conj_log_kernel_unchecked(old, hyper));
    }
    r
}

/// Element-wise accept/reject of `theta_star` against `theta_old`. Returns
/// the new `Θ` and the number of accepted entries.
pub fn mh_accept_elements<R: Rng + ?Sized>(
    obs: &ObservationSet,
    layout: &BlockLayout,
    spec: &PriorSpec,
    theta_old: &DMatrix<f64>,
    theta_star: &DMatrix<f64>,
    rng: &mut R,
) -> Result<(DMatrix<f64>, usize)> {
    if theta_old.shape() != obs.x().shape() || theta_star.shape() != theta_old.shape() {
        return Err(Error::Shape("Θ, Θ* and data disagree".into()));
    }
    let mut out = theta_old.clone();
    let mut accepted = 0;
    for col in 0..obs.d() {
        for row in 0..obs.n() {
            let (old, new) = (theta_old[(row, col)], theta_star[(row, col)]);
            let log_r = log_accept_ratio(obs, layout, spec, row, col, old, new);
            let take = log_r >= 0.0 || (log_r > f64::NEG_INFINITY && rng.random::<f64>().ln() < log_r);
            if take {
                out[(row, col)] = new;
                accepted += 1;
            }
        }
    }
    Ok((out, accepted))
}

/// Acceptance probability of one element, for inspection.
pub fn element_accept_prob(
    obs: &ObservationSet,
    layout: &BlockLayout,
    spec: &PriorSpec,
    row: usize,
    col: usize,
    old: f64,
    new: f64,
) -> f64 {
    log_accept_ratio(obs, layout, spec, row, col, old, new).exp().min(1.0)
}

/// Moment-matched starting `Θ` with small in-domain noise; unobserved
/// entries take their column's mean.
pub fn init_theta<R: Rng + ?Sized>(obs: &ObservationSet, layout: &BlockLayout, noise_sd: f64, rng: &mut R) -> DMatrix<f64> {
    let mut theta = DMatrix::zeros(obs.n(), obs.d());
    for col in 0..obs.d() {
        let family = layout.family_of_col(col);
        let mut sum = 0.0;
        let mut count = 0usize;
        for row in 0..obs.n() {
            if obs.is_observed(row, col) {
                let t = family.moment_matched(obs.x()[(row, col)]);
                theta[(row, col)] = t;
                sum += t;
                count += 1;
            }
        }
        let fill = if count > 0 { sum / count as f64 } else { family.moment_matched(0.0) };
        for row in 0..obs.n() {
            if !obs.is_observed(row, col) {
                theta[(row, col)] = fill;
            }
            let z: f64 = rng.sample(StandardNormal);
            let t = theta[(row, col)] + noise_sd * z;
            if family.in_domain(t) {
                theta[(row, col)] = t;
            }
        }
    }
    theta
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GibeccaOptions {
    pub n_samples: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub stage: StageOptions,
    /// Noise added to the moment-matched starting `Θ`.
    pub init_noise: f64,
    /// Pins `V` to this value for the whole run.
    #[serde(skip)]
    pub pinned_v: Option<DMatrix<f64>>,
}

impl Default for GibeccaOptions {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            burn_in: 500,
            thin: 1,
            seed: 0,
            stage: StageOptions::default(),
            init_noise: 0.1,
            pinned_v: None,
        }
    }
}

fn stage_options(spec: &PriorSpec, opts: &GibeccaOptions) -> StageOptions {
    StageOptions {
        gamma: spec.gamma,
        pin_v: opts.pinned_v.is_some() || opts.stage.pin_v,
        ..opts.stage
    }
}

fn check_options(layout: &BlockLayout, opts: &GibeccaOptions) -> Result<()> {
    if opts.thin == 0 {
        return Err(Error::config("engine.thin", "must be at least 1"));
    }
    if layout.use_mean_row() {
        return Err(Error::config("layout.use_mean_row", "not supported by the alternating sampler"));
    }
    if let Some(v) = &opts.pinned_v {
        if v.shape() != (layout.k(), layout.d()) {
            return Err(Error::Shape("pinned V has the wrong shape".into()));
        }
    }
    Ok(())
}

fn initial_stage<R: Rng + ?Sized>(
    theta: &DMatrix<f64>,
    layout: &BlockLayout,
    spec: &PriorSpec,
    opts: &GibeccaOptions,
    rng: &mut R,
) -> GaussianStageState {
    let mut stage = GaussianStageState::init(theta, layout, spec, rng);
    if let Some(r) = opts.stage.residual {
        stage.tau2 = [r, r];
    }
    if let Some(v) = &opts.pinned_v {
        stage.v = v.clone();
    }
    stage
}

fn sample_spec(spec: &PriorSpec, stage: &GaussianStageState) -> PriorSpec {
    PriorSpec {
        sigma2_u: stage.sigma2_u.clone(),
        sigma2_v: stage.sigma2_v.clone(),
        ..spec.clone()
    }
}

/// Runs the alternating sampler. `β` and the hyperparameters of `a` stay
/// fixed; the variances of `b`, `c` and the residual are sampled unless the
/// options fix them.
pub fn run_gibecca(obs: &ObservationSet, layout: &BlockLayout, spec: &PriorSpec, opts: &GibeccaOptions) -> Result<Chain> {
    check_inputs(obs, layout, spec)?;
    check_options(layout, opts)?;
    let mut chain = Chain::new("gibecca", opts.seed, layout.spec());
    if opts.n_samples == 0 {
        return Ok(chain);
    }
    let stage_opts = stage_options(spec, opts);
    let mut rng = stream_rng(opts.seed, 0);
    let mut theta = init_theta(obs, layout, opts.init_noise, &mut rng);
    let mut stage = initial_stage(&theta, layout, spec, opts, &mut rng);
    let total = opts.burn_in + opts.n_samples * opts.thin;
    let entries = (obs.n() * obs.d()) as u64;

    let start = Instant::now();
    for sweep in 0..total {
        stage = gibbs_gaussian_stage(&theta, layout, &stage, &stage_opts, &mut rng)?;
        let proposal = propose_theta_rows(&stage, layout, &mut rng)?;
        let (next, accepted) = mh_accept_elements(obs, layout, spec, &theta, &proposal, &mut rng)?;
        theta = next;
        if sweep < opts.burn_in {
            continue;
        }
        chain.stats.proposals += entries;
        chain.stats.accepted += accepted as u64;
        if (sweep - opts.burn_in + 1) % opts.thin == 0 {
            let log_lik = log_likelihood_theta(obs, &theta, layout)?;
            let sample = ChainSample {
                state: stage.factor_state(),
                theta: theta.clone(),
                prior: Some(sample_spec(spec, &stage)),
                log_lik,
            };
            chain.push(sample, &start);
        }
    }
    Ok(chain)
}

/// The Gaussian stage alone run on the data matrix itself: Bayesian
/// Gaussian CCA with the identity link. Samples carry `Θ = U V` and the
/// Gaussian log-likelihood of the data under the sampled residuals.
pub fn run_gaussian_bcca(x: &DMatrix<f64>, layout: &BlockLayout, spec: &PriorSpec, opts: &GibeccaOptions) -> Result<Chain> {
    check_options(layout, opts)?;
    if x.ncols() != layout.d() {
        return Err(Error::Shape("data width differs from the layout".into()));
    }
    let mut chain = Chain::new("gaussian-bcca", opts.seed, layout.spec());
    if opts.n_samples == 0 {
        return Ok(chain);
    }
    let stage_opts = stage_options(spec, opts);
    let mut rng = stream_rng(opts.seed, 0);
    let mut stage = initial_stage(x, layout, spec, opts, &mut rng);
    let total = opts.burn_in + opts.n_samples * opts.thin;
    let start = Instant::now();
    for sweep in 0..total {
        stage = gibbs_gaussian_stage(x, layout, &stage, &stage_opts, &mut rng)?;
        if sweep >= opts.burn_in && (sweep - opts.burn_in + 1) % opts.thin == 0 {
            let theta = &stage.u * &stage.v;
            let mut log_lik = 0.0;
            for col in 0..x.ncols() {
                let t2 = stage.tau2[layout.view_of_col(col)];
                for row in 0..x.nrows() {
                    let r = x[(row, col)] - theta[(row, col)];
                    log_lik -= 0.5 * ((2.0 * std::f64::consts::PI * t2).ln() + r * r / t2);
                }
            }
            let sample = ChainSample {
                state: stage.factor_state(),
                theta,
                prior: Some(sample_spec(spec, &stage)),
                log_lik,
            };
            chain.push(sample, &start);
        }
    }
    Ok(chain)
}

/// Posterior mean of the shared latent variables `U_S` over a chain.
pub fn posterior_shared_latent(chain: &Chain, layout: &BlockLayout) -> Option<DMatrix<f64>> {
    chain
        .posterior_mean_u()
        .map(|u| u.columns_range(layout.shared()).into_owned())
}

/// Marginal mean of a row under the stage: `u_S V_S`.
pub fn shared_mean_row(stage: &GaussianStageState, layout: &BlockLayout, row: usize) -> DVector<f64> {
    let shared = layout.shared();
    let row = stage.u.view((row, shared.start), (1, shared.len())) * stage.v.rows_range(shared);
    DVector::from_iterator(row.len(), row.iter().copied())
}
