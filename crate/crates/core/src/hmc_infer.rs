//! Hybrid Monte Carlo over `(U, V)` with exchange-algorithm moves on the
//! prior hyperparameters.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::chain::{Chain, ChainSample};
use crate::error::{Error, Result};
use crate::map_infer::{check_inputs, fit_map_from, MapOptions, PackedPosterior};
use crate::model::{assemble_theta, log_likelihood_theta, BlockLayout, FactorState, ObservationSet};
use crate::prior::{log_prior_with_theta, PriorSpec};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExchangeOptions {
    /// MH sweeps of the auxiliary chain drawing `(U*, V*)` from the prior.
    pub inner_sweeps: usize,
    /// Random-walk scale of the auxiliary chain, relative to each
    /// coordinate's Gaussian prior standard deviation.
    pub inner_step: f64,
    /// Standard deviation of the log-normal random walk on hyperparameters.
    pub proposal_sd: f64,
    /// Inverse-gamma shape and scale on every variance.
    pub variance_shape: f64,
    pub variance_scale: f64,
    /// Standard deviation of the log-normal hyperprior on `λ` and `ν`,
    /// centred on their initial values.
    pub a_log_sd: f64,
}

impl Default for ExchangeOptions {
    fn default() -> Self {
        Self {
            inner_sweeps: 200,
            inner_step: 0.5,
            proposal_sd: 0.3,
            variance_shape: 1.0,
            variance_scale: 1.0,
            a_log_sd: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmcOptions {
    pub n_samples: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub n_leapfrog: usize,
    /// Initial leapfrog step size.
    pub step_size: f64,
    /// Adapt the step size during burn-in.
    pub adapt: bool,
    pub target_accept: f64,
    pub infer_hyper: bool,
    pub exchange: ExchangeOptions,
    /// Conjugate-gradient iterations used to find a starting point.
    pub init_map_iters: usize,
    pub init_sd: f64,
    /// Starting state; overrides the MAP initialization.
    #[serde(skip)]
    pub init: Option<FactorState>,
    /// When false `V` (and the mean row) stay at their initial values.
    pub sample_v: bool,
    pub seed: u64,
}

impl Default for HmcOptions {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            burn_in: 500,
            thin: 1,
            n_leapfrog: 20,
            step_size: 0.02,
            adapt: true,
            target_accept: 0.75,
            infer_hyper: false,
            exchange: ExchangeOptions::default(),
            init_map_iters: 50,
            init_sd: 0.1,
            init: None,
            sample_v: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmcTransition {
    pub accepted: bool,
    /// `min(1, exp(-ΔH))`, zero for abandoned trajectories.
    pub accept_prob: f64,
    pub delta_h: f64,
    pub non_finite: bool,
}

/// The potential `-log posterior` over packed coordinates together with the
/// Gaussian kinetic energy of an identity mass matrix.
pub struct Hamiltonian<'a> {
    posterior: PackedPosterior<'a>,
    /// 1 for sampled coordinates, 0 for pinned ones.
    active: DVector<f64>,
}

impl<'a> Hamiltonian<'a> {
    pub fn new(obs: &'a ObservationSet, layout: &'a BlockLayout, spec: &'a PriorSpec) -> Self {
        let posterior = PackedPosterior::new(obs, layout, spec);
        let active = DVector::from_element(posterior.packing.len(), 1.0);
        Self { posterior, active }
    }

    /// Holds every coordinate other than `U` fixed.
    pub fn pin_v(mut self) -> Self {
        let n_u = self.posterior.packing.n_u();
        for (i, a) in self.active.iter_mut().enumerate() {
            *a = if i < n_u { 1.0 } else { 0.0 };
        }
        self
    }

    pub fn dim(&self) -> usize {
        self.active.len()
    }

    pub fn pack(&self, state: &FactorState) -> DVector<f64> {
        self.posterior.packing.pack(state)
    }

    pub fn unpack(&self, x: &DVector<f64>) -> FactorState {
        self.posterior.packing.unpack(x)
    }

    pub fn potential(&self, x: &DVector<f64>) -> f64 {
        self.posterior.energy(x)
    }

    pub fn energy(&self, x: &DVector<f64>, p: &DVector<f64>) -> f64 {
        self.potential(x) + 0.5 * p.component_mul(&self.active).norm_squared()
    }

    fn grad(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        match self.posterior.energy_and_grad(x) {
            (e, Some(g)) if e.is_finite() && g.iter().all(|v| v.is_finite()) => {
                Some(g.component_mul(&self.active))
            }
            _ => None,
        }
    }

    /// `n` leapfrog steps of size `eps`. `None` if the trajectory reaches a
    /// point where the potential or its gradient is not finite.
    pub fn leapfrog(
        &self,
        x: &DVector<f64>,
        p: &DVector<f64>,
        eps: f64,
        n: usize,
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        let mut x = x.clone();
        let mut p = p.component_mul(&self.active);
        let mut g = self.grad(&x)?;
        for _ in 0..n {
            p.axpy(-0.5 * eps, &g, 1.0);
            x.axpy(eps, &p, 1.0);
            g = self.grad(&x)?;
            p.axpy(-0.5 * eps, &g, 1.0);
        }
        Some((x, p))
    }

    /// One HMC transition in place.
    pub fn step<R: Rng + ?Sized>(&self, x: &mut DVector<f64>, eps: f64, n: usize, rng: &mut R) -> HmcTransition {
        let p0 = DVector::from_fn(self.dim(), |i, _| {
            let z: f64 = StandardNormal.sample(rng);
            z * self.active[i]
        });
        let h0 = self.energy(x, &p0);
        let rejected = HmcTransition {
            accepted: false,
            accept_prob: 0.0,
            delta_h: f64::INFINITY,
            non_finite: true,
        };
        let Some((x1, p1)) = self.leapfrog(x, &p0, eps, n) else {
            return rejected;
        };
        let h1 = self.energy(&x1, &p1);
        if !h1.is_finite() {
            return rejected;
        }
        let delta_h = h1 - h0;
        let accept_prob = (-delta_h).exp().min(1.0);
        let u: f64 = rng.random();
        let accepted = delta_h <= 0.0 || u.ln() < -delta_h;
        if accepted {
            *x = x1;
        }
        HmcTransition {
            accepted,
            accept_prob,
            delta_h,
            non_finite: false,
        }
    }
}

/// One HMC transition targeting `exp(log-likelihood + log prior)` over the
/// free coordinates of `(U, V)`.
pub fn hmc_step<R: Rng + ?Sized>(
    state: &FactorState,
    obs: &ObservationSet,
    layout: &BlockLayout,
    spec: &PriorSpec,
    step_size: f64,
    n_leapfrog: usize,
    rng: &mut R,
) -> Result<(FactorState, HmcTransition)> {
    let ham = Hamiltonian::new(obs, layout, spec);
    let mut x = ham.pack(state);
    if !ham.potential(&x).is_finite() {
        return Err(Error::Chain("current state has a non-finite objective".into()));
    }
    let tr = ham.step(&mut x, step_size, n_leapfrog, rng);
    Ok((ham.unpack(&x), tr))
}

/// A block of hyperparameters updated together by one exchange move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HyperBlock {
    SigmaU(usize),
    SigmaV(usize),
    /// `(λ, ν)` of one view.
    AHyper(usize),
}

/// Blocks visited round-robin; `a` is skipped when `β = 0` since it does not
/// enter the prior.
pub fn hyper_blocks(layout: &BlockLayout, spec: &PriorSpec) -> Vec<HyperBlock> {
    let k = layout.k();
    let mut blocks: Vec<HyperBlock> = (0..k).map(HyperBlock::SigmaU).collect();
    blocks.extend((0..k).map(HyperBlock::SigmaV));
    if spec.beta > 0.0 {
        blocks.extend((0..layout.n_views()).map(HyperBlock::AHyper));
    }
    blocks
}

/// `log f(U, V | ψ)`: the prior without its normalizer.
pub fn log_f(state: &FactorState, spec: &PriorSpec, layout: &BlockLayout) -> f64 {
    match assemble_theta(state, layout) {
        Ok(theta) => log_prior_with_theta(state, &theta, spec, layout),
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Log density of the hyperprior in log coordinates (the Jacobian of the
/// log transform included), for the block's parameters only.
fn log_hyperprior(spec: &PriorSpec, block: HyperBlock, opts: &ExchangeOptions, centre: &PriorSpec) -> f64 {
    let inv_gamma_log = |s: f64| -opts.variance_shape * s.ln() - opts.variance_scale / s;
    let log_normal = |x: f64, c: f64| {
        let z = (x.ln() - c.ln()) / opts.a_log_sd;
        -0.5 * z * z
    };
    match block {
        HyperBlock::SigmaU(k) => inv_gamma_log(spec.sigma2_u[k]),
        HyperBlock::SigmaV(k) => inv_gamma_log(spec.sigma2_v[k]),
        HyperBlock::AHyper(v) => {
            log_normal(spec.a_hyper[v].lambda, centre.a_hyper[v].lambda)
                + log_normal(spec.a_hyper[v].nu, centre.a_hyper[v].nu)
        }
    }
}

fn propose<R: Rng + ?Sized>(spec: &PriorSpec, block: HyperBlock, sd: f64, rng: &mut R) -> PriorSpec {
    let mut out = spec.clone();
    let mut jump = |x: &mut f64| {
        let z: f64 = StandardNormal.sample(rng);
        *x *= (sd * z).exp();
    };
    match block {
        HyperBlock::SigmaU(k) => jump(&mut out.sigma2_u[k]),
        HyperBlock::SigmaV(k) => jump(&mut out.sigma2_v[k]),
        HyperBlock::AHyper(v) => {
            jump(&mut out.a_hyper[v].lambda);
            jump(&mut out.a_hyper[v].nu);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct AuxiliaryDraw {
    pub state: FactorState,
    /// `log f` after every sweep of the auxiliary chain.
    pub trace: Vec<f64>,
    /// The first and second halves of `trace` disagree by more than two
    /// pooled standard deviations.
    pub unconverged: bool,
}

/// Approximate draw of `(U, V)` from the prior `f(·|ψ)/Z(ψ)`: a Gaussian
/// start from `b^γ c^γ` followed by coordinate-wise random-walk Metropolis.
pub fn sample_prior_mcmc<R: Rng + ?Sized>(
    spec: &PriorSpec,
    layout: &BlockLayout,
    n: usize,
    opts: &ExchangeOptions,
    rng: &mut R,
) -> AuxiliaryDraw {
    let (k, d) = (layout.k(), layout.d());
    let scale = |s2: f64| if spec.gamma > 0.0 { (s2 / spec.gamma).sqrt() } else { s2.sqrt() };
    let sd_u: Vec<f64> = spec.sigma2_u.iter().map(|&s| scale(s)).collect();
    let sd_v: Vec<f64> = spec.sigma2_v.iter().map(|&s| scale(s)).collect();
    let use_a = spec.beta > 0.0;
    let restricted = use_a && layout.families().iter().take(layout.n_views()).any(|f| f.has_restricted_domain());

    let mut u = DMatrix::from_fn(n, k, |_, c| {
        let z: f64 = StandardNormal.sample(rng);
        if restricted { z.abs() * sd_u[c] } else { z * sd_u[c] }
    });
    let mut v = DMatrix::from_fn(k, d, |r, c| {
        if !layout.is_free(r, c) {
            return 0.0;
        }
        let z: f64 = StandardNormal.sample(rng);
        if restricted && layout.family_of_col(c).has_restricted_domain() {
            -z.abs() * sd_v[r]
        } else {
            z * sd_v[r]
        }
    });
    let mut theta = &u * &v;
    let kernel = |col: usize, t: f64| -> f64 {
        let family = layout.family_of_col(col);
        if !family.in_domain(t) {
            f64::NEG_INFINITY
        } else {
            family.conj_log_kernel_unchecked(t, spec.a_hyper[layout.view_of_col(col)])
        }
    };
    let log_f_of = |u: &DMatrix<f64>, v: &DMatrix<f64>| {
        log_f(&FactorState { u: u.clone(), v: v.clone(), mean_row: None }, spec, layout)
    };

    let mut trace = Vec::with_capacity(opts.inner_sweeps);
    let gamma = spec.gamma;
    for _ in 0..opts.inner_sweeps {
        for row in 0..n {
            for c in 0..k {
                let step: f64 = StandardNormal.sample(rng);
                let delta = opts.inner_step * sd_u[c] * step;
                let old = u[(row, c)];
                let new = old + delta;
                let mut log_r = -gamma * (new * new - old * old) / (2.0 * spec.sigma2_u[c]);
                if use_a {
                    for col in 0..d {
                        let t = theta[(row, col)];
                        log_r += spec.beta * (kernel(col, t + delta * v[(c, col)]) - kernel(col, t));
                    }
                }
                if accept(log_r, rng) {
                    u[(row, c)] = new;
                    for col in 0..d {
                        theta[(row, col)] += delta * v[(c, col)];
                    }
                }
            }
        }
        for r in 0..k {
            for col in 0..d {
                if !layout.is_free(r, col) {
                    continue;
                }
                let step: f64 = StandardNormal.sample(rng);
                let delta = opts.inner_step * sd_v[r] * step;
                let old = v[(r, col)];
                let new = old + delta;
                let mut log_r = -gamma * (new * new - old * old) / (2.0 * spec.sigma2_v[r]);
                if use_a {
                    for row in 0..n {
                        let t = theta[(row, col)];
                        log_r += spec.beta * (kernel(col, t + delta * u[(row, r)]) - kernel(col, t));
                    }
                }
                if accept(log_r, rng) {
                    v[(r, col)] = new;
                    for row in 0..n {
                        theta[(row, col)] += delta * u[(row, r)];
                    }
                }
            }
        }
        trace.push(log_f_of(&u, &v));
    }

    let unconverged = halves_disagree(&trace);
    AuxiliaryDraw {
        state: FactorState { u, v, mean_row: None },
        trace,
        unconverged,
    }
}

fn accept<R: Rng + ?Sized>(log_r: f64, rng: &mut R) -> bool {
    if log_r.is_nan() {
        return false;
    }
    if log_r >= 0.0 {
        return true;
    }
    let u: f64 = rng.random();
    u.ln() < log_r
}

fn halves_disagree(trace: &[f64]) -> bool {
    if trace.len() < 4 {
        return false;
    }
    if trace.iter().any(|v| !v.is_finite()) {
        return true;
    }
    let half = trace.len() / 2;
    let stats = |xs: &[f64]| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        (m, v)
    };
    let (m1, v1) = stats(&trace[..half]);
    let (m2, v2) = stats(&trace[half..]);
    (m1 - m2).abs() > 2.0 * ((v1 + v2) / 2.0).sqrt()
}

#[derive(Debug, Clone)]
pub struct ExchangeOutcome {
    pub spec: PriorSpec,
    pub accepted: bool,
    /// The auxiliary chain failed its stationarity check; the move was
    /// rejected.
    pub flagged: bool,
    pub log_ratio: f64,
}

/// One exchange-algorithm MH move on the hyperparameters of `block`.
///
/// `hyper_centre` locates the log-normal hyperprior on `λ, ν`.
pub fn exchange_update_hyper<R: Rng + ?Sized>(
    psi: &PriorSpec,
    state: &FactorState,
    layout: &BlockLayout,
    block: HyperBlock,
    hyper_centre: &PriorSpec,
    opts: &ExchangeOptions,
    rng: &mut R,
) -> ExchangeOutcome {
    let proposed = propose(psi, block, opts.proposal_sd, rng);
    let reject = |log_ratio: f64, flagged: bool| ExchangeOutcome {
        spec: psi.clone(),
        accepted: false,
        flagged,
        log_ratio,
    };
    if proposed.validate(layout).is_err() {
        return reject(f64::NEG_INFINITY, false);
    }
    let aux = sample_prior_mcmc(&proposed, layout, state.n(), opts, rng);
    if aux.unconverged {
        return reject(f64::NAN, true);
    }
    let log_ratio = log_hyperprior(&proposed, block, opts, hyper_centre)
        - log_hyperprior(psi, block, opts, hyper_centre)
        + log_f(state, &proposed, layout)
        - log_f(state, psi, layout)
        + log_f(&aux.state, psi, layout)
        - log_f(&aux.state, &proposed, layout);
    if accept(log_ratio, rng) {
        ExchangeOutcome {
            spec: proposed,
            accepted: true,
            flagged: false,
            log_ratio,
        }
    } else {
        reject(log_ratio, false)
    }
}

fn initial_state(
    obs: &ObservationSet,
    layout: &BlockLayout,
    spec: &PriorSpec,
    opts: &HmcOptions,
) -> Result<FactorState> {
    if let Some(init) = &opts.init {
        layout.check_state(init)?;
        return Ok(init.clone());
    }
    let mut rng = stream_rng(opts.seed, 1);
    let start = FactorState::random_init(obs.n(), layout, opts.init_sd, &mut rng);
    if opts.init_map_iters == 0 {
        return Ok(start);
    }
    let map = MapOptions {
        max_iter: opts.init_map_iters,
        seed: opts.seed,
        ..MapOptions::default()
    };
    Ok(match fit_map_from(obs, layout, spec, &map, start.clone()) {
        Ok(fit) => fit.state,
        Err(_) => start,
    })
}

/// Runs an HMC chain, adapting the step size during burn-in and, when
/// `infer_hyper` is on, making one exchange move per sweep.
pub fn run_hmc_chain(
    obs: &ObservationSet,
    layout: &BlockLayout,
    spec: &PriorSpec,
    opts: &HmcOptions,
) -> Result<Chain> {
    check_inputs(obs, layout, spec)?;
    if opts.thin == 0 {
        return Err(Error::config("engine.thin", "must be at least 1"));
    }
    if !(opts.step_size > 0.0) {
        return Err(Error::config("engine.step_size", "must be positive"));
    }
    let mut chain = Chain::new("hmc", opts.seed, layout.spec());
    if opts.n_samples == 0 {
        return Ok(chain);
    }

    let mut spec = spec.clone();
    let centre = spec.clone();
    let state = initial_state(obs, layout, &spec, opts)?;
    let blocks = hyper_blocks(layout, &spec);
    let mut rng = stream_rng(opts.seed, 0);
    let mut log_eps = opts.step_size.ln();
    let total = opts.burn_in + opts.n_samples * opts.thin;

    let start = Instant::now();
    let mut x = {
        let ham = Hamiltonian::new(obs, layout, &spec);
        let x = ham.pack(&state);
        if !ham.potential(&x).is_finite() {
            return Err(Error::Chain("initial state has a non-finite objective".into()));
        }
        x
    };
    for sweep in 0..total {
        let burning = sweep < opts.burn_in;
        let ham = Hamiltonian::new(obs, layout, &spec);
        let ham = if opts.sample_v { ham } else { ham.pin_v() };
        let tr = ham.step(&mut x, log_eps.exp(), opts.n_leapfrog, &mut rng);
        if burning {
            if opts.adapt {
                log_eps += 0.05 * (tr.accept_prob - opts.target_accept);
            }
        } else {
            chain.stats.proposals += 1;
            chain.stats.accepted += tr.accepted as u64;
            chain.stats.rejected_non_finite += tr.non_finite as u64;
        }

        let state = ham.unpack(&x);
        if opts.infer_hyper && !blocks.is_empty() {
            let block = blocks[sweep % blocks.len()];
            let out = exchange_update_hyper(&spec, &state, layout, block, &centre, &opts.exchange, &mut rng);
            if !burning {
                chain.stats.hyper_proposals += 1;
                chain.stats.hyper_accepted += out.accepted as u64;
                chain.stats.hyper_flagged += out.flagged as u64;
            }
            spec = out.spec;
        }

        if !burning && (sweep - opts.burn_in + 1) % opts.thin == 0 {
            let theta = assemble_theta(&state, layout)?;
            let log_lik = log_likelihood_theta(obs, &theta, layout)?;
            let sample = ChainSample {
                state,
                theta,
                prior: opts.infer_hyper.then(|| spec.clone()),
                log_lik,
            };
            chain.push(sample, &start);
        }
    }
    chain.stats.final_step_size = Some(log_eps.exp());
    if chain.stats.rate() < 0.01 {
        return Err(Error::Chain(format!(
            "acceptance rate {:.4} after adaptation is below 1%; use a smaller step size",
            chain.stats.rate()
        )));
    }
    Ok(chain)
}
