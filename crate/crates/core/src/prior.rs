//! The composite prior `a(UV)^β b(U)^γ c(V)^γ`.
//!
//! `a` is the conjugate kernel of each view's family applied entry-wise to
//! `Θ = UV`; `b` and `c` are independent Gaussians on the rows of `U` (with a
//! diagonal covariance) and on the rows of `V` (isotropic per row). The
//! normalizer of the product is never computed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::ConjugateHyper;
use crate::model::{assemble_theta, BlockLayout, FactorState};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub beta: f64,
    pub gamma: f64,
    /// Conjugate hyperparameters of `a`, one per view.
    pub a_hyper: [ConjugateHyper; 2],
    /// Diagonal of `Σ_U`, length `K`.
    pub sigma2_u: Vec<f64>,
    /// `σ²_{V_k}` for each row of `V`, length `K`.
    pub sigma2_v: Vec<f64>,
}

impl PriorSpec {
    /// `γ = 1 - β`, the same `λ, ν` for both views and the same variance for
    /// every component.
    pub fn interpolating(beta: f64, a_hyper: ConjugateHyper, sigma2_u: f64, sigma2_v: f64, k: usize) -> Self {
        Self {
            beta,
            gamma: 1.0 - beta,
            a_hyper: [a_hyper; 2],
            sigma2_u: vec![sigma2_u; k],
            sigma2_v: vec![sigma2_v; k],
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn validate(&self, layout: &BlockLayout) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config("prior.beta", format!("{} is not in [0, 1]", self.beta)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config("prior.gamma", format!("{} is negative", self.gamma)));
        }
        let k = layout.k();
        for (name, vals) in [("prior.sigma2_u", &self.sigma2_u), ("prior.sigma2_v", &self.sigma2_v)] {
            if vals.len() != k {
                return Err(Error::config(name, format!("expected {k} variances, got {}", vals.len())));
            }
            if vals.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(Error::config(name, "variances must be positive and finite"));
            }
        }
        if self.beta > 0.0 {
            for view in 0..layout.n_views() {
                self.a_hyper[view].validate(layout.families()[view])?;
            }
        }
        Ok(())
    }
}

/// `Σ_{n,d} (λ Θ_nd - ν g(Θ_nd))`, or `-∞` if any entry leaves its domain.
pub fn log_a(theta: &DMatrix<f64>, spec: &PriorSpec, layout: &BlockLayout) -> f64 {
    let mut total = 0.0;
    for col in 0..theta.ncols() {
        let family = layout.family_of_col(col);
        let hyper = spec.a_hyper[layout.view_of_col(col)];
        for &t in theta.column(col).iter() {
            if !family.in_domain(t) {
                return f64::NEG_INFINITY;
            }
            total += family.conj_log_kernel_unchecked(t, hyper);
        }
    }
    total
}

/// `log b(U)` with `U_n ~ N(0, diag(σ²_U))`.
pub fn log_b(u: &DMatrix<f64>, spec: &PriorSpec) -> f64 {
    let n = u.nrows() as f64;
    (0..u.ncols())
        .map(|k| {
            let s2 = spec.sigma2_u[k];
            -0.5 * n * (LN_2PI + s2.ln()) - 0.5 * u.column(k).norm_squared() / s2
        })
        .sum()
}

/// `log c(V)` with `V_k ~ N(0, σ²_{V_k} I)` over the free entries of row `k`.
pub fn log_c(v: &DMatrix<f64>, spec: &PriorSpec, layout: &BlockLayout) -> f64 {
    (0..v.nrows())
        .map(|k| {
            let s2 = spec.sigma2_v[k];
            let mut free = 0usize;
            let mut ss = 0.0;
            for col in 0..v.ncols() {
                if layout.is_free(k, col) {
                    free += 1;
                    ss += v[(k, col)] * v[(k, col)];
                }
            }
            -0.5 * free as f64 * (LN_2PI + s2.ln()) - 0.5 * ss / s2
        })
        .sum()
}

/// `β log a(UV) + γ (log b(U) + log c(V))` given a precomputed `Θ`.
pub(crate) fn log_prior_with_theta(
    state: &FactorState,
    theta: &DMatrix<f64>,
    spec: &PriorSpec,
    layout: &BlockLayout,
) -> f64 {
    let mut total = 0.0;
    if spec.beta > 0.0 {
        let a = log_a(theta, spec, layout);
        if a == f64::NEG_INFINITY {
            return a;
        }
        total += spec.beta * a;
    }
    if spec.gamma > 0.0 {
        total += spec.gamma * (log_b(&state.u, spec) + log_c(&state.v, spec, layout));
    }
    total
}

/// Unnormalized log prior. Returns `-∞` when `β > 0` and some entry of `Θ` is
/// outside its family's domain.
pub fn log_prior_unnorm(state: &FactorState, spec: &PriorSpec, layout: &BlockLayout) -> Result<f64> {
    let theta = assemble_theta(state, layout)?;
    Ok(log_prior_with_theta(state, &theta, spec, layout))
}

/// Gradient of [`log_prior_unnorm`]. Masked entries of `V` are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorGradient {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub mean_row: Option<DVector<f64>>,
}

/// `β (λ - ν g'(Θ))` entry-wise.
pub(crate) fn log_a_grad_theta(
    theta: &DMatrix<f64>,
    spec: &PriorSpec,
    layout: &BlockLayout,
) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(theta.nrows(), theta.ncols());
    if spec.beta == 0.0 {
        return Ok(out);
    }
    for col in 0..theta.ncols() {
        let family = layout.family_of_col(col);
        let hyper = spec.a_hyper[layout.view_of_col(col)];
        for row in 0..theta.nrows() {
            let t = theta[(row, col)];
            if !family.in_domain(t) {
                return Err(Error::GradientUndefined);
            }
            out[(row, col)] = spec.beta * (hyper.lambda - hyper.nu * family.mean_param_unchecked(t));
        }
    }
    Ok(out)
}

/// Adds the Gaussian scores `-γ U Σ_U⁻¹` and `-γ Σ_V⁻¹ V` to `grad_u`, `grad_v`.
pub(crate) fn add_gaussian_grad(
    state: &FactorState,
    spec: &PriorSpec,
    layout: &BlockLayout,
    grad_u: &mut DMatrix<f64>,
    grad_v: &mut DMatrix<f64>,
) {
    if spec.gamma == 0.0 {
        return;
    }
    for k in 0..layout.k() {
        let su = spec.gamma / spec.sigma2_u[k];
        for n in 0..state.u.nrows() {
            grad_u[(n, k)] -= su * state.u[(n, k)];
        }
        let sv = spec.gamma / spec.sigma2_v[k];
        for d in 0..layout.d() {
            if layout.is_free(k, d) {
                grad_v[(k, d)] -= sv * state.v[(k, d)];
            }
        }
    }
}

pub fn grad_log_prior(state: &FactorState, spec: &PriorSpec, layout: &BlockLayout) -> Result<PriorGradient> {
    let theta = assemble_theta(state, layout)?;
    let g_theta = log_a_grad_theta(&theta, spec, layout)?;
    let mut u = &g_theta * state.v.transpose();
    let mut v = state.u.transpose() * &g_theta;
    add_gaussian_grad(state, spec, layout, &mut u, &mut v);
    for k in 0..layout.k() {
        for d in 0..layout.d() {
            if !layout.is_free(k, d) {
                v[(k, d)] = 0.0;
            }
        }
    }
    let mean_row = layout
        .use_mean_row()
        .then(|| DVector::from_iterator(theta.ncols(), g_theta.column_iter().map(|c| c.sum())));
    Ok(PriorGradient { u, v, mean_row })
}
