//! Fold-in prediction of the target view from the covariate view.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{BlockLayout, FactorState, ModelKind, ObservationSet};
use crate::error::{Error, Result};
use crate::expfam::ExpFamilyKind;
use crate::optim::{self, CgOptions, Objective};
use crate::prior::PriorSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FoldInOptions {
    pub max_iter: usize,
    /// Sup-norm gradient tolerance per unit Frobenius norm of the covariate
    /// loadings (never below the absolute value itself).
    pub grad_tol: f64,
}

impl Default for FoldInOptions {
    fn default() -> Self {
        Self {
            max_iter: 1000,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TargetPrediction {
    /// MAP latent row of every test sample, `N_test × K`.
    pub latent: DMatrix<f64>,
    /// Predicted mean parameters of the target view, `N_test × D1`.
    pub means: DMatrix<f64>,
    pub family: ExpFamilyKind,
}

impl TargetPrediction {
    /// Binary class predictions (mean thresholded at 0.5).
    pub fn classes(&self) -> DMatrix<f64> {
        self.means.map(|m| if m > 0.5 { 1.0 } else { 0.0 })
    }
}

/// `-Σ log p(x_d | u·V_d + m_d) + Σ u_k² / (2σ²_k)` over the observed
/// covariate entries of one row.
struct RowObjective<'a> {
    x: Vec<f64>,
    cols: Vec<usize>,
    v: &'a DMatrix<f64>,
    mean_row: Option<&'a DVector<f64>>,
    family: ExpFamilyKind,
    precision: &'a [f64],
}

impl RowObjective<'_> {
    fn theta(&self, u: &DVector<f64>, col: usize) -> f64 {
        let mut t = u.dot(&self.v.column(col));
        if let Some(m) = self.mean_row {
            t += m[col];
        }
        t
    }
}

impl Objective for RowObjective<'_> {
    fn value(&mut self, u: &DVector<f64>) -> f64 {
        let mut f = 0.0;
        for (&col, &x) in self.cols.iter().zip(&self.x) {
            let t = self.theta(u, col);
            if !self.family.in_domain(t) {
                return f64::INFINITY;
            }
            f -= self.family.log_lik_kernel(x, t);
        }
        f + u
            .iter()
            .zip(self.precision)
            .map(|(ui, p)| 0.5 * p * ui * ui)
            .sum::<f64>()
    }

    fn value_and_grad(&mut self, u: &DVector<f64>) -> (f64, DVector<f64>) {
        let mut g = DVector::from_iterator(u.len(), u.iter().zip(self.precision).map(|(ui, p)| p * ui));
        for (&col, &x) in self.cols.iter().zip(&self.x) {
            let t = self.theta(u, col);
            let r = x - self.family.mean_param_unchecked(t);
            g.axpy(-r, &self.v.column(col), 1.0);
        }
        (self.value(u), g)
    }
}

/// Predicts the target view of each test row.
///
/// The latent row is the MAP estimate of the full `u` given the row's
/// observed covariate-view entries and the Gaussian prior `b(u)`, with `V`
/// (and the mean row) held at their fitted values. The target prediction is
/// `g'(u V_1 + m_1)`; only shared components load on the target view.
pub fn predict_target(
    test: &ObservationSet,
    fitted: &FactorState,
    spec: &PriorSpec,
    layout: &BlockLayout,
    opts: &FoldInOptions,
) -> Result<TargetPrediction> {
    if layout.kind() == ModelKind::Epca {
        return Err(Error::Layout("fold-in prediction needs a covariate view".into()));
    }
    if fitted.v.nrows() != layout.k() || fitted.v.ncols() != layout.d() || test.d() != layout.d() {
        return Err(Error::Shape("fitted V, layout and test data disagree".into()));
    }
    let k = layout.k();
    let target_cols = layout.view_cols(0);
    let covariate_cols = layout.view_cols(1);
    let families = layout.families();
    let precision: Vec<f64> = spec.sigma2_u.iter().map(|s| 1.0 / s).collect();
    let v_norm = fitted.v.columns(covariate_cols.start, covariate_cols.len()).norm();
    let cg = CgOptions {
        max_iter: opts.max_iter,
        grad_tol: opts.grad_tol * v_norm.max(1.0),
        ..CgOptions::default()
    };

    let mut latent = DMatrix::zeros(test.n(), k);
    let mut means = DMatrix::zeros(test.n(), target_cols.len());
    for row in 0..test.n() {
        let cols: Vec<usize> = covariate_cols
            .clone()
            .filter(|&c| test.is_observed(row, c))
            .collect();
        let mut objective = RowObjective {
            x: cols.iter().map(|&c| test.x()[(row, c)]).collect(),
            cols,
            v: &fitted.v,
            mean_row: fitted.mean_row.as_ref(),
            family: families[1],
            precision: &precision,
        };
        let out = optim::minimize(&mut objective, DVector::zeros(k), &cg).ok_or_else(|| {
            Error::FoldIn {
                iterations: 0,
                grad_norm: f64::NAN,
                last: vec![0.0; k],
            }
        })?;
        if !out.converged {
            return Err(Error::FoldIn {
                iterations: out.iterations,
                grad_norm: out.grad_norm,
                last: out.x.iter().copied().collect(),
            });
        }
        latent.row_mut(row).copy_from(&out.x.transpose());
        for (j, col) in target_cols.clone().enumerate() {
            let mut t = out.x.dot(&fitted.v.column(col));
            if let Some(m) = &fitted.mean_row {
                t += m[col];
            }
            means[(row, j)] = families[0].mean_param(t)?;
        }
    }
    Ok(TargetPrediction {
        latent,
        means,
        family: families[0],
    })
}
