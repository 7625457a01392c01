//! Factorization topology and data likelihood.
//!
//! Every model is a factorization `Θ = U V` of the natural-parameter matrix of
//! the concatenated views `X = [Y1 Y2]`. The models differ only in which
//! entries of `V` are pinned to zero. Components (rows of `V`, columns of `U`)
//! are ordered shared first, then view-1 specific, then view-2 specific.

mod predict;

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::ExpFamilyKind;

pub use predict::{predict_target, FoldInOptions, TargetPrediction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Epca,
    Sepca,
    Epls,
    Ecca,
}

/// View widths and component-group ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d1: usize,
    #[serde(default)]
    pub d2: usize,
    pub k_shared: usize,
    #[serde(default)]
    pub k_first: usize,
    #[serde(default)]
    pub k_second: usize,
}

impl Dims {
    pub fn k(&self) -> usize {
        self.k_shared + self.k_first + self.k_second
    }

    pub fn d(&self) -> usize {
        self.d1 + self.d2
    }
}

/// Which views a component may load on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComponentGroup {
    Shared,
    First,
    Second,
}

/// Serializable description from which a [`BlockLayout`] is rebuilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub model: ModelKind,
    pub dims: Dims,
    pub families: [ExpFamilyKind; 2],
    #[serde(default = "unit_alpha")]
    pub alpha: [f64; 2],
    #[serde(default)]
    pub use_mean_row: bool,
}

fn unit_alpha() -> [f64; 2] {
    [1.0, 1.0]
}

impl LayoutSpec {
    pub fn build(&self) -> Result<BlockLayout> {
        Ok(make_layout(self.model, self.dims, self.families, self.alpha)?
            .with_mean_row(self.use_mean_row))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    kind: ModelKind,
    dims: Dims,
    families: [ExpFamilyKind; 2],
    alpha: [f64; 2],
    use_mean_row: bool,
    /// `K × D`, true where `V` is structurally zero.
    zero_mask: DMatrix<bool>,
}

/// Builds a layout and materializes its structural-zero mask.
pub fn make_layout(
    kind: ModelKind,
    dims: Dims,
    families: [ExpFamilyKind; 2],
    alpha: [f64; 2],
) -> Result<BlockLayout> {
    let err = |msg: String| Err(Error::Layout(msg));
    if dims.k_shared == 0 {
        return err("at least one shared component is required".into());
    }
    if dims.d1 == 0 {
        return err("view 1 must have at least one column".into());
    }
    match kind {
        ModelKind::Epca => {
            if dims.d2 != 0 || dims.k_first != 0 || dims.k_second != 0 {
                return err(format!(
                    "EPCA is single-view: need d2 = k_first = k_second = 0, got {dims:?}"
                ));
            }
        }
        ModelKind::Sepca => {
            if dims.k_first != 0 || dims.k_second != 0 {
                return err(format!("SEPCA has shared components only, got {dims:?}"));
            }
        }
        ModelKind::Epls => {
            if dims.k_first != 0 {
                return err(format!(
                    "EPLS has no target-specific components, got k_first = {}",
                    dims.k_first
                ));
            }
        }
        ModelKind::Ecca => {}
    }
    if kind != ModelKind::Epca && dims.d2 == 0 {
        return err(format!("{kind:?} needs a second view"));
    }
    if alpha.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
        return err(format!("view weights must be positive, got {alpha:?}"));
    }
    if kind != ModelKind::Sepca && alpha != [1.0, 1.0] {
        return err(format!(
            "view weights other than (1, 1) are only defined for SEPCA, got {alpha:?}"
        ));
    }

    let k = dims.k();
    let d = dims.d();
    let first = dims.k_shared..dims.k_shared + dims.k_first;
    let second = first.end..k;
    let zero_mask = DMatrix::from_fn(k, d, |row, col| {
        let col_view = if col < dims.d1 { 0 } else { 1 };
        (first.contains(&row) && col_view == 1) || (second.contains(&row) && col_view == 0)
    });
    Ok(BlockLayout {
        kind,
        dims,
        families,
        alpha,
        use_mean_row: false,
        zero_mask,
    })
}

impl BlockLayout {
    pub fn with_mean_row(mut self, on: bool) -> Self {
        self.use_mean_row = on;
        self
    }

    pub fn spec(&self) -> LayoutSpec {
        LayoutSpec {
            model: self.kind,
            dims: self.dims,
            families: self.families,
            alpha: self.alpha,
            use_mean_row: self.use_mean_row,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn families(&self) -> [ExpFamilyKind; 2] {
        self.families
    }

    pub fn alpha(&self) -> [f64; 2] {
        self.alpha
    }

    pub fn use_mean_row(&self) -> bool {
        self.use_mean_row
    }

    pub fn zero_mask(&self) -> &DMatrix<bool> {
        &self.zero_mask
    }

    pub fn k(&self) -> usize {
        self.dims.k()
    }

    pub fn d(&self) -> usize {
        self.dims.d()
    }

    pub fn n_views(&self) -> usize {
        if self.dims.d2 == 0 {
            1
        } else {
            2
        }
    }

    pub fn view_cols(&self, view: usize) -> Range<usize> {
        match view {
            0 => 0..self.dims.d1,
            _ => self.dims.d1..self.dims.d(),
        }
    }

    #[inline]
    pub fn view_of_col(&self, col: usize) -> usize {
        usize::from(col >= self.dims.d1)
    }

    #[inline]
    pub fn family_of_col(&self, col: usize) -> ExpFamilyKind {
        self.families[self.view_of_col(col)]
    }

    #[inline]
    pub fn alpha_of_col(&self, col: usize) -> f64 {
        self.alpha[self.view_of_col(col)]
    }

    pub fn shared(&self) -> Range<usize> {
        0..self.dims.k_shared
    }

    pub fn first_specific(&self) -> Range<usize> {
        self.dims.k_shared..self.dims.k_shared + self.dims.k_first
    }

    pub fn second_specific(&self) -> Range<usize> {
        self.dims.k_shared + self.dims.k_first..self.k()
    }

    pub fn group(&self, component: usize) -> ComponentGroup {
        if component < self.dims.k_shared {
            ComponentGroup::Shared
        } else if component < self.dims.k_shared + self.dims.k_first {
            ComponentGroup::First
        } else {
            ComponentGroup::Second
        }
    }

    #[inline]
    pub fn is_free(&self, component: usize, col: usize) -> bool {
        !self.zero_mask[(component, col)]
    }

    /// Components that may load on view `view`.
    pub fn components_of_view(&self, view: usize) -> Vec<usize> {
        let col = self.view_cols(view).start;
        (0..self.k()).filter(|&c| self.is_free(c, col)).collect()
    }

    pub(crate) fn check_state(&self, state: &FactorState) -> Result<()> {
        let (k, d) = (self.k(), self.d());
        if state.u.ncols() != k || state.v.nrows() != k || state.v.ncols() != d {
            return Err(Error::Shape(format!(
                "U is {}x{}, V is {}x{}, layout needs K = {k}, D = {d}",
                state.u.nrows(),
                state.u.ncols(),
                state.v.nrows(),
                state.v.ncols()
            )));
        }
        match (&state.mean_row, self.use_mean_row) {
            (Some(m), true) if m.len() == d => Ok(()),
            (None, false) => Ok(()),
            (Some(m), true) => Err(Error::Shape(format!(
                "mean row has length {}, expected {d}",
                m.len()
            ))),
            (Some(_), false) => Err(Error::Shape(
                "state carries a mean row but the layout disables it".into(),
            )),
            (None, true) => Err(Error::Shape(
                "layout enables a mean row but the state has none".into(),
            )),
        }
    }
}

/// Free parameters of the factorization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorState {
    /// `N × K` latent variables.
    pub u: DMatrix<f64>,
    /// `K × D` projections.
    pub v: DMatrix<f64>,
    pub mean_row: Option<DVector<f64>>,
}

impl FactorState {
    pub fn zeros(n: usize, layout: &BlockLayout) -> Self {
        Self {
            u: DMatrix::zeros(n, layout.k()),
            v: DMatrix::zeros(layout.k(), layout.d()),
            mean_row: layout.use_mean_row().then(|| DVector::zeros(layout.d())),
        }
    }

    /// I.i.d. Gaussian entries with standard deviation `sd`, masked entries
    /// zeroed.
    ///
    /// When a view's family has a half-line domain the signs are arranged so
    /// that every entry of `UV` in that view starts strictly negative.
    pub fn random_init<R: Rng + ?Sized>(
        n: usize,
        layout: &BlockLayout,
        sd: f64,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, sd).expect("sd is positive");
        let restricted = layout
            .families()
            .iter()
            .take(layout.n_views())
            .any(|f| f.has_restricted_domain());
        let mut state = Self::zeros(n, layout);
        for x in state.u.iter_mut() {
            let z: f64 = normal.sample(rng);
            *x = if restricted { z.abs() + sd } else { z };
        }
        for col in 0..layout.d() {
            let negative = layout.family_of_col(col).has_restricted_domain();
            for row in 0..layout.k() {
                let z: f64 = normal.sample(rng);
                state.v[(row, col)] = if !layout.is_free(row, col) {
                    0.0
                } else if negative {
                    -(z.abs() + sd)
                } else {
                    z
                };
            }
        }
        if let Some(m) = state.mean_row.as_mut() {
            for (col, x) in m.iter_mut().enumerate() {
                *x = if layout.family_of_col(col).has_restricted_domain() {
                    -1.0
                } else {
                    0.0
                };
            }
        }
        state
    }

    pub fn n(&self) -> usize {
        self.u.nrows()
    }

    pub fn enforce_mask(&mut self, layout: &BlockLayout) {
        for ((row, col), x) in self
            .v
            .iter_mut()
            .enumerate()
            .map(|(i, x)| ((i % layout.k(), i / layout.k()), x))
        {
            if !layout.is_free(row, col) {
                *x = 0.0;
            }
        }
    }

    pub fn respects_mask(&self, layout: &BlockLayout) -> bool {
        (0..layout.k())
            .all(|r| (0..layout.d()).all(|c| layout.is_free(r, c) || self.v[(r, c)] == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().all(|x| x.is_finite())
            && self.v.iter().all(|x| x.is_finite())
            && self
                .mean_row
                .as_ref()
                .is_none_or(|m| m.iter().all(|x| x.is_finite()))
    }
}

/// `Θ = U V` (plus the broadcast mean row when enabled).
pub fn assemble_theta(state: &FactorState, layout: &BlockLayout) -> Result<DMatrix<f64>> {
    layout.check_state(state)?;
    let mut theta = &state.u * &state.v;
    if let Some(m) = &state.mean_row {
        for mut row in theta.row_iter_mut() {
            row += m.transpose();
        }
    }
    Ok(theta)
}

/// A data matrix with a per-entry observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    x: DMatrix<f64>,
    observed: DMatrix<bool>,
    view_widths: [usize; 2],
    families: [ExpFamilyKind; 2],
}

impl ObservationSet {
    pub fn new(
        x: DMatrix<f64>,
        observed: DMatrix<bool>,
        view_widths: [usize; 2],
        families: [ExpFamilyKind; 2],
    ) -> Result<Self> {
        if x.shape() != observed.shape() {
            return Err(Error::Shape(format!(
                "data is {:?} but mask is {:?}",
                x.shape(),
                observed.shape()
            )));
        }
        if view_widths[0] + view_widths[1] != x.ncols() {
            return Err(Error::Shape(format!(
                "view widths {view_widths:?} do not add up to {} columns",
                x.ncols()
            )));
        }
        for col in 0..x.ncols() {
            let family = families[usize::from(col >= view_widths[0])];
            for row in 0..x.nrows() {
                if observed[(row, col)] && !family.in_support(x[(row, col)]) {
                    return Err(Error::Support {
                        family,
                        x: x[(row, col)],
                    });
                }
            }
        }
        Ok(Self {
            x,
            observed,
            view_widths,
            families,
        })
    }

    pub fn fully_observed(
        x: DMatrix<f64>,
        view_widths: [usize; 2],
        families: [ExpFamilyKind; 2],
    ) -> Result<Self> {
        let observed = DMatrix::from_element(x.nrows(), x.ncols(), true);
        Self::new(x, observed, view_widths, families)
    }

    /// Binds a data matrix to the views of `layout`.
    pub fn for_layout(x: DMatrix<f64>, observed: DMatrix<bool>, layout: &BlockLayout) -> Result<Self> {
        let dims = layout.dims();
        Self::new(x, observed, [dims.d1, dims.d2], layout.families())
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn observed(&self) -> &DMatrix<bool> {
        &self.observed
    }

    pub fn view_widths(&self) -> [usize; 2] {
        self.view_widths
    }

    pub fn families(&self) -> [ExpFamilyKind; 2] {
        self.families
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    #[inline]
    pub fn is_observed(&self, row: usize, col: usize) -> bool {
        self.observed[(row, col)]
    }

    /// The same data seen through a different mask, which must be a subset of
    /// the current one.
    pub fn with_mask(&self, mask: DMatrix<bool>) -> Result<Self> {
        if mask.shape() != self.observed.shape() {
            return Err(Error::Shape("mask shape differs from data".into()));
        }
        if mask.iter().zip(self.observed.iter()).any(|(&m, &o)| m && !o) {
            return Err(Error::Mask(
                "new mask marks entries that were never observed".into(),
            ));
        }
        Ok(Self {
            x: self.x.clone(),
            observed: mask,
            view_widths: self.view_widths,
            families: self.families,
        })
    }

    /// Keeps only the listed rows.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(rows),
            observed: self.observed.select_rows(rows),
            view_widths: self.view_widths,
            families: self.families,
        }
    }

    /// Hides every entry of view `view`.
    pub fn hide_view(&self, view: usize) -> Self {
        let mut observed = self.observed.clone();
        let cols = if view == 0 {
            0..self.view_widths[0]
        } else {
            self.view_widths[0]..self.d()
        };
        for col in cols {
            observed.column_mut(col).fill(false);
        }
        Self {
            observed,
            ..self.clone()
        }
    }

    /// Rows and columns without any observed entry.
    pub fn coverage_gaps(&self) -> (Vec<usize>, Vec<usize>) {
        let rows = (0..self.n())
            .filter(|&r| !self.observed.row(r).iter().any(|&o| o))
            .collect();
        let cols = (0..self.d())
            .filter(|&c| !self.observed.column(c).iter().any(|&o| o))
            .collect();
        (rows, cols)
    }
}

fn check_obs(obs: &ObservationSet, theta: &DMatrix<f64>, layout: &BlockLayout) -> Result<()> {
    let dims = layout.dims();
    if obs.shape_mismatch(theta) || obs.view_widths != [dims.d1, dims.d2] {
        return Err(Error::Shape(format!(
            "data is {}x{} with views {:?}, Θ is {}x{} with views [{}, {}]",
            obs.n(),
            obs.d(),
            obs.view_widths,
            theta.nrows(),
            theta.ncols(),
            dims.d1,
            dims.d2
        )));
    }
    Ok(())
}

impl ObservationSet {
    fn shape_mismatch(&self, theta: &DMatrix<f64>) -> bool {
        self.x.shape() != theta.shape()
    }
}

/// Unweighted log-likelihood of the observed entries of each view.
pub fn log_likelihood_by_view(
    obs: &ObservationSet,
    theta: &DMatrix<f64>,
    layout: &BlockLayout,
) -> Result<[f64; 2]> {
    check_obs(obs, theta, layout)?;
    let mut out = [0.0; 2];
    for col in 0..obs.d() {
        let family = layout.family_of_col(col);
        let view = layout.view_of_col(col);
        for row in 0..obs.n() {
            if obs.observed[(row, col)] {
                out[view] += family.log_pdf(obs.x[(row, col)], theta[(row, col)])?;
            }
        }
    }
    Ok(out)
}

/// `Σ α_view · log p(X_nd | Θ_nd)` over observed entries.
pub fn log_likelihood_theta(
    obs: &ObservationSet,
    theta: &DMatrix<f64>,
    layout: &BlockLayout,
) -> Result<f64> {
    check_obs(obs, theta, layout)?;
    let mut total = 0.0;
    for col in 0..obs.d() {
        let family = layout.family_of_col(col);
        let alpha = layout.alpha_of_col(col);
        for row in 0..obs.n() {
            if obs.observed[(row, col)] {
                total += alpha * family.log_pdf(obs.x[(row, col)], theta[(row, col)])?;
            }
        }
    }
    Ok(total)
}

pub fn log_likelihood(
    obs: &ObservationSet,
    state: &FactorState,
    layout: &BlockLayout,
) -> Result<f64> {
    let theta = assemble_theta(state, layout)?;
    log_likelihood_theta(obs, &theta, layout)
}

/// `∂ log-likelihood / ∂Θ`, zero on unobserved entries.
pub(crate) fn log_likelihood_grad_theta(
    obs: &ObservationSet,
    theta: &DMatrix<f64>,
    layout: &BlockLayout,
) -> DMatrix<f64> {
    DMatrix::from_fn(obs.n(), obs.d(), |row, col| {
        if obs.observed[(row, col)] {
            let family = layout.family_of_col(col);
            layout.alpha_of_col(col)
                * (obs.x[(row, col)] - family.mean_param_unchecked(theta[(row, col)]))
        } else {
            0.0
        }
    })
}

/// Maps a [`FactorState`] to and from the flat vector of its free
/// coordinates: `U` row-major, unmasked `V` entries, then the mean row.
#[derive(Debug, Clone)]
pub struct ParamPacking {
    n: usize,
    k: usize,
    d: usize,
    free_v: Vec<(usize, usize)>,
    mean_row: bool,
}

impl ParamPacking {
    pub fn new(n: usize, layout: &BlockLayout) -> Self {
        let (k, d) = (layout.k(), layout.d());
        let free_v = (0..k)
            .flat_map(|r| (0..d).map(move |c| (r, c)))
            .filter(|&(r, c)| layout.is_free(r, c))
            .collect();
        Self {
            n,
            k,
            d,
            free_v,
            mean_row: layout.use_mean_row(),
        }
    }

    pub fn len(&self) -> usize {
        self.n * self.k + self.free_v.len() + if self.mean_row { self.d } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_u(&self) -> usize {
        self.n * self.k
    }

    pub fn n_v(&self) -> usize {
        self.free_v.len()
    }

    pub fn pack(&self, state: &FactorState) -> DVector<f64> {
        self.pack_parts(&state.u, &state.v, state.mean_row.as_ref())
    }

    pub(crate) fn pack_parts(
        &self,
        u: &DMatrix<f64>,
        v: &DMatrix<f64>,
        mean_row: Option<&DVector<f64>>,
    ) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        let mut i = 0;
        for row in 0..self.n {
            for col in 0..self.k {
                out[i] = u[(row, col)];
                i += 1;
            }
        }
        for &(r, c) in &self.free_v {
            out[i] = v[(r, c)];
            i += 1;
        }
        if let Some(m) = mean_row.filter(|_| self.mean_row) {
            for x in m.iter() {
                out[i] = *x;
                i += 1;
            }
        }
        out
    }

    pub fn unpack(&self, params: &DVector<f64>) -> FactorState {
        let mut u = DMatrix::zeros(self.n, self.k);
        let mut v = DMatrix::zeros(self.k, self.d);
        let mut i = 0;
        for row in 0..self.n {
            for col in 0..self.k {
                u[(row, col)] = params[i];
                i += 1;
            }
        }
        for &(r, c) in &self.free_v {
            v[(r, c)] = params[i];
            i += 1;
        }
        let mean_row = self
            .mean_row
            .then(|| DVector::from_iterator(self.d, params.iter().skip(i).copied()));
        FactorState { u, v, mean_row }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::ExpFamilyKind::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(d1: usize, d2: usize, ks: usize, k1: usize, k2: usize) -> Dims {
        Dims {
            d1,
            d2,
            k_shared: ks,
            k_first: k1,
            k_second: k2,
        }
    }

    #[test]
    fn epls_mask_zeroes_specific_rows_on_target() {
        let layout = make_layout(
            ModelKind::Epls,
            dims(1, 20, 1, 0, 5),
            [Bernoulli, Bernoulli],
            [1.0, 1.0],
        )
        .unwrap();
        let mask = layout.zero_mask();
        assert_eq!(mask.shape(), (6, 21));
        assert_eq!(mask.iter().filter(|&&z| z).count(), 5);
        for r in 1..6 {
            assert!(mask[(r, 0)]);
        }
    }

    #[test]
    fn ecca_mask_has_two_opposite_blocks() {
        let layout = make_layout(
            ModelKind::Ecca,
            dims(20, 20, 1, 2, 2),
            [Poisson, Poisson],
            [1.0, 1.0],
        )
        .unwrap();
        let mask = layout.zero_mask();
        assert_eq!(mask.iter().filter(|&&z| z).count(), 80);
        for c in 0..40 {
            assert!(!mask[(0, c)]);
            for r in 1..3 {
                assert_eq!(mask[(r, c)], c >= 20);
            }
            for r in 3..5 {
                assert_eq!(mask[(r, c)], c < 20);
            }
        }
    }

    #[test]
    fn epca_mask_is_empty() {
        let layout =
            make_layout(ModelKind::Epca, dims(7, 0, 3, 0, 0), [Gaussian, Gaussian], [1.0, 1.0])
                .unwrap();
        assert!(layout.zero_mask().iter().all(|&z| !z));
    }

    #[test]
    fn inconsistent_ranks_are_rejected() {
        let fam = [Bernoulli, Bernoulli];
        assert!(matches!(
            make_layout(ModelKind::Epls, dims(1, 5, 1, 1, 2), fam, [1.0, 1.0]),
            Err(Error::Layout(_))
        ));
        assert!(make_layout(ModelKind::Sepca, dims(1, 5, 1, 0, 1), fam, [1.0, 1.0]).is_err());
        assert!(make_layout(ModelKind::Epca, dims(4, 2, 1, 0, 0), fam, [1.0, 1.0]).is_err());
        assert!(make_layout(ModelKind::Ecca, dims(4, 2, 0, 1, 1), fam, [1.0, 1.0]).is_err());
        assert!(make_layout(ModelKind::Epls, dims(1, 5, 1, 0, 2), fam, [1.0, 0.5]).is_err());
        assert!(make_layout(ModelKind::Sepca, dims(1, 5, 2, 0, 0), fam, [1.0, 1e-3]).is_ok());
    }

    #[test]
    fn epls_theta_matches_blockwise_example() {
        let layout =
            make_layout(ModelKind::Epls, dims(1, 1, 1, 0, 1), [Gaussian, Gaussian], [1.0, 1.0])
                .unwrap();
        let state = FactorState {
            u: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            v: DMatrix::from_row_slice(2, 2, &[2.0, 3.0, 0.0, 4.0]),
            mean_row: None,
        };
        let theta = assemble_theta(&state, &layout).unwrap();
        assert_eq!(theta.as_slice(), &[2.0, 7.0]);

        let mut perturbed = state.clone();
        perturbed.u[(0, 1)] = -13.0;
        let theta2 = assemble_theta(&perturbed, &layout).unwrap();
        assert_eq!(theta2[(0, 0)], theta[(0, 0)]);
    }

    #[test]
    fn ecca_theta_matches_blockwise_formula() {
        let layout =
            make_layout(ModelKind::Ecca, dims(3, 4, 1, 1, 2), [Gaussian, Gaussian], [1.0, 1.0])
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let state = FactorState::random_init(6, &layout, 1.0, &mut rng);
        let theta = assemble_theta(&state, &layout).unwrap();

        // Θ1 = U_S V_S1 + U_1 V_1, Θ2 = U_S V_S2 + U_2 V_2
        let us = state.u.columns(0, 1);
        let u1 = state.u.columns(1, 1);
        let u2 = state.u.columns(2, 2);
        let theta1 = us * state.v.view((0, 0), (1, 3)) + u1 * state.v.view((1, 0), (1, 3));
        let theta2 = us * state.v.view((0, 3), (1, 4)) + u2 * state.v.view((2, 3), (2, 4));
        for n in 0..6 {
            for d in 0..3 {
                assert!((theta[(n, d)] - theta1[(n, d)]).abs() < 1e-12);
            }
            for d in 0..4 {
                assert!((theta[(n, 3 + d)] - theta2[(n, d)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let layout =
            make_layout(ModelKind::Epca, dims(3, 0, 2, 0, 0), [Gaussian, Gaussian], [1.0, 1.0])
                .unwrap();
        let state = FactorState {
            u: DMatrix::zeros(4, 3),
            v: DMatrix::zeros(3, 3),
            mean_row: None,
        };
        assert!(matches!(assemble_theta(&state, &layout), Err(Error::Shape(_))));
    }

    #[test]
    fn mean_row_broadcasts() {
        let layout =
            make_layout(ModelKind::Epca, dims(2, 0, 1, 0, 0), [Gaussian, Gaussian], [1.0, 1.0])
                .unwrap()
                .with_mean_row(true);
        let state = FactorState {
            u: DMatrix::from_column_slice(2, 1, &[1.0, 2.0]),
            v: DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
            mean_row: Some(DVector::from_vec(vec![0.5, 0.25])),
        };
        let theta = assemble_theta(&state, &layout).unwrap();
        assert_eq!(theta, DMatrix::from_row_slice(2, 2, &[1.5, -0.75, 2.5, -1.75]));
    }

    #[test]
    fn log_likelihood_examples() {
        let layout =
            make_layout(ModelKind::Epca, dims(1, 0, 1, 0, 0), [Bernoulli, Bernoulli], [1.0, 1.0])
                .unwrap();
        let state = FactorState::zeros(1, &layout);
        let x = DMatrix::from_element(1, 1, 1.0);
        let obs = ObservationSet::fully_observed(x.clone(), [1, 0], [Bernoulli, Bernoulli]).unwrap();
        let ll = log_likelihood(&obs, &state, &layout).unwrap();
        assert!((ll + 2f64.ln()).abs() < 1e-15);

        let hidden = obs.with_mask(DMatrix::from_element(1, 1, false)).unwrap();
        assert_eq!(log_likelihood(&hidden, &state, &layout).unwrap(), 0.0);
    }

    #[test]
    fn sepca_weighting_decomposes() {
        let layout = make_layout(
            ModelKind::Sepca,
            dims(2, 5, 2, 0, 0),
            [Bernoulli, Poisson],
            [1.0, 1e-3],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let state = FactorState::random_init(8, &layout, 0.7, &mut rng);
        let theta = assemble_theta(&state, &layout).unwrap();
        let x = DMatrix::from_fn(8, 7, |r, c| {
            layout.family_of_col(c).sample(theta[(r, c)], &mut rng).unwrap()
        });
        let obs = ObservationSet::for_layout(x.clone(), DMatrix::from_element(8, 7, true), &layout)
            .unwrap();
        let total = log_likelihood(&obs, &state, &layout).unwrap();

        let mut view1 = 0.0;
        let mut view2 = 0.0;
        for r in 0..8 {
            for c in 0..2 {
                view1 += Bernoulli.log_pdf(x[(r, c)], theta[(r, c)]).unwrap();
            }
            for c in 2..7 {
                view2 += Poisson.log_pdf(x[(r, c)], theta[(r, c)]).unwrap();
            }
        }
        assert!((total - (view1 + 1e-3 * view2)).abs() < 1e-10);
    }

    #[test]
    fn sepca_with_unit_weights_equals_concatenated_epca() {
        let sepca =
            make_layout(ModelKind::Sepca, dims(2, 3, 2, 0, 0), [Gaussian, Gaussian], [1.0, 1.0])
                .unwrap();
        let epca =
            make_layout(ModelKind::Epca, dims(5, 0, 2, 0, 0), [Gaussian, Gaussian], [1.0, 1.0])
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let state = FactorState::random_init(4, &sepca, 1.0, &mut rng);
        let x = DMatrix::from_fn(4, 5, |r, c| (r * 5 + c) as f64 * 0.1 - 1.0);
        let mask = DMatrix::from_element(4, 5, true);
        let a = log_likelihood(&ObservationSet::for_layout(x.clone(), mask.clone(), &sepca).unwrap(), &state, &sepca)
            .unwrap();
        let b = log_likelihood(&ObservationSet::for_layout(x, mask, &epca).unwrap(), &state, &epca)
            .unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn out_of_domain_theta_is_a_domain_error() {
        let layout = make_layout(
            ModelKind::Epca,
            dims(1, 0, 1, 0, 0),
            [Exponential, Exponential],
            [1.0, 1.0],
        )
        .unwrap();
        let state = FactorState {
            u: DMatrix::from_element(1, 1, 1.0),
            v: DMatrix::from_element(1, 1, 0.5),
            mean_row: None,
        };
        let obs = ObservationSet::for_layout(
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, true),
            &layout,
        )
        .unwrap();
        assert!(matches!(
            log_likelihood(&obs, &state, &layout),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn observation_support_is_validated() {
        let x = DMatrix::from_row_slice(1, 2, &[0.0, 2.0]);
        assert!(ObservationSet::fully_observed(x.clone(), [2, 0], [Bernoulli, Bernoulli]).is_err());
        let mut mask = DMatrix::from_element(1, 2, true);
        mask[(0, 1)] = false;
        assert!(ObservationSet::new(x, mask, [2, 0], [Bernoulli, Bernoulli]).is_ok());
    }

    #[test]
    fn random_init_respects_restricted_domains() {
        let layout = make_layout(
            ModelKind::Ecca,
            dims(3, 3, 1, 1, 1),
            [Exponential, Gaussian],
            [1.0, 1.0],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let state = FactorState::random_init(5, &layout, 0.01, &mut rng);
            assert!(state.respects_mask(&layout));
            let theta = assemble_theta(&state, &layout).unwrap();
            for r in 0..5 {
                for c in 0..3 {
                    assert!(theta[(r, c)] < 0.0);
                }
            }
        }
    }

    #[test]
    fn packing_round_trips_and_skips_masked_entries() {
        let layout =
            make_layout(ModelKind::Ecca, dims(2, 3, 1, 1, 1), [Gaussian, Gaussian], [1.0, 1.0])
                .unwrap()
                .with_mean_row(true);
        let packing = ParamPacking::new(4, &layout);
        assert_eq!(packing.len(), 4 * 3 + (5 + 2 + 3) + 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let state = FactorState::random_init(4, &layout, 1.0, &mut rng);
        assert_eq!(packing.unpack(&packing.pack(&state)), state);
    }
}
