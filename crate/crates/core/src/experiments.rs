//! The four built-in experiment recipes.
//!
//! Every recipe runs its replicates (or grid points) on a dedicated rayon pool
//! and merges the results by index, so the output only depends on the seed.
//! A replicate that fails leaves a `failed` row in the CSV and an entry in
//! the summary; the others are kept.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::evaluation::{
    generate_coupled, knn_latent_error, paired_significance, prediction_error,
    time_between_uncorrelated, GeneratorSpec,
};
use crate::expfam::{ConjugateHyper, ExpFamilyKind};
use crate::gibecca::{posterior_shared_latent, run_gaussian_bcca, run_gibecca, GibeccaOptions};
use crate::hmc_infer::{run_hmc_chain, HmcOptions};
use crate::io::MetricRow;
use crate::map_infer::{cv_select_hyperparams, fit_map, fit_map_from, masked_loglik, CvGrid, CvOptions, MapOptions};
use crate::model::{
    assemble_theta, make_layout, predict_target, BlockLayout, Dims, FactorState, FoldInOptions,
    LayoutSpec, ModelKind, ObservationSet,
};
use crate::prior::PriorSpec;
use crate::rng::{derive_seed, stream_rng};
use crate::spect::{load_spect, make_holdout, synthetic_spect};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    EplsVsSepca,
    BetaSweep,
    CcaKnn,
    SamplerBench,
}

impl Recipe {
    pub const ALL: [Recipe; 4] = [Recipe::EplsVsSepca, Recipe::BetaSweep, Recipe::CcaKnn, Recipe::SamplerBench];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::EplsVsSepca => "epls-vs-sepca",
            Recipe::BetaSweep => "beta-sweep",
            Recipe::CcaKnn => "cca-knn",
            Recipe::SamplerBench => "sampler-bench",
        }
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::config("experiment", format!("unknown recipe `{s}`")))
    }
}

/// Settings shared by all recipes, normally taken from the command line.
#[derive(Debug, Clone, Default)]
pub struct RunContext {
    pub seed: u64,
    /// Worker threads; `0` lets rayon decide.
    pub jobs: usize,
    /// SPECT file or directory for the beta sweep.
    pub spect: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub recipe: Recipe,
    pub rows: Vec<MetricRow>,
    pub summary: Value,
    /// `(replicate, message)` for every failed unit of work.
    pub failures: Vec<(usize, String)>,
}

fn row(recipe: Recipe, replicate: usize, method: &str, components: usize, metric: &str, value: f64) -> MetricRow {
    MetricRow {
        experiment: recipe.name().to_string(),
        replicate,
        method: method.to_string(),
        components,
        metric: metric.to_string(),
        value,
    }
}

/// Runs `f(0..n)` on `jobs` threads and returns the results in index order.
fn par_indexed<T, F>(n: usize, jobs: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(&f).collect()))
}

/// Flattens per-replicate results, turning failures into flagged rows.
fn merge(recipe: Recipe, results: Vec<Result<Vec<MetricRow>>>) -> (Vec<MetricRow>, Vec<(usize, String)>) {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(mut rs) => rows.append(&mut rs),
            Err(e) => {
                log::error!("{} replicate {i} failed: {e}", recipe.name());
                rows.push(row(recipe, i, "failed", 0, "failed", f64::NAN));
                failures.push((i, e.to_string()));
            }
        }
    }
    (rows, failures)
}

fn failures_json(failures: &[(usize, String)]) -> Value {
    Value::Array(
        failures
            .iter()
            .map(|(i, m)| json!({ "replicate": i, "error": m }))
            .collect(),
    )
}

/// Values of `metric` for `(method, components)`, indexed by replicate.
fn collect(rows: &[MetricRow], method: &str, components: usize, metric: &str) -> BTreeMap<usize, f64> {
    rows.iter()
        .filter(|r| r.method == method && r.components == components && r.metric == metric)
        .map(|r| (r.replicate, r.value))
        .collect()
}

/// Paired values over the replicates present in both maps.
fn paired(a: &BTreeMap<usize, f64>, b: &BTreeMap<usize, f64>) -> (Vec<f64>, Vec<f64>) {
    a.iter()
        .filter_map(|(i, x)| b.get(i).map(|y| (*x, *y)))
        .unzip()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) }
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn p_value(a: &[f64], b: &[f64], n_comparisons: usize) -> Value {
    match paired_significance(a, b, n_comparisons) {
        Ok(p) => json!(p),
        Err(_) => Value::Null,
    }
}

// ---------------------------------------------------------------- epls-vs-sepca

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EplsVsSepcaConfig {
    pub replicates: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub covariates: usize,
    /// Covariate-specific components of the generator and of EPLS.
    pub specific: usize,
    /// SEPCA is fitted with `1..=max_components` components.
    pub max_components: usize,
    /// Covariate-view weights for SEPCA.
    pub alphas: Vec<f64>,
    pub family: ExpFamilyKind,
    pub latent_scale: f64,
    pub loading_scale: f64,
    pub sigma2_u: f64,
    pub sigma2_v: f64,
    pub map: MapOptions,
    pub fold_in: FoldInOptions,
}

impl Default for EplsVsSepcaConfig {
    fn default() -> Self {
        Self {
            replicates: 20,
            n_train: 50,
            n_test: 950,
            covariates: 20,
            specific: 5,
            max_components: 8,
            alphas: vec![1.0, 1e-3],
            family: ExpFamilyKind::Bernoulli,
            latent_scale: 1.0,
            loading_scale: 3.0,
            sigma2_u: 1.0,
            sigma2_v: 1.0,
            map: MapOptions { restarts: 3, ..MapOptions::default() },
            fold_in: FoldInOptions::default(),
        }
    }
}

pub fn sepca_method(alpha: f64) -> String {
    format!("sepca_a{alpha}")
}

fn target_error(
    data: &crate::evaluation::CoupledData,
    layout: &BlockLayout,
    cfg: &EplsVsSepcaConfig,
    seed: u64,
) -> Result<f64> {
    let spec = PriorSpec::interpolating(0.0, ConjugateHyper::default(), cfg.sigma2_u, cfg.sigma2_v, layout.k());
    let fit = fit_map(&data.train, layout, &spec, &MapOptions { seed, ..cfg.map })?;
    let pred = predict_target(&data.test, &fit.state, &spec, layout, &cfg.fold_in)?;
    let means: Vec<f64> = pred.means.column(0).iter().copied().collect();
    let targets: Vec<f64> = data.test.x().column(0).iter().copied().collect();
    prediction_error(&means, &targets, cfg.family)
}

fn epls_vs_sepca_replicate(cfg: &EplsVsSepcaConfig, seed: u64, rep: usize) -> Result<Vec<MetricRow>> {
    const R: Recipe = Recipe::EplsVsSepca;
    let families = [cfg.family, cfg.family];
    let epls = make_layout(
        ModelKind::Epls,
        Dims { d1: 1, d2: cfg.covariates, k_shared: 1, k_first: 0, k_second: cfg.specific },
        families,
        [1.0, 1.0],
    )?;
    let generator = GeneratorSpec {
        latent_scale: cfg.latent_scale,
        loading_scale: cfg.loading_scale,
        ..GeneratorSpec::new(epls.spec(), cfg.n_train, cfg.n_test, derive_seed(seed, rep as u64))
    };
    let data = generate_coupled(&generator)?;
    let fit_seed = derive_seed(seed ^ 0x5eed, rep as u64);

    let mut rows = vec![row(R, rep, "epls", 1, "test_error", target_error(&data, &epls, cfg, fit_seed)?)];
    for &alpha in &cfg.alphas {
        let method = sepca_method(alpha);
        for k in 1..=cfg.max_components {
            let layout = make_layout(
                ModelKind::Sepca,
                Dims { d1: 1, d2: cfg.covariates, k_shared: k, k_first: 0, k_second: 0 },
                families,
                [1.0, alpha],
            )?;
            let err = target_error(&data, &layout, cfg, fit_seed)?;
            rows.push(row(R, rep, &method, k, "test_error", err));
        }
    }
    Ok(rows)
}

pub fn run_epls_vs_sepca(cfg: &EplsVsSepcaConfig, ctx: &RunContext) -> Result<ExperimentOutput> {
    if cfg.replicates == 0 || cfg.max_components == 0 {
        return Err(Error::config("replicates", "needs at least one replicate and one component"));
    }
    let results = par_indexed(cfg.replicates, ctx.jobs, |rep| epls_vs_sepca_replicate(cfg, ctx.seed, rep))?;
    let (rows, failures) = merge(Recipe::EplsVsSepca, results);

    let epls = collect(&rows, "epls", 1, "test_error");
    let epls_vals: Vec<f64> = epls.values().copied().collect();
    let mut comparisons = Vec::new();
    for &alpha in &cfg.alphas {
        let method = sepca_method(alpha);
        for k in 1..=cfg.max_components {
            let other = collect(&rows, &method, k, "test_error");
            let (a, b) = paired(&epls, &other);
            comparisons.push(json!({
                "method": method,
                "components": k,
                "epls_mean": mean(&a),
                "mean": mean(&b),
                "p_value": p_value(&a, &b, cfg.max_components),
            }));
        }
    }
    let summary = json!({
        "experiment": Recipe::EplsVsSepca.name(),
        "seed": ctx.seed,
        "config": cfg,
        "epls_mean": mean(&epls_vals),
        "comparisons": comparisons,
        "failures": failures_json(&failures),
    });
    Ok(ExperimentOutput { recipe: Recipe::EplsVsSepca, rows, summary, failures })
}

// ---------------------------------------------------------------- beta-sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BetaSweepConfig {
    /// Number of evenly spaced `β` values in `[0, 1]`.
    pub grid_points: usize,
    pub restarts: usize,
    pub components: usize,
    pub holdout_fraction: f64,
    pub cv: CvOptions,
    pub cv_grid: CvGrid,
    pub map: MapOptions,
    /// Seed of the synthetic stand-in used when no SPECT file is given.
    pub synthetic_seed: u64,
}

impl Default for BetaSweepConfig {
    fn default() -> Self {
        let mut a_hyper = Vec::new();
        for nu in [0.5, 2.0, 8.0] {
            for m in [0.2, 0.35, 0.5] {
                a_hyper.push(ConjugateHyper::new(m * nu, nu));
            }
        }
        Self {
            grid_points: 100,
            restarts: 10,
            components: 1,
            holdout_fraction: 0.1,
            cv: CvOptions { folds: 5, ..CvOptions::default() },
            cv_grid: CvGrid {
                a_hyper,
                variances: [0.1, 0.3, 1.0, 3.0, 10.0].iter().map(|&s| (s, s)).collect(),
            },
            map: MapOptions { init_sd: 0.1, ..MapOptions::default() },
            synthetic_seed: 1,
        }
    }
}

pub fn beta_grid(points: usize) -> Vec<f64> {
    match points {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..points).map(|i| i as f64 / (points - 1) as f64).collect(),
    }
}

struct SweepPoint {
    best: f64,
    restart_values: Vec<f64>,
    objective: f64,
}

fn sweep_point(
    obs: &ObservationSet,
    train: &ObservationSet,
    hold: &DMatrix<bool>,
    layout: &BlockLayout,
    spec: &PriorSpec,
    cfg: &BetaSweepConfig,
    seed: u64,
) -> Result<SweepPoint> {
    let mut values = Vec::with_capacity(cfg.restarts);
    let mut best: Option<(f64, f64)> = None;
    for r in 0..cfg.restarts.max(1) {
        let mut rng = stream_rng(seed, r as u64);
        let init = FactorState::random_init(train.n(), layout, cfg.map.init_sd, &mut rng);
        let fit = fit_map_from(train, layout, spec, &cfg.map, init)?;
        let theta = assemble_theta(&fit.state, layout)?;
        let ll = masked_loglik(obs, &theta, hold, layout)?;
        values.push(ll);
        if best.is_none_or(|(obj, _)| fit.objective < obj) {
            best = Some((fit.objective, ll));
        }
    }
    let (objective, best) = best.expect("at least one restart");
    Ok(SweepPoint { best, restart_values: values, objective })
}

pub fn run_beta_sweep(cfg: &BetaSweepConfig, ctx: &RunContext) -> Result<ExperimentOutput> {
    const R: Recipe = Recipe::BetaSweep;
    if cfg.grid_points < 2 {
        return Err(Error::config("grid_points", "needs at least the two endpoints"));
    }
    let (obs, source) = match &ctx.spect {
        Some(p) => (load_spect(p)?, p.display().to_string()),
        None => {
            log::info!("no SPECT path given; using the synthetic binary stand-in");
            (synthetic_spect(cfg.synthetic_seed), "synthetic".to_string())
        }
    };
    let layout = make_layout(
        ModelKind::Epca,
        Dims { d1: obs.d(), d2: 0, k_shared: cfg.components, k_first: 0, k_second: 0 },
        [ExpFamilyKind::Bernoulli; 2],
        [1.0, 1.0],
    )?;
    let (train_mask, hold) = make_holdout(&obs, cfg.holdout_fraction, derive_seed(ctx.seed, 1))?;
    let train = obs.with_mask(train_mask)?;

    let cv_opts = CvOptions {
        seed: derive_seed(ctx.seed, 2),
        map: MapOptions { seed: derive_seed(ctx.seed, 3), ..cfg.cv.map },
        ..cfg.cv
    };
    let cv = cv_select_hyperparams(&train, &layout, &cfg.cv_grid, 0.0, &cv_opts)?;
    let chosen = cv.selected.clone();

    let betas = beta_grid(cfg.grid_points);
    let fit_seed = derive_seed(ctx.seed, 4);
    let results = par_indexed(betas.len(), ctx.jobs, |i| -> Result<Vec<MetricRow>> {
        let beta = betas[i];
        let spec = PriorSpec::interpolating(
            beta,
            chosen.a_hyper[0],
            chosen.sigma2_u[0],
            chosen.sigma2_v[0],
            layout.k(),
        );
        let p = sweep_point(&obs, &train, &hold, &layout, &spec, cfg, fit_seed)?;
        Ok(vec![
            row(R, i, "map", cfg.components, "beta", beta),
            row(R, i, "map", cfg.components, "heldout_loglik", p.best),
            row(R, i, "map", cfg.components, "restart_sd", std_dev(&p.restart_values)),
            row(R, i, "map", cfg.components, "objective", p.objective),
        ])
    })?;
    let (rows, failures) = merge(R, results);

    let ll = collect(&rows, "map", cfg.components, "heldout_loglik");
    let sd = collect(&rows, "map", cfg.components, "restart_sd");
    let argmax = ll
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| *i);
    let summary = json!({
        "experiment": R.name(),
        "seed": ctx.seed,
        "data": source,
        "rows": obs.n(),
        "heldout_entries": hold.iter().filter(|&&h| h).count(),
        "selected_prior": chosen,
        "cv_a_scores": cv.a_scores,
        "cv_variance_scores": cv.variance_scores,
        "betas": betas,
        "heldout_loglik": ll.values().collect::<Vec<_>>(),
        "restart_sd": sd.values().collect::<Vec<_>>(),
        "argmax_beta": argmax.map(|i| betas[i]),
        "failures": failures_json(&failures),
        "config": cfg,
    });
    Ok(ExperimentOutput { recipe: R, rows, summary, failures })
}

// ---------------------------------------------------------------- cca-knn

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CcaKnnConfig {
    pub replicates: usize,
    pub families: Vec<ExpFamilyKind>,
    pub n: usize,
    pub d: usize,
    pub k_shared: usize,
    pub k_specific: usize,
    pub beta: f64,
    pub a_hyper: ConjugateHyper,
    pub sigma2: f64,
    pub knn_k: usize,
    pub knn_folds: usize,
    pub latent_scale: f64,
    pub loading_scale: f64,
    /// Added to `Θ` in Poisson columns before sampling counts.
    pub poisson_shift: f64,
    pub gibecca: GibeccaOptions,
    /// Also run HMC (hyperparameters fixed) on every replicate.
    pub hmc: bool,
    pub hmc_options: HmcOptions,
    pub map: MapOptions,
}

impl Default for CcaKnnConfig {
    fn default() -> Self {
        Self {
            replicates: 10,
            families: vec![ExpFamilyKind::Poisson, ExpFamilyKind::Bernoulli],
            n: 50,
            d: 20,
            k_shared: 1,
            k_specific: 2,
            beta: 0.1,
            a_hyper: ConjugateHyper::default(),
            sigma2: 1.0,
            knn_k: 9,
            knn_folds: 10,
            latent_scale: 1.0,
            loading_scale: 1.0,
            poisson_shift: 0.0,
            gibecca: GibeccaOptions::default(),
            hmc: true,
            hmc_options: HmcOptions::default(),
            map: MapOptions { restarts: 3, ..MapOptions::default() },
        }
    }
}

pub fn family_name(f: ExpFamilyKind) -> String {
    serde_json::to_value(f)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_else(|| format!("{f:?}"))
}

fn ecca_layout(family: ExpFamilyKind, d: usize, ks: usize, kp: usize) -> Result<BlockLayout> {
    make_layout(
        ModelKind::Ecca,
        Dims { d1: d, d2: d, k_shared: ks, k_first: kp, k_second: kp },
        [family, family],
        [1.0, 1.0],
    )
}

fn coupled_for(cfg: &CcaKnnConfig, family: ExpFamilyKind, seed: u64) -> Result<(BlockLayout, crate::evaluation::CoupledData)> {
    let layout = ecca_layout(family, cfg.d, cfg.k_shared, cfg.k_specific)?;
    let generator = GeneratorSpec {
        latent_scale: cfg.latent_scale,
        loading_scale: cfg.loading_scale,
        poisson_shift: cfg.poisson_shift,
        ..GeneratorSpec::new(layout.spec(), cfg.n, 0, seed)
    };
    Ok((layout, generate_coupled(&generator)?))
}

fn cca_knn_replicate(cfg: &CcaKnnConfig, seed: u64, rep: usize) -> Result<Vec<MetricRow>> {
    const R: Recipe = Recipe::CcaKnn;
    let mut rows = Vec::new();
    for (fi, &family) in cfg.families.iter().enumerate() {
        let name = family_name(family);
        let data_seed = derive_seed(seed, (rep * 16 + fi) as u64);
        let run_seed = derive_seed(data_seed, 1);
        let (layout, data) = coupled_for(cfg, family, data_seed)?;
        let obs = &data.train;
        let labels = &data.train_labels;
        let shared = layout.shared();
        let knn = |latent: &DMatrix<f64>| knn_latent_error(latent, labels, cfg.knn_k, cfg.knn_folds);
        let k = layout.k();

        let spec = PriorSpec::interpolating(cfg.beta, cfg.a_hyper, cfg.sigma2, cfg.sigma2, k);
        let chain = run_gibecca(obs, &layout, &spec, &GibeccaOptions { seed: run_seed, ..cfg.gibecca.clone() })?;
        let latent = posterior_shared_latent(&chain, &layout).ok_or_else(|| Error::Chain("empty chain".into()))?;
        rows.push(row(R, rep, &format!("{name}/gibecca"), cfg.k_shared, "knn_error", knn(&latent)?));

        if cfg.hmc {
            let chain = run_hmc_chain(obs, &layout, &spec, &HmcOptions { seed: run_seed, ..cfg.hmc_options.clone() })?;
            let u = chain.posterior_mean_u().ok_or_else(|| Error::Chain("empty chain".into()))?;
            let latent = u.columns(shared.start, shared.len()).into_owned();
            rows.push(row(R, rep, &format!("{name}/hmc"), cfg.k_shared, "knn_error", knn(&latent)?));
        }

        let gauss_layout = ecca_layout(ExpFamilyKind::Gaussian, cfg.d, cfg.k_shared, cfg.k_specific)?;
        let gauss_spec = PriorSpec::interpolating(0.0, ConjugateHyper::default(), cfg.sigma2, cfg.sigma2, k);
        let chain = run_gaussian_bcca(obs.x(), &gauss_layout, &gauss_spec, &GibeccaOptions { seed: run_seed, ..cfg.gibecca.clone() })?;
        let latent = posterior_shared_latent(&chain, &gauss_layout).ok_or_else(|| Error::Chain("empty chain".into()))?;
        rows.push(row(R, rep, &format!("{name}/bcca"), cfg.k_shared, "knn_error", knn(&latent)?));

        let raw = ObservationSet::fully_observed(obs.x().clone(), [cfg.d, cfg.d], [ExpFamilyKind::Gaussian; 2])?;
        let fit = fit_map(&raw, &gauss_layout, &gauss_spec, &MapOptions { seed: run_seed, ..cfg.map })?;
        let latent = fit.state.u.columns(shared.start, shared.len()).into_owned();
        rows.push(row(R, rep, &format!("{name}/cca"), cfg.k_shared, "knn_error", knn(&latent)?));
    }
    Ok(rows)
}

pub fn cca_methods(cfg: &CcaKnnConfig) -> Vec<&'static str> {
    let mut m = vec!["gibecca"];
    if cfg.hmc {
        m.push("hmc");
    }
    m.extend(["bcca", "cca"]);
    m
}

pub fn run_cca_knn(cfg: &CcaKnnConfig, ctx: &RunContext) -> Result<ExperimentOutput> {
    const R: Recipe = Recipe::CcaKnn;
    if cfg.replicates == 0 || cfg.families.is_empty() {
        return Err(Error::config("replicates", "needs at least one replicate and one family"));
    }
    let results = par_indexed(cfg.replicates, ctx.jobs, |rep| cca_knn_replicate(cfg, ctx.seed, rep))?;
    let (rows, failures) = merge(R, results);

    let mut medians = serde_json::Map::new();
    let mut tests = Vec::new();
    for &family in &cfg.families {
        let name = family_name(family);
        let mut per = serde_json::Map::new();
        let reference = collect(&rows, &format!("{name}/gibecca"), cfg.k_shared, "knn_error");
        for method in cca_methods(cfg) {
            let vals = collect(&rows, &format!("{name}/{method}"), cfg.k_shared, "knn_error");
            per.insert(method.to_string(), json!(median(&vals.values().copied().collect::<Vec<_>>())));
            if method != "gibecca" {
                let (a, b) = paired(&reference, &vals);
                tests.push(json!({
                    "family": name,
                    "method": method,
                    "p_value_vs_gibecca": p_value(&a, &b, cca_methods(cfg).len() - 1),
                }));
            }
        }
        medians.insert(name, Value::Object(per));
    }
    let summary = json!({
        "experiment": R.name(),
        "seed": ctx.seed,
        "median_knn_error": medians,
        "significance": tests,
        "failures": failures_json(&failures),
        "config": cfg,
    });
    Ok(ExperimentOutput { recipe: R, rows, summary, failures })
}

// ---------------------------------------------------------------- sampler-bench

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerBenchConfig {
    pub replicates: usize,
    pub family: ExpFamilyKind,
    pub n: usize,
    pub d: usize,
    pub k_shared: usize,
    pub k_specific: usize,
    pub beta: f64,
    pub a_hyper: ConjugateHyper,
    pub sigma2: f64,
    pub latent_scale: f64,
    pub loading_scale: f64,
    pub poisson_shift: f64,
    pub gibecca: GibeccaOptions,
    pub hmc: HmcOptions,
    /// Also time the Gaussian Gibbs sampler on the raw data.
    pub bcca: bool,
}

impl Default for SamplerBenchConfig {
    fn default() -> Self {
        Self {
            replicates: 1,
            family: ExpFamilyKind::Poisson,
            n: 50,
            d: 20,
            k_shared: 1,
            k_specific: 2,
            beta: 0.1,
            a_hyper: ConjugateHyper::default(),
            sigma2: 1.0,
            latent_scale: 1.0,
            loading_scale: 1.0,
            poisson_shift: 0.0,
            gibecca: GibeccaOptions::default(),
            hmc: HmcOptions { infer_hyper: true, ..HmcOptions::default() },
            bcca: true,
        }
    }
}

fn timing_rows(rep: usize, method: &str, k: usize, chain: &crate::chain::Chain) -> Result<Vec<MetricRow>> {
    const R: Recipe = Recipe::SamplerBench;
    let t = time_between_uncorrelated(chain)?;
    Ok(vec![
        row(R, rep, method, k, "seconds_between_uncorrelated", t.seconds),
        row(R, rep, method, k, "uncorrelated_lag", t.lag.map_or(f64::INFINITY, |l| l as f64)),
        row(R, rep, method, k, "flagged", if t.flagged { 1.0 } else { 0.0 }),
        row(R, rep, method, k, "seconds_per_sample", chain.mean_sample_seconds()),
        row(R, rep, method, k, "acceptance_rate", chain.stats.rate()),
    ])
}

fn sampler_bench_replicate(cfg: &SamplerBenchConfig, seed: u64, rep: usize) -> Result<Vec<MetricRow>> {
    let layout = ecca_layout(cfg.family, cfg.d, cfg.k_shared, cfg.k_specific)?;
    let generator = GeneratorSpec {
        latent_scale: cfg.latent_scale,
        loading_scale: cfg.loading_scale,
        poisson_shift: cfg.poisson_shift,
        ..GeneratorSpec::new(layout.spec(), cfg.n, 0, derive_seed(seed, rep as u64))
    };
    let data = generate_coupled(&generator)?;
    let run_seed = derive_seed(seed ^ 0xbe4c, rep as u64);
    let k = layout.k();
    let spec = PriorSpec::interpolating(cfg.beta, cfg.a_hyper, cfg.sigma2, cfg.sigma2, k);

    let mut rows = Vec::new();
    let chain = run_gibecca(&data.train, &layout, &spec, &GibeccaOptions { seed: run_seed, ..cfg.gibecca.clone() })?;
    rows.extend(timing_rows(rep, "gibecca", k, &chain)?);
    let chain = run_hmc_chain(&data.train, &layout, &spec, &HmcOptions { seed: run_seed, ..cfg.hmc.clone() })?;
    rows.extend(timing_rows(rep, "hmc", k, &chain)?);
    rows.push(row(Recipe::SamplerBench, rep, "hmc", k, "hyper_acceptance_rate", chain.stats.hyper_rate()));
    if cfg.bcca {
        let gauss = ecca_layout(ExpFamilyKind::Gaussian, cfg.d, cfg.k_shared, cfg.k_specific)?;
        let gspec = PriorSpec::interpolating(0.0, ConjugateHyper::default(), cfg.sigma2, cfg.sigma2, k);
        let chain = run_gaussian_bcca(data.train.x(), &gauss, &gspec, &GibeccaOptions { seed: run_seed, ..cfg.gibecca.clone() })?;
        rows.extend(timing_rows(rep, "bcca", k, &chain)?);
    }
    Ok(rows)
}

pub fn run_sampler_bench(cfg: &SamplerBenchConfig, ctx: &RunContext) -> Result<ExperimentOutput> {
    const R: Recipe = Recipe::SamplerBench;
    if cfg.replicates == 0 {
        return Err(Error::config("replicates", "needs at least one replicate"));
    }
    // Timings are only comparable when the samplers do not share cores.
    let results = par_indexed(cfg.replicates, 1, |rep| sampler_bench_replicate(cfg, ctx.seed, rep))?;
    let (rows, failures) = merge(R, results);
    let k = cfg.k_shared + 2 * cfg.k_specific;
    let mut per = serde_json::Map::new();
    let methods: &[&str] = if cfg.bcca { &["gibecca", "hmc", "bcca"] } else { &["gibecca", "hmc"] };
    for &m in methods {
        let secs: Vec<f64> = collect(&rows, m, k, "seconds_between_uncorrelated").into_values().collect();
        let lags: Vec<f64> = collect(&rows, m, k, "uncorrelated_lag").into_values().collect();
        per.insert(m.to_string(), json!({
            "mean_seconds_between_uncorrelated": mean(&secs),
            "mean_lag": mean(&lags),
        }));
    }
    let summary = json!({
        "experiment": R.name(),
        "seed": ctx.seed,
        "samplers": per,
        "failures": failures_json(&failures),
        "config": cfg,
    });
    Ok(ExperimentOutput { recipe: R, rows, summary, failures })
}

/// Runs `recipe` with its defaults overridden by the JSON object `overrides`.
pub fn run_recipe(recipe: Recipe, overrides: Option<&Value>, ctx: &RunContext) -> Result<ExperimentOutput> {
    fn parse<T: for<'de> Deserialize<'de> + Default>(v: Option<&Value>) -> Result<T> {
        match v {
            None => Ok(T::default()),
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::config("overrides", e.to_string())),
        }
    }
    match recipe {
        Recipe::EplsVsSepca => run_epls_vs_sepca(&parse(overrides)?, ctx),
        Recipe::BetaSweep => run_beta_sweep(&parse(overrides)?, ctx),
        Recipe::CcaKnn => run_cca_knn(&parse(overrides)?, ctx),
        Recipe::SamplerBench => run_sampler_bench(&parse(overrides)?, ctx),
    }
}

/// Layout of the coupled Poisson data used by the sampler comparison.
pub fn bench_layout(cfg: &SamplerBenchConfig) -> Result<LayoutSpec> {
    Ok(ecca_layout(cfg.family, cfg.d, cfg.k_shared, cfg.k_specific)?.spec())
}
