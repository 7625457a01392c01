//! Configuration and the three commands behind `expfam-proj`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use expfam_core::evaluation::{heldout_loglik, heldout_loglik_chain};
use expfam_core::experiments::{run_recipe, ExperimentOutput, Recipe, RunContext};
use expfam_core::gibecca::{run_gibecca, GibeccaOptions};
use expfam_core::hmc_infer::{run_hmc_chain, HmcOptions};
use expfam_core::io::{
    load_csv_data, save_chain, save_model, write_json, write_metrics_csv, write_trace_csv,
    DataDescriptor,
};
use expfam_core::map_infer::{fit_map, MapOptions};
use expfam_core::spect::{load_spect, make_holdout, synthetic_spect};
use expfam_core::{
    assemble_theta, BlockLayout, Chain, ConjugateHyper, Error, LayoutSpec, ObservationSet,
    PriorSpec, Result,
};

/// Exit status for a failed command: 3 for numerical failures, 2 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numeric() { 3 } else { 2 }
}

fn config_err(path: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    Csv(DataDescriptor),
    /// The SPECT features; without a path the `--spect` flag is used, and
    /// without either the synthetic stand-in.
    Spect {
        #[serde(default)]
        path: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub beta: f64,
    /// Defaults to `1 - beta`.
    pub gamma: Option<f64>,
    pub a_hyper: ConjugateHyper,
    pub sigma2_u: f64,
    pub sigma2_v: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            beta: 0.0,
            gamma: None,
            a_hyper: ConjugateHyper::default(),
            sigma2_u: 1.0,
            sigma2_v: 1.0,
        }
    }
}

impl PriorConfig {
    pub fn to_spec(&self, k: usize) -> PriorSpec {
        let spec = PriorSpec::interpolating(self.beta, self.a_hyper, self.sigma2_u, self.sigma2_v, k);
        match self.gamma {
            Some(g) => spec.with_gamma(g),
            None => spec,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EngineConfig {
    Map(MapOptions),
    Hmc(HmcOptions),
    Gibecca(GibeccaOptions),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub data: DataSource,
    pub layout: LayoutSpec,
    #[serde(default)]
    pub prior: PriorConfig,
    pub engine: EngineConfig,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HoldoutConfig {
    /// Hold out this fraction of the observed entries at random.
    pub fraction: Option<f64>,
    /// Hold out exactly these `(row, col)` entries.
    pub entries: Option<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImputeConfig {
    pub data: DataSource,
    pub layout: LayoutSpec,
    #[serde(default)]
    pub prior: PriorConfig,
    pub engine: EngineConfig,
    #[serde(default)]
    pub holdout: HoldoutConfig,
    /// Write a prediction for every entry, not only the held-out ones.
    #[serde(default)]
    pub predict_all: bool,
    #[serde(default)]
    pub seed: u64,
}

/// An experiment file: the recipe name and overrides of its defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub recipe: Option<String>,
    #[serde(default)]
    pub overrides: Option<Value>,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Reads a JSON config; errors carry the file name and the failing field.
pub fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_err("config", format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        config_err(
            "config",
            format!("{}:{}:{}: {e}", path.display(), e.line(), e.column()),
        )
    })
}

fn load_data(source: &DataSource, base: &Path, spect: Option<&Path>) -> Result<ObservationSet> {
    match source {
        DataSource::Csv(desc) => load_csv_data(desc, base),
        DataSource::Spect { path } => match path.as_deref().map(|p| base.join(p)).as_deref().or(spect) {
            Some(p) => load_spect(p),
            None => {
                log::info!("no SPECT path given; using the synthetic binary stand-in");
                Ok(synthetic_spect(0))
            }
        },
    }
}

fn build(layout: &LayoutSpec, prior: &PriorConfig) -> Result<(BlockLayout, PriorSpec)> {
    let layout = layout.build()?;
    let spec = prior.to_spec(layout.k());
    spec.validate(&layout)?;
    Ok((layout, spec))
}

enum Fitted {
    Map {
        theta: DMatrix<f64>,
        summary: Value,
    },
    Chain(Chain),
}

fn run_engine(
    obs: &ObservationSet,
    layout: &BlockLayout,
    spec: &PriorSpec,
    engine: &EngineConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<Fitted> {
    match engine {
        EngineConfig::Map(opts) => {
            let fit = fit_map(obs, layout, spec, &MapOptions { seed, ..*opts })?;
            if let Some(out) = out {
                save_model(
                    &out.join("model"),
                    &fit.state,
                    &layout.spec(),
                    spec,
                    (fit.objective, fit.converged, fit.iterations),
                    seed,
                )?;
                write_trace_csv(&out.join("trace.csv"), &fit.trace)?;
            }
            let summary = json!({
                "engine": "map",
                "objective": fit.objective,
                "converged": fit.converged,
                "iterations": fit.iterations,
                "restart_objectives": fit.restart_objectives,
            });
            let theta = assemble_theta(&fit.state, layout)?;
            Ok(Fitted::Map { theta, summary })
        }
        EngineConfig::Hmc(opts) => {
            let chain = run_hmc_chain(obs, layout, spec, &HmcOptions { seed, ..opts.clone() })?;
            Ok(Fitted::Chain(chain))
        }
        EngineConfig::Gibecca(opts) => {
            let chain = run_gibecca(obs, layout, spec, &GibeccaOptions { seed, ..opts.clone() })?;
            Ok(Fitted::Chain(chain))
        }
    }
}

fn chain_summary(chain: &Chain) -> Value {
    json!({
        "engine": chain.engine,
        "samples": chain.len(),
        "acceptance_rate": chain.stats.rate(),
        "hyper_acceptance_rate": chain.stats.hyper_rate(),
        "stats": chain.stats,
        "mean_sample_seconds": chain.mean_sample_seconds(),
    })
}

/// Fits a model and writes `model/` (MAP) or `chain/` (samplers) plus
/// `summary.json` under `out`.
pub fn cmd_fit(cfg: &FitConfig, base: &Path, spect: Option<&Path>, out: &Path) -> Result<Value> {
    let obs = load_data(&cfg.data, base, spect)?;
    let (layout, spec) = build(&cfg.layout, &cfg.prior)?;
    fs::create_dir_all(out)?;
    let summary = match run_engine(&obs, &layout, &spec, &cfg.engine, cfg.seed, Some(out))? {
        Fitted::Map { summary, .. } => summary,
        Fitted::Chain(chain) => {
            save_chain(&out.join("chain"), &chain)?;
            chain_summary(&chain)
        }
    };
    let summary = json!({ "command": "fit", "seed": cfg.seed, "result": summary });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub row: usize,
    pub col: usize,
    pub heldout: bool,
    #[serde(rename = "true")]
    pub actual: f64,
    pub predicted: f64,
    /// `Θ` at the fit (MAP) or its posterior mean (samplers).
    pub theta: f64,
    /// `log p(x | Θ)` (MAP) or the log of its posterior mean (samplers).
    pub loglik: f64,
}

fn holdout_masks(obs: &ObservationSet, cfg: &HoldoutConfig, seed: u64) -> Result<(DMatrix<bool>, DMatrix<bool>)> {
    match (&cfg.entries, cfg.fraction) {
        (Some(_), Some(_)) => Err(config_err("holdout", "give either `fraction` or `entries`, not both")),
        (Some(entries), None) => {
            let mut hold = DMatrix::from_element(obs.n(), obs.d(), false);
            for &(r, c) in entries {
                if r >= obs.n() || c >= obs.d() {
                    return Err(config_err("holdout.entries", format!("({r}, {c}) is outside the data")));
                }
                if !obs.is_observed(r, c) {
                    return Err(config_err("holdout.entries", format!("({r}, {c}) is not observed")));
                }
                hold[(r, c)] = true;
            }
            let train = obs.observed().zip_map(&hold, |o, h| o && !h);
            Ok((train, hold))
        }
        (None, Some(f)) => make_holdout(obs, f, seed),
        (None, None) => Ok((obs.observed().clone(), DMatrix::from_element(obs.n(), obs.d(), false))),
    }
}

fn log_mean_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (terms.iter().map(|t| (t - m).exp()).sum::<f64>() / terms.len() as f64).ln()
}

/// Fits on the training entries and predicts the held-out ones. Writes
/// `predictions.csv` and `summary.json` under `out`.
pub fn cmd_impute(cfg: &ImputeConfig, base: &Path, spect: Option<&Path>, out: &Path) -> Result<Value> {
    let obs = load_data(&cfg.data, base, spect)?;
    let (layout, spec) = build(&cfg.layout, &cfg.prior)?;
    let (train_mask, hold) = holdout_masks(&obs, &cfg.holdout, cfg.seed)?;
    let train = obs.with_mask(train_mask.clone())?;
    fs::create_dir_all(out)?;

    let fitted = run_engine(&train, &layout, &spec, &cfg.engine, cfg.seed, None)?;
    let (theta, samples, fit_summary, total) = match &fitted {
        Fitted::Map { theta, summary } => {
            let ll = heldout_loglik(&obs, &train_mask, &hold, theta, &layout)?;
            (theta.clone(), None, summary.clone(), ll)
        }
        Fitted::Chain(chain) => {
            let ll = heldout_loglik_chain(&obs, &train_mask, &hold, chain, &layout)?;
            let theta = chain
                .posterior_mean_theta()
                .ok_or_else(|| Error::Chain("chain has no samples".into()))?;
            (theta, Some(chain), chain_summary(chain), ll)
        }
    };

    let mut predictions = Vec::new();
    for row in 0..obs.n() {
        for col in 0..obs.d() {
            let held = hold[(row, col)];
            if !(held || cfg.predict_all && obs.is_observed(row, col)) {
                continue;
            }
            let family = layout.family_of_col(col);
            let x = obs.x()[(row, col)];
            let (predicted, loglik) = match samples {
                None => (family.mean_param(theta[(row, col)])?, family.log_pdf(x, theta[(row, col)])?),
                Some(chain) => {
                    let mut means = 0.0;
                    let mut terms = Vec::with_capacity(chain.len());
                    for s in &chain.samples {
                        means += family.mean_param(s.theta[(row, col)])?;
                        terms.push(family.log_pdf(x, s.theta[(row, col)])?);
                    }
                    (means / chain.len() as f64, log_mean_exp(&terms))
                }
            };
            predictions.push(Prediction {
                row,
                col,
                heldout: held,
                actual: x,
                predicted,
                theta: theta[(row, col)],
                loglik,
            });
        }
    }
    let mut w = csv::Writer::from_path(out.join("predictions.csv"))?;
    for p in &predictions {
        w.serialize(p)?;
    }
    w.flush()?;

    let summary = json!({
        "command": "impute",
        "seed": cfg.seed,
        "heldout_entries": hold.iter().filter(|&&h| h).count(),
        "heldout_loglik": total,
        "result": fit_summary,
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|p| p.map_err(Error::from)).collect()
}

/// Runs a recipe and writes `<name>.csv` and `<name>_summary.json` under
/// `out`. The files are written even when some replicates failed.
pub fn cmd_experiment(recipe: Recipe, overrides: Option<&Value>, ctx: &RunContext, out: &Path) -> Result<ExperimentOutput> {
    let output = run_recipe(recipe, overrides, ctx)?;
    fs::create_dir_all(out)?;
    write_metrics_csv(&out.join(format!("{}.csv", recipe.name())), &output.rows)?;
    write_json(&out.join(format!("{}_summary.json", recipe.name())), &output.summary)?;
    Ok(output)
}

/// Resolves the recipe from the command line or the config file.
pub fn resolve_recipe(arg: Option<&str>, cfg: &ExperimentConfig) -> Result<Recipe> {
    match (arg, cfg.recipe.as_deref()) {
        (Some(a), Some(c)) if a != c => Err(config_err(
            "recipe",
            format!("command line names `{a}` but the config names `{c}`"),
        )),
        (Some(name), _) | (None, Some(name)) => name.parse(),
        (None, None) => Err(config_err("recipe", "no recipe named on the command line or in the config")),
    }
}
