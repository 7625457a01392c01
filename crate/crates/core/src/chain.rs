//! Posterior sample containers shared by the samplers.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::model::{FactorState, LayoutSpec};
use crate::prior::PriorSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct ChainSample {
    pub state: FactorState,
    /// Natural parameters of the sample. For HMC this is `UV`; for GiBECCA
    /// it is the refreshed `Θ`, which is not exactly low-rank.
    pub theta: DMatrix<f64>,
    /// Prior in effect at this sample, when hyperparameters are inferred.
    pub prior: Option<PriorSpec>,
    pub log_lik: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub proposals: u64,
    pub accepted: u64,
    /// Trajectories or moves abandoned because of a non-finite value.
    pub rejected_non_finite: u64,
    pub hyper_proposals: u64,
    pub hyper_accepted: u64,
    /// Hyperparameter moves rejected because the auxiliary chain looked
    /// unconverged.
    pub hyper_flagged: u64,
    pub final_step_size: Option<f64>,
}

impl AcceptanceStats {
    pub fn rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }

    pub fn hyper_rate(&self) -> f64 {
        if self.hyper_proposals == 0 {
            0.0
        } else {
            self.hyper_accepted as f64 / self.hyper_proposals as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub engine: String,
    pub seed: u64,
    pub layout: LayoutSpec,
    pub samples: Vec<ChainSample>,
    /// Seconds since the start of sampling at which each sample was stored.
    pub wall_clock: Vec<f64>,
    /// Post-burn-in statistics.
    pub stats: AcceptanceStats,
}

impl Chain {
    pub(crate) fn new(engine: &str, seed: u64, layout: LayoutSpec) -> Self {
        Self {
            engine: engine.to_string(),
            seed,
            layout,
            samples: Vec::new(),
            wall_clock: Vec::new(),
            stats: AcceptanceStats::default(),
        }
    }

    pub(crate) fn push(&mut self, sample: ChainSample, start: &Instant) {
        let mut t = start.elapsed().as_secs_f64();
        if let Some(&prev) = self.wall_clock.last() {
            if t <= prev {
                t = prev + 1e-9;
            }
        }
        self.wall_clock.push(t);
        self.samples.push(sample);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn log_lik_trace(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.log_lik).collect()
    }

    /// Mean seconds between consecutive stored samples.
    pub fn mean_sample_seconds(&self) -> f64 {
        match self.wall_clock.len() {
            0 => f64::NAN,
            n => self.wall_clock[n - 1] / n as f64,
        }
    }

    pub fn posterior_mean_theta(&self) -> Option<DMatrix<f64>> {
        mean_of(self.samples.iter().map(|s| &s.theta))
    }

    pub fn posterior_mean_u(&self) -> Option<DMatrix<f64>> {
        mean_of(self.samples.iter().map(|s| &s.state.u))
    }

    /// Posterior mean of `U V` (which differs from the mean of `Θ` for
    /// GiBECCA).
    pub fn posterior_mean_uv(&self) -> Option<DMatrix<f64>> {
        let prods: Vec<DMatrix<f64>> = self.samples.iter().map(|s| &s.state.u * &s.state.v).collect();
        mean_of(prods.iter())
    }
}

fn mean_of<'a>(mut it: impl Iterator<Item = &'a DMatrix<f64>>) -> Option<DMatrix<f64>> {
    let first = it.next()?.clone();
    let (sum, count) = it.fold((first, 1usize), |(acc, c), m| (acc + m, c + 1));
    Some(sum / count as f64)
}
