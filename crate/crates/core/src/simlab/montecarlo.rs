//! Replication runner: simulate, estimate, aggregate to dynamic effects and
//! summarize across replications.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dgp::{simulate_with, DgpConfig, SimOutput};
use crate::chain::{estimate_att, Attrition, EstimateOptions, LinkSet, Method, Weighting};
use crate::error::{Error, Result};
use crate::inference::substream;
use crate::panel::{fmt_f64, PanelDataset};
use crate::propensity::{AttritionVariant, FeatureSpec};
use crate::summaries::{theta_dynamic, CohortShares, DynamicStart, ShareBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum McEstimator {
    Chained,
    /// Chained with every observed difference, identity-weighted GMM.
    GmmIdentity,
    GmmOptimal,
    CrossSection,
    /// Long differences on the balanced data: the whole population for
    /// rotating designs, the always-observed stratum otherwise.
    Long,
    /// Chained with sampling weights on the observed covariates.
    ChainedMarX,
}

impl McEstimator {
    pub const ALL: [McEstimator; 6] = [
        McEstimator::Chained,
        McEstimator::GmmIdentity,
        McEstimator::GmmOptimal,
        McEstimator::CrossSection,
        McEstimator::Long,
        McEstimator::ChainedMarX,
    ];

    pub fn name(self) -> &'static str {
        match self {
            McEstimator::Chained => "chained",
            McEstimator::GmmIdentity => "chained-gmm-identity",
            McEstimator::GmmOptimal => "chained-gmm-optimal",
            McEstimator::CrossSection => "cross-section",
            McEstimator::Long => "long",
            McEstimator::ChainedMarX => "chained-mar-x",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        McEstimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown estimator '{s}'")))
    }

    fn options(self) -> EstimateOptions {
        let base = EstimateOptions { skip_placebos: true, ..EstimateOptions::default() };
        match self {
            McEstimator::Chained => base,
            McEstimator::GmmIdentity => {
                EstimateOptions { method: Method::ChainedGmm, weighting: Weighting::Identity, links: LinkSet::All, ..base }
            }
            McEstimator::GmmOptimal => {
                EstimateOptions { method: Method::ChainedGmm, weighting: Weighting::Optimal, links: LinkSet::All, ..base }
            }
            McEstimator::CrossSection => EstimateOptions { method: Method::CrossSection, ..base },
            McEstimator::Long => EstimateOptions { method: Method::Long, ..base },
            McEstimator::ChainedMarX => base,
        }
    }

    /// Dynamic effects at event times `0..horizons`; `NaN` where not identified.
    pub fn dynamic_effects(self, sim: &SimOutput, horizons: usize) -> Vec<f64> {
        let data: &PanelDataset = match self {
            McEstimator::Long => sim.balanced_stratum.as_ref().unwrap_or(&sim.population),
            _ => &sim.sample,
        };
        let mut opts = self.options();
        if self == McEstimator::ChainedMarX {
            opts.attrition = Some(Attrition { variant: AttritionVariant::MarX, features: FeatureSpec::covariates(data) });
        }
        let Ok(table) = estimate_att(data, &opts) else { return vec![f64::NAN; horizons] };
        let shares = CohortShares::estimate(data, ShareBasis::Panel);
        (0..horizons)
            .map(|e| theta_dynamic(&table, Some(e), &shares, DynamicStart::Zero).map_or(f64::NAN, |s| s.estimate))
            .collect()
    }
}

/// Per-replication draws: `values[r][j][e]` for estimator `j`, event time `e`.
#[derive(Debug, Clone)]
pub struct McDraws {
    pub estimators: Vec<McEstimator>,
    pub values: Vec<Vec<Vec<f64>>>,
    pub truth: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCell {
    pub estimator: McEstimator,
    pub event_time: usize,
    pub mean: f64,
    pub sd: f64,
    /// Replications where the cell was identified.
    pub count: usize,
}

impl McCell {
    /// Monte Carlo standard error of the mean.
    pub fn mc_se(&self) -> f64 {
        self.sd / (self.count as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub config: DgpConfig,
    pub reps: usize,
    pub seed: u64,
    pub estimators: Vec<McEstimator>,
    pub truth: Vec<f64>,
    pub cells: Vec<McCell>,
    pub fingerprint: String,
}

impl McReport {
    pub fn cell(&self, estimator: McEstimator, event_time: usize) -> Option<&McCell> {
        self.cells.iter().find(|c| c.estimator == estimator && c.event_time == event_time)
    }

    /// One row per event time; mean, sd and identified count per estimator.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("event_time,truth");
        for e in &self.estimators {
            let _ = write!(out, ",{0}_mean,{0}_sd,{0}_n", e.name());
        }
        out.push('\n');
        for (h, truth) in self.truth.iter().enumerate() {
            let _ = write!(out, "{h},{}", fmt_f64(*truth));
            for e in &self.estimators {
                let c = self.cell(*e, h).expect("every estimator has every horizon");
                let _ = write!(out, ",{},{},{}", fmt_f64(c.mean), fmt_f64(c.sd), c.count);
            }
            out.push('\n');
        }
        out
    }
}

pub fn fingerprint(config: &DgpConfig, reps: usize, seed: u64, estimators: &[McEstimator]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    h.update(reps.to_le_bytes());
    h.update(seed.to_le_bytes());
    for e in estimators {
        h.update(e.name().as_bytes());
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Runs every replication; replication `r` draws from substream `(seed, r)`.
pub fn monte_carlo_draws(config: &DgpConfig, reps: usize, estimators: &[McEstimator], seed: u64) -> Result<McDraws> {
    if reps < 2 {
        return Err(Error::Argument("a Monte Carlo study needs at least 2 replications".into()));
    }
    config.check()?;
    let horizons = config.t_effects;
    let per_rep: Vec<(Vec<Vec<f64>>, Vec<f64>)> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let sim = simulate_with(config, &mut substream(seed, r as u64))?;
            let vals = estimators.iter().map(|e| e.dynamic_effects(&sim, horizons)).collect();
            Ok((vals, sim.truth))
        })
        .collect::<Result<_>>()?;
    let (values, truth) = per_rep.into_iter().unzip();
    Ok(McDraws { estimators: estimators.to_vec(), values, truth })
}

/// Mean and standard deviation over identified replications of each cell.
pub fn summarize(config: &DgpConfig, seed: u64, draws: &McDraws) -> McReport {
    let reps = draws.values.len();
    let horizons = config.t_effects;
    let mut cells = Vec::new();
    for (j, est) in draws.estimators.iter().enumerate() {
        for e in 0..horizons {
            let xs: Vec<f64> = draws.values.iter().map(|v| v[j][e]).filter(|x| x.is_finite()).collect();
            let count = xs.len();
            let mean = if count > 0 { xs.iter().sum::<f64>() / count as f64 } else { f64::NAN };
            let sd = if count > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
            } else {
                f64::NAN
            };
            cells.push(McCell { estimator: *est, event_time: e, mean, sd, count });
        }
    }
    let truth = (0..horizons).map(|e| draws.truth.iter().map(|t| t[e]).sum::<f64>() / reps as f64).collect();
    McReport {
        config: config.clone(),
        reps,
        seed,
        estimators: draws.estimators.clone(),
        truth,
        cells,
        fingerprint: fingerprint(config, reps, seed, &draws.estimators),
    }
}

pub fn monte_carlo(config: &DgpConfig, reps: usize, estimators: &[McEstimator], seed: u64) -> Result<McReport> {
    let draws = monte_carlo_draws(config, reps, estimators, seed)?;
    Ok(summarize(config, seed, &draws))
}
