//! Two-step simulation design: a population with staggered treatment, then
//! rotating-pair sampling with an optional always-observed stratum.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::quantile_sorted;
use crate::panel::{PanelDataset, PanelParts};

/// How the dispersion parameters of the heterogeneity and error terms are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Dispersion {
    #[default]
    StdDev,
    Variance,
}

/// Distribution of the observed covariate. Both have mean 1 and sd 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CovariateDist {
    #[default]
    Normal,
    /// 0 or 2 with equal probability. Any sampling rule that depends on the
    /// covariate alone is then exactly logistic in it.
    Binary,
}

/// Sign convention of the sampling logit index `lambda0 + lambda1 * alpha * t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingSign {
    /// `P(S) = 1 / (1 + exp(-index))`.
    #[default]
    Logistic,
    /// `P(S) = 1 / (1 + exp(index))`.
    Reversed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    /// Number of post-treatment horizons; the panel has `t_effects + 2` periods.
    pub t_effects: usize,
    /// Rotating units drawn per consecutive pair (before stratification).
    pub n_per_period: usize,
    /// Population size, split evenly across the potential cohorts.
    pub population: usize,
    pub sigma_alpha: f64,
    pub sigma_eps: f64,
    pub dispersion: Dispersion,
    pub delta_mean: f64,
    pub delta_sd: f64,
    /// AR(1) coefficient of the idiosyncratic error.
    pub rho: f64,
    /// Level effect at event time `e` is `beta[e]`.
    pub beta: Vec<f64>,
    pub theta0: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub sampling_sign: SamplingSign,
    pub covariate: CovariateDist,
    /// Slope on the observed covariate in the sampling index.
    pub x_sampling_slope: f64,
    /// Effects scale with `1 + x_effect_slope * (X - 1)`.
    pub x_effect_slope: f64,
    /// Share of the sample drawn from the top of the heterogeneity
    /// distribution and observed in every period.
    pub always_observed_share: Option<f64>,
    /// Keep unsampled population units as covariate-only rows.
    pub include_unsampled: bool,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            t_effects: 6,
            n_per_period: 150,
            population: 4800,
            sigma_alpha: 2.0,
            sigma_eps: 0.5,
            dispersion: Dispersion::StdDev,
            delta_mean: 1.0,
            delta_sd: 1.0,
            rho: 0.0,
            beta: vec![1.75, 1.50, 1.25, 1.00, 0.75, 0.50],
            theta0: -1.0,
            theta1: 0.4,
            theta2: 0.0,
            lambda0: -1.0,
            lambda1: 0.0,
            sampling_sign: SamplingSign::Logistic,
            covariate: CovariateDist::Normal,
            x_sampling_slope: 0.0,
            x_effect_slope: 0.0,
            always_observed_share: None,
            include_unsampled: false,
        }
    }
}

impl DgpConfig {
    /// Designs 1 to 4: baseline, selection on heterogeneity, and two
    /// stratified variants with 10% and 40% always observed.
    pub fn preset(dgp: u8) -> Result<Self> {
        let base = DgpConfig::default();
        Ok(match dgp {
            1 => base,
            2 => DgpConfig { theta2: 0.2, lambda1: 0.2, ..base },
            3 => DgpConfig { theta2: 0.2, lambda1: 0.2, always_observed_share: Some(0.1), ..base },
            4 => DgpConfig { theta2: 0.2, lambda1: 0.2, always_observed_share: Some(0.4), ..base },
            _ => return Err(Error::Argument(format!("unknown design {dgp}; expected 1-4"))),
        })
    }

    pub fn n_periods(&self) -> usize {
        self.t_effects + 2
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Argument(format!("invalid simulation config: {m}")));
        if self.t_effects == 0 {
            return bad("t_effects must be positive");
        }
        if self.beta.len() != self.t_effects {
            return bad("beta needs one entry per horizon");
        }
        if !(self.sigma_alpha > 0.0 && self.sigma_eps > 0.0 && self.delta_sd > 0.0) {
            return bad("dispersions must be positive");
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1]");
        }
        if self.population < self.t_effects || self.n_per_period == 0 {
            return bad("population and per-period sample must be positive");
        }
        if let Some(s) = self.always_observed_share {
            if !(0.0 < s && s < 1.0) {
                return bad("always-observed share must lie in (0, 1)");
            }
        }
        Ok(())
    }

    fn sd(&self, v: f64) -> f64 {
        match self.dispersion {
            Dispersion::StdDev => v,
            Dispersion::Variance => v.sqrt(),
        }
    }

    /// Rotating draws per pair and the always-observed sample size.
    pub fn sample_sizes(&self) -> (usize, usize) {
        match self.always_observed_share {
            None => (self.n_per_period, 0),
            Some(s) => {
                let rot = (self.n_per_period as f64 * (1.0 - s)).round() as usize;
                let ao = (s / (1.0 - s) * rot as f64 * (self.n_periods() - 1) as f64).round() as usize;
                (rot, ao)
            }
        }
    }

    pub fn sampling_probability(&self, alpha: f64, x: f64, pair_start: usize) -> f64 {
        let index = self.lambda0 + self.lambda1 * alpha * pair_start as f64 + self.x_sampling_slope * x;
        match self.sampling_sign {
            SamplingSign::Logistic => 1.0 / (1.0 + (-index).exp()),
            SamplingSign::Reversed => 1.0 / (1.0 + index.exp()),
        }
    }
}

/// One simulated replication.
#[derive(Debug, Clone)]
pub struct SimOutput {
    /// The sampled panel; periods are labelled `0..t_effects + 1`.
    pub sample: PanelDataset,
    /// Every population unit observed in every period.
    pub population: PanelDataset,
    /// The always-observed units alone, when the design has them.
    pub balanced_stratum: Option<PanelDataset>,
    /// Population dynamic effect at each event time, weighting cohorts by
    /// their population size.
    pub truth: Vec<f64>,
}

struct Population {
    alpha: Vec<f64>,
    x: Vec<f64>,
    cohort: Vec<Option<usize>>,
    y: Vec<Vec<f64>>,
    effect: Vec<Vec<f64>>,
}

fn population<R: Rng>(cfg: &DgpConfig, rng: &mut R) -> Population {
    let big_n = cfg.population;
    let tp = cfg.n_periods();
    let n_cohorts = cfg.t_effects;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let alpha: Vec<f64> = (0..big_n).map(|_| 1.0 + cfg.sd(cfg.sigma_alpha) * std_normal.sample(rng)).collect();
    let x: Vec<f64> = (0..big_n)
        .map(|_| match cfg.covariate {
            CovariateDist::Normal => 1.0 + std_normal.sample(rng),
            CovariateDist::Binary => 2.0 * f64::from(u8::from(rng.random::<bool>())),
        })
        .collect();
    // potential cohort labels 2..=t_effects+1, equal population blocks
    let cohort: Vec<Option<usize>> = (0..big_n)
        .map(|i| {
            let label = 2 + (i * n_cohorts) / big_n;
            let index = cfg.theta0 + cfg.theta1 * x[i] + cfg.theta2 * alpha[i] * label as f64;
            let p = 1.0 / (1.0 + index.exp());
            (rng.random::<f64>() <= p).then_some(label)
        })
        .collect();
    let delta: Vec<f64> = (0..tp).map(|_| cfg.delta_mean + cfg.delta_sd * std_normal.sample(rng)).collect();
    let eps_sd = cfg.sd(cfg.sigma_eps);
    let mut y = Vec::with_capacity(big_n);
    let mut effect = Vec::with_capacity(big_n);
    for i in 0..big_n {
        let mut e_prev = 0.0;
        let mut yi = Vec::with_capacity(tp);
        let mut fi = Vec::with_capacity(tp);
        for (label, d) in delta.iter().enumerate() {
            let shock = eps_sd * std_normal.sample(rng);
            let eps = if label == 0 { shock } else { cfg.rho * e_prev + shock };
            e_prev = eps;
            let eff = match cohort[i] {
                Some(g) if label >= g => cfg.beta[label - g] * (1.0 + cfg.x_effect_slope * (x[i] - 1.0)),
                _ => 0.0,
            };
            yi.push(alpha[i] + d + eff + eps);
            fi.push(eff);
        }
        y.push(yi);
        effect.push(fi);
    }
    Population { alpha, x, cohort, y, effect }
}

fn truth(cfg: &DgpConfig, pop: &Population) -> Vec<f64> {
    let tp = cfg.n_periods();
    (0..cfg.t_effects)
        .map(|e| {
            let (mut num, mut den) = (0.0, 0.0);
            for (i, c) in pop.cohort.iter().enumerate() {
                if let Some(g) = *c {
                    if g + e < tp {
                        num += pop.effect[i][g + e];
                        den += 1.0;
                    }
                }
            }
            num / den
        })
        .collect()
}

fn build(cfg: &DgpConfig, pop: &Population, rows: &[(usize, Vec<bool>)]) -> Result<PanelDataset> {
    let tp = cfg.n_periods();
    PanelDataset::from_parts(PanelParts {
        units: rows.iter().map(|(i, _)| format!("u{i}")).collect(),
        n_periods: tp,
        period_origin: 0,
        period_step: 1,
        y: rows.iter().map(|(i, obs)| (0..tp).map(|t| obs[t].then(|| pop.y[*i][t])).collect()).collect(),
        // internal periods start at 1, so label g is index g + 1
        cohort: rows.iter().map(|(i, _)| pop.cohort[*i].map(|g| g + 1)).collect(),
        covariate_names: vec!["x1".into()],
        covariates: rows.iter().map(|(i, _)| vec![pop.x[*i]]).collect(),
        sampling_names: vec![],
        sampling: vec![],
    })
}

/// Draws a replication from `rng`.
pub fn simulate_with<R: Rng>(cfg: &DgpConfig, rng: &mut R) -> Result<SimOutput> {
    cfg.check()?;
    let tp = cfg.n_periods();
    let big_n = cfg.population;
    let pop = population(cfg, rng);
    let (n_rot, n_ao) = cfg.sample_sizes();
    let mut used = vec![false; big_n];
    let mut obs: Vec<Option<Vec<bool>>> = vec![None; big_n];
    let mut stratum = Vec::new();
    if let Some(share) = cfg.always_observed_share {
        let mut sorted = pop.alpha.clone();
        sorted.sort_by(f64::total_cmp);
        let threshold = quantile_sorted(&sorted, 1.0 - share);
        let top: Vec<usize> = (0..big_n).filter(|&i| pop.alpha[i] > threshold).collect();
        // units above the threshold never enter the rotating pairs
        top.iter().for_each(|&i| used[i] = true);
        if top.len() < n_ao {
            return Err(Error::Simulation(format!("only {} units above the threshold, need {n_ao}", top.len())));
        }
        let mut picked: Vec<usize> = index::sample(rng, top.len(), n_ao).into_iter().map(|j| top[j]).collect();
        picked.sort_unstable();
        for &i in &picked {
            obs[i] = Some(vec![true; tp]);
        }
        stratum = picked;
    }
    for start in 0..tp - 1 {
        let draws: Vec<f64> = (0..big_n).map(|_| rng.random::<f64>()).collect();
        let eligible: Vec<usize> = (0..big_n)
            .filter(|&i| !used[i] && draws[i] <= cfg.sampling_probability(pop.alpha[i], pop.x[i], start))
            .collect();
        if eligible.len() < n_rot {
            return Err(Error::Simulation(format!(
                "pair starting at {start}: {} eligible units for {n_rot} draws",
                eligible.len()
            )));
        }
        for j in index::sample(rng, eligible.len(), n_rot) {
            let i = eligible[j];
            used[i] = true;
            let mut o = vec![false; tp];
            o[start] = true;
            o[start + 1] = true;
            obs[i] = Some(o);
        }
    }
    let rows: Vec<(usize, Vec<bool>)> = (0..big_n)
        .filter_map(|i| match &obs[i] {
            Some(o) => Some((i, o.clone())),
            None => cfg.include_unsampled.then(|| (i, vec![false; tp])),
        })
        .collect();
    let sample = build(cfg, &pop, &rows)?;
    let all: Vec<(usize, Vec<bool>)> = (0..big_n).map(|i| (i, vec![true; tp])).collect();
    let population_panel = build(cfg, &pop, &all)?;
    let balanced_stratum = if stratum.is_empty() {
        None
    } else {
        let rows: Vec<(usize, Vec<bool>)> = stratum.iter().map(|&i| (i, vec![true; tp])).collect();
        Some(build(cfg, &pop, &rows)?)
    };
    Ok(SimOutput { sample, population: population_panel, balanced_stratum, truth: truth(cfg, &pop) })
}

/// Draws a replication from a fresh generator seeded with `seed`.
pub fn simulate_dgp(cfg: &DgpConfig, seed: u64) -> Result<SimOutput> {
    simulate_with(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}
