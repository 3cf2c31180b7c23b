//! Asymptotic variances of the chained, cross-section and long estimators in
//! the one-cohort design, and a simulator for that design.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{PanelDataset, PanelParts};

/// `n` times the asymptotic variance of each estimator of ATT(t).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticVariances {
    pub var_cd: f64,
    pub var_cs: f64,
    pub var_ld: f64,
}

/// Closed forms for the one-cohort design: treatment at period 2, each pair
/// sampled with probability `q`, a treated share `p` and AR(1) errors with
/// innovation variance `sigma_eta2` and first-period variance `sigma_eps1_2`.
pub fn analytic_variances(rho: f64, sigma_eta2: f64, sigma_alpha2: f64, sigma_eps1_2: f64, p: f64, q: f64, t: usize) -> AnalyticVariances {
    let scale = 1.0 / (q * p * (1.0 - p));
    let lag = (t - 1) as f64;
    let var_cd = 2.0 * lag * sigma_eta2 / (1.0 + rho) * scale;
    let var_cs = if rho >= 1.0 {
        scale * (1.5 * sigma_eps1_2 + sigma_alpha2 + lag * sigma_eta2)
    } else {
        scale * (sigma_alpha2 + 1.5 * sigma_eta2 / (1.0 - rho * rho))
    };
    let geometric: f64 = (0..t - 1).map(|k| rho.powi(2 * k as i32)).sum();
    let var_ld = scale * ((rho.powi(t as i32 - 1) - 1.0).powi(2) * sigma_eps1_2 + sigma_eta2 * geometric);
    AnalyticVariances { var_cd, var_cs, var_ld }
}

/// Cross-section variance derived directly for the same design: the mean at
/// `t` pools two pairs, the mean at period 1 only one, so the heterogeneity
/// and the level errors both enter with weight `1/(2q) + 1/q`.
pub fn cross_section_variance_direct(rho: f64, sigma_eta2: f64, sigma_alpha2: f64, sigma_eps1_2: f64, p: f64, q: f64, t: usize) -> f64 {
    let var_t = if rho >= 1.0 {
        sigma_eps1_2 + (t - 1) as f64 * sigma_eta2
    } else {
        // stationary marginal variance
        sigma_eta2 / (1.0 - rho * rho)
    };
    (0.5 * (sigma_alpha2 + var_t) + sigma_alpha2 + sigma_eps1_2) / (q * p * (1.0 - p))
}

/// One-cohort design on periods `1..=t+1` with the target period `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimpleDesign {
    pub n: usize,
    pub t: usize,
    pub p: f64,
    pub q: f64,
    pub rho: f64,
    pub sigma_eta2: f64,
    pub sigma_alpha2: f64,
    pub sigma_eps1_2: f64,
}

impl SimpleDesign {
    /// First-period error variance: stationary for `rho < 1`, one for the random walk.
    pub fn new(n: usize, t: usize, p: f64, q: f64, rho: f64, sigma_eta2: f64, sigma_alpha2: f64) -> Self {
        let sigma_eps1_2 = if rho < 1.0 { sigma_eta2 / (1.0 - rho * rho) } else { 1.0 };
        SimpleDesign { n, t, p, q, rho, sigma_eta2, sigma_alpha2, sigma_eps1_2 }
    }

    pub fn analytic(&self) -> AnalyticVariances {
        analytic_variances(self.rho, self.sigma_eta2, self.sigma_alpha2, self.sigma_eps1_2, self.p, self.q, self.t)
    }

    /// Rotating draw: each unit lands in pair `(s, s+1)`, `s = 1..=t`, with
    /// probability `q` each, or in none. With `balanced`, a unit is instead
    /// observed in every period with probability `q`.
    pub fn simulate<R: Rng>(&self, rng: &mut R, balanced: bool) -> Result<PanelDataset> {
        let periods = self.t + 1;
        if self.t < 2 || !(0.0 < self.p && self.p < 1.0) || self.q <= 0.0 || self.q * self.t as f64 > 1.0 {
            return Err(Error::Argument("simple design needs t >= 2, p in (0,1) and t*q <= 1".into()));
        }
        let mut y = Vec::with_capacity(self.n);
        let mut cohort = Vec::with_capacity(self.n);
        for _ in 0..self.n {
            let treated = rng.random::<f64>() < self.p;
            let z: f64 = StandardNormal.sample(rng);
            let alpha = self.sigma_alpha2.sqrt() * z;
            let z: f64 = StandardNormal.sample(rng);
            let mut eps = self.sigma_eps1_2.sqrt() * z;
            let mut path = vec![alpha + eps];
            for _ in 1..periods {
                let eta: f64 = StandardNormal.sample(rng);
                eps = self.rho * eps + self.sigma_eta2.sqrt() * eta;
                path.push(alpha + eps);
            }
            let u = rng.random::<f64>();
            let obs: Vec<bool> = if balanced {
                vec![u < self.q; periods]
            } else {
                let pair = (u / self.q) as usize;
                (1..=periods).map(|s| pair < self.t && (s == pair + 1 || s == pair + 2)).collect()
            };
            y.push(path.iter().zip(&obs).map(|(v, o)| o.then_some(*v)).collect());
            cohort.push(treated.then_some(2));
        }
        PanelDataset::from_parts(PanelParts {
            units: (0..self.n).map(|i| i.to_string()).collect(),
            n_periods: periods,
            period_origin: 1,
            period_step: 1,
            y,
            cohort,
            covariates: vec![vec![]; self.n],
            ..PanelParts::default()
        })
    }
}
