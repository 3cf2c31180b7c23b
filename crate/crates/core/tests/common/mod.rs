#![allow(dead_code)]

use chaindid::{PanelDataset, PanelParts};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, Debug)]
pub enum Observation {
    Balanced,
    /// Each unit is seen in exactly two consecutive periods.
    TwoConsecutive,
    /// Each unit is seen in a random subset of at least two periods.
    Scattered,
}

/// Units cycle through `cohorts` and then never-treated. Outcomes are a unit
/// level, a period shock, a cohort-specific effect path and noise.
pub fn random_panel(seed: u64, n: usize, periods: usize, cohorts: &[usize], obs: Observation, covariate: bool) -> PanelDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shocks: Vec<f64> = (0..periods).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut y = Vec::with_capacity(n);
    let mut cohort = Vec::with_capacity(n);
    let mut covariates = Vec::with_capacity(n);
    for i in 0..n {
        let g = cohorts.get(i % (cohorts.len() + 1)).copied();
        let x: f64 = StandardNormal.sample(&mut rng);
        let level = 2.0 * rng.random::<f64>() + 0.3 * x;
        let seen: Vec<bool> = match obs {
            Observation::Balanced => vec![true; periods],
            Observation::TwoConsecutive => {
                let s = rng.random_range(0..periods - 1);
                (0..periods).map(|t| t == s || t == s + 1).collect()
            }
            Observation::Scattered => loop {
                let v: Vec<bool> = (0..periods).map(|_| rng.random::<f64>() < 0.6).collect();
                if v.iter().filter(|b| **b).count() >= 2 {
                    break v;
                }
            },
        };
        let row = (0..periods)
            .map(|t| {
                let label = t + 1;
                let effect = match g {
                    Some(g) if label >= g => 1.0 + 0.2 * (label - g) as f64 + 0.1 * g as f64,
                    _ => 0.0,
                };
                let e: f64 = StandardNormal.sample(&mut rng);
                seen[t].then_some(level + shocks[t] + effect + 0.5 * e)
            })
            .collect();
        y.push(row);
        cohort.push(g);
        covariates.push(if covariate { vec![x] } else { vec![] });
    }
    PanelDataset::from_parts(PanelParts {
        units: (0..n).map(|i| format!("u{i}")).collect(),
        n_periods: periods,
        period_origin: 1,
        period_step: 1,
        y,
        cohort,
        covariate_names: if covariate { vec!["x1".into()] } else { vec![] },
        covariates,
        ..PanelParts::default()
    })
    .expect("valid panel")
}
