//! Two-way fixed-effects event-study regression, used only as a test oracle.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::panel::PanelDataset;

pub const MAX_UNITS: usize = 2000;

/// Coefficients on cohort-by-period dummies `1{G = g, t = tau}` for every
/// `tau != g - 1`, so the omitted period is the one before treatment. Unit
/// effects are swept out by demeaning within unit; period effects and the
/// dummies are solved from dense normal equations.
pub fn twfe_oracle(data: &PanelDataset) -> Result<BTreeMap<(usize, usize), f64>> {
    if data.n() > MAX_UNITS {
        return Err(Error::Argument(format!("regression oracle accepts at most {MAX_UNITS} units")));
    }
    if data.n_covariates() > 0 {
        return Err(Error::Argument("regression oracle takes no covariates".into()));
    }
    let tm = data.n_periods();
    let mut columns: Vec<(usize, usize)> = Vec::new();
    for g in data.cohorts() {
        columns.extend((1..=tm).filter(|&tau| tau != g - 1).map(|tau| (g, tau)));
    }
    // period effects for 2..=tm, then the event dummies
    let k = (tm - 1) + columns.len();
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xty = DVector::<f64>::zeros(k);
    let mut rows = 0usize;
    for i in 0..data.n() {
        let periods: Vec<usize> = (1..=tm).filter(|&t| data.observed(i, t)).collect();
        if periods.len() < 2 {
            continue;
        }
        let m = periods.len() as f64;
        let regressors = |t: usize| -> Vec<f64> {
            let mut r = vec![0.0; k];
            if t >= 2 {
                r[t - 2] = 1.0;
            }
            if let Some(g) = data.cohort(i) {
                if let Some(j) = columns.iter().position(|c| *c == (g, t)) {
                    r[tm - 1 + j] = 1.0;
                }
            }
            r
        };
        let raw: Vec<Vec<f64>> = periods.iter().map(|&t| regressors(t)).collect();
        let ys: Vec<f64> = periods.iter().map(|&t| data.y(i, t).unwrap_or(0.0)).collect();
        let xbar: Vec<f64> = (0..k).map(|c| raw.iter().map(|r| r[c]).sum::<f64>() / m).collect();
        let ybar = ys.iter().sum::<f64>() / m;
        for (r, yv) in raw.iter().zip(&ys) {
            let xd: Vec<f64> = r.iter().zip(&xbar).map(|(a, b)| a - b).collect();
            let yd = yv - ybar;
            for a in 0..k {
                if xd[a] == 0.0 {
                    continue;
                }
                xty[a] += xd[a] * yd;
                for b in 0..k {
                    xtx[(a, b)] += xd[a] * xd[b];
                }
            }
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(Error::Degenerate("no unit has two observations".into()));
    }
    let scale = xtx.diagonal().amax().max(1.0);
    let chol = nalgebra::Cholesky::new(xtx.clone()).ok_or_else(|| Error::Degenerate("collinear regression design".into()))?;
    let min_pivot = chol.l().diagonal().iter().fold(f64::INFINITY, |a, b| a.min(b * b));
    if min_pivot < 1e-10 * scale {
        return Err(Error::Degenerate("collinear regression design".into()));
    }
    let coef = chol.solve(&xty);
    Ok(columns.iter().enumerate().map(|(j, c)| (*c, coef[tm - 1 + j])).collect())
}
