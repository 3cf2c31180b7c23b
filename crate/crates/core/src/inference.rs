//! Multiplier bootstrap over influence functions and the pre-trend test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::blocks::DeltaAtt;
use crate::error::{Error, Result};

pub const MIN_DRAWS: usize = 200;

/// Generator for draw `b` of a run seeded with `seed`: one ChaCha stream per
/// draw, so results do not depend on scheduling.
pub fn substream(seed: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b);
    rng
}

/// Two-point multiplier with mean zero and unit variance.
pub fn mammen<R: Rng>(rng: &mut R) -> f64 {
    let kappa = (5f64.sqrt() + 1.0) / 2.0;
    if rng.random::<f64>() < kappa / 5f64.sqrt() {
        1.0 - kappa
    } else {
        kappa
    }
}

/// Linear-interpolation sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapBands {
    pub cells: Vec<String>,
    pub estimates: Vec<f64>,
    pub sigma_hat: Vec<f64>,
    pub c_crit: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub draws: usize,
    pub alpha: f64,
    pub seed: u64,
    pub n: usize,
    pub warnings: Vec<String>,
}

impl BootstrapBands {
    pub fn with_labels(mut self, labels: Vec<String>) -> Self {
        self.cells = labels;
        self
    }

    /// Standard error scale `sigma_hat / sqrt(n)` of cell `k`.
    pub fn std_error(&self, k: usize) -> f64 {
        self.sigma_hat[k] / (self.n as f64).sqrt()
    }
}

/// Draws `R*_b = n^{-1/2} sum_i V_i Phi(., i)` for `b = 0..draws`, row-major by draw.
pub fn bootstrap_draws(phi: &[Vec<f64>], draws: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = phi.first().map_or(0, Vec::len);
    let scale = 1.0 / (n.max(1) as f64).sqrt();
    (0..draws)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, b as u64);
            let v: Vec<f64> = (0..n).map(|_| mammen(&mut rng)).collect();
            phi.iter().map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() * scale).collect()
        })
        .collect()
}

/// Simultaneous bands from the sup-t statistic over cells with positive dispersion.
pub fn multiplier_bootstrap(phi: &[Vec<f64>], estimates: &[f64], draws: usize, alpha: f64, seed: u64) -> Result<BootstrapBands> {
    if draws < MIN_DRAWS {
        return Err(Error::Argument(format!("bootstrap needs at least {MIN_DRAWS} draws, got {draws}")));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::Argument(format!("alpha must lie in (0,1), got {alpha}")));
    }
    if phi.len() != estimates.len() {
        return Err(Error::Argument("one influence row per estimate is required".into()));
    }
    let k = phi.len();
    let n = phi.first().map_or(0, Vec::len);
    if phi.iter().any(|r| r.len() != n) {
        return Err(Error::Argument("influence rows differ in length".into()));
    }
    let r = bootstrap_draws(phi, draws, seed);
    let z = Normal::standard();
    let iqr_norm = z.inverse_cdf(0.75) - z.inverse_cdf(0.25);
    let sigma_hat: Vec<f64> = (0..k)
        .map(|c| {
            let mut col: Vec<f64> = r.iter().map(|d| d[c]).collect();
            col.sort_by(f64::total_cmp);
            (quantile_sorted(&col, 0.75) - quantile_sorted(&col, 0.25)) / iqr_norm
        })
        .collect();
    let mut sup: Vec<f64> = r
        .iter()
        .map(|d| {
            (0..k).filter(|&c| sigma_hat[c] > 0.0).map(|c| d[c].abs() / sigma_hat[c]).fold(0.0, f64::max)
        })
        .collect();
    sup.sort_by(f64::total_cmp);
    let mut warnings = Vec::new();
    let c_crit = if sigma_hat.iter().any(|s| *s > 0.0) {
        quantile_sorted(&sup, 1.0 - alpha)
    } else {
        warnings.push("DEGENERATE_INFLUENCE: every cell has zero bootstrap dispersion; bands collapse to the estimates".into());
        0.0
    };
    let root_n = (n.max(1) as f64).sqrt();
    let half: Vec<f64> = sigma_hat.iter().map(|s| c_crit * s / root_n).collect();
    Ok(BootstrapBands {
        cells: (0..k).map(|c| c.to_string()).collect(),
        estimates: estimates.to_vec(),
        lower: estimates.iter().zip(&half).map(|(e, h)| e - h).collect(),
        upper: estimates.iter().zip(&half).map(|(e, h)| e + h).collect(),
        sigma_hat,
        c_crit,
        draws,
        alpha,
        seed,
        n,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrendTest {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub reject: bool,
    pub placebos: usize,
}

/// Tests the average of the one-period placebos against zero.
pub fn pretrend_test(placebos: &[DeltaAtt], draws: usize, alpha: f64, seed: u64) -> Result<PretrendTest> {
    if placebos.is_empty() {
        return Err(Error::Argument("pre-trend test needs at least one placebo".into()));
    }
    let m = placebos.len() as f64;
    let n = placebos[0].influence.len();
    let estimate = placebos.iter().map(|p| p.estimate).sum::<f64>() / m;
    let mut infl = vec![0.0; n];
    for p in placebos {
        infl.iter_mut().zip(&p.influence).for_each(|(a, b)| *a += b / m);
    }
    let bands = multiplier_bootstrap(&[infl], &[estimate], draws, alpha, seed)?;
    let (lower, upper) = (bands.lower[0], bands.upper[0]);
    Ok(PretrendTest { estimate, lower, upper, reject: !(lower <= 0.0 && 0.0 <= upper), placebos: placebos.len() })
}
