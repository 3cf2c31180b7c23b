//! Binary-response models for treatment propensities and sampling probabilities.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::blocks::ControlSpec;
use crate::error::{Error, Result};
use crate::panel::PanelDataset;

const GRAD_TOL: f64 = 1e-9;
const MAX_ITER: usize = 100;
const MAX_HALVINGS: usize = 30;
const SEPARATION_INDEX: f64 = 30.0;
const RIDGE_PER_UNIT: f64 = 1e-4;
const SATURATION: f64 = 1e-8;
/// Fitted treatment propensities are kept inside `[P_CLIP, 1 - P_CLIP]`.
pub const P_CLIP: f64 = 1e-6;
/// Floor for fitted sampling probabilities.
pub const Q_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    #[default]
    Logit,
    Probit,
}

impl Link {
    /// Probability and its derivative with respect to the index.
    pub fn eval(self, eta: f64) -> (f64, f64) {
        match self {
            Link::Logit => {
                let p = 1.0 / (1.0 + (-eta).exp());
                (p, p * (1.0 - p))
            }
            Link::Probit => {
                let z = std_normal();
                (z.cdf(eta), z.pdf(eta))
            }
        }
    }

    fn log_lik(self, eta: f64, y: bool) -> f64 {
        let s = if y { eta } else { -eta };
        match self {
            Link::Logit => {
                if s >= 0.0 {
                    -(-s).exp().ln_1p()
                } else {
                    s - s.exp().ln_1p()
                }
            }
            Link::Probit => std_normal().cdf(s).max(f64::MIN_POSITIVE).ln(),
        }
    }

    fn inverse(self, p: f64) -> f64 {
        match self {
            Link::Logit => (p / (1.0 - p)).ln(),
            Link::Probit => std_normal().inverse_cdf(p),
        }
    }
}

fn std_normal() -> Normal {
    Normal::standard()
}

/// Fitted binary-response model. Coefficients are intercept first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub link: Link,
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub ridge_used: bool,
}

impl LinkModel {
    pub fn index(&self, row: &[f64]) -> f64 {
        row.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum()
    }

    pub fn predict(&self, row: &[f64]) -> (f64, f64) {
        self.link.eval(self.index(row))
    }
}

struct NewtonOutcome {
    beta: DVector<f64>,
    converged: bool,
    iterations: usize,
    trouble: bool,
}

fn newton(x: &DMatrix<f64>, y: &[bool], rows: &[usize], link: Link, penalty: f64) -> NewtonOutcome {
    let d = x.ncols();
    let mut beta = DVector::<f64>::zeros(d);
    let objective = |b: &DVector<f64>| -> (f64, bool) {
        let mut ll = 0.0;
        let mut wild = false;
        for &i in rows {
            let eta = x.row(i).transpose().dot(b);
            wild |= eta.abs() > SEPARATION_INDEX;
            ll += link.log_lik(eta, y[i]);
        }
        let pen: f64 = b.iter().skip(1).map(|v| v * v).sum::<f64>() * penalty / 2.0;
        (ll - pen, wild)
    };
    let (mut ll, _) = objective(&beta);
    for iter in 0..MAX_ITER {
        let mut grad = DVector::<f64>::zeros(d);
        let mut info = DMatrix::<f64>::zeros(d, d);
        for &i in rows {
            let xi = x.row(i).transpose();
            let (p, dp) = link.eval(xi.dot(&beta));
            let v = (p * (1.0 - p)).max(f64::MIN_POSITIVE);
            let r = if y[i] { 1.0 - p } else { -p };
            grad.axpy(r * dp / v, &xi, 1.0);
            info.ger(dp * dp / v, &xi, &xi, 1.0);
        }
        for j in 1..d {
            grad[j] -= penalty * beta[j];
            info[(j, j)] += penalty;
        }
        if grad.amax() <= GRAD_TOL {
            // a flat likelihood at saturated probabilities is separation too
            let saturated = penalty == 0.0
                && rows.iter().any(|&i| {
                    let p = link.eval(x.row(i).transpose().dot(&beta)).0;
                    !(SATURATION..=1.0 - SATURATION).contains(&p)
                });
            return NewtonOutcome { beta, converged: true, iterations: iter, trouble: saturated };
        }
        let Some(chol) = info.clone().cholesky() else {
            return NewtonOutcome { beta, converged: false, iterations: iter, trouble: true };
        };
        let step = chol.solve(&grad);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let cand = &beta + &step * scale;
            let (cll, wild) = objective(&cand);
            if wild && penalty == 0.0 {
                return NewtonOutcome { beta: cand, converged: false, iterations: iter + 1, trouble: true };
            }
            if cll >= ll - 1e-12 * ll.abs().max(1.0) {
                beta = cand;
                ll = cll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            return NewtonOutcome { beta, converged: false, iterations: iter + 1, trouble: penalty == 0.0 };
        }
    }
    NewtonOutcome { beta, converged: false, iterations: MAX_ITER, trouble: penalty == 0.0 }
}

/// Maximum-likelihood binary regression on the rows selected by `subset`.
///
/// Falls back to an L2 penalty of `1e-4 * n_subset` on the slopes when the
/// information matrix is singular or the index diverges (separation).
pub fn fit_link(features: &DMatrix<f64>, labels: &[bool], subset: &[bool], link: Link) -> Result<LinkModel> {
    let n = features.nrows();
    if labels.len() != n || subset.len() != n {
        return Err(Error::Argument("feature, label and subset lengths differ".into()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("non-finite feature value".into()));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| subset[i]).collect();
    let d = features.ncols();
    if rows.len() < d + 1 {
        return Err(Error::Degenerate(format!("{} rows for {} coefficients", rows.len(), d)));
    }
    let ones = rows.iter().filter(|&&i| labels[i]).count();
    if ones == 0 || ones == rows.len() {
        return Err(Error::Degenerate("label is constant on the estimation subset".into()));
    }
    // intercept-only models have a closed form; this also makes the
    // no-covariate propensity exactly the sample proportion
    if d == 1 && rows.iter().all(|&i| features[(i, 0)] == 1.0) {
        let p = ones as f64 / rows.len() as f64;
        return Ok(LinkModel {
            link,
            coefficients: vec![link.inverse(p)],
            converged: true,
            iterations: 0,
            ridge_used: false,
        });
    }
    let out = newton(features, labels, &rows, link, 0.0);
    let (out, ridge_used) = if out.trouble || !out.converged {
        (newton(features, labels, &rows, link, RIDGE_PER_UNIT * rows.len() as f64), true)
    } else {
        (out, false)
    };
    Ok(LinkModel {
        link,
        coefficients: out.beta.iter().copied().collect(),
        converged: out.converged,
        iterations: out.iterations,
        ridge_used,
    })
}

/// Design matrix `[1, x_1 .. x_k]` over all units.
pub fn design_matrix(data: &PanelDataset) -> DMatrix<f64> {
    let k = data.n_covariates();
    DMatrix::from_fn(data.n(), k + 1, |i, j| if j == 0 { 1.0 } else { data.covariates(i)[j - 1] })
}

/// Generalized propensity score for cohort `g` against a control pool.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub model: LinkModel,
    pub g: usize,
    pub control: ControlSpec,
    /// Evaluation period for not-yet-treated pools.
    pub t: Option<usize>,
    pub fitted: Vec<f64>,
    pub derivative: Vec<f64>,
    pub subset: Vec<bool>,
    pub clip_events: usize,
    design: DMatrix<f64>,
}

impl PropensityFit {
    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn is_control(&self, data: &PanelDataset, i: usize) -> bool {
        self.control.in_pool(data, i, self.g, self.t)
    }
}

/// Fits `P(G_g = 1 | X, G_g + control = 1)`. The model is estimated on cohort
/// `g` plus the control pool and evaluated for every unit.
pub fn fit_group_propensity(
    data: &PanelDataset,
    g: usize,
    control: ControlSpec,
    t: Option<usize>,
    link: Link,
) -> Result<PropensityFit> {
    let t = match control {
        ControlSpec::NeverTreated => None,
        ControlSpec::NotYetTreated => {
            Some(t.ok_or_else(|| Error::Argument("not-yet-treated pool needs an evaluation period".into()))?)
        }
    };
    let n = data.n();
    let labels: Vec<bool> = (0..n).map(|i| data.cohort(i) == Some(g)).collect();
    let pool: Vec<bool> = (0..n).map(|i| control.in_pool(data, i, g, t)).collect();
    let cell = || match t {
        Some(t) => format!("({},{})", data.period_label(g), data.period_label(t)),
        None => format!("({})", data.period_label(g)),
    };
    if !labels.iter().any(|b| *b) {
        return Err(Error::ident("EMPTY_COHORT", format!("cohort {} has no units", cell())));
    }
    if !pool.iter().any(|b| *b) {
        return Err(Error::ident("EMPTY_CONTROL_POOL", format!("no control units for {}", cell())));
    }
    let subset: Vec<bool> = labels.iter().zip(&pool).map(|(a, b)| *a || *b).collect();
    let design = design_matrix(data);
    let model = fit_link(&design, &labels, &subset, link)?;
    let mut clip_events = 0;
    let (mut fitted, mut derivative) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (i, &used) in subset.iter().enumerate() {
        let (p, dp) = model.predict(design.row(i).transpose().as_slice());
        let pc = p.clamp(P_CLIP, 1.0 - P_CLIP);
        if pc != p && used {
            clip_events += 1;
        }
        fitted.push(pc);
        derivative.push(dp);
    }
    Ok(PropensityFit { model, g, control, t, fitted, derivative, subset, clip_events, design })
}

/// Per-unit influence of the propensity coefficients, `n x (k+1)`.
///
/// Row i is `I^{-1} x_i (G_i - p_i) p'_i / (p_i (1 - p_i))` on the estimation
/// subset and zero elsewhere, with `I` the mean Fisher information over all
/// units. The bool is true when `I` had to be pseudo-inverted.
pub fn propensity_influence(fit: &PropensityFit, data: &PanelDataset) -> (DMatrix<f64>, bool) {
    let n = data.n();
    let x = &fit.design;
    let d = x.ncols();
    let mut info = DMatrix::<f64>::zeros(d, d);
    let mut score = DMatrix::<f64>::zeros(n, d);
    for i in (0..n).filter(|&i| fit.subset[i]) {
        let (p, dp) = (fit.fitted[i], fit.derivative[i]);
        let v = p * (1.0 - p);
        let xi = x.row(i).transpose();
        info.ger(dp * dp / v / n as f64, &xi, &xi, 1.0);
        let label = if data.cohort(i) == Some(fit.g) { 1.0 } else { 0.0 };
        score.set_row(i, &(xi * ((label - p) * dp / v)).transpose());
    }
    let (inv, pseudo) = match info.clone().try_inverse() {
        Some(inv) if inv.iter().all(|v| v.is_finite()) => (inv, false),
        _ => (info.pseudo_inverse(1e-12).unwrap_or_else(|_| DMatrix::zeros(d, d)), true),
    };
    (score * inv.transpose(), pseudo)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttritionVariant {
    /// Sampling of the pair depends on covariates and group only.
    MarX,
    /// Sampling at the later period may also depend on the earlier outcome.
    Smar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    #[default]
    Identity,
    Log1p,
    /// Value at the first period of the pair (for outcomes, the lagged outcome).
    Lag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTerm {
    pub column: String,
    #[serde(default)]
    pub transform: Transform,
}

/// Declarative feature list for sampling models. Columns may name a
/// covariate, a sampling covariate, or `y` (only with `lag`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FeatureSpec {
    pub terms: Vec<FeatureTerm>,
}

impl FeatureSpec {
    /// Every time-invariant covariate, untransformed.
    pub fn covariates(data: &PanelDataset) -> Self {
        FeatureSpec {
            terms: data
                .covariate_names()
                .iter()
                .map(|c| FeatureTerm { column: c.clone(), transform: Transform::Identity })
                .collect(),
        }
    }

    fn check(&self, data: &PanelDataset) -> Result<()> {
        for term in &self.terms {
            let known = term.column == "y"
                || data.covariate_names().contains(&term.column)
                || data.sampling_names().contains(&term.column);
            if !known {
                return Err(Error::Argument(format!("unknown feature column '{}'", term.column)));
            }
            if term.column == "y" && term.transform != Transform::Lag {
                return Err(Error::Argument("outcome features must be lagged".into()));
            }
        }
        Ok(())
    }

    /// Feature row `[1, ...]` for unit `i` on the pair `(s, t)`. `None` when a
    /// value is unavailable.
    fn row(&self, data: &PanelDataset, i: usize, s: usize, t: usize) -> Option<Vec<f64>> {
        let mut row = Vec::with_capacity(self.terms.len() + 1);
        row.push(1.0);
        for term in &self.terms {
            let at = if term.transform == Transform::Lag { s } else { t };
            let raw = if term.column == "y" {
                data.y(i, at)?
            } else if let Some(j) = data.covariate_names().iter().position(|c| *c == term.column) {
                data.covariates(i)[j]
            } else {
                let j = data.sampling_names().iter().position(|c| *c == term.column)?;
                data.sampling(i, at)?[j]
            };
            let v = match term.transform {
                Transform::Log1p => raw.ln_1p(),
                _ => raw,
            };
            if !v.is_finite() {
                return None;
            }
            row.push(v);
        }
        Some(row)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum CellModel {
    Joint(LinkModel),
    Sequential { first: LinkModel, second: LinkModel },
    /// Degenerate cell; weights are left unadjusted.
    Unadjusted,
}

/// Sampling models keyed by (cohort or never-treated, s, t).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplingFit {
    pub variant: AttritionVariant,
    pub features: FeatureSpec,
    pub cells: BTreeMap<(Option<usize>, usize, usize), CellModel>,
    pub warnings: Vec<String>,
}

impl SamplingFit {
    /// Fitted probability that unit `i` is observed at both `s` and `t`,
    /// floored at [`Q_FLOOR`]. Returns `(q, clipped)`.
    pub fn q(&self, data: &PanelDataset, i: usize, s: usize, t: usize) -> Result<(f64, bool)> {
        let cell = self
            .cells
            .get(&(data.cohort(i), s, t))
            .ok_or_else(|| Error::Argument(format!("no sampling model for pair ({s},{t})")))?;
        let missing = || Error::Argument(format!("sampling features unavailable for unit {}", data.unit(i)));
        let q = match cell {
            CellModel::Unadjusted => return Ok((1.0, false)),
            CellModel::Joint(m) => m.predict(&self.features.row(data, i, s, t).ok_or_else(missing)?).0,
            CellModel::Sequential { first, second } => {
                let x1 = self.features.row(data, i, s, s).ok_or_else(missing)?;
                let mut x2 = self.features.row(data, i, s, t).ok_or_else(missing)?;
                x2.push(data.y(i, s).ok_or_else(missing)?);
                first.predict(&x1).0 * second.predict(&x2).0
            }
        };
        Ok(if q < Q_FLOOR { (Q_FLOOR, true) } else { (q, false) })
    }
}

/// Fits sampling models for every group role and every requested pair `(s, t)`.
pub fn fit_sampling_model(
    data: &PanelDataset,
    variant: AttritionVariant,
    features: &FeatureSpec,
    pairs: &[(usize, usize)],
) -> Result<SamplingFit> {
    features.check(data)?;
    let n = data.n();
    let mut roles: Vec<Option<usize>> = vec![None];
    roles.extend(data.cohorts().into_iter().map(Some));
    let mut cells = BTreeMap::new();
    let mut warnings = Vec::new();
    for &(s, t) in pairs {
        if s == 0 || s >= t || t > data.n_periods() {
            return Err(Error::Argument(format!("invalid pair ({s},{t})")));
        }
        for &role in &roles {
            let members: Vec<usize> = (0..n).filter(|&i| data.cohort(i) == role).collect();
            if members.is_empty() {
                continue;
            }
            let label = || {
                format!(
                    "group {} pair ({},{})",
                    role.map_or("never".to_string(), |g| data.period_label(g).to_string()),
                    data.period_label(s),
                    data.period_label(t)
                )
            };
            let fitted = match variant {
                AttritionVariant::MarX => {
                    let rows: Vec<(usize, Vec<f64>)> =
                        members.iter().filter_map(|&i| features.row(data, i, s, t).map(|r| (i, r))).collect();
                    fit_rows(&rows, |i| data.observed(i, s) && data.observed(i, t)).map(CellModel::Joint)
                }
                AttritionVariant::Smar => {
                    let first_rows: Vec<(usize, Vec<f64>)> =
                        members.iter().filter_map(|&i| features.row(data, i, s, s).map(|r| (i, r))).collect();
                    let second_rows: Vec<(usize, Vec<f64>)> = members
                        .iter()
                        .filter(|&&i| data.observed(i, s))
                        .filter_map(|&i| {
                            let mut r = features.row(data, i, s, t)?;
                            r.push(data.y(i, s)?);
                            Some((i, r))
                        })
                        .collect();
                    fit_rows(&first_rows, |i| data.observed(i, s)).and_then(|first| {
                        fit_rows(&second_rows, |i| data.observed(i, t))
                            .map(|second| CellModel::Sequential { first, second })
                    })
                }
            };
            let model = match fitted {
                Ok(m) => m,
                Err(Error::Degenerate(msg)) => {
                    warnings.push(format!("{}: {msg}; weights left unadjusted", label()));
                    CellModel::Unadjusted
                }
                Err(e) => return Err(e),
            };
            cells.insert((role, s, t), model);
        }
    }
    Ok(SamplingFit { variant, features: features.clone(), cells, warnings })
}

fn fit_rows(rows: &[(usize, Vec<f64>)], label: impl Fn(usize) -> bool) -> Result<LinkModel> {
    if rows.is_empty() {
        return Err(Error::Degenerate("no rows".into()));
    }
    let d = rows[0].1.len();
    let x = DMatrix::from_fn(rows.len(), d, |r, j| rows[r].1[j]);
    let y: Vec<bool> = rows.iter().map(|(i, _)| label(*i)).collect();
    fit_link(&x, &y, &vec![true; rows.len()], Link::Logit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::PanelParts;

    fn binary_design(counts: &[(f64, usize, usize)]) -> (DMatrix<f64>, Vec<bool>) {
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for &(x, ones, total) in counts {
            for r in 0..total {
                rows.push([1.0, x]);
                y.push(r < ones);
            }
        }
        (DMatrix::from_fn(rows.len(), 2, |i, j| rows[i][j]), y)
    }

    fn grid_max_loglik(x: &DMatrix<f64>, y: &[bool]) -> (f64, f64) {
        // coarse-to-fine grid search, independent of the Newton solver
        let ll = |a: f64, b: f64| -> f64 {
            (0..y.len())
                .map(|i| {
                    let eta = a + b * x[(i, 1)];
                    let p = 1.0 / (1.0 + (-eta).exp());
                    if y[i] {
                        p.ln()
                    } else {
                        (1.0 - p).ln()
                    }
                })
                .sum()
        };
        let (mut a, mut b, mut h) = (0.0, 0.0, 1.0);
        for _ in 0..40 {
            let mut best = (ll(a, b), a, b);
            for da in -10..=10 {
                for db in -10..=10 {
                    let (ca, cb) = (a + da as f64 * h / 10.0, b + db as f64 * h / 10.0);
                    let v = ll(ca, cb);
                    if v > best.0 {
                        best = (v, ca, cb);
                    }
                }
            }
            a = best.1;
            b = best.2;
            h *= 0.5;
        }
        (a, b)
    }

    #[test]
    fn binary_regressor_closed_form() {
        let (x, y) = binary_design(&[(1.0, 30, 60), (0.0, 15, 60)]);
        let m = fit_link(&x, &y, &vec![true; y.len()], Link::Logit).unwrap();
        assert!(m.converged && !m.ridge_used);
        assert!((m.coefficients[1] - 3f64.ln()).abs() < 1e-9);
        assert!((m.coefficients[0] + 3f64.ln()).abs() < 1e-9);
        let (ga, gb) = grid_max_loglik(&x, &y);
        assert!((ga - m.coefficients[0]).abs() < 1e-6 && (gb - m.coefficients[1]).abs() < 1e-6);
    }

    #[test]
    fn balanced_labels_give_zero_coefficients() {
        let (x, y) = binary_design(&[(1.0, 20, 40), (-1.0, 20, 40), (3.0, 5, 10)]);
        let m = fit_link(&x, &y, &vec![true; y.len()], Link::Logit).unwrap();
        assert!(m.coefficients.iter().all(|c| c.abs() < 1e-9));
    }

    #[test]
    fn separation_triggers_ridge() {
        let (x, y) = binary_design(&[(1.0, 20, 20), (0.0, 0, 20)]);
        for link in [Link::Logit, Link::Probit] {
            let m = fit_link(&x, &y, &vec![true; y.len()], link).unwrap();
            assert!(m.ridge_used);
            assert!(m.coefficients.iter().all(|c| c.is_finite()));
            for i in 0..y.len() {
                let p = m.predict(x.row(i).transpose().as_slice()).0;
                assert!(p > 0.0 && p < 1.0);
            }
        }
    }

    #[test]
    fn constant_labels_are_degenerate() {
        let (x, y) = binary_design(&[(1.0, 10, 10), (0.0, 10, 10)]);
        assert!(matches!(fit_link(&x, &y, &[true; 20], Link::Logit), Err(Error::Degenerate(_))));
        let mut bad = x.clone();
        bad[(0, 1)] = f64::NAN;
        assert!(matches!(fit_link(&bad, &y, &[true; 20], Link::Logit), Err(Error::Argument(_))));
    }

    #[test]
    fn probit_score_vanishes() {
        let (x, y) = binary_design(&[(1.0, 14, 40), (0.3, 22, 40), (-1.2, 30, 50)]);
        let m = fit_link(&x, &y, &vec![true; y.len()], Link::Probit).unwrap();
        assert!(m.converged && !m.ridge_used);
        let mut g = [0.0; 2];
        for i in 0..y.len() {
            let row = [1.0, x[(i, 1)]];
            let (p, dp) = m.predict(&row);
            let r = (if y[i] { 1.0 } else { 0.0 } - p) * dp / (p * (1.0 - p));
            g[0] += r;
            g[1] += r * row[1];
        }
        assert!(g.iter().all(|v| v.abs() < 1e-8), "{g:?}");
    }

    #[test]
    fn log_lik_is_stable() {
        for s in [-800.0, -40.0, -1.0, 0.0, 2.0, 50.0, 800.0] {
            let v = Link::Logit.log_lik(s, true);
            let expect = if s > 0.0 { -(-s).exp().ln_1p() } else { s - s.exp().ln_1p() };
            assert!((v - expect).abs() < 1e-12, "{s} {v} {expect}");
            assert!(Link::Logit.log_lik(s, false).is_finite());
        }
    }

    fn small_panel(covs: Vec<Vec<f64>>, cohorts: Vec<Option<usize>>) -> PanelDataset {
        let n = cohorts.len();
        PanelDataset::from_parts(PanelParts {
            units: (0..n).map(|i| format!("u{i}")).collect(),
            n_periods: 3,
            period_origin: 1,
            period_step: 1,
            y: vec![vec![Some(0.0); 3]; n],
            cohort: cohorts,
            covariate_names: (0..covs[0].len()).map(|j| format!("x{}", j + 1)).collect(),
            covariates: covs,
            sampling_names: vec![],
            sampling: vec![],
        })
        .unwrap()
    }

    #[test]
    fn no_covariates_give_sample_proportion() {
        let cohorts = vec![Some(2), Some(2), Some(2), None, None, Some(3), None, None, None, None, None];
        let d = small_panel(vec![vec![]; cohorts.len()], cohorts);
        let f = fit_group_propensity(&d, 2, ControlSpec::NeverTreated, None, Link::Logit).unwrap();
        for i in 0..d.n() {
            assert!((f.fitted[i] - 3.0 / 10.0).abs() < 1e-12);
        }
        assert!(!f.subset[5]);
        let (xi, _) = propensity_influence(&f, &d);
        assert_eq!(xi[(5, 0)], 0.0);
    }

    #[test]
    fn not_yet_treated_pool() {
        let cohorts = vec![Some(2), Some(3), Some(3), Some(2)];
        let d = small_panel(vec![vec![]; 4], cohorts);
        let f = fit_group_propensity(&d, 2, ControlSpec::NotYetTreated, Some(2), Link::Logit).unwrap();
        assert_eq!(f.subset, vec![true, true, true, true]);
        let e = fit_group_propensity(&d, 2, ControlSpec::NotYetTreated, Some(3), Link::Logit).unwrap_err();
        assert_eq!(e.code(), "EMPTY_CONTROL_POOL");
    }

    #[test]
    fn influence_columns_are_centered() {
        let n = 400;
        let mut covs = Vec::new();
        let mut cohorts = Vec::new();
        let mut state = 17u64;
        let mut unif = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..n {
            let x = unif() * 2.0 - 0.5;
            let p = 1.0 / (1.0 + (-(0.3 - 0.8 * x)).exp());
            covs.push(vec![x, unif()]);
            cohorts.push(if unif() < p { Some(2) } else { None });
        }
        let d = small_panel(covs, cohorts);
        for link in [Link::Logit, Link::Probit] {
            let f = fit_group_propensity(&d, 2, ControlSpec::NeverTreated, None, link).unwrap();
            let (xi, pseudo) = propensity_influence(&f, &d);
            assert!(!pseudo);
            for j in 0..3 {
                assert!(xi.column(j).sum().abs() / n as f64 <= 1e-6);
            }
        }
    }
}
