//! Group-time difference-in-differences building blocks.
//!
//! Every estimate is a difference of Hajek-normalized weighted means, so each
//! one comes with a per-unit influence vector whose mean is zero.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::PanelDataset;
use crate::propensity::{propensity_influence, PropensityFit, SamplingFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ControlSpec {
    #[default]
    NeverTreated,
    /// Units untreated at the evaluation period, excluding the cohort itself.
    NotYetTreated,
}

impl ControlSpec {
    /// Whether unit `i` belongs to the comparison pool for cohort `g` at period `t`.
    pub fn in_pool(self, data: &PanelDataset, i: usize, g: usize, t: Option<usize>) -> bool {
        match (self, data.cohort(i)) {
            (_, None) => true,
            (ControlSpec::NeverTreated, Some(_)) => false,
            (ControlSpec::NotYetTreated, Some(c)) => c != g && t.is_some_and(|t| c > t),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ControlSpec::NeverTreated => "never",
            ControlSpec::NotYetTreated => "notyet",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttMethod {
    Chained,
    Long,
    CrossSection,
    Gmm,
}

/// `Delta_k ATT(g, t)`: change of the group-time effect between `t - k` and `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaAtt {
    pub g: usize,
    pub t: usize,
    pub k: usize,
    pub estimate: f64,
    pub influence: Vec<f64>,
    pub n_treated_pair: usize,
    pub n_control_pair: usize,
    pub fingerprint: String,
    /// Units whose sampling probability hit the floor.
    pub sampling_clips: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttEstimate {
    pub g: usize,
    pub t: usize,
    pub estimate: f64,
    pub influence: Vec<f64>,
    pub method: AttMethod,
}

/// Normalized treated and control weights for one block; both average to one
/// over all units.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub treated: Vec<f64>,
    pub control: Vec<f64>,
    pub n_treated: usize,
    pub n_control: usize,
    /// Units whose sampling probability hit the floor.
    pub q_clips: usize,
}

fn check_fit(data: &PanelDataset, g: usize, t: usize, control: ControlSpec, pfit: &PropensityFit) -> Result<()> {
    if pfit.g != g || pfit.control != control {
        return Err(Error::Argument(format!("propensity fit is for another cohort or control pool than g={g}")));
    }
    if control == ControlSpec::NotYetTreated && pfit.t != Some(t) {
        return Err(Error::Argument(format!(
            "not-yet-treated blocks at period {} need a propensity fit for that period",
            data.period_label(t)
        )));
    }
    Ok(())
}

/// Unnormalized treated and control numerators on a given observation mask.
struct Numerators {
    treated: Vec<f64>,
    control: Vec<f64>,
    /// `c_i S_i f_i`, the control numerator without the odds factor.
    control_base: Vec<f64>,
    n_treated: usize,
    n_control: usize,
    q_clips: usize,
}

fn numerators(
    data: &PanelDataset,
    g: usize,
    t: usize,
    control: ControlSpec,
    pfit: &PropensityFit,
    mask: &[bool],
    sampling: Option<(&SamplingFit, usize)>,
) -> Result<Numerators> {
    let n = data.n();
    let mut out = Numerators {
        treated: vec![0.0; n],
        control: vec![0.0; n],
        control_base: vec![0.0; n],
        n_treated: 0,
        n_control: 0,
        q_clips: 0,
    };
    let pool_t = (control == ControlSpec::NotYetTreated).then_some(t);
    for i in (0..n).filter(|&i| mask[i]) {
        let treated = data.cohort(i) == Some(g);
        let ctrl = !treated && control.in_pool(data, i, g, pool_t);
        if !treated && !ctrl {
            continue;
        }
        let f = match sampling {
            Some((sfit, s)) => {
                let (q, clipped) = sfit.q(data, i, s, t)?;
                out.q_clips += clipped as usize;
                1.0 / q
            }
            None => 1.0,
        };
        if treated {
            out.treated[i] = f;
            out.n_treated += 1;
        } else {
            let p = pfit.fitted[i];
            out.control_base[i] = f;
            out.control[i] = f * p / (1.0 - p);
            out.n_control += 1;
        }
    }
    Ok(out)
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x / m).collect()
}

/// Hajek mean of `v` under weights `w` (already averaging to one) and its influence.
fn weighted_mean(w: &[f64], v: &[f64]) -> (f64, Vec<f64>) {
    let n = w.len() as f64;
    let est = w.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / n;
    let psi = w.iter().zip(v).map(|(a, b)| if *a == 0.0 { 0.0 } else { a * (b - est) }).collect();
    (est, psi)
}

/// Contribution of the estimated propensity to the influence of a control
/// mean: `M' xi_i`, with
/// `M = mean[x c S f p' / (1-p)^2 (v - B)] / mean[c S f p / (1-p)]`.
fn propensity_term(
    pfit: &PropensityFit,
    xi: &DMatrix<f64>,
    base: &[f64],
    control_num: &[f64],
    v: &[f64],
    b: f64,
) -> Vec<f64> {
    let x = pfit.design();
    let d = x.ncols();
    let n = base.len();
    let denom = control_num.iter().sum::<f64>();
    let mut m = vec![0.0; d];
    for i in (0..n).filter(|&i| base[i] != 0.0) {
        let p = pfit.fitted[i];
        let c = base[i] * pfit.derivative[i] / ((1.0 - p) * (1.0 - p)) * (v[i] - b);
        for (j, mj) in m.iter_mut().enumerate() {
            *mj += x[(i, j)] * c;
        }
    }
    (0..n).map(|i| (0..d).map(|j| m[j] / denom * xi[(i, j)]).sum()).collect()
}

fn xi_for(pfit: &PropensityFit, data: &PanelDataset) -> Option<DMatrix<f64>> {
    // with an intercept-only model the correction is identically zero
    (pfit.design().ncols() > 1).then(|| propensity_influence(pfit, data).0)
}

/// Treated and control weights for the pair `(t - k, t)`.
pub fn block_weights(
    data: &PanelDataset,
    g: usize,
    t: usize,
    k: usize,
    control: ControlSpec,
    pfit: &PropensityFit,
    sfit: Option<&SamplingFit>,
) -> Result<BlockWeights> {
    check_fit(data, g, t, control, pfit)?;
    let mask = data.observation_mask(t, k)?;
    let num = numerators(data, g, t, control, pfit, &mask, sfit.map(|s| (s, t - k)))?;
    let cell = || format!("g={} pair ({},{})", data.period_label(g), data.period_label(t - k), data.period_label(t));
    if num.n_treated == 0 {
        return Err(Error::ident("EMPTY_TREATED_PAIR", format!("no treated unit observed for {}", cell())));
    }
    if num.n_control == 0 {
        return Err(Error::ident("EMPTY_CONTROL_PAIR", format!("no control unit observed for {}", cell())));
    }
    Ok(BlockWeights {
        treated: normalize(&num.treated),
        control: normalize(&num.control),
        n_treated: num.n_treated,
        n_control: num.n_control,
        q_clips: num.q_clips,
    })
}

fn fingerprint(control: ControlSpec, pfit: &PropensityFit, sfit: Option<&SamplingFit>) -> String {
    let link = format!("{:?}", pfit.model.link).to_lowercase();
    let attr = sfit.map_or("none".to_string(), |s| format!("{:?}", s.variant).to_lowercase());
    format!("{}/{}/k{}/{}", control.tag(), link, pfit.design().ncols() - 1, attr)
}

/// `Delta_k ATT(g, t)` on units observed at both `t - k` and `t`.
pub fn delta_att(
    data: &PanelDataset,
    g: usize,
    t: usize,
    k: usize,
    control: ControlSpec,
    pfit: &PropensityFit,
    sfit: Option<&SamplingFit>,
) -> Result<DeltaAtt> {
    let w = block_weights(data, g, t, k, control, pfit, sfit)?;
    let s = t - k;
    let n = data.n();
    let dy: Vec<f64> = (0..n)
        .map(|i| match (data.y(i, s), data.y(i, t)) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        })
        .collect();
    let (a, psi_g) = weighted_mean(&w.treated, &dy);
    let (b, mut psi_c) = weighted_mean(&w.control, &dy);
    if let Some(xi) = xi_for(pfit, data) {
        let mask = data.observation_mask(t, k)?;
        let num = numerators(data, g, t, control, pfit, &mask, sfit.map(|sf| (sf, s)))?;
        let corr = propensity_term(pfit, &xi, &num.control_base, &num.control, &dy, b);
        psi_c.iter_mut().zip(corr).for_each(|(p, c)| *p += c);
    }
    Ok(DeltaAtt {
        g,
        t,
        k,
        estimate: a - b,
        influence: psi_g.iter().zip(&psi_c).map(|(x, y)| x - y).collect(),
        n_treated_pair: w.n_treated,
        n_control_pair: w.n_control,
        fingerprint: fingerprint(control, pfit, sfit),
        sampling_clips: w.q_clips,
    })
}

/// Long difference from the base period `g - 1` to `t`.
pub fn long_did(data: &PanelDataset, g: usize, t: usize, pfit: &PropensityFit, sfit: Option<&SamplingFit>) -> Result<AttEstimate> {
    if t < g {
        return Err(Error::Argument("long difference needs t >= g".into()));
    }
    let d = delta_att(data, g, t, t - g + 1, pfit.control, pfit, sfit).map_err(|e| match e {
        Error::Identification { msg, .. } => Error::ident("MISSING_LONG_PAIR", msg),
        other => other,
    })?;
    Ok(AttEstimate { g, t, estimate: d.estimate, influence: d.influence, method: AttMethod::Long })
}

/// Difference of single-period weighted means at `t` and at `g - 1`, treating
/// the panel as repeated cross-sections.
pub fn cross_section_att(data: &PanelDataset, g: usize, t: usize, pfit: &PropensityFit) -> Result<AttEstimate> {
    if t < g || g < 2 {
        return Err(Error::Argument("cross-section estimate needs 2 <= g <= t".into()));
    }
    let control = pfit.control;
    check_fit(data, g, t, control, pfit)?;
    let xi = xi_for(pfit, data);
    let n = data.n();
    let mut est = 0.0;
    let mut psi = vec![0.0; n];
    for (tau, sign) in [(t, 1.0), (g - 1, -1.0)] {
        let mask = data.period_mask(tau);
        let num = numerators(data, g, t, control, pfit, &mask, None)?;
        if num.n_treated == 0 || num.n_control == 0 {
            return Err(Error::ident(
                "EMPTY_CROSS_SECTION_CELL",
                format!(
                    "no {} unit observed at period {} for g={}",
                    if num.n_treated == 0 { "treated" } else { "control" },
                    data.period_label(tau),
                    data.period_label(g)
                ),
            ));
        }
        let y: Vec<f64> = (0..n).map(|i| data.y(i, tau).unwrap_or(0.0)).collect();
        let (a, pa) = weighted_mean(&normalize(&num.treated), &y);
        let (b, mut pb) = weighted_mean(&normalize(&num.control), &y);
        if let Some(xi) = &xi {
            let corr = propensity_term(pfit, xi, &num.control_base, &num.control, &y, b);
            pb.iter_mut().zip(corr).for_each(|(p, c)| *p += c);
        }
        est += sign * (a - b);
        for i in 0..n {
            psi[i] += sign * (pa[i] - pb[i]);
        }
    }
    Ok(AttEstimate { g, t, estimate: est, influence: psi, method: AttMethod::CrossSection })
}

/// Pre-treatment block on the pair `(t - 1, t)` with `t < g`.
pub fn placebo_delta(
    data: &PanelDataset,
    g: usize,
    t: usize,
    control: ControlSpec,
    pfit: &PropensityFit,
    sfit: Option<&SamplingFit>,
) -> Result<DeltaAtt> {
    if t < 2 || t >= g {
        return Err(Error::Argument(format!("placebo needs 2 <= t < g, got t={t}, g={g}")));
    }
    delta_att(data, g, t, 1, control, pfit, sfit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::PanelParts;
    use crate::propensity::{fit_group_propensity, Link};

    pub(crate) fn panel(y: Vec<Vec<Option<f64>>>, cohort: Vec<Option<usize>>, x: Vec<Vec<f64>>) -> PanelDataset {
        let n = y.len();
        PanelDataset::from_parts(PanelParts {
            units: (0..n).map(|i| format!("u{i}")).collect(),
            n_periods: y[0].len(),
            period_origin: 1,
            period_step: 1,
            covariate_names: (0..x[0].len()).map(|j| format!("x{}", j + 1)).collect(),
            covariates: x,
            y,
            cohort,
            sampling_names: vec![],
            sampling: vec![],
        })
        .unwrap()
    }

    fn never(data: &PanelDataset, g: usize) -> PropensityFit {
        fit_group_propensity(data, g, ControlSpec::NeverTreated, None, Link::Logit).unwrap()
    }

    #[test]
    fn four_unit_weights() {
        let d = panel(
            vec![vec![Some(0.0), Some(1.0)]; 4],
            vec![Some(2), Some(2), None, None],
            vec![vec![]; 4],
        );
        let w = block_weights(&d, 2, 2, 1, ControlSpec::NeverTreated, &never(&d, 2), None).unwrap();
        assert_eq!(w.treated, vec![2.0, 2.0, 0.0, 0.0]);
        assert_eq!(w.control, vec![0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn unobserved_treated_unit_drops_out() {
        let d = panel(
            vec![vec![Some(0.0), Some(1.0)], vec![None, Some(1.0)], vec![Some(0.0), Some(1.0)], vec![Some(0.0), Some(1.0)]],
            vec![Some(2), Some(2), Some(2), None],
            vec![vec![]; 4],
        );
        let w = block_weights(&d, 2, 2, 1, ControlSpec::NeverTreated, &never(&d, 2), None).unwrap();
        assert_eq!(w.treated, vec![2.0, 0.0, 2.0, 0.0]);
        assert_eq!(w.treated.iter().sum::<f64>() / 4.0, 1.0);
    }

    #[test]
    fn six_unit_difference_of_means() {
        let ys = [(0.0, 2.0), (1.0, 5.0), (0.0, 1.0), (2.0, 3.0), (1.0, 2.0), (5.0, 6.0)];
        let d = panel(
            ys.iter().map(|(a, b)| vec![Some(*a), Some(*b)]).collect(),
            vec![Some(2), Some(2), None, None, None, None],
            vec![vec![]; 6],
        );
        let b = delta_att(&d, 2, 2, 1, ControlSpec::NeverTreated, &never(&d, 2), None).unwrap();
        assert_eq!(b.estimate, 2.0);
        assert_eq!((b.n_treated_pair, b.n_control_pair), (2, 4));
        assert!(b.influence.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn identical_outcomes_give_zero() {
        let d = panel(
            (0..6).map(|i| vec![Some(i as f64); 3]).collect(),
            vec![Some(2), Some(3), None, Some(2), None, None],
            (0..6).map(|i| vec![(i as f64).sin()]).collect(),
        );
        for g in [2, 3] {
            let p = never(&d, g);
            for t in 2..=3 {
                assert_eq!(delta_att(&d, g, t, 1, ControlSpec::NeverTreated, &p, None).unwrap().estimate, 0.0);
            }
        }
    }

    #[test]
    fn empty_cells_are_identification_errors() {
        let d = panel(
            vec![vec![Some(0.0), Some(1.0), None], vec![None, Some(1.0), Some(2.0)]],
            vec![Some(2), None],
            vec![vec![]; 2],
        );
        let p = never(&d, 2);
        let e = delta_att(&d, 2, 2, 1, ControlSpec::NeverTreated, &p, None).unwrap_err();
        assert_eq!(e.code(), "EMPTY_CONTROL_PAIR");
        let e = long_did(&d, 2, 3, &p, None).unwrap_err();
        assert_eq!(e.code(), "MISSING_LONG_PAIR");
        assert!(placebo_delta(&d, 2, 2, ControlSpec::NeverTreated, &p, None).is_err());
    }

    #[test]
    fn long_equals_single_link_at_g() {
        let d = panel(
            (0..5).map(|i| vec![Some(i as f64), Some((i * i) as f64), Some(1.0)]).collect(),
            vec![Some(2), Some(2), None, None, None],
            vec![vec![]; 5],
        );
        let p = never(&d, 2);
        let l = long_did(&d, 2, 2, &p, None).unwrap();
        let b = delta_att(&d, 2, 2, 1, ControlSpec::NeverTreated, &p, None).unwrap();
        assert_eq!(l.estimate, b.estimate);
        assert_eq!(l.influence, b.influence);
    }

    struct Lcg(u64);
    impl Lcg {
        fn unif(&mut self) -> f64 {
            self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((self.0 >> 11) as f64 + 0.5) / (1u64 << 53) as f64
        }
        fn normal(&mut self) -> f64 {
            (-2.0 * self.unif().ln()).sqrt() * (std::f64::consts::TAU * self.unif()).cos()
        }
    }

    /// Three-period panel with a covariate driving both treatment and trends,
    /// and roughly a third of the cells missing.
    fn covariate_panel(n: usize, seed: u64) -> PanelDataset {
        let mut r = Lcg(seed);
        let (mut y, mut cohort, mut x) = (vec![], vec![], vec![]);
        for _ in 0..n {
            let xi = r.normal();
            let u = r.unif();
            let p2 = 1.0 / (1.0 + (-(-0.5 + 1.0 * xi)).exp());
            let g = if u < p2 * 0.6 { Some(2) } else if u < 0.75 { None } else { Some(3) };
            let a = r.normal();
            let row = (1..=3)
                .map(|t| {
                    let eff = g.map_or(0.0, |g| if t >= g { 1.0 + 0.5 * xi } else { 0.0 });
                    let v = a + 1.5 * t as f64 * xi + eff + r.normal();
                    (r.unif() > 0.3).then_some(v)
                })
                .collect();
            y.push(row);
            cohort.push(g);
            x.push(vec![xi]);
        }
        panel(y, cohort, x)
    }

    fn jackknife_check(stat: impl Fn(&PanelDataset) -> (f64, Vec<f64>), d: &PanelDataset) {
        let n = d.n();
        let (est, psi) = stat(d);
        assert!(psi.iter().sum::<f64>().abs() / n as f64 <= 1e-10);
        let mut jk = Vec::with_capacity(n);
        let (mut sq, mut sp) = (0.0, 0.0);
        for (i, psi_i) in psi.iter().enumerate() {
            let keep: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let (e, _) = stat(&d.select_units(&keep));
            let pseudo = (n - 1) as f64 * (est - e);
            sq += (pseudo - psi_i).powi(2);
            sp += psi_i.powi(2);
            jk.push(e);
        }
        assert!((sq / sp).sqrt() < 0.1, "pseudo-values differ from influence: {}", (sq / sp).sqrt());
        let m = jk.iter().sum::<f64>() / n as f64;
        let var_jk = (n - 1) as f64 / n as f64 * jk.iter().map(|e| (e - m).powi(2)).sum::<f64>();
        let var_if = psi.iter().map(|p| p * p).sum::<f64>() / (n * n) as f64;
        assert!((var_jk / var_if - 1.0).abs() < 0.15, "jackknife {var_jk} vs influence {var_if}");
    }

    #[test]
    fn delta_influence_matches_jackknife() {
        let d = covariate_panel(400, 5);
        for (g, t, k) in [(2, 2, 1), (2, 3, 1), (2, 3, 2), (3, 3, 1)] {
            jackknife_check(
                |d| {
                    let b = delta_att(d, g, t, k, ControlSpec::NeverTreated, &never(d, g), None).unwrap();
                    (b.estimate, b.influence)
                },
                &d,
            );
        }
    }

    #[test]
    fn not_yet_treated_influence_matches_jackknife() {
        let d = covariate_panel(400, 9);
        jackknife_check(
            |d| {
                let p = fit_group_propensity(d, 2, ControlSpec::NotYetTreated, Some(2), Link::Logit).unwrap();
                let b = delta_att(d, 2, 2, 1, ControlSpec::NotYetTreated, &p, None).unwrap();
                (b.estimate, b.influence)
            },
            &d,
        );
    }

    #[test]
    fn cross_section_influence_matches_jackknife() {
        // level outcomes carry the unit effect, so the ratio is noisier; use more units
        let d = covariate_panel(1600, 11);
        jackknife_check(
            |d| {
                let a = cross_section_att(d, 2, 3, &never(d, 2)).unwrap();
                (a.estimate, a.influence)
            },
            &d,
        );
    }

    #[test]
    fn probit_influence_matches_jackknife() {
        let d = covariate_panel(400, 13);
        jackknife_check(
            |d| {
                let p = fit_group_propensity(d, 3, ControlSpec::NeverTreated, None, Link::Probit).unwrap();
                let b = delta_att(d, 3, 3, 1, ControlSpec::NeverTreated, &p, None).unwrap();
                (b.estimate, b.influence)
            },
            &d,
        );
    }
}
