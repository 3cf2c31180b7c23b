//! Summary parameters: share-weighted averages of ATT(g,t) by cohort, event
//! time and calendar period.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::blocks::AttEstimate;
use crate::chain::AttTable;
use crate::error::{Error, Result};
use crate::panel::PanelDataset;

/// Which units count when estimating cohort shares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ShareBasis {
    /// Units with at least two observations, the ones that enter a difference.
    #[default]
    Panel,
    /// Every unit with at least one observation.
    ObservedUnits,
}

/// Cohort probabilities `P(G = g)` with, when estimated, the per-unit cohort
/// indicators needed for their influence.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortShares {
    pub probs: BTreeMap<usize, f64>,
    /// `indicator[i] = Some(g)` when unit `i` counts toward cohort `g`.
    indicator: Option<Vec<Option<usize>>>,
}

impl CohortShares {
    pub fn estimate(data: &PanelDataset, basis: ShareBasis) -> Self {
        let min_obs = match basis {
            ShareBasis::Panel => 2,
            ShareBasis::ObservedUnits => 1,
        };
        let n = data.n() as f64;
        let indicator: Vec<Option<usize>> =
            (0..data.n()).map(|i| data.cohort(i).filter(|_| data.n_observed(i) >= min_obs)).collect();
        let mut probs: BTreeMap<usize, f64> = data.cohorts().into_iter().map(|g| (g, 0.0)).collect();
        for g in indicator.iter().flatten() {
            *probs.entry(*g).or_default() += 1.0 / n;
        }
        CohortShares { probs, indicator: Some(indicator) }
    }

    /// Fixed shares over treated cohorts; they must sum to one within 1e-6.
    pub fn external(probs: BTreeMap<usize, f64>) -> Result<Self> {
        if probs.values().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Argument("cohort shares must be finite and non-negative".into()));
        }
        let total: f64 = probs.values().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Argument(format!("cohort shares sum to {total}, expected 1")));
        }
        Ok(CohortShares { probs, indicator: None })
    }

    pub fn is_estimated(&self) -> bool {
        self.indicator.is_some()
    }

    /// Normalized weights over `set` and the influence of each weight, or
    /// `None` for the influence when shares are fixed.
    #[allow(clippy::type_complexity)]
    fn weights(&self, set: &[usize], n: usize) -> Result<(Vec<f64>, Option<Vec<Vec<f64>>>)> {
        let p: Vec<f64> = set.iter().map(|g| self.probs.get(g).copied().unwrap_or(0.0)).collect();
        let total: f64 = p.iter().sum();
        if total <= 0.0 {
            return Err(Error::Degenerate(format!("cohorts {set:?} carry zero share")));
        }
        let w: Vec<f64> = p.iter().map(|v| v / total).collect();
        let Some(ind) = &self.indicator else { return Ok((w, None)) };
        if ind.len() != n {
            return Err(Error::Argument("shares were estimated on a different sample".into()));
        }
        // linearization of p_g / sum p over the set, with p_g a sample mean
        let xi = (0..set.len())
            .map(|j| {
                ind.iter()
                    .map(|c| {
                        let centred = |h: usize| f64::from(u8::from(*c == Some(set[h]))) - p[h];
                        let sum: f64 = (0..set.len()).map(centred).sum();
                        (centred(j) - w[j] * sum) / total
                    })
                    .collect()
            })
            .collect();
        Ok((w, Some(xi)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "index")]
pub enum SummaryKind {
    Selective(Option<usize>),
    Dynamic(Option<usize>),
    Calendar(Option<usize>),
    /// `e` periods before treatment, relative to the period just before it.
    Lead(usize),
}

/// First event time entering the overall dynamic average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DynamicStart {
    #[default]
    Zero,
    One,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryEstimate {
    pub kind: SummaryKind,
    pub estimate: f64,
    pub influence: Vec<f64>,
    /// Weight of each ATT(g,t) in the summary.
    pub weights: BTreeMap<(usize, usize), f64>,
}

impl SummaryEstimate {
    /// Human-readable label using the data's period labels.
    pub fn label(&self, data: &PanelDataset) -> String {
        match self.kind {
            SummaryKind::Selective(Some(g)) => format!("selective(g={})", data.period_label(g)),
            SummaryKind::Selective(None) => "selective".into(),
            SummaryKind::Dynamic(Some(e)) => format!("dynamic(e={e})"),
            SummaryKind::Dynamic(None) => "dynamic".into(),
            SummaryKind::Calendar(Some(t)) => format!("calendar(t={})", data.period_label(t)),
            SummaryKind::Calendar(None) => "calendar".into(),
            SummaryKind::Lead(e) => format!("dynamic(e=-{e})"),
        }
    }

    fn mean(kind: SummaryKind, parts: &[SummaryEstimate], n: usize) -> Self {
        let m = parts.len() as f64;
        let mut out = SummaryEstimate { kind, estimate: 0.0, influence: vec![0.0; n], weights: BTreeMap::new() };
        for p in parts {
            out.estimate += p.estimate / m;
            out.influence.iter_mut().zip(&p.influence).for_each(|(a, b)| *a += b / m);
            for (c, w) in &p.weights {
                *out.weights.entry(*c).or_default() += w / m;
            }
        }
        out
    }
}

fn lookup(table: &AttTable, g: usize, t: usize) -> Result<&AttEstimate> {
    match table.cells.iter().find(|c| c.g == g && c.t == t) {
        Some(c) => c.result.as_ref().map_err(Clone::clone),
        None => Err(Error::ident("NON_IDENTIFIED", format!("ATT({g},{t}) is not in the table"))),
    }
}

/// Per-cohort value: a fixed-weight average of that cohort's cells.
struct Component {
    g: usize,
    cells: Vec<(usize, f64)>,
}

fn share_weighted(kind: SummaryKind, table: &AttTable, shares: &CohortShares, comps: &[Component]) -> Result<SummaryEstimate> {
    let n = table.n;
    let set: Vec<usize> = comps.iter().map(|c| c.g).collect();
    let (w, xi) = shares.weights(&set, n)?;
    let mut out = SummaryEstimate { kind, estimate: 0.0, influence: vec![0.0; n], weights: BTreeMap::new() };
    for (j, comp) in comps.iter().enumerate() {
        let mut value = 0.0;
        for &(t, a) in &comp.cells {
            let att = lookup(table, comp.g, t)?;
            value += a * att.estimate;
            out.influence.iter_mut().zip(&att.influence).for_each(|(l, f)| *l += w[j] * a * f);
            *out.weights.entry((comp.g, t)).or_default() += w[j] * a;
        }
        out.estimate += w[j] * value;
        if let Some(xi) = &xi {
            out.influence.iter_mut().zip(&xi[j]).for_each(|(l, x)| *l += x * value);
        }
    }
    Ok(out)
}

fn horizon(table: &AttTable) -> usize {
    table.cells.iter().map(|c| c.t).max().unwrap_or(0)
}

fn cohorts(table: &AttTable) -> Vec<usize> {
    let mut gs: Vec<usize> = table.cells.iter().map(|c| c.g).collect();
    gs.dedup();
    gs
}

/// Average effect over cohort `g`'s post-treatment periods, or the
/// share-weighted average of those across cohorts.
pub fn theta_selective(table: &AttTable, g: Option<usize>, shares: &CohortShares) -> Result<SummaryEstimate> {
    let tm = horizon(table);
    let comp = |g: usize| Component { g, cells: (g..=tm).map(|t| (t, 1.0 / (tm - g + 1) as f64)).collect() };
    match g {
        Some(g) => {
            if !cohorts(table).contains(&g) {
                return Err(Error::Argument(format!("cohort {g} is not in the table")));
            }
            let own = CohortShares::external(BTreeMap::from([(g, 1.0)]))?;
            share_weighted(SummaryKind::Selective(Some(g)), table, &own, &[comp(g)])
        }
        None => {
            let comps: Vec<Component> = cohorts(table).into_iter().map(comp).collect();
            share_weighted(SummaryKind::Selective(None), table, shares, &comps)
        }
    }
}

/// Effect of exposure length `e` averaged over cohorts observed at `g + e`;
/// without `e`, the mean over every feasible exposure length.
pub fn theta_dynamic(table: &AttTable, e: Option<usize>, shares: &CohortShares, start: DynamicStart) -> Result<SummaryEstimate> {
    let tm = horizon(table);
    let gs = cohorts(table);
    let max_e = gs.iter().map(|g| tm - g).max().unwrap_or(0);
    let at = |e: usize| -> Result<SummaryEstimate> {
        if e > max_e {
            return Err(Error::Argument(format!("event time {e} is beyond the last feasible exposure {max_e}")));
        }
        let comps: Vec<Component> =
            gs.iter().filter(|&&g| g + e <= tm).map(|&g| Component { g, cells: vec![(g + e, 1.0)] }).collect();
        share_weighted(SummaryKind::Dynamic(Some(e)), table, shares, &comps)
    };
    match e {
        Some(e) => at(e),
        None => {
            let first = if start == DynamicStart::One { 1 } else { 0 };
            if first > max_e {
                return Err(Error::Argument("no exposure length is available for the dynamic average".into()));
            }
            let parts = (first..=max_e).map(at).collect::<Result<Vec<_>>>()?;
            Ok(SummaryEstimate::mean(SummaryKind::Dynamic(None), &parts, table.n))
        }
    }
}

/// Effect in period `t` averaged over cohorts treated by then; without `t`,
/// the mean over periods with at least one treated cohort.
pub fn theta_calendar(table: &AttTable, t: Option<usize>, shares: &CohortShares) -> Result<SummaryEstimate> {
    let tm = horizon(table);
    let gs = cohorts(table);
    let first = gs.first().copied().unwrap_or(2);
    let at = |t: usize| -> Result<SummaryEstimate> {
        if t < 2 || t > tm {
            return Err(Error::Argument(format!("calendar period {t} outside 2..={tm}")));
        }
        let comps: Vec<Component> = gs.iter().filter(|&&g| g <= t).map(|&g| Component { g, cells: vec![(t, 1.0)] }).collect();
        if comps.is_empty() {
            return Err(Error::Argument(format!("no cohort is treated by period {t}")));
        }
        share_weighted(SummaryKind::Calendar(Some(t)), table, shares, &comps)
    };
    match t {
        Some(t) => at(t),
        None => {
            let parts = (first..=tm).map(at).collect::<Result<Vec<_>>>()?;
            Ok(SummaryEstimate::mean(SummaryKind::Calendar(None), &parts, table.n))
        }
    }
}

/// Pre-treatment counterpart of the dynamic effect at `-e`: per cohort the
/// outcome gap at `g - 1 - e` relative to `g - 1`, minus the same gap for the
/// controls, built by summing placebo blocks backward from `g - 1`.
pub fn theta_lead(table: &AttTable, e: usize, shares: &CohortShares) -> Result<SummaryEstimate> {
    if e == 0 {
        return Err(Error::Argument("leads start at 1".into()));
    }
    let n = table.n;
    let gs: Vec<usize> = cohorts(table).into_iter().filter(|&g| g >= e + 2).collect();
    if gs.is_empty() {
        return Err(Error::Argument(format!("no cohort has {e} pre-treatment differences")));
    }
    let (w, xi) = shares.weights(&gs, n)?;
    let mut out = SummaryEstimate { kind: SummaryKind::Lead(e), estimate: 0.0, influence: vec![0.0; n], weights: BTreeMap::new() };
    for (j, &g) in gs.iter().enumerate() {
        let mut value = 0.0;
        for t in g - e..g {
            let block = table.placebos.iter().find(|d| d.g == g && d.t == t).ok_or_else(|| {
                let why = table.placebo_failures.iter().find(|f| f.0 == g && f.1 == t).map_or_else(
                    || "was not computed".to_string(),
                    |f| f.2.to_string(),
                );
                Error::ident("NON_IDENTIFIED", format!("placebo block ({g},{t}) {why}"))
            })?;
            value -= block.estimate;
            out.influence.iter_mut().zip(&block.influence).for_each(|(l, f)| *l -= w[j] * f);
            *out.weights.entry((g, t)).or_default() -= w[j];
        }
        out.estimate += w[j] * value;
        if let Some(xi) = &xi {
            out.influence.iter_mut().zip(&xi[j]).for_each(|(l, x)| *l += x * value);
        }
    }
    Ok(out)
}

/// Every summary the table supports, in a fixed order. Non-identified
/// summaries are returned as errors alongside their kind.
pub fn all_summaries(
    table: &AttTable,
    shares: &CohortShares,
    start: DynamicStart,
) -> Vec<(SummaryKind, Result<SummaryEstimate>)> {
    let tm = horizon(table);
    let gs = cohorts(table);
    let mut out = Vec::new();
    for &g in &gs {
        out.push((SummaryKind::Selective(Some(g)), theta_selective(table, Some(g), shares)));
    }
    out.push((SummaryKind::Selective(None), theta_selective(table, None, shares)));
    let max_e = gs.iter().map(|g| tm - g).max().unwrap_or(0);
    for e in 0..=max_e {
        out.push((SummaryKind::Dynamic(Some(e)), theta_dynamic(table, Some(e), shares, start)));
    }
    out.push((SummaryKind::Dynamic(None), theta_dynamic(table, None, shares, start)));
    for t in gs.first().copied().unwrap_or(2)..=tm {
        out.push((SummaryKind::Calendar(Some(t)), theta_calendar(table, Some(t), shares)));
    }
    out.push((SummaryKind::Calendar(None), theta_calendar(table, None, shares)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::AttMethod;
    use crate::chain::AttCell;

    fn table(cells: &[(usize, usize, f64)], n: usize) -> AttTable {
        AttTable {
            n,
            cells: cells
                .iter()
                .map(|&(g, t, v)| AttCell {
                    g,
                    t,
                    result: Ok(AttEstimate {
                        g,
                        t,
                        estimate: v,
                        influence: (0..n).map(|i| if i % 2 == 0 { v } else { -v }).collect(),
                        method: AttMethod::Chained,
                    }),
                })
                .collect(),
            placebos: vec![],
            placebo_failures: vec![],
            gmm: None,
            warnings: vec![],
            propensity_clips: 0,
            sampling_clips: 0,
        }
    }

    fn fixed(pairs: &[(usize, f64)]) -> CohortShares {
        CohortShares::external(pairs.iter().copied().collect()).unwrap()
    }

    #[test]
    fn selective_two_cohorts() {
        // theta_S(2) = 1, theta_S(3) = 2 over periods 2..3
        let tb = table(&[(2, 2, 0.5), (2, 3, 1.5), (3, 3, 2.0)], 4);
        let s = fixed(&[(2, 0.25), (3, 0.75)]);
        assert_eq!(theta_selective(&tb, Some(2), &s).unwrap().estimate, 1.0);
        let all = theta_selective(&tb, None, &s).unwrap();
        assert!((all.estimate - 1.75).abs() < 1e-15);
        assert!((all.weights.values().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_cohort_ignores_shares() {
        let tb = table(&[(3, 3, 1.0), (3, 4, 2.0), (3, 5, 4.0)], 4);
        let s = fixed(&[(3, 1.0)]);
        assert!((theta_selective(&tb, None, &s).unwrap().estimate - 7.0 / 3.0).abs() < 1e-15);
        assert_eq!(theta_dynamic(&tb, Some(1), &s, DynamicStart::Zero).unwrap().estimate, 2.0);
        assert_eq!(theta_calendar(&tb, Some(5), &s).unwrap().estimate, 4.0);
    }

    #[test]
    fn dynamic_and_calendar_arithmetic() {
        let s = fixed(&[(2, 0.5), (3, 0.5)]);
        let dyn_tb = table(&[(2, 2, 1.0), (2, 3, 1.0), (2, 4, 1.0), (3, 3, 3.0), (3, 4, 3.0)], 6);
        for e in 0..=1 {
            assert_eq!(theta_dynamic(&dyn_tb, Some(e), &s, DynamicStart::Zero).unwrap().estimate, 2.0);
        }
        let cal_tb = table(&[(2, 2, 1.0), (2, 3, 2.0), (2, 4, 1.0), (3, 3, 4.0), (3, 4, 3.0)], 6);
        assert_eq!(theta_calendar(&cal_tb, Some(3), &s).unwrap().estimate, 3.0);
        // e = 2 only has cohort 2
        assert_eq!(theta_dynamic(&cal_tb, Some(2), &s, DynamicStart::Zero).unwrap().estimate, 1.0);
        assert!(matches!(theta_dynamic(&cal_tb, Some(3), &s, DynamicStart::Zero), Err(Error::Argument(_))));
        let d0 = theta_dynamic(&cal_tb, None, &s, DynamicStart::Zero).unwrap().estimate;
        let d1 = theta_dynamic(&cal_tb, None, &s, DynamicStart::One).unwrap().estimate;
        assert!((d0 - (2.5 + 2.5 + 1.0) / 3.0).abs() < 1e-15 && (d1 - 1.75).abs() < 1e-15);
    }

    #[test]
    fn leads_sum_placebos_backward() {
        let mut tb = table(&[(3, 3, 1.0), (3, 4, 1.0), (4, 4, 1.0)], 4);
        let block = |g, t, v| crate::blocks::DeltaAtt {
            g,
            t,
            k: 1,
            estimate: v,
            influence: vec![v, -v, 0.0, 0.0],
            n_treated_pair: 2,
            n_control_pair: 2,
            fingerprint: String::new(),
            sampling_clips: 0,
        };
        tb.placebos = vec![block(3, 2, 0.5), block(4, 3, 0.2), block(4, 2, 0.1)];
        let s = fixed(&[(3, 0.5), (4, 0.5)]);
        let one = theta_lead(&tb, 1, &s).unwrap();
        assert!((one.estimate + 0.35).abs() < 1e-15);
        assert_eq!(one.weights[&(4, 3)], -0.5);
        let two = theta_lead(&tb, 2, &s).unwrap();
        assert!((two.estimate + 0.3).abs() < 1e-15 && two.weights.len() == 2);
        assert!(theta_lead(&tb, 3, &s).is_err());
        tb.placebos.pop();
        assert_eq!(theta_lead(&tb, 2, &s).unwrap_err().code(), "NON_IDENTIFIED");
    }

    #[test]
    fn constant_effects_aggregate_to_constant() {
        let c = 0.37;
        let tb = table(&[(2, 2, c), (2, 3, c), (2, 4, c), (3, 3, c), (3, 4, c), (4, 4, c)], 2);
        let s = fixed(&[(2, 0.2), (3, 0.3), (4, 0.5)]);
        for r in [
            theta_selective(&tb, None, &s),
            theta_dynamic(&tb, None, &s, DynamicStart::Zero),
            theta_calendar(&tb, None, &s),
        ] {
            let r = r.unwrap();
            assert!((r.estimate - c).abs() < 1e-15);
            assert!((r.weights.values().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_identified_component_propagates() {
        let mut tb = table(&[(2, 2, 1.0), (2, 3, 1.0)], 2);
        tb.cells[1].result = Err(Error::ident("NON_IDENTIFIED", "gap"));
        let s = fixed(&[(2, 1.0)]);
        let e = theta_selective(&tb, None, &s).unwrap_err();
        assert_eq!(e.code(), "NON_IDENTIFIED");
        assert!(theta_dynamic(&tb, Some(0), &s, DynamicStart::Zero).is_ok());
    }

    #[test]
    fn external_shares_validated() {
        assert!(CohortShares::external(BTreeMap::from([(2, 0.5), (3, 0.4)])).is_err());
        assert!(CohortShares::external(BTreeMap::from([(2, 0.5), (3, 0.5 + 5e-7)])).is_ok());
        assert!(CohortShares::external(BTreeMap::from([(2, -0.5), (3, 1.5)])).is_err());
    }

    #[test]
    fn share_weight_influence_matches_finite_difference() {
        // w_2 = p_2 / (p_2 + p_3) with sample-mean shares; perturbing unit i by
        // eps must move w_2 by eps * xi_2(i) / n to first order
        let ind = vec![Some(2), Some(3), Some(3), None, Some(2), Some(3), None];
        let n = ind.len();
        let shares = |wts: &[f64]| -> f64 {
            let p2: f64 = ind.iter().zip(wts).filter(|(c, _)| **c == Some(2)).map(|(_, w)| w).sum();
            let p3: f64 = ind.iter().zip(wts).filter(|(c, _)| **c == Some(3)).map(|(_, w)| w).sum();
            p2 / (p2 + p3)
        };
        let mut probs = BTreeMap::new();
        probs.insert(2, 2.0 / n as f64);
        probs.insert(3, 3.0 / n as f64);
        let cs = CohortShares { probs, indicator: Some(ind.clone()) };
        let (w, xi) = cs.weights(&[2, 3], n).unwrap();
        let xi = xi.unwrap();
        let eps = 1e-6;
        for i in 0..n {
            let mut wts = vec![1.0; n];
            wts[i] += eps;
            let fd = (shares(&wts) - w[0]) / eps * n as f64;
            assert!((fd - xi[0][i]).abs() < 1e-4, "unit {i}: {fd} vs {}", xi[0][i]);
        }
        assert!(xi[0].iter().sum::<f64>().abs() < 1e-12);
    }
}
