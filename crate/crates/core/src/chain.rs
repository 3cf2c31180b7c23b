//! From k-period blocks to ATT(g,t): chained sums for rotating panels and a
//! GMM solution of `DeltaATT = W ATT` for general missing-data patterns.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::blocks::{block_weights, cross_section_att, delta_att, long_did, placebo_delta, AttEstimate, AttMethod, ControlSpec, DeltaAtt};
use crate::error::{Error, Result};
use crate::panel::PanelDataset;
use crate::propensity::{fit_group_propensity, fit_sampling_model, AttritionVariant, FeatureSpec, Link, PropensityFit, SamplingFit};

/// Eigenvalues of Omega below this fraction of its trace are flagged.
pub const OMEGA_RANK_TOL: f64 = 1e-10;
/// Ridge added to Omega's spectrum, relative to the mean eigenvalue.
pub const OMEGA_RIDGE: f64 = 1e-8;
/// Under optimal weighting, multi-period differences need this many treated
/// and control units in their pair. With fewer, the estimated variance of the
/// difference is too small and the weight matrix leans on it.
pub const OPTIMAL_MIN_PAIR_UNITS: usize = 10;

/// Sum of consecutive one-period links `tau = g..=t`.
pub fn chained_att(g: usize, t: usize, links: &[DeltaAtt]) -> Result<AttEstimate> {
    if t < g {
        return Err(Error::Argument(format!("chained estimate needs t >= g (g={g}, t={t})")));
    }
    let mut estimate = 0.0;
    let mut influence: Option<Vec<f64>> = None;
    for tau in g..=t {
        let link = links
            .iter()
            .find(|d| d.g == g && d.t == tau && d.k == 1)
            .ok_or_else(|| Error::ident("NON_IDENTIFIED", format!("ATT(g={g}, t={t}) is missing the link at {tau}")))?;
        estimate += link.estimate;
        match &mut influence {
            None => influence = Some(link.influence.clone()),
            Some(acc) => acc.iter_mut().zip(&link.influence).for_each(|(a, b)| *a += b),
        }
    }
    Ok(AttEstimate { g, t, estimate, influence: influence.unwrap_or_default(), method: AttMethod::Chained })
}

/// Rows map `(g, t, k)` onto targets `(g, t)`: +1 at `(g, t)`, -1 at
/// `(g, t - k)` when that is a post-treatment target. Earlier periods are the
/// zero baseline.
pub fn build_w(delta_index: &[(usize, usize, usize)], target_index: &[(usize, usize)]) -> Result<DMatrix<f64>> {
    let col: HashMap<(usize, usize), usize> = target_index.iter().enumerate().map(|(j, c)| (*c, j)).collect();
    let mut w = DMatrix::zeros(delta_index.len(), target_index.len());
    for (r, &(g, t, k)) in delta_index.iter().enumerate() {
        let j = *col.get(&(g, t)).ok_or_else(|| Error::Argument(format!("no target for ({g},{t})")))?;
        w[(r, j)] = 1.0;
        if t - k >= g {
            let j = *col.get(&(g, t - k)).ok_or_else(|| Error::Argument(format!("no target for ({g},{})", t - k)))?;
            w[(r, j)] = -1.0;
        }
    }
    Ok(w)
}

/// `Omega = Psi Psi' / n`, symmetrized, with the count of eigenvalues below
/// `OMEGA_RANK_TOL * trace`.
pub fn estimate_omega(psi: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let n = psi.ncols() as f64;
    let mut omega = psi * psi.transpose() / n;
    omega = (&omega + omega.transpose()) * 0.5;
    if omega.is_empty() {
        return (omega, 0);
    }
    let trace = omega.trace();
    let eig = SymmetricEigen::new(omega.clone());
    let flagged = eig.eigenvalues.iter().filter(|v| **v <= OMEGA_RANK_TOL * trace).count();
    (omega, flagged)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    Identity,
    #[default]
    Optimal,
}

#[derive(Debug, Clone)]
pub struct GmmSystem {
    pub delta_index: Vec<(usize, usize, usize)>,
    pub target_index: Vec<(usize, usize)>,
    pub w: DMatrix<f64>,
    pub delta_estimates: DVector<f64>,
    pub psi: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    pub weighting: Weighting,
    pub solution: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    /// Targets with an all-zero column in `W`.
    pub non_identified: Vec<(usize, usize)>,
    pub omega_flagged: usize,
    pub ridge: f64,
}

impl GmmSystem {
    pub fn new(deltas: &[DeltaAtt], target_index: Vec<(usize, usize)>, weighting: Weighting) -> Result<Self> {
        let n = deltas.first().map_or(0, |d| d.influence.len());
        let delta_index: Vec<_> = deltas.iter().map(|d| (d.g, d.t, d.k)).collect();
        let w = build_w(&delta_index, &target_index)?;
        let psi = DMatrix::from_fn(deltas.len(), n, |r, i| deltas[r].influence[i]);
        let (l, ld) = (target_index.len(), deltas.len());
        Ok(GmmSystem {
            delta_estimates: DVector::from_iterator(ld, deltas.iter().map(|d| d.estimate)),
            delta_index,
            target_index,
            w,
            psi,
            omega: DMatrix::zeros(ld, ld),
            weighting,
            solution: DVector::zeros(l),
            sigma: DMatrix::zeros(l, l),
            phi: DMatrix::zeros(l, n),
            non_identified: Vec::new(),
            omega_flagged: 0,
            ridge: 0.0,
        })
    }

    /// `W' A (DeltaATT - W ATT)` with `A` the weight matrix used in the solve.
    pub fn normal_equation_residual(&self) -> DVector<f64> {
        let resid = &self.delta_estimates - &self.w * &self.solution;
        self.w.transpose() * self.weight_matrix().0 * resid
    }

    fn weight_matrix(&self) -> (DMatrix<f64>, f64) {
        let ld = self.omega.nrows();
        match self.weighting {
            Weighting::Identity => (DMatrix::identity(ld, ld), 0.0),
            Weighting::Optimal if ld == 0 => (DMatrix::zeros(0, 0), 0.0),
            Weighting::Optimal => {
                let eig = SymmetricEigen::new(self.omega.clone());
                let trace = self.omega.trace();
                let mean = trace / ld as f64;
                let needs_ridge = eig.eigenvalues.iter().any(|v| *v <= OMEGA_RANK_TOL * trace);
                let ridge = if needs_ridge { OMEGA_RIDGE * mean } else { 0.0 };
                let inv = DVector::from_iterator(ld, eig.eigenvalues.iter().map(|v| 1.0 / (v.max(0.0) + ridge)));
                let a = &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose();
                ((&a + a.transpose()) * 0.5, ridge)
            }
        }
    }
}

/// Solves the system in place: `ATT = (W'AW)^+ W'A DeltaATT`, `Phi = (W'AW)^+ W'A Psi`
/// and `Sigma = Phi Phi' / n^2`.
pub fn gmm_solve(mut sys: GmmSystem) -> GmmSystem {
    let n = sys.psi.ncols().max(1) as f64;
    let (omega, flagged) = estimate_omega(&sys.psi);
    sys.omega = omega;
    sys.omega_flagged = flagged;
    let (a, ridge) = sys.weight_matrix();
    sys.ridge = ridge;
    let wa = sys.w.transpose() * &a;
    let h = &wa * &sys.w;
    let h_inv = match h.clone().try_inverse() {
        Some(inv) if sys.w.column_iter().all(|c| c.amax() > 0.0) => inv,
        _ => {
            let (r, c) = h.shape();
            h.pseudo_inverse(1e-12).unwrap_or_else(|_| DMatrix::zeros(r, c))
        }
    };
    sys.non_identified = sys
        .target_index
        .iter()
        .zip(sys.w.column_iter())
        .filter(|(_, c)| c.amax() == 0.0)
        .map(|(t, _)| *t)
        .collect();
    let proj = &h_inv * wa;
    sys.solution = &proj * &sys.delta_estimates;
    sys.phi = &proj * &sys.psi;
    sys.sigma = &sys.phi * sys.phi.transpose() / (n * n);
    sys
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Chained,
    ChainedGmm,
    CrossSection,
    Long,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LinkSet {
    /// One-period links only.
    Minimal,
    /// Every pair with jointly observed treated and control units.
    #[default]
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attrition {
    pub variant: AttritionVariant,
    pub features: FeatureSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EstimateOptions {
    pub method: Method,
    pub control: ControlSpec,
    pub link: Link,
    pub attrition: Option<Attrition>,
    pub links: LinkSet,
    pub weighting: Weighting,
    /// Skip the pre-treatment placebo blocks.
    pub skip_placebos: bool,
}

#[derive(Debug, Clone)]
pub struct AttCell {
    pub g: usize,
    pub t: usize,
    pub result: std::result::Result<AttEstimate, Error>,
}

/// Every post-treatment ATT(g,t) plus the one-period pre-treatment placebos.
#[derive(Debug, Clone)]
pub struct AttTable {
    pub n: usize,
    pub cells: Vec<AttCell>,
    pub placebos: Vec<DeltaAtt>,
    pub placebo_failures: Vec<(usize, usize, Error)>,
    pub gmm: Option<GmmSystem>,
    pub warnings: Vec<String>,
    pub propensity_clips: usize,
    pub sampling_clips: usize,
}

impl AttTable {
    pub fn get(&self, g: usize, t: usize) -> Option<&AttEstimate> {
        self.cells.iter().find(|c| c.g == g && c.t == t).and_then(|c| c.result.as_ref().ok())
    }

    pub fn identified(&self) -> impl Iterator<Item = &AttEstimate> {
        self.cells.iter().filter_map(|c| c.result.as_ref().ok())
    }
}

struct Context<'a> {
    data: &'a PanelDataset,
    opts: &'a EstimateOptions,
    fits: HashMap<(usize, Option<usize>), std::result::Result<PropensityFit, Error>>,
    sfit: Option<SamplingFit>,
    sampling_clips: usize,
}

impl Context<'_> {
    fn pfit(&mut self, g: usize, t: usize) -> Result<&PropensityFit> {
        let key_t = (self.opts.control == ControlSpec::NotYetTreated).then_some(t);
        let (data, control, link) = (self.data, self.opts.control, self.opts.link);
        self.fits
            .entry((g, key_t))
            .or_insert_with(|| fit_group_propensity(data, g, control, key_t, link))
            .as_ref()
            .map_err(Clone::clone)
    }

    fn delta(&mut self, g: usize, t: usize, k: usize) -> Result<DeltaAtt> {
        let control = self.opts.control;
        let pfit = self.pfit(g, t)?.clone();
        let d = delta_att(self.data, g, t, k, control, &pfit, self.sfit.as_ref())?;
        self.sampling_clips += d.sampling_clips;
        Ok(d)
    }
}

/// Runs the selected estimator over every cohort and post-treatment period.
pub fn estimate_att(data: &PanelDataset, opts: &EstimateOptions) -> Result<AttTable> {
    let tm = data.n_periods();
    let cohorts = data.cohorts();
    if cohorts.is_empty() {
        return Err(Error::ident("NO_TREATED", "no treated cohort in the data"));
    }
    let sfit = match &opts.attrition {
        None => None,
        Some(a) => {
            if opts.method == Method::CrossSection {
                return Err(Error::Argument("attrition weights apply to panel differences, not cross-sections".into()));
            }
            let pairs: Vec<(usize, usize)> = match (opts.method, opts.links) {
                (Method::Chained, _) | (Method::ChainedGmm, LinkSet::Minimal) => (2..=tm).map(|t| (t - 1, t)).collect(),
                _ => (2..=tm).flat_map(|t| (1..t).map(move |s| (s, t))).collect(),
            };
            Some(fit_sampling_model(data, a.variant, &a.features, &pairs)?)
        }
    };
    let mut warnings = sfit.as_ref().map(|s| s.warnings.clone()).unwrap_or_default();
    let mut ctx = Context { data, opts, fits: HashMap::new(), sfit, sampling_clips: 0 };
    let mut cells = Vec::new();
    let mut gmm = None;

    match opts.method {
        Method::Chained => {
            for &g in &cohorts {
                let mut links = Vec::new();
                let mut broken: Option<(usize, Error)> = None;
                for t in g..=tm {
                    if broken.is_none() {
                        match ctx.delta(g, t, 1) {
                            Ok(d) => links.push(d),
                            Err(e) => broken = Some((t, e)),
                        }
                    }
                    let result = match &broken {
                        Some((tau, e)) => Err(Error::ident(
                            "NON_IDENTIFIED",
                            format!("link ({},{}) unavailable: {e}", data.period_label(tau - 1), data.period_label(*tau)),
                        )),
                        None => chained_att(g, t, &links),
                    };
                    cells.push(AttCell { g, t, result });
                }
            }
        }
        Method::Long | Method::CrossSection => {
            for &g in &cohorts {
                for t in g..=tm {
                    let result = ctx.pfit(g, t).cloned().and_then(|p| match opts.method {
                        Method::Long => {
                            let r = long_did(data, g, t, &p, ctx.sfit.as_ref());
                            if let (Ok(_), Some(sf)) = (&r, ctx.sfit.as_ref()) {
                                let w = block_weights(data, g, t, t - g + 1, p.control, &p, Some(sf))?;
                                ctx.sampling_clips += w.q_clips;
                            }
                            r
                        }
                        _ => cross_section_att(data, g, t, &p),
                    });
                    cells.push(AttCell { g, t, result });
                }
            }
        }
        Method::ChainedGmm => {
            let max_k = if opts.links == LinkSet::Minimal { 1 } else { tm - 1 };
            let mut deltas = Vec::new();
            for &g in &cohorts {
                for t in g..=tm {
                    for k in 1..=max_k.min(t - 1) {
                        if let Ok(d) = ctx.delta(g, t, k) {
                            deltas.push(d);
                        }
                    }
                }
            }
            if opts.weighting == Weighting::Optimal {
                let before = deltas.len();
                deltas.retain(|d| {
                    d.k == 1 || (d.n_treated_pair >= OPTIMAL_MIN_PAIR_UNITS && d.n_control_pair >= OPTIMAL_MIN_PAIR_UNITS)
                });
                if deltas.len() < before {
                    warnings.push(format!(
                        "{} multi-period differences with fewer than {OPTIMAL_MIN_PAIR_UNITS} treated or control units left out of the optimal system",
                        before - deltas.len()
                    ));
                }
            }
            let (kept, identified) = identified_subsystem(&cohorts, tm, deltas);
            let targets: Vec<(usize, usize)> =
                cohorts.iter().flat_map(|&g| (g..=tm).map(move |t| (g, t))).filter(|c| identified.contains(c)).collect();
            let solved = if kept.is_empty() {
                None
            } else {
                let sys = gmm_solve(GmmSystem::new(&kept, targets.clone(), opts.weighting)?);
                if sys.omega_flagged > 0 {
                    warnings.push(format!(
                        "Omega has {} near-zero eigenvalues; ridge {:.3e} applied",
                        sys.omega_flagged, sys.ridge
                    ));
                }
                Some(sys)
            };
            for &g in &cohorts {
                for t in g..=tm {
                    let result = match solved.as_ref().and_then(|s| s.target_index.iter().position(|c| *c == (g, t))) {
                        Some(j) => {
                            let s = solved.as_ref().unwrap();
                            Ok(AttEstimate {
                                g,
                                t,
                                estimate: s.solution[j],
                                influence: s.phi.row(j).iter().copied().collect(),
                                method: AttMethod::Gmm,
                            })
                        }
                        None => Err(Error::ident(
                            "NON_IDENTIFIED",
                            format!(
                                "no chain of observed differences links ATT({},{}) to the base period",
                                data.period_label(g),
                                data.period_label(t)
                            ),
                        )),
                    };
                    cells.push(AttCell { g, t, result });
                }
            }
            gmm = solved;
        }
    }

    let mut placebos = Vec::new();
    let mut placebo_failures = Vec::new();
    for &g in cohorts.iter().filter(|_| !opts.skip_placebos) {
        for t in 2..g {
            let control = opts.control;
            let res = ctx.pfit(g, t).cloned().and_then(|p| placebo_delta(data, g, t, control, &p, ctx.sfit.as_ref()));
            match res {
                Ok(d) => {
                    ctx.sampling_clips += d.sampling_clips;
                    placebos.push(d)
                }
                Err(e) => placebo_failures.push((g, t, e)),
            }
        }
    }

    let propensity_clips = ctx.fits.values().filter_map(|f| f.as_ref().ok()).map(|f| f.clip_events).sum();
    if propensity_clips > 0 {
        warnings.push(format!("{propensity_clips} propensity scores clipped"));
    }
    let sampling_clips = ctx.sampling_clips;
    if sampling_clips > 0 {
        warnings.push(format!("{sampling_clips} sampling probabilities raised to the floor {}", crate::propensity::Q_FLOOR));
    }
    Ok(AttTable { n: data.n(), cells, placebos, placebo_failures, gmm, warnings, propensity_clips, sampling_clips })
}

/// Keeps the deltas whose periods connect to the cohort's base period and
/// returns the targets they identify.
fn identified_subsystem(
    cohorts: &[usize],
    tm: usize,
    deltas: Vec<DeltaAtt>,
) -> (Vec<DeltaAtt>, std::collections::HashSet<(usize, usize)>) {
    let mut identified = std::collections::HashSet::new();
    let mut reach: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
    for &g in cohorts {
        // node p stands for ATT(g, p); every p < g is the zero baseline
        let node = |p: usize| p.max(g - 1);
        let mut parent: Vec<usize> = (0..=tm).collect();
        fn find(parent: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while parent[r] != r {
                r = parent[r];
            }
            let mut c = x;
            while parent[c] != r {
                let next = parent[c];
                parent[c] = r;
                c = next;
            }
            r
        }
        for d in deltas.iter().filter(|d| d.g == g) {
            let (a, b) = (find(&mut parent, node(d.t - d.k)), find(&mut parent, node(d.t)));
            parent[a] = b;
        }
        let base = find(&mut parent, g - 1);
        let ok: Vec<bool> = (0..=tm).map(|p| find(&mut parent, node(p)) == base).collect();
        identified.extend((g..=tm).filter(|&t| ok[t]).map(|t| (g, t)));
        reach.insert(g, ok);
    }
    let kept = deltas.into_iter().filter(|d| reach[&d.g][d.t]).collect();
    (kept, identified)
}
