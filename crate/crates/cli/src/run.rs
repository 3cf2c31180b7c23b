use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chaindid::chain::{Attrition, LinkSet, OMEGA_RANK_TOL, OMEGA_RIDGE, OPTIMAL_MIN_PAIR_UNITS};
use chaindid::inference::{multiplier_bootstrap, pretrend_test, MIN_DRAWS};
use chaindid::propensity::{AttritionVariant, FeatureSpec, FeatureTerm, Transform};
use chaindid::simlab::{monte_carlo, simulate_dgp, DgpConfig, McEstimator};
use chaindid::summaries::{all_summaries, theta_dynamic, theta_lead, SummaryKind};
use chaindid::{
    load_panel, validate as check_panel, AttTable, CohortShares, ControlSpec, DynamicStart, EstimateOptions, Error, Link, Method,
    PanelDataset, Result, Schema, ShareBasis, Weighting,
};
use serde::Serialize;

use crate::args::*;
use crate::report::*;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn emit(path: Option<&PathBuf>, content: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, content).map_err(|e| Error::Io(format!("{}: {e}", p.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(content.as_bytes()).and_then(|_| out.flush()).map_err(Error::from)
        }
    }
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

struct Loaded {
    data: PanelDataset,
    /// Input and schema bytes, for the fingerprint.
    raw: Vec<Vec<u8>>,
}

fn load(a: &InputArgs) -> Result<Loaded> {
    let bytes = read(&a.input)?;
    let mut raw = vec![bytes.clone()];
    let mut schema = match &a.schema {
        Some(p) => {
            let text = read(p)?;
            let s = Schema::from_json(&String::from_utf8_lossy(&text))?;
            raw.push(text);
            s
        }
        None => {
            let header = String::from_utf8_lossy(&bytes).lines().next().unwrap_or_default().to_string();
            let names: Vec<String> = header.split(',').map(|h| h.trim().trim_matches('"').to_string()).collect();
            Schema::canonical(&names)
        }
    };
    if let Some(cov) = &a.covariates {
        schema.covariates = cov.iter().filter(|c| !c.is_empty()).cloned().collect();
    }
    Ok(Loaded { data: load_panel(&bytes[..], Some(&schema))?, raw })
}

fn label_index(data: &PanelDataset, label: i64) -> Result<usize> {
    (1..=data.n_periods())
        .find(|&t| data.period_label(t) == label)
        .ok_or_else(|| Error::Argument(format!("period {label} is not in the data")))
}

fn check_inference(a: &InferenceArgs) -> Result<()> {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(Error::Argument(format!("--alpha must lie in (0,1), got {}", a.alpha)));
    }
    if a.bootstrap != 0 && a.bootstrap < MIN_DRAWS {
        return Err(Error::Argument(format!("--bootstrap needs 0 or at least {MIN_DRAWS} draws")));
    }
    Ok(())
}

fn parse_features(terms: &[String]) -> Result<FeatureSpec> {
    let terms = terms
        .iter()
        .filter(|t| !t.is_empty())
        .map(|t| {
            let (column, transform) = match t.split_once(':') {
                None => (t.as_str(), Transform::Identity),
                Some((c, "log1p")) => (c, Transform::Log1p),
                Some((c, "lag")) => (c, Transform::Lag),
                Some((_, other)) => return Err(Error::Argument(format!("unknown feature transform '{other}'"))),
            };
            Ok(FeatureTerm { column: column.to_string(), transform })
        })
        .collect::<Result<_>>()?;
    Ok(FeatureSpec { terms })
}

fn feature_strings(spec: &FeatureSpec) -> Vec<String> {
    spec.terms
        .iter()
        .map(|t| match t.transform {
            Transform::Identity => t.column.clone(),
            Transform::Log1p => format!("{}:log1p", t.column),
            Transform::Lag => format!("{}:lag", t.column),
        })
        .collect()
}

fn options(m: &ModelArgs, inf: &InferenceArgs, sh: &ShareArgs, data: &PanelDataset) -> Result<(EstimateOptions, RunConfig)> {
    if m.method != MethodArg::ChainedGmm && (m.links.is_some() || m.weighting.is_some()) {
        return Err(Error::Argument("--links and --weighting apply to --method chained-gmm".into()));
    }
    if m.attrition == AttritionArg::None && m.features.is_some() {
        return Err(Error::Argument("--features needs --attrition mar-x or smar".into()));
    }
    let attrition = match m.attrition {
        AttritionArg::None => None,
        variant => {
            let features = match &m.features {
                Some(f) => parse_features(f)?,
                None => {
                    let mut spec = FeatureSpec::covariates(data);
                    spec.terms.extend(
                        data.sampling_names().iter().map(|c| FeatureTerm { column: c.clone(), transform: Transform::Identity }),
                    );
                    spec
                }
            };
            if features.terms.is_empty() {
                return Err(Error::Argument("attrition weighting needs covariates, sampling covariates or --features".into()));
            }
            let variant = if variant == AttritionArg::MarX { AttritionVariant::MarX } else { AttritionVariant::Smar };
            Some(Attrition { variant, features })
        }
    };
    let (links, weighting) = if m.method == MethodArg::ChainedGmm {
        (Some(m.links.unwrap_or(LinksArg::All)), Some(m.weighting.unwrap_or(WeightingArg::Optimal)))
    } else {
        (None, None)
    };
    let opts = EstimateOptions {
        method: match m.method {
            MethodArg::Chained => Method::Chained,
            MethodArg::ChainedGmm => Method::ChainedGmm,
            MethodArg::CrossSection => Method::CrossSection,
            MethodArg::Long => Method::Long,
        },
        control: if m.control == ControlArg::Never { ControlSpec::NeverTreated } else { ControlSpec::NotYetTreated },
        link: if m.link == LinkArg::Logit { Link::Logit } else { Link::Probit },
        attrition: attrition.clone(),
        links: if links == Some(LinksArg::Minimal) { LinkSet::Minimal } else { LinkSet::All },
        weighting: if weighting == Some(WeightingArg::Identity) { Weighting::Identity } else { Weighting::Optimal },
        skip_placebos: false,
    };
    let cfg = RunConfig {
        method: m.method,
        control: m.control,
        link: m.link,
        covariates: data.covariate_names().to_vec(),
        attrition: m.attrition,
        features: attrition.as_ref().map(|a| feature_strings(&a.features)).unwrap_or_default(),
        links,
        weighting,
        bootstrap: inf.bootstrap,
        alpha: inf.alpha,
        seed: inf.seed,
        population_shares: sh.population_shares,
        dynamic_start: sh.dynamic_start,
        external_shares: sh.shares.is_some(),
        allow_partial: m.allow_partial,
    };
    Ok((opts, cfg))
}

/// Cohort shares and the bytes of the shares file, if any.
fn shares(data: &PanelDataset, a: &ShareArgs) -> Result<(CohortShares, Vec<u8>)> {
    let Some(path) = &a.shares else {
        let basis = match a.population_shares {
            ShareBasisArg::Panel => ShareBasis::Panel,
            ShareBasisArg::ObservedUnits => ShareBasis::ObservedUnits,
        };
        return Ok((CohortShares::estimate(data, basis), Vec::new()));
    };
    let bytes = read(path)?;
    let text = String::from_utf8_lossy(&bytes);
    let mut probs = BTreeMap::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (k == 0 && line.starts_with("cohort")) {
            continue;
        }
        let bad = || Error::Argument(format!("shares file line {}: expected cohort,probability", k + 1));
        let (c, p) = line.split_once(',').ok_or_else(bad)?;
        let label: i64 = c.trim().parse().map_err(|_| bad())?;
        let prob: f64 = p.trim().parse().map_err(|_| bad())?;
        probs.insert(label_index(data, label)?, prob);
    }
    Ok((CohortShares::external(probs)?, bytes))
}

/// Bootstrap bands over the identified rows, written in place.
fn fill_bands(rows: &mut [&mut Interval], influence: &[Option<&[f64]>], inf: &InferenceArgs) -> Result<Option<BandMeta>> {
    let picked: Vec<usize> = (0..rows.len()).filter(|&k| influence[k].is_some() && rows[k].estimate.is_some()).collect();
    if inf.bootstrap == 0 || picked.is_empty() {
        return Ok(None);
    }
    let phi: Vec<Vec<f64>> = picked.iter().map(|&k| influence[k].unwrap().to_vec()).collect();
    let est: Vec<f64> = picked.iter().map(|&k| rows[k].estimate.unwrap()).collect();
    let b = multiplier_bootstrap(&phi, &est, inf.bootstrap, inf.alpha, inf.seed)?;
    for (j, &k) in picked.iter().enumerate() {
        rows[k].std_error = Some(b.std_error(j));
        rows[k].lower = Some(b.lower[j]);
        rows[k].upper = Some(b.upper[j]);
    }
    Ok(Some(BandMeta { draws: b.draws, alpha: b.alpha, seed: b.seed, critical_value: b.c_crit, warnings: b.warnings }))
}

fn interval(r: &Result<f64>) -> Interval {
    match r {
        Ok(v) => Interval { estimate: Some(*v), ..Interval::default() },
        Err(e) => Interval { error: Some(e.into()), ..Interval::default() },
    }
}

/// Fails with the first cell error, unless partial tables are allowed and
/// at least one cell is identified.
fn require_identified(table: &AttTable, allow_partial: bool) -> Result<()> {
    let first_err = table.cells.iter().find_map(|c| c.result.as_ref().err());
    match first_err {
        None if table.cells.is_empty() => {
            Err(Error::Identification { code: "NON_IDENTIFIED".into(), msg: "no ATT(g,t) cell to estimate".into() })
        }
        None => Ok(()),
        Some(_) if allow_partial && table.identified().next().is_some() => Ok(()),
        Some(e) => Err(e.clone()),
    }
}

pub fn validate(a: &ValidateArgs) -> Result<ExitCode> {
    let loaded = load(&a.input)?;
    let report = check_panel(&loaded.data);
    #[derive(Serialize)]
    struct Out<'a> {
        schema_version: u32,
        command: &'static str,
        fingerprint: String,
        seed: Option<u64>,
        usable: bool,
        n_units: usize,
        periods: Vec<i64>,
        report: &'a chaindid::ValidationReport,
    }
    let raw: Vec<&[u8]> = std::iter::once(&b"validate"[..]).chain(loaded.raw.iter().map(|v| &v[..])).collect();
    let data = &loaded.data;
    let usable = report.is_usable();
    emit(
        a.out.as_ref(),
        &json(&Out {
            schema_version: SCHEMA_VERSION,
            command: "validate",
            fingerprint: fingerprint(&raw),
            seed: None,
            usable,
            n_units: data.n(),
            periods: (1..=data.n_periods()).map(|t| data.period_label(t)).collect(),
            report: &report,
        }),
    )?;
    Ok(if usable { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

struct Prepared {
    data: PanelDataset,
    table: AttTable,
    shares: CohortShares,
    cfg: RunConfig,
    fingerprint: String,
}

fn prepare(
    command: &'static str,
    input: &InputArgs,
    model: &ModelArgs,
    inf: &InferenceArgs,
    sh: &ShareArgs,
) -> Result<Prepared> {
    check_inference(inf)?;
    let loaded = load(input)?;
    let data = loaded.data;
    let (opts, cfg) = options(model, inf, sh, &data)?;
    let (shares, share_bytes) = shares(&data, sh)?;
    let table = chaindid::estimate_att(&data, &opts)?;
    require_identified(&table, model.allow_partial)?;
    let cfg_json = serde_json::to_vec(&cfg).expect("config serializes");
    let mut parts: Vec<&[u8]> = vec![command.as_bytes(), &cfg_json, &share_bytes];
    parts.extend(loaded.raw.iter().map(|v| &v[..]));
    Ok(Prepared { fingerprint: fingerprint(&parts), data, table, shares, cfg })
}

pub fn estimate(a: &EstimateArgs) -> Result<ExitCode> {
    let p = prepare("estimate", &a.input, &a.model, &a.inference, &a.shares)?;
    let (data, table, inf) = (&p.data, &p.table, &a.inference);
    let label = |t: usize| data.period_label(t);

    let mut att: Vec<AttRow> = table
        .cells
        .iter()
        .map(|c| AttRow {
            g: label(c.g),
            t: label(c.t),
            event_time: c.t as i64 - c.g as i64,
            value: interval(&c.result.as_ref().map(|r| r.estimate).map_err(Clone::clone)),
        })
        .collect();
    let influence: Vec<Option<&[f64]>> = table.cells.iter().map(|c| c.result.as_ref().ok().map(|r| &r.influence[..])).collect();
    let bands = fill_bands(&mut att.iter_mut().map(|r| &mut r.value).collect::<Vec<_>>(), &influence, inf)?;

    let tm = data.n_periods();
    let gs: Vec<usize> = table.cells.iter().map(|c| c.g).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let max_lead = gs.iter().max().map_or(0, |g| g - 2);
    let max_e = gs.iter().min().map_or(0, |g| tm - g);
    let mut es = Vec::new();
    for e in (1..=max_lead).rev() {
        es.push((-(e as i64), theta_lead(table, e, &p.shares)));
    }
    for e in 0..=max_e {
        es.push((e as i64, theta_dynamic(table, Some(e), &p.shares, DynamicStart::Zero)));
    }
    let mut event_study: Vec<EventRow> = es
        .iter()
        .map(|(e, r)| EventRow { event_time: *e, value: interval(&r.as_ref().map(|s| s.estimate).map_err(Clone::clone)) })
        .collect();
    let es_influence: Vec<Option<&[f64]>> = es.iter().map(|(_, r)| r.as_ref().ok().map(|s| &s.influence[..])).collect();
    let event_study_bands =
        fill_bands(&mut event_study.iter_mut().map(|r| &mut r.value).collect::<Vec<_>>(), &es_influence, inf)?;

    let (pretrend, pretrend_error) = if inf.bootstrap == 0 || table.placebos.is_empty() {
        (None, None)
    } else {
        match pretrend_test(&table.placebos, inf.bootstrap, inf.alpha, inf.seed) {
            Ok(t) => (
                Some(Pretrend { estimate: t.estimate, lower: t.lower, upper: t.upper, reject: t.reject, placebos: t.placebos }),
                None,
            ),
            Err(e) => (None, Some(CellError::from(&e))),
        }
    };
    let gmm = table.gmm.as_ref().map(|s| GmmMeta {
        weighting: if s.weighting == Weighting::Identity { WeightingArg::Identity } else { WeightingArg::Optimal },
        differences: s.delta_index.len(),
        targets: s.target_index.len(),
        omega_rank_tol: OMEGA_RANK_TOL,
        omega_ridge: OMEGA_RIDGE,
        ridge_applied: s.ridge,
        omega_flagged: s.omega_flagged,
        optimal_min_pair_units: OPTIMAL_MIN_PAIR_UNITS,
        non_identified: s.non_identified.iter().map(|&(g, t)| (label(g), label(t))).collect(),
    });
    let report = EstimateReport {
        schema_version: SCHEMA_VERSION,
        command: "estimate",
        fingerprint: p.fingerprint.clone(),
        seed: inf.seed,
        config: p.cfg.clone(),
        n_units: data.n(),
        periods: (1..=tm).map(label).collect(),
        att,
        bands,
        event_study,
        event_study_bands,
        pretrend,
        pretrend_error,
        gmm,
        propensity_clips: table.propensity_clips,
        sampling_clips: table.sampling_clips,
        warnings: table.warnings.clone(),
    };
    if let Some(path) = &a.csv {
        emit(Some(path), &with_provenance(&att_csv(&report.att), &p.fingerprint, inf.seed))?;
    }
    if let Some(path) = &a.event_study {
        emit(Some(path), &with_provenance(&event_study_csv(&report.event_study), &p.fingerprint, inf.seed))?;
    }
    emit(a.out.as_ref(), &json(&report))?;
    Ok(ExitCode::SUCCESS)
}

fn summary_label(kind: SummaryKind, data: &PanelDataset) -> (String, &'static str, Option<i64>) {
    let l = |t: usize| data.period_label(t);
    match kind {
        SummaryKind::Selective(Some(g)) => (format!("selective(g={})", l(g)), "selective", Some(l(g))),
        SummaryKind::Selective(None) => ("selective".into(), "selective", None),
        SummaryKind::Dynamic(Some(e)) => (format!("dynamic(e={e})"), "dynamic", Some(e as i64)),
        SummaryKind::Dynamic(None) => ("dynamic".into(), "dynamic", None),
        SummaryKind::Calendar(Some(t)) => (format!("calendar(t={})", l(t)), "calendar", Some(l(t))),
        SummaryKind::Calendar(None) => ("calendar".into(), "calendar", None),
        SummaryKind::Lead(e) => (format!("dynamic(e=-{e})"), "lead", Some(-(e as i64))),
    }
}

pub fn aggregate(a: &AggregateArgs) -> Result<ExitCode> {
    let p = prepare("aggregate", &a.input, &a.model, &a.inference, &a.shares)?;
    let (data, inf) = (&p.data, &a.inference);
    let start = if a.shares.dynamic_start == 1 { DynamicStart::One } else { DynamicStart::Zero };
    let all = all_summaries(&p.table, &p.shares, start);
    let mut rows: Vec<SummaryRow> = all
        .iter()
        .map(|(kind, r)| {
            let (summary, family, index) = summary_label(*kind, data);
            SummaryRow { summary, family, index, value: interval(&r.as_ref().map(|s| s.estimate).map_err(Clone::clone)) }
        })
        .collect();
    let mut bands = BTreeMap::new();
    for family in ["selective", "dynamic", "calendar"] {
        let members: Vec<usize> = (0..rows.len()).filter(|&k| rows[k].family == family).collect();
        let influence: Vec<Option<&[f64]>> = members.iter().map(|&k| all[k].1.as_ref().ok().map(|s| &s.influence[..])).collect();
        let mut values: Vec<&mut Interval> =
            rows.iter_mut().filter(|r| r.family == family).map(|r| &mut r.value).collect();
        if let Some(meta) = fill_bands(&mut values, &influence, inf)? {
            bands.insert(family, meta);
        }
    }
    let report = AggregateReport {
        schema_version: SCHEMA_VERSION,
        command: "aggregate",
        fingerprint: p.fingerprint.clone(),
        seed: inf.seed,
        config: p.cfg.clone(),
        n_units: data.n(),
        shares: p.shares.probs.iter().map(|(g, v)| (data.period_label(*g), *v)).collect(),
        shares_estimated: p.shares.is_estimated(),
        summaries: rows,
        bands,
        warnings: p.table.warnings.clone(),
    };
    if let Some(path) = &a.csv {
        emit(Some(path), &with_provenance(&summary_csv(&report.summaries), &p.fingerprint, inf.seed))?;
    }
    emit(a.out.as_ref(), &json(&report))?;
    Ok(ExitCode::SUCCESS)
}

fn design(a: &DesignArgs) -> Result<DgpConfig> {
    let cfg = match (a.dgp, &a.config) {
        (_, Some(path)) => {
            let text = read(path)?;
            serde_json::from_slice(&text).map_err(|e| Error::Argument(format!("simulation config: {e}")))?
        }
        (Some(d), None) => DgpConfig::preset(d)?,
        (None, None) => return Err(Error::Argument("pass --dgp or --config".into())),
    };
    cfg.check()?;
    Ok(cfg)
}

pub fn simulate(a: &SimulateArgs) -> Result<ExitCode> {
    let cfg = design(&a.design)?;
    let cfg_json = serde_json::to_vec(&cfg).expect("config serializes");
    let fp = fingerprint(&[b"simulate", &cfg_json, &a.seed.to_le_bytes()]);
    let sim = simulate_dgp(&cfg, a.seed)?;
    let mut csv = Vec::new();
    sim.sample.write_csv(&mut csv)?;
    emit(a.out.as_ref(), &with_provenance(&String::from_utf8_lossy(&csv), &fp, a.seed))?;
    if let Some(path) = &a.meta {
        #[derive(Serialize)]
        struct Meta<'a> {
            schema_version: u32,
            command: &'static str,
            fingerprint: &'a str,
            seed: u64,
            config: &'a DgpConfig,
            n_units: usize,
            truth: &'a [f64],
        }
        let meta = Meta {
            schema_version: SCHEMA_VERSION,
            command: "simulate",
            fingerprint: &fp,
            seed: a.seed,
            config: &cfg,
            n_units: sim.sample.n(),
            truth: &sim.truth,
        };
        emit(Some(path), &json(&meta))?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn montecarlo(a: &MonteCarloArgs) -> Result<ExitCode> {
    let cfg = design(&a.design)?;
    let estimators: Vec<McEstimator> = match &a.estimators {
        Some(names) => names.iter().map(|n| McEstimator::parse(n.trim())).collect::<Result<_>>()?,
        None if cfg.always_observed_share.is_some() => {
            vec![McEstimator::GmmIdentity, McEstimator::GmmOptimal, McEstimator::CrossSection, McEstimator::Long]
        }
        None => vec![McEstimator::Chained, McEstimator::CrossSection, McEstimator::Long],
    };
    if estimators.is_empty() {
        return Err(Error::Argument("no estimator selected".into()));
    }
    let report = monte_carlo(&cfg, a.reps, &estimators, a.seed)?;
    let text = match a.format {
        FormatArg::Csv => with_provenance(&report.to_csv(), &report.fingerprint, report.seed),
        FormatArg::Json => {
            #[derive(Serialize)]
            struct Out<'a> {
                schema_version: u32,
                command: &'static str,
                #[serde(flatten)]
                report: &'a chaindid::simlab::McReport,
            }
            json(&Out { schema_version: SCHEMA_VERSION, command: "montecarlo", report: &report })
        }
    };
    emit(a.out.as_ref(), &text)?;
    Ok(ExitCode::SUCCESS)
}
