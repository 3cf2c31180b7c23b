//! Long-format panel data: ingestion, canonical CSV output and structural checks.
//!
//! Periods are stored as 1..=T. Calendar labels are kept as an affine map so
//! output can be written back in the caller's units.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column names used when reading a table. Missing fields fall back to the
/// canonical header `unit,period,y,cohort[,x..][,z..][,sampled]`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Schema {
    pub unit: String,
    pub period: String,
    pub outcome: String,
    pub cohort: String,
    pub covariates: Vec<String>,
    pub sampling_covariates: Vec<String>,
    pub sampled: Option<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            unit: "unit".into(),
            period: "period".into(),
            outcome: "y".into(),
            cohort: "cohort".into(),
            covariates: Vec::new(),
            sampling_covariates: Vec::new(),
            sampled: None,
        }
    }
}

impl Schema {
    /// Canonical schema inferred from a header: `x*` columns are covariates,
    /// `z*` columns sampling covariates, `sampled` the override column.
    pub fn canonical(headers: &[String]) -> Self {
        let numbered = |h: &str, p: char| {
            h.len() > 1 && h.starts_with(p) && h[1..].chars().all(|c| c.is_ascii_digit())
        };
        Schema {
            covariates: headers.iter().filter(|h| numbered(h, 'x')).cloned().collect(),
            sampling_covariates: headers.iter().filter(|h| numbered(h, 'z')).cloned().collect(),
            sampled: headers.iter().find(|h| *h == "sampled").cloned(),
            ..Schema::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Argument(format!("schema mapping: {e}")))
    }
}

/// Raw pieces used to assemble a [`PanelDataset`]. Periods and cohorts are
/// already on the 1..=T scale; `y[i][t-1] = None` means not sampled.
#[derive(Debug, Clone, Default)]
pub struct PanelParts {
    pub units: Vec<String>,
    pub n_periods: usize,
    pub period_origin: i64,
    pub period_step: i64,
    pub y: Vec<Vec<Option<f64>>>,
    pub cohort: Vec<Option<usize>>,
    pub covariate_names: Vec<String>,
    pub covariates: Vec<Vec<f64>>,
    pub sampling_names: Vec<String>,
    /// `z[i][t-1]`, present only when the row carried sampling covariates.
    pub sampling: Vec<Vec<Option<Vec<f64>>>>,
}

/// Immutable unit-by-period panel.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    units: Vec<String>,
    t_max: usize,
    period_origin: i64,
    period_step: i64,
    y: Vec<f64>,
    observed: Vec<bool>,
    cohort: Vec<Option<usize>>,
    covariate_names: Vec<String>,
    x: Vec<f64>,
    sampling_names: Vec<String>,
    z: Vec<f64>,
    z_present: Vec<bool>,
}

impl PanelDataset {
    pub fn from_parts(p: PanelParts) -> Result<Self> {
        let n = p.units.len();
        let t_max = p.n_periods;
        let k = p.covariate_names.len();
        let m = p.sampling_names.len();
        if t_max == 0 {
            return Err(Error::Argument("panel needs at least one period".into()));
        }
        if p.y.len() != n || p.cohort.len() != n || p.covariates.len() != n {
            return Err(Error::Argument("panel parts have inconsistent lengths".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for u in &p.units {
            if !seen.insert(u.as_str()) {
                return Err(Error::invalid("DUPLICATE_UNIT", format!("unit {u} listed twice")));
            }
        }
        let mut y = vec![0.0; n * t_max];
        let mut observed = vec![false; n * t_max];
        let mut x = Vec::with_capacity(n * k);
        let mut z = vec![0.0; n * t_max * m];
        let mut z_present = vec![false; n * t_max];
        for i in 0..n {
            if p.y[i].len() != t_max {
                return Err(Error::Argument(format!("unit {} has wrong period count", p.units[i])));
            }
            for (t, v) in p.y[i].iter().enumerate() {
                if let Some(v) = v {
                    if !v.is_finite() {
                        return Err(Error::Argument(format!("non-finite outcome for {}", p.units[i])));
                    }
                    y[i * t_max + t] = *v;
                    observed[i * t_max + t] = true;
                }
            }
            if let Some(g) = p.cohort[i] {
                if g < 2 || g > t_max {
                    return Err(Error::invalid(
                        "COHORT_OUT_OF_RANGE",
                        format!("unit {} has cohort {} outside 2..={}", p.units[i], g, t_max),
                    ));
                }
            }
            if p.covariates[i].len() != k || p.covariates[i].iter().any(|v| !v.is_finite()) {
                return Err(Error::Argument(format!("bad covariates for unit {}", p.units[i])));
            }
            x.extend_from_slice(&p.covariates[i]);
            if let Some(row) = p.sampling.get(i) {
                for (t, zt) in row.iter().enumerate().take(t_max) {
                    if let Some(zt) = zt {
                        if zt.len() != m {
                            return Err(Error::Argument("sampling covariate width mismatch".into()));
                        }
                        z[(i * t_max + t) * m..(i * t_max + t + 1) * m].copy_from_slice(zt);
                        z_present[i * t_max + t] = true;
                    }
                }
            }
        }
        Ok(PanelDataset {
            units: p.units,
            t_max,
            period_origin: p.period_origin,
            period_step: if p.period_step == 0 { 1 } else { p.period_step },
            y,
            observed,
            cohort: p.cohort,
            covariate_names: p.covariate_names,
            x,
            sampling_names: p.sampling_names,
            z,
            z_present,
        })
    }

    pub fn n(&self) -> usize {
        self.units.len()
    }

    pub fn n_periods(&self) -> usize {
        self.t_max
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn unit(&self, i: usize) -> &str {
        &self.units[i]
    }

    /// Outcome for unit `i` at period `t` (1-based), `None` when not sampled.
    pub fn y(&self, i: usize, t: usize) -> Option<f64> {
        let j = i * self.t_max + t - 1;
        self.observed[j].then(|| self.y[j])
    }

    pub fn observed(&self, i: usize, t: usize) -> bool {
        self.observed[i * self.t_max + t - 1]
    }

    pub fn n_observed(&self, i: usize) -> usize {
        self.observed[i * self.t_max..(i + 1) * self.t_max].iter().filter(|b| **b).count()
    }

    /// First-treatment period, `None` for never-treated units.
    pub fn cohort(&self, i: usize) -> Option<usize> {
        self.cohort[i]
    }

    pub fn cohorts(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.cohort.iter().flatten().copied().collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// `D_it`: treated at period `t`.
    pub fn treated_at(&self, i: usize, t: usize) -> bool {
        matches!(self.cohort[i], Some(g) if t >= g)
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariates(&self, i: usize) -> &[f64] {
        let k = self.n_covariates();
        &self.x[i * k..(i + 1) * k]
    }

    pub fn sampling_names(&self) -> &[String] {
        &self.sampling_names
    }

    pub fn sampling(&self, i: usize, t: usize) -> Option<&[f64]> {
        let m = self.sampling_names.len();
        let j = i * self.t_max + t - 1;
        self.z_present[j].then(|| &self.z[j * m..(j + 1) * m])
    }

    /// Calendar label of internal period `t`.
    pub fn period_label(&self, t: usize) -> i64 {
        self.period_origin + self.period_step * (t as i64 - 1)
    }

    /// `S_t`: single-period observation indicator over all units.
    pub fn period_mask(&self, t: usize) -> Vec<bool> {
        (0..self.n()).map(|i| self.observed(i, t)).collect()
    }

    /// `S_{t-k,t}`: observed at both `t-k` and `t`.
    pub fn observation_mask(&self, t: usize, k: usize) -> Result<Vec<bool>> {
        if k == 0 || k >= t || t > self.t_max {
            return Err(Error::Argument(format!("lag {k} at period {t} outside 1..={}", self.t_max)));
        }
        Ok((0..self.n()).map(|i| self.observed(i, t - k) && self.observed(i, t)).collect())
    }

    /// Dataset restricted to the listed units, in that order.
    pub fn select_units(&self, keep: &[usize]) -> Self {
        let (tm, k, m) = (self.t_max, self.n_covariates(), self.sampling_names.len());
        let rows = |v: &[f64], w: usize| keep.iter().flat_map(|&i| v[i * w..(i + 1) * w].to_vec()).collect();
        let flags = |v: &[bool]| keep.iter().flat_map(|&i| v[i * tm..(i + 1) * tm].to_vec()).collect();
        PanelDataset {
            units: keep.iter().map(|&i| self.units[i].clone()).collect(),
            t_max: tm,
            period_origin: self.period_origin,
            period_step: self.period_step,
            y: rows(&self.y, tm),
            observed: flags(&self.observed),
            cohort: keep.iter().map(|&i| self.cohort[i]).collect(),
            covariate_names: self.covariate_names.clone(),
            x: rows(&self.x, k),
            sampling_names: self.sampling_names.clone(),
            z: rows(&self.z, tm * m),
            z_present: flags(&self.z_present),
        }
    }

    /// Same dataset with the outcome column replaced through `f(unit, period, y)`.
    pub fn map_outcomes(&self, f: impl Fn(usize, usize, f64) -> f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.n() {
            for t in 1..=self.t_max {
                let j = i * self.t_max + t - 1;
                if self.observed[j] {
                    out.y[j] = f(i, t, self.y[j]);
                }
            }
        }
        out
    }

    /// Writes the canonical CSV. A `sampled` column is added when some row
    /// exists only to carry covariates.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut rows: Vec<(usize, usize, bool)> = Vec::new();
        for i in 0..self.n() {
            let start = rows.len();
            for t in 1..=self.t_max {
                let j = i * self.t_max + t - 1;
                if self.observed[j] || self.z_present[j] {
                    rows.push((i, t, self.observed[j]));
                }
            }
            if rows.len() == start {
                rows.push((i, 1, false));
            }
        }
        let with_sampled = rows.iter().any(|r| !r.2);
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = vec!["unit".into(), "period".into(), "y".into(), "cohort".into()];
        header.extend(self.covariate_names.iter().cloned());
        header.extend(self.sampling_names.iter().cloned());
        if with_sampled {
            header.push("sampled".into());
        }
        wr.write_record(&header).map_err(csv_err)?;
        for (i, t, obs) in rows {
            let mut rec: Vec<String> = vec![
                self.units[i].clone(),
                self.period_label(t).to_string(),
                if obs { fmt_f64(self.y[i * self.t_max + t - 1]) } else { String::new() },
                self.cohort[i].map_or("0".to_string(), |g| self.period_label(g).to_string()),
            ];
            rec.extend(self.covariates(i).iter().map(|v| fmt_f64(*v)));
            match self.sampling(i, t) {
                Some(z) => rec.extend(z.iter().map(|v| fmt_f64(*v))),
                None => rec.extend(self.sampling_names.iter().map(|_| String::new())),
            }
            if with_sampled {
                rec.push(if obs { "1" } else { "0" }.into());
            }
            wr.write_record(&rec).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn parse_num(s: &str, line: usize, what: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse { line, msg: format!("non-numeric {what} '{s}'") })
}

fn parse_int(s: &str, line: usize, what: &str) -> Result<i64> {
    let v = parse_num(s, line, what)?;
    if v.fract() != 0.0 {
        return Err(Error::Parse { line, msg: format!("non-integer {what} '{s}'") });
    }
    Ok(v as i64)
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

struct Row {
    line: usize,
    unit: String,
    period: i64,
    y: Option<f64>,
    cohort: Option<i64>,
    x: Vec<f64>,
    z: Option<Vec<f64>>,
}

/// Reads a header-bearing CSV table into a panel. `schema = None` uses the
/// canonical header.
pub fn load_panel<R: Read>(source: R, schema: Option<&Schema>) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let schema = schema.cloned().unwrap_or_else(|| Schema::canonical(&headers));
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Argument(format!("missing column '{name}'")))
    };
    let (cu, cp, cy, cc) = (col(&schema.unit)?, col(&schema.period)?, col(&schema.outcome)?, col(&schema.cohort)?);
    let cx: Vec<usize> = schema.covariates.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let cz: Vec<usize> = schema.sampling_covariates.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let cs = schema.sampled.as_deref().map(col).transpose()?;

    let mut rows = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let line = r + 2;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        let get = |c: usize| rec.get(c).unwrap_or("");
        let unit = get(cu).to_string();
        if unit.is_empty() {
            return Err(Error::Parse { line, msg: "empty unit identifier".into() });
        }
        let period = parse_int(get(cp), line, "period")?;
        let mut y = match get(cy) {
            "" => None,
            s => Some(parse_num(s, line, "outcome")?),
        };
        if let Some(c) = cs {
            match get(c) {
                "0" => y = None,
                "1" | "" => {}
                s => return Err(Error::Parse { line, msg: format!("sampled must be 0/1, got '{s}'") }),
            }
        }
        let cohort = match get(cc) {
            "" => None,
            s => Some(parse_int(s, line, "cohort")?).filter(|c| *c != 0),
        };
        let x = cx.iter().map(|&c| parse_num(get(c), line, "covariate")).collect::<Result<Vec<_>>>()?;
        let z = if cz.is_empty() || cz.iter().all(|&c| get(c).is_empty()) {
            None
        } else {
            Some(cz.iter().map(|&c| parse_num(get(c), line, "sampling covariate")).collect::<Result<Vec<_>>>()?)
        };
        rows.push(Row { line, unit, period, y, cohort, x, z });
    }
    if rows.is_empty() {
        return Err(Error::Argument("empty table".into()));
    }

    let pmin = rows.iter().map(|r| r.period).min().unwrap();
    let pmax = rows.iter().map(|r| r.period).max().unwrap();
    let step = rows.iter().fold(0, |g, r| gcd(g, r.period - pmin));
    let step = if step == 0 { 1 } else { step };
    let n_periods = ((pmax - pmin) / step + 1) as usize;
    let relabel = |p: i64| -> Option<usize> {
        let d = p - pmin;
        (d % step == 0 && d >= 0).then(|| (d / step + 1) as usize)
    };

    let mut index: HashMap<String, usize> = HashMap::new();
    let mut parts = PanelParts {
        n_periods,
        period_origin: pmin,
        period_step: step,
        covariate_names: schema.covariates.clone(),
        sampling_names: schema.sampling_covariates.clone(),
        ..Default::default()
    };
    let mut raw_cohort: Vec<Option<i64>> = Vec::new();
    let mut seen_row = vec![];
    for r in rows {
        let i = *index.entry(r.unit.clone()).or_insert_with(|| {
            parts.units.push(r.unit.clone());
            parts.y.push(vec![None; n_periods]);
            parts.cohort.push(None);
            parts.covariates.push(r.x.clone());
            parts.sampling.push(vec![None; n_periods]);
            raw_cohort.push(r.cohort);
            seen_row.push(vec![false; n_periods]);
            parts.units.len() - 1
        });
        if raw_cohort[i] != r.cohort {
            return Err(Error::invalid(
                "CONFLICTING_COHORT",
                format!("unit {} has conflicting cohort values (line {})", r.unit, r.line),
            ));
        }
        if parts.covariates[i] != r.x {
            return Err(Error::invalid(
                "CONFLICTING_COVARIATE",
                format!("unit {} has time-varying covariates (line {})", r.unit, r.line),
            ));
        }
        let t = relabel(r.period).unwrap();
        if seen_row[i][t - 1] {
            return Err(Error::invalid(
                "DUPLICATE_ROW",
                format!("unit {} period {} appears twice (line {})", r.unit, r.period, r.line),
            ));
        }
        seen_row[i][t - 1] = true;
        parts.y[i][t - 1] = r.y;
        parts.sampling[i][t - 1] = r.z;
    }
    for (i, c) in raw_cohort.iter().enumerate() {
        parts.cohort[i] = match c {
            None => None,
            Some(c) => Some(relabel(*c).filter(|g| *g >= 2 && *g <= n_periods).ok_or_else(|| {
                Error::invalid(
                    "COHORT_OUT_OF_RANGE",
                    format!("unit {} has cohort {} outside the sampled periods after the first", parts.units[i], c),
                )
            })?),
        };
    }
    PanelDataset::from_parts(parts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub periods: Option<(i64, i64)>,
}

/// Joint observation counts for the adjacent pair (t-1, t), in calendar labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCount {
    pub from: i64,
    pub to: i64,
    pub total: usize,
    pub ever_treated: usize,
    pub never_treated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
    /// Unit counts keyed by calendar cohort label, 0 = never treated.
    pub cohort_counts: BTreeMap<i64, usize>,
    pub period_counts: Vec<(i64, usize)>,
    pub pair_counts: Vec<PairCount>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }

    pub fn is_usable(&self) -> bool {
        self.errors().next().is_none()
    }
}

/// Structural checks on overlap and sampling. Pure.
pub fn validate(data: &PanelDataset) -> ValidationReport {
    let n = data.n();
    let tm = data.n_periods();
    let mut issues = Vec::new();
    let label = |t: usize| data.period_label(t);
    let mut push = |severity, code: &str, message: String, unit: Option<String>, periods| {
        issues.push(Issue { severity, code: code.into(), message, unit, periods })
    };

    let mut cohort_counts = BTreeMap::new();
    for i in 0..n {
        *cohort_counts.entry(data.cohort(i).map_or(0, label)).or_insert(0) += 1;
        match data.n_observed(i) {
            0 => push(
                Severity::Warning,
                "NO_OBSERVATION",
                format!("unit {} has no observed outcome", data.unit(i)),
                Some(data.unit(i).into()),
                None,
            ),
            1 => push(
                Severity::Warning,
                "SINGLE_OBSERVATION",
                format!("unit {} is observed once and enters no estimator", data.unit(i)),
                Some(data.unit(i).into()),
                None,
            ),
            _ => {}
        }
    }

    let cohorts = data.cohorts();
    if cohorts.is_empty() {
        push(Severity::Error, "NO_TREATED", "no treated cohort in the data".into(), None, None);
    }
    for &g in &cohorts {
        if !(0..n).any(|i| data.cohort(i) == Some(g) && data.n_observed(i) >= 2) {
            push(
                Severity::Error,
                "EMPTY_COHORT",
                format!("cohort {} has no unit observed twice", label(g)),
                None,
                None,
            );
        }
    }
    let has_never = (0..n).any(|i| data.cohort(i).is_none());
    if !has_never {
        push(
            Severity::Warning,
            "NO_NEVER_TREATED",
            "no never-treated units; only not-yet-treated controls are available".into(),
            None,
            None,
        );
    }

    let period_counts = (1..=tm).map(|t| (label(t), (0..n).filter(|&i| data.observed(i, t)).count())).collect();
    let mut pair_counts = Vec::new();
    let first_cohort = cohorts.first().copied().unwrap_or(usize::MAX);
    for t in 2..=tm {
        let joint: Vec<usize> = (0..n).filter(|&i| data.observed(i, t - 1) && data.observed(i, t)).collect();
        let never = joint.iter().filter(|&&i| data.cohort(i).is_none()).count();
        pair_counts.push(PairCount {
            from: label(t - 1),
            to: label(t),
            total: joint.len(),
            ever_treated: joint.len() - never,
            never_treated: never,
        });
        let controls = if has_never {
            never
        } else {
            joint.iter().filter(|&&i| !data.treated_at(i, t)).count()
        };
        let pair = Some((label(t - 1), label(t)));
        if controls == 0 {
            let post = t >= first_cohort;
            push(
                if post { Severity::Error } else { Severity::Warning },
                "MISSING_CONTROL_PAIR",
                format!("MISSING_CONTROL_PAIR({},{}): no control unit observed in both periods", label(t - 1), label(t)),
                None,
                pair,
            );
        }
        for &g in cohorts.iter().filter(|&&g| g <= t) {
            if !joint.iter().any(|&i| data.cohort(i) == Some(g)) {
                push(
                    Severity::Error,
                    "MISSING_TREATED_PAIR",
                    format!(
                        "MISSING_TREATED_PAIR({},{}): cohort {} has no unit observed in both periods",
                        label(t - 1),
                        label(t),
                        label(g)
                    ),
                    None,
                    pair,
                );
            }
        }
    }
    ValidationReport { issues, cohort_counts, period_counts, pair_counts }
}
