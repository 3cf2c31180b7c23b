//! Serialized outputs. Every report carries the schema version, a fingerprint
//! of its inputs and the seed. Floats are written in shortest round-trip form.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chaindid::panel::fmt_f64;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::args::{AttritionArg, ControlArg, LinkArg, LinksArg, MethodArg, ShareBasisArg, WeightingArg};

pub const SCHEMA_VERSION: u32 = 1;

/// First 16 hex digits of SHA-256 over the parts, each length-prefixed.
pub fn fingerprint(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
pub struct ErrorBody<'a> {
    pub code: &'a str,
    pub message: String,
}

pub fn error_json(e: &chaindid::Error) -> String {
    #[derive(Serialize)]
    struct Out<'a> {
        schema_version: u32,
        error: ErrorBody<'a>,
    }
    serde_json::to_string(&Out { schema_version: SCHEMA_VERSION, error: ErrorBody { code: e.code(), message: e.to_string() } })
        .expect("error serializes")
}

#[derive(Serialize, Clone, PartialEq, Debug)]
pub struct CellError {
    pub code: String,
    pub message: String,
}

impl From<&chaindid::Error> for CellError {
    fn from(e: &chaindid::Error) -> Self {
        CellError { code: e.code().to_string(), message: e.to_string() }
    }
}

/// Estimation settings echoed in every estimate and aggregate report.
#[derive(Serialize, Clone, Debug)]
pub struct RunConfig {
    pub method: MethodArg,
    pub control: ControlArg,
    pub link: LinkArg,
    pub covariates: Vec<String>,
    pub attrition: AttritionArg,
    pub features: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub links: Option<LinksArg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weighting: Option<WeightingArg>,
    pub bootstrap: usize,
    pub alpha: f64,
    pub seed: u64,
    pub population_shares: ShareBasisArg,
    pub dynamic_start: u8,
    pub external_shares: bool,
    pub allow_partial: bool,
}

#[derive(Serialize, Clone, Debug)]
pub struct BandMeta {
    pub draws: usize,
    pub alpha: f64,
    pub seed: u64,
    pub critical_value: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// One estimate with its simultaneous band; `estimate` is absent when the
/// row is not identified.
#[derive(Serialize, Clone, Debug, Default)]
pub struct Interval {
    pub estimate: Option<f64>,
    pub std_error: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<CellError>,
}

#[derive(Serialize)]
pub struct AttRow {
    pub g: i64,
    pub t: i64,
    pub event_time: i64,
    #[serde(flatten)]
    pub value: Interval,
}

#[derive(Serialize)]
pub struct EventRow {
    pub event_time: i64,
    #[serde(flatten)]
    pub value: Interval,
}

#[derive(Serialize)]
pub struct Pretrend {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub reject: bool,
    pub placebos: usize,
}

#[derive(Serialize)]
pub struct GmmMeta {
    pub weighting: WeightingArg,
    pub differences: usize,
    pub targets: usize,
    pub omega_rank_tol: f64,
    pub omega_ridge: f64,
    pub ridge_applied: f64,
    pub omega_flagged: usize,
    pub optimal_min_pair_units: usize,
    pub non_identified: Vec<(i64, i64)>,
}

#[derive(Serialize)]
pub struct EstimateReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub fingerprint: String,
    pub seed: u64,
    pub config: RunConfig,
    pub n_units: usize,
    pub periods: Vec<i64>,
    pub att: Vec<AttRow>,
    pub bands: Option<BandMeta>,
    pub event_study: Vec<EventRow>,
    pub event_study_bands: Option<BandMeta>,
    pub pretrend: Option<Pretrend>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrend_error: Option<CellError>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gmm: Option<GmmMeta>,
    pub propensity_clips: usize,
    pub sampling_clips: usize,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
pub struct SummaryRow {
    pub summary: String,
    pub family: &'static str,
    /// Cohort or calendar label, or event time; absent for overall averages.
    pub index: Option<i64>,
    #[serde(flatten)]
    pub value: Interval,
}

#[derive(Serialize)]
pub struct AggregateReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub fingerprint: String,
    pub seed: u64,
    pub config: RunConfig,
    pub n_units: usize,
    pub shares: BTreeMap<i64, f64>,
    pub shares_estimated: bool,
    pub summaries: Vec<SummaryRow>,
    pub bands: BTreeMap<&'static str, BandMeta>,
    pub warnings: Vec<String>,
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Appends `fingerprint,seed` columns to every line of a CSV document.
pub fn with_provenance(csv: &str, fingerprint: &str, seed: u64) -> String {
    let mut out = String::with_capacity(csv.len() + 32 * csv.lines().count());
    for (k, line) in csv.lines().enumerate() {
        if k == 0 {
            let _ = writeln!(out, "{line},fingerprint,seed");
        } else {
            let _ = writeln!(out, "{line},{fingerprint},{seed}");
        }
    }
    out
}

pub fn att_csv(rows: &[AttRow]) -> String {
    let mut out = String::from("g,t,event_time,estimate,std_error,lower,upper,status\n");
    for r in rows {
        let v = &r.value;
        let status = v.error.as_ref().map_or("ok", |e| e.code.as_str());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{status}",
            r.g,
            r.t,
            r.event_time,
            opt(v.estimate),
            opt(v.std_error),
            opt(v.lower),
            opt(v.upper)
        );
    }
    out
}

/// Identified rows only, for plotting.
pub fn event_study_csv(rows: &[EventRow]) -> String {
    let mut out = String::from("event_time,estimate,lower,upper\n");
    for r in rows.iter().filter(|r| r.value.estimate.is_some()) {
        let _ = writeln!(out, "{},{},{},{}", r.event_time, opt(r.value.estimate), opt(r.value.lower), opt(r.value.upper));
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("summary,estimate,std_error,lower,upper,status\n");
    for r in rows {
        let v = &r.value;
        let status = v.error.as_ref().map_or("ok", |e| e.code.as_str());
        let _ = writeln!(out, "{},{},{},{},{},{status}", r.summary, opt(v.estimate), opt(v.std_error), opt(v.lower), opt(v.upper));
    }
    out
}
