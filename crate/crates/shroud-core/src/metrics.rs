//! Attack-surface arithmetic over simulation results.
//!
//! Three reductions, all pure functions of program metadata and the
//! simulator's event log. Function exposure: out of everything the libraries
//! ship, only the permanently loaded functions plus the deepest dynamic
//! chain were ever mapped at once. Gadget exposure: the same idea weighted
//! by per-function gadget counts, taking the loaded set at the moment its
//! gadget sum peaked. CVE exposure: how many functions from a supplied
//! list of known-vulnerable names were actually reachable while loaded.
//!
//! [`exposure_from_log`] and [`accuracy_from_log`] recount the simulator's
//! own numbers from nothing but the event log, so the two paths can be
//! checked against each other.

use crate::ir::{FnId, Program, SiteId};
use crate::sim::{MispredictKind, SimEvent, SimulationReport};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("program has no library functions to measure")]
    NoLibraryFunctions,
    #[error("exposed count {exposed} exceeds the library total {total}")]
    ExposedExceedsTotal { exposed: usize, total: usize },
    #[error("the CVE function list is empty")]
    EmptyCveList,
}

/// Functions mapped in the worst case: permanently loaded ones plus the
/// deepest dynamic chain.
pub fn compute_exposed(p_count: usize, s_count: usize, c_max: usize) -> usize {
    p_count + s_count + c_max
}

/// Percentage of library functions never exposed.
pub fn compute_reduction(total: usize, exposed: usize) -> Result<f64, MetricsError> {
    if total == 0 {
        return Err(MetricsError::NoLibraryFunctions);
    }
    if exposed > total {
        return Err(MetricsError::ExposedExceedsTotal { exposed, total });
    }
    Ok(100.0 * (total - exposed) as f64 / total as f64)
}

/// A list of known-vulnerable function names, matched against programs by
/// name. Duplicates collapse; the list size is the count of distinct names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CveList(pub Vec<String>);

impl CveList {
    pub fn from_json_str(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self).expect("cve list serialization");
        s.push('\n');
        s
    }

    pub fn distinct(&self) -> BTreeSet<&str> {
        self.0.iter().map(String::as_str).collect()
    }

    /// Distinct list names carried by at least one function in `called`.
    pub fn hits(&self, p: &Program, called: &BTreeSet<FnId>) -> usize {
        let names = self.distinct();
        let called_names: BTreeSet<&str> = called
            .iter()
            .filter_map(|f| p.function(*f).map(|d| d.name.as_str()))
            .collect();
        names.intersection(&called_names).count()
    }
}

/// Returns (exposedcve, reduction percent). `hit_count` is the size of the
/// intersection between called functions and the list; the percentage is
/// taken out of the list size and floors at zero.
pub fn compute_cve_exposure(
    p_count: usize,
    s_count: usize,
    hit_count: usize,
    cve_total: usize,
) -> Result<(usize, f64), MetricsError> {
    if cve_total == 0 {
        return Err(MetricsError::EmptyCveList);
    }
    let exposedcve = p_count + s_count + hit_count;
    let pct = if exposedcve >= cve_total {
        0.0
    } else {
        100.0 * (cve_total - exposedcve) as f64 / cve_total as f64
    };
    Ok((exposedcve, pct))
}

fn library_gadget_total(p: &Program) -> u64 {
    p.library_ids()
        .iter()
        .map(|f| p.function(*f).map(|d| d.gadget_count).unwrap_or(0))
        .sum()
}

fn gadget_sum(p: &Program, set: &BTreeSet<FnId>) -> u64 {
    set.iter()
        .filter(|f| p.is_library(**f))
        .map(|f| p.function(*f).map(|d| d.gadget_count).unwrap_or(0))
        .sum()
}

/// Percentage of library gadgets never exposed, measured against the loaded
/// set at the moment its gadget sum peaked. A gadget-free library measures
/// zero: there is nothing to reduce.
pub fn compute_gadget_reduction(p: &Program, loaded_max_set: &BTreeSet<FnId>) -> f64 {
    let total = library_gadget_total(p);
    if total == 0 {
        return 0.0;
    }
    let exposed = gadget_sum(p, loaded_max_set);
    100.0 * (total - exposed.min(total)) as f64 / total as f64
}

/// The full surface picture for one benchmark run. CVE fields are present
/// only when a list was supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceMetrics {
    pub p_count: usize,
    pub s_count: usize,
    /// Deepest dynamic chain observed.
    pub c_max: usize,
    pub exposed: usize,
    pub total_functions: usize,
    pub reduction_percent: f64,
    pub exposed_gadgets: u64,
    pub total_gadgets: u64,
    pub gadget_reduction_percent: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cve_exposed: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cve_total: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cve_reduction_percent: Option<f64>,
}

pub fn compute_surface_metrics(
    p: &Program,
    report: &SimulationReport,
    cve: Option<&CveList>,
) -> Result<SurfaceMetrics, MetricsError> {
    let total_functions = p.library_ids().len();
    let exposed = compute_exposed(report.p_count, report.s_count, report.max_chain_functions);
    let reduction_percent = compute_reduction(total_functions, exposed)?;
    let worst: BTreeSet<FnId> = report.worst_case_loaded.iter().copied().collect();
    let exposed_gadgets = gadget_sum(p, &worst);
    let total_gadgets = library_gadget_total(p);
    let gadget_reduction_percent = compute_gadget_reduction(p, &worst);
    let (cve_exposed, cve_total, cve_reduction_percent) = match cve {
        Some(list) => {
            let called: BTreeSet<FnId> = report.called_functions.iter().copied().collect();
            let hits = list.hits(p, &called);
            let total = list.distinct().len();
            let (e, pct) = compute_cve_exposure(report.p_count, report.s_count, hits, total)?;
            (Some(e), Some(total), Some(pct))
        }
        None => (None, None, None),
    };
    Ok(SurfaceMetrics {
        p_count: report.p_count,
        s_count: report.s_count,
        c_max: report.max_chain_functions,
        exposed,
        total_functions,
        reduction_percent,
        exposed_gadgets,
        total_gadgets,
        gadget_reduction_percent,
        cve_exposed,
        cve_total,
        cve_reduction_percent,
    })
}

/// One benchmark row: surface metrics plus the prediction counters the
/// tables report alongside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub benchmark: String,
    pub metrics: SurfaceMetrics,
    pub accuracy_percent: f64,
    pub calls: u64,
    pub underpredictions: u64,
    pub overpredictions: u64,
    pub audits: u64,
    pub attacks_detected: u64,
    pub faults: u64,
    pub audit_latency_total_us: u64,
}

impl BenchmarkReport {
    pub fn from_simulation(
        benchmark: &str,
        p: &Program,
        report: &SimulationReport,
        cve: Option<&CveList>,
    ) -> Result<Self, MetricsError> {
        Ok(BenchmarkReport {
            benchmark: benchmark.to_string(),
            metrics: compute_surface_metrics(p, report, cve)?,
            accuracy_percent: report.total.accuracy_percent,
            calls: report.total.calls,
            underpredictions: report.total.underpredictions,
            overpredictions: report.total.overpredictions,
            audits: report.audits,
            attacks_detected: report.attacks_detected,
            faults: report.faults,
            audit_latency_total_us: report.audit_latency_total_us,
        })
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization");
        s.push('\n');
        s
    }

    pub fn from_json_str(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

pub const CSV_HEADER: &str = "benchmark,reduction,gadget_reduction,cve_reduction,accuracy";

fn fmt_num(x: f64) -> String {
    format!("{x}")
}

/// Plot-data table, one row per benchmark. A missing CVE column stays empty.
pub fn write_report_csv<W: io::Write>(w: &mut W, rows: &[BenchmarkReport]) -> io::Result<()> {
    w.write_all(CSV_HEADER.as_bytes())?;
    w.write_all(b"\n")?;
    for r in rows {
        let cve = r
            .metrics
            .cve_reduction_percent
            .map(fmt_num)
            .unwrap_or_default();
        let line = format!(
            "{},{},{},{},{}\n",
            r.benchmark,
            fmt_num(r.metrics.reduction_percent),
            fmt_num(r.metrics.gadget_reduction_percent),
            cve,
            fmt_num(r.accuracy_percent),
        );
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Exposure recounted from nothing but the event log: replays Copy and
/// Blank events and tracks the same running maxima the simulator does, one
/// sample per event, seeded with the permanent set.
#[derive(Debug, Clone, PartialEq)]
pub struct LogExposure {
    pub c_max: usize,
    pub max_exposed_functions: usize,
    pub max_exposed_gadgets: u64,
    pub worst_case_loaded: BTreeSet<FnId>,
}

pub fn exposure_from_log(
    p: &Program,
    log: &[SimEvent],
    permanent: &BTreeSet<FnId>,
) -> LogExposure {
    let mut dynamic: BTreeSet<FnId> = BTreeSet::new();
    let permanent_gadgets = gadget_sum(p, permanent);
    let mut chain_gadgets: u64 = 0;
    let mut c_max = 0usize;
    let mut max_exposed = permanent.len();
    let mut max_gadgets = permanent_gadgets;
    let mut worst: BTreeSet<FnId> = permanent.clone();
    for ev in log {
        match ev {
            SimEvent::Copy { function } => {
                if dynamic.insert(*function) {
                    chain_gadgets += p.function(*function).map(|d| d.gadget_count).unwrap_or(0);
                }
            }
            SimEvent::Blank { set } => {
                for f in set {
                    if dynamic.remove(f) {
                        chain_gadgets -= p.function(*f).map(|d| d.gadget_count).unwrap_or(0);
                    }
                }
            }
            _ => continue,
        }
        c_max = c_max.max(dynamic.len());
        max_exposed = max_exposed.max(permanent.len() + dynamic.len());
        let total = permanent_gadgets + chain_gadgets;
        if total > max_gadgets {
            max_gadgets = total;
            worst = permanent.union(&dynamic).copied().collect();
        }
    }
    LogExposure {
        c_max,
        max_exposed_functions: max_exposed,
        max_exposed_gadgets: max_gadgets,
        worst_case_loaded: worst,
    }
}

/// Per-site window counts recounted from the event log. Windows are spans
/// between Predict events; a window with any underprediction counts as
/// under, otherwise any overprediction counts as over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WindowCounts {
    pub calls: u64,
    pub underpredictions: u64,
    pub overpredictions: u64,
}

pub fn accuracy_from_log(log: &[SimEvent]) -> BTreeMap<SiteId, WindowCounts> {
    let mut out: BTreeMap<SiteId, WindowCounts> = BTreeMap::new();
    let mut current: Option<(SiteId, bool, bool)> = None;
    let close = |out: &mut BTreeMap<SiteId, WindowCounts>,
                 w: Option<(SiteId, bool, bool)>| {
        if let Some((site, under, over)) = w {
            let c = out.entry(site).or_default();
            c.calls += 1;
            if under {
                c.underpredictions += 1;
            } else if over {
                c.overpredictions += 1;
            }
        }
    };
    for ev in log {
        match ev {
            SimEvent::Predict { site, .. } => {
                close(&mut out, current.take());
                current = Some((*site, false, false));
            }
            SimEvent::Mispredict { kind, .. } => {
                if let Some((_, under, over)) = &mut current {
                    match kind {
                        MispredictKind::Under => *under = true,
                        MispredictKind::OverAtExit => *over = true,
                    }
                }
            }
            _ => {}
        }
    }
    close(&mut out, current.take());
    out
}
