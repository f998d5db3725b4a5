//! Trace consumption: turn raw execution events into labeled training rows.
//!
//! A trace is a flat stream of four event kinds: a basic block executed, a
//! call site was reached with concrete argument values, a library function
//! was entered, a library function returned. The profiler replays the stream
//! once, keeping one feature vector per planned site alive the whole time.
//! Watched blocks overwrite their slot with their block id as they execute;
//! a site event stamps the argument values; the library functions entered
//! before the call unwinds become the chain, and the chain is interned into
//! a dense label. One training record is emitted per site event.
//!
//! Chains come in two flavors. The default keeps the set of distinct
//! functions in first-entry order, matching a runtime that loads a set. The
//! sequence flavor keeps every entry in order, for the stricter mode where
//! repeats matter. The two flavors use separate label spaces.

use crate::ir::{BlockId, FnId, SiteId};
use crate::plan::FeatureLayout;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io;
use thiserror::Error;

/// One trace event. The JSONL form is pinned: `{"ev":"bb","fn":0,"bb":2}`,
/// `{"ev":"site","site":3,"args":[1.5]}`, `{"ev":"enter","fn":9}`,
/// `{"ev":"exit","fn":9}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ev")]
pub enum TraceEvent {
    #[serde(rename = "bb")]
    BlockExec {
        #[serde(rename = "fn")]
        function: FnId,
        bb: BlockId,
    },
    #[serde(rename = "site")]
    SiteReached { site: SiteId, args: Vec<f64> },
    #[serde(rename = "enter")]
    LibEnter {
        #[serde(rename = "fn")]
        function: FnId,
    },
    #[serde(rename = "exit")]
    LibExit {
        #[serde(rename = "fn")]
        function: FnId,
    },
}

pub fn write_trace<W: io::Write>(w: &mut W, events: &[TraceEvent]) -> io::Result<()> {
    for ev in events {
        serde_json::to_writer(&mut *w, ev)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Error)]
#[error("trace line {line}: {source}")]
pub struct TraceParseError {
    pub line: usize,
    #[source]
    pub source: serde_json::Error,
}

pub fn read_trace<R: io::BufRead>(r: R) -> Result<Vec<TraceEvent>, io::Error> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = serde_json::from_str(&line)
            .map_err(|source| io::Error::other(TraceParseError { line: i + 1, source }))?;
        out.push(ev);
    }
    Ok(out)
}

/// How a dynamic call window is reduced to a chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainMode {
    /// Distinct functions in first-entry order.
    Set,
    /// Every entry in order, repeats kept.
    Sequence,
}

/// Bijection between chain labels and chains. Label 0 is the empty chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ChainTableRepr", into = "ChainTableRepr")]
pub struct ChainTable {
    chains: Vec<Vec<FnId>>,
    index: BTreeMap<Vec<FnId>, u32>,
}

#[derive(Serialize, Deserialize)]
struct ChainTableRepr {
    chains: Vec<Vec<FnId>>,
}

impl From<ChainTableRepr> for ChainTable {
    fn from(repr: ChainTableRepr) -> Self {
        let index = repr
            .chains
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i as u32))
            .collect();
        ChainTable {
            chains: repr.chains,
            index,
        }
    }
}

impl From<ChainTable> for ChainTableRepr {
    fn from(t: ChainTable) -> Self {
        ChainTableRepr { chains: t.chains }
    }
}

impl Default for ChainTable {
    fn default() -> Self {
        Self::new()
    }
}

impl ChainTable {
    pub fn new() -> Self {
        ChainTable {
            chains: vec![Vec::new()],
            index: [(Vec::new(), 0)].into(),
        }
    }

    /// Label for `chain`, allocating the next label on first sight.
    pub fn intern(&mut self, chain: &[FnId]) -> u32 {
        if let Some(l) = self.index.get(chain) {
            return *l;
        }
        let label = self.chains.len() as u32;
        self.chains.push(chain.to_vec());
        self.index.insert(chain.to_vec(), label);
        label
    }

    pub fn chain(&self, label: u32) -> Option<&[FnId]> {
        self.chains.get(label as usize).map(Vec::as_slice)
    }

    pub fn label_of(&self, chain: &[FnId]) -> Option<u32> {
        self.index.get(chain).copied()
    }

    pub fn len(&self) -> usize {
        self.chains.len()
    }

    pub fn is_empty(&self) -> bool {
        // The empty chain is always present.
        false
    }

    pub fn labels(&self) -> impl Iterator<Item = (u32, &[FnId])> {
        self.chains
            .iter()
            .enumerate()
            .map(|(i, c)| (i as u32, c.as_slice()))
    }

    /// Every function appearing in any chain.
    pub fn functions(&self) -> std::collections::BTreeSet<FnId> {
        self.chains.iter().flatten().copied().collect()
    }
}

/// One training row: the feature snapshot taken at a site event and the
/// label of the chain that followed. `features[0]` is the site id; the
/// vector has the site's own width, not the global one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub site: SiteId,
    pub features: Vec<f64>,
    pub label: u32,
}

/// Everything one profiling pass produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub mode: ChainMode,
    pub records: Vec<ProfileRecord>,
    pub chains: ChainTable,
}

impl Profile {
    /// Sites that contributed at least one record.
    pub fn trained_sites(&self) -> std::collections::BTreeSet<SiteId> {
        self.records.iter().map(|r| r.site).collect()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("event {index}: exit from {function} does not match any open call")]
    UnmatchedExit { index: usize, function: FnId },
    #[error("event {index}: site {site} has no instrumentation plan")]
    UnknownSite { index: usize, site: SiteId },
    #[error("event {index}: site {site} expected {expected} argument values, got {got}")]
    ArityMismatch {
        index: usize,
        site: SiteId,
        expected: usize,
        got: usize,
    },
    #[error("event {index}: site {site} is not followed by a library call")]
    SiteWithoutCall { index: usize, site: SiteId },
    #[error("event {index}: site {site} reached inside an open library call")]
    NestedSite { index: usize, site: SiteId },
    #[error("event {index}: library {function} entered with no preceding site event")]
    MissingSite { index: usize, function: FnId },
    #[error("event {index}: library call never returned before the trace ended")]
    UnclosedCall { index: usize },
}

/// One dynamic library call being unwound.
struct OpenCall {
    site: SiteId,
    features: Vec<f64>,
    enter_index: usize,
    stack: Vec<FnId>,
    set_chain: Vec<FnId>,
    seq_chain: Vec<FnId>,
}

impl OpenCall {
    fn note(&mut self, f: FnId) {
        self.stack.push(f);
        self.seq_chain.push(f);
        if !self.set_chain.contains(&f) {
            self.set_chain.push(f);
        }
    }
}

/// Replays `events` once against the plan layout and emits one record per
/// site event. Feature slots persist across the whole trace: a watched block
/// holds its id in the slot until another watcher of the same slot runs.
pub fn build_profile(
    events: &[TraceEvent],
    layout: &FeatureLayout,
    mode: ChainMode,
) -> Result<Profile, ProfileError> {
    let mut slots: BTreeMap<SiteId, Vec<f64>> = layout
        .sites()
        .map(|s| {
            let mut v = vec![0.0; layout.site_width(s).expect("listed site")];
            v[0] = s.0 as f64;
            (s, v)
        })
        .collect();

    let mut chains = ChainTable::new();
    let mut records = Vec::new();
    let mut pending: Option<(SiteId, usize)> = None;
    let mut open: Option<OpenCall> = None;

    for (i, ev) in events.iter().enumerate() {
        match ev {
            TraceEvent::BlockExec { function, bb } => {
                if let Some((site, at)) = pending {
                    return Err(ProfileError::SiteWithoutCall { index: at, site });
                }
                for (site, slot) in layout.watchers(*function, *bb) {
                    slots.get_mut(site).expect("planned site")[*slot] = bb.0 as f64;
                }
            }
            TraceEvent::SiteReached { site, args } => {
                if open.is_some() {
                    return Err(ProfileError::NestedSite {
                        index: i,
                        site: *site,
                    });
                }
                if let Some((prev, at)) = pending {
                    return Err(ProfileError::SiteWithoutCall {
                        index: at,
                        site: prev,
                    });
                }
                let Some(arity) = layout.arity(*site) else {
                    return Err(ProfileError::UnknownSite {
                        index: i,
                        site: *site,
                    });
                };
                if args.len() != arity {
                    return Err(ProfileError::ArityMismatch {
                        index: i,
                        site: *site,
                        expected: arity,
                        got: args.len(),
                    });
                }
                let v = slots.get_mut(site).expect("planned site");
                for (k, slot) in layout.value_slots(*site).iter().enumerate() {
                    v[*slot] = args[k];
                }
                pending = Some((*site, i));
            }
            TraceEvent::LibEnter { function } => match &mut open {
                Some(oc) => oc.note(*function),
                None => {
                    let Some((site, _)) = pending.take() else {
                        return Err(ProfileError::MissingSite {
                            index: i,
                            function: *function,
                        });
                    };
                    let mut oc = OpenCall {
                        site,
                        features: slots[&site].clone(),
                        enter_index: i,
                        stack: Vec::new(),
                        set_chain: Vec::new(),
                        seq_chain: Vec::new(),
                    };
                    oc.note(*function);
                    open = Some(oc);
                }
            },
            TraceEvent::LibExit { function } => {
                let Some(oc) = &mut open else {
                    return Err(ProfileError::UnmatchedExit {
                        index: i,
                        function: *function,
                    });
                };
                if oc.stack.pop() != Some(*function) {
                    return Err(ProfileError::UnmatchedExit {
                        index: i,
                        function: *function,
                    });
                }
                if oc.stack.is_empty() {
                    let oc = open.take().expect("just matched");
                    let chain = match mode {
                        ChainMode::Set => &oc.set_chain,
                        ChainMode::Sequence => &oc.seq_chain,
                    };
                    let label = chains.intern(chain);
                    records.push(ProfileRecord {
                        site: oc.site,
                        features: oc.features,
                        label,
                    });
                }
            }
        }
    }
    if let Some((site, at)) = pending {
        return Err(ProfileError::SiteWithoutCall { index: at, site });
    }
    if let Some(oc) = open {
        return Err(ProfileError::UnclosedCall {
            index: oc.enter_index,
        });
    }
    Ok(Profile {
        mode,
        records,
        chains,
    })
}

/// Chain table plus the context the simulator needs alongside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainFile {
    pub mode: ChainMode,
    pub chains: ChainTable,
    pub trained_sites: Vec<SiteId>,
}

impl ChainFile {
    pub fn from_profile(p: &Profile) -> Self {
        ChainFile {
            mode: p.mode,
            chains: p.chains.clone(),
            trained_sites: p.trained_sites().into_iter().collect(),
        }
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("chain serialization");
        s.push('\n');
        s
    }

    pub fn from_json_str(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Prints a float so that parsing it back yields the identical value.
fn fmt_num(x: f64) -> String {
    format!("{x}")
}

/// Writes records as one uniform table. Vectors shorter than `width` are
/// padded with zeros; the site id occupies the dedicated first column and is
/// not repeated among the feature columns.
pub fn write_csv<W: io::Write>(
    w: &mut W,
    records: &[ProfileRecord],
    width: usize,
) -> io::Result<()> {
    let mut header = String::from("site");
    for i in 0..width.saturating_sub(1) {
        header.push_str(&format!(",f{i}"));
    }
    header.push_str(",label\n");
    w.write_all(header.as_bytes())?;
    for r in records {
        let mut row = format!("{}", r.site.0);
        for i in 1..width {
            let x = r.features.get(i).copied().unwrap_or(0.0);
            row.push(',');
            row.push_str(&fmt_num(x));
        }
        row.push_str(&format!(",{}\n", r.label));
        w.write_all(row.as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Error, PartialEq)]
pub enum CsvError {
    #[error("line {line}: expected {expected} columns, got {got}")]
    ColumnCount {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: {what} does not parse: {text}")]
    BadNumber {
        line: usize,
        what: &'static str,
        text: String,
    },
    #[error("header must be site,f0,...,label; got {0}")]
    BadHeader(String),
}

/// Reads a table written by [`write_csv`]. Every returned record has the
/// uniform padded width, site id included as feature 0.
pub fn read_csv(text: &str) -> Result<Vec<ProfileRecord>, CsvError> {
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(CsvError::BadHeader(String::new()));
    };
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"site") || cols.last() != Some(&"label") {
        return Err(CsvError::BadHeader(header.to_string()));
    }
    let expected = cols.len();
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected {
            return Err(CsvError::ColumnCount {
                line: i + 1,
                expected,
                got: fields.len(),
            });
        }
        let site: u32 = fields[0].parse().map_err(|_| CsvError::BadNumber {
            line: i + 1,
            what: "site id",
            text: fields[0].to_string(),
        })?;
        let label: u32 = fields[expected - 1].parse().map_err(|_| CsvError::BadNumber {
            line: i + 1,
            what: "label",
            text: fields[expected - 1].to_string(),
        })?;
        let mut features = Vec::with_capacity(expected - 1);
        features.push(site as f64);
        for fld in &fields[1..expected - 1] {
            features.push(fld.parse().map_err(|_| CsvError::BadNumber {
                line: i + 1,
                what: "feature",
                text: fld.to_string(),
            })?);
        }
        out.push(ProfileRecord {
            site: SiteId(site),
            features,
            label,
        });
    }
    Ok(out)
}
