//! Loader simulator: replays a trace through the blanking state machine.
//!
//! Every library function body starts blanked. A site event is a prediction
//! probe: the feature vector built from watched blocks and argument values is
//! fed to the decision tree, the previous chain is blanked, and the predicted
//! chain is copied back in. Entering a function that is not loaded is an
//! underprediction: the runtime audits it against a clean-replay ground truth
//! and copies the function so execution continues. Predicted functions that
//! never run are overprediction exposure, detected at the outermost return.
//!
//! Two policy axes. Lazy blanking keeps the current chain mapped until the
//! next probe and skips re-blanking when the prediction repeats. Full-chain
//! mode treats the label as a call sequence and keeps exactly one element of
//! it unblanked at a time, stepping on every entry.
//!
//! The simulator is deterministic: same inputs, byte-identical event log and
//! report. Audits run synchronously but their latency is accounted
//! separately, as a constant supplied by the scenario.

use crate::callgraph::reachable_library_functions;
use crate::ir::{FnId, Program, SiteId};
use crate::plan::{FeatureLayout, ProgramPlan};
use crate::profile::{ChainFile, ChainMode, TraceEvent};
use crate::tree::{DecisionTreeModel, Prediction};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io;
use thiserror::Error;

/// Whether a predicted label names a set of functions loaded at once or a
/// sequence stepped through one element at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    Set,
    FullChain,
}

/// Knobs fixed for one simulation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub mode: SimMode,
    pub lazy_blanking: bool,
}

/// Everything the loader knows at one instant.
///
/// `dynamic` is the blanking-managed part of the loaded set; `permanent`
/// holds library functions that are never blanked, either because they are
/// too small to instrument or because blanking them is unsafe. The full
/// loaded set is the union.
#[derive(Debug, Clone, PartialEq)]
pub struct LoaderState {
    permanent: BTreeSet<FnId>,
    dynamic: BTreeSet<FnId>,
    library: BTreeSet<FnId>,
    pub last_predicted_label: Option<u32>,
    pub current_site: Option<SiteId>,
    pub mode: SimMode,
    pub lazy_blanking: bool,
}

impl LoaderState {
    fn new(p: &Program, policy: Policy) -> Self {
        let mut permanent = BTreeSet::new();
        for f in p.functions().values() {
            if f.is_library && (!f.instrumentable || !f.blankable) {
                permanent.insert(f.id);
            }
        }
        LoaderState {
            permanent,
            dynamic: BTreeSet::new(),
            library: p.library_ids().clone(),
            last_predicted_label: Some(0),
            current_site: None,
            mode: policy.mode,
            lazy_blanking: policy.lazy_blanking,
        }
    }

    pub fn is_loaded(&self, f: FnId) -> bool {
        self.permanent.contains(&f) || self.dynamic.contains(&f)
    }

    /// Currently unblanked library functions, permanent ones included.
    pub fn loaded(&self) -> BTreeSet<FnId> {
        self.permanent.union(&self.dynamic).copied().collect()
    }

    pub fn permanent(&self) -> &BTreeSet<FnId> {
        &self.permanent
    }

    pub fn dynamic(&self) -> &BTreeSet<FnId> {
        &self.dynamic
    }

    pub fn library(&self) -> &BTreeSet<FnId> {
        &self.library
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MispredictKind {
    Under,
    OverAtExit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Legal,
    Attack,
    Unknown,
}

/// One entry in the simulator's derived log. `Predict` marks every probe,
/// including ones that skip blanking; `label` is absent when the site was
/// never seen in training and the conservative fallback chain was used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "lowercase")]
pub enum SimEvent {
    Predict {
        site: SiteId,
        label: Option<u32>,
    },
    Copy {
        #[serde(rename = "fn")]
        function: FnId,
    },
    Blank {
        set: Vec<FnId>,
    },
    Hit {
        #[serde(rename = "fn")]
        function: FnId,
    },
    Mispredict {
        #[serde(rename = "fn")]
        function: FnId,
        site: SiteId,
        kind: MispredictKind,
    },
    Audit {
        #[serde(rename = "fn")]
        function: FnId,
        verdict: Verdict,
        latency_us: u64,
    },
    Fault {
        #[serde(rename = "fn")]
        function: FnId,
    },
}

pub fn write_sim_events<W: io::Write>(w: &mut W, events: &[SimEvent]) -> io::Result<()> {
    for ev in events {
        serde_json::to_writer(&mut *w, ev)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Ground truth for audits: what chain the library would execute given the
/// snapshot-time argument values, per entry function and argument region.
/// Regions are closed intervals per argument; the first matching entry wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    #[serde(rename = "fn")]
    pub function: FnId,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub chain: Vec<FnId>,
    /// The library violates memory safety on arguments in this region.
    #[serde(rename = "unsafe", default)]
    pub unsafe_input: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanReplayOracle {
    /// Constant audit cost reported per scenario.
    #[serde(default = "default_latency")]
    pub audit_latency_us: u64,
    pub entries: Vec<OracleEntry>,
}

fn default_latency() -> u64 {
    25
}

impl Default for CleanReplayOracle {
    fn default() -> Self {
        CleanReplayOracle {
            audit_latency_us: default_latency(),
            entries: Vec::new(),
        }
    }
}

impl CleanReplayOracle {
    pub fn lookup(&self, function: FnId, args: &[f64]) -> Option<&OracleEntry> {
        self.entries.iter().find(|e| {
            e.function == function
                && e.lo.len() == args.len()
                && e.hi.len() == args.len()
                && args
                    .iter()
                    .zip(e.lo.iter().zip(&e.hi))
                    .all(|(a, (lo, hi))| lo <= a && a <= hi)
        })
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("oracle serialization");
        s.push('\n');
        s
    }

    pub fn from_json_str(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Classifies one underprediction. `entry` is the function the dynamic call
/// entered first; `args` are the values captured at the prediction probe,
/// before any later tampering could touch them. A clean replay that matches
/// what actually ran means the model was simply wrong; a replay that matches
/// the prediction instead, or flags the arguments as memory-unsafe, means
/// execution was steered after the snapshot.
pub fn audit_verdict(
    oracle: &CleanReplayOracle,
    entry: FnId,
    args: &[f64],
    observed: &[FnId],
    predicted: &[FnId],
) -> Verdict {
    let Some(e) = oracle.lookup(entry, args) else {
        return Verdict::Unknown;
    };
    if e.unsafe_input {
        return Verdict::Attack;
    }
    if e.chain == observed {
        return Verdict::Legal;
    }
    if e.chain == predicted {
        return Verdict::Attack;
    }
    // Replay matches neither side: still not explainable as a plain
    // misprediction, so treat it as hostile.
    Verdict::Attack
}

/// Attacker-chosen jump: landing in blanked bytes faults, landing in loaded
/// code is residual exposure. Non-library targets are never blanked.
pub fn inject_attack_jump(state: &LoaderState, target: FnId) -> SimEvent {
    if state.library.contains(&target) && !state.is_loaded(target) {
        SimEvent::Fault { function: target }
    } else {
        SimEvent::Hit { function: target }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("{policy:?} policy needs chains recorded in {required:?} mode")]
    ModeMismatch { policy: SimMode, required: ChainMode },
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
    #[error("event {index}: {function} entered but is not a known library function")]
    NotALibrary { index: usize, function: FnId },
    #[error("event {index}: predicted label {label} is absent from the chain table")]
    UnknownLabel { index: usize, label: u32 },
}

/// Per-site or aggregate call counts. A call is one prediction window; it is
/// a hit only if nothing was underpredicted and nothing loaded went unused.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct CallStats {
    pub calls: u64,
    pub hits: u64,
    pub underpredictions: u64,
    pub overpredictions: u64,
    pub accuracy_percent: f64,
}

impl CallStats {
    fn finish(calls: u64, under: u64, over: u64) -> Self {
        let mis = under + over;
        let accuracy_percent = if calls == 0 {
            100.0
        } else {
            100.0 * (calls - mis) as f64 / calls as f64
        };
        CallStats {
            calls,
            hits: calls - mis,
            underpredictions: under,
            overpredictions: over,
            accuracy_percent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRow {
    pub site: SiteId,
    #[serde(flatten)]
    pub stats: CallStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub mode: SimMode,
    pub lazy_blanking: bool,
    pub total: CallStats,
    pub per_site: Vec<SiteRow>,
    /// Library functions too small or unsafe to instrument.
    pub p_count: usize,
    /// Instrumentable library functions that must never be blanked.
    pub s_count: usize,
    /// Running maximum of |loaded|, permanent functions included.
    pub max_exposed_functions: usize,
    /// Running maximum of the blanking-managed part alone.
    pub max_chain_functions: usize,
    pub max_exposed_gadgets: u64,
    /// The loaded set at the moment the gadget sum peaked.
    pub worst_case_loaded: Vec<FnId>,
    /// Every library function the trace actually entered.
    pub called_functions: Vec<FnId>,
    pub faults: u64,
    pub attacks_detected: u64,
    pub legal_audits: u64,
    pub unknown_audits: u64,
    pub audits: u64,
    pub audit_latency_total_us: u64,
}

impl SimulationReport {
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization");
        s.push('\n');
        s
    }

    pub fn from_json_str(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub report: SimulationReport,
    pub log: Vec<SimEvent>,
}

#[derive(Default)]
struct Counts {
    calls: u64,
    under: u64,
    over: u64,
}

struct PendingProbe {
    site: SiteId,
    index: usize,
    args: Vec<f64>,
}

/// One dynamic library call being unwound.
struct Window {
    site: SiteId,
    args: Vec<f64>,
    enter_index: usize,
    stack: Vec<FnId>,
    set_chain: Vec<FnId>,
    entered: BTreeSet<FnId>,
    unders: Vec<FnId>,
}

/// Streaming simulator. [`simulate`] drives it over a whole trace; tests and
/// attack sweeps step it event by event and inspect [`Simulator::state`]
/// in between.
pub struct Simulator<'a> {
    p: &'a Program,
    layout: FeatureLayout,
    callee_of: BTreeMap<SiteId, FnId>,
    model: &'a DecisionTreeModel,
    chains: &'a ChainFile,
    oracle: &'a CleanReplayOracle,
    trained: BTreeSet<SiteId>,
    state: LoaderState,
    slots: BTreeMap<SiteId, Vec<f64>>,
    pending: Option<PendingProbe>,
    window: Option<Window>,
    predicted_chain: Vec<FnId>,
    seq_cursor: usize,
    current_elem: Option<FnId>,
    index: usize,
    log: Vec<SimEvent>,
    site_counts: BTreeMap<SiteId, Counts>,
    called: BTreeSet<FnId>,
    max_exposed: usize,
    max_chain: usize,
    chain_gadgets: u64,
    permanent_gadgets: u64,
    max_gadgets: u64,
    worst_loaded: BTreeSet<FnId>,
    faults: u64,
    attacks: u64,
    legals: u64,
    unknowns: u64,
    latency_total: u64,
}

impl<'a> Simulator<'a> {
    pub fn new(
        p: &'a Program,
        plan: &ProgramPlan,
        model: &'a DecisionTreeModel,
        chains: &'a ChainFile,
        oracle: &'a CleanReplayOracle,
        policy: Policy,
    ) -> Result<Self, SimError> {
        let required = match policy.mode {
            SimMode::Set => ChainMode::Set,
            SimMode::FullChain => ChainMode::Sequence,
        };
        if chains.mode != required {
            return Err(SimError::ModeMismatch {
                policy: policy.mode,
                required,
            });
        }
        let layout = FeatureLayout::new(plan);
        let callee_of = plan.plans.iter().map(|sp| (sp.site, sp.callee)).collect();
        let slots = layout
            .sites()
            .map(|s| {
                let mut v = vec![0.0; layout.site_width(s).expect("listed site")];
                v[0] = s.0 as f64;
                (s, v)
            })
            .collect();
        let state = LoaderState::new(p, policy);
        let permanent_gadgets: u64 = state.permanent.iter().map(|f| gadgets_of(p, *f)).sum();
        let max_exposed = state.permanent.len();
        let worst_loaded = state.permanent.clone();
        Ok(Simulator {
            p,
            layout,
            callee_of,
            model,
            chains,
            oracle,
            trained: chains.trained_sites.iter().copied().collect(),
            state,
            slots,
            pending: None,
            window: None,
            predicted_chain: Vec::new(),
            seq_cursor: 0,
            current_elem: None,
            index: 0,
            log: Vec::new(),
            site_counts: BTreeMap::new(),
            called: BTreeSet::new(),
            max_exposed,
            max_chain: 0,
            chain_gadgets: 0,
            permanent_gadgets,
            max_gadgets: permanent_gadgets,
            worst_loaded,
            faults: 0,
            attacks: 0,
            legals: 0,
            unknowns: 0,
            latency_total: 0,
        })
    }

    pub fn state(&self) -> &LoaderState {
        &self.state
    }

    pub fn log(&self) -> &[SimEvent] {
        &self.log
    }

    /// Records an attacker jump to `target` against the current state.
    pub fn inject_attack_jump(&mut self, target: FnId) -> SimEvent {
        let ev = inject_attack_jump(&self.state, target);
        if matches!(ev, SimEvent::Fault { .. }) {
            self.faults += 1;
        }
        self.log.push(ev.clone());
        ev
    }

    fn note_exposure(&mut self) {
        let dyn_len = self.state.dynamic.len();
        self.max_chain = self.max_chain.max(dyn_len);
        self.max_exposed = self.max_exposed.max(self.state.permanent.len() + dyn_len);
        let total = self.permanent_gadgets + self.chain_gadgets;
        if total > self.max_gadgets {
            self.max_gadgets = total;
            self.worst_loaded = self.state.loaded();
        }
    }

    // The three state mutators sample the exposure maxima themselves, one
    // sample per logged event, so a replay of the log reproduces the maxima
    // and the worst-case set exactly, ties included.

    fn copy_in(&mut self, f: FnId) {
        if self.state.permanent.contains(&f) || self.state.dynamic.contains(&f) {
            return;
        }
        self.log.push(SimEvent::Copy { function: f });
        self.state.dynamic.insert(f);
        self.chain_gadgets += gadgets_of(self.p, f);
        self.note_exposure();
    }

    fn blank_all_dynamic(&mut self) {
        if self.state.dynamic.is_empty() {
            return;
        }
        let set: Vec<FnId> = self.state.dynamic.iter().copied().collect();
        self.log.push(SimEvent::Blank { set });
        self.state.dynamic.clear();
        self.chain_gadgets = 0;
        self.current_elem = None;
        self.note_exposure();
    }

    fn blank_one(&mut self, f: FnId) {
        if self.state.dynamic.remove(&f) {
            self.log.push(SimEvent::Blank { set: vec![f] });
            self.chain_gadgets -= gadgets_of(self.p, f);
            self.note_exposure();
        }
    }

    /// Resolves a prediction to (label, chain). An unseen site falls back to
    /// the static chain rooted at the callee, restricted to functions that
    /// appeared in training chains.
    fn resolve(&self, site: SiteId, features: &[f64]) -> Result<(Option<u32>, Vec<FnId>), SimError> {
        match self.model.predict_checked(features, &self.trained) {
            Prediction::Label(l) => {
                let chain = self
                    .chains
                    .chains
                    .chain(l)
                    .ok_or(SimError::UnknownLabel {
                        index: self.index,
                        label: l,
                    })?
                    .to_vec();
                Ok((Some(l), chain))
            }
            Prediction::UnknownSite => {
                let callee = self.callee_of.get(&site).copied().expect("planned site");
                let reach = reachable_library_functions(self.p, &[callee].into());
                let known = self.chains.chains.functions();
                let chain: Vec<FnId> = reach
                    .functions
                    .into_iter()
                    .filter(|f| known.contains(f))
                    .collect();
                Ok((None, chain))
            }
        }
    }

    fn probe(&mut self, site: SiteId, args: &[f64]) -> Result<(), SimError> {
        let i = self.index;
        if self.window.is_some() {
            return Err(SimError::NestedSite { index: i, site });
        }
        if let Some(prev) = &self.pending {
            return Err(SimError::SiteWithoutCall {
                index: prev.index,
                site: prev.site,
            });
        }
        let Some(arity) = self.layout.arity(site) else {
            return Err(SimError::UnknownSite { index: i, site });
        };
        if args.len() != arity {
            return Err(SimError::ArityMismatch {
                index: i,
                site,
                expected: arity,
                got: args.len(),
            });
        }
        let v = self.slots.get_mut(&site).expect("planned site");
        for (k, slot) in self.layout.value_slots(site).iter().enumerate() {
            v[*slot] = args[k];
        }
        let features = self.slots[&site].clone();
        let (label, chain) = self.resolve(site, &features)?;
        self.log.push(SimEvent::Predict { site, label });
        self.site_counts.entry(site).or_default().calls += 1;

        let same = match (label, self.state.last_predicted_label) {
            (Some(a), Some(b)) => a == b,
            (None, None) => chain == self.predicted_chain,
            _ => false,
        };
        if self.state.lazy_blanking && same {
            // The chain to come is already in place; leave it mapped.
            self.seq_cursor = 0;
        } else {
            self.blank_all_dynamic();
            if self.state.mode == SimMode::Set {
                for f in &chain {
                    self.copy_in(*f);
                }
            }
            self.seq_cursor = 0;
            self.state.last_predicted_label = label;
            self.predicted_chain = chain;
        }
        self.state.current_site = Some(site);
        self.pending = Some(PendingProbe {
            site,
            index: i,
            args: args.to_vec(),
        });
        Ok(())
    }

    fn enter(&mut self, f: FnId) -> Result<(), SimError> {
        let i = self.index;
        match self.p.function(f) {
            None => return Err(SimError::NotALibrary { index: i, function: f }),
            Some(d) if !d.is_library => {
                return Err(SimError::NotALibrary { index: i, function: f })
            }
            Some(_) => {}
        }
        if self.window.is_none() {
            let Some(probe) = self.pending.take() else {
                return Err(SimError::MissingSite { index: i, function: f });
            };
            self.window = Some(Window {
                site: probe.site,
                args: probe.args,
                enter_index: i,
                stack: Vec::new(),
                set_chain: Vec::new(),
                entered: BTreeSet::new(),
                unders: Vec::new(),
            });
        }
        let site = {
            let w = self.window.as_mut().expect("just opened");
            w.stack.push(f);
            w.entered.insert(f);
            if !w.set_chain.contains(&f) {
                w.set_chain.push(f);
            }
            w.site
        };
        self.called.insert(f);

        match self.state.mode {
            SimMode::Set => {
                if self.state.is_loaded(f) {
                    self.log.push(SimEvent::Hit { function: f });
                } else {
                    self.log.push(SimEvent::Mispredict {
                        function: f,
                        site,
                        kind: MispredictKind::Under,
                    });
                    self.window.as_mut().expect("open").unders.push(f);
                    self.copy_in(f);
                }
            }
            SimMode::FullChain => {
                if self.predicted_chain.get(self.seq_cursor) == Some(&f) {
                    self.log.push(SimEvent::Hit { function: f });
                    self.seq_cursor += 1;
                } else {
                    self.log.push(SimEvent::Mispredict {
                        function: f,
                        site,
                        kind: MispredictKind::Under,
                    });
                    self.window.as_mut().expect("open").unders.push(f);
                }
                if self.current_elem != Some(f) {
                    if let Some(prev) = self.current_elem {
                        self.blank_one(prev);
                    }
                    self.copy_in(f);
                    self.current_elem = Some(f);
                }
            }
        }
        Ok(())
    }

    fn exit(&mut self, f: FnId) -> Result<(), SimError> {
        let i = self.index;
        let Some(w) = &mut self.window else {
            return Err(SimError::UnmatchedExit { index: i, function: f });
        };
        if w.stack.pop() != Some(f) {
            return Err(SimError::UnmatchedExit { index: i, function: f });
        }
        if !w.stack.is_empty() {
            return Ok(());
        }
        let w = self.window.take().expect("just matched");

        let candidates: BTreeSet<FnId> = match self.state.mode {
            SimMode::Set => self.predicted_chain.iter().copied().collect(),
            SimMode::FullChain => self.predicted_chain
                [self.seq_cursor.min(self.predicted_chain.len())..]
                .iter()
                .copied()
                .collect(),
        };
        let over: BTreeSet<FnId> = candidates
            .into_iter()
            .filter(|g| !self.state.permanent.contains(g) && !w.entered.contains(g))
            .collect();
        for g in &over {
            self.log.push(SimEvent::Mispredict {
                function: *g,
                site: w.site,
                kind: MispredictKind::OverAtExit,
            });
        }

        // Audits run once the window's chain is complete, so the observed
        // side of the comparison is the whole dynamic call.
        let entry = w.set_chain.first().copied().expect("entered at least once");
        let predicted_for_audit: Vec<FnId> = match self.state.mode {
            SimMode::Set => self.predicted_chain.clone(),
            SimMode::FullChain => {
                let mut seen = Vec::new();
                for g in &self.predicted_chain {
                    if !seen.contains(g) {
                        seen.push(*g);
                    }
                }
                seen
            }
        };
        let latency = self.oracle.audit_latency_us;
        for uf in &w.unders {
            let verdict =
                audit_verdict(self.oracle, entry, &w.args, &w.set_chain, &predicted_for_audit);
            match verdict {
                Verdict::Legal => self.legals += 1,
                Verdict::Attack => self.attacks += 1,
                Verdict::Unknown => self.unknowns += 1,
            }
            self.latency_total += latency;
            self.log.push(SimEvent::Audit {
                function: *uf,
                verdict,
                latency_us: latency,
            });
        }

        let c = self.site_counts.entry(w.site).or_default();
        if !w.unders.is_empty() {
            c.under += 1;
        } else if !over.is_empty() {
            c.over += 1;
        }

        if !self.state.lazy_blanking {
            self.blank_all_dynamic();
        }
        Ok(())
    }

    pub fn step(&mut self, ev: &TraceEvent) -> Result<(), SimError> {
        let r = match ev {
            TraceEvent::BlockExec { function, bb } => {
                if let Some(probe) = &self.pending {
                    return Err(SimError::SiteWithoutCall {
                        index: probe.index,
                        site: probe.site,
                    });
                }
                for (site, slot) in self.layout.watchers(*function, *bb) {
                    self.slots.get_mut(site).expect("planned site")[*slot] = bb.0 as f64;
                }
                Ok(())
            }
            TraceEvent::SiteReached { site, args } => self.probe(*site, args),
            TraceEvent::LibEnter { function } => self.enter(*function),
            TraceEvent::LibExit { function } => self.exit(*function),
        };
        self.index += 1;
        r
    }

    pub fn finish(self) -> Result<Simulation, SimError> {
        if let Some(probe) = &self.pending {
            return Err(SimError::SiteWithoutCall {
                index: probe.index,
                site: probe.site,
            });
        }
        if let Some(w) = &self.window {
            return Err(SimError::UnclosedCall {
                index: w.enter_index,
            });
        }
        let per_site: Vec<SiteRow> = self
            .site_counts
            .iter()
            .map(|(site, c)| SiteRow {
                site: *site,
                stats: CallStats::finish(c.calls, c.under, c.over),
            })
            .collect();
        let (tc, tu, to) = self
            .site_counts
            .values()
            .fold((0, 0, 0), |(c, u, o), x| (c + x.calls, u + x.under, o + x.over));
        let p_count = self
            .state
            .permanent
            .iter()
            .filter(|f| !self.p.function(**f).expect("known").instrumentable)
            .count();
        let s_count = self.state.permanent.len() - p_count;
        let report = SimulationReport {
            mode: self.state.mode,
            lazy_blanking: self.state.lazy_blanking,
            total: CallStats::finish(tc, tu, to),
            per_site,
            p_count,
            s_count,
            max_exposed_functions: self.max_exposed,
            max_chain_functions: self.max_chain,
            max_exposed_gadgets: self.max_gadgets,
            worst_case_loaded: self.worst_loaded.iter().copied().collect(),
            called_functions: self.called.iter().copied().collect(),
            faults: self.faults,
            attacks_detected: self.attacks,
            legal_audits: self.legals,
            unknown_audits: self.unknowns,
            audits: self.attacks + self.legals + self.unknowns,
            audit_latency_total_us: self.latency_total,
        };
        Ok(Simulation {
            report,
            log: self.log,
        })
    }
}

fn gadgets_of(p: &Program, f: FnId) -> u64 {
    p.function(f).map(|d| d.gadget_count).unwrap_or(0)
}

/// Replays a whole trace. Deterministic: identical inputs produce an
/// identical report and log.
pub fn simulate(
    p: &Program,
    plan: &ProgramPlan,
    model: &DecisionTreeModel,
    chains: &ChainFile,
    oracle: &CleanReplayOracle,
    events: &[TraceEvent],
    policy: Policy,
) -> Result<Simulation, SimError> {
    let mut sim = Simulator::new(p, plan, model, chains, oracle, policy)?;
    for ev in events {
        sim.step(ev)?;
    }
    sim.finish()
}

/// One broken rule found by [`verify_event_log`].
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantViolation {
    pub index: usize,
    pub what: String,
}

impl std::fmt::Display for InvariantViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "log event {}: {}", self.index, self.what)
    }
}

/// Replays a simulator log and checks every loader rule at every event:
/// permanent functions are never copied or blanked, blanks only remove what
/// is loaded, the dynamic set stays inside the predicted chain plus audited
/// underpredictions, full-chain mode keeps at most one dynamic function, and
/// every underprediction gets exactly one audit before the next probe.
/// Returns every violation found; an empty vector means the log is clean.
pub fn verify_event_log(
    log: &[SimEvent],
    permanent: &BTreeSet<FnId>,
    chains: &ChainFile,
    mode: SimMode,
) -> Vec<InvariantViolation> {
    let mut out = Vec::new();
    let mut dynamic: BTreeSet<FnId> = BTreeSet::new();
    // None = the probe used the fallback chain, which the log does not
    // carry, so membership cannot be checked until the next labeled probe.
    let mut allowed: Option<BTreeSet<FnId>> = Some(BTreeSet::new());
    let mut extras: BTreeSet<FnId> = BTreeSet::new();
    let mut open_unders: u64 = 0;
    let mut audits_seen: u64 = 0;
    // A probe is one atomic transition: Predict, then the Blank and Copy
    // events that install the new chain. The membership rule binds between
    // probes, so it is suspended until that run of events ends.
    let mut in_probe: bool = false;
    let violate = |out: &mut Vec<InvariantViolation>, i: usize, what: String| {
        out.push(InvariantViolation { index: i, what });
    };

    for (i, ev) in log.iter().enumerate() {
        match ev {
            SimEvent::Predict { label, .. } => {
                if open_unders != audits_seen {
                    violate(
                        &mut out,
                        i,
                        format!(
                            "window closed with {open_unders} underpredictions but {audits_seen} audits"
                        ),
                    );
                }
                open_unders = 0;
                audits_seen = 0;
                in_probe = true;
                allowed = match label {
                    Some(l) => match chains.chains.chain(*l) {
                        Some(c) => Some(c.iter().copied().collect()),
                        None => {
                            violate(&mut out, i, format!("predicted label {l} not in table"));
                            None
                        }
                    },
                    None => None,
                };
            }
            SimEvent::Copy { function } => {
                if permanent.contains(function) {
                    violate(&mut out, i, format!("copy of permanent {function}"));
                }
                dynamic.insert(*function);
            }
            SimEvent::Blank { set } => {
                for f in set {
                    if permanent.contains(f) {
                        violate(&mut out, i, format!("blank of permanent {f}"));
                    }
                    if !dynamic.remove(f) {
                        violate(&mut out, i, format!("blank of unloaded {f}"));
                    }
                    extras.remove(f);
                }
            }
            SimEvent::Mispredict { function, kind, .. } => {
                in_probe = false;
                if *kind == MispredictKind::Under {
                    open_unders += 1;
                    extras.insert(*function);
                }
            }
            SimEvent::Audit { .. } => {
                in_probe = false;
                audits_seen += 1;
                if audits_seen > open_unders {
                    violate(&mut out, i, "audit without a matching underprediction".into());
                }
            }
            SimEvent::Hit { .. } | SimEvent::Fault { .. } => in_probe = false,
        }
        if mode == SimMode::FullChain && dynamic.len() > 1 {
            violate(
                &mut out,
                i,
                format!("{} dynamic functions loaded in full-chain mode", dynamic.len()),
            );
        }
        if !in_probe {
            if let Some(chain) = &allowed {
                if let Some(f) =
                    dynamic.iter().find(|f| !chain.contains(f) && !extras.contains(f))
                {
                    violate(
                        &mut out,
                        i,
                        format!("{f} loaded outside the predicted chain and audited extras"),
                    );
                }
            }
        }
    }
    if open_unders != audits_seen {
        violate(
            &mut out,
            log.len(),
            format!("log ended with {open_unders} underpredictions but {audits_seen} audits"),
        );
    }
    if let Some(chain) = &allowed {
        if let Some(f) = dynamic.iter().find(|f| !chain.contains(f) && !extras.contains(f)) {
            violate(
                &mut out,
                log.len(),
                format!("{f} loaded outside the predicted chain at the end of the log"),
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{block, function, ConstValue, Instruction, Program, ValueRef};
    use crate::plan::plan_program;
    use crate::profile::build_profile;
    use crate::tree::train_tree;

    fn fid(n: u32) -> FnId {
        FnId(n)
    }

    /// App with two constant-argument sites: site 0 calls malloc_like(9),
    /// site 1 calls free_like(5). Library 9 may nest into 7.
    fn two_site_program() -> Program {
        let app = function(
            0,
            "main",
            false,
            0,
            vec![block(
                0,
                &[],
                vec![
                    Instruction::Call {
                        site: SiteId(0),
                        callee: FnId(9),
                        args: vec![ValueRef::Const(ConstValue::Int(1))],
                    },
                    Instruction::Call {
                        site: SiteId(1),
                        callee: FnId(5),
                        args: vec![ValueRef::Const(ConstValue::Int(2))],
                    },
                ],
            )],
        );
        let lib9 = function(
            9,
            "malloc_like",
            true,
            0,
            vec![block(
                0,
                &[],
                vec![Instruction::Call {
                    site: SiteId(7),
                    callee: FnId(7),
                    args: vec![],
                }],
            )],
        );
        let lib7 = function(7, "mmap_like", true, 0, vec![block(0, &[], vec![])]);
        let lib5 = function(5, "free_like", true, 0, vec![block(0, &[], vec![])]);
        Program::from_functions(vec![app, lib9, lib7, lib5]).unwrap()
    }

    fn site(s: u32, args: &[f64]) -> TraceEvent {
        TraceEvent::SiteReached {
            site: SiteId(s),
            args: args.to_vec(),
        }
    }
    fn enter(f: u32) -> TraceEvent {
        TraceEvent::LibEnter { function: FnId(f) }
    }
    fn exit(f: u32) -> TraceEvent {
        TraceEvent::LibExit { function: FnId(f) }
    }

    struct Fixture {
        p: Program,
        plan: ProgramPlan,
        model: DecisionTreeModel,
        chains: ChainFile,
    }

    /// Trains on `train_events` so the model reproduces those chains exactly.
    fn fixture(p: Program, train_events: &[TraceEvent], mode: ChainMode) -> Fixture {
        let plan = plan_program(&p).unwrap();
        let layout = FeatureLayout::new(&plan);
        let profile = build_profile(train_events, &layout, mode).unwrap();
        let model = train_tree(&profile.records, 10).unwrap();
        let chains = ChainFile::from_profile(&profile);
        Fixture {
            p,
            plan,
            model,
            chains,
        }
    }

    fn run(
        fx: &Fixture,
        events: &[TraceEvent],
        oracle: &CleanReplayOracle,
        mode: SimMode,
        lazy: bool,
    ) -> Simulation {
        simulate(
            &fx.p,
            &fx.plan,
            &fx.model,
            &fx.chains,
            oracle,
            events,
            Policy {
                mode,
                lazy_blanking: lazy,
            },
        )
        .unwrap()
    }

    /// malloc-chain then free: correct predictions blank the first chain and
    /// copy the second, with no mispredictions and peak exposure of two.
    #[test]
    fn chain_swap_blanks_then_copies() {
        let events = vec![
            site(0, &[1.0]),
            enter(9),
            enter(7),
            exit(7),
            exit(9),
            site(1, &[2.0]),
            enter(5),
            exit(5),
        ];
        let fx = fixture(two_site_program(), &events, ChainMode::Set);
        let sim = run(&fx, &events, &CleanReplayOracle::default(), SimMode::Set, true);
        assert_eq!(
            sim.log,
            vec![
                SimEvent::Predict {
                    site: SiteId(0),
                    label: Some(1)
                },
                SimEvent::Copy { function: fid(9) },
                SimEvent::Copy { function: fid(7) },
                SimEvent::Hit { function: fid(9) },
                SimEvent::Hit { function: fid(7) },
                SimEvent::Predict {
                    site: SiteId(1),
                    label: Some(2)
                },
                SimEvent::Blank {
                    set: vec![fid(7), fid(9)]
                },
                SimEvent::Copy { function: fid(5) },
                SimEvent::Hit { function: fid(5) },
            ]
        );
        assert_eq!(sim.report.total.calls, 2);
        assert_eq!(sim.report.total.hits, 2);
        assert_eq!(sim.report.total.underpredictions, 0);
        assert_eq!(sim.report.total.overpredictions, 0);
        assert_eq!(sim.report.total.accuracy_percent, 100.0);
        assert_eq!(sim.report.max_exposed_functions, 2);
        assert_eq!(sim.report.max_chain_functions, 2);
        assert_eq!(sim.report.p_count + sim.report.s_count, 0);
        assert_eq!(sim.report.called_functions, vec![fid(5), fid(7), fid(9)]);
    }

    /// Identical consecutive predictions with lazy blanking leave the chain
    /// in place: no Blank event between the two windows.
    #[test]
    fn lazy_blanking_skips_identical_prediction() {
        let window = vec![site(0, &[1.0]), enter(9), enter(7), exit(7), exit(9)];
        let mut events = window.clone();
        events.extend(window.clone());
        let fx = fixture(two_site_program(), &events, ChainMode::Set);

        let lazy = run(&fx, &events, &CleanReplayOracle::default(), SimMode::Set, true);
        assert!(
            !lazy.log.iter().any(|e| matches!(e, SimEvent::Blank { .. })),
            "{:?}",
            lazy.log
        );
        let copies = lazy
            .log
            .iter()
            .filter(|e| matches!(e, SimEvent::Copy { .. }))
            .count();
        assert_eq!(copies, 2, "second window reuses the loaded chain");

        let eager = run(&fx, &events, &CleanReplayOracle::default(), SimMode::Set, false);
        let blanks = eager
            .log
            .iter()
            .filter(|e| matches!(e, SimEvent::Blank { .. }))
            .count();
        assert_eq!(blanks, 2, "eager mode blanks at each outermost exit");
    }

    /// A function outside the predicted set is an underprediction: audit,
    /// then copy-back so execution continues. The clean replay agrees with
    /// what ran, so the verdict is Legal, and the extra function stays loaded
    /// into the next identical window without tripping the invariant check.
    #[test]
    fn underprediction_audits_legal_and_joins_chain() {
        let train = vec![site(0, &[1.0]), enter(9), exit(9)];
        let fx = fixture(two_site_program(), &train, ChainMode::Set);
        let oracle = CleanReplayOracle {
            audit_latency_us: 40,
            entries: vec![OracleEntry {
                function: fid(9),
                lo: vec![1.0],
                hi: vec![1.0],
                chain: vec![fid(9), fid(7)],
                unsafe_input: false,
            }],
        };
        let events = vec![
            site(0, &[1.0]),
            enter(9),
            enter(7),
            exit(7),
            exit(9),
            site(0, &[1.0]),
            enter(9),
            enter(7),
            exit(7),
            exit(9),
        ];
        let sim = run(&fx, &events, &oracle, SimMode::Set, true);
        assert_eq!(
            sim.log[..6],
            vec![
                SimEvent::Predict {
                    site: SiteId(0),
                    label: Some(1)
                },
                SimEvent::Copy { function: fid(9) },
                SimEvent::Hit { function: fid(9) },
                SimEvent::Mispredict {
                    function: fid(7),
                    site: SiteId(0),
                    kind: MispredictKind::Under
                },
                SimEvent::Copy { function: fid(7) },
                SimEvent::Audit {
                    function: fid(7),
                    verdict: Verdict::Legal,
                    latency_us: 40
                },
            ]
        );
        // Second window: same label, lazy; 7 is still loaded, so its entry
        // is a Hit even though the model never predicted it.
        assert_eq!(sim.report.total.calls, 2);
        assert_eq!(sim.report.total.underpredictions, 1);
        assert_eq!(sim.report.total.hits, 1);
        assert_eq!(sim.report.legal_audits, 1);
        assert_eq!(sim.report.audit_latency_total_us, 40);
        let violations =
            verify_event_log(&sim.log, &BTreeSet::new(), &fx.chains, SimMode::Set);
        assert!(violations.is_empty(), "{violations:?}");
    }

    /// Clean replay matching the prediction but not the observed chain means
    /// the arguments were tampered with after the snapshot.
    #[test]
    fn tampered_chain_is_an_attack() {
        let train = vec![site(0, &[1.0]), enter(9), exit(9)];
        let fx = fixture(two_site_program(), &train, ChainMode::Set);
        let oracle = CleanReplayOracle {
            audit_latency_us: 25,
            entries: vec![OracleEntry {
                function: fid(9),
                lo: vec![1.0],
                hi: vec![1.0],
                chain: vec![fid(9)],
                unsafe_input: false,
            }],
        };
        // Same snapshot args, but the call nests into 7: steered execution.
        let events = vec![site(0, &[1.0]), enter(9), enter(7), exit(7), exit(9)];
        let sim = run(&fx, &events, &oracle, SimMode::Set, true);
        assert_eq!(sim.report.attacks_detected, 1);
        assert_eq!(sim.report.legal_audits, 0);
        assert!(sim.log.contains(&SimEvent::Audit {
            function: fid(7),
            verdict: Verdict::Attack,
            latency_us: 25
        }));
    }

    #[test]
    fn unsafe_region_and_missing_entry_verdicts() {
        let oracle = CleanReplayOracle {
            audit_latency_us: 1,
            entries: vec![OracleEntry {
                function: fid(9),
                lo: vec![100.0],
                hi: vec![200.0],
                chain: vec![fid(9)],
                unsafe_input: true,
            }],
        };
        assert_eq!(
            audit_verdict(&oracle, fid(9), &[150.0], &[fid(9)], &[fid(9)]),
            Verdict::Attack
        );
        assert_eq!(
            audit_verdict(&oracle, fid(9), &[5.0], &[fid(9)], &[fid(9)]),
            Verdict::Unknown
        );
        // Replay matches neither observed nor predicted: hostile.
        let oracle2 = CleanReplayOracle {
            audit_latency_us: 1,
            entries: vec![OracleEntry {
                function: fid(9),
                lo: vec![0.0],
                hi: vec![9.0],
                chain: vec![fid(9), fid(5)],
                unsafe_input: false,
            }],
        };
        assert_eq!(
            audit_verdict(&oracle2, fid(9), &[4.0], &[fid(9), fid(7)], &[fid(9)]),
            Verdict::Attack
        );
    }

    /// Predicted-but-unused functions surface at the outermost exit and stay
    /// loaded until the next probe under lazy blanking.
    #[test]
    fn overprediction_detected_at_exit_blanked_at_next_probe() {
        let train = vec![site(0, &[1.0]), enter(9), enter(7), exit(7), exit(9)];
        let fx = fixture(two_site_program(), &train, ChainMode::Set);
        let events = vec![
            site(0, &[1.0]),
            enter(9),
            exit(9),
            site(1, &[2.0]),
            enter(5),
            exit(5),
        ];
        // Site 1 was never trained: its probe resolves the fallback chain.
        let sim = run(&fx, &events, &CleanReplayOracle::default(), SimMode::Set, true);
        let over_at = sim
            .log
            .iter()
            .position(|e| {
                matches!(
                    e,
                    SimEvent::Mispredict {
                        kind: MispredictKind::OverAtExit,
                        function,
                        ..
                    } if *function == fid(7)
                )
            })
            .expect("over event");
        let blank_at = sim
            .log
            .iter()
            .position(|e| matches!(e, SimEvent::Blank { .. }))
            .expect("blank at next probe");
        let second_probe = sim
            .log
            .iter()
            .position(|e| matches!(e, SimEvent::Predict { site, .. } if *site == SiteId(1)))
            .unwrap();
        assert!(over_at < second_probe && second_probe < blank_at);
        let s0 = sim.report.per_site.iter().find(|r| r.site == SiteId(0)).unwrap();
        assert_eq!(s0.stats.overpredictions, 1);
        assert_eq!(s0.stats.accuracy_percent, 0.0);
    }

    /// Full-chain mode steps the sequence: exactly one dynamic function
    /// loaded at a time, repeats included.
    #[test]
    fn full_chain_steps_one_function_at_a_time() {
        let events = vec![
            site(0, &[1.0]),
            enter(9),
            enter(7),
            exit(7),
            enter(7),
            exit(7),
            exit(9),
        ];
        let fx = fixture(two_site_program(), &events, ChainMode::Sequence);
        let sim = run(
            &fx,
            &events,
            &CleanReplayOracle::default(),
            SimMode::FullChain,
            true,
        );
        assert_eq!(sim.report.total.underpredictions, 0);
        assert_eq!(sim.report.total.hits, 1);
        assert_eq!(sim.report.max_chain_functions, 1);
        let violations =
            verify_event_log(&sim.log, &BTreeSet::new(), &fx.chains, SimMode::FullChain);
        assert!(violations.is_empty(), "{violations:?}");
        // 9, then 7, then 7 again (already current: no extra copy).
        let copies: Vec<&SimEvent> = sim
            .log
            .iter()
            .filter(|e| matches!(e, SimEvent::Copy { .. }))
            .collect();
        assert_eq!(
            copies,
            vec![
                &SimEvent::Copy { function: fid(9) },
                &SimEvent::Copy { function: fid(7) }
            ]
        );
    }

    #[test]
    fn full_chain_deviation_audits_and_recovers() {
        let train = vec![site(0, &[1.0]), enter(9), enter(7), exit(7), exit(9)];
        let fx = fixture(two_site_program(), &train, ChainMode::Sequence);
        let oracle = CleanReplayOracle {
            audit_latency_us: 10,
            entries: vec![OracleEntry {
                function: fid(9),
                lo: vec![1.0],
                hi: vec![1.0],
                chain: vec![fid(9)],
                unsafe_input: false,
            }],
        };
        // Deviates: never nests into 7.
        let events = vec![site(0, &[1.0]), enter(9), exit(9)];
        let sim = run(&fx, &events, &oracle, SimMode::FullChain, true);
        assert_eq!(sim.report.total.underpredictions, 0);
        // 9 matched the sequence head; the tail [7] went unused.
        assert_eq!(sim.report.total.overpredictions, 1);
        assert_eq!(sim.report.audits, 0);

        // Now deviate at the head: enters 5 where the sequence says 9.
        let events = vec![site(0, &[1.0]), enter(5), exit(5)];
        let oracle = CleanReplayOracle {
            audit_latency_us: 10,
            entries: vec![OracleEntry {
                function: fid(5),
                lo: vec![1.0],
                hi: vec![1.0],
                chain: vec![fid(5)],
                unsafe_input: false,
            }],
        };
        let sim = run(&fx, &events, &oracle, SimMode::FullChain, true);
        assert_eq!(sim.report.total.underpredictions, 1);
        assert_eq!(sim.report.legal_audits, 1);
        let violations =
            verify_event_log(&sim.log, &BTreeSet::new(), &fx.chains, SimMode::FullChain);
        assert!(violations.is_empty(), "{violations:?}");
    }

    /// Sweeping attacker jumps over every library function mid-trace: the
    /// fault count is exactly the blanked remainder.
    #[test]
    fn attack_jump_sweep_faults_on_everything_unloaded() {
        let events = vec![site(0, &[1.0]), enter(9), enter(7), exit(7), exit(9)];
        let fx = fixture(two_site_program(), &events, ChainMode::Set);
        let oracle = CleanReplayOracle::default();
        let mut sim = Simulator::new(
            &fx.p,
            &fx.plan,
            &fx.model,
            &fx.chains,
            &oracle,
            Policy {
                mode: SimMode::Set,
                lazy_blanking: true,
            },
        )
        .unwrap();
        sim.step(&events[0]).unwrap();
        sim.step(&events[1]).unwrap();
        let lib: Vec<FnId> = fx.p.library_ids().iter().copied().collect();
        let loaded = sim.state().loaded();
        let mut faults = 0;
        for f in &lib {
            match sim.inject_attack_jump(*f) {
                SimEvent::Fault { .. } => faults += 1,
                SimEvent::Hit { .. } => {}
                other => panic!("unexpected {other:?}"),
            }
        }
        assert_eq!(faults as usize, lib.len() - loaded.len());
        for ev in &events[2..] {
            sim.step(ev).unwrap();
        }
        let sim = sim.finish().unwrap();
        assert_eq!(sim.report.faults, faults);
        // Jumping at an application function never faults.
        let st = LoaderState::new(&fx.p, Policy { mode: SimMode::Set, lazy_blanking: true });
        assert_eq!(
            inject_attack_jump(&st, fid(0)),
            SimEvent::Hit { function: fid(0) }
        );
    }

    /// A site absent from training predicts the static chain of its callee
    /// restricted to functions seen in training.
    #[test]
    fn unseen_site_uses_conservative_static_chain() {
        let train = vec![site(1, &[2.0]), enter(5), exit(5)];
        let fx = fixture(two_site_program(), &train, ChainMode::Set);
        // Site 0 untrained; callee 9 reaches {9, 7} but only 5 was ever in a
        // training chain, so the fallback is empty and both entries audit.
        let events = vec![site(0, &[1.0]), enter(9), enter(7), exit(7), exit(9)];
        let sim = run(&fx, &events, &CleanReplayOracle::default(), SimMode::Set, true);
        assert_eq!(sim.log[0], SimEvent::Predict { site: SiteId(0), label: None });
        assert_eq!(sim.report.total.underpredictions, 1);
        assert_eq!(sim.report.unknown_audits, 2);

        // Train 9's chain at site 0 but query from untrained site... the
        // same program with chains covering 9 and 7: fallback now loads them.
        let train2 = vec![
            site(0, &[1.0]),
            enter(9),
            enter(7),
            exit(7),
            exit(9),
            site(1, &[2.0]),
            enter(5),
            exit(5),
        ];
        let mut fx2 = fixture(two_site_program(), &train2, ChainMode::Set);
        // Drop site 0 from the trained set to force the fallback path while
        // keeping its chains in the table.
        fx2.chains.trained_sites.retain(|s| *s != SiteId(0));
        let sim2 = run(&fx2, &events, &CleanReplayOracle::default(), SimMode::Set, true);
        assert_eq!(sim2.log[0], SimEvent::Predict { site: SiteId(0), label: None });
        assert_eq!(sim2.report.total.underpredictions, 0);
        assert_eq!(sim2.report.total.hits, 1);
    }

    #[test]
    fn permanent_functions_are_never_copied_or_blanked() {
        let mut p = two_site_program();
        // Make 9 too small to instrument and 7 unsafe to blank.
        let funcs: Vec<_> = p
            .functions()
            .values()
            .cloned()
            .map(|mut f| {
                if f.id == fid(9) {
                    f.instrumentable = false;
                }
                if f.id == fid(7) {
                    f.blankable = false;
                }
                f
            })
            .collect();
        p = Program::from_functions(funcs).unwrap();
        let events = vec![
            site(0, &[1.0]),
            enter(9),
            enter(7),
            exit(7),
            exit(9),
            site(1, &[2.0]),
            enter(5),
            exit(5),
        ];
        let fx = fixture(p, &events, ChainMode::Set);
        let sim = run(&fx, &events, &CleanReplayOracle::default(), SimMode::Set, false);
        for ev in &sim.log {
            match ev {
                SimEvent::Copy { function } => {
                    assert!(*function != fid(9) && *function != fid(7), "{ev:?}")
                }
                SimEvent::Blank { set } => {
                    assert!(!set.contains(&fid(9)) && !set.contains(&fid(7)), "{ev:?}")
                }
                _ => {}
            }
        }
        assert_eq!(sim.report.p_count, 1);
        assert_eq!(sim.report.s_count, 1);
        // Exposure includes the two permanent functions plus the one-deep
        // dynamic chain.
        assert_eq!(sim.report.max_exposed_functions, 3);
        assert_eq!(sim.report.max_chain_functions, 1);
        let perm: BTreeSet<FnId> = [fid(9), fid(7)].into();
        assert_eq!(sim.report.worst_case_loaded, vec![fid(5), fid(7), fid(9)]);
        let violations = verify_event_log(&sim.log, &perm, &fx.chains, SimMode::Set);
        assert!(violations.is_empty(), "{violations:?}");
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let events = vec![site(0, &[1.0]), enter(9), exit(9)];
        let fx = fixture(two_site_program(), &events, ChainMode::Set);
        let err = simulate(
            &fx.p,
            &fx.plan,
            &fx.model,
            &fx.chains,
            &CleanReplayOracle::default(),
            &events,
            Policy {
                mode: SimMode::FullChain,
                lazy_blanking: true,
            },
        )
        .unwrap_err();
        assert_eq!(
            err,
            SimError::ModeMismatch {
                policy: SimMode::FullChain,
                required: ChainMode::Sequence
            }
        );
    }

    #[test]
    fn trace_shape_errors_carry_event_indexes() {
        let events = vec![site(0, &[1.0]), enter(9), exit(9)];
        let fx = fixture(two_site_program(), &events, ChainMode::Set);
        let oracle = CleanReplayOracle::default();
        let policy = Policy {
            mode: SimMode::Set,
            lazy_blanking: true,
        };
        let run = |evs: &[TraceEvent]| {
            simulate(&fx.p, &fx.plan, &fx.model, &fx.chains, &oracle, evs, policy).unwrap_err()
        };
        assert_eq!(
            run(&[enter(9)]),
            SimError::MissingSite {
                index: 0,
                function: fid(9)
            }
        );
        assert_eq!(
            run(&[site(0, &[1.0]), enter(9), exit(7)]),
            SimError::UnmatchedExit {
                index: 2,
                function: fid(7)
            }
        );
        assert_eq!(
            run(&[site(0, &[1.0])]),
            SimError::SiteWithoutCall {
                index: 0,
                site: SiteId(0)
            }
        );
        assert_eq!(
            run(&[site(0, &[1.0]), enter(9)]),
            SimError::UnclosedCall { index: 1 }
        );
        assert_eq!(
            run(&[site(77, &[])]),
            SimError::UnknownSite {
                index: 0,
                site: SiteId(77)
            }
        );
        assert_eq!(
            run(&[site(0, &[1.0, 2.0])]),
            SimError::ArityMismatch {
                index: 0,
                site: SiteId(0),
                expected: 1,
                got: 2
            }
        );
        assert_eq!(
            run(&[site(0, &[1.0]), enter(0)]),
            SimError::NotALibrary {
                index: 1,
                function: fid(0)
            }
        );
    }

    #[test]
    fn corrupted_logs_fail_verification() {
        let events = vec![site(0, &[1.0]), enter(9), enter(7), exit(7), exit(9)];
        let fx = fixture(two_site_program(), &events, ChainMode::Set);
        let sim = run(&fx, &events, &CleanReplayOracle::default(), SimMode::Set, true);
        let none = BTreeSet::new();
        assert!(verify_event_log(&sim.log, &none, &fx.chains, SimMode::Set).is_empty());

        // Drop an audit.
        let mut log = sim.log.clone();
        log.push(SimEvent::Mispredict {
            function: fid(5),
            site: SiteId(0),
            kind: MispredictKind::Under,
        });
        assert!(!verify_event_log(&log, &none, &fx.chains, SimMode::Set).is_empty());

        // Copy a function the prediction never named.
        let mut log = sim.log.clone();
        log.push(SimEvent::Copy { function: fid(5) });
        assert!(!verify_event_log(&log, &none, &fx.chains, SimMode::Set).is_empty());

        // Copy of a permanent function.
        let perm: BTreeSet<FnId> = [fid(9)].into();
        assert!(!verify_event_log(&sim.log, &perm, &fx.chains, SimMode::Set).is_empty());
    }

    #[test]
    fn simulation_is_deterministic() {
        let events = vec![
            site(0, &[1.0]),
            enter(9),
            enter(7),
            exit(7),
            exit(9),
            site(1, &[2.0]),
            enter(5),
            exit(5),
        ];
        let fx = fixture(two_site_program(), &events, ChainMode::Set);
        let oracle = CleanReplayOracle::default();
        let a = run(&fx, &events, &oracle, SimMode::Set, true);
        let b = run(&fx, &events, &oracle, SimMode::Set, true);
        assert_eq!(a, b);
        assert_eq!(a.report.to_json_string(), b.report.to_json_string());
    }

    #[test]
    fn events_round_trip_through_jsonl() {
        let events = vec![
            SimEvent::Predict {
                site: SiteId(3),
                label: Some(2),
            },
            SimEvent::Predict {
                site: SiteId(4),
                label: None,
            },
            SimEvent::Copy { function: fid(9) },
            SimEvent::Blank {
                set: vec![fid(7), fid(9)],
            },
            SimEvent::Mispredict {
                function: fid(5),
                site: SiteId(3),
                kind: MispredictKind::OverAtExit,
            },
            SimEvent::Audit {
                function: fid(5),
                verdict: Verdict::Attack,
                latency_us: 25,
            },
            SimEvent::Fault { function: fid(8) },
        ];
        let mut buf = Vec::new();
        write_sim_events(&mut buf, &events).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(r#"{"ev":"predict","site":3,"label":2}"#));
        let back: Vec<SimEvent> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(back, events);
    }

    #[test]
    fn oracle_file_round_trips_and_matches_first_region() {
        let oracle = CleanReplayOracle {
            audit_latency_us: 33,
            entries: vec![
                OracleEntry {
                    function: fid(9),
                    lo: vec![0.0, -1.0],
                    hi: vec![10.0, 1.0],
                    chain: vec![fid(9)],
                    unsafe_input: false,
                },
                OracleEntry {
                    function: fid(9),
                    lo: vec![0.0, -1.0],
                    hi: vec![100.0, 1.0],
                    chain: vec![fid(9), fid(7)],
                    unsafe_input: false,
                },
            ],
        };
        let back = CleanReplayOracle::from_json_str(&oracle.to_json_string()).unwrap();
        assert_eq!(back, oracle);
        // Overlap: first listed entry wins.
        assert_eq!(
            oracle.lookup(fid(9), &[5.0, 0.0]).unwrap().chain,
            vec![fid(9)]
        );
        assert_eq!(
            oracle.lookup(fid(9), &[50.0, 0.0]).unwrap().chain,
            vec![fid(9), fid(7)]
        );
        assert_eq!(oracle.lookup(fid(9), &[5.0]), None);
    }
}
