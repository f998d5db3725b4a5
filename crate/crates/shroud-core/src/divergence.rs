//! Classifies library functions by whether their library call sequence is
//! fixed at entry.
//!
//! A function is non-divergent when every library call site in it
//! postdominates the entry block (so no branch can skip or reorder the
//! calls) and every library callee is itself non-divergent. Such functions
//! have exactly one static call chain, which downstream consumers can load
//! without consulting the predictor. Calls into application code are opaque:
//! they are not part of any predicted chain and do not affect the
//! classification.
//!
//! Cycles in the call graph are classified optimistically: every function
//! starts non-divergent and is lowered on violation, so a mutually recursive
//! group whose members all satisfy the call-site condition stays
//! non-divergent as a unit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::callgraph::CallGraph;
use crate::dom::{compute_postdominators, GraphError};
use crate::ir::{FnId, Instruction, Program, SiteId};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    NonDivergent,
    Divergent,
}

/// Why a particular call site contributed to its function's divergence. A
/// site can carry several reasons (e.g. skippable and calling into a
/// tainted cycle).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceReason {
    /// The site's block does not postdominate the function entry: some path
    /// through the function skips it.
    NotPostdominating,
    /// The callee was classified divergent.
    CalleeDivergent,
    /// The callee was classified divergent and sits in the same recursion
    /// group (call-graph cycle) as the caller.
    InCycle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    /// Every library function, classified.
    pub classification: BTreeMap<FnId, Classification>,
    pub n_divergent: usize,
    pub n_non_divergent: usize,
    /// Violations per function, sorted by site id. Functions with no
    /// violations are absent.
    pub reasons: BTreeMap<FnId, Vec<(SiteId, DivergenceReason)>>,
}

impl DivergenceReport {
    pub fn is_divergent(&self, f: FnId) -> Option<bool> {
        self.classification
            .get(&f)
            .map(|c| *c == Classification::Divergent)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DivergenceError {
    #[error("library function {function} ({name}) has no control flow graph")]
    MissingCfg { function: FnId, name: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// All (site, block, callee) triples in `f` whose callee is a library
/// function of `p`.
fn library_sites(p: &Program, f: FnId) -> Vec<(SiteId, crate::ir::BlockId, FnId)> {
    let mut out = Vec::new();
    if let Some(def) = p.function(f) {
        for b in &def.blocks {
            for instr in &b.instrs {
                if let Instruction::Call { site, callee, .. } = instr {
                    if p.is_library(*callee) {
                        out.push((*site, b.id, *callee));
                    }
                }
            }
        }
    }
    out.sort_unstable();
    out
}

/// Classifies every library function of `p`. See the module docs for the
/// rule; the fixpoint starts with everything non-divergent and lowers
/// functions on violation, so adding a violation can never turn another
/// function non-divergent.
pub fn classify_divergence(p: &Program) -> Result<DivergenceReport, DivergenceError> {
    let libs: Vec<FnId> = p.library_ids().iter().copied().collect();
    for f in &libs {
        let def = p.function(*f).expect("library ids come from the program");
        if !def.has_body() {
            return Err(DivergenceError::MissingCfg {
                function: *f,
                name: def.name.clone(),
            });
        }
    }

    // Local condition per function, independently parallelizable: which
    // library call sites fail to postdominate the entry block.
    let local: Vec<Result<Vec<(SiteId, crate::ir::BlockId, FnId)>, DivergenceError>> =
        par::map_slice(&libs, |f| {
            let def = p.function(*f).expect("checked above");
            let pd = compute_postdominators(def)?;
            let mut violations = Vec::new();
            for (site, block, callee) in library_sites(p, *f) {
                if !pd.postdominates(block, def.entry_block)? {
                    violations.push((site, block, callee));
                }
            }
            Ok(violations)
        });

    let mut class: BTreeMap<FnId, Classification> = libs
        .iter()
        .map(|f| (*f, Classification::NonDivergent))
        .collect();
    let mut reasons: BTreeMap<FnId, Vec<(SiteId, DivergenceReason)>> = BTreeMap::new();
    let mut newly_divergent: Vec<FnId> = Vec::new();
    for (f, res) in libs.iter().zip(local) {
        let violations = res?;
        if !violations.is_empty() {
            class.insert(*f, Classification::Divergent);
            newly_divergent.push(*f);
            let entry = reasons.entry(*f).or_default();
            for (site, _, _) in violations {
                entry.push((site, DivergenceReason::NotPostdominating));
            }
        }
    }

    // Propagate divergence to callers over the library-restricted call
    // graph.
    let cg = CallGraph::derive(p);
    let mut lib_callers: BTreeMap<FnId, Vec<FnId>> = BTreeMap::new();
    for f in &libs {
        for callee in cg.callees(*f).keys() {
            if p.is_library(*callee) {
                lib_callers.entry(*callee).or_default().push(*f);
            }
        }
    }
    while let Some(d) = newly_divergent.pop() {
        if let Some(callers) = lib_callers.get(&d) {
            for c in callers {
                if class[c] == Classification::NonDivergent {
                    class.insert(*c, Classification::Divergent);
                    newly_divergent.push(*c);
                }
            }
        }
    }

    // Attribute callee-induced divergence, now that the fixpoint is final.
    let scc = library_scc_ids(p, &cg, &libs);
    for f in &libs {
        for (site, _, callee) in library_sites(p, *f) {
            if class[&callee] == Classification::Divergent {
                let reason = if scc.get(f) == scc.get(&callee) {
                    DivergenceReason::InCycle
                } else {
                    DivergenceReason::CalleeDivergent
                };
                reasons.entry(*f).or_default().push((site, reason));
            }
        }
    }
    for list in reasons.values_mut() {
        list.sort_unstable();
    }

    let n_divergent = class
        .values()
        .filter(|c| **c == Classification::Divergent)
        .count();
    Ok(DivergenceReport {
        n_non_divergent: class.len() - n_divergent,
        n_divergent,
        classification: class,
        reasons,
    })
}

/// SCC id per library function over the library-restricted call graph
/// (iterative Tarjan). Functions in the same cycle share an id; a function
/// alone in its component without a self-call still gets a unique id, which
/// is fine: the ids are only compared for equality.
fn library_scc_ids(p: &Program, cg: &CallGraph, libs: &[FnId]) -> BTreeMap<FnId, u32> {
    let index_of: BTreeMap<FnId, usize> = libs.iter().enumerate().map(|(i, f)| (*f, i)).collect();
    let n = libs.len();
    let adj: Vec<Vec<usize>> = libs
        .iter()
        .map(|f| {
            cg.callees(*f)
                .keys()
                .filter(|c| p.is_library(**c))
                .filter_map(|c| index_of.get(c).copied())
                .collect()
        })
        .collect();

    let mut index = vec![u32::MAX; n];
    let mut low = vec![0u32; n];
    let mut on_stack = vec![false; n];
    let mut stack: Vec<usize> = Vec::new();
    let mut frames: Vec<(usize, usize)> = Vec::new();
    let mut next = 0u32;
    let mut scc_of = vec![0u32; n];
    let mut next_scc = 0u32;
    for root in 0..n {
        if index[root] != u32::MAX {
            continue;
        }
        frames.push((root, 0));
        while let Some(&(u, pos)) = frames.last() {
            if pos == 0 {
                index[u] = next;
                low[u] = next;
                next += 1;
                stack.push(u);
                on_stack[u] = true;
            }
            if pos < adj[u].len() {
                let v = adj[u][pos];
                frames.last_mut().expect("frame").1 += 1;
                if index[v] == u32::MAX {
                    frames.push((v, 0));
                } else if on_stack[v] {
                    low[u] = low[u].min(index[v]);
                }
            } else {
                frames.pop();
                if let Some(&(parent, _)) = frames.last() {
                    low[parent] = low[parent].min(low[u]);
                }
                if low[u] == index[u] {
                    loop {
                        let w = stack.pop().expect("scc stack");
                        on_stack[w] = false;
                        scc_of[w] = next_scc;
                        if w == u {
                            break;
                        }
                    }
                    next_scc += 1;
                }
            }
        }
    }
    libs.iter()
        .enumerate()
        .map(|(i, f)| (*f, scc_of[i]))
        .collect()
}
