//! Call-graph derivation and the two whole-program queries built on it:
//! which library functions are statically reachable, and how deep library
//! call chains can stack.

use std::collections::{BTreeMap, BTreeSet};

use crate::ir::{FnId, Program, SiteId};

/// Caller → callee adjacency with the call sites that induce each edge.
/// Derived purely from `Call` instructions, so re-deriving is idempotent and
/// independent of input ordering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallGraph {
    edges: BTreeMap<FnId, BTreeMap<FnId, Vec<SiteId>>>,
}

impl CallGraph {
    pub fn derive(p: &Program) -> Self {
        let mut edges: BTreeMap<FnId, BTreeMap<FnId, Vec<SiteId>>> = BTreeMap::new();
        for (id, site) in p.sites() {
            edges
                .entry(site.function)
                .or_default()
                .entry(site.callee)
                .or_default()
                .push(*id);
        }
        for per_caller in edges.values_mut() {
            for sites in per_caller.values_mut() {
                sites.sort_unstable();
            }
        }
        CallGraph { edges }
    }

    /// Callees of `f` with the sites that call them. Empty map for unknown
    /// ids and declarations.
    pub fn callees(&self, f: FnId) -> &BTreeMap<FnId, Vec<SiteId>> {
        static EMPTY: BTreeMap<FnId, Vec<SiteId>> = BTreeMap::new();
        self.edges.get(&f).unwrap_or(&EMPTY)
    }

    pub fn edges(&self) -> &BTreeMap<FnId, BTreeMap<FnId, Vec<SiteId>>> {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.values().map(|m| m.len()).sum()
    }
}

/// Result of [`reachable_library_functions`]: the reachable set plus how
/// many requested roots did not name a known function (those are skipped,
/// not errors).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LibraryReachability {
    pub functions: BTreeSet<FnId>,
    pub unknown_roots: usize,
}

/// Library functions statically reachable from `roots`.
///
/// The walk is over the call graph restricted to library functions: roots
/// seed it (a root that is itself a library function is included; any root's
/// direct library callees are included), and from there edges are followed
/// through library functions only. Application functions are never traversed
/// implicitly — callers enumerate the application side via `roots`.
pub fn reachable_library_functions(p: &Program, roots: &BTreeSet<FnId>) -> LibraryReachability {
    let cg = CallGraph::derive(p);
    let mut unknown_roots = 0usize;
    let mut out: BTreeSet<FnId> = BTreeSet::new();
    let mut work: Vec<FnId> = Vec::new();
    for r in roots {
        if p.function(*r).is_none() {
            unknown_roots += 1;
            continue;
        }
        if p.is_library(*r) && out.insert(*r) {
            work.push(*r);
        }
        for callee in cg.callees(*r).keys() {
            if p.is_library(*callee) && out.insert(*callee) {
                work.push(*callee);
            }
        }
    }
    while let Some(f) = work.pop() {
        for callee in cg.callees(f).keys() {
            if p.is_library(*callee) && out.insert(*callee) {
                work.push(*callee);
            }
        }
    }
    LibraryReachability {
        functions: out,
        unknown_roots,
    }
}

/// Longest acyclic call chain through library functions, counted in
/// functions, starting from any root. A root that is an application
/// function contributes its library callees as chain heads; a root that is
/// a library function starts a chain itself. Cycles are cut by the simple-
/// path rule: no function repeats within one chain.
pub fn max_static_callchain_depth(p: &Program, roots: &BTreeSet<FnId>) -> usize {
    let cg = CallGraph::derive(p);
    let lib_ids: Vec<FnId> = p.library_ids().iter().copied().collect();
    let index: BTreeMap<FnId, usize> = lib_ids.iter().enumerate().map(|(i, f)| (*f, i)).collect();
    // Library-restricted adjacency in index space.
    let adj: Vec<Vec<usize>> = lib_ids
        .iter()
        .map(|f| {
            cg.callees(*f)
                .keys()
                .filter_map(|c| index.get(c).copied())
                .collect()
        })
        .collect();

    fn dfs(u: usize, adj: &[Vec<usize>], visited: &mut [bool]) -> usize {
        visited[u] = true;
        let mut best = 0;
        for v in &adj[u] {
            if !visited[*v] {
                best = best.max(dfs(*v, adj, visited));
            }
        }
        visited[u] = false;
        1 + best
    }

    let mut visited = vec![false; lib_ids.len()];
    let mut best = 0;
    for r in roots {
        if p.function(*r).is_none() {
            continue;
        }
        if let Some(ri) = index.get(r) {
            best = best.max(dfs(*ri, &adj, &mut visited));
        } else {
            for c in cg.callees(*r).keys() {
                if let Some(ci) = index.get(c) {
                    best = best.max(dfs(*ci, &adj, &mut visited));
                }
            }
        }
    }
    best
}
