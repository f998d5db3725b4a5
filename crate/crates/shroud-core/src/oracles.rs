//! Brute-force reference implementations ("oracles") used by the test suite
//! to check the production code paths, plus the corpus enumerators that
//! drive those comparisons.
//!
//! Everything here is deliberately written from the definitions, not from
//! the algorithms in the sibling modules: postdominance by enumerating
//! simple paths to the exit, RDF by the two-successor criterion, and so on.
//! Keep it that way — these functions are only useful while they share no
//! code with what they verify.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::dom::PostdomEngine;
use crate::ir::{block, function, BlockId, FnId, FunctionDef, Program};
use crate::par;

// ---------------------------------------------------------------------------
// Mask-level graph helpers (blocks are indices 0..n < 16, virtual exit n; a
// node's successor set is one u32 bitmask). Everything works on fixed stack
// arrays so the exhaustive sweep never allocates per graph.
// ---------------------------------------------------------------------------

const MAXN: usize = 16;

type Masks = [u32; MAXN + 1];

fn to_masks(succs: &[Vec<u32>]) -> Masks {
    assert!(succs.len() <= MAXN);
    let mut m = [0u32; MAXN + 1];
    for (u, su) in succs.iter().enumerate() {
        for s in su {
            m[u] |= 1 << *s;
        }
    }
    m
}

/// Reachability closure: `reach[u]` has bit v set iff v is reachable from u
/// (u itself always included).
fn closure(succ: &Masks, n: usize) -> Masks {
    let mut reach = [0u32; MAXN + 1];
    for (u, r) in reach.iter_mut().enumerate().take(n) {
        *r = 1 << u;
    }
    let mut changed = true;
    while changed {
        changed = false;
        for u in 0..n {
            let mut r = reach[u];
            let mut bits = succ[u];
            while bits != 0 {
                let s = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                r |= reach[s];
            }
            if r != reach[u] {
                reach[u] = r;
                changed = true;
            }
        }
    }
    reach
}

/// Augmented successor masks: virtual exit (index n) wired from every block
/// without successors and from the lowest block of every nontrivial SCC that
/// cannot reach an exit. Independent of the production Tarjan/DFS route:
/// uses the reachability closure.
fn augment(succ: &Masks, n: usize) -> Masks {
    let reach = closure(succ, n);
    let mut exit_mask = 0u32;
    for u in 0..n {
        if succ[u] == 0 {
            exit_mask |= 1 << u;
        }
    }
    let vexit_bit = 1u32 << n;
    let mut aug = *succ;
    let mut claimed = 0u32; // blocks already inside a handled SCC
    for u in 0..n {
        if succ[u] == 0 {
            aug[u] |= vexit_bit;
            continue;
        }
        if reach[u] & exit_mask != 0 || claimed >> u & 1 == 1 {
            continue;
        }
        // u is the lowest unclaimed member of its exit-free SCC.
        let mut members = 0u32;
        for v in 0..n {
            if reach[u] >> v & 1 == 1 && reach[v] >> u & 1 == 1 {
                members |= 1 << v;
            }
        }
        let non_trivial = members.count_ones() > 1 || succ[u] >> u & 1 == 1;
        if non_trivial {
            aug[u] |= vexit_bit;
        }
        claimed |= members;
    }
    aug
}

fn pd_dfs(u: usize, path: u32, inter: &mut u32, floor: u32, vexit: usize, aug: &Masks) {
    if *inter == floor {
        return; // cannot shrink further
    }
    if u == vexit {
        *inter &= path;
        return;
    }
    let mut bits = aug[u] & !path;
    while bits != 0 {
        let s = bits.trailing_zeros() as usize;
        bits &= bits - 1;
        pd_dfs(s, path | 1 << s, inter, floor, vexit, aug);
    }
}

/// Postdominators by exhaustive simple-path enumeration on the augmented
/// graph: bit b of `pd[a]` is set iff every path from a to the virtual exit
/// passes through b. Reflexive; the virtual-exit bit is stripped.
fn pd_by_paths(aug: &Masks, n: usize) -> Masks {
    let all = (1u32 << (n + 1)) - 1;
    let mut pd = [0u32; MAXN + 1];
    for (a, row) in pd.iter_mut().enumerate().take(n) {
        let floor = 1 << a | 1 << n;
        let mut inter = all;
        pd_dfs(a, 1 << a, &mut inter, floor, n, aug);
        *row = inter & !(1 << n);
    }
    pd
}

/// RDF from the definition: `u ∈ rdf(b)` iff u has a successor through which
/// all paths reach b, and another successor with a path to the exit that
/// avoids b. Both conditions range over the augmented graph, so a block
/// whose only escape is the virtual exit edge (an exit-free loop) still
/// counts as branching. `pd` must come from `pd_by_paths`.
fn rdf_by_definition(aug: &Masks, pd: &Masks, n: usize) -> Masks {
    let vexit_bit = 1u32 << n;
    let mut rdf = [0u32; MAXN + 1];
    for b in 0..n {
        // Blocks that can reach the virtual exit without touching b, by
        // forward fixpoint (plus the virtual exit itself).
        let mut avoid = vexit_bit;
        let mut changed = true;
        while changed {
            changed = false;
            for u in 0..n {
                if u != b && avoid >> u & 1 == 0 && aug[u] & avoid != 0 {
                    avoid |= 1 << u;
                    changed = true;
                }
            }
        }
        // Successors through which every path hits b. The virtual exit is
        // postdominated by no real block, so it never contributes here.
        let mut into_b = 0u32;
        for (s, row) in pd.iter().enumerate().take(n) {
            if row >> b & 1 == 1 {
                into_b |= 1 << s;
            }
        }
        let escape_ok = avoid & !(1 << b);
        for u in 0..n {
            if aug[u] & into_b != 0 && aug[u] & escape_ok != 0 {
                rdf[b] |= 1 << u;
            }
        }
    }
    rdf
}

/// Vec-level wrapper over [`pd_by_paths`] for unit tests.
pub(crate) fn postdom_masks_by_paths(succs: &[Vec<u32>]) -> Vec<u32> {
    let n = succs.len();
    let m = to_masks(succs);
    let aug = augment(&m, n);
    pd_by_paths(&aug, n)[..n].to_vec()
}

/// Vec-level wrapper over [`rdf_by_definition`] for unit tests.
pub(crate) fn rdf_masks_by_definition(succs: &[Vec<u32>]) -> Vec<u32> {
    let n = succs.len();
    let m = to_masks(succs);
    let aug = augment(&m, n);
    let pd = pd_by_paths(&aug, n);
    rdf_by_definition(&aug, &pd, n)[..n].to_vec()
}

// ---------------------------------------------------------------------------
// FunctionDef-level oracle wrappers (what module unit tests call).
// ---------------------------------------------------------------------------

fn indexed_succs(f: &FunctionDef) -> (Vec<BlockId>, Vec<Vec<u32>>) {
    let mut ids: Vec<BlockId> = f.blocks.iter().map(|b| b.id).collect();
    ids.sort_unstable();
    let mut succs = vec![Vec::new(); ids.len()];
    for b in &f.blocks {
        let i = ids.binary_search(&b.id).expect("own id");
        succs[i] = b
            .succs
            .iter()
            .map(|t| ids.binary_search(t).expect("validated edge") as u32)
            .collect();
    }
    (ids, succs)
}

/// Path-enumeration postdominators of `f` as plain sets.
pub fn postdom_oracle(f: &FunctionDef) -> BTreeMap<BlockId, BTreeSet<BlockId>> {
    let (ids, succs) = indexed_succs(f);
    let masks = postdom_masks_by_paths(&succs);
    ids.iter()
        .enumerate()
        .map(|(i, id)| {
            let set = ids
                .iter()
                .enumerate()
                .filter(|(j, _)| masks[i] >> *j & 1 == 1)
                .map(|(_, b)| *b)
                .collect();
            (*id, set)
        })
        .collect()
}

/// Definitional RDF of one block of `f`.
pub fn rdf_oracle(f: &FunctionDef, b: BlockId) -> BTreeSet<BlockId> {
    let (ids, succs) = indexed_succs(f);
    let bi = ids.binary_search(&b).expect("block exists");
    let masks = rdf_masks_by_definition(&succs);
    ids.iter()
        .enumerate()
        .filter(|(u, _)| masks[bi] >> *u & 1 == 1)
        .map(|(_, id)| *id)
        .collect()
}

// ---------------------------------------------------------------------------
// CFG corpora: exhaustive enumeration and random generation.
// ---------------------------------------------------------------------------

/// Calls `emit` once per connected CFG on exactly `n` labeled blocks: entry
/// is block 0, every block has 0, 1, or 2 successors (self-edges allowed),
/// and every block is reachable from the entry. Each graph is visited
/// exactly once, in its canonical BFS discovery order.
pub fn for_each_connected_cfg<F: FnMut(&[Vec<u32>])>(n: usize, mut emit: F) {
    assert!(n >= 1 && n <= 16);
    let choices = successor_choices(n);
    let mut succs: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut disc: Vec<u32> = vec![0];
    let mut disc_mask: u32 = 1;
    enumerate_from(
        0,
        n,
        &choices,
        &mut succs,
        &mut disc,
        &mut disc_mask,
        &mut emit,
    );
}

/// All successor sets of size ≤ 2 over n blocks, as sorted target lists.
fn successor_choices(n: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    for a in 0..n as u32 {
        out.push(vec![a]);
    }
    for a in 0..n as u32 {
        for b in a + 1..n as u32 {
            out.push(vec![a, b]);
        }
    }
    out
}

fn enumerate_from<F: FnMut(&[Vec<u32>])>(
    k: usize,
    n: usize,
    choices: &[Vec<u32>],
    succs: &mut Vec<Vec<u32>>,
    disc: &mut Vec<u32>,
    disc_mask: &mut u32,
    emit: &mut F,
) {
    let u = disc[k] as usize;
    for choice in choices {
        succs[u].clear();
        succs[u].extend_from_slice(choice);
        let before_len = disc.len();
        let before_mask = *disc_mask;
        for t in choice {
            if *disc_mask >> *t & 1 == 0 {
                *disc_mask |= 1 << *t;
                disc.push(*t);
            }
        }
        if k + 1 < disc.len() {
            enumerate_from(k + 1, n, choices, succs, disc, disc_mask, emit);
        } else if disc.len() == n {
            emit(succs);
        } // else: frontier exhausted with blocks undiscovered — prune
        disc.truncate(before_len);
        *disc_mask = before_mask;
    }
}

/// Random entry-reachable CFG with `n` blocks and out-degree ≤ 2. Built from
/// a random spanning arborescence plus extra edges where capacity remains,
/// so connectivity is guaranteed by construction.
pub fn random_connected_cfg<R: Rng>(rng: &mut R, n: usize) -> Vec<Vec<u32>> {
    let mut succs: Vec<Vec<u32>> = vec![Vec::new(); n];
    for v in 1..n as u32 {
        // Attach v under an earlier block with spare capacity.
        let parents: Vec<u32> = (0..v).filter(|p| succs[*p as usize].len() < 2).collect();
        let p = parents[rng.gen_range(0..parents.len())];
        succs[p as usize].push(v);
    }
    // Sprinkle extra edges, biased sparse; duplicates and self-edges allowed
    // targets, but successor lists stay sets of ≤ 2.
    for u in 0..n {
        while succs[u].len() < 2 && rng.gen_bool(0.25) {
            let t = rng.gen_range(0..n as u32);
            if !succs[u].contains(&t) {
                succs[u].push(t);
            } else {
                break;
            }
        }
        succs[u].sort_unstable();
    }
    // Some leaves become exits naturally (no successors). Occasionally strip
    // a block's edges entirely to create more exits.
    for u in 1..n {
        if rng.gen_bool(0.1) {
            succs[u].clear();
        }
    }
    succs
}

/// Wraps raw successor lists in a `FunctionDef` so the production entry
/// points can run on them.
pub fn cfg_function(succs: &[Vec<u32>]) -> FunctionDef {
    let blocks = succs
        .iter()
        .enumerate()
        .map(|(i, su)| {
            let su: Vec<u32> = su.clone();
            block(i as u32, &su, vec![])
        })
        .collect();
    function(0, "cfg", false, 0, blocks)
}

// ---------------------------------------------------------------------------
// Call-graph oracles and corpora.
// ---------------------------------------------------------------------------

/// Reachable-library-set oracle: rescans every call edge each round until
/// nothing grows. Same seeding rule as the production query (known roots of
/// either kind seed, traversal continues through library functions only),
/// but as a naive whole-program fixpoint instead of a worklist.
pub fn reachable_library_oracle(
    p: &Program,
    roots: &std::collections::BTreeSet<FnId>,
) -> std::collections::BTreeSet<FnId> {
    let known: std::collections::BTreeSet<FnId> = roots
        .iter()
        .filter(|r| p.function(**r).is_some())
        .copied()
        .collect();
    let mut set: std::collections::BTreeSet<FnId> = known
        .iter()
        .filter(|r| p.is_library(**r))
        .copied()
        .collect();
    loop {
        let mut grew = false;
        for site in p.sites().values() {
            let active = known.contains(&site.function) || set.contains(&site.function);
            if active && p.is_library(site.callee) && set.insert(site.callee) {
                grew = true;
            }
        }
        if !grew {
            return set;
        }
    }
}

/// Longest library chain on acyclic call graphs, by memoized dynamic
/// programming (valid only when the library-restricted call graph has no
/// cycles, which the DAG generator guarantees).
pub fn longest_chain_dag_oracle(p: &Program, roots: &std::collections::BTreeSet<FnId>) -> usize {
    let cg = crate::callgraph::CallGraph::derive(p);
    fn depth(
        f: FnId,
        p: &Program,
        cg: &crate::callgraph::CallGraph,
        memo: &mut BTreeMap<FnId, usize>,
    ) -> usize {
        if let Some(d) = memo.get(&f) {
            return *d;
        }
        let mut best = 0;
        for c in cg.callees(f).keys() {
            if p.is_library(*c) {
                best = best.max(depth(*c, p, cg, memo));
            }
        }
        memo.insert(f, 1 + best);
        1 + best
    }
    let mut memo = BTreeMap::new();
    let mut best = 0;
    for r in roots {
        if p.function(*r).is_none() {
            continue;
        }
        if p.is_library(*r) {
            best = best.max(depth(*r, p, &cg, &mut memo));
        } else {
            for c in cg.callees(*r).keys() {
                if p.is_library(*c) {
                    best = best.max(depth(*c, p, &cg, &mut memo));
                }
            }
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Divergence oracle: path enumeration over complete paths with every block
// visited at most twice (loop bodies taken zero and one extra time), each
// path reduced to its first-occurrence library call sequence.
// ---------------------------------------------------------------------------

/// Divergence flags by path enumeration (true = divergent). A library
/// function passes the local check iff every complete bounded path from its
/// entry executes the same deduplicated sequence of library call sites;
/// divergence then propagates through library callees by repeated scanning.
pub fn divergence_oracle(p: &Program) -> BTreeMap<FnId, bool> {
    let libs: Vec<FnId> = p.library_ids().iter().copied().collect();
    let mut divergent: BTreeMap<FnId, bool> = libs
        .iter()
        .map(|f| {
            let def = p.function(*f).expect("library function");
            (*f, !bounded_paths_agree(p, def))
        })
        .collect();
    loop {
        let mut changed = false;
        for f in &libs {
            if divergent[f] {
                continue;
            }
            let def = p.function(*f).expect("library function");
            let taints = def.blocks.iter().flat_map(|b| &b.instrs).any(|i| {
                matches!(i, crate::ir::Instruction::Call { callee, .. }
                    if p.is_library(*callee) && divergent[callee])
            });
            if taints {
                divergent.insert(*f, true);
                changed = true;
            }
        }
        if !changed {
            return divergent;
        }
    }
}

/// Do all complete paths (entry to virtual exit, each block visited at most
/// twice) through `def` execute the same first-occurrence sequence of
/// library call sites?
fn bounded_paths_agree(p: &Program, def: &FunctionDef) -> bool {
    let (ids, succs) = indexed_succs(def);
    let n = ids.len();
    assert!(n <= MAXN, "oracle handles up to {MAXN} blocks");
    let masks = to_masks(&succs);
    let aug = augment(&masks, n);

    // Library call sites per block, as compact per-function site indices.
    let mut site_ids: Vec<u32> = Vec::new();
    let mut block_sites: Vec<Vec<u32>> = vec![Vec::new(); n];
    for b in &def.blocks {
        let bi = ids.binary_search(&b.id).expect("own id");
        for instr in &b.instrs {
            if let crate::ir::Instruction::Call { site, callee, .. } = instr {
                if p.is_library(*callee) {
                    block_sites[bi].push(site_ids.len() as u32);
                    site_ids.push(site.0);
                }
            }
        }
    }
    assert!(site_ids.len() <= 32, "per-function site mask is 32 bits");

    struct Walk<'a> {
        aug: &'a Masks,
        n: usize,
        block_sites: &'a [Vec<u32>],
        visits: [u8; MAXN + 1],
        seq: Vec<u32>,
        seen: u32,
        first: Option<Vec<u32>>,
        agree: bool,
    }
    impl Walk<'_> {
        fn go(&mut self, u: usize) {
            if !self.agree {
                return;
            }
            if u == self.n {
                match &self.first {
                    None => self.first = Some(self.seq.clone()),
                    Some(f) => {
                        if *f != self.seq {
                            self.agree = false;
                        }
                    }
                }
                return;
            }
            let appended_from = self.seq.len();
            let mut appended_mask = 0u32;
            for s in &self.block_sites[u] {
                if self.seen >> *s & 1 == 0 {
                    self.seen |= 1 << *s;
                    appended_mask |= 1 << *s;
                    self.seq.push(*s);
                }
            }
            let mut bits = self.aug[u];
            while bits != 0 {
                let v = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                if self.visits[v] < 2 {
                    self.visits[v] += 1;
                    self.go(v);
                    self.visits[v] -= 1;
                }
            }
            self.seq.truncate(appended_from);
            self.seen &= !appended_mask;
        }
    }

    let entry = ids
        .binary_search(&def.entry_block)
        .expect("entry block exists");
    let mut w = Walk {
        aug: &aug,
        n,
        block_sites: &block_sites,
        visits: [0; MAXN + 1],
        seq: Vec::new(),
        seen: 0,
        first: None,
        agree: true,
    };
    w.visits[entry] = 1;
    w.go(entry);
    w.agree
}

/// Random CFG with every block reachable from block 0: a random spanning
/// arborescence plus extra edges, never removing any. Out-degree ≤ 2.
pub fn random_reachable_cfg<R: Rng>(rng: &mut R, n: usize) -> Vec<Vec<u32>> {
    let mut succs: Vec<Vec<u32>> = vec![Vec::new(); n];
    for v in 1..n as u32 {
        let parents: Vec<u32> = (0..v).filter(|p| succs[*p as usize].len() < 2).collect();
        let p = parents[rng.gen_range(0..parents.len())];
        succs[p as usize].push(v);
    }
    for u in 0..n {
        while succs[u].len() < 2 && rng.gen_bool(0.2) {
            let t = rng.gen_range(0..n as u32);
            if !succs[u].contains(&t) {
                succs[u].push(t);
            } else {
                break;
            }
        }
        succs[u].sort_unstable();
    }
    succs
}

/// Random whole program for divergence testing: up to `max_fns` functions,
/// every function with a body (entry-reachable CFG of up to `max_blocks`
/// blocks), library flags mixed, and calls sprinkled through the blocks.
pub fn random_divergence_program<R: Rng>(
    rng: &mut R,
    max_fns: usize,
    max_blocks: usize,
) -> Program {
    use crate::ir::{ConstValue, Instruction, SiteId, ValueRef};
    let n_fns = rng.gen_range(2..=max_fns);
    // At least one library function.
    let libs: Vec<bool> = (0..n_fns)
        .map(|i| i == 0 || rng.gen_bool(0.7))
        .collect();
    let mut next_site = 0u32;
    let functions = (0..n_fns)
        .map(|i| {
            let nb = rng.gen_range(1..=max_blocks);
            let cfg = random_reachable_cfg(rng, nb);
            let blocks = cfg
                .iter()
                .enumerate()
                .map(|(bi, su)| {
                    let mut instrs = Vec::new();
                    while instrs.len() < 2 && rng.gen_bool(0.4) {
                        instrs.push(Instruction::Call {
                            site: SiteId(next_site),
                            callee: FnId(rng.gen_range(0..n_fns as u32)),
                            args: vec![ValueRef::Const(ConstValue::Int(0))],
                        });
                        next_site += 1;
                    }
                    block(bi as u32, su, instrs)
                })
                .collect();
            function(i as u32, &format!("f{i}"), libs[i], 0, blocks)
        })
        .collect();
    Program::from_functions(functions).expect("generated program is valid")
}

/// Outcome of a divergence verification sweep. `divergent` and
/// `non_divergent` aggregate the production classifications, giving the
/// two-count summary shape.
#[derive(Debug, Default, Clone)]
pub struct DivergenceComparison {
    pub programs: u64,
    pub functions_checked: u64,
    pub mismatches: u64,
    pub divergent: u64,
    pub non_divergent: u64,
    pub first_mismatch: Option<String>,
}

impl DivergenceComparison {
    pub fn clean(&self) -> bool {
        self.mismatches == 0
    }
}

/// Runs `count` random programs through both the production classifier and
/// the path-enumeration oracle.
pub fn verify_divergence_random(
    count: usize,
    max_fns: usize,
    max_blocks: usize,
    seed: u64,
) -> DivergenceComparison {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = DivergenceComparison::default();
    for _ in 0..count {
        let p = random_divergence_program(&mut rng, max_fns, max_blocks);
        let got = crate::divergence::classify_divergence(&p).expect("all functions have bodies");
        let want = divergence_oracle(&p);
        out.programs += 1;
        out.divergent += got.n_divergent as u64;
        out.non_divergent += got.n_non_divergent as u64;
        for (f, w) in &want {
            out.functions_checked += 1;
            let g = got.is_divergent(*f).expect("classified");
            if g != *w {
                out.mismatches += 1;
                if out.first_mismatch.is_none() {
                    out.first_mismatch = Some(format!(
                        "divergence mismatch on fn {f}: production divergent={g}, oracle={w}\n{}",
                        p.to_json_string()
                    ));
                }
            }
        }
    }
    out
}

/// Random program with `n_fns` single-block functions and random call
/// edges; `dag` restricts edges to ascending function ids so the call graph
/// is acyclic.
pub fn random_callgraph_program<R: Rng>(
    rng: &mut R,
    n_fns: usize,
    edge_prob: f64,
    lib_ratio: f64,
    dag: bool,
) -> crate::ir::Program {
    use crate::ir::{ConstValue, Instruction, SiteId, ValueRef};
    let libs: Vec<bool> = (0..n_fns).map(|_| rng.gen_bool(lib_ratio)).collect();
    let mut next_site = 0u32;
    let mut calls: Vec<Vec<Instruction>> = vec![Vec::new(); n_fns];
    for (i, item) in calls.iter_mut().enumerate() {
        for j in 0..n_fns {
            if dag && j <= i {
                continue;
            }
            if rng.gen_bool(edge_prob) {
                item.push(Instruction::Call {
                    site: SiteId(next_site),
                    callee: FnId(j as u32),
                    args: vec![ValueRef::Const(ConstValue::Int(0))],
                });
                next_site += 1;
            }
        }
    }
    let functions = calls
        .into_iter()
        .enumerate()
        .map(|(i, instrs)| {
            let body = if instrs.is_empty() && libs[i] {
                vec![]
            } else {
                vec![block(0, &[], instrs)]
            };
            function(i as u32, &format!("f{i}"), libs[i], 0, body)
        })
        .collect();
    crate::ir::Program::from_functions(functions).expect("generated program is valid")
}

// ---------------------------------------------------------------------------
// Dataflow programs and instrumentation-plan oracles.
// ---------------------------------------------------------------------------

/// Random program with real dataflow: application functions carry phis fed
/// by their predecessors, defs chaining earlier values, and calls whose
/// arguments draw from the value pool. Every referenced value has a
/// definition; phi incoming blocks are genuine predecessors.
pub fn random_dataflow_program<R: Rng>(rng: &mut R, max_fns: usize, max_blocks: usize) -> Program {
    use crate::ir::{ConstValue, Instruction, SiteId, ValueId, ValueRef};
    let n_fns = rng.gen_range(2..=max_fns.max(2));
    let libs: Vec<bool> = (0..n_fns)
        .map(|i| {
            if i == 0 {
                false
            } else if i + 1 == n_fns {
                true
            } else {
                rng.gen_bool(0.4)
            }
        })
        .collect();
    let lib_ids: Vec<u32> = (0..n_fns as u32).filter(|i| libs[*i as usize]).collect();
    let mut next_site = 0u32;
    let mut next_value = 0u32;

    let pick = |rng: &mut R, pool: &[ValueId]| -> ValueRef {
        if !pool.is_empty() && rng.gen_bool(0.6) {
            ValueRef::Value(pool[rng.gen_range(0..pool.len())])
        } else {
            match rng.gen_range(0..4) {
                0 => ValueRef::Const(ConstValue::Int(rng.gen_range(-8..=8))),
                1 => ValueRef::Const(ConstValue::Float(rng.gen_range(-2.0..2.0))),
                2 => ValueRef::Param(rng.gen_range(0..2)),
                _ => ValueRef::FnAddr(FnId(lib_ids[rng.gen_range(0..lib_ids.len())])),
            }
        }
    };

    let functions = (0..n_fns)
        .map(|i| {
            if libs[i] {
                return function(i as u32, &format!("f{i}"), true, 0, vec![block(0, &[], vec![])]);
            }
            let nb = rng.gen_range(1..=max_blocks);
            let cfg = random_reachable_cfg(rng, nb);
            let mut preds: Vec<Vec<u32>> = vec![Vec::new(); nb];
            for (u, su) in cfg.iter().enumerate() {
                for v in su {
                    preds[*v as usize].push(u as u32);
                }
            }
            let mut pool: Vec<ValueId> = Vec::new();
            let blocks = cfg
                .iter()
                .enumerate()
                .map(|(bi, su)| {
                    let mut instrs = Vec::new();
                    if !preds[bi].is_empty() && rng.gen_bool(0.5) {
                        let dst = ValueId(next_value);
                        next_value += 1;
                        instrs.push(Instruction::Phi {
                            dst,
                            incoming: preds[bi]
                                .iter()
                                .map(|p| (BlockId(*p), pick(rng, &pool)))
                                .collect(),
                        });
                        pool.push(dst);
                    }
                    for _ in 0..rng.gen_range(0..=2u32) {
                        let operands = (0..rng.gen_range(1..=2u32))
                            .map(|_| pick(rng, &pool))
                            .collect();
                        let dst = ValueId(next_value);
                        next_value += 1;
                        instrs.push(Instruction::Def { dst, operands });
                        pool.push(dst);
                    }
                    let mut calls = 0;
                    while calls < 2 && rng.gen_bool(0.5) {
                        let args = (0..rng.gen_range(0..=2u32))
                            .map(|_| pick(rng, &pool))
                            .collect();
                        instrs.push(Instruction::Call {
                            site: SiteId(next_site),
                            callee: FnId(rng.gen_range(0..n_fns as u32)),
                            args,
                        });
                        next_site += 1;
                        calls += 1;
                    }
                    block(bi as u32, su, instrs)
                })
                .collect();
            function(i as u32, &format!("f{i}"), false, 0, blocks)
        })
        .collect();
    Program::from_functions(functions).expect("generated program is valid")
}

/// Phis backward-reachable from `roots` through def chains. A phi-defined
/// root counts as itself; def-defined values are expanded into their
/// operands. Phi collection is monotone, so worklist reachability gives the
/// same answer as enumerating every backward def-use path.
pub fn phi_walk_oracle(
    f: &FunctionDef,
    roots: &[crate::ir::ValueRef],
) -> BTreeSet<crate::ir::ValueId> {
    use crate::ir::{Instruction, ValueId, ValueRef};
    let mut defs: BTreeMap<ValueId, &Instruction> = BTreeMap::new();
    for b in &f.blocks {
        for ins in &b.instrs {
            if let Instruction::Phi { dst, .. } | Instruction::Def { dst, .. } = ins {
                defs.insert(*dst, ins);
            }
        }
    }
    let mut out = BTreeSet::new();
    let mut frontier: Vec<ValueId> = roots
        .iter()
        .filter_map(|r| match r {
            ValueRef::Value(v) => Some(*v),
            _ => None,
        })
        .collect();
    let mut visited: BTreeSet<ValueId> = frontier.iter().copied().collect();
    while let Some(v) = frontier.pop() {
        let ins = defs.get(&v).expect("generated operands are defined");
        match ins {
            Instruction::Phi { .. } => {
                out.insert(v);
            }
            Instruction::Def { operands, .. } => {
                for op in operands {
                    if let ValueRef::Value(u) = op {
                        if visited.insert(*u) {
                            frontier.push(*u);
                        }
                    }
                }
            }
            _ => unreachable!("values are defined by phis and defs only"),
        }
    }
    out
}

/// Expected watched blocks per library call site and argument, composed from
/// the phi walk and the path-enumeration frontier oracle. Arguments with no
/// watched blocks are absent.
pub fn watched_blocks_oracle(
    p: &Program,
) -> BTreeMap<crate::ir::SiteId, BTreeMap<usize, BTreeSet<BlockId>>> {
    use crate::ir::Instruction;
    let mut out = BTreeMap::new();
    for f in p.functions().values() {
        if f.is_library || !f.has_body() {
            continue;
        }
        let phi_incoming: BTreeMap<crate::ir::ValueId, Vec<BlockId>> = f
            .blocks
            .iter()
            .flat_map(|b| &b.instrs)
            .filter_map(|ins| match ins {
                Instruction::Phi { dst, incoming } => {
                    Some((*dst, incoming.iter().map(|(b, _)| *b).collect()))
                }
                _ => None,
            })
            .collect();
        for b in &f.blocks {
            for ins in &b.instrs {
                let Instruction::Call { site, callee, args } = ins else {
                    continue;
                };
                if !p.is_library(*callee) {
                    continue;
                }
                let mut per_arg = BTreeMap::new();
                for (ai, arg) in args.iter().enumerate() {
                    let mut watched = BTreeSet::new();
                    for phi in phi_walk_oracle(f, std::slice::from_ref(arg)) {
                        for in_block in &phi_incoming[&phi] {
                            for r in rdf_oracle(f, *in_block) {
                                watched.extend(f.block(r).expect("rdf blocks exist").succs.iter());
                            }
                        }
                    }
                    if !watched.is_empty() {
                        per_arg.insert(ai, watched);
                    }
                }
                out.insert(*site, per_arg);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Trace generation and profiling oracles.
// ---------------------------------------------------------------------------

/// Random well-formed trace against `layout`: block events from the
/// application functions of `p`, site events with correct arity followed by
/// properly nested library call windows.
pub fn random_trace<R: Rng>(
    rng: &mut R,
    p: &Program,
    layout: &crate::plan::FeatureLayout,
) -> Vec<crate::profile::TraceEvent> {
    use crate::profile::TraceEvent as E;
    let libs: Vec<FnId> = p.library_ids().iter().copied().collect();
    let app_blocks: Vec<(FnId, BlockId)> = p
        .functions()
        .values()
        .filter(|f| !f.is_library)
        .flat_map(|f| f.blocks.iter().map(|b| (f.id, b.id)))
        .collect();
    let sites: Vec<crate::ir::SiteId> = layout.sites().collect();

    fn call_tree<R: Rng>(rng: &mut R, libs: &[FnId], depth: usize, out: &mut Vec<crate::profile::TraceEvent>) {
        use crate::profile::TraceEvent as E;
        let f = libs[rng.gen_range(0..libs.len())];
        out.push(E::LibEnter { function: f });
        if depth < 3 {
            for _ in 0..rng.gen_range(0..=2u32) {
                call_tree(rng, libs, depth + 1, out);
            }
        }
        out.push(E::LibExit { function: f });
    }

    let mut events = Vec::new();
    for _ in 0..rng.gen_range(5..40) {
        if rng.gen_bool(0.4) && !app_blocks.is_empty() {
            let (f, b) = app_blocks[rng.gen_range(0..app_blocks.len())];
            events.push(E::BlockExec { function: f, bb: b });
        } else if !sites.is_empty() && !libs.is_empty() {
            let site = sites[rng.gen_range(0..sites.len())];
            let arity = layout.arity(site).expect("listed site");
            let args = (0..arity).map(|_| rng.gen_range(-4..=4) as f64).collect();
            events.push(E::SiteReached { site, args });
            call_tree(rng, &libs, 0, &mut events);
        }
    }
    events
}

/// Chains per site occurrence, recovered by scanning the raw stream with a
/// plain depth counter instead of the profiler's call stack. Returns
/// `(site, set chain, sequence chain)` per site event in trace order.
pub fn chains_oracle(
    events: &[crate::profile::TraceEvent],
) -> Vec<(crate::ir::SiteId, Vec<FnId>, Vec<FnId>)> {
    use crate::profile::TraceEvent as E;
    let mut out = Vec::new();
    let mut i = 0;
    while i < events.len() {
        let E::SiteReached { site, .. } = &events[i] else {
            i += 1;
            continue;
        };
        let mut depth = 0i64;
        let mut seq = Vec::new();
        let mut j = i + 1;
        loop {
            match &events[j] {
                E::LibEnter { function } => {
                    depth += 1;
                    seq.push(*function);
                }
                E::LibExit { .. } => depth -= 1,
                _ => panic!("window interrupted by a non-call event"),
            }
            if depth == 0 {
                break;
            }
            j += 1;
        }
        let mut set = Vec::new();
        for f in &seq {
            if !set.contains(f) {
                set.push(*f);
            }
        }
        out.push((*site, set, seq));
        i = j + 1;
    }
    out
}

// ---------------------------------------------------------------------------
// Decision-tree training oracle: a second, naive greedy implementation.
// ---------------------------------------------------------------------------

/// Nested tree form used to compare implementations structurally.
#[derive(Debug, PartialEq)]
pub enum TreeShape {
    Leaf {
        label: u32,
        support: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeShape>,
        right: Box<TreeShape>,
    },
}

/// Flattens a production model into the nested comparison form.
pub fn tree_shape(model: &crate::tree::DecisionTreeModel) -> TreeShape {
    use crate::tree::Node;
    fn walk(nodes: &[Node], i: usize) -> TreeShape {
        match nodes[i] {
            Node::Leaf { label, support } => TreeShape::Leaf { label, support },
            Node::Internal {
                feature,
                threshold,
                left,
                right,
            } => TreeShape::Split {
                feature,
                threshold,
                left: Box::new(walk(nodes, left)),
                right: Box::new(walk(nodes, right)),
            },
        }
    }
    walk(model.nodes(), 0)
}

/// Greedy induction rebuilt from scratch: full rescans per candidate split
/// instead of incremental sweeps, exact rational comparisons throughout.
/// Same rule set (Gini, midpoint thresholds, lowest-feature-then-lowest-
/// threshold ties, smallest majority label), so the result must be
/// identical to production node for node.
pub fn greedy_tree_oracle(records: &[crate::profile::ProfileRecord], max_depth: usize) -> TreeShape {
    let width = records.iter().map(|r| r.features.len()).max().unwrap_or(0);
    let rows: Vec<usize> = (0..records.len()).collect();
    build(records, width, &rows, max_depth)
}

fn val(records: &[crate::profile::ProfileRecord], i: usize, f: usize) -> f64 {
    records[i].features.get(f).copied().unwrap_or(0.0)
}

fn label_counts(records: &[crate::profile::ProfileRecord], rows: &[usize]) -> BTreeMap<u32, u64> {
    let mut m = BTreeMap::new();
    for i in rows {
        *m.entry(records[*i].label).or_insert(0u64) += 1;
    }
    m
}

fn sq_sum(counts: &BTreeMap<u32, u64>) -> u64 {
    counts.values().map(|c| c * c).sum()
}

fn build(
    records: &[crate::profile::ProfileRecord],
    width: usize,
    rows: &[usize],
    depth_left: usize,
) -> TreeShape {
    let counts = label_counts(records, rows);
    let leaf = || {
        let best = counts
            .iter()
            .fold((0u32, 0u64), |acc, (l, c)| if *c > acc.1 { (*l, *c) } else { acc });
        TreeShape::Leaf {
            label: best.0,
            support: rows.len(),
        }
    };
    if counts.len() == 1 || depth_left == 0 {
        return leaf();
    }

    let n = rows.len() as u128;
    let sp = sq_sum(&counts) as u128;
    // Score of a split as an exact rational q_num/q_den with
    // q = SL/nL + SR/nR; larger is better.
    let mut best: Option<(usize, f64, u128, u128)> = None;
    for f in 0..width {
        let mut values: Vec<f64> = rows.iter().map(|i| val(records, *i, f)).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for pair in values.windows(2) {
            let t = (pair[0] + pair[1]) / 2.0;
            if t >= pair[1] {
                continue;
            }
            let lrows: Vec<usize> = rows
                .iter()
                .copied()
                .filter(|i| val(records, *i, f) <= t)
                .collect();
            let rrows: Vec<usize> = rows
                .iter()
                .copied()
                .filter(|i| val(records, *i, f) > t)
                .collect();
            let (nl, nr) = (lrows.len() as u128, rrows.len() as u128);
            let sl = sq_sum(&label_counts(records, &lrows)) as u128;
            let sr = sq_sum(&label_counts(records, &rrows)) as u128;
            let q_num = sl * nr + sr * nl;
            let q_den = nl * nr;
            // Must strictly beat the unsplit node: q > sp/n.
            if q_num * n <= sp * q_den {
                continue;
            }
            if let Some((_, _, bn, bd)) = best {
                if q_num * bd <= bn * q_den {
                    continue;
                }
            }
            best = Some((f, t, q_num, q_den));
        }
    }

    let Some((f, t, _, _)) = best else {
        return leaf();
    };
    let lrows: Vec<usize> = rows
        .iter()
        .copied()
        .filter(|i| val(records, *i, f) <= t)
        .collect();
    let rrows: Vec<usize> = rows
        .iter()
        .copied()
        .filter(|i| val(records, *i, f) > t)
        .collect();
    TreeShape::Split {
        feature: f,
        threshold: t,
        left: Box::new(build(records, width, &lrows, depth_left - 1)),
        right: Box::new(build(records, width, &rrows, depth_left - 1)),
    }
}

/// Random training table. Labels are partly driven by the features so that
/// splits genuinely help, with a noise fraction to keep nodes impure.
pub fn random_table<R: Rng>(
    rng: &mut R,
    rows: usize,
    width: usize,
    labels: u32,
    distinct: usize,
) -> Vec<crate::profile::ProfileRecord> {
    use crate::ir::SiteId;
    (0..rows)
        .map(|_| {
            let features: Vec<f64> = (0..width)
                .map(|_| rng.gen_range(0..distinct) as f64)
                .collect();
            let label = if rng.gen_bool(0.7) {
                (features.iter().sum::<f64>() as u32) % labels
            } else {
                rng.gen_range(0..labels)
            };
            crate::profile::ProfileRecord {
                site: SiteId(features[0] as u32),
                features,
                label,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// End-to-end simulation scenarios.
// ---------------------------------------------------------------------------

/// Fully wired random simulation input: a dataflow program with varied
/// gadget counts and a few permanently loaded library functions, a trace it
/// can replay, and a model trained on that same trace.
pub struct SimScenario {
    pub program: Program,
    pub plan: crate::plan::ProgramPlan,
    pub model: crate::tree::DecisionTreeModel,
    pub chains: crate::profile::ChainFile,
    pub events: Vec<crate::profile::TraceEvent>,
    pub permanent: BTreeSet<FnId>,
}

/// Returns None when the sampled trace never reached a site (nothing to
/// train on); callers draw again.
pub fn random_sim_scenario<R: Rng>(
    rng: &mut R,
    mode: crate::profile::ChainMode,
) -> Option<SimScenario> {
    let p = random_dataflow_program(rng, 6, 6);
    let funcs: Vec<crate::ir::FunctionDef> = p
        .functions()
        .values()
        .cloned()
        .map(|mut f| {
            f.gadget_count = rng.gen_range(0..=12);
            if f.is_library && rng.gen_bool(0.15) {
                if rng.gen_bool(0.5) {
                    f.instrumentable = false;
                } else {
                    f.blankable = false;
                }
            }
            f
        })
        .collect();
    let p = Program::from_functions(funcs).expect("metadata edits keep the program valid");
    let plan = crate::plan::plan_program(&p).expect("generated programs plan cleanly");
    let layout = crate::plan::FeatureLayout::new(&plan);
    let events = random_trace(rng, &p, &layout);
    let profile = crate::profile::build_profile(&events, &layout, mode)
        .expect("generated traces nest correctly");
    if profile.records.is_empty() {
        return None;
    }
    let model = crate::tree::train_tree(&profile.records, 8).expect("records exist");
    let chains = crate::profile::ChainFile::from_profile(&profile);
    let permanent = p
        .functions()
        .values()
        .filter(|f| f.is_library && (!f.instrumentable || !f.blankable))
        .map(|f| f.id)
        .collect();
    Some(SimScenario {
        program: p,
        plan,
        model,
        chains,
        events,
        permanent,
    })
}

// ---------------------------------------------------------------------------
// Verification harnesses (used by the acceptance suite).
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Clone)]
pub struct DominanceVerification {
    pub cfgs: u64,
    pub postdom_mismatches: u64,
    pub rdf_mismatches: u64,
    pub first_mismatch: Option<String>,
}

impl DominanceVerification {
    pub fn clean(&self) -> bool {
        self.postdom_mismatches == 0 && self.rdf_mismatches == 0
    }

    fn absorb(&mut self, other: DominanceVerification) {
        self.cfgs += other.cfgs;
        self.postdom_mismatches += other.postdom_mismatches;
        self.rdf_mismatches += other.rdf_mismatches;
        if self.first_mismatch.is_none() {
            self.first_mismatch = other.first_mismatch;
        }
    }
}

/// Checks one CFG: production postdominators and RDF against the
/// path-enumeration and definitional oracles. `scratch` must hold at least
/// `succs.len()` blocks with ids 0..n; its successor lists are overwritten.
fn verify_one(
    succs: &[Vec<u32>],
    scratch: &mut FunctionDef,
    engine: &mut PostdomEngine,
    out: &mut DominanceVerification,
) {
    let n = succs.len();
    for (i, su) in succs.iter().enumerate() {
        let bl = &mut scratch.blocks[i];
        bl.succs.clear();
        bl.succs.extend(su.iter().map(|t| BlockId(*t)));
    }
    let pd = engine.compute(scratch).expect("enumerated CFGs are well-formed");
    let m = to_masks(succs);
    let aug = augment(&m, n);
    let oracle_pd = pd_by_paths(&aug, n);
    let oracle_rdf = rdf_by_definition(&aug, &oracle_pd, n);
    out.cfgs += 1;
    for a in 0..n {
        let got = pd.row_word(a);
        let want = oracle_pd[a] as u64;
        if got != want {
            out.postdom_mismatches += (got ^ want).count_ones() as u64;
            if out.first_mismatch.is_none() {
                out.first_mismatch = Some(format!(
                    "postdom mismatch on {succs:?}: row {a}: got {got:#b}, oracle {want:#b}"
                ));
            }
        }
    }
    for b in 0..n {
        let got = pd.rdf_mask(b);
        let want = oracle_rdf[b] as u64;
        if got != want {
            out.rdf_mismatches += (got ^ want).count_ones() as u64;
            if out.first_mismatch.is_none() {
                out.first_mismatch = Some(format!(
                    "rdf mismatch on {succs:?}: rdf({b}): got {got:#b}, oracle {want:#b}"
                ));
            }
        }
    }
}

/// Runs the exhaustive sweep: every connected CFG with 1..=`max_blocks`
/// blocks. Parallelized over the entry block's successor choice when the
/// `parallel` feature is on.
pub fn verify_dominance_exhaustive(max_blocks: usize) -> DominanceVerification {
    let mut total = DominanceVerification::default();
    for n in 1..=max_blocks {
        let choices = successor_choices(n);
        let firsts: Vec<Vec<u32>> = choices.clone();
        let parts = par::map_slice(&firsts, |first| {
            let mut out = DominanceVerification::default();
            let mut scratch = cfg_function(&vec![Vec::new(); n]);
            let mut engine = PostdomEngine::new();
            let mut succs: Vec<Vec<u32>> = vec![Vec::new(); n];
            succs[0] = first.clone();
            let mut disc: Vec<u32> = vec![0];
            let mut disc_mask: u32 = 1;
            for t in first {
                if disc_mask >> *t & 1 == 0 {
                    disc_mask |= 1 << *t;
                    disc.push(*t);
                }
            }
            if 1 < disc.len() {
                enumerate_from(1, n, &choices, &mut succs, &mut disc, &mut disc_mask, &mut |s| {
                    verify_one(s, &mut scratch, &mut engine, &mut out)
                });
            } else if disc.len() == n {
                verify_one(&succs, &mut scratch, &mut engine, &mut out);
            }
            out
        });
        for p in parts {
            total.absorb(p);
        }
    }
    total
}

/// Random sweep: `count` CFGs with block counts in 2..=`max_blocks`.
pub fn verify_dominance_random(count: usize, max_blocks: usize, seed: u64) -> DominanceVerification {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = DominanceVerification::default();
    let mut scratch = cfg_function(&vec![Vec::new(); max_blocks]);
    let mut engine = PostdomEngine::new();
    for _ in 0..count {
        let n = rng.gen_range(2..=max_blocks);
        scratch.blocks.truncate(n);
        while scratch.blocks.len() < n {
            scratch.blocks.push(block(scratch.blocks.len() as u32, &[], vec![]));
        }
        let succs = random_connected_cfg(&mut rng, n);
        verify_one(&succs, &mut scratch, &mut engine, &mut out);
    }
    out
}
