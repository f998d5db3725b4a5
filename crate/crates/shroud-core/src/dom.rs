//! Postdominators and reverse dominance frontiers.
//!
//! Multiple exits and exit-free loops are handled by a synthesized virtual
//! exit node: it receives an edge from every block with no successors, and
//! one edge from each strongly connected component that cannot reach any
//! exit (from its lowest block id, so results are deterministic). The
//! virtual node exists only during the computation; query results speak
//! about real blocks.
//!
//! The fixpoint is the classic iterative dataflow over bitsets, which is
//! exact and more than fast enough at the block counts this crate sees.
//! `rdf(b)` is the dominance frontier of `b` on the edge-reversed CFG,
//! computed directly from the postdominator sets: `u ∈ rdf(b)` iff some
//! successor of `u` is postdominated by `b` while `u` itself is not strictly
//! postdominated by `b` — exactly "the blocks `b` is control dependent on".

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::ir::{BlockId, FnId, FunctionDef};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("function {function} ({name}) has no body")]
    EmptyBody { function: FnId, name: String },
    #[error("function {function} ({name}): block {block} has an edge to missing block {target}")]
    DanglingEdge {
        function: FnId,
        name: String,
        block: BlockId,
        target: BlockId,
    },
    #[error("unknown block {0}")]
    UnknownBlock(BlockId),
}

/// Postdominator sets for one function, with RDF queries layered on top.
#[derive(Debug, Clone, Default)]
pub struct Postdominance {
    ids: Vec<BlockId>,     // sorted
    words: usize,          // stride of `bits`
    bits: Vec<u64>,        // row i: set of block indices postdominating ids[i]
    succ_index: Vec<u32>,  // CSR successor indices
    succ_start: Vec<u32>,  // CSR offsets, len n+1
}

impl Postdominance {
    pub fn block_ids(&self) -> &[BlockId] {
        &self.ids
    }

    fn index_of(&self, b: BlockId) -> Result<usize, GraphError> {
        self.ids
            .binary_search(&b)
            .map_err(|_| GraphError::UnknownBlock(b))
    }

    #[inline]
    fn bit(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.words + col / 64] >> (col % 64) & 1 == 1
    }

    /// Whole postdominator row as one word; only valid while the matrix fits
    /// a single word per row (≤ 64 blocks).
    pub(crate) fn row_word(&self, row: usize) -> u64 {
        debug_assert_eq!(self.words, 1);
        self.bits[row]
    }

    /// RDF of the block at index `bi` as an index bitmask (≤ 64 blocks).
    pub(crate) fn rdf_mask(&self, bi: usize) -> u64 {
        let mut m = 0u64;
        for u in 0..self.ids.len() {
            if self.in_rdf(bi, u) {
                m |= 1 << u;
            }
        }
        m
    }

    /// Does `b` postdominate `a`? Reflexive: every block postdominates
    /// itself.
    pub fn postdominates(&self, b: BlockId, a: BlockId) -> Result<bool, GraphError> {
        let (bi, ai) = (self.index_of(b)?, self.index_of(a)?);
        Ok(self.bit(ai, bi))
    }

    /// The set of blocks postdominating `a`.
    pub fn postdominators_of(&self, a: BlockId) -> Result<BTreeSet<BlockId>, GraphError> {
        let ai = self.index_of(a)?;
        Ok(self.row_set(ai))
    }

    fn row_set(&self, row: usize) -> BTreeSet<BlockId> {
        let mut out = BTreeSet::new();
        for col in 0..self.ids.len() {
            if self.bit(row, col) {
                out.insert(self.ids[col]);
            }
        }
        out
    }

    /// Map from each block to its postdominator set.
    pub fn as_map(&self) -> BTreeMap<BlockId, BTreeSet<BlockId>> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (*id, self.row_set(i)))
            .collect()
    }

    /// Reverse dominance frontier of `b`: the blocks `b` is control
    /// dependent on.
    pub fn rdf(&self, b: BlockId) -> Result<BTreeSet<BlockId>, GraphError> {
        let bi = self.index_of(b)?;
        let mut out = BTreeSet::new();
        for u in 0..self.ids.len() {
            if self.in_rdf(bi, u) {
                out.insert(self.ids[u]);
            }
        }
        Ok(out)
    }

    #[inline]
    pub(crate) fn in_rdf(&self, bi: usize, u: usize) -> bool {
        if u != bi && self.bit(u, bi) {
            return false; // b strictly postdominates u
        }
        let lo = self.succ_start[u] as usize;
        let hi = self.succ_start[u + 1] as usize;
        self.succ_index[lo..hi]
            .iter()
            .any(|s| self.bit(*s as usize, bi))
    }

    /// RDF of every block at once.
    pub fn rdf_all(&self) -> BTreeMap<BlockId, BTreeSet<BlockId>> {
        self.ids
            .iter()
            .enumerate()
            .map(|(bi, id)| {
                let set = (0..self.ids.len())
                    .filter(|u| self.in_rdf(bi, *u))
                    .map(|u| self.ids[u])
                    .collect();
                (*id, set)
            })
            .collect()
    }

}

/// Computes postdominator sets for `f`. Validates the CFG shape it needs
/// (non-empty body, no dangling successor edges) so it is safe to call with
/// hand-built `FunctionDef`s that never went through [`crate::ir::Program`].
/// For many functions in a row, [`PostdomEngine`] amortizes the buffers.
pub fn compute_postdominators(f: &FunctionDef) -> Result<Postdominance, GraphError> {
    let mut engine = PostdomEngine::new();
    engine.compute(f)?;
    Ok(engine.out)
}

/// Reusable postdominator solver: owns every buffer the computation needs,
/// so repeated [`PostdomEngine::compute`] calls stop allocating once the
/// capacities warm up. Worth it when sweeping thousands of small CFGs.
#[derive(Debug, Default)]
pub struct PostdomEngine {
    out: Postdominance,
    order: Vec<u32>, // position in f.blocks of each sorted id
    can_exit: Vec<bool>,
    work: Vec<u32>, // DFS stack / SCC member scratch
    index: Vec<u32>,
    low: Vec<u32>,
    on_stack: Vec<bool>,
    scc_stack: Vec<u32>,
    frames: Vec<(u32, u32)>, // (node, next successor position)
    extra_to_exit: Vec<u32>,
    aug_bits: Vec<u64>,
    row_scratch: Vec<u64>,
}

impl PostdomEngine {
    pub fn new() -> Self {
        Self::default()
    }

    /// Solves `f`; the result borrow is valid until the next `compute`.
    pub fn compute(&mut self, f: &FunctionDef) -> Result<&Postdominance, GraphError> {
        if f.blocks.is_empty() {
            return Err(GraphError::EmptyBody {
                function: f.id,
                name: f.name.clone(),
            });
        }
        let n = f.blocks.len();
        let ids = &mut self.out.ids;
        ids.clear();
        ids.extend(f.blocks.iter().map(|b| b.id));
        ids.sort_unstable();

        self.order.clear();
        self.order.extend(0..n as u32);
        self.order.sort_unstable_by_key(|p| f.blocks[*p as usize].id);

        // CSR successor lists in index space, one row per sorted id.
        self.out.succ_index.clear();
        self.out.succ_start.clear();
        self.out.succ_start.push(0);
        for i in 0..n {
            let b = &f.blocks[self.order[i] as usize];
            for t in &b.succs {
                let ti = self
                    .out
                    .ids
                    .binary_search(t)
                    .map_err(|_| GraphError::DanglingEdge {
                        function: f.id,
                        name: f.name.clone(),
                        block: b.id,
                        target: *t,
                    })?;
                self.out.succ_index.push(ti as u32);
            }
            self.out.succ_start.push(self.out.succ_index.len() as u32);
        }

        self.solve(n);
        Ok(&self.out)
    }

    fn succs(&self, u: usize) -> &[u32] {
        &self.out.succ_index[self.out.succ_start[u] as usize..self.out.succ_start[u + 1] as usize]
    }

    /// The dataflow core. Reads the CSR already staged in `self.out`, leaves
    /// the finished matrix in `self.out.bits`.
    fn solve(&mut self, n: usize) {
        let vexit = n; // virtual exit index
        let aug_words = (n + 1).div_ceil(64);

        // Blocks that can reach a real exit, by fixpoint over forward edges.
        self.can_exit.clear();
        self.can_exit.resize(n, false);
        let mut all_exit = true;
        let mut changed = true;
        while changed {
            changed = false;
            all_exit = true;
            for u in (0..n).rev() {
                if self.can_exit[u] {
                    continue;
                }
                let su = self.succs(u);
                if su.is_empty() || su.iter().any(|s| self.can_exit[*s as usize]) {
                    self.can_exit[u] = true;
                    changed = true;
                } else {
                    all_exit = false;
                }
            }
        }

        // Representatives of exit-free SCCs (Tarjan, iterative). The
        // representative is the lowest block id: ids are sorted, so that is
        // the lowest index. When every block reaches an exit there is
        // nothing to find.
        self.extra_to_exit.clear();
        if !all_exit {
            self.index.clear();
            self.index.resize(n, u32::MAX);
            self.low.clear();
            self.low.resize(n, 0);
            self.on_stack.clear();
            self.on_stack.resize(n, false);
            self.scc_stack.clear();
            self.frames.clear();
            let mut next = 0u32;
            for root in 0..n as u32 {
                if self.index[root as usize] != u32::MAX {
                    continue;
                }
                self.frames.push((root, 0));
                while let Some(&(u, pos)) = self.frames.last() {
                    let ui = u as usize;
                    if pos == 0 {
                        self.index[ui] = next;
                        self.low[ui] = next;
                        next += 1;
                        self.scc_stack.push(u);
                        self.on_stack[ui] = true;
                    }
                    let su_lo = self.out.succ_start[ui] as usize;
                    let su_hi = self.out.succ_start[ui + 1] as usize;
                    if su_lo + (pos as usize) < su_hi {
                        let v = self.out.succ_index[su_lo + pos as usize] as usize;
                        self.frames.last_mut().expect("frame").1 += 1;
                        if self.index[v] == u32::MAX {
                            self.frames.push((v as u32, 0));
                        } else if self.on_stack[v] {
                            self.low[ui] = self.low[ui].min(self.index[v]);
                        }
                    } else {
                        self.frames.pop();
                        if let Some(&(parent, _)) = self.frames.last() {
                            let pi = parent as usize;
                            self.low[pi] = self.low[pi].min(self.low[ui]);
                        }
                        if self.low[ui] == self.index[ui] {
                            // Root of an SCC; pop its members.
                            self.work.clear();
                            loop {
                                let w = self.scc_stack.pop().expect("scc stack");
                                self.on_stack[w as usize] = false;
                                self.work.push(w);
                                if w == u {
                                    break;
                                }
                            }
                            let first = self.work[0] as usize;
                            let non_trivial =
                                self.work.len() > 1 || self.succs(first).contains(&(first as u32));
                            if non_trivial && self.work.iter().all(|m| !self.can_exit[*m as usize])
                            {
                                let rep = *self.work.iter().min().expect("non-empty");
                                self.extra_to_exit.push(rep);
                            }
                        }
                    }
                }
            }
        }

        if aug_words == 1 {
            self.solve_words1(n);
            return;
        }

        // Iterative dataflow: row = {self} ∪ ⋂ succ rows, vexit = {vexit}.
        let rows = n + 1;
        let bits = &mut self.aug_bits;
        bits.clear();
        bits.resize(rows * aug_words, u64::MAX);
        // Clear unused high bits so intersections stay tight.
        let used = n + 1;
        let tail_mask = if used % 64 == 0 {
            u64::MAX
        } else {
            (1u64 << (used % 64)) - 1
        };
        for r in 0..rows {
            bits[r * aug_words + aug_words - 1] &= tail_mask;
        }
        {
            let row = &mut bits[vexit * aug_words..(vexit + 1) * aug_words];
            row.fill(0);
            row[vexit / 64] |= 1u64 << (vexit % 64);
        }

        self.row_scratch.clear();
        self.row_scratch.resize(aug_words, 0);
        let Self {
            out,
            extra_to_exit,
            aug_bits,
            row_scratch: scratch,
            ..
        } = self;
        let mut changed = true;
        while changed {
            changed = false;
            for u in (0..n).rev() {
                scratch.fill(u64::MAX);
                scratch[aug_words - 1] &= tail_mask;
                let lo = out.succ_start[u] as usize;
                let hi = out.succ_start[u + 1] as usize;
                for k in lo..hi {
                    let r = out.succ_index[k] as usize * aug_words;
                    for w in 0..aug_words {
                        scratch[w] &= aug_bits[r + w];
                    }
                }
                let to_exit = lo == hi || extra_to_exit.contains(&(u as u32));
                if to_exit {
                    let r = vexit * aug_words;
                    for w in 0..aug_words {
                        scratch[w] &= aug_bits[r + w];
                    }
                }
                scratch[u / 64] |= 1u64 << (u % 64);
                let row = &mut aug_bits[u * aug_words..(u + 1) * aug_words];
                if row != &scratch[..] {
                    row.copy_from_slice(scratch);
                    changed = true;
                }
            }
        }

        // Strip the virtual exit: keep n rows, clear its bit.
        let words = n.div_ceil(64).max(1);
        out.words = words;
        out.bits.clear();
        out.bits.resize(n * words, 0);
        for r in 0..n {
            for w in 0..words {
                let mut word = aug_bits[r * aug_words + w];
                if vexit / 64 == w {
                    word &= !(1u64 << (vexit % 64));
                }
                out.bits[r * words + w] = word;
            }
        }
    }

    /// Same dataflow as the tail of [`PostdomEngine::solve`], specialized to
    /// one word per row (at most 63 blocks plus the virtual exit), which is
    /// nearly every function in practice.
    fn solve_words1(&mut self, n: usize) {
        let vexit = n;
        let full = if n + 1 == 64 {
            u64::MAX
        } else {
            (1u64 << (n + 1)) - 1
        };
        let mut extra_mask = 0u64;
        for e in &self.extra_to_exit {
            extra_mask |= 1 << *e;
        }
        let rows = &mut self.aug_bits;
        rows.clear();
        rows.resize(n + 1, full);
        rows[vexit] = 1 << vexit;
        let succ_start = &self.out.succ_start;
        let succ_index = &self.out.succ_index;
        let mut changed = true;
        while changed {
            changed = false;
            for u in (0..n).rev() {
                let lo = succ_start[u] as usize;
                let hi = succ_start[u + 1] as usize;
                let mut x = full;
                for s in &succ_index[lo..hi] {
                    x &= rows[*s as usize];
                }
                if lo == hi || extra_mask >> u & 1 == 1 {
                    x &= rows[vexit];
                }
                x |= 1 << u;
                if x != rows[u] {
                    rows[u] = x;
                    changed = true;
                }
            }
        }
        self.out.words = 1;
        self.out.bits.clear();
        let strip = !(1u64 << vexit);
        self.out.bits.extend(rows[..n].iter().map(|r| r & strip));
    }
}

/// Reverse dominance frontier of block `b` in `f`. Convenience wrapper; to
/// query many blocks, compute [`Postdominance`] once and call
/// [`Postdominance::rdf`].
pub fn compute_rdf(f: &FunctionDef, b: BlockId) -> Result<BTreeSet<BlockId>, GraphError> {
    compute_postdominators(f)?.rdf(b)
}
