//! Decision-tree training and prediction over profile records.
//!
//! One global tree serves the whole program: the site id is feature 0 and
//! every split tests `feature <= threshold`. Training is classic greedy
//! induction with the Gini criterion, thresholds are midpoints between
//! adjacent distinct values, and a node becomes a leaf when it is pure, the
//! depth limit is reached, or no candidate split helps.
//!
//! All split comparisons are done in exact integer arithmetic. With label
//! counts `c`, a side of size `m` scores `S = sum(c^2)`; minimizing weighted
//! Gini impurity is equivalent to maximizing `SL/nL + SR/nR`, a rational
//! comparable by cross-multiplication in u128. No float rounding can make
//! two runs (or two platforms, or an independent reimplementation) disagree
//! on which split wins a tie.

use crate::ir::SiteId;
use crate::profile::ProfileRecord;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Internal {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        label: u32,
        support: usize,
    },
}

/// A trained tree. The root is always node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTreeModel {
    nodes: Vec<Node>,
    max_depth: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("cannot train on an empty record set")]
    Empty,
}

/// What the predictor answers once the site is checked against the training
/// set. Sites never seen in training cannot be looked up in the tree
/// meaningfully; the caller applies its conservative fallback instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prediction {
    Label(u32),
    UnknownSite,
}

impl DecisionTreeModel {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// The training depth bound (edges from root to deepest allowed leaf).
    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    /// Actual depth: longest root-to-leaf edge count.
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Internal { left, right, .. } => {
                    1 + walk(nodes, left).max(walk(nodes, right))
                }
            }
        }
        walk(&self.nodes, 0)
    }

    /// Root-to-leaf descent. Features beyond the vector read as 0.
    pub fn predict(&self, features: &[f64]) -> u32 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { label, .. } => return label,
                Node::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let v = features.get(feature).copied().unwrap_or(0.0);
                    i = if v <= threshold { left } else { right };
                }
            }
        }
    }

    /// Predict with the unknown-site guard: `features[0]` must be a site
    /// that contributed training records, otherwise the sentinel is
    /// returned and the caller falls back to its static policy.
    pub fn predict_checked(&self, features: &[f64], trained: &BTreeSet<SiteId>) -> Prediction {
        let site = features.first().copied().unwrap_or(0.0);
        if site < 0.0 || site.fract() != 0.0 || !trained.contains(&SiteId(site as u32)) {
            return Prediction::UnknownSite;
        }
        Prediction::Label(self.predict(features))
    }
}

/// Exact score of one side: n and sum of squared label counts.
#[derive(Clone, Copy)]
struct Side {
    n: u64,
    s: u64,
}

/// True iff splitting is strictly better than not splitting:
/// n·(SL·nR + SR·nL) > Sp·nL·nR, all exact.
fn improves(parent_s: u64, n: u64, l: Side, r: Side) -> bool {
    let q = (l.s as u128) * (r.n as u128) + (r.s as u128) * (l.n as u128);
    (n as u128) * q > (parent_s as u128) * (l.n as u128) * (r.n as u128)
}

/// True iff candidate `a` scores strictly higher than `b`:
/// Qa > Qb with Q = (SL·nR + SR·nL)/(nL·nR).
fn strictly_better(a: (Side, Side), b: (Side, Side)) -> bool {
    let qa = (a.0.s as u128) * (a.1.n as u128) + (a.1.s as u128) * (a.0.n as u128);
    let qb = (b.0.s as u128) * (b.1.n as u128) + (b.1.s as u128) * (b.0.n as u128);
    qa * (b.0.n as u128) * (b.1.n as u128) > qb * (a.0.n as u128) * (a.1.n as u128)
}

fn feature_of(r: &ProfileRecord, f: usize) -> f64 {
    r.features.get(f).copied().unwrap_or(0.0)
}

/// Greedy top-down induction. `max_depth` counts edges; 0 forces a single
/// leaf. Ties among splits go to the lowest feature index, then the lowest
/// threshold; label ties at leaves go to the smallest label.
pub fn train_tree(records: &[ProfileRecord], max_depth: usize) -> Result<DecisionTreeModel, TrainError> {
    if records.is_empty() {
        return Err(TrainError::Empty);
    }
    let width = records.iter().map(|r| r.features.len()).max().unwrap_or(0);
    let mut nodes = Vec::new();
    let rows: Vec<usize> = (0..records.len()).collect();
    grow(records, width, &rows, 0, max_depth, &mut nodes);
    Ok(DecisionTreeModel { nodes, max_depth })
}

fn majority_label(counts: &BTreeMap<u32, u64>) -> u32 {
    // BTreeMap iterates labels ascending, so on equal counts the smallest
    // label is kept.
    let mut best = (0u32, 0u64);
    for (l, c) in counts {
        if *c > best.1 {
            best = (*l, *c);
        }
    }
    best.0
}

fn grow(
    records: &[ProfileRecord],
    width: usize,
    rows: &[usize],
    depth: usize,
    max_depth: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    for i in rows {
        *counts.entry(records[*i].label).or_default() += 1;
    }
    let n = rows.len() as u64;
    let parent_s: u64 = counts.values().map(|c| c * c).sum();

    let leaf = |nodes: &mut Vec<Node>| {
        let id = nodes.len();
        nodes.push(Node::Leaf {
            label: majority_label(&counts),
            support: rows.len(),
        });
        id
    };

    if counts.len() == 1 || depth == max_depth {
        return leaf(nodes);
    }

    // Pick the best split over every feature and candidate threshold.
    let mut best: Option<(usize, f64, (Side, Side))> = None;
    let mut sorted: Vec<(f64, u32)> = Vec::with_capacity(rows.len());
    for f in 0..width {
        sorted.clear();
        sorted.extend(rows.iter().map(|i| (feature_of(&records[*i], f), records[*i].label)));
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

        // Sweep group by group of equal values, keeping exact left/right
        // label statistics incrementally.
        let mut left: BTreeMap<u32, u64> = BTreeMap::new();
        let mut l = Side { n: 0, s: 0 };
        let mut right = counts.clone();
        let mut r = Side { n, s: parent_s };
        let mut gi = 0;
        while gi < sorted.len() {
            let v = sorted[gi].0;
            let mut gj = gi;
            while gj < sorted.len() && sorted[gj].0 == v {
                let lab = sorted[gj].1;
                let cl = left.entry(lab).or_default();
                l.s += 2 * *cl + 1;
                *cl += 1;
                let cr = right.get_mut(&lab).expect("label present on the right");
                r.s -= 2 * *cr - 1;
                *cr -= 1;
                l.n += 1;
                r.n -= 1;
                gj += 1;
            }
            if gj < sorted.len() {
                let next = sorted[gj].0;
                let t = (v + next) / 2.0;
                // Guard against midpoint rounding collapsing onto `next`,
                // which would leave the right side empty.
                if t < next {
                    let cand = (l, r);
                    let ok = improves(parent_s, n, l, r)
                        && best.as_ref().is_none_or(|b| strictly_better(cand, b.2));
                    if ok {
                        best = Some((f, t, cand));
                    }
                }
            }
            gi = gj;
        }
    }

    let Some((feature, threshold, _)) = best else {
        return leaf(nodes);
    };

    let (lrows, rrows): (Vec<usize>, Vec<usize>) = rows
        .iter()
        .partition(|i| feature_of(&records[**i], feature) <= threshold);
    let id = nodes.len();
    nodes.push(Node::Leaf { label: 0, support: 0 }); // placeholder, patched below
    let left = grow(records, width, &lrows, depth + 1, max_depth, nodes);
    let right = grow(records, width, &rrows, depth + 1, max_depth, nodes);
    nodes[id] = Node::Internal {
        feature,
        threshold,
        left,
        right,
    };
    id
}

/// Replaces every test on a feature fixed by `known` with the taken child.
/// The result answers exactly like the original on all inputs agreeing with
/// `known`; an empty map returns an identical tree.
pub fn prune_constant_paths(
    model: &DecisionTreeModel,
    known: &BTreeMap<usize, f64>,
) -> DecisionTreeModel {
    fn copy(
        src: &[Node],
        i: usize,
        known: &BTreeMap<usize, f64>,
        out: &mut Vec<Node>,
    ) -> usize {
        match src[i] {
            Node::Leaf { label, support } => {
                let id = out.len();
                out.push(Node::Leaf { label, support });
                id
            }
            Node::Internal {
                feature,
                threshold,
                left,
                right,
            } => {
                if let Some(v) = known.get(&feature) {
                    let taken = if *v <= threshold { left } else { right };
                    return copy(src, taken, known, out);
                }
                let id = out.len();
                out.push(Node::Leaf { label: 0, support: 0 });
                let l = copy(src, left, known, out);
                let r = copy(src, right, known, out);
                out[id] = Node::Internal {
                    feature,
                    threshold,
                    left: l,
                    right: r,
                };
                id
            }
        }
    }
    let mut nodes = Vec::new();
    copy(&model.nodes, 0, known, &mut nodes);
    DecisionTreeModel {
        nodes,
        max_depth: model.max_depth,
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TreeTextError {
    #[error("line 1: bad header: {0}")]
    Header(String),
    #[error("line {line}: malformed tree line: {text}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: duplicate node id {id}")]
    Duplicate { line: usize, id: usize },
    #[error("invalid tree structure: {0}")]
    Structure(String),
}

/// Text form: header `dtree v1 depth=<d> nodes=<n>`, then one line per node
/// in id order. Node 0 is the root. Thresholds print with full round-trip
/// precision.
pub fn to_text(model: &DecisionTreeModel) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "dtree v1 depth={} nodes={}",
        model.depth(),
        model.nodes.len()
    );
    for (i, node) in model.nodes.iter().enumerate() {
        match node {
            Node::Internal {
                feature,
                threshold,
                left,
                right,
            } => {
                let _ = writeln!(s, "N {i} f={feature} t={threshold} L={left} R={right}");
            }
            Node::Leaf { label, support } => {
                let _ = writeln!(s, "L {i} label={label} n={support}");
            }
        }
    }
    s
}

fn field<'a>(tok: Option<&'a str>, prefix: &str) -> Option<&'a str> {
    tok.and_then(|t| t.strip_prefix(prefix))
}

pub fn from_text(text: &str) -> Result<DecisionTreeModel, TreeTextError> {
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(TreeTextError::Header(String::new()));
    };
    let mut h = header.split_whitespace();
    let magic = (h.next(), h.next());
    let depth: usize = field(h.next(), "depth=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| TreeTextError::Header(header.to_string()))?;
    let count: usize = field(h.next(), "nodes=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| TreeTextError::Header(header.to_string()))?;
    if magic != (Some("dtree"), Some("v1")) || h.next().is_some() || count == 0 {
        return Err(TreeTextError::Header(header.to_string()));
    }

    let mut nodes: Vec<Option<Node>> = vec![None; count];
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let malformed = || TreeTextError::Malformed {
            line: lineno,
            text: line.to_string(),
        };
        let mut tok = line.split_whitespace();
        let kind = tok.next().ok_or_else(malformed)?;
        let id: usize = tok
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(malformed)?;
        let node = match kind {
            "N" => {
                let feature = field(tok.next(), "f=")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(malformed)?;
                let threshold = field(tok.next(), "t=")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(malformed)?;
                let left = field(tok.next(), "L=")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(malformed)?;
                let right = field(tok.next(), "R=")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(malformed)?;
                Node::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                }
            }
            "L" => {
                let label = field(tok.next(), "label=")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(malformed)?;
                let support = field(tok.next(), "n=")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(malformed)?;
                Node::Leaf { label, support }
            }
            _ => return Err(malformed()),
        };
        if tok.next().is_some() || id >= count {
            return Err(malformed());
        }
        if nodes[id].is_some() {
            return Err(TreeTextError::Duplicate { line: lineno, id });
        }
        nodes[id] = Some(node);
    }

    let nodes: Vec<Node> = nodes
        .into_iter()
        .enumerate()
        .map(|(i, n)| n.ok_or_else(|| TreeTextError::Structure(format!("node {i} missing"))))
        .collect::<Result<_, _>>()?;

    // Every node must be reached exactly once from the root: a tree, not a
    // DAG or a forest.
    let mut seen = vec![false; nodes.len()];
    let mut stack = vec![0usize];
    while let Some(i) = stack.pop() {
        if seen[i] {
            return Err(TreeTextError::Structure(format!(
                "node {i} reached twice; not a tree"
            )));
        }
        seen[i] = true;
        if let Node::Internal { left, right, .. } = nodes[i] {
            for c in [left, right] {
                if c >= nodes.len() {
                    return Err(TreeTextError::Structure(format!(
                        "node {i} references missing child {c}"
                    )));
                }
                stack.push(c);
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(TreeTextError::Structure(format!(
            "node {i} unreachable from the root"
        )));
    }

    let model = DecisionTreeModel {
        nodes,
        max_depth: depth,
    };
    if model.depth() != depth {
        return Err(TreeTextError::Structure(format!(
            "header depth {} but actual depth {}",
            depth,
            model.depth()
        )));
    }
    Ok(model)
}
