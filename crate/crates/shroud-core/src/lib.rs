//! Analyses and a deterministic runtime simulator for demand-driven library
//! loading.
//!
//! The pipeline this crate implements keeps library function bodies zeroed
//! ("shrouded") until a prediction says they are about to run, copies the
//! predicted call chain back in, and blanks it again afterwards. The crate is
//! organized along that pipeline:
//!
//! * [`ir`] — program representation: functions, basic blocks, SSA-ish
//!   instructions, and the on-disk JSON schema.
//! * [`dom`] — postdominators and reverse dominance frontiers on a CFG.
//! * [`callgraph`] — call-graph derivation, library reachability, and static
//!   chain depth.
//! * [`divergence`] — classifies library functions by whether every execution
//!   produces the same call chain.
//! * [`plan`] — decides which blocks and argument values to watch for each
//!   library call site.
//! * [`profile`] — replays traces into training records and interns call
//!   chains.
//! * [`tree`] — a small CART-style decision tree over profile records.
//! * [`sim`] — the loader simulator: blanking, copy-back, mispredict audits,
//!   and attack injection.
//! * [`metrics`] — exposure and gadget-reduction arithmetic plus report
//!   emission.
//! * [`corpus`] — seeded scenario generator producing programs, traces, and
//!   ground-truth tables.
//! * [`oracles`] — brute-force reference implementations used by the test
//!   suite to verify the fast paths above.
//!
//! Batch entry points use rayon when the `parallel` feature (default) is
//! enabled and fall back to plain iterators otherwise.

pub mod callgraph;
pub mod corpus;
pub mod divergence;
pub mod dom;
pub mod ir;
pub mod metrics;
pub mod oracles;
pub mod plan;
pub mod profile;
pub mod sim;
pub mod tree;

mod par;

pub use ir::{BlockId, FnId, Program, SiteId, ValueId};
