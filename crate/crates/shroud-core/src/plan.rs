//! Instrumentation planning.
//!
//! For every library call site in application code we decide, ahead of time,
//! which basic blocks the runtime must watch. The argument of a call usually
//! flows out of a phi; the branch that *decides* the phi is the interesting
//! context signal. So for each argument we trace its definition back to the
//! phis feeding it, take each phi's incoming blocks, compute their reverse
//! dominance frontiers, and watch the successors of every frontier block.
//! Executing a watched block overwrites the feature slot for that
//! (site, argument) pair with its own block id; the slot therefore holds the
//! last decision actually taken before the call, or 0 if none fired.
//!
//! Each plan also fixes where argument values are copied for later auditing:
//! at the argument's reaching definition, or at the call itself when the
//! argument is a constant, parameter, or function address.

use crate::dom::{compute_postdominators, GraphError};
use crate::ir::{BlockId, FnId, FunctionDef, Instruction, Program, SiteId, ValueId, ValueRef};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlanError {
    /// An operand references a value with no defining instruction.
    #[error("function {function} ({name}): value v{value} has no definition")]
    UndefinedValue {
        function: FnId,
        name: String,
        value: ValueId,
    },
    #[error("site {site}: callee {callee} is not defined in the program")]
    UnknownCallee { site: SiteId, callee: FnId },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Watched blocks for one argument. All watchers of an argument share one
/// feature slot; whichever executes last before the call wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgFeature {
    pub arg: usize,
    pub feature: usize,
    pub watched: Vec<BlockId>,
}

/// Feature slot carrying the runtime value of one argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueFeature {
    pub arg: usize,
    pub feature: usize,
}

/// Where one argument is copied for the audit log: its reaching definition,
/// or the call instruction itself for constants, parameters, and function
/// addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotPoint {
    pub arg: usize,
    pub block: BlockId,
    pub index: usize,
}

/// Everything the runtime needs to know about one library call site.
///
/// Feature ids are dense per site: id 0 is the site id itself, ids 1..
/// cover `arg_features` in argument order, then `value_features` in
/// argument order. Arguments whose trace reaches no phi (constants,
/// parameters, straight-line definitions) get no arg feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SitePlan {
    pub site: SiteId,
    pub function: FnId,
    pub callee: FnId,
    pub args: usize,
    pub arg_features: Vec<ArgFeature>,
    pub value_features: Vec<ValueFeature>,
    pub snapshot_points: Vec<SnapshotPoint>,
}

impl SitePlan {
    /// Length of this site's feature vector including the leading site id.
    pub fn width(&self) -> usize {
        1 + self.arg_features.len() + self.value_features.len()
    }
}

/// All site plans for a program, ordered by site id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProgramPlan {
    pub plans: Vec<SitePlan>,
}

impl ProgramPlan {
    pub fn by_site(&self) -> BTreeMap<SiteId, &SitePlan> {
        self.plans.iter().map(|p| (p.site, p)).collect()
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serialization");
        s.push('\n');
        s
    }

    pub fn from_json_str(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Location and body of each value definition in one function.
struct DefIndex<'a> {
    map: BTreeMap<ValueId, (BlockId, usize, &'a Instruction)>,
}

impl<'a> DefIndex<'a> {
    fn build(f: &'a FunctionDef) -> Self {
        let mut map = BTreeMap::new();
        for b in &f.blocks {
            for (idx, ins) in b.instrs.iter().enumerate() {
                match ins {
                    Instruction::Phi { dst, .. } | Instruction::Def { dst, .. } => {
                        map.insert(*dst, (b.id, idx, ins));
                    }
                    _ => {}
                }
            }
        }
        DefIndex { map }
    }

    fn get(&self, f: &FunctionDef, v: ValueId) -> Result<(BlockId, usize, &'a Instruction), PlanError> {
        self.map.get(&v).copied().ok_or_else(|| PlanError::UndefinedValue {
            function: f.id,
            name: f.name.clone(),
            value: v,
        })
    }
}

fn operands(ins: &Instruction) -> Vec<ValueRef> {
    match ins {
        Instruction::Call { args, .. } => args.clone(),
        Instruction::Phi { incoming, .. } => incoming.iter().map(|(_, v)| *v).collect(),
        Instruction::Def { operands, .. } => operands.clone(),
        Instruction::Branch { cond } => vec![*cond],
    }
}

/// Transitively walk the operands of `def`, collecting every phi reached.
/// Operands defined by a phi are collected without looking through them;
/// operands defined by a `Def` are walked recursively; constants, parameters,
/// and function addresses contribute nothing. Returns the `dst` ids of the
/// collected phis.
pub fn trace_parent_phi(def: &Instruction, f: &FunctionDef) -> Result<BTreeSet<ValueId>, PlanError> {
    let idx = DefIndex::build(f);
    let mut seen = BTreeSet::new();
    let mut out = BTreeSet::new();
    collect_phis(def, f, &idx, &mut seen, &mut out)?;
    Ok(out)
}

fn collect_phis(
    ins: &Instruction,
    f: &FunctionDef,
    idx: &DefIndex<'_>,
    seen: &mut BTreeSet<ValueId>,
    out: &mut BTreeSet<ValueId>,
) -> Result<(), PlanError> {
    for op in operands(ins) {
        let ValueRef::Value(v) = op else { continue };
        let (_, _, def) = idx.get(f, v)?;
        match def {
            Instruction::Phi { .. } => {
                out.insert(v);
            }
            _ => {
                if seen.insert(v) {
                    collect_phis(def, f, idx, seen, out)?;
                }
            }
        }
    }
    Ok(())
}

/// The phis feeding one argument operand. A phi-defined argument is the phi
/// itself; a def-defined argument is traced transitively.
fn arg_phis(
    arg: ValueRef,
    f: &FunctionDef,
    idx: &DefIndex<'_>,
) -> Result<BTreeSet<ValueId>, PlanError> {
    let ValueRef::Value(v) = arg else {
        return Ok(BTreeSet::new());
    };
    let (_, _, def) = idx.get(f, v)?;
    match def {
        Instruction::Phi { .. } => Ok([v].into()),
        _ => {
            let mut seen = [v].into();
            let mut out = BTreeSet::new();
            collect_phis(def, f, idx, &mut seen, &mut out)?;
            Ok(out)
        }
    }
}

/// Plan every library call site in application function `f`.
pub fn plan_instrumentation(p: &Program, f: &FunctionDef) -> Result<Vec<SitePlan>, PlanError> {
    let idx = DefIndex::build(f);
    let pd = compute_postdominators(f)?;
    let succs: BTreeMap<BlockId, &[BlockId]> =
        f.blocks.iter().map(|b| (b.id, b.succs.as_slice())).collect();

    let mut plans = Vec::new();
    for b in &f.blocks {
        for (call_idx, ins) in b.instrs.iter().enumerate() {
            let Instruction::Call { site, callee, args } = ins else {
                continue;
            };
            if p.function(*callee).is_none() {
                return Err(PlanError::UnknownCallee {
                    site: *site,
                    callee: *callee,
                });
            }
            if !p.is_library(*callee) {
                continue;
            }

            let mut arg_features = Vec::new();
            let mut snapshot_points = Vec::new();
            for (ai, arg) in args.iter().enumerate() {
                let mut watched = BTreeSet::new();
                for phi in arg_phis(*arg, f, &idx)? {
                    let (_, _, def) = idx.get(f, phi)?;
                    let Instruction::Phi { incoming, .. } = def else {
                        unreachable!("arg_phis returns phi definitions only");
                    };
                    for (in_block, _) in incoming {
                        for frontier in pd.rdf(*in_block)? {
                            let next = succs.get(&frontier).copied().unwrap_or(&[]);
                            watched.extend(next.iter().copied());
                        }
                    }
                }
                if !watched.is_empty() {
                    arg_features.push(ArgFeature {
                        arg: ai,
                        feature: 0, // assigned below once all args are known
                        watched: watched.into_iter().collect(),
                    });
                }
                let (sb, si) = match arg {
                    ValueRef::Value(v) => {
                        let (db, di, _) = idx.get(f, *v)?;
                        (db, di)
                    }
                    _ => (b.id, call_idx),
                };
                snapshot_points.push(SnapshotPoint {
                    arg: ai,
                    block: sb,
                    index: si,
                });
            }

            let mut next_feature = 1;
            for af in &mut arg_features {
                af.feature = next_feature;
                next_feature += 1;
            }
            let value_features = (0..args.len())
                .map(|ai| {
                    let vf = ValueFeature {
                        arg: ai,
                        feature: next_feature,
                    };
                    next_feature += 1;
                    vf
                })
                .collect();

            plans.push(SitePlan {
                site: *site,
                function: f.id,
                callee: *callee,
                args: args.len(),
                arg_features,
                value_features,
                snapshot_points,
            });
        }
    }
    plans.sort_by_key(|p| p.site);
    Ok(plans)
}

/// Plan every library call site in every application function of `p`.
pub fn plan_program(p: &Program) -> Result<ProgramPlan, PlanError> {
    let app: Vec<&FunctionDef> = p
        .functions()
        .values()
        .filter(|f| !f.is_library && f.has_body())
        .collect();
    let per_fn = crate::par::map_slice(&app, |f| plan_instrumentation(p, f));
    let mut plans = Vec::new();
    for r in per_fn {
        plans.extend(r?);
    }
    plans.sort_by_key(|p| p.site);
    Ok(ProgramPlan { plans })
}

/// Column assignment shared by the profiler, the trainer, and the simulator.
///
/// Every site's feature vector starts with the site id, then its RDF slots,
/// then its argument values. Vectors are padded with zeros to a common
/// `global_width` so rows from different sites can share one table.
#[derive(Debug, Clone, Default)]
pub struct FeatureLayout {
    global_width: usize,
    arity: BTreeMap<SiteId, usize>,
    width: BTreeMap<SiteId, usize>,
    /// (function, block) -> feature slots this block overwrites when executed.
    watchers: BTreeMap<(FnId, BlockId), Vec<(SiteId, usize)>>,
    /// site -> value feature slots in argument order.
    value_slots: BTreeMap<SiteId, Vec<usize>>,
}

impl FeatureLayout {
    pub fn new(plan: &ProgramPlan) -> Self {
        let mut layout = FeatureLayout {
            global_width: 1,
            ..FeatureLayout::default()
        };
        for sp in &plan.plans {
            layout.global_width = layout.global_width.max(sp.width());
            layout.width.insert(sp.site, sp.width());
            layout.arity.insert(sp.site, sp.args);
            for af in &sp.arg_features {
                for w in &af.watched {
                    layout
                        .watchers
                        .entry((sp.function, *w))
                        .or_default()
                        .push((sp.site, af.feature));
                }
            }
            layout
                .value_slots
                .insert(sp.site, sp.value_features.iter().map(|vf| vf.feature).collect());
        }
        layout
    }

    /// Full vector length including the leading site id column.
    pub fn global_width(&self) -> usize {
        self.global_width
    }

    pub fn site_width(&self, site: SiteId) -> Option<usize> {
        self.width.get(&site).copied()
    }

    pub fn arity(&self, site: SiteId) -> Option<usize> {
        self.arity.get(&site).copied()
    }

    pub fn contains_site(&self, site: SiteId) -> bool {
        self.width.contains_key(&site)
    }

    pub fn sites(&self) -> impl Iterator<Item = SiteId> + '_ {
        self.width.keys().copied()
    }

    /// Feature slots overwritten when `block` of `function` executes.
    pub fn watchers(&self, function: FnId, block: BlockId) -> &[(SiteId, usize)] {
        self.watchers
            .get(&(function, block))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Value feature slots of `site` in argument order.
    pub fn value_slots(&self, site: SiteId) -> &[usize] {
        self.value_slots
            .get(&site)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{block, function, ConstValue};

    fn vid(n: u32) -> ValueId {
        ValueId(n)
    }

    /// B0 -> {B1}, B1 -> {B2, B3}, B2 -> {B4}, B3 -> {B4}; the phi in B4
    /// merges values defined in the two arms and feeds a library call.
    fn diamond_program() -> Program {
        let app = function(
            0,
            "main",
            false,
            0,
            vec![
                block(0, &[1], vec![]),
                block(
                    1,
                    &[2, 3],
                    vec![Instruction::Branch {
                        cond: ValueRef::Param(0),
                    }],
                ),
                block(
                    2,
                    &[4],
                    vec![Instruction::Def {
                        dst: vid(1),
                        operands: vec![ValueRef::Const(ConstValue::Int(10))],
                    }],
                ),
                block(
                    3,
                    &[4],
                    vec![Instruction::Def {
                        dst: vid(2),
                        operands: vec![ValueRef::Const(ConstValue::Int(20))],
                    }],
                ),
                block(
                    4,
                    &[],
                    vec![
                        Instruction::Phi {
                            dst: vid(0),
                            incoming: vec![
                                (BlockId(2), ValueRef::Value(vid(1))),
                                (BlockId(3), ValueRef::Value(vid(2))),
                            ],
                        },
                        Instruction::Call {
                            site: SiteId(0),
                            callee: FnId(1),
                            args: vec![ValueRef::Value(vid(0))],
                        },
                    ],
                ),
            ],
        );
        let lib = function(1, "lib_sink", true, 0, vec![block(0, &[], vec![])]);
        Program::from_functions(vec![app, lib]).unwrap()
    }

    #[test]
    fn diamond_watches_the_deciding_branch_arms() {
        let p = diamond_program();
        let plan = plan_program(&p).unwrap();
        assert_eq!(plan.plans.len(), 1);
        let sp = &plan.plans[0];
        assert_eq!(sp.site, SiteId(0));
        assert_eq!(sp.callee, FnId(1));
        assert_eq!(sp.args, 1);
        // RDF of both arms is {B1}; its successors are the arms themselves.
        assert_eq!(sp.arg_features.len(), 1);
        assert_eq!(sp.arg_features[0].arg, 0);
        assert_eq!(sp.arg_features[0].feature, 1);
        assert_eq!(sp.arg_features[0].watched, vec![BlockId(2), BlockId(3)]);
        assert_eq!(sp.value_features, vec![ValueFeature { arg: 0, feature: 2 }]);
        // The argument is phi-defined: snapshot at the phi, not the call.
        assert_eq!(
            sp.snapshot_points,
            vec![SnapshotPoint {
                arg: 0,
                block: BlockId(4),
                index: 0
            }]
        );
    }

    #[test]
    fn constant_arguments_have_no_watched_blocks() {
        let app = function(
            0,
            "main",
            false,
            0,
            vec![block(
                0,
                &[],
                vec![Instruction::Call {
                    site: SiteId(0),
                    callee: FnId(1),
                    args: vec![
                        ValueRef::Const(ConstValue::Int(7)),
                        ValueRef::Const(ConstValue::Float(1.5)),
                    ],
                }],
            )],
        );
        let lib = function(1, "lib_sink", true, 0, vec![block(0, &[], vec![])]);
        let p = Program::from_functions(vec![app, lib]).unwrap();
        let plan = plan_program(&p).unwrap();
        let sp = &plan.plans[0];
        assert!(sp.arg_features.is_empty());
        assert_eq!(
            sp.value_features,
            vec![
                ValueFeature { arg: 0, feature: 1 },
                ValueFeature { arg: 1, feature: 2 }
            ]
        );
        // Constants are copied at the call itself.
        assert_eq!(
            sp.snapshot_points,
            vec![
                SnapshotPoint {
                    arg: 0,
                    block: BlockId(0),
                    index: 0
                },
                SnapshotPoint {
                    arg: 1,
                    block: BlockId(0),
                    index: 0
                }
            ]
        );
    }

    #[test]
    fn tracing_recurses_through_defs_and_stops_at_phis() {
        // d1 <- d2 <- phi1, and d2 also uses phi2: both phis are collected.
        let f = function(
            0,
            "f",
            false,
            0,
            vec![
                block(
                    0,
                    &[1, 2],
                    vec![Instruction::Branch {
                        cond: ValueRef::Param(0),
                    }],
                ),
                block(1, &[3], vec![]),
                block(2, &[3], vec![]),
                block(
                    3,
                    &[],
                    vec![
                        Instruction::Phi {
                            dst: vid(10),
                            incoming: vec![
                                (BlockId(1), ValueRef::Const(ConstValue::Int(1))),
                                (BlockId(2), ValueRef::Const(ConstValue::Int(2))),
                            ],
                        },
                        Instruction::Phi {
                            dst: vid(11),
                            incoming: vec![
                                (BlockId(1), ValueRef::Const(ConstValue::Int(3))),
                                (BlockId(2), ValueRef::Const(ConstValue::Int(4))),
                            ],
                        },
                        Instruction::Def {
                            dst: vid(12),
                            operands: vec![ValueRef::Value(vid(10)), ValueRef::Value(vid(11))],
                        },
                        Instruction::Def {
                            dst: vid(13),
                            operands: vec![ValueRef::Value(vid(12))],
                        },
                    ],
                ),
            ],
        );
        let d1 = Instruction::Def {
            dst: vid(14),
            operands: vec![ValueRef::Value(vid(13))],
        };
        let phis = trace_parent_phi(&d1, &f).unwrap();
        assert_eq!(phis, [vid(10), vid(11)].into());
    }

    #[test]
    fn direct_phi_operand_is_collected_without_recursion() {
        let f = function(
            0,
            "f",
            false,
            0,
            vec![block(
                0,
                &[],
                vec![Instruction::Phi {
                    dst: vid(1),
                    incoming: vec![(BlockId(0), ValueRef::Const(ConstValue::Int(0)))],
                }],
            )],
        );
        let d = Instruction::Def {
            dst: vid(2),
            operands: vec![ValueRef::Value(vid(1))],
        };
        assert_eq!(trace_parent_phi(&d, &f).unwrap(), [vid(1)].into());
    }

    #[test]
    fn undefined_operand_is_an_error() {
        let f = function(0, "f", false, 0, vec![block(0, &[], vec![])]);
        let d = Instruction::Def {
            dst: vid(1),
            operands: vec![ValueRef::Value(vid(99))],
        };
        let err = trace_parent_phi(&d, &f).unwrap_err();
        assert!(matches!(
            err,
            PlanError::UndefinedValue {
                value: ValueId(99),
                ..
            }
        ));
    }

    #[test]
    fn unknown_callee_is_an_error() {
        let app = function(
            0,
            "main",
            false,
            0,
            vec![block(
                0,
                &[],
                vec![Instruction::Call {
                    site: SiteId(0),
                    callee: FnId(42),
                    args: vec![],
                }],
            )],
        );
        let p = Program::from_functions(vec![app]).unwrap();
        let err = plan_program(&p).unwrap_err();
        assert!(matches!(
            err,
            PlanError::UnknownCallee {
                callee: FnId(42),
                ..
            }
        ));
    }

    #[test]
    fn application_callees_are_not_planned() {
        let app = function(
            0,
            "main",
            false,
            0,
            vec![block(
                0,
                &[],
                vec![Instruction::Call {
                    site: SiteId(0),
                    callee: FnId(1),
                    args: vec![ValueRef::Const(ConstValue::Int(1))],
                }],
            )],
        );
        let helper = function(1, "helper", false, 0, vec![block(0, &[], vec![])]);
        let p = Program::from_functions(vec![app, helper]).unwrap();
        let plan = plan_program(&p).unwrap();
        assert!(plan.plans.is_empty());
    }

    #[test]
    fn plan_round_trips_through_json() {
        let p = diamond_program();
        let plan = plan_program(&p).unwrap();
        let text = plan.to_json_string();
        let back = ProgramPlan::from_json_str(&text).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn feature_layout_maps_watchers_to_slots() {
        let p = diamond_program();
        let plan = plan_program(&p).unwrap();
        let layout = FeatureLayout::new(&plan);
        assert_eq!(layout.global_width(), 3);
        assert_eq!(layout.site_width(SiteId(0)), Some(3));
        assert_eq!(layout.watchers(FnId(0), BlockId(2)), &[(SiteId(0), 1)]);
        assert_eq!(layout.watchers(FnId(0), BlockId(3)), &[(SiteId(0), 1)]);
        assert_eq!(layout.watchers(FnId(0), BlockId(1)), &[]);
        assert_eq!(layout.value_slots(SiteId(0)), &[2]);
    }

    #[test]
    fn self_feeding_phi_terminates() {
        // A loop-carried value: the def consumes the phi that consumes the def.
        let f = function(
            0,
            "f",
            false,
            0,
            vec![
                block(0, &[1], vec![]),
                block(
                    1,
                    &[1, 2],
                    vec![
                        Instruction::Phi {
                            dst: vid(1),
                            incoming: vec![
                                (BlockId(0), ValueRef::Const(ConstValue::Int(0))),
                                (BlockId(1), ValueRef::Value(vid(2))),
                            ],
                        },
                        Instruction::Def {
                            dst: vid(2),
                            operands: vec![ValueRef::Value(vid(1))],
                        },
                        Instruction::Branch {
                            cond: ValueRef::Value(vid(2)),
                        },
                    ],
                ),
                block(2, &[], vec![]),
            ],
        );
        let d = Instruction::Def {
            dst: vid(3),
            operands: vec![ValueRef::Value(vid(2))],
        };
        assert_eq!(trace_parent_phi(&d, &f).unwrap(), [vid(1)].into());
    }
}
