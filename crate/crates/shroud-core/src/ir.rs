//! Program representation and its JSON schema.
//!
//! A [`Program`] is a set of functions; each function is a CFG of basic
//! blocks holding a minimal SSA-ish instruction set (`call`, `phi`, `def`,
//! `branch`). Instructions carry no evaluable semantics — traces supply the
//! dynamic values — but the def/use structure is real and is what the
//! instrumentation planner walks.
//!
//! Validation happens at construction: a `Program` that exists has unique
//! function ids, unique block ids per function, globally unique call-site
//! ids, no dangling successor edges, at most one branch per block (and only
//! in last position), single definitions per value id, and a `blankable`
//! flag consistent with [`TOO_SMALL_BYTES`]. Anything else never becomes a
//! `Program`. Softer checks (phi incoming blocks that are not predecessors)
//! are reported by [`Program::lint`] instead of rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Function id. Dense small integers in practice, but only uniqueness is
/// enforced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FnId(pub u32);

/// Basic-block id, unique within one function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockId(pub u32);

/// Call-site id, unique across the whole program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SiteId(pub u32);

/// SSA value id, scoped to one function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValueId(pub u32);

impl fmt::Display for FnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}
impl fmt::Display for ValueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Functions smaller than this cannot be blanked: the copied-back entry stub
/// would not fit. Generators must set `blankable: false` below this size;
/// validation enforces the consistency but never derives the flag.
pub const TOO_SMALL_BYTES: u64 = 14;

/// A constant operand. Integer-valued JSON numbers parse as `Int`, anything
/// with a fraction or exponent as `Float`. Non-finite floats are rejected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConstValue {
    Int(i64),
    Float(f64),
}

impl ConstValue {
    pub fn as_f64(self) -> f64 {
        match self {
            ConstValue::Int(i) => i as f64,
            ConstValue::Float(x) => x,
        }
    }
}

/// An operand: an SSA value, a constant, a formal parameter, or the address
/// of a function (function-pointer payloads).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ValueRef {
    Value(ValueId),
    Const(ConstValue),
    Param(u32),
    FnAddr(FnId),
}

/// One instruction. `Def` stands in for any non-phi computation; its
/// operands are the values it reads. `Branch` closes a block with a
/// conditional exit (the successor edges live on the block).
#[derive(Debug, Clone, PartialEq)]
pub enum Instruction {
    Call {
        site: SiteId,
        callee: FnId,
        args: Vec<ValueRef>,
    },
    Phi {
        dst: ValueId,
        incoming: Vec<(BlockId, ValueRef)>,
    },
    Def {
        dst: ValueId,
        operands: Vec<ValueRef>,
    },
    Branch {
        cond: ValueRef,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasicBlock {
    pub id: BlockId,
    pub succs: Vec<BlockId>,
    pub instrs: Vec<Instruction>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionDef {
    pub id: FnId,
    pub name: String,
    pub size_bytes: u64,
    pub gadget_count: u64,
    pub instrumentable: bool,
    pub blankable: bool,
    pub is_library: bool,
    pub entry_block: BlockId,
    /// Empty means the body is unknown (a declaration). Analyses that need a
    /// CFG report such functions explicitly.
    pub blocks: Vec<BasicBlock>,
}

impl FunctionDef {
    pub fn block(&self, id: BlockId) -> Option<&BasicBlock> {
        self.blocks.iter().find(|b| b.id == id)
    }

    pub fn has_body(&self) -> bool {
        !self.blocks.is_empty()
    }
}

/// Where a call site lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiteRef {
    pub function: FnId,
    pub block: BlockId,
    /// Index of the call within its block's instruction list.
    pub index: usize,
    pub callee: FnId,
}

/// A validated program. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Program {
    functions: BTreeMap<FnId, FunctionDef>,
    library_ids: BTreeSet<FnId>,
    sites: BTreeMap<SiteId, SiteRef>,
}

#[derive(Debug, Error, PartialEq)]
pub enum IrError {
    #[error("duplicate function id {0}")]
    DuplicateFunction(FnId),
    #[error("function {function} ({name}): duplicate block id {block}")]
    DuplicateBlock {
        function: FnId,
        name: String,
        block: BlockId,
    },
    #[error("function {function} ({name}): entry block {entry} is not in the block list")]
    MissingEntry {
        function: FnId,
        name: String,
        entry: BlockId,
    },
    #[error("function {function} ({name}): block {block} has an edge to missing block {target}")]
    DanglingEdge {
        function: FnId,
        name: String,
        block: BlockId,
        target: BlockId,
    },
    #[error("function {function} ({name}): block {block} has a branch that is not the last instruction")]
    BranchNotLast {
        function: FnId,
        name: String,
        block: BlockId,
    },
    #[error("function {function} ({name}): value v{value} is defined more than once")]
    DuplicateDef {
        function: FnId,
        name: String,
        value: ValueId,
    },
    #[error("duplicate call site id {0} (site ids are program-global)")]
    DuplicateSite(SiteId),
    #[error(
        "function {function} ({name}): {size} bytes is under the {floor}-byte patch floor \
         but blankable is set"
    )]
    BlankableTooSmall {
        function: FnId,
        name: String,
        size: u64,
        floor: u64,
    },
    #[error("function {function} ({name}): non-finite float constant")]
    NonFiniteConst { function: FnId, name: String },
    #[error("JSON: {0}")]
    Json(String),
}

/// Soft findings from [`Program::lint`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Lint {
    /// A phi lists an incoming block that is not a CFG predecessor of the
    /// phi's block.
    PhiIncomingNotPredecessor {
        function: FnId,
        block: BlockId,
        incoming: BlockId,
    },
}

impl Program {
    /// Validates and assembles a program. See the module docs for the
    /// enforced invariants.
    pub fn from_functions(functions: Vec<FunctionDef>) -> Result<Self, IrError> {
        let mut map = BTreeMap::new();
        let mut sites = BTreeMap::new();
        let mut library_ids = BTreeSet::new();

        for f in &functions {
            validate_function(f)?;
        }
        for f in functions {
            if f.is_library {
                library_ids.insert(f.id);
            }
            for b in &f.blocks {
                for (idx, ins) in b.instrs.iter().enumerate() {
                    if let Instruction::Call { site, callee, .. } = ins {
                        let site_ref = SiteRef {
                            function: f.id,
                            block: b.id,
                            index: idx,
                            callee: *callee,
                        };
                        if sites.insert(*site, site_ref).is_some() {
                            return Err(IrError::DuplicateSite(*site));
                        }
                    }
                }
            }
            let id = f.id;
            if map.insert(id, f).is_some() {
                return Err(IrError::DuplicateFunction(id));
            }
        }
        Ok(Program {
            functions: map,
            library_ids,
            sites,
        })
    }

    pub fn functions(&self) -> &BTreeMap<FnId, FunctionDef> {
        &self.functions
    }

    pub fn function(&self, id: FnId) -> Option<&FunctionDef> {
        self.functions.get(&id)
    }

    /// Ids of all functions flagged `is_library`.
    pub fn library_ids(&self) -> &BTreeSet<FnId> {
        &self.library_ids
    }

    pub fn is_library(&self, id: FnId) -> bool {
        self.library_ids.contains(&id)
    }

    /// Every call site in the program, keyed by its global id.
    pub fn sites(&self) -> &BTreeMap<SiteId, SiteRef> {
        &self.sites
    }

    pub fn site(&self, id: SiteId) -> Option<&SiteRef> {
        self.sites.get(&id)
    }

    /// Soft checks that do not invalidate a program.
    pub fn lint(&self) -> Vec<Lint> {
        let mut out = Vec::new();
        for f in self.functions.values() {
            let mut preds: BTreeMap<BlockId, BTreeSet<BlockId>> = BTreeMap::new();
            for b in &f.blocks {
                for s in &b.succs {
                    preds.entry(*s).or_default().insert(b.id);
                }
            }
            for b in &f.blocks {
                for ins in &b.instrs {
                    if let Instruction::Phi { incoming, .. } = ins {
                        for (inb, _) in incoming {
                            let ok = preds.get(&b.id).is_some_and(|p| p.contains(inb));
                            if !ok {
                                out.push(Lint::PhiIncomingNotPredecessor {
                                    function: f.id,
                                    block: b.id,
                                    incoming: *inb,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn from_json_str(s: &str) -> Result<Self, IrError> {
        let raw: raw::Program =
            serde_json::from_str(s).map_err(|e| IrError::Json(e.to_string()))?;
        raw.into_program()
    }

    /// Deterministic pretty JSON; functions sorted by id, block and
    /// instruction order preserved.
    pub fn to_json_string(&self) -> String {
        let raw = raw::Program::from_program(self);
        serde_json::to_string_pretty(&raw).expect("program serialization cannot fail")
    }
}

fn validate_function(f: &FunctionDef) -> Result<(), IrError> {
    let err_name = || f.name.clone();
    if f.blankable && f.size_bytes < TOO_SMALL_BYTES {
        return Err(IrError::BlankableTooSmall {
            function: f.id,
            name: err_name(),
            size: f.size_bytes,
            floor: TOO_SMALL_BYTES,
        });
    }
    if f.blocks.is_empty() {
        return Ok(()); // declaration only
    }
    let mut ids = BTreeSet::new();
    for b in &f.blocks {
        if !ids.insert(b.id) {
            return Err(IrError::DuplicateBlock {
                function: f.id,
                name: err_name(),
                block: b.id,
            });
        }
    }
    if !ids.contains(&f.entry_block) {
        return Err(IrError::MissingEntry {
            function: f.id,
            name: err_name(),
            entry: f.entry_block,
        });
    }
    let mut defs = BTreeSet::new();
    for b in &f.blocks {
        for t in &b.succs {
            if !ids.contains(t) {
                return Err(IrError::DanglingEdge {
                    function: f.id,
                    name: err_name(),
                    block: b.id,
                    target: *t,
                });
            }
        }
        for (idx, ins) in b.instrs.iter().enumerate() {
            match ins {
                Instruction::Branch { .. } => {
                    if idx + 1 != b.instrs.len() {
                        return Err(IrError::BranchNotLast {
                            function: f.id,
                            name: err_name(),
                            block: b.id,
                        });
                    }
                }
                Instruction::Phi { dst, incoming } => {
                    if !defs.insert(*dst) {
                        return Err(IrError::DuplicateDef {
                            function: f.id,
                            name: err_name(),
                            value: *dst,
                        });
                    }
                    for (_, v) in incoming {
                        check_const(f, v)?;
                    }
                }
                Instruction::Def { dst, operands } => {
                    if !defs.insert(*dst) {
                        return Err(IrError::DuplicateDef {
                            function: f.id,
                            name: err_name(),
                            value: *dst,
                        });
                    }
                    for v in operands {
                        check_const(f, v)?;
                    }
                }
                Instruction::Call { args, .. } => {
                    for v in args {
                        check_const(f, v)?;
                    }
                }
            }
        }
    }
    Ok(())
}

fn check_const(f: &FunctionDef, v: &ValueRef) -> Result<(), IrError> {
    if let ValueRef::Const(ConstValue::Float(x)) = v {
        if !x.is_finite() {
            return Err(IrError::NonFiniteConst {
                function: f.id,
                name: f.name.clone(),
            });
        }
    }
    Ok(())
}

/// Raw mirror of the on-disk schema. Kept private so every loaded program
/// passes through validation.
mod raw {
    use super::IrError;
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize)]
    pub(super) struct Program {
        pub functions: Vec<Function>,
    }

    #[derive(Serialize, Deserialize)]
    pub(super) struct Function {
        pub id: u32,
        pub name: String,
        pub size_bytes: u64,
        pub gadget_count: u64,
        pub instrumentable: bool,
        pub blankable: bool,
        pub is_library: bool,
        pub entry_block: u32,
        pub blocks: Vec<Block>,
    }

    #[derive(Serialize, Deserialize)]
    pub(super) struct Block {
        pub id: u32,
        pub succs: Vec<u32>,
        pub instrs: Vec<Instr>,
    }

    #[derive(Serialize, Deserialize)]
    #[serde(tag = "op", rename_all = "lowercase")]
    pub(super) enum Instr {
        Call {
            site: u32,
            callee: u32,
            args: Vec<Value>,
        },
        Phi {
            dst: Value,
            #[serde(rename = "in")]
            incoming: Vec<(u32, Value)>,
        },
        Def {
            dst: Value,
            src: Vec<Value>,
        },
        Branch {
            cond: Value,
        },
    }

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    pub(super) enum Value {
        V { v: u32 },
        Const { r#const: serde_json::Number },
        Param { param: u32 },
        FnAddr { fnaddr: u32 },
    }

    impl Program {
        pub(super) fn into_program(self) -> Result<super::Program, IrError> {
            let mut fns = Vec::with_capacity(self.functions.len());
            for f in self.functions {
                fns.push(f.into_function()?);
            }
            super::Program::from_functions(fns)
        }

        pub(super) fn from_program(p: &super::Program) -> Self {
            Program {
                functions: p.functions.values().map(Function::from_function).collect(),
            }
        }
    }

    impl Function {
        fn into_function(self) -> Result<super::FunctionDef, IrError> {
            let name = self.name.clone();
            let blocks = self
                .blocks
                .into_iter()
                .map(|b| b.into_block(super::FnId(self.id), &name))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(super::FunctionDef {
                id: super::FnId(self.id),
                name,
                size_bytes: self.size_bytes,
                gadget_count: self.gadget_count,
                instrumentable: self.instrumentable,
                blankable: self.blankable,
                is_library: self.is_library,
                entry_block: super::BlockId(self.entry_block),
                blocks,
            })
        }

        fn from_function(f: &super::FunctionDef) -> Self {
            Function {
                id: f.id.0,
                name: f.name.clone(),
                size_bytes: f.size_bytes,
                gadget_count: f.gadget_count,
                instrumentable: f.instrumentable,
                blankable: f.blankable,
                is_library: f.is_library,
                entry_block: f.entry_block.0,
                blocks: f.blocks.iter().map(Block::from_block).collect(),
            }
        }
    }

    impl Block {
        fn into_block(self, function: super::FnId, name: &str) -> Result<super::BasicBlock, IrError> {
            let instrs = self
                .instrs
                .into_iter()
                .map(|i| i.into_instr(function, name))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(super::BasicBlock {
                id: super::BlockId(self.id),
                succs: self.succs.into_iter().map(super::BlockId).collect(),
                instrs,
            })
        }

        fn from_block(b: &super::BasicBlock) -> Self {
            Block {
                id: b.id.0,
                succs: b.succs.iter().map(|s| s.0).collect(),
                instrs: b.instrs.iter().map(Instr::from_instr).collect(),
            }
        }
    }

    impl Instr {
        fn into_instr(self, function: super::FnId, name: &str) -> Result<super::Instruction, IrError> {
            let dst_value = |v: Value| -> Result<super::ValueId, IrError> {
                match v {
                    Value::V { v } => Ok(super::ValueId(v)),
                    _ => Err(IrError::Json(format!(
                        "function {function} ({name}): phi/def dst must be {{\"v\": n}}"
                    ))),
                }
            };
            Ok(match self {
                Instr::Call { site, callee, args } => super::Instruction::Call {
                    site: super::SiteId(site),
                    callee: super::FnId(callee),
                    args: args.into_iter().map(Value::into_ref).collect(),
                },
                Instr::Phi { dst, incoming } => super::Instruction::Phi {
                    dst: dst_value(dst)?,
                    incoming: incoming
                        .into_iter()
                        .map(|(b, v)| (super::BlockId(b), v.into_ref()))
                        .collect(),
                },
                Instr::Def { dst, src } => super::Instruction::Def {
                    dst: dst_value(dst)?,
                    operands: src.into_iter().map(Value::into_ref).collect(),
                },
                Instr::Branch { cond } => super::Instruction::Branch {
                    cond: cond.into_ref(),
                },
            })
        }

        fn from_instr(i: &super::Instruction) -> Self {
            match i {
                super::Instruction::Call { site, callee, args } => Instr::Call {
                    site: site.0,
                    callee: callee.0,
                    args: args.iter().map(Value::from_ref).collect(),
                },
                super::Instruction::Phi { dst, incoming } => Instr::Phi {
                    dst: Value::V { v: dst.0 },
                    incoming: incoming
                        .iter()
                        .map(|(b, v)| (b.0, Value::from_ref(v)))
                        .collect(),
                },
                super::Instruction::Def { dst, operands } => Instr::Def {
                    dst: Value::V { v: dst.0 },
                    src: operands.iter().map(Value::from_ref).collect(),
                },
                super::Instruction::Branch { cond } => Instr::Branch {
                    cond: Value::from_ref(cond),
                },
            }
        }
    }

    impl Value {
        fn into_ref(self) -> super::ValueRef {
            match self {
                Value::V { v } => super::ValueRef::Value(super::ValueId(v)),
                Value::Const { r#const } => {
                    if let Some(i) = r#const.as_i64() {
                        super::ValueRef::Const(super::ConstValue::Int(i))
                    } else {
                        super::ValueRef::Const(super::ConstValue::Float(
                            r#const.as_f64().unwrap_or(0.0),
                        ))
                    }
                }
                Value::Param { param } => super::ValueRef::Param(param),
                Value::FnAddr { fnaddr } => super::ValueRef::FnAddr(super::FnId(fnaddr)),
            }
        }

        fn from_ref(v: &super::ValueRef) -> Self {
            match v {
                super::ValueRef::Value(id) => Value::V { v: id.0 },
                super::ValueRef::Const(super::ConstValue::Int(i)) => Value::Const {
                    r#const: serde_json::Number::from(*i),
                },
                super::ValueRef::Const(super::ConstValue::Float(x)) => Value::Const {
                    r#const: serde_json::Number::from_f64(*x)
                        .expect("validated constants are finite"),
                },
                super::ValueRef::Param(p) => Value::Param { param: *p },
                super::ValueRef::FnAddr(f) => Value::FnAddr { fnaddr: f.0 },
            }
        }
    }
}

/// Convenience builder used across tests and the corpus generator.
pub fn function(
    id: u32,
    name: &str,
    is_library: bool,
    entry: u32,
    blocks: Vec<BasicBlock>,
) -> FunctionDef {
    FunctionDef {
        id: FnId(id),
        name: name.to_string(),
        size_bytes: 64,
        gadget_count: 4,
        instrumentable: true,
        blankable: true,
        is_library,
        entry_block: BlockId(entry),
        blocks,
    }
}

/// Convenience block builder.
pub fn block(id: u32, succs: &[u32], instrs: Vec<Instruction>) -> BasicBlock {
    BasicBlock {
        id: BlockId(id),
        succs: succs.iter().map(|s| BlockId(*s)).collect(),
        instrs,
    }
}
