//! Parse trees (execution traces) and the count tables extracted from them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Context, ModelStructure, SymbolId, SymbolType};

/// One call of the sampler.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TreeNode {
    pub symbol: SymbolId,
    pub ty: SymbolType,
    pub input: SymbolId,
    /// `None` only in traces cut off by the call budget.
    pub output: Option<SymbolId>,
    /// Child pair drawn by a combinator.
    pub pair: Option<(SymbolId, SymbolId)>,
    pub label: Option<char>,
    pub children: Vec<usize>,
}

/// An execution trace stored in pre-order (call order); `nodes[0]` is the
/// root call on `(q0, q1)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct ParseTree {
    nodes: Vec<TreeNode>,
}

/// Flat record kept by the sampler while a trace is being built.
#[derive(Clone, Copy, Debug)]
pub(crate) struct TraceNode {
    pub symbol: SymbolId,
    pub input: SymbolId,
    pub output: Option<SymbolId>,
    pub parent: u32,
    /// Drawn cell for parameterised symbols, `u32::MAX` otherwise.
    pub drawn: u32,
}

pub(crate) const NO_PARENT: u32 = u32::MAX;
pub(crate) const NO_DRAW: u32 = u32::MAX;

impl ParseTree {
    pub(crate) fn from_trace(model: &ModelStructure, trace: &[TraceNode]) -> Self {
        let n = model.len() as u32;
        let mut nodes: Vec<TreeNode> = trace
            .iter()
            .map(|t| {
                let ty = model.ty(t.symbol);
                TreeNode {
                    symbol: t.symbol,
                    ty,
                    input: t.input,
                    output: t.output,
                    pair: ty
                        .is_combinator()
                        .then(|| (SymbolId(t.drawn / n), SymbolId(t.drawn % n))),
                    label: model.label(t.symbol),
                    children: Vec::new(),
                }
            })
            .collect();
        for (k, t) in trace.iter().enumerate() {
            if t.parent != NO_PARENT {
                nodes[t.parent as usize].children.push(k);
            }
        }
        ParseTree { nodes }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn root(&self) -> Option<&TreeNode> {
        self.nodes.first()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.nodes.iter().all(|n| n.output.is_some())
    }

    /// The categorical choices made by the trace, in draw order. Replaying
    /// them through the sampler reproduces the trace.
    pub fn choices(&self, n_symbols: usize) -> Vec<u32> {
        self.nodes
            .iter()
            .filter_map(|node| match node.ty {
                SymbolType::Cn | SymbolType::Fn => node.output.map(|o| o.0),
                t if t.is_combinator() => node.pair.map(|(f, g)| (f.index() * n_symbols + g.index()) as u32),
                _ => None,
            })
            .collect()
    }

    /// Checks every node against its type's dataflow.
    pub fn check(&self, model: &ModelStructure) -> Result<()> {
        let bad = |k: usize, why: &str| Err(Error::InvalidModel(format!("tree node {k}: {why}")));
        if self.nodes.is_empty() {
            return bad(0, "empty tree");
        }
        if self.nodes[0].symbol != model.q0() || self.nodes[0].input != model.q1() {
            return bad(0, "root is not (q0, q1)");
        }
        for (k, node) in self.nodes.iter().enumerate() {
            for q in [Some(node.symbol), Some(node.input), node.output].into_iter().flatten() {
                model.check_symbol(q)?;
            }
            if node.ty != model.ty(node.symbol) || node.label != model.label(node.symbol) {
                return bad(k, "type or label disagrees with the model");
            }
            if node.children.iter().any(|&c| c <= k || c >= self.nodes.len()) {
                return bad(k, "children must follow their parent");
            }
            let child = |idx: usize| node.children.get(idx).map(|&c| &self.nodes[c]);
            match node.ty {
                SymbolType::Ob | SymbolType::Id | SymbolType::Cn | SymbolType::Fn => {
                    if !node.children.is_empty() {
                        return bad(k, "leaf with children");
                    }
                    if matches!(node.ty, SymbolType::Ob | SymbolType::Id)
                        && node.output.is_some_and(|o| o != node.input)
                    {
                        return bad(k, "identity-like node changed its input");
                    }
                    if matches!(node.ty, SymbolType::Cn | SymbolType::Fn) && node.output.is_none() {
                        return bad(k, "draw without an output");
                    }
                }
                ty => {
                    let Some((f, g)) = node.pair else {
                        return bad(k, "combinator without a drawn pair");
                    };
                    let expected_children = match ty {
                        SymbolType::S1 | SymbolType::S2 | SymbolType::P1 | SymbolType::P2 => 2,
                        _ => 3,
                    };
                    if node.children.len() > expected_children
                        || (node.output.is_some() && node.children.len() != expected_children)
                    {
                        return bad(k, "wrong number of children");
                    }
                    if let Some(c0) = child(0) {
                        if c0.symbol != f || c0.input != node.input {
                            return bad(k, "first child does not match the drawn pair");
                        }
                    }
                    if let Some(c1) = child(1) {
                        let want = if ty.is_sequential() {
                            child(0).and_then(|c| c.output)
                        } else {
                            Some(node.input)
                        };
                        if c1.symbol != g || Some(c1.input) != want {
                            return bad(k, "second child does not match the dataflow");
                        }
                    }
                    let (k_out, l_out) = (child(0).and_then(|c| c.output), child(1).and_then(|c| c.output));
                    if let Some(c2) = child(2) {
                        let (sym, inp) = match ty {
                            SymbolType::S12 | SymbolType::P12 => (k_out, l_out),
                            _ => (l_out, k_out),
                        };
                        if Some(c2.symbol) != sym || Some(c2.input) != inp {
                            return bad(k, "re-invocation does not match the dataflow");
                        }
                    }
                    if let Some(out) = node.output {
                        let want = match ty {
                            SymbolType::S1 | SymbolType::P1 => k_out,
                            SymbolType::S2 | SymbolType::P2 => l_out,
                            _ => child(2).and_then(|c| c.output),
                        };
                        if want != Some(out) {
                            return bad(k, "output does not match the dataflow");
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// The letters printed by a trace, in order.
pub fn yield_of(tree: &ParseTree) -> String {
    tree.nodes.iter().filter_map(|n| n.label).collect()
}

/// Indented text rendering: one node per line with its name, type tag,
/// `input → output` and, for observation nodes, the printed letter.
pub fn render(tree: &ParseTree, model: &ModelStructure) -> String {
    let mut out = String::new();
    if tree.nodes.is_empty() {
        return out;
    }
    let mut stack = vec![(0usize, 0usize)];
    while let Some((k, depth)) = stack.pop() {
        let node = &tree.nodes[k];
        let output = node.output.map_or("?", |o| model.name(o));
        let _ = write!(
            out,
            "{:indent$}{} [{}] {} → {}",
            "",
            model.name(node.symbol),
            node.ty,
            model.name(node.input),
            output,
            indent = depth * 2
        );
        if let Some(c) = node.label {
            let _ = write!(out, "  print {c:?}");
        }
        out.push('\n');
        for &c in node.children.iter().rev() {
            stack.push((c, depth + 1));
        }
    }
    out
}

/// Nested JSON form of a tree node.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeDoc {
    pub symbol: SymbolId,
    #[serde(rename = "type")]
    pub ty: SymbolType,
    pub input: SymbolId,
    pub output: Option<SymbolId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<char>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<(SymbolId, SymbolId)>,
    #[serde(default)]
    pub children: Vec<NodeDoc>,
}

impl Serialize for ParseTree {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        fn build(t: &ParseTree, k: usize) -> NodeDoc {
            let n = &t.nodes[k];
            NodeDoc {
                symbol: n.symbol,
                ty: n.ty,
                input: n.input,
                output: n.output,
                label: n.label,
                pair: n.pair,
                children: n.children.iter().map(|&c| build(t, c)).collect(),
            }
        }
        if self.nodes.is_empty() {
            return s.serialize_none();
        }
        build(self, 0).serialize(s)
    }
}

impl<'de> Deserialize<'de> for ParseTree {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        fn flatten(doc: NodeDoc, nodes: &mut Vec<TreeNode>) -> usize {
            let k = nodes.len();
            nodes.push(TreeNode {
                symbol: doc.symbol,
                ty: doc.ty,
                input: doc.input,
                output: doc.output,
                pair: doc.pair,
                label: doc.label,
                children: Vec::new(),
            });
            for c in doc.children {
                let idx = flatten(c, nodes);
                nodes[k].children.push(idx);
            }
            k
        }
        let doc: Option<NodeDoc> = Option::deserialize(d)?;
        let mut nodes = Vec::new();
        if let Some(doc) = doc {
            flatten(doc, &mut nodes);
        }
        Ok(ParseTree { nodes })
    }
}

/// Sparse counts for one categorical context, sorted by cell.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SparseRow {
    total: u32,
    cells: Vec<(u32, u32)>,
}

impl SparseRow {
    pub fn total(&self) -> u32 {
        self.total
    }

    pub fn get(&self, cell: u32) -> u32 {
        match self.cells.binary_search_by_key(&cell, |&(c, _)| c) {
            Ok(p) => self.cells[p].1,
            Err(_) => 0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.cells.iter().copied()
    }

    pub fn add(&mut self, cell: u32, count: u32) {
        if count == 0 {
            return;
        }
        match self.cells.binary_search_by_key(&cell, |&(c, _)| c) {
            Ok(p) => self.cells[p].1 += count,
            Err(p) => self.cells.insert(p, (cell, count)),
        }
        self.total += count;
    }

    /// Subtracts, returning `false` (and leaving the row unchanged) on
    /// underflow.
    pub fn sub(&mut self, cell: u32, count: u32) -> bool {
        if count == 0 {
            return true;
        }
        match self.cells.binary_search_by_key(&cell, |&(c, _)| c) {
            Ok(p) if self.cells[p].1 >= count => {
                self.cells[p].1 -= count;
                if self.cells[p].1 == 0 {
                    self.cells.remove(p);
                }
                self.total -= count;
                true
            }
            _ => false,
        }
    }
}

/// Sufficient statistics `N^Cn(q, j)`, `N^Fn(q, i, j)` and `N^Cm(q, f, g)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountTables {
    n: usize,
    cn: Vec<SparseRow>,
    fun: Vec<SparseRow>,
    cm: Vec<SparseRow>,
}

impl CountTables {
    pub fn new(n_symbols: usize) -> Self {
        CountTables {
            n: n_symbols,
            cn: vec![SparseRow::default(); n_symbols],
            fun: vec![SparseRow::default(); n_symbols * n_symbols],
            cm: vec![SparseRow::default(); n_symbols],
        }
    }

    pub fn n_symbols(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn row(&self, ctx: Context) -> &SparseRow {
        match ctx {
            Context::Cn(q) => &self.cn[q.index()],
            Context::Fn(q, i) => &self.fun[q.index() * self.n + i.index()],
            Context::Cm(q) => &self.cm[q.index()],
        }
    }

    fn row_mut(&mut self, ctx: Context) -> &mut SparseRow {
        match ctx {
            Context::Cn(q) => &mut self.cn[q.index()],
            Context::Fn(q, i) => &mut self.fun[q.index() * self.n + i.index()],
            Context::Cm(q) => &mut self.cm[q.index()],
        }
    }

    pub fn get(&self, ctx: Context, cell: usize) -> u32 {
        self.row(ctx).get(cell as u32)
    }

    pub fn increment(&mut self, ctx: Context, cell: usize, count: u32) {
        self.row_mut(ctx).add(cell as u32, count);
    }

    /// All nonzero entries as `(context, cell, count)`, in a fixed order.
    pub fn entries(&self) -> Vec<(Context, usize, u32)> {
        let mut out = Vec::new();
        for (k, row) in self.cn.iter().enumerate() {
            out.extend(row.iter().map(|(c, n)| (Context::Cn(SymbolId::from(k)), c as usize, n)));
        }
        for (k, row) in self.fun.iter().enumerate() {
            let ctx = Context::Fn(SymbolId::from(k / self.n), SymbolId::from(k % self.n));
            out.extend(row.iter().map(|(c, n)| (ctx, c as usize, n)));
        }
        for (k, row) in self.cm.iter().enumerate() {
            out.extend(row.iter().map(|(c, n)| (Context::Cm(SymbolId::from(k)), c as usize, n)));
        }
        out
    }

    /// Total number of draws recorded.
    pub fn mass(&self) -> u64 {
        self.cn
            .iter()
            .chain(&self.fun)
            .chain(&self.cm)
            .map(|r| u64::from(r.total))
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.mass() == 0
    }
}

/// Counts of a single tree: one entry per `Cn`, `Fn` and combinator node.
pub fn extract_counts(tree: &ParseTree, n_symbols: usize) -> CountTables {
    let mut t = CountTables::new(n_symbols);
    for node in &tree.nodes {
        match node.ty {
            SymbolType::Cn => {
                if let Some(o) = node.output {
                    t.increment(Context::Cn(node.symbol), o.index(), 1);
                }
            }
            SymbolType::Fn => {
                if let Some(o) = node.output {
                    t.increment(Context::Fn(node.symbol, node.input), o.index(), 1);
                }
            }
            ty if ty.is_combinator() => {
                if let Some((f, g)) = node.pair {
                    t.increment(Context::Cm(node.symbol), f.index() * n_symbols + g.index(), 1);
                }
            }
            _ => {}
        }
    }
    t
}

pub fn add_counts(global: &mut CountTables, delta: &CountTables) {
    for (ctx, cell, n) in delta.entries() {
        global.increment(ctx, cell, n);
    }
}

/// Subtracts `delta` from `global`. Fails without modifying `global` if any
/// cell would go negative.
pub fn remove_counts(global: &mut CountTables, delta: &CountTables) -> Result<()> {
    let entries = delta.entries();
    if let Some(&(ctx, cell, _)) = entries.iter().find(|&&(ctx, cell, n)| global.get(ctx, cell) < n) {
        return Err(Error::CountUnderflow {
            context: ctx.to_string(),
            cell,
        });
    }
    for (ctx, cell, n) in entries {
        let ok = global.row_mut(ctx).sub(cell as u32, n);
        debug_assert!(ok);
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CountsDoc {
    n_symbols: usize,
    cn: Vec<(u32, u32, u32)>,
    #[serde(rename = "fn")]
    fun: Vec<(u32, u32, u32, u32)>,
    cm: Vec<(u32, u32, u32, u32)>,
}

impl Serialize for CountTables {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let n = self.n as u32;
        let mut doc = CountsDoc {
            n_symbols: self.n,
            cn: Vec::new(),
            fun: Vec::new(),
            cm: Vec::new(),
        };
        for (ctx, cell, c) in self.entries() {
            let cell = cell as u32;
            match ctx {
                Context::Cn(q) => doc.cn.push((q.0, cell, c)),
                Context::Fn(q, i) => doc.fun.push((q.0, i.0, cell, c)),
                Context::Cm(q) => doc.cm.push((q.0, cell / n, cell % n, c)),
            }
        }
        doc.serialize(s)
    }
}

impl<'de> Deserialize<'de> for CountTables {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let doc = CountsDoc::deserialize(d)?;
        let n = doc.n_symbols;
        let ok = |v: u32| (v as usize) < n;
        let mut t = CountTables::new(n);
        for (q, j, c) in doc.cn {
            if !ok(q) || !ok(j) {
                return Err(D::Error::custom("count index out of range"));
            }
            t.increment(Context::Cn(SymbolId(q)), j as usize, c);
        }
        for (q, i, j, c) in doc.fun {
            if !ok(q) || !ok(i) || !ok(j) {
                return Err(D::Error::custom("count index out of range"));
            }
            t.increment(Context::Fn(SymbolId(q), SymbolId(i)), j as usize, c);
        }
        for (q, f, g, c) in doc.cm {
            if !ok(q) || !ok(f) || !ok(g) {
                return Err(D::Error::custom("count index out of range"));
            }
            t.increment(Context::Cm(SymbolId(q)), f as usize * n + g as usize, c);
        }
        Ok(t)
    }
}
