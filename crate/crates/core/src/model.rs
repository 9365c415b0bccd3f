//! Model structure, concentration tables and weight tables.
//!
//! A model fixes the symbol set, the type of every symbol, the labels of the
//! observation symbols, the alphabet, and the initial symbol/input pair.
//! Weights (or Dirichlet concentrations over them) live in [`CellTables`],
//! which stores one row per `Cn` symbol, one `|Q|×|Q|` right-stochastic matrix
//! per `Fn` symbol and one `|Q|×|Q|` joint table per combinator symbol.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod fixtures;

/// Tolerance used when checking that weight rows and tables sum to one.
pub const WEIGHT_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SymbolId(pub u32);

impl SymbolId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for SymbolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

impl From<usize> for SymbolId {
    fn from(i: usize) -> Self {
        SymbolId(i as u32)
    }
}

/// The twelve symbol types. Declaration order is the canonical grouping order
/// used when numbering symbols.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SymbolType {
    Ob,
    Id,
    Cn,
    Fn,
    S1,
    S2,
    S12,
    S21,
    P1,
    P2,
    P12,
    P21,
}

impl SymbolType {
    pub const ALL: [SymbolType; 12] = [
        SymbolType::Ob,
        SymbolType::Id,
        SymbolType::Cn,
        SymbolType::Fn,
        SymbolType::S1,
        SymbolType::S2,
        SymbolType::S12,
        SymbolType::S21,
        SymbolType::P1,
        SymbolType::P2,
        SymbolType::P12,
        SymbolType::P21,
    ];

    pub fn is_combinator(self) -> bool {
        !matches!(self, SymbolType::Ob | SymbolType::Id | SymbolType::Cn | SymbolType::Fn)
    }

    /// Types allowed in a plain CPP (no observations, two combinators).
    pub fn is_plain(self) -> bool {
        matches!(
            self,
            SymbolType::Id | SymbolType::Cn | SymbolType::Fn | SymbolType::S2 | SymbolType::P21
        )
    }

    /// Sequential combinators feed the first child's output into the second
    /// child; parallel ones give both children the combinator's own input.
    pub fn is_sequential(self) -> bool {
        matches!(
            self,
            SymbolType::S1 | SymbolType::S2 | SymbolType::S12 | SymbolType::S21
        )
    }

    pub fn tag(self) -> &'static str {
        match self {
            SymbolType::Ob => "Ob",
            SymbolType::Id => "Id",
            SymbolType::Cn => "Cn",
            SymbolType::Fn => "Fn",
            SymbolType::S1 => "S1",
            SymbolType::S2 => "S2",
            SymbolType::S12 => "S12",
            SymbolType::S21 => "S21",
            SymbolType::P1 => "P1",
            SymbolType::P2 => "P2",
            SymbolType::P12 => "P12",
            SymbolType::P21 => "P21",
        }
    }
}

impl fmt::Display for SymbolType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for SymbolType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SymbolType::ALL
            .iter()
            .copied()
            .find(|t| t.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidModel(format!("unknown symbol type {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: SymbolType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<char>,
}

impl SymbolSpec {
    pub fn new(name: impl Into<String>, ty: SymbolType) -> Self {
        SymbolSpec {
            name: name.into(),
            ty,
            label: None,
        }
    }

    pub fn observation(label: char) -> Self {
        SymbolSpec {
            name: label.to_string(),
            ty: SymbolType::Ob,
            label: Some(label),
        }
    }
}

/// Picks a symbol either directly or as the `n`-th (0-based) symbol of a type.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SymbolRef {
    Id(SymbolId),
    Nth(SymbolType, usize),
}

/// `Q`, `Γ`, `T`, `L`, `q0` and `q1`: everything about a model except its
/// weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelStructure {
    symbols: Vec<SymbolSpec>,
    alphabet: Vec<char>,
    q0: SymbolId,
    q1: SymbolId,
}

impl ModelStructure {
    /// Validates and assembles a structure from explicit symbol specs.
    pub fn from_symbols(symbols: Vec<SymbolSpec>, alphabet: Vec<char>, q0: SymbolId, q1: SymbolId) -> Result<Self> {
        let n = symbols.len();
        if n == 0 {
            return Err(Error::InvalidModel("model has no symbols".into()));
        }
        if n > u32::MAX as usize / 2 {
            return Err(Error::InvalidModel("too many symbols".into()));
        }
        for (a, &x) in alphabet.iter().enumerate() {
            if alphabet[..a].contains(&x) {
                return Err(Error::InvalidModel(format!("duplicate letter {x:?}")));
            }
        }
        for (idx, s) in symbols.iter().enumerate() {
            match (s.ty, s.label) {
                (SymbolType::Ob, None) => {
                    return Err(Error::InvalidModel(format!(
                        "observation symbol {idx} ({}) has no label",
                        s.name
                    )))
                }
                (SymbolType::Ob, Some(c)) if !alphabet.contains(&c) => {
                    return Err(Error::UnknownLetter(c));
                }
                (t, Some(c)) if t != SymbolType::Ob => {
                    return Err(Error::InvalidModel(format!(
                        "symbol {idx} ({}) of type {t} carries label {c:?}",
                        s.name
                    )))
                }
                _ => {}
            }
        }
        for q in [q0, q1] {
            if q.index() >= n {
                return Err(Error::UnknownSymbol(q.0, n));
            }
        }
        Ok(ModelStructure {
            symbols,
            alphabet,
            q0,
            q1,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    #[inline]
    pub fn ty(&self, q: SymbolId) -> SymbolType {
        self.symbols[q.index()].ty
    }

    #[inline]
    pub fn label(&self, q: SymbolId) -> Option<char> {
        self.symbols[q.index()].label
    }

    pub fn name(&self, q: SymbolId) -> &str {
        &self.symbols[q.index()].name
    }

    pub fn symbols(&self) -> &[SymbolSpec] {
        &self.symbols
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn q0(&self) -> SymbolId {
        self.q0
    }

    pub fn q1(&self) -> SymbolId {
        self.q1
    }

    pub fn ids(&self) -> impl Iterator<Item = SymbolId> + '_ {
        (0..self.len()).map(SymbolId::from)
    }

    pub fn of_type(&self, ty: SymbolType) -> impl Iterator<Item = SymbolId> + '_ {
        self.ids().filter(move |&q| self.ty(q) == ty)
    }

    pub fn nth_of_type(&self, ty: SymbolType, n: usize) -> Option<SymbolId> {
        self.of_type(ty).nth(n)
    }

    pub fn by_name(&self, name: &str) -> Option<SymbolId> {
        self.symbols.iter().position(|s| s.name == name).map(SymbolId::from)
    }

    /// The observation symbol printing `c`, if any.
    pub fn observation_for(&self, c: char) -> Option<SymbolId> {
        self.ids()
            .find(|&q| self.ty(q) == SymbolType::Ob && self.label(q) == Some(c))
    }

    pub fn is_plain_cpp(&self) -> bool {
        self.symbols.iter().all(|s| s.ty.is_plain())
    }

    pub fn check_symbol(&self, q: SymbolId) -> Result<()> {
        if q.index() < self.len() {
            Ok(())
        } else {
            Err(Error::UnknownSymbol(q.0, self.len()))
        }
    }

    pub fn resolve(&self, r: SymbolRef) -> Result<SymbolId> {
        match r {
            SymbolRef::Id(q) => self.check_symbol(q).map(|_| q),
            SymbolRef::Nth(ty, n) => self
                .nth_of_type(ty, n)
                .ok_or_else(|| Error::InvalidModel(format!("model has no {ty} symbol number {n}"))),
        }
    }

    /// Checks every letter of `x` against the alphabet.
    pub fn check_text(&self, x: &[char]) -> Result<()> {
        match x.iter().find(|c| !self.alphabet.contains(c)) {
            Some(&c) => Err(Error::UnknownLetter(c)),
            None => Ok(()),
        }
    }
}

/// Builds a model from per-type symbol counts.
///
/// Numbering is deterministic: observation symbols come first in alphabet
/// order, then the remaining types grouped in [`SymbolType::ALL`] order.
/// A single symbol of a type is named by its lowercased tag (`id`); several
/// get a 1-based suffix (`c1`, `c2`, `s12_1`, ...).
pub fn build_model(
    counts: &[(SymbolType, usize)],
    alphabet: &[char],
    q0: SymbolRef,
    q1: SymbolRef,
) -> Result<ModelStructure> {
    let count_of = |ty: SymbolType| -> usize { counts.iter().filter(|(t, _)| *t == ty).map(|(_, n)| *n).sum() };
    let n_ob = count_of(SymbolType::Ob);
    if n_ob != alphabet.len() {
        return Err(Error::InvalidModel(format!(
            "{n_ob} observation symbols for an alphabet of {} letters",
            alphabet.len()
        )));
    }
    let mut symbols: Vec<SymbolSpec> = alphabet.iter().map(|&c| SymbolSpec::observation(c)).collect();
    for ty in SymbolType::ALL.into_iter().skip(1) {
        let n = count_of(ty);
        let base = ty.tag().to_ascii_lowercase();
        for k in 0..n {
            let name = match (n, ty) {
                (1, _) => base.clone(),
                (_, SymbolType::Id | SymbolType::Cn | SymbolType::Fn) => format!("{}{}", &base[..1], k + 1),
                _ => format!("{base}_{}", k + 1),
            };
            symbols.push(SymbolSpec::new(name, ty));
        }
    }
    let placeholder = SymbolId(0);
    let mut model = ModelStructure::from_symbols(symbols, alphabet.to_vec(), placeholder, placeholder)?;
    model.q0 = model.resolve(q0)?;
    model.q1 = model.resolve(q1)?;
    Ok(model)
}

/// The categorical context a draw happens in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Context {
    /// Output of a constant symbol.
    Cn(SymbolId),
    /// Output of a function symbol given its input.
    Fn(SymbolId, SymbolId),
    /// Child pair of a combinator symbol, cell = `f * |Q| + g`.
    Cm(SymbolId),
}

impl Context {
    pub fn symbol(self) -> SymbolId {
        match self {
            Context::Cn(q) | Context::Fn(q, _) | Context::Cm(q) => q,
        }
    }

    pub fn width(self, n_symbols: usize) -> usize {
        match self {
            Context::Cm(_) => n_symbols * n_symbols,
            _ => n_symbols,
        }
    }
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Context::Cn(q) => write!(f, "Cn({q})"),
            Context::Fn(q, i) => write!(f, "Fn({q}, {i})"),
            Context::Cm(q) => write!(f, "Cm({q})"),
        }
    }
}

/// One nonnegative table per parameterised symbol, shaped after the model.
///
/// Used both for Dirichlet concentrations ([`PriorSpec`]) and for weights
/// ([`WeightTables`]). Non-parameterised symbols have empty entries.
#[derive(Clone, Debug, PartialEq)]
pub struct CellTables {
    n: usize,
    cn: Vec<Vec<f64>>,
    fun: Vec<Vec<f64>>,
    cm: Vec<Vec<f64>>,
}

impl CellTables {
    pub fn filled(model: &ModelStructure, value: f64) -> Self {
        let n = model.len();
        let mut t = CellTables {
            n,
            cn: vec![Vec::new(); n],
            fun: vec![Vec::new(); n],
            cm: vec![Vec::new(); n],
        };
        for q in model.ids() {
            match model.ty(q) {
                SymbolType::Cn => t.cn[q.index()] = vec![value; n],
                SymbolType::Fn => t.fun[q.index()] = vec![value; n * n],
                ty if ty.is_combinator() => t.cm[q.index()] = vec![value; n * n],
                _ => {}
            }
        }
        t
    }

    pub fn n_symbols(&self) -> usize {
        self.n
    }

    /// Context of symbol `q` given input `i`, or `None` for symbols without
    /// parameters.
    pub fn context(&self, q: SymbolId, i: SymbolId) -> Option<Context> {
        let k = q.index();
        if !self.cn[k].is_empty() {
            Some(Context::Cn(q))
        } else if !self.fun[k].is_empty() {
            Some(Context::Fn(q, i))
        } else if !self.cm[k].is_empty() {
            Some(Context::Cm(q))
        } else {
            None
        }
    }

    /// All contexts that own a row, in symbol order.
    pub fn contexts(&self) -> Vec<Context> {
        let mut out = Vec::new();
        for k in 0..self.n {
            let q = SymbolId::from(k);
            if !self.cn[k].is_empty() {
                out.push(Context::Cn(q));
            } else if !self.fun[k].is_empty() {
                out.extend((0..self.n).map(|i| Context::Fn(q, SymbolId::from(i))));
            } else if !self.cm[k].is_empty() {
                out.push(Context::Cm(q));
            }
        }
        out
    }

    pub fn row(&self, ctx: Context) -> &[f64] {
        let n = self.n;
        match ctx {
            Context::Cn(q) => &self.cn[q.index()],
            Context::Fn(q, i) => &self.fun[q.index()][i.index() * n..(i.index() + 1) * n],
            Context::Cm(q) => &self.cm[q.index()],
        }
    }

    pub fn row_mut(&mut self, ctx: Context) -> &mut [f64] {
        let n = self.n;
        match ctx {
            Context::Cn(q) => &mut self.cn[q.index()],
            Context::Fn(q, i) => &mut self.fun[q.index()][i.index() * n..(i.index() + 1) * n],
            Context::Cm(q) => &mut self.cm[q.index()],
        }
    }

    pub fn has_row(&self, ctx: Context) -> bool {
        let k = ctx.symbol().index();
        k < self.n
            && match ctx {
                Context::Cn(_) => !self.cn[k].is_empty(),
                Context::Fn(_, i) => !self.fun[k].is_empty() && i.index() < self.n,
                Context::Cm(_) => !self.cm[k].is_empty(),
            }
    }

    fn cells(&self) -> impl Iterator<Item = &f64> {
        self.cn.iter().chain(self.fun.iter()).chain(self.cm.iter()).flatten()
    }

    fn matches_model(&self, model: &ModelStructure) -> bool {
        let n = model.len();
        self.n == n
            && model.ids().all(|q| {
                let k = q.index();
                let ty = model.ty(q);
                let want = |cond: bool, len: usize| if cond { len } else { 0 };
                self.cn[k].len() == want(ty == SymbolType::Cn, n)
                    && self.fun[k].len() == want(ty == SymbolType::Fn, n * n)
                    && self.cm[k].len() == want(ty.is_combinator(), n * n)
            })
    }
}

/// Dirichlet concentration for every weight cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorSpec {
    alpha: CellTables,
}

impl PriorSpec {
    pub fn from_tables(model: &ModelStructure, alpha: CellTables) -> Result<Self> {
        if !alpha.matches_model(model) {
            return Err(Error::InvalidModel("prior shape does not match the model".into()));
        }
        if let Some(&a) = alpha.cells().find(|&&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::NonPositiveAlpha(a));
        }
        Ok(PriorSpec { alpha })
    }

    pub fn tables(&self) -> &CellTables {
        &self.alpha
    }

    pub fn row(&self, ctx: Context) -> &[f64] {
        self.alpha.row(ctx)
    }
}

/// Every cell of every concentration table set to `base_alpha`.
pub fn standard_prior(model: &ModelStructure, base_alpha: f64) -> Result<PriorSpec> {
    if !(base_alpha > 0.0 && base_alpha.is_finite()) {
        return Err(Error::NonPositiveAlpha(base_alpha));
    }
    Ok(PriorSpec {
        alpha: CellTables::filled(model, base_alpha),
    })
}

/// A map on letters, used both by special prior initialisations and by the
/// dataset patterns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Relation {
    /// Advance `by` positions through the alphabet, wrapping around. On the
    /// digit alphabet this is `x ↦ (x + by) % 10`.
    Shift {
        by: usize,
    },
    Table {
        pairs: Vec<(char, char)>,
    },
}

impl Relation {
    pub fn apply(&self, alphabet: &[char], c: char) -> Option<char> {
        match self {
            Relation::Shift { by } => {
                let pos = alphabet.iter().position(|&a| a == c)?;
                Some(alphabet[(pos + by) % alphabet.len()])
            }
            Relation::Table { pairs } => pairs.iter().find(|(a, _)| *a == c).map(|(_, b)| *b),
        }
    }
}

/// A targeted change to the concentration tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum SpecialInit {
    /// Set one child-pair cell of a combinator's table.
    CmCell {
        symbol: SymbolId,
        f: SymbolId,
        g: SymbolId,
        value: f64,
    },
    /// Rewrite a whole `Fn` table: `hit` where both ends are observation
    /// symbols and `relation(L(i)) = L(j)`, `miss` everywhere else.
    FnRelation {
        symbol: SymbolId,
        relation: Relation,
        hit: f64,
        miss: f64,
    },
}

pub fn apply_special_init(prior: &PriorSpec, model: &ModelStructure, directive: &SpecialInit) -> Result<PriorSpec> {
    let mut out = prior.clone();
    match directive {
        SpecialInit::CmCell { symbol, f, g, value } => {
            for q in [symbol, f, g] {
                model.check_symbol(*q)?;
            }
            if !model.ty(*symbol).is_combinator() {
                return Err(Error::WrongType {
                    symbol: *symbol,
                    ty: model.ty(*symbol),
                    expected: "a combinator",
                });
            }
            if !(*value > 0.0 && value.is_finite()) {
                return Err(Error::NonPositiveAlpha(*value));
            }
            out.alpha.row_mut(Context::Cm(*symbol))[f.index() * model.len() + g.index()] = *value;
        }
        SpecialInit::FnRelation {
            symbol,
            relation,
            hit,
            miss,
        } => {
            model.check_symbol(*symbol)?;
            if model.ty(*symbol) != SymbolType::Fn {
                return Err(Error::WrongType {
                    symbol: *symbol,
                    ty: model.ty(*symbol),
                    expected: "Fn",
                });
            }
            for v in [hit, miss] {
                if !(*v > 0.0 && v.is_finite()) {
                    return Err(Error::NonPositiveAlpha(*v));
                }
            }
            for i in model.ids() {
                let target = model.label(i).and_then(|c| relation.apply(model.alphabet(), c));
                let row = out.alpha.row_mut(Context::Fn(*symbol, i));
                for (j, cell) in row.iter_mut().enumerate() {
                    let hit_here = target.is_some() && model.label(SymbolId::from(j)) == target;
                    *cell = if hit_here { *hit } else { *miss };
                }
            }
        }
    }
    Ok(out)
}

/// Materialised weights `W_Cn`, `W_Fn`, `W_Cm`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTables {
    w: CellTables,
}

impl WeightTables {
    /// All-zero tables; fill with [`WeightTables::row_mut`] and validate.
    pub fn zeros(model: &ModelStructure) -> Self {
        WeightTables {
            w: CellTables::filled(model, 0.0),
        }
    }

    pub fn from_tables(model: &ModelStructure, w: CellTables) -> Result<Self> {
        if !w.matches_model(model) {
            return Err(Error::InvalidWeights("weight shape does not match the model".into()));
        }
        Ok(WeightTables { w })
    }

    pub(crate) fn from_raw(w: CellTables) -> Self {
        WeightTables { w }
    }

    pub fn tables(&self) -> &CellTables {
        &self.w
    }

    pub fn row(&self, ctx: Context) -> &[f64] {
        self.w.row(ctx)
    }

    pub fn row_mut(&mut self, ctx: Context) -> &mut [f64] {
        self.w.row_mut(ctx)
    }

    /// Sets a context to a point mass on `cell`.
    pub fn set_one_hot(&mut self, ctx: Context, cell: usize) {
        let row = self.w.row_mut(ctx);
        row.iter_mut().for_each(|v| *v = 0.0);
        row[cell] = 1.0;
    }

    pub fn cm(&self, q: SymbolId, f: SymbolId, g: SymbolId) -> f64 {
        self.w.row(Context::Cm(q))[f.index() * self.w.n + g.index()]
    }
}

/// First violated constraint found by [`validate_weights`].
#[derive(Clone, Debug, PartialEq)]
pub enum WeightViolation {
    Shape,
    Negative { context: Context, cell: usize, value: f64 },
    SumNotOne { context: Context, sum: f64 },
}

impl fmt::Display for WeightViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightViolation::Shape => f.write_str("weight tables are not shaped for the model"),
            WeightViolation::Negative { context, cell, value } => {
                write!(f, "{context}: cell {cell} is negative ({value})")
            }
            WeightViolation::SumNotOne { context, sum } => {
                write!(f, "{context}: sum {sum} ≠ 1")
            }
        }
    }
}

/// Checks nonnegativity and normalisation of every row (`Cn`, each `Fn`
/// input row, and each combinator's whole joint table).
pub fn validate_weights(model: &ModelStructure, weights: &WeightTables) -> std::result::Result<(), WeightViolation> {
    if !weights.w.matches_model(model) {
        return Err(WeightViolation::Shape);
    }
    for ctx in weights.w.contexts() {
        let row = weights.row(ctx);
        if let Some((cell, &value)) = row.iter().enumerate().find(|(_, v)| v.is_nan() || **v < 0.0) {
            return Err(WeightViolation::Negative {
                context: ctx,
                cell,
                value,
            });
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_TOL {
            return Err(WeightViolation::SumNotOne { context: ctx, sum });
        }
    }
    Ok(())
}

/// JSON form of a model plus optional prior and weights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelDoc {
    pub symbols: Vec<SymbolDoc>,
    pub alphabet: Vec<char>,
    pub q0: SymbolId,
    pub q1: SymbolId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<TablesDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<TablesDoc>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SymbolDoc {
    pub id: SymbolId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(rename = "type")]
    pub ty: SymbolType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<char>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TablesDoc {
    pub cn: Vec<RowDoc>,
    #[serde(rename = "fn")]
    pub fun: Vec<MatrixDoc>,
    pub cm: Vec<MatrixDoc>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RowDoc {
    pub symbol: SymbolId,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatrixDoc {
    pub symbol: SymbolId,
    pub values: Vec<Vec<f64>>,
}

impl TablesDoc {
    pub fn from_tables(t: &CellTables) -> Self {
        let n = t.n;
        let chunk = |v: &Vec<f64>| v.chunks(n).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let mut doc = TablesDoc::default();
        for k in 0..n {
            let symbol = SymbolId::from(k);
            if !t.cn[k].is_empty() {
                doc.cn.push(RowDoc {
                    symbol,
                    values: t.cn[k].clone(),
                });
            }
            if !t.fun[k].is_empty() {
                doc.fun.push(MatrixDoc {
                    symbol,
                    values: chunk(&t.fun[k]),
                });
            }
            if !t.cm[k].is_empty() {
                doc.cm.push(MatrixDoc {
                    symbol,
                    values: chunk(&t.cm[k]),
                });
            }
        }
        doc
    }

    pub fn to_tables(&self, model: &ModelStructure) -> Result<CellTables> {
        let n = model.len();
        let mut t = CellTables::filled(model, f64::NAN);
        let mut seen = vec![false; n];
        let mut put = |symbol: SymbolId, flat: Vec<f64>, slot: &mut Vec<Vec<f64>>| -> Result<()> {
            model.check_symbol(symbol)?;
            let k = symbol.index();
            if slot[k].len() != flat.len() || seen[k] {
                return Err(Error::InvalidModel(format!(
                    "table for symbol {symbol} has the wrong shape or is duplicated"
                )));
            }
            seen[k] = true;
            slot[k] = flat;
            Ok(())
        };
        for r in &self.cn {
            put(r.symbol, r.values.clone(), &mut t.cn)?;
        }
        for m in &self.fun {
            put(m.symbol, m.values.concat(), &mut t.fun)?;
        }
        for m in &self.cm {
            put(m.symbol, m.values.concat(), &mut t.cm)?;
        }
        if t.cells().any(|v| v.is_nan()) {
            return Err(Error::InvalidModel("missing tables for some symbols".into()));
        }
        Ok(t)
    }
}

impl ModelDoc {
    pub fn from_model(model: &ModelStructure) -> Self {
        ModelDoc {
            symbols: model
                .symbols
                .iter()
                .enumerate()
                .map(|(k, s)| SymbolDoc {
                    id: SymbolId::from(k),
                    name: Some(s.name.clone()),
                    ty: s.ty,
                    label: s.label,
                })
                .collect(),
            alphabet: model.alphabet.clone(),
            q0: model.q0,
            q1: model.q1,
            prior: None,
            weights: None,
        }
    }

    pub fn with_prior(mut self, prior: &PriorSpec) -> Self {
        self.prior = Some(TablesDoc::from_tables(&prior.alpha));
        self
    }

    pub fn with_weights(mut self, weights: &WeightTables) -> Self {
        self.weights = Some(TablesDoc::from_tables(&weights.w));
        self
    }

    pub fn model(&self) -> Result<ModelStructure> {
        let mut symbols = Vec::with_capacity(self.symbols.len());
        for (k, s) in self.symbols.iter().enumerate() {
            if s.id.index() != k {
                return Err(Error::InvalidModel(format!(
                    "symbol ids must be 0..n in order; found {} at position {k}",
                    s.id.0
                )));
            }
            let name = s.name.clone().unwrap_or_else(|| match s.label {
                Some(c) => c.to_string(),
                None => format!("q{k}"),
            });
            symbols.push(SymbolSpec {
                name,
                ty: s.ty,
                label: s.label,
            });
        }
        ModelStructure::from_symbols(symbols, self.alphabet.clone(), self.q0, self.q1)
    }

    pub fn prior(&self, model: &ModelStructure) -> Result<Option<PriorSpec>> {
        self.prior
            .as_ref()
            .map(|d| PriorSpec::from_tables(model, d.to_tables(model)?))
            .transpose()
    }

    pub fn weights(&self, model: &ModelStructure) -> Result<Option<WeightTables>> {
        self.weights
            .as_ref()
            .map(|d| WeightTables::from_tables(model, d.to_tables(model)?))
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn digits() -> Vec<char> {
        ('0'..='9').collect()
    }

    fn a1_counts() -> Vec<(SymbolType, usize)> {
        vec![
            (SymbolType::Ob, 10),
            (SymbolType::S2, 3),
            (SymbolType::S12, 3),
            (SymbolType::Cn, 2),
            (SymbolType::Fn, 2),
            (SymbolType::Id, 1),
        ]
    }

    #[test]
    fn a1_structure_has_21_symbols() {
        let s2 = SymbolRef::Nth(SymbolType::S2, 0);
        let m = build_model(&a1_counts(), &digits(), s2, s2).unwrap();
        assert_eq!(m.len(), 21);
        assert_eq!(m.of_type(SymbolType::Ob).count(), 10);
        // Ob block first, in alphabet order.
        for (k, c) in digits().into_iter().enumerate() {
            assert_eq!(m.label(SymbolId::from(k)), Some(c));
        }
        let order: Vec<_> = m.ids().map(|q| m.ty(q)).collect();
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(order, sorted);
        assert_eq!(m.name(SymbolId(10)), "id");
        assert_eq!(m.name(SymbolId(11)), "c1");
        assert_eq!(m.name(SymbolId(18)), "s12_1");
        assert_eq!(m.q0(), m.q1());
        assert_eq!(m.ty(m.q0()), SymbolType::S2);
    }

    #[test]
    fn labels_cover_exactly_the_observations() {
        let s2 = SymbolRef::Nth(SymbolType::S2, 0);
        let m = build_model(&a1_counts(), &digits(), s2, s2).unwrap();
        let mut seen: Vec<char> = m.ids().filter_map(|q| m.label(q)).collect();
        for q in m.ids() {
            assert_eq!(m.label(q).is_some(), m.ty(q) == SymbolType::Ob);
        }
        seen.sort();
        assert_eq!(seen, digits());
    }

    #[test]
    fn minimal_identity_model() {
        let id = SymbolRef::Nth(SymbolType::Id, 0);
        let m = build_model(&[(SymbolType::Id, 1)], &[], id, id).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.q0(), SymbolId(0));
    }

    #[test]
    fn rejects_bad_labels_and_initial_symbols() {
        let labelled_fn = SymbolSpec {
            name: "f".into(),
            ty: SymbolType::Fn,
            label: Some('a'),
        };
        assert!(ModelStructure::from_symbols(vec![labelled_fn], vec!['a'], SymbolId(0), SymbolId(0)).is_err());
        let bare_ob = SymbolSpec::new("o", SymbolType::Ob);
        assert!(ModelStructure::from_symbols(vec![bare_ob], vec!['a'], SymbolId(0), SymbolId(0)).is_err());
        let id = SymbolSpec::new("id", SymbolType::Id);
        assert!(matches!(
            ModelStructure::from_symbols(vec![id], vec![], SymbolId(0), SymbolId(3)),
            Err(Error::UnknownSymbol(3, 1))
        ));
        assert!(build_model(
            &[(SymbolType::Id, 1)],
            &[],
            SymbolRef::Nth(SymbolType::S2, 0),
            SymbolRef::Id(SymbolId(0))
        )
        .is_err());
        // observation count must match the alphabet
        assert!(build_model(
            &[(SymbolType::Ob, 2), (SymbolType::Id, 1)],
            &['a'],
            SymbolRef::Id(SymbolId(0)),
            SymbolRef::Id(SymbolId(0))
        )
        .is_err());
    }

    #[test]
    fn standard_prior_fills_every_cell() {
        let s2 = SymbolRef::Nth(SymbolType::S2, 0);
        let m = build_model(&a1_counts(), &digits(), s2, s2).unwrap();
        let p = standard_prior(&m, 0.1).unwrap();
        for ctx in p.tables().contexts() {
            assert!(p.row(ctx).iter().all(|&a| a == 0.1));
        }
        let p = standard_prior(&m, 1.0).unwrap();
        assert!(p.tables().cells().all(|&a| a == 1.0));
        assert!(matches!(standard_prior(&m, 0.0), Err(Error::NonPositiveAlpha(_))));
        assert!(standard_prior(&m, -1.0).is_err());
    }

    #[test]
    fn cm_cell_changes_one_cell() {
        let s2 = SymbolRef::Nth(SymbolType::S2, 0);
        let m = build_model(&a1_counts(), &digits(), s2, s2).unwrap();
        let base = standard_prior(&m, 0.1).unwrap();
        let q4 = m.nth_of_type(SymbolType::S12, 0).unwrap();
        let c1 = m.nth_of_type(SymbolType::Cn, 0).unwrap();
        let id = m.nth_of_type(SymbolType::Id, 0).unwrap();
        let d = SpecialInit::CmCell {
            symbol: q4,
            f: c1,
            g: id,
            value: 100.0,
        };
        let p = apply_special_init(&base, &m, &d).unwrap();
        let n = m.len();
        let mut changed = 0;
        for ctx in p.tables().contexts() {
            for (cell, (&a, &b)) in p.row(ctx).iter().zip(base.row(ctx)).enumerate() {
                if a != b {
                    changed += 1;
                    assert_eq!(ctx, Context::Cm(q4));
                    assert_eq!(cell, c1.index() * n + id.index());
                    assert_eq!(a, 100.0);
                }
            }
        }
        assert_eq!(changed, 1);

        let f1 = m.nth_of_type(SymbolType::Fn, 0).unwrap();
        let wrong = SpecialInit::CmCell {
            symbol: f1,
            f: c1,
            g: id,
            value: 100.0,
        };
        assert!(matches!(
            apply_special_init(&base, &m, &wrong),
            Err(Error::WrongType { .. })
        ));
    }

    #[test]
    fn fn_relation_marks_ten_cells() {
        let s2 = SymbolRef::Nth(SymbolType::S2, 0);
        let m = build_model(&a1_counts(), &digits(), s2, s2).unwrap();
        let base = standard_prior(&m, 0.1).unwrap();
        let f1 = m.nth_of_type(SymbolType::Fn, 0).unwrap();
        let d = SpecialInit::FnRelation {
            symbol: f1,
            relation: Relation::Shift { by: 1 },
            hit: 100.0,
            miss: 0.1,
        };
        let p = apply_special_init(&base, &m, &d).unwrap();
        let mut hits = Vec::new();
        for i in m.ids() {
            for (j, &a) in p.row(Context::Fn(f1, i)).iter().enumerate() {
                if a == 100.0 {
                    hits.push((m.label(i).unwrap(), m.label(SymbolId::from(j)).unwrap()));
                } else {
                    assert_eq!(a, 0.1);
                }
            }
        }
        assert_eq!(hits.len(), 10);
        assert!(hits.contains(&('9', '0')));
        assert!(hits.contains(&('3', '4')));
        // other symbols untouched
        let f2 = m.nth_of_type(SymbolType::Fn, 1).unwrap();
        assert_eq!(
            p.tables().row(Context::Fn(f2, SymbolId(0))),
            base.row(Context::Fn(f2, SymbolId(0)))
        );
    }

    #[test]
    fn validate_reports_violations() {
        let (m, w) = fixtures::fig1_fixture();
        assert_eq!(validate_weights(&m, &w), Ok(()));

        let c_f = m.by_name("cF").unwrap();
        let mut bad = w.clone();
        bad.row_mut(Context::Cn(c_f)).iter_mut().for_each(|v| *v = 0.0);
        assert!(matches!(
            validate_weights(&m, &bad),
            Err(WeightViolation::SumNotOne { .. })
        ));

        let and = m.by_name("and").unwrap();
        let t = m.by_name("T").unwrap();
        let mut near = w.clone();
        let row = near.row_mut(Context::Fn(and, t));
        let hot = row.iter().position(|&v| v == 1.0).unwrap();
        row[hot] = 1.0 + 1e-12;
        assert_eq!(validate_weights(&m, &near), Ok(()));

        let mut neg = w.clone();
        neg.row_mut(Context::Fn(and, t))[0] = -0.5;
        assert!(matches!(
            validate_weights(&m, &neg),
            Err(WeightViolation::Negative { .. })
        ));
    }

    #[test]
    fn any_single_perturbation_breaks_fixture() {
        let (m, w) = fixtures::fig1_fixture();
        for ctx in w.tables().contexts() {
            for cell in 0..ctx.width(m.len()) {
                let mut bad = w.clone();
                bad.row_mut(ctx)[cell] += 0.5;
                assert!(validate_weights(&m, &bad).is_err(), "{ctx} cell {cell}");
            }
        }
    }

    #[test]
    fn model_doc_roundtrip() {
        let (m, w) = fixtures::fig1_fixture();
        let prior = standard_prior(&m, 0.5).unwrap();
        let doc = ModelDoc::from_model(&m).with_weights(&w).with_prior(&prior);
        let json = serde_json::to_string(&doc).unwrap();
        let back: ModelDoc = serde_json::from_str(&json).unwrap();
        let m2 = back.model().unwrap();
        assert_eq!(m2, m);
        assert_eq!(back.weights(&m2).unwrap().unwrap(), w);
        assert_eq!(back.prior(&m2).unwrap().unwrap(), prior);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(v["symbols"][0]["id"].is_number());
        assert!(v["weights"]["fn"].is_array());
    }
}
