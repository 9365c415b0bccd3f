//! Procedural semantics: `Sample` for plain CPPs and `Sample&Print` for
//! models with observation symbols.
//!
//! Executions run on an explicit stack so they can be suspended at every
//! print (the particle filter's checkpoints), cloned, replayed from a list of
//! recorded choices, or driven one categorical draw at a time by the
//! exhaustive oracle.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{
    validate_weights, CellTables, Context, ModelStructure, PriorSpec, SymbolId, SymbolType, WeightTables,
};
use crate::tree::{CountTables, ParseTree, TraceNode, NO_DRAW, NO_PARENT};

/// Per-row cumulative sums for inverse-CDF draws.
#[derive(Clone, Debug)]
struct CdfTables {
    n: usize,
    cn: Vec<Vec<f64>>,
    fun: Vec<Vec<f64>>,
    cm: Vec<Vec<f64>>,
}

fn cumulative(row: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    row.iter()
        .map(|&v| {
            acc += v;
            acc
        })
        .collect()
}

impl CdfTables {
    fn new(t: &CellTables) -> Self {
        let n = t.n_symbols();
        let mut out = CdfTables {
            n,
            cn: vec![Vec::new(); n],
            fun: vec![Vec::new(); n],
            cm: vec![Vec::new(); n],
        };
        for ctx in t.contexts() {
            let q = ctx.symbol().index();
            match ctx {
                Context::Cn(_) => out.cn[q] = cumulative(t.row(ctx)),
                Context::Fn(..) => out.fun[q].extend(cumulative(t.row(ctx))),
                Context::Cm(_) => out.cm[q] = cumulative(t.row(ctx)),
            }
        }
        out
    }

    #[inline]
    fn row(&self, ctx: Context) -> &[f64] {
        match ctx {
            Context::Cn(q) => &self.cn[q.index()],
            Context::Fn(q, i) => &self.fun[q.index()][i.index() * self.n..(i.index() + 1) * self.n],
            Context::Cm(q) => &self.cm[q.index()],
        }
    }

    #[inline]
    fn total(&self, ctx: Context) -> f64 {
        *self.row(ctx).last().unwrap_or(&0.0)
    }

    /// Cell whose cumulative interval contains `u` (`0 ≤ u < total`).
    #[inline]
    fn locate(&self, ctx: Context, u: f64) -> u32 {
        let row = self.row(ctx);
        let k = row.partition_point(|&c| c <= u);
        if k < row.len() {
            k as u32
        } else {
            // u rounded up to the total: take the last cell with mass
            let mut k = row.len() - 1;
            while k > 0 && row[k - 1] == row[k] {
                k -= 1;
            }
            k as u32
        }
    }
}

/// Nonzero cells of each row with their cumulative weights; materialised
/// weights are usually sparse, and one-hot rows need no randomness at all.
#[derive(Clone, Debug)]
struct SparseCdf {
    n: usize,
    cn: Vec<Vec<(u32, f64)>>,
    fun: Vec<Vec<Vec<(u32, f64)>>>,
    cm: Vec<Vec<(u32, f64)>>,
}

impl SparseCdf {
    fn new(t: &CellTables) -> Self {
        let n = t.n_symbols();
        let mut out = SparseCdf {
            n,
            cn: vec![Vec::new(); n],
            fun: vec![Vec::new(); n],
            cm: vec![Vec::new(); n],
        };
        for ctx in t.contexts() {
            let mut acc = 0.0;
            let row: Vec<(u32, f64)> = t
                .row(ctx)
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.0)
                .map(|(c, &v)| {
                    acc += v;
                    (c as u32, acc)
                })
                .collect();
            let q = ctx.symbol().index();
            match ctx {
                Context::Cn(_) => out.cn[q] = row,
                Context::Fn(..) => out.fun[q].push(row),
                Context::Cm(_) => out.cm[q] = row,
            }
        }
        out
    }

    #[inline]
    fn draw<R: Rng + ?Sized>(&self, ctx: Context, rng: &mut R) -> u32 {
        let row = match ctx {
            Context::Cn(q) => &self.cn[q.index()],
            Context::Fn(q, i) => &self.fun[q.index()][i.index()],
            Context::Cm(q) => &self.cm[q.index()],
        };
        debug_assert!(self.n > 0 && !row.is_empty(), "validated rows have mass");
        if let [(cell, _)] = row.as_slice() {
            return *cell;
        }
        let u = rng.random::<f64>() * row[row.len() - 1].1;
        let k = row.partition_point(|&(_, c)| c <= u).min(row.len() - 1);
        row[k].0
    }
}

/// Validated weights ready for sampling.
#[derive(Clone, Debug)]
pub struct Materialized {
    weights: WeightTables,
    cdf: SparseCdf,
}

impl Materialized {
    pub fn new(model: &ModelStructure, weights: WeightTables) -> Result<Self> {
        validate_weights(model, &weights).map_err(|v| Error::InvalidWeights(v.to_string()))?;
        let cdf = SparseCdf::new(weights.tables());
        Ok(Materialized { weights, cdf })
    }

    pub fn weights(&self) -> &WeightTables {
        &self.weights
    }
}

/// A prior with cached row totals for collapsed draws.
#[derive(Clone, Debug)]
pub struct CollapsedPrior {
    prior: PriorSpec,
    cdf: CdfTables,
}

impl CollapsedPrior {
    pub fn new(prior: PriorSpec) -> Self {
        let cdf = CdfTables::new(prior.tables());
        CollapsedPrior { prior, cdf }
    }

    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    pub fn alpha_total(&self, ctx: Context) -> f64 {
        self.cdf.total(ctx)
    }
}

/// Whether a collapsed draw sees the execution's own earlier draws.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PredictiveMode {
    /// Pólya urn: base counts plus the draws already made in this trace.
    #[default]
    Polya,
    /// Base counts only.
    Frozen,
}

/// Where categorical draws come from.
#[derive(Clone, Copy, Debug)]
pub enum DistributionSource<'a> {
    Materialized(&'a Materialized),
    /// Dirichlet-multinomial posterior predictive given `base` counts.
    Collapsed {
        prior: &'a CollapsedPrior,
        base: &'a CountTables,
        mode: PredictiveMode,
    },
}

impl DistributionSource<'_> {
    /// Probability of `cell` in `ctx`, given the execution's local counts.
    pub fn prob(&self, ctx: Context, cell: u32, local: &LocalCounts) -> f64 {
        match *self {
            DistributionSource::Materialized(m) => m.weights.row(ctx)[cell as usize],
            DistributionSource::Collapsed { prior, base, mode } => {
                let row = base.row(ctx);
                let (l_cell, l_total) = match mode {
                    PredictiveMode::Polya => (local.get(ctx, cell), local.total(ctx)),
                    PredictiveMode::Frozen => (0, 0),
                };
                let alpha = prior.prior.row(ctx)[cell as usize];
                (alpha + f64::from(row.get(cell)) + f64::from(l_cell))
                    / (prior.alpha_total(ctx) + f64::from(row.total()) + f64::from(l_total))
            }
        }
    }

    /// Cells with nonzero probability and their probabilities.
    pub fn support(&self, ctx: Context, local: &LocalCounts) -> Vec<(u32, f64)> {
        let width = match *self {
            DistributionSource::Materialized(m) => m.weights.row(ctx).len(),
            DistributionSource::Collapsed { prior, .. } => prior.prior.row(ctx).len(),
        };
        (0..width as u32)
            .map(|c| (c, self.prob(ctx, c, local)))
            .filter(|&(_, p)| p > 0.0)
            .collect()
    }

    fn draw<R: Rng + ?Sized>(&self, ctx: Context, local: &LocalCounts, rng: &mut R) -> u32 {
        match *self {
            DistributionSource::Materialized(m) => m.cdf.draw(ctx, rng),
            DistributionSource::Collapsed { prior, base, mode } => {
                let a = prior.alpha_total(ctx);
                let row = base.row(ctx);
                let nb = f64::from(row.total());
                let nl = match mode {
                    PredictiveMode::Polya => local.total(ctx),
                    PredictiveMode::Frozen => 0,
                };
                let mut u = rng.random::<f64>() * (a + nb + f64::from(nl));
                if u < a {
                    return prior.cdf.locate(ctx, u);
                }
                u -= a;
                if u < nb || nl == 0 {
                    let mut last = 0;
                    for (cell, c) in row.iter() {
                        last = cell;
                        if u < f64::from(c) {
                            return cell;
                        }
                        u -= f64::from(c);
                    }
                    if nl == 0 {
                        return if row.total() == 0 {
                            prior.cdf.locate(ctx, a)
                        } else {
                            last
                        };
                    }
                    u = 0.0;
                } else {
                    u -= nb;
                }
                local.locate(ctx, u)
            }
        }
    }
}

/// Draws made so far by one execution, for Pólya-urn predictive updates.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LocalCounts {
    entries: Vec<(Context, u32, u32)>,
}

impl LocalCounts {
    pub fn get(&self, ctx: Context, cell: u32) -> u32 {
        self.entries
            .iter()
            .find(|e| e.0 == ctx && e.1 == cell)
            .map_or(0, |e| e.2)
    }

    pub fn total(&self, ctx: Context) -> u32 {
        self.entries.iter().filter(|e| e.0 == ctx).map(|e| e.2).sum()
    }

    pub fn add(&mut self, ctx: Context, cell: u32) {
        match self.entries.iter_mut().find(|e| e.0 == ctx && e.1 == cell) {
            Some(e) => e.2 += 1,
            None => self.entries.push((ctx, cell, 1)),
        }
    }

    fn locate(&self, ctx: Context, mut u: f64) -> u32 {
        let mut last = 0;
        for &(c, cell, n) in &self.entries {
            if c != ctx {
                continue;
            }
            last = cell;
            if u < f64::from(n) {
                return cell;
            }
            u -= f64::from(n);
        }
        last
    }

    pub fn to_counts(&self, n_symbols: usize) -> CountTables {
        let mut t = CountTables::new(n_symbols);
        for &(ctx, cell, n) in &self.entries {
            t.increment(ctx, cell as usize, n);
        }
        t
    }
}

/// Limits on a single execution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Budget {
    /// Maximum number of (recursive) calls.
    pub max_calls: u32,
    /// Maximum number of prints.
    pub max_prints: u32,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            max_calls: 500,
            max_prints: 10_000,
        }
    }
}

impl Budget {
    pub fn calls(max_calls: u32) -> Self {
        Budget {
            max_calls,
            ..Budget::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Returned(SymbolId),
    BudgetExceeded,
}

#[derive(Clone, Debug)]
pub struct ExecOutcome {
    pub status: Status,
    pub printed: String,
    pub trace: ParseTree,
}

impl ExecOutcome {
    pub fn output(&self) -> Option<SymbolId> {
        match self.status {
            Status::Returned(j) => Some(j),
            Status::BudgetExceeded => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Event {
    Printed(char),
    Returned(SymbolId),
    BudgetExceeded,
    /// Only when no source was supplied: the caller must [`Execution::apply_draw`].
    NeedDraw(Context),
}

#[derive(Clone, Copy, Debug)]
enum Action {
    Call(SymbolId, SymbolId),
    Draw(Context),
    Return(SymbolId),
    Done(Event),
}

#[derive(Clone, Copy, Debug)]
struct Frame {
    node: u32,
    ty: SymbolType,
    input: SymbolId,
    g: SymbolId,
    k: SymbolId,
    stage: u8,
}

#[derive(Clone, Debug)]
struct Replay {
    choices: Arc<[u32]>,
    pos: usize,
}

/// A suspended run of `Sample&Print`.
#[derive(Clone, Debug)]
pub(crate) struct Execution {
    stack: Vec<Frame>,
    trace: Vec<TraceNode>,
    pending: Action,
    calls_left: u32,
    prints_left: u32,
    printed: Vec<char>,
    local: LocalCounts,
    track_local: bool,
    silent: bool,
    replay: Option<Replay>,
}

impl Execution {
    pub(crate) fn new(q: SymbolId, i: SymbolId, budget: Budget) -> Self {
        Execution {
            stack: Vec::new(),
            trace: Vec::new(),
            pending: Action::Call(q, i),
            calls_left: budget.max_calls,
            prints_left: budget.max_prints,
            printed: Vec::new(),
            local: LocalCounts::default(),
            track_local: true,
            silent: false,
            replay: None,
        }
    }

    /// Restarts at `(q, i)`, keeping the buffers and flags.
    pub(crate) fn reset(&mut self, q: SymbolId, i: SymbolId, budget: Budget) {
        self.stack.clear();
        self.trace.clear();
        self.printed.clear();
        self.local = LocalCounts::default();
        self.pending = Action::Call(q, i);
        self.calls_left = budget.max_calls;
        self.prints_left = budget.max_prints;
        if let Some(r) = &mut self.replay {
            r.pos = 0;
        }
    }

    pub(crate) fn silent(mut self) -> Self {
        self.silent = true;
        self
    }

    pub(crate) fn untracked(mut self) -> Self {
        self.track_local = false;
        self
    }

    /// Forces the first draws to follow `choices`; once they run out the
    /// execution draws freely.
    pub(crate) fn replaying(mut self, choices: Arc<[u32]>) -> Self {
        self.replay = Some(Replay { choices, pos: 0 });
        self
    }

    /// Stops replaying (used when a clone branches off a reference run).
    pub(crate) fn detach(&mut self) {
        self.replay = None;
    }

    pub(crate) fn printed(&self) -> &[char] {
        &self.printed
    }

    pub(crate) fn local(&self) -> &LocalCounts {
        &self.local
    }

    pub(crate) fn tree(&self, model: &ModelStructure) -> ParseTree {
        ParseTree::from_trace(model, &self.trace)
    }

    pub(crate) fn outcome(&self, model: &ModelStructure, ev: Event) -> ExecOutcome {
        ExecOutcome {
            status: match ev {
                Event::Returned(j) => Status::Returned(j),
                _ => Status::BudgetExceeded,
            },
            printed: self.printed.iter().collect(),
            trace: self.tree(model),
        }
    }

    /// Runs until the next print (if `stop_on_print`), termination, budget
    /// exhaustion, or — without a source — the next categorical draw.
    pub(crate) fn advance<R: Rng + ?Sized>(
        &mut self,
        model: &ModelStructure,
        source: Option<&DistributionSource<'_>>,
        rng: &mut R,
        stop_on_print: bool,
    ) -> Event {
        loop {
            match self.pending {
                Action::Done(ev) => return ev,
                Action::Call(q, i) => {
                    if self.calls_left == 0 {
                        self.pending = Action::Done(Event::BudgetExceeded);
                        continue;
                    }
                    self.calls_left -= 1;
                    let parent = self.stack.last().map_or(NO_PARENT, |f| f.node);
                    self.trace.push(TraceNode {
                        symbol: q,
                        input: i,
                        output: None,
                        parent,
                        drawn: NO_DRAW,
                    });
                    match model.ty(q) {
                        SymbolType::Ob if !self.silent => {
                            if self.prints_left == 0 {
                                self.pending = Action::Done(Event::BudgetExceeded);
                                continue;
                            }
                            self.prints_left -= 1;
                            let c = model.label(q).expect("observation symbols carry labels");
                            self.printed.push(c);
                            self.trace.last_mut().unwrap().output = Some(i);
                            self.pending = Action::Return(i);
                            if stop_on_print {
                                return Event::Printed(c);
                            }
                        }
                        SymbolType::Ob | SymbolType::Id => {
                            self.trace.last_mut().unwrap().output = Some(i);
                            self.pending = Action::Return(i);
                        }
                        SymbolType::Cn => self.pending = Action::Draw(Context::Cn(q)),
                        SymbolType::Fn => self.pending = Action::Draw(Context::Fn(q, i)),
                        _ => self.pending = Action::Draw(Context::Cm(q)),
                    }
                }
                Action::Draw(ctx) => {
                    let forced = self.replay.as_mut().and_then(|r| {
                        let c = r.choices.get(r.pos).copied();
                        r.pos += 1;
                        c
                    });
                    let cell = match (forced, source) {
                        (Some(c), _) => c,
                        (None, Some(src)) => src.draw(ctx, &self.local, rng),
                        (None, None) => return Event::NeedDraw(ctx),
                    };
                    self.apply_draw(model, ctx, cell);
                }
                Action::Return(v) => {
                    let Some(top) = self.stack.last_mut() else {
                        self.pending = Action::Done(Event::Returned(v));
                        continue;
                    };
                    match top.stage {
                        0 => {
                            top.k = v;
                            top.stage = 1;
                            let input = if top.ty.is_sequential() { v } else { top.input };
                            self.pending = Action::Call(top.g, input);
                        }
                        1 => {
                            let (k, l) = (top.k, v);
                            match top.ty {
                                SymbolType::S1 | SymbolType::P1 => self.finish_frame(k),
                                SymbolType::S2 | SymbolType::P2 => self.finish_frame(l),
                                SymbolType::S12 | SymbolType::P12 => {
                                    top.stage = 2;
                                    self.pending = Action::Call(k, l);
                                }
                                _ => {
                                    top.stage = 2;
                                    self.pending = Action::Call(l, k);
                                }
                            }
                        }
                        _ => self.finish_frame(v),
                    }
                }
            }
        }
    }

    fn finish_frame(&mut self, v: SymbolId) {
        let frame = self.stack.pop().expect("frame");
        self.trace[frame.node as usize].output = Some(v);
        self.pending = Action::Return(v);
    }

    /// Resolves a pending draw with `cell`.
    pub(crate) fn apply_draw(&mut self, model: &ModelStructure, ctx: Context, cell: u32) {
        debug_assert!(matches!(self.pending, Action::Draw(c) if c == ctx));
        if self.track_local {
            self.local.add(ctx, cell);
        }
        let node = self.trace.len() as u32 - 1;
        let rec = self.trace.last_mut().unwrap();
        rec.drawn = cell;
        match ctx {
            Context::Cn(_) | Context::Fn(..) => {
                let j = SymbolId(cell);
                rec.output = Some(j);
                self.pending = Action::Return(j);
            }
            Context::Cm(q) => {
                let n = model.len() as u32;
                let (f, g) = (SymbolId(cell / n), SymbolId(cell % n));
                let input = rec.input;
                self.stack.push(Frame {
                    node,
                    ty: model.ty(q),
                    input,
                    g,
                    k: SymbolId(0),
                    stage: 0,
                });
                self.pending = Action::Call(f, input);
            }
        }
    }

    /// Runs to completion.
    pub(crate) fn run<R: Rng + ?Sized>(
        &mut self,
        model: &ModelStructure,
        source: &DistributionSource<'_>,
        rng: &mut R,
    ) -> Event {
        self.advance(model, Some(source), rng, false)
    }
}

fn check_source(model: &ModelStructure, source: &DistributionSource<'_>) -> Result<()> {
    let n = match source {
        DistributionSource::Materialized(m) => m.weights.tables().n_symbols(),
        DistributionSource::Collapsed { prior, base, .. } => {
            if base.n_symbols() != model.len() {
                return Err(Error::InvalidModel("count tables do not match the model".into()));
            }
            prior.prior.tables().n_symbols()
        }
    };
    if n != model.len() {
        return Err(Error::InvalidModel("source does not match the model".into()));
    }
    Ok(())
}

/// `Sample(q, i)`: one execution with prints suppressed (observation symbols
/// act as identities). Returns `j` with probability `⟦q⟧(i, j)`.
pub fn sample<R: Rng + ?Sized>(
    source: &DistributionSource<'_>,
    model: &ModelStructure,
    q: SymbolId,
    i: SymbolId,
    budget: Budget,
    rng: &mut R,
) -> Result<ExecOutcome> {
    model.check_symbol(q)?;
    model.check_symbol(i)?;
    check_source(model, source)?;
    let mut exec = Execution::new(q, i, budget).silent();
    if matches!(source, DistributionSource::Materialized(_)) {
        exec = exec.untracked();
    }
    let ev = exec.run(model, source, rng);
    Ok(exec.outcome(model, ev))
}

/// Output histogram of `n` runs of `Sample(q, i)` from materialised weights:
/// counts per output symbol, and the number of runs that hit the budget.
pub fn sample_histogram<R: Rng + ?Sized>(
    source: &Materialized,
    model: &ModelStructure,
    q: SymbolId,
    i: SymbolId,
    budget: Budget,
    n: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, usize)> {
    model.check_symbol(q)?;
    model.check_symbol(i)?;
    let src = DistributionSource::Materialized(source);
    check_source(model, &src)?;
    let mut hits = vec![0usize; model.len()];
    let mut stuck = 0;
    let mut exec = Execution::new(q, i, budget).silent().untracked();
    for _ in 0..n {
        exec.reset(q, i, budget);
        match exec.run(model, &src, rng) {
            Event::Returned(j) => hits[j.index()] += 1,
            _ => stuck += 1,
        }
    }
    Ok((hits, stuck))
}

/// `Sample&Print(q, i)`: one execution, recording printed letters and the
/// full trace.
pub fn sample_and_print<R: Rng + ?Sized>(
    source: &DistributionSource<'_>,
    model: &ModelStructure,
    q: SymbolId,
    i: SymbolId,
    budget: Budget,
    rng: &mut R,
) -> Result<ExecOutcome> {
    model.check_symbol(q)?;
    model.check_symbol(i)?;
    check_source(model, source)?;
    let mut exec = Execution::new(q, i, budget);
    let ev = exec.run(model, source, rng);
    Ok(exec.outcome(model, ev))
}

/// One draw from `p(x | G)`: `Sample&Print(q0, q1)`.
pub fn generate<R: Rng + ?Sized>(
    source: &DistributionSource<'_>,
    model: &ModelStructure,
    budget: Budget,
    rng: &mut R,
) -> Result<ExecOutcome> {
    sample_and_print(source, model, model.q0(), model.q1(), budget, rng)
}

/// Re-executes a recorded list of choices from `(q0, q1)`.
pub fn replay(model: &ModelStructure, choices: &[u32], budget: Budget) -> Result<ExecOutcome> {
    let mut exec = Execution::new(model.q0(), model.q1(), budget).replaying(choices.into());
    let mut rng = crate::rng::stream(0, &[]);
    match exec.advance(model, None, &mut rng, false) {
        Event::NeedDraw(ctx) => Err(Error::InvalidModel(format!("replay ran out of choices at {ctx}"))),
        ev => Ok(exec.outcome(model, ev)),
    }
}
