//! Exact declarative semantics and exhaustive trace enumeration.
//!
//! [`evaluate_semantics`] computes `⟦q⟧(i, j)` for every symbol as the least
//! fixed point of the recursive definition, by Kleene iteration from the
//! all-zero table. Observation symbols are treated as identities and the six
//! combinators beyond `S2`/`P21` by their dataflow, so the table gives the
//! print-marginalised output distribution of any model.
//!
//! [`observation_oracle`] brackets `p(x | G)` by expanding every branch of
//! `Sample&Print` from `(q0, q1)` up to a call budget.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{validate_weights, Context, ModelStructure, SymbolId, SymbolType, WeightTables};
use crate::rng::stream;
use crate::sampler::{sample_histogram, Budget, DistributionSource, Event, Execution, Materialized};
use crate::tree::ParseTree;

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// `M_q[i][j] ≈ ⟦q⟧(i, j)` for every symbol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticsTable {
    pub n: usize,
    /// Row-major `n × n` matrix per symbol.
    pub matrices: Vec<Vec<f64>>,
    pub iteration_count: usize,
    pub max_residual: f64,
    pub converged: bool,
}

impl SemanticsTable {
    pub fn zeros(n: usize) -> Self {
        SemanticsTable {
            n,
            matrices: vec![vec![0.0; n * n]; n],
            iteration_count: 0,
            max_residual: f64::INFINITY,
            converged: false,
        }
    }

    #[inline]
    pub fn get(&self, q: SymbolId, i: SymbolId, j: SymbolId) -> f64 {
        self.matrices[q.index()][i.index() * self.n + j.index()]
    }

    pub fn matrix(&self, q: SymbolId) -> &[f64] {
        &self.matrices[q.index()]
    }

    /// Termination probability `Σ_j ⟦q⟧(i, j)`.
    pub fn row_sum(&self, q: SymbolId, i: SymbolId) -> f64 {
        let n = self.n;
        self.matrices[q.index()][i.index() * n..(i.index() + 1) * n]
            .iter()
            .sum()
    }
}

fn row_sums(m: &[f64], n: usize) -> Vec<f64> {
    m.chunks(n).map(|r| r.iter().sum()).collect()
}

/// `out += a · b` for `n × n` matrices, scaled by `s`.
fn add_product(out: &mut [f64], a: &[f64], b: &[f64], n: usize, s: f64) {
    for i in 0..n {
        for k in 0..n {
            let x = a[i * n + k] * s;
            if x == 0.0 {
                continue;
            }
            let (brow, orow) = (&b[k * n..(k + 1) * n], &mut out[i * n..(i + 1) * n]);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += x * bv;
            }
        }
    }
}

/// One Kleene update of a single symbol's matrix given the current table.
fn update_symbol(model: &ModelStructure, weights: &WeightTables, table: &SemanticsTable, q: SymbolId) -> Vec<f64> {
    let n = model.len();
    let mut out = vec![0.0; n * n];
    let mats = &table.matrices;
    match model.ty(q) {
        SymbolType::Ob | SymbolType::Id => {
            for i in 0..n {
                out[i * n + i] = 1.0;
            }
        }
        SymbolType::Cn => {
            let w = weights.row(Context::Cn(q));
            for row in out.chunks_mut(n) {
                row.copy_from_slice(w);
            }
        }
        SymbolType::Fn => {
            for i in 0..n {
                out[i * n..(i + 1) * n].copy_from_slice(weights.row(Context::Fn(q, SymbolId::from(i))));
            }
        }
        ty => {
            let w = weights.row(Context::Cm(q));
            let pairs: Vec<(usize, usize, f64)> = w
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.0)
                .map(|(c, &v)| (c / n, c % n, v))
                .collect();
            // mixed[f] = Σ_g W[f,g] M_g, only for f with some mass
            let mut firsts: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            firsts.dedup();
            let mixed_second = |f: usize| -> Vec<f64> {
                let mut acc = vec![0.0; n * n];
                for &(_, g, v) in pairs.iter().filter(|p| p.0 == f) {
                    for (a, &m) in acc.iter_mut().zip(&mats[g]) {
                        *a += v * m;
                    }
                }
                acc
            };
            match ty {
                SymbolType::S2 => {
                    for &f in &firsts {
                        add_product(&mut out, &mats[f], &mixed_second(f), n, 1.0);
                    }
                }
                SymbolType::S1 | SymbolType::P1 => {
                    for &f in &firsts {
                        // termination of g on k (S1) or on i (P1)
                        let term = row_sums(&mixed_second(f), n);
                        let mf = &mats[f];
                        for i in 0..n {
                            for k in 0..n {
                                let t = if ty == SymbolType::S1 { term[k] } else { term[i] };
                                out[i * n + k] += mf[i * n + k] * t;
                            }
                        }
                    }
                }
                SymbolType::P2 => {
                    for &(f, g, v) in &pairs {
                        let term = row_sums(&mats[f], n);
                        let mg = &mats[g];
                        for i in 0..n {
                            let s = v * term[i];
                            if s == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                out[i * n + j] += s * mg[i * n + j];
                            }
                        }
                    }
                }
                _ => {
                    // h[i][k][l]: probability mass of (first output k, second output l)
                    let mut h = vec![0.0; n * n * n];
                    for &f in &firsts {
                        let second = mixed_second(f);
                        let mf = &mats[f];
                        for i in 0..n {
                            for k in 0..n {
                                let a = mf[i * n + k];
                                if a == 0.0 {
                                    continue;
                                }
                                let src = if ty.is_sequential() { k } else { i };
                                let hrow = &mut h[(i * n + k) * n..(i * n + k + 1) * n];
                                for (hv, &s) in hrow.iter_mut().zip(&second[src * n..(src + 1) * n]) {
                                    *hv += a * s;
                                }
                            }
                        }
                    }
                    let invoke_first = matches!(ty, SymbolType::S12 | SymbolType::P12);
                    for i in 0..n {
                        for k in 0..n {
                            for l in 0..n {
                                let p = h[(i * n + k) * n + l];
                                if p == 0.0 {
                                    continue;
                                }
                                // S12/P12 run k on l; S21/P21 run l on k
                                let (sym, input) = if invoke_first { (k, l) } else { (l, k) };
                                let m = &mats[sym][input * n..(input + 1) * n];
                                for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(m) {
                                    *o += p * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// One Jacobi round of the fixed-point iteration over every symbol.
pub fn kleene_step(model: &ModelStructure, weights: &WeightTables, table: &SemanticsTable) -> SemanticsTable {
    let matrices: Vec<Vec<f64>> = model.ids().map(|q| update_symbol(model, weights, table, q)).collect();
    let max_residual = matrices
        .iter()
        .zip(&table.matrices)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    SemanticsTable {
        n: table.n,
        matrices,
        iteration_count: table.iteration_count + 1,
        max_residual,
        converged: false,
    }
}

/// Least fixed point by iteration from zero. Stops when the elementwise
/// change drops below `tol` or after `max_iter` rounds; check
/// [`SemanticsTable::converged`].
pub fn evaluate_semantics(
    model: &ModelStructure,
    weights: &WeightTables,
    tol: f64,
    max_iter: usize,
) -> Result<SemanticsTable> {
    validate_weights(model, weights).map_err(|v| Error::InvalidWeights(v.to_string()))?;
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    let mut table = SemanticsTable::zeros(model.len());
    while table.iteration_count < max_iter {
        table = kleene_step(model, weights, &table);
        if table.max_residual < tol {
            table.converged = true;
            break;
        }
    }
    Ok(table)
}

/// The combinator update for `q` given `table`, without touching other
/// symbols.
pub fn compose_step(
    model: &ModelStructure,
    weights: &WeightTables,
    table: &SemanticsTable,
    q: SymbolId,
) -> Result<Vec<f64>> {
    model.check_symbol(q)?;
    let ty = model.ty(q);
    if !ty.is_combinator() {
        return Err(Error::WrongType {
            symbol: q,
            ty,
            expected: "a combinator",
        });
    }
    Ok(update_symbol(model, weights, table, q))
}

/// Bracket on `p(x | G)` from exhaustive expansion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// Mass of complete executions printing exactly `x`.
    pub matched_mass: f64,
    /// Mass of executions cut off (by the budget or the probability floor)
    /// before resolving.
    pub truncated_mass: f64,
    pub depth_budget: u32,
    /// Number of complete matching executions.
    pub matched_traces: usize,
}

fn expand<F: FnMut(&Execution, f64)>(
    model: &ModelStructure,
    source: &DistributionSource<'_>,
    x: &[char],
    depth_budget: u32,
    min_prob: f64,
    mut on_match: F,
) -> Result<OracleResult> {
    model.check_text(x)?;
    if depth_budget == 0 {
        return Err(Error::Config("depth budget must be at least 1".into()));
    }
    let budget = Budget {
        max_calls: depth_budget,
        max_prints: u32::MAX,
    };
    let mut result = OracleResult {
        matched_mass: 0.0,
        truncated_mass: 0.0,
        depth_budget,
        matched_traces: 0,
    };
    // The source is only consulted through `support`; execution itself never
    // draws, so the rng is never used.
    let mut rng = stream(0, &[]);
    let mut stack = vec![(Execution::new(model.q0(), model.q1(), budget), 1.0f64)];
    while let Some((mut exec, p)) = stack.pop() {
        if p < min_prob {
            result.truncated_mass += p;
            continue;
        }
        match exec.advance(model, None, &mut rng, true) {
            Event::Printed(c) => {
                let n = exec.printed().len();
                if n <= x.len() && x[n - 1] == c {
                    stack.push((exec, p));
                }
            }
            Event::Returned(_) => {
                if exec.printed().len() == x.len() {
                    result.matched_mass += p;
                    result.matched_traces += 1;
                    on_match(&exec, p);
                }
            }
            Event::BudgetExceeded => result.truncated_mass += p,
            Event::NeedDraw(ctx) => {
                for (cell, pc) in source.support(ctx, exec.local()).into_iter().rev() {
                    let mut child = exec.clone();
                    child.apply_draw(model, ctx, cell);
                    stack.push((child, p * pc));
                }
            }
        }
    }
    Ok(result)
}

/// Expands every branch of `Sample&Print(q0, q1)` that stays consistent with
/// `x`, summing the mass of complete matches and of budget cut-offs.
///
/// `depth_budget` bounds the number of calls per branch, as [`Budget`] does
/// for the sampler. With a collapsed source, branch probabilities follow the
/// Pólya urn (or frozen predictive) exactly as the sampler would draw.
pub fn observation_oracle(
    model: &ModelStructure,
    source: &DistributionSource<'_>,
    x: &[char],
    depth_budget: u32,
) -> Result<OracleResult> {
    expand(model, source, x, depth_budget, 0.0, |_, _| {})
}

/// [`observation_oracle`] that also stops expanding branches whose
/// probability falls below `min_prob`, counting them as truncated. The
/// bracket `[matched, matched + truncated]` stays valid.
pub fn observation_oracle_pruned(
    model: &ModelStructure,
    source: &DistributionSource<'_>,
    x: &[char],
    depth_budget: u32,
    min_prob: f64,
) -> Result<OracleResult> {
    expand(model, source, x, depth_budget, min_prob, |_, _| {})
}

/// Every complete trace printing `x` within the budget and above the
/// probability floor, with its probability.
pub fn enumerate_parses(
    model: &ModelStructure,
    source: &DistributionSource<'_>,
    x: &[char],
    depth_budget: u32,
    min_prob: f64,
) -> Result<(Vec<(ParseTree, f64)>, OracleResult)> {
    let mut out = Vec::new();
    let r = expand(model, source, x, depth_budget, min_prob, |exec, p| {
        out.push((exec.tree(model), p))
    })?;
    Ok((out, r))
}

/// Agreement between one output cell and its empirical frequency.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellCheck {
    /// `None` for the non-termination cell.
    pub output: Option<SymbolId>,
    pub expected: f64,
    pub observed: f64,
    pub standard_error: f64,
    pub ok: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplerCheckReport {
    pub symbol: SymbolId,
    pub input: SymbolId,
    pub n_samples: usize,
    pub cells: Vec<CellCheck>,
}

impl SamplerCheckReport {
    pub fn failing(&self) -> impl Iterator<Item = &CellCheck> {
        self.cells.iter().filter(|c| !c.ok)
    }

    pub fn passed(&self) -> bool {
        self.cells.iter().all(|c| c.ok)
    }
}

/// Runs `Sample(q, i)` `n_samples` times and checks every output frequency,
/// and the non-termination frequency, against `table` within four binomial
/// standard errors (plus the table's own residual).
#[allow(clippy::too_many_arguments)]
pub fn semantics_vs_sampler_check(
    model: &ModelStructure,
    source: &Materialized,
    table: &SemanticsTable,
    q: SymbolId,
    i: SymbolId,
    n_samples: usize,
    budget: Budget,
    seed: u64,
) -> Result<SamplerCheckReport> {
    let n = model.len();
    let mut rng = stream(seed, &[u64::from(q.0), u64::from(i.0)]);
    let (hits, stuck) = sample_histogram(source, model, q, i, budget, n_samples, &mut rng)?;
    let slack = if table.max_residual.is_finite() {
        table.max_residual
    } else {
        0.0
    } + 1e-9;
    let check = |output: Option<SymbolId>, expected: f64, count: usize| {
        let p = expected.clamp(0.0, 1.0);
        let observed = count as f64 / n_samples as f64;
        let se = (p * (1.0 - p) / n_samples as f64).sqrt();
        CellCheck {
            output,
            expected,
            observed,
            standard_error: se,
            ok: (observed - expected).abs() <= 4.0 * se + slack,
        }
    };
    let mut cells: Vec<CellCheck> = (0..n)
        .map(|j| check(Some(SymbolId::from(j)), table.get(q, i, SymbolId::from(j)), hits[j]))
        .collect();
    cells.push(check(None, 1.0 - table.row_sum(q, i), stuck));
    Ok(SamplerCheckReport {
        symbol: q,
        input: i,
        n_samples,
        cells,
    })
}

/// Draws a random plain CPP: uniformly chosen types, Dirichlet(1) weights
/// sparsified so each row keeps only a few cells.
pub fn random_plain_cpp<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (ModelStructure, WeightTables) {
    use crate::model::SymbolSpec;
    let types = [
        SymbolType::Id,
        SymbolType::Cn,
        SymbolType::Fn,
        SymbolType::S2,
        SymbolType::P21,
    ];
    let specs: Vec<SymbolSpec> = (0..n)
        .map(|k| SymbolSpec::new(format!("q{k}"), types[rng.random_range(0..types.len())]))
        .collect();
    let model = ModelStructure::from_symbols(specs, Vec::new(), SymbolId(0), SymbolId(0)).expect("random model");
    let mut w = WeightTables::zeros(&model);
    for ctx in w.tables().contexts() {
        let width = ctx.width(n);
        let keep = rng.random_range(1..=3.min(width));
        let row = w.row_mut(ctx);
        for _ in 0..keep {
            // exponential(1) draws normalise to a Dirichlet(1) over the kept cells
            let e = -(1.0 - rng.random::<f64>()).ln();
            row[rng.random_range(0..width)] += e;
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    (model, w)
}
