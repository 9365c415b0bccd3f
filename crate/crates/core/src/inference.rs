//! Collapsed Gibbs sampling over parse trees with a conditional particle
//! filter per datum.
//!
//! Weights are integrated out: every draw uses the Dirichlet-multinomial
//! predictive given the counts of all other data's trees plus the draws the
//! particle has already made ([`PredictiveMode::Polya`]). Particles run
//! `Sample&Print(q0, q1)` to their next print; those whose output so far
//! disagrees with the datum are killed and the pool is refilled from the
//! survivors.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{advance_epoch, CurriculumSchedule, DatasetState};
use crate::error::{Error, Result};
use crate::model::{Context, ModelDoc, ModelStructure, PriorSpec, Relation, SymbolId, SymbolType, WeightTables};
use crate::rng::{derive, stream, tag};
use crate::sampler::{Budget, CollapsedPrior, DistributionSource, Event, Execution, PredictiveMode};
use crate::tree::{add_counts, extract_counts, remove_counts, CountTables, ParseTree};

/// Posterior predictive row `(α + N) / Σ (α + N)` of one context.
pub fn predictive_prob(counts: &CountTables, prior: &PriorSpec, ctx: Context) -> Vec<f64> {
    let alpha = prior.row(ctx);
    let row = counts.row(ctx);
    let total: f64 = alpha.iter().sum::<f64>() + f64::from(row.total());
    let mut out: Vec<f64> = alpha.to_vec();
    for (cell, c) in row.iter() {
        out[cell as usize] += f64::from(c);
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Dirichlet posterior mean of every row.
pub fn posterior_mean_weights(counts: &CountTables, prior: &PriorSpec) -> WeightTables {
    let mut t = prior.tables().clone();
    for ctx in t.contexts() {
        let p = predictive_prob(counts, prior, ctx);
        t.row_mut(ctx).copy_from_slice(&p);
    }
    WeightTables::from_raw(t)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    #[default]
    Multinomial,
    Systematic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PGConfig {
    pub n_particles: usize,
    pub budget: Budget,
    /// Fresh attempts allowed when every bootstrap particle dies.
    pub max_restarts: u32,
    #[serde(default)]
    pub resampling: Resampling,
    #[serde(default)]
    pub predictive: PredictiveMode,
}

impl PGConfig {
    pub fn new(n_particles: usize) -> Self {
        PGConfig {
            n_particles,
            budget: Budget::default(),
            max_restarts: 10,
            resampling: Resampling::Multinomial,
            predictive: PredictiveMode::Polya,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::Config(format!(
                "the particle Gibbs kernel needs at least 2 particles, got {}",
                self.n_particles
            )));
        }
        if self.max_restarts == 0 {
            return Err(Error::Config("max_restarts must be at least 1".into()));
        }
        if self.budget.max_calls == 0 {
            return Err(Error::Config("the call budget must be positive".into()));
        }
        Ok(())
    }
}

/// Ancestor indices for `n` slots drawn uniformly from `survivors`.
fn resample<R: Rng + ?Sized>(scheme: Resampling, survivors: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    let s = survivors.len();
    match scheme {
        Resampling::Multinomial => (0..n).map(|_| survivors[rng.random_range(0..s)]).collect(),
        Resampling::Systematic => {
            let u: f64 = rng.random();
            (0..n)
                .map(|k| {
                    let pos = ((k as f64 + u) * s as f64 / n as f64) as usize;
                    survivors[pos.min(s - 1)]
                })
                .collect()
        }
    }
}

struct Filter<'a> {
    model: &'a ModelStructure,
    source: DistributionSource<'a>,
    x: &'a [char],
    cfg: &'a PGConfig,
    key: u64,
}

enum Stop {
    /// Every survivor has terminated having printed `x`.
    Finished,
    /// Every survivor has printed `x` and is about to continue.
    Prefix,
}

impl Filter<'_> {
    /// Runs checkpoint rounds until `stop`. Returns the surviving slots and
    /// `log Ẑ`, or `None` if every particle died.
    fn rounds(&self, particles: &mut Vec<Execution>, conditional: bool, stop: Stop) -> Option<(Vec<usize>, f64)> {
        let m = particles.len();
        let mut log_z = 0.0;
        let mut round = 0u64;
        if matches!(stop, Stop::Prefix) && self.x.is_empty() {
            return Some(((0..m).collect(), 0.0));
        }
        loop {
            round += 1;
            let mut survivors = Vec::with_capacity(m);
            let mut finished = 0;
            for (slot, p) in particles.iter_mut().enumerate() {
                let mut rng = stream(self.key, &[tag::ROUND, round, slot as u64]);
                let alive = match p.advance(self.model, Some(&self.source), &mut rng, true) {
                    Event::Printed(c) => {
                        let n = p.printed().len();
                        n <= self.x.len() && self.x[n - 1] == c
                    }
                    Event::Returned(_) => {
                        let ok = p.printed().len() == self.x.len();
                        finished += usize::from(ok);
                        ok
                    }
                    Event::BudgetExceeded | Event::NeedDraw(_) => false,
                };
                if alive {
                    survivors.push(slot);
                }
            }
            if survivors.is_empty() || (conditional && survivors[0] != 0) {
                return None;
            }
            log_z += (survivors.len() as f64 / m as f64).ln();
            let done = match stop {
                Stop::Finished => finished == survivors.len(),
                Stop::Prefix => survivors.iter().all(|&k| particles[k].printed().len() == self.x.len()),
            };
            if done {
                return Some((survivors, log_z));
            }
            let mut rng = stream(self.key, &[tag::RESAMPLE, round]);
            let first = usize::from(conditional);
            let ancestors = resample(self.cfg.resampling, &survivors, m - first, &mut rng);
            let mut next = Vec::with_capacity(m);
            if conditional {
                next.push(particles[0].clone());
            }
            for a in ancestors {
                let mut p = particles[a].clone();
                p.detach();
                next.push(p);
            }
            *particles = next;
        }
    }

    fn fresh(&self, reference: Option<Arc<[u32]>>) -> Vec<Execution> {
        let start = Execution::new(self.model.q0(), self.model.q1(), self.cfg.budget);
        let mut ps = vec![start; self.cfg.n_particles];
        if let Some(choices) = reference {
            ps[0] = ps[0].clone().replaying(choices);
        }
        ps
    }
}

/// A sampled parse and the filter's marginal likelihood estimate.
#[derive(Clone, Debug)]
pub struct FilterOutput {
    pub tree: ParseTree,
    pub log_z: f64,
    /// Bootstrap attempts discarded because every particle died.
    pub restarts: u32,
}

fn check_inputs(model: &ModelStructure, base: &CountTables, x: &[char], cfg: &PGConfig) -> Result<()> {
    cfg.validate()?;
    model.check_text(x)?;
    if base.n_symbols() != model.len() {
        return Err(Error::InvalidModel("count tables do not match the model".into()));
    }
    Ok(())
}

/// One run of the filter. `None` means every particle died (`Ẑ = 0`); with a
/// reference tree that cannot happen.
pub fn particle_filter_once(
    model: &ModelStructure,
    prior: &CollapsedPrior,
    base: &CountTables,
    x: &[char],
    cfg: &PGConfig,
    key: u64,
    reference: Option<&ParseTree>,
) -> Result<Option<(ParseTree, f64)>> {
    check_inputs(model, base, x, cfg)?;
    let filter = Filter {
        model,
        source: DistributionSource::Collapsed {
            prior,
            base,
            mode: cfg.predictive,
        },
        x,
        cfg,
        key,
    };
    let choices = match reference {
        Some(t) => {
            if crate::tree::yield_of(t).chars().ne(x.iter().copied()) {
                return Err(Error::InvalidModel("reference tree does not yield the datum".into()));
            }
            Some(Arc::from(t.choices(model.len())))
        }
        None => None,
    };
    let conditional = choices.is_some();
    let mut particles = filter.fresh(choices);
    let Some((survivors, log_z)) = filter.rounds(&mut particles, conditional, Stop::Finished) else {
        if conditional {
            return Err(Error::InvalidModel("reference trajectory was killed".into()));
        }
        return Ok(None);
    };
    let pick = survivors[stream(key, &[tag::PICK]).random_range(0..survivors.len())];
    Ok(Some((particles[pick].tree(model), log_z)))
}

/// Particle filter for `x`, conditioned on `reference` if given. Bootstrap
/// runs in which every particle dies are retried with fresh randomness up
/// to `max_restarts` times.
pub fn particle_filter(
    model: &ModelStructure,
    prior: &CollapsedPrior,
    base: &CountTables,
    x: &[char],
    cfg: &PGConfig,
    key: u64,
    reference: Option<&ParseTree>,
) -> Result<FilterOutput> {
    for attempt in 0..=cfg.max_restarts {
        let k = if attempt == 0 {
            key
        } else {
            derive(key, &[tag::RESTART, u64::from(attempt)])
        };
        if let Some((tree, log_z)) = particle_filter_once(model, prior, base, x, cfg, k, reference)? {
            return Ok(FilterOutput {
                tree,
                log_z,
                restarts: attempt,
            });
        }
    }
    Err(Error::Unparseable {
        text: x.iter().collect(),
        restarts: cfg.max_restarts as usize,
    })
}

/// What follows `prefix`: the filter conditions on the prefix, then each
/// surviving particle runs to its next print or termination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NextLetter {
    /// Estimated `P(next letter = alphabet[k] | prefix)`.
    pub letters: Vec<f64>,
    /// Estimated probability of terminating right after the prefix.
    pub end: f64,
    /// `log Ẑ` of the prefix.
    pub log_z: f64,
}

impl NextLetter {
    /// The uniquely most likely letter, if any.
    pub fn argmax(&self, alphabet: &[char]) -> Option<char> {
        unique_argmax(&self.letters).map(|k| alphabet[k])
    }
}

pub fn predict_next(
    model: &ModelStructure,
    prior: &CollapsedPrior,
    base: &CountTables,
    prefix: &[char],
    cfg: &PGConfig,
    key: u64,
) -> Result<Option<NextLetter>> {
    check_inputs(model, base, prefix, cfg)?;
    let filter = Filter {
        model,
        source: DistributionSource::Collapsed {
            prior,
            base,
            mode: cfg.predictive,
        },
        x: prefix,
        cfg,
        key,
    };
    let mut particles = filter.fresh(None);
    let Some((survivors, log_z)) = filter.rounds(&mut particles, false, Stop::Prefix) else {
        return Ok(None);
    };
    let alphabet = model.alphabet();
    let mut letters = vec![0.0; alphabet.len()];
    let mut end = 0.0;
    let w = 1.0 / survivors.len() as f64;
    for &k in &survivors {
        let mut rng = stream(key, &[tag::EVAL, k as u64]);
        match particles[k].advance(model, Some(&filter.source), &mut rng, true) {
            Event::Printed(c) => {
                if let Some(pos) = alphabet.iter().position(|&a| a == c) {
                    letters[pos] += w;
                }
            }
            Event::Returned(_) => end += w,
            _ => {}
        }
    }
    Ok(Some(NextLetter { letters, end, log_z }))
}

fn unique_argmax(v: &[f64]) -> Option<usize> {
    let (mut best, mut best_v, mut tie) = (None, f64::NEG_INFINITY, false);
    for (k, &x) in v.iter().enumerate() {
        if x > best_v {
            best = Some(k);
            best_v = x;
            tie = false;
        } else if x == best_v {
            tie = true;
        }
    }
    if tie {
        None
    } else {
        best
    }
}

/// Per `Fn` node: does every observation input's predictive row peak
/// (uniquely) on the observation labelled `relation(L(i))`?
pub fn relation_check(
    counts: &CountTables,
    prior: &PriorSpec,
    model: &ModelStructure,
    relation: &Relation,
) -> Vec<(SymbolId, bool)> {
    let obs: Vec<SymbolId> = model.of_type(SymbolType::Ob).collect();
    model
        .of_type(SymbolType::Fn)
        .map(|q| {
            let ok = !obs.is_empty()
                && obs.iter().all(|&i| {
                    let label = model.label(i).expect("observation label");
                    let target = relation
                        .apply(model.alphabet(), label)
                        .and_then(|c| model.observation_for(c));
                    let row = predictive_prob(counts, prior, Context::Fn(q, i));
                    target.is_some_and(|t| unique_argmax(&row) == Some(t.index()))
                });
            (q, ok)
        })
        .collect()
}

/// The first combinator whose predictive pair peaks (uniquely) on
/// `(f_node, f_node)`, if any.
pub fn composition_node(
    counts: &CountTables,
    prior: &PriorSpec,
    model: &ModelStructure,
    f_node: SymbolId,
) -> Option<SymbolId> {
    let n = model.len();
    let cell = f_node.index() * n + f_node.index();
    model
        .ids()
        .filter(|&q| model.ty(q).is_combinator())
        .find(|&q| unique_argmax(&predictive_prob(counts, prior, Context::Cm(q))) == Some(cell))
}

pub fn composition_check(counts: &CountTables, prior: &PriorSpec, model: &ModelStructure, f_node: SymbolId) -> bool {
    composition_node(counts, prior, model, f_node).is_some()
}

/// Exponential smoothing `s_1 = v_1`, `s_t = rate·s_{t−1} + (1−rate)·v_t`.
pub fn smooth(series: &[f64], rate: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(series.len());
    let mut s = 0.0;
    for (t, &v) in series.iter().enumerate() {
        s = if t == 0 { v } else { rate * s + (1.0 - rate) * v };
        out.push(s);
    }
    out
}

pub const SMOOTHING_RATE: f64 = 0.9;

/// Per-epoch NLL curve of a chain.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean over data of `−log Ẑ / |x|`.
    pub raw_nll: Vec<f64>,
    pub smoothed_nll: Vec<f64>,
    /// `log Ẑ` per datum slot, per epoch.
    pub log_z: Vec<Vec<f64>>,
}

impl Metrics {
    fn push(&mut self, raw: f64, log_z: Vec<f64>) {
        let s = match self.smoothed_nll.last() {
            None => raw,
            Some(&prev) => SMOOTHING_RATE * prev + (1.0 - SMOOTHING_RATE) * raw,
        };
        self.raw_nll.push(raw);
        self.smoothed_nll.push(s);
        self.log_z.push(log_z);
    }
}

/// One Gibbs chain: data, their current parses, and the counts they induce.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub model: ModelStructure,
    pub prior: CollapsedPrior,
    pub dataset: DatasetState,
    /// Current parse per slot; `None` until first visited.
    pub trees: Vec<Option<ParseTree>>,
    pub counts: CountTables,
    pub seed: u64,
    /// Number of completed epochs.
    pub epoch: usize,
    pub metrics: Metrics,
}

impl ChainState {
    pub fn new(model: ModelStructure, prior: PriorSpec, dataset: DatasetState, seed: u64) -> Self {
        let n = model.len();
        ChainState {
            trees: vec![None; dataset.slots.len()],
            counts: CountTables::new(n),
            model,
            prior: CollapsedPrior::new(prior),
            dataset,
            seed,
            epoch: 0,
            metrics: Metrics::default(),
        }
    }

    /// Recomputes the counts from the present trees.
    pub fn recount(&self) -> CountTables {
        let mut c = CountTables::new(self.model.len());
        for t in self.trees.iter().flatten() {
            add_counts(&mut c, &extract_counts(t, self.model.len()));
        }
        c
    }

    pub fn counts_consistent(&self) -> bool {
        self.recount() == self.counts
    }

    /// Drops the parse of slot `k`, removing its counts.
    pub fn invalidate(&mut self, k: usize) -> Result<()> {
        if let Some(t) = self.trees[k].take() {
            remove_counts(&mut self.counts, &extract_counts(&t, self.model.len()))?;
        }
        Ok(())
    }

    /// Applies the curriculum's dataset action for the next epoch.
    pub fn advance_dataset(&mut self, schedule: &CurriculumSchedule) -> Result<Vec<usize>> {
        let e = self.epoch + 1;
        let mut rng = stream(self.seed, &[tag::DATASET, e as u64]);
        let changed = advance_epoch(schedule, &mut self.dataset, e, self.model.alphabet(), &mut rng)?;
        for &k in &changed {
            self.invalidate(k)?;
        }
        Ok(changed)
    }

    pub fn weights(&self) -> WeightTables {
        posterior_mean_weights(&self.counts, self.prior.prior())
    }
}

/// Resamples every datum's parse once, in slot order, and records the epoch's
/// NLL. Returns the epoch's raw NLL (`NaN` for an empty dataset, which is
/// not recorded).
pub fn gibbs_sweep(chain: &mut ChainState, cfg: &PGConfig) -> Result<f64> {
    let e = chain.epoch + 1;
    let n = chain.model.len();
    let mut log_zs = Vec::with_capacity(chain.dataset.slots.len());
    let mut nll_sum = 0.0;
    for k in 0..chain.dataset.slots.len() {
        let x: Vec<char> = chain.dataset.slots[k].text.chars().collect();
        let old = chain.trees[k].take();
        if let Some(t) = &old {
            remove_counts(&mut chain.counts, &extract_counts(t, n))?;
        }
        let key = derive(chain.seed, &[tag::EPOCH, e as u64, tag::DATUM, k as u64]);
        let out = particle_filter(&chain.model, &chain.prior, &chain.counts, &x, cfg, key, old.as_ref());
        let out = match out {
            Ok(o) => o,
            Err(err) => {
                // leave the chain as it was
                if let Some(t) = &old {
                    add_counts(&mut chain.counts, &extract_counts(t, n));
                }
                chain.trees[k] = old;
                return Err(err);
            }
        };
        add_counts(&mut chain.counts, &extract_counts(&out.tree, n));
        chain.trees[k] = Some(out.tree);
        nll_sum += -out.log_z / x.len().max(1) as f64;
        log_zs.push(out.log_z);
    }
    debug_assert!(chain.counts_consistent());
    chain.epoch = e;
    if log_zs.is_empty() {
        return Ok(f64::NAN);
    }
    let raw = nll_sum / log_zs.len() as f64;
    chain.metrics.push(raw, log_zs);
    Ok(raw)
}

/// Trains for `epochs` further epochs following `schedule`.
pub fn train(chain: &mut ChainState, schedule: &CurriculumSchedule, epochs: usize, cfg: &PGConfig) -> Result<()> {
    cfg.validate()?;
    for _ in 0..epochs {
        chain.advance_dataset(schedule)?;
        gibbs_sweep(chain, cfg)?;
    }
    Ok(())
}

/// A fresh chain on the schedule's initial dataset, trained for `epochs`.
pub fn run_chain(
    model: ModelStructure,
    prior: PriorSpec,
    schedule: &CurriculumSchedule,
    epochs: usize,
    cfg: &PGConfig,
    seed: u64,
) -> Result<ChainState> {
    let mut rng = stream(seed, &[tag::DATASET, 0]);
    let dataset = DatasetState::initial(schedule, model.alphabet(), &mut rng)?;
    let mut chain = ChainState::new(model, prior, dataset, seed);
    train(&mut chain, schedule, epochs, cfg)?;
    Ok(chain)
}

/// JSON form of a chain. Randomness is derived from `seed` and the epoch
/// counter, so this is all that is needed to resume.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainSnapshot {
    pub model: ModelDoc,
    pub dataset: DatasetState,
    pub trees: Vec<Option<ParseTree>>,
    pub counts: CountTables,
    pub seed: u64,
    pub epoch: usize,
    pub metrics: Metrics,
}

impl ChainSnapshot {
    pub fn of(chain: &ChainState) -> Self {
        ChainSnapshot {
            model: ModelDoc::from_model(&chain.model).with_prior(chain.prior.prior()),
            dataset: chain.dataset.clone(),
            trees: chain.trees.clone(),
            counts: chain.counts.clone(),
            seed: chain.seed,
            epoch: chain.epoch,
            metrics: chain.metrics.clone(),
        }
    }

    pub fn restore(self) -> Result<ChainState> {
        let model = self.model.model()?;
        let prior = self
            .model
            .prior(&model)?
            .ok_or_else(|| Error::Config("snapshot has no prior".into()))?;
        if self.trees.len() != self.dataset.slots.len() {
            return Err(Error::Config("snapshot trees do not match its dataset".into()));
        }
        for (t, slot) in self.trees.iter().zip(&self.dataset.slots) {
            if let Some(t) = t {
                t.check(&model)?;
                if crate::tree::yield_of(t) != slot.text {
                    return Err(Error::Config(format!("snapshot tree does not yield {:?}", slot.text)));
                }
            }
        }
        let chain = ChainState {
            prior: CollapsedPrior::new(prior),
            model,
            dataset: self.dataset,
            trees: self.trees,
            counts: self.counts,
            seed: self.seed,
            epoch: self.epoch,
            metrics: self.metrics,
        };
        if !chain.counts_consistent() {
            return Err(Error::Config("snapshot counts do not match its trees".into()));
        }
        Ok(chain)
    }
}
