//! Experiment presets, multi-chain runs and their artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{schedule_for, CurriculumSchedule, Pattern};
use crate::error::{Error, Result};
use crate::inference::{
    composition_node, particle_filter, posterior_mean_weights, predict_next, relation_check, run_chain, train,
    ChainSnapshot, ChainState, PGConfig,
};
use crate::model::fixtures::{experiment_model, ExperimentRoles};
use crate::model::{
    apply_special_init, standard_prior, ModelDoc, ModelStructure, PriorSpec, Relation, SpecialInit, SymbolId,
    SymbolType, TablesDoc,
};
use crate::rng::{derive, tag};
use crate::tree::render;

/// Environment variable overriding the number of chains run at once.
pub const WORKERS_ENV: &str = "CPPSO_WORKERS";

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    /// Model structure; weights and prior inside are ignored.
    pub model: ModelDoc,
    pub base_alpha: f64,
    #[serde(default)]
    pub special_init: Vec<SpecialInit>,
    pub schedule: CurriculumSchedule,
    pub epochs: usize,
    pub n_chains: usize,
    pub seed: u64,
    pub pg: PGConfig,
    /// Relations probed by the final verdicts.
    pub f: Relation,
    pub g: Relation,
    /// Epochs at which sampled parses are rendered; empty means the first
    /// epoch, every phase boundary and the last epoch.
    #[serde(default)]
    pub render_epochs: Vec<usize>,
    /// Data slots whose parses are rendered.
    #[serde(default = "default_render_slots")]
    pub render_slots: usize,
    /// Run the next-letter check over every `(A, B)` at the end.
    #[serde(default = "default_true")]
    pub modeling_check: bool,
    /// Particles per prefix in that check.
    #[serde(default = "default_eval_particles")]
    pub eval_particles: usize,
}

fn default_eval_particles() -> usize {
    2000
}

/// Restarts allowed for the presets' bootstrap filters. Early in training
/// the predictive is nearly uninformed and every particle of a filter can
/// die on a three-letter string several times in a row.
pub const PRESET_MAX_RESTARTS: u32 = 1000;

fn default_render_slots() -> usize {
    3
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// The presets `A1`..`A7` on the 21-symbol model.
    pub fn preset(id: &str) -> Result<Self> {
        let id = id.to_ascii_uppercase();
        let schedule = schedule_for(&id)?;
        let model = experiment_model();
        let r = ExperimentRoles::of(&model).expect("experiment roles");
        let mut special_init = vec![SpecialInit::CmCell {
            symbol: r.q4,
            f: r.c1,
            g: r.id,
            value: 100.0,
        }];
        let f = Relation::Shift { by: 1 };
        if id == "A6" || id == "A7" {
            special_init.push(SpecialInit::FnRelation {
                symbol: r.f1,
                relation: f.clone(),
                hit: 100.0,
                miss: 0.1,
            });
        }
        if id == "A7" {
            special_init.push(SpecialInit::CmCell {
                symbol: r.q2,
                f: r.f1,
                g: r.f1,
                value: 100.0,
            });
        }
        let n_particles = if id == "A1" { 100 } else { 400 };
        let mut pg = PGConfig::new(n_particles);
        pg.max_restarts = PRESET_MAX_RESTARTS;
        Ok(ExperimentConfig {
            name: id,
            model: ModelDoc::from_model(&model),
            base_alpha: 0.1,
            special_init,
            epochs: schedule.total_epochs(),
            schedule,
            n_chains: 10,
            seed: 0,
            pg,
            f,
            g: Relation::Shift { by: 2 },
            render_epochs: Vec::new(),
            render_slots: 3,
            modeling_check: true,
            eval_particles: default_eval_particles(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.pg.validate()?;
        self.schedule.validate()?;
        if self.epochs > self.schedule.total_epochs() {
            return Err(Error::Config(format!(
                "{} epochs requested but the schedule covers {}",
                self.epochs,
                self.schedule.total_epochs()
            )));
        }
        self.build().map(|_| ())
    }

    pub fn build(&self) -> Result<(ModelStructure, PriorSpec)> {
        let model = self.model.model()?;
        let mut prior = standard_prior(&model, self.base_alpha)?;
        for d in &self.special_init {
            prior = apply_special_init(&prior, &model, d)?;
        }
        Ok((model, prior))
    }

    pub fn chain_seed(&self, chain: usize) -> u64 {
        derive(self.seed, &[tag::CHAIN, chain as u64])
    }

    fn render_at(&self) -> Vec<usize> {
        let mut e = if self.render_epochs.is_empty() {
            let mut v = vec![1];
            v.extend(self.schedule.phase_ends());
            v.push(self.epochs);
            v
        } else {
            self.render_epochs.clone()
        };
        e.retain(|&x| x >= 1 && x <= self.epochs);
        e.sort_unstable();
        e.dedup();
        e
    }

    /// The pattern of the data the chain ends on.
    pub fn final_pattern(&self) -> Option<&Pattern> {
        let phase = self.schedule.phase_at(self.epochs)?;
        let level = match self.schedule.phases[phase].action {
            crate::datasets::PhaseAction::Fixed { level } => level,
            crate::datasets::PhaseAction::MixIn { to, .. } => to,
        };
        self.schedule.levels.get(level - 1)
    }
}

/// Relation and composition verdicts on a chain's current counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdicts {
    pub epoch: usize,
    /// `Fn` nodes passing the check for `f`.
    pub relation_f: Vec<SymbolId>,
    pub relation_g: Vec<SymbolId>,
    /// The `Fn` node whose self-composition is probed.
    pub f_node: Option<SymbolId>,
    /// A combinator whose predictive peaks on `(f_node, f_node)`.
    pub composition: Option<SymbolId>,
}

impl Verdicts {
    pub fn passes_f(&self) -> bool {
        !self.relation_f.is_empty()
    }

    pub fn passes_g(&self) -> bool {
        !self.relation_g.is_empty()
    }

    pub fn composes(&self) -> bool {
        self.composition.is_some()
    }
}

/// The `Fn` node probed for composition: the first one capturing `f`, or
/// else the first `Fn` node of the model.
pub fn verdicts(chain: &ChainState, f: &Relation, g: &Relation) -> Verdicts {
    let prior = chain.prior.prior();
    let passing = |r: &Relation| -> Vec<SymbolId> {
        relation_check(&chain.counts, prior, &chain.model, r)
            .into_iter()
            .filter_map(|(q, ok)| ok.then_some(q))
            .collect()
    };
    let relation_f = passing(f);
    let relation_g = passing(g);
    let f_node = relation_f
        .first()
        .copied()
        .or_else(|| chain.model.nth_of_type(SymbolType::Fn, 0));
    let composition = f_node.and_then(|q| composition_node(&chain.counts, prior, &chain.model, q));
    Verdicts {
        epoch: chain.epoch,
        relation_f,
        relation_g,
        f_node,
        composition,
    }
}

/// Next-letter check over every `(A, B)`: does the predictive for the last
/// letter, given the rest of the pattern, peak on the right letter?
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelingCheck {
    pub pattern: String,
    pub correct: usize,
    pub total: usize,
    /// Prefixes whose predicted letter was wrong (or tied, or unparseable).
    pub misses: Vec<String>,
}

impl ModelingCheck {
    pub fn passed(&self) -> bool {
        self.total > 0 && self.correct == self.total
    }
}

pub fn modeling_check(chain: &ChainState, pattern: &Pattern, pg: &PGConfig, seed: u64) -> Result<ModelingCheck> {
    let alphabet = chain.model.alphabet();
    let mut check = ModelingCheck {
        pattern: pattern.tag.name().to_string(),
        correct: 0,
        total: 0,
        misses: Vec::new(),
    };
    let pool = pattern.restrict_a.as_deref().unwrap_or(alphabet);
    for (ka, &a) in pool.iter().enumerate() {
        for (kb, &b) in alphabet.iter().enumerate() {
            let full = pattern.render(alphabet, a, b)?;
            let (last, prefix) = full.split_last().expect("patterns are nonempty");
            let key = derive(seed, &[tag::EVAL, ka as u64, kb as u64]);
            let next = predict_next(&chain.model, &chain.prior, &chain.counts, prefix, pg, key)?;
            check.total += 1;
            if next.and_then(|n| n.argmax(alphabet)) == Some(*last) {
                check.correct += 1;
            } else {
                check.misses.push(prefix.iter().collect());
            }
        }
    }
    Ok(check)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub chain: usize,
    pub seed: u64,
    pub raw_nll: Vec<f64>,
    pub smoothed_nll: Vec<f64>,
    /// Verdicts at each phase boundary and at the end.
    pub verdicts: Vec<Verdicts>,
    pub modeling: Option<ModelingCheck>,
    pub error: Option<String>,
    /// Artifact file names, relative to the output directory.
    pub snapshot_file: Option<String>,
    pub weights_file: Option<String>,
    pub trees_file: Option<String>,
}

impl ChainReport {
    pub fn final_verdicts(&self) -> Option<&Verdicts> {
        self.verdicts.last()
    }

    pub fn final_smoothed(&self) -> Option<f64> {
        self.smoothed_nll.last().copied()
    }

    pub fn models_data(&self) -> bool {
        self.modeling.as_ref().is_some_and(ModelingCheck::passed)
    }

    pub fn verdicts_at(&self, epoch: usize) -> Option<&Verdicts> {
        self.verdicts.iter().find(|v| v.epoch == epoch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub experiment: String,
    pub epochs: usize,
    pub chains: Vec<ChainReport>,
    /// Seconds per chain; not written to the JSON report so that reruns
    /// produce identical files.
    #[serde(skip)]
    pub wall_clock: Vec<f64>,
}

/// What a single chain produces besides its report.
struct ChainRun {
    report: ChainReport,
    snapshot: Option<ChainSnapshot>,
    weights: Option<TablesDoc>,
    trees: String,
    seconds: f64,
}

fn run_one(config: &ExperimentConfig, k: usize) -> ChainRun {
    let seed = config.chain_seed(k);
    let start = Instant::now();
    let mut report = ChainReport {
        chain: k,
        seed,
        raw_nll: Vec::new(),
        smoothed_nll: Vec::new(),
        verdicts: Vec::new(),
        modeling: None,
        error: None,
        snapshot_file: None,
        weights_file: None,
        trees_file: None,
    };
    let mut trees = String::new();
    let mut state = None;
    let outcome = (|| -> Result<()> {
        let (model, prior) = config.build()?;
        let mut chain = run_chain(model, prior, &config.schedule, 0, &config.pg, seed)?;
        let render_at = config.render_at();
        let mut verdict_at = config.schedule.phase_ends();
        verdict_at.push(config.epochs);
        for e in 1..=config.epochs {
            let result = train(&mut chain, &config.schedule, 1, &config.pg);
            if let Err(err) = result {
                state = Some(chain);
                return Err(err);
            }
            if render_at.contains(&e) {
                let _ = writeln!(trees, "== epoch {e}");
                for (slot, t) in chain.trees.iter().enumerate().take(config.render_slots) {
                    if let Some(t) = t {
                        let _ = writeln!(trees, "-- slot {slot}: {}", chain.dataset.slots[slot].text);
                        trees.push_str(&render(t, &chain.model));
                    }
                }
            }
            if verdict_at.contains(&e) && report.verdicts.last().is_none_or(|v| v.epoch != e) {
                report.verdicts.push(verdicts(&chain, &config.f, &config.g));
            }
        }
        if config.modeling_check && config.epochs > 0 {
            if let Some(pattern) = config.final_pattern() {
                let pg = PGConfig {
                    n_particles: config.eval_particles,
                    ..config.pg
                };
                report.modeling = Some(modeling_check(&chain, pattern, &pg, seed)?);
            }
        }
        state = Some(chain);
        Ok(())
    })();
    if let Err(e) = outcome {
        report.error = Some(e.to_string());
    }
    let (snapshot, weights) = match &state {
        Some(chain) => {
            report.raw_nll = chain.metrics.raw_nll.clone();
            report.smoothed_nll = chain.metrics.smoothed_nll.clone();
            (
                Some(ChainSnapshot::of(chain)),
                Some(TablesDoc::from_tables(
                    posterior_mean_weights(&chain.counts, chain.prior.prior()).tables(),
                )),
            )
        }
        None => (None, None),
    };
    ChainRun {
        report,
        snapshot,
        weights,
        trees,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn worker_count() -> Option<usize> {
    std::env::var(WORKERS_ENV).ok()?.parse().ok().filter(|&n| n > 0)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// The NLL curves as CSV: `chain,epoch,raw_nll,smoothed_nll`.
pub fn curves_csv(report: &RunReport) -> String {
    let mut out = String::from("chain,epoch,raw_nll,smoothed_nll\n");
    for c in &report.chains {
        for (e, (r, s)) in c.raw_nll.iter().zip(&c.smoothed_nll).enumerate() {
            let _ = writeln!(out, "{},{},{},{}", c.chain, e + 1, r, s);
        }
    }
    out
}

/// Runs every chain of `config` (concurrently, one chain per worker) and,
/// if `out` is given, writes `config.json`, `curves.csv`, `report.json`,
/// `timing.txt` and per-chain snapshot, weight and tree files there.
/// A failing chain is recorded in its report without stopping the others.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<RunReport> {
    config.validate()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let run = || -> Vec<ChainRun> {
        (0..config.n_chains)
            .into_par_iter()
            .map(|k| run_one(config, k))
            .collect()
    };
    let runs = match worker_count() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(run),
        None => run(),
    };
    let mut report = RunReport {
        experiment: config.name.clone(),
        epochs: config.epochs,
        chains: Vec::with_capacity(runs.len()),
        wall_clock: Vec::with_capacity(runs.len()),
    };
    for mut r in runs {
        if let Some(dir) = out {
            let k = r.report.chain;
            if let Some(s) = &r.snapshot {
                let name = format!("chain_{k}.snapshot.json");
                write_json(&dir.join(&name), s)?;
                r.report.snapshot_file = Some(name);
            }
            if let Some(w) = &r.weights {
                let name = format!("chain_{k}.weights.json");
                write_json(&dir.join(&name), w)?;
                r.report.weights_file = Some(name);
            }
            let name = format!("chain_{k}.trees.txt");
            fs::write(dir.join(&name), &r.trees)?;
            r.report.trees_file = Some(name);
        }
        report.wall_clock.push(r.seconds);
        report.chains.push(r.report);
    }
    if let Some(dir) = out {
        write_json(&dir.join("config.json"), config)?;
        fs::write(dir.join("curves.csv"), curves_csv(&report))?;
        write_json(&dir.join("report.json"), &report)?;
        let mut t = String::from("chain,seconds\n");
        for (k, s) in report.wall_clock.iter().enumerate() {
            let _ = writeln!(t, "{k},{s:.3}");
        }
        fs::write(dir.join("timing.txt"), t)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldoutResult {
    pub text: String,
    /// `−log Ẑ / |x|`; infinite when no particle ever produced the string.
    pub nll: f64,
    pub restarts: usize,
}

/// Scores `tests` under a chain's counts without changing them.
pub fn heldout_eval(chain: &ChainState, tests: &[String], pg: &PGConfig, seed: u64) -> Result<Vec<HeldoutResult>> {
    tests
        .iter()
        .enumerate()
        .map(|(k, text)| {
            let x: Vec<char> = text.chars().collect();
            let key = derive(seed, &[tag::EVAL, k as u64]);
            match particle_filter(&chain.model, &chain.prior, &chain.counts, &x, pg, key, None) {
                Ok(out) => Ok(HeldoutResult {
                    text: text.clone(),
                    nll: -out.log_z / x.len().max(1) as f64,
                    restarts: out.restarts as usize,
                }),
                Err(Error::Unparseable { restarts, .. }) => Ok(HeldoutResult {
                    text: text.clone(),
                    nll: f64::INFINITY,
                    restarts,
                }),
                Err(e) => Err(e),
            }
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Inspection {
    pub epoch: usize,
    pub weights: TablesDoc,
    pub verdicts: Verdicts,
    pub trees: Vec<(String, String)>,
}

/// Posterior-mean weights, verdicts and every datum's current parse.
pub fn inspect(chain: &ChainState, f: &Relation, g: &Relation) -> Inspection {
    Inspection {
        epoch: chain.epoch,
        weights: TablesDoc::from_tables(chain.weights().tables()),
        verdicts: verdicts(chain, f, g),
        trees: chain
            .dataset
            .slots
            .iter()
            .zip(&chain.trees)
            .filter_map(|(s, t)| t.as_ref().map(|t| (s.text.clone(), render(t, &chain.model))))
            .collect(),
    }
}

/// Loads a chain snapshot file.
pub fn load_snapshot(path: &Path) -> Result<ChainState> {
    let text = fs::read_to_string(path)?;
    let snap: ChainSnapshot = serde_json::from_str(&text)?;
    snap.restore()
}
