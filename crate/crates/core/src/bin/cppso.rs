use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context as _, Result};
use clap::{Parser, Subcommand};

use cppso::datasets::{gen_dataset, schedule_for, Pattern, PatternTag};
use cppso::harness::{heldout_eval, inspect, load_snapshot, run_experiment, ExperimentConfig};
use cppso::inference::PGConfig;
use cppso::model::{ModelDoc, ModelStructure, Relation};
use cppso::rng::{stream, tag};
use cppso::sampler::{
    generate, sample, Budget, CollapsedPrior, DistributionSource, Materialized, PredictiveMode, Status,
};
use cppso::semantics::{evaluate_semantics, observation_oracle, DEFAULT_MAX_ITER, DEFAULT_TOL};
use cppso::tree::{render, CountTables};

#[derive(Parser)]
#[command(
    name = "cppso",
    version,
    about = "Connectionist probabilistic programs with sequential observations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a pattern dataset (one string per line) or a schedule as JSON.
    Generate {
        /// ABA, ABf, ABAf, ABg or ABAf_gf.
        #[arg(long, conflicts_with = "schedule")]
        pattern: Option<String>,
        /// Print the curriculum of an experiment (A1..A7) instead.
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Letters A may take, e.g. 0123456.
        #[arg(long)]
        restrict: Option<String>,
    },
    /// Train chains on a preset or a config file and write artifacts.
    Train {
        #[arg(long, required_unless_present = "config", conflicts_with = "config")]
        experiment: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        chains: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        particles: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-string NLL of test strings under a trained snapshot.
    Eval {
        #[arg(long)]
        snapshot: PathBuf,
        /// One string per line.
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 400)]
        particles: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Posterior-mean weights, verdicts and parses of a snapshot.
    Inspect {
        #[arg(long)]
        snapshot: PathBuf,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the parse trees as text instead of JSON.
        #[arg(long)]
        trees: bool,
    },
    /// Exhaustively bracket p(x) for a model file.
    Oracle {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        string: String,
        /// Maximum calls per branch.
        #[arg(long)]
        depth: u32,
    },
    /// Draw strings from a model file, or outputs of one symbol.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        budget: u32,
        /// Sample(q, i) for this symbol (name or index) instead of strings.
        #[arg(long, requires = "input")]
        symbol: Option<String>,
        #[arg(long)]
        input: Option<String>,
        /// Print each parse tree.
        #[arg(long)]
        trees: bool,
    },
    /// Fixed-point semantics of a model file with weights, as JSON.
    Semantics {
        #[arg(long)]
        model: PathBuf,
    },
}

fn read_model(path: &PathBuf) -> Result<(ModelStructure, ModelDoc)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: ModelDoc = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok((doc.model()?, doc))
}

fn symbol(model: &ModelStructure, s: &str) -> Result<cppso::model::SymbolId> {
    if let Some(q) = model.by_name(s) {
        return Ok(q);
    }
    match s.parse::<usize>() {
        Ok(k) if k < model.len() => Ok(k.into()),
        _ => bail!("no symbol {s:?}"),
    }
}

/// Materialised weights if the file has them, else the prior's predictive
/// with no data.
enum Source {
    Weights(Materialized),
    Prior(CollapsedPrior, CountTables),
}

impl Source {
    fn load(model: &ModelStructure, doc: &ModelDoc) -> Result<Self> {
        if let Some(w) = doc.weights(model)? {
            return Ok(Source::Weights(Materialized::new(model, w)?));
        }
        match doc.prior(model)? {
            Some(p) => Ok(Source::Prior(CollapsedPrior::new(p), CountTables::new(model.len()))),
            None => bail!("the model file has neither weights nor a prior"),
        }
    }

    fn get(&self) -> DistributionSource<'_> {
        match self {
            Source::Weights(m) => DistributionSource::Materialized(m),
            Source::Prior(p, c) => DistributionSource::Collapsed {
                prior: p,
                base: c,
                mode: PredictiveMode::Polya,
            },
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Generate {
            pattern,
            schedule,
            n,
            seed,
            restrict,
        } => {
            if let Some(id) = schedule {
                writeln!(out, "{}", serde_json::to_string_pretty(&schedule_for(&id)?)?)?;
                return Ok(());
            }
            let Some(p) = pattern else {
                bail!("pass --pattern or --schedule")
            };
            let mut pattern = Pattern::new(p.parse::<PatternTag>()?);
            if let Some(r) = restrict {
                pattern = pattern.restricted(r.chars().collect());
            }
            let digits: Vec<char> = ('0'..='9').collect();
            let mut rng = stream(seed, &[tag::GENERATE]);
            for s in gen_dataset(&pattern, n, &digits, &mut rng)? {
                writeln!(out, "{s}")?;
            }
        }
        Command::Train {
            experiment,
            config,
            chains,
            seed,
            epochs,
            particles,
            out: dir,
        } => {
            let mut cfg = match (experiment, config) {
                (Some(id), _) => ExperimentConfig::preset(&id)?,
                (None, Some(path)) => ExperimentConfig::from_json(&fs::read_to_string(&path)?)?,
                (None, None) => unreachable!("clap requires one"),
            };
            if let Some(c) = chains {
                cfg.n_chains = c;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(m) = particles {
                cfg.pg.n_particles = m;
            }
            let report = run_experiment(&cfg, Some(&dir))?;
            writeln!(
                out,
                "chain,final_raw_nll,final_smoothed_nll,f,g,composition,modeling,seconds,error"
            )?;
            for (c, secs) in report.chains.iter().zip(&report.wall_clock) {
                let v = c.final_verdicts();
                let flag = |b: Option<bool>| b.map_or("-", |b| if b { "yes" } else { "no" });
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{:.1},{}",
                    c.chain,
                    c.raw_nll.last().map_or(String::new(), |v| format!("{v:.4}")),
                    c.final_smoothed().map_or(String::new(), |v| format!("{v:.4}")),
                    flag(v.map(|v| v.passes_f())),
                    flag(v.map(|v| v.passes_g())),
                    flag(v.map(|v| v.composes())),
                    c.modeling
                        .as_ref()
                        .map_or("-".to_string(), |m| format!("{}/{}", m.correct, m.total)),
                    secs,
                    c.error.as_deref().unwrap_or("")
                )?;
            }
        }
        Command::Eval {
            snapshot,
            test,
            particles,
            seed,
        } => {
            let chain = load_snapshot(&snapshot)?;
            let tests: Vec<String> = fs::read_to_string(&test)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            let pg = PGConfig::new(particles);
            writeln!(out, "string,nll,restarts")?;
            for r in heldout_eval(&chain, &tests, &pg, seed)? {
                writeln!(out, "{},{},{}", r.text, r.nll, r.restarts)?;
            }
        }
        Command::Inspect {
            snapshot,
            out: path,
            trees,
        } => {
            let chain = load_snapshot(&snapshot)?;
            let report = inspect(&chain, &Relation::Shift { by: 1 }, &Relation::Shift { by: 2 });
            if trees {
                for (text, t) in &report.trees {
                    writeln!(out, "-- {text}\n{t}")?;
                }
                return Ok(());
            }
            let json = serde_json::to_string_pretty(&report)?;
            match path {
                Some(p) => fs::write(p, json + "\n")?,
                None => writeln!(out, "{json}")?,
            }
        }
        Command::Oracle { model, string, depth } => {
            let (m, doc) = read_model(&model)?;
            let src = Source::load(&m, &doc)?;
            let x: Vec<char> = string.chars().collect();
            let r = observation_oracle(&m, &src.get(), &x, depth)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&r)?)?;
        }
        Command::Sample {
            model,
            n,
            seed,
            budget,
            symbol: sym,
            input,
            trees,
        } => {
            let (m, doc) = read_model(&model)?;
            let src = Source::load(&m, &doc)?;
            let budget = Budget::calls(budget);
            for k in 0..n {
                let mut rng = stream(seed, &[tag::GENERATE, k as u64]);
                let outcome = match (&sym, &input) {
                    (Some(q), Some(i)) => sample(&src.get(), &m, symbol(&m, q)?, symbol(&m, i)?, budget, &mut rng)?,
                    _ => generate(&src.get(), &m, budget, &mut rng)?,
                };
                let status = match outcome.status {
                    Status::Returned(j) => m.name(j).to_string(),
                    Status::BudgetExceeded => "⊥budget".to_string(),
                };
                if sym.is_some() {
                    writeln!(out, "{status}")?;
                } else {
                    writeln!(out, "{}\t{status}", outcome.printed)?;
                }
                if trees {
                    write!(out, "{}", render(&outcome.trace, &m))?;
                }
            }
        }
        Command::Semantics { model } => {
            let (m, doc) = read_model(&model)?;
            let Some(w) = doc.weights(&m)? else {
                bail!("the model file has no weights")
            };
            let table = evaluate_semantics(&m, &w, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&table)?)?;
        }
    }
    Ok(())
}
