mod common;

use std::collections::HashMap;

use cppso::datasets::DatasetState;
use cppso::inference::{
    gibbs_sweep, particle_filter, particle_filter_once, posterior_mean_weights, predictive_prob, smooth, ChainSnapshot,
    ChainState, PGConfig, Resampling,
};
use cppso::model::{standard_prior, validate_weights, Context, ModelStructure, PriorSpec, SymbolId};
use cppso::rng::stream;
use cppso::sampler::{generate, Budget, CollapsedPrior, DistributionSource, PredictiveMode, Status};
use cppso::semantics::{enumerate_parses, observation_oracle_pruned};
use cppso::tree::{extract_counts, CountTables};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Gamma};

fn unbiasedness(resampling: Resampling) {
    let (m, prior) = common::pf_instance();
    let x: Vec<char> = "121".chars().collect();
    let cp = CollapsedPrior::new(prior);
    let base = CountTables::new(m.len());
    let src = DistributionSource::Collapsed {
        prior: &cp,
        base: &base,
        mode: PredictiveMode::Polya,
    };
    let exact = observation_oracle_pruned(&m, &src, &x, 14, 1e-10).unwrap();
    let mut cfg = PGConfig::new(50);
    cfg.resampling = resampling;
    let zs: Vec<f64> = (0..600u64)
        .map(|k| {
            particle_filter_once(&m, &cp, &base, &x, &cfg, k, None)
                .unwrap()
                .map_or(0.0, |(_, lz)| lz.exp())
        })
        .collect();
    let (mean, se) = common::mean_and_se(&zs);
    let lo = exact.matched_mass - 3.0 * se;
    let hi = exact.matched_mass + exact.truncated_mass + 3.0 * se;
    assert!(lo <= mean && mean <= hi, "mean {mean} se {se} oracle {exact:?}");
}

#[test]
fn filter_estimate_is_unbiased_multinomial() {
    unbiasedness(Resampling::Multinomial);
}

#[test]
fn filter_estimate_is_unbiased_systematic() {
    unbiasedness(Resampling::Systematic);
}

#[test]
fn conditional_filter_targets_the_enumerated_posterior() {
    let (m, prior) = common::cpf_instance();
    let n = m.len();
    let cp = CollapsedPrior::new(prior.clone());
    let base = CountTables::new(n);
    let src = DistributionSource::Collapsed {
        prior: &cp,
        base: &base,
        mode: PredictiveMode::Polya,
    };
    let (trees, r) = enumerate_parses(&m, &src, &['1'], 20, 1e-12).unwrap();
    assert!(r.truncated_mass < 1e-5);
    let mut target: HashMap<Vec<u32>, f64> = HashMap::new();
    for (t, p) in &trees {
        *target.entry(t.choices(n)).or_default() += p / r.matched_mass;
    }
    let mut chain = ChainState::new(m, prior, DatasetState::from_strings(vec!["1".into()], 1), 3);
    let cfg = PGConfig::new(2);
    let iters = 3000;
    let mut empirical: HashMap<Vec<u32>, f64> = HashMap::new();
    for _ in 0..iters {
        gibbs_sweep(&mut chain, &cfg).unwrap();
        let t = chain.trees[0].as_ref().unwrap();
        *empirical.entry(t.choices(n)).or_default() += 1.0 / iters as f64;
    }
    let tv = common::total_variation(&target, &empirical);
    assert!(tv < 0.06, "TV {tv}");
}

#[test]
fn reference_always_survives() {
    let (m, prior) = common::pf_instance();
    let cp = CollapsedPrior::new(prior);
    let base = CountTables::new(m.len());
    let x: Vec<char> = "121".chars().collect();
    let cfg = PGConfig::new(2);
    let first = particle_filter(&m, &cp, &base, &x, &PGConfig::new(50), 0, None).unwrap();
    let mut reference = first.tree;
    for k in 0..200 {
        let (t, lz) = particle_filter_once(&m, &cp, &base, &x, &cfg, k, Some(&reference))
            .unwrap()
            .expect("the reference particle keeps the filter alive");
        assert!(lz.is_finite());
        assert_eq!(cppso::tree::yield_of(&t), "121");
        reference = t;
    }
}

#[test]
fn predictive_matches_dirichlet_mean_by_simulation() {
    let (m, prior) = common::cpf_instance();
    let mut counts = CountTables::new(m.len());
    let ctx = Context::Cn(SymbolId(3));
    counts.increment(ctx, 0, 4);
    counts.increment(ctx, 2, 1);
    let p = predictive_prob(&counts, &prior, ctx);
    let alpha = prior.row(ctx);
    let mut rng = stream(5, &[]);
    let draws = 40_000;
    let mut mean = vec![0.0; alpha.len()];
    for _ in 0..draws {
        let g: Vec<f64> = alpha
            .iter()
            .enumerate()
            .map(|(c, &a)| {
                Gamma::new(a + f64::from(counts.get(ctx, c)), 1.0)
                    .unwrap()
                    .sample(&mut rng)
            })
            .collect();
        let s: f64 = g.iter().sum();
        for (m, v) in mean.iter_mut().zip(&g) {
            *m += v / s / draws as f64;
        }
    }
    for (a, b) in p.iter().zip(&mean) {
        assert!((a - b).abs() < 0.01, "{p:?} vs {mean:?}");
    }
}

#[test]
fn snapshots_resume_identically() {
    let (m, prior) = common::cpf_instance();
    let data = DatasetState::from_strings(vec!["1".into(), "1".into()], 1);
    let mut a = ChainState::new(m, prior, data, 9);
    let cfg = PGConfig::new(4);
    for _ in 0..5 {
        gibbs_sweep(&mut a, &cfg).unwrap();
    }
    let json = serde_json::to_string(&ChainSnapshot::of(&a)).unwrap();
    let mut b = serde_json::from_str::<ChainSnapshot>(&json).unwrap().restore().unwrap();
    for _ in 0..5 {
        gibbs_sweep(&mut a, &cfg).unwrap();
        gibbs_sweep(&mut b, &cfg).unwrap();
    }
    assert_eq!(a.trees, b.trees);
    assert_eq!(a.counts, b.counts);
    assert_eq!(a.metrics, b.metrics);
}

/// Short nonempty strings drawn from the prior predictive, so every one is
/// parseable.
fn strings_from(m: &ModelStructure, prior: &PriorSpec, seed: u64, count: usize) -> Vec<String> {
    let cp = CollapsedPrior::new(prior.clone());
    let base = CountTables::new(m.len());
    let src = DistributionSource::Collapsed {
        prior: &cp,
        base: &base,
        mode: PredictiveMode::Polya,
    };
    let mut rng = stream(seed, &[99]);
    let mut out = Vec::new();
    while out.len() < count {
        let o = generate(&src, m, Budget::calls(100), &mut rng).unwrap();
        if matches!(o.status, Status::Returned(_)) && (1..=4).contains(&o.printed.len()) {
            out.push(o.printed);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn smoothing_stays_within_the_running_range(v in prop::collection::vec(0.0f64..10.0, 1..60)) {
        let s = smooth(&v, 0.9);
        prop_assert_eq!(s.len(), v.len());
        prop_assert_eq!(s[0], v[0]);
        for t in 0..v.len() {
            let lo = v[..=t].iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v[..=t].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(s[t] >= lo - 1e-12 && s[t] <= hi + 1e-12);
        }
    }

    #[test]
    fn posterior_means_are_valid_weights(seed in any::<u64>(), alpha in 0.01f64..5.0) {
        let (m, _) = common::cpf_instance();
        let prior = standard_prior(&m, alpha).unwrap();
        let mut rng = stream(seed, &[]);
        let mut counts = CountTables::new(m.len());
        let contexts = prior.tables().contexts();
        for _ in 0..20 {
            let ctx = contexts[rng.random_range(0..contexts.len())];
            counts.increment(ctx, rng.random_range(0..ctx.width(m.len())), rng.random_range(1..5));
        }
        validate_weights(&m, &posterior_mean_weights(&counts, &prior)).unwrap();
    }

    #[test]
    fn more_counts_raise_a_cell(seed in any::<u64>(), extra in 1u32..50) {
        let (m, prior) = common::cpf_instance();
        let mut rng = stream(seed, &[]);
        let ctx = Context::Cm(SymbolId(4));
        let cell = rng.random_range(0..ctx.width(m.len()));
        let mut counts = CountTables::new(m.len());
        counts.increment(ctx, rng.random_range(0..ctx.width(m.len())), 3);
        let before = predictive_prob(&counts, &prior, ctx)[cell];
        counts.increment(ctx, cell, extra);
        let after = predictive_prob(&counts, &prior, ctx);
        prop_assert!(after[cell] > before);
        prop_assert!((after.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sweeps_conserve_counts(seed in any::<u64>(), m_particles in 2usize..6) {
        let (m, prior) = common::pf_instance();
        let n = m.len();
        let data = DatasetState::from_strings(strings_from(&m, &prior, seed, 3), 1);
        let mut chain = ChainState::new(m, prior, data, seed);
        let mut cfg = PGConfig::new(m_particles);
        cfg.max_restarts = 1000;
        for _ in 0..3 {
            gibbs_sweep(&mut chain, &cfg).unwrap();
            let mut total = CountTables::new(n);
            for t in chain.trees.iter().flatten() {
                cppso::tree::add_counts(&mut total, &extract_counts(t, n));
            }
            prop_assert_eq!(&total, &chain.counts);
            for (t, s) in chain.trees.iter().zip(&chain.dataset.slots) {
                prop_assert_eq!(cppso::tree::yield_of(t.as_ref().unwrap()), s.text.clone());
            }
        }
    }
}
