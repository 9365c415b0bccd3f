//! Instances and oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use cppso::model::{CellTables, Context, ModelStructure, PriorSpec, SymbolId, SymbolSpec, SymbolType, WeightTables};
use cppso::rng::stream;
use cppso::semantics::random_plain_cpp;

/// Seed of the random plain CPP used for sampler agreement; chosen so the
/// model is sub-stochastic with non-trivial branching.
pub const RANDOM_CPP_SEED: u64 = 3;

pub fn random_cpp() -> (ModelStructure, WeightTables) {
    random_plain_cpp(6, &mut stream(RANDOM_CPP_SEED, &[]))
}

/// Four symbols, `root = S12` reading its input as `q1 = '1'`; recursion
/// through `root` is made rare so exhaustive search reaches tiny truncation.
pub fn pf_instance() -> (ModelStructure, PriorSpec) {
    let specs = vec![
        SymbolSpec::observation('1'),
        SymbolSpec::observation('2'),
        SymbolSpec::new("id", SymbolType::Id),
        SymbolSpec::new("root", SymbolType::S12),
    ];
    let m = ModelStructure::from_symbols(specs, vec!['1', '2'], SymbolId(3), SymbolId(0)).unwrap();
    let n = m.len();
    let mut alpha = CellTables::filled(&m, 1.0);
    let row = alpha.row_mut(Context::Cm(SymbolId(3)));
    for (c, a) in row.iter_mut().enumerate() {
        if c / n == 3 || c % n == 3 {
            *a = 0.05;
        }
    }
    (m.clone(), PriorSpec::from_tables(&m, alpha).unwrap())
}

/// Five symbols where the datum `"1"` has four dominant parses of equal
/// posterior mass and a long tail of unlikely ones.
pub fn cpf_instance() -> (ModelStructure, PriorSpec) {
    let specs = vec![
        SymbolSpec::observation('1'),
        SymbolSpec::observation('2'),
        SymbolSpec::new("id", SymbolType::Id),
        SymbolSpec::new("c", SymbolType::Cn),
        SymbolSpec::new("root", SymbolType::S2),
    ];
    let m = ModelStructure::from_symbols(specs, vec!['1', '2'], SymbolId(4), SymbolId(2)).unwrap();
    let n = m.len();
    let mut alpha = CellTables::filled(&m, 1.0);
    for (c, a) in alpha.row_mut(Context::Cm(SymbolId(4))).iter_mut().enumerate() {
        let favoured = matches!((c / n, c % n), (0, 2) | (2, 0) | (0, 3) | (3, 0));
        *a = if favoured { 1.0 } else { 0.001 };
    }
    for (j, a) in alpha.row_mut(Context::Cn(SymbolId(3))).iter_mut().enumerate() {
        *a = if j == 2 { 1.0 } else { 0.001 };
    }
    (m.clone(), PriorSpec::from_tables(&m, alpha).unwrap())
}

/// Total variation between an empirical distribution and a target, counting
/// mass either side puts outside the other's support.
pub fn total_variation<K: std::hash::Hash + Eq>(target: &HashMap<K, f64>, empirical: &HashMap<K, f64>) -> f64 {
    let mut tv: f64 = target
        .iter()
        .map(|(k, p)| (p - empirical.get(k).copied().unwrap_or(0.0)).abs())
        .sum();
    tv += empirical
        .iter()
        .filter(|(k, _)| !target.contains_key(*k))
        .map(|(_, q)| q)
        .sum::<f64>();
    tv / 2.0
}

pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
