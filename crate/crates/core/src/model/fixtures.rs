//! Hand-built models used by tests, the CLI and the experiment presets.

use super::{
    build_model, validate_weights, Context, ModelStructure, SymbolId, SymbolRef, SymbolSpec, SymbolType, WeightTables,
};

struct Builder {
    specs: Vec<SymbolSpec>,
}

impl Builder {
    fn new() -> Self {
        Builder { specs: Vec::new() }
    }

    fn add(&mut self, name: &str, ty: SymbolType) -> &mut Self {
        self.specs.push(SymbolSpec::new(name, ty));
        self
    }

    fn finish(self, alphabet: Vec<char>, q0: &str, q1: &str) -> ModelStructure {
        let find = |n: &str| {
            SymbolId::from(
                self.specs
                    .iter()
                    .position(|s| s.name == n)
                    .unwrap_or_else(|| panic!("no symbol {n}")),
            )
        };
        let (q0, q1) = (find(q0), find(q1));
        ModelStructure::from_symbols(self.specs, alphabet, q0, q1).expect("fixture structure")
    }
}

struct Wiring<'m> {
    model: &'m ModelStructure,
    w: WeightTables,
}

impl<'m> Wiring<'m> {
    fn new(model: &'m ModelStructure) -> Self {
        Wiring {
            model,
            w: WeightTables::zeros(model),
        }
    }

    fn sym(&self, name: &str) -> SymbolId {
        self.model.by_name(name).unwrap_or_else(|| panic!("no symbol {name}"))
    }

    fn constant(&mut self, q: &str, out: &str) {
        let (q, out) = (self.sym(q), self.sym(out));
        self.w.set_one_hot(Context::Cn(q), out.index());
    }

    /// Deterministic `Fn` table; inputs not listed go to `default`.
    fn function(&mut self, q: &str, pairs: &[(&str, &str)], default: &str) {
        let q = self.sym(q);
        let default = self.sym(default);
        for i in self.model.ids() {
            self.w.set_one_hot(Context::Fn(q, i), default.index());
        }
        for (i, j) in pairs {
            let (i, j) = (self.sym(i), self.sym(j));
            self.w.set_one_hot(Context::Fn(q, i), j.index());
        }
    }

    fn pair(&mut self, q: &str, f: &str, g: &str) {
        let (q, f, g) = (self.sym(q), self.sym(f), self.sym(g));
        let n = self.model.len();
        self.w.set_one_hot(Context::Cm(q), f.index() * n + g.index());
    }

    fn finish(self) -> WeightTables {
        validate_weights(self.model, &self.w).expect("fixture weights");
        self.w
    }
}

/// The logic-and-arithmetic CPP with binary weights.
///
/// Boolean part: `cT`/`cF` are constants, `and`/`or` map `T`/`F` to one of
/// `cT`, `cF`, `id`. Number part: `1..4` with `next`/`prev`, `=1`, the
/// higher-order `+` (`+(n) = +n`), `+1 = id ▷ next`, `+2 = +1 ▷ next`,
/// `+3 = +2 ▷ next`, `*1` an identity, `*2 = *1 ⋈ +`, `*3 = *2 ⋈ +`.
///
/// Every `Fn` row must be a distribution, so undefined applications go
/// through a divergent symbol `⊥` (an `S2` whose only pair is `(⊥, ⊥)`).
/// `next`/`prev` are `P21(id, nxt)`/`P21(id, prv)`, where `nxt`/`prv` return
/// a constant (`k1..k4`) for defined inputs and `⊥` otherwise; invoking the
/// result makes `next(4)` and `prev(1)` non-terminating, so their mass is
/// lost rather than landing on a junk value. Other undefined `Fn` rows
/// return `⊥` as a plain value.
pub fn fig1_fixture() -> (ModelStructure, WeightTables) {
    use SymbolType::*;
    let mut b = Builder::new();
    b.add("id", Id)
        .add("cT", Cn)
        .add("cF", Cn)
        .add("T", Id)
        .add("F", Id)
        .add("and", Fn)
        .add("or", Fn);
    for n in ["1", "2", "3", "4"] {
        b.add(n, Id);
    }
    b.add("prev", P21)
        .add("next", P21)
        .add("=1", Fn)
        .add("+", Fn)
        .add("+1", S2)
        .add("+2", S2)
        .add("+3", S2)
        .add("*1", Id)
        .add("*2", P21)
        .add("*3", P21);
    for k in ["k1", "k2", "k3", "k4"] {
        b.add(k, Cn);
    }
    b.add("nxt", Fn).add("prv", Fn).add("⊥", S2);
    let model = b.finish(Vec::new(), "*3", "1");

    let mut w = Wiring::new(&model);
    w.constant("cT", "T");
    w.constant("cF", "F");
    for (k, n) in [("k1", "1"), ("k2", "2"), ("k3", "3"), ("k4", "4")] {
        w.constant(k, n);
    }
    w.function("and", &[("T", "id"), ("F", "cF")], "⊥");
    w.function("or", &[("T", "cT"), ("F", "id")], "⊥");
    w.function("=1", &[("1", "T"), ("2", "F"), ("3", "F"), ("4", "F")], "⊥");
    w.function("+", &[("1", "+1"), ("2", "+2"), ("3", "+3")], "⊥");
    w.function("nxt", &[("1", "k2"), ("2", "k3"), ("3", "k4")], "⊥");
    w.function("prv", &[("2", "k1"), ("3", "k2"), ("4", "k3")], "⊥");
    w.pair("next", "id", "nxt");
    w.pair("prev", "id", "prv");
    w.pair("+1", "id", "next");
    w.pair("+2", "+1", "next");
    w.pair("+3", "+2", "next");
    w.pair("*2", "*1", "+");
    w.pair("*3", "*2", "+");
    w.pair("⊥", "⊥", "⊥");
    let weights = w.finish();
    (model, weights)
}

/// A generator of `ABA` strings over the digits with a single constant node.
///
/// `print = S12(c, id)` draws a digit symbol from `c`, then invokes it,
/// printing it and returning it. `tail = S12(id, print)` prints a fresh digit
/// and then re-invokes its own input, and the root is `S2(print, tail)`.
/// Every string `ABA` has probability 1/100.
pub fn aba_generator() -> (ModelStructure, WeightTables) {
    use SymbolType::*;
    let digits: Vec<char> = ('0'..='9').collect();
    let mut specs: Vec<SymbolSpec> = digits.iter().map(|&c| SymbolSpec::observation(c)).collect();
    for (name, ty) in [("id", Id), ("c", Cn), ("root", S2), ("print", S12), ("tail", S12)] {
        specs.push(SymbolSpec::new(name, ty));
    }
    let root = SymbolId(12);
    let model = ModelStructure::from_symbols(specs, digits, root, root).expect("aba structure");
    let mut w = Wiring::new(&model);
    let c = w.sym("c");
    let row = w.w.row_mut(Context::Cn(c));
    row.iter_mut().for_each(|v| *v = 0.0);
    row[..10].iter_mut().for_each(|v| *v = 0.1);
    w.pair("root", "print", "tail");
    w.pair("print", "c", "id");
    w.pair("tail", "id", "print");
    let weights = w.finish();
    (model, weights)
}

/// A counting-down generator over `{1,2,3,4}`.
///
/// `start = S12(c, id)` draws a number in `2..=4` and prints it; `step =
/// S2(dec, more)` where `dec = S12(prev, id)` prints the predecessor and
/// `more = P21(id, cont)` either stops (`cont(1) = id`) or recurses into
/// `step`. Outputs are `21`, `321` and `4321`, each with probability 1/3.
pub fn counting_fixture() -> (ModelStructure, WeightTables) {
    use SymbolType::*;
    let alphabet = vec!['1', '2', '3', '4'];
    let mut specs: Vec<SymbolSpec> = alphabet.iter().map(|&c| SymbolSpec::observation(c)).collect();
    for (name, ty) in [
        ("id", Id),
        ("c", Cn),
        ("prev", Fn),
        ("cont", Fn),
        ("root", S2),
        ("step", S2),
        ("start", S12),
        ("dec", S12),
        ("more", P21),
    ] {
        specs.push(SymbolSpec::new(name, ty));
    }
    let model = ModelStructure::from_symbols(specs, alphabet, SymbolId(8), SymbolId(4)).expect("counting structure");
    let mut w = Wiring::new(&model);
    let c = w.sym("c");
    let row = w.w.row_mut(Context::Cn(c));
    row.iter_mut().for_each(|v| *v = 0.0);
    row[1..4].fill(1.0 / 3.0);
    w.function("prev", &[("2", "1"), ("3", "2"), ("4", "3")], "id");
    w.function(
        "cont",
        &[("1", "id"), ("2", "step"), ("3", "step"), ("4", "step")],
        "id",
    );
    w.pair("root", "start", "step");
    w.pair("step", "dec", "more");
    w.pair("start", "c", "id");
    w.pair("dec", "prev", "id");
    w.pair("more", "id", "cont");
    let weights = w.finish();
    (model, weights)
}

/// Symbol counts of the experiment model: ten digit observations, three
/// `S2` and three `S12` combinators, two `Cn`, two `Fn` and one `Id`.
pub fn experiment_counts() -> Vec<(SymbolType, usize)> {
    vec![
        (SymbolType::Ob, 10),
        (SymbolType::S2, 3),
        (SymbolType::S12, 3),
        (SymbolType::Cn, 2),
        (SymbolType::Fn, 2),
        (SymbolType::Id, 1),
    ]
}

/// The 21-symbol experiment structure; `q0` and `q1` are both the first
/// `S2` symbol.
pub fn experiment_model() -> ModelStructure {
    let digits: Vec<char> = ('0'..='9').collect();
    let s2 = SymbolRef::Nth(SymbolType::S2, 0);
    build_model(&experiment_counts(), &digits, s2, s2).expect("experiment structure")
}

/// Symbols addressed by the experiment presets' special initialisations.
#[derive(Clone, Copy, Debug)]
pub struct ExperimentRoles {
    /// `S12` node whose `(c1, id)` cell is raised.
    pub q4: SymbolId,
    pub c1: SymbolId,
    pub id: SymbolId,
    /// `Fn` node seeded with the successor relation.
    pub f1: SymbolId,
    /// `S2` node seeded with the `(f1, f1)` composition (distinct from `q0`).
    pub q2: SymbolId,
}

impl ExperimentRoles {
    pub fn of(model: &ModelStructure) -> Option<Self> {
        Some(ExperimentRoles {
            q4: model.nth_of_type(SymbolType::S12, 0)?,
            c1: model.nth_of_type(SymbolType::Cn, 0)?,
            id: model.nth_of_type(SymbolType::Id, 0)?,
            f1: model.nth_of_type(SymbolType::Fn, 0)?,
            q2: model.nth_of_type(SymbolType::S2, 1)?,
        })
    }
}
