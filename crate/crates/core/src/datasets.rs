//! Pattern datasets and curriculum schedules for the experiment presets.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Relation;

/// String shapes used by the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PatternTag {
    /// `A B A`
    #[serde(rename = "ABA")]
    Aba,
    /// `A B f(A)`
    #[serde(rename = "ABf")]
    Abf,
    /// `A B A f(A)`
    #[serde(rename = "ABAf")]
    Abaf,
    /// `A B g(A)`
    #[serde(rename = "ABg")]
    Abg,
    /// `A B A f(A) g(f(A))`
    #[serde(rename = "ABAf_gf")]
    AbafGf,
}

impl PatternTag {
    #[allow(clippy::len_without_is_empty)]
    pub fn len(self) -> usize {
        match self {
            PatternTag::Aba | PatternTag::Abf | PatternTag::Abg => 3,
            PatternTag::Abaf => 4,
            PatternTag::AbafGf => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PatternTag::Aba => "ABA",
            PatternTag::Abf => "ABf",
            PatternTag::Abaf => "ABAf",
            PatternTag::Abg => "ABg",
            PatternTag::AbafGf => "ABAf_gf",
        }
    }
}

impl std::str::FromStr for PatternTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            PatternTag::Aba,
            PatternTag::Abf,
            PatternTag::Abaf,
            PatternTag::Abg,
            PatternTag::AbafGf,
        ]
        .into_iter()
        .find(|t| t.name().eq_ignore_ascii_case(s))
        .ok_or_else(|| Error::Config(format!("unknown pattern {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pattern {
    pub tag: PatternTag,
    pub f: Relation,
    pub g: Relation,
    /// Letters `A` may take; `None` means the whole alphabet.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restrict_a: Option<Vec<char>>,
}

impl Pattern {
    /// The pattern with `f = +1` and `g = +2` over the alphabet.
    pub fn new(tag: PatternTag) -> Self {
        Pattern {
            tag,
            f: Relation::Shift { by: 1 },
            g: Relation::Shift { by: 2 },
            restrict_a: None,
        }
    }

    pub fn restricted(mut self, letters: Vec<char>) -> Self {
        self.restrict_a = Some(letters);
        self
    }

    /// The string for given `A` and `B`.
    pub fn render(&self, alphabet: &[char], a: char, b: char) -> Result<Vec<char>> {
        let rel = |r: &Relation, c: char| {
            r.apply(alphabet, c)
                .ok_or_else(|| Error::Config(format!("relation undefined on {c:?}")))
        };
        Ok(match self.tag {
            PatternTag::Aba => vec![a, b, a],
            PatternTag::Abf => vec![a, b, rel(&self.f, a)?],
            PatternTag::Abaf => vec![a, b, a, rel(&self.f, a)?],
            PatternTag::Abg => vec![a, b, rel(&self.g, a)?],
            PatternTag::AbafGf => {
                let fa = rel(&self.f, a)?;
                vec![a, b, a, fa, rel(&self.g, fa)?]
            }
        })
    }

    pub fn draw<R: Rng + ?Sized>(&self, alphabet: &[char], rng: &mut R) -> Result<Vec<char>> {
        if alphabet.is_empty() {
            return Err(Error::Config("empty alphabet".into()));
        }
        let pool = self.restrict_a.as_deref().unwrap_or(alphabet);
        if pool.is_empty() {
            return Err(Error::Config("empty restriction for A".into()));
        }
        let a = pool[rng.random_range(0..pool.len())];
        let b = alphabet[rng.random_range(0..alphabet.len())];
        self.render(alphabet, a, b)
    }
}

/// `n` independent draws of `pattern`.
pub fn gen_dataset<R: Rng + ?Sized>(
    pattern: &Pattern,
    n: usize,
    alphabet: &[char],
    rng: &mut R,
) -> Result<Vec<String>> {
    (0..n)
        .map(|_| pattern.draw(alphabet, rng).map(|s| s.into_iter().collect()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhaseAction {
    /// Train on whatever the dataset holds; every slot is at `level`.
    Fixed { level: usize },
    /// Each epoch, replace `per_epoch` slots still at `from` by fresh `to` draws.
    MixIn { from: usize, to: usize, per_epoch: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub epochs: usize,
    pub action: PhaseAction,
}

/// Dataset levels and the phases that move between them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub dataset_size: usize,
    /// `levels[k]` generates level-`k+1` data.
    pub levels: Vec<Pattern>,
    pub phases: Vec<Phase>,
}

impl CurriculumSchedule {
    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }

    /// The phase index active at 1-based `epoch`.
    pub fn phase_at(&self, epoch: usize) -> Option<usize> {
        if epoch == 0 {
            return None;
        }
        let mut end = 0;
        for (k, p) in self.phases.iter().enumerate() {
            end += p.epochs;
            if epoch <= end {
                return Some(k);
            }
        }
        None
    }

    /// The 1-based epochs at which each phase ends.
    pub fn phase_ends(&self) -> Vec<usize> {
        self.phases
            .iter()
            .scan(0, |end, p| {
                *end += p.epochs;
                Some(*end)
            })
            .collect()
    }

    fn initial_level(&self) -> usize {
        match self.phases.first().map(|p| &p.action) {
            Some(PhaseAction::Fixed { level }) => *level,
            Some(PhaseAction::MixIn { from, .. }) => *from,
            None => 1,
        }
    }

    /// Checks levels, contiguity and that every mixing phase replaces
    /// exactly the slots it inherits.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Schedule(m));
        let level_ok = |l: usize| l >= 1 && l <= self.levels.len();
        let mut current = self.initial_level();
        if !self.phases.is_empty() && !level_ok(current) {
            return bad(format!("level {current} has no pattern"));
        }
        for (k, p) in self.phases.iter().enumerate() {
            match p.action {
                PhaseAction::Fixed { level } => {
                    if level != current {
                        return bad(format!(
                            "phase {k} expects level {level} but the data is at level {current}"
                        ));
                    }
                }
                PhaseAction::MixIn { from, to, per_epoch } => {
                    if from != current || !level_ok(to) {
                        return bad(format!(
                            "phase {k} mixes {from}→{to} but the data is at level {current}"
                        ));
                    }
                    if per_epoch * p.epochs != self.dataset_size {
                        return bad(format!(
                            "phase {k} replaces {} slots of {}",
                            per_epoch * p.epochs,
                            self.dataset_size
                        ));
                    }
                    current = to;
                }
            }
        }
        Ok(())
    }
}

/// Builds `phases` of 50 epochs of the experiment curricula.
fn staged(levels: Vec<Pattern>, stages: usize) -> CurriculumSchedule {
    let mut phases = Vec::new();
    for level in 1..=stages {
        if level > 1 {
            phases.push(Phase {
                epochs: 50,
                action: PhaseAction::MixIn {
                    from: level - 1,
                    to: level,
                    per_epoch: 2,
                },
            });
        }
        phases.push(Phase {
            epochs: 50,
            action: PhaseAction::Fixed { level },
        });
    }
    CurriculumSchedule {
        dataset_size: 100,
        levels,
        phases,
    }
}

/// The curriculum of experiment `A1`..`A7`.
pub fn schedule_for(experiment: &str) -> Result<CurriculumSchedule> {
    use PatternTag::*;
    let p = Pattern::new;
    let s = match experiment.to_ascii_uppercase().as_str() {
        "A1" => CurriculumSchedule {
            dataset_size: 100,
            levels: vec![p(Aba)],
            phases: vec![Phase {
                epochs: 100,
                action: PhaseAction::Fixed { level: 1 },
            }],
        },
        "A2" => staged(vec![p(Aba), p(Abf)], 2),
        "A3" => staged(vec![p(Aba), p(Abaf)], 2),
        "A4" => staged(vec![p(Aba), p(Abf), p(Abg)], 3),
        "A5" => staged(vec![p(Aba), p(Abaf), p(AbafGf)], 3),
        "A6" | "A7" => staged(vec![p(Aba), p(Abg)], 2),
        _ => return Err(Error::UnknownExperiment(experiment.to_string())),
    };
    Ok(s)
}

/// One dataset entry. `id` is stable for the slot's current string and
/// changes whenever the entry is replaced.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub id: u64,
    pub level: usize,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetState {
    pub slots: Vec<Slot>,
    next_id: u64,
}

impl DatasetState {
    pub fn from_strings(strings: Vec<String>, level: usize) -> Self {
        let slots: Vec<Slot> = strings
            .into_iter()
            .enumerate()
            .map(|(k, text)| Slot {
                id: k as u64,
                level,
                text,
            })
            .collect();
        DatasetState {
            next_id: slots.len() as u64,
            slots,
        }
    }

    /// The level-1 (or first phase's) dataset.
    pub fn initial<R: Rng + ?Sized>(schedule: &CurriculumSchedule, alphabet: &[char], rng: &mut R) -> Result<Self> {
        schedule.validate()?;
        let level = schedule.initial_level();
        let pattern = schedule
            .levels
            .get(level - 1)
            .ok_or_else(|| Error::Schedule(format!("level {level} has no pattern")))?;
        Ok(Self::from_strings(
            gen_dataset(pattern, schedule.dataset_size, alphabet, rng)?,
            level,
        ))
    }

    pub fn count_at(&self, level: usize) -> usize {
        self.slots.iter().filter(|s| s.level == level).count()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.text.as_str())
    }
}

/// Applies the dataset action of 1-based `epoch` and returns the indices of
/// replaced slots. Fixed phases change nothing.
pub fn advance_epoch<R: Rng + ?Sized>(
    schedule: &CurriculumSchedule,
    state: &mut DatasetState,
    epoch: usize,
    alphabet: &[char],
    rng: &mut R,
) -> Result<Vec<usize>> {
    let phase = schedule
        .phase_at(epoch)
        .ok_or_else(|| Error::Schedule(format!("epoch {epoch} is outside the schedule")))?;
    let PhaseAction::MixIn { from, to, per_epoch } = schedule.phases[phase].action else {
        return Ok(Vec::new());
    };
    let candidates: Vec<usize> = (0..state.slots.len())
        .filter(|&k| state.slots[k].level == from)
        .collect();
    if candidates.len() < per_epoch {
        return Err(Error::Schedule(format!(
            "epoch {epoch}: {per_epoch} replacements requested but only {} level-{from} slots remain",
            candidates.len()
        )));
    }
    let pattern = &schedule.levels[to - 1];
    let mut picked: Vec<usize> = sample_indices(rng, candidates.len(), per_epoch)
        .into_iter()
        .map(|k| candidates[k])
        .collect();
    picked.sort_unstable();
    for &k in &picked {
        let text = pattern.draw(alphabet, rng)?.into_iter().collect();
        state.slots[k] = Slot {
            id: state.next_id,
            level: to,
            text,
        };
        state.next_id += 1;
    }
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn digits() -> Vec<char> {
        ('0'..='9').collect()
    }

    #[test]
    fn pattern_examples() {
        let d = digits();
        let s = |t, a, b| {
            Pattern::new(t)
                .render(&d, a, b)
                .unwrap()
                .into_iter()
                .collect::<String>()
        };
        assert_eq!(s(PatternTag::Aba, '1', '5'), "151");
        assert_eq!(s(PatternTag::Abf, '9', '4'), "940");
        assert_eq!(s(PatternTag::Abg, '9', '4'), "941");
        assert_eq!(s(PatternTag::Abaf, '3', '3'), "3334");
        assert_eq!(s(PatternTag::AbafGf, '8', '3'), "83891");
    }

    #[test]
    fn schedules() {
        let a1 = schedule_for("A1").unwrap();
        assert_eq!(a1.phases.len(), 1);
        assert_eq!(a1.total_epochs(), 100);
        assert_eq!(schedule_for("A2").unwrap().total_epochs(), 150);
        assert_eq!(schedule_for("A4").unwrap().total_epochs(), 250);
        assert_eq!(schedule_for("a5").unwrap().phases.len(), 5);
        assert_eq!(schedule_for("A7").unwrap().levels[1].tag, PatternTag::Abg);
        assert!(matches!(schedule_for("A8"), Err(Error::UnknownExperiment(_))));
        for e in ["A1", "A2", "A3", "A4", "A5", "A6", "A7"] {
            schedule_for(e).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn mixing_replaces_two_slots_per_epoch_until_done() {
        let d = digits();
        let sched = schedule_for("A2").unwrap();
        let mut rng = stream(3, &[]);
        let mut state = DatasetState::initial(&sched, &d, &mut rng).unwrap();
        let mut seen_ids: Vec<u64> = state.slots.iter().map(|s| s.id).collect();
        for epoch in 1..=150 {
            let before = state.clone();
            let changed = advance_epoch(&sched, &mut state, epoch, &d, &mut rng).unwrap();
            let diff = (0..100).filter(|&k| before.slots[k] != state.slots[k]).count();
            if (51..=100).contains(&epoch) {
                assert_eq!(changed.len(), 2);
                assert_eq!(diff, 2);
                for &k in &changed {
                    assert_eq!(before.slots[k].level, 1);
                    assert!(!seen_ids.contains(&state.slots[k].id));
                    seen_ids.push(state.slots[k].id);
                }
            } else {
                assert!(changed.is_empty());
                assert_eq!(before, state);
            }
            if epoch == 100 {
                assert_eq!(state.count_at(1), 0);
            }
        }
        for s in &state.slots {
            let c: Vec<char> = s.text.chars().collect();
            assert_eq!(c[2], Relation::Shift { by: 1 }.apply(&d, c[0]).unwrap());
        }
        assert!(advance_epoch(&sched, &mut state, 151, &d, &mut rng).is_err());
    }

    #[test]
    fn inconsistent_schedule_is_rejected() {
        let mut s = schedule_for("A2").unwrap();
        s.phases[1].action = PhaseAction::MixIn {
            from: 1,
            to: 2,
            per_epoch: 3,
        };
        assert!(matches!(s.validate(), Err(Error::Schedule(_))));
        let d = digits();
        let mut rng = stream(1, &[]);
        let mut state = DatasetState::from_strings(vec!["121".into()], 1);
        let s = schedule_for("A2").unwrap();
        assert!(advance_epoch(&s, &mut state, 51, &d, &mut rng).is_err());
    }

    #[test]
    fn restriction_limits_first_letter() {
        let d = digits();
        let p = Pattern::new(PatternTag::Abg).restricted(('0'..='6').collect());
        let mut rng = stream(9, &[]);
        for s in gen_dataset(&p, 500, &d, &mut rng).unwrap() {
            assert!(s.chars().next().unwrap() <= '6');
        }
    }
}
