//! Hierarchical iterative CRF over the chain schedule.
//!
//! The pairwise potential is the standard linear-chain form: a sequence
//! scores `start[y_1] + sum_i z_i[y_i] + sum_{i>=2} T[y_{i-1}, y_i]` in log
//! space. Hierarchy knowledge enters through the initialization of `T` and,
//! in strict mode, through frozen hard masks.

mod inference;
pub mod train;

pub use inference::{
    decode, independent_decode, log_partition, nll_and_grads, posterior_marginals,
    sequence_score, DecodeResult, Gradients, Marginals,
};

use serde::{Deserialize, Serialize};

use crate::chain::ChainSchedule;
use crate::error::{Error, Result};
use crate::taxonomy::{legal_level_pairs, Taxonomy};

pub const DEFAULT_TAU_SOFT: f64 = -10.0;
pub const DEFAULT_TAU_HARD: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Cross-layer transitions start at a finite penalty and stay learnable.
    #[default]
    Faithful,
    /// Hard, frozen masks: slot levels, parent-child moves, and the
    /// level-1 to level-D iteration boundary restricted to ancestors.
    Strict,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "faithful" => Ok(Mode::Faithful),
            "strict" => Ok(Mode::Strict),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode {other:?}; expected faithful or strict"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Faithful => "faithful",
            Mode::Strict => "strict",
        })
    }
}

/// Transition and start scores plus the masks that pin some of them.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    pub(crate) labels: usize,
    pub(crate) transitions: Vec<f64>,
    pub(crate) start: Vec<f64>,
    pub(crate) mode: Mode,
    pub(crate) tau_soft: f64,
    pub(crate) tau_hard: f64,
    pub(crate) frozen: Vec<bool>,
    pub(crate) start_frozen: Vec<bool>,
    /// Strict mode only: `slot_allowed[i * m + y]` is false when label `y`
    /// may not occupy slot `i`. Disallowed states score `tau_hard`.
    pub(crate) slot_allowed: Option<Vec<bool>>,
}

impl CrfParams {
    /// All-zero scores, nothing frozen, no state mask.
    pub fn neutral(labels: usize) -> Self {
        CrfParams {
            labels,
            transitions: vec![0.0; labels * labels],
            start: vec![0.0; labels],
            mode: Mode::Faithful,
            tau_soft: DEFAULT_TAU_SOFT,
            tau_hard: DEFAULT_TAU_HARD,
            frozen: vec![false; labels * labels],
            start_frozen: vec![false; labels],
            slot_allowed: None,
        }
    }

    /// Zero scores with every entry frozen. Decoding reduces to an
    /// independent argmax per slot and the loss to per-slot cross-entropy.
    pub fn independent(labels: usize) -> Self {
        CrfParams {
            frozen: vec![true; labels * labels],
            start_frozen: vec![true; labels],
            ..Self::neutral(labels)
        }
    }

    pub fn from_parts(labels: usize, transitions: Vec<f64>, start: Vec<f64>) -> Result<Self> {
        if transitions.len() != labels * labels {
            return Err(Error::DimensionMismatch {
                expected: labels * labels,
                found: transitions.len(),
            });
        }
        if start.len() != labels {
            return Err(Error::DimensionMismatch {
                expected: labels,
                found: start.len(),
            });
        }
        Ok(CrfParams {
            transitions,
            start,
            ..Self::neutral(labels)
        })
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn tau_soft(&self) -> f64 {
        self.tau_soft
    }

    pub fn tau_hard(&self) -> f64 {
        self.tau_hard
    }

    pub fn transition(&self, from: usize, to: usize) -> f64 {
        self.transitions[from * self.labels + to]
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transitions
    }

    pub fn start(&self) -> &[f64] {
        &self.start
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    pub fn start_frozen(&self) -> &[bool] {
        &self.start_frozen
    }

    pub fn slot_allowed(&self) -> Option<&[bool]> {
        self.slot_allowed.as_deref()
    }

    pub fn is_frozen(&self, from: usize, to: usize) -> bool {
        self.frozen[from * self.labels + to]
    }

    /// True when every entry is frozen, i.e. nothing is trainable.
    pub fn fully_frozen(&self) -> bool {
        self.frozen.iter().all(|&f| f) && self.start_frozen.iter().all(|&f| f)
    }

    pub(crate) fn state_penalty(&self, slot: usize, label: usize) -> f64 {
        match &self.slot_allowed {
            Some(mask) if !mask[slot * self.labels + label] => self.tau_hard,
            _ => 0.0,
        }
    }
}

/// Build the hierarchy-aware initial transition matrix for `schedule`.
///
/// Level pairs that never occur consecutively in the schedule start at
/// `tau_soft` (faithful) or `tau_hard` (strict, frozen). Strict mode further
/// requires every allowed move to stay on one root-to-leaf path: a child
/// move for adjacent levels, the ancestor for the level-1 to level-D
/// boundary, and the same label for repeated levels.
pub fn init_transitions(
    tax: &Taxonomy,
    schedule: &ChainSchedule,
    mode: Mode,
    tau_soft: f64,
    tau_hard: f64,
) -> Result<CrfParams> {
    if !(tau_hard < tau_soft && tau_soft < 0.0) || !tau_soft.is_finite() || !tau_hard.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "penalties must satisfy tau_hard < tau_soft < 0 (got tau_soft={tau_soft}, tau_hard={tau_hard})"
        )));
    }
    if schedule.depth() != tax.depth() {
        return Err(Error::InvalidArgument(format!(
            "schedule depth {} does not match taxonomy depth {}",
            schedule.depth(),
            tax.depth()
        )));
    }
    let m = tax.len();
    let legal = legal_level_pairs(schedule);
    let mut params = CrfParams::neutral(m);
    params.mode = mode;
    params.tau_soft = tau_soft;
    params.tau_hard = tau_hard;

    for a in 0..m {
        for b in 0..m {
            let pair_ok = legal.contains(&(tax.level(a), tax.level(b)));
            let idx = a * m + b;
            match mode {
                Mode::Faithful => {
                    if !pair_ok {
                        params.transitions[idx] = tau_soft;
                    }
                }
                Mode::Strict => {
                    if !pair_ok || !tax.on_common_path(a, b) {
                        params.transitions[idx] = tau_hard;
                        params.frozen[idx] = true;
                    }
                }
            }
        }
    }

    let first = schedule.levels()[0];
    for y in 0..m {
        if tax.level(y) != first {
            match mode {
                Mode::Faithful => params.start[y] = tau_soft,
                Mode::Strict => {
                    params.start[y] = tau_hard;
                    params.start_frozen[y] = true;
                }
            }
        }
    }

    if mode == Mode::Strict {
        let mut allowed = vec![false; schedule.len() * m];
        for (i, &v) in schedule.levels().iter().enumerate() {
            for y in 0..m {
                allowed[i * m + y] = tax.level(y) == v;
            }
        }
        params.slot_allowed = Some(allowed);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::build_schedule;
    use crate::taxonomy::{LabelEntry, TaxonomyDoc};

    pub(crate) fn dbpedia_like() -> Taxonomy {
        let l = |n: &str, lv: usize, p: Option<&str>| LabelEntry {
            name: n.into(),
            level: lv,
            parent: p.map(Into::into),
        };
        Taxonomy::from_doc(TaxonomyDoc {
            name: "mini".into(),
            labels: vec![
                l("Species", 1, None),
                l("Event", 1, None),
                l("Animal", 2, Some("Species")),
                l("NaturalEvent", 2, Some("Event")),
                l("Bird", 3, Some("Animal")),
                l("Earthquake", 3, Some("NaturalEvent")),
                l("Flood", 3, Some("NaturalEvent")),
            ],
        })
        .unwrap()
    }

    #[test]
    fn rejects_bad_penalties() {
        let t = dbpedia_like();
        let s = build_schedule(3, 2).unwrap();
        for (soft, hard) in [(-1.0, -0.5), (0.5, -1.0), (-1.0, f64::NEG_INFINITY)] {
            assert!(matches!(
                init_transitions(&t, &s, Mode::Faithful, soft, hard),
                Err(Error::InvalidArgument(_))
            ));
        }
        let s2 = build_schedule(2, 2).unwrap();
        assert!(init_transitions(&t, &s2, Mode::Faithful, -10.0, -1e30).is_err());
    }

    #[test]
    fn faithful_init_follows_level_pairs() {
        let t = dbpedia_like();
        let s = build_schedule(3, 2).unwrap();
        let p = init_transitions(&t, &s, Mode::Faithful, -10.0, -1e30).unwrap();
        let (species, event, animal, bird, quake) = (0, 1, 2, 4, 5);
        // adjacent levels: legal regardless of parentage
        assert_eq!(p.transition(species, animal), 0.0);
        assert_eq!(p.transition(event, animal), 0.0);
        assert_eq!(p.transition(animal, species), 0.0);
        // iteration boundary 1 -> 3 is legal
        assert_eq!(p.transition(species, quake), 0.0);
        // 3 -> 1, same level pairs are not in the schedule
        assert_eq!(p.transition(quake, species), -10.0);
        assert_eq!(p.transition(species, species), -10.0);
        assert_eq!(p.transition(bird, quake), -10.0);
        assert!(p.frozen().iter().all(|f| !f));
        assert_eq!(p.start()[species], 0.0);
        assert_eq!(p.start()[animal], -10.0);
        for a in 0..t.len() {
            for b in 0..t.len() {
                if t.level(a).abs_diff(t.level(b)) == 1 {
                    assert_eq!(p.transition(a, b), 0.0);
                }
            }
        }
    }

    #[test]
    fn strict_init_keeps_moves_on_one_path() {
        let t = dbpedia_like();
        let s = build_schedule(3, 2).unwrap();
        let p = init_transitions(&t, &s, Mode::Strict, -10.0, -1e30).unwrap();
        let (species, event, animal, natural, bird, quake) = (0, 1, 2, 3, 4, 5);
        assert_eq!(p.transition(species, animal), 0.0);
        assert_eq!(p.transition(event, animal), -1e30);
        assert!(p.is_frozen(event, animal));
        assert_eq!(p.transition(natural, event), 0.0);
        assert_eq!(p.transition(animal, event), -1e30);
        // boundary: Earthquake descends from Event, not Species
        assert_eq!(p.transition(species, quake), -1e30);
        assert_eq!(p.transition(event, quake), 0.0);
        assert_eq!(p.transition(species, bird), 0.0);
        assert_eq!(p.transition(quake, species), -1e30);
        assert!(!p.is_frozen(species, bird));
        let mask = p.slot_allowed().unwrap();
        assert_eq!(mask.len(), s.len() * t.len());
        assert!(mask[species] && !mask[animal]);
        assert!(p.start_frozen()[animal] && !p.start_frozen()[species]);
    }

    #[test]
    fn single_level_taxonomy() {
        let t = Taxonomy::from_json_str(
            r#"{"name":"flat","labels":[{"name":"a","level":1,"parent":null},{"name":"b","level":1,"parent":null}]}"#,
        )
        .unwrap();
        let s = build_schedule(1, 3).unwrap();
        let p = init_transitions(&t, &s, Mode::Faithful, -10.0, -1e30).unwrap();
        assert!(p.transitions().iter().all(|&v| v == 0.0));
        assert!(p.start().iter().all(|&v| v == 0.0));
        let p = init_transitions(&t, &s, Mode::Strict, -10.0, -1e30).unwrap();
        assert_eq!(p.transitions(), &[0.0, -1e30, -1e30, 0.0]);
    }
}
