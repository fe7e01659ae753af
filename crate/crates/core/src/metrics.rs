//! Flat and hierarchy-constrained F1 scores.
//!
//! * standard: every (sample, label) incidence counts.
//! * C-variant: a predicted label is kept only if all of its ancestors are
//!   predicted too; dropped gold labels become false negatives.
//! * P-variant: a predicted gold label is a true positive only if the whole
//!   gold path is predicted. A predicted non-gold label is kept (as a false
//!   positive) only if some root-to-leaf path through it is fully predicted.
//!
//! Macro averages run over all taxonomy labels, with 0 for labels whose F1
//! is undefined.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{LabelId, Taxonomy};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub label: String,
    pub standard: Counts,
    pub constrained: Counts,
    pub path: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub c_micro_f1: f64,
    pub c_macro_f1: f64,
    pub p_micro_f1: f64,
    pub p_macro_f1: f64,
    pub totals: VariantTotals,
    pub per_label: Vec<LabelCounts>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantTotals {
    pub standard: Counts,
    pub constrained: Counts,
    pub path: Counts,
}

/// One evaluated sample: predicted label set and gold root-to-leaf path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub pred: BTreeSet<LabelId>,
    pub gold: BTreeSet<LabelId>,
}

impl Sample {
    pub fn new(pred: impl IntoIterator<Item = LabelId>, gold: impl IntoIterator<Item = LabelId>) -> Self {
        Sample {
            pred: pred.into_iter().collect(),
            gold: gold.into_iter().collect(),
        }
    }
}

fn validate_gold(tax: &Taxonomy, gold: &BTreeSet<LabelId>) -> Result<()> {
    if let Some(&bad) = gold.iter().find(|&&g| g >= tax.len()) {
        return Err(Error::UnknownLabel(format!("id {bad}")));
    }
    let mut path: Vec<LabelId> = gold.iter().copied().collect();
    path.sort_by_key(|&g| tax.level(g));
    tax.check_path(&path).map_err(|_| {
        Error::InvalidGold(format!(
            "gold set {{{}}} is not a single full root-to-leaf path",
            tax.path_names(&path).join(", ")
        ))
    })
}

/// Some root-to-leaf path through `v` lies entirely inside `set`.
fn full_path_through(tax: &Taxonomy, v: LabelId, set: &BTreeSet<LabelId>) -> bool {
    fn descends(tax: &Taxonomy, v: LabelId, set: &BTreeSet<LabelId>) -> bool {
        let kids = tax.children(v);
        kids.is_empty() || kids.iter().any(|c| set.contains(c) && descends(tax, *c, set))
    }
    let mut cur = tax.parent(v);
    while let Some(p) = cur {
        if !set.contains(&p) {
            return false;
        }
        cur = tax.parent(p);
    }
    descends(tax, v, set)
}

fn tally(kept: &BTreeSet<LabelId>, gold: &BTreeSet<LabelId>, out: &mut [Counts]) {
    for &v in kept {
        if gold.contains(&v) {
            out[v].tp += 1;
        } else {
            out[v].fp += 1;
        }
    }
    for &g in gold.difference(kept) {
        out[g].fn_ += 1;
    }
}

pub fn evaluate(samples: &[Sample], tax: &Taxonomy) -> Result<MetricsReport> {
    let m = tax.len();
    let mut standard = vec![Counts::default(); m];
    let mut constrained = vec![Counts::default(); m];
    let mut path = vec![Counts::default(); m];

    for s in samples {
        validate_gold(tax, &s.gold)?;
        if let Some(&bad) = s.pred.iter().find(|&&p| p >= m) {
            return Err(Error::UnknownLabel(format!("id {bad}")));
        }
        tally(&s.pred, &s.gold, &mut standard);

        let c_kept: BTreeSet<LabelId> = s
            .pred
            .iter()
            .copied()
            .filter(|&v| {
                tax.ancestors(v)
                    .map(|anc| anc.iter().all(|a| s.pred.contains(a)))
                    .unwrap_or(false)
            })
            .collect();
        tally(&c_kept, &s.gold, &mut constrained);

        let gold_covered = s.gold.is_subset(&s.pred);
        let p_kept: BTreeSet<LabelId> = s
            .pred
            .iter()
            .copied()
            .filter(|&v| {
                if s.gold.contains(&v) {
                    gold_covered
                } else {
                    full_path_through(tax, v, &s.pred)
                }
            })
            .collect();
        tally(&p_kept, &s.gold, &mut path);
    }

    let total = |c: &[Counts]| {
        let mut t = Counts::default();
        for x in c {
            t.add(*x);
        }
        t
    };
    let macro_f1 = |c: &[Counts]| {
        if c.is_empty() {
            0.0
        } else {
            c.iter().map(Counts::f1).sum::<f64>() / c.len() as f64
        }
    };
    let totals = VariantTotals {
        standard: total(&standard),
        constrained: total(&constrained),
        path: total(&path),
    };

    Ok(MetricsReport {
        samples: samples.len(),
        micro_f1: totals.standard.f1(),
        macro_f1: macro_f1(&standard),
        c_micro_f1: totals.constrained.f1(),
        c_macro_f1: macro_f1(&constrained),
        p_micro_f1: totals.path.f1(),
        p_macro_f1: macro_f1(&path),
        totals,
        per_label: tax
            .nodes()
            .iter()
            .map(|n| LabelCounts {
                label: n.name.clone(),
                standard: standard[n.id],
                constrained: constrained[n.id],
                path: path[n.id],
            })
            .collect(),
    })
}
