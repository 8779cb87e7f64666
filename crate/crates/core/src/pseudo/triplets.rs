use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How ordering labels are derived from pseudo labels.
///
/// `Corrected`: label 0 when the first candidate shares the anchor's class
/// and the second does not; label 1 for the mirrored case.
/// `Literal`: label 0 as above, label 1 when both candidates share the
/// anchor's class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletRule {
    #[default]
    Corrected,
    Literal,
}

/// `(anchor, first, second)` sample indices plus the ordering label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub first: usize,
    pub second: usize,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletSet {
    pub triplets: Vec<Triplet>,
    pub rule: TripletRule,
}

impl TripletSet {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.triplets.iter().map(|t| t.label).collect()
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "a,b,c,label")?;
        for t in &self.triplets {
            writeln!(w, "{},{},{},{}", t.anchor, t.first, t.second, t.label)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(&mut f).map_err(|e| Error::io(path, e))
    }
}

/// Whether `t` is a valid training triplet under `rule` and `labels`.
pub fn satisfies_rule(t: &Triplet, labels: &[usize], rule: TripletRule) -> bool {
    let (a, b, c) = (labels[t.anchor], labels[t.first], labels[t.second]);
    let distinct = t.anchor != t.first && t.anchor != t.second && t.first != t.second;
    distinct
        && match (t.label, rule) {
            (0, _) => b == a && c != a,
            (1, TripletRule::Corrected) => c == a && b != a,
            (1, TripletRule::Literal) => b == a && c == a,
            _ => false,
        }
}

/// Draws `count` triplets from the `selected` samples, alternating labels 0
/// and 1. `pseudo_labels` is indexed by sample index.
pub fn construct_triplets<R: Rng>(
    selected: &[usize],
    pseudo_labels: &[usize],
    count: usize,
    rule: TripletRule,
    rng: &mut R,
) -> Result<TripletSet> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in selected {
        let y = *pseudo_labels
            .get(i)
            .ok_or_else(|| Error::invalid("construct_triplets", format!("sample {i} has no pseudo label")))?;
        by_class.entry(y).or_default().push(i);
    }
    let histogram: Vec<(usize, usize)> = by_class.iter().map(|(&k, v)| (k, v.len())).collect();
    let infeasible = || Error::TripletInfeasible {
        histogram: histogram.clone(),
    };

    let pool = |min: usize| -> Vec<usize> {
        by_class
            .values()
            .filter(|v| v.len() >= min)
            .flatten()
            .copied()
            .collect()
    };
    let pair_anchors = pool(2);
    let triple_anchors = pool(3);
    if by_class.len() < 2 || pair_anchors.is_empty() {
        return Err(infeasible());
    }
    if rule == TripletRule::Literal && count > 1 && triple_anchors.is_empty() {
        return Err(infeasible());
    }

    let mut triplets = Vec::with_capacity(count);
    for i in 0..count {
        let label = (i % 2) as u8;
        let anchors = if label == 1 && rule == TripletRule::Literal {
            &triple_anchors
        } else {
            &pair_anchors
        };
        let a = *anchors.choose(rng).expect("non-empty anchor pool");
        let class = pseudo_labels[a];
        let same = &by_class[&class];
        let mut mate = || loop {
            let j = *same.choose(rng).expect("class has members");
            if j != a {
                break j;
            }
        };
        let t = match (label, rule) {
            (1, TripletRule::Literal) => {
                let b = mate();
                let c = loop {
                    let j = mate();
                    if j != b {
                        break j;
                    }
                };
                Triplet {
                    anchor: a,
                    first: b,
                    second: c,
                    label,
                }
            }
            _ => {
                let pos = mate();
                let others: Vec<usize> = by_class
                    .iter()
                    .filter(|(&k, _)| k != class)
                    .flat_map(|(_, v)| v.iter().copied())
                    .collect();
                let neg = *others.choose(rng).expect("another class exists");
                if label == 0 {
                    Triplet {
                        anchor: a,
                        first: pos,
                        second: neg,
                        label,
                    }
                } else {
                    Triplet {
                        anchor: a,
                        first: neg,
                        second: pos,
                        label,
                    }
                }
            }
        };
        triplets.push(t);
    }
    Ok(TripletSet { triplets, rule })
}
