//! Which loss terms each sample activates.
//!
//! A decision term is keyed by the clients contributing real embeddings and
//! the clients contributing reconstructed ones; the top model sees the mean
//! of all of them. Keys are deduplicated per sample.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::VerticalDataset;
use crate::error::{Error, Result};

/// Small set of client indices (at most 64 clients).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub struct ClientSet(u64);

impl ClientSet {
    pub const EMPTY: ClientSet = ClientSet(0);

    pub fn all(k: usize) -> Self {
        assert!(k <= 64, "at most 64 clients");
        if k == 64 {
            ClientSet(u64::MAX)
        } else {
            ClientSet((1u64 << k) - 1)
        }
    }

    pub fn single(i: usize) -> Self {
        ClientSet(1u64 << i)
    }

    pub fn from_clients<I: IntoIterator<Item = usize>>(clients: I) -> Self {
        clients.into_iter().fold(Self::EMPTY, |s, i| s.with(i))
    }

    pub fn with(self, i: usize) -> Self {
        ClientSet(self.0 | (1u64 << i))
    }

    pub fn without(self, i: usize) -> Self {
        ClientSet(self.0 & !(1u64 << i))
    }

    pub fn minus(self, other: ClientSet) -> Self {
        ClientSet(self.0 & !other.0)
    }

    pub fn contains(self, i: usize) -> bool {
        i < 64 && self.0 & (1u64 << i) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..64).filter(move |&i| self.contains(i))
    }
}

impl fmt::Display for ClientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.iter().map(|i| i.to_string()).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TermKind {
    /// Cross entropy of `h(mean(E_real ∪ Ẽ_recon))`.
    Decision { real: ClientSet, recon: ClientSet },
    /// Cross entropy of `h(f_i(merge(x_i, XCom_i(f_i(x_i)))))` for a partial client.
    SelfInput { client: usize },
    /// `MSE(h(Ẽ_i), h(E_i))` on aligned samples.
    Align1 { client: usize },
    /// `MSE(h(E_i), h(mean_j E_j))` on aligned samples.
    Align2 { client: usize },
}

impl fmt::Display for TermKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TermKind::Decision { real, recon } if recon.is_empty() => write!(f, "dec{real}"),
            TermKind::Decision { real, recon } => write!(f, "dec{real}+rec{recon}"),
            TermKind::SelfInput { client } => write!(f, "self{client}"),
            TermKind::Align1 { client } => write!(f, "align1_{client}"),
            TermKind::Align2 { client } => write!(f, "align2_{client}"),
        }
    }
}

/// A loss term with the batch rows it averages over.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub kind: TermKind,
    pub rows: Vec<usize>,
    pub weight: f64,
}

/// Clients holding full features for `sample`, as a set.
pub fn full_set(batch: &VerticalDataset, sample: usize) -> ClientSet {
    ClientSet::from_clients(batch.full_clients(sample))
}

fn require_full(batch: &VerticalDataset, sample: usize) -> Result<ClientSet> {
    let m = full_set(batch, sample);
    if m.is_empty() {
        return Err(Error::config(format!(
            "sample {sample} has no client with full features; the decision loss is undefined"
        )));
    }
    Ok(m)
}

fn decision(real: ClientSet, recon: ClientSet) -> TermKind {
    TermKind::Decision { real, recon }
}

/// Two-client rules. Aligned: both singles, the joint average, and each
/// client paired with the other's reconstruction. Non-aligned with one full
/// client: that client alone and paired with the other's reconstruction.
/// Non-aligned with both full: the singles and the joint average.
pub fn activation_2client(batch: &VerticalDataset) -> Result<Vec<BTreeSet<TermKind>>> {
    if batch.k() != 2 {
        return Err(Error::config(format!(
            "two-client loss needs k = 2, got {}",
            batch.k()
        )));
    }
    let (a, b) = (ClientSet::single(0), ClientSet::single(1));
    let both = ClientSet::all(2);
    (0..batch.n())
        .map(|s| {
            let full = require_full(batch, s)?;
            let terms: Vec<TermKind> = if batch.aligned[s] {
                vec![
                    decision(a, ClientSet::EMPTY),
                    decision(b, ClientSet::EMPTY),
                    decision(both, ClientSet::EMPTY),
                    decision(a, b),
                    decision(b, a),
                ]
            } else if full == both {
                vec![
                    decision(a, ClientSet::EMPTY),
                    decision(b, ClientSet::EMPTY),
                    decision(both, ClientSet::EMPTY),
                ]
            } else {
                let other = both.minus(full);
                vec![decision(full, ClientSet::EMPTY), decision(full, other)]
            };
            Ok(terms.into_iter().collect())
        })
        .collect()
}

/// `k`-client rules with `M` the full clients of a sample: every single in
/// `M`, the average over `M`, and reconstruction terms. Aligned samples
/// reconstruct each client in turn from the other `k − 1`; non-aligned
/// samples reconstruct all partial clients at once from `M`.
pub fn activation_k(batch: &VerticalDataset) -> Result<Vec<BTreeSet<TermKind>>> {
    let k = batch.k();
    let all = ClientSet::all(k);
    (0..batch.n())
        .map(|s| {
            let full = require_full(batch, s)?;
            let mut terms: BTreeSet<TermKind> = full
                .iter()
                .map(|i| decision(ClientSet::single(i), ClientSet::EMPTY))
                .collect();
            terms.insert(decision(full, ClientSet::EMPTY));
            if batch.aligned[s] {
                if k > 1 {
                    terms.extend((0..k).map(|i| decision(all.without(i), ClientSet::single(i))));
                }
            } else if full != all {
                terms.insert(decision(full, all.minus(full)));
            }
            Ok(terms)
        })
        .collect()
}

/// Groups per-sample activations into terms with their row lists.
pub fn group(per_sample: &[BTreeSet<TermKind>], weight: impl Fn(&TermKind) -> f64) -> Vec<Term> {
    let mut rows: BTreeMap<TermKind, Vec<usize>> = BTreeMap::new();
    for (s, kinds) in per_sample.iter().enumerate() {
        for kind in kinds {
            rows.entry(*kind).or_default().push(s);
        }
    }
    rows.into_iter()
        .map(|(kind, rows)| Term {
            weight: weight(&kind),
            kind,
            rows,
        })
        .collect()
}

fn aligned_rows(batch: &VerticalDataset) -> Vec<usize> {
    (0..batch.n()).filter(|&s| batch.aligned[s]).collect()
}

pub fn align1_terms(batch: &VerticalDataset, weight: f64) -> Vec<Term> {
    let rows = aligned_rows(batch);
    if batch.k() < 2 || rows.is_empty() {
        return Vec::new();
    }
    (0..batch.k())
        .map(|client| Term {
            kind: TermKind::Align1 { client },
            rows: rows.clone(),
            weight,
        })
        .collect()
}

pub fn align2_terms(batch: &VerticalDataset, weight: f64) -> Vec<Term> {
    let rows = aligned_rows(batch);
    if rows.is_empty() {
        return Vec::new();
    }
    (0..batch.k())
        .map(|client| Term {
            kind: TermKind::Align2 { client },
            rows: rows.clone(),
            weight,
        })
        .collect()
}

/// One term per client over the samples where that client has masked features.
pub fn self_input_terms(batch: &VerticalDataset) -> Vec<Term> {
    (0..batch.k())
        .filter_map(|client| {
            let rows: Vec<usize> = (0..batch.n())
                .filter(|&s| !batch.is_full(client, s))
                .collect();
            (!rows.is_empty()).then_some(Term {
                kind: TermKind::SelfInput { client },
                rows,
                weight: 1.0,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{apply_alignment, apply_missing, AlignmentPlan};
    use crate::numkit::Matrix;

    /// Four samples: aligned, owned by 0, owned by 1, owned by 0.
    fn batch(k: usize, missing: f64) -> VerticalDataset {
        let blocks = (0..k).map(|_| Matrix::filled(4, 4, 1.0)).collect();
        let data = VerticalDataset::aligned_from_blocks(blocks, vec![0, 1, 0, 1], 2).unwrap();
        let plan = AlignmentPlan {
            aligned: vec![true, false, false, false],
            owner: vec![None, Some(0), Some(1), Some(0)],
        };
        apply_missing(apply_alignment(data, &plan).unwrap(), missing, 1).unwrap()
    }

    #[test]
    fn client_set_basics() {
        let s = ClientSet::from_clients([0, 2]);
        assert_eq!(s.len(), 2);
        assert!(s.contains(2) && !s.contains(1));
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(ClientSet::all(3).minus(s), ClientSet::single(1));
        assert_eq!(s.to_string(), "{0,2}");
    }

    #[test]
    fn two_client_counts_per_case() {
        let act = activation_2client(&batch(2, 0.5)).unwrap();
        assert_eq!(
            act.iter().map(BTreeSet::len).collect::<Vec<_>>(),
            vec![5, 2, 2, 2]
        );
        let a = ClientSet::single(0);
        let b = ClientSet::single(1);
        assert!(act[1].contains(&decision(a, b)));
        assert!(act[2].contains(&decision(b, a)));
        assert!(act[2].contains(&decision(b, ClientSet::EMPTY)));
    }

    #[test]
    fn both_full_non_aligned_gets_three_terms() {
        let act = activation_2client(&batch(2, 0.0)).unwrap();
        assert_eq!(act[1].len(), 3);
        assert!(act[1]
            .iter()
            .all(|t| matches!(t, TermKind::Decision { recon, .. } if recon.is_empty())));
    }

    #[test]
    fn k_rules_reduce_to_two_client_rules() {
        for missing in [0.0, 0.5, 1.0] {
            let b = batch(2, missing);
            assert_eq!(activation_k(&b).unwrap(), activation_2client(&b).unwrap());
        }
    }

    #[test]
    fn k_client_aligned_and_partial_terms() {
        let act = activation_k(&batch(3, 1.0)).unwrap();
        // 3 singles + joint + 3 leave-one-out reconstructions
        assert_eq!(act[0].len(), 7);
        // single owner: single (deduplicated with the joint) + one reconstruction
        assert_eq!(act[1].len(), 2);
        assert!(act[1].contains(&decision(
            ClientSet::single(0),
            ClientSet::from_clients([1, 2])
        )));
    }

    #[test]
    fn two_client_rules_reject_other_k() {
        assert!(matches!(
            activation_2client(&batch(3, 0.5)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn no_full_client_is_a_config_error() {
        let mut b = batch(2, 0.5);
        b.masks[0][4] = true;
        assert!(matches!(activation_k(&b), Err(Error::Config(_))));
    }

    #[test]
    fn grouping_collects_rows() {
        let terms = group(&activation_2client(&batch(2, 0.5)).unwrap(), |_| 1.0);
        let single_a = terms
            .iter()
            .find(|t| t.kind == decision(ClientSet::single(0), ClientSet::EMPTY))
            .unwrap();
        assert_eq!(single_a.rows, vec![0, 1, 3]);
        assert_eq!(terms.iter().map(|t| t.rows.len()).sum::<usize>(), 11);
    }
}
