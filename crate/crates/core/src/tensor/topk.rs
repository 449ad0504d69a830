//! Global top-k selection across a set of named tensors.
//!
//! Ties at the threshold are broken by (tensor name lexical order, then flat
//! index ascending) so that exactly k elements are selected for any input,
//! including all-equal tensors, and reruns produce identical masks.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::NamedTensor;

/// Threshold and tie metadata for a global top-k selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopKResult {
    pub k: usize,
    /// k-th largest value over the concatenation of all tensors;
    /// +inf when k == 0.
    pub threshold: f64,
    /// Number of elements strictly above the threshold.
    pub strictly_above: usize,
}

fn ranked_entries(tensors: &[&NamedTensor]) -> Vec<(f64, usize, usize)> {
    // (value, tensor rank in name order, flat index)
    let mut order: Vec<usize> = (0..tensors.len()).collect();
    order.sort_by(|&a, &b| tensors[a].name().cmp(tensors[b].name()));
    let mut entries = Vec::with_capacity(tensors.iter().map(|t| t.numel()).sum());
    for (rank, &ti) in order.iter().enumerate() {
        let t = tensors[ti];
        for i in 0..t.numel() {
            entries.push((t.get_f64(i), rank, i));
        }
    }
    // Descending by value, ties by (name rank, flat index) ascending.
    entries.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    entries
}

/// The k-th largest value over all elements of `tensors` plus tie metadata.
pub fn global_topk_threshold(tensors: &[&NamedTensor], k: usize) -> Result<TopKResult> {
    let total: usize = tensors.iter().map(|t| t.numel()).sum();
    if k > total {
        return Err(Error::KOutOfRange { k, total });
    }
    if k == 0 {
        return Ok(TopKResult {
            k,
            threshold: f64::INFINITY,
            strictly_above: 0,
        });
    }
    let entries = ranked_entries(tensors);
    let threshold = entries[k - 1].0;
    let strictly_above = entries.iter().take_while(|e| e.0 > threshold).count();
    Ok(TopKResult {
        k,
        threshold,
        strictly_above,
    })
}

/// Select exactly `k` elements globally, returning per-tensor keep flags in
/// tensor name order alongside the threshold metadata.
pub fn select_global_topk(
    tensors: &[&NamedTensor],
    k: usize,
) -> Result<(TopKResult, BTreeMap<String, Vec<bool>>)> {
    let total: usize = tensors.iter().map(|t| t.numel()).sum();
    if k > total {
        return Err(Error::KOutOfRange { k, total });
    }
    let mut names: Vec<&str> = tensors.iter().map(|t| t.name()).collect();
    names.sort_unstable();
    let mut masks: BTreeMap<String, Vec<bool>> = tensors
        .iter()
        .map(|t| (t.name().to_string(), vec![false; t.numel()]))
        .collect();
    if k == 0 {
        return Ok((
            TopKResult {
                k,
                threshold: f64::INFINITY,
                strictly_above: 0,
            },
            masks,
        ));
    }
    let entries = ranked_entries(tensors);
    let threshold = entries[k - 1].0;
    let strictly_above = entries.iter().take_while(|e| e.0 > threshold).count();
    for &(_, rank, idx) in entries.iter().take(k) {
        masks.get_mut(names[rank]).expect("rank maps to a name")[idx] = true;
    }
    Ok((
        TopKResult {
            k,
            threshold,
            strictly_above,
        },
        masks,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(name: &str, data: Vec<f64>) -> NamedTensor {
        let n = data.len();
        NamedTensor::from_f64(name, vec![n], data).unwrap()
    }

    #[test]
    fn threshold_over_two_tensors() {
        // sorted descending: 4, 3, 2, 1 -> k=2 keeps {4, 3}
        let a = t("a", vec![3.0, 1.0]);
        let b = t("b", vec![2.0, 4.0]);
        let r = global_topk_threshold(&[&a, &b], 2).unwrap();
        assert_eq!(r.threshold, 3.0);
        assert_eq!(r.strictly_above, 1);
    }

    #[test]
    fn full_k_keeps_everything() {
        let a = t("a", vec![3.0, 1.0]);
        let b = t("b", vec![2.0, 4.0]);
        let r = global_topk_threshold(&[&a, &b], 4).unwrap();
        assert_eq!(r.threshold, 1.0);
        let (_, masks) = select_global_topk(&[&a, &b], 4).unwrap();
        assert!(masks.values().all(|m| m.iter().all(|&x| x)));
    }

    #[test]
    fn zero_k_selects_nothing() {
        let a = t("a", vec![3.0, 1.0]);
        let (r, masks) = select_global_topk(&[&a], 0).unwrap();
        assert_eq!(r.strictly_above, 0);
        assert!(masks["a"].iter().all(|&x| !x));
    }

    #[test]
    fn k_beyond_total_is_rejected() {
        let a = t("a", vec![1.0]);
        assert!(matches!(
            global_topk_threshold(&[&a], 2),
            Err(Error::KOutOfRange { k: 2, total: 1 })
        ));
    }

    #[test]
    fn ties_break_by_name_then_index() {
        let a = t("a", vec![5.0, 5.0]);
        let b = t("b", vec![5.0, 5.0]);
        let (_, masks) = select_global_topk(&[&b, &a], 3).unwrap();
        assert_eq!(masks["a"], vec![true, true]);
        assert_eq!(masks["b"], vec![true, false]);
    }

    proptest! {
        #[test]
        fn exactly_k_selected_for_any_input(
            values in proptest::collection::vec(-1.0f64..1.0, 1..64),
            equal in proptest::bool::ANY,
            k_frac in 0.0f64..1.0,
        ) {
            let values = if equal { vec![0.5; values.len()] } else { values };
            let mid = values.len() / 2;
            let a = t("a", values[..mid].to_vec());
            let b = t("b", values[mid..].to_vec());
            let k = (k_frac * values.len() as f64).floor() as usize;
            let (_, masks) = select_global_topk(&[&a, &b], k).unwrap();
            let kept: usize = masks.values().map(|m| m.iter().filter(|&&x| x).count()).sum();
            prop_assert_eq!(kept, k);
        }
    }
}
