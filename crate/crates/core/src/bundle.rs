//! Checkpoint bundles: base weights, per-expert weights, and per-expert
//! optimizer second moments, assembled from containers and validated.
//!
//! Second moments live in a sibling container per expert. A weight named
//! `w` has its moment stored either as `w.exp_avg_sq` (full tensor) or as
//! the pair `w.exp_avg_sq.row` / `w.exp_avg_sq.col` (rank-1 factors); the
//! kind is detected per tensor on load.

use std::collections::BTreeMap;
use std::path::Path;

use crate::container::read_container;
use crate::error::{Error, Result};
use crate::factor::FactoredSecondMoment;
use crate::tensor::NamedTensor;

pub const MOMENT_SUFFIX: &str = ".exp_avg_sq";
pub const ROW_SUFFIX: &str = ".exp_avg_sq.row";
pub const COL_SUFFIX: &str = ".exp_avg_sq.col";

/// A second-moment entry for one weight tensor: either the full tensor or
/// its row/column-sum factors.
#[derive(Debug, Clone)]
pub enum SecondMoment {
    Full(NamedTensor),
    Factored(FactoredSecondMoment),
}

impl SecondMoment {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            SecondMoment::Full(t) => t.shape().to_vec(),
            SecondMoment::Factored(f) => vec![f.rows(), f.cols()],
        }
    }

    pub fn is_factored(&self) -> bool {
        matches!(self, SecondMoment::Factored(_))
    }

    /// Dense f64 values; factored entries are reconstructed on the fly so the
    /// full matrix is only ever materialized per tensor, never per model.
    pub fn values_f64(&self) -> Vec<f64> {
        match self {
            SecondMoment::Full(t) => t.to_f64_vec(),
            SecondMoment::Factored(f) => f.reconstruct_values(),
        }
    }
}

/// One expert checkpoint: id, weights, and optionally its second moments.
#[derive(Debug, Clone)]
pub struct ExpertEntry {
    pub id: String,
    pub weights: BTreeMap<String, NamedTensor>,
    pub moments: Option<BTreeMap<String, SecondMoment>>,
}

/// Base weights plus the experts fine-tuned from them.
#[derive(Debug, Clone)]
pub struct CheckpointBundle {
    pub base: BTreeMap<String, NamedTensor>,
    pub experts: Vec<ExpertEntry>,
}

impl CheckpointBundle {
    pub fn tensor_names(&self) -> impl Iterator<Item = &String> {
        self.base.keys()
    }

    pub fn total_params(&self) -> usize {
        self.base.values().map(|t| t.numel()).sum()
    }

    pub fn expert(&self, id: &str) -> Option<&ExpertEntry> {
        self.experts.iter().find(|e| e.id == id)
    }

    /// Expert indices in sorted-id order; every merge accumulates in this
    /// order so reordering the input list cannot change a single bit.
    pub fn sorted_expert_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.experts.len()).collect();
        order.sort_by(|&a, &b| self.experts[a].id.cmp(&self.experts[b].id));
        order
    }

    /// Check every invariant: equal name sets, matching shapes, nonnegative
    /// and finite second moments, factored shapes consistent with weights.
    pub fn validate(&self) -> Result<()> {
        for (name, t) in &self.base {
            if let Some(index) = t.first_non_finite() {
                return Err(Error::NonFinite {
                    name: name.clone(),
                    index,
                });
            }
        }
        for expert in &self.experts {
            validate_name_sets(
                &format!("expert '{}'", expert.id),
                &self.base,
                &expert.weights,
            )?;
            for (name, t) in &expert.weights {
                let base = &self.base[name];
                if t.shape() != base.shape() {
                    return Err(Error::ShapeMismatch {
                        name: name.clone(),
                        expected: base.shape().to_vec(),
                        got: t.shape().to_vec(),
                    });
                }
                if let Some(index) = t.first_non_finite() {
                    return Err(Error::NonFinite {
                        name: name.clone(),
                        index,
                    });
                }
            }
            if let Some(moments) = &expert.moments {
                let context = format!("moments of expert '{}'", expert.id);
                for name in self.base.keys() {
                    if !moments.contains_key(name) {
                        return Err(Error::MissingTensor {
                            context,
                            name: name.clone(),
                        });
                    }
                }
                for (name, moment) in moments {
                    let Some(weight) = self.base.get(name) else {
                        return Err(Error::NameSetMismatch {
                            context,
                            detail: format!("moment for unknown weight '{name}'"),
                        });
                    };
                    if moment.shape() != weight.shape() {
                        return Err(Error::ShapeMismatch {
                            name: name.clone(),
                            expected: weight.shape().to_vec(),
                            got: moment.shape(),
                        });
                    }
                    check_nonnegative(name, moment)?;
                }
            }
        }
        Ok(())
    }
}

fn validate_name_sets(
    context: &str,
    base: &BTreeMap<String, NamedTensor>,
    other: &BTreeMap<String, NamedTensor>,
) -> Result<()> {
    for name in base.keys() {
        if !other.contains_key(name) {
            return Err(Error::NameSetMismatch {
                context: context.to_string(),
                detail: format!("missing tensor '{name}'"),
            });
        }
    }
    for name in other.keys() {
        if !base.contains_key(name) {
            return Err(Error::NameSetMismatch {
                context: context.to_string(),
                detail: format!("unexpected tensor '{name}'"),
            });
        }
    }
    Ok(())
}

fn check_nonnegative(name: &str, moment: &SecondMoment) -> Result<()> {
    let check = |t: &NamedTensor| -> Result<()> {
        for i in 0..t.numel() {
            let v = t.get_f64(i);
            if !v.is_finite() || v < 0.0 {
                return Err(Error::NegativeMoment {
                    name: name.to_string(),
                    index: i,
                });
            }
        }
        Ok(())
    };
    match moment {
        SecondMoment::Full(t) => check(t),
        SecondMoment::Factored(f) => {
            check(f.row())?;
            check(f.col())
        }
    }
}

/// Group the raw tensors of a moments container into per-weight entries,
/// detecting full vs factored storage and rejecting mixed or dangling parts.
pub fn group_moments(
    expert_id: &str,
    raw: &BTreeMap<String, NamedTensor>,
) -> Result<BTreeMap<String, SecondMoment>> {
    let context = format!("moments of expert '{expert_id}'");
    let mut out: BTreeMap<String, SecondMoment> = BTreeMap::new();
    let mut rows: BTreeMap<String, NamedTensor> = BTreeMap::new();
    let mut cols: BTreeMap<String, NamedTensor> = BTreeMap::new();
    for (name, t) in raw {
        if let Some(weight) = name.strip_suffix(ROW_SUFFIX) {
            rows.insert(weight.to_string(), t.clone());
        } else if let Some(weight) = name.strip_suffix(COL_SUFFIX) {
            cols.insert(weight.to_string(), t.clone());
        } else if let Some(weight) = name.strip_suffix(MOMENT_SUFFIX) {
            out.insert(weight.to_string(), SecondMoment::Full(t.clone()));
        } else {
            return Err(Error::NameSetMismatch {
                context,
                detail: format!("tensor '{name}' does not follow the moment naming convention"),
            });
        }
    }
    for (weight, row) in rows {
        if out.contains_key(&weight) {
            return Err(Error::MixedMomentKinds { name: weight });
        }
        let Some(col) = cols.remove(&weight) else {
            return Err(Error::MissingTensor {
                context,
                name: format!("{weight}{COL_SUFFIX}"),
            });
        };
        let factored = FactoredSecondMoment::from_tensors(&weight, row, col)?;
        out.insert(weight, SecondMoment::Factored(factored));
    }
    if let Some(weight) = cols.keys().next() {
        if out.get(weight).map(SecondMoment::is_factored) == Some(false) {
            return Err(Error::MixedMomentKinds {
                name: weight.clone(),
            });
        }
        return Err(Error::MissingTensor {
            context,
            name: format!("{weight}{ROW_SUFFIX}"),
        });
    }
    Ok(out)
}

/// Load base weights, expert weights, and second moments from containers on
/// disk into a validated bundle. `moment_paths` pairs up with `expert_paths`
/// one to one (`None` entries skip the moments for that expert); an empty
/// slice loads no moments at all.
pub fn load_bundle(
    base_path: impl AsRef<Path>,
    expert_paths: &[(String, std::path::PathBuf)],
    moment_paths: &[Option<std::path::PathBuf>],
) -> Result<CheckpointBundle> {
    if !moment_paths.is_empty() && moment_paths.len() != expert_paths.len() {
        return Err(Error::Recipe(format!(
            "{} experts but {} moment entries",
            expert_paths.len(),
            moment_paths.len()
        )));
    }
    let base = read_container(base_path)?.tensors;
    let mut experts = Vec::with_capacity(expert_paths.len());
    for (i, (id, path)) in expert_paths.iter().enumerate() {
        let weights = read_container(path)?.tensors;
        let moments = match moment_paths.get(i).and_then(|p| p.as_ref()) {
            Some(mp) => {
                let raw = read_container(mp)?.tensors;
                Some(group_moments(id, &raw)?)
            }
            None => None,
        };
        experts.push(ExpertEntry {
            id: id.clone(),
            weights,
            moments,
        });
    }
    let ids: std::collections::BTreeSet<&String> = experts.iter().map(|e| &e.id).collect();
    if ids.len() != experts.len() {
        return Err(Error::Recipe("duplicate expert ids".into()));
    }
    let bundle = CheckpointBundle { base, experts };
    bundle.validate()?;
    Ok(bundle)
}
