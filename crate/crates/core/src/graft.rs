//! Saliency scoring, global top-k masking, and grafting of task vectors.
//!
//! A task vector is the elementwise difference between an expert and the
//! shared base. Each coordinate gets a saliency score: delta^2 * v with the
//! optimizer second moment v as curvature proxy, or plain |delta| for the
//! magnitude baseline. A binary mask keeps the global top-k coordinates of
//! one expert, ranked across all tensors at once, so per-layer density
//! emerges from the scores rather than being imposed. Grafting reverts every
//! non-selected coordinate back to its base value.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::bundle::SecondMoment;
use crate::error::{Error, Result};
use crate::tensor::{NamedTensor, select_global_topk};

pub const MASK_SUFFIX: &str = ".mask";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaliencyMethod {
    Ffg,
    Magnitude,
}

impl SaliencyMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SaliencyMethod::Ffg => "ffg",
            SaliencyMethod::Magnitude => "magnitude",
        }
    }
}

/// Binary masks over every parameter tensor of one expert, plus the density
/// they realize. Tensors matched by an exclusion pattern are never ranked;
/// they keep their fine-tuned values (all-ones mask) and do not count toward
/// the kept budget.
#[derive(Debug, Clone)]
pub struct SaliencyMaskSet {
    pub expert_id: String,
    pub method: SaliencyMethod,
    pub requested_density: f64,
    /// Kept coordinates among ranked tensors; equals
    /// round(density * ranked element count) exactly.
    pub realized_kept_count: usize,
    /// Per-tensor masks with values in {0, 1}, shaped like the weights.
    pub masks: BTreeMap<String, NamedTensor>,
    pub excluded: BTreeSet<String>,
}

impl SaliencyMaskSet {
    pub fn mask(&self, name: &str) -> Option<&NamedTensor> {
        self.masks.get(name)
    }

    /// Kept coordinates over all masks, excluded tensors included.
    pub fn total_kept(&self) -> usize {
        self.masks.values().map(|m| m.count_nonzero()).sum()
    }

    pub fn total_elements(&self) -> usize {
        self.masks.values().map(|m| m.numel()).sum()
    }

    /// Mask tensors renamed for container export (`<weight>.mask`).
    pub fn to_container_tensors(&self) -> BTreeMap<String, NamedTensor> {
        self.masks
            .iter()
            .map(|(name, m)| {
                let out_name = format!("{name}{MASK_SUFFIX}");
                (out_name.clone(), m.clone().with_name(out_name))
            })
            .collect()
    }

    /// Sidecar document describing this mask set.
    pub fn sidecar_json(&self) -> serde_json::Value {
        serde_json::json!({
            "expert_id": self.expert_id,
            "method": self.method.as_str(),
            "requested_density": self.requested_density,
            "realized_kept_count": self.realized_kept_count,
            "excluded": self.excluded.iter().collect::<Vec<_>>(),
        })
    }

    /// Rebuild from exported container tensors plus the sidecar document.
    pub fn from_container_tensors(
        tensors: &BTreeMap<String, NamedTensor>,
        sidecar: &serde_json::Value,
    ) -> Result<Self> {
        let mut masks = BTreeMap::new();
        for (name, t) in tensors {
            let weight = name.strip_suffix(MASK_SUFFIX).ok_or_else(|| {
                Error::Format(format!("'{name}' does not carry the {MASK_SUFFIX} suffix"))
            })?;
            check_binary(t)?;
            masks.insert(weight.to_string(), t.clone().with_name(weight));
        }
        let get_str = |key: &str| {
            sidecar
                .get(key)
                .and_then(serde_json::Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| Error::Format(format!("mask sidecar missing '{key}'")))
        };
        let method = match get_str("method")?.as_str() {
            "ffg" => SaliencyMethod::Ffg,
            "magnitude" => SaliencyMethod::Magnitude,
            other => return Err(Error::Format(format!("unknown saliency method '{other}'"))),
        };
        let excluded = sidecar
            .get("excluded")
            .and_then(serde_json::Value::as_array)
            .map(|a| {
                a.iter()
                    .filter_map(serde_json::Value::as_str)
                    .map(str::to_string)
                    .collect()
            })
            .unwrap_or_default();
        Ok(SaliencyMaskSet {
            expert_id: get_str("expert_id")?,
            method,
            requested_density: sidecar
                .get("requested_density")
                .and_then(serde_json::Value::as_f64)
                .ok_or_else(|| Error::Format("mask sidecar missing 'requested_density'".into()))?,
            realized_kept_count: sidecar
                .get("realized_kept_count")
                .and_then(serde_json::Value::as_u64)
                .ok_or_else(|| Error::Format("mask sidecar missing 'realized_kept_count'".into()))?
                as usize,
            masks,
            excluded,
        })
    }
}

fn check_binary(mask: &NamedTensor) -> Result<()> {
    for i in 0..mask.numel() {
        let v = mask.get_f64(i);
        if v != 0.0 && v != 1.0 {
            return Err(Error::Domain {
                name: mask.name().to_string(),
                index: i,
                reason: format!("mask value {v} is not binary"),
            });
        }
    }
    Ok(())
}

fn check_aligned(
    context: &str,
    a: &BTreeMap<String, NamedTensor>,
    b: &BTreeMap<String, NamedTensor>,
) -> Result<()> {
    for name in a.keys() {
        let other = b.get(name).ok_or_else(|| Error::NameSetMismatch {
            context: context.to_string(),
            detail: format!("missing tensor '{name}'"),
        })?;
        if other.shape() != a[name].shape() {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: a[name].shape().to_vec(),
                got: other.shape().to_vec(),
            });
        }
    }
    if b.len() != a.len() {
        let extra = b.keys().find(|k| !a.contains_key(*k));
        return Err(Error::NameSetMismatch {
            context: context.to_string(),
            detail: format!("unexpected tensor {:?}", extra),
        });
    }
    Ok(())
}

/// Task vector: per-name elementwise expert - base, computed in f64.
pub fn task_vector(
    expert: &BTreeMap<String, NamedTensor>,
    base: &BTreeMap<String, NamedTensor>,
) -> Result<BTreeMap<String, NamedTensor>> {
    check_aligned("task vector", base, expert)?;
    let mut out = BTreeMap::new();
    for (name, b) in base {
        let e = &expert[name];
        let delta: Vec<f64> = e
            .iter_f64()
            .zip(b.iter_f64())
            .map(|(ev, bv)| ev - bv)
            .collect();
        out.insert(
            name.clone(),
            NamedTensor::from_f64(name.clone(), b.shape().to_vec(), delta)?,
        );
    }
    Ok(out)
}

/// FFG saliency: s[i] = delta[i]^2 * v[i]. Factored moments are reconstructed
/// per tensor on the fly so the dense matrix never exists for the whole model
/// at once.
pub fn ffg_saliency(
    delta: &BTreeMap<String, NamedTensor>,
    moments: &BTreeMap<String, SecondMoment>,
) -> Result<BTreeMap<String, NamedTensor>> {
    let mut out = BTreeMap::new();
    for (name, d) in delta {
        let moment = moments.get(name).ok_or_else(|| Error::MissingTensor {
            context: "ffg saliency".into(),
            name: name.clone(),
        })?;
        if moment.shape() != d.shape() {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: d.shape().to_vec(),
                got: moment.shape(),
            });
        }
        let v = moment.values_f64();
        if let Some(index) = v.iter().position(|&x| !x.is_finite() || x < 0.0) {
            return Err(Error::NegativeMoment {
                name: name.clone(),
                index,
            });
        }
        let s: Vec<f64> = d.iter_f64().zip(&v).map(|(dv, &vv)| dv * dv * vv).collect();
        out.insert(
            name.clone(),
            NamedTensor::from_f64(name.clone(), d.shape().to_vec(), s)?,
        );
    }
    Ok(out)
}

/// Magnitude saliency: s[i] = |delta[i]|.
pub fn magnitude_saliency(
    delta: &BTreeMap<String, NamedTensor>,
) -> Result<BTreeMap<String, NamedTensor>> {
    let mut out = BTreeMap::new();
    for (name, d) in delta {
        out.insert(name.clone(), d.abs()?);
    }
    Ok(out)
}

/// Number of kept coordinates for a density over a population, rounded
/// half up. Densities arrive as fractions; pinning an exact count rule is
/// what makes the realized-count invariant testable.
pub fn kept_count(density: f64, total: usize) -> usize {
    ((density * total as f64).round() as usize).min(total)
}

/// Build a global top-k mask set at the requested density. Tensor names
/// containing any of `exclude` as a substring are kept wholesale (all-ones
/// mask) and stay outside the ranked budget; the default is to rank
/// everything.
pub fn build_mask(
    expert_id: &str,
    method: SaliencyMethod,
    saliency: &BTreeMap<String, NamedTensor>,
    density: f64,
    exclude: &[String],
) -> Result<SaliencyMaskSet> {
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::Recipe(format!("density {density} outside [0, 1]")));
    }
    let excluded: BTreeSet<String> = saliency
        .keys()
        .filter(|name| exclude.iter().any(|pat| name.contains(pat)))
        .cloned()
        .collect();
    let ranked: Vec<&NamedTensor> = saliency
        .iter()
        .filter(|(name, _)| !excluded.contains(*name))
        .map(|(_, t)| t)
        .collect();
    let ranked_total: usize = ranked.iter().map(|t| t.numel()).sum();
    let k = kept_count(density, ranked_total);
    let (_, keep) = select_global_topk(&ranked, k)?;

    let mut masks = BTreeMap::new();
    for (name, s) in saliency {
        let values: Vec<f32> = if excluded.contains(name) {
            vec![1.0; s.numel()]
        } else {
            keep[name]
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect()
        };
        masks.insert(
            name.clone(),
            NamedTensor::from_f32(name.clone(), s.shape().to_vec(), values)?,
        );
    }
    Ok(SaliencyMaskSet {
        expert_id: expert_id.to_string(),
        method,
        requested_density: density,
        realized_kept_count: k,
        masks,
        excluded,
    })
}

/// Graft: out[i] = mask[i] ? expert[i] : base[i]. Pure selection, so kept
/// coordinates carry the expert's exact bits and reverted ones the base's.
pub fn apply_graft(
    base: &BTreeMap<String, NamedTensor>,
    expert: &BTreeMap<String, NamedTensor>,
    masks: &SaliencyMaskSet,
) -> Result<BTreeMap<String, NamedTensor>> {
    check_aligned("graft", base, expert)?;
    let mut out = BTreeMap::new();
    for (name, b) in base {
        let e = &expert[name];
        if e.dtype() != b.dtype() {
            return Err(Error::DTypeMismatch { name: name.clone() });
        }
        let mask = masks.mask(name).ok_or_else(|| Error::MissingTensor {
            context: format!("mask set of expert '{}'", masks.expert_id),
            name: name.clone(),
        })?;
        if mask.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: b.shape().to_vec(),
                got: mask.shape().to_vec(),
            });
        }
        check_binary(mask)?;
        let grafted = match (b.data(), e.data()) {
            (crate::tensor::TensorData::F32(bv), crate::tensor::TensorData::F32(ev)) => {
                let data: Vec<f32> = (0..bv.len())
                    .map(|i| if mask.get_f64(i) == 1.0 { ev[i] } else { bv[i] })
                    .collect();
                NamedTensor::from_f32(name.clone(), b.shape().to_vec(), data)?
            }
            (crate::tensor::TensorData::F64(bv), crate::tensor::TensorData::F64(ev)) => {
                let data: Vec<f64> = (0..bv.len())
                    .map(|i| if mask.get_f64(i) == 1.0 { ev[i] } else { bv[i] })
                    .collect();
                NamedTensor::from_f64(name.clone(), b.shape().to_vec(), data)?
            }
            _ => unreachable!("dtype equality checked above"),
        };
        out.insert(name.clone(), grafted);
    }
    Ok(out)
}
