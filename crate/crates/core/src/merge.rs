//! Merge rules: curvature-preconditioned aggregation of masked task vectors,
//! plus linear averaging, task arithmetic, Fisher-weighted averaging, and a
//! trim/sign-elect baseline.
//!
//! The preconditioned merge solves, per coordinate, the weighted least
//! squares problem whose solution is
//!
//! ```text
//! merged = w0 + (sum_t P_t)^-1 (sum_t P_t (m_t o delta_t)),   P_t = sqrt(v_t) + eps
//! ```
//!
//! evaluated here as the equivalent convex combination
//! `sum_t (p_t / sum p) * (m_t ? expert_t : w0)` so that the two degenerate
//! identities hold bit-exactly in f64: a single expert with a full mask comes
//! back unchanged, and coordinates no expert edits stay at the base value.
//! The denominator sums the preconditioners of all experts whether or not
//! their mask kept the coordinate; the variant that lets only editing experts
//! vote sits behind an explicit non-default flag.
//!
//! All merge arithmetic runs in f64 and results are cast to the base tensor's
//! dtype. Experts are always accumulated in sorted-id order, so reordering
//! the expert list cannot change any output bit.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{CheckpointBundle, ExpertEntry, SecondMoment, load_bundle};
use crate::error::{Error, Result};
use crate::factor::compress_bundle_moments;
use crate::graft::{
    SaliencyMaskSet, SaliencyMethod, apply_graft, build_mask, ffg_saliency, magnitude_saliency,
    task_vector,
};
use crate::tensor::NamedTensor;

/// Conventional Adam epsilon; coordinates with zero accumulated moment then
/// degrade to unweighted averaging instead of dividing by zero.
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct OtaOptions {
    /// Added to sqrt(v). The recipe layer requires epsilon > 0; the library
    /// accepts 0 so the scale-cancellation property can be exercised.
    pub epsilon: f64,
    /// Sum only the preconditioners of experts whose mask kept a coordinate.
    pub masked_denominator: bool,
}

impl Default for OtaOptions {
    fn default() -> Self {
        OtaOptions {
            epsilon: DEFAULT_EPSILON,
            masked_denominator: false,
        }
    }
}

fn preconditioner_values(moment: &SecondMoment, epsilon: f64) -> Result<Vec<f64>> {
    if epsilon < 0.0 {
        return Err(Error::Recipe(format!("epsilon {epsilon} must be >= 0")));
    }
    let v = moment.values_f64();
    let mut p = Vec::with_capacity(v.len());
    for (i, &x) in v.iter().enumerate() {
        if !x.is_finite() || x < 0.0 {
            return Err(Error::NegativeMoment {
                name: "second moment".to_string(),
                index: i,
            });
        }
        p.push(x.sqrt() + epsilon);
    }
    Ok(p)
}

/// Diagonal preconditioner p = sqrt(v) + epsilon for one tensor's second
/// moment; factored moments are reconstructed first.
pub fn build_preconditioner(
    name: impl Into<String>,
    moment: &SecondMoment,
    epsilon: f64,
) -> Result<NamedTensor> {
    let p = preconditioner_values(moment, epsilon)?;
    NamedTensor::from_f64(name, moment.shape(), p)
}

fn mask_for<'a>(
    masks: &'a BTreeMap<String, SaliencyMaskSet>,
    expert_id: &str,
    tensor: &str,
) -> Result<Option<&'a NamedTensor>> {
    match masks.get(expert_id) {
        None => Ok(None),
        Some(set) => set
            .mask(tensor)
            .map(Some)
            .ok_or_else(|| Error::MissingTensor {
                context: format!("mask set of expert '{expert_id}'"),
                name: tensor.to_string(),
            }),
    }
}

fn expert_moment<'a>(expert: &'a ExpertEntry, tensor: &str) -> Result<&'a SecondMoment> {
    expert
        .moments
        .as_ref()
        .ok_or_else(|| {
            Error::Recipe(format!(
                "expert '{}' has no second moments but the merge method requires them",
                expert.id
            ))
        })?
        .get(tensor)
        .ok_or_else(|| Error::MissingTensor {
            context: format!("moments of expert '{}'", expert.id),
            name: tensor.to_string(),
        })
}

fn merge_tensorwise<F>(
    bundle: &CheckpointBundle,
    per_tensor: F,
) -> Result<BTreeMap<String, NamedTensor>>
where
    F: Fn(&str, &NamedTensor) -> Result<Vec<f64>> + Sync,
{
    let names: Vec<&String> = bundle.base.keys().collect();
    let merged: Result<Vec<(String, NamedTensor)>> = names
        .par_iter()
        .map(|name| {
            let base = &bundle.base[*name];
            let values = per_tensor(name, base)?;
            let t = NamedTensor::from_f64_as(
                name.to_string(),
                base.shape().to_vec(),
                values,
                base.dtype(),
            )?;
            Ok((name.to_string(), t))
        })
        .collect();
    Ok(merged?.into_iter().collect())
}

/// Curvature-preconditioned aggregation of masked task vectors. Experts
/// without an entry in `masks` participate with a full (all-ones) mask.
pub fn ota_merge(
    bundle: &CheckpointBundle,
    masks: &BTreeMap<String, SaliencyMaskSet>,
    opts: &OtaOptions,
) -> Result<BTreeMap<String, NamedTensor>> {
    if bundle.experts.is_empty() {
        return Err(Error::Recipe("merge needs at least one expert".into()));
    }
    let order = bundle.sorted_expert_order();
    merge_tensorwise(bundle, |name, base| {
        let w0 = base.to_f64_vec();
        let n = w0.len();
        let mut lanes = Vec::with_capacity(order.len());
        for &idx in &order {
            let expert = &bundle.experts[idx];
            let e = expert.weights[name].to_f64_vec();
            let p = preconditioner_values(expert_moment(expert, name)?, opts.epsilon)?;
            let mask = mask_for(masks, &expert.id, name)?;
            lanes.push((e, p, mask));
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut den = 0.0f64;
            let mut any_kept = false;
            for (_, p, mask) in &lanes {
                let kept = mask.is_none_or(|m| m.get_f64(i) == 1.0);
                any_kept |= kept;
                if !opts.masked_denominator || kept {
                    den += p[i];
                }
            }
            if !any_kept || den == 0.0 {
                out.push(w0[i]);
                continue;
            }
            let mut acc = 0.0f64;
            for (e, p, mask) in &lanes {
                let kept = mask.is_none_or(|m| m.get_f64(i) == 1.0);
                if opts.masked_denominator {
                    if kept {
                        acc += (p[i] / den) * e[i];
                    }
                } else {
                    let g = if kept { e[i] } else { w0[i] };
                    acc += (p[i] / den) * g;
                }
            }
            out.push(acc);
        }
        Ok(out)
    })
}

/// Weighted average of expert weights, `sum_t l_t w_t / sum l_t`, with
/// uniform weights by default.
pub fn linear_merge(
    bundle: &CheckpointBundle,
    weights: Option<&BTreeMap<String, f64>>,
) -> Result<BTreeMap<String, NamedTensor>> {
    if bundle.experts.is_empty() {
        return Err(Error::Recipe("merge needs at least one expert".into()));
    }
    let order = bundle.sorted_expert_order();
    let mut lambdas = Vec::with_capacity(order.len());
    for &idx in &order {
        let id = &bundle.experts[idx].id;
        let l = weights.and_then(|w| w.get(id).copied()).unwrap_or(1.0);
        if l < 0.0 {
            return Err(Error::Recipe(format!(
                "negative weight {l} for expert '{id}'"
            )));
        }
        lambdas.push(l);
    }
    let total: f64 = lambdas.iter().sum();
    if total <= 0.0 {
        return Err(Error::Recipe("expert weights sum to zero".into()));
    }
    let coeffs: Vec<f64> = lambdas.iter().map(|l| l / total).collect();
    merge_tensorwise(bundle, |name, base| {
        let n = base.numel();
        let lanes: Vec<Vec<f64>> = order
            .iter()
            .map(|&idx| bundle.experts[idx].weights[name].to_f64_vec())
            .collect();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut acc = 0.0f64;
            for (e, c) in lanes.iter().zip(&coeffs) {
                acc += c * e[i];
            }
            out.push(acc);
        }
        Ok(out)
    })
}

/// Task arithmetic: w0 + (lambda / T) * sum_t (m_t o delta_t). Masks default
/// to all-ones.
pub fn task_arithmetic_merge(
    bundle: &CheckpointBundle,
    masks: &BTreeMap<String, SaliencyMaskSet>,
    lambda: f64,
) -> Result<BTreeMap<String, NamedTensor>> {
    if bundle.experts.is_empty() {
        return Err(Error::Recipe("merge needs at least one expert".into()));
    }
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(Error::Recipe(format!("lambda {lambda} must be > 0")));
    }
    let order = bundle.sorted_expert_order();
    let scale = lambda / order.len() as f64;
    merge_tensorwise(bundle, |name, base| {
        let w0 = base.to_f64_vec();
        let n = w0.len();
        let mut lanes = Vec::with_capacity(order.len());
        for &idx in &order {
            let expert = &bundle.experts[idx];
            let e = expert.weights[name].to_f64_vec();
            let mask = mask_for(masks, &expert.id, name)?;
            lanes.push((e, mask));
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut acc = 0.0f64;
            for (e, mask) in &lanes {
                if mask.is_none_or(|m| m.get_f64(i) == 1.0) {
                    acc += e[i] - w0[i];
                }
            }
            out.push(if acc == 0.0 {
                w0[i]
            } else {
                w0[i] + scale * acc
            });
        }
        Ok(out)
    })
}

/// Fisher-weighted average: merged[i] = sum_t (v_t[i]+eps) w_t[i] /
/// sum_t (v_t[i]+eps). With no curvature signal at a coordinate (all
/// v_t + eps zero) the weights degenerate to uniform.
pub fn fisher_merge(
    bundle: &CheckpointBundle,
    epsilon: f64,
) -> Result<BTreeMap<String, NamedTensor>> {
    if bundle.experts.is_empty() {
        return Err(Error::Recipe("merge needs at least one expert".into()));
    }
    if epsilon < 0.0 {
        return Err(Error::Recipe(format!("epsilon {epsilon} must be >= 0")));
    }
    let order = bundle.sorted_expert_order();
    merge_tensorwise(bundle, |name, base| {
        let n = base.numel();
        let mut lanes = Vec::with_capacity(order.len());
        for &idx in &order {
            let expert = &bundle.experts[idx];
            let e = expert.weights[name].to_f64_vec();
            let v = expert_moment(expert, name)?.values_f64();
            lanes.push((e, v));
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut den = 0.0f64;
            for (_, v) in &lanes {
                den += v[i] + epsilon;
            }
            let mut acc = 0.0f64;
            if den == 0.0 {
                let c = 1.0 / lanes.len() as f64;
                for (e, _) in &lanes {
                    acc += c * e[i];
                }
            } else {
                for (e, v) in &lanes {
                    acc += ((v[i] + epsilon) / den) * e[i];
                }
            }
            out.push(acc);
        }
        Ok(out)
    })
}

/// Trim/sign-elect/disjoint-mean merge. Each expert's task vector is trimmed
/// to its global top `ties_density` fraction by |delta|; per coordinate the
/// sign with the larger summed trimmed mass wins, and the merged edit is
/// lambda times the mean over the experts on the winning side.
pub fn ties_merge(
    bundle: &CheckpointBundle,
    ties_density: f64,
    lambda: f64,
) -> Result<BTreeMap<String, NamedTensor>> {
    if bundle.experts.is_empty() {
        return Err(Error::Recipe("merge needs at least one expert".into()));
    }
    if ties_density.is_nan() || ties_density <= 0.0 || ties_density > 1.0 {
        return Err(Error::Recipe(format!(
            "ties_density {ties_density} outside (0, 1]"
        )));
    }
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(Error::Recipe(format!("lambda {lambda} must be > 0")));
    }
    let order = bundle.sorted_expert_order();
    // Stage 1: per-expert global trim of |delta|.
    let mut trimmed: Vec<BTreeMap<String, Vec<f64>>> = Vec::with_capacity(order.len());
    for &idx in &order {
        let expert = &bundle.experts[idx];
        let delta = task_vector(&expert.weights, &bundle.base)?;
        let saliency = magnitude_saliency(&delta)?;
        let refs: Vec<&NamedTensor> = saliency.values().collect();
        let total: usize = refs.iter().map(|t| t.numel()).sum();
        let k = crate::graft::kept_count(ties_density, total);
        let (_, keep) = crate::tensor::select_global_topk(&refs, k)?;
        let mut expert_trimmed = BTreeMap::new();
        for (name, d) in &delta {
            let bits = &keep[name];
            let vals: Vec<f64> = d
                .iter_f64()
                .zip(bits)
                .map(|(x, &b)| if b { x } else { 0.0 })
                .collect();
            expert_trimmed.insert(name.clone(), vals);
        }
        trimmed.push(expert_trimmed);
    }
    // Stages 2-3: elect the sign by summed trimmed mass, then average the
    // experts that agree with it.
    merge_tensorwise(bundle, |name, base| {
        let w0 = base.to_f64_vec();
        let n = w0.len();
        let lanes: Vec<&Vec<f64>> = trimmed.iter().map(|m| &m[name]).collect();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut summed = 0.0f64;
            for lane in &lanes {
                summed += lane[i];
            }
            if summed == 0.0 {
                out.push(w0[i]);
                continue;
            }
            let sign = summed.signum();
            let mut acc = 0.0f64;
            let mut count = 0usize;
            for lane in &lanes {
                let d = lane[i];
                if d != 0.0 && d.signum() == sign {
                    acc += d;
                    count += 1;
                }
            }
            out.push(w0[i] + lambda * (acc / count as f64));
        }
        Ok(out)
    })
}

/// Replace every masked expert's weights with their grafted form; linear,
/// Fisher, and trim/elect merges compose with saliency masks this way.
pub fn graft_experts(
    bundle: &CheckpointBundle,
    masks: &BTreeMap<String, SaliencyMaskSet>,
) -> Result<CheckpointBundle> {
    let mut experts = Vec::with_capacity(bundle.experts.len());
    for expert in &bundle.experts {
        let weights = match masks.get(&expert.id) {
            Some(set) => apply_graft(&bundle.base, &expert.weights, set)?,
            None => expert.weights.clone(),
        };
        experts.push(ExpertEntry {
            id: expert.id.clone(),
            weights,
            moments: expert.moments.clone(),
        });
    }
    Ok(CheckpointBundle {
        base: bundle.base.clone(),
        experts,
    })
}

// ---------------------------------------------------------------------------
// Recipes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Ota,
    Linear,
    TaskArithmetic,
    Fisher,
    Ties,
}

impl MergeMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            MergeMethod::Ota => "ota",
            MergeMethod::Linear => "linear",
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::Fisher => "fisher",
            MergeMethod::Ties => "ties",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecipeSaliency {
    Ffg,
    Magnitude,
    #[default]
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecipeExpert {
    pub id: String,
    pub weights_path: PathBuf,
    #[serde(default)]
    pub moments_path: Option<PathBuf>,
    /// Fraction of task-vector coordinates to keep before merging.
    #[serde(default)]
    pub density: Option<f64>,
    #[serde(default)]
    pub saliency: RecipeSaliency,
    /// Per-expert coefficient for linear merging; default uniform.
    #[serde(default)]
    pub weight: Option<f64>,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

/// Declarative description of one merge run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    pub base: PathBuf,
    pub experts: Vec<RecipeExpert>,
    pub output: PathBuf,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub ties_density: Option<f64>,
    /// Compress full 2-D moments to rank-1 factors before any use, so both
    /// the saliency pass and the aggregation run on the reconstruction.
    #[serde(default)]
    pub use_factored_moments: bool,
    #[serde(default)]
    pub masked_denominator: bool,
    /// Tensor-name substrings excluded from saliency ranking.
    #[serde(default)]
    pub exclude: Vec<String>,
}

impl MergeRecipe {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let recipe: MergeRecipe = serde_json::from_str(s)?;
        recipe.validate()?;
        Ok(recipe)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path.as_ref())?;
        Self::from_json_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts.is_empty() {
            return Err(Error::Recipe("recipe lists no experts".into()));
        }
        let ids: std::collections::BTreeSet<&str> =
            self.experts.iter().map(|e| e.id.as_str()).collect();
        if ids.len() != self.experts.len() {
            return Err(Error::Recipe("duplicate expert ids".into()));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Recipe(format!(
                "epsilon {} must be > 0",
                self.epsilon
            )));
        }
        if let Some(l) = self.lambda
            && (l.is_nan() || l <= 0.0)
        {
            return Err(Error::Recipe(format!("lambda {l} must be > 0")));
        }
        for expert in &self.experts {
            if let Some(d) = expert.density {
                if !(0.0..=1.0).contains(&d) {
                    return Err(Error::Recipe(format!(
                        "density {d} of expert '{}' outside [0, 1]",
                        expert.id
                    )));
                }
                if expert.saliency == RecipeSaliency::None {
                    return Err(Error::Recipe(format!(
                        "expert '{}' sets a density but no saliency method",
                        expert.id
                    )));
                }
            } else if expert.saliency != RecipeSaliency::None {
                return Err(Error::Recipe(format!(
                    "expert '{}' sets saliency '{:?}' but no density",
                    expert.id, expert.saliency
                )));
            }
            if expert.saliency == RecipeSaliency::Ffg && expert.moments_path.is_none() {
                return Err(Error::Recipe(format!(
                    "expert '{}' uses ffg saliency but has no moments_path",
                    expert.id
                )));
            }
            if let Some(w) = expert.weight
                && w < 0.0
            {
                return Err(Error::Recipe(format!(
                    "negative weight {w} for expert '{}'",
                    expert.id
                )));
            }
        }
        match self.method {
            MergeMethod::Ota | MergeMethod::Fisher => {
                for expert in &self.experts {
                    if expert.moments_path.is_none() {
                        return Err(Error::Recipe(format!(
                            "method '{}' requires second moments for expert '{}'",
                            self.method.as_str(),
                            expert.id
                        )));
                    }
                }
            }
            MergeMethod::Ties => {
                let Some(d) = self.ties_density else {
                    return Err(Error::Recipe("ties merge requires ties_density".into()));
                };
                if d.is_nan() || d <= 0.0 || d > 1.0 {
                    return Err(Error::Recipe(format!("ties_density {d} outside (0, 1]")));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpertReportEntry {
    pub id: String,
    pub saliency: String,
    pub requested_density: Option<f64>,
    pub realized_kept: Option<usize>,
    pub realized_density: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorReportEntry {
    pub name: String,
    pub numel: usize,
    pub max_abs_edit: f64,
    pub l2_edit: f64,
}

/// Realized densities and per-tensor edit statistics of one merge run.
#[derive(Debug, Clone, Serialize)]
pub struct MergeReport {
    pub method: String,
    pub epsilon: f64,
    pub use_factored_moments: bool,
    pub masked_denominator: bool,
    pub experts: Vec<ExpertReportEntry>,
    pub tensors: Vec<TensorReportEntry>,
}

pub struct MergeOutcome {
    pub merged: BTreeMap<String, NamedTensor>,
    pub masks: BTreeMap<String, SaliencyMaskSet>,
    pub report: MergeReport,
}

/// Execute a recipe end to end: load the bundle, build per-expert masks,
/// merge, and assemble the report. Writing artifacts is the caller's job.
pub fn run_recipe(recipe: &MergeRecipe) -> Result<MergeOutcome> {
    recipe.validate()?;
    let expert_paths: Vec<(String, PathBuf)> = recipe
        .experts
        .iter()
        .map(|e| (e.id.clone(), e.weights_path.clone()))
        .collect();
    let moment_paths: Vec<Option<PathBuf>> = recipe
        .experts
        .iter()
        .map(|e| e.moments_path.clone())
        .collect();
    let mut bundle = load_bundle(&recipe.base, &expert_paths, &moment_paths)?;
    if recipe.use_factored_moments {
        bundle = compress_bundle_moments(&bundle)?;
    }

    let mut masks: BTreeMap<String, SaliencyMaskSet> = BTreeMap::new();
    for spec in &recipe.experts {
        let Some(density) = spec.density else {
            continue;
        };
        let expert = bundle.expert(&spec.id).expect("expert loaded from recipe");
        let delta = task_vector(&expert.weights, &bundle.base)?;
        let (method, saliency) = match spec.saliency {
            RecipeSaliency::Ffg => {
                let moments = expert.moments.as_ref().ok_or_else(|| {
                    Error::Recipe(format!("expert '{}' has no moments for ffg", spec.id))
                })?;
                (SaliencyMethod::Ffg, ffg_saliency(&delta, moments)?)
            }
            RecipeSaliency::Magnitude => (SaliencyMethod::Magnitude, magnitude_saliency(&delta)?),
            RecipeSaliency::None => unreachable!("validated: density implies saliency"),
        };
        let set = build_mask(&spec.id, method, &saliency, density, &recipe.exclude)?;
        masks.insert(spec.id.clone(), set);
    }

    let lambda = recipe.lambda.unwrap_or(1.0);
    let merged = match recipe.method {
        MergeMethod::Ota => ota_merge(
            &bundle,
            &masks,
            &OtaOptions {
                epsilon: recipe.epsilon,
                masked_denominator: recipe.masked_denominator,
            },
        )?,
        MergeMethod::Linear => {
            let grafted = graft_experts(&bundle, &masks)?;
            let weights: BTreeMap<String, f64> = recipe
                .experts
                .iter()
                .filter_map(|e| e.weight.map(|w| (e.id.clone(), w)))
                .collect();
            let weights = if weights.is_empty() {
                None
            } else {
                Some(&weights)
            };
            linear_merge(&grafted, weights)?
        }
        MergeMethod::TaskArithmetic => task_arithmetic_merge(&bundle, &masks, lambda)?,
        MergeMethod::Fisher => {
            let grafted = graft_experts(&bundle, &masks)?;
            fisher_merge(&grafted, recipe.epsilon)?
        }
        MergeMethod::Ties => {
            let grafted = graft_experts(&bundle, &masks)?;
            ties_merge(
                &grafted,
                recipe.ties_density.expect("validated for ties"),
                lambda,
            )?
        }
    };

    let experts = recipe
        .experts
        .iter()
        .map(|spec| {
            let set = masks.get(&spec.id);
            ExpertReportEntry {
                id: spec.id.clone(),
                saliency: format!("{:?}", spec.saliency).to_lowercase(),
                requested_density: spec.density,
                realized_kept: set.map(|s| s.realized_kept_count),
                realized_density: set.map(|s| {
                    let total = s.total_elements();
                    if total == 0 {
                        0.0
                    } else {
                        s.total_kept() as f64 / total as f64
                    }
                }),
            }
        })
        .collect();
    let tensors = merged
        .iter()
        .map(|(name, t)| {
            let base = &bundle.base[name];
            let mut max_abs = 0.0f64;
            let mut l2 = 0.0f64;
            for (m, b) in t.iter_f64().zip(base.iter_f64()) {
                let d = m - b;
                max_abs = max_abs.max(d.abs());
                l2 += d * d;
            }
            TensorReportEntry {
                name: name.clone(),
                numel: t.numel(),
                max_abs_edit: max_abs,
                l2_edit: l2.sqrt(),
            }
        })
        .collect();

    Ok(MergeOutcome {
        merged,
        masks,
        report: MergeReport {
            method: recipe.method.as_str().to_string(),
            epsilon: recipe.epsilon,
            use_factored_moments: recipe.use_factored_moments,
            masked_denominator: recipe.masked_denominator,
            experts,
            tensors,
        },
    })
}
