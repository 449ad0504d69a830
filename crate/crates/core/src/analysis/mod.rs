//! Mask-structure and curvature-structure analytics: layer-wise densities,
//! row/column sparsity histograms, N-way mask overlap, and downsampled
//! heatmap grids.

pub mod grid;
pub mod names;

pub use grid::{
    Grid, LOG_FLOOR, curvature_grid, downsample_grid, maxmin_ratio_grid,
    maxmin_ratio_grid_with_floor,
};
pub use names::{LayerRole, NamePattern};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graft::SaliencyMaskSet;
use crate::tensor::NamedTensor;

/// One row of a layer-wise density report.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityRow {
    pub layer: i64,
    pub role: String,
    pub tensor: String,
    pub kept: usize,
    pub total: usize,
    pub density: f64,
}

/// Per-tensor kept/total counts for one expert's mask set, with the global
/// realized density. A fixed global budget induces very different per-layer
/// densities; this report is how that distribution is observed.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityReport {
    pub expert_id: String,
    pub rows: Vec<DensityRow>,
    pub global_kept: usize,
    pub global_total: usize,
}

impl DensityReport {
    pub fn global_density(&self) -> f64 {
        if self.global_total == 0 {
            0.0
        } else {
            self.global_kept as f64 / self.global_total as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,role,tensor,kept,total,density\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.layer, r.role, r.tensor, r.kept, r.total, r.density
            ));
        }
        out
    }
}

/// Layer-wise density of a mask set; one row per tensor, sorted by
/// (layer, role, tensor name).
pub fn density_report(maskset: &SaliencyMaskSet, pattern: &NamePattern) -> DensityReport {
    let mut rows = Vec::with_capacity(maskset.masks.len());
    let mut global_kept = 0;
    let mut global_total = 0;
    for (name, mask) in &maskset.masks {
        let kept = mask.count_nonzero();
        let total = mask.numel();
        global_kept += kept;
        global_total += total;
        let LayerRole { layer, role } = pattern.parse(name);
        rows.push(DensityRow {
            layer,
            role,
            tensor: name.clone(),
            kept,
            total,
            density: if total == 0 {
                0.0
            } else {
                kept as f64 / total as f64
            },
        });
    }
    rows.sort_by(|a, b| {
        a.layer
            .cmp(&b.layer)
            .then_with(|| a.role.cmp(&b.role))
            .then_with(|| a.tensor.cmp(&b.tensor))
    });
    DensityReport {
        expert_id: maskset.expert_id.clone(),
        rows,
        global_kept,
        global_total,
    }
}

/// Row-wise and column-wise sparsity histograms of a 2-D binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityHistogram {
    pub bins: usize,
    pub row_hist: Vec<usize>,
    pub col_hist: Vec<usize>,
    /// Fraction of rows that contain no kept element at all.
    pub zero_row_fraction: f64,
    pub zero_col_fraction: f64,
}

impl SparsityHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,rows,cols\n");
        for b in 0..self.bins {
            out.push_str(&format!(
                "{},{},{},{}\n",
                b as f64 / self.bins as f64,
                (b + 1) as f64 / self.bins as f64,
                self.row_hist[b],
                self.col_hist[b]
            ));
        }
        out
    }
}

fn bin_of(s: f64, bins: usize) -> usize {
    ((s * bins as f64) as usize).min(bins - 1)
}

/// Histogram the per-row and per-column sparsities (fraction of zeros) of a
/// 2-D binary mask over [0, 1] with `bins` equal-width bins. A spike near
/// 1.0 means whole channels were pruned.
pub fn rowcol_sparsity_histogram(mask: &NamedTensor, bins: usize) -> Result<SparsityHistogram> {
    let (m, n) = mask.dims2()?;
    if bins == 0 {
        return Err(Error::Recipe("histogram needs at least one bin".into()));
    }
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
    let mut row_hist = vec![0usize; bins];
    let mut col_hist = vec![0usize; bins];
    let mut zero_rows = 0usize;
    let row_counts = mask.row_sums()?;
    for &kept in &row_counts {
        let sparsity = 1.0 - kept / n as f64;
        row_hist[bin_of(sparsity, bins)] += 1;
        if kept == 0.0 {
            zero_rows += 1;
        }
    }
    let mut zero_cols = 0usize;
    let col_counts = mask.col_sums()?;
    for &kept in &col_counts {
        let sparsity = 1.0 - kept / m as f64;
        col_hist[bin_of(sparsity, bins)] += 1;
        if kept == 0.0 {
            zero_cols += 1;
        }
    }
    Ok(SparsityHistogram {
        bins,
        row_hist,
        col_hist,
        zero_row_fraction: zero_rows as f64 / m as f64,
        zero_col_fraction: zero_cols as f64 / n as f64,
    })
}

/// Per-tensor overlap of up to 8 expert mask sets. Each coordinate is
/// classified by the subset of experts that keep it, encoded as a bitmask
/// with bit t for the t-th expert in sorted-id order.
#[derive(Debug, Clone)]
pub struct MaskOverlap {
    /// Expert ids in bit order (bit 0 = first entry).
    pub expert_ids: Vec<String>,
    pub tensors: BTreeMap<String, OverlapStats>,
}

#[derive(Debug, Clone)]
pub struct OverlapStats {
    pub total: usize,
    /// Coordinate counts per expert subset; every subset of the expert set
    /// is present, so the fractions partition the coordinate space.
    pub counts: BTreeMap<u32, usize>,
}

impl OverlapStats {
    pub fn fraction(&self, subset: u32) -> f64 {
        *self.counts.get(&subset).unwrap_or(&0) as f64 / self.total as f64
    }
}

impl MaskOverlap {
    /// JSON document per the export contract:
    /// `[{"tensor": ..., "fractions": {"<bitmask>": f, ...}}, ...]`
    pub fn to_json(&self) -> serde_json::Value {
        let tensors: Vec<serde_json::Value> = self
            .tensors
            .iter()
            .map(|(name, stats)| {
                let fractions: serde_json::Map<String, serde_json::Value> = stats
                    .counts
                    .keys()
                    .map(|mask| (mask.to_string(), serde_json::json!(stats.fraction(*mask))))
                    .collect();
                serde_json::json!({ "tensor": name, "fractions": fractions })
            })
            .collect();
        serde_json::json!({
            "experts": self.expert_ids,
            "tensors": tensors,
        })
    }
}

/// Classify every coordinate of every tensor by the subset of experts whose
/// masks keep it.
pub fn mask_overlap(masksets: &[&SaliencyMaskSet]) -> Result<MaskOverlap> {
    if !(2..=8).contains(&masksets.len()) {
        return Err(Error::Recipe(format!(
            "mask overlap needs 2 to 8 experts, got {}",
            masksets.len()
        )));
    }
    let mut order: Vec<usize> = (0..masksets.len()).collect();
    order.sort_by(|&a, &b| masksets[a].expert_id.cmp(&masksets[b].expert_id));
    let expert_ids: Vec<String> = order
        .iter()
        .map(|&i| masksets[i].expert_id.clone())
        .collect();
    let first = masksets[order[0]];
    for &i in &order[1..] {
        let other = masksets[i];
        if other.masks.len() != first.masks.len() || !other.masks.keys().eq(first.masks.keys()) {
            return Err(Error::NameSetMismatch {
                context: "mask overlap".into(),
                detail: format!(
                    "experts '{}' and '{}' mask different tensors",
                    first.expert_id, other.expert_id
                ),
            });
        }
    }
    let n_subsets = 1u32 << masksets.len();
    let mut tensors = BTreeMap::new();
    for (name, first_mask) in &first.masks {
        let total = first_mask.numel();
        let mut counts: BTreeMap<u32, usize> = (0..n_subsets).map(|s| (s, 0)).collect();
        let expert_masks: Vec<&NamedTensor> = order
            .iter()
            .map(|&i| {
                let m = &masksets[i].masks[name];
                if m.shape() != first_mask.shape() {
                    return Err(Error::ShapeMismatch {
                        name: name.clone(),
                        expected: first_mask.shape().to_vec(),
                        got: m.shape().to_vec(),
                    });
                }
                Ok(m)
            })
            .collect::<Result<_>>()?;
        for i in 0..total {
            let mut bits = 0u32;
            for (t, m) in expert_masks.iter().enumerate() {
                if m.get_f64(i) == 1.0 {
                    bits |= 1 << t;
                }
            }
            *counts.get_mut(&bits).expect("all subsets present") += 1;
        }
        tensors.insert(name.clone(), OverlapStats { total, counts });
    }
    Ok(MaskOverlap {
        expert_ids,
        tensors,
    })
}

/// Downsampled bitmask grid of one 2-D tensor's overlap pattern, for
/// rendering. Cell values are the subset bitmasks as floats.
pub fn overlap_grid(
    masksets: &[&SaliencyMaskSet],
    tensor_name: &str,
    target: usize,
) -> Result<Grid> {
    if !(2..=8).contains(&masksets.len()) {
        return Err(Error::Recipe(format!(
            "mask overlap needs 2 to 8 experts, got {}",
            masksets.len()
        )));
    }
    let mut order: Vec<usize> = (0..masksets.len()).collect();
    order.sort_by(|&a, &b| masksets[a].expert_id.cmp(&masksets[b].expert_id));
    let first = masksets[order[0]]
        .mask(tensor_name)
        .ok_or_else(|| Error::MissingTensor {
            context: "overlap grid".into(),
            name: tensor_name.to_string(),
        })?;
    let (m, n) = first.dims2()?;
    let mut bits = vec![0.0f64; m * n];
    for (t, &i) in order.iter().enumerate() {
        let mask = masksets[i]
            .mask(tensor_name)
            .ok_or_else(|| Error::MissingTensor {
                context: "overlap grid".into(),
                name: tensor_name.to_string(),
            })?;
        for (idx, cell) in bits.iter_mut().enumerate() {
            if mask.get_f64(idx) == 1.0 {
                *cell += (1u32 << t) as f64;
            }
        }
    }
    let (cells, rows, cols, stride) = grid::downsample_values(&bits, m, n, target);
    Ok(Grid {
        tensor_name: tensor_name.to_string(),
        source_shape: (m, n),
        stride,
        rows,
        cols,
        transform: "bitmask".to_string(),
        values: cells,
    })
}
