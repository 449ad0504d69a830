//! Rank-1 compression of second-moment matrices and stable-rank analysis.
//!
//! A 2-D nonnegative matrix V is reduced to its row sums r and column sums c;
//! the reconstruction r c^T / sum(r) is nonnegative by construction, exact on
//! rank-1 inputs, and preserves both marginals. Storage drops from m*n to
//! m+n values per matrix. Compression is applied post hoc to the final
//! exp_avg_sq snapshot; 1-D tensors (biases, norms) stay uncompressed.

use std::collections::BTreeMap;

use crate::analysis::names::{LayerRole, NamePattern};
use crate::bundle::{CheckpointBundle, SecondMoment};
use crate::error::{Error, Result};
use crate::tensor::{NamedTensor, spectral_norm};

/// Row-sum and column-sum factors of a 2-D second-moment matrix.
#[derive(Debug, Clone)]
pub struct FactoredSecondMoment {
    dense_name: String,
    row: NamedTensor,
    col: NamedTensor,
    source_shape: (usize, usize),
}

impl FactoredSecondMoment {
    /// Assemble from factor vectors. `dense_name` is the logical name of the
    /// matrix being represented (e.g. `w.exp_avg_sq`).
    pub fn new(dense_name: impl Into<String>, row: NamedTensor, col: NamedTensor) -> Result<Self> {
        let dense_name = dense_name.into();
        for (t, which) in [(&row, "row"), (&col, "col")] {
            if t.shape().len() != 1 {
                return Err(Error::Format(format!(
                    "{which} factor of '{dense_name}' must be 1-D, got shape {:?}",
                    t.shape()
                )));
            }
            for i in 0..t.numel() {
                let v = t.get_f64(i);
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::NegativeMoment {
                        name: t.name().to_string(),
                        index: i,
                    });
                }
            }
        }
        let (rs, cs) = (row.sum_all(), col.sum_all());
        let scale = rs.max(cs);
        if scale > 0.0 && (rs - cs).abs() > 1e-6 * scale {
            return Err(Error::Format(format!(
                "factor sums of '{dense_name}' disagree: sum(row)={rs}, sum(col)={cs}"
            )));
        }
        let source_shape = (row.numel(), col.numel());
        Ok(Self {
            dense_name,
            row,
            col,
            source_shape,
        })
    }

    /// Assemble for a weight tensor, deriving the conventional moment name.
    pub fn from_tensors(weight_name: &str, row: NamedTensor, col: NamedTensor) -> Result<Self> {
        Self::new(
            format!("{weight_name}{}", crate::bundle::MOMENT_SUFFIX),
            row,
            col,
        )
    }

    pub fn dense_name(&self) -> &str {
        &self.dense_name
    }

    pub fn row(&self) -> &NamedTensor {
        &self.row
    }

    pub fn col(&self) -> &NamedTensor {
        &self.col
    }

    pub fn rows(&self) -> usize {
        self.source_shape.0
    }

    pub fn cols(&self) -> usize {
        self.source_shape.1
    }

    pub fn source_shape(&self) -> (usize, usize) {
        self.source_shape
    }

    /// Reconstructed values r[i]*c[j]/sum(r) in f64. Zero total mass yields
    /// the zero matrix, a degenerate but valid optimizer state.
    pub fn reconstruct_values(&self) -> Vec<f64> {
        let (m, n) = self.source_shape;
        let total = self.row.sum_all();
        let mut out = vec![0.0f64; m * n];
        if total <= 0.0 {
            return out;
        }
        let r = self.row.to_f64_vec();
        let c = self.col.to_f64_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = r[i] * c[j] / total;
            }
        }
        out
    }

    /// Reconstruction as a named f64 tensor.
    pub fn reconstruct(&self) -> NamedTensor {
        let (m, n) = self.source_shape;
        NamedTensor::from_f64(
            self.dense_name.clone(),
            vec![m, n],
            self.reconstruct_values(),
        )
        .expect("shape matches values by construction")
    }
}

/// Factor a 2-D nonnegative matrix into its row and column sums, computed in
/// f64 and stored in the source dtype. Factor tensors are named
/// `<name>.row` / `<name>.col` so they slot straight into a container.
pub fn compress(v: &NamedTensor) -> Result<FactoredSecondMoment> {
    let _ = v.dims2()?;
    for i in 0..v.numel() {
        let x = v.get_f64(i);
        if !x.is_finite() || x < 0.0 {
            return Err(Error::NegativeMoment {
                name: v.name().to_string(),
                index: i,
            });
        }
    }
    let row = NamedTensor::from_f64_as(
        format!("{}.row", v.name()),
        vec![v.shape()[0]],
        v.row_sums()?,
        v.dtype(),
    )?;
    let col = NamedTensor::from_f64_as(
        format!("{}.col", v.name()),
        vec![v.shape()[1]],
        v.col_sums()?,
        v.dtype(),
    )?;
    FactoredSecondMoment::new(v.name(), row, col)
}

/// Stable rank ||V||_F^2 / ||V||_2^2 of a nonzero 2-D tensor.
pub fn stable_rank(v: &NamedTensor, tol: f64) -> Result<f64> {
    let _ = v.dims2()?;
    let fro_sq = v.frobenius_sq();
    if fro_sq == 0.0 {
        return Err(Error::ZeroMatrix {
            name: v.name().to_string(),
        });
    }
    let sn = spectral_norm(v, tol, 100_000)?;
    Ok(fro_sq / (sn.sigma * sn.sigma))
}

#[derive(Debug, Clone)]
pub struct StableRankRow {
    pub expert: String,
    pub tensor: String,
    pub layer: i64,
    pub role: String,
    pub stable_rank: f64,
}

/// Stable ranks of every full 2-D second moment in a bundle, plus the
/// entries that had to be skipped (factored storage, 1-D tensors, zero
/// matrices, experts without moments).
#[derive(Debug, Clone, Default)]
pub struct StableRankReport {
    pub rows: Vec<StableRankRow>,
    pub skipped: Vec<(String, String, String)>,
}

impl StableRankReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("expert,tensor,layer,role,stable_rank\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.expert, r.tensor, r.layer, r.role, r.stable_rank
            ));
        }
        out
    }
}

/// Stable-rank rows for one expert's moment map.
pub fn stable_rank_rows(
    expert_id: &str,
    moments: &BTreeMap<String, SecondMoment>,
    pattern: &NamePattern,
    tol: f64,
) -> StableRankReport {
    let mut report = StableRankReport::default();
    for (weight_name, moment) in moments {
        let skip = |reason: &str, report: &mut StableRankReport| {
            report.skipped.push((
                expert_id.to_string(),
                weight_name.clone(),
                reason.to_string(),
            ));
        };
        match moment {
            SecondMoment::Factored(_) => skip("factored storage", &mut report),
            SecondMoment::Full(t) => {
                if t.shape().len() != 2 {
                    skip("not 2-D", &mut report);
                    continue;
                }
                match stable_rank(t, 1e-10) {
                    Ok(r) => {
                        let LayerRole { layer, role } = pattern.parse(weight_name);
                        report.rows.push(StableRankRow {
                            expert: expert_id.to_string(),
                            tensor: weight_name.clone(),
                            layer,
                            role,
                            stable_rank: r,
                        });
                    }
                    Err(Error::ZeroMatrix { .. }) => skip("zero matrix", &mut report),
                    Err(e) => skip(&e.to_string(), &mut report),
                }
            }
        }
        let _ = tol;
    }
    report
}

/// Replace every full 2-D second moment in a bundle by its rank-1 factors.
/// 1-D moments stay full and already-factored entries pass through, so the
/// result is what a compressed-preconditioner merge consumes.
pub fn compress_bundle_moments(bundle: &CheckpointBundle) -> Result<CheckpointBundle> {
    let mut experts = Vec::with_capacity(bundle.experts.len());
    for expert in &bundle.experts {
        let moments = match &expert.moments {
            None => None,
            Some(moments) => {
                let mut out = BTreeMap::new();
                for (name, moment) in moments {
                    let compressed = match moment {
                        SecondMoment::Full(t) if t.shape().len() == 2 => {
                            SecondMoment::Factored(compress(t)?)
                        }
                        other => other.clone(),
                    };
                    out.insert(name.clone(), compressed);
                }
                Some(out)
            }
        };
        experts.push(crate::bundle::ExpertEntry {
            id: expert.id.clone(),
            weights: expert.weights.clone(),
            moments,
        });
    }
    Ok(CheckpointBundle {
        base: bundle.base.clone(),
        experts,
    })
}

/// Stable ranks across every expert of a bundle.
pub fn stable_rank_report(bundle: &CheckpointBundle, tol: f64) -> StableRankReport {
    let pattern = NamePattern::default();
    let mut report = StableRankReport::default();
    for idx in bundle.sorted_expert_order() {
        let expert = &bundle.experts[idx];
        match &expert.moments {
            None => report
                .skipped
                .push((expert.id.clone(), String::new(), "no moments".into())),
            Some(moments) => {
                let sub = stable_rank_rows(&expert.id, moments, &pattern, tol);
                report.rows.extend(sub.rows);
                report.skipped.extend(sub.skipped);
            }
        }
    }
    report
}
