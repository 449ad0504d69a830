//! Downsampled 2-D grids for mask and curvature visualization.
//!
//! Sampling is corner-anchored uniform striding: stride = ceil(extent /
//! target), cell (i, j) reads the source at (i*stride_r, j*stride_c). A
//! 4096x4096 matrix at target 256 therefore lands on a 256x256 grid with
//! stride 16. Grids export as CSV (the data contract) and optionally as a
//! binary PPM image (convenience).

use crate::error::Result;
use crate::tensor::NamedTensor;

pub const LOG_FLOOR: f64 = 1e-30;

/// A downsampled grid of f64 cells plus the provenance line CSV consumers
/// need to reconstruct positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub tensor_name: String,
    pub source_shape: (usize, usize),
    pub stride: (usize, usize),
    pub rows: usize,
    pub cols: usize,
    /// Short identifier of the cell transform: "id", "log10sqrt",
    /// "maxminsqrt", or "bitmask".
    pub transform: String,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    /// CSV form: a `#` provenance line then comma-separated float rows.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# name={} shape={}x{} stride={},{} transform={}\n",
            self.tensor_name,
            self.source_shape.0,
            self.source_shape.1,
            self.stride.0,
            self.stride.1,
            self.transform
        );
        for i in 0..self.rows {
            let row: Vec<String> = (0..self.cols).map(|j| self.get(i, j).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Binary PPM (P6) rendering. Grayscale maps the min..max cell range
    /// linearly onto 0..255; the "bitmask" transform instead lights the red,
    /// green, and blue channels for experts 0, 1, and 2.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        if self.transform == "bitmask" {
            for &v in &self.values {
                let bits = v as u32;
                out.push(if bits & 1 != 0 { 255 } else { 0 });
                out.push(if bits & 2 != 0 { 255 } else { 0 });
                out.push(if bits & 4 != 0 { 255 } else { 0 });
            }
        } else {
            let min = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = self
                .values
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let span = if max > min { max - min } else { 1.0 };
            for &v in &self.values {
                let g = (((v - min) / span) * 255.0).round().clamp(0.0, 255.0) as u8;
                out.extend_from_slice(&[g, g, g]);
            }
        }
        out
    }
}

pub(crate) fn strides_for(m: usize, n: usize, target: usize) -> (usize, usize) {
    let target = target.max(1);
    (m.div_ceil(target).max(1), n.div_ceil(target).max(1))
}

pub(crate) fn downsample_values(
    values: &[f64],
    m: usize,
    n: usize,
    target: usize,
) -> (Vec<f64>, usize, usize, (usize, usize)) {
    let (sr, sc) = strides_for(m, n, target);
    let rows = if m == 0 { 0 } else { m.div_ceil(sr) };
    let cols = if n == 0 { 0 } else { n.div_ceil(sc) };
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(values[i * sr * n + j * sc]);
        }
    }
    (out, rows, cols, (sr, sc))
}

/// Uniform-stride downsample of a 2-D tensor; inputs already within the
/// target come back unchanged.
pub fn downsample_grid(t: &NamedTensor, target: usize) -> Result<Grid> {
    let (m, n) = t.dims2()?;
    let values = t.to_f64_vec();
    let (cells, rows, cols, stride) = downsample_values(&values, m, n, target);
    Ok(Grid {
        tensor_name: t.name().to_string(),
        source_shape: (m, n),
        stride,
        rows,
        cols,
        transform: "id".to_string(),
        values: cells,
    })
}

/// Curvature heatmap grid: downsample a second-moment matrix, then map each
/// cell through log10(sqrt(v) + 1e-30). The floor guards log of zero, so an
/// all-zero moment renders as a constant -30.
pub fn curvature_grid(v: &NamedTensor, target: usize) -> Result<Grid> {
    let mut grid = downsample_grid(v, target)?;
    for cell in &mut grid.values {
        *cell = (cell.sqrt() + LOG_FLOOR).log10();
    }
    grid.transform = "log10sqrt".to_string();
    Ok(grid)
}

/// Max-min curvature ratio grid across experts: per downsampled cell,
/// max over experts of sqrt(v) divided by (min over experts of sqrt(v) +
/// floor). Bright cells mark where fine-tuning bent the landscape most.
pub fn maxmin_ratio_grid(experts: &[&NamedTensor], target: usize) -> Result<Grid> {
    maxmin_ratio_grid_with_floor(experts, target, LOG_FLOOR)
}

pub fn maxmin_ratio_grid_with_floor(
    experts: &[&NamedTensor],
    target: usize,
    floor: f64,
) -> Result<Grid> {
    if experts.len() < 2 {
        return Err(crate::error::Error::Recipe(
            "max-min ratio grid needs at least two experts".into(),
        ));
    }
    let first = experts[0];
    let (m, n) = first.dims2()?;
    for other in &experts[1..] {
        if other.shape() != first.shape() {
            return Err(crate::error::Error::ShapeMismatch {
                name: other.name().to_string(),
                expected: first.shape().to_vec(),
                got: other.shape().to_vec(),
            });
        }
    }
    let mut grids = Vec::with_capacity(experts.len());
    let mut dims = (0usize, 0usize, (0usize, 0usize));
    for t in experts {
        let values = t.to_f64_vec();
        let (cells, rows, cols, stride) = downsample_values(&values, m, n, target);
        dims = (rows, cols, stride);
        grids.push(cells);
    }
    let (rows, cols, stride) = dims;
    let mut out = Vec::with_capacity(rows * cols);
    for idx in 0..rows * cols {
        let mut hi = f64::NEG_INFINITY;
        let mut lo = f64::INFINITY;
        for g in &grids {
            let s = g[idx].sqrt();
            hi = hi.max(s);
            lo = lo.min(s);
        }
        out.push(hi / (lo + floor));
    }
    Ok(Grid {
        tensor_name: first.name().to_string(),
        source_shape: (m, n),
        stride,
        rows,
        cols,
        transform: "maxminsqrt".to_string(),
        values: out,
    })
}
