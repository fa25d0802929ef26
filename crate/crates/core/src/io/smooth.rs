//! Nadaraya–Watson smoothing of scattered values onto a regular grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::influence::quantile_sorted;

/// Grid nodes whose total kernel mass falls below this are reported missing.
pub const MIN_KERNEL_MASS: f64 = 1e-12;

pub const DEFAULT_GRID_SIZE: usize = 50;

/// A smoothed surface. `values[r][c]` sits at `(x[c], y[r])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSection {
    pub x_name: String,
    pub y_name: String,
    pub value_name: String,
    pub bandwidth: [f64; 2],
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub values: Vec<Vec<Option<f64>>>,
}

fn gaussian(u: f64, h: f64) -> f64 {
    (-0.5 * (u / h).powi(2)).exp() / (h * (2.0 * std::f64::consts::PI).sqrt())
}

/// Kernel-weighted average of `value` at every `(gx, gy)` node with a
/// Gaussian product kernel. Points are summed in sorted order so the result
/// does not depend on input order.
pub fn nadaraya_watson_grid(
    points: &[(f64, f64, f64)],
    bandwidth: [f64; 2],
    grid_x: &[f64],
    grid_y: &[f64],
) -> Result<Vec<Vec<Option<f64>>>> {
    if points.is_empty() {
        return Err(Error::EmptyInput("no points to smooth"));
    }
    if !bandwidth.iter().all(|h| *h > 0.0 && h.is_finite()) {
        return Err(Error::parse(
            "bandwidth",
            format!("bandwidths must be positive, got {bandwidth:?}"),
        ));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.total_cmp(&b.2))
    });
    Ok(grid_y
        .iter()
        .map(|&gy| {
            grid_x
                .iter()
                .map(|&gx| {
                    let (mut mass, mut acc) = (0.0, 0.0);
                    for &(px, py, v) in &sorted {
                        let k = gaussian(gx - px, bandwidth[0]) * gaussian(gy - py, bandwidth[1]);
                        mass += k;
                        acc += k * v;
                    }
                    (mass >= MIN_KERNEL_MASS).then(|| acc / mass)
                })
                .collect()
        })
        .collect())
}

/// Silverman's rule `0.9 min(sd, IQR / 1.34) n^(-1/5)`. Falls back to the
/// standard deviation, then to 1, for degenerate samples.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 1.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let iqr = (quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25)) / 1.34;
    let spread = if iqr > 0.0 { sd.min(iqr) } else { sd };
    if spread > 0.0 {
        0.9 * spread * (n as f64).powf(-0.2)
    } else {
        1.0
    }
}

/// `size` evenly spaced nodes spanning the data range.
pub fn linspace_range(values: &[f64], size: usize) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if size <= 1 || lo == hi {
        return vec![lo; size.min(1)];
    }
    (0..size)
        .map(|k| lo + (hi - lo) * k as f64 / (size - 1) as f64)
        .collect()
}

/// Smooth with the default grid (50 x 50 over the data range) and Silverman
/// bandwidths per axis.
pub fn default_grid(names: [&str; 3], x: &[f64], y: &[f64], value: &[f64]) -> Result<GridSection> {
    if x.len() != y.len() || x.len() != value.len() {
        return Err(Error::Dimension(format!(
            "smoothing inputs have lengths {}, {}, {}",
            x.len(),
            y.len(),
            value.len()
        )));
    }
    let bandwidth = [silverman_bandwidth(x), silverman_bandwidth(y)];
    let gx = linspace_range(x, DEFAULT_GRID_SIZE);
    let gy = linspace_range(y, DEFAULT_GRID_SIZE);
    let points: Vec<(f64, f64, f64)> = (0..x.len()).map(|i| (x[i], y[i], value[i])).collect();
    let values = nadaraya_watson_grid(&points, bandwidth, &gx, &gy)?;
    Ok(GridSection {
        x_name: names[0].to_string(),
        y_name: names[1].to_string(),
        value_name: names[2].to_string(),
        bandwidth,
        x: gx,
        y: gy,
        values,
    })
}
