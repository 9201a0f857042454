//! Gaussian-kernel convolution of ICE curves onto a dense uniform grid,
//! yielding C¹ curves together with their first derivative.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::FeatureGrid;
use crate::ice::{IceBundle, IceCurve};

/// Kernel support in bandwidths on each side.
pub const TRUNCATION: f64 = 4.0;
pub const DEFAULT_DENSE_SIZE: usize = 201;
pub const DEFAULT_BANDWIDTH_FRACTION: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SmoothError {
    #[error("bandwidth must be positive and finite, got {0}")]
    Bandwidth(f64),
    #[error("dense grid of {dense} points is coarser than the {coarse}-point input grid")]
    DenseTooSmall { dense: usize, coarse: usize },
    #[error("curve has {got} values for a {expected}-point grid")]
    Length { expected: usize, got: usize },
    #[error("smoothed bundle file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothCurve {
    pub id: usize,
    grid: Arc<[f64]>,
    pub values: Vec<f64>,
    pub derivative: Vec<f64>,
    pub bandwidth: f64,
}

impl SmoothCurve {
    pub fn new(
        id: usize,
        grid: Arc<[f64]>,
        values: Vec<f64>,
        derivative: Vec<f64>,
        bandwidth: f64,
    ) -> Result<Self, SmoothError> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(SmoothError::Bandwidth(bandwidth));
        }
        for len in [values.len(), derivative.len()] {
            if len != grid.len() {
                return Err(SmoothError::Length { expected: grid.len(), got: len });
            }
        }
        Ok(SmoothCurve { id, grid, values, derivative, bandwidth })
    }

    pub fn grid(&self) -> &Arc<[f64]> {
        &self.grid
    }

    pub fn shares_grid(&self, other: &SmoothCurve) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || self.grid == other.grid
    }
}

pub fn default_bandwidth(grid: &FeatureGrid) -> f64 {
    DEFAULT_BANDWIDTH_FRACTION * grid.span()
}

/// `size` equally spaced points spanning the grid, endpoints exact.
pub fn dense_grid(grid: &FeatureGrid, size: usize) -> Vec<f64> {
    let (lo, hi) = (grid.min(), grid.max());
    let last = (size - 1) as f64;
    (0..size)
        .map(|i| if i + 1 == size { hi } else { lo + (hi - lo) * (i as f64 / last) })
        .collect()
}

/// Piecewise-linear interpolation of `(xs, ys)` at increasing points `at`.
pub fn interpolate(xs: &[f64], ys: &[f64], at: &[f64]) -> Vec<f64> {
    let mut seg = 0;
    at.iter()
        .map(|&t| {
            while seg + 2 < xs.len() && t > xs[seg + 1] {
                seg += 1;
            }
            let (x0, x1) = (xs[seg], xs[seg + 1]);
            let u = ((t - x0) / (x1 - x0)).clamp(0.0, 1.0);
            ys[seg] + u * (ys[seg + 1] - ys[seg])
        })
        .collect()
}

/// Maps any integer offset onto `0..len` by even reflection about both
/// endpoints (period `2 (len - 1)`).
fn mirror(index: isize, len: usize) -> usize {
    let period = 2 * (len as isize - 1);
    let m = index.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Precomputed smoothing and derivative kernels for one input grid,
/// bandwidth and dense size.
#[derive(Debug, Clone)]
pub struct GaussianSmoother {
    coarse: Vec<f64>,
    dense: Arc<[f64]>,
    bandwidth: f64,
    half_width: usize,
    weights: Vec<f64>,
    slopes: Vec<f64>,
}

impl GaussianSmoother {
    pub fn new(grid: &FeatureGrid, bandwidth: f64, dense_size: usize) -> Result<Self, SmoothError> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(SmoothError::Bandwidth(bandwidth));
        }
        if dense_size < grid.len() {
            return Err(SmoothError::DenseTooSmall { dense: dense_size, coarse: grid.len() });
        }
        let dense = dense_grid(grid, dense_size);
        let step = grid.span() / (dense_size - 1) as f64;
        let half_width = ((TRUNCATION * bandwidth / step + 1e-9).floor() as usize).max(1);

        // Offsets k = -P..=P, symmetric by construction.
        let offset = |k: usize| (k as f64 - half_width as f64) * step;
        let len = 2 * half_width + 1;
        let mut weights = vec![0.0; len];
        for k in half_width..len {
            let s = offset(k) / bandwidth;
            let w = (-0.5 * s * s).exp();
            weights[k] = w;
            weights[len - 1 - k] = w;
        }
        let mass: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= mass);

        // Analytic derivative-of-Gaussian taps, rescaled so a unit slope is
        // reproduced exactly.
        let mut slopes = vec![0.0; len];
        for k in half_width + 1..len {
            let s = offset(k);
            let d = -s / (bandwidth * bandwidth) * weights[k];
            slopes[k] = d;
            slopes[len - 1 - k] = -d;
        }
        let first_moment: f64 = -(0..len).map(|k| slopes[k] * offset(k)).sum::<f64>();
        if first_moment.is_finite() && first_moment > f64::MIN_POSITIVE {
            slopes.iter_mut().for_each(|d| *d /= first_moment);
        } else {
            // Bandwidth far below the grid step: the taps underflow, so use a
            // centred difference.
            slopes.iter_mut().for_each(|d| *d = 0.0);
            slopes[half_width + 1] = -0.5 / step;
            slopes[half_width - 1] = 0.5 / step;
        }

        Ok(GaussianSmoother {
            coarse: grid.values().to_vec(),
            dense: dense.into(),
            bandwidth,
            half_width,
            weights,
            slopes,
        })
    }

    pub fn dense(&self) -> &Arc<[f64]> {
        &self.dense
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn apply(&self, curve: &IceCurve) -> Result<SmoothCurve, SmoothError> {
        if curve.values.len() != self.coarse.len() {
            return Err(SmoothError::Length { expected: self.coarse.len(), got: curve.values.len() });
        }
        let input = interpolate(&self.coarse, &curve.values, &self.dense);
        let g = input.len();
        let p = self.half_width as isize;
        let mut values = Vec::with_capacity(g);
        let mut derivative = Vec::with_capacity(g);
        for (i, &centre) in input.iter().enumerate() {
            // Accumulate deviations from the centre value: constants pass
            // through exactly and the derivative of a constant is exactly 0.
            let mut v = 0.0;
            let mut d = 0.0;
            for (k, (w, s)) in self.weights.iter().zip(&self.slopes).enumerate() {
                let src = input[mirror(i as isize + p - k as isize, g)] - centre;
                v += w * src;
                d += s * src;
            }
            values.push(centre + v);
            derivative.push(d);
        }
        SmoothCurve::new(curve.id, Arc::clone(&self.dense), values, derivative, self.bandwidth)
    }
}

pub fn gaussian_convolve(
    curve: &IceCurve,
    grid: &FeatureGrid,
    bandwidth: f64,
    dense_size: usize,
) -> Result<SmoothCurve, SmoothError> {
    GaussianSmoother::new(grid, bandwidth, dense_size)?.apply(curve)
}

/// Smooths every curve of a bundle onto one shared dense grid, in bundle
/// order.
pub fn smooth_bundle(bundle: &IceBundle, bandwidth: f64, dense_size: usize) -> Result<Vec<SmoothCurve>, SmoothError> {
    let smoother = GaussianSmoother::new(bundle.grid(), bandwidth, dense_size)?;
    bundle.curves().par_iter().map(|c| smoother.apply(c)).collect()
}

/// Writes `id,grid_value,prediction,derivative` rows.
pub fn write_smooth_csv<W: Write>(curves: &[SmoothCurve], mut w: W) -> std::io::Result<()> {
    writeln!(w, "id,grid_value,prediction,derivative")?;
    for c in curves {
        for ((t, v), d) in c.grid.iter().zip(&c.values).zip(&c.derivative) {
            writeln!(w, "{},{t},{v},{d}", c.id)?;
        }
    }
    w.flush()
}

pub fn read_smooth_csv<R: BufRead>(reader: R, bandwidth: f64) -> Result<Vec<SmoothCurve>, SmoothError> {
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| SmoothError::Format("empty file".into()))??;
    if header.trim() != "id,grid_value,prediction,derivative" {
        return Err(SmoothError::Format(format!("unexpected header `{header}`")));
    }
    let mut rows: Vec<(usize, Vec<f64>, Vec<f64>, Vec<f64>)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || SmoothError::Format(format!("line {}: `{line}`", lineno + 2));
        if fields.len() != 4 {
            return Err(bad());
        }
        let id: usize = fields[0].parse().map_err(|_| bad())?;
        let nums: Vec<f64> = fields[1..].iter().map(|s| s.parse()).collect::<Result<_, _>>().map_err(|_| bad())?;
        match rows.last_mut() {
            Some(r) if r.0 == id => {
                r.1.push(nums[0]);
                r.2.push(nums[1]);
                r.3.push(nums[2]);
            }
            _ => rows.push((id, vec![nums[0]], vec![nums[1]], vec![nums[2]])),
        }
    }
    let grid: Arc<[f64]> = match rows.first() {
        Some(r) => r.1.clone().into(),
        None => return Err(SmoothError::Format("no curves".into())),
    };
    rows.into_iter()
        .map(|(id, t, v, d)| {
            if *t != *grid {
                return Err(SmoothError::Format(format!("curve {id} is on a different grid")));
            }
            SmoothCurve::new(id, Arc::clone(&grid), v, d, bandwidth)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GridStrategy;

    fn unit_grid(m: usize) -> FeatureGrid {
        FeatureGrid::new("x", (0..m).map(|i| i as f64 / (m - 1) as f64).collect(), GridStrategy::Uniform).unwrap()
    }

    #[test]
    fn mirror_reflects_about_both_ends() {
        let idx: Vec<usize> = (-4..9).map(|i| mirror(i, 5)).collect();
        assert_eq!(idx, vec![4, 3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1, 0]);
    }

    #[test]
    fn kernels_are_normalized() {
        let s = GaussianSmoother::new(&unit_grid(11), 0.05, 201).unwrap();
        let mass: f64 = s.weights.iter().sum();
        assert!((mass - 1.0).abs() < 1e-15);
        assert!(s.slopes.iter().sum::<f64>().abs() < 1e-12);
        assert_eq!(s.half_width, 40);
    }

    #[test]
    fn constant_passes_through_exactly() {
        let grid = unit_grid(7);
        let c = IceCurve { id: 0, values: vec![2.75; 7] };
        let s = gaussian_convolve(&c, &grid, 0.1, 101).unwrap();
        assert!(s.values.iter().all(|&v| v == 2.75));
        assert!(s.derivative.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn default_bandwidth_scales_with_span() {
        let g = FeatureGrid::new("x", vec![0.0, 10.0], GridStrategy::Uniform).unwrap();
        assert!((default_bandwidth(&g) - 0.5).abs() < 1e-15);
        let g = FeatureGrid::new("x", vec![3.0, 4.0], GridStrategy::Uniform).unwrap();
        assert!((default_bandwidth(&g) - 0.05).abs() < 1e-15);
        let g2 = FeatureGrid::new("x", vec![3.0, 5.0], GridStrategy::Uniform).unwrap();
        assert!((default_bandwidth(&g2) - 2.0 * default_bandwidth(&g)).abs() < 1e-15);
    }

    #[test]
    fn argument_errors() {
        let grid = unit_grid(5);
        let c = IceCurve { id: 0, values: vec![0.0; 5] };
        assert!(matches!(gaussian_convolve(&c, &grid, 0.0, 11), Err(SmoothError::Bandwidth(_))));
        assert!(matches!(gaussian_convolve(&c, &grid, -1.0, 11), Err(SmoothError::Bandwidth(_))));
        assert!(matches!(gaussian_convolve(&c, &grid, 0.1, 4), Err(SmoothError::DenseTooSmall { .. })));
        let short = IceCurve { id: 0, values: vec![0.0; 4] };
        assert!(matches!(gaussian_convolve(&short, &grid, 0.1, 11), Err(SmoothError::Length { .. })));
    }

    #[test]
    fn interpolation_hits_nodes_and_midpoints() {
        let xs = [0.0, 1.0, 3.0];
        let ys = [0.0, 2.0, 0.0];
        assert_eq!(interpolate(&xs, &ys, &[0.0, 0.5, 1.0, 2.0, 3.0]), vec![0.0, 1.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn smoothed_csv_round_trip() {
        let grid = unit_grid(4);
        let bundle = IceBundle::new(
            grid,
            vec![IceCurve { id: 2, values: vec![0.0, 1.0, 0.5, 0.2] }, IceCurve { id: 5, values: vec![1.0; 4] }],
        )
        .unwrap();
        let curves = smooth_bundle(&bundle, 0.1, 21).unwrap();
        let mut buf = Vec::new();
        write_smooth_csv(&curves, &mut buf).unwrap();
        let back = read_smooth_csv(&buf[..], 0.1).unwrap();
        assert_eq!(back, curves);
    }
}
