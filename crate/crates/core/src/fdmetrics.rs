//! Curve and spatial dissimilarities: Sobolev W^{1,2} distances between
//! smoothed curves, planar or great-circle distances between coordinates,
//! and max-normalization.

use std::fmt;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::smoothing::SmoothCurve;

pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("curves are not sampled on the same dense grid")]
    GridMismatch,
    #[error("need at least 2 observations, got {0}")]
    TooFew(usize),
    #[error("latitude {0} is outside [-90, 90]")]
    Latitude(f64),
    #[error("non-finite coordinate at row {0}")]
    NonFiniteCoordinate(usize),
    #[error("matrix has no positive entry; cannot normalize")]
    AllZero,
    #[error("invalid dissimilarity matrix: {0}")]
    Invalid(String),
    #[error("matrix file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixRole {
    Curves,
    Spatial,
    Mixed,
}

impl fmt::Display for MatrixRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatrixRole::Curves => "curves",
            MatrixRole::Spatial => "spatial",
            MatrixRole::Mixed => "mixed",
        })
    }
}

/// Symmetric, zero-diagonal, nonnegative `n × n` matrix stored as its
/// strict upper triangle, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DissimilarityMatrix {
    n: usize,
    upper: Vec<f64>,
    normalized: bool,
    role: MatrixRole,
}

#[inline]
fn condensed_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

impl DissimilarityMatrix {
    /// Wraps a strict upper triangle (`n (n - 1) / 2` entries, row-major).
    pub fn from_upper(n: usize, upper: Vec<f64>, role: MatrixRole) -> Result<Self, MetricError> {
        if upper.len() != n * n.saturating_sub(1) / 2 {
            return Err(MetricError::Invalid(format!("{} entries for n = {n}", upper.len())));
        }
        if let Some(v) = upper.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(MetricError::Invalid(format!("entry {v} is negative or not finite")));
        }
        Ok(DissimilarityMatrix { n, upper, normalized: false, role })
    }

    /// Builds the matrix from `f(i, j)` for `i < j`, rows in parallel.
    pub fn from_fn<F>(n: usize, role: MatrixRole, f: F) -> Result<Self, MetricError>
    where
        F: Fn(usize, usize) -> f64 + Sync,
    {
        let rows: Vec<Vec<f64>> = (0..n).into_par_iter().map(|i| (i + 1..n).map(|j| f(i, j)).collect()).collect();
        Self::from_upper(n, rows.concat(), role)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn role(&self) -> MatrixRole {
        self.role
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Less => self.upper[condensed_index(self.n, i, j)],
            std::cmp::Ordering::Greater => self.upper[condensed_index(self.n, j, i)],
        }
    }

    /// Strict upper triangle, row-major.
    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn max(&self) -> f64 {
        self.upper.iter().copied().fold(0.0, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> DissimilarityMatrix {
        DissimilarityMatrix {
            upper: self.upper.iter().map(|v| v * factor).collect(),
            normalized: false,
            ..self.clone()
        }
    }

    /// Writes `n` on the first line followed by `n` rows of `n`
    /// comma-separated values.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", self.n)?;
        let mut line = String::new();
        for i in 0..self.n {
            line.clear();
            for j in 0..self.n {
                if j > 0 {
                    line.push(',');
                }
                line.push_str(&self.get(i, j).to_string());
            }
            writeln!(w, "{line}")?;
        }
        w.flush()
    }

    /// Reads the text format, checking symmetry to 1e-9 and a zero diagonal.
    pub fn read_text<R: BufRead>(reader: R, role: MatrixRole) -> Result<Self, MetricError> {
        let mut lines = reader.lines();
        let first = lines.next().ok_or_else(|| MetricError::Format("empty file".into()))??;
        let n: usize = first.trim().parse().map_err(|_| MetricError::Format(format!("bad size `{first}`")))?;
        let mut full = Vec::with_capacity(n * n);
        for i in 0..n {
            let line = lines.next().ok_or_else(|| MetricError::Format(format!("missing row {i}")))??;
            let row: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| MetricError::Format(format!("row {i} is not numeric")))?;
            if row.len() != n {
                return Err(MetricError::Format(format!("row {i} has {} values", row.len())));
            }
            full.extend(row);
        }
        let mut upper = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            if full[i * n + i] != 0.0 {
                return Err(MetricError::Invalid(format!("non-zero diagonal at {i}")));
            }
            for j in i + 1..n {
                let (a, b) = (full[i * n + j], full[j * n + i]);
                if (a - b).abs() > 1e-9 {
                    return Err(MetricError::Invalid(format!("asymmetric at ({i}, {j})")));
                }
                upper.push(a);
            }
        }
        let mut m = Self::from_upper(n, upper, role)?;
        m.normalized = n > 1 && m.max() == 1.0;
        Ok(m)
    }
}

/// Trapezoid quadrature weights for the nodes of `grid`.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let g = grid.len();
    if g < 2 {
        return vec![0.0; g];
    }
    (0..g)
        .map(|i| {
            let left = if i > 0 { grid[i] - grid[i - 1] } else { 0.0 };
            let right = if i + 1 < g { grid[i + 1] - grid[i] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

fn sobolev_sq(weights: &[f64], values: impl Iterator<Item = (f64, f64)>) -> f64 {
    weights.iter().zip(values).map(|(q, (v, d))| q * (v * v + d * d)).sum()
}

/// `sqrt(∫ f² + ∫ f'²)` over the curve's dense grid by the trapezoid rule.
pub fn sobolev_norm(curve: &SmoothCurve) -> f64 {
    let q = trapezoid_weights(curve.grid());
    sobolev_sq(&q, curve.values.iter().copied().zip(curve.derivative.iter().copied())).sqrt()
}

pub fn sobolev_distance(a: &SmoothCurve, b: &SmoothCurve) -> Result<f64, MetricError> {
    if !a.shares_grid(b) {
        return Err(MetricError::GridMismatch);
    }
    let q = trapezoid_weights(a.grid());
    Ok(pair_distance(&q, a, b))
}

fn pair_distance(q: &[f64], a: &SmoothCurve, b: &SmoothCurve) -> f64 {
    let diffs = a
        .values
        .iter()
        .zip(&b.values)
        .zip(a.derivative.iter().zip(&b.derivative))
        .map(|((va, vb), (da, db))| (va - vb, da - db));
    sobolev_sq(q, diffs).sqrt()
}

/// Pairwise Sobolev distances between smoothed curves (role `curves`).
pub fn curve_dissimilarity_matrix(curves: &[SmoothCurve]) -> Result<DissimilarityMatrix, MetricError> {
    if curves.len() < 2 {
        return Err(MetricError::TooFew(curves.len()));
    }
    if curves.iter().any(|c| !c.shares_grid(&curves[0])) {
        return Err(MetricError::GridMismatch);
    }
    let q = trapezoid_weights(curves[0].grid());
    DissimilarityMatrix::from_fn(curves.len(), MatrixRole::Curves, |i, j| pair_distance(&q, &curves[i], &curves[j]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialMetric {
    /// Equirectangular projection about the mean latitude, then Euclidean.
    Planar,
    /// Haversine distance on a sphere.
    GreatCircle,
}

impl fmt::Display for SpatialMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpatialMetric::Planar => "planar",
            SpatialMetric::GreatCircle => "greatcircle",
        })
    }
}

impl std::str::FromStr for SpatialMetric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "planar" => Ok(SpatialMetric::Planar),
            "greatcircle" => Ok(SpatialMetric::GreatCircle),
            other => Err(format!("unknown spatial metric `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceUnit {
    Kilometers,
    /// Degrees of arc along a great circle (1° ≈ 111.195 km).
    Degrees,
}

pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let h = ((lat2 - lat1) / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * ((lon2 - lon1) / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Pairwise distances between `(latitude, longitude)` pairs in kilometers.
pub fn spatial_dissimilarity_matrix(
    coords: &[(f64, f64)],
    metric: SpatialMetric,
) -> Result<DissimilarityMatrix, MetricError> {
    spatial_dissimilarity_matrix_in(coords, metric, DistanceUnit::Kilometers)
}

pub fn spatial_dissimilarity_matrix_in(
    coords: &[(f64, f64)],
    metric: SpatialMetric,
    unit: DistanceUnit,
) -> Result<DissimilarityMatrix, MetricError> {
    if coords.len() < 2 {
        return Err(MetricError::TooFew(coords.len()));
    }
    for (i, &(lat, lon)) in coords.iter().enumerate() {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(MetricError::NonFiniteCoordinate(i));
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(MetricError::Latitude(lat));
        }
    }
    let per_km = match unit {
        DistanceUnit::Kilometers => 1.0,
        DistanceUnit::Degrees => 180.0 / (std::f64::consts::PI * EARTH_RADIUS_KM),
    };
    match metric {
        SpatialMetric::GreatCircle => {
            DissimilarityMatrix::from_fn(coords.len(), MatrixRole::Spatial, |i, j| {
                per_km * haversine_km(coords[i], coords[j])
            })
        }
        SpatialMetric::Planar => {
            let mean_lat = coords.iter().map(|c| c.0).sum::<f64>() / coords.len() as f64;
            let kx = EARTH_RADIUS_KM * mean_lat.to_radians().cos();
            let projected: Vec<(f64, f64)> = coords
                .iter()
                .map(|&(lat, lon)| (kx * lon.to_radians(), EARTH_RADIUS_KM * lat.to_radians()))
                .collect();
            DissimilarityMatrix::from_fn(coords.len(), MatrixRole::Spatial, |i, j| {
                let (a, b) = (projected[i], projected[j]);
                per_km * (a.0 - b.0).hypot(a.1 - b.1)
            })
        }
    }
}

/// Divides every entry by the matrix maximum.
pub fn normalize(matrix: &DissimilarityMatrix) -> Result<DissimilarityMatrix, MetricError> {
    let max = matrix.max();
    if max <= 0.0 {
        return Err(MetricError::AllZero);
    }
    if matrix.normalized && max == 1.0 {
        return Ok(matrix.clone());
    }
    Ok(DissimilarityMatrix {
        upper: matrix.upper.iter().map(|v| v / max).collect(),
        normalized: true,
        ..matrix.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn on_unit(f: impl Fn(f64) -> (f64, f64), g: usize) -> SmoothCurve {
        let t: Vec<f64> = (0..g).map(|i| i as f64 / (g - 1) as f64).collect();
        let (v, d): (Vec<f64>, Vec<f64>) = t.iter().map(|&x| f(x)).unzip();
        SmoothCurve::new(0, t.into(), v, d, 0.1).unwrap()
    }

    #[test]
    fn condensed_layout() {
        let m = DissimilarityMatrix::from_fn(4, MatrixRole::Mixed, |i, j| (10 * i + j) as f64).unwrap();
        assert_eq!(m.upper(), &[1.0, 2.0, 3.0, 12.0, 13.0, 23.0]);
        assert_eq!(m.get(3, 1), 13.0);
        assert_eq!(m.get(2, 2), 0.0);
    }

    #[test]
    fn constant_and_linear_norms() {
        assert_eq!(sobolev_norm(&on_unit(|_| (1.0, 0.0), 11)), 1.0);
        let t = sobolev_norm(&on_unit(|x| (x, 1.0), 1001));
        assert!((t - (1.0f64 / 3.0 + 1.0).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn distance_identities() {
        let zero = on_unit(|_| (0.0, 0.0), 101);
        let one = SmoothCurve::new(1, Arc::clone(zero.grid()), vec![1.0; 101], vec![0.0; 101], 0.1).unwrap();
        assert_eq!(sobolev_distance(&zero, &zero).unwrap(), 0.0);
        assert!((sobolev_distance(&zero, &one).unwrap() - 1.0).abs() < 1e-15);
        let other = on_unit(|_| (0.0, 0.0), 51);
        assert!(matches!(sobolev_distance(&zero, &other), Err(MetricError::GridMismatch)));
    }

    #[test]
    fn constant_offsets_matrix() {
        let base = on_unit(|_| (0.0, 0.0), 21);
        let curves: Vec<SmoothCurve> = [0.0, 1.0, 3.0]
            .iter()
            .enumerate()
            .map(|(id, &c)| SmoothCurve::new(id, Arc::clone(base.grid()), vec![c; 21], vec![0.0; 21], 0.1).unwrap())
            .collect();
        let m = curve_dissimilarity_matrix(&curves).unwrap();
        let expect = [1.0, 3.0, 2.0];
        assert!(m.upper().iter().zip(expect).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(matches!(curve_dissimilarity_matrix(&curves[..1]), Err(MetricError::TooFew(1))));
    }

    #[test]
    fn latitude_step_is_about_111_meters_per_thousandth() {
        let coords = [(-34.90, -56.16), (-34.91, -56.16)];
        for metric in [SpatialMetric::Planar, SpatialMetric::GreatCircle] {
            let d = spatial_dissimilarity_matrix(&coords, metric).unwrap().get(0, 1);
            assert!((d - 1.1119).abs() < 1e-4, "{metric}: {d}");
        }
        let same = spatial_dissimilarity_matrix(&[(1.0, 2.0), (1.0, 2.0)], SpatialMetric::Planar).unwrap();
        assert_eq!(same.get(0, 1), 0.0);
        assert!(matches!(
            spatial_dissimilarity_matrix(&[(91.0, 0.0), (0.0, 0.0)], SpatialMetric::GreatCircle),
            Err(MetricError::Latitude(_))
        ));
    }

    #[test]
    fn normalize_divides_by_max() {
        let m = DissimilarityMatrix::from_upper(3, vec![2.0, 4.0, 1.0], MatrixRole::Curves).unwrap();
        let n = normalize(&m).unwrap();
        assert_eq!(n.upper(), &[0.5, 1.0, 0.25]);
        assert!(n.is_normalized());
        assert_eq!(normalize(&n).unwrap(), n);
        let zero = DissimilarityMatrix::from_upper(2, vec![0.0], MatrixRole::Curves).unwrap();
        assert!(matches!(normalize(&zero), Err(MetricError::AllZero)));
    }

    #[test]
    fn text_round_trip_and_validation() {
        let m = DissimilarityMatrix::from_upper(3, vec![0.5, 1.0, 0.1], MatrixRole::Spatial).unwrap();
        let mut buf = Vec::new();
        m.write_text(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "3\n0,0.5,1\n0.5,0,0.1\n1,0.1,0\n");
        let back = DissimilarityMatrix::read_text(&buf[..], MatrixRole::Spatial).unwrap();
        assert_eq!(back.upper(), m.upper());
        assert!(back.is_normalized());
        let asym = "2\n0,1\n1.1,0\n";
        assert!(matches!(DissimilarityMatrix::read_text(asym.as_bytes(), MatrixRole::Curves), Err(MetricError::Invalid(_))));
        let diag = "2\n1,1\n1,0\n";
        assert!(DissimilarityMatrix::read_text(diag.as_bytes(), MatrixRole::Curves).is_err());
    }
}
