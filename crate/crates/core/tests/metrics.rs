mod common;

use std::sync::Arc;

use common::*;
use proptest::prelude::*;
use spice::fdmetrics::{
    curve_dissimilarity_matrix, haversine_km, normalize, sobolev_distance, sobolev_norm,
    spatial_dissimilarity_matrix, spatial_dissimilarity_matrix_in, trapezoid_weights, DissimilarityMatrix,
    DistanceUnit, MatrixRole, SpatialMetric,
};
use spice::smoothing::SmoothCurve;

fn unit_grid(g: usize) -> Arc<[f64]> {
    (0..g).map(|i| i as f64 / (g - 1) as f64).collect()
}

fn curve(grid: &Arc<[f64]>, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> SmoothCurve {
    SmoothCurve::new(0, Arc::clone(grid), grid.iter().map(|&t| f(t)).collect(), grid.iter().map(|&t| df(t)).collect(), 0.05)
        .unwrap()
}

#[test]
fn quadrature_error_shrinks_quadratically() {
    let tau = std::f64::consts::TAU;
    let exact = (0.5 + tau * tau / 2.0).sqrt();
    let err = |g: usize| {
        let grid = unit_grid(g);
        (sobolev_norm(&curve(&grid, |t| (tau * t).sin(), |t| tau * (tau * t).cos())) - exact).abs()
    };
    // Periodic integrands make the trapezoid rule exact up to rounding, so
    // use a non-periodic one for the rate.
    let poly_exact = (1.0f64 / 7.0 + 9.0 / 5.0).sqrt();
    let poly = |g: usize| {
        let grid = unit_grid(g);
        (sobolev_norm(&curve(&grid, |t| t.powi(3), |t| 3.0 * t * t)) - poly_exact).abs()
    };
    assert!(err(1001) < 1e-9);
    let (e1, e2) = (poly(101), poly(201));
    assert!(e1 > 0.0 && e2 < e1 / 3.5, "{e1:e} -> {e2:e}");
}

#[test]
fn trapezoid_weights_sum_to_the_span_on_uneven_grids() {
    let grid = [0.0, 0.1, 0.5, 0.55, 2.0];
    let w = trapezoid_weights(&grid);
    assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-15);
    assert_eq!(w[0], 0.05);
}

#[test]
fn curve_matrix_entries_are_pairwise_distances() {
    let grid = unit_grid(51);
    let curves: Vec<SmoothCurve> = (0..6)
        .map(|k| {
            let a = k as f64;
            let mut c = curve(&grid, |t| a * t * t, |t| 2.0 * a * t);
            c.id = k;
            c
        })
        .collect();
    let m = curve_dissimilarity_matrix(&curves).unwrap();
    for i in 0..6 {
        for j in 0..6 {
            let d = if i == j { 0.0 } else { sobolev_distance(&curves[i], &curves[j]).unwrap() };
            assert_eq!(m.get(i, j), d);
        }
    }
    // Distances between a*t^2 scale linearly in |a - b|.
    let unit = m.get(0, 1);
    assert!((m.get(1, 4) - 3.0 * unit).abs() < 1e-12);
}

#[test]
fn city_scale_planar_and_great_circle_agree_after_normalization() {
    let mut rng = rng(12);
    use rand::Rng;
    let coords: Vec<(f64, f64)> =
        (0..150).map(|_| (rng.gen_range(-34.94..-34.83), rng.gen_range(-56.27..-56.02))).collect();
    let planar = normalize(&spatial_dissimilarity_matrix(&coords, SpatialMetric::Planar).unwrap()).unwrap();
    let sphere = normalize(&spatial_dissimilarity_matrix(&coords, SpatialMetric::GreatCircle).unwrap()).unwrap();
    let worst = planar
        .upper()
        .iter()
        .zip(sphere.upper())
        .filter(|(_, &s)| s > 0.05)
        .map(|(&p, &s)| (p - s).abs() / s)
        .fold(0.0, f64::max);
    assert!(worst < 0.005, "max relative difference {worst}");

    let degrees = normalize(&spatial_dissimilarity_matrix_in(&coords, SpatialMetric::GreatCircle, DistanceUnit::Degrees).unwrap()).unwrap();
    for (a, b) in degrees.upper().iter().zip(sphere.upper()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn haversine_reference_distances() {
    // Quarter meridian and a degree of equator on a 6371 km sphere.
    assert!((haversine_km((0.0, 0.0), (90.0, 0.0)) - 6371.0 * std::f64::consts::FRAC_PI_2).abs() < 1e-6);
    assert!((haversine_km((0.0, 10.0), (0.0, 11.0)) - 111.194_926_6).abs() < 1e-5);
    assert_eq!(haversine_km((-34.9, -56.2), (-34.9, -56.2)), 0.0);
}

#[test]
fn matrix_text_round_trip() {
    let mut rng = rng(3);
    let m = random_matrix(&mut rng, 9, MatrixRole::Mixed);
    let mut buf = Vec::new();
    m.write_text(&mut buf).unwrap();
    let back = DissimilarityMatrix::read_text(&buf[..], MatrixRole::Mixed).unwrap();
    assert_eq!(back.upper(), m.upper());
}

#[test]
fn malformed_inputs_are_rejected() {
    assert!(DissimilarityMatrix::from_upper(4, vec![1.0; 5], MatrixRole::Curves).is_err());
    assert!(DissimilarityMatrix::from_upper(3, vec![1.0, -1.0, 0.5], MatrixRole::Curves).is_err());
    assert!(DissimilarityMatrix::from_upper(3, vec![1.0, f64::NAN, 0.5], MatrixRole::Curves).is_err());
    assert!(spatial_dissimilarity_matrix(&[(95.0, 0.0), (0.0, 0.0)], SpatialMetric::Planar).is_err());
    assert!(normalize(&DissimilarityMatrix::from_upper(2, vec![0.0], MatrixRole::Spatial).unwrap()).is_err());
    let a = curve(&unit_grid(5), |t| t, |_| 1.0);
    let b = curve(&unit_grid(6), |t| t, |_| 1.0);
    assert!(sobolev_distance(&a, &b).is_err());
}

proptest! {
    #[test]
    fn sobolev_distance_is_a_metric(
        a in prop::collection::vec(-3.0f64..3.0, 2 * 21),
        b in prop::collection::vec(-3.0f64..3.0, 2 * 21),
        c in prop::collection::vec(-3.0f64..3.0, 2 * 21),
    ) {
        let grid = unit_grid(21);
        let mk = |v: &[f64]| SmoothCurve::new(0, Arc::clone(&grid), v[..21].to_vec(), v[21..].to_vec(), 0.1).unwrap();
        let (x, y, z) = (mk(&a), mk(&b), mk(&c));
        let d = |p: &SmoothCurve, q: &SmoothCurve| sobolev_distance(p, q).unwrap();
        prop_assert_eq!(d(&x, &x), 0.0);
        prop_assert_eq!(d(&x, &y), d(&y, &x));
        prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-12);
    }

    #[test]
    fn spatial_distances_satisfy_the_triangle_inequality(
        pts in prop::collection::vec((-35.0f64..-34.7, -56.4f64..-55.9), 3..12),
        planar in any::<bool>(),
    ) {
        let metric = if planar { SpatialMetric::Planar } else { SpatialMetric::GreatCircle };
        let m = spatial_dissimilarity_matrix(&pts, metric).unwrap();
        let n = pts.len();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(m.get(i, j), m.get(j, i));
                for k in 0..n {
                    prop_assert!(m.get(i, k) <= m.get(i, j) + m.get(j, k) + 1e-9);
                }
            }
        }
        let normalized = normalize(&m);
        if let Ok(nm) = normalized {
            prop_assert!(nm.upper().iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert_eq!(nm.max(), 1.0);
        }
    }
}
