//! Independent reference implementations and generators shared by the
//! integration tests. Nothing here calls into the clustering internals.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spice::fdmetrics::{DissimilarityMatrix, MatrixRole};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Symmetric matrix with iid uniform off-diagonal entries, max scaled to 1.
pub fn random_matrix(rng: &mut ChaCha8Rng, n: usize, role: MatrixRole) -> DissimilarityMatrix {
    let upper: Vec<f64> = (0..n * (n - 1) / 2).map(|_| rng.gen_range(0.05..1.0)).collect();
    let max = upper.iter().copied().fold(0.0, f64::max);
    DissimilarityMatrix::from_upper(n, upper.iter().map(|v| v / max).collect(), role).unwrap()
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.gen::<f64>()).collect()).collect()
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Euclidean distances of a point cloud, max scaled to 1.
pub fn euclidean_matrix(points: &[Vec<f64>], role: MatrixRole) -> DissimilarityMatrix {
    let n = points.len();
    let mut upper = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            upper.push(euclid(&points[i], &points[j]));
        }
    }
    let max = upper.iter().copied().fold(0.0, f64::max);
    DissimilarityMatrix::from_upper(n, upper.iter().map(|v| v / max).collect(), role).unwrap()
}

pub fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Mixed pseudo-inertia straight from its definition.
pub fn inertia(d0: &DissimilarityMatrix, d1: &DissimilarityMatrix, alpha: f64, w: &[f64], members: &[usize]) -> f64 {
    let mu: f64 = members.iter().map(|&i| w[i]).sum();
    let (mut s0, mut s1) = (0.0, 0.0);
    for &i in members {
        for &j in members {
            s0 += w[i] * w[j] * d0.get(i, j).powi(2);
            s1 += w[i] * w[j] * d1.get(i, j).powi(2);
        }
    }
    (1.0 - alpha) * s0 / (2.0 * mu) + alpha * s1 / (2.0 * mu)
}

/// Merge `(smaller id, larger id, cost)` triples.
pub type Merges = Vec<(usize, usize, f64)>;

/// Exhaustive greedy agglomeration: at every step evaluate
/// `I(A ∪ B) - I(A) - I(B)` for every pair from scratch and take the
/// smallest, ties by ids.
pub fn brute_force_greedy(d0: &DissimilarityMatrix, d1: &DissimilarityMatrix, alpha: f64, w: &[f64]) -> Merges {
    let n = w.len();
    let mut clusters: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
    let mut merges = Vec::new();
    let mut next = n;
    while clusters.len() > 1 {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for x in 0..clusters.len() {
            for y in x + 1..clusters.len() {
                let (ia, a) = &clusters[x];
                let (ib, b) = &clusters[y];
                let union: Vec<usize> = a.iter().chain(b).copied().collect();
                let cost = inertia(d0, d1, alpha, w, &union) - inertia(d0, d1, alpha, w, a) - inertia(d0, d1, alpha, w, b);
                let key = (cost, (*ia).min(*ib), (*ia).max(*ib));
                let better = match best {
                    None => true,
                    Some((c, lo, hi, _, _)) => key.0 < c || (key.0 == c && (key.1, key.2) < (lo, hi)),
                };
                if better {
                    best = Some((key.0, key.1, key.2, x, y));
                }
            }
        }
        let (cost, lo, hi, x, y) = best.unwrap();
        merges.push((lo, hi, cost));
        let b = clusters.remove(y).1;
        let a = clusters.remove(x).1;
        clusters.push((next, a.into_iter().chain(b).collect()));
        next += 1;
    }
    merges
}

/// Classical weighted Ward on point coordinates: merge cost
/// `mu_A mu_B / (mu_A + mu_B) * |c_A - c_B|^2` with centroids `c`.
/// Returns the labelling after each number of merges, indexed by K.
pub fn centroid_ward(points: &[Vec<f64>], w: &[f64]) -> BTreeMap<usize, Vec<usize>> {
    let n = points.len();
    struct C {
        id: usize,
        mass: f64,
        centroid: Vec<f64>,
        members: Vec<usize>,
    }
    let mut clusters: Vec<C> =
        (0..n).map(|i| C { id: i, mass: w[i], centroid: points[i].clone(), members: vec![i] }).collect();
    let labels_of = |clusters: &[C]| {
        let mut labels = vec![0; n];
        for (k, c) in clusters.iter().enumerate() {
            for &m in &c.members {
                labels[m] = k;
            }
        }
        labels
    };
    let mut out = BTreeMap::new();
    out.insert(n, labels_of(&clusters));
    let mut next = n;
    while clusters.len() > 1 {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for x in 0..clusters.len() {
            for y in x + 1..clusters.len() {
                let (a, b) = (&clusters[x], &clusters[y]);
                let d2: f64 = a.centroid.iter().zip(&b.centroid).map(|(p, q)| (p - q) * (p - q)).sum();
                let cost = a.mass * b.mass / (a.mass + b.mass) * d2;
                let (lo, hi) = (a.id.min(b.id), a.id.max(b.id));
                let better = match best {
                    None => true,
                    Some((c, l, h, _, _)) => cost < c || (cost == c && (lo, hi) < (l, h)),
                };
                if better {
                    best = Some((cost, lo, hi, x, y));
                }
            }
        }
        let (_, _, _, x, y) = best.unwrap();
        let b = clusters.remove(y);
        let a = clusters.remove(x);
        let mass = a.mass + b.mass;
        let centroid = a.centroid.iter().zip(&b.centroid).map(|(p, q)| (a.mass * p + b.mass * q) / mass).collect();
        clusters.push(C { id: next, mass, centroid, members: a.members.into_iter().chain(b.members).collect() });
        next += 1;
        out.insert(clusters.len(), labels_of(&clusters));
    }
    out
}

/// Relabels by order of first appearance so equal partitions compare equal.
pub fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

/// Adjusted Rand index from the pair-counting definition, O(n^2).
pub fn ari_by_pairs(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut only_a, mut only_b, mut neither) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..n {
        for j in i + 1..n {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => both += 1.0,
                (true, false) => only_a += 1.0,
                (false, true) => only_b += 1.0,
                (false, false) => neither += 1.0,
            }
        }
    }
    let total = both + only_a + only_b + neither;
    let expected = (both + only_a) * (both + only_b) / total;
    let max = ((both + only_a) + (both + only_b)) / 2.0;
    (both - expected) / (max - expected)
}

/// Two-region synthetic listings: the west half has response slope `-1` in
/// `x`, the east half `-0.2`. Coordinates sit around Montevideo; `east` and
/// `north` repeat the location in kilometres so a model can see it.
pub struct TwoRegions {
    pub csv: String,
    pub region: Vec<usize>,
}

pub const TWO_REGION_FEATURES: &str = "x,east,north";

pub fn two_regions(n: usize, seed: u64) -> TwoRegions {
    let mut rng = rng(seed);
    let (lat0, lon0) = (-34.89, -56.16);
    let mut csv = String::from("x,east,north,y,lat,long\n");
    let mut region = Vec::with_capacity(n);
    for _ in 0..n {
        let east: f64 = rng.gen_range(-6.0..6.0);
        let north: f64 = rng.gen_range(-3.0..3.0);
        let x: f64 = rng.gen();
        let r = usize::from(east >= 0.0);
        let (a, b) = if r == 0 { (-1.0, 0.0) } else { (-0.2, 0.4) };
        let y = a * x + b + 0.05 * (rng.gen::<f64>() - 0.5);
        let lat = lat0 + north / 111.195;
        let lon = lon0 + east / (111.195 * lat0.to_radians().cos());
        let _ = writeln!(csv, "{x},{east},{north},{y},{lat},{lon}");
        region.push(r);
    }
    TwoRegions { csv, region }
}

/// Rows with the full listing layout (ten explanatory columns, log price per
/// square metre, coordinates) and a plausible, made-up price surface.
pub fn listing_like_csv(n: usize, seed: u64) -> String {
    let mut rng = rng(seed);
    let mut s = String::from(
        "amenities,bedrooms,bathroom,elevators,condition,expenses,garage,ldistance_beach,lsup_constru,neighborhoodgr,lpreciom2,lat,long\n",
    );
    let zones = ["centro", "costa", "norte", "oeste"];
    for _ in 0..n {
        let lat: f64 = rng.gen_range(-34.92..-34.84);
        let lon: f64 = rng.gen_range(-56.25..-56.05);
        let amenities = rng.gen_range(0..8);
        let bedrooms = rng.gen_range(0..5);
        let bathroom = rng.gen_range(1..4);
        let elevators = rng.gen_range(0..3);
        let condition = if rng.gen::<f64>() < 0.3 { "new" } else { "used" };
        let expenses: f64 = rng.gen_range(1000.0..15000.0);
        let garage = rng.gen_range(0..3);
        let ldist: f64 = rng.gen_range(3.0..9.0);
        let lsup: f64 = rng.gen_range(3.3..6.0);
        let zone = zones[rng.gen_range(0..zones.len())];
        let coastal = lat < -34.89;
        let slope = if coastal { -0.35 } else { -0.1 };
        let y = 7.5 + slope * lsup - 0.05 * ldist + 0.02 * amenities as f64 + 0.1 * f64::from(condition == "new")
            + 0.05 * (rng.gen::<f64>() - 0.5);
        let _ = writeln!(
            s,
            "{amenities},{bedrooms},{bathroom},{elevators},{condition},{expenses:.0},{garage},{ldist},{lsup},{zone},{y},{lat},{lon}"
        );
    }
    s
}

pub fn write_file(path: &Path, text: &str) {
    let mut f = std::fs::File::create(path).unwrap();
    f.write_all(text.as_bytes()).unwrap();
}

/// Parses an SVG document and returns the number of elements.
pub fn assert_well_formed_svg(svg: &str) -> usize {
    let doc = roxmltree::Document::parse(svg).unwrap_or_else(|e| panic!("SVG is not well-formed XML: {e}"));
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    doc.descendants().filter(|n| n.is_element()).count()
}

/// Writes one line straight to stderr, bypassing the test harness capture.
pub fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}
