//! Ward-like hierarchical clustering driven by two dissimilarities mixed
//! through `alpha`, with explained-inertia diagnostics (`Q_beta`), mixing
//! parameter selection and per-cluster summary curves.
//!
//! The mixed pseudo-inertia of a cluster `C` with total weight `mu` is
//!
//! ```text
//! I_a(C) = (1 - a) sum_{i,j in C} w_i w_j d0_ij^2 / (2 mu)
//!        +      a  sum_{i,j in C} w_i w_j d1_ij^2 / (2 mu)
//! ```
//!
//! Both terms are linear in the squared dissimilarities, so clustering runs
//! a single weighted Ward pass on `(1 - a) d0^2 + a d1^2`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::fdmetrics::DissimilarityMatrix;
use crate::smoothing::SmoothCurve;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("weights: {0}")]
    Weights(String),
    #[error("need at least 2 observations, got {0}")]
    TooFew(usize),
    #[error("matrix sizes differ: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("mixing parameter {0} is outside [0, 1]")]
    Alpha(f64),
    #[error("cluster has zero total weight")]
    ZeroMass,
    #[error("empty cluster")]
    EmptyCluster,
    #[error("member index {0} out of range")]
    MemberOutOfRange(usize),
    #[error("K = {k} is outside 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error("total inertia at beta = {0} is zero")]
    ZeroTotalInertia(f64),
    #[error("alpha grid: {0}")]
    AlphaGrid(String),
    #[error("Q_{beta} at alpha = {beta} is zero for K = {k}; gains are undefined")]
    DegenerateGain { beta: f64, k: usize },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Nonnegative observation weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights(Vec<f64>);

impl Weights {
    pub fn new(w: Vec<f64>) -> Result<Self, ClusterError> {
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(ClusterError::Weights("entries must be finite and nonnegative".into()));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(ClusterError::Weights(format!("sum is {sum}, expected 1")));
        }
        Ok(Weights(w))
    }

    pub fn uniform(n: usize) -> Self {
        Weights(vec![1.0 / n as f64; n])
    }

    /// Rescales arbitrary nonnegative masses to sum to one.
    pub fn normalized(mut w: Vec<f64>) -> Result<Self, ClusterError> {
        let sum: f64 = w.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return Err(ClusterError::Weights("total mass must be positive".into()));
        }
        w.iter_mut().for_each(|v| *v /= sum);
        // Rounding can leave the sum a few ulps off; fold it into the largest
        // entry.
        let sum: f64 = w.iter().sum();
        let imax = (0..w.len()).max_by(|&a, &b| w[a].total_cmp(&w[b])).expect("nonempty");
        w[imax] += 1.0 - sum;
        Weights::new(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_alpha(alpha: f64) -> Result<(), ClusterError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ClusterError::Alpha(alpha));
    }
    Ok(())
}

fn check_sizes(d0: &DissimilarityMatrix, d1: &DissimilarityMatrix, weights: &Weights) -> Result<usize, ClusterError> {
    if d0.len() != d1.len() {
        return Err(ClusterError::SizeMismatch(d0.len(), d1.len()));
    }
    if weights.len() != d0.len() {
        return Err(ClusterError::SizeMismatch(d0.len(), weights.len()));
    }
    Ok(d0.len())
}

/// `sum_{i in C} sum_{j in C} w_i w_j d_ij^2 / (2 mu)`, summed in ascending
/// index order.
pub fn pseudo_inertia(d: &DissimilarityMatrix, weights: &Weights, members: &[usize]) -> Result<f64, ClusterError> {
    if members.is_empty() {
        return Err(ClusterError::EmptyCluster);
    }
    if let Some(&m) = members.iter().find(|&&m| m >= d.len() || m >= weights.len()) {
        return Err(ClusterError::MemberOutOfRange(m));
    }
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    let w = weights.as_slice();
    let mu: f64 = sorted.iter().map(|&i| w[i]).sum();
    if mu <= 0.0 {
        return Err(ClusterError::ZeroMass);
    }
    // Symmetric with a zero diagonal: twice the strict upper triangle.
    let (n, upper) = (d.len(), d.upper());
    let mut acc = 0.0;
    for (x, &i) in sorted.iter().enumerate() {
        let row = i * n - i * (i + 1) / 2;
        let mut inner = 0.0;
        for &j in &sorted[x + 1..] {
            let dij = upper[row + j - i - 1];
            inner += w[j] * dij * dij;
        }
        acc += w[i] * inner;
    }
    Ok(acc / mu)
}

pub fn mixed_pseudo_inertia(
    d0: &DissimilarityMatrix,
    d1: &DissimilarityMatrix,
    alpha: f64,
    weights: &Weights,
    members: &[usize],
) -> Result<f64, ClusterError> {
    check_alpha(alpha)?;
    check_sizes(d0, d1, weights)?;
    // A zero coefficient contributes exactly nothing; skip the pass.
    let part = |d, c: f64| if c == 0.0 { Ok(0.0) } else { pseudo_inertia(d, weights, members).map(|v| c * v) };
    Ok(part(d0, 1.0 - alpha)? + part(d1, alpha)?)
}

/// Flat clustering: `labels[i]` in `0..k`, labels numbered by each cluster's
/// smallest member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    labels: Vec<usize>,
    clusters: Vec<Vec<usize>>,
}

impl Partition {
    /// Accepts any labelling and renumbers clusters by smallest member.
    pub fn from_labels(raw: &[usize]) -> Result<Self, ClusterError> {
        if raw.is_empty() {
            return Err(ClusterError::Partition("no observations".into()));
        }
        let mut renumber: BTreeMap<usize, usize> = BTreeMap::new();
        let mut labels = Vec::with_capacity(raw.len());
        let mut clusters: Vec<Vec<usize>> = Vec::new();
        for (i, &l) in raw.iter().enumerate() {
            let next = renumber.len();
            let label = *renumber.entry(l).or_insert(next);
            if label == clusters.len() {
                clusters.push(Vec::new());
            }
            clusters[label].push(i);
            labels.push(label);
        }
        Ok(Partition { labels, clusters })
    }

    pub fn singletons(n: usize) -> Self {
        Partition { labels: (0..n).collect(), clusters: (0..n).map(|i| vec![i]).collect() }
    }

    pub fn single(n: usize) -> Self {
        Partition { labels: vec![0; n], clusters: vec![(0..n).collect()] }
    }

    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(Vec::len).collect()
    }

    /// Writes `id,label` lines with 1-based labels; `ids[i]` names observation `i`.
    pub fn write_csv<W: Write>(&self, ids: &[usize], mut w: W) -> std::io::Result<()> {
        writeln!(w, "id,label")?;
        for (id, label) in ids.iter().zip(&self.labels) {
            writeln!(w, "{id},{}", label + 1)?;
        }
        w.flush()
    }

    pub fn read_csv<R: BufRead>(reader: R) -> Result<(Vec<usize>, Partition), ClusterError> {
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if lineno == 0 {
                if line.trim() != "id,label" {
                    return Err(ClusterError::Format(format!("unexpected partition header `{line}`")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let bad = || ClusterError::Format(format!("partition line {}: `{line}`", lineno + 1));
            let (id, label) = line.split_once(',').ok_or_else(bad)?;
            ids.push(id.trim().parse::<usize>().map_err(|_| bad())?);
            let label: usize = label.trim().parse().map_err(|_| bad())?;
            labels.push(label.checked_sub(1).ok_or_else(bad)?);
        }
        Ok((ids, Partition::from_labels(&labels)?))
    }
}

/// `W_a(P) = sum_k I_a(C_k)`, in cluster order.
pub fn partition_inertia(
    d0: &DissimilarityMatrix,
    d1: &DissimilarityMatrix,
    alpha: f64,
    weights: &Weights,
    partition: &Partition,
) -> Result<f64, ClusterError> {
    let n = check_sizes(d0, d1, weights)?;
    if partition.len() != n {
        return Err(ClusterError::SizeMismatch(n, partition.len()));
    }
    let mut total = 0.0;
    for members in partition.clusters() {
        total += mixed_pseudo_inertia(d0, d1, alpha, weights, members)?;
    }
    Ok(total)
}

/// One agglomeration step. Leaves are `0..n`; step `s` creates cluster `n + s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub delta: f64,
    pub id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    n: usize,
    alpha: f64,
    merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn leaves(&self) -> usize {
        self.n
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    /// Writes `step,clusterA,clusterB,delta` with 1-based steps.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,clusterA,clusterB,delta")?;
        for (s, m) in self.merges.iter().enumerate() {
            writeln!(w, "{},{},{},{}", s + 1, m.a, m.b, m.delta)?;
        }
        w.flush()
    }

    pub fn read_csv<R: BufRead>(reader: R, alpha: f64) -> Result<Self, ClusterError> {
        let mut merges = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if lineno == 0 {
                if line.trim() != "step,clusterA,clusterB,delta" {
                    return Err(ClusterError::Format(format!("unexpected dendrogram header `{line}`")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let bad = || ClusterError::Format(format!("dendrogram line {}: `{line}`", lineno + 1));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let step: usize = f[0].parse().map_err(|_| bad())?;
            if step != merges.len() + 1 {
                return Err(bad());
            }
            merges.push(Merge {
                a: f[1].parse().map_err(|_| bad())?,
                b: f[2].parse().map_err(|_| bad())?,
                delta: f[3].parse().map_err(|_| bad())?,
                id: 0,
            });
        }
        let n = merges.len() + 1;
        let mut seen = vec![false; 2 * n - 1];
        for (s, m) in merges.iter_mut().enumerate() {
            m.id = n + s;
            for c in [m.a, m.b] {
                if c >= m.id || seen[c] {
                    return Err(ClusterError::Format(format!("merge {} reuses or forward-references {c}", s + 1)));
                }
                seen[c] = true;
            }
        }
        Ok(Dendrogram { n, alpha, merges })
    }
}

/// Strict upper triangle of an `n × n` matrix, mutable.
struct Condensed {
    n: usize,
    data: Vec<f64>,
}

impl Condensed {
    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        i * self.n - i * (i + 1) / 2 + (j - i - 1)
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.idx(i, j)]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] = v;
    }
}

#[inline]
fn ward_ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Total order on candidate merges: cost, then the smaller cluster id, then
/// the larger one.
#[inline]
fn pair_key(delta: f64, id_a: usize, id_b: usize) -> (f64, usize, usize) {
    (delta, id_a.min(id_b), id_a.max(id_b))
}

#[inline]
fn key_less(a: (f64, usize, usize), b: (f64, usize, usize)) -> bool {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)).is_lt()
}

/// Greedy agglomeration minimizing `I_a(A ∪ B) - I_a(A) - I_a(B)` at each
/// step. Merge costs follow the weighted Lance–Williams recurrence on the
/// mixed squared dissimilarity; each active cluster caches its cheapest
/// partner so a step costs O(n) plus one O(n) rescan per invalidated cache.
pub fn ward_cluster(
    d0: &DissimilarityMatrix,
    d1: &DissimilarityMatrix,
    alpha: f64,
    weights: &Weights,
) -> Result<Dendrogram, ClusterError> {
    check_alpha(alpha)?;
    let n = check_sizes(d0, d1, weights)?;
    if n < 2 {
        return Err(ClusterError::TooFew(n));
    }
    let w = weights.as_slice();
    let (u0, u1) = (d0.upper(), d1.upper());
    let mut delta = Condensed { n, data: Vec::with_capacity(u0.len()) };
    for i in 0..n {
        let row = i * n - i * (i + 1) / 2;
        for j in i + 1..n {
            let k = row + (j - i - 1);
            let sq = (1.0 - alpha) * u0[k] * u0[k] + alpha * u1[k] * u1[k];
            delta.data.push(ward_ratio(w[i] * w[j] * sq, w[i] + w[j]));
        }
    }

    let mut active: Vec<usize> = (0..n).collect();
    let mut position: Vec<usize> = (0..n).collect();
    let mut is_active = vec![true; n];
    let mut ids: Vec<usize> = (0..n).collect();
    let mut mass: Vec<f64> = w.to_vec();
    let mut nearest = vec![usize::MAX; n];
    let mut nearest_delta = vec![f64::INFINITY; n];

    let rescan = |slot: usize,
                  active: &[usize],
                  ids: &[usize],
                  delta: &Condensed,
                  nearest: &mut [usize],
                  nearest_delta: &mut [f64]| {
        let mut best = usize::MAX;
        let mut best_key = (f64::INFINITY, usize::MAX, usize::MAX);
        for &other in active {
            if other == slot {
                continue;
            }
            let key = pair_key(delta.get(slot, other), ids[slot], ids[other]);
            if best == usize::MAX || key_less(key, best_key) {
                best = other;
                best_key = key;
            }
        }
        nearest[slot] = best;
        nearest_delta[slot] = best_key.0;
    };

    for slot in 0..n {
        rescan(slot, &active, &ids, &delta, &mut nearest, &mut nearest_delta);
    }

    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..n - 1 {
        let mut a = usize::MAX;
        let mut best_key = (f64::INFINITY, usize::MAX, usize::MAX);
        for &slot in &active {
            let key = pair_key(nearest_delta[slot], ids[slot], ids[nearest[slot]]);
            if a == usize::MAX || key_less(key, best_key) {
                a = slot;
                best_key = key;
            }
        }
        let b = nearest[a];
        let (keep, drop) = if a < b { (a, b) } else { (b, a) };
        let dab = delta.get(keep, drop);
        let new_id = n + step;
        merges.push(Merge { a: best_key.1, b: best_key.2, delta: dab, id: new_id });

        let (ma, mb) = (mass[keep], mass[drop]);
        for &c in &active {
            if c == keep || c == drop {
                continue;
            }
            let mc = mass[c];
            let updated = ward_ratio(
                (ma + mc) * delta.get(keep, c) + (mb + mc) * delta.get(drop, c) - mc * dab,
                ma + mb + mc,
            );
            delta.set(keep, c, updated);
        }
        mass[keep] = ma + mb;
        ids[keep] = new_id;
        is_active[drop] = false;
        let p = position[drop];
        active.swap_remove(p);
        if p < active.len() {
            position[active[p]] = p;
        }

        if active.len() < 2 {
            continue;
        }
        rescan(keep, &active, &ids, &delta, &mut nearest, &mut nearest_delta);
        for idx in 0..active.len() {
            let c = active[idx];
            if c == keep {
                continue;
            }
            if nearest[c] == keep || nearest[c] == drop {
                rescan(c, &active, &ids, &delta, &mut nearest, &mut nearest_delta);
            } else {
                let cand = pair_key(delta.get(c, keep), ids[c], new_id);
                let cur = pair_key(nearest_delta[c], ids[c], ids[nearest[c]]);
                if key_less(cand, cur) {
                    nearest[c] = keep;
                    nearest_delta[c] = cand.0;
                }
            }
        }
    }
    debug_assert!(is_active.iter().filter(|&&x| x).count() == 1);
    Ok(Dendrogram { n, alpha, merges })
}

/// Partition left after the first `n - k` merges.
pub fn cut(dendrogram: &Dendrogram, k: usize) -> Result<Partition, ClusterError> {
    let n = dendrogram.n;
    if k == 0 || k > n {
        return Err(ClusterError::KOutOfRange { k, n });
    }
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut representative: Vec<usize> = (0..2 * n - 1).map(|c| c.min(n - 1)).collect();
    for m in &dendrogram.merges[..n - k] {
        let ra = find(&mut parent, representative[m.a]);
        let rb = find(&mut parent, representative[m.b]);
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
        representative[m.id] = lo;
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    Partition::from_labels(&roots)
}

/// Share of the total inertia at mixing `beta` explained by `partition`:
/// `1 - W_beta(P) / W_beta(P_1)`.
pub fn q_beta(
    d0: &DissimilarityMatrix,
    d1: &DissimilarityMatrix,
    beta: f64,
    weights: &Weights,
    partition: &Partition,
) -> Result<f64, ClusterError> {
    let n = check_sizes(d0, d1, weights)?;
    let total = partition_inertia(d0, d1, beta, weights, &Partition::single(n))?;
    if total <= 0.0 {
        return Err(ClusterError::ZeroTotalInertia(beta));
    }
    Ok(1.0 - partition_inertia(d0, d1, beta, weights, partition)? / total)
}

/// `Q_0` and `Q_1` traces along an alpha grid at one K.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaReport {
    pub k: usize,
    pub alphas: Vec<f64>,
    pub q0: Vec<f64>,
    pub q1: Vec<f64>,
    pub recommended: f64,
}

impl AlphaReport {
    /// Writes `alpha,q0,q1` rows followed by a `recommended,<alpha>` line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "alpha,q0,q1")?;
        for ((a, q0), q1) in self.alphas.iter().zip(&self.q0).zip(&self.q1) {
            writeln!(w, "{a},{q0},{q1}")?;
        }
        writeln!(w, "recommended,{}", self.recommended)?;
        w.flush()
    }

    pub fn read_csv<R: BufRead>(reader: R, k: usize) -> Result<Self, ClusterError> {
        let mut report = AlphaReport { k, alphas: vec![], q0: vec![], q1: vec![], recommended: f64::NAN };
        let mut saw_recommended = false;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let bad = || ClusterError::Format(format!("alpha report line {}: `{line}`", lineno + 1));
            if lineno == 0 {
                if line.trim() != "alpha,q0,q1" {
                    return Err(bad());
                }
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            match f.as_slice() {
                [""] => continue,
                ["recommended", a] => {
                    report.recommended = a.parse().map_err(|_| bad())?;
                    saw_recommended = true;
                }
                [a, q0, q1] => {
                    report.alphas.push(a.parse().map_err(|_| bad())?);
                    report.q0.push(q0.parse().map_err(|_| bad())?);
                    report.q1.push(q1.parse().map_err(|_| bad())?);
                }
                _ => return Err(bad()),
            }
        }
        if !saw_recommended || report.alphas.is_empty() {
            return Err(ClusterError::Format("alpha report is incomplete".into()));
        }
        Ok(report)
    }
}

/// `alpha` values `0, 1/steps, ..., 1`.
pub fn alpha_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

fn check_alpha_grid(grid: &[f64]) -> Result<(), ClusterError> {
    if grid.len() < 2 || grid[0] != 0.0 || grid[grid.len() - 1] != 1.0 {
        return Err(ClusterError::AlphaGrid("must start at 0 and end at 1".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(ClusterError::AlphaGrid("must be strictly increasing".into()));
    }
    Ok(())
}

/// Clusters once per grid value and evaluates every requested K on the same
/// dendrogram. Reports come back in `ks` order.
pub fn alpha_traces(
    d0: &DissimilarityMatrix,
    d1: &DissimilarityMatrix,
    weights: &Weights,
    ks: &[usize],
    grid: &[f64],
) -> Result<Vec<AlphaReport>, ClusterError> {
    check_alpha_grid(grid)?;
    let n = check_sizes(d0, d1, weights)?;
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(ClusterError::KOutOfRange { k, n });
    }
    let single = Partition::single(n);
    let mut totals = [0.0; 2];
    for (total, beta) in totals.iter_mut().zip([0.0, 1.0]) {
        *total = partition_inertia(d0, d1, beta, weights, &single)?;
        if *total <= 0.0 {
            return Err(ClusterError::ZeroTotalInertia(beta));
        }
    }
    // Same arithmetic as `q_beta`, with the totals computed once.
    let explained = |beta: f64, total: f64, p: &Partition| -> Result<f64, ClusterError> {
        Ok(1.0 - partition_inertia(d0, d1, beta, weights, p)? / total)
    };
    // Per alpha: (q0, q1) for every K.
    let per_alpha: Vec<Vec<(f64, f64)>> = grid
        .par_iter()
        .map(|&alpha| {
            let tree = ward_cluster(d0, d1, alpha, weights)?;
            ks.iter()
                .map(|&k| {
                    let p = cut(&tree, k)?;
                    Ok((explained(0.0, totals[0], &p)?, explained(1.0, totals[1], &p)?))
                })
                .collect::<Result<Vec<_>, ClusterError>>()
        })
        .collect::<Result<_, _>>()?;

    ks.iter()
        .enumerate()
        .map(|(ki, &k)| {
            let q0: Vec<f64> = per_alpha.iter().map(|v| v[ki].0).collect();
            let q1: Vec<f64> = per_alpha.iter().map(|v| v[ki].1).collect();
            let recommended = recommend_alpha(grid, &q0, &q1, k)?;
            Ok(AlphaReport { k, alphas: grid.to_vec(), q0, q1, recommended })
        })
        .collect()
}

/// Grid value maximizing `min(Q0(a) / Q0(0), Q1(a) / Q1(1))`; the earliest
/// wins ties.
fn recommend_alpha(grid: &[f64], q0: &[f64], q1: &[f64], k: usize) -> Result<f64, ClusterError> {
    let base0 = q0[0];
    let base1 = q1[q1.len() - 1];
    if !(base0 > 0.0) {
        return Err(ClusterError::DegenerateGain { beta: 0.0, k });
    }
    if !(base1 > 0.0) {
        return Err(ClusterError::DegenerateGain { beta: 1.0, k });
    }
    let mut best = grid[0];
    let mut best_score = f64::NEG_INFINITY;
    for ((&a, &g0), &g1) in grid.iter().zip(q0).zip(q1) {
        let score = (g0 / base0).min(g1 / base1);
        if score > best_score {
            best = a;
            best_score = score;
        }
    }
    Ok(best)
}

pub fn choose_alpha(
    d0: &DissimilarityMatrix,
    d1: &DissimilarityMatrix,
    weights: &Weights,
    k: usize,
    grid: &[f64],
) -> Result<AlphaReport, ClusterError> {
    Ok(alpha_traces(d0, d1, weights, &[k], grid)?.remove(0))
}

/// Weighted mean smoothed curve (values and derivative) of each cluster;
/// the returned curve ids are cluster labels.
pub fn spice_curves(
    partition: &Partition,
    curves: &[SmoothCurve],
    weights: &Weights,
) -> Result<Vec<SmoothCurve>, ClusterError> {
    if curves.len() != partition.len() || weights.len() != partition.len() {
        return Err(ClusterError::SizeMismatch(partition.len(), curves.len()));
    }
    let first = curves.first().ok_or(ClusterError::TooFew(0))?;
    if curves.iter().any(|c| !c.shares_grid(first)) {
        return Err(ClusterError::Partition("curves are on different grids".into()));
    }
    let w = weights.as_slice();
    let g = first.values.len();
    partition
        .clusters()
        .iter()
        .enumerate()
        .map(|(label, members)| {
            let mu: f64 = members.iter().map(|&i| w[i]).sum();
            if mu <= 0.0 {
                return Err(ClusterError::ZeroMass);
            }
            let mut values = vec![0.0; g];
            let mut derivative = vec![0.0; g];
            for &i in members {
                for t in 0..g {
                    values[t] += w[i] * curves[i].values[t];
                    derivative[t] += w[i] * curves[i].derivative[t];
                }
            }
            values.iter_mut().for_each(|v| *v /= mu);
            derivative.iter_mut().for_each(|v| *v /= mu);
            SmoothCurve::new(label, Arc::clone(first.grid()), values, derivative, first.bandwidth)
                .map_err(|e| ClusterError::Partition(e.to_string()))
        })
        .collect()
}

/// Chance-corrected agreement between two labellings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labellings differ in length");
    let pairs = |m: f64| m * (m - 1.0) / 2.0;
    let mut table: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, f64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *rows.entry(x).or_default() += 1.0;
        *cols.entry(y).or_default() += 1.0;
    }
    let index: f64 = table.values().map(|&m| pairs(m)).sum();
    let sum_rows: f64 = rows.values().map(|&m| pairs(m)).sum();
    let sum_cols: f64 = cols.values().map(|&m| pairs(m)).sum();
    let expected = sum_rows * sum_cols / pairs(a.len() as f64);
    let max_index = 0.5 * (sum_rows + sum_cols);
    if max_index == expected {
        return 1.0;
    }
    (index - expected) / (max_index - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdmetrics::MatrixRole;

    fn matrix(n: usize, f: impl Fn(usize, usize) -> f64 + Sync) -> DissimilarityMatrix {
        DissimilarityMatrix::from_fn(n, MatrixRole::Curves, f).unwrap()
    }

    #[test]
    fn weights_validation() {
        assert!(Weights::new(vec![0.5, 0.5]).is_ok());
        assert!(Weights::new(vec![0.5, 0.6]).is_err());
        assert!(Weights::new(vec![1.5, -0.5]).is_err());
        let w = Weights::normalized(vec![1.0, 3.0]).unwrap();
        assert_eq!(w.as_slice(), &[0.25, 0.75]);
    }

    #[test]
    fn inertia_small_cases() {
        let d = matrix(2, |_, _| 2.0);
        let w = Weights::uniform(2);
        assert_eq!(pseudo_inertia(&d, &w, &[0]).unwrap(), 0.0);
        assert_eq!(pseudo_inertia(&d, &w, &[0, 1]).unwrap(), 1.0);
        assert!(matches!(pseudo_inertia(&d, &w, &[]), Err(ClusterError::EmptyCluster)));
        let zero = Weights::new(vec![0.0, 1.0]).unwrap();
        assert!(matches!(pseudo_inertia(&d, &zero, &[0]), Err(ClusterError::ZeroMass)));
    }

    #[test]
    fn equal_distances_closed_form() {
        // |C| = m members of n, uniform weights, all distances d:
        // sum over ordered pairs m (m - 1) (1/n)^2 d^2 / (2 m / n) = (m - 1) d^2 / (2 n).
        let n = 6;
        let d = matrix(n, |_, _| 1.5);
        let w = Weights::uniform(n);
        for m in 1..=n {
            let members: Vec<usize> = (0..m).collect();
            let expected = (m as f64 - 1.0) / (2.0 * n as f64) * 1.5 * 1.5;
            assert!((pseudo_inertia(&d, &w, &members).unwrap() - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn mixed_inertia_endpoints_and_midpoint() {
        let d0 = matrix(2, |_, _| 2.0);
        let d1 = matrix(2, |_, _| 8f64.sqrt());
        let w = Weights::uniform(2);
        let i0 = pseudo_inertia(&d0, &w, &[0, 1]).unwrap();
        let i1 = pseudo_inertia(&d1, &w, &[0, 1]).unwrap();
        assert_eq!(mixed_pseudo_inertia(&d0, &d1, 0.0, &w, &[0, 1]).unwrap(), i0);
        assert_eq!(mixed_pseudo_inertia(&d0, &d1, 1.0, &w, &[0, 1]).unwrap(), i1);
        // I0 = 1, I1 = 2 here; scale the hand example I0 = 2, I1 = 4 by 2.
        let mid = mixed_pseudo_inertia(&d0, &d1, 0.5, &w, &[0, 1]).unwrap();
        assert!((2.0 * mid - 3.0).abs() < 1e-12);
        assert!(matches!(mixed_pseudo_inertia(&d0, &d1, 1.5, &w, &[0]), Err(ClusterError::Alpha(_))));
    }

    #[test]
    fn two_leaf_dendrogram() {
        let d0 = matrix(2, |_, _| 0.8);
        let d1 = matrix(2, |_, _| 0.4);
        let w = Weights::new(vec![0.25, 0.75]).unwrap();
        let t = ward_cluster(&d0, &d1, 0.3, &w).unwrap();
        let sq = 0.7 * 0.64 + 0.3 * 0.16;
        assert_eq!(t.merges().len(), 1);
        let m = t.merges()[0];
        assert_eq!((m.a, m.b, m.id), (0, 1, 2));
        assert!((m.delta - 0.25 * 0.75 * sq / 1.0).abs() < 1e-15);
    }

    #[test]
    fn three_point_first_merge() {
        let d = matrix(3, |i, j| if (i, j) == (0, 1) { 1.0 } else { 10.0 });
        let w = Weights::uniform(3);
        let t = ward_cluster(&d, &d, 0.0, &w).unwrap();
        assert_eq!((t.merges()[0].a, t.merges()[0].b), (0, 1));
        assert_eq!((t.merges()[1].a, t.merges()[1].b), (2, 3));
        let p = cut(&t, 2).unwrap();
        assert_eq!(p.clusters(), &[vec![0, 1], vec![2]]);
        assert_eq!(cut(&t, 3).unwrap(), Partition::singletons(3));
        assert_eq!(cut(&t, 1).unwrap(), Partition::single(3));
        assert!(matches!(cut(&t, 0), Err(ClusterError::KOutOfRange { .. })));
        assert!(matches!(cut(&t, 4), Err(ClusterError::KOutOfRange { .. })));
    }

    #[test]
    fn ties_resolve_by_cluster_id() {
        let d = matrix(4, |_, _| 1.0);
        let t = ward_cluster(&d, &d, 0.5, &Weights::uniform(4)).unwrap();
        let pairs: Vec<(usize, usize)> = t.merges().iter().map(|m| (m.a, m.b)).collect();
        // After {0,1} -> 4, the pair {2,3} (cost 1/8) beats joins with 4 (cost 1/6).
        assert_eq!(pairs, vec![(0, 1), (2, 3), (4, 5)]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let d = matrix(3, |_, _| 1.0);
        let small = matrix(2, |_, _| 1.0);
        assert!(matches!(ward_cluster(&d, &small, 0.5, &Weights::uniform(3)), Err(ClusterError::SizeMismatch(..))));
        assert!(matches!(ward_cluster(&d, &d, -0.1, &Weights::uniform(3)), Err(ClusterError::Alpha(_))));
        let one = matrix(1, |_, _| 0.0);
        assert!(matches!(ward_cluster(&one, &one, 0.0, &Weights::uniform(1)), Err(ClusterError::TooFew(1))));
    }

    #[test]
    fn two_pairs_inertia_and_q() {
        // Points on a line at 0, 1, 10, 12; uniform weights.
        let x = [0.0f64, 1.0, 10.0, 12.0];
        let d = matrix(4, |i, j| (x[i] - x[j]).abs());
        let w = Weights::uniform(4);
        let pairs = Partition::from_labels(&[0, 0, 1, 1]).unwrap();
        // Within pair: 2 * (1/16) d^2 / (2 * 1/2) = d^2 / 8.
        let within = 1.0 / 8.0 + 4.0 / 8.0;
        let w_pairs = partition_inertia(&d, &d, 0.0, &w, &pairs).unwrap();
        assert!((w_pairs - within).abs() < 1e-14);
        // Total: sum over ordered pairs (1/16) d^2 / (2 * 1).
        let sq: f64 = [1.0f64, 10.0, 12.0, 9.0, 11.0, 2.0].iter().map(|v| v * v).sum();
        let total = 2.0 * sq / 16.0 / 2.0;
        assert!((partition_inertia(&d, &d, 0.0, &w, &Partition::single(4)).unwrap() - total).abs() < 1e-12);
        let q = q_beta(&d, &d, 0.0, &w, &pairs).unwrap();
        assert!((q - (1.0 - within / total)).abs() < 1e-14);
        assert_eq!(q_beta(&d, &d, 0.0, &w, &Partition::single(4)).unwrap(), 0.0);
        assert_eq!(q_beta(&d, &d, 1.0, &w, &Partition::singletons(4)).unwrap(), 1.0);
        assert_eq!(partition_inertia(&d, &d, 0.3, &w, &Partition::singletons(4)).unwrap(), 0.0);
    }

    #[test]
    fn identical_matrices_give_flat_traces() {
        let x = [0.0f64, 0.3, 1.0, 4.0, 4.2, 9.0];
        let d = matrix(6, |i, j| (x[i] - x[j]).abs() / 9.0);
        let r = choose_alpha(&d, &d, &Weights::uniform(6), 3, &alpha_grid(10)).unwrap();
        assert_eq!(r.q0, r.q1);
        assert_eq!(r.recommended, 0.0);
        assert_eq!(r.alphas.len(), 11);
    }

    #[test]
    fn alpha_grid_validation() {
        let d = matrix(3, |_, _| 1.0);
        let w = Weights::uniform(3);
        assert!(choose_alpha(&d, &d, &w, 2, &[0.0, 0.5]).is_err());
        assert!(choose_alpha(&d, &d, &w, 2, &[0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(choose_alpha(&d, &d, &w, 4, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn spice_curve_weighted_mean() {
        let grid: Arc<[f64]> = vec![0.0, 0.5, 1.0].into();
        let c0 = SmoothCurve::new(0, Arc::clone(&grid), vec![0.0; 3], vec![0.0; 3], 0.1).unwrap();
        let c1 = SmoothCurve::new(1, Arc::clone(&grid), vec![4.0; 3], vec![1.0; 3], 0.1).unwrap();
        let w = Weights::new(vec![0.25, 0.75]).unwrap();
        let out = spice_curves(&Partition::single(2), &[c0.clone(), c1], &w).unwrap();
        assert_eq!(out[0].values, vec![3.0; 3]);
        assert_eq!(out[0].derivative, vec![0.75; 3]);
        let same = spice_curves(&Partition::single(2), &[c0.clone(), c0.clone()], &Weights::uniform(2)).unwrap();
        assert_eq!(same[0].values, c0.values);
    }

    #[test]
    fn ari_extremes() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 2, 2]), 1.0);
        let ari = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]);
        assert!(ari < 0.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[1, 1, 1]), 1.0);
    }

    #[test]
    fn text_formats_round_trip() {
        let x = [0.0f64, 1.0, 5.0, 7.0];
        let d = matrix(4, |i, j| (x[i] - x[j]).abs() / 7.0);
        let t = ward_cluster(&d, &d, 0.0, &Weights::uniform(4)).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(Dendrogram::read_csv(&buf[..], 0.0).unwrap(), t);

        let p = cut(&t, 2).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&[10, 11, 12, 13], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "id,label\n10,1\n11,1\n12,2\n13,2\n");
        let (ids, back) = Partition::read_csv(&buf[..]).unwrap();
        assert_eq!((ids, back), (vec![10, 11, 12, 13], p));

        let r = AlphaReport { k: 2, alphas: vec![0.0, 1.0], q0: vec![0.9, 0.5], q1: vec![0.2, 0.8], recommended: 1.0 };
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "alpha,q0,q1\n0,0.9,0.2\n1,0.5,0.8\nrecommended,1\n");
        assert_eq!(AlphaReport::read_csv(&buf[..], 2).unwrap(), r);
    }
}
