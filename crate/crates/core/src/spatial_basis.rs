//! Sites, knots, compactly supported Wendland bases and data-driven knot
//! placement.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Field, Scale};
use crate::seed::{derive_seed, rng_from_seed, Rng};

pub type Point = [f64; 2];

pub fn distance(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Observation locations. Site ids are the positions `0..n_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSet {
    coords: Vec<Point>,
}

impl SiteSet {
    pub fn new(coords: Vec<Point>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::domain("a site set needs at least one site"));
        }
        if coords.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::domain("site coordinates must be finite"));
        }
        let mut sorted: Vec<(usize, &Point)> = coords.iter().enumerate().collect();
        sorted.sort_by(|a, b| a.1.partial_cmp(b.1).unwrap());
        if let Some(w) = sorted.windows(2).find(|w| w[0].1 == w[1].1) {
            return Err(Error::domain(format!(
                "sites {} and {} share coordinates ({}, {})",
                w[0].0, w[1].0, w[0].1[0], w[0].1[1]
            )));
        }
        Ok(Self { coords })
    }

    /// Regular grid of cell centres covering `[x0, x0 + nx*spacing] x [y0, y0 + ny*spacing]`,
    /// ordered row by row.
    pub fn grid(origin: Point, spacing: f64, nx: usize, ny: usize) -> Result<Self> {
        if !(spacing > 0.0) || nx == 0 || ny == 0 {
            return Err(Error::domain("grid needs positive spacing and size"));
        }
        let coords = (0..ny)
            .flat_map(|iy| {
                (0..nx).map(move |ix| {
                    [
                        origin[0] + (ix as f64 + 0.5) * spacing,
                        origin[1] + (iy as f64 + 0.5) * spacing,
                    ]
                })
            })
            .collect();
        Self::new(coords)
    }

    /// `n` sites drawn uniformly on the square `[lo, hi]^2`.
    pub fn uniform_random(n: usize, lo: f64, hi: f64, rng: &mut Rng) -> Result<Self> {
        let coords = (0..n)
            .map(|_| [rng.random_range(lo..hi), rng.random_range(lo..hi)])
            .collect();
        Self::new(coords)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn coord(&self, j: usize) -> Point {
        self.coords[j]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<SiteSet> {
        let coords = indices
            .iter()
            .map(|&j| {
                self.coords.get(j).copied().ok_or(Error::Index {
                    index: j,
                    len: self.coords.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        SiteSet::new(coords)
    }

    /// Largest pairwise distance between sites.
    pub fn diameter(&self) -> f64 {
        let c = &self.coords;
        let mut best: f64 = 0.0;
        for i in 0..c.len() {
            for j in i + 1..c.len() {
                best = best.max(distance(&c[i], &c[j]));
            }
        }
        best
    }

    /// Index of the site closest to `p` (lowest index on ties).
    pub fn nearest(&self, p: &Point) -> usize {
        let mut best = (0, f64::INFINITY);
        for (j, c) in self.coords.iter().enumerate() {
            let d = distance(c, p);
            if d < best.1 {
                best = (j, d);
            }
        }
        best.0
    }
}

/// Knot centres sharing one Wendland radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotConfig {
    knots: Vec<Point>,
    radius: f64,
}

impl KnotConfig {
    pub fn new(knots: Vec<Point>, radius: f64) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::domain("at least one knot is required"));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::domain(format!("radius must be positive, got {radius}")));
        }
        if knots.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::domain("knot coordinates must be finite"));
        }
        Ok(Self { knots, radius })
    }

    /// `n x n` evenly spaced knots on `[lo, hi]^2`, placed at the centres of
    /// an `n x n` partition of the square.
    pub fn regular(n: usize, lo: f64, hi: f64, radius: f64) -> Result<Self> {
        let step = (hi - lo) / n as f64;
        let knots = (0..n)
            .flat_map(|iy| {
                (0..n).map(move |ix| {
                    [
                        lo + (ix as f64 + 0.5) * step,
                        lo + (iy as f64 + 0.5) * step,
                    ]
                })
            })
            .collect();
        Self::new(knots, radius)
    }

    pub fn knots(&self) -> &[Point] {
        &self.knots
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }
}

/// Nonnegative `n_s x K` weight matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisMatrix {
    n_sites: usize,
    n_knots: usize,
    weights: Vec<f64>,
    knot_config: Option<KnotConfig>,
}

impl BasisMatrix {
    /// Wraps raw weights. Entries must be finite and nonnegative; rows are
    /// not renormalized.
    pub fn from_weights(
        n_sites: usize,
        n_knots: usize,
        weights: Vec<f64>,
        knot_config: Option<KnotConfig>,
    ) -> Result<Self> {
        if n_sites == 0 || n_knots == 0 {
            return Err(Error::shape("basis needs at least one site and one knot"));
        }
        if weights.len() != n_sites * n_knots {
            return Err(Error::shape(format!(
                "basis has {} weights, expected {n_sites} x {n_knots}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::domain("basis weights must be finite and nonnegative"));
        }
        if let Some(kc) = &knot_config {
            if kc.len() != n_knots {
                return Err(Error::shape("knot configuration does not match basis columns"));
            }
        }
        Ok(Self {
            n_sites,
            n_knots,
            weights,
            knot_config,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::shape("ragged basis rows"));
        }
        Self::from_weights(rows.len(), k, rows.concat(), None)
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn n_knots(&self) -> usize {
        self.n_knots
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.weights[j * self.n_knots + k]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.n_knots..(j + 1) * self.n_knots]
    }

    pub fn knot_config(&self) -> Option<&KnotConfig> {
        self.knot_config.as_ref()
    }

    /// Knots with nonzero weight at site `j`.
    pub fn support(&self, j: usize) -> Vec<usize> {
        self.row(j)
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(k, _)| k)
            .collect()
    }

    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.n_sites)
            .map(|j| (self.row(j).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Wendland weight `{1 - d/r}^2_+`.
pub fn wendland_weight(distance: f64, radius: f64) -> Result<f64> {
    if !(distance.is_finite() && distance >= 0.0) {
        return Err(Error::domain(format!("distance must be finite and nonnegative, got {distance}")));
    }
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::domain(format!("radius must be finite and positive, got {radius}")));
    }
    Ok(if distance < radius {
        let v = 1.0 - distance / radius;
        v * v
    } else {
        0.0
    })
}

/// Row-standardized Wendland weights of `points` against `knots`.
///
/// Returns the index of the first uncovered point as a coverage error.
pub fn wendland_rows(points: &[Point], knots: &KnotConfig) -> Result<Vec<f64>> {
    let k = knots.len();
    let mut out = Vec::with_capacity(points.len() * k);
    for (j, p) in points.iter().enumerate() {
        let start = out.len();
        for c in knots.knots() {
            out.push(wendland_weight(distance(p, c), knots.radius())?);
        }
        let total: f64 = out[start..].iter().sum();
        if total <= 0.0 {
            return Err(Error::Coverage { site: j });
        }
        out[start..].iter_mut().for_each(|w| *w /= total);
    }
    Ok(out)
}

pub fn build_basis(sites: &SiteSet, knots: &KnotConfig) -> Result<BasisMatrix> {
    let weights = wendland_rows(sites.coords(), knots)?;
    BasisMatrix::from_weights(sites.len(), knots.len(), weights, Some(knots.clone()))
}

/// Grows `initial_radius` by a factor 1.05 until every site has positive raw
/// weight under some knot.
pub fn coverage_radius(knots: &[Point], sites: &SiteSet, initial_radius: f64) -> Result<f64> {
    if knots.is_empty() {
        return Err(Error::domain("coverage radius needs at least one knot"));
    }
    // Distance from each site to its closest knot; coverage needs d < r.
    let needed = sites
        .coords()
        .iter()
        .map(|s| knots.iter().map(|k| distance(s, k)).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max);
    let floor = 1e-9 * sites.diameter().max(1.0);
    let mut r = if initial_radius > 0.0 { initial_radius } else { floor };
    while r <= needed {
        r *= 1.05;
    }
    Ok(r)
}

/// Options for [`select_knots`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnotSelection {
    pub u_threshold: f64,
    pub merge_fraction: f64,
    pub k_max: usize,
    /// When set, pooled centroids are reduced to exactly this many knots by
    /// size-weighted k-means instead of distance merging.
    pub target_k: Option<usize>,
    pub seed: u64,
}

impl Default for KnotSelection {
    fn default() -> Self {
        Self {
            u_threshold: 0.95,
            merge_fraction: 0.1,
            k_max: 10,
            target_k: None,
            seed: 0,
        }
    }
}

/// Result of clustering one point cloud.
#[derive(Debug, Clone)]
pub struct Clustering {
    pub centroids: Vec<Point>,
    pub assignments: Vec<usize>,
    pub wss: f64,
}

impl Clustering {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.centroids.len()];
        self.assignments.iter().for_each(|&a| s[a] += 1);
        s
    }

    /// Largest distance from a member to its centroid.
    pub fn max_member_distance(&self, points: &[Point]) -> f64 {
        points
            .iter()
            .zip(&self.assignments)
            .map(|(p, &a)| distance(p, &self.centroids[a]))
            .fold(0.0, f64::max)
    }
}

/// Weighted k-means (k-means++ seeding, Lloyd iterations, best of `n_init`).
pub fn kmeans(points: &[Point], weights: &[f64], k: usize, rng: &mut Rng, n_init: usize) -> Clustering {
    assert!(!points.is_empty() && k >= 1 && k <= points.len());
    assert_eq!(points.len(), weights.len());
    let mut best: Option<Clustering> = None;
    for _ in 0..n_init.max(1) {
        let c = kmeans_once(points, weights, k, rng);
        if best.as_ref().is_none_or(|b| c.wss < b.wss) {
            best = Some(c);
        }
    }
    best.unwrap()
}

fn sq(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn kmeans_once(points: &[Point], weights: &[f64], k: usize, rng: &mut Rng) -> Clustering {
    let n = points.len();
    let mut centroids: Vec<Point> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = points.iter().map(|p| sq(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().zip(weights).map(|(d, w)| d * w).sum();
        let next = if total <= 0.0 {
            // all remaining mass sits on existing centroids
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, (d, w)) in d2.iter().zip(weights).enumerate() {
                target -= d * w;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centroids.push(points[next]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq(p, &points[next]));
        }
    }

    let mut assignments = vec![0usize; n];
    for _ in 0..300 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let a = nearest_centroid(p, &centroids);
            if a != assignments[i] {
                assignments[i] = a;
                changed = true;
            }
        }
        let mut sums = vec![[0.0, 0.0, 0.0]; k];
        for ((p, &a), &w) in points.iter().zip(&assignments).zip(weights) {
            sums[a][0] += w * p[0];
            sums[a][1] += w * p[1];
            sums[a][2] += w;
        }
        for (c, s) in centroids.iter_mut().zip(&sums) {
            if s[2] > 0.0 {
                *c = [s[0] / s[2], s[1] / s[2]];
            }
        }
        if !changed {
            break;
        }
    }
    for (i, p) in points.iter().enumerate() {
        assignments[i] = nearest_centroid(p, &centroids);
    }
    let wss = points
        .iter()
        .zip(&assignments)
        .zip(weights)
        .map(|((p, &a), w)| w * sq(p, &centroids[a]))
        .sum();
    Clustering {
        centroids,
        assignments,
        wss,
    }
}

fn nearest_centroid(p: &Point, centroids: &[Point]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Clusters `points` with k picked by the largest relative drop in
/// within-cluster sum of squares over `k = 1..=k_max`.
pub fn elbow_kmeans(points: &[Point], k_max: usize, rng: &mut Rng) -> Clustering {
    let weights = vec![1.0; points.len()];
    let mut distinct: Vec<Point> = points.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let k_hi = k_max.max(1).min(distinct.len());

    let mut fits: Vec<Clustering> = Vec::with_capacity(k_hi);
    for k in 1..=k_hi {
        fits.push(kmeans(points, &weights, k, rng, 4));
    }
    let mut chosen = 0;
    let mut best_drop = f64::NEG_INFINITY;
    for k in 1..fits.len() {
        let prev = fits[k - 1].wss;
        if prev <= 0.0 {
            break;
        }
        let drop = (prev - fits[k].wss) / prev;
        if drop > best_drop {
            best_drop = drop;
            chosen = k;
        }
    }
    fits.swap_remove(chosen)
}

/// Data-driven knots from exceedance clusters of a uniform-scale field.
///
/// Every replicate's exceedances of `u_threshold` are clustered; centroids
/// from all replicates are pooled and then merged (or reduced to
/// `target_k`). The shared radius starts at the largest member-to-centroid
/// distance seen in any replicate and is grown until all sites are covered.
pub fn select_knots(uniform_field: &Field, opts: &KnotSelection) -> Result<KnotConfig> {
    if uniform_field.scale() != Scale::Uniform {
        return Err(Error::domain("knot selection expects a uniform-scale field"));
    }
    if !(opts.u_threshold > 0.0 && opts.u_threshold < 1.0) {
        return Err(Error::domain("u_threshold must lie in (0, 1)"));
    }
    if !(opts.merge_fraction >= 0.0) {
        return Err(Error::domain("merge_fraction must be nonnegative"));
    }
    let sites = uniform_field.sites();

    let per_replicate: Vec<Option<(Vec<(Point, f64)>, f64)>> = (0..uniform_field.n_t())
        .into_par_iter()
        .map(|t| {
            let row = uniform_field.replicate(t);
            let pts: Vec<Point> = row
                .iter()
                .enumerate()
                .filter(|(_, &u)| u > opts.u_threshold)
                .map(|(j, _)| sites.coord(j))
                .collect();
            if pts.is_empty() {
                return None;
            }
            // Seeded by content so the result ignores replicate order.
            let content = pts
                .iter()
                .flatten()
                .fold(0u64, |h, v| derive_seed(h, "pt", v.to_bits()));
            let mut rng = rng_from_seed(derive_seed(opts.seed, "kmeans", content));
            let cl = elbow_kmeans(&pts, opts.k_max, &mut rng);
            let spread = cl.max_member_distance(&pts);
            let sizes = cl.sizes();
            let cents = cl
                .centroids
                .iter()
                .zip(sizes)
                .filter(|(_, s)| *s > 0)
                .map(|(c, s)| (*c, s as f64))
                .collect();
            Some((cents, spread))
        })
        .collect();

    let mut pooled: Vec<(Point, f64)> = Vec::new();
    let mut initial_radius: f64 = 0.0;
    for (cents, spread) in per_replicate.into_iter().flatten() {
        pooled.extend(cents);
        initial_radius = initial_radius.max(spread);
    }
    if pooled.is_empty() {
        return Err(Error::domain(format!(
            "no replicate has values above u = {}",
            opts.u_threshold
        )));
    }
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.total_cmp(&b.1)));

    let knots = match opts.target_k {
        Some(k) => {
            if k == 0 || k > pooled.len() {
                return Err(Error::Unsupported(format!(
                    "cannot place {k} knots from {} pooled centroids",
                    pooled.len()
                )));
            }
            let pts: Vec<Point> = pooled.iter().map(|p| p.0).collect();
            let w: Vec<f64> = pooled.iter().map(|p| p.1).collect();
            let mut rng = rng_from_seed(derive_seed(opts.seed, "pooled", k as u64));
            let mut c = kmeans(&pts, &w, k, &mut rng, 8).centroids;
            c.sort_by(|a, b| a.partial_cmp(b).unwrap());
            c
        }
        None => merge_centroids(pooled, opts.merge_fraction * sites.diameter()),
    };
    let radius = coverage_radius(&knots, sites, initial_radius)?;
    KnotConfig::new(knots, radius)
}

/// Repeatedly averages the closest pair of weighted centroids until every
/// pair is at least `threshold` apart.
pub fn merge_centroids(pooled: Vec<(Point, f64)>, threshold: f64) -> Vec<Point> {
    let mut pts: Vec<Option<(Point, f64)>> = pooled.into_iter().map(Some).collect();
    let n = pts.len();
    let nn_of = |pts: &[Option<(Point, f64)>], i: usize| -> (usize, f64) {
        let pi = pts[i].unwrap().0;
        let mut best = (usize::MAX, f64::INFINITY);
        for (j, q) in pts.iter().enumerate() {
            if j != i {
                if let Some((pj, _)) = q {
                    let d = distance(&pi, pj);
                    if d < best.1 {
                        best = (j, d);
                    }
                }
            }
        }
        best
    };
    let mut nn: Vec<(usize, f64)> = (0..n).map(|i| nn_of(&pts, i)).collect();
    loop {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in pts.iter().enumerate() {
            if p.is_some() && nn[i].1 < best.1 {
                best = (i, nn[i].1);
            }
        }
        let a = best.0;
        if a == usize::MAX || best.1 >= threshold {
            break;
        }
        let b = nn[a].0;
        let (pa, wa) = pts[a].unwrap();
        let (pb, wb) = pts[b].unwrap();
        let w = wa + wb;
        pts[a] = Some((
            [(wa * pa[0] + wb * pb[0]) / w, (wa * pa[1] + wb * pb[1]) / w],
            w,
        ));
        pts[b] = None;
        nn[b] = (usize::MAX, f64::INFINITY);
        let merged = pts[a].unwrap().0;
        for i in 0..n {
            if pts[i].is_none() {
                continue;
            }
            if i == a || nn[i].0 == a || nn[i].0 == b {
                nn[i] = nn_of(&pts, i);
            } else {
                let d = distance(&pts[i].unwrap().0, &merged);
                if d < nn[i].1 {
                    nn[i] = (a, d);
                }
            }
        }
    }
    let mut out: Vec<Point> = pts.into_iter().flatten().map(|p| p.0).collect();
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out
}
