//! Point-set geometry: sampling, neighbor search, grouping, density
//! estimation and interpolation weights. Nothing here is differentiable;
//! the outputs enter the tape as constants.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default Gaussian KDE bandwidth in unit-ball coordinates.
pub const DEFAULT_BANDWIDTH: f64 = 0.1;
/// Guard added to densities before inversion.
pub const INVERSE_DENSITY_EPS: f64 = 1e-8;
/// Guard added to distances in inverse-distance interpolation.
pub const INTERP_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T> {
    pub dim: usize,
    /// `N x dim`, row-major.
    pub positions: Vec<T>,
    pub channels: usize,
    /// `N x channels`, row-major.
    pub features: Vec<T>,
    pub class_label: Option<usize>,
    pub point_labels: Option<Vec<usize>>,
    /// Per-point density, filled by [`kde_density`].
    pub density: Option<Vec<T>>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(dim: usize, positions: Vec<T>, channels: usize, features: Vec<T>) -> Result<Self> {
        let cloud = PointCloud { dim, positions, channels, features, class_label: None, point_labels: None, density: None };
        cloud.validate()?;
        Ok(cloud)
    }

    /// Positions only; features are empty.
    pub fn from_positions(dim: usize, positions: Vec<T>) -> Result<Self> {
        PointCloud::new(dim, positions, 0, Vec::new())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("point dimension must be positive"));
        }
        if self.positions.is_empty() || !self.positions.len().is_multiple_of(self.dim) {
            return Err(Error::invalid(format!(
                "{} coordinates do not form a non-empty set of {}-d points",
                self.positions.len(),
                self.dim
            )));
        }
        if let Some(i) = self.positions.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("coordinate {i}")));
        }
        let n = self.len();
        if self.features.len() != n * self.channels {
            return Err(Error::invalid(format!(
                "{} feature values for {n} points x {} channels",
                self.features.len(),
                self.channels
            )));
        }
        if let Some(l) = &self.point_labels {
            if l.len() != n {
                return Err(Error::invalid(format!("{} point labels for {n} points", l.len())));
            }
        }
        if let Some(d) = &self.density {
            if d.len() != n {
                return Err(Error::invalid(format!("{} densities for {n} points", d.len())));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, i: usize) -> &[T] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn feature(&self, i: usize) -> &[T] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn max_norm(&self) -> T {
        self.positions.chunks_exact(self.dim).map(|p| p.iter().map(|&v| v * v).sum::<T>().sqrt()).fold(T::zero(), T::max)
    }

    pub fn is_normalized(&self) -> bool {
        self.max_norm().f64() <= 1.0 + 1e-6
    }

    /// Center on the mean and scale so the farthest point has norm 1.
    pub fn normalize_to_unit_ball(&mut self) {
        let mean = mean_position(&self.positions, self.dim);
        for p in self.positions.chunks_exact_mut(self.dim) {
            for (v, &m) in p.iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        let r = self.max_norm();
        if r > T::zero() {
            self.positions.iter_mut().for_each(|v| *v /= r);
        }
        self.density = None;
    }

    pub fn translate(&mut self, offset: &[T]) {
        for p in self.positions.chunks_exact_mut(self.dim) {
            for (v, &o) in p.iter_mut().zip(offset) {
                *v += o;
            }
        }
    }

    /// Subset of points (positions, features, labels, density) in `indices` order.
    pub fn select(&self, indices: &[usize]) -> PointCloud<T> {
        PointCloud {
            dim: self.dim,
            positions: gather(&self.positions, self.dim, indices),
            channels: self.channels,
            features: gather(&self.features, self.channels, indices),
            class_label: self.class_label,
            point_labels: self.point_labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            density: self.density.as_ref().map(|d| indices.iter().map(|&i| d[i]).collect()),
        }
    }
}

fn gather<T: Copy>(rows: &[T], width: usize, indices: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(indices.len() * width);
    for &i in indices {
        out.extend_from_slice(&rows[i * width..(i + 1) * width]);
    }
    out
}

pub fn mean_position<T: Scalar>(positions: &[T], dim: usize) -> Vec<T> {
    let n = positions.len() / dim;
    let mut mean = vec![T::zero(); dim];
    for p in positions.chunks_exact(dim) {
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    let inv = T::one() / T::of(n as f64);
    mean.iter_mut().for_each(|m| *m *= inv);
    mean
}

#[inline]
pub fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Where farthest point sampling starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpsStart {
    /// The point nearest the coordinate mean (lowest index on ties).
    Canonical,
    Index(usize),
}

/// Greedy max-min subsampling over raw `N x dim` coordinates.
pub fn farthest_point_sample_raw<T: Scalar>(positions: &[T], dim: usize, n_out: usize, start: FpsStart) -> Result<Vec<usize>> {
    let n = positions.len() / dim;
    if n_out == 0 || n_out > n {
        return Err(Error::invalid(format!("farthest_point_sample: n_out={n_out} outside 1..={n}")));
    }
    let first = match start {
        FpsStart::Index(i) if i < n => i,
        FpsStart::Index(i) => return Err(Error::invalid(format!("FPS start index {i} out of range for {n} points"))),
        FpsStart::Canonical => {
            let mean = mean_position(positions, dim);
            let mut best = 0;
            let mut best_d = T::infinity();
            for (i, p) in positions.chunks_exact(dim).enumerate() {
                let d = sq_dist(p, &mean);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            best
        }
    };
    let mut chosen = Vec::with_capacity(n_out);
    chosen.push(first);
    let mut min_d = vec![T::infinity(); n];
    min_d[first] = T::neg_infinity();
    let mut last = first;
    while chosen.len() < n_out {
        let lp = &positions[last * dim..(last + 1) * dim];
        let mut best = usize::MAX;
        let mut best_d = T::neg_infinity();
        for (i, p) in positions.chunks_exact(dim).enumerate() {
            let d = sq_dist(p, lp);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        // Coincident points leave every remaining candidate at distance 0;
        // fall back to the lowest unchosen index so selections stay distinct.
        if best_d <= T::zero() {
            best = (0..n).find(|i| !chosen.contains(i)).expect("n_out <= n");
        }
        min_d[best] = T::neg_infinity();
        chosen.push(best);
        last = best;
    }
    Ok(chosen)
}

pub fn farthest_point_sample<T: Scalar>(cloud: &PointCloud<T>, n_out: usize, start: FpsStart) -> Result<Vec<usize>> {
    farthest_point_sample_raw(&cloud.positions, cloud.dim, n_out, start)
}

fn by_dist_then_index<T: Scalar>(a: &(T, usize), b: &(T, usize)) -> Ordering {
    a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// `k` nearest sources for each query, ordered by (distance, index) and
/// padded by repeating the first entry when fewer than `k` sources exist.
///
/// When `self_ids` is given, query `q` is the source with index
/// `self_ids[q]` and is forced into slot 0.
pub fn knn_indices_raw<T: Scalar>(
    queries: &[T],
    sources: &[T],
    dim: usize,
    k: usize,
    self_ids: Option<&[usize]>,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let n = sources.len() / dim;
    if n == 0 {
        return Err(Error::invalid("neighbor search over an empty source set"));
    }
    let m = queries.len() / dim;
    let mut out = Vec::with_capacity(m * k);
    // Best `want` candidates so far, sorted by (distance, index).
    let mut best: Vec<(T, usize)> = Vec::with_capacity(k + 1);
    for (qi, q) in queries.chunks_exact(dim).enumerate() {
        let own = self_ids.map(|ids| ids[qi]);
        let want = k - usize::from(own.is_some());
        best.clear();
        if want > 0 {
            for (i, p) in sources.chunks_exact(dim).enumerate() {
                if Some(i) == own {
                    continue;
                }
                let cand = (sq_dist(p, q), i);
                if best.len() == want && by_dist_then_index(&cand, &best[want - 1]) != Ordering::Less {
                    continue;
                }
                let at = best.partition_point(|b| by_dist_then_index(b, &cand) == Ordering::Less);
                best.insert(at, cand);
                best.truncate(want);
            }
        }
        let row_start = out.len();
        out.extend(own);
        out.extend(best.iter().map(|&(_, i)| i));
        let pad = out[row_start];
        out.resize(row_start + k, pad);
    }
    Ok(out)
}

/// Grouped view of one layer's local regions.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhood<T> {
    pub dim: usize,
    pub k: usize,
    pub channels: usize,
    pub centroid_indices: Vec<usize>,
    /// `N' x K`.
    pub neighbor_indices: Vec<usize>,
    /// `N' x K x dim`: neighbor position minus centroid position.
    pub local_coords: Vec<T>,
    /// `N' x K x C_in`.
    pub grouped_features: Vec<T>,
    /// `N' x K`, normalized inverse density of each neighbor.
    pub grouped_inverse_density: Option<Vec<T>>,
}

impl<T: Scalar> Neighborhood<T> {
    pub fn regions(&self) -> usize {
        self.centroid_indices.len()
    }
}

/// Local coordinates `positions[nbr] - positions[centroid]` for each region.
pub fn local_coordinates<T: Scalar>(positions: &[T], dim: usize, centroids: &[usize], neighbors: &[usize], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(neighbors.len() * dim);
    for (r, &c) in centroids.iter().enumerate() {
        let cp = &positions[c * dim..(c + 1) * dim];
        for &j in &neighbors[r * k..(r + 1) * k] {
            let p = &positions[j * dim..(j + 1) * dim];
            out.extend(p.iter().zip(cp).map(|(&a, &b)| a - b));
        }
    }
    out
}

/// K-nearest-neighbor grouping around the given centroids (the centroid is
/// always its own first neighbor). With `with_density`, the cloud's density
/// must be populated and its normalized inverse is grouped too.
pub fn knn_group<T: Scalar>(
    cloud: &PointCloud<T>,
    centroid_indices: &[usize],
    k: usize,
    with_density: bool,
) -> Result<Neighborhood<T>> {
    let inv = if with_density {
        let d = cloud.density.as_ref().ok_or(Error::MissingDensity)?;
        Some(inverse_density(d, T::of(INVERSE_DENSITY_EPS)))
    } else {
        None
    };
    let n = cloud.len();
    if let Some(&bad) = centroid_indices.iter().find(|&&c| c >= n) {
        return Err(Error::invalid(format!("centroid index {bad} out of range for {n} points")));
    }
    let queries = gather(&cloud.positions, cloud.dim, centroid_indices);
    let neighbor_indices = knn_indices_raw(&queries, &cloud.positions, cloud.dim, k, Some(centroid_indices))?;
    let local_coords = local_coordinates(&cloud.positions, cloud.dim, centroid_indices, &neighbor_indices, k);
    let grouped_features = gather(&cloud.features, cloud.channels, &neighbor_indices);
    let grouped_inverse_density = inv.map(|s| neighbor_indices.iter().map(|&j| s[j]).collect());
    Ok(Neighborhood {
        dim: cloud.dim,
        k,
        channels: cloud.channels,
        centroid_indices: centroid_indices.to_vec(),
        neighbor_indices,
        local_coords,
        grouped_features,
        grouped_inverse_density,
    })
}

/// Gaussian KDE with the self term included:
/// `d_i = 1/N * sum_j (2 pi h^2)^(-dim/2) exp(-|p_i - p_j|^2 / (2 h^2))`.
pub fn kde_density_raw<T: Scalar>(positions: &[T], dim: usize, h: T) -> Result<Vec<T>> {
    if !(h > T::zero()) {
        return Err(Error::invalid(format!("KDE bandwidth must be positive, got {h}")));
    }
    let n = positions.len() / dim;
    let two_pi = T::of(std::f64::consts::TAU);
    let norm = (two_pi * h * h).powf(T::of(-(dim as f64) / 2.0)) / T::of(n as f64);
    let inv_2h2 = T::one() / (T::of(2.0) * h * h);
    let mut acc = vec![T::one(); n];
    for i in 0..n {
        let pi = &positions[i * dim..(i + 1) * dim];
        for j in (i + 1)..n {
            let w = (-sq_dist(pi, &positions[j * dim..(j + 1) * dim]) * inv_2h2).exp();
            acc[i] += w;
            acc[j] += w;
        }
    }
    Ok(acc.into_iter().map(|a| a * norm).collect())
}

/// Compute and store the per-point KDE density.
pub fn kde_density<T: Scalar>(cloud: &mut PointCloud<T>, h: T) -> Result<()> {
    cloud.density = Some(kde_density_raw(&cloud.positions, cloud.dim, h)?);
    Ok(())
}

/// `s_i = 1 / (d_i + eps)` scaled so the largest value is exactly 1.
pub fn inverse_density<T: Scalar>(density: &[T], eps: T) -> Vec<T> {
    let raw: Vec<T> = density.iter().map(|&d| T::one() / (d + eps)).collect();
    let max = raw.iter().copied().fold(T::zero(), T::max);
    raw.into_iter().map(|s| if s == max { T::one() } else { s / max }).collect()
}

/// Indices and normalized inverse-distance weights of the 3 nearest sources
/// of every target (`M x 3` each).
pub fn three_nn_weights<T: Scalar>(targets: &[T], sources: &[T], dim: usize) -> Result<(Vec<usize>, Vec<T>)> {
    let idx = knn_indices_raw(targets, sources, dim, 3, None)?;
    let eps = T::of(INTERP_EPS);
    let mut weights = Vec::with_capacity(idx.len());
    for (t, row) in targets.chunks_exact(dim).zip(idx.chunks_exact(3)) {
        let w: Vec<T> = row.iter().map(|&j| T::one() / (sq_dist(t, &sources[j * dim..(j + 1) * dim]).sqrt() + eps)).collect();
        let total: T = w.iter().copied().sum();
        weights.extend(w.into_iter().map(|v| v / total));
    }
    Ok((idx, weights))
}

/// Inverse-distance interpolation of `source_features` (`N x C`) onto targets.
pub fn three_nn_interpolate<T: Scalar>(
    targets: &[T],
    sources: &[T],
    dim: usize,
    source_features: &[T],
    channels: usize,
) -> Result<Vec<T>> {
    let (idx, w) = three_nn_weights(targets, sources, dim)?;
    let mut out = vec![T::zero(); idx.len() / 3 * channels];
    for (t, row) in out.chunks_exact_mut(channels).enumerate() {
        for s in 0..3 {
            let j = idx[t * 3 + s];
            for (o, &f) in row.iter_mut().zip(&source_features[j * channels..(j + 1) * channels]) {
                *o += w[t * 3 + s] * f;
            }
        }
    }
    Ok(out)
}
