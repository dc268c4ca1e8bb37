//! Unsupervised multi-cluster feature scoring.
//!
//! A symmetric k-nearest-neighbour heat-kernel graph is built over the
//! standardized rows, its smallest non-trivial generalized Laplacian
//! eigenvectors serve as soft cluster indicators, and each indicator is
//! regressed on the columns with least-angle regression. A column's score
//! is its largest absolute coefficient over all indicators.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Either the literal `"auto"` or an explicit value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Setting<T> {
    Auto(AutoTag),
    Value(T),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl<T> Setting<T> {
    pub const AUTO: Self = Setting::Auto(AutoTag::Auto);

    pub fn value(&self) -> Option<&T> {
        match self {
            Setting::Auto(_) => None,
            Setting::Value(v) => Some(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FsConfig {
    pub k_neighbors: usize,
    /// Heat-kernel bandwidth; auto is the median neighbour distance.
    pub bandwidth: Setting<f64>,
    /// Embedding dimension; `None` ties it to the mixture truncation level.
    pub n_eigenvectors: Option<usize>,
    /// Total selected columns, residual columns included.
    pub cardinality: Setting<usize>,
    /// LARS active-set size; `None` means the selected cardinality, or all
    /// columns when the cardinality is automatic.
    pub lars_nonzeros: Option<usize>,
    /// Relative score threshold for automatic cardinality.
    pub auto_ratio: f64,
    /// Let residual columns compete instead of always selecting them.
    pub allow_residual_drop: bool,
}

impl Default for FsConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 5,
            bandwidth: Setting::AUTO,
            n_eigenvectors: None,
            cardinality: Setting::AUTO,
            lars_nonzeros: None,
            auto_ratio: 0.1,
            allow_residual_drop: false,
        }
    }
}

impl FsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors == 0 {
            return Err(Error::InvalidConfig("k_neighbors must be >= 1".into()));
        }
        if let Setting::Value(b) = self.bandwidth {
            if !(b.is_finite() && b > 0.0) {
                return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {b}")));
            }
        }
        if self.n_eigenvectors == Some(0) || self.cardinality == Setting::Value(0) || self.lars_nonzeros == Some(0) {
            return Err(Error::InvalidConfig("eigenvector count, cardinality and lars_nonzeros must be >= 1".into()));
        }
        if !(self.auto_ratio >= 0.0 && self.auto_ratio <= 1.0) {
            return Err(Error::InvalidConfig("auto_ratio must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Symmetric sparse weight matrix; each row lists `(column, weight)` sorted
/// by column, without the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    rows: Vec<Vec<(usize, f64)>>,
    bandwidth: f64,
}

impl NeighborGraph {
    pub fn from_dense(w: &DMatrix<f64>) -> Result<Self> {
        if !w.is_square() {
            return Err(Error::DimensionMismatch("weight matrix must be square".into()));
        }
        let n = w.nrows();
        for i in 0..n {
            for j in 0..n {
                let v = w[(i, j)];
                if !(v.is_finite() && v >= 0.0) || v != w[(j, i)] {
                    return Err(Error::InvalidObservation(format!("weight ({i},{j}) must be finite, non-negative, symmetric")));
                }
            }
        }
        let rows = (0..n).map(|i| (0..n).filter(|&j| j != i && w[(i, j)] > 0.0).map(|j| (j, w[(i, j)])).collect()).collect();
        Ok(Self { rows, bandwidth: f64::NAN })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.rows[i].binary_search_by(|(c, _)| c.cmp(&j)).map_or(0.0, |k| self.rows[i][k].1)
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn degrees(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().map(|(_, w)| w).sum()).collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut w = DMatrix::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                w[(i, j)] = v;
            }
        }
        w
    }
}

fn lower_median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values[(values.len() - 1) / 2]
}

/// Exact k-nearest-neighbour heat-kernel graph, symmetrized by "either is a
/// neighbour of the other". Distance ties go to the lower row index.
pub fn knn_graph(data: &DMatrix<f64>, k: usize, bandwidth: Setting<f64>) -> Result<NeighborGraph> {
    let n = data.nrows();
    if k == 0 || n <= k {
        return Err(Error::TooFewPoints(format!("need more than k = {k} points, got {n}")));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteData("feature matrix".into()));
    }
    let neighbors: Vec<Vec<(usize, f64)>> = crate::par::map_range(n, |i| {
        let xi = data.row(i);
        let mut d: Vec<(usize, f64)> =
            (0..n).filter(|&j| j != i).map(|j| (j, (xi - data.row(j)).norm_squared())).collect();
        let by_dist = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
        d.select_nth_unstable_by(k - 1, by_dist);
        d.truncate(k);
        d.sort_by(by_dist);
        d
    });
    let sigma = match bandwidth {
        Setting::Value(s) => s,
        Setting::Auto(_) => {
            let mut dists: Vec<f64> = neighbors.iter().flatten().map(|(_, d2)| d2.sqrt()).collect();
            let m = lower_median(&mut dists);
            if m > 0.0 {
                m
            } else {
                1.0
            }
        }
    };
    let s2 = sigma * sigma;
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, list) in neighbors.iter().enumerate() {
        for &(j, d2) in list {
            let w = (-d2 / s2).exp();
            rows[i].push((j, w));
            rows[j].push((i, w));
        }
    }
    for r in &mut rows {
        r.sort_by_key(|a| a.0);
        r.dedup_by_key(|e| e.0);
    }
    Ok(NeighborGraph { rows, bandwidth: sigma })
}

/// Generalized eigenvectors of `L y = lambda D y` for the smallest
/// non-trivial eigenvalues.
#[derive(Debug, Clone)]
pub struct Embedding {
    /// N x K, D-orthonormal columns; rows of isolated nodes are zero.
    pub vectors: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

/// Node count up to which the embedding is computed by a dense eigensolver.
const DENSE_EIGEN_LIMIT: usize = 300;

pub fn spectral_embedding(graph: &NeighborGraph, k: usize) -> Result<Embedding> {
    if k == 0 {
        return Err(Error::InvalidConfig("embedding dimension must be >= 1".into()));
    }
    let degrees = graph.degrees();
    // a degree below rounding level of the largest one is numerically
    // disconnected; keeping it would blow rounding noise up by D^{-1/2}
    let floor = degrees.iter().copied().fold(0.0, f64::max) * f64::EPSILON;
    let active: Vec<usize> = (0..graph.len()).filter(|&i| degrees[i] > floor).collect();
    let m = active.len();
    if m < 2 {
        return Err(Error::EigenFailure(format!("graph has {m} connected nodes")));
    }
    let k = k.min(m - 1);
    let mut local = vec![usize::MAX; graph.len()];
    for (li, &i) in active.iter().enumerate() {
        local[i] = li;
    }
    let inv_sqrt: Vec<f64> = active.iter().map(|&i| 1.0 / degrees[i].sqrt()).collect();
    let total: f64 = active.iter().map(|&i| degrees[i]).sum();
    // unit vector along D^{1/2} 1: the trivial eigenvector
    let trivial = DVector::from_iterator(m, active.iter().map(|&i| (degrees[i] / total).sqrt()));

    // A = P (D^{-1/2} W D^{-1/2} + I) P with P projecting out the trivial
    // vector. Its spectrum is 2 - lambda on the complement and 0 on the
    // trivial direction, so the wanted pairs are its largest.
    let apply = |x: &DMatrix<f64>| -> DMatrix<f64> {
        let mut px = x.clone();
        for mut c in px.column_iter_mut() {
            let dot = trivial.dot(&c);
            c.axpy(-dot, &trivial, 1.0);
        }
        let cols = px.ncols();
        let rows = crate::par::map_range(m, |li| {
            let i = active[li];
            let mut acc = vec![0.0; cols];
            for &(j, w) in graph.row(i) {
                let lj = local[j];
                if lj == usize::MAX {
                    continue;
                }
                let s = w * inv_sqrt[li] * inv_sqrt[lj];
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += s * px[(lj, c)];
                }
            }
            for (c, a) in acc.iter_mut().enumerate() {
                *a += px[(li, c)];
            }
            acc
        });
        let mut y = DMatrix::from_fn(m, cols, |r, c| rows[r][c]);
        for mut c in y.column_iter_mut() {
            let dot = trivial.dot(&c);
            c.axpy(-dot, &trivial, 1.0);
        }
        y
    };

    let (values, vectors) = if m <= DENSE_EIGEN_LIMIT {
        dense_top(&apply(&DMatrix::identity(m, m)), k)?
    } else {
        krylov_top(&apply, m, k, &trivial)?
    };

    let mut out = DMatrix::zeros(graph.len(), k);
    for c in 0..k {
        for (li, &i) in active.iter().enumerate() {
            out[(i, c)] = vectors[(li, c)] * inv_sqrt[li];
        }
    }
    Ok(Embedding { vectors: out, eigenvalues: values.iter().map(|t| 2.0 - t).collect() })
}

fn sorted_top(eig: SymmetricEigen<f64, nalgebra::Dyn>, k: usize) -> Result<(Vec<f64>, DMatrix<f64>, Vec<usize>)> {
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigenFailure("non-finite eigenvalue".into()));
    }
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    order.truncate(k);
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), k, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors, order))
}

fn dense_top(a: &DMatrix<f64>, k: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.try_symmetric_eigen(1e-14, 10_000).ok_or_else(|| Error::EigenFailure("dense eigensolver did not converge".into()))?;
    let (v, vec, _) = sorted_top(eig, k)?;
    Ok((v, vec))
}

/// Orthonormalizes the columns of `x` against `basis` and each other
/// (two Gram-Schmidt passes); returns the surviving columns.
fn orthonormalize(x: &DMatrix<f64>, basis: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::new();
    for c in x.column_iter() {
        let mut v: DVector<f64> = c.into_owned();
        let start = v.norm();
        for _ in 0..2 {
            for q in basis.iter().chain(out.iter()) {
                let d = q.dot(&v);
                v.axpy(-d, q, 1.0);
            }
        }
        let n = v.norm();
        if n > 1e-10 * start.max(1e-300) && n > 1e-14 {
            out.push(v / n);
        }
    }
    out
}

/// Block Krylov (block Lanczos with full reorthogonalization) for the `k`
/// largest eigenpairs of a symmetric operator on the complement of `trivial`.
fn krylov_top(
    apply: &dyn Fn(&DMatrix<f64>) -> DMatrix<f64>,
    m: usize,
    k: usize,
    trivial: &DVector<f64>,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let block = k + 2;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let start = DMatrix::from_fn(m, block, |_, _| rng.random::<f64>() - 0.5);
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut images: Vec<DVector<f64>> = Vec::new();
    let deflate = [trivial.clone()];
    let mut next = orthonormalize(&start, &deflate);
    let limit = m - 1;
    let mut steps = 0usize;
    loop {
        if next.is_empty() || basis.len() >= limit {
            break;
        }
        let take = next.len().min(limit - basis.len());
        next.truncate(take);
        let blk = DMatrix::from_columns(&next);
        let img = apply(&blk);
        basis.extend(next.iter().cloned());
        images.extend(img.column_iter().map(|c| c.into_owned()));
        steps += 1;
        if basis.len() >= 3 * block && steps.is_multiple_of(4) {
            if let Some(done) = ritz_if_converged(&basis, &images, k, false)? {
                return Ok(done);
            }
        }
        let mut all = deflate.to_vec();
        all.extend(basis.iter().cloned());
        next = orthonormalize(&img, &all);
    }
    ritz_if_converged(&basis, &images, k, true)?
        .ok_or_else(|| Error::EigenFailure("Krylov subspace exhausted before convergence".into()))
}

fn ritz_if_converged(
    basis: &[DVector<f64>],
    images: &[DVector<f64>],
    k: usize,
    force: bool,
) -> Result<Option<(Vec<f64>, DMatrix<f64>)>> {
    let q = DMatrix::from_columns(basis);
    let aq = DMatrix::from_columns(images);
    let t = q.transpose() * &aq;
    let t = (&t + t.transpose()) * 0.5;
    let eig = t.try_symmetric_eigen(1e-14, 10_000).ok_or_else(|| Error::EigenFailure("projected eigensolver failed".into()))?;
    let k = k.min(basis.len());
    let (values, s, _) = sorted_top(eig, k)?;
    let vectors = &q * &s;
    let residuals = &aq * &s - &vectors * DMatrix::from_diagonal(&DVector::from_vec(values.clone()));
    let worst = residuals.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    if worst <= 1e-9 || force {
        if force && worst > 1e-6 {
            return Err(Error::EigenFailure(format!("Ritz residual {worst:.3e} after exhausting the subspace")));
        }
        return Ok(Some((values, vectors)));
    }
    Ok(None)
}

/// Least-angle regression of `y` on the columns of `x`, run until the step
/// taken with `nonzeros` active columns is complete. Columns are centered
/// and scaled to unit norm internally; coefficients are returned on the
/// centered input scale. All-zero columns never enter.
pub fn lars_select(x: &DMatrix<f64>, y: &DVector<f64>, nonzeros: usize) -> Result<DVector<f64>> {
    let (n, d) = x.shape();
    if d == 0 || y.len() != n {
        return Err(Error::DimensionMismatch(format!("design {n}x{d}, response {}", y.len())));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteData("regression inputs".into()));
    }
    let mut xs = x.clone();
    let mut norms = vec![0.0; d];
    for (j, mut c) in xs.column_iter_mut().enumerate() {
        let mean = c.mean();
        c.add_scalar_mut(-mean);
        let nrm = c.norm();
        let scale = c.amax().max(1.0);
        if nrm > 1e-12 * scale * (n as f64).sqrt() {
            c /= nrm;
            norms[j] = nrm;
        } else {
            c.fill(0.0);
        }
    }
    let usable: Vec<usize> = (0..d).filter(|&j| norms[j] > 0.0).collect();
    if usable.is_empty() {
        return Err(Error::DegenerateDesign("every column is constant".into()));
    }
    let target = nonzeros.min(usable.len()).max(1);
    let yc = y.add_scalar(-y.mean());
    let tiny = 1e-12 * yc.norm().max(f64::MIN_POSITIVE);

    let mut beta = DVector::zeros(d);
    let mut fit = DVector::zeros(n);
    let mut active: Vec<usize> = Vec::new();
    loop {
        let c = xs.transpose() * (&yc - &fit);
        let big = usable.iter().map(|&j| c[j].abs()).fold(0.0, f64::max);
        if big <= tiny {
            break;
        }
        if active.is_empty() {
            let first = usable.iter().copied().find(|&j| c[j].abs() == big).expect("max exists");
            active.push(first);
        }
        let signs: Vec<f64> = active.iter().map(|&j| if c[j] >= 0.0 { 1.0 } else { -1.0 }).collect();
        let xa = DMatrix::from_fn(n, active.len(), |r, a| signs[a] * xs[(r, active[a])]);
        let gram = xa.transpose() * &xa;
        let Some(chol) = gram.cholesky() else {
            break;
        };
        let ones = DVector::from_element(active.len(), 1.0);
        let ginv1 = chol.solve(&ones);
        let a_scale = 1.0 / ones.dot(&ginv1).sqrt();
        let w = ginv1 * a_scale;
        let u = &xa * &w;
        let a = xs.transpose() * &u;

        let mut gamma = big / a_scale;
        let mut entering = None;
        for &j in &usable {
            if active.contains(&j) {
                continue;
            }
            for cand in [(big - c[j]) / (a_scale - a[j]), (big + c[j]) / (a_scale + a[j])] {
                if cand.is_finite() && cand > 1e-12 * gamma && cand < gamma {
                    gamma = cand;
                    entering = Some(j);
                }
            }
        }
        for (idx, &j) in active.iter().enumerate() {
            beta[j] += gamma * signs[idx] * w[idx];
        }
        fit += gamma * &u;
        if active.len() >= target {
            break;
        }
        match entering {
            Some(j) => active.push(j),
            None => break,
        }
    }
    for j in 0..d {
        if norms[j] > 0.0 {
            beta[j] /= norms[j];
        }
    }
    Ok(beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub name: String,
    pub score: f64,
    pub selected: bool,
}

/// Scores every column of a standardized matrix and selects a subset.
///
/// The first `residual_columns` columns are always selected unless
/// `allow_residual_drop` is set. `default_k` is the embedding dimension
/// used when the config leaves it unset.
pub fn select_features(
    data: &DMatrix<f64>,
    names: &[String],
    residual_columns: usize,
    config: &FsConfig,
    default_k: usize,
) -> Result<Vec<FeatureScore>> {
    config.validate()?;
    let d = data.ncols();
    if names.len() != d || residual_columns > d {
        return Err(Error::DimensionMismatch(format!("{} names for {d} columns", names.len())));
    }
    let scores = score_columns(data, config, default_k)?;
    let forced = if config.allow_residual_drop { 0 } else { residual_columns };
    let mut selected = vec![false; d];
    for s in selected.iter_mut().take(forced) {
        *s = true;
    }
    let mut order: Vec<usize> = (forced..d).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    match config.cardinality {
        Setting::Value(total) if total >= d => selected.iter_mut().for_each(|s| *s = true),
        Setting::Value(total) => {
            let room = total.saturating_sub(forced);
            for &j in order.iter().filter(|&&j| scores[j] > 0.0).take(room) {
                selected[j] = true;
            }
        }
        Setting::Auto(_) => {
            let max = scores.iter().cloned().fold(0.0, f64::max);
            for &j in &order {
                if scores[j] > 0.0 && scores[j] >= config.auto_ratio * max {
                    selected[j] = true;
                }
            }
        }
    }
    if !selected.iter().any(|s| *s) {
        let fallback = if residual_columns > 0 { 0..residual_columns } else { 0..d.min(1) };
        for j in fallback {
            selected[j] = true;
        }
    }
    Ok((0..d).map(|j| FeatureScore { name: names[j].clone(), score: scores[j], selected: selected[j] }).collect())
}

/// Max-absolute-coefficient score per column.
pub fn score_columns(data: &DMatrix<f64>, config: &FsConfig, default_k: usize) -> Result<Vec<f64>> {
    let d = data.ncols();
    let graph = knn_graph(data, config.k_neighbors, config.bandwidth)?;
    let k = config.n_eigenvectors.unwrap_or(default_k).max(1);
    let embedding = spectral_embedding(&graph, k)?;
    let nonzeros = config.lars_nonzeros.unwrap_or(match config.cardinality {
        Setting::Value(c) => c.min(d),
        Setting::Auto(_) => d,
    });
    // D-orthonormal columns concentrated on low-degree nodes have huge
    // entries; put every indicator on the same footing before regressing.
    let fits = crate::par::map_range(embedding.vectors.ncols(), |c| {
        let y = embedding.vectors.column(c).into_owned();
        let norm = y.norm();
        lars_select(data, &(if norm > 0.0 { y / norm } else { y }), nonzeros)
    });
    let mut scores = vec![0.0; d];
    for beta in fits {
        let beta = beta?;
        for j in 0..d {
            scores[j] = f64::max(scores[j], beta[j].abs());
        }
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_points_k1() {
        let data = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 10.0]);
        let g = knn_graph(&data, 1, Setting::Value(1.0)).unwrap();
        assert!(g.weight(0, 1) > 0.0 && g.weight(1, 0) > 0.0);
        assert!(g.weight(2, 1) > 0.0);
        assert_eq!(g.weight(1, 2), (-81.0f64).exp());
        assert_eq!(g.weight(0, 2), 0.0);
        assert_eq!(g.to_dense(), g.to_dense().transpose());
    }

    #[test]
    fn identical_points_weight_one() {
        let data = DMatrix::from_column_slice(3, 1, &[2.0, 2.0, 5.0]);
        let g = knn_graph(&data, 1, Setting::AUTO).unwrap();
        assert_eq!(g.weight(0, 1), 1.0);
    }

    #[test]
    fn k_equal_n_rejected() {
        let data = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        assert!(matches!(knn_graph(&data, 3, Setting::AUTO), Err(Error::TooFewPoints(_))));
    }

    fn cliques(sizes: &[usize]) -> NeighborGraph {
        let n: usize = sizes.iter().sum();
        let mut w = DMatrix::zeros(n, n);
        let mut start = 0;
        for &s in sizes {
            for i in start..start + s {
                for j in start..start + s {
                    if i != j {
                        w[(i, j)] = 1.0;
                    }
                }
            }
            start += s;
        }
        NeighborGraph::from_dense(&w).unwrap()
    }

    #[test]
    fn two_cliques_split_by_sign() {
        let e = spectral_embedding(&cliques(&[4, 4]), 1).unwrap();
        let y = e.vectors.column(0);
        assert!(e.eigenvalues[0].abs() < 1e-10);
        for i in 1..4 {
            assert!((y[i] - y[0]).abs() < 1e-10 && (y[4 + i] - y[4]).abs() < 1e-10);
        }
        assert!(y[0] * y[4] < 0.0);
    }

    #[test]
    fn complete_graph_eigenvalue() {
        let n = 6;
        let e = spectral_embedding(&cliques(&[n]), 1).unwrap();
        assert!((e.eigenvalues[0] - n as f64 / (n as f64 - 1.0)).abs() < 1e-10);
        let deg = 5.0;
        let y = e.vectors.column(0);
        assert!((deg * y.norm_squared() - 1.0).abs() < 1e-10);
        assert!(y.sum().abs() < 1e-10);
    }

    #[test]
    fn numerically_detached_node_is_isolated() {
        let w = cliques(&[4, 4]).to_dense();
        let mut big = DMatrix::zeros(9, 9);
        big.view_mut((0, 0), (8, 8)).copy_from(&w);
        big[(8, 0)] = 1e-40;
        big[(0, 8)] = 1e-40;
        let e = spectral_embedding(&NeighborGraph::from_dense(&big).unwrap(), 1).unwrap();
        let y = e.vectors.column(0);
        assert_eq!(y[8], 0.0);
        assert!(y.iter().all(|v| v.abs() < 1.0));
        assert!(y[1] * y[5] < 0.0);
    }

    #[test]
    fn path_has_spectral_gap() {
        let w = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let e = spectral_embedding(&NeighborGraph::from_dense(&w).unwrap(), 1).unwrap();
        assert!(e.eigenvalues[0] > 1e-6);
    }

    #[test]
    fn krylov_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 420;
        let data = DMatrix::from_fn(n, 2, |i, j| rng.random::<f64>() + if i % 3 == 0 && j == 0 { 4.0 } else { 0.0 });
        let g = knn_graph(&data, 6, Setting::AUTO).unwrap();
        let e = spectral_embedding(&g, 4).unwrap();
        let dense = DMatrix::from_fn(n, n, |i, j| g.weight(i, j));
        let deg = g.degrees();
        let lap = DMatrix::from_fn(n, n, |i, j| if i == j { deg[i] } else { 0.0 }) - &dense;
        for (c, lambda) in e.eigenvalues.iter().enumerate() {
            let y = e.vectors.column(c);
            let lhs = &lap * y;
            let rhs = DVector::from_iterator(n, (0..n).map(|i| lambda * deg[i] * y[i]));
            assert!((lhs - rhs).norm() < 1e-6);
            let dnorm: f64 = (0..n).map(|i| deg[i] * y[i] * y[i]).sum();
            assert!((dnorm - 1.0).abs() < 1e-8);
        }
        let full = dense_top(
            &{
                let inv: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
                DMatrix::from_fn(n, n, |i, j| dense[(i, j)] * inv[i] * inv[j])
            },
            5,
        )
        .unwrap();
        // the top eigenvalue of the normalized adjacency is the trivial 1
        for c in 0..4 {
            assert!((1.0 - full.0[c + 1] - e.eigenvalues[c]).abs() < 1e-8);
        }
    }

    #[test]
    fn lars_perfect_correlate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(50, 4, |_, _| rng.random::<f64>());
        let y = x.column(2).into_owned();
        let b = lars_select(&x, &y, 1).unwrap();
        for j in 0..4 {
            assert_eq!(b[j] != 0.0, j == 2, "{b}");
        }
        assert!((b[2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn lars_orthogonal_response() {
        let x = DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 1.0, -1.0]);
        let y = DVector::from_vec(vec![1.0, 1.0, -1.0, -1.0]);
        assert_eq!(lars_select(&x, &y, 1).unwrap()[0], 0.0);
    }

    #[test]
    fn lars_picks_stronger_correlate_with_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 400;
        let noise = |rng: &mut ChaCha8Rng| DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let y = noise(&mut rng);
        let a = -(&y * 0.9) + noise(&mut rng) * 0.45;
        let b = &y * 0.4 + noise(&mut rng) * 0.9;
        let x = DMatrix::from_columns(&[a.clone(), b.clone()]);
        let corr = |u: &DVector<f64>| {
            let uc = u.add_scalar(-u.mean());
            let yc = y.add_scalar(-y.mean());
            uc.dot(&yc) / (uc.norm() * yc.norm())
        };
        assert!(corr(&a).abs() > corr(&b).abs());
        let beta = lars_select(&x, &y, 1).unwrap();
        assert!(beta[0] < 0.0 && beta[1] == 0.0);
    }

    #[test]
    fn lars_all_zero_design() {
        let x = DMatrix::from_element(5, 2, 3.0);
        assert!(matches!(lars_select(&x, &DVector::zeros(5), 1), Err(Error::DegenerateDesign(_))));
    }
}
