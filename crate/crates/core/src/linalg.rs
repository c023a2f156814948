//! Dense kernels used by every other module.
//!
//! Storage is row-major `f32`; every contraction accumulates in `f64` and
//! runs left-to-right over the contraction axis, so results are bitwise
//! reproducible for a given input regardless of how rows are batched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f32`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Builds a matrix, checking the length and that every entry is finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f32]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Stacks equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        let mut acc = vec![0.0f64; rhs.cols];
        for i in 0..self.rows {
            matvec_row_into(self.row(i), rhs, &mut acc, out.row_mut(i));
        }
        Ok(out)
    }

    /// Copies the listed rows into a new `indices.len() x cols` matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Overwrites `self[indices[r]] = src[r]` for every row of `src`.
    pub fn scatter_rows(&mut self, indices: &[usize], src: &Matrix) -> Result<()> {
        if src.rows != indices.len() || src.cols != self.cols {
            return Err(Error::Shape(format!(
                "scatter of {}x{} into {} rows of width {}",
                src.rows,
                src.cols,
                indices.len(),
                self.cols
            )));
        }
        for (r, &i) in indices.iter().enumerate() {
            self.row_mut(i).copy_from_slice(src.row(r));
        }
        Ok(())
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::Shape("elementwise add of unequal shapes".into()));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// `out = x · w` for a single row `x`, using `acc` as the f64 scratch.
#[inline]
pub(crate) fn matvec_row_into(x: &[f32], w: &Matrix, acc: &mut [f64], out: &mut [f32]) {
    acc.iter_mut().for_each(|a| *a = 0.0);
    let quads = x.len() / 4 * 4;
    for k in (0..quads).step_by(4) {
        let (x0, x1, x2, x3) = (
            x[k] as f64,
            x[k + 1] as f64,
            x[k + 2] as f64,
            x[k + 3] as f64,
        );
        let (r0, r1, r2, r3) = (w.row(k), w.row(k + 1), w.row(k + 2), w.row(k + 3));
        for j in 0..acc.len() {
            acc[j] = acc[j]
                + x0 * r0[j] as f64
                + x1 * r1[j] as f64
                + x2 * r2[j] as f64
                + x3 * r3[j] as f64;
        }
    }
    for (k, &xk) in x.iter().enumerate().skip(quads) {
        let xk = xk as f64;
        for (a, &wk) in acc.iter_mut().zip(w.row(k)) {
            *a += xk * wk as f64;
        }
    }
    for (o, &a) in out.iter_mut().zip(acc.iter()) {
        *o = a as f32;
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |s, (&x, &y)| s + x as f64 * y as f64)
}

#[inline]
pub fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |s, (&x, &y)| s + x * y)
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_f64(a: &[f64]) -> f64 {
    dot_f64(a, a).sqrt()
}

const COSINE_NORM_FLOOR: f64 = 1e-12;

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_sim(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= COSINE_NORM_FLOOR || nb <= COSINE_NORM_FLOOR {
        return Err(Error::Degenerate(
            "cosine similarity of a zero vector".into(),
        ));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `f64` twin of [`cosine_sim`] for the verification code paths.
pub fn cosine_sim_f64(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm_f64(a), norm_f64(b));
    if na <= COSINE_NORM_FLOOR || nb <= COSINE_NORM_FLOOR {
        return Err(Error::Degenerate(
            "cosine similarity of a zero vector".into(),
        ));
    }
    Ok((dot_f64(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Indices of the `k` smallest scores, ties to the lower index, returned ascending.
pub fn topk_lowest(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Argument(format!(
            "k = {k} outside [1, {}]",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Singular value decomposition `W = U diag(λ) Vᵀ` of a square matrix.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub left_vectors: Matrix,
    pub singular_values: Vec<f32>,
    pub right_vectors: Matrix,
}

impl SvdResult {
    /// `U diag(λ) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let d = self.singular_values.len();
        let mut out = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0f64;
                for (k, &l) in self.singular_values.iter().enumerate() {
                    s += self.left_vectors.get(i, k) as f64
                        * l as f64
                        * self.right_vectors.get(j, k) as f64;
                }
                out.set(i, j, s as f32);
            }
        }
        out
    }
}

/// `f64` SVD with column-major factors: `u[k]` and `v[k]` are the k-th singular vectors.
#[derive(Clone, Debug)]
pub struct SvdF64 {
    pub dim: usize,
    pub u: Vec<Vec<f64>>,
    pub s: Vec<f64>,
    pub v: Vec<Vec<f64>>,
}

const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 60;

/// One-sided Jacobi SVD of a square `f32` matrix.
pub fn svd(w: &Matrix) -> Result<SvdResult> {
    let f = svd_f64(w)?;
    let d = f.dim;
    let left = Matrix::from_fn(d, d, |i, k| f.u[k][i] as f32);
    let right = Matrix::from_fn(d, d, |i, k| f.v[k][i] as f32);
    Ok(SvdResult {
        left_vectors: left,
        singular_values: f.s.iter().map(|&s| s as f32).collect(),
        right_vectors: right,
    })
}

/// Same decomposition as [`svd`], kept in `f64`.
pub fn svd_f64(w: &Matrix) -> Result<SvdF64> {
    if !w.is_square() {
        return Err(Error::Shape(format!(
            "svd needs a square matrix, got {}x{}",
            w.rows(),
            w.cols()
        )));
    }
    let d = w.rows();
    if d == 0 {
        return Err(Error::Shape("svd of an empty matrix".into()));
    }
    if !w.all_finite() {
        return Err(Error::Degenerate("svd input has non-finite entries".into()));
    }
    let mut b: Vec<Vec<f64>> = (0..d)
        .map(|j| (0..d).map(|i| w.get(i, j) as f64).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            e
        })
        .collect();

    jacobi_sweeps(&mut b, Some(&mut v));

    let norms: Vec<f64> = b.iter().map(|col| norm_f64(col)).collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &c| norms[c].total_cmp(&norms[a]).then(a.cmp(&c)));

    let top = norms[order[0]];
    let zero_floor = top * (d as f64) * f64::EPSILON;
    let mut s = Vec::with_capacity(d);
    let mut u: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut v_sorted = Vec::with_capacity(d);
    let mut missing = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        v_sorted.push(v[j].clone());
        if sigma > zero_floor && sigma > 0.0 {
            s.push(sigma);
            u.push(b[j].iter().map(|x| x / sigma).collect());
        } else {
            s.push(0.0);
            u.push(vec![0.0; d]);
            missing.push(slot);
        }
    }
    complete_basis(&mut u, &missing);

    Ok(SvdF64 {
        dim: d,
        u,
        s,
        v: v_sorted,
    })
}

/// Orthogonalizes the columns `b` in place by one-sided Jacobi rotations,
/// applying the same rotations to `v` when given.
fn jacobi_sweeps(b: &mut [Vec<f64>], mut v: Option<&mut Vec<Vec<f64>>>) {
    let n = b.len();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot_f64(&b[p], &b[p]);
                let beta = dot_f64(&b[q], &b[q]);
                let gamma = dot_f64(&b[p], &b[q]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(b, p, q, c, s);
                if let Some(v) = v.as_deref_mut() {
                    rotate_pair(v, p, q, c, s);
                }
            }
        }
        if !rotated {
            break;
        }
    }
}

/// Singular values of any matrix, descending, by one-sided Jacobi on the
/// orientation with fewer columns. Zero-sized input gives an empty list.
pub fn singular_values(w: &Matrix) -> Vec<f64> {
    let (m, n) = w.shape();
    if m == 0 || n == 0 {
        return Vec::new();
    }
    let mut b: Vec<Vec<f64>> = if n <= m {
        (0..n)
            .map(|j| (0..m).map(|i| w.get(i, j) as f64).collect())
            .collect()
    } else {
        (0..m)
            .map(|i| w.row(i).iter().map(|&x| x as f64).collect())
            .collect()
    };
    jacobi_sweeps(&mut b, None);
    let mut s: Vec<f64> = b.iter().map(|c| norm_f64(c)).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the `missing` columns with unit vectors orthogonal to all others
/// (modified Gram-Schmidt against the standard basis).
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize]) {
    let d = cols.len();
    let mut candidate = 0usize;
    for &slot in missing {
        while candidate < d {
            let mut e = vec![0.0; d];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (k, col) in cols.iter().enumerate() {
                    if k == slot || (missing.contains(&k) && norm_f64(col) == 0.0) {
                        continue;
                    }
                    let proj = dot_f64(&e, col);
                    e.iter_mut().zip(col).for_each(|(x, c)| *x -= proj * c);
                }
            }
            let n = norm_f64(&e);
            if n > 1e-6 {
                cols[slot] = e.iter().map(|x| x / n).collect();
                break;
            }
        }
    }
}

const POWER_MAX_ITERS: usize = 20_000;
const POWER_REL_TOL: f64 = 1e-13;

/// Largest singular value by power iteration on the smaller Gram matrix.
pub fn spectral_norm(w: &Matrix) -> f64 {
    let (m, n) = w.shape();
    if m == 0 || n == 0 {
        return 0.0;
    }
    let a = w.to_f64();
    // Gram of the smaller side: G = W Wᵀ (m x m) or Wᵀ W (n x n).
    let (dim, gram) = if m <= n {
        let mut g = vec![0.0f64; m * m];
        for i in 0..m {
            for j in i..m {
                let s = dot_f64(&a[i * n..(i + 1) * n], &a[j * n..(j + 1) * n]);
                g[i * m + j] = s;
                g[j * m + i] = s;
            }
        }
        (m, g)
    } else {
        let cols: Vec<Vec<f64>> = (0..n)
            .map(|j| (0..m).map(|i| a[i * n + j]).collect())
            .collect();
        let mut g = vec![0.0f64; n * n];
        for i in 0..n {
            for j in i..n {
                let s = dot_f64(&cols[i], &cols[j]);
                g[i * n + j] = s;
                g[j * n + i] = s;
            }
        }
        (n, g)
    };
    if gram.iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    let mut x: Vec<f64> = (0..dim)
        .map(|i| 1.0 + (i as f64 + 1.0).sqrt() * 1e-3)
        .collect();
    let nx = norm_f64(&x);
    x.iter_mut().for_each(|v| *v /= nx);
    let mut y = vec![0.0f64; dim];
    let mut estimate = 0.0f64;
    for _ in 0..POWER_MAX_ITERS {
        for i in 0..dim {
            y[i] = dot_f64(&gram[i * dim..(i + 1) * dim], &x);
        }
        let rayleigh = dot_f64(&x, &y);
        let ny = norm_f64(&y);
        if ny == 0.0 {
            return 0.0;
        }
        for i in 0..dim {
            x[i] = y[i] / ny;
        }
        let done = (rayleigh - estimate).abs() <= POWER_REL_TOL * rayleigh.abs();
        estimate = rayleigh;
        if done {
            break;
        }
    }
    estimate.max(0.0).sqrt()
}

/// Spectral norm through the SVD route (square matrices only).
pub fn spectral_norm_svd(w: &Matrix) -> Result<f64> {
    Ok(svd_f64(w)?.s[0])
}
