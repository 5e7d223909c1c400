//! Shared numerical kernels.
//!
//! Rank deficiency is the normal case here: a tabular softmax policy is
//! unchanged by adding a constant to every logit of a context, so every
//! Fisher matrix and regression design built from it has a null direction per
//! context. Both solvers therefore return minimum-norm solutions, discarding
//! singular values (eigenvalues) below `max(rows, cols) * ε_mach * σ_max`.

use faer::Mat;
use rand::{Rng, SeedableRng};

use crate::{Error, Result};

/// Deterministic, explicitly seeded random stream.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    SeededRng::seed_from_u64(seed)
}

/// Inverse-CDF draw from a discrete distribution. Zero-probability entries
/// are never returned.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p;
        last = i;
        if u < cum {
            return i;
        }
    }
    // Rounding left the cumulative sum just below u.
    last
}

/// Row-major dense matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                what: "matrix entries",
                expected: rows * cols,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix".into()));
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

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Dimension {
                what: "matrix row",
                expected: cols,
                found: bad.len(),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn diag(values: &[f64]) -> Result<Self> {
        let n = values.len();
        let mut data = vec![0.0; n * n];
        for (i, v) in values.iter().enumerate() {
            data[i * n + i] = *v;
        }
        Self::new(n, n, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn transpose_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    /// Adds `w * a bᵀ` in place (square or rectangular, `a.len() == rows`).
    pub fn add_outer(&mut self, w: f64, a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), self.rows);
        assert_eq!(b.len(), self.cols);
        for (i, ai) in a.iter().enumerate() {
            if *ai == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, bj) in row.iter_mut().zip(b) {
                *r += w * ai * bj;
            }
        }
    }

    fn to_faer(&self) -> Mat<f64> {
        Mat::from_fn(self.rows, self.cols, |i, j| self.get(i, j))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresSolution {
    pub solution: Vec<f64>,
    pub residual_norm: f64,
    pub rank: usize,
}

fn cutoff(rows: usize, cols: usize, largest: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * largest
}

/// Minimum-norm minimizer of `‖Aδ − b‖²`, computed from the SVD of `A`.
pub fn min_norm_lstsq(a: &DenseMatrix, b: &[f64]) -> Result<LeastSquaresSolution> {
    if b.len() != a.rows {
        return Err(Error::Dimension {
            what: "least-squares target",
            expected: a.rows,
            found: b.len(),
        });
    }
    if b.iter().any(|v| !v.is_finite()) || a.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("least-squares input".into()));
    }
    if a.rows == 0 || a.cols == 0 {
        return Ok(LeastSquaresSolution {
            solution: vec![0.0; a.cols],
            residual_norm: b.iter().map(|v| v * v).sum::<f64>().sqrt(),
            rank: 0,
        });
    }

    let svd = a
        .to_faer()
        .thin_svd()
        .map_err(|e| Error::NonFinite(format!("svd did not converge: {e:?}")))?;
    let (u, v) = (svd.U(), svd.V());
    let sigma = svd.S().column_vector();
    let k = sigma.nrows();
    let largest = (0..k).map(|i| sigma[i]).fold(0.0, f64::max);
    let tol = cutoff(a.rows, a.cols, largest);

    let mut solution = vec![0.0; a.cols];
    let mut rank = 0;
    for i in 0..k {
        let s = sigma[i];
        if s > tol && s > 0.0 {
            rank += 1;
            let coeff = (0..a.rows).map(|r| u[(r, i)] * b[r]).sum::<f64>() / s;
            for (j, x) in solution.iter_mut().enumerate() {
                *x += coeff * v[(j, i)];
            }
        }
    }
    let residual_norm = a
        .mul_vec(&solution)
        .iter()
        .zip(b)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        .sqrt();
    Ok(LeastSquaresSolution {
        solution,
        residual_norm,
        rank,
    })
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvector `k` stored in
/// column `k` of the row-major `n × n` vector matrix.
pub fn symmetric_eigen(m: &DenseMatrix) -> (Vec<f64>, Vec<f64>) {
    let n = m.rows;
    assert_eq!(n, m.cols, "symmetric_eigen needs a square matrix");
    let mut a = m.data.clone();
    let mut v = DenseMatrix::identity(n).data;
    let frob: f64 = a.iter().map(|x| x * x).sum();

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| a[p * n + q] * a[p * n + q])
            .sum();
        if off <= (f64::EPSILON * f64::EPSILON) * frob * 1e-4 || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues = (0..n).map(|i| a[i * n + i]).collect();
    (eigenvalues, v)
}

/// `F† v` for a symmetric positive semidefinite `F`.
pub fn pinv_apply(f: &DenseMatrix, v: &[f64]) -> Result<Vec<f64>> {
    let n = f.rows;
    if f.cols != n {
        return Err(Error::Dimension {
            what: "pseudo-inverse (square matrix)",
            expected: n,
            found: f.cols,
        });
    }
    if v.len() != n {
        return Err(Error::Dimension {
            what: "pseudo-inverse vector",
            expected: n,
            found: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("pseudo-inverse vector".into()));
    }
    let scale = f.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let mut asym = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((f.get(i, j) - f.get(j, i)).abs());
        }
    }
    if asym > 1e-10 * scale.max(f64::MIN_POSITIVE) && asym > 0.0 {
        return Err(Error::NotSymmetric(asym));
    }

    let (values, vectors) = symmetric_eigen(f);
    let largest = values.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if n > 0 && min < -1e-10 * largest.max(f64::MIN_POSITIVE) {
        return Err(Error::NotPsd(min));
    }
    let tol = cutoff(n, n, largest);

    let mut out = vec![0.0; n];
    for (k, &lambda) in values.iter().enumerate() {
        if lambda <= tol || lambda <= 0.0 {
            continue;
        }
        let proj: f64 = (0..n).map(|i| vectors[i * n + k] * v[i]).sum();
        let coeff = proj / lambda;
        for (i, o) in out.iter_mut().enumerate() {
            *o += coeff * vectors[i * n + k];
        }
    }
    Ok(out)
}

/// Central-difference gradient `(f(θ + h e_i) − f(θ − h e_i)) / 2h`.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> Result<Vec<f64>> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidConfig(format!("finite-difference step {h} must be > 0")));
    }
    let mut point = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        point[i] = theta[i] + h;
        let plus = f(&point);
        point[i] = theta[i] - h;
        let minus = f(&point);
        point[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective near coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vectors are exactly zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn lstsq_identity() {
        let sol = min_norm_lstsq(&DenseMatrix::identity(2), &[3.0, 4.0]).unwrap();
        assert!(close(&sol.solution, &[3.0, 4.0], 1e-14));
        assert!(sol.residual_norm < 1e-14);
        assert_eq!(sol.rank, 2);
    }

    #[test]
    fn lstsq_underdetermined_splits_evenly() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let sol = min_norm_lstsq(&a, &[2.0]).unwrap();
        assert!(close(&sol.solution, &[1.0, 1.0], 1e-14));
        assert_eq!(sol.rank, 1);
    }

    #[test]
    fn lstsq_inconsistent_rows() {
        // Normal equations: 2 δ₀ = 1, δ₁ free → min-norm (0.5, 0).
        let a = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let sol = min_norm_lstsq(&a, &[1.0, 0.0]).unwrap();
        assert!(close(&sol.solution, &[0.5, 0.0], 1e-14));
        assert!((sol.residual_norm.powi(2) - 0.5).abs() < 1e-14);

        // Brute-force grid over δ₀ confirms the minimizer.
        let best = (0..=1000)
            .map(|i| i as f64 / 1000.0)
            .map(|d| ((d - 1.0).powi(2) + d * d, d))
            .fold((f64::INFINITY, 0.0), |acc, v| if v.0 < acc.0 { v } else { acc });
        assert!((best.1 - 0.5).abs() < 1e-12);
        assert!((best.0 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lstsq_rejects_bad_input() {
        assert!(DenseMatrix::new(1, 1, vec![f64::NAN]).is_err());
        let a = DenseMatrix::identity(2);
        assert!(matches!(
            min_norm_lstsq(&a, &[1.0, f64::INFINITY]),
            Err(Error::NonFinite(_))
        ));
        assert!(min_norm_lstsq(&a, &[1.0]).is_err());
    }

    #[test]
    fn lstsq_empty() {
        let sol = min_norm_lstsq(&DenseMatrix::zeros(0, 0), &[]).unwrap();
        assert!(sol.solution.is_empty());
    }

    #[test]
    fn pinv_examples() {
        let f = DenseMatrix::diag(&[2.0, 0.0]).unwrap();
        assert!(close(&pinv_apply(&f, &[4.0, 7.0]).unwrap(), &[2.0, 0.0], 1e-15));

        let v = [0.3, -1.7, 2.0];
        assert!(close(&pinv_apply(&DenseMatrix::identity(3), &v).unwrap(), &v, 1e-15));

        let f = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let third = 1.0 / 3.0;
        assert!(close(&pinv_apply(&f, &[1.0, 1.0]).unwrap(), &[third, third], 1e-15));
    }

    #[test]
    fn pinv_rejects_asymmetric_and_indefinite() {
        let f = DenseMatrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(pinv_apply(&f, &[1.0, 1.0]), Err(Error::NotSymmetric(_))));
        let f = DenseMatrix::diag(&[1.0, -1.0]).unwrap();
        assert!(matches!(pinv_apply(&f, &[1.0, 1.0]), Err(Error::NotPsd(_))));
    }

    #[test]
    fn jacobi_reconstructs() {
        let m = DenseMatrix::from_rows(&[vec![4.0, 1.0, -2.0], vec![1.0, 2.0, 0.5], vec![-2.0, 0.5, 3.0]]).unwrap();
        let (vals, vecs) = symmetric_eigen(&m);
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3).map(|k| vecs[i * 3 + k] * vals[k] * vecs[j * 3 + k]).sum();
                assert!((r - m.get(i, j)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn finite_differences() {
        let g = finite_diff_grad(|t| dot(t, t), &[1.0, 2.0], 1e-5).unwrap();
        assert!(close(&g, &[2.0, 4.0], 1e-6));
        let g = finite_diff_grad(|_| 3.5, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        let g = finite_diff_grad(|t| t[0].exp(), &[0.0], 1e-5).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-8);
        assert!(finite_diff_grad(|_| f64::NAN, &[0.0], 1e-5).is_err());
        assert!(finite_diff_grad(|t| t[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = seeded_rng(42);
        let mut b = seeded_rng(42);
        let xs: Vec<u64> = (0..64).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..64).map(|_| b.random()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn categorical_skips_zero_mass() {
        let mut rng = seeded_rng(1);
        for _ in 0..1000 {
            assert_eq!(sample_categorical(&[0.0, 1.0, 0.0], &mut rng), 1);
        }
    }

    /// Forward-error tolerance: `tight` for well-conditioned problems,
    /// otherwise a multiple of `κ ε_mach`.
    fn tolerance(kappa: f64, tight: f64) -> f64 {
        if kappa <= 1e4 {
            tight
        } else {
            tight.max(100.0 * kappa * f64::EPSILON)
        }
    }

    /// Condition number of a PSD matrix over its numerically nonzero spectrum.
    fn psd_condition(f: &DenseMatrix) -> f64 {
        let (values, _) = symmetric_eigen(f);
        let top = values.iter().cloned().fold(0.0, f64::max);
        let tol = cutoff(f.rows(), f.cols(), top);
        let low = values
            .iter()
            .cloned()
            .filter(|v| *v > tol)
            .fold(f64::INFINITY, f64::min);
        top / low
    }

    fn gram(a: &DenseMatrix) -> DenseMatrix {
        let mut g = DenseMatrix::zeros(a.cols(), a.cols());
        for i in 0..a.rows() {
            g.add_outer(1.0, a.row(i), a.row(i));
        }
        g
    }

    fn matrix_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..6, 1usize..6)
            .prop_flat_map(|(r, c)| (Just(r), Just(c), proptest::collection::vec(-3.0f64..3.0, r * c)))
    }

    proptest! {
        #[test]
        fn residual_orthogonal_to_columns((r, c, data) in matrix_strategy(), seed in 0u64..1000) {
            let a = DenseMatrix::new(r, c, data).unwrap();
            let mut rng = seeded_rng(seed);
            let b: Vec<f64> = (0..r).map(|_| rng.random_range(-2.0..2.0)).collect();
            let sol = min_norm_lstsq(&a, &b).unwrap();
            let resid: Vec<f64> = a.mul_vec(&sol.solution).iter().zip(&b).map(|(p, t)| p - t).collect();
            let normal = a.transpose_mul_vec(&resid);
            let scale = a.data().iter().map(|x| x * x).sum::<f64>().sqrt() * norm(&b);
            prop_assert!(norm(&normal) <= 1e-10 * scale.max(1.0));
        }

        #[test]
        fn recovers_row_space_projection((r, c, data) in matrix_strategy(), seed in 0u64..1000) {
            let a = DenseMatrix::new(r, c, data).unwrap();
            let mut rng = seeded_rng(seed);
            let w: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
            let sol = min_norm_lstsq(&a, &a.mul_vec(&w)).unwrap();
            // The min-norm answer lies in the row space and reproduces A·w.
            let back = min_norm_lstsq(&a, &a.mul_vec(&sol.solution)).unwrap();
            let kappa = psd_condition(&gram(&a)).sqrt();
            prop_assert!(relative_error(&back.solution, &sol.solution) <= tolerance(kappa, 1e-10));
            if sol.rank == c {
                prop_assert!(relative_error(&sol.solution, &w) <= tolerance(kappa, 1e-10));
            }
        }

        #[test]
        fn pinv_matches_lstsq_on_psd(n in 1usize..6, k in 1usize..6, seed in 0u64..1000) {
            let mut rng = seeded_rng(seed);
            let g: Vec<f64> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut f = DenseMatrix::zeros(n, n);
            for j in 0..k {
                let col: Vec<f64> = (0..n).map(|i| g[i * k + j]).collect();
                f.add_outer(1.0, &col, &col);
            }
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = pinv_apply(&f, &v).unwrap();
            let l = min_norm_lstsq(&f, &v).unwrap();
            prop_assert!(relative_error(&p, &l.solution) <= tolerance(psd_condition(&f), 1e-10));
        }
    }
}
