//! Symmetric eigendecomposition by cyclic Jacobi rotations, spectral graph
//! filtering and spectral-radius estimation.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

const MAX_SWEEPS: usize = 100;
const POWER_MAX_ITER: usize = 10_000;

/// `S = U diag(Λ) Uᵀ`, eigenvalues ascending (clusters closer than the
/// convergence threshold are ordered by eigenvector), eigenvectors in the
/// columns of `U`.
#[derive(Clone, Debug)]
pub struct EigenDecomposition<T> {
    pub eigenvalues: Vec<T>,
    pub eigenvectors: Matrix<T>,
}

impl<T: Scalar> EigenDecomposition<T> {
    pub fn eigenvector(&self, i: usize) -> Vec<T> {
        self.eigenvectors.column(i)
    }

    /// `U diag(Λ) Uᵀ`.
    pub fn reconstruct(&self) -> Matrix<T> {
        self.apply_function(|x| x)
    }

    /// `U diag(f(λ_i)) Uᵀ`.
    pub fn apply_function(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        let u = &self.eigenvectors;
        let n = u.rows();
        let gains: Vec<T> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        Matrix::from_fn(n, n, |i, j| {
            (0..n).fold(T::zero(), |acc, k| acc + u[(i, k)] * gains[k] * u[(j, k)])
        })
    }
}

fn off_diagonal_norm<T: Scalar>(a: &Matrix<T>) -> T {
    let n = a.rows();
    let mut acc = T::zero();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += a[(i, j)] * a[(i, j)];
            }
        }
    }
    acc.sqrt()
}

/// Eigendecomposition of a symmetric matrix.
///
/// Sweeps over all `(p, q)` pairs in row order, annihilating each off-diagonal
/// entry with a plane rotation, until the off-diagonal Frobenius norm falls
/// below [`Scalar::jacobi_tol`] (scaled by `‖S‖_F` when that exceeds one).
pub fn eig_symmetric<T: Scalar>(s: &Matrix<T>) -> Result<EigenDecomposition<T>> {
    s.require_square("eig_symmetric")?;
    let asym = s.asymmetry()?;
    if asym > T::symmetry_tol() {
        return Err(Error::NotSymmetric(asym.to_f64_lossy()));
    }
    let n = s.rows();
    // symmetrize away round-off so rotations see an exactly symmetric matrix
    let mut a = Matrix::from_fn(n, n, |i, j| T::of(0.5) * (s[(i, j)] + s[(j, i)]));
    let mut v = Matrix::identity(n);
    let threshold = T::jacobi_tol() * s.frobenius_norm().max(T::one());

    let mut sweeps = 0;
    while off_diagonal_norm(&a) >= threshold {
        if sweeps == MAX_SWEEPS {
            return Err(Error::Numerical(format!(
                "Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps"
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (T::of(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = (t * t + T::one()).sqrt().recip();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }

    let mut pairs: Vec<(T, Vec<T>)> = (0..n)
        .map(|k| {
            let mut col = v.column(k);
            canonical_sign(&mut col);
            (a[(k, k)], col)
        })
        .collect();
    sort_pairs(&mut pairs, threshold);

    let eigenvalues = pairs.iter().map(|(l, _)| *l).collect();
    let eigenvectors = Matrix::from_fn(n, n, |i, k| pairs[k].1[i]);
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// Flips the vector so its first non-negligible component is positive.
fn canonical_sign<T: Scalar>(v: &mut [T]) {
    let scale = v.iter().fold(T::zero(), |m, x| m.max(x.abs()));
    let tiny = scale * T::of(1e-8);
    if let Some(first) = v.iter().find(|x| x.abs() > tiny) {
        if *first < T::zero() {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

fn lexicographic<T: Scalar>(a: &[T], b: &[T]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    Ordering::Equal
}

/// Ascending eigenvalues; eigenvalues within `tie_tol` form a cluster ordered
/// by the lexicographic order of their eigenvectors.
fn sort_pairs<T: Scalar>(pairs: &mut [(T, Vec<T>)], tie_tol: T) {
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    let mut start = 0;
    while start < pairs.len() {
        let mut end = start + 1;
        while end < pairs.len() && pairs[end].0 - pairs[end - 1].0 <= tie_tol {
            end += 1;
        }
        pairs[start..end].sort_by(|a, b| lexicographic(&a.1, &b.1));
        start = end;
    }
}

/// `U diag(h(λ_i)) Uᵀ X` for a symmetric `laplacian`.
pub fn spectral_filter<T: Scalar>(
    laplacian: &Matrix<T>,
    signal: &Matrix<T>,
    transfer: impl Fn(T) -> T,
) -> Result<Matrix<T>> {
    if signal.rows() != laplacian.rows() {
        return Err(Error::Shape {
            op: "spectral_filter",
            lhs: laplacian.shape(),
            rhs: signal.shape(),
        });
    }
    let eig = eig_symmetric(laplacian)?;
    let mut gains = Vec::with_capacity(eig.eigenvalues.len());
    for &l in &eig.eigenvalues {
        let g = transfer(l);
        if !g.is_finite() {
            return Err(Error::FilterPole(l.to_f64_lossy()));
        }
        gains.push(g);
    }
    let u = &eig.eigenvectors;
    // Uᵀ X, scaled row-wise by the gains, then U · (...)
    let mut spectrum = u.transpose().matmul(signal)?;
    for (k, &g) in gains.iter().enumerate() {
        spectrum.row_mut(k).iter_mut().for_each(|x| *x *= g);
    }
    u.matmul(&spectrum)
}

/// Implicit-fairing transfer function `1 / (1 + sλ)`.
pub fn implicit_fairing<T: Scalar>(s: T) -> impl Fn(T) -> T {
    move |lambda| (T::one() + s * lambda).recip()
}

/// `max_i |λ_i|`: exact eigensolve for symmetric input, power iteration otherwise.
pub fn spectral_radius<T: Scalar>(s: &Matrix<T>) -> Result<T> {
    s.require_square("spectral_radius")?;
    if s.rows() == 0 {
        return Ok(T::zero());
    }
    if s.asymmetry()? <= T::symmetry_tol() {
        let eig = eig_symmetric(s)?;
        return Ok(eig
            .eigenvalues
            .iter()
            .fold(T::zero(), |m, l| m.max(l.abs())));
    }
    power_iteration(s)
}

/// Two-step power iteration, `ρ ≈ sqrt(‖S²x‖)` for unit `x`, which also
/// settles when the dominant eigenvalues come as a `±λ` pair.
fn power_iteration<T: Scalar>(s: &Matrix<T>) -> Result<T> {
    let n = s.rows();
    let mut x = Matrix::from_fn(n, 1, |i, _| T::one() + T::of(0.01 * i as f64));
    let norm = x.frobenius_norm();
    x = x.scale(norm.recip());
    let mut previous = T::zero();
    let mut estimate = T::zero();
    for iteration in 0..POWER_MAX_ITER {
        let y = s.matmul(&s.matmul(&x)?)?;
        let ny = y.frobenius_norm();
        if ny == T::zero() {
            return Ok(T::zero());
        }
        previous = estimate;
        estimate = ny.sqrt();
        x = y.scale(ny.recip());
        if iteration > 0 && (estimate - previous).abs() <= T::power_tol() * estimate.max(T::one()) {
            return Ok(estimate);
        }
    }
    Err(Error::PowerIteration {
        iterations: POWER_MAX_ITER,
        previous: previous.to_f64_lossy(),
        last: estimate.to_f64_lossy(),
    })
}
