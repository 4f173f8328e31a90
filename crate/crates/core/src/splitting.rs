//! Implicit fairing `(I + sL)H = X` solved by the regular splitting
//! `L_s = (1+s)I − sÂ = B − C`, plus a numerical certificate of the
//! splitting's algebraic properties.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{inverse, solve, Matrix};
use crate::scalar::Scalar;
use crate::spectral::{eig_symmetric, spectral_radius};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 10_000;
/// Tolerance used by [`verify_properties`].
pub const PROPERTY_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct RegularSplitting<T> {
    pub s: T,
    pub normalized_adjacency: Matrix<T>,
    /// `(1+s)I`
    pub b: Matrix<T>,
    /// `sÂ`
    pub c: Matrix<T>,
    /// `B − C`
    pub l_s: Matrix<T>,
}

impl<T: Scalar> RegularSplitting<T> {
    pub fn num_nodes(&self) -> usize {
        self.b.rows()
    }

    /// `B⁻¹C = (s/(1+s))Â`.
    pub fn iteration_matrix(&self) -> Matrix<T> {
        self.c.scale((T::one() + self.s).recip())
    }

    pub fn contraction_weight(&self) -> T {
        self.s / (T::one() + self.s)
    }

    pub fn input_weight(&self) -> T {
        (T::one() + self.s).recip()
    }
}

pub fn split<T: Scalar>(a_hat: &Matrix<T>, s: T) -> Result<RegularSplitting<T>> {
    if !(s > T::zero()) || !s.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "smoothing parameter s must be positive and finite, got {s}"
        )));
    }
    a_hat.require_square("split")?;
    let n = a_hat.rows();
    let b = Matrix::identity(n).scale(T::one() + s);
    let c = a_hat.scale(s);
    let l_s = b.sub(&c)?;
    Ok(RegularSplitting {
        s,
        normalized_adjacency: a_hat.clone(),
        b,
        c,
        l_s,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct IterationTrace<T> {
    pub iterates: Vec<Matrix<T>>,
    /// `‖L_s H⁽ᵗ⁾ − X‖_F` for every stored iterate.
    pub residual_norms: Vec<T>,
    pub converged: bool,
    pub steps: usize,
}

impl<T: Scalar> IterationTrace<T> {
    /// Ratios `r[t+1] / r[t]` of consecutive residual norms.
    pub fn contraction_factors(&self) -> Vec<T> {
        self.residual_norms
            .windows(2)
            .filter(|w| w[0] > T::zero())
            .map(|w| w[1] / w[0])
            .collect()
    }

    /// Contraction factors restricted to steps `t ≥ burn_in` whose residual is
    /// still at least `floor` times the first one. Below that level the
    /// computed residual is dominated by rounding error and its ratios carry
    /// no information about the iteration matrix.
    pub fn contraction_factors_above(&self, burn_in: usize, floor: T) -> Vec<T> {
        let Some(&first) = self.residual_norms.first() else {
            return Vec::new();
        };
        let cutoff = first * floor;
        self.residual_norms
            .windows(2)
            .enumerate()
            .skip(burn_in)
            .filter(|(_, w)| w[0] > cutoff && w[1] > cutoff)
            .map(|(_, w)| w[1] / w[0])
            .collect()
    }

    fn to_f64(&self) -> IterationTrace<f64> {
        IterationTrace {
            iterates: self
                .iterates
                .iter()
                .map(|m| {
                    Matrix::from_vec(
                        m.rows(),
                        m.cols(),
                        m.as_slice().iter().map(|x| x.to_f64_lossy()).collect(),
                    )
                    .expect("same shape")
                })
                .collect(),
            residual_norms: self
                .residual_norms
                .iter()
                .map(|x| x.to_f64_lossy())
                .collect(),
            converged: self.converged,
            steps: self.steps,
        }
    }
}

/// One explicit step `H ← (s/(1+s))ÂH + (1/(1+s))X`.
pub fn iterate_once<T: Scalar>(
    split: &RegularSplitting<T>,
    h: &Matrix<T>,
    x: &Matrix<T>,
) -> Result<Matrix<T>> {
    let mut next = split
        .normalized_adjacency
        .matmul(h)?
        .scale(split.contraction_weight());
    next.axpy(split.input_weight(), x)?;
    Ok(next)
}

fn residual_norm<T: Scalar>(
    split: &RegularSplitting<T>,
    h: &Matrix<T>,
    x: &Matrix<T>,
) -> Result<T> {
    Ok(split.l_s.matmul(h)?.sub(x)?.frobenius_norm())
}

/// Jacobi-type iteration from `H⁽⁰⁾ = X` until the relative residual
/// `‖L_s H − X‖_F / ‖X‖_F` drops to `tol`.
pub fn solve_iterative<T: Scalar>(
    split: &RegularSplitting<T>,
    x: &Matrix<T>,
    tol: T,
    max_iter: usize,
) -> Result<(Matrix<T>, IterationTrace<T>)> {
    if !(tol > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    if x.rows() != split.num_nodes() {
        return Err(Error::Shape {
            op: "solve_iterative",
            lhs: split.l_s.shape(),
            rhs: x.shape(),
        });
    }
    let x_norm = x.frobenius_norm();
    let mut h = x.clone();
    let mut trace = IterationTrace {
        iterates: vec![h.clone()],
        residual_norms: vec![residual_norm(split, &h, x)?],
        converged: false,
        steps: 0,
    };
    if x_norm == T::zero() {
        h = iterate_once(split, &h, x)?;
        trace.residual_norms.push(residual_norm(split, &h, x)?);
        trace.iterates.push(h.clone());
        trace.steps = 1;
        trace.converged = true;
        return Ok((h, trace));
    }
    let mut relative = trace.residual_norms[0] / x_norm;
    while relative > tol {
        if trace.steps == max_iter {
            return Err(Error::NotConverged {
                max_iter,
                residual: relative.to_f64_lossy(),
                trace: Box::new(trace.to_f64()),
            });
        }
        h = iterate_once(split, &h, x)?;
        let r = residual_norm(split, &h, x)?;
        trace.residual_norms.push(r);
        trace.iterates.push(h.clone());
        trace.steps += 1;
        relative = r / x_norm;
    }
    trace.converged = true;
    Ok((h, trace))
}

/// Reference solution of `L_s H = X` by LU.
pub fn solve_direct<T: Scalar>(split: &RegularSplitting<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    solve(&split.l_s, x)
}

/// `(W_s, W̃_s)`: the `F×F` diagonal weights of the matrix-form step
/// `H ← ÂH W_s + X W̃_s`.
pub fn diagonal_form<T: Scalar>(
    split: &RegularSplitting<T>,
    width: usize,
) -> Result<(Matrix<T>, Matrix<T>)> {
    if width == 0 {
        return Err(Error::InvalidArgument(
            "feature width must be at least 1".into(),
        ));
    }
    Ok((
        Matrix::identity(width).scale(split.contraction_weight()),
        Matrix::identity(width).scale(split.input_weight()),
    ))
}

/// Outcome of one property check: `residual` is the measured violation (or
/// the margin, for inequality properties).
#[derive(Clone, Debug, Serialize)]
pub struct PropertyCheck {
    pub name: &'static str,
    pub passed: bool,
    pub residual: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PropertyReport {
    pub s: f64,
    pub tolerance: f64,
    /// Eigenvalues of `B⁻¹C`, ascending.
    pub mu: Vec<f64>,
    /// Eigenvalues of `L_s⁻¹C`, ascending.
    pub tau: Vec<f64>,
    pub rho_iteration: f64,
    pub rho_ls_inv_c: f64,
    pub properties: Vec<PropertyCheck>,
    /// `L_s⁻¹ ≥ 0` entrywise (M-matrix), with `B⁻¹ ≥ 0`, `C ≥ 0`.
    pub m_matrix: PropertyCheck,
    pub all_passed: bool,
}

/// Checks, each to [`PROPERTY_TOL`]:
/// commutation of `B⁻¹C` with `L_s⁻¹C`, their shared eigenvectors,
/// `μ_i = τ_i/(1+τ_i)`, `τ_i > −1/2`, and the spectral-radius relation.
pub fn verify_properties<T: Scalar>(split: &RegularSplitting<T>) -> Result<PropertyReport> {
    let tol = PROPERTY_TOL;
    let f = |x: T| x.to_f64_lossy();
    let b_inv = inverse(&split.b)?;
    let ls_inv = inverse(&split.l_s)?;
    let iteration = b_inv.matmul(&split.c)?;
    let ls_inv_c = ls_inv.matmul(&split.c)?;

    let mut properties = Vec::with_capacity(5);

    let lhs = iteration.matmul(&ls_inv)?;
    let rhs = ls_inv.matmul(&split.c)?.matmul(&b_inv)?;
    let commute = f(lhs.max_abs_diff(&rhs)?);
    properties.push(PropertyCheck {
        name: "commutation",
        passed: commute <= tol,
        residual: commute,
    });

    // Both operators are symmetric; eigenvectors of B⁻¹C must be eigenvectors
    // of L_s⁻¹C (and vice versa). Checked as ‖Mu − (uᵀMu)u‖, which is basis
    // independent inside repeated eigenspaces.
    let sym = |m: &Matrix<T>| {
        let n = m.rows();
        Matrix::from_fn(n, n, |i, j| T::of(0.5) * (m[(i, j)] + m[(j, i)]))
    };
    let eig_mu = eig_symmetric(&sym(&iteration))?;
    let eig_tau = eig_symmetric(&sym(&ls_inv_c))?;
    let n = split.num_nodes();
    let mut shared = 0.0f64;
    let mut pairing = 0.0f64;
    for (basis, other) in [(&eig_mu, &ls_inv_c), (&eig_tau, &iteration)] {
        for k in 0..n {
            let u = Matrix::from_vec(n, 1, basis.eigenvector(k))?;
            let mu_vec = other.matmul(&u)?;
            let rayleigh = u.transpose().matmul(&mu_vec)?[(0, 0)];
            let res = mu_vec.sub(&u.scale(rayleigh))?.frobenius_norm();
            shared = shared.max(f(res));
        }
    }
    for k in 0..n {
        let u = Matrix::from_vec(n, 1, eig_mu.eigenvector(k))?;
        let tau_k = u.transpose().matmul(&ls_inv_c.matmul(&u)?)?[(0, 0)];
        let mu_k = eig_mu.eigenvalues[k];
        pairing = pairing.max(f((mu_k - tau_k / (T::one() + tau_k)).abs()));
    }
    properties.push(PropertyCheck {
        name: "shared_eigenvectors",
        passed: shared <= tol,
        residual: shared,
    });
    properties.push(PropertyCheck {
        name: "eigenvalue_map",
        passed: pairing <= tol,
        residual: pairing,
    });

    let tau: Vec<f64> = eig_tau.eigenvalues.iter().map(|&x| f(x)).collect();
    let mu: Vec<f64> = eig_mu.eigenvalues.iter().map(|&x| f(x)).collect();
    let tau_min = tau.iter().copied().fold(f64::INFINITY, f64::min);
    let margin = tau_min + 0.5;
    properties.push(PropertyCheck {
        name: "convergence_condition",
        passed: margin > 0.0,
        residual: margin,
    });

    let rho_iteration = f(spectral_radius(&iteration)?);
    let rho_ls_inv_c = f(spectral_radius(&sym(&ls_inv_c))?);
    let radius_gap = (rho_iteration - rho_ls_inv_c / (1.0 + rho_ls_inv_c)).abs();
    properties.push(PropertyCheck {
        name: "radius_relation",
        passed: radius_gap <= tol,
        residual: radius_gap,
    });

    let min_entry = |m: &Matrix<T>| m.as_slice().iter().fold(f64::INFINITY, |a, &x| a.min(f(x)));
    let worst = min_entry(&ls_inv)
        .min(min_entry(&b_inv))
        .min(min_entry(&split.c));
    let m_matrix = PropertyCheck {
        name: "m_matrix",
        passed: worst >= -1e-12,
        residual: worst,
    };

    let all_passed = properties.iter().all(|p| p.passed) && m_matrix.passed;
    Ok(PropertyReport {
        s: f(split.s),
        tolerance: tol,
        mu,
        tau,
        rho_iteration,
        rho_ls_inv_c,
        properties,
        m_matrix,
        all_passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_adjacency, normalize_adjacency, SkeletonTopology};

    fn p3_hat() -> Matrix<f64> {
        let a = build_adjacency(&SkeletonTopology::path(3).unwrap()).unwrap();
        normalize_adjacency(&a).unwrap().0
    }

    #[test]
    fn p3_split_s1() {
        let a_hat = p3_hat();
        let sp = split(&a_hat, 1.0).unwrap();
        assert_eq!(sp.b, Matrix::identity(3).scale(2.0));
        assert_eq!(sp.c, a_hat);
        let eig = eig_symmetric(&sp.l_s).unwrap();
        for (got, want) in eig.eigenvalues.iter().zip([1.0, 2.0, 3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((spectral_radius(&sp.iteration_matrix()).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tiny_s_is_nearly_identity() {
        let sp = split(&p3_hat(), 1e-8).unwrap();
        assert!(sp.l_s.max_abs_diff(&Matrix::identity(3)).unwrap() < 1e-7);
    }

    #[test]
    fn nonpositive_s_rejected() {
        assert!(split(&p3_hat(), 0.0).is_err());
        assert!(split(&p3_hat(), -1.0).is_err());
        assert!(split(&p3_hat(), f64::NAN).is_err());
    }

    #[test]
    fn radius_scales_with_s() {
        let a_hat = p3_hat();
        let rho_hat = spectral_radius(&a_hat).unwrap();
        for s in [0.1, 1.0, 10.0] {
            let sp = split(&a_hat, s).unwrap();
            let rho = spectral_radius(&sp.iteration_matrix()).unwrap();
            assert!((rho - s / (1.0 + s) * rho_hat).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_signal_one_step() {
        let sp = split(&p3_hat(), 1.0).unwrap();
        let (h, trace) = solve_iterative(&sp, &Matrix::zeros(3, 2), 1e-10, 100).unwrap();
        assert_eq!(h, Matrix::zeros(3, 2));
        assert_eq!(trace.steps, 1);
        assert!(trace.converged);
    }

    #[test]
    fn p3_contraction_bounded_by_half() {
        let sp = split(&p3_hat(), 1.0).unwrap();
        let x = Matrix::from_rows(&[[0.3, -1.2], [2.0, 0.1], [-0.7, 0.9]]);
        let (_, trace) = solve_iterative(&sp, &x, 1e-12, 1000).unwrap();
        let factors = trace.contraction_factors_above(0, 1e-3);
        assert!(factors.len() >= 5);
        for ratio in factors {
            assert!(ratio <= 0.5 + 1e-12, "{ratio}");
        }
    }

    #[test]
    fn max_iter_carries_trace() {
        let sp = split(&p3_hat(), 10.0).unwrap();
        let x = Matrix::from_rows(&[[1.0], [0.0], [0.0]]);
        match solve_iterative(&sp, &x, 1e-12, 3) {
            Err(Error::NotConverged {
                max_iter, trace, ..
            }) => {
                assert_eq!(max_iter, 3);
                assert_eq!(trace.steps, 3);
                assert_eq!(trace.residual_norms.len(), 4);
            }
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    #[test]
    fn diagonal_form_values() {
        let sp = split(&p3_hat(), 1.0).unwrap();
        let (w, wt) = diagonal_form(&sp, 2).unwrap();
        assert_eq!(w, Matrix::identity(2).scale(0.5));
        assert_eq!(wt, Matrix::identity(2).scale(0.5));
        let sp = split(&p3_hat(), 3.0).unwrap();
        let (w, wt) = diagonal_form(&sp, 1).unwrap();
        assert_eq!(w, Matrix::from_rows(&[[0.75]]));
        assert_eq!(wt, Matrix::from_rows(&[[0.25]]));
        assert!(diagonal_form(&sp, 0).is_err());
    }

    #[test]
    fn matrix_form_step_matches_explicit_step() {
        let sp = split(&p3_hat(), 1.7).unwrap();
        let x = Matrix::from_rows(&[[0.3, -1.2], [2.0, 0.1], [-0.7, 0.9]]);
        let h = Matrix::from_rows(&[[1.0, 0.5], [-0.25, 0.0], [0.125, 2.0]]);
        let (w, wt) = diagonal_form(&sp, 2).unwrap();
        let matrix_form = sp
            .normalized_adjacency
            .matmul(&h)
            .unwrap()
            .matmul(&w)
            .unwrap()
            .add(&x.matmul(&wt).unwrap())
            .unwrap();
        let explicit = iterate_once(&sp, &h, &x).unwrap();
        assert!(matrix_form.max_abs_diff(&explicit).unwrap() <= 1e-15);
    }

    #[test]
    fn p3_property_report() {
        let sp = split(&p3_hat(), 1.0).unwrap();
        let report = verify_properties(&sp).unwrap();
        assert!(report.all_passed, "{report:#?}");
        for (got, want) in report.tau.iter().zip([-1.0 / 3.0, 0.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in report.mu.iter().zip([-0.5, 0.0, 0.5]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((report.rho_iteration - 0.5).abs() < 1e-12);
        assert!((report.rho_ls_inv_c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vanishing_s_vanishing_mu() {
        let sp = split(&p3_hat(), 1e-6).unwrap();
        let report = verify_properties(&sp).unwrap();
        assert!(report.mu.iter().all(|m| m.abs() < 1e-6));
        assert!(report.all_passed);
    }
}
