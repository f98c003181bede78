//! S-procedure matrix inequality
//!
//! ```text
//! λ [F1 g1; g1ᵀ h1] − [F2 g2; g2ᵀ h2] ⪰ 0
//! ```
//!
//! certifies that `zᵀF1z + 2g1ᵀz + h1 <= 0` implies
//! `zᵀF2z + 2g2ᵀz + h2 <= 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::chi_square::chi_square_inverse_cdf;
use crate::error::{Error, Result};
use crate::linalg::{block_diag, check_shape, ensure_symmetric, hstack, spectral_radius, symmetric_eigenvalues};
use crate::model::NonlinearSystem;
use crate::relations::{InterfaceParams, QuadraticRelation};

const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SProcedureProblem {
    #[serde(with = "crate::matrix_serde")]
    pub f1: DMatrix<f64>,
    #[serde(with = "crate::matrix_serde::vector")]
    pub g1: DVector<f64>,
    pub h1: f64,
    #[serde(with = "crate::matrix_serde")]
    pub f2: DMatrix<f64>,
    #[serde(with = "crate::matrix_serde::vector")]
    pub g2: DVector<f64>,
    pub h2: f64,
}

impl SProcedureProblem {
    pub fn new(
        f1: DMatrix<f64>,
        g1: DVector<f64>,
        h1: f64,
        f2: DMatrix<f64>,
        g2: DVector<f64>,
        h2: f64,
    ) -> Result<Self> {
        ensure_symmetric("F1", &f1, SYMMETRY_TOL)?;
        ensure_symmetric("F2", &f2, SYMMETRY_TOL)?;
        let d = f1.nrows();
        check_shape("F2", &f2, d, d)?;
        if g1.len() != d {
            return Err(Error::dim("g1", d, g1.len()));
        }
        if g2.len() != d {
            return Err(Error::dim("g2", d, g2.len()));
        }
        Ok(Self { f1, g1, h1, f2, g2, h2 })
    }

    pub fn dim(&self) -> usize {
        self.f1.nrows()
    }

    /// `[F g; gᵀ h]` for the first (`which = 1`) or second quadratic.
    pub fn bordered_quadratic(&self, which: u8) -> DMatrix<f64> {
        let (f, g, h) = if which == 1 {
            (&self.f1, &self.g1, self.h1)
        } else {
            (&self.f2, &self.g2, self.h2)
        };
        bordered(f, g, h)
    }

    /// `λ Q1 − Q2`.
    pub fn bordered(&self, lambda: f64) -> DMatrix<f64> {
        self.bordered_quadratic(1) * lambda - self.bordered_quadratic(2)
    }
}

fn bordered(f: &DMatrix<f64>, g: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let d = f.nrows();
    let mut out = DMatrix::zeros(d + 1, d + 1);
    out.view_mut((0, 0), (d, d)).copy_from(f);
    for i in 0..d {
        out[(i, d)] = g[i];
        out[(d, i)] = g[i];
    }
    out[(d, d)] = h;
    out
}

/// Result of a positive-semidefiniteness test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsdCheck {
    pub passed: bool,
    pub min_eigenvalue: f64,
    /// The check passes iff `min_eigenvalue >= -threshold`.
    pub threshold: f64,
}

/// Default relative PSD tolerance; the absolute threshold is
/// `tol_psd * max(1, spectral radius)`.
pub const DEFAULT_TOL_PSD: f64 = 1e-8;

pub fn psd_check(matrix: &DMatrix<f64>, tol_psd: f64) -> Result<PsdCheck> {
    let eigs = symmetric_eigenvalues(matrix)?;
    let min_eigenvalue = eigs.first().copied().unwrap_or(0.0);
    let threshold = tol_psd * spectral_radius(&eigs).max(1.0);
    Ok(PsdCheck {
        passed: min_eigenvalue >= -threshold,
        min_eigenvalue,
        threshold,
    })
}

pub fn check_sprocedure(prob: &SProcedureProblem, lambda: f64, tol_psd: f64) -> Result<PsdCheck> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "S-procedure multiplier must be nonnegative, got {lambda}"
        )));
    }
    psd_check(&prob.bordered(lambda), tol_psd)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearch {
    pub lambda: f64,
    pub check: PsdCheck,
    /// Interval of multipliers whose min eigenvalue is within the PSD
    /// threshold of the best value found.
    pub plateau: (f64, f64),
    /// Every `(λ, min eigenvalue)` evaluated, in evaluation order.
    pub profile: Vec<(f64, f64)>,
}

pub const DEFAULT_LAMBDA_MAX: f64 = 1e4;
const TERNARY_ITERATIONS: usize = 200;

/// Maximizes the smallest eigenvalue of `λ Q1 − Q2` over `[0, lambda_max]`.
///
/// The objective is concave in `λ` (minimum of affine functions), so a
/// ternary search converges to the global maximizer.
pub fn search_lambda(prob: &SProcedureProblem, lambda_max: f64, tol_psd: f64) -> Result<LambdaSearch> {
    if !(lambda_max > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda_max must be positive, got {lambda_max}"
        )));
    }
    let q1 = prob.bordered_quadratic(1);
    let q2 = prob.bordered_quadratic(2);
    let mut profile = Vec::with_capacity(2 * TERNARY_ITERATIONS + 3);
    let mut eval = |lambda: f64| -> Result<f64> {
        let v = symmetric_eigenvalues(&(&q1 * lambda - &q2))?[0];
        profile.push((lambda, v));
        Ok(v)
    };

    let at_zero = eval(0.0)?;
    let at_max = eval(lambda_max)?;
    let (mut lo, mut hi) = (0.0, lambda_max);
    for _ in 0..TERNARY_ITERATIONS {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if eval(m1)? < eval(m2)? {
            lo = m1;
        } else {
            hi = m2;
        }
        if hi - lo <= 1e-15 * hi.max(1e-300) {
            break;
        }
    }
    let mid = 0.5 * (lo + hi);
    let at_mid = eval(mid)?;

    let (mut lambda, mut best) = (mid, at_mid);
    if at_zero > best {
        lambda = 0.0;
        best = at_zero;
    }
    if at_max > best {
        lambda = lambda_max;
    }
    let check = check_sprocedure(prob, lambda, tol_psd)?;
    let mut plateau = (lo.min(lambda), hi.max(lambda));
    for &(l, v) in &profile {
        if v >= check.min_eigenvalue - check.threshold {
            plateau.0 = plateau.0.min(l);
            plateau.1 = plateau.1.max(l);
        }
    }
    Ok(LambdaSearch {
        lambda,
        check,
        plateau,
        profile,
    })
}

/// Noise/input budget of the chance constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChanceConstraintParams {
    pub delta: f64,
    pub c_zeta: f64,
    pub c_nuhat: f64,
    pub eps_w: f64,
    pub beta: f64,
    pub dof: usize,
}

impl ChanceConstraintParams {
    /// Derives `c_ζ = χ²_dof⁻¹(1 − δ)`.
    pub fn derive(delta: f64, c_nuhat: f64, eps_w: f64, beta: f64, dof: usize) -> Result<Self> {
        if delta == 0.0 {
            return Err(Error::InvalidArgument(
                "delta = 0 makes the noise bound c_zeta infinite".into(),
            ));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")));
        }
        if !(c_nuhat > 0.0) || !(eps_w >= 0.0) || !(beta >= 0.0) {
            return Err(Error::InvalidArgument(
                "c_nuhat must be positive; eps_w and beta nonnegative".into(),
            ));
        }
        Ok(Self {
            delta,
            c_zeta: chi_square_inverse_cdf(dof, 1.0 - delta)?,
            c_nuhat,
            eps_w,
            beta,
            dof,
        })
    }

    /// `h̃1 = −(ε² + ε_w² + c_ν̂ + c_ζ + β)`.
    pub fn h1(&self, eps: f64) -> f64 {
        -(eps * eps + self.eps_w * self.eps_w + self.c_nuhat + self.c_zeta + self.beta)
    }
}

/// Column operators of the quadratic `F̃2 = Wᵀ M W`, in the variable order
/// `(x − P x̂, slope channel, w − P_w ŵ, ν̂, G, ζ)`.
pub struct SProcedureChannels {
    pub closed_loop: DMatrix<f64>,
    pub slope: DMatrix<f64>,
    pub internal: DMatrix<f64>,
    pub input_mismatch: DMatrix<f64>,
    pub quantization: DMatrix<f64>,
    pub noise_mismatch: DMatrix<f64>,
}

impl SProcedureChannels {
    pub fn build(
        conc: &NonlinearSystem,
        absr: &NonlinearSystem,
        p: &DMatrix<f64>,
        ifc: &InterfaceParams,
    ) -> Result<Self> {
        let d = conc.dims();
        let dh = absr.dims();
        check_shape("P", p, d.n, dh.n)?;
        ifc.validate(conc, dh.n, dh.p, dh.m)?;
        if d.s != dh.s {
            return Err(Error::NoiseDimension {
                concrete: d.s,
                abstract_: dh.s,
            });
        }
        Ok(Self {
            closed_loop: &conc.a + &conc.b * &ifc.k,
            slope: (&conc.b * &ifc.l1 + &conc.e) * &conc.f,
            internal: conc.d.clone(),
            input_mismatch: &conc.b * &ifc.r_tilde - p * &absr.b,
            quantization: p.clone(),
            noise_mismatch: &conc.r - p * &absr.r,
        })
    }

    pub fn stacked(&self) -> Result<DMatrix<f64>> {
        hstack(&[
            &self.closed_loop,
            &self.slope,
            &self.internal,
            &self.input_mismatch,
            &self.quantization,
            &self.noise_mismatch,
        ])
    }

    pub fn widths(&self) -> [usize; 6] {
        [
            self.closed_loop.ncols(),
            self.slope.ncols(),
            self.internal.ncols(),
            self.input_mismatch.ncols(),
            self.quantization.ncols(),
            self.noise_mismatch.ncols(),
        ]
    }
}

/// Builds the S-procedure problem for the chance constraint.
///
/// `F̃1 = diag(M, 0, M_w, I, I, I)`, `F̃2 = Wᵀ M W`, `g̃ = 0`,
/// `h̃1 = −(ε² + ε_w² + c_ν̂ + c_ζ + β)`, `h̃2 = −ε²`.
pub fn assemble_sproc_matrices(
    conc: &NonlinearSystem,
    absr: &NonlinearSystem,
    rel: &QuadraticRelation,
    rel_w: &QuadraticRelation,
    ifc: &InterfaceParams,
    ccp: &ChanceConstraintParams,
) -> Result<SProcedureProblem> {
    let channels = SProcedureChannels::build(conc, absr, &rel.p, ifc)?;
    let d = conc.dims();
    check_shape("M", &rel.m, d.n, d.n)?;
    check_shape("M_w", &rel_w.m, d.p, d.p)?;
    let w = channels.stacked()?;
    let f2 = w.transpose() * &rel.m * &w;
    let f2 = (&f2 + f2.transpose()) * 0.5;

    let [_, n_slope, _, m_hat, n_g, s] = channels.widths();
    let f1 = block_diag(&[
        &rel.m,
        &DMatrix::zeros(n_slope, n_slope),
        &rel_w.m,
        &DMatrix::identity(m_hat, m_hat),
        &DMatrix::identity(n_g, n_g),
        &DMatrix::identity(s, s),
    ]);
    let dim = f1.nrows();
    SProcedureProblem::new(
        f1,
        DVector::zeros(dim),
        ccp.h1(rel.eps),
        f2,
        DVector::zeros(dim),
        -rel.eps * rel.eps,
    )
}
