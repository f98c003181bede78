//! Quadratic state/input relations, the interface function that refines an
//! abstract input into a concrete one, and the coupled (lifted) one-step
//! sampler for concrete/abstract pairs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::abstraction::{Cell, GridPartition};
use crate::error::{Error, Result};
use crate::linalg::{check_shape, check_vector, ensure_symmetric, min_eigenvalue};
use crate::model::{NoiseSource, NonlinearSystem};

const SYMMETRY_TOL: f64 = 1e-10;

/// `{(u, û) : (u - P û)ᵀ M (u - P û) <= eps²}`.
///
/// Used both for states (`P`, `M`, `eps`) and internal inputs
/// (`P_w`, `M_w`, `eps_w`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticRelation {
    #[serde(with = "crate::matrix_serde")]
    pub p: DMatrix<f64>,
    #[serde(with = "crate::matrix_serde")]
    pub m: DMatrix<f64>,
    pub eps: f64,
}

pub type QuadraticStateRelation = QuadraticRelation;
pub type QuadraticInputRelation = QuadraticRelation;

impl QuadraticRelation {
    pub fn new(p: DMatrix<f64>, m: DMatrix<f64>, eps: f64) -> Result<Self> {
        let rel = Self { p, m, eps };
        rel.validate()?;
        Ok(rel)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_symmetric("M", &self.m, SYMMETRY_TOL)?;
        check_shape("P", &self.p, self.m.nrows(), self.p.ncols())?;
        let min_eig = min_eigenvalue(&self.m)?;
        if !(min_eig > 0.0) {
            return Err(Error::NotPositiveDefinite {
                name: "M".into(),
                min_eigenvalue: min_eig,
            });
        }
        if !(self.eps >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "relation radius must be nonnegative, got {}",
                self.eps
            )));
        }
        Ok(())
    }

    /// Concrete-side dimension.
    pub fn concrete_dim(&self) -> usize {
        self.p.nrows()
    }

    /// Abstract-side dimension.
    pub fn abstract_dim(&self) -> usize {
        self.p.ncols()
    }

    pub fn deviation(&self, u: &DVector<f64>, uhat: &DVector<f64>) -> Result<DVector<f64>> {
        check_vector("concrete point", u, self.concrete_dim())?;
        check_vector("abstract point", uhat, self.abstract_dim())?;
        Ok(u - &self.p * uhat)
    }

    /// `(u - P û)ᵀ M (u - P û)`.
    pub fn form(&self, u: &DVector<f64>, uhat: &DVector<f64>) -> Result<f64> {
        let e = self.deviation(u, uhat)?;
        Ok(e.dot(&(&self.m * &e)))
    }

    /// Exact `<=` on the computed form, no tolerance.
    pub fn contains(&self, u: &DVector<f64>, uhat: &DVector<f64>) -> Result<bool> {
        Ok(self.form(u, uhat)? <= self.eps * self.eps)
    }
}

pub fn state_in_relation(rel: &QuadraticStateRelation, x: &DVector<f64>, xhat: &DVector<f64>) -> Result<bool> {
    rel.contains(x, xhat)
}

pub fn input_in_relation(rel: &QuadraticInputRelation, w: &DVector<f64>, what: &DVector<f64>) -> Result<bool> {
    rel.contains(w, what)
}

/// Interface parameters `(K, Q, S, L1, L2, R̃)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterfaceParams {
    #[serde(with = "crate::matrix_serde")]
    pub k: DMatrix<f64>,
    #[serde(with = "crate::matrix_serde")]
    pub q: DMatrix<f64>,
    #[serde(with = "crate::matrix_serde")]
    pub s: DMatrix<f64>,
    #[serde(with = "crate::matrix_serde")]
    pub l1: DMatrix<f64>,
    #[serde(with = "crate::matrix_serde")]
    pub l2: DMatrix<f64>,
    #[serde(with = "crate::matrix_serde")]
    pub r_tilde: DMatrix<f64>,
}

impl InterfaceParams {
    /// `ν = ν̂`: zero feedback, identity `R̃`.
    pub fn passthrough(m: usize, n: usize, nhat: usize, phat: usize) -> Self {
        Self {
            k: DMatrix::zeros(m, n),
            q: DMatrix::zeros(m, nhat),
            s: DMatrix::zeros(m, phat),
            l1: DMatrix::zeros(m, 1),
            l2: DMatrix::zeros(m, 1),
            r_tilde: DMatrix::identity(m, m),
        }
    }

    /// Checks shapes against a concrete system and the abstract dimensions
    /// `(n̂, p̂, m̂)`.
    pub fn validate(&self, conc: &NonlinearSystem, nhat: usize, phat: usize, mhat: usize) -> Result<()> {
        let d = conc.dims();
        check_shape("K", &self.k, d.m, d.n)?;
        check_shape("Q", &self.q, d.m, nhat)?;
        check_shape("S", &self.s, d.m, phat)?;
        check_shape("L1", &self.l1, d.m, 1)?;
        check_shape("L2", &self.l2, d.m, 1)?;
        check_shape("R_tilde", &self.r_tilde, d.m, mhat)?;
        Ok(())
    }
}

/// `ν = K(x − P x̂) + Q x̂ + R̃ ν̂ + S ŵ + L1 φ(F x) − L2 φ(F P x̂)`.
pub fn refine_input(
    ifc: &InterfaceParams,
    conc: &NonlinearSystem,
    rel: &QuadraticStateRelation,
    x: &DVector<f64>,
    xhat: &DVector<f64>,
    what: &DVector<f64>,
    nuhat: &DVector<f64>,
) -> Result<DVector<f64>> {
    let d = conc.dims();
    check_vector("x", x, d.n)?;
    check_vector("xhat", xhat, rel.abstract_dim())?;
    check_vector("what", what, ifc.s.ncols())?;
    check_vector("nuhat", nuhat, ifc.r_tilde.ncols())?;
    ifc.validate(conc, rel.abstract_dim(), what.len(), nuhat.len())?;
    check_shape("P", &rel.p, d.n, xhat.len())?;
    Ok(refine_input_unchecked(ifc, conc, &rel.p, x, xhat, what, nuhat))
}

pub(crate) fn refine_input_unchecked(
    ifc: &InterfaceParams,
    conc: &NonlinearSystem,
    p: &DMatrix<f64>,
    x: &DVector<f64>,
    xhat: &DVector<f64>,
    what: &DVector<f64>,
    nuhat: &DVector<f64>,
) -> DVector<f64> {
    let pxhat = p * xhat;
    let phi_x = conc.phi.eval((&conc.f * x)[0]);
    let phi_pxhat = conc.phi.eval((&conc.f * &pxhat)[0]);
    &ifc.k * (x - &pxhat) + &ifc.q * xhat + &ifc.r_tilde * nuhat + &ifc.s * what + ifc.l1.column(0) * phi_x
        - ifc.l2.column(0) * phi_pxhat
}

/// How the concrete and abstract noise draws are coupled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LiftedCoupling {
    /// Both systems receive the identical draw each step.
    SharedNoise,
    /// The abstract system draws from its own source.
    Independent { abstract_noise: NoiseSource },
}

impl LiftedCoupling {
    pub fn is_shared(&self) -> bool {
        matches!(self, LiftedCoupling::SharedNoise)
    }
}

/// The abstract side of a coupled step: either the reduced-order model
/// itself, or its finite abstraction (reduced dynamics followed by `Π_x`).
#[derive(Debug, Clone, Copy)]
pub enum AbstractSide<'a> {
    Reduced(&'a NonlinearSystem),
    Finite {
        reduced: &'a NonlinearSystem,
        partition: &'a GridPartition,
    },
}

impl<'a> AbstractSide<'a> {
    pub fn reduced(&self) -> &'a NonlinearSystem {
        match self {
            AbstractSide::Reduced(r) => r,
            AbstractSide::Finite { reduced, .. } => reduced,
        }
    }

    /// Next abstract state, or `None` if the finite abstraction leaves its
    /// domain (the sink).
    pub fn next(
        &self,
        xhat: &DVector<f64>,
        what: &DVector<f64>,
        nuhat: &DVector<f64>,
        zeta: &DVector<f64>,
    ) -> Result<Option<DVector<f64>>> {
        match self {
            AbstractSide::Reduced(r) => Ok(Some(r.step(xhat, what, nuhat, zeta)?)),
            AbstractSide::Finite { reduced, partition } => {
                let raw = reduced.step(xhat, what, nuhat, zeta)?;
                Ok(match partition.pi_x(&raw) {
                    Cell::Inside { representative, .. } => Some(representative),
                    Cell::Sink => None,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledStep {
    pub x_next: DVector<f64>,
    /// `None` when a finite abstract side fell into the sink.
    pub xhat_next: Option<DVector<f64>>,
    pub nu: DVector<f64>,
    pub zeta: DVector<f64>,
    pub zeta_hat: DVector<f64>,
}

/// Inputs of one coupled step.
#[derive(Debug, Clone, Copy)]
pub struct CoupledInputs<'a> {
    pub w: &'a DVector<f64>,
    pub what: &'a DVector<f64>,
    pub nuhat: &'a DVector<f64>,
}

/// Advances a concrete/abstract pair by one step. The concrete input is the
/// refined `ν`; the noise draw with index `draw` comes from `noise`
/// (and, for independent coupling, from the coupling's own source).
#[allow(clippy::too_many_arguments)]
pub fn coupled_step(
    conc: &NonlinearSystem,
    absr: AbstractSide<'_>,
    ifc: &InterfaceParams,
    rel: &QuadraticStateRelation,
    coupling: &LiftedCoupling,
    x: &DVector<f64>,
    xhat: &DVector<f64>,
    inputs: CoupledInputs<'_>,
    noise: &NoiseSource,
    draw: u64,
) -> Result<CoupledStep> {
    let s = conc.dims().s;
    let shat = absr.reduced().dims().s;
    if noise.dim != s {
        return Err(Error::dim("noise source", s, noise.dim));
    }
    let zeta = noise.draw(draw);
    let zeta_hat = match coupling {
        LiftedCoupling::SharedNoise => {
            if s != shat {
                return Err(Error::NoiseDimension {
                    concrete: s,
                    abstract_: shat,
                });
            }
            zeta.clone()
        }
        LiftedCoupling::Independent { abstract_noise } => {
            if abstract_noise.dim != shat {
                return Err(Error::dim("abstract noise source", shat, abstract_noise.dim));
            }
            abstract_noise.draw(draw)
        }
    };
    let nu = refine_input(ifc, conc, rel, x, xhat, inputs.what, inputs.nuhat)?;
    let x_next = conc.step(x, inputs.w, &nu, &zeta)?;
    let xhat_next = absr.next(xhat, inputs.what, inputs.nuhat, &zeta_hat)?;
    Ok(CoupledStep {
        x_next,
        xhat_next,
        nu,
        zeta,
        zeta_hat,
    })
}

/// Wilson score interval half-width and center for `successes / trials`
/// at normal quantile `z`.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64, f64) {
    if trials == 0 {
        return (0.0, 1.0, 0.5);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0), half)
}
