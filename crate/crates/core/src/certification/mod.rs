//! Certification of an approximate probabilistic simulation relation between
//! a concrete system and a reduced-order model under shared noise.

pub mod chi_square;
pub mod sprocedure;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use chi_square::{chi_square_cdf, chi_square_inverse_cdf, chi_square_pdf, chi_square_sf};
pub use sprocedure::{
    assemble_sproc_matrices, check_sprocedure, psd_check, search_lambda, ChanceConstraintParams, LambdaSearch,
    PsdCheck, SProcedureChannels, SProcedureProblem, DEFAULT_LAMBDA_MAX, DEFAULT_TOL_PSD,
};

use crate::error::{Error, Result};
use crate::linalg::{check_shape, ensure_symmetric, pseudo_inverse};
use crate::model::{NonlinearSystem, SlopeCheck};
use crate::relations::{InterfaceParams, LiftedCoupling, QuadraticRelation};

pub const DEFAULT_TOL_EQ: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Entrywise tolerance on `|lhs − rhs| / max(1, |lhs|, |rhs|)`.
    pub tol_eq: f64,
    /// Relative PSD tolerance, scaled by `max(1, spectral radius)`.
    pub tol_psd: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            tol_eq: DEFAULT_TOL_EQ,
            tol_psd: DEFAULT_TOL_PSD,
        }
    }
}

/// Pass/fail record of one certification condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRecord {
    pub name: String,
    pub passed: bool,
    pub residual: f64,
    pub tolerance: f64,
}

/// `M ⪰ CᵀC`; the residual is the smallest eigenvalue of `M − CᵀC`.
pub fn check_output_dominance(m: &DMatrix<f64>, c: &DMatrix<f64>, tol_psd: f64) -> Result<ConditionRecord> {
    ensure_symmetric("M", m, 1e-10)?;
    check_shape("C", c, c.nrows(), m.nrows())?;
    let check = psd_check(&(m - c.transpose() * c), tol_psd)?;
    Ok(ConditionRecord {
        name: "output dominance M >= C^T C".into(),
        passed: check.passed,
        residual: check.min_eigenvalue,
        tolerance: check.threshold,
    })
}

/// Entrywise `max |lhs − rhs| / max(1, |lhs|, |rhs|)`.
pub fn equality_residual(lhs: &DMatrix<f64>, rhs: &DMatrix<f64>) -> f64 {
    lhs.iter()
        .zip(rhs.iter())
        .map(|(l, r)| (l - r).abs() / 1f64.max(l.abs()).max(r.abs()))
        .fold(0.0, f64::max)
}

pub const EQ_OUTPUT: &str = "C_r = C P";
pub const EQ_NONLINEAR_ARGUMENT: &str = "F_r = F P";
pub const EQ_NONLINEAR_GAIN: &str = "E = P E_r - B (L1 - L2)";
pub const EQ_DRIFT: &str = "A P = P A_r - B Q";
pub const EQ_INTERNAL: &str = "D P_w = P D_r - B S";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralCheck {
    pub equalities: Vec<ConditionRecord>,
}

impl StructuralCheck {
    pub fn passed(&self) -> bool {
        self.equalities.iter().all(|e| e.passed)
    }

    pub fn max_residual(&self) -> f64 {
        self.equalities.iter().map(|e| e.residual).fold(0.0, f64::max)
    }
}

/// Verifies the five structural equalities linking the two systems.
#[allow(clippy::too_many_arguments)]
pub fn check_structural_equalities(
    conc: &NonlinearSystem,
    absr: &NonlinearSystem,
    p: &DMatrix<f64>,
    pw: &DMatrix<f64>,
    q: &DMatrix<f64>,
    s: &DMatrix<f64>,
    l1: &DMatrix<f64>,
    l2: &DMatrix<f64>,
    tol_eq: f64,
) -> Result<StructuralCheck> {
    let d = conc.dims();
    let dh = absr.dims();
    check_shape("P", p, d.n, dh.n)?;
    check_shape("P_w", pw, d.p, dh.p)?;
    check_shape("Q", q, d.m, dh.n)?;
    check_shape("S", s, d.m, dh.p)?;
    check_shape("L1", l1, d.m, 1)?;
    check_shape("L2", l2, d.m, 1)?;
    check_shape("C_r", &absr.c, d.q, dh.n)?;

    let pairs = [
        (EQ_OUTPUT, absr.c.clone(), &conc.c * p),
        (EQ_NONLINEAR_ARGUMENT, absr.f.clone(), &conc.f * p),
        (EQ_NONLINEAR_GAIN, conc.e.clone(), p * &absr.e - &conc.b * (l1 - l2)),
        (EQ_DRIFT, &conc.a * p, p * &absr.a - &conc.b * q),
        (EQ_INTERNAL, &conc.d * pw, p * &absr.d - &conc.b * s),
    ];
    let equalities = pairs
        .into_iter()
        .map(|(name, lhs, rhs)| {
            let residual = equality_residual(&lhs, &rhs);
            ConditionRecord {
                name: name.into(),
                passed: residual <= tol_eq,
                residual,
                tolerance: tol_eq,
            }
        })
        .collect();
    Ok(StructuralCheck { equalities })
}

/// Candidate relation and interface parameters for one concrete/abstract pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateRelation {
    pub state: QuadraticRelation,
    pub input: QuadraticRelation,
    pub interface: InterfaceParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaChoice {
    Fixed(f64),
    Search { lambda_max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationSettings {
    pub delta: f64,
    pub c_nuhat: f64,
    pub beta: f64,
    /// Chi-square degrees of freedom; defaults to the noise dimension.
    pub dof: Option<usize>,
    pub lambda: LambdaChoice,
    pub tolerances: Tolerances,
    pub coupling: LiftedCoupling,
    /// On failure, retry with the equality-determined parameters recomputed
    /// and `λ` searched.
    pub rederive_on_failure: bool,
}

impl CertificationSettings {
    pub fn new(delta: f64, c_nuhat: f64, beta: f64) -> Self {
        Self {
            delta,
            c_nuhat,
            beta,
            dof: None,
            lambda: LambdaChoice::Search {
                lambda_max: DEFAULT_LAMBDA_MAX,
            },
            tolerances: Tolerances::default(),
            coupling: LiftedCoupling::SharedNoise,
            rederive_on_failure: false,
        }
    }
}

/// Which parameter set the verdict refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificationPath {
    Supplied,
    Rederived,
}

pub const SPROCEDURE: &str = "S-procedure chance constraint";
const SLOPE_RANGE: f64 = 10.0;
const SLOPE_POINTS: usize = 2001;

/// Evidence collected by one certification attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub path: CertificationPath,
    pub conditions: Vec<ConditionRecord>,
    pub lambda: f64,
    pub sprocedure: PsdCheck,
    pub slope_check: SlopeCheck,
    pub flags: Vec<String>,
    /// The retry attempted after this one failed, if any.
    pub fallback: Option<Box<CertificationReport>>,
}

impl CertificationReport {
    pub fn passed(&self) -> bool {
        self.conditions.iter().all(|c| c.passed)
    }

    pub fn failed_conditions(&self) -> Vec<String> {
        self.conditions
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationCertificate {
    pub eps: f64,
    pub delta: f64,
    pub lambda: f64,
    pub state_relation: QuadraticRelation,
    pub input_relation: QuadraticRelation,
    pub interface: InterfaceParams,
    /// The abstract system the certificate refers to (differs from the input
    /// on the re-derived path).
    pub abstract_system: NonlinearSystem,
    pub chance: ChanceConstraintParams,
    pub tolerances: Tolerances,
    pub evidence: CertificationReport,
}

fn validate_candidate(conc: &NonlinearSystem, absr: &NonlinearSystem, cand: &CandidateRelation) -> Result<()> {
    let d = conc.dims();
    let dh = absr.dims();
    cand.state.validate()?;
    cand.input.validate()?;
    check_shape("P", &cand.state.p, d.n, dh.n)?;
    check_shape("P_w", &cand.input.p, d.p, dh.p)?;
    cand.interface.validate(conc, dh.n, dh.p, dh.m)?;
    if d.s != dh.s {
        return Err(Error::NoiseDimension {
            concrete: d.s,
            abstract_: dh.s,
        });
    }
    Ok(())
}

/// Runs every condition for one parameter set and collects the evidence
/// without deciding between paths.
pub fn evaluate_candidate(
    conc: &NonlinearSystem,
    absr: &NonlinearSystem,
    cand: &CandidateRelation,
    ccp: &ChanceConstraintParams,
    lambda: LambdaChoice,
    tol: &Tolerances,
) -> Result<CertificationReport> {
    validate_candidate(conc, absr, cand)?;
    let ifc = &cand.interface;
    let mut conditions = vec![check_output_dominance(&cand.state.m, &conc.c, tol.tol_psd)?];
    conditions.extend(
        check_structural_equalities(
            conc,
            absr,
            &cand.state.p,
            &cand.input.p,
            &ifc.q,
            &ifc.s,
            &ifc.l1,
            &ifc.l2,
            tol.tol_eq,
        )?
        .equalities,
    );

    let prob = assemble_sproc_matrices(conc, absr, &cand.state, &cand.input, ifc, ccp)?;
    let (lambda, check) = match lambda {
        LambdaChoice::Fixed(l) => (l, check_sprocedure(&prob, l, tol.tol_psd)?),
        LambdaChoice::Search { lambda_max } => {
            let s = search_lambda(&prob, lambda_max, tol.tol_psd)?;
            (s.lambda, s.check)
        }
    };
    conditions.push(ConditionRecord {
        name: SPROCEDURE.into(),
        passed: check.passed,
        residual: check.min_eigenvalue,
        tolerance: check.threshold,
    });

    let slope_check = conc.phi.check_slope_bounds(-SLOPE_RANGE, SLOPE_RANGE, SLOPE_POINTS);
    let mut flags = Vec::new();
    if conc.phi.upper_slope() > 1.0 {
        flags.push(format!(
            "upper slope bound {} exceeds 1; the slope channel block of F1 is zero, so the sector is not encoded",
            conc.phi.upper_slope()
        ));
    }
    if !slope_check.within_declared {
        flags.push(format!(
            "sampled slopes [{:.6}, {:.6}] leave the declared sector [{}, {}]",
            slope_check.min_observed,
            slope_check.max_observed,
            conc.phi.slope_lo,
            conc.phi.upper_slope()
        ));
    }
    Ok(CertificationReport {
        path: CertificationPath::Supplied,
        conditions,
        lambda,
        sprocedure: check,
        slope_check,
        flags,
        fallback: None,
    })
}

/// Certifies that `absr` is (ε, δ)-stochastically simulated by `conc` with
/// the candidate relation. No certificate is produced unless every condition
/// passes.
pub fn certify_relation(
    conc: &NonlinearSystem,
    absr: &NonlinearSystem,
    cand: &CandidateRelation,
    settings: &CertificationSettings,
) -> Result<RelationCertificate> {
    if !settings.coupling.is_shared() {
        return Err(Error::IndependentCoupling);
    }
    validate_candidate(conc, absr, cand)?;
    let dof = settings.dof.unwrap_or(conc.dims().s);
    let ccp = ChanceConstraintParams::derive(settings.delta, settings.c_nuhat, cand.input.eps, settings.beta, dof)?;
    let tol = &settings.tolerances;

    let mut report = evaluate_candidate(conc, absr, cand, &ccp, settings.lambda, tol)?;
    if report.passed() {
        return Ok(issue(cand.clone(), absr.clone(), settings, ccp, report));
    }
    if settings.rederive_on_failure {
        let (cand2, absr2) = rederive_from_equalities(conc, absr, cand)?;
        let lambda_max = match settings.lambda {
            LambdaChoice::Search { lambda_max } => lambda_max,
            LambdaChoice::Fixed(_) => DEFAULT_LAMBDA_MAX,
        };
        let mut retry = evaluate_candidate(conc, &absr2, &cand2, &ccp, LambdaChoice::Search { lambda_max }, tol)?;
        retry.path = CertificationPath::Rederived;
        if retry.passed() {
            return Ok(issue(cand2, absr2, settings, ccp, retry));
        }
        report.fallback = Some(Box::new(retry));
    }
    Err(Error::CertificationFailed(Box::new(report)))
}

fn issue(
    cand: CandidateRelation,
    absr: NonlinearSystem,
    settings: &CertificationSettings,
    chance: ChanceConstraintParams,
    evidence: CertificationReport,
) -> RelationCertificate {
    RelationCertificate {
        eps: cand.state.eps,
        delta: settings.delta,
        lambda: evidence.lambda,
        state_relation: cand.state,
        input_relation: cand.input,
        interface: cand.interface,
        abstract_system: absr,
        chance,
        tolerances: settings.tolerances,
        evidence,
    }
}

/// Recomputes the parameters the structural equalities determine, given
/// `P`, `P_w`, `L2` and the abstract drift matrices:
///
/// * `Q = B⁺(P A_r − A P)`, `S = B⁺(P D_r − D P_w)`, `L1 = L2 + B⁺(P E_r − E)`
/// * `C_r = C P`, `F_r = F P`
/// * `K` and `R̃` as the `M`-weighted least-squares minimizers of
///   `A + B K` and `B R̃ − P B_r`.
pub fn rederive_from_equalities(
    conc: &NonlinearSystem,
    absr: &NonlinearSystem,
    cand: &CandidateRelation,
) -> Result<(CandidateRelation, NonlinearSystem)> {
    validate_candidate(conc, absr, cand)?;
    let p = &cand.state.p;
    let pw = &cand.input.p;
    let m = &cand.state.m;
    let b_pinv = pseudo_inverse(&conc.b)?;
    let weighted = pseudo_inverse(&(conc.b.transpose() * m * &conc.b))? * conc.b.transpose() * m;

    let mut ifc = cand.interface.clone();
    ifc.q = &b_pinv * (p * &absr.a - &conc.a * p);
    ifc.s = &b_pinv * (p * &absr.d - &conc.d * pw);
    ifc.l1 = &ifc.l2 + &b_pinv * (p * &absr.e - &conc.e);
    ifc.k = -&weighted * &conc.a;
    ifc.r_tilde = &weighted * p * &absr.b;

    let mut reduced = absr.clone();
    reduced.c = &conc.c * p;
    reduced.f = &conc.f * p;
    reduced.validate()?;

    let mut out = cand.clone();
    out.interface = ifc;
    Ok((out, reduced))
}

/// Smallest `ε` in `[lower, upper]` for which the S-procedure passes with a
/// searched multiplier, keeping every other parameter fixed. `None` if
/// `upper` itself fails.
pub fn minimal_certifiable_eps(
    conc: &NonlinearSystem,
    absr: &NonlinearSystem,
    cand: &CandidateRelation,
    ccp: &ChanceConstraintParams,
    tol: &Tolerances,
    lower: f64,
    upper: f64,
) -> Result<Option<f64>> {
    let passes = |eps: f64| -> Result<bool> {
        let mut c = cand.clone();
        c.state.eps = eps;
        let prob = assemble_sproc_matrices(conc, absr, &c.state, &c.input, &c.interface, ccp)?;
        Ok(search_lambda(&prob, DEFAULT_LAMBDA_MAX, tol.tol_psd)?.check.passed)
    };
    if !passes(upper)? {
        return Ok(None);
    }
    if passes(lower)? {
        return Ok(Some(lower));
    }
    let (mut lo, mut hi) = (lower, upper);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if passes(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-9 * hi {
            break;
        }
    }
    Ok(Some(hi))
}
