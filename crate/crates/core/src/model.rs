//! Concrete and reduced-order stochastic nonlinear systems
//!
//! ```text
//! x(k+1) = A x(k) + E phi(F x(k)) + D w(k) + B nu(k) + R zeta(k)
//! y(k)   = C x(k)
//! ```
//!
//! with a scalar sector-bounded nonlinearity `phi` and standard normal noise
//! `zeta` of dimension `s` (the column count of `R`).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_shape, check_vector};

/// The closed set of supported scalar nonlinearities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NonlinearityKind {
    Zero,
    /// phi(s) = scale * s
    Linear {
        scale: f64,
    },
    Sine,
    /// Linear interpolation through sorted `(s, phi(s))` knots, extrapolated
    /// with the end segments.
    PiecewiseLinear {
        knots: Vec<(f64, f64)>,
    },
}

impl NonlinearityKind {
    fn eval(&self, s: f64) -> f64 {
        match self {
            NonlinearityKind::Zero => 0.0,
            NonlinearityKind::Linear { scale } => scale * s,
            NonlinearityKind::Sine => s.sin(),
            NonlinearityKind::PiecewiseLinear { knots } => eval_piecewise(knots, s),
        }
    }
}

fn eval_piecewise(knots: &[(f64, f64)], s: f64) -> f64 {
    match knots.len() {
        0 => 0.0,
        1 => knots[0].1,
        len => {
            let seg = knots.windows(2).position(|w| s < w[1].0).unwrap_or(len - 2);
            let (x0, y0) = knots[seg];
            let (x1, y1) = knots[seg + 1];
            y0 + (y1 - y0) * (s - x0) / (x1 - x0)
        }
    }
}

/// A scalar nonlinearity together with its declared slope sector `[a, b]`.
///
/// `shift` records the linear term removed by [`shift_slope_to_zero`]:
/// the evaluated function is `kind(s) - shift * s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Nonlinearity {
    pub kind: NonlinearityKind,
    pub slope_lo: f64,
    /// `None` stands for an unbounded upper slope.
    #[serde(default)]
    pub slope_hi: Option<f64>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub shift: f64,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

/// Outcome of sampling difference quotients against the declared sector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeCheck {
    pub min_observed: f64,
    pub max_observed: f64,
    pub within_declared: bool,
}

impl Nonlinearity {
    pub fn new(kind: NonlinearityKind, slope_lo: f64, slope_hi: Option<f64>) -> Result<Self> {
        if let NonlinearityKind::PiecewiseLinear { knots } = &kind {
            if knots.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(Error::InvalidArgument(
                    "piecewise-linear knots must be strictly increasing".into(),
                ));
            }
        }
        if let Some(b) = slope_hi {
            if !(b > 0.0) || slope_lo > b {
                return Err(Error::InvalidArgument(format!(
                    "slope bounds must satisfy a <= b and b > 0, got ({slope_lo}, {b})"
                )));
            }
        }
        Ok(Self {
            kind,
            slope_lo,
            slope_hi,
            shift: 0.0,
        })
    }

    pub fn zero() -> Self {
        Self {
            kind: NonlinearityKind::Zero,
            slope_lo: 0.0,
            slope_hi: Some(1.0),
            shift: 0.0,
        }
    }

    pub fn sine(slope_lo: f64, slope_hi: f64) -> Self {
        Self {
            kind: NonlinearityKind::Sine,
            slope_lo,
            slope_hi: Some(slope_hi),
            shift: 0.0,
        }
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.kind.eval(s) - self.shift * s
    }

    pub fn is_zero(&self) -> bool {
        self.kind == NonlinearityKind::Zero && self.shift == 0.0
    }

    pub fn upper_slope(&self) -> f64 {
        self.slope_hi.unwrap_or(f64::INFINITY)
    }

    /// Samples all pairwise difference quotients on an even grid over
    /// `[lo, hi]` with `points` nodes.
    pub fn check_slope_bounds(&self, lo: f64, hi: f64, points: usize) -> SlopeCheck {
        let points = points.max(2);
        let grid: Vec<f64> = (0..points)
            .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
            .collect();
        let values: Vec<f64> = grid.iter().map(|s| self.eval(*s)).collect();
        let mut min_observed = f64::INFINITY;
        let mut max_observed = f64::NEG_INFINITY;
        for i in 0..points {
            for j in (i + 1)..points {
                let q = (values[j] - values[i]) / (grid[j] - grid[i]);
                min_observed = min_observed.min(q);
                max_observed = max_observed.max(q);
            }
        }
        let slack = 1e-9;
        SlopeCheck {
            min_observed,
            max_observed,
            within_declared: min_observed >= self.slope_lo - slack && max_observed <= self.upper_slope() + slack,
        }
    }
}

/// `Σ = (A, B, C, D, E, F, R, φ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearSystem {
    #[serde(with = "crate::matrix_serde")]
    pub a: DMatrix<f64>,
    #[serde(with = "crate::matrix_serde")]
    pub b: DMatrix<f64>,
    #[serde(with = "crate::matrix_serde")]
    pub c: DMatrix<f64>,
    #[serde(with = "crate::matrix_serde")]
    pub d: DMatrix<f64>,
    #[serde(with = "crate::matrix_serde")]
    pub e: DMatrix<f64>,
    #[serde(with = "crate::matrix_serde")]
    pub f: DMatrix<f64>,
    #[serde(with = "crate::matrix_serde")]
    pub r: DMatrix<f64>,
    pub phi: Nonlinearity,
}

/// Dimensions `(n, m, p, q, s)`: state, external input, internal input,
/// output and noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub q: usize,
    pub s: usize,
}

impl NonlinearSystem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        e: DMatrix<f64>,
        f: DMatrix<f64>,
        r: DMatrix<f64>,
        phi: Nonlinearity,
    ) -> Result<Self> {
        let sys = Self {
            a,
            b,
            c,
            d,
            e,
            f,
            r,
            phi,
        };
        sys.validate()?;
        Ok(sys)
    }

    /// Linear tuple `(A, B, C, D, R)` with a zero nonlinearity.
    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        Self::new(
            a,
            b,
            c,
            d,
            DMatrix::zeros(n, 1),
            DMatrix::zeros(1, n),
            r,
            Nonlinearity::zero(),
        )
    }

    pub fn dims(&self) -> Dims {
        Dims {
            n: self.a.nrows(),
            m: self.b.ncols(),
            p: self.d.ncols(),
            q: self.c.nrows(),
            s: self.r.ncols(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        check_shape("A", &self.a, n, n)?;
        check_shape("B", &self.b, n, self.b.ncols())?;
        check_shape("C", &self.c, self.c.nrows(), n)?;
        check_shape("D", &self.d, n, self.d.ncols())?;
        check_shape("E", &self.e, n, 1)?;
        check_shape("F", &self.f, 1, n)?;
        check_shape("R", &self.r, n, self.r.ncols())?;
        Ok(())
    }

    /// `phi(F x)` as a scalar.
    pub fn nonlinear_term(&self, x: &DVector<f64>) -> f64 {
        self.phi.eval((&self.f * x)[0])
    }

    pub fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.c * x
    }

    /// One step of the dynamics, evaluated term by term.
    pub fn step(
        &self,
        x: &DVector<f64>,
        w: &DVector<f64>,
        nu: &DVector<f64>,
        zeta: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let d = self.dims();
        check_vector("x", x, d.n)?;
        check_vector("w", w, d.p)?;
        check_vector("nu", nu, d.m)?;
        check_vector("zeta", zeta, d.s)?;
        Ok(self.step_unchecked(x, w, nu, zeta))
    }

    pub(crate) fn step_unchecked(
        &self,
        x: &DVector<f64>,
        w: &DVector<f64>,
        nu: &DVector<f64>,
        zeta: &DVector<f64>,
    ) -> DVector<f64> {
        let phi = self.nonlinear_term(x);
        &self.a * x + self.e.column(0) * phi + &self.d * w + &self.b * nu + &self.r * zeta
    }

    /// Deterministic part of the step (zero noise).
    pub fn drift(&self, x: &DVector<f64>, w: &DVector<f64>, nu: &DVector<f64>) -> DVector<f64> {
        let phi = self.nonlinear_term(x);
        &self.a * x + self.e.column(0) * phi + &self.d * w + &self.b * nu
    }
}

/// Rewrites the system so the nonlinearity's lower slope becomes zero:
/// `Ã = A + a E F`, `φ̃(s) = φ(s) - a s`, sector `(0, b - a)`.
pub fn shift_slope_to_zero(sys: &NonlinearSystem) -> Result<NonlinearSystem> {
    let a = sys.phi.slope_lo;
    if !a.is_finite() {
        return Err(Error::UnboundedLowerSlope);
    }
    if a == 0.0 {
        return Ok(sys.clone());
    }
    let mut out = sys.clone();
    out.a = &sys.a + (&sys.e * &sys.f) * a;
    out.phi.shift += a;
    out.phi.slope_lo = 0.0;
    out.phi.slope_hi = sys.phi.slope_hi.map(|b| b - a);
    Ok(out)
}

/// Counter-based standard normal source: draw `k` of stream `stream_id`
/// depends only on `(seed, stream_id, k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSource {
    pub seed: u64,
    pub stream_id: u64,
    pub dim: usize,
}

// Each draw gets its own 2^16-word window of the ChaCha keystream.
const WORDS_PER_DRAW_SHIFT: u32 = 16;

impl NoiseSource {
    pub fn new(seed: u64, stream_id: u64, dim: usize) -> Self {
        Self { seed, stream_id, dim }
    }

    pub fn with_stream(&self, stream_id: u64) -> Self {
        Self { stream_id, ..*self }
    }

    pub fn draw(&self, index: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng.set_word_pos((index as u128) << WORDS_PER_DRAW_SHIFT);
        DVector::from_iterator(self.dim, (0..self.dim).map(|_| rng.sample(StandardNormal)))
    }

    /// Uniform `[0, 1)` draw tied to the same counter scheme, used where a
    /// randomized choice (not a Gaussian) is needed.
    pub fn uniform(&self, index: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        rng.set_stream(self.stream_id);
        rng.set_word_pos((index as u128) << WORDS_PER_DRAW_SHIFT);
        rng.random::<f64>()
    }
}

/// Supplies an input vector at step `k` given the current state.
pub trait InputProvider {
    fn input(&mut self, k: usize, x: &DVector<f64>) -> std::result::Result<DVector<f64>, String>;
}

impl<F> InputProvider for F
where
    F: FnMut(usize, &DVector<f64>) -> std::result::Result<DVector<f64>, String>,
{
    fn input(&mut self, k: usize, x: &DVector<f64>) -> std::result::Result<DVector<f64>, String> {
        self(k, x)
    }
}

/// Constant input for every step.
pub struct ConstantInput(pub DVector<f64>);

impl InputProvider for ConstantInput {
    fn input(&mut self, _k: usize, _x: &DVector<f64>) -> std::result::Result<DVector<f64>, String> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    #[serde(with = "crate::matrix_serde::vectors")]
    pub states: Vec<DVector<f64>>,
    #[serde(with = "crate::matrix_serde::vectors")]
    pub outputs: Vec<DVector<f64>>,
    #[serde(with = "crate::matrix_serde::vectors")]
    pub external_inputs: Vec<DVector<f64>>,
    #[serde(with = "crate::matrix_serde::vectors")]
    pub internal_inputs: Vec<DVector<f64>>,
    #[serde(with = "crate::matrix_serde::vectors")]
    pub noise: Vec<DVector<f64>>,
}

impl TrajectorySample {
    pub fn horizon(&self) -> usize {
        self.external_inputs.len()
    }
}

pub fn simulate_trajectory(
    sys: &NonlinearSystem,
    x0: &DVector<f64>,
    policy: &mut dyn InputProvider,
    internal: &mut dyn InputProvider,
    noise: &NoiseSource,
    horizon: usize,
) -> Result<TrajectorySample> {
    let dims = sys.dims();
    check_vector("x0", x0, dims.n)?;
    if noise.dim != dims.s {
        return Err(Error::dim("noise source", dims.s, noise.dim));
    }
    let mut states = Vec::with_capacity(horizon + 1);
    let mut outputs = Vec::with_capacity(horizon + 1);
    let mut nus = Vec::with_capacity(horizon);
    let mut ws = Vec::with_capacity(horizon);
    let mut zetas = Vec::with_capacity(horizon);
    let mut x = x0.clone();
    for k in 0..horizon {
        let nu = policy
            .input(k, &x)
            .map_err(|message| Error::Provider { step: k, message })?;
        let w = internal
            .input(k, &x)
            .map_err(|message| Error::Provider { step: k, message })?;
        let zeta = noise.draw(k as u64);
        let next = sys.step(&x, &w, &nu, &zeta).map_err(|e| Error::Provider {
            step: k,
            message: e.to_string(),
        })?;
        outputs.push(sys.output(&x));
        states.push(std::mem::replace(&mut x, next));
        nus.push(nu);
        ws.push(w);
        zetas.push(zeta);
    }
    outputs.push(sys.output(&x));
    states.push(x);
    Ok(TrajectorySample {
        states,
        outputs,
        external_inputs: nus,
        internal_inputs: ws,
        noise: zetas,
    })
}

/// Re-runs the dynamics with the inputs and noise recorded in `sample`.
pub fn replay_trajectory(sys: &NonlinearSystem, sample: &TrajectorySample) -> Result<Vec<DVector<f64>>> {
    let x0 = sample
        .states
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty trajectory".into()))?;
    let mut states = vec![x0.clone()];
    for k in 0..sample.horizon() {
        let next = sys.step(
            &states[k],
            &sample.internal_inputs[k],
            &sample.external_inputs[k],
            &sample.noise[k],
        )?;
        states.push(next);
    }
    Ok(states)
}
