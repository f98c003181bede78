//! Grid-based finite abstraction of a reduced-order model.
//!
//! The state box is tiled by equal cells whose centers serve as
//! representatives; mass leaving the box goes to an absorbing sink state.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_shape, check_vector};
use crate::model::{NoiseSource, NonlinearSystem};

const DIVISIBILITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPartition {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub widths: Vec<f64>,
    pub counts: Vec<usize>,
    /// Set when some width did not divide its extent and the upper bound
    /// was moved up to the next multiple.
    pub extended: bool,
}

/// Result of mapping a point through `Π_x`.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Inside { index: usize, representative: DVector<f64> },
    Sink,
}

impl Cell {
    pub fn index(&self) -> Option<usize> {
        match self {
            Cell::Inside { index, .. } => Some(*index),
            Cell::Sink => None,
        }
    }
}

pub fn build_partition(lower: &[f64], upper: &[f64], widths: &[f64]) -> Result<GridPartition> {
    let dim = lower.len();
    if dim == 0 {
        return Err(Error::InvalidArgument("partition needs at least one dimension".into()));
    }
    if upper.len() != dim {
        return Err(Error::dim("upper bounds", dim, upper.len()));
    }
    if widths.len() != dim {
        return Err(Error::dim("cell widths", dim, widths.len()));
    }
    let mut counts = Vec::with_capacity(dim);
    let mut new_upper = Vec::with_capacity(dim);
    let mut extended = false;
    for i in 0..dim {
        let (lo, hi, w) = (lower[i], upper[i], widths[i]);
        if !(w > 0.0) || !w.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "cell width {i} must be positive, got {w}"
            )));
        }
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "box dimension {i} is empty: [{lo}, {hi}]"
            )));
        }
        let ratio = (hi - lo) / w;
        let nearest = ratio.round();
        let count = if (ratio - nearest).abs() <= DIVISIBILITY_TOL * ratio.max(1.0) {
            new_upper.push(hi);
            nearest
        } else {
            extended = true;
            let c = ratio.ceil();
            new_upper.push(lo + c * w);
            c
        };
        counts.push(count.max(1.0) as usize);
    }
    Ok(GridPartition {
        lower: lower.to_vec(),
        upper: new_upper,
        widths: widths.to_vec(),
        counts,
        extended,
    })
}

impl GridPartition {
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn num_cells(&self) -> usize {
        self.counts.iter().product()
    }

    /// Cell diameter, used as the discretization parameter.
    pub fn beta(&self) -> f64 {
        self.widths.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// Flat index of a multi-index; the last coordinate varies fastest.
    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.counts).fold(0, |acc, (&i, &c)| acc * c + i)
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for d in (0..self.dim()).rev() {
            out[d] = flat % self.counts[d];
            flat /= self.counts[d];
        }
        out
    }

    pub fn representative(&self, flat: usize) -> DVector<f64> {
        let multi = self.multi_index(flat);
        DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|d| self.lower[d] + (multi[d] as f64 + 0.5) * self.widths[d]),
        )
    }

    /// Lower and upper edge of cell `i` along dimension `d`.
    fn edges(&self, d: usize, i: usize) -> (f64, f64) {
        let lo = self.lower[d] + i as f64 * self.widths[d];
        let hi = if i + 1 == self.counts[d] {
            self.upper[d]
        } else {
            self.lower[d] + (i + 1) as f64 * self.widths[d]
        };
        (lo, hi)
    }

    fn axis_index(&self, d: usize, v: f64) -> Option<usize> {
        if !(v >= self.lower[d] && v <= self.upper[d]) {
            return None;
        }
        let i = ((v - self.lower[d]) / self.widths[d]).floor() as usize;
        Some(i.min(self.counts[d] - 1))
    }

    /// Maps a point to its cell representative, or to the sink if it lies
    /// outside the closed box.
    pub fn pi_x(&self, point: &DVector<f64>) -> Cell {
        if point.len() != self.dim() {
            return Cell::Sink;
        }
        let mut multi = Vec::with_capacity(self.dim());
        for d in 0..self.dim() {
            match self.axis_index(d, point[d]) {
                Some(i) => multi.push(i),
                None => return Cell::Sink,
            }
        }
        let index = self.flat_index(&multi);
        Cell::Inside {
            index,
            representative: self.representative(index),
        }
    }
}

/// Standard normal CDF via `erfc`, accurate in both tails.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// `P(a <= N(mu, sigma²) < b)`, computed on the tail that avoids
/// cancellation.
pub fn normal_interval_mass(mu: f64, sigma: f64, a: f64, b: f64) -> f64 {
    let za = (a - mu) / sigma;
    let zb = (b - mu) / sigma;
    if za > 0.0 {
        (normal_cdf(-za) - normal_cdf(-zb)).max(0.0)
    } else {
        (normal_cdf(zb) - normal_cdf(za)).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowMethod {
    Dirac,
    ExactProduct,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRow {
    /// One entry per cell followed by the sink entry.
    pub probs: Vec<f64>,
    pub method: RowMethod,
    /// Largest per-entry standard error; zero for exact rows.
    pub std_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionSettings {
    pub mc_samples: usize,
    pub seed: u64,
    /// Use sampling even when the exact integral is available.
    pub force_monte_carlo: bool,
}

impl Default for TransitionSettings {
    fn default() -> Self {
        Self {
            mc_samples: 10_000,
            seed: 0,
            force_monte_carlo: false,
        }
    }
}

/// Distribution of `Π_x(μ + R_r ζ)` over cells and sink, where `μ` is the
/// noise-free successor of `(x̂, ŵ, ν̂)` under the reduced dynamics.
/// `stream` selects the noise stream used when sampling.
pub fn transition_row(
    absr: &NonlinearSystem,
    part: &GridPartition,
    xhat: &DVector<f64>,
    what: &DVector<f64>,
    nuhat: &DVector<f64>,
    settings: &TransitionSettings,
    stream: u64,
) -> Result<TransitionRow> {
    let d = absr.dims();
    if part.dim() != d.n {
        return Err(Error::dim("partition", d.n, part.dim()));
    }
    check_vector("xhat", xhat, d.n)?;
    check_vector("what", what, d.p)?;
    check_vector("nuhat", nuhat, d.m)?;
    let mu = absr.drift(xhat, what, nuhat);
    if mu.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("transition mean is not finite".into()));
    }
    let cells = part.num_cells();
    let mut probs = vec![0.0; cells + 1];

    if absr.r.iter().all(|&v| v == 0.0) {
        match part.pi_x(&mu) {
            Cell::Inside { index, .. } => probs[index] = 1.0,
            Cell::Sink => probs[cells] = 1.0,
        }
        return Ok(TransitionRow {
            probs,
            method: RowMethod::Dirac,
            std_error: 0.0,
        });
    }

    let cov = &absr.r * absr.r.transpose();
    let diagonal = (0..d.n).all(|i| (0..d.n).all(|j| i == j || cov[(i, j)] == 0.0));
    if diagonal && !settings.force_monte_carlo {
        let axes: Vec<Vec<f64>> = (0..d.n)
            .map(|k| {
                let sigma = cov[(k, k)].sqrt();
                (0..part.counts[k])
                    .map(|i| {
                        let (a, b) = part.edges(k, i);
                        if sigma == 0.0 {
                            let inside = part.axis_index(k, mu[k]) == Some(i);
                            f64::from(u8::from(inside))
                        } else {
                            normal_interval_mass(mu[k], sigma, a, b)
                        }
                    })
                    .collect()
            })
            .collect();
        let mut total = 0.0;
        for (flat, p) in probs.iter_mut().enumerate().take(cells) {
            let multi = part.multi_index(flat);
            *p = multi.iter().enumerate().map(|(k, &i)| axes[k][i]).product();
            total += *p;
        }
        probs[cells] = (1.0 - total).max(0.0);
        return Ok(TransitionRow {
            probs,
            method: RowMethod::ExactProduct,
            std_error: 0.0,
        });
    }

    let samples = settings.mc_samples.max(1);
    let noise = NoiseSource::new(settings.seed, stream, d.s);
    let mut counts = vec![0u64; cells + 1];
    for k in 0..samples as u64 {
        let next = &mu + &absr.r * noise.draw(k);
        match part.pi_x(&next) {
            Cell::Inside { index, .. } => counts[index] += 1,
            Cell::Sink => counts[cells] += 1,
        }
    }
    let n = samples as f64;
    let mut std_error: f64 = 0.0;
    for (p, c) in probs.iter_mut().zip(&counts) {
        *p = *c as f64 / n;
        std_error = std_error.max((*p * (1.0 - *p) / n).sqrt());
    }
    Ok(TransitionRow {
        probs,
        method: RowMethod::MonteCarlo,
        std_error,
    })
}

pub const DEFAULT_MEMORY_CAP_BYTES: u64 = 2 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbstractionSettings {
    pub transition: TransitionSettings,
    pub memory_cap_bytes: u64,
}

impl Default for AbstractionSettings {
    fn default() -> Self {
        Self {
            transition: TransitionSettings::default(),
            memory_cap_bytes: DEFAULT_MEMORY_CAP_BYTES,
        }
    }
}

/// Finite MDP with a dense transition tensor indexed
/// `[state][internal input][external input][next state]`. The last state
/// index is the absorbing sink.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    pub partition: GridPartition,
    pub internal_inputs: Vec<DVector<f64>>,
    pub external_inputs: Vec<DVector<f64>>,
    pub output_matrix: DMatrix<f64>,
    pub initial_state: usize,
    pub transitions: Vec<f64>,
    /// Largest per-entry standard error over sampled rows; zero if every
    /// row is exact.
    pub max_std_error: f64,
}

impl FiniteMdp {
    /// Number of states including the sink.
    pub fn num_states(&self) -> usize {
        self.partition.num_cells() + 1
    }

    pub fn sink(&self) -> usize {
        self.partition.num_cells()
    }

    pub fn num_internal(&self) -> usize {
        self.internal_inputs.len()
    }

    pub fn num_external(&self) -> usize {
        self.external_inputs.len()
    }

    /// Representative of a non-sink state.
    pub fn state(&self, index: usize) -> Option<DVector<f64>> {
        (index < self.sink()).then(|| self.partition.representative(index))
    }

    pub fn output(&self, index: usize) -> Option<DVector<f64>> {
        self.state(index).map(|x| &self.output_matrix * x)
    }

    fn row_offset(&self, s: usize, w: usize, u: usize) -> usize {
        ((s * self.num_internal() + w) * self.num_external() + u) * self.num_states()
    }

    pub fn row(&self, s: usize, w: usize, u: usize) -> &[f64] {
        let off = self.row_offset(s, w, u);
        &self.transitions[off..off + self.num_states()]
    }

    pub fn prob(&self, s: usize, w: usize, u: usize, t: usize) -> f64 {
        self.row(s, w, u)[t]
    }

    /// Largest `|Σ row − 1|` over all rows.
    pub fn max_row_defect(&self) -> f64 {
        self.transitions
            .chunks(self.num_states())
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        let ns = self.num_states();
        let expected = ns * ns * self.num_internal() * self.num_external();
        if self.transitions.len() != expected {
            return Err(Error::dim("transition tensor", expected, self.transitions.len()));
        }
        if self.initial_state >= ns {
            return Err(Error::InvalidArgument(format!(
                "initial state {} out of range",
                self.initial_state
            )));
        }
        if self.transitions.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("transition probability outside [0, 1]".into()));
        }
        let defect = self.max_row_defect();
        if defect > tol {
            return Err(Error::InvalidArgument(format!("row sums deviate from 1 by {defect:e}")));
        }
        let sink = self.sink();
        for w in 0..self.num_internal() {
            for u in 0..self.num_external() {
                if self.prob(sink, w, u, sink) != 1.0 {
                    return Err(Error::InvalidArgument("sink is not absorbing".into()));
                }
            }
        }
        Ok(())
    }
}

pub fn estimate_mdp_bytes(cells: usize, internal: usize, external: usize) -> u64 {
    let ns = cells as u64 + 1;
    ns.saturating_mul(ns)
        .saturating_mul(internal as u64)
        .saturating_mul(external as u64)
        .saturating_mul(std::mem::size_of::<f64>() as u64)
}

/// Assembles the transition tensor row by row. Rows are computed in
/// parallel; each sampled row uses its flat row index as noise stream, so
/// the result does not depend on scheduling.
pub fn build_finite_mdp(
    absr: &NonlinearSystem,
    partition: &GridPartition,
    internal_inputs: &[DVector<f64>],
    external_inputs: &[DVector<f64>],
    x0: &DVector<f64>,
    settings: &AbstractionSettings,
) -> Result<FiniteMdp> {
    let d = absr.dims();
    if partition.dim() != d.n {
        return Err(Error::dim("partition", d.n, partition.dim()));
    }
    if internal_inputs.is_empty() || external_inputs.is_empty() {
        return Err(Error::InvalidArgument("input lists must be nonempty".into()));
    }
    for w in internal_inputs {
        check_vector("internal input", w, d.p)?;
    }
    for u in external_inputs {
        check_vector("external input", u, d.m)?;
    }
    check_vector("x0", x0, d.n)?;
    check_shape("C_r", &absr.c, d.q, d.n)?;

    let cells = partition.num_cells();
    let estimated = estimate_mdp_bytes(cells, internal_inputs.len(), external_inputs.len());
    if estimated > settings.memory_cap_bytes {
        return Err(Error::ResourceCap {
            estimated_bytes: estimated,
            cap_bytes: settings.memory_cap_bytes,
        });
    }

    let (nw, nu) = (internal_inputs.len(), external_inputs.len());
    let ns = cells + 1;
    let rows: Vec<TransitionRow> = (0..ns * nw * nu)
        .into_par_iter()
        .map(|flat| {
            let s = flat / (nw * nu);
            let w = (flat / nu) % nw;
            let u = flat % nu;
            if s == cells {
                let mut probs = vec![0.0; ns];
                probs[cells] = 1.0;
                return Ok(TransitionRow {
                    probs,
                    method: RowMethod::Dirac,
                    std_error: 0.0,
                });
            }
            let rep = partition.representative(s);
            transition_row(
                absr,
                partition,
                &rep,
                &internal_inputs[w],
                &external_inputs[u],
                &settings.transition,
                flat as u64,
            )
        })
        .collect::<Result<_>>()?;

    let max_std_error = rows.iter().map(|r| r.std_error).fold(0.0, f64::max);
    let mut transitions = Vec::with_capacity(ns * ns * nw * nu);
    for r in rows {
        transitions.extend(r.probs);
    }
    let initial_state = partition.pi_x(x0).index().unwrap_or(cells);
    let mdp = FiniteMdp {
        partition: partition.clone(),
        internal_inputs: internal_inputs.to_vec(),
        external_inputs: external_inputs.to_vec(),
        output_matrix: absr.c.clone(),
        initial_state,
        transitions,
        max_std_error,
    };
    // Sampled rows are exact frequencies and still sum to one.
    mdp.validate(1e-9)?;
    Ok(mdp)
}

const FORMAT_HEADER: &str = "finite_mdp 1";

fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_list(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(fmt_num).collect::<Vec<_>>().join(" ")
}

/// Writes the interchange text format: a header with dimensions, box,
/// output map and input lists, then sparse `from w u to prob` triples.
/// Every real is printed with 17 significant digits.
pub fn write_interchange(mdp: &FiniteMdp) -> String {
    let part = &mdp.partition;
    let mut out = String::new();
    let _ = writeln!(out, "{FORMAT_HEADER}");
    let _ = writeln!(
        out,
        "dims {} {} {} {}",
        part.dim(),
        mdp.internal_inputs.first().map_or(0, |w| w.len()),
        mdp.external_inputs.first().map_or(0, |u| u.len()),
        mdp.output_matrix.nrows()
    );
    let _ = writeln!(out, "lower {}", fmt_list(part.lower.iter().copied()));
    let _ = writeln!(out, "upper {}", fmt_list(part.upper.iter().copied()));
    let _ = writeln!(out, "widths {}", fmt_list(part.widths.iter().copied()));
    let counts: Vec<String> = part.counts.iter().map(|c| c.to_string()).collect();
    let _ = writeln!(out, "counts {}", counts.join(" "));
    let _ = writeln!(out, "extended {}", u8::from(part.extended));
    let _ = writeln!(
        out,
        "output_matrix {}",
        fmt_list(mdp.output_matrix.transpose().iter().copied())
    );
    let _ = writeln!(out, "states {} sink {}", mdp.num_states(), mdp.sink());
    let _ = writeln!(out, "initial {}", mdp.initial_state);
    let _ = writeln!(out, "max_std_error {}", fmt_num(mdp.max_std_error));
    let _ = writeln!(out, "internal_inputs {}", mdp.num_internal());
    for w in &mdp.internal_inputs {
        let _ = writeln!(out, "{}", fmt_list(w.iter().copied()));
    }
    let _ = writeln!(out, "external_inputs {}", mdp.num_external());
    for u in &mdp.external_inputs {
        let _ = writeln!(out, "{}", fmt_list(u.iter().copied()));
    }
    let nnz = mdp.transitions.iter().filter(|&&p| p != 0.0).count();
    let _ = writeln!(out, "transitions {nnz}");
    for s in 0..mdp.num_states() {
        for w in 0..mdp.num_internal() {
            for u in 0..mdp.num_external() {
                for (t, &p) in mdp.row(s, w, u).iter().enumerate() {
                    if p != 0.0 {
                        let _ = writeln!(out, "{s} {w} {u} {t} {}", fmt_num(p));
                    }
                }
            }
        }
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            message: message.into(),
        }
    }

    fn next_line(&mut self) -> Result<&'a str> {
        match self.inner.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => Err(Error::Parse {
                line: self.line + 1,
                message: "unexpected end of input".into(),
            }),
        }
    }

    /// Reads a line starting with `key` and returns the remaining tokens.
    fn keyed(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let line = self.next_line()?;
        let mut tokens = line.split_whitespace();
        if tokens.next() != Some(key) {
            return Err(self.err(format!("expected '{key}'")));
        }
        Ok(tokens.collect())
    }

    fn floats(&self, tokens: &[&str]) -> Result<Vec<f64>> {
        tokens
            .iter()
            .map(|t| t.parse::<f64>().map_err(|e| self.err(format!("bad number '{t}': {e}"))))
            .collect()
    }

    fn usizes(&self, tokens: &[&str]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|e| self.err(format!("bad integer '{t}': {e}")))
            })
            .collect()
    }

    fn single(&self, tokens: &[&str]) -> Result<usize> {
        match self.usizes(tokens)?.as_slice() {
            [v] => Ok(*v),
            _ => Err(self.err("expected one integer")),
        }
    }
}

pub fn parse_interchange(text: &str) -> Result<FiniteMdp> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        line: 0,
    };
    if lines.next_line()?.trim() != FORMAT_HEADER {
        return Err(lines.err(format!("expected header '{FORMAT_HEADER}'")));
    }
    let dims = lines.keyed("dims")?;
    let dims = lines.usizes(&dims)?;
    let [n, p, m, q] = dims[..] else {
        return Err(lines.err("dims needs four integers"));
    };
    let t = lines.keyed("lower")?;
    let lower = lines.floats(&t)?;
    let t = lines.keyed("upper")?;
    let upper = lines.floats(&t)?;
    let t = lines.keyed("widths")?;
    let widths = lines.floats(&t)?;
    let t = lines.keyed("counts")?;
    let counts = lines.usizes(&t)?;
    let t = lines.keyed("extended")?;
    let extended = lines.single(&t)? != 0;
    for (name, len) in [
        ("lower", lower.len()),
        ("upper", upper.len()),
        ("widths", widths.len()),
        ("counts", counts.len()),
    ] {
        if len != n {
            return Err(lines.err(format!("{name} has {len} entries, expected {n}")));
        }
    }
    let t = lines.keyed("output_matrix")?;
    let c = lines.floats(&t)?;
    if c.len() != q * n {
        return Err(lines.err(format!("output_matrix has {} entries, expected {}", c.len(), q * n)));
    }
    let output_matrix = DMatrix::from_row_slice(q, n, &c);
    let partition = GridPartition {
        lower,
        upper,
        widths,
        counts,
        extended,
    };
    let t = lines.keyed("states")?;
    let ns = match t[..] {
        [count, "sink", sink] => {
            let ns = lines.single(&[count])?;
            if ns != partition.num_cells() + 1 || lines.single(&[sink])? != partition.num_cells() {
                return Err(lines.err("state count does not match the partition"));
            }
            ns
        }
        _ => return Err(lines.err("expected 'states <count> sink <index>'")),
    };
    let t = lines.keyed("initial")?;
    let initial_state = lines.single(&t)?;
    let t = lines.keyed("max_std_error")?;
    let max_std_error = match lines.floats(&t)?[..] {
        [v] => v,
        _ => return Err(lines.err("expected one number")),
    };
    let mut read_inputs = |key: &str, dim: usize| -> Result<Vec<DVector<f64>>> {
        let t = lines.keyed(key)?;
        let count = lines.single(&t)?;
        (0..count)
            .map(|_| {
                let l = lines.next_line()?;
                let v = lines.floats(&l.split_whitespace().collect::<Vec<_>>())?;
                if v.len() != dim {
                    return Err(lines.err(format!("input has {} entries, expected {dim}", v.len())));
                }
                Ok(DVector::from_vec(v))
            })
            .collect()
    };
    let internal_inputs = read_inputs("internal_inputs", p)?;
    let external_inputs = read_inputs("external_inputs", m)?;
    let (nw, nu) = (internal_inputs.len(), external_inputs.len());
    let t = lines.keyed("transitions")?;
    let nnz = lines.single(&t)?;
    let mut transitions = vec![0.0; ns * ns * nw * nu];
    for _ in 0..nnz {
        let l = lines.next_line()?;
        let tokens: Vec<&str> = l.split_whitespace().collect();
        if tokens.len() != 5 {
            return Err(lines.err("expected 'from w u to prob'"));
        }
        let idx = lines.usizes(&tokens[..4])?;
        let prob = lines.floats(&tokens[4..])?[0];
        let (s, w, u, to) = (idx[0], idx[1], idx[2], idx[3]);
        if s >= ns || w >= nw || u >= nu || to >= ns {
            return Err(lines.err("transition index out of range"));
        }
        transitions[((s * nw + w) * nu + u) * ns + to] = prob;
    }
    let mdp = FiniteMdp {
        partition,
        internal_inputs,
        external_inputs,
        output_matrix,
        initial_state,
        transitions,
        max_std_error,
    };
    mdp.validate(1e-9).map_err(|e| Error::Parse {
        line: lines.line,
        message: e.to_string(),
    })?;
    Ok(mdp)
}
