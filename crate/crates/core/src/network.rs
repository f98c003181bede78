//! Interconnection of subsystems and composition of their relations.
//!
//! Subsystem `i` receives its internal input `w_i` as a concatenation of
//! slots; each edge `j → i` fills one slot with `C_int x_j` on the concrete
//! side and `Ĉ_int x̂_j` on the abstract side.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::certification::{check_sprocedure, search_lambda, PsdCheck, RelationCertificate, SProcedureProblem};
use crate::error::{Error, Result};
use crate::linalg::{block_diag, check_vector};
use crate::model::{NonlinearSystem, Nonlinearity};
use crate::relations::QuadraticRelation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    /// First row of the receiver's concrete internal input filled by this edge.
    pub offset: usize,
    #[serde(with = "crate::matrix_serde")]
    pub output: DMatrix<f64>,
    /// First row of the receiver's abstract internal input filled by this edge.
    pub abstract_offset: usize,
    #[serde(with = "crate::matrix_serde")]
    pub abstract_output: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkTopology {
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeIssue {
    pub edge: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InterconnectionReport {
    pub issues: Vec<EdgeIssue>,
}

impl InterconnectionReport {
    pub fn passed(&self) -> bool {
        self.issues.is_empty()
    }
}

impl NetworkTopology {
    pub fn incoming(&self, to: usize) -> impl Iterator<Item = (usize, &Edge)> {
        self.edges.iter().enumerate().filter(move |(_, e)| e.to == to)
    }
}

/// Dimensions a subsystem exposes to the topology check: state, internal
/// input, and the same pair on the abstract side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PortDims {
    pub state: usize,
    pub internal: usize,
    pub abstract_state: usize,
    pub abstract_internal: usize,
}

impl PortDims {
    pub fn of(conc: &NonlinearSystem, absr: &NonlinearSystem) -> Self {
        let (d, dh) = (conc.dims(), absr.dims());
        Self {
            state: d.n,
            internal: d.p,
            abstract_state: dh.n,
            abstract_internal: dh.p,
        }
    }
}

/// Checks every edge's output dimension against the receiving slot and
/// that slots of one receiver do not overlap.
pub fn check_interconnection_constraint(topology: &NetworkTopology, ports: &[PortDims]) -> InterconnectionReport {
    let mut issues = Vec::new();
    let mut push = |edge: usize, message: String| issues.push(EdgeIssue { edge, message });
    for (k, e) in topology.edges.iter().enumerate() {
        if e.from >= ports.len() || e.to >= ports.len() {
            push(k, format!("edge {}->{} names a missing subsystem", e.from, e.to));
            continue;
        }
        if e.from == e.to {
            push(k, format!("self-loop on subsystem {}", e.from));
            continue;
        }
        let (src, dst) = (&ports[e.from], &ports[e.to]);
        if e.output.ncols() != src.state {
            push(
                k,
                format!(
                    "output matrix has {} columns, source state has {}",
                    e.output.ncols(),
                    src.state
                ),
            );
        }
        if e.offset + e.output.nrows() > dst.internal {
            push(
                k,
                format!(
                    "slot rows {}..{} exceed receiver internal input dimension {}",
                    e.offset,
                    e.offset + e.output.nrows(),
                    dst.internal
                ),
            );
        }
        if e.abstract_output.ncols() != src.abstract_state {
            push(
                k,
                format!(
                    "abstract output matrix has {} columns, source abstract state has {}",
                    e.abstract_output.ncols(),
                    src.abstract_state
                ),
            );
        }
        if e.abstract_offset + e.abstract_output.nrows() > dst.abstract_internal {
            push(
                k,
                format!(
                    "abstract slot rows {}..{} exceed receiver abstract internal input dimension {}",
                    e.abstract_offset,
                    e.abstract_offset + e.abstract_output.nrows(),
                    dst.abstract_internal
                ),
            );
        }
    }
    for (a, ea) in topology.edges.iter().enumerate() {
        for (b, eb) in topology.edges.iter().enumerate().skip(a + 1) {
            if ea.to != eb.to {
                continue;
            }
            let overlap = |o1: usize, l1: usize, o2: usize, l2: usize| o1 < o2 + l2 && o2 < o1 + l1;
            if overlap(ea.offset, ea.output.nrows(), eb.offset, eb.output.nrows())
                || overlap(
                    ea.abstract_offset,
                    ea.abstract_output.nrows(),
                    eb.abstract_offset,
                    eb.abstract_output.nrows(),
                )
            {
                issues.push(EdgeIssue {
                    edge: b,
                    message: format!("slot overlaps edge {a} at receiver {}", eb.to),
                });
            }
        }
    }
    InterconnectionReport { issues }
}

/// Which side of each edge to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Concrete,
    Abstract,
}

/// `w_i = g_i(x_1, …, x_N)` for every subsystem.
pub fn internal_inputs(
    topology: &NetworkTopology,
    states: &[DVector<f64>],
    internal_dims: &[usize],
    side: Side,
) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = internal_dims.iter().map(|&p| DVector::zeros(p)).collect();
    for e in &topology.edges {
        let (offset, c) = match side {
            Side::Concrete => (e.offset, &e.output),
            Side::Abstract => (e.abstract_offset, &e.abstract_output),
        };
        let y = c * &states[e.from];
        out[e.to].rows_mut(offset, y.len()).copy_from(&y);
    }
    out
}

/// Interconnected system without internal inputs. Each subsystem keeps its
/// own nonlinearity, embedded into the stacked state.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// `(E_i, F_i, φ_i)` lifted to the stacked state.
    pub nonlinear: Vec<(DMatrix<f64>, DMatrix<f64>, Nonlinearity)>,
    pub state_offsets: Vec<usize>,
    pub state_dims: Vec<usize>,
}

impl ComposedSystem {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn step(&self, x: &DVector<f64>, nu: &DVector<f64>, zeta: &DVector<f64>) -> Result<DVector<f64>> {
        check_vector("x", x, self.a.nrows())?;
        check_vector("nu", nu, self.b.ncols())?;
        check_vector("zeta", zeta, self.r.ncols())?;
        let mut next = &self.a * x + &self.b * nu + &self.r * zeta;
        for (e, f, phi) in &self.nonlinear {
            next += e * phi.eval((f * x)[0]);
        }
        Ok(next)
    }

    pub fn split(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        self.state_offsets
            .iter()
            .zip(&self.state_dims)
            .map(|(&o, &n)| x.rows(o, n).into_owned())
            .collect()
    }
}

fn offsets(dims: &[usize]) -> Vec<usize> {
    dims.iter()
        .scan(0, |acc, &d| {
            let o = *acc;
            *acc += d;
            Some(o)
        })
        .collect()
}

/// Builds the interconnected system on the product state space:
/// `A_ii = A_i`, `A_ij = D_i[slot] C_int[j → i]`; `B`, `C`, `R` block
/// diagonal. `side` selects which edge matrices wire the network.
pub fn interconnect(topology: &NetworkTopology, systems: &[NonlinearSystem], side: Side) -> Result<ComposedSystem> {
    for (k, e) in topology.edges.iter().enumerate() {
        if e.from >= systems.len() || e.to >= systems.len() || e.from == e.to {
            return Err(Error::InvalidArgument(format!(
                "edge {k} ({}->{}) is not a valid link",
                e.from, e.to
            )));
        }
        let (offset, c) = match side {
            Side::Concrete => (e.offset, &e.output),
            Side::Abstract => (e.abstract_offset, &e.abstract_output),
        };
        let (src, dst) = (systems[e.from].dims(), systems[e.to].dims());
        if c.ncols() != src.n || offset + c.nrows() > dst.p {
            return Err(Error::InvalidArgument(format!(
                "edge {k} ({}->{}): output {}x{} does not fit source state {} / receiver slot {}..{} of {}",
                e.from,
                e.to,
                c.nrows(),
                c.ncols(),
                src.n,
                offset,
                offset + c.nrows(),
                dst.p
            )));
        }
    }
    let dims: Vec<usize> = systems.iter().map(|s| s.dims().n).collect();
    let offs = offsets(&dims);
    let n: usize = dims.iter().sum();

    let mut a = block_diag(&systems.iter().map(|s| &s.a).collect::<Vec<_>>());
    for e in &topology.edges {
        let (offset, c) = match side {
            Side::Concrete => (e.offset, &e.output),
            Side::Abstract => (e.abstract_offset, &e.abstract_output),
        };
        let d_slot = systems[e.to].d.columns(offset, c.nrows());
        let block = d_slot * c;
        let mut view = a.view_mut((offs[e.to], offs[e.from]), (dims[e.to], dims[e.from]));
        view += block;
    }
    let b = block_diag(&systems.iter().map(|s| &s.b).collect::<Vec<_>>());
    let c = block_diag(&systems.iter().map(|s| &s.c).collect::<Vec<_>>());
    let r = block_diag(&systems.iter().map(|s| &s.r).collect::<Vec<_>>());
    let nonlinear = systems
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut e = DMatrix::zeros(n, 1);
            e.view_mut((offs[i], 0), (dims[i], 1)).copy_from(&s.e);
            let mut f = DMatrix::zeros(1, n);
            f.view_mut((0, offs[i]), (1, dims[i])).copy_from(&s.f);
            (e, f, s.phi.clone())
        })
        .collect();
    Ok(ComposedSystem {
        a,
        b,
        c,
        r,
        nonlinear,
        state_offsets: offs,
        state_dims: dims,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionalityCheck {
    pub receiver: usize,
    pub sources: Vec<usize>,
    pub lambda: f64,
    pub check: PsdCheck,
}

/// S-procedure problem of the compositionality condition for one receiver.
///
/// With `z = (x_src, x̂_src)` stacked over the sources,
/// `F̃1 = [[M, −MP], [−PᵀM, PᵀMP]]`, `F̃2 = Wᵀ M_w W` with
/// `W = [C_int, −P_w Ĉ_int]`, `g̃ = 0`, `h̃1 = −Σ ε_j²`, `h̃2 = −ε_w²`.
/// A single source reproduces the one-block form.
pub fn compositionality_problem(
    sources: &[(&QuadraticRelation, &DMatrix<f64>, &DMatrix<f64>)],
    receiver_input: &QuadraticRelation,
) -> Result<SProcedureProblem> {
    let pw = &receiver_input.p;
    let mw = &receiver_input.m;
    let (p_dim, phat_dim) = (pw.nrows(), pw.ncols());
    let m = block_diag(&sources.iter().map(|(r, _, _)| &r.m).collect::<Vec<_>>());
    let p = block_diag(&sources.iter().map(|(r, _, _)| &r.p).collect::<Vec<_>>());
    let n: usize = sources.iter().map(|(r, _, _)| r.concrete_dim()).sum();
    let nhat: usize = sources.iter().map(|(r, _, _)| r.abstract_dim()).sum();

    // Each source's output already sits in its slot rows (zero elsewhere).
    let mut c = DMatrix::zeros(p_dim, n);
    let mut chat = DMatrix::zeros(phat_dim, nhat);
    let (mut col, mut col_hat) = (0, 0);
    for (rel, c_int, chat_int) in sources {
        if c_int.nrows() != p_dim || c_int.ncols() != rel.concrete_dim() {
            return Err(Error::dim(
                "internal output matrix",
                p_dim * rel.concrete_dim(),
                c_int.len(),
            ));
        }
        if chat_int.nrows() != phat_dim || chat_int.ncols() != rel.abstract_dim() {
            return Err(Error::dim(
                "abstract internal output matrix",
                phat_dim * rel.abstract_dim(),
                chat_int.len(),
            ));
        }
        c.view_mut((0, col), (p_dim, rel.concrete_dim())).copy_from(c_int);
        chat.view_mut((0, col_hat), (phat_dim, rel.abstract_dim()))
            .copy_from(chat_int);
        col += rel.concrete_dim();
        col_hat += rel.abstract_dim();
    }

    let mut f1 = DMatrix::zeros(n + nhat, n + nhat);
    let mp = &m * &p;
    f1.view_mut((0, 0), (n, n)).copy_from(&m);
    f1.view_mut((0, n), (n, nhat)).copy_from(&(-&mp));
    f1.view_mut((n, 0), (nhat, n)).copy_from(&(-mp.transpose()));
    f1.view_mut((n, n), (nhat, nhat)).copy_from(&(p.transpose() * &mp));
    let f1 = (&f1 + f1.transpose()) * 0.5;

    let mut w = DMatrix::zeros(p_dim, n + nhat);
    w.view_mut((0, 0), (p_dim, n)).copy_from(&c);
    w.view_mut((0, n), (p_dim, nhat)).copy_from(&(-(pw * &chat)));
    let f2 = w.transpose() * mw * &w;
    let f2 = (&f2 + f2.transpose()) * 0.5;

    let h1 = -sources.iter().map(|(r, _, _)| r.eps * r.eps).sum::<f64>();
    let d = n + nhat;
    SProcedureProblem::new(
        f1,
        DVector::zeros(d),
        h1,
        f2,
        DVector::zeros(d),
        -receiver_input.eps * receiver_input.eps,
    )
}

/// Output matrix of one edge placed into the receiver's slot rows.
fn slot_matrix(rows: usize, offset: usize, c: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows, c.ncols());
    out.view_mut((offset, 0), (c.nrows(), c.ncols())).copy_from(c);
    out
}

/// Multiplier for the compositionality check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionalityLambda {
    Fixed(f64),
    Search { lambda_max: f64 },
}

/// Checks that related source states produce related internal inputs at
/// `receiver`. Sources with several edges into the receiver are stacked.
pub fn check_compositionality_condition(
    topology: &NetworkTopology,
    state_relations: &[QuadraticRelation],
    receiver: usize,
    receiver_input: &QuadraticRelation,
    lambda: CompositionalityLambda,
    tol_psd: f64,
) -> Result<CompositionalityCheck> {
    let incoming: Vec<&Edge> = topology.incoming(receiver).map(|(_, e)| e).collect();
    let mut sources: Vec<usize> = incoming.iter().map(|e| e.from).collect();
    sources.sort_unstable();
    sources.dedup();
    if sources.is_empty() {
        // Nothing flows in: the internal input is identically zero on both sides.
        let zero_ok = receiver_input.eps >= 0.0;
        return Ok(CompositionalityCheck {
            receiver,
            sources,
            lambda: 0.0,
            check: PsdCheck {
                passed: zero_ok,
                min_eigenvalue: 0.0,
                threshold: tol_psd,
            },
        });
    }
    let (p_dim, phat_dim) = (receiver_input.p.nrows(), receiver_input.p.ncols());
    let mut mats = Vec::with_capacity(sources.len());
    for &src in &sources {
        let rel = state_relations
            .get(src)
            .ok_or_else(|| Error::InvalidArgument(format!("no state relation for subsystem {src}")))?;
        let mut c = DMatrix::zeros(p_dim, rel.concrete_dim());
        let mut chat = DMatrix::zeros(phat_dim, rel.abstract_dim());
        for e in incoming.iter().filter(|e| e.from == src) {
            c += slot_matrix(p_dim, e.offset, &e.output);
            chat += slot_matrix(phat_dim, e.abstract_offset, &e.abstract_output);
        }
        mats.push((rel, c, chat));
    }
    let refs: Vec<_> = mats.iter().map(|(r, c, ch)| (*r, c, ch)).collect();
    let prob = compositionality_problem(&refs, receiver_input)?;
    let (lambda, check) = match lambda {
        CompositionalityLambda::Fixed(l) => (l, check_sprocedure(&prob, l, tol_psd)?),
        CompositionalityLambda::Search { lambda_max } => {
            let s = search_lambda(&prob, lambda_max, tol_psd)?;
            (s.lambda, s.check)
        }
    };
    Ok(CompositionalityCheck {
        receiver,
        sources,
        lambda,
        check,
    })
}

/// `1 − Π(1 − δ_i)`, evaluated through `ln1p`/`expm1`.
pub fn composed_delta(deltas: &[f64]) -> f64 {
    -deltas.iter().map(|d| (-d).ln_1p()).sum::<f64>().exp_m1()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposedRelation {
    pub eps: f64,
    pub delta: f64,
    pub certificates: Vec<RelationCertificate>,
    pub evidence: Vec<CompositionalityCheck>,
}

impl ComposedRelation {
    /// Conjunction of the subsystem relations.
    pub fn contains(&self, states: &[DVector<f64>], abstract_states: &[DVector<f64>]) -> Result<bool> {
        if states.len() != self.certificates.len() || abstract_states.len() != self.certificates.len() {
            return Err(Error::dim("subsystem states", self.certificates.len(), states.len()));
        }
        for ((c, x), xh) in self.certificates.iter().zip(states).zip(abstract_states) {
            if !c.state_relation.contains(x, xh)? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Composes subsystem certificates: `ε = Σ ε_i`, `δ = 1 − Π(1 − δ_i)`.
pub fn compose_relations(
    certs: &[RelationCertificate],
    evidence: &[Option<CompositionalityCheck>],
) -> Result<ComposedRelation> {
    if certs.is_empty() {
        return Err(Error::InvalidArgument("no subsystem certificates".into()));
    }
    let mut checks = Vec::with_capacity(certs.len());
    for i in 0..certs.len() {
        match evidence.get(i) {
            Some(Some(c)) if c.check.passed => checks.push(c.clone()),
            Some(Some(_)) => return Err(Error::CompositionalityFailed(i)),
            _ => return Err(Error::MissingEvidence(i)),
        }
    }
    let eps = certs.iter().map(|c| c.eps).sum();
    let deltas: Vec<f64> = certs.iter().map(|c| c.delta).collect();
    Ok(ComposedRelation {
        eps,
        delta: composed_delta(&deltas),
        certificates: certs.to_vec(),
        evidence: checks,
    })
}
