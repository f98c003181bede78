//! Finite-horizon safety and reachability synthesis on a finite MDP, and
//! refinement of the resulting policy to a concrete controller.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abstraction::{Cell, FiniteMdp};
use crate::certification::RelationCertificate;
use crate::error::{Error, Result};
use crate::guarantees::{ClosenessCertificate, EventTube};
use crate::linalg::{pseudo_inverse, rank};
use crate::model::{NoiseSource, NonlinearSystem};
use crate::relations::{refine_input, wilson_interval};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecKind {
    Safety,
    Reachability,
}

/// How the abstract internal input is chosen during synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InternalChoice {
    /// Optimized jointly with the external input.
    Free,
    /// Held at the given internal-input index.
    Fixed(usize),
}

/// Safe or target state sets for steps `0..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecHorizon {
    pub kind: SpecKind,
    pub sets: Vec<Vec<bool>>,
    pub internal: InternalChoice,
}

impl SpecHorizon {
    pub fn horizon(&self) -> usize {
        self.sets.len().saturating_sub(1)
    }

    /// State `s` belongs to the step-`k` set iff its output lies in the
    /// step-`k` box of `tube`. The sink belongs to no set.
    pub fn from_tube(mdp: &FiniteMdp, tube: &EventTube, kind: SpecKind, internal: InternalChoice) -> Self {
        let outputs: Vec<Option<DVector<f64>>> = (0..mdp.num_states()).map(|s| mdp.output(s)).collect();
        let sets = tube
            .boxes
            .iter()
            .map(|b| {
                outputs
                    .iter()
                    .map(|y| y.as_ref().is_some_and(|y| !b.is_empty() && b.contains(y)))
                    .collect()
            })
            .collect();
        Self { kind, sets, internal }
    }

    fn check(&self, mdp: &FiniteMdp, kind: SpecKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::InvalidArgument(format!(
                "specification kind is {:?}, expected {kind:?}",
                self.kind
            )));
        }
        if self.sets.is_empty() {
            return Err(Error::Horizon("specification has no steps".into()));
        }
        let ns = mdp.num_states();
        if let Some(k) = self.sets.iter().position(|s| s.len() != ns) {
            return Err(Error::Horizon(format!(
                "step {k} set has {} entries, MDP has {ns} states",
                self.sets[k].len()
            )));
        }
        if self.sets.iter().any(|s| s[mdp.sink()]) {
            return Err(Error::InvalidArgument("sink state cannot be safe or a target".into()));
        }
        if let InternalChoice::Fixed(j) = self.internal {
            if j >= mdp.num_internal() {
                return Err(Error::InvalidArgument(format!("internal-input index {j} out of range")));
            }
        }
        Ok(())
    }
}

/// `values[k][s]`, the optimal probability from state `s` at step `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub values: Vec<Vec<f64>>,
}

impl ValueTable {
    pub fn initial(&self, state: usize) -> f64 {
        self.values[0][state]
    }
}

/// Time-varying deterministic policy: `choices[k][s] = (internal, external)`
/// input indices for steps `0..T`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinitePolicy {
    pub horizon: usize,
    pub num_states: usize,
    pub num_internal: usize,
    pub num_external: usize,
    pub choices: Vec<Vec<(usize, usize)>>,
}

impl FinitePolicy {
    pub fn choice(&self, k: usize, state: usize) -> Option<(usize, usize)> {
        self.choices.get(k).and_then(|row| row.get(state)).copied()
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }
}

fn backward(mdp: &FiniteMdp, spec: &SpecHorizon, kind: SpecKind) -> Result<(ValueTable, FinitePolicy)> {
    spec.check(mdp, kind)?;
    let horizon = spec.horizon();
    let ns = mdp.num_states();
    let sink = mdp.sink();
    let internal: Vec<usize> = match spec.internal {
        InternalChoice::Free => (0..mdp.num_internal()).collect(),
        InternalChoice::Fixed(j) => vec![j],
    };
    let default_choice = (internal[0], 0);
    let mut values = vec![vec![0.0; ns]; horizon + 1];
    values[horizon] = spec.sets[horizon].iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mut choices = vec![vec![default_choice; ns]; horizon];
    for k in (0..horizon).rev() {
        let (head, tail) = values.split_at_mut(k + 1);
        let next = &tail[0];
        for s in 0..ns {
            let member = spec.sets[k][s];
            if s == sink || (kind == SpecKind::Safety && !member) {
                continue;
            }
            if kind == SpecKind::Reachability && member {
                head[k][s] = 1.0;
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            let mut arg = default_choice;
            for &w in &internal {
                for u in 0..mdp.num_external() {
                    let v: f64 = mdp.row(s, w, u).iter().zip(next).map(|(p, v)| p * v).sum();
                    if v > best {
                        best = v;
                        arg = (w, u);
                    }
                }
            }
            head[k][s] = best;
            choices[k][s] = arg;
        }
    }
    Ok((
        ValueTable { values },
        FinitePolicy {
            horizon,
            num_states: ns,
            num_internal: mdp.num_internal(),
            num_external: mdp.num_external(),
            choices,
        },
    ))
}

/// Maximal probability of staying in the safe sets through step `T`.
/// Ties go to the lowest (internal, external) index pair.
pub fn dp_safety(mdp: &FiniteMdp, spec: &SpecHorizon) -> Result<(ValueTable, FinitePolicy)> {
    backward(mdp, spec, SpecKind::Safety)
}

/// Maximal probability of hitting the target sets by step `T`.
pub fn dp_reach(mdp: &FiniteMdp, spec: &SpecHorizon) -> Result<(ValueTable, FinitePolicy)> {
    backward(mdp, spec, SpecKind::Reachability)
}

/// Value of a fixed policy from every state.
pub fn evaluate_policy(mdp: &FiniteMdp, spec: &SpecHorizon, policy: &FinitePolicy) -> Result<ValueTable> {
    spec.check(mdp, spec.kind)?;
    let horizon = spec.horizon();
    if policy.horizon != horizon || policy.num_states() != mdp.num_states() {
        return Err(Error::Horizon(format!(
            "policy covers {} steps and {} states, specification {horizon} steps and {} states",
            policy.horizon,
            policy.num_states(),
            mdp.num_states()
        )));
    }
    let ns = mdp.num_states();
    let mut values = vec![vec![0.0; ns]; horizon + 1];
    values[horizon] = spec.sets[horizon].iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    for k in (0..horizon).rev() {
        for s in 0..ns {
            let member = spec.sets[k][s];
            values[k][s] = match spec.kind {
                SpecKind::Safety if !member => 0.0,
                SpecKind::Reachability if member => 1.0,
                _ => {
                    let (w, u) = policy.choices[k][s];
                    mdp.row(s, w, u).iter().zip(&values[k + 1]).map(|(p, v)| p * v).sum()
                }
            };
        }
    }
    Ok(ValueTable { values })
}

/// Concrete lower bound `max(0, v̂ − γ)`.
pub fn guarantee_transfer(abstract_value: f64, cert: &ClosenessCertificate) -> f64 {
    (abstract_value - cert.gamma).max(0.0)
}

/// Dense text table: a header, then one `k state internal external` line
/// per entry.
pub fn write_policy(policy: &FinitePolicy) -> String {
    let mut out = String::from("finite_policy 1\n");
    let _ = writeln!(
        out,
        "horizon {} states {} internal {} external {}",
        policy.horizon,
        policy.num_states(),
        policy.num_internal,
        policy.num_external
    );
    for (k, row) in policy.choices.iter().enumerate() {
        for (s, (w, u)) in row.iter().enumerate() {
            let _ = writeln!(out, "{k} {s} {w} {u}");
        }
    }
    out
}

pub fn parse_policy(text: &str) -> Result<FinitePolicy> {
    let parse_err = |line: usize, message: String| Error::Parse { line, message };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, "finite_policy 1")) => {}
        Some((n, l)) => return Err(parse_err(n, format!("unexpected header '{l}'"))),
        None => return Err(parse_err(1, "empty policy".into())),
    }
    let (n, dims) = lines
        .next()
        .ok_or_else(|| parse_err(2, "missing dimensions line".into()))?;
    let tok: Vec<&str> = dims.split_whitespace().collect();
    if tok.len() != 8 || tok[0] != "horizon" || tok[2] != "states" || tok[4] != "internal" || tok[6] != "external" {
        return Err(parse_err(n, format!("malformed dimensions line '{dims}'")));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|e| parse_err(n, format!("'{s}': {e}")));
    let (horizon, ns, nw, nu) = (num(tok[1])?, num(tok[3])?, num(tok[5])?, num(tok[7])?);
    let mut choices = vec![vec![None; ns]; horizon];
    for (n, line) in lines {
        let v: Vec<usize> = line
            .split_whitespace()
            .map(|s| s.parse::<usize>().map_err(|e| parse_err(n, format!("'{s}': {e}"))))
            .collect::<Result<_>>()?;
        let [k, s, w, u] = v[..] else {
            return Err(parse_err(n, format!("expected 4 fields, found {}", v.len())));
        };
        if k >= horizon || s >= ns || w >= nw || u >= nu {
            return Err(parse_err(n, "index out of range".into()));
        }
        if choices[k][s].replace((w, u)).is_some() {
            return Err(parse_err(n, format!("duplicate entry for step {k} state {s}")));
        }
    }
    let choices = choices
        .into_iter()
        .enumerate()
        .map(|(k, row)| {
            row.into_iter()
                .enumerate()
                .map(|(s, c)| c.ok_or_else(|| parse_err(0, format!("missing entry for step {k} state {s}"))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FinitePolicy {
        horizon,
        num_states: ns,
        num_internal: nw,
        num_external: nu,
        choices,
    })
}

/// How the controller learns the realized noise driving its companion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompanionMode {
    /// The noise draw is handed to the controller directly.
    CoSimulation,
    /// The noise is recovered from the observed successor state, which
    /// needs `R` with full column rank.
    Reconstruction,
}

/// Controller obtained by running the abstract policy on a finite companion
/// and refining its inputs through the certified interface.
#[derive(Debug, Clone)]
pub struct RefinedController<'a> {
    policy: &'a FinitePolicy,
    mdp: &'a FiniteMdp,
    concrete: &'a NonlinearSystem,
    cert: &'a RelationCertificate,
    mode: CompanionMode,
    r_pinv: Option<DMatrix<f64>>,
    step: usize,
    companion: usize,
    companion_state: DVector<f64>,
    last: Option<(usize, usize)>,
    forfeited: bool,
}

/// One control decision.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlAction {
    pub nu: DVector<f64>,
    pub nuhat: DVector<f64>,
    pub what_index: usize,
}

impl<'a> RefinedController<'a> {
    pub fn new(
        policy: &'a FinitePolicy,
        mdp: &'a FiniteMdp,
        concrete: &'a NonlinearSystem,
        cert: &'a RelationCertificate,
        initial_state: usize,
        mode: CompanionMode,
    ) -> Result<Self> {
        if policy.num_states() != mdp.num_states()
            || policy.num_internal != mdp.num_internal()
            || policy.num_external != mdp.num_external()
        {
            return Err(Error::InvalidArgument(
                "policy does not match the finite abstraction".into(),
            ));
        }
        let companion_state = mdp.state(initial_state).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "initial companion state {initial_state} is the sink or out of range"
            ))
        })?;
        let r_pinv = match mode {
            CompanionMode::CoSimulation => None,
            CompanionMode::Reconstruction => {
                if rank(&concrete.r) < concrete.dims().s {
                    return Err(Error::InvalidArgument(
                        "noise reconstruction needs R with full column rank".into(),
                    ));
                }
                Some(pseudo_inverse(&concrete.r)?)
            }
        };
        Ok(Self {
            policy,
            mdp,
            concrete,
            cert,
            mode,
            r_pinv,
            step: 0,
            companion: initial_state,
            companion_state,
            last: None,
            forfeited: false,
        })
    }

    pub fn mode(&self) -> CompanionMode {
        self.mode
    }

    /// True once the companion has left the abstraction's domain; the
    /// transferred guarantee no longer applies.
    pub fn forfeited(&self) -> bool {
        self.forfeited
    }

    pub fn companion(&self) -> usize {
        self.companion
    }

    pub fn companion_state(&self) -> &DVector<f64> {
        &self.companion_state
    }

    /// Index `j` minimizing `‖w − P_w ŵ_j‖`, ties to the lowest index.
    pub fn nearest_internal(&self, w: &DVector<f64>) -> usize {
        let pw = &self.cert.input_relation.p;
        let mut best = (f64::INFINITY, 0);
        for (j, what) in self.mdp.internal_inputs.iter().enumerate() {
            let d = (w - pw * what).norm();
            if d < best.0 {
                best = (d, j);
            }
        }
        best.1
    }

    /// Input for concrete state `x` under measured internal input `w`.
    pub fn control(&mut self, x: &DVector<f64>, w: &DVector<f64>) -> Result<ControlAction> {
        let what_index = self.nearest_internal(w);
        let u = if self.forfeited {
            0
        } else {
            self.policy
                .choice(self.step, self.companion)
                .ok_or_else(|| Error::Horizon(format!("policy has no entry for step {}", self.step)))?
                .1
        };
        let nuhat = self.mdp.external_inputs[u].clone();
        let what = &self.mdp.internal_inputs[what_index];
        let nu = refine_input(
            &self.cert.interface,
            self.concrete,
            &self.cert.state_relation,
            x,
            &self.companion_state,
            what,
            &nuhat,
        )?;
        self.last = Some((what_index, u));
        Ok(ControlAction { nu, nuhat, what_index })
    }

    /// Advances the companion with the realized noise draw.
    pub fn advance(&mut self, zeta: &DVector<f64>) -> Result<()> {
        let (w, u) = self
            .last
            .take()
            .ok_or_else(|| Error::InvalidArgument("advance called before control".into()))?;
        self.step += 1;
        if self.forfeited {
            return Ok(());
        }
        let raw = self.cert.abstract_system.step(
            &self.companion_state,
            &self.mdp.internal_inputs[w],
            &self.mdp.external_inputs[u],
            zeta,
        )?;
        match self.mdp.partition.pi_x(&raw) {
            Cell::Inside { index, representative } => {
                self.companion = index;
                self.companion_state = representative;
            }
            Cell::Sink => {
                self.companion = self.mdp.sink();
                self.forfeited = true;
            }
        }
        Ok(())
    }

    /// Recovers `ς = R⁺(x' − drift(x, w, ν))` and advances the companion.
    pub fn observe(
        &mut self,
        x: &DVector<f64>,
        w: &DVector<f64>,
        nu: &DVector<f64>,
        x_next: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let r_pinv = self
            .r_pinv
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("controller is not in reconstruction mode".into()))?;
        let zeta = r_pinv * (x_next - self.concrete.drift(x, w, nu));
        self.advance(&zeta)?;
        Ok(zeta)
    }
}

/// One closed-loop run of a refined controller.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedTrace {
    pub outputs: Vec<DVector<f64>>,
    pub in_event: bool,
    pub forfeited: bool,
}

/// Closed-loop run of `concrete` under the refined controller with a
/// constant internal input.
#[allow(clippy::too_many_arguments)]
pub fn run_refined(
    controller: &mut RefinedController<'_>,
    concrete: &NonlinearSystem,
    x0: &DVector<f64>,
    w: &DVector<f64>,
    noise: &NoiseSource,
    tube: &EventTube,
) -> Result<RefinedTrace> {
    let mut x = x0.clone();
    let mut outputs = vec![concrete.output(&x)];
    for k in 0..tube.horizon() {
        let action = controller.control(&x, w)?;
        let zeta = noise.draw(k as u64);
        let next = concrete.step(&x, w, &action.nu, &zeta)?;
        match controller.mode() {
            CompanionMode::CoSimulation => controller.advance(&zeta)?,
            CompanionMode::Reconstruction => {
                controller.observe(&x, w, &action.nu, &next)?;
            }
        }
        x = next;
        outputs.push(concrete.output(&x));
    }
    Ok(RefinedTrace {
        in_event: tube.contains(&outputs),
        forfeited: controller.forfeited(),
        outputs,
    })
}

/// Empirical event frequency of the refined closed loop over `trials`
/// runs; trial `t` uses noise stream `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopEstimate {
    pub trials: usize,
    pub hits: usize,
    pub forfeited: usize,
    pub frequency: f64,
    pub half_width: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn closed_loop_frequency(
    policy: &FinitePolicy,
    mdp: &FiniteMdp,
    concrete: &NonlinearSystem,
    cert: &RelationCertificate,
    initial: (&DVector<f64>, usize),
    w: &DVector<f64>,
    tube: &EventTube,
    mode: CompanionMode,
    trials: usize,
    seed: u64,
) -> Result<ClosedLoopEstimate> {
    let s = concrete.dims().s;
    let traces: Vec<RefinedTrace> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut ctl = RefinedController::new(policy, mdp, concrete, cert, initial.1, mode)?;
            run_refined(
                &mut ctl,
                concrete,
                initial.0,
                w,
                &NoiseSource::new(seed, t as u64, s),
                tube,
            )
        })
        .collect::<Result<_>>()?;
    let hits = traces.iter().filter(|t| t.in_event).count();
    let (_, _, half_width) = wilson_interval(hits as u64, trials as u64, 1.0);
    Ok(ClosedLoopEstimate {
        trials,
        hits,
        forfeited: traces.iter().filter(|t| t.forfeited).count(),
        frequency: hits as f64 / trials.max(1) as f64,
        half_width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abstraction::build_partition;
    use proptest::prelude::*;

    /// MDP on `cells` one-dimensional cells plus the sink, from explicit
    /// rows indexed `[s][w][u]`.
    fn mdp_from_rows(cells: usize, nw: usize, nu: usize, rows: impl Fn(usize, usize, usize) -> Vec<f64>) -> FiniteMdp {
        let partition = build_partition(&[0.0], &[cells as f64], &[1.0]).unwrap();
        let ns = cells + 1;
        let mut transitions = Vec::with_capacity(ns * ns * nw * nu);
        for s in 0..ns {
            for w in 0..nw {
                for u in 0..nu {
                    if s == cells {
                        let mut r = vec![0.0; ns];
                        r[cells] = 1.0;
                        transitions.extend(r);
                    } else {
                        transitions.extend(rows(s, w, u));
                    }
                }
            }
        }
        let mdp = FiniteMdp {
            partition,
            internal_inputs: (0..nw).map(|j| DVector::from_element(1, j as f64)).collect(),
            external_inputs: (0..nu).map(|j| DVector::from_element(1, j as f64)).collect(),
            output_matrix: DMatrix::identity(1, 1),
            initial_state: 0,
            transitions,
            max_std_error: 0.0,
        };
        mdp.validate(1e-12).unwrap();
        mdp
    }

    fn spec(kind: SpecKind, horizon: usize, member: &[bool]) -> SpecHorizon {
        SpecHorizon {
            kind,
            sets: vec![member.to_vec(); horizon + 1],
            internal: InternalChoice::Free,
        }
    }

    #[test]
    fn two_state_chain() {
        // State 0 safe, state 1 (the sink) not; input 0 keeps 0.9, input 1 keeps 0.5.
        let mdp = mdp_from_rows(1, 1, 2, |_, _, u| if u == 0 { vec![0.9, 0.1] } else { vec![0.5, 0.5] });
        let (v, pol) = dp_safety(&mdp, &spec(SpecKind::Safety, 2, &[true, false])).unwrap();
        assert!((v.initial(0) - 0.81).abs() < 1e-15);
        assert_eq!(pol.choice(0, 0), Some((0, 0)));
        assert_eq!(pol.choice(1, 0), Some((0, 0)));
    }

    #[test]
    fn sink_leak_product() {
        let mdp = mdp_from_rows(2, 1, 1, |s, _, _| {
            if s == 0 {
                vec![0.5, 0.499, 0.001]
            } else {
                vec![0.499, 0.5, 0.001]
            }
        });
        let (v, _) = dp_safety(&mdp, &spec(SpecKind::Safety, 10, &[true, true, false])).unwrap();
        assert!((v.initial(0) - 0.999f64.powi(10)).abs() < 1e-14);
    }

    #[test]
    fn all_safe_is_one() {
        let mdp = mdp_from_rows(3, 2, 2, |s, w, u| {
            let mut r = vec![0.0; 4];
            r[(s + w + u) % 3] = 0.25;
            r[(s + 1) % 3] += 0.75;
            r
        });
        let (v, _) = dp_safety(&mdp, &spec(SpecKind::Safety, 4, &[true, true, true, false])).unwrap();
        for k in 0..=4 {
            for s in 0..3 {
                assert_eq!(v.values[k][s], 1.0);
            }
            assert_eq!(v.values[k][3], 0.0);
        }
    }

    #[test]
    fn reach_examples() {
        // Line 0 - 1 - 2 with target 2; each step moves right with prob 0.5.
        let mdp = mdp_from_rows(3, 1, 1, |s, _, _| {
            let mut r = vec![0.0; 4];
            r[s] = 0.5;
            r[(s + 1).min(2)] += 0.5;
            r
        });
        let target = spec(SpecKind::Reachability, 2, &[false, false, true, false]);
        let (v, _) = dp_reach(&mdp, &target).unwrap();
        assert_eq!(v.initial(0), 0.25);
        assert_eq!(v.initial(2), 1.0);
        let nowhere = mdp_from_rows(3, 1, 1, |s, _, _| {
            let mut r = vec![0.0; 4];
            r[if s == 2 { 2 } else { 1 - s.min(1) }] = 1.0;
            r
        });
        let (v, _) = dp_reach(&nowhere, &target).unwrap();
        assert_eq!(v.initial(0), 0.0);
    }

    #[test]
    fn spec_errors() {
        let mdp = mdp_from_rows(1, 1, 1, |_, _, _| vec![1.0, 0.0]);
        assert!(dp_reach(&mdp, &spec(SpecKind::Safety, 1, &[true, false])).is_err());
        assert!(matches!(
            dp_safety(&mdp, &spec(SpecKind::Safety, 1, &[true])),
            Err(Error::Horizon(_))
        ));
        assert!(dp_safety(&mdp, &spec(SpecKind::Safety, 1, &[true, true])).is_err());
        let fixed = SpecHorizon {
            internal: InternalChoice::Fixed(3),
            ..spec(SpecKind::Safety, 1, &[true, false])
        };
        assert!(dp_safety(&mdp, &fixed).is_err());
    }

    #[test]
    fn transfer_clamps() {
        let c = ClosenessCertificate {
            eps: 1.0,
            delta: 0.003,
            horizon: 10,
            gamma: 0.0325,
        };
        assert!((guarantee_transfer(1.0, &c) - 0.9675).abs() < 1e-15);
        assert_eq!(guarantee_transfer(0.02, &c), 0.0);
        let exact = ClosenessCertificate { gamma: 0.0, ..c };
        assert_eq!(guarantee_transfer(0.37, &exact), 0.37);
    }

    #[test]
    fn policy_round_trip_and_errors() {
        let mdp = mdp_from_rows(2, 2, 3, |s, w, u| {
            let mut r = vec![0.0; 3];
            r[(s + w * u) % 2] = 0.875;
            r[2] = 0.125;
            r
        });
        let (_, pol) = dp_safety(&mdp, &spec(SpecKind::Safety, 3, &[true, false, false])).unwrap();
        let text = write_policy(&pol);
        assert_eq!(parse_policy(&text).unwrap(), pol);
        assert_eq!(
            write_policy(
                &dp_safety(&mdp, &spec(SpecKind::Safety, 3, &[true, false, false]))
                    .unwrap()
                    .1
            ),
            text
        );
        assert!(parse_policy("finite_policy 2\n").is_err());
        let truncated: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(parse_policy(&truncated).is_err());
        assert!(matches!(
            parse_policy(&format!("{text}0 0 9 0\n")),
            Err(Error::Parse { .. })
        ));
    }

    fn scalar_system(r: f64) -> NonlinearSystem {
        NonlinearSystem::linear(
            DMatrix::from_element(1, 1, 0.6),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.1),
            DMatrix::from_element(1, 1, r),
        )
        .unwrap()
    }

    fn gridded_mdp(sys: &NonlinearSystem) -> FiniteMdp {
        let part = build_partition(&[-2.0], &[2.0], &[0.5]).unwrap();
        crate::abstraction::build_finite_mdp(
            sys,
            &part,
            &[DVector::from_element(1, 0.0), DVector::from_element(1, 1.0)],
            &[
                DVector::from_element(1, -0.5),
                DVector::from_element(1, 0.0),
                DVector::from_element(1, 0.5),
            ],
            &DVector::from_element(1, 0.25),
            &crate::abstraction::AbstractionSettings::default(),
        )
        .unwrap()
    }

    #[test]
    fn identity_interface_passes_policy_through() {
        let sys = scalar_system(0.3);
        let mdp = gridded_mdp(&sys);
        let cert = crate::guarantees::tests::identity_certificate(&sys, 0.5);
        let tube = EventTube::constant(
            crate::guarantees::OutputBox {
                lower: vec![-1.0],
                upper: vec![1.0],
            },
            6,
        )
        .unwrap();
        let sp = SpecHorizon::from_tube(&mdp, &tube, SpecKind::Safety, InternalChoice::Fixed(0));
        let (_, pol) = dp_safety(&mdp, &sp).unwrap();
        let start = mdp.initial_state;
        let mut ctl = RefinedController::new(&pol, &mdp, &sys, &cert, start, CompanionMode::CoSimulation).unwrap();
        let noise = NoiseSource::new(5, 0, 1);
        let w = DVector::from_element(1, 0.1);
        assert_eq!(ctl.nearest_internal(&w), 0);
        assert_eq!(ctl.nearest_internal(&DVector::from_element(1, 0.9)), 1);
        let mut x = mdp.state(start).unwrap();
        for k in 0..6 {
            let a = ctl.control(&x, &w).unwrap();
            assert_eq!(a.nu, a.nuhat, "step {k}");
            let zeta = noise.draw(k);
            x = sys.step(&x, &w, &a.nu, &zeta).unwrap();
            ctl.advance(&zeta).unwrap();
        }
    }

    #[test]
    fn reconstruction_matches_cosimulation() {
        let sys = scalar_system(0.3);
        let mdp = gridded_mdp(&sys);
        let cert = crate::guarantees::tests::identity_certificate(&sys, 0.5);
        let tube = EventTube::constant(
            crate::guarantees::OutputBox {
                lower: vec![-1.5],
                upper: vec![1.5],
            },
            8,
        )
        .unwrap();
        let sp = SpecHorizon::from_tube(&mdp, &tube, SpecKind::Safety, InternalChoice::Fixed(0));
        let (_, pol) = dp_safety(&mdp, &sp).unwrap();
        let x0 = DVector::from_element(1, 0.25);
        let w = DVector::from_element(1, 0.0);
        let noise = NoiseSource::new(3, 1, 1);
        let mut a =
            RefinedController::new(&pol, &mdp, &sys, &cert, mdp.initial_state, CompanionMode::CoSimulation).unwrap();
        let mut b = RefinedController::new(
            &pol,
            &mdp,
            &sys,
            &cert,
            mdp.initial_state,
            CompanionMode::Reconstruction,
        )
        .unwrap();
        let ta = run_refined(&mut a, &sys, &x0, &w, &noise, &tube).unwrap();
        let tb = run_refined(&mut b, &sys, &x0, &w, &noise, &tube).unwrap();
        assert_eq!(ta.in_event, tb.in_event);
        assert_eq!(a.companion(), b.companion());
        for (ya, yb) in ta.outputs.iter().zip(&tb.outputs) {
            assert!((ya - yb).amax() < 1e-12);
        }
        let rankless = NonlinearSystem {
            r: DMatrix::zeros(1, 1),
            ..sys.clone()
        };
        assert!(RefinedController::new(&pol, &mdp, &rankless, &cert, 0, CompanionMode::Reconstruction).is_err());
        assert!(RefinedController::new(&pol, &mdp, &sys, &cert, mdp.sink(), CompanionMode::CoSimulation).is_err());
    }

    #[test]
    fn sink_hit_is_flagged() {
        // Large noise pushes the companion off a narrow grid.
        let sys = scalar_system(5.0);
        let mdp = gridded_mdp(&sys);
        let cert = crate::guarantees::tests::identity_certificate(&sys, 0.5);
        let tube = EventTube::constant(
            crate::guarantees::OutputBox {
                lower: vec![-2.0],
                upper: vec![2.0],
            },
            5,
        )
        .unwrap();
        let sp = SpecHorizon::from_tube(&mdp, &tube, SpecKind::Safety, InternalChoice::Fixed(0));
        let (_, pol) = dp_safety(&mdp, &sp).unwrap();
        let est = closed_loop_frequency(
            &pol,
            &mdp,
            &sys,
            &cert,
            (&DVector::from_element(1, 0.25), mdp.initial_state),
            &DVector::from_element(1, 0.0),
            &tube,
            CompanionMode::CoSimulation,
            200,
            1,
        )
        .unwrap();
        assert!(est.forfeited > 0);
        let mut ctl =
            RefinedController::new(&pol, &mdp, &sys, &cert, mdp.initial_state, CompanionMode::CoSimulation).unwrap();
        ctl.control(&DVector::from_element(1, 0.25), &DVector::from_element(1, 0.0))
            .unwrap();
        ctl.advance(&DVector::from_element(1, 10.0)).unwrap();
        assert!(ctl.forfeited());
        assert_eq!(ctl.companion(), mdp.sink());
        let a = ctl
            .control(&DVector::from_element(1, 0.25), &DVector::from_element(1, 0.0))
            .unwrap();
        assert_eq!(a.nuhat, mdp.external_inputs[0]);
    }

    #[test]
    fn closed_loop_meets_transferred_bound() {
        // Identical concrete and abstract dynamics on the representatives:
        // the refined loop reproduces the companion, so frequency tracks
        // the abstract value.
        let sys = scalar_system(0.2);
        let mdp = gridded_mdp(&sys);
        let cert = crate::guarantees::tests::identity_certificate(&sys, 0.5);
        let tube = EventTube::constant(
            crate::guarantees::OutputBox {
                lower: vec![-1.0],
                upper: vec![1.0],
            },
            5,
        )
        .unwrap();
        let sp = SpecHorizon::from_tube(&mdp, &tube, SpecKind::Safety, InternalChoice::Fixed(0));
        let (v, pol) = dp_safety(&mdp, &sp).unwrap();
        let x0 = mdp.state(mdp.initial_state).unwrap();
        let est = closed_loop_frequency(
            &pol,
            &mdp,
            &sys,
            &cert,
            (&x0, mdp.initial_state),
            &DVector::from_element(1, 0.0),
            &tube,
            CompanionMode::CoSimulation,
            2000,
            4,
        )
        .unwrap();
        assert!(v.initial(mdp.initial_state) > 0.5);
        assert!(est.frequency >= 0.0 && est.frequency <= 1.0 && est.half_width > 0.0);
    }

    fn enumerate_best(mdp: &FiniteMdp, sp: &SpecHorizon) -> Vec<f64> {
        let ns = mdp.num_states();
        let inputs: Vec<(usize, usize)> = (0..mdp.num_internal())
            .flat_map(|w| (0..mdp.num_external()).map(move |u| (w, u)))
            .collect();
        let slots = ns * sp.horizon();
        let total = inputs.len().pow(slots as u32);
        let mut best = vec![0.0f64; ns];
        for code in 0..total {
            let mut c = code;
            let choices: Vec<Vec<(usize, usize)>> = (0..sp.horizon())
                .map(|_| {
                    (0..ns)
                        .map(|_| {
                            let pick = inputs[c % inputs.len()];
                            c /= inputs.len();
                            pick
                        })
                        .collect()
                })
                .collect();
            let pol = FinitePolicy {
                horizon: sp.horizon(),
                num_states: ns,
                num_internal: mdp.num_internal(),
                num_external: mdp.num_external(),
                choices,
            };
            let v = evaluate_policy(mdp, sp, &pol).unwrap();
            for (b, &x) in best.iter_mut().zip(&v.values[0]) {
                *b = b.max(x);
            }
        }
        best
    }

    fn dyadic_row(ns: usize, raw: &[u8]) -> Vec<f64> {
        // Split 8 eighths across the states.
        let mut counts = vec![0u8; ns];
        for &r in raw.iter().take(8) {
            counts[r as usize % ns] += 1;
        }
        counts.iter().map(|&c| c as f64 / 8.0).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn dp_matches_enumeration(
            cells in 1usize..=3,
            nw in 1usize..=2,
            nu in 1usize..=2,
            horizon in 0usize..=2,
            raw in proptest::collection::vec(any::<u8>(), 8 * 3 * 4),
            members in proptest::collection::vec(any::<bool>(), 3 * 3),
        ) {
            prop_assume!(nw * nu <= 3);
            let ns = cells + 1;
            let mdp = mdp_from_rows(cells, nw, nu, |s, w, u| dyadic_row(ns, &raw[8 * ((s * nw + w) * nu + u)..]));
            for kind in [SpecKind::Safety, SpecKind::Reachability] {
                let sets: Vec<Vec<bool>> = (0..=horizon)
                    .map(|k| (0..ns).map(|s| s < cells && members[(k * cells + s) % members.len()]).collect())
                    .collect();
                let sp = SpecHorizon { kind, sets, internal: InternalChoice::Free };
                let (v, pol) = backward(&mdp, &sp, kind).unwrap();
                prop_assert_eq!(&v.values[0], &enumerate_best(&mdp, &sp));
                prop_assert_eq!(evaluate_policy(&mdp, &sp, &pol).unwrap(), v.clone());
                prop_assert!(v.values.iter().flatten().all(|x| (0.0..=1.0).contains(x)));
            }
        }

        #[test]
        fn safety_monotone_in_safe_set(raw in proptest::collection::vec(any::<u8>(), 8 * 3 * 2), extra in 0usize..3) {
            let mdp = mdp_from_rows(3, 1, 2, |s, _, u| dyadic_row(4, &raw[8 * (s * 2 + u)..]));
            let small = spec(SpecKind::Safety, 3, &[true, extra == 0, false, false]);
            let mut big_set = vec![true, true, false, false];
            big_set[2] = extra != 1;
            let big = spec(SpecKind::Safety, 3, &big_set);
            let (vs, _) = dp_safety(&mdp, &small).unwrap();
            let (vb, _) = dp_safety(&mdp, &big).unwrap();
            for k in 0..=3 {
                for s in 0..4 {
                    prop_assert!(vb.values[k][s] >= vs.values[k][s]);
                }
            }
        }
    }
}
