//! Finite-horizon closeness guarantees and their empirical validation.

use std::fmt;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NoiseSource, NonlinearSystem};
use crate::network::{internal_inputs, ComposedRelation, NetworkTopology, Side};
use crate::relations::{coupled_step, wilson_interval, AbstractSide, CoupledInputs, LiftedCoupling};

/// `γ = 1 − (1 − δ)^(T+1)`, clamped to `[0, 1]`.
pub fn gamma_of_horizon(delta: f64, horizon: usize) -> f64 {
    let steps = horizon as f64 + 1.0;
    (-(steps * (-delta).ln_1p()).exp_m1()).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosenessCertificate {
    pub eps: f64,
    pub delta: f64,
    pub horizon: usize,
    pub gamma: f64,
}

impl ClosenessCertificate {
    pub fn new(eps: f64, delta: f64, horizon: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&delta) || !(eps >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need eps >= 0 and delta in [0, 1], got ({eps}, {delta})"
            )));
        }
        Ok(Self {
            eps,
            delta,
            horizon,
            gamma: gamma_of_horizon(delta, horizon),
        })
    }
}

/// Axis-aligned box in output space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl OutputBox {
    pub fn is_empty(&self) -> bool {
        self.lower.iter().zip(&self.upper).any(|(l, u)| l > u)
    }

    pub fn contains(&self, y: &DVector<f64>) -> bool {
        y.len() == self.lower.len()
            && y.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| l <= v && v <= u)
    }

    fn inflate(&self, by: f64) -> Self {
        Self {
            lower: self.lower.iter().map(|l| l - by).collect(),
            upper: self.upper.iter().map(|u| u + by).collect(),
        }
    }
}

/// Event `{y(k) ∈ box_k for k = 0..T}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventTube {
    pub boxes: Vec<OutputBox>,
}

impl EventTube {
    pub fn new(boxes: Vec<OutputBox>) -> Result<Self> {
        for (k, b) in boxes.iter().enumerate() {
            if b.lower.len() != b.upper.len() {
                return Err(Error::dim("tube box bounds", b.lower.len(), b.upper.len()));
            }
            if b.is_empty() {
                return Err(Error::InvalidArgument(format!("tube box {k} has lower > upper")));
            }
        }
        Ok(Self { boxes })
    }

    /// The same box repeated for steps `0..=horizon`.
    pub fn constant(b: OutputBox, horizon: usize) -> Result<Self> {
        Self::new(vec![b; horizon + 1])
    }

    pub fn horizon(&self) -> usize {
        self.boxes.len().saturating_sub(1)
    }

    /// True when some box has collapsed; the event is then empty.
    pub fn is_empty(&self) -> bool {
        self.boxes.iter().any(OutputBox::is_empty)
    }

    pub fn contains(&self, outputs: &[DVector<f64>]) -> bool {
        !self.is_empty()
            && outputs.len() == self.boxes.len()
            && self.boxes.iter().zip(outputs).all(|(b, y)| b.contains(y))
    }

    /// Superset of the Euclidean ε-expansion.
    pub fn expand(&self, eps: f64) -> Self {
        Self {
            boxes: self.boxes.iter().map(|b| b.inflate(eps)).collect(),
        }
    }

    /// Subset of the Euclidean ε-contraction; over-contracted boxes make the
    /// event empty.
    pub fn contract(&self, eps: f64) -> Self {
        Self {
            boxes: self.boxes.iter().map(|b| b.inflate(-eps)).collect(),
        }
    }
}

/// Bounds on the concrete event probability from the abstract probabilities
/// of the contracted and expanded events.
pub fn bound_event_probability(
    cert: &ClosenessCertificate,
    prob_contracted: f64,
    prob_expanded: f64,
) -> Result<(f64, f64)> {
    for p in [prob_contracted, prob_expanded] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
        }
    }
    let lo = (prob_contracted - cert.gamma).max(0.0);
    let hi = (prob_expanded + cert.gamma).min(1.0);
    if lo > hi {
        return Err(Error::InvalidArgument(format!(
            "contracted-event probability {prob_contracted} exceeds expanded-event probability {prob_expanded} by more than 2 gamma"
        )));
    }
    Ok((lo, hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoStepBound {
    pub first: (f64, f64),
    pub second: (f64, f64),
}

/// `(ε1 + ε2, min(1, γ1 + γ2))`.
pub fn two_step_union_bound(b: &TwoStepBound) -> (f64, f64) {
    (b.first.0 + b.second.0, (b.first.1 + b.second.1).min(1.0))
}

/// Normal quantile of the Wilson intervals in validation reports.
pub const WILSON_Z: f64 = 1.0;
/// Width of the acceptance band in Wilson half-widths.
pub const BAND_WIDTHS: f64 = 3.0;
pub const MIN_TRIALS: usize = 100;

/// One line of a validation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetric {
    pub name: String,
    pub theoretical: (f64, f64),
    pub empirical: f64,
    pub interval: (f64, f64),
    pub passed: bool,
}

impl fmt::Display for ValidationMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} theoretical=[{:.6}, {:.6}] empirical={:.6} interval=[{:.6}, {:.6}] verdict={}",
            self.name,
            self.theoretical.0,
            self.theoretical.1,
            self.empirical,
            self.interval.0,
            self.interval.1,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub trials: usize,
    pub horizon: usize,
    pub seed: u64,
    pub metrics: Vec<ValidationMetric>,
    /// Trials whose finite companion fell into the sink.
    pub sink_hits: usize,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.metrics.iter().all(|m| m.passed)
    }

    pub fn metric(&self, name: &str) -> Option<&ValidationMetric> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "validation trials={} horizon={} seed={} sink_hits={}",
            self.trials, self.horizon, self.seed, self.sink_hits
        )?;
        for m in &self.metrics {
            writeln!(f, "{m}")?;
        }
        Ok(())
    }
}

/// A network of concrete subsystems paired with their abstract models.
pub struct NetworkPair<'a> {
    pub concrete: &'a [NonlinearSystem],
    pub abstract_models: Vec<AbstractSide<'a>>,
    pub topology: &'a NetworkTopology,
}

/// Abstract input chosen by subsystem `i` at step `k` in abstract state `x̂`.
pub type AbstractPolicy<'a> = dyn Fn(usize, usize, &DVector<f64>) -> DVector<f64> + Sync + 'a;

#[derive(Debug, Clone, Copy, PartialEq)]
struct TrialOutcome {
    retained: bool,
    max_deviation: f64,
    concrete_in_event: bool,
    abstract_in_contracted: bool,
    abstract_in_expanded: bool,
    sink_hit: bool,
}

pub const METRIC_RETENTION: &str = "relation_retention";
pub const METRIC_DEVIATION: &str = "max_output_deviation";
pub const METRIC_EVENT: &str = "event_probability";

/// Runs `trials` coupled shared-noise simulations of the network pair from
/// the given initial states, refining abstract inputs through each
/// certificate's interface, and compares the empirical frequencies with the
/// theoretical guarantees. Trial `t` uses noise streams
/// `t * N + i`, so results do not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_validate(
    pair: &NetworkPair<'_>,
    relation: &ComposedRelation,
    initial: &[(DVector<f64>, DVector<f64>)],
    policy: &AbstractPolicy<'_>,
    tube: &EventTube,
    trials: usize,
    seed: u64,
) -> Result<ValidationReport> {
    if trials < MIN_TRIALS {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_TRIALS} trials, got {trials}"
        )));
    }
    let n_sub = pair.concrete.len();
    if pair.abstract_models.len() != n_sub || relation.certificates.len() != n_sub || initial.len() != n_sub {
        return Err(Error::InvalidArgument(
            "network pair, relation and initial states disagree on the subsystem count".into(),
        ));
    }
    let horizon = tube.horizon();
    let p_dims: Vec<usize> = pair.concrete.iter().map(|s| s.dims().p).collect();
    let phat_dims: Vec<usize> = pair.abstract_models.iter().map(|a| a.reduced().dims().p).collect();

    let run_trial = |t: usize| -> Result<TrialOutcome> {
        let mut xs: Vec<DVector<f64>> = initial.iter().map(|(x, _)| x.clone()).collect();
        let mut xhats: Vec<DVector<f64>> = initial.iter().map(|(_, xh)| xh.clone()).collect();
        let sources: Vec<NoiseSource> = pair
            .concrete
            .iter()
            .enumerate()
            .map(|(i, s)| NoiseSource::new(seed, (t * n_sub + i) as u64, s.dims().s))
            .collect();
        let outputs = |xs: &[DVector<f64>], xhats: &[DVector<f64>]| -> (DVector<f64>, DVector<f64>) {
            let y: Vec<f64> = pair
                .concrete
                .iter()
                .zip(xs)
                .flat_map(|(s, x)| (&s.c * x).iter().copied().collect::<Vec<_>>())
                .collect();
            let yh: Vec<f64> = relation
                .certificates
                .iter()
                .zip(xhats)
                .flat_map(|(c, xh)| (&c.abstract_system.c * xh).iter().copied().collect::<Vec<_>>())
                .collect();
            (DVector::from_vec(y), DVector::from_vec(yh))
        };

        let mut retained = relation.contains(&xs, &xhats)?;
        let mut sink_hit = false;
        let (y0, yh0) = outputs(&xs, &xhats);
        let mut max_deviation = (&y0 - &yh0).norm();
        let mut ys = vec![y0];
        let mut yhs = vec![yh0];
        for k in 0..horizon {
            let ws = internal_inputs(pair.topology, &xs, &p_dims, Side::Concrete);
            let whats = internal_inputs(pair.topology, &xhats, &phat_dims, Side::Abstract);
            let mut next_x = Vec::with_capacity(n_sub);
            let mut next_xh = Vec::with_capacity(n_sub);
            for i in 0..n_sub {
                let cert = &relation.certificates[i];
                let nuhat = policy(i, k, &xhats[i]);
                let step = coupled_step(
                    &pair.concrete[i],
                    pair.abstract_models[i],
                    &cert.interface,
                    &cert.state_relation,
                    &LiftedCoupling::SharedNoise,
                    &xs[i],
                    &xhats[i],
                    CoupledInputs {
                        w: &ws[i],
                        what: &whats[i],
                        nuhat: &nuhat,
                    },
                    &sources[i],
                    k as u64,
                )?;
                next_x.push(step.x_next);
                match step.xhat_next {
                    Some(xh) => next_xh.push(xh),
                    None => {
                        sink_hit = true;
                        next_xh.push(xhats[i].clone());
                    }
                }
            }
            xs = next_x;
            xhats = next_xh;
            retained = retained && !sink_hit && relation.contains(&xs, &xhats)?;
            let (y, yh) = outputs(&xs, &xhats);
            max_deviation = max_deviation.max((&y - &yh).norm());
            ys.push(y);
            yhs.push(yh);
        }
        Ok(TrialOutcome {
            retained,
            max_deviation,
            concrete_in_event: tube.contains(&ys),
            abstract_in_contracted: !sink_hit && tube.contract(relation.eps).contains(&yhs),
            abstract_in_expanded: !sink_hit && tube.expand(relation.eps).contains(&yhs),
            sink_hit,
        })
    };

    let outcomes: Vec<TrialOutcome> = (0..trials).into_par_iter().map(run_trial).collect::<Result<_>>()?;

    let count = |f: fn(&TrialOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count() as u64;
    let n = trials as u64;
    let retained = count(|o| o.retained);
    let bound = 1.0 - gamma_of_horizon(relation.delta, horizon);
    let (lo, hi, half) = wilson_interval(retained, n, WILSON_Z);
    let freq = retained as f64 / trials as f64;
    let mut metrics = vec![ValidationMetric {
        name: METRIC_RETENTION.into(),
        theoretical: (bound, 1.0),
        empirical: freq,
        interval: (lo, hi),
        passed: freq >= bound - BAND_WIDTHS * half,
    }];

    let max_dev = outcomes
        .iter()
        .filter(|o| o.retained)
        .map(|o| o.max_deviation)
        .fold(0.0, f64::max);
    metrics.push(ValidationMetric {
        name: METRIC_DEVIATION.into(),
        theoretical: (0.0, relation.eps),
        empirical: max_dev,
        interval: (0.0, max_dev),
        passed: max_dev <= relation.eps,
    });

    let cert = ClosenessCertificate::new(relation.eps, relation.delta, horizon)?;
    let p_contract = count(|o| o.abstract_in_contracted) as f64 / trials as f64;
    let p_expand = count(|o| o.abstract_in_expanded) as f64 / trials as f64;
    let (ev_lo, ev_hi) = bound_event_probability(&cert, p_contract, p_expand)?;
    let hits = count(|o| o.concrete_in_event);
    let (elo, ehi, ehalf) = wilson_interval(hits, n, WILSON_Z);
    let efreq = hits as f64 / trials as f64;
    metrics.push(ValidationMetric {
        name: METRIC_EVENT.into(),
        theoretical: (ev_lo, ev_hi),
        empirical: efreq,
        interval: (elo, ehi),
        passed: efreq >= ev_lo - BAND_WIDTHS * ehalf && efreq <= ev_hi + BAND_WIDTHS * ehalf,
    });

    Ok(ValidationReport {
        trials,
        horizon,
        seed,
        metrics,
        sink_hits: outcomes.iter().filter(|o| o.sink_hit).count(),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::certification::{
        CertificationPath, CertificationReport, ChanceConstraintParams, PsdCheck, RelationCertificate, Tolerances,
    };
    use crate::model::SlopeCheck;
    use crate::network::CompositionalityCheck;
    use crate::relations::{InterfaceParams, QuadraticRelation};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    #[test]
    fn gamma_values() {
        assert_eq!(gamma_of_horizon(0.001, 0), 0.001);
        assert!((gamma_of_horizon(0.003, 10) - (1.0 - 0.997f64.powi(11))).abs() < 1e-15);
        assert!((gamma_of_horizon(0.003, 10) - 0.032_509_4).abs() < 1e-7);
        assert!((gamma_of_horizon(0.005, 5) - 0.029_627_5).abs() < 1e-7);
        assert_eq!(gamma_of_horizon(0.0, 10), 0.0);
        assert_eq!(gamma_of_horizon(1.0, 3), 1.0);
    }

    fn unit_box() -> OutputBox {
        OutputBox {
            lower: vec![0.0],
            upper: vec![1.0],
        }
    }

    #[test]
    fn tube_expand_contract() {
        let tube = EventTube::constant(unit_box(), 2).unwrap();
        assert_eq!(tube.expand(0.0), tube);
        assert_eq!(tube.contract(0.0), tube);
        let e = tube.expand(0.25);
        assert_eq!(
            e.boxes[0],
            OutputBox {
                lower: vec![-0.25],
                upper: vec![1.25]
            }
        );
        let c = tube.contract(0.25);
        assert_eq!(
            c.boxes[1],
            OutputBox {
                lower: vec![0.25],
                upper: vec![0.75]
            }
        );
        let thin = EventTube::constant(
            OutputBox {
                lower: vec![0.0],
                upper: vec![0.4],
            },
            1,
        )
        .unwrap();
        assert!(thin.contract(0.25).is_empty());
        assert!(!thin
            .contract(0.25)
            .contains(&[DVector::from_element(1, 0.2), DVector::from_element(1, 0.2)]));
    }

    #[test]
    fn event_bounds() {
        let exact = ClosenessCertificate::new(0.0, 0.0, 5).unwrap();
        assert_eq!(bound_event_probability(&exact, 0.7, 0.7).unwrap(), (0.7, 0.7));
        let c = ClosenessCertificate {
            eps: 1.0,
            delta: 0.003,
            horizon: 10,
            gamma: 0.0325,
        };
        let (lo, _) = bound_event_probability(&c, 0.99, 1.0).unwrap();
        assert!((lo - 0.9575).abs() < 1e-12);
        let c = ClosenessCertificate {
            eps: 1.0,
            delta: 0.003,
            horizon: 10,
            gamma: 0.05,
        };
        assert_eq!(bound_event_probability(&c, 0.01, 0.5).unwrap().0, 0.0);
        assert!(bound_event_probability(&c, 1.2, 0.5).is_err());
    }

    #[test]
    fn two_step() {
        let (e, g) = two_step_union_bound(&TwoStepBound {
            first: (15.0, 0.8794),
            second: (5.0, 0.0117),
        });
        assert_eq!(e, 20.0);
        assert!((g - 0.8911).abs() < 1e-15);
        assert_eq!(
            two_step_union_bound(&TwoStepBound {
                first: (3.0, 0.0),
                second: (0.0, 0.0)
            }),
            (3.0, 0.0)
        );
        assert_eq!(
            two_step_union_bound(&TwoStepBound {
                first: (1.0, 0.7),
                second: (1.0, 0.6)
            })
            .1,
            1.0
        );
    }

    pub(crate) fn identity_certificate(sys: &NonlinearSystem, eps: f64) -> RelationCertificate {
        let d = sys.dims();
        RelationCertificate {
            eps,
            delta: 0.01,
            lambda: 1.0,
            state_relation: QuadraticRelation::new(DMatrix::identity(d.n, d.n), DMatrix::identity(d.n, d.n), eps)
                .unwrap(),
            input_relation: QuadraticRelation::new(DMatrix::identity(d.p, d.p), DMatrix::identity(d.p, d.p), 0.1)
                .unwrap(),
            interface: InterfaceParams::passthrough(d.m, d.n, d.n, d.p),
            abstract_system: sys.clone(),
            chance: ChanceConstraintParams::derive(0.01, 0.25, 0.1, 0.0, 1).unwrap(),
            tolerances: Tolerances::default(),
            evidence: CertificationReport {
                path: CertificationPath::Supplied,
                conditions: vec![],
                lambda: 1.0,
                sprocedure: PsdCheck {
                    passed: true,
                    min_eigenvalue: 0.0,
                    threshold: 1e-8,
                },
                slope_check: SlopeCheck {
                    min_observed: 0.0,
                    max_observed: 0.0,
                    within_declared: true,
                },
                flags: vec![],
                fallback: None,
            },
        }
    }

    #[test]
    fn identical_systems_always_retain() {
        let sys = NonlinearSystem::linear(
            DMatrix::from_element(1, 1, 0.8),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.0),
            DMatrix::from_element(1, 1, 0.5),
        )
        .unwrap();
        let systems = vec![sys.clone()];
        let topo = NetworkTopology::default();
        let relation = ComposedRelation {
            eps: 0.1,
            delta: 0.01,
            certificates: vec![identity_certificate(&sys, 0.1)],
            evidence: vec![CompositionalityCheck {
                receiver: 0,
                sources: vec![],
                lambda: 0.0,
                check: PsdCheck {
                    passed: true,
                    min_eigenvalue: 0.0,
                    threshold: 1e-8,
                },
            }],
        };
        let pair = NetworkPair {
            concrete: &systems,
            abstract_models: vec![AbstractSide::Reduced(&sys)],
            topology: &topo,
        };
        let tube = EventTube::constant(
            OutputBox {
                lower: vec![-1.0],
                upper: vec![1.0],
            },
            5,
        )
        .unwrap();
        let init = [(DVector::from_element(1, 0.2), DVector::from_element(1, 0.2))];
        let policy = |_: usize, k: usize, _: &DVector<f64>| {
            DVector::from_element(1, if k.is_multiple_of(2) { 0.1 } else { -0.1 })
        };
        let report = monte_carlo_validate(&pair, &relation, &init, &policy, &tube, 500, 9).unwrap();
        let ret = report.metric(METRIC_RETENTION).unwrap();
        assert_eq!(ret.empirical, 1.0);
        assert_eq!(report.metric(METRIC_DEVIATION).unwrap().empirical, 0.0);
        assert!(report.passed(), "{report}");
        assert!(monte_carlo_validate(&pair, &relation, &init, &policy, &tube, 99, 9).is_err());
        // Same seed, same report.
        assert_eq!(
            monte_carlo_validate(&pair, &relation, &init, &policy, &tube, 500, 9).unwrap(),
            report
        );
    }

    proptest! {
        #[test]
        fn gamma_monotone(d1 in 0.0f64..0.2, d2 in 0.0f64..0.2, t1 in 0usize..50, t2 in 0usize..50) {
            let (dl, dh) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let (tl, th) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(gamma_of_horizon(dl, tl) <= gamma_of_horizon(dh, th) + 1e-16);
            prop_assert!((gamma_of_horizon(d1, 0) - d1).abs() <= 1e-16);
        }

        #[test]
        fn tube_galois_inclusions(l in -5.0f64..5.0, w in 0.0f64..5.0, eps in 0.0f64..2.0, probe in -10.0f64..10.0) {
            let tube = EventTube::constant(OutputBox { lower: vec![l], upper: vec![l + w] }, 0).unwrap();
            let y = [DVector::from_element(1, probe)];
            // contract(expand(A)) ⊇ A and expand(contract(A)) ⊆ A, up to one rounding.
            let slack = 1e-12;
            if tube.contains(&y) && probe > l + slack && probe < l + w - slack {
                prop_assert!(tube.expand(eps).contract(eps).contains(&y));
            }
            let inner = tube.contract(eps).expand(eps);
            if inner.contains(&y) && !tube.contract(eps).is_empty() {
                prop_assert!(probe >= l - slack && probe <= l + w + slack);
            }
        }

        #[test]
        fn event_bounds_ordered(pc in 0.0f64..1.0, extra in 0.0f64..1.0, delta in 0.0f64..0.1, t in 0usize..20) {
            let pe = (pc + extra).min(1.0);
            let c = ClosenessCertificate::new(1.0, delta, t).unwrap();
            let (lo, hi) = bound_event_probability(&c, pc, pe).unwrap();
            prop_assert!(0.0 <= lo && lo <= hi && hi <= 1.0);
        }
    }
}
