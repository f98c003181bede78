//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use simrel_cli::model_file::{NetworkModelFile, Overrides};
use simrel_cli::pipeline::without_timing_lines;
use simrel_cli::run_args;
use simrel_core::abstraction::{build_finite_mdp, build_partition, AbstractionSettings, FiniteMdp, TransitionSettings};
use simrel_core::certification::chi_square::{chi_square_cdf, chi_square_inverse_cdf};
use simrel_core::certification::{certify_relation, CertificationReport};
use simrel_core::guarantees::{
    gamma_of_horizon, monte_carlo_validate, two_step_union_bound, EventTube, NetworkPair, OutputBox, TwoStepBound,
    BAND_WIDTHS, METRIC_DEVIATION, METRIC_RETENTION, WILSON_Z,
};
use simrel_core::network::{check_compositionality_condition, compose_relations, composed_delta, NetworkTopology};
use simrel_core::relations::{wilson_interval, AbstractSide};
use simrel_core::synthesis::{dp_reach, dp_safety, InternalChoice, SpecHorizon, SpecKind};
use simrel_core::Error as CoreError;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../cli/fixtures").join(name)
}

fn load(name: &str) -> NetworkModelFile {
    NetworkModelFile::load(&fixture(name)).expect("fixture parses")
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
}

fn describe_attempt(r: &CertificationReport) -> String {
    format!(
        "{:?} lambda={:.4} min_eig={:.4e} floor={:.1e} failed=[{}]",
        r.path,
        r.lambda,
        r.sprocedure.min_eigenvalue,
        -r.sprocedure.threshold,
        r.failed_conditions().join("; ")
    )
}

fn published_sprocedure() -> Outcome {
    let model = load("ring_published.json");
    let sub = &model.subsystems()[0];
    let settings = model.certification_settings(&sub.entry.certification, &Overrides::default());
    let start = Instant::now();
    let result = certify_relation(&sub.entry.concrete, &sub.entry.reduced, &sub.entry.candidate, &settings);
    let secs = start.elapsed().as_secs_f64();
    match result {
        Ok(cert) => Outcome::new(
            secs < 1.0,
            format!("certified via {} in {secs:.3}s", describe_attempt(&cert.evidence)),
        ),
        Err(CoreError::CertificationFailed(report)) => {
            let mut detail = format!("supplied: {}", describe_attempt(&report));
            match &report.fallback {
                Some(fb) => detail.push_str(&format!("; re-derived: {}", describe_attempt(fb))),
                None => detail.push_str("; no re-derived attempt"),
            }
            Outcome::new(false, format!("{detail}; {secs:.3}s"))
        }
        Err(e) => Outcome::new(false, format!("error: {e}")),
    }
}

fn published_compositionality() -> Outcome {
    let model = load("ring_published.json");
    let subs = model.subsystems();
    let relations: Vec<_> = subs.iter().map(|s| s.entry.candidate.state.clone()).collect();
    let tol = model.tol_psd(&Overrides::default());
    let start = Instant::now();
    let mut worst = f64::INFINITY;
    let mut all = true;
    for (i, s) in subs.iter().enumerate() {
        match check_compositionality_condition(
            &model.topology,
            &relations,
            i,
            &s.entry.candidate.input,
            model.compositionality.lambda,
            tol,
        ) {
            Ok(c) => {
                all &= c.check.passed;
                worst = worst.min(c.check.min_eigenvalue);
            }
            Err(e) => return Outcome::new(false, format!("receiver {i}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        all && secs < 0.1,
        format!(
            "lambda={:?} min_eig={worst:.4e} tol={tol:.0e} in {secs:.4}s",
            model.compositionality.lambda
        ),
    )
}

fn composition_formulas() -> Outcome {
    let model = load("ring_certifiable.json");
    let sub = &model.subsystems()[0];
    let settings = model.certification_settings(&sub.entry.certification, &Overrides::default());
    let mut cert = match certify_relation(&sub.entry.concrete, &sub.entry.reduced, &sub.entry.candidate, &settings) {
        Ok(c) => c,
        Err(e) => return Outcome::new(false, format!("template certificate: {e}")),
    };
    cert.eps = 1.25;
    cert.delta = 0.001;
    let certs = vec![cert; 4];
    let empty = NetworkTopology { edges: vec![] };
    let evidence: Vec<_> = (0..4)
        .map(|i| {
            let rels: Vec<_> = certs.iter().map(|c| c.state_relation.clone()).collect();
            check_compositionality_condition(
                &empty,
                &rels,
                i,
                &certs[i].input_relation,
                model.compositionality.lambda,
                1e-6,
            )
            .ok()
        })
        .collect();
    let composed = match compose_relations(&certs, &evidence) {
        Ok(c) => c,
        Err(e) => return Outcome::new(false, format!("compose: {e}")),
    };
    // 1 - 0.999^4 = 1 - 996005996001 / 10^12 exactly.
    let delta_exact = (1_000_000_000_000u64 - 999u64.pow(4)) as f64 / 1e12;
    let (e_eps, e_delta) = (rel_err(composed.eps, 5.0), rel_err(composed.delta, delta_exact));
    let direct = rel_err(composed_delta(&[0.001; 4]), delta_exact);
    Outcome::new(
        e_eps <= 1e-12 && e_delta <= 1e-12 && direct <= 1e-12,
        format!(
            "eps={:.6} delta={:.12} (exact {delta_exact:.12}, rel err {e_delta:.1e})",
            composed.eps, composed.delta
        ),
    )
}

fn closeness_constants() -> Outcome {
    let cases = [(0.003, 10, 0.0324888), (0.005, 5, 0.0296274)];
    let mut ok = true;
    let mut parts = Vec::new();
    for (delta, horizon, published) in cases {
        let got = gamma_of_horizon(delta, horizon);
        let oracle = 1.0 - (1.0 - delta).powi(horizon as i32 + 1);
        let pass = (got - published).abs() <= 1e-6 && (got - oracle).abs() <= 1e-15;
        ok &= pass;
        parts.push(format!(
            "gamma({delta}, {horizon})={got:.7} published={published} oracle={oracle:.7} {}",
            if pass { "ok" } else { "off" }
        ));
    }
    Outcome::new(ok, parts.join("; "))
}

fn two_step() -> Outcome {
    let (eps, gamma) = two_step_union_bound(&TwoStepBound {
        first: (15.0, 0.8794),
        second: (5.0, 0.0117),
    });
    let unified = gamma_of_horizon(0.003, 10);
    Outcome::new(
        eps == 20.0 && gamma == 0.8911 && unified < gamma,
        format!("({eps}, {gamma}) vs unified gamma {unified:.4} at eps 20"),
    )
}

fn chi_square() -> Outcome {
    let q = match chi_square_inverse_cdf(2, 0.999) {
        Ok(q) => q,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let closed = -2.0 * 0.001f64.ln();
    let mut worst: f64 = 0.0;
    for dof in [1, 2, 3, 5] {
        for p in [0.5, 0.9, 0.999] {
            let x = chi_square_inverse_cdf(dof, p).unwrap_or(f64::NAN);
            worst = worst.max((chi_square_cdf(dof, x) - p).abs());
        }
    }
    Outcome::new(
        (q - 13.815511).abs() <= 1e-5 && (q - closed).abs() <= 1e-9 && worst <= 1e-8,
        format!("quantile={q:.9} closed form={closed:.9} worst round trip={worst:.1e}"),
    )
}

fn abstraction_soundness() -> Outcome {
    let model = load("ring_published.json");
    let absr = &model.subsystems()[0].entry.reduced;
    let ab = &model.abstraction;
    let start = Instant::now();
    let part = match build_partition(&ab.lower, &ab.upper, &ab.widths) {
        Ok(p) => p,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let settings = AbstractionSettings {
        transition: TransitionSettings::default(),
        ..AbstractionSettings::default()
    };
    let ws = model.internal_inputs();
    let us = model.external_inputs();
    let x0 = DVector::from_element(1, 0.0);
    let mdp = match build_finite_mdp(absr, &part, &ws, &us, &x0, &settings) {
        Ok(m) => m,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let defect = mdp.max_row_defect();

    // Independent oracle: sample the scalar successor directly.
    const SAMPLES: usize = 100_000;
    let (a, b, d, e, f, r) = (
        absr.a[(0, 0)],
        absr.b[(0, 0)],
        absr.d[(0, 0)],
        absr.e[(0, 0)],
        absr.f[(0, 0)],
        absr.r[(0, 0)],
    );
    let (lo, hi, width) = (ab.lower[0], ab.upper[0], ab.widths[0]);
    let cells = part.num_cells();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_z: f64 = 0.0;
    let mut outside = 0usize;
    let mut entries = 0usize;
    for s in 0..cells {
        let xhat = lo + (s as f64 + 0.5) * width;
        for (wi, w) in ws.iter().enumerate() {
            for (ui, u) in us.iter().enumerate() {
                let mean = a * xhat + e * (f * xhat).sin() + d * w[0] + b * u[0];
                let mut counts = vec![0usize; cells + 1];
                for _ in 0..SAMPLES {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let next = mean + r * z;
                    let t = if (lo..=hi).contains(&next) {
                        (((next - lo) / width).floor() as usize).min(cells - 1)
                    } else {
                        cells
                    };
                    counts[t] += 1;
                }
                for (t, &c) in counts.iter().enumerate() {
                    let p = mdp.prob(s, wi, ui, t);
                    let freq = c as f64 / SAMPLES as f64;
                    let se = (p * (1.0 - p) / SAMPLES as f64).sqrt().max(1.0 / SAMPLES as f64);
                    let z = (freq - p).abs() / se;
                    entries += 1;
                    worst_z = worst_z.max(z);
                    if z > 4.0 {
                        outside += 1;
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        defect <= 1e-9 && outside == 0 && secs < 30.0,
        format!(
            "{} rows, max row defect={defect:.1e}, {outside}/{entries} entries beyond 4 SE (worst {worst_z:.2}), {secs:.1}s",
            cells * ws.len() * us.len()
        ),
    )
}

fn relation_retention() -> Outcome {
    let model = load("ring_certifiable.json");
    let sub = &model.subsystems()[0];
    let e = sub.entry;
    let settings = model.certification_settings(&e.certification, &Overrides::default());
    let start = Instant::now();
    let cert = match certify_relation(&e.concrete, &e.reduced, &e.candidate, &settings) {
        Ok(c) => c,
        Err(err) => return Outcome::new(false, format!("certification: {err}")),
    };
    let topology = NetworkTopology { edges: vec![] };
    let check = check_compositionality_condition(
        &topology,
        std::slice::from_ref(&cert.state_relation),
        0,
        &cert.input_relation,
        model.compositionality.lambda,
        1e-6,
    );
    let relation = match compose_relations(std::slice::from_ref(&cert), &[check.ok()]) {
        Ok(r) => r,
        Err(err) => return Outcome::new(false, format!("compose: {err}")),
    };
    let concrete = vec![e.concrete.clone()];
    let pair = NetworkPair {
        concrete: &concrete,
        abstract_models: vec![AbstractSide::Reduced(&cert.abstract_system)],
        topology: &topology,
    };
    let initial = vec![(
        DVector::from_vec(e.initial_state.clone()),
        DVector::from_vec(e.initial_abstract_state.clone()),
    )];
    let nuhat = DVector::from_vec(model.validation.abstract_input.clone());
    let policy = move |_: usize, _: usize, _: &DVector<f64>| nuhat.clone();
    const HORIZON: usize = 10;
    const TRIALS: usize = 10_000;
    let q = e.reduced.c.nrows();
    let tube = EventTube::constant(
        OutputBox {
            lower: vec![-1.0; q],
            upper: vec![1.0; q],
        },
        HORIZON,
    )
    .expect("nonempty box");
    let report = match monte_carlo_validate(&pair, &relation, &initial, &policy, &tube, TRIALS, 7) {
        Ok(r) => r,
        Err(err) => return Outcome::new(false, format!("validation: {err}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let retention = report.metric(METRIC_RETENTION).map_or(f64::NAN, |m| m.empirical);
    let deviation = report.metric(METRIC_DEVIATION).map_or(f64::NAN, |m| m.empirical);
    let kept = (retention * TRIALS as f64).round() as u64;
    let (_, _, half) = wilson_interval(kept, TRIALS as u64, WILSON_Z);
    let floor = (1.0 - cert.delta).powi(HORIZON as i32 + 1) - BAND_WIDTHS * half;
    Outcome::new(
        retention >= floor && deviation <= cert.eps && secs < 60.0,
        format!(
            "retention={retention:.4} >= {floor:.4}? max deviation={deviation:.3e} <= eps={}; {secs:.1}s",
            cert.eps
        ),
    )
}

fn small_mdp(rng: &mut ChaCha8Rng, cells: usize, nw: usize, nu: usize) -> FiniteMdp {
    let partition = build_partition(&[0.0], &[cells as f64], &[1.0]).unwrap();
    let ns = cells + 1;
    let mut transitions = Vec::with_capacity(ns * ns * nw * nu);
    for s in 0..ns {
        for _ in 0..nw * nu {
            let mut row = vec![0.0; ns];
            if s == cells {
                row[cells] = 1.0;
            } else {
                for _ in 0..8 {
                    row[rng.random_range(0..ns)] += 0.125;
                }
            }
            transitions.extend(row);
        }
    }
    FiniteMdp {
        partition,
        internal_inputs: (0..nw).map(|j| DVector::from_element(1, j as f64)).collect(),
        external_inputs: (0..nu).map(|j| DVector::from_element(1, j as f64)).collect(),
        output_matrix: DMatrix::identity(1, 1),
        initial_state: 0,
        transitions,
        max_std_error: 0.0,
    }
}

/// Best step-0 value per state over every Markov deterministic policy.
fn enumerate_values(mdp: &FiniteMdp, spec: &SpecHorizon) -> Vec<f64> {
    let ns = mdp.num_states();
    let cells = ns - 1;
    let horizon = spec.sets.len() - 1;
    let actions: Vec<(usize, usize)> = match spec.internal {
        InternalChoice::Free => (0..mdp.num_internal())
            .flat_map(|w| (0..mdp.num_external()).map(move |u| (w, u)))
            .collect(),
        InternalChoice::Fixed(w) => (0..mdp.num_external()).map(|u| (w, u)).collect(),
    };
    let slots = cells * horizon;
    let total = actions.len().pow(slots as u32);
    let mut best = vec![0.0f64; ns];
    for code in 0..total {
        let mut c = code;
        let mut pick = vec![vec![(0, 0); cells]; horizon];
        for row in pick.iter_mut() {
            for slot in row.iter_mut() {
                *slot = actions[c % actions.len()];
                c /= actions.len();
            }
        }
        let member = |k: usize, s: usize| spec.sets[k][s];
        let mut v: Vec<f64> = (0..ns).map(|s| if member(horizon, s) { 1.0 } else { 0.0 }).collect();
        for k in (0..horizon).rev() {
            let next: Vec<f64> = (0..ns)
                .map(|s| {
                    let inside = member(k, s);
                    match spec.kind {
                        SpecKind::Safety if !inside => return 0.0,
                        SpecKind::Reachability if inside => return 1.0,
                        _ => {}
                    }
                    if s == cells {
                        return 0.0;
                    }
                    let (w, u) = pick[k][s];
                    (0..ns).map(|t| mdp.prob(s, w, u, t) * v[t]).sum()
                })
                .collect();
            v = next;
        }
        for s in 0..ns {
            best[s] = best[s].max(v[s]);
        }
    }
    best
}

fn dp_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let shapes = [(1, 1), (1, 2), (1, 3), (2, 1), (3, 1)];
    let mut cases = 0usize;
    let mut mismatches = Vec::new();
    for cells in 1..=3 {
        for &(nw, nu) in &shapes {
            for horizon in 0..=3 {
                for rep in 0..4 {
                    let mdp = small_mdp(&mut rng, cells, nw, nu);
                    let internal = if nw > 1 && rep % 2 == 1 {
                        InternalChoice::Fixed(rng.random_range(0..nw))
                    } else {
                        InternalChoice::Free
                    };
                    for kind in [SpecKind::Safety, SpecKind::Reachability] {
                        let sets: Vec<Vec<bool>> = (0..=horizon)
                            .map(|_| (0..=cells).map(|s| s < cells && rng.random_bool(0.6)).collect())
                            .collect();
                        let spec = SpecHorizon { kind, sets, internal };
                        let dp = match kind {
                            SpecKind::Safety => dp_safety(&mdp, &spec),
                            SpecKind::Reachability => dp_reach(&mdp, &spec),
                        };
                        let oracle = enumerate_values(&mdp, &spec);
                        cases += 1;
                        match dp {
                            Ok((values, _)) if values.values[0] == oracle => {}
                            Ok((values, _)) => mismatches.push(format!(
                                "{kind:?} cells={cells} T={horizon}: {:?} vs {oracle:?}",
                                values.values[0]
                            )),
                            Err(e) => mismatches.push(e.to_string()),
                        }
                    }
                }
            }
        }
    }
    let detail = match mismatches.first() {
        None => format!("{cases} cases equal exhaustive enumeration exactly"),
        Some(m) => format!("{}/{cases} mismatches, first: {m}", mismatches.len()),
    };
    Outcome::new(mismatches.is_empty(), detail)
}

fn run_report(model: &Path, out: &Path, threads: &str) -> (i32, String) {
    let mut stdout = Vec::new();
    let mut stderr = Vec::new();
    let args = [
        "simrel",
        "run",
        model.to_str().unwrap(),
        "--seed",
        "7",
        "--threads",
        threads,
        "--out-dir",
        out.to_str().unwrap(),
    ];
    let code = run_args(args, &mut stdout, &mut stderr);
    (code, without_timing_lines(&String::from_utf8_lossy(&stdout)))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut parts = Vec::new();
    let mut ok = true;
    for name in ["ring_certifiable.json", "ring_published.json"] {
        let model = fixture(name);
        let runs: Vec<(i32, String)> = [("a", "1"), ("b", "1"), ("c", "8")]
            .iter()
            .map(|(sub, threads)| run_report(&model, &dir.path().join(name).join(sub), threads))
            .collect();
        let same = runs.windows(2).all(|w| w[0] == w[1]);
        ok &= same && !runs[0].1.is_empty();
        parts.push(format!("{name}: exit {} identical={same}", runs[0].0));
    }
    Outcome::new(ok, parts.join("; "))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("published S-procedure certificate", published_sprocedure),
        ("published compositionality condition", published_compositionality),
        ("composition of four certificates", composition_formulas),
        ("closeness constants", closeness_constants),
        ("two-step union bound", two_step),
        ("chi-square quantile and round trip", chi_square),
        ("finite abstraction soundness", abstraction_soundness),
        ("relation retention under refined inputs", relation_retention),
        ("DP against exhaustive enumeration", dp_oracle),
        ("end-to-end determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.passed {
            failed += 1;
        }
        println!(
            "{} {:>2} {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
