//! Pipeline stages and their on-disk artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use simrel_core::abstraction::{
    build_finite_mdp, build_partition, parse_interchange, write_interchange, AbstractionSettings, FiniteMdp,
    TransitionSettings,
};
use simrel_core::certification::{certify_relation, CertificationPath, CertificationReport, RelationCertificate};
use simrel_core::guarantees::{monte_carlo_validate, ClosenessCertificate, EventTube, NetworkPair, ValidationReport};
use simrel_core::model::NonlinearSystem;
use simrel_core::network::{
    check_compositionality_condition, compose_relations, ComposedRelation, CompositionalityCheck,
};
use simrel_core::relations::AbstractSide;
use simrel_core::synthesis::{
    closed_loop_frequency, dp_reach, dp_safety, write_policy, CompanionMode, SpecHorizon, SpecKind,
};
use simrel_core::Error as CoreError;

use crate::error::{CliError, CliResult};
use crate::model_file::{NetworkModelFile, Overrides, FORMAT_VERSION};

pub const CERTIFICATES: &str = "certificates.json";
pub const COMPOSED: &str = "composed.json";
pub const SYNTHESIS: &str = "synthesis.json";
pub const VALIDATION: &str = "validation.txt";
pub const REPORT: &str = "report.txt";

pub fn mdp_file(i: usize) -> String {
    format!("mdp_{i}.txt")
}

pub fn policy_file(i: usize) -> String {
    format!("policy_{i}.txt")
}

/// Settings shared by every stage.
#[derive(Debug, Clone)]
pub struct StageContext {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub trials: usize,
    pub horizon: usize,
    pub overrides: Overrides,
}

impl StageContext {
    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> CliResult<()> {
        fs::create_dir_all(&self.out_dir).map_err(CliError::io(&self.out_dir))?;
        let p = self.path(name);
        fs::write(&p, contents).map_err(CliError::io(p))
    }

    fn read(&self, name: &str, stage: &'static str) -> CliResult<String> {
        let p = self.path(name);
        if !p.exists() {
            return Err(CliError::MissingPrerequisite { path: p, stage });
        }
        fs::read_to_string(&p).map_err(CliError::io(p))
    }

    fn read_json<T: DeserializeOwned>(&self, name: &str, stage: &'static str) -> CliResult<T> {
        let text = self.read(name, stage)?;
        serde_json::from_str(&text).map_err(|e| CliError::Parse {
            path: self.path(name),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("artifact serializes");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationRecord {
    pub name: String,
    pub certified: bool,
    pub path: Option<CertificationPath>,
    pub lambda: Option<f64>,
    pub failed_conditions: Vec<String>,
    pub error: Option<String>,
    pub report: Option<CertificationReport>,
    pub certificate: Option<RelationCertificate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificatesFile {
    pub format_version: u32,
    pub subsystems: Vec<CertificationRecord>,
}

impl CertificatesFile {
    fn certificates(&self) -> CliResult<Vec<RelationCertificate>> {
        self.subsystems
            .iter()
            .map(|r| {
                r.certificate
                    .clone()
                    .ok_or_else(|| CliError::Certification(format!("subsystem {} has no certificate", r.name)))
            })
            .collect()
    }
}

pub fn certify(model: &NetworkModelFile, ctx: &StageContext) -> CliResult<CertificatesFile> {
    let mut records = Vec::new();
    for sub in model.subsystems() {
        let e = sub.entry;
        let settings = model.certification_settings(&e.certification, &ctx.overrides);
        let rec = match certify_relation(&e.concrete, &e.reduced, &e.candidate, &settings) {
            Ok(cert) => CertificationRecord {
                name: sub.name,
                certified: true,
                path: Some(cert.evidence.path),
                lambda: Some(cert.lambda),
                failed_conditions: vec![],
                error: None,
                report: None,
                certificate: Some(cert),
            },
            Err(CoreError::CertificationFailed(report)) => {
                let mut failed = report.failed_conditions();
                if let Some(fb) = &report.fallback {
                    failed.extend(fb.failed_conditions().into_iter().map(|c| format!("{c} (re-derived)")));
                }
                CertificationRecord {
                    name: sub.name,
                    certified: false,
                    path: None,
                    lambda: None,
                    failed_conditions: failed,
                    error: None,
                    report: Some(*report),
                    certificate: None,
                }
            }
            Err(other) => CertificationRecord {
                name: sub.name,
                certified: false,
                path: None,
                lambda: None,
                failed_conditions: vec![],
                error: Some(other.to_string()),
                report: None,
                certificate: None,
            },
        };
        records.push(rec);
    }
    let file = CertificatesFile {
        format_version: FORMAT_VERSION,
        subsystems: records,
    };
    ctx.write(CERTIFICATES, &to_json(&file))?;
    let failures: Vec<String> = file
        .subsystems
        .iter()
        .filter(|r| !r.certified)
        .map(|r| match &r.error {
            Some(e) => format!("{}: {e}", r.name),
            None => format!("{}: {}", r.name, r.failed_conditions.join(", ")),
        })
        .collect();
    if failures.is_empty() {
        Ok(file)
    } else {
        Err(CliError::Certification(failures.join("; ")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposedFile {
    pub format_version: u32,
    pub horizon: usize,
    pub composed_ok: bool,
    pub compositionality: Vec<CompositionalityCheck>,
    pub closeness: Option<ClosenessCertificate>,
    pub relation: Option<ComposedRelation>,
}

pub fn compose(model: &NetworkModelFile, ctx: &StageContext) -> CliResult<ComposedFile> {
    let certs_file: CertificatesFile = ctx.read_json(CERTIFICATES, "certify")?;
    let certs = certs_file.certificates()?;
    let relations: Vec<_> = certs.iter().map(|c| c.state_relation.clone()).collect();
    let tol_psd = model.tol_psd(&ctx.overrides);
    let checks = (0..certs.len())
        .map(|i| {
            check_compositionality_condition(
                &model.topology,
                &relations,
                i,
                &certs[i].input_relation,
                model.compositionality.lambda,
                tol_psd,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let evidence: Vec<Option<CompositionalityCheck>> = checks.iter().cloned().map(Some).collect();
    let composed = compose_relations(&certs, &evidence);
    let file = match &composed {
        Ok(rel) => ComposedFile {
            format_version: FORMAT_VERSION,
            horizon: ctx.horizon,
            composed_ok: true,
            compositionality: checks,
            closeness: Some(ClosenessCertificate::new(rel.eps, rel.delta, ctx.horizon)?),
            relation: Some(rel.clone()),
        },
        Err(_) => ComposedFile {
            format_version: FORMAT_VERSION,
            horizon: ctx.horizon,
            composed_ok: false,
            compositionality: checks,
            closeness: None,
            relation: None,
        },
    };
    ctx.write(COMPOSED, &to_json(&file))?;
    match composed {
        Ok(_) => Ok(file),
        Err(CoreError::CompositionalityFailed(i)) => Err(CliError::Certification(format!(
            "compositionality condition fails at subsystem {i}"
        ))),
        Err(e) => Err(e.into()),
    }
}

/// Abstract model of subsystem `i`: the certified one when certificates
/// exist, else the model file's reduced system.
fn abstract_systems(model: &NetworkModelFile, ctx: &StageContext) -> CliResult<Vec<NonlinearSystem>> {
    let subs = model.subsystems();
    if ctx.path(CERTIFICATES).exists() {
        let file: CertificatesFile = ctx.read_json(CERTIFICATES, "certify")?;
        if file.subsystems.len() == subs.len() {
            return Ok(file
                .subsystems
                .iter()
                .zip(&subs)
                .map(|(r, s)| {
                    r.certificate
                        .as_ref()
                        .map_or_else(|| s.entry.reduced.clone(), |c| c.abstract_system.clone())
                })
                .collect());
        }
    }
    Ok(subs.iter().map(|s| s.entry.reduced.clone()).collect())
}

pub fn abstract_stage(model: &NetworkModelFile, ctx: &StageContext) -> CliResult<Vec<FiniteMdp>> {
    let a = &model.abstraction;
    let partition = build_partition(&a.lower, &a.upper, &a.widths)?;
    let systems = abstract_systems(model, ctx)?;
    let internal = model.internal_inputs();
    let external = model.external_inputs();
    let mut mdps = Vec::new();
    for (i, (sys, sub)) in systems.iter().zip(model.subsystems()).enumerate() {
        let settings = AbstractionSettings {
            transition: TransitionSettings {
                mc_samples: a.mc_samples,
                seed: ctx.seed.wrapping_add(i as u64),
                force_monte_carlo: false,
            },
            memory_cap_bytes: a.memory_cap_bytes,
        };
        let x0 = DVector::from_vec(sub.entry.initial_abstract_state.clone());
        let mdp = build_finite_mdp(sys, &partition, &internal, &external, &x0, &settings)?;
        ctx.write(&mdp_file(i), &write_interchange(&mdp))?;
        mdps.push(mdp);
    }
    Ok(mdps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    pub name: String,
    pub kind: SpecKind,
    pub abstract_value: f64,
    pub closeness: ClosenessCertificate,
    pub transferred_bound: f64,
    pub closed_loop_frequency: f64,
    pub closed_loop_half_width: f64,
    pub forfeited_trials: usize,
    pub closed_loop_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisFile {
    pub format_version: u32,
    pub horizon: usize,
    pub trials: usize,
    pub seed: u64,
    pub subsystems: Vec<SynthesisRecord>,
}

pub fn synthesize(model: &NetworkModelFile, ctx: &StageContext) -> CliResult<SynthesisFile> {
    let subs = model.subsystems();
    let mdps = (0..subs.len())
        .map(|i| {
            let name = mdp_file(i);
            let text = ctx.read(&name, "abstract")?;
            parse_interchange(&text).map_err(|e| match e {
                CoreError::Parse { line, message } => CliError::Parse {
                    path: ctx.path(&name),
                    line,
                    column: 0,
                    message,
                },
                other => other.into(),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let certs = ctx
        .read_json::<CertificatesFile>(CERTIFICATES, "certify")?
        .certificates()?;
    let spec = &model.specification;
    let tube = EventTube::constant(spec.output_box.clone(), ctx.horizon)?;
    let w = DVector::from_vec(spec.internal_input.clone());
    let mut records = Vec::new();
    for (i, ((sub, mdp), cert)) in subs.iter().zip(&mdps).zip(&certs).enumerate() {
        let contracted = tube.contract(cert.eps);
        let horizon_spec = SpecHorizon::from_tube(mdp, &contracted, spec.kind, spec.internal);
        let (values, policy) = match spec.kind {
            SpecKind::Safety => dp_safety(mdp, &horizon_spec)?,
            SpecKind::Reachability => dp_reach(mdp, &horizon_spec)?,
        };
        ctx.write(&policy_file(i), &write_policy(&policy))?;
        let closeness = ClosenessCertificate::new(cert.eps, cert.delta, ctx.horizon)?;
        let v = values.initial(mdp.initial_state);
        let bound = simrel_core::synthesis::guarantee_transfer(v, &closeness);
        let x0 = DVector::from_vec(sub.entry.initial_state.clone());
        let est = closed_loop_frequency(
            &policy,
            mdp,
            &sub.entry.concrete,
            cert,
            (&x0, mdp.initial_state),
            &w,
            &tube,
            CompanionMode::CoSimulation,
            ctx.trials,
            ctx.seed.wrapping_add(i as u64),
        )?;
        records.push(SynthesisRecord {
            name: sub.name.clone(),
            kind: spec.kind,
            abstract_value: v,
            closeness,
            transferred_bound: bound,
            closed_loop_frequency: est.frequency,
            closed_loop_half_width: est.half_width,
            forfeited_trials: est.forfeited,
            closed_loop_ok: est.frequency >= bound - 3.0 * est.half_width,
        });
    }
    let file = SynthesisFile {
        format_version: FORMAT_VERSION,
        horizon: ctx.horizon,
        trials: ctx.trials,
        seed: ctx.seed,
        subsystems: records,
    };
    ctx.write(SYNTHESIS, &to_json(&file))?;
    Ok(file)
}

pub fn simulate(model: &NetworkModelFile, ctx: &StageContext) -> CliResult<ValidationReport> {
    let composed: ComposedFile = ctx.read_json(COMPOSED, "compose")?;
    let relation = composed
        .relation
        .ok_or_else(|| CliError::Certification("composed relation was not established".into()))?;
    let subs = model.subsystems();
    let concrete: Vec<NonlinearSystem> = subs.iter().map(|s| s.entry.concrete.clone()).collect();
    let pair = NetworkPair {
        concrete: &concrete,
        abstract_models: relation
            .certificates
            .iter()
            .map(|c| AbstractSide::Reduced(&c.abstract_system))
            .collect(),
        topology: &model.topology,
    };
    let initial: Vec<(DVector<f64>, DVector<f64>)> = subs
        .iter()
        .map(|s| {
            (
                DVector::from_vec(s.entry.initial_state.clone()),
                DVector::from_vec(s.entry.initial_abstract_state.clone()),
            )
        })
        .collect();
    let nuhat = DVector::from_vec(model.validation.abstract_input.clone());
    let policy = move |_: usize, _: usize, _: &DVector<f64>| nuhat.clone();
    let tube = EventTube::constant(model.validation.output_box.clone(), ctx.horizon)?;
    let report = monte_carlo_validate(&pair, &relation, &initial, &policy, &tube, ctx.trials, ctx.seed)?;
    ctx.write(VALIDATION, &report.to_string())?;
    if report.passed() {
        Ok(report)
    } else {
        let failed: Vec<&str> = report
            .metrics
            .iter()
            .filter(|m| !m.passed)
            .map(|m| m.name.as_str())
            .collect();
        Err(CliError::Certification(format!(
            "validation metrics failed: {}",
            failed.join(", ")
        )))
    }
}

fn optional_json<T: DeserializeOwned>(ctx: &StageContext, name: &str) -> Option<T> {
    fs::read_to_string(ctx.path(name))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
}

/// Renders every artifact present in the output directory. Timing lines
/// start with `#`.
pub fn render_report(ctx: &StageContext, timings: &[(String, f64)]) -> CliResult<String> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "simrel report format_version={FORMAT_VERSION} seed={} trials={} horizon={}",
        ctx.seed, ctx.trials, ctx.horizon
    );

    let _ = writeln!(out, "\n[certify]");
    match optional_json::<CertificatesFile>(ctx, CERTIFICATES) {
        Some(file) => {
            for r in &file.subsystems {
                if let Some(c) = &r.certificate {
                    let path = match c.evidence.path {
                        CertificationPath::Supplied => "supplied",
                        CertificationPath::Rederived => "rederived",
                    };
                    let _ = writeln!(
                        out,
                        "{} certified eps={} delta={} lambda={:.9e} path={} min_eig={:.6e} c_zeta={:.9}",
                        r.name, c.eps, c.delta, c.lambda, path, c.evidence.sprocedure.min_eigenvalue, c.chance.c_zeta
                    );
                    for flag in &c.evidence.flags {
                        let _ = writeln!(out, "  flag: {flag}");
                    }
                } else {
                    let why = r.error.clone().unwrap_or_else(|| r.failed_conditions.join(", "));
                    let _ = writeln!(out, "{} FAILED {}", r.name, why);
                    let mut rep = r.report.as_ref();
                    let mut label = "supplied";
                    while let Some(current) = rep {
                        let _ = writeln!(out, "  path {label} lambda={:.9e}", current.lambda);
                        for c in &current.conditions {
                            let _ = writeln!(
                                out,
                                "    {} passed={} residual={:.6e} tolerance={:.3e}",
                                c.name, c.passed, c.residual, c.tolerance
                            );
                        }
                        rep = current.fallback.as_deref();
                        label = "rederived";
                    }
                }
            }
        }
        None => out.push_str("not run\n"),
    }

    let _ = writeln!(out, "\n[compose]");
    match optional_json::<ComposedFile>(ctx, COMPOSED) {
        Some(file) => {
            for c in &file.compositionality {
                let _ = writeln!(
                    out,
                    "receiver {} sources={:?} lambda={:.9e} passed={} min_eig={:.6e}",
                    c.receiver, c.sources, c.lambda, c.check.passed, c.check.min_eigenvalue
                );
            }
            match (&file.relation, &file.closeness) {
                (Some(rel), Some(cl)) => {
                    let _ = writeln!(out, "eps_composed={:.6}", rel.eps);
                    let _ = writeln!(out, "delta_composed={:.12}", rel.delta);
                    let _ = writeln!(out, "gamma(T={})={:.7}", cl.horizon, cl.gamma);
                    let _ = writeln!(
                        out,
                        "closeness: P(max_k |y - y_hat| <= {:.6}) >= {:.7}",
                        cl.eps,
                        1.0 - cl.gamma
                    );
                }
                _ => out.push_str("composition FAILED\n"),
            }
        }
        None => out.push_str("not run\n"),
    }

    let _ = writeln!(out, "\n[abstract]");
    let mut any = false;
    for i in 0.. {
        let Ok(text) = fs::read_to_string(ctx.path(&mdp_file(i))) else {
            break;
        };
        any = true;
        match parse_interchange(&text) {
            Ok(mdp) => {
                let _ = writeln!(
                    out,
                    "mdp {i} states={} internal={} external={} beta={:.6} max_row_defect={:.3e} max_std_error={:.3e}",
                    mdp.num_states(),
                    mdp.num_internal(),
                    mdp.num_external(),
                    mdp.partition.beta(),
                    mdp.max_row_defect(),
                    mdp.max_std_error
                );
            }
            Err(e) => {
                let _ = writeln!(out, "mdp {i} unreadable: {e}");
            }
        }
    }
    if !any {
        out.push_str("not run\n");
    }

    let _ = writeln!(out, "\n[synthesize]");
    match optional_json::<SynthesisFile>(ctx, SYNTHESIS) {
        Some(file) => {
            for r in &file.subsystems {
                let _ = writeln!(
                    out,
                    "{} {:?} abstract_value={:.6} gamma={:.7} transferred_bound={:.6} closed_loop={:.6}+-{:.6} forfeited={} verdict={}",
                    r.name,
                    r.kind,
                    r.abstract_value,
                    r.closeness.gamma,
                    r.transferred_bound,
                    r.closed_loop_frequency,
                    r.closed_loop_half_width,
                    r.forfeited_trials,
                    if r.closed_loop_ok { "PASS" } else { "FAIL" }
                );
            }
        }
        None => out.push_str("not run\n"),
    }

    let _ = writeln!(out, "\n[simulate]");
    match fs::read_to_string(ctx.path(VALIDATION)) {
        Ok(text) => out.push_str(&text),
        Err(_) => out.push_str("not run\n"),
    }

    if !timings.is_empty() {
        out.push('\n');
        for (stage, ms) in timings {
            let _ = writeln!(out, "# {stage} {ms:.1} ms");
        }
    }
    ctx.write(REPORT, &out)?;
    Ok(out)
}

/// Strips timing lines for byte comparison.
pub fn without_timing_lines(text: &str) -> String {
    let kept: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    format!("{}\n", kept.trim_end())
}

pub fn artifact_path(out_dir: &Path, name: &str) -> PathBuf {
    out_dir.join(name)
}
