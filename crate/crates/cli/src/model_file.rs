//! Versioned JSON network model files.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use simrel_core::abstraction::DEFAULT_MEMORY_CAP_BYTES;
use simrel_core::certification::{
    CandidateRelation, CertificationSettings, LambdaChoice, Tolerances, DEFAULT_LAMBDA_MAX,
};
use simrel_core::guarantees::{EventTube, OutputBox};
use simrel_core::model::NonlinearSystem;
use simrel_core::network::{check_interconnection_constraint, CompositionalityLambda, NetworkTopology, PortDims};
use simrel_core::relations::LiftedCoupling;
use simrel_core::synthesis::{InternalChoice, SpecKind};

use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkModelFile {
    pub format_version: u32,
    pub subsystems: Vec<SubsystemEntry>,
    #[serde(default)]
    pub topology: NetworkTopology,
    #[serde(default = "default_tolerances")]
    pub tolerances: Tolerances,
    pub compositionality: CompositionalityEntry,
    pub abstraction: AbstractionEntry,
    pub specification: SpecificationEntry,
    pub validation: ValidationEntry,
}

fn default_tolerances() -> Tolerances {
    Tolerances::default()
}

fn one() -> usize {
    1
}

/// One subsystem description, instantiated `copies` times in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsystemEntry {
    pub name: String,
    #[serde(default = "one")]
    pub copies: usize,
    pub concrete: NonlinearSystem,
    pub reduced: NonlinearSystem,
    pub candidate: CandidateRelation,
    pub certification: CertificationEntry,
    pub initial_state: Vec<f64>,
    pub initial_abstract_state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificationEntry {
    pub delta: f64,
    pub c_nuhat: f64,
    pub beta: f64,
    #[serde(default)]
    pub dof: Option<usize>,
    pub lambda: LambdaChoice,
    #[serde(default)]
    pub rederive_on_failure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionalityEntry {
    pub lambda: CompositionalityLambda,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbstractionEntry {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub widths: Vec<f64>,
    pub internal_inputs: Vec<Vec<f64>>,
    pub external_inputs: Vec<Vec<f64>>,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default = "default_cap")]
    pub memory_cap_bytes: u64,
}

fn default_mc_samples() -> usize {
    10_000
}

fn default_cap() -> u64 {
    DEFAULT_MEMORY_CAP_BYTES
}

/// Per-subsystem output specification for synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecificationEntry {
    pub kind: SpecKind,
    pub output_box: OutputBox,
    pub internal: InternalChoice,
    /// Constant physical internal input used for closed-loop checks.
    pub internal_input: Vec<f64>,
}

/// Network-level Monte Carlo validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationEntry {
    /// Constant abstract input applied by every subsystem.
    pub abstract_input: Vec<f64>,
    /// Box on the stacked network output.
    pub output_box: OutputBox,
}

/// A subsystem with its copy expanded.
#[derive(Debug, Clone, PartialEq)]
pub struct Subsystem<'a> {
    pub name: String,
    pub entry: &'a SubsystemEntry,
}

impl NetworkModelFile {
    pub fn parse(text: &str, path: &Path) -> CliResult<Self> {
        let model: Self = serde_json::from_str(text).map_err(|e| CliError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::parse(&text, path)
    }

    /// Canonical serialization: fixed key order, two-space indentation,
    /// shortest round-trip decimals, trailing newline.
    pub fn to_canonical(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn subsystems(&self) -> Vec<Subsystem<'_>> {
        self.subsystems
            .iter()
            .flat_map(|e| {
                (0..e.copies).map(move |c| Subsystem {
                    name: if e.copies == 1 {
                        e.name.clone()
                    } else {
                        format!("{}[{c}]", e.name)
                    },
                    entry: e,
                })
            })
            .collect()
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(CliError::Model(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let subs = self.subsystems();
        if subs.is_empty() {
            return Err(CliError::Model("no subsystems".into()));
        }
        let model_err = |name: &str, e: simrel_core::Error| CliError::Model(format!("subsystem {name}: {e}"));
        for s in &subs {
            let e = s.entry;
            e.concrete.validate().map_err(|err| model_err(&s.name, err))?;
            e.reduced.validate().map_err(|err| model_err(&s.name, err))?;
            e.candidate.state.validate().map_err(|err| model_err(&s.name, err))?;
            e.candidate.input.validate().map_err(|err| model_err(&s.name, err))?;
            if e.initial_state.len() != e.concrete.dims().n || e.initial_abstract_state.len() != e.reduced.dims().n {
                return Err(CliError::Model(format!(
                    "subsystem {}: initial state dimensions",
                    s.name
                )));
            }
        }
        let ports: Vec<PortDims> = subs
            .iter()
            .map(|s| PortDims::of(&s.entry.concrete, &s.entry.reduced))
            .collect();
        let report = check_interconnection_constraint(&self.topology, &ports);
        if let Some(issue) = report.issues.first() {
            return Err(CliError::Model(format!("edge {}: {}", issue.edge, issue.message)));
        }
        let a = &self.abstraction;
        if a.lower.len() != a.upper.len() || a.lower.len() != a.widths.len() {
            return Err(CliError::Model("abstraction box dimensions disagree".into()));
        }
        if a.internal_inputs.is_empty() || a.external_inputs.is_empty() {
            return Err(CliError::Model(
                "abstraction needs at least one internal and one external input".into(),
            ));
        }
        let total_q: usize = subs.iter().map(|s| s.entry.concrete.dims().q).sum();
        let vb = &self.validation.output_box;
        if vb.lower.len() != total_q || vb.upper.len() != total_q {
            return Err(CliError::Model(format!("validation box must have {total_q} entries")));
        }
        EventTube::new(vec![vb.clone(), self.specification.output_box.clone()])
            .map_err(|e| CliError::Model(e.to_string()))?;
        Ok(())
    }

    pub fn certification_settings(&self, entry: &CertificationEntry, overrides: &Overrides) -> CertificationSettings {
        let mut tolerances = self.tolerances;
        if let Some(t) = overrides.tol_eq {
            tolerances.tol_eq = t;
        }
        if let Some(t) = overrides.tol_psd {
            tolerances.tol_psd = t;
        }
        CertificationSettings {
            delta: entry.delta,
            c_nuhat: entry.c_nuhat,
            beta: entry.beta,
            dof: overrides.dof.or(entry.dof),
            lambda: overrides.lambda.unwrap_or(entry.lambda),
            tolerances,
            coupling: LiftedCoupling::SharedNoise,
            rederive_on_failure: entry.rederive_on_failure,
        }
    }

    pub fn tol_psd(&self, overrides: &Overrides) -> f64 {
        overrides.tol_psd.unwrap_or(self.tolerances.tol_psd)
    }

    pub fn internal_inputs(&self) -> Vec<DVector<f64>> {
        self.abstraction
            .internal_inputs
            .iter()
            .map(|v| DVector::from_vec(v.clone()))
            .collect()
    }

    pub fn external_inputs(&self) -> Vec<DVector<f64>> {
        self.abstraction
            .external_inputs
            .iter()
            .map(|v| DVector::from_vec(v.clone()))
            .collect()
    }
}

/// Command-line overrides of model settings.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub tol_eq: Option<f64>,
    pub tol_psd: Option<f64>,
    pub lambda: Option<LambdaChoice>,
    pub dof: Option<usize>,
}

/// Parses a `--lambda` value: a non-negative number or `search`.
pub fn parse_lambda(text: &str) -> Result<LambdaChoice, String> {
    if text == "search" {
        return Ok(LambdaChoice::Search {
            lambda_max: DEFAULT_LAMBDA_MAX,
        });
    }
    match text.parse::<f64>() {
        Ok(l) if l >= 0.0 && l.is_finite() => Ok(LambdaChoice::Fixed(l)),
        _ => Err(format!("expected a non-negative number or 'search', got '{text}'")),
    }
}
