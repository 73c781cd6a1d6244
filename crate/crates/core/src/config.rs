//! System-definition files: a TOML format declaring coordinates, named frame
//! fields, an optional metric, candidates with control expressions, and
//! optional auxiliary distributions — plus the bundled corpus of example
//! systems used by the command-line tools and the verification suite.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::Deserialize;
use thiserror::Error;

use crate::expr::{parse_scalar, parse_vector_field, CoordSystem, ScalarExpr, VectorFieldExpr};
use crate::extremal::{Candidate, ControlSystem, ExtremalError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("TOML syntax error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("in `{place}`: {err}")]
    Expr { place: String, err: String },
    #[error("{0}")]
    System(#[from] ExtremalError),
    #[error("{0}")]
    Invalid(String),
    #[error("could not read `{path}`: {err}")]
    Io { path: String, err: String },
}

/// A system-definition file, as deserialized. Use [`load_str`] / [`load_path`]
/// / [`load_bundled`] to also parse the expressions and build the system.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDefinition {
    pub name: String,
    pub coords: Vec<String>,
    /// Ordered names of the fields forming the control frame.
    pub frame: Vec<String>,
    /// Metric entries in frame coordinates, as expressions; identity when
    /// omitted.
    pub metric: Option<Vec<Vec<String>>>,
    /// The system is expected to be strongly bracket generating (no abnormal
    /// candidates exist); checked by the verification suite.
    #[serde(default)]
    pub sbg_expected: bool,
    /// The frame spans the whole tangent space and the metric is Riemannian.
    #[serde(default)]
    pub riemannian: bool,
    #[serde(rename = "field", default)]
    pub fields: Vec<FieldDef>,
    #[serde(rename = "candidate", default)]
    pub candidates: Vec<CandidateDef>,
    #[serde(rename = "distribution", default)]
    pub distributions: Vec<DistributionDef>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldDef {
    pub name: String,
    pub components: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateDef {
    pub name: String,
    pub controls: Vec<String>,
    pub q0: Vec<f64>,
    #[serde(default)]
    pub t0: f64,
    pub t1: f64,
    #[serde(default)]
    pub breakpoints: Vec<f64>,
    /// Expected overall classification (one of the verdict codes), asserted
    /// by the verification suite when present.
    pub expected: Option<String>,
    /// Expected abnormal-test verdict alone.
    pub expected_abnormal: Option<String>,
    /// Expected normal-test verdict alone.
    pub expected_normal: Option<String>,
    /// Classification machinery this candidate is meant for: "flow"
    /// (transport-based, the default) or "bracket" (iterated-bracket spans;
    /// needs constant controls).
    pub method: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionDef {
    pub name: String,
    pub fields: Vec<String>,
}

/// A candidate with its parsed controls, ready to classify.
#[derive(Debug, Clone)]
pub struct NamedCandidate {
    pub def: CandidateDef,
    pub candidate: Candidate,
}

/// A fully parsed and validated system definition.
#[derive(Debug, Clone)]
pub struct LoadedSystem {
    pub def: SystemDefinition,
    pub system: ControlSystem,
    /// Every named field, frame members and auxiliaries alike.
    pub fields: BTreeMap<String, VectorFieldExpr>,
    pub candidates: Vec<NamedCandidate>,
    /// Auxiliary distributions resolved to their member fields.
    pub distributions: BTreeMap<String, Vec<VectorFieldExpr>>,
}

impl LoadedSystem {
    pub fn field(&self, name: &str) -> Option<&VectorFieldExpr> {
        self.fields.get(name)
    }

    pub fn candidate(&self, name: &str) -> Option<&NamedCandidate> {
        self.candidates.iter().find(|c| c.def.name == name)
    }

    pub fn distribution(&self, name: &str) -> Option<&[VectorFieldExpr]> {
        self.distributions.get(name).map(|v| v.as_slice())
    }
}

/// The valid verdict codes for `expected*` fields.
pub const VERDICT_CODES: [&str; 5] = [
    "NORMAL_CERTIFIED",
    "ABNORMAL_CERTIFIED",
    "NOT_ABNORMAL",
    "NOT_NORMAL",
    "AMBIGUOUS",
];

fn expr_err(place: impl Into<String>, err: impl ToString) -> ConfigError {
    ConfigError::Expr { place: place.into(), err: err.to_string() }
}

/// Parses and validates a system definition from TOML source: all expressions
/// must parse against the declared coordinates, frame names must resolve, the
/// metric (symmetry, positivity) is checked at every candidate start point,
/// and every candidate must build.
pub fn load_str(src: &str) -> Result<LoadedSystem, ConfigError> {
    let def: SystemDefinition = toml::from_str(src)?;
    let coords = CoordSystem::new(
        &def.coords.iter().map(String::as_str).collect::<Vec<_>>(),
    )
    .map_err(|e| expr_err("coords", e))?;

    let mut fields = BTreeMap::new();
    for f in &def.fields {
        if f.components.len() != coords.dim() {
            return Err(ConfigError::Invalid(format!(
                "field `{}` has {} components for {} coordinates",
                f.name,
                f.components.len(),
                coords.dim()
            )));
        }
        let vf = parse_vector_field(&f.components, &coords)
            .map_err(|e| expr_err(format!("field `{}`", f.name), e))?;
        if fields.insert(f.name.clone(), vf).is_some() {
            return Err(ConfigError::Invalid(format!(
                "field `{}` is declared twice",
                f.name
            )));
        }
    }

    if def.frame.is_empty() {
        return Err(ConfigError::Invalid("the frame is empty".into()));
    }
    let mut frame = Vec::with_capacity(def.frame.len());
    for name in &def.frame {
        let vf = fields.get(name).ok_or_else(|| {
            ConfigError::Invalid(format!("frame names undeclared field `{name}`"))
        })?;
        frame.push(vf.clone());
    }

    let metric: Option<Vec<Vec<ScalarExpr>>> = match &def.metric {
        None => None,
        Some(rows) => {
            let d = def.frame.len();
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                return Err(ConfigError::Invalid(format!(
                    "metric must be a {d}x{d} matrix of expressions"
                )));
            }
            let mut out = Vec::with_capacity(d);
            for (i, row) in rows.iter().enumerate() {
                let mut orow = Vec::with_capacity(d);
                for (j, entry) in row.iter().enumerate() {
                    orow.push(
                        parse_scalar(entry, &coords)
                            .map_err(|e| expr_err(format!("metric[{i}][{j}]"), e))?,
                    );
                }
                out.push(orow);
            }
            Some(out)
        }
    };

    let system = ControlSystem::new(coords.clone(), frame, metric)?;

    if def.riemannian && system.control_dim() != system.dim() {
        return Err(ConfigError::Invalid(format!(
            "flagged riemannian but the frame has {} fields in dimension {}",
            system.control_dim(),
            system.dim()
        )));
    }

    let mut candidates = Vec::with_capacity(def.candidates.len());
    for c in &def.candidates {
        let place = format!("candidate `{}`", c.name);
        if c.q0.len() != system.dim() {
            return Err(ConfigError::Invalid(format!(
                "{place}: q0 has {} entries for dimension {}",
                c.q0.len(),
                system.dim()
            )));
        }
        let mut controls = Vec::with_capacity(c.controls.len());
        for (i, src) in c.controls.iter().enumerate() {
            controls.push(
                parse_scalar(src, &coords)
                    .map_err(|e| expr_err(format!("{place}, control {i}"), e))?,
            );
        }
        if controls.len() != system.control_dim() {
            return Err(ConfigError::Invalid(format!(
                "{place}: {} controls for a frame of {} fields",
                controls.len(),
                system.control_dim()
            )));
        }
        for field in [&c.expected, &c.expected_abnormal, &c.expected_normal]
            .into_iter()
            .flatten()
        {
            if !VERDICT_CODES.contains(&field.as_str()) {
                return Err(ConfigError::Invalid(format!(
                    "{place}: `{field}` is not a verdict code"
                )));
            }
        }
        if let Some(m) = &c.method {
            if m != "flow" && m != "bracket" {
                return Err(ConfigError::Invalid(format!(
                    "{place}: method must be \"flow\" or \"bracket\", not `{m}`"
                )));
            }
        }
        let q0 = DVector::from_column_slice(&c.q0);
        // metric validity (symmetry, positive definiteness) at the start point
        system.metric_chol_at(q0.as_slice())?;
        let candidate = Candidate::new(controls, c.breakpoints.clone(), q0, c.t0, c.t1)
            .map_err(|e| expr_err(place, e))?;
        candidates.push(NamedCandidate { def: c.clone(), candidate });
    }

    let mut distributions = BTreeMap::new();
    for d in &def.distributions {
        let mut members = Vec::with_capacity(d.fields.len());
        for name in &d.fields {
            let vf = fields.get(name).ok_or_else(|| {
                ConfigError::Invalid(format!(
                    "distribution `{}` names undeclared field `{name}`",
                    d.name
                ))
            })?;
            members.push(vf.clone());
        }
        if members.is_empty() {
            return Err(ConfigError::Invalid(format!(
                "distribution `{}` has no fields",
                d.name
            )));
        }
        if distributions.insert(d.name.clone(), members).is_some() {
            return Err(ConfigError::Invalid(format!(
                "distribution `{}` is declared twice",
                d.name
            )));
        }
    }

    Ok(LoadedSystem { def, system, fields, candidates, distributions })
}

/// Loads a definition from a file on disk.
pub fn load_path(path: &str) -> Result<LoadedSystem, ConfigError> {
    let src = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.into(), err: e.to_string() })?;
    load_str(&src)
}

/// The bundled example systems, by name.
pub const BUNDLED: [(&str, &str); 8] = [
    ("heisenberg", include_str!("../configs/heisenberg.toml")),
    ("martinet", include_str!("../configs/martinet.toml")),
    ("dist234", include_str!("../configs/dist234.toml")),
    ("zelenko235", include_str!("../configs/zelenko235.toml")),
    ("zhitomirskii", include_str!("../configs/zhitomirskii.toml")),
    ("flat2d", include_str!("../configs/flat2d.toml")),
    ("sphere2d", include_str!("../configs/sphere2d.toml")),
    ("nicepair", include_str!("../configs/nicepair.toml")),
];

pub fn bundled_names() -> Vec<&'static str> {
    BUNDLED.iter().map(|(n, _)| *n).collect()
}

pub fn bundled_source(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn load_bundled(name: &str) -> Result<LoadedSystem, ConfigError> {
    let src = bundled_source(name).ok_or_else(|| {
        ConfigError::Invalid(format!(
            "no bundled system `{name}` (available: {})",
            bundled_names().join(", ")
        ))
    })?;
    load_str(src)
}

/// Resolves a `--system` argument: a bundled name, or a path to a TOML file.
pub fn load_system_arg(arg: &str) -> Result<LoadedSystem, ConfigError> {
    if bundled_source(arg).is_some() {
        load_bundled(arg)
    } else if std::path::Path::new(arg).exists() {
        load_path(arg)
    } else {
        Err(ConfigError::Invalid(format!(
            "`{arg}` is neither a bundled system ({}) nor an existing file",
            bundled_names().join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_bundled_definition_loads_and_validates() {
        for name in bundled_names() {
            let sys = load_bundled(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(sys.def.name, name);
            assert!(!sys.candidates.is_empty(), "{name} has no candidates");
            for c in &sys.candidates {
                assert_eq!(c.candidate.controls.len(), sys.system.control_dim());
            }
        }
    }

    #[test]
    fn field_and_candidate_lookup_by_name() {
        let sys = load_bundled("heisenberg").unwrap();
        assert!(sys.field("Y").is_some());
        assert!(sys.field("W").is_none());
        assert!(sys.candidate("circle-alpha-1").is_some());
        assert!(sys.candidate("nosuch").is_none());
        let nice = load_bundled("nicepair").unwrap();
        assert_eq!(nice.distribution("H").unwrap().len(), 3);
        assert_eq!(nice.distribution("Z").unwrap().len(), 2);
    }

    #[test]
    fn corrupted_metric_fails_naming_the_symmetry_invariant() {
        let src = r#"
name = "bad"
coords = ["x", "y"]
frame = ["E1", "E2"]
metric = [["1", "0.2"], ["0", "1"]]

[[field]]
name = "E1"
components = ["1", "0"]

[[field]]
name = "E2"
components = ["0", "1"]

[[candidate]]
name = "c"
controls = ["1", "0"]
q0 = [0.0, 0.0]
t1 = 1.0
"#;
        let err = load_str(src).unwrap_err();
        assert!(
            err.to_string().contains("symmetric"),
            "error should name the violated invariant, got: {err}"
        );
    }

    #[test]
    fn non_positive_metric_is_rejected() {
        let src = r#"
name = "bad"
coords = ["x", "y"]
frame = ["E1", "E2"]
metric = [["1", "2"], ["2", "1"]]

[[field]]
name = "E1"
components = ["1", "0"]

[[field]]
name = "E2"
components = ["0", "1"]

[[candidate]]
name = "c"
controls = ["1", "0"]
q0 = [0.0, 0.0]
t1 = 1.0
"#;
        let err = load_str(src).unwrap_err();
        assert!(
            err.to_string().contains("positive definite"),
            "error should name positivity, got: {err}"
        );
    }

    #[test]
    fn undeclared_names_and_bad_expressions_are_reported_with_context() {
        let base = r#"
name = "bad"
coords = ["x"]
frame = ["nosuch"]

[[field]]
name = "E1"
components = ["1"]
"#;
        let err = load_str(base).unwrap_err();
        assert!(err.to_string().contains("nosuch"));

        let bad_expr = r#"
name = "bad"
coords = ["x"]
frame = ["E1"]

[[field]]
name = "E1"
components = ["1 +"]
"#;
        let err = load_str(bad_expr).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("E1") && msg.contains("parse"), "got: {msg}");

        let bad_verdict = r#"
name = "bad"
coords = ["x"]
frame = ["E1"]

[[field]]
name = "E1"
components = ["1"]

[[candidate]]
name = "c"
controls = ["1"]
q0 = [0.0]
t1 = 1.0
expected = "MAYBE"
"#;
        let err = load_str(bad_verdict).unwrap_err();
        assert!(err.to_string().contains("verdict code"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let src = r#"
name = "bad"
coords = ["x"]
frame = ["E1"]
surprising = 1

[[field]]
name = "E1"
components = ["1"]
"#;
        assert!(matches!(load_str(src), Err(ConfigError::Toml(_))));
    }
}
