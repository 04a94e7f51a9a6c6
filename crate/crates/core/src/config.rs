//! System definition files.
//!
//! ```toml
//! [system]
//! name = "decay"
//! states = ["x"]
//! inputs = ["u"]
//!
//! [parameters]
//! k = 2.0
//!
//! [dynamics]
//! f = ["-k*x"]
//! g = [["1"]]
//! phi = "x^2 + u^2"
//!
//! [defaults]
//! x0 = [1.0]
//! ```

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::Spanned;

use crate::poly::{parse_poly_with, ParseContext, PolyError, PolyMat, Polynomial};
use crate::sim::SimConfig;
use crate::system::{PolySystem, SystemError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Toml(#[from] toml::de::Error),
    #[error("line {line}, column {column}: {what}: {source}")]
    Expression {
        what: String,
        line: usize,
        column: usize,
        source: PolyError,
    },
    #[error("no drift expression for state `{0}`")]
    MissingDrift(String),
    #[error("{count} drift expressions for {states} states")]
    ExtraDrift { count: usize, states: usize },
    #[error("line {line}: input matrix row {row} has {got} entries, expected {expected}")]
    InputRow {
        line: usize,
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("input matrix has {got} rows, expected one per state ({expected})")]
    InputRows { got: usize, expected: usize },
    #[error("name `{0}` is declared more than once")]
    DuplicateName(String),
    #[error("invalid name `{0}`: use letters, digits and underscores, starting with a letter")]
    InvalidName(String),
    #[error("defaults: {0}")]
    Defaults(String),
    #[error(transparent)]
    System(#[from] SystemError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub name: String,
    pub states: Vec<String>,
    #[serde(default)]
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSection {
    pub f: Vec<Spanned<String>>,
    #[serde(default)]
    pub g: Vec<Spanned<Vec<Spanned<String>>>>,
    pub phi: Spanned<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Defaults {
    /// Radius parameter of the attractor ball `|x|^2 / 2 <= beta`.
    pub attractor_beta: Option<f64>,
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub system: SystemSection,
    #[serde(default)]
    pub parameters: BTreeMap<String, f64>,
    pub dynamics: DynamicsSection,
    #[serde(default)]
    pub defaults: Defaults,
}

#[derive(Debug, Clone)]
pub struct LoadedSystem {
    pub config: SystemConfig,
    pub system: PolySystem,
    /// Non-fatal findings, such as negative cost samples.
    pub warnings: Vec<String>,
}

impl LoadedSystem {
    /// Simulation settings with the file's defaults applied.
    pub fn sim_config(&self) -> SimConfig {
        let d = &self.config.defaults;
        let base = SimConfig::default();
        SimConfig {
            dt: d.dt.unwrap_or(base.dt),
            horizon: d.horizon.unwrap_or(base.horizon),
            x0: d
                .x0
                .clone()
                .unwrap_or_else(|| vec![0.1; self.system.nstates()]),
            ..base
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(offset, |p| offset - p - 1) + 1;
    (line, column)
}

fn valid_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn error_pos(e: &PolyError) -> usize {
    match e {
        PolyError::Syntax { pos, .. }
        | PolyError::UnknownVariable { pos, .. }
        | PolyError::BadExponent { pos, .. } => *pos,
        _ => 0,
    }
}

struct ExprParser<'a> {
    text: &'a str,
    ctx: ParseContext,
}

impl ExprParser<'_> {
    fn parse(&self, what: String, expr: &str, span: Range<usize>) -> Result<Polynomial, ConfigError> {
        parse_poly_with(expr, &self.ctx).map_err(|source| {
            // skip the opening quote of the TOML string
            let (line, column) = line_col(self.text, span.start + 1 + error_pos(&source));
            ConfigError::Expression {
                what,
                line,
                column,
                source,
            }
        })
    }
}

pub fn parse_config(text: &str) -> Result<LoadedSystem, ConfigError> {
    let config: SystemConfig = toml::from_str(text)?;
    let states = &config.system.states;
    let inputs = &config.system.inputs;
    let mut seen = std::collections::BTreeSet::new();
    for name in states.iter().chain(inputs).chain(config.parameters.keys()) {
        if !valid_name(name) {
            return Err(ConfigError::InvalidName(name.clone()));
        }
        if !seen.insert(name.as_str()) {
            return Err(ConfigError::DuplicateName(name.clone()));
        }
    }
    let n = states.len();
    let m = inputs.len();
    let dyn_ = &config.dynamics;
    if dyn_.f.len() < n {
        return Err(ConfigError::MissingDrift(states[dyn_.f.len()].clone()));
    }
    if dyn_.f.len() > n {
        return Err(ConfigError::ExtraDrift {
            count: dyn_.f.len(),
            states: n,
        });
    }

    let state_parser = ExprParser {
        text,
        ctx: ParseContext::new(states).with_parameters(config.parameters.clone()),
    };
    let f = states
        .iter()
        .zip(&dyn_.f)
        .map(|(s, e)| state_parser.parse(format!("drift of `{s}`"), e.get_ref(), e.span()))
        .collect::<Result<Vec<_>, _>>()?;

    let g = if m == 0 && dyn_.g.is_empty() {
        PolyMat::zeros(n, 0, n)
    } else {
        if dyn_.g.len() != n {
            return Err(ConfigError::InputRows {
                got: dyn_.g.len(),
                expected: n,
            });
        }
        let mut rows = Vec::with_capacity(n);
        for (r, row) in dyn_.g.iter().enumerate() {
            if row.get_ref().len() != m {
                return Err(ConfigError::InputRow {
                    line: line_col(text, row.span().start).0,
                    row: r + 1,
                    got: row.get_ref().len(),
                    expected: m,
                });
            }
            rows.push(
                row.get_ref()
                    .iter()
                    .enumerate()
                    .map(|(c, e)| {
                        state_parser.parse(
                            format!("input matrix entry ({}, {})", states[r], inputs[c]),
                            e.get_ref(),
                            e.span(),
                        )
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            );
        }
        PolyMat::from_rows(rows).map_err(SystemError::from)?
    };

    let all: Vec<String> = states.iter().chain(inputs).cloned().collect();
    let cost_parser = ExprParser {
        text,
        ctx: ParseContext::new(&all).with_parameters(config.parameters.clone()),
    };
    let phi = cost_parser.parse("cost".into(), dyn_.phi.get_ref(), dyn_.phi.span())?;

    let d = &config.defaults;
    if let Some(x0) = &d.x0 {
        if x0.len() != n {
            return Err(ConfigError::Defaults(format!(
                "x0 has {} entries, expected {n}",
                x0.len()
            )));
        }
    }
    if let Some(b) = d.attractor_beta {
        if !(b > 0.0) {
            return Err(ConfigError::Defaults(format!("attractor_beta must be positive, got {b}")));
        }
    }

    let system = PolySystem::new(states.clone(), inputs.clone(), f, g, phi)?
        .with_attractor_beta(d.attractor_beta);
    let mut warnings = Vec::new();
    if let Some((point, value)) = system.cost_negativity(100, 10.0, 0) {
        let w = format!("cost is negative ({value:.3e}) at {point:?}; bounds may be meaningless");
        log::warn!("{w}");
        warnings.push(w);
    }
    let loaded = LoadedSystem {
        config,
        system,
        warnings,
    };
    loaded.sim_config().validate(n).map_err(|e| ConfigError::Defaults(e.to_string()))?;
    Ok(loaded)
}

pub fn load_config(path: &Path) -> Result<LoadedSystem, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
[system]
name = "decay"
states = ["x", "y"]
inputs = ["u"]

[parameters]
k = 2.0

[dynamics]
f = ["-k*x + y", "-y"]
g = [["1"], ["x"]]
phi = "x^2 + y^2 + u^2"

[defaults]
x0 = [1.0, 0.5]
dt = 0.02
"#;

    #[test]
    fn parses_a_small_system() {
        let loaded = parse_config(GOOD).unwrap();
        let sys = &loaded.system;
        assert_eq!(sys.nstates(), 2);
        assert_eq!(sys.ninputs(), 1);
        assert_eq!(sys.drift()[0].evaluate(&[1.0, 3.0]).unwrap(), 1.0);
        assert!(loaded.warnings.is_empty());
        let cfg = loaded.sim_config();
        assert_eq!(cfg.dt, 0.02);
        assert_eq!(cfg.x0, vec![1.0, 0.5]);
    }

    #[test]
    fn missing_drift_names_the_state() {
        let text = GOOD.replace(r#"f = ["-k*x + y", "-y"]"#, r#"f = ["-k*x + y"]"#);
        let err = parse_config(&text).unwrap_err();
        assert!(matches!(&err, ConfigError::MissingDrift(s) if s == "y"), "{err}");
    }

    #[test]
    fn malformed_expression_reports_line_and_column() {
        let text = GOOD.replace(r#""-y"]"#, r#""-y + *"]"#);
        let err = parse_config(&text).unwrap_err();
        let ConfigError::Expression { line, column, what, .. } = &err else {
            panic!("{err}");
        };
        assert_eq!(*line, 11);
        let row = text.lines().nth(10).unwrap();
        assert_eq!(&row[column - 1..*column], "*", "{err}");
        assert!(what.contains("`y`"));
    }

    #[test]
    fn unknown_variable_and_duplicate_names() {
        let text = GOOD.replace("x^2 + y^2 + u^2", "x^2 + z");
        assert!(matches!(parse_config(&text), Err(ConfigError::Expression { .. })));
        let text = GOOD.replace("k = 2.0", "x = 2.0");
        assert!(matches!(parse_config(&text), Err(ConfigError::DuplicateName(_))));
    }

    #[test]
    fn negative_cost_warns() {
        let text = GOOD.replace("x^2 + y^2 + u^2", "x^2 - y^4 + u^2");
        let loaded = parse_config(&text).unwrap();
        assert_eq!(loaded.warnings.len(), 1);
    }

    #[test]
    fn toml_errors_carry_line_numbers() {
        let err = parse_config("[system]\nname = \n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
