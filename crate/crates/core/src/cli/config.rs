use std::collections::HashMap;

use serde::Deserialize;
use toml::Spanned;

use crate::clt::Check;
use crate::error::{Error, Result};
use crate::measures::{catalog, standardize, MeasureSpec};
use crate::quadrature::IntegrationConfig;

pub const SEED_OVERRIDE_ENV: &str = "STEINLAB_SEED_OVERRIDE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Md,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "jsonl",
            Format::Md => "md",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
    /// Base name of the report files.
    #[serde(default = "default_name")]
    pub name: String,
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv]
}

fn default_name() -> String {
    "report".into()
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { formats: default_formats(), name: default_name() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureDecl {
    pub name: Spanned<String>,
    pub catalog: Option<String>,
    #[serde(default)]
    pub params: Vec<f64>,
    /// Unnormalized log-density in the expression grammar.
    pub density: Option<String>,
    pub dim: Option<usize>,
    pub support: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub kinks: Vec<Vec<f64>>,
    /// Names of earlier one-dimensional declarations.
    pub product: Option<Vec<Spanned<String>>>,
    pub scale: Option<f64>,
    pub shift: Option<Vec<f64>>,
    #[serde(default)]
    pub standardize: bool,
    /// A Poincaré constant supplied by the user.
    pub poincare: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceDecl {
    #[default]
    Gaussian,
    /// The measure itself, `e^{-V} = ν`.
    #[serde(rename = "self")]
    SelfReference,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagationDecl {
    pub m: usize,
    pub n: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FisherDecl {
    pub n: usize,
    pub t: f64,
}

/// Optional reference value for a computed quantity.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expected {
    pub value: f64,
    /// Relative tolerance.
    pub tol: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskDecl {
    Kernel1d {
        measure: String,
        grid_nodes: Option<usize>,
        /// Ceiling on the weak residual of the closed-form kernel.
        residual_tol: Option<f64>,
        /// Random points at which the kernel is compared with the identity.
        identity_points: Option<usize>,
        s_squared: Option<Expected>,
        /// Use the finite-difference Poincaré constant even when one is known.
        #[serde(default)]
        spectral_cp: bool,
        /// Interval for `bound − S²`.
        slack: Option<[f64; 2]>,
    },
    Galerkin {
        measure: String,
        degrees: Vec<u32>,
        #[serde(default)]
        reference: ReferenceDecl,
        #[serde(default)]
        compare_closed_form: bool,
        closed_form_tol: Option<f64>,
        in_span_tol: Option<f64>,
        residual_tol: Option<f64>,
        identity_points: Option<usize>,
        s_squared: Option<Expected>,
        /// Also require the discrepancy bound to hold with equality.
        #[serde(default)]
        bound_tight: bool,
    },
    Spectral {
        measure: String,
        #[serde(default)]
        degrees: Vec<u32>,
        grid_nodes: Option<usize>,
        cp_tol: Option<f64>,
        weight: Option<String>,
        condition_degree: Option<u32>,
        /// Check `S² ≤ (Cp − 2)∫x² + 1` with the closed-form kernel.
        #[serde(default)]
        discrepancy_chain: bool,
    },
    Clt {
        measure: String,
        n_list: Vec<usize>,
        #[serde(default = "all_checks")]
        checks: Vec<Check>,
        samples: Option<usize>,
        seeds: Option<usize>,
        galerkin_degree: Option<u32>,
        rio_n: Option<usize>,
        propagation: Option<PropagationDecl>,
        fisher: Option<FisherDecl>,
        /// Fit slope of `log W₂²` against `log n` over `n ≥ slope_from`.
        slope: Option<[f64; 2]>,
        slope_from: Option<usize>,
    },
    Stability {
        measure: String,
        weight: Option<String>,
    },
}

fn all_checks() -> Vec<Check> {
    Check::ALL.to_vec()
}

impl TaskDecl {
    pub fn measure(&self) -> &str {
        match self {
            TaskDecl::Kernel1d { measure, .. }
            | TaskDecl::Galerkin { measure, .. }
            | TaskDecl::Spectral { measure, .. }
            | TaskDecl::Clt { measure, .. }
            | TaskDecl::Stability { measure, .. } => measure,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            TaskDecl::Kernel1d { .. } => "kernel1d",
            TaskDecl::Galerkin { .. } => "galerkin",
            TaskDecl::Spectral { .. } => "spectral",
            TaskDecl::Clt { .. } => "clt",
            TaskDecl::Stability { .. } => "stability",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random choice derives from it.
    pub seed: u64,
    #[serde(default)]
    pub integration: IntegrationConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(rename = "measure", default)]
    pub measures: Vec<MeasureDecl>,
    #[serde(rename = "task", default)]
    pub tasks: Vec<TaskDecl>,
}

fn line_col(source: &str, offset: usize) -> (usize, usize) {
    let before = &source[..offset.min(source.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map(|i| i + 1).unwrap_or(0) + 1;
    (line, column)
}

fn config_error(source: &str, span: std::ops::Range<usize>, message: impl Into<String>) -> Error {
    let (line, column) = line_col(source, span.start);
    Error::Config { line, column, message: message.into() }
}

/// Position of `key = ...` inside the `index`-th `[[task]]` table, or of the
/// table header when the key is not written on its own line.
fn task_field_position(source: &str, index: usize, key: &str) -> (usize, usize) {
    let mut seen = 0;
    let mut header = None;
    for (no, line) in source.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            if header.is_some() {
                break;
            }
            if t == "[[task]]" {
                if seen == index {
                    header = Some(no + 1);
                }
                seen += 1;
            }
            continue;
        }
        if header.is_some() {
            if let Some(rest) = t.strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    let column = line.find('=').map(|c| c + 1 + line[c + 1..].len() - line[c + 1..].trim_start().len()).unwrap_or(0) + 1;
                    return (no + 1, column);
                }
            }
        }
    }
    (header.unwrap_or(0), 1)
}

/// A parsed configuration with its measures built.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub measures: HashMap<String, MeasureSpec>,
}

impl ExperimentConfig {
    /// Parses and validates; errors carry line and column.
    pub fn parse(source: &str) -> Result<LoadedConfig> {
        let mut config: ExperimentConfig = toml::from_str(source).map_err(|e| {
            let (line, column) = e.span().map(|s| line_col(source, s.start)).unwrap_or((0, 0));
            Error::Config { line, column, message: e.message().to_string() }
        })?;
        if let Some(seed) = seed_override()? {
            config.seed = seed;
        }
        config.integration.seed = config.seed;
        let measures = build_measures(source, &config)?;
        for (i, task) in config.tasks.iter().enumerate() {
            let m = task.measure();
            if !measures.contains_key(m) {
                let (line, column) = task_field_position(source, i, "measure");
                return Err(Error::Config { line, column, message: format!("task references undeclared measure '{m}'") });
            }
        }
        Ok(LoadedConfig { config, measures })
    }
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_OVERRIDE_ENV) {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config { line: 0, column: 0, message: format!("{SEED_OVERRIDE_ENV} must be an integer, got '{v}'") }),
        Err(_) => Ok(None),
    }
}

fn build_measures(source: &str, config: &ExperimentConfig) -> Result<HashMap<String, MeasureSpec>> {
    let mut out: HashMap<String, MeasureSpec> = HashMap::new();
    for decl in &config.measures {
        let name = decl.name.get_ref().clone();
        let at = |msg: String| config_error(source, decl.name.span(), msg);
        if out.contains_key(&name) {
            return Err(at(format!("measure '{name}' declared twice")));
        }
        let sources = [decl.catalog.is_some(), decl.density.is_some(), decl.product.is_some()];
        if sources.iter().filter(|&&b| b).count() != 1 {
            return Err(at(format!("measure '{name}' needs exactly one of catalog, density or product")));
        }
        let mut spec = if let Some(c) = &decl.catalog {
            catalog(c, &decl.params).map_err(|e| at(e.to_string()))?
        } else if let Some(expr) = &decl.density {
            let dim = decl.dim.unwrap_or(1);
            let support = decl.support.clone().ok_or_else(|| at(format!("density measure '{name}' needs a support box")))?;
            let bounds = support.iter().map(|b| (b[0], b[1])).collect();
            let kinks = if decl.kinks.is_empty() { vec![Vec::new(); dim] } else { decl.kinks.clone() };
            MeasureSpec::from_expression(expr, dim, bounds, kinks).map_err(|e| at(e.to_string()))?
        } else {
            let parts = decl.product.as_ref().unwrap();
            let mut comps = Vec::new();
            for p in parts {
                let c = out
                    .get(p.get_ref())
                    .ok_or_else(|| config_error(source, p.span(), format!("product factor '{}' is not declared above", p.get_ref())))?;
                comps.push(c.clone());
            }
            MeasureSpec::product(comps).map_err(|e| at(e.to_string()))?
        };
        if let Some(a) = decl.scale {
            spec = spec.scale(a).map_err(|e| at(e.to_string()))?;
        }
        if let Some(v) = &decl.shift {
            spec = spec.translate(v).map_err(|e| at(e.to_string()))?;
        }
        if decl.standardize {
            spec = standardize(&spec, &config.integration).map_err(|e| at(e.to_string()))?;
        }
        if let Some(cp) = decl.poincare {
            spec = spec.with_known_poincare(Some(cp));
        }
        out.insert(name, spec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_full_config() {
        let src = r#"
seed = 3

[integration]
mode = "tensor"

[output]
formats = ["csv", "md"]

[[measure]]
name = "e"
catalog = "centered-exponential"
params = [1.0]

[[measure]]
name = "pair"
product = ["e", "e"]

[[task]]
kind = "clt"
measure = "e"
n_list = [1, 2]
checks = ["w2-rate", "skewness"]
"#;
        let loaded = ExperimentConfig::parse(src).unwrap();
        assert_eq!(loaded.measures["pair"].dim(), 2);
        assert_eq!(loaded.config.tasks.len(), 1);
        assert_eq!(loaded.config.integration.seed, 3);
    }

    #[test]
    fn errors_carry_positions() {
        let src = "seed = 1\n[[task]]\nkind = \"spectral\"\nmeasure = \"ghost\"\n";
        match ExperimentConfig::parse(src) {
            Err(Error::Config { line, column, .. }) => assert_eq!((line, column), (4, 11)),
            other => panic!("{other:?}"),
        }
        let src = "seed = 1\n[[measure]]\nname = \"g\"\ncatalog = \"gaussian\"\nparams = [1.0]\nbogus = 2\n";
        match ExperimentConfig::parse(src) {
            Err(Error::Config { line, .. }) => assert_eq!(line, 6),
            other => panic!("{other:?}"),
        }
        assert!(matches!(ExperimentConfig::parse("[output]\n"), Err(Error::Config { .. })));
    }
}
