//! TOML experiment configuration. Unknown keys are rejected; command-line
//! overrides are applied on top of the file before validation.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use sketchsolve::certificate::DEFAULT_CONFIDENCE_SLACK;
use sketchsolve::data::{MatrixSource, MetricRule, ProblemRecipe, RhsRule};
use sketchsolve::inner::{CgOptions, InnerMethod, InnerSketch};
use sketchsolve::primal::{ErrorBound, ErrorMagnitude, InexactnessModel, SigmaSequence};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SKETCHSOLVE_OUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Rk,
    Rbk,
    Irbk,
    Rcd,
    Rbcd,
    Irbcd,
    Ibasic,
    IbasicStructured,
    Sdsa,
    Isdsa,
    IsdsaStructured,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Rk => "rk",
            Method::Rbk => "rbk",
            Method::Irbk => "irbk",
            Method::Rcd => "rcd",
            Method::Rbcd => "rbcd",
            Method::Irbcd => "irbcd",
            Method::Ibasic => "ibasic",
            Method::IbasicStructured => "ibasic-structured",
            Method::Sdsa => "sdsa",
            Method::Isdsa => "isdsa",
            Method::IsdsaStructured => "isdsa-structured",
        }
    }

    pub fn is_dual(self) -> bool {
        matches!(self, Method::Sdsa | Method::Isdsa | Method::IsdsaStructured)
    }

    pub fn is_structured(self) -> bool {
        matches!(
            self,
            Method::Irbk | Method::Irbcd | Method::IbasicStructured | Method::IsdsaStructured
        )
    }

    pub fn is_abstract(self) -> bool {
        matches!(self, Method::Ibasic | Method::Isdsa)
    }

    /// Metric forced by the method, if any.
    fn forced_metric(self) -> Option<MetricRule> {
        match self {
            Method::Rk | Method::Rbk | Method::Irbk => Some(MetricRule::Identity),
            Method::Rcd | Method::Rbcd | Method::Irbcd => Some(MetricRule::EqualToA),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    DenseGaussian,
    SparseGaussian,
    GramGaussian,
    Libsvm,
    Container,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Identity,
    EqualToA,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub source: Option<SourceKind>,
    pub m: Option<usize>,
    pub n: Option<usize>,
    pub density: Option<f64>,
    pub path: Option<PathBuf>,
    /// Column count for LIBSVM files (defaults to the largest index).
    pub columns: Option<usize>,
    #[serde(default)]
    pub normalize_rows: bool,
    /// Explicit right-hand side; planted Gaussian when absent.
    pub rhs: Option<Vec<f64>>,
    pub metric: Option<MetricKind>,
    /// Defaults to the top-level seed.
    pub seed: Option<u64>,
    /// Free-text note on how the instance was scaled down.
    pub note: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SketchChoice {
    Block,
    Coordinate,
    Gaussian,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub omega: Option<f64>,
    pub tol: Option<f64>,
    pub max_iters: Option<usize>,
    /// Block size.
    pub d: Option<usize>,
    /// Sketch family for the general methods.
    pub sketch: Option<SketchChoice>,
    #[serde(default)]
    pub track_inexactness: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerKind {
    Exact,
    Cg,
    NestedSp,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerSection {
    pub kind: Option<InnerKind>,
    pub r: Option<usize>,
    pub check_definite: Option<bool>,
    /// Block size of the nested sketch; single coordinates when absent.
    pub block: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundChoice {
    Fixed,
    Geometric,
    ProportionalDistance,
    ProportionalFValue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MagnitudeChoice {
    Boundary,
    Uniform,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InexactnessSection {
    pub bound: Option<BoundChoice>,
    pub sigma: Option<f64>,
    pub ratio: Option<f64>,
    pub q: Option<f64>,
    #[serde(default)]
    pub orthogonal: bool,
    pub magnitude: Option<MagnitudeChoice>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationSection {
    pub slack: Option<f64>,
    /// Sketch draws for spectral and inner-contraction estimates when the
    /// support is too large to enumerate.
    pub samples: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub summary: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub name: Option<String>,
    pub method: Option<Method>,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    #[serde(default)]
    pub problem: ProblemSection,
    #[serde(default)]
    pub solver: SolverSection,
    pub inner: Option<InnerSection>,
    pub inexactness: Option<InexactnessSection>,
    #[serde(default)]
    pub validation: ValidationSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub method: Option<Method>,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub omega: Option<f64>,
    pub tol: Option<f64>,
    pub max_iters: Option<usize>,
    pub d: Option<usize>,
    pub r: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub name: String,
    pub method: Method,
    pub seed: u64,
    pub trials: usize,
    pub recipe: ProblemRecipe,
    /// Set for container sources, which bypass the recipe.
    pub container: Option<PathBuf>,
    pub metric_override: Option<MetricRule>,
    pub problem_note: Option<String>,
    pub omega: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub sketch: SketchChoice,
    pub d: Option<usize>,
    pub inner: Option<InnerMethod>,
    pub inexactness: InexactnessModel,
    pub track_inexactness: bool,
    pub slack: f64,
    pub samples: usize,
    pub trace_path: PathBuf,
    pub summary_path: PathBuf,
}

pub const DEFAULT_OMEGA: f64 = 1.0;
pub const DEFAULT_TOL: f64 = 1e-5;
pub const DEFAULT_MAX_ITERS: usize = 100_000;
pub const DEFAULT_TRIALS: usize = 1;
pub const DEFAULT_SAMPLES: usize = 2000;

pub fn load(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let raw = parse_str(&text).with_context(|| format!("in config {}", path.display()))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("experiment");
    resolve(raw, overrides, stem)
}

pub fn parse_str(text: &str) -> Result<RawConfig> {
    Ok(toml::from_str(text)?)
}

fn required<T>(value: Option<T>, key: &str) -> Result<T> {
    value.with_context(|| format!("missing required key `{key}`"))
}

pub fn recipe_from(problem: &ProblemSection, seed: u64) -> Result<(ProblemRecipe, Option<PathBuf>)> {
    let source_kind = required(problem.source, "problem.source")?;
    let dims = || -> Result<(usize, usize)> {
        Ok((required(problem.m, "problem.m")?, required(problem.n, "problem.n")?))
    };
    let mut container = None;
    let source = match source_kind {
        SourceKind::DenseGaussian => {
            let (m, n) = dims()?;
            MatrixSource::DenseGaussian { m, n }
        }
        SourceKind::SparseGaussian => {
            let (m, n) = dims()?;
            let density = required(problem.density, "problem.density")?;
            if !(density > 0.0 && density <= 1.0) {
                bail!("problem.density must lie in (0, 1], got {density}");
            }
            MatrixSource::SparseGaussian { m, n, density }
        }
        SourceKind::GramGaussian => {
            let (m, n) = dims()?;
            if m < n {
                bail!("problem.m must be at least problem.n for gram-gaussian (A = PᵀP must be positive definite)");
            }
            MatrixSource::GramGaussian { m, n }
        }
        SourceKind::Libsvm => MatrixSource::Libsvm {
            path: required(problem.path.clone(), "problem.path")?,
            n_override: problem.columns,
        },
        SourceKind::Container => {
            let path = required(problem.path.clone(), "problem.path")?;
            container = Some(path.clone());
            // placeholder; the container supplies A, b and B
            MatrixSource::DenseGaussian { m: 1, n: 1 }
        }
    };
    if source_kind != SourceKind::Libsvm && (problem.columns.is_some() || problem.normalize_rows) {
        bail!("problem.columns and problem.normalize_rows apply to libsvm sources only");
    }
    if source_kind == SourceKind::Container && problem.rhs.is_some() {
        bail!("problem.rhs cannot be combined with a container source");
    }
    let recipe = ProblemRecipe {
        source,
        rhs: problem.rhs.clone().map_or(RhsRule::PlantedGaussian, RhsRule::Explicit),
        metric: match problem.metric {
            Some(MetricKind::EqualToA) => MetricRule::EqualToA,
            _ => MetricRule::Identity,
        },
        seed: problem.seed.unwrap_or(seed),
        normalize_rows: problem.normalize_rows,
    };
    Ok((recipe, container))
}

fn inner_from(section: Option<&InnerSection>, method: Method) -> Result<Option<InnerMethod>> {
    if !method.is_structured() {
        return Ok(None);
    }
    let section = required(section, "inner")?;
    let kind = section.kind.unwrap_or(InnerKind::Cg);
    let r = || required(section.r, "inner.r");
    Ok(Some(match kind {
        InnerKind::Exact => InnerMethod::Exact,
        InnerKind::Cg => {
            let mut opts = CgOptions::new(r()?);
            if let Some(check) = section.check_definite {
                opts.check_definite = check;
            }
            InnerMethod::Cg(opts)
        }
        InnerKind::NestedSp => InnerMethod::NestedSketch {
            iterations: r()?,
            sketch: section.block.map_or(InnerSketch::SingleCoordinate, InnerSketch::Block),
        },
    }))
}

fn inexactness_from(section: Option<&InexactnessSection>, method: Method) -> Result<InexactnessModel> {
    if !method.is_abstract() {
        return Ok(InexactnessModel::Exact);
    }
    let s = required(section, "inexactness")?;
    let bound = match required(s.bound, "inexactness.bound")? {
        BoundChoice::Fixed => ErrorBound::Fixed(required(s.sigma, "inexactness.sigma")?),
        BoundChoice::Geometric => ErrorBound::Sequence(SigmaSequence::Geometric {
            initial: required(s.sigma, "inexactness.sigma")?,
            ratio: required(s.ratio, "inexactness.ratio")?,
        }),
        BoundChoice::ProportionalDistance => ErrorBound::ProportionalDistance(required(s.q, "inexactness.q")?),
        BoundChoice::ProportionalFValue => ErrorBound::ProportionalFValue(required(s.q, "inexactness.q")?),
    };
    bound.validate().map_err(|e| anyhow::anyhow!("[inexactness]: {e}"))?;
    Ok(InexactnessModel::Abstract {
        bound,
        orthogonal: s.orthogonal,
        magnitude: match s.magnitude {
            Some(MagnitudeChoice::Uniform) => ErrorMagnitude::Uniform,
            _ => ErrorMagnitude::Boundary,
        },
    })
}

pub fn resolve(raw: RawConfig, ov: &Overrides, default_name: &str) -> Result<ExperimentConfig> {
    let method = required(ov.method.or(raw.method), "method")?;
    let seed = ov.seed.or(raw.seed).unwrap_or(0);
    let trials = ov.trials.or(raw.trials).unwrap_or(DEFAULT_TRIALS);
    if trials == 0 {
        bail!("trials must be at least 1");
    }
    let (recipe, container) = recipe_from(&raw.problem, seed)?;
    let source_kind = raw.problem.source.expect("checked by recipe_from");

    let metric_override = match (method.forced_metric(), raw.problem.metric) {
        (Some(MetricRule::Identity), Some(MetricKind::EqualToA)) => {
            bail!("method `{method}` uses the identity metric; problem.metric = \"equal-to-a\" is incompatible")
        }
        (Some(MetricRule::EqualToA), Some(MetricKind::Identity)) => {
            bail!("method `{method}` uses the metric B = A; problem.metric = \"identity\" is incompatible")
        }
        (forced, _) => forced,
    };
    let wants_spd = metric_override == Some(MetricRule::EqualToA) || raw.problem.metric == Some(MetricKind::EqualToA);
    if wants_spd && matches!(source_kind, SourceKind::DenseGaussian | SourceKind::SparseGaussian) {
        bail!(
            "method `{method}` with metric B = A requires a symmetric positive definite A; \
             problem.source = {:?} is not (use gram-gaussian)",
            source_kind
        );
    }

    let omega = ov.omega.or(raw.solver.omega).unwrap_or(DEFAULT_OMEGA);
    if !(omega > 0.0 && omega < 2.0) {
        bail!("solver.omega must lie in (0, 2), got {omega}");
    }
    let tol = ov.tol.or(raw.solver.tol).unwrap_or(DEFAULT_TOL);
    if !(tol >= 0.0) {
        bail!("solver.tol must be nonnegative, got {tol}");
    }
    let max_iters = ov.max_iters.or(raw.solver.max_iters).unwrap_or(DEFAULT_MAX_ITERS);
    let d = ov.d.or(raw.solver.d);

    let sketch = match method {
        Method::Rk | Method::Rcd => {
            if raw.solver.sketch.is_some_and(|s| s != SketchChoice::Coordinate) {
                bail!("method `{method}` samples single rows; solver.sketch must be \"coordinate\" or unset");
            }
            SketchChoice::Coordinate
        }
        Method::Rbk | Method::Irbk | Method::Rbcd | Method::Irbcd => {
            if raw.solver.sketch.is_some_and(|s| s != SketchChoice::Block) {
                bail!("method `{method}` uses block sketches; solver.sketch must be \"block\" or unset");
            }
            required(d, "solver.d")?;
            SketchChoice::Block
        }
        _ => {
            let choice = raw.solver.sketch.unwrap_or(if d.is_some() { SketchChoice::Block } else { SketchChoice::Coordinate });
            if choice == SketchChoice::Block {
                required(d, "solver.d")?;
            }
            choice
        }
    };
    if d == Some(0) {
        bail!("solver.d must be at least 1");
    }

    let mut inner = inner_from(raw.inner.as_ref(), method)?;
    if let (Some(r), Some(inner)) = (ov.r, inner.as_mut()) {
        match inner {
            InnerMethod::Cg(opts) => opts.iterations = r,
            InnerMethod::NestedSketch { iterations, .. } => *iterations = r,
            InnerMethod::Exact => {}
        }
    }
    let inexactness = inexactness_from(raw.inexactness.as_ref(), method)?;

    let slack = raw.validation.slack.unwrap_or(DEFAULT_CONFIDENCE_SLACK);
    if !(slack >= 0.0) {
        bail!("validation.slack must be nonnegative");
    }
    let samples = raw.validation.samples.unwrap_or(DEFAULT_SAMPLES);

    let name = raw.name.unwrap_or_else(|| default_name.to_string());
    let dir = ov
        .out_dir
        .clone()
        .or(raw.output.dir)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let trace_path = dir.join(raw.output.trace.unwrap_or_else(|| format!("{name}_trace.csv").into()));
    let summary_path = dir.join(raw.output.summary.unwrap_or_else(|| format!("{name}_summary.jsonl").into()));

    Ok(ExperimentConfig {
        name,
        method,
        seed,
        trials,
        recipe,
        container,
        metric_override,
        problem_note: raw.problem.note,
        omega,
        tol,
        max_iters,
        sketch,
        d,
        inner,
        inexactness,
        track_inexactness: raw.solver.track_inexactness,
        slack,
        samples,
        trace_path,
        summary_path,
    })
}

/// Parsed `gen` recipe file: a `[problem]` table plus an optional seed.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeFile {
    pub seed: Option<u64>,
    pub problem: ProblemSection,
}

pub fn load_recipe(path: &Path) -> Result<(ProblemRecipe, Option<PathBuf>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading recipe {}", path.display()))?;
    let file: RecipeFile = toml::from_str(&text).with_context(|| format!("in recipe {}", path.display()))?;
    recipe_from(&file.problem, file.seed.unwrap_or(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve_str(text: &str, ov: &Overrides) -> Result<ExperimentConfig> {
        resolve(parse_str(text)?, ov, "t")
    }

    const MINIMAL: &str = r#"
method = "rbk"
seed = 7
[problem]
source = "dense-gaussian"
m = 100
n = 70
[solver]
d = 30
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = resolve_str(MINIMAL, &Overrides::default()).unwrap();
        assert_eq!(cfg.method, Method::Rbk);
        assert_eq!(cfg.omega, 1.0);
        assert_eq!(cfg.tol, 1e-5);
        assert_eq!(cfg.trials, 1);
        assert_eq!(cfg.d, Some(30));
        assert_eq!(cfg.recipe.seed, 7);
        assert_eq!(cfg.recipe.source, MatrixSource::DenseGaussian { m: 100, n: 70 });
        assert_eq!(cfg.metric_override, Some(MetricRule::Identity));
    }

    #[test]
    fn flags_override_file() {
        let text = format!("{MINIMAL}tol = 1e-5\n");
        let ov = Overrides {
            tol: Some(1e-7),
            ..Default::default()
        };
        assert_eq!(resolve_str(&text, &ov).unwrap().tol, 1e-7);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = parse_str(&format!("{MINIMAL}bogus = 3\n")).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        assert!(parse_str("method = \"rbk\"\ncolour = 1\n").is_err());
    }

    #[test]
    fn type_mismatch_is_an_error() {
        assert!(parse_str("method = \"rbk\"\ntrials = \"many\"\n").is_err());
        assert!(parse_str("method = \"gmres\"\n").is_err());
    }

    #[test]
    fn irbcd_needs_spd_problem() {
        let text = MINIMAL.replace("\"rbk\"", "\"irbcd\"") + "[inner]\nr = 5\n";
        let err = resolve_str(&text, &Overrides::default()).unwrap_err().to_string();
        assert!(err.contains("symmetric positive definite"), "{err}");
        let ok = text.replace("dense-gaussian", "gram-gaussian").replace("n = 70", "n = 60");
        resolve_str(&ok, &Overrides::default()).unwrap();
    }

    #[test]
    fn missing_keys_are_named() {
        let err = resolve_str("method = \"rbk\"\n[problem]\nsource = \"dense-gaussian\"\nm = 3\nn = 2\n", &Overrides::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("solver.d"), "{err}");
        let err = resolve_str("[problem]\nsource = \"dense-gaussian\"\n", &Overrides::default()).unwrap_err().to_string();
        assert!(err.contains("method"), "{err}");
        let err = resolve_str(&MINIMAL.replace("\"rbk\"", "\"irbk\""), &Overrides::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("inner"), "{err}");
    }

    #[test]
    fn out_dir_precedence() {
        let ov = Overrides {
            out_dir: Some("/tmp/flag".into()),
            ..Default::default()
        };
        let cfg = resolve_str(MINIMAL, &ov).unwrap();
        assert_eq!(cfg.trace_path, PathBuf::from("/tmp/flag/t_trace.csv"));
        assert_eq!(cfg.summary_path, PathBuf::from("/tmp/flag/t_summary.jsonl"));
    }
}
